mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pmisc::combiner::Layout;
use pmisc::knots::{KnotFamily, LevelToKnots};
use pmisc::midx::{MultiIndex, MultiIndexSet};
use pmisc::models::Genz2dgpNoisy;

fn pmisc(args: &[&str], env_root: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pmisc"));
    cmd.args(args).arg("--quiet");
    match env_root {
        Some(r) => cmd.env("PMISC_OUTPUT_ROOT", r),
        None => cmd.env_remove("PMISC_OUTPUT_ROOT"),
    };
    cmd.output().unwrap()
}

const SMALL_METRICS: &str = "[metrics]\nn_mc = 300\nn_ks = 300\npdf_points = 50\n[reference]\nw = 5\n[output]\nsurface_points = 11\n";

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, format!("{body}{SMALL_METRICS}")).unwrap();
    p.to_str().unwrap().to_string()
}

fn rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

fn csv_files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    v.sort();
    v
}

#[test]
fn config_errors_exit_two_with_a_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.toml", "problem = \"genz2dgp\"\nalgorithm = \"misc\"\nbudget = 3\n");
    let out = pmisc(&["run", &cfg], None);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains("budget"), "{err}");

    let missing = tmp.path().join("missing.toml");
    assert_eq!(pmisc(&["run", missing.to_str().unwrap()], None).status.code(), Some(2));
    let out = pmisc(&["compare", tmp.path().to_str().unwrap(), tmp.path().to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_failures_exit_three() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "sc.toml", "problem = \"genz2dgp\"\nalgorithm = \"reference_sc\"\n");
    // The output directory cannot be created beneath a regular file.
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = pmisc(&["run", &cfg, "--output-dir", blocker.join("out").to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn smolyak_reference_writes_five_active_terms() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "sc.toml", "problem = \"genz2dgp\"\nalgorithm = \"reference_sc\"\n[sc]\nw = 2\n");
    let out = pmisc(&["run", &cfg], Some(tmp.path()));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // Default output location is $PMISC_OUTPUT_ROOT/<config stem>.
    let dir = tmp.path().join("sc");
    let miset = rows(&dir.join("miset.csv"));
    assert_eq!(miset.len(), 6);
    assert_eq!(miset.iter().filter(|r| &r[3] != "0").count(), 5);
    assert_eq!(rows(&dir.join("errors.csv")).len(), 1);
    assert_eq!(rows(&dir.join("surface.csv")).len(), 121);
    // 13 distinct points at fidelity 8, each costing 1e8.
    let cost: f64 = rows(&dir.join("errors.csv"))[0][0].parse().unwrap();
    assert_eq!(cost, 13.0 * 1e8);
}

#[test]
fn reruns_are_bit_exact_and_costs_reconcile() {
    let tmp = tempfile::tempdir().unwrap();
    let body = "problem = \"genz2dgp\"\nalgorithm = \"plateau_misc\"\nseed = 2\n[stopping]\nmax_cost = 3e4\n[snapshots]\nper_decade = 4\n";
    let cfg = write_config(tmp.path(), "pm.toml", body);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b, &a] {
        let out = pmisc(&["run", &cfg, "--output-dir", d.to_str().unwrap()], None);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let files = csv_files(&a);
    assert_eq!(files, csv_files(&b));
    for f in [
        "history.csv", "errors.csv", "pdf.csv", "surface.csv", "miset.csv", "envelope_1.csv", "coeffs_1.csv", "plateau_1.csv",
    ] {
        assert!(files.contains(&f.to_string()), "missing {f}");
    }
    for f in &files {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }

    // Every snapshot cost equals the ledger recomputed from its miset, and
    // appears in the history when the snapshot was taken mid-run.
    let model = Genz2dgpNoisy::new(2);
    let layout = Layout { n_model: 1, n_y: 2, family: KnotFamily::SymmetricLeja, rule: LevelToKnots::TwoStep };
    let errors = rows(&a.join("errors.csv"));
    let history: Vec<f64> = rows(&a.join("history.csv")).iter().map(|r| r[5].parse().unwrap()).collect();
    assert!(history.windows(2).all(|w| w[0] <= w[1]));
    for (k, e) in errors.iter().enumerate() {
        let miset = rows(&a.join(format!("miset_{k}.csv")));
        let set = MultiIndexSet::from_indices(
            3,
            miset.iter().map(|r| MultiIndex::new((0..3).map(|i| r[i].parse().unwrap()).collect()).unwrap()),
        )
        .unwrap();
        let cost: f64 = e[0].parse().unwrap();
        let ledger = common::ledger_cost(&model, &layout, &set);
        assert!((ledger - cost).abs() <= 1e-9 * cost, "snapshot {k}: {ledger} vs {cost}");
        if k + 1 < errors.len() {
            assert!(history.contains(&cost), "snapshot {k} cost {cost} not in history");
        }
    }
}

#[test]
fn compare_aligns_on_preceding_snapshots() {
    let tmp = tempfile::tempdir().unwrap();
    let misc = write_config(
        tmp.path(),
        "misc.toml",
        "problem = \"genz2dgp\"\nalgorithm = \"misc\"\n[stopping]\nmax_cost = 2e4\n[snapshots]\nper_decade = 3\n",
    );
    let pm = write_config(
        tmp.path(),
        "pm.toml",
        "problem = \"genz2dgp\"\nalgorithm = \"plateau_misc\"\n[stopping]\nmax_cost = 2e4\n[snapshots]\nper_decade = 5\n",
    );
    for c in [&misc, &pm] {
        assert!(pmisc(&["run", c], Some(tmp.path())).status.success());
    }
    let (dm, dp) = (tmp.path().join("misc"), tmp.path().join("pm"));
    let out_dir = tmp.path().join("cmp");
    let out = pmisc(
        &["compare", dp.to_str().unwrap(), dm.to_str().unwrap(), "--output-dir", out_dir.to_str().unwrap()],
        None,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut rdr = csv::Reader::from_path(out_dir.join("comparison.csv")).unwrap();
    let header = rdr.headers().unwrap().clone();
    assert_eq!(&header[1], "cost_a_nearest_preceding");
    let aligned: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert!(!aligned.is_empty());
    for r in &aligned {
        let c: f64 = r[0].parse().unwrap();
        let (ca, cb): (f64, f64) = (r[1].parse().unwrap(), r[2].parse().unwrap());
        assert!(ca <= c && cb <= c);
        let (a, b, q): (f64, f64, f64) = (r[3].parse().unwrap(), r[4].parse().unwrap(), r[5].parse().unwrap());
        assert_eq!(q, a / b);
    }

    let same = tmp.path().join("same");
    let out = pmisc(
        &["compare", dm.to_str().unwrap(), dm.to_str().unwrap(), "--output-dir", same.to_str().unwrap()],
        None,
    );
    assert!(out.status.success());
    for r in rows(&same.join("comparison.csv")) {
        for i in [5, 8, 11] {
            let q: f64 = r[i].parse().unwrap();
            assert!(q == 1.0 || q.is_nan(), "ratio {q}");
        }
    }
}
