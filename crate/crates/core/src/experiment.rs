//! Experiment orchestration behind the `pmisc` binary: config parsing,
//! algorithm runs, reference construction and CSV output.
//!
//! Configs are TOML. Every section is optional except the two top-level
//! choices:
//!
//! ```toml
//! problem = "genz2dgp"        # or "parabolic1d"
//! algorithm = "plateau_misc"  # misc | plateau_misc | reference_sc | adaptive_sc_single_fidelity
//! seed = 0
//!
//! [knots]
//! family = "symmetric_leja"
//! rule = "two_step"
//!
//! [stopping]
//! max_cost = 1e5
//!
//! [reference]
//! w = 8
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::adaptive::{build_reference, run_misc, run_plateau_misc, AdaptConfig, Estimator, RunResult, Snapshot, StopReason};
use crate::combiner::{csv_writer, fmt_f64, Layout, Surrogate};
use crate::error::{Error, Result};
use crate::knots::{is_nested, KnotFamily, LevelToKnots};
use crate::metrics::{kde_pdf, pdf_grid, MetricConfig, ReferenceSamples};
use crate::midx::{MultiIndex, MultiIndexSet};
use crate::models::{EvalCache, FixedFidelity, Genz2dgpNoisy, ModelHierarchy, Parabolic1dNoisy};
use crate::plateau::{detect_plateau, write_plateau_csv, PlateauParams, PlateauReport};
use crate::spectral::{envelope, to_spectral};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "PMISC_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Problem {
    Genz2dgp,
    Parabolic1d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Misc,
    PlateauMisc,
    ReferenceSc,
    AdaptiveScSingleFidelity,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: Problem,
    pub algorithm: Algorithm,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub knots: KnotsConfig,
    #[serde(default)]
    pub stopping: StoppingConfig,
    #[serde(default)]
    pub plateau: PlateauParams,
    #[serde(default)]
    pub metrics: MetricConfig,
    #[serde(default)]
    pub reference: ReferenceConfig,
    #[serde(default)]
    pub sc: ScConfig,
    #[serde(default)]
    pub snapshots: SnapshotConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnotsConfig {
    pub family: KnotFamily,
    pub rule: LevelToKnots,
}

impl Default for KnotsConfig {
    fn default() -> Self {
        Self { family: KnotFamily::SymmetricLeja, rule: LevelToKnots::TwoStep }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StoppingConfig {
    pub max_cost: Option<f64>,
    pub max_iterations: Option<usize>,
    pub min_profit: f64,
}

/// The high-fidelity isotropic surrogate that errors are measured against.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceConfig {
    pub w: u32,
    /// Defaults to the hierarchy's highest level in every fidelity direction.
    pub alpha: Option<Vec<u32>>,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self { w: 8, alpha: None }
    }
}

/// Settings of the single-fidelity algorithms.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScConfig {
    /// Smolyak level of `reference_sc`.
    pub w: u32,
    /// Fidelity used by both single-fidelity algorithms; defaults to the
    /// reference fidelity.
    pub alpha: Option<Vec<u32>>,
}

impl Default for ScConfig {
    fn default() -> Self {
        Self { w: 2, alpha: None }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SnapshotConfig {
    /// Explicit cost thresholds. When absent, thresholds are log-spaced
    /// from `start` with `per_decade` steps per factor of ten.
    pub costs: Option<Vec<f64>>,
    pub start: f64,
    pub per_decade: u32,
}

impl Default for SnapshotConfig {
    fn default() -> Self {
        Self { costs: None, start: 10.0, per_decade: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Grid size per axis of `surface.csv`.
    pub surface_points: usize,
    /// Keep model evaluations in a file inside the output directory.
    pub cache: bool,
    /// Write `miset_<k>.csv` for every snapshot.
    pub snapshot_misets: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { surface_points: 101, cache: true, snapshot_misets: true }
    }
}

/// Command-line overrides applied after parsing.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// Process exit status for an error: 2 for configuration and input
/// problems, 3 for failures during the run.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) => 2,
        _ => 3,
    }
}

/// 1-based line of `key = ...` inside `[section]` (top level when empty).
fn key_line(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (n, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(h) = t.strip_prefix('[').and_then(|h| h.strip_suffix(']')) {
            current = h.trim().to_string();
            continue;
        }
        if current == section {
            if let Some(rest) = t.strip_prefix(key) {
                if rest.trim_start().starts_with('=') {
                    return Some(n + 1);
                }
            }
        }
    }
    if !section.is_empty() {
        let header = format!("[{section}]");
        return text.lines().position(|l| l.trim() == header).map(|n| n + 1);
    }
    None
}

fn config_error(text: &str, section: &str, key: &str, msg: impl std::fmt::Display) -> Error {
    let path = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
    match key_line(text, section, key) {
        Some(n) => Error::InvalidConfig(format!("line {n}: {path}: {msg}")),
        None => Error::InvalidConfig(format!("{path}: {msg}")),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn validate(&self, text: &str) -> Result<()> {
        let adaptive = matches!(self.algorithm, Algorithm::Misc | Algorithm::PlateauMisc | Algorithm::AdaptiveScSingleFidelity);
        if adaptive {
            let s = &self.stopping;
            if s.max_cost.is_none_or(|c| !c.is_finite()) && s.max_iterations.is_none() && !(s.min_profit > 0.0) {
                return Err(config_error(text, "stopping", "max_cost", "all stopping criteria are infinite"));
            }
            if s.max_cost.is_some_and(|c| c.is_nan() || c <= 0.0) {
                return Err(config_error(text, "stopping", "max_cost", "must be positive"));
            }
            if !(s.min_profit >= 0.0) {
                return Err(config_error(text, "stopping", "min_profit", "must be non-negative"));
            }
            if !is_nested(self.knots.family, self.knots.rule, 8) {
                return Err(config_error(
                    text,
                    "knots",
                    "rule",
                    format!("{:?} knots are not nested under {:?}", self.knots.family, self.knots.rule),
                ));
            }
        }
        if !(self.plateau.m_star > 0.0 && self.plateau.m_star.is_finite()) {
            return Err(config_error(text, "plateau", "m_star", "must be positive"));
        }
        if self.metrics.n_mc < 2 {
            return Err(config_error(text, "metrics", "n_mc", "must be at least 2"));
        }
        if self.metrics.n_ks < 1 {
            return Err(config_error(text, "metrics", "n_ks", "must be at least 1"));
        }
        if !(self.metrics.fd_step > 0.0 && self.metrics.fd_step < 1e-2) {
            return Err(config_error(text, "metrics", "fd_step", "must lie in (0, 1e-2)"));
        }
        if self.metrics.pdf_points < 2 {
            return Err(config_error(text, "metrics", "pdf_points", "must be at least 2"));
        }
        if self.output.surface_points < 2 {
            return Err(config_error(text, "output", "surface_points", "must be at least 2"));
        }
        if !(self.snapshots.start > 0.0) || self.snapshots.per_decade == 0 {
            return Err(config_error(text, "snapshots", "per_decade", "start and per_decade must be positive"));
        }
        let (n_model, cap) = match self.problem {
            Problem::Genz2dgp => (1, 8),
            Problem::Parabolic1d => (1, crate::models::PARABOLIC_MAX_LEVEL),
        };
        for (section, alpha) in [("reference", &self.reference.alpha), ("sc", &self.sc.alpha)] {
            if let Some(a) = alpha {
                if a.len() != n_model || a.iter().any(|&l| l == 0 || l > cap) {
                    return Err(config_error(text, section, "alpha", format!("needs {n_model} entries in 1..={cap}")));
                }
            }
        }
        Ok(())
    }

    fn hierarchy(&self) -> Box<dyn ModelHierarchy> {
        match self.problem {
            Problem::Genz2dgp => Box::new(Genz2dgpNoisy::new(self.seed)),
            Problem::Parabolic1d => Box::new(Parabolic1dNoisy::default()),
        }
    }

    fn reference_alpha(&self, model: &dyn ModelHierarchy) -> MultiIndex {
        let top = model.max_level().unwrap_or(1);
        let e = self.reference.alpha.clone().unwrap_or_else(|| vec![top; model.n_model()]);
        MultiIndex::new(e).expect("validated")
    }

    fn sc_alpha(&self, model: &dyn ModelHierarchy) -> MultiIndex {
        match &self.sc.alpha {
            Some(a) => MultiIndex::new(a.clone()).expect("validated"),
            None => self.reference_alpha(model),
        }
    }

    fn snapshot_costs(&self) -> Vec<f64> {
        if let Some(c) = &self.snapshots.costs {
            return c.clone();
        }
        let top = self.stopping.max_cost.filter(|c| c.is_finite()).unwrap_or(1e12);
        let step = 1.0 / self.snapshots.per_decade as f64;
        let mut out = Vec::new();
        let mut k = 0;
        loop {
            let c = self.snapshots.start * 10f64.powf(k as f64 * step);
            if c > top * (1.0 + 1e-12) {
                break;
            }
            out.push(c);
            k += 1;
        }
        out
    }

    fn adapt_config(&self) -> AdaptConfig {
        AdaptConfig {
            family: self.knots.family,
            rule: self.knots.rule,
            max_cost: self.stopping.max_cost.unwrap_or(f64::INFINITY),
            max_iterations: self.stopping.max_iterations,
            min_profit: self.stopping.min_profit,
            plateau: self.plateau,
            snapshot_costs: self.snapshot_costs(),
        }
    }
}

/// Resolves the output directory: CLI flag, then config, then
/// `$PMISC_OUTPUT_ROOT/<config stem>`, then `output/<config stem>`.
pub fn output_dir_for(config_path: &Path, cfg: &ExperimentConfig, overrides: &Overrides) -> PathBuf {
    if let Some(d) = &overrides.output_dir {
        return d.clone();
    }
    if let Some(d) = &cfg.output_dir {
        return d.clone();
    }
    let stem = config_path.file_stem().map(|s| s.to_os_string()).unwrap_or_else(|| "run".into());
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("output"));
    root.join(stem)
}

/// Loads a config file, applies overrides and runs it. Returns the output
/// directory.
pub fn run_experiment(config_path: &Path, overrides: &Overrides) -> Result<PathBuf> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(s) = overrides.seed {
        cfg.seed = s;
    }
    let dir = output_dir_for(config_path, &cfg, overrides);
    run_config(&cfg, &dir)?;
    Ok(dir)
}

/// What a finished run produced, for callers that want more than files.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub stop: Option<StopReason>,
    pub cost: f64,
    pub errors: Vec<(f64, f64, f64, f64)>,
    pub saturated: Vec<MultiIndex>,
}

fn label(alpha: &MultiIndex) -> String {
    alpha.entries().iter().map(|e| e.to_string()).collect::<Vec<_>>().join("_")
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Runs a validated config, writing every output into `dir`.
pub fn run_config(cfg: &ExperimentConfig, dir: &Path) -> Result<RunSummary> {
    fs::create_dir_all(dir)?;
    let model = cfg.hierarchy();
    let model: &dyn ModelHierarchy = model.as_ref();
    let cache = if cfg.output.cache {
        let name = match cfg.problem {
            Problem::Genz2dgp => format!("evaluations_genz2dgp_seed{}.cache", cfg.seed),
            Problem::Parabolic1d => "evaluations_parabolic1d.cache".to_string(),
        };
        EvalCache::with_file(dir.join(name))
    } else {
        EvalCache::new()
    };

    let result = execute(cfg, model, &cache, dir);
    cache.flush()?;
    result
}

fn execute(cfg: &ExperimentConfig, model: &dyn ModelHierarchy, cache: &EvalCache, dir: &Path) -> Result<RunSummary> {
    let alpha_ref = cfg.reference_alpha(model);
    log::info!("building reference at fidelity {alpha_ref}, w = {}", cfg.reference.w);
    let reference = build_reference(model, cfg.reference.w, &alpha_ref)?;
    let samples = ReferenceSamples::new(&reference, model.n_y(), &cfg.metrics)?;

    let (run, fixed_alpha): (RunOrSc, Option<MultiIndex>) = match cfg.algorithm {
        Algorithm::Misc => (RunOrSc::Run(Box::new(run_misc(model, &cfg.adapt_config(), cache)?)), None),
        Algorithm::PlateauMisc => (RunOrSc::Run(Box::new(run_plateau_misc(model, &cfg.adapt_config(), cache)?)), None),
        Algorithm::AdaptiveScSingleFidelity => {
            let alpha = cfg.sc_alpha(model);
            let fixed = FixedFidelity { inner: model, alpha: alpha.clone() };
            (RunOrSc::Run(Box::new(run_misc(&fixed, &cfg.adapt_config(), cache)?)), Some(alpha))
        }
        Algorithm::ReferenceSc => {
            let alpha = cfg.sc_alpha(model);
            let s = build_reference(model, cfg.sc.w, &alpha)?;
            let cost = model.cost(&alpha) * distinct_points(&s) as f64;
            (RunOrSc::Sc { surrogate: s, cost }, Some(alpha))
        }
    };

    let mut errors = Vec::new();
    let mut w = csv_writer(create(dir, "errors.csv")?);
    w.write_record(["snapshot_cost", "l2", "h1", "ks2"])?;
    let final_surrogate: Surrogate;
    let summary;
    match &run {
        RunOrSc::Run(r) => {
            for s in &r.snapshots {
                let e = samples.errors(&s.surrogate);
                w.write_record([fmt_f64(s.cost), fmt_f64(e.l2), fmt_f64(e.h1), fmt_f64(e.ks2)])?;
                errors.push((s.cost, e.l2, e.h1, e.ks2));
            }
            w.flush()?;
            write_history(dir, r, fixed_alpha.as_ref())?;
            write_misets(dir, r, fixed_alpha.as_ref(), cfg.output.snapshot_misets)?;
            match &fixed_alpha {
                Some(a) => {
                    let fixed = FixedFidelity { inner: model, alpha: a.clone() };
                    write_spectral(dir, r, &fixed, cache, Some(a), &cfg.plateau)?;
                }
                None => write_spectral(dir, r, model, cache, None, &cfg.plateau)?,
            }
            final_surrogate = r.surrogate.clone();
            summary = RunSummary {
                stop: Some(r.stop),
                cost: r.cost,
                errors: errors.clone(),
                saturated: r.saturated.iter().cloned().collect(),
            };
        }
        RunOrSc::Sc { surrogate, cost } => {
            let e = samples.errors(surrogate);
            w.write_record([fmt_f64(*cost), fmt_f64(e.l2), fmt_f64(e.h1), fmt_f64(e.ks2)])?;
            w.flush()?;
            errors.push((*cost, e.l2, e.h1, e.ks2));
            let alpha = fixed_alpha.clone().expect("single fidelity");
            write_history_header(dir, std::slice::from_ref(&alpha))?;
            write_miset_csv(
                dir.join("miset.csv"),
                &alpha,
                surrogate.set(),
                surrogate.coeffs(),
                &BTreeSet::new(),
                &BTreeSet::new(),
            )?;
            write_fidelity_spectrum(dir, &alpha, surrogate, &cfg.plateau, 0, &[])?;
            final_surrogate = surrogate.clone();
            summary = RunSummary { stop: None, cost: *cost, errors: errors.clone(), saturated: Vec::new() };
        }
    }

    if model.n_y() == 2 {
        final_surrogate.write_surface_csv(create(dir, "surface.csv")?, cfg.output.surface_points)?;
    }
    let ref_vals = samples.values();
    let sur_vals = samples.samples_of(&final_surrogate);
    let grid = pdf_grid(&[ref_vals, &sur_vals], cfg.metrics.pdf_points);
    let d_ref = kde_pdf(ref_vals, &grid)?;
    let d_sur = kde_pdf(&sur_vals, &grid)?;
    let mut w = csv_writer(create(dir, "pdf.csv")?);
    w.write_record(["grid", "reference", "surrogate"])?;
    for i in 0..grid.len() {
        w.write_record([fmt_f64(grid[i]), fmt_f64(d_ref[i]), fmt_f64(d_sur[i])])?;
    }
    w.flush()?;
    Ok(summary)
}

enum RunOrSc {
    Run(Box<RunResult>),
    Sc { surrogate: Surrogate, cost: f64 },
}

fn distinct_points(s: &Surrogate) -> usize {
    crate::combiner::collocation_requests(s.set(), s.layout())
        .map(|m| m.values().map(Vec::len).sum())
        .unwrap_or(0)
}

/// Joint index as written to CSVs: the pinned fidelity replaces the
/// wrapper's single dummy level.
fn display_index(m: &MultiIndex, layout: &Layout, fixed: Option<&MultiIndex>) -> MultiIndex {
    match fixed {
        Some(a) => MultiIndex::join(a, &m.parameter(layout.n_model)),
        None => m.clone(),
    }
}

fn display_alpha(alpha: &MultiIndex, fixed: Option<&MultiIndex>) -> MultiIndex {
    fixed.cloned().unwrap_or_else(|| alpha.clone())
}

fn write_history_header(dir: &Path, fidelities: &[MultiIndex]) -> Result<()> {
    let mut w = csv_writer(create(dir, "history.csv")?);
    let mut header: Vec<String> =
        ["iteration", "selected_index", "E", "W", "profit", "cumulative_cost"].map(String::from).to_vec();
    header.extend(fidelities.iter().map(|a| format!("n_{}", label(a))));
    header.push("saturated_fidelities".into());
    w.write_record(&header)?;
    w.flush()?;
    Ok(())
}

fn write_history(dir: &Path, r: &RunResult, fixed: Option<&MultiIndex>) -> Result<()> {
    let fids: BTreeSet<MultiIndex> = r.history.iter().flat_map(|h| h.points.keys().cloned()).collect();
    let mut w = csv_writer(create(dir, "history.csv")?);
    let mut header: Vec<String> =
        ["iteration", "selected_index", "E", "W", "profit", "cumulative_cost"].map(String::from).to_vec();
    header.extend(fids.iter().map(|a| format!("n_{}", label(&display_alpha(a, fixed)))));
    header.push("saturated_fidelities".into());
    w.write_record(&header)?;
    for h in &r.history {
        let mut row = vec![
            h.iteration.to_string(),
            display_index(&h.selected, &r.layout, fixed).to_string(),
            fmt_f64(h.error),
            fmt_f64(h.work),
            fmt_f64(h.profit),
            fmt_f64(h.cumulative_cost),
        ];
        row.extend(fids.iter().map(|a| h.points.get(a).copied().unwrap_or(0).to_string()));
        row.push(h.saturated.iter().map(label).collect::<Vec<_>>().join(";"));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Rows `alpha*, beta*, coefficient, role` with role `active` for `I`,
/// `margin` for indices only the surrogate uses and `evaluated` for paid
/// candidates outside both.
fn write_miset_csv(
    path: PathBuf,
    alpha: &MultiIndex,
    surrogate_set: &MultiIndexSet,
    coeffs: &BTreeMap<MultiIndex, i64>,
    margin: &BTreeSet<MultiIndex>,
    evaluated_only: &BTreeSet<MultiIndex>,
) -> Result<()> {
    let n_y = surrogate_set.dim();
    let mut w = csv_writer(BufWriter::new(File::create(path)?));
    let mut header: Vec<String> = (1..=alpha.len()).map(|i| format!("alpha{i}")).collect();
    header.extend((1..=n_y).map(|i| format!("beta{i}")));
    header.extend(["coefficient".to_string(), "role".to_string()]);
    w.write_record(&header)?;
    for m in surrogate_set.iter().chain(evaluated_only.iter()) {
        let mut row: Vec<String> = alpha.entries().iter().chain(m.entries()).map(|e| e.to_string()).collect();
        row.push(coeffs.get(m).copied().unwrap_or(0).to_string());
        let role = if evaluated_only.contains(m) {
            "evaluated"
        } else if margin.contains(m) {
            "margin"
        } else {
            "active"
        };
        row.push(role.into());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_snapshot_miset(path: PathBuf, s: &Snapshot, r: &RunResult, fixed: Option<&MultiIndex>) -> Result<()> {
    let n_model = r.layout.n_model;
    let sur_set = s.surrogate.set();
    let margin: BTreeSet<MultiIndex> = sur_set.iter().filter(|m| !s.set.contains(m)).cloned().collect();
    let extra: BTreeSet<MultiIndex> = s.evaluated.iter().filter(|m| !sur_set.contains(m)).cloned().collect();
    match fixed {
        Some(a) => {
            // Strip the wrapper's dummy fidelity and write the pinned one.
            let strip = |m: &MultiIndex| m.parameter(n_model);
            let set = MultiIndexSet::from_indices(r.layout.n_y, sur_set.iter().map(strip))?;
            let coeffs = s.surrogate.coeffs().iter().map(|(m, c)| (strip(m), *c)).collect();
            write_miset_csv(
                path,
                a,
                &set,
                &coeffs,
                &margin.iter().map(strip).collect(),
                &extra.iter().map(strip).collect(),
            )
        }
        None => write_miset_csv(path, &MultiIndex::ones(0), sur_set, s.surrogate.coeffs(), &margin, &extra),
    }
}

fn write_misets(dir: &Path, r: &RunResult, fixed: Option<&MultiIndex>, per_snapshot: bool) -> Result<()> {
    if per_snapshot {
        for (k, s) in r.snapshots.iter().enumerate() {
            write_snapshot_miset(dir.join(format!("miset_{k}.csv")), s, r, fixed)?;
        }
    }
    let last = r.snapshots.last().expect("runs always end with a snapshot");
    write_snapshot_miset(dir.join("miset.csv"), last, r, fixed)
}

fn write_fidelity_spectrum(
    dir: &Path,
    alpha: &MultiIndex,
    restricted: &Surrogate,
    params: &PlateauParams,
    iteration: usize,
    log: &[(usize, PlateauReport)],
) -> Result<()> {
    let x = to_spectral(restricted)?;
    let e = envelope(&x);
    let name = label(alpha);
    e.write_csv(create(dir, &format!("envelope_{name}.csv"))?)?;
    x.write_coeffs_csv(create(dir, &format!("coeffs_{name}.csv"))?)?;
    let mut rows = log.to_vec();
    if rows.is_empty() {
        rows.push((iteration, detect_plateau(&e, params)));
    }
    write_plateau_csv(create(dir, &format!("plateau_{name}.csv"))?, &rows)
}

fn write_spectral(
    dir: &Path,
    r: &RunResult,
    model: &dyn ModelHierarchy,
    cache: &EvalCache,
    fixed: Option<&MultiIndex>,
    params: &PlateauParams,
) -> Result<()> {
    let set = r.surrogate.set();
    // Every member was paid for during the run, so this only hits the cache.
    let mut est = Estimator::new(model, cache, r.layout);
    est.ensure(set.iter())?;
    let final_iteration = r.history.len();
    for alpha in set.active_fidelities(r.layout.n_model) {
        let restricted = est.restricted_surrogate(set, &alpha)?;
        let log = r.plateau_log.get(&alpha).map(Vec::as_slice).unwrap_or(&[]);
        write_fidelity_spectrum(dir, &display_alpha(&alpha, fixed), &restricted, params, final_iteration, log)?;
    }
    Ok(())
}

/// One aligned row of `comparison.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub cost: f64,
    pub cost_a: f64,
    pub cost_b: f64,
    pub a: [f64; 3],
    pub b: [f64; 3],
}

impl ComparisonRow {
    /// `a / b` for l2, h1, ks2.
    pub fn ratios(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.a[i] / self.b[i])
    }
}

fn read_errors(dir: &Path) -> Result<Vec<(f64, [f64; 3])>> {
    let path = dir.join("errors.csv");
    if !path.exists() {
        return Err(Error::InvalidConfig(format!("missing {}", path.display())));
    }
    let mut rdr = csv::Reader::from_path(&path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::InvalidConfig(format!("malformed row in {}", path.display())))
        };
        out.push((num(0)?, [num(1)?, num(2)?, num(3)?]));
    }
    out.sort_by(|x, y| x.0.total_cmp(&y.0));
    Ok(out)
}

fn preceding(rows: &[(f64, [f64; 3])], cost: f64) -> Option<&(f64, [f64; 3])> {
    rows.iter().take_while(|r| r.0 <= cost).last()
}

/// Aligns the error tables of two runs: for every snapshot cost of either
/// run, each side contributes its nearest snapshot at or below that cost.
/// Writes `comparison.csv` into `out_dir`.
pub fn compare_runs(dir_a: &Path, dir_b: &Path, out_dir: &Path) -> Result<Vec<ComparisonRow>> {
    let a = read_errors(dir_a)?;
    let b = read_errors(dir_b)?;
    let costs: BTreeSet<u64> = a.iter().chain(&b).map(|r| r.0.to_bits()).collect();
    let mut costs: Vec<f64> = costs.into_iter().map(f64::from_bits).collect();
    costs.sort_by(f64::total_cmp);
    let mut rows = Vec::new();
    for c in costs {
        if let (Some(x), Some(y)) = (preceding(&a, c), preceding(&b, c)) {
            rows.push(ComparisonRow { cost: c, cost_a: x.0, cost_b: y.0, a: x.1, b: y.1 });
        }
    }
    if rows.is_empty() {
        return Err(Error::InvalidConfig("the two runs have no overlapping snapshot costs".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut w = csv_writer(create(out_dir, "comparison.csv")?);
    w.write_record([
        "cost",
        "cost_a_nearest_preceding",
        "cost_b_nearest_preceding",
        "l2_a",
        "l2_b",
        "l2_ratio",
        "h1_a",
        "h1_b",
        "h1_ratio",
        "ks2_a",
        "ks2_b",
        "ks2_ratio",
    ])?;
    for r in &rows {
        let q = r.ratios();
        let mut rec = vec![fmt_f64(r.cost), fmt_f64(r.cost_a), fmt_f64(r.cost_b)];
        for i in 0..3 {
            rec.extend([fmt_f64(r.a[i]), fmt_f64(r.b[i]), fmt_f64(q[i])]);
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(rows)
}
