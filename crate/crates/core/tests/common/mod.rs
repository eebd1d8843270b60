//! Independent oracles shared by the integration tests. None of these call
//! into the library beyond constructing its types.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use pmisc::knots::LevelToKnots;
use pmisc::midx::{MultiIndex, MultiIndexSet};
use rand::Rng;

/// Grows a downward-closed set from the root by `steps` random additions of
/// indices whose backward neighbours are all present.
pub fn random_admissible(rng: &mut impl Rng, dim: usize, steps: usize, cap: u32) -> BTreeSet<Vec<u32>> {
    let mut set: BTreeSet<Vec<u32>> = BTreeSet::new();
    set.insert(vec![1; dim]);
    for _ in 0..steps {
        let cands = addable(&set, dim, cap);
        if cands.is_empty() {
            break;
        }
        let pick = cands[rng.random_range(0..cands.len())].clone();
        set.insert(pick);
    }
    set
}

/// Indices outside `set` whose backward neighbours all lie in it.
pub fn addable(set: &BTreeSet<Vec<u32>>, dim: usize, cap: u32) -> Vec<Vec<u32>> {
    let mut out = BTreeSet::new();
    for m in set {
        for d in 0..dim {
            let mut f = m.clone();
            f[d] += 1;
            if f[d] > cap || set.contains(&f) {
                continue;
            }
            let ok = (0..dim).all(|e| {
                if f[e] == 1 {
                    return true;
                }
                let mut b = f.clone();
                b[e] -= 1;
                set.contains(&b)
            });
            if ok {
                out.insert(f);
            }
        }
    }
    out.into_iter().collect()
}

pub fn is_downward_closed(set: &BTreeSet<Vec<u32>>) -> bool {
    set.iter().all(|m| {
        (0..m.len()).all(|d| {
            if m[d] == 1 {
                return true;
            }
            let mut b = m.clone();
            b[d] -= 1;
            set.contains(&b)
        })
    })
}

pub fn to_set(dim: usize, set: &BTreeSet<Vec<u32>>) -> MultiIndexSet {
    MultiIndexSet::from_indices(dim, set.iter().map(|v| MultiIndex::new(v.clone()).unwrap())).unwrap()
}

pub fn entries(set: &MultiIndexSet) -> BTreeSet<Vec<u32>> {
    set.iter().map(|m| m.entries().to_vec()).collect()
}

/// `c_i = sum_{j in {0,1}^n} (-1)^|j| [i + j in I]` by direct enumeration.
pub fn brute_coeffs(set: &BTreeSet<Vec<u32>>) -> BTreeMap<Vec<u32>, i64> {
    let mut out = BTreeMap::new();
    for i in set {
        let n = i.len();
        let mut c = 0i64;
        for mask in 0u32..(1 << n) {
            let shifted: Vec<u32> = (0..n).map(|d| i[d] + ((mask >> d) & 1)).collect();
            if set.contains(&shifted) {
                c += if mask.count_ones() % 2 == 0 { 1 } else { -1 };
            }
        }
        out.insert(i.clone(), c);
    }
    out
}

/// Knot counts written out independently of the library.
pub fn knot_count(rule: LevelToKnots, l: u32) -> u32 {
    match rule {
        LevelToKnots::Linear => l,
        LevelToKnots::TwoStep => 2 * (l - 1) + 1,
        LevelToKnots::Doubling => {
            if l == 1 {
                1
            } else {
                (1 << (l - 1)) + 1
            }
        }
    }
}

/// Union over members of the degree boxes `prod [0, m(beta_d) - 1]`.
pub fn degree_set(set: &BTreeSet<Vec<u32>>, rule: LevelToKnots) -> BTreeSet<Vec<u32>> {
    let mut out = BTreeSet::new();
    for beta in set {
        let mut boxes: Vec<Vec<u32>> = vec![Vec::new()];
        for &l in beta {
            let top = knot_count(rule, l) - 1;
            boxes = boxes
                .into_iter()
                .flat_map(|p| {
                    (0..=top).map(move |k| {
                        let mut q = p.clone();
                        q.push(k);
                        q
                    })
                })
                .collect();
        }
        out.extend(boxes);
    }
    out
}

/// `prod y_d^p_d`.
pub fn monomial(p: &[u32], y: &[f64]) -> f64 {
    p.iter().zip(y).map(|(&k, &x)| x.powi(k as i32)).product()
}

/// `int_{[0,1]^n} prod y_d^p_d dy`.
pub fn monomial_integral(p: &[u32]) -> f64 {
    p.iter().map(|&k| 1.0 / (k as f64 + 1.0)).product()
}

/// Least-squares line through the points via SVD: `(slope, intercept, sse)`.
pub fn ols_svd(pts: &[(f64, f64)]) -> (f64, f64, f64) {
    let a = DMatrix::from_fn(pts.len(), 2, |r, c| if c == 0 { pts[r].0 } else { 1.0 });
    let b = DVector::from_iterator(pts.len(), pts.iter().map(|p| p.1));
    let x = a.clone().svd(true, true).solve(&b, 1e-14).unwrap();
    let r = &a * &x - &b;
    (x[0], x[1], r.norm_squared())
}

/// Brute-force change point: every split with two or more points per
/// segment, fitted independently; the smallest split wins near-ties.
/// Returns `(kappa, m0, c0, m1, c1, sse)`.
pub fn change_point_oracle(series: &[(usize, f64)]) -> (usize, f64, f64, f64, f64, f64) {
    let pts: Vec<(f64, f64)> = series.iter().map(|&(i, y)| (i as f64, y)).collect();
    let n = pts.len();
    let ybar = pts.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let tot: f64 = pts.iter().map(|p| (p.1 - ybar).powi(2)).sum();
    let mut best: Option<(usize, f64, f64, f64, f64, f64)> = None;
    for k in 2..=n - 2 {
        let (m0, c0, e0) = ols_svd(&pts[..k]);
        let (m1, c1, e1) = ols_svd(&pts[k..]);
        let sse = e0 + e1;
        if best.is_none_or(|b| sse < b.5 - 1e-12 * (1.0 + tot)) {
            best = Some((series[k].0, m0, c0, m1, c1, sse));
        }
    }
    best.unwrap()
}

/// `sum_alpha cost(alpha) * #distinct points at alpha` over `evaluated`,
/// counted from the grids by coordinate bit patterns.
pub fn ledger_cost(
    model: &dyn pmisc::models::ModelHierarchy,
    layout: &pmisc::combiner::Layout,
    evaluated: &MultiIndexSet,
) -> f64 {
    point_counts(layout, evaluated).iter().map(|(a, n)| model.cost(a) * *n as f64).sum()
}

/// Structural checks on a finished run; returns human-readable violations.
pub fn structural_violations(
    model: &dyn pmisc::models::ModelHierarchy,
    r: &pmisc::adaptive::RunResult,
) -> Vec<String> {
    let mut bad = Vec::new();
    let n_model = r.layout.n_model;
    let dim = r.layout.dim();
    let mut set: BTreeSet<Vec<u32>> = BTreeSet::new();
    set.insert(vec![1; dim]);
    let mut prev_sat: BTreeSet<MultiIndex> = BTreeSet::new();
    let mut prev_cost = 0.0;
    for h in &r.history {
        let sat: BTreeSet<MultiIndex> = h.saturated.iter().cloned().collect();
        if !prev_sat.is_subset(&sat) {
            bad.push(format!("iteration {}: saturated set shrank", h.iteration));
        }
        for b in &h.backfill {
            if !sat.contains(&b.fidelity(n_model)) {
                bad.push(format!("iteration {}: backfill {b} at unsaturated fidelity", h.iteration));
            }
            set.insert(b.entries().to_vec());
        }
        // Filtered-out candidates have zero profit and are never chosen.
        if sat.contains(&h.selected.fidelity(n_model)) && !(h.profit > 0.0) {
            bad.push(format!("iteration {}: selected {} with filtered profit", h.iteration, h.selected));
        }
        set.insert(h.selected.entries().to_vec());
        if !is_downward_closed(&set) {
            bad.push(format!("iteration {}: set not admissible", h.iteration));
        }
        if h.cumulative_cost < prev_cost {
            bad.push(format!("iteration {}: cost decreased", h.iteration));
        }
        prev_cost = h.cumulative_cost;
        prev_sat = sat;
    }
    if entries(&r.set) != set {
        bad.push("final set differs from the replayed history".into());
    }
    if r.saturated.iter().cloned().collect::<BTreeSet<_>>() != prev_sat && !r.history.is_empty() {
        // Detection may still add fidelities on the final check.
        if !prev_sat.iter().all(|a| r.saturated.contains(a)) {
            bad.push("final saturated set lost members".into());
        }
    }
    let total = ledger_cost(model, &r.layout, &r.evaluated);
    if (total - r.cost).abs() > 1e-9 * total {
        bad.push(format!("run cost {} but ledger gives {total}", r.cost));
    }
    for s in &r.snapshots {
        let c = ledger_cost(model, &r.layout, &s.evaluated);
        if (c - s.cost).abs() > 1e-9 * c {
            bad.push(format!("snapshot at iteration {}: cost {} but ledger gives {c}", s.iteration, s.cost));
        }
        if let Some(h) = r.history.get(s.iteration) {
            if h.cumulative_cost != s.cost {
                bad.push(format!("snapshot at iteration {} disagrees with history cost", s.iteration));
            }
        }
        if !s.set.is_admissible() || !s.evaluated.is_admissible() {
            bad.push(format!("snapshot at iteration {} not admissible", s.iteration));
        }
    }
    bad
}

/// Distinct points per fidelity over `evaluated`.
pub fn point_counts(layout: &pmisc::combiner::Layout, evaluated: &MultiIndexSet) -> BTreeMap<MultiIndex, usize> {
    let mut points: BTreeMap<MultiIndex, BTreeSet<Vec<u64>>> = BTreeMap::new();
    for m in evaluated.iter() {
        let entry = points.entry(m.fidelity(layout.n_model)).or_default();
        for y in layout.grid(m).points() {
            entry.insert(y.iter().map(|v| v.to_bits()).collect());
        }
    }
    points.into_iter().map(|(a, p)| (a, p.len())).collect()
}

/// Library coefficients against the alternating-sum oracle on one random
/// admissible set.
pub fn check_coefficients(rng: &mut impl Rng, dim: usize, steps: usize) -> Result<(), String> {
    let set = random_admissible(rng, dim, steps, 7);
    let c = pmisc::combiner::combination_coeffs(&to_set(dim, &set)).map_err(|e| e.to_string())?;
    let oracle = brute_coeffs(&set);
    if c.len() != oracle.len() {
        return Err(format!("{} coefficients, oracle has {}", c.len(), oracle.len()));
    }
    for (m, v) in &c {
        if *v != oracle[&m.entries().to_vec()] {
            return Err(format!("coefficient of {m}: {v} vs {}", oracle[&m.entries().to_vec()]));
        }
    }
    if c.values().sum::<i64>() != 1 {
        return Err("coefficients do not sum to one".into());
    }
    Ok(())
}

/// Interpolation, polynomial reproduction, quadrature and spectral
/// round-trip on one random single-fidelity set. `which` picks Leja
/// two-step, CC doubling or Leja linear.
pub fn check_exactness(rng: &mut impl Rng, dim: usize, steps: usize, which: usize) -> Result<(), String> {
    use pmisc::combiner::{Layout, Surrogate};
    use pmisc::knots::KnotFamily;
    let (family, rule, cap) = match which {
        0 => (KnotFamily::SymmetricLeja, LevelToKnots::TwoStep, 5),
        1 => (KnotFamily::ClenshawCurtis, LevelToKnots::Doubling, 4),
        _ => (KnotFamily::SymmetricLeja, LevelToKnots::Linear, 5),
    };
    let set = random_admissible(rng, dim, steps, cap);
    let layout = Layout { n_model: 0, n_y: dim, family, rule };
    let degrees: Vec<Vec<u32>> = degree_set(&set, rule).into_iter().collect();
    let poly: Vec<(Vec<u32>, f64)> = degrees.iter().map(|p| (p.clone(), rng.random_range(-1.0..1.0))).collect();
    let f = |y: &[f64]| poly.iter().map(|(p, c)| c * monomial(p, y)).sum::<f64>();
    let exact: f64 = poly.iter().map(|(p, c)| c * monomial_integral(p)).sum();
    let err = |e: pmisc::error::Error| e.to_string();

    let s = Surrogate::from_fn(layout, to_set(dim, &set), |_, pts| Ok(pts.iter().map(|y| f(y)).collect()))
        .map_err(err)?;
    for _ in 0..20 {
        let y: Vec<f64> = (0..dim).map(|_| rng.random()).collect();
        let d = (s.evaluate(&y) - f(&y)).abs();
        if d >= 1e-10 {
            return Err(format!("reproduction error {d:e} at {y:?}"));
        }
    }
    let d = (s.expectation() - exact).abs();
    if d >= 1e-12 {
        return Err(format!("quadrature error {d:e}"));
    }

    let g = |y: &[f64]| y.iter().enumerate().map(|(d, v)| ((d + 1) as f64 * v).sin()).sum::<f64>().exp();
    let s = Surrogate::from_fn(layout, to_set(dim, &set), |_, pts| Ok(pts.iter().map(|y| g(y)).collect()))
        .map_err(err)?;
    for m in s.set().iter() {
        for y in layout.grid(m).points() {
            let d = (s.evaluate(&y) - g(&y)).abs();
            if d >= 1e-12 {
                return Err(format!("interpolation error {d:e} at node {y:?}"));
            }
        }
    }
    let x = pmisc::spectral::to_spectral(&s).map_err(err)?;
    for _ in 0..20 {
        let y: Vec<f64> = (0..dim).map(|_| rng.random()).collect();
        let d = (x.evaluate(&y) - s.evaluate(&y)).abs();
        if d >= 1e-9 {
            return Err(format!("spectral round-trip error {d:e}"));
        }
    }
    if !x.coeffs().keys().all(|p| degrees.contains(p)) {
        return Err("spectral degrees outside the polynomial space".into());
    }
    Ok(())
}

/// Library change-point fit against the brute-force oracle.
pub fn check_change_point(series: &[(usize, f64)]) -> Result<(), String> {
    let f = pmisc::plateau::fit_change_point(series).map_err(|e| e.to_string())?;
    let (kappa, m0, c0, m1, c1, sse) = change_point_oracle(series);
    if f.kappa != kappa {
        return Err(format!("kappa {} vs oracle {kappa}", f.kappa));
    }
    for (name, a, b) in [("m0", f.m0, m0), ("c0", f.c0, c0), ("m1", f.m1, m1), ("c1", f.c1, c1), ("sse", f.sse, sse)] {
        if (a - b).abs() > 1e-10 * (1.0 + b.abs()) {
            return Err(format!("{name} {a} vs oracle {b}"));
        }
    }
    Ok(())
}

/// Continuous two-line series with a break at `start + len0`.
pub fn two_line_series(start: usize, len0: usize, len1: usize, m0: f64, m1: f64, c0: f64) -> (Vec<(usize, f64)>, f64) {
    let kappa = start + len0;
    let c1 = c0 + (m0 - m1) * kappa as f64 - m0;
    let series = (start..kappa + len1)
        .map(|i| (i, if i < kappa { m0 * i as f64 + c0 } else { m1 * i as f64 + c1 }))
        .collect();
    (series, c1)
}
