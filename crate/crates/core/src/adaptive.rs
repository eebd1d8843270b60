//! Greedy profit-driven refinement: classic MISC and the plateau-aware
//! variant that blocks saturated fidelities.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use rayon::prelude::*;

use crate::combiner::{collocation_requests, Layout, Surrogate, Term};
use crate::error::{Error, Result};
use crate::knots::{is_nested, KnotFamily, LevelToKnots};
use crate::midx::{MultiIndex, MultiIndexSet, SaturatedSet};
use crate::models::{point_key, EvalCache, ModelHierarchy};
use crate::plateau::{detect_plateau, PlateauParams, PlateauReport};
use crate::spectral::{envelope, to_spectral};

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    pub family: KnotFamily,
    pub rule: LevelToKnots,
    pub max_cost: f64,
    pub max_iterations: Option<usize>,
    /// Stop once the best unfiltered profit drops below this; 0 disables.
    pub min_profit: f64,
    pub plateau: PlateauParams,
    /// Cumulative costs at which a snapshot of the surrogate is kept.
    pub snapshot_costs: Vec<f64>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            family: KnotFamily::SymmetricLeja,
            rule: LevelToKnots::TwoStep,
            max_cost: f64::INFINITY,
            max_iterations: None,
            min_profit: 0.0,
            plateau: PlateauParams::default(),
            snapshot_costs: Vec::new(),
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.max_cost.is_finite() && self.max_iterations.is_none() && !(self.min_profit > 0.0) {
            return Err(Error::InvalidConfig("all stopping criteria are infinite".into()));
        }
        if self.max_cost.is_nan() || self.min_profit.is_nan() || self.min_profit < 0.0 {
            return Err(Error::InvalidConfig("max_cost and min_profit must be non-negative numbers".into()));
        }
        if !is_nested(self.family, self.rule, 8) {
            return Err(Error::InvalidConfig(format!(
                "adaptive runs need nested knots; {:?} with {:?} is not nested",
                self.family, self.rule
            )));
        }
        self.plateau.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxCost,
    MaxIterations,
    MinProfit,
    /// Candidates remain but every profit was filtered.
    Saturated,
    /// No admissible candidates left.
    Exhausted,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::MaxCost => "max_cost",
            StopReason::MaxIterations => "max_iterations",
            StopReason::MinProfit => "min_profit",
            StopReason::Saturated => "saturated",
            StopReason::Exhausted => "exhausted",
        }
    }
}

/// One committed refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub selected: MultiIndex,
    pub backfill: Vec<MultiIndex>,
    pub error: f64,
    pub work: f64,
    pub profit: f64,
    /// Cost paid up to and including this iteration's estimates.
    pub cumulative_cost: f64,
    /// Evaluated points per fidelity at that time.
    pub points: BTreeMap<MultiIndex, usize>,
    pub saturated: Vec<MultiIndex>,
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub iteration: usize,
    pub cost: f64,
    pub surrogate: Surrogate,
    /// The refined set `I` (the surrogate may also use the reduced margin).
    pub set: MultiIndexSet,
    pub evaluated: MultiIndexSet,
    pub saturated: SaturatedSet,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub layout: Layout,
    pub surrogate: Surrogate,
    pub set: MultiIndexSet,
    /// Every index whose grid was evaluated, candidates included.
    pub evaluated: MultiIndexSet,
    pub saturated: SaturatedSet,
    pub kappa: BTreeMap<MultiIndex, usize>,
    pub history: Vec<IterationRecord>,
    pub snapshots: Vec<Snapshot>,
    pub plateau_log: BTreeMap<MultiIndex, Vec<(usize, PlateauReport)>>,
    pub stop: StopReason,
    pub cost: f64,
}

/// Evaluated tensor terms of one run, backed by the shared cache.
pub struct Estimator<'a> {
    model: &'a dyn ModelHierarchy,
    cache: &'a EvalCache,
    layout: Layout,
    terms: HashMap<MultiIndex, Arc<Term>>,
}

impl<'a> Estimator<'a> {
    pub fn new(model: &'a dyn ModelHierarchy, cache: &'a EvalCache, layout: Layout) -> Self {
        Self { model, cache, layout, terms: HashMap::new() }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn term(&self, m: &MultiIndex) -> Option<Arc<Term>> {
        self.terms.get(m).cloned()
    }

    /// Evaluates the grids of all listed indices not seen yet, batching the
    /// model calls per fidelity.
    pub fn ensure<'m>(&mut self, indices: impl IntoIterator<Item = &'m MultiIndex>) -> Result<()> {
        let mut fresh: Vec<MultiIndex> = Vec::new();
        let mut seen = HashSet::new();
        for m in indices {
            if !self.terms.contains_key(m) && seen.insert(m.clone()) {
                fresh.push(m.clone());
            }
        }
        if fresh.is_empty() {
            return Ok(());
        }
        let n_model = self.layout.n_model;
        let mut per_alpha: BTreeMap<MultiIndex, (Vec<Vec<f64>>, HashSet<Vec<u64>>)> = BTreeMap::new();
        let grids: Vec<_> = fresh.iter().map(|m| self.layout.grid(m)).collect();
        for (m, grid) in fresh.iter().zip(&grids) {
            let (pts, keys) = per_alpha.entry(m.fidelity(n_model)).or_default();
            for p in grid.points() {
                if keys.insert(point_key(&p)) {
                    pts.push(p);
                }
            }
        }
        for (alpha, (pts, _)) in &per_alpha {
            self.cache.get_or_eval_batch(self.model, alpha, pts)?;
        }
        let built: Vec<Arc<Term>> = fresh
            .par_iter()
            .zip(grids)
            .map(|(m, grid)| {
                let alpha = m.fidelity(n_model);
                let values = grid
                    .points()
                    .iter()
                    .map(|p| {
                        self.cache
                            .lookup(&alpha, p)
                            .ok_or_else(|| Error::InvalidState(format!("missing value for {m} after evaluation")))
                    })
                    .collect::<Result<Vec<f64>>>()?;
                Ok(Arc::new(Term::new(m.clone(), grid, values)?))
            })
            .collect::<Result<_>>()?;
        for t in built {
            self.terms.insert(t.index.clone(), t);
        }
        Ok(())
    }

    /// `|E[S_{I ∪ B ∪ {mu}}] - E[S_I]|`, from the change in combination
    /// coefficients caused by the added indices.
    pub fn error_indicator(&mut self, set: &MultiIndexSet, mu: &MultiIndex, backfill: &MultiIndexSet) -> Result<f64> {
        let added: Vec<MultiIndex> = backfill.iter().chain(std::iter::once(mu)).cloned().collect();
        let closed = set.is_admissible()
            && added.iter().all(|a| a.backward_neighbours().all(|b| set.contains(&b) || added.contains(&b)));
        if !closed {
            return Err(Error::InvalidArgument(format!("adding {mu} with its backfill leaves the set non-admissible")));
        }
        let mut needed = Vec::new();
        for a in &added {
            for_each_lower_corner(a, |g, _| needed.push(g));
        }
        self.ensure(&needed)?;
        let mut delta = 0.0;
        for a in &added {
            for_each_lower_corner(a, |g, sign| {
                delta += sign * self.terms[&g].integral;
            });
        }
        Ok(delta.abs())
    }

    /// Nested points a fidelity gains from index `m`.
    pub fn new_points(&self, m: &MultiIndex) -> usize {
        m.entries()[self.layout.n_model..]
            .iter()
            .map(|&l| self.layout.rule.increment(l))
            .product()
    }

    /// Cost of the points that `B ∪ {mu}` adds on top of a set that does not
    /// contain them.
    pub fn work_indicator(&self, mu: &MultiIndex, backfill: &MultiIndexSet) -> f64 {
        backfill
            .iter()
            .chain(std::iter::once(mu))
            .map(|a| self.model.cost(&a.fidelity(self.layout.n_model)) * self.new_points(a) as f64)
            .sum()
    }

    /// Distinct points per fidelity of a downward-closed set.
    pub fn point_counts(&self, set: &MultiIndexSet) -> BTreeMap<MultiIndex, usize> {
        let mut out = BTreeMap::new();
        for m in set {
            *out.entry(m.fidelity(self.layout.n_model)).or_insert(0) += self.new_points(m);
        }
        out
    }

    /// `sum_alpha cost(alpha) * n_alpha` over a downward-closed set.
    pub fn set_cost(&self, set: &MultiIndexSet) -> f64 {
        self.point_counts(set)
            .iter()
            .map(|(alpha, &n)| self.model.cost(alpha) * n as f64)
            .sum()
    }

    /// Surrogate over `set`, every term of which must already be evaluated.
    pub fn surrogate(&self, set: &MultiIndexSet) -> Result<Surrogate> {
        Surrogate::from_terms(self.layout, set.clone(), &|m| self.terms.get(m).cloned())
    }

    /// Single-fidelity surrogate over `{beta : [alpha, beta] in set}`.
    pub fn restricted_surrogate(&self, set: &MultiIndexSet, alpha: &MultiIndex) -> Result<Surrogate> {
        Surrogate::from_terms(self.layout.parameter_only(), set.restrict(alpha), &|beta| {
            self.terms.get(&MultiIndex::join(alpha, beta)).cloned()
        })
    }
}

/// Calls `f(a - j, (-1)^|j|)` for every `j in {0,1}^n` with `a - j >= 1`.
fn for_each_lower_corner(a: &MultiIndex, mut f: impl FnMut(MultiIndex, f64)) {
    let n = a.len();
    'mask: for mask in 0u32..(1 << n) {
        let mut e = a.entries().to_vec();
        for (d, v) in e.iter_mut().enumerate() {
            if (mask >> d) & 1 == 1 {
                if *v == 1 {
                    continue 'mask;
                }
                *v -= 1;
            }
        }
        let sign = if mask.count_ones() % 2 == 0 { 1.0 } else { -1.0 };
        f(MultiIndex::new(e).expect("entries stay >= 1"), sign);
    }
}

/// Whether degree `p` lies in the box of some member of `set`.
fn in_degree_set(set: &MultiIndexSet, rule: LevelToKnots, p: &[u32]) -> bool {
    set.iter()
        .any(|b| b.entries().iter().zip(p).all(|(&l, &k)| (k as usize) < rule.count(l)))
}

/// Zeroes the profit of every candidate at a saturated fidelity whose own
/// new degrees all have total degree at least that fidelity's change point.
pub fn filter_profits(
    profits: &mut BTreeMap<MultiIndex, f64>,
    set: &MultiIndexSet,
    saturated: &SaturatedSet,
    kappa: &BTreeMap<MultiIndex, usize>,
    layout: &Layout,
) {
    for (mu, profit) in profits.iter_mut() {
        let (alpha, beta) = mu.split(layout.n_model);
        if !saturated.contains(&alpha) {
            continue;
        }
        let Some(&k) = kappa.get(&alpha) else { continue };
        let current = set.restrict(&alpha);
        let caps: Vec<u32> = beta.entries().iter().map(|&l| layout.rule.count(l) as u32).collect();
        let mut keeps = false;
        let mut p = vec![0u32; caps.len()];
        'outer: loop {
            if (p.iter().sum::<u32>() as usize) < k && !in_degree_set(&current, layout.rule, &p) {
                keeps = true;
                break;
            }
            let mut d = caps.len();
            loop {
                if d == 0 {
                    break 'outer;
                }
                d -= 1;
                p[d] += 1;
                if p[d] < caps[d] {
                    break;
                }
                p[d] = 0;
            }
        }
        if !keeps {
            *profit = 0.0;
        }
    }
}

/// Classic MISC: refine the reduced margin greedily and return the
/// surrogate over `I ∪ R(I)`.
pub fn run_misc(model: &dyn ModelHierarchy, config: &AdaptConfig, cache: &EvalCache) -> Result<RunResult> {
    run(model, config, cache, false)
}

/// Plateau-aware MISC: detects spectral plateaus per fidelity, filters
/// their high-degree candidates and backfills across saturated fidelities.
pub fn run_plateau_misc(model: &dyn ModelHierarchy, config: &AdaptConfig, cache: &EvalCache) -> Result<RunResult> {
    run(model, config, cache, true)
}

fn within_max_level(model: &dyn ModelHierarchy, n_model: usize, mu: &MultiIndex) -> bool {
    match model.max_level() {
        Some(cap) => mu.entries()[..n_model].iter().all(|&l| l <= cap),
        None => true,
    }
}

struct Candidate {
    mu: MultiIndex,
    backfill: MultiIndexSet,
    error: f64,
    work: f64,
}

fn run(model: &dyn ModelHierarchy, config: &AdaptConfig, cache: &EvalCache, plateau: bool) -> Result<RunResult> {
    config.validate()?;
    let layout = Layout { n_model: model.n_model(), n_y: model.n_y(), family: config.family, rule: config.rule };
    let n_model = layout.n_model;
    let dim = layout.dim();
    let mut est = Estimator::new(model, cache, layout);
    let mut set = MultiIndexSet::root(dim);
    est.ensure(&set.iter().cloned().collect::<Vec<_>>())?;
    let mut evaluated = set.clone();
    let mut saturated = SaturatedSet::new();
    let mut kappa = BTreeMap::new();
    let mut history = Vec::new();
    let mut snapshots: Vec<Snapshot> = Vec::new();
    let mut plateau_log: BTreeMap<MultiIndex, Vec<(usize, PlateauReport)>> = BTreeMap::new();
    let mut thresholds = config.snapshot_costs.clone();
    thresholds.sort_by(f64::total_cmp);
    let mut next_threshold = 0;

    let mut iteration = 0usize;
    let (stop, final_set) = loop {
        if plateau {
            for alpha in set.active_fidelities(n_model) {
                if saturated.contains(&alpha) {
                    continue;
                }
                let restricted = est.restricted_surrogate(&set, &alpha)?;
                let report = detect_plateau(&envelope(&to_spectral(&restricted)?), &config.plateau);
                if let (true, Some(fit)) = (report.is_plateau, report.fit) {
                    log::info!("fidelity {alpha} saturated at iteration {iteration}, kappa {}", fit.kappa);
                    saturated.insert(alpha.clone());
                    kappa.insert(alpha.clone(), fit.kappa);
                }
                plateau_log.entry(alpha).or_default().push((iteration, report));
            }
        }

        let margin = if plateau { set.modified_reduced_margin(&saturated, n_model)? } else { set.reduced_margin()? };
        let mut candidates: Vec<Candidate> = Vec::new();
        for mu in margin.iter().filter(|mu| within_max_level(model, n_model, mu)) {
            let backfill = if plateau { set.backfill_set(mu)? } else { MultiIndexSet::empty(dim) };
            candidates.push(Candidate { mu: mu.clone(), backfill, error: 0.0, work: 0.0 });
        }
        est.ensure(candidates.iter().flat_map(|c| c.backfill.iter().chain(std::iter::once(&c.mu))))?;
        for c in &mut candidates {
            c.error = est.error_indicator(&set, &c.mu, &c.backfill)?;
            c.work = est.work_indicator(&c.mu, &c.backfill);
            for m in c.backfill.iter().chain(std::iter::once(&c.mu)) {
                evaluated.insert(m.clone());
            }
        }
        debug_assert!(evaluated.is_admissible());
        let cost = est.set_cost(&evaluated);

        // Without the plateau machinery the returned surrogate also uses the
        // reduced margin, whose tables are already paid for.
        let returned = if plateau {
            set.clone()
        } else {
            set.union(&MultiIndexSet::from_indices(dim, candidates.iter().map(|c| c.mu.clone()))?)
        };
        if next_threshold < thresholds.len() && cost >= thresholds[next_threshold] {
            while next_threshold < thresholds.len() && cost >= thresholds[next_threshold] {
                next_threshold += 1;
            }
            snapshots.push(Snapshot {
                iteration,
                cost,
                surrogate: est.surrogate(&returned)?,
                set: set.clone(),
                evaluated: evaluated.clone(),
                saturated: saturated.clone(),
            });
        }

        if cost >= config.max_cost {
            break (StopReason::MaxCost, returned);
        }
        if config.max_iterations.is_some_and(|n| iteration >= n) {
            break (StopReason::MaxIterations, returned);
        }
        if candidates.is_empty() {
            break (StopReason::Exhausted, returned);
        }
        let mut profits: BTreeMap<MultiIndex, f64> =
            candidates.iter().map(|c| (c.mu.clone(), c.error / c.work)).collect();
        let best_unfiltered = profits.values().cloned().fold(f64::NEG_INFINITY, f64::max);
        if best_unfiltered < config.min_profit {
            break (StopReason::MinProfit, returned);
        }
        let mut blocked = HashSet::new();
        if plateau {
            let before = profits.clone();
            filter_profits(&mut profits, &set, &saturated, &kappa, &layout);
            for (mu, p) in &profits {
                if *p == 0.0 && before[mu] != 0.0 || *p == 0.0 && saturated.contains(&mu.fidelity(n_model)) {
                    blocked.insert(mu.clone());
                }
            }
            if blocked.len() == candidates.len() {
                break (StopReason::Saturated, returned);
            }
        }
        // Argmax; the BTreeMap order makes ties go to the smallest index.
        let mut best: Option<(&MultiIndex, f64)> = None;
        for (mu, &p) in &profits {
            if blocked.contains(mu) {
                continue;
            }
            if best.is_none_or(|(_, b)| p > b) {
                best = Some((mu, p));
            }
        }
        let (mu, profit) = best.expect("at least one unblocked candidate");
        let chosen = candidates.iter().find(|c| &c.mu == mu).expect("profit keys are candidates");

        let mut backfill: Vec<MultiIndex> = chosen.backfill.iter().cloned().collect();
        backfill.sort_by_key(|m| m.l1());
        for b in &backfill {
            if !saturated.contains(&b.fidelity(n_model)) {
                return Err(Error::InvalidState(format!("backfill index {b} is not at a saturated fidelity")));
            }
            set.insert(b.clone());
        }
        set.insert(chosen.mu.clone());
        if !set.is_admissible() {
            return Err(Error::InvalidState(format!("set lost admissibility after adding {}", chosen.mu)));
        }
        log::debug!("iteration {iteration}: {} E={:.3e} W={:.3e} cost={cost:.4e}", chosen.mu, chosen.error, chosen.work);
        history.push(IterationRecord {
            iteration,
            selected: chosen.mu.clone(),
            backfill,
            error: chosen.error,
            work: chosen.work,
            profit,
            cumulative_cost: cost,
            points: est.point_counts(&evaluated),
            saturated: saturated.iter().cloned().collect(),
        });
        iteration += 1;
    };

    let cost = est.set_cost(&evaluated);
    let surrogate = est.surrogate(&final_set)?;
    if snapshots.last().is_none_or(|s| s.cost != cost || s.iteration != iteration) {
        snapshots.push(Snapshot {
            iteration,
            cost,
            surrogate: surrogate.clone(),
            set: set.clone(),
            evaluated: evaluated.clone(),
            saturated: saturated.clone(),
        });
    }
    Ok(RunResult {
        layout,
        surrogate,
        set,
        evaluated,
        saturated,
        kappa,
        history,
        snapshots,
        plateau_log,
        stop,
        cost,
    })
}

/// Isotropic Smolyak surrogate `{|beta|_1 <= n_y + w}` on Clenshaw-Curtis
/// knots with the doubling rule, evaluated at fidelity `alpha_ref`.
pub fn build_reference(model: &dyn ModelHierarchy, w: u32, alpha_ref: &MultiIndex) -> Result<Surrogate> {
    if alpha_ref.len() != model.n_model() {
        return Err(Error::InvalidArgument(format!("fidelity {alpha_ref} does not match the hierarchy")));
    }
    if let Some(cap) = model.max_level() {
        if alpha_ref.entries().iter().any(|&l| l > cap) {
            return Err(Error::InvalidArgument(format!("fidelity {alpha_ref} exceeds the hierarchy's maximum level")));
        }
    }
    let layout = Layout {
        n_model: 0,
        n_y: model.n_y(),
        family: KnotFamily::ClenshawCurtis,
        rule: LevelToKnots::Doubling,
    };
    let set = MultiIndexSet::total_degree(layout.n_y, w);
    let cache = EvalCache::new();
    for points in collocation_requests(&set, &layout)?.values() {
        cache.get_or_eval_batch(model, alpha_ref, points)?;
    }
    Surrogate::from_fn(layout, set, |_, pts| {
        pts.iter()
            .map(|p| cache.lookup(alpha_ref, p).ok_or_else(|| Error::InvalidState("reference point missing".into())))
            .collect()
    })
}
