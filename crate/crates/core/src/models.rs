//! Model hierarchies `q^alpha`, their costs, and the keyed evaluation cache.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::midx::MultiIndex;

/// A family of solvers for one scalar quantity of interest, indexed by a
/// fidelity multi-index.
pub trait ModelHierarchy: Send + Sync {
    fn n_model(&self) -> usize;
    fn n_y(&self) -> usize;
    /// Must return bit-identical results for identical arguments.
    fn evaluate(&self, alpha: &MultiIndex, y: &[f64]) -> Result<f64>;
    /// Cost of a single solve at `alpha`.
    fn cost(&self, alpha: &MultiIndex) -> f64;
    /// Highest fidelity level available in every fidelity dimension.
    fn max_level(&self) -> Option<u32> {
        None
    }
}

/// Mixes a sequence of words into a 64-bit key (splitmix64 finaliser).
pub fn mix_key(words: impl IntoIterator<Item = u64>) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for w in words {
        h ^= w;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

fn keyed_normal(key: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    StandardNormal.sample(&mut rng)
}

const GENZ_C: f64 = 36.0 / 13.0;

/// Noiseless two-dimensional Gaussian peak.
pub fn genz_exact(y: &[f64]) -> f64 {
    let c1 = GENZ_C / 4.0;
    let c2 = GENZ_C / 9.0;
    (-(c1 * c1) * (y[0] - 0.5).powi(2)).exp() * (-(c2 * c2) * (y[1] - 0.5).powi(2)).exp()
}

/// Gaussian peak plus `10^(-2 alpha)` times a standard normal keyed on
/// `(seed, alpha, y)`.
pub fn genz_eval(alpha: u32, y: &[f64], seed: u64) -> f64 {
    let key = mix_key(
        [seed, alpha as u64]
            .into_iter()
            .chain(y.iter().map(|v| v.to_bits())),
    );
    genz_exact(y) + 10f64.powi(-2 * alpha as i32) * keyed_normal(key)
}

pub fn genz_cost(alpha: u32) -> f64 {
    10f64.powi(alpha as i32)
}

/// Noisy Gaussian-peak hierarchy with a single fidelity dimension.
#[derive(Debug, Clone)]
pub struct Genz2dgpNoisy {
    pub seed: u64,
    pub max_level: u32,
}

impl Genz2dgpNoisy {
    pub fn new(seed: u64) -> Self {
        Self { seed, max_level: 8 }
    }
}

impl ModelHierarchy for Genz2dgpNoisy {
    fn n_model(&self) -> usize {
        1
    }
    fn n_y(&self) -> usize {
        2
    }
    fn evaluate(&self, alpha: &MultiIndex, y: &[f64]) -> Result<f64> {
        Ok(genz_eval(alpha.entries()[0], y, self.seed))
    }
    fn cost(&self, alpha: &MultiIndex) -> f64 {
        genz_cost(alpha.entries()[0])
    }
    fn max_level(&self) -> Option<u32> {
        Some(self.max_level)
    }
}

/// 1D advection-diffusion analogue with tolerance-controlled timestepping.
///
/// `u_t = a(y) u_xx - w(x, y) u_x` on `(-1, 1)`, `u(-1, t)` driven by
/// `(1 - exp(-t/0.1)) (1 + 0.1 sin 2 pi t)`, `u(1, t) = 0`, `u(x, 0) = 0`.
/// The quantity of interest is `u(0.5, 10)`.
#[derive(Debug, Clone)]
pub struct Parabolic1dNoisy {
    pub cells: usize,
}

impl Default for Parabolic1dNoisy {
    fn default() -> Self {
        Self { cells: 200 }
    }
}

pub const PARABOLIC_MAX_LEVEL: u32 = 6;
const PARABOLIC_X_STAR: f64 = 0.5;
const PARABOLIC_T_STAR: f64 = 10.0;

pub fn parabolic_cost(alpha: u32) -> f64 {
    10f64.powf(alpha as f64 / 3.0)
}

/// Quantity of interest at tolerance level `alpha` on the default mesh.
pub fn parabolic_eval(alpha: u32, y: &[f64]) -> Result<f64> {
    Parabolic1dNoisy::default().solve(alpha, y)
}

impl Parabolic1dNoisy {
    fn boundary(t: f64) -> f64 {
        (1.0 - (-t / 0.1).exp()) * (1.0 + 0.1 * (2.0 * PI * t).sin())
    }

    pub fn solve(&self, alpha: u32, y: &[f64]) -> Result<f64> {
        if !(1..=PARABOLIC_MAX_LEVEL).contains(&alpha) {
            return invalid(format!("tolerance level {alpha} outside 1..={PARABOLIC_MAX_LEVEL}"));
        }
        let tol = 10f64.powi(-(alpha as i32));
        let a0 = 0.1;
        let diff = 0.1 * a0 + 1.8 * a0 * y[0];
        let adv_scale = 1.0 + 0.5 * (2.0 * y[1] - 1.0);
        let n = self.cells;
        let h = 2.0 / n as f64;
        let interior = n - 1;
        let x: Vec<f64> = (1..n).map(|i| -1.0 + i as f64 * h).collect();
        // Tridiagonal operator A: lower, diag, upper.
        let lower: Vec<f64> = x.iter().map(|xi| diff / (h * h) + 2.0 * (1.0 - xi * xi) * adv_scale / (2.0 * h)).collect();
        let upper: Vec<f64> = x.iter().map(|xi| diff / (h * h) - 2.0 * (1.0 - xi * xi) * adv_scale / (2.0 * h)).collect();
        let diag = -2.0 * diff / (h * h);
        let apply = |u: &[f64], t: f64, out: &mut Vec<f64>| {
            out.clear();
            for i in 0..interior {
                let left = if i == 0 { Self::boundary(t) } else { u[i - 1] };
                let right = if i + 1 == interior { 0.0 } else { u[i + 1] };
                out.push(lower[i] * left + diag * u[i] + upper[i] * right);
            }
        };
        let probe = ((PARABOLIC_X_STAR + 1.0) / h).round() as usize - 1;

        let mut u = vec![0.0; interior];
        let mut t = 0.0;
        let mut f_old = Vec::with_capacity(interior);
        let mut f_now = Vec::with_capacity(interior);
        apply(&u, t, &mut f_now);

        // Bootstrap with one small trapezoidal step.
        let mut dt_prev = 1e-6;
        let mut next = Vec::with_capacity(interior);
        trapezoid_step(&u, &f_now, t, dt_prev, &lower, diag, &upper, Self::boundary, &mut next);
        u.clone_from(&next);
        t += dt_prev;
        std::mem::swap(&mut f_old, &mut f_now);
        apply(&u, t, &mut f_now);
        let mut dt = dt_prev;

        let mut steps = 0usize;
        let mut predicted = vec![0.0; interior];
        while t < PARABOLIC_T_STAR {
            steps += 1;
            if steps > 2_000_000 {
                return Err(Error::Evaluation("timestep limit exceeded".into()));
            }
            if t + dt > PARABOLIC_T_STAR {
                dt = PARABOLIC_T_STAR - t;
            }
            let r = dt / dt_prev;
            for i in 0..interior {
                predicted[i] = u[i] + 0.5 * dt * ((2.0 + r) * f_now[i] - r * f_old[i]);
            }
            trapezoid_step(&u, &f_now, t, dt, &lower, diag, &upper, Self::boundary, &mut next);
            let scale = 1.0 / (3.0 * (1.0 + dt_prev / dt));
            let err = next
                .iter()
                .zip(&predicted)
                .map(|(a, b)| (a - b).abs() * scale)
                .fold(0.0, f64::max);
            let factor = if err > 0.0 { (tol / err).cbrt() } else { 2.0 };
            if err > tol && dt > 1e-12 {
                dt *= (0.9 * factor).clamp(0.1, 0.9);
                continue;
            }
            t += dt;
            u.clone_from(&next);
            std::mem::swap(&mut f_old, &mut f_now);
            apply(&u, t, &mut f_now);
            dt_prev = dt;
            dt *= (0.9 * factor).clamp(0.2, 2.0);
        }
        let value = u[probe];
        if !value.is_finite() {
            return Err(Error::Evaluation(format!("non-finite solution at y = {y:?}")));
        }
        Ok(value)
    }
}

/// One trapezoidal step `(I - dt/2 A) u_new = u + dt/2 (f(t, u) + b(t + dt))`.
#[allow(clippy::too_many_arguments)]
fn trapezoid_step(
    u: &[f64],
    f_now: &[f64],
    t: f64,
    dt: f64,
    lower: &[f64],
    diag: f64,
    upper: &[f64],
    boundary: fn(f64) -> f64,
    out: &mut Vec<f64>,
) {
    let n = u.len();
    let half = 0.5 * dt;
    let mut rhs: Vec<f64> = (0..n).map(|i| u[i] + half * f_now[i]).collect();
    rhs[0] += half * lower[0] * boundary(t + dt);
    // Thomas algorithm on (I - half A).
    let mut c_prime = vec![0.0; n];
    let b0 = 1.0 - half * diag;
    c_prime[0] = -half * upper[0] / b0;
    rhs[0] /= b0;
    for i in 1..n {
        let a = -half * lower[i];
        let denom = b0 - a * c_prime[i - 1];
        c_prime[i] = if i + 1 < n { -half * upper[i] / denom } else { 0.0 };
        rhs[i] = (rhs[i] - a * rhs[i - 1]) / denom;
    }
    out.clear();
    out.resize(n, 0.0);
    out[n - 1] = rhs[n - 1];
    for i in (0..n - 1).rev() {
        out[i] = rhs[i] - c_prime[i] * out[i + 1];
    }
}

impl ModelHierarchy for Parabolic1dNoisy {
    fn n_model(&self) -> usize {
        1
    }
    fn n_y(&self) -> usize {
        2
    }
    fn evaluate(&self, alpha: &MultiIndex, y: &[f64]) -> Result<f64> {
        self.solve(alpha.entries()[0], y)
    }
    fn cost(&self, alpha: &MultiIndex) -> f64 {
        parabolic_cost(alpha.entries()[0])
    }
    fn max_level(&self) -> Option<u32> {
        Some(PARABOLIC_MAX_LEVEL)
    }
}

/// Pins every request to a single fidelity of an inner hierarchy, exposing
/// it as a one-level hierarchy.
pub struct FixedFidelity<'a> {
    pub inner: &'a dyn ModelHierarchy,
    pub alpha: MultiIndex,
}

impl ModelHierarchy for FixedFidelity<'_> {
    fn n_model(&self) -> usize {
        1
    }
    fn n_y(&self) -> usize {
        self.inner.n_y()
    }
    fn evaluate(&self, _alpha: &MultiIndex, y: &[f64]) -> Result<f64> {
        self.inner.evaluate(&self.alpha, y)
    }
    fn cost(&self, _alpha: &MultiIndex) -> f64 {
        self.inner.cost(&self.alpha)
    }
    fn max_level(&self) -> Option<u32> {
        Some(1)
    }
}

type ValueFn = Box<dyn Fn(&MultiIndex, &[f64]) -> f64 + Send + Sync>;
type CostFn = Box<dyn Fn(&MultiIndex) -> f64 + Send + Sync>;

/// Hierarchy backed by closures; handy for analytic test problems.
pub struct FnHierarchy {
    pub n_model: usize,
    pub n_y: usize,
    pub value: ValueFn,
    pub cost: CostFn,
    pub max_level: Option<u32>,
}

impl FnHierarchy {
    /// Fidelity-independent model with cost `10^(alpha_1 + ... )`.
    pub fn new(
        n_model: usize,
        n_y: usize,
        value: impl Fn(&MultiIndex, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            n_model,
            n_y,
            value: Box::new(value),
            cost: Box::new(|a| 10f64.powi(a.l1() as i32)),
            max_level: None,
        }
    }
}

impl ModelHierarchy for FnHierarchy {
    fn n_model(&self) -> usize {
        self.n_model
    }
    fn n_y(&self) -> usize {
        self.n_y
    }
    fn evaluate(&self, alpha: &MultiIndex, y: &[f64]) -> Result<f64> {
        Ok((self.value)(alpha, y))
    }
    fn cost(&self, alpha: &MultiIndex) -> f64 {
        (self.cost)(alpha)
    }
    fn max_level(&self) -> Option<u32> {
        self.max_level
    }
}

/// Bit patterns of a point's coordinates.
pub type PointKey = Vec<u64>;

pub fn point_key(y: &[f64]) -> PointKey {
    y.iter().map(|v| v.to_bits()).collect()
}

/// Insert-once store of model values keyed by fidelity and exact point.
/// Misses accrue `cost(alpha)`; hits are free.
#[derive(Default)]
pub struct EvalCache {
    values: RwLock<HashMap<(MultiIndex, PointKey), f64>>,
    ledger: Mutex<Ledger>,
    file: Option<Mutex<BufWriter<File>>>,
    path: Option<PathBuf>,
}

#[derive(Default, Debug, Clone)]
struct Ledger {
    cost: f64,
    counts: HashMap<MultiIndex, usize>,
}

impl EvalCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads `path` if present and appends new evaluations to it. Any I/O
    /// failure leaves the cache working in memory only.
    pub fn with_file(path: impl AsRef<Path>) -> Self {
        let path = path.as_ref().to_path_buf();
        let mut cache = Self::new();
        if path.exists() {
            match Self::load(&path) {
                Ok(map) => cache.values = RwLock::new(map),
                Err(e) => log::warn!("ignoring cache file {}: {e}", path.display()),
            }
        }
        match OpenOptions::new().create(true).append(true).open(&path) {
            Ok(f) => {
                cache.file = Some(Mutex::new(BufWriter::new(f)));
                cache.path = Some(path);
            }
            Err(e) => log::warn!("cache file {} unavailable, running in memory: {e}", path.display()),
        }
        cache
    }

    fn load(path: &Path) -> Result<HashMap<(MultiIndex, PointKey), f64>> {
        let mut map = HashMap::new();
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (alpha, key, value) = parse_record(&line)
                .ok_or_else(|| Error::InvalidArgument(format!("malformed cache record: {line}")))?;
            map.entry((alpha, key)).or_insert(value);
        }
        Ok(map)
    }

    pub fn len(&self) -> usize {
        self.values.read().expect("cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cost accrued by misses so far.
    pub fn accrued_cost(&self) -> f64 {
        self.ledger.lock().expect("ledger poisoned").cost
    }

    /// Evaluations paid for per fidelity.
    pub fn counts(&self) -> HashMap<MultiIndex, usize> {
        self.ledger.lock().expect("ledger poisoned").counts.clone()
    }

    pub fn count(&self, alpha: &MultiIndex) -> usize {
        self.ledger.lock().expect("ledger poisoned").counts.get(alpha).copied().unwrap_or(0)
    }

    pub fn lookup(&self, alpha: &MultiIndex, y: &[f64]) -> Option<f64> {
        self.values
            .read()
            .expect("cache poisoned")
            .get(&(alpha.clone(), point_key(y)))
            .copied()
    }

    /// Returns the cached value (and `true`) or evaluates, stores and
    /// charges the solve.
    pub fn get_or_eval(&self, model: &dyn ModelHierarchy, alpha: &MultiIndex, y: &[f64]) -> Result<(f64, bool)> {
        if let Some(v) = self.lookup(alpha, y) {
            return Ok((v, true));
        }
        let v = model.evaluate(alpha, y)?;
        let inserted = self.store(model, alpha, y, v);
        Ok((v, !inserted))
    }

    /// Values at all `points` for fidelity `alpha`; misses are evaluated in
    /// parallel.
    pub fn get_or_eval_batch(&self, model: &dyn ModelHierarchy, alpha: &MultiIndex, points: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut out: Vec<Option<f64>> = {
            let map = self.values.read().expect("cache poisoned");
            points
                .iter()
                .map(|p| map.get(&(alpha.clone(), point_key(p))).copied())
                .collect()
        };
        let missing: Vec<usize> = (0..points.len()).filter(|&i| out[i].is_none()).collect();
        if missing.is_empty() {
            return Ok(out.into_iter().map(|v| v.unwrap()).collect());
        }
        let fresh: Vec<f64> = missing
            .par_iter()
            .map(|&i| model.evaluate(alpha, &points[i]))
            .collect::<Result<_>>()?;
        for (&i, v) in missing.iter().zip(fresh) {
            self.store(model, alpha, &points[i], v);
            out[i] = Some(self.lookup(alpha, &points[i]).expect("just stored"));
        }
        Ok(out.into_iter().map(|v| v.unwrap()).collect())
    }

    fn store(&self, model: &dyn ModelHierarchy, alpha: &MultiIndex, y: &[f64], v: f64) -> bool {
        let key = (alpha.clone(), point_key(y));
        {
            let mut map = self.values.write().expect("cache poisoned");
            if map.contains_key(&key) {
                return false;
            }
            map.insert(key.clone(), v);
        }
        {
            let mut ledger = self.ledger.lock().expect("ledger poisoned");
            ledger.cost += model.cost(alpha);
            *ledger.counts.entry(alpha.clone()).or_insert(0) += 1;
        }
        if let Some(file) = &self.file {
            let mut f = file.lock().expect("cache file poisoned");
            if let Err(e) = writeln!(f, "{}", format_record(alpha, &key.1, v)) {
                log::warn!(
                    "failed to persist cache record to {}: {e}",
                    self.path.as_deref().map(|p| p.display().to_string()).unwrap_or_default()
                );
            }
        }
        true
    }

    pub fn flush(&self) -> Result<()> {
        if let Some(file) = &self.file {
            file.lock().expect("cache file poisoned").flush()?;
        }
        Ok(())
    }
}

impl Drop for EvalCache {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

/// `alpha entries|coordinate bits (hex)|value bits (hex)`.
fn format_record(alpha: &MultiIndex, key: &[u64], value: f64) -> String {
    let a: Vec<String> = alpha.entries().iter().map(u32::to_string).collect();
    let k: Vec<String> = key.iter().map(|b| format!("{b:016x}")).collect();
    format!("{}|{}|{:016x}", a.join(","), k.join(","), value.to_bits())
}

fn parse_record(line: &str) -> Option<(MultiIndex, PointKey, f64)> {
    let mut parts = line.split('|');
    let alpha = parts
        .next()?
        .split(',')
        .map(|s| s.parse().ok())
        .collect::<Option<Vec<u32>>>()?;
    let key = parts
        .next()?
        .split(',')
        .map(|s| u64::from_str_radix(s, 16).ok())
        .collect::<Option<Vec<u64>>>()?;
    let value = f64::from_bits(u64::from_str_radix(parts.next()?, 16).ok()?);
    Some((MultiIndex::new(alpha).ok()?, key, value))
}
