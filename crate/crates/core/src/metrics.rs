//! Monte-Carlo error norms, kernel density estimates and the two-sample
//! Kolmogorov-Smirnov statistic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::combiner::Surrogate;
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    /// Samples for the L2/H1 norms and the PDF.
    pub n_mc: usize,
    /// Samples for the KS statistic.
    pub n_ks: usize,
    pub seed: u64,
    pub fd_step: f64,
    pub pdf_points: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { n_mc: 10_000, n_ks: 1_000_000, seed: 0, fd_step: 1e-4, pdf_points: 200 }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mc < 2 || self.n_ks < 1 {
            return Err(Error::InvalidConfig("n_mc must be >= 2 and n_ks >= 1".into()));
        }
        if !(self.fd_step > 0.0 && self.fd_step < 1e-2) {
            return Err(Error::InvalidConfig(format!("fd_step must lie in (0, 1e-2), got {}", self.fd_step)));
        }
        if self.pdf_points < 2 {
            return Err(Error::InvalidConfig("pdf_points must be >= 2".into()));
        }
        Ok(())
    }
}

/// Anything that maps `[0, 1]^n_y` to a real number.
pub trait Evaluable: Sync {
    fn eval(&self, y: &[f64]) -> f64;

    fn eval_many(&self, ys: &[Vec<f64>]) -> Vec<f64> {
        ys.par_iter().map(|y| self.eval(y)).collect()
    }
}

impl Evaluable for Surrogate {
    fn eval(&self, y: &[f64]) -> f64 {
        self.evaluate(y)
    }

    fn eval_many(&self, ys: &[Vec<f64>]) -> Vec<f64> {
        self.evaluate_many(ys)
    }
}

impl<F: Fn(&[f64]) -> f64 + Sync> Evaluable for F {
    fn eval(&self, y: &[f64]) -> f64 {
        self(y)
    }
}

/// Point `i` of the uniform stream for `seed`. Each point owns a fixed
/// window of the ChaCha keystream, so points can be drawn independently.
pub fn sample_point(n_y: usize, seed: u64, i: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_word_pos((2 * n_y * i) as u128);
    (0..n_y).map(|_| rng.random::<f64>()).collect()
}

pub fn sample_points(n_y: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..n).into_par_iter().map(|i| sample_point(n_y, seed, i)).collect()
}

fn rms(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    (v.sum::<f64>() / n as f64).sqrt()
}

/// Central-difference stencil around each point, pulled `h` away from the
/// boundary: for every point `2 n_y` entries ordered `+e_1, -e_1, +e_2, ...`.
fn stencil(points: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(points.len() * 2 * points.first().map_or(0, Vec::len));
    for p in points {
        let c: Vec<f64> = p.iter().map(|v| v.clamp(h, 1.0 - h)).collect();
        for j in 0..c.len() {
            for s in [h, -h] {
                let mut q = c.clone();
                q[j] += s;
                out.push(q);
            }
        }
    }
    out
}

fn gradient_sq(diff: &[f64], n_y: usize, h: f64) -> Vec<f64> {
    diff.chunks(2 * n_y)
        .map(|c| c.chunks(2).map(|pm| ((pm[0] - pm[1]) / (2.0 * h)).powi(2)).sum())
        .collect()
}

/// `sqrt(mean |a - b|^2)` over `cfg.n_mc` uniform samples.
pub fn l2_error_mc(a: &dyn Evaluable, b: &dyn Evaluable, n_y: usize, cfg: &MetricConfig) -> f64 {
    let pts = sample_points(n_y, cfg.n_mc, cfg.seed);
    let (va, vb) = (a.eval_many(&pts), b.eval_many(&pts));
    rms(va.iter().zip(&vb).map(|(x, y)| (x - y).powi(2)), pts.len())
}

/// L2 error plus the central-difference gradient of `a - b` in the mean
/// square.
pub fn h1_error_mc(a: &dyn Evaluable, b: &dyn Evaluable, n_y: usize, cfg: &MetricConfig) -> f64 {
    let pts = sample_points(n_y, cfg.n_mc, cfg.seed);
    let st = stencil(&pts, cfg.fd_step);
    let (va, vb) = (a.eval_many(&pts), b.eval_many(&pts));
    let (sa, sb) = (a.eval_many(&st), b.eval_many(&st));
    let diff: Vec<f64> = sa.iter().zip(&sb).map(|(x, y)| x - y).collect();
    let grad = gradient_sq(&diff, n_y, cfg.fd_step);
    rms(va.iter().zip(&vb).zip(&grad).map(|((x, y), g)| (x - y).powi(2) + g), pts.len())
}

/// Gaussian kernel density with Silverman's bandwidth. Identical samples
/// fall back to a bandwidth of one grid spacing.
pub fn kde_pdf(samples: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    let n = samples.len();
    if n < 10 {
        return invalid(format!("density estimate needs at least 10 samples, got {n}"));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let mut bw = 1.06 * var.sqrt() * (n as f64).powf(-0.2);
    if !(bw > 0.0) {
        bw = grid.windows(2).map(|w| (w[1] - w[0]).abs()).fold(f64::INFINITY, f64::min);
        if !(bw.is_finite() && bw > 0.0) {
            bw = 1.0;
        }
    }
    let norm = 1.0 / (n as f64 * bw * (2.0 * std::f64::consts::PI).sqrt());
    Ok(grid
        .par_iter()
        .map(|&x| samples.iter().map(|s| (-0.5 * ((x - s) / bw).powi(2)).exp()).sum::<f64>() * norm)
        .collect())
}

/// `sup_x |F_a(x) - F_b(x)|` of the two empirical CDFs.
pub fn ks2(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::NAN;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.par_sort_unstable_by(f64::total_cmp);
    b.par_sort_unstable_by(f64::total_cmp);
    ks2_sorted(&a, &b)
}

fn ks2_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Errors of one surrogate against a fixed reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorReport {
    pub l2: f64,
    pub h1: f64,
    pub ks2: f64,
}

/// Reference values on the sample points, computed once and reused for
/// every snapshot.
pub struct ReferenceSamples {
    n_y: usize,
    cfg: MetricConfig,
    points: Vec<Vec<f64>>,
    stencil: Vec<Vec<f64>>,
    ks_points: Vec<Vec<f64>>,
    values: Vec<f64>,
    stencil_values: Vec<f64>,
    ks_sorted: Vec<f64>,
}

impl ReferenceSamples {
    pub fn new(reference: &dyn Evaluable, n_y: usize, cfg: &MetricConfig) -> Result<Self> {
        cfg.validate()?;
        let points = sample_points(n_y, cfg.n_mc, cfg.seed);
        let stencil = stencil(&points, cfg.fd_step);
        // The KS sample stream is disjoint from the norm stream.
        let ks_points = sample_points(n_y, cfg.n_ks, cfg.seed.wrapping_add(0x6b73));
        let values = reference.eval_many(&points);
        let stencil_values = reference.eval_many(&stencil);
        let mut ks_sorted = reference.eval_many(&ks_points);
        ks_sorted.par_sort_unstable_by(f64::total_cmp);
        Ok(Self { n_y, cfg: *cfg, points, stencil, ks_points, values, stencil_values, ks_sorted })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn ks_values(&self) -> &[f64] {
        &self.ks_sorted
    }

    pub fn errors(&self, s: &dyn Evaluable) -> ErrorReport {
        let n = self.points.len();
        let v = s.eval_many(&self.points);
        let sq: Vec<f64> = v.iter().zip(&self.values).map(|(a, b)| (a - b).powi(2)).collect();
        let l2 = rms(sq.iter().copied(), n);
        let sv = s.eval_many(&self.stencil);
        let diff: Vec<f64> = sv.iter().zip(&self.stencil_values).map(|(a, b)| a - b).collect();
        let grad = gradient_sq(&diff, self.n_y, self.cfg.fd_step);
        let h1 = rms(sq.iter().zip(&grad).map(|(a, g)| a + g), n);
        let mut ks = s.eval_many(&self.ks_points);
        ks.par_sort_unstable_by(f64::total_cmp);
        ErrorReport { l2, h1, ks2: ks2_sorted(&ks, &self.ks_sorted) }
    }

    /// Surrogate values on the norm sample points (for density estimates).
    pub fn samples_of(&self, s: &dyn Evaluable) -> Vec<f64> {
        s.eval_many(&self.points)
    }
}

/// Evenly spaced grid covering all samples with a margin of 10% of the
/// range on each side.
pub fn pdf_grid(samples: &[&[f64]], n: usize) -> Vec<f64> {
    let lo = samples.iter().flat_map(|s| s.iter()).cloned().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().flat_map(|s| s.iter()).cloned().fold(f64::NEG_INFINITY, f64::max);
    let pad = if hi > lo { 0.1 * (hi - lo) } else { 0.5 * lo.abs().max(1.0) };
    let (lo, hi) = (lo - pad, hi + pad);
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn cfg(n: usize) -> MetricConfig {
        MetricConfig { n_mc: n, n_ks: n, seed: 11, ..MetricConfig::default() }
    }

    #[test]
    fn stream_is_counter_based() {
        let all = sample_points(3, 50, 4);
        assert_eq!(all[37], sample_point(3, 4, 37));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seq: Vec<f64> = (0..6).map(|_| rng.random::<f64>()).collect();
        assert_eq!(&seq[..3], &all[0][..]);
        assert_eq!(&seq[3..], &all[1][..]);
        assert!(all.iter().flatten().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn l2_examples() {
        let zero = |_: &[f64]| 0.0;
        let y1 = |y: &[f64]| y[0];
        let shift = |y: &[f64]| y[0] + 0.25;
        assert_eq!(l2_error_mc(&y1, &y1, 2, &cfg(1000)), 0.0);
        assert!((l2_error_mc(&shift, &y1, 2, &cfg(1000)) - 0.25).abs() < 1e-15);
        let v = l2_error_mc(&y1, &zero, 2, &cfg(10_000));
        assert!((v / (1.0f64 / 3.0).sqrt() - 1.0).abs() < 0.02, "{v}");
    }

    #[test]
    fn h1_examples() {
        let zero = |_: &[f64]| 0.0;
        let y1 = |y: &[f64]| y[0];
        assert_eq!(h1_error_mc(&y1, &y1, 2, &cfg(1000)), 0.0);
        let v = h1_error_mc(&y1, &zero, 2, &cfg(10_000));
        assert!((v / (1.0f64 / 3.0 + 1.0).sqrt() - 1.0).abs() < 0.02, "{v}");
        let smooth = |y: &[f64]| (3.0 * y[0]).sin() * y[1].exp();
        let a = h1_error_mc(&smooth, &zero, 2, &cfg(5000));
        let b = h1_error_mc(&smooth, &zero, 2, &MetricConfig { fd_step: 5e-5, ..cfg(5000) });
        assert!((a / b - 1.0).abs() < 5e-3);
        assert!(l2_error_mc(&smooth, &zero, 2, &cfg(5000)) <= a + 1e-12);
    }

    #[test]
    fn kde_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let normal: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let grid: Vec<f64> = (0..=400).map(|i| -8.0 + 16.0 * i as f64 / 400.0).collect();
        let d = kde_pdf(&normal, &grid).unwrap();
        assert!(d.iter().all(|&v| v >= 0.0));
        let integral: f64 = d.windows(2).map(|w| 0.5 * (w[0] + w[1]) * 16.0 / 400.0).sum();
        assert!((integral - 1.0).abs() < 0.02);
        let at0 = d[200];
        assert!((at0 * (2.0 * std::f64::consts::PI).sqrt() - 1.0).abs() < 0.05, "{at0}");

        let same = vec![0.3; 20];
        let grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let d = kde_pdf(&same, &grid).unwrap();
        let argmax = (0..d.len()).max_by(|&i, &j| d[i].total_cmp(&d[j])).unwrap();
        assert_eq!(argmax, 30);
        assert!(kde_pdf(&[1.0; 9], &grid).is_err());
    }

    #[test]
    fn ks_examples() {
        assert_eq!(ks2(&[0.0], &[1.0]), 1.0);
        let a: Vec<f64> = sample_points(1, 10_000, 2).into_iter().map(|p| p[0]).collect();
        assert_eq!(ks2(&a, &a), 0.0);
        let b: Vec<f64> = a.iter().map(|v| v + 0.5).collect();
        assert!((ks2(&a, &b) - 0.5).abs() < 0.05);
        assert_eq!(ks2(&a, &b), ks2(&b, &a));
        let ea: Vec<f64> = a.iter().map(|v| v.exp()).collect();
        let eb: Vec<f64> = b.iter().map(|v| v.exp()).collect();
        assert_eq!(ks2(&ea, &eb), ks2(&a, &b));
    }

    #[test]
    fn reference_samples_agree_with_direct_metrics() {
        let c = MetricConfig { n_ks: 500, ..cfg(800) };
        let r = |y: &[f64]| (y[0] - 0.5).powi(2) + y[1];
        let s = |y: &[f64]| (y[0] - 0.5).powi(2) + 0.9 * y[1];
        let rs = ReferenceSamples::new(&r, 2, &c).unwrap();
        let e = rs.errors(&s);
        assert_eq!(e.l2, l2_error_mc(&s, &r, 2, &c));
        assert_eq!(e.h1, h1_error_mc(&s, &r, 2, &c));
        assert!(e.ks2 > 0.0 && e.ks2 <= 1.0);
        let again = ReferenceSamples::new(&r, 2, &c).unwrap().errors(&s);
        assert_eq!(e, again);
    }
}
