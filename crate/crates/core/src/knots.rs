//! One-dimensional collocation point families on `[0, 1]` and the
//! level-to-knots rules that say how many of them a level uses.

use std::f64::consts::PI;
use std::sync::{OnceLock, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Absolute tolerance used when comparing knots from different levels.
pub const NESTING_TOL: f64 = 1e-14;

/// Number of symmetric Leja points built on first use.
pub const LEJA_PRECOMPUTED: usize = 65;

/// Number of Chebyshev-distributed candidates scanned per Leja step.
const LEJA_CANDIDATES: usize = 100_001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnotFamily {
    ClenshawCurtis,
    SymmetricLeja,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelToKnots {
    Linear,
    TwoStep,
    Doubling,
}

impl LevelToKnots {
    /// `m(level)`, with `m(0) = 0` so that `m(l) - m(l - 1)` is always
    /// the number of points a level adds.
    pub fn count(self, level: u32) -> usize {
        match level {
            0 => 0,
            1 => 1,
            l => match self {
                LevelToKnots::Linear => l as usize,
                LevelToKnots::TwoStep => 2 * (l as usize - 1) + 1,
                LevelToKnots::Doubling => (1usize << (l - 1)) + 1,
            },
        }
    }

    /// Points added by `level` over `level - 1`.
    pub fn increment(self, level: u32) -> usize {
        self.count(level) - self.count(level.saturating_sub(1))
    }
}

/// Number of knots used at `level` (levels start at 1).
pub fn level_to_knots(rule: LevelToKnots, level: u32) -> Result<usize> {
    if level == 0 {
        return invalid("levels start at 1");
    }
    Ok(rule.count(level))
}

/// The first `m` knots of `family`, sorted ascending.
pub fn knots_1d(family: KnotFamily, m: usize) -> Result<Vec<f64>> {
    if m == 0 {
        return invalid("a knot set needs at least one point");
    }
    Ok(match family {
        KnotFamily::ClenshawCurtis => clenshaw_curtis(m),
        KnotFamily::SymmetricLeja => {
            let mut pts = leja_sequence(m);
            pts.sort_by(f64::total_cmp);
            pts
        }
    })
}

/// True when every level's knots are contained in the next level's, for
/// all levels below `up_to_level`.
pub fn is_nested(family: KnotFamily, rule: LevelToKnots, up_to_level: u32) -> bool {
    (1..up_to_level.max(2)).all(|level| {
        let coarse = clenshaw_or_leja(family, rule.count(level));
        let fine = clenshaw_or_leja(family, rule.count(level + 1));
        coarse
            .iter()
            .all(|x| fine.iter().any(|y| (x - y).abs() <= NESTING_TOL))
    })
}

fn clenshaw_or_leja(family: KnotFamily, m: usize) -> Vec<f64> {
    knots_1d(family, m).expect("m >= 1")
}

/// Chebyshev extrema mapped to `[0, 1]`. The left half is computed as
/// `sin^2(pi j / (2 (m - 1)))` and the right half mirrored, so the set is
/// exactly symmetric and doubling levels reproduce each other bit for bit.
fn clenshaw_curtis(m: usize) -> Vec<f64> {
    if m == 1 {
        return vec![0.5];
    }
    let n = (m - 1) as f64;
    let mut pts = vec![0.0; m];
    for j in 0..m {
        let mirror = m - 1 - j;
        pts[j] = if 2 * j == m - 1 {
            0.5
        } else if j < mirror {
            let s = (PI * j as f64 / (2.0 * n)).sin();
            s * s
        } else {
            1.0 - pts[mirror]
        };
    }
    pts
}

fn leja_cache() -> &'static RwLock<Vec<f64>> {
    static CACHE: OnceLock<RwLock<Vec<f64>>> = OnceLock::new();
    CACHE.get_or_init(|| RwLock::new(build_leja_on_interval(LEJA_PRECOMPUTED)))
}

/// The first `m` symmetric Leja points on `[0, 1]` in sequence order
/// (0.5, 1, 0, then mirrored pairs).
pub fn leja_sequence(m: usize) -> Vec<f64> {
    {
        let seq = leja_cache().read().expect("leja cache poisoned");
        if seq.len() >= m {
            return seq[..m].to_vec();
        }
    }
    let mut seq = leja_cache().write().expect("leja cache poisoned");
    if seq.len() < m {
        *seq = build_leja_on_interval(m.max(2 * seq.len()));
    }
    seq[..m].to_vec()
}

/// Builds at least `m` symmetric Leja points on `[-1, 1]` and maps them to
/// `[0, 1]`.
fn build_leja_on_interval(m: usize) -> Vec<f64> {
    let candidates: Vec<f64> = (0..LEJA_CANDIDATES)
        .map(|k| (PI * k as f64 / (LEJA_CANDIDATES - 1) as f64).cos())
        .collect();
    // Only the positive half is searched: the current set is symmetric.
    let positive: Vec<f64> = candidates.iter().copied().take_while(|&x| x > 0.0).collect();
    let mut seq = vec![0.0, 1.0, -1.0];
    // Running log-products, accumulated term by term in sequence order.
    let mut acc = vec![0.0f64; positive.len()];
    for s in &seq {
        acc.iter_mut().zip(&positive).for_each(|(a, x)| *a += (x - s).abs().ln());
    }
    while seq.len() < m {
        let log_prod = |x: f64| seq.iter().map(|s| (x - s).abs().ln()).sum::<f64>();
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (k, &v) in acc.iter().enumerate() {
            if v > best.0 {
                best = (v, k);
            }
        }
        let k = best.1;
        let lo = candidates[(k + 1).min(candidates.len() - 1)].max(0.0);
        let hi = candidates[k.saturating_sub(1)];
        let x = golden_section_max(log_prod, lo, hi, candidates[k]);
        for s in [x, -x] {
            seq.push(s);
            acc.iter_mut().zip(&positive).for_each(|(a, c)| *a += (c - s).abs().ln());
        }
    }
    let mut out = Vec::with_capacity(seq.len());
    for x in seq {
        let y = if x >= 0.0 { 0.5 * (1.0 + x) } else { 1.0 - 0.5 * (1.0 - x) };
        out.push(y);
    }
    out
}

/// Polishes a grid argmax inside its bracketing candidates.
fn golden_section_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, start: f64) -> f64 {
    let ratio = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() < 1e-16 {
            break;
        }
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    if f(x) >= f(start) {
        x
    } else {
        start
    }
}
