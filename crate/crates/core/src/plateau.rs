//! Two-segment log-linear change-point fits and spectral plateau detection.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::combiner::{csv_writer, fmt_f64};
use crate::error::{Error, Result};
use crate::spectral::Envelope;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauParams {
    pub n_burn_in: usize,
    pub n_burn_out: usize,
    pub k_min: usize,
    pub m_star: f64,
}

impl Default for PlateauParams {
    fn default() -> Self {
        Self { n_burn_in: 2, n_burn_out: 2, k_min: 3, m_star: 0.1 }
    }
}

impl PlateauParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.m_star > 0.0) || !self.m_star.is_finite() {
            return Err(Error::InvalidConfig(format!("m_star must be positive, got {}", self.m_star)));
        }
        Ok(())
    }
}

/// Best split of a series into `i < kappa` (segment 1) and `i >= kappa`
/// (segment 2), each fitted by ordinary least squares.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChangePointFit {
    pub kappa: usize,
    pub m0: f64,
    pub c0: f64,
    pub m1: f64,
    pub c1: f64,
    /// Total squared residual of both segments.
    pub sse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauReport {
    /// `None` when the envelope was too short to fit.
    pub fit: Option<ChangePointFit>,
    pub plateau_level: f64,
    pub is_plateau: bool,
}

#[derive(Default, Clone, Copy)]
struct Sums {
    n: f64,
    x: f64,
    y: f64,
    xx: f64,
    xy: f64,
    yy: f64,
}

impl Sums {
    fn push(&self, x: f64, y: f64) -> Sums {
        Sums {
            n: self.n + 1.0,
            x: self.x + x,
            y: self.y + y,
            xx: self.xx + x * x,
            xy: self.xy + x * y,
            yy: self.yy + y * y,
        }
    }

    fn minus(&self, o: &Sums) -> Sums {
        Sums {
            n: self.n - o.n,
            x: self.x - o.x,
            y: self.y - o.y,
            xx: self.xx - o.xx,
            xy: self.xy - o.xy,
            yy: self.yy - o.yy,
        }
    }

    /// `(slope, intercept, sse)` of the OLS line through the points.
    fn ols(&self) -> (f64, f64, f64) {
        let sxx = self.xx - self.x * self.x / self.n;
        let sxy = self.xy - self.x * self.y / self.n;
        let syy = self.yy - self.y * self.y / self.n;
        let m = sxy / sxx;
        let c = (self.y - m * self.x) / self.n;
        (m, c, (syy - m * sxy).max(0.0))
    }
}

/// Exhaustive change-point scan. `series` holds `(i, log10 e(i))` pairs
/// with strictly increasing `i`; both segments keep at least two points.
/// Near-ties go to the smallest `kappa`.
pub fn fit_change_point(series: &[(usize, f64)]) -> Result<ChangePointFit> {
    let n = series.len();
    if n < 4 {
        return Err(Error::DetectionNotApplicable(format!("{n} points, need at least 4")));
    }
    // Centre the data so the prefix sums do not cancel badly.
    let mx = series.iter().map(|p| p.0 as f64).sum::<f64>() / n as f64;
    let my = series.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let mut prefix = vec![Sums::default()];
    for &(i, y) in series {
        let next = prefix.last().expect("non-empty").push(i as f64 - mx, y - my);
        prefix.push(next);
    }
    let total = prefix[n];
    let scale = total.yy;
    let mut best: Option<(usize, f64, (f64, f64), (f64, f64))> = None;
    for k in 2..=n - 2 {
        let (m0, c0, e0) = prefix[k].ols();
        let (m1, c1, e1) = total.minus(&prefix[k]).ols();
        let sse = e0 + e1;
        let better = match best {
            None => true,
            Some((_, b, _, _)) => sse < b - 1e-12 * (1.0 + scale),
        };
        if better {
            best = Some((k, sse, (m0, c0), (m1, c1)));
        }
    }
    let (k, sse, (m0, c0), (m1, c1)) = best.expect("n >= 4 gives a split");
    // Undo the centring: y - my = m (x - mx) + c.
    Ok(ChangePointFit {
        kappa: series[k].0,
        m0,
        c0: c0 + my - m0 * mx,
        m1,
        c1: c1 + my - m1 * mx,
        sse,
    })
}

/// Fits on `i in n_burn_in..=k_e - n_burn_out`. A plateau needs
/// `|m1| <= m_star` and more than `k_min` entries after the change point.
pub fn detect_plateau(e: &Envelope, params: &PlateauParams) -> PlateauReport {
    let none = PlateauReport { fit: None, plateau_level: 0.0, is_plateau: false };
    let k_e = e.k_e();
    if k_e < params.n_burn_out + params.n_burn_in {
        return none;
    }
    let hi = k_e - params.n_burn_out;
    let series: Vec<(usize, f64)> = (params.n_burn_in..=hi).map(|i| (i, e.values[i].log10())).collect();
    let Ok(fit) = fit_change_point(&series) else {
        return none;
    };
    let is_plateau = fit.m1.abs() <= params.m_star && hi - fit.kappa > params.k_min;
    let plateau_level = if is_plateau { 10f64.powf(fit.m1 * fit.kappa as f64 + fit.c1) } else { 0.0 };
    PlateauReport { fit: Some(fit), plateau_level, is_plateau }
}

/// Writes `iteration,kappa,m0,c0,m1,c1,plateau_level,is_plateau` rows.
/// Unfitted reports leave the fit columns empty.
pub fn write_plateau_csv<W: Write>(out: W, rows: &[(usize, PlateauReport)]) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["iteration", "kappa", "m0", "c0", "m1", "c1", "plateau_level", "is_plateau"])?;
    for (it, r) in rows {
        let mut row = vec![it.to_string()];
        match r.fit {
            Some(f) => {
                row.push(f.kappa.to_string());
                row.extend([f.m0, f.c0, f.m1, f.c1].map(fmt_f64));
            }
            None => row.extend(std::iter::repeat_n(String::new(), 5)),
        }
        row.push(fmt_f64(r.plateau_level));
        row.push(r.is_plateau.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
