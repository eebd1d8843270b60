//! Chebyshev expansions of single-fidelity surrogates and their coefficient
//! envelopes.
//!
//! The basis is `Phi_p(y) = prod_j T_{p_j}(2 y_j - 1)` on `[0, 1]^n_y`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use crate::combiner::{csv_writer, fmt_f64, Surrogate};
use crate::error::{invalid, Result};
use crate::knots::LevelToKnots;
use crate::midx::MultiIndexSet;
use crate::tensor::chebyshev_t;

/// A polynomial degree multi-index; entries start at 0.
pub type Degree = Vec<u32>;

/// Union over `beta` of the boxes `{0..m(beta_j)-1}`: the degrees a nested
/// combination interpolant over `set` reproduces exactly.
pub fn poly_degree_set(set: &MultiIndexSet, rule: LevelToKnots) -> Result<BTreeSet<Degree>> {
    if set.is_empty() || !set.is_admissible() {
        return invalid("degree set needs a non-empty admissible index set");
    }
    let mut out = BTreeSet::new();
    for beta in set.iter() {
        let caps: Vec<u32> = beta.entries().iter().map(|&l| rule.count(l) as u32).collect();
        for_each_in_box(&caps, |p| {
            out.insert(p.to_vec());
        });
    }
    Ok(out)
}

fn for_each_in_box(caps: &[u32], mut f: impl FnMut(&[u32])) {
    if caps.contains(&0) {
        return;
    }
    let mut p = vec![0u32; caps.len()];
    loop {
        f(&p);
        let mut d = caps.len();
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            p[d] += 1;
            if p[d] < caps[d] {
                break;
            }
            p[d] = 0;
        }
    }
}

/// Coefficients of a polynomial in the tensor Chebyshev basis.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralExpansion {
    n_y: usize,
    coeffs: BTreeMap<Degree, f64>,
}

impl SpectralExpansion {
    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn coeffs(&self) -> &BTreeMap<Degree, f64> {
        &self.coeffs
    }

    pub fn coeff(&self, p: &[u32]) -> f64 {
        self.coeffs.get(p).copied().unwrap_or(0.0)
    }

    /// Largest total degree present.
    pub fn max_total_degree(&self) -> u32 {
        self.coeffs.keys().map(|p| p.iter().sum()).max().unwrap_or(0)
    }

    pub fn evaluate(&self, y: &[f64]) -> f64 {
        let mut tables: Vec<Vec<f64>> = vec![Vec::new(); self.n_y];
        for p in self.coeffs.keys() {
            for (d, &k) in p.iter().enumerate() {
                let t = &mut tables[d];
                while t.len() <= k as usize {
                    let v = chebyshev_t(t.len(), 2.0 * y[d] - 1.0);
                    t.push(v);
                }
            }
        }
        self.coeffs
            .iter()
            .map(|(p, c)| c * p.iter().enumerate().map(|(d, &k)| tables[d][k as usize]).product::<f64>())
            .sum()
    }

    /// Long-form export with columns `p1..p_nY,coeff`.
    pub fn write_coeffs_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv_writer(out);
        let mut header: Vec<String> = (1..=self.n_y).map(|j| format!("p{j}")).collect();
        header.push("coeff".into());
        w.write_record(&header)?;
        for (p, c) in &self.coeffs {
            let mut row: Vec<String> = p.iter().map(|k| k.to_string()).collect();
            row.push(fmt_f64(*c));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Change of basis of a combination interpolant: each tensor term is
/// converted exactly, then the terms are summed with their coefficients.
///
/// The fidelity part of the layout is ignored, so this is meant for
/// single-fidelity restrictions.
pub fn to_spectral(s: &Surrogate) -> Result<SpectralExpansion> {
    let layout = s.layout();
    let beta_set = MultiIndexSet::from_indices(layout.n_y, s.set().iter().map(|m| m.parameter(layout.n_model)))?;
    let mut coeffs: BTreeMap<Degree, f64> = poly_degree_set(&beta_set, layout.rule)?
        .into_iter()
        .map(|p| (p, 0.0))
        .collect();
    for (c, term) in s.terms() {
        let shape: Vec<u32> = term.grid.shape().iter().map(|&m| m as u32).collect();
        let cheb = term.chebyshev();
        let mut k = 0;
        for_each_in_box(&shape, |p| {
            *coeffs.entry(p.to_vec()).or_insert(0.0) += *c as f64 * cheb[k];
            k += 1;
        });
    }
    Ok(SpectralExpansion { n_y: layout.n_y, coeffs })
}

/// Tail maxima of absolute coefficients by total degree.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub values: Vec<f64>,
}

impl Envelope {
    /// Largest total degree `k_e`.
    pub fn k_e(&self) -> usize {
        self.values.len().saturating_sub(1)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv_writer(out);
        w.write_record(["total_degree", "coeff_abs_max"])?;
        for (i, v) in self.values.iter().enumerate() {
            w.write_record([i.to_string(), fmt_f64(*v)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `e(i) = max { |c_p| : |p|_1 >= i }`, clamped below at
/// `max(e(0), tiny) * 1e-16` so that logs stay finite.
pub fn envelope(x: &SpectralExpansion) -> Envelope {
    let k_e = x.max_total_degree() as usize;
    let mut per_degree = vec![0.0f64; k_e + 1];
    for (p, c) in &x.coeffs {
        let i = p.iter().sum::<u32>() as usize;
        per_degree[i] = per_degree[i].max(c.abs());
    }
    let mut values = per_degree;
    for i in (0..k_e).rev() {
        values[i] = values[i].max(values[i + 1]);
    }
    let floor = values[0].max(f64::MIN_POSITIVE) * 1e-16;
    values.iter_mut().for_each(|v| *v = v.max(floor));
    Envelope { values }
}
