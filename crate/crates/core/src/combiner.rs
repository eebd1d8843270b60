//! Combination-technique assembly of (multi-fidelity) surrogates.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::sync::{Arc, OnceLock};

use crate::error::{Error, Result};
use crate::knots::{KnotFamily, LevelToKnots};
use crate::midx::{MultiIndex, MultiIndexSet};
use crate::models::point_key;
use crate::tensor::{contract, TensorGrid};

/// How joint indices map onto fidelities and knot sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n_model: usize,
    pub n_y: usize,
    pub family: KnotFamily,
    pub rule: LevelToKnots,
}

impl Layout {
    pub fn dim(&self) -> usize {
        self.n_model + self.n_y
    }

    /// Layout of a single-fidelity restriction.
    pub fn parameter_only(&self) -> Layout {
        Layout { n_model: 0, ..*self }
    }

    pub fn grid(&self, index: &MultiIndex) -> TensorGrid {
        TensorGrid::from_levels(self.family, self.rule, &index.entries()[self.n_model..])
    }
}

/// `c_i = sum over j in {0,1}^n with i + j in I of (-1)^|j|`, for every
/// member of `set` (zeros included).
pub fn combination_coeffs(set: &MultiIndexSet) -> Result<BTreeMap<MultiIndex, i64>> {
    if set.is_empty() || !set.is_admissible() {
        return Err(Error::InvalidArgument("combination coefficients need an admissible set".into()));
    }
    Ok(set.iter().map(|m| (m.clone(), coefficient_of(set, m))).collect())
}

fn coefficient_of(set: &MultiIndexSet, m: &MultiIndex) -> i64 {
    let n = m.len();
    let mut c = 0i64;
    let mut shifted = m.entries().to_vec();
    for mask in 0u32..(1 << n) {
        for (d, e) in shifted.iter_mut().enumerate() {
            *e = m.entries()[d] + ((mask >> d) & 1);
        }
        if set.contains(&MultiIndex::new(shifted.clone()).expect("entries >= 1")) {
            c += if mask.count_ones() % 2 == 0 { 1 } else { -1 };
        }
    }
    c
}

/// Coefficient changes caused by adding the members of `added` to `base`
/// (`base ∪ added` must be admissible). Only indices within one backward
/// unit cube of an added index can change.
pub fn coefficient_delta(added: &MultiIndexSet) -> BTreeMap<MultiIndex, i64> {
    let mut delta: BTreeMap<MultiIndex, i64> = BTreeMap::new();
    for a in added {
        let n = a.len();
        for mask in 0u32..(1 << n) {
            let shifted: Option<Vec<u32>> = (0..n)
                .map(|d| a.entries()[d].checked_sub((mask >> d) & 1).filter(|&e| e >= 1))
                .collect();
            if let Some(s) = shifted {
                let sign = if mask.count_ones() % 2 == 0 { 1 } else { -1 };
                *delta.entry(MultiIndex::new(s).expect("entries >= 1")).or_insert(0) += sign;
            }
        }
    }
    delta.retain(|_, c| *c != 0);
    delta
}

/// Distinct collocation points per fidelity for the terms of `set` with a
/// non-zero combination coefficient.
pub fn collocation_requests(set: &MultiIndexSet, layout: &Layout) -> Result<BTreeMap<MultiIndex, Vec<Vec<f64>>>> {
    let coeffs = combination_coeffs(set)?;
    let mut out: BTreeMap<MultiIndex, (HashSet<Vec<u64>>, Vec<Vec<f64>>)> = BTreeMap::new();
    for (m, c) in &coeffs {
        if *c == 0 {
            continue;
        }
        let entry = out.entry(m.fidelity(layout.n_model)).or_default();
        for p in layout.grid(m).points() {
            if entry.0.insert(point_key(&p)) {
                entry.1.push(p);
            }
        }
    }
    Ok(out.into_iter().map(|(k, v)| (k, v.1)).collect())
}

/// One tensor interpolant `I_beta[q^alpha]` with its nodal values.
#[derive(Debug)]
pub struct Term {
    pub index: MultiIndex,
    pub grid: TensorGrid,
    pub values: Vec<f64>,
    /// Integral of the tensor interpolant over `[0, 1]^n_y`.
    pub integral: f64,
    cheb: OnceLock<Vec<f64>>,
}

impl Term {
    pub fn new(index: MultiIndex, grid: TensorGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidState(format!(
                "term {index} has {} values for {} grid points",
                values.len(),
                grid.len()
            )));
        }
        let integral = grid.integrate(&values)?;
        Ok(Self { index, grid, values, integral, cheb: OnceLock::new() })
    }

    /// Chebyshev coefficients of the tensor interpolant, row-major over
    /// degrees `0..m_d` per dimension.
    pub fn chebyshev(&self) -> &[f64] {
        self.cheb.get_or_init(|| {
            let shape = self.grid.shape();
            let mut data = self.values.clone();
            for (d, rule) in self.grid.rules().iter().enumerate() {
                data = mode_product(&data, &shape, d, &rule.cheb_from_values);
            }
            data
        })
    }
}

/// Applies `mat` along dimension `d` of a row-major tensor.
fn mode_product(data: &[f64], shape: &[usize], d: usize, mat: &nalgebra::DMatrix<f64>) -> Vec<f64> {
    let m = shape[d];
    let inner: usize = shape[d + 1..].iter().product();
    let outer: usize = shape[..d].iter().product();
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for p in 0..m {
            for k in 0..m {
                let a = mat[(p, k)];
                if a == 0.0 {
                    continue;
                }
                let src = (o * m + k) * inner;
                let dst = (o * m + p) * inner;
                for i in 0..inner {
                    out[dst + i] += a * data[src + i];
                }
            }
        }
    }
    out
}

/// A combination-technique surrogate over an admissible joint index set.
#[derive(Debug, Clone)]
pub struct Surrogate {
    layout: Layout,
    set: MultiIndexSet,
    coeffs: BTreeMap<MultiIndex, i64>,
    terms: Vec<(i64, Arc<Term>)>,
}

impl Surrogate {
    /// Builds the surrogate, asking `values` for the nodal values of every
    /// term with a non-zero coefficient.
    pub fn assemble<F>(layout: Layout, set: MultiIndexSet, mut values: F) -> Result<Self>
    where
        F: FnMut(&MultiIndex, &TensorGrid) -> Result<Arc<Term>>,
    {
        if set.dim() != layout.dim() {
            return Err(Error::InvalidArgument("set dimension does not match layout".into()));
        }
        let coeffs = combination_coeffs(&set)?;
        let mut terms = Vec::new();
        for (m, &c) in &coeffs {
            if c != 0 {
                terms.push((c, values(m, &layout.grid(m))?));
            }
        }
        Ok(Self { layout, set, coeffs, terms })
    }

    /// Builds from a table of precomputed terms; missing tables are an
    /// invalid-state error.
    pub fn from_terms(layout: Layout, set: MultiIndexSet, table: &impl Fn(&MultiIndex) -> Option<Arc<Term>>) -> Result<Self> {
        Self::assemble(layout, set, |m, _| {
            table(m).ok_or_else(|| Error::InvalidState(format!("no evaluation table for term {m}")))
        })
    }

    /// Builds by evaluating `f(alpha, points)` for each term.
    pub fn from_fn<F>(layout: Layout, set: MultiIndexSet, mut f: F) -> Result<Self>
    where
        F: FnMut(&MultiIndex, &[Vec<f64>]) -> Result<Vec<f64>>,
    {
        Self::assemble(layout, set, |m, grid| {
            let vals = f(&m.fidelity(layout.n_model), &grid.points())?;
            Ok(Arc::new(Term::new(m.clone(), grid.clone(), vals)?))
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn set(&self) -> &MultiIndexSet {
        &self.set
    }

    pub fn coeffs(&self) -> &BTreeMap<MultiIndex, i64> {
        &self.coeffs
    }

    /// Terms with non-zero coefficient.
    pub fn terms(&self) -> &[(i64, Arc<Term>)] {
        &self.terms
    }

    pub fn n_y(&self) -> usize {
        self.layout.n_y
    }

    pub fn evaluate(&self, y: &[f64]) -> f64 {
        let mut cache: Vec<Vec<(usize, Vec<f64>)>> = vec![Vec::new(); self.layout.n_y];
        self.evaluate_with(y, &mut cache)
    }

    fn evaluate_with(&self, y: &[f64], cache: &mut [Vec<(usize, Vec<f64>)>]) -> f64 {
        cache.iter_mut().for_each(Vec::clear);
        let mut total = 0.0;
        for (c, term) in &self.terms {
            let mut refs: Vec<&[f64]> = Vec::with_capacity(y.len());
            for (d, rule) in term.grid.rules().iter().enumerate() {
                let m = rule.points.len();
                if !cache[d].iter().any(|(k, _)| *k == m) {
                    let mut b = Vec::new();
                    rule.basis_at(y[d], &mut b);
                    cache[d].push((m, b));
                }
            }
            for (d, rule) in term.grid.rules().iter().enumerate() {
                let m = rule.points.len();
                refs.push(&cache[d].iter().find(|(k, _)| *k == m).expect("cached").1);
            }
            let v = contract(&term.grid.shape(), &term.values, &refs).expect("shapes agree");
            total += *c as f64 * v;
        }
        total
    }

    /// Evaluates at many points, reusing the 1D basis values per point.
    pub fn evaluate_many(&self, ys: &[Vec<f64>]) -> Vec<f64> {
        use rayon::prelude::*;
        ys.par_iter()
            .map_init(
                || vec![Vec::new(); self.layout.n_y],
                |cache, y| self.evaluate_with(y, cache),
            )
            .collect()
    }

    /// Exact integral of the surrogate against the uniform density.
    pub fn expectation(&self) -> f64 {
        self.terms.iter().map(|(c, t)| *c as f64 * t.integral).sum()
    }

    /// Samples the surrogate on a `g x g` grid over `[0, 1]^2` and writes
    /// `y1,y2,value` rows.
    pub fn write_surface_csv<W: Write>(&self, out: W, g: usize) -> Result<()> {
        if self.layout.n_y != 2 || g < 2 {
            return Err(Error::InvalidArgument("surface export needs two parameters and g >= 2".into()));
        }
        let pts: Vec<Vec<f64>> = (0..g)
            .flat_map(|i| (0..g).map(move |j| vec![i as f64 / (g - 1) as f64, j as f64 / (g - 1) as f64]))
            .collect();
        let vals = self.evaluate_many(&pts);
        let mut w = csv_writer(out);
        w.write_record(["y1", "y2", "value"])?;
        for (p, v) in pts.iter().zip(vals) {
            w.write_record([fmt_f64(p[0]), fmt_f64(p[1]), fmt_f64(v)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Floats with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out)
}
