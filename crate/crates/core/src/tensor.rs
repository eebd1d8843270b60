//! Lagrange interpolation and quadrature on 1D knot sets and their tensor
//! products, against the uniform weight on `[0, 1]`.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock, RwLock};

use nalgebra::DMatrix;

use crate::error::{invalid, Error, Result};
use crate::knots::{knots_1d, KnotFamily, LevelToKnots};

/// Everything derived from one 1D knot set. Built once per `(family, m)`.
#[derive(Debug)]
pub struct Rule1d {
    pub points: Vec<f64>,
    pub bary: Vec<f64>,
    pub weights: Vec<f64>,
    /// Row `p` maps nodal values to the coefficient of `T_p(2y - 1)`.
    pub cheb_from_values: DMatrix<f64>,
}

impl Rule1d {
    fn build(points: Vec<f64>) -> Result<Self> {
        let bary = barycentric_weights(&points)?;
        let m = points.len();
        let vander = DMatrix::from_fn(m, m, |k, p| chebyshev_t(p, 2.0 * points[k] - 1.0));
        let cheb_from_values = vander
            .try_inverse()
            .ok_or_else(|| Error::InvalidArgument("singular Chebyshev-Vandermonde matrix".into()))?;
        let moments: Vec<f64> = (0..m).map(chebyshev_integral).collect();
        let weights = (0..m)
            .map(|k| (0..m).map(|p| moments[p] * cheb_from_values[(p, k)]).sum())
            .collect();
        Ok(Self { points, bary, weights, cheb_from_values })
    }

    /// Values of the Lagrange basis at `y`.
    pub fn basis_at(&self, y: f64, out: &mut Vec<f64>) {
        lagrange_basis(&self.points, &self.bary, y, out);
    }
}

/// Cached rule for `m` knots of `family`.
pub fn rule_1d(family: KnotFamily, m: usize) -> Arc<Rule1d> {
    type Cache = RwLock<HashMap<(KnotFamily, usize), Arc<Rule1d>>>;
    static CACHE: OnceLock<Cache> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(r) = cache.read().expect("rule cache poisoned").get(&(family, m)) {
        return r.clone();
    }
    let points = knots_1d(family, m).expect("m >= 1");
    let rule = Arc::new(Rule1d::build(points).expect("family knots are distinct"));
    cache
        .write()
        .expect("rule cache poisoned")
        .entry((family, m))
        .or_insert(rule)
        .clone()
}

/// `T_p(x)` by the three-term recurrence.
pub fn chebyshev_t(p: usize, x: f64) -> f64 {
    match p {
        0 => 1.0,
        1 => x,
        _ => {
            let (mut a, mut b) = (1.0, x);
            for _ in 1..p {
                let c = 2.0 * x * b - a;
                a = b;
                b = c;
            }
            b
        }
    }
}

/// `∫_0^1 T_p(2y - 1) dy`.
pub fn chebyshev_integral(p: usize) -> f64 {
    if p % 2 == 1 {
        0.0
    } else {
        1.0 / (1.0 - (p * p) as f64)
    }
}

fn check_distinct(points: &[f64]) -> Result<()> {
    if points.is_empty() {
        return invalid("empty point set");
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return invalid("duplicate interpolation points");
    }
    Ok(())
}

fn barycentric_weights(points: &[f64]) -> Result<Vec<f64>> {
    check_distinct(points)?;
    // Differences are scaled by 4 (the inverse capacity of [0, 1]) to keep
    // the products near unity for a few hundred points.
    Ok(points
        .iter()
        .enumerate()
        .map(|(k, xk)| {
            let prod: f64 = points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != k)
                .map(|(_, xj)| 4.0 * (xk - xj))
                .product();
            1.0 / prod
        })
        .collect())
}

fn lagrange_basis(points: &[f64], bary: &[f64], y: f64, out: &mut Vec<f64>) {
    out.clear();
    if let Some(hit) = points.iter().position(|&x| x == y) {
        out.resize(points.len(), 0.0);
        out[hit] = 1.0;
        return;
    }
    let mut total = 0.0;
    for (x, w) in points.iter().zip(bary) {
        let t = w / (y - x);
        total += t;
        out.push(t);
    }
    out.iter_mut().for_each(|t| *t /= total);
}

/// Value at `y` of the polynomial interpolating `values` at `points`,
/// by the second barycentric form.
pub fn lagrange_eval_1d(points: &[f64], values: &[f64], y: f64) -> Result<f64> {
    if points.len() != values.len() {
        return invalid("points and values differ in length");
    }
    let bary = barycentric_weights(points)?;
    let mut basis = Vec::with_capacity(points.len());
    lagrange_basis(points, &bary, y, &mut basis);
    Ok(basis.iter().zip(values).map(|(l, v)| l * v).sum())
}

/// `w_k = ∫_0^1 L_k(y) dy` for the Lagrange basis on `points`.
pub fn quad_weights_1d(points: &[f64]) -> Result<Vec<f64>> {
    check_distinct(points)?;
    if points.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return invalid("quadrature points must lie in [0, 1]");
    }
    Ok(Rule1d::build(points.to_vec())?.weights)
}

/// A tensor product of 1D knot sets. Points are flattened row-major: the
/// last dimension varies fastest.
#[derive(Debug, Clone)]
pub struct TensorGrid {
    rules: Vec<Arc<Rule1d>>,
}

impl TensorGrid {
    /// Grid for parameter levels `levels` under `family`/`rule`.
    pub fn from_levels(family: KnotFamily, rule: LevelToKnots, levels: &[u32]) -> Self {
        Self { rules: levels.iter().map(|&l| rule_1d(family, rule.count(l))).collect() }
    }

    /// Grid over arbitrary per-dimension knot lists.
    pub fn from_points(per_dim: Vec<Vec<f64>>) -> Result<Self> {
        let rules = per_dim
            .into_iter()
            .map(|p| Rule1d::build(p).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rules })
    }

    pub fn n_dims(&self) -> usize {
        self.rules.len()
    }

    pub fn rules(&self) -> &[Arc<Rule1d>] {
        &self.rules
    }

    pub fn shape(&self) -> Vec<usize> {
        self.rules.iter().map(|r| r.points.len()).collect()
    }

    pub fn len(&self) -> usize {
        self.rules.iter().map(|r| r.points.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All points, row-major.
    pub fn points(&self) -> Vec<Vec<f64>> {
        let shape = self.shape();
        let mut out = Vec::with_capacity(self.len());
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..self.len() {
            out.push(idx.iter().zip(&self.rules).map(|(&i, r)| r.points[i]).collect());
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        out
    }

    /// Tensorised quadrature of the interpolant of `values`.
    pub fn integrate(&self, values: &[f64]) -> Result<f64> {
        let weights: Vec<&[f64]> = self.rules.iter().map(|r| r.weights.as_slice()).collect();
        contract(&self.shape(), values, &weights)
    }
}

/// Contracts a row-major tensor with one vector per dimension.
pub fn contract(shape: &[usize], values: &[f64], vecs: &[&[f64]]) -> Result<f64> {
    let total: usize = shape.iter().product();
    if values.len() != total || vecs.len() != shape.len() {
        return invalid(format!("expected {total} values over {} dimensions", shape.len()));
    }
    let mut buf = values.to_vec();
    let mut len = total;
    for d in (0..shape.len()).rev() {
        let m = shape[d];
        let v = vecs[d];
        len /= m;
        for i in 0..len {
            let row = &buf[i * m..(i + 1) * m];
            let s = row.iter().zip(v).map(|(a, b)| a * b).sum();
            buf[i] = s;
        }
    }
    Ok(buf[0])
}

/// Tensor-product interpolant of `values` evaluated at `y`.
pub fn tensor_interp_eval(grid: &TensorGrid, values: &[f64], y: &[f64]) -> Result<f64> {
    if y.len() != grid.n_dims() {
        return invalid("point dimension does not match grid");
    }
    let bases: Vec<Vec<f64>> = grid
        .rules
        .iter()
        .zip(y)
        .map(|(r, &yi)| {
            let mut b = Vec::new();
            r.basis_at(yi, &mut b);
            b
        })
        .collect();
    let refs: Vec<&[f64]> = bases.iter().map(Vec::as_slice).collect();
    contract(&grid.shape(), values, &refs)
}
