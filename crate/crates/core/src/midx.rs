//! Multi-indices and downward-closed multi-index sets.
//!
//! A joint multi-index `[alpha, beta]` carries `n_model` fidelity entries
//! followed by `n_y` parameter entries. All entries start at 1. Sets are
//! ordered lexicographically so iteration (and every argmax downstream) is
//! deterministic.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;

use crate::error::{invalid, Error, Result};

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MultiIndex(Vec<u32>);

impl MultiIndex {
    pub fn new(entries: Vec<u32>) -> Result<Self> {
        if entries.contains(&0) {
            return invalid(format!("multi-index entries start at 1, got {entries:?}"));
        }
        Ok(Self(entries))
    }

    pub fn ones(len: usize) -> Self {
        Self(vec![1; len])
    }

    pub fn entries(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn l1(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn forward(&self, dim: usize) -> Self {
        let mut e = self.0.clone();
        e[dim] += 1;
        Self(e)
    }

    /// `self - e_dim`, or `None` when that entry is already 1.
    pub fn backward(&self, dim: usize) -> Option<Self> {
        (self.0[dim] > 1).then(|| {
            let mut e = self.0.clone();
            e[dim] -= 1;
            Self(e)
        })
    }

    pub fn backward_neighbours(&self) -> impl Iterator<Item = MultiIndex> + '_ {
        (0..self.len()).filter_map(|d| self.backward(d))
    }

    /// Splits into the fidelity part (first `n_model` entries) and the
    /// parameter part.
    pub fn split(&self, n_model: usize) -> (MultiIndex, MultiIndex) {
        (Self(self.0[..n_model].to_vec()), Self(self.0[n_model..].to_vec()))
    }

    pub fn fidelity(&self, n_model: usize) -> MultiIndex {
        Self(self.0[..n_model].to_vec())
    }

    pub fn parameter(&self, n_model: usize) -> MultiIndex {
        Self(self.0[n_model..].to_vec())
    }

    pub fn join(alpha: &MultiIndex, beta: &MultiIndex) -> Self {
        let mut e = alpha.0.clone();
        e.extend_from_slice(&beta.0);
        Self(e)
    }
}

impl fmt::Debug for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{e}")?;
        }
        write!(f, "]")
    }
}

/// Shorthand used heavily in tests.
pub fn mi(entries: &[u32]) -> MultiIndex {
    MultiIndex::new(entries.to_vec()).expect("entries >= 1")
}

/// Fidelities whose plateau has been detected.
pub type SaturatedSet = BTreeSet<MultiIndex>;

/// A finite set of multi-indices of one common length.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct MultiIndexSet {
    dim: usize,
    members: BTreeSet<MultiIndex>,
    /// Known admissibility, `None` when it has to be recomputed.
    admissible: Option<bool>,
}

impl MultiIndexSet {
    pub fn empty(dim: usize) -> Self {
        Self { dim, members: BTreeSet::new(), admissible: Some(true) }
    }

    /// The singleton `{[1, ..., 1]}`.
    pub fn root(dim: usize) -> Self {
        let mut s = Self::empty(dim);
        s.insert(MultiIndex::ones(dim));
        s
    }

    pub fn from_indices<I: IntoIterator<Item = MultiIndex>>(dim: usize, items: I) -> Result<Self> {
        let mut s = Self::empty(dim);
        for m in items {
            if m.len() != dim {
                return invalid(format!("index {m} does not have length {dim}"));
            }
            s.members.insert(m);
        }
        s.admissible = None;
        Ok(s)
    }

    /// Builds a set from raw entry slices.
    pub fn from_slices(dim: usize, items: &[&[u32]]) -> Result<Self> {
        let idx = items
            .iter()
            .map(|e| MultiIndex::new(e.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Self::from_indices(dim, idx)
    }

    /// `{ i : |i|_1 <= dim + w }`, the isotropic total-degree set.
    pub fn total_degree(dim: usize, w: u32) -> Self {
        let mut out = Self::empty(dim);
        let mut frontier = vec![MultiIndex::ones(dim)];
        out.insert(MultiIndex::ones(dim));
        let cap = dim as u32 + w;
        while let Some(m) = frontier.pop() {
            for d in 0..dim {
                let f = m.forward(d);
                if f.l1() <= cap && !out.contains(&f) {
                    out.members.insert(f.clone());
                    frontier.push(f);
                }
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, m: &MultiIndex) -> bool {
        self.members.contains(m)
    }

    pub fn iter(&self) -> impl Iterator<Item = &MultiIndex> + '_ {
        self.members.iter()
    }

    pub fn members(&self) -> &BTreeSet<MultiIndex> {
        &self.members
    }

    /// Inserts `m`, keeping the admissibility flag current when `m`'s
    /// backward neighbours are already present.
    pub fn insert(&mut self, m: MultiIndex) -> bool {
        assert_eq!(m.len(), self.dim, "index length mismatch");
        if self.members.contains(&m) {
            return false;
        }
        let keeps = self.admissible == Some(true) && m.backward_neighbours().all(|b| self.members.contains(&b));
        self.members.insert(m);
        self.admissible = if keeps { Some(true) } else { None };
        true
    }

    pub fn union(&self, other: &MultiIndexSet) -> MultiIndexSet {
        let mut out = self.clone();
        let mut added: Vec<_> = other.members.iter().filter(|m| !self.contains(m)).cloned().collect();
        added.sort_by_key(|m| m.l1());
        for m in added {
            out.insert(m);
        }
        out
    }

    /// Downward-closedness: every member's backward neighbours are members.
    pub fn is_admissible(&self) -> bool {
        if let Some(flag) = self.admissible {
            return flag;
        }
        self.members
            .iter()
            .all(|m| m.backward_neighbours().all(|b| self.members.contains(&b)))
    }

    pub fn check_admissible(&self) -> Result<bool> {
        if self.members.is_empty() {
            return invalid("admissibility of an empty set is undefined");
        }
        Ok(self.is_admissible())
    }

    fn require_admissible(&self, what: &str) -> Result<()> {
        if self.members.is_empty() || !self.is_admissible() {
            return Err(Error::InvalidArgument(format!("{what} needs a non-empty admissible set")));
        }
        Ok(())
    }

    /// All forward neighbours of members that are not members.
    pub fn margin(&self) -> Result<MultiIndexSet> {
        self.require_admissible("margin")?;
        let mut out = MultiIndexSet::empty(self.dim);
        for m in &self.members {
            for d in 0..self.dim {
                let f = m.forward(d);
                if !self.members.contains(&f) {
                    out.members.insert(f);
                }
            }
        }
        out.admissible = None;
        Ok(out)
    }

    /// Indices whose addition keeps the set admissible.
    pub fn reduced_margin(&self) -> Result<MultiIndexSet> {
        let mut out = self.margin()?;
        out.members
            .retain(|m| m.backward_neighbours().all(|b| self.members.contains(&b)));
        Ok(out)
    }

    /// Margin members whose missing backward neighbours all sit at saturated
    /// fidelities, followed recursively: every index the backfill closure
    /// would add must itself belong to a saturated fidelity.
    pub fn modified_reduced_margin(&self, saturated: &SaturatedSet, n_model: usize) -> Result<MultiIndexSet> {
        let mut out = self.margin()?;
        out.members.retain(|mu| {
            let closure = self.missing_closure(mu);
            closure.iter().all(|b| saturated.contains(&b.fidelity(n_model)))
        });
        Ok(out)
    }

    /// Minimal set `B` with `self ∪ B ∪ {mu}` admissible.
    pub fn backfill_set(&self, mu: &MultiIndex) -> Result<MultiIndexSet> {
        self.require_admissible("backfill")?;
        if self.contains(mu) {
            return invalid(format!("{mu} is already a member"));
        }
        let mut out = MultiIndexSet::empty(self.dim);
        out.members = self.missing_closure(mu);
        out.admissible = None;
        Ok(out)
    }

    fn missing_closure(&self, mu: &MultiIndex) -> BTreeSet<MultiIndex> {
        let mut found = BTreeSet::new();
        let mut stack: Vec<MultiIndex> = mu.backward_neighbours().collect();
        while let Some(b) = stack.pop() {
            if self.members.contains(&b) || found.contains(&b) {
                continue;
            }
            stack.extend(b.backward_neighbours());
            found.insert(b);
        }
        found
    }

    /// `{ beta : [alpha, beta] in self }`, the parameter set used by
    /// fidelity `alpha`.
    pub fn restrict(&self, alpha: &MultiIndex) -> MultiIndexSet {
        let n_model = alpha.len();
        let mut out = MultiIndexSet::empty(self.dim - n_model);
        for m in &self.members {
            if &m.entries()[..n_model] == alpha.entries() {
                out.members.insert(m.parameter(n_model));
            }
        }
        out.admissible = None;
        out
    }

    /// Fidelity parts present in the set.
    pub fn active_fidelities(&self, n_model: usize) -> BTreeSet<MultiIndex> {
        self.members.iter().map(|m| m.fidelity(n_model)).collect()
    }

    /// Writes one row per index with columns `prefix1..prefixN`.
    pub fn write_csv<W: Write>(&self, out: W, prefix: &str) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        let header: Vec<String> = (1..=self.dim).map(|i| format!("{prefix}{i}")).collect();
        w.write_record(&header)?;
        for m in &self.members {
            w.write_record(m.entries().iter().map(|e| e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

impl<'a> IntoIterator for &'a MultiIndexSet {
    type Item = &'a MultiIndex;
    type IntoIter = std::collections::btree_set::Iter<'a, MultiIndex>;
    fn into_iter(self) -> Self::IntoIter {
        self.members.iter()
    }
}
