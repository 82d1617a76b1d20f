//! Integer lattice primitives: vectors in `Z^d` and `Z^n`, the linear maps
//! `eta`, `pi`, `pi^(2)` attached to a choice of tangential sites, and the
//! enumeration of the edge sets `X_q`.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// A point of `Z^d`. The dimension is fixed per session; the Euclidean norm is
/// the relevant one on this side of the construction.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LatticeVector(pub Vec<i64>);

impl LatticeVector {
    pub fn zero(dim: usize) -> Self {
        LatticeVector(vec![0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Squared Euclidean norm, always a nonnegative integer.
    pub fn norm2(&self) -> i64 {
        self.0.iter().map(|&x| x * x).sum()
    }

    pub fn linf(&self) -> i64 {
        self.0.iter().map(|&x| x.abs()).max().unwrap_or(0)
    }

    pub fn dot(&self, other: &Self) -> i64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn add(&self, other: &Self) -> Self {
        LatticeVector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &Self) -> Self {
        LatticeVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn neg(&self) -> Self {
        LatticeVector(self.0.iter().map(|&x| -x).collect())
    }

    pub fn scale(&self, c: i64) -> Self {
        LatticeVector(self.0.iter().map(|&x| c * x).collect())
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0)
    }
}

impl fmt::Debug for LatticeVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, x) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{x}")?;
        }
        write!(f, ")")
    }
}

/// The `n` excited sites `j_1, ..., j_n` in `Z^d`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TangentialSites {
    sites: Vec<LatticeVector>,
}

#[derive(Debug, Error)]
pub enum LatticeError {
    #[error("tangential sites must be pairwise distinct (duplicate {0:?})")]
    DuplicateSite(LatticeVector),
    #[error("tangential sites must all have dimension {expected}, got {got}")]
    MixedDimensions { expected: usize, got: usize },
    #[error("at least one tangential site is required")]
    Empty,
    #[error("edge label has length {got}, expected n = {expected}")]
    LabelLength { expected: usize, got: usize },
    #[error("invalid edge label {0:?}: {1}")]
    InvalidLabel(Vec<i64>, &'static str),
    #[error("quadratic energy of {0:?} is not an integer (odd |pi|^2 + pi2)")]
    NonIntegerEnergy(Vec<i64>),
}

impl TangentialSites {
    pub fn new(sites: Vec<LatticeVector>) -> Result<Self, LatticeError> {
        let Some(first) = sites.first() else {
            return Err(LatticeError::Empty);
        };
        let d = first.dim();
        for s in &sites {
            if s.dim() != d {
                return Err(LatticeError::MixedDimensions {
                    expected: d,
                    got: s.dim(),
                });
            }
        }
        for (i, s) in sites.iter().enumerate() {
            if sites[i + 1..].contains(s) {
                return Err(LatticeError::DuplicateSite(s.clone()));
            }
        }
        Ok(TangentialSites { sites })
    }

    pub fn n(&self) -> usize {
        self.sites.len()
    }

    pub fn d(&self) -> usize {
        self.sites[0].dim()
    }

    pub fn site(&self, i: usize) -> &LatticeVector {
        &self.sites[i]
    }

    pub fn sites(&self) -> &[LatticeVector] {
        &self.sites
    }

    /// The vector `j^(2) = (|j_1|^2, ..., |j_n|^2)`.
    pub fn j2(&self) -> Vec<i64> {
        self.sites.iter().map(|s| s.norm2()).collect()
    }

    pub fn contains(&self, k: &LatticeVector) -> bool {
        self.sites.contains(k)
    }

    pub fn max_linf(&self) -> i64 {
        self.sites.iter().map(|s| s.linf()).max().unwrap_or(0)
    }
}

/// Color of an edge label, determined by its mass `eta`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeColor {
    /// `eta(l) = 0`; pairs `z_h zbar_k`.
    Black,
    /// `eta(l) = -2`; pairs `z_h z_k`.
    Red,
}

/// An element `l` of `Z^n` with `eta(l) in {0, -2}`, `l != 0`, `l != -2 e_i`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeLabel {
    ell: Vec<i64>,
    color: EdgeColor,
}

impl fmt::Debug for EdgeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}{:?}", self.color, self.ell)
    }
}

impl EdgeLabel {
    pub fn new(ell: Vec<i64>) -> Result<Self, LatticeError> {
        let eta: i64 = ell.iter().sum();
        if ell.iter().all(|&x| x == 0) {
            return Err(LatticeError::InvalidLabel(ell, "l = 0"));
        }
        let color = match eta {
            0 => EdgeColor::Black,
            -2 => {
                let minus_two_basis = ell.iter().filter(|&&x| x != 0).count() == 1
                    && ell.contains(&-2);
                if minus_two_basis {
                    return Err(LatticeError::InvalidLabel(ell, "l = -2 e_i"));
                }
                EdgeColor::Red
            }
            _ => return Err(LatticeError::InvalidLabel(ell, "eta(l) not in {0, -2}")),
        };
        Ok(EdgeLabel { ell, color })
    }

    pub fn ell(&self) -> &[i64] {
        &self.ell
    }

    pub fn n(&self) -> usize {
        self.ell.len()
    }

    pub fn color(&self) -> EdgeColor {
        self.color
    }

    pub fn eta(&self) -> i64 {
        self.ell.iter().sum()
    }

    pub fn l1(&self) -> i64 {
        self.ell.iter().map(|&x| x.abs()).sum()
    }

    /// Only valid for black labels (eta = 0 is preserved by negation).
    pub fn negate(&self) -> Result<Self, LatticeError> {
        EdgeLabel::new(self.ell.iter().map(|&x| -x).collect())
    }

    /// Splits `l = l+ - l-` into its positive and negative parts.
    pub fn split(&self) -> (Vec<i64>, Vec<i64>) {
        let plus = self.ell.iter().map(|&x| x.max(0)).collect();
        let minus = self.ell.iter().map(|&x| (-x).max(0)).collect();
        (plus, minus)
    }
}

/// The images `(eta(l), pi(l), pi^(2)(l))` of an integer `n`-tuple under the
/// maps `e_i -> 1`, `e_i -> j_i`, `e_i -> |j_i|^2`.
pub fn linear_maps(
    ell: &[i64],
    sites: &TangentialSites,
) -> Result<(i64, LatticeVector, i64), LatticeError> {
    if ell.len() != sites.n() {
        return Err(LatticeError::LabelLength {
            expected: sites.n(),
            got: ell.len(),
        });
    }
    let eta: i64 = ell.iter().sum();
    let mut pi = LatticeVector::zero(sites.d());
    let mut pi2: i64 = 0;
    for (i, &c) in ell.iter().enumerate() {
        if c != 0 {
            pi = pi.add(&sites.site(i).scale(c));
            pi2 += c * sites.site(i).norm2();
        }
    }
    Ok((eta, pi, pi2))
}

/// The quadratic energy `K(l) = ((1 + eta(l))/2)(|pi(l)|^2 + pi^(2)(l))`,
/// an integer for every admissible edge label.
pub fn quadratic_energy(ell: &EdgeLabel, sites: &TangentialSites) -> Result<i64, LatticeError> {
    let (eta, pi, pi2) = linear_maps(ell.ell(), sites)?;
    let paren = pi.norm2() + pi2;
    if paren % 2 != 0 {
        return Err(LatticeError::NonIntegerEnergy(ell.ell().to_vec()));
    }
    // (1 + eta)/2 is +1/2 for black, -1/2 for red.
    Ok((1 + eta) * (paren / 2))
}

/// Edge sets `X_q^0` (black) and `X_q^{-2}` (red), canonically sorted.
#[derive(Clone, Debug, Default)]
pub struct EdgeSets {
    pub black: Vec<EdgeLabel>,
    pub red: Vec<EdgeLabel>,
}

impl EdgeSets {
    pub fn all(&self) -> impl Iterator<Item = &EdgeLabel> {
        self.black.iter().chain(self.red.iter())
    }

    pub fn len(&self) -> usize {
        self.black.len() + self.red.len()
    }

    pub fn is_empty(&self) -> bool {
        self.black.is_empty() && self.red.is_empty()
    }
}

/// Enumerates `X_q`: all `l` writable as a signed sum of `2q` basis vectors
/// (with repetition) that satisfy the edge-label constraints. Equivalently,
/// `|l|_1 <= 2q` with `eta(l) in {0, -2}` (the parity condition is automatic),
/// excluding `l = 0` and `l = -2 e_i`.
pub fn enumerate_edges(q: u32, n: usize) -> EdgeSets {
    assert!(q >= 1 && n >= 1, "q >= 1 and n >= 1 required");
    let budget = 2 * q as i64;
    let mut black = Vec::new();
    let mut red = Vec::new();
    let mut current = vec![0i64; n];
    fill(&mut current, 0, budget, &mut |ell| {
        if let Ok(label) = EdgeLabel::new(ell.to_vec()) {
            match label.color() {
                EdgeColor::Black => black.push(label),
                EdgeColor::Red => red.push(label),
            }
        }
    });
    black.sort_by(|a, b| a.ell().cmp(b.ell()));
    red.sort_by(|a, b| a.ell().cmp(b.ell()));
    EdgeSets { black, red }
}

fn fill(current: &mut Vec<i64>, idx: usize, budget: i64, emit: &mut impl FnMut(&[i64])) {
    if idx == current.len() {
        emit(current);
        return;
    }
    for v in -budget..=budget {
        current[idx] = v;
        fill(current, idx + 1, budget - v.abs(), emit);
    }
    current[idx] = 0;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sites(v: &[&[i64]]) -> TangentialSites {
        TangentialSites::new(v.iter().map(|s| LatticeVector(s.to_vec())).collect()).unwrap()
    }

    #[test]
    fn linear_maps_basic() {
        let s = sites(&[&[1, 0], &[0, 1]]);
        let (eta, pi, pi2) = linear_maps(&[1, -1], &s).unwrap();
        assert_eq!(eta, 0);
        assert_eq!(pi, LatticeVector(vec![1, -1]));
        assert_eq!(pi2, 0);

        let (eta, pi, pi2) = linear_maps(&[-1, -1], &s).unwrap();
        assert_eq!(eta, -2);
        assert_eq!(pi, LatticeVector(vec![-1, -1]));
        assert_eq!(pi2, -2);

        let (eta, pi, pi2) = linear_maps(&[0, 0], &s).unwrap();
        assert_eq!((eta, pi2), (0, 0));
        assert!(pi.is_zero());
    }

    #[test]
    fn linear_maps_dimension_mismatch() {
        let s = sites(&[&[1, 0], &[0, 1]]);
        assert!(linear_maps(&[1, 0, -1], &s).is_err());
    }

    #[test]
    fn enumerate_edges_q1_n2() {
        let e = enumerate_edges(1, 2);
        let labels: Vec<&[i64]> = e.black.iter().map(|l| l.ell()).collect();
        assert_eq!(labels, vec![&[-1, 1][..], &[1, -1][..]]);
        let reds: Vec<&[i64]> = e.red.iter().map(|l| l.ell()).collect();
        assert_eq!(reds, vec![&[-1, -1][..]]);
    }

    #[test]
    fn enumerate_edges_q1_n3_counts() {
        let e = enumerate_edges(1, 3);
        assert_eq!(e.black.len(), 6);
        assert_eq!(e.red.len(), 3);
    }

    #[test]
    fn enumerate_edges_n1_empty() {
        for q in 1..4 {
            let e = enumerate_edges(q, 1);
            assert!(e.is_empty(), "X_q in Z^1 must be empty");
        }
    }

    /// Brute-force oracle: all signed sums of exactly 2q basis vectors.
    fn brute_force_xq(q: u32, n: usize) -> Vec<Vec<i64>> {
        let mut out: Vec<Vec<i64>> = Vec::new();
        let terms = 2 * q as usize;
        let choices = 2 * n;
        let mut idx = vec![0usize; terms];
        loop {
            let mut ell = vec![0i64; n];
            for &c in &idx {
                let site = c / 2;
                let sign = if c % 2 == 0 { 1 } else { -1 };
                ell[site] += sign;
            }
            if EdgeLabel::new(ell.clone()).is_ok() && !out.contains(&ell) {
                out.push(ell);
            }
            // odometer
            let mut i = 0;
            loop {
                if i == terms {
                    out.sort();
                    return out;
                }
                idx[i] += 1;
                if idx[i] < choices {
                    break;
                }
                idx[i] = 0;
                i += 1;
            }
        }
    }

    #[test]
    fn enumerate_matches_brute_force_small() {
        for (q, n) in [(1, 2), (1, 3), (2, 2), (2, 3)] {
            let fast = enumerate_edges(q, n);
            let mut fast_all: Vec<Vec<i64>> =
                fast.all().map(|l| l.ell().to_vec()).collect();
            fast_all.sort();
            assert_eq!(fast_all, brute_force_xq(q, n), "q={q} n={n}");
        }
    }

    #[test]
    fn black_set_closed_under_negation() {
        let e = enumerate_edges(2, 3);
        for l in &e.black {
            let neg = l.negate().unwrap();
            assert!(e.black.contains(&neg));
        }
    }

    #[test]
    fn xq_monotone_in_q() {
        for n in 2..4 {
            let small = enumerate_edges(1, n);
            let big = enumerate_edges(2, n);
            for l in small.all() {
                assert!(big.all().any(|m| m == l));
            }
        }
    }

    #[test]
    fn quadratic_energy_examples() {
        let s = sites(&[&[1, 0], &[0, 1]]);
        let black = EdgeLabel::new(vec![1, -1]).unwrap();
        assert_eq!(quadratic_energy(&black, &s).unwrap(), 1);
        let red = EdgeLabel::new(vec![-1, -1]).unwrap();
        assert_eq!(quadratic_energy(&red, &s).unwrap(), 0);
        let s2 = sites(&[&[0, 0], &[1, 0]]);
        assert_eq!(quadratic_energy(&black, &s2).unwrap(), 0);
    }

    #[test]
    fn label_invariants_rejected() {
        assert!(EdgeLabel::new(vec![0, 0]).is_err());
        assert!(EdgeLabel::new(vec![-2, 0]).is_err());
        assert!(EdgeLabel::new(vec![1, 0]).is_err());
        assert!(EdgeLabel::new(vec![1, 1, -2]).is_ok()); // eta = 0, fine
        assert!(EdgeLabel::new(vec![-1, -1]).is_ok());
    }
}
