//! Optimal presentations of lattice points, cuts at the geometric scales
//! `rho_j = (4d)^j rho_0`, and the resulting stratification of a lattice box.
//! All scale comparisons are exact integer comparisons with rational
//! exponents cleared.

use crate::intlin;
use crate::lattice::LatticeVector;
use num_bigint::BigInt;
use serde_json::{json, Value};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StratError {
    #[error("scale N must be >= 2, got {0}")]
    ScaleTooSmall(i64),
    #[error("no valid cut for {0:?} at any level <= d+1 (parameter misconfiguration)")]
    NoCut(Vec<i64>),
    #[error("rho0 must be positive")]
    BadRho,
}

/// A positive rational order parameter `rho_0 = num/den`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rho {
    pub num: u32,
    pub den: u32,
}

impl Rho {
    pub fn new(num: u32, den: u32) -> Result<Self, StratError> {
        if num == 0 || den == 0 {
            return Err(StratError::BadRho);
        }
        let g = gcd(num, den);
        Ok(Rho { num: num / g, den: den / g })
    }

    /// Closest small-denominator rational (continued fractions, den <= 4096).
    pub fn from_f64(x: f64) -> Result<Self, StratError> {
        if !(x > 0.0) {
            return Err(StratError::BadRho);
        }
        let (mut p0, mut q0, mut p1, mut q1) = (0u64, 1u64, 1u64, 0u64);
        let mut v = x;
        for _ in 0..30 {
            let a = v.floor() as u64;
            let (p2, q2) = (a * p1 + p0, a * q1 + q0);
            if q2 > 4096 {
                break;
            }
            (p0, q0, p1, q1) = (p1, q1, p2, q2);
            let frac = v - a as f64;
            if frac.abs() < 1e-12 {
                break;
            }
            v = 1.0 / frac;
        }
        Rho::new(p1 as u32, q1 as u32)
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `rho_j = (4d)^j rho_0` as an exact exponent pair `(num * (4d)^j, den)`.
    fn level(&self, d: usize, j: u32) -> (BigInt, u32) {
        let base = BigInt::from(4 * d as u64);
        (BigInt::from(self.num) * base.pow(j), self.den)
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Exact comparison `x < N^(num/den)` <=> `x^den < N^num` for `x >= 0`.
fn below_power(x: i64, n: i64, exp: &(BigInt, u32)) -> bool {
    debug_assert!(x >= 0);
    let (num, den) = exp;
    let num_u = num.to_string().parse::<u64>().unwrap_or(u64::MAX);
    // cap: if N^num alone exceeds x^den by sheer size, shortcut via logs with
    // a wide margin, exact only near the boundary
    let lx = if x <= 1 { 0.0 } else { (x as f64).ln() * *den as f64 };
    let ln = (n as f64).ln() * num_u as f64;
    if ln > lx + 1.0 {
        return true;
    }
    if ln < lx - 1.0 {
        return false;
    }
    BigInt::from(x).pow(*den) < BigInt::from(n).pow(num_u as u32)
}

/// The optimal presentation of `m` at scale `N`: `d` pairs `(v_i, p_i)` with
/// `v_i . m = p_i`, `|v_i|_1 <= N`, linearly independent, minimal in the
/// order `(|p|, |v|_1, lex(v))` over sign-canonical `v` (first nonzero > 0).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Presentation {
    pub pairs: Vec<(Vec<i64>, i64)>,
    pub n_scale: i64,
}

pub fn optimal_presentation(m: &LatticeVector, n_scale: i64) -> Result<Presentation, StratError> {
    if n_scale < 2 {
        return Err(StratError::ScaleTooSmall(n_scale));
    }
    let d = m.dim();
    // tie-break by colex (reversed-vector lex) so that for m = 0 the basis
    // vectors are picked in index order e_1, e_2, ...
    let mut candidates: Vec<(i64, i64, Vec<i64>, Vec<i64>)> = Vec::new();
    let mut v = vec![0i64; d];
    enumerate_canonical(&mut v, 0, n_scale, &mut |v| {
        let p: i64 = v.iter().zip(&m.0).map(|(a, b)| a * b).sum();
        let l1: i64 = v.iter().map(|x| x.abs()).sum();
        let rev: Vec<i64> = v.iter().rev().cloned().collect();
        candidates.push((p.abs(), l1, rev, v.to_vec()));
    });
    candidates.sort();
    let mut chosen: Vec<(Vec<i64>, i64)> = Vec::new();
    let mut rows: Vec<Vec<i64>> = Vec::new();
    for (_, _, _, v) in candidates {
        rows.push(v.clone());
        if intlin::rank(&rows) == rows.len() {
            let p: i64 = v.iter().zip(&m.0).map(|(a, b)| a * b).sum();
            chosen.push((v, p));
            if chosen.len() == d {
                break;
            }
        } else {
            rows.pop();
        }
    }
    debug_assert_eq!(chosen.len(), d, "basis vectors span for N >= 1");
    Ok(Presentation { pairs: chosen, n_scale })
}

/// Sign-canonical nonzero vectors with `1 <= |v|_1 <= budget`: the first
/// nonzero coordinate is positive.
fn enumerate_canonical(v: &mut Vec<i64>, idx: usize, budget: i64, emit: &mut impl FnMut(&[i64])) {
    if idx == v.len() {
        if v.iter().any(|&x| x != 0) && v.iter().find(|&&x| x != 0).copied().unwrap_or(0) > 0 {
            emit(v);
        }
        return;
    }
    for x in -budget..=budget {
        v[idx] = x;
        enumerate_canonical(v, idx + 1, budget - x.abs(), emit);
    }
    v[idx] = 0;
}

/// The number of equations kept (`ell`, the stratum codimension) and the
/// interval level `j` of the cut.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutResult {
    pub ell: usize,
    pub level: u32,
}

/// Finds the smallest level `j <= d+1` with a two-sided gap: all of
/// `2|p_1|..2|p_ell| < N^{rho_j}` and `|p_{ell+1}| >= 4 N^{rho_{j+1}}`
/// (with the conventions `p_0 = 0`, `p_{d+1} = infinity`).
pub fn find_cut(pres: &Presentation, rho0: Rho) -> Result<CutResult, StratError> {
    let d = pres.pairs.len();
    let n = pres.n_scale;
    let ps: Vec<i64> = pres.pairs.iter().map(|(_, p)| p.abs()).collect();
    for j in 1..=(d as u32 + 1) {
        let exp_j = rho0.level(d, j);
        let exp_j1 = rho0.level(d, j + 1);
        let ell = ps.iter().filter(|&&p| below_power(2 * p, n, &exp_j)).count();
        // entries are sorted ascending in |p| by the presentation order, so
        // the below set is exactly a prefix
        let valid = if ell == d {
            true
        } else {
            // |p_{ell+1}| >= 4 N^{rho_{j+1}} <=> not (4 N^{rho_{j+1}} > p)
            // compare p/4 >= N^{rho_{j+1}} exactly: p^den >= 4^den N^{num}
            let p = ps[ell];
            !below_quarter(p, n, &exp_j1)
        };
        if valid {
            return Ok(CutResult { ell, level: j });
        }
    }
    Err(StratError::NoCut(pres.pairs.iter().map(|(_, p)| *p).collect()))
}

/// `p/4 < N^(num/den)` <=> `p^den < 4^den N^num`.
fn below_quarter(p: i64, n: i64, exp: &(BigInt, u32)) -> bool {
    let (num, den) = exp;
    let num_u = num.to_string().parse::<u64>().unwrap_or(u64::MAX);
    let lp = if p <= 1 { 0.0 } else { (p as f64).ln() * *den as f64 };
    let ln = (n as f64).ln() * num_u as f64 + 4.0f64.ln() * *den as f64;
    if ln > lp + 1.0 {
        return true;
    }
    if ln < lp - 1.0 {
        return false;
    }
    BigInt::from(p).pow(*den) < BigInt::from(4).pow(*den) * BigInt::from(n).pow(num_u as u32)
}

/// One stratum of `Sigma^{N, rho}`.
#[derive(Debug, Clone)]
pub struct Stratum {
    /// Canonical row form of the kept equations `(v_i | p_i)`.
    pub equations: Vec<Vec<i64>>,
    pub basepoint: LatticeVector,
    /// Integral basis of the translation subgroup (rank `d - ell`).
    pub generators: Vec<Vec<i64>>,
    pub codim: usize,
    pub level: u32,
    pub rho_sigma: f64,
    pub members: Vec<LatticeVector>,
    /// Indices of strata whose affine closure is strictly contained in this one.
    pub removed_lower: Vec<usize>,
}

pub struct Stratification {
    pub n_scale: i64,
    pub rho0: Rho,
    pub strata: Vec<Stratum>,
    /// stratum index per box point, in box iteration order
    pub assignment: BTreeMap<LatticeVector, usize>,
    /// strata count per (codim, level)
    pub counts: BTreeMap<(usize, u32), usize>,
}

/// Stratifies the box `|m|_inf <= radius`: every point is assigned the affine
/// flat of its cut; the per-level counts are checked against
/// `N^{(2d-1) rho_j}` by the caller.
pub fn stratify(
    radius: i64,
    d: usize,
    n_scale: i64,
    rho0: Rho,
) -> Result<Stratification, StratError> {
    let mut strata: Vec<Stratum> = Vec::new();
    let mut key_index: BTreeMap<(u32, Vec<Vec<i64>>), usize> = BTreeMap::new();
    let mut assignment = BTreeMap::new();
    let mut points = Vec::new();
    let mut cur = vec![0i64; d];
    collect_box(&mut cur, 0, radius, &mut points);
    for m in points {
        let pres = optimal_presentation(&m, n_scale)?;
        let cut = find_cut(&pres, rho0)?;
        // canonical equations: HNF of the augmented rows (v | p)
        let aug: Vec<Vec<i64>> = pres.pairs[..cut.ell]
            .iter()
            .map(|(v, p)| {
                let mut row = v.clone();
                row.push(*p);
                row
            })
            .collect();
        let canon = intlin::subgroup_basis(&aug);
        let key = (cut.level, canon.clone());
        let idx = *key_index.entry(key).or_insert_with(|| {
            let rows: Vec<Vec<i64>> =
                pres.pairs[..cut.ell].iter().map(|(v, _)| v.clone()).collect();
            let generators = intlin::kernel_basis(&rows, d);
            strata.push(Stratum {
                equations: canon,
                basepoint: m.clone(),
                generators,
                codim: cut.ell,
                level: cut.level,
                rho_sigma: rho0.as_f64() * ((4 * d) as f64).powi(cut.level as i32),
                members: vec![],
                removed_lower: vec![],
            });
            strata.len() - 1
        });
        strata[idx].members.push(m.clone());
        assignment.insert(m, idx);
    }
    // containment of closures for the removed-lower bookkeeping
    for i in 0..strata.len() {
        for j in 0..strata.len() {
            if i == j || strata[j].codim <= strata[i].codim {
                continue;
            }
            if flat_contains(&strata[i], &strata[j]) {
                strata[i].removed_lower.push(j);
            }
        }
    }
    let mut counts: BTreeMap<(usize, u32), usize> = BTreeMap::new();
    for s in &strata {
        *counts.entry((s.codim, s.level)).or_insert(0) += 1;
    }
    Ok(Stratification { n_scale, rho0, strata, assignment, counts })
}

fn collect_box(cur: &mut Vec<i64>, idx: usize, r: i64, out: &mut Vec<LatticeVector>) {
    if idx == cur.len() {
        out.push(LatticeVector(cur.clone()));
        return;
    }
    for v in -r..=r {
        cur[idx] = v;
        collect_box(cur, idx + 1, r, out);
    }
    cur[idx] = 0;
}

/// Is the affine closure of `inner` contained in the affine closure of `outer`?
fn flat_contains(outer: &Stratum, inner: &Stratum) -> bool {
    let d = inner.basepoint.dim();
    let check = |x: &LatticeVector| -> bool {
        outer.equations.iter().all(|row| {
            let v = &row[..d];
            let p = row[d];
            v.iter().zip(&x.0).map(|(a, b)| a * b).sum::<i64>() == p
        })
    };
    if !check(&inner.basepoint) {
        return false;
    }
    inner.generators.iter().all(|g| {
        let shifted = LatticeVector(
            inner.basepoint.0.iter().zip(g).map(|(a, b)| a + b).collect(),
        );
        check(&shifted)
    })
}

/// Exact check `count <= N^{(2d-1) rho_j}`.
pub fn count_within_bound(count: usize, n_scale: i64, d: usize, rho0: Rho, level: u32) -> bool {
    let (num, den) = rho0.level(d, level);
    let num_u = num.to_string().parse::<u64>().unwrap_or(u64::MAX);
    let exponent = (2 * d as u64 - 1) * num_u;
    // count^den <= N^{(2d-1) num}
    BigInt::from(count).pow(den) <= BigInt::from(n_scale).pow(exponent as u32)
}

/// Checks that each family set is a union of strata restricted to the box:
/// every stratum's member set is contained in or disjoint from the family.
pub fn refinement_check(
    strat: &Stratification,
    families: &[std::collections::BTreeSet<LatticeVector>],
) -> Vec<usize> {
    let mut violations = Vec::new();
    for (fi, fam) in families.iter().enumerate() {
        for s in &strat.strata {
            let inside = s.members.iter().filter(|m| fam.contains(m)).count();
            if inside != 0 && inside != s.members.len() {
                violations.push(fi);
                break;
            }
        }
    }
    violations
}

pub fn stratification_to_json(s: &Stratification) -> Value {
    json!({
        "n": s.n_scale,
        "rho0": [s.rho0.num, s.rho0.den],
        "counts": s.counts.iter().map(|(&(c, l), &n)| json!({
            "codim": c, "level": l, "count": n,
        })).collect::<Vec<_>>(),
        "strata": s.strata.iter().map(|st| json!({
            "basepoint": st.basepoint.0,
            "generators": st.generators,
            "codim": st.codim,
            "level": st.level,
            "rho_sigma": st.rho_sigma,
            "members": st.members.len(),
            "removed_lower": st.removed_lower,
        })).collect::<Vec<_>>(),
    })
}
