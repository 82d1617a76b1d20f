//! Combinatorial blocks, their matrices `C_A` with entries polynomial in
//! `sqrt(xi)`, numeric Fitting (semisimple + nilpotent) decompositions at
//! sampled parameters, and the deduplicated eigenvalue catalog.

use crate::graph::GeometricBlock;
use crate::lattice::{EdgeColor, EdgeLabel, TangentialSites};
use crate::numeric::{self, C64, CMat};
use crate::poly::{dot_i64, edge_coeff, omega1, HalfPoly};
use nalgebra::DMatrix;
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BlockError {
    #[error("eigenvalue clusters closer than 10 tol at xi = {xi:?} (near-discriminant) for block {block}")]
    NearDiscriminant { block: String, xi: Vec<f64> },
    #[error("resolvent solve failed during contour integration")]
    ContourFailure,
    #[error("projector rank does not match cluster multiplicity")]
    RankMismatch,
    #[error("branch identification inconsistent across samples (region boundary?): {0}")]
    RegionBoundary(String),
    #[error(transparent)]
    Poly(#[from] crate::poly::PolyError),
}

/// The marking-only abstraction of a geometric block: vertex 0 is the root,
/// remaining vertices ordered by `(L, sigma)`. Translated geometric blocks map
/// to identical combinatorial blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CombinatorialBlock {
    pub sigma: Vec<i8>,
    pub l_of: Vec<Vec<i64>>,
    pub black: Vec<(usize, usize, EdgeLabel)>,
    pub red: Vec<(usize, usize, EdgeLabel)>,
}

impl CombinatorialBlock {
    pub fn size(&self) -> usize {
        self.sigma.len()
    }

    pub fn has_red(&self) -> bool {
        !self.red.is_empty()
    }

    /// Stable identity usable as a map key.
    pub fn key(&self) -> String {
        format!("{:?}|{:?}|{:?}|{:?}", self.sigma, self.l_of, self.black, self.red)
    }
}

/// Canonicalizes a rooted geometric block. Returns the combinatorial block and
/// the permutation `perm` with `perm[cb_index] = geometric_index`.
pub fn combinatorialize(block: &GeometricBlock) -> (CombinatorialBlock, Vec<usize>) {
    let m = block.size();
    assert_eq!(block.sigma.len(), m, "root_data must be filled first");
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        let ka = (a != block.root, &block.l_of[a], block.sigma[a]);
        let kb = (b != block.root, &block.l_of[b], block.sigma[b]);
        ka.cmp(&kb)
    });
    let mut inv = vec![0usize; m];
    for (new, &old) in order.iter().enumerate() {
        inv[old] = new;
    }
    let mut black: Vec<(usize, usize, EdgeLabel)> = block
        .black
        .iter()
        .map(|(h, k, l)| (inv[*h], inv[*k], l.clone()))
        .collect();
    black.sort_by(|a, b| (a.0, a.1, a.2.ell()).cmp(&(b.0, b.1, b.2.ell())));
    let mut red: Vec<(usize, usize, EdgeLabel)> = block
        .red
        .iter()
        .map(|(h, k, l)| {
            let (a, b) = (inv[*h].min(inv[*k]), inv[*h].max(inv[*k]));
            (a, b, l.clone())
        })
        .collect();
    red.sort_by(|a, b| (a.0, a.1, a.2.ell()).cmp(&(b.0, b.1, b.2.ell())));
    let cb = CombinatorialBlock {
        sigma: order.iter().map(|&i| block.sigma[i]).collect(),
        l_of: order.iter().map(|&i| block.l_of[i].clone()).collect(),
        black,
        red,
    };
    (cb, order)
}

/// The matrix `C_A` of a combinatorial block, entries polynomial in `sqrt(xi)`:
/// diagonal `sigma(k) (omega^(1) . L(k))`, off-diagonal `sigma(k) c_q(l)` for
/// each edge joining the pair (multi-edges summed).
#[derive(Debug, Clone)]
pub struct BlockMatrixC {
    pub dim: usize,
    pub nvars: usize,
    /// row-major entries; `entry(h, k)` couples basis vectors `u_h, u_k`.
    pub entries: Vec<HalfPoly>,
}

impl BlockMatrixC {
    pub fn entry(&self, h: usize, k: usize) -> &HalfPoly {
        &self.entries[h * self.dim + k]
    }

    pub fn is_symmetric(&self) -> bool {
        for h in 0..self.dim {
            for k in (h + 1)..self.dim {
                if self.entry(h, k) != self.entry(k, h) {
                    return false;
                }
            }
        }
        true
    }

    pub fn evaluate(&self, xi: &[f64]) -> Result<DMatrix<f64>, BlockError> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for h in 0..self.dim {
            for k in 0..self.dim {
                m[(h, k)] = self.entry(h, k).evaluate(xi)?;
            }
        }
        Ok(m)
    }
}

pub fn matrix_of_block(cb: &CombinatorialBlock, q: u32, n: usize) -> BlockMatrixC {
    let dim = cb.size();
    let w1 = omega1(q, n);
    let mut entries = vec![HalfPoly::zero(n); dim * dim];
    for k in 0..dim {
        let diag = dot_i64(&w1, &cb.l_of[k]).scale_i64(cb.sigma[k] as i64);
        entries[k * dim + k] = diag;
    }
    for (h, k, l) in &cb.black {
        let c = edge_coeff(l, q).scale_i64(cb.sigma[*k] as i64);
        entries[h * dim + k].add_assign(&c);
    }
    for (a, b, l) in &cb.red {
        let c = edge_coeff(l, q);
        entries[a * dim + b].add_assign(&c.scale_i64(cb.sigma[*b] as i64));
        entries[b * dim + a].add_assign(&c.scale_i64(cb.sigma[*a] as i64));
    }
    BlockMatrixC { dim, nvars: n, entries }
}

/// Numeric Fitting decomposition of `C(xi)` at one parameter sample.
#[derive(Debug, Clone)]
pub struct FittingResult {
    pub xi: Vec<f64>,
    /// (eigenvalue, multiplicity) per cluster, sorted by (re, im).
    pub clusters: Vec<(C64, usize)>,
    /// `U C(xi) U^{-1}` is block diagonal in cluster order.
    pub u: CMat,
    pub semisimple: CMat,
    pub nilpotent: CMat,
    pub tol: f64,
    pub residual_offdiag: f64,
    pub residual_commute: f64,
    pub residual_nilpotent: f64,
    /// Off-block mass of `V^T Sigma V` (transpose pairing); reported, not enforced.
    pub sigma_unitarity_defect: f64,
}

/// Eigen-cluster tolerance is relative; clusters must be separated by more
/// than `10 * tol * scale` or the sample is rejected as near-discriminant.
pub fn fitting(
    c: &BlockMatrixC,
    sigma: &[i8],
    xi: &[f64],
    tol: f64,
) -> Result<FittingResult, BlockError> {
    let a_real = c.evaluate(xi)?;
    let dim = c.dim;
    let scale = a_real.norm().max(1e-300);
    let tol_abs = tol * scale;
    let eigs = numeric::eigenvalues_real(&a_real);
    let clusters = numeric::cluster_eigenvalues(&eigs, tol_abs);
    for i in 0..clusters.len() {
        for j in (i + 1)..clusters.len() {
            if (clusters[i].0 - clusters[j].0).norm() <= 10.0 * tol_abs {
                return Err(BlockError::NearDiscriminant {
                    block: format!("dim {dim}"),
                    xi: xi.to_vec(),
                });
            }
        }
    }
    let a = numeric::to_complex(&a_real);
    let mut projectors: Vec<CMat> = Vec::new();
    if clusters.len() == 1 {
        projectors.push(CMat::identity(dim, dim));
    } else {
        for (i, (center, _)) in clusters.iter().enumerate() {
            let gap = clusters
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, (c2, _))| (center - c2).norm())
                .fold(f64::INFINITY, f64::min);
            let radius = 0.4 * gap;
            let p = numeric::contour_projector(&a, *center, radius, 64)
                .ok_or(BlockError::ContourFailure)?;
            projectors.push(p);
        }
    }
    // basis adapted to the generalized eigenspaces
    let mut columns: Vec<numeric::CVec> = Vec::new();
    for (p, (_, members)) in projectors.iter().zip(&clusters) {
        let basis = numeric::range_basis(p, members.len()).ok_or(BlockError::RankMismatch)?;
        columns.extend(basis);
    }
    let v = CMat::from_columns(&columns);
    let u = numeric::inverse(&v).ok_or(BlockError::RankMismatch)?;

    // semisimple part from refined cluster means: mu_i = tr(A P_i) / mult
    let mut semisimple = CMat::zeros(dim, dim);
    let mut refined = Vec::new();
    for (p, (_, members)) in projectors.iter().zip(&clusters) {
        let ap = &a * p;
        let tr: C64 = (0..dim).map(|i| ap[(i, i)]).sum();
        let mu = tr / C64::new(members.len() as f64, 0.0);
        refined.push((mu, members.len()));
        semisimple += p * mu;
    }
    let nilpotent = &a - &semisimple;

    // residuals
    let conj = &u * &a * &v;
    let mut offdiag = 0.0f64;
    let mut start = 0;
    let ranges: Vec<(usize, usize)> = refined
        .iter()
        .map(|&(_, m)| {
            let r = (start, start + m);
            start += m;
            r
        })
        .collect();
    for (bi, &(s1, e1)) in ranges.iter().enumerate() {
        for (bj, &(s2, e2)) in ranges.iter().enumerate() {
            if bi != bj {
                for r in s1..e1 {
                    for cc in s2..e2 {
                        offdiag += conj[(r, cc)].norm_sqr();
                    }
                }
            }
        }
    }
    let residual_offdiag = offdiag.sqrt() / scale;
    let residual_commute = numeric::commutator_norm(&semisimple, &nilpotent) / scale;
    let mut npow = nilpotent.clone();
    for _ in 1..dim {
        npow = &npow * &nilpotent;
    }
    let residual_nilpotent = npow.norm() / scale.powi(dim as i32);

    // Sigma-orthogonality of the eigenbasis under the transpose pairing
    let sig = CMat::from_fn(dim, dim, |i, j| {
        if i == j {
            C64::new(sigma[i] as f64, 0.0)
        } else {
            C64::new(0.0, 0.0)
        }
    });
    let g = v.transpose() * &sig * &v;
    let mut defect = 0.0f64;
    for (bi, &(s1, e1)) in ranges.iter().enumerate() {
        for (bj, &(s2, e2)) in ranges.iter().enumerate() {
            if bi != bj {
                for r in s1..e1 {
                    for cc in s2..e2 {
                        defect = defect.max(g[(r, cc)].norm());
                    }
                }
            }
        }
    }

    Ok(FittingResult {
        xi: xi.to_vec(),
        clusters: refined,
        u,
        semisimple,
        nilpotent,
        tol,
        residual_offdiag,
        residual_commute,
        residual_nilpotent,
        sigma_unitarity_defect: defect,
    })
}

/// One deduplicated eigenvalue branch of the family of block matrices over a
/// fixed parameter region.
#[derive(Debug, Clone)]
pub struct Branch {
    pub id: usize,
    /// Value at each sample, in sample order.
    pub values: Vec<C64>,
    pub real: bool,
    /// (block index, eigenvalue slot) pairs realizing this branch.
    pub sources: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct Catalog {
    pub xi_samples: Vec<Vec<f64>>,
    pub branches: Vec<Branch>,
    /// branch id of each (block, slot): `slot_branch[block][slot]`.
    pub slot_branch: Vec<Vec<usize>>,
    pub tol: f64,
}

impl Catalog {
    pub fn zero_branch(&self) -> Option<usize> {
        self.branches
            .iter()
            .find(|b| b.values.iter().all(|v| v.norm() < self.tol))
            .map(|b| b.id)
    }

    pub fn to_json(&self) -> Value {
        json!({
            "samples": self.xi_samples,
            "branches": self.branches.iter().map(|b| json!({
                "id": b.id,
                "real": b.real,
                "values": b.values.iter().map(|v| json!([v.re, v.im])).collect::<Vec<_>>(),
                "sources": b.sources,
            })).collect::<Vec<_>>(),
        })
    }
}

/// Eigenvalues of every block matrix at every sample, with branches identified
/// across blocks when they agree at all samples; slot assignment is by sorted
/// order per sample, validated by a homogeneity scaling check between each
/// first sample and its doubled counterpart.
pub fn eigenvalue_catalog(
    matrices: &[BlockMatrixC],
    q: u32,
    xi_samples: &[Vec<f64>],
    tol: f64,
) -> Result<Catalog, BlockError> {
    if xi_samples.len() < 3 {
        return Err(BlockError::RegionBoundary("need at least 3 samples".into()));
    }
    let t = 2.0f64;
    let homog = t.powi(q as i32);
    let mut per_block: Vec<Vec<Vec<C64>>> = Vec::new(); // [block][sample][slot]
    for m in matrices {
        let mut per_sample = Vec::new();
        for xi in xi_samples {
            let a = m.evaluate(xi)?;
            let mut eigs = numeric::eigenvalues_real(&a);
            eigs.sort_by(|a, b| {
                (a.re, a.im)
                    .partial_cmp(&(b.re, b.im))
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            per_sample.push(eigs);
        }
        // homogeneity check against the scaled first sample
        let scaled: Vec<f64> = xi_samples[0].iter().map(|x| t * x).collect();
        let a = m.evaluate(&scaled)?;
        let mut eigs_scaled = numeric::eigenvalues_real(&a);
        eigs_scaled.sort_by(|a, b| {
            (a.re, a.im)
                .partial_cmp(&(b.re, b.im))
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        for (slot, base) in per_sample[0].iter().enumerate() {
            let predicted = base * C64::new(homog, 0.0);
            let got = eigs_scaled[slot];
            let sc = predicted.norm().max(1.0);
            if (predicted - got).norm() > 1e-6 * sc {
                return Err(BlockError::RegionBoundary(format!(
                    "slot {slot}: predicted {predicted}, got {got}"
                )));
            }
        }
        per_block.push(per_sample);
    }

    let mut branches: Vec<Branch> = Vec::new();
    let mut slot_branch: Vec<Vec<usize>> = Vec::new();
    for (bi, per_sample) in per_block.iter().enumerate() {
        let dim = per_sample[0].len();
        let mut slots = Vec::new();
        for slot in 0..dim {
            let values: Vec<C64> = per_sample.iter().map(|s| s[slot]).collect();
            let found = branches.iter_mut().find(|b| {
                b.values
                    .iter()
                    .zip(&values)
                    .all(|(a, c)| (a - c).norm() <= tol * a.norm().max(1.0))
            });
            let id = match found {
                Some(b) => {
                    b.sources.push((bi, slot));
                    b.id
                }
                None => {
                    let id = branches.len();
                    let real = values.iter().all(|v| v.im.abs() <= tol * v.norm().max(1.0));
                    branches.push(Branch { id, values, real, sources: vec![(bi, slot)] });
                    id
                }
            };
            slots.push(id);
        }
        slot_branch.push(slots);
    }
    Ok(Catalog { xi_samples: xi_samples.to_vec(), branches, slot_branch, tol })
}

/// The matrix of `-i ad(N)` on the block `(A, nu)^+`: `C_A(xi)` plus the scalar
/// `|r|^2 + sum_i nu_i |j_i|^2 + omega^(1)(xi) . nu`.
pub fn ad_block(
    c: &BlockMatrixC,
    root_norm2: i64,
    nu: &[i64],
    q: u32,
    sites: &TangentialSites,
    xi: &[f64],
) -> Result<DMatrix<f64>, BlockError> {
    let mut m = c.evaluate(xi)?;
    let w1 = omega1(q, sites.n());
    let mut scalar = root_norm2 as f64;
    for (i, &ni) in nu.iter().enumerate() {
        scalar += (ni * sites.site(i).norm2()) as f64;
        if ni != 0 {
            scalar += ni as f64 * w1[i].evaluate(xi)?;
        }
    }
    for i in 0..c.dim {
        m[(i, i)] += scalar;
    }
    Ok(m)
}

/// Does an edge of either color join the pair in this block?
pub fn color_of_pair(cb: &CombinatorialBlock, a: usize, b: usize) -> Option<EdgeColor> {
    if cb.black.iter().any(|(h, k, _)| (*h, *k) == (a, b) || (*h, *k) == (b, a)) {
        return Some(EdgeColor::Black);
    }
    if cb.red.iter().any(|(h, k, _)| (*h, *k) == (a, b) || (*h, *k) == (b, a)) {
        return Some(EdgeColor::Red);
    }
    None
}
