//! Dense numeric helpers for the small matrices of this crate: complex
//! eigenvalue clustering, spectral projectors by contour integration, and
//! operator norms via the real embedding of a complex matrix.

use nalgebra::{Complex, DMatrix, DVector};

pub type C64 = Complex<f64>;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

/// Real matrix -> complex.
pub fn to_complex(a: &DMatrix<f64>) -> CMat {
    CMat::from_fn(a.nrows(), a.ncols(), |i, j| C64::new(a[(i, j)], 0.0))
}

/// Real 2m x 2n embedding [[Re, -Im], [Im, Re]]; its singular values are those
/// of the complex matrix, each with multiplicity doubled.
pub fn real_embedding(a: &CMat) -> DMatrix<f64> {
    let (m, n) = a.shape();
    DMatrix::from_fn(2 * m, 2 * n, |i, j| {
        let (bi, bj) = (i % m, j % n);
        match (i / m, j / n) {
            (0, 0) | (1, 1) => a[(bi, bj)].re,
            (0, 1) => -a[(bi, bj)].im,
            (1, 0) => a[(bi, bj)].im,
            _ => unreachable!(),
        }
    })
}

/// L2 operator norm (largest singular value).
pub fn op_norm(a: &CMat) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    real_embedding(a).singular_values().max()
}

/// Smallest singular value.
pub fn smin(a: &CMat) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let sv = real_embedding(a).singular_values();
    sv.iter().cloned().fold(f64::INFINITY, f64::min)
}

pub fn det(a: &CMat) -> C64 {
    a.clone().lu().determinant()
}

/// Solve A X = B for complex dense A.
pub fn solve(a: &CMat, b: &CMat) -> Option<CMat> {
    a.clone().lu().solve(b)
}

pub fn inverse(a: &CMat) -> Option<CMat> {
    a.clone().lu().try_inverse()
}

/// Eigenvalues of a real square matrix as complex numbers (via real Schur).
pub fn eigenvalues_real(a: &DMatrix<f64>) -> Vec<C64> {
    a.clone().complex_eigenvalues().iter().cloned().collect()
}

/// Groups eigenvalues into clusters of pairwise distance <= `tol`, transitively.
/// Returns (center, member indices) per cluster, sorted by (re, im) of center.
pub fn cluster_eigenvalues(eigs: &[C64], tol: f64) -> Vec<(C64, Vec<usize>)> {
    let n = eigs.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut Vec<usize>, i: usize) -> usize {
        if p[i] != i {
            let r = find(p, p[i]);
            p[i] = r;
        }
        p[i]
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if (eigs[i] - eigs[j]).norm() <= tol {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri] = rj;
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    let mut out: Vec<(C64, Vec<usize>)> = groups
        .into_values()
        .map(|members| {
            let sum: C64 = members.iter().map(|&i| eigs[i]).sum();
            (sum / C64::new(members.len() as f64, 0.0), members)
        })
        .collect();
    out.sort_by(|a, b| {
        (a.0.re, a.0.im)
            .partial_cmp(&(b.0.re, b.0.im))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    out
}

/// Spectral projector onto the generalized eigenspace of the cluster centered
/// at `center`, by trapezoidal contour integration of the resolvent on a
/// circle of radius `radius` (exponentially accurate for analytic integrands).
pub fn contour_projector(a: &CMat, center: C64, radius: f64, points: usize) -> Option<CMat> {
    let n = a.nrows();
    let id = CMat::identity(n, n);
    let mut p = CMat::zeros(n, n);
    for m in 0..points {
        let theta = 2.0 * std::f64::consts::PI * (m as f64 + 0.5) / points as f64;
        let w = C64::new(theta.cos(), theta.sin());
        let z = center + w * C64::new(radius, 0.0);
        let resolvent = solve(&(&id * z - a), &id)?;
        p += resolvent * w;
    }
    Some(p * C64::new(radius / points as f64, 0.0))
}

/// Orthonormal basis of the column space of `p`, which is expected to have
/// rank `rank` (pivoted Gram-Schmidt with deflation).
pub fn range_basis(p: &CMat, rank: usize) -> Option<Vec<CVec>> {
    let mut residual = p.clone();
    let mut basis: Vec<CVec> = Vec::new();
    for _ in 0..rank {
        // pick the residual column with the largest norm
        let (best, norm) = (0..residual.ncols())
            .map(|j| (j, residual.column(j).norm()))
            .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if norm < 1e-7 {
            return None; // projector rank deficient relative to multiplicity
        }
        let mut v: CVec = residual.column(best).into();
        // orthogonalize against existing basis (twice, for stability)
        for _ in 0..2 {
            for b in &basis {
                let c: C64 = b.dotc(&v);
                v -= b * c;
            }
        }
        let nv = v.norm();
        if nv < 1e-9 {
            return None;
        }
        v /= C64::new(nv, 0.0);
        basis.push(v.clone());
        // deflate
        for j in 0..residual.ncols() {
            let c: C64 = v.dotc(&residual.column(j).into_owned());
            let col = residual.column(j) - &v * c;
            residual.set_column(j, &col);
        }
    }
    Some(basis)
}

/// Frobenius norm of the commutator [a, b].
pub fn commutator_norm(a: &CMat, b: &CMat) -> f64 {
    (a * b - b * a).norm()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_singular_values() {
        let a = CMat::from_row_slice(2, 2, &[
            C64::new(1.0, 2.0),
            C64::new(0.0, -1.0),
            C64::new(3.0, 0.0),
            C64::new(0.5, 0.5),
        ]);
        // s_max(A)^2 = largest eigenvalue of A^H A; compare against direct
        let aha = a.adjoint() * &a;
        let tr = aha[(0, 0)].re + aha[(1, 1)].re;
        let det = (aha[(0, 0)] * aha[(1, 1)] - aha[(0, 1)] * aha[(1, 0)]).re;
        let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
        let smax = (tr / 2.0 + disc).sqrt();
        let smin_direct = (tr / 2.0 - disc).max(0.0).sqrt();
        assert!((op_norm(&a) - smax).abs() < 1e-10);
        assert!((smin(&a) - smin_direct).abs() < 1e-10);
    }

    #[test]
    fn projector_splits_diagonalizable_matrix() {
        // A = diag(1, 1, 5) conjugated by a fixed invertible matrix
        let t = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 3.0]);
        let tinv = t.clone().try_inverse().unwrap();
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 5.0]));
        let a = to_complex(&(&t * d * tinv));
        let p1 = contour_projector(&a, C64::new(1.0, 0.0), 1.5, 64).unwrap();
        let p5 = contour_projector(&a, C64::new(5.0, 0.0), 1.5, 64).unwrap();
        // projector identities
        assert!((&p1 * &p1 - &p1).norm() < 1e-10);
        assert!((&p1 + &p5 - CMat::identity(3, 3)).norm() < 1e-10);
        // trace = multiplicity
        let tr1: C64 = (0..3).map(|i| p1[(i, i)]).sum();
        assert!((tr1.re - 2.0).abs() < 1e-10 && tr1.im.abs() < 1e-12);
    }

    #[test]
    fn clustering_groups_close_values() {
        let eigs = vec![
            C64::new(1.0, 0.0),
            C64::new(1.0 + 1e-12, 0.0),
            C64::new(2.0, 0.0),
        ];
        let clusters = cluster_eigenvalues(&eigs, 1e-8);
        assert_eq!(clusters.len(), 2);
        assert_eq!(clusters[0].1.len(), 2);
    }

    #[test]
    fn range_basis_of_rank_one_projector() {
        // p = v v^H with unit v
        let v = CVec::from_vec(vec![
            C64::new(0.6, 0.0),
            C64::new(0.0, 0.8),
        ]);
        let p = &v * v.adjoint();
        let basis = range_basis(&p, 1).unwrap();
        assert_eq!(basis.len(), 1);
        let b = &basis[0];
        // spans the same line
        let overlap = b.dotc(&v).norm();
        assert!((overlap - 1.0).abs() < 1e-12);
    }
}
