//! Small exact integer linear algebra: ranks, affine independence and
//! subgroup bases via a fraction-free Hermite-style reduction.
//!
//! Everything here works on `i64` vectors of a common dimension and is exact;
//! overflow is not a concern at the lattice scales this crate targets (the
//! intermediate products stay far below 2^63 for box radii in the hundreds).

/// Exact rank of the given integer vectors, via fraction-free Gaussian elimination
/// over the rationals (implemented with integer cross-multiplication).
pub fn rank(vectors: &[Vec<i64>]) -> usize {
    if vectors.is_empty() {
        return 0;
    }
    let cols = vectors[0].len();
    let mut rows: Vec<Vec<i128>> = vectors
        .iter()
        .map(|v| v.iter().map(|&x| x as i128).collect())
        .collect();
    let mut rank = 0;
    let mut col = 0;
    while rank < rows.len() && col < cols {
        let pivot = (rank..rows.len()).find(|&r| rows[r][col] != 0);
        let Some(p) = pivot else {
            col += 1;
            continue;
        };
        rows.swap(rank, p);
        let (head, tail) = rows.split_at_mut(rank + 1);
        let pr = &head[rank];
        for row in tail.iter_mut() {
            if row[col] != 0 {
                let a = pr[col];
                let b = row[col];
                let g = gcd(a.unsigned_abs(), b.unsigned_abs()) as i128;
                let (a, b) = (a / g, b / g);
                for j in 0..cols {
                    row[j] = row[j] * a - pr[j] * b;
                }
                reduce_row(row);
            }
        }
        rank += 1;
        col += 1;
    }
    rank
}

fn reduce_row(row: &mut [i128]) {
    let mut g: u128 = 0;
    for &x in row.iter() {
        g = gcd(g, x.unsigned_abs());
    }
    if g > 1 {
        for x in row.iter_mut() {
            *x /= g as i128;
        }
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    if a == 0 {
        1
    } else {
        a
    }
}

/// Whether the given points are affinely independent (differences from the
/// first point have full rank).
pub fn affinely_independent(points: &[Vec<i64>]) -> bool {
    if points.len() <= 1 {
        return true;
    }
    let base = &points[0];
    let diffs: Vec<Vec<i64>> = points[1..]
        .iter()
        .map(|p| p.iter().zip(base).map(|(a, b)| a - b).collect())
        .collect();
    rank(&diffs) == diffs.len()
}

/// A basis (in Hermite normal form, row style) of the subgroup of `Z^d`
/// generated by the given vectors. The number of rows equals the rank.
pub fn subgroup_basis(generators: &[Vec<i64>]) -> Vec<Vec<i64>> {
    let mut rows: Vec<Vec<i64>> = generators.iter().filter(|v| !is_zero(v)).cloned().collect();
    if rows.is_empty() {
        return vec![];
    }
    let cols = rows[0].len();
    let mut pivot_row = 0;
    for col in 0..cols {
        // reduce all rows below pivot_row on this column by gcd steps
        loop {
            let mut best: Option<usize> = None;
            for r in pivot_row..rows.len() {
                if rows[r][col] != 0 {
                    best = match best {
                        None => Some(r),
                        Some(b) if rows[r][col].abs() < rows[b][col].abs() => Some(r),
                        other => other,
                    };
                }
            }
            let Some(b) = best else { break };
            rows.swap(pivot_row, b);
            let mut done = true;
            let (head, tail) = rows.split_at_mut(pivot_row + 1);
            let pr = &head[pivot_row];
            for row in tail.iter_mut() {
                if row[col] != 0 {
                    let q = row[col].div_euclid(pr[col]);
                    for j in 0..cols {
                        row[j] -= q * pr[j];
                    }
                    if row[col] != 0 {
                        done = false;
                    }
                }
            }
            if done {
                break;
            }
        }
        if pivot_row < rows.len() && rows[pivot_row][col] != 0 {
            if rows[pivot_row][col] < 0 {
                for x in rows[pivot_row].iter_mut() {
                    *x = -*x;
                }
            }
            pivot_row += 1;
        }
    }
    rows.truncate(pivot_row);
    rows.retain(|r| !is_zero(r));
    rows
}

/// An integral basis of the kernel `{u : M u = 0}` of the row system given by
/// `rows` (each row is one linear form on `Z^d`). Returned vectors are primitive.
pub fn kernel_basis(rows: &[Vec<i64>], dim: usize) -> Vec<Vec<i64>> {
    // Rational kernel by Gaussian elimination, then clear denominators.
    let mut m: Vec<Vec<i128>> = rows
        .iter()
        .map(|r| r.iter().map(|&x| x as i128).collect())
        .collect();
    let mut pivots: Vec<(usize, usize)> = Vec::new(); // (row, col)
    let mut rank = 0;
    for col in 0..dim {
        let pivot = (rank..m.len()).find(|&r| m[r][col] != 0);
        let Some(p) = pivot else { continue };
        m.swap(rank, p);
        let (head, tail) = m.split_at_mut(rank + 1);
        let pr = &head[rank];
        for row in tail.iter_mut() {
            if row[col] != 0 {
                let (a, b) = (pr[col], row[col]);
                for j in 0..dim {
                    row[j] = row[j] * a - pr[j] * b;
                }
                reduce_row(row);
            }
        }
        pivots.push((rank, col));
        rank += 1;
    }
    let pivot_cols: Vec<usize> = pivots.iter().map(|&(_, c)| c).collect();
    let free_cols: Vec<usize> = (0..dim).filter(|c| !pivot_cols.contains(c)).collect();
    let mut basis = Vec::new();
    for &fc in &free_cols {
        // back-substitute with rational arithmetic scaled to integers
        let mut num: Vec<i128> = vec![0; dim];
        let mut den: i128 = 1;
        num[fc] = 1;
        for &(r, c) in pivots.iter().rev() {
            // m[r] . u = 0  => u_c = -(sum_{j>c} m[r][j] u_j) / m[r][c]
            let mut s_num: i128 = 0;
            for j in (c + 1)..dim {
                s_num += m[r][j] * num[j];
            }
            // u_c = -s_num / (den * m[r][c]) relative to current denominator den
            let pc = m[r][c];
            // bring to common denominator den * pc
            for x in num.iter_mut() {
                *x *= pc;
            }
            den *= pc;
            num[c] = -s_num;
        }
        let _ = den; // sign/scale removed by primitivisation below
        let mut g: u128 = 0;
        for &x in &num {
            g = gcd(g, x.unsigned_abs());
        }
        let v: Vec<i64> = num.iter().map(|&x| (x / g as i128) as i64).collect();
        basis.push(v);
    }
    basis
}

fn is_zero(v: &[i64]) -> bool {
    v.iter().all(|&x| x == 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_of_standard_basis() {
        let v = vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]];
        assert_eq!(rank(&v), 3);
    }

    #[test]
    fn rank_detects_dependence() {
        let v = vec![vec![1, 2], vec![2, 4], vec![3, 6]];
        assert_eq!(rank(&v), 1);
    }

    #[test]
    fn affine_independence_of_collinear_points_fails() {
        let pts = vec![vec![0, 0], vec![1, 0], vec![2, 0]];
        assert!(!affinely_independent(&pts));
        let tri = vec![vec![0, 0], vec![1, 0], vec![0, 1]];
        assert!(affinely_independent(&tri));
    }

    #[test]
    fn subgroup_basis_rank_and_membership() {
        let b = subgroup_basis(&[vec![2, 0], vec![0, 3], vec![2, 3]]);
        assert_eq!(b.len(), 2);
        // (2,0) and (0,3) generate exactly {(2a, 3b)}
        assert_eq!(b, vec![vec![2, 0], vec![0, 3]]);
    }

    #[test]
    fn kernel_of_single_form() {
        let k = kernel_basis(&[vec![1, -1]], 2);
        assert_eq!(k.len(), 1);
        let v = &k[0];
        assert_eq!(v[0], v[1]);
        assert_eq!(v[0].abs(), 1);
    }
}
