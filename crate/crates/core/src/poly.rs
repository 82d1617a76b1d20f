//! Exact polynomial layer: sparse polynomials in `sqrt(xi_1), ..., sqrt(xi_n)`
//! with arbitrary-precision rational coefficients. Houses the symmetric sums
//! `A_r`, the frequency modulation `omega^(1)` and the edge coefficients
//! `c_q(l)`; floating point enters only at the evaluation boundary.

use crate::lattice::{EdgeColor, EdgeLabel};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolyError {
    #[error("evaluation point must have all coordinates > 0, got {0}")]
    NonPositiveXi(f64),
    #[error("evaluation point has length {got}, expected {expected}")]
    DimMismatch { expected: usize, got: usize },
}

/// A sparse polynomial in `sqrt(xi_i)`. Exponents are stored doubled, so the
/// entry `e` in an exponent vector means `xi_i^(e/2)`. Negative doubled
/// exponents can arise from differentiation and from the action-angle
/// expansion; the constructors in this module only produce nonnegative ones.
#[derive(Clone, PartialEq, Eq, Default)]
pub struct HalfPoly {
    /// exponent vector (doubled) -> coefficient; no zero coefficients stored.
    terms: BTreeMap<Vec<i32>, BigRational>,
    nvars: usize,
}

impl HalfPoly {
    pub fn zero(nvars: usize) -> Self {
        HalfPoly {
            terms: BTreeMap::new(),
            nvars,
        }
    }

    pub fn constant(nvars: usize, c: BigRational) -> Self {
        let mut p = Self::zero(nvars);
        if !c.is_zero() {
            p.terms.insert(vec![0; nvars], c);
        }
        p
    }

    pub fn constant_i64(nvars: usize, c: i64) -> Self {
        Self::constant(nvars, BigRational::from_integer(BigInt::from(c)))
    }

    /// The monomial `c * prod xi_i^(doubled_exp_i / 2)`.
    pub fn monomial(exp_doubled: Vec<i32>, c: BigRational) -> Self {
        let mut p = Self::zero(exp_doubled.len());
        if !c.is_zero() {
            p.terms.insert(exp_doubled, c);
        }
        p
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Vec<i32>, &BigRational)> {
        self.terms.iter()
    }

    /// Coefficient of the monomial with the given doubled exponent vector.
    pub fn coeff(&self, exp_doubled: &[i32]) -> BigRational {
        self.terms
            .get(exp_doubled)
            .cloned()
            .unwrap_or_else(BigRational::zero)
    }

    pub fn add_assign(&mut self, other: &HalfPoly) {
        debug_assert_eq!(self.nvars, other.nvars);
        for (e, c) in &other.terms {
            let entry = self
                .terms
                .entry(e.clone())
                .or_insert_with(BigRational::zero);
            *entry += c;
            if entry.is_zero() {
                self.terms.remove(e);
            }
        }
    }

    pub fn add(&self, other: &HalfPoly) -> HalfPoly {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    pub fn neg(&self) -> HalfPoly {
        let mut out = self.clone();
        for c in out.terms.values_mut() {
            *c = -c.clone();
        }
        out
    }

    pub fn sub(&self, other: &HalfPoly) -> HalfPoly {
        self.add(&other.neg())
    }

    pub fn scale(&self, c: &BigRational) -> HalfPoly {
        if c.is_zero() {
            return HalfPoly::zero(self.nvars);
        }
        let mut out = self.clone();
        for v in out.terms.values_mut() {
            *v *= c;
        }
        out
    }

    pub fn scale_i64(&self, c: i64) -> HalfPoly {
        self.scale(&BigRational::from_integer(BigInt::from(c)))
    }

    pub fn mul(&self, other: &HalfPoly) -> HalfPoly {
        debug_assert_eq!(self.nvars, other.nvars);
        let mut out = HalfPoly::zero(self.nvars);
        for (ea, ca) in &self.terms {
            for (eb, cb) in &other.terms {
                let e: Vec<i32> = ea.iter().zip(eb).map(|(a, b)| a + b).collect();
                let c = ca * cb;
                let entry = out.terms.entry(e).or_insert_with(BigRational::zero);
                *entry += c;
            }
        }
        out.terms.retain(|_, c| !c.is_zero());
        out
    }

    /// Exact partial derivative with respect to `xi_i` (not `sqrt(xi_i)`):
    /// `xi^(e/2) -> (e/2) xi^(e/2 - 1)`.
    pub fn d_xi(&self, i: usize) -> HalfPoly {
        let mut out = HalfPoly::zero(self.nvars);
        for (e, c) in &self.terms {
            if e[i] == 0 {
                continue;
            }
            let mut e2 = e.clone();
            e2[i] -= 2;
            let factor = BigRational::new(BigInt::from(e[i]), BigInt::from(2));
            let nc = c * factor;
            let entry = out.terms.entry(e2).or_insert_with(BigRational::zero);
            *entry += nc;
        }
        out.terms.retain(|_, c| !c.is_zero());
        out
    }

    /// Total degree in `xi` of each term is `sum(e)/2`; returns the common
    /// degree if the polynomial is homogeneous, `None` otherwise (or if zero).
    pub fn homogeneous_degree(&self) -> Option<BigRational> {
        let mut deg: Option<i32> = None;
        for e in self.terms.keys() {
            let s: i32 = e.iter().sum();
            match deg {
                None => deg = Some(s),
                Some(d) if d != s => return None,
                _ => {}
            }
        }
        deg.map(|d| BigRational::new(BigInt::from(d), BigInt::from(2)))
    }

    /// Exact-rational accumulation grouped by the sqrt pattern of each term,
    /// with a single floating conversion per group.
    pub fn evaluate(&self, xi: &[f64]) -> Result<f64, PolyError> {
        if xi.len() != self.nvars {
            return Err(PolyError::DimMismatch {
                expected: self.nvars,
                got: xi.len(),
            });
        }
        for &x in xi {
            if !(x > 0.0) {
                return Err(PolyError::NonPositiveXi(x));
            }
        }
        let xi_exact: Vec<BigRational> = xi
            .iter()
            .map(|&x| BigRational::from_float(x).expect("finite xi"))
            .collect();
        // mask -> exact sum of (coeff * prod xi^floor(e/2)) over terms with that
        // odd-exponent pattern
        let mut groups: BTreeMap<Vec<bool>, BigRational> = BTreeMap::new();
        for (e, c) in &self.terms {
            let mut mask = vec![false; self.nvars];
            let mut val = c.clone();
            for (i, &ei) in e.iter().enumerate() {
                let q = ei.div_euclid(2);
                let r = ei.rem_euclid(2);
                mask[i] = r == 1;
                val *= pow_rational(&xi_exact[i], q);
            }
            let entry = groups.entry(mask).or_insert_with(BigRational::zero);
            *entry += val;
        }
        let mut out = 0.0;
        for (mask, sum) in groups {
            let mut sqrt_part = 1.0;
            for (i, &m) in mask.iter().enumerate() {
                if m {
                    sqrt_part *= xi[i].sqrt();
                }
            }
            out += rational_to_f64(&sum) * sqrt_part;
        }
        Ok(out)
    }

    /// Textual form "coeff * xi1^(a/2) xi2^(b/2) ..." for reports.
    pub fn render(&self) -> String {
        if self.is_zero() {
            return "0".to_string();
        }
        let mut parts = Vec::new();
        for (e, c) in &self.terms {
            let mut s = format!("{c}");
            for (i, &ei) in e.iter().enumerate() {
                if ei != 0 {
                    s.push_str(&format!(" * xi{}^({}/2)", i + 1, ei));
                }
            }
            parts.push(s);
        }
        parts.join(" + ")
    }
}

impl fmt::Debug for HalfPoly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.render())
    }
}

fn pow_rational(x: &BigRational, e: i32) -> BigRational {
    if e == 0 {
        return BigRational::one();
    }
    let p = x.pow(e.unsigned_abs() as i32);
    if e > 0 {
        p
    } else {
        p.recip()
    }
}

fn rational_to_f64(x: &BigRational) -> f64 {
    x.to_f64().unwrap_or_else(|| {
        // extremely large values: fall back to string parsing of a scaled form
        let n = x.numer().to_f64().unwrap_or(f64::INFINITY);
        let d = x.denom().to_f64().unwrap_or(f64::INFINITY);
        n / d
    })
}

/// Multinomial coefficient `m! / prod(parts_i!)` where `sum(parts) = m`.
pub fn multinomial(m: u32, parts: &[u32]) -> BigInt {
    debug_assert_eq!(parts.iter().sum::<u32>(), m);
    let mut num = BigInt::one();
    let mut k = 0u32;
    for &p in parts {
        for j in 1..=p {
            k += 1;
            num = num * BigInt::from(k) / BigInt::from(j);
        }
    }
    num
}

/// The symmetric sum `A_r(xi) = sum_{|k| = r} multinomial(r; k)^2 xi^k`,
/// homogeneous of degree `r`.
pub fn symmetric_a(r: u32, n: usize) -> HalfPoly {
    let mut out = HalfPoly::zero(n);
    let mut parts = vec![0u32; n];
    compositions(r, 0, &mut parts, &mut |p| {
        let m = multinomial(r, p);
        let c = BigRational::from_integer(&m * &m);
        let exp: Vec<i32> = p.iter().map(|&k| 2 * k as i32).collect();
        out.add_assign(&HalfPoly::monomial(exp, c));
    });
    out
}

fn compositions(rest: u32, idx: usize, parts: &mut Vec<u32>, emit: &mut impl FnMut(&[u32])) {
    if idx + 1 == parts.len() {
        parts[idx] = rest;
        emit(parts);
        parts[idx] = 0;
        return;
    }
    for v in 0..=rest {
        parts[idx] = v;
        compositions(rest - v, idx + 1, parts, emit);
    }
    parts[idx] = 0;
}

/// The frequency modulation `omega^(1) = grad A_{q+1} - (q+1)^2 A_q * 1`,
/// one homogeneous degree-q polynomial per component.
pub fn omega1(q: u32, n: usize) -> Vec<HalfPoly> {
    let a_q1 = symmetric_a(q + 1, n);
    let a_q = symmetric_a(q, n).scale_i64(((q + 1) * (q + 1)) as i64);
    (0..n).map(|i| a_q1.d_xi(i).sub(&a_q)).collect()
}

/// The edge coefficient `c_q(l)` of Eq-style
/// black: `(q+1)^2 xi^((l+ + l-)/2) sum_{|a + l+| = q} C(q; l+ + a) C(q; l- + a) xi^a`,
/// red:   `(q+1)q  xi^((l+ + l-)/2) sum_{|a + l+| = q-1} C(q+1; l- + a) C(q-1; l+ + a) xi^a`;
/// homogeneous of degree `q`.
pub fn edge_coeff(ell: &EdgeLabel, q: u32) -> HalfPoly {
    let n = ell.n();
    let (lp, lm) = ell.split();
    let lp_l1: i64 = lp.iter().sum();
    let prefix_exp: Vec<i32> = lp
        .iter()
        .zip(&lm)
        .map(|(a, b)| (a + b) as i32)
        .collect();
    let mut sum = HalfPoly::zero(n);
    match ell.color() {
        EdgeColor::Black => {
            let alpha_budget = q as i64 - lp_l1;
            if alpha_budget < 0 {
                return HalfPoly::zero(n);
            }
            let mut alpha = vec![0u32; n];
            compositions(alpha_budget as u32, 0, &mut alpha, &mut |a| {
                let v1: Vec<u32> = a.iter().zip(&lp).map(|(x, y)| x + *y as u32).collect();
                let v2: Vec<u32> = a.iter().zip(&lm).map(|(x, y)| x + *y as u32).collect();
                let c = multinomial(q, &v1) * multinomial(q, &v2);
                let exp: Vec<i32> = a.iter().map(|&x| 2 * x as i32).collect();
                sum.add_assign(&HalfPoly::monomial(exp, BigRational::from_integer(c)));
            });
            let pre = HalfPoly::monomial(prefix_exp, BigRational::from_integer(BigInt::one()));
            sum.mul(&pre).scale_i64(((q + 1) * (q + 1)) as i64)
        }
        EdgeColor::Red => {
            let alpha_budget = q as i64 - 1 - lp_l1;
            if alpha_budget < 0 {
                return HalfPoly::zero(n);
            }
            let mut alpha = vec![0u32; n];
            compositions(alpha_budget as u32, 0, &mut alpha, &mut |a| {
                let v1: Vec<u32> = a.iter().zip(&lm).map(|(x, y)| x + *y as u32).collect();
                let v2: Vec<u32> = a.iter().zip(&lp).map(|(x, y)| x + *y as u32).collect();
                let c = multinomial(q + 1, &v1) * multinomial(q - 1, &v2);
                let exp: Vec<i32> = a.iter().map(|&x| 2 * x as i32).collect();
                sum.add_assign(&HalfPoly::monomial(exp, BigRational::from_integer(c)));
            });
            let pre = HalfPoly::monomial(prefix_exp, BigRational::from_integer(BigInt::one()));
            sum.mul(&pre).scale_i64(((q + 1) * q) as i64)
        }
    }
}

/// Evaluates each component of a polynomial vector at `xi`.
pub fn evaluate_vec(polys: &[HalfPoly], xi: &[f64]) -> Result<Vec<f64>, PolyError> {
    polys.iter().map(|p| p.evaluate(xi)).collect()
}

/// Dot product `sum_i coeffs_i * polys_i` with integer weights.
pub fn dot_i64(polys: &[HalfPoly], coeffs: &[i64]) -> HalfPoly {
    let n = polys.first().map(|p| p.nvars()).unwrap_or(0);
    let mut out = HalfPoly::zero(n);
    for (p, &c) in polys.iter().zip(coeffs) {
        if c != 0 {
            out.add_assign(&p.scale_i64(c));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_traits::FromPrimitive;

    fn rat(n: i64) -> BigRational {
        BigRational::from_i64(n).unwrap()
    }

    #[test]
    fn a0_is_one_and_a1_is_sum() {
        let a0 = symmetric_a(0, 3);
        assert_eq!(a0.coeff(&[0, 0, 0]), rat(1));
        assert_eq!(a0.num_terms(), 1);
        let a1 = symmetric_a(1, 3);
        assert_eq!(a1.num_terms(), 3);
        for i in 0..3 {
            let mut e = vec![0; 3];
            e[i] = 2;
            assert_eq!(a1.coeff(&e), rat(1));
        }
    }

    #[test]
    fn a2_n2_matches_hand_expansion() {
        // A_2 = xi1^2 + 4 xi1 xi2 + xi2^2
        let a2 = symmetric_a(2, 2);
        assert_eq!(a2.coeff(&[4, 0]), rat(1));
        assert_eq!(a2.coeff(&[2, 2]), rat(4));
        assert_eq!(a2.coeff(&[0, 4]), rat(1));
        assert_eq!(a2.num_terms(), 3);
    }

    #[test]
    fn omega1_q1() {
        // q=1, n=2: (-2 xi1, -2 xi2)
        let w = omega1(1, 2);
        assert_eq!(w[0].coeff(&[2, 0]), rat(-2));
        assert_eq!(w[0].num_terms(), 1);
        assert_eq!(w[1].coeff(&[0, 2]), rat(-2));
        // n=1: -2 xi1
        let w1 = omega1(1, 1);
        assert_eq!(w1[0].coeff(&[2]), rat(-2));
        assert_eq!(w1[0].num_terms(), 1);
    }

    #[test]
    fn omega1_leading_coefficient() {
        // coefficient of xi_i^q in omega1_i equals -q(q+1), q = 1..4
        for q in 1..=4u32 {
            for n in 2..=4usize {
                let w = omega1(q, n);
                for (i, wi) in w.iter().enumerate() {
                    let mut e = vec![0; n];
                    e[i] = 2 * q as i32;
                    assert_eq!(wi.coeff(&e), rat(-((q * (q + 1)) as i64)), "q={q} i={i}");
                    // restriction to the i-th axis equals exactly that monomial
                    for (exp, _) in wi.terms() {
                        let on_axis = exp.iter().enumerate().all(|(j, &v)| j == i || v == 0);
                        if on_axis {
                            assert_eq!(exp[i], 2 * q as i32);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn omega1_homogeneous_of_degree_q() {
        for q in 1..=3u32 {
            let w = omega1(q, 3);
            for wi in &w {
                assert_eq!(
                    wi.homogeneous_degree().unwrap(),
                    BigRational::from_u32(q).unwrap()
                );
            }
        }
    }

    #[test]
    fn edge_coeff_cubic_examples() {
        // c_1(e1 - e2) = 4 sqrt(xi1 xi2)
        let black = EdgeLabel::new(vec![1, -1]).unwrap();
        let c = edge_coeff(&black, 1);
        assert_eq!(c.coeff(&[1, 1]), rat(4));
        assert_eq!(c.num_terms(), 1);
        // c_1(-e1 - e2) = 4 sqrt(xi1 xi2)
        let red = EdgeLabel::new(vec![-1, -1]).unwrap();
        let c = edge_coeff(&red, 1);
        assert_eq!(c.coeff(&[1, 1]), rat(4));
        assert_eq!(c.num_terms(), 1);
    }

    #[test]
    fn edge_coeff_black_symmetric_under_negation() {
        let e = crate::lattice::enumerate_edges(2, 3);
        for l in &e.black {
            let a = edge_coeff(l, 2);
            let b = edge_coeff(&l.negate().unwrap(), 2);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn edge_coeff_homogeneity() {
        for q in 1..=3u32 {
            let e = crate::lattice::enumerate_edges(q, 3);
            for l in e.all() {
                let c = edge_coeff(l, q);
                if !c.is_zero() {
                    assert_eq!(
                        c.homogeneous_degree().unwrap(),
                        BigRational::from_u32(q).unwrap(),
                        "l = {:?}",
                        l
                    );
                }
            }
        }
    }

    #[test]
    fn evaluate_examples() {
        let a1 = symmetric_a(1, 2);
        assert_eq!(a1.evaluate(&[1.0, 1.0]).unwrap(), 2.0);
        let a2 = symmetric_a(2, 2);
        assert_eq!(a2.evaluate(&[1.0, 1.0]).unwrap(), 6.0);
        let black = EdgeLabel::new(vec![1, -1]).unwrap();
        let c = edge_coeff(&black, 1);
        let v = c.evaluate(&[4.0, 9.0]).unwrap();
        assert!((v - 24.0).abs() < 1e-12);
        assert!(c.evaluate(&[1.0, -1.0]).is_err());
    }

    #[test]
    fn evaluate_homogeneity_scaling() {
        let black = EdgeLabel::new(vec![1, 1, -2]).unwrap();
        let c = edge_coeff(&black, 2);
        let xi = [0.7, 1.3, 0.4];
        let t = 4.0;
        let scaled: Vec<f64> = xi.iter().map(|x| t * x).collect();
        let v1 = c.evaluate(&scaled).unwrap();
        let v0 = c.evaluate(&xi).unwrap();
        assert!((v1 - t * t * v0).abs() <= 1e-12 * v0.abs().max(1.0));
    }

    #[test]
    fn derivative_nonnegative_coeffs_of_a_r() {
        for r in 1..=3 {
            let a = symmetric_a(r, 3);
            for i in 0..3 {
                for (_, c) in a.d_xi(i).terms() {
                    assert!(c > &BigRational::zero());
                }
            }
        }
    }

    #[test]
    fn a_r_symmetric_under_permutation() {
        let a = symmetric_a(3, 3);
        for (e, c) in a.terms() {
            let mut perm = e.clone();
            perm.rotate_left(1);
            assert_eq!(&a.coeff(&perm), c);
        }
    }

    #[test]
    fn edge_coeff_commutes_with_variable_relabeling() {
        // permuting l and xi simultaneously leaves c_q invariant
        let l = EdgeLabel::new(vec![2, -1, -1]).unwrap();
        let c = edge_coeff(&l, 2);
        let lp = EdgeLabel::new(vec![-1, 2, -1]).unwrap(); // swap vars 0,1
        let cp = edge_coeff(&lp, 2);
        for (e, coeff) in c.terms() {
            let mut ep = e.clone();
            ep.swap(0, 1);
            assert_eq!(&cp.coeff(&ep), coeff);
        }
    }

    #[test]
    fn multinomial_values() {
        assert_eq!(multinomial(2, &[1, 1]), BigInt::from(2));
        assert_eq!(multinomial(4, &[2, 1, 1]), BigInt::from(12));
        assert_eq!(multinomial(0, &[0, 0]), BigInt::from(1));
    }
}
