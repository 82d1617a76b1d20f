//! Truncated Hamiltonian algebra in the variables `(x, y, z, zbar)`:
//! sparse monomial representation, Poisson brackets with truncation-loss
//! accounting, majorant and lambda-weighted norms, and the degree and
//! ultraviolet projections.
//!
//! Coefficients are generic: `C64` for the numeric mode, [`CHalfPoly`] for the
//! `xi`-parametric mode (exact rational polynomials in `sqrt(xi)`).

use crate::lattice::{LatticeVector, TangentialSites};
use crate::numeric::C64;
use crate::poly::HalfPoly;
use num_rational::BigRational;
use num_traits::Zero;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HamError {
    #[error("cutoff mismatch: {0:?} vs {1:?}")]
    CutoffMismatch(Cutoffs, Cutoffs),
    #[error("site {0:?} not in the site set")]
    UnknownSite(LatticeVector),
}

/// The normal sites `S^c` intersected with the box, in a fixed sorted order.
#[derive(Debug, Clone)]
pub struct SiteSet {
    pub sites: Vec<LatticeVector>,
    index: HashMap<LatticeVector, usize>,
}

impl SiteSet {
    pub fn new(mut sites: Vec<LatticeVector>) -> Self {
        sites.sort();
        sites.dedup();
        let index = sites.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
        SiteSet { sites, index }
    }

    /// All box points excluding the tangential sites.
    pub fn normal_sites(tangential: &TangentialSites, box_radius: i64) -> Self {
        let d = tangential.d();
        let mut pts = Vec::new();
        let mut cur = vec![0i64; d];
        fn rec(
            d: usize,
            r: i64,
            idx: usize,
            cur: &mut Vec<i64>,
            t: &TangentialSites,
            out: &mut Vec<LatticeVector>,
        ) {
            if idx == d {
                let v = LatticeVector(cur.clone());
                if !t.contains(&v) {
                    out.push(v);
                }
                return;
            }
            for x in -r..=r {
                cur[idx] = x;
                rec(d, r, idx + 1, cur, t, out);
            }
            cur[idx] = 0;
        }
        rec(d, box_radius, 0, &mut cur, tangential, &mut pts);
        SiteSet::new(pts)
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn id_of(&self, k: &LatticeVector) -> Option<usize> {
        self.index.get(k).copied()
    }

    pub fn site(&self, id: usize) -> &LatticeVector {
        &self.sites[id]
    }
}

/// `e^{i nu.x} y^i z^alpha zbar^beta` with sparse `alpha`, `beta` over site ids.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Monomial {
    pub nu: Vec<i32>,
    pub y_pow: Vec<u8>,
    pub z: Vec<(u32, u8)>,
    pub zbar: Vec<(u32, u8)>,
}

impl Monomial {
    pub fn constant(n: usize) -> Self {
        Monomial { nu: vec![0; n], y_pow: vec![0; n], z: vec![], zbar: vec![] }
    }

    pub fn exp_x(nu: Vec<i32>) -> Self {
        let n = nu.len();
        Monomial { nu, y_pow: vec![0; n], z: vec![], zbar: vec![] }
    }

    pub fn y(n: usize, j: usize) -> Self {
        let mut m = Self::constant(n);
        m.y_pow[j] = 1;
        m
    }

    pub fn z_site(n: usize, id: usize) -> Self {
        let mut m = Self::constant(n);
        m.z = vec![(id as u32, 1)];
        m
    }

    pub fn zbar_site(n: usize, id: usize) -> Self {
        let mut m = Self::constant(n);
        m.zbar = vec![(id as u32, 1)];
        m
    }

    /// `z_k^sigma` for `sigma = +1 / -1`.
    pub fn z_pm(n: usize, id: usize, sign: i8) -> Self {
        if sign >= 0 {
            Self::z_site(n, id)
        } else {
            Self::zbar_site(n, id)
        }
    }

    pub fn nu_l1(&self) -> i64 {
        self.nu.iter().map(|&v| v.abs() as i64).sum()
    }

    pub fn y_total(&self) -> u32 {
        self.y_pow.iter().map(|&p| p as u32).sum()
    }

    pub fn w_total(&self) -> u32 {
        self.z.iter().chain(&self.zbar).map(|&(_, p)| p as u32).sum()
    }

    /// Degree convention: 0 for angles, 2 per `y`, 1 per `z` / `zbar`.
    pub fn degree(&self) -> u32 {
        2 * self.y_total() + self.w_total()
    }

    pub fn is_x_independent(&self) -> bool {
        self.nu.iter().all(|&v| v == 0)
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        Monomial {
            nu: self.nu.iter().zip(&other.nu).map(|(a, b)| a + b).collect(),
            y_pow: self.y_pow.iter().zip(&other.y_pow).map(|(a, b)| a + b).collect(),
            z: merge_sparse(&self.z, &other.z),
            zbar: merge_sparse(&self.zbar, &other.zbar),
        }
    }

    /// The monomial of the complex-conjugate term: `nu -> -nu`, `z <-> zbar`.
    pub fn conj(&self) -> Monomial {
        Monomial {
            nu: self.nu.iter().map(|&v| -v).collect(),
            y_pow: self.y_pow.clone(),
            z: self.zbar.clone(),
            zbar: self.z.clone(),
        }
    }

    fn z_power(&self, id: u32) -> u8 {
        self.z.iter().find(|&&(i, _)| i == id).map(|&(_, p)| p).unwrap_or(0)
    }

    fn zbar_power(&self, id: u32) -> u8 {
        self.zbar.iter().find(|&&(i, _)| i == id).map(|&(_, p)| p).unwrap_or(0)
    }

    fn without_z(&self, id: u32) -> Monomial {
        let mut m = self.clone();
        m.z = dec_sparse(&self.z, id);
        m
    }

    fn without_zbar(&self, id: u32) -> Monomial {
        let mut m = self.clone();
        m.zbar = dec_sparse(&self.zbar, id);
        m
    }

    fn without_y(&self, j: usize) -> Monomial {
        let mut m = self.clone();
        m.y_pow[j] -= 1;
        m
    }
}

impl fmt::Debug for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e^(i{:?}.x)", self.nu)?;
        for (j, &p) in self.y_pow.iter().enumerate() {
            if p > 0 {
                write!(f, " y{j}^{p}")?;
            }
        }
        for &(i, p) in &self.z {
            write!(f, " z[{i}]^{p}")?;
        }
        for &(i, p) in &self.zbar {
            write!(f, " zb[{i}]^{p}")?;
        }
        Ok(())
    }
}

fn merge_sparse(a: &[(u32, u8)], b: &[(u32, u8)]) -> Vec<(u32, u8)> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        if j == b.len() || (i < a.len() && a[i].0 < b[j].0) {
            out.push(a[i]);
            i += 1;
        } else if i == a.len() || b[j].0 < a[i].0 {
            out.push(b[j]);
            j += 1;
        } else {
            out.push((a[i].0, a[i].1 + b[j].1));
            i += 1;
            j += 1;
        }
    }
    out
}

fn dec_sparse(a: &[(u32, u8)], id: u32) -> Vec<(u32, u8)> {
    a.iter()
        .filter_map(|&(i, p)| {
            if i == id {
                if p > 1 {
                    Some((i, p - 1))
                } else {
                    None
                }
            } else {
                Some((i, p))
            }
        })
        .collect()
}

/// Coefficient abstraction shared by the numeric and parametric modes.
pub trait Coeff: Clone + PartialEq + fmt::Debug {
    fn zero() -> Self;
    fn is_zero(&self) -> bool;
    fn add(&self, o: &Self) -> Self;
    fn mul(&self, o: &Self) -> Self;
    fn neg(&self) -> Self;
    fn conj(&self) -> Self;
    fn scale_i64(&self, m: i64) -> Self;
    fn scale_f64(&self, t: f64) -> Self;
    /// Multiply by the imaginary unit.
    fn times_i(&self) -> Self;
    /// Magnitude proxy used for truncation-debt accounting.
    fn debt_weight(&self) -> f64;
}

impl Coeff for C64 {
    fn zero() -> Self {
        C64::new(0.0, 0.0)
    }
    fn is_zero(&self) -> bool {
        self.re == 0.0 && self.im == 0.0
    }
    fn add(&self, o: &Self) -> Self {
        self + o
    }
    fn mul(&self, o: &Self) -> Self {
        self * o
    }
    fn neg(&self) -> Self {
        -self
    }
    fn conj(&self) -> Self {
        C64::new(self.re, -self.im)
    }
    fn scale_i64(&self, m: i64) -> Self {
        self * m as f64
    }
    fn scale_f64(&self, t: f64) -> Self {
        self * t
    }
    fn times_i(&self) -> Self {
        C64::new(-self.im, self.re)
    }
    fn debt_weight(&self) -> f64 {
        self.norm()
    }
}

/// Complex coefficient with exact rational-polynomial real and imaginary parts.
#[derive(Clone, PartialEq)]
pub struct CHalfPoly {
    pub re: HalfPoly,
    pub im: HalfPoly,
}

impl CHalfPoly {
    pub fn from_real(p: HalfPoly) -> Self {
        let n = p.nvars();
        CHalfPoly { re: p, im: HalfPoly::zero(n) }
    }

    pub fn nvars(&self) -> usize {
        self.re.nvars()
    }

    pub fn d_xi(&self, i: usize) -> Self {
        CHalfPoly { re: self.re.d_xi(i), im: self.im.d_xi(i) }
    }

    pub fn evaluate(&self, xi: &[f64]) -> C64 {
        C64::new(
            self.re.evaluate(xi).unwrap_or(f64::NAN),
            self.im.evaluate(xi).unwrap_or(f64::NAN),
        )
    }
}

impl fmt::Debug for CHalfPoly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:?}) + i ({:?})", self.re, self.im)
    }
}

impl Coeff for CHalfPoly {
    fn zero() -> Self {
        CHalfPoly { re: HalfPoly::zero(0), im: HalfPoly::zero(0) }
    }
    fn is_zero(&self) -> bool {
        self.re.is_zero() && self.im.is_zero()
    }
    fn add(&self, o: &Self) -> Self {
        // zero() carries no variable count; adopt the other side's
        if self.re.nvars() == 0 && self.is_zero() {
            return o.clone();
        }
        if o.re.nvars() == 0 && o.is_zero() {
            return self.clone();
        }
        CHalfPoly { re: self.re.add(&o.re), im: self.im.add(&o.im) }
    }
    fn mul(&self, o: &Self) -> Self {
        CHalfPoly {
            re: self.re.mul(&o.re).sub(&self.im.mul(&o.im)),
            im: self.re.mul(&o.im).add(&self.im.mul(&o.re)),
        }
    }
    fn neg(&self) -> Self {
        CHalfPoly { re: self.re.neg(), im: self.im.neg() }
    }
    fn conj(&self) -> Self {
        CHalfPoly { re: self.re.clone(), im: self.im.neg() }
    }
    fn scale_i64(&self, m: i64) -> Self {
        CHalfPoly { re: self.re.scale_i64(m), im: self.im.scale_i64(m) }
    }
    fn scale_f64(&self, t: f64) -> Self {
        let r = BigRational::from_float(t).unwrap_or_else(BigRational::zero);
        CHalfPoly { re: self.re.scale(&r), im: self.im.scale(&r) }
    }
    fn times_i(&self) -> Self {
        CHalfPoly { re: self.im.neg(), im: self.re.clone() }
    }
    fn debt_weight(&self) -> f64 {
        let sum = |p: &HalfPoly| -> f64 {
            p.terms()
                .map(|(_, c)| {
                    use num_traits::ToPrimitive;
                    c.to_f64().map(f64::abs).unwrap_or(0.0)
                })
                .sum::<f64>()
        };
        sum(&self.re) + sum(&self.im)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cutoffs {
    /// L1 bound on the Fourier index `nu`.
    pub k_x: i64,
    /// Bound on the degree `2|i| + |alpha| + |beta|`.
    pub max_degree: u32,
}

/// A truncated Hamiltonian: finite map monomial -> coefficient with cutoffs
/// and an accumulated norm of dropped terms ("truncation debt").
#[derive(Clone)]
pub struct Ham<C: Coeff> {
    pub n: usize,
    pub sites: Arc<SiteSet>,
    pub cutoffs: Cutoffs,
    pub terms: BTreeMap<Monomial, C>,
    pub truncation_debt: f64,
}

pub type NumHam = Ham<C64>;
pub type ParamHam = Ham<CHalfPoly>;

impl<C: Coeff> Ham<C> {
    pub fn new(n: usize, sites: Arc<SiteSet>, cutoffs: Cutoffs) -> Self {
        Ham { n, sites, cutoffs, terms: BTreeMap::new(), truncation_debt: 0.0 }
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn coeff(&self, m: &Monomial) -> C {
        self.terms.get(m).cloned().unwrap_or_else(C::zero)
    }

    /// Adds `c * m`, truncating against the cutoffs.
    pub fn add_term(&mut self, m: Monomial, c: C) {
        if c.is_zero() {
            return;
        }
        if m.nu_l1() > self.cutoffs.k_x || m.degree() > self.cutoffs.max_degree {
            self.truncation_debt += c.debt_weight();
            return;
        }
        let entry = self.terms.entry(m);
        match entry {
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(c);
            }
            std::collections::btree_map::Entry::Occupied(mut o) => {
                let s = o.get().add(&c);
                if s.is_zero() {
                    o.remove();
                } else {
                    *o.get_mut() = s;
                }
            }
        }
    }

    pub fn add_assign(&mut self, other: &Ham<C>) {
        for (m, c) in &other.terms {
            self.add_term(m.clone(), c.clone());
        }
        self.truncation_debt += other.truncation_debt;
    }

    pub fn add(&self, other: &Ham<C>) -> Ham<C> {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    pub fn scale(&self, t: f64) -> Ham<C> {
        let mut out = self.clone();
        for c in out.terms.values_mut() {
            *c = c.scale_f64(t);
        }
        out
    }

    pub fn neg(&self) -> Ham<C> {
        let mut out = self.clone();
        for c in out.terms.values_mut() {
            *c = c.neg();
        }
        out
    }

    pub fn sub(&self, other: &Ham<C>) -> Ham<C> {
        self.add(&other.neg())
    }

    pub fn filter(&self, mut pred: impl FnMut(&Monomial) -> bool) -> Ham<C> {
        let mut out = Ham::new(self.n, self.sites.clone(), self.cutoffs);
        for (m, c) in &self.terms {
            if pred(m) {
                out.terms.insert(m.clone(), c.clone());
            }
        }
        out
    }

    pub fn degree_le(&self, j: u32) -> Ham<C> {
        self.filter(|m| m.degree() <= j)
    }

    pub fn degree_eq(&self, j: u32) -> Ham<C> {
        self.filter(|m| m.degree() == j)
    }

    pub fn degree_gt(&self, j: u32) -> Ham<C> {
        self.filter(|m| m.degree() > j)
    }

    pub fn freq_le(&self, k: i64) -> Ham<C> {
        self.filter(|m| m.nu_l1() <= k)
    }

    pub fn freq_gt(&self, k: i64) -> Ham<C> {
        self.filter(|m| m.nu_l1() > k)
    }

    /// Drops the constant term (monomials of degree 0 and `nu = 0`).
    pub fn drop_constant(&mut self) {
        let c = Monomial::constant(self.n);
        self.terms.remove(&c);
    }

    /// `coeff(nu,i,alpha,beta) = conj(coeff(-nu,i,beta,alpha))` within `tol`.
    pub fn is_real(&self, tol: f64) -> bool {
        for (m, c) in &self.terms {
            let cc = self.coeff(&m.conj()).conj();
            if c.add(&cc.neg()).debt_weight() > tol {
                return false;
            }
        }
        true
    }

    /// Poisson bracket with the conventions
    /// `{y_j, e^{i x_j}} = i e^{i x_j}` and `{z zbar, z} = i z`; the result is
    /// re-truncated against the shared cutoffs with loss accounting.
    pub fn poisson(&self, other: &Ham<C>) -> Result<Ham<C>, HamError> {
        if self.cutoffs != other.cutoffs {
            return Err(HamError::CutoffMismatch(self.cutoffs, other.cutoffs));
        }
        let mut out = Ham::new(self.n, self.sites.clone(), self.cutoffs);
        for (mf, cf) in &self.terms {
            for (mg, cg) in &other.terms {
                bracket_terms(mf, cf, mg, cg, &mut out);
            }
        }
        Ok(out)
    }
}

/// All (x,y) and (z,zbar) channel contributions of one monomial pair.
fn bracket_terms<C: Coeff>(mf: &Monomial, cf: &C, mg: &Monomial, cg: &C, out: &mut Ham<C>) {
    let base = cf.mul(cg).times_i();
    // sum_j dF/dy_j dG/dx_j - dF/dx_j dG/dy_j
    for j in 0..mf.y_pow.len() {
        let pf = mf.y_pow[j] as i64;
        let ng = mg.nu[j] as i64;
        if pf > 0 && ng != 0 {
            let m = mf.without_y(j).mul(mg);
            out.add_term(m, base.scale_i64(pf * ng));
        }
        let nf = mf.nu[j] as i64;
        let pg = mg.y_pow[j] as i64;
        if nf != 0 && pg > 0 {
            let m = mf.mul(&mg.without_y(j));
            out.add_term(m, base.scale_i64(-nf * pg));
        }
    }
    // i sum_k dF/dzbar_k dG/dz_k - dF/dz_k dG/dzbar_k
    for &(id, pf) in &mf.zbar {
        let pg = mg.z_power(id);
        if pg > 0 {
            let m = mf.without_zbar(id).mul(&mg.without_z(id));
            out.add_term(m, base.scale_i64(pf as i64 * pg as i64));
        }
    }
    for &(id, pf) in &mf.z {
        let pg = mg.zbar_power(id);
        if pg > 0 {
            let m = mf.without_z(id).mul(&mg.without_zbar(id));
            out.add_term(m, base.scale_i64(-(pf as i64) * pg as i64));
        }
    }
}

impl ParamHam {
    pub fn evaluate(&self, xi: &[f64]) -> NumHam {
        let mut out = Ham::new(self.n, self.sites.clone(), self.cutoffs);
        for (m, c) in &self.terms {
            out.add_term(m.clone(), c.evaluate(xi));
        }
        out.truncation_debt = self.truncation_debt;
        out
    }

    pub fn d_xi(&self, i: usize) -> ParamHam {
        let mut out = Ham::new(self.n, self.sites.clone(), self.cutoffs);
        for (m, c) in &self.terms {
            let dc = c.d_xi(i);
            if !dc.is_zero() {
                out.terms.insert(m.clone(), dc);
            }
        }
        out
    }
}

/// Mass / momentum / quadratic-energy weights per normal site; fixes the
/// conservation rules for the current coordinate stage (raw, post first phase
/// shift, or final).
#[derive(Debug, Clone)]
pub struct ConservationCtx {
    pub tangential: TangentialSites,
    pub sites: Arc<SiteSet>,
    /// weight of `|z_k|^2` in the mass (1, sigma(k) or s(k))
    pub mass_w: Vec<i64>,
    /// weight of `|z_k|^2` in the momentum (k, sigma(k) r(k) or s(k) r_t(k))
    pub mom_w: Vec<LatticeVector>,
    /// weight of `|z_k|^2` in the quadratic energy
    pub energy_w: Vec<i64>,
}

impl ConservationCtx {
    /// Raw coordinates: weights `1`, `k`, `|k|^2`.
    pub fn raw(tangential: &TangentialSites, sites: Arc<SiteSet>) -> Self {
        let mass_w = vec![1; sites.len()];
        let mom_w = sites.sites.clone();
        let energy_w = sites.sites.iter().map(|k| k.norm2()).collect();
        ConservationCtx {
            tangential: tangential.clone(),
            sites,
            mass_w,
            mom_w,
            energy_w,
        }
    }

    pub fn mass_defect(&self, m: &Monomial) -> i64 {
        let mut s: i64 = m.nu.iter().map(|&v| v as i64).sum();
        for &(id, p) in &m.z {
            s += p as i64 * self.mass_w[id as usize];
        }
        for &(id, p) in &m.zbar {
            s -= p as i64 * self.mass_w[id as usize];
        }
        s
    }

    pub fn momentum_defect(&self, m: &Monomial) -> LatticeVector {
        let d = self.tangential.d();
        let mut v = LatticeVector::zero(d);
        for (i, &ni) in m.nu.iter().enumerate() {
            if ni != 0 {
                v = v.add(&self.tangential.site(i).scale(ni as i64));
            }
        }
        for &(id, p) in &m.z {
            v = v.add(&self.mom_w[id as usize].scale(p as i64));
        }
        for &(id, p) in &m.zbar {
            v = v.sub(&self.mom_w[id as usize].scale(p as i64));
        }
        v
    }

    pub fn energy_defect(&self, m: &Monomial) -> i64 {
        let mut s: i64 = m
            .nu
            .iter()
            .enumerate()
            .map(|(i, &v)| v as i64 * self.tangential.site(i).norm2())
            .sum();
        for &(id, p) in &m.z {
            s += p as i64 * self.energy_w[id as usize];
        }
        for &(id, p) in &m.zbar {
            s -= p as i64 * self.energy_w[id as usize];
        }
        s
    }

    pub fn conserves(&self, m: &Monomial) -> bool {
        self.mass_defect(m) == 0 && self.momentum_defect(m).is_zero()
    }

    /// The mass Hamiltonian `sum_i y_i + sum_k mw_k |z_k|^2`.
    pub fn mass_ham(&self, cutoffs: Cutoffs) -> NumHam {
        let n = self.tangential.n();
        let mut h = Ham::new(n, self.sites.clone(), cutoffs);
        for j in 0..n {
            h.add_term(Monomial::y(n, j), C64::new(1.0, 0.0));
        }
        for id in 0..self.sites.len() {
            let mut m = Monomial::constant(n);
            m.z = vec![(id as u32, 1)];
            m.zbar = vec![(id as u32, 1)];
            h.add_term(m, C64::new(self.mass_w[id] as f64, 0.0));
        }
        h
    }

    /// One momentum component `sum_i (j_i)_c y_i + sum_k (mw_k)_c |z_k|^2`.
    pub fn momentum_ham(&self, cutoffs: Cutoffs, c: usize) -> NumHam {
        let n = self.tangential.n();
        let mut h = Ham::new(n, self.sites.clone(), cutoffs);
        for j in 0..n {
            h.add_term(Monomial::y(n, j), C64::new(self.tangential.site(j).0[c] as f64, 0.0));
        }
        for id in 0..self.sites.len() {
            let mut m = Monomial::constant(n);
            m.z = vec![(id as u32, 1)];
            m.zbar = vec![(id as u32, 1)];
            h.add_term(m, C64::new(self.mom_w[id].0[c] as f64, 0.0));
        }
        h
    }

    /// The quadratic energy `j^(2).y + sum_k ew_k |z_k|^2`.
    pub fn energy_ham(&self, cutoffs: Cutoffs) -> NumHam {
        let n = self.tangential.n();
        let mut h = Ham::new(n, self.sites.clone(), cutoffs);
        for j in 0..n {
            h.add_term(Monomial::y(n, j), C64::new(self.tangential.site(j).norm2() as f64, 0.0));
        }
        for id in 0..self.sites.len() {
            let mut m = Monomial::constant(n);
            m.z = vec![(id as u32, 1)];
            m.zbar = vec![(id as u32, 1)];
            h.add_term(m, C64::new(self.energy_w[id] as f64, 0.0));
        }
        h
    }
}

/// Weights of the `(s, r)`-norm together with the `l^{a,p}` site weights.
#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    pub s: f64,
    pub r: f64,
    pub a: f64,
    pub p: f64,
}

impl NormParams {
    pub fn site_weight(&self, k: &LatticeVector) -> f64 {
        let norm = (k.norm2() as f64).sqrt();
        if norm == 0.0 {
            1.0
        } else {
            (self.a * norm).exp() * norm.powf(self.p)
        }
    }
}

/// Majorant norm of the Hamiltonian vector field: the `(s,r)`-weighted `V`-norm
/// of the term-wise absolute-value field, bounded by the weighted-coefficient
/// sum over the polydisc `|y_i| <= r^2`, `|z_k| <= r / w_k`.
pub fn majorant_norm(h: &NumHam, np: &NormParams) -> f64 {
    let n = h.n;
    let mut bx = vec![0.0f64; n];
    let mut by = vec![0.0f64; n];
    let nsites = h.sites.len();
    let mut bz = vec![0.0f64; nsites];
    let mut bzb = vec![0.0f64; nsites];
    let w: Vec<f64> = h.sites.sites.iter().map(|k| np.site_weight(k)).collect();
    for (m, c) in &h.terms {
        let mut base = c.norm() * (np.s * m.nu_l1() as f64).exp();
        base *= (np.r * np.r).powi(m.y_total() as i32);
        for &(id, p) in m.z.iter().chain(&m.zbar) {
            base *= (np.r / w[id as usize]).powi(p as i32);
        }
        for j in 0..n {
            if m.y_pow[j] > 0 {
                bx[j] += base * m.y_pow[j] as f64 / (np.r * np.r);
            }
            if m.nu[j] != 0 {
                by[j] += base * m.nu[j].unsigned_abs() as f64;
            }
        }
        for &(id, p) in &m.zbar {
            bz[id as usize] += base * p as f64 * w[id as usize] / np.r;
        }
        for &(id, p) in &m.z {
            bzb[id as usize] += base * p as f64 * w[id as usize] / np.r;
        }
    }
    let x_part = bx.iter().cloned().fold(0.0, f64::max) / np.s;
    let y_part = by.iter().sum::<f64>() / (np.r * np.r);
    let z_part = bz
        .iter()
        .zip(&w)
        .map(|(b, wk)| (b * wk) * (b * wk))
        .sum::<f64>()
        .sqrt()
        / np.r;
    let zb_part = bzb
        .iter()
        .zip(&w)
        .map(|(b, wk)| (b * wk) * (b * wk))
        .sum::<f64>()
        .sqrt()
        / np.r;
    x_part + y_part + z_part + zb_part
}

/// Only the `y`-component (from `d/dx`) of the majorant field norm.
pub fn majorant_norm_y_part(h: &NumHam, np: &NormParams) -> f64 {
    let n = h.n;
    let mut by = vec![0.0f64; n];
    let w: Vec<f64> = h.sites.sites.iter().map(|k| np.site_weight(k)).collect();
    for (m, c) in &h.terms {
        let mut base = c.norm() * (np.s * m.nu_l1() as f64).exp();
        base *= (np.r * np.r).powi(m.y_total() as i32);
        for &(id, p) in m.z.iter().chain(&m.zbar) {
            base *= (np.r / w[id as usize]).powi(p as i32);
        }
        for j in 0..n {
            if m.nu[j] != 0 {
                by[j] += base * m.nu[j].unsigned_abs() as f64;
            }
        }
    }
    by.iter().sum::<f64>() / (np.r * np.r)
}

/// Only the `w = (z, zbar)`-components of the majorant field norm.
pub fn majorant_norm_w_part(h: &NumHam, np: &NormParams) -> f64 {
    let nsites = h.sites.len();
    let mut bz = vec![0.0f64; nsites];
    let mut bzb = vec![0.0f64; nsites];
    let w: Vec<f64> = h.sites.sites.iter().map(|k| np.site_weight(k)).collect();
    for (m, c) in &h.terms {
        let mut base = c.norm() * (np.s * m.nu_l1() as f64).exp();
        base *= (np.r * np.r).powi(m.y_total() as i32);
        for &(id, p) in m.z.iter().chain(&m.zbar) {
            base *= (np.r / w[id as usize]).powi(p as i32);
        }
        for &(id, p) in &m.zbar {
            bz[id as usize] += base * p as f64 * w[id as usize] / np.r;
        }
        for &(id, p) in &m.z {
            bzb[id as usize] += base * p as f64 * w[id as usize] / np.r;
        }
    }
    let z_part = bz.iter().zip(&w).map(|(b, wk)| (b * wk) * (b * wk)).sum::<f64>().sqrt() / np.r;
    let zb_part =
        bzb.iter().zip(&w).map(|(b, wk)| (b * wk) * (b * wk)).sum::<f64>().sqrt() / np.r;
    z_part + zb_part
}

/// Exact lambda-weighted norm of a parametric Hamiltonian at `xi`:
/// `sum_{|k| <= ell} lambda^{|k|} || d_xi^k X ||_{s,r}` with exact polynomial
/// differentiation.
pub fn lambda_norm_param(
    h: &ParamHam,
    xi: &[f64],
    lambda: f64,
    ell: u32,
    np: &NormParams,
) -> f64 {
    let n_xi = xi.len();
    let mut total = 0.0;
    // enumerate multi-indices by nondecreasing axis to avoid duplicates
    fn rec(
        h: &ParamHam,
        order: u32,
        ell: u32,
        min_axis: usize,
        n_xi: usize,
        lambda: f64,
        xi: &[f64],
        np: &NormParams,
        total: &mut f64,
        mult: f64,
    ) {
        *total += mult * lambda.powi(order as i32) * majorant_norm(&h.evaluate(xi), np);
        if order == ell {
            return;
        }
        for axis in min_axis..n_xi {
            let dh = h.d_xi(axis);
            if dh.is_zero() {
                continue;
            }
            rec(&dh, order + 1, ell, axis, n_xi, lambda, xi, np, total, mult);
        }
    }
    // each multi-index k in N^n appears once as a nondecreasing axis multiset
    rec(h, 0, ell, 0, n_xi, lambda, xi, np, &mut total, 1.0);
    total
}

/// Centered-finite-difference lambda norm for a numeric-mode family
/// `xi -> Ham` (step `lambda / 100` per axis, first order per axis).
pub fn lambda_norm_fd(
    f: &dyn Fn(&[f64]) -> NumHam,
    xi: &[f64],
    lambda: f64,
    ell: u32,
    np: &NormParams,
) -> f64 {
    fn d_axis(
        f: &dyn Fn(&[f64]) -> NumHam,
        xi: &[f64],
        axes: &[usize],
        step: f64,
    ) -> NumHam {
        match axes.split_first() {
            None => f(xi),
            Some((&a, rest)) => {
                let mut xp = xi.to_vec();
                xp[a] += step;
                let mut xm = xi.to_vec();
                xm[a] -= step;
                let hp = d_axis(f, &xp, rest, step);
                let hm = d_axis(f, &xm, rest, step);
                hp.sub(&hm).scale(1.0 / (2.0 * step))
            }
        }
    }
    let step = lambda / 100.0;
    let n_xi = xi.len();
    let mut total = 0.0;
    let mut axes: Vec<usize> = Vec::new();
    fn rec(
        f: &dyn Fn(&[f64]) -> NumHam,
        xi: &[f64],
        axes: &mut Vec<usize>,
        min_axis: usize,
        n_xi: usize,
        ell: u32,
        lambda: f64,
        step: f64,
        np: &NormParams,
        total: &mut f64,
    ) {
        let h = d_axis(f, xi, axes, step);
        *total += lambda.powi(axes.len() as i32) * majorant_norm(&h, np);
        if axes.len() as u32 == ell {
            return;
        }
        for a in min_axis..n_xi {
            axes.push(a);
            rec(f, xi, axes, a, n_xi, ell, lambda, step, np, total);
            axes.pop();
        }
    }
    rec(f, xi, &mut axes, 0, n_xi, ell, lambda, step, np, &mut total);
    total
}

/// One JSON line per monomial: `{"nu":..., "y":..., "z":..., "zbar":..., "re":..., "im":...}`.
pub fn to_json_lines(h: &NumHam) -> String {
    let mut out = String::new();
    for (m, c) in &h.terms {
        let z: Vec<(u32, u8)> = m.z.clone();
        let zbar: Vec<(u32, u8)> = m.zbar.clone();
        out.push_str(
            &serde_json::json!({
                "nu": m.nu,
                "y": m.y_pow,
                "z": z,
                "zbar": zbar,
                "re": c.re,
                "im": c.im,
            })
            .to_string(),
        );
        out.push('\n');
    }
    out
}
