//! The truncated KAM machinery: the NLS Hamiltonian on a finite box, the
//! action-angle substitution on the tangential sites, kernel / range
//! projections relative to an assembled normal form, the homological equation
//! with its 3-term Neumann inversion, and the iterated quadratic step.

use crate::final_graph::NormalFormData;
use crate::ham::{
    majorant_norm, CHalfPoly, Coeff, Cutoffs, Ham, HamError, Monomial, NormParams, NumHam,
    ParamHam, SiteSet,
};
use crate::lattice::{LatticeVector, TangentialSites};
use crate::numeric::{self, C64, CMat};
use crate::poly::HalfPoly;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use rand::Rng;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KamError {
    #[error("singular homological block {0} (resonant xi)")]
    SingularBlock(String),
    #[error("bracket left the ad-invariant block (internal error): {0:?}")]
    BlockClosure(String),
    #[error("Lie series did not converge within the order cap")]
    LieSeriesCap,
    #[error(transparent)]
    Ham(#[from] HamError),
    #[error(transparent)]
    Final(#[from] crate::final_graph::FinalGraphError),
}

// ---------------------------------------------------------------------------
// The NLS Hamiltonian in the original `u` coordinates
// ---------------------------------------------------------------------------

/// `u^alpha ubar^beta` over box site ids (tangential sites included).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct UMonomial {
    pub alpha: Vec<(u32, u8)>,
    pub beta: Vec<(u32, u8)>,
}

/// A Hamiltonian in the `u` coordinates with numeric coefficients.
pub struct UHam {
    pub box_sites: Arc<SiteSet>,
    pub terms: BTreeMap<UMonomial, C64>,
}

impl UHam {
    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }
}

fn multiset_momentum(sites: &SiteSet, part: &[(u32, u8)]) -> LatticeVector {
    let d = sites.site(0).dim();
    let mut v = LatticeVector::zero(d);
    for &(id, p) in part {
        v = v.add(&sites.site(id as usize).scale(p as i64));
    }
    v
}

fn multiset_energy(sites: &SiteSet, part: &[(u32, u8)]) -> i64 {
    part.iter().map(|&(id, p)| p as i64 * sites.site(id as usize).norm2()).sum()
}

fn multinomial_count(total: u32, part: &[(u32, u8)]) -> BigInt {
    let parts: Vec<u32> = part.iter().map(|&(_, p)| p as u32).collect();
    crate::poly::multinomial(total, &parts)
}

/// Builds the truncated NLS Hamiltonian on the box: the quadratic part
/// `sum |k|^2 |u_k|^2` plus the momentum-conserving degree `2q+2` interaction
/// with multinomial weights. Also returns the resonant projection `H_Birk`
/// (additionally `sum (alpha-beta)|k|^2 = 0` and at most two normal factors)
/// and the generator `F_Birk = sum c/(i D)` over the removed non-resonant
/// monomials with at most two normal factors.
pub fn build_nls(
    q: u32,
    sites: &TangentialSites,
    box_radius: i64,
) -> (UHam, UHam, UHam) {
    let d = sites.d();
    let mut pts = Vec::new();
    let mut cur = vec![0i64; d];
    fn rec(d: usize, r: i64, idx: usize, cur: &mut Vec<i64>, out: &mut Vec<LatticeVector>) {
        if idx == d {
            out.push(LatticeVector(cur.clone()));
            return;
        }
        for x in -r..=r {
            cur[idx] = x;
            rec(d, r, idx + 1, cur, out);
        }
        cur[idx] = 0;
    }
    rec(d, box_radius, 0, &mut cur, &mut pts);
    let box_sites = Arc::new(SiteSet::new(pts));

    let mut h = BTreeMap::new();
    for id in 0..box_sites.len() {
        let k2 = box_sites.site(id).norm2();
        if k2 != 0 {
            let m = UMonomial { alpha: vec![(id as u32, 1)], beta: vec![(id as u32, 1)] };
            h.insert(m, C64::new(k2 as f64, 0.0));
        }
    }

    // multisets of size q+1 grouped by momentum
    let mut by_momentum: HashMap<LatticeVector, Vec<Vec<(u32, u8)>>> = HashMap::new();
    let mut multisets: Vec<Vec<(u32, u8)>> = Vec::new();
    fn msets(
        sites: usize,
        start: usize,
        left: u32,
        cur: &mut Vec<(u32, u8)>,
        out: &mut Vec<Vec<(u32, u8)>>,
    ) {
        if left == 0 {
            out.push(cur.clone());
            return;
        }
        if start == sites {
            return;
        }
        for p in (0..=left).rev() {
            if p > 0 {
                cur.push((start as u32, p as u8));
            }
            msets(sites, start + 1, left - p, cur, out);
            if p > 0 {
                cur.pop();
            }
        }
    }
    msets(box_sites.len(), 0, q + 1, &mut Vec::new(), &mut multisets);
    for ms in &multisets {
        by_momentum
            .entry(multiset_momentum(&box_sites, ms))
            .or_default()
            .push(ms.clone());
    }

    let mut h_birk = h.clone();
    let mut f_birk: BTreeMap<UMonomial, C64> = BTreeMap::new();
    let is_normal = |id: u32| -> bool { !sites.contains(box_sites.site(id as usize)) };
    for (mom, alphas) in &by_momentum {
        let Some(betas) = by_momentum.get(mom) else { continue };
        for alpha in alphas {
            for beta in betas {
                let weight = multinomial_count(q + 1, alpha) * multinomial_count(q + 1, beta);
                use num_traits::ToPrimitive;
                let c = weight.to_f64().unwrap_or(0.0);
                let m = UMonomial { alpha: alpha.clone(), beta: beta.clone() };
                *h.entry(m.clone()).or_insert(C64::new(0.0, 0.0)) += C64::new(c, 0.0);
                let normal_degree: u32 = alpha
                    .iter()
                    .chain(beta)
                    .filter(|&&(id, _)| is_normal(id))
                    .map(|&(_, p)| p as u32)
                    .sum();
                if normal_degree <= 2 {
                    let divisor =
                        multiset_energy(&box_sites, alpha) - multiset_energy(&box_sites, beta);
                    if divisor == 0 {
                        *h_birk.entry(m).or_insert(C64::new(0.0, 0.0)) += C64::new(c, 0.0);
                    } else {
                        // c / (i D) = -i c / D
                        *f_birk.entry(m).or_insert(C64::new(0.0, 0.0)) +=
                            C64::new(0.0, -c / divisor as f64);
                    }
                }
            }
        }
    }

    (
        UHam { box_sites: box_sites.clone(), terms: h },
        UHam { box_sites: box_sites.clone(), terms: h_birk },
        UHam { box_sites, terms: f_birk },
    )
}

/// `binom(p/2, m)` with `p` the doubled exponent, exact.
fn binom_half(p_doubled: i32, m: u32) -> BigRational {
    let mut num = BigRational::one();
    let half_p = BigRational::new(BigInt::from(p_doubled), BigInt::from(2));
    for t in 0..m {
        num *= half_p.clone() - BigRational::from_integer(BigInt::from(t));
        num /= BigRational::from_integer(BigInt::from(t + 1));
    }
    num
}

/// Switches to polar coordinates on the tangential sites:
/// `u_{j_i} = sqrt(xi_i + y_i) e^{i x_i}` with the square-root series truncated
/// at `y^y_order`, `u_k = z_k` on the normal sites. The output is exact in
/// `sqrt(xi)` (parametric coefficients); constants are dropped.
pub fn to_action_angle(
    h: &UHam,
    sites: &TangentialSites,
    normal_sites: Arc<SiteSet>,
    y_order: u32,
    cutoffs: Cutoffs,
) -> ParamHam {
    let n = sites.n();
    let mut out = ParamHam::new(n, normal_sites.clone(), cutoffs);
    let tangential_id: HashMap<usize, usize> = (0..n)
        .map(|i| (h.box_sites.id_of(sites.site(i)).expect("site in box"), i))
        .collect();
    for (um, c) in &h.terms {
        // split tangential / normal
        let mut a_t = vec![0u8; n];
        let mut b_t = vec![0u8; n];
        let mut z = Vec::new();
        let mut zbar = Vec::new();
        let mut ok = true;
        for &(id, p) in &um.alpha {
            match tangential_id.get(&(id as usize)) {
                Some(&i) => a_t[i] += p,
                None => match normal_sites.id_of(h.box_sites.site(id as usize)) {
                    Some(nid) => z.push((nid as u32, p)),
                    None => ok = false,
                },
            }
        }
        for &(id, p) in &um.beta {
            match tangential_id.get(&(id as usize)) {
                Some(&i) => b_t[i] += p,
                None => match normal_sites.id_of(h.box_sites.site(id as usize)) {
                    Some(nid) => zbar.push((nid as u32, p)),
                    None => ok = false,
                },
            }
        }
        if !ok {
            continue; // normal site outside the registered set
        }
        z.sort_unstable();
        zbar.sort_unstable();
        let nu: Vec<i32> = (0..n).map(|i| a_t[i] as i32 - b_t[i] as i32).collect();
        // expand prod_i (xi_i + y_i)^{(a_i + b_i)/2}
        let mut terms: Vec<(Vec<u8>, CHalfPoly)> = vec![(
            vec![0u8; n],
            CHalfPoly::from_real(HalfPoly::constant(n, BigRational::one())),
        )];
        for i in 0..n {
            let p_doubled = (a_t[i] + b_t[i]) as i32;
            if p_doubled == 0 {
                continue;
            }
            let mut next = Vec::new();
            for m in 0..=y_order {
                let coef = binom_half(p_doubled, m);
                if coef.is_zero() {
                    continue;
                }
                // xi_i^{(p - 2m)/2}
                let mut exp = vec![0i32; n];
                exp[i] = p_doubled - 2 * m as i32;
                let factor = HalfPoly::monomial(exp, coef);
                for (ypow, poly) in &terms {
                    let mut y2 = ypow.clone();
                    y2[i] += m as u8;
                    let mul = CHalfPoly {
                        re: poly.re.mul(&factor),
                        im: poly.im.mul(&factor),
                    };
                    next.push((y2, mul));
                }
            }
            terms = next;
        }
        for (ypow, poly) in terms {
            let mono = Monomial { nu: nu.clone(), y_pow: ypow, z: z.clone(), zbar: zbar.clone() };
            if mono.degree() == 0 && mono.is_x_independent() {
                continue; // drop constants
            }
            let cc = CHalfPoly {
                re: poly.re.scale(&BigRational::from_float(c.re).unwrap_or_else(BigRational::zero))
                    .sub(&poly.im.scale(&BigRational::from_float(c.im).unwrap_or_else(BigRational::zero))),
                im: poly.re.scale(&BigRational::from_float(c.im).unwrap_or_else(BigRational::zero))
                    .add(&poly.im.scale(&BigRational::from_float(c.re).unwrap_or_else(BigRational::zero))),
            };
            out.add_term(mono, cc);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Kernel / range projections
// ---------------------------------------------------------------------------

/// Is a quadratic `w`-monomial Lagrangian and block-diagonal for the partition?
/// Requires both sites in one `D_t` and the pairing `z_h z_k` only for
/// `s(h) != s(k)`, `z_h zbar_k` only for `s(h) = s(k)`.
fn kernel_quadratic(m: &Monomial, nf: &NormalFormData) -> bool {
    let mut factors: Vec<(usize, i8)> = Vec::new(); // (site, +1 for z / -1 for zbar)
    for &(id, p) in &m.z {
        for _ in 0..p {
            factors.push((id as usize, 1));
        }
    }
    for &(id, p) in &m.zbar {
        for _ in 0..p {
            factors.push((id as usize, -1));
        }
    }
    if factors.len() != 2 {
        return false;
    }
    let (h, th) = factors[0];
    let (k, tk) = factors[1];
    if nf.site_info[h].comp != nf.site_info[k].comp {
        return false;
    }
    let (sh, sk) = (nf.site_info[h].s, nf.site_info[k].s);
    if th == tk {
        // z z or zbar zbar
        sh != sk
    } else {
        sh == sk
    }
}

/// Kernel projection: constants, x-independent `y`-linear terms and
/// x-independent Lagrangian quadratics supported on a single `D_t`.
pub fn project_kernel<C: Coeff>(h: &Ham<C>, nf: &NormalFormData) -> Ham<C> {
    h.filter(|m| {
        if !m.is_x_independent() || m.degree() > 2 {
            return false;
        }
        match (m.degree(), m.y_total(), m.w_total()) {
            (0, _, _) => true,
            (2, 1, 0) => true,
            (2, 0, 2) => kernel_quadratic(m, nf),
            _ => false,
        }
    })
}

/// Range projection: the complement of the kernel within degree <= 2.
pub fn project_range<C: Coeff>(h: &Ham<C>, nf: &NormalFormData) -> Ham<C> {
    let ker = project_kernel(h, nf);
    h.degree_le(2).sub(&ker)
}

// ---------------------------------------------------------------------------
// Homological equation
// ---------------------------------------------------------------------------

/// Identifies the ad(N)-invariant block of a degree <= 2 monomial.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum BlockKey {
    Scalar { nu: Vec<i32> },
    YPart { nu: Vec<i32>, axis: usize },
    Linear { nu: Vec<i32>, comp: usize, class: i8 },
    Quadratic { nu: Vec<i32>, a: (usize, i8), b: (usize, i8) },
}

fn block_key(m: &Monomial, nf: &NormalFormData) -> BlockKey {
    let mut factors: Vec<(usize, i8)> = Vec::new();
    for &(id, p) in &m.z {
        for _ in 0..p {
            factors.push((id as usize, 1));
        }
    }
    for &(id, p) in &m.zbar {
        for _ in 0..p {
            factors.push((id as usize, -1));
        }
    }
    match (m.y_total(), factors.len()) {
        (0, 0) => BlockKey::Scalar { nu: m.nu.clone() },
        (1, 0) => {
            let axis = m.y_pow.iter().position(|&p| p > 0).unwrap();
            BlockKey::YPart { nu: m.nu.clone(), axis }
        }
        (0, 1) => {
            let (site, tau) = factors[0];
            let si = &nf.site_info[site];
            BlockKey::Linear { nu: m.nu.clone(), comp: si.comp, class: tau * si.s }
        }
        (0, 2) => {
            let cls = |(site, tau): (usize, i8)| {
                let si = &nf.site_info[site];
                (si.comp, tau * si.s)
            };
            let (mut a, mut b) = (cls(factors[0]), cls(factors[1]));
            if b < a {
                std::mem::swap(&mut a, &mut b);
            }
            BlockKey::Quadratic { nu: m.nu.clone(), a, b }
        }
        other => unreachable!("degree <= 2 monomials only: {other:?}"),
    }
}

/// All monomials of the block (the ad(N)-invariant span containing `key`).
fn block_basis(key: &BlockKey, nf: &NormalFormData) -> Vec<Monomial> {
    let n = nf.n();
    match key {
        BlockKey::Scalar { nu } => vec![Monomial::exp_x(nu.clone())],
        BlockKey::YPart { nu, axis } => {
            let mut m = Monomial::exp_x(nu.clone());
            m.y_pow[*axis] = 1;
            vec![m]
        }
        BlockKey::Linear { nu, comp, class } => nf.components[*comp]
            .members
            .iter()
            .map(|&sid| {
                let tau = class * nf.site_info[sid].s;
                let mut m = Monomial::exp_x(nu.clone());
                let part = vec![(sid as u32, 1u8)];
                if tau >= 0 {
                    m.z = part;
                } else {
                    m.zbar = part;
                }
                m
            })
            .collect(),
        BlockKey::Quadratic { nu, a, b } => {
            let mut out = Vec::new();
            for &sa in &nf.components[a.0].members {
                for &sb in &nf.components[b.0].members {
                    let ta = a.1 * nf.site_info[sa].s;
                    let tb = b.1 * nf.site_info[sb].s;
                    let ma = Monomial::z_pm(n, sa, ta);
                    let mb = Monomial::z_pm(n, sb, tb);
                    let mut m = ma.mul(&mb);
                    m.nu = nu.clone();
                    if !out.contains(&m) {
                        out.push(m);
                    }
                }
            }
            out
        }
    }
}

/// Solves `{N, F} + Pi_rg<=K {P>2, F} = Pi_<=K P_rg` on the range space with
/// the 3-term Neumann series; `ad(N)` is inverted block by block with matrices
/// obtained by direct bracketing.
pub struct HomologicalSolution {
    pub f: NumHam,
    pub residual: f64,
    pub rhs_norm: f64,
}

pub fn solve_homological(
    n_ham: &NumHam,
    p_rg: &NumHam,
    p_gt2: &NumHam,
    nf: &NormalFormData,
    k_uv: i64,
    np: &NormParams,
) -> Result<HomologicalSolution, KamError> {
    let rhs = p_rg.freq_le(k_uv);
    let d_inv = |b: &NumHam| -> Result<NumHam, KamError> { invert_ad_n(n_ham, b, nf) };
    let apply_a = |g: &NumHam| -> Result<NumHam, KamError> {
        let br = p_gt2.poisson(g)?;
        let proj = project_range(&br.degree_le(2), nf).freq_le(k_uv);
        d_inv(&proj)
    };
    let d1 = d_inv(&rhs)?;
    let a1 = apply_a(&d1)?;
    let a2 = apply_a(&a1)?;
    // A^3 = 0: one more application must vanish identically
    let a3 = apply_a(&a2)?;
    debug_assert!(a3.is_zero(), "A^3 = 0 by the degree grading");
    let f = d1.sub(&a1).add(&a2);
    // residual
    let lhs = n_ham
        .poisson(&f)?
        .add(&project_range(&p_gt2.poisson(&f)?.degree_le(2), nf).freq_le(k_uv));
    let resid = lhs.sub(&rhs);
    let residual = majorant_norm(&resid, np);
    let rhs_norm = majorant_norm(&rhs, np);
    Ok(HomologicalSolution { f, residual, rhs_norm })
}

/// Inverts `ad(N)` on a range-space Hamiltonian block by block.
fn invert_ad_n(n_ham: &NumHam, b: &NumHam, nf: &NormalFormData) -> Result<NumHam, KamError> {
    let mut groups: BTreeMap<BlockKey, Vec<(Monomial, C64)>> = BTreeMap::new();
    for (m, c) in &b.terms {
        groups.entry(block_key(m, nf)).or_default().push((m.clone(), *c));
    }
    let mut out = NumHam::new(b.n, b.sites.clone(), b.cutoffs);
    for (key, entries) in groups {
        let basis = block_basis(&key, nf);
        let index: HashMap<&Monomial, usize> =
            basis.iter().enumerate().map(|(i, m)| (m, i)).collect();
        let dim = basis.len();
        // matrix of ad(N) on the block by direct bracketing
        let mut mat = CMat::zeros(dim, dim);
        for (j, mono) in basis.iter().enumerate() {
            let mut single = NumHam::new(b.n, b.sites.clone(), b.cutoffs);
            single.add_term(mono.clone(), C64::new(1.0, 0.0));
            let img = n_ham.poisson(&single)?;
            for (m, c) in &img.terms {
                match index.get(m) {
                    Some(&i) => mat[(i, j)] += c,
                    None => {
                        if c.norm() > 1e-9 {
                            return Err(KamError::BlockClosure(format!("{key:?}")));
                        }
                    }
                }
            }
        }
        let mut rhs = CMat::zeros(dim, 1);
        for (m, c) in &entries {
            rhs[(index[m], 0)] = *c;
        }
        let sol = numeric::solve(&mat, &rhs)
            .filter(|_| numeric::smin(&mat) > 1e-13)
            .ok_or_else(|| KamError::SingularBlock(format!("{key:?}")))?;
        for (i, mono) in basis.iter().enumerate() {
            out.add_term(mono.clone(), sol[(i, 0)]);
        }
    }
    Ok(out)
}

/// Dense oracle for the homological equation: assembles the full matrix of
/// `L = ad(N) + Pi_rg<=K ad(P>2)` on the block closure of the right-hand side
/// and solves it directly.
pub fn solve_homological_dense(
    n_ham: &NumHam,
    p_rg: &NumHam,
    p_gt2: &NumHam,
    nf: &NormalFormData,
    k_uv: i64,
) -> Result<NumHam, KamError> {
    let rhs = p_rg.freq_le(k_uv);
    // closure of block keys under A (two rounds suffice: degree raises)
    let mut keys: BTreeMap<BlockKey, ()> = BTreeMap::new();
    let mut frontier: Vec<Monomial> = rhs.terms.keys().cloned().collect();
    for _ in 0..3 {
        let mut next = Vec::new();
        for m in &frontier {
            let key = block_key(m, nf);
            if keys.insert(key.clone(), ()).is_none() {
                for bm in block_basis(&key, nf) {
                    let mut single = NumHam::new(rhs.n, rhs.sites.clone(), rhs.cutoffs);
                    single.add_term(bm, C64::new(1.0, 0.0));
                    let img = project_range(&p_gt2.poisson(&single)?.degree_le(2), nf)
                        .freq_le(k_uv);
                    next.extend(img.terms.keys().cloned());
                }
            }
        }
        frontier = next;
        if frontier.is_empty() {
            break;
        }
    }
    let mut basis: Vec<Monomial> = Vec::new();
    for key in keys.keys() {
        basis.extend(block_basis(key, nf));
    }
    basis.sort();
    basis.dedup();
    let index: HashMap<&Monomial, usize> =
        basis.iter().enumerate().map(|(i, m)| (m, i)).collect();
    let dim = basis.len();
    let mut mat = CMat::zeros(dim, dim);
    for (j, mono) in basis.iter().enumerate() {
        let mut single = NumHam::new(rhs.n, rhs.sites.clone(), rhs.cutoffs);
        single.add_term(mono.clone(), C64::new(1.0, 0.0));
        let img = n_ham
            .poisson(&single)?
            .add(&project_range(&p_gt2.poisson(&single)?.degree_le(2), nf).freq_le(k_uv));
        for (m, c) in &img.terms {
            if let Some(&i) = index.get(m) {
                mat[(i, j)] += c;
            }
        }
    }
    let mut rvec = CMat::zeros(dim, 1);
    for (m, c) in &rhs.terms {
        rvec[(index[m], 0)] = *c;
    }
    let sol = numeric::solve(&mat, &rvec).ok_or_else(|| KamError::SingularBlock("dense".into()))?;
    let mut out = NumHam::new(rhs.n, rhs.sites.clone(), rhs.cutoffs);
    for (i, mono) in basis.iter().enumerate() {
        out.add_term(mono.clone(), sol[(i, 0)]);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// KAM step and iteration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct KamStepReport {
    pub k_uv: i64,
    pub norm_p_rg_before: f64,
    pub norm_p_rg_after: f64,
    pub norm_p_rg_after_le_k: f64,
    pub norm_f: f64,
    pub homological_residual: f64,
    pub lie_orders: usize,
    pub truncation_debt: f64,
    pub wall_seconds: f64,
}

/// One quadratic step: solves the homological equation, applies the Lie series
/// `e^{ad F}` (truncated when increments fall below `1e-14 ||H||`), and
/// re-identifies the components.
pub fn kam_step(
    h: &NumHam,
    nf: &NormalFormData,
    k_uv: i64,
    np: &NormParams,
) -> Result<(NumHam, KamStepReport), KamError> {
    let start = std::time::Instant::now();
    let mut n_ham = project_kernel(h, nf);
    n_ham.drop_constant();
    let p_rg = project_range(h, nf);
    let p_gt2 = h.degree_gt(2);
    let before = majorant_norm(&p_rg, np);
    if p_rg.is_zero() {
        let report = KamStepReport {
            k_uv,
            norm_p_rg_before: 0.0,
            norm_p_rg_after: 0.0,
            norm_p_rg_after_le_k: 0.0,
            norm_f: 0.0,
            homological_residual: 0.0,
            lie_orders: 0,
            truncation_debt: h.truncation_debt,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        return Ok((h.clone(), report));
    }
    let sol = solve_homological(&n_ham, &p_rg, &p_gt2, nf, k_uv, np)?;
    let f = sol.f;
    let norm_f = majorant_norm(&f, np);
    // Lie series e^{ad F} H
    let h_norm = majorant_norm(h, np).max(1e-300);
    let mut total = h.clone();
    let mut term = h.clone();
    let mut orders = 0usize;
    const CAP: usize = 30;
    loop {
        orders += 1;
        if orders > CAP {
            return Err(KamError::LieSeriesCap);
        }
        term = f.poisson(&term)?.scale(1.0 / orders as f64);
        let inc = majorant_norm(&term, np);
        total.add_assign(&term);
        if inc < 1e-14 * h_norm {
            break;
        }
    }
    let p_rg_after = project_range(&total, nf);
    let after = majorant_norm(&p_rg_after, np);
    let after_le_k = majorant_norm(&p_rg_after.freq_le(k_uv), np);
    let report = KamStepReport {
        k_uv,
        norm_p_rg_before: before,
        norm_p_rg_after: after,
        norm_p_rg_after_le_k: after_le_k,
        norm_f,
        homological_residual: sol.residual,
        lie_orders: orders,
        truncation_debt: total.truncation_debt,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((total, report))
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct DecayRow {
    pub step: usize,
    pub k_uv: i64,
    pub s: f64,
    pub r: f64,
    pub norm_p_rg: f64,
    pub truncation_debt: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct DecayTable {
    pub rows: Vec<DecayRow>,
    pub reports: Vec<KamStepReport>,
    /// geometric mean of `log ||P_m+1|| / log ||P_m||` (superexponential decay
    /// shape fit; the quadratic regime gives values near 2)
    pub fitted_exponent: f64,
}

/// Runs `steps` KAM steps with the geometric schedule `K_m = 4^m K_0`,
/// `s_{m+1} = (1 - 2^{-m-3}) s_m`, `r` likewise.
pub fn kam_iterate(
    h0: &NumHam,
    nf: &NormalFormData,
    steps: usize,
    k0: i64,
    np0: &NormParams,
) -> Result<(NumHam, DecayTable), KamError> {
    let mut h = h0.clone();
    let mut np = *np0;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut norms = Vec::new();
    {
        let p0 = majorant_norm(&project_range(&h, nf), &np);
        norms.push(p0);
        rows.push(DecayRow {
            step: 0,
            k_uv: k0,
            s: np.s,
            r: np.r,
            norm_p_rg: p0,
            truncation_debt: h.truncation_debt,
        });
    }
    for m in 0..steps {
        let k_m = 4i64.pow(m as u32) * k0;
        let (h_next, report) = kam_step(&h, nf, k_m, &np)?;
        h = h_next;
        let shrink = 1.0 - (2f64).powi(-(m as i32) - 3);
        np = NormParams { s: np.s * shrink, r: np.r * shrink, a: np.a, p: np.p };
        let p_norm = majorant_norm(&project_range(&h, nf), &np);
        norms.push(p_norm);
        rows.push(DecayRow {
            step: m + 1,
            k_uv: k_m,
            s: np.s,
            r: np.r,
            norm_p_rg: p_norm,
            truncation_debt: h.truncation_debt,
        });
        reports.push(report);
    }
    // fitted exponent: (log ||P_last|| / log ||P_0||)^(1/steps) when all norms
    // are < 1 (decay regime)
    let fitted = if norms.len() >= 2 && norms[0] < 1.0 && norms[norms.len() - 1] > 0.0 {
        (norms[norms.len() - 1].ln() / norms[0].ln())
            .powf(1.0 / (norms.len() - 1) as f64)
    } else {
        f64::NAN
    };
    Ok((h, DecayTable { rows, reports, fitted_exponent: fitted }))
}

pub fn decay_table_csv(t: &DecayTable) -> String {
    let mut out = String::from("step,k_uv,s,r,norm_p_rg,truncation_debt\n");
    for r in &t.rows {
        out.push_str(&format!(
            "{},{},{:.17e},{:.17e},{:.17e},{:.17e}\n",
            r.step, r.k_uv, r.s, r.r, r.norm_p_rg, r.truncation_debt
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Random conserving perturbations (toy instances)
// ---------------------------------------------------------------------------

/// Draws a real, conservation-respecting perturbation supported on
/// `|nu|_1 <= k0`: `count` range monomials of degree <= 2 of size `size_rg`
/// plus `count` higher-degree monomials of size `size_gt2`.
pub fn random_perturbation(
    nf: &NormalFormData,
    rng: &mut impl Rng,
    k0: i64,
    count: usize,
    size_rg: f64,
    size_gt2: f64,
    cutoffs: Cutoffs,
) -> NumHam {
    let n = nf.n();
    let ctx = nf.final_conservation();
    let mut h = NumHam::new(n, nf.site_set.clone(), cutoffs);
    // frequency lookup: (eta, pi) -> nus
    let mut nu_lookup: HashMap<(i64, LatticeVector), Vec<Vec<i32>>> = HashMap::new();
    {
        let mut cur = vec![0i64; n];
        fn rec(
            k: i64,
            idx: usize,
            cur: &mut Vec<i64>,
            out: &mut Vec<Vec<i64>>,
        ) {
            if idx == cur.len() {
                out.push(cur.clone());
                return;
            }
            for v in -k..=k {
                cur[idx] = v;
                rec(k - v.abs(), idx + 1, cur, out);
            }
            cur[idx] = 0;
        }
        let mut nus = Vec::new();
        rec(k0, 0, &mut cur, &mut nus);
        for nu in nus {
            let eta: i64 = nu.iter().sum();
            let mut pi = LatticeVector::zero(nf.sites.d());
            for (i, &v) in nu.iter().enumerate() {
                pi = pi.add(&nf.sites.site(i).scale(v));
            }
            nu_lookup
                .entry((eta, pi))
                .or_default()
                .push(nu.iter().map(|&v| v as i32).collect());
        }
    }
    let nsites = nf.site_set.len();
    let mut added = 0usize;
    let mut guard = 0usize;
    while added < count && guard < 100_000 {
        guard += 1;
        // random w-part of degree 2..4
        let deg = rng.gen_range(2..=4u32);
        let mut m = Monomial::constant(n);
        for _ in 0..deg {
            let id = rng.gen_range(0..nsites) as u32;
            if rng.gen_bool(0.5) {
                m.z = merge_one(&m.z, id);
            } else {
                m.zbar = merge_one(&m.zbar, id);
            }
        }
        if deg <= 2 && rng.gen_bool(0.3) {
            // occasionally a y-coupled term
            m.y_pow[rng.gen_range(0..n)] = 1;
        }
        // required frequency: eta(nu) = -mass_w, pi(nu) = -mom_w
        let mass: i64 = {
            let mut s = 0i64;
            for &(id, p) in &m.z {
                s += p as i64 * ctx.mass_w[id as usize];
            }
            for &(id, p) in &m.zbar {
                s -= p as i64 * ctx.mass_w[id as usize];
            }
            s
        };
        let mut mom = LatticeVector::zero(nf.sites.d());
        for &(id, p) in &m.z {
            mom = mom.add(&ctx.mom_w[id as usize].scale(p as i64));
        }
        for &(id, p) in &m.zbar {
            mom = mom.sub(&ctx.mom_w[id as usize].scale(p as i64));
        }
        let Some(nus) = nu_lookup.get(&(-mass, mom.neg())) else { continue };
        let nu = nus[rng.gen_range(0..nus.len())].clone();
        m.nu = nu;
        if m.degree() > cutoffs.max_degree || m.nu_l1() > cutoffs.k_x {
            continue;
        }
        let size = if m.degree() <= 2 { size_rg } else { size_gt2 };
        let c = C64::new(rng.gen_range(-size..size), rng.gen_range(-size..size));
        h.add_term(m.clone(), c);
        h.add_term(m.conj(), c.conj());
        added += 1;
    }
    h
}

fn merge_one(a: &[(u32, u8)], id: u32) -> Vec<(u32, u8)> {
    let mut out = a.to_vec();
    match out.iter_mut().find(|(i, _)| *i == id) {
        Some((_, p)) => *p += 1,
        None => {
            out.push((id, 1));
            out.sort_unstable();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::final_graph::{
        assemble_normal_form, build_final_graph, finalize_partition, normal_form_ham,
        prepare_blocks, y_edges,
    };
    use crate::graph::{build_graph, components};
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn cubic_sites() -> TangentialSites {
        TangentialSites::new(vec![LatticeVector(vec![0, 0]), LatticeVector(vec![1, 0])])
            .unwrap()
    }

    fn cubic_nf(radius: i64) -> NormalFormData {
        let s = cubic_sites();
        let samples = vec![
            vec![0.011, 0.013],
            vec![0.022, 0.026],
            vec![0.009, 0.016],
            vec![0.014, 0.008],
            vec![0.012, 0.019],
        ];
        let g = build_graph(&s, 1, radius).unwrap();
        let comps = components(&g);
        let input = prepare_blocks(&comps, &s, 1, &samples, 1e-8).unwrap();
        let (y, _) = y_edges(&input.catalog, 1, 2, 1e-8);
        let graph = build_final_graph(&input, &y, 1e-8).unwrap();
        let site_set = Arc::new(SiteSet::normal_sites(&s, radius));
        finalize_partition(input, graph, site_set).unwrap()
    }

    #[test]
    fn build_nls_census_d1() {
        // q = 1, d = 1, box {-2..2}: quartic census against brute force
        let s = TangentialSites::new(vec![LatticeVector(vec![0]), LatticeVector(vec![1])])
            .unwrap();
        let (h, h_birk, f_birk) = build_nls(1, &s, 2);
        let pts: Vec<i64> = vec![-2, -1, 0, 1, 2];
        let mut brute: BTreeMap<UMonomial, f64> = BTreeMap::new();
        for &k1 in &pts {
            for &k2 in &pts {
                for &k3 in &pts {
                    let k4 = k1 - k2 + k3; // -k1 + k2 - k3 + k4 = 0
                    if !pts.contains(&k4) {
                        continue;
                    }
                    let id = |k: i64| h.box_sites.id_of(&LatticeVector(vec![k])).unwrap() as u32;
                    let a = super::merge_one(&[(id(k1), 1u8)], id(k3));
                    let b = super::merge_one(&[(id(k2), 1u8)], id(k4));
                    let m = UMonomial { alpha: a, beta: b };
                    *brute.entry(m).or_insert(0.0) += 1.0;
                }
            }
        }
        // compare the quartic part of h against brute counts
        let mut quartic = 0usize;
        for (m, c) in &h.terms {
            let total: u32 = m.alpha.iter().chain(&m.beta).map(|&(_, p)| p as u32).sum();
            if total == 4 {
                quartic += 1;
                // the duplicated diagonal |u|^2 |u|^2 terms coincide with
                // brute-force counts
                let bc = brute.get(m).copied().unwrap_or(0.0);
                // merge_one in the brute force double-counts the (k1,k3)
                // ordering exactly like the Hamiltonian sum does
                assert!((c.re - bc).abs() < 1e-9, "{m:?}: {} vs {bc}", c.re);
            }
        }
        assert_eq!(quartic, brute.len());
        // every H_Birk quartic monomial satisfies all three constraints and
        // F_Birk divisors are nonzero by construction
        for (m, _) in &h_birk.terms {
            let total: u32 = m.alpha.iter().chain(&m.beta).map(|&(_, p)| p as u32).sum();
            if total == 4 {
                assert_eq!(
                    multiset_energy(&h.box_sites, &m.alpha),
                    multiset_energy(&h.box_sites, &m.beta)
                );
                assert_eq!(
                    multiset_momentum(&h.box_sites, &m.alpha),
                    multiset_momentum(&h.box_sites, &m.beta)
                );
            }
        }
        for (m, c) in &f_birk.terms {
            assert_ne!(
                multiset_energy(&h.box_sites, &m.alpha),
                multiset_energy(&h.box_sites, &m.beta)
            );
            assert!(c.norm() > 0.0);
        }
    }

    #[test]
    fn action_angle_quadratic_energy_display() {
        // K = sum |k|^2 |u_k|^2 maps to j^(2).y + sum |k|^2 |z_k|^2
        let s = cubic_sites();
        let box_radius = 2;
        let normal = Arc::new(SiteSet::normal_sites(&s, box_radius));
        let (h, _, _) = build_nls(1, &s, box_radius);
        // keep only the quadratic part
        let quad = UHam {
            box_sites: h.box_sites.clone(),
            terms: h
                .terms
                .iter()
                .filter(|(m, _)| {
                    m.alpha.iter().chain(&m.beta).map(|&(_, p)| p as u32).sum::<u32>() == 2
                })
                .map(|(m, c)| (m.clone(), *c))
                .collect(),
        };
        let cut = Cutoffs { k_x: 8, max_degree: 6 };
        let aa = to_action_angle(&quad, &s, normal.clone(), 2, cut);
        let xi = [0.3, 0.4];
        let num = aa.evaluate(&xi);
        // y part: |j_1|^2 y_1 + |j_2|^2 y_2 = 0 y_1 + 1 y_2
        assert_eq!(num.coeff(&Monomial::y(2, 0)), C64::new(0.0, 0.0));
        assert_eq!(num.coeff(&Monomial::y(2, 1)), C64::new(1.0, 0.0));
        // z part: |k|^2 |z_k|^2
        for id in 0..normal.len() {
            let k2 = normal.site(id).norm2() as f64;
            let mut m = Monomial::constant(2);
            m.z = vec![(id as u32, 1)];
            m.zbar = vec![(id as u32, 1)];
            assert!((num.coeff(&m).re - k2).abs() < 1e-12);
        }
    }

    #[test]
    fn action_angle_tangential_square_exact() {
        // |u_{j_i}|^2 -> xi_i + y_i exactly
        let s = cubic_sites();
        let normal = Arc::new(SiteSet::normal_sites(&s, 2));
        let (h, _, _) = build_nls(1, &s, 2);
        let j1_id = h.box_sites.id_of(s.site(0)).unwrap() as u32;
        let one = UHam {
            box_sites: h.box_sites.clone(),
            terms: [(
                UMonomial { alpha: vec![(j1_id, 1)], beta: vec![(j1_id, 1)] },
                C64::new(1.0, 0.0),
            )]
            .into_iter()
            .collect(),
        };
        let cut = Cutoffs { k_x: 8, max_degree: 6 };
        let aa = to_action_angle(&one, &s, normal, 3, cut);
        // constant xi_1 dropped; y_1 coefficient exactly 1; nothing else
        assert_eq!(aa.num_terms(), 1);
        let c = aa.coeff(&Monomial::y(2, 0));
        let v = c.evaluate(&[0.7, 0.9]);
        assert!((v - C64::new(1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn projections_partition_degree_two() {
        let nf = cubic_nf(4);
        let xi = [0.011, 0.013];
        let eval = assemble_normal_form(&nf, &xi, 1e-10).unwrap();
        let cut = Cutoffs { k_x: 8, max_degree: 4 };
        let nham = normal_form_ham(&nf, &eval, cut);
        // Pi_rg(N) = 0
        let rg = project_range(&nham, &nf);
        assert!(rg.is_zero(), "{} stray terms", rg.num_terms());
        // kernel + range = identity on degree <= 2; idempotent
        let mut rng = StdRng::seed_from_u64(3);
        let p = random_perturbation(&nf, &mut rng, 4, 12, 1.0, 1.0, cut);
        let ker = project_kernel(&p, &nf);
        let rg = project_range(&p, &nf);
        let sum = ker.add(&rg);
        let d2 = p.degree_le(2);
        assert!(sum.sub(&d2).is_zero());
        assert!(project_kernel(&rg, &nf).is_zero());
        assert!(project_range(&ker, &nf).is_zero());
        // kernel is a Lie subalgebra: {ker, ker} stays in ker + >2
        let k2 = ker.poisson(&ker).unwrap().degree_le(2);
        assert!(project_range(&k2, &nf).is_zero());
    }

    #[test]
    fn homological_scalar_example() {
        // N = omega.y, P_rg = c e^{i nu x}: F = c e^{i nu x} / (i omega.nu)
        let nf = cubic_nf(4);
        let xi = [0.011, 0.013];
        let eval = assemble_normal_form(&nf, &xi, 1e-10).unwrap();
        let cut = Cutoffs { k_x: 8, max_degree: 4 };
        let n = 2;
        let mut n_ham = NumHam::new(n, nf.site_set.clone(), cut);
        for j in 0..n {
            n_ham.add_term(Monomial::y(n, j), C64::new(eval.omega[j], 0.0));
        }
        let np = NormParams { s: 0.3, r: 0.2, a: 0.05, p: 2.0 };
        let nu = vec![2, -2]; // mass 0; momentum pi(nu) = (-2, 0) != 0 -> range
        let mut p_rg = NumHam::new(n, nf.site_set.clone(), cut);
        let c = C64::new(0.4, -0.1);
        p_rg.add_term(Monomial::exp_x(nu.clone()), c);
        let zero = NumHam::new(n, nf.site_set.clone(), cut);
        let sol = solve_homological(&n_ham, &p_rg, &zero, &nf, 4, &np).unwrap();
        let wn: f64 = eval.omega.iter().zip(&nu).map(|(w, &v)| w * v as f64).sum();
        let want = c / C64::new(0.0, wn);
        let got = sol.f.coeff(&Monomial::exp_x(nu));
        assert!((got - want).norm() < 1e-14);
        assert!(sol.residual <= 1e-12 * sol.rhs_norm.max(1e-300));
    }

    #[test]
    fn homological_matches_dense_solver() {
        let nf = cubic_nf(4);
        let xi = [0.011, 0.013];
        let eval = assemble_normal_form(&nf, &xi, 1e-10).unwrap();
        let cut = Cutoffs { k_x: 16, max_degree: 4 };
        let nham = {
            let mut h = normal_form_ham(&nf, &eval, cut);
            h.drop_constant();
            h
        };
        let np = NormParams { s: 0.3, r: 0.2, a: 0.05, p: 2.0 };
        let mut rng = StdRng::seed_from_u64(11);
        let pert = random_perturbation(&nf, &mut rng, 4, 14, 1e-3, 1e-2, cut);
        let p_rg = project_range(&pert, &nf);
        let p_gt2 = pert.degree_gt(2);
        let sol = solve_homological(&nham, &p_rg, &p_gt2, &nf, 4, &np).unwrap();
        let dense = solve_homological_dense(&nham, &p_rg, &p_gt2, &nf, 4).unwrap();
        let diff = sol.f.sub(&dense);
        let scale = majorant_norm(&sol.f, &np).max(1e-300);
        assert!(
            majorant_norm(&diff, &np) <= 1e-12 * scale,
            "neumann vs dense: {} vs scale {scale}",
            majorant_norm(&diff, &np)
        );
        assert!(sol.residual <= 1e-12 * sol.rhs_norm);
    }

    #[test]
    fn kam_step_no_linear_term_survives() {
        let nf = cubic_nf(4);
        let xi = [0.011, 0.013];
        let eval = assemble_normal_form(&nf, &xi, 1e-10).unwrap();
        let cut = Cutoffs { k_x: 16, max_degree: 4 };
        let nham = {
            let mut h = normal_form_ham(&nf, &eval, cut);
            h.drop_constant();
            h
        };
        let np = NormParams { s: 0.3, r: 0.2, a: 0.05, p: 2.0 };
        let mut rng = StdRng::seed_from_u64(23);
        let pert = random_perturbation(&nf, &mut rng, 4, 10, 1e-4, 1e-3, cut);
        // t-scaling: the below-K range part after the step is quadratic in t
        let mut norms = Vec::new();
        for &t in &[1.0, 0.5] {
            let h = nham.add(&pert.scale(t));
            let (h1, _) = kam_step(&h, &nf, 4, &np).unwrap();
            let low = project_range(&h1, &nf).freq_le(4);
            norms.push(majorant_norm(&low, &np).max(1e-300));
        }
        let slope = (norms[0] / norms[1]).ln() / 2.0f64.ln();
        assert!(slope >= 2.0 - 0.2, "leading power in t: {slope}");
    }

    #[test]
    fn kam_step_zero_perturbation_is_identity() {
        let nf = cubic_nf(4);
        let xi = [0.011, 0.013];
        let eval = assemble_normal_form(&nf, &xi, 1e-10).unwrap();
        let cut = Cutoffs { k_x: 8, max_degree: 4 };
        let nham = {
            let mut h = normal_form_ham(&nf, &eval, cut);
            h.drop_constant();
            h
        };
        let np = NormParams { s: 0.3, r: 0.2, a: 0.05, p: 2.0 };
        let (h1, rep) = kam_step(&nham, &nf, 4, &np).unwrap();
        assert!(h1.sub(&nham).is_zero());
        assert_eq!(rep.norm_p_rg_before, 0.0);
    }

    #[test]
    fn kam_iterate_decays() {
        let nf = cubic_nf(4);
        let xi = [0.011, 0.013];
        let eval = assemble_normal_form(&nf, &xi, 1e-10).unwrap();
        let cut = Cutoffs { k_x: 64, max_degree: 4 };
        let nham = {
            let mut h = normal_form_ham(&nf, &eval, cut);
            h.drop_constant();
            h
        };
        let np = NormParams { s: 0.3, r: 0.2, a: 0.05, p: 2.0 };
        let mut rng = StdRng::seed_from_u64(5);
        let pert = random_perturbation(&nf, &mut rng, 4, 10, 1e-5, 1e-3, cut);
        let h0 = nham.add(&pert);
        let (_, table) = kam_iterate(&h0, &nf, 3, 4, &np).unwrap();
        for w in table.rows.windows(2) {
            assert!(
                w[1].norm_p_rg < w[0].norm_p_rg,
                "norms must strictly decrease: {:?}",
                table.rows
            );
        }
        assert!(table.fitted_exponent >= 1.4, "exponent {}", table.fitted_exponent);
    }

    #[test]
    fn iterate_preserves_conservation() {
        let nf = cubic_nf(4);
        let xi = [0.011, 0.013];
        let eval = assemble_normal_form(&nf, &xi, 1e-10).unwrap();
        let cut = Cutoffs { k_x: 64, max_degree: 4 };
        let nham = {
            let mut h = normal_form_ham(&nf, &eval, cut);
            h.drop_constant();
            h
        };
        let np = NormParams { s: 0.3, r: 0.2, a: 0.05, p: 2.0 };
        let mut rng = StdRng::seed_from_u64(7);
        let pert = random_perturbation(&nf, &mut rng, 4, 8, 1e-5, 1e-3, cut);
        let h0 = nham.add(&pert);
        let (h_final, _) = kam_iterate(&h0, &nf, 2, 4, &np).unwrap();
        let ctx = nf.final_conservation();
        let n_final = project_kernel(&h_final, &nf);
        let mass = ctx.mass_ham(cut);
        assert!(n_final.poisson(&mass).unwrap().is_zero());
        for c in 0..2 {
            let mom = ctx.momentum_ham(cut, c);
            assert!(n_final.poisson(&mom).unwrap().is_zero());
        }
    }
}
