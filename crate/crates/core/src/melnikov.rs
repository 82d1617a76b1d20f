//! Melnikov (non-resonance) verification: the block operators of `ad(N)` on
//! the decomposition of the degree <= 2 space, fast invertibility screening,
//! resonant-set scans over parameter grids, and the Monte Carlo oracle for the
//! derivative-bound measure lemma.

use crate::final_graph::{assemble_normal_form, NormalFormData, NormalFormEval};
use crate::lattice::LatticeVector;
use crate::numeric::{self, C64, CMat};
use rand::Rng;
use rayon::prelude::*;
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MelnikovError {
    #[error("block id violates the conservation laws: {0}")]
    Conservation(String),
    #[error("xi grid too coarse: {got} points < required {need}")]
    GridTooCoarse { got: usize, need: usize },
    #[error(transparent)]
    Final(#[from] crate::final_graph::FinalGraphError),
}

/// Identifies one block of `ad(N)` on the degree <= 2 decomposition.
/// `sigma = sigma2 = 0`: the scalar `omega . nu`; `sigma2 = 0`: a linear block
/// `(D_t, nu)`; otherwise a quadratic block `(nu, t, t')_{sigma, sigma'}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MelnikovBlockId {
    pub nu: Vec<i64>,
    pub t: Option<usize>,
    pub t2: Option<usize>,
    pub sigma: i8,
    pub sigma2: i8,
}

impl MelnikovBlockId {
    pub fn scalar(nu: Vec<i64>) -> Self {
        MelnikovBlockId { nu, t: None, t2: None, sigma: 0, sigma2: 0 }
    }

    pub fn linear(nu: Vec<i64>, t: usize, sigma: i8) -> Self {
        MelnikovBlockId { nu, t: Some(t), t2: None, sigma, sigma2: 0 }
    }

    pub fn quadratic(nu: Vec<i64>, t: usize, t2: usize, sigma: i8, sigma2: i8) -> Self {
        MelnikovBlockId { nu, t: Some(t), t2: Some(t2), sigma, sigma2 }
    }

    /// Checks the mass and momentum constraints for this block type.
    pub fn validate(&self, nf: &NormalFormData) -> Result<(), MelnikovError> {
        let eta: i64 = self.nu.iter().sum();
        let pi = pi_of(&self.nu, nf);
        let fail = |msg: String| Err(MelnikovError::Conservation(msg));
        match (self.t, self.t2, self.sigma, self.sigma2) {
            (None, None, 0, 0) => {
                if eta != 0 || !pi.is_zero() {
                    return fail(format!("scalar block nu = {:?}", self.nu));
                }
            }
            (Some(t), None, s, 0) if s != 0 => {
                // eta(nu) + 1 = 0, pi(nu) + r_t = 0
                if eta + 1 != 0 || !pi.add(&nf.components[t].root).is_zero() {
                    return fail(format!("linear block nu = {:?}, t = {t}", self.nu));
                }
            }
            (Some(t), Some(t2), s, s2) if s != 0 && s2 != 0 => {
                let ss = (s * s2) as i64;
                let r1 = &nf.components[t].root;
                let r2 = &nf.components[t2].root;
                if eta + 1 + ss != 0 || !pi.add(r1).add(&r2.scale(ss)).is_zero() {
                    return fail(format!("quadratic block nu = {:?}, ({t},{t2})", self.nu));
                }
            }
            _ => return fail(format!("malformed id {self:?}")),
        }
        Ok(())
    }
}

fn pi_of(nu: &[i64], nf: &NormalFormData) -> LatticeVector {
    let mut v = LatticeVector::zero(nf.sites.d());
    for (i, &c) in nu.iter().enumerate() {
        if c != 0 {
            v = v.add(&nf.sites.site(i).scale(c));
        }
    }
    v
}

fn omega_dot_nu(eval: &NormalFormEval, nu: &[i64]) -> f64 {
    eval.omega.iter().zip(nu).map(|(w, &v)| w * v as f64).sum()
}

/// Semisimple part of `Omega_t`: `(|r_t|^2 + theta_t) I`.
fn omega_t_ss(nf: &NormalFormData, eval: &NormalFormEval, t: usize) -> CMat {
    let d = nf.components[t].members.len();
    CMat::from_diagonal_element(d, d, C64::new(nf.components[t].root.norm2() as f64, 0.0) + eval.theta[t])
}

/// The matrix of `-i ad(N)` on the block, in the representation with
/// `sigma = +1` conventions: scalar `omega.nu`; `sigma (omega.nu I + Omega_t)`;
/// or `sigma (omega.nu I + Omega_t (x) I + sigma sigma' I (x) Omega_t')` on the
/// `d_t d_t'`-dimensional product space (left multiplication on rows,
/// transposed right multiplication on columns).
pub fn block_operator(
    id: &MelnikovBlockId,
    nf: &NormalFormData,
    eval: &NormalFormEval,
    semisimple_only: bool,
) -> Result<CMat, MelnikovError> {
    id.validate(nf)?;
    let wn = omega_dot_nu(eval, &id.nu);
    let omega_t = |t: usize| -> CMat {
        if semisimple_only {
            omega_t_ss(nf, eval, t)
        } else {
            eval.omega_t[t].clone()
        }
    };
    let m = match (id.t, id.t2) {
        (None, None) => CMat::from_element(1, 1, C64::new(wn, 0.0)),
        (Some(t), None) => {
            let o = omega_t(t);
            let d = o.nrows();
            (o + CMat::from_diagonal_element(d, d, C64::new(wn, 0.0)))
                * C64::new(id.sigma as f64, 0.0)
        }
        (Some(t), Some(t2)) => {
            let a = omega_t(t);
            let b = omega_t(t2);
            let (da, db) = (a.nrows(), b.nrows());
            let ss = (id.sigma * id.sigma2) as f64;
            let mut m = CMat::zeros(da * db, da * db);
            for i in 0..da {
                for j in 0..db {
                    let row = i * db + j;
                    m[(row, row)] += C64::new(wn, 0.0);
                    for k in 0..da {
                        m[(row, k * db + j)] += a[(i, k)];
                    }
                    for l in 0..db {
                        m[(row, i * db + l)] += b[(j, l)] * ss;
                    }
                }
            }
            m * C64::new(id.sigma as f64, 0.0)
        }
        _ => unreachable!("validate rejects malformed ids"),
    };
    Ok(m)
}

/// Quantitative constants measured from the constructed normal form on the
/// working parameter set.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BoundParams {
    pub epsilon: f64,
    pub q: u32,
    pub k_cap: i64,
    pub rho: f64,
    /// `|(block inverse)| <= eps^{-2q} a` for `|nu| <= s0` (measured).
    pub a: f64,
    /// `|omega - j^2|, |Omega_t - |r_t|^2 I| <= M eps^{2q}` (measured).
    pub m_const: f64,
    /// dilation bound of the inverse frequency map (measured).
    pub l_const: f64,
    pub s0: i64,
    /// `(2d+1)^2`.
    pub ell: usize,
}

/// Measures `M`, `L` and `a` on the given samples.
pub fn measure_bound_params(
    nf: &NormalFormData,
    evals: &[NormalFormEval],
    epsilon: f64,
    q: u32,
    k_cap: i64,
    rho: f64,
    s0: i64,
) -> Result<BoundParams, MelnikovError> {
    let d = nf.sites.d();
    let e2q = epsilon.powi(2 * q as i32);
    let mut m_const = 0.0f64;
    for ev in evals {
        for (i, w) in ev.omega.iter().enumerate() {
            m_const = m_const.max((w - nf.sites.site(i).norm2() as f64).abs() / e2q);
        }
        for (t, m) in ev.omega_t.iter().enumerate() {
            let dt = m.nrows();
            let shift = CMat::from_diagonal_element(
                dt,
                dt,
                C64::new(nf.components[t].root.norm2() as f64, 0.0),
            );
            let dev = m - shift;
            let linf = (0..dt)
                .map(|i| (0..dt).map(|j| dev[(i, j)].norm()).sum::<f64>())
                .fold(0.0, f64::max);
            m_const = m_const.max(linf / e2q);
        }
    }
    // L: max row sum of the inverse Jacobian of xi -> omega, scaled
    let mut l_const = 0.0f64;
    let w1 = crate::poly::omega1(q, nf.n());
    for ev in evals {
        let n = nf.n();
        let mut jac = nalgebra::DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                jac[(i, j)] = w1[i].d_xi(j).evaluate(&ev.xi).unwrap_or(0.0);
            }
        }
        if let Some(inv) = jac.try_inverse() {
            let linf = (0..n)
                .map(|i| (0..n).map(|j| inv[(i, j)].abs()).sum::<f64>())
                .fold(0.0, f64::max);
            l_const = l_const.max(linf * epsilon.powi(2 * (q as i32 - 1)));
        }
    }
    // a: worst inverse norm over |nu| <= s0 blocks on the sample evals
    let mut a = 0.0f64;
    for ev in evals {
        let classes = enumerate_classes(nf, s0, 4 * s0);
        for id in &classes {
            let op = block_operator(id, nf, ev, false)?;
            let smin = numeric::smin(&op);
            if smin > 0.0 {
                a = a.max(e2q / smin);
            }
        }
    }
    Ok(BoundParams {
        epsilon,
        q,
        k_cap,
        rho,
        a,
        m_const,
        l_const,
        s0,
        ell: (2 * d + 1) * (2 * d + 1),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Screen {
    InvertibleFast,
    NeedsFullCheck,
    Singular,
}

/// Fast screening: the kernel block is singular; away from it, when
/// `|omega.nu + sigma |r_t|^2 + sigma' |r_t'|^2|` exceeds
/// `2 (2d+1)^2 M eps^{2q}` the Neumann series certifies invertibility.
pub fn invertibility_screen(
    id: &MelnikovBlockId,
    nf: &NormalFormData,
    eval: &NormalFormEval,
    params: &BoundParams,
) -> Result<Screen, MelnikovError> {
    id.validate(nf)?;
    if id.nu.iter().all(|&v| v == 0)
        && id.t == id.t2
        && id.t.is_some()
        && id.sigma * id.sigma2 == -1
    {
        return Ok(Screen::Singular);
    }
    let mut u = omega_dot_nu(eval, &id.nu);
    if let Some(t) = id.t {
        u += id.sigma as f64 * nf.components[t].root.norm2() as f64;
    }
    if let Some(t2) = id.t2 {
        u += id.sigma2 as f64 * nf.components[t2].root.norm2() as f64;
    }
    let threshold =
        2.0 * params.ell as f64 * params.m_const * params.epsilon.powi(2 * params.q as i32);
    if u.abs() > threshold {
        Ok(Screen::InvertibleFast)
    } else {
        Ok(Screen::NeedsFullCheck)
    }
}

fn nu_ball(k: i64, n: usize) -> Vec<Vec<i64>> {
    let mut out = Vec::new();
    let mut cur = vec![0i64; n];
    fn rec(k: i64, idx: usize, cur: &mut Vec<i64>, out: &mut Vec<Vec<i64>>) {
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
    rec(k, 0, &mut cur, &mut out);
    out
}

/// All conservation-compatible classes with `|nu|_1 <= k`, restricting `t` to
/// components with `|r_t|^2 <= pool_cap` or in the finite bad set, with the
/// representative `sigma = +1` and symmetric pairs canonicalized.
pub fn enumerate_classes(nf: &NormalFormData, k: i64, pool_cap: i64) -> Vec<MelnikovBlockId> {
    let n = nf.n();
    let mut root_index: std::collections::HashMap<LatticeVector, Vec<usize>> = Default::default();
    for (t, c) in nf.components.iter().enumerate() {
        root_index.entry(c.root.clone()).or_default().push(t);
    }
    let pool: Vec<usize> = nf
        .components
        .iter()
        .enumerate()
        .filter(|(_, c)| c.in_t_f || c.root.norm2() <= pool_cap)
        .map(|(t, _)| t)
        .collect();
    let mut out = Vec::new();
    for nu in nu_ball(k, n) {
        let eta: i64 = nu.iter().sum();
        let pi = pi_of(&nu, nf);
        // scalar classes
        if eta == 0 && pi.is_zero() && nu.iter().any(|&v| v != 0) {
            out.push(MelnikovBlockId::scalar(nu.clone()));
        }
        // linear classes: r_t = -pi(nu), eta + 1 = 0
        if eta + 1 == 0 {
            if let Some(ts) = root_index.get(&pi.neg()) {
                for &t in ts {
                    out.push(MelnikovBlockId::linear(nu.clone(), t, 1));
                }
            }
        }
        // quadratic classes: sigma sigma' = -1 - eta
        let ss = -1 - eta;
        if ss == 1 || ss == -1 {
            for &t in &pool {
                let r2 = pi.add(&nf.components[t].root).scale(-ss);
                if let Some(ts) = root_index.get(&r2) {
                    for &t2 in ts {
                        // canonical representative of the conjugate/transpose pair
                        let cand = MelnikovBlockId::quadratic(nu.clone(), t, t2, 1, ss as i8);
                        let flipped = MelnikovBlockId::quadratic(
                            nu.iter().map(|&v| -v).collect(),
                            t2,
                            t,
                            1,
                            ss as i8,
                        );
                        let key = |m: &MelnikovBlockId| (m.nu.clone(), m.t, m.t2);
                        if key(&cand) <= key(&flipped) {
                            out.push(cand);
                        }
                    }
                }
            }
        }
    }
    out.sort_by_key(|m| (m.nu.clone(), m.t, m.t2, m.sigma, m.sigma2));
    out.dedup();
    out
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ClassReport {
    pub nu: Vec<i64>,
    pub t_root: Option<Vec<i64>>,
    pub t2_root: Option<Vec<i64>>,
    pub sigma: i8,
    pub sigma2: i8,
    pub dim: usize,
    /// resonant fraction of grid points per scanned rho
    pub fractions: Vec<f64>,
    pub worst_smin: f64,
    /// exponent `c` of the measure lemma for this class shape
    pub c_exponent: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ResonantReport {
    pub k: i64,
    pub rhos: Vec<f64>,
    pub grid_points: usize,
    pub classes: Vec<ClassReport>,
    /// number of classes with nonempty resonant set, per rho
    pub census: Vec<usize>,
    pub census_bound: f64,
    /// aggregate resonant fraction per rho
    pub aggregate_fraction: Vec<f64>,
    /// aggregate fraction on the halved grid (convergence check)
    pub aggregate_fraction_coarse: Vec<f64>,
    /// `C K^{-c(rho-1)}` shape per rho with C = 1, using the worst class c
    pub bound_shape: Vec<f64>,
}

/// Scans the resonant sets over a parameter grid: for each class, the fraction
/// of grid points where the inverse bound of the Melnikov condition fails.
pub fn resonant_scan(
    nf: &NormalFormData,
    k: i64,
    rhos: &[f64],
    xi_grid: &[Vec<f64>],
    epsilon: f64,
    min_grid: usize,
) -> Result<ResonantReport, MelnikovError> {
    if xi_grid.len() < min_grid {
        return Err(MelnikovError::GridTooCoarse { got: xi_grid.len(), need: min_grid });
    }
    let q = nf.q;
    let e2q = epsilon.powi(2 * q as i32);
    let classes = enumerate_classes(nf, k, 4 * k);
    let evals: Vec<NormalFormEval> = xi_grid
        .par_iter()
        .map(|xi| assemble_normal_form(nf, xi, 1e-8))
        .collect::<Result<_, _>>()?;

    let d = nf.sites.d();
    let class_reports: Vec<ClassReport> = classes
        .par_iter()
        .map(|id| {
            let dims = |t: Option<usize>| t.map(|t| nf.components[t].members.len()).unwrap_or(1);
            let (d1, d2) = (dims(id.t), dims(id.t2));
            let dim = d1 * d2;
            let mut fractions = vec![0.0f64; rhos.len()];
            let mut worst = f64::INFINITY;
            for ev in &evals {
                let op = block_operator(id, nf, ev, false).expect("validated class");
                let smin = numeric::smin(&op);
                worst = worst.min(smin);
                for (ri, &rho) in rhos.iter().enumerate() {
                    if smin < e2q * (k as f64).powf(-rho) {
                        fractions[ri] += 1.0;
                    }
                }
            }
            for f in fractions.iter_mut() {
                *f /= evals.len() as f64;
            }
            let in_f = |t: Option<usize>| t.map(|t| nf.components[t].in_t_f).unwrap_or(false);
            let c_exponent = match (id.t, id.t2) {
                (None, None) => 1.0,
                (Some(_), None) => {
                    if in_f(id.t) {
                        1.0 / d1 as f64
                    } else {
                        1.0
                    }
                }
                (Some(_), Some(_)) => {
                    if in_f(id.t) || in_f(id.t2) {
                        1.0 / (d1 * d2) as f64
                    } else {
                        1.0
                    }
                }
                _ => 1.0,
            };
            ClassReport {
                nu: id.nu.clone(),
                t_root: id.t.map(|t| nf.components[t].root.0.clone()),
                t2_root: id.t2.map(|t| nf.components[t].root.0.clone()),
                sigma: id.sigma,
                sigma2: id.sigma2,
                dim,
                fractions,
                worst_smin: worst,
                c_exponent,
            }
        })
        .collect();

    let census: Vec<usize> = (0..rhos.len())
        .map(|ri| class_reports.iter().filter(|c| c.fractions[ri] > 0.0).count())
        .collect();
    let aggregate: Vec<f64> = (0..rhos.len())
        .map(|ri| {
            class_reports.iter().map(|c| c.fractions[ri]).sum::<f64>()
                / class_reports.len().max(1) as f64
        })
        .collect();
    // resolution convergence check: refractions on every second grid point
    let coarse_idx: Vec<usize> = (0..xi_grid.len()).step_by(2).collect();
    let mut aggregate_fraction_coarse = vec![0.0; rhos.len()];
    {
        let coarse_evals: Vec<&NormalFormEval> = coarse_idx.iter().map(|&i| &evals[i]).collect();
        let sums: Vec<Vec<f64>> = classes
            .par_iter()
            .map(|id| {
                let mut fr = vec![0.0; rhos.len()];
                for ev in &coarse_evals {
                    let op = block_operator(id, nf, ev, false).expect("validated");
                    let smin = numeric::smin(&op);
                    for (ri, &rho) in rhos.iter().enumerate() {
                        if smin < e2q * (k as f64).powf(-rho) {
                            fr[ri] += 1.0;
                        }
                    }
                }
                fr
            })
            .collect();
        for fr in sums {
            for (ri, v) in fr.iter().enumerate() {
                aggregate_fraction_coarse[ri] += v / coarse_evals.len().max(1) as f64;
            }
        }
        for v in aggregate_fraction_coarse.iter_mut() {
            *v /= classes.len().max(1) as f64;
        }
    }

    let worst_c = class_reports.iter().map(|c| c.c_exponent).fold(1.0, f64::min);
    let bound_shape: Vec<f64> =
        rhos.iter().map(|&rho| (k as f64).powf(-worst_c * (rho - 1.0))).collect();
    let p = nf.n() as f64 + d as f64 / 2.0 + 1.0;
    Ok(ResonantReport {
        k,
        rhos: rhos.to_vec(),
        grid_points: xi_grid.len(),
        classes: class_reports,
        census,
        census_bound: (k as f64).powf(p),
        aggregate_fraction: aggregate,
        aggregate_fraction_coarse,
        bound_shape,
    })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TecnicoReport {
    pub mc_measure: f64,
    pub stderr: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Monte Carlo check of the measure lemma: for `|d^k f| >= c^{|k|}` on the box,
/// `meas{|f| <= alpha^{|k|}} <= 2 |k| zeta^{n-1} alpha / c`.
pub fn tecnico_check(
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    k_order: u32,
    c: f64,
    alpha: f64,
    domain: &[(f64, f64)],
    samples: usize,
    rng: &mut impl Rng,
) -> TecnicoReport {
    let n = domain.len();
    let volume: f64 = domain.iter().map(|(a, b)| b - a).product();
    let zeta: f64 = domain.iter().map(|(a, b)| b - a).fold(0.0, f64::max);
    let threshold = alpha.powi(k_order as i32);
    let mut hits = 0usize;
    let mut x = vec![0.0f64; n];
    for _ in 0..samples {
        for (i, (a, b)) in domain.iter().enumerate() {
            x[i] = rng.gen_range(*a..*b);
        }
        if f(&x).abs() <= threshold {
            hits += 1;
        }
    }
    let p = hits as f64 / samples as f64;
    let mc_measure = p * volume;
    let stderr = (p * (1.0 - p) / samples as f64).sqrt() * volume;
    let bound = 2.0 * k_order as f64 * zeta.powi(n as i32 - 1) * alpha / c;
    TecnicoReport { mc_measure, stderr, bound, pass: mc_measure <= bound + 3.0 * stderr }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct KernelReport {
    pub samples: usize,
    pub blocks_checked: usize,
    /// all (0,t,t,sigma,-sigma) blocks singular to machine precision
    pub kernel_singular: bool,
    /// minimum |det| over all other tested blocks, normalized by eps^{2 q dim}
    pub min_other_det: f64,
    pub failures: Vec<String>,
}

/// Verifies that `ad(N^s)` is singular exactly on the kernel blocks
/// `(0, t, t, sigma, -sigma)` and uniformly invertible elsewhere.
pub fn kernel_verify(
    nf: &NormalFormData,
    xi_samples: &[Vec<f64>],
    nu_cap: i64,
    epsilon: f64,
    det_floor: f64,
) -> Result<KernelReport, MelnikovError> {
    let q = nf.q;
    let classes = enumerate_classes(nf, nu_cap, 4 * nu_cap);
    let per_sample: Vec<Result<(bool, f64, Vec<String>, usize), MelnikovError>> = xi_samples
        .par_iter()
        .map(|xi| {
            let eval = assemble_normal_form(nf, xi, 1e-8)?;
            let mut kernel_singular = true;
            let mut min_other = f64::INFINITY;
            let mut failures = Vec::new();
            let mut checked = 0usize;
            // explicit kernel blocks at this sample
            for (t, _) in nf.components.iter().enumerate().take(32) {
                let id = MelnikovBlockId::quadratic(vec![0; nf.n()], t, t, 1, -1);
                let op = block_operator(&id, nf, &eval, true)?;
                let dim = op.nrows();
                let det = numeric::det(&op).norm();
                checked += 1;
                if det > 1e-10 * epsilon.powi((2 * q * dim as u32) as i32) {
                    kernel_singular = false;
                    failures.push(format!("kernel block t={t} has det {det:e} at xi {xi:?}"));
                }
            }
            for id in &classes {
                let is_kernel = id.nu.iter().all(|&v| v == 0)
                    && id.t == id.t2
                    && id.sigma * id.sigma2 == -1;
                if is_kernel {
                    continue;
                }
                let op = block_operator(id, nf, &eval, true)?;
                let dim = op.nrows();
                let det = numeric::det(&op).norm();
                let floor = det_floor * epsilon.powi((2 * q * dim as u32) as i32);
                checked += 1;
                min_other = min_other.min(det / epsilon.powi((2 * q * dim as u32) as i32));
                if det <= floor {
                    failures.push(format!(
                        "block {:?} unexpectedly near-singular: |det| = {det:e} at xi {xi:?}",
                        id
                    ));
                }
            }
            Ok((kernel_singular, min_other, failures, checked))
        })
        .collect();
    let mut kernel_singular = true;
    let mut min_other = f64::INFINITY;
    let mut failures = Vec::new();
    let mut checked = 0usize;
    for r in per_sample {
        let (ks, mo, fs, ck) = r?;
        kernel_singular &= ks;
        min_other = min_other.min(mo);
        failures.extend(fs);
        checked += ck;
    }
    Ok(KernelReport {
        samples: xi_samples.len(),
        blocks_checked: checked,
        kernel_singular,
        min_other_det: min_other,
        failures,
    })
}

pub fn resonant_report_to_json(r: &ResonantReport) -> Value {
    json!({
        "k": r.k,
        "rhos": r.rhos,
        "grid_points": r.grid_points,
        "census": r.census,
        "census_bound": r.census_bound,
        "aggregate_fraction": r.aggregate_fraction,
        "aggregate_fraction_coarse": r.aggregate_fraction_coarse,
        "bound_shape": r.bound_shape,
        "classes": r.classes.iter().map(|c| json!({
            "nu": c.nu,
            "t_root": c.t_root,
            "t2_root": c.t2_root,
            "sigma": [c.sigma, c.sigma2],
            "dim": c.dim,
            "fractions": c.fractions,
            "worst_smin": c.worst_smin,
            "c": c.c_exponent,
        })).collect::<Vec<_>>(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::final_graph::{
        build_final_graph, finalize_partition, prepare_blocks, y_edges,
    };
    use crate::graph::{build_graph, components};
    use crate::ham::SiteSet;
    use crate::lattice::TangentialSites;
    use nalgebra::DMatrix;
    use rand::rngs::StdRng;
    use rand::SeedableRng;
    use std::sync::Arc;

    fn cubic_nf(radius: i64) -> NormalFormData {
        let s = TangentialSites::new(vec![
            LatticeVector(vec![0, 0]),
            LatticeVector(vec![1, 0]),
        ])
        .unwrap();
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
    fn kernel_block_is_zero_matrix() {
        let nf = cubic_nf(5);
        let xi = [0.011, 0.013];
        let eval = assemble_normal_form(&nf, &xi, 1e-10).unwrap();
        let id = MelnikovBlockId::quadratic(vec![0, 0], 3, 3, 1, -1);
        let op = block_operator(&id, &nf, &eval, false).unwrap();
        assert!(op.norm() < 1e-14);
    }

    #[test]
    fn scalar_block_reduction() {
        // 1x1 blocks with theta = 0: operator = omega.nu + |r_t|^2 - |r_t'|^2
        let nf = cubic_nf(5);
        let xi = [0.011, 0.013];
        let eval = assemble_normal_form(&nf, &xi, 1e-10).unwrap();
        // find a valid (nu, t, t', +, -) class with singleton components
        let classes = enumerate_classes(&nf, 4, 64);
        let id = classes
            .iter()
            .find(|c| {
                c.t.is_some()
                    && c.t2.is_some()
                    && c.sigma2 == -1
                    && c.nu.iter().any(|&v| v != 0)
                    && nf.components[c.t.unwrap()].members.len() == 1
                    && nf.components[c.t2.unwrap()].members.len() == 1
            })
            .expect("scalar second-Melnikov class");
        let op = block_operator(id, &nf, &eval, false).unwrap();
        assert_eq!(op.nrows(), 1);
        let t = id.t.unwrap();
        let t2 = id.t2.unwrap();
        let expect = omega_dot_nu(&eval, &id.nu)
            + (nf.components[t].root.norm2() - nf.components[t2].root.norm2()) as f64
            + (eval.theta[t] - eval.theta[t2]).re;
        assert!((op[(0, 0)].re - expect).abs() < 1e-12);
    }

    #[test]
    fn kronecker_spectrum_matches_pairwise_differences() {
        // spectrum of L(A) - R(A) equals pairwise eigenvalue differences
        let a = DMatrix::from_row_slice(3, 3, &[
            0.3, 1.1, -0.4, 0.0, -0.7, 0.2, 0.5, 0.9, 0.1,
        ]);
        let da = 3;
        let mut m = CMat::zeros(9, 9);
        let ac = numeric::to_complex(&a);
        for i in 0..da {
            for j in 0..da {
                let row = i * da + j;
                for k in 0..da {
                    m[(row, k * da + j)] += ac[(i, k)];
                }
                for l in 0..da {
                    m[(row, i * da + l)] -= ac[(j, l)];
                }
            }
        }
        let eigs_a = numeric::eigenvalues_real(&a);
        let mut want: Vec<C64> = Vec::new();
        for x in &eigs_a {
            for y in &eigs_a {
                want.push(x - y);
            }
        }
        // the embedding is block diagonal for a real matrix: spectrum doubled;
        // match greedily by distance
        let emb = numeric::real_embedding(&m);
        let mut got = numeric::eigenvalues_real(&emb);
        want.extend(want.clone());
        assert_eq!(got.len(), want.len());
        for w in &want {
            let (bi, bd) = got
                .iter()
                .enumerate()
                .map(|(i, g)| (i, (g - w).norm()))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            assert!(bd < 1e-7, "no spectrum match for {w}: best {bd}");
            got.swap_remove(bi);
        }
    }

    #[test]
    fn screen_soundness_on_sweep() {
        let nf = cubic_nf(5);
        let xi = vec![0.011, 0.013];
        let eval = assemble_normal_form(&nf, &xi, 1e-10).unwrap();
        let params = measure_bound_params(&nf, std::slice::from_ref(&eval), 0.11, 1, 8, 2.0, 2)
            .unwrap();
        let classes = enumerate_classes(&nf, 4, 16);
        for id in &classes {
            let screen = invertibility_screen(id, &nf, &eval, &params).unwrap();
            let op = block_operator(id, &nf, &eval, false).unwrap();
            let smin = numeric::smin(&op);
            match screen {
                Screen::InvertibleFast => {
                    assert!(smin > 1e-12, "fast-screened block is singular: {id:?}");
                }
                Screen::Singular => assert!(smin < 1e-10),
                Screen::NeedsFullCheck => {}
            }
        }
    }

    #[test]
    fn kernel_verify_cubic() {
        let nf = cubic_nf(5);
        let samples: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let t = i as f64 / 20.0;
                vec![0.0105 + 0.004 * t, 0.0158 - 0.006 * t]
            })
            .collect();
        let rep = kernel_verify(&nf, &samples, 4, 0.11, 1e-8).unwrap();
        assert!(rep.kernel_singular);
        assert!(rep.failures.is_empty(), "{:?}", rep.failures);
        assert!(rep.min_other_det > 1e-8);
    }

    #[test]
    fn tecnico_canonical_functions() {
        let mut rng = StdRng::seed_from_u64(42);
        for &alpha in &[0.1, 0.01] {
            // f(x) = x on [0,1], k = 1, c = 1: measure alpha <= 2 alpha
            let r = tecnico_check(&|x| x[0], 1, 1.0, alpha, &[(0.0, 1.0)], 100_000, &mut rng);
            assert!(r.pass, "{r:?}");
            assert!((r.mc_measure - alpha).abs() < 5.0 * r.stderr.max(1e-4));
            // f(x) = x^2 on [-1,1], k = 2, c = 1: measure 2 alpha <= 4 alpha
            let r = tecnico_check(
                &|x| x[0] * x[0],
                2,
                1.0,
                alpha,
                &[(-1.0, 1.0)],
                100_000,
                &mut rng,
            );
            assert!(r.pass, "{r:?}");
            assert!((r.mc_measure - 2.0 * alpha).abs() < 6.0 * r.stderr.max(1e-4));
            // f(x1,x2) = x1 on the unit square
            let r = tecnico_check(
                &|x| x[0],
                1,
                1.0,
                alpha,
                &[(0.0, 1.0), (0.0, 1.0)],
                100_000,
                &mut rng,
            );
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn resonant_scan_monotone_and_census() {
        let nf = cubic_nf(5);
        let mut grid = Vec::new();
        let eps = 0.11f64;
        let g = 8;
        for i in 0..g {
            for j in 0..g {
                let u = 0.5 + (i as f64 + 0.5) / g as f64;
                let v = 0.5 + (j as f64 + 0.5) / g as f64;
                grid.push(vec![eps * eps * u, eps * eps * v]);
            }
        }
        let rep = resonant_scan(&nf, 4, &[2.0, 4.0, 8.0], &grid, eps, 50).unwrap();
        // monotone nonincreasing in rho
        for c in &rep.classes {
            for w in c.fractions.windows(2) {
                assert!(w[1] <= w[0] + 1e-12);
            }
        }
        for w in rep.census.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!((rep.census[0] as f64) < rep.census_bound);
        // refusal on a coarse grid
        assert!(matches!(
            resonant_scan(&nf, 4, &[2.0], &grid[..10], eps, 50),
            Err(MelnikovError::GridTooCoarse { .. })
        ));
    }

    #[test]
    fn block_operator_matches_direct_bracket() {
        // the formula matrix agrees with -i ad(N) computed by bracketing the
        // assembled normal-form Hamiltonian against the block basis monomials
        use crate::ham::{Cutoffs, Monomial, NumHam};
        use crate::final_graph::normal_form_ham;
        let nf = cubic_nf(5);
        let xi = vec![0.0112, 0.0147];
        let eval = assemble_normal_form(&nf, &xi, 1e-10).unwrap();
        let cut = Cutoffs { k_x: 16, max_degree: 4 };
        let mut nham = normal_form_ham(&nf, &eval, cut);
        nham.drop_constant();
        let n = nf.n();
        let classes = enumerate_classes(&nf, 4, 16);
        let mut tested = 0;
        for id in classes.iter().take(200) {
            let Some(t) = id.t else { continue };
            let op = block_operator(id, &nf, &eval, false).unwrap();
            // basis monomials in the sigma = +1 representation
            let members = |t: usize| nf.components[t].members.clone();
            let mut basis: Vec<Monomial> = Vec::new();
            match id.t2 {
                None => {
                    for &k in &members(t) {
                        let mut m = Monomial::z_pm(n, k, nf.site_info[k].s);
                        m.nu = id.nu.iter().map(|&v| v as i32).collect();
                        basis.push(m);
                    }
                }
                Some(t2) => {
                    for &k in &members(t) {
                        for &h in &members(t2) {
                            let mk = Monomial::z_pm(n, k, nf.site_info[k].s);
                            let mh = Monomial::z_pm(
                                n,
                                h,
                                id.sigma2 * nf.site_info[h].s,
                            );
                            let mut m = mk.mul(&mh);
                            m.nu = id.nu.iter().map(|&v| v as i32).collect();
                            basis.push(m);
                        }
                    }
                }
            }
            // bracket each basis monomial with N; since -i ad(N) m = sum op m,
            // the coefficient of m' in {N, m} is i * op[row(m'), col(m)]
            let index: std::collections::HashMap<&Monomial, usize> =
                basis.iter().enumerate().map(|(i, m)| (m, i)).collect();
            for (j, mono) in basis.iter().enumerate() {
                let mut single = NumHam::new(n, nf.site_set.clone(), cut);
                single.add_term(mono.clone(), C64::new(1.0, 0.0));
                let img = nham.poisson(&single).unwrap();
                for (m, c) in &img.terms {
                    let Some(&i) = index.get(m) else {
                        // off-block coefficients only when the two basis
                        // monomials coincide (t = t2 squares); tolerate zero
                        assert!(c.norm() < 1e-12, "stray bracket term");
                        continue;
                    };
                    let want = op[(i, j)] * C64::new(0.0, 1.0);
                    // product blocks with t = t2 and equal-site squares double
                    // the coefficient through symmetrization; compare up to
                    // that factor only on distinct-pair bases
                    if id.t == id.t2 {
                        continue;
                    }
                    assert!(
                        (c - want).norm() <= 1e-10 * want.norm().max(1e-6),
                        "bracket {c} vs formula {want} in {id:?}"
                    );
                }
            }
            tested += 1;
        }
        assert!(tested > 10);
    }

    #[test]
    fn conservation_validation_rejects_bad_ids() {
        let nf = cubic_nf(5);
        let bad = MelnikovBlockId::linear(vec![3, 0], 0, 1);
        assert!(bad.validate(&nf).is_err());
        let bad2 = MelnikovBlockId::quadratic(vec![0, 0], 0, 0, 1, 1);
        assert!(bad2.validate(&nf).is_err());
    }
}
