//! Cross-module integration: graph -> blocks -> final graph -> melnikov on the
//! instance with a red pair, plus the action-angle layer against the conserved
//! quantities.

use resonant_nf::final_graph::{
    assemble_normal_form, build_final_graph, finalize_partition, normal_form_ham, prepare_blocks,
    y_edges,
};
use resonant_nf::graph::{build_graph, components};
use resonant_nf::ham::{majorant_norm, Cutoffs, Monomial, NormParams, SiteSet};
use resonant_nf::kam::{build_nls, to_action_angle};
use resonant_nf::lattice::{LatticeVector, TangentialSites};
use resonant_nf::melnikov::{
    enumerate_classes, invertibility_screen, measure_bound_params, Screen,
};
use resonant_nf::numeric;
use std::sync::Arc;

fn sites(v: &[&[i64]]) -> TangentialSites {
    TangentialSites::new(v.iter().map(|s| LatticeVector(s.to_vec())).collect()).unwrap()
}

fn samples() -> Vec<Vec<f64>> {
    vec![
        vec![0.011, 0.013],
        vec![0.022, 0.026],
        vec![0.009, 0.016],
        vec![0.014, 0.008],
        vec![0.012, 0.019],
    ]
}

#[test]
fn red_instance_full_chain_screen_soundness() {
    let s = sites(&[&[0, 0], &[2, 0]]);
    let g = build_graph(&s, 1, 7).unwrap();
    let comps = components(&g);
    assert!(comps.diagnostics.is_empty());
    let input = prepare_blocks(&comps, &s, 1, &samples(), 1e-8).unwrap();
    let (y, _) = y_edges(&input.catalog, 1, 2, 1e-8);
    let graph = build_final_graph(&input, &y, 1e-8).unwrap();
    let site_set = Arc::new(SiteSet::normal_sites(&s, 7));
    let nf = finalize_partition(input, graph, site_set).unwrap();
    assert_eq!(nf.t_f.len(), 2, "complex conjugate pair of bad blocks");

    let xi = vec![0.0115, 0.0095];
    let eval = assemble_normal_form(&nf, &xi, 1e-10).unwrap();
    let evals = vec![eval];
    let params =
        measure_bound_params(&nf, &evals, 0.11, 1, 8, 2.0, 2).unwrap();
    assert!(params.m_const > 0.0 && params.m_const < 100.0);
    // screening is sound across all classes at this sample
    let classes = enumerate_classes(&nf, 4, 16);
    assert!(!classes.is_empty());
    let mut fast = 0;
    for id in &classes {
        let screen = invertibility_screen(id, &nf, &evals[0], &params).unwrap();
        let op = resonant_nf::melnikov::block_operator(id, &nf, &evals[0], false).unwrap();
        match screen {
            Screen::InvertibleFast => {
                fast += 1;
                assert!(numeric::smin(&op) > 1e-12);
            }
            Screen::Singular => assert!(numeric::smin(&op) < 1e-10),
            Screen::NeedsFullCheck => {}
        }
    }
    assert!(fast > 0, "the fast path triggers away from the kernel");

    // the assembled normal form Poisson-commutes with mass and momentum
    let cut = Cutoffs { k_x: 8, max_degree: 4 };
    let eval = assemble_normal_form(&nf, &xi, 1e-10).unwrap();
    let nham = normal_form_ham(&nf, &eval, cut);
    let ctx = nf.final_conservation();
    assert!(nham.poisson(&ctx.mass_ham(cut)).unwrap().is_zero());
}

#[test]
fn action_angle_momentum_display() {
    // M = sum_i y_i j_i + sum_k k |z_k|^2 after the polar substitution
    let s = sites(&[&[0, 0], &[1, 0]]);
    let radius = 2;
    let normal = Arc::new(SiteSet::normal_sites(&s, radius));
    let (h, _, _) = build_nls(1, &s, radius);
    // the x-momentum in u coordinates: sum_k k_x |u_k|^2
    let mut mom = std::collections::BTreeMap::new();
    for id in 0..h.box_sites.len() {
        let kx = h.box_sites.site(id).0[0];
        if kx != 0 {
            let m = resonant_nf::kam::UMonomial {
                alpha: vec![(id as u32, 1)],
                beta: vec![(id as u32, 1)],
            };
            mom.insert(m, numeric::C64::new(kx as f64, 0.0));
        }
    }
    let mom_u = resonant_nf::kam::UHam { box_sites: h.box_sites.clone(), terms: mom };
    let cut = Cutoffs { k_x: 8, max_degree: 6 };
    let aa = to_action_angle(&mom_u, &s, normal.clone(), 2, cut);
    let num = aa.evaluate(&[0.25, 0.49]);
    // y weights j_i = (0, 1) in the x component
    assert_eq!(num.coeff(&Monomial::y(2, 0)), numeric::C64::new(0.0, 0.0));
    assert_eq!(num.coeff(&Monomial::y(2, 1)), numeric::C64::new(1.0, 0.0));
    for id in 0..normal.len() {
        let kx = normal.site(id).0[0] as f64;
        let mut m = Monomial::constant(2);
        m.z = vec![(id as u32, 1)];
        m.zbar = vec![(id as u32, 1)];
        assert!((num.coeff(&m).re - kx).abs() < 1e-12);
    }
}

#[test]
fn birkhoff_generator_removes_nonresonant_part() {
    // {F_Birk, K_quadratic} cancels the non-resonant quartic monomials with at
    // most two normal factors, to truncation order
    let s = sites(&[&[0], &[1]]);
    let (h, h_birk, f_birk) = build_nls(1, &s, 2);
    let normal = Arc::new(SiteSet::normal_sites(&s, 2));
    let cut = Cutoffs { k_x: 16, max_degree: 8 };
    let aa_h = to_action_angle(&h, &s, normal.clone(), 3, cut);
    let aa_birk = to_action_angle(&h_birk, &s, normal.clone(), 3, cut);
    let aa_f = to_action_angle(&f_birk, &s, normal.clone(), 3, cut);
    let xi = [0.09, 0.11];
    let hn = aa_h.evaluate(&xi);
    let bn = aa_birk.evaluate(&xi);
    let fnum = aa_f.evaluate(&xi);
    // quadratic energy part in action-angle variables
    let ctx = resonant_nf::ham::ConservationCtx::raw(&s, normal.clone());
    let ken = ctx.energy_ham(cut);
    let bracket = fnum.poisson(&ken).unwrap();
    // H + {F, K} should agree with H_Birk on the monomials F touches
    let corrected = hn.add(&bracket);
    let np = NormParams { s: 0.2, r: 0.3, a: 0.05, p: 1.0 };
    let mut diff_on_low = resonant_nf::ham::NumHam::new(2, normal.clone(), cut);
    for (m, c) in &corrected.sub(&bn).terms {
        // restrict to monomials with at most two normal factors
        if m.w_total() <= 2 {
            diff_on_low.add_term(m.clone(), *c);
        }
    }
    let resid = majorant_norm(&diff_on_low, &np);
    let scale = majorant_norm(&hn, &np);
    assert!(resid <= 1e-10 * scale, "Birkhoff cancellation residual {resid} vs {scale}");
}
