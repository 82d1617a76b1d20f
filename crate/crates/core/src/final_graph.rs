//! The final graph on (root, eigenvalue-branch) pairs: Y-edges read off the
//! eigenvalue catalog, the induced graph whose components index the blocks of
//! the reduced normal form, the second phase shift, and the assembly of the
//! block-diagonal normal form data.

use crate::blocks::{
    combinatorialize, eigenvalue_catalog, fitting, matrix_of_block, BlockError, BlockMatrixC,
    Catalog, CombinatorialBlock,
};
use crate::graph::{Components, NonGenericity};
use crate::ham::{Coeff, ConservationCtx, Cutoffs, Ham, Monomial, NumHam, SiteSet};
use crate::lattice::{linear_maps, EdgeColor, EdgeLabel, LatticeVector, TangentialSites};
use crate::numeric::{self, C64, CMat};
use crate::poly::{evaluate_vec, omega1};
use serde_json::{json, Value};
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FinalGraphError {
    #[error("internal consistency: path between {0:?} and {1:?} without a direct edge")]
    MissingClosureEdge(String, String),
    #[error("site {0:?} not covered by any block of the partition")]
    CoverViolation(LatticeVector),
    #[error("non-nilpotent residue {residue} above tolerance {tol}")]
    NonNilpotent { residue: f64, tol: f64 },
    #[error("exact conservation identity failed at site {0:?}")]
    ConservationIdentity(LatticeVector),
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error(transparent)]
    Poly(#[from] crate::poly::PolyError),
}

/// A Y-edge: an element of `Z^n` whose pairing with `omega^(1)` is realized as
/// a difference (black) or negated sum (red) of two catalog branches.
#[derive(Debug, Clone)]
pub struct YEdge {
    pub ell: Vec<i64>,
    pub color: EdgeColor,
    /// Branch id pairs `(theta, theta')` with `w1.l = theta' - theta` (black)
    /// or `w1.l = -(theta + theta')` (red) at every sample.
    pub witnesses: Vec<(usize, usize)>,
}

/// Candidate rejected because its coefficient estimate was nearly but not
/// exactly integral.
#[derive(Debug, Clone)]
pub struct RejectedYCandidate {
    pub pair: (usize, usize),
    pub estimate: Vec<f64>,
    pub reason: String,
}

/// Reads the Y-edge set off the catalog: for each branch pair form the
/// difference / negated-sum values, solve `omega^(1)(xi_s) . l = delta_s` in
/// least squares, round to integers and verify the identity at every sample.
pub fn y_edges(
    catalog: &Catalog,
    q: u32,
    n: usize,
    tol: f64,
) -> (Vec<YEdge>, Vec<RejectedYCandidate>) {
    let w1 = omega1(q, n);
    let w1_at: Vec<Vec<f64>> = catalog
        .xi_samples
        .iter()
        .map(|xi| evaluate_vec(&w1, xi).expect("positive samples"))
        .collect();
    let mut found: BTreeMap<(Vec<i64>, bool), YEdge> = BTreeMap::new();
    let mut rejected = Vec::new();
    let nb = catalog.branches.len();
    for b1 in 0..nb {
        for b2 in 0..nb {
            for red in [false, true] {
                if red && b2 < b1 {
                    continue; // unordered for the sum case
                }
                if !red && b1 == b2 {
                    continue; // delta = 0 -> l = 0, excluded
                }
                let th = &catalog.branches[b1].values;
                let tp = &catalog.branches[b2].values;
                let delta: Vec<C64> = th
                    .iter()
                    .zip(tp)
                    .map(|(a, b)| if red { -(a + b) } else { b - a })
                    .collect();
                // imaginary parts must cancel
                if delta.iter().any(|d| d.im.abs() > tol * d.norm().max(1.0)) {
                    continue;
                }
                let rhs: Vec<f64> = delta.iter().map(|d| d.re).collect();
                let Some(est) = least_squares(&w1_at, &rhs, n) else { continue };
                let rounded: Vec<i64> = est.iter().map(|x| x.round() as i64).collect();
                let near_int = est
                    .iter()
                    .zip(&rounded)
                    .all(|(x, &r)| (x - r as f64).abs() <= 0.05);
                // verify the identity at every sample with the rounded integers
                let verified = near_int
                    && w1_at.iter().zip(&rhs).all(|(w, &r)| {
                        let lhs: f64 = w.iter().zip(&rounded).map(|(wi, &li)| wi * li as f64).sum();
                        (lhs - r).abs() <= tol * r.abs().max(1.0)
                    });
                if !verified {
                    // report only near-misses: small residual but failed rounding
                    let resid: f64 = w1_at
                        .iter()
                        .zip(&rhs)
                        .map(|(w, &r)| {
                            let lhs: f64 =
                                w.iter().zip(&est).map(|(wi, xi)| wi * xi).sum();
                            (lhs - r).abs()
                        })
                        .fold(0.0, f64::max);
                    let scale = rhs.iter().map(|x| x.abs()).fold(f64::MIN_POSITIVE, f64::max);
                    if resid <= 1e-6 * scale && !near_int {
                        rejected.push(RejectedYCandidate {
                            pair: (b1, b2),
                            estimate: est,
                            reason: "non-integer coefficient estimate".into(),
                        });
                    }
                    continue;
                }
                let Ok(label) = EdgeLabel::new(rounded.clone()) else { continue };
                let want_color = if red { EdgeColor::Red } else { EdgeColor::Black };
                if label.color() != want_color {
                    continue;
                }
                found
                    .entry((rounded, red))
                    .or_insert_with(|| YEdge {
                        ell: label.ell().to_vec(),
                        color: want_color,
                        witnesses: vec![],
                    })
                    .witnesses
                    .push((b1, b2));
            }
        }
    }
    (found.into_values().collect(), rejected)
}

fn least_squares(rows: &[Vec<f64>], rhs: &[f64], n: usize) -> Option<Vec<f64>> {
    use nalgebra::{DMatrix, DVector};
    let m = rows.len();
    if m < n {
        return None;
    }
    let a = DMatrix::from_fn(m, n, |i, j| rows[i][j]);
    let b = DVector::from_fn(m, |i, _| rhs[i]);
    let ata = a.transpose() * &a;
    let atb = a.transpose() * b;
    ata.lu().solve(&atb).map(|x| x.iter().cloned().collect())
}

/// Everything the final-graph construction needs about one geometric block.
#[derive(Debug, Clone)]
pub struct BlockData {
    pub root: LatticeVector,
    /// Vertices in combinatorial order (slot i of the matrix <-> vertices[i]).
    pub vertices: Vec<LatticeVector>,
    pub sigma: Vec<i8>,
    /// Branch id per slot.
    pub branch_of_slot: Vec<usize>,
    pub has_red: bool,
    pub boundary: bool,
    /// Index into the deduplicated matrix list.
    pub matrix: usize,
    pub cb_key: String,
}

/// Deduplicated combinatorial data plus per-block marks; input of
/// [`build_final_graph`].
pub struct FinalGraphInput {
    pub sites: TangentialSites,
    pub q: u32,
    pub blocks: Vec<BlockData>,
    pub matrices: Vec<BlockMatrixC>,
    pub cbs: Vec<CombinatorialBlock>,
    pub catalog: Catalog,
}

/// Runs combinatorialization, matrix assembly and the eigenvalue catalog over
/// the components of a geometric graph.
pub fn prepare_blocks(
    comps: &Components,
    sites: &TangentialSites,
    q: u32,
    xi_samples: &[Vec<f64>],
    tol: f64,
) -> Result<FinalGraphInput, BlockError> {
    let n = sites.n();
    let mut cb_index: HashMap<String, usize> = HashMap::new();
    let mut cbs: Vec<CombinatorialBlock> = Vec::new();
    let mut matrices: Vec<BlockMatrixC> = Vec::new();
    let mut per_block: Vec<(usize, Vec<usize>, String)> = Vec::new(); // (matrix idx, perm, key)
    for b in &comps.blocks {
        let (cb, perm) = combinatorialize(b);
        let key = cb.key();
        let idx = *cb_index.entry(key.clone()).or_insert_with(|| {
            let idx = cbs.len();
            matrices.push(matrix_of_block(&cb, q, n));
            cbs.push(cb);
            idx
        });
        per_block.push((idx, perm, key));
    }
    let catalog = eigenvalue_catalog(&matrices, q, xi_samples, tol)?;
    let blocks = comps
        .blocks
        .iter()
        .zip(per_block)
        .map(|(b, (mi, perm, key))| BlockData {
            root: b.root_vertex().clone(),
            vertices: perm.iter().map(|&gi| b.vertices[gi].clone()).collect(),
            sigma: perm.iter().map(|&gi| b.sigma[gi]).collect(),
            branch_of_slot: catalog.slot_branch[mi].clone(),
            has_red: b.has_red(),
            boundary: b.boundary,
            matrix: mi,
            cb_key: key,
        })
        .collect();
    Ok(FinalGraphInput {
        sites: sites.clone(),
        q,
        blocks,
        matrices,
        cbs,
        catalog,
    })
}

/// A vertex `(r, theta)` of the final graph.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct FinalIndex {
    pub root: LatticeVector,
    pub branch: usize,
}

#[derive(Debug, Clone)]
pub struct FinalEdge {
    pub from: usize,
    pub to: usize,
    pub ell: Vec<i64>,
    pub color: EdgeColor,
}

pub struct FinalGraph {
    /// (block index, branch id) per vertex, sorted.
    pub vertices: Vec<(usize, usize)>,
    /// Oriented edges (black both ways with negated labels, red both ways with
    /// the same label).
    pub edges: Vec<FinalEdge>,
    pub diagnostics: Vec<NonGenericity>,
    /// Component id per vertex.
    pub component: Vec<usize>,
    pub n_components: usize,
}

/// Keeps a Y-edge between two block roots iff the exact integer momentum and
/// energy equations hold and a witness branch pair occurs in the two blocks;
/// verifies transitivity (paths imply direct edges) and the imposed
/// genericity (no same-root distinct-branch connections).
pub fn build_final_graph(
    input: &FinalGraphInput,
    y: &[YEdge],
    tol: f64,
) -> Result<FinalGraph, FinalGraphError> {
    let n = input.sites.n();
    let w1 = omega1(input.q, n);
    let w1_at: Vec<Vec<f64>> = input
        .catalog
        .xi_samples
        .iter()
        .map(|xi| evaluate_vec(&w1, xi).expect("positive samples"))
        .collect();

    // vertex set
    let mut vertices: Vec<(usize, usize)> = Vec::new();
    for (bi, b) in input.blocks.iter().enumerate() {
        let mut branches: Vec<usize> = b.branch_of_slot.clone();
        branches.sort_unstable();
        branches.dedup();
        for br in branches {
            vertices.push((bi, br));
        }
    }
    vertices.sort_unstable();
    let v_index: HashMap<(usize, usize), usize> =
        vertices.iter().cloned().enumerate().map(|(i, v)| (v, i)).collect();

    let root_index: HashMap<LatticeVector, Vec<usize>> = {
        let mut m: HashMap<LatticeVector, Vec<usize>> = HashMap::new();
        for (bi, b) in input.blocks.iter().enumerate() {
            m.entry(b.root.clone()).or_default().push(bi);
        }
        m
    };

    let branch_values =
        |id: usize| -> &Vec<C64> { &input.catalog.branches[id].values };

    let mut edges: Vec<FinalEdge> = Vec::new();
    let mut diagnostics: Vec<NonGenericity> = Vec::new();

    for (bi, b) in input.blocks.iter().enumerate() {
        for e in y {
            let (_, pi, pi2) = linear_maps(&e.ell, &input.sites).expect("lengths match");
            let (target, energy_ok): (LatticeVector, bool) = match e.color {
                EdgeColor::Black => {
                    let t = b.root.add(&pi);
                    let ok = pi2 + b.root.norm2() - t.norm2() == 0;
                    (t, ok)
                }
                EdgeColor::Red => {
                    let t = b.root.add(&pi).neg();
                    let ok = pi2 + b.root.norm2() + t.norm2() == 0;
                    (t, ok)
                }
            };
            if !energy_ok {
                continue;
            }
            let Some(candidates) = root_index.get(&target) else { continue };
            for &bj in candidates {
                let other = &input.blocks[bj];
                // witness: branches theta in b, theta' in other with
                // w1.l + theta - theta' = 0 (black) / w1.l + theta + theta' = 0 (red)
                let mut brs_b: Vec<usize> = b.branch_of_slot.clone();
                brs_b.sort_unstable();
                brs_b.dedup();
                let mut brs_o: Vec<usize> = other.branch_of_slot.clone();
                brs_o.sort_unstable();
                brs_o.dedup();
                for &th in &brs_b {
                    for &tp in &brs_o {
                        let ok = (0..w1_at.len()).all(|s| {
                            let wl: f64 = w1_at[s]
                                .iter()
                                .zip(&e.ell)
                                .map(|(w, &l)| w * l as f64)
                                .sum();
                            let (a, c) = (branch_values(th)[s], branch_values(tp)[s]);
                            let resid = match e.color {
                                EdgeColor::Black => C64::new(wl, 0.0) + a - c,
                                EdgeColor::Red => C64::new(wl, 0.0) + a + c,
                            };
                            resid.norm() <= tol * wl.abs().max(1.0)
                        });
                        if !ok {
                            continue;
                        }
                        if bi == bj && th != tp {
                            diagnostics.push(NonGenericity::SameRootConnected {
                                root: b.root.clone(),
                            });
                            continue;
                        }
                        if bi == bj && th == tp {
                            continue; // self edge carries no information
                        }
                        edges.push(FinalEdge {
                            from: v_index[&(bi, th)],
                            to: v_index[&(bj, tp)],
                            ell: e.ell.clone(),
                            color: e.color,
                        });
                    }
                }
            }
        }
    }

    // ambiguous double-color pairs
    {
        let mut seen: HashMap<(usize, usize), EdgeColor> = HashMap::new();
        for e in &edges {
            let key = (e.from.min(e.to), e.from.max(e.to));
            match seen.get(&key) {
                Some(c) if *c != e.color => {
                    let (b, _) = vertices[e.from];
                    diagnostics.push(NonGenericity::AmbiguousFinalEdge {
                        root: input.blocks[b].root.clone(),
                    });
                }
                _ => {
                    seen.insert(key, e.color);
                }
            }
        }
    }

    // components via union-find
    let mut parent: Vec<usize> = (0..vertices.len()).collect();
    fn find(p: &mut Vec<usize>, i: usize) -> usize {
        if p[i] != i {
            let r = find(p, p[i]);
            p[i] = r;
        }
        p[i]
    }
    for e in &edges {
        let (a, b) = (find(&mut parent, e.from), find(&mut parent, e.to));
        if a != b {
            parent[a] = b;
        }
    }
    let mut comp_ids: BTreeMap<usize, usize> = BTreeMap::new();
    let mut component = vec![0usize; vertices.len()];
    for i in 0..vertices.len() {
        let r = find(&mut parent, i);
        let next = comp_ids.len();
        let id = *comp_ids.entry(r).or_insert(next);
        component[i] = id;
    }

    // transitivity: within each component every pair must be directly joined
    let mut by_comp: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in component.iter().enumerate() {
        by_comp.entry(c).or_default().push(i);
    }
    let has_edge = |a: usize, b: usize, edges: &[FinalEdge]| {
        edges.iter().any(|e| (e.from == a && e.to == b) || (e.from == b && e.to == a))
    };
    for members in by_comp.values() {
        if members.len() < 2 {
            continue;
        }
        for (ii, &a) in members.iter().enumerate() {
            for &b in &members[ii + 1..] {
                if !has_edge(a, b, &edges) {
                    return Err(FinalGraphError::MissingClosureEdge(
                        format!("{:?}", vertices[a]),
                        format!("{:?}", vertices[b]),
                    ));
                }
            }
        }
    }

    Ok(FinalGraph {
        vertices,
        edges,
        diagnostics,
        component,
        n_components: comp_ids.len(),
    })
}

/// Per normal site data of the assembled normal form.
#[derive(Debug, Clone)]
pub struct SiteInfo {
    pub site: LatticeVector,
    pub block: usize,
    pub slot: usize,
    pub comp: usize,
    pub sigma: i8,
    pub s: i8,
    pub ell_k: Vec<i64>,
    pub branch: usize,
    pub geo_root: LatticeVector,
}

/// One block `D_t` of the normal form.
#[derive(Debug, Clone)]
pub struct NfComponent {
    pub root: LatticeVector,
    pub branch: usize,
    /// Site ids of `D_t`, ordered by (block, slot).
    pub members: Vec<usize>,
    pub in_t_f: bool,
    pub boundary: bool,
    /// Translation-family key for good components.
    pub family_key: String,
}

/// The assembled normal-form skeleton: partition of the normal sites into the
/// blocks `D_t`, colors `s(k)`, connecting labels `ell_k` and the split into
/// the finite bad set and the good set.
pub struct NormalFormData {
    pub sites: TangentialSites,
    pub q: u32,
    pub site_set: Arc<SiteSet>,
    pub input: FinalGraphInput,
    pub graph: FinalGraph,
    pub components: Vec<NfComponent>,
    pub site_info: Vec<SiteInfo>,
    pub t_f: Vec<usize>,
    pub t_g: Vec<usize>,
}

/// Partitions the sites: `T_f` components touch a red edge or a red block,
/// roots are lex-min (root, branch) pairs, `ell_k` is the label of the direct
/// edge to the component root and `s(k) = sigma(k)(eta(ell_k) + 1)`.
pub fn finalize_partition(
    input: FinalGraphInput,
    graph: FinalGraph,
    site_set: Arc<SiteSet>,
) -> Result<NormalFormData, FinalGraphError> {
    let sites = input.sites.clone();
    let q = input.q;
    // component id -> lex-min (root, branch) vertex
    let mut comp_vertices: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (vi, &c) in graph.component.iter().enumerate() {
        comp_vertices.entry(c).or_default().push(vi);
    }
    let mut components: Vec<NfComponent> = Vec::new();
    let mut comp_of_graph_comp: HashMap<usize, usize> = HashMap::new();
    for (&cid, members) in comp_vertices.iter() {
        let root_vi = *members
            .iter()
            .min_by_key(|&&vi| {
                let (b, br) = graph.vertices[vi];
                (input.blocks[b].root.clone(), br)
            })
            .expect("nonempty component");
        let (rb, rbr) = graph.vertices[root_vi];
        let in_t_f = members.iter().any(|&vi| {
            let (b, _) = graph.vertices[vi];
            input.blocks[b].has_red
        }) || graph
            .edges
            .iter()
            .any(|e| e.color == EdgeColor::Red && graph.component[e.from] == cid);
        let boundary = members.iter().any(|&vi| input.blocks[graph.vertices[vi].0].boundary);
        // family key: member markings relative to the root
        let mut marks: Vec<String> = members
            .iter()
            .map(|&vi| {
                let (b, br) = graph.vertices[vi];
                let off = input.blocks[b].root.sub(&input.blocks[rb].root);
                format!("{}@{:?}#{}", input.blocks[b].cb_key, off.0, br)
            })
            .collect();
        marks.sort();
        comp_of_graph_comp.insert(cid, components.len());
        components.push(NfComponent {
            root: input.blocks[rb].root.clone(),
            branch: rbr,
            members: vec![],
            in_t_f,
            boundary,
            family_key: marks.join(";"),
        });
    }

    let v_index: HashMap<(usize, usize), usize> = graph
        .vertices
        .iter()
        .cloned()
        .enumerate()
        .map(|(i, v)| (v, i))
        .collect();

    // per site data
    let mut site_info: Vec<Option<SiteInfo>> = vec![None; site_set.len()];
    for (bi, b) in input.blocks.iter().enumerate() {
        for (slot, k) in b.vertices.iter().enumerate() {
            let Some(sid) = site_set.id_of(k) else {
                continue; // vertex outside the registered site set
            };
            let br = b.branch_of_slot[slot];
            let vi = v_index[&(bi, br)];
            let cid = graph.component[vi];
            let t = comp_of_graph_comp[&cid];
            let comp = &components[t];
            let (ell_k, eta1): (Vec<i64>, i64) = if b.root == comp.root && br == comp.branch {
                (vec![0; sites.n()], 1)
            } else {
                // the direct edge from (r(k), theta(k)) to the component root
                let root_vi = v_index[&(
                    input
                        .blocks
                        .iter()
                        .position(|bb| bb.root == comp.root && {
                            let mut brs = bb.branch_of_slot.clone();
                            brs.sort_unstable();
                            brs.dedup();
                            brs.contains(&comp.branch)
                        })
                        .expect("root block exists"),
                    comp.branch,
                )];
                let e = graph
                    .edges
                    .iter()
                    .find(|e| e.from == vi && e.to == root_vi)
                    .expect("transitivity guarantees a direct edge");
                let eta: i64 = e.ell.iter().sum();
                (e.ell.clone(), eta + 1)
            };
            // exact identities: pi(ell_k) + r(k) = (eta+1) r_t and the energy version
            let (_, pi, pi2) = linear_maps(&ell_k, &sites).expect("length");
            if pi.add(&b.root) != comp.root.scale(eta1)
                || pi2 + b.root.norm2() != eta1 * comp.root.norm2()
            {
                return Err(FinalGraphError::ConservationIdentity(k.clone()));
            }
            let s = b.sigma[slot] as i64 * eta1;
            site_info[sid] = Some(SiteInfo {
                site: k.clone(),
                block: bi,
                slot,
                comp: t,
                sigma: b.sigma[slot],
                s: s as i8,
                ell_k,
                branch: br,
                geo_root: b.root.clone(),
            });
        }
    }
    let site_info: Vec<SiteInfo> = site_info
        .into_iter()
        .enumerate()
        .map(|(sid, si)| si.ok_or_else(|| FinalGraphError::CoverViolation(site_set.site(sid).clone())))
        .collect::<Result<_, _>>()?;

    // fill members ordered by (block, slot)
    let mut order: Vec<usize> = (0..site_info.len()).collect();
    order.sort_by_key(|&sid| (site_info[sid].block, site_info[sid].slot));
    for &sid in &order {
        let t = site_info[sid].comp;
        components[t].members.push(sid);
    }
    // s(k) = +1 on good components
    let mut t_f = Vec::new();
    let mut t_g = Vec::new();
    for (t, c) in components.iter().enumerate() {
        if c.in_t_f {
            t_f.push(t);
        } else {
            t_g.push(t);
            debug_assert!(c.members.iter().all(|&sid| site_info[sid].s == 1));
        }
    }

    Ok(NormalFormData {
        sites,
        q,
        site_set,
        input,
        graph,
        components,
        site_info,
        t_f,
        t_g,
    })
}

impl NormalFormData {
    pub fn n(&self) -> usize {
        self.sites.n()
    }

    /// Conservation context of the final coordinates: weights `s(k)`,
    /// `s(k) r_t(k)`, `s(k) |r_t(k)|^2`.
    pub fn final_conservation(&self) -> ConservationCtx {
        let mass_w: Vec<i64> = self.site_info.iter().map(|si| si.s as i64).collect();
        let mom_w: Vec<LatticeVector> = self
            .site_info
            .iter()
            .map(|si| self.components[si.comp].root.scale(si.s as i64))
            .collect();
        let energy_w: Vec<i64> = self
            .site_info
            .iter()
            .map(|si| si.s as i64 * self.components[si.comp].root.norm2())
            .collect();
        ConservationCtx {
            tangential: self.sites.clone(),
            sites: self.site_set.clone(),
            mass_w,
            mom_w,
            energy_w,
        }
    }

    /// Conservation context of the coordinates before the final phase shift:
    /// weights `sigma(k)`, `sigma(k) r(k)`, `sigma(k) |r(k)|^2`.
    pub fn pre_shift_conservation(&self) -> ConservationCtx {
        let mass_w: Vec<i64> = self.site_info.iter().map(|si| si.sigma as i64).collect();
        let mom_w: Vec<LatticeVector> = self
            .site_info
            .iter()
            .map(|si| si.geo_root.scale(si.sigma as i64))
            .collect();
        let energy_w: Vec<i64> = self
            .site_info
            .iter()
            .map(|si| si.sigma as i64 * si.geo_root.norm2())
            .collect();
        ConservationCtx {
            tangential: self.sites.clone(),
            sites: self.site_set.clone(),
            mass_w,
            mom_w,
            energy_w,
        }
    }

    pub fn to_json(&self) -> Value {
        json!({
            "q": self.q,
            "t_f": self.t_f,
            "t_g_len": self.t_g.len(),
            "components": self.components.iter().map(|c| json!({
                "root": c.root.0,
                "branch": c.branch,
                "members": c.members.iter().map(|&sid| self.site_set.site(sid).0.clone()).collect::<Vec<_>>(),
                "in_t_f": c.in_t_f,
                "boundary": c.boundary,
                "family": c.family_key,
            })).collect::<Vec<_>>(),
            "sites": self.site_info.iter().map(|si| json!({
                "k": si.site.0,
                "s": si.s,
                "sigma": si.sigma,
                "ell_k": si.ell_k,
                "branch": si.branch,
                "component": si.comp,
            })).collect::<Vec<_>>(),
        })
    }
}

/// Numeric evaluation of the normal form at one parameter sample: frequencies
/// `omega(xi)`, block frequencies `theta_t(xi)` and matrices
/// `Omega_t = (|r_t|^2 + theta_t) I + Omega_nil`.
pub struct NormalFormEval {
    pub xi: Vec<f64>,
    pub omega: Vec<f64>,
    pub theta: Vec<C64>,
    pub omega_t: Vec<CMat>,
}

/// Assembles the numeric normal form at `xi`. The nilpotent parts are the
/// non-semisimple residues of the Fitting decompositions of the contributing
/// block matrices, transported (with sign) onto the final basis; the
/// conservation identities and nilpotency are verified.
pub fn assemble_normal_form(
    nf: &NormalFormData,
    xi: &[f64],
    tol: f64,
) -> Result<NormalFormEval, FinalGraphError> {
    let n = nf.n();
    let w1 = omega1(nf.q, n);
    let mut omega = Vec::with_capacity(n);
    for i in 0..n {
        omega.push(nf.sites.site(i).norm2() as f64 + w1[i].evaluate(xi)?);
    }

    // per-matrix fitting at xi (only matrices that occur)
    let mut fits: HashMap<usize, crate::blocks::FittingResult> = HashMap::new();
    let mut theta = Vec::new();
    let mut omega_t = Vec::new();
    for comp in &nf.components {
        // theta_t value at xi from its defining branch: evaluate the source
        // block matrix and pick the slot in sorted order
        let branch = &nf.input.catalog.branches[comp.branch];
        let (mi, slot) = branch.sources[0];
        let a = nf.input.matrices[mi].evaluate(xi)?;
        let mut eigs = numeric::eigenvalues_real(&a);
        eigs.sort_by(|a, b| {
            (a.re, a.im)
                .partial_cmp(&(b.re, b.im))
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let th = eigs[slot];
        theta.push(th);

        let dt = comp.members.len();
        let shift = C64::new(comp.root.norm2() as f64, 0.0) + th;
        let mut m = CMat::from_diagonal_element(dt, dt, shift);
        // nilpotent residues block by block
        let mut pos_of_site: HashMap<usize, usize> = HashMap::new();
        for (pos, &sid) in comp.members.iter().enumerate() {
            pos_of_site.insert(sid, pos);
        }
        // group members by geometric block
        let mut by_block: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &sid in &comp.members {
            by_block.entry(nf.site_info[sid].block).or_default().push(sid);
        }
        for (bi, sids) in by_block {
            let b = &nf.input.blocks[bi];
            let mi = b.matrix;
            if !fits.contains_key(&mi) {
                let fit = fitting(&nf.input.matrices[mi], &nf.input.cbs[mi].sigma, xi, 1e-8)?;
                fits.insert(mi, fit);
            }
            let fit = &fits[&mi];
            // conjugated matrix B = U C U^{-1}; cluster ranges follow the
            // sorted slot order, so slot r pairs with cb vertex r
            let a = numeric::to_complex(&nf.input.matrices[mi].evaluate(xi)?);
            let v = numeric::inverse(&fit.u).expect("U invertible");
            let bmat = &fit.u * &a * &v;
            let mut start = 0usize;
            for &(_, mult) in &fit.clusters {
                let range = start..start + mult;
                start += mult;
                for r in range.clone() {
                    for c in range.clone() {
                        if r == c {
                            continue;
                        }
                        let (Some(sr), Some(sc)) = (
                            nf.site_set.id_of(&b.vertices[r]),
                            nf.site_set.id_of(&b.vertices[c]),
                        ) else {
                            continue;
                        };
                        let (Some(&pr), Some(&pc)) =
                            (pos_of_site.get(&sr), pos_of_site.get(&sc))
                        else {
                            continue;
                        };
                        m[(pr, pc)] = bmat[(r, c)];
                    }
                }
            }
            let _ = sids;
        }
        // verify nilpotency of the non-scalar residue
        let dt_c = CMat::from_diagonal_element(dt, dt, shift);
        let nil = &m - &dt_c;
        let mut npow = nil.clone();
        for _ in 1..dt.max(1) {
            npow = &npow * &nil;
        }
        let scale = nil.norm().max(1.0);
        if npow.norm() > tol * scale.powi(dt.max(1) as i32) {
            return Err(FinalGraphError::NonNilpotent { residue: npow.norm(), tol });
        }
        omega_t.push(m);
    }

    // exact conservation identities per site (Eq-level check of the mass,
    // momentum and quadratic-energy displays)
    for si in &nf.site_info {
        let comp = &nf.components[si.comp];
        let (eta, pi, pi2) = linear_maps(&si.ell_k, &nf.sites).expect("length");
        let sig = si.sigma as i64;
        // mass: sigma(k) eta + sigma(k) = s(k)
        if sig * eta + sig != si.s as i64 {
            return Err(FinalGraphError::ConservationIdentity(si.site.clone()));
        }
        // momentum: sigma(k)(pi(ell_k) + r(k)) = s(k) r_t
        if pi.add(&si.geo_root).scale(sig) != comp.root.scale(si.s as i64) {
            return Err(FinalGraphError::ConservationIdentity(si.site.clone()));
        }
        // energy: sigma(k)(pi2(ell_k) + |r(k)|^2) = s(k) |r_t|^2
        if sig * (pi2 + si.geo_root.norm2()) != si.s as i64 * comp.root.norm2() {
            return Err(FinalGraphError::ConservationIdentity(si.site.clone()));
        }
    }

    Ok(NormalFormEval { xi: xi.to_vec(), omega, theta, omega_t })
}

/// Builds the normal form `N` as a numeric Hamiltonian in the final
/// coordinates: `omega(xi) . y + sum_t Q_t` with
/// `Q_t = sum_{h,k} s(k) (Omega_t)_{hk} u_h ubar_k`, `u_k = z_k^{s(k)}`.
pub fn normal_form_ham(
    nf: &NormalFormData,
    eval: &NormalFormEval,
    cutoffs: Cutoffs,
) -> NumHam {
    let n = nf.n();
    let mut h = NumHam::new(n, nf.site_set.clone(), cutoffs);
    for j in 0..n {
        h.add_term(Monomial::y(n, j), C64::new(eval.omega[j], 0.0));
    }
    for (t, comp) in nf.components.iter().enumerate() {
        let m = &eval.omega_t[t];
        for (ph, &sh) in comp.members.iter().enumerate() {
            for (pk, &sk) in comp.members.iter().enumerate() {
                let c = m[(ph, pk)];
                if c.norm() == 0.0 {
                    continue;
                }
                let s_k = nf.site_info[sk].s;
                let coeff = c * s_k as f64;
                // u_h ubar_k = z_h^{s(h)} z_k^{-s(k)}
                let mh = Monomial::z_pm(n, sh, nf.site_info[sh].s);
                let mk = Monomial::z_pm(n, sk, -s_k);
                h.add_term(mh.mul(&mk), coeff);
            }
        }
    }
    h
}

/// The exact phase-shift substitution
/// `z_k = e^{-i s(k) ell_k . x} z'_k`, `y = y' + sum_k s(k) ell_k |z'_k|^2`;
/// monomials exceeding the cutoffs are accounted in the truncation debt.
pub fn phase_shift<C: Coeff>(h: &Ham<C>, nf: &NormalFormData) -> Ham<C> {
    let n = h.n;
    let mut out = Ham::new(n, h.sites.clone(), h.cutoffs);
    out.truncation_debt = h.truncation_debt;
    for (m, c) in &h.terms {
        // frequency shift: nu' = nu - sum_k (alpha_k - beta_k) s(k) ell_k
        let mut nu = m.nu.clone();
        for &(id, p) in &m.z {
            let si = &nf.site_info[id as usize];
            for (j, &l) in si.ell_k.iter().enumerate() {
                nu[j] -= p as i32 * si.s as i32 * l as i32;
            }
        }
        for &(id, p) in &m.zbar {
            let si = &nf.site_info[id as usize];
            for (j, &l) in si.ell_k.iter().enumerate() {
                nu[j] += p as i32 * si.s as i32 * l as i32;
            }
        }
        let mut base = m.clone();
        base.nu = nu;
        base.y_pow = vec![0; n];
        // expand prod_j (y_j + D_j)^{p_j}
        expand_y(&base, &m.y_pow, 0, c.clone(), nf, &mut out);
    }
    out
}

fn expand_y<C: Coeff>(
    base: &Monomial,
    y_pow: &[u8],
    j: usize,
    coeff: C,
    nf: &NormalFormData,
    out: &mut Ham<C>,
) {
    if j == y_pow.len() {
        out.add_term(base.clone(), coeff);
        return;
    }
    let p = y_pow[j];
    if p == 0 {
        expand_y(base, y_pow, j + 1, coeff, nf, out);
        return;
    }
    // (y_j + D_j)^p, D_j = sum_k s(k) (ell_k)_j |z_k|^2; expand one factor at a
    // time to keep the code simple (p is tiny in practice).
    let mut with_y = base.clone();
    with_y.y_pow[j] += 1;
    let mut rest = y_pow.to_vec();
    rest[j] -= 1;
    expand_y(&with_y, &rest, j, coeff.clone(), nf, out);
    for (id, si) in nf.site_info.iter().enumerate() {
        let w = si.s as i64 * si.ell_k[j];
        if w == 0 {
            continue;
        }
        let mut with_z = base.clone();
        let extra = {
            let mut e = Monomial::constant(base.nu.len());
            e.z = vec![(id as u32, 1)];
            e.zbar = vec![(id as u32, 1)];
            e
        };
        with_z = with_z.mul(&extra);
        expand_y(&with_z, &rest, j, coeff.scale_i64(w), nf, out);
    }
}

/// JSON dump of the final graph: vertices, edges, partitions.
pub fn final_graph_to_json(nf: &NormalFormData) -> Value {
    json!({
        "vertices": nf.graph.vertices.iter().map(|&(b, br)| json!({
            "root": nf.input.blocks[b].root.0,
            "branch": br,
        })).collect::<Vec<_>>(),
        "edges": nf.graph.edges.iter().map(|e| json!({
            "from": e.from,
            "to": e.to,
            "ell": e.ell,
            "color": format!("{:?}", e.color),
        })).collect::<Vec<_>>(),
        "normal_form": nf.to_json(),
    })
}
