//! The geometric graph `Gamma_{S,X_q}` on a finite lattice box: construction,
//! connected components (geometric blocks), genericity checks, and the root /
//! color / phase-vector data attached to each block.

use crate::intlin;
use crate::lattice::{
    enumerate_edges, linear_maps, EdgeColor, EdgeLabel, LatticeVector, TangentialSites,
};
use serde_json::{json, Value};
use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("box radius {got} is smaller than max |j_i|_inf = {need}")]
    BoxTooSmall { need: i64, got: i64 },
    #[error(transparent)]
    Lattice(#[from] crate::lattice::LatticeError),
}

/// A non-genericity finding. These are data (reported, exit code 2 at the CLI),
/// not crashes.
#[derive(Debug, Clone, PartialEq)]
pub enum NonGenericity {
    /// An edge label with `pi(l) = 0` and `pi2(l) = 0`; every lattice point
    /// would carry a black self-loop.
    DegenerateLabel { ell: Vec<i64> },
    /// A red edge with equal endpoints.
    RedLoop { vertex: LatticeVector },
    /// The component containing `j_1` is not exactly `S`.
    SpecialComponentNotS { found: Vec<LatticeVector> },
    /// Color or phase vector depends on the path from the root.
    PathIndependence { vertex: LatticeVector },
    /// `|L(k)|_1` exceeds the bound `4 q d`.
    PhaseVectorBound { vertex: LatticeVector, l1: i64, bound: i64 },
    /// A block with more than `2d + 1` vertices.
    OversizeBlock { vertices: Vec<LatticeVector> },
    /// A red-free block with affinely dependent vertices.
    AffineDependence { vertices: Vec<LatticeVector> },
    /// Translation family whose root differences have too large a rank.
    FamilyRank { representative: LatticeVector, expected: usize, got: usize },
    /// A vertex pair joined by both a black and a red final edge.
    AmbiguousFinalEdge { root: LatticeVector },
    /// Two distinct eigenvalue branches at one root joined by a final edge.
    SameRootConnected { root: LatticeVector },
    /// Transitivity closure of the final graph produced a missing edge.
    MissingClosureEdge { from: LatticeVector, to: LatticeVector },
}

/// Oriented black edge `(h, k, l)` with `k = h + pi(l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlackEdge {
    pub h: LatticeVector,
    pub k: LatticeVector,
    pub ell: EdgeLabel,
}

/// Unoriented red edge `{a, b}` (stored with `a <= b`).
#[derive(Debug, Clone, PartialEq)]
pub struct RedEdge {
    pub a: LatticeVector,
    pub b: LatticeVector,
    pub ell: EdgeLabel,
}

pub struct GeometricGraph {
    pub sites: TangentialSites,
    pub q: u32,
    pub box_radius: i64,
    pub black_edges: Vec<BlackEdge>,
    pub red_edges: Vec<RedEdge>,
    pub diagnostics: Vec<NonGenericity>,
}

/// Builds the graph on the box `|k|_inf <= box_radius`. Black partners are
/// found by solving `k = h + pi(l)` and checking the energy equation; red
/// partners by exact enumeration of the integer sphere.
pub fn build_graph(
    sites: &TangentialSites,
    q: u32,
    box_radius: i64,
) -> Result<GeometricGraph, GraphError> {
    let need = sites.max_linf();
    if box_radius < need {
        return Err(GraphError::BoxTooSmall { need, got: box_radius });
    }
    let d = sites.d();
    let edges = enumerate_edges(q, sites.n());
    let mut black_edges = Vec::new();
    let mut red_edges = Vec::new();
    let mut diagnostics = Vec::new();

    for ell in &edges.black {
        let (_, pi, pi2) = linear_maps(ell.ell(), sites)?;
        if pi.is_zero() && pi2 == 0 {
            diagnostics.push(NonGenericity::DegenerateLabel { ell: ell.ell().to_vec() });
            continue;
        }
        // |h|^2 - |k|^2 = -pi2 with k = h + pi: 2 h.pi + |pi|^2 + pi2 = 0
        for h in box_points(d, box_radius) {
            let k = h.add(&pi);
            if k.linf() <= box_radius && pi2 + h.norm2() - k.norm2() == 0 {
                black_edges.push(BlackEdge { h, k, ell: ell.clone() });
            }
        }
    }

    for ell in &edges.red {
        let (_, pi, pi2) = linear_maps(ell.ell(), sites)?;
        let c = pi.neg(); // h + k = c
        let e = -pi2; // |h|^2 + |k|^2 = e
        let r2 = 2 * e - c.norm2(); // |2h - c|^2 = r2
        if r2 < 0 {
            continue;
        }
        for x in sphere_points(d, r2) {
            // parity: x = 2h - c componentwise
            if x.0.iter().zip(&c.0).any(|(xi, ci)| (xi - ci).rem_euclid(2) != 0) {
                continue;
            }
            let h = LatticeVector(x.0.iter().zip(&c.0).map(|(xi, ci)| (xi + ci) / 2).collect());
            let k = c.sub(&h);
            if h > k {
                continue; // each unordered pair once
            }
            if h == k {
                diagnostics.push(NonGenericity::RedLoop { vertex: h });
                continue;
            }
            if h.linf() <= box_radius && k.linf() <= box_radius {
                red_edges.push(RedEdge { a: h, b: k, ell: ell.clone() });
            }
        }
    }

    // deterministic order
    black_edges.sort_by(|a, b| (&a.h, &a.k, a.ell.ell()).cmp(&(&b.h, &b.k, b.ell.ell())));
    red_edges.sort_by(|a, b| (&a.a, &a.b, a.ell.ell()).cmp(&(&b.a, &b.b, b.ell.ell())));

    Ok(GeometricGraph { sites: sites.clone(), q, box_radius, black_edges, red_edges, diagnostics })
}

fn box_points(d: usize, radius: i64) -> Vec<LatticeVector> {
    let mut out = Vec::new();
    let mut cur = vec![0i64; d];
    fn rec(d: usize, radius: i64, idx: usize, cur: &mut Vec<i64>, out: &mut Vec<LatticeVector>) {
        if idx == d {
            out.push(LatticeVector(cur.clone()));
            return;
        }
        for v in -radius..=radius {
            cur[idx] = v;
            rec(d, radius, idx + 1, cur, out);
        }
        cur[idx] = 0;
    }
    rec(d, radius, 0, &mut cur, &mut out);
    out
}

/// All integer points with squared norm exactly `r2`.
pub fn sphere_points(d: usize, r2: i64) -> Vec<LatticeVector> {
    let mut out = Vec::new();
    let mut cur = vec![0i64; d];
    fn rec(d: usize, rest: i64, idx: usize, cur: &mut Vec<i64>, out: &mut Vec<LatticeVector>) {
        if idx == d {
            if rest == 0 {
                out.push(LatticeVector(cur.clone()));
            }
            return;
        }
        let bound = (rest as f64).sqrt() as i64 + 1;
        for v in -bound..=bound {
            if v * v <= rest {
                cur[idx] = v;
                rec(d, rest - v * v, idx + 1, cur, out);
            }
        }
        cur[idx] = 0;
    }
    rec(d, r2, 0, &mut cur, &mut out);
    out
}

/// A connected component of the geometric graph, with root, colors and phase
/// vectors filled in by [`root_data`].
#[derive(Debug, Clone)]
pub struct GeometricBlock {
    /// Sorted lexicographically; `vertices[root]` is the root (lex-min).
    pub vertices: Vec<LatticeVector>,
    /// Edges as index pairs into `vertices`; black edges oriented `h -> k`.
    pub black: Vec<(usize, usize, EdgeLabel)>,
    pub red: Vec<(usize, usize, EdgeLabel)>,
    pub boundary: bool,
    pub root: usize,
    /// Color `sigma(k)` per vertex (+1 / -1); red-edge parity from the root.
    pub sigma: Vec<i8>,
    /// Phase vector `L(k)` per vertex.
    pub l_of: Vec<Vec<i64>>,
}

impl GeometricBlock {
    pub fn root_vertex(&self) -> &LatticeVector {
        &self.vertices[self.root]
    }

    pub fn has_red(&self) -> bool {
        !self.red.is_empty()
    }

    pub fn size(&self) -> usize {
        self.vertices.len()
    }
}

pub struct Components {
    /// The component containing `j_1` (must equal `S` for generic sites).
    pub special: GeometricBlock,
    /// All other components, singletons included, sorted by root.
    pub blocks: Vec<GeometricBlock>,
    pub diagnostics: Vec<NonGenericity>,
}

/// Standard connected components; fills root data for each block and flags
/// components touching the shell of width `2q * max|j_i|_inf`.
pub fn components(g: &GeometricGraph) -> Components {
    let sites = &g.sites;
    let mut adj: HashMap<LatticeVector, Vec<usize>> = HashMap::new();
    // edge list: (a, b, ell, color) with black oriented a->b
    let mut edges: Vec<(LatticeVector, LatticeVector, EdgeLabel, EdgeColor)> = Vec::new();
    for e in &g.black_edges {
        edges.push((e.h.clone(), e.k.clone(), e.ell.clone(), EdgeColor::Black));
    }
    for e in &g.red_edges {
        edges.push((e.a.clone(), e.b.clone(), e.ell.clone(), EdgeColor::Red));
    }
    for (i, (a, b, _, _)) in edges.iter().enumerate() {
        adj.entry(a.clone()).or_default().push(i);
        adj.entry(b.clone()).or_default().push(i);
    }

    let shell_width = 2 * g.q as i64 * sites.max_linf();
    let interior = g.box_radius - shell_width;
    let mut seen: BTreeSet<LatticeVector> = BTreeSet::new();
    let mut raw_blocks: Vec<GeometricBlock> = Vec::new();
    let mut diagnostics = g.diagnostics.clone();

    // components spanned by edges
    let mut touched: Vec<LatticeVector> = adj.keys().cloned().collect();
    touched.sort();
    for start in &touched {
        if seen.contains(start) {
            continue;
        }
        let mut verts: BTreeSet<LatticeVector> = BTreeSet::new();
        let mut queue = VecDeque::new();
        queue.push_back(start.clone());
        verts.insert(start.clone());
        let mut comp_edges: BTreeSet<usize> = BTreeSet::new();
        while let Some(v) = queue.pop_front() {
            if let Some(es) = adj.get(&v) {
                for &ei in es {
                    comp_edges.insert(ei);
                    let (a, b, _, _) = &edges[ei];
                    for w in [a, b] {
                        if verts.insert(w.clone()) {
                            queue.push_back(w.clone());
                        }
                    }
                }
            }
        }
        seen.extend(verts.iter().cloned());
        let vertices: Vec<LatticeVector> = verts.into_iter().collect();
        let index: HashMap<&LatticeVector, usize> =
            vertices.iter().enumerate().map(|(i, v)| (v, i)).collect();
        let mut black = Vec::new();
        let mut red = Vec::new();
        for &ei in &comp_edges {
            let (a, b, ell, color) = &edges[ei];
            let (ia, ib) = (index[a], index[b]);
            match color {
                EdgeColor::Black => black.push((ia, ib, ell.clone())),
                EdgeColor::Red => red.push((ia, ib, ell.clone())),
            }
        }
        let boundary = vertices.iter().any(|v| v.linf() > interior);
        raw_blocks.push(GeometricBlock {
            vertices,
            black,
            red,
            boundary,
            root: 0,
            sigma: vec![],
            l_of: vec![],
        });
    }

    // singletons
    for p in box_points(sites.d(), g.box_radius) {
        if !seen.contains(&p) {
            let boundary = p.linf() > interior;
            raw_blocks.push(GeometricBlock {
                vertices: vec![p],
                black: vec![],
                red: vec![],
                boundary,
                root: 0,
                sigma: vec![],
                l_of: vec![],
            });
        }
    }

    // split off the special component (the one containing j_1) before rooting:
    // colors and phase vectors are only defined on the normal-site components
    let j1 = sites.site(0);
    let pos = raw_blocks
        .iter()
        .position(|b| b.vertices.contains(j1))
        .expect("box contains j_1");
    let special = raw_blocks.remove(pos);

    for b in &mut raw_blocks {
        if let Err(diag) = root_data(b, sites, g.q) {
            diagnostics.push(diag);
        }
    }

    raw_blocks.sort_by(|a, b| a.root_vertex().cmp(b.root_vertex()));
    let mut s_sorted: Vec<LatticeVector> = sites.sites().to_vec();
    s_sorted.sort();
    if special.vertices != s_sorted {
        diagnostics.push(NonGenericity::SpecialComponentNotS { found: special.vertices.clone() });
    }
    // drop the other components meeting S; for generic sites there are none
    let blocks: Vec<GeometricBlock> = raw_blocks
        .into_iter()
        .filter(|b| !b.vertices.iter().any(|v| sites.contains(v)))
        .collect();

    Components { special, blocks, diagnostics }
}

/// Fills root (lex-min vertex), colors and phase vectors by walking a spanning
/// tree, then verifies the defining identities at every vertex and the
/// path-independence on every non-tree edge.
pub fn root_data(
    block: &mut GeometricBlock,
    sites: &TangentialSites,
    q: u32,
) -> Result<(), NonGenericity> {
    let n = sites.n();
    let m = block.vertices.len();
    block.root = 0; // vertices sorted lex, so index 0 is lex-min
    let mut sigma: Vec<i8> = vec![0; m];
    let mut l_of: Vec<Option<Vec<i64>>> = vec![None; m];
    sigma[block.root] = 1;
    l_of[block.root] = Some(vec![0; n]);

    // adjacency with propagation data
    #[derive(Clone)]
    struct Step {
        to: usize,
        ell: Vec<i64>,
        color: EdgeColor,
    }
    let mut adj: Vec<Vec<Step>> = vec![vec![]; m];
    for (h, k, ell) in &block.black {
        // traversal h -> k along (h,k,l): L(k) = L(h) - l
        adj[*h].push(Step { to: *k, ell: ell.ell().to_vec(), color: EdgeColor::Black });
        let neg: Vec<i64> = ell.ell().iter().map(|x| -x).collect();
        adj[*k].push(Step { to: *h, ell: neg, color: EdgeColor::Black });
    }
    for (a, b, ell) in &block.red {
        adj[*a].push(Step { to: *b, ell: ell.ell().to_vec(), color: EdgeColor::Red });
        adj[*b].push(Step { to: *a, ell: ell.ell().to_vec(), color: EdgeColor::Red });
    }

    let mut queue = VecDeque::new();
    queue.push_back(block.root);
    while let Some(v) = queue.pop_front() {
        let lv = l_of[v].clone().unwrap();
        let sv = sigma[v];
        for step in adj[v].clone() {
            let (ns, nl): (i8, Vec<i64>) = match step.color {
                EdgeColor::Black => (sv, lv.iter().zip(&step.ell).map(|(a, b)| a - b).collect()),
                EdgeColor::Red => (-sv, step.ell.iter().zip(&lv).map(|(a, b)| a - b).collect()),
            };
            match &l_of[step.to] {
                None => {
                    sigma[step.to] = ns;
                    l_of[step.to] = Some(nl);
                    queue.push_back(step.to);
                }
                Some(existing) => {
                    if sigma[step.to] != ns || existing != &nl {
                        return Err(NonGenericity::PathIndependence {
                            vertex: block.vertices[step.to].clone(),
                        });
                    }
                }
            }
        }
    }

    let root_v = block.vertices[block.root].clone();
    let bound = 4 * q as i64 * sites.d() as i64;
    for i in 0..m {
        let l = l_of[i].clone().expect("connected block");
        let s = sigma[i] as i64;
        let k = &block.vertices[i];
        // k + sum L_i j_i = sigma r ; |k|^2 + sum L_i |j_i|^2 = sigma |r|^2 ; 1 + sum L_i = sigma
        let (lsum, lpi, lpi2) = linear_maps(&l, sites).expect("length checked");
        if k.add(&lpi) != root_v.scale(s)
            || k.norm2() + lpi2 != s * root_v.norm2()
            || 1 + lsum != s
        {
            return Err(NonGenericity::PathIndependence { vertex: k.clone() });
        }
        let l1: i64 = l.iter().map(|x| x.abs()).sum();
        if l1 > bound {
            return Err(NonGenericity::PhaseVectorBound { vertex: k.clone(), l1, bound });
        }
    }

    block.sigma = sigma;
    block.l_of = l_of.into_iter().map(|x| x.unwrap()).collect();
    Ok(())
}

#[derive(Debug, Clone)]
pub struct GenericityReport {
    pub pass: bool,
    pub failures: Vec<NonGenericity>,
    pub checked_blocks: usize,
    /// Radius of the ball that provably contains every red edge.
    pub red_sphere_radius: f64,
    pub red_blocks: usize,
}

/// Pass iff every block has at most `2d + 1` vertices and every red-free block
/// has affinely independent vertices (hence at most `d + 1`).
pub fn genericity_report(blocks: &[GeometricBlock], d: usize) -> GenericityReport {
    let mut failures = Vec::new();
    let mut red_blocks = 0;
    let mut red_radius2: i64 = 0;
    for b in blocks {
        if b.size() > 2 * d + 1 {
            failures.push(NonGenericity::OversizeBlock { vertices: b.vertices.clone() });
        }
        if b.has_red() {
            red_blocks += 1;
            for v in &b.vertices {
                red_radius2 = red_radius2.max(v.norm2());
            }
        } else {
            let pts: Vec<Vec<i64>> = b.vertices.iter().map(|v| v.0.clone()).collect();
            if !intlin::affinely_independent(&pts) {
                failures.push(NonGenericity::AffineDependence { vertices: b.vertices.clone() });
            }
        }
    }
    GenericityReport {
        pass: failures.is_empty(),
        failures,
        checked_blocks: blocks.len(),
        red_sphere_radius: (red_radius2 as f64).sqrt(),
        red_blocks,
    }
}

/// A family of mutually translated red-free blocks with identical markings.
#[derive(Debug, Clone)]
pub struct TranslationFamily {
    /// Indices into the input slice.
    pub members: Vec<usize>,
    pub representative: usize,
    /// Basis of the subgroup generated by root differences.
    pub generators: Vec<Vec<i64>>,
    pub rank: usize,
    pub expected_rank: usize,
    /// Set when the family has a single member or observed rank < expected.
    pub flagged: bool,
}

/// Groups red-free non-boundary blocks into translation families and checks
/// the expected translation-subgroup rank `d - d_t + 1`.
pub fn translation_classes(
    blocks: &[GeometricBlock],
    d: usize,
) -> (Vec<TranslationFamily>, Vec<NonGenericity>) {
    let mut groups: BTreeMap<Vec<u8>, Vec<usize>> = BTreeMap::new();
    for (i, b) in blocks.iter().enumerate() {
        if b.has_red() || b.boundary {
            continue;
        }
        groups.entry(family_key(b)).or_default().push(i);
    }
    let mut families = Vec::new();
    let mut diagnostics = Vec::new();
    for (_, members) in groups {
        let rep = members[0];
        let root0 = blocks[rep].root_vertex();
        let diffs: Vec<Vec<i64>> = members
            .iter()
            .map(|&i| blocks[i].root_vertex().sub(root0).0)
            .collect();
        let generators = intlin::subgroup_basis(&diffs);
        let rank = generators.len();
        let expected_rank = d + 1 - blocks[rep].size();
        if rank > expected_rank {
            diagnostics.push(NonGenericity::FamilyRank {
                representative: root0.clone(),
                expected: expected_rank,
                got: rank,
            });
        }
        let flagged = members.len() == 1 || rank < expected_rank;
        families.push(TranslationFamily {
            members,
            representative: rep,
            generators,
            rank,
            expected_rank,
            flagged,
        });
    }
    (families, diagnostics)
}

/// Canonical marking of a block relative to its root: two blocks get equal
/// keys iff they are lattice translates with matching edge labels.
fn family_key(b: &GeometricBlock) -> Vec<u8> {
    let root = b.root_vertex().clone();
    let mut rel: Vec<Vec<i64>> = b.vertices.iter().map(|v| v.sub(&root).0).collect();
    rel.sort();
    let mut edges: Vec<(Vec<i64>, Vec<i64>, Vec<i64>)> = b
        .black
        .iter()
        .map(|(h, k, l)| {
            (b.vertices[*h].sub(&root).0, b.vertices[*k].sub(&root).0, l.ell().to_vec())
        })
        .collect();
    edges.sort();
    format!("{rel:?}|{edges:?}").into_bytes()
}

/// JSON dump of the graph, components, roots and phase vectors.
pub fn graph_to_json(g: &GeometricGraph, comps: &Components) -> Value {
    let blocks: Vec<Value> = comps
        .blocks
        .iter()
        .map(|b| {
            json!({
                "root": b.root_vertex().0,
                "vertices": b.vertices.iter().map(|v| v.0.clone()).collect::<Vec<_>>(),
                "sigma": b.sigma,
                "L": b.l_of,
                "black_edges": b.black.iter().map(|(h, k, l)| json!([h, k, l.ell()])).collect::<Vec<_>>(),
                "red_edges": b.red.iter().map(|(a, c, l)| json!([a, c, l.ell()])).collect::<Vec<_>>(),
                "boundary": b.boundary,
            })
        })
        .collect();
    json!({
        "q": g.q,
        "box_radius": g.box_radius,
        "sites": g.sites.sites().iter().map(|s| s.0.clone()).collect::<Vec<_>>(),
        "black_edges": g.black_edges.iter().map(|e| json!({"h": e.h.0, "k": e.k.0, "l": e.ell.ell()})).collect::<Vec<_>>(),
        "red_edges": g.red_edges.iter().map(|e| json!({"h": e.a.0, "k": e.b.0, "l": e.ell.ell()})).collect::<Vec<_>>(),
        "special_component": comps.special.vertices.iter().map(|v| v.0.clone()).collect::<Vec<_>>(),
        "blocks": blocks,
        "diagnostics": comps.diagnostics.iter().map(|d| format!("{d:?}")).collect::<Vec<_>>(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sites(v: &[&[i64]]) -> TangentialSites {
        TangentialSites::new(v.iter().map(|s| LatticeVector(s.to_vec())).collect()).unwrap()
    }

    #[test]
    fn cubic_black_edges() {
        // S = {(0,0),(1,0)}, q = 1: black edges exactly ((1,y),(0,y), e1-e2)
        // and reverses.
        let s = sites(&[&[0, 0], &[1, 0]]);
        let g = build_graph(&s, 1, 10).unwrap();
        for e in &g.black_edges {
            assert_eq!(e.h.0[1], e.k.0[1]);
            assert_eq!((e.h.0[0] - e.k.0[0]).abs(), 1);
        }
        // one oriented pair per y
        assert_eq!(g.black_edges.len(), 2 * 21);
    }

    #[test]
    fn brute_force_black_oracle() {
        // check build_graph against a brute-force scan over all box pairs
        let s = sites(&[&[0, 0], &[1, 0]]);
        let radius = 6;
        let g = build_graph(&s, 1, radius).unwrap();
        let edges = enumerate_edges(1, 2);
        let mut brute = Vec::new();
        for h in box_points(2, radius) {
            for k in box_points(2, radius) {
                for l in &edges.black {
                    let (_, pi, pi2) = linear_maps(l.ell(), &s).unwrap();
                    if pi.add(&h).sub(&k).is_zero() && pi2 + h.norm2() - k.norm2() == 0 {
                        brute.push((h.clone(), k.clone(), l.clone()));
                    }
                }
            }
        }
        assert_eq!(g.black_edges.len(), brute.len());
        for e in &g.black_edges {
            assert!(brute.iter().any(|(h, k, l)| h == &e.h && k == &e.k && l == &e.ell));
        }
    }

    #[test]
    fn red_pairs_for_spread_sites() {
        // S = {(0,0),(2,0)}: red pairs are {(0,0),(2,0)} (= S) and {(1,1),(1,-1)}
        let s = sites(&[&[0, 0], &[2, 0]]);
        let g = build_graph(&s, 1, 10).unwrap();
        assert_eq!(g.red_edges.len(), 2);
        let pairs: Vec<(Vec<i64>, Vec<i64>)> =
            g.red_edges.iter().map(|e| (e.a.0.clone(), e.b.0.clone())).collect();
        assert!(pairs.contains(&(vec![0, 0], vec![2, 0])));
        assert!(pairs.contains(&(vec![1, -1], vec![1, 1])));
    }

    #[test]
    fn cubic_components_and_roots() {
        let s = sites(&[&[0, 0], &[1, 0]]);
        let g = build_graph(&s, 1, 10).unwrap();
        let comps = components(&g);
        assert!(comps.diagnostics.is_empty(), "{:?}", comps.diagnostics);
        let mut special = comps.special.vertices.clone();
        special.sort();
        assert_eq!(special, vec![LatticeVector(vec![0, 0]), LatticeVector(vec![1, 0])]);
        // pair components {(0,y),(1,y)}, y != 0, singletons elsewhere
        for b in &comps.blocks {
            match b.size() {
                1 => {}
                2 => {
                    let y = b.vertices[0].0[1];
                    assert_eq!(b.vertices[0].0, vec![0, y]);
                    assert_eq!(b.vertices[1].0, vec![1, y]);
                    assert_ne!(y, 0);
                    // root data: root (0,y), sigma = +1, L((1,y)) = (1,-1)
                    assert_eq!(b.root_vertex().0, vec![0, y]);
                    assert_eq!(b.sigma, vec![1, 1]);
                    assert_eq!(b.l_of[0], vec![0, 0]);
                    assert_eq!(b.l_of[1], vec![1, -1]);
                }
                other => panic!("unexpected block size {other}"),
            }
        }
    }

    #[test]
    fn red_block_root_data() {
        let s = sites(&[&[0, 0], &[2, 0]]);
        let g = build_graph(&s, 1, 10).unwrap();
        let comps = components(&g);
        let red = comps.blocks.iter().find(|b| b.has_red()).expect("red block");
        assert_eq!(red.root_vertex().0, vec![1, -1]);
        assert_eq!(red.sigma, vec![1, -1]);
        assert_eq!(red.l_of[1], vec![-1, -1]);
        // |k|^2 + sum L_i |j_i|^2 = 2 - 4 = -2 = sigma |root|^2
        assert_eq!(2 - 4, -red.root_vertex().norm2());
    }

    #[test]
    fn n1_all_singletons() {
        let s = sites(&[&[1, 0]]);
        let g = build_graph(&s, 2, 5).unwrap();
        assert!(g.black_edges.is_empty() && g.red_edges.is_empty());
        let comps = components(&g);
        assert!(comps.blocks.iter().all(|b| b.size() == 1));
    }

    #[test]
    fn genericity_pass_and_synthetic_failure() {
        let s = sites(&[&[0, 0], &[1, 0]]);
        let g = build_graph(&s, 1, 8).unwrap();
        let comps = components(&g);
        let rep = genericity_report(&comps.blocks, 2);
        assert!(rep.pass, "{:?}", rep.failures);

        // synthetic: 3 collinear vertices joined by black edges in d = 2
        let bad = GeometricBlock {
            vertices: vec![
                LatticeVector(vec![0, 0]),
                LatticeVector(vec![1, 0]),
                LatticeVector(vec![2, 0]),
            ],
            black: vec![],
            red: vec![],
            boundary: false,
            root: 0,
            sigma: vec![1, 1, 1],
            l_of: vec![vec![0, 0]; 3],
        };
        let rep = genericity_report(&[bad], 2);
        assert!(!rep.pass);
        assert!(matches!(rep.failures[0], NonGenericity::AffineDependence { .. }));
    }

    #[test]
    fn translation_families_cubic() {
        let s = sites(&[&[0, 0], &[1, 0]]);
        let g = build_graph(&s, 1, 10).unwrap();
        let comps = components(&g);
        let (families, diags) = translation_classes(&comps.blocks, 2);
        assert!(diags.is_empty(), "{diags:?}");
        let pair_family = families.iter().find(|f| blocks_size(&comps, f) == 2).unwrap();
        assert_eq!(pair_family.rank, 1);
        assert_eq!(pair_family.expected_rank, 1);
        assert_eq!(pair_family.generators, vec![vec![0, 1]]);
        let singleton_family = families.iter().find(|f| blocks_size(&comps, f) == 1).unwrap();
        assert_eq!(singleton_family.rank, 2);
        assert_eq!(singleton_family.expected_rank, 2);

        fn blocks_size(c: &Components, f: &TranslationFamily) -> usize {
            c.blocks[f.representative].size()
        }
    }

    #[test]
    fn roots_translation_covariant_within_family() {
        let s = sites(&[&[0, 0], &[1, 0]]);
        let g = build_graph(&s, 1, 12).unwrap();
        let comps = components(&g);
        let (families, _) = translation_classes(&comps.blocks, 2);
        for f in &families {
            let rep = &comps.blocks[f.representative];
            for &m in &f.members {
                let b = &comps.blocks[m];
                let u = b.root_vertex().sub(rep.root_vertex());
                let translated: Vec<LatticeVector> =
                    rep.vertices.iter().map(|v| v.add(&u)).collect();
                assert_eq!(b.vertices, translated);
            }
        }
    }

    #[test]
    fn box_growth_stability() {
        // non-boundary components of the small box reappear identically in a
        // larger box
        let s = sites(&[&[0, 0], &[2, 0]]);
        let small = components(&build_graph(&s, 1, 8).unwrap());
        let large = components(&build_graph(&s, 1, 12).unwrap());
        for b in small.blocks.iter().filter(|b| !b.boundary) {
            let found = large.blocks.iter().find(|c| c.root_vertex() == b.root_vertex());
            let c = found.expect("component persists");
            assert_eq!(c.vertices, b.vertices);
            assert_eq!(c.l_of, b.l_of);
            assert_eq!(c.sigma, b.sigma);
        }
    }
}
