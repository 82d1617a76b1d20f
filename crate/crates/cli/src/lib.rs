//! Batch front end: configuration parsing, pipeline orchestration
//! (graph -> normal form -> melnikov -> stratify -> kam) and report emission.
//!
//! Exit codes: 0 success, 2 non-genericity diagnostics (valid run, negative
//! finding), 1 errors.

use resonant_nf::final_graph::{
    assemble_normal_form, build_final_graph, final_graph_to_json, finalize_partition,
    normal_form_ham, phase_shift, prepare_blocks, y_edges, NormalFormData,
};
use resonant_nf::graph::{
    build_graph, components, genericity_report, graph_to_json, translation_classes,
};
use resonant_nf::ham::{majorant_norm, to_json_lines, Cutoffs, NormParams, SiteSet};
use resonant_nf::kam::{
    decay_table_csv, kam_iterate, project_kernel, project_range, random_perturbation,
};
use resonant_nf::lattice::{LatticeVector, TangentialSites};
use resonant_nf::melnikov::{
    kernel_verify, measure_bound_params, resonant_report_to_json, resonant_scan,
};
use resonant_nf::strat::{
    count_within_bound, refinement_check, stratification_to_json, stratify, Rho,
};
use serde::Deserialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

pub const SCHEMA: &str = "resonant-nf/report/v1";

#[derive(Debug, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub d: usize,
    pub n: usize,
    pub q: u32,
    pub s: Vec<Vec<i64>>,
    pub box_radius: i64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub xi_mode: XiMode,
    #[serde(default = "default_k0")]
    pub k0: i64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// `rho0` as "num/den" or a decimal string
    #[serde(default = "default_rho0")]
    pub rho0: String,
    #[serde(default = "default_s0")]
    pub s0: i64,
    #[serde(default = "default_k_scan")]
    pub k_scan: i64,
    #[serde(default = "default_rhos")]
    pub scan_rhos: Vec<f64>,
    #[serde(default = "default_strat_scales")]
    pub strat_scales: Vec<i64>,
    #[serde(default = "default_strat_box")]
    pub strat_box: i64,
    #[serde(default = "default_kam_steps")]
    pub kam_steps: usize,
    #[serde(default = "default_kam_terms")]
    pub kam_perturbation_terms: usize,
    #[serde(default = "default_kam_size")]
    pub kam_perturbation_size: f64,
    #[serde(default)]
    pub tolerances: BTreeMap<String, f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_epsilon() -> f64 {
    0.1
}
fn default_k0() -> i64 {
    4
}
fn default_tau() -> f64 {
    20.0
}
fn default_rho0() -> String {
    "1/4".into()
}
fn default_s0() -> i64 {
    2
}
fn default_k_scan() -> i64 {
    8
}
fn default_rhos() -> Vec<f64> {
    vec![2.0, 4.0, 8.0]
}
fn default_strat_scales() -> Vec<i64> {
    vec![8, 16]
}
fn default_strat_box() -> i64 {
    8
}
fn default_kam_steps() -> usize {
    3
}
fn default_kam_terms() -> usize {
    10
}
fn default_kam_size() -> f64 {
    1e-5
}

#[derive(Debug, Deserialize, Clone)]
#[serde(rename_all = "snake_case")]
pub enum XiMode {
    /// Explicit samples in units of `epsilon^2` (each in `[1/2, 3/2]^n`).
    Samples(Vec<Vec<f64>>),
    /// Uniform grid over `[lo, hi]^n` in units of `epsilon^2`.
    Grid { lo: f64, hi: f64, count: usize },
}

impl Default for XiMode {
    fn default() -> Self {
        XiMode::Grid { lo: 0.5, hi: 1.5, count: 10 }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("pipeline: {0}")]
    Pipeline(String),
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.s.len() != self.n {
            return Err(CliError::Config(format!(
                "|S| = {} but n = {}",
                self.s.len(),
                self.n
            )));
        }
        for site in &self.s {
            if site.len() != self.d {
                return Err(CliError::Config(format!(
                    "site {site:?} has length {}, expected d = {}",
                    site.len(),
                    self.d
                )));
            }
        }
        for (i, a) in self.s.iter().enumerate() {
            if self.s[i + 1..].contains(a) {
                return Err(CliError::Config(format!("duplicate site {a:?}")));
            }
        }
        if self.q < 1 || self.box_radius < 1 {
            return Err(CliError::Config("q >= 1 and box_radius >= 1 required".into()));
        }
        Ok(())
    }

    pub fn tangential(&self) -> Result<TangentialSites, CliError> {
        TangentialSites::new(self.s.iter().map(|v| LatticeVector(v.clone())).collect())
            .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn tol(&self, name: &str, default: f64) -> f64 {
        self.tolerances.get(name).copied().unwrap_or(default)
    }

    /// Grid of `xi` values (absolute, scaled by `epsilon^2`).
    pub fn xi_grid(&self) -> Vec<Vec<f64>> {
        let e2 = self.epsilon * self.epsilon;
        match &self.xi_mode {
            XiMode::Samples(list) => list
                .iter()
                .map(|v| v.iter().map(|x| x * e2).collect())
                .collect(),
            XiMode::Grid { lo, hi, count } => {
                let mut out = Vec::new();
                let c = (*count).max(2);
                let mut idx = vec![0usize; self.n];
                loop {
                    let pt: Vec<f64> = idx
                        .iter()
                        .map(|&i| e2 * (lo + (hi - lo) * (i as f64 + 0.5) / c as f64))
                        .collect();
                    out.push(pt);
                    let mut j = 0;
                    loop {
                        if j == self.n {
                            return out;
                        }
                        idx[j] += 1;
                        if idx[j] < c {
                            break;
                        }
                        idx[j] = 0;
                        j += 1;
                    }
                }
            }
        }
    }

    /// Catalog samples: a handful of grid points with a scaled copy of the
    /// first inserted second (degree cross-check for branch identification).
    pub fn catalog_samples(&self) -> Vec<Vec<f64>> {
        let grid = self.xi_grid();
        let mut picks: Vec<Vec<f64>> = Vec::new();
        let stride = (grid.len() / 5).max(1);
        for p in grid.iter().step_by(stride).take(6) {
            picks.push(p.clone());
        }
        if picks.len() < 3 {
            picks = grid.clone();
        }
        let scaled: Vec<f64> = picks[0].iter().map(|x| 2.0 * x).collect();
        picks.insert(1, scaled);
        picks
    }
}

/// Deterministic JSON rendering: object keys sorted (serde_json default map),
/// floats with 17 significant digits.
pub fn render_json(v: &Value) -> String {
    let mut out = String::new();
    render(v, &mut out);
    out.push('\n');
    out
}

fn render(v: &Value, out: &mut String) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else {
                let f = n.as_f64().unwrap_or(f64::NAN);
                if f.is_finite() {
                    out.push_str(&format!("{f:.16e}"));
                } else {
                    out.push_str("null");
                }
            }
        }
        Value::String(s) => {
            out.push_str(&serde_json::to_string(s).expect("string"));
        }
        Value::Array(a) => {
            out.push('[');
            for (i, x) in a.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                render(x, out);
            }
            out.push(']');
        }
        Value::Object(m) => {
            out.push('{');
            for (i, (k, x)) in m.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("key"));
                out.push(':');
                render(x, out);
            }
            out.push('}');
        }
    }
}

pub struct RunOutput {
    pub exit_code: i32,
    pub report: Value,
    pub summary: String,
    pub extra_files: Vec<(String, String)>,
}

fn envelope(cfg_bytes: &[u8], subcommand: &str, seed: u64, data: Value, diagnostics: Vec<String>) -> Value {
    let mut hasher = Sha256::new();
    hasher.update(cfg_bytes);
    let hash = format!("{:x}", hasher.finalize());
    let mut m = Map::new();
    m.insert("schema".into(), json!(SCHEMA));
    m.insert("subcommand".into(), json!(subcommand));
    m.insert("config_sha256".into(), json!(hash));
    m.insert("seed".into(), json!(seed));
    m.insert(
        "versions".into(),
        json!({
            "resonant-nf": env!("CARGO_PKG_VERSION"),
        }),
    );
    m.insert("diagnostics".into(), json!(diagnostics));
    m.insert("data".into(), data);
    Value::Object(m)
}

struct GraphStage {
    comps: resonant_nf::graph::Components,
    report: Value,
    diagnostics: Vec<String>,
}

fn graph_stage(cfg: &SessionConfig) -> Result<GraphStage, CliError> {
    let sites = cfg.tangential()?;
    let g = build_graph(&sites, cfg.q, cfg.box_radius)
        .map_err(|e| CliError::Pipeline(e.to_string()))?;
    let comps = components(&g);
    let gen = genericity_report(&comps.blocks, cfg.d);
    let (families, fam_diags) = translation_classes(&comps.blocks, cfg.d);
    let mut diagnostics: Vec<String> =
        comps.diagnostics.iter().map(|d| format!("{d:?}")).collect();
    diagnostics.extend(gen.failures.iter().map(|d| format!("{d:?}")));
    diagnostics.extend(fam_diags.iter().map(|d| format!("{d:?}")));
    let report = json!({
        "graph": graph_to_json(&g, &comps),
        "genericity": {
            "pass": gen.pass,
            "checked_blocks": gen.checked_blocks,
            "red_blocks": gen.red_blocks,
            "red_sphere_radius": gen.red_sphere_radius,
            "failures": gen.failures.iter().map(|f| format!("{f:?}")).collect::<Vec<_>>(),
        },
        "families": families.iter().map(|f| json!({
            "representative_root": comps.blocks[f.representative].root_vertex().0,
            "size": comps.blocks[f.representative].size(),
            "members": f.members.len(),
            "generators": f.generators,
            "rank": f.rank,
            "expected_rank": f.expected_rank,
            "flagged": f.flagged,
        })).collect::<Vec<_>>(),
    });
    Ok(GraphStage { comps, report, diagnostics })
}

struct NfStage {
    nf: NormalFormData,
    report: Value,
    diagnostics: Vec<String>,
}

fn nf_stage(cfg: &SessionConfig, gs: &GraphStage) -> Result<NfStage, CliError> {
    let sites = cfg.tangential()?;
    let samples = cfg.catalog_samples();
    let tol = cfg.tol("catalog", 1e-8);
    let input = prepare_blocks(&gs.comps, &sites, cfg.q, &samples, tol)
        .map_err(|e| CliError::Pipeline(e.to_string()))?;
    let (y, rejected) = y_edges(&input.catalog, cfg.q, cfg.n, cfg.tol("yedge", 1e-8));
    let graph = build_final_graph(&input, &y, cfg.tol("yedge", 1e-8))
        .map_err(|e| CliError::Pipeline(e.to_string()))?;
    let diagnostics: Vec<String> =
        graph.diagnostics.iter().map(|d| format!("{d:?}")).collect();
    let rejected_json: Vec<Value> = rejected
        .iter()
        .map(|r| json!({"pair": [r.pair.0, r.pair.1], "estimate": r.estimate, "reason": r.reason}))
        .collect();
    let site_set = Arc::new(SiteSet::normal_sites(&sites, cfg.box_radius));
    let catalog_json = input.catalog.to_json();
    let y_json: Vec<Value> = y
        .iter()
        .map(|e| json!({"ell": e.ell, "color": format!("{:?}", e.color), "witnesses": e.witnesses}))
        .collect();
    let nf = finalize_partition(input, graph, site_set)
        .map_err(|e| CliError::Pipeline(e.to_string()))?;
    // assemble at the first sample for the report
    let xi0 = &samples[0];
    let eval = assemble_normal_form(&nf, xi0, cfg.tol("assembly", 1e-10))
        .map_err(|e| CliError::Pipeline(e.to_string()))?;
    let report = json!({
        "catalog": catalog_json,
        "y_edges": y_json,
        "y_rejected": rejected_json,
        "final_graph": final_graph_to_json(&nf),
        "eval_at_first_sample": {
            "xi": eval.xi,
            "omega": eval.omega,
            "theta": eval.theta.iter().map(|t| json!([t.re, t.im])).collect::<Vec<_>>(),
        },
        "t_f_size": nf.t_f.len(),
        "t_g_size": nf.t_g.len(),
    });
    Ok(NfStage { nf, report, diagnostics })
}

fn melnikov_stage(cfg: &SessionConfig, nfs: &NfStage) -> Result<Value, CliError> {
    let nf = &nfs.nf;
    let grid = cfg.xi_grid();
    let min_grid = cfg.tol("min_grid", 50.0) as usize;
    let evals: Vec<_> = grid
        .iter()
        .take(8)
        .map(|xi| assemble_normal_form(nf, xi, cfg.tol("assembly", 1e-10)))
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Pipeline(e.to_string()))?;
    let params = measure_bound_params(nf, &evals, cfg.epsilon, cfg.q, cfg.k_scan, 2.0, cfg.s0)
        .map_err(|e| CliError::Pipeline(e.to_string()))?;
    let kernel = kernel_verify(nf, &grid[..grid.len().min(100)], 8, cfg.epsilon, cfg.tol("kernel_det", 1e-8))
        .map_err(|e| CliError::Pipeline(e.to_string()))?;
    let scan = resonant_scan(nf, cfg.k_scan, &cfg.scan_rhos, &grid, cfg.epsilon, min_grid)
        .map_err(|e| CliError::Pipeline(e.to_string()))?;
    Ok(json!({
        "bound_params": serde_json::to_value(&params).unwrap(),
        "kernel": serde_json::to_value(&kernel).unwrap(),
        "resonant_scan": resonant_report_to_json(&scan),
    }))
}

fn stratify_stage(cfg: &SessionConfig, gs: &GraphStage) -> Result<(Value, Vec<String>), CliError> {
    let rho0 = parse_rho(&cfg.rho0)?;
    let mut reports = Vec::new();
    let mut diagnostics = Vec::new();
    // translation families of the resonance graph as vertex sets, for the
    // refinement check
    let (families, _) = translation_classes(&gs.comps.blocks, cfg.d);
    let family_sets: Vec<std::collections::BTreeSet<LatticeVector>> = families
        .iter()
        .map(|f| {
            f.members
                .iter()
                .flat_map(|&bi| gs.comps.blocks[bi].vertices.iter().cloned())
                .filter(|v| v.linf() <= cfg.strat_box)
                .collect()
        })
        .collect();
    for &n_scale in &cfg.strat_scales {
        let s = stratify(cfg.strat_box, cfg.d, n_scale, rho0)
            .map_err(|e| CliError::Pipeline(e.to_string()))?;
        let mut bounds_ok = true;
        for (&(_, level), &count) in &s.counts {
            if !count_within_bound(count, n_scale, cfg.d, rho0, level) {
                bounds_ok = false;
            }
        }
        let violations = refinement_check(&s, &family_sets);
        for &v in &violations {
            diagnostics.push(format!(
                "stratification at N = {n_scale} does not refine translation family {v} (expected for small N)"
            ));
        }
        reports.push(json!({
            "n": n_scale,
            "strata": stratification_to_json(&s),
            "counts_within_bound": bounds_ok,
            "refinement_violations": violations,
        }));
    }
    Ok((json!(reports), diagnostics))
}

fn parse_rho(s: &str) -> Result<Rho, CliError> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once('/') {
        let num: u32 = a.trim().parse().map_err(|_| CliError::Config(format!("bad rho0 {s}")))?;
        let den: u32 = b.trim().parse().map_err(|_| CliError::Config(format!("bad rho0 {s}")))?;
        Rho::new(num, den).map_err(|e| CliError::Config(e.to_string()))
    } else {
        let x: f64 = s.parse().map_err(|_| CliError::Config(format!("bad rho0 {s}")))?;
        Rho::from_f64(x).map_err(|e| CliError::Config(e.to_string()))
    }
}

fn kam_stage(cfg: &SessionConfig, nfs: &NfStage) -> Result<(Value, Vec<(String, String)>), CliError> {
    let nf = &nfs.nf;
    let xi = cfg.xi_grid().into_iter().next().ok_or_else(|| {
        CliError::Config("xi grid is empty".into())
    })?;
    let eval = assemble_normal_form(nf, &xi, cfg.tol("assembly", 1e-10))
        .map_err(|e| CliError::Pipeline(e.to_string()))?;
    let k_max = 4i64.pow(cfg.kam_steps as u32) * cfg.k0;
    let cut = Cutoffs { k_x: k_max, max_degree: 2 * cfg.q + 2 };
    let mut nham = normal_form_ham(nf, &eval, cut);
    nham.drop_constant();
    let np = NormParams {
        s: cfg.tol("norm_s", 0.3),
        r: cfg.tol("norm_r", 0.2),
        a: cfg.tol("norm_a", 0.05),
        p: cfg.tol("norm_p", 2.0),
    };
    let mut rng = seeded_rng(cfg.seed);
    let pert = random_perturbation(
        nf,
        &mut rng,
        cfg.k0,
        cfg.kam_perturbation_terms,
        cfg.kam_perturbation_size,
        cfg.kam_perturbation_size * 100.0,
        cut,
    );
    let h0 = nham.add(&pert);
    let (h_final, mut table) = kam_iterate(&h0, nf, cfg.kam_steps, cfg.k0, &np)
        .map_err(|e| CliError::Pipeline(e.to_string()))?;
    // wall-clock times are nondeterministic; keep them out of report.json
    let wall_total: f64 = table.reports.iter().map(|r| r.wall_seconds).sum();
    for r in table.reports.iter_mut() {
        r.wall_seconds = 0.0;
    }
    // phase-shift sanity: the final kernel stays x-independent
    let kernel = project_kernel(&h_final, nf);
    let shifted = phase_shift(&kernel, nf);
    let x_independent = shifted.terms.keys().all(|m| m.is_x_independent());
    let report = json!({
        "xi": xi,
        "k0": cfg.k0,
        "steps": cfg.kam_steps,
        "decay": serde_json::to_value(&table).unwrap(),
        "final_range_norm": majorant_norm(&project_range(&h_final, nf), &np),
        "kernel_x_independent_after_shift": x_independent,
    });
    let csv = decay_table_csv(&table);
    eprintln!("kam wall time: {wall_total:.3}s");
    let nf_dump = to_json_lines(&project_kernel(&h_final, nf));
    Ok((report, vec![
        ("decay.csv".into(), csv),
        ("normal_form.jsonl".into(), nf_dump),
    ]))
}

fn seeded_rng(seed: u64) -> impl rand::Rng {
    use rand::SeedableRng;
    rand::rngs::StdRng::seed_from_u64(seed)
}

/// Runs one subcommand against a parsed config. Returns the report, summary
/// and exit code; writes nothing.
pub fn run_config(
    subcommand: &str,
    cfg: &SessionConfig,
    cfg_bytes: &[u8],
) -> Result<RunOutput, CliError> {
    cfg.validate()?;
    let mut diagnostics: Vec<String> = Vec::new();
    let mut data = Map::new();
    let mut extra_files = Vec::new();
    let mut summary = String::new();

    let gs = graph_stage(cfg)?;
    diagnostics.extend(gs.diagnostics.iter().cloned());
    summary.push_str(&format!(
        "graph: {} blocks, {} diagnostics\n",
        gs.comps.blocks.len(),
        gs.diagnostics.len()
    ));
    if matches!(subcommand, "graph" | "all") {
        data.insert("graph".into(), gs.report.clone());
    }

    let needs_nf = matches!(subcommand, "normal-form" | "melnikov" | "kam" | "all");
    let nfs = if needs_nf && gs.diagnostics.is_empty() {
        Some(nf_stage(cfg, &gs)?)
    } else {
        None
    };
    if let Some(nfs) = &nfs {
        diagnostics.extend(nfs.diagnostics.iter().cloned());
        summary.push_str(&format!(
            "normal-form: {} bad blocks, {} good blocks\n",
            nfs.nf.t_f.len(),
            nfs.nf.t_g.len()
        ));
        if matches!(subcommand, "normal-form" | "all") {
            data.insert("normal_form".into(), nfs.report.clone());
        }
    } else if needs_nf && !gs.diagnostics.is_empty() {
        summary.push_str("normal-form: skipped (non-generic sites)\n");
    }

    if matches!(subcommand, "melnikov" | "all") {
        if let Some(nfs) = &nfs {
            let m = melnikov_stage(cfg, nfs)?;
            summary.push_str("melnikov: scan complete\n");
            data.insert("melnikov".into(), m);
        }
    }

    if matches!(subcommand, "stratify" | "all") {
        let (s, sdiags) = stratify_stage(cfg, &gs)?;
        for d in &sdiags {
            summary.push_str(&format!("stratify note: {d}\n"));
        }
        // refinement mismatches at small N are reported, not fatal, and do not
        // flip the exit code
        data.insert("stratify".into(), s);
        summary.push_str("stratify: complete\n");
    }

    if matches!(subcommand, "kam" | "all") {
        if let Some(nfs) = &nfs {
            let (k, files) = kam_stage(cfg, nfs)?;
            summary.push_str("kam: iteration complete\n");
            data.insert("kam".into(), k);
            extra_files.extend(files);
        }
    }

    let exit_code = if diagnostics.is_empty() { 0 } else { 2 };
    summary.push_str(&format!("exit: {exit_code}\n"));
    let report = envelope(cfg_bytes, subcommand, cfg.seed, Value::Object(data), diagnostics);
    Ok(RunOutput { exit_code, report, summary, extra_files })
}

/// File-level entry point: parses the config, runs, writes `report.json`,
/// `summary.txt` and any extra files into `out_dir`.
pub fn run(
    subcommand: &str,
    config_path: &Path,
    out_dir: &Path,
    seed_override: Option<u64>,
    tol_overrides: &[(String, f64)],
) -> i32 {
    let cfg_bytes = match std::fs::read(config_path) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("error: cannot read config {}: {e}", config_path.display());
            return 1;
        }
    };
    let mut cfg: SessionConfig = match serde_json::from_slice(&cfg_bytes) {
        Ok(c) => c,
        Err(e) => {
            eprintln!(
                "error: malformed config {} (line {}, column {}): {e}",
                config_path.display(),
                e.line(),
                e.column()
            );
            return 1;
        }
    };
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    for (k, v) in tol_overrides {
        cfg.tolerances.insert(k.clone(), *v);
    }
    match run_config(subcommand, &cfg, &cfg_bytes) {
        Ok(out) => {
            if let Err(e) = std::fs::create_dir_all(out_dir) {
                eprintln!("error: cannot create out dir: {e}");
                return 1;
            }
            let report_path = out_dir.join("report.json");
            if let Err(e) = std::fs::write(&report_path, render_json(&out.report)) {
                eprintln!("error: cannot write report: {e}");
                return 1;
            }
            if let Err(e) = std::fs::write(out_dir.join("summary.txt"), &out.summary) {
                eprintln!("error: cannot write summary: {e}");
                return 1;
            }
            for (name, contents) in &out.extra_files {
                if let Err(e) = std::fs::write(out_dir.join(name), contents) {
                    eprintln!("error: cannot write {name}: {e}");
                    return 1;
                }
            }
            print!("{}", out.summary);
            out.exit_code
        }
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
