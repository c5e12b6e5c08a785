//! Experiment dispatch. Each experiment parses and checks its parameter
//! table up front ([`validate`]) and then runs ([`execute`]).

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use rwre_core::ballisticity::{
    estimate_condition_t, kalikow_delta, rectangle, supermartingale_diagnostic, t_box, t_fail_probability_exact,
    verify_kalikow_proposition, KalikowOptions, TOptions,
};
use rwre_core::environment::{
    exact_conditional_ratio, make_environment, measure_mixing_constants, r_boundary, strip_sites, EnvKind,
    EnvironmentSpec, MixingBound, MixingOptions, TransitionVector,
};
use rwre_core::lattice::{default_zeta, Direction, Site};
use rwre_core::limits::{
    clt_scaling, default_alpha_grid, lln_check, near_iid_test, renewal_covariance, tau_tail_fit,
};
use rwre_core::linsolve::SolveOptions;
use rwre_core::regeneration::{estimate_direction, estimate_velocity, regen_batch, RegenParams, RegenStats};
use rwre_core::renormalization::{
    atypical_quenched_probe, bad_fraction_scan, build_tube, min_bad_count, ClassifyMethod, ClassifyOptions,
};
use rwre_core::rng::{derive_seed, stream};
use rwre_core::walk::{CoupledTrajectory, WalkMode, Walker};

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::error::{LabError, Result};

const TAG_SIM: u64 = 0x5349;
const TAG_REG: u64 = 0x5245;
const TAG_MIX: u64 = 0x4d49;

/// What an experiment produces: the `results` payload and named CSV files.
#[derive(Debug, Default)]
pub struct Outputs {
    pub results: Value,
    pub csvs: Vec<(String, Vec<u8>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegenSection {
    #[serde(default)]
    pub ladders: Option<Vec<usize>>,
    #[serde(default)]
    pub zeta: Option<f64>,
    pub max_steps: usize,
    pub n_traj: usize,
    #[serde(default)]
    pub h_cone: Option<f64>,
    #[serde(default)]
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateParams {
    pub n: u64,
    #[serde(default = "coupled")]
    pub mode: WalkMode,
    /// Length of the exported trajectory (default `min(n, 10⁵)`).
    #[serde(default)]
    pub trajectory_steps: Option<u64>,
    #[serde(default)]
    pub regen: Option<RegenSection>,
}

fn coupled() -> WalkMode {
    WalkMode::Coupled
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegenExpParams {
    #[serde(default)]
    pub ladders: Option<Vec<usize>>,
    #[serde(default)]
    pub zeta: Option<f64>,
    pub max_steps: usize,
    pub n_traj: usize,
    #[serde(default)]
    pub h_cone: Option<f64>,
    #[serde(default)]
    pub stop_after: Option<usize>,
    #[serde(default = "unit")]
    pub mu_band: f64,
}

impl RegenExpParams {
    fn section(&self) -> RegenSection {
        RegenSection {
            ladders: self.ladders.clone(),
            zeta: self.zeta,
            max_steps: self.max_steps,
            n_traj: self.n_traj,
            h_cone: self.h_cone,
            stop_after: self.stop_after,
        }
    }
}

fn unit() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateTParams {
    #[serde(default = "three")]
    pub aspect: f64,
    pub m_grid: Vec<f64>,
    pub samples_per_m: usize,
    #[serde(default = "default_horizon")]
    pub horizon: u64,
    /// Compare every cell with the exact box solve (deterministic fields).
    #[serde(default)]
    pub oracle: bool,
}

fn three() -> f64 {
    3.0
}

fn default_horizon() -> u64 {
    1_000_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RectConfig {
    pub lo: Vec<i64>,
    pub hi: Vec<i64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupermartingaleSection {
    pub eta_grid: Vec<f64>,
    #[serde(default = "sm_steps")]
    pub n_steps: u64,
    #[serde(default = "sm_walks")]
    pub n_walks: usize,
    #[serde(default = "sm_half")]
    pub half_width: i64,
}

fn sm_steps() -> u64 {
    200
}
fn sm_walks() -> usize {
    2000
}
fn sm_half() -> i64 {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KalikowParams {
    #[serde(default)]
    pub sets: Option<Vec<RectConfig>>,
    #[serde(default = "n_env")]
    pub n_env: usize,
    #[serde(default)]
    pub verify: bool,
    #[serde(default)]
    pub mc_walks: usize,
    #[serde(default)]
    pub supermartingale: Option<SupermartingaleSection>,
}

fn n_env() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TubeSection {
    pub m0: i64,
    pub m1: i64,
    pub big_m: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtypicalSection {
    pub big_m: f64,
    pub beta: f64,
    pub c: f64,
    pub n_env: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenormParams {
    pub m0_grid: Vec<i64>,
    pub gamma: f64,
    pub n_blocks: usize,
    #[serde(default)]
    pub v_hat: Option<Vec<f64>>,
    #[serde(default)]
    pub method: Option<ClassifyMethod>,
    #[serde(default = "n_env")]
    pub samples: usize,
    #[serde(default)]
    pub tube: Option<TubeSection>,
    #[serde(default)]
    pub atypical: Option<AtypicalSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceSection {
    #[serde(default)]
    pub ladder: Option<usize>,
    pub n_traj: usize,
    pub max_steps: usize,
    #[serde(default)]
    pub zeta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CltParams {
    pub n_grid: Vec<u64>,
    pub n_traj: usize,
    #[serde(default)]
    pub v: Option<Vec<f64>>,
    #[serde(default)]
    pub covariance: Option<CovarianceSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixingParams {
    #[serde(default = "fifty")]
    pub probes: usize,
    #[serde(default = "six")]
    pub strip_length: i64,
    #[serde(default = "strong")]
    pub bound: MixingBound,
}

fn fifty() -> usize {
    50
}
fn six() -> i64 {
    6
}
fn strong() -> MixingBound {
    MixingBound::Strong
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TailsParams {
    #[serde(default)]
    pub ladder: Option<usize>,
    pub n_traj: usize,
    pub max_steps: usize,
    #[serde(default)]
    pub zeta: Option<f64>,
    #[serde(default)]
    pub alpha_grid: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub enum Plan {
    Simulate(SimulateParams),
    Regen(RegenExpParams),
    EstimateT(EstimateTParams),
    Kalikow(KalikowParams),
    Renorm(RenormParams),
    Clt(CltParams),
    MixingOracle(MixingParams),
    Tails(TailsParams),
}

fn positive(field: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(LabError::config(field, "must be positive"));
    }
    Ok(())
}

fn regen_params(section: &RegenSection, dir: &Direction, dim: usize, field: &str) -> Result<Vec<RegenParams>> {
    positive(&format!("{field}.n_traj"), section.n_traj)?;
    positive(&format!("{field}.max_steps"), section.max_steps)?;
    let ladders = section.ladders.clone().unwrap_or_else(|| vec![dir.l1() as usize]);
    if ladders.is_empty() {
        return Err(LabError::config(format!("{field}.ladders"), "must not be empty"));
    }
    let zeta = section.zeta.unwrap_or_else(|| default_zeta(dim, 3.0));
    ladders
        .iter()
        .map(|&ladder| {
            let mut p = RegenParams::new(&dir.l_int, ladder, zeta, section.max_steps)
                .map_err(|e| LabError::config(format!("{field}.ladders"), e.to_string()))?;
            if let Some(h) = section.h_cone {
                p.cert.h_cone = h;
            }
            p.stop_after = section.stop_after;
            p.validate().map_err(|e| LabError::config(field.to_string(), e.to_string()))?;
            Ok(p)
        })
        .collect()
}

/// Parses and checks everything the experiment will need; no work is done.
pub fn validate(cfg: &ExperimentConfig) -> Result<Plan> {
    cfg.environment.validate()?;
    let dir = cfg.direction()?;
    let dim = cfg.environment.dim;
    let plan = match cfg.experiment {
        ExperimentKind::Simulate => {
            let p: SimulateParams = cfg.parameters()?;
            if p.n < 1000 {
                return Err(LabError::config("parameters.n", "must be at least 1000"));
            }
            if cfg.seeds.replications < 2 {
                return Err(LabError::config("seeds.replications", "simulate needs at least 2 trajectories"));
            }
            if let Some(r) = &p.regen {
                regen_params(r, &dir, dim, "parameters.regen")?;
            }
            Plan::Simulate(p)
        }
        ExperimentKind::Regen => {
            let p: RegenExpParams = cfg.parameters()?;
            regen_params(&p.section(), &dir, dim, "parameters")?;
            if !(p.mu_band >= 1.0) {
                return Err(LabError::config("parameters.mu_band", "must be at least 1"));
            }
            Plan::Regen(p)
        }
        ExperimentKind::EstimateT => {
            let p: EstimateTParams = cfg.parameters()?;
            if !(p.aspect > 0.0) {
                return Err(LabError::config("parameters.aspect", "must be positive"));
            }
            if p.m_grid.len() < 3 || p.m_grid.windows(2).any(|w| w[1] <= w[0]) || p.m_grid[0] <= 0.0 {
                return Err(LabError::config("parameters.m_grid", "needs at least 3 positive increasing values"));
            }
            if p.samples_per_m < 100 {
                return Err(LabError::config("parameters.samples_per_m", "must be at least 100"));
            }
            if p.oracle && !cfg.environment.is_deterministic() {
                return Err(LabError::config("parameters.oracle", "exact box solves need a deterministic environment"));
            }
            Plan::EstimateT(p)
        }
        ExperimentKind::Kalikow => {
            let p: KalikowParams = cfg.parameters()?;
            if let Some(sets) = &p.sets {
                if sets.is_empty() {
                    return Err(LabError::config("parameters.sets", "must not be empty"));
                }
                for (i, r) in sets.iter().enumerate() {
                    if r.lo.len() != dim || r.hi.len() != dim || r.lo.iter().zip(&r.hi).any(|(a, b)| a > b) {
                        return Err(LabError::config(format!("parameters.sets[{i}]"), "lo/hi must be dim-vectors with lo ≤ hi"));
                    }
                }
            }
            positive("parameters.n_env", p.n_env)?;
            if let Some(sm) = &p.supermartingale {
                if sm.eta_grid.is_empty() || sm.eta_grid.iter().any(|e| !(*e > 0.0)) {
                    return Err(LabError::config("parameters.supermartingale.eta_grid", "values must be positive"));
                }
                positive("parameters.supermartingale.n_walks", sm.n_walks)?;
                if sm.half_width < 1 {
                    return Err(LabError::config("parameters.supermartingale.half_width", "must be at least 1"));
                }
            }
            Plan::Kalikow(p)
        }
        ExperimentKind::Renorm => {
            let p: RenormParams = cfg.parameters()?;
            if p.m0_grid.is_empty() || p.m0_grid.windows(2).any(|w| w[1] <= w[0]) {
                return Err(LabError::config("parameters.m0_grid", "must be non-empty and increasing"));
            }
            let min_m0 = 2.0 * (dim as f64).sqrt();
            if p.m0_grid.iter().any(|&m| (m as f64) <= min_m0) {
                return Err(LabError::config("parameters.m0_grid", format!("every M₀ must exceed 2√d = {min_m0:.3}")));
            }
            if !(p.gamma > 5.0 / 9.0 && p.gamma < 1.0) {
                return Err(LabError::config("parameters.gamma", "must lie in (5/9, 1)"));
            }
            positive("parameters.n_blocks", p.n_blocks)?;
            positive("parameters.samples", p.samples)?;
            if let Some(v) = &p.v_hat {
                if v.len() != dim {
                    return Err(LabError::config("parameters.v_hat", "dimension mismatch"));
                }
            }
            if let Some(t) = &p.tube {
                if t.m0 <= 0 || t.m1 <= 0 || t.m1 % t.m0 != 0 {
                    return Err(LabError::config("parameters.tube.m1", "must be a positive multiple of m0"));
                }
                if !(t.big_m > 0.0) {
                    return Err(LabError::config("parameters.tube.big_m", "must be positive"));
                }
            }
            if let Some(a) = &p.atypical {
                positive("parameters.atypical.n_env", a.n_env)?;
                if !(a.big_m > 0.0) {
                    return Err(LabError::config("parameters.atypical.big_m", "must be positive"));
                }
            }
            Plan::Renorm(p)
        }
        ExperimentKind::Clt => {
            let p: CltParams = cfg.parameters()?;
            if p.n_grid.is_empty() || p.n_grid[0] == 0 || p.n_grid.windows(2).any(|w| w[1] <= w[0]) {
                return Err(LabError::config("parameters.n_grid", "must be positive and increasing"));
            }
            if p.n_traj < 8 {
                return Err(LabError::config("parameters.n_traj", "must be at least 8"));
            }
            if let Some(v) = &p.v {
                if v.len() != dim {
                    return Err(LabError::config("parameters.v", "dimension mismatch"));
                }
            }
            if let Some(c) = &p.covariance {
                let s = RegenSection {
                    ladders: c.ladder.map(|l| vec![l]),
                    zeta: c.zeta,
                    max_steps: c.max_steps,
                    n_traj: c.n_traj,
                    h_cone: None,
                    stop_after: None,
                };
                regen_params(&s, &dir, dim, "parameters.covariance")?;
            }
            Plan::Clt(p)
        }
        ExperimentKind::MixingOracle => {
            let p: MixingParams = cfg.parameters()?;
            if !cfg.environment.is_finite_alphabet() || cfg.environment.kind == EnvKind::Homogeneous {
                return Err(LabError::config("environment.kind", "mixing oracle needs a finite-alphabet i.i.d. or Markov field"));
            }
            positive("parameters.probes", p.probes)?;
            if p.strip_length < 4 {
                return Err(LabError::config("parameters.strip_length", "must be at least 4"));
            }
            Plan::MixingOracle(p)
        }
        ExperimentKind::Tails => {
            let p: TailsParams = cfg.parameters()?;
            let s = RegenSection {
                ladders: p.ladder.map(|l| vec![l]),
                zeta: p.zeta,
                max_steps: p.max_steps,
                n_traj: p.n_traj,
                h_cone: None,
                stop_after: None,
            };
            regen_params(&s, &dir, dim, "parameters")?;
            if p.n_traj < 1000 {
                return Err(LabError::config("parameters.n_traj", "tail fit needs at least 1000 trajectories"));
            }
            if let Some(g) = &p.alpha_grid {
                if g.is_empty() || g.iter().any(|a| !(*a > 0.0)) {
                    return Err(LabError::config("parameters.alpha_grid", "values must be positive"));
                }
            }
            Plan::Tails(p)
        }
    };
    Ok(plan)
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> rwre_core::Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn table_csv(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut wr = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| LabError::Core(rwre_core::Error::from(e));
    wr.write_record(header).map_err(io)?;
    for r in rows {
        wr.write_record(&r).map_err(io)?;
    }
    wr.into_inner().map_err(|e| LabError::config("<csv>", e.to_string()))
}

fn f(v: f64) -> String {
    format!("{v:?}")
}

fn exact_drift(spec: &EnvironmentSpec) -> Option<Vec<f64>> {
    if spec.is_deterministic() {
        spec.vector.as_ref().map(|v| TransitionVector::new(v).drift())
    } else {
        None
    }
}

fn run_regen(
    spec: &EnvironmentSpec,
    params: &[RegenParams],
    n_traj: usize,
    seed: u64,
) -> Result<(BTreeMap<usize, RegenStats>, usize)> {
    let mut by_l = BTreeMap::new();
    let mut diagnostics = 0;
    for p in params {
        let (stats, diags) = regen_batch(spec, p, n_traj, derive_seed(seed, &[TAG_REG, p.ladder as u64]))?;
        diagnostics += diags.iter().filter(|d| d.is_some()).count();
        by_l.insert(p.ladder, stats);
    }
    Ok((by_l, diagnostics))
}

/// Runs a validated plan. Must be called inside the worker pool; results
/// do not depend on its size.
pub fn execute(cfg: &ExperimentConfig, plan: &Plan) -> Result<Outputs> {
    let spec = &cfg.environment;
    let dir = cfg.direction()?;
    let seed = cfg.seeds.master;
    let dim = spec.dim;
    match plan {
        Plan::Simulate(p) => {
            let lln = lln_check(spec, &dir.ell, p.n, cfg.seeds.replications, seed)?;
            let steps = p.trajectory_steps.unwrap_or(p.n.min(100_000));
            let env = make_environment(&spec.clone().with_seed(derive_seed(seed, &[TAG_SIM, 0])))?;
            let walk_seed = derive_seed(seed, &[TAG_SIM, 1]);
            let mut traj = CoupledTrajectory::new(&Site::origin(dim), p.mode, walk_seed);
            Walker::new(&env, Site::origin(dim), p.mode, stream(walk_seed, 0)).extend(&mut traj, steps as usize)?;
            traj.check_invariants()?;
            let mut csvs = vec![("trajectory.csv".to_string(), csv_bytes(|b| traj.write_csv(b))?)];
            let mut velocity = Value::Null;
            let mut agreement = Value::Null;
            if let Some(r) = &p.regen {
                let params = regen_params(r, &dir, dim, "parameters.regen")?;
                let (by_l, diagnostics) = run_regen(spec, &params, r.n_traj, seed)?;
                for (l, s) in &by_l {
                    csvs.push((format!("regen_L{l}.csv"), csv_bytes(|b| s.write_csv(b))?));
                }
                let est = estimate_velocity(&by_l)?;
                let z: Vec<f64> = (0..dim)
                    .map(|i| (lln.v_hat[i] - est.v[i]) / (lln.se[i].powi(2) + est.se[i].powi(2)).sqrt())
                    .collect();
                agreement = json!({
                    "z": z,
                    "within_3_sigma": z.iter().all(|z| z.abs() < 3.0),
                });
                velocity = json!({ "estimate": est, "diagnostics": diagnostics });
            }
            let final_pos = traj.last().coords().to_vec();
            Ok(Outputs {
                results: json!({
                    "lln": lln,
                    "exact_drift": exact_drift(spec),
                    "trajectory": { "steps": steps, "mode": p.mode, "final_position": final_pos },
                    "regeneration_velocity": velocity,
                    "agreement": agreement,
                }),
                csvs,
            })
        }
        Plan::Regen(p) => {
            let params = regen_params(&p.section(), &dir, dim, "parameters")?;
            let (by_l, diagnostics) = run_regen(spec, &params, p.n_traj, seed)?;
            let mut rows = Vec::new();
            let mut csvs = Vec::new();
            for (l, s) in &by_l {
                let near = near_iid_test(s, p.mu_band);
                rows.push(json!({
                    "ladder": l,
                    "n_trajectories": s.n_trajectories,
                    "n_certified": s.n_certified,
                    "n_truncated": s.n_truncated,
                    "n_increments": s.increments.len(),
                    "n_first": s.firsts.len(),
                    "near_iid": near.as_ref().ok(),
                    "near_iid_note": near.as_ref().err().map(|e| e.to_string()),
                }));
                csvs.push((format!("regen_L{l}.csv"), csv_bytes(|b| s.write_csv(b))?));
            }
            let velocity = estimate_velocity(&by_l);
            let largest = by_l.values().next_back().expect("at least one ladder");
            let direction = estimate_direction(largest, derive_seed(seed, &[TAG_REG, 99]));
            Ok(Outputs {
                results: json!({
                    "ladders": rows,
                    "velocity": velocity.as_ref().ok(),
                    "velocity_note": velocity.as_ref().err().map(|e| e.to_string()),
                    "direction": direction.as_ref().ok(),
                    "direction_note": direction.as_ref().err().map(|e| e.to_string()),
                    "diagnostics": diagnostics,
                }),
                csvs,
            })
        }
        Plan::EstimateT(p) => {
            let report = estimate_condition_t(
                spec,
                &dir,
                p.aspect,
                &p.m_grid,
                p.samples_per_m,
                &TOptions {
                    horizon: p.horizon,
                    seed,
                },
            )?;
            let mut oracle = Vec::new();
            if p.oracle {
                let env = make_environment(spec)?;
                for c in &report.cells {
                    let b = t_box(dim, &dir, c.m, p.aspect)?;
                    let exact = t_fail_probability_exact(&env, &b, &SolveOptions::default())?;
                    let se = (exact * (1.0 - exact) / c.samples as f64).sqrt();
                    let z = if se > 0.0 { (c.p_fail - exact) / se } else { 0.0 };
                    oracle.push(json!({ "m": c.m, "p_exact": exact, "z": z, "within_3_sigma": z.abs() <= 3.0 }));
                }
            }
            let rows = report
                .cells
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    vec![
                        f(c.m),
                        c.samples.to_string(),
                        c.failures.to_string(),
                        c.unresolved.to_string(),
                        f(c.p_fail),
                        f(c.ci.0),
                        f(c.ci.1),
                        oracle.get(i).map_or(String::new(), |o| f(o["p_exact"].as_f64().unwrap_or(f64::NAN))),
                    ]
                })
                .collect();
            let csv = table_csv(
                &["m", "samples", "failures", "unresolved", "p_fail", "ci_lo", "ci_hi", "p_exact"],
                rows,
            )?;
            Ok(Outputs {
                results: json!({ "report": report, "oracle": if p.oracle { Value::from(oracle) } else { Value::Null } }),
                csvs: vec![("t_scan.csv".into(), csv)],
            })
        }
        Plan::Kalikow(p) => {
            let sets: Vec<Vec<Site>> = match &p.sets {
                Some(s) => s.iter().map(|r| rectangle(&r.lo, &r.hi)).collect(),
                None => (0..=1)
                    .map(|k| rectangle(&vec![-k; dim], &vec![k; dim]))
                    .collect(),
            };
            let opts = KalikowOptions {
                n_env: p.n_env,
                seed,
                ..Default::default()
            };
            let probe = kalikow_delta(spec, &sets, &dir.ell, &opts)?;
            let mut checks = Vec::new();
            if p.verify {
                for (i, v) in sets.iter().enumerate() {
                    let c = verify_kalikow_proposition(spec, v, &opts, p.mc_walks)?;
                    checks.push(json!({ "set": i, "tv": c.tv, "exact": c.exact, "max_z": c.max_z }));
                }
            }
            let sm = match &p.supermartingale {
                Some(s) => {
                    let h = s.half_width;
                    let v = rectangle(&vec![-h; dim], &vec![h; dim]);
                    Some(supermartingale_diagnostic(spec, &dir.l_int, &s.eta_grid, &v, s.n_steps, s.n_walks, seed)?)
                }
                None => None,
            };
            let rows = probe
                .per_set
                .iter()
                .enumerate()
                .map(|(i, m)| vec![i.to_string(), sets[i].len().to_string(), f(*m)])
                .collect();
            Ok(Outputs {
                results: json!({ "probe": probe, "checks": checks, "supermartingale": sm }),
                csvs: vec![("kalikow_sets.csv".into(), table_csv(&["set", "sites", "min_drift"], rows)?)],
            })
        }
        Plan::Renorm(p) => {
            let v_hat = p.v_hat.clone().unwrap_or_else(|| dir.ell.clone());
            let opts = ClassifyOptions {
                method: p.method,
                samples: p.samples,
                seed,
                ..Default::default()
            };
            let scan = bad_fraction_scan(spec, &p.m0_grid, p.gamma, p.n_blocks, &v_hat, &opts)?;
            let tube = match &p.tube {
                Some(t) => {
                    let ell: Vec<f64> = dir.ell.clone();
                    let tube = build_tube(&vec![0; dim], t.m0, t.m1, t.big_m, &v_hat, &ell, p.gamma)?;
                    let env = make_environment(&spec.clone().with_seed(derive_seed(seed, &[TAG_SIM, 7])))?;
                    let count = min_bad_count(&env, &tube, &opts)?;
                    Some(json!({
                        "j": tube.j,
                        "columns": tube.columns.len(),
                        "top_sites": tube.top.len(),
                        "min_bad": count,
                    }))
                }
                None => None,
            };
            let atypical = match &p.atypical {
                Some(a) => Some(atypical_quenched_probe(spec, &dir.ell, a.big_m, a.beta, a.c, a.n_env, seed)?),
                None => None,
            };
            let rows = scan
                .rows
                .iter()
                .map(|r| {
                    vec![
                        r.m0.to_string(),
                        r.n_blocks.to_string(),
                        r.n_bad.to_string(),
                        f(r.p_bad),
                        f(r.ci.0),
                        f(r.ci.1),
                    ]
                })
                .collect();
            Ok(Outputs {
                results: json!({ "scan": scan, "tube": tube, "atypical": atypical }),
                csvs: vec![(
                    "bad_fraction.csv".into(),
                    table_csv(&["m0", "n_blocks", "n_bad", "p_bad", "ci_lo", "ci_hi"], rows)?,
                )],
            })
        }
        Plan::Clt(p) => {
            let (v, source) = match (&p.v, exact_drift(spec)) {
                (Some(v), _) => (v.clone(), "configured"),
                (None, Some(v)) => (v, "exact-drift"),
                (None, None) => {
                    let n = (*p.n_grid.last().unwrap()).max(1000);
                    (lln_check(spec, &dir.ell, n, p.n_traj, derive_seed(seed, &[TAG_SIM, 2]))?.v_hat, "lln")
                }
            };
            let (mut report, marginals) = clt_scaling(spec, &v, &dir.ell, &p.n_grid, p.n_traj, seed)?;
            if let Some(c) = &p.covariance {
                let s = RegenSection {
                    ladders: c.ladder.map(|l| vec![l]),
                    zeta: c.zeta,
                    max_steps: c.max_steps,
                    n_traj: c.n_traj,
                    h_cone: None,
                    stop_after: None,
                };
                let params = regen_params(&s, &dir, dim, "parameters.covariance")?;
                let (by_l, _) = run_regen(spec, &params, c.n_traj, seed)?;
                let stats = by_l.values().next().expect("one ladder");
                report.covariance_hat = Some(renewal_covariance(stats, &v, spec.kappa)?);
            }
            let rows = report
                .rows
                .iter()
                .map(|r| {
                    vec![
                        r.n.to_string(),
                        r.projection.clone(),
                        f(r.anderson_darling.statistic),
                        f(r.anderson_darling.p_value),
                        f(r.variance_per_step),
                    ]
                })
                .collect();
            Ok(Outputs {
                results: json!({ "v_source": source, "report": report }),
                csvs: vec![
                    ("clt_marginals.csv".into(), csv_bytes(|b| marginals.write_csv(b))?),
                    (
                        "clt_tests.csv".into(),
                        table_csv(&["n", "projection", "statistic", "p", "variance_per_step"], rows)?,
                    ),
                ],
            })
        }
        Plan::MixingOracle(p) => {
            let results = match spec.kind {
                EnvKind::IidFiniteAlphabet => {
                    let probes = iid_mixing_probes(spec, p.probes, seed)?;
                    let max_dev = probes.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);
                    json!({
                        "kind": "iid",
                        "probes": probes.len(),
                        "ratios": probes,
                        "max_abs_deviation": max_dev,
                        "all_exactly_one": probes.iter().all(|&r| r == 1.0),
                    })
                }
                _ => {
                    let m = measure_mixing_constants(spec, p.strip_length, p.bound)?;
                    let checks = strip_mixing_checks(spec, p.strip_length, m.c, m.g, p.bound)?;
                    let worst = checks.iter().map(|c| c.0 / c.1).fold(0.0, f64::max);
                    json!({
                        "kind": "markov",
                        "measured": m,
                        "checks": checks.len(),
                        "max_ratio_over_bound": worst,
                        "all_within_bound": checks.iter().all(|c| c.0 <= c.1),
                    })
                }
            };
            Ok(Outputs {
                results,
                csvs: vec![],
            })
        }
        Plan::Tails(p) => {
            let s = RegenSection {
                ladders: p.ladder.map(|l| vec![l]),
                zeta: p.zeta,
                max_steps: p.max_steps,
                n_traj: p.n_traj,
                h_cone: None,
                stop_after: Some(1),
            };
            let params = regen_params(&s, &dir, dim, "parameters")?;
            let (by_l, diagnostics) = run_regen(spec, &params, p.n_traj, seed)?;
            let stats = by_l.values().next().expect("one ladder");
            let taus: Vec<u64> = stats.firsts.iter().map(|f| f.tau).collect();
            let grid = p.alpha_grid.clone().unwrap_or_else(|| default_alpha_grid(dim));
            let tail = tau_tail_fit(&taus, &grid)?;
            let rows = tail
                .survival
                .iter()
                .map(|s| vec![s.u.to_string(), f(s.survival), f(s.band.0), f(s.band.1)])
                .collect();
            Ok(Outputs {
                results: json!({
                    "tail": tail,
                    "n_trajectories": stats.n_trajectories,
                    "n_without_regeneration": stats.n_trajectories - taus.len(),
                    "diagnostics": diagnostics,
                }),
                csvs: vec![("tail.csv".into(), table_csv(&["u", "survival", "band_lo", "band_hi"], rows)?)],
            })
        }
    }
}

/// Random admissible instances `(Δ, V, A, η, η′)` for an i.i.d. field:
/// `V` a random rectangle, `Δ ⊂ V`, `η` on part of the outer boundary of `V`,
/// `A ⊂ dom(η)` where `η′` is resampled.
pub fn iid_mixing_probes(spec: &EnvironmentSpec, n: usize, seed: u64) -> Result<Vec<f64>> {
    let dim = spec.dim;
    let nletters = spec.letters()?.len();
    let mut rng = stream(derive_seed(seed, &[TAG_MIX]), 0);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let hi: Vec<i64> = (0..dim).map(|i| if i < 2 { rng.random_range(0..3) } else { 0 }).collect();
        let v = rectangle(&vec![0; dim], &hi);
        let delta: Vec<Site> = v.iter().filter(|_| rng.random_bool(0.5)).cloned().collect();
        if delta.is_empty() {
            continue;
        }
        let boundary: Vec<Site> = r_boundary(&v, 1).into_iter().filter(|_| rng.random_bool(0.6)).collect();
        if boundary.is_empty() {
            continue;
        }
        let a: Vec<Site> = boundary.iter().filter(|_| rng.random_bool(0.5)).cloned().collect();
        let eta: BTreeMap<Site, usize> = boundary
            .iter()
            .map(|y| (y.clone(), rng.random_range(0..nletters)))
            .collect();
        let mut eta2 = eta.clone();
        for y in &a {
            eta2.insert(y.clone(), rng.random_range(0..nletters));
        }
        let cert = exact_conditional_ratio(spec, &delta, &v, &a, &eta, &eta2, &MixingOptions::default())?;
        out.push(cert.ratio);
    }
    Ok(out)
}

/// `(ratio, bound)` for every Δ in {single sites, adjacent pairs, all of V}
/// and A in {right end, both ends} over all end configurations of a strip.
pub fn strip_mixing_checks(
    spec: &EnvironmentSpec,
    length: i64,
    c: f64,
    g: f64,
    bound: MixingBound,
) -> Result<Vec<(f64, f64)>> {
    let nletters = spec.letters()?.len();
    let s = strip_sites(spec.dim, length);
    let n = s.len();
    let v = s[1..n - 1].to_vec();
    let mut deltas: Vec<Vec<Site>> = v.iter().map(|x| vec![x.clone()]).collect();
    deltas.extend(v.windows(2).map(|w| w.to_vec()));
    deltas.push(v.clone());
    let ends = [s[0].clone(), s[n - 1].clone()];
    let opts = MixingOptions {
        bound,
        constants: Some((c, g)),
        ..Default::default()
    };
    let mut out = Vec::new();
    for delta in &deltas {
        for both in [false, true] {
            let a: Vec<Site> = if both { ends.to_vec() } else { vec![ends[1].clone()] };
            let combos = nletters.pow(4);
            for code in 0..combos {
                let sym = |k: usize| (code / nletters.pow(k as u32)) % nletters;
                let (x0, x1, y0, y1) = (sym(0), sym(1), sym(2), sym(3));
                let y0 = if both { y0 } else { x0 };
                let eta: BTreeMap<Site, usize> = [(ends[0].clone(), x0), (ends[1].clone(), x1)].into();
                let eta2: BTreeMap<Site, usize> = [(ends[0].clone(), y0), (ends[1].clone(), y1)].into();
                let cert = exact_conditional_ratio(spec, delta, &v, &a, &eta, &eta2, &opts)?;
                out.push((cert.ratio, cert.bound));
            }
        }
    }
    Ok(out)
}
