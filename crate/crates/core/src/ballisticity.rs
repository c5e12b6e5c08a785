//! Ballisticity diagnostics: box-exit estimates for condition (T), the
//! Kalikow auxiliary chain, and the exponential supermartingale probe.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::{make_environment, EnvKind, EnvironmentSpec, Field, TransitionVector, WindowField};
use crate::error::{Error, Result};
use crate::lattice::{step_dot, unit_vector, BoxSpec, Direction, Site};
use crate::linsolve::SolveOptions;
use crate::oracle::{annealed_exit_law, for_each_environment, solve_absorbing, OracleBudget};
use crate::rng::{derive_seed, stream};
use crate::stats::{binomial_logit_profile, mean_se, wilson, wls, LinearFit, ProfileSlope};
use crate::walk::{exit_site, Walker, StopSpec, WalkMode};

const TAG_T: u64 = 0x54;
const TAG_KAL: u64 = 0x4b41;
const TAG_SM: u64 = 0x534d;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TVerdict {
    SupportsT,
    RejectsT,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TCell {
    pub m: f64,
    pub samples: usize,
    pub failures: usize,
    /// Walks still inside the box at the horizon (counted as failures).
    pub unresolved: usize,
    pub p_fail: f64,
    pub ci: (f64, f64),
    /// Value used in the fit: `p_fail`, or `3/n` when no failure was seen.
    pub p_fit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TConditionReport {
    pub direction: Direction,
    pub aspect: f64,
    pub cells: Vec<TCell>,
    pub fit: LinearFit,
    /// Binomial-likelihood slope on the logit scale; reported alongside the
    /// fit, not used for the verdict.
    pub likelihood: Option<ProfileSlope>,
    pub verdict: TVerdict,
}

impl TConditionReport {
    pub fn m_grid(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.m).collect()
    }
}

#[derive(Clone, Debug)]
pub struct TOptions {
    pub horizon: u64,
    pub seed: u64,
}

/// The box `B_{M, 𝔯M, ℓ}(0)`.
pub fn t_box(dim: usize, direction: &Direction, m: f64, aspect: f64) -> Result<BoxSpec> {
    BoxSpec::new(Site::origin(dim), m, aspect * m, direction.clone())
}

/// Estimates `P₀[X_{T_B} ∉ ∂⁺B]` on `B_{M,𝔯M,ℓ}(0)` for each `M`, with a
/// fresh environment per walk, and fits `log p` against `M`.
pub fn estimate_condition_t(
    spec: &EnvironmentSpec,
    direction: &Direction,
    aspect: f64,
    m_grid: &[f64],
    samples_per_m: usize,
    opts: &TOptions,
) -> Result<TConditionReport> {
    spec.validate()?;
    if m_grid.len() < 3 || m_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::spec("parameters.m_grid", "needs at least 3 increasing values"));
    }
    if samples_per_m < 100 {
        return Err(Error::spec("parameters.samples_per_m", "must be at least 100"));
    }
    if !(aspect > 0.0) {
        return Err(Error::spec("parameters.aspect", "must be positive"));
    }
    let mut cells = Vec::with_capacity(m_grid.len());
    for (mi, &m) in m_grid.iter().enumerate() {
        let b = t_box(spec.dim, direction, m, aspect)?;
        let stop = StopSpec::box_exit(b.clone(), opts.horizon);
        let outcomes: Vec<Result<(bool, bool)>> = (0..samples_per_m as u64)
            .into_par_iter()
            .map(|i| {
                let env_seed = derive_seed(opts.seed, &[TAG_T, mi as u64, i, 0]);
                let walk_seed = derive_seed(opts.seed, &[TAG_T, mi as u64, i, 1]);
                let env = make_environment(&spec.clone().with_seed(env_seed))?;
                let (z, out) =
                    exit_site(&env, &Site::origin(spec.dim), &stop, WalkMode::Quenched, stream(walk_seed, 0))?;
                if out.kind == "horizon" {
                    return Ok((true, true));
                }
                Ok((!b.on_positive_side(&z), false))
            })
            .collect();
        let (mut fails, mut unresolved) = (0usize, 0usize);
        for o in outcomes {
            let (f, u) = o?;
            fails += f as usize;
            unresolved += u as usize;
        }
        let n = samples_per_m;
        let p = fails as f64 / n as f64;
        cells.push(TCell {
            m,
            samples: n,
            failures: fails,
            unresolved,
            p_fail: p,
            ci: wilson(fails as u64, n as u64, 1.96),
            p_fit: if fails == 0 { 3.0 / n as f64 } else { p },
        });
    }
    let x: Vec<f64> = cells.iter().map(|c| c.m).collect();
    let y: Vec<f64> = cells.iter().map(|c| c.p_fit.ln()).collect();
    // Delta-method variance of log p̂ at the fitted value: (1 - p) / (n p).
    let w: Vec<f64> = cells
        .iter()
        .map(|c| c.samples as f64 * c.p_fit / (1.0 - c.p_fit).max(1e-12))
        .collect();
    let fit = wls(&x, &y, &w)?;
    let k: Vec<u64> = cells.iter().map(|c| c.failures as u64).collect();
    let n: Vec<u64> = cells.iter().map(|c| c.samples as u64).collect();
    let likelihood = binomial_logit_profile(&x, &k, &n, 2.0, 20.0).ok();
    let all_unresolved = cells.iter().any(|c| c.unresolved == c.samples);
    let persistent = cells.iter().all(|c| c.failures > 0);
    let verdict = if all_unresolved {
        TVerdict::Inconclusive
    } else if fit.slope + 2.0 * fit.slope_se < 0.0 {
        TVerdict::SupportsT
    } else if persistent {
        TVerdict::RejectsT
    } else {
        TVerdict::Inconclusive
    };
    Ok(TConditionReport {
        direction: direction.clone(),
        aspect,
        cells,
        fit,
        likelihood,
        verdict,
    })
}

/// Exact `P₀[X_{T_B} ∉ ∂⁺B]` for a realized environment.
pub fn t_fail_probability_exact<F: Field + ?Sized>(field: &F, b: &BoxSpec, opts: &SolveOptions) -> Result<f64> {
    let sites = b.sites();
    let sol = solve_absorbing(field, &sites, &Site::origin(field.dim()), opts)?;
    Ok(sol.exit_mass(|z| !b.on_positive_side(z)))
}

/// The Kalikow kernel `P̂_V(x, x+e)` on a finite connected `V ∋ 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KalikowKernel {
    pub v_set: Vec<Site>,
    pub p_hat: BTreeMap<Site, Vec<f64>>,
    pub drifts: BTreeMap<Site, Vec<f64>>,
    pub n_env_samples: usize,
    pub exact: bool,
}

impl KalikowKernel {
    fn from_sums(v_set: &[Site], num: &BTreeMap<Site, Vec<f64>>, den: &BTreeMap<Site, f64>, n: usize, exact: bool) -> Self {
        let mut p_hat = BTreeMap::new();
        let mut drifts = BTreeMap::new();
        for x in v_set {
            let g = den[x];
            let row: Vec<f64> = num[x].iter().map(|v| v / g).collect();
            drifts.insert(x.clone(), drift_of(&row));
            p_hat.insert(x.clone(), row);
        }
        KalikowKernel {
            v_set: v_set.to_vec(),
            p_hat,
            drifts,
            n_env_samples: n,
            exact,
        }
    }

    /// `d̂_V(x)·l`.
    pub fn drift_dot(&self, x: &Site, l: &[f64]) -> f64 {
        self.drifts[x].iter().zip(l).map(|(a, b)| a * b).sum()
    }

    /// The kernel as a realized field on `V`.
    pub fn as_field(&self, kappa: f64) -> WindowField {
        let dim = self.v_set[0].dim();
        let mut w = WindowField::new(dim, kappa);
        for (x, row) in &self.p_hat {
            w.insert(x.clone(), TransitionVector::new(row));
        }
        w
    }

    pub fn max_row_defect(&self) -> f64 {
        self.p_hat
            .values()
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

fn drift_of(row: &[f64]) -> Vec<f64> {
    let d = row.len() / 2;
    (0..d).map(|i| row[2 * i] - row[2 * i + 1]).collect()
}

/// Checks `0 ∈ V` and nearest-neighbor connectivity.
pub fn check_connected(v_set: &[Site]) -> Result<()> {
    let set: BTreeSet<&Site> = v_set.iter().collect();
    let o = v_set
        .first()
        .map(|s| Site::origin(s.dim()))
        .ok_or_else(|| Error::Precondition("empty site set".into()))?;
    if !set.contains(&o) {
        return Err(Error::Precondition("V must contain the origin".into()));
    }
    let mut seen: BTreeSet<Site> = BTreeSet::from([o.clone()]);
    let mut queue = VecDeque::from([o]);
    while let Some(x) = queue.pop_front() {
        for y in x.neighbors() {
            if set.contains(&y) && seen.insert(y.clone()) {
                queue.push_back(y);
            }
        }
    }
    if seen.len() != set.len() {
        return Err(Error::Precondition("V is not connected".into()));
    }
    Ok(())
}

/// Occupation-weighted sums `Σ_x G(0,x) ω(x,·)` and `G(0,x)` for one field.
fn green_sums<F: Field + ?Sized>(
    field: &F,
    v_set: &[Site],
    opts: &SolveOptions,
) -> Result<(BTreeMap<Site, Vec<f64>>, BTreeMap<Site, f64>)> {
    let sol = solve_absorbing(field, v_set, &Site::origin(field.dim()), opts)
        .map_err(|e| match e {
            Error::Solve(m) => Error::Solve(format!("internal: singular Kalikow system ({m})")),
            e => e,
        })?;
    let mut num = BTreeMap::new();
    for (x, &g) in &sol.green {
        let tv = field.transition(x);
        num.insert(x.clone(), tv.probs.iter().map(|p| g * p).collect());
    }
    Ok((num, sol.green))
}

/// Quenched kernel: Green's function of the realized environment.
pub fn kalikow_kernel_exact<F: Field + ?Sized>(field: &F, v_set: &[Site], opts: &SolveOptions) -> Result<KalikowKernel> {
    check_connected(v_set)?;
    let (num, den) = green_sums(field, v_set, opts)?;
    let mut sorted = v_set.to_vec();
    sorted.sort();
    Ok(KalikowKernel::from_sums(&sorted, &num, &den, 1, true))
}

fn accumulate(
    acc: &mut (BTreeMap<Site, Vec<f64>>, BTreeMap<Site, f64>),
    part: (BTreeMap<Site, Vec<f64>>, BTreeMap<Site, f64>),
    weight: f64,
) {
    for (x, row) in part.0 {
        let e = acc.0.entry(x).or_insert_with(|| vec![0.0; row.len()]);
        e.iter_mut().zip(&row).for_each(|(a, b)| *a += weight * b);
    }
    for (x, g) in part.1 {
        *acc.1.entry(x).or_insert(0.0) += weight * g;
    }
}

#[derive(Clone, Debug)]
pub struct KalikowOptions {
    pub n_env: usize,
    pub seed: u64,
    pub budget: OracleBudget,
}

impl Default for KalikowOptions {
    fn default() -> Self {
        KalikowOptions {
            n_env: 1000,
            seed: 0,
            budget: OracleBudget::default(),
        }
    }
}

fn enumerable(spec: &EnvironmentSpec, v_set: &[Site], budget: &OracleBudget) -> bool {
    if !matches!(spec.kind, EnvKind::Homogeneous | EnvKind::IidFiniteAlphabet) {
        return false;
    }
    let a = spec.letters().map(|l| l.len() as u128).unwrap_or(u128::MAX);
    a.checked_pow(v_set.len() as u32).is_some_and(|c| c <= budget.environments)
}

/// Annealed kernel: numerators and denominators averaged separately over
/// environments, by full enumeration when the alphabet allows it and by
/// `n_env` sampled draws otherwise.
pub fn kalikow_kernel_annealed(spec: &EnvironmentSpec, v_set: &[Site], opts: &KalikowOptions) -> Result<KalikowKernel> {
    check_connected(v_set)?;
    spec.validate()?;
    let mut sorted = v_set.to_vec();
    sorted.sort();
    let mut acc = (BTreeMap::new(), BTreeMap::new());
    if enumerable(spec, v_set, &opts.budget) {
        let mut count = 0usize;
        for_each_environment(spec, &sorted, &opts.budget, |w, weight| {
            accumulate(&mut acc, green_sums(w, &sorted, &opts.budget.solve)?, weight);
            count += 1;
            Ok(())
        })?;
        return Ok(KalikowKernel::from_sums(&sorted, &acc.0, &acc.1, count, true));
    }
    if opts.n_env == 0 {
        return Err(Error::spec("parameters.n_env", "must be at least 1"));
    }
    let parts: Vec<Result<_>> = (0..opts.n_env as u64)
        .into_par_iter()
        .map(|i| {
            let env = make_environment(&spec.clone().with_seed(derive_seed(opts.seed, &[TAG_KAL, i])))?;
            green_sums(&env, &sorted, &opts.budget.solve)
        })
        .collect();
    for p in parts {
        accumulate(&mut acc, p?, 1.0);
    }
    Ok(KalikowKernel::from_sums(&sorted, &acc.0, &acc.1, opts.n_env, false))
}

/// Monte Carlo Kalikow kernel from step counts of `n_walks` annealed walks
/// killed on leaving `V`, with delta-method standard errors.
pub fn kalikow_kernel_mc(
    spec: &EnvironmentSpec,
    v_set: &[Site],
    n_walks: usize,
    seed: u64,
    fixed_env: Option<&dyn Field>,
) -> Result<(BTreeMap<Site, Vec<f64>>, BTreeMap<Site, Vec<f64>>)> {
    check_connected(v_set)?;
    let index: BTreeMap<Site, usize> = v_set.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
    let k = 2 * spec.dim;
    // Per-walk visits and step counts, kept per walk for the ratio SE.
    let per_walk: Vec<Result<Vec<(usize, Vec<u32>)>>> = (0..n_walks as u64)
        .into_par_iter()
        .map(|i| {
            let walk_seed = derive_seed(seed, &[TAG_KAL, 1, i]);
            let owned;
            let field: &dyn Field = match fixed_env {
                Some(f) => f,
                None => {
                    owned = make_environment(&spec.clone().with_seed(derive_seed(seed, &[TAG_KAL, 0, i])))?;
                    &owned
                }
            };
            let mut counts: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
            let mut w = Walker::new(field, Site::origin(spec.dim), WalkMode::Quenched, stream(walk_seed, 0));
            while let Some(&xi) = index.get(w.position()) {
                let before = w.position().clone();
                w.advance()?;
                let after = w.position();
                let dir = (0..k).find(|&j| before.step(j) == *after).expect("nearest-neighbor step");
                counts.entry(xi).or_insert_with(|| vec![0; k])[dir] += 1;
            }
            Ok(counts.into_iter().collect())
        })
        .collect();
    let n = n_walks as f64;
    let mut tot_visits = vec![0.0; v_set.len()];
    let mut tot_steps = vec![vec![0.0; k]; v_set.len()];
    let mut walks = Vec::with_capacity(n_walks);
    for r in per_walk {
        let c = r?;
        for (xi, row) in &c {
            let v: u32 = row.iter().sum();
            tot_visits[*xi] += v as f64;
            for j in 0..k {
                tot_steps[*xi][j] += row[j] as f64;
            }
        }
        walks.push(c);
    }
    let mut kernel = BTreeMap::new();
    let mut se = BTreeMap::new();
    for (x, &xi) in &index {
        if tot_visits[xi] == 0.0 {
            continue;
        }
        let ratio: Vec<f64> = (0..k).map(|j| tot_steps[xi][j] / tot_visits[xi]).collect();
        let mean_v = tot_visits[xi] / n;
        let mut ss = vec![0.0; k];
        for c in &walks {
            let row = c.iter().find(|(i, _)| *i == xi).map(|(_, r)| r.clone());
            let (v, steps) = match row {
                Some(r) => (r.iter().sum::<u32>() as f64, r),
                None => (0.0, vec![0; k]),
            };
            for j in 0..k {
                let d = steps[j] as f64 - ratio[j] * v;
                ss[j] += d * d;
            }
        }
        let errs: Vec<f64> = ss.iter().map(|s| (s / (n - 1.0)).sqrt() / (mean_v * n.sqrt())).collect();
        kernel.insert(x.clone(), ratio);
        se.insert(x.clone(), errs);
    }
    Ok((kernel, se))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KalikowProbe {
    /// `min` over the supplied family and sites of `d̂_V(x)·l`. A minimum over
    /// a subfamily bounds the true infimum from above.
    pub delta: f64,
    pub argmin_set: usize,
    pub argmin_site: Site,
    pub per_set: Vec<f64>,
    pub exact: bool,
    pub label: String,
}

pub fn kalikow_delta(
    spec: &EnvironmentSpec,
    family: &[Vec<Site>],
    l: &[f64],
    opts: &KalikowOptions,
) -> Result<KalikowProbe> {
    if family.is_empty() {
        return Err(Error::Precondition("empty family of sets".into()));
    }
    let mut best = (f64::INFINITY, 0, Site::origin(spec.dim));
    let mut per_set = Vec::with_capacity(family.len());
    let mut exact = true;
    for (i, v) in family.iter().enumerate() {
        let kk = kalikow_kernel_annealed(spec, v, opts)?;
        exact &= kk.exact;
        let mut m = f64::INFINITY;
        for x in &kk.v_set {
            let d = kk.drift_dot(x, l);
            if d < m {
                m = d;
            }
            if d < best.0 {
                best = (d, i, x.clone());
            }
        }
        per_set.push(m);
    }
    Ok(KalikowProbe {
        delta: best.0,
        argmin_set: best.1,
        argmin_site: best.2,
        per_set,
        exact,
        label: "family-restricted probe; upper bound on the infimum over all finite connected sets".into(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KalikowCheck {
    pub tv: f64,
    pub exact: bool,
    /// Largest per-site z-score between the two exit laws (Monte Carlo side).
    pub max_z: Option<f64>,
    pub kalikow_exit: BTreeMap<Site, f64>,
    pub annealed_exit: BTreeMap<Site, f64>,
}

fn tv_distance(a: &BTreeMap<Site, f64>, b: &BTreeMap<Site, f64>) -> f64 {
    let keys: BTreeSet<&Site> = a.keys().chain(b.keys()).collect();
    0.5 * keys
        .into_iter()
        .map(|k| (a.get(k).unwrap_or(&0.0) - b.get(k).unwrap_or(&0.0)).abs())
        .sum::<f64>()
}

/// Exit law of the Kalikow chain against the annealed exit law of the walk.
pub fn verify_kalikow_proposition(
    spec: &EnvironmentSpec,
    v_set: &[Site],
    opts: &KalikowOptions,
    mc_walks: usize,
) -> Result<KalikowCheck> {
    let kk = kalikow_kernel_annealed(spec, v_set, opts)?;
    let o = Site::origin(spec.dim);
    let kal = solve_absorbing(&kk.as_field(spec.kappa), &kk.v_set, &o, &opts.budget.solve)?.exit_law;
    if kk.exact {
        let ann = annealed_exit_law(spec, &kk.v_set, &o, &opts.budget)?;
        return Ok(KalikowCheck {
            tv: tv_distance(&kal, &ann),
            exact: true,
            max_z: None,
            kalikow_exit: kal,
            annealed_exit: ann,
        });
    }
    // Annealed side by Monte Carlo.
    let b: BTreeSet<&Site> = kk.v_set.iter().collect();
    let exits: Vec<Result<Site>> = (0..mc_walks as u64)
        .into_par_iter()
        .map(|i| {
            let env = make_environment(&spec.clone().with_seed(derive_seed(opts.seed, &[TAG_KAL, 2, i])))?;
            let mut w = Walker::new(&env, o.clone(), WalkMode::Quenched, stream(derive_seed(opts.seed, &[TAG_KAL, 3, i]), 0));
            while b.contains(w.position()) {
                w.advance()?;
            }
            Ok(w.position().clone())
        })
        .collect();
    let mut counts: BTreeMap<Site, u64> = BTreeMap::new();
    for e in exits {
        *counts.entry(e?).or_insert(0) += 1;
    }
    let n = mc_walks as f64;
    let ann: BTreeMap<Site, f64> = counts.iter().map(|(s, &c)| (s.clone(), c as f64 / n)).collect();
    let mut max_z: f64 = 0.0;
    for (z, &p) in &kal {
        let q = ann.get(z).copied().unwrap_or(0.0);
        let se = (p * (1.0 - p) / n).sqrt().max(1e-300);
        max_z = max_z.max((q - p).abs() / se);
    }
    Ok(KalikowCheck {
        tv: tv_distance(&kal, &ann),
        exact: false,
        max_z: Some(max_z),
        kalikow_exit: kal,
        annealed_exit: ann,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtaRow {
    pub eta: f64,
    /// `max` over the support of `Σ_e ω(e) e^{−η e·l}`.
    pub one_step_max: f64,
    pub analytic_ok: bool,
    /// `(n, E[H_{n∧T_V}], se)`.
    pub trend: Vec<(u64, f64, f64)>,
    pub mc_ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupermartingaleReport {
    pub rows: Vec<EtaRow>,
    /// Largest grid value such that it and every smaller grid value pass.
    pub eta0_probe: f64,
}

/// Largest one-step Laplace mean over the support of the marginal law.
pub fn one_step_laplace_max(spec: &EnvironmentSpec, l: &[i64], eta: f64) -> Result<f64> {
    let k = 2 * spec.dim;
    let f: Vec<f64> = (0..k).map(|j| (-eta * step_dot(j, l) as f64).exp()).collect();
    let value = |probs: &[f64]| probs.iter().zip(&f).map(|(p, v)| p * v).sum::<f64>();
    match spec.kind {
        EnvKind::IidContinuous => {
            // Extreme points: 2κ everywhere plus the free mass on one direction.
            let free = 1.0 - 2.0 * k as f64 * spec.kappa;
            let base = 2.0 * spec.kappa * f.iter().sum::<f64>();
            Ok(base + free * f.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        }
        _ => Ok(spec
            .letters()?
            .iter()
            .map(|tv| value(&tv.probs))
            .fold(f64::NEG_INFINITY, f64::max)),
    }
}

/// Probes the range of `η` for which `exp(−η X_n·l)` is a supermartingale.
pub fn supermartingale_diagnostic(
    spec: &EnvironmentSpec,
    l: &[i64],
    eta_grid: &[f64],
    v_set: &[Site],
    n_steps: u64,
    n_walks: usize,
    seed: u64,
) -> Result<SupermartingaleReport> {
    if eta_grid.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::spec("parameters.eta_grid", "values must be positive"));
    }
    let mut grid = eta_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let inside: BTreeSet<&Site> = v_set.iter().collect();
    let checkpoints: Vec<u64> = {
        let mut c: Vec<u64> = (0..=10).map(|i| i * n_steps / 10).collect();
        c.dedup();
        c
    };
    // Levels X_{n∧T}·l at the checkpoints, shared across η.
    let levels: Vec<Result<Vec<i64>>> = (0..n_walks as u64)
        .into_par_iter()
        .map(|i| {
            let env = make_environment(&spec.clone().with_seed(derive_seed(seed, &[TAG_SM, 0, i])))?;
            let mut w = Walker::new(&env, Site::origin(spec.dim), WalkMode::Quenched, stream(derive_seed(seed, &[TAG_SM, 1, i]), 0));
            let mut out = Vec::with_capacity(checkpoints.len());
            let mut n = 0u64;
            for &c in &checkpoints {
                while n < c && inside.contains(w.position()) {
                    w.advance()?;
                    n += 1;
                }
                out.push(w.position().dot(l));
            }
            Ok(out)
        })
        .collect();
    let levels: Vec<Vec<i64>> = levels.into_iter().collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(grid.len());
    for &eta in &grid {
        let h: Vec<Vec<f64>> = levels
            .iter()
            .map(|lv| lv.iter().map(|&x| (-eta * x as f64).exp()).collect())
            .collect();
        let mut trend = Vec::with_capacity(checkpoints.len());
        for (ci, &c) in checkpoints.iter().enumerate() {
            let col: Vec<f64> = h.iter().map(|r| r[ci]).collect();
            let (m, s) = mean_se(&col);
            trend.push((c, m, s));
        }
        let mc_ok = (1..checkpoints.len()).all(|ci| {
            let diff: Vec<f64> = h.iter().map(|r| r[ci] - r[ci - 1]).collect();
            let (m, s) = mean_se(&diff);
            m <= 3.0 * s
        });
        let one = one_step_laplace_max(spec, l, eta)?;
        rows.push(EtaRow {
            eta,
            one_step_max: one,
            analytic_ok: one <= 1.0,
            trend,
            mc_ok,
        });
    }
    let eta0_probe = rows
        .iter()
        .take_while(|r| r.analytic_ok && r.mc_ok)
        .last()
        .map_or(0.0, |r| r.eta);
    Ok(SupermartingaleReport { rows, eta0_probe })
}

/// Axis-aligned box `[lo, hi]` as a site list.
pub fn rectangle(lo: &[i64], hi: &[i64]) -> Vec<Site> {
    crate::lattice::lattice_range(lo, hi).collect()
}

/// `e_axis` as a float vector.
pub fn axis_f(dim: usize, axis: usize) -> Vec<f64> {
    unit_vector(dim, axis).iter().map(|&c| c as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn biased_spec() -> EnvironmentSpec {
        EnvironmentSpec::homogeneous(2, 0.05, &[0.4, 0.1, 0.25, 0.25])
    }

    fn two_letter() -> EnvironmentSpec {
        EnvironmentSpec::iid_alphabet(
            2,
            0.05,
            vec![vec![0.5, 0.1, 0.2, 0.2], vec![0.3, 0.3, 0.3, 0.1]],
            vec![0.6, 0.4],
        )
    }

    #[test]
    fn constant_environment_collapses() {
        let env = make_environment(&biased_spec()).unwrap();
        for side in [0i64, 1, 4] {
            let v = rectangle(&[-side, -side], &[side, side]);
            let kk = kalikow_kernel_exact(&env, &v, &SolveOptions::default()).unwrap();
            for row in kk.p_hat.values() {
                for (a, b) in row.iter().zip(&[0.4, 0.1, 0.25, 0.25]) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
            assert!(kk.max_row_defect() < 1e-10);
        }
    }

    #[test]
    fn annealed_deterministic_equals_quenched() {
        let v = rectangle(&[-1, -1], &[1, 1]);
        let ann = kalikow_kernel_annealed(&biased_spec(), &v, &KalikowOptions::default()).unwrap();
        let env = make_environment(&biased_spec()).unwrap();
        let q = kalikow_kernel_exact(&env, &v, &SolveOptions::default()).unwrap();
        for (x, row) in &q.p_hat {
            for (a, b) in row.iter().zip(&ann.p_hat[x]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(ann.exact);
    }

    #[test]
    fn drifts_match_rows() {
        let v = rectangle(&[0, -1], &[2, 1]);
        let kk = kalikow_kernel_annealed(&two_letter(), &v, &KalikowOptions::default()).unwrap();
        for (x, row) in &kk.p_hat {
            let d = &kk.drifts[x];
            assert!((d[0] - (row[0] - row[1])).abs() < 1e-15);
            assert!((d[1] - (row[2] - row[3])).abs() < 1e-15);
        }
        assert!(kk.max_row_defect() < 1e-10);
    }

    #[test]
    fn kalikow_proposition_exact_cases() {
        let opts = KalikowOptions::default();
        let o = vec![Site::origin(2)];
        assert_eq!(verify_kalikow_proposition(&two_letter(), &o, &opts, 0).unwrap().tv, 0.0);
        let b5 = rectangle(&[-2, -2], &[2, 2]);
        assert!(verify_kalikow_proposition(&biased_spec(), &b5, &opts, 0).unwrap().tv < 1e-10);
        let v7: Vec<Site> = [[0, 0], [1, 0], [2, 0], [0, 1], [1, 1], [0, -1], [-1, 0]]
            .iter()
            .map(|c| Site::new(c))
            .collect();
        let chk = verify_kalikow_proposition(&two_letter(), &v7, &opts, 0).unwrap();
        assert!(chk.exact);
        assert!(chk.tv < 1e-10, "{}", chk.tv);
    }

    #[test]
    fn delta_probe_examples() {
        let fam = vec![rectangle(&[-2, -2], &[2, 2]), rectangle(&[0, 0], &[3, 0])];
        let p = kalikow_delta(&biased_spec(), &fam, &[1.0, 0.0], &KalikowOptions::default()).unwrap();
        assert!((p.delta - 0.3).abs() < 1e-12);
        let sym = EnvironmentSpec::homogeneous(2, 0.05, &[0.25; 4]);
        let p = kalikow_delta(&sym, &fam, &[1.0, 0.0], &KalikowOptions::default()).unwrap();
        assert!(p.delta.abs() < 1e-12);
        assert!(kalikow_delta(&sym, &[], &[1.0, 0.0], &KalikowOptions::default()).is_err());
    }

    #[test]
    fn disconnected_set_is_rejected() {
        let v = vec![Site::origin(2), Site::new(&[2, 0])];
        assert!(check_connected(&v).is_err());
        assert!(check_connected(&[Site::new(&[1, 0])]).is_err());
    }

    #[test]
    fn one_step_laplace_examples() {
        let v = one_step_laplace_max(&biased_spec(), &[1, 0], 0.1).unwrap();
        let want = 0.4 * (-0.1f64).exp() + 0.1 * 0.1f64.exp() + 0.5;
        assert!((v - want).abs() < 1e-15);
        assert!((v - 0.972452).abs() < 1e-6 && v < 1.0);
        let sym = EnvironmentSpec::homogeneous(2, 0.05, &[0.25; 4]);
        assert!(one_step_laplace_max(&sym, &[1, 0], 0.1).unwrap() > 1.0);
    }

    #[test]
    fn supermartingale_probe() {
        let v = rectangle(&[-20, -20], &[20, 20]);
        let grid = [0.05, 0.1, 0.2];
        let r = supermartingale_diagnostic(&biased_spec(), &[1, 0], &grid, &v, 200, 400, 1).unwrap();
        assert!(r.eta0_probe >= 0.1, "{r:?}");
        let sym = EnvironmentSpec::homogeneous(2, 0.05, &[0.25; 4]);
        let r = supermartingale_diagnostic(&sym, &[1, 0], &grid, &v, 200, 400, 1).unwrap();
        assert_eq!(r.eta0_probe, 0.0);
    }

    #[test]
    fn condition_t_validation() {
        let o = TOptions { horizon: 1000, seed: 0 };
        let d = Direction::axis(2, 0);
        assert!(estimate_condition_t(&biased_spec(), &d, 3.0, &[6.0, 10.0], 100, &o).is_err());
        assert!(estimate_condition_t(&biased_spec(), &d, 3.0, &[6.0, 10.0, 8.0], 100, &o).is_err());
        assert!(estimate_condition_t(&biased_spec(), &d, 3.0, &[6.0, 8.0, 10.0], 10, &o).is_err());
    }

    #[test]
    fn reversed_drift_rejects_t() {
        let spec = EnvironmentSpec::homogeneous(2, 0.05, &[0.1, 0.4, 0.25, 0.25]);
        let o = TOptions { horizon: 1_000_000, seed: 3 };
        let r = estimate_condition_t(&spec, &Direction::axis(2, 0), 3.0, &[4.0, 6.0, 8.0], 400, &o).unwrap();
        assert_eq!(r.verdict, TVerdict::RejectsT);
        assert!(r.cells.iter().all(|c| c.p_fail > 0.95));
    }
}
