//! Law of large numbers, CLT scaling, renewal-block covariance and the
//! statistical battery on regeneration increments.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::{make_environment, EnvironmentSpec, TransitionVector};
use crate::error::{Error, Result};
use crate::lattice::{rotation_to, unit_vector, Site};
use crate::regeneration::RegenStats;
use crate::rng::{derive_seed, stream};
use crate::stats::{
    anderson_darling_normal, covariance_matrix, ks_two_sample, lag1_rank_autocorrelation, mean, mean_se,
    symmetric_eigenvalues, variance, wilson, wls, LinearFit, TestResult,
};
use crate::walk::{WalkMode, Walker};

const TAG_LLN: u64 = 0x4c4c;
const TAG_CLT: u64 = 0x434c;

/// One-step drift and covariance of a transition vector.
pub fn step_moments(tv: &TransitionVector) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = tv.dim();
    let drift = tv.drift();
    let mut cov = vec![vec![0.0; d]; d];
    for k in 0..2 * d {
        let e = unit_vector(d, k);
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += tv.get(k) * e[i] as f64 * e[j] as f64;
            }
        }
    }
    for i in 0..d {
        for j in 0..d {
            cov[i][j] -= drift[i] * drift[j];
        }
    }
    (drift, cov)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlnReport {
    pub n: u64,
    pub n_traj: usize,
    pub v_hat: Vec<f64>,
    pub se: Vec<f64>,
    pub ci: Vec<(f64, f64)>,
    pub l: Vec<f64>,
    pub v_dot_l: f64,
    /// `v̂·l ≤ 0`.
    pub nonpositive_drift: bool,
}

/// Mean of `X_n/n` over independent (environment, walk) pairs.
pub fn lln_check(spec: &EnvironmentSpec, l: &[f64], n: u64, n_traj: usize, seed: u64) -> Result<LlnReport> {
    if n < 1000 {
        return Err(Error::spec("parameters.n", format!("{n} < 1000")));
    }
    if n_traj < 2 {
        return Err(Error::spec("parameters.n_traj", "need at least 2 trajectories"));
    }
    if l.len() != spec.dim {
        return Err(Error::spec("direction.l", "dimension mismatch"));
    }
    let d = spec.dim;
    let ends: Vec<Result<Vec<f64>>> = (0..n_traj as u64)
        .into_par_iter()
        .map(|i| {
            let env = make_environment(&spec.clone().with_seed(derive_seed(seed, &[TAG_LLN, 0, i])))?;
            let mut w = Walker::new(&env, Site::origin(d), WalkMode::Quenched, stream(derive_seed(seed, &[TAG_LLN, 1, i]), 0));
            for _ in 0..n {
                w.advance()?;
            }
            Ok(w.position().coords().iter().map(|&c| c as f64 / n as f64).collect())
        })
        .collect();
    let ends: Vec<Vec<f64>> = ends.into_iter().collect::<Result<_>>()?;
    let mut v_hat = vec![0.0; d];
    let mut se = vec![0.0; d];
    for i in 0..d {
        let xs: Vec<f64> = ends.iter().map(|e| e[i]).collect();
        (v_hat[i], se[i]) = mean_se(&xs);
    }
    let ci = v_hat.iter().zip(&se).map(|(m, s)| (m - 1.96 * s, m + 1.96 * s)).collect();
    let v_dot_l = v_hat.iter().zip(l).map(|(a, b)| a * b).sum::<f64>();
    Ok(LlnReport {
        n,
        n_traj,
        v_hat,
        se,
        ci,
        l: l.to_vec(),
        v_dot_l,
        nonpositive_drift: v_dot_l <= 0.0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRow {
    pub n: u64,
    pub projection: String,
    /// `Var(X_n·w)/n`.
    pub variance_per_step: f64,
    pub anderson_darling: TestResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceFit {
    pub projection: String,
    pub fit: LinearFit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceEstimate {
    pub matrix: Vec<Vec<f64>>,
    pub se: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub samples: usize,
    pub ladder: usize,
    pub estimator: String,
    /// `E[(κ^L Δτ)³]` over the same blocks; reported as an estimate only.
    pub third_moment_scaled_tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CltReport {
    pub v_used: Vec<f64>,
    pub n_grid: Vec<u64>,
    pub n_traj: usize,
    pub projections: Vec<(String, Vec<f64>)>,
    pub rows: Vec<ProjectionRow>,
    pub variance_fits: Vec<VarianceFit>,
    pub covariance_hat: Option<CovarianceEstimate>,
}

impl CltReport {
    pub fn min_normality_p(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.anderson_darling.p_value)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Scaled marginals `(X_n − nv)·w/√n`, indexed `[n][projection][trajectory]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledMarginals {
    pub n_grid: Vec<u64>,
    pub projections: Vec<String>,
    pub values: Vec<Vec<Vec<f64>>>,
}

impl ScaledMarginals {
    /// CSV: `n, projection, trajectory, value`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["n", "projection", "trajectory", "value"])?;
        for (ni, n) in self.n_grid.iter().enumerate() {
            for (pi, p) in self.projections.iter().enumerate() {
                for (t, v) in self.values[ni][pi].iter().enumerate() {
                    wr.write_record([n.to_string(), p.clone(), t.to_string(), format!("{v:?}")])?;
                }
            }
        }
        wr.flush()?;
        Ok(())
    }
}

/// Projection directions: `ℓ̂` followed by an orthonormal transverse basis.
pub fn projection_basis(l: &[f64]) -> Result<Vec<(String, Vec<f64>)>> {
    let r = rotation_to(l)?;
    Ok((0..l.len())
        .map(|i| (if i == 0 { "l".to_string() } else { format!("t{i}") }, r.column(i)))
        .collect())
}

pub fn clt_scaling(
    spec: &EnvironmentSpec,
    v: &[f64],
    l: &[f64],
    n_grid: &[u64],
    n_traj: usize,
    seed: u64,
) -> Result<(CltReport, ScaledMarginals)> {
    clt_scaling_with(spec, v, &projection_basis(l)?, n_grid, n_traj, seed)
}

/// As [`clt_scaling`] with explicit projections.
pub fn clt_scaling_with(
    spec: &EnvironmentSpec,
    v: &[f64],
    projections: &[(String, Vec<f64>)],
    n_grid: &[u64],
    n_traj: usize,
    seed: u64,
) -> Result<(CltReport, ScaledMarginals)> {
    let d = spec.dim;
    if v.len() != d || projections.iter().any(|p| p.1.len() != d) {
        return Err(Error::Precondition("dimension mismatch".into()));
    }
    if n_grid.is_empty() || n_grid.windows(2).any(|w| w[1] <= w[0]) || n_grid[0] == 0 {
        return Err(Error::spec("parameters.n_grid", "must be positive and increasing"));
    }
    if n_traj < 8 {
        return Err(Error::spec("parameters.n_traj", "need at least 8 trajectories"));
    }
    let paths: Vec<Result<Vec<Site>>> = (0..n_traj as u64)
        .into_par_iter()
        .map(|i| {
            let env = make_environment(&spec.clone().with_seed(derive_seed(seed, &[TAG_CLT, 0, i])))?;
            crate::walk::positions_at(
                &env,
                &Site::origin(d),
                n_grid,
                WalkMode::Quenched,
                stream(derive_seed(seed, &[TAG_CLT, 1, i]), 0),
            )
        })
        .collect();
    let paths: Vec<Vec<Site>> = paths.into_iter().collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut values = Vec::with_capacity(n_grid.len());
    for (ni, &n) in n_grid.iter().enumerate() {
        let mut per_proj = Vec::with_capacity(projections.len());
        for (name, w) in projections {
            let xs: Vec<f64> = paths
                .iter()
                .map(|p| {
                    let x = &p[ni];
                    x.coords()
                        .iter()
                        .zip(v)
                        .zip(w)
                        .map(|((&c, vi), wi)| (c as f64 - n as f64 * vi) * wi)
                        .sum::<f64>()
                        / (n as f64).sqrt()
                })
                .collect();
            let var = variance(&xs);
            if !(var > 0.0) {
                return Err(Error::Precondition(format!(
                    "degenerate covariance: projection {name} has zero variance at n = {n}"
                )));
            }
            rows.push(ProjectionRow {
                n,
                projection: name.clone(),
                variance_per_step: var,
                anderson_darling: anderson_darling_normal(&xs)?,
            });
            per_proj.push(xs);
        }
        values.push(per_proj);
    }
    let mut variance_fits = Vec::new();
    if n_grid.len() >= 3 {
        for (pi, (name, _)) in projections.iter().enumerate() {
            let x: Vec<f64> = n_grid.iter().map(|&n| n as f64).collect();
            // Var(X_n·w) = n·(scaled variance); sampling variance 2σ⁴/(N−1).
            let y: Vec<f64> = n_grid
                .iter()
                .enumerate()
                .map(|(ni, &n)| n as f64 * variance(&values[ni][pi]))
                .collect();
            let w: Vec<f64> = y.iter().map(|s| (n_traj - 1) as f64 / (2.0 * s * s)).collect();
            variance_fits.push(VarianceFit {
                projection: name.clone(),
                fit: wls(&x, &y, &w)?,
            });
        }
    }
    let report = CltReport {
        v_used: v.to_vec(),
        n_grid: n_grid.to_vec(),
        n_traj,
        projections: projections.to_vec(),
        rows,
        variance_fits,
        covariance_hat: None,
    };
    let marginals = ScaledMarginals {
        n_grid: n_grid.to_vec(),
        projections: projections.iter().map(|p| p.0.clone()).collect(),
        values,
    };
    Ok((report, marginals))
}

/// Renewal-block covariance: the sample covariance of `ΔX_k − Δτ_k v`
/// divided by the mean `Δτ_k`.
pub fn renewal_covariance(stats: &RegenStats, v: &[f64], kappa: f64) -> Result<CovarianceEstimate> {
    let blocks = stats.conditioned_blocks();
    if blocks.len() < 30 {
        return Err(Error::InsufficientData {
            needed: 30,
            got: blocks.len(),
        });
    }
    let d = v.len();
    let taus: Vec<f64> = blocks.iter().map(|b| b.0).collect();
    let mt = mean(&taus);
    let resid: Vec<Vec<f64>> = blocks
        .iter()
        .map(|(t, x)| (0..d).map(|i| x[i] - t * v[i]).collect())
        .collect();
    let mut matrix = covariance_matrix(&resid);
    let n = resid.len() as f64;
    let mut se = vec![vec![0.0; d]; d];
    let centred: Vec<Vec<f64>> = {
        let mu: Vec<f64> = (0..d).map(|i| mean(&resid.iter().map(|r| r[i]).collect::<Vec<_>>())).collect();
        resid.iter().map(|r| (0..d).map(|i| r[i] - mu[i]).collect()).collect()
    };
    for i in 0..d {
        for j in 0..=i {
            let s = (matrix[i][j] + matrix[j][i]) / 2.0 / mt;
            matrix[i][j] = s;
            matrix[j][i] = s;
            let prods: Vec<f64> = centred.iter().map(|r| r[i] * r[j]).collect();
            let e = (variance(&prods) / n).sqrt() / mt;
            se[i][j] = e;
            se[j][i] = e;
        }
    }
    let scale = kappa.powi(stats.ladder as i32);
    let third = mean(&taus.iter().map(|t| (scale * t).powi(3)).collect::<Vec<_>>());
    Ok(CovarianceEstimate {
        eigenvalues: symmetric_eigenvalues(&matrix),
        matrix,
        se,
        samples: blocks.len(),
        ladder: stats.ladder,
        estimator: "renewal-block (external estimator, no closed form in the model)".into(),
        third_moment_scaled_tau: third,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NearIidRow {
    pub series: String,
    pub halves_ks: TestResult,
    pub lag1: TestResult,
    pub ks_pass: bool,
    pub lag1_pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NearIidReport {
    pub n_increments: usize,
    pub alpha: f64,
    pub mu_band: f64,
    /// p-values are compared against `alpha / mu_band`.
    pub threshold: f64,
    pub rows: Vec<NearIidRow>,
    pub ks_pass: bool,
    pub pass: bool,
}

pub const NEAR_IID_ALPHA: f64 = 0.01;

/// `μ(L) = exp(e^{−g t L})`.
pub fn mu_band(g: f64, t: f64, ladder: usize) -> f64 {
    (-g * t * ladder as f64).exp().exp()
}

/// Halves KS and lag-1 rank autocorrelation on `Δτ` and `ΔX·l`.
pub fn near_iid_test(stats: &RegenStats, mu_band: f64) -> Result<NearIidReport> {
    let n = stats.increments.len();
    if n < 200 {
        return Err(Error::InsufficientData { needed: 200, got: n });
    }
    if !(mu_band >= 1.0) {
        return Err(Error::spec("parameters.mu_band", "must be at least 1"));
    }
    let threshold = NEAR_IID_ALPHA / mu_band;
    let dtau: Vec<f64> = stats.increments.iter().map(|i| i.delta_tau as f64).collect();
    let dxl: Vec<f64> = stats
        .increments
        .iter()
        .map(|i| i.delta_x.iter().zip(&stats.l).map(|(a, b)| a * b).sum::<i64>() as f64)
        .collect();
    let mut rows = Vec::new();
    for (name, xs) in [("delta_tau", dtau), ("delta_x_l", dxl)] {
        let (a, b) = xs.split_at(n / 2);
        let ks = ks_two_sample(a, b)?;
        let lag = lag1_rank_autocorrelation(&xs)?;
        rows.push(NearIidRow {
            series: name.into(),
            ks_pass: ks.p_value >= threshold,
            lag1_pass: lag.p_value >= threshold,
            halves_ks: ks,
            lag1: lag,
        });
    }
    let ks_pass = rows.iter().all(|r| r.ks_pass);
    let pass = ks_pass && rows.iter().all(|r| r.lag1_pass);
    Ok(NearIidReport {
        n_increments: n,
        alpha: NEAR_IID_ALPHA,
        mu_band,
        threshold,
        rows,
        ks_pass,
        pass,
    })
}

/// `1 + 4(d−1)/(13d+4)`.
pub fn tail_alpha_bound(dim: usize) -> f64 {
    1.0 + 4.0 * (dim as f64 - 1.0) / (13.0 * dim as f64 + 4.0)
}

pub fn default_alpha_grid(dim: usize) -> Vec<f64> {
    vec![0.5, 1.0, tail_alpha_bound(dim)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalPoint {
    pub u: u64,
    pub survival: f64,
    pub band: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailAlphaRow {
    pub alpha: f64,
    /// OLS of `log P[τ₁>u]` on `(log u)^α`.
    pub fit: LinearFit,
    pub decreasing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    pub n: usize,
    pub survival: Vec<SurvivalPoint>,
    pub per_alpha: Vec<TailAlphaRow>,
    /// Survival is non-increasing on the grid and every fitted slope is negative.
    pub pass: bool,
}

/// Empirical survival of `τ₁` on a geometric `u`-grid (points with at least
/// 10 exceedances) and monotonicity against `(log u)^α`.
pub fn tau_tail_fit(taus: &[u64], alpha_grid: &[f64]) -> Result<TailReport> {
    if taus.len() < 1000 {
        return Err(Error::InsufficientData {
            needed: 1000,
            got: taus.len(),
        });
    }
    if alpha_grid.is_empty() || alpha_grid.iter().any(|a| !(*a > 0.0)) {
        return Err(Error::spec("parameters.alpha_grid", "must be non-empty and positive"));
    }
    let n = taus.len();
    let mut sorted = taus.to_vec();
    sorted.sort_unstable();
    let exceed = |u: u64| n - sorted.partition_point(|&t| t <= u);
    let mut survival = Vec::new();
    let mut u = 2u64;
    loop {
        let k = exceed(u);
        if k < 10 {
            break;
        }
        survival.push(SurvivalPoint {
            u,
            survival: k as f64 / n as f64,
            band: wilson(k as u64, n as u64, 1.96),
        });
        let next = ((u as f64) * 1.25).ceil() as u64;
        u = next.max(u + 1);
    }
    if survival.len() < 3 {
        return Err(Error::InsufficientData {
            needed: 3,
            got: survival.len(),
        });
    }
    let monotone = survival.windows(2).all(|w| w[1].survival <= w[0].survival);
    let y: Vec<f64> = survival.iter().map(|p| p.survival.ln()).collect();
    let mut per_alpha = Vec::new();
    for &alpha in alpha_grid {
        let x: Vec<f64> = survival.iter().map(|p| (p.u as f64).ln().powf(alpha)).collect();
        let fit = crate::stats::ols(&x, &y)?;
        per_alpha.push(TailAlphaRow {
            alpha,
            decreasing: fit.slope < 0.0,
            fit,
        });
    }
    let pass = monotone && per_alpha.iter().all(|r| r.decreasing);
    Ok(TailReport {
        n,
        survival,
        per_alpha,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regeneration::Increment;
    use rand::Rng;

    fn biased() -> EnvironmentSpec {
        EnvironmentSpec::homogeneous(2, 0.05, &[0.4, 0.1, 0.25, 0.25])
    }

    #[test]
    fn step_moment_arithmetic() {
        let (drift, cov) = step_moments(&TransitionVector::new(&[0.4, 0.1, 0.25, 0.25]));
        assert!((drift[0] - 0.3).abs() < 1e-15 && drift[1] == 0.0);
        assert!((cov[0][0] - 0.41).abs() < 1e-15);
        assert!((cov[1][1] - 0.5).abs() < 1e-15);
        assert_eq!(cov[0][1], 0.0);
    }

    #[test]
    fn lln_biased_and_symmetric() {
        let r = lln_check(&biased(), &[1.0, 0.0], 20_000, 40, 3).unwrap();
        assert!((r.v_hat[0] - 0.3).abs() < 3.0 * r.se[0] + 1e-3);
        assert!(r.v_hat[1].abs() < 3.0 * r.se[1] + 1e-3);
        assert!(!r.nonpositive_drift);
        let sym = EnvironmentSpec::homogeneous(2, 0.05, &[0.25; 4]);
        let r = lln_check(&sym, &[1.0, 0.0], 20_000, 40, 3).unwrap();
        assert!(r.v_hat[0].abs() < 3.0 * r.se[0]);
        assert!(lln_check(&sym, &[1.0, 0.0], 999, 40, 3).is_err());
    }

    #[test]
    fn clt_variance_matches_step_variance() {
        let (r, m) = clt_scaling(&biased(), &[0.3, 0.0], &[1.0, 0.0], &[250, 500, 1000], 600, 1).unwrap();
        let last: Vec<&ProjectionRow> = r.rows.iter().filter(|x| x.n == 1000).collect();
        assert!((last[0].variance_per_step - 0.41).abs() < 0.41 * 0.15);
        assert!((last[1].variance_per_step - 0.5).abs() < 0.5 * 0.15);
        assert!(r.min_normality_p() > 1e-4);
        let fit = &r.variance_fits[0].fit;
        assert!((fit.slope - 0.41).abs() < 3.0 * fit.slope_se + 0.02);
        assert_eq!(m.values.len(), 3);
        assert_eq!(m.values[0][0].len(), 600);
    }

    #[test]
    fn degenerate_projection_is_flagged() {
        let proj = vec![("null".to_string(), vec![0.0, 0.0])];
        let e = clt_scaling_with(&biased(), &[0.3, 0.0], &proj, &[10, 20], 20, 0).unwrap_err();
        assert!(e.to_string().contains("degenerate"), "{e}");
    }

    fn synthetic(incs: Vec<(u64, i64)>) -> RegenStats {
        RegenStats {
            l: vec![1, 0],
            ladder: 1,
            increments: incs
                .into_iter()
                .map(|(t, x)| Increment {
                    delta_tau: t,
                    delta_x: vec![x, 0],
                })
                .collect(),
            ..Default::default()
        }
    }

    #[test]
    fn near_iid_detects_lag_one_coupling() {
        let mut rng = crate::rng::stream(5, 0);
        let iid: Vec<(u64, i64)> = (0..600)
            .map(|_| {
                let t = rng.random_range(1..50u64);
                (t, (t / 3) as i64 + rng.random_range(0..3))
            })
            .collect();
        let r = near_iid_test(&synthetic(iid.clone()), 1.0).unwrap();
        assert!(r.pass, "{r:?}");
        let mut shuffled = iid;
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut rng);
        assert!(near_iid_test(&synthetic(shuffled), 1.0).unwrap().pass);
        let mut ar = Vec::new();
        let mut z: f64 = 0.0;
        for _ in 0..600 {
            let noise: f64 = rng.sample(rand_distr::StandardNormal);
            z = 0.9 * z + noise * (1.0f64 - 0.81).sqrt();
            let t = (20.0 + 5.0 * z).round().max(1.0) as u64;
            ar.push((t, t as i64 / 2));
        }
        let r = near_iid_test(&synthetic(ar), 1.0).unwrap();
        assert!(!r.pass);
        assert!(!r.rows[0].lag1_pass);
        assert!(near_iid_test(&synthetic(vec![(1, 1); 10]), 1.0).is_err());
    }

    #[test]
    fn renewal_covariance_is_symmetric_psd() {
        let mut rng = crate::rng::stream(9, 0);
        let incs: Vec<Increment> = (0..300)
            .map(|_| {
                let t = rng.random_range(1..20u64);
                Increment {
                    delta_tau: t,
                    delta_x: vec![(t as i64) / 3 + rng.random_range(-2..3), rng.random_range(-3..4)],
                }
            })
            .collect();
        let stats = RegenStats {
            l: vec![1, 0],
            ladder: 1,
            increments: incs,
            ..Default::default()
        };
        let c = renewal_covariance(&stats, &[0.33, 0.0], 0.05).unwrap();
        assert!((c.matrix[0][1] - c.matrix[1][0]).abs() < 1e-10);
        assert!(c.eigenvalues.iter().all(|&e| e >= -1e-10));
        assert!(c.matrix[0][0] >= 0.0 && c.matrix[1][1] >= 0.0);
    }

    #[test]
    fn tail_fit() {
        assert!((tail_alpha_bound(2) - (1.0 + 4.0 / 30.0)).abs() < 1e-15);
        assert!(default_alpha_grid(2).contains(&tail_alpha_bound(2)));
        let mut rng = crate::rng::stream(1, 0);
        let taus: Vec<u64> = (0..5000)
            .map(|_| {
                let u: f64 = rng.random();
                (-(1.0 - u).ln() * 30.0).ceil() as u64
            })
            .collect();
        let r = tau_tail_fit(&taus, &default_alpha_grid(2)).unwrap();
        assert!(r.pass);
        assert!(tau_tail_fit(&[5], &[1.0]).is_err());
    }
}
