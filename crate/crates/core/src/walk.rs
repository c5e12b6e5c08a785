//! Quenched stepping, the coupled ε-space, and the stopping-time runner.
//!
//! In the coupled construction each step first draws a symbol ε from
//! `Q[ε = ±e_i] = κ`, `Q[ε = 0] = 1 − 2dκ`. A nonzero symbol forces the step;
//! a zero symbol steps along `e` with the residual probability
//! `(ω(x,e) − κ)/(1 − 2dκ)`. The resulting path law equals the quenched law.

use std::fmt;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{Field, TransitionVector};
use crate::error::{Error, Result};
use crate::lattice::{BoxSpec, ConeSpec, Site};

/// One of the `2d + 1` values `{±e_i} ∪ {0}`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EpsilonSymbol(Option<u8>);

impl EpsilonSymbol {
    pub const ZERO: EpsilonSymbol = EpsilonSymbol(None);

    pub fn unit(k: usize) -> Self {
        EpsilonSymbol(Some(k as u8))
    }

    #[inline]
    pub fn step(self) -> Option<usize> {
        self.0.map(usize::from)
    }

    pub fn is_zero(self) -> bool {
        self.0.is_none()
    }

    /// All admissible symbols in dimension `dim`: zero first, then steps.
    pub fn all(dim: usize) -> Vec<EpsilonSymbol> {
        std::iter::once(Self::ZERO)
            .chain((0..2 * dim).map(Self::unit))
            .collect()
    }

    pub fn label(self) -> String {
        match self.0 {
            None => "0".into(),
            Some(k) => format!("{}e{}", if k % 2 == 0 { "+" } else { "-" }, k / 2 + 1),
        }
    }
}

impl fmt::Debug for EpsilonSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Draws ε with `Q[ε = ±e_i] = κ` and `Q[ε = 0] = 1 − 2dκ`.
#[inline]
pub fn sample_epsilon(dim: usize, kappa: f64, rng: &mut impl Rng) -> EpsilonSymbol {
    let u: f64 = rng.random();
    epsilon_from_uniform(dim, kappa, u)
}

#[inline]
fn epsilon_from_uniform(dim: usize, kappa: f64, u: f64) -> EpsilonSymbol {
    let n = 2 * dim;
    if u < n as f64 * kappa {
        EpsilonSymbol::unit(((u / kappa) as usize).min(n - 1))
    } else {
        EpsilonSymbol::ZERO
    }
}

#[inline]
fn pick(probs: &[f64], mut u: f64) -> usize {
    for (k, &p) in probs.iter().enumerate() {
        if u < p {
            return k;
        }
        u -= p;
    }
    probs.len() - 1
}

/// Residual law `(ω(x,e) − κ)/(1 − 2dκ)` used under `ε = 0`.
pub fn residual_law(tv: &TransitionVector, kappa: f64) -> Option<Vec<f64>> {
    let n = tv.probs.len() as f64;
    let denom = 1.0 - n * kappa;
    let r: Vec<f64> = tv.probs.iter().map(|p| (p - kappa) / denom).collect();
    r.iter().all(|&x| x >= -1e-15).then_some(r)
}

/// Analytic reconstruction of the coupled one-step law:
/// `κ + (1 − 2dκ)·(ω(x,e) − κ)/(1 − 2dκ)` for each `e`.
pub fn coupled_marginal(tv: &TransitionVector, kappa: f64) -> Vec<f64> {
    let n = tv.probs.len() as f64;
    let denom = 1.0 - n * kappa;
    tv.probs
        .iter()
        .map(|p| kappa + denom * ((p - kappa) / denom))
        .collect()
}

/// One coupled step from `x` given the symbol `eps`.
pub fn step_coupled<F: Field + ?Sized>(
    field: &F,
    x: &Site,
    eps: EpsilonSymbol,
    rng: &mut impl Rng,
) -> Result<Site> {
    if let Some(k) = eps.step() {
        return Ok(x.step(k));
    }
    let tv = field.transition(x);
    let r = residual_law(&tv, field.kappa()).ok_or_else(|| Error::Ellipticity {
        site: x.to_string(),
        reason: "ω(x,e) < κ makes the residual law negative".into(),
    })?;
    Ok(x.step(pick(&r, rng.random())))
}

/// One quenched step `P[X₁ = x + e] = ω(x, e)`.
pub fn step_quenched<F: Field + ?Sized>(field: &F, x: &Site, rng: &mut impl Rng) -> Site {
    let tv = field.transition(x);
    x.step(pick(&tv.probs, rng.random()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WalkMode {
    Quenched,
    Coupled,
}

/// Positions (flattened, stride `dim`) plus the ε stream of a coupled run.
/// Quenched runs leave `epsilons` empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoupledTrajectory {
    pub dim: usize,
    pub coords: Vec<i64>,
    pub epsilons: Vec<EpsilonSymbol>,
    pub walk_seed: u64,
    pub mode: WalkMode,
}

impl CoupledTrajectory {
    pub fn new(start: &Site, mode: WalkMode, walk_seed: u64) -> Self {
        CoupledTrajectory {
            dim: start.dim(),
            coords: start.coords().to_vec(),
            epsilons: Vec::new(),
            walk_seed,
            mode,
        }
    }

    /// Number of positions (steps + 1).
    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.len() - 1
    }

    #[inline]
    pub fn position(&self, n: usize) -> &[i64] {
        &self.coords[n * self.dim..(n + 1) * self.dim]
    }

    pub fn site(&self, n: usize) -> Site {
        Site::new(self.position(n))
    }

    pub fn last(&self) -> Site {
        self.site(self.len() - 1)
    }

    #[inline]
    pub fn level(&self, n: usize, l: &[i64]) -> i64 {
        self.position(n).iter().zip(l).map(|(a, b)| a * b).sum()
    }

    fn push(&mut self, x: &Site, eps: Option<EpsilonSymbol>) {
        self.coords.extend_from_slice(x.coords());
        if let Some(e) = eps {
            self.epsilons.push(e);
        }
    }

    /// Nearest-neighbor continuity and ε consistency.
    pub fn check_invariants(&self) -> Result<()> {
        for n in 0..self.steps() {
            let a = self.position(n);
            let b = self.position(n + 1);
            let d: i64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
            if d != 1 {
                return Err(Error::Precondition(format!("jump of length {d} at step {n}")));
            }
        }
        if self.mode == WalkMode::Coupled {
            if self.epsilons.len() != self.steps() {
                return Err(Error::Precondition("ε stream length mismatch".into()));
            }
            for (n, e) in self.epsilons.iter().enumerate() {
                if let Some(k) = e.step() {
                    if Site::new(self.position(n)).step(k).coords() != self.position(n + 1) {
                        return Err(Error::Precondition(format!("forced step ignored at {n}")));
                    }
                }
            }
        }
        Ok(())
    }

    /// CSV: `step, x1..xd, eps`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["step".to_string()];
        header.extend((1..=self.dim).map(|i| format!("x{i}")));
        header.push("eps".into());
        wr.write_record(&header)?;
        for n in 0..self.len() {
            let mut rec = vec![n.to_string()];
            rec.extend(self.position(n).iter().map(|c| c.to_string()));
            rec.push(match n.checked_sub(1).and_then(|m| self.epsilons.get(m)) {
                Some(e) => e.label(),
                None => String::new(),
            });
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Steps a single walk, appending to a trajectory.
pub struct Walker<'a, F: Field + ?Sized, R: Rng> {
    field: &'a F,
    rng: R,
    mode: WalkMode,
    pos: Site,
    kappa: f64,
    steps: u64,
}

const SPOT_CHECK_MASK: u64 = (1 << 16) - 1;

impl<'a, F: Field + ?Sized, R: Rng> Walker<'a, F, R> {
    pub fn new(field: &'a F, start: Site, mode: WalkMode, rng: R) -> Self {
        Walker {
            kappa: field.kappa(),
            field,
            rng,
            mode,
            pos: start,
            steps: 0,
        }
    }

    pub fn position(&self) -> &Site {
        &self.pos
    }

    /// Advances one step and returns the symbol used (coupled mode).
    #[inline]
    pub fn advance(&mut self) -> Result<Option<EpsilonSymbol>> {
        self.steps += 1;
        match self.mode {
            WalkMode::Quenched => {
                let tv = self.field.transition(&self.pos);
                let k = pick(&tv.probs, self.rng.random());
                self.pos.step_mut(k);
                Ok(None)
            }
            WalkMode::Coupled => {
                let eps = sample_epsilon(self.field.dim(), self.kappa, &mut self.rng);
                let k = match eps.step() {
                    Some(k) => k,
                    None => {
                        let tv = self.field.transition(&self.pos);
                        if self.steps & SPOT_CHECK_MASK == 0 {
                            spot_check_coupling(&tv, self.kappa, &self.pos)?;
                        }
                        let r = residual_law(&tv, self.kappa).ok_or_else(|| Error::Ellipticity {
                            site: self.pos.to_string(),
                            reason: "ω(x,e) < κ".into(),
                        })?;
                        pick(&r, self.rng.random())
                    }
                };
                self.pos.step_mut(k);
                Ok(Some(eps))
            }
        }
    }

    /// Appends `n` steps to `traj`.
    pub fn extend(&mut self, traj: &mut CoupledTrajectory, n: usize) -> Result<()> {
        traj.coords.reserve(n * traj.dim);
        for _ in 0..n {
            let e = self.advance()?;
            traj.push(&self.pos, e);
        }
        Ok(())
    }
}

fn spot_check_coupling(tv: &TransitionVector, kappa: f64, x: &Site) -> Result<()> {
    let m = coupled_marginal(tv, kappa);
    let dev = m
        .iter()
        .zip(&tv.probs)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if dev > 1e-12 {
        return Err(Error::Ellipticity {
            site: x.to_string(),
            reason: format!("coupling marginal deviates by {dev}"),
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    /// `X·u ≥ a`.
    Above,
    /// `X·u ≤ a`.
    Below,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum StopCondition {
    BoxExit { region: BoxSpec },
    LevelHit { u: Vec<i64>, level: f64, side: Side },
    ConeExit { cone: ConeSpec },
    Horizon { steps: u64 },
}

impl StopCondition {
    fn triggered(&self, x: &Site, n: u64) -> bool {
        match self {
            StopCondition::BoxExit { region } => !region.contains(x),
            StopCondition::LevelHit { u, level, side } => {
                let v = x.dot(u) as f64;
                match side {
                    Side::Above => v >= *level,
                    Side::Below => v <= *level,
                }
            }
            StopCondition::ConeExit { cone } => !cone.contains(x),
            StopCondition::Horizon { steps } => n >= *steps,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            StopCondition::BoxExit { .. } => "box-exit",
            StopCondition::LevelHit { .. } => "level-hit",
            StopCondition::ConeExit { .. } => "cone-exit",
            StopCondition::Horizon { .. } => "horizon",
        }
    }
}

/// First-of list of stopping rules; must contain a finite horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopSpec {
    pub conditions: Vec<StopCondition>,
}

impl StopSpec {
    pub fn new(conditions: Vec<StopCondition>) -> Result<Self> {
        if !conditions
            .iter()
            .any(|c| matches!(c, StopCondition::Horizon { .. }))
        {
            return Err(Error::Precondition("stop spec needs a finite horizon".into()));
        }
        Ok(StopSpec { conditions })
    }

    pub fn box_exit(region: BoxSpec, horizon: u64) -> Self {
        StopSpec {
            conditions: vec![
                StopCondition::BoxExit { region },
                StopCondition::Horizon { steps: horizon },
            ],
        }
    }

    /// Index of the first triggered condition, in list order.
    pub fn check(&self, x: &Site, n: u64) -> Option<usize> {
        self.conditions.iter().position(|c| c.triggered(x, n))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopOutcome {
    pub trigger: usize,
    pub kind: String,
    pub index: u64,
}

/// Runs until the first stopping rule fires (checked at every index,
/// including 0).
pub fn run_until<F: Field + ?Sized, R: Rng>(
    field: &F,
    start: &Site,
    stop: &StopSpec,
    mode: WalkMode,
    rng: R,
    walk_seed: u64,
) -> Result<(CoupledTrajectory, StopOutcome)> {
    if !stop
        .conditions
        .iter()
        .any(|c| matches!(c, StopCondition::Horizon { .. }))
    {
        return Err(Error::Precondition("stop spec needs a finite horizon".into()));
    }
    let mut traj = CoupledTrajectory::new(start, mode, walk_seed);
    let mut w = Walker::new(field, start.clone(), mode, rng);
    let mut n = 0u64;
    loop {
        if let Some(t) = stop.check(w.position(), n) {
            return Ok((
                traj,
                StopOutcome {
                    trigger: t,
                    kind: stop.conditions[t].name().into(),
                    index: n,
                },
            ));
        }
        let e = w.advance()?;
        traj.push(w.position(), e);
        n += 1;
    }
}

/// Like [`run_until`] without recording the path; returns the stopping site.
pub fn exit_site<F: Field + ?Sized, R: Rng>(
    field: &F,
    start: &Site,
    stop: &StopSpec,
    mode: WalkMode,
    rng: R,
) -> Result<(Site, StopOutcome)> {
    let mut w = Walker::new(field, start.clone(), mode, rng);
    let mut n = 0u64;
    loop {
        if let Some(t) = stop.check(w.position(), n) {
            return Ok((
                w.position().clone(),
                StopOutcome {
                    trigger: t,
                    kind: stop.conditions[t].name().into(),
                    index: n,
                },
            ));
        }
        w.advance()?;
        n += 1;
    }
}

/// Positions at the (sorted) times in `times`.
pub fn positions_at<F: Field + ?Sized, R: Rng>(
    field: &F,
    start: &Site,
    times: &[u64],
    mode: WalkMode,
    rng: R,
) -> Result<Vec<Site>> {
    let mut w = Walker::new(field, start.clone(), mode, rng);
    let mut out = Vec::with_capacity(times.len());
    let mut n = 0u64;
    for &t in times {
        while n < t {
            w.advance()?;
            n += 1;
        }
        out.push(w.position().clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{make_environment, EnvironmentSpec};
    use crate::lattice::Direction;
    use crate::rng::stream;

    fn biased() -> crate::environment::Environment {
        make_environment(&EnvironmentSpec::homogeneous(2, 0.05, &[0.4, 0.1, 0.25, 0.25])).unwrap()
    }

    #[test]
    fn epsilon_has_2d_plus_one_values() {
        assert_eq!(EpsilonSymbol::all(2).len(), 5);
        assert_eq!(EpsilonSymbol::all(3).len(), 7);
    }

    #[test]
    fn epsilon_zero_mass_at_max_kappa() {
        // κ = 1/(4d): zero symbol has mass exactly 1/2.
        let d = 2;
        let kappa = 1.0 / (4.0 * d as f64);
        assert_eq!(1.0 - 2.0 * d as f64 * kappa, 0.5);
        assert_eq!(epsilon_from_uniform(d, kappa, 0.4999), EpsilonSymbol::unit(3));
        assert_eq!(epsilon_from_uniform(d, kappa, 0.5), EpsilonSymbol::ZERO);
    }

    #[test]
    fn epsilon_frequencies_within_3_sigma() {
        let mut rng = stream(17, 0);
        let n = 1_000_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            match sample_epsilon(2, 0.05, &mut rng).step() {
                None => counts[0] += 1,
                Some(k) => counts[k + 1] += 1,
            }
        }
        let probs = [0.8, 0.05, 0.05, 0.05, 0.05];
        for (c, p) in counts.iter().zip(probs) {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn forced_step_is_deterministic() {
        let env = biased();
        let mut rng = stream(1, 1);
        let x = Site::new(&[3, -1]);
        for _ in 0..100 {
            assert_eq!(
                step_coupled(&env, &x, EpsilonSymbol::unit(0), &mut rng).unwrap(),
                Site::new(&[4, -1])
            );
        }
    }

    #[test]
    fn residual_step_probability() {
        let tv = TransitionVector::new(&[0.4, 0.1, 0.25, 0.25]);
        let r = residual_law(&tv, 0.05).unwrap();
        assert!((r[0] - 0.4375).abs() < 1e-15);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let m = coupled_marginal(&tv, 0.05);
        assert!((m[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn residual_rejects_non_elliptic_site() {
        let tv = TransitionVector::new(&[0.67, 0.03, 0.15, 0.15]);
        assert!(residual_law(&tv, 0.05).is_none());
    }

    #[test]
    fn quenched_step_frequencies_within_3_sigma() {
        let env = biased();
        let mut rng = stream(2, 0);
        let n = 1_000_000;
        let mut counts = [0usize; 4];
        let o = Site::origin(2);
        for _ in 0..n {
            let y = step_quenched(&env, &o, &mut rng);
            let k = (0..4).find(|&k| o.step(k) == y).unwrap();
            counts[k] += 1;
        }
        for (c, p) in counts.iter().zip([0.4, 0.1, 0.25, 0.25]) {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn symmetric_step_is_uniform() {
        let env = make_environment(&EnvironmentSpec::homogeneous(2, 0.05, &[0.25; 4])).unwrap();
        assert_eq!(env.transition(&Site::origin(2)).probs.as_slice(), &[0.25; 4]);
    }

    #[test]
    fn same_stream_same_path() {
        let env = biased();
        let stop = StopSpec::new(vec![StopCondition::Horizon { steps: 200 }]).unwrap();
        let a = run_until(&env, &Site::origin(2), &stop, WalkMode::Coupled, stream(4, 2), 2).unwrap();
        let b = run_until(&env, &Site::origin(2), &stop, WalkMode::Coupled, stream(4, 2), 2).unwrap();
        assert_eq!(a, b);
        a.0.check_invariants().unwrap();
        assert_eq!(a.0.epsilons.len(), 200);
    }

    #[test]
    fn horizon_zero_gives_empty_path() {
        let env = biased();
        let b = BoxSpec::new(Site::origin(2), 10.0, 10.0, Direction::axis(2, 0)).unwrap();
        let (t, o) = run_until(
            &env,
            &Site::origin(2),
            &StopSpec::box_exit(b, 0),
            WalkMode::Quenched,
            stream(0, 0),
            0,
        )
        .unwrap();
        assert_eq!(t.steps(), 0);
        assert_eq!(o.kind, "horizon");
        assert_eq!(o.index, 0);
    }

    #[test]
    fn stop_spec_requires_horizon() {
        assert!(StopSpec::new(vec![StopCondition::LevelHit {
            u: vec![1, 0],
            level: 3.0,
            side: Side::Above
        }])
        .is_err());
    }

    #[test]
    fn level_hit_uses_weak_inequality() {
        let env = biased();
        let stop = StopSpec::new(vec![
            StopCondition::LevelHit {
                u: vec![1, 0],
                level: 3.0,
                side: Side::Above,
            },
            StopCondition::Horizon { steps: 100_000 },
        ])
        .unwrap();
        let (t, o) = run_until(&env, &Site::origin(2), &stop, WalkMode::Coupled, stream(9, 9), 9).unwrap();
        assert_eq!(o.kind, "level-hit");
        assert_eq!(t.last().coords()[0], 3);
        for n in 0..t.steps() {
            assert!(t.position(n)[0] < 3);
        }
    }

    #[test]
    fn trajectory_csv_has_header_and_rows() {
        let env = biased();
        let stop = StopSpec::new(vec![StopCondition::Horizon { steps: 5 }]).unwrap();
        let (t, _) = run_until(&env, &Site::origin(2), &stop, WalkMode::Coupled, stream(1, 0), 0).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "step,x1,x2,eps");
        assert_eq!(lines.len(), 7);
    }
}
