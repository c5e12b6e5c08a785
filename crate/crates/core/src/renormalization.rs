//! Multiscale block geometry: good/bad blocks, columns, tubes and tops, and
//! the atypical quenched slab estimate.
//!
//! Blocks live in rotated coordinates: a site `y` has local coordinates
//! `R̃⁻¹y − z` relative to the anchor `z ∈ M₀ℤ^d`, where `R̃e₁ = v̂`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::{make_environment, EnvironmentSpec, Field};
use crate::error::{Error, Result};
use crate::lattice::{lattice_range, rotation_to, Rotation, Site};
use crate::linsolve::SolveOptions;
use crate::oracle::{exit_probabilities, outer_boundary, solve_absorbing};
use crate::rng::{derive_seed, stream};
use crate::stats::{wilson, wls, LinearFit};
use crate::walk::{WalkMode, Walker};

const TAG_BLOCK: u64 = 0x424c;
const TAG_SLAB: u64 = 0x534c;
const EXACT_LIMIT: usize = 40_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockPair {
    pub z: Vec<i64>,
    pub m0: i64,
    pub gamma: f64,
    pub rotation: Rotation,
    pub inner: Vec<Site>,
    pub outer: Vec<Site>,
}

impl BlockPair {
    pub fn new(z: &[i64], m0: i64, gamma: f64, rotation: &Rotation) -> Result<Self> {
        let d = z.len();
        if rotation.dim() != d {
            return Err(Error::Precondition("rotation dimension mismatch".into()));
        }
        if !(gamma > 5.0 / 9.0 && gamma < 1.0) {
            return Err(Error::spec("parameters.gamma", format!("{gamma} not in (5/9, 1)")));
        }
        if (m0 as f64) <= 2.0 * (d as f64).sqrt() {
            return Err(Error::Precondition(format!(
                "M₀ = {m0} must exceed 2√d for a non-empty inner block"
            )));
        }
        if z.iter().any(|c| c.rem_euclid(m0) != 0) {
            return Err(Error::Precondition(format!("anchor {z:?} not in M₀ℤ^d")));
        }
        let a = (m0 as f64).powf(gamma);
        let lo = -a;
        let hi = m0 as f64 + a;
        // Bounding lattice box of the rotated outer cube.
        let centre_local: Vec<f64> = z.iter().map(|&c| c as f64 + m0 as f64 / 2.0).collect();
        let centre = rotation.apply(&centre_local);
        let reach = ((hi - lo) / 2.0 * (d as f64).sqrt()).ceil() as i64 + 1;
        let blo: Vec<i64> = centre.iter().map(|c| c.floor() as i64 - reach).collect();
        let bhi: Vec<i64> = centre.iter().map(|c| c.ceil() as i64 + reach).collect();
        let mut inner = Vec::new();
        let mut outer = Vec::new();
        for y in lattice_range(&blo, &bhi) {
            let p = local(rotation, z, &y);
            if p.iter().all(|&c| c > lo && c < hi) {
                if p.iter().all(|&c| c > 0.0 && c < m0 as f64) {
                    inner.push(y.clone());
                }
                outer.push(y);
            }
        }
        if inner.is_empty() {
            return Err(Error::Precondition("inner block is empty".into()));
        }
        Ok(BlockPair {
            z: z.to_vec(),
            m0,
            gamma,
            rotation: rotation.clone(),
            inner,
            outer,
        })
    }

    pub fn pad(&self) -> f64 {
        (self.m0 as f64).powf(self.gamma)
    }

    /// Local coordinates `R̃⁻¹y − z`.
    pub fn local(&self, y: &Site) -> Vec<f64> {
        local(&self.rotation, &self.z, y)
    }

    /// `∂⁺B̃₂`: outside the outer block with first local coordinate
    /// `≥ M₀ + M₀^γ`.
    pub fn on_positive_face(&self, y: &Site) -> bool {
        self.local(y)[0] >= self.m0 as f64 + self.pad()
    }

    /// Materialized `∂⁺B̃₂(z)`.
    pub fn positive_face(&self) -> Vec<Site> {
        outer_boundary(&self.outer)
            .into_iter()
            .filter(|y| self.on_positive_face(y))
            .collect()
    }
}

fn local(rotation: &Rotation, z: &[i64], y: &Site) -> Vec<f64> {
    let yf: Vec<f64> = y.coords().iter().map(|&c| c as f64).collect();
    rotation
        .apply_inverse(&yf)
        .iter()
        .zip(z)
        .map(|(a, &b)| a - b as f64)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Classification {
    Good,
    Bad,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifyMethod {
    Exact,
    Mc,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyOptions {
    /// `None`: exact when `|B̃₂|` is within the solve limit, MC otherwise.
    pub method: Option<ClassifyMethod>,
    pub samples: usize,
    pub exact_limit: usize,
    pub seed: u64,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        ClassifyOptions {
            method: None,
            samples: 1000,
            exact_limit: EXACT_LIMIT,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxReport {
    pub z: Vec<i64>,
    pub m0: i64,
    /// `inf` over inner sites of `P_{x,ω}[exit B̃₂ through ∂⁺]`.
    pub p_plus_min: f64,
    pub argmin: Site,
    /// Wilson interval at the minimizing site (MC only).
    pub ci: Option<(f64, f64)>,
    pub classification: Classification,
    pub method: ClassifyMethod,
}

/// Good iff the positive-face exit probability is at least 1/2 from every
/// inner site, for the fixed realized environment. Under Monte Carlo a
/// Wilson interval straddling 1/2 at any inner site counts as bad.
pub fn classify_block<F: Field + ?Sized>(field: &F, block: &BlockPair, opts: &ClassifyOptions) -> Result<BoxReport> {
    let method = opts.method.unwrap_or(if block.outer.len() <= opts.exact_limit {
        ClassifyMethod::Exact
    } else {
        ClassifyMethod::Mc
    });
    match method {
        ClassifyMethod::Exact => {
            if block.outer.len() > opts.exact_limit {
                return Err(Error::BudgetExceeded {
                    what: "exact block classification".into(),
                    size: block.outer.len() as u128,
                    budget: opts.exact_limit as u128,
                });
            }
            let h = exit_probabilities(
                field,
                &block.outer,
                |y| block.on_positive_face(y),
                &SolveOptions::default(),
            )?;
            let (argmin, p) = block
                .inner
                .iter()
                .map(|x| (x, h[x]))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("non-empty inner block");
            Ok(BoxReport {
                z: block.z.clone(),
                m0: block.m0,
                p_plus_min: p,
                argmin: argmin.clone(),
                ci: None,
                classification: if p >= 0.5 { Classification::Good } else { Classification::Bad },
                method,
            })
        }
        ClassifyMethod::Mc => {
            if opts.samples == 0 {
                return Err(Error::spec("parameters.samples", "must be positive"));
            }
            let outer: BTreeSet<&Site> = block.outer.iter().collect();
            let mut worst: Option<(Site, f64, (f64, f64))> = None;
            let mut bad = false;
            for (si, x) in block.inner.iter().enumerate() {
                let mut k = 0u64;
                for i in 0..opts.samples as u64 {
                    let seed = derive_seed(opts.seed, &[TAG_BLOCK, si as u64, i]);
                    let mut w = Walker::new(field, x.clone(), WalkMode::Quenched, stream(seed, 0));
                    while outer.contains(w.position()) {
                        w.advance()?;
                    }
                    k += block.on_positive_face(w.position()) as u64;
                }
                let p = k as f64 / opts.samples as f64;
                let ci = wilson(k, opts.samples as u64, 1.96);
                if ci.0 < 0.5 {
                    bad = true;
                }
                if worst.as_ref().is_none_or(|w| p < w.1) {
                    worst = Some((x.clone(), p, ci));
                }
            }
            let (argmin, p, ci) = worst.expect("non-empty inner block");
            Ok(BoxReport {
                z: block.z.clone(),
                m0: block.m0,
                p_plus_min: p,
                argmin,
                ci: Some(ci),
                classification: if bad { Classification::Bad } else { Classification::Good },
                method,
            })
        }
    }
}

/// CSV: `z1..zd, m0, classification, p_plus_min, method`.
pub fn write_block_reports_csv<W: Write>(reports: &[BoxReport], w: W) -> Result<()> {
    let d = reports.first().map_or(0, |r| r.z.len());
    let mut wr = csv::Writer::from_writer(w);
    let mut header: Vec<String> = (1..=d).map(|i| format!("z{i}")).collect();
    header.extend(["m0", "classification", "p_plus_min", "method"].map(String::from));
    wr.write_record(&header)?;
    for r in reports {
        let mut rec: Vec<String> = r.z.iter().map(|c| c.to_string()).collect();
        rec.push(r.m0.to_string());
        rec.push(match r.classification {
            Classification::Good => "good".into(),
            Classification::Bad => "bad".into(),
        });
        rec.push(format!("{:?}", r.p_plus_min));
        rec.push(match r.method {
            ClassifyMethod::Exact => "exact".into(),
            ClassifyMethod::Mc => "mc".into(),
        });
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BadFractionRow {
    pub m0: i64,
    pub n_blocks: usize,
    pub n_bad: usize,
    pub p_bad: f64,
    pub ci: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BadFractionScan {
    pub gamma: f64,
    pub rows: Vec<BadFractionRow>,
    /// `log P[bad]` against `M₀^{(9/4)γ−5/4}` over rows with `0 < P[bad]`.
    pub fit: Option<LinearFit>,
    pub strictly_decreasing: bool,
}

/// Empirical `P[z is M₀-bad]` per scale, each block in a fresh environment.
pub fn bad_fraction_scan(
    spec: &EnvironmentSpec,
    m0_grid: &[i64],
    gamma: f64,
    n_blocks: usize,
    v_hat: &[f64],
    opts: &ClassifyOptions,
) -> Result<BadFractionScan> {
    if m0_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::spec("parameters.m0_grid", "must be increasing"));
    }
    let rotation = rotation_to(v_hat)?;
    let z = vec![0i64; spec.dim];
    let mut rows = Vec::with_capacity(m0_grid.len());
    for (mi, &m0) in m0_grid.iter().enumerate() {
        let block = BlockPair::new(&z, m0, gamma, &rotation)?;
        let out: Vec<Result<Classification>> = (0..n_blocks as u64)
            .into_par_iter()
            .map(|i| {
                let env = make_environment(&spec.clone().with_seed(derive_seed(opts.seed, &[TAG_BLOCK, mi as u64, i])))?;
                let o = ClassifyOptions {
                    seed: derive_seed(opts.seed, &[TAG_BLOCK, 1, mi as u64, i]),
                    ..*opts
                };
                Ok(classify_block(&env, &block, &o)?.classification)
            })
            .collect();
        let mut n_bad = 0;
        for c in out {
            n_bad += (c? == Classification::Bad) as usize;
        }
        rows.push(BadFractionRow {
            m0,
            n_blocks,
            n_bad,
            p_bad: n_bad as f64 / n_blocks.max(1) as f64,
            ci: wilson(n_bad as u64, n_blocks as u64, 1.96),
        });
    }
    let usable: Vec<&BadFractionRow> = rows.iter().filter(|r| r.n_bad > 0).collect();
    let fit = if usable.len() >= 2 {
        let e = 2.25 * gamma - 1.25;
        let x: Vec<f64> = usable.iter().map(|r| (r.m0 as f64).powf(e)).collect();
        let y: Vec<f64> = usable.iter().map(|r| r.p_bad.ln()).collect();
        let w: Vec<f64> = usable
            .iter()
            .map(|r| r.n_bad as f64 / (1.0 - r.p_bad).max(1.0 / r.n_blocks as f64))
            .collect();
        wls(&x, &y, &w).ok()
    } else {
        None
    };
    let strictly_decreasing = rows.windows(2).all(|w| w[1].p_bad < w[0].p_bad);
    Ok(BadFractionScan {
        gamma,
        rows,
        fit,
        strictly_decreasing,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TubeSpec {
    pub z: Vec<i64>,
    pub m0: i64,
    pub m1: i64,
    pub big_m: f64,
    pub gamma: f64,
    /// Column height: smallest `J` with `J M₀ v̂·l/|l|₂ ≥ 3M`.
    pub j: i64,
    pub rotation: Rotation,
    /// Block anchors, one vector per column, bottom to top.
    pub columns: Vec<Vec<Vec<i64>>>,
    /// `Top(z)`: union of `∂⁺B̃₂` of the top block of every column.
    pub top: Vec<Site>,
}

/// Smallest integer `J ≥ 0` with `J·M₀·c ≥ 3M`, `c = v̂·l/|l|₂`.
pub fn column_height(m0: i64, big_m: f64, c: f64) -> Result<i64> {
    if !(c > 0.0) {
        return Err(Error::Precondition("v̂·l must be positive".into()));
    }
    let target = 3.0 * big_m;
    let mut j = ((target / (m0 as f64 * c)).ceil() as i64 - 1).max(0);
    while (j as f64) * (m0 as f64) * c < target {
        j += 1;
    }
    Ok(j)
}

pub fn build_tube(z: &[i64], m0: i64, m1: i64, big_m: f64, v_hat: &[f64], l: &[f64], gamma: f64) -> Result<TubeSpec> {
    if m1 <= 0 || m1 % m0 != 0 {
        return Err(Error::Precondition("M₁ must be a positive multiple of M₀".into()));
    }
    if !(big_m > 0.0) {
        return Err(Error::Precondition("M must be positive".into()));
    }
    let ln = l.iter().map(|v| v * v).sum::<f64>().sqrt();
    let c = v_hat.iter().zip(l).map(|(a, b)| a * b).sum::<f64>() / ln;
    let j = column_height(m0, big_m, c)?;
    let rotation = rotation_to(v_hat)?;
    let d = z.len();
    let k = m1 / m0;
    let lo = vec![0i64; d - 1];
    let hi = vec![k; d - 1];
    let offsets: Vec<Vec<i64>> = if d == 1 {
        vec![vec![]]
    } else {
        lattice_range(&lo, &hi).map(|s| s.coords().to_vec()).collect()
    };
    let mut columns = Vec::with_capacity(offsets.len());
    let mut top = BTreeSet::new();
    for off in &offsets {
        let mut base = z.to_vec();
        for (i, &o) in off.iter().enumerate() {
            base[i + 1] += o * m0;
        }
        let col: Vec<Vec<i64>> = (0..=j)
            .map(|jj| {
                let mut a = base.clone();
                a[0] += jj * m0;
                a
            })
            .collect();
        let top_block = BlockPair::new(col.last().unwrap(), m0, gamma, &rotation)?;
        top.extend(top_block.positive_face());
        columns.push(col);
    }
    Ok(TubeSpec {
        z: z.to_vec(),
        m0,
        m1,
        big_m,
        gamma,
        j,
        rotation,
        columns,
        top: top.into_iter().collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinBadCount {
    pub n: usize,
    pub per_column: Vec<usize>,
}

/// `n(z,ω)`: the fewest bad blocks along any column of the tube.
pub fn min_bad_count<F: Field + ?Sized>(field: &F, tube: &TubeSpec, opts: &ClassifyOptions) -> Result<MinBadCount> {
    let mut cache: BTreeMap<Vec<i64>, Classification> = BTreeMap::new();
    let mut per_column = Vec::with_capacity(tube.columns.len());
    for col in &tube.columns {
        let mut bad = 0;
        for a in col {
            let c = match cache.get(a) {
                Some(c) => *c,
                None => {
                    let b = BlockPair::new(a, tube.m0, tube.gamma, &tube.rotation)?;
                    let c = classify_block(field, &b, opts)?.classification;
                    cache.insert(a.clone(), c);
                    c
                }
            };
            bad += (c == Classification::Bad) as usize;
        }
        per_column.push(bad);
    }
    Ok(MinBadCount {
        n: per_column.iter().copied().min().unwrap_or(0),
        per_column,
    })
}

/// Union of the outer blocks of a tube.
pub fn tube_region(tube: &TubeSpec) -> Result<Vec<Site>> {
    let mut set = BTreeSet::new();
    for col in &tube.columns {
        for a in col {
            set.extend(BlockPair::new(a, tube.m0, tube.gamma, &tube.rotation)?.outer);
        }
    }
    Ok(set.into_iter().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscapeEstimate {
    pub start: Site,
    pub walks: usize,
    pub p_top: f64,
    pub ci: (f64, f64),
    /// `(1/2)^{J+1}`.
    pub lower_bound: f64,
}

/// Monte Carlo probability that a walk from the centre of the bottom block
/// of the first column leaves the tube region through `Top(z)`.
pub fn tube_escape_probability<F: Field + ?Sized>(field: &F, tube: &TubeSpec, walks: usize, seed: u64) -> Result<EscapeEstimate> {
    let region: BTreeSet<Site> = tube_region(tube)?.into_iter().collect();
    let top: BTreeSet<&Site> = tube.top.iter().collect();
    let b0 = BlockPair::new(&tube.columns[0][0], tube.m0, tube.gamma, &tube.rotation)?;
    let half = tube.m0 as f64 / 2.0;
    let start = b0
        .inner
        .iter()
        .min_by(|a, b| {
            let da: f64 = b0.local(a).iter().map(|c| (c - half).powi(2)).sum();
            let db: f64 = b0.local(b).iter().map(|c| (c - half).powi(2)).sum();
            da.total_cmp(&db)
        })
        .unwrap()
        .clone();
    let hits: Vec<Result<bool>> = (0..walks as u64)
        .into_par_iter()
        .map(|i| {
            let mut w = Walker::new(field, start.clone(), WalkMode::Quenched, stream(derive_seed(seed, &[TAG_BLOCK, 9, i]), 0));
            while region.contains(w.position()) {
                w.advance()?;
            }
            Ok(top.contains(w.position()))
        })
        .collect();
    let mut k = 0u64;
    for h in hits {
        k += h? as u64;
    }
    Ok(EscapeEstimate {
        start,
        walks,
        p_top: k as f64 / walks as f64,
        ci: wilson(k, walks as u64, 1.96),
        lower_bound: 0.5f64.powi(tube.j as i32 + 1),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtypicalReport {
    pub big_m: f64,
    pub beta: f64,
    pub c: f64,
    pub threshold: f64,
    pub fraction: f64,
    pub n_env: usize,
    /// Quenched `P_{0,ω}[X_T·ℓ ≥ M]` per environment.
    pub probabilities: Vec<f64>,
    /// Transverse half-width used per environment.
    pub widths: Vec<i64>,
}

pub const SIDE_ESCAPE_TOL: f64 = 1e-6;
const MAX_DOUBLINGS: u32 = 6;

/// Slab `{|y·ℓ| < M}` truncated to transverse half-width `w` (rotated frame).
fn slab_sites(dim: usize, rotation: &Rotation, big_m: f64, w: f64) -> Vec<Site> {
    let reach = ((big_m.max(w)) * (dim as f64).sqrt()).ceil() as i64 + 1;
    lattice_range(&vec![-reach; dim], &vec![reach; dim])
        .filter(|y| {
            let yf: Vec<f64> = y.coords().iter().map(|&c| c as f64).collect();
            let p = rotation.apply_inverse(&yf);
            p[0].abs() < big_m && p[1..].iter().all(|c| c.abs() < w)
        })
        .collect()
}

/// Exact quenched positive-exit probability of the slab, widening the
/// transverse truncation until the side-escape mass is below tolerance.
pub fn slab_positive_exit<F: Field + ?Sized>(field: &F, ell: &[f64], big_m: f64) -> Result<(f64, i64)> {
    let rotation = rotation_to(ell)?;
    let d = field.dim();
    let mut w = 2.0 * big_m;
    for _ in 0..=MAX_DOUBLINGS {
        let sites = slab_sites(d, &rotation, big_m, w);
        let sol = solve_absorbing(field, &sites, &Site::origin(d), &SolveOptions::default())?;
        let mut pos = 0.0;
        let mut side = 0.0;
        for (z, p) in &sol.exit_law {
            let zf: Vec<f64> = z.coords().iter().map(|&c| c as f64).collect();
            let along = zf.iter().zip(ell).map(|(a, b)| a * b).sum::<f64>();
            if along >= big_m {
                pos += p;
            } else if along > -big_m {
                side += p;
            }
        }
        if side <= SIDE_ESCAPE_TOL {
            return Ok((pos, w as i64));
        }
        w *= 2.0;
    }
    Err(Error::Precondition(format!(
        "transverse truncation still leaks more than {SIDE_ESCAPE_TOL:e} at half-width {}",
        w / 2.0
    )))
}

/// Fraction of environments with `P_{0,ω}[X_{T_{U_M}}·ℓ ≥ M] ≤ e^{−cM^β}`.
pub fn atypical_quenched_probe(
    spec: &EnvironmentSpec,
    ell: &[f64],
    big_m: f64,
    beta: f64,
    c: f64,
    n_env: usize,
    seed: u64,
) -> Result<AtypicalReport> {
    if n_env == 0 {
        return Err(Error::spec("parameters.n_env", "must be at least 1"));
    }
    let threshold = (-c * big_m.powf(beta)).exp();
    let out: Vec<Result<(f64, i64)>> = (0..n_env as u64)
        .into_par_iter()
        .map(|i| {
            let env = make_environment(&spec.clone().with_seed(derive_seed(seed, &[TAG_SLAB, i])))?;
            slab_positive_exit(&env, ell, big_m)
        })
        .collect();
    let mut probabilities = Vec::with_capacity(n_env);
    let mut widths = Vec::with_capacity(n_env);
    for o in out {
        let (p, w) = o?;
        probabilities.push(p);
        widths.push(w);
    }
    let atypical = probabilities.iter().filter(|&&p| p <= threshold).count();
    Ok(AtypicalReport {
        big_m,
        beta,
        c,
        threshold,
        fraction: atypical as f64 / n_env as f64,
        n_env,
        probabilities,
        widths,
    })
}
