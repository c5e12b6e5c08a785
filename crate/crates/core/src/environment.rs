//! Uniformly elliptic random environments, generated lazily and
//! deterministically from `(seed, site)`.
//!
//! Four kinds are supported: a homogeneous (deterministic) field, i.i.d.
//! sites with a Dirichlet marginal mapped into the elliptic simplex, i.i.d.
//! sites over a finite alphabet, and a finite-range Markov field over a
//! finite alphabet.
//!
//! The Markov field is produced tile by tile. Each tile of side `tile` is
//! swept lexicographically over a window padded by `2r`; every site draws
//! its symbol from the forward conditional kernel using a uniform keyed by
//! the site alone, so the realized value at a site never depends on query
//! order. Only the tile core is kept.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};
use std::sync::RwLock;

use rand::Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::lattice::{lattice_range, Site};
use crate::rng::{derive_seed, site_seed, unit_from_hash, StreamRng};

pub type Probs = SmallVec<[f64; 8]>;

const SUM_TOL: f64 = 1e-12;
const FLOOR_TOL: f64 = 1e-15;

/// Nearest-neighbor jump probabilities at one site, indexed by step index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionVector {
    pub probs: Probs,
}

impl TransitionVector {
    pub fn new(probs: &[f64]) -> Self {
        TransitionVector {
            probs: SmallVec::from_slice(probs),
        }
    }

    pub fn symmetric(dim: usize) -> Self {
        TransitionVector {
            probs: SmallVec::from_elem(1.0 / (2 * dim) as f64, 2 * dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.probs.len() / 2
    }

    #[inline]
    pub fn get(&self, k: usize) -> f64 {
        self.probs[k]
    }

    /// Checks `Σ = 1` and every entry `≥ 2κ`.
    pub fn validate(&self, kappa: f64) -> Result<()> {
        if self.probs.len() < 4 || self.probs.len() % 2 != 0 {
            return Err(Error::spec(
                "transition vector",
                format!("length {} is not 2d with d >= 2", self.probs.len()),
            ));
        }
        let sum: f64 = self.probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::spec(
                "transition vector",
                format!("entries sum to {sum}"),
            ));
        }
        if let Some(p) = self.probs.iter().find(|&&p| p < 2.0 * kappa - FLOOR_TOL) {
            return Err(Error::spec(
                "transition vector",
                format!("entry {p} below 2*kappa = {}", 2.0 * kappa),
            ));
        }
        Ok(())
    }

    /// Local drift `Σ_e e·ω(e)`.
    pub fn drift(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|i| self.probs[2 * i] - self.probs[2 * i + 1])
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    Homogeneous,
    IidContinuous,
    IidFiniteAlphabet,
    MarkovFiniteAlphabet,
}

fn default_tile() -> usize {
    16
}

/// Range-`r` interaction of the Markov kind. A site's forward conditional
/// puts log-weight `coupling · e^{−g|x−y|₁}` on agreeing with each
/// previously swept site `y` within ℓ₁-distance `range`. `c` is the declared
/// mixing constant used when reporting mixing bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub range: usize,
    #[serde(default)]
    pub c: f64,
    pub g: f64,
    #[serde(default)]
    pub coupling: f64,
    #[serde(default = "default_tile")]
    pub tile: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub kind: EnvKind,
    pub dim: usize,
    pub kappa: f64,
    /// Homogeneous kind: the single vector.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector: Option<Vec<f64>>,
    /// Finite-alphabet kinds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alphabet: Option<Vec<Vec<f64>>>,
    /// Finite-alphabet site marginal (defaults to uniform).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    /// Continuous kind: Dirichlet parameters (one value or 2d values).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dirichlet_alpha: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interaction: Option<Interaction>,
    #[serde(default)]
    pub seed: u64,
}

impl EnvironmentSpec {
    pub fn homogeneous(dim: usize, kappa: f64, vector: &[f64]) -> Self {
        EnvironmentSpec {
            kind: EnvKind::Homogeneous,
            dim,
            kappa,
            vector: Some(vector.to_vec()),
            alphabet: None,
            weights: None,
            dirichlet_alpha: None,
            interaction: None,
            seed: 0,
        }
    }

    pub fn iid_alphabet(dim: usize, kappa: f64, alphabet: Vec<Vec<f64>>, weights: Vec<f64>) -> Self {
        EnvironmentSpec {
            kind: EnvKind::IidFiniteAlphabet,
            dim,
            kappa,
            vector: None,
            alphabet: Some(alphabet),
            weights: Some(weights),
            dirichlet_alpha: None,
            interaction: None,
            seed: 0,
        }
    }

    pub fn iid_continuous(dim: usize, kappa: f64, alpha: Vec<f64>) -> Self {
        EnvironmentSpec {
            kind: EnvKind::IidContinuous,
            dim,
            kappa,
            vector: None,
            alphabet: None,
            weights: None,
            dirichlet_alpha: Some(alpha),
            interaction: None,
            seed: 0,
        }
    }

    pub fn markov(
        dim: usize,
        kappa: f64,
        alphabet: Vec<Vec<f64>>,
        weights: Vec<f64>,
        interaction: Interaction,
    ) -> Self {
        EnvironmentSpec {
            kind: EnvKind::MarkovFiniteAlphabet,
            dim,
            kappa,
            vector: None,
            alphabet: Some(alphabet),
            weights: Some(weights),
            dirichlet_alpha: None,
            interaction: Some(interaction),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Spec for the `draw`-th independent environment sample.
    pub fn draw(&self, draw: u64) -> Self {
        let mut s = self.clone();
        s.seed = derive_seed(self.seed, &[0xe7, draw]);
        s
    }

    pub fn is_finite_alphabet(&self) -> bool {
        matches!(
            self.kind,
            EnvKind::Homogeneous | EnvKind::IidFiniteAlphabet | EnvKind::MarkovFiniteAlphabet
        )
    }

    /// True when the law is a point mass (homogeneous or one-letter alphabet).
    pub fn is_deterministic(&self) -> bool {
        match self.kind {
            EnvKind::Homogeneous => true,
            EnvKind::IidFiniteAlphabet | EnvKind::MarkovFiniteAlphabet => {
                self.letters().map(|a| a.len() == 1).unwrap_or(false)
            }
            EnvKind::IidContinuous => false,
        }
    }

    /// Alphabet letters as transition vectors (homogeneous: one letter).
    pub fn letters(&self) -> Result<Vec<TransitionVector>> {
        match self.kind {
            EnvKind::Homogeneous => {
                let v = self
                    .vector
                    .as_ref()
                    .ok_or_else(|| Error::spec("environment.vector", "missing"))?;
                Ok(vec![TransitionVector::new(v)])
            }
            EnvKind::IidFiniteAlphabet | EnvKind::MarkovFiniteAlphabet => Ok(self
                .alphabet
                .as_ref()
                .ok_or_else(|| Error::spec("environment.alphabet", "missing"))?
                .iter()
                .map(|v| TransitionVector::new(v))
                .collect()),
            EnvKind::IidContinuous => Err(Error::Unsupported(
                "continuous marginal has no finite alphabet".into(),
            )),
        }
    }

    /// Normalized letter weights.
    pub fn letter_weights(&self) -> Result<Vec<f64>> {
        let n = self.letters()?.len();
        let w = match (&self.kind, &self.weights) {
            (EnvKind::Homogeneous, _) => vec![1.0],
            (_, Some(w)) => w.clone(),
            (_, None) => vec![1.0; n],
        };
        let s: f64 = w.iter().sum();
        Ok(w.iter().map(|x| x / s).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim;
        if d < 2 {
            return Err(Error::spec("environment.dim", format!("{d} < 2")));
        }
        let kmax = 1.0 / (4.0 * d as f64);
        if !(self.kappa > 0.0 && self.kappa <= kmax) {
            return Err(Error::spec(
                "environment.kappa",
                format!("{} not in (0, 1/(4d)] = (0, {kmax}]", self.kappa),
            ));
        }
        match self.kind {
            EnvKind::Homogeneous => {
                let v = self
                    .vector
                    .as_ref()
                    .ok_or_else(|| Error::spec("environment.vector", "missing"))?;
                check_vector("environment.vector", v, d, self.kappa)?;
            }
            EnvKind::IidFiniteAlphabet | EnvKind::MarkovFiniteAlphabet => {
                let a = self
                    .alphabet
                    .as_ref()
                    .ok_or_else(|| Error::spec("environment.alphabet", "missing"))?;
                if a.is_empty() {
                    return Err(Error::spec("environment.alphabet", "empty"));
                }
                for (i, v) in a.iter().enumerate() {
                    check_vector(&format!("environment.alphabet[{i}]"), v, d, self.kappa)?;
                }
                if let Some(w) = &self.weights {
                    if w.len() != a.len() || w.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                        return Err(Error::spec(
                            "environment.weights",
                            "must be positive, one per alphabet letter",
                        ));
                    }
                }
                if self.kind == EnvKind::MarkovFiniteAlphabet {
                    let it = self
                        .interaction
                        .as_ref()
                        .ok_or_else(|| Error::spec("environment.interaction", "missing"))?;
                    if it.range < 1 {
                        return Err(Error::spec("environment.interaction.range", "must be >= 1"));
                    }
                    if !(it.g > 0.0) {
                        return Err(Error::spec("environment.interaction.g", "must be > 0"));
                    }
                    if !(it.c >= 0.0) {
                        return Err(Error::spec("environment.interaction.c", "must be >= 0"));
                    }
                    if it.tile < 1 {
                        return Err(Error::spec("environment.interaction.tile", "must be >= 1"));
                    }
                }
            }
            EnvKind::IidContinuous => {
                let a = self
                    .dirichlet_alpha
                    .as_ref()
                    .ok_or_else(|| Error::spec("environment.dirichlet_alpha", "missing"))?;
                if !(a.len() == 1 || a.len() == 2 * d) || a.iter().any(|&x| !(x > 0.0)) {
                    return Err(Error::spec(
                        "environment.dirichlet_alpha",
                        "need one or 2d positive values",
                    ));
                }
                if (1.0 - 4.0 * d as f64 * self.kappa) <= 0.0 {
                    return Err(Error::spec(
                        "environment.kappa",
                        "kappa = 1/(4d) leaves no room for a continuous marginal",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Mean of the site marginal.
    pub fn marginal_mean(&self) -> Result<Vec<f64>> {
        let n = 2 * self.dim;
        match self.kind {
            EnvKind::IidContinuous => {
                let a = self.alpha_vector();
                let s: f64 = a.iter().sum();
                let scale = 1.0 - 4.0 * self.dim as f64 * self.kappa;
                Ok(a.iter().map(|x| 2.0 * self.kappa + scale * x / s).collect())
            }
            _ => {
                let letters = self.letters()?;
                let w = self.letter_weights()?;
                let mut m = vec![0.0; n];
                for (l, wi) in letters.iter().zip(&w) {
                    for k in 0..n {
                        m[k] += wi * l.get(k);
                    }
                }
                Ok(m)
            }
        }
    }

    fn alpha_vector(&self) -> Vec<f64> {
        let a = self.dirichlet_alpha.clone().unwrap_or_else(|| vec![1.0]);
        if a.len() == 1 {
            vec![a[0]; 2 * self.dim]
        } else {
            a
        }
    }
}

fn check_vector(field: &str, v: &[f64], d: usize, kappa: f64) -> Result<()> {
    if v.len() != 2 * d {
        return Err(Error::spec(field, format!("length {} != 2d = {}", v.len(), 2 * d)));
    }
    TransitionVector::new(v)
        .validate(kappa)
        .map_err(|e| Error::spec(field, e.to_string()))
}

/// Anything that assigns an elliptic transition vector to sites.
pub trait Field: Sync {
    fn dim(&self) -> usize;
    fn kappa(&self) -> f64;
    fn transition(&self, x: &Site) -> TransitionVector;
    /// Whether `transition` is defined at `x`.
    fn covers(&self, _x: &Site) -> bool {
        true
    }
}

/// Forward conditional kernel of the Markov kind.
#[derive(Clone, Debug)]
pub struct MarkovKernel {
    pub log_weights: Vec<f64>,
    /// Lexicographically-earlier offsets within ℓ₁-range and their couplings.
    pub offsets: Vec<(SmallVec<[i64; 4]>, f64)>,
}

impl MarkovKernel {
    pub fn from_spec(spec: &EnvironmentSpec) -> Result<Self> {
        let it = spec
            .interaction
            .as_ref()
            .ok_or_else(|| Error::spec("environment.interaction", "missing"))?;
        let w = spec.letter_weights()?;
        let r = it.range as i64;
        let d = spec.dim;
        let lo = vec![-r; d];
        let hi = vec![r; d];
        let offsets = lattice_range(&lo, &hi)
            .filter(|o| {
                let n = o.l1();
                n >= 1 && n <= r && o.coords().iter().find(|&&c| c != 0).copied().unwrap_or(0) < 0
            })
            .map(|o| {
                let strength = it.coupling * (-it.g * o.l1() as f64).exp();
                (o.0, strength)
            })
            .collect();
        Ok(MarkovKernel {
            log_weights: w.iter().map(|x| x.ln()).collect(),
            offsets,
        })
    }

    /// Conditional law of a site's symbol given the symbols of its earlier
    /// neighbors (`None` when the neighbor is outside the swept window).
    pub fn conditional(&self, earlier: impl Fn(&[i64]) -> Option<usize>) -> Vec<f64> {
        let mut lw = self.log_weights.clone();
        for (off, strength) in &self.offsets {
            if let Some(s) = earlier(off) {
                lw[s] += strength;
            }
        }
        let m = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = lw.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= z);
        p
    }
}

fn inverse_cdf(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

#[derive(Default)]
struct Cache {
    vectors: HashMap<Site, TransitionVector>,
    symbols: HashMap<Site, usize>,
}

/// A lazily realized environment.
pub struct Environment {
    spec: EnvironmentSpec,
    letters: Vec<TransitionVector>,
    cdf_weights: Vec<f64>,
    kernel: Option<MarkovKernel>,
    cache: RwLock<Cache>,
}

impl std::fmt::Debug for Environment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Environment")
            .field("spec", &self.spec)
            .finish_non_exhaustive()
    }
}

/// Builds a lazily realized environment for a validated spec.
pub fn make_environment(spec: &EnvironmentSpec) -> Result<Environment> {
    Environment::new(spec.clone())
}

impl Environment {
    pub fn new(spec: EnvironmentSpec) -> Result<Self> {
        spec.validate()?;
        let (letters, cdf_weights) = if spec.kind == EnvKind::IidContinuous {
            (Vec::new(), Vec::new())
        } else {
            (spec.letters()?, spec.letter_weights()?)
        };
        let kernel = if spec.kind == EnvKind::MarkovFiniteAlphabet {
            Some(MarkovKernel::from_spec(&spec)?)
        } else {
            None
        };
        Ok(Environment {
            spec,
            letters,
            cdf_weights,
            kernel,
            cache: RwLock::new(Cache::default()),
        })
    }

    pub fn spec(&self) -> &EnvironmentSpec {
        &self.spec
    }

    pub fn transition_at(&self, x: &Site) -> TransitionVector {
        self.transition(x)
    }

    /// Alphabet index of the letter at `x` (finite-alphabet kinds only).
    pub fn symbol_at(&self, x: &Site) -> Option<usize> {
        match self.spec.kind {
            EnvKind::Homogeneous => Some(0),
            EnvKind::IidContinuous => None,
            EnvKind::IidFiniteAlphabet => Some(self.iid_symbol(x)),
            EnvKind::MarkovFiniteAlphabet => Some(self.markov_symbol(x)),
        }
    }

    pub fn cached_sites(&self) -> usize {
        let c = self.cache.read().unwrap();
        c.vectors.len().max(c.symbols.len())
    }

    fn iid_symbol(&self, x: &Site) -> usize {
        let u = unit_from_hash(site_seed(self.spec.seed, x));
        inverse_cdf(&self.cdf_weights, u)
    }

    fn continuous_vector(&self, x: &Site) -> TransitionVector {
        if let Some(v) = self.cache.read().unwrap().vectors.get(x) {
            return v.clone();
        }
        let mut rng = StreamRng::seed_from_u64(site_seed(self.spec.seed, x));
        let alpha = self.spec.alpha_vector();
        let mut w: Probs = alpha
            .iter()
            .map(|&a| Gamma::new(a, 1.0).expect("alpha validated").sample(&mut rng))
            .collect();
        let s: f64 = w.iter().sum();
        let k = self.spec.kappa;
        let scale = 1.0 - 4.0 * self.spec.dim as f64 * k;
        for p in w.iter_mut() {
            *p = 2.0 * k + scale * (*p / s);
        }
        // Renormalize away rounding so the sum is 1 to machine precision.
        let s: f64 = w.iter().sum();
        let (imax, _) = w
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        w[imax] += 1.0 - s;
        let tv = TransitionVector { probs: w };
        self.cache
            .write()
            .unwrap()
            .vectors
            .entry(x.clone())
            .or_insert_with(|| tv.clone());
        tv
    }

    fn markov_symbol(&self, x: &Site) -> usize {
        if let Some(&s) = self.cache.read().unwrap().symbols.get(x) {
            return s;
        }
        let it = self.spec.interaction.as_ref().expect("validated");
        let t = it.tile as i64;
        let pad = 2 * it.range as i64;
        let core_lo: Vec<i64> = x.coords().iter().map(|c| c.div_euclid(t) * t).collect();
        let core_hi: Vec<i64> = core_lo.iter().map(|c| c + t - 1).collect();
        let lo: Vec<i64> = core_lo.iter().map(|c| c - pad).collect();
        let hi: Vec<i64> = core_hi.iter().map(|c| c + pad).collect();
        let swept = sweep_window(
            self.kernel.as_ref().expect("markov kernel"),
            lattice_range(&lo, &hi),
            |y| unit_from_hash(site_seed(self.spec.seed, y)),
        );
        let mut cache = self.cache.write().unwrap();
        for (site, s) in swept {
            let inside = site
                .coords()
                .iter()
                .zip(core_lo.iter().zip(&core_hi))
                .all(|(c, (a, b))| c >= a && c <= b);
            if inside {
                cache.symbols.entry(site).or_insert(s);
            }
        }
        *cache.symbols.get(x).expect("site lies in its own tile")
    }
}

/// Lexicographic forward sweep: each site draws from the kernel's conditional
/// given already-swept neighbors, using `uniform(site)`.
fn sweep_window(
    kernel: &MarkovKernel,
    sites: impl Iterator<Item = Site>,
    uniform: impl Fn(&Site) -> f64,
) -> Vec<(Site, usize)> {
    let mut done: HashMap<Site, usize> = HashMap::new();
    let mut order = Vec::new();
    for site in sites {
        let p = kernel.conditional(|off| {
            let y = Site(site.0.iter().zip(off).map(|(a, b)| a + b).collect());
            done.get(&y).copied()
        });
        let s = inverse_cdf(&p, uniform(&site));
        done.insert(site.clone(), s);
        order.push(site);
    }
    order
        .into_iter()
        .map(|s| {
            let v = done[&s];
            (s, v)
        })
        .collect()
}

impl Field for Environment {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn kappa(&self) -> f64 {
        self.spec.kappa
    }

    fn transition(&self, x: &Site) -> TransitionVector {
        match self.spec.kind {
            EnvKind::Homogeneous => self.letters[0].clone(),
            EnvKind::IidFiniteAlphabet => self.letters[self.iid_symbol(x)].clone(),
            EnvKind::MarkovFiniteAlphabet => self.letters[self.markov_symbol(x)].clone(),
            EnvKind::IidContinuous => self.continuous_vector(x),
        }
    }
}

/// A finite, explicitly realized window of an environment.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowField {
    pub dim: usize,
    pub kappa: f64,
    pub sites: BTreeMap<Site, TransitionVector>,
}

impl WindowField {
    pub fn new(dim: usize, kappa: f64) -> Self {
        WindowField {
            dim,
            kappa,
            sites: BTreeMap::new(),
        }
    }

    pub fn from_field<F: Field + ?Sized>(field: &F, sites: impl IntoIterator<Item = Site>) -> Self {
        let mut w = WindowField::new(field.dim(), field.kappa());
        for s in sites {
            let tv = field.transition(&s);
            w.sites.insert(s, tv);
        }
        w
    }

    pub fn insert(&mut self, site: Site, tv: TransitionVector) {
        self.sites.insert(site, tv);
    }

    /// CSV with header `x1..xd, p0..p{2d-1}` (step-index order).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (1..=self.dim).map(|i| format!("x{i}")).collect();
        header.extend((0..2 * self.dim).map(step_label));
        wr.write_record(&header)?;
        for (s, tv) in &self.sites {
            let mut rec: Vec<String> = s.coords().iter().map(|c| c.to_string()).collect();
            rec.extend(tv.probs.iter().map(|p| format!("{p:?}")));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, kappa: f64) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let headers = rd.headers()?.clone();
        let n = headers.len();
        if n % 3 != 0 || n < 6 {
            return Err(Error::spec("window csv", format!("{n} columns is not 3d")));
        }
        let dim = n / 3;
        let mut w = WindowField::new(dim, kappa);
        for (line, rec) in rd.records().enumerate() {
            let rec = rec?;
            let parse_err = |c: usize| Error::spec("window csv", format!("row {line}, column {c}"));
            let coords: Vec<i64> = (0..dim)
                .map(|c| rec[c].trim().parse().map_err(|_| parse_err(c)))
                .collect::<Result<_>>()?;
            let probs: Vec<f64> = (dim..n)
                .map(|c| rec[c].trim().parse().map_err(|_| parse_err(c)))
                .collect::<Result<_>>()?;
            let tv = TransitionVector::new(&probs);
            tv.validate(kappa)?;
            w.sites.insert(Site::new(&coords), tv);
        }
        Ok(w)
    }
}

pub fn step_label(k: usize) -> String {
    format!("p{}e{}", if k % 2 == 0 { "+" } else { "-" }, k / 2 + 1)
}

impl Field for WindowField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn kappa(&self) -> f64 {
        self.kappa
    }

    fn transition(&self, x: &Site) -> TransitionVector {
        match self.sites.get(x) {
            Some(tv) => tv.clone(),
            None => panic!("site {x} outside the realized window"),
        }
    }

    fn covers(&self, x: &Site) -> bool {
        self.sites.contains_key(x)
    }
}

/// Condition (R): `g > 18 ln(1/κ)`.
pub fn condition_r_holds(kappa: f64, g: f64) -> bool {
    g > 18.0 * (1.0 / kappa).ln()
}

pub fn check_condition_r(spec: &EnvironmentSpec) -> Result<bool> {
    let it = spec.interaction.as_ref().ok_or_else(|| {
        Error::Precondition("condition (R) needs interaction parameters".into())
    })?;
    Ok(condition_r_holds(spec.kappa, it.g))
}

/// Which boundary sum enters the mixing bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixingBound {
    /// Sum over `∂^rΔ × ∂^rA`.
    Strong,
    /// Sum over `Δ × A`.
    Bulk,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MixingCertificate {
    pub delta_set: Vec<Site>,
    pub v_set: Vec<Site>,
    pub a_set: Vec<Site>,
    /// `sup_a P[ω_Δ = a | η] / P[ω_Δ = a | η′]`.
    pub ratio: f64,
    pub bound: f64,
    pub passes: bool,
}

#[derive(Clone, Debug)]
pub struct MixingOptions {
    pub bound: MixingBound,
    /// `(C, g)`; defaults to the spec's declared constants.
    pub constants: Option<(f64, f64)>,
    pub budget: u128,
}

impl Default for MixingOptions {
    fn default() -> Self {
        MixingOptions {
            bound: MixingBound::Strong,
            constants: None,
            budget: 10_000_000,
        }
    }
}

/// Sites outside `set` within ℓ₁-distance `r` of it.
pub fn r_boundary(set: &[Site], r: usize) -> Vec<Site> {
    let members: HashSet<&Site> = set.iter().collect();
    let mut out: HashSet<Site> = HashSet::new();
    if let Some(first) = set.first() {
        let d = first.dim();
        let ri = r as i64;
        let offsets: Vec<Site> = lattice_range(&vec![-ri; d], &vec![ri; d])
            .filter(|o| o.l1() <= ri && o.l1() > 0)
            .collect();
        for x in set {
            for o in &offsets {
                let y = x.add(o);
                if !members.contains(&y) {
                    out.insert(y);
                }
            }
        }
    }
    let mut v: Vec<Site> = out.into_iter().collect();
    v.sort();
    v
}

/// `exp(C Σ e^{−g|x−y|₁})` over the pairs selected by `kind`.
pub fn mixing_bound(delta: &[Site], a: &[Site], r: usize, c: f64, g: f64, kind: MixingBound) -> f64 {
    if c == 0.0 || a.is_empty() {
        return 1.0;
    }
    let (xs, ys) = match kind {
        MixingBound::Strong => (r_boundary(delta, r), r_boundary(a, r)),
        MixingBound::Bulk => (delta.to_vec(), a.to_vec()),
    };
    let s: f64 = xs
        .iter()
        .flat_map(|x| ys.iter().map(move |y| (-g * x.l1_dist(y) as f64).exp()))
        .sum();
    (c * s).exp()
}

/// Exact conditional-law ratio of `(ω_x)_{x∈Δ}` under two boundary
/// configurations `eta`, `eta_prime` on `V^c` that agree off `A`.
///
/// The field on the finite window `V ∪ dom(η)` is the forward lexicographic
/// sweep of the spec's kernel (a product law for the i.i.d. kind). Factors
/// that do not involve any `V` site cancel between numerator and denominator
/// and are skipped, which makes the i.i.d. ratio exactly 1.
pub fn exact_conditional_ratio(
    spec: &EnvironmentSpec,
    delta: &[Site],
    v: &[Site],
    a: &[Site],
    eta: &BTreeMap<Site, usize>,
    eta_prime: &BTreeMap<Site, usize>,
    opts: &MixingOptions,
) -> Result<MixingCertificate> {
    spec.validate()?;
    if !spec.is_finite_alphabet() {
        return Err(Error::Unsupported(
            "exact conditional ratio needs a finite alphabet".into(),
        ));
    }
    let nletters = spec.letters()?.len();
    let r = spec.interaction.as_ref().map(|i| i.range).unwrap_or(1);
    let v_set: HashSet<&Site> = v.iter().collect();
    if delta.iter().any(|x| !v_set.contains(x)) {
        return Err(Error::Precondition("Δ ⊄ V".into()));
    }
    // d₁(Δ, V^c) ≥ r: every site within distance < r of Δ is in V.
    for x in delta {
        let d = x.dim();
        let ri = r as i64;
        for o in lattice_range(&vec![-ri; d], &vec![ri; d]) {
            if o.l1() < ri && !v_set.contains(&x.add(&o)) {
                return Err(Error::Precondition(format!(
                    "d1(Δ, V^c) < {r} near {x}"
                )));
            }
        }
    }
    if a.iter().any(|y| v_set.contains(y) || !eta.contains_key(y)) {
        return Err(Error::Precondition("A must lie in dom(η) ⊂ V^c".into()));
    }
    if eta.keys().ne(eta_prime.keys()) {
        return Err(Error::Precondition("η and η′ have different domains".into()));
    }
    if eta.keys().any(|y| v_set.contains(y)) {
        return Err(Error::Precondition("η must be a configuration on V^c".into()));
    }
    let a_set: HashSet<&Site> = a.iter().collect();
    for (y, s) in eta {
        if *s >= nletters || eta_prime[y] >= nletters {
            return Err(Error::spec("eta", format!("symbol out of range at {y}")));
        }
        if !a_set.contains(y) && eta_prime[y] != *s {
            return Err(Error::Precondition(format!(
                "η and η′ differ at {y} outside A"
            )));
        }
    }

    // Window in sweep order; each V site gets a slot.
    let mut window: Vec<Site> = v.iter().chain(eta.keys()).cloned().collect();
    window.sort();
    window.dedup();
    let v_index: HashMap<&Site, usize> = v.iter().enumerate().map(|(i, s)| (s, i)).collect();
    let kernel = if spec.kind == EnvKind::MarkovFiniteAlphabet {
        Some(MarkovKernel::from_spec(spec)?)
    } else {
        None
    };
    let weights = spec.letter_weights()?;

    // Sites whose factor can depend on a V symbol.
    let relevant: Vec<&Site> = window
        .iter()
        .filter(|x| {
            v_set.contains(x)
                || kernel.as_ref().is_some_and(|k| {
                    k.offsets.iter().any(|(o, _)| {
                        let y = Site(x.0.iter().zip(o).map(|(a, b)| a + b).collect());
                        v_set.contains(&y)
                    })
                })
        })
        .collect();

    let configs = (nletters as u128)
        .checked_pow(v.len() as u32)
        .unwrap_or(u128::MAX);
    let size = configs.saturating_mul(relevant.len().max(1) as u128);
    if size > opts.budget {
        return Err(Error::BudgetExceeded {
            what: "conditional-ratio enumeration".into(),
            size,
            budget: opts.budget,
        });
    }

    let delta_idx: Vec<usize> = delta.iter().map(|x| v_index[x]).collect();
    let n_delta_cfg = nletters.pow(delta.len() as u32);

    let marginal = |bc: &BTreeMap<Site, usize>| -> Vec<f64> {
        let mut out = vec![0.0; n_delta_cfg];
        let mut assign = vec![0usize; v.len()];
        for code in 0..configs as u64 {
            let mut c = code;
            for slot in assign.iter_mut() {
                *slot = (c % nletters as u64) as usize;
                c /= nletters as u64;
            }
            let sym = |y: &Site| -> Option<usize> {
                match v_index.get(y) {
                    Some(&i) => Some(assign[i]),
                    None => bc.get(y).copied(),
                }
            };
            let mut wgt = 1.0;
            for x in &relevant {
                let s = sym(x).expect("window site");
                let p = match &kernel {
                    Some(k) => k.conditional(|o| {
                        let y = Site(x.0.iter().zip(o).map(|(a, b)| a + b).collect());
                        if *y.coords() < *x.coords() {
                            sym(&y)
                        } else {
                            None
                        }
                    })[s],
                    None => weights[s],
                };
                wgt *= p;
            }
            let di = delta_idx
                .iter()
                .rev()
                .fold(0usize, |acc, &i| acc * nletters + assign[i]);
            out[di] += wgt;
        }
        let z: f64 = out.iter().sum();
        out.iter_mut().for_each(|x| *x /= z);
        out
    };

    let p = marginal(eta);
    let q = marginal(eta_prime);
    let ratio = p
        .iter()
        .zip(&q)
        .map(|(a, b)| a / b)
        .fold(0.0f64, f64::max);
    let (c, g) = match opts.constants {
        Some(cg) => cg,
        None => match &spec.interaction {
            Some(it) => (it.c, it.g),
            None => (0.0, f64::INFINITY),
        },
    };
    let bound = mixing_bound(delta, a, r, c, g, opts.bound);
    Ok(MixingCertificate {
        delta_set: delta.to_vec(),
        v_set: v.to_vec(),
        a_set: a.to_vec(),
        ratio,
        bound,
        passes: ratio <= bound,
    })
}

/// Draws `n` uniform symbols for a boundary configuration (test helper
/// exposed for experiment drivers).
pub fn random_configuration(
    sites: &[Site],
    nletters: usize,
    rng: &mut impl Rng,
) -> BTreeMap<Site, usize> {
    sites
        .iter()
        .map(|s| (s.clone(), rng.random_range(0..nletters)))
        .collect()
}

/// Mixing constants read off the field's kernel on a `1 × length` strip
/// along `e₁`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasuredMixing {
    pub c: f64,
    pub g: f64,
    /// `(ℓ₁-distance from Δ to A, worst log-ratio)` per probe.
    pub log_ratios: Vec<(i64, f64)>,
}

/// Strip sites `(0,…,0) … (length−1,0,…,0)`.
pub fn strip_sites(dim: usize, length: i64) -> Vec<Site> {
    (0..length)
        .map(|i| {
            let mut c = vec![0i64; dim];
            c[0] = i;
            Site::new(&c)
        })
        .collect()
}

/// Worst conditional-ratio logarithm for `Δ = {s_i}`, `A = {s_{n−1}}` over
/// every pair of end configurations; `g` is the decay rate of its
/// log-log fit in the distance and `C` the smallest constant for which the
/// chosen bound covers every probe.
pub fn measure_mixing_constants(spec: &EnvironmentSpec, length: i64, kind: MixingBound) -> Result<MeasuredMixing> {
    if length < 4 {
        return Err(Error::spec("parameters.strip_length", "need at least 4 sites"));
    }
    let nletters = spec.letters()?.len();
    let r = spec.interaction.as_ref().map(|i| i.range).unwrap_or(1);
    let s = strip_sites(spec.dim, length);
    let n = s.len();
    let v = s[1..n - 1].to_vec();
    let a = vec![s[n - 1].clone()];
    let opts = MixingOptions {
        constants: Some((0.0, 1.0)),
        ..Default::default()
    };
    let mut log_ratios = Vec::new();
    for i in 1..n - 1 {
        let delta = vec![s[i].clone()];
        let mut worst = 0.0f64;
        for left in 0..nletters {
            for e1 in 0..nletters {
                for e2 in 0..nletters {
                    let eta: BTreeMap<Site, usize> = [(s[0].clone(), left), (s[n - 1].clone(), e1)].into();
                    let eta2: BTreeMap<Site, usize> = [(s[0].clone(), left), (s[n - 1].clone(), e2)].into();
                    let cert = exact_conditional_ratio(spec, &delta, &v, &a, &eta, &eta2, &opts)?;
                    worst = worst.max(cert.ratio.ln());
                }
            }
        }
        log_ratios.push((s[i].l1_dist(&s[n - 1]), worst));
    }
    let pts: Vec<(f64, f64)> = log_ratios
        .iter()
        .filter(|p| p.1 > 1e-300)
        .map(|&(k, lr)| (k as f64, lr.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::Precondition("field shows no measurable dependence on the boundary".into()));
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let g = -sxy / sxx;
    if !(g > 0.0) {
        return Err(Error::Precondition(format!("measured decay rate {g} is not positive")));
    }
    let mut c = 0.0f64;
    for (i, &(_, lr)) in log_ratios.iter().enumerate() {
        let unit = mixing_bound(&[s[i + 1].clone()], &a, r, 1.0, g, kind).ln();
        if unit > 0.0 {
            c = c.max(lr / unit);
        }
    }
    Ok(MeasuredMixing {
        c: c * (1.0 + 1e-9),
        g,
        log_ratios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn biased() -> EnvironmentSpec {
        EnvironmentSpec::homogeneous(2, 0.05, &[0.4, 0.1, 0.25, 0.25])
    }

    #[test]
    fn homogeneous_constant_everywhere() {
        let env = make_environment(&biased()).unwrap();
        for s in lattice_range(&[-3, -3], &[3, 3]) {
            assert_eq!(env.transition_at(&s).probs.as_slice(), &[0.4, 0.1, 0.25, 0.25]);
        }
    }

    #[test]
    fn one_letter_alphabet_is_homogeneous() {
        let spec = EnvironmentSpec::iid_alphabet(2, 0.05, vec![vec![0.4, 0.1, 0.25, 0.25]], vec![1.0])
            .with_seed(99);
        let env = make_environment(&spec).unwrap();
        let h = make_environment(&biased()).unwrap();
        for s in lattice_range(&[-5, -5], &[5, 5]) {
            assert_eq!(env.transition_at(&s), h.transition_at(&s));
        }
        assert!(spec.is_deterministic());
    }

    #[test]
    fn kappa_out_of_range_rejected() {
        let mut spec = biased();
        spec.kappa = 0.3;
        match spec.validate() {
            Err(Error::InvalidSpec { field, .. }) => assert_eq!(field, "environment.kappa"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn alphabet_violating_ellipticity_rejected() {
        let spec = EnvironmentSpec::iid_alphabet(
            2,
            0.05,
            vec![vec![0.85, 0.05, 0.05, 0.05], vec![0.91, 0.03, 0.03, 0.03]],
            vec![0.5, 0.5],
        );
        assert!(make_environment(&spec).is_err());
    }

    #[test]
    fn continuous_marginal_elliptic_and_mean_within_3_sigma() {
        let spec = EnvironmentSpec::iid_continuous(2, 0.05, vec![2.0, 1.0, 1.0, 1.0]).with_seed(3);
        let env = make_environment(&spec).unwrap();
        let mean = spec.marginal_mean().unwrap();
        let n = 10_000;
        let mut sum = [0.0; 4];
        let mut sq = [0.0; 4];
        for i in 0..n {
            let tv = env.transition_at(&Site::new(&[i, -3 * i]));
            tv.validate(0.05).unwrap();
            for k in 0..4 {
                sum[k] += tv.get(k);
                sq[k] += tv.get(k) * tv.get(k);
            }
        }
        for k in 0..4 {
            let m = sum[k] / n as f64;
            let var = sq[k] / n as f64 - m * m;
            let se = (var / n as f64).sqrt();
            assert!((m - mean[k]).abs() < 3.0 * se, "k={k} m={m} mean={}", mean[k]);
        }
    }

    #[test]
    fn transition_at_is_deterministic() {
        let spec = EnvironmentSpec::iid_continuous(2, 0.05, vec![1.0]).with_seed(5);
        let a = make_environment(&spec).unwrap();
        let b = make_environment(&spec).unwrap();
        let s = Site::new(&[4, -7]);
        let first = a.transition_at(&s);
        assert_eq!(first, a.transition_at(&s));
        assert_eq!(first, b.transition_at(&s));
    }

    #[test]
    fn iid_pair_collision_rate() {
        // Two letters with weights (0.5, 0.5): two sites agree w.p. 0.5.
        let spec = EnvironmentSpec::iid_alphabet(
            2,
            0.05,
            vec![vec![0.4, 0.1, 0.25, 0.25], vec![0.25, 0.25, 0.4, 0.1]],
            vec![0.5, 0.5],
        )
        .with_seed(11);
        let env = make_environment(&spec).unwrap();
        let n = 1000;
        let same = (0..n)
            .filter(|&i| {
                env.transition_at(&Site::new(&[i, 0])) == env.transition_at(&Site::new(&[i, 1000]))
            })
            .count() as f64;
        let p = 0.5;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((same - n as f64 * p).abs() < 3.0 * sigma, "same = {same}");
    }

    fn markov_spec(coupling: f64) -> EnvironmentSpec {
        EnvironmentSpec::markov(
            2,
            0.05,
            vec![vec![0.4, 0.1, 0.25, 0.25], vec![0.1, 0.4, 0.25, 0.25]],
            vec![0.5, 0.5],
            Interaction {
                range: 1,
                c: 1.0,
                g: 1.0,
                coupling,
                tile: 8,
            },
        )
        .with_seed(21)
    }

    #[test]
    fn markov_field_is_query_order_independent() {
        let spec = markov_spec(3.0);
        let a = make_environment(&spec).unwrap();
        let b = make_environment(&spec).unwrap();
        let sites: Vec<Site> = lattice_range(&[-12, -12], &[12, 12]).collect();
        let fwd: Vec<_> = sites.iter().map(|s| a.symbol_at(s)).collect();
        let bwd: Vec<_> = sites.iter().rev().map(|s| b.symbol_at(s)).collect();
        let bwd: Vec<_> = bwd.into_iter().rev().collect();
        assert_eq!(fwd, bwd);
    }

    #[test]
    fn markov_correlation_decays_with_distance() {
        // Strong coupling: neighbors inside a tile agree much more often than
        // sites in different tiles (distance > 2r, disjoint sweeps).
        let spec = markov_spec(3.0);
        let env = make_environment(&spec).unwrap();
        let n = 4000;
        let mut near = 0.0;
        let mut far = 0.0;
        for i in 0..n {
            let base = Site::new(&[8 * i + 2, 3]);
            let s0 = env.symbol_at(&base).unwrap();
            if env.symbol_at(&Site::new(&[8 * i + 3, 3])) == Some(s0) {
                near += 1.0;
            }
            if env.symbol_at(&Site::new(&[8 * i + 2, 3 + 40])) == Some(s0) {
                far += 1.0;
            }
        }
        let nf = n as f64;
        let sigma = (nf * 0.25).sqrt();
        assert!((far - 0.5 * nf).abs() < 3.0 * sigma, "far agreement {far}");
        assert!(near > far + 3.0 * sigma, "near {near} far {far}");
    }

    #[test]
    fn condition_r_examples() {
        assert!(condition_r_holds(0.05, 60.0));
        assert!(!condition_r_holds(0.05, 50.0));
        assert!(condition_r_holds(0.125, 38.0));
        assert!(check_condition_r(&biased()).is_err());
    }

    fn strip(n: i64) -> Vec<Site> {
        (0..n).map(|i| Site::new(&[i, 0])).collect()
    }

    #[test]
    fn iid_ratio_is_exactly_one() {
        let spec = EnvironmentSpec::iid_alphabet(
            2,
            0.05,
            vec![vec![0.4, 0.1, 0.25, 0.25], vec![0.25, 0.25, 0.1, 0.4]],
            vec![0.3, 0.7],
        );
        let s = strip(5);
        let v = s[1..4].to_vec();
        let delta = vec![s[2].clone()];
        let a = vec![s[4].clone()];
        let eta: BTreeMap<Site, usize> = [(s[0].clone(), 0), (s[4].clone(), 0)].into();
        let eta2: BTreeMap<Site, usize> = [(s[0].clone(), 0), (s[4].clone(), 1)].into();
        let cert =
            exact_conditional_ratio(&spec, &delta, &v, &a, &eta, &eta2, &MixingOptions::default())
                .unwrap();
        assert_eq!(cert.ratio, 1.0);
        assert!(cert.passes);
    }

    #[test]
    fn equal_conditioning_gives_one() {
        let spec = markov_spec(2.0);
        let s = strip(5);
        let v = s[1..4].to_vec();
        let eta: BTreeMap<Site, usize> = [(s[0].clone(), 1), (s[4].clone(), 0)].into();
        let cert = exact_conditional_ratio(
            &spec,
            &[s[2].clone()],
            &v,
            &[],
            &eta,
            &eta,
            &MixingOptions::default(),
        )
        .unwrap();
        assert_eq!(cert.ratio, 1.0);
    }

    #[test]
    fn markov_strip_ratio_against_brute_force() {
        // 1×5 strip, two letters, range 1. Brute force: enumerate all 2⁵
        // strip configurations with the forward-sweep product law and
        // condition directly.
        let spec = markov_spec(2.0);
        let s = strip(5);
        let v = s[1..4].to_vec();
        let delta = vec![s[2].clone()];
        let a = vec![s[4].clone()];
        let eta: BTreeMap<Site, usize> = [(s[0].clone(), 0), (s[4].clone(), 0)].into();
        let eta2: BTreeMap<Site, usize> = [(s[0].clone(), 0), (s[4].clone(), 1)].into();
        let cert =
            exact_conditional_ratio(&spec, &delta, &v, &a, &eta, &eta2, &MixingOptions::default())
                .unwrap();

        let k = 2.0 * (-1.0f64).exp();
        let joint = |c: [usize; 5]| -> f64 {
            let mut p = 0.5;
            for i in 1..5 {
                let same = k.exp();
                let z = same + 1.0;
                p *= if c[i] == c[i - 1] { same / z } else { 1.0 / z };
            }
            p
        };
        let cond = |end: usize| -> [f64; 2] {
            let mut m = [0.0; 2];
            for code in 0..32usize {
                let c = [code & 1, (code >> 1) & 1, (code >> 2) & 1, (code >> 3) & 1, (code >> 4) & 1];
                if c[0] == 0 && c[4] == end {
                    m[c[2]] += joint(c);
                }
            }
            let z = m[0] + m[1];
            [m[0] / z, m[1] / z]
        };
        let p = cond(0);
        let q = cond(1);
        let brute = (p[0] / q[0]).max(p[1] / q[1]);
        assert!((cert.ratio - brute).abs() < 1e-12, "{} vs {brute}", cert.ratio);
        assert!(cert.ratio > 1.0);
    }

    #[test]
    fn strip_ratio_within_measured_bound() {
        let spec = markov_spec(1.5);
        let m = measure_mixing_constants(&spec, 6, MixingBound::Strong).unwrap();
        assert!(m.g > 0.0 && m.c > 0.0);
        // Log-ratios decay with distance.
        assert!(m.log_ratios.windows(2).all(|w| w[1].1 >= w[0].1));
        let s = strip(6);
        let v = s[1..5].to_vec();
        let opts = MixingOptions {
            constants: Some((m.c, m.g)),
            ..Default::default()
        };
        for delta in [vec![s[2].clone()], vec![s[2].clone(), s[3].clone()], v.clone()] {
            for a in [vec![s[5].clone()], vec![s[0].clone(), s[5].clone()]] {
                for code in 0..16usize {
                    let (x0, x5, y0, y5) = (code & 1, (code >> 1) & 1, (code >> 2) & 1, (code >> 3) & 1);
                    let y0 = if a.len() == 1 { x0 } else { y0 };
                    let eta: BTreeMap<Site, usize> = [(s[0].clone(), x0), (s[5].clone(), x5)].into();
                    let eta2: BTreeMap<Site, usize> = [(s[0].clone(), y0), (s[5].clone(), y5)].into();
                    let cert = exact_conditional_ratio(&spec, &delta, &v, &a, &eta, &eta2, &opts).unwrap();
                    assert!(cert.passes, "{} > {}", cert.ratio, cert.bound);
                }
            }
        }
    }

    #[test]
    fn ratio_rejects_continuous_and_budget() {
        let spec = EnvironmentSpec::iid_continuous(2, 0.05, vec![1.0]);
        let s = strip(3);
        let r = exact_conditional_ratio(
            &spec,
            &[s[1].clone()],
            &[s[1].clone()],
            &[],
            &BTreeMap::new(),
            &BTreeMap::new(),
            &MixingOptions::default(),
        );
        assert!(matches!(r, Err(Error::Unsupported(_))));

        let spec = markov_spec(1.0);
        let v: Vec<Site> = lattice_range(&[0, 0], &[4, 4]).collect();
        let r = exact_conditional_ratio(
            &spec,
            &[Site::new(&[2, 2])],
            &v,
            &[],
            &BTreeMap::new(),
            &BTreeMap::new(),
            &MixingOptions {
                budget: 1000,
                ..Default::default()
            },
        );
        assert!(matches!(r, Err(Error::BudgetExceeded { .. })));
    }

    #[test]
    fn window_csv_roundtrip() {
        let spec = EnvironmentSpec::iid_continuous(2, 0.05, vec![1.0]).with_seed(8);
        let env = make_environment(&spec).unwrap();
        let w = WindowField::from_field(&env, lattice_range(&[0, 0], &[2, 3]));
        let mut buf = Vec::new();
        w.write_csv(&mut buf).unwrap();
        let back = WindowField::read_csv(buf.as_slice(), 0.05).unwrap();
        assert_eq!(w, back);
    }

    #[test]
    fn random_configuration_uses_alphabet() {
        let mut rng = stream(1, 1);
        let cfg = random_configuration(&strip(10), 3, &mut rng);
        assert!(cfg.values().all(|&s| s < 3));
    }
}
