//! Exact small-instance computations: absorbing-chain solves, path
//! enumeration and annealed enumeration over finite alphabets.

use std::collections::BTreeMap;
use std::io::Write;

use crate::environment::{EnvKind, EnvironmentSpec, Field, TransitionVector, WindowField};
use crate::error::{Error, Result};
use crate::lattice::Site;
use crate::linsolve::{KilledChain, SolveOptions};

#[derive(Clone, Debug)]
pub struct OracleBudget {
    pub solve: SolveOptions,
    /// Maximum number of enumerated paths, `(2d)^n`.
    pub paths: u128,
    /// Maximum number of enumerated environments, `|A|^|V|`.
    pub environments: u128,
    /// Maximum `|V|` for the occupation identity (one auxiliary solve per site).
    pub occupation_sites: usize,
}

impl Default for OracleBudget {
    fn default() -> Self {
        OracleBudget {
            solve: SolveOptions::default(),
            paths: 4u128.pow(8),
            environments: 1_000_000,
            occupation_sites: 4096,
        }
    }
}

/// Green's function, exit law and mean exit time from one start.
#[derive(Clone, Debug)]
pub struct AbsorbingSolve {
    pub v_set: Vec<Site>,
    pub start: Site,
    pub exit_law: BTreeMap<Site, f64>,
    pub expected_exit_time: f64,
    pub green: BTreeMap<Site, f64>,
    pub residual: f64,
}

impl AbsorbingSolve {
    /// Total exit mass on sites satisfying `pred`.
    pub fn exit_mass(&self, pred: impl Fn(&Site) -> bool) -> f64 {
        self.exit_law.iter().filter(|(z, _)| pred(z)).map(|(_, p)| p).sum()
    }

    /// Two CSV blocks: `kind,site...,value` with kind `exit` or `green`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let d = self.start.dim();
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["kind".to_string()];
        header.extend((1..=d).map(|i| format!("x{i}")));
        header.push("value".into());
        wr.write_record(&header)?;
        let rows = self
            .exit_law
            .iter()
            .map(|r| ("exit", r))
            .chain(self.green.iter().map(|r| ("green", r)));
        for (kind, (s, v)) in rows {
            let mut rec = vec![kind.to_string()];
            rec.extend(s.coords().iter().map(|c| c.to_string()));
            rec.push(format!("{v:?}"));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Solves the walk started at `start` and killed on leaving `v_set`.
pub fn solve_absorbing<F: Field + ?Sized>(
    field: &F,
    v_set: &[Site],
    start: &Site,
    opts: &SolveOptions,
) -> Result<AbsorbingSolve> {
    let chain = KilledChain::new(field, v_set, opts)?;
    let s = chain
        .index_of(start)
        .ok_or_else(|| Error::Precondition(format!("start {start} not in V")))?;
    let kappa = field.kappa();
    for x in chain.sites() {
        field.transition(x).validate(kappa).map_err(|e| match e {
            Error::Ellipticity { reason, .. } => Error::Ellipticity {
                site: x.to_string(),
                reason,
            },
            e => e,
        })?;
    }
    // Row `s` of G = (I − P)^{-1}: solve (I − P)ᵀ g = e_s.
    let mut e = vec![0.0; chain.len()];
    e[s] = 1.0;
    let g = chain.solve(&e, true, opts)?;
    let residual = chain.residual(&g, &e, true);
    let mut exit_law = BTreeMap::new();
    for (i, gi) in g.iter().enumerate() {
        for (z, p) in chain.exits(i) {
            *exit_law.entry(z.clone()).or_insert(0.0) += gi * p;
        }
    }
    let green: BTreeMap<Site, f64> = chain
        .sites()
        .iter()
        .cloned()
        .zip(g.iter().copied())
        .collect();
    let expected_exit_time = g.iter().sum();
    Ok(AbsorbingSolve {
        v_set: chain.sites().to_vec(),
        start: start.clone(),
        exit_law,
        expected_exit_time,
        green,
        residual,
    })
}

/// `h(x) = P_x[X_T ∈ target]` for every `x ∈ V`.
pub fn exit_probabilities<F: Field + ?Sized>(
    field: &F,
    v_set: &[Site],
    target: impl Fn(&Site) -> bool,
    opts: &SolveOptions,
) -> Result<BTreeMap<Site, f64>> {
    let chain = KilledChain::new(field, v_set, opts)?;
    let b = chain.exit_rhs(target);
    let h = chain.solve(&b, false, opts)?;
    Ok(chain.sites().iter().cloned().zip(h).collect())
}

/// `E_x[T]` for every `x ∈ V`.
pub fn expected_exit_times<F: Field + ?Sized>(
    field: &F,
    v_set: &[Site],
    opts: &SolveOptions,
) -> Result<BTreeMap<Site, f64>> {
    let chain = KilledChain::new(field, v_set, opts)?;
    let t = chain.solve(&vec![1.0; chain.len()], false, opts)?;
    Ok(chain.sites().iter().cloned().zip(t).collect())
}

#[derive(Clone, Debug)]
pub struct OccupationTerm {
    pub site: Site,
    /// `P_start[H_x < T]`.
    pub hit: f64,
    /// `P_x[H̃_x > T]`.
    pub escape: f64,
}

#[derive(Clone, Debug)]
pub struct OccupationCheck {
    pub via_identity: f64,
    pub green_sum: f64,
    pub terms: Vec<OccupationTerm>,
}

impl OccupationCheck {
    pub fn discrepancy(&self) -> f64 {
        (self.via_identity - self.green_sum).abs()
    }
}

/// Mean exit time two ways: `Σ_x P[H_x<T] / P_x[H̃_x>T]` from one auxiliary
/// solve per site, and the Green's-function sum.
pub fn occupation_identity<F: Field + ?Sized>(
    field: &F,
    v_set: &[Site],
    start: &Site,
    budget: &OracleBudget,
) -> Result<OccupationCheck> {
    if v_set.len() > budget.occupation_sites {
        return Err(Error::BudgetExceeded {
            what: "occupation identity".into(),
            size: v_set.len() as u128,
            budget: budget.occupation_sites as u128,
        });
    }
    let direct = solve_absorbing(field, v_set, start, &budget.solve)?;
    let mut terms = Vec::with_capacity(direct.v_set.len());
    for x in &direct.v_set {
        let rest: Vec<Site> = direct.v_set.iter().filter(|y| *y != x).cloned().collect();
        // Probability of reaching x before leaving V, from every other site.
        let to_x = if rest.is_empty() {
            BTreeMap::new()
        } else {
            exit_probabilities(field, &rest, |z| z == x, &budget.solve)?
        };
        let hit = if x == start { 1.0 } else { to_x[start] };
        let tv = field.transition(x);
        let ret: f64 = (0..tv.probs.len())
            .map(|k| tv.probs[k] * to_x.get(&x.step(k)).copied().unwrap_or(0.0))
            .sum();
        terms.push(OccupationTerm {
            site: x.clone(),
            hit,
            escape: 1.0 - ret,
        });
    }
    let via_identity = terms.iter().map(|t| t.hit / t.escape).sum();
    Ok(OccupationCheck {
        via_identity,
        green_sum: direct.expected_exit_time,
        terms,
    })
}

/// One length-`n` path as its step indices, with its probability.
#[derive(Clone, Debug, PartialEq)]
pub struct PathProb {
    pub steps: Vec<u8>,
    pub prob: f64,
}

impl PathProb {
    pub fn endpoint(&self, start: &Site) -> Site {
        let mut x = start.clone();
        for &k in &self.steps {
            x.step_mut(k as usize);
        }
        x
    }
}

/// Exact law of the first `n_steps` steps under `P_{start,ω}`, in
/// lexicographic order of step sequences.
pub fn enumerate_paths<F: Field + ?Sized>(
    field: &F,
    start: &Site,
    n_steps: usize,
    budget: &OracleBudget,
) -> Result<Vec<PathProb>> {
    let k = 2 * field.dim();
    let count = (k as u128).checked_pow(n_steps as u32).unwrap_or(u128::MAX);
    if count > budget.paths {
        return Err(Error::BudgetExceeded {
            what: "path enumeration".into(),
            size: count,
            budget: budget.paths,
        });
    }
    let mut out = vec![PathProb {
        steps: Vec::new(),
        prob: 1.0,
    }];
    let mut ends = vec![start.clone()];
    for _ in 0..n_steps {
        let mut next = Vec::with_capacity(out.len() * k);
        let mut next_ends = Vec::with_capacity(out.len() * k);
        for (p, x) in out.iter().zip(&ends) {
            if !field.covers(x) {
                return Err(Error::Precondition(format!("environment not realized at {x}")));
            }
            let tv = field.transition(x);
            for (j, &q) in tv.probs.iter().enumerate() {
                let mut steps = p.steps.clone();
                steps.push(j as u8);
                next.push(PathProb {
                    steps,
                    prob: p.prob * q,
                });
                next_ends.push(x.step(j));
            }
        }
        out = next;
        ends = next_ends;
    }
    Ok(out)
}

/// Visits every environment on `v_set` drawn from an i.i.d. finite alphabet,
/// with its probability. Sites outside `v_set` are not realized.
pub fn for_each_environment(
    spec: &EnvironmentSpec,
    v_set: &[Site],
    budget: &OracleBudget,
    mut visit: impl FnMut(&WindowField, f64) -> Result<()>,
) -> Result<()> {
    if !matches!(spec.kind, EnvKind::Homogeneous | EnvKind::IidFiniteAlphabet) {
        return Err(Error::Unsupported(
            "annealed enumeration needs an i.i.d. finite alphabet".into(),
        ));
    }
    spec.validate()?;
    let letters: Vec<TransitionVector> = spec.letters()?;
    let weights = spec.letter_weights()?;
    let a = letters.len() as u128;
    let count = a.checked_pow(v_set.len() as u32).unwrap_or(u128::MAX);
    if count > budget.environments {
        return Err(Error::BudgetExceeded {
            what: "annealed enumeration".into(),
            size: count,
            budget: budget.environments,
        });
    }
    let mut idx = vec![0usize; v_set.len()];
    loop {
        let mut w = WindowField::new(spec.dim, spec.kappa);
        let mut weight = 1.0;
        for (s, &i) in v_set.iter().zip(&idx) {
            w.insert(s.clone(), letters[i].clone());
            weight *= weights[i];
        }
        visit(&w, weight)?;
        // Odometer increment.
        let mut pos = 0;
        loop {
            if pos == idx.len() {
                return Ok(());
            }
            idx[pos] += 1;
            if idx[pos] < letters.len() {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

/// Annealed average `E[f(ω)]` of a vector-valued quenched functional of the
/// absorbing solve from `start`.
pub fn enumerate_annealed(
    spec: &EnvironmentSpec,
    v_set: &[Site],
    start: &Site,
    budget: &OracleBudget,
    functional: impl Fn(&WindowField, &AbsorbingSolve) -> Vec<f64>,
) -> Result<Vec<f64>> {
    let mut acc: Vec<f64> = Vec::new();
    for_each_environment(spec, v_set, budget, |w, weight| {
        let sol = solve_absorbing(w, v_set, start, &budget.solve)?;
        let val = functional(w, &sol);
        if acc.is_empty() {
            acc = vec![0.0; val.len()];
        }
        if val.len() != acc.len() {
            return Err(Error::Precondition("functional length changed".into()));
        }
        acc.iter_mut().zip(&val).for_each(|(a, v)| *a += weight * v);
        Ok(())
    })?;
    Ok(acc)
}

/// Annealed exit law `P_start[X_T = z]`.
pub fn annealed_exit_law(
    spec: &EnvironmentSpec,
    v_set: &[Site],
    start: &Site,
    budget: &OracleBudget,
) -> Result<BTreeMap<Site, f64>> {
    let mut acc = BTreeMap::new();
    for_each_environment(spec, v_set, budget, |w, weight| {
        let sol = solve_absorbing(w, v_set, start, &budget.solve)?;
        for (z, p) in sol.exit_law {
            *acc.entry(z).or_insert(0.0) += weight * p;
        }
        Ok(())
    })?;
    Ok(acc)
}

/// Outer boundary `∂V`: sites outside `V` adjacent to it.
pub fn outer_boundary(v_set: &[Site]) -> Vec<Site> {
    let inside: std::collections::BTreeSet<&Site> = v_set.iter().collect();
    let mut out: Vec<Site> = v_set
        .iter()
        .flat_map(|x| x.neighbors().collect::<Vec<_>>())
        .filter(|y| !inside.contains(y))
        .collect();
    out.sort();
    out.dedup();
    out
}
