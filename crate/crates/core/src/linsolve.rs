//! Sparse solves for walks killed on leaving a finite site set.
//!
//! The system matrix `A = I − P_VV` is a nonsingular M-matrix whenever the
//! walk is elliptic and `V` is finite. Sites are ordered lexicographically
//! with the widest axis slowest, which keeps the band narrow; a banded LU
//! without pivoting is used when affordable and Gauss–Seidel otherwise.

use std::collections::HashMap;

use crate::environment::Field;
use crate::error::{Error, Result};
use crate::lattice::Site;

pub const RESIDUAL_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct SolveOptions {
    /// Always solve directly at or below this many unknowns.
    pub direct_limit: usize,
    /// Above `direct_limit`, still solve directly when `n·b²` stays below this.
    pub band_work_limit: f64,
    /// Hard cap on unknowns.
    pub max_unknowns: usize,
    pub max_sweeps: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            direct_limit: 10_000,
            band_work_limit: 2e9,
            max_unknowns: 400_000,
            max_sweeps: 200_000,
        }
    }
}

/// Walk on `V`, killed on exit, with its exit transitions.
pub struct KilledChain {
    sites: Vec<Site>,
    index: HashMap<Site, usize>,
    /// Transitions staying in `V`: (target index, probability).
    inner: Vec<Vec<(usize, f64)>>,
    /// Transitions leaving `V`: (exit site, probability).
    exits: Vec<Vec<(Site, f64)>>,
}

impl KilledChain {
    pub fn new<F: Field + ?Sized>(field: &F, v_set: &[Site], opts: &SolveOptions) -> Result<Self> {
        if v_set.is_empty() {
            return Err(Error::Precondition("empty site set".into()));
        }
        if v_set.len() > opts.max_unknowns {
            return Err(Error::BudgetExceeded {
                what: "absorbing solve".into(),
                size: v_set.len() as u128,
                budget: opts.max_unknowns as u128,
            });
        }
        let d = v_set[0].dim();
        let mut lo = v_set[0].coords().to_vec();
        let mut hi = lo.clone();
        for s in v_set {
            for i in 0..d {
                lo[i] = lo[i].min(s.coords()[i]);
                hi[i] = hi[i].max(s.coords()[i]);
            }
        }
        let mut axes: Vec<usize> = (0..d).collect();
        axes.sort_by_key(|&i| std::cmp::Reverse(hi[i] - lo[i]));
        let mut sites = v_set.to_vec();
        sites.sort_by(|a, b| {
            axes.iter()
                .map(|&i| a.coords()[i].cmp(&b.coords()[i]))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        sites.dedup();
        let index: HashMap<Site, usize> =
            sites.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let mut inner = Vec::with_capacity(sites.len());
        let mut exits = Vec::with_capacity(sites.len());
        for x in &sites {
            if !field.covers(x) {
                return Err(Error::Precondition(format!(
                    "environment not realized at {x}"
                )));
            }
            let tv = field.transition(x);
            let mut row = Vec::new();
            let mut out = Vec::new();
            for (k, &p) in tv.probs.iter().enumerate() {
                let y = x.step(k);
                match index.get(&y) {
                    Some(&j) => row.push((j, p)),
                    None => out.push((y, p)),
                }
            }
            inner.push(row);
            exits.push(out);
        }
        Ok(KilledChain {
            sites,
            index,
            inner,
            exits,
        })
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn index_of(&self, x: &Site) -> Option<usize> {
        self.index.get(x).copied()
    }

    pub fn exits(&self, i: usize) -> &[(Site, f64)] {
        &self.exits[i]
    }

    pub fn inner(&self, i: usize) -> &[(usize, f64)] {
        &self.inner[i]
    }

    /// `b_i = Σ_{z∉V, target(z)} P(x_i, z)`.
    pub fn exit_rhs(&self, target: impl Fn(&Site) -> bool) -> Vec<f64> {
        self.exits
            .iter()
            .map(|out| out.iter().filter(|(z, _)| target(z)).map(|(_, p)| p).sum())
            .collect()
    }

    fn matvec(&self, x: &[f64], transpose: bool) -> Vec<f64> {
        let mut y = x.to_vec();
        for (i, row) in self.inner.iter().enumerate() {
            for &(j, p) in row {
                if transpose {
                    y[j] -= p * x[i];
                } else {
                    y[i] -= p * x[j];
                }
            }
        }
        y
    }

    /// `max |A x − b|`.
    pub fn residual(&self, x: &[f64], b: &[f64], transpose: bool) -> f64 {
        self.matvec(x, transpose)
            .iter()
            .zip(b)
            .map(|(a, c)| (a - c).abs())
            .fold(0.0, f64::max)
    }

    fn bandwidth(&self) -> usize {
        self.inner
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |&(j, _)| i.abs_diff(j)))
            .max()
            .unwrap_or(0)
    }

    /// Solves `A x = b` (or `Aᵀ x = b`).
    pub fn solve(&self, b: &[f64], transpose: bool, opts: &SolveOptions) -> Result<Vec<f64>> {
        let n = self.len();
        let bw = self.bandwidth();
        let work = n as f64 * (bw as f64) * (bw as f64);
        let x = if n <= opts.direct_limit || work <= opts.band_work_limit {
            let lu = BandLu::factor(self, bw, transpose)?;
            let mut x = lu.solve(b);
            // One round of iterative refinement.
            let r: Vec<f64> = self
                .matvec(&x, transpose)
                .iter()
                .zip(b)
                .map(|(a, c)| c - a)
                .collect();
            let dx = lu.solve(&r);
            x.iter_mut().zip(&dx).for_each(|(a, d)| *a += d);
            x
        } else {
            self.gauss_seidel(b, transpose, opts)?
        };
        let res = self.residual(&x, b, transpose);
        if !(res <= RESIDUAL_TOL) {
            return Err(Error::Solve(format!("residual {res:e} above {RESIDUAL_TOL:e}")));
        }
        Ok(x)
    }

    fn gauss_seidel(&self, b: &[f64], transpose: bool, opts: &SolveOptions) -> Result<Vec<f64>> {
        let n = self.len();
        // Row-wise access to the (possibly transposed) off-diagonal part.
        let rows: Vec<Vec<(usize, f64)>> = if transpose {
            let mut t = vec![Vec::new(); n];
            for (i, row) in self.inner.iter().enumerate() {
                for &(j, p) in row {
                    t[j].push((i, p));
                }
            }
            t
        } else {
            self.inner.clone()
        };
        let mut x = b.to_vec();
        for sweep in 0..opts.max_sweeps {
            let mut delta: f64 = 0.0;
            for i in 0..n {
                let mut diag = 1.0;
                let mut acc = b[i];
                for &(j, p) in &rows[i] {
                    if j == i {
                        diag -= p;
                    } else {
                        acc += p * x[j];
                    }
                }
                let v = acc / diag;
                delta = delta.max((v - x[i]).abs());
                x[i] = v;
            }
            if sweep % 16 == 15 && delta < 1e-14 && self.residual(&x, b, transpose) <= RESIDUAL_TOL {
                return Ok(x);
            }
        }
        Err(Error::Solve(format!(
            "Gauss-Seidel did not converge in {} sweeps",
            opts.max_sweeps
        )))
    }
}

/// Banded LU of `I − P` without pivoting (diagonally dominant M-matrix).
struct BandLu {
    n: usize,
    bw: usize,
    /// Row-major band: entry (i, j) at `i * (2bw+1) + (j + bw - i)`.
    a: Vec<f64>,
}

impl BandLu {
    fn factor(chain: &KilledChain, bw: usize, transpose: bool) -> Result<Self> {
        let n = chain.len();
        let w = 2 * bw + 1;
        let mut a = vec![0.0; n * w];
        for i in 0..n {
            a[i * w + bw] = 1.0;
        }
        for (i, row) in chain.inner.iter().enumerate() {
            for &(j, p) in row {
                let (r, c) = if transpose { (j, i) } else { (i, j) };
                a[r * w + (c + bw - r)] -= p;
            }
        }
        for k in 0..n {
            let pivot = a[k * w + bw];
            if !(pivot.abs() > 1e-300) {
                return Err(Error::Solve(format!("zero pivot at {k}")));
            }
            let end = (k + bw).min(n - 1);
            for i in k + 1..=end {
                let ik = i * w + (k + bw - i);
                let l = a[ik] / pivot;
                if l == 0.0 {
                    continue;
                }
                a[ik] = l;
                for j in k + 1..=end {
                    let kj = a[k * w + (j + bw - k)];
                    if kj != 0.0 {
                        a[i * w + (j + bw - i)] -= l * kj;
                    }
                }
            }
        }
        Ok(BandLu { n, bw, a })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, bw) = (self.n, self.bw);
        let w = 2 * bw + 1;
        let mut y = b.to_vec();
        for i in 0..n {
            let start = i.saturating_sub(bw);
            let mut s = y[i];
            for j in start..i {
                s -= self.a[i * w + (j + bw - i)] * y[j];
            }
            y[i] = s;
        }
        for i in (0..n).rev() {
            let end = (i + bw).min(n - 1);
            let mut s = y[i];
            for j in i + 1..=end {
                s -= self.a[i * w + (j + bw - i)] * y[j];
            }
            y[i] = s / self.a[i * w + bw];
        }
        y
    }
}
