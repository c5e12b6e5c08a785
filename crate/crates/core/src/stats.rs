//! Small statistics toolkit: moments, confidence intervals, two-sample and
//! normality tests, weighted least squares.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (0 for fewer than two samples).
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

/// Mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    (mean(xs), (variance(xs) / xs.len() as f64).sqrt())
}

pub fn covariance(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let (mx, my) = (mean(xs), mean(ys));
    xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / (n - 1) as f64
}

/// Sample covariance matrix of row vectors.
pub fn covariance_matrix(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = rows.first().map_or(0, |r| r.len());
    let cols: Vec<Vec<f64>> = (0..d).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
    let mut c = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in i..d {
            let v = covariance(&cols[i], &cols[j]);
            c[i][j] = v;
            c[j][i] = v;
        }
    }
    c
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues(m: &[Vec<f64>]) -> Vec<f64> {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m.to_vec();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Wilson score interval for a binomial proportion.
pub fn wilson(k: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = k as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub intercept_se: f64,
}

/// Weighted least squares `y ≈ a + b x` with weights `w` (inverse variances).
///
/// Standard errors are the model-based ones scaled by the residual
/// dispersion when there are more points than parameters; with exactly two
/// points they come from the weights alone.
pub fn wls(x: &[f64], y: &[f64], w: &[f64]) -> Result<LinearFit> {
    let n = x.len();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let sw: f64 = w.iter().sum();
    let sx: f64 = w.iter().zip(x).map(|(w, x)| w * x).sum();
    let sy: f64 = w.iter().zip(y).map(|(w, y)| w * y).sum();
    let sxx: f64 = w.iter().zip(x).map(|(w, x)| w * x * x).sum();
    let sxy: f64 = w.iter().zip(x).zip(y).map(|((w, x), y)| w * x * y).sum();
    let det = sw * sxx - sx * sx;
    if !(det.abs() > 1e-300) {
        return Err(Error::Precondition("degenerate regressor".into()));
    }
    let slope = (sw * sxy - sx * sy) / det;
    let intercept = (sy - slope * sx) / sw;
    let scale = if n > 2 {
        let chi2: f64 = (0..n)
            .map(|i| w[i] * (y[i] - intercept - slope * x[i]).powi(2))
            .sum();
        (chi2 / (n - 2) as f64).max(1.0)
    } else {
        1.0
    };
    Ok(LinearFit {
        slope,
        intercept,
        slope_se: (scale * sw / det).sqrt(),
        intercept_se: (scale * sxx / det).sqrt(),
    })
}

/// Ordinary least squares with residual-based standard errors.
pub fn ols(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    let n = x.len();
    if n < 3 {
        return Err(Error::InsufficientData { needed: 3, got: n });
    }
    let mx = mean(x);
    let my = mean(y);
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Precondition("degenerate regressor".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let s2 = rss / (n - 2) as f64;
    Ok(LinearFit {
        slope,
        intercept,
        slope_se: (s2 / sxx).sqrt(),
        intercept_se: (s2 * (1.0 / n as f64 + mx * mx / sxx)).sqrt(),
    })
}

/// Slope of a binomial logit model `logit p = a + b x` from its profile
/// likelihood, with the interval where the deviance from the maximum stays
/// below `z²`. Bounds are clamped to `±limit`; `separated` marks a maximum
/// on the clamp (a cell without failures beyond the last one with some).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileSlope {
    pub slope: f64,
    pub lower: f64,
    pub upper: f64,
    pub z: f64,
    pub separated: bool,
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn logit_loglik(x: &[f64], k: &[u64], n: &[u64], a: f64, b: f64) -> f64 {
    (0..x.len())
        .map(|i| {
            let eta = a + b * x[i];
            k[i] as f64 * eta - n[i] as f64 * softplus(eta)
        })
        .sum()
}

fn profile_loglik(x: &[f64], k: &[u64], n: &[u64], b: f64) -> f64 {
    // The score in `a` is decreasing; bisect for its root.
    let score = |a: f64| -> f64 {
        (0..x.len())
            .map(|i| k[i] as f64 - n[i] as f64 / (1.0 + (-(a + b * x[i])).exp()))
            .sum()
    };
    let (mut lo, mut hi) = (-1.0, 1.0);
    while score(lo) < 0.0 {
        lo *= 2.0;
    }
    while score(hi) > 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if score(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    logit_loglik(x, k, n, 0.5 * (lo + hi), b)
}

pub fn binomial_logit_profile(x: &[f64], k: &[u64], n: &[u64], z: f64, limit: f64) -> Result<ProfileSlope> {
    if x.len() < 2 || k.len() != x.len() || n.len() != x.len() {
        return Err(Error::InsufficientData { needed: 2, got: x.len() });
    }
    let (sk, sn): (u64, u64) = (k.iter().sum(), n.iter().sum());
    if sk == 0 || sk == sn || k.iter().zip(n).any(|(k, n)| k > n) {
        return Err(Error::Precondition("profile slope needs both outcomes observed".into()));
    }
    let prof = |b: f64| profile_loglik(x, k, n, b);
    // Golden-section search; the profile of a concave likelihood is concave.
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut lo, mut hi) = (-limit, limit);
    let (mut c, mut d) = (hi - g * (hi - lo), lo + g * (hi - lo));
    let (mut fc, mut fd) = (prof(c), prof(d));
    for _ in 0..200 {
        if fc >= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - g * (hi - lo);
            fc = prof(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (hi - lo);
            fd = prof(d);
        }
    }
    let mut slope = 0.5 * (lo + hi);
    let mut best = prof(slope);
    for edge in [-limit, limit] {
        let f = prof(edge);
        if f > best {
            best = f;
            slope = edge;
        }
    }
    let cut = best - 0.5 * z * z;
    let bound = |toward: f64| -> f64 {
        if prof(toward) >= cut {
            return toward;
        }
        let (mut inside, mut outside) = (slope, toward);
        for _ in 0..200 {
            let mid = 0.5 * (inside + outside);
            if prof(mid) >= cut {
                inside = mid;
            } else {
                outside = mid;
            }
        }
        0.5 * (inside + outside)
    };
    Ok(ProfileSlope {
        slope,
        lower: bound(-limit),
        upper: bound(limit),
        z,
        separated: (slope.abs() - limit).abs() < 1e-9 * limit,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Kolmogorov survival function `Q(λ) = 2 Σ (−1)^{j−1} e^{−2j²λ²}`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=200 {
        let term = (-2.0 * (j * j) as f64 * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-17 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov–Smirnov test with the asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<TestResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientData {
            needed: 1,
            got: a.len().min(b.len()),
        });
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let t = a[i].min(b[j]);
        while i < a.len() && a[i] <= t {
            i += 1;
        }
        while j < b.len() && b[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let ne = (na * nb / (na + nb)).sqrt();
    let p = kolmogorov_q((ne + 0.12 + 0.11 / ne) * d);
    Ok(TestResult { statistic: d, p_value: p })
}

/// Anderson–Darling normality test with mean and variance estimated from the
/// sample; returns the small-sample-corrected `A²*` and its p-value.
pub fn anderson_darling_normal(xs: &[f64]) -> Result<TestResult> {
    let n = xs.len();
    if n < 8 {
        return Err(Error::InsufficientData { needed: 8, got: n });
    }
    let (m, s) = (mean(xs), variance(xs).sqrt());
    if !(s > 0.0) {
        return Err(Error::Precondition("zero variance sample".into()));
    }
    let mut z: Vec<f64> = xs.iter().map(|x| (x - m) / s).collect();
    z.sort_by(f64::total_cmp);
    let norm = Normal::standard();
    let nf = n as f64;
    let mut acc = 0.0;
    for i in 0..n {
        let lo = norm.cdf(z[i]).clamp(1e-300, 1.0 - 1e-16);
        let hi = norm.sf(z[n - 1 - i]).clamp(1e-300, 1.0);
        acc += (2 * i + 1) as f64 * (lo.ln() + hi.ln());
    }
    let a2 = -nf - acc / nf;
    let a = a2 * (1.0 + 0.75 / nf + 2.25 / (nf * nf));
    let p = if a >= 0.6 {
        (1.2937 - 5.709 * a + 0.0186 * a * a).exp()
    } else if a >= 0.34 {
        (0.9177 - 4.279 * a - 1.38 * a * a).exp()
    } else if a >= 0.2 {
        1.0 - (-8.318 + 42.796 * a - 59.938 * a * a).exp()
    } else {
        1.0 - (-13.436 + 101.14 * a - 223.73 * a * a).exp()
    };
    Ok(TestResult {
        statistic: a,
        p_value: p.clamp(0.0, 1.0),
    })
}

/// Chi-square test of homogeneity for two count vectors over the same bins.
/// Bins empty in both samples are dropped.
pub fn chi_square_two_sample(a: &[u64], b: &[u64]) -> Result<TestResult> {
    let (na, nb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let (k1, k2) = ((nb / na).sqrt(), (na / nb).sqrt());
    let mut stat = 0.0;
    let mut bins = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        if x + y == 0 {
            continue;
        }
        let diff = k1 * x as f64 - k2 * y as f64;
        stat += diff * diff / (x + y) as f64;
        bins += 1;
    }
    if bins < 2 {
        return Ok(TestResult {
            statistic: stat,
            p_value: 1.0,
        });
    }
    let dist = ChiSquared::new((bins - 1) as f64).map_err(|e| Error::Precondition(e.to_string()))?;
    Ok(TestResult {
        statistic: stat,
        p_value: dist.sf(stat),
    })
}

/// Ranks (average for ties), 1-based.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Lag-1 autocorrelation of the ranks, with a two-sided normal p-value
/// (null standard error `1/√n`).
pub fn lag1_rank_autocorrelation(xs: &[f64]) -> Result<TestResult> {
    let n = xs.len();
    if n < 10 {
        return Err(Error::InsufficientData { needed: 10, got: n });
    }
    let r = ranks(xs);
    let m = mean(&r);
    let den: f64 = r.iter().map(|v| (v - m).powi(2)).sum();
    if den == 0.0 {
        return Ok(TestResult {
            statistic: 0.0,
            p_value: 1.0,
        });
    }
    let num: f64 = r.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
    let rho = num / den;
    let z = rho * (n as f64).sqrt();
    let p = 2.0 * Normal::standard().sf(z.abs());
    Ok(TestResult {
        statistic: rho,
        p_value: p.min(1.0),
    })
}

/// Quantile by linear interpolation on a sorted copy.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn profile_slope_two_points() {
        let r = binomial_logit_profile(&[0.0, 1.0], &[20, 50], &[100, 100], 2.0, 20.0).unwrap();
        let want = 0.0 - (0.2f64 / 0.8).ln();
        assert!((r.slope - want).abs() < 1e-6, "{r:?}");
        let wald = (1.0 / 16.0 + 1.0 / 25.0f64).sqrt();
        assert!((r.upper - r.slope - 2.0 * wald).abs() < 0.1, "{r:?}");
        assert!((r.slope - r.lower - 2.0 * wald).abs() < 0.1, "{r:?}");
        assert!(!r.separated);
    }

    #[test]
    fn profile_slope_separation() {
        let r = binomial_logit_profile(&[6.0, 10.0, 14.0], &[3, 0, 0], &[10_000; 3], 2.0, 20.0).unwrap();
        assert!(r.separated && r.slope == -20.0 && r.lower == -20.0);
        assert!(r.upper < 0.0, "{r:?}");
        assert!(binomial_logit_profile(&[1.0, 2.0], &[0, 0], &[5, 5], 2.0, 20.0).is_err());
    }

    #[test]
    fn moments() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mean(&xs), 2.5);
        assert!((variance(&xs) - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn wilson_contains_proportion() {
        let (lo, hi) = wilson(30, 100, 1.96);
        assert!(lo < 0.3 && hi > 0.3);
        let (lo, hi) = wilson(0, 100, 1.96);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0 && hi < 0.05);
    }

    #[test]
    fn wls_recovers_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        let f = wls(&x, &y, &[1.0; 4]).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-12);
        assert!((f.intercept - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ks_same_and_shifted() {
        let mut r = stream(1, 0);
        let a: Vec<f64> = (0..2000).map(|_| r.random::<f64>()).collect();
        let b: Vec<f64> = (0..2000).map(|_| r.random::<f64>()).collect();
        let c: Vec<f64> = b.iter().map(|x| x + 0.2).collect();
        assert!(ks_two_sample(&a, &b).unwrap().p_value > 0.01);
        assert!(ks_two_sample(&a, &c).unwrap().p_value < 1e-6);
    }

    #[test]
    fn anderson_darling_normal_vs_uniform() {
        let mut r = stream(2, 0);
        let z: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut r)).collect();
        let u: Vec<f64> = (0..1000).map(|_| r.random::<f64>()).collect();
        assert!(anderson_darling_normal(&z).unwrap().p_value > 0.01);
        assert!(anderson_darling_normal(&u).unwrap().p_value < 1e-3);
    }

    #[test]
    fn chi_square_detects_difference() {
        assert!(chi_square_two_sample(&[100, 100, 100], &[98, 103, 99]).unwrap().p_value > 0.5);
        assert!(chi_square_two_sample(&[100, 100, 100], &[200, 50, 50]).unwrap().p_value < 1e-6);
    }

    #[test]
    fn rank_autocorrelation_flags_ar1() {
        let mut r = stream(3, 0);
        let iid: Vec<f64> = (0..2000).map(|_| r.random::<f64>()).collect();
        let mut ar = vec![0.0f64];
        for _ in 1..2000 {
            let e: f64 = StandardNormal.sample(&mut r);
            ar.push(0.9 * ar.last().unwrap() + e);
        }
        assert!(lag1_rank_autocorrelation(&iid).unwrap().p_value > 0.001);
        assert!(lag1_rank_autocorrelation(&ar).unwrap().p_value < 1e-10);
    }

    #[test]
    fn eigenvalues_of_known_matrix() {
        let ev = symmetric_eigenvalues(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
        assert!((ev[0] - 1.0).abs() < 1e-12 && (ev[1] - 3.0).abs() < 1e-12);
    }
}
