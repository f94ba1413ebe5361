//! Small statistical toolkit: KS and χ² tests, least-squares slopes.

use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{invalid, Result};

/// sup_x |F_n(x) - F(x)| for the empirical CDF of `samples`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    d
}

/// Asymptotic Kolmogorov tail P(D_n > d) with the Stephens correction.
pub fn kolmogorov_pvalue(d: f64, n_eff: f64) -> f64 {
    let s = n_eff.sqrt();
    let lambda = (s + 0.12 + 0.11 / s) * d;
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (if k as i64 % 2 == 1 { 1.0 } else { -1.0 }) * (-2.0 * k * k * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// One-sample KS test: (D, p).
pub fn ks_test(samples: &[f64], cdf: impl Fn(f64) -> f64) -> (f64, f64) {
    let d = ks_statistic(samples, cdf);
    (d, kolmogorov_pvalue(d, samples.len() as f64))
}

/// Two-sample KS test: (D, p).
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len(), y.len());
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0f64;
    while i < n && j < m {
        let t = x[i].min(y[j]);
        while i < n && x[i] <= t {
            i += 1;
        }
        while j < m && y[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    (d, kolmogorov_pvalue(d, ne))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson goodness of fit of `counts` against cell probabilities `probs`.
pub fn chi_square(counts: &[u64], probs: &[f64]) -> Result<ChiSquare> {
    if counts.len() != probs.len() || counts.len() < 2 {
        return Err(invalid("counts", "need at least two cells matching the probabilities"));
    }
    let total: u64 = counts.iter().sum();
    let psum: f64 = probs.iter().sum();
    let mut stat = 0.0;
    for (&c, &p) in counts.iter().zip(probs) {
        let e = total as f64 * p / psum;
        if e <= 0.0 {
            return Err(invalid("probs", "every cell needs positive probability"));
        }
        stat += (c as f64 - e).powi(2) / e;
    }
    let dof = counts.len() - 1;
    let p_value = 1.0 - ChiSquared::new(dof as f64).map_err(|e| invalid("dof", e.to_string()))?.cdf(stat);
    Ok(ChiSquare {
        statistic: stat,
        dof,
        p_value,
    })
}

/// Sample mean and its standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, f64::NAN);
    }
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let (m, _) = mean_se(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
}

/// Ordinary least squares y = a + b x.
pub fn fit_line(x: &[f64], y: &[f64]) -> Result<LineFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(invalid("fit", "need at least two points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(invalid("fit", "abscissae coincide"));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_se = if x.len() > 2 {
        let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
        (rss / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(LineFit { slope, intercept, slope_se })
}

/// Slope of ln y against ln x.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Result<LineFit> {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    fit_line(&lx, &ly)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand::Rng;

    #[test]
    fn ks_accepts_uniform_and_rejects_shift() {
        let mut rng = stream_rng(1, 0);
        let xs: Vec<f64> = (0..5000).map(|_| rng.random::<f64>()).collect();
        let (_, p) = ks_test(&xs, |x| x.clamp(0.0, 1.0));
        assert!(p > 0.01);
        let (_, p) = ks_test(&xs, |x| (x - 0.05).clamp(0.0, 1.0));
        assert!(p < 1e-6);
        let ys: Vec<f64> = (0..3000).map(|_| rng.random::<f64>()).collect();
        assert!(ks_two_sample(&xs, &ys).1 > 0.01);
    }

    #[test]
    fn ks_statistic_of_a_single_point() {
        // F_n jumps 0 → 1 at 0.3 against the uniform CDF
        assert!((ks_statistic(&[0.3], |x| x) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn chi_square_of_exact_counts_is_zero() {
        let r = chi_square(&[25, 25, 50], &[0.25, 0.25, 0.5]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.dof, 2);
        assert!((r.p_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn line_fit_recovers_slope() {
        let x = [100.0, 200.0, 400.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 / v).collect();
        let f = log_log_slope(&x, &y).unwrap();
        assert!((f.slope + 1.0).abs() < 1e-12);
    }
}
