//! Correlation with t-approximation p-values, and descriptive summaries.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pearson,
    Spearman,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub method: Method,
    pub n: usize,
    /// `None` when either sample has zero variance.
    pub r: Option<f64>,
    /// Two-tailed, from Student's t with n − 2 degrees of freedom.
    pub p_value: Option<f64>,
    pub flag: Option<String>,
}

/// Ranks starting at 1, ties sharing the mean of their positions.
pub fn mid_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson's r, or `None` for a zero-variance sample.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Two-tailed p-value of a correlation coefficient under H0: ρ = 0.
pub fn t_p_value(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

fn coefficient(x: &[f64], y: &[f64], method: Method) -> Option<f64> {
    match method {
        Method::Pearson => pearson(x, y),
        Method::Spearman => pearson(&mid_ranks(x), &mid_ranks(y)),
    }
}

fn check(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("correlation samples have lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::Parameter("correlation needs at least 3 pairs".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("correlation sample is not finite".into()));
    }
    Ok(())
}

pub fn correlation(x: &[f64], y: &[f64], method: Method) -> Result<Correlation> {
    check(x, y)?;
    let r = coefficient(x, y, method);
    Ok(Correlation {
        method,
        n: x.len(),
        r,
        p_value: r.map(|r| t_p_value(r, x.len())),
        flag: r.is_none().then(|| "zero_variance".to_string()),
    })
}

/// Exact two-tailed permutation p-value: the share of all n! pairings whose
/// |r| reaches the observed one. Limited to n ≤ 10.
pub fn exact_permutation_p(x: &[f64], y: &[f64], method: Method) -> Result<f64> {
    check(x, y)?;
    if x.len() > 10 {
        return Err(Error::Parameter("exact permutation test is limited to 10 pairs".into()));
    }
    let observed = coefficient(x, y, method).ok_or_else(|| Error::Numerical("zero variance".into()))?.abs();
    let mut perm = y.to_vec();
    let n = perm.len();
    let mut c = vec![0usize; n];
    let (mut hits, mut total) = (0u64, 0u64);
    let mut visit = |p: &[f64]| {
        total += 1;
        if coefficient(x, p, method).unwrap_or(0.0).abs() >= observed - 1e-12 {
            hits += 1;
        }
    };
    // Heap's algorithm
    visit(&perm);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            visit(&perm);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// Non-finite values are skipped.
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().filter(|v| v.is_finite()).collect();
        let n = v.len();
        if n == 0 {
            return Self::default();
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = if n > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        Self { mean, std, n }
    }

    pub fn display(&self, digits: usize) -> String {
        format!("{:.*} ± {:.*}", digits, self.mean, digits, self.std)
    }
}

/// Error of a measured parameter against its reference across cases. Both
/// the mean absolute error and the RMS error are reported.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub parameter: String,
    pub n: usize,
    pub mean_abs_error: f64,
    pub std_abs_error: f64,
    pub rms_error: f64,
    /// Mean of measured − reference.
    pub bias: f64,
    /// Over cases with a non-zero reference; `None` when there are none.
    pub mean_relative_error: Option<f64>,
}

pub fn error_summary(parameter: &str, measured: &[f64], reference: &[f64]) -> Result<ErrorSummary> {
    if measured.len() != reference.len() || measured.is_empty() {
        return Err(Error::Shape(format!(
            "{parameter}: {} measurements for {} references",
            measured.len(),
            reference.len()
        )));
    }
    let diffs: Vec<f64> = measured.iter().zip(reference).map(|(m, r)| m - r).collect();
    let abs = MeanStd::of(diffs.iter().map(|d| d.abs()));
    let n = diffs.len() as f64;
    Ok(ErrorSummary {
        parameter: parameter.to_string(),
        n: diffs.len(),
        mean_abs_error: abs.mean,
        std_abs_error: abs.std,
        rms_error: (diffs.iter().map(|d| d * d).sum::<f64>() / n).sqrt(),
        bias: diffs.iter().sum::<f64>() / n,
        mean_relative_error: {
            let rel: Vec<f64> =
                diffs.iter().zip(reference).filter(|(_, &r)| r != 0.0).map(|(d, r)| (d / r).abs()).collect();
            (!rel.is_empty()).then(|| rel.iter().sum::<f64>() / rel.len() as f64)
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_affine() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let c = correlation(&x, &x, Method::Pearson).unwrap();
        assert!((c.r.unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(c.p_value, Some(0.0));
        let y: Vec<f64> = x.iter().map(|v| -2.0 * v + 3.0).collect();
        assert!((correlation(&x, &y, Method::Pearson).unwrap().r.unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn spearman_small_case() {
        let c = correlation(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0], Method::Spearman).unwrap();
        assert!((c.r.unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn mid_ranks_share_ties() {
        assert_eq!(mid_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn zero_variance_is_flagged() {
        let c = correlation(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0], Method::Pearson).unwrap();
        assert_eq!(c.r, None);
        assert_eq!(c.flag.as_deref(), Some("zero_variance"));
    }

    #[test]
    fn too_few_or_mismatched() {
        assert!(correlation(&[1.0, 2.0], &[1.0, 2.0], Method::Pearson).is_err());
        assert!(correlation(&[1.0, 2.0, 3.0], &[1.0, 2.0], Method::Pearson).is_err());
    }

    #[test]
    fn permutation_p_of_perfect_ranking() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        // only the identity and the reversal reach |ρ| = 1
        let p = exact_permutation_p(&x, &x, Method::Spearman).unwrap();
        assert!((p - 2.0 / 720.0).abs() < 1e-15);
    }

    #[test]
    fn t_p_value_matches_table() {
        // r = 0.5, n = 12: t = 1.8257, two-tailed p ≈ 0.0979
        assert!((t_p_value(0.5, 12) - 0.0979).abs() < 5e-4);
    }

    #[test]
    fn error_summary_reports_mean_and_rms() {
        let e = error_summary("d", &[1.0, 3.0], &[2.0, 2.0]).unwrap();
        assert_eq!(e.mean_abs_error, 1.0);
        assert_eq!(e.rms_error, 1.0);
        assert_eq!(e.bias, 0.0);
        let e = error_summary("d", &[2.0, 5.0], &[2.0, 2.0]).unwrap();
        assert_eq!(e.mean_abs_error, 1.5);
        assert!((e.rms_error - 4.5f64.sqrt()).abs() < 1e-15);
    }
}
