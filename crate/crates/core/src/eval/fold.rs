//! Fold-improvement ratios between a baseline and a comparator method.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterErrors {
    pub parameter: String,
    pub baseline_error: f64,
    pub comparator_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRow {
    pub parameter: String,
    pub baseline_error: f64,
    pub comparator_error: f64,
    /// Baseline error / comparator error; infinite for a zero comparator error.
    #[serde(with = "crate::sentinel")]
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub rows: Vec<FoldRow>,
    #[serde(with = "crate::sentinel")]
    pub arithmetic_mean: f64,
    #[serde(with = "crate::sentinel")]
    pub geometric_mean: f64,
    /// An externally stated average ratio, checked against both means.
    pub stated_average: Option<f64>,
    pub flags: Vec<String>,
}

/// Relative tolerance for a stated average to count as matching a mean.
const MATCH_TOLERANCE: f64 = 0.01;

/// Error magnitudes of the 2D multi-plane mean (baseline) and of the 3D
/// reconstruction (comparator) for density (mm/mm³) and diameter (µm).
pub fn reference_errors() -> Vec<ParameterErrors> {
    vec![
        ParameterErrors { parameter: "vessel_density".into(), baseline_error: 16.241, comparator_error: 0.012 },
        ParameterErrors { parameter: "mean_diameter".into(), baseline_error: 118.6, comparator_error: 2.16 },
    ]
}

/// Average fold improvement stated alongside [`reference_errors`].
pub const REFERENCE_STATED_AVERAGE: f64 = 476.0;

pub fn fold_improvement_report(errors: &[ParameterErrors], stated_average: Option<f64>) -> Result<FoldReport> {
    if errors.is_empty() {
        return Err(Error::Parameter("no parameters to compare".into()));
    }
    let mut rows = Vec::with_capacity(errors.len());
    for e in errors {
        if !(e.baseline_error > 0.0) || !(e.comparator_error >= 0.0) {
            return Err(Error::Parameter(format!(
                "{}: errors must be positive (baseline {}, comparator {})",
                e.parameter, e.baseline_error, e.comparator_error
            )));
        }
        let ratio = if e.comparator_error == 0.0 { f64::INFINITY } else { e.baseline_error / e.comparator_error };
        rows.push(FoldRow {
            parameter: e.parameter.clone(),
            baseline_error: e.baseline_error,
            comparator_error: e.comparator_error,
            ratio,
        });
    }
    let n = rows.len() as f64;
    let arithmetic_mean = rows.iter().map(|r| r.ratio).sum::<f64>() / n;
    let geometric_mean = (rows.iter().map(|r| r.ratio.ln()).sum::<f64>() / n).exp();
    let mut flags = Vec::new();
    if rows.iter().any(|r| r.ratio.is_infinite()) {
        flags.push("zero_comparator_error".to_string());
    }
    if let Some(s) = stated_average {
        let near = |m: f64| m.is_finite() && ((s - m) / m).abs() <= MATCH_TOLERANCE;
        if !near(arithmetic_mean) && !near(geometric_mean) {
            flags.push(format!(
                "stated average {s} matches neither the arithmetic mean ({arithmetic_mean:.1}) \
                 nor the geometric mean ({geometric_mean:.1}) of the ratios"
            ));
        }
    }
    Ok(FoldReport { rows, arithmetic_mean, geometric_mean, stated_average, flags })
}

impl FoldReport {
    pub fn to_table(&self) -> String {
        let mut rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.parameter.clone(),
                    format!("{}", r.baseline_error),
                    format!("{}", r.comparator_error),
                    format!("{:.1}", r.ratio),
                ]
            })
            .collect();
        rows.push(vec!["arithmetic mean".into(), String::new(), String::new(), format!("{:.1}", self.arithmetic_mean)]);
        rows.push(vec!["geometric mean".into(), String::new(), String::new(), format!("{:.1}", self.geometric_mean)]);
        if let Some(s) = self.stated_average {
            rows.push(vec!["stated average".into(), String::new(), String::new(), format!("{s:.1}")]);
        }
        let mut out = super::table::render(&["parameter", "baseline error", "comparator error", "fold"], &rows);
        for f in &self.flags {
            out.push_str(&format!("note: {f}\n"));
        }
        out
    }
}
