//! Per-case and aggregated evaluation reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::confusion::{confusion_counts, ConfusionCounts, ConfusionMetrics};
use super::delong::{delong_auc, AucResult};
use super::hausdorff::{hausdorff, HausdorffResult};
use super::stats::{correlation, Correlation, ErrorSummary, MeanStd, Method};
use super::table;
use crate::error::{Error, Result};
use crate::volume::{Mask, Volume};

/// Significance level used for every reported p-value.
pub const ALPHA: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub id: String,
    pub confusion: ConfusionMetrics,
    pub hausdorff: HausdorffResult,
    /// Voxelwise AUC of the probability map, when one is supplied.
    pub auc: Option<AucResult>,
}

pub fn case_metrics(id: &str, pred: &Mask, truth: &Mask, prob: Option<&Volume<f32>>) -> Result<CaseMetrics> {
    let confusion = ConfusionMetrics::from_counts(confusion_counts(pred, truth)?);
    let hausdorff = hausdorff(pred, truth)?;
    let auc = match prob {
        Some(p) => {
            if p.grid.dims != truth.grid.dims {
                return Err(Error::Shape("probability map dims differ from truth".into()));
            }
            let scores: Vec<f64> = p.data.iter().map(|&v| v as f64).collect();
            let labels: Vec<bool> = truth.data.iter().map(|&t| t != 0).collect();
            // a single-class truth has no ROC curve
            delong_auc(&scores, &labels).ok()
        }
        None => None,
    };
    Ok(CaseMetrics { id: id.to_string(), confusion, hausdorff, auc })
}

/// Voxelwise AUC pooled over several (probability, truth) pairs.
pub fn pooled_auc(pairs: &[(&Volume<f32>, &Mask)]) -> Result<AucResult> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (p, t) in pairs {
        if p.grid.dims != t.grid.dims {
            return Err(Error::Shape("probability map dims differ from truth".into()));
        }
        scores.extend(p.data.iter().map(|&v| v as f64));
        labels.extend(t.data.iter().map(|&v| v != 0));
    }
    delong_auc(&scores, &labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub alpha: f64,
    /// Confusion counts summed over cases.
    pub counts: ConfusionCounts,
    pub dice: MeanStd,
    pub sensitivity: MeanStd,
    pub specificity: MeanStd,
    pub accuracy: MeanStd,
    pub ppv: MeanStd,
    pub npv: MeanStd,
    pub hausdorff_px: MeanStd,
    pub hd95_px: MeanStd,
    pub hausdorff_mm: MeanStd,
    pub hd95_mm: MeanStd,
    pub auc: Option<AucResult>,
    pub pearson: Option<Correlation>,
    pub spearman: Option<Correlation>,
    /// Morphometric errors against the reference, per parameter.
    pub parameter_errors: Vec<ErrorSummary>,
    pub flags: Vec<String>,
    /// Sorted by id.
    pub cases: Vec<CaseMetrics>,
}

impl MetricsReport {
    pub fn from_cases(method: &str, mut cases: Vec<CaseMetrics>) -> Self {
        cases.sort_by(|a, b| a.id.cmp(&b.id));
        let rate = |f: fn(&ConfusionMetrics) -> Option<f64>| MeanStd::of(cases.iter().filter_map(|c| f(&c.confusion)));
        let hd = |f: fn(&HausdorffResult) -> f64| MeanStd::of(cases.iter().map(|c| f(&c.hausdorff)));
        let mut flags: Vec<String> = Vec::new();
        for c in &cases {
            for f in &c.confusion.flags {
                flags.push(format!("{}: {f}", c.id));
            }
            if let Some(f) = &c.hausdorff.flag {
                flags.push(format!("{}: hausdorff {f}", c.id));
            }
        }
        Self {
            method: method.to_string(),
            alpha: ALPHA,
            counts: cases.iter().fold(ConfusionCounts::default(), |a, c| a + c.confusion.counts),
            dice: rate(|c| c.dice),
            sensitivity: rate(|c| c.sensitivity),
            specificity: rate(|c| c.specificity),
            accuracy: rate(|c| c.accuracy),
            ppv: rate(|c| c.ppv),
            npv: rate(|c| c.npv),
            hausdorff_px: hd(|h| h.hausdorff_px),
            hd95_px: hd(|h| h.hd95_px),
            hausdorff_mm: hd(|h| h.hausdorff_mm),
            hd95_mm: hd(|h| h.hd95_mm),
            auc: None,
            pearson: None,
            spearman: None,
            parameter_errors: Vec::new(),
            flags,
            cases,
        }
    }

    /// Pearson and Spearman correlation of a measured parameter with its
    /// reference across cases; flagged when there are fewer than 3 cases.
    pub fn set_correlation(&mut self, measured: &[f64], reference: &[f64]) -> Result<()> {
        if measured.len() < 3 {
            self.flags.push("correlation_needs_3_cases".to_string());
            return Ok(());
        }
        self.pearson = Some(correlation(measured, reference, Method::Pearson)?);
        self.spearman = Some(correlation(measured, reference, Method::Spearman)?);
        Ok(())
    }

    pub const CSV_HEADER: &'static str =
        "method,case,dice,sensitivity,specificity,accuracy,ppv,npv,hausdorff_px,hd95_px,hausdorff_mm,hd95_mm,auc";

    /// One row per case, then a `mean` row.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v}"));
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for c in &self.cases {
            let m = &c.confusion;
            let h = &c.hausdorff;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                self.method,
                c.id,
                opt(m.dice),
                opt(m.sensitivity),
                opt(m.specificity),
                opt(m.accuracy),
                opt(m.ppv),
                opt(m.npv),
                crate::sentinel::fmt(h.hausdorff_px),
                crate::sentinel::fmt(h.hd95_px),
                crate::sentinel::fmt(h.hausdorff_mm),
                crate::sentinel::fmt(h.hd95_mm),
                opt(c.auc.as_ref().map(|a| a.auc)),
            );
        }
        let _ = writeln!(
            s,
            "{},mean,{},{},{},{},{},{},{},{},{},{},{}",
            self.method,
            self.dice.mean,
            self.sensitivity.mean,
            self.specificity.mean,
            self.accuracy.mean,
            self.ppv.mean,
            self.npv.mean,
            self.hausdorff_px.mean,
            self.hd95_px.mean,
            self.hausdorff_mm.mean,
            self.hd95_mm.mean,
            opt(self.auc.as_ref().map(|a| a.auc)),
        );
        s
    }
}

/// Method × metric table, mean ± std across cases.
pub fn comparison_table(reports: &[MetricsReport]) -> String {
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.method.clone(),
                r.cases.len().to_string(),
                r.dice.display(3),
                r.sensitivity.display(3),
                r.specificity.display(3),
                r.accuracy.display(3),
                r.hd95_px.display(2),
            ]
        })
        .collect();
    table::render(&["method", "cases", "dice", "sensitivity", "specificity", "accuracy", "hd95 (px)"], &rows)
}

/// Parameter × method error table: mean absolute error ± std and RMS error.
pub fn error_table(reports: &[MetricsReport]) -> String {
    let mut rows = Vec::new();
    for r in reports {
        for e in &r.parameter_errors {
            rows.push(vec![
                e.parameter.clone(),
                r.method.clone(),
                format!("{:.4} ± {:.4}", e.mean_abs_error, e.std_abs_error),
                format!("{:.4}", e.rms_error),
                e.mean_relative_error.map_or("NA".into(), |r| format!("{:.1}%", 100.0 * r)),
            ]);
        }
    }
    rows.sort_by(|a, b| a[0].cmp(&b[0]));
    table::render(&["parameter", "method", "abs error", "rms error", "rel error"], &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;

    fn masks() -> (Mask, Mask) {
        let g = Grid::isotropic([6, 6, 6], 0.01).unwrap();
        let mut a = Mask::zeros(g.clone());
        let mut b = Mask::zeros(g);
        for x in 1..4 {
            a.set(x, 2, 2, 1);
            b.set(x + 1, 2, 2, 1);
        }
        (a, b)
    }

    #[test]
    fn aggregates_sorted_cases() {
        let (a, b) = masks();
        let c1 = case_metrics("b", &a, &b, None).unwrap();
        let c2 = case_metrics("a", &a, &a, None).unwrap();
        let r = MetricsReport::from_cases("toy", vec![c1, c2]);
        assert_eq!(r.cases[0].id, "a");
        assert!((r.dice.mean - (1.0 + 4.0 / 6.0) / 2.0).abs() < 1e-12);
        assert_eq!(r.counts.tp, 3 + 2);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 4);
        let back: MetricsReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn single_run_table_has_one_row() {
        let (a, _) = masks();
        let r = MetricsReport::from_cases("toy", vec![case_metrics("x", &a, &a, None).unwrap()]);
        assert_eq!(comparison_table(&[r]).lines().count(), 3);
    }
}
