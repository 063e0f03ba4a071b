//! Segmentation and statistical metrics, the extrusion baseline and the
//! fold-improvement report.

pub mod baseline;
pub mod confusion;
pub mod delong;
pub mod fold;
pub mod hausdorff;
pub mod report;
pub mod stats;
pub mod table;

pub use baseline::naive_extrusion_baseline;
pub use confusion::{confusion_metrics, ConfusionCounts, ConfusionMetrics};
pub use delong::{delong_auc, AucResult};
pub use fold::{fold_improvement_report, FoldReport, ParameterErrors};
pub use hausdorff::{hausdorff, HausdorffResult};
pub use report::{case_metrics, CaseMetrics, MetricsReport};
pub use stats::{correlation, error_summary, Correlation, ErrorSummary, MeanStd, Method};
