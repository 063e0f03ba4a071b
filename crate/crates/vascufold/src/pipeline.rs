//! Pipeline stages. Each stage reads the artifacts of the previous ones
//! from the output directory and writes its own.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use vascufold_core::eval::fold::{reference_errors, REFERENCE_STATED_AVERAGE};
use vascufold_core::eval::report::{comparison_table, error_table};
use vascufold_core::eval::{
    case_metrics, error_summary, fold_improvement_report, naive_extrusion_baseline, FoldReport, MeanStd, MetricsReport,
    ParameterErrors,
};
use vascufold_core::phantom::{analytic_properties, generate_network, rasterize, GroundTruthParams};
use vascufold_core::preprocess::{adaptive_median_filter, anisotropic_diffusion, preprocess_stack, snr_gain};
use vascufold_core::quant::{quantify_mask, QuantReport};
use vascufold_core::rng::derive_seed;
use vascufold_core::srus::{corrupt, slice_stack, DegradationConfig, SliceConfig};
use vascufold_core::volume::{Grid, Mask, Volume};
use vascufold_core::{Channel, SliceStack, VascularGraph};
use vascufold_model::train::write_history;
use vascufold_model::{reconstruct, train, ModelInput, ModelParams, Sample, TrainOutcome};

use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const METHOD_MODEL: &str = "model";
pub const METHOD_BASELINE: &str = "extrusion_baseline";

/// Paths of every artifact under the output directory.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }
    pub fn cases(&self) -> PathBuf {
        self.root.join("cases.json")
    }
    pub fn phantom(&self, id: &str) -> PathBuf {
        self.root.join("phantoms").join(id)
    }
    pub fn stack(&self, id: &str, kind: &str) -> PathBuf {
        self.root.join("stacks").join(id).join(kind)
    }
    pub fn model_dir(&self) -> PathBuf {
        self.root.join("model")
    }
    pub fn params(&self) -> PathBuf {
        self.model_dir().join("params.json")
    }
    pub fn recon(&self, id: &str) -> PathBuf {
        self.root.join("reconstructions").join(id)
    }
    pub fn quant(&self, id: &str) -> PathBuf {
        self.root.join("quant").join(id)
    }
    pub fn evaluation(&self) -> PathBuf {
        self.root.join("evaluation")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseList {
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

impl CaseList {
    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.validation)
    }
}

pub fn case_id(i: usize) -> String {
    format!("case_{i:04}")
}

fn case_index(id: &str) -> u64 {
    id.trim_start_matches("case_").parse().unwrap_or(0)
}

fn mkdir(p: &Path) -> Result<(), CliError> {
    fs::create_dir_all(p).map_err(|e| CliError::User(format!("cannot create {}: {e}", p.display())))
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    if let Some(d) = path.parent() {
        mkdir(d)?;
    }
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    write_text(path, &s)
}

pub fn write_text(path: &Path, s: &str) -> Result<(), CliError> {
    if let Some(d) = path.parent() {
        mkdir(d)?;
    }
    fs::write(path, s).map_err(|e| CliError::User(format!("cannot write {}: {e}", path.display())))
}

pub fn read_json<T: DeserializeOwned>(path: &Path, stage: &str) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::User(format!("missing {} ({e}); run `vascufold {stage}` first", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::User(format!("malformed {}: {e}", path.display())))
}

fn require(path: &Path, stage: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::User(format!("missing {}; run `vascufold {stage}` first", path.display())))
    }
}

fn load_cases(l: &Layout) -> Result<CaseList, CliError> {
    read_json(&l.cases(), "phantom")
}

fn load_mask(path: &Path, stage: &str) -> Result<Mask, CliError> {
    require(path, stage)?;
    Ok(Mask::load(path)?)
}

fn load_stack(path: &Path, stage: &str) -> Result<SliceStack, CliError> {
    require(&path.join("stack.json"), stage)?;
    Ok(SliceStack::load(path)?)
}

pub fn truth_grid(cfg: &ExperimentConfig) -> Result<Grid, CliError> {
    Ok(Grid::isotropic(cfg.dataset.grid_dims, cfg.dataset.voxel_mm)?)
}

/// One synthetic case: generating graph and its voxelized ground truth.
pub fn make_phantom(cfg: &ExperimentConfig, index: usize) -> Result<(VascularGraph, Mask), CliError> {
    let mut pc = cfg.phantom.clone();
    pc.seed = derive_seed(cfg.phantom.seed, &case_id(index));
    let graph = generate_network(&pc)?;
    let mask = rasterize(&graph, &truth_grid(cfg)?);
    Ok((graph, mask))
}

/// Clean and degraded slice stacks of one case.
pub fn simulate_case(
    cfg: &ExperimentConfig,
    index: u64,
    graph: &VascularGraph,
    truth: &Mask,
) -> Result<(SliceStack, SliceStack), CliError> {
    let sc = SliceConfig { seed: cfg.simulation.seed ^ index.wrapping_mul(0x9e37_79b9), ..cfg.simulation.clone() };
    let clean = slice_stack(graph, truth, &sc)?;
    let dc =
        DegradationConfig { seed: cfg.degradation.seed ^ index.wrapping_mul(0x9e37_79b9), ..cfg.degradation.clone() };
    let degraded = corrupt(&clean, &dc)?;
    Ok((clean, degraded))
}

pub fn to_sample(cfg: &ExperimentConfig, stack: &SliceStack, truth: &Mask) -> Result<Sample, CliError> {
    let input = ModelInput::from_stack(stack, &cfg.model)?;
    Ok(Sample { input, target: truth.data.iter().map(|&v| v as f64).collect() })
}

// ---- stages ---------------------------------------------------------------

pub fn run_phantom(cfg: &ExperimentConfig, l: &Layout) -> Result<(), CliError> {
    let n_train = cfg.dataset.train_cases;
    let cases = CaseList {
        train: (0..n_train).map(case_id).collect(),
        validation: (n_train..cfg.total_cases()).map(case_id).collect(),
    };
    for (i, id) in cases.all().enumerate() {
        let (graph, mask) = make_phantom(cfg, i)?;
        let dir = l.phantom(id);
        mkdir(&dir)?;
        graph.save(&dir.join("graph.json"))?;
        mask.save(&dir.join("truth.json"))?;
        let gt = analytic_properties(&graph, mask.grid.physical_volume());
        write_json(&dir.join("analytic.json"), &gt)?;
    }
    write_json(&l.cases(), &cases)?;
    log::info!("generated {} phantoms", cfg.total_cases());
    Ok(())
}

pub fn run_simulate(cfg: &ExperimentConfig, l: &Layout) -> Result<(), CliError> {
    let cases = load_cases(l)?;
    for id in cases.all() {
        let dir = l.phantom(id);
        require(&dir.join("graph.json"), "phantom")?;
        let graph = VascularGraph::load(&dir.join("graph.json"))?;
        let truth = load_mask(&dir.join("truth.json"), "phantom")?;
        let (clean, degraded) = simulate_case(cfg, case_index(id), &graph, &truth)?;
        clean.save(&l.stack(id, "clean"))?;
        degraded.save(&l.stack(id, "degraded"))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiseCase {
    pub id: String,
    /// Mean over slices of the grayscale SNR gain, dB.
    pub snr_gain_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub snr_gain_db: MeanStd,
    pub cases: Vec<DenoiseCase>,
}

pub fn run_preprocess(cfg: &ExperimentConfig, l: &Layout) -> Result<(), CliError> {
    let cases = load_cases(l)?;
    let p = &cfg.preprocessing;
    let mut report = Vec::new();
    for id in cases.all() {
        let clean = load_stack(&l.stack(id, "clean"), "simulate")?;
        let degraded = load_stack(&l.stack(id, "degraded"), "simulate")?;
        let out = preprocess_stack(&degraded, p)?;
        out.save(&l.stack(id, "preprocessed"))?;
        if let (Some(c), Some(d)) =
            (clean.channel_index(Channel::Grayscale), degraded.channel_index(Channel::Grayscale))
        {
            let mut gains = Vec::new();
            for k in 0..clean.len() {
                let (ci, ni) = (&clean.slices[k].data[c], &degraded.slices[k].data[d]);
                let den = anisotropic_diffusion(
                    &adaptive_median_filter(ni, p.median_max_kernel),
                    p.diffusion_iterations,
                    p.diffusion_kappa,
                    p.diffusion_lambda,
                )?;
                let g = snr_gain(ci, ni, &den);
                if g.is_finite() {
                    gains.push(g);
                }
            }
            if !gains.is_empty() {
                report.push(DenoiseCase { id: id.clone(), snr_gain_db: MeanStd::of(gains).mean });
            }
        }
    }
    let summary = PreprocessReport { snr_gain_db: MeanStd::of(report.iter().map(|c| c.snr_gain_db)), cases: report };
    write_json(&l.root.join("preprocess_report.json"), &summary)
}

fn samples(cfg: &ExperimentConfig, l: &Layout, ids: &[String]) -> Result<Vec<Sample>, CliError> {
    ids.iter()
        .map(|id| {
            let stack = load_stack(&l.stack(id, "preprocessed"), "preprocess")?;
            let truth = load_mask(&l.phantom(id).join("truth.json"), "phantom")?;
            to_sample(cfg, &stack, &truth)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub parameters: usize,
    pub train_cases: usize,
    pub validation_cases: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_dice: Option<f64>,
}

pub fn train_model(cfg: &ExperimentConfig, train_set: &[Sample], val_set: &[Sample]) -> Result<TrainOutcome, CliError> {
    let init = ModelParams::init(&cfg.model)?;
    if init.count() != cfg.model.param_count() {
        return Err(CliError::Internal(format!(
            "allocated {} parameters, config implies {}",
            init.count(),
            cfg.model.param_count()
        )));
    }
    Ok(train(train_set, val_set, init, &cfg.training)?)
}

pub fn run_train(cfg: &ExperimentConfig, l: &Layout) -> Result<(), CliError> {
    let cases = load_cases(l)?;
    let train_set = samples(cfg, l, &cases.train)?;
    let val_set = samples(cfg, l, &cases.validation)?;
    let out = train_model(cfg, &train_set, &val_set)?;
    out.params.save(&l.params())?;
    write_history(&l.model_dir().join("history.csv"), &out.history)?;
    let summary = TrainingSummary {
        parameters: out.params.count(),
        train_cases: train_set.len(),
        validation_cases: val_set.len(),
        epochs: out.history.len(),
        best_epoch: out.best_epoch,
        best_val_dice: out.history[out.best_epoch].val_dice,
    };
    write_json(&l.model_dir().join("training.json"), &summary)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InferenceTiming {
    pub wall_ms: Vec<(String, f64)>,
}

pub fn run_reconstruct(cfg: &ExperimentConfig, l: &Layout) -> Result<(), CliError> {
    let cases = load_cases(l)?;
    require(&l.params(), "train")?;
    let params: ModelParams<f64> = ModelParams::load(&l.params())?;
    if params.config.channels != cfg.model.channels || params.config.input_dims != cfg.model.input_dims {
        return Err(CliError::User(format!("{} was trained with a different model config", l.params().display())));
    }
    let mut timing = Vec::new();
    for id in &cases.validation {
        let stack = load_stack(&l.stack(id, "preprocessed"), "preprocess")?;
        let truth = load_mask(&l.phantom(id).join("truth.json"), "phantom")?;
        let r = reconstruct(&stack, &params, cfg.reconstruction.threshold)?;
        let dir = l.recon(id);
        mkdir(&dir)?;
        let prob: Volume<f32> =
            Volume::from_data(truth.grid.clone(), r.probability.data.iter().map(|&p| p as f32).collect())?;
        prob.save(&dir.join("probability.json"))?;
        let mask = Mask::from_data(truth.grid.clone(), r.mask.data)?;
        mask.save(&dir.join("model_mask.json"))?;
        let base = naive_extrusion_baseline(&stack, cfg.evaluation.baseline_threshold, &truth.grid)?;
        base.save(&dir.join("baseline_mask.json"))?;
        timing.push((id.clone(), r.wall_ms));
    }
    write_json(&l.root.join("reconstructions").join("timing.json"), &InferenceTiming { wall_ms: timing })
}

fn method_mask_file(method: &str) -> &'static str {
    if method == METHOD_MODEL {
        "model_mask.json"
    } else {
        "baseline_mask.json"
    }
}

pub fn run_quantify(cfg: &ExperimentConfig, l: &Layout) -> Result<(), CliError> {
    let cases = load_cases(l)?;
    let q = &cfg.quantification;
    let mut csv = format!("method,{}\n", QuantReport::CSV_HEADER);
    for id in &cases.validation {
        let truth = load_mask(&l.phantom(id).join("truth.json"), "phantom")?;
        let mut items = vec![("truth".to_string(), truth)];
        for m in [METHOD_MODEL, METHOD_BASELINE] {
            items.push((m.to_string(), load_mask(&l.recon(id).join(method_mask_file(m)), "reconstruct")?));
        }
        for (method, mask) in items {
            let (graph, rep) = quantify_mask(&mask, &q.extract, &q.options, id)?;
            let dir = l.quant(id);
            mkdir(&dir)?;
            graph.save(&dir.join(format!("{method}_graph.json")))?;
            write_json(&dir.join(format!("{method}.json")), &rep)?;
            let _ = writeln!(csv, "{method},{}", rep.csv_row());
        }
    }
    write_text(&l.root.join("quant").join("quant.csv"), &csv)
}

/// Parameters compared against the generating geometry.
pub const EVAL_PARAMETERS: [&str; 5] =
    ["vessel_density", "mean_diameter", "surface_area", "total_length", "mean_branch_angle"];

fn quant_value(r: &QuantReport, p: &str) -> f64 {
    match p {
        "vessel_density" => r.vessel_density,
        "mean_diameter" => r.mean_diameter,
        "surface_area" => r.surface_area,
        "total_length" => r.total_length,
        _ => r.mean_branch_angle,
    }
}

fn truth_value(g: &GroundTruthParams, p: &str) -> f64 {
    match p {
        "vessel_density" => g.vessel_density,
        "mean_diameter" => g.mean_diameter,
        "surface_area" => g.surface_area,
        "total_length" => g.total_length,
        _ => g.mean_branch_angle,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Evaluation {
    pub reports: Vec<MetricsReport>,
    /// Baseline vs model mean absolute errors on this dataset.
    pub measured_fold: FoldReport,
    /// Published error magnitudes and their stated average.
    pub reference_fold: FoldReport,
}

pub fn run_evaluate(_cfg: &ExperimentConfig, l: &Layout) -> Result<(), CliError> {
    let cases = load_cases(l)?;
    let mut truths = Vec::new();
    let mut gts: Vec<GroundTruthParams> = Vec::new();
    for id in &cases.validation {
        truths.push(load_mask(&l.phantom(id).join("truth.json"), "phantom")?);
        gts.push(read_json(&l.phantom(id).join("analytic.json"), "phantom")?);
    }
    let mut reports = Vec::new();
    for method in [METHOD_MODEL, METHOD_BASELINE] {
        let mut per_case = Vec::new();
        let mut quants: Vec<QuantReport> = Vec::new();
        for (id, truth) in cases.validation.iter().zip(&truths) {
            let pred = load_mask(&l.recon(id).join(method_mask_file(method)), "reconstruct")?;
            let prob = if method == METHOD_MODEL {
                Some(Volume::<f32>::load(&l.recon(id).join("probability.json"))?)
            } else {
                None
            };
            per_case.push(case_metrics(id, &pred, truth, prob.as_ref())?);
            quants.push(read_json(&l.quant(id).join(format!("{method}.json")), "quantify")?);
        }
        let mut rep = MetricsReport::from_cases(method, per_case);
        for p in EVAL_PARAMETERS {
            let measured: Vec<f64> = quants.iter().map(|q| quant_value(q, p)).collect();
            let reference: Vec<f64> = gts.iter().map(|g| truth_value(g, p)).collect();
            rep.parameter_errors.push(error_summary(p, &measured, &reference)?);
            if p == "vessel_density" {
                rep.set_correlation(&measured, &reference)?;
            }
        }
        reports.push(rep);
    }
    let err_of = |method: &str, p: &str| {
        reports
            .iter()
            .find(|r| r.method == method)
            .and_then(|r| r.parameter_errors.iter().find(|e| e.parameter == p))
            .map(|e| e.mean_abs_error)
            .unwrap_or(f64::NAN)
    };
    let measured: Vec<ParameterErrors> = ["vessel_density", "mean_diameter"]
        .iter()
        .map(|p| ParameterErrors {
            parameter: p.to_string(),
            baseline_error: err_of(METHOD_BASELINE, p),
            comparator_error: err_of(METHOD_MODEL, p),
        })
        .collect();
    let measured_fold = fold_improvement_report(&measured, None)?;
    let reference_fold = fold_improvement_report(&reference_errors(), Some(REFERENCE_STATED_AVERAGE))?;
    let dir = l.evaluation();
    let mut csv = String::new();
    for (i, r) in reports.iter().enumerate() {
        let body = r.to_csv();
        csv.push_str(if i == 0 { &body } else { body.split_once('\n').map_or("", |(_, b)| b) });
        write_json(&dir.join(format!("metrics_{}.json", r.method)), r)?;
    }
    write_text(&dir.join("metrics.csv"), &csv)?;
    write_json(&dir.join("fold_measured.json"), &measured_fold)?;
    write_json(&dir.join("fold_reference.json"), &reference_fold)?;
    let eval = Evaluation { reports, measured_fold, reference_fold };
    write_json(&dir.join("evaluation.json"), &eval)
}

/// Plain-text report of the evaluation artifacts.
pub fn render_report(l: &Layout) -> Result<String, CliError> {
    let eval: Evaluation = read_json(&l.evaluation().join("evaluation.json"), "evaluate")?;
    let mut s = String::from("# Reconstruction report\n\n## Segmentation (mean ± std over held-out cases)\n\n");
    s.push_str(&comparison_table(&eval.reports));
    s.push_str("\n## Parameter errors against the generating geometry\n\n");
    s.push_str(&error_table(&eval.reports));
    for r in &eval.reports {
        if let Some(a) = &r.auc {
            let _ =
                writeln!(s, "\n{} pooled AUC {:.4} (95% CI {:.4} to {:.4})", r.method, a.auc, a.ci_lower, a.ci_upper);
        }
        for c in [&r.pearson, &r.spearman].into_iter().flatten() {
            let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(s, "{} density {:?} r = {} (p = {})", r.method, c.method, fmt(c.r), fmt(c.p_value));
        }
        for f in &r.flags {
            let _ = writeln!(s, "{} flag: {f}", r.method);
        }
    }
    s.push_str("\n## Fold improvement, this dataset (extrusion baseline / model)\n\n");
    s.push_str(&eval.measured_fold.to_table());
    s.push_str("\n## Fold improvement, published error magnitudes\n\n");
    s.push_str(&eval.reference_fold.to_table());
    if let Ok(p) = read_json::<PreprocessReport>(&l.root.join("preprocess_report.json"), "preprocess") {
        let _ = writeln!(s, "\n## Denoising\n\nSNR gain {} dB over {} cases", p.snr_gain_db.display(2), p.cases.len());
    }
    if let Ok(t) = read_json::<TrainingSummary>(&l.model_dir().join("training.json"), "train") {
        let _ = writeln!(
            s,
            "\n## Training\n\n{} parameters, {} epochs, best epoch {} (validation Dice {})",
            t.parameters,
            t.epochs,
            t.best_epoch,
            t.best_val_dice.map_or("NA".into(), |d| format!("{d:.4}"))
        );
    }
    Ok(s)
}

/// Headline numbers of a run, written as `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    /// Mean Dice of the model over held-out cases.
    pub dice: f64,
    pub dice_std: f64,
    pub baseline_dice: f64,
    /// Mean per-case (model − baseline) Dice over cases where both are
    /// defined.
    pub paired_dice_margin: f64,
    pub paired_cases: usize,
    /// Fold ratios of the published error magnitudes, density then
    /// diameter.
    #[serde(with = "vascufold_core::sentinel")]
    pub reference_density_fold: f64,
    #[serde(with = "vascufold_core::sentinel")]
    pub reference_diameter_fold: f64,
    pub reference_flags: Vec<String>,
}

impl ReportSummary {
    pub fn from_evaluation(eval: &Evaluation) -> Result<Self, CliError> {
        let find = |m: &str| {
            eval.reports
                .iter()
                .find(|r| r.method == m)
                .ok_or_else(|| CliError::Internal(format!("evaluation lacks method {m}")))
        };
        let (model, base) = (find(METHOD_MODEL)?, find(METHOD_BASELINE)?);
        let diffs: Vec<f64> = model
            .cases
            .iter()
            .zip(&base.cases)
            .filter_map(|(a, b)| Some(a.confusion.dice? - b.confusion.dice?))
            .collect();
        let fold = |i: usize| eval.reference_fold.rows.get(i).map_or(f64::NAN, |r| r.ratio);
        Ok(Self {
            dice: model.dice.mean,
            dice_std: model.dice.std,
            baseline_dice: base.dice.mean,
            paired_dice_margin: diffs.iter().sum::<f64>() / diffs.len().max(1) as f64,
            paired_cases: diffs.len(),
            reference_density_fold: fold(0),
            reference_diameter_fold: fold(1),
            reference_flags: eval.reference_fold.flags.clone(),
        })
    }
}

pub fn run_report(_cfg: &ExperimentConfig, l: &Layout) -> Result<String, CliError> {
    let s = render_report(l)?;
    let eval: Evaluation = read_json(&l.evaluation().join("evaluation.json"), "evaluate")?;
    write_json(&l.root.join("report.json"), &ReportSummary::from_evaluation(&eval)?)?;
    write_text(&l.root.join("report.md"), &s)?;
    Ok(s)
}
