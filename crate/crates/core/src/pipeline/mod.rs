//! End-to-end quantization flow and its configuration.

mod ablation;
mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::calibrate::{select_activation_threshold, select_weight_thresholds, ErrorMeasure};
use crate::engine::quantize_weight;
use crate::error::{Error, Result};
use crate::ir::{ActivationKind, CalibrationSet, Graph, Op, QuantScope, WeightQuant};
use crate::quantizers::{QuantSpec, MAX_BITS};
use crate::stats::{collect_statistics, StatsStore, DEFAULT_BINS};
use crate::transforms::{apply_snc, bias_correction, equalize_activations, fold_batch_norm};

pub use ablation::{ablation_suites, render_ablation, run_ablation, AblationResult, AblationRow};
pub use report::{PipelineReport, ReportEntry, StageReport, REPORT_SCHEMA_VERSION};

/// Stage switches. Everything is on by default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub bn_fold: bool,
    pub outlier_removal: bool,
    pub snc: bool,
    pub equalization: bool,
    pub per_channel_weights: bool,
    pub bias_correction: bool,
    /// Quantize activations at all.
    pub activation_quantization: bool,
    /// Quantize weights at all.
    pub weight_quantization: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            bn_fold: true,
            outlier_removal: true,
            snc: true,
            equalization: true,
            per_channel_weights: true,
            bias_correction: true,
            activation_quantization: true,
            weight_quantization: true,
        }
    }
}

impl Toggles {
    pub const STAGES: [&'static str; 8] = [
        "bn_fold",
        "outlier_removal",
        "snc",
        "equalization",
        "per_channel_weights",
        "bias_correction",
        "activation_quantization",
        "weight_quantization",
    ];

    /// Quantizes activations and weights with every enhancement off.
    pub fn enhancements_off() -> Self {
        Self {
            outlier_removal: false,
            snc: false,
            equalization: false,
            per_channel_weights: false,
            bias_correction: false,
            ..Self::default()
        }
    }

    fn slot(&mut self, stage: &str) -> Result<&mut bool> {
        Ok(match stage {
            "bn_fold" => &mut self.bn_fold,
            "outlier_removal" => &mut self.outlier_removal,
            "snc" => &mut self.snc,
            "equalization" => &mut self.equalization,
            "per_channel_weights" => &mut self.per_channel_weights,
            "bias_correction" => &mut self.bias_correction,
            "activation_quantization" => &mut self.activation_quantization,
            "weight_quantization" => &mut self.weight_quantization,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown stage `{other}` (expected one of {})",
                    Self::STAGES.join(", ")
                )))
            }
        })
    }

    pub fn set(&mut self, stage: &str, on: bool) -> Result<()> {
        *self.slot(stage)? = on;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub bits: u32,
    pub measure: ErrorMeasure,
    pub z_threshold: f64,
    pub snc_alpha: f64,
    /// Halvings examined by the threshold search.
    pub iterations: u32,
    pub bins: usize,
    pub toggles: Toggles,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            bits: 8,
            measure: ErrorMeasure::Mse,
            z_threshold: 24.0,
            snc_alpha: 0.25,
            iterations: 10,
            bins: DEFAULT_BINS,
            toggles: Toggles::default(),
        }
    }
}

impl PipelineConfig {
    /// No-clipping thresholds, per-tensor weights, no enhancements.
    pub fn nc_baseline() -> Self {
        Self {
            measure: ErrorMeasure::Nc,
            toggles: Toggles::enhancements_off(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(2..=MAX_BITS).contains(&self.bits) {
            return bad(format!("bits must lie in 2..={MAX_BITS}, got {}", self.bits));
        }
        if !(self.z_threshold > 0.0) {
            return bad(format!("z threshold must be positive, got {}", self.z_threshold));
        }
        if !(self.snc_alpha > 0.0 && self.snc_alpha < 1.0) {
            return bad(format!("snc alpha must lie in (0, 1), got {}", self.snc_alpha));
        }
        if self.bins == 0 {
            return bad("bins must be positive".into());
        }
        Ok(())
    }
}

fn gather(g: &Graph, d: &CalibrationSet, cfg: &PipelineConfig) -> Result<StatsStore> {
    let mut stats = collect_statistics(g, d, cfg.bins)?;
    if cfg.toggles.outlier_removal {
        stats.apply_outlier_removal(cfg.z_threshold)?;
    }
    Ok(stats)
}

fn select_activations<'a>(
    tensors: impl IntoIterator<Item = &'a String>,
    stats: &StatsStore,
    cfg: &PipelineConfig,
    specs: &mut BTreeMap<String, QuantSpec>,
    stage: &mut StageReport,
) -> Result<()> {
    for t in tensors {
        let s = stats.get(t)?;
        let signed = s.tensor_min < 0.0;
        let r = select_activation_threshold(s, cfg.bits, signed, cfg.measure, cfg.iterations)?;
        specs.insert(t.clone(), QuantSpec::new(cfg.bits, signed, r.exponent)?);
        stage.push(
            t,
            "threshold",
            json!({
                "signed": signed,
                "exponent": r.exponent,
                "nc_exponent": r.nc_exponent,
                "error": r.error,
                "evaluations": r.evaluations,
            }),
        );
    }
    Ok(())
}

fn round_f32(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = *x as f32 as f64);
}

/// Rounds every parameter to the precision the container stores.
fn round_parameters(g: &mut Graph) {
    for n in g.nodes.iter_mut() {
        if let Some(w) = n.op.weight_mut() {
            round_f32(w.data_mut());
        }
        match &mut n.op {
            Op::Conv2d(c) | Op::DepthwiseConv2d(c) => {
                round_f32(&mut c.bias);
                c.pad_value = c.pad_value as f32 as f64;
            }
            Op::Dense(d) => round_f32(&mut d.bias),
            Op::BatchNorm(bn) => {
                for v in [&mut bn.gamma, &mut bn.beta, &mut bn.mean, &mut bn.var] {
                    round_f32(v);
                }
            }
            Op::Activation(a) => {
                a.shift = a.shift as f32 as f64;
                match &mut a.kind {
                    ActivationKind::ClippedRelu { clip } => round_f32(clip),
                    ActivationKind::Prelu { slopes } => round_f32(slopes),
                    ActivationKind::LeakyRelu { slope } => *slope = *slope as f32 as f64,
                    _ => {}
                }
            }
            _ => {}
        }
    }
}

/// Runs the full flow: batch-norm folding, statistics, outlier removal,
/// activation thresholds, shift negative correction, equalization, weight
/// thresholds and bias correction. Returns the quantized graph, whose linear
/// weights already sit on their quantization grids.
pub fn quantize_pipeline(
    model: &Graph,
    d: &CalibrationSet,
    cfg: &PipelineConfig,
) -> Result<(Graph, PipelineReport)> {
    cfg.validate()?;
    if d.is_empty() {
        return Err(Error::EmptyCalibrationSet);
    }
    if model.is_quantized() {
        return Err(Error::InvalidArgument("model is already quantized".into()));
    }
    let t = cfg.toggles;
    let mut report = PipelineReport::new(cfg.clone());

    let mut stage = StageReport::new("bn_fold", !t.bn_fold);
    let mut g = if t.bn_fold {
        let folded = fold_batch_norm(model).map_err(Error::in_stage("bn_fold"))?;
        for n in model.nodes.iter().filter(|n| matches!(n.op, Op::BatchNorm(_))) {
            let into = model.producer(&n.inputs[0]).map(|p| p.name.clone());
            stage.push(&n.name, "folded", json!({ "into": into }));
        }
        folded
    } else {
        model.clone()
    };
    report.stages.push(stage);

    let mut stats = gather(&g, d, cfg).map_err(Error::in_stage("statistics"))?;
    let mut stage = StageReport::new("statistics", false);
    stage.push(
        "<graph>",
        "collected",
        json!({ "samples": d.len(), "tensors": stats.tensors.len(), "bins": cfg.bins }),
    );
    report.stages.push(stage);

    let mut stage = StageReport::new("outlier_removal", !t.outlier_removal);
    for (name, s) in &stats.tensors {
        if let Some(f) = &s.outlier_filtered {
            let removed = s.histogram.total() - f.total();
            if removed > 0.0 {
                stage.push(name, "removed", json!({ "count": removed, "max_abs": s.search_max_abs() }));
            }
        }
    }
    report.stages.push(stage);

    let points = g.quantization_points();
    let mut specs = BTreeMap::new();
    let mut stage = StageReport::new("activation_thresholds", !t.activation_quantization);
    if t.activation_quantization {
        select_activations(&points, &stats, cfg, &mut specs, &mut stage)
            .map_err(Error::in_stage("activation_thresholds"))?;
    }
    report.stages.push(stage);

    let mut stage = StageReport::new("snc", !(t.snc && t.activation_quantization));
    if t.snc && t.activation_quantization {
        let records = apply_snc(&mut g, &stats, &mut specs, cfg.snc_alpha).map_err(Error::in_stage("snc"))?;
        if records.iter().any(|r| r.applied) {
            // consumers now see shifted inputs and padding
            stats = gather(&g, d, cfg).map_err(Error::in_stage("snc"))?;
        }
        for r in records {
            let action = if r.applied { "shifted" } else { "skipped" };
            stage.push(&r.tensor.clone(), action, serde_json::to_value(&r).expect("plain data"));
        }
    }
    report.stages.push(stage);

    let mut stage = StageReport::new("equalization", !(t.equalization && t.activation_quantization));
    if t.equalization && t.activation_quantization {
        let plan = equalize_activations(&mut g, &stats, &specs).map_err(Error::in_stage("equalization"))?;
        if !plan.entries.is_empty() {
            stats = gather(&g, d, cfg).map_err(Error::in_stage("equalization"))?;
            let touched: Vec<String> = plan
                .touched_tensors(&g)
                .into_iter()
                .filter(|t| specs.contains_key(t))
                .collect();
            let mut reselect = StageReport::new("equalization", false);
            select_activations(&touched, &stats, cfg, &mut specs, &mut reselect)
                .map_err(Error::in_stage("equalization"))?;
            for e in &plan.entries {
                stage.push(&e.activation, "equalized", serde_json::to_value(e).expect("plain data"));
            }
            for mut e in reselect.entries {
                e.action = "rethreshold".into();
                stage.entries.push(e);
            }
        }
    }
    report.stages.push(stage);

    let mut stage = StageReport::new("weight_thresholds", !t.weight_quantization);
    if t.weight_quantization {
        for n in g.nodes.iter_mut().filter(|n| n.op.is_linear()) {
            let w = n.op.weight().expect("linear");
            let results = select_weight_thresholds(w, cfg.bits, cfg.iterations, cfg.measure, t.per_channel_weights)
                .map_err(|e| Error::in_stage("weight_thresholds")(Error::InvalidArgument(format!("`{}`: {e}", n.name))))?;
            let exponents: Vec<i32> = results.iter().map(|r| r.exponent).collect();
            stage.push(
                &n.name,
                "threshold",
                json!({
                    "per_channel": t.per_channel_weights,
                    "exponents": exponents,
                    "errors": results.iter().map(|r| r.error).collect::<Vec<_>>(),
                }),
            );
            n.weight_quant = Some(WeightQuant { bits: cfg.bits, exponents });
        }
    }
    report.stages.push(stage);

    let mut stage = StageReport::new("bias_correction", !(t.bias_correction && t.weight_quantization));
    if t.bias_correction && t.weight_quantization {
        for r in bias_correction(&mut g, &stats).map_err(Error::in_stage("bias_correction"))? {
            stage.push(&r.layer.clone(), "corrected", json!({ "delta": r.delta }));
        }
    }
    report.stages.push(stage);

    for n in g.nodes.iter_mut() {
        if let (Some(wq), Some(w)) = (&n.weight_quant, n.op.weight()) {
            let wt = quantize_weight(w, wq);
            *n.op.weight_mut().expect("linear") = wt;
        }
        if t.activation_quantization {
            n.quant = specs.get(&n.output).copied();
        }
    }
    if t.activation_quantization {
        g.input.quant = specs.get(&g.input.name).copied();
    }
    round_parameters(&mut g);
    g.scope = Some(QuantScope {
        activations: t.activation_quantization,
        weights: t.weight_quantization,
    });
    g.check_quantized().map_err(|e| Error::in_stage("finalize")(e.into()))?;
    Ok((g, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::run_quantized;
    use crate::ir::testutil::*;
    use crate::ir::{Node, Padding};
    use crate::tensor::Layout;
    use crate::transforms::testutil::*;

    fn small_cnn() -> Graph {
        let mut r = rng(4);
        Graph::new(
            input(vec![4, 4, 2]),
            vec!["fc".into()],
            vec![
                Node::new(0, "c1", conv(random(&mut r, vec![3, 3, 2, 3], Layout::Weight), vec![0.1; 3], Padding::Same), vec!["input".into()]),
                Node::new(1, "r1", act(ActivationKind::Relu), vec!["c1".into()]),
                Node::new(2, "flat", Op::Flatten, vec!["r1".into()]),
                Node::new(3, "fc", dense(48, 4, random(&mut r, vec![192], Layout::Flat).into_data(), vec![0.0; 4]), vec!["flat".into()]),
            ],
        )
        .unwrap()
    }

    fn data(n: usize) -> CalibrationSet {
        let mut r = rng(8);
        CalibrationSet::new((0..n).map(|_| random(&mut r, vec![4, 4, 2], Layout::Activation)).collect())
    }

    #[test]
    fn defaults() {
        let c = PipelineConfig::default();
        assert_eq!((c.bits, c.measure, c.z_threshold, c.snc_alpha, c.iterations, c.bins), (8, ErrorMeasure::Mse, 24.0, 0.25, 10, 2048));
        assert_eq!(c.toggles, Toggles::default());
    }

    #[test]
    fn empty_dataset() {
        let err = quantize_pipeline(&small_cnn(), &CalibrationSet::new(vec![]), &PipelineConfig::default()).unwrap_err();
        assert_eq!(err.to_string(), "calibration set empty");
    }

    #[test]
    fn produces_a_complete_quantized_graph() {
        let (q, report) = quantize_pipeline(&small_cnn(), &data(16), &PipelineConfig::default()).unwrap();
        q.check_quantized().unwrap();
        assert_eq!(report.schema_version, REPORT_SCHEMA_VERSION);
        let y = run_quantized(&q, &data(1).samples[0]).unwrap();
        assert_eq!(y.outputs[0].dims(), &[4]);
        for n in q.linear_nodes() {
            let wq = n.weight_quant.as_ref().unwrap();
            let w = n.op.weight().unwrap();
            assert_eq!(&quantize_weight(w, wq), w);
        }
    }

    #[test]
    fn deterministic() {
        let cfg = PipelineConfig::default();
        let a = quantize_pipeline(&small_cnn(), &data(12), &cfg).unwrap();
        let b = quantize_pipeline(&small_cnn(), &data(12), &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.to_json(), b.1.to_json());
    }

    #[test]
    fn nc_baseline_uses_no_clipping_thresholds() {
        let (q, report) = quantize_pipeline(&small_cnn(), &data(8), &PipelineConfig::nc_baseline()).unwrap();
        let stage = report.stages.iter().find(|s| s.stage == "activation_thresholds").unwrap();
        for e in &stage.entries {
            assert_eq!(e.params["exponent"], e.params["nc_exponent"]);
        }
        let wq = q.node("fc").unwrap().weight_quant.as_ref().unwrap();
        assert!(wq.exponents.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn unknown_stage_is_rejected() {
        let mut t = Toggles::default();
        assert!(t.set("snc", false).is_ok());
        assert!(!t.snc);
        assert!(t.set("bogus", false).is_err());
    }

    #[test]
    fn invalid_config() {
        let cfg = PipelineConfig { bits: 1, ..Default::default() };
        assert!(quantize_pipeline(&small_cnn(), &data(2), &cfg).is_err());
    }
}
