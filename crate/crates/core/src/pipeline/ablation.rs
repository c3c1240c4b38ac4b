use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{quantize_pipeline, PipelineConfig, Toggles};
use crate::calibrate::ErrorMeasure;
use crate::engine::{evaluate, EvalReport};
use crate::error::Result;
use crate::ir::{CalibrationSet, Graph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// Rows within a suite are meant to be compared with each other.
    pub suite: String,
    pub name: String,
    pub config: PipelineConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: AblationRow,
    pub eval: EvalReport,
}

/// The toggle matrix: threshold measures with activations only, incremental
/// activation and weight techniques, and an incremental joint chain from the
/// no-clipping baseline to the full pipeline.
pub fn ablation_suites(base: &PipelineConfig) -> Vec<AblationRow> {
    let mut rows = Vec::new();
    let mut push = |suite: &str, name: &str, measure: ErrorMeasure, toggles: Toggles| {
        rows.push(AblationRow {
            suite: suite.into(),
            name: name.into(),
            config: PipelineConfig {
                measure,
                toggles,
                ..base.clone()
            },
        });
    };
    let off = Toggles::enhancements_off();

    let acts_only = Toggles {
        weight_quantization: false,
        ..off
    };
    for m in ErrorMeasure::ALL {
        push("measures", m.as_str(), m, acts_only);
    }

    let mut t = Toggles { snc: true, ..acts_only };
    push("activations", "baseline", ErrorMeasure::Nc, t);
    t.equalization = true;
    push("activations", "+equalization", ErrorMeasure::Nc, t);
    push("activations", "+mse", ErrorMeasure::Mse, t);
    t.outlier_removal = true;
    push("activations", "+outlier_removal", ErrorMeasure::Mse, t);

    let mut t = Toggles {
        activation_quantization: false,
        ..off
    };
    push("weights", "baseline", ErrorMeasure::Mse, t);
    t.per_channel_weights = true;
    push("weights", "+per_channel", ErrorMeasure::Mse, t);
    t.bias_correction = true;
    push("weights", "+bias_correction", ErrorMeasure::Mse, t);

    let mut t = off;
    push("joint", "baseline", ErrorMeasure::Nc, t);
    push("joint", "+mse", ErrorMeasure::Mse, t);
    t.outlier_removal = true;
    push("joint", "+outlier_removal", ErrorMeasure::Mse, t);
    t.equalization = true;
    push("joint", "+equalization", ErrorMeasure::Mse, t);
    t.per_channel_weights = true;
    push("joint", "+per_channel", ErrorMeasure::Mse, t);
    t.bias_correction = true;
    push("joint", "+bias_correction", ErrorMeasure::Mse, t);
    t.snc = true;
    push("joint", "+snc", ErrorMeasure::Mse, t);
    rows
}

/// Quantizes `model` on `calib` for every row and evaluates on `eval_set`.
pub fn run_ablation(
    model: &Graph,
    calib: &CalibrationSet,
    eval_set: &CalibrationSet,
    rows: &[AblationRow],
) -> Result<Vec<AblationResult>> {
    rows.iter()
        .map(|row| {
            let (q, _) = quantize_pipeline(model, calib, &row.config)?;
            let eval = evaluate(model, &q, eval_set)?;
            Ok(AblationResult { row: row.clone(), eval })
        })
        .collect()
}

pub fn render_ablation(results: &[AblationResult]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:<18} {:>9} {:>9} {:>8} {:>13}",
        "suite", "config", "float", "quant", "delta", "mean_mse"
    );
    for r in results {
        let e = &r.eval;
        let _ = writeln!(
            s,
            "{:<12} {:<18} {:>9.3} {:>9.3} {:>8.3} {:>13.6e}",
            r.row.suite, r.row.name, e.float_score, e.quantized_score, e.delta, e.mean_layer_mse
        );
    }
    s
}
