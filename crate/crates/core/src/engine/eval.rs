use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::Executor;
use crate::error::{Error, Result};
use crate::ir::{CalibrationSet, Graph};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerError {
    pub tensor: String,
    pub mse: f64,
}

/// Float vs quantized comparison over a labeled dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub samples: usize,
    /// Top-1 accuracy in percent.
    pub float_score: f64,
    pub quantized_score: f64,
    /// `float_score - quantized_score`.
    pub delta: f64,
    /// Mean squared difference per node output, in the float model's domain.
    pub layers: Vec<LayerError>,
    pub mean_layer_mse: f64,
}

impl EvalReport {
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} over {} samples", self.metric, self.samples);
        let _ = writeln!(s, "  float      {:8.3}", self.float_score);
        let _ = writeln!(s, "  quantized  {:8.3}", self.quantized_score);
        let _ = writeln!(s, "  delta      {:8.3}", self.delta);
        let width = self.layers.iter().map(|l| l.tensor.len()).max().unwrap_or(0).max(6);
        let _ = writeln!(s, "\n  {:width$}  mse", "tensor");
        for l in &self.layers {
            let _ = writeln!(s, "  {:width$}  {:.6e}", l.tensor, l.mse);
        }
        let _ = writeln!(s, "  {:width$}  {:.6e}", "mean", self.mean_layer_mse);
        s
    }
}

/// Index of the first maximum.
fn argmax(t: &Tensor) -> usize {
    let mut best = 0;
    for (i, &v) in t.data().iter().enumerate() {
        if v > t.data()[best] {
            best = i;
        }
    }
    best
}

struct Partial {
    float_hits: usize,
    quant_hits: usize,
    sq_err: Vec<f64>,
}

/// Top-1 accuracy of both graphs and per-layer error of `g_quant` against
/// `g_float`. A float `g_quant` is run in float.
pub fn evaluate(g_float: &Graph, g_quant: &Graph, d: &CalibrationSet) -> Result<EvalReport> {
    let labels = d.labels.as_ref().ok_or(Error::MissingLabels)?;
    if labels.len() != d.len() {
        return Err(Error::LabelMismatch {
            labels: labels.len(),
            samples: d.len(),
        });
    }
    if d.is_empty() {
        return Err(Error::EmptyCalibrationSet);
    }
    let fx = Executor::float(g_float);
    let qx = Executor::for_graph(g_quant)?;

    let float_shapes = g_float.infer_shapes()?;
    let quant_shapes = g_quant.infer_shapes()?;
    let layers: Vec<(String, usize)> = g_quant
        .nodes
        .iter()
        .filter(|n| {
            float_shapes.contains_key(&n.output) && float_shapes.get(&n.output) == quant_shapes.get(&n.output)
        })
        .map(|n| (n.output.clone(), quant_shapes[&n.output].iter().product()))
        .collect();
    let maps: Vec<_> = layers
        .iter()
        .map(|(t, _)| g_quant.producer(t).and_then(|n| n.source_map.clone()))
        .collect();

    let indexed: Vec<(usize, &Tensor)> = d.samples.iter().enumerate().collect();
    let partials = par::try_map_chunks(&indexed, |chunk| -> Result<Partial> {
        let mut p = Partial {
            float_hits: 0,
            quant_hits: 0,
            sq_err: vec![0.0; layers.len()],
        };
        for &(i, x) in chunk {
            let ft = fx.run(x)?;
            let qt = qx.run(x)?;
            let label = labels[i] as usize;
            p.float_hits += usize::from(argmax(&ft.outputs[0]) == label);
            p.quant_hits += usize::from(argmax(&qt.outputs[0]) == label);
            for (k, (name, _)) in layers.iter().enumerate() {
                let q = &qt.tensors[name];
                let mapped;
                let q = match &maps[k] {
                    Some(m) => {
                        mapped = m.apply(q);
                        &mapped
                    }
                    None => q,
                };
                let f = &ft.tensors[name];
                p.sq_err[k] += q
                    .data()
                    .iter()
                    .zip(f.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
            }
        }
        Ok(p)
    })?;

    let mut float_hits = 0;
    let mut quant_hits = 0;
    let mut sq = vec![0.0; layers.len()];
    for p in partials {
        float_hits += p.float_hits;
        quant_hits += p.quant_hits;
        sq.iter_mut().zip(&p.sq_err).for_each(|(a, b)| *a += b);
    }
    let n = d.len() as f64;
    let layers: Vec<LayerError> = layers
        .into_iter()
        .zip(sq)
        .map(|((tensor, numel), s)| LayerError {
            tensor,
            mse: s / (n * numel as f64),
        })
        .collect();
    let mean_layer_mse = if layers.is_empty() {
        0.0
    } else {
        layers.iter().map(|l| l.mse).sum::<f64>() / layers.len() as f64
    };
    let float_score = 100.0 * float_hits as f64 / n;
    let quantized_score = 100.0 * quant_hits as f64 / n;
    Ok(EvalReport {
        metric: "top1_accuracy".into(),
        samples: d.len(),
        float_score,
        quantized_score,
        delta: float_score - quantized_score,
        layers,
        mean_layer_mse,
    })
}
