use serde::{Deserialize, Serialize};

use crate::engine::quantize_weight;
use crate::error::{Error, Result};
use crate::ir::{Graph, Op};
use crate::stats::StatsStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasCorrectionRecord {
    pub layer: String,
    /// Σ (W − W̃) over the input axes, per output channel.
    pub weight_error: Vec<f64>,
    /// Mean input seen by each weight row (per im2col patch element for
    /// convolutions).
    pub input_mean: Vec<f64>,
    /// `(W − W̃) · E[x]`, added to the bias.
    pub delta: Vec<f64>,
}

/// Adds `(W − W̃) · E[x]` to the bias of every linear node that has weight
/// quantizers, so the mean output over the calibration set is unchanged by
/// weight quantization. Weights are left untouched.
pub fn bias_correction(g: &mut Graph, stats: &StatsStore) -> Result<Vec<BiasCorrectionRecord>> {
    let mut records = Vec::new();
    for node in g.nodes.iter_mut() {
        let Some(wq) = &node.weight_quant else { continue };
        let w = node.op.weight().expect("weight quantizers only on linear nodes");
        let wt = quantize_weight(w, wq);
        let err: Vec<f64> = w.data().iter().zip(wt.data()).map(|(a, b)| a - b).collect();
        let cout = *w.dims().last().unwrap();
        let rows = err.len() / cout;
        let (input_mean, delta) = match &node.op {
            Op::Dense(_) => {
                let mean = stats.get(&node.inputs[0])?.per_channel_mean.clone();
                let delta = (0..cout)
                    .map(|k| (0..rows).map(|i| err[i * cout + k] * mean[i]).sum())
                    .collect();
                (mean, delta)
            }
            Op::Conv2d(_) => {
                let mean = stats.patch_mean(&node.name)?.to_vec();
                let delta = (0..cout)
                    .map(|k| (0..rows).map(|i| err[i * cout + k] * mean[i]).sum())
                    .collect();
                (mean, delta)
            }
            Op::DepthwiseConv2d(_) => {
                // rows are kernel taps; the patch mean is tap × channel
                let mean = stats.patch_mean(&node.name)?.to_vec();
                let delta = (0..cout)
                    .map(|k| (0..rows).map(|tap| err[tap * cout + k] * mean[tap * cout + k]).sum())
                    .collect();
                (mean, delta)
            }
            _ => unreachable!(),
        };
        if input_mean.len() != rows * if matches!(node.op, Op::DepthwiseConv2d(_)) { cout } else { 1 } {
            return Err(Error::MissingStats(format!("input means of `{}`", node.name)));
        }
        let weight_error = (0..cout).map(|k| (0..rows).map(|i| err[i * cout + k]).sum()).collect();
        for (b, d) in node.op.bias_mut().expect("linear").iter_mut().zip(&delta) {
            *b += d;
        }
        records.push(BiasCorrectionRecord {
            layer: node.name.clone(),
            weight_error,
            input_mean,
            delta,
        });
    }
    Ok(records)
}
