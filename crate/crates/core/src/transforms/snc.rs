use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::column_sums;
use crate::error::{Error, Result};
use crate::ir::{ActivationKind, Graph, Op, SourceMap};
use crate::quantizers::QuantSpec;
use crate::stats::StatsStore;

/// Outcome for one candidate activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SncRecord {
    pub tensor: String,
    pub min: f64,
    pub threshold: f64,
    pub ratio: f64,
    /// Shift added to the activation; 0 when skipped.
    pub shift: f64,
    pub applied: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// Shift negative correction.
///
/// A signed non-linear activation whose most negative value `s` is small
/// relative to its threshold (`|s| / t < alpha`) becomes `φ(x) + |s|` with an
/// unsigned quantizer of the same threshold. Every consumer must be a linear
/// node; it absorbs the shift through its bias (`b -= |s| · Σ W`) and, for
/// convolutions, its padding value.
pub fn apply_snc(
    g: &mut Graph,
    stats: &StatsStore,
    specs: &mut BTreeMap<String, QuantSpec>,
    alpha: f64,
) -> Result<Vec<SncRecord>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("snc alpha {alpha} must lie in (0, 1)")));
    }
    let mut records = Vec::new();
    let candidates: Vec<String> = g
        .nodes
        .iter()
        .filter(|n| match &n.op {
            Op::Activation(a) => a.shift == 0.0 && a.kind != ActivationKind::Identity,
            _ => false,
        })
        .map(|n| n.output.clone())
        .collect();
    for tensor in candidates {
        let Some(spec) = specs.get(&tensor).copied() else { continue };
        let min = stats.get(&tensor)?.tensor_min;
        if !spec.signed || min >= 0.0 {
            continue;
        }
        let shift = -min;
        let t = spec.threshold();
        let ratio = shift / t;
        let mut rec = SncRecord {
            tensor: tensor.clone(),
            min,
            threshold: t,
            ratio,
            shift: 0.0,
            applied: false,
            reason: None,
        };
        if ratio >= alpha {
            rec.reason = Some(format!("ratio {ratio:.4} >= alpha {alpha}"));
            records.push(rec);
            continue;
        }
        let consumers = g.consumers(&tensor);
        if g.is_output(&tensor) || consumers.is_empty() || !consumers.iter().all(|c| c.op.is_linear()) {
            let reason = if g.is_output(&tensor) {
                "tensor is a graph output".to_string()
            } else {
                let names: Vec<_> = consumers.iter().map(|c| format!("{} ({})", c.name, c.op.name())).collect();
                format!("consumers cannot absorb a shift: {}", names.join(", "))
            };
            log::warn!("skipping shift negative correction on `{tensor}`: {reason}");
            rec.reason = Some(reason);
            records.push(rec);
            continue;
        }
        for node in g.nodes.iter_mut() {
            if node.inputs.contains(&tensor) {
                let sums = column_sums(node.op.weight().expect("linear"));
                for (b, s) in node.op.bias_mut().expect("linear").iter_mut().zip(&sums) {
                    *b -= shift * s;
                }
                if let Op::Conv2d(c) | Op::DepthwiseConv2d(c) = &mut node.op {
                    c.pad_value += shift;
                }
            }
            if node.output == tensor {
                let Op::Activation(a) = &mut node.op else { unreachable!() };
                a.shift = shift;
                node.source_map = Some(SourceMap { offset: shift, scale: None });
            }
        }
        specs.insert(tensor.clone(), QuantSpec { signed: false, ..spec });
        rec.shift = shift;
        rec.applied = true;
        records.push(rec);
    }
    Ok(records)
}
