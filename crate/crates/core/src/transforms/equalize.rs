use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::scale_output_channels;
use crate::error::Result;
use crate::ir::{ActivationKind, Graph, Node, Op, SourceMap};
use crate::quantizers::QuantSpec;
use crate::stats::StatsStore;

/// One rescaled linear → activation → (pooling/flatten)* → linear pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EqualizationEntry {
    pub first: String,
    pub activation: String,
    /// Pass-through nodes between the activation and `second`.
    pub chain: Vec<String>,
    pub second: String,
    pub threshold: f64,
    /// `s_k = min(v_k / t, 1)`, with `s_k = 1` for dead channels.
    pub scales: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EqualizationPlan {
    pub entries: Vec<EqualizationEntry>,
}

impl EqualizationPlan {
    /// Tensors whose values the rewrite changed.
    pub fn touched_tensors(&self, g: &Graph) -> Vec<String> {
        let mut out = Vec::new();
        for e in &self.entries {
            for name in std::iter::once(&e.first).chain(std::iter::once(&e.activation)).chain(&e.chain) {
                if let Some(n) = g.node(name) {
                    out.push(n.output.clone());
                }
            }
        }
        out
    }
}

fn eligible(kind: &ActivationKind) -> bool {
    matches!(
        kind,
        ActivationKind::Relu | ActivationKind::Relu6 | ActivationKind::ClippedRelu { .. } | ActivationKind::Prelu { .. }
    )
}

/// Finds the pattern rooted at activation node `a`.
fn match_pattern<'g>(g: &'g Graph, a: &'g Node) -> Option<(&'g Node, Vec<&'g Node>, &'g Node)> {
    let Op::Activation(act) = &a.op else { return None };
    if !eligible(&act.kind) || act.shift != 0.0 {
        return None;
    }
    let first = g.producer(&a.inputs[0])?;
    if !first.op.is_linear() || g.consumers(&first.output).len() != 1 || g.is_output(&first.output) {
        return None;
    }
    let mut chain = Vec::new();
    let mut cur = a;
    loop {
        if g.is_output(&cur.output) {
            return None;
        }
        let consumers = g.consumers(&cur.output);
        let [next] = consumers.as_slice() else { return None };
        match &next.op {
            Op::MaxPool(_) | Op::GlobalAvgPool | Op::Flatten => {
                chain.push(*next);
                cur = next;
            }
            Op::Conv2d(c) | Op::DepthwiseConv2d(c) if c.pad_value == 0.0 => return Some((first, chain, next)),
            Op::Dense(_) => return Some((first, chain, next)),
            _ => return None,
        }
    }
}

/// Max channel equalization.
///
/// For each eligible pattern, channel `k` of the activation is stretched by
/// `1 / s_k` (first layer weights and bias, clip points) and the consuming
/// layer's input channel `k` is multiplied by `s_k`, so the float function is
/// unchanged while every channel uses more of the quantization range.
pub fn equalize_activations(
    g: &mut Graph,
    stats: &StatsStore,
    specs: &BTreeMap<String, QuantSpec>,
) -> Result<EqualizationPlan> {
    let mut plan = EqualizationPlan::default();
    for a in &g.nodes {
        let Some((first, chain, second)) = match_pattern(g, a) else { continue };
        let Some(spec) = specs.get(&a.output) else { continue };
        let t = spec.threshold();
        let scales: Vec<f64> = stats
            .get(&a.output)?
            .per_channel_max_abs()
            .iter()
            .map(|&v| if v > 0.0 { (v / t).min(1.0) } else { 1.0 })
            .collect();
        if let Op::Dense(d) = &second.op {
            if d.weight.dims()[0] % scales.len() != 0 {
                continue;
            }
        }
        plan.entries.push(EqualizationEntry {
            first: first.name.clone(),
            activation: a.name.clone(),
            chain: chain.iter().map(|n| n.name.clone()).collect(),
            second: second.name.clone(),
            threshold: t,
            scales,
        });
    }

    for e in &plan.entries {
        let s = &e.scales;
        let c = s.len();
        for node in g.nodes.iter_mut() {
            if node.name == e.first {
                scale_output_channels(node.op.weight_mut().expect("linear"), |k| 1.0 / s[k]);
                for (k, b) in node.op.bias_mut().expect("linear").iter_mut().enumerate() {
                    *b /= s[k];
                }
                node.source_map = Some(SourceMap { offset: 0.0, scale: Some(s.clone()) });
            } else if node.name == e.activation {
                let Op::Activation(act) = &mut node.op else { unreachable!() };
                let clip = match &act.kind {
                    ActivationKind::Relu6 => Some(vec![6.0; c]),
                    ActivationKind::ClippedRelu { clip } if clip.len() == 1 => Some(vec![clip[0]; c]),
                    ActivationKind::ClippedRelu { clip } => Some(clip.clone()),
                    _ => None,
                };
                if let Some(clip) = clip {
                    act.kind = ActivationKind::ClippedRelu {
                        clip: clip.iter().zip(s).map(|(v, sk)| v / sk).collect(),
                    };
                }
                node.source_map = Some(SourceMap { offset: 0.0, scale: Some(s.clone()) });
            } else if e.chain.contains(&node.name) {
                let scale = if matches!(node.op, Op::Flatten) {
                    // flattened h×w×c: element i belongs to channel i % c
                    None
                } else {
                    Some(s.clone())
                };
                node.source_map = Some(SourceMap { offset: 0.0, scale });
            } else if node.name == e.second {
                match &mut node.op {
                    Op::Conv2d(conv) => {
                        let dims = conv.weight.dims().to_vec();
                        let (cin, cout) = (dims[2], dims[3]);
                        for (i, w) in conv.weight.data_mut().iter_mut().enumerate() {
                            *w *= s[(i / cout) % cin];
                        }
                    }
                    Op::DepthwiseConv2d(conv) => scale_output_channels(&mut conv.weight, |k| s[k]),
                    Op::Dense(d) => {
                        let cout = d.weight.dims()[1];
                        for (i, row) in d.weight.data_mut().chunks_exact_mut(cout).enumerate() {
                            row.iter_mut().for_each(|w| *w *= s[i % c]);
                        }
                    }
                    _ => unreachable!("pattern ends in a linear node"),
                }
            }
        }
    }
    // flatten maps need the flattened length
    let shapes = g.infer_shapes()?;
    for e in &plan.entries {
        for name in &e.chain {
            let node = g.node_mut(name).expect("chain node");
            if matches!(node.op, Op::Flatten) {
                let len = shapes[&node.output][0];
                let s = &e.scales;
                node.source_map = Some(SourceMap {
                    offset: 0.0,
                    scale: Some((0..len).map(|i| s[i % s.len()]).collect()),
                });
            }
        }
    }
    Ok(plan)
}
