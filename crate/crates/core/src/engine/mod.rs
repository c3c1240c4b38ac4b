//! Reference executor for float and fake-quantized graphs.

mod eval;
pub mod ops;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ir::{Graph, IrError, Op, WeightQuant};
use crate::quantizers::{quantize_tensor, QuantSpec};
use crate::tensor::Tensor;

pub use eval::{evaluate, EvalReport, LayerError};

/// Every tensor computed for one input sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ExecutionTrace {
    pub tensors: BTreeMap<String, Tensor>,
    pub outputs: Vec<Tensor>,
}

impl ExecutionTrace {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }
}

/// Per-channel fake quantization of a weight tensor (channel = last axis).
pub fn quantize_weight(w: &Tensor, wq: &WeightQuant) -> Tensor {
    let c = *w.dims().last().unwrap();
    let specs: Vec<QuantSpec> = (0..c).map(|k| wq.spec(k)).collect();
    let mut out = w.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        for (v, s) in row.iter_mut().zip(&specs) {
            *v = s.quantize(*v);
        }
    }
    out
}

/// Runs a graph sample by sample. Quantized weights are prepared once.
pub struct Executor<'g> {
    graph: &'g Graph,
    weights: Vec<Option<Tensor>>,
    activations: bool,
}

impl<'g> Executor<'g> {
    /// Exact float semantics, ignoring any quantizers attached to the graph.
    pub fn float(graph: &'g Graph) -> Self {
        Self {
            graph,
            weights: vec![None; graph.nodes.len()],
            activations: false,
        }
    }

    /// Simulated quantization of whatever the graph's scope covers.
    pub fn quantized(graph: &'g Graph) -> Result<Self> {
        graph.check_quantized()?;
        let scope = graph.scope.expect("checked");
        let weights = graph
            .nodes
            .iter()
            .map(|n| match (&n.weight_quant, n.op.weight()) {
                (Some(wq), Some(w)) if scope.weights => Some(quantize_weight(w, wq)),
                _ => None,
            })
            .collect();
        Ok(Self {
            graph,
            weights,
            activations: scope.activations,
        })
    }

    /// Float for float graphs, quantized otherwise.
    pub fn for_graph(graph: &'g Graph) -> Result<Self> {
        if graph.is_quantized() {
            Self::quantized(graph)
        } else {
            Ok(Self::float(graph))
        }
    }

    pub fn graph(&self) -> &Graph {
        self.graph
    }

    fn fake_quant(&self, t: Tensor, spec: Option<&QuantSpec>) -> Tensor {
        match spec {
            Some(s) if self.activations => quantize_tensor(&t, s),
            _ => t,
        }
    }

    pub fn run(&self, x: &Tensor) -> Result<ExecutionTrace> {
        let g = self.graph;
        if x.dims() != g.input.shape.as_slice() {
            return Err(Error::Shape(format!(
                "input has shape {:?}, graph expects {:?}",
                x.dims(),
                g.input.shape
            )));
        }
        if !x.all_finite() {
            return Err(Error::NonFinite {
                layer: g.input.name.clone(),
            });
        }
        let mut tensors = BTreeMap::new();
        tensors.insert(
            g.input.name.clone(),
            self.fake_quant(x.clone(), g.input.quant.as_ref()),
        );
        for (i, node) in g.nodes.iter().enumerate() {
            let arg = |k: usize| -> Result<&Tensor> {
                let name = &node.inputs[k];
                tensors
                    .get(name)
                    .ok_or_else(|| Error::Ir(IrError::MissingTensor(name.clone())))
            };
            let x = arg(0)?;
            let y = match &node.op {
                Op::Conv2d(c) => ops::conv2d(x, c, self.weights[i].as_ref().unwrap_or(&c.weight)),
                Op::DepthwiseConv2d(c) => {
                    ops::depthwise_conv2d(x, c, self.weights[i].as_ref().unwrap_or(&c.weight))
                }
                Op::Dense(d) => ops::dense(x, self.weights[i].as_ref().unwrap_or(&d.weight), &d.bias),
                Op::BatchNorm(bn) => ops::batch_norm(x, bn),
                Op::Activation(a) => ops::activation(x, a),
                Op::Add => ops::add(x, arg(1)?),
                Op::GlobalAvgPool => ops::global_avg_pool(x),
                Op::MaxPool(p) => ops::max_pool(x, p),
                Op::Flatten => ops::flatten(x),
                Op::Softmax => ops::softmax(x),
            };
            if !y.all_finite() {
                return Err(Error::NonFinite {
                    layer: node.name.clone(),
                });
            }
            let y = self.fake_quant(y, node.quant.as_ref());
            tensors.insert(node.output.clone(), y);
        }
        let outputs = g
            .outputs
            .iter()
            .map(|o| {
                tensors
                    .get(o)
                    .cloned()
                    .ok_or_else(|| Error::Ir(IrError::MissingTensor(o.clone())))
            })
            .collect::<Result<_>>()?;
        Ok(ExecutionTrace { tensors, outputs })
    }
}

pub fn run_float(g: &Graph, x: &Tensor) -> Result<ExecutionTrace> {
    Executor::float(g).run(x)
}

/// Errors if the graph lacks any quantizer its scope requires.
pub fn run_quantized(g: &Graph, x: &Tensor) -> Result<ExecutionTrace> {
    Executor::quantized(g)?.run(x)
}
