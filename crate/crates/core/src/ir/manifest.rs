use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::blob::{self, Payload, Record};
use super::{
    Activation, BatchNorm, CalibrationSet, Conv2d, Dense, Graph, GraphInput, IrError, Node, NodeId,
    Op, Padding, Pool, QuantScope, SourceMap, WeightQuant, FORMAT_VERSION, MANIFEST_FILE,
    TENSORS_FILE,
};
use crate::quantizers::QuantSpec;
use crate::tensor::{Layout, Tensor};

const GRAPH_FORMAT: &str = "hptq.graph";
const DATASET_FORMAT: &str = "hptq.dataset";

#[derive(Serialize, Deserialize)]
struct GraphManifest {
    format: String,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quantization: Option<QuantScope>,
    input: InputEntry,
    outputs: Vec<String>,
    nodes: Vec<NodeEntry>,
}

#[derive(Serialize, Deserialize)]
struct InputEntry {
    name: String,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quant: Option<QuantSpec>,
}

#[derive(Serialize, Deserialize)]
struct WeightQuantEntry {
    bits: u32,
    /// Blob tensor holding one i8 exponent per output channel.
    exponents: String,
}

#[derive(Default, Serialize, Deserialize)]
struct NodeEntry {
    id: NodeId,
    name: String,
    op: String,
    inputs: Vec<String>,
    output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<Padding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pad_value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pool_size: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    activation: Option<Activation>,
    /// Parameter role (`weight`, `bias`, `gamma`, ...) to blob tensor name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    tensors: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quant: Option<QuantSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight_quant: Option<WeightQuantEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_map: Option<SourceMap>,
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    version: u32,
    samples: usize,
    input_shape: Vec<usize>,
    inputs: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    preprocessing: Option<serde_json::Value>,
}

impl Graph {
    /// Verifies that every quantizer the graph's scope promises is present.
    pub fn check_quantized(&self) -> Result<(), IrError> {
        let scope = self
            .scope
            .ok_or_else(|| IrError::MissingQuantization("<graph>".into()))?;
        if scope.activations {
            for t in self.quantization_points() {
                let present = if t == self.input.name {
                    self.input.quant.is_some()
                } else {
                    self.producer(&t).is_some_and(|n| n.quant.is_some())
                };
                if !present {
                    return Err(IrError::MissingQuantization(t));
                }
            }
        }
        if scope.weights {
            for n in self.linear_nodes() {
                let channels = n.op.weight().and_then(|w| w.dims().last().copied());
                match &n.weight_quant {
                    Some(wq) if Some(wq.exponents.len()) == channels => {}
                    _ => return Err(IrError::MissingQuantization(n.name.clone())),
                }
            }
        }
        Ok(())
    }
}

fn write_container(dir: &Path, manifest: &impl Serialize, records: &[Record]) -> Result<(), IrError> {
    fs::create_dir_all(dir)?;
    let mut json = serde_json::to_string_pretty(manifest)?;
    json.push('\n');
    fs::write(dir.join(MANIFEST_FILE), json)?;
    blob::write(&dir.join(TENSORS_FILE), records)
}

fn read_container<M: for<'de> Deserialize<'de>>(dir: &Path) -> Result<(M, HashMap<String, Record>), IrError> {
    let manifest: M = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let records = blob::read(&dir.join(TENSORS_FILE))?
        .into_iter()
        .map(|r| (r.name.clone(), r))
        .collect();
    Ok((manifest, records))
}

fn check_format(found: &str, expected: &str, version: u32) -> Result<(), IrError> {
    if found != expected {
        return Err(IrError::InvalidAttribute {
            node: "<manifest>".into(),
            reason: format!("format `{found}`, expected `{expected}`"),
        });
    }
    if version != FORMAT_VERSION {
        return Err(IrError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    Ok(())
}

/// Writes a graph with f32 payloads. Quantizer attributes, if any, are kept.
pub fn save_model(g: &Graph, dir: &Path) -> Result<(), IrError> {
    write_graph(g, dir, false)
}

/// Writes a quantized graph: weights become 8-bit integers plus a per-channel
/// exponent array, activation quantizers go into the manifest.
pub fn save_quantized(g: &Graph, dir: &Path) -> Result<(), IrError> {
    g.check_quantized()?;
    write_graph(g, dir, true)
}

fn write_graph(g: &Graph, dir: &Path, integer_weights: bool) -> Result<(), IrError> {
    let mut records = Vec::new();
    let mut nodes = Vec::with_capacity(g.nodes.len());
    for n in &g.nodes {
        let mut e = NodeEntry {
            id: n.id,
            name: n.name.clone(),
            op: n.op.name().to_string(),
            inputs: n.inputs.clone(),
            output: n.output.clone(),
            quant: n.quant,
            source_map: n.source_map.clone(),
            ..Default::default()
        };
        let mut param = |role: &str, dims: Vec<usize>, data: &[f64], records: &mut Vec<Record>| {
            let tname = format!("{}.{role}", n.name);
            records.push(Record::f32(tname.clone(), dims, data));
            e.tensors.insert(role.to_string(), tname);
        };
        match &n.op {
            Op::Conv2d(c) | Op::DepthwiseConv2d(c) => {
                e.stride = Some(c.stride);
                e.padding = Some(c.padding);
                e.pad_value = Some(c.pad_value);
                param("bias", vec![c.bias.len()], &c.bias, &mut records);
            }
            Op::Dense(d) => param("bias", vec![d.bias.len()], &d.bias, &mut records),
            Op::BatchNorm(bn) => {
                e.epsilon = Some(bn.epsilon);
                let c = bn.gamma.len();
                param("gamma", vec![c], &bn.gamma, &mut records);
                param("beta", vec![c], &bn.beta, &mut records);
                param("mean", vec![c], &bn.mean, &mut records);
                param("var", vec![c], &bn.var, &mut records);
            }
            Op::Activation(a) => e.activation = Some(a.clone()),
            Op::MaxPool(p) => {
                e.pool_size = Some(p.size);
                e.stride = Some(p.stride);
                e.padding = Some(p.padding);
            }
            Op::Add | Op::GlobalAvgPool | Op::Flatten | Op::Softmax => {}
        }
        if let Some(w) = n.op.weight() {
            let wname = format!("{}.weight", n.name);
            match (&n.weight_quant, integer_weights) {
                (Some(wq), true) => {
                    if wq.bits > 8 {
                        return Err(IrError::InvalidAttribute {
                            node: n.name.clone(),
                            reason: format!("{}-bit weights do not fit 8-bit storage", wq.bits),
                        });
                    }
                    let c = wq.exponents.len();
                    let ints = w
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| wq.spec(i % c).quantize_int(x) as i8)
                        .collect();
                    records.push(Record::i8(wname.clone(), w.dims().to_vec(), ints));
                }
                _ => records.push(Record::f32(wname.clone(), w.dims().to_vec(), w.data())),
            }
            e.tensors.insert("weight".into(), wname);
        }
        if let Some(wq) = &n.weight_quant {
            let ename = format!("{}.weight_exponents", n.name);
            let exps = wq
                .exponents
                .iter()
                .map(|&x| {
                    i8::try_from(x).map_err(|_| IrError::InvalidAttribute {
                        node: n.name.clone(),
                        reason: format!("exponent {x} does not fit i8"),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            records.push(Record::i8(ename.clone(), vec![exps.len()], exps));
            e.weight_quant = Some(WeightQuantEntry {
                bits: wq.bits,
                exponents: ename,
            });
        }
        nodes.push(e);
    }
    let manifest = GraphManifest {
        format: GRAPH_FORMAT.into(),
        version: FORMAT_VERSION,
        quantization: g.scope,
        input: InputEntry {
            name: g.input.name.clone(),
            shape: g.input.shape.clone(),
            quant: g.input.quant,
        },
        outputs: g.outputs.clone(),
        nodes,
    };
    write_container(dir, &manifest, &records)
}

struct Params<'a> {
    node: &'a str,
    roles: &'a BTreeMap<String, String>,
    records: &'a HashMap<String, Record>,
}

impl Params<'_> {
    fn record(&self, role: &str) -> Result<&Record, IrError> {
        let name = self.roles.get(role).ok_or_else(|| IrError::InvalidAttribute {
            node: self.node.into(),
            reason: format!("no `{role}` tensor"),
        })?;
        self.records
            .get(name)
            .ok_or_else(|| IrError::MissingTensor(name.clone()))
    }

    fn vector(&self, role: &str) -> Result<Vec<f64>, IrError> {
        let r = self.record(role)?;
        if r.dims.len() != 1 {
            return Err(IrError::ShapeMismatch(format!(
                "`{}.{role}` has dims {:?}, expected a vector",
                self.node, r.dims
            )));
        }
        Ok(r.payload.to_f64())
    }

    fn tensor(&self, role: &str, rank: usize) -> Result<Tensor, IrError> {
        let r = self.record(role)?;
        if r.dims.len() != rank {
            return Err(IrError::ShapeMismatch(format!(
                "`{}.{role}` has rank {}, expected {rank}",
                self.node,
                r.dims.len()
            )));
        }
        Tensor::new(r.dims.clone(), r.payload.to_f64(), Layout::Weight)
            .map_err(|e| IrError::ShapeMismatch(format!("`{}.{role}`: {e}", self.node)))
    }
}

fn required<T>(v: Option<T>, node: &str, what: &str) -> Result<T, IrError> {
    v.ok_or_else(|| IrError::InvalidAttribute {
        node: node.into(),
        reason: format!("missing `{what}`"),
    })
}

/// Loads and validates a graph container (float or quantized).
pub fn load_model(dir: &Path) -> Result<Graph, IrError> {
    let (m, records): (GraphManifest, _) = read_container(dir)?;
    check_format(&m.format, GRAPH_FORMAT, m.version)?;
    let mut nodes = Vec::with_capacity(m.nodes.len());
    for e in m.nodes {
        let p = Params {
            node: &e.name,
            roles: &e.tensors,
            records: &records,
        };
        let conv = |e: &NodeEntry| -> Result<Conv2d, IrError> {
            Ok(Conv2d {
                weight: p.tensor("weight", 4)?,
                bias: p.vector("bias")?,
                stride: required(e.stride, &e.name, "stride")?,
                padding: required(e.padding, &e.name, "padding")?,
                pad_value: e.pad_value.unwrap_or(0.0),
            })
        };
        let op = match e.op.as_str() {
            "conv2d" => Op::Conv2d(conv(&e)?),
            "depthwise_conv2d" => Op::DepthwiseConv2d(conv(&e)?),
            "dense" => Op::Dense(Dense {
                weight: p.tensor("weight", 2)?,
                bias: p.vector("bias")?,
            }),
            "batch_norm" => Op::BatchNorm(BatchNorm {
                gamma: p.vector("gamma")?,
                beta: p.vector("beta")?,
                mean: p.vector("mean")?,
                var: p.vector("var")?,
                epsilon: required(e.epsilon, &e.name, "epsilon")?,
            }),
            "activation" => Op::Activation(required(e.activation.clone(), &e.name, "activation")?),
            "add" => Op::Add,
            "global_avg_pool" => Op::GlobalAvgPool,
            "max_pool" => Op::MaxPool(Pool {
                size: required(e.pool_size, &e.name, "pool_size")?,
                stride: required(e.stride, &e.name, "stride")?,
                padding: required(e.padding, &e.name, "padding")?,
            }),
            "flatten" => Op::Flatten,
            "softmax" => Op::Softmax,
            other => return Err(IrError::UnsupportedOp(other.to_string())),
        };
        let weight_quant = match &e.weight_quant {
            None => None,
            Some(wq) => {
                let r = records
                    .get(&wq.exponents)
                    .ok_or_else(|| IrError::MissingTensor(wq.exponents.clone()))?;
                let exponents = r.payload.to_f64().into_iter().map(|x| x as i32).collect();
                Some(WeightQuant {
                    bits: wq.bits,
                    exponents,
                })
            }
        };
        let mut node = Node {
            id: e.id,
            name: e.name.clone(),
            op,
            inputs: e.inputs,
            output: e.output,
            quant: e.quant,
            weight_quant,
            source_map: e.source_map,
        };
        // integer weights are stored as grid indices
        if let (Some(wq), Some(w)) = (&node.weight_quant, node.op.weight_mut()) {
            let integer = p.record("weight")?.payload.dtype_code() == 1;
            if integer {
                let c = *w.dims().last().unwrap();
                if wq.exponents.len() != c {
                    return Err(IrError::ShapeMismatch(format!(
                        "`{}` has {} exponents for {c} channels",
                        e.name,
                        wq.exponents.len()
                    )));
                }
                for (i, v) in w.data_mut().iter_mut().enumerate() {
                    *v = wq.spec(i % c).dequantize(*v as i64);
                }
            }
        } else if p.roles.contains_key("weight") && p.record("weight")?.payload.dtype_code() == 1 {
            return Err(IrError::MissingQuantization(e.name.clone()));
        }
        nodes.push(node);
    }
    let input = GraphInput {
        name: m.input.name,
        shape: m.input.shape,
        quant: m.input.quant,
    };
    let mut g = Graph::new(input, m.outputs, nodes)?;
    g.scope = m.quantization;
    if g.scope.is_some() {
        g.check_quantized()?;
    }
    Ok(g)
}

/// Writes a calibration/evaluation dataset container.
pub fn save_dataset(d: &CalibrationSet, dir: &Path) -> Result<(), IrError> {
    let first = d
        .samples
        .first()
        .ok_or_else(|| IrError::ShapeMismatch("dataset has no samples".into()))?;
    let shape = first.dims().to_vec();
    let mut data = Vec::with_capacity(d.len() * first.len());
    for s in &d.samples {
        if s.dims() != shape.as_slice() {
            return Err(IrError::ShapeMismatch(format!(
                "sample dims {:?} differ from {shape:?}",
                s.dims()
            )));
        }
        data.extend_from_slice(s.data());
    }
    let mut dims = vec![d.len()];
    dims.extend_from_slice(&shape);
    let mut records = vec![Record::f32("inputs", dims, &data)];
    if let Some(labels) = &d.labels {
        if labels.len() != d.len() {
            return Err(IrError::ShapeMismatch(format!(
                "{} labels for {} samples",
                labels.len(),
                d.len()
            )));
        }
        let l: Vec<f64> = labels.iter().map(|&x| f64::from(x)).collect();
        records.push(Record::f32("labels", vec![l.len()], &l));
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: FORMAT_VERSION,
        samples: d.len(),
        input_shape: shape,
        inputs: "inputs".into(),
        labels: d.labels.as_ref().map(|_| "labels".into()),
        preprocessing: d.preprocessing.clone(),
    };
    write_container(dir, &manifest, &records)
}

pub fn load_dataset(dir: &Path) -> Result<CalibrationSet, IrError> {
    let (m, records): (DatasetManifest, _) = read_container(dir)?;
    check_format(&m.format, DATASET_FORMAT, m.version)?;
    let inputs = records
        .get(&m.inputs)
        .ok_or_else(|| IrError::MissingTensor(m.inputs.clone()))?;
    let mut expect = vec![m.samples];
    expect.extend_from_slice(&m.input_shape);
    if inputs.dims != expect || m.input_shape.contains(&0) {
        return Err(IrError::ShapeMismatch(format!(
            "inputs tensor {:?}, manifest says {expect:?}",
            inputs.dims
        )));
    }
    let Payload::F32(values) = &inputs.payload else {
        return Err(IrError::UnknownDtype(inputs.payload.dtype_code()));
    };
    let per = m.input_shape.iter().product::<usize>().max(1);
    let samples = values
        .chunks_exact(per)
        .map(|c| {
            Tensor::new(
                m.input_shape.clone(),
                c.iter().map(|&x| f64::from(x)).collect(),
                Layout::Activation,
            )
            .expect("dims checked above")
        })
        .collect::<Vec<_>>();
    let labels = match &m.labels {
        None => None,
        Some(name) => {
            let r = records
                .get(name)
                .ok_or_else(|| IrError::MissingTensor(name.clone()))?;
            if r.dims != [m.samples] {
                return Err(IrError::ShapeMismatch(format!(
                    "labels tensor {:?} for {} samples",
                    r.dims, m.samples
                )));
            }
            let labels = r
                .payload
                .to_f64()
                .into_iter()
                .map(|x| {
                    (x >= 0.0 && x.fract() == 0.0 && x <= f64::from(u32::MAX))
                        .then_some(x as u32)
                        .ok_or_else(|| IrError::InvalidAttribute {
                            node: name.clone(),
                            reason: format!("label {x} is not a class index"),
                        })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Some(labels)
        }
    };
    Ok(CalibrationSet {
        samples,
        labels,
        preprocessing: m.preprocessing,
    })
}
