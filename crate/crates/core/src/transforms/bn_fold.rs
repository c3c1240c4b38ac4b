use super::scale_output_channels;
use crate::error::{Error, Result};
use crate::ir::{Graph, Op};

/// Folds every batch norm into the linear node feeding it. The linear node
/// takes over the batch norm's output tensor name.
pub fn fold_batch_norm(g: &Graph) -> Result<Graph> {
    let mut out = g.clone();
    let bns: Vec<String> = g
        .nodes
        .iter()
        .filter(|n| matches!(n.op, Op::BatchNorm(_)))
        .map(|n| n.name.clone())
        .collect();
    for name in bns {
        let bn_node = out.node(&name).expect("listed above").clone();
        let Op::BatchNorm(bn) = &bn_node.op else { unreachable!() };
        let src = &bn_node.inputs[0];
        let foldable = out.producer(src).is_some_and(|p| p.op.is_linear())
            && out.consumers(src).len() == 1
            && !out.is_output(src);
        if !foldable {
            return Err(Error::UnfoldableBatchNorm(name));
        }
        let scale: Vec<f64> = bn
            .gamma
            .iter()
            .zip(&bn.var)
            .map(|(g, v)| g / (v + bn.epsilon).sqrt())
            .collect();
        let lin = out
            .nodes
            .iter_mut()
            .find(|n| &n.output == src)
            .expect("producer checked");
        scale_output_channels(lin.op.weight_mut().expect("linear"), |k| scale[k]);
        for (k, b) in lin.op.bias_mut().expect("linear").iter_mut().enumerate() {
            *b = bn.beta[k] + (*b - bn.mean[k]) * scale[k];
        }
        lin.output = bn_node.output.clone();
        out.nodes.retain(|n| n.name != name);
    }
    out.validate()?;
    Ok(out)
}
