//! Calibration statistics: per-tensor histograms, per-channel extremes and
//! means, and z-score outlier removal.
//!
//! Besides counts, every histogram bin keeps the first and second moments of
//! its samples about the bin centre. That lets error estimates treat bins
//! that do not straddle a quantizer decision boundary exactly.

use std::collections::BTreeMap;
use std::io::Write;

use crate::engine::{ops, Executor};
use crate::error::{Error, Result};
use crate::ir::{CalibrationSet, Graph, Op};
use crate::par;
use crate::tensor::Tensor;

pub const DEFAULT_BINS: usize = 2048;

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    edges: Vec<f64>,
    counts: Vec<f64>,
    /// Σ (x − centre) per bin.
    sums: Vec<f64>,
    /// Σ (x − centre)² per bin.
    sq_sums: Vec<f64>,
}

impl Histogram {
    /// Empty histogram with `n_bins` equal bins over `[lo, hi]`. A degenerate
    /// range is widened symmetrically so the edges stay strictly ascending.
    pub fn with_range(lo: f64, hi: f64, n_bins: usize) -> Result<Self> {
        if n_bins == 0 || !lo.is_finite() || !hi.is_finite() || hi < lo {
            return Err(Error::InvalidArgument(format!(
                "histogram over [{lo}, {hi}] with {n_bins} bins"
            )));
        }
        let (lo, hi) = if hi > lo {
            (lo, hi)
        } else {
            let half = (lo.abs() * 1e-6).max(1e-12);
            (lo - half, hi + half)
        };
        let w = (hi - lo) / n_bins as f64;
        let mut edges: Vec<f64> = (0..n_bins).map(|i| lo + i as f64 * w).collect();
        edges.push(hi);
        Ok(Self {
            edges,
            counts: vec![0.0; n_bins],
            sums: vec![0.0; n_bins],
            sq_sums: vec![0.0; n_bins],
        })
    }

    /// Histogram whose mass sits exactly at the bin centres.
    pub fn from_counts(edges: Vec<f64>, counts: Vec<f64>) -> Result<Self> {
        if edges.len() != counts.len() + 1 || counts.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} edges for {} bins",
                edges.len(),
                counts.len()
            )));
        }
        if edges.windows(2).any(|w| !(w[0] < w[1])) || edges.iter().any(|e| !e.is_finite()) {
            return Err(Error::InvalidArgument("edges must be finite and strictly ascending".into()));
        }
        if counts.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
            return Err(Error::InvalidArgument("counts must be finite and non-negative".into()));
        }
        let n = counts.len();
        Ok(Self {
            edges,
            counts,
            sums: vec![0.0; n],
            sq_sums: vec![0.0; n],
        })
    }

    /// Histogram over the exact range of `values`.
    pub fn from_values(values: &[f64], n_bins: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput);
        }
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut h = Self::with_range(lo, hi, n_bins)?;
        values.iter().for_each(|&v| h.add(v));
        Ok(h)
    }

    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    /// Per-bin Σ (x − centre).
    pub fn sums(&self) -> &[f64] {
        &self.sums
    }

    /// Per-bin Σ (x − centre)².
    pub fn sq_sums(&self) -> &[f64] {
        &self.sq_sums
    }

    pub fn center(&self, i: usize) -> f64 {
        0.5 * (self.edges[i] + self.edges[i + 1])
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_bins()).map(|i| self.center(i)).collect()
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    fn bin_index(&self, x: f64) -> usize {
        let lo = self.edges[0];
        let hi = self.edges[self.n_bins()];
        let i = ((x - lo) / (hi - lo) * self.n_bins() as f64).floor();
        (i.max(0.0) as usize).min(self.n_bins() - 1)
    }

    /// Adds one sample; values outside the range land in the edge bins.
    pub fn add(&mut self, x: f64) {
        let i = self.bin_index(x);
        let d = x - self.center(i);
        self.counts[i] += 1.0;
        self.sums[i] += d;
        self.sq_sums[i] += d * d;
    }

    /// Adds another histogram with identical edges.
    pub fn merge(&mut self, other: &Histogram) {
        debug_assert_eq!(self.edges, other.edges);
        for i in 0..self.n_bins() {
            self.counts[i] += other.counts[i];
            self.sums[i] += other.sums[i];
            self.sq_sums[i] += other.sq_sums[i];
        }
    }

    /// Largest `|edge|` of any non-empty bin.
    pub fn support_max_abs(&self) -> f64 {
        (0..self.n_bins())
            .filter(|&i| self.counts[i] > 0.0)
            .map(|i| self.edges[i].abs().max(self.edges[i + 1].abs()))
            .fold(0.0, f64::max)
    }

    fn zero_bin(&mut self, i: usize) {
        self.counts[i] = 0.0;
        self.sums[i] = 0.0;
        self.sq_sums[i] = 0.0;
    }
}

/// Zeroes every bin whose centre lies more than `z_th` count-weighted standard
/// deviations from the count-weighted mean of the bin centres.
pub fn remove_outliers(h: &Histogram, z_th: f64) -> Result<Histogram> {
    if !(z_th > 0.0) {
        return Err(Error::InvalidArgument(format!("z threshold {z_th} must be positive")));
    }
    let total = h.total();
    if total <= 0.0 {
        return Ok(h.clone());
    }
    let centers = h.centers();
    let mean = centers.iter().zip(h.counts()).map(|(x, c)| x * c).sum::<f64>() / total;
    let var = centers
        .iter()
        .zip(h.counts())
        .map(|(x, c)| c * (x - mean) * (x - mean))
        .sum::<f64>()
        / total;
    let sigma = var.sqrt();
    if sigma == 0.0 {
        return Ok(h.clone());
    }
    let mut out = h.clone();
    for (i, x) in centers.iter().enumerate() {
        if (x - mean).abs() / sigma > z_th {
            out.zero_bin(i);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorStats {
    pub histogram: Histogram,
    /// Histogram after outlier removal, when that stage ran.
    pub outlier_filtered: Option<Histogram>,
    pub per_channel_min: Vec<f64>,
    pub per_channel_max: Vec<f64>,
    pub per_channel_mean: Vec<f64>,
    pub tensor_min: f64,
    pub tensor_max: f64,
    pub tensor_max_abs: f64,
    /// Elements observed over the whole calibration set.
    pub count: usize,
}

impl TensorStats {
    /// Histogram used for threshold search.
    pub fn search_histogram(&self) -> &Histogram {
        self.outlier_filtered.as_ref().unwrap_or(&self.histogram)
    }

    /// Largest magnitude the threshold search has to cover.
    pub fn search_max_abs(&self) -> f64 {
        match &self.outlier_filtered {
            Some(h) => h.support_max_abs().min(self.tensor_max_abs),
            None => self.tensor_max_abs,
        }
    }

    /// `max(|min_k|, |max_k|)` per channel.
    pub fn per_channel_max_abs(&self) -> Vec<f64> {
        self.per_channel_min
            .iter()
            .zip(&self.per_channel_max)
            .map(|(a, b)| a.abs().max(b.abs()))
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StatsStore {
    /// Keyed by tensor name; covers the graph input and every node output.
    pub tensors: BTreeMap<String, TensorStats>,
    /// Mean im2col patch (kh×kw×cin, row-major) per convolution node.
    pub patch_means: BTreeMap<String, Vec<f64>>,
}

impl StatsStore {
    pub fn get(&self, tensor: &str) -> Result<&TensorStats> {
        self.tensors
            .get(tensor)
            .ok_or_else(|| Error::MissingStats(tensor.to_string()))
    }

    pub fn patch_mean(&self, node: &str) -> Result<&[f64]> {
        self.patch_means
            .get(node)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingStats(node.to_string()))
    }

    /// Fills `outlier_filtered` for every tensor.
    pub fn apply_outlier_removal(&mut self, z_th: f64) -> Result<()> {
        for s in self.tensors.values_mut() {
            s.outlier_filtered = Some(remove_outliers(&s.histogram, z_th)?);
        }
        Ok(())
    }

    pub fn outlier_removal_applied(&self, tensor: &str) -> bool {
        self.tensors
            .get(tensor)
            .is_some_and(|s| s.outlier_filtered.is_some())
    }

    /// One row per (tensor, channel): `tensor,channel,min,max,mean`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Ir(crate::ir::IrError::Io(e.into()));
        out.write_record(["tensor", "channel", "min", "max", "mean"]).map_err(io)?;
        for (name, s) in &self.tensors {
            for k in 0..s.per_channel_min.len() {
                out.write_record([
                    name.clone(),
                    k.to_string(),
                    s.per_channel_min[k].to_string(),
                    s.per_channel_max[k].to_string(),
                    s.per_channel_mean[k].to_string(),
                ])
                .map_err(io)?;
            }
        }
        out.flush().map_err(|e| Error::Ir(e.into()))?;
        Ok(())
    }
}

struct ChannelAcc {
    min: Vec<f64>,
    max: Vec<f64>,
    sum: Vec<f64>,
    count: usize,
}

impl ChannelAcc {
    fn new(c: usize) -> Self {
        Self {
            min: vec![f64::INFINITY; c],
            max: vec![f64::NEG_INFINITY; c],
            sum: vec![0.0; c],
            count: 0,
        }
    }

    fn add(&mut self, t: &Tensor) {
        let c = self.min.len();
        for row in t.data().chunks_exact(c) {
            for (k, &v) in row.iter().enumerate() {
                self.min[k] = self.min[k].min(v);
                self.max[k] = self.max[k].max(v);
                self.sum[k] += v;
            }
        }
        self.count += t.len();
    }

    fn merge(&mut self, o: &ChannelAcc) {
        for k in 0..self.min.len() {
            self.min[k] = self.min[k].min(o.min[k]);
            self.max[k] = self.max[k].max(o.max[k]);
            self.sum[k] += o.sum[k];
        }
        self.count += o.count;
    }
}

struct PassOne {
    channels: Vec<ChannelAcc>,
    patches: Vec<(Vec<f64>, usize)>,
}

/// Runs the float graph over `d` twice: first for exact extremes, channel
/// means and convolution patch means, then to fill fixed-edge histograms over
/// each tensor's observed range.
pub fn collect_statistics(g: &Graph, d: &CalibrationSet, n_bins: usize) -> Result<StatsStore> {
    if d.is_empty() {
        return Err(Error::EmptyCalibrationSet);
    }
    if n_bins == 0 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }
    let exec = Executor::float(g);
    let shapes = g.infer_shapes()?;
    let names: Vec<&String> = std::iter::once(&g.input.name)
        .chain(g.nodes.iter().map(|n| &n.output))
        .collect();
    let channels: Vec<usize> = names.iter().map(|n| *shapes[*n].last().unwrap()).collect();
    let convs: Vec<(&crate::ir::Node, bool)> = g
        .nodes
        .iter()
        .filter_map(|n| match &n.op {
            Op::Conv2d(_) => Some((n, false)),
            Op::DepthwiseConv2d(_) => Some((n, true)),
            _ => None,
        })
        .collect();

    let patch_lens: Vec<usize> = convs
        .iter()
        .map(|(n, dw)| {
            let wd = n.op.weight().unwrap().dims();
            wd[0] * wd[1] * if *dw { wd[3] } else { wd[2] }
        })
        .collect();

    let partials = par::try_map_chunks(&d.samples, |chunk| -> Result<PassOne> {
        let mut p = PassOne {
            channels: channels.iter().map(|&c| ChannelAcc::new(c)).collect(),
            patches: patch_lens.iter().map(|&n| (vec![0.0; n], 0)).collect(),
        };
        for x in chunk {
            let trace = exec.run(x)?;
            for (acc, name) in p.channels.iter_mut().zip(&names) {
                acc.add(&trace.tensors[*name]);
            }
            for (k, (n, dw)) in convs.iter().enumerate() {
                let (Op::Conv2d(c) | Op::DepthwiseConv2d(c)) = &n.op else { unreachable!() };
                let (sums, positions) = ops::patch_sums(&trace.tensors[&n.inputs[0]], c, *dw);
                p.patches[k].0.iter_mut().zip(&sums).for_each(|(a, b)| *a += b);
                p.patches[k].1 += positions;
            }
        }
        Ok(p)
    })?;
    let mut parts = partials.into_iter();
    let mut first = parts.next().expect("non-empty calibration set");
    for p in parts {
        first.channels.iter_mut().zip(&p.channels).for_each(|(a, b)| a.merge(b));
        for (a, b) in first.patches.iter_mut().zip(&p.patches) {
            a.0.iter_mut().zip(&b.0).for_each(|(x, y)| *x += y);
            a.1 += b.1;
        }
    }

    let ranges: Vec<(f64, f64)> = first
        .channels
        .iter()
        .map(|a| {
            (
                a.min.iter().cloned().fold(f64::INFINITY, f64::min),
                a.max.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            )
        })
        .collect();
    let empty: Vec<Histogram> = ranges
        .iter()
        .map(|&(lo, hi)| Histogram::with_range(lo, hi, n_bins))
        .collect::<Result<_>>()?;

    let hists = par::try_map_chunks(&d.samples, |chunk| -> Result<Vec<Histogram>> {
        let mut hs = empty.clone();
        for x in chunk {
            let trace = exec.run(x)?;
            for (h, name) in hs.iter_mut().zip(&names) {
                trace.tensors[*name].data().iter().for_each(|&v| h.add(v));
            }
        }
        Ok(hs)
    })?;
    let mut hists = hists.into_iter();
    let mut merged = hists.next().expect("non-empty calibration set");
    for hs in hists {
        merged.iter_mut().zip(&hs).for_each(|(a, b)| a.merge(b));
    }

    let mut store = StatsStore::default();
    for ((name, acc), (histogram, &(lo, hi))) in names.iter().zip(first.channels).zip(merged.into_iter().zip(&ranges)) {
        let positions = (acc.count / acc.min.len()) as f64;
        store.tensors.insert(
            (*name).clone(),
            TensorStats {
                histogram,
                outlier_filtered: None,
                per_channel_mean: acc.sum.iter().map(|s| s / positions).collect(),
                per_channel_min: acc.min,
                per_channel_max: acc.max,
                tensor_min: lo,
                tensor_max: hi,
                tensor_max_abs: lo.abs().max(hi.abs()),
                count: acc.count,
            },
        );
    }
    for ((n, _), (sums, positions)) in convs.iter().zip(first.patches) {
        let m = sums.iter().map(|s| s / positions as f64).collect();
        store.patch_means.insert(n.name.clone(), m);
    }
    Ok(store)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::ir::testutil::*;
    use crate::ir::{ActivationKind, Node, Padding};
    use crate::tensor::Layout;
    use proptest::prelude::*;

    fn identity_graph(shape: Vec<usize>) -> Graph {
        Graph::new(
            input(shape),
            vec!["id".into()],
            vec![Node::new(0, "id", act(ActivationKind::Identity), vec!["input".into()])],
        )
        .unwrap()
    }

    #[test]
    fn identity_over_two_samples() {
        let g = identity_graph(vec![1]);
        let d = CalibrationSet::new(vec![Tensor::vector(vec![1.0]), Tensor::vector(vec![3.0])]);
        let s = collect_statistics(&g, &d, 16).unwrap();
        let t = s.get("id").unwrap();
        assert_eq!((t.tensor_min, t.tensor_max, t.per_channel_mean[0]), (1.0, 3.0, 2.0));
        assert_eq!(t.histogram.total(), 2.0);
    }

    #[test]
    fn constant_output_lands_in_one_bin() {
        let g = Graph::new(
            input(vec![2]),
            vec!["fc".into()],
            vec![Node::new(0, "fc", dense(2, 1, vec![0.0, 0.0], vec![3.0]), vec!["input".into()])],
        )
        .unwrap();
        let d = CalibrationSet::new((0..5).map(|i| Tensor::vector(vec![i as f64, -1.0])).collect());
        let s = collect_statistics(&g, &d, DEFAULT_BINS).unwrap();
        let t = s.get("fc").unwrap();
        assert_eq!(t.per_channel_mean, vec![3.0]);
        assert_eq!(t.histogram.counts().iter().filter(|&&c| c > 0.0).count(), 1);
    }

    #[test]
    fn empty_set_is_an_error() {
        let g = identity_graph(vec![1]);
        let err = collect_statistics(&g, &CalibrationSet::new(vec![]), 8).unwrap_err();
        assert_eq!(err.to_string(), "calibration set empty");
    }

    #[test]
    fn non_finite_sample_names_layer() {
        let g = identity_graph(vec![1]);
        let d = CalibrationSet::new(vec![Tensor::vector(vec![f64::NAN])]);
        assert!(matches!(collect_statistics(&g, &d, 8), Err(Error::NonFinite { .. })));
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn conv_channel_means_match_loop_oracle() {
        let mut seed = 11;
        let w = Tensor::new(vec![3, 3, 2, 3], (0..54).map(|_| lcg(&mut seed)).collect(), Layout::Weight).unwrap();
        let g = Graph::new(
            input(vec![5, 5, 2]),
            vec!["conv".into()],
            vec![Node::new(0, "conv", conv(w, vec![0.1, 0.2, -0.3], Padding::Same), vec!["input".into()])],
        )
        .unwrap();
        let samples: Vec<Tensor> = (0..10)
            .map(|_| Tensor::new(vec![5, 5, 2], (0..50).map(|_| lcg(&mut seed)).collect(), Layout::Activation).unwrap())
            .collect();
        let d = CalibrationSet::new(samples.clone());
        let s = collect_statistics(&g, &d, 64).unwrap();
        let mut want = [0.0; 3];
        for x in &samples {
            let y = run_conv(&g, x);
            for pos in 0..25 {
                for k in 0..3 {
                    want[k] += y[pos * 3 + k];
                }
            }
        }
        for k in 0..3 {
            let w = want[k] / 250.0;
            let got = s.get("conv").unwrap().per_channel_mean[k];
            assert!((got - w).abs() <= 1e-12 * w.abs().max(1.0), "{got} vs {w}");
        }
        let t = s.get("conv").unwrap();
        assert_eq!(t.histogram.total(), 250.0 * 3.0);
        assert_eq!(t.count, 750);
        assert_eq!(s.patch_mean("conv").unwrap().len(), 18);
    }

    fn run_conv(g: &Graph, x: &Tensor) -> Vec<f64> {
        crate::engine::run_float(g, x).unwrap().outputs[0].data().to_vec()
    }

    #[test]
    fn outlier_examples() {
        let h = Histogram::from_counts(vec![-500.0, 500.0, 1500.0], vec![1000.0, 1.0]).unwrap();
        let r = remove_outliers(&h, 24.0).unwrap();
        assert_eq!(r.counts(), &[1000.0, 0.0]);
        assert_eq!(r.edges(), h.edges());

        let single = Histogram::from_counts(vec![0.0, 1.0, 2.0], vec![0.0, 7.0]).unwrap();
        assert_eq!(remove_outliers(&single, 0.5).unwrap(), single);
        assert!(remove_outliers(&h, 0.0).is_err());
    }

    #[test]
    fn csv_dump_has_a_row_per_channel() {
        let g = identity_graph(vec![2]);
        let d = CalibrationSet::new(vec![Tensor::vector(vec![1.0, 2.0])]);
        let s = collect_statistics(&g, &d, 4).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 4);
        assert!(text.contains("id,1,2,2,2"));
    }

    proptest! {
        #[test]
        fn outlier_removal_only_zeroes_bins(
            counts in prop::collection::vec(0.0f64..100.0, 2..40),
            z in 0.1f64..5.0,
        ) {
            let edges: Vec<f64> = (0..=counts.len()).map(|i| i as f64).collect();
            let h = Histogram::from_counts(edges, counts.clone()).unwrap();
            let r = remove_outliers(&h, z).unwrap();
            for (a, b) in r.counts().iter().zip(&counts) {
                prop_assert!(*a == *b || *a == 0.0);
            }
            prop_assert_eq!(remove_outliers(&h, f64::INFINITY).unwrap(), h);
        }

        #[test]
        fn histogram_moments_are_consistent(values in prop::collection::vec(-10.0f64..10.0, 1..200)) {
            let h = Histogram::from_values(&values, 32).unwrap();
            prop_assert_eq!(h.total(), values.len() as f64);
            let mean: f64 = values.iter().sum::<f64>() / values.len() as f64;
            let est: f64 = (0..h.n_bins()).map(|i| h.counts()[i] * h.center(i) + h.sums()[i]).sum::<f64>()
                / h.total();
            prop_assert!((mean - est).abs() < 1e-9);
        }
    }
}
