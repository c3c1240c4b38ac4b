//! Bundled fixture models and datasets: loading, round trips, reference
//! outputs and pipeline determinism.

#![allow(clippy::needless_range_loop)]

use std::path::{Path, PathBuf};

use hptq::ir::{load_dataset, load_model, save_dataset, save_model, save_quantized, Op};
use hptq::stats::collect_statistics;
use hptq::{quantize_pipeline, ErrorMeasure, Graph, run_float, run_quantized, CalibrationSet, Layout, PipelineConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn random_set(shape: &[usize], n: usize, seed: u64) -> CalibrationSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len: usize = shape.iter().product();
    CalibrationSet::new(
        (0..n)
            .map(|_| {
                let data = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
                Tensor::new(shape.to_vec(), data, Layout::Activation).unwrap()
            })
            .collect(),
    )
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn single_dense_is_one_node() {
    let g = load_model(&fixture("single_dense")).unwrap();
    assert_eq!(g.nodes.len(), 1);
    assert!(matches!(g.nodes[0].op, Op::Dense(_)));
    assert_eq!(g.input.shape, vec![6]);
}

#[test]
fn conv_bn_relu_shapes() {
    let g = load_model(&fixture("conv_bn_relu")).unwrap();
    let ops: Vec<&str> = g.nodes.iter().map(|n| n.op.name()).collect();
    assert_eq!(ops, ["conv2d", "batch_norm", "activation"]);
    let shapes = g.infer_shapes().unwrap();
    for n in &g.nodes {
        assert_eq!(shapes[&n.output], vec![5, 5, 4], "{}", n.name);
    }
}

#[test]
fn fixtures_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["single_dense", "conv_bn_relu", "cnn"] {
        let g = load_model(&fixture(name)).unwrap();
        let p = dir.path().join(name);
        save_model(&g, &p).unwrap();
        assert_eq!(load_model(&p).unwrap(), g, "{name}");
    }
    for name in ["calib", "test"] {
        let d = load_dataset(&fixture(name)).unwrap();
        let p = dir.path().join(name);
        save_dataset(&d, &p).unwrap();
        assert_eq!(load_dataset(&p).unwrap(), d, "{name}");
        assert_eq!(
            std::fs::read(p.join("tensors.bin")).unwrap(),
            std::fs::read(fixture(name).join("tensors.bin")).unwrap()
        );
    }
}

#[test]
fn datasets_have_expected_sizes() {
    let calib = load_dataset(&fixture("calib")).unwrap();
    let test = load_dataset(&fixture("test")).unwrap();
    assert_eq!(calib.len(), 500);
    assert!(calib.labels.is_none());
    assert_eq!(test.len(), 2000);
    assert!(test.labels.as_ref().unwrap().iter().all(|&l| l < 10));
}

#[test]
fn cnn_matches_training_reference() {
    let g = load_model(&fixture("cnn")).unwrap();
    let test = load_dataset(&fixture("test")).unwrap();
    let text = std::fs::read_to_string(fixture("cnn_reference.json")).unwrap();
    let reference: serde_json::Value = serde_json::from_str(&text).unwrap();
    let logits = reference["logits"].as_array().unwrap();
    assert!(!logits.is_empty());
    for (x, want) in test.samples.iter().zip(logits) {
        let want: Vec<f64> = want.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        let got = run_float(&g, x).unwrap().outputs[0].data().to_vec();
        assert!(max_abs_diff(&got, &want) <= 1e-4, "{got:?} vs {want:?}");
    }
}

#[test]
fn per_channel_means_match_nested_loops() {
    let g = load_model(&fixture("conv_bn_relu")).unwrap();
    let d = random_set(&g.input.shape, 10, 3);
    let stats = collect_statistics(&g, &d, 2048).unwrap();
    let traces: Vec<_> = d.samples.iter().map(|x| run_float(&g, x).unwrap()).collect();
    for name in ["input", "conv", "bn", "relu"] {
        let c = if name == "input" { 2 } else { 4 };
        let mut want = vec![0.0; c];
        let mut count = 0usize;
        for (x, t) in d.samples.iter().zip(&traces) {
            let v = if name == "input" { x } else { &t.tensors[name] };
            for i in 0..5 {
                for j in 0..5 {
                    for k in 0..c {
                        want[k] += v.data()[(i * 5 + j) * c + k];
                    }
                }
            }
            count += 25;
        }
        let got = &stats.get(name).unwrap().per_channel_mean;
        for k in 0..c {
            let w = want[k] / count as f64;
            assert!((got[k] - w).abs() <= 1e-12 * w.abs().max(1e-300), "{name}[{k}]: {} vs {w}", got[k]);
        }
    }
}

/// Worst `max|q - f| / max|f|` over `samples` at `bits`, with no clipping.
fn relative_gap(g: &Graph, calib: &CalibrationSet, samples: &[Tensor], bits: u32) -> f64 {
    let mut cfg = PipelineConfig {
        bits,
        measure: ErrorMeasure::Nc,
        ..PipelineConfig::default()
    };
    cfg.toggles.outlier_removal = false;
    let (q, _) = quantize_pipeline(g, calib, &cfg).unwrap();
    samples
        .iter()
        .map(|x| {
            let f = run_float(g, x).unwrap();
            let r = run_quantized(&q, x).unwrap();
            max_abs_diff(f.outputs[0].data(), r.outputs[0].data()) / f.outputs[0].max_abs().unwrap()
        })
        .fold(0.0, f64::max)
}

#[test]
fn high_resolution_quantization_approaches_float() {
    let cnn = load_model(&fixture("cnn")).unwrap();
    let calib = load_dataset(&fixture("calib")).unwrap();
    let test = load_dataset(&fixture("test")).unwrap();
    let mut cases = vec![(cnn, calib, test.samples[..200].to_vec())];
    for name in ["single_dense", "conv_bn_relu"] {
        let g = load_model(&fixture(name)).unwrap();
        let calib = random_set(&g.input.shape, 50, 1);
        let eval = random_set(&g.input.shape, 50, 2).samples;
        cases.push((g, calib, eval));
    }
    for (g, calib, eval) in &cases {
        let coarse = relative_gap(g, calib, eval, 8);
        let fine = relative_gap(g, calib, eval, 16);
        assert!(fine <= 1e-3, "{fine}");
        assert!(fine < coarse / 16.0, "{fine} vs {coarse}");
    }
}

#[test]
fn pipeline_output_is_byte_identical_across_runs() {
    let g = load_model(&fixture("cnn")).unwrap();
    let calib = load_dataset(&fixture("calib")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for run in 0..2 {
        let (q, report) = quantize_pipeline(&g, &calib, &PipelineConfig::default()).unwrap();
        let p = dir.path().join(format!("q{run}"));
        save_quantized(&q, &p).unwrap();
        outputs.push((
            std::fs::read(p.join("manifest.json")).unwrap(),
            std::fs::read(p.join("tensors.bin")).unwrap(),
            report.to_json(),
        ));
    }
    assert!(outputs[0] == outputs[1]);
}
