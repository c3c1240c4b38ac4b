//! Regenerates the bundled test fixtures.
//!
//! Usage: `hptq-fixture [OUT_DIR]` (default `crates/core/tests/fixtures`).

use std::path::PathBuf;

use anyhow::{ensure, Context};
use hptq::ir::{save_dataset, save_model};
use hptq_fixture::{accuracy, build_graph, conv_bn_relu, forward, single_dense, to_set, train, Generator};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 20_240_601;
const TRAIN: usize = 4000;
const CALIB: usize = 500;
const TEST: usize = 2000;
const EPOCHS: usize = 12;
const REFERENCE: usize = 16;

fn main() -> anyhow::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("crates/core/tests/fixtures"));
    std::fs::create_dir_all(&out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let generator = Generator::new(&mut rng);
    let (train_x, train_y) = generator.dataset(TRAIN, &mut rng);
    let (calib_x, _) = generator.dataset(CALIB, &mut rng);
    let (test_x, test_y) = generator.dataset(TEST, &mut rng);

    let params = train(&train_x, &train_y, EPOCHS, &mut rng);
    let train_acc = accuracy(&params, &train_x, &train_y);
    let test_acc = accuracy(&params, &test_x, &test_y);
    eprintln!("float accuracy: train {train_acc:.4}, test {test_acc:.4}");
    ensure!(test_acc >= 0.9, "fixture CNN only reaches {test_acc:.4} test accuracy");

    let cnn = build_graph(&params, &mut rng)?;
    save_model(&cnn, &out.join("cnn")).context("writing cnn")?;
    save_dataset(&to_set(&calib_x, None), &out.join("calib")).context("writing calib")?;
    save_dataset(&to_set(&test_x, Some(&test_y)), &out.join("test")).context("writing test")?;

    // Logits of the training-time implementation, before the graph rewrite.
    let logits: Vec<Vec<f64>> = test_x[..REFERENCE].iter().map(|x| forward(&params, x)).collect();
    let reference = serde_json::json!({ "dataset": "test", "first": REFERENCE, "logits": logits });
    std::fs::write(out.join("cnn_reference.json"), serde_json::to_string_pretty(&reference)?)?;

    save_model(&single_dense(6, 4, &mut rng)?, &out.join("single_dense"))?;
    save_model(&conv_bn_relu(5, 5, 2, 4, &mut rng)?, &out.join("conv_bn_relu"))?;
    eprintln!("fixtures written to {}", out.display());
    Ok(())
}
