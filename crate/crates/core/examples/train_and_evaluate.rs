//! Trains a small SPIC-SSDU model, then evaluates the saved checkpoint.
//!
//! cargo run --release --example train_and_evaluate

use spic_ssdu::data::{build_dataset, save_dataset, NoiseSpec};
use spic_ssdu::harness::{evaluate, prepare_data, train_with, ExperimentConfig};

fn main() -> spic_ssdu::Result<()> {
    let out = std::env::temp_dir().join("spic_example_train");
    let mut cfg = ExperimentConfig::from_json(
        r#"{"dataset": {"n_train": 8, "n_test": 4, "rows": 32, "cols": 32, "coils": 4},
            "mask": {"acceleration": 2, "acs": 4},
            "model": {"steps": 3, "cg_iters": 6, "blocks": 2, "channels": 8},
            "loss": {"method": "spicssdu"},
            "optim": {"steps": 20, "lr": 1e-3, "validate_every": 10, "n_validation": 2}}"#,
    )?;
    cfg.output.dir = out.clone();
    let data = prepare_data(&cfg)?;
    let t = train_with(&cfg, &data, &out)?;
    println!("loss: first {:.4}, last {:.4}", t.losses[0], t.losses.last().unwrap());
    for (step, psnr) in &t.validation {
        println!("validation after step {step}: {psnr:.2} dB");
    }
    let test = build_dataset(4, 32, 32, 4, NoiseSpec { sigma: 0.003, seed: 99 }, 99)?;
    let test_path = out.join("test.bin");
    save_dataset(&test, &test_path)?;
    let report = evaluate(&t.checkpoint, &test_path, &cfg.mask, out.join("eval"), 2)?;
    print!("{}", report.to_csv());
    println!("artifacts in {}", out.display());
    Ok(())
}
