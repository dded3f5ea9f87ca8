//! Weighted-l1 versus l2 perturbation consistency from a shared init.
//!
//! cargo run --release --example ablation -- [config.json]

use spic_ssdu::harness::{prepare_data, run_ablation_with, ExperimentConfig};

fn main() -> spic_ssdu::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let mut c = ExperimentConfig::from_json(
                r#"{"dataset": {"n_train": 8, "n_test": 4, "rows": 32, "cols": 32, "coils": 4},
                    "mask": {"acceleration": 2, "acs": 4},
                    "model": {"steps": 3, "cg_iters": 6, "blocks": 2, "channels": 8},
                    "optim": {"steps": 10, "lr": 1e-3, "validate_every": 0}}"#,
            )?;
            c.output.dir = std::env::temp_dir().join("spic_example_ablation");
            c
        }
    };
    let data = prepare_data(&cfg)?;
    let report = run_ablation_with(&cfg, &data, &cfg.output.dir)?;
    print!("{}", std::fs::read_to_string(&report.comparison_csv)?);
    println!("report and panels in {}", cfg.output.dir.display());
    Ok(())
}
