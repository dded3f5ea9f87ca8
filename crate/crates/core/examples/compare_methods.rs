//! Trains every method on the desk benchmark from one initialization and
//! prints the comparison table.
//!
//! cargo run --release --example compare_methods -- [config.json] [out_dir]

use std::path::PathBuf;

use spic_ssdu::harness::{prepare_data, run_comparison, ExperimentConfig};
use spic_ssdu::losses::Method;

fn main() -> spic_ssdu::Result<()> {
    let mut args = std::env::args().skip(1);
    let config = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/desk_benchmark.json")));
    let cfg = ExperimentConfig::load(&config)?;
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| cfg.output.dir.clone());
    let data = prepare_data(&cfg)?;
    let methods: Vec<_> = [Method::Supervised, Method::Mmssdu, Method::Ulim, Method::Ccssdu, Method::Spicssdu]
        .into_iter()
        .map(|m| (m, None))
        .collect();
    let deltas = [("spicssdu".to_string(), "mmssdu".to_string()), ("supervised".to_string(), "zerofilled".to_string())];
    let t0 = std::time::Instant::now();
    let report = run_comparison(&cfg, &data, &methods, &deltas, &out)?;
    print!("{}", std::fs::read_to_string(&report.comparison_csv)?);
    eprintln!("elapsed {:.1} s", t0.elapsed().as_secs_f64());
    Ok(())
}
