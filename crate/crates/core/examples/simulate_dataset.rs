//! Simulates a small multi-coil dataset, saves it and loads it back.
//!
//! cargo run --release --example simulate_dataset

use spic_ssdu::data::{build_dataset, load_dataset, save_dataset, NoiseSpec};

fn main() -> spic_ssdu::Result<()> {
    let noise = NoiseSpec { sigma: 0.003, seed: 1 };
    let ds = build_dataset(4, 64, 64, 8, noise, 42)?;
    for (i, s) in ds.slices.iter().enumerate() {
        println!(
            "slice {i}: peak |x| = {:.3}, coil normalization error = {:.2e}, k-space energy = {:.3}",
            s.ground_truth.max_magnitude(),
            s.coils.normalization_error(),
            s.full_kspace.data().iter().map(|v| v.norm_sqr()).sum::<f64>()
        );
    }
    let path = std::env::temp_dir().join("spic_example_dataset.bin");
    save_dataset(&ds, &path)?;
    let back = load_dataset(&path)?;
    println!(
        "saved and reloaded {} slices of {}x{}; identical: {}",
        back.len(),
        back.rows(),
        back.cols(),
        back.slices[0].full_kspace.data() == ds.slices[0].full_kspace.data()
    );
    Ok(())
}
