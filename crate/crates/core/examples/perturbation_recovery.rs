//! Draws alias-free perturbations and checks that a linear reconstructor
//! returns them from the perturbed measurements.
//!
//! cargo run --release --example perturbation_recovery

use std::sync::Arc;

use spic_ssdu::data::{build_dataset, NoiseSpec};
use spic_ssdu::encoding::EncodingOperator;
use spic_ssdu::losses::{FixedCgSense, Reconstructor};
use spic_ssdu::perturbation::{
    estimate_perturbation, generate_perturbation_within, perturb_measurements, verify_no_overlap,
};
use spic_ssdu::sampling::equidistant_mask;

fn main() -> spic_ssdu::Result<()> {
    let ds = build_dataset(1, 64, 64, 8, NoiseSpec { sigma: 0.003, seed: 2 }, 5)?;
    let s = &ds.slices[0];
    let m = equidistant_mask(64, 64, 4, 8)?;
    let y = s.full_kspace.masked(&m);
    let op = Arc::new(EncodingOperator::new(s.coils.clone(), m.clone())?);
    let f = FixedCgSense { iters: 300 };
    let clean = f.reconstruct(&y, &op)?;
    for seed in 0..5 {
        let p = generate_perturbation_within(s.coils.support(), 4, 3, 0.5, seed)?;
        let verdict = verify_no_overlap(&p, 4, 64);
        let yq = perturb_measurements(&y, &p, &s.coils, &m)?;
        let p_est = estimate_perturbation(&f.reconstruct(&yq, &op)?, &clean)?;
        println!(
            "seed {seed}: rows {}..={}, alias-free {}, recovery error {:.2e}",
            p.support_rows.first().unwrap(),
            p.support_rows.last().unwrap(),
            verdict.disjoint,
            p_est.relative_error(&p.p)?
        );
    }
    Ok(())
}
