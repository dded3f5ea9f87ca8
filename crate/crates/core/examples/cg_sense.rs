//! CG-SENSE recovers a noiseless phantom at R=2 and shows the residual trace.
//!
//! cargo run --release --example cg_sense

use spic_ssdu::cg::cg_normal;
use spic_ssdu::data::{build_dataset, NoiseSpec};
use spic_ssdu::encoding::adjoint;
use spic_ssdu::sampling::equidistant_mask;

fn main() -> spic_ssdu::Result<()> {
    let ds = build_dataset(1, 64, 64, 8, NoiseSpec::noiseless(), 3)?;
    let s = &ds.slices[0];
    for r in [2, 4] {
        let m = equidistant_mask(64, 64, r, 8)?;
        let y = s.full_kspace.masked(&m);
        let zero_filled = adjoint(&y, &s.coils, &m)?;
        let sol = cg_normal(&y, &s.coils, &m, 0.0, None, 200, 1e-12, None)?;
        println!(
            "R={r}: adjoint error {:.3e}, CG-SENSE error {:.3e} after {} iterations",
            zero_filled.relative_error(&s.ground_truth)?,
            sol.image.relative_error(&s.ground_truth)?,
            sol.iterations
        );
        let trace: Vec<String> = sol.residual_norms.iter().step_by(20).map(|v| format!("{v:.1e}")).collect();
        println!("  residual every 20 iterations: {}", trace.join(" "));
    }
    Ok(())
}
