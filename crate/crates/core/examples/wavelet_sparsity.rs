//! Dual-tree wavelet round trip and the weighted-l1 consistency measure.
//!
//! cargo run --release --example wavelet_sparsity

use spic_ssdu::data::{build_dataset, NoiseSpec};
use spic_ssdu::perturbation::generate_perturbation_within;
use spic_ssdu::sparsity::{pic_l2, weighted_l1, WeightedL1};
use spic_ssdu::wavelet::{wavelet_forward, wavelet_inverse, WaveletKind};

fn main() -> spic_ssdu::Result<()> {
    let ds = build_dataset(1, 64, 64, 8, NoiseSpec::noiseless(), 9)?;
    let x = &ds.slices[0].ground_truth;
    let c = wavelet_forward(x, 3, WaveletKind::Dtcwt)?;
    let back = wavelet_inverse(&c)?;
    println!("{} coefficients, reconstruction error {:.2e}", c.count(), back.relative_error(x)?);

    let p = generate_perturbation_within(ds.slices[0].coils.support(), 4, 3, 0.5, 1)?;
    let w = WeightedL1::new(&p.p, 3, WaveletKind::Dtcwt, 1e-4)?;
    let shifted = spic_ssdu::ComplexImage::from_fn(64, 64, |i, j| p.p.get((i + 16) % 64, j));
    println!("weighted l1 of zero      {:.4}", w.value(&spic_ssdu::ComplexImage::zeros(64, 64))?);
    println!("weighted l1 of p itself  {:.4} (support fraction)", w.value(&p.p)?);
    println!("weighted l1 of aliased p {:.4}", weighted_l1(&shifted, &p.p, 3, WaveletKind::Dtcwt, 1e-4)?);
    println!("l2 of aliased p          {:.4}", pic_l2(&shifted, &p.p)?);
    Ok(())
}
