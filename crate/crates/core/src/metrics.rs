//! PSNR and SSIM on magnitude images.

use crate::error::{invalid, shape, Result};
use crate::image::{BoolImage, ComplexImage};

/// Returned for an exact match.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check(reference: &ComplexImage, estimate: &ComplexImage) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    reference.ensure_same_shape(estimate, "estimate")?;
    let a = reference.magnitude();
    let b = estimate.magnitude();
    let peak = a.iter().cloned().fold(0.0, f64::max);
    if peak == 0.0 {
        return invalid("metrics need a nonzero reference");
    }
    Ok((a, b, peak))
}

fn psnr_from(a: &[f64], b: &[f64], peak: f64, keep: impl Fn(usize) -> bool) -> Result<f64> {
    let (mut se, mut n) = (0.0, 0usize);
    for i in (0..a.len()).filter(|&i| keep(i)) {
        se += (a[i] - b[i]).powi(2);
        n += 1;
    }
    if n == 0 {
        return invalid("no pixels selected");
    }
    let rmse = (se / n as f64).sqrt();
    if rmse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((20.0 * (peak / rmse).log10()).min(PSNR_CAP_DB))
}

/// `20·log10(max|ref| / RMSE(|ref|, |est|))`, capped at [`PSNR_CAP_DB`].
pub fn psnr(reference: &ComplexImage, estimate: &ComplexImage) -> Result<f64> {
    let (a, b, peak) = check(reference, estimate)?;
    psnr_from(&a, &b, peak, |_| true)
}

/// [`psnr`] restricted to pixels where `region` is set; the peak is still
/// taken over the whole reference.
pub fn psnr_within(reference: &ComplexImage, estimate: &ComplexImage, region: &BoolImage) -> Result<f64> {
    let (a, b, peak) = check(reference, estimate)?;
    if region.rows != reference.rows() || region.cols != reference.cols() {
        return shape("region does not match the image");
    }
    psnr_from(&a, &b, peak, |i| region.data[i])
}

fn gaussian_taps() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Separable weighted mean over every fully contained window.
fn filter_valid(x: &[f64], rows: usize, cols: usize, taps: &[f64]) -> Vec<f64> {
    let w = taps.len();
    let (out_r, out_c) = (rows - w + 1, cols - w + 1);
    let mut tmp = vec![0.0; rows * out_c];
    for r in 0..rows {
        for c in 0..out_c {
            tmp[r * out_c + c] = taps.iter().enumerate().map(|(k, t)| t * x[r * cols + c + k]).sum();
        }
    }
    let mut out = vec![0.0; out_r * out_c];
    for r in 0..out_r {
        for c in 0..out_c {
            out[r * out_c + c] = taps.iter().enumerate().map(|(k, t)| t * tmp[(r + k) * out_c + c]).sum();
        }
    }
    out
}

/// Local SSIM for every window position, row-major over the valid grid.
/// `range` overrides `L = max|ref|`.
fn ssim_map(reference: &ComplexImage, estimate: &ComplexImage, range: Option<f64>) -> Result<Vec<f64>> {
    let (a, b, own_peak) = check(reference, estimate)?;
    let peak = range.unwrap_or(own_peak);
    let (rows, cols) = (reference.rows(), reference.cols());
    if rows < SSIM_WINDOW || cols < SSIM_WINDOW {
        return invalid(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {rows}x{cols}"));
    }
    let taps = gaussian_taps();
    let prod = |u: &[f64], v: &[f64]| -> Vec<f64> { u.iter().zip(v).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(&a, rows, cols, &taps);
    let mu_b = filter_valid(&b, rows, cols, &taps);
    let aa = filter_valid(&prod(&a, &a), rows, cols, &taps);
    let bb = filter_valid(&prod(&b, &b), rows, cols, &taps);
    let ab = filter_valid(&prod(&a, &b), rows, cols, &taps);
    let c1 = (K1 * peak).powi(2);
    let c2 = (K2 * peak).powi(2);
    Ok((0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .collect())
}

/// Mean local SSIM with an 11×11 Gaussian window (σ = 1.5) over all fully
/// contained windows; `L = max|ref|`.
pub fn ssim(reference: &ComplexImage, estimate: &ComplexImage) -> Result<f64> {
    let map = ssim_map(reference, estimate, None)?;
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

/// PSNR of a stack of slices against the peak of the whole stack.
pub fn volume_psnr(references: &[ComplexImage], estimates: &[ComplexImage]) -> Result<f64> {
    stack_check(references, estimates)?;
    let peak = references.iter().map(|r| r.max_magnitude()).fold(0.0, f64::max);
    if peak == 0.0 {
        return invalid("metrics need a nonzero reference");
    }
    let (mut se, mut n) = (0.0, 0usize);
    for (r, e) in references.iter().zip(estimates) {
        r.ensure_same_shape(e, "estimate")?;
        for (a, b) in r.magnitude().iter().zip(e.magnitude()) {
            se += (a - b).powi(2);
            n += 1;
        }
    }
    let rmse = (se / n as f64).sqrt();
    if rmse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((20.0 * (peak / rmse).log10()).min(PSNR_CAP_DB))
}

/// Mean local SSIM over every slice of a stack with `L` = peak of the stack.
pub fn volume_ssim(references: &[ComplexImage], estimates: &[ComplexImage]) -> Result<f64> {
    stack_check(references, estimates)?;
    let peak = references.iter().map(|r| r.max_magnitude()).fold(0.0, f64::max);
    let (mut sum, mut n) = (0.0, 0usize);
    for (r, e) in references.iter().zip(estimates) {
        let map = ssim_map(r, e, Some(peak))?;
        sum += map.iter().sum::<f64>();
        n += map.len();
    }
    Ok(sum / n as f64)
}

fn stack_check(references: &[ComplexImage], estimates: &[ComplexImage]) -> Result<()> {
    if references.is_empty() || references.len() != estimates.len() {
        return shape(format!("{} references vs {} estimates", references.len(), estimates.len()));
    }
    Ok(())
}

/// [`ssim`] averaged over windows whose center lies in `region`.
pub fn ssim_within(reference: &ComplexImage, estimate: &ComplexImage, region: &BoolImage) -> Result<f64> {
    let (rows, cols) = (reference.rows(), reference.cols());
    if region.rows != rows || region.cols != cols {
        return shape("region does not match the image");
    }
    let map = ssim_map(reference, estimate, None)?;
    let half = SSIM_WINDOW / 2;
    let out_c = cols - SSIM_WINDOW + 1;
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, v) in map.iter().enumerate() {
        let (r, c) = (i / out_c + half, i % out_c + half);
        if region.data[r * cols + c] {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        return invalid("no window centers inside the region");
    }
    Ok(sum / n as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::simulate_phantom;
    use crate::image::C64;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn real(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> ComplexImage {
        ComplexImage::from_fn(rows, cols, |r, c| C64::new(f(r, c), 0.0))
    }

    fn noisy(x: &ComplexImage, std: f64, seed: u64) -> ComplexImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, std).unwrap();
        ComplexImage::new(
            x.rows(),
            x.cols(),
            x.data().iter().map(|v| v + C64::new(n.sample(&mut rng), n.sample(&mut rng))).collect(),
        )
        .unwrap()
    }

    #[test]
    fn psnr_examples() {
        let x = simulate_phantom(32, 32, 1).unwrap();
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP_DB);
        // Peak 1, every pixel off by 0.1: MSE = 0.01.
        let a = real(16, 16, |r, c| if r == 0 && c == 0 { 1.0 } else { 0.5 });
        let b = real(16, 16, |r, c| if r == 0 && c == 0 { 1.1 } else { 0.6 });
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let y = noisy(&x, 0.05, 2);
        let joint = psnr(&x.scale(2.0), &y.scale(2.0)).unwrap();
        assert!((joint - psnr(&x, &y).unwrap()).abs() < 1e-10);
        assert!(psnr(&ComplexImage::zeros(32, 32), &x).is_err());
    }

    #[test]
    fn psnr_decreases_with_error() {
        let x = simulate_phantom(32, 32, 3).unwrap();
        let mut last = f64::INFINITY;
        for k in 1..6 {
            let v = psnr(&x, &x.scale(1.0 + 0.05 * k as f64)).unwrap();
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn ssim_identity_and_noise_trend() {
        let x = simulate_phantom(32, 32, 4).unwrap();
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        let mut last = 1.0;
        for (k, std) in [0.02, 0.05, 0.1, 0.2, 0.4].iter().enumerate() {
            let v = ssim(&x, &noisy(&x, *std, 10 + k as u64)).unwrap();
            assert!(v < last, "{std}: {v} !< {last}");
            last = v;
        }
        assert!(ssim(&ComplexImage::zeros(10, 40), &ComplexImage::zeros(10, 40)).is_err());
    }

    #[test]
    fn ssim_on_constant_images_is_luminance_term() {
        let (m1, m2) = (0.8, 0.3);
        let a = real(16, 16, |_, _| m1);
        let b = real(16, 16, |_, _| m2);
        let c1 = (K1 * m1).powi(2);
        let oracle = (2.0 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1);
        assert!((ssim(&a, &b).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn region_variants_agree_on_full_region() {
        let x = simulate_phantom(32, 32, 5).unwrap();
        let y = noisy(&x, 0.1, 6);
        let all = BoolImage::filled(32, 32, true);
        assert_eq!(psnr_within(&x, &y, &all).unwrap(), psnr(&x, &y).unwrap());
        assert!((ssim_within(&x, &y, &all).unwrap() - ssim(&x, &y).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn volume_metrics_reduce_to_slice_metrics_for_one_slice() {
        let x = simulate_phantom(32, 32, 7).unwrap();
        let y = noisy(&x, 0.1, 8);
        let v = [x.clone()];
        let e = [y.clone()];
        assert!((volume_psnr(&v, &e).unwrap() - psnr(&x, &y).unwrap()).abs() < 1e-12);
        assert!((volume_ssim(&v, &e).unwrap() - ssim(&x, &y).unwrap()).abs() < 1e-12);
        assert!(volume_psnr(&v, &[]).is_err());
    }

    #[test]
    fn mean_std_examples() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
    }
}
