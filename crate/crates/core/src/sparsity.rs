//! Sparse-domain consistency between an estimated and a reference perturbation.
//!
//! The weighted ℓ1 term is `(1/N) Σ_n |(W p_est)_n| / (|(W p_true)_n| + eps)`.
//! The reference enters only through the fixed weights, so gradients flow into
//! `p_est` alone.

use crate::error::{invalid, Result};
use crate::image::{ComplexImage, C64};
use crate::wavelet::{WaveletCoeffs, WaveletKind, WaveletPlan};

/// Default stabilizer for unit-amplitude perturbations.
pub const DEFAULT_EPS: f64 = 1e-4;
/// Default decomposition depth for 64×64 grids.
pub const DEFAULT_LEVELS: usize = 3;

/// Weighted ℓ1 penalty with weights frozen from a reference perturbation.
#[derive(Clone, Debug)]
pub struct WeightedL1 {
    plan: WaveletPlan,
    /// `1 / (N (|W p_true|_n + eps))` in flat coefficient order.
    weights: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl WeightedL1 {
    pub fn new(p_true: &ComplexImage, levels: usize, kind: WaveletKind, eps: f64) -> Result<Self> {
        if !(eps > 0.0) || !eps.is_finite() {
            return invalid(format!("eps must be positive, got {eps}"));
        }
        let plan = WaveletPlan::new(p_true.rows(), p_true.cols(), levels, kind)?;
        let mags = plan.forward(p_true)?.magnitudes();
        let n = mags.len() as f64;
        let weights = mags.iter().map(|m| 1.0 / (n * (m + eps))).collect();
        Ok(Self {
            plan,
            weights,
            rows: p_true.rows(),
            cols: p_true.cols(),
        })
    }

    /// Number of sparse-domain coefficients `N`.
    pub fn count(&self) -> usize {
        self.weights.len()
    }

    fn coeffs(&self, p_est: &ComplexImage) -> Result<WaveletCoeffs> {
        if p_est.rows() != self.rows || p_est.cols() != self.cols {
            return crate::error::shape(format!(
                "estimate {}x{} vs reference {}x{}",
                p_est.rows(),
                p_est.cols(),
                self.rows,
                self.cols
            ));
        }
        self.plan.forward(p_est)
    }

    pub fn value(&self, p_est: &ComplexImage) -> Result<f64> {
        let mags = self.coeffs(p_est)?.magnitudes();
        Ok(mags.iter().zip(&self.weights).map(|(m, w)| m * w).sum())
    }

    /// Value and gradient `∂L/∂Re + i ∂L/∂Im` with respect to `p_est`.
    /// Coefficients with zero modulus take the zero subgradient.
    pub fn value_and_grad(&self, p_est: &ComplexImage) -> Result<(f64, Vec<C64>)> {
        let c = self.coeffs(p_est)?;
        let re = c.real.to_flat();
        let im = c.imag.to_flat();
        let mut value = 0.0;
        let mut g_re = Vec::with_capacity(re.len());
        let mut g_im = Vec::with_capacity(im.len());
        for ((a, b), w) in re.iter().zip(&im).zip(&self.weights) {
            let m = (a.norm_sqr() + b.norm_sqr()).sqrt();
            value += w * m;
            if m > 0.0 {
                g_re.push(a * (w / m));
                g_im.push(b * (w / m));
            } else {
                g_re.push(C64::new(0.0, 0.0));
                g_im.push(C64::new(0.0, 0.0));
            }
        }
        let g = WaveletCoeffs {
            real: c.real.with_flat(&g_re),
            imag: c.imag.with_flat(&g_im),
            ..c
        };
        Ok((value, self.plan.adjoint(&g)?))
    }
}

/// `(1/N) Σ_n |(W p_est)_n| / (|(W p_true)_n| + eps)`.
pub fn weighted_l1(
    p_est: &ComplexImage,
    p_true: &ComplexImage,
    levels: usize,
    kind: WaveletKind,
    eps: f64,
) -> Result<f64> {
    p_est.ensure_same_shape(p_true, "perturbation estimate")?;
    WeightedL1::new(p_true, levels, kind, eps)?.value(p_est)
}

/// `‖p_est − p_true‖₂ / ‖p_true‖₂`.
pub fn pic_l2(p_est: &ComplexImage, p_true: &ComplexImage) -> Result<f64> {
    Ok(pic_l2_value_and_grad(p_est, p_true)?.0)
}

/// Value and gradient of [`pic_l2`] with respect to `p_est` (zero gradient at
/// an exact match).
pub fn pic_l2_value_and_grad(p_est: &ComplexImage, p_true: &ComplexImage) -> Result<(f64, Vec<C64>)> {
    p_est.ensure_same_shape(p_true, "perturbation estimate")?;
    let denom = p_true.norm();
    if denom == 0.0 {
        return invalid("reference perturbation is identically zero");
    }
    let diff: Vec<C64> = p_est.data().iter().zip(p_true.data()).map(|(a, b)| a - b).collect();
    let num = crate::image::norm2(&diff);
    let grad = if num > 0.0 {
        diff.iter().map(|d| d / (num * denom)).collect()
    } else {
        vec![C64::new(0.0, 0.0); diff.len()]
    };
    Ok((num / denom, grad))
}
