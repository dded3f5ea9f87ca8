//! Conjugate-gradient solvers for `(E^H E + μI) x = E^H y + μ z`.
//!
//! With `μ = 0` this is CG-SENSE, the parallel-imaging least-squares
//! reconstruction. The same recursion, recorded on a tape, forms the
//! data-fidelity block of the unrolled network (see [`crate::autodiff`]).

use std::sync::Arc;

use crate::data::{CoilSensitivities, KSpace};
use crate::encoding::EncodingOperator;
use crate::error::{invalid, shape, Error, Result};
use crate::image::{dot_re, norm2, ComplexImage, C64};
use crate::sampling::SamplingMask;

/// Result of a CG solve with the residual trace `‖r_k‖` (k = 0 is the start).
#[derive(Clone, Debug)]
pub struct CgSolution {
    pub image: ComplexImage,
    pub residual_norms: Vec<f64>,
    pub iterations: usize,
}

impl CgSolution {
    /// `‖r_final‖ / ‖b‖`; zero when the right-hand side vanishes.
    pub fn relative_residual(&self, rhs_norm: f64) -> f64 {
        if rhs_norm == 0.0 {
            0.0
        } else {
            self.residual_norms.last().copied().unwrap_or(0.0) / rhs_norm
        }
    }
}

/// Options for [`cg_normal`]. `tol = 0` disables early exit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CgOptions {
    pub iters: usize,
    pub tol: f64,
}

impl CgOptions {
    pub fn fixed(iters: usize) -> Self {
        Self { iters, tol: 0.0 }
    }
}

/// Plain-buffer CG on an [`EncodingOperator`].
pub fn solve_normal(
    op: &EncodingOperator,
    y: &[C64],
    mu: f64,
    z: Option<&[C64]>,
    x0: Option<&[C64]>,
    opts: CgOptions,
) -> Result<(Vec<C64>, Vec<f64>)> {
    if opts.iters == 0 {
        return invalid("CG needs at least one iteration");
    }
    if !(mu >= 0.0) {
        return invalid(format!("mu must be non-negative, got {mu}"));
    }
    if mu > 0.0 && z.is_none() {
        return invalid("mu > 0 requires a prior image z");
    }
    let n = op.image_len();
    let atb = op.adjoint_vec(y);
    let mut b = atb.clone();
    if let Some(z) = z {
        if z.len() != n {
            return shape("prior image z has the wrong size");
        }
        for (bi, zi) in b.iter_mut().zip(z) {
            *bi += zi * mu;
        }
    }
    let mut x = match x0 {
        Some(x0) if x0.len() != n => return shape("initial image x0 has the wrong size"),
        Some(x0) => x0.to_vec(),
        None => atb,
    };
    let apply = |v: &[C64]| {
        let mut out = op.normal_vec(v);
        if mu != 0.0 {
            for (o, vi) in out.iter_mut().zip(v) {
                *o += vi * mu;
            }
        }
        out
    };
    let ax = apply(&x);
    let mut r: Vec<C64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut p = r.clone();
    let mut rs = dot_re(&r, &r);
    let b_norm = norm2(&b);
    let mut trace = vec![rs.sqrt()];
    for k in 0..opts.iters {
        if rs == 0.0 || (opts.tol > 0.0 && rs.sqrt() <= opts.tol * b_norm) {
            break;
        }
        let ap = apply(&p);
        let pap = dot_re(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rs / pap;
        for ((xi, ri), (pi, api)) in x.iter_mut().zip(r.iter_mut()).zip(p.iter().zip(&ap)) {
            *xi += pi * alpha;
            *ri -= api * alpha;
        }
        let rs_new = dot_re(&r, &r);
        if !rs_new.is_finite() || !alpha.is_finite() {
            return Err(Error::NonFinite(format!("CG iteration {k}: residual became non-finite")));
        }
        let beta = rs_new / rs;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + *pi * beta;
        }
        rs = rs_new;
        trace.push(rs.sqrt());
    }
    Ok((x, trace))
}

/// Approximately solves `(E^H E + μI) x = E^H y + μ z`, starting from `x0`
/// (default `E^H y`), for at most `iters` iterations or until `‖r‖/‖b‖ < tol`.
#[allow(clippy::too_many_arguments)]
pub fn cg_normal(
    y: &KSpace,
    s: &CoilSensitivities,
    m: &SamplingMask,
    mu: f64,
    z: Option<&ComplexImage>,
    iters: usize,
    tol: f64,
    x0: Option<&ComplexImage>,
) -> Result<CgSolution> {
    if y.n_coils() != s.n_coils() || y.rows() != s.rows() || y.cols() != s.cols() {
        return shape("k-space does not match coil maps");
    }
    let op = EncodingOperator::new(Arc::new(s.clone()), m.clone())?;
    let (x, trace) = solve_normal(
        &op,
        y.data(),
        mu,
        z.map(|z| z.data()),
        x0.map(|x| x.data()),
        CgOptions { iters, tol },
    )?;
    let image = ComplexImage::new(s.rows(), s.cols(), x)?;
    Ok(CgSolution {
        image,
        iterations: trace.len() - 1,
        residual_norms: trace,
    })
}

/// CG-SENSE: the unregularized (`μ = 0`) least-squares parallel-imaging reconstruction.
pub fn cg_sense(
    y: &KSpace,
    s: &CoilSensitivities,
    m: &SamplingMask,
    iters: usize,
    tol: f64,
) -> Result<ComplexImage> {
    Ok(cg_normal(y, s, m, 0.0, None, iters, tol, None)?.image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{simulate_coils, simulate_phantom, support_of};
    use crate::encoding::forward;
    use crate::image::BoolImage;
    use crate::sampling::equidistant_mask;

    #[test]
    fn single_coil_full_mask_is_inverse_dft() {
        let x = simulate_phantom(16, 16, 1).unwrap();
        let s = simulate_coils(16, 16, 1, &BoolImage::filled(16, 16, true)).unwrap();
        let m = SamplingMask::full(16, 16);
        let y = forward(&x, &s, &m).unwrap();
        let sol = cg_normal(&y, &s, &m, 0.0, None, 2, 0.0, None).unwrap();
        assert!(sol.image.relative_error(&x).unwrap() < 1e-10);
    }

    #[test]
    fn large_mu_returns_prior() {
        let x = simulate_phantom(32, 32, 2).unwrap();
        let s = simulate_coils(32, 32, 4, &support_of(&x)).unwrap();
        let m = equidistant_mask(32, 32, 2, 4).unwrap();
        let y = forward(&x, &s, &m).unwrap();
        let y = KSpace::new(4, 32, 32, y.data().iter().map(|v| v / x.norm()).collect()).unwrap();
        let z = simulate_phantom(32, 32, 9).unwrap();
        let sol = cg_normal(&y, &s, &m, 1e8, Some(&z), 10, 0.0, None).unwrap();
        assert!(sol.image.relative_error(&z).unwrap() < 1e-6);
    }

    #[test]
    fn zero_data_gives_zero_image() {
        let x = simulate_phantom(32, 32, 2).unwrap();
        let s = simulate_coils(32, 32, 4, &support_of(&x)).unwrap();
        let m = equidistant_mask(32, 32, 2, 0).unwrap();
        let y = KSpace::zeros(4, 32, 32);
        let img = cg_sense(&y, &s, &m, 10, 0.0).unwrap();
        assert!(img.data().iter().all(|v| *v == C64::new(0.0, 0.0)));
    }

    #[test]
    fn full_mask_recovers_image() {
        let x = simulate_phantom(32, 32, 5).unwrap();
        let s = simulate_coils(32, 32, 6, &support_of(&x)).unwrap();
        let m = SamplingMask::full(32, 32);
        let y = forward(&x, &s, &m).unwrap();
        let img = cg_sense(&y, &s, &m, 5, 0.0).unwrap();
        assert!(img.relative_error(&x).unwrap() < 1e-8);
    }

    #[test]
    fn rejects_bad_arguments() {
        let s = simulate_coils(16, 16, 2, &BoolImage::filled(16, 16, true)).unwrap();
        let m = SamplingMask::full(16, 16);
        let y = KSpace::zeros(2, 16, 16);
        assert!(cg_normal(&y, &s, &m, 0.1, None, 5, 0.0, None).is_err());
        assert!(cg_normal(&y, &s, &m, 0.0, None, 0, 0.0, None).is_err());
        let wrong = KSpace::zeros(3, 16, 16);
        assert!(cg_sense(&wrong, &s, &m, 5, 0.0).is_err());
    }

    #[test]
    fn tolerance_stops_early() {
        let x = simulate_phantom(32, 32, 5).unwrap();
        let s = simulate_coils(32, 32, 6, &support_of(&x)).unwrap();
        let m = equidistant_mask(32, 32, 2, 0).unwrap();
        let y = forward(&x, &s, &m).unwrap();
        let sol = cg_normal(&y, &s, &m, 0.0, None, 500, 1e-6, None).unwrap();
        assert!(sol.iterations < 500);
    }
}
