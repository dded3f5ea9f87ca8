//! Multi-coil Cartesian encoding operator `E_m = M_m F S` and its adjoint.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{CoilSensitivities, KSpace, NoiseSpec};
use crate::error::{invalid, shape, Result};
use crate::fft::Fft2;
use crate::image::{ComplexImage, C64};
use crate::sampling::SamplingMask;

/// Reusable encoding operator for one coil set and one sampling mask.
///
/// Buffers are flat: images are `rows·cols` row-major, k-space is coil-major
/// `n_coils·rows·cols`.
#[derive(Debug, Clone)]
pub struct EncodingOperator {
    coils: Arc<CoilSensitivities>,
    mask: SamplingMask,
    fft: Fft2,
    /// k-space rows holding at least one sample.
    active_rows: Vec<bool>,
}

impl EncodingOperator {
    pub fn new(coils: Arc<CoilSensitivities>, mask: SamplingMask) -> Result<Self> {
        if coils.rows() != mask.n_pe() || coils.cols() != mask.n_ro() {
            return shape(format!(
                "coil grid {}x{} does not match mask grid {}x{}",
                coils.rows(),
                coils.cols(),
                mask.n_pe(),
                mask.n_ro()
            ));
        }
        let fft = Fft2::new(coils.rows(), coils.cols());
        let active_rows = (0..mask.n_pe())
            .map(|r| (0..mask.n_ro()).any(|c| mask.is_sampled(r, c)))
            .collect();
        Ok(Self {
            coils,
            mask,
            fft,
            active_rows,
        })
    }

    pub fn coils(&self) -> &Arc<CoilSensitivities> {
        &self.coils
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }

    /// Same coils, different mask.
    pub fn with_mask(&self, mask: SamplingMask) -> Result<Self> {
        Self::new(self.coils.clone(), mask)
    }

    pub fn rows(&self) -> usize {
        self.coils.rows()
    }

    pub fn cols(&self) -> usize {
        self.coils.cols()
    }

    pub fn image_len(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn kspace_len(&self) -> usize {
        self.coils.n_coils() * self.image_len()
    }

    pub fn forward_into(&self, x: &[C64], out: &mut [C64]) {
        let n = self.image_len();
        assert_eq!(x.len(), n);
        assert_eq!(out.len(), self.kspace_len());
        let mask = self.mask.as_slice();
        for (c, plane) in out.chunks_exact_mut(n).enumerate() {
            let s = self.coils.map(c);
            for ((o, si), xi) in plane.iter_mut().zip(s).zip(x) {
                *o = si * xi;
            }
            self.fft.forward_rows(plane, &self.active_rows);
            for (o, &m) in plane.iter_mut().zip(mask) {
                if !m {
                    *o = C64::new(0.0, 0.0);
                }
            }
        }
    }

    pub fn forward_vec(&self, x: &[C64]) -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); self.kspace_len()];
        self.forward_into(x, &mut out);
        out
    }

    pub fn adjoint_into(&self, y: &[C64], out: &mut [C64]) {
        let n = self.image_len();
        assert_eq!(y.len(), self.kspace_len());
        assert_eq!(out.len(), n);
        out.fill(C64::new(0.0, 0.0));
        let mask = self.mask.as_slice();
        let mut buf = vec![C64::new(0.0, 0.0); n];
        for (c, plane) in y.chunks_exact(n).enumerate() {
            for ((b, &v), &m) in buf.iter_mut().zip(plane).zip(mask) {
                *b = if m { v } else { C64::new(0.0, 0.0) };
            }
            self.fft.inverse_rows(&mut buf, &self.active_rows);
            let s = self.coils.map(c);
            for ((o, si), b) in out.iter_mut().zip(s).zip(&buf) {
                *o += si.conj() * b;
            }
        }
    }

    pub fn adjoint_vec(&self, y: &[C64]) -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); self.image_len()];
        self.adjoint_into(y, &mut out);
        out
    }

    /// `E^H E x`.
    pub fn normal_vec(&self, x: &[C64]) -> Vec<C64> {
        let n = self.image_len();
        let mut out = vec![C64::new(0.0, 0.0); n];
        let mask = self.mask.as_slice();
        let mut buf = vec![C64::new(0.0, 0.0); n];
        for c in 0..self.coils.n_coils() {
            let s = self.coils.map(c);
            for ((b, si), xi) in buf.iter_mut().zip(s).zip(x) {
                *b = si * xi;
            }
            self.fft.forward_rows(&mut buf, &self.active_rows);
            for (b, &m) in buf.iter_mut().zip(mask) {
                if !m {
                    *b = C64::new(0.0, 0.0);
                }
            }
            self.fft.inverse_rows(&mut buf, &self.active_rows);
            for ((o, si), b) in out.iter_mut().zip(s).zip(&buf) {
                *o += si.conj() * b;
            }
        }
        out
    }

    /// Zeroes k-space entries outside this operator's mask.
    pub fn apply_mask(&self, y: &mut [C64]) {
        apply_mask(&self.mask, y);
    }
}

pub(crate) fn apply_mask(mask: &SamplingMask, y: &mut [C64]) {
    let m = mask.as_slice();
    for plane in y.chunks_exact_mut(m.len()) {
        for (v, &keep) in plane.iter_mut().zip(m) {
            if !keep {
                *v = C64::new(0.0, 0.0);
            }
        }
    }
}

fn check_image(x: &ComplexImage, s: &CoilSensitivities) -> Result<()> {
    if x.rows() != s.rows() || x.cols() != s.cols() {
        return shape(format!(
            "image {}x{} vs coil maps {}x{}",
            x.rows(),
            x.cols(),
            s.rows(),
            s.cols()
        ));
    }
    Ok(())
}

fn check_kspace(y: &KSpace, s: &CoilSensitivities) -> Result<()> {
    if y.n_coils() != s.n_coils() || y.rows() != s.rows() || y.cols() != s.cols() {
        return shape(format!(
            "k-space {}x{}x{} vs coil maps {}x{}x{}",
            y.n_coils(),
            y.rows(),
            y.cols(),
            s.n_coils(),
            s.rows(),
            s.cols()
        ));
    }
    Ok(())
}

/// Per coil: `M_m(F(S_c ⊙ x))` with the unitary DFT.
pub fn forward(x: &ComplexImage, s: &CoilSensitivities, m: &SamplingMask) -> Result<KSpace> {
    check_image(x, s)?;
    let op = EncodingOperator::new(Arc::new(s.clone()), m.clone())?;
    Ok(KSpace::from_raw(s.n_coils(), s.rows(), s.cols(), op.forward_vec(x.data())))
}

/// `Σ_c conj(S_c) ⊙ F⁻¹(M_m(y_c))`.
pub fn adjoint(y: &KSpace, s: &CoilSensitivities, m: &SamplingMask) -> Result<ComplexImage> {
    check_kspace(y, s)?;
    let op = EncodingOperator::new(Arc::new(s.clone()), m.clone())?;
    Ok(ComplexImage::from_raw(s.rows(), s.cols(), op.adjoint_vec(y.data())))
}

/// Adds i.i.d. complex Gaussian noise (per-component std `sigma`) at sampled
/// locations only.
pub fn add_noise(y: &KSpace, m: &SamplingMask, spec: &NoiseSpec) -> Result<KSpace> {
    if !(spec.sigma >= 0.0) {
        return invalid(format!("noise sigma must be non-negative, got {}", spec.sigma));
    }
    if y.rows() != m.n_pe() || y.cols() != m.n_ro() {
        return shape("k-space and mask grids differ");
    }
    if spec.sigma == 0.0 {
        return Ok(y.clone());
    }
    let normal = Normal::new(0.0, spec.sigma).expect("sigma validated above");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = y.data().to_vec();
    let mask = m.as_slice();
    for plane in data.chunks_exact_mut(mask.len()) {
        for (v, &keep) in plane.iter_mut().zip(mask) {
            if keep {
                v.re += normal.sample(&mut rng);
                v.im += normal.sample(&mut rng);
            }
        }
    }
    Ok(KSpace::from_raw(y.n_coils(), y.rows(), y.cols(), data))
}
