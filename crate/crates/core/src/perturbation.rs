//! Parallel-imaging-recoverable perturbations.
//!
//! A perturbation is a handful of smooth complex blobs confined to one band of
//! phase-encode rows whose height is below `rows / R`. Equidistant
//! undersampling at rate `R` folds the image onto itself with shifts of
//! `rows / R`, so the `R` replicas of such a band never overlap and a
//! multi-coil SENSE solve can unfold the perturbation exactly.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cg::{solve_normal, CgOptions};
use crate::data::{CoilSensitivities, KSpace};
use crate::encoding::EncodingOperator;
use crate::error::{invalid, shape, Result};
use crate::image::{BoolImage, ComplexImage, C64};
use crate::sampling::SamplingMask;

/// Largest side length of a blob's square footprint; smaller grids use the
/// largest odd side that fits the band.
pub const BLOB_EXTENT: usize = 5;
const BLOB_SIGMA: f64 = 1.0;
/// Default peak magnitude relative to unit-peak images.
pub const DEFAULT_AMPLITUDE: f64 = 0.5;
/// Default number of blobs per perturbation.
pub const DEFAULT_FEATURES: usize = 3;

/// One blob: center pixel, square footprint side and its peak magnitude
/// before the perturbation is renormalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub center: (usize, usize),
    pub extent: usize,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub p: ComplexImage,
    /// Rows where `p` is nonzero.
    pub support_rows: BTreeSet<usize>,
    pub features: Vec<Feature>,
    pub seed: u64,
}

/// Outcome of the geometric aliasing test.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct OverlapVerdict {
    /// The `R` shifted copies of the support rows are pairwise disjoint.
    pub disjoint: bool,
    /// `rows` is not divisible by `R`, so shifts were floored.
    pub approximate: bool,
}

/// Shift of the `k`-th aliasing replica; floored when `rows % r != 0`.
fn alias_shift(k: usize, rows: usize, r: usize) -> usize {
    k * rows / r
}

/// Geometric check on a set of occupied rows.
pub fn rows_alias_free(support_rows: &BTreeSet<usize>, r: usize, rows: usize) -> OverlapVerdict {
    let approximate = r == 0 || rows % r != 0;
    if r <= 1 {
        return OverlapVerdict {
            disjoint: true,
            approximate,
        };
    }
    let mut seen = vec![false; rows];
    let mut disjoint = true;
    'copies: for k in 0..r {
        let shift = alias_shift(k, rows, r);
        for &row in support_rows {
            let target = (row + shift) % rows;
            if seen[target] {
                disjoint = false;
                break 'copies;
            }
            seen[target] = true;
        }
    }
    OverlapVerdict {
        disjoint,
        approximate,
    }
}

/// True iff the `R` replicas of the perturbation's support rows, shifted by
/// `k·rows/R`, are pairwise disjoint.
pub fn verify_no_overlap(p: &Perturbation, r: usize, rows: usize) -> OverlapVerdict {
    rows_alias_free(&p.support_rows, r, rows)
}

fn blob_window(extent: usize) -> Vec<Vec<f64>> {
    let half = (extent / 2) as f64;
    (0..extent)
        .map(|i| {
            (0..extent)
                .map(|j| {
                    let (di, dj) = (i as f64 - half, j as f64 - half);
                    (-(di * di + dj * dj) / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp()
                })
                .collect()
        })
        .collect()
}

fn band_height(rows: usize, r: usize) -> Result<usize> {
    if r == 0 {
        return invalid("acceleration must be positive");
    }
    if rows / r < 4 {
        return invalid(format!("rows/R = {} leaves no room for a perturbation band", rows / r));
    }
    Ok(rows / r - 1)
}

/// Draws `n_features` blobs inside one random band of height `rows/R − 1`
/// and scales the result to peak magnitude `amplitude`.
pub fn generate_perturbation(
    rows: usize,
    cols: usize,
    r: usize,
    n_features: usize,
    amplitude: f64,
    seed: u64,
) -> Result<Perturbation> {
    generate_within(&BoolImage::filled(rows, cols, true), r, n_features, amplitude, seed)
}

/// As [`generate_perturbation`], but every blob footprint lies inside
/// `support`. Coil maps vanish outside the object, so blobs there would be
/// invisible to the encoding operator.
pub fn generate_perturbation_within(
    support: &BoolImage,
    r: usize,
    n_features: usize,
    amplitude: f64,
    seed: u64,
) -> Result<Perturbation> {
    generate_within(support, r, n_features, amplitude, seed)
}

fn generate_within(
    support: &BoolImage,
    r: usize,
    n_features: usize,
    amplitude: f64,
    seed: u64,
) -> Result<Perturbation> {
    let (rows, cols) = (support.rows, support.cols);
    let height = band_height(rows, r)?;
    if n_features == 0 {
        return invalid("at least one feature is required");
    }
    if !(amplitude > 0.0) || !amplitude.is_finite() {
        return invalid(format!("amplitude must be positive, got {amplitude}"));
    }
    if cols < 3 {
        return invalid(format!("{cols} columns leave no room for a blob"));
    }
    let fit = BLOB_EXTENT.min(height).min(cols);
    let extent = if fit % 2 == 1 { fit } else { fit - 1 };
    let half = extent / 2;
    let fits = |rc: usize, cc: usize| {
        (rc - half..=rc + half).all(|i| (cc - half..=cc + half).all(|j| support.get(i, j)))
    };
    // Admissible centers per band start.
    let starts: Vec<(usize, Vec<(usize, usize)>)> = (0..=rows - height)
        .map(|s| {
            let centers = (s + half..s + height - half)
                .flat_map(|i| (half..cols - half).map(move |j| (i, j)))
                .filter(|&(i, j)| fits(i, j))
                .collect::<Vec<_>>();
            (s, centers)
        })
        .filter(|(_, c)| !c.is_empty())
        .collect();
    if starts.is_empty() {
        return invalid("no band of the required height can hold a blob inside the support");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, centers) = &starts[rng.gen_range(0..starts.len())];
    let window = blob_window(extent);
    let mut p = ComplexImage::zeros(rows, cols);
    let mut features = Vec::with_capacity(n_features);
    for _ in 0..n_features {
        let (ci, cj) = centers[rng.gen_range(0..centers.len())];
        let weight = rng.gen_range(0.5..1.0);
        let phase = C64::from_polar(weight, rng.gen_range(-PI..PI));
        for (di, row) in window.iter().enumerate() {
            for (dj, w) in row.iter().enumerate() {
                let (i, j) = (ci + di - half, cj + dj - half);
                p.set(i, j, p.get(i, j) + phase * *w);
            }
        }
        features.push(Feature {
            center: (ci, cj),
            extent,
            amplitude: weight,
        });
    }
    let peak = p.max_magnitude();
    if peak == 0.0 {
        return invalid("blobs cancelled exactly; draw another seed");
    }
    let gain = amplitude / peak;
    let p = p.scale(gain);
    for f in &mut features {
        f.amplitude *= gain;
    }
    let support_rows = occupied_rows(&p);
    let out = Perturbation {
        p,
        support_rows,
        features,
        seed,
    };
    debug_assert!(verify_no_overlap(&out, r, rows).disjoint);
    if !verify_no_overlap(&out, r, rows).disjoint {
        return invalid("generated perturbation aliases onto itself");
    }
    Ok(out)
}

/// Rows containing at least one nonzero pixel.
pub fn occupied_rows(p: &ComplexImage) -> BTreeSet<usize> {
    (0..p.rows())
        .filter(|&i| (0..p.cols()).any(|j| p.get(i, j) != C64::new(0.0, 0.0)))
        .collect()
}

/// `‖cg_sense(E_m p) − p‖ / ‖p‖` after `iters` CG iterations.
pub fn recovery_error(
    p: &ComplexImage,
    s: &CoilSensitivities,
    m: &SamplingMask,
    iters: usize,
) -> Result<f64> {
    let op = EncodingOperator::new(Arc::new(s.clone()), m.clone())?;
    if p.rows() != op.rows() || p.cols() != op.cols() {
        return shape("perturbation does not match the coil grid");
    }
    let q = op.forward_vec(p.data());
    let (x, _) = solve_normal(&op, &q, 0.0, None, None, CgOptions { iters, tol: 1e-14 })?;
    ComplexImage::new(p.rows(), p.cols(), x)?.relative_error(p)
}

/// Empirical recoverability: CG-SENSE with 100 iterations unfolds `E_m p`
/// back to `p` within `tol` (relative).
pub fn verify_pi_recoverable(
    p: &Perturbation,
    s: &CoilSensitivities,
    m: &SamplingMask,
    tol: f64,
) -> Result<bool> {
    Ok(recovery_error(&p.p, s, m, 100)? < tol)
}

/// `y + E_m p`; unsampled entries of `y` are left as they are.
pub fn perturb_measurements(
    y: &KSpace,
    p: &Perturbation,
    s: &CoilSensitivities,
    m: &SamplingMask,
) -> Result<KSpace> {
    if y.n_coils() != s.n_coils() || y.rows() != s.rows() || y.cols() != s.cols() {
        return shape("k-space does not match coil maps");
    }
    let op = EncodingOperator::new(Arc::new(s.clone()), m.clone())?;
    if p.p.rows() != op.rows() || p.p.cols() != op.cols() {
        return shape("perturbation does not match the coil grid");
    }
    let q = op.forward_vec(p.p.data());
    let data = y.data().iter().zip(&q).map(|(a, b)| a + b).collect();
    KSpace::new(y.n_coils(), y.rows(), y.cols(), data)
}

/// Network response to the perturbation: `f(y + q) − f(y)`.
pub fn estimate_perturbation(
    recon_perturbed: &ComplexImage,
    recon_clean: &ComplexImage,
) -> Result<ComplexImage> {
    recon_perturbed.sub(recon_clean)
}
