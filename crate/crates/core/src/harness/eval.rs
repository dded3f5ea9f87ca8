//! Test-set evaluation: metrics tables, summaries and magnitude images.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{load_dataset, SliceRecord};
use crate::encoding::EncodingOperator;
use crate::error::{shape, Result};
use crate::harness::config::MaskConfig;
use crate::image::ComplexImage;
use crate::losses::Reconstructor;
use crate::metrics::{mean_std, psnr, ssim, volume_psnr, volume_ssim};
use crate::net::{load_checkpoint, UnrolledNet};
use crate::sampling::SamplingMask;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CSV_HEADER: &str = "slice,psnr_db,ssim";

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SliceMetrics {
    pub slice: usize,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub per_slice: Vec<SliceMetrics>,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    /// PSNR and SSIM of the whole stack against its overall peak.
    pub volume_psnr_db: f64,
    pub volume_ssim: f64,
}

impl EvalReport {
    /// Header, one row per slice, then a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for m in &self.per_slice {
            writeln!(out, "{},{:.6},{:.6}", m.slice, m.psnr_db, m.ssim).expect("write to string");
        }
        writeln!(out, "mean,{:.6},{:.6}", self.psnr_mean, self.ssim_mean).expect("write to string");
        out
    }
}

/// Metrics of `estimates` against `truths`, slice by slice.
pub fn evaluate_images(truths: &[ComplexImage], estimates: &[ComplexImage]) -> Result<EvalReport> {
    if truths.len() != estimates.len() || truths.is_empty() {
        return shape(format!("{} truths vs {} estimates", truths.len(), estimates.len()));
    }
    let per_slice = truths
        .iter()
        .zip(estimates)
        .enumerate()
        .map(|(i, (t, e))| {
            Ok(SliceMetrics {
                slice: i,
                psnr_db: psnr(t, e)?,
                ssim: ssim(t, e)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (psnr_mean, psnr_std) = mean_std(&per_slice.iter().map(|m| m.psnr_db).collect::<Vec<_>>());
    let (ssim_mean, ssim_std) = mean_std(&per_slice.iter().map(|m| m.ssim).collect::<Vec<_>>());
    Ok(EvalReport {
        per_slice,
        psnr_mean,
        psnr_std,
        ssim_mean,
        ssim_std,
        volume_psnr_db: volume_psnr(truths, estimates)?,
        volume_ssim: volume_ssim(truths, estimates)?,
    })
}

/// Reconstructs every slice from its `omega`-undersampled k-space.
pub fn reconstruct_slices(
    f: &dyn Reconstructor,
    slices: &[SliceRecord],
    omega: &SamplingMask,
) -> Result<Vec<ComplexImage>> {
    slices
        .par_iter()
        .map(|s| {
            let op = Arc::new(EncodingOperator::new(s.coils.clone(), omega.clone())?);
            f.reconstruct(&s.full_kspace.masked(omega), &op)
        })
        .collect()
}

pub fn evaluate_reconstructor(
    f: &dyn Reconstructor,
    slices: &[SliceRecord],
    omega: &SamplingMask,
) -> Result<(EvalReport, Vec<ComplexImage>)> {
    let recons = reconstruct_slices(f, slices, omega)?;
    let truths: Vec<ComplexImage> = slices.iter().map(|s| s.ground_truth.clone()).collect();
    Ok((evaluate_images(&truths, &recons)?, recons))
}

/// Display window recorded next to every PNG.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Window {
    pub min: f64,
    pub max: f64,
}

/// Writes `values` (row-major) as an 8-bit grayscale PNG scaled from
/// `window` and a sidecar `<name>.json` holding the window.
pub fn write_png(values: &[f64], rows: usize, cols: usize, window: Window, path: &Path) -> Result<()> {
    if values.len() != rows * cols {
        return shape("pixel count does not match the image size");
    }
    let span = window.max - window.min;
    let bytes: Vec<u8> = values
        .iter()
        .map(|v| {
            if span > 0.0 {
                (((v - window.min) / span).clamp(0.0, 1.0) * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    let img = image::GrayImage::from_raw(cols as u32, rows as u32, bytes).expect("buffer sized for image");
    img.save_with_format(path, image::ImageFormat::Png)?;
    let sidecar = path.with_extension("json");
    std::fs::write(sidecar, serde_json::to_string_pretty(&window)?)?;
    Ok(())
}

/// Magnitude PNG min-max windowed over the image itself.
pub fn write_magnitude_png(img: &ComplexImage, path: &Path) -> Result<Window> {
    let mag = img.magnitude();
    let window = Window {
        min: mag.iter().cloned().fold(f64::INFINITY, f64::min),
        max: mag.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    };
    write_png(&mag, img.rows(), img.cols(), window, path)?;
    Ok(window)
}

#[derive(Serialize)]
struct Summary<'a> {
    label: &'a str,
    n_slices: usize,
    psnr_mean: f64,
    psnr_std: f64,
    ssim_mean: f64,
    ssim_std: f64,
    volume_psnr_db: f64,
    volume_ssim: f64,
    metadata: &'a serde_json::Value,
}

/// Writes `metrics.csv`, `summary.json` and, for the first `max_images`
/// slices, magnitude and error-map PNGs into `dir`.
pub fn write_evaluation(
    dir: &Path,
    label: &str,
    report: &EvalReport,
    truths: &[ComplexImage],
    recons: &[ComplexImage],
    max_images: usize,
    metadata: &serde_json::Value,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let csv = dir.join(METRICS_FILE);
    std::fs::write(&csv, report.to_csv())?;
    let summary = Summary {
        label,
        n_slices: report.per_slice.len(),
        psnr_mean: report.psnr_mean,
        psnr_std: report.psnr_std,
        ssim_mean: report.ssim_mean,
        ssim_std: report.ssim_std,
        volume_psnr_db: report.volume_psnr_db,
        volume_ssim: report.volume_ssim,
        metadata,
    };
    std::fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    if max_images > 0 {
        let img_dir = dir.join("images");
        std::fs::create_dir_all(&img_dir)?;
        for (i, (t, r)) in truths.iter().zip(recons).take(max_images).enumerate() {
            write_magnitude_png(r, &img_dir.join(format!("slice_{i:03}_recon.png")))?;
            write_magnitude_png(t, &img_dir.join(format!("slice_{i:03}_truth.png")))?;
            let err = r.sub(t)?;
            write_magnitude_png(&err, &img_dir.join(format!("slice_{i:03}_error.png")))?;
        }
    }
    Ok(csv)
}

/// Evaluates a checkpoint on every slice of a saved dataset.
pub fn evaluate(
    checkpoint: impl AsRef<Path>,
    dataset: impl AsRef<Path>,
    mask: &MaskConfig,
    out_dir: impl AsRef<Path>,
    max_images: usize,
) -> Result<EvalReport> {
    let (header, params) = load_checkpoint(checkpoint)?;
    let data = load_dataset(dataset)?;
    if let Some(grid) = header.extra.get("grid") {
        let c = &data.slices[0].coils;
        let got = serde_json::json!({ "rows": c.rows(), "cols": c.cols(), "coils": c.n_coils() });
        if grid != &got {
            return shape(format!("checkpoint was trained on {grid}, dataset is {got}"));
        }
    }
    let omega = mask.build(data.rows(), data.cols())?;
    let net = UnrolledNet::new(header.config.clone(), params)?;
    let (report, recons) = evaluate_reconstructor(&net, &data.slices, &omega)?;
    let truths: Vec<ComplexImage> = data.slices.iter().map(|s| s.ground_truth.clone()).collect();
    let metadata = serde_json::json!({
        "checkpoint_step": header.step,
        "seed_lineage": header.seed_lineage,
        "training": header.extra,
        "mask": mask,
    });
    write_evaluation(out_dir.as_ref(), "checkpoint", &report, &truths, &recons, max_images, &metadata)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, NoiseSpec};
    use crate::losses::ZeroFilled;
    use crate::metrics::PSNR_CAP_DB;
    use crate::sampling::equidistant_mask;

    #[test]
    fn truth_as_reconstruction_hits_caps() {
        let ds = build_dataset(3, 16, 16, 2, NoiseSpec::noiseless(), 1).unwrap();
        let truths: Vec<ComplexImage> = ds.slices.iter().map(|s| s.ground_truth.clone()).collect();
        let r = evaluate_images(&truths, &truths).unwrap();
        assert!(r.per_slice.iter().all(|m| m.psnr_db == PSNR_CAP_DB && m.ssim == 1.0));
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 1 + 3 + 1);
        assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
    }

    #[test]
    fn evaluation_files_are_reproducible() {
        let ds = build_dataset(2, 16, 16, 2, NoiseSpec::noiseless(), 2).unwrap();
        let omega = equidistant_mask(16, 16, 2, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let truths: Vec<ComplexImage> = ds.slices.iter().map(|s| s.ground_truth.clone()).collect();
        let mut bytes = Vec::new();
        for run in 0..2 {
            let (r, recons) = evaluate_reconstructor(&ZeroFilled, &ds.slices, &omega).unwrap();
            let out = dir.path().join(format!("run{run}"));
            let csv = write_evaluation(&out, "zf", &r, &truths, &recons, 1, &serde_json::json!({})).unwrap();
            bytes.push(std::fs::read(csv).unwrap());
            assert!(out.join("images/slice_000_recon.png").exists());
            assert!(out.join("images/slice_000_recon.json").exists());
        }
        assert_eq!(bytes[0], bytes[1]);
    }

    #[test]
    fn png_window_is_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        write_png(&[0.0, 1.0, 2.0, 4.0], 2, 2, Window { min: 0.0, max: 4.0 }, &p).unwrap();
        let img = image::open(&p).unwrap().to_luma8();
        assert_eq!(img.as_raw(), &vec![0u8, 64, 128, 255]);
        let w: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p.with_extension("json")).unwrap()).unwrap();
        assert_eq!(w["max"], 4.0);
    }
}
