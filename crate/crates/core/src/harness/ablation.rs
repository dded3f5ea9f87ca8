//! Multi-method runs from a shared initialization: the method comparison and
//! the weighted-ℓ1 versus ℓ2 perturbation-consistency ablation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::harness::config::{prepare_data, ExperimentConfig, Splits};
use crate::harness::eval::{evaluate_reconstructor, write_evaluation, write_png, EvalReport, Window};
use crate::harness::train::train_from;
use crate::image::ComplexImage;
use crate::losses::{Method, ZeroFilled};
use crate::net::init_params;

pub const COMPARISON_FILE: &str = "comparison.csv";
pub const REPORT_FILE: &str = "report.json";
/// Label of the zero-filled adjoint baseline in comparison tables.
pub const ZERO_FILLED: &str = "zerofilled";

#[derive(Clone, Debug, Serialize)]
pub struct MethodResult {
    pub label: String,
    pub beta: f64,
    pub report: EvalReport,
    /// Final training loss (absent for the baseline).
    pub final_loss: Option<f64>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ComparisonReport {
    pub results: Vec<MethodResult>,
    pub comparison_csv: PathBuf,
}

impl ComparisonReport {
    pub fn get(&self, label: &str) -> Option<&MethodResult> {
        self.results.iter().find(|r| r.label == label)
    }

    /// Mean-PSNR difference `a − b` in dB.
    pub fn psnr_delta(&self, a: &str, b: &str) -> Option<f64> {
        Some(self.get(a)?.report.psnr_mean - self.get(b)?.report.psnr_mean)
    }
}

fn comparison_csv(results: &[MethodResult], deltas: &[(String, String)]) -> String {
    let mut out = String::from("method,beta,psnr_mean,psnr_std,ssim_mean,ssim_std,volume_psnr_db,volume_ssim\n");
    for r in results {
        let e = &r.report;
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.label, r.beta, e.psnr_mean, e.psnr_std, e.ssim_mean, e.ssim_std, e.volume_psnr_db, e.volume_ssim
        )
        .expect("write to string");
    }
    for (a, b) in deltas {
        let (ra, rb) = (
            results.iter().find(|r| &r.label == a),
            results.iter().find(|r| &r.label == b),
        );
        if let (Some(ra), Some(rb)) = (ra, rb) {
            writeln!(
                out,
                "delta({a}-{b}),,{:.6},,{:.6},,{:.6},{:.6}",
                ra.report.psnr_mean - rb.report.psnr_mean,
                ra.report.ssim_mean - rb.report.ssim_mean,
                ra.report.volume_psnr_db - rb.report.volume_psnr_db,
                ra.report.volume_ssim - rb.report.volume_ssim
            )
            .expect("write to string");
        }
    }
    out
}

/// Trains every method in `methods` from the same initialization, evaluates
/// each and the zero-filled baseline on the test slices, and writes a
/// comparison table with the requested PSNR deltas.
pub fn run_comparison(
    cfg: &ExperimentConfig,
    data: &Splits,
    methods: &[(Method, Option<f64>)],
    deltas: &[(String, String)],
    out_dir: &Path,
) -> Result<ComparisonReport> {
    if methods.is_empty() {
        return invalid("no methods to compare");
    }
    std::fs::create_dir_all(out_dir)?;
    let init = init_params(&cfg.model, cfg.optim.init_seed)?;
    let truths: Vec<ComplexImage> = data.test.iter().map(|s| s.ground_truth.clone()).collect();
    let mut results = Vec::new();
    let (zf, zf_recons) = evaluate_reconstructor(&ZeroFilled, &data.test, &data.omega)?;
    write_evaluation(
        &out_dir.join(ZERO_FILLED),
        ZERO_FILLED,
        &zf,
        &truths,
        &zf_recons,
        cfg.output.max_images * cfg.output.images as usize,
        &serde_json::json!({ "mask": cfg.mask }),
    )?;
    results.push(MethodResult {
        label: ZERO_FILLED.into(),
        beta: 0.0,
        report: zf,
        final_loss: None,
        checkpoint: None,
    });
    let mut recon_sets = Vec::new();
    for &(method, beta) in methods {
        let mut c = cfg.clone();
        c.loss.method = method;
        c.loss.beta = beta.or(cfg.loss.beta.filter(|_| method == cfg.loss.method));
        let dir = out_dir.join(method.name());
        let trained = train_from(&c, data, &dir, init.clone())?;
        let (report, recons) = evaluate_reconstructor(&trained.net, &data.test, &data.omega)?;
        let meta = serde_json::json!({
            "method": method.name(),
            "beta": c.loss.beta(),
            "steps": c.optim.steps,
            "lr": c.optim.lr,
            "seed": c.seed,
            "init_seed": c.optim.init_seed,
        });
        write_evaluation(
            &dir.join("eval"),
            method.name(),
            &report,
            &truths,
            &recons,
            cfg.output.max_images * cfg.output.images as usize,
            &meta,
        )?;
        results.push(MethodResult {
            label: method.name().into(),
            beta: c.loss.beta(),
            report,
            final_loss: trained.losses.last().copied(),
            checkpoint: Some(trained.checkpoint),
        });
        recon_sets.push(recons);
    }
    let comparison = out_dir.join(COMPARISON_FILE);
    std::fs::write(&comparison, comparison_csv(&results, deltas))?;
    if cfg.output.images {
        write_panels(&out_dir.join("panels"), &truths, &recon_sets, cfg.output.max_images)?;
    }
    let report = ComparisonReport {
        results,
        comparison_csv: comparison,
    };
    std::fs::write(out_dir.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Side-by-side panels per slice: truth, then each method's reconstruction
/// on the top row and the matching error maps underneath, on one shared
/// window.
fn write_panels(dir: &Path, truths: &[ComplexImage], sets: &[Vec<ComplexImage>], max: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, t) in truths.iter().enumerate().take(max) {
        let (rows, cols) = (t.rows(), t.cols());
        let n = 1 + sets.len();
        let width = n * cols;
        let mut pix = vec![0.0; 2 * rows * width];
        let mut put = |tile_r: usize, tile_c: usize, img: &[f64]| {
            for r in 0..rows {
                for c in 0..cols {
                    pix[(tile_r * rows + r) * width + tile_c * cols + c] = img[r * cols + c];
                }
            }
        };
        put(0, 0, &t.magnitude());
        for (k, set) in sets.iter().enumerate() {
            put(0, k + 1, &set[i].magnitude());
            put(1, k + 1, &set[i].sub(t)?.magnitude());
        }
        let max_val = t.max_magnitude();
        write_png(
            &pix,
            2 * rows,
            width,
            Window { min: 0.0, max: max_val },
            &dir.join(format!("slice_{i:03}.png")),
        )?;
    }
    Ok(())
}

/// Weighted-ℓ1 versus ℓ2 perturbation consistency from a shared init.
pub fn run_ablation_with(cfg: &ExperimentConfig, data: &Splits, out_dir: &Path) -> Result<ComparisonReport> {
    let beta = cfg.loss.beta;
    let deltas = [(Method::Spicssdu.name().to_string(), Method::Picl2.name().to_string())];
    run_comparison(cfg, data, &[(Method::Spicssdu, beta), (Method::Picl2, beta)], &deltas, out_dir)
}

pub fn run_ablation(config_path: impl AsRef<Path>) -> Result<ComparisonReport> {
    let cfg = ExperimentConfig::load(config_path)?;
    let data = prepare_data(&cfg)?;
    run_ablation_with(&cfg, &data, &cfg.output.dir)
}
