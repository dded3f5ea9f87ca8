//! Adam training loop with JSON-lines logging and checkpointing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::mix_seed;
use crate::error::{Error, Result};
use crate::harness::config::{prepare_data, ExperimentConfig, OptimConfig, Splits};
use crate::harness::eval::evaluate_reconstructor;
use crate::losses::{loss_gradient, Sample};
use crate::net::{init_params, save_checkpoint, RegularizerParams, UnrolledNet};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LAST_GOOD_FILE: &str = "last_good.bin";
pub const LOG_FILE: &str = "train_log.jsonl";
/// Seed stream of the per-slice splits that stay fixed for a run.
const FIXED_SPLIT_STREAM: u64 = 1 << 33;

/// Adam update rule with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize, cfg: &OptimConfig) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogEntry {
    Step {
        step: usize,
        loss: f64,
        data_term: f64,
        secondary_term: f64,
        lr: f64,
        mu: f64,
    },
    Validation {
        step: usize,
        psnr_db: f64,
        ssim: f64,
    },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub net: UnrolledNet,
    /// Batch loss per step.
    pub losses: Vec<f64>,
    /// `(step, mean PSNR)` of each validation pass.
    pub validation: Vec<(usize, f64)>,
}

fn learning_rate(o: &OptimConfig, step: usize) -> f64 {
    if o.decay_every == 0 {
        o.lr
    } else {
        o.lr * o.lr_decay.powi((step / o.decay_every) as i32)
    }
}

/// Slice order: one seeded permutation per epoch.
fn batch_indices(seed: u64, n: usize, step: usize, batch: usize) -> Vec<usize> {
    (0..batch)
        .map(|j| {
            let k = step * batch + j;
            let (epoch, pos) = (k / n, k % n);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, (1 << 32) + epoch as u64)));
            order[pos]
        })
        .collect()
}

fn checkpoint_extra(cfg: &ExperimentConfig, data: &Splits) -> serde_json::Value {
    let coils = &data.train[0].coils;
    serde_json::json!({
        "grid": { "rows": coils.rows(), "cols": coils.cols(), "coils": coils.n_coils() },
        "method": cfg.loss.method.name(),
        "beta": cfg.loss.beta(),
        "loss": cfg.loss,
        "optim": cfg.optim,
    })
}

/// Trains from the configured initialization.
pub fn train_with(cfg: &ExperimentConfig, data: &Splits, out_dir: &Path) -> Result<TrainOutcome> {
    let init = init_params(&cfg.model, cfg.optim.init_seed)?;
    train_from(cfg, data, out_dir, init)
}

/// Trains starting from `init`; writes the log and checkpoint into `out_dir`.
pub fn train_from(cfg: &ExperimentConfig, data: &Splits, out_dir: &Path, init: RegularizerParams) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::InvalidArgument("no training slices".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join(LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path)?);
    let samples: Vec<Sample> = data
        .train
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let sample = Sample::from_slice(s, &data.omega)?;
            Ok(if cfg.loss.resample_splits {
                sample
            } else {
                sample.with_split_seed(mix_seed(mix_seed(cfg.seed, FIXED_SPLIT_STREAM), i as u64))
            })
        })
        .collect::<Result<_>>()?;
    let o = &cfg.optim;
    let lineage = vec![cfg.seed, o.init_seed];
    let mut params = init;
    let mut adam = Adam::new(params.len(), o);
    let mut losses = Vec::with_capacity(o.steps);
    let mut validation = Vec::new();
    let n_val = o.n_validation.min(data.test.len());
    for step in 0..o.steps {
        let net = UnrolledNet::new(cfg.model.clone(), params.clone())?;
        let batch: Vec<Sample> = batch_indices(cfg.seed, samples.len(), step, o.batch_size)
            .into_iter()
            .map(|i| samples[i].clone())
            .collect();
        let outcome = loss_gradient(&batch, &cfg.loss, &net, mix_seed(cfg.seed, step as u64)).and_then(|g| {
            if g.loss.is_finite() {
                Ok(g)
            } else {
                Err(Error::NonFinite(format!("loss is {}", g.loss)))
            }
        });
        let g = match outcome {
            Ok(g) => g,
            Err(e) => {
                log.flush()?;
                let path = out_dir.join(LAST_GOOD_FILE);
                save_checkpoint(&path, &cfg.model, &params, step as u64, lineage, checkpoint_extra(cfg, data))?;
                return Err(Error::NonFinite(format!(
                    "training aborted at step {step}: {e}; last good parameters in {}",
                    path.display()
                )));
            }
        };
        let lr = learning_rate(o, step);
        adam.step(params.values_mut(), &g.grad, lr);
        let mean = |f: fn(&crate::losses::LossBreakdown) -> f64| {
            g.per_sample.iter().map(f).sum::<f64>() / g.per_sample.len() as f64
        };
        let entry = LogEntry::Step {
            step,
            loss: g.loss,
            data_term: mean(|b| b.data_term),
            secondary_term: mean(|b| b.secondary_term),
            lr,
            mu: params.mu(),
        };
        serde_json::to_writer(&mut log, &entry)?;
        log.write_all(b"\n")?;
        losses.push(g.loss);
        let last = step + 1 == o.steps;
        if n_val > 0 && o.validate_every > 0 && ((step + 1) % o.validate_every == 0 || last) {
            let net = UnrolledNet::new(cfg.model.clone(), params.clone())?;
            let (report, _) = evaluate_reconstructor(&net, &data.test[..n_val], &data.omega)?;
            let entry = LogEntry::Validation {
                step,
                psnr_db: report.psnr_mean,
                ssim: report.ssim_mean,
            };
            serde_json::to_writer(&mut log, &entry)?;
            log.write_all(b"\n")?;
            validation.push((step, report.psnr_mean));
        }
    }
    log.flush()?;
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    save_checkpoint(&checkpoint, &cfg.model, &params, o.steps as u64, lineage, checkpoint_extra(cfg, data))?;
    Ok(TrainOutcome {
        checkpoint,
        log: log_path,
        net: UnrolledNet::new(cfg.model.clone(), params)?,
        losses,
        validation,
    })
}

/// Loads the configuration, prepares data and trains into `output.dir`.
pub fn train(config_path: impl AsRef<Path>) -> Result<TrainOutcome> {
    let cfg = ExperimentConfig::load(config_path)?;
    let data = prepare_data(&cfg)?;
    train_with(&cfg, &data, &cfg.output.dir)
}
