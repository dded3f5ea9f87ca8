//! Training objectives and their parameter gradients.
//!
//! Every loss is recorded on a [`Tape`] around a [`Reconstructor`], so the
//! same code yields values for fixed baselines and exact gradients for the
//! unrolled network.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Tape, Value, Var};
use crate::data::{mix_seed, CoilSensitivities, KSpace, SliceRecord};
use crate::encoding::EncodingOperator;
use crate::error::{invalid, shape, Error, Result};
use crate::image::{norm1, norm2, ComplexImage, C64};
use crate::net::{cg_on_tape, UnrolledNet};
use crate::perturbation::{
    generate_perturbation_within, perturb_measurements, verify_no_overlap, Perturbation, DEFAULT_AMPLITUDE,
    DEFAULT_FEATURES,
};
use crate::sampling::{shifted_patterns, ssdu_split, SamplingMask, SsduSplit};
use crate::sparsity::{pic_l2_value_and_grad, WeightedL1, DEFAULT_EPS, DEFAULT_LEVELS};
use crate::wavelet::WaveletKind;

/// Weight of the perturbation term when none is configured.
pub const DEFAULT_BETA_PIC: f64 = 5e-3;
/// Weight of the cyclic term when none is configured.
pub const DEFAULT_BETA_CYCLIC: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Supervised,
    Mmssdu,
    Ulim,
    Ccssdu,
    Spicssdu,
    Picl2,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Supervised,
        Method::Mmssdu,
        Method::Ulim,
        Method::Ccssdu,
        Method::Spicssdu,
        Method::Picl2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Supervised => "supervised",
            Method::Mmssdu => "mmssdu",
            Method::Ulim => "ulim",
            Method::Ccssdu => "ccssdu",
            Method::Spicssdu => "spicssdu",
            Method::Picl2 => "picl2",
        }
    }

    pub fn default_beta(self) -> f64 {
        match self {
            Method::Supervised | Method::Mmssdu => 0.0,
            Method::Ulim | Method::Ccssdu => DEFAULT_BETA_CYCLIC,
            Method::Spicssdu | Method::Picl2 => DEFAULT_BETA_PIC,
        }
    }

    fn uses_split(self) -> bool {
        matches!(self, Method::Mmssdu | Method::Ccssdu | Method::Spicssdu | Method::Picl2)
    }

    fn uses_deltas(self) -> bool {
        matches!(self, Method::Ulim | Method::Ccssdu)
    }

    fn uses_perturbations(self) -> bool {
        matches!(self, Method::Spicssdu | Method::Picl2)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub method: Method,
    /// Weight of the secondary term; `None` takes the method default.
    pub beta: Option<f64>,
    /// `|Λ| / |Θ|` of each SSDU split.
    pub rho: f64,
    /// SSDU splits per slice per step.
    pub k: usize,
    /// Cyclic masks `Δ` per slice per step.
    pub n_deltas: usize,
    pub n_perturbations: usize,
    pub perturbation_features: usize,
    pub perturbation_amplitude: f64,
    pub eps: f64,
    pub wavelet: WaveletKind,
    pub levels: usize,
    /// Stops gradients through the clean reconstruction inside the cyclic and
    /// perturbation terms.
    pub detach_inner: bool,
    /// Redraws the SSDU splits every step. When false, training keeps one set
    /// of splits per slice for the whole run.
    pub resample_splits: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            method: Method::Spicssdu,
            beta: None,
            rho: 0.4,
            k: 3,
            n_deltas: 1,
            n_perturbations: 3,
            perturbation_features: DEFAULT_FEATURES,
            perturbation_amplitude: DEFAULT_AMPLITUDE,
            eps: DEFAULT_EPS,
            wavelet: WaveletKind::Dtcwt,
            levels: DEFAULT_LEVELS,
            detach_inner: false,
            resample_splits: false,
        }
    }
}

impl LossConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or_else(|| self.method.default_beta())
    }

    pub fn validate(&self) -> Result<()> {
        let beta = self.beta();
        if !(beta >= 0.0) || !beta.is_finite() {
            return invalid(format!("beta must be a finite non-negative number, got {beta}"));
        }
        if self.k == 0 {
            return invalid("k must be at least 1");
        }
        if self.method.uses_deltas() && self.n_deltas == 0 {
            return invalid("cyclic methods need at least one delta mask");
        }
        if self.method.uses_perturbations() && self.n_perturbations == 0 {
            return invalid("perturbation methods need at least one perturbation");
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return invalid(format!("rho must lie in (0, 1), got {}", self.rho));
        }
        if !(self.eps > 0.0) {
            return invalid(format!("eps must be positive, got {}", self.eps));
        }
        Ok(())
    }
}

/// `‖ref − est‖₂/‖ref‖₂ + ‖ref − est‖₁/‖ref‖₁` with complex moduli.
pub fn norm_l1l2(reference: &[C64], estimate: &[C64]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return shape(format!("reference has {} samples, estimate {}", reference.len(), estimate.len()));
    }
    let (n2, n1) = (norm2(reference), norm1(reference));
    if n2 == 0.0 {
        return invalid("normalized loss needs a nonzero reference");
    }
    let d: Vec<C64> = reference.iter().zip(estimate).map(|(a, b)| a - b).collect();
    Ok(norm2(&d) / n2 + norm1(&d) / n1)
}

/// Records [`norm_l1l2`]; the normalizers are differentiated when `reference`
/// depends on parameters.
pub fn norm_l1l2_on_tape(tape: &mut Tape, reference: Var, estimate: Var) -> Result<Var> {
    if tape.vector(reference).len() != tape.vector(estimate).len() {
        return shape("reference and estimate lengths differ");
    }
    let d = tape.sub(reference, estimate);
    let a = tape.norm2(d);
    let n2 = tape.norm2(reference);
    let t2 = tape.div(a, n2)?;
    let b = tape.norm1(d);
    let n1 = tape.norm1(reference);
    let t1 = tape.div(b, n1)?;
    Ok(tape.scalar_add(t2, t1))
}

/// A reconstruction map `f(y, E)` that can be recorded on a tape.
pub trait Reconstructor: Sync {
    /// Length of the parameter gradient.
    fn n_params(&self) -> usize;

    /// Records `f(y, E)` for a k-space node `y`.
    fn reconstruct_on(&self, tape: &mut Tape, y: Var, op: &Arc<EncodingOperator>) -> Result<Var>;

    fn reconstruct(&self, y: &KSpace, op: &Arc<EncodingOperator>) -> Result<ComplexImage> {
        let mut tape = Tape::new(self.n_params());
        let yv = tape.constant_vec(y.data().to_vec());
        let x = self.reconstruct_on(&mut tape, yv, op)?;
        ComplexImage::new(op.rows(), op.cols(), tape.vector(x).to_vec())
    }
}

impl Reconstructor for UnrolledNet {
    fn n_params(&self) -> usize {
        self.params().len()
    }

    fn reconstruct_on(&self, tape: &mut Tape, y: Var, op: &Arc<EncodingOperator>) -> Result<Var> {
        UnrolledNet::reconstruct_on(self, tape, y, op)
    }
}

/// Parameter-free CG-SENSE with a fixed iteration count from a zero start.
#[derive(Clone, Copy, Debug)]
pub struct FixedCgSense {
    pub iters: usize,
}

impl Reconstructor for FixedCgSense {
    fn n_params(&self) -> usize {
        0
    }

    fn reconstruct_on(&self, tape: &mut Tape, y: Var, op: &Arc<EncodingOperator>) -> Result<Var> {
        let b = tape.adjoint(y, op);
        let x0 = tape.constant_vec(vec![C64::new(0.0, 0.0); op.image_len()]);
        cg_on_tape(tape, op, b, None, x0, self.iters, 0)
    }
}

/// Zero-filled adjoint reconstruction `E^H y`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroFilled;

impl Reconstructor for ZeroFilled {
    fn n_params(&self) -> usize {
        0
    }

    fn reconstruct_on(&self, tape: &mut Tape, y: Var, op: &Arc<EncodingOperator>) -> Result<Var> {
        Ok(tape.adjoint(y, op))
    }
}

/// Returns a fixed image regardless of its input.
#[derive(Clone, Debug)]
pub struct ConstantRecon(pub ComplexImage);

impl Reconstructor for ConstantRecon {
    fn n_params(&self) -> usize {
        0
    }

    fn reconstruct_on(&self, tape: &mut Tape, _y: Var, op: &Arc<EncodingOperator>) -> Result<Var> {
        if self.0.rows() != op.rows() || self.0.cols() != op.cols() {
            return shape("constant image does not match the operator grid");
        }
        Ok(tape.constant_vec(self.0.data().to_vec()))
    }
}

/// One training slice: acquired k-space on `omega`, its coils, optional truth.
#[derive(Clone, Debug)]
pub struct Sample {
    pub y: KSpace,
    pub coils: Arc<CoilSensitivities>,
    pub omega: SamplingMask,
    pub truth: Option<ComplexImage>,
    /// Seed of this slice's SSDU splits; `None` derives them from the step seed.
    pub split_seed: Option<u64>,
}

impl Sample {
    pub fn new(
        y: KSpace,
        coils: Arc<CoilSensitivities>,
        omega: SamplingMask,
        truth: Option<ComplexImage>,
    ) -> Result<Self> {
        if y.n_coils() != coils.n_coils() || y.rows() != coils.rows() || y.cols() != coils.cols() {
            return shape("k-space does not match coil maps");
        }
        if omega.n_pe() != y.rows() || omega.n_ro() != y.cols() {
            return shape("mask does not match k-space");
        }
        if let Some(t) = &truth {
            if t.rows() != y.rows() || t.cols() != y.cols() {
                return shape("ground truth does not match k-space");
            }
        }
        let y = y.masked(&omega);
        Ok(Self {
            y,
            coils,
            omega,
            truth,
            split_seed: None,
        })
    }

    /// Undersamples a fully sampled slice with `omega`.
    pub fn from_slice(slice: &SliceRecord, omega: &SamplingMask) -> Result<Self> {
        Self::new(
            slice.full_kspace.clone(),
            slice.coils.clone(),
            omega.clone(),
            Some(slice.ground_truth.clone()),
        )
    }

    /// Pins the SSDU splits of this sample to `seed`.
    pub fn with_split_seed(mut self, seed: u64) -> Self {
        self.split_seed = Some(seed);
        self
    }

    fn operator(&self, m: &SamplingMask) -> Result<Arc<EncodingOperator>> {
        Ok(Arc::new(EncodingOperator::new(self.coils.clone(), m.clone())?))
    }
}

/// Random objects drawn for one slice at one step.
#[derive(Clone, Debug, Default)]
pub struct Draws {
    pub split: Option<SsduSplit>,
    pub deltas: Vec<SamplingMask>,
    pub perturbations: Vec<Perturbation>,
}

const SPLIT_STREAM: u64 = 1;
const DELTA_STREAM: u64 = 2;
const PERTURBATION_STREAM: u64 = 3;

/// Draws what `cfg.method` needs. Each kind of object has its own seed stream,
/// so the SSDU splits are identical across methods for a given seed.
pub fn draw(sample: &Sample, cfg: &LossConfig, seed: u64) -> Result<Draws> {
    let m = cfg.method;
    let split = if m.uses_split() {
        let split_seed = sample.split_seed.unwrap_or_else(|| mix_seed(seed, SPLIT_STREAM));
        Some(ssdu_split(&sample.omega, cfg.rho, cfg.k, split_seed)?)
    } else {
        None
    };
    let deltas = if m.uses_deltas() {
        shifted_patterns(&sample.omega, cfg.n_deltas, mix_seed(seed, DELTA_STREAM))?
    } else {
        Vec::new()
    };
    let perturbations = if m.uses_perturbations() {
        let base = mix_seed(seed, PERTURBATION_STREAM);
        (0..cfg.n_perturbations as u64)
            .map(|i| {
                generate_perturbation_within(
                    sample.coils.support(),
                    sample.omega.acceleration(),
                    cfg.perturbation_features,
                    cfg.perturbation_amplitude,
                    mix_seed(base, i),
                )
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    Ok(Draws {
        split,
        deltas,
        perturbations,
    })
}

/// Loss value split into its data and secondary terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Supervised, MM-SSDU or measurement-consistency term.
    pub data_term: f64,
    /// Unweighted secondary term (zero for single-term methods).
    pub secondary_term: f64,
}

/// `‖p_est‖`-type penalties with a precomputed gradient.
struct FrozenGradient(Vec<C64>);

impl CustomOp for FrozenGradient {
    fn backward(&self, grad_out: &Value, _param_grad: &mut [f64]) -> Vec<C64> {
        let Value::Scalar(s) = grad_out else {
            panic!("penalty output is a scalar");
        };
        self.0.iter().map(|g| g * *s).collect()
    }
}

struct Recorder<'a> {
    tape: Tape,
    f: &'a dyn Reconstructor,
    sample: &'a Sample,
    cfg: &'a LossConfig,
    y: Var,
    op_omega: Arc<EncodingOperator>,
}

impl<'a> Recorder<'a> {
    fn new(f: &'a dyn Reconstructor, sample: &'a Sample, cfg: &'a LossConfig) -> Result<Self> {
        let mut tape = Tape::new(f.n_params());
        let y = tape.constant_vec(sample.y.data().to_vec());
        let op_omega = sample.operator(&sample.omega)?;
        Ok(Self {
            tape,
            f,
            sample,
            cfg,
            y,
            op_omega,
        })
    }

    fn reconstruct(&mut self, y: Var, op: &Arc<EncodingOperator>) -> Result<Var> {
        self.f.reconstruct_on(&mut self.tape, y, op)
    }

    fn inner(&mut self, x: Var) -> Var {
        if self.cfg.detach_inner {
            self.tape.detach(x)
        } else {
            x
        }
    }

    fn constant_kspace(&mut self, k: &KSpace) -> Var {
        self.tape.constant_vec(k.data().to_vec())
    }

    /// `(1/K) Σ_k norm_l1l2(y_Λk, E_Λk f(y_Θk, E_Θk))`.
    fn mmssdu(&mut self, split: &SsduSplit) -> Result<Var> {
        let mut terms = Vec::with_capacity(split.k());
        for pair in &split.pairs {
            if pair.lambda.count() == 0 {
                return invalid("empty loss set");
            }
            let op_theta = self.sample.operator(&pair.theta)?;
            let op_lambda = self.sample.operator(&pair.lambda)?;
            let y_theta = self.constant_kspace(&self.sample.y.masked(&pair.theta));
            let y_lambda = self.constant_kspace(&self.sample.y.masked(&pair.lambda));
            let x = self.reconstruct(y_theta, &op_theta)?;
            let est = self.tape.encode(x, &op_lambda);
            terms.push(norm_l1l2_on_tape(&mut self.tape, y_lambda, est)?);
        }
        Ok(self.tape.mean(&terms))
    }

    fn clean(&mut self) -> Result<Var> {
        let (y, op) = (self.y, self.op_omega.clone());
        self.reconstruct(y, &op)
    }

    /// `f(E_Δ x, E_Δ)` for each cyclic mask.
    fn cycled(&mut self, x: Var, deltas: &[SamplingMask]) -> Result<Vec<Var>> {
        deltas
            .iter()
            .map(|d| {
                let op_delta = self.sample.operator(d)?;
                let y_delta = self.tape.encode(x, &op_delta);
                self.reconstruct(y_delta, &op_delta)
            })
            .collect()
    }

    fn weighted(&mut self, data: Var, secondary: Var) -> Var {
        let beta = self.tape.constant(self.cfg.beta());
        let s = self.tape.scalar_mul(beta, secondary);
        self.tape.scalar_add(data, s)
    }

    /// Mean over perturbations of a penalty on `f(y + E p) − f(y)`.
    fn perturbation_term(&mut self, perturbations: &[Perturbation], l2: bool) -> Result<Var> {
        let r = self.sample.omega.acceleration();
        let clean = self.clean()?;
        let clean = self.inner(clean);
        let mut terms = Vec::with_capacity(perturbations.len());
        for p in perturbations {
            if !verify_no_overlap(p, r, self.sample.y.rows()).disjoint {
                return invalid(format!("perturbation {} aliases onto itself at R={r}", p.seed));
            }
            let yp = perturb_measurements(&self.sample.y, p, &self.sample.coils, &self.sample.omega)?;
            let yp = self.constant_kspace(&yp);
            let op = self.op_omega.clone();
            let perturbed = self.reconstruct(yp, &op)?;
            let p_est = self.tape.sub(perturbed, clean);
            let est = ComplexImage::new(p.p.rows(), p.p.cols(), self.tape.vector(p_est).to_vec())?;
            let (value, grad) = if l2 {
                pic_l2_value_and_grad(&est, &p.p)?
            } else {
                WeightedL1::new(&p.p, self.cfg.levels, self.cfg.wavelet, self.cfg.eps)?.value_and_grad(&est)?
            };
            terms.push(self.tape.custom(p_est, Value::Scalar(value), Box::new(FrozenGradient(grad))));
        }
        Ok(self.tape.mean(&terms))
    }

    fn record(&mut self, draws: &Draws) -> Result<(Var, Var, Option<Var>)> {
        let split = || {
            draws
                .split
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("this method needs an SSDU split".into()))
        };
        let need_deltas = || {
            if draws.deltas.is_empty() {
                invalid("this method needs at least one delta mask")
            } else {
                Ok(())
            }
        };
        Ok(match self.cfg.method {
            Method::Supervised => {
                let truth = self
                    .sample
                    .truth
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("supervised loss needs ground truth".into()))?;
                let t = self.tape.constant_vec(truth.data().to_vec());
                let x = self.clean()?;
                let l = norm_l1l2_on_tape(&mut self.tape, t, x)?;
                (l, l, None)
            }
            Method::Mmssdu => {
                let l = self.mmssdu(split()?)?;
                (l, l, None)
            }
            Method::Ulim => {
                need_deltas()?;
                let x = self.clean()?;
                let est = self.tape.encode(x, &self.op_omega.clone());
                let y = self.y;
                let data = norm_l1l2_on_tape(&mut self.tape, y, est)?;
                let xi = self.inner(x);
                let cycled = self.cycled(xi, &draws.deltas)?;
                let terms = cycled
                    .into_iter()
                    .map(|c| norm_l1l2_on_tape(&mut self.tape, xi, c))
                    .collect::<Result<Vec<_>>>()?;
                let sec = self.tape.mean(&terms);
                (self.weighted(data, sec), data, Some(sec))
            }
            Method::Ccssdu => {
                need_deltas()?;
                let data = self.mmssdu(split()?)?;
                let x = self.clean()?;
                let xi = self.inner(x);
                let cycled = self.cycled(xi, &draws.deltas)?;
                let op = self.op_omega.clone();
                let y = self.y;
                let terms = cycled
                    .into_iter()
                    .map(|c| {
                        let est = self.tape.encode(c, &op);
                        norm_l1l2_on_tape(&mut self.tape, y, est)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let sec = self.tape.mean(&terms);
                (self.weighted(data, sec), data, Some(sec))
            }
            Method::Spicssdu | Method::Picl2 => {
                if draws.perturbations.is_empty() {
                    return invalid("this method needs at least one perturbation");
                }
                let data = self.mmssdu(split()?)?;
                let sec = self.perturbation_term(&draws.perturbations, self.cfg.method == Method::Picl2)?;
                (self.weighted(data, sec), data, Some(sec))
            }
        })
    }
}

fn breakdown(tape: &Tape, (total, data, sec): (Var, Var, Option<Var>)) -> LossBreakdown {
    LossBreakdown {
        total: tape.scalar(total),
        data_term: tape.scalar(data),
        secondary_term: sec.map_or(0.0, |s| tape.scalar(s)),
    }
}

/// Loss value of one slice for explicit draws.
pub fn loss_value(f: &dyn Reconstructor, sample: &Sample, draws: &Draws, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    let mut rec = Recorder::new(f, sample, cfg)?;
    let vars = rec.record(draws)?;
    let out = breakdown(&rec.tape, vars);
    if !out.total.is_finite() {
        return Err(Error::NonFinite(format!("{} loss is not finite", cfg.method)));
    }
    Ok(out)
}

/// Loss value and parameter gradient of one slice for explicit draws.
pub fn loss_value_and_grad(
    f: &dyn Reconstructor,
    sample: &Sample,
    draws: &Draws,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    cfg.validate()?;
    let mut rec = Recorder::new(f, sample, cfg)?;
    let vars = rec.record(draws)?;
    let out = breakdown(&rec.tape, vars);
    if !out.total.is_finite() {
        return Err(Error::NonFinite(format!("{} loss is not finite", cfg.method)));
    }
    let grad = rec.tape.backward(vars.0)?;
    Ok((out, grad))
}

pub fn loss_mmssdu(f: &dyn Reconstructor, sample: &Sample, split: &SsduSplit, cfg: &LossConfig) -> Result<f64> {
    let cfg = LossConfig {
        method: Method::Mmssdu,
        ..cfg.clone()
    };
    let draws = Draws {
        split: Some(split.clone()),
        ..Draws::default()
    };
    Ok(loss_value(f, sample, &draws, &cfg)?.total)
}

pub fn loss_ulim(f: &dyn Reconstructor, sample: &Sample, deltas: &[SamplingMask], cfg: &LossConfig) -> Result<f64> {
    let cfg = LossConfig {
        method: Method::Ulim,
        ..cfg.clone()
    };
    let draws = Draws {
        deltas: deltas.to_vec(),
        ..Draws::default()
    };
    Ok(loss_value(f, sample, &draws, &cfg)?.total)
}

pub fn loss_ccssdu(
    f: &dyn Reconstructor,
    sample: &Sample,
    split: &SsduSplit,
    deltas: &[SamplingMask],
    cfg: &LossConfig,
) -> Result<f64> {
    let cfg = LossConfig {
        method: Method::Ccssdu,
        ..cfg.clone()
    };
    let draws = Draws {
        split: Some(split.clone()),
        deltas: deltas.to_vec(),
        ..Draws::default()
    };
    Ok(loss_value(f, sample, &draws, &cfg)?.total)
}

/// SPIC-SSDU loss with its MM-SSDU and perturbation terms as diagnostics.
pub fn loss_spic(
    f: &dyn Reconstructor,
    sample: &Sample,
    split: &SsduSplit,
    perturbations: &[Perturbation],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let cfg = LossConfig {
        method: Method::Spicssdu,
        ..cfg.clone()
    };
    let draws = Draws {
        split: Some(split.clone()),
        perturbations: perturbations.to_vec(),
        ..Draws::default()
    };
    loss_value(f, sample, &draws, &cfg)
}

pub fn loss_pic_l2_total(
    f: &dyn Reconstructor,
    sample: &Sample,
    split: &SsduSplit,
    perturbations: &[Perturbation],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let cfg = LossConfig {
        method: Method::Picl2,
        ..cfg.clone()
    };
    let draws = Draws {
        split: Some(split.clone()),
        perturbations: perturbations.to_vec(),
        ..Draws::default()
    };
    loss_value(f, sample, &draws, &cfg)
}

pub fn loss_supervised(f: &dyn Reconstructor, sample: &Sample) -> Result<f64> {
    let cfg = LossConfig::for_method(Method::Supervised);
    Ok(loss_value(f, sample, &Draws::default(), &cfg)?.total)
}

/// Batch-mean loss and gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchGradient {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub per_sample: Vec<LossBreakdown>,
}

/// Seed of sample `index` within a batch drawn with `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    mix_seed(seed, index as u64)
}

/// Mean loss and gradient over `batch`. Samples run in parallel; their
/// results are summed in batch order, so the output does not depend on the
/// thread count.
pub fn loss_gradient(batch: &[Sample], cfg: &LossConfig, f: &dyn Reconstructor, seed: u64) -> Result<BatchGradient> {
    if batch.is_empty() {
        return invalid("empty batch");
    }
    cfg.validate()?;
    let results: Vec<Result<(LossBreakdown, Vec<f64>)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let draws = draw(s, cfg, sample_seed(seed, i))?;
            loss_value_and_grad(f, s, &draws, cfg)
        })
        .collect();
    let n = batch.len() as f64;
    let mut grad = vec![0.0; f.n_params()];
    let mut loss = 0.0;
    let mut per_sample = Vec::with_capacity(batch.len());
    for (i, r) in results.into_iter().enumerate() {
        let (b, g) = r.map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("sample {i}: {msg}")),
            other => other,
        })?;
        loss += b.total;
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc += v;
        }
        per_sample.push(b);
    }
    for v in &mut grad {
        *v /= n;
    }
    Ok(BatchGradient {
        loss: loss / n,
        grad,
        per_sample,
    })
}
