//! Unrolled variable-splitting reconstructor.
//!
//! `x⁰ = E^H y`; for each of `T` steps, `z = R(x)` applies a residual CNN and
//! `x = CG[(E^H E + μI) x = E^H y + μ z]` runs a fixed number of conjugate
//! gradient iterations warm-started at `z`. One parameter set is shared by all
//! steps.
//!
//! The regularizer maps a complex image to two real channels and applies an
//! input convolution, `blocks` residual blocks `h + 0.1·conv(relu(conv(h)))`
//! (both convolutions of a block share one kernel), a final convolution with
//! a skip from the input projection, and an output projection back to two
//! channels added to the input.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, CustomOp, Tape, Value, Var};
use crate::conv::ConvShape;
use crate::data::{CoilSensitivities, KSpace, Precision};
use crate::encoding::EncodingOperator;
use crate::error::{invalid, shape, Error, Result};
use crate::image::{ComplexImage, C64};
use crate::sampling::SamplingMask;

/// Initial value of the data-consistency weight.
pub const INITIAL_MU: f64 = 0.05;
const RESIDUAL_SCALE: f64 = 0.1;
/// Version tag written into checkpoint headers.
pub const CHECKPOINT_VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnrolledConfig {
    /// Unrolled steps `T`.
    pub steps: usize,
    pub cg_iters: usize,
    pub blocks: usize,
    pub channels: usize,
    /// Odd convolution kernel size.
    pub kernel: usize,
    /// `Single` rounds every step's outputs to `f32`; arithmetic stays 64-bit.
    pub precision: Precision,
    pub biases: bool,
    /// When false, `μ` stays at its stored value.
    pub train_mu: bool,
    /// Zeroes the regularizer output outside the coil support, where the
    /// measurements carry no information, so every iterate stays on it.
    pub restrict_to_support: bool,
}

impl Default for UnrolledConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl UnrolledConfig {
    /// Desk-scale default: every structural element at laptop cost.
    pub fn desk() -> Self {
        Self {
            steps: 5,
            cg_iters: 10,
            blocks: 3,
            channels: 16,
            kernel: 3,
            precision: Precision::Double,
            biases: false,
            train_mu: true,
            restrict_to_support: true,
        }
    }

    /// Full-size network: 10 steps, 15 CG iterations, 15 blocks of 64 channels.
    pub fn paper() -> Self {
        Self {
            steps: 10,
            cg_iters: 15,
            blocks: 15,
            channels: 64,
            ..Self::desk()
        }
    }

    /// Smallest configuration used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            steps: 2,
            cg_iters: 5,
            blocks: 1,
            channels: 4,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return invalid("steps must be at least 1");
        }
        if self.cg_iters == 0 {
            return invalid("cg_iters must be at least 1");
        }
        if self.kernel % 2 == 0 {
            return invalid(format!("kernel must be odd, got {}", self.kernel));
        }
        if self.channels == 0 {
            return invalid("channels must be positive");
        }
        Ok(())
    }
}

/// Closed-form parameter count: `k²(2C + B·C² + C² + 2C)` weights, optional
/// biases, plus the data-consistency weight.
pub fn parameter_count(cfg: &UnrolledConfig) -> usize {
    let (k2, c, b) = (cfg.kernel * cfg.kernel, cfg.channels, cfg.blocks);
    let weights = k2 * (2 * c + b * c * c + c * c + 2 * c);
    let biases = if cfg.biases { c + b * c + c + 2 } else { 0 };
    weights + biases + 1
}

/// Named slice of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TensorInfo {
    pub name: String,
    pub range: Range<usize>,
}

/// Offsets of every tensor in the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    channels: usize,
    kernel: usize,
    input: (Range<usize>, Option<Range<usize>>),
    blocks: Vec<(Range<usize>, Option<Range<usize>>)>,
    last: (Range<usize>, Option<Range<usize>>),
    output: (Range<usize>, Option<Range<usize>>),
    mu: usize,
}

impl ParamLayout {
    pub fn new(cfg: &UnrolledConfig) -> Self {
        let k2 = cfg.kernel * cfg.kernel;
        let c = cfg.channels;
        let mut next = 0;
        let mut take = |len: usize| {
            let r = next..next + len;
            next += len;
            r
        };
        let conv = |c_in: usize, c_out: usize, take: &mut dyn FnMut(usize) -> Range<usize>| {
            let w = take(c_out * c_in * k2);
            let b = cfg.biases.then(|| take(c_out));
            (w, b)
        };
        let input = conv(2, c, &mut take);
        let blocks = (0..cfg.blocks).map(|_| conv(c, c, &mut take)).collect();
        let last = conv(c, c, &mut take);
        let output = conv(c, 2, &mut take);
        let mu = take(1).start;
        Self {
            channels: c,
            kernel: cfg.kernel,
            input,
            blocks,
            last,
            output,
            mu,
        }
    }

    pub fn len(&self) -> usize {
        self.mu + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index of the unconstrained data-consistency weight.
    pub fn mu_index(&self) -> usize {
        self.mu
    }

    /// Index range of the output projection weights.
    pub fn output_weights(&self) -> Range<usize> {
        self.output.0.clone()
    }

    /// Every tensor in storage order.
    pub fn tensors(&self) -> Vec<TensorInfo> {
        let mut out = Vec::new();
        let mut push = |name: String, (w, b): &(Range<usize>, Option<Range<usize>>)| {
            out.push(TensorInfo {
                name: format!("{name}.weight"),
                range: w.clone(),
            });
            if let Some(b) = b {
                out.push(TensorInfo {
                    name: format!("{name}.bias"),
                    range: b.clone(),
                });
            }
        };
        push("input".into(), &self.input);
        for (i, blk) in self.blocks.iter().enumerate() {
            push(format!("block{i}"), blk);
        }
        push("last".into(), &self.last);
        push("output".into(), &self.output);
        out.push(TensorInfo {
            name: "mu_raw".into(),
            range: self.mu..self.mu + 1,
        });
        out
    }

    fn shape(&self, c_in: usize, c_out: usize, rows: usize, cols: usize) -> ConvShape {
        ConvShape {
            c_in,
            c_out,
            kernel: self.kernel,
            rows,
            cols,
        }
    }
}

/// Flat parameter vector together with its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct RegularizerParams {
    layout: ParamLayout,
    values: Vec<f64>,
}

impl RegularizerParams {
    pub fn from_values(cfg: &UnrolledConfig, values: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let layout = ParamLayout::new(cfg);
        if values.len() != layout.len() {
            return shape(format!("expected {} parameters, got {}", layout.len(), values.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {i} is not finite")));
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mu_raw(&self) -> f64 {
        self.values[self.layout.mu]
    }

    /// `softplus(mu_raw) > 0`.
    pub fn mu(&self) -> f64 {
        softplus(self.mu_raw())
    }

    fn slice(&self, r: &Range<usize>) -> &[f64] {
        &self.values[r.clone()]
    }
}

/// He-normal weights, zero output projection and biases, `μ = 0.05`.
pub fn init_params(cfg: &UnrolledConfig, seed: u64) -> Result<RegularizerParams> {
    cfg.validate()?;
    let layout = ParamLayout::new(cfg);
    let mut values = vec![0.0; layout.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k2 = (cfg.kernel * cfg.kernel) as f64;
    let mut fill = |r: &Range<usize>, fan_in: usize, rng: &mut ChaCha8Rng| {
        let normal = Normal::new(0.0, (2.0 / (fan_in as f64 * k2)).sqrt()).expect("positive std");
        for v in &mut values[r.clone()] {
            *v = normal.sample(rng);
        }
    };
    fill(&layout.input.0, 2, &mut rng);
    for (w, _) in &layout.blocks {
        fill(w, cfg.channels, &mut rng);
    }
    fill(&layout.last.0, cfg.channels, &mut rng);
    // softplus⁻¹(0.05)
    values[layout.mu] = INITIAL_MU.exp_m1().ln();
    RegularizerParams::from_values(cfg, values)
}

/// Activations kept for the backward pass.
struct RegularizerCache {
    rows: usize,
    cols: usize,
    x2: Vec<f64>,
    block_in: Vec<Vec<f64>>,
    block_pre: Vec<Vec<f64>>,
    block_act: Vec<Vec<f64>>,
    last_in: Vec<f64>,
    skip_sum: Vec<f64>,
}

fn to_channels(x: &[C64]) -> Vec<f64> {
    x.iter().map(|v| v.re).chain(x.iter().map(|v| v.im)).collect()
}

fn from_channels(c: &[f64]) -> Vec<C64> {
    let n = c.len() / 2;
    (0..n).map(|i| C64::new(c[i], c[n + i])).collect()
}

fn add_into(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

fn regularizer_forward(
    params: &RegularizerParams,
    rows: usize,
    cols: usize,
    x: &[C64],
) -> (Vec<C64>, RegularizerCache) {
    let l = &params.layout;
    let c = l.channels;
    let bias = |b: &Option<Range<usize>>| b.as_ref().map(|r| params.slice(r));
    let x2 = to_channels(x);
    let h0 = l.shape(2, c, rows, cols).forward(&x2, params.slice(&l.input.0), bias(&l.input.1));
    let inner = l.shape(c, c, rows, cols);
    let mut h = h0.clone();
    let mut block_in = Vec::with_capacity(l.blocks.len());
    let mut block_pre = Vec::with_capacity(l.blocks.len());
    let mut block_act = Vec::with_capacity(l.blocks.len());
    for (w, b) in &l.blocks {
        let pre = inner.forward(&h, params.slice(w), bias(b));
        let act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        let out = inner.forward(&act, params.slice(w), bias(b));
        let mut next = h.clone();
        for (n, o) in next.iter_mut().zip(&out) {
            *n += RESIDUAL_SCALE * o;
        }
        block_in.push(std::mem::replace(&mut h, next));
        block_pre.push(pre);
        block_act.push(act);
    }
    let mut skip_sum = inner.forward(&h, params.slice(&l.last.0), bias(&l.last.1));
    add_into(&mut skip_sum, &h0);
    let o = l.shape(c, 2, rows, cols).forward(&skip_sum, params.slice(&l.output.0), bias(&l.output.1));
    let out = from_channels(&o).iter().zip(x).map(|(a, b)| a + b).collect();
    let cache = RegularizerCache {
        rows,
        cols,
        x2,
        block_in,
        block_pre,
        block_act,
        last_in: h,
        skip_sum,
    };
    (out, cache)
}

struct RegularizerNode {
    params: Arc<RegularizerParams>,
    cache: RegularizerCache,
}

impl CustomOp for RegularizerNode {
    fn backward(&self, grad_out: &Value, grad: &mut [f64]) -> Vec<C64> {
        let Value::Vector(g) = grad_out else {
            panic!("regularizer output is a vector");
        };
        let p = &self.params;
        let l = &p.layout;
        let cache = &self.cache;
        let (rows, cols, c) = (cache.rows, cache.cols, l.channels);
        let mut conv_back = |s: ConvShape,
                             input: &[f64],
                             (w, b): &(Range<usize>, Option<Range<usize>>),
                             g_out: &[f64]|
         -> Vec<f64> {
            let mut gw = vec![0.0; w.len()];
            let mut gb = b.as_ref().map(|r| vec![0.0; r.len()]);
            let gin = s.backward(input, p.slice(w), g_out, &mut gw, gb.as_deref_mut());
            add_into(&mut grad[w.clone()], &gw);
            if let (Some(r), Some(gb)) = (b, gb) {
                add_into(&mut grad[r.clone()], &gb);
            }
            gin
        };
        let g2 = to_channels(g);
        let g_skip = conv_back(l.shape(c, 2, rows, cols), &cache.skip_sum, &l.output, &g2);
        let inner = l.shape(c, c, rows, cols);
        let mut g_h = conv_back(inner, &cache.last_in, &l.last, &g_skip);
        for (i, blk) in l.blocks.iter().enumerate().rev() {
            let g_out: Vec<f64> = g_h.iter().map(|v| RESIDUAL_SCALE * v).collect();
            let g_act = conv_back(inner, &cache.block_act[i], blk, &g_out);
            let g_pre: Vec<f64> = g_act
                .iter()
                .zip(&cache.block_pre[i])
                .map(|(ga, pre)| if *pre > 0.0 { *ga } else { 0.0 })
                .collect();
            let g_in = conv_back(inner, &cache.block_in[i], blk, &g_pre);
            add_into(&mut g_h, &g_in);
        }
        add_into(&mut g_h, &g_skip);
        let g_x2 = conv_back(l.shape(2, c, rows, cols), &cache.x2, &l.input, &g_h);
        from_channels(&g_x2).iter().zip(g).map(|(a, b)| a + b).collect()
    }
}

/// Applies the residual CNN to a complex image.
pub fn regularizer_apply(x: &ComplexImage, params: &RegularizerParams) -> Result<ComplexImage> {
    let (out, _) = regularizer_forward(params, x.rows(), x.cols(), x.data());
    ComplexImage::new(x.rows(), x.cols(), out)
}

/// Fixed-depth CG for `(E^H E + μI) x = b` from `x0`, recorded on the tape.
/// `mu = None` solves the plain normal equations. `step` labels diagnostics.
pub fn cg_on_tape(
    tape: &mut Tape,
    op: &Arc<EncodingOperator>,
    b: Var,
    mu: Option<Var>,
    x0: Var,
    iters: usize,
    step: usize,
) -> Result<Var> {
    let mu = match mu {
        Some(m) => m,
        None => tape.constant(0.0),
    };
    let ax = tape.normal_shift(x0, mu, op);
    let mut r = tape.sub(b, ax);
    let mut p = r;
    let mut rs = tape.dot(r, r);
    let mut x = x0;
    for k in 0..iters {
        let ap = tape.normal_shift(p, mu, op);
        let pap = tape.dot(p, ap);
        let alpha = tape.safe_div(rs, pap);
        x = tape.axpy(x, alpha, p, 1.0);
        r = tape.axpy(r, alpha, ap, -1.0);
        let rs_new = tape.dot(r, r);
        if !tape.scalar(rs_new).is_finite() || !tape.scalar(alpha).is_finite() {
            return Err(Error::NonFinite(format!("unroll step {step}, CG iteration {k}")));
        }
        if k + 1 < iters {
            let beta = tape.safe_div(rs_new, rs);
            p = tape.axpy(r, beta, p, 1.0);
        }
        rs = rs_new;
    }
    Ok(x)
}

/// The network `f(y, E; θ)` with shared parameters.
#[derive(Clone, Debug)]
pub struct UnrolledNet {
    cfg: UnrolledConfig,
    params: Arc<RegularizerParams>,
}

impl UnrolledNet {
    pub fn new(cfg: UnrolledConfig, params: RegularizerParams) -> Result<Self> {
        cfg.validate()?;
        if params.layout != ParamLayout::new(&cfg) {
            return shape("parameters were built for a different configuration");
        }
        Ok(Self {
            cfg,
            params: Arc::new(params),
        })
    }

    pub fn config(&self) -> &UnrolledConfig {
        &self.cfg
    }

    pub fn params(&self) -> &RegularizerParams {
        &self.params
    }

    /// Records `f(y, E)` on the tape; `y` is a k-space node.
    pub fn reconstruct_on(&self, tape: &mut Tape, y: Var, op: &Arc<EncodingOperator>) -> Result<Var> {
        if tape.n_params() != self.params.len() {
            return shape("tape parameter count does not match the network");
        }
        let mu_raw = self.params.mu_raw();
        let mu = if self.cfg.train_mu {
            let raw = tape.param(self.params.layout.mu, mu_raw);
            tape.softplus(raw)
        } else {
            tape.constant(softplus(mu_raw))
        };
        let single = self.cfg.precision == Precision::Single;
        let atb = tape.adjoint(y, op);
        let mut x = atb;
        for t in 0..self.cfg.steps {
            let (z_val, cache) = regularizer_forward(&self.params, op.rows(), op.cols(), tape.vector(x));
            if z_val.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
                return Err(Error::NonFinite(format!("regularizer output at unroll step {t}")));
            }
            let node = RegularizerNode {
                params: self.params.clone(),
                cache,
            };
            let mut z = tape.custom(x, Value::Vector(z_val), Box::new(node));
            if self.cfg.restrict_to_support {
                z = tape.restrict(z, op);
            }
            if single {
                z = tape.round_f32(z);
            }
            let mz = tape.scale_by(mu, z);
            let b = tape.add(atb, mz);
            x = cg_on_tape(tape, op, b, Some(mu), z, self.cfg.cg_iters, t)?;
            if single {
                x = tape.round_f32(x);
            }
        }
        Ok(x)
    }

    pub fn reconstruct(&self, y: &KSpace, s: &Arc<CoilSensitivities>, m: &SamplingMask) -> Result<ComplexImage> {
        if y.n_coils() != s.n_coils() || y.rows() != s.rows() || y.cols() != s.cols() {
            return shape("k-space does not match coil maps");
        }
        let op = Arc::new(EncodingOperator::new(s.clone(), m.clone())?);
        let mut tape = Tape::new(self.params.len());
        let yv = tape.constant_vec(y.data().to_vec());
        let x = self.reconstruct_on(&mut tape, yv, &op)?;
        ComplexImage::new(s.rows(), s.cols(), tape.vector(x).to_vec())
    }
}

/// `f(y, E_m; θ)` for one slice.
pub fn unrolled_forward(
    y: &KSpace,
    s: &CoilSensitivities,
    m: &SamplingMask,
    params: &RegularizerParams,
    cfg: &UnrolledConfig,
) -> Result<ComplexImage> {
    UnrolledNet::new(cfg.clone(), params.clone())?.reconstruct(y, &Arc::new(s.clone()), m)
}

/// Metadata stored alongside checkpoint parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u64,
    pub config: UnrolledConfig,
    pub n_params: usize,
    pub step: u64,
    /// Seeds that produced this state, oldest first.
    pub seed_lineage: Vec<u64>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// JSON header, a NUL byte, then the parameters as little-endian `f64`.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    cfg: &UnrolledConfig,
    params: &RegularizerParams,
    step: u64,
    seed_lineage: Vec<u64>,
    extra: serde_json::Value,
) -> Result<()> {
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        n_params: params.len(),
        step,
        seed_lineage,
        extra,
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(&[0])?;
    for v in params.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(CheckpointHeader, RegularizerParams)> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let split = bytes
        .iter()
        .position(|&b| b == 0)
        .ok_or_else(|| Error::Format("checkpoint header terminator missing".into()))?;
    let raw: serde_json::Value = serde_json::from_slice(&bytes[..split])?;
    let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let header: CheckpointHeader = serde_json::from_value(raw)?;
    let payload = &bytes[split + 1..];
    let expected = header.n_params * 8;
    if payload.len() != expected {
        return Err(Error::SizeMismatch {
            expected,
            found: payload.len(),
        });
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let params = RegularizerParams::from_values(&header.config, values)?;
    Ok((header, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{simulate_coils, simulate_phantom, support_of};
    use crate::encoding::forward;
    use crate::image::BoolImage;
    use crate::sampling::equidistant_mask;
    use rand::Rng;

    fn nontrivial(cfg: &UnrolledConfig, seed: u64) -> RegularizerParams {
        let mut p = init_params(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let out = p.layout().output_weights();
        for v in &mut p.values_mut()[out] {
            *v = rng.gen_range(-0.1..0.1);
        }
        p
    }

    #[test]
    fn counts_match_layout() {
        for cfg in [UnrolledConfig::desk(), UnrolledConfig::tiny(), UnrolledConfig::paper()] {
            let enumerated: usize = ParamLayout::new(&cfg).tensors().iter().map(|t| t.range.len()).sum();
            assert_eq!(enumerated, parameter_count(&cfg));
        }
        let with_bias = UnrolledConfig {
            biases: true,
            ..UnrolledConfig::desk()
        };
        let enumerated: usize = ParamLayout::new(&with_bias).tensors().iter().map(|t| t.range.len()).sum();
        assert_eq!(enumerated, parameter_count(&with_bias));
    }

    #[test]
    fn full_size_count() {
        assert_eq!(parameter_count(&UnrolledConfig::paper()), 592_129);
    }

    #[test]
    fn count_is_independent_of_unroll_depth() {
        let a = UnrolledConfig::desk();
        let b = UnrolledConfig { steps: 11, ..a.clone() };
        assert_eq!(parameter_count(&a), parameter_count(&b));
    }

    #[test]
    fn init_is_deterministic_with_expected_mu() {
        let cfg = UnrolledConfig::desk();
        let a = init_params(&cfg, 4).unwrap();
        assert_eq!(a, init_params(&cfg, 4).unwrap());
        assert_ne!(a, init_params(&cfg, 5).unwrap());
        assert!((a.mu() - INITIAL_MU).abs() < 1e-15);
        assert!(a.values()[a.layout().output_weights()].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(init_params(&UnrolledConfig { kernel: 4, ..UnrolledConfig::tiny() }, 0).is_err());
        assert!(init_params(&UnrolledConfig { steps: 0, ..UnrolledConfig::tiny() }, 0).is_err());
        assert!(init_params(&UnrolledConfig { cg_iters: 0, ..UnrolledConfig::tiny() }, 0).is_err());
    }

    #[test]
    fn zero_output_projection_is_identity() {
        let cfg = UnrolledConfig::tiny();
        let p = init_params(&cfg, 1).unwrap();
        let x = simulate_phantom(16, 16, 2).unwrap();
        assert_eq!(regularizer_apply(&x, &p).unwrap(), x);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let cfg = UnrolledConfig::tiny();
        let p = nontrivial(&cfg, 3);
        let z = ComplexImage::zeros(8, 8);
        assert_eq!(regularizer_apply(&z, &p).unwrap(), z);
    }

    #[test]
    fn regularizer_is_bitwise_reproducible() {
        let cfg = UnrolledConfig::desk();
        let p = nontrivial(&cfg, 3);
        let x = simulate_phantom(32, 32, 5).unwrap();
        let a = regularizer_apply(&x, &p).unwrap();
        let b = regularizer_apply(&x, &p).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, x);
    }

    #[test]
    fn identity_regularizer_full_mask_recovers_truth() {
        let cfg = UnrolledConfig {
            steps: 1,
            ..UnrolledConfig::tiny()
        };
        let p = init_params(&cfg, 0).unwrap();
        let x = simulate_phantom(16, 16, 7).unwrap();
        let s = simulate_coils(16, 16, 1, &BoolImage::filled(16, 16, true)).unwrap();
        let m = SamplingMask::full(16, 16);
        let y = forward(&x, &s, &m).unwrap();
        let out = unrolled_forward(&y, &s, &m, &p, &cfg).unwrap();
        assert!(out.relative_error(&x).unwrap() < 1e-8);
    }

    #[test]
    fn identity_regularizer_pipeline_is_homogeneous() {
        let cfg = UnrolledConfig::tiny();
        let p = init_params(&cfg, 0).unwrap();
        let x = simulate_phantom(16, 16, 8).unwrap();
        let s = simulate_coils(16, 16, 4, &support_of(&x)).unwrap();
        let m = equidistant_mask(16, 16, 2, 4).unwrap();
        let y = forward(&x, &s, &m).unwrap();
        let y2 = KSpace::new(4, 16, 16, y.data().iter().map(|v| v * 2.0).collect()).unwrap();
        let a = unrolled_forward(&y, &s, &m, &p, &cfg).unwrap();
        let b = unrolled_forward(&y2, &s, &m, &p, &cfg).unwrap();
        assert!(b.relative_error(&a.scale(2.0)).unwrap() < 1e-12);
    }

    #[test]
    fn more_steps_change_the_output() {
        let x = simulate_phantom(16, 16, 9).unwrap();
        let s = simulate_coils(16, 16, 4, &support_of(&x)).unwrap();
        let m = equidistant_mask(16, 16, 2, 4).unwrap();
        let y = forward(&x, &s, &m).unwrap();
        let one = UnrolledConfig {
            steps: 1,
            ..UnrolledConfig::tiny()
        };
        let two = UnrolledConfig {
            steps: 2,
            ..UnrolledConfig::tiny()
        };
        let p = nontrivial(&one, 1);
        let a = unrolled_forward(&y, &s, &m, &p, &one).unwrap();
        let b = unrolled_forward(&y, &s, &m, &p, &two).unwrap();
        assert!(a.relative_error(&b).unwrap() > 1e-6);
    }

    #[test]
    fn single_precision_rounds_outputs() {
        let x = simulate_phantom(16, 16, 9).unwrap();
        let s = simulate_coils(16, 16, 4, &support_of(&x)).unwrap();
        let m = equidistant_mask(16, 16, 2, 4).unwrap();
        let y = forward(&x, &s, &m).unwrap();
        let cfg = UnrolledConfig {
            precision: Precision::Single,
            ..UnrolledConfig::tiny()
        };
        let p = nontrivial(&cfg, 2);
        let out = unrolled_forward(&y, &s, &m, &p, &cfg).unwrap();
        assert!(out.data().iter().all(|v| v.re as f32 as f64 == v.re && v.im as f32 as f64 == v.im));
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let cfg = UnrolledConfig::tiny();
        let p = nontrivial(&cfg, 11);
        let x = simulate_phantom(16, 16, 3).unwrap();
        let s = Arc::new(simulate_coils(16, 16, 2, &support_of(&x)).unwrap());
        let m = equidistant_mask(16, 16, 2, 2).unwrap();
        let y = forward(&x, &s, &m).unwrap();
        let op = Arc::new(EncodingOperator::new(s.clone(), m).unwrap());
        let loss = |params: &RegularizerParams| -> (f64, Vec<f64>) {
            let net = UnrolledNet::new(cfg.clone(), params.clone()).unwrap();
            let mut tape = Tape::new(params.len());
            let yv = tape.constant_vec(y.data().to_vec());
            let out = net.reconstruct_on(&mut tape, yv, &op).unwrap();
            let target = tape.constant_vec(x.data().to_vec());
            let d = tape.sub(out, target);
            let l = tape.norm2(d);
            (tape.scalar(l), tape.backward(l).unwrap())
        };
        let (_, g) = loss(&p);
        let l = p.layout();
        let probes = [0, 5, l.tensors()[1].range.start + 3, l.output_weights().start + 2, l.mu_index()];
        let h = 1e-6;
        for i in probes {
            let mut plus = p.clone();
            plus.values_mut()[i] += h;
            let mut minus = p.clone();
            minus.values_mut()[i] -= h;
            let fd = (loss(&plus).0 - loss(&minus).0) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * fd.abs().max(1e-2), "param {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn frozen_mu_gets_no_gradient() {
        let cfg = UnrolledConfig {
            train_mu: false,
            ..UnrolledConfig::tiny()
        };
        let p = nontrivial(&cfg, 12);
        let x = simulate_phantom(16, 16, 3).unwrap();
        let s = Arc::new(simulate_coils(16, 16, 2, &support_of(&x)).unwrap());
        let m = equidistant_mask(16, 16, 2, 2).unwrap();
        let y = forward(&x, &s, &m).unwrap();
        let op = Arc::new(EncodingOperator::new(s, m).unwrap());
        let net = UnrolledNet::new(cfg, p.clone()).unwrap();
        let mut tape = Tape::new(p.len());
        let yv = tape.constant_vec(y.data().to_vec());
        let out = net.reconstruct_on(&mut tape, yv, &op).unwrap();
        let l = tape.norm2(out);
        let g = tape.backward(l).unwrap();
        assert_eq!(g[p.layout().mu_index()], 0.0);
        assert!(g.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let cfg = UnrolledConfig::tiny();
        let p = nontrivial(&cfg, 6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&path, &cfg, &p, 17, vec![1, 2], serde_json::json!({"note": "x"})).unwrap();
        let (h, q) = load_checkpoint(&path).unwrap();
        assert_eq!(h.step, 17);
        assert_eq!(h.config, cfg);
        assert_eq!(q, p);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::SizeMismatch { .. })));
    }
}
