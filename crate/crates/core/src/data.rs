//! Value types for multi-coil acquisitions, the synthetic phantom/coil
//! simulator, and the on-disk dataset format.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding;
use crate::error::{invalid, shape, Error, Result};
use crate::image::{BoolImage, ComplexImage, C64};
use crate::sampling::SamplingMask;

pub const DATASET_FORMAT_VERSION: u64 = 1;

/// Per-coil complex sensitivity maps with the object support they were normalized on.
#[derive(Clone, Debug, PartialEq)]
pub struct CoilSensitivities {
    rows: usize,
    cols: usize,
    n_coils: usize,
    /// Coil-major, `n_coils·rows·cols`.
    maps: Vec<C64>,
    support: BoolImage,
}

impl CoilSensitivities {
    /// Wraps raw maps. Support is taken to be the pixels where any coil is non-zero.
    pub fn from_maps(n_coils: usize, rows: usize, cols: usize, maps: Vec<C64>) -> Result<Self> {
        if n_coils == 0 || rows == 0 || cols == 0 {
            return invalid("coil set must be non-empty");
        }
        if maps.len() != n_coils * rows * cols {
            return shape(format!(
                "coil maps hold {} samples, expected {}x{}x{}",
                maps.len(),
                n_coils,
                rows,
                cols
            ));
        }
        let n = rows * cols;
        let support = BoolImage {
            rows,
            cols,
            data: (0..n)
                .map(|i| (0..n_coils).any(|c| maps[c * n + i] != C64::new(0.0, 0.0)))
                .collect(),
        };
        Ok(Self {
            rows,
            cols,
            n_coils,
            maps,
            support,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn n_coils(&self) -> usize {
        self.n_coils
    }

    pub fn map(&self, c: usize) -> &[C64] {
        let n = self.rows * self.cols;
        &self.maps[c * n..(c + 1) * n]
    }

    pub fn maps(&self) -> &[C64] {
        &self.maps
    }

    pub fn support(&self) -> &BoolImage {
        &self.support
    }

    /// `max |Σ_c |S_c|² − 1|` over support pixels.
    pub fn normalization_error(&self) -> f64 {
        let n = self.rows * self.cols;
        (0..n)
            .filter(|&i| self.support.data[i])
            .map(|i| {
                let s: f64 = (0..self.n_coils).map(|c| self.maps[c * n + i].norm_sqr()).sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Multi-coil k-space, coil-major.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpace {
    n_coils: usize,
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl KSpace {
    pub fn new(n_coils: usize, rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != n_coils * rows * cols {
            return shape(format!(
                "k-space holds {} samples, expected {}x{}x{}",
                data.len(),
                n_coils,
                rows,
                cols
            ));
        }
        Ok(Self::from_raw(n_coils, rows, cols, data))
    }

    pub(crate) fn from_raw(n_coils: usize, rows: usize, cols: usize, data: Vec<C64>) -> Self {
        debug_assert_eq!(data.len(), n_coils * rows * cols);
        Self {
            n_coils,
            rows,
            cols,
            data,
        }
    }

    pub fn zeros(n_coils: usize, rows: usize, cols: usize) -> Self {
        Self::from_raw(n_coils, rows, cols, vec![C64::new(0.0, 0.0); n_coils * rows * cols])
    }

    pub fn n_coils(&self) -> usize {
        self.n_coils
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<C64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[C64] {
        let n = self.rows * self.cols;
        &self.data[c * n..(c + 1) * n]
    }

    /// Copy with every location outside `m` set to zero.
    pub fn masked(&self, m: &SamplingMask) -> KSpace {
        let mut data = self.data.clone();
        encoding::apply_mask(m, &mut data);
        Self::from_raw(self.n_coils, self.rows, self.cols, data)
    }

    pub fn same_shape(&self, other: &KSpace) -> bool {
        self.n_coils == other.n_coils && self.rows == other.rows && self.cols == other.cols
    }

    pub fn add(&self, other: &KSpace) -> Result<KSpace> {
        if !self.same_shape(other) {
            return shape("k-space add with different shapes");
        }
        Ok(Self::from_raw(
            self.n_coils,
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        ))
    }
}

/// Complex Gaussian measurement noise: per-component standard deviation and RNG seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        Self { sigma: 0.0, seed: 0 }
    }
}

/// Storage precision of a dataset. `Single` rounds every generated value to
/// `f32` so that the 32-bit file encoding round-trips exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "32")]
    Single,
    #[default]
    #[serde(rename = "64")]
    Double,
}

impl Precision {
    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            32 => Ok(Precision::Single),
            64 => Ok(Precision::Double),
            other => invalid(format!("precision must be 32 or 64, got {other}")),
        }
    }

    fn dtype(self) -> &'static str {
        match self {
            Precision::Single => "complex64",
            Precision::Double => "complex128",
        }
    }

    fn bytes_per_sample(self) -> usize {
        match self {
            Precision::Single => 8,
            Precision::Double => 16,
        }
    }

    fn round(self, v: C64) -> C64 {
        match self {
            Precision::Single => C64::new(v.re as f32 as f64, v.im as f32 as f64),
            Precision::Double => v,
        }
    }
}

/// One slice: ground truth, its coils, and fully sampled (possibly noisy) k-space.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceRecord {
    pub ground_truth: ComplexImage,
    pub coils: Arc<CoilSensitivities>,
    pub full_kspace: KSpace,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub slices: Vec<SliceRecord>,
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub seed: u64,
    pub precision: Precision,
}

impl Dataset {
    pub fn rows(&self) -> usize {
        self.slices[0].ground_truth.rows()
    }

    pub fn cols(&self) -> usize {
        self.slices[0].ground_truth.cols()
    }

    pub fn n_coils(&self) -> usize {
        self.slices[0].coils.n_coils()
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }
}

/// SplitMix64 finalizer, used to derive independent child seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Ellipse {
    cu: f64,
    cv: f64,
    au: f64,
    av: f64,
    angle: f64,
    value: f64,
}

impl Ellipse {
    fn contains(&self, u: f64, v: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let du = u - self.cu;
        let dv = v - self.cv;
        let x = c * du + s * dv;
        let y = -s * du + c * dv;
        (x / self.au).powi(2) + (y / self.av).powi(2) <= 1.0
    }
}

/// Normalized grid coordinates in `[-1, 1)`.
fn grid_uv(r: usize, c: usize, rows: usize, cols: usize) -> (f64, f64) {
    (
        2.0 * r as f64 / rows as f64 - 1.0,
        2.0 * c as f64 / cols as f64 - 1.0,
    )
}

/// Piecewise-constant multi-ellipse magnitude with a smooth polynomial phase,
/// normalized to unit peak magnitude.
pub fn simulate_phantom(rows: usize, cols: usize, seed: u64) -> Result<ComplexImage> {
    if rows < 8 || cols < 8 {
        return invalid(format!("phantom needs at least 8x8 pixels, got {rows}x{cols}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outer = Ellipse {
        cu: rng.gen_range(-0.04..0.04),
        cv: rng.gen_range(-0.04..0.04),
        au: rng.gen_range(0.72..0.86),
        av: rng.gen_range(0.62..0.80),
        angle: rng.gen_range(-0.2..0.2),
        value: rng.gen_range(0.35..0.55),
    };
    let n_inner = rng.gen_range(5..=8);
    let inner: Vec<Ellipse> = (0..n_inner)
        .map(|_| {
            let rad: f64 = rng.gen_range(0.0..0.55);
            let th: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            Ellipse {
                cu: outer.cu + rad * outer.au * th.cos(),
                cv: outer.cv + rad * outer.av * th.sin(),
                au: rng.gen_range(0.05..0.28),
                av: rng.gen_range(0.05..0.28),
                angle: rng.gen_range(0.0..std::f64::consts::PI),
                value: rng.gen_range(0.1..1.0),
            }
        })
        .collect();
    let quarter_pi = std::f64::consts::FRAC_PI_4;
    let phase: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-quarter_pi..quarter_pi));

    let mut img = ComplexImage::from_fn(rows, cols, |r, c| {
        let (u, v) = grid_uv(r, c, rows, cols);
        if !outer.contains(u, v) {
            return C64::new(0.0, 0.0);
        }
        let mut mag = outer.value;
        for e in &inner {
            if e.contains(u, v) {
                mag = e.value;
            }
        }
        let phi = phase[0]
            + phase[1] * u
            + phase[2] * v
            + phase[3] * u * v
            + phase[4] * u * u
            + phase[5] * v * v;
        C64::from_polar(mag, phi)
    });
    let peak = img.max_magnitude();
    img = img.scale(1.0 / peak);
    Ok(img)
}

/// Support of an image: pixels with non-zero magnitude.
pub fn support_of(img: &ComplexImage) -> BoolImage {
    BoolImage {
        rows: img.rows(),
        cols: img.cols(),
        data: img.data().iter().map(|v| v.norm_sqr() > 0.0).collect(),
    }
}

/// Gaussian-profile coils placed around the field of view with linear phase,
/// phase-referenced to coil 0, root-sum-of-squares normalized on `support`
/// and zero elsewhere.
pub fn simulate_coils(
    rows: usize,
    cols: usize,
    n_coils: usize,
    support: &BoolImage,
) -> Result<CoilSensitivities> {
    if n_coils == 0 {
        return invalid("at least one coil is required");
    }
    if support.rows != rows || support.cols != cols {
        return shape("support image does not match the coil grid");
    }
    let n = rows * cols;
    let width = 0.85;
    let mut maps = vec![C64::new(0.0, 0.0); n_coils * n];
    for coil in 0..n_coils {
        let theta = std::f64::consts::TAU * coil as f64 / n_coils as f64 + 0.3;
        let (cu, cv) = (1.25 * theta.cos(), 1.25 * theta.sin());
        for r in 0..rows {
            for c in 0..cols {
                let (u, v) = grid_uv(r, c, rows, cols);
                let d2 = (u - cu).powi(2) + (v - cv).powi(2);
                let mag = (-d2 / (2.0 * width * width)).exp();
                let phi = theta + 0.6 * (u * theta.sin() - v * theta.cos());
                maps[coil * n + r * cols + c] = C64::from_polar(mag, phi);
            }
        }
    }
    for i in 0..n {
        if !support.data[i] {
            for coil in 0..n_coils {
                maps[coil * n + i] = C64::new(0.0, 0.0);
            }
            continue;
        }
        let reference = maps[i];
        let rotate = reference.conj() / reference.norm();
        let mut sos = 0.0;
        for coil in 0..n_coils {
            let v = if coil == 0 {
                C64::new(reference.norm(), 0.0)
            } else {
                maps[coil * n + i] * rotate
            };
            maps[coil * n + i] = v;
            sos += v.norm_sqr();
        }
        let rss = sos.sqrt();
        for coil in 0..n_coils {
            maps[coil * n + i] /= rss;
        }
    }
    let mut s = CoilSensitivities::from_maps(n_coils, rows, cols, maps)?;
    s.support = support.clone();
    Ok(s)
}

fn round_image(img: ComplexImage, p: Precision) -> ComplexImage {
    let (r, c) = (img.rows(), img.cols());
    ComplexImage::from_raw(r, c, img.into_data().into_iter().map(|v| p.round(v)).collect())
}

/// Generates `n_slices` phantoms with coils and fully sampled noisy k-space.
pub fn build_dataset(
    n_slices: usize,
    rows: usize,
    cols: usize,
    n_coils: usize,
    noise: NoiseSpec,
    seed: u64,
) -> Result<Dataset> {
    build_dataset_with_precision(n_slices, rows, cols, n_coils, noise, seed, Precision::Double)
}

pub fn build_dataset_with_precision(
    n_slices: usize,
    rows: usize,
    cols: usize,
    n_coils: usize,
    noise: NoiseSpec,
    seed: u64,
    precision: Precision,
) -> Result<Dataset> {
    if n_slices == 0 {
        return invalid("a dataset needs at least one slice");
    }
    if !(noise.sigma >= 0.0) {
        return invalid(format!("noise sigma must be non-negative, got {}", noise.sigma));
    }
    let full = SamplingMask::full(rows, cols);
    let mut slices = Vec::with_capacity(n_slices);
    for i in 0..n_slices as u64 {
        let truth = round_image(simulate_phantom(rows, cols, mix_seed(seed, 2 * i))?, precision);
        let support = support_of(&truth);
        let mut coils = simulate_coils(rows, cols, n_coils, &support)?;
        coils.maps.iter_mut().for_each(|v| *v = precision.round(*v));
        let clean = encoding::forward(&truth, &coils, &full)?;
        let noise_i = NoiseSpec {
            sigma: noise.sigma,
            seed: mix_seed(noise.seed ^ seed, 2 * i + 1),
        };
        let noisy = encoding::add_noise(&clean, &full, &noise_i)?;
        let noisy = KSpace::from_raw(
            n_coils,
            rows,
            cols,
            noisy.into_data().into_iter().map(|v| precision.round(v)).collect(),
        );
        slices.push(SliceRecord {
            ground_truth: truth,
            coils: Arc::new(coils),
            full_kspace: noisy,
        });
    }
    let mut metadata = BTreeMap::new();
    metadata.insert("generator".into(), serde_json::json!("ellipse-phantom/gaussian-coils"));
    metadata.insert("grid".into(), serde_json::json!([rows, cols]));
    metadata.insert("n_coils".into(), serde_json::json!(n_coils));
    metadata.insert("noise_sigma".into(), serde_json::json!(noise.sigma));
    metadata.insert("noise_seed".into(), serde_json::json!(noise.seed));
    Ok(Dataset {
        slices,
        metadata,
        seed,
        precision,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    version: u64,
    n_slices: usize,
    rows: usize,
    cols: usize,
    n_coils: usize,
    dtype: String,
    seed: u64,
    metadata: BTreeMap<String, serde_json::Value>,
}

fn write_samples(out: &mut impl Write, data: &[C64], p: Precision) -> Result<()> {
    for v in data {
        match p {
            Precision::Single => {
                out.write_all(&(v.re as f32).to_le_bytes())?;
                out.write_all(&(v.im as f32).to_le_bytes())?;
            }
            Precision::Double => {
                out.write_all(&v.re.to_le_bytes())?;
                out.write_all(&v.im.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_samples(bytes: &[u8], count: usize, p: Precision) -> (Vec<C64>, &[u8]) {
    let w = p.bytes_per_sample();
    let (head, rest) = bytes.split_at(count * w);
    let data = head
        .chunks_exact(w)
        .map(|ch| match p {
            Precision::Single => C64::new(
                f32::from_le_bytes(ch[0..4].try_into().unwrap()) as f64,
                f32::from_le_bytes(ch[4..8].try_into().unwrap()) as f64,
            ),
            Precision::Double => C64::new(
                f64::from_le_bytes(ch[0..8].try_into().unwrap()),
                f64::from_le_bytes(ch[8..16].try_into().unwrap()),
            ),
        })
        .collect();
    (data, rest)
}

/// Writes the JSON header, a NUL separator, then per slice: ground truth,
/// coil maps (coil-major), full k-space (coil-major), as interleaved
/// little-endian (re, im) pairs.
pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    if d.slices.is_empty() {
        return invalid("cannot save an empty dataset");
    }
    let (rows, cols, n_coils) = (d.rows(), d.cols(), d.n_coils());
    for s in &d.slices {
        if s.ground_truth.rows() != rows
            || s.ground_truth.cols() != cols
            || s.coils.n_coils() != n_coils
            || s.full_kspace.n_coils() != n_coils
        {
            return shape("all slices must share grid size and coil count");
        }
    }
    let header = DatasetHeader {
        version: DATASET_FORMAT_VERSION,
        n_slices: d.slices.len(),
        rows,
        cols,
        n_coils,
        dtype: d.precision.dtype().to_string(),
        seed: d.seed,
        metadata: d.metadata.clone(),
    };
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(&[0u8])?;
    for s in &d.slices {
        write_samples(&mut out, s.ground_truth.data(), d.precision)?;
        write_samples(&mut out, s.coils.maps(), d.precision)?;
        write_samples(&mut out, s.full_kspace.data(), d.precision)?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let nul = bytes
        .iter()
        .position(|&b| b == 0)
        .ok_or_else(|| Error::Format("missing header terminator".into()))?;
    let raw: serde_json::Value = serde_json::from_slice(&bytes[..nul])?;
    let version = raw
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format("header has no version".into()))?;
    if version != DATASET_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let header: DatasetHeader = serde_json::from_value(raw)?;
    let precision = match header.dtype.as_str() {
        "complex64" => Precision::Single,
        "complex128" => Precision::Double,
        other => return Err(Error::Format(format!("unknown dtype {other}"))),
    };
    let (rows, cols, nc) = (header.rows, header.cols, header.n_coils);
    if header.n_slices == 0 || rows == 0 || cols == 0 || nc == 0 {
        return Err(Error::Format("header declares an empty dataset".into()));
    }
    let per_slice = rows * cols * (1 + 2 * nc);
    let expected = header.n_slices * per_slice * precision.bytes_per_sample();
    let payload = &bytes[nul + 1..];
    if payload.len() != expected {
        return Err(Error::SizeMismatch {
            expected,
            found: payload.len(),
        });
    }
    let mut rest = payload;
    let mut slices = Vec::with_capacity(header.n_slices);
    for _ in 0..header.n_slices {
        let (gt, r) = read_samples(rest, rows * cols, precision);
        let (maps, r) = read_samples(r, nc * rows * cols, precision);
        let (ksp, r) = read_samples(r, nc * rows * cols, precision);
        rest = r;
        slices.push(SliceRecord {
            ground_truth: ComplexImage::new(rows, cols, gt)?,
            coils: Arc::new(CoilSensitivities::from_maps(nc, rows, cols, maps)?),
            full_kspace: KSpace::new(nc, rows, cols, ksp)?,
        });
    }
    Ok(Dataset {
        slices,
        metadata: header.metadata,
        seed: header.seed,
        precision,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_is_deterministic_and_normalized() {
        let a = simulate_phantom(64, 64, 7).unwrap();
        let b = simulate_phantom(64, 64, 7).unwrap();
        assert_eq!(a, b);
        for seed in [0, 1, 7, 99] {
            let p = simulate_phantom(64, 64, seed).unwrap();
            assert!((p.max_magnitude() - 1.0).abs() < 1e-12);
        }
        let c = simulate_phantom(64, 64, 8).unwrap();
        assert!(a.data().iter().zip(c.data()).any(|(x, y)| x != y));
    }

    #[test]
    fn phantom_rejects_tiny_grids() {
        assert!(simulate_phantom(7, 64, 0).is_err());
        assert!(simulate_phantom(64, 4, 0).is_err());
    }

    #[test]
    fn single_coil_full_support_is_unity() {
        let s = simulate_coils(32, 32, 1, &BoolImage::filled(32, 32, true)).unwrap();
        assert!(s.map(0).iter().all(|&v| v == C64::new(1.0, 0.0)));
    }

    #[test]
    fn coils_are_sos_normalized_and_zero_outside() {
        let p = simulate_phantom(64, 64, 3).unwrap();
        let sup = support_of(&p);
        let s = simulate_coils(64, 64, 8, &sup).unwrap();
        assert!(s.normalization_error() < 1e-6);
        for i in 0..64 * 64 {
            if !sup.data[i] {
                assert!((0..8).all(|c| s.map(c)[i] == C64::new(0.0, 0.0)));
            }
        }
        assert_eq!(s.support(), &sup);
    }

    #[test]
    fn coil_count_zero_rejected() {
        assert!(simulate_coils(16, 16, 0, &BoolImage::filled(16, 16, true)).is_err());
    }

    #[test]
    fn noiseless_dataset_matches_forward_model() {
        let d = build_dataset(1, 64, 64, 8, NoiseSpec::noiseless(), 4).unwrap();
        let s = &d.slices[0];
        let k = encoding::forward(&s.ground_truth, &s.coils, &SamplingMask::full(64, 64)).unwrap();
        let err = k
            .data()
            .iter()
            .zip(s.full_kspace.data())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-12);
    }

    #[test]
    fn dataset_is_seed_deterministic() {
        let n = NoiseSpec { sigma: 0.01, seed: 3 };
        assert_eq!(
            build_dataset(2, 32, 32, 4, n, 1).unwrap(),
            build_dataset(2, 32, 32, 4, n, 1).unwrap()
        );
    }

    #[test]
    fn single_precision_values_are_f32_representable() {
        let d = build_dataset_with_precision(1, 32, 32, 4, NoiseSpec { sigma: 0.01, seed: 1 }, 2, Precision::Single)
            .unwrap();
        let s = &d.slices[0];
        for v in s.full_kspace.data().iter().chain(s.coils.maps()) {
            assert_eq!(v.re, v.re as f32 as f64);
            assert_eq!(v.im, v.im as f32 as f64);
        }
    }
}
