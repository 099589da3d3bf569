//! Dataset plumbing: image decoding and normalization, augmentation,
//! deterministic shuffles and splits, and class-balance tooling.

pub mod synth;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::ctc::{Alphabet, CtcError, LabelSequence};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error(transparent)]
    Label(#[from] CtcError),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("text does not fit: {0}")]
    DoesNotFit(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// One training or evaluation instance: a [1×H×W] image with values in
/// [0, 1], its ground-truth label, and a source tag (file name or
/// synthesis id) for error reports.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: LabelSequence,
    pub source_id: String,
}

/// Derive an independent stream seed from a base seed, so per-sample and
/// per-epoch randomness never aliases between streams (splitmix64 finalizer
/// over a golden-ratio stride).
pub fn mix_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessOptions {
    pub target_height: usize,
    pub target_width: usize,
    pub standardize: bool,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            target_height: 50,
            target_width: 200,
            standardize: false,
        }
    }
}

/// Weighted luma conversion of interleaved 8-bit RGB data.
pub fn to_grayscale(rgb: &[u8], height: usize, width: usize) -> Result<Tensor, DataError> {
    if rgb.len() != 3 * height * width {
        return Err(DataError::InvalidImage(format!(
            "rgb buffer holds {} bytes, expected {}",
            rgb.len(),
            3 * height * width
        )));
    }
    let data = rgb
        .chunks_exact(3)
        .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0)
        .collect();
    Ok(Tensor::from_vec(vec![1, height, width], data).expect("shape matches data"))
}

fn bilinear_resize(src: &[f64], h0: usize, w0: usize, h1: usize, w1: usize) -> Vec<f64> {
    let mut out = vec![0.0; h1 * w1];
    for y in 0..h1 {
        let sy = ((y as f64 + 0.5) * h0 as f64 / h1 as f64 - 0.5).clamp(0.0, (h0 - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h0 - 1);
        let fy = sy - y0 as f64;
        for x in 0..w1 {
            let sx = ((x as f64 + 0.5) * w0 as f64 / w1 as f64 - 0.5).clamp(0.0, (w0 - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w0 - 1);
            let fx = sx - x0 as f64;
            let top = src[y0 * w0 + x0] * (1.0 - fx) + src[y0 * w0 + x1] * fx;
            let bottom = src[y1 * w0 + x0] * (1.0 - fx) + src[y1 * w0 + x1] * fx;
            out[y * w1 + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank]
}

/// Normalize a grayscale image for the network: bilinear resize to the
/// target extents, then a 1st/99th percentile contrast stretch, then an
/// optional per-image standardization remapped back onto [0, 1]. Flat
/// images pass through the stretch and standardization unchanged.
pub fn preprocess(gray: &Tensor, opts: &PreprocessOptions) -> Result<Tensor, DataError> {
    let (c, h, w) = gray
        .dims3()
        .map_err(|e| DataError::InvalidImage(e.to_string()))?;
    if c != 1 {
        return Err(DataError::InvalidImage(format!(
            "expected a single channel, got {c}"
        )));
    }
    let mut data = if (h, w) == (opts.target_height, opts.target_width) {
        gray.data().to_vec()
    } else {
        bilinear_resize(gray.data(), h, w, opts.target_height, opts.target_width)
    };

    let mut sorted = data.clone();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile(&sorted, 0.01);
    let hi = percentile(&sorted, 0.99);
    if hi > lo {
        for v in &mut data {
            *v = ((*v - lo) / (hi - lo)).clamp(0.0, 1.0);
        }
    }

    if opts.standardize {
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if std > 0.0 {
            for v in &mut data {
                *v = (*v - mean) / std;
            }
            let min = data.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for v in &mut data {
                *v = (*v - min) / (max - min);
            }
        }
    }

    Ok(
        Tensor::from_vec(vec![1, opts.target_height, opts.target_width], data)
            .expect("shape matches data"),
    )
}

/// Per-range jitter applied to training images. Each bound pair is sampled
/// uniformly (inclusive); a degenerate pair pins the value.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationConfig {
    pub rotation_degrees: (f64, f64),
    pub translate_frac: (f64, f64),
    pub zoom: (f64, f64),
    pub shear_degrees: (f64, f64),
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub horizontal_flip: bool,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            rotation_degrees: (-5.0, 5.0),
            translate_frac: (-0.05, 0.05),
            zoom: (0.95, 1.05),
            shear_degrees: (-5.0, 5.0),
            brightness: (-0.1, 0.1),
            contrast: (0.9, 1.1),
            horizontal_flip: false,
        }
    }
}

fn sample_bilinear(data: &[f64], h: usize, w: usize, x: f64, y: f64, fill: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let at = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            fill
        } else {
            data[yi as usize * w + xi as usize]
        }
    };
    let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1.0, y0) * fx;
    let bottom = at(x0, y0 + 1.0) * (1.0 - fx) + at(x0 + 1.0, y0 + 1.0) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Randomized geometric and photometric jitter. A single affine transform
/// (flip, rotate, shear, zoom, translate, composed about the image center)
/// is inverse-mapped with bilinear sampling and white fill, then contrast
/// is scaled about mid-gray, brightness shifted, and the result clamped to
/// [0, 1]. The same (image, config, seed) triple always yields the same
/// output.
pub fn augment(image: &Tensor, cfg: &AugmentationConfig, seed: u64) -> Result<Tensor, DataError> {
    let (c, h, w) = image
        .dims3()
        .map_err(|e| DataError::InvalidImage(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = rng
        .gen_range(cfg.rotation_degrees.0..=cfg.rotation_degrees.1)
        .to_radians();
    let tx = rng.gen_range(cfg.translate_frac.0..=cfg.translate_frac.1) * w as f64;
    let ty = rng.gen_range(cfg.translate_frac.0..=cfg.translate_frac.1) * h as f64;
    let zoom = rng.gen_range(cfg.zoom.0..=cfg.zoom.1);
    let shear = rng
        .gen_range(cfg.shear_degrees.0..=cfg.shear_degrees.1)
        .to_radians()
        .tan();
    let brightness = rng.gen_range(cfg.brightness.0..=cfg.brightness.1);
    let contrast = rng.gen_range(cfg.contrast.0..=cfg.contrast.1);
    let flip = cfg.horizontal_flip && rng.gen_bool(0.5);

    // Forward map A = Zoom · Shear · Rotation; sampling inverts it.
    let (sin, cos) = theta.sin_cos();
    let a00 = zoom * (cos + shear * sin);
    let a01 = zoom * (shear * cos - sin);
    let a10 = zoom * sin;
    let a11 = zoom * cos;
    let det = a00 * a11 - a01 * a10;
    let (i00, i01, i10, i11) = (a11 / det, -a01 / det, -a10 / det, a00 / det);

    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let plane = h * w;
    let mut out = vec![0.0; c * plane];
    for ci in 0..c {
        let src = &image.data()[ci * plane..(ci + 1) * plane];
        let dst = &mut out[ci * plane..(ci + 1) * plane];
        for y in 0..h {
            let qy = y as f64 - cy - ty;
            for x in 0..w {
                let qx = x as f64 - cx - tx;
                let mut sx = i00 * qx + i01 * qy + cx;
                let sy = i10 * qx + i11 * qy + cy;
                if flip {
                    sx = (w as f64 - 1.0) - sx;
                }
                let v = sample_bilinear(src, h, w, sx, sy, 1.0);
                dst[y * w + x] = ((v - 0.5) * contrast + 0.5 + brightness).clamp(0.0, 1.0);
            }
        }
    }
    Ok(Tensor::from_vec(vec![c, h, w], out).expect("shape matches data"))
}

/// The result of scanning a dataset directory: decoded samples plus the
/// files that were skipped, each with the reason.
#[derive(Debug)]
pub struct LoadOutcome {
    pub samples: Vec<Sample>,
    pub skipped: Vec<(PathBuf, String)>,
}

/// Load every labeled image under `dir` at the default 50×200 geometry.
/// The ground-truth text is the file stem ("2b8cf.png" → "2b8cf"); files
/// that fail to decode or whose stem contains characters outside the
/// alphabet are skipped and reported, not fatal. Samples come back sorted
/// by file name so downstream shuffles are reproducible.
pub fn load_dataset(dir: &Path, alphabet: &Alphabet) -> Result<LoadOutcome, DataError> {
    load_dataset_with(dir, alphabet, &PreprocessOptions::default())
}

pub fn load_dataset_with(
    dir: &Path,
    alphabet: &Alphabet,
    opts: &PreprocessOptions,
) -> Result<LoadOutcome, DataError> {
    let entries = fs::read_dir(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();

    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for path in paths {
        match load_one(&path, alphabet, opts) {
            Ok(sample) => samples.push(sample),
            Err(e) => skipped.push((path, e.to_string())),
        }
    }
    Ok(LoadOutcome { samples, skipped })
}

fn load_one(path: &Path, alphabet: &Alphabet, opts: &PreprocessOptions) -> Result<Sample, DataError> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| DataError::Decode {
            path: path.to_path_buf(),
            message: "file name is not valid UTF-8".into(),
        })?;
    let label = alphabet.encode(stem)?;
    let img = image::open(path).map_err(|e| DataError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let gray = to_grayscale(rgb.as_raw(), h as usize, w as usize)?;
    let image = preprocess(&gray, opts)?;
    Ok(Sample {
        image,
        label,
        source_id: path
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or(stem)
            .to_string(),
    })
}

/// Fractions of the dataset assigned to each partition; must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.8,
            val_frac: 0.1,
            test_frac: 0.1,
        }
    }
}

#[derive(Debug)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Shuffle with the given seed, then cut into contiguous train/val/test
/// runs. Validation and test sizes round down; the remainder goes to train.
pub fn split_dataset(
    mut samples: Vec<Sample>,
    spec: &SplitSpec,
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    for (name, f) in [
        ("train", spec.train_frac),
        ("val", spec.val_frac),
        ("test", spec.test_frac),
    ] {
        if !(0.0..=1.0).contains(&f) {
            return Err(DataError::InvalidSplit(format!(
                "{name} fraction {f} outside [0, 1]"
            )));
        }
    }
    let sum = spec.train_frac + spec.val_frac + spec.test_frac;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidSplit(format!(
            "fractions sum to {sum}, expected 1"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples.shuffle(&mut rng);
    let n = samples.len();
    let n_val = (n as f64 * spec.val_frac).floor() as usize;
    let n_test = (n as f64 * spec.test_frac).floor() as usize;
    let n_train = n - n_val - n_test;

    let test = samples.split_off(n_train + n_val);
    let val = samples.split_off(n_train);
    Ok(DatasetSplit {
        train: samples,
        val,
        test,
    })
}

/// Character frequencies across a sample set's labels.
#[derive(Debug, Clone)]
pub struct BalanceReport {
    pub counts: Vec<(char, usize)>,
    pub total: usize,
}

impl BalanceReport {
    pub fn min_count(&self) -> usize {
        self.counts.iter().map(|&(_, n)| n).min().unwrap_or(0)
    }

    pub fn max_count(&self) -> usize {
        self.counts.iter().map(|&(_, n)| n).max().unwrap_or(0)
    }

    /// Ratio of the most to the least frequent character; infinite when a
    /// character never occurs.
    pub fn imbalance_ratio(&self) -> f64 {
        let min = self.min_count();
        if min == 0 {
            f64::INFINITY
        } else {
            self.max_count() as f64 / min as f64
        }
    }
}

impl fmt::Display for BalanceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "char  count  share")?;
        for &(ch, n) in &self.counts {
            let share = if self.total == 0 {
                0.0
            } else {
                n as f64 / self.total as f64
            };
            writeln!(f, "{ch:>4}  {n:>5}  {share:.3}")?;
        }
        write!(f, "total {}, imbalance {:.2}", self.total, self.imbalance_ratio())
    }
}

pub fn class_balance_report(samples: &[Sample], alphabet: &Alphabet) -> BalanceReport {
    let mut counts = vec![0usize; alphabet.size()];
    for s in samples {
        for &i in s.label.indices() {
            counts[i] += 1;
        }
    }
    let total = counts.iter().sum();
    BalanceReport {
        counts: alphabet.chars().iter().copied().zip(counts).collect(),
        total,
    }
}

/// Replicate samples containing under-represented characters. Each sample
/// is kept `floor(mean_count / rarest_own_char_count)` times (at least
/// once, at most 10), which pulls every character's frequency toward the
/// mean without discarding data. Deterministic: no randomness involved.
pub fn oversample_rare(samples: &[Sample], alphabet: &Alphabet) -> Vec<Sample> {
    let report = class_balance_report(samples, alphabet);
    let occurring: Vec<usize> = report
        .counts
        .iter()
        .map(|&(_, n)| n)
        .filter(|&n| n > 0)
        .collect();
    if occurring.is_empty() {
        return samples.to_vec();
    }
    let mean = occurring.iter().sum::<usize>() as f64 / occurring.len() as f64;
    let mut out = Vec::new();
    for s in samples {
        let rarest = s
            .label
            .indices()
            .iter()
            .map(|&i| report.counts[i].1)
            .min()
            .unwrap_or(0);
        let copies = if rarest == 0 {
            1
        } else {
            ((mean / rarest as f64).floor() as usize).clamp(1, 10)
        };
        for _ in 0..copies {
            out.push(s.clone());
        }
    }
    out
}
