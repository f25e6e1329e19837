//! Q-nearest-neighbor binary encoding of image patches against a
//! dictionary, via the convolutional reformulation: ranking whitened
//! squared distances is equivalent to ranking ‖Wd‖²/2 − ⟨p, WᵀWd⟩, so
//! the whole score map is one cross-correlation of the raw image with
//! filters built from the atoms, plus per-atom biases.

use ndarray::{Array2, Array3, ArrayView3, Axis};

use crate::dataset::Image;
use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::whitening::WhiteningOperator;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    Hard,
    Soft,
}

impl std::str::FromStr for Assignment {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "hard" => Ok(Assignment::Hard),
            "soft" => Ok(Assignment::Soft),
            other => Err(format!("unknown assignment mode {other:?}")),
        }
    }
}

/// Precomputed correlation filters and biases for a (dictionary,
/// whitening) pair. For a positive atom a: filter f = Wᵀa, half-norm
/// h = ‖a‖²/2, mean offset m = ⟨μ, f⟩. The whitened inner product at a
/// position is then ⟨p_raw, f⟩ − m, and the distance surrogate for ±a is
/// h ∓ ⟨w, a⟩.
#[derive(Debug, Clone)]
pub struct EncoderFilters {
    filters: Array2<f64>,
    half_sq_norms: Vec<f64>,
    mean_dots: Vec<f64>,
    pub patch_side: usize,
    pub base_size: usize,
}

impl EncoderFilters {
    pub fn new(dict: &Dictionary, op: &WhiteningOperator) -> Result<Self> {
        let d = dict.atom_dim();
        if d != op.dim() {
            return Err(Error::Dimension(format!(
                "dictionary dimension {d} does not match operator dimension {}",
                op.dim()
            )));
        }
        if d != 3 * dict.patch_side * dict.patch_side {
            return Err(Error::Dimension(format!(
                "atom dimension {d} does not match patch side {}",
                dict.patch_side
            )));
        }
        let positives = dict.atoms.slice(ndarray::s![..dict.base_size, ..]);
        // f_d = Wᵀ a_d, as rows
        let filters = positives.dot(&op.matrix);
        let half_sq_norms = positives
            .axis_iter(Axis(0))
            .map(|a| 0.5 * a.iter().map(|v| v * v).sum::<f64>())
            .collect();
        let mean_dots = filters
            .axis_iter(Axis(0))
            .map(|f| f.dot(&op.mean))
            .collect();
        Ok(EncoderFilters {
            filters,
            half_sq_norms,
            mean_dots,
            patch_side: dict.patch_side,
            base_size: dict.base_size,
        })
    }

    pub fn num_channels(&self) -> usize {
        2 * self.base_size
    }
}

/// Distance surrogates for every atom at every patch position; entry
/// (c, i, j) ranks atoms exactly like the whitened squared distance at
/// that position.
#[derive(Debug, Clone)]
pub struct ScoreMap {
    pub scores: Array3<f64>,
    pub base_size: usize,
}

/// φ(x): exactly Q set bits per spatial position, plus the per-position
/// threshold τ (the Q-th smallest surrogate).
#[derive(Debug, Clone)]
pub struct BinaryFeatureMap {
    pub bits: Array3<u8>,
    pub q: usize,
    pub thresholds: Array2<f64>,
}

/// Φ(x): windowed channel means of the (hard or soft) encoding.
#[derive(Debug, Clone)]
pub struct PooledFeatureMap {
    pub values: Array3<f64>,
    pub kernel: usize,
    pub stride: usize,
}

/// im2col: all P×P patches of the image as rows, channel-planar order,
/// row-major over positions.
fn patch_matrix(image: &Image, p: usize) -> Array2<f64> {
    let n = image.side();
    let m = n - p + 1;
    let d = 3 * p * p;
    let mut cols = Array2::zeros((m * m, d));
    for row in 0..m {
        for col in 0..m {
            let mut k = 0;
            for c in 0..3 {
                for dr in 0..p {
                    for dc in 0..p {
                        cols[[row * m + col, k]] = image.pixels[[c, row + dr, col + dc]] as f64;
                        k += 1;
                    }
                }
            }
        }
    }
    cols
}

pub fn compute_scores(image: &Image, filters: &EncoderFilters) -> Result<ScoreMap> {
    let n = image.side();
    let p = filters.patch_side;
    if p > n {
        return Err(Error::Dimension(format!(
            "patch side {p} exceeds image side {n}"
        )));
    }
    let m = n - p + 1;
    let cols = patch_matrix(image, p);
    // whitened inner products ⟨w, a⟩ for the positive atoms
    let ips = cols.dot(&filters.filters.t());
    let base = filters.base_size;
    let mut scores = Array3::zeros((2 * base, m, m));
    for pos in 0..m * m {
        let (i, j) = (pos / m, pos % m);
        for d in 0..base {
            let c = ips[[pos, d]] - filters.mean_dots[d];
            let h = filters.half_sq_norms[d];
            scores[[d, i, j]] = h - c;
            scores[[d + base, i, j]] = h + c;
        }
    }
    Ok(ScoreMap {
        scores,
        base_size: base,
    })
}

/// Ranks of the Q smallest scores at one position, ties at equal score
/// broken by lower atom index.
fn select_q_smallest(scored: &mut [(f64, u32)], q: usize) -> f64 {
    let cmp = |a: &(f64, u32), b: &(f64, u32)| {
        a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
    };
    scored.select_nth_unstable_by(q - 1, cmp);
    scored[q - 1].0
}

pub fn encode_hard(score_map: &ScoreMap, q: usize) -> Result<BinaryFeatureMap> {
    let (channels, h, w) = score_map.scores.dim();
    if q == 0 || q > channels {
        return Err(Error::InvalidArgument(format!(
            "Q={q} out of range 1..={channels}"
        )));
    }
    let mut bits = Array3::zeros((channels, h, w));
    let mut thresholds = Array2::zeros((h, w));
    let mut scored: Vec<(f64, u32)> = Vec::with_capacity(channels);
    for i in 0..h {
        for j in 0..w {
            scored.clear();
            scored.extend((0..channels).map(|c| (score_map.scores[[c, i, j]], c as u32)));
            let tau = select_q_smallest(&mut scored, q);
            thresholds[[i, j]] = tau;
            for &(_, c) in scored[..q].iter() {
                bits[[c as usize, i, j]] = 1;
            }
        }
    }
    Ok(BinaryFeatureMap {
        bits,
        q,
        thresholds,
    })
}

/// Soft-assignment variant: sigmoid of (surrogate − τ), with τ the Q-th
/// smallest surrogate at the position. An atom exactly at the threshold
/// maps to 0.5.
pub fn encode_soft(score_map: &ScoreMap, q: usize) -> Result<Array3<f64>> {
    let (channels, h, w) = score_map.scores.dim();
    if q == 0 || q > channels {
        return Err(Error::InvalidArgument(format!(
            "Q={q} out of range 1..={channels}"
        )));
    }
    let mut out = Array3::zeros((channels, h, w));
    let mut scored: Vec<(f64, u32)> = Vec::with_capacity(channels);
    for i in 0..h {
        for j in 0..w {
            scored.clear();
            scored.extend((0..channels).map(|c| (score_map.scores[[c, i, j]], c as u32)));
            let tau = select_q_smallest(&mut scored, q);
            for c in 0..channels {
                out[[c, i, j]] = 1.0 / (1.0 + (score_map.scores[[c, i, j]] - tau).exp());
            }
        }
    }
    Ok(out)
}

pub fn pooled_side(input: usize, kernel: usize, stride: usize) -> usize {
    (input - kernel) / stride + 1
}

/// Per-channel mean over k×k windows with the given stride.
pub fn pool(features: &ArrayView3<'_, f64>, kernel: usize, stride: usize) -> Result<PooledFeatureMap> {
    let (channels, h, w) = features.dim();
    if kernel == 0 || stride == 0 {
        return Err(Error::InvalidArgument("kernel and stride must be positive".into()));
    }
    if kernel > h || kernel > w {
        return Err(Error::Dimension(format!(
            "pool kernel {kernel} exceeds spatial extent {h}x{w}"
        )));
    }
    let oh = pooled_side(h, kernel, stride);
    let ow = pooled_side(w, kernel, stride);
    let norm = 1.0 / (kernel * kernel) as f64;
    let mut values = Array3::zeros((channels, oh, ow));
    for c in 0..channels {
        for i in 0..oh {
            for j in 0..ow {
                let mut sum = 0.0;
                for di in 0..kernel {
                    for dj in 0..kernel {
                        sum += features[[c, i * stride + di, j * stride + dj]];
                    }
                }
                values[[c, i, j]] = sum * norm;
            }
        }
    }
    Ok(PooledFeatureMap {
        values,
        kernel,
        stride,
    })
}

/// Window bit counts for the hard path; exact integers, so the cache can
/// store them as bytes (value = count / k²).
pub fn pool_counts(bits: &Array3<u8>, kernel: usize, stride: usize) -> Result<Array3<u16>> {
    let (channels, h, w) = bits.dim();
    if kernel > h || kernel > w {
        return Err(Error::Dimension(format!(
            "pool kernel {kernel} exceeds spatial extent {h}x{w}"
        )));
    }
    let oh = pooled_side(h, kernel, stride);
    let ow = pooled_side(w, kernel, stride);
    let mut counts = Array3::zeros((channels, oh, ow));
    for c in 0..channels {
        for i in 0..oh {
            for j in 0..ow {
                let mut sum = 0u16;
                for di in 0..kernel {
                    for dj in 0..kernel {
                        sum += bits[[c, i * stride + di, j * stride + dj]] as u16;
                    }
                }
                counts[[c, i, j]] = sum;
            }
        }
    }
    Ok(counts)
}

/// Squared Hamming distance ‖φ(x)−φ(y)‖²: the number of differing bits.
pub fn encoding_distance(a: &BinaryFeatureMap, b: &BinaryFeatureMap) -> Result<f64> {
    if a.bits.dim() != b.bits.dim() {
        return Err(Error::Dimension(format!(
            "shape mismatch {:?} vs {:?}",
            a.bits.dim(),
            b.bits.dim()
        )));
    }
    let count = a
        .bits
        .iter()
        .zip(b.bits.iter())
        .filter(|(x, y)| x != y)
        .count();
    Ok(count as f64)
}

/// Full per-image pipeline: scores → encoding → pooling.
pub fn encode_image(
    image: &Image,
    filters: &EncoderFilters,
    q: usize,
    assignment: Assignment,
    kernel: usize,
    stride: usize,
) -> Result<PooledFeatureMap> {
    let scores = compute_scores(image, filters)?;
    match assignment {
        Assignment::Hard => {
            let bits = encode_hard(&scores, q)?;
            let as_real = bits.bits.mapv(f64::from);
            pool(&as_real.view(), kernel, stride)
        }
        Assignment::Soft => {
            let soft = encode_soft(&scores, q)?;
            pool(&soft.view(), kernel, stride)
        }
    }
}
