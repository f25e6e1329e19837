//! Patch moment estimation and the regularized whitening operator
//! W = (λI + Σ)^{-1/2}.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::dataset::Patch;
use crate::error::{Error, Result};
use crate::io;
use crate::linalg::{self, EigenDecomposition};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    Zca,
    Pca,
}

impl Orientation {
    pub fn as_byte(self) -> u8 {
        match self {
            Orientation::Zca => 0,
            Orientation::Pca => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Orientation::Zca),
            1 => Some(Orientation::Pca),
            _ => None,
        }
    }
}

impl std::str::FromStr for Orientation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "zca" => Ok(Orientation::Zca),
            "pca" => Ok(Orientation::Pca),
            other => Err(format!("unknown orientation {other:?}")),
        }
    }
}

/// Empirical mean and biased (1/n) covariance of a patch sample.
#[derive(Debug, Clone)]
pub struct PatchMoments {
    pub mean: Array1<f64>,
    pub covariance: Array2<f64>,
    pub sample_count: usize,
}

#[derive(Debug, Clone)]
pub struct WhiteningOperator {
    pub matrix: Array2<f64>,
    pub mean: Array1<f64>,
    pub regularizer: f64,
    pub orientation: Orientation,
}

impl WhiteningOperator {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Identity operator, handy for tests and raw-space analysis.
    pub fn identity(dim: usize) -> Self {
        WhiteningOperator {
            matrix: Array2::eye(dim),
            mean: Array1::zeros(dim),
            regularizer: 0.0,
            orientation: Orientation::Zca,
        }
    }
}

struct MomentAccumulator {
    sum: Array1<f64>,
    outer: Array2<f64>,
    count: usize,
}

impl MomentAccumulator {
    fn new(dim: usize) -> Self {
        MomentAccumulator {
            sum: Array1::zeros(dim),
            outer: Array2::zeros((dim, dim)),
            count: 0,
        }
    }

    fn add(&mut self, values: &[f64]) {
        let d = values.len();
        for (s, &v) in self.sum.iter_mut().zip(values) {
            *s += v;
        }
        let outer = self.outer.as_slice_mut().unwrap();
        for i in 0..d {
            let vi = values[i];
            let row = &mut outer[i * d..(i + 1) * d];
            for (o, &vj) in row.iter_mut().zip(values) {
                *o += vi * vj;
            }
        }
        self.count += 1;
    }

    fn merge(mut self, other: MomentAccumulator) -> Self {
        self.sum += &other.sum;
        self.outer += &other.outer;
        self.count += other.count;
        self
    }
}

/// Sample mean and biased covariance, symmetrized as (A+Aᵀ)/2. Partial
/// sums are accumulated per chunk and merged in chunk order so the result
/// does not depend on scheduling.
pub fn estimate_patch_moments(patches: &[Patch]) -> Result<PatchMoments> {
    if patches.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 patches, got {}",
            patches.len()
        )));
    }
    let dim = patches[0].values.len();
    if let Some(bad) = patches.iter().find(|p| p.values.len() != dim) {
        return Err(Error::Dimension(format!(
            "inconsistent patch lengths: {} vs {dim}",
            bad.values.len()
        )));
    }

    let chunk = 4096.max(patches.len() / (8 * rayon::current_num_threads().max(1)));
    let partials: Vec<MomentAccumulator> = patches
        .par_chunks(chunk)
        .map(|ps| {
            let mut acc = MomentAccumulator::new(dim);
            for p in ps {
                acc.add(&p.values);
            }
            acc
        })
        .collect();
    let acc = partials
        .into_iter()
        .reduce(|a, b| a.merge(b))
        .expect("nonempty partials");

    let n = acc.count as f64;
    let mean = &acc.sum / n;
    let mut covariance = &acc.outer / n;
    let d = dim;
    for i in 0..d {
        for j in 0..d {
            covariance[[i, j]] -= mean[i] * mean[j];
        }
    }
    // symmetrize to remove floating-point asymmetry
    for i in 0..d {
        for j in (i + 1)..d {
            let s = 0.5 * (covariance[[i, j]] + covariance[[j, i]]);
            covariance[[i, j]] = s;
            covariance[[j, i]] = s;
        }
    }
    Ok(PatchMoments {
        mean,
        covariance,
        sample_count: acc.count,
    })
}

pub use crate::linalg::symmetric_eigendecomposition;

const RANK_DEFICIENCY_TOL: f64 = 1e-12;

/// Build W = (λI + Σ)^{-1/2} in the requested orientation:
/// ZCA gives Q·diag((λ+λᵢ)^{-1/2})·Qᵀ, PCA gives diag((λ+λᵢ)^{-1/2})·Qᵀ.
pub fn build_whitening_operator(
    moments: &PatchMoments,
    lambda: f64,
    orientation: Orientation,
) -> Result<WhiteningOperator> {
    if lambda < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "regularizer must be nonnegative, got {lambda}"
        )));
    }
    let eig = linalg::symmetric_eigendecomposition(&moments.covariance)?.clamp_nonnegative()?;
    if lambda == 0.0 {
        let lead = eig.eigenvalues[0];
        let min = *eig.eigenvalues.last().unwrap();
        if min <= RANK_DEFICIENCY_TOL * lead {
            return Err(Error::Numerical(format!(
                "covariance is rank deficient (min eigenvalue {min}), λ=0 not allowed"
            )));
        }
    }
    let matrix = whitening_matrix(&eig, lambda, orientation);
    Ok(WhiteningOperator {
        matrix,
        mean: moments.mean.clone(),
        regularizer: lambda,
        orientation,
    })
}

fn whitening_matrix(eig: &EigenDecomposition, lambda: f64, orientation: Orientation) -> Array2<f64> {
    match orientation {
        Orientation::Zca => eig.apply_spectral(|ev| 1.0 / (lambda + ev).sqrt()),
        Orientation::Pca => {
            let n = eig.eigenvalues.len();
            let mut m = eig.eigenvectors.t().to_owned();
            for (i, &ev) in eig.eigenvalues.iter().enumerate() {
                let f = 1.0 / (lambda + ev).sqrt();
                for j in 0..n {
                    m[[i, j]] *= f;
                }
            }
            m
        }
    }
}

/// W·(p − μ).
pub fn whiten(patch: &Patch, op: &WhiteningOperator) -> Result<Patch> {
    Ok(Patch {
        values: whiten_values(&patch.values, op)?,
        row: patch.row,
        col: patch.col,
    })
}

pub fn whiten_values(values: &[f64], op: &WhiteningOperator) -> Result<Vec<f64>> {
    let d = op.dim();
    if values.len() != d {
        return Err(Error::Dimension(format!(
            "patch length {} does not match operator dimension {d}",
            values.len()
        )));
    }
    let centered = Array1::from_iter(values.iter().zip(op.mean.iter()).map(|(&v, &m)| v - m));
    Ok(op.matrix.dot(&centered).to_vec())
}

const WHITENING_MAGIC: u32 = 0x5057_4954; // "PWIT"

pub fn save_whitening_operator(op: &WhiteningOperator, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let d = op.dim();
    (|| {
        io::write_u32(&mut w, WHITENING_MAGIC)?;
        io::write_u32(&mut w, d as u32)?;
        io::write_f64(&mut w, op.regularizer)?;
        io::write_u8(&mut w, op.orientation.as_byte())?;
        io::write_f64_slice(&mut w, op.mean.as_slice().unwrap())?;
        let matrix = op.matrix.as_standard_layout();
        io::write_f64_slice(&mut w, matrix.as_slice().unwrap())
    })()
    .map_err(|e| Error::io(path, e))
}

pub fn load_whitening_operator(path: &Path) -> Result<WhiteningOperator> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let magic = io::read_u32(&mut r).map_err(|e| Error::io(path, e))?;
    if magic != WHITENING_MAGIC {
        return Err(Error::format(path, "bad magic for whitening operator file"));
    }
    let d = io::read_u32(&mut r).map_err(|e| Error::io(path, e))? as usize;
    let lambda = io::read_f64(&mut r).map_err(|e| Error::io(path, e))?;
    let orient = io::read_u8(&mut r).map_err(|e| Error::io(path, e))?;
    let orientation = Orientation::from_byte(orient)
        .ok_or_else(|| Error::format(path, format!("bad orientation byte {orient}")))?;
    let mean = io::read_f64_vec(&mut r, d).map_err(|e| Error::io(path, e))?;
    let matrix = io::read_f64_vec(&mut r, d * d).map_err(|e| Error::io(path, e))?;
    Ok(WhiteningOperator {
        matrix: Array2::from_shape_vec((d, d), matrix).unwrap(),
        mean: Array1::from_vec(mean),
        regularizer: lambda,
        orientation,
    })
}
