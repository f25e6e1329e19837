//! Patch-geometry diagnostics: covariance spectrum, covariance
//! dimension (95% variance prefix) and the maximum-likelihood nearest
//! neighbor estimate of intrinsic dimension.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::dataset::{patch_at, LabeledImageSet};
use crate::error::{Error, Result};
use crate::linalg::symmetric_eigendecomposition;
use crate::whitening::{build_whitening_operator, estimate_patch_moments, whiten, Orientation};

/// Singular values of Σ^{1/2}, i.e. square roots of the covariance
/// eigenvalues, sorted descending.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub values: Vec<f64>,
    pub normalized: bool,
}

pub fn covariance_spectrum(covariance: &Array2<f64>, normalize: bool) -> Result<Spectrum> {
    let eig = symmetric_eigendecomposition(covariance)?.clamp_nonnegative()?;
    let mut values: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.sqrt()).collect();
    if normalize {
        let first = values[0];
        if first <= 0.0 {
            return Err(Error::InvalidArgument(
                "cannot normalize an all-zero spectrum".into(),
            ));
        }
        for v in values.iter_mut() {
            *v /= first;
        }
    }
    Ok(Spectrum { values, normalized: normalize })
}

/// Smallest prefix of the (descending) eigenvalue spectrum explaining
/// `threshold` of the total variance.
pub fn covariance_dimension(eigenvalues: &[f64], threshold: f64) -> Result<usize> {
    if eigenvalues.is_empty() {
        return Err(Error::InvalidArgument("empty spectrum".into()));
    }
    let total: f64 = eigenvalues.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("all-zero spectrum".into()));
    }
    let target = threshold * total;
    let mut prefix = 0.0;
    for (i, &v) in eigenvalues.iter().enumerate() {
        prefix += v;
        if prefix >= target {
            return Ok(i + 1);
        }
    }
    Ok(eigenvalues.len())
}

/// Local Levina-Bickel estimate from the sorted ascending distances to
/// the K nearest neighbors: (1/(K−1) Σ log τ_K/τ_k)^{-1}.
pub fn intrinsic_dimension_local(taus: &[f64]) -> Result<f64> {
    let k = taus.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 neighbor distances, got {k}"
        )));
    }
    if taus.iter().any(|&t| t <= 0.0) {
        return Err(Error::InvalidArgument(
            "zero neighbor distance (duplicate point)".into(),
        ));
    }
    let tau_k = taus[k - 1];
    let mean_log: f64 =
        taus[..k - 1].iter().map(|&t| (tau_k / t).ln()).sum::<f64>() / (k - 1) as f64;
    if mean_log <= 0.0 {
        return Err(Error::Numerical("degenerate neighbor distances".into()));
    }
    Ok(1.0 / mean_log)
}

#[derive(Debug, Clone, Copy)]
pub struct IntrinsicDimension {
    pub estimate: f64,
    pub anchors_used: usize,
    pub anchors_skipped: usize,
}

/// Average of the local estimates over anchor points, with exact
/// brute-force k-NN distances. Anchors with a zero-distance neighbor
/// (duplicates) are skipped and counted.
pub fn intrinsic_dimension(
    points: &Array2<f64>,
    k: usize,
    max_anchors: Option<usize>,
    rng: &mut impl Rng,
) -> Result<IntrinsicDimension> {
    let n = points.nrows();
    if k < 2 {
        return Err(Error::InvalidArgument("neighbor horizon K must be >= 2".into()));
    }
    if n <= k {
        return Err(Error::InvalidArgument(format!(
            "sample of {n} points too small for K={k}"
        )));
    }
    let anchors: Vec<usize> = match max_anchors {
        Some(budget) if budget < n => sample(rng, n, budget).into_vec(),
        _ => (0..n).collect(),
    };

    let locals: Vec<Option<f64>> = anchors
        .par_iter()
        .map(|&a| {
            let anchor = points.row(a);
            let mut dists: Vec<f64> = Vec::with_capacity(n - 1);
            for i in 0..n {
                if i == a {
                    continue;
                }
                let d: f64 = points
                    .row(i)
                    .iter()
                    .zip(anchor.iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                dists.push(d.sqrt());
            }
            dists.select_nth_unstable_by(k - 1, |x, y| x.partial_cmp(y).unwrap());
            let mut taus = dists[..k].to_vec();
            taus.sort_by(|x, y| x.partial_cmp(y).unwrap());
            intrinsic_dimension_local(&taus).ok()
        })
        .collect();

    let used: Vec<f64> = locals.iter().flatten().copied().collect();
    if used.is_empty() {
        return Err(Error::Numerical(
            "every anchor was skipped (all duplicates)".into(),
        ));
    }
    Ok(IntrinsicDimension {
        estimate: used.iter().sum::<f64>() / used.len() as f64,
        anchors_used: used.len(),
        anchors_skipped: locals.len() - used.len(),
    })
}

#[derive(Debug, Clone)]
pub struct DimensionReport {
    pub patch_side: usize,
    pub d_ext: usize,
    pub d_cov_raw: usize,
    pub d_cov_white: usize,
    pub d_int_raw: f64,
    pub d_int_white: f64,
}

pub const DIMENSION_CSV_HEADER: &str = "P,dExt,dCovRaw,dCovWhite,dIntRaw,dIntWhite";

impl DimensionReport {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.patch_side, self.d_ext, self.d_cov_raw, self.d_cov_white, self.d_int_raw,
            self.d_int_white
        )
    }
}

pub struct SweepConfig {
    pub patch_sides: Vec<usize>,
    pub lambda: f64,
    /// patches used for moment estimation
    pub moment_sample: usize,
    /// patches used as the k-NN sample
    pub knn_sample: usize,
    pub neighbor_horizon: usize,
    pub anchor_budget: Option<usize>,
    pub seed: u64,
}

fn sample_patch_matrix(
    set: &LabeledImageSet,
    count: usize,
    p: usize,
    rng: &mut impl Rng,
) -> Vec<crate::dataset::Patch> {
    let n = set.images[0].side();
    let max_origin = n - p;
    (0..count)
        .map(|_| {
            let img = rng.gen_range(0..set.len());
            let row = rng.gen_range(0..=max_origin);
            let col = rng.gen_range(0..=max_origin);
            patch_at(&set.images[img], row, col, p)
        })
        .collect()
}

fn patches_to_matrix(patches: &[crate::dataset::Patch]) -> Array2<f64> {
    let d = patches[0].values.len();
    let mut m = Array2::zeros((patches.len(), d));
    for (i, p) in patches.iter().enumerate() {
        for (j, &v) in p.values.iter().enumerate() {
            m[[i, j]] = v;
        }
    }
    m
}

/// Per patch size: extrinsic, covariance and intrinsic dimension on raw
/// and whitened patches.
pub fn dimension_sweep(
    set: &LabeledImageSet,
    config: &SweepConfig,
) -> Result<Vec<DimensionReport>> {
    use rand::SeedableRng;
    let mut reports = Vec::new();
    for &p in &config.patch_sides {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(config.seed ^ (p as u64));
        let moment_patches = sample_patch_matrix(set, config.moment_sample, p, &mut rng);
        let moments = estimate_patch_moments(&moment_patches)?;
        let op = build_whitening_operator(&moments, config.lambda, Orientation::Zca)?;

        let knn_patches = sample_patch_matrix(set, config.knn_sample, p, &mut rng);
        let whitened: Vec<crate::dataset::Patch> = knn_patches
            .iter()
            .map(|patch| whiten(patch, &op))
            .collect::<Result<_>>()?;

        let raw_eigs = symmetric_eigendecomposition(&moments.covariance)?.clamp_nonnegative()?.eigenvalues;
        let d_cov_raw = covariance_dimension(&raw_eigs, 0.95)?;
        let white_moments = estimate_patch_moments(&whitened)?;
        let white_eigs = symmetric_eigendecomposition(&white_moments.covariance)?.clamp_nonnegative()?.eigenvalues;
        let d_cov_white = covariance_dimension(&white_eigs, 0.95)?;

        let raw_matrix = patches_to_matrix(&knn_patches);
        let white_matrix = patches_to_matrix(&whitened);
        let d_int_raw = intrinsic_dimension(
            &raw_matrix,
            config.neighbor_horizon,
            config.anchor_budget,
            &mut rng,
        )?
        .estimate;
        let d_int_white = intrinsic_dimension(
            &white_matrix,
            config.neighbor_horizon,
            config.anchor_budget,
            &mut rng,
        )?
        .estimate;

        reports.push(DimensionReport {
            patch_side: p,
            d_ext: 3 * p * p,
            d_cov_raw,
            d_cov_white,
            d_int_raw,
            d_int_white,
        });
    }
    Ok(reports)
}
