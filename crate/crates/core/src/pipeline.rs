//! Glue between the dataset, encoder and classifier: feature sources
//! that encode images on demand.

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classifier::{FeatureSource, InMemoryFeatures};
use crate::dataset::{augment, LabeledImageSet};
use crate::encoder::{encode_image, pooled_side, Assignment, EncoderFilters};
use crate::error::Result;

/// Re-encodes augmented images every epoch (the slow path). Each
/// (epoch, image) pair gets its own seeded rng, so parallel fetches are
/// deterministic.
pub struct AugmentingEncoderSource<'a> {
    set: &'a LabeledImageSet,
    filters: &'a EncoderFilters,
    q: usize,
    assignment: Assignment,
    kernel: usize,
    stride: usize,
    augment_seed: u64,
    epoch: usize,
}

impl<'a> AugmentingEncoderSource<'a> {
    pub fn new(
        set: &'a LabeledImageSet,
        filters: &'a EncoderFilters,
        q: usize,
        assignment: Assignment,
        kernel: usize,
        stride: usize,
        augment_seed: u64,
    ) -> Self {
        AugmentingEncoderSource {
            set,
            filters,
            q,
            assignment,
            kernel,
            stride,
            augment_seed,
            epoch: 0,
        }
    }
}

impl FeatureSource for AugmentingEncoderSource<'_> {
    fn len(&self) -> usize {
        self.set.len()
    }

    fn feature_shape(&self) -> (usize, usize, usize) {
        let n = self.set.images[0].side();
        let m = n - self.filters.patch_side + 1;
        let side = pooled_side(m, self.kernel, self.stride);
        (self.filters.num_channels(), side, side)
    }

    fn fetch(&self, idx: usize) -> Result<(u8, ndarray::Array3<f64>)> {
        let image = &self.set.images[idx];
        let per_image_seed = self
            .augment_seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add((self.epoch as u64) << 32)
            .wrapping_add(idx as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(per_image_seed);
        let augmented = augment(image, &mut rng);
        let pooled = encode_image(
            &augmented,
            self.filters,
            self.q,
            self.assignment,
            self.kernel,
            self.stride,
        )?;
        Ok((image.label.unwrap_or(0), pooled.values))
    }

    fn begin_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }
}

/// Encode an entire set into memory without augmentation.
pub fn encode_set_in_memory(
    set: &LabeledImageSet,
    filters: &EncoderFilters,
    q: usize,
    assignment: Assignment,
    kernel: usize,
    stride: usize,
) -> Result<InMemoryFeatures> {
    use rayon::prelude::*;
    let n = set.len();
    let encoded: Vec<_> = set
        .images
        .par_iter()
        .map(|image| encode_image(image, filters, q, assignment, kernel, stride))
        .collect::<Result<Vec<_>>>()?;
    let (c, h, w) = encoded[0].values.dim();
    let mut features = Array4::zeros((n, c, h, w));
    let mut labels = Vec::with_capacity(n);
    for (i, pooled) in encoded.into_iter().enumerate() {
        features
            .index_axis_mut(ndarray::Axis(0), i)
            .assign(&pooled.values);
        labels.push(set.images[i].label.unwrap_or(0));
    }
    Ok(InMemoryFeatures { features, labels })
}
