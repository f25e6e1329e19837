//! Random patch dictionaries: sampled from training images, whitened,
//! and augmented with negated atoms for contrast invariance.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataset::{patch_at, LabeledImageSet};
use crate::error::{Error, Result};
use crate::io;
use crate::whitening::{whiten, WhiteningOperator};

/// Where a positive atom came from: (image index, row, col).
pub type Provenance = (u32, u32, u32);

/// Ordered atom set of length 2·|D|: the first |D| whitened patches,
/// then their negations in matching order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    pub atoms: Array2<f64>,
    pub base_size: usize,
    pub patch_side: usize,
    pub source_seed: u64,
    pub whitening_ref: u64,
    pub provenance: Vec<Provenance>,
}

impl Dictionary {
    pub fn atom_dim(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn atom(&self, i: usize) -> ndarray::ArrayView1<'_, f64> {
        self.atoms.row(i)
    }
}

impl WhiteningOperator {
    /// Cheap content fingerprint used to tie a dictionary to the operator
    /// it was whitened with.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: f64| {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x1000_0000_01b3);
        };
        mix(self.regularizer);
        mix(self.orientation.as_byte() as f64);
        for &v in self.mean.iter() {
            mix(v);
        }
        for &v in self.matrix.iter() {
            mix(v);
        }
        h
    }
}

fn append_negations(positives: Vec<Vec<f64>>, dim: usize) -> Array2<f64> {
    let base = positives.len();
    let mut atoms = Array2::zeros((2 * base, dim));
    for (i, v) in positives.iter().enumerate() {
        for (j, &x) in v.iter().enumerate() {
            atoms[[i, j]] = x;
            atoms[[i + base, j]] = -x;
        }
    }
    atoms
}

/// Draw |D| patches uniformly with replacement over (image, row, col),
/// whiten each, append negations.
pub fn sample_dictionary<R: Rng>(
    dataset: &LabeledImageSet,
    size: usize,
    patch_side: usize,
    op: &WhiteningOperator,
    seed_label: u64,
    rng: &mut R,
) -> Result<Dictionary> {
    if size == 0 {
        return Err(Error::InvalidArgument("dictionary size must be >= 1".into()));
    }
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let n = dataset.images[0].side();
    if patch_side > n {
        return Err(Error::InvalidArgument(format!(
            "patch side {patch_side} exceeds image side {n}"
        )));
    }
    let max_origin = n - patch_side;
    let mut positives = Vec::with_capacity(size);
    let mut provenance = Vec::with_capacity(size);
    for _ in 0..size {
        let img = rng.gen_range(0..dataset.len());
        let row = rng.gen_range(0..=max_origin);
        let col = rng.gen_range(0..=max_origin);
        let patch = patch_at(&dataset.images[img], row, col, patch_side);
        positives.push(whiten(&patch, op)?.values);
        provenance.push((img as u32, row as u32, col as u32));
    }
    let dim = op.dim();
    Ok(Dictionary {
        atoms: append_negations(positives, dim),
        base_size: size,
        patch_side,
        source_seed: seed_label,
        whitening_ref: op.fingerprint(),
        provenance,
    })
}

/// Data-independent ablation dictionary: i.i.d. standard normal atoms,
/// no whitening, no provenance.
pub fn sample_gaussian_dictionary<R: Rng>(
    size: usize,
    patch_side: usize,
    seed_label: u64,
    rng: &mut R,
) -> Result<Dictionary> {
    if size == 0 {
        return Err(Error::InvalidArgument("dictionary size must be >= 1".into()));
    }
    let dim = 3 * patch_side * patch_side;
    let positives: Vec<Vec<f64>> = (0..size)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    Ok(Dictionary {
        atoms: append_negations(positives, dim),
        base_size: size,
        patch_side,
        source_seed: seed_label,
        whitening_ref: 0,
        provenance: Vec::new(),
    })
}

const DICT_MAGIC: u32 = 0x5044_4354; // "PDCT"
const DICT_VERSION: u32 = 1;

pub fn save_dictionary(dict: &Dictionary, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    (|| {
        io::write_u32(&mut w, DICT_MAGIC)?;
        io::write_u32(&mut w, DICT_VERSION)?;
        io::write_u64(&mut w, dict.base_size as u64)?;
        io::write_u32(&mut w, dict.patch_side as u32)?;
        io::write_u64(&mut w, dict.source_seed)?;
        io::write_u32(&mut w, dict.atom_dim() as u32)?;
        io::write_u64(&mut w, dict.whitening_ref)?;
        io::write_u8(&mut w, u8::from(!dict.provenance.is_empty()))?;
        io::write_f64_slice(&mut w, dict.atoms.as_slice().unwrap())?;
        for &(img, row, col) in &dict.provenance {
            io::write_u32(&mut w, img)?;
            io::write_u32(&mut w, row)?;
            io::write_u32(&mut w, col)?;
        }
        Ok(())
    })()
    .map_err(|e: std::io::Error| Error::io(path, e))
}

pub fn load_dictionary(path: &Path) -> Result<Dictionary> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let err = |e: std::io::Error| Error::io(path, e);
    let magic = io::read_u32(&mut r).map_err(err)?;
    if magic != DICT_MAGIC {
        return Err(Error::format(path, "bad magic for dictionary file"));
    }
    let version = io::read_u32(&mut r).map_err(err)?;
    if version != DICT_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let base_size = io::read_u64(&mut r).map_err(err)? as usize;
    let patch_side = io::read_u32(&mut r).map_err(err)? as usize;
    let source_seed = io::read_u64(&mut r).map_err(err)?;
    let dim = io::read_u32(&mut r).map_err(err)? as usize;
    let whitening_ref = io::read_u64(&mut r).map_err(err)?;
    let has_provenance = io::read_u8(&mut r).map_err(err)? != 0;
    let atoms = io::read_f64_vec(&mut r, 2 * base_size * dim)
        .map_err(|_| Error::format(path, "truncated atom data"))?;
    let mut provenance = Vec::new();
    if has_provenance {
        for _ in 0..base_size {
            let img = io::read_u32(&mut r).map_err(|_| Error::format(path, "truncated provenance"))?;
            let row = io::read_u32(&mut r).map_err(|_| Error::format(path, "truncated provenance"))?;
            let col = io::read_u32(&mut r).map_err(|_| Error::format(path, "truncated provenance"))?;
            provenance.push((img, row, col));
        }
    }
    Ok(Dictionary {
        atoms: Array2::from_shape_vec((2 * base_size, dim), atoms).unwrap(),
        base_size,
        patch_side,
        source_seed,
        whitening_ref,
        provenance,
    })
}
