//! On-disk cache of pooled features, one fixed-size quantized record per
//! image. Hard-assignment pools are stored as exact window bit counts
//! (one byte each, k² ≤ 255); soft-assignment pools as 16-bit fixed
//! point with step 1/65535.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rayon::prelude::*;

use crate::dataset::LabeledImageSet;
use crate::encoder::{encode_image, pool_counts, pooled_side, Assignment, EncoderFilters};
use crate::error::{Error, Result};
use crate::io;

const CACHE_MAGIC: u32 = 0x5056_5143; // "PVQC"
const CACHE_VERSION: u32 = 1;
const HEADER_LEN: u64 = 4 + 4 + 4 + 4 + 4 + 4 + 1 + 1 + 1 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheShape {
    pub count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub assignment: Assignment,
    pub kernel: usize,
    pub stride: usize,
}

impl CacheShape {
    fn bytes_per_value(&self) -> usize {
        match self.assignment {
            Assignment::Hard => 1,
            Assignment::Soft => 2,
        }
    }

    fn record_len(&self) -> usize {
        1 + self.channels * self.height * self.width * self.bytes_per_value()
    }
}

pub struct FeatureCache {
    file: File,
    pub shape: CacheShape,
    pub path: PathBuf,
}

fn write_header<W: Write>(w: &mut W, shape: &CacheShape) -> std::io::Result<()> {
    io::write_u32(w, CACHE_MAGIC)?;
    io::write_u32(w, CACHE_VERSION)?;
    io::write_u32(w, shape.count as u32)?;
    io::write_u32(w, shape.channels as u32)?;
    io::write_u32(w, shape.height as u32)?;
    io::write_u32(w, shape.width as u32)?;
    io::write_u8(w, match shape.assignment {
        Assignment::Hard => 0,
        Assignment::Soft => 1,
    })?;
    io::write_u8(w, match shape.assignment {
        Assignment::Hard => 0, // count quantization
        Assignment::Soft => 1, // 16-bit fixed point
    })?;
    io::write_u8(w, shape.kernel as u8)?;
    io::write_u8(w, shape.stride as u8)
}

fn quantize_record(
    label: u8,
    features: &EncodedFeatures,
    shape: &CacheShape,
    out: &mut Vec<u8>,
) {
    out.clear();
    out.push(label);
    match features {
        EncodedFeatures::Counts(counts) => {
            debug_assert!(shape.kernel * shape.kernel <= 255);
            out.extend(counts.iter().map(|&c| c as u8));
        }
        EncodedFeatures::Soft(values) => {
            for &v in values.iter() {
                let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
                out.extend_from_slice(&q.to_le_bytes());
            }
        }
    }
}

enum EncodedFeatures {
    Counts(Array3<u16>),
    Soft(Array3<f64>),
}

/// Encode every image of the set and stream quantized records to
/// `path`. Images are processed in parallel chunks; records are written
/// in dataset order.
pub fn encode_dataset(
    set: &LabeledImageSet,
    filters: &EncoderFilters,
    q: usize,
    assignment: Assignment,
    kernel: usize,
    stride: usize,
    path: &Path,
) -> Result<CacheShape> {
    if set.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let n = set.images[0].side();
    let m = n - filters.patch_side + 1;
    if assignment == Assignment::Hard && kernel * kernel > 255 {
        return Err(Error::InvalidArgument(format!(
            "pool kernel {kernel} too large for byte counts"
        )));
    }
    let shape = CacheShape {
        count: set.len(),
        channels: filters.num_channels(),
        height: pooled_side(m, kernel, stride),
        width: pooled_side(m, kernel, stride),
        assignment,
        kernel,
        stride,
    };
    let tmp = path.with_extension("tmp");
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = BufWriter::new(file);
    write_header(&mut w, &shape).map_err(|e| Error::io(&tmp, e))?;

    let chunk_size = 64;
    let mut record = Vec::new();
    for chunk in set.images.chunks(chunk_size) {
        let encoded: Vec<(u8, EncodedFeatures)> = chunk
            .par_iter()
            .map(|image| {
                let label = image.label.unwrap_or(0);
                let features = match assignment {
                    Assignment::Hard => {
                        let scores = crate::encoder::compute_scores(image, filters)?;
                        let bits = crate::encoder::encode_hard(&scores, q)?;
                        EncodedFeatures::Counts(pool_counts(&bits.bits, kernel, stride)?)
                    }
                    Assignment::Soft => EncodedFeatures::Soft(
                        encode_image(image, filters, q, assignment, kernel, stride)?.values,
                    ),
                };
                Ok((label, features))
            })
            .collect::<Result<_>>()?;
        for (label, features) in &encoded {
            quantize_record(*label, features, &shape, &mut record);
            w.write_all(&record).map_err(|e| Error::io(&tmp, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&tmp, e))?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(shape)
}

impl FeatureCache {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut header = [0u8; HEADER_LEN as usize];
        file.read_exact_at(&mut header, 0)
            .map_err(|_| Error::format(path, "truncated cache header"))?;
        let u32_at = |off: usize| u32::from_le_bytes(header[off..off + 4].try_into().unwrap());
        if u32_at(0) != CACHE_MAGIC {
            return Err(Error::format(path, "bad magic for feature cache"));
        }
        if u32_at(4) != CACHE_VERSION {
            return Err(Error::format(path, format!("unsupported version {}", u32_at(4))));
        }
        let assignment = match header[24] {
            0 => Assignment::Hard,
            1 => Assignment::Soft,
            b => return Err(Error::format(path, format!("bad assignment byte {b}"))),
        };
        let shape = CacheShape {
            count: u32_at(8) as usize,
            channels: u32_at(12) as usize,
            height: u32_at(16) as usize,
            width: u32_at(20) as usize,
            assignment,
            kernel: header[26] as usize,
            stride: header[27] as usize,
        };
        let expected = HEADER_LEN + (shape.count * shape.record_len()) as u64;
        let actual = file.metadata().map_err(|e| Error::io(path, e))?.len();
        if actual != expected {
            return Err(Error::format(
                path,
                format!("partial cache: {actual} bytes on disk, expected {expected}"),
            ));
        }
        Ok(FeatureCache {
            file,
            shape,
            path: path.to_path_buf(),
        })
    }

    pub fn len(&self) -> usize {
        self.shape.count
    }

    pub fn is_empty(&self) -> bool {
        self.shape.count == 0
    }

    fn record_offset(&self, idx: usize) -> u64 {
        HEADER_LEN + (idx * self.shape.record_len()) as u64
    }

    pub fn label(&self, idx: usize) -> Result<u8> {
        let mut b = [0u8; 1];
        self.file
            .read_exact_at(&mut b, self.record_offset(idx))
            .map_err(|e| Error::io(&self.path, e))?;
        Ok(b[0])
    }

    pub fn labels(&self) -> Result<Vec<u8>> {
        (0..self.len()).map(|i| self.label(i)).collect()
    }

    /// Dequantized features for one image, plus its label. Thread-safe:
    /// reads use positioned I/O with no shared cursor.
    pub fn fetch(&self, idx: usize) -> Result<(u8, Array3<f64>)> {
        if idx >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "record index {idx} out of range {}",
                self.len()
            )));
        }
        let mut buf = vec![0u8; self.shape.record_len()];
        self.file
            .read_exact_at(&mut buf, self.record_offset(idx))
            .map_err(|e| Error::io(&self.path, e))?;
        let label = buf[0];
        let n = self.shape.channels * self.shape.height * self.shape.width;
        let mut values = Vec::with_capacity(n);
        match self.shape.assignment {
            Assignment::Hard => {
                let norm = 1.0 / (self.shape.kernel * self.shape.kernel) as f64;
                values.extend(buf[1..].iter().map(|&c| c as f64 * norm));
            }
            Assignment::Soft => {
                for pair in buf[1..].chunks_exact(2) {
                    let q = u16::from_le_bytes(pair.try_into().unwrap());
                    values.push(q as f64 / 65535.0);
                }
            }
        }
        Ok((
            label,
            Array3::from_shape_vec(
                (self.shape.channels, self.shape.height, self.shape.width),
                values,
            )
            .unwrap(),
        ))
    }
}
