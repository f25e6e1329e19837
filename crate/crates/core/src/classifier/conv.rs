//! Valid, stride-1 2-D convolution (cross-correlation) with explicit
//! reverse-mode gradients, via im2col and matrix products.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, Axis};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ConvOperator {
    /// [out_channels, in_channels, k, k]
    pub weights: Array4<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub weights: Array4<f64>,
    pub bias: Array1<f64>,
}

impl ConvOperator {
    /// Fan-in scaled uniform init in [-1/√fanIn, 1/√fanIn], zero bias.
    pub fn new_uniform<R: Rng>(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let a = 1.0 / fan_in.sqrt();
        let weights = Array4::from_shape_fn((out_channels, in_channels, kernel, kernel), |_| {
            rng.gen_range(-a..a)
        });
        ConvOperator {
            weights,
            bias: Array1::zeros(out_channels),
        }
    }

    pub fn zeros(out_channels: usize, in_channels: usize, kernel: usize) -> Self {
        ConvOperator {
            weights: Array4::zeros((out_channels, in_channels, kernel, kernel)),
            bias: Array1::zeros(out_channels),
        }
    }

    pub fn kernel(&self) -> usize {
        self.weights.shape()[3]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|v| v.is_finite()) && self.bias.iter().all(|v| v.is_finite())
    }
}

fn im2col(x: &ArrayView3<'_, f64>, k: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let oh = h - k + 1;
    let ow = w - k + 1;
    let mut cols = Array2::zeros((oh * ow, c * k * k));
    for i in 0..oh {
        for j in 0..ow {
            let mut idx = 0;
            let row = i * ow + j;
            for ch in 0..c {
                for di in 0..k {
                    for dj in 0..k {
                        cols[[row, idx]] = x[[ch, i + di, j + dj]];
                        idx += 1;
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &Array2<f64>, c: usize, h: usize, w: usize, k: usize) -> Array3<f64> {
    let oh = h - k + 1;
    let ow = w - k + 1;
    let mut dx = Array3::zeros((c, h, w));
    for i in 0..oh {
        for j in 0..ow {
            let row = i * ow + j;
            let mut idx = 0;
            for ch in 0..c {
                for di in 0..k {
                    for dj in 0..k {
                        dx[[ch, i + di, j + dj]] += dcols[[row, idx]];
                        idx += 1;
                    }
                }
            }
        }
    }
    dx
}

fn weight_matrix(op: &ConvOperator) -> Array2<f64> {
    let (o, c, k, _) = op.weights.dim();
    op.weights
        .view()
        .into_shape_with_order((o, c * k * k))
        .unwrap()
        .to_owned()
}

pub fn conv_output_side(input: usize, kernel: usize) -> usize {
    input - kernel + 1
}

/// Forward pass over a batch [B, C, H, W] -> [B, O, H-k+1, W-k+1].
pub fn conv_forward(op: &ConvOperator, x: &Array4<f64>) -> Result<Array4<f64>> {
    let (b, c, h, w) = x.dim();
    let k = op.kernel();
    if c != op.in_channels() {
        return Err(Error::Dimension(format!(
            "conv expects {} input channels, got {c}",
            op.in_channels()
        )));
    }
    if k > h || k > w {
        return Err(Error::Dimension(format!(
            "kernel {k} exceeds input extent {h}x{w}"
        )));
    }
    let o = op.out_channels();
    let oh = conv_output_side(h, k);
    let ow = conv_output_side(w, k);
    let wmat = weight_matrix(op);
    let mut out = Array4::zeros((b, o, oh, ow));
    x.axis_iter(Axis(0))
        .into_par_iter()
        .zip(out.axis_iter_mut(Axis(0)).into_par_iter())
        .for_each(|(xi, mut oi)| {
            let cols = im2col(&xi, k);
            let prod = cols.dot(&wmat.t());
            for ch in 0..o {
                for i in 0..oh {
                    for j in 0..ow {
                        oi[[ch, i, j]] = prod[[i * ow + j, ch]] + op.bias[ch];
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of a scalar loss w.r.t. weights, bias and input, given the
/// upstream gradient `dout`. Per-image contributions are reduced in
/// chunk order so the sum is deterministic.
pub fn conv_backward(
    op: &ConvOperator,
    x: &Array4<f64>,
    dout: &Array4<f64>,
) -> Result<(ConvGrads, Array4<f64>)> {
    let (b, c, h, w) = x.dim();
    let k = op.kernel();
    let o = op.out_channels();
    let (db_, do_, oh, ow) = dout.dim();
    if db_ != b || do_ != o || oh != conv_output_side(h, k) || ow != conv_output_side(w, k) {
        return Err(Error::Dimension("conv backward shape mismatch".into()));
    }
    let wmat = weight_matrix(op);
    let mut dx = Array4::zeros((b, c, h, w));

    let threads = rayon::current_num_threads().max(1);
    let chunk = b.div_ceil(threads);
    let x_chunks: Vec<_> = x.axis_chunks_iter(Axis(0), chunk).collect();
    let dout_chunks: Vec<_> = dout.axis_chunks_iter(Axis(0), chunk).collect();
    let dx_chunks: Vec<_> = dx.axis_chunks_iter_mut(Axis(0), chunk).collect();

    let partials: Vec<(Array2<f64>, Array1<f64>)> = x_chunks
        .into_par_iter()
        .zip(dout_chunks.into_par_iter())
        .zip(dx_chunks.into_par_iter())
        .map(|((xc, doc), mut dxc)| {
            let mut dwmat = Array2::zeros((o, c * k * k));
            let mut dbias = Array1::zeros(o);
            for bi in 0..xc.shape()[0] {
                let xi = xc.index_axis(Axis(0), bi);
                let doi = doc.index_axis(Axis(0), bi);
                let cols = im2col(&xi, k);
                let mut dmat = Array2::zeros((oh * ow, o));
                for ch in 0..o {
                    for i in 0..oh {
                        for j in 0..ow {
                            let g = doi[[ch, i, j]];
                            dmat[[i * ow + j, ch]] = g;
                            dbias[ch] += g;
                        }
                    }
                }
                dwmat += &dmat.t().dot(&cols);
                let dcols = dmat.dot(&wmat);
                let dxi = col2im(&dcols, c, h, w, k);
                dxc.index_axis_mut(Axis(0), bi).assign(&dxi);
            }
            (dwmat, dbias)
        })
        .collect();

    let mut dwmat = Array2::zeros((o, c * k * k));
    let mut dbias = Array1::zeros(o);
    for (dw, db) in partials {
        dwmat += &dw;
        dbias += &db;
    }
    let dweights = dwmat.into_shape_with_order((o, c, k, k)).unwrap();
    Ok((
        ConvGrads {
            weights: dweights,
            bias: dbias,
        },
        dx,
    ))
}
