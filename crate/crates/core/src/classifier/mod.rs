//! The trainable head: 2-D batch normalization, a factorized
//! convolutional classifier (optionally with a hidden ReLU layer),
//! cross-entropy, reverse-mode gradients and momentum SGD.

pub mod batchnorm;
pub mod conv;
pub mod loss;
pub mod sgd;
pub mod train;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;

pub use batchnorm::{batchnorm_backward, batchnorm_forward, BatchNormState, BnMode};
pub use conv::{conv_backward, conv_forward, conv_output_side, ConvGrads, ConvOperator};
pub use loss::cross_entropy;
pub use sgd::sgd_momentum_step;
pub use train::{evaluate, train, EpochMetrics, FeatureSource, InMemoryFeatures, TrainConfig};

use crate::error::{Error, Result};
use crate::io;

#[derive(Debug, Clone, Copy)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub k2: usize,
    pub c2: usize,
    pub k3: usize,
    pub hidden_relu: bool,
    pub num_classes: usize,
}

#[derive(Debug, Clone)]
pub struct ClassifierModel {
    pub bn: BatchNormState,
    pub conv1: ConvOperator,
    pub conv2: ConvOperator,
    pub hidden_relu: bool,
}

impl ClassifierModel {
    pub fn new<R: Rng>(config: &ModelConfig, rng: &mut R) -> Self {
        ClassifierModel {
            bn: BatchNormState::new(config.in_channels),
            conv1: ConvOperator::new_uniform(config.c2, config.in_channels, config.k2, rng),
            conv2: ConvOperator::new_uniform(config.num_classes, config.c2, config.k3, rng),
            hidden_relu: config.hidden_relu,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.conv2.out_channels()
    }

    pub fn is_finite(&self) -> bool {
        self.conv1.is_finite()
            && self.conv2.is_finite()
            && self.bn.gamma.iter().all(|v| v.is_finite())
            && self.bn.beta.iter().all(|v| v.is_finite())
    }
}

/// Intermediate activations kept for the backward pass.
pub struct ForwardState {
    bn_fwd: batchnorm::BatchNormForward,
    bn_out: Array4<f64>,
    conv1_out: Array4<f64>,
    relu_out: Option<Array4<f64>>,
    conv2_out_dim: (usize, usize, usize, usize),
}

/// logits = globalMeanPool(conv2(maybeReLU(conv1(batchnorm(Φ))))).
pub fn forward(
    model: &mut ClassifierModel,
    batch: &Array4<f64>,
    mode: BnMode,
) -> Result<(Array2<f64>, ForwardState)> {
    let (bn_out, bn_fwd) = batchnorm_forward(batch, &mut model.bn, mode)?;
    let conv1_out = conv_forward(&model.conv1, &bn_out)?;
    let (conv2_in, relu_out) = if model.hidden_relu {
        let r = conv1_out.mapv(|v| v.max(0.0));
        (r.clone(), Some(r))
    } else {
        (conv1_out.clone(), None)
    };
    let conv2_out = conv_forward(&model.conv2, &conv2_in)?;
    let (b, k, oh, ow) = conv2_out.dim();
    let mut logits = Array2::zeros((b, k));
    let norm = 1.0 / (oh * ow) as f64;
    for bi in 0..b {
        for ki in 0..k {
            let mut sum = 0.0;
            for i in 0..oh {
                for j in 0..ow {
                    sum += conv2_out[[bi, ki, i, j]];
                }
            }
            logits[[bi, ki]] = sum * norm;
        }
    }
    Ok((
        logits,
        ForwardState {
            bn_fwd,
            bn_out,
            conv1_out,
            relu_out,
            conv2_out_dim: (b, k, oh, ow),
        },
    ))
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub conv1: ConvGrads,
    pub conv2: ConvGrads,
}

/// Exact gradients of the scalar loss given its gradient w.r.t. the
/// logits.
pub fn backward(
    model: &ClassifierModel,
    state: &ForwardState,
    dlogits: &Array2<f64>,
) -> Result<Gradients> {
    let (b, k, oh, ow) = state.conv2_out_dim;
    let norm = 1.0 / (oh * ow) as f64;
    let mut dconv2_out = Array4::zeros((b, k, oh, ow));
    for bi in 0..b {
        for ki in 0..k {
            let g = dlogits[[bi, ki]] * norm;
            for i in 0..oh {
                for j in 0..ow {
                    dconv2_out[[bi, ki, i, j]] = g;
                }
            }
        }
    }
    let conv2_in = state.relu_out.as_ref().unwrap_or(&state.conv1_out);
    let (conv2_grads, mut dconv1_out) = conv_backward(&model.conv2, conv2_in, &dconv2_out)?;
    if model.hidden_relu {
        for (g, &v) in dconv1_out.iter_mut().zip(state.conv1_out.iter()) {
            if v <= 0.0 {
                *g = 0.0;
            }
        }
    }
    let (conv1_grads, dbn_out) = conv_backward(&model.conv1, &state.bn_out, &dconv1_out)?;
    let (dgamma, dbeta) = batchnorm_backward(&state.bn_fwd, &dbn_out);
    Ok(Gradients {
        gamma: dgamma,
        beta: dbeta,
        conv1: conv1_grads,
        conv2: conv2_grads,
    })
}

/// Momentum buffers mirroring the trainable tensors.
#[derive(Debug, Clone)]
pub struct Velocity {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub conv1: ConvGrads,
    pub conv2: ConvGrads,
}

impl Velocity {
    pub fn zeros_like(model: &ClassifierModel) -> Self {
        Velocity {
            gamma: Array1::zeros(model.bn.gamma.len()),
            beta: Array1::zeros(model.bn.beta.len()),
            conv1: ConvGrads {
                weights: Array4::zeros(model.conv1.weights.raw_dim()),
                bias: Array1::zeros(model.conv1.bias.len()),
            },
            conv2: ConvGrads {
                weights: Array4::zeros(model.conv2.weights.raw_dim()),
                bias: Array1::zeros(model.conv2.bias.len()),
            },
        }
    }
}

pub fn apply_step(
    model: &mut ClassifierModel,
    grads: &Gradients,
    velocity: &mut Velocity,
    lr: f64,
    momentum: f64,
) {
    let pairs: [(&mut [f64], &[f64], &mut [f64]); 6] = [
        (
            model.bn.gamma.as_slice_mut().unwrap(),
            grads.gamma.as_slice().unwrap(),
            velocity.gamma.as_slice_mut().unwrap(),
        ),
        (
            model.bn.beta.as_slice_mut().unwrap(),
            grads.beta.as_slice().unwrap(),
            velocity.beta.as_slice_mut().unwrap(),
        ),
        (
            model.conv1.weights.as_slice_mut().unwrap(),
            grads.conv1.weights.as_slice().unwrap(),
            velocity.conv1.weights.as_slice_mut().unwrap(),
        ),
        (
            model.conv1.bias.as_slice_mut().unwrap(),
            grads.conv1.bias.as_slice().unwrap(),
            velocity.conv1.bias.as_slice_mut().unwrap(),
        ),
        (
            model.conv2.weights.as_slice_mut().unwrap(),
            grads.conv2.weights.as_slice().unwrap(),
            velocity.conv2.weights.as_slice_mut().unwrap(),
        ),
        (
            model.conv2.bias.as_slice_mut().unwrap(),
            grads.conv2.bias.as_slice().unwrap(),
            velocity.conv2.bias.as_slice_mut().unwrap(),
        ),
    ];
    for (p, g, v) in pairs {
        sgd_momentum_step(p, g, v, lr, momentum);
    }
}

/// Predicted class per batch row.
pub fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap()
        })
        .collect()
}

const MODEL_MAGIC: u32 = 0x504d_444c; // "PMDL"
const MODEL_VERSION: u32 = 1;

fn write_tensor<W: std::io::Write>(w: &mut W, shape: &[usize], data: &[f64]) -> std::io::Result<()> {
    io::write_u32(w, shape.len() as u32)?;
    for &s in shape {
        io::write_u32(w, s as u32)?;
    }
    io::write_f64_slice(w, data)
}

fn read_tensor<R: std::io::Read>(r: &mut R) -> std::io::Result<(Vec<usize>, Vec<f64>)> {
    let rank = io::read_u32(r)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(io::read_u32(r)? as usize);
    }
    let n: usize = shape.iter().product();
    Ok((shape.clone(), io::read_f64_vec(r, n)?))
}

pub fn save_model(model: &ClassifierModel, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    (|| {
        io::write_u32(&mut w, MODEL_MAGIC)?;
        io::write_u32(&mut w, MODEL_VERSION)?;
        io::write_u8(&mut w, u8::from(model.hidden_relu))?;
        io::write_f64(&mut w, model.bn.epsilon)?;
        io::write_f64(&mut w, model.bn.momentum)?;
        for arr in [
            &model.bn.gamma,
            &model.bn.beta,
            &model.bn.running_mean,
            &model.bn.running_var,
        ] {
            write_tensor(&mut w, &[arr.len()], arr.as_slice().unwrap())?;
        }
        for conv in [&model.conv1, &model.conv2] {
            write_tensor(&mut w, conv.weights.shape(), conv.weights.as_slice().unwrap())?;
            write_tensor(&mut w, &[conv.bias.len()], conv.bias.as_slice().unwrap())?;
        }
        Ok(())
    })()
    .map_err(|e: std::io::Error| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ClassifierModel> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let err = |e: std::io::Error| Error::io(path, e);
    if io::read_u32(&mut r).map_err(err)? != MODEL_MAGIC {
        return Err(Error::format(path, "bad magic for model checkpoint"));
    }
    let version = io::read_u32(&mut r).map_err(err)?;
    if version != MODEL_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let hidden_relu = io::read_u8(&mut r).map_err(err)? != 0;
    let epsilon = io::read_f64(&mut r).map_err(err)?;
    let momentum = io::read_f64(&mut r).map_err(err)?;
    let mut vectors = Vec::new();
    for _ in 0..4 {
        let (_, data) = read_tensor(&mut r).map_err(err)?;
        vectors.push(Array1::from_vec(data));
    }
    let mut convs = Vec::new();
    for _ in 0..2 {
        let (shape, data) = read_tensor(&mut r).map_err(err)?;
        if shape.len() != 4 {
            return Err(Error::format(path, "expected rank-4 weight tensor"));
        }
        let weights =
            Array4::from_shape_vec((shape[0], shape[1], shape[2], shape[3]), data).unwrap();
        let (_, bias) = read_tensor(&mut r).map_err(err)?;
        convs.push(ConvOperator {
            weights,
            bias: Array1::from_vec(bias),
        });
    }
    let conv2 = convs.pop().unwrap();
    let conv1 = convs.pop().unwrap();
    let mut iter = vectors.into_iter();
    Ok(ClassifierModel {
        bn: BatchNormState {
            gamma: iter.next().unwrap(),
            beta: iter.next().unwrap(),
            running_mean: iter.next().unwrap(),
            running_var: iter.next().unwrap(),
            epsilon,
            momentum,
        },
        conv1,
        conv2,
        hidden_relu,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn toy_config(hidden: bool) -> ModelConfig {
        ModelConfig {
            in_channels: 6,
            k2: 1,
            c2: 4,
            k3: 2,
            hidden_relu: hidden,
            num_classes: 3,
        }
    }

    fn random_batch(b: usize, c: usize, h: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((b, c, h, h), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn zero_weights_yield_bias_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = ClassifierModel::new(&toy_config(false), &mut rng);
        model.conv1.weights.fill(0.0);
        model.conv2.weights.fill(0.0);
        model.conv2.bias = Array1::from_vec(vec![0.1, -0.2, 0.3]);
        let batch = random_batch(4, 6, 3, 2);
        let (logits, _) = forward(&mut model, &batch, BnMode::Train).unwrap();
        for bi in 0..4 {
            for (ki, &b) in model.conv2.bias.iter().enumerate() {
                assert!((logits[[bi, ki]] - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_pixel_reduces_to_matrix_products() {
        let config = ModelConfig {
            in_channels: 5,
            k2: 1,
            c2: 4,
            k3: 1,
            hidden_relu: false,
            num_classes: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = ClassifierModel::new(&config, &mut rng);
        let batch = random_batch(2, 5, 1, 4);
        let (logits, _) = forward(&mut model, &batch, BnMode::Eval).unwrap();
        // oracle: y = W2·(W1·x̂ + b1) + b2 with x̂ the eval-mode affine map
        for bi in 0..2 {
            let mut x_hat = [0.0; 5];
            for c in 0..5 {
                let inv = 1.0 / (model.bn.running_var[c] + model.bn.epsilon).sqrt();
                x_hat[c] = model.bn.gamma[c] * (batch[[bi, c, 0, 0]] - model.bn.running_mean[c])
                    * inv
                    + model.bn.beta[c];
            }
            let mut hid = [0.0; 4];
            for o in 0..4 {
                hid[o] = model.conv1.bias[o];
                for c in 0..5 {
                    hid[o] += model.conv1.weights[[o, c, 0, 0]] * x_hat[c];
                }
            }
            for ki in 0..3 {
                let mut y = model.conv2.bias[ki];
                for o in 0..4 {
                    y += model.conv2.weights[[ki, o, 0, 0]] * hid[o];
                }
                assert!((logits[[bi, ki]] - y).abs() < 1e-10);
            }
        }
    }

    fn finite_difference_check(hidden: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = ClassifierModel::new(&toy_config(hidden), &mut rng);
        let batch = random_batch(4, 6, 3, 6);
        let labels = [0u8, 1, 2, 1];

        let (logits, state) = forward(&mut model, &batch, BnMode::Train).unwrap();
        let (_, dlogits) = cross_entropy(&logits, &labels).unwrap();
        let grads = backward(&model, &state, &dlogits).unwrap();

        let step = 1e-4;
        let rel_tol = 1e-3;
        let check = |model: &mut ClassifierModel, tensor: fn(&mut ClassifierModel) -> &mut [f64], analytic: &[f64]| {
            let n = analytic.len();
            for i in (0..n).step_by((n / 6).max(1)) {
                let orig = tensor(model)[i];
                tensor(model)[i] = orig + step;
                let (l1, _) = {
                    let mut snapshot = model.clone();
                    let (lg, _) = forward(&mut snapshot, &batch, BnMode::Train).unwrap();
                    cross_entropy(&lg, &labels).unwrap()
                };
                tensor(model)[i] = orig - step;
                let (l2, _) = {
                    let mut snapshot = model.clone();
                    let (lg, _) = forward(&mut snapshot, &batch, BnMode::Train).unwrap();
                    cross_entropy(&lg, &labels).unwrap()
                };
                tensor(model)[i] = orig;
                let fd = (l1 - l2) / (2.0 * step);
                let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
                assert!(
                    (analytic[i] - fd).abs() / denom <= rel_tol,
                    "hidden={hidden} param {i}: analytic {} vs fd {fd}",
                    analytic[i]
                );
            }
        };
        let g = grads.clone();
        check(&mut model, |m| m.bn.gamma.as_slice_mut().unwrap(), g.gamma.as_slice().unwrap());
        check(&mut model, |m| m.bn.beta.as_slice_mut().unwrap(), g.beta.as_slice().unwrap());
        check(
            &mut model,
            |m| m.conv1.weights.as_slice_mut().unwrap(),
            g.conv1.weights.as_slice().unwrap(),
        );
        check(
            &mut model,
            |m| m.conv1.bias.as_slice_mut().unwrap(),
            g.conv1.bias.as_slice().unwrap(),
        );
        check(
            &mut model,
            |m| m.conv2.weights.as_slice_mut().unwrap(),
            g.conv2.weights.as_slice().unwrap(),
        );
        check(
            &mut model,
            |m| m.conv2.bias.as_slice_mut().unwrap(),
            g.conv2.bias.as_slice().unwrap(),
        );
    }

    #[test]
    fn gradients_match_finite_differences_linear() {
        finite_difference_check(false);
    }

    #[test]
    fn gradients_match_finite_differences_hidden() {
        finite_difference_check(true);
    }

    #[test]
    fn zero_conv2_annihilates_conv1_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut model = ClassifierModel::new(&toy_config(false), &mut rng);
        model.conv2.weights.fill(0.0);
        let batch = random_batch(4, 6, 3, 8);
        let (logits, state) = forward(&mut model, &batch, BnMode::Train).unwrap();
        let (_, dlogits) = cross_entropy(&logits, &[0, 1, 2, 0]).unwrap();
        let grads = backward(&model, &state, &dlogits).unwrap();
        assert!(grads.conv1.weights.iter().all(|&g| g == 0.0));
        assert!(grads.conv1.bias.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn duplicating_the_batch_preserves_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut model = ClassifierModel::new(&toy_config(false), &mut rng);
        let batch = random_batch(3, 6, 3, 10);
        let labels = [0u8, 1, 2];
        let (logits, state) = forward(&mut model, &batch, BnMode::Train).unwrap();
        let (_, dlogits) = cross_entropy(&logits, &labels).unwrap();
        let g1 = backward(&model, &state, &dlogits).unwrap();

        let mut doubled = Array4::zeros((6, 6, 3, 3));
        for bi in 0..3 {
            doubled
                .index_axis_mut(Axis(0), bi)
                .assign(&batch.index_axis(Axis(0), bi));
            doubled
                .index_axis_mut(Axis(0), bi + 3)
                .assign(&batch.index_axis(Axis(0), bi));
        }
        let labels2 = [0u8, 1, 2, 0, 1, 2];
        let (logits2, state2) = forward(&mut model, &doubled, BnMode::Train).unwrap();
        let (_, dlogits2) = cross_entropy(&logits2, &labels2).unwrap();
        let g2 = backward(&model, &state2, &dlogits2).unwrap();
        for (a, b) in g1.conv1.weights.iter().zip(g2.conv1.weights.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in g1.gamma.iter().zip(g2.gamma.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = ClassifierModel::new(&toy_config(true), &mut rng);
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.conv1.weights, model.conv1.weights);
        assert_eq!(back.conv2.bias, model.conv2.bias);
        assert_eq!(back.bn.gamma, model.bn.gamma);
        assert_eq!(back.hidden_relu, model.hidden_relu);
    }
}
