//! 2-D batch normalization over [batch, channel, height, width].

use ndarray::{Array1, Array4};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct BatchNormState {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            epsilon: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Normalized activations cached for the parameter gradients.
#[derive(Debug)]
pub struct BatchNormForward {
    pub x_hat: Array4<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

fn check_channels(bn: &BatchNormState, x: &Array4<f64>) -> Result<()> {
    if x.shape()[1] != bn.channels() {
        return Err(Error::Dimension(format!(
            "batch norm expects {} channels, got {}",
            bn.channels(),
            x.shape()[1]
        )));
    }
    Ok(())
}

/// Train mode: normalize by batch statistics over (batch, height, width)
/// per channel and update running statistics. Eval mode: normalize by
/// running statistics. Output is gamma·x̂ + beta.
pub fn batchnorm_forward(
    x: &Array4<f64>,
    bn: &mut BatchNormState,
    mode: BnMode,
) -> Result<(Array4<f64>, BatchNormForward)> {
    check_channels(bn, x)?;
    let (b, c, h, w) = x.dim();
    if mode == BnMode::Train && b < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch of size {b} too small for train-mode statistics"
        )));
    }
    let n = (b * h * w) as f64;
    let mut x_hat = Array4::zeros((b, c, h, w));
    for ch in 0..c {
        let (mean, var) = match mode {
            BnMode::Train => {
                let mut sum = 0.0;
                let mut sum_sq = 0.0;
                for bi in 0..b {
                    for i in 0..h {
                        for j in 0..w {
                            let v = x[[bi, ch, i, j]];
                            sum += v;
                            sum_sq += v * v;
                        }
                    }
                }
                let mean = sum / n;
                let var = (sum_sq / n - mean * mean).max(0.0);
                bn.running_mean[ch] = (1.0 - bn.momentum) * bn.running_mean[ch] + bn.momentum * mean;
                bn.running_var[ch] = (1.0 - bn.momentum) * bn.running_var[ch] + bn.momentum * var;
                (mean, var)
            }
            BnMode::Eval => (bn.running_mean[ch], bn.running_var[ch]),
        };
        let inv_std = 1.0 / (var + bn.epsilon).sqrt();
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    x_hat[[bi, ch, i, j]] = (x[[bi, ch, i, j]] - mean) * inv_std;
                }
            }
        }
    }
    let mut y = x_hat.clone();
    for ch in 0..c {
        let g = bn.gamma[ch];
        let be = bn.beta[ch];
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    y[[bi, ch, i, j]] = g * x_hat[[bi, ch, i, j]] + be;
                }
            }
        }
    }
    Ok((y, BatchNormForward { x_hat }))
}

/// Gradients for gamma and beta. Batch norm is the first layer of the
/// head, so no input gradient is needed.
pub fn batchnorm_backward(
    fwd: &BatchNormForward,
    dy: &Array4<f64>,
) -> (Array1<f64>, Array1<f64>) {
    let (b, c, h, w) = dy.dim();
    let mut dgamma = Array1::zeros(c);
    let mut dbeta = Array1::zeros(c);
    for ch in 0..c {
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let g = dy[[bi, ch, i, j]];
                    dgamma[ch] += g * fwd.x_hat[[bi, ch, i, j]];
                    dbeta[ch] += g;
                }
            }
        }
    }
    (dgamma, dbeta)
}
