//! Mean cross-entropy with a numerically stable softmax.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Returns the mean loss and its gradient w.r.t. the logits,
/// (softmax − onehot)/batch.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[u8]) -> Result<(f64, Array2<f64>)> {
    let (b, k) = logits.dim();
    if labels.len() != b {
        return Err(Error::Dimension(format!(
            "{} labels for batch of {b}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let mut loss = 0.0;
    let mut grad = Array2::zeros((b, k));
    for bi in 0..b {
        let row = logits.row(bi);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row.iter() {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln();
        let label = labels[bi] as usize;
        loss += log_denom - (row[label] - max);
        for ki in 0..k {
            let p = (row[ki] - max).exp() / denom;
            grad[[bi, ki]] = (p - f64::from(ki == label)) / b as f64;
        }
    }
    Ok((loss / b as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Array2::zeros((4, 10));
        let (loss, _) = cross_entropy(&logits, &[0, 3, 7, 9]).unwrap();
        assert!((loss - 10.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn large_margin_saturates_to_zero() {
        let mut logits = Array2::zeros((1, 10));
        logits[[0, 2]] = 100.0;
        let (loss, _) = cross_entropy(&logits, &[2]).unwrap();
        assert!(loss < 1e-12);
        // stability: extreme logits stay finite
        logits[[0, 2]] = 1e4;
        let (loss, grad) = cross_entropy(&logits, &[2]).unwrap();
        assert!(loss.is_finite());
        assert!(grad.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn matches_high_precision_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Array2::from_shape_fn((8, 10), |_| rng.gen_range(-5.0..5.0));
        let labels: Vec<u8> = (0..8).map(|_| rng.gen_range(0..10)).collect();
        let (loss, grad) = cross_entropy(&logits, &labels).unwrap();
        // naive oracle without max-subtraction, fine at this scale
        let mut expected = 0.0;
        for bi in 0..8 {
            let denom: f64 = logits.row(bi).iter().map(|v| v.exp()).sum();
            expected += -(logits[[bi, labels[bi] as usize]].exp() / denom).ln();
        }
        expected /= 8.0;
        assert!((loss - expected).abs() < 1e-8);
        // gradient oracle
        for bi in 0..8 {
            let denom: f64 = logits.row(bi).iter().map(|v| v.exp()).sum();
            for ki in 0..10 {
                let p = logits[[bi, ki]].exp() / denom;
                let g = (p - f64::from(ki == labels[bi] as usize)) / 8.0;
                assert!((grad[[bi, ki]] - g).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let logits = Array2::zeros((2, 3));
        assert!(cross_entropy(&logits, &[0, 3]).is_err());
        assert!(cross_entropy(&logits, &[0]).is_err());
    }
}
