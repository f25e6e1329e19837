//! Plain momentum SGD: v ← momentum·v + g; p ← p − lr·v.
//! No weight decay, no dampening, no Nesterov.

pub fn sgd_momentum_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), velocity.len());
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut p = [1.0, 2.0];
        let g = [0.5, -0.5];
        let mut v = [0.0, 0.0];
        sgd_momentum_step(&mut p, &g, &mut v, 1.0, 0.0);
        assert_eq!(p, [0.5, 2.5]);
    }

    #[test]
    fn velocity_decays_geometrically_without_gradient() {
        let mut p = [0.0];
        let mut v = [1.0];
        for step in 1..=5 {
            sgd_momentum_step(&mut p, &[0.0], &mut v, 0.1, 0.9);
            assert!((v[0] - 0.9f64.powi(step)).abs() < 1e-12);
        }
    }

    #[test]
    fn two_steps_with_constant_gradient() {
        let mut p = [0.0];
        let mut v = [0.0];
        let g = [2.0];
        let lr = 0.01;
        sgd_momentum_step(&mut p, &g, &mut v, lr, 0.9);
        sgd_momentum_step(&mut p, &g, &mut v, lr, 0.9);
        // displacement is lr·g·(1 + 1.9)
        assert!((p[0] + lr * 2.0 * (1.0 + 1.9)).abs() < 1e-12);
    }
}
