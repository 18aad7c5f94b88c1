//! Adam optimizer with bias correction, plus global-norm gradient clipping.

use super::params::NetworkParams;
use super::{NetworkConfig, NnError, Real};

/// Optimizer hyperparameters. Defaults: lr 1e-4, beta1 0.9, beta2 0.999,
/// eps 1e-8.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> AdamHyper {
        AdamHyper { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> AdamHyper {
        AdamHyper { lr, ..AdamHyper::default() }
    }
}

/// First and second moment estimates, shaped like the parameters, plus the
/// shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<R: Real> {
    pub m: NetworkParams<R>,
    pub v: NetworkParams<R>,
    pub t: u64,
}

impl<R: Real> AdamState<R> {
    pub fn new(cfg: &NetworkConfig) -> Result<AdamState<R>, NnError> {
        Ok(AdamState { m: NetworkParams::zeros(cfg)?, v: NetworkParams::zeros(cfg)?, t: 0 })
    }
}

/// One Adam update for a single coordinate. `t` is the already-incremented
/// step count used for bias correction. Shared by the batch `adam_step` and
/// the per-block shared-parameter store in the trainer.
pub fn adam_scalar_update<R: Real>(
    w: &mut R,
    m: &mut R,
    v: &mut R,
    grad: R,
    hyper: &AdamHyper,
    t: u64,
) {
    let b1 = R::from_f64(hyper.beta1);
    let b2 = R::from_f64(hyper.beta2);
    *m = b1 * *m + (R::one() - b1) * grad;
    *v = b2 * *v + (R::one() - b2) * grad * grad;
    let corr1 = R::from_f64(1.0 - hyper.beta1.powi(t as i32));
    let corr2 = R::from_f64(1.0 - hyper.beta2.powi(t as i32));
    let m_hat = *m / corr1;
    let v_hat = *v / corr2;
    *w = *w - R::from_f64(hyper.lr) * m_hat / (v_hat.sqrt() + R::from_f64(hyper.eps));
}

/// Applies one Adam step over every block. Increments `state.t` once.
pub fn adam_step<R: Real>(
    params: &mut NetworkParams<R>,
    grads: &NetworkParams<R>,
    state: &mut AdamState<R>,
    hyper: &AdamHyper,
) {
    state.t += 1;
    let t = state.t;
    let m = &mut state.m;
    let v = &mut state.v;
    params.for_each_block_mut(|name, block| {
        let g = grads.block(name).expect("gradient block");
        let mb = m.block_mut(name).expect("m block");
        let vb = v.block_mut(name).expect("v block");
        assert_eq!(block.shape(), g.shape(), "{name} gradient shape");
        let gd = g.data();
        let md = mb.data_mut();
        let vd = vb.data_mut();
        for (i, w) in block.data_mut().iter_mut().enumerate() {
            adam_scalar_update(w, &mut md[i], &mut vd[i], gd[i], hyper, t);
        }
    });
}

/// Scales all gradient blocks so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<R: Real>(grads: &mut NetworkParams<R>, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    grads.for_each_block(|_, t| {
        for &g in t.data() {
            let g = g.to_f64();
            sq += g * g;
        }
    });
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = R::from_f64(max_norm / norm);
        grads.for_each_block_mut(|_, t| {
            for g in t.data_mut() {
                *g = *g * scale;
            }
        });
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_network;

    #[test]
    fn zero_gradient_leaves_fresh_params_unchanged() {
        let cfg = NetworkConfig::probe16();
        let mut params: NetworkParams<f64> = init_network(&cfg, 31).unwrap();
        let before = params.clone();
        let grads = NetworkParams::zeros(&cfg).unwrap();
        let mut state = AdamState::new(&cfg).unwrap();
        adam_step(&mut params, &grads, &mut state, &AdamHyper::default());
        assert_eq!(params, before);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let hyper = AdamHyper::with_lr(0.01);
        let mut w = 0.5f64;
        let mut m = 0.0;
        let mut v = 0.0;
        adam_scalar_update(&mut w, &mut m, &mut v, 3.0, &hyper, 1);
        // Bias-corrected first step: m_hat = g, v_hat = g^2, so the move is
        // lr * g / (|g| + eps), essentially lr * sign(g).
        assert!((w - (0.5 - 0.01)).abs() < 1e-8);
        assert!(m != 0.0 && v != 0.0);
    }

    #[test]
    fn hundred_steps_shrink_quadratic() {
        // Minimize f(w) = w^2 from w = 1 with lr 0.1: well under 0.1 by 100
        // steps.
        let hyper = AdamHyper::with_lr(0.1);
        let mut w = 1.0f64;
        let mut m = 0.0;
        let mut v = 0.0;
        for t in 1..=100u64 {
            let grad = 2.0 * w;
            adam_scalar_update(&mut w, &mut m, &mut v, grad, &hyper, t);
        }
        assert!(w.abs() < 0.1, "w after 100 steps: {w}");
    }

    #[test]
    fn step_counter_and_moments_update() {
        let cfg = NetworkConfig::probe16();
        let mut params: NetworkParams<f32> = init_network(&cfg, 32).unwrap();
        let mut grads = NetworkParams::zeros(&cfg).unwrap();
        grads.fc_w.data_mut()[0] = 1.0;
        let mut state = AdamState::new(&cfg).unwrap();
        let hyper = AdamHyper::default();
        adam_step(&mut params, &grads, &mut state, &hyper);
        adam_step(&mut params, &grads, &mut state, &hyper);
        assert_eq!(state.t, 2);
        let m = state.m.fc_w.data()[0];
        // m after two identical unit gradients: (1-b1)(1+b1) = 0.19.
        assert!((m - 0.19).abs() < 1e-6, "m = {m}");
        assert_eq!(state.m.fc_w.data()[1], 0.0);
    }

    #[test]
    fn adam_step_matches_scalar_kernel() {
        let cfg = NetworkConfig::probe16();
        let mut params: NetworkParams<f64> = init_network(&cfg, 33).unwrap();
        let w0 = params.fc_w.data()[3];
        let mut grads = NetworkParams::zeros(&cfg).unwrap();
        grads.fc_w.data_mut()[3] = -0.7;
        let mut state = AdamState::new(&cfg).unwrap();
        let hyper = AdamHyper::with_lr(0.05);
        adam_step(&mut params, &grads, &mut state, &hyper);

        let mut w = w0;
        let mut m = 0.0;
        let mut v = 0.0;
        adam_scalar_update(&mut w, &mut m, &mut v, -0.7, &hyper, 1);
        assert_eq!(params.fc_w.data()[3], w);
        assert_eq!(state.m.fc_w.data()[3], m);
        assert_eq!(state.v.fc_w.data()[3], v);
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let cfg = NetworkConfig::probe16();
        let mut grads: NetworkParams<f64> = NetworkParams::zeros(&cfg).unwrap();
        grads.fc_w.data_mut()[0] = 3.0;
        grads.fc_w.data_mut()[1] = 4.0;
        let norm = clip_global_norm(&mut grads, 10.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert_eq!(grads.fc_w.data()[0], 3.0);

        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((grads.fc_w.data()[0] - 0.6).abs() < 1e-12);
        assert!((grads.fc_w.data()[1] - 0.8).abs() < 1e-12);
    }
}
