//! Discounted returns and per-window gradients for both training regimes.

use super::TrainerError;
use crate::geometry::ActionId;
use crate::nn::{backward, softmax, ForwardTape, NetworkParams, Real};

/// Everything recorded while acting for one gradient window: the forward
/// tape (observations and activations, starting from the recurrent state at
/// the window's first step), the actions taken, the rewards received, and
/// the value bootstrapped from the state after the last step (zero when the
/// episode ended aligned).
#[derive(Debug, Clone)]
pub struct TrajectoryWindow<R: Real> {
    pub tape: ForwardTape<R>,
    pub actions: Vec<ActionId>,
    pub rewards: Vec<f64>,
    pub bootstrap: f64,
}

impl<R: Real> TrajectoryWindow<R> {
    pub fn len(&self) -> usize {
        self.tape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tape.is_empty()
    }

    fn validate(&self) -> Result<(), TrainerError> {
        let fail = |detail: String| Err(TrainerError::BadWindow { detail });
        if self.tape.is_empty() {
            return fail("window holds no steps".into());
        }
        if self.actions.len() != self.tape.len() || self.rewards.len() != self.tape.len() {
            return fail(format!(
                "tape has {} steps but {} actions and {} rewards",
                self.tape.len(),
                self.actions.len(),
                self.rewards.len()
            ));
        }
        if let Some(r) = self.rewards.iter().find(|r| !r.is_finite()) {
            return fail(format!("non-finite reward {r}"));
        }
        if !self.bootstrap.is_finite() {
            return fail(format!("non-finite bootstrap {}", self.bootstrap));
        }
        Ok(())
    }
}

/// Discounted returns over one window: `R_t = r_t + gamma * R_{t+1}`, seeded
/// past the end with `bootstrap`.
pub fn compute_returns(rewards: &[f64], bootstrap: f64, gamma: f64) -> Vec<f64> {
    let mut returns = vec![0.0; rewards.len()];
    let mut acc = bootstrap;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        returns[t] = acc;
    }
    returns
}

/// `sum p ln p` by pairwise reduction. Exact when all probabilities are
/// equal and the count is a power of two (every addition doubles), which
/// makes the entropy gradient vanish identically at uniform distributions
/// instead of leaving rounding dust.
fn plogp_sum(probs: &[f64]) -> f64 {
    match probs.len() {
        0 => 0.0,
        1 => {
            let p = probs[0];
            if p > 0.0 {
                p * p.ln()
            } else {
                0.0
            }
        }
        n => plogp_sum(&probs[..n / 2]) + plogp_sum(&probs[n / 2..]),
    }
}

/// Gradient of `-ln pi(a) * advantage - beta * H(pi)` with respect to the
/// logits, with the advantage held constant. The first term contributes
/// `advantage * (pi - onehot(a))`, the entropy bonus `beta * pi_k *
/// (ln pi_k + H)`.
pub fn policy_head_gradient(probs: &[f64], action: usize, advantage: f64, beta: f64) -> Vec<f64> {
    let neg_entropy = plogp_sum(probs);
    probs
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let indicator = if k == action { 1.0 } else { 0.0 };
            let entropy_term = if p > 0.0 { beta * p * (p.ln() - neg_entropy) } else { 0.0 };
            advantage * (p - indicator) + entropy_term
        })
        .collect()
}

/// Gradient of cross-entropy toward `target` with respect to the logits:
/// `pi - onehot(target)`.
pub fn supervised_head_gradient(probs: &[f64], target: usize) -> Vec<f64> {
    probs
        .iter()
        .enumerate()
        .map(|(k, &p)| p - if k == target { 1.0 } else { 0.0 })
        .collect()
}

fn window_gradients<R: Real>(
    params: &NetworkParams<R>,
    window: &TrajectoryWindow<R>,
    gamma: f64,
    head: impl Fn(&[f64], usize) -> Vec<f64>,
) -> Result<NetworkParams<R>, TrainerError> {
    window.validate()?;
    let returns = compute_returns(&window.rewards, window.bootstrap, gamma);
    let mut d_logits = Vec::with_capacity(window.len());
    let mut d_value = Vec::with_capacity(window.len());
    for (t, step) in window.tape.steps.iter().enumerate() {
        let logits: Vec<f64> = step.logits.iter().map(|&z| Real::to_f64(z)).collect();
        let probs = softmax(&logits);
        let grad = head(&probs, t);
        d_logits.push(grad.into_iter().map(R::from_f64).collect::<Vec<R>>());
        d_value.push(R::from_f64(Real::to_f64(step.value) - returns[t]));
    }
    Ok(backward(params, &window.tape, &d_logits, &d_value)?)
}

/// Actor-critic gradients for one window: policy gradient weighted by the
/// bootstrapped advantage plus an entropy bonus, and squared-error value
/// gradient `V - R`. The advantage uses the recorded values and is not
/// differentiated through.
pub fn a3c_gradients<R: Real>(
    params: &NetworkParams<R>,
    window: &TrajectoryWindow<R>,
    gamma: f64,
    beta: f64,
) -> Result<NetworkParams<R>, TrainerError> {
    let returns = compute_returns(&window.rewards, window.bootstrap, gamma);
    window_gradients(params, window, gamma, |probs, t| {
        let advantage = returns[t] - Real::to_f64(window.tape.steps[t].value);
        policy_head_gradient(probs, window.actions[t].index(), advantage, beta)
    })
}

/// Supervised gradients for one window: cross-entropy toward the executed
/// (teacher-chosen) action and the same value regression as actor-critic.
pub fn sl_gradients<R: Real>(
    params: &NetworkParams<R>,
    window: &TrajectoryWindow<R>,
    gamma: f64,
) -> Result<NetworkParams<R>, TrainerError> {
    window_gradients(params, window, gamma, |probs, t| {
        supervised_head_gradient(probs, window.actions[t].index())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{entropy, forward, forward_recorded, init_network, LstmState, NetworkConfig, Tensor};
    use crate::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng as _;

    #[test]
    fn returns_match_hand_examples() {
        assert_eq!(compute_returns(&[1.0, 1.0], 2.0, 0.5), vec![2.0, 2.0]);
        assert_eq!(compute_returns(&[3.5], 0.0, 0.99), vec![3.5]);
        assert_eq!(compute_returns(&[], 4.0, 0.9), Vec::<f64>::new());
    }

    #[test]
    fn returns_match_double_sum_oracle() {
        let mut rng = seeded_rng(11);
        let rewards: Vec<f64> = (0..10).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let bootstrap = rng.gen_range(-2.0..2.0);
        let gamma = 0.9;
        let returns = compute_returns(&rewards, bootstrap, gamma);
        for t in 0..rewards.len() {
            let mut oracle = 0.0;
            for (u, &r) in rewards.iter().enumerate().skip(t) {
                oracle += gamma.powi((u - t) as i32) * r;
            }
            oracle += gamma.powi((rewards.len() - t) as i32) * bootstrap;
            assert!((returns[t] - oracle).abs() < 1e-12, "t={t}: {} vs {oracle}", returns[t]);
        }
    }

    #[test]
    fn undiscounted_returns_are_suffix_sums() {
        let returns = compute_returns(&[1.0, 2.0, 3.0], 4.0, 1.0);
        assert_eq!(returns, vec![10.0, 9.0, 7.0]);
    }

    #[test]
    fn policy_gradient_matches_two_action_example() {
        // Two equal logits, first action taken, advantage 1, no entropy.
        let probs = softmax(&[0.0f64, 0.0]);
        let grad = policy_head_gradient(&probs, 0, 1.0, 0.0);
        assert_eq!(grad, vec![-0.5, 0.5]);
    }

    #[test]
    fn zero_advantage_zero_beta_gives_exact_zeros() {
        let probs = softmax(&[0.3f64, -1.0, 2.0, 0.7, 0.0, 0.1, -0.4, 1.1]);
        let grad = policy_head_gradient(&probs, 5, 0.0, 0.0);
        assert_eq!(grad, vec![0.0; 8]);
    }

    #[test]
    fn entropy_gradient_vanishes_exactly_at_uniform() {
        // Equal logits give exactly 1/8 per action; the entropy term must be
        // identically zero there, not merely small.
        let probs = softmax(&[0.7f64; 8]);
        assert_eq!(probs, vec![0.125; 8]);
        let grad = policy_head_gradient(&probs, 3, 0.0, 0.1);
        assert_eq!(grad, vec![0.0; 8]);
    }

    #[test]
    fn supervised_gradient_matches_uniform_example() {
        let probs = vec![0.125f64; 8];
        let grad = supervised_head_gradient(&probs, 0);
        assert_eq!(grad[0], 0.125 - 1.0);
        for &g in &grad[1..] {
            assert_eq!(g, 0.125);
        }
    }

    proptest! {
        // Softmax Jacobian rows sum to zero, so every head gradient must too.
        #[test]
        fn head_gradients_sum_to_zero(
            logits in proptest::collection::vec(-5.0f64..5.0, 8),
            advantage in -3.0f64..3.0,
            beta in 0.0f64..1.0,
            action in 0usize..8,
        ) {
            let probs = softmax(&logits);
            let policy: f64 = policy_head_gradient(&probs, action, advantage, beta).iter().sum();
            let teacher: f64 = supervised_head_gradient(&probs, action).iter().sum();
            prop_assert!(policy.abs() < 1e-12, "policy sum {policy}");
            prop_assert!(teacher.abs() < 1e-12, "teacher sum {teacher}");
        }
    }

    struct FixedWindow {
        cfg: NetworkConfig,
        params: NetworkParams<f64>,
        window: TrajectoryWindow<f64>,
    }

    fn make_window(seed: u64, steps: usize) -> FixedWindow {
        let cfg = NetworkConfig::probe16();
        let params: NetworkParams<f64> = init_network(&cfg, seed).unwrap();
        let mut rng = seeded_rng(seed ^ 0x51ab);
        let n = cfg.input_size;
        let width = cfg.recurrent.width();
        let initial = LstmState {
            h: (0..width).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            c: (0..width).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        };
        let mut tape = ForwardTape::new(&cfg, initial.clone());
        let mut state = initial;
        let mut actions = Vec::new();
        let mut rewards = Vec::new();
        for t in 0..steps {
            let data = (0..2 * n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let obs = Tensor::from_vec(&[2, n, n], data);
            let out = forward_recorded(&params, &cfg, &obs, &state, &mut tape).unwrap();
            state = out.state;
            actions.push(ActionId::from_index((t * 3) % 8).unwrap());
            rewards.push(rng.gen_range(-3.0..1.0));
        }
        let bootstrap = rng.gen_range(-1.0..1.0);
        FixedWindow { cfg, params, window: TrajectoryWindow { tape, actions, rewards, bootstrap } }
    }

    /// Replays the window's observations under `params` and evaluates the
    /// training loss with returns and advantages frozen at their recorded
    /// values, which is exactly the objective the analytic gradients assume.
    fn window_loss(
        params: &NetworkParams<f64>,
        fixed: &FixedWindow,
        returns: &[f64],
        advantages: Option<&[f64]>,
        beta: f64,
    ) -> f64 {
        let mut state = fixed.window.tape.initial_state.clone();
        let mut loss = 0.0;
        for (t, step) in fixed.window.tape.steps.iter().enumerate() {
            let out = forward(params, &fixed.cfg, &step.obs, &state).unwrap();
            let probs = softmax(&out.logits);
            let picked = probs[fixed.window.actions[t].index()].max(1e-300);
            let weight = advantages.map_or(1.0, |a| a[t]);
            loss += -picked.ln() * weight;
            if advantages.is_some() {
                loss -= beta * entropy(&probs);
            }
            let diff = returns[t] - out.value;
            loss += 0.5 * diff * diff;
            state = out.state;
        }
        loss
    }

    fn assert_matches_finite_differences(
        fixed: &FixedWindow,
        analytic: &NetworkParams<f64>,
        loss: impl Fn(&NetworkParams<f64>) -> f64,
    ) {
        let eps = 1e-5;
        let mut work = fixed.params.clone();
        let mut max_err = 0.0f64;
        let mut rng = seeded_rng(0xfd);
        for name in fixed.params.block_names() {
            let len = work.block(&name).unwrap().len();
            // Spot-check a fixed budget of coordinates per block.
            for _ in 0..12.min(len) {
                let i = rng.gen_range(0..len);
                let original = work.block(&name).unwrap().data()[i];
                work.block_mut(&name).unwrap().data_mut()[i] = original + eps;
                let plus = loss(&work);
                work.block_mut(&name).unwrap().data_mut()[i] = original - eps;
                let minus = loss(&work);
                work.block_mut(&name).unwrap().data_mut()[i] = original;
                let numeric = (plus - minus) / (2.0 * eps);
                let a = analytic.block(&name).unwrap().data()[i];
                let err = (a - numeric).abs() / f64::max(1e-6, f64::max(a.abs(), numeric.abs()));
                max_err = max_err.max(err);
                assert!(err < 1e-4, "{name}[{i}]: analytic {a} vs numeric {numeric}");
            }
        }
        assert!(max_err < 1e-4, "max rel err {max_err}");
    }

    #[test]
    fn a3c_gradients_match_finite_differences() {
        let fixed = make_window(3, 4);
        let gamma = 0.9;
        let beta = 0.05;
        let analytic = a3c_gradients(&fixed.params, &fixed.window, gamma, beta).unwrap();
        let returns = compute_returns(&fixed.window.rewards, fixed.window.bootstrap, gamma);
        let advantages: Vec<f64> = fixed
            .window
            .tape
            .steps
            .iter()
            .enumerate()
            .map(|(t, s)| returns[t] - s.value)
            .collect();
        assert_matches_finite_differences(&fixed, &analytic, |p| {
            window_loss(p, &fixed, &returns, Some(&advantages), beta)
        });
    }

    #[test]
    fn sl_gradients_match_finite_differences() {
        let fixed = make_window(5, 3);
        let gamma = 0.99;
        let analytic = sl_gradients(&fixed.params, &fixed.window, gamma).unwrap();
        let returns = compute_returns(&fixed.window.rewards, fixed.window.bootstrap, gamma);
        assert_matches_finite_differences(&fixed, &analytic, |p| {
            window_loss(p, &fixed, &returns, None, 0.0)
        });
    }

    #[test]
    fn inconsistent_windows_are_rejected() {
        let fixed = make_window(9, 2);
        let mut missing_action = fixed.window.clone();
        missing_action.actions.pop();
        assert!(matches!(
            a3c_gradients(&fixed.params, &missing_action, 0.9, 0.0),
            Err(TrainerError::BadWindow { .. })
        ));

        let mut bad_reward = fixed.window.clone();
        bad_reward.rewards[0] = f64::NAN;
        assert!(matches!(
            sl_gradients(&fixed.params, &bad_reward, 0.9),
            Err(TrainerError::BadWindow { .. })
        ));

        let mut bad_bootstrap = fixed.window.clone();
        bad_bootstrap.bootstrap = f64::INFINITY;
        assert!(matches!(
            a3c_gradients(&fixed.params, &bad_bootstrap, 0.9, 0.1),
            Err(TrainerError::BadWindow { .. })
        ));

        let empty = TrajectoryWindow::<f64> {
            tape: ForwardTape::new(&fixed.cfg, LstmState::zeros(fixed.cfg.recurrent.width())),
            actions: vec![],
            rewards: vec![],
            bootstrap: 0.0,
        };
        assert!(matches!(
            a3c_gradients(&fixed.params, &empty, 0.9, 0.1),
            Err(TrainerError::BadWindow { .. })
        ));
    }
}
