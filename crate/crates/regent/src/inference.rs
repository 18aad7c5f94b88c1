//! Applying a trained agent to an image pair.
//!
//! The agent walks its transform estimate with greedy (argmax) actions and
//! watches its own value head: once the predicted value clears a threshold
//! the walk stops, either right there or after a Monte Carlo lookahead that
//! simulates several short sampled rollouts and value-weights their
//! endpoints. Everything here sees images only. Landmarks and the true
//! perturbation never enter the interface, so no alignment signal can leak
//! into the stopping decision.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvError, ObservationRenderer};
use crate::geometry::{ActionId, LatticePose, SimilarityTransform, ACTION_COUNT};
use crate::nn::{forward, LstmState, NetworkConfig, NetworkParams, NnError};
use crate::seeded_rng;
use crate::synthdata::ImagePair;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("invalid inference config: {detail}")]
    InvalidConfig { detail: String },
    #[error("cannot aggregate zero trajectories")]
    NoTrajectories,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Net(#[from] NnError),
}

/// How the episode ends once the value head clears the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// Stop on the spot and report the current estimate.
    Greedy,
    /// Run the Monte Carlo lookahead from the triggering state and report the
    /// value-weighted aggregate of the rollout endpoints.
    Mc,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Value threshold that arms the stop. May be `inf` to disable stopping.
    pub trs: f64,
    /// Monte Carlo trajectory count.
    pub n_mc: usize,
    /// Monte Carlo rollout depth, in actions per trajectory.
    pub d_mc: usize,
    /// Hard cap on greedy steps before giving up.
    pub max_steps: usize,
    pub mode: InferenceMode,
    /// Seed for the rollout action sampling.
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> InferenceConfig {
        InferenceConfig {
            trs: 10.0,
            n_mc: 20,
            d_mc: 10,
            max_steps: 500,
            mode: InferenceMode::Greedy,
            seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<(), InferenceError> {
        let fail = |detail: &str| {
            Err(InferenceError::InvalidConfig { detail: detail.into() })
        };
        if self.trs.is_nan() {
            return fail("trs must not be NaN");
        }
        if self.max_steps == 0 {
            return fail("max_steps must be >= 1");
        }
        if self.mode == InferenceMode::Mc {
            if self.n_mc == 0 {
                return fail("n_mc must be >= 1 in mc mode");
            }
            if self.d_mc == 0 {
                return fail("d_mc must be >= 1 in mc mode");
            }
        }
        Ok(())
    }
}

/// One simulated lookahead trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryResult {
    /// Estimate reached at the end of the rollout.
    pub pose: LatticePose,
    /// Value of the triggering state plus every value read along the rollout.
    pub path_value: f64,
    /// Value-head readings after each rollout action, in order.
    pub step_values: Vec<f64>,
}

/// One executed greedy step: the value read in the pre-action state, the
/// action taken on it, and the estimate after the action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub action: ActionId,
    pub value: f64,
    pub pose: LatticePose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ValueThreshold,
    McAggregated,
    MaxSteps,
}

/// What the Monte Carlo stage did, for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McSummary {
    pub trajectories: usize,
    /// True when a non-positive path value forced the unweighted average.
    pub unweighted_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    /// Recovery transform: applying it to the perturbed moving image aligns
    /// the pair. The inverse of the agent's internal estimate.
    pub transform: SimilarityTransform,
    /// Greedy actions executed before stopping.
    pub steps: usize,
    pub stop: StopReason,
    /// One entry per executed action; empty when the stop fired immediately.
    pub trace: Vec<TraceStep>,
    pub mc: Option<McSummary>,
}

/// Value-weighted average of trajectory endpoints.
///
/// Averages `[tx, ty, s, cos a, sin a]` with weights `V_i / sum(V)` and
/// recovers the angle as `atan2(mean sin, mean cos)`, so nearby angles on
/// opposite sides of the wrap average correctly. Any non-positive path value
/// makes such weights ill-posed; the average then falls back to uniform
/// weights, which `register` reports via `McSummary::unweighted_fallback`.
pub fn aggregate_trajectories(
    results: &[TrajectoryResult],
) -> Result<SimilarityTransform, InferenceError> {
    if results.is_empty() {
        return Err(InferenceError::NoTrajectories);
    }
    let weighted = results.iter().all(|r| r.path_value > 0.0);
    let wsum: f64 = if weighted {
        results.iter().map(|r| r.path_value).sum()
    } else {
        results.len() as f64
    };
    let (mut tx, mut ty, mut scale, mut cos, mut sin) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for r in results {
        let w = if weighted { r.path_value } else { 1.0 } / wsum;
        let t = r.pose.to_transform();
        let a = t.angle_deg.to_radians();
        tx += w * t.tx;
        ty += w * t.ty;
        scale += w * t.scale;
        cos += w * a.cos();
        sin += w * a.sin();
    }
    Ok(SimilarityTransform::new(tx, ty, scale, sin.atan2(cos).to_degrees()))
}

fn sample_index(probs: &[f32], rng: &mut impl Rng) -> usize {
    let draw: f64 = rng.gen::<f64>();
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += f64::from(p);
        if draw < cum {
            return i;
        }
    }
    probs.len() - 1
}

fn argmax_index(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &z) in logits.iter().enumerate() {
        if z > logits[best] {
            best = i;
        }
    }
    best
}

/// Simulates `n_mc` lookahead trajectories from a triggering state.
///
/// Each trajectory starts from a copy of the estimate and recurrent state,
/// takes one uniformly random action, then samples `d_mc - 1` more from the
/// policy, reading the value head after every action. Trajectories draw
/// independent RNG streams from `rng`, so they are mutually independent and
/// could run in parallel without changing the result.
pub fn mc_trajectories(
    params: &NetworkParams<f32>,
    net: &NetworkConfig,
    renderer: &ObservationRenderer,
    pose: LatticePose,
    lstm: &LstmState<f32>,
    trigger_value: f64,
    cfg: &InferenceConfig,
    rng: &mut impl Rng,
) -> Result<Vec<TrajectoryResult>, InferenceError> {
    let mut results = Vec::with_capacity(cfg.n_mc);
    for _ in 0..cfg.n_mc {
        let mut traj_rng = seeded_rng(rng.gen::<u64>());
        let mut traj_pose = pose;
        let mut traj_lstm = lstm.clone();
        let mut probs: Option<Vec<f32>> = None;
        let mut step_values = Vec::with_capacity(cfg.d_mc);
        for depth in 0..cfg.d_mc {
            let index = match (depth, &probs) {
                (0, _) | (_, None) => traj_rng.gen_range(0..ACTION_COUNT),
                (_, Some(p)) => sample_index(p, &mut traj_rng),
            };
            let action = ActionId::from_index(index).expect("index < ACTION_COUNT");
            traj_pose = traj_pose.apply_action(action);
            let out =
                forward(params, net, &renderer.observe(traj_pose).tensor::<f32>(), &traj_lstm)?;
            traj_lstm = out.state;
            step_values.push(f64::from(out.value));
            probs = Some(crate::nn::softmax(&out.logits));
        }
        let path_value = trigger_value + step_values.iter().sum::<f64>();
        results.push(TrajectoryResult { pose: traj_pose, path_value, step_values });
    }
    Ok(results)
}

/// Full Monte Carlo lookahead: simulate, then aggregate.
///
/// With `d_mc == 0` every trajectory ends where it started and the aggregate
/// is exactly the triggering pose.
#[allow(clippy::too_many_arguments)]
pub fn mc_rollout(
    params: &NetworkParams<f32>,
    net: &NetworkConfig,
    renderer: &ObservationRenderer,
    pose: LatticePose,
    lstm: &LstmState<f32>,
    trigger_value: f64,
    cfg: &InferenceConfig,
    rng: &mut impl Rng,
) -> Result<SimilarityTransform, InferenceError> {
    let results =
        mc_trajectories(params, net, renderer, pose, lstm, trigger_value, cfg, rng)?;
    aggregate_trajectories(&results)
}

/// Registers a perturbed pair with a trained agent.
///
/// Walks the estimate with argmax actions, carrying the recurrent state, and
/// checks the value head before every action. The first reading at or above
/// `cfg.trs` stops the walk: greedy mode reports the estimate as is, mc mode
/// reports the Monte Carlo aggregate instead, a one-shot lookahead at the
/// first trigger. If the threshold never fires the walk ends after
/// `cfg.max_steps` actions.
pub fn register(
    params: &NetworkParams<f32>,
    net: &NetworkConfig,
    pair: &ImagePair,
    perturb: LatticePose,
    cfg: &InferenceConfig,
) -> Result<RegistrationResult, InferenceError> {
    cfg.validate()?;
    let renderer = ObservationRenderer::new(pair, perturb, net.input_size)?;
    let mut rng = seeded_rng(cfg.seed);
    let mut pose = LatticePose::identity();
    let mut lstm: LstmState<f32> = LstmState::zeros(net.recurrent.width());
    let mut trace = Vec::new();

    while trace.len() < cfg.max_steps {
        let out = forward(params, net, &renderer.observe(pose).tensor::<f32>(), &lstm)?;
        let value = f64::from(out.value);
        if value >= cfg.trs {
            return match cfg.mode {
                InferenceMode::Greedy => Ok(RegistrationResult {
                    transform: pose.to_transform().invert(),
                    steps: trace.len(),
                    stop: StopReason::ValueThreshold,
                    trace,
                    mc: None,
                }),
                InferenceMode::Mc => {
                    let results = mc_trajectories(
                        params, net, &renderer, pose, &out.state, value, cfg, &mut rng,
                    )?;
                    let aggregate = aggregate_trajectories(&results)?;
                    Ok(RegistrationResult {
                        transform: aggregate.invert(),
                        steps: trace.len(),
                        stop: StopReason::McAggregated,
                        trace,
                        mc: Some(McSummary {
                            trajectories: results.len(),
                            unweighted_fallback: results
                                .iter()
                                .any(|r| r.path_value <= 0.0),
                        }),
                    })
                }
            };
        }
        let action = ActionId::from_index(argmax_index(&out.logits))
            .expect("logits length matches the action count");
        pose = pose.apply_action(action);
        lstm = out.state;
        trace.push(TraceStep { action, value, pose });
    }
    Ok(RegistrationResult {
        transform: pose.to_transform().invert(),
        steps: trace.len(),
        stop: StopReason::MaxSteps,
        trace,
        mc: None,
    })
}
