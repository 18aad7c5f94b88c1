//! The registration MDP: reset from a perturbed image pair, step on a
//! discrete transform action, emit observation, reward, and terminal flag.
//!
//! The agent's transform `T` estimates the episode's perturbation `P`, both
//! acting about the image center. The moving observation shows the perturbed
//! image corrected by the current estimate, `warp(moving, invert(T) . P)`,
//! and the landmark error measures how far that correction is from perfect:
//! `D = mean || pG - about_pivot(invert(T)) . p~G ||` with `p~G` the
//! landmarks displaced by `P`. Both reach identity/zero exactly when `T = P`
//! on the action lattice, and the transform that aligns the perturbed image
//! is `invert(T)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{image_center, warp_image, ActionId, LatticePose, SimilarityTransform};
use crate::landmarks::{detect_landmarks, grid_landmarks, mean_landmark_distance, LandmarkSet};
use crate::nn::{Real, Tensor};
use crate::raster::{Image, MIN_IMAGE_SIZE};
use crate::synthdata::ImagePair;

pub const DEFAULT_TERMINAL_THRESHOLD: f64 = 1.0;
pub const DEFAULT_TERMINAL_BONUS: f64 = 10.0;
pub const DEFAULT_MAX_STEPS: usize = 500;
pub const DEFAULT_LANDMARK_COUNT: usize = 16;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("step called on a finished episode")]
    EpisodeDone,
    #[error("invalid environment config: {detail}")]
    InvalidConfig { detail: String },
}

/// Which error signal drives reward and the terminal check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// Mean landmark distance in pixels.
    Lme,
    /// Frobenius distance between the 2x3 matrices of `T` and `P`.
    Matrix,
}

/// Where the episode's reference landmarks come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LandmarkSpec {
    /// Corner detection on the aligned moving image, grid fallback.
    Detected { count: usize },
    /// Fixed evenly spaced grid (deterministic geometry for tests).
    Grid { per_side: usize },
}

impl Default for LandmarkSpec {
    fn default() -> LandmarkSpec {
        LandmarkSpec::Detected { count: DEFAULT_LANDMARK_COUNT }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Observation edge length; both channels are resized to this.
    pub input_size: usize,
    /// Alignment terminal fires when the error drops below this (pixels for
    /// `lme`, matrix units for `matrix`).
    pub terminal_threshold: f64,
    /// Reward at an alignment terminal, replacing the negative error.
    pub terminal_bonus: f64,
    /// Episode truncation length.
    pub max_steps: usize,
    pub reward_kind: RewardKind,
    pub landmarks: LandmarkSpec,
}

impl Default for EnvConfig {
    fn default() -> EnvConfig {
        EnvConfig {
            input_size: 84,
            terminal_threshold: DEFAULT_TERMINAL_THRESHOLD,
            terminal_bonus: DEFAULT_TERMINAL_BONUS,
            max_steps: DEFAULT_MAX_STEPS,
            reward_kind: RewardKind::Lme,
            landmarks: LandmarkSpec::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let fail = |detail: String| Err(EnvError::InvalidConfig { detail });
        if self.input_size < MIN_IMAGE_SIZE {
            return fail(format!("input_size {} below minimum {MIN_IMAGE_SIZE}", self.input_size));
        }
        if !(self.terminal_threshold > 0.0) || !self.terminal_threshold.is_finite() {
            return fail(format!("terminal_threshold {} must be positive", self.terminal_threshold));
        }
        if !self.terminal_bonus.is_finite() {
            return fail(format!("terminal_bonus {} must be finite", self.terminal_bonus));
        }
        if self.max_steps == 0 {
            return fail("max_steps must be at least 1".to_owned());
        }
        match self.landmarks {
            LandmarkSpec::Detected { count } if count < 4 => {
                fail(format!("landmark count {count} below minimum 4"))
            }
            LandmarkSpec::Grid { per_side } if per_side < 2 => {
                fail(format!("landmark grid side {per_side} below minimum 2"))
            }
            _ => Ok(()),
        }
    }
}

/// Two-channel observation: fixed image, then the current corrected moving
/// image, both `size x size` with intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    size: usize,
    /// Channel-major: `[fixed..., moving...]`, each `size * size` row-major.
    data: Vec<f64>,
}

impl Observation {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        assert!(c < 2, "observation has 2 channels");
        let n = self.size * self.size;
        &self.data[c * n..(c + 1) * n]
    }

    /// The `[2, n, n]` network input.
    pub fn tensor<R: Real>(&self) -> Tensor<R> {
        Tensor::from_vec(
            &[2, self.size, self.size],
            self.data.iter().map(|&v| R::from_f64(v)).collect(),
        )
    }
}

/// Reward of the matrix error signal: negative Frobenius distance between
/// the 2x3 matrices of the estimate and the target pose.
pub fn reward_matrix(t_next: &SimilarityTransform, t_g: &SimilarityTransform) -> f64 {
    -t_next.to_matrix().frobenius_distance(&t_g.to_matrix())
}

/// Outcome of one environment step.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub obs: Observation,
    pub reward: f64,
    /// Episode over, either by alignment or by truncation.
    pub terminal: bool,
    /// Terminal came from exhausting `max_steps`, not from alignment; such
    /// episodes carry no bonus and the trainer bootstraps their return.
    pub truncated: bool,
    /// Current error: pixels for `lme`, Frobenius units for `matrix`.
    pub distance: f64,
}

/// Renders agent observations for one pair under a fixed perturbation.
///
/// Holds images only, never landmarks or any alignment signal, so inference
/// code can drive a transform estimate from pixels alone with nothing to leak
/// the true terminal state.
#[derive(Debug, Clone)]
pub struct ObservationRenderer {
    input_size: usize,
    moving_full: Image,
    fixed_obs: Vec<f64>,
    perturb: SimilarityTransform,
}

impl ObservationRenderer {
    pub fn new(
        pair: &ImagePair,
        perturb: LatticePose,
        input_size: usize,
    ) -> Result<ObservationRenderer, EnvError> {
        let (w, h) = (pair.moving_aligned.width(), pair.moving_aligned.height());
        if pair.fixed.width() != w || pair.fixed.height() != h {
            return Err(EnvError::InvalidConfig {
                detail: format!(
                    "pair {}: fixed {}x{} vs moving {w}x{h}",
                    pair.id,
                    pair.fixed.width(),
                    pair.fixed.height()
                ),
            });
        }
        if input_size == 0 {
            return Err(EnvError::InvalidConfig { detail: "input_size must be >= 1".into() });
        }
        Ok(ObservationRenderer {
            input_size,
            moving_full: pair.moving_aligned.clone(),
            fixed_obs: pair.fixed.resize_bilinear(input_size, input_size).as_slice().to_vec(),
            perturb: perturb.to_transform(),
        })
    }

    /// Image dimensions the renderer warps at, before the observation resize.
    pub fn image_size(&self) -> (usize, usize) {
        (self.moving_full.width(), self.moving_full.height())
    }

    /// Observation under estimate `pose`: the cached fixed channel plus the
    /// moving image corrected by `invert(pose) . perturb`. Always a single
    /// warp of the original image, never incremental, so interpolation blur
    /// does not compound across steps.
    pub fn observe(&self, pose: LatticePose) -> Observation {
        let correction = pose.to_transform().invert().compose(&self.perturb);
        let moving = warp_image(&self.moving_full, &correction)
            .resize_bilinear(self.input_size, self.input_size);
        let mut data = Vec::with_capacity(2 * self.input_size * self.input_size);
        data.extend_from_slice(&self.fixed_obs);
        data.extend_from_slice(moving.as_slice());
        Observation { size: self.input_size, data }
    }
}

/// One registration episode. Owns everything a step needs, so workers can run
/// episodes concurrently and rollout policies can clone mid-episode state.
#[derive(Debug, Clone)]
pub struct EpisodeState {
    cfg: EnvConfig,
    pair_id: String,
    renderer: ObservationRenderer,
    image_size: (usize, usize),
    perturb_pose: LatticePose,
    perturb: SimilarityTransform,
    pose: LatticePose,
    landmarks: LandmarkSet,
    warped_landmarks: LandmarkSet,
    step: usize,
    done: bool,
    truncated: bool,
    distance: f64,
}

impl EpisodeState {
    /// Starts an episode: `T_0` is identity, landmarks come from the aligned
    /// moving image, and the moving observation is the perturbed image.
    pub fn reset(
        pair: &ImagePair,
        perturb: LatticePose,
        cfg: &EnvConfig,
    ) -> Result<(EpisodeState, Observation), EnvError> {
        cfg.validate()?;
        let (w, h) = (pair.moving_aligned.width(), pair.moving_aligned.height());
        if pair.fixed.width() != w || pair.fixed.height() != h {
            return Err(EnvError::InvalidConfig {
                detail: format!(
                    "pair {}: fixed {}x{} vs moving {w}x{h}",
                    pair.id,
                    pair.fixed.width(),
                    pair.fixed.height()
                ),
            });
        }
        let landmarks = match cfg.landmarks {
            LandmarkSpec::Detected { count } => detect_landmarks(&pair.moving_aligned, count),
            LandmarkSpec::Grid { per_side } => grid_landmarks(w, h, per_side),
        };
        let (cx, cy) = image_center(w, h);
        let perturb_t = perturb.to_transform();
        let warped_landmarks = landmarks.transformed(&perturb_t.about_pivot(cx, cy));
        let renderer = ObservationRenderer::new(pair, perturb, cfg.input_size)?;
        let mut state = EpisodeState {
            cfg: cfg.clone(),
            pair_id: pair.id.clone(),
            renderer,
            image_size: (w, h),
            perturb_pose: perturb,
            perturb: perturb_t,
            pose: LatticePose::identity(),
            landmarks,
            warped_landmarks,
            step: 0,
            done: false,
            truncated: false,
            distance: 0.0,
        };
        state.distance = state.current_distance();
        let obs = state.observation();
        Ok((state, obs))
    }

    fn distance_for(&self, pose: LatticePose) -> f64 {
        let t = pose.to_transform();
        match self.cfg.reward_kind {
            RewardKind::Lme => {
                let (cx, cy) = image_center(self.image_size.0, self.image_size.1);
                let back = t.invert().about_pivot(cx, cy);
                mean_landmark_distance(&self.landmarks, &self.warped_landmarks, &back)
                    .expect("landmark sets share a length by construction")
            }
            RewardKind::Matrix => -reward_matrix(&t, &self.perturb),
        }
    }

    fn current_distance(&self) -> f64 {
        self.distance_for(self.pose)
    }

    /// Error the episode would report after `action`, without taking it.
    pub fn peek_distance(&self, action: ActionId) -> f64 {
        self.distance_for(self.pose.apply_action(action))
    }

    /// Applies one action, recomputes the error, and reports reward and
    /// terminal state. The alignment terminal replaces `-D` with the bonus;
    /// truncation keeps `-D` and sets the `truncated` flag.
    pub fn step(&mut self, action: ActionId) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        self.pose = self.pose.apply_action(action);
        self.step += 1;
        self.distance = self.current_distance();
        let aligned = self.distance < self.cfg.terminal_threshold;
        let out_of_steps = self.step >= self.cfg.max_steps;
        let reward = if aligned { self.cfg.terminal_bonus } else { -self.distance };
        self.done = aligned || out_of_steps;
        self.truncated = self.done && !aligned;
        Ok(StepResult {
            obs: self.observation(),
            reward,
            terminal: self.done,
            truncated: self.truncated,
            distance: self.distance,
        })
    }

    /// Current two-channel observation for the present estimate.
    pub fn observation(&self) -> Observation {
        self.renderer.observe(self.pose)
    }

    pub fn pair_id(&self) -> &str {
        &self.pair_id
    }

    /// The agent's current estimate of the perturbation.
    pub fn pose(&self) -> LatticePose {
        self.pose
    }

    pub fn transform(&self) -> SimilarityTransform {
        self.pose.to_transform()
    }

    /// The registration result: the transform that aligns the perturbed
    /// moving image with the fixed image.
    pub fn alignment_transform(&self) -> SimilarityTransform {
        self.pose.to_transform().invert()
    }

    pub fn perturbation_pose(&self) -> LatticePose {
        self.perturb_pose
    }

    /// Current error in the configured reward units.
    pub fn distance(&self) -> f64 {
        self.distance
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn was_truncated(&self) -> bool {
        self.truncated
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }
}
