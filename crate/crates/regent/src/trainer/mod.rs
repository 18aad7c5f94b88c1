//! Training for the registration agent.
//!
//! Two regimes share one worker harness: asynchronous advantage actor-critic
//! (`run_a3c`), where several workers roll out episodes with sampled actions
//! and push gradients into a shared Adam-updated parameter store, and a
//! supervised baseline (`run_sl`) that follows and imitates a distance-greedy
//! teacher. Episodes are claimed from a global counter, gradients are computed
//! over truncated windows with bootstrapped returns, and every update is
//! applied exactly once per parameter block.

mod gradients;
mod run;
mod shared;

pub use gradients::{
    a3c_gradients, compute_returns, policy_head_gradient, sl_gradients, supervised_head_gradient,
    TrajectoryWindow,
};
pub use run::{greedy_optimal_action, run_a3c, run_sl};
pub use shared::SharedParams;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvConfig, EnvError};
use crate::nn::NnError;
use crate::synthdata::{PerturbationRange, SynthError};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("invalid training config: {detail}")]
    InvalidConfig { detail: String },
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("inconsistent trajectory window: {detail}")]
    BadWindow { detail: String },
    #[error("non-finite gradient rejected by the shared parameter store")]
    NonFiniteGradient,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Net(#[from] NnError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("failed to write {what} at {path}: {source}")]
    Io { what: &'static str, path: PathBuf, source: std::io::Error },
    #[error("worker {worker} failed after {completed} episodes: {detail}")]
    WorkerFailure { worker: usize, completed: usize, detail: String, report: Box<TrainReport> },
}

/// Hyperparameters for both training regimes. `beta` only affects `run_a3c`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct A3CConfig {
    /// Parallel actor threads sharing one parameter store.
    pub workers: usize,
    /// Adam learning rate.
    pub lr: f64,
    /// Discount factor, in (0, 1].
    pub gamma: f64,
    /// Entropy bonus weight.
    pub beta: f64,
    /// Steps per gradient window; also the backprop truncation length.
    pub window_len: usize,
    /// Total episodes across all workers.
    pub max_episodes: usize,
    /// Each worker draws a fresh image pair every this many of its episodes.
    pub episodes_per_pair: usize,
    /// Base RNG seed; workers derive decorrelated streams from it.
    pub seed: u64,
    /// Distribution of the starting misalignment, sampled per episode.
    pub perturb: PerturbationRange,
    pub env: EnvConfig,
    /// Write a checkpoint every this many completed episodes; 0 disables.
    pub checkpoint_every: usize,
    /// Directory for interval checkpoints; required if `checkpoint_every` > 0.
    pub checkpoint_dir: Option<PathBuf>,
    /// Append one progress line per episode here.
    pub log_path: Option<PathBuf>,
}

impl Default for A3CConfig {
    fn default() -> A3CConfig {
        A3CConfig {
            workers: 8,
            lr: 1e-4,
            gamma: 0.99,
            beta: 0.1,
            window_len: 30,
            max_episodes: 20_000,
            episodes_per_pair: 2,
            seed: 0,
            perturb: PerturbationRange::e1(),
            env: EnvConfig::default(),
            checkpoint_every: 0,
            checkpoint_dir: None,
            log_path: None,
        }
    }
}

impl A3CConfig {
    pub fn validate(&self) -> Result<(), TrainerError> {
        let fail = |detail: String| Err(TrainerError::InvalidConfig { detail });
        if self.workers == 0 {
            return fail("workers must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail(format!("lr must be positive and finite, got {}", self.lr));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return fail(format!("beta must be non-negative and finite, got {}", self.beta));
        }
        if self.window_len == 0 {
            return fail("window_len must be at least 1".into());
        }
        if self.episodes_per_pair == 0 {
            return fail("episodes_per_pair must be at least 1".into());
        }
        if self.checkpoint_every > 0 && self.checkpoint_dir.is_none() {
            return fail("checkpoint_every > 0 requires checkpoint_dir".into());
        }
        self.env.validate()?;
        Ok(())
    }
}

/// Outcome of one completed episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStat {
    /// Global claim index; unique and dense across workers.
    pub episode: usize,
    pub worker: usize,
    pub steps: usize,
    pub cum_reward: f64,
    /// True when the episode ended aligned rather than out of steps.
    pub terminal: bool,
}

/// Aggregated training outcome, ordered by episode index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub episodes: Vec<EpisodeStat>,
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn completed(&self) -> usize {
        self.episodes.len()
    }

    /// Fraction of the last `n` episodes that ended aligned.
    pub fn terminal_rate_last(&self, n: usize) -> f64 {
        let tail_len = n.min(self.episodes.len());
        if tail_len == 0 {
            return 0.0;
        }
        let tail = &self.episodes[self.episodes.len() - tail_len..];
        tail.iter().filter(|e| e.terminal).count() as f64 / tail_len as f64
    }

    pub fn mean_episode_len(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().map(|e| e.steps as f64).sum::<f64>() / self.episodes.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        A3CConfig::default().validate().unwrap();
    }

    #[test]
    fn config_rejections() {
        let bad = [
            A3CConfig { workers: 0, ..A3CConfig::default() },
            A3CConfig { lr: 0.0, ..A3CConfig::default() },
            A3CConfig { lr: f64::NAN, ..A3CConfig::default() },
            A3CConfig { gamma: 0.0, ..A3CConfig::default() },
            A3CConfig { gamma: 1.5, ..A3CConfig::default() },
            A3CConfig { beta: -0.1, ..A3CConfig::default() },
            A3CConfig { window_len: 0, ..A3CConfig::default() },
            A3CConfig { episodes_per_pair: 0, ..A3CConfig::default() },
            A3CConfig { checkpoint_every: 5, ..A3CConfig::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(TrainerError::InvalidConfig { .. })));
        }
        A3CConfig { gamma: 1.0, ..A3CConfig::default() }.validate().unwrap();
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = A3CConfig { workers: 3, seed: 17, ..A3CConfig::default() };
        let text = toml::to_string(&cfg).unwrap();
        let back: A3CConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.workers, 3);
        assert_eq!(back.seed, 17);
        assert!((back.lr - cfg.lr).abs() < 1e-18);

        let partial: A3CConfig = toml::from_str("workers = 2\n").unwrap();
        assert_eq!(partial.workers, 2);
        assert_eq!(partial.max_episodes, 20_000);

        assert!(toml::from_str::<A3CConfig>("wrokers = 2\n").is_err());
    }

    #[test]
    fn terminal_rate_counts_the_tail() {
        let stat = |i: usize, terminal: bool| EpisodeStat {
            episode: i,
            worker: 0,
            steps: 10,
            cum_reward: 0.0,
            terminal,
        };
        let report = TrainReport {
            episodes: (0..10).map(|i| stat(i, i >= 5)).collect(),
            wall_seconds: 0.0,
        };
        assert!((report.terminal_rate_last(5) - 1.0).abs() < 1e-15);
        assert!((report.terminal_rate_last(10) - 0.5).abs() < 1e-15);
        assert!((report.terminal_rate_last(100) - 0.5).abs() < 1e-15);
        assert_eq!(TrainReport::default().terminal_rate_last(10), 0.0);
    }
}
