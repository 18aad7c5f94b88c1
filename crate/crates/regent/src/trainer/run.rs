//! Worker harness shared by actor-critic and supervised training.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use rand::Rng as _;

use super::gradients::{a3c_gradients, sl_gradients, TrajectoryWindow};
use super::{A3CConfig, EpisodeStat, SharedParams, TrainReport, TrainerError};
use crate::env::EpisodeState;
use crate::geometry::ActionId;
use crate::nn::{
    forward, forward_recorded, save_checkpoint, softmax, ForwardTape, LstmState, NetworkConfig,
};
use crate::synthdata::{sample_perturbation_pose, ImagePair};
use crate::{seeded_rng, Rng};

/// Decorrelates worker RNG streams drawn from one base seed.
const WORKER_SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TrainMode {
    ActorCritic,
    Supervised,
}

/// Action whose one-step outcome minimizes the episode's distance measure.
/// Exact ties go to the lowest action index.
pub fn greedy_optimal_action(state: &EpisodeState) -> ActionId {
    let mut best = ActionId::ALL[0];
    let mut best_distance = f64::INFINITY;
    for &action in &ActionId::ALL {
        let distance = state.peek_distance(action);
        if distance < best_distance {
            best_distance = distance;
            best = action;
        }
    }
    best
}

/// Asynchronous advantage actor-critic training. Workers roll out episodes
/// with actions sampled from the policy and push windowed gradients into
/// `shared`. Returns once `cfg.max_episodes` episodes have completed or
/// `stop` is raised.
pub fn run_a3c(
    cfg: &A3CConfig,
    dataset: &[ImagePair],
    shared: &SharedParams,
    stop: &AtomicBool,
) -> Result<TrainReport, TrainerError> {
    run_training(TrainMode::ActorCritic, cfg, dataset, shared, stop)
}

/// Supervised baseline on the same harness: the executed action is the
/// distance-greedy teacher's choice and the policy is trained by
/// cross-entropy toward it, with the usual value regression.
pub fn run_sl(
    cfg: &A3CConfig,
    dataset: &[ImagePair],
    shared: &SharedParams,
    stop: &AtomicBool,
) -> Result<TrainReport, TrainerError> {
    run_training(TrainMode::Supervised, cfg, dataset, shared, stop)
}

enum WorkerEnd {
    Finished,
    Failed(TrainerError),
    Panicked(String),
}

fn run_training(
    mode: TrainMode,
    cfg: &A3CConfig,
    dataset: &[ImagePair],
    shared: &SharedParams,
    stop: &AtomicBool,
) -> Result<TrainReport, TrainerError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainerError::EmptyDataset);
    }
    let net_cfg = shared.config().clone();
    if net_cfg.input_size != cfg.env.input_size {
        return Err(TrainerError::InvalidConfig {
            detail: format!(
                "network expects {0}x{0} observations but the environment produces {1}x{1}",
                net_cfg.input_size, cfg.env.input_size
            ),
        });
    }

    let start = Instant::now();
    if cfg.max_episodes == 0 {
        return Ok(TrainReport { episodes: Vec::new(), wall_seconds: start.elapsed().as_secs_f64() });
    }

    let mut log = match &cfg.log_path {
        Some(path) => Some(OpenOptions::new().create(true).append(true).open(path).map_err(
            |source| TrainerError::Io { what: "progress log", path: path.clone(), source },
        )?),
        None => None,
    };

    let claim = AtomicUsize::new(0);
    let mut stats: Vec<EpisodeStat> = Vec::new();
    let mut collector_err: Option<TrainerError> = None;
    let (sender, receiver) = mpsc::channel::<EpisodeStat>();

    let ends: Vec<WorkerEnd> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..cfg.workers)
            .map(|worker| {
                let sender = sender.clone();
                let claim = &claim;
                let net_cfg = &net_cfg;
                scope.spawn(move || {
                    worker_loop(mode, worker, cfg, dataset, shared, net_cfg, claim, stop, sender)
                })
            })
            .collect();
        drop(sender);

        // Collector: the channel stays open until every worker hangs up.
        while let Ok(stat) = receiver.recv() {
            if collector_err.is_none() {
                if let Err(e) = record_progress(cfg, shared, log.as_mut(), &stat, stats.len() + 1) {
                    collector_err = Some(e);
                }
            }
            stats.push(stat);
        }

        handles
            .into_iter()
            .map(|handle| match handle.join() {
                Ok(Ok(())) => WorkerEnd::Finished,
                Ok(Err(e)) => WorkerEnd::Failed(e),
                Err(panic) => WorkerEnd::Panicked(panic_detail(panic.as_ref())),
            })
            .collect()
    });

    stats.sort_by_key(|s| s.episode);
    let report = TrainReport { episodes: stats, wall_seconds: start.elapsed().as_secs_f64() };

    for (worker, end) in ends.into_iter().enumerate() {
        let detail = match end {
            WorkerEnd::Finished => continue,
            WorkerEnd::Failed(e) => e.to_string(),
            WorkerEnd::Panicked(p) => format!("panic: {p}"),
        };
        return Err(TrainerError::WorkerFailure {
            worker,
            completed: report.episodes.len(),
            detail,
            report: Box::new(report),
        });
    }
    if let Some(e) = collector_err {
        return Err(e);
    }
    Ok(report)
}

fn panic_detail(payload: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "opaque panic payload".to_string()
    }
}

fn record_progress(
    cfg: &A3CConfig,
    shared: &SharedParams,
    log: Option<&mut std::fs::File>,
    stat: &EpisodeStat,
    completed: usize,
) -> Result<(), TrainerError> {
    if let Some(file) = log {
        writeln!(
            file,
            "episode={} worker={} steps={} cum_reward={:.6} terminal={}",
            stat.episode, stat.worker, stat.steps, stat.cum_reward, stat.terminal
        )
        .map_err(|source| TrainerError::Io {
            what: "progress log",
            path: cfg.log_path.clone().unwrap_or_default(),
            source,
        })?;
    }
    if cfg.checkpoint_every > 0 && completed % cfg.checkpoint_every == 0 {
        let dir = cfg.checkpoint_dir.as_ref().expect("validated alongside checkpoint_every");
        let path = dir.join(format!("checkpoint-ep{completed:06}.ckpt"));
        save_checkpoint(&path, &shared.to_checkpoint())?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn worker_loop(
    mode: TrainMode,
    worker: usize,
    cfg: &A3CConfig,
    dataset: &[ImagePair],
    shared: &SharedParams,
    net_cfg: &NetworkConfig,
    claim: &AtomicUsize,
    stop: &AtomicBool,
    sender: mpsc::Sender<EpisodeStat>,
) -> Result<(), TrainerError> {
    let seed = cfg.seed.wrapping_add((worker as u64 + 1).wrapping_mul(WORKER_SEED_STRIDE));
    let mut rng = seeded_rng(seed);
    let mut pair_index = 0;
    let mut local_episode = 0usize;
    while !stop.load(Ordering::Relaxed) {
        let episode = claim.fetch_add(1, Ordering::Relaxed);
        if episode >= cfg.max_episodes {
            break;
        }
        if local_episode % cfg.episodes_per_pair == 0 {
            pair_index = rng.gen_range(0..dataset.len());
        }
        local_episode += 1;
        let stat = run_episode(mode, worker, episode, cfg, &dataset[pair_index], shared, net_cfg, &mut rng)
            .inspect_err(|_| stop.store(true, Ordering::Relaxed))?;
        let _ = sender.send(stat);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_episode(
    mode: TrainMode,
    worker: usize,
    episode: usize,
    cfg: &A3CConfig,
    pair: &ImagePair,
    shared: &SharedParams,
    net_cfg: &NetworkConfig,
    rng: &mut Rng,
) -> Result<EpisodeStat, TrainerError> {
    let perturb = sample_perturbation_pose(&cfg.perturb, rng)?;
    let (mut state, mut obs) = EpisodeState::reset(pair, perturb, &cfg.env)?;
    // Recurrent memory starts empty for every episode and never leaks
    // between them; within an episode it carries across window boundaries.
    let mut lstm: LstmState<f32> = LstmState::zeros(net_cfg.recurrent.width());
    let mut cum_reward = 0.0;

    while !state.is_done() {
        let params = shared.snapshot();
        let mut tape = ForwardTape::new(net_cfg, lstm.clone());
        let mut actions = Vec::new();
        let mut rewards = Vec::new();
        for _ in 0..cfg.window_len {
            let out = forward_recorded(&params, net_cfg, &obs.tensor::<f32>(), &lstm, &mut tape)?;
            lstm = out.state;
            let action = match mode {
                TrainMode::ActorCritic => sample_action(&softmax(&out.logits), rng),
                TrainMode::Supervised => greedy_optimal_action(&state),
            };
            let result = state.step(action)?;
            obs = result.obs;
            actions.push(action);
            rewards.push(result.reward);
            cum_reward += result.reward;
            if state.is_done() {
                break;
            }
        }
        let aligned = state.is_done() && !state.was_truncated();
        let bootstrap = if aligned {
            // The aligned terminal state has no future to estimate.
            0.0
        } else {
            // Running out of steps or ending the window both bootstrap from
            // the value of the next state under the same snapshot.
            f64::from(forward(&params, net_cfg, &obs.tensor::<f32>(), &lstm)?.value)
        };
        let window = TrajectoryWindow { tape, actions, rewards, bootstrap };
        let grads = match mode {
            TrainMode::ActorCritic => a3c_gradients(&params, &window, cfg.gamma, cfg.beta)?,
            TrainMode::Supervised => sl_gradients(&params, &window, cfg.gamma)?,
        };
        shared.submit(&grads)?;
    }

    Ok(EpisodeStat {
        episode,
        worker,
        steps: state.step_count(),
        cum_reward,
        terminal: !state.was_truncated(),
    })
}

fn sample_action(probs: &[f32], rng: &mut Rng) -> ActionId {
    let draw: f64 = rng.gen();
    let mut acc = 0.0;
    for (index, &p) in probs.iter().enumerate() {
        acc += f64::from(p);
        if draw < acc {
            return ActionId::from_index(index).expect("policy head emits one logit per action");
        }
    }
    // Rounding can leave the cumulative sum a hair under 1.
    ActionId::ALL[ActionId::ALL.len() - 1]
}
