//! Benchmarking registration quality across method variants.
//!
//! The central metric is the target registration error: the mean displacement
//! a transform estimate leaves on a grid of evaluation points, measured
//! against the ground-truth recovery transform. The evaluation grid is
//! independent of the landmarks the environment rewards on, so a method
//! cannot score well by overfitting its own reward points. A benchmark run
//! pre-samples one perturbation list per (range, pair) cell and feeds the
//! identical list to every variant, which makes variant columns paired
//! comparisons rather than independent draws.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvConfig, EnvError, EpisodeState, RewardKind};
use crate::geometry::{image_center, LatticePose, SimilarityTransform};
use crate::inference::{self, InferenceConfig, InferenceError, InferenceMode};
use crate::landmarks::{grid_landmarks, LandmarkSet};
use crate::nn::{forward, LstmState, NetworkConfig, NetworkParams, NnError};
use crate::seeded_rng;
use crate::synthdata::{sample_perturbation_pose, ImagePair, PerturbationRange, SynthError};

/// Points per side of the held-out evaluation grid. Kept apart from the
/// reward landmarks on purpose; see the module docs.
pub const EVAL_GRID_PER_SIDE: usize = 4;

/// Quantile used by threshold calibration: pessimistic enough that most
/// best-alignment states clear the calibrated value, optimistic enough to
/// ignore stray low readings.
pub const CALIBRATION_QUANTILE: f64 = 0.25;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation input: {detail}")]
    InvalidInput { detail: String },
    #[error("target registration error needs at least one evaluation point")]
    EmptyPointSet,
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Net(#[from] NnError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error("failed writing report to {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Which training recipe produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainerKind {
    /// Actor-critic reinforcement learning.
    Rl,
    /// Supervised distance-descent cloning.
    Sl,
}

/// One cell of the method grid: training recipe, reward signal it was
/// trained under, and the inference stopping mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodVariant {
    pub trainer: TrainerKind,
    pub reward: RewardKind,
    pub inference: InferenceMode,
}

impl MethodVariant {
    pub fn new(trainer: TrainerKind, reward: RewardKind, inference: InferenceMode) -> Self {
        MethodVariant {
            trainer,
            reward,
            inference,
        }
    }

    /// All eight combinations in report order.
    pub fn all() -> Vec<MethodVariant> {
        let mut out = Vec::with_capacity(8);
        for trainer in [TrainerKind::Rl, TrainerKind::Sl] {
            for reward in [RewardKind::Lme, RewardKind::Matrix] {
                for inference in [InferenceMode::Greedy, InferenceMode::Mc] {
                    out.push(MethodVariant::new(trainer, reward, inference));
                }
            }
        }
        out
    }

    /// Stable report label, e.g. `rl-lme-mc`.
    pub fn label(&self) -> String {
        let trainer = match self.trainer {
            TrainerKind::Rl => "rl",
            TrainerKind::Sl => "sl",
        };
        let reward = match self.reward {
            RewardKind::Lme => "lme",
            RewardKind::Matrix => "matrix",
        };
        let mode = match self.inference {
            InferenceMode::Greedy => "greedy",
            InferenceMode::Mc => "mc",
        };
        format!("{trainer}-{reward}-{mode}")
    }

    /// Deterministic row order for reports.
    fn sort_key(&self) -> (u8, u8, u8) {
        let t = match self.trainer {
            TrainerKind::Rl => 0,
            TrainerKind::Sl => 1,
        };
        let r = match self.reward {
            RewardKind::Lme => 0,
            RewardKind::Matrix => 1,
        };
        let m = match self.inference {
            InferenceMode::Greedy => 0,
            InferenceMode::Mc => 1,
        };
        (t, r, m)
    }
}

impl fmt::Display for MethodVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Mean displacement `pred` leaves on `points` relative to `gt`, both taken
/// as raw transforms (the caller decides any pivot conjugation).
pub fn tre(
    pred: &SimilarityTransform,
    gt: &SimilarityTransform,
    points: &LandmarkSet,
) -> Result<f64, EvalError> {
    if points.is_empty() {
        return Err(EvalError::EmptyPointSet);
    }
    let mut total = 0.0;
    for &p in &points.points {
        let a = gt.apply_point(p);
        let b = pred.apply_point(p);
        total += (a.x - b.x).hypot(a.y - b.y);
    }
    Ok(total / points.len() as f64)
}

/// Summary statistics over one benchmark cell's per-registration errors.
///
/// `median` and `p90` use the nearest-rank convention (`sorted[ceil(q*n)-1]`)
/// so they always report an actually observed error. `std` is the population
/// standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkStats {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub p90: f64,
    /// Number of registrations behind the row.
    pub n: usize,
    /// Mean error before any registration, over the same perturbations.
    pub initial_mean: f64,
    /// Nearest-rank median of the same pre-registration errors.
    pub initial_median: f64,
}

fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

fn mean_of(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Builds the summary row for one cell. `finals` are post-registration
/// errors, `initials` the matching pre-registration errors.
pub fn summarize(finals: &[f64], initials: &[f64]) -> Result<BenchmarkStats, EvalError> {
    if finals.is_empty() || initials.is_empty() {
        return Err(EvalError::InvalidInput {
            detail: "cannot summarize an empty error sample".into(),
        });
    }
    let mean = mean_of(finals);
    let var = finals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / finals.len() as f64;
    let mut sorted = finals.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("registration errors are ordered"));
    let mut sorted_initials = initials.to_vec();
    sorted_initials.sort_by(|a, b| a.partial_cmp(b).expect("errors are ordered"));
    Ok(BenchmarkStats {
        mean,
        std: var.sqrt(),
        median: nearest_rank(&sorted, 0.5),
        p90: nearest_rank(&sorted, 0.9),
        n: finals.len(),
        initial_mean: mean_of(initials),
        initial_median: nearest_rank(&sorted_initials, 0.5),
    })
}

/// Anything that can propose a recovery transform for a perturbed pair.
///
/// Implementations see the pair and the perturbation identity only; whether
/// they may peek at the perturbation is up to the implementation (the agent
/// wrapper forwards it solely as the scene setup, while test oracles use it
/// to bound achievable error).
pub trait Registrar {
    /// Returns the estimated recovery transform in raw parameter form.
    fn register(
        &self,
        pair: &ImagePair,
        perturb: LatticePose,
    ) -> Result<SimilarityTransform, String>;
}

/// Trained-agent registrar: runs value-thresholded inference and reports the
/// resulting recovery transform.
pub struct AgentRegistrar {
    pub params: NetworkParams<f32>,
    pub net: NetworkConfig,
    pub cfg: InferenceConfig,
}

impl AgentRegistrar {
    pub fn new(params: NetworkParams<f32>, net: NetworkConfig, cfg: InferenceConfig) -> Self {
        AgentRegistrar { params, net, cfg }
    }
}

impl Registrar for AgentRegistrar {
    fn register(
        &self,
        pair: &ImagePair,
        perturb: LatticePose,
    ) -> Result<SimilarityTransform, String> {
        inference::register(&self.params, &self.net, pair, perturb, &self.cfg)
            .map(|r| r.transform)
            .map_err(|e| e.to_string())
    }
}

/// Settings for stopping-threshold calibration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub perturb: PerturbationRange,
    pub env: EnvConfig,
    /// Greedy rollouts to harvest value readings from.
    pub rollouts: usize,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            perturb: PerturbationRange::e1(),
            env: EnvConfig::default(),
            rollouts: 32,
            seed: 0,
        }
    }
}

/// Picks a stopping threshold for a trained network by replaying greedy
/// rollouts with ground truth visible: in each rollout the value head is read
/// at the state of smallest true error, and the calibrated threshold is the
/// 25th-percentile (nearest-rank) of those readings. Unlike inference this
/// deliberately uses the training environment, so it must only ever see
/// training pairs.
pub fn calibrate_trs(
    params: &NetworkParams<f32>,
    net: &NetworkConfig,
    pairs: &[ImagePair],
    cal: &CalibrationConfig,
) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::InvalidInput {
            detail: "calibration needs at least one image pair".into(),
        });
    }
    if cal.rollouts == 0 {
        return Err(EvalError::InvalidInput {
            detail: "calibration needs at least one rollout".into(),
        });
    }
    let mut rng = seeded_rng(cal.seed);
    let mut best_state_values = Vec::with_capacity(cal.rollouts);
    for r in 0..cal.rollouts {
        let pair = &pairs[r % pairs.len()];
        let perturb = sample_perturbation_pose(&cal.perturb, &mut rng)?;
        let (mut episode, mut obs) = EpisodeState::reset(pair, perturb, &cal.env)?;
        let mut lstm: LstmState<f32> = LstmState::zeros(net.recurrent.width());

        // (value reading, true error) for every visited state, terminal
        // included.
        let mut readings = Vec::new();
        loop {
            let out = forward(params, net, &obs.tensor::<f32>(), &lstm)?;
            lstm = out.state;
            readings.push((f64::from(out.value), episode.distance()));
            if readings.len() > cal.env.max_steps {
                break;
            }
            let action = argmax_action(&out.logits);
            let step = episode.step(action)?;
            obs = step.obs;
            if step.terminal {
                let out = forward(params, net, &obs.tensor::<f32>(), &lstm)?;
                readings.push((f64::from(out.value), episode.distance()));
                break;
            }
        }
        let best = readings
            .iter()
            .copied()
            .min_by(|a, b| a.1.partial_cmp(&b.1).expect("errors are ordered"))
            .expect("every rollout visits at least one state");
        best_state_values.push(best.0);
    }
    best_state_values.sort_by(|a, b| a.partial_cmp(b).expect("values are ordered"));
    Ok(nearest_rank(&best_state_values, CALIBRATION_QUANTILE))
}

fn argmax_action(logits: &[f32]) -> crate::geometry::ActionId {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    crate::geometry::ActionId::from_index(best).expect("policy head emits one logit per action")
}

/// One method entry for a benchmark run. `registrar` carries a construction
/// failure (missing checkpoint, corrupt file) as `Err` so the run can report
/// the variant as failed instead of aborting the table.
pub struct VariantAgent {
    pub variant: MethodVariant,
    pub registrar: Result<Box<dyn Registrar>, String>,
}

/// One summary row: a method variant evaluated on one perturbation range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkCell {
    pub variant: MethodVariant,
    pub range: String,
    pub stats: BenchmarkStats,
}

/// A cell that produced no stats, with the first error encountered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub variant: MethodVariant,
    pub range: String,
    pub detail: String,
}

/// Full benchmark outcome. Rows are sorted by (variant, range label); failed
/// cells are collected instead of aborting the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTable {
    pub cells: Vec<BenchmarkCell>,
    pub failures: Vec<CellFailure>,
}

impl BenchmarkTable {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

fn cell_seed(seed: u64, range_idx: usize, pair_idx: usize) -> u64 {
    seed.wrapping_add((range_idx as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((pair_idx as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Runs every variant over every named perturbation range.
///
/// Perturbations are pre-sampled once per (range, pair) from a seed derived
/// from cell indices, so every variant registers the identical scenes and a
/// rerun with the same seed reproduces the table bit for bit.
pub fn run_benchmark(
    agents: &[VariantAgent],
    pairs: &[ImagePair],
    ranges: &[(String, PerturbationRange)],
    n_perturb_per_pair: usize,
    seed: u64,
) -> Result<BenchmarkTable, EvalError> {
    if agents.is_empty() || pairs.is_empty() || ranges.is_empty() {
        return Err(EvalError::InvalidInput {
            detail: "benchmark needs at least one agent, pair and range".into(),
        });
    }
    if n_perturb_per_pair == 0 {
        return Err(EvalError::InvalidInput {
            detail: "benchmark needs at least one perturbation per pair".into(),
        });
    }

    // Per pair: evaluation grid and pivot, shared by every cell.
    let geometry: Vec<(LandmarkSet, (f64, f64))> = pairs
        .iter()
        .map(|p| {
            let (w, h) = (p.moving_aligned.width(), p.moving_aligned.height());
            (grid_landmarks(w, h, EVAL_GRID_PER_SIDE), image_center(w, h))
        })
        .collect();

    // scenes[range][pair] = perturbation list, identical for every variant.
    let mut scenes: Vec<Vec<Vec<LatticePose>>> = Vec::with_capacity(ranges.len());
    let mut initial_errors: Vec<Vec<f64>> = Vec::with_capacity(ranges.len());
    for (ri, (_, range)) in ranges.iter().enumerate() {
        let mut per_pair = Vec::with_capacity(pairs.len());
        let mut initials = Vec::with_capacity(pairs.len() * n_perturb_per_pair);
        for (pi, _) in pairs.iter().enumerate() {
            let mut rng = seeded_rng(cell_seed(seed, ri, pi));
            let mut list = Vec::with_capacity(n_perturb_per_pair);
            for _ in 0..n_perturb_per_pair {
                let pose = sample_perturbation_pose(range, &mut rng)?;
                let (points, (cx, cy)) = &geometry[pi];
                let gt = pose.to_transform().invert().about_pivot(*cx, *cy);
                initials.push(tre(&SimilarityTransform::identity(), &gt, points)?);
                list.push(pose);
            }
            per_pair.push(list);
        }
        scenes.push(per_pair);
        initial_errors.push(initials);
    }

    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for agent in agents {
        for (ri, (range_label, _)) in ranges.iter().enumerate() {
            let registrar = match &agent.registrar {
                Ok(r) => r.as_ref(),
                Err(detail) => {
                    failures.push(CellFailure {
                        variant: agent.variant,
                        range: range_label.clone(),
                        detail: detail.clone(),
                    });
                    continue;
                }
            };
            match run_cell(registrar, pairs, &geometry, &scenes[ri]) {
                Ok(finals) => {
                    let stats = summarize(&finals, &initial_errors[ri])?;
                    cells.push(BenchmarkCell {
                        variant: agent.variant,
                        range: range_label.clone(),
                        stats,
                    });
                }
                Err(detail) => failures.push(CellFailure {
                    variant: agent.variant,
                    range: range_label.clone(),
                    detail,
                }),
            }
        }
    }
    cells.sort_by(|a, b| {
        (a.variant.sort_key(), &a.range).cmp(&(b.variant.sort_key(), &b.range))
    });
    failures.sort_by(|a, b| {
        (a.variant.sort_key(), &a.range).cmp(&(b.variant.sort_key(), &b.range))
    });
    Ok(BenchmarkTable { cells, failures })
}

fn run_cell(
    registrar: &dyn Registrar,
    pairs: &[ImagePair],
    geometry: &[(LandmarkSet, (f64, f64))],
    scenes: &[Vec<LatticePose>],
) -> Result<Vec<f64>, String> {
    let mut finals = Vec::new();
    for (pi, pair) in pairs.iter().enumerate() {
        let (points, (cx, cy)) = &geometry[pi];
        for &pose in &scenes[pi] {
            let pred = registrar.register(pair, pose)?;
            let gt = pose.to_transform().invert().about_pivot(*cx, *cy);
            let err = tre(&pred.about_pivot(*cx, *cy), &gt, points)
                .map_err(|e| e.to_string())?;
            finals.push(err);
        }
    }
    Ok(finals)
}

/// Report serialization format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    JsonLines,
}

/// One exported row. Statistics are rounded to six decimals on export so the
/// CSV and JSON forms of a table parse back to identical values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRecord {
    pub variant: String,
    pub range: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub p90: f64,
    pub initial_mean: f64,
    pub initial_median: f64,
}

pub const CSV_HEADER: &str = "variant,range,n,mean,std,median,p90,initial_mean,initial_median";

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

impl BenchmarkTable {
    /// Rows in report order with export rounding applied.
    pub fn records(&self) -> Vec<ExportRecord> {
        self.cells
            .iter()
            .map(|c| ExportRecord {
                variant: c.variant.label(),
                range: c.range.clone(),
                n: c.stats.n,
                mean: round6(c.stats.mean),
                std: round6(c.stats.std),
                median: round6(c.stats.median),
                p90: round6(c.stats.p90),
                initial_mean: round6(c.stats.initial_mean),
                initial_median: round6(c.stats.initial_median),
            })
            .collect()
    }
}

/// Writes the table to `path`. CSV gets a fixed header and six-decimal
/// values; JSON lines carry one record object per row with the same rounded
/// values. An empty table writes just the CSV header (or nothing for JSON).
pub fn export_report(
    table: &BenchmarkTable,
    path: &Path,
    format: ReportFormat,
) -> Result<(), EvalError> {
    let io_err = |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str(CSV_HEADER);
            out.push('\n');
            for r in table.records() {
                out.push_str(&format!(
                    "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                    r.variant, r.range, r.n, r.mean, r.std, r.median, r.p90, r.initial_mean,
                    r.initial_median
                ));
            }
        }
        ReportFormat::JsonLines => {
            for r in table.records() {
                let line = serde_json::to_string(&r).expect("records serialize");
                out.push_str(&line);
                out.push('\n');
            }
        }
    }
    std::fs::write(path, out).map_err(io_err)
}

/// Parses a report written by [`export_report`] back into records, detecting
/// the format from the first line.
pub fn parse_report(text: &str) -> Result<Vec<ExportRecord>, EvalError> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        if line.starts_with('{') {
            let rec: ExportRecord =
                serde_json::from_str(line).map_err(|e| EvalError::InvalidInput {
                    detail: format!("bad report line {}: {e}", i + 1),
                })?;
            records.push(rec);
            continue;
        }
        if i == 0 && line == CSV_HEADER {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(EvalError::InvalidInput {
                detail: format!("bad report line {}: expected 9 fields", i + 1),
            });
        }
        let num = |s: &str, name: &str| -> Result<f64, EvalError> {
            s.parse().map_err(|_| EvalError::InvalidInput {
                detail: format!("bad {name} on report line {}", i + 1),
            })
        };
        records.push(ExportRecord {
            variant: fields[0].to_string(),
            range: fields[1].to_string(),
            n: fields[2].parse().map_err(|_| EvalError::InvalidInput {
                detail: format!("bad n on report line {}", i + 1),
            })?,
            mean: num(fields[3], "mean")?,
            std: num(fields[4], "std")?,
            median: num(fields[5], "median")?,
            p90: num(fields[6], "p90")?,
            initial_mean: num(fields[7], "initial_mean")?,
            initial_median: num(fields[8], "initial_median")?,
        });
    }
    Ok(records)
}

/// Groups records by range for quick lookups in summaries and tests.
pub fn records_by_range(records: &[ExportRecord]) -> BTreeMap<String, Vec<ExportRecord>> {
    let mut map: BTreeMap<String, Vec<ExportRecord>> = BTreeMap::new();
    for r in records {
        map.entry(r.range.clone()).or_default().push(r.clone());
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::LandmarkSpec;
    use crate::geometry::Point2;
    use crate::nn::init_network;
    use crate::synthdata::{generate_pair, ParamRange};
    use proptest::prelude::*;

    fn grid_points(n: usize) -> LandmarkSet {
        grid_landmarks(32, 32, n)
    }

    #[test]
    fn tre_of_identical_transforms_is_zero() {
        let t = SimilarityTransform::new(3.0, -2.0, 1.1, 17.0);
        let points = grid_points(4);
        assert_eq!(tre(&t, &t, &points).unwrap(), 0.0);
    }

    #[test]
    fn tre_of_a_pure_translation_is_the_offset_norm() {
        // Every point moves by exactly (3, 4) regardless of position.
        let gt = SimilarityTransform::new(3.0, 4.0, 1.0, 0.0);
        let pred = SimilarityTransform::identity();
        let err = tre(&pred, &gt, &grid_points(4)).unwrap();
        assert!((err - 5.0).abs() < 1e-12, "tre {err}");
    }

    #[test]
    fn tre_of_a_small_rotation_matches_the_chord_length() {
        // Points at radius r from the origin move along a chord of length
        // 2 r sin(angle / 2) under a rotation about the origin.
        let r = 10.0;
        let angle = 1.0f64;
        let points = LandmarkSet {
            points: vec![
                Point2::new(r, 0.0),
                Point2::new(0.0, r),
                Point2::new(-r, 0.0),
            ],
            source: crate::landmarks::LandmarkSource::Grid,
        };
        let gt = SimilarityTransform::new(0.0, 0.0, 1.0, angle);
        let err = tre(&SimilarityTransform::identity(), &gt, &points).unwrap();
        let chord = 2.0 * r * (angle.to_radians() / 2.0).sin();
        assert!((err - chord).abs() < 1e-12, "tre {err} chord {chord}");
    }

    #[test]
    fn tre_rejects_an_empty_point_set() {
        let empty = LandmarkSet {
            points: vec![],
            source: crate::landmarks::LandmarkSource::Grid,
        };
        let t = SimilarityTransform::identity();
        assert!(matches!(
            tre(&t, &t, &empty),
            Err(EvalError::EmptyPointSet)
        ));
    }

    proptest! {
        #[test]
        fn tre_is_symmetric_in_its_arguments(
            tx1 in -5.0..5.0f64, ty1 in -5.0..5.0f64,
            s1 in 0.8..1.2f64, a1 in -30.0..30.0f64,
            tx2 in -5.0..5.0f64, ty2 in -5.0..5.0f64,
            s2 in 0.8..1.2f64, a2 in -30.0..30.0f64,
        ) {
            let t1 = SimilarityTransform::new(tx1, ty1, s1, a1);
            let t2 = SimilarityTransform::new(tx2, ty2, s2, a2);
            let points = grid_points(3);
            let forward = tre(&t1, &t2, &points).unwrap();
            let backward = tre(&t2, &t1, &points).unwrap();
            prop_assert!((forward - backward).abs() < 1e-12);
        }

        #[test]
        fn tre_is_nonnegative_and_finite(
            tx in -20.0..20.0f64, ty in -20.0..20.0f64,
            s in 0.5..2.0f64, a in -90.0..90.0f64,
        ) {
            let t = SimilarityTransform::new(tx, ty, s, a);
            let err = tre(&SimilarityTransform::identity(), &t, &grid_points(4)).unwrap();
            prop_assert!(err.is_finite() && err >= 0.0);
        }
    }

    #[test]
    fn summary_statistics_pin_on_a_known_sample() {
        let finals: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        let stats = summarize(&finals, &[2.0, 4.0]).unwrap();
        assert_eq!(stats.n, 10);
        assert!((stats.mean - 5.5).abs() < 1e-12);
        // Population variance of 1..=10 is 8.25.
        assert!((stats.std - 8.25f64.sqrt()).abs() < 1e-12);
        assert_eq!(stats.median, 5.0);
        assert_eq!(stats.p90, 9.0);
        assert_eq!(stats.initial_mean, 3.0);
        assert_eq!(stats.initial_median, 2.0);
    }

    #[test]
    fn single_sample_statistics_collapse_to_that_sample() {
        let stats = summarize(&[4.25], &[7.0]).unwrap();
        assert_eq!(stats.mean, 4.25);
        assert_eq!(stats.std, 0.0);
        assert_eq!(stats.median, 4.25);
        assert_eq!(stats.p90, 4.25);
        assert_eq!(stats.n, 1);
    }

    #[test]
    fn summarize_rejects_empty_samples() {
        assert!(summarize(&[], &[1.0]).is_err());
        assert!(summarize(&[1.0], &[]).is_err());
    }

    fn small_pairs(n: usize) -> Vec<ImagePair> {
        (0..n)
            .map(|i| generate_pair(format!("eval-{i}"), 90 + i as u64, 16))
            .collect()
    }

    fn tx_range() -> PerturbationRange {
        PerturbationRange {
            tx: ParamRange::new(-3.0, 3.0, 1.0),
            ty: ParamRange::new(-3.0, 3.0, 1.0),
            angle: ParamRange::fixed(0.0),
            scale: ParamRange::fixed(1.0),
        }
    }

    fn calibration_env() -> EnvConfig {
        EnvConfig {
            input_size: 16,
            landmarks: LandmarkSpec::Grid { per_side: 4 },
            max_steps: 8,
            ..EnvConfig::default()
        }
    }

    #[test]
    fn calibrating_a_constant_value_head_returns_that_constant() {
        let net = NetworkConfig::probe16();
        let mut params = init_network::<f32>(&net, 11).unwrap();
        params
            .block_mut("value.w")
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|w| *w = 0.0);
        params.block_mut("value.b").unwrap().data_mut()[0] = 3.25;
        let cal = CalibrationConfig {
            perturb: tx_range(),
            env: calibration_env(),
            rollouts: 6,
            seed: 1,
        };
        let trs = calibrate_trs(&params, &net, &small_pairs(1), &cal).unwrap();
        assert_eq!(trs, 3.25);
    }

    #[test]
    fn calibrating_an_untrained_network_yields_a_finite_threshold() {
        let net = NetworkConfig::probe16();
        let params = init_network::<f32>(&net, 12).unwrap();
        let cal = CalibrationConfig {
            perturb: tx_range(),
            env: calibration_env(),
            rollouts: 4,
            seed: 2,
        };
        let trs = calibrate_trs(&params, &net, &small_pairs(2), &cal).unwrap();
        assert!(trs.is_finite());
    }

    #[test]
    fn calibration_rejects_degenerate_inputs() {
        let net = NetworkConfig::probe16();
        let params = init_network::<f32>(&net, 13).unwrap();
        let cal = CalibrationConfig::default();
        assert!(calibrate_trs(&params, &net, &[], &cal).is_err());
        let cal = CalibrationConfig {
            rollouts: 0,
            ..CalibrationConfig::default()
        };
        assert!(calibrate_trs(&params, &net, &small_pairs(1), &cal).is_err());
    }

    /// Always answers with the exact recovery transform.
    struct PerfectOracle;

    impl Registrar for PerfectOracle {
        fn register(
            &self,
            _pair: &ImagePair,
            perturb: LatticePose,
        ) -> Result<SimilarityTransform, String> {
            Ok(perturb.to_transform().invert())
        }
    }

    /// Never moves: reports the identity, leaving the initial error intact.
    struct IdentityAgent;

    impl Registrar for IdentityAgent {
        fn register(
            &self,
            _pair: &ImagePair,
            _perturb: LatticePose,
        ) -> Result<SimilarityTransform, String> {
            Ok(SimilarityTransform::identity())
        }
    }

    struct FailingAgent;

    impl Registrar for FailingAgent {
        fn register(
            &self,
            _pair: &ImagePair,
            _perturb: LatticePose,
        ) -> Result<SimilarityTransform, String> {
            Err("checkpoint refused to load".into())
        }
    }

    fn rl_greedy() -> MethodVariant {
        MethodVariant::new(TrainerKind::Rl, RewardKind::Lme, InferenceMode::Greedy)
    }

    fn sl_greedy() -> MethodVariant {
        MethodVariant::new(TrainerKind::Sl, RewardKind::Lme, InferenceMode::Greedy)
    }

    fn one_range() -> Vec<(String, PerturbationRange)> {
        vec![("e1".to_string(), tx_range())]
    }

    #[test]
    fn a_perfect_oracle_scores_zero_error() {
        let agents = vec![VariantAgent {
            variant: rl_greedy(),
            registrar: Ok(Box::new(PerfectOracle)),
        }];
        let table = run_benchmark(&agents, &small_pairs(2), &one_range(), 5, 9).unwrap();
        assert!(table.is_complete());
        assert_eq!(table.cells.len(), 1);
        let stats = table.cells[0].stats;
        assert_eq!(stats.mean, 0.0);
        assert_eq!(stats.std, 0.0);
        assert_eq!(stats.median, 0.0);
        assert_eq!(stats.p90, 0.0);
        assert!(stats.initial_mean > 0.0);
    }

    #[test]
    fn an_identity_agent_reproduces_the_initial_error() {
        let agents = vec![VariantAgent {
            variant: rl_greedy(),
            registrar: Ok(Box::new(IdentityAgent)),
        }];
        let table = run_benchmark(&agents, &small_pairs(2), &one_range(), 6, 3).unwrap();
        let stats = table.cells[0].stats;
        assert_eq!(stats.mean, stats.initial_mean);
        assert_eq!(stats.median, stats.initial_median);
    }

    #[test]
    fn cell_count_is_pairs_times_perturbations() {
        let agents = vec![VariantAgent {
            variant: rl_greedy(),
            registrar: Ok(Box::new(PerfectOracle)),
        }];
        let table = run_benchmark(&agents, &small_pairs(3), &one_range(), 4, 1).unwrap();
        assert_eq!(table.cells[0].stats.n, 12);
    }

    #[test]
    fn failed_variants_become_failure_rows_not_errors() {
        let agents = vec![
            VariantAgent {
                variant: rl_greedy(),
                registrar: Ok(Box::new(PerfectOracle)),
            },
            VariantAgent {
                variant: sl_greedy(),
                registrar: Err("checkpoint file missing".into()),
            },
            VariantAgent {
                variant: MethodVariant::new(
                    TrainerKind::Sl,
                    RewardKind::Lme,
                    InferenceMode::Mc,
                ),
                registrar: Ok(Box::new(FailingAgent)),
            },
        ];
        let ranges = vec![
            ("e1".to_string(), tx_range()),
            ("e2".to_string(), tx_range()),
        ];
        let table = run_benchmark(&agents, &small_pairs(1), &ranges, 3, 5).unwrap();
        assert!(!table.is_complete());
        // The healthy variant keeps both its cells.
        assert_eq!(table.cells.len(), 2);
        // Each broken variant fails once per range.
        assert_eq!(table.failures.len(), 4);
        assert!(table
            .failures
            .iter()
            .any(|f| f.detail.contains("checkpoint file missing")));
        assert!(table
            .failures
            .iter()
            .any(|f| f.detail.contains("refused to load")));
    }

    #[test]
    fn rows_come_out_sorted_by_variant_then_range() {
        // Feed agents and ranges out of order; the table must not care.
        let agents = vec![
            VariantAgent {
                variant: sl_greedy(),
                registrar: Ok(Box::new(PerfectOracle)),
            },
            VariantAgent {
                variant: rl_greedy(),
                registrar: Ok(Box::new(PerfectOracle)),
            },
        ];
        let ranges = vec![
            ("wide".to_string(), tx_range()),
            ("narrow".to_string(), tx_range()),
        ];
        let table = run_benchmark(&agents, &small_pairs(1), &ranges, 2, 4).unwrap();
        let order: Vec<(String, String)> = table
            .cells
            .iter()
            .map(|c| (c.variant.label(), c.range.clone()))
            .collect();
        assert_eq!(
            order,
            vec![
                ("rl-lme-greedy".to_string(), "narrow".to_string()),
                ("rl-lme-greedy".to_string(), "wide".to_string()),
                ("sl-lme-greedy".to_string(), "narrow".to_string()),
                ("sl-lme-greedy".to_string(), "wide".to_string()),
            ]
        );
    }

    #[test]
    fn reruns_with_one_seed_reproduce_the_table() {
        let run = |seed: u64| {
            let agents = vec![VariantAgent {
                variant: rl_greedy(),
                registrar: Ok(Box::new(IdentityAgent)),
            }];
            run_benchmark(&agents, &small_pairs(2), &one_range(), 5, seed).unwrap()
        };
        assert_eq!(run(17), run(17));
        assert_ne!(run(17), run(18));
    }

    #[test]
    fn an_agent_registrar_runs_the_inference_loop() {
        // A huge value bias stops inference immediately, so the registrar
        // must hand back the identity recovery.
        let net = NetworkConfig::probe16();
        let mut params = init_network::<f32>(&net, 14).unwrap();
        params.block_mut("value.b").unwrap().data_mut()[0] = 100.0;
        let agent = AgentRegistrar::new(params, net, InferenceConfig::default());
        let pair = generate_pair("reg".into(), 99, 16);
        let got = agent
            .register(&pair, LatticePose::from_steps(2, -1, 0, 0))
            .unwrap();
        assert_eq!(got, SimilarityTransform::identity());
    }

    #[test]
    fn variant_labels_cover_all_eight_combinations() {
        let all = MethodVariant::all();
        assert_eq!(all.len(), 8);
        let labels: Vec<String> = all.iter().map(|v| v.label()).collect();
        let mut unique = labels.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), 8);
        assert!(labels.contains(&"rl-lme-mc".to_string()));
        assert!(labels.contains(&"sl-matrix-greedy".to_string()));
        for v in &all {
            let json = serde_json::to_string(v).unwrap();
            let back: MethodVariant = serde_json::from_str(&json).unwrap();
            assert_eq!(back, *v);
        }
    }

    fn sample_table() -> BenchmarkTable {
        let agents = vec![
            VariantAgent {
                variant: rl_greedy(),
                registrar: Ok(Box::new(PerfectOracle)),
            },
            VariantAgent {
                variant: sl_greedy(),
                registrar: Ok(Box::new(IdentityAgent)),
            },
        ];
        run_benchmark(&agents, &small_pairs(2), &one_range(), 3, 21).unwrap()
    }

    #[test]
    fn csv_and_json_reports_parse_to_identical_records() {
        let table = sample_table();
        let dir = std::env::temp_dir();
        let csv_path = dir.join(format!("eval-report-{}.csv", std::process::id()));
        let json_path = dir.join(format!("eval-report-{}.jsonl", std::process::id()));
        export_report(&table, &csv_path, ReportFormat::Csv).unwrap();
        export_report(&table, &json_path, ReportFormat::JsonLines).unwrap();
        let csv_text = std::fs::read_to_string(&csv_path).unwrap();
        let json_text = std::fs::read_to_string(&json_path).unwrap();
        std::fs::remove_file(&csv_path).ok();
        std::fs::remove_file(&json_path).ok();

        assert!(csv_text.starts_with(CSV_HEADER));
        let from_csv = parse_report(&csv_text).unwrap();
        let from_json = parse_report(&json_text).unwrap();
        assert_eq!(from_csv, from_json);
        assert_eq!(from_csv, table.records());
    }

    #[test]
    fn an_empty_table_exports_just_the_header() {
        let table = BenchmarkTable {
            cells: vec![],
            failures: vec![],
        };
        let path = std::env::temp_dir().join(format!("eval-empty-{}.csv", std::process::id()));
        export_report(&table, &path, ReportFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::remove_file(&path).ok();
        assert_eq!(text, format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn report_parsing_rejects_malformed_lines() {
        assert!(parse_report("a,b,c\n").is_err());
        assert!(parse_report("v,r,notanumber,1,1,1,1,1,1\n").is_err());
        let rec = parse_report(&format!("{CSV_HEADER}\n")).unwrap();
        assert!(rec.is_empty());
    }

    #[test]
    fn records_group_by_range_in_order() {
        let recs = vec![
            ExportRecord {
                variant: "rl-lme-greedy".into(),
                range: "e2".into(),
                n: 1,
                mean: 1.0,
                std: 0.0,
                median: 1.0,
                p90: 1.0,
                initial_mean: 2.0,
                initial_median: 2.0,
            },
            ExportRecord {
                variant: "rl-lme-greedy".into(),
                range: "e1".into(),
                n: 1,
                mean: 0.5,
                std: 0.0,
                median: 0.5,
                p90: 0.5,
                initial_mean: 2.0,
                initial_median: 2.0,
            },
        ];
        let grouped = records_by_range(&recs);
        let keys: Vec<&String> = grouped.keys().collect();
        assert_eq!(keys, vec!["e1", "e2"]);
    }
}
