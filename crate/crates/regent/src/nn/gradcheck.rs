//! Full-coordinate numerical gradient verification.
//!
//! Runs a small network for two recorded steps, computes analytic parameter
//! gradients of a scalar probe loss, then re-derives every coordinate by
//! central finite differences and compares relative errors.

use super::backward::backward;
use super::forward::{forward, forward_recorded, ForwardTape};
use super::params::{LstmState, NetworkParams};
use super::tensor::Tensor;
use super::{init_network, NetworkConfig, NnError, RecurrentKind, POLICY_OUTPUTS};
use crate::seeded_rng;
use rand::Rng as _;

const UNROLL_STEPS: usize = 2;
const FD_EPSILON: f64 = 1e-5;
const REL_ERR_LIMIT: f64 = 1e-4;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// Maximum relative error seen in each block, canonical order.
    pub per_block: Vec<(String, f64)>,
    pub max_rel_err: f64,
    /// Number of parameter coordinates compared.
    pub checked: usize,
    pub pass: bool,
}

impl GradcheckReport {
    pub fn summary(&self) -> String {
        format!(
            "{}: {} coordinates, max relative error {:.3e} (limit {:.0e})",
            if self.pass { "PASS" } else { "FAIL" },
            self.checked,
            self.max_rel_err,
            REL_ERR_LIMIT
        )
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / f64::max(1e-6, f64::max(a.abs(), n.abs()))
}

struct Probe {
    obs: Vec<Tensor<f64>>,
    initial_state: LstmState<f64>,
    c_logits: Vec<Vec<f64>>,
    c_value: Vec<f64>,
}

fn make_probe(cfg: &NetworkConfig, seed: u64) -> Probe {
    let mut rng = seeded_rng(seed ^ 0x6ead_c0de);
    let n = cfg.input_size;
    let obs = (0..UNROLL_STEPS)
        .map(|_| {
            let data = (0..2 * n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor::from_vec(&[2, n, n], data)
        })
        .collect();
    let r = cfg.recurrent.width();
    let initial_state = LstmState {
        h: (0..r).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        c: (0..r).map(|_| rng.gen_range(-0.5..0.5)).collect(),
    };
    let c_logits = (0..UNROLL_STEPS)
        .map(|_| (0..POLICY_OUTPUTS).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let c_value = (0..UNROLL_STEPS).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Probe { obs, initial_state, c_logits, c_value }
}

/// Probe loss: sum over steps of `c_logits . logits + c_value * value`. Its
/// parameter gradient is exactly what `backward` returns for those
/// coefficients, and finite differences of the loss give an independent path
/// to the same numbers. The window starts from a fixed nonzero state, so the
/// check also covers truncation: differentiating the loss holds that state
/// constant, which is precisely what the backward pass assumes.
fn probe_loss(params: &NetworkParams<f64>, cfg: &NetworkConfig, probe: &Probe) -> f64 {
    let mut state = probe.initial_state.clone();
    let mut loss = 0.0;
    for t in 0..UNROLL_STEPS {
        let out = forward(params, cfg, &probe.obs[t], &state).expect("probe forward");
        for (c, l) in probe.c_logits[t].iter().zip(&out.logits) {
            loss += c * l;
        }
        loss += probe.c_value[t] * out.value;
        state = out.state;
    }
    loss
}

fn gradcheck_impl(
    cfg: &NetworkConfig,
    seed: u64,
    tamper_block: Option<&str>,
) -> Result<GradcheckReport, NnError> {
    cfg.validate()?;
    let params: NetworkParams<f64> = init_network(cfg, seed)?;
    let probe = make_probe(cfg, seed);

    let mut tape = ForwardTape::new(cfg, probe.initial_state.clone());
    let mut state = probe.initial_state.clone();
    for t in 0..UNROLL_STEPS {
        let out = forward_recorded(&params, cfg, &probe.obs[t], &state, &mut tape)?;
        state = out.state;
    }
    let mut analytic = backward(&params, &tape, &probe.c_logits, &probe.c_value)?;
    if let Some(name) = tamper_block {
        let block = analytic.block_mut(name).expect("tamper target exists");
        block.data_mut()[0] += 0.5;
    }

    let names = params.block_names();
    let mut work = params.clone();
    let mut per_block = Vec::with_capacity(names.len());
    let mut max_err = 0.0f64;
    let mut checked = 0;
    for name in &names {
        let len = work.block(name).expect("block").len();
        let mut block_err = 0.0f64;
        for i in 0..len {
            let original = work.block(name).unwrap().data()[i];
            work.block_mut(name).unwrap().data_mut()[i] = original + FD_EPSILON;
            let plus = probe_loss(&work, cfg, &probe);
            work.block_mut(name).unwrap().data_mut()[i] = original - FD_EPSILON;
            let minus = probe_loss(&work, cfg, &probe);
            work.block_mut(name).unwrap().data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * FD_EPSILON);
            let a = analytic.block(name).unwrap().data()[i];
            block_err = block_err.max(rel_err(a, numeric));
            checked += 1;
        }
        max_err = max_err.max(block_err);
        per_block.push((name.clone(), block_err));
    }

    Ok(GradcheckReport { per_block, max_rel_err: max_err, checked, pass: max_err < REL_ERR_LIMIT })
}

/// Checks every parameter coordinate of the given config.
pub fn run_gradcheck_config(cfg: &NetworkConfig, seed: u64) -> Result<GradcheckReport, NnError> {
    gradcheck_impl(cfg, seed, None)
}

/// Standard check on the small LSTM probe architecture.
pub fn run_gradcheck(seed: u64) -> Result<GradcheckReport, NnError> {
    run_gradcheck_config(&NetworkConfig::probe16(), seed)
}

/// The probe architecture with the FC ablation in place of the LSTM.
pub fn probe16_ablation() -> NetworkConfig {
    NetworkConfig {
        recurrent: RecurrentKind::FcAblation { width: 16 },
        ..NetworkConfig::probe16()
    }
}
