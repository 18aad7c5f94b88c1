//! Backpropagation through time over a recorded window.
//!
//! Gradients flow from the per-step head gradients back through the heads,
//! the recurrent stage, the FC layer, and the conv trunk, accumulating into a
//! `NetworkParams` container. The chain stops at the window boundary: nothing
//! propagates into `tape.initial_state`.

use super::forward::{elu_derivative_from_output, ForwardTape, RecStepRecord};
use super::params::{NetworkParams, RecurrentParams};
use super::tensor::Tensor;
use super::{NnError, Real, POLICY_OUTPUTS};

/// `grad += dy (outer) x` for a `[rows, cols]` weight.
fn acc_outer<R: Real>(grad: &mut Tensor<R>, dy: &[R], x: &[R]) {
    let cols = x.len();
    debug_assert_eq!(grad.shape(), [dy.len(), cols]);
    let gd = grad.data_mut();
    for (r, &d) in dy.iter().enumerate() {
        let row = &mut gd[r * cols..(r + 1) * cols];
        for (g, &xv) in row.iter_mut().zip(x) {
            *g = *g + d * xv;
        }
    }
}

fn acc_vec<R: Real>(grad: &mut Tensor<R>, dy: &[R]) {
    for (g, &d) in grad.data_mut().iter_mut().zip(dy) {
        *g = *g + d;
    }
}

/// `w^T dy` for `w: [rows, cols]`.
fn matvec_t<R: Real>(w: &Tensor<R>, dy: &[R]) -> Vec<R> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    debug_assert_eq!(rows, dy.len());
    let wd = w.data();
    let mut out = vec![R::zero(); cols];
    for (r, &d) in dy.iter().enumerate() {
        let row = &wd[r * cols..(r + 1) * cols];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o = *o + wv * d;
        }
    }
    out
}

/// Conv layer backward: accumulates weight and bias gradients and returns the
/// gradient with respect to the layer input. Mirrors the forward indexing.
fn conv2d_backward<R: Real>(
    input: &Tensor<R>,
    w: &Tensor<R>,
    stride: usize,
    d_pre: &Tensor<R>,
    grad_w: &mut Tensor<R>,
    grad_b: &mut Tensor<R>,
) -> Tensor<R> {
    let (c_in, h, wid) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let (h_out, w_out) = (d_pre.shape()[1], d_pre.shape()[2]);
    let mut d_input = Tensor::zeros(&[c_in, h, wid]);
    let id = input.data();
    let wd = w.data();
    let dd = d_pre.data();
    let gwd = grad_w.data_mut();
    let gbd = grad_b.data_mut();
    let did = d_input.data_mut();
    for co in 0..c_out {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let d = dd[(co * h_out + oy) * w_out + ox];
                gbd[co] = gbd[co] + d;
                let iy0 = oy * stride;
                let ix0 = ox * stride;
                for ci in 0..c_in {
                    let wbase = ((co * c_in + ci) * k) * k;
                    let ibase = ci * h * wid;
                    for ky in 0..k {
                        let irow = ibase + (iy0 + ky) * wid + ix0;
                        let wrow = wbase + ky * k;
                        for kx in 0..k {
                            gwd[wrow + kx] = gwd[wrow + kx] + d * id[irow + kx];
                            did[irow + kx] = did[irow + kx] + d * wd[wrow + kx];
                        }
                    }
                }
            }
        }
    }
    d_input
}

/// Backpropagates the window in `tape` given per-step gradients on the policy
/// logits and the value output. Returns parameter gradients shaped like
/// `params`. `d_logits` and `d_value` must both have one entry per step.
pub fn backward<R: Real>(
    params: &NetworkParams<R>,
    tape: &ForwardTape<R>,
    d_logits: &[Vec<R>],
    d_value: &[R],
) -> Result<NetworkParams<R>, NnError> {
    let steps = tape.steps.len();
    if d_logits.len() != steps {
        return Err(NnError::SignalLengthMismatch {
            steps,
            what: "d_logits",
            got: d_logits.len(),
        });
    }
    if d_value.len() != steps {
        return Err(NnError::SignalLengthMismatch {
            steps,
            what: "d_value",
            got: d_value.len(),
        });
    }
    for dl in d_logits {
        if dl.len() != POLICY_OUTPUTS {
            return Err(NnError::ShapeMismatch { got: vec![dl.len()], expected: vec![POLICY_OUTPUTS] });
        }
    }

    let cfg = &tape.cfg;
    let r = cfg.recurrent.width();
    let mut grads = NetworkParams::<R>::zeros(cfg)?;
    let mut dh_next = vec![R::zero(); r];
    let mut dc_next = vec![R::zero(); r];

    for t in (0..steps).rev() {
        let step = &tape.steps[t];
        let head_in = step.rec.head_input();

        // Heads.
        acc_outer(&mut grads.policy_w, &d_logits[t], head_in);
        acc_vec(&mut grads.policy_b, &d_logits[t]);
        let dv = [d_value[t]];
        acc_outer(&mut grads.value_w, &dv, head_in);
        acc_vec(&mut grads.value_b, &dv);
        let mut d_head = matvec_t(&params.policy_w, &d_logits[t]);
        for (dh, pv) in d_head.iter_mut().zip(matvec_t(&params.value_w, &dv)) {
            *dh = *dh + pv;
        }

        // Recurrent stage.
        let d_fc_act: Vec<R> = match (&step.rec, &params.rec, &mut grads.rec) {
            (
                RecStepRecord::Lstm { h_prev, c_prev, i, f, g, o, c, .. },
                RecurrentParams::Lstm { wx, wh, .. },
                RecurrentParams::Lstm { wx: gwx, wh: gwh, b: gb },
            ) => {
                let mut dh = d_head;
                for (a, &b) in dh.iter_mut().zip(&dh_next) {
                    *a = *a + b;
                }
                let mut dz = vec![R::zero(); 4 * r];
                let mut dc_prev = vec![R::zero(); r];
                for j in 0..r {
                    let tc = c[j].tanh();
                    let d_o = dh[j] * tc;
                    let d_c = dc_next[j] + dh[j] * o[j] * (R::one() - tc * tc);
                    let d_f = d_c * c_prev[j];
                    let d_i = d_c * g[j];
                    let d_g = d_c * i[j];
                    dc_prev[j] = d_c * f[j];
                    dz[j] = d_i * i[j] * (R::one() - i[j]);
                    dz[r + j] = d_f * f[j] * (R::one() - f[j]);
                    dz[2 * r + j] = d_g * (R::one() - g[j] * g[j]);
                    dz[3 * r + j] = d_o * o[j] * (R::one() - o[j]);
                }
                acc_outer(gwx, &dz, &step.fc_act);
                acc_outer(gwh, &dz, h_prev);
                acc_vec(gb, &dz);
                dh_next = matvec_t(wh, &dz);
                dc_next = dc_prev;
                matvec_t(wx, &dz)
            }
            (
                RecStepRecord::Fc { act },
                RecurrentParams::Fc { w, .. },
                RecurrentParams::Fc { w: gw, b: gb },
            ) => {
                let dz: Vec<R> = d_head
                    .iter()
                    .zip(act)
                    .map(|(&d, &a)| d * elu_derivative_from_output(a))
                    .collect();
                acc_outer(gw, &dz, &step.fc_act);
                acc_vec(gb, &dz);
                // Stateless: nothing carried across steps.
                matvec_t(w, &dz)
            }
            _ => unreachable!("tape and params recurrent kinds always match"),
        };

        // FC layer.
        let d_fc_pre: Vec<R> = d_fc_act
            .iter()
            .zip(&step.fc_act)
            .map(|(&d, &a)| d * elu_derivative_from_output(a))
            .collect();
        let last_act = step.conv_acts.last().expect("config has conv layers");
        acc_outer(&mut grads.fc_w, &d_fc_pre, last_act.data());
        acc_vec(&mut grads.fc_b, &d_fc_pre);
        let d_flat = matvec_t(&params.fc_w, &d_fc_pre);

        // Conv trunk, last layer first.
        let mut d_act = Tensor::from_vec(last_act.shape(), d_flat);
        for layer in (0..cfg.convs.len()).rev() {
            let act = &step.conv_acts[layer];
            let mut d_pre = d_act;
            for (d, &a) in d_pre.data_mut().iter_mut().zip(act.data()) {
                *d = *d * elu_derivative_from_output(a);
            }
            let input: &Tensor<R> =
                if layer == 0 { &step.obs } else { &step.conv_acts[layer - 1] };
            let layer_grads = &mut grads.convs[layer];
            let d_input = conv2d_backward(
                input,
                &params.convs[layer].w,
                cfg.convs[layer].stride,
                &d_pre,
                &mut layer_grads.w,
                &mut layer_grads.b,
            );
            d_act = d_input;
        }
        // d_act now holds the observation gradient, which nothing consumes.
    }

    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::forward::forward_recorded;
    use crate::nn::params::LstmState;
    use crate::nn::{init_network, NetworkConfig};
    use crate::test_rng;
    use rand::Rng as _;

    fn random_obs(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = test_rng(seed);
        let data = (0..2 * n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[2, n, n], data)
    }

    fn record_window(
        cfg: &NetworkConfig,
        params: &NetworkParams<f64>,
        steps: usize,
        seed: u64,
    ) -> ForwardTape<f64> {
        let mut tape = ForwardTape::new(cfg, LstmState::zeros(cfg.recurrent.width()));
        let mut state = LstmState::zeros(cfg.recurrent.width());
        for t in 0..steps {
            let obs = random_obs(cfg.input_size, seed + t as u64);
            let out = forward_recorded(params, cfg, &obs, &state, &mut tape).unwrap();
            state = out.state;
        }
        tape
    }

    #[test]
    fn zero_head_gradients_give_zero_param_gradients() {
        let cfg = NetworkConfig::probe16();
        let params: NetworkParams<f64> = init_network(&cfg, 21).unwrap();
        let tape = record_window(&cfg, &params, 2, 50);
        let d_logits = vec![vec![0.0; POLICY_OUTPUTS]; 2];
        let d_value = vec![0.0; 2];
        let grads = backward(&params, &tape, &d_logits, &d_value).unwrap();
        grads.for_each_block(|name, t| {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name} not zero");
        });
    }

    #[test]
    fn gradients_have_parameter_shapes() {
        let cfg = NetworkConfig::probe16();
        let params: NetworkParams<f64> = init_network(&cfg, 22).unwrap();
        let tape = record_window(&cfg, &params, 3, 60);
        let d_logits = vec![vec![0.1; POLICY_OUTPUTS]; 3];
        let d_value = vec![-0.2; 3];
        let grads = backward(&params, &tape, &d_logits, &d_value).unwrap();
        assert_eq!(grads.block_names(), params.block_names());
        let mut shapes_ok = true;
        let mut sources: Vec<Vec<usize>> = Vec::new();
        params.for_each_block(|_, t| sources.push(t.shape().to_vec()));
        let mut i = 0;
        grads.for_each_block(|_, t| {
            shapes_ok &= t.shape() == sources[i].as_slice();
            i += 1;
        });
        assert!(shapes_ok);
        assert!(grads.all_finite());
    }

    #[test]
    fn backward_is_linear_in_head_gradients() {
        let cfg = NetworkConfig::probe16();
        let params: NetworkParams<f64> = init_network(&cfg, 23).unwrap();
        let tape = record_window(&cfg, &params, 2, 70);
        let mut rng = test_rng(99);
        let da: Vec<Vec<f64>> =
            (0..2).map(|_| (0..POLICY_OUTPUTS).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let db: Vec<Vec<f64>> =
            (0..2).map(|_| (0..POLICY_OUTPUTS).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let va: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let vb: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sum_d: Vec<Vec<f64>> = da
            .iter()
            .zip(&db)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        let sum_v: Vec<f64> = va.iter().zip(&vb).map(|(a, b)| a + b).collect();

        let ga = backward(&params, &tape, &da, &va).unwrap();
        let gb = backward(&params, &tape, &db, &vb).unwrap();
        let gsum = backward(&params, &tape, &sum_d, &sum_v).unwrap();

        let mut combined = ga.clone();
        combined.accumulate(&gb, 1.0);
        let mut flat_sum = Vec::new();
        gsum.for_each_block(|_, t| flat_sum.extend_from_slice(t.data()));
        let mut flat_comb = Vec::new();
        combined.for_each_block(|_, t| flat_comb.extend_from_slice(t.data()));
        for (a, b) in flat_sum.iter().zip(&flat_comb) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn value_gradient_reaches_every_block() {
        // A pure value-head gradient must still propagate into the convs.
        let cfg = NetworkConfig::probe16();
        let params: NetworkParams<f64> = init_network(&cfg, 24).unwrap();
        let tape = record_window(&cfg, &params, 2, 80);
        let d_logits = vec![vec![0.0; POLICY_OUTPUTS]; 2];
        let d_value = vec![1.0; 2];
        let grads = backward(&params, &tape, &d_logits, &d_value).unwrap();
        grads.for_each_block(|name, t| {
            if name.starts_with("policy") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name} should be zero");
            } else {
                assert!(t.data().iter().any(|&v| v != 0.0), "{name} all zero");
            }
        });
    }

    #[test]
    fn length_mismatches_are_rejected() {
        let cfg = NetworkConfig::probe16();
        let params: NetworkParams<f64> = init_network(&cfg, 25).unwrap();
        let tape = record_window(&cfg, &params, 2, 90);
        let dl = vec![vec![0.0; POLICY_OUTPUTS]; 1];
        let dv = vec![0.0; 2];
        assert!(matches!(
            backward(&params, &tape, &dl, &dv),
            Err(NnError::SignalLengthMismatch { what: "d_logits", .. })
        ));
        let dl = vec![vec![0.0; POLICY_OUTPUTS]; 2];
        let dv = vec![0.0; 3];
        assert!(matches!(
            backward(&params, &tape, &dl, &dv),
            Err(NnError::SignalLengthMismatch { what: "d_value", .. })
        ));
        let dl = vec![vec![0.0; 3]; 2];
        let dv = vec![0.0; 2];
        assert!(matches!(
            backward(&params, &tape, &dl, &dv),
            Err(NnError::ShapeMismatch { .. })
        ));
    }
}
