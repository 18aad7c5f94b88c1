//! Parameter storage, canonical block naming, and seeded initialization.

use super::tensor::Tensor;
use super::{NetworkConfig, NnError, Real, RecurrentKind, INPUT_CHANNELS, POLICY_OUTPUTS};
use crate::seeded_rng;
use rand::Rng as _;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<R: Real> {
    pub w: Tensor<R>,
    pub b: Tensor<R>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecurrentParams<R: Real> {
    /// `wx`: [4H, fc], `wh`: [4H, H], single bias vector `b`: [4H].
    /// Gate rows stack as input, forget, candidate, output; the forget
    /// segment `[H, 2H)` of `b` starts at 1.
    Lstm { wx: Tensor<R>, wh: Tensor<R>, b: Tensor<R> },
    /// Stateless eLU FC stage standing in for the LSTM.
    Fc { w: Tensor<R>, b: Tensor<R> },
}

/// All weights of the network: conv trunk, FC, recurrent stage, two heads.
/// Also used as the gradient container (`zeros_like` + accumulate).
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<R: Real> {
    pub convs: Vec<ConvParams<R>>,
    pub fc_w: Tensor<R>,
    pub fc_b: Tensor<R>,
    pub rec: RecurrentParams<R>,
    pub policy_w: Tensor<R>,
    pub policy_b: Tensor<R>,
    pub value_w: Tensor<R>,
    pub value_b: Tensor<R>,
}

impl<R: Real> NetworkParams<R> {
    /// All blocks zero, shaped per `cfg`.
    pub fn zeros(cfg: &NetworkConfig) -> Result<NetworkParams<R>, NnError> {
        cfg.validate()?;
        let mut convs = Vec::with_capacity(cfg.convs.len());
        let mut in_ch = INPUT_CHANNELS;
        for c in &cfg.convs {
            convs.push(ConvParams {
                w: Tensor::zeros(&[c.channels, in_ch, c.kernel, c.kernel]),
                b: Tensor::zeros(&[c.channels]),
            });
            in_ch = c.channels;
        }
        let flat = cfg.flattened_size()?;
        let r = cfg.recurrent.width();
        let rec = match cfg.recurrent {
            RecurrentKind::Lstm { .. } => RecurrentParams::Lstm {
                wx: Tensor::zeros(&[4 * r, cfg.fc_width]),
                wh: Tensor::zeros(&[4 * r, r]),
                b: Tensor::zeros(&[4 * r]),
            },
            RecurrentKind::FcAblation { .. } => RecurrentParams::Fc {
                w: Tensor::zeros(&[r, cfg.fc_width]),
                b: Tensor::zeros(&[r]),
            },
        };
        Ok(NetworkParams {
            convs,
            fc_w: Tensor::zeros(&[cfg.fc_width, flat]),
            fc_b: Tensor::zeros(&[cfg.fc_width]),
            rec,
            policy_w: Tensor::zeros(&[POLICY_OUTPUTS, r]),
            policy_b: Tensor::zeros(&[POLICY_OUTPUTS]),
            value_w: Tensor::zeros(&[1, r]),
            value_b: Tensor::zeros(&[1]),
        })
    }

    /// Visits every block in canonical order with its stable name:
    /// `conv{i}.w`, `conv{i}.b`, `fc.w`, `fc.b`, then `lstm.wx`/`lstm.wh`/
    /// `lstm.b` or `rec.w`/`rec.b`, then `policy.w`, `policy.b`, `value.w`,
    /// `value.b`. Checkpoints, Adam state, and the shared parameter store all
    /// key on these names.
    pub fn for_each_block(&self, mut f: impl FnMut(&str, &Tensor<R>)) {
        for (i, c) in self.convs.iter().enumerate() {
            f(&format!("conv{i}.w"), &c.w);
            f(&format!("conv{i}.b"), &c.b);
        }
        f("fc.w", &self.fc_w);
        f("fc.b", &self.fc_b);
        match &self.rec {
            RecurrentParams::Lstm { wx, wh, b } => {
                f("lstm.wx", wx);
                f("lstm.wh", wh);
                f("lstm.b", b);
            }
            RecurrentParams::Fc { w, b } => {
                f("rec.w", w);
                f("rec.b", b);
            }
        }
        f("policy.w", &self.policy_w);
        f("policy.b", &self.policy_b);
        f("value.w", &self.value_w);
        f("value.b", &self.value_b);
    }

    /// Mutable visitor in the same canonical order as `for_each_block`.
    pub fn for_each_block_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<R>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            f(&format!("conv{i}.w"), &mut c.w);
            f(&format!("conv{i}.b"), &mut c.b);
        }
        f("fc.w", &mut self.fc_w);
        f("fc.b", &mut self.fc_b);
        match &mut self.rec {
            RecurrentParams::Lstm { wx, wh, b } => {
                f("lstm.wx", wx);
                f("lstm.wh", wh);
                f("lstm.b", b);
            }
            RecurrentParams::Fc { w, b } => {
                f("rec.w", w);
                f("rec.b", b);
            }
        }
        f("policy.w", &mut self.policy_w);
        f("policy.b", &mut self.policy_b);
        f("value.w", &mut self.value_w);
        f("value.b", &mut self.value_b);
    }

    /// Looks up a block by its canonical name.
    pub fn block(&self, name: &str) -> Option<&Tensor<R>> {
        if let Some(rest) = name.strip_prefix("conv") {
            let (idx, field) = rest.split_once('.')?;
            let c = self.convs.get(idx.parse::<usize>().ok()?)?;
            return match field {
                "w" => Some(&c.w),
                "b" => Some(&c.b),
                _ => None,
            };
        }
        match (name, &self.rec) {
            ("fc.w", _) => Some(&self.fc_w),
            ("fc.b", _) => Some(&self.fc_b),
            ("lstm.wx", RecurrentParams::Lstm { wx, .. }) => Some(wx),
            ("lstm.wh", RecurrentParams::Lstm { wh, .. }) => Some(wh),
            ("lstm.b", RecurrentParams::Lstm { b, .. }) => Some(b),
            ("rec.w", RecurrentParams::Fc { w, .. }) => Some(w),
            ("rec.b", RecurrentParams::Fc { b, .. }) => Some(b),
            ("policy.w", _) => Some(&self.policy_w),
            ("policy.b", _) => Some(&self.policy_b),
            ("value.w", _) => Some(&self.value_w),
            ("value.b", _) => Some(&self.value_b),
            _ => None,
        }
    }

    /// Mutable variant of `block`.
    pub fn block_mut(&mut self, name: &str) -> Option<&mut Tensor<R>> {
        if let Some(rest) = name.strip_prefix("conv") {
            let (idx, field) = rest.split_once('.')?;
            let c = self.convs.get_mut(idx.parse::<usize>().ok()?)?;
            return match field {
                "w" => Some(&mut c.w),
                "b" => Some(&mut c.b),
                _ => None,
            };
        }
        match (name, &mut self.rec) {
            ("fc.w", _) => Some(&mut self.fc_w),
            ("fc.b", _) => Some(&mut self.fc_b),
            ("lstm.wx", RecurrentParams::Lstm { wx, .. }) => Some(wx),
            ("lstm.wh", RecurrentParams::Lstm { wh, .. }) => Some(wh),
            ("lstm.b", RecurrentParams::Lstm { b, .. }) => Some(b),
            ("rec.w", RecurrentParams::Fc { w, .. }) => Some(w),
            ("rec.b", RecurrentParams::Fc { b, .. }) => Some(b),
            ("policy.w", _) => Some(&mut self.policy_w),
            ("policy.b", _) => Some(&mut self.policy_b),
            ("value.w", _) => Some(&mut self.value_w),
            ("value.b", _) => Some(&mut self.value_b),
            _ => None,
        }
    }

    /// Block names in canonical order.
    pub fn block_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each_block(|name, _| names.push(name.to_owned()));
        names
    }

    pub fn total_len(&self) -> usize {
        let mut n = 0;
        self.for_each_block(|_, t| n += t.len());
        n
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_block(|_, t| ok &= t.all_finite());
        ok
    }

    /// `self += other * scale`, block-wise (gradient accumulation).
    pub fn accumulate(&mut self, other: &NetworkParams<R>, scale: R) {
        self.for_each_block_mut(|name, t| {
            let src = other.block(name).expect("matching block");
            assert_eq!(t.shape(), src.shape(), "accumulate shape mismatch");
            for (d, s) in t.data_mut().iter_mut().zip(src.data()) {
                *d = *d + *s * scale;
            }
        });
    }

    pub fn cast<S: Real>(&self) -> NetworkParams<S> {
        NetworkParams {
            convs: self
                .convs
                .iter()
                .map(|c| ConvParams { w: c.w.cast(), b: c.b.cast() })
                .collect(),
            fc_w: self.fc_w.cast(),
            fc_b: self.fc_b.cast(),
            rec: match &self.rec {
                RecurrentParams::Lstm { wx, wh, b } => {
                    RecurrentParams::Lstm { wx: wx.cast(), wh: wh.cast(), b: b.cast() }
                }
                RecurrentParams::Fc { w, b } => {
                    RecurrentParams::Fc { w: w.cast(), b: b.cast() }
                }
            },
            policy_w: self.policy_w.cast(),
            policy_b: self.policy_b.cast(),
            value_w: self.value_w.cast(),
            value_b: self.value_b.cast(),
        }
    }
}

/// Glorot-uniform bound. Matrices `[out, in]` use `fan_in = in`,
/// `fan_out = out`; conv kernels `[out, in, k, k]` use `in*k*k` and `out*k*k`.
fn glorot_bound(shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = match shape.len() {
        2 => (shape[1], shape[0]),
        4 => (shape[1] * shape[2] * shape[3], shape[0] * shape[2] * shape[3]),
        other => panic!("glorot init on rank-{other} tensor"),
    };
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Seeded Glorot-uniform weights, zero biases, LSTM forget-gate bias segment
/// set to 1.0. Draws happen in `f64` in canonical block order, so the same
/// seed yields the same parameters at every precision.
pub fn init_network<R: Real>(cfg: &NetworkConfig, seed: u64) -> Result<NetworkParams<R>, NnError> {
    let mut params = NetworkParams::<R>::zeros(cfg)?;
    let mut rng = seeded_rng(seed);
    params.for_each_block_mut(|name, t| {
        if name.ends_with(".b") {
            return;
        }
        let bound = glorot_bound(t.shape());
        for v in t.data_mut() {
            *v = R::from_f64(rng.gen_range(-bound..bound));
        }
    });
    if let RecurrentParams::Lstm { b, .. } = &mut params.rec {
        let h = cfg.recurrent.width();
        for v in &mut b.data_mut()[h..2 * h] {
            *v = R::one();
        }
    }
    Ok(params)
}

/// Recurrent hidden state, zeroed at episode start.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<R: Real> {
    pub h: Vec<R>,
    pub c: Vec<R>,
}

impl<R: Real> LstmState<R> {
    pub fn zeros(width: usize) -> LstmState<R> {
        LstmState { h: vec![R::zero(); width], c: vec![R::zero(); width] }
    }

    pub fn all_finite(&self) -> bool {
        self.h.iter().chain(&self.c).all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = NetworkConfig::probe16();
        let a: NetworkParams<f32> = init_network(&cfg, 5).unwrap();
        let b: NetworkParams<f32> = init_network(&cfg, 5).unwrap();
        let c: NetworkParams<f32> = init_network(&cfg, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_matches_param_count() {
        for cfg in [
            NetworkConfig::table1(84),
            NetworkConfig::fc_ablation(84),
            NetworkConfig::probe16(),
            NetworkConfig::desk32(),
        ] {
            let p: NetworkParams<f32> = init_network(&cfg, 1).unwrap();
            assert_eq!(p.total_len(), cfg.param_count().unwrap());
            assert!(p.all_finite());
        }
    }

    #[test]
    fn init_biases_zero_except_forget_gate() {
        let cfg = NetworkConfig::probe16();
        let p: NetworkParams<f64> = init_network(&cfg, 2).unwrap();
        assert!(p.fc_b.data().iter().all(|&v| v == 0.0));
        assert!(p.policy_b.data().iter().all(|&v| v == 0.0));
        assert!(p.value_b.data().iter().all(|&v| v == 0.0));
        let h = cfg.recurrent.width();
        match &p.rec {
            RecurrentParams::Lstm { b, .. } => {
                for (i, &v) in b.data().iter().enumerate() {
                    let expect = if (h..2 * h).contains(&i) { 1.0 } else { 0.0 };
                    assert_eq!(v, expect, "bias index {i}");
                }
            }
            RecurrentParams::Fc { .. } => panic!("probe16 is an LSTM config"),
        }
    }

    #[test]
    fn init_weights_within_glorot_bound() {
        let cfg = NetworkConfig::probe16();
        let p: NetworkParams<f64> = init_network(&cfg, 3).unwrap();
        p.for_each_block(|name, t| {
            if name.ends_with(".w") || name.ends_with("wx") || name.ends_with("wh") {
                let bound = glorot_bound(t.shape());
                for &v in t.data() {
                    assert!(v.abs() <= bound, "{name}: {v} outside +-{bound}");
                }
                // Not degenerate: some mass away from zero.
                assert!(t.data().iter().any(|&v| v.abs() > bound / 10.0), "{name} all tiny");
            }
        });
    }

    #[test]
    fn same_seed_same_params_across_precisions() {
        let cfg = NetworkConfig::probe16();
        let single: NetworkParams<f32> = init_network(&cfg, 9).unwrap();
        let double: NetworkParams<f64> = init_network(&cfg, 9).unwrap();
        let down: NetworkParams<f32> = double.cast();
        assert_eq!(single, down);
    }

    #[test]
    fn block_names_are_canonical() {
        let lstm: NetworkParams<f32> =
            NetworkParams::zeros(&NetworkConfig::probe16()).unwrap();
        assert_eq!(
            lstm.block_names(),
            [
                "conv0.w", "conv0.b", "conv1.w", "conv1.b", "conv2.w", "conv2.b", "fc.w",
                "fc.b", "lstm.wx", "lstm.wh", "lstm.b", "policy.w", "policy.b", "value.w",
                "value.b"
            ]
        );
        let abl: NetworkParams<f32> =
            NetworkParams::zeros(&NetworkConfig::fc_ablation(84)).unwrap();
        assert!(abl.block_names().contains(&"rec.w".to_owned()));
    }

    #[test]
    fn accumulate_adds_scaled_blocks() {
        let cfg = NetworkConfig::probe16();
        let mut a: NetworkParams<f64> = init_network(&cfg, 1).unwrap();
        let b: NetworkParams<f64> = init_network(&cfg, 2).unwrap();
        let before = a.fc_w.data()[0];
        a.accumulate(&b, 0.5);
        assert!((a.fc_w.data()[0] - (before + 0.5 * b.fc_w.data()[0])).abs() < 1e-12);
    }
}
