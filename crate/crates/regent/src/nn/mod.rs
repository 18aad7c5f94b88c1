//! Minimal neural-network engine for the fixed actor-critic architecture:
//! strided convolutions, a fully connected layer, an LSTM (or its FC
//! ablation), eLU activations, softmax heads, backpropagation through time,
//! Adam, and checkpoint persistence.
//!
//! Everything is generic over [`Real`]: `f32` for training, `f64` for the
//! finite-difference gradient tests.

mod adam;
mod backward;
mod checkpoint;
mod forward;
mod gradcheck;
mod params;
mod tensor;

pub use adam::{adam_scalar_update, adam_step, clip_global_norm, AdamHyper, AdamState};
pub use backward::backward;
pub use checkpoint::{
    load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint,
    CHECKPOINT_FORMAT_VERSION,
};
pub use forward::{
    elu, elu_derivative_from_output, entropy, forward, forward_recorded, softmax, ForwardOutput,
    ForwardTape, RecStepRecord, StepRecord,
};
pub use gradcheck::{probe16_ablation, run_gradcheck, run_gradcheck_config, GradcheckReport};
pub use params::{init_network, ConvParams, LstmState, NetworkParams, RecurrentParams};
pub use tensor::Tensor;

use crate::geometry::ACTION_COUNT;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Policy head width: one logit per discrete action.
pub const POLICY_OUTPUTS: usize = ACTION_COUNT;

/// Numeric type the engine runs on. Training uses `f32`; gradient checks use
/// `f64`. Seeded initialization draws in `f64` and converts, so both
/// precisions see the same parameter sequence.
pub trait Real:
    num_traits::Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> f64 {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("conv layer {layer} collapses spatial size to {size} (must be >= 1)")]
    ConvCollapse { layer: usize, size: i64 },
    #[error("conv layer {layer} has zero {what}")]
    ZeroConvField { layer: usize, what: &'static str },
    #[error("network needs at least one conv layer")]
    NoConvLayers,
    #[error("{what} width must be positive")]
    ZeroWidth { what: &'static str },
    #[error("observation shape {got:?} does not match expected {expected:?}")]
    ShapeMismatch { got: Vec<usize>, expected: Vec<usize> },
    #[error("tape holds {steps} steps but {what} carries {got}")]
    SignalLengthMismatch { steps: usize, what: &'static str, got: usize },
    #[error("cannot access checkpoint {path:?}: {source}")]
    CheckpointIo {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint {path:?}: {reason}")]
    CorruptCheckpoint { path: std::path::PathBuf, reason: String },
    #[error("checkpoint format version {got} unsupported (this build reads {expected})")]
    CheckpointVersion { got: u32, expected: u32 },
    #[error("checkpoint was written for a different network config: {detail}")]
    ConfigMismatch { detail: String },
}

/// One convolution layer: `channels` output maps, square `kernel`, `stride`,
/// no padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub const fn new(channels: usize, kernel: usize, stride: usize) -> ConvSpec {
        ConvSpec { channels, kernel, stride }
    }
}

/// The recurrent stage: a real LSTM, or the stateless FC ablation that
/// replaces it width-for-width in the comparison experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RecurrentKind {
    Lstm { width: usize },
    FcAblation { width: usize },
}

impl RecurrentKind {
    pub fn width(&self) -> usize {
        match *self {
            RecurrentKind::Lstm { width } | RecurrentKind::FcAblation { width } => width,
        }
    }

    pub fn is_lstm(&self) -> bool {
        matches!(self, RecurrentKind::Lstm { .. })
    }
}

/// Fixed architecture: conv trunk, eLU FC, recurrent stage, then a policy
/// head (8 logits) and a value head (1 scalar) off the recurrent output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Square observation edge length; input is 2 x n x n (fixed, moving).
    pub input_size: usize,
    pub convs: Vec<ConvSpec>,
    pub fc_width: usize,
    pub recurrent: RecurrentKind,
}

/// Observation channels: fixed image + current moving image.
pub const INPUT_CHANNELS: usize = 2;

impl NetworkConfig {
    /// The full-size architecture: C16-8-S4, C16-4-S2, C32-4-S2, FC256,
    /// LSTM256 (spatial chain 20 -> 9 -> 3 at input 84, 41 -> 19 -> 8 at 168).
    pub fn table1(input_size: usize) -> NetworkConfig {
        NetworkConfig {
            input_size,
            convs: vec![ConvSpec::new(16, 8, 4), ConvSpec::new(16, 4, 2), ConvSpec::new(32, 4, 2)],
            fc_width: 256,
            recurrent: RecurrentKind::Lstm { width: 256 },
        }
    }

    /// `table1` with the LSTM swapped for the stateless FC128 stage.
    pub fn fc_ablation(input_size: usize) -> NetworkConfig {
        NetworkConfig {
            recurrent: RecurrentKind::FcAblation { width: 128 },
            ..Self::table1(input_size)
        }
    }

    /// Tiny 16x16 network for finite-difference gradient checks: small enough
    /// that central differences over every parameter stay fast.
    pub fn probe16() -> NetworkConfig {
        NetworkConfig {
            input_size: 16,
            convs: vec![ConvSpec::new(4, 3, 2), ConvSpec::new(4, 3, 1), ConvSpec::new(4, 3, 1)],
            fc_width: 24,
            recurrent: RecurrentKind::Lstm { width: 16 },
        }
    }

    /// Reduced 32x32 network (about 186k parameters) for desk-scale training.
    pub fn desk32() -> NetworkConfig {
        NetworkConfig {
            input_size: 32,
            convs: vec![ConvSpec::new(8, 4, 2), ConvSpec::new(8, 3, 2), ConvSpec::new(16, 3, 1)],
            fc_width: 128,
            recurrent: RecurrentKind::Lstm { width: 128 },
        }
    }

    /// Spatial edge length after each conv layer (floor division, no padding).
    /// Errors if any layer collapses below 1.
    pub fn spatial_sizes(&self) -> Result<Vec<usize>, NnError> {
        if self.convs.is_empty() {
            return Err(NnError::NoConvLayers);
        }
        let mut sizes = Vec::with_capacity(self.convs.len());
        let mut n = self.input_size as i64;
        for (layer, c) in self.convs.iter().enumerate() {
            if c.channels == 0 {
                return Err(NnError::ZeroConvField { layer, what: "channels" });
            }
            if c.kernel == 0 {
                return Err(NnError::ZeroConvField { layer, what: "kernel" });
            }
            if c.stride == 0 {
                return Err(NnError::ZeroConvField { layer, what: "stride" });
            }
            n = (n - c.kernel as i64).div_euclid(c.stride as i64) + 1;
            if n < 1 {
                return Err(NnError::ConvCollapse { layer, size: n });
            }
            sizes.push(n as usize);
        }
        Ok(sizes)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        self.spatial_sizes()?;
        if self.fc_width == 0 {
            return Err(NnError::ZeroWidth { what: "fc" });
        }
        if self.recurrent.width() == 0 {
            return Err(NnError::ZeroWidth { what: "recurrent" });
        }
        Ok(())
    }

    /// Flattened conv-trunk output length (input to the FC layer).
    pub fn flattened_size(&self) -> Result<usize, NnError> {
        let sizes = self.spatial_sizes()?;
        let last = *sizes.last().unwrap();
        Ok(self.convs.last().unwrap().channels * last * last)
    }

    /// Total parameter count, a pure function of the config.
    pub fn param_count(&self) -> Result<usize, NnError> {
        self.validate()?;
        let mut total = 0usize;
        let mut in_ch = INPUT_CHANNELS;
        for c in &self.convs {
            total += c.channels * in_ch * c.kernel * c.kernel + c.channels;
            in_ch = c.channels;
        }
        let flat = self.flattened_size()?;
        total += self.fc_width * flat + self.fc_width;
        let r = self.recurrent.width();
        match self.recurrent {
            RecurrentKind::Lstm { .. } => {
                // wx (4r x fc), wh (4r x r), single bias vector (4r).
                total += 4 * r * self.fc_width + 4 * r * r + 4 * r;
            }
            RecurrentKind::FcAblation { .. } => {
                total += r * self.fc_width + r;
            }
        }
        total += POLICY_OUTPUTS * r + POLICY_OUTPUTS;
        total += r + 1;
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table1_spatial_chain() {
        assert_eq!(NetworkConfig::table1(84).spatial_sizes().unwrap(), vec![20, 9, 3]);
        assert_eq!(NetworkConfig::table1(168).spatial_sizes().unwrap(), vec![41, 19, 8]);
    }

    #[test]
    fn table1_param_count_is_pinned() {
        // Architecture drift guard; recompute by hand before changing.
        assert_eq!(NetworkConfig::table1(84).param_count().unwrap(), 616_009);
    }

    #[test]
    fn collapsing_config_is_rejected() {
        let cfg = NetworkConfig {
            input_size: 16,
            convs: vec![ConvSpec::new(4, 8, 4), ConvSpec::new(4, 8, 2)],
            fc_width: 8,
            recurrent: RecurrentKind::Lstm { width: 8 },
        };
        assert!(matches!(cfg.validate(), Err(NnError::ConvCollapse { layer: 1, .. })));
    }

    #[test]
    fn presets_validate() {
        for cfg in [
            NetworkConfig::table1(84),
            NetworkConfig::table1(168),
            NetworkConfig::fc_ablation(84),
            NetworkConfig::probe16(),
            NetworkConfig::desk32(),
        ] {
            cfg.validate().unwrap();
        }
        assert_eq!(NetworkConfig::probe16().spatial_sizes().unwrap(), vec![7, 5, 3]);
        assert_eq!(NetworkConfig::desk32().spatial_sizes().unwrap(), vec![15, 7, 5]);
    }
}
