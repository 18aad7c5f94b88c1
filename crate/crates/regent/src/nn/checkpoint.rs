//! Binary checkpoint format for network weights and optimizer state.
//!
//! Layout (all integers little-endian):
//!   magic "RGNN", format version u32,
//!   config: input_size u32, conv count u32, per conv (channels, kernel,
//!   stride) u32 each, fc_width u32, recurrent kind u32 (0 lstm, 1 fc
//!   ablation), recurrent width u32,
//!   parameter blocks: count u32, then per block name_len u32, name bytes,
//!   dim_count u32, dims u32 each, payload f32 * prod(dims),
//!   optimizer: step count u64, then first-moment blocks and second-moment
//!   blocks with the same framing as the parameter blocks.
//! Blocks appear in canonical order and are verified against it on load.

use std::fs;
use std::path::Path;

use super::adam::AdamState;
use super::params::NetworkParams;
use super::{ConvSpec, NetworkConfig, NnError, RecurrentKind};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RGNN";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const KIND_LSTM: u32 = 0;
const KIND_FC_ABLATION: u32 = 1;

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub params: NetworkParams<f32>,
    pub adam: AdamState<f32>,
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_blocks(buf: &mut Vec<u8>, params: &NetworkParams<f32>) {
    let mut count = 0u32;
    params.for_each_block(|_, _| count += 1);
    push_u32(buf, count);
    params.for_each_block(|name, t| {
        push_u32(buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        push_u32(buf, t.shape().len() as u32);
        for &d in t.shape() {
            push_u32(buf, d as u32);
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    });
}

/// Serializes and writes a checkpoint. The write goes through a temporary
/// file in the same directory and a rename, so an interrupted save never
/// leaves a truncated checkpoint at `path`.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), NnError> {
    ckpt.config.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut buf, CHECKPOINT_FORMAT_VERSION);
    push_u32(&mut buf, ckpt.config.input_size as u32);
    push_u32(&mut buf, ckpt.config.convs.len() as u32);
    for c in &ckpt.config.convs {
        push_u32(&mut buf, c.channels as u32);
        push_u32(&mut buf, c.kernel as u32);
        push_u32(&mut buf, c.stride as u32);
    }
    push_u32(&mut buf, ckpt.config.fc_width as u32);
    let (kind, width) = match ckpt.config.recurrent {
        RecurrentKind::Lstm { width } => (KIND_LSTM, width),
        RecurrentKind::FcAblation { width } => (KIND_FC_ABLATION, width),
    };
    push_u32(&mut buf, kind);
    push_u32(&mut buf, width as u32);
    push_blocks(&mut buf, &ckpt.params);
    buf.extend_from_slice(&ckpt.adam.t.to_le_bytes());
    push_blocks(&mut buf, &ckpt.adam.m);
    push_blocks(&mut buf, &ckpt.adam.v);

    let io_err = |source: std::io::Error| NnError::CheckpointIo { path: path.to_owned(), source };
    let stem = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{stem}.tmp"));
    fs::write(&tmp, &buf).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> NnError {
        NnError::CorruptCheckpoint { path: self.path.to_owned(), reason: reason.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.pos + n > self.buf.len() {
            return Err(self.corrupt(format!(
                "unexpected end of file at byte {} (wanted {} more)",
                self.pos, n
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String, NnError> {
        let len = self.u32()? as usize;
        if len > 256 {
            return Err(self.corrupt(format!("block name length {len} out of range")));
        }
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.corrupt("block name not utf-8"))
    }
}

fn read_blocks(
    r: &mut Reader<'_>,
    cfg: &NetworkConfig,
    what: &str,
) -> Result<NetworkParams<f32>, NnError> {
    let mut params = NetworkParams::<f32>::zeros(cfg)?;
    let expected_names = params.block_names();
    let count = r.u32()? as usize;
    if count != expected_names.len() {
        return Err(r.corrupt(format!(
            "{what}: {count} blocks, config implies {}",
            expected_names.len()
        )));
    }
    for expected in &expected_names {
        let name = r.name()?;
        if &name != expected {
            return Err(r.corrupt(format!("{what}: block {name:?} where {expected:?} belongs")));
        }
        let dim_count = r.u32()? as usize;
        if dim_count > 8 {
            return Err(r.corrupt(format!("{what}/{name}: {dim_count} dims out of range")));
        }
        let mut dims = Vec::with_capacity(dim_count);
        let mut len = 1usize;
        for _ in 0..dim_count {
            let d = r.u32()? as usize;
            len = len.saturating_mul(d);
            dims.push(d);
        }
        let block = params
            .block_mut(&name)
            .ok_or_else(|| NnError::CorruptCheckpoint {
                path: r.path.to_owned(),
                reason: format!("{what}: unknown block {name:?}"),
            })?;
        if block.shape() != dims.as_slice() {
            return Err(NnError::CorruptCheckpoint {
                path: r.path.to_owned(),
                reason: format!(
                    "{what}/{name}: stored shape {dims:?}, config implies {:?}",
                    block.shape()
                ),
            });
        }
        debug_assert_eq!(block.len(), len);
        let bytes = r.take(4 * len)?;
        for (i, v) in block.data_mut().iter_mut().enumerate() {
            *v = f32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
        }
    }
    Ok(params)
}

/// Reads and validates a checkpoint written by `save_checkpoint`.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, NnError> {
    let buf = fs::read(path)
        .map_err(|source| NnError::CheckpointIo { path: path.to_owned(), source })?;
    let mut r = Reader { buf: &buf, pos: 0, path };

    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(r.corrupt("bad magic, not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(NnError::CheckpointVersion { got: version, expected: CHECKPOINT_FORMAT_VERSION });
    }
    let input_size = r.u32()? as usize;
    let conv_count = r.u32()? as usize;
    if conv_count > 32 {
        return Err(r.corrupt(format!("conv count {conv_count} out of range")));
    }
    let mut convs = Vec::with_capacity(conv_count);
    for _ in 0..conv_count {
        let channels = r.u32()? as usize;
        let kernel = r.u32()? as usize;
        let stride = r.u32()? as usize;
        convs.push(ConvSpec { channels, kernel, stride });
    }
    let fc_width = r.u32()? as usize;
    let kind = r.u32()?;
    let width = r.u32()? as usize;
    let recurrent = match kind {
        KIND_LSTM => RecurrentKind::Lstm { width },
        KIND_FC_ABLATION => RecurrentKind::FcAblation { width },
        other => return Err(r.corrupt(format!("unknown recurrent kind code {other}"))),
    };
    let config = NetworkConfig { input_size, convs, fc_width, recurrent };
    config.validate().map_err(|e| NnError::CorruptCheckpoint {
        path: path.to_owned(),
        reason: format!("stored config invalid: {e}"),
    })?;

    let params = read_blocks(&mut r, &config, "params")?;
    let t = r.u64()?;
    let m = read_blocks(&mut r, &config, "adam.m")?;
    let v = read_blocks(&mut r, &config, "adam.v")?;
    if r.pos != r.buf.len() {
        return Err(r.corrupt(format!("{} trailing bytes", r.buf.len() - r.pos)));
    }
    Ok(Checkpoint { config, params, adam: AdamState { m, v, t } })
}

/// Loads a checkpoint and insists its architecture equals `expected`.
pub fn load_checkpoint_expecting(
    path: &Path,
    expected: &NetworkConfig,
) -> Result<Checkpoint, NnError> {
    let ckpt = load_checkpoint(path)?;
    if &ckpt.config != expected {
        return Err(NnError::ConfigMismatch {
            detail: format!("checkpoint has {:?}, expected {:?}", ckpt.config, expected),
        });
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::adam::{adam_step, AdamHyper};
    use crate::nn::init_network;
    use crate::test_rng;
    use rand::Rng as _;

    fn sample_checkpoint(seed: u64) -> Checkpoint {
        let config = NetworkConfig::probe16();
        let mut params: NetworkParams<f32> = init_network(&config, seed).unwrap();
        let mut adam = AdamState::new(&config).unwrap();
        let mut rng = test_rng(seed ^ 0xA5);
        // A few optimizer steps so m, v, and t are all nontrivial.
        for _ in 0..3 {
            let mut grads = NetworkParams::<f32>::zeros(&config).unwrap();
            grads.for_each_block_mut(|_, t| {
                for v in t.data_mut() {
                    *v = rng.gen_range(-0.1..0.1);
                }
            });
            adam_step(&mut params, &grads, &mut adam, &AdamHyper::default());
        }
        Checkpoint { config, params, adam }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let ckpt = sample_checkpoint(41);
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, ckpt);
        assert_eq!(loaded.adam.t, 3);
    }

    #[test]
    fn save_overwrites_previous_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&path, &sample_checkpoint(1)).unwrap();
        let second = sample_checkpoint(2);
        save_checkpoint(&path, &second).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), second);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOPE and then some bytes").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(NnError::CorruptCheckpoint { .. })
        ));
    }

    #[test]
    fn rejects_wrong_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&path, &sample_checkpoint(5)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(NnError::CheckpointVersion { got: 99, expected: CHECKPOINT_FORMAT_VERSION })
        ));
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&path, &sample_checkpoint(6)).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(NnError::CorruptCheckpoint { .. })
        ));

        let mut extended = bytes.clone();
        extended.extend_from_slice(&[0u8; 5]);
        std::fs::write(&path, &extended).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        match err {
            NnError::CorruptCheckpoint { reason, .. } => {
                assert!(reason.contains("trailing"), "{reason}")
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("absent.ckpt");
        assert!(matches!(
            load_checkpoint(&path),
            Err(NnError::CheckpointIo { .. })
        ));
    }

    #[test]
    fn config_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&path, &sample_checkpoint(7)).unwrap();
        let err = load_checkpoint_expecting(&path, &NetworkConfig::desk32()).unwrap_err();
        assert!(matches!(err, NnError::ConfigMismatch { .. }));
        assert!(load_checkpoint_expecting(&path, &NetworkConfig::probe16()).is_ok());
    }
}
