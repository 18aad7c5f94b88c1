//! Shared parameter store updated by asynchronous workers.
//!
//! Each parameter block sits behind its own mutex together with its Adam
//! moments and step count. Workers snapshot block by block (a snapshot may
//! interleave with updates to other blocks, which asynchronous training
//! tolerates) and submit raw gradients; the store applies them with the same
//! scalar Adam kernel used by the batch optimizer, so single-worker training
//! is bit-for-bit reproducible against a serial run.

use parking_lot::Mutex;

use super::TrainerError;
use crate::nn::{
    adam_scalar_update, AdamHyper, AdamState, Checkpoint, NetworkConfig, NetworkParams, NnError,
    Tensor,
};

struct BlockSlot {
    value: Tensor<f32>,
    m: Tensor<f32>,
    v: Tensor<f32>,
    /// Adam step count for this block; advanced once per submitted gradient.
    t: u64,
}

pub struct SharedParams {
    cfg: NetworkConfig,
    hyper: AdamHyper,
    /// Canonical block order, matching `NetworkParams::for_each_block`.
    blocks: Vec<(String, Mutex<BlockSlot>)>,
}

impl SharedParams {
    /// Freshly initialized network with zero Adam moments.
    pub fn new(cfg: &NetworkConfig, hyper: AdamHyper, seed: u64) -> Result<SharedParams, NnError> {
        let params: NetworkParams<f32> = crate::nn::init_network(cfg, seed)?;
        let adam = AdamState::new(cfg)?;
        Ok(SharedParams::from_parts(cfg.clone(), hyper, &params, &adam))
    }

    pub fn from_parts(
        cfg: NetworkConfig,
        hyper: AdamHyper,
        params: &NetworkParams<f32>,
        adam: &AdamState<f32>,
    ) -> SharedParams {
        let mut blocks = Vec::new();
        params.for_each_block(|name, tensor| {
            let m = adam.m.block(name).expect("moment block").clone();
            let v = adam.v.block(name).expect("moment block").clone();
            blocks.push((
                name.to_string(),
                Mutex::new(BlockSlot { value: tensor.clone(), m, v, t: adam.t }),
            ));
        });
        SharedParams { cfg, hyper, blocks }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, hyper: AdamHyper) -> SharedParams {
        SharedParams::from_parts(ckpt.config.clone(), hyper, &ckpt.params, &ckpt.adam)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn hyper(&self) -> &AdamHyper {
        &self.hyper
    }

    /// Copies the current parameters out, locking one block at a time.
    pub fn snapshot(&self) -> NetworkParams<f32> {
        let mut params = NetworkParams::zeros(&self.cfg).expect("store config is valid");
        let mut index = 0;
        params.for_each_block_mut(|name, tensor| {
            let (stored_name, slot) = &self.blocks[index];
            debug_assert_eq!(stored_name, name);
            tensor.data_mut().copy_from_slice(slot.lock().value.data());
            index += 1;
        });
        params
    }

    /// Applies one Adam update per block from a raw gradient. Rejects
    /// non-finite gradients without touching any block.
    pub fn submit(&self, grads: &NetworkParams<f32>) -> Result<(), TrainerError> {
        if !grads.all_finite() {
            return Err(TrainerError::NonFiniteGradient);
        }
        let mut index = 0;
        grads.for_each_block(|name, grad| {
            let (stored_name, slot) = &self.blocks[index];
            debug_assert_eq!(stored_name, name);
            let mut slot = slot.lock();
            slot.t += 1;
            let t = slot.t;
            assert_eq!(slot.value.len(), grad.len(), "{name} gradient length");
            let slot = &mut *slot;
            let md = slot.m.data_mut();
            let vd = slot.v.data_mut();
            let gd = grad.data();
            for (i, w) in slot.value.data_mut().iter_mut().enumerate() {
                adam_scalar_update(w, &mut md[i], &mut vd[i], gd[i], &self.hyper, t);
            }
            index += 1;
        });
        Ok(())
    }

    /// Per-block update counts, canonical order. Equal counts across blocks
    /// confirm every submitted gradient touched every block exactly once.
    pub fn update_counts(&self) -> Vec<u64> {
        self.blocks.iter().map(|(_, slot)| slot.lock().t).collect()
    }

    /// Total gradients applied, asserting the per-block counts agree.
    pub fn submissions(&self) -> u64 {
        let counts = self.update_counts();
        let first = counts.first().copied().unwrap_or(0);
        assert!(
            counts.iter().all(|&c| c == first),
            "unbalanced per-block update counts: {counts:?}"
        );
        first
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let params = self.snapshot();
        let mut adam = AdamState::new(&self.cfg).expect("store config is valid");
        let mut index = 0;
        adam.m.for_each_block_mut(|name, tensor| {
            let (stored_name, slot) = &self.blocks[index];
            debug_assert_eq!(stored_name, name);
            tensor.data_mut().copy_from_slice(slot.lock().m.data());
            index += 1;
        });
        index = 0;
        adam.v.for_each_block_mut(|name, tensor| {
            let (stored_name, slot) = &self.blocks[index];
            debug_assert_eq!(stored_name, name);
            tensor.data_mut().copy_from_slice(slot.lock().v.data());
            index += 1;
        });
        adam.t = self.blocks.iter().map(|(_, s)| s.lock().t).max().unwrap_or(0);
        Checkpoint { config: self.cfg.clone(), params, adam }
    }
}
