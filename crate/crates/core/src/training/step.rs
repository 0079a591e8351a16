use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seeding;
use crate::tensor::{clip_grad_norm, Adam, AdamConfig, Bound, Tape, Var};

use super::PersonalizedSystem;

/// Adam over every store of a system, with global-norm clipping.
pub(crate) struct Stepper {
    adams: Vec<Adam>,
    clip: f64,
}

impl Stepper {
    pub fn new(sys: &PersonalizedSystem, lr: f64, clip: f64) -> Self {
        let adams = sys
            .stores()
            .into_iter()
            .map(|s| Adam::new(s, AdamConfig::with_lr(lr)))
            .collect();
        Self { adams, clip }
    }

    /// Backward from `loss`, then one clipped update. Returns the loss.
    pub fn step(&mut self, sys: &mut PersonalizedSystem, tape: &Tape, bounds: &[Bound], loss: Var) -> Result<f64> {
        let value = tape.value(loss)[0];
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss {value}")));
        }
        let grads = tape.backward(loss)?;
        let mut stores = sys.stores_mut();
        for (s, b) in stores.iter_mut().zip(bounds) {
            s.zero_grad();
            s.accumulate(b, &grads)?;
        }
        clip_grad_norm(&mut stores, self.clip);
        for (a, s) in self.adams.iter_mut().zip(stores.iter_mut()) {
            a.step(s)?;
        }
        Ok(value)
    }
}

/// Seeded per-epoch order of `n` items, cut into batches.
pub(crate) fn batches(n: usize, batch: usize, seed: u64, label: &str) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeding::rng(seed, label));
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}
