use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::nn::{Mode, Module};
use crate::tensor::optim::{Optimizer, OptimizerKind};
use crate::tensor::schedule::LrSchedule;
use crate::tensor::Tape;
use crate::world::{derive_seed, BatchSampler, Dataset};

use super::model::{OracleArch, SegModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainHyper {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for PretrainHyper {
    fn default() -> Self {
        PretrainHyper { iters: 1500, batch: 8, lr: 3e-3, weight_decay: 1e-4 }
    }
}

pub struct Pretrained {
    pub model: SegModel,
    pub losses: Vec<f32>,
}

/// Cross-entropy training of every model parameter on the base domain with
/// AdamW and a single cosine decay.
pub fn pretrain_oracle(arch: &OracleArch, base: &Dataset, hyper: &PretrainHyper, seed: u64) -> Result<Pretrained> {
    if base.is_empty() {
        return Err(Error::Config("oracle pretraining needs a non-empty base domain".into()));
    }
    if hyper.batch == 0 || hyper.lr <= 0.0 {
        return Err(Error::Config(format!("invalid pretraining hyperparameters {hyper:?}")));
    }
    let mut model = SegModel::new(arch, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 1)))?;
    let mut sampler = BatchSampler::new(base.len(), derive_seed(seed, 2))?;
    let kind = OptimizerKind::Adamw { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: hyper.weight_decay };
    let mut opt = Optimizer::new(kind);
    let schedule =
        LrSchedule::CosineWarmRestarts { base_lr: hyper.lr, t0: hyper.iters.max(1), t_mult: 1, min_lr: hyper.lr * 0.01 };
    let mut losses = Vec::with_capacity(hyper.iters);
    for step in 0..hyper.iters {
        let (x, target) = base.batch(&sampler.next_batch(hyper.batch))?;
        let mut tape = Tape::new();
        let xv = tape.constant(x)?;
        let loss = model
            .forward(&mut tape, xv, Mode::Train)
            .and_then(|logits| tape.cross_entropy(logits, &target, None))
            .map_err(|e| Error::Diverged { step, detail: e.to_string() })?;
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?;
        model.zero_grad();
        grads.accumulate_into(model.params_mut())?;
        opt.step(model.params_mut(), schedule.lr_at(step))?;
        losses.push(value);
    }
    Ok(Pretrained { model, losses })
}
