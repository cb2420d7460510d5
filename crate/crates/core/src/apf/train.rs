use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::OracleHandle;
use crate::spg::{attach_prompt, StylePromptGenerator};
use crate::tensor::nn::Module;
use crate::tensor::optim::{Optimizer, OptimizerKind};
use crate::tensor::schedule::LrSchedule;
use crate::tensor::Tape;
use crate::world::{derive_seed, BatchSampler, Dataset};

use super::encoder::SharedEncoder;
use super::fusion::FusionHeads;
use super::infer::PromptFusion;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApfHyper {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub min_lr: f64,
    /// Width `d_e` of the query/key space.
    pub embed_dim: usize,
    /// Train on stylized source copies as well as the originals.
    #[serde(default)]
    pub mix_stylized: bool,
}

impl Default for ApfHyper {
    fn default() -> Self {
        ApfHyper {
            iters: 4000,
            batch: 8,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            weight_decay: 0.01,
            min_lr: 1e-5,
            embed_dim: 32,
            mix_stylized: false,
        }
    }
}

impl ApfHyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.lr <= 0.0 || self.min_lr <= 0.0 || self.min_lr > self.lr || self.embed_dim == 0 {
            return Err(Error::Config(format!("invalid prompt-fusion hyperparameters {self:?}")));
        }
        Ok(())
    }

    /// Cosine annealing with warm restarts: the first period is one epoch
    /// and each later period is longer by the number of epochs.
    pub fn schedule(&self, dataset_len: usize) -> LrSchedule {
        let per_epoch = dataset_len.div_ceil(self.batch).max(1);
        let epochs = self.iters.div_ceil(per_epoch).max(1);
        LrSchedule::CosineWarmRestarts { base_lr: self.lr, t0: per_epoch, t_mult: epochs, min_lr: self.min_lr }
    }
}

/// Trains only the query/key heads. Generators, encoder and oracle are
/// evaluated as constants; the oracle's input gradient at `x + P_fused` is
/// chained back through the fusion weights into the heads.
pub fn train_apf(
    heads: &mut FusionHeads,
    data: &Dataset,
    generators: &[StylePromptGenerator],
    encoder: &SharedEncoder,
    oracle: &OracleHandle,
    hyper: &ApfHyper,
    seed: u64,
) -> Result<Vec<f32>> {
    hyper.validate()?;
    let schedule = hyper.schedule(data.len());
    let mut sampler = BatchSampler::new(data.len(), derive_seed(seed, 0x4150))?;
    let kind = OptimizerKind::Adamw { beta1: hyper.beta1, beta2: hyper.beta2, eps: 1e-8, weight_decay: hyper.weight_decay };
    let mut opt = Optimizer::new(kind);
    let mut losses = Vec::with_capacity(hyper.iters);
    for step in 0..hyper.iters {
        let (x, target) = data.batch(&sampler.next_batch(hyper.batch))?;
        let diverged = |e: Error| Error::Diverged { step, detail: e.to_string() };
        let mut tape = Tape::new();
        let fusion = PromptFusion::new(generators, encoder, heads)?;
        let vars = fusion.record(&mut tape, &x).map_err(diverged)?;
        let xv = tape.constant(x)?;
        let prompted = attach_prompt(&mut tape, xv, vars.fused).map_err(diverged)?;
        let (loss, grad) = oracle.input_grad(tape.value(prompted), &target).map_err(diverged)?;
        let grads = tape.backward_from(prompted, &grad)?;
        heads.zero_grad();
        grads.accumulate_into(heads.params_mut())?;
        opt.step(heads.params_mut(), schedule.lr_at(step))?;
        losses.push(loss);
    }
    Ok(losses)
}
