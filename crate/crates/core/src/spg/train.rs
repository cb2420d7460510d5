use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::OracleHandle;
use crate::tensor::nn::{Mode, Module};
use crate::tensor::optim::{Optimizer, OptimizerKind};
use crate::tensor::schedule::LrSchedule;
use crate::tensor::Tape;
use crate::world::{derive_seed, BatchSampler, Dataset};

use super::generator::{attach_prompt, StylePromptGenerator};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpgHyper {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Milestones as fractions of `iters`.
    pub milestones: Vec<f64>,
    pub gamma: f64,
}

impl Default for SpgHyper {
    fn default() -> Self {
        SpgHyper {
            iters: 2000,
            batch: 8,
            lr: 0.2,
            momentum: 0.9,
            milestones: vec![150.0 / 240.0, 180.0 / 240.0, 210.0 / 240.0],
            gamma: 0.1,
        }
    }
}

impl SpgHyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.lr <= 0.0 || self.gamma <= 0.0 || self.milestones.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config(format!("invalid prompt-generation hyperparameters {self:?}")));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::multistep_fractions(self.lr, self.iters, &self.milestones, self.gamma)
    }
}

/// One SGD pass of a generator against the frozen oracle. The oracle's
/// input gradient at `x + P` is chained back into the generator's
/// parameters; the oracle itself only answers queries.
pub fn train_spg(
    g: &mut StylePromptGenerator,
    data: &Dataset,
    oracle: &OracleHandle,
    hyper: &SpgHyper,
    seed: u64,
) -> Result<Vec<f32>> {
    hyper.validate()?;
    let mut sampler = BatchSampler::new(data.len(), derive_seed(seed, 0x5347))?;
    let mut opt = Optimizer::new(OptimizerKind::sgd(hyper.momentum));
    let schedule = hyper.schedule();
    let mut losses = Vec::with_capacity(hyper.iters);
    for step in 0..hyper.iters {
        let (x, target) = data.batch(&sampler.next_batch(hyper.batch))?;
        let mut tape = Tape::new();
        let xv = tape.constant(x)?;
        let diverged = |e: Error| Error::Diverged { step, detail: e.to_string() };
        let prompt = g.generate(&mut tape, xv, Mode::Train).map_err(diverged)?;
        let prompted = attach_prompt(&mut tape, xv, prompt)?;
        let (loss, grad) = oracle.input_grad(tape.value(prompted), &target).map_err(diverged)?;
        let grads = tape.backward_from(prompted, &grad)?;
        g.zero_grad();
        grads.accumulate_into(g.params_mut())?;
        opt.step(g.params_mut(), schedule.lr_at(step))?;
        losses.push(loss);
    }
    Ok(losses)
}

/// Short per-style pretraining of every generator on its own style subset,
/// run before the main pass.
pub fn meta_pretrain(
    generators: &mut [StylePromptGenerator],
    subsets: &[Dataset],
    oracle: &OracleHandle,
    hyper: &SpgHyper,
    iters: usize,
    seed: u64,
) -> Result<Vec<Vec<f32>>> {
    if generators.len() != subsets.len() {
        return Err(Error::Config(format!("{} generators for {} style subsets", generators.len(), subsets.len())));
    }
    let meta = SpgHyper { iters, ..hyper.clone() };
    generators
        .iter_mut()
        .zip(subsets)
        .map(|(g, data)| {
            let style_seed = derive_seed(seed, 0x4d45_5441 + g.style as u64);
            train_spg(g, data, oracle, &meta, style_seed)
        })
        .collect()
}
