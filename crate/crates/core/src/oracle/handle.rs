use std::path::Path;

use crate::checkpoint::{fingerprint_of, state_digest, Checkpoint, Kind};
use crate::error::Result;
use crate::tensor::nn::{Mode, Module};
use crate::tensor::{Real, Tape, Tensor};

use super::model::{check_image_batch, OracleArch, SegModel};

/// A sealed, frozen segmentation model.
///
/// Only predictions, input gradients and a content fingerprint are
/// reachable; every query runs the network in eval mode on a private tape
/// with the weights recorded as constants.
#[derive(Clone, Debug)]
pub struct OracleHandle<R: Real = f32> {
    model: SegModel<R>,
    digest: [u8; 32],
}

impl<R: Real> OracleHandle<R> {
    pub fn seal(mut model: SegModel<R>) -> Self {
        model.freeze();
        let digest = state_digest(&model.state_dict());
        OracleHandle { model, digest }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Self::seal(SegModel::from_checkpoint(ckpt)?))
    }

    /// Loads an `ORCL` checkpoint straight into a sealed handle.
    pub fn open(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path, Kind::Oracle)?)
    }

    /// 64-bit content hash fixed at sealing time.
    pub fn fingerprint(&self) -> u64 {
        fingerprint_of(&self.digest)
    }

    pub fn digest(&self) -> [u8; 32] {
        self.digest
    }

    /// Digest recomputed from the weights as they are now.
    pub fn current_digest(&self) -> [u8; 32] {
        state_digest(&self.model.state_dict())
    }

    pub fn arch(&self) -> &OracleArch {
        &self.model.arch
    }

    pub fn classes(&self) -> usize {
        self.model.arch.classes
    }

    pub fn num_params(&self) -> usize {
        self.model.num_params()
    }

    /// Class logits B×K×H×W.
    pub fn predict(&self, x: &Tensor<R>) -> Result<Tensor<R>> {
        check_image_batch(x.shape())?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let y = self.model.forward(&mut tape, xv, Mode::Eval)?;
        Ok(tape.value(y).clone())
    }

    /// Per-pixel argmax of the logits, B×H×W.
    pub fn predict_mask(&self, x: &Tensor<R>) -> Result<Vec<u8>> {
        Ok(argmax_classes(&self.predict(x)?))
    }

    /// Mean cross-entropy against `target` (B·H·W class indices) and its
    /// gradient with respect to `x` only.
    pub fn input_grad(&self, x: &Tensor<R>, target: &[usize]) -> Result<(R, Tensor<R>)> {
        check_image_batch(x.shape())?;
        let mut tape = Tape::new();
        let xv = tape.input(x.clone())?;
        let logits = self.model.forward(&mut tape, xv, Mode::Eval)?;
        let loss = tape.cross_entropy(logits, target, None)?;
        let grad = tape.backward(loss)?.wrt(xv).expect("input is tracked");
        Ok((tape.value(loss).data()[0], grad))
    }

    /// The same sealed model evaluated at another precision.
    pub fn shadow<S: Real>(&self) -> OracleHandle<S> {
        OracleHandle::seal(self.model.cast())
    }
}

/// Argmax over the class axis of B×K×H×W logits, ties to the lower class.
pub fn argmax_classes<R: Real>(logits: &Tensor<R>) -> Vec<u8> {
    let s = logits.shape();
    let (b, k, plane) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    let mut out = Vec::with_capacity(b * plane);
    for n in 0..b {
        for i in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if d[(n * k + c) * plane + i] > d[(n * k + best) * plane + i] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}
