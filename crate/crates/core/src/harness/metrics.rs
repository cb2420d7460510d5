use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-class intersection and union pixel counts, accumulated over any
/// number of masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IouCounter {
    intersection: Vec<u64>,
    union: Vec<u64>,
}

impl IouCounter {
    pub fn new(classes: usize) -> Self {
        IouCounter { intersection: vec![0; classes], union: vec![0; classes] }
    }

    pub fn classes(&self) -> usize {
        self.intersection.len()
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
        }
        let k = self.classes();
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (p as usize, g as usize);
            if p >= k || g >= k {
                return Err(Error::Target(format!("class {} outside 0..{k}", p.max(g))));
            }
            if p == g {
                self.intersection[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[g] += 1;
            }
        }
        Ok(())
    }

    pub fn report(&self) -> IouReport {
        let per_class: Vec<Option<f64>> = self
            .intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = if present.is_empty() { 1.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        IouReport { per_class, mean }
    }
}

/// IoU per class (`None` when the class is absent from both masks) and
/// their mean over present classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn miou(pred: &[u8], gt: &[u8], classes: usize) -> Result<IouReport> {
    let mut c = IouCounter::new(classes);
    c.add(pred, gt)?;
    Ok(c.report())
}
