use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::apf::{train_apf, FusionFlags, FusionHeads, PromptFusion, SharedEncoder};
use crate::checkpoint::{Checkpoint, Kind};
use crate::error::{Error, Result};
use crate::oracle::{pretrain_oracle, OracleHandle};
use crate::spg::{meta_pretrain, train_spg, InitStrategy, StylePromptGenerator, Variant};
use crate::world::{derive_seed, Class, Dataset};

use super::config::{hex, ExperimentConfig};
use super::metrics::{IouCounter, IouReport};
use super::report::{smoothed_tail, AttentionRow, DomainScore, MetricsReport};
use super::workspace::{write_file, Workspace, World};

pub const BASELINE: &str = "baseline";
pub const SAGE: &str = "sage";

/// The sealed oracle and the frozen fusion encoder.
#[derive(Clone, Debug)]
pub struct Frozen {
    pub oracle: OracleHandle,
    pub encoder: SharedEncoder,
}

impl Frozen {
    /// Pretrains the oracle on the base domain, derives the encoder from
    /// its stages (or draws a random one), writes both checkpoints when a
    /// workspace is given, then seals the oracle.
    pub fn pretrain(cfg: &ExperimentConfig, world: &World, ws: Option<&Workspace>) -> Result<(Self, Vec<f32>)> {
        let o = &cfg.oracle;
        let trained = pretrain_oracle(&o.arch, &world.base_train, &o.pretrain, o.seed)?;
        let encoder = if o.random_encoder {
            SharedEncoder::random(&o.arch, &mut ChaCha8Rng::seed_from_u64(derive_seed(o.seed, 0x454e_43)))?
        } else {
            SharedEncoder::from_model(&trained.model)
        };
        if let Some(ws) = ws {
            write_file(&ws.oracle_path(), &trained.model.to_checkpoint()?.to_bytes()?)?;
            write_file(&ws.encoder_path(), &encoder.to_checkpoint()?.to_bytes()?)?;
        }
        Ok((Frozen { oracle: OracleHandle::seal(trained.model), encoder }, trained.losses))
    }

    pub fn load(ws: &Workspace) -> Result<Self> {
        let oracle = OracleHandle::open(&ws.oracle_path())?;
        let encoder = SharedEncoder::from_checkpoint(&Checkpoint::load(&ws.encoder_path(), Kind::Encoder)?)?;
        Ok(Frozen { oracle, encoder })
    }
}

/// mIoU of a domain and, with fusion, the mean weight per style.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainEval {
    pub iou: IouReport,
    pub mean_weights: Option<Vec<f64>>,
}

/// Scores the oracle on `data`, optionally through the fused prompt.
pub fn evaluate_domain(oracle: &OracleHandle, data: &Dataset, fusion: Option<&PromptFusion>, batch: usize) -> Result<DomainEval> {
    let mut counter = IouCounter::new(oracle.classes());
    let mut weight_sum = fusion.map(|f| vec![0.0f64; f.len()]);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch.max(1)) {
        let (x, _) = data.batch(chunk)?;
        let pred = match fusion {
            Some(f) => {
                let fused = f.fuse(&x)?;
                if let Some(acc) = weight_sum.as_mut() {
                    for (i, w) in fused.weights.data().iter().enumerate() {
                        acc[i % f.len()] += *w as f64;
                    }
                }
                let prompted: Vec<f32> = x.data().iter().zip(fused.fused.data()).map(|(a, b)| a + b).collect();
                oracle.predict_mask(&crate::tensor::Tensor::new(x.shape().to_vec(), prompted)?)?
            }
            None => oracle.predict_mask(&x)?,
        };
        let gt: Vec<u8> = chunk.iter().flat_map(|&i| data.samples[i].mask.iter().copied()).collect();
        counter.add(&pred, &gt)?;
    }
    let n = data.len().max(1) as f64;
    Ok(DomainEval { iou: counter.report(), mean_weights: weight_sum.map(|v| v.into_iter().map(|s| s / n).collect()) })
}

/// Trained generators for one (seed, variant, init) with their curves.
#[derive(Clone, Debug)]
pub struct GeneratorSet {
    pub generators: Vec<StylePromptGenerator>,
    pub meta_losses: Vec<Vec<f32>>,
    pub losses: Vec<Vec<f32>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CellKey {
    pub seed: u64,
    pub variant: Variant,
    pub init: InitStrategy,
    pub flags: FusionFlags,
}

/// Trained heads and their evaluation on the source validation split and
/// every target domain.
#[derive(Clone, Debug)]
pub struct Cell {
    pub heads: FusionHeads,
    pub losses: Vec<f32>,
    pub scores: Vec<DomainScore>,
    pub attention: Vec<AttentionRow>,
}

impl Cell {
    /// Mean mIoU over the target domains.
    pub fn target_mean(&self, targets: &[String]) -> f64 {
        let picked: Vec<f64> = self.scores.iter().filter(|s| targets.contains(&s.domain)).map(|s| s.miou).collect();
        picked.iter().sum::<f64>() / picked.len().max(1) as f64
    }
}

/// Shared data and frozen models plus memoized training results, so that
/// ablation cells reuse every identical piece of work.
pub struct Lab {
    pub cfg: ExperimentConfig,
    pub world: World,
    pub frozen: Frozen,
    workspace: Option<Workspace>,
    generator_sets: HashMap<(u64, Variant, InitStrategy), GeneratorSet>,
    cells: HashMap<CellKey, Cell>,
    baseline: Option<Vec<DomainScore>>,
    timings: BTreeMap<String, f64>,
    reuse: bool,
}

impl Lab {
    /// With a workspace, every trained generator and head set is written
    /// as a checkpoint.
    pub fn new(cfg: ExperimentConfig, world: World, frozen: Frozen, workspace: Option<Workspace>) -> Self {
        Lab {
            cfg,
            world,
            frozen,
            workspace,
            generator_sets: HashMap::new(),
            cells: HashMap::new(),
            baseline: None,
            timings: BTreeMap::new(),
            reuse: false,
        }
    }

    /// Prefer generator and head checkpoints already in the workspace over
    /// retraining them.
    pub fn reuse_checkpoints(&mut self, reuse: bool) {
        self.reuse = reuse;
    }

    fn stored_generators(&self, seed: u64, variant: Variant, init: InitStrategy) -> Option<Vec<StylePromptGenerator>> {
        let ws = self.workspace.as_ref().filter(|_| self.reuse)?;
        let all_present =
            self.cfg.world.styles.iter().all(|s| ws.generator_path(seed, variant, init, &s.name).exists());
        all_present.then(|| self.load_generators(seed, variant, init).ok()).flatten()
    }

    fn stored_heads(&self, key: &CellKey) -> Option<FusionHeads> {
        let ws = self.workspace.as_ref().filter(|_| self.reuse)?;
        let path = ws.heads_path(key.seed, key.variant, key.init, &key.flags);
        let heads = FusionHeads::from_checkpoint(&Checkpoint::load(&path, Kind::Heads).ok()?).ok()?;
        heads.check_encoder(&self.frozen.encoder).ok()?;
        Some(heads)
    }

    pub fn workspace(&self) -> Option<&Workspace> {
        self.workspace.as_ref()
    }

    /// Accumulated seconds per stage.
    pub fn timings(&self) -> &BTreeMap<String, f64> {
        &self.timings
    }

    pub fn style_names(&self) -> Vec<String> {
        self.cfg.world.styles.iter().map(|s| s.name.clone()).collect()
    }

    pub fn target_names(&self) -> Vec<String> {
        self.world.targets.iter().map(|d| d.name.clone()).collect()
    }

    pub fn record_time(&mut self, stage: &str, secs: f64) {
        *self.timings.entry(stage.to_string()).or_default() += secs;
    }

    fn timed<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self);
        *self.timings.entry(stage.to_string()).or_default() += start.elapsed().as_secs_f64();
        out
    }

    /// Installs an externally trained generator set (e.g. loaded from disk).
    pub fn insert_generators(&mut self, seed: u64, variant: Variant, init: InitStrategy, set: GeneratorSet) {
        self.generator_sets.insert((seed, variant, init), set);
    }

    /// Trains (once) one generator per style for this seed.
    pub fn generators(&mut self, seed: u64, variant: Variant, init: InitStrategy) -> Result<&GeneratorSet> {
        let key = (seed, variant, init);
        if !self.generator_sets.contains_key(&key) {
            let set = match self.stored_generators(seed, variant, init) {
                Some(generators) => GeneratorSet { generators, meta_losses: Vec::new(), losses: Vec::new() },
                None => self.timed("train-spg", |lab| lab.train_generators(seed, variant, init, None))?,
            };
            self.generator_sets.insert(key, set);
        }
        Ok(&self.generator_sets[&key])
    }

    /// Trains the generators of `styles` (all when `None`) without caching.
    pub fn train_generators(
        &self,
        seed: u64,
        variant: Variant,
        init: InitStrategy,
        styles: Option<&[usize]>,
    ) -> Result<GeneratorSet> {
        let spec = self.cfg.generator_spec(variant, init);
        let all: Vec<usize> = (0..self.cfg.world.styles.len()).collect();
        let styles = styles.unwrap_or(&all);
        let mut generators = styles
            .iter()
            .map(|&i| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x4745_4e00 + i as u64));
                StylePromptGenerator::new(&spec, i, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let subsets: Vec<Dataset> = styles.iter().map(|&i| self.world.styled_train[i].clone()).collect();
        let hyper = &self.cfg.spg.hyper;
        let meta_losses = if init == InitStrategy::Meta {
            meta_pretrain(&mut generators, &subsets, &self.frozen.oracle, hyper, self.cfg.spg.meta_iters, seed)?
        } else {
            Vec::new()
        };
        let mut losses = Vec::with_capacity(styles.len());
        for (g, data) in generators.iter_mut().zip(&subsets) {
            losses.push(train_spg(g, data, &self.frozen.oracle, hyper, derive_seed(seed, 0x5350_4700 + g.style as u64))?);
        }
        if let Some(ws) = &self.workspace {
            for g in &generators {
                let path = ws.generator_path(seed, variant, init, &self.cfg.world.styles[g.style].name);
                write_file(&path, &g.to_checkpoint()?.to_bytes()?)?;
            }
        }
        Ok(GeneratorSet { generators, meta_losses, losses })
    }

    /// Fresh heads for this seed and flag set.
    pub fn initial_heads(&self, seed: u64, flags: FusionFlags) -> Result<FusionHeads> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x4845_4144));
        FusionHeads::new(&self.frozen.encoder, self.cfg.apf.hyper.embed_dim, flags, &mut rng)
    }

    /// Source images, plus the stylized copies when configured.
    pub fn fusion_training_set(&self) -> Dataset {
        let mut data = self.world.source_train.clone();
        if self.cfg.apf.hyper.mix_stylized {
            for d in &self.world.styled_train {
                data.samples.extend(d.samples.iter().cloned());
            }
            data.name = "source-mixed".into();
        }
        data
    }

    /// Trains fusion heads over the given generators.
    pub fn train_heads(&self, seed: u64, generators: &[StylePromptGenerator], flags: FusionFlags) -> Result<(FusionHeads, Vec<f32>)> {
        let mut heads = self.initial_heads(seed, flags)?;
        let data = self.fusion_training_set();
        let losses = train_apf(
            &mut heads,
            &data,
            generators,
            &self.frozen.encoder,
            &self.frozen.oracle,
            &self.cfg.apf.hyper,
            derive_seed(seed, 0x4150_4600),
        )?;
        Ok((heads, losses))
    }

    /// Scores and attention rows of a trained fusion on `domains`.
    pub fn evaluate_fusion(
        &self,
        generators: &[StylePromptGenerator],
        heads: &FusionHeads,
        domains: &[&Dataset],
    ) -> Result<(Vec<DomainScore>, Vec<AttentionRow>)> {
        let fusion = PromptFusion::new(generators, &self.frozen.encoder, heads)?;
        let mut scores = Vec::new();
        let mut attention = Vec::new();
        for d in domains {
            let e = evaluate_domain(&self.frozen.oracle, d, Some(&fusion), self.cfg.eval_batch)?;
            scores.push(DomainScore { domain: d.name.clone(), method: SAGE.into(), miou: e.iou.mean, per_class: e.iou.per_class });
            attention.push(AttentionRow { domain: d.name.clone(), weights: e.mean_weights.unwrap_or_default() });
        }
        Ok((scores, attention))
    }

    /// Trains (once) heads for this cell and evaluates them.
    pub fn cell(&mut self, key: CellKey) -> Result<&Cell> {
        if !self.cells.contains_key(&key) {
            let generators = self.generators(key.seed, key.variant, key.init)?.generators.clone();
            let (heads, losses) = match self.stored_heads(&key) {
                Some(heads) => (heads, Vec::new()),
                None => {
                    let (heads, losses) =
                        self.timed("train-apf", |lab| lab.train_heads(key.seed, &generators, key.flags))?;
                    if let Some(ws) = &self.workspace {
                        let path = ws.heads_path(key.seed, key.variant, key.init, &key.flags);
                        write_file(&path, &heads.to_checkpoint()?.to_bytes()?)?;
                    }
                    (heads, losses)
                }
            };
            let (scores, attention) = self.timed("eval", |lab| {
                let domains = lab.world.eval_domains();
                lab.evaluate_fusion(&generators, &heads, &domains)
            })?;
            self.cells.insert(key, Cell { heads, losses, scores, attention });
        }
        Ok(&self.cells[&key])
    }

    /// The configured cell for `seed`.
    pub fn default_key(&self, seed: u64) -> CellKey {
        CellKey { seed, variant: self.cfg.spg.variant, init: self.cfg.spg.init, flags: self.cfg.apf.flags }
    }

    /// The frozen oracle alone on the source validation split and targets.
    pub fn baseline(&mut self) -> Result<Vec<DomainScore>> {
        if self.baseline.is_none() {
            let scores = self.timed("eval", |lab| {
                lab.world
                    .eval_domains()
                    .into_iter()
                    .map(|d| {
                        let e = evaluate_domain(&lab.frozen.oracle, d, None, lab.cfg.eval_batch)?;
                        Ok(DomainScore { domain: d.name.clone(), method: BASELINE.into(), miou: e.iou.mean, per_class: e.iou.per_class })
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            self.baseline = Some(scores);
        }
        Ok(self.baseline.clone().expect("just computed"))
    }

    /// Mean baseline mIoU over the target domains.
    pub fn baseline_target_mean(&mut self) -> Result<f64> {
        let targets = self.target_names();
        let b = self.baseline()?;
        let picked: Vec<f64> = b.iter().filter(|s| targets.contains(&s.domain)).map(|s| s.miou).collect();
        Ok(picked.iter().sum::<f64>() / picked.len().max(1) as f64)
    }

    /// Combined SHA-256 over every dataset digest.
    pub fn data_digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, d) in self.world.digests()? {
            h.update(name.as_bytes());
            h.update(d.as_bytes());
        }
        Ok(hex(&h.finalize()))
    }

    /// Full report of the configured cell for one seed.
    pub fn report(&mut self, seed: u64) -> Result<MetricsReport> {
        let base_val = self.timed("eval", |lab| evaluate_domain(&lab.frozen.oracle, &lab.world.base_val, None, lab.cfg.eval_batch))?;
        let mut rows = self.baseline()?;
        let key = self.default_key(seed);
        let spg_final_loss = self.generators(seed, key.variant, key.init)?.losses.iter().map(|l| smoothed_tail(l)).collect();
        let cell = self.cell(key)?.clone();
        rows.extend(cell.scores.iter().cloned());
        Ok(MetricsReport {
            config_hash: self.cfg.hash()?,
            seed,
            oracle_fingerprint: format!("{:016x}", self.frozen.oracle.fingerprint()),
            encoder_fingerprint: format!("{:016x}", self.frozen.encoder.fingerprint()),
            dataset_digests: self.world.digests()?,
            base_val_miou: base_val.iou.mean,
            styles: self.style_names(),
            classes: Class::ALL.iter().take(self.frozen.oracle.classes()).map(|c| c.name().to_string()).collect(),
            rows,
            attention: cell.attention.clone(),
            spg_final_loss,
            apf_final_loss: smoothed_tail(&cell.losses),
        })
    }

    /// Loads every generator of the configured variant and init for a seed
    /// from the workspace.
    pub fn load_generators(&self, seed: u64, variant: Variant, init: InitStrategy) -> Result<Vec<StylePromptGenerator>> {
        let ws = self.workspace.as_ref().ok_or_else(|| Error::Config("no workspace to load generators from".into()))?;
        self.cfg
            .world
            .styles
            .iter()
            .map(|s| {
                let path = ws.generator_path(seed, variant, init, &s.name);
                StylePromptGenerator::from_checkpoint(&Checkpoint::load(&path, Kind::Generator)?)
            })
            .collect()
    }
}
