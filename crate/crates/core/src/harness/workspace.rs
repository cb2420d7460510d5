use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::apf::FusionFlags;
use crate::error::Result;
use crate::spg::{InitStrategy, Variant};
use crate::world::{derive_seed, Dataset, DomainSpec, Split, StyleParams};

use super::config::{hex, ExperimentConfig};

/// Environment variable that overrides the configured output root.
pub const OUTPUT_ROOT_ENV: &str = "SAGE_OUTPUT_ROOT";

/// Paths of every artifact under one output root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    /// `$SAGE_OUTPUT_ROOT` if set, else the configured directory.
    pub fn resolve(cfg: &ExperimentConfig) -> Self {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if !root.is_empty() => Workspace::new(root),
            _ => Workspace::new(&cfg.output_dir),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn dataset_path(&self, name: &str) -> PathBuf {
        self.data_dir().join(format!("{name}.sgwd"))
    }

    pub fn oracle_path(&self) -> PathBuf {
        self.root.join("oracle").join("oracle.ckpt")
    }

    pub fn encoder_path(&self) -> PathBuf {
        self.root.join("oracle").join("encoder.ckpt")
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed-{seed}"))
    }

    pub fn generator_path(&self, seed: u64, variant: Variant, init: InitStrategy, style: &str) -> PathBuf {
        self.seed_dir(seed).join("spg").join(format!("{variant}-{init}")).join(format!("{style}.ckpt"))
    }

    pub fn heads_path(&self, seed: u64, variant: Variant, init: InitStrategy, flags: &FusionFlags) -> PathBuf {
        self.seed_dir(seed).join("apf").join(format!("{variant}-{init}-{}.ckpt", flags_slug(flags)))
    }

    pub fn report_path(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("report.json")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn timing_path(&self) -> PathBuf {
        self.root.join("timing.json")
    }
}

pub(crate) fn flags_slug(flags: &FusionFlags) -> String {
    let bit = |b: bool| if b { 1 } else { 0 };
    format!(
        "pn-{}-softmax{}-tanh{}",
        flags.normalization,
        bit(flags.softmax),
        bit(flags.tanh)
    )
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Every dataset of one experiment.
///
/// Source, stylized-source and their validation counterparts share scene
/// seeds, so their masks coincide; the base domain used to pretrain the
/// oracle draws its own scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub base_train: Dataset,
    pub base_val: Dataset,
    pub source_train: Dataset,
    pub source_val: Dataset,
    pub styled_train: Vec<Dataset>,
    pub styled_val: Vec<Dataset>,
    pub targets: Vec<Dataset>,
}

impl World {
    fn specs(cfg: &ExperimentConfig) -> Vec<(DomainSpec, Role)> {
        let w = &cfg.world;
        let base_seed = derive_seed(w.seed, 0x6261_7365);
        let spec = |name: String, style: &StyleParams, count: usize, split_seed: u64| DomainSpec {
            name,
            scene: w.scene.clone(),
            style: style.clone(),
            jitter: w.jitter.clone(),
            count,
            split_seed,
        };
        let (train, val) = (Split::Train.scene_seed(w.seed), Split::Val.scene_seed(w.seed));
        let mut out = vec![
            (spec("base-train".into(), &StyleParams::default(), w.base_train, Split::Train.scene_seed(base_seed)), Role::BaseTrain),
            (spec("base-val".into(), &StyleParams::default(), w.base_val, Split::Val.scene_seed(base_seed)), Role::BaseVal),
            (spec("source-train".into(), &w.source_style, w.source_train, train), Role::SourceTrain),
            (spec("source-val".into(), &w.source_style, w.val, val), Role::SourceVal),
        ];
        for s in &w.styles {
            out.push((spec(format!("{}-train", s.name), &s.params, w.source_train, train), Role::StyledTrain));
            out.push((spec(format!("{}-val", s.name), &s.params, w.val, val), Role::StyledVal));
        }
        for t in &w.targets {
            out.push((spec(t.name.clone(), &t.params, w.val, val), Role::Target));
        }
        out
    }

    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        Self::assemble(cfg, |spec| spec.make())
    }

    /// Reads every dataset written by [`World::save`].
    pub fn load(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Self> {
        Self::assemble(cfg, |spec| Dataset::load(&ws.dataset_path(&spec.name)))
    }

    fn assemble(cfg: &ExperimentConfig, mut build: impl FnMut(&DomainSpec) -> Result<Dataset>) -> Result<Self> {
        let mut world = World {
            base_train: empty(),
            base_val: empty(),
            source_train: empty(),
            source_val: empty(),
            styled_train: Vec::new(),
            styled_val: Vec::new(),
            targets: Vec::new(),
        };
        for (spec, role) in Self::specs(cfg) {
            let data = build(&spec)?;
            match role {
                Role::BaseTrain => world.base_train = data,
                Role::BaseVal => world.base_val = data,
                Role::SourceTrain => world.source_train = data,
                Role::SourceVal => world.source_val = data,
                Role::StyledTrain => world.styled_train.push(data),
                Role::StyledVal => world.styled_val.push(data),
                Role::Target => world.targets.push(data),
            }
        }
        Ok(world)
    }

    pub fn all(&self) -> Vec<&Dataset> {
        let mut v = vec![&self.base_train, &self.base_val, &self.source_train, &self.source_val];
        v.extend(&self.styled_train);
        v.extend(&self.styled_val);
        v.extend(&self.targets);
        v
    }

    pub fn save(&self, ws: &Workspace) -> Result<()> {
        fs::create_dir_all(ws.data_dir())?;
        for d in self.all() {
            d.save(&ws.dataset_path(&d.name))?;
        }
        Ok(())
    }

    /// Hex SHA-256 of every dataset, by name.
    pub fn digests(&self) -> Result<BTreeMap<String, String>> {
        self.all().into_iter().map(|d| Ok((d.name.clone(), hex(&d.digest()?)))).collect()
    }

    /// Source validation split followed by the target domains.
    pub fn eval_domains(&self) -> Vec<&Dataset> {
        let mut v = vec![&self.source_val];
        v.extend(&self.targets);
        v
    }
}

#[derive(Clone, Copy)]
enum Role {
    BaseTrain,
    BaseVal,
    SourceTrain,
    SourceVal,
    StyledTrain,
    StyledVal,
    Target,
}

fn empty() -> Dataset {
    Dataset { name: String::new(), samples: Vec::new() }
}
