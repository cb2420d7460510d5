use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::apf::{ApfHyper, FusionFlags};
use crate::error::{Error, Result};
use crate::oracle::{OracleArch, PretrainHyper};
use crate::spg::{GeneratorSpec, InitStrategy, SpgHyper, Variant};
use crate::world::{style_presets, target_styles, SceneSpec, StyleParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedStyle {
    pub name: String,
    pub params: StyleParams,
}

impl NamedStyle {
    fn from_pairs(pairs: Vec<(&str, StyleParams)>) -> Vec<NamedStyle> {
        pairs.into_iter().map(|(name, params)| NamedStyle { name: name.into(), params }).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    /// Seed of every scene stream; shared by all run seeds.
    pub seed: u64,
    pub scene: SceneSpec,
    /// Per-sample spread around each domain's style.
    pub jitter: StyleParams,
    /// Style of the labeled source domain.
    pub source_style: StyleParams,
    /// Training styles, one generator each.
    pub styles: Vec<NamedStyle>,
    /// Held-out target domains, only ever evaluated.
    pub targets: Vec<NamedStyle>,
    pub base_train: usize,
    pub base_val: usize,
    pub source_train: usize,
    /// Size of every validation split.
    pub val: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 0,
            scene: SceneSpec::default(),
            jitter: StyleParams { hue_shift: 8.0, brightness: 0.04, contrast: 0.08, gamma: 0.1, noise_sigma: 0.005, haze: 0.04 },
            source_style: StyleParams { hue_shift: 10.0, brightness: -0.06, contrast: 0.9, gamma: 1.15, noise_sigma: 0.02, haze: 0.1 },
            styles: NamedStyle::from_pairs(style_presets()),
            targets: NamedStyle::from_pairs(target_styles()),
            base_train: 1000,
            base_val: 200,
            source_train: 400,
            val: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub seed: u64,
    pub arch: OracleArch,
    pub pretrain: PretrainHyper,
    /// Fusion encoder with random frozen weights instead of the oracle's
    /// pretrained stages.
    #[serde(default)]
    pub random_encoder: bool,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            seed: 0,
            arch: OracleArch::default(),
            pretrain: PretrainHyper { iters: 2000, ..PretrainHyper::default() },
            random_encoder: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpgConfig {
    pub hyper: SpgHyper,
    pub variant: Variant,
    pub init: InitStrategy,
    pub pad: usize,
    pub modulator_width: usize,
    #[serde(default)]
    pub sigmoid_alpha: bool,
    /// Per-style warm-up iterations of the meta initialization.
    pub meta_iters: usize,
}

impl Default for SpgConfig {
    fn default() -> Self {
        SpgConfig {
            hyper: SpgHyper::default(),
            variant: Variant::ABorder,
            init: InitStrategy::Normal,
            pad: 6,
            modulator_width: 8,
            sigmoid_alpha: false,
            meta_iters: 200,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApfConfig {
    pub hyper: ApfHyper,
    pub flags: FusionFlags,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub oracle: OracleConfig,
    pub spg: SpgConfig,
    pub apf: ApfConfig,
    /// Evaluation batch size.
    pub eval_batch: usize,
    pub seeds: Vec<u64>,
    /// Output root, unless overridden by the environment.
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            world: WorldConfig::default(),
            oracle: OracleConfig::default(),
            spg: SpgConfig::default(),
            apf: ApfConfig::default(),
            eval_batch: 16,
            seeds: vec![0, 1, 2],
            output_dir: "runs/desk".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_pretty()?)?;
        Ok(())
    }

    pub fn to_pretty(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Compact JSON with object keys sorted.
    pub fn canonical_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(&serde_json::to_value(self)?)?)
    }

    /// SHA-256 of the canonical form, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(self.canonical_bytes()?)))
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.world;
        if w.styles.is_empty() || w.targets.is_empty() {
            return Err(Error::Config("need at least one training style and one target domain".into()));
        }
        if [w.base_train, w.base_val, w.source_train, w.val, self.eval_batch].contains(&0) {
            return Err(Error::Config("dataset sizes and evaluation batch must be positive".into()));
        }
        let mut names: Vec<&str> = w.styles.iter().chain(&w.targets).map(|s| s.name.as_str()).collect();
        names.extend(["base", "source"]);
        names.sort_unstable();
        if names.windows(2).any(|p| p[0] == p[1]) {
            return Err(Error::Config("domain names must be unique".into()));
        }
        if names.iter().any(|n| n.is_empty() || !n.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')) {
            return Err(Error::Config("domain names may only use ASCII letters, digits, `-` and `_`".into()));
        }
        for s in w.styles.iter().chain(&w.targets) {
            s.params.validate()?;
        }
        w.source_style.validate()?;
        w.scene.validate()?;
        self.oracle.arch.validate()?;
        self.spg.hyper.validate()?;
        self.apf.hyper.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.generator_spec(self.spg.variant, self.spg.init).validate()
    }

    pub fn generator_spec(&self, variant: Variant, init: InitStrategy) -> GeneratorSpec {
        GeneratorSpec {
            variant,
            init,
            channels: 3,
            height: self.world.scene.height,
            width: self.world.scene.width,
            pad: self.spg.pad,
            modulator_width: self.spg.modulator_width,
            sigmoid_alpha: self.spg.sigmoid_alpha,
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
