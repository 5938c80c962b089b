//! Pipeline configuration: a flat `key = value` text file.
//!
//! Grammar: one `key = value` pair per line; `#` starts a comment; blank
//! lines are ignored. Unknown keys are rejected. `dataset_root` and
//! `workdir` are required; everything else has a default.
//!
//! See the repository README for the key list.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::augment::AugmentPolicy;
use crate::bayes::{HyperParams, SearchSpace};
use crate::error::{Error, Result};
use crate::models::ArchId;
use crate::nn::OptimizerKind;
use crate::scalar::mix_seed;

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub dataset_root: PathBuf,
    pub class_dirs: [String; 2],
    pub workdir: PathBuf,
    pub image_size: usize,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub ensemble_m: usize,
    pub augment: AugmentPolicy,
    pub bo_k_init: usize,
    pub bo_n_max: usize,
    /// Epochs per objective evaluation during tuning.
    pub bo_epochs: usize,
    pub space: SearchSpace,
    pub synth_per_class: usize,
    arch_overrides: BTreeMap<String, String>,
    /// SHA-256 of the raw config file bytes (empty for in-memory configs).
    pub config_hash: String,
}

impl PipelineConfig {
    /// Programmatic config with defaults; used by tests and by `synth`.
    pub fn new(dataset_root: impl Into<PathBuf>, workdir: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            dataset_root: dataset_root.into(),
            class_dirs: ["notall".to_string(), "all".to_string()],
            workdir: workdir.into(),
            image_size: 64,
            seed: 42,
            epochs: 50,
            batch_size: 16,
            ensemble_m: 5,
            augment: AugmentPolicy::default(),
            bo_k_init: 5,
            bo_n_max: 25,
            bo_epochs: 3,
            space: SearchSpace::default(),
            synth_per_class: 500,
            arch_overrides: BTreeMap::new(),
            config_hash: String::new(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|_| Error::Config(format!("{}: not UTF-8", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.config_hash = hex(&Sha256::digest(&bytes));
        Ok(cfg)
    }

    fn parse(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if pairs.insert(key.clone(), value).is_some() {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {:?}",
                    lineno + 1,
                    key
                )));
            }
        }

        let take = |pairs: &mut BTreeMap<String, String>, key: &str| pairs.remove(key);
        let dataset_root = take(&mut pairs, "dataset_root")
            .ok_or_else(|| Error::Config("missing required key dataset_root".into()))?;
        let workdir = take(&mut pairs, "workdir")
            .ok_or_else(|| Error::Config("missing required key workdir".into()))?;
        let mut cfg = PipelineConfig::new(dataset_root, workdir);

        macro_rules! num {
            ($key:literal, $field:expr, $ty:ty) => {
                if let Some(v) = take(&mut pairs, $key) {
                    $field = v.parse::<$ty>().map_err(|_| {
                        Error::Config(format!("{}: invalid value {:?}", $key, v))
                    })?;
                }
            };
        }
        if let Some(v) = take(&mut pairs, "class0_dir") {
            cfg.class_dirs[0] = v;
        }
        if let Some(v) = take(&mut pairs, "class1_dir") {
            cfg.class_dirs[1] = v;
        }
        num!("image_size", cfg.image_size, usize);
        num!("seed", cfg.seed, u64);
        num!("epochs", cfg.epochs, usize);
        num!("batch_size", cfg.batch_size, usize);
        num!("ensemble_m", cfg.ensemble_m, usize);
        num!("bo_k_init", cfg.bo_k_init, usize);
        num!("bo_n_max", cfg.bo_n_max, usize);
        num!("bo_epochs", cfg.bo_epochs, usize);
        num!("synth_per_class", cfg.synth_per_class, usize);

        num!("augment_multiplier", cfg.augment.multiplier, u32);
        if let Some(v) = take(&mut pairs, "augment_multiplier_class0") {
            cfg.augment.class_multipliers[0] = Some(parse_num(&v, "augment_multiplier_class0")?);
        }
        if let Some(v) = take(&mut pairs, "augment_multiplier_class1") {
            cfg.augment.class_multipliers[1] = Some(parse_num(&v, "augment_multiplier_class1")?);
        }
        num!("rotation_deg", cfg.augment.rotation_deg, f64);
        num!("height_shift_frac", cfg.augment.height_shift_frac, f64);
        num!("width_shift_frac", cfg.augment.width_shift_frac, f64);
        num!("zoom_frac", cfg.augment.zoom_frac, f64);
        num!("shear_deg", cfg.augment.shear_deg, f64);
        if let Some(v) = take(&mut pairs, "horizontal_flip") {
            cfg.augment.horizontal_flip = parse_bool(&v, "horizontal_flip")?;
        }
        if let Some(v) = take(&mut pairs, "vertical_flip") {
            cfg.augment.vertical_flip = parse_bool(&v, "vertical_flip")?;
        }

        if let Some(v) = take(&mut pairs, "space_units") {
            let grid: Result<Vec<u32>> = v
                .split(',')
                .map(|t| parse_num::<u32>(t.trim(), "space_units"))
                .collect();
            let mut grid = grid?;
            grid.sort_unstable();
            grid.dedup();
            if grid.is_empty() || grid[0] == 0 {
                return Err(Error::Config("space_units must list positive widths".into()));
            }
            cfg.space.units_grid = grid;
        }
        num!("space_lr_min", cfg.space.lr_min, f64);
        num!("space_lr_max", cfg.space.lr_max, f64);
        num!("space_momentum_max", cfg.space.momentum_max, f64);
        num!("space_dropout_max", cfg.space.dropout_max, f64);

        for arch in ArchId::ALL {
            for field in ["units", "optimizer", "learning_rate", "momentum", "dropout"] {
                let key = format!("arch_{}_{}", arch.letter(), field);
                if let Some(v) = take(&mut pairs, &key) {
                    cfg.arch_overrides.insert(key, v);
                }
            }
        }

        if let Some(unknown) = pairs.keys().next() {
            return Err(Error::Config(format!("unknown key {:?}", unknown)));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.image_size < 24 {
            return Err(Error::Config(format!(
                "image_size {} too small for the backbones (minimum 24)",
                self.image_size
            )));
        }
        if self.batch_size == 0 || self.ensemble_m == 0 || self.synth_per_class == 0 {
            return Err(Error::Config(
                "batch_size, ensemble_m and synth_per_class must be positive".into(),
            ));
        }
        if self.augment.multiplier == 0 {
            return Err(Error::Config("augment_multiplier must be at least 1".into()));
        }
        if self.bo_n_max <= self.bo_k_init {
            return Err(Error::Config(format!(
                "bo_n_max {} must exceed bo_k_init {}",
                self.bo_n_max, self.bo_k_init
            )));
        }
        if self.space.lr_min <= 0.0 || self.space.lr_max <= self.space.lr_min {
            return Err(Error::Config("invalid learning-rate interval".into()));
        }
        for arch in ArchId::ALL {
            self.hyper_for(arch)?;
        }
        Ok(())
    }

    /// Hyperparameters for one architecture: tuned defaults overridden by
    /// `arch_<letter>_*` keys, validated against the search space.
    pub fn hyper_for(&self, arch: ArchId) -> Result<HyperParams> {
        let mut h = HyperParams::default_for(arch);
        // Defaults target the full-scale space; a narrowed custom space
        // snaps them to its nearest units level.
        if !self.space.units_grid.contains(&h.units) {
            h.units = *self
                .space
                .units_grid
                .iter()
                .min_by_key(|&&u| (u as i64 - h.units as i64).unsigned_abs())
                .unwrap();
        }
        h.learning_rate = h.learning_rate.clamp(self.space.lr_min, self.space.lr_max);
        h.momentum = h.momentum.min(self.space.momentum_max);
        h.dropout_rate = h.dropout_rate.min(self.space.dropout_max);
        let letter = arch.letter();
        if let Some(v) = self.arch_overrides.get(&format!("arch_{letter}_units")) {
            h.units = parse_num(v, "units")?;
        }
        if let Some(v) = self.arch_overrides.get(&format!("arch_{letter}_optimizer")) {
            h.optimizer = match v.to_ascii_lowercase().as_str() {
                "sgd" => OptimizerKind::Sgd,
                "rmsprop" => OptimizerKind::Rmsprop,
                other => {
                    return Err(Error::Config(format!(
                        "arch_{letter}_optimizer: unknown optimizer {:?}",
                        other
                    )))
                }
            };
        }
        if let Some(v) = self.arch_overrides.get(&format!("arch_{letter}_learning_rate")) {
            h.learning_rate = parse_num(v, "learning_rate")?;
        }
        if let Some(v) = self.arch_overrides.get(&format!("arch_{letter}_momentum")) {
            h.momentum = parse_num(v, "momentum")?;
        }
        if let Some(v) = self.arch_overrides.get(&format!("arch_{letter}_dropout")) {
            h.dropout_rate = parse_num(v, "dropout")?;
        }
        self.space
            .validate(&h)
            .map_err(|e| Error::Config(format!("arch {letter}: {e}")))?;
        Ok(h)
    }

    /// Augmentation policy with its stream seeded from the global seed.
    pub fn augment_policy(&self) -> AugmentPolicy {
        let mut policy = self.augment.clone();
        policy.seed = mix_seed(self.seed, &[0xa06]);
        policy
    }

    /// Override the global seed (CLI `--seed`).
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
}

fn parse_num<T: std::str::FromStr>(v: &str, key: &str) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| Error::Config(format!("{}: invalid value {:?}", key, v)))
}

fn parse_bool(v: &str, key: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{}: expected a boolean, got {:?}", key, v))),
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 hex digest of a file, for provenance records.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}
