//! Experiment configuration: presets, file loading and `key=value` overrides.
//!
//! Resolution order is defaults < preset < file < overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stillfast_core::dataset::PreprocessConfig;
use stillfast_core::head::{HeadConfig, HeadVariant};
use stillfast_core::metrics::EvalSettings;
use stillfast_core::pyramid::{BackboneConfig, FusionMode};
use stillfast_core::trainer::{sha256_hex, TrainConfig};
use stillfast_core::{Error, Result};
use toml::{Table, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_dir: PathBuf,
    pub val_dir: PathBuf,
    pub frame_rate: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_dir: PathBuf::from("data/train"),
            val_dir: PathBuf::from("data/val"),
            frame_rate: 30.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub preprocess: PreprocessConfig,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

pub const PRESETS: [&str; 2] = ["paper_v1_defaults", "desk_toy"];

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.data.frame_rate > 0.0) {
            return Err(Error::Config("data.frame_rate must be positive".into()));
        }
        self.preprocess.validate()?;
        self.backbone.validate()?;
        self.head.validate()?;
        self.train.validate()?;
        for c in self.eval.criteria() {
            c.validate().map_err(|e| Error::Config(format!("eval: {e}")))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Digest of the resolved configuration.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    /// Resolves a preset, an optional file and overrides.
    pub fn resolve(preset: Option<&str>, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut file_table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        let file_preset = match file_table.remove("preset") {
            Some(Value::String(s)) => Some(s),
            Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
            None => None,
        };
        let name = preset.map(str::to_string).or(file_preset).unwrap_or_else(|| PRESETS[0].to_string());
        let mut table = to_table(&preset_config(&name)?);
        merge(&mut table, file_table);
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn to_table(cfg: &ExperimentConfig) -> Table {
    cfg.to_toml().parse::<Table>().expect("serialised config parses")
}

fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies `a.b.c=value`. The value is read as TOML, falling back to a
/// bare string.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = match cur.get_mut(*p) {
            Some(Value::Table(t)) => t,
            _ => return Err(Error::Config(format!("unknown config section `{p}` in `{key}`"))),
        };
    }
    let last = parts[parts.len() - 1];
    if !cur.contains_key(last) {
        return Err(Error::Config(format!("unknown config key `{key}`")));
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Full-size reference settings.
pub fn paper_v1_defaults() -> ExperimentConfig {
    ExperimentConfig {
        train: TrainConfig {
            batch_size: 14,
            mixed_precision: true,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

/// Small backbone and 128 px frames for CPU runs on synthetic data.
pub fn desk_toy() -> ExperimentConfig {
    ExperimentConfig {
        data: DataConfig {
            frame_rate: 8.0,
            ..DataConfig::default()
        },
        preprocess: PreprocessConfig {
            train_short_sides: vec![128],
            max_long_side: 256,
            test_height: 128,
            alpha: 0.5,
            clip_len: 8,
            ..PreprocessConfig::default()
        },
        backbone: BackboneConfig {
            channels_2d: vec![8, 16, 24, 32],
            stem_channels_2d: 8,
            channels_3d: vec![8, 16, 24, 32],
            stem_channels_3d: 8,
            temporal_kernel: 3,
            temporal_strides: vec![1, 1, 1, 1],
            fpn_channels: 16,
            fusion: FusionMode::Combined,
        },
        head: HeadConfig {
            representation_dim: 64,
            anchor_sizes: vec![16.0, 32.0, 64.0, 128.0, 256.0],
            aspect_ratios: vec![1.0],
            rpn_pre_nms_top_n_train: 200,
            rpn_post_nms_top_n_train: 100,
            rpn_pre_nms_top_n_test: 200,
            rpn_post_nms_top_n_test: 50,
            rpn_batch_size_per_image: 64,
            roi_batch_size_per_image: 32,
            ..HeadConfig::default()
        },
        train: TrainConfig {
            base_lr: 0.003,
            batch_size: 2,
            max_epochs: 20,
            lr_drop_epochs: vec![15],
            ..TrainConfig::default()
        },
        eval: EvalSettings::default(),
    }
}

pub fn preset_config(name: &str) -> Result<ExperimentConfig> {
    match name {
        "paper_v1_defaults" => Ok(paper_v1_defaults()),
        "desk_toy" => Ok(desk_toy()),
        other => Err(Error::Config(format!("unknown preset `{other}`; known presets are {PRESETS:?}"))),
    }
}

/// One row of an ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationRow {
    pub key: &'static str,
    pub label: &'static str,
    pub head: HeadVariant,
    pub fusion: FusionMode,
}

const fn row(key: &'static str, label: &'static str, head: HeadVariant, fusion: FusionMode) -> AblationRow {
    AblationRow {
        key,
        label,
        head,
        fusion,
    }
}

/// Rows of ablation tables 2, 3 and 4, in table order.
pub fn ablation_rows(table: u8) -> Result<Vec<AblationRow>> {
    use FusionMode as F;
    use HeadVariant as H;
    match table {
        2 => Ok(vec![
            row("nouns_only", "Nouns Only", H::NounsOnly, F::Combined),
            row("standard_head", "Standard Head", H::StandardHead, F::Combined),
            row("proposed_head", "Proposed Head", H::Proposed, F::Combined),
        ]),
        3 => Ok(vec![
            row("proposed_head", "Proposed Head", H::Proposed, F::Combined),
            row("no_global", "- global features", H::NoGlobal, F::Combined),
            row("no_residual", "- res. connections", H::NoResidual, F::Combined),
            row("no_verb_noun_product", "- verb-noun product", H::NoVerbNounProduct, F::Combined),
            row("sum_fusion", "Sum Fusion", H::SumFusion, F::Combined),
        ]),
        4 => Ok(vec![
            row("proposed_backbone", "Proposed backbone", H::Proposed, F::Combined),
            row("no_3d", "w/o 3D backbone", H::Proposed, F::No3d),
            row("no_post_conv", "w/o conv. block post sum", H::Proposed, F::NoPostConv),
            row("post_pyramid", "post-pyramid fusion", H::Proposed, F::PostPyramid),
        ]),
        other => Err(Error::Config(format!("unknown ablation table {other}; expected 2, 3 or 4"))),
    }
}

impl AblationRow {
    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        cfg.head.ablation = self.head;
        cfg.backbone.fusion = self.fusion;
        cfg
    }
}
