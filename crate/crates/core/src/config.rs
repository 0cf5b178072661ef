//! Flat run configuration collecting every tunable of the pipeline.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::bploc::BplocConfig;
use crate::defpm::{DefpmConfig, WriteSource};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::tracker::TrackerConfig;
use crate::train::TrainConfig;
use crate::{Error, Result};

/// One TOML table of scalar keys. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // backbone
    pub num_seeds: usize,
    pub channels: usize,
    pub backbone_widths: Vec<usize>,
    pub backbone_k: usize,
    pub group_k: usize,
    // propagation
    pub attn_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ffn_hidden: usize,
    pub write_source: WriteSource,
    pub share_self_value: bool,
    pub decouple: bool,
    // localization
    pub num_proposals: usize,
    pub grid_x: usize,
    pub grid_y: usize,
    pub grid_z: usize,
    pub ref_k: usize,
    pub quality_fusion: bool,
    // tracking
    pub memory_train: usize,
    pub memory_test: usize,
    pub crop_size: usize,
    pub margin: f64,
    pub lost_threshold: f64,
    // losses
    pub lambda_m: f64,
    pub lambda_c: f64,
    pub lambda_q: f64,
    pub lambda_s: f64,
    pub positive_radius: f64,
    pub positive_fraction: f64,
    pub positive_sigma: f64,
    // optimization
    pub learning_rate: f64,
    pub lr_final_ratio: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub sample_len: usize,
    pub gt_memory_masks: bool,
    pub flip_prob: f64,
    pub max_rotation: f64,
    pub jitter_center: f64,
    pub jitter_heading: f64,
    pub grad_clip: f64,
    pub seed: u64,
    // paths, relative to the data root when not absolute
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrackerConfig::default();
        let tr = TrainConfig::default();
        Self {
            num_seeds: m.backbone.num_seeds,
            channels: m.backbone.channels,
            backbone_widths: m.backbone.widths,
            backbone_k: m.backbone.k,
            group_k: m.backbone.group_k,
            attn_dim: m.defpm.attn_dim,
            num_heads: m.defpm.num_heads,
            num_layers: m.defpm.num_layers,
            ffn_hidden: m.defpm.ffn_hidden,
            write_source: m.defpm.write_source,
            share_self_value: m.defpm.share_self_value,
            decouple: m.defpm.decouple,
            num_proposals: m.bploc.num_proposals,
            grid_x: m.bploc.grid[0],
            grid_y: m.bploc.grid[1],
            grid_z: m.bploc.grid[2],
            ref_k: m.bploc.k,
            quality_fusion: m.bploc.quality_fusion,
            memory_train: tr.train_memory,
            memory_test: t.memory_size,
            crop_size: t.crop_size,
            margin: t.margin,
            lost_threshold: t.lost_threshold,
            lambda_m: tr.weights.lambda_m,
            lambda_c: tr.weights.lambda_c,
            lambda_q: tr.weights.lambda_q,
            lambda_s: tr.weights.lambda_s,
            positive_radius: tr.positive_radius,
            positive_fraction: tr.positive_fraction,
            positive_sigma: tr.positive_sigma,
            learning_rate: tr.learning_rate,
            lr_final_ratio: tr.lr_final_ratio,
            batch_size: tr.batch_size,
            epochs: tr.epochs,
            sample_len: tr.sample_len,
            gt_memory_masks: tr.gt_memory_masks,
            flip_prob: tr.flip_prob,
            max_rotation: tr.max_rotation,
            jitter_center: tr.jitter_center,
            jitter_heading: tr.jitter_heading,
            grad_clip: tr.grad_clip,
            seed: 0,
            train_data: None,
            eval_data: None,
        }
    }
}

impl RunConfig {
    /// Parses and validates.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train_config().validate()?;
        if self.memory_test == 0 {
            return Err(Error::Config("memory_test must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lost_threshold) {
            return Err(Error::Config(format!(
                "lost_threshold {} outside [0, 1]",
                self.lost_threshold
            )));
        }
        let need = self.num_seeds.max(self.backbone_k).max(self.group_k);
        if self.crop_size < need {
            return Err(Error::Config(format!(
                "crop_size {} below the {need} points the model needs",
                self.crop_size
            )));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let c = self.channels;
        ModelConfig {
            backbone: BackboneConfig {
                num_seeds: self.num_seeds,
                channels: c,
                widths: self.backbone_widths.clone(),
                k: self.backbone_k,
                group_k: self.group_k,
            },
            defpm: DefpmConfig {
                channels: c,
                attn_dim: self.attn_dim,
                num_heads: self.num_heads,
                num_layers: self.num_layers,
                ffn_hidden: self.ffn_hidden,
                write_source: self.write_source,
                share_self_value: self.share_self_value,
                decouple: self.decouple,
            },
            bploc: BplocConfig {
                channels: c,
                num_proposals: self.num_proposals,
                grid: [self.grid_x, self.grid_y, self.grid_z],
                k: self.ref_k,
                quality_fusion: self.quality_fusion,
            },
        }
    }

    pub fn tracker_config(&self) -> TrackerConfig {
        TrackerConfig {
            memory_size: self.memory_test,
            crop_size: self.crop_size,
            margin: self.margin,
            lost_threshold: self.lost_threshold,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            lr_final_ratio: self.lr_final_ratio,
            sample_len: self.sample_len,
            train_memory: self.memory_train,
            crop_size: self.crop_size,
            margin: self.margin,
            weights: LossWeights {
                lambda_m: self.lambda_m,
                lambda_c: self.lambda_c,
                lambda_q: self.lambda_q,
                lambda_s: self.lambda_s,
            },
            positive_radius: self.positive_radius,
            positive_fraction: self.positive_fraction,
            positive_sigma: self.positive_sigma,
            gt_memory_masks: self.gt_memory_masks,
            flip_prob: self.flip_prob,
            max_rotation: self.max_rotation,
            jitter_center: self.jitter_center,
            jitter_heading: self.jitter_heading,
            grad_clip: self.grad_clip,
            seed: self.seed,
        }
    }
}

/// `path` if absolute, otherwise joined onto `root` when one is given.
pub fn resolve_path(path: &Path, root: Option<&Path>) -> PathBuf {
    match root {
        Some(r) if path.is_relative() => r.join(path),
        _ => path.to_path_buf(),
    }
}
