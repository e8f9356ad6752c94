//! TOML run configuration. Every key is optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use crpn_core::assign::AssignmentConfig;
use crpn_core::pipeline::{LevelConfig, MetricScheme, PipelineConfig, Schedule};
use crpn_core::synth::DatasetSpec;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub num_scenes: Option<usize>,
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub channels: Option<usize>,
    pub min_objects: Option<usize>,
    pub max_objects: Option<usize>,
    pub min_size: Option<f64>,
    pub max_size: Option<f64>,
    pub min_aspect: Option<f64>,
    pub max_aspect: Option<f64>,
    pub noise: Option<f64>,
    pub texture: Option<f64>,
    pub falloff: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSection {
    pub stride: usize,
    pub base_size: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub metric: String,
    #[serde(default = "default_sigma_ctr")]
    pub sigma_ctr: f64,
    #[serde(default = "default_sigma_ign")]
    pub sigma_ign: f64,
    #[serde(default = "default_iou_pos")]
    pub iou_pos: f64,
    #[serde(default = "default_iou_neg")]
    pub iou_neg: f64,
}

fn default_sigma_ctr() -> f64 {
    0.2
}
fn default_sigma_ign() -> f64 {
    0.5
}
fn default_iou_pos() -> f64 {
    0.7
}
fn default_iou_neg() -> f64 {
    0.3
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub num_stages: Option<usize>,
    pub levels: Option<Vec<LevelSection>>,
    pub backbone_channels: Option<Vec<usize>>,
    pub backbone_strides: Option<Vec<usize>>,
    pub head_channels: Option<usize>,
    pub metric: Option<String>,
    /// Explicit per-stage rules; overrides `metric`.
    pub stages: Option<Vec<StageSection>>,
    pub align: Option<bool>,
    pub use_stats: Option<bool>,
    pub iou_loss: Option<bool>,
    pub alpha: Option<Vec<f64>>,
    pub lambda: Option<f64>,
    pub nms_threshold: Option<f64>,
    pub max_proposals: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub base_lr: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub decay_epochs: Option<Vec<usize>>,
    pub decay_factor: Option<f64>,
    pub warmup_iters: Option<usize>,
    pub clip_norm: Option<f64>,
    pub neg_ratio: Option<f64>,
    pub max_cls_samples: Option<usize>,
    pub flip: Option<bool>,
    pub val_scenes: Option<usize>,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub stages: Option<usize>,
    pub no_align: bool,
    pub metric: Option<String>,
    pub no_stats: bool,
    pub no_iou_loss: bool,
    pub nms_thr: Option<f64>,
    pub max_proposals: Option<usize>,
}

macro_rules! set {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src.clone() {
            $dst = v;
        }
    };
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn dataset_spec(&self, seed: Option<u64>) -> Result<DatasetSpec, CliError> {
        let d = &self.data;
        let mut s = DatasetSpec::default();
        set!(s.num_scenes, d.num_scenes);
        set!(s.width, d.width);
        set!(s.height, d.height);
        set!(s.channels, d.channels);
        set!(s.min_objects, d.min_objects);
        set!(s.max_objects, d.max_objects);
        set!(s.min_size, d.min_size);
        set!(s.max_size, d.max_size);
        set!(s.min_aspect, d.min_aspect);
        set!(s.max_aspect, d.max_aspect);
        set!(s.noise, d.noise);
        set!(s.texture, d.texture);
        set!(s.falloff, d.falloff);
        set!(s.seed, d.seed);
        set!(s.seed, seed);
        s.validate()?;
        Ok(s)
    }

    pub fn pipeline_config(&self, o: &Overrides) -> Result<PipelineConfig, CliError> {
        let m = &self.model;
        let t = &self.train;
        let mut c = PipelineConfig::default();
        if let Some(levels) = &m.levels {
            c.levels = levels
                .iter()
                .map(|l| LevelConfig {
                    stride: l.stride,
                    base_size: l.base_size,
                })
                .collect();
        }
        set!(c.backbone_channels, m.backbone_channels);
        set!(c.backbone_strides, m.backbone_strides);
        set!(c.head_channels, m.head_channels);
        set!(c.align, m.align);
        set!(c.use_stats, m.use_stats);
        set!(c.iou_loss, m.iou_loss);
        set!(c.loss_weights.lambda, m.lambda);
        set!(c.nms_threshold, m.nms_threshold);
        set!(c.max_proposals, m.max_proposals);

        let metric_name = o.metric.clone().or_else(|| m.metric.clone());
        let metric: MetricScheme = match &metric_name {
            Some(s) => s.parse()?,
            None => MetricScheme::Mixed,
        };
        let stages = o.stages.or(m.num_stages).unwrap_or(2);
        c.set_stages(stages, metric);
        if let (Some(rules), None) = (&m.stages, &o.metric) {
            if o.stages.is_some_and(|s| s != rules.len()) {
                return Err(CliError::Config(format!(
                    "--stages {} conflicts with {} explicit [[model.stages]] entries",
                    stages,
                    rules.len()
                )));
            }
            c.num_stages = rules.len();
            c.assignments = rules.iter().map(stage_rule).collect::<Result<_, _>>()?;
            c.loss_weights.alpha = vec![1.0; rules.len()];
        }
        set!(c.loss_weights.alpha, m.alpha);

        let mut s = Schedule::default();
        set!(s.epochs, t.epochs);
        s.decay_epochs = t
            .decay_epochs
            .clone()
            .unwrap_or_else(|| Schedule::default_decay(s.epochs));
        set!(s.batch_size, t.batch_size);
        set!(s.base_lr, t.base_lr);
        set!(s.momentum, t.momentum);
        set!(s.weight_decay, t.weight_decay);
        set!(s.decay_factor, t.decay_factor);
        set!(s.warmup_iters, t.warmup_iters);
        set!(s.clip_norm, t.clip_norm);
        c.schedule = s;
        set!(c.seed, t.seed);
        set!(c.neg_ratio, t.neg_ratio);
        set!(c.max_cls_samples, t.max_cls_samples);
        set!(c.flip, t.flip);
        set!(c.val_scenes, t.val_scenes);

        set!(c.seed, o.seed);
        if o.no_align {
            c.align = false;
        }
        if o.no_stats {
            c.use_stats = false;
        }
        if o.no_iou_loss {
            c.iou_loss = false;
        }
        set!(c.nms_threshold, o.nms_thr);
        set!(c.max_proposals, o.max_proposals);
        c.validate()?;
        Ok(c)
    }
}

fn stage_rule(s: &StageSection) -> Result<AssignmentConfig, CliError> {
    let rule = match s.metric.as_str() {
        "af" => AssignmentConfig::anchor_free(s.sigma_ctr, s.sigma_ign),
        "ab" => AssignmentConfig::anchor_based(s.iou_pos, s.iou_neg),
        other => {
            return Err(CliError::Config(format!(
                "model.stages.metric: expected \"af\" or \"ab\", got {other:?}"
            )))
        }
    };
    rule.validate()?;
    Ok(rule)
}
