use crate::assign::AssignmentConfig;
use crate::error::{Error, Result};
use crate::loss::LossWeights;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelConfig {
    pub stride: usize,
    pub base_size: f64,
}

/// Which sample-discrimination metric each stage uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricScheme {
    /// Center-region metric at every stage, tightened per stage.
    AnchorFree,
    /// IoU metric at every stage, loosened at the first.
    AnchorBased,
    /// Center-region metric first, IoU metric afterwards.
    Mixed,
}

impl MetricScheme {
    pub fn name(self) -> &'static str {
        match self {
            MetricScheme::AnchorFree => "af",
            MetricScheme::AnchorBased => "ab",
            MetricScheme::Mixed => "afab",
        }
    }

    /// Per-stage assignment rules for a cascade of `stages`.
    pub fn assignments(self, stages: usize) -> Vec<AssignmentConfig> {
        (0..stages)
            .map(|t| match (self, t) {
                (MetricScheme::AnchorFree, t) => {
                    AssignmentConfig::anchor_free(0.2 / (1 << t) as f64, 0.5)
                }
                (MetricScheme::Mixed, 0) => AssignmentConfig::anchor_free(0.2, 0.5),
                (MetricScheme::AnchorBased, 0) => AssignmentConfig::anchor_based(0.5, 0.3),
                (_, 1) => AssignmentConfig::anchor_based(0.7, 0.3),
                (_, _) => AssignmentConfig::anchor_based(0.75, 0.3),
            })
            .collect()
    }
}

impl std::str::FromStr for MetricScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "af" => Ok(MetricScheme::AnchorFree),
            "ab" => Ok(MetricScheme::AnchorBased),
            "afab" => Ok(MetricScheme::Mixed),
            other => Err(Error::config(
                "metric",
                format!("unknown metric scheme {other:?} (af, ab, afab)"),
            )),
        }
    }
}

/// SGD hyper-parameters. `base_lr` is the rate for a batch of 16 and is scaled linearly.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epoch indices from which the rate is multiplied by another `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    /// Linear ramp over the first iterations of training.
    pub warmup_iters: usize,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
}

impl Schedule {
    /// Decay points at 2/3 and 11/12 of training.
    pub fn default_decay(epochs: usize) -> Vec<usize> {
        vec![epochs * 2 / 3, epochs * 11 / 12]
    }

    pub fn lr_at(&self, epoch: usize, iter: usize) -> f64 {
        let mut lr = self.base_lr * self.batch_size as f64 / 16.0;
        for &d in &self.decay_epochs {
            if epoch >= d {
                lr *= self.decay_factor;
            }
        }
        if iter < self.warmup_iters {
            lr *= (iter + 1) as f64 / self.warmup_iters as f64;
        }
        lr
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            base_lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 16,
            decay_epochs: Self::default_decay(20),
            decay_factor: 0.1,
            warmup_iters: 50,
            clip_norm: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub num_stages: usize,
    pub levels: Vec<LevelConfig>,
    pub input_channels: usize,
    /// Output width of each backbone block.
    pub backbone_channels: Vec<usize>,
    /// Downsampling factor of each backbone block.
    pub backbone_strides: Vec<usize>,
    pub head_channels: usize,
    pub metric: MetricScheme,
    pub assignments: Vec<AssignmentConfig>,
    pub loss_weights: LossWeights,
    pub nms_threshold: f64,
    pub max_proposals: usize,
    /// Later stages sample features from their own input anchors.
    pub align: bool,
    pub use_stats: bool,
    /// IoU loss at the final stage instead of smooth-L1.
    pub iou_loss: bool,
    /// Negatives per positive in the classification loss.
    pub neg_ratio: f64,
    pub max_cls_samples: usize,
    pub flip: bool,
    pub seed: u64,
    pub schedule: Schedule,
    /// Trailing scenes of the dataset held out for validation.
    pub val_scenes: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let metric = MetricScheme::Mixed;
        Self {
            num_stages: 2,
            levels: vec![
                LevelConfig {
                    stride: 4,
                    base_size: 16.0,
                },
                LevelConfig {
                    stride: 8,
                    base_size: 32.0,
                },
            ],
            input_channels: 3,
            backbone_channels: vec![8, 16, 16],
            backbone_strides: vec![2, 2, 2],
            head_channels: 32,
            metric,
            assignments: metric.assignments(2),
            loss_weights: LossWeights::uniform(2, 10.0),
            nms_threshold: 0.8,
            max_proposals: 100,
            align: true,
            use_stats: true,
            iou_loss: true,
            neg_ratio: 1.0,
            max_cls_samples: 256,
            flip: true,
            seed: 0,
            schedule: Schedule::default(),
            val_scenes: 128,
        }
    }
}

impl PipelineConfig {
    /// Change the stage count or metric scheme, rebuilding the dependent per-stage settings.
    pub fn set_stages(&mut self, stages: usize, metric: MetricScheme) {
        self.num_stages = stages;
        self.metric = metric;
        self.assignments = metric.assignments(stages);
        self.loss_weights.alpha = vec![1.0; stages];
    }

    /// Cumulative stride after each backbone block.
    pub fn block_strides(&self) -> Vec<usize> {
        self.backbone_strides
            .iter()
            .scan(1, |s, &f| {
                *s *= f;
                Some(*s)
            })
            .collect()
    }

    /// Backbone block feeding each pyramid level.
    pub fn level_blocks(&self) -> Result<Vec<usize>> {
        let cum = self.block_strides();
        self.levels
            .iter()
            .map(|l| {
                cum.iter().position(|&s| s == l.stride).ok_or_else(|| {
                    Error::config(
                        "levels.stride",
                        format!(
                            "no backbone block has cumulative stride {} (blocks: {cum:?})",
                            l.stride
                        ),
                    )
                })
            })
            .collect()
    }

    pub fn feature_channels(&self) -> Result<usize> {
        let blocks = self.level_blocks()?;
        let c = self.backbone_channels[blocks[0]];
        if blocks.iter().any(|&b| self.backbone_channels[b] != c) {
            return Err(Error::config(
                "backbone_channels",
                "all pyramid levels must share one channel width",
            ));
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_stages == 0 {
            return Err(Error::config(
                "num_stages",
                "at least one stage is required",
            ));
        }
        if self.levels.is_empty() {
            return Err(Error::config(
                "levels",
                "at least one pyramid level is required",
            ));
        }
        if self.levels.windows(2).any(|w| w[1].stride <= w[0].stride) {
            return Err(Error::config(
                "levels.stride",
                "strides must be strictly increasing",
            ));
        }
        if self
            .levels
            .iter()
            .any(|l| !(l.base_size > 0.0 && l.base_size.is_finite()))
        {
            return Err(Error::config(
                "levels.base_size",
                "anchor sizes must be positive",
            ));
        }
        if self.input_channels == 0 || self.head_channels == 0 {
            return Err(Error::config(
                "head_channels",
                "channel counts must be positive",
            ));
        }
        if self.backbone_channels.is_empty()
            || self.backbone_channels.len() != self.backbone_strides.len()
            || self.backbone_channels.contains(&0)
            || self.backbone_strides.contains(&0)
        {
            return Err(Error::config(
                "backbone_channels",
                "backbone needs matching non-empty channel and stride lists with positive entries",
            ));
        }
        self.feature_channels()?;
        if self.assignments.len() != self.num_stages {
            return Err(Error::config(
                "assignments",
                format!(
                    "{} assignment rules for {} stages",
                    self.assignments.len(),
                    self.num_stages
                ),
            ));
        }
        for a in &self.assignments {
            a.validate()?;
        }
        self.loss_weights.validate()?;
        if self.loss_weights.alpha.len() != self.num_stages {
            return Err(Error::config(
                "loss_weights.alpha",
                "one weight per stage is required",
            ));
        }
        if !(self.nms_threshold > 0.0 && self.nms_threshold < 1.0) {
            return Err(Error::config("nms_threshold", "must lie in (0, 1)"));
        }
        if self.max_proposals == 0 {
            return Err(Error::config("max_proposals", "must be at least 1"));
        }
        if !(self.neg_ratio > 0.0 && self.neg_ratio.is_finite()) || self.max_cls_samples < 2 {
            return Err(Error::config(
                "neg_ratio",
                "sampling ratio must be positive and the cap at least 2",
            ));
        }
        let s = &self.schedule;
        if s.epochs == 0 || s.batch_size == 0 {
            return Err(Error::config(
                "schedule",
                "epochs and batch_size must be positive",
            ));
        }
        if !(s.base_lr >= 0.0 && s.base_lr.is_finite()) {
            return Err(Error::config(
                "schedule.base_lr",
                "must be finite and non-negative",
            ));
        }
        if !(0.0..1.0).contains(&s.momentum) {
            return Err(Error::config("schedule.momentum", "must lie in [0, 1)"));
        }
        if !(s.weight_decay >= 0.0 && s.decay_factor > 0.0 && s.clip_norm >= 0.0) {
            return Err(Error::config(
                "schedule",
                "weight_decay, decay_factor and clip_norm must be non-negative",
            ));
        }
        Ok(())
    }

    /// Check that an image of this size can be processed.
    pub fn check_image(&self, width: usize, height: usize) -> Result<()> {
        let top = self.levels.last().map_or(1, |l| l.stride);
        if !width.is_multiple_of(top) || !height.is_multiple_of(top) {
            return Err(Error::config(
                "levels.stride",
                format!("image {width}x{height} is not divisible by the largest stride {top}"),
            ));
        }
        Ok(())
    }

    /// Short name of the ablation this config represents; empty for the default cascade.
    pub fn ablation_tag(&self) -> String {
        let mut parts = Vec::new();
        if self.num_stages != 2 {
            parts.push(format!("t{}", self.num_stages));
        }
        if !self.align {
            parts.push("noalign".to_string());
        }
        if self.metric != MetricScheme::Mixed {
            parts.push(self.metric.name().to_string());
        }
        if !self.use_stats {
            parts.push("nostats".to_string());
        }
        if !self.iou_loss {
            parts.push("noiou".to_string());
        }
        parts.join("_")
    }
}
