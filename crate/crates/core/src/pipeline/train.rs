use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::calibrate::calibrate_stats;
use super::config::PipelineConfig;
use super::forward::{forward_cascade, train_step_image, LossBreakdown};
use super::model::Model;
use crate::assign::{assign, TargetStats};
use crate::error::{Error, Result};
use crate::eval::average_recall;
use crate::geometry::{iou, BBox, ScoredBox};
use crate::synth::Scene;
use crate::tensor::sgd_update;

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model<f32>,
    pub momentum: Model<f32>,
    pub stats: Vec<TargetStats>,
    /// Number of completed epochs.
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub total: f64,
    pub reg: Vec<f64>,
    pub cls: f64,
    pub ar_10: f64,
    pub ar_100: f64,
}

impl EpochMetrics {
    pub fn csv_header(stages: usize) -> String {
        let regs: Vec<String> = (1..=stages).map(|t| format!("reg_s{t}")).collect();
        format!("epoch,total,{},cls,ar_10,ar_100", regs.join(","))
    }

    pub fn csv_row(&self) -> String {
        let regs: Vec<String> = self.reg.iter().map(|v| format!("{v:.6}")).collect();
        format!(
            "{},{:.6},{},{:.6},{:.6},{:.6}",
            self.epoch,
            self.total,
            regs.join(","),
            self.cls,
            self.ar_10,
            self.ar_100
        )
    }
}

/// Per-image randomness keyed by `(seed, epoch, scene)`, independent of scheduling.
pub fn image_rng(seed: u64, epoch: usize, scene_id: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | scene_id as u64);
    rng
}

fn order_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX - epoch as u64);
    rng
}

pub struct Trainer<'a> {
    cfg: PipelineConfig,
    train: &'a [Scene],
    val: &'a [Scene],
    pool: rayon::ThreadPool,
}

impl<'a> Trainer<'a> {
    /// Splits off the trailing `cfg.val_scenes` scenes for validation.
    pub fn new(cfg: &PipelineConfig, scenes: &'a [Scene], threads: usize) -> Result<Self> {
        cfg.validate()?;
        if scenes.len() <= cfg.val_scenes {
            return Err(Error::config(
                "val_scenes",
                format!(
                    "{} scenes leave nothing to train on after holding out {}",
                    scenes.len(),
                    cfg.val_scenes
                ),
            ));
        }
        for s in scenes {
            cfg.check_image(s.width(), s.height())?;
            if s.image.dims()[1] != cfg.input_channels {
                return Err(Error::config(
                    "input_channels",
                    format!("scene {} has {} channels", s.scene_id, s.image.dims()[1]),
                ));
            }
        }
        let (train, val) = scenes.split_at(scenes.len() - cfg.val_scenes);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| Error::config("threads", e.to_string()))?;
        Ok(Self {
            cfg: cfg.clone(),
            train,
            val,
            pool,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn init_state(&self) -> Result<TrainState> {
        let model = Model::init(&self.cfg)?;
        Ok(TrainState {
            momentum: model.zeros_like(),
            model,
            stats: calibrate_stats(self.train, &self.cfg)?,
            epoch: 0,
        })
    }

    fn iters_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.cfg.schedule.batch_size)
    }

    /// One pass over the training split followed by validation.
    pub fn run_epoch(&self, state: &mut TrainState) -> Result<EpochMetrics> {
        let cfg = &self.cfg;
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut order_rng(cfg.seed, epoch));

        let stages = cfg.num_stages;
        let mut sum = LossBreakdown {
            reg: vec![0.0; stages],
            ..LossBreakdown::default()
        };
        for (it, batch) in order.chunks(cfg.schedule.batch_size).enumerate() {
            let results: Vec<Result<(LossBreakdown, Model<f32>)>> = self.pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| {
                        let scene = &self.train[i];
                        let mut rng = image_rng(cfg.seed, epoch, scene.scene_id);
                        let flipped;
                        let s = if cfg.flip && rng.gen_bool(0.5) {
                            flipped = scene.flip_horizontal();
                            &flipped
                        } else {
                            scene
                        };
                        let (loss, grads, _) = train_step_image(
                            &s.image,
                            &s.gts,
                            &state.model,
                            cfg,
                            &state.stats,
                            &mut rng,
                        )?;
                        Ok((loss, grads))
                    })
                    .collect()
            });
            let mut grads = state.model.zeros_like();
            for (k, r) in results.into_iter().enumerate() {
                let (loss, g) = r?;
                if !loss.total.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss at epoch {}, iteration {it}, scene {}: {loss:?}",
                        epoch + 1,
                        self.train[batch[k]].scene_id
                    )));
                }
                sum.total += loss.total;
                sum.cls += loss.cls;
                for (a, b) in sum.reg.iter_mut().zip(&loss.reg) {
                    *a += b;
                }
                grads.add_assign(&g)?;
            }
            grads.scale(1.0 / batch.len() as f32);
            self.apply_update(state, grads, epoch, epoch * self.iters_per_epoch() + it)?;
        }
        state.epoch += 1;
        let n = self.train.len() as f64;
        let (ar_10, ar_100) = self.validate(&state.model, &state.stats)?;
        Ok(EpochMetrics {
            epoch: state.epoch,
            total: sum.total / n,
            reg: sum.reg.iter().map(|v| v / n).collect(),
            cls: sum.cls / n,
            ar_10,
            ar_100,
        })
    }

    fn apply_update(
        &self,
        state: &mut TrainState,
        mut grads: Model<f32>,
        epoch: usize,
        iter: usize,
    ) -> Result<()> {
        let s = &self.cfg.schedule;
        if s.weight_decay > 0.0 {
            let wd = s.weight_decay as f32;
            for (g, p) in grads.params_mut().into_iter().zip(state.model.params()) {
                for (gv, &pv) in g.iter_mut().zip(p) {
                    *gv += wd * pv;
                }
            }
        }
        let norm = grads.norm();
        if !norm.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite gradient at epoch {}, iteration {iter}",
                epoch + 1
            )));
        }
        if s.clip_norm > 0.0 && norm > s.clip_norm {
            grads.scale((s.clip_norm / norm) as f32);
        }
        let lr = s.lr_at(epoch, iter);
        for ((p, g), v) in state
            .model
            .params_mut()
            .into_iter()
            .zip(grads.params())
            .zip(state.momentum.params_mut())
        {
            sgd_update(p, g, v, lr, s.momentum)?;
        }
        if !state.model.is_finite() {
            return Err(Error::Numerical(format!(
                "weights diverged at epoch {}, iteration {iter}",
                epoch + 1
            )));
        }
        Ok(())
    }

    /// Proposals for a set of scenes, computed in parallel, in scene order.
    pub fn propose(
        &self,
        model: &Model<f32>,
        stats: &[TargetStats],
        scenes: &[Scene],
    ) -> Result<Vec<Vec<ScoredBox>>> {
        propose_all(&self.pool, model, &self.cfg, stats, scenes)
    }

    /// `(AR@10, AR@100)` on the validation split.
    pub fn validate(&self, model: &Model<f32>, stats: &[TargetStats]) -> Result<(f64, f64)> {
        if self.val.is_empty() {
            return Ok((0.0, 0.0));
        }
        let props = self.propose(model, stats, self.val)?;
        let gts: Vec<Vec<BBox>> = self.val.iter().map(|s| s.gts.clone()).collect();
        Ok((
            average_recall(&props, &gts, 10)?,
            average_recall(&props, &gts, 100)?,
        ))
    }

    pub fn validation_scenes(&self) -> &[Scene] {
        self.val
    }

    pub fn training_scenes(&self) -> &[Scene] {
        self.train
    }

    /// Train until `until_epoch` (or the configured total), reporting each epoch.
    pub fn run(
        &self,
        state: &mut TrainState,
        until_epoch: Option<usize>,
        mut on_epoch: impl FnMut(&TrainState, &EpochMetrics) -> Result<()>,
    ) -> Result<Vec<EpochMetrics>> {
        let end = until_epoch
            .unwrap_or(self.cfg.schedule.epochs)
            .min(self.cfg.schedule.epochs);
        let mut out = Vec::new();
        while state.epoch < end {
            let m = self.run_epoch(state)?;
            on_epoch(state, &m)?;
            out.push(m);
        }
        Ok(out)
    }
}

pub fn propose_all(
    pool: &rayon::ThreadPool,
    model: &Model<f32>,
    cfg: &PipelineConfig,
    stats: &[TargetStats],
    scenes: &[Scene],
) -> Result<Vec<Vec<ScoredBox>>> {
    pool.install(|| {
        scenes
            .par_iter()
            .map(|s| forward_cascade(&s.image, model, cfg, stats).map(|o| o.proposals))
            .collect()
    })
}

/// Mean IoU between each stage's refined anchors and their matched gts.
///
/// Pairs are the initial anchors labelled positive by the first-stage rule; the same pairs are
/// followed through every stage, so entry `t` is directly comparable with entry `t - 1`.
pub fn stage_mean_iou(
    pool: &rayon::ThreadPool,
    model: &Model<f32>,
    cfg: &PipelineConfig,
    stats: &[TargetStats],
    scenes: &[Scene],
) -> Result<Vec<f64>> {
    let per_scene: Vec<(Vec<f64>, usize)> = pool.install(|| {
        scenes
            .par_iter()
            .map(|s| {
                let out = forward_cascade(&s.image, model, cfg, stats)?;
                let first = assign(&out.stage_anchors[0], &s.gts, &cfg.assignments[0]);
                let mut sums = vec![0.0; cfg.num_stages];
                let mut n = 0;
                for i in first.positives() {
                    let g = &s.gts[first.matched_gt[i].expect("positive has a gt")];
                    for (t, sum) in sums.iter_mut().enumerate() {
                        *sum += iou(&out.stage_anchors[t + 1][i], g);
                    }
                    n += 1;
                }
                Ok((sums, n))
            })
            .collect::<Result<_>>()
    })?;
    let n: usize = per_scene.iter().map(|(_, n)| n).sum();
    if n == 0 {
        return Err(Error::Stats(
            "no positive anchors in the evaluation scenes".into(),
        ));
    }
    Ok((0..cfg.num_stages)
        .map(|t| per_scene.iter().map(|(s, _)| s[t]).sum::<f64>() / n as f64)
        .collect())
}

/// Convenience wrapper: train from scratch with the configured schedule.
pub fn train(
    scenes: &[Scene],
    cfg: &PipelineConfig,
    threads: usize,
) -> Result<(TrainState, Vec<EpochMetrics>)> {
    let trainer = Trainer::new(cfg, scenes, threads)?;
    let mut state = trainer.init_state()?;
    let metrics = trainer.run(&mut state, None, |_, _| Ok(()))?;
    Ok((state, metrics))
}
