use super::config::PipelineConfig;
use super::forward::initial_levels;
use crate::assign::{assign, compute_target_stats, TargetStats};
use crate::error::{Error, Result};
use crate::geometry::{decode, Delta};
use crate::synth::Scene;

/// Fraction of the target delta applied when simulating a stage's refinement.
pub const CALIBRATION_STEP: f64 = 0.5;

/// Regression target statistics per stage, measured over the training scenes.
///
/// Stage 1 sees the initial anchors. For later stages the previous stage's
/// positives are moved part of the way towards their objects (a stand-in for
/// a trained predecessor), reassigned with the next stage's rule, and the
/// resulting targets measured. Values are rounded to `f32` so they survive a
/// checkpoint round trip unchanged.
pub fn calibrate_stats(scenes: &[Scene], cfg: &PipelineConfig) -> Result<Vec<TargetStats>> {
    if !cfg.use_stats {
        return Ok(vec![TargetStats::identity(); cfg.num_stages]);
    }
    let mut samples: Vec<Vec<Delta>> = vec![Vec::new(); cfg.num_stages];
    for scene in scenes {
        let levels = initial_levels(cfg, scene.width(), scene.height())?;
        let mut anchors: Vec<_> = levels
            .iter()
            .flat_map(|l| l.anchors.iter().copied())
            .collect();
        for (t, rule) in cfg.assignments.iter().enumerate() {
            let res = assign(&anchors, &scene.gts, rule);
            for i in res.positives() {
                let d = res.targets[i].expect("positive has a target");
                samples[t].push(d);
                let step = Delta::from_array(d.to_array().map(|v| v * CALIBRATION_STEP));
                anchors[i] = decode(&anchors[i], &step);
            }
        }
    }
    samples
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let st = compute_target_stats(s)
                .map_err(|e| Error::Stats(format!("stage {}: {e}", t + 1)))?;
            let r = |d: Delta| Delta::from_array(d.to_array().map(|v| v as f32 as f64));
            Ok(TargetStats {
                mean: r(st.mean),
                std: r(st.std),
            })
        })
        .collect()
}
