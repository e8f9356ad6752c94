use std::ops::Range;

use rand::seq::index::sample;
use rand::Rng;

use super::config::PipelineConfig;
use super::model::{Model, StageHead};
use crate::assign::{
    assign, denormalize_prediction, normalize_targets, AssignmentResult, Label, TargetStats,
};
use crate::error::{Error, Result};
use crate::geometry::{
    build_anchor_level, decode, decode_jacobian, nms_indices, AnchorLevel, BBox, Delta, ScoredBox,
};
use crate::loss::{bce, iou_loss, sigmoid, smooth_l1, total_loss};
use crate::tensor::{
    adaptive_conv, adaptive_conv_backward, conv2d, conv2d_backward, relu, relu_backward, ConvGrads,
    ConvParams, OffsetField, Real, Tensor4,
};

/// Initial anchor grid of every pyramid level for an image size.
pub fn initial_levels(
    cfg: &PipelineConfig,
    width: usize,
    height: usize,
) -> Result<Vec<AnchorLevel>> {
    cfg.check_image(width, height)?;
    cfg.levels
        .iter()
        .map(|l| build_anchor_level(width, height, l.stride, l.base_size))
        .collect()
}

/// Index range of each level inside the pooled anchor list.
pub fn level_ranges(levels: &[AnchorLevel]) -> Vec<Range<usize>> {
    let mut start = 0;
    levels
        .iter()
        .map(|l| {
            let r = start..start + l.len();
            start = r.end;
            r
        })
        .collect()
}

fn check_model(model_stages: usize, cfg: &PipelineConfig, stats: &[TargetStats]) -> Result<()> {
    if model_stages != cfg.num_stages || stats.len() != cfg.num_stages {
        return Err(Error::config(
            "num_stages",
            format!(
                "config has {} stages, model {} heads, {} stat sets",
                cfg.num_stages,
                model_stages,
                stats.len()
            ),
        ));
    }
    Ok(())
}

pub(crate) struct BackboneTrace<T> {
    pub input: Tensor4<T>,
    pub pre: Vec<Tensor4<T>>,
    pub post: Vec<Tensor4<T>>,
}

fn run_backbone<T: Real>(
    image: &Tensor4<T>,
    model: &Model<T>,
    blocks: usize,
) -> Result<BackboneTrace<T>> {
    let mut pre = Vec::with_capacity(blocks);
    let mut post: Vec<Tensor4<T>> = Vec::with_capacity(blocks);
    for conv in &model.backbone[..blocks] {
        let y = conv2d(post.last().unwrap_or(image), conv)?;
        post.push(relu(&y));
        pre.push(y);
    }
    Ok(BackboneTrace {
        input: image.clone(),
        pre,
        post,
    })
}

fn used_blocks(cfg: &PipelineConfig) -> Result<(Vec<usize>, usize)> {
    let blocks = cfg.level_blocks()?;
    let n = blocks.iter().max().map_or(0, |b| b + 1);
    Ok((blocks, n))
}

/// Backbone features of a `(1, c, h, w)` image, one map per pyramid level.
pub fn extract_features<T: Real>(
    image: &Tensor4<T>,
    model: &Model<T>,
    cfg: &PipelineConfig,
) -> Result<Vec<Tensor4<T>>> {
    let [_, _, h, w] = image.dims();
    cfg.check_image(w, h)?;
    let (blocks, n) = used_blocks(cfg)?;
    let trace = run_backbone(image, model, n)?;
    Ok(blocks.iter().map(|&b| trace.post[b].clone()).collect())
}

/// Everything one stage computes at one pyramid level.
#[derive(Clone, Debug)]
pub struct StageOutput<T> {
    /// Sampling offsets used by the adaptive convolution.
    pub offsets: OffsetField,
    /// Pre-activation representation.
    pub pre: Tensor4<T>,
    /// Post-ReLU representation; the first stage's is bridged to later ones.
    pub rep: Tensor4<T>,
    /// Normalized regression output `(1, 4, h, w)`.
    pub reg: Tensor4<T>,
    pub logits: Option<Tensor4<T>>,
    /// Denormalized deltas per anchor, row-major.
    pub deltas: Vec<Delta>,
    pub refined: Vec<BBox>,
}

/// One cascade stage on one level.
///
/// Features are sampled at `sampling`'s anchors (the input anchors themselves
/// when aligned) and the predicted deltas are applied to `anchors`.
pub fn run_stage<T: Real>(
    feat: &Tensor4<T>,
    bridged: Option<&Tensor4<T>>,
    anchors: &AnchorLevel,
    sampling: &AnchorLevel,
    head: &StageHead<T>,
    stats: &TargetStats,
) -> Result<StageOutput<T>> {
    let [n, _, h, w] = feat.dims();
    if n != 1 || anchors.grid != (h, w) || sampling.grid != (h, w) {
        return Err(Error::shape("run_stage", feat.dims(), anchors.grid));
    }
    let offsets = sampling.offsets(head.ada.kernel());
    let mut pre = adaptive_conv(feat, &head.ada, &offsets)?;
    match (bridged, &head.bridge) {
        (Some(b), Some(p)) => pre.add_assign(&conv2d(b, p)?)?,
        (None, None) => {}
        (b, _) => {
            return Err(Error::config(
                "bridge",
                format!(
                    "bridged input {} but head bridge {}",
                    b.is_some(),
                    head.bridge.is_some()
                ),
            ))
        }
    }
    let rep = relu(&pre);
    let reg = conv2d(&rep, &head.reg)?;
    let logits = head.cls.as_ref().map(|c| conv2d(&rep, c)).transpose()?;
    let planes: Vec<&[T]> = (0..4).map(|k| reg.plane(0, k)).collect();
    let mut deltas = Vec::with_capacity(h * w);
    let mut refined = Vec::with_capacity(h * w);
    for (idx, a) in anchors.anchors.iter().enumerate() {
        let d = denormalize_prediction(
            &Delta::from_array([0, 1, 2, 3].map(|k| planes[k][idx].as_f64())),
            stats,
        );
        deltas.push(d);
        refined.push(decode(a, &d));
    }
    Ok(StageOutput {
        offsets,
        pre,
        rep,
        reg,
        logits,
        deltas,
        refined,
    })
}

pub(crate) struct ImageTrace<T> {
    pub backbone: BackboneTrace<T>,
    pub level_blocks: Vec<usize>,
    /// `[level][stage]`
    pub stages: Vec<Vec<StageOutput<T>>>,
    /// Pooled input anchors of each stage, followed by the final refined set.
    pub anchors: Vec<Vec<BBox>>,
    pub ranges: Vec<Range<usize>>,
}

impl<T: Real> ImageTrace<T> {
    /// Pooled final-stage logits in `f64`.
    pub fn logits(&self) -> Vec<f64> {
        self.stages
            .iter()
            .flat_map(|lv| {
                lv.last()
                    .and_then(|s| s.logits.as_ref())
                    .map(|l| l.plane(0, 0).to_vec())
                    .unwrap_or_default()
            })
            .map(|v| v.as_f64())
            .collect()
    }

    /// Pooled normalized regression output of `stage`.
    fn reg_at(&self, stage: usize, idx: usize) -> (usize, usize, [f64; 4]) {
        let l = self.ranges.iter().position(|r| r.contains(&idx)).unwrap();
        let local = idx - self.ranges[l].start;
        let reg = &self.stages[l][stage].reg;
        (
            l,
            local,
            [0, 1, 2, 3].map(|k| reg.plane(0, k)[local].as_f64()),
        )
    }
}

/// Forward pass keeping every intermediate needed by the backward pass.
///
/// With `frozen`, stage inputs are taken from it instead of the previous
/// stage's predictions, so the anchors stay fixed under weight perturbations.
pub(crate) fn trace_image<T: Real>(
    image: &Tensor4<T>,
    model: &Model<T>,
    cfg: &PipelineConfig,
    stats: &[TargetStats],
    frozen: Option<&[Vec<BBox>]>,
) -> Result<ImageTrace<T>> {
    check_model(model.num_stages(), cfg, stats)?;
    let [n, _, h, w] = image.dims();
    if n != 1 {
        return Err(Error::shape("trace_image", image.dims(), [1usize]));
    }
    let initial = initial_levels(cfg, w, h)?;
    let ranges = level_ranges(&initial);
    let (level_blocks, blocks) = used_blocks(cfg)?;
    let backbone = run_backbone(image, model, blocks)?;

    let mut stages: Vec<Vec<StageOutput<T>>> = vec![Vec::new(); initial.len()];
    let mut anchors: Vec<Vec<BBox>> = Vec::with_capacity(cfg.num_stages + 1);
    let mut current: Vec<BBox> = initial
        .iter()
        .flat_map(|l| l.anchors.iter().copied())
        .collect();
    for t in 0..cfg.num_stages {
        if let Some(f) = frozen {
            let input = f
                .get(t)
                .ok_or_else(|| Error::shape("trace_image", f.len(), cfg.num_stages))?;
            if input.len() != current.len() {
                return Err(Error::shape("trace_image", input.len(), current.len()));
            }
            current = input.clone();
        }
        let mut refined = Vec::with_capacity(current.len());
        for (l, level0) in initial.iter().enumerate() {
            let lvl = level0.with_anchors(current[ranges[l].clone()].to_vec())?;
            let sampling = if cfg.align { &lvl } else { level0 };
            let feat = &backbone.post[level_blocks[l]];
            let bridged = if t > 0 { Some(&stages[l][0].rep) } else { None };
            let out = run_stage(feat, bridged, &lvl, sampling, &model.heads[t], &stats[t])?;
            refined.extend_from_slice(&out.refined);
            stages[l].push(out);
        }
        anchors.push(std::mem::replace(&mut current, refined));
    }
    anchors.push(current);
    Ok(ImageTrace {
        backbone,
        level_blocks,
        stages,
        anchors,
        ranges,
    })
}

/// Pooled, clipped, NMS-filtered and truncated proposals.
pub fn select_proposals(
    boxes: &[BBox],
    logits: &[f64],
    width: f64,
    height: f64,
    cfg: &PipelineConfig,
) -> Vec<ScoredBox> {
    let candidates: Vec<ScoredBox> = boxes
        .iter()
        .zip(logits)
        .filter_map(|(b, &z)| {
            let score = sigmoid(z);
            if !(b.is_valid() && score.is_finite()) {
                return None;
            }
            b.clip(width, height).map(|bbox| ScoredBox { bbox, score })
        })
        .collect();
    nms_indices(&candidates, cfg.nms_threshold)
        .into_iter()
        .take(cfg.max_proposals)
        .map(|i| candidates[i])
        .collect()
}

#[derive(Clone, Debug)]
pub struct CascadeOutput {
    /// Pooled input anchors of each stage followed by the final refined anchors.
    pub stage_anchors: Vec<Vec<BBox>>,
    /// Objectness of every final refined anchor.
    pub scores: Vec<f64>,
    pub proposals: Vec<ScoredBox>,
}

/// Full cascade on one `(1, c, h, w)` image.
pub fn forward_cascade<T: Real>(
    image: &Tensor4<T>,
    model: &Model<T>,
    cfg: &PipelineConfig,
    stats: &[TargetStats],
) -> Result<CascadeOutput> {
    let trace = trace_image(image, model, cfg, stats, None)?;
    let logits = trace.logits();
    let [_, _, h, w] = image.dims();
    let final_boxes = trace.anchors.last().cloned().unwrap_or_default();
    if final_boxes
        .iter()
        .any(|b| !(b.x.is_finite() && b.y.is_finite() && b.w.is_finite() && b.h.is_finite()))
        || logits.iter().any(|z| !z.is_finite())
    {
        return Err(Error::Numerical("non-finite network output".into()));
    }
    let proposals = select_proposals(&final_boxes, &logits, w as f64, h as f64, cfg);
    Ok(CascadeOutput {
        stage_anchors: trace.anchors,
        scores: logits.iter().map(|&z| sigmoid(z)).collect(),
        proposals,
    })
}

/// Labels and samples fixed for one image's loss.
#[derive(Clone, Debug)]
pub struct LossPlan {
    /// Pooled input anchors of each stage.
    pub stage_anchors: Vec<Vec<BBox>>,
    pub assignments: Vec<AssignmentResult>,
    /// Pooled final-stage indices and labels entering the classification loss, sorted.
    pub cls_samples: Vec<(usize, bool)>,
}

pub(crate) fn make_plan<T: Real, R: Rng>(
    trace: &ImageTrace<T>,
    gts: &[BBox],
    cfg: &PipelineConfig,
    rng: &mut R,
) -> LossPlan {
    let stage_anchors: Vec<Vec<BBox>> = trace.anchors[..cfg.num_stages].to_vec();
    let assignments: Vec<AssignmentResult> = stage_anchors
        .iter()
        .zip(&cfg.assignments)
        .map(|(a, c)| assign(a, gts, c))
        .collect();
    let last = assignments.last().expect("at least one stage");
    let mut pos: Vec<usize> = last.positives().collect();
    let neg: Vec<usize> = (0..last.labels.len())
        .filter(|&i| last.labels[i] == Label::Negative)
        .collect();
    let cap = cfg.max_cls_samples;
    if pos.len() > cap / 2 {
        let keep = sample(rng, pos.len(), cap / 2);
        pos = keep.into_iter().map(|k| pos[k]).collect();
    }
    let want = ((pos.len().max(1) as f64) * cfg.neg_ratio).ceil() as usize;
    let n_neg = want.min(neg.len()).min(cap - pos.len());
    let mut cls_samples: Vec<(usize, bool)> = pos.iter().map(|&i| (i, true)).collect();
    cls_samples.extend(
        sample(rng, neg.len(), n_neg)
            .into_iter()
            .map(|k| (neg[k], false)),
    );
    cls_samples.sort_unstable();
    LossPlan {
        stage_anchors,
        assignments,
        cls_samples,
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub reg: Vec<f64>,
    pub cls: f64,
    pub total: f64,
}

/// Gradient of the loss w.r.t. each level's stage outputs: `[level][stage] = (reg, logits)`.
pub(crate) type OutputGrads<T> = Vec<Vec<(Tensor4<T>, Option<Tensor4<T>>)>>;

pub(crate) fn image_loss<T: Real>(
    trace: &ImageTrace<T>,
    plan: &LossPlan,
    gts: &[BBox],
    cfg: &PipelineConfig,
    stats: &[TargetStats],
) -> Result<(LossBreakdown, OutputGrads<T>)> {
    let mut grads: OutputGrads<T> = trace
        .stages
        .iter()
        .map(|lv| {
            lv.iter()
                .map(|s| {
                    (
                        Tensor4::zeros(s.reg.dims()),
                        s.logits.as_ref().map(|l| Tensor4::zeros(l.dims())),
                    )
                })
                .collect()
        })
        .collect();
    let t_last = cfg.num_stages - 1;
    let mut reg_losses = Vec::with_capacity(cfg.num_stages);
    for (t, res) in plan.assignments.iter().enumerate() {
        let pos: Vec<usize> = res.positives().collect();
        let coef = cfg.loss_weights.lambda * cfg.loss_weights.alpha[t] / pos.len().max(1) as f64;
        let std = stats[t].std.to_array();
        let mut sum = 0.0;
        for &i in &pos {
            let gt = &gts[res.matched_gt[i].expect("positive has a match")];
            let anchor = &plan.stage_anchors[t][i];
            let (l, local, pred) = trace.reg_at(t, i);
            let (loss, g) = if t == t_last && cfg.iou_loss {
                let d = denormalize_prediction(&Delta::from_array(pred), &stats[t]);
                let (loss, g_box) = iou_loss(&decode(anchor, &d), gt);
                let jac = decode_jacobian(anchor, &d);
                (loss, [0, 1, 2, 3].map(|k| g_box[k] * jac[k] * std[k]))
            } else {
                let target =
                    normalize_targets(&res.targets[i].expect("positive has a target"), &stats[t]);
                smooth_l1(&Delta::from_array(pred), &target)
            };
            sum += loss;
            let greg = &mut grads[l][t].0;
            for k in 0..4 {
                greg.plane_mut(0, k)[local] += T::lit(coef * g[k]);
            }
        }
        reg_losses.push(sum / pos.len().max(1) as f64);
    }
    let logits = trace.logits();
    let n_cls = plan.cls_samples.len().max(1) as f64;
    let mut cls = 0.0;
    for &(i, label) in &plan.cls_samples {
        let (loss, g) = bce(logits[i], label);
        cls += loss;
        let l = trace.ranges.iter().position(|r| r.contains(&i)).unwrap();
        let local = i - trace.ranges[l].start;
        if let Some(gl) = grads[l][t_last].1.as_mut() {
            gl.plane_mut(0, 0)[local] += T::lit(g / n_cls);
        }
    }
    cls /= n_cls;
    let total = total_loss(&reg_losses, cls, &cfg.loss_weights)?;
    Ok((
        LossBreakdown {
            reg: reg_losses,
            cls,
            total,
        },
        grads,
    ))
}

fn accumulate<T: Real>(dst: &mut ConvParams<T>, g: &ConvGrads<T>) -> Result<()> {
    dst.weight.add_assign(&g.grad_weight)?;
    for (b, &gb) in dst.bias.iter_mut().zip(&g.grad_bias) {
        *b += gb;
    }
    Ok(())
}

/// Parameter gradients given the gradients at the stage outputs.
pub(crate) fn backward<T: Real>(
    model: &Model<T>,
    trace: &ImageTrace<T>,
    out_grads: &OutputGrads<T>,
) -> Result<Model<T>> {
    let mut grads = model.zeros_like();
    let mut block_grads: Vec<Option<Tensor4<T>>> = vec![None; trace.backbone.post.len()];
    for (l, lv) in trace.stages.iter().enumerate() {
        let block = trace.level_blocks[l];
        let feat = &trace.backbone.post[block];
        let mut g_feat = Tensor4::zeros(feat.dims());
        let mut g_rep1 = Tensor4::zeros(lv[0].rep.dims());
        for t in (0..lv.len()).rev() {
            let st = &lv[t];
            let head = &model.heads[t];
            let (g_reg, g_logit) = &out_grads[l][t];
            let gr = conv2d_backward(g_reg, &st.rep, &head.reg)?;
            accumulate(&mut grads.heads[t].reg, &gr)?;
            let mut g_rep = gr.grad_x;
            if let (Some(gl), Some(cls)) = (g_logit, &head.cls) {
                let gc = conv2d_backward(gl, &st.rep, cls)?;
                accumulate(
                    grads.heads[t].cls.as_mut().expect("matching structure"),
                    &gc,
                )?;
                g_rep.add_assign(&gc.grad_x)?;
            }
            if t == 0 {
                g_rep.add_assign(&g_rep1)?;
            }
            let g_pre = relu_backward(&g_rep, &st.pre)?;
            let ga = adaptive_conv_backward(&g_pre, feat, &head.ada, &st.offsets)?;
            accumulate(&mut grads.heads[t].ada, &ga)?;
            g_feat.add_assign(&ga.grad_x)?;
            if let Some(bridge) = &head.bridge {
                let gb = conv2d_backward(&g_pre, &lv[0].rep, bridge)?;
                accumulate(
                    grads.heads[t].bridge.as_mut().expect("matching structure"),
                    &gb,
                )?;
                g_rep1.add_assign(&gb.grad_x)?;
            }
        }
        match &mut block_grads[block] {
            Some(g) => g.add_assign(&g_feat)?,
            slot => *slot = Some(g_feat),
        }
    }
    let bb = &trace.backbone;
    let mut carry: Option<Tensor4<T>> = None;
    for b in (0..bb.post.len()).rev() {
        let mut g = match (carry.take(), block_grads[b].take()) {
            (Some(mut c), Some(x)) => {
                c.add_assign(&x)?;
                c
            }
            (Some(c), None) | (None, Some(c)) => c,
            (None, None) => continue,
        };
        g = relu_backward(&g, &bb.pre[b])?;
        let input = if b == 0 { &bb.input } else { &bb.post[b - 1] };
        let gc = conv2d_backward(&g, input, &model.backbone[b])?;
        accumulate(&mut grads.backbone[b], &gc)?;
        if b > 0 {
            carry = Some(gc.grad_x);
        }
    }
    Ok(grads)
}

/// Loss of one image under a fixed plan, with parameter gradients.
pub(crate) fn loss_and_grad<T: Real>(
    image: &Tensor4<T>,
    gts: &[BBox],
    model: &Model<T>,
    cfg: &PipelineConfig,
    stats: &[TargetStats],
    plan: &LossPlan,
) -> Result<(LossBreakdown, Model<T>)> {
    let trace = trace_image(image, model, cfg, stats, Some(&plan.stage_anchors))?;
    let (loss, out_grads) = image_loss(&trace, plan, gts, cfg, stats)?;
    let grads = backward(model, &trace, &out_grads)?;
    Ok((loss, grads))
}

/// Loss of one image under a fixed plan, without gradients.
pub(crate) fn plan_loss<T: Real>(
    image: &Tensor4<T>,
    gts: &[BBox],
    model: &Model<T>,
    cfg: &PipelineConfig,
    stats: &[TargetStats],
    plan: &LossPlan,
) -> Result<LossBreakdown> {
    let trace = trace_image(image, model, cfg, stats, Some(&plan.stage_anchors))?;
    Ok(image_loss(&trace, plan, gts, cfg, stats)?.0)
}

/// Build the plan from a free forward pass, then evaluate loss and gradients under it.
pub fn train_step_image<T: Real, R: Rng>(
    image: &Tensor4<T>,
    gts: &[BBox],
    model: &Model<T>,
    cfg: &PipelineConfig,
    stats: &[TargetStats],
    rng: &mut R,
) -> Result<(LossBreakdown, Model<T>, LossPlan)> {
    let trace = trace_image(image, model, cfg, stats, None)?;
    let plan = make_plan(&trace, gts, cfg, rng);
    let (loss, out_grads) = image_loss(&trace, &plan, gts, cfg, stats)?;
    let grads = backward(model, &trace, &out_grads)?;
    Ok((loss, grads, plan))
}
