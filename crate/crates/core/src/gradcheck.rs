//! Finite-difference verification of every hand-written gradient.
//!
//! Each check draws random instances, evaluates the analytic gradient and
//! compares it with a central difference on a random subset of coordinates.
//! The error measure is `|a − n| / max(|a|, |n|, REL_FLOOR)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assign::{AssignmentConfig, TargetStats};
use crate::error::{Error, Result};
use crate::geometry::{decode, decode_jacobian, BBox, Delta};
use crate::loss::{bce, iou_loss, smooth_l1};
use crate::pipeline::{
    loss_and_grad, plan_loss, train_step_image, LevelConfig, Model, PipelineConfig,
};
use crate::tensor::{
    adaptive_conv, adaptive_conv_backward, conv2d, conv2d_backward, ConvParams, OffsetField,
    Tensor4,
};

pub const OPS: [&str; 7] = [
    "conv2d",
    "adaptive_conv",
    "smooth_l1",
    "iou_loss",
    "bce",
    "decode",
    "pipeline",
];
pub const OP_TOLERANCE: f64 = 1e-4;
pub const PIPELINE_TOLERANCE: f64 = 1e-3;
const REL_FLOOR: f64 = 1e-6;
/// The pipeline loss is O(10), so its difference quotients carry proportionally more roundoff.
const PIPELINE_REL_FLOOR: f64 = 1e-4;
/// Coordinates sampled per tensor per instance.
const COORDS_PER_TENSOR: usize = 16;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub instances: usize,
    pub seed: u64,
    /// Name of an op whose analytic gradient is deliberately scaled, to exercise failure reporting.
    pub perturb: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            instances: 50,
            seed: 0,
            perturb: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub instances: usize,
    pub coords: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

struct Acc {
    max: f64,
    coords: usize,
    scale: f64,
    floor: f64,
}

impl Acc {
    fn push(&mut self, analytic: f64, numeric: f64) {
        let e = rel_err(analytic * self.scale, numeric, self.floor);
        self.max = if e.is_nan() {
            f64::INFINITY
        } else {
            self.max.max(e)
        };
        self.coords += 1;
    }

    /// Compare `analytic[i]` against a central difference of `f` for sampled `i`.
    fn check(
        &mut self,
        rng: &mut ChaCha8Rng,
        analytic: &[f64],
        eps: f64,
        mut f: impl FnMut(usize, f64) -> f64,
    ) {
        for i in sample_coords(rng, analytic.len()) {
            let numeric = (f(i, eps) - f(i, -eps)) / (2.0 * eps);
            self.push(analytic[i], numeric);
        }
    }
}

fn sample_coords(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    if n <= COORDS_PER_TENSOR {
        (0..n).collect()
    } else {
        rand::seq::index::sample(rng, n, COORDS_PER_TENSOR).into_vec()
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor4<f64> {
    Tensor4::from_fn(dims, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

fn rand_conv(
    rng: &mut ChaCha8Rng,
    out_c: usize,
    in_c: usize,
    k: usize,
    stride: usize,
    dil: usize,
) -> ConvParams<f64> {
    let w = rand_tensor(rng, [out_c, in_c, k, k]);
    let b = (0..out_c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    ConvParams::new(w, b, stride, dil).expect("valid random conv")
}

fn dot(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn with_coord<T: Clone>(v: &T, i: usize, d: f64, get: impl Fn(&mut T) -> &mut [f64]) -> T {
    let mut c = v.clone();
    get(&mut c)[i] += d;
    c
}

fn check_conv(rng: &mut ChaCha8Rng, acc: &mut Acc, adaptive: bool) -> Result<()> {
    let n = rng.gen_range(1..=2);
    let (in_c, out_c) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    let (h, w) = (rng.gen_range(3..=7), rng.gen_range(3..=7));
    let k = if rng.gen_bool(0.7) { 3 } else { 1 };
    let stride = if adaptive { 1 } else { rng.gen_range(1..=2) };
    let dil = rng.gen_range(1..=2);
    let x = rand_tensor(rng, [n, in_c, h, w]);
    let p = rand_conv(rng, out_c, in_c, k, stride, dil);
    let mut off = OffsetField::zeros(h, w, (k, k));
    for y in 0..h {
        for xx in 0..w {
            for t in 0..k * k {
                off.set(y, xx, t, rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            }
        }
    }
    let fwd = |x: &Tensor4<f64>, p: &ConvParams<f64>| -> Result<Tensor4<f64>> {
        if adaptive {
            adaptive_conv(x, p, &off)
        } else {
            conv2d(x, p)
        }
    };
    let y = fwd(&x, &p)?;
    let r = rand_tensor(rng, y.dims());
    let g = if adaptive {
        adaptive_conv_backward(&r, &x, &p, &off)?
    } else {
        conv2d_backward(&r, &x, &p)?
    };
    let eps = 1e-5;
    let loss =
        |x: &Tensor4<f64>, p: &ConvParams<f64>| fwd(x, p).map(|y| dot(&y, &r)).unwrap_or(f64::NAN);
    acc.check(rng, g.grad_x.data(), eps, |i, d| {
        loss(&with_coord(&x, i, d, |t| t.data_mut()), &p)
    });
    acc.check(rng, g.grad_weight.data(), eps, |i, d| {
        loss(&x, &with_coord(&p, i, d, |q| q.weight.data_mut()))
    });
    acc.check(rng, &g.grad_bias, eps, |i, d| {
        loss(&x, &with_coord(&p, i, d, |q| q.bias.as_mut_slice()))
    });
    Ok(())
}

fn rand_delta(rng: &mut ChaCha8Rng, r: f64) -> Delta {
    Delta::from_array([0; 4].map(|_| rng.gen_range(-r..r)))
}

fn check_smooth_l1(rng: &mut ChaCha8Rng, acc: &mut Acc) {
    let target = rand_delta(rng, 2.0);
    let pred = loop {
        let p = rand_delta(rng, 3.0);
        let safe = p
            .to_array()
            .iter()
            .zip(target.to_array())
            .all(|(a, b)| ((a - b).abs() - 1.0).abs() > 1e-3);
        if safe {
            break p;
        }
    };
    let (_, g) = smooth_l1(&pred, &target);
    let pa = pred.to_array();
    acc.check(rng, &g, 1e-5, |i, d| {
        let mut q = pa;
        q[i] += d;
        smooth_l1(&Delta::from_array(q), &target).0
    });
}

fn rand_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox::new(
        rng.gen_range(5.0..15.0),
        rng.gen_range(5.0..15.0),
        rng.gen_range(2.0..10.0),
        rng.gen_range(2.0..10.0),
    )
    .expect("valid")
}

fn check_iou_loss(rng: &mut ChaCha8Rng, acc: &mut Acc) {
    let (pred, gt) = loop {
        let (p, g) = (rand_box(rng), rand_box(rng));
        let (a, b) = (p.corners(), g.corners());
        let apart = [a.0 - b.0, a.1 - b.1, a.2 - b.2, a.3 - b.3]
            .iter()
            .all(|d| d.abs() > 1e-3);
        if apart && crate::geometry::iou(&p, &g) > 0.05 {
            break (p, g);
        }
    };
    let (_, g) = iou_loss(&pred, &gt);
    let pa = [pred.x, pred.y, pred.w, pred.h];
    acc.check(rng, &g, 1e-5, |i, d| {
        let mut q = pa;
        q[i] += d;
        iou_loss(
            &BBox {
                x: q[0],
                y: q[1],
                w: q[2],
                h: q[3],
            },
            &gt,
        )
        .0
    });
}

fn check_bce(rng: &mut ChaCha8Rng, acc: &mut Acc) {
    let z = rng.gen_range(-10.0..10.0);
    let y = rng.gen_bool(0.5);
    let (_, g) = bce(z, y);
    acc.check(rng, &[g], 1e-5, |_, d| bce(z + d, y).0);
}

/// `decode` against its Jacobian, contracted with a random covector.
fn check_decode(rng: &mut ChaCha8Rng, acc: &mut Acc) {
    let a = rand_box(rng);
    let delta = rand_delta(rng, 1.5);
    let r: [f64; 4] = [0; 4].map(|_| rng.gen_range(-1.0..1.0));
    let jac = decode_jacobian(&a, &delta);
    let g: Vec<f64> = (0..4).map(|k| r[k] * jac[k]).collect();
    let da = delta.to_array();
    acc.check(rng, &g, 1e-5, |i, d| {
        let mut q = da;
        q[i] += d;
        let b = decode(&a, &Delta::from_array(q));
        r[0] * b.x + r[1] * b.y + r[2] * b.w + r[3] * b.h
    });
}

/// Two-stage, single-level cascade on an 8×8 image.
pub fn tiny_pipeline_config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        levels: vec![LevelConfig {
            stride: 2,
            base_size: 4.0,
        }],
        backbone_channels: vec![3],
        backbone_strides: vec![2],
        head_channels: 4,
        seed,
        ..PipelineConfig::default()
    };
    cfg.assignments = vec![
        AssignmentConfig::anchor_free(0.2, 0.5),
        AssignmentConfig::anchor_based(0.5, 0.3),
    ];
    cfg
}

fn check_pipeline(rng: &mut ChaCha8Rng, acc: &mut Acc) -> Result<()> {
    let cfg = tiny_pipeline_config(rng.gen());
    let mut model: Model<f64> = Model::<f32>::init(&cfg)?.cast();
    // zero biases over all-zero windows would sit exactly on a ReLU kink
    for (name, p) in model.param_specs().into_iter().zip(model.params_mut()) {
        if name.0.ends_with(".bias") {
            p.iter_mut().for_each(|b| *b = rng.gen_range(-0.2..0.2));
        }
    }
    let image = Tensor4::from_fn([1, 3, 8, 8], |_, _, _, _| rng.gen_range(0.0..1.0));
    let gts: Vec<BBox> = (0..rng.gen_range(1..=2))
        .map(|_| {
            let cx = 1.0 + 2.0 * rng.gen_range(0..4) as f64 + rng.gen_range(-0.3..0.3);
            let cy = 1.0 + 2.0 * rng.gen_range(0..4) as f64 + rng.gen_range(-0.3..0.3);
            BBox::new(cx, cy, rng.gen_range(3.0..7.0), rng.gen_range(3.0..7.0)).expect("valid")
        })
        .collect();
    let stats: Vec<TargetStats> = (0..2)
        .map(|_| TargetStats {
            mean: rand_delta(rng, 0.2),
            std: Delta::from_array([0; 4].map(|_| rng.gen_range(0.3..1.5))),
        })
        .collect();
    let (_, _, plan) = train_step_image(&image, &gts, &model, &cfg, &stats, rng)?;
    let (_, grads) = loss_and_grad(&image, &gts, &model, &cfg, &stats, &plan)?;
    let n_tensors = model.params().len();
    for s in 0..n_tensors {
        let analytic = grads.params()[s].to_vec();
        acc.check(rng, &analytic, 1e-5, |i, d| {
            let mut m = model.clone();
            m.params_mut()[s][i] += d;
            plan_loss(&image, &gts, &m, &cfg, &stats, &plan).map_or(f64::NAN, |l| l.total)
        });
    }
    Ok(())
}

pub fn check_op(op: &str, opts: &GradcheckOptions) -> Result<OpReport> {
    let idx = OPS
        .iter()
        .position(|o| *o == op)
        .ok_or_else(|| Error::config("op", format!("unknown gradient check {op:?}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(idx as u64);
    let scale = if opts.perturb.as_deref() == Some(op) {
        1.01
    } else {
        1.0
    };
    let mut acc = Acc {
        max: 0.0,
        coords: 0,
        scale,
        floor: if op == "pipeline" {
            PIPELINE_REL_FLOOR
        } else {
            REL_FLOOR
        },
    };
    for _ in 0..opts.instances {
        match op {
            "conv2d" => check_conv(&mut rng, &mut acc, false)?,
            "adaptive_conv" => check_conv(&mut rng, &mut acc, true)?,
            "smooth_l1" => check_smooth_l1(&mut rng, &mut acc),
            "iou_loss" => check_iou_loss(&mut rng, &mut acc),
            "bce" => check_bce(&mut rng, &mut acc),
            "decode" => check_decode(&mut rng, &mut acc),
            _ => check_pipeline(&mut rng, &mut acc)?,
        }
    }
    Ok(OpReport {
        op: OPS[idx],
        instances: opts.instances,
        coords: acc.coords,
        max_rel_err: acc.max,
        tolerance: if op == "pipeline" {
            PIPELINE_TOLERANCE
        } else {
            OP_TOLERANCE
        },
    })
}

pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<Vec<OpReport>> {
    if let Some(p) = &opts.perturb {
        if !OPS.contains(&p.as_str()) {
            return Err(Error::config("perturb", format!("unknown op {p:?}")));
        }
    }
    OPS.iter().map(|op| check_op(op, opts)).collect()
}
