use crpn_core::assign::TargetStats;
use crpn_core::geometry::{anchor_offsets, decode, Delta};
use crpn_core::pipeline::checkpoint::{load_state, save_state};
use crpn_core::pipeline::{
    extract_features, forward_cascade, initial_levels, run_stage, train, LevelConfig, Model, PipelineConfig,
    Schedule, Trainer,
};
use crpn_core::synth::{generate, DatasetSpec, Scene};
use crpn_core::tensor::{conv2d, ConvParams, OffsetField, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(seed: u64, c: usize, h: usize, w: usize) -> Tensor4<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_fn([1, c, h, w], |_, _, _, _| rng.gen_range(0.0..1.0))
}

fn scenes(n: usize, seed: u64) -> Vec<Scene> {
    generate(&DatasetSpec {
        num_scenes: n,
        seed,
        ..DatasetSpec::default()
    })
    .unwrap()
}

fn small_cfg(epochs: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        val_scenes: 4,
        ..PipelineConfig::default()
    };
    cfg.schedule = Schedule {
        epochs,
        batch_size: 4,
        decay_epochs: Schedule::default_decay(epochs),
        warmup_iters: 2,
        ..Schedule::default()
    };
    cfg
}

fn stats(cfg: &PipelineConfig) -> Vec<TargetStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    (0..cfg.num_stages)
        .map(|_| {
            let mut d = || Delta::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
            let (mean, s) = (d(), d());
            TargetStats {
                mean,
                std: Delta::new(0.1 + s.dx.abs(), 0.1 + s.dy.abs(), 0.2 + s.dw.abs(), 0.2 + s.dh.abs()),
            }
        })
        .collect()
}

#[test]
fn feature_maps_follow_level_strides() {
    let cfg = PipelineConfig {
        levels: vec![
            LevelConfig { stride: 8, base_size: 32.0 },
            LevelConfig { stride: 16, base_size: 64.0 },
        ],
        backbone_channels: vec![4, 8, 8, 8],
        backbone_strides: vec![2, 2, 2, 2],
        ..PipelineConfig::default()
    };
    let model = Model::<f32>::init(&cfg).unwrap();
    let feats = extract_features(&random_image(0, 3, 64, 64), &model, &cfg).unwrap();
    assert_eq!(feats.iter().map(|f| f.dims()).collect::<Vec<_>>(), vec![[1, 8, 8, 8], [1, 8, 4, 4]]);

    let default = PipelineConfig::default();
    let model = Model::<f32>::init(&default).unwrap();
    let feats = extract_features(&random_image(0, 3, 64, 64), &model, &default).unwrap();
    assert_eq!(feats[0].dims(), [1, 16, 16, 16]);
    assert_eq!(feats[1].dims(), [1, 16, 8, 8]);
    assert!(extract_features(&random_image(0, 3, 60, 64), &model, &default).is_err());
}

#[test]
fn zero_image_gives_zero_features() {
    let cfg = PipelineConfig::default();
    let model = Model::<f32>::init(&cfg).unwrap();
    assert!(model.backbone.iter().all(|c| c.bias.iter().all(|&b| b == 0.0)));
    let feats = extract_features(&Tensor4::zeros([1, 3, 64, 64]), &model, &cfg).unwrap();
    assert!(feats.iter().all(|f| f.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn features_are_deterministic() {
    let cfg = PipelineConfig::default();
    let img = random_image(5, 3, 64, 64);
    let a = extract_features(&img, &Model::<f32>::init(&cfg).unwrap(), &cfg).unwrap();
    let b = extract_features(&img, &Model::<f32>::init(&cfg).unwrap(), &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_weight_head_predicts_the_mean() {
    let cfg = PipelineConfig::default();
    let mut model = Model::<f32>::init(&cfg).unwrap();
    model.heads[0].reg = ConvParams::zeros(4, cfg.head_channels, (1, 1), 1, 1).unwrap();
    let st = stats(&cfg);
    let feats = extract_features(&random_image(1, 3, 64, 64), &model, &cfg).unwrap();
    let levels = initial_levels(&cfg, 64, 64).unwrap();
    let out = run_stage(&feats[0], None, &levels[0], &levels[0], &model.heads[0], &st[0]).unwrap();
    // the mean survives the f32 round trip through the network output
    let m = st[0].mean;
    for (d, a) in out.deltas.iter().zip(&levels[0].anchors) {
        for (p, q) in d.to_array().iter().zip(m.to_array()) {
            assert!((p - q).abs() < 1e-12, "{d:?} vs {m:?}");
        }
        let want = decode(a, &m);
        let got = out.refined[out.deltas.iter().position(|x| std::ptr::eq(x, d)).unwrap()];
        assert!((got.x - want.x).abs() < 1e-9 && (got.w - want.w).abs() < 1e-9);
    }
}

#[test]
fn first_stage_samples_a_dilated_grid() {
    let cfg = PipelineConfig::default();
    let model = Model::<f32>::init(&cfg).unwrap();
    let feats = extract_features(&random_image(2, 3, 64, 64), &model, &cfg).unwrap();
    let levels = initial_levels(&cfg, 64, 64).unwrap();
    let st = stats(&cfg);
    for (feat, level) in feats.iter().zip(&levels) {
        let out = run_stage(feat, None, level, level, &model.heads[0], &st[0]).unwrap();
        // base size = 4 strides, so a 3×3 kernel spreads over 2-cell spacing
        let (h, w) = level.grid;
        let grid = OffsetField::dilated_grid(h, w, (3, 3), 2);
        for (a, b) in out.offsets.as_slice().iter().zip(grid.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut dilated = model.heads[0].ada.clone();
        dilated.dilation = 2;
        let want = conv2d(feat, &dilated).unwrap();
        let max = out.pre.data().iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(max < 1e-5, "{max}");
    }
}

#[test]
fn every_stage_samples_at_its_input_anchors() {
    let mut cfg = PipelineConfig::default();
    cfg.set_stages(3, cfg.metric);
    let model = Model::<f32>::init(&cfg).unwrap();
    let st = stats(&cfg);
    let img = random_image(3, 3, 64, 64);
    let feats = extract_features(&img, &model, &cfg).unwrap();
    let levels = initial_levels(&cfg, 64, 64).unwrap();
    let cascade = forward_cascade(&img, &model, &cfg, &st).unwrap();
    let mut start = 0;
    for (feat, level) in feats.iter().zip(&levels) {
        let mut input = level.clone();
        let mut first_rep = None;
        for t in 0..cfg.num_stages {
            let out = run_stage(feat, first_rep.as_ref(), &input, &input, &model.heads[t], &st[t]).unwrap();
            assert_eq!(out.offsets, anchor_offsets(&input, (3, 3)), "stage {t}");
            let range = start..start + level.len();
            assert_eq!(&cascade.stage_anchors[t][range.clone()], input.anchors.as_slice());
            assert_eq!(&cascade.stage_anchors[t + 1][range], out.refined.as_slice());
            if t == 0 {
                first_rep = Some(out.rep.clone());
            }
            input = input.with_anchors(out.refined).unwrap();
        }
        start += level.len();
    }
}

#[test]
fn unaligned_stages_keep_sampling_the_initial_grid() {
    let cfg = PipelineConfig {
        align: false,
        ..PipelineConfig::default()
    };
    let model = Model::<f32>::init(&cfg).unwrap();
    let st = stats(&cfg);
    let img = random_image(4, 3, 64, 64);
    let feats = extract_features(&img, &model, &cfg).unwrap();
    let levels = initial_levels(&cfg, 64, 64).unwrap();
    let cascade = forward_cascade(&img, &model, &cfg, &st).unwrap();
    let s1 = run_stage(&feats[0], None, &levels[0], &levels[0], &model.heads[0], &st[0]).unwrap();
    let moved = levels[0].with_anchors(s1.refined.clone()).unwrap();
    let s2 = run_stage(&feats[0], Some(&s1.rep), &moved, &levels[0], &model.heads[1], &st[1]).unwrap();
    assert_eq!(s2.offsets, anchor_offsets(&levels[0], (3, 3)));
    assert_eq!(&cascade.stage_anchors[2][..levels[0].len()], s2.refined.as_slice());
}

#[test]
fn single_cell_grid_matches_scalar_oracle() {
    let cfg = PipelineConfig {
        levels: vec![LevelConfig { stride: 8, base_size: 16.0 }],
        backbone_channels: vec![2, 3, 3],
        head_channels: 5,
        ..PipelineConfig::default()
    };
    let mut model = Model::<f64>::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for p in model.params_mut() {
        p.iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
    }
    let st = stats(&cfg);
    let feat = Tensor4::<f64>::from_fn([1, 3, 1, 1], |_, c, _, _| 0.3 + c as f64 * 0.2);
    let levels = initial_levels(&cfg, 8, 8).unwrap();
    assert_eq!(levels[0].grid, (1, 1));
    let out = run_stage(&feat, None, &levels[0], &levels[0], &model.heads[0], &st[0]).unwrap();

    // only the centre tap lands inside a 1×1 map
    let head = &model.heads[0];
    let rep: Vec<f64> = (0..5)
        .map(|o| {
            let s = head.ada.bias[o] + (0..3).map(|c| head.ada.weight.at(o, c, 1, 1) * feat.at(0, c, 0, 0)).sum::<f64>();
            s.max(0.0)
        })
        .collect();
    let raw: Vec<f64> = (0..4)
        .map(|o| head.reg.bias[o] + (0..5).map(|c| head.reg.weight.at(o, c, 0, 0) * rep[c]).sum::<f64>())
        .collect();
    let (m, s) = (st[0].mean.to_array(), st[0].std.to_array());
    let d = Delta::from_array(std::array::from_fn(|i| raw[i] * s[i] + m[i]));
    let want = decode(&levels[0].anchors[0], &d);
    let got = out.refined[0];
    for (a, b) in [(got.x, want.x), (got.y, want.y), (got.w, want.w), (got.h, want.h)] {
        assert!((a - b).abs() < 1e-12, "{got:?} vs {want:?}");
    }
}

#[test]
fn proposals_are_bounded_sorted_and_clipped() {
    for stages in [1, 2] {
        let mut cfg = PipelineConfig {
            max_proposals: 30,
            ..PipelineConfig::default()
        };
        cfg.set_stages(stages, cfg.metric);
        let model = Model::<f32>::init(&cfg).unwrap();
        let out = forward_cascade(&random_image(6, 3, 64, 64), &model, &cfg, &stats(&cfg)).unwrap();
        assert_eq!(out.stage_anchors.len(), stages + 1);
        assert!(!out.proposals.is_empty() && out.proposals.len() <= 30);
        for w in out.proposals.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
        for p in &out.proposals {
            let (x1, y1, x2, y2) = p.bbox.corners();
            assert!(x1 >= -1e-9 && y1 >= -1e-9 && x2 <= 64.0 + 1e-9 && y2 <= 64.0 + 1e-9);
        }
        for (i, a) in out.proposals.iter().enumerate() {
            for b in &out.proposals[i + 1..] {
                assert!(crpn_core::geometry::iou(&a.bbox, &b.bbox) <= cfg.nms_threshold);
            }
        }
    }
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let data = scenes(12, 1);
    let mut cfg = small_cfg(1);
    cfg.schedule.base_lr = 0.0;
    let trainer = Trainer::new(&cfg, &data, 1).unwrap();
    let mut state = trainer.init_state().unwrap();
    let before = state.model.clone();
    trainer.run_epoch(&mut state).unwrap();
    assert_eq!(state.model, before);
    assert_eq!(state.epoch, 1);
}

#[test]
fn thread_count_does_not_change_training() {
    let data = scenes(16, 2);
    let cfg = small_cfg(2);
    let (a, ma) = train(&data, &cfg, 1).unwrap();
    let (b, mb) = train(&data, &cfg, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(ma, mb);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let data = scenes(12, 3);
    let cfg = small_cfg(3);
    let (full, full_metrics) = train(&data, &cfg, 1).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    let trainer = Trainer::new(&cfg, &data, 2).unwrap();
    let mut state = trainer.init_state().unwrap();
    let mut metrics = trainer.run(&mut state, Some(1), |_, _| Ok(())).unwrap();
    save_state(&state, &path).unwrap();
    let mut resumed = load_state(&path, &cfg).unwrap();
    metrics.extend(trainer.run(&mut resumed, None, |_, _| Ok(())).unwrap());
    assert_eq!(resumed, full);
    assert_eq!(metrics, full_metrics);
}

#[test]
fn single_image_overfits() {
    let data = scenes(2, 4);
    let mut cfg = PipelineConfig {
        val_scenes: 1,
        flip: false,
        // every negative enters the loss, so successive losses see the same samples
        max_cls_samples: 1024,
        neg_ratio: 1024.0,
        ..PipelineConfig::default()
    };
    cfg.schedule = Schedule {
        epochs: 40,
        batch_size: 1,
        base_lr: 0.16,
        momentum: 0.0,
        decay_epochs: vec![],
        warmup_iters: 0,
        ..Schedule::default()
    };
    let (_, metrics) = train(&data, &cfg, 1).unwrap();
    let losses: Vec<f64> = metrics.iter().map(|m| m.total).collect();
    let drops = losses.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(drops * 10 >= (losses.len() - 1) * 9, "{losses:?}");
    assert!(losses.last().unwrap() < &(0.5 * losses[0]), "{losses:?}");
}

#[test]
fn trained_model_scores_empty_scenes_low() {
    let data = scenes(68, 5);
    let mut cfg = small_cfg(25);
    cfg.schedule.batch_size = 6;
    cfg.schedule.base_lr = 0.02 * 16.0 / 6.0;
    let (state, _) = train(&data, &cfg, 1).unwrap();
    let empty = generate(&DatasetSpec {
        num_scenes: 8,
        min_objects: 0,
        max_objects: 0,
        seed: 99,
        ..DatasetSpec::default()
    })
    .unwrap();
    let mut total = 0.0;
    let mut n = 0;
    for s in &empty {
        assert!(s.gts.is_empty());
        let out = forward_cascade(&s.image, &state.model, &cfg, &state.stats).unwrap();
        total += out.proposals.iter().map(|p| p.score).sum::<f64>();
        n += out.proposals.len();
    }
    let mean = total / n as f64;
    assert!(mean < 0.5, "{mean}");
}
