use sgfi::config::PipelineConfig;
use sgfi::data::{render_triplet, scene_for, Split};
use sgfi::losses::{loss_and_grads, FeatureLossPlugin, LossWeights};
use sgfi::model::{Model, TripletSample};
use sgfi::pipeline::{run_stage1, run_stage2, train_baseline};
use sgfi::Error;

fn tiny() -> PipelineConfig {
    PipelineConfig::parse_text(
        "frame_size = 16\ntrain_count = 6\nval_count = 2\nwidths = 4, 6\nhead_width = 4\nepochs = 1\n\
         batch_size = 3\ncrop = none\nsparsify_epochs = 2\nsparsify_p_epochs = 1\nretrain_epochs = 1\n\
         enhance_epochs = 1\npyramid_widths = 2, 3\ngrid_rows = 2\ngrid_cols = 2\ngrid_widths = 4, 6\n\
         enhance_head_width = 4\n",
    )
    .unwrap()
}

fn data(cfg: &PipelineConfig) -> (Vec<TripletSample>, Vec<TripletSample>) {
    let f = |s, n| (0..n).map(|i| render_triplet(&scene_for(&cfg.gen, s, i))).collect();
    (f(Split::Train, cfg.gen.train_count), f(Split::Val, cfg.gen.val_count))
}

#[test]
fn zero_lambda_proximal_run_keeps_the_architecture() {
    let mut cfg = tiny();
    cfg.lambda = 0.0;
    cfg.sparsify_p_epochs = cfg.sparsify_epochs;
    let (train, val) = data(&cfg);
    let (base, _) = train_baseline(&cfg, &train).unwrap();
    let out = run_stage1(&cfg, &base, &train, &val, None).unwrap();
    assert_eq!(out.profile.global_density, 1.0);
    assert_eq!(out.compact_spec, base.spec);
}

#[test]
fn stage1_shrinks_and_stage2_grows() {
    let mut cfg = tiny();
    cfg.sparsify_lr = 0.01;
    cfg.lambda = 0.1;
    cfg.sparsify_epochs = 30;
    cfg.sparsify_p_epochs = 10;
    // wide enough that a moderate density moves the channel ceiling
    cfg.unet.widths = vec![12, 16];
    cfg.unet.head_width = 12;
    let (train, val) = data(&cfg);
    let (base, _) = train_baseline(&cfg, &train).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = run_stage1(&cfg, &base, &train, &val, Some(dir.path())).unwrap();
    assert!(out.compact.param_count() < base.param_count());
    assert!(out.trajectory.records().iter().all(|r| r.psnr.is_some()));
    for f in ["sparse.sgfi", "trajectory.csv", "profile.json", "compact_spec.json", "compact.sgfi"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let (enh, _) = run_stage2(&cfg, &out.compact, &train, Some(dir.path())).unwrap();
    assert!(enh.param_count() > out.compact.param_count());
    assert!(dir.path().join("enhanced.sgfi").exists());

    let ev = loss_and_grads(&enh, &[&train[0]], &LossWeights::default(), &FeatureLossPlugin::disabled()).unwrap();
    for name in ["head.v2.0.weight", "head.v2.1.weight", "head.v2.1.bias"] {
        assert!(ev.grads[name].data().iter().any(|&g| g != 0.0), "{name}");
    }

    // same profile, other strategy
    let mut hi = cfg.clone();
    hi.strategy = sgfi::compressor::Strategy::Max;
    let spec_hi = sgfi::compressor::compress(&out.sparse.spec, &out.profile, hi.strategy).unwrap();
    assert!(spec_hi.param_count() >= out.compact_spec.param_count());
}

#[test]
fn failures_name_their_stage() {
    let cfg = tiny();
    let (train, val) = data(&cfg);
    let (base, _) = train_baseline(&cfg, &train).unwrap();
    // odd-sized frames cannot pass the pooling levels
    let bad: Vec<TripletSample> = train.iter().map(|s| s.crop(0, 0, 15).unwrap()).collect();
    let err = run_stage1(&cfg, &base, &bad, &val, None).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "sparsify", .. }), "{err}");
    assert!(err.to_string().contains("sparsify"));

    let mut wide = cfg.clone();
    wide.enhance.grid_rows = 5;
    let err = run_stage2(&wide, &base, &train, None).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "enhance", .. }), "{err}");
}

#[test]
fn baseline_training_is_deterministic() {
    let cfg = tiny();
    let (train, _) = data(&cfg);
    let (a, la) = train_baseline(&cfg, &train).unwrap();
    let (b, lb) = train_baseline(&cfg, &train).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(la, lb);
    let _: &Model = &a;
}
