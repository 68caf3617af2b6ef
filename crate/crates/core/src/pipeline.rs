//! Training, evaluation and the two-stage compress-then-enhance pipeline.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{baseline_spec, ArchSpec, EnhanceConfig};
use crate::checkpoint::{save_checkpoint, Metadata};
use crate::compressor::{compress, profile_density, rebuild_model, DensityProfile};
use crate::config::{PipelineConfig, TrainSettings};
use crate::error::{Error, Result};
use crate::losses::{loss_and_grads, FeatureLossPlugin, LossWeights};
use crate::metrics::{psnr, ssim};
use crate::model::{Model, TripletSample};
use crate::sparse_opt::{
    epoch_batches, lr_schedule, sparsify, AdaMax, DensityTrajectory, ObproxSchedule, SparsifyProblem,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub index: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// Quality of a predictor over a set of triplets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: Vec<SampleScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub params: usize,
    pub seconds_per_frame: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Score `predict` on every sample against its middle frame.
pub fn evaluate_with(
    samples: &[TripletSample],
    params: usize,
    mut predict: impl FnMut(&TripletSample) -> Result<Tensor>,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    let start = Instant::now();
    let mut scores = Vec::with_capacity(samples.len());
    for (index, s) in samples.iter().enumerate() {
        let out = predict(s)?.map(|v| v.clamp(0.0, 1.0));
        scores.push(SampleScore {
            index,
            psnr: psnr(&out, &s.gt, 1.0)?,
            ssim: ssim(&out, &s.gt)?,
        });
    }
    let n = scores.len() as f64;
    Ok(EvalReport {
        mean_psnr: scores.iter().map(|s| s.psnr).sum::<f64>() / n,
        mean_ssim: scores.iter().map(|s| s.ssim).sum::<f64>() / n,
        samples: scores,
        params,
        seconds_per_frame: start.elapsed().as_secs_f64() / n,
    })
}

pub fn evaluate(model: &Model, samples: &[TripletSample]) -> Result<EvalReport> {
    evaluate_with(samples, model.param_count(), |s| Ok(model.infer(&s.i0, &s.i1)?.i_final))
}

/// The trivial predictor that repeats the first frame.
pub fn evaluate_repeat_first(samples: &[TripletSample]) -> Result<EvalReport> {
    evaluate_with(samples, 0, |s| Ok(s.i0.clone()))
}

/// Mean PSNR only; used for per-epoch validation.
pub fn mean_psnr(model: &Model, samples: &[TripletSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let out = model.infer(&s.i0, &s.i1)?.i_final.map(|v| v.clamp(0.0, 1.0));
        total += psnr(&out, &s.gt, 1.0)?;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Random square crops, aligned so the model's pooling stays exact.
struct Cropper {
    rng: ChaCha8Rng,
    size: Option<usize>,
}

impl Cropper {
    fn new(seed: u64, size: Option<usize>, model: &Model, frame: (usize, usize)) -> Result<Self> {
        if let Some(c) = size {
            let m = model.size_multiple();
            if c % m != 0 || c > frame.0.min(frame.1) {
                return Err(Error::Config(format!(
                    "crop {c} must be a multiple of {m} and fit in {}×{}",
                    frame.0, frame.1
                )));
            }
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            size,
        })
    }

    fn apply(&mut self, s: &TripletSample) -> Result<TripletSample> {
        match self.size {
            None => Ok(s.clone()),
            Some(c) => {
                let (h, w) = s.dims();
                let y = self.rng.gen_range(0..=h - c);
                let x = self.rng.gen_range(0..=w - c);
                s.crop(y, x, c)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub skipped_batches: usize,
}

/// AdaMax training of every parameter of `model`.
pub fn train_model(
    model: &mut Model,
    data: &[TripletSample],
    settings: &TrainSettings,
    weights: &LossWeights,
    plugin: &FeatureLossPlugin,
    seed: u64,
) -> Result<Vec<EpochLog>> {
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let mut cropper = Cropper::new(seed ^ 0xC0FF_EE00, settings.crop, model, data[0].dims())?;
    let mut opt = AdaMax::default();
    let mut log = Vec::with_capacity(settings.epochs);
    for epoch in 0..settings.epochs {
        let lr = match settings.lr_halve_every {
            Some(p) => lr_schedule(settings.lr, epoch, p),
            None => settings.lr,
        };
        let (mut sum, mut count, mut skipped) = (0.0, 0usize, 0usize);
        for batch in epoch_batches(data.len(), settings.batch_size, seed, epoch) {
            let crops = batch
                .iter()
                .map(|&i| cropper.apply(&data[i]))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&TripletSample> = crops.iter().collect();
            let ev = match loss_and_grads(model, &refs, weights, plugin) {
                Ok(ev) if ev.grads.values().all(Tensor::is_finite) => ev,
                Ok(_) | Err(Error::NonFinite { .. }) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            opt.update(&mut model.params, &ev.grads, lr)?;
            sum += ev.loss;
            count += 1;
        }
        log.push(EpochLog {
            epoch: epoch + 1,
            loss: if count > 0 { sum / count as f64 } else { f64::NAN },
            lr,
            skipped_batches: skipped,
        });
    }
    Ok(log)
}

fn plugin_for(cfg: &PipelineConfig, enabled: bool) -> FeatureLossPlugin {
    if enabled {
        FeatureLossPlugin::random(cfg.seed ^ 0xFEA7)
    } else {
        FeatureLossPlugin::disabled()
    }
}

pub fn baseline_arch(cfg: &PipelineConfig) -> Result<ArchSpec> {
    baseline_spec(&cfg.unet, &cfg.adacof)
}

/// Initialise and train the baseline model.
pub fn train_baseline(cfg: &PipelineConfig, train: &[TripletSample]) -> Result<(Model, Vec<EpochLog>)> {
    let mut model = Model::init(baseline_arch(cfg)?, cfg.adacof, cfg.seed)?;
    let log = train_model(
        &mut model,
        train,
        &cfg.train,
        &cfg.loss,
        &plugin_for(cfg, cfg.feature_loss),
        cfg.seed,
    )?;
    Ok((model, log))
}

/// l1-regularised fine-tuning of `model`; returns the sparse model and the
/// per-epoch density log (validation PSNR included when `val` is non-empty).
pub fn sparsify_model(
    cfg: &PipelineConfig,
    model: &Model,
    train: &[TripletSample],
    val: &[TripletSample],
) -> Result<(Model, DensityTrajectory)> {
    let subset = match cfg.sparsify_subset {
        0 => train,
        n => &train[..n.min(train.len())],
    };
    if subset.is_empty() {
        return Err(Error::Dataset("sparsification set is empty".into()));
    }
    let weights = LossWeights {
        lambda_vgg: if cfg.sparsify_feature_loss { cfg.loss.lambda_vgg } else { 0.0 },
        ..cfg.loss
    };
    let plugin = plugin_for(cfg, cfg.sparsify_feature_loss && cfg.feature_loss);
    let mut cropper = Cropper::new(cfg.seed ^ 0x5EED_5A5E, cfg.train.crop, model, subset[0].dims())?;
    let template = model.clone();
    let objective = move |params: &crate::sparse_opt::ParamStore, batch: &[&TripletSample]| {
        let crops = batch.iter().map(|s| cropper.apply(s)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&TripletSample> = crops.iter().collect();
        let m = Model {
            spec: template.spec.clone(),
            params: params.clone(),
            adacof: template.adacof,
        };
        loss_and_grads(&m, &refs, &weights, &plugin)
    };
    let regularized: BTreeSet<String> = model.spec.weight_names().into_iter().collect();
    let mut problem = SparsifyProblem::new(model.params.clone(), regularized, cfg.lambda, objective)?;
    let schedule = ObproxSchedule {
        total_epochs: cfg.sparsify_epochs,
        p_step_epochs: cfg.sparsify_p_epochs,
        lr: cfg.sparsify_lr,
        lr_decay: None,
        batch_size: cfg.train.batch_size,
        seed: cfg.seed,
    };
    let spec = model.spec.clone();
    let adacof = model.adacof;
    let mut validate = |p: &crate::sparse_opt::ParamStore| -> Result<f64> {
        let m = Model {
            spec: spec.clone(),
            params: p.clone(),
            adacof,
        };
        mean_psnr(&m, val)
    };
    let traj = if val.is_empty() {
        sparsify(&mut problem, &schedule, subset, None)?
    } else {
        sparsify(&mut problem, &schedule, subset, Some(&mut validate))?
    };
    let sparse = Model::new(model.spec.clone(), problem.params, model.adacof)?;
    Ok((sparse, traj))
}

/// Everything stage 1 produces.
#[derive(Clone, Debug)]
pub struct Stage1Output {
    pub sparse: Model,
    pub trajectory: DensityTrajectory,
    pub profile: DensityProfile,
    pub compact_spec: ArchSpec,
    pub compact: Model,
    pub retrain_log: Vec<EpochLog>,
}

fn meta(cfg: &PipelineConfig, epoch: usize, optimizer: &str, stage: &str) -> Metadata {
    Metadata {
        epoch,
        optimizer: optimizer.into(),
        seed: cfg.seed,
        stage: stage.into(),
    }
}

/// Sparsify, profile, rewrite, rebuild and retrain. Artifacts are written
/// to `out_dir` when given.
pub fn run_stage1(
    cfg: &PipelineConfig,
    baseline: &Model,
    train: &[TripletSample],
    val: &[TripletSample],
    out_dir: Option<&Path>,
) -> Result<Stage1Output> {
    if let Some(d) = out_dir {
        fs::create_dir_all(d)?;
    }
    let (sparse, trajectory) = sparsify_model(cfg, baseline, train, val).map_err(|e| e.in_stage("sparsify"))?;
    let profile = profile_density(&sparse.spec, &sparse.params).map_err(|e| e.in_stage("profile"))?;
    let compact_spec = compress(&sparse.spec, &profile, cfg.strategy).map_err(|e| e.in_stage("reconstruct"))?;
    if let Some(d) = out_dir {
        save_checkpoint(&d.join("sparse.sgfi"), &sparse, &meta(cfg, cfg.sparsify_epochs, "obprox", "sparsify"))?;
        fs::write(d.join("trajectory.csv"), trajectory.to_csv())?;
        fs::write(d.join("profile.json"), profile.to_json()?)?;
        fs::write(d.join("compact_spec.json"), compact_spec.to_json()?)?;
    }
    let params = rebuild_model(&compact_spec, cfg.seed.wrapping_add(1)).map_err(|e| e.in_stage("reconstruct"))?;
    let mut compact = Model::new(compact_spec.clone(), params, baseline.adacof)?;
    let settings = TrainSettings {
        epochs: cfg.retrain_epochs,
        ..cfg.train.clone()
    };
    let retrain_log = train_model(
        &mut compact,
        train,
        &settings,
        &cfg.loss,
        &plugin_for(cfg, cfg.feature_loss),
        cfg.seed.wrapping_add(1),
    )
    .map_err(|e| e.in_stage("retrain"))?;
    if let Some(d) = out_dir {
        save_checkpoint(&d.join("compact.sgfi"), &compact, &meta(cfg, cfg.retrain_epochs, "adamax", "retrain"))?;
    }
    Ok(Stage1Output {
        sparse,
        trajectory,
        profile,
        compact_spec,
        compact,
        retrain_log,
    })
}

/// Attach the enhancement modules to `compact` and train the result.
pub fn run_stage2_with(
    cfg: &PipelineConfig,
    enhance: &EnhanceConfig,
    compact: &Model,
    train: &[TripletSample],
) -> Result<(Model, Vec<EpochLog>)> {
    let mut model = compact
        .enhance(enhance, cfg.seed.wrapping_add(2))
        .map_err(|e| e.in_stage("enhance"))?;
    let settings = TrainSettings {
        epochs: cfg.enhance_epochs,
        ..cfg.train.clone()
    };
    let log = train_model(
        &mut model,
        train,
        &settings,
        &cfg.loss,
        &plugin_for(cfg, cfg.feature_loss),
        cfg.seed.wrapping_add(2),
    )
    .map_err(|e| e.in_stage("enhance"))?;
    Ok((model, log))
}

pub fn run_stage2(
    cfg: &PipelineConfig,
    compact: &Model,
    train: &[TripletSample],
    out_dir: Option<&Path>,
) -> Result<(Model, Vec<EpochLog>)> {
    let (model, log) = run_stage2_with(cfg, &cfg.enhance, compact, train)?;
    if let Some(d) = out_dir {
        save_checkpoint(&d.join("enhanced.sgfi"), &model, &meta(cfg, cfg.enhance_epochs, "adamax", "enhance"))?;
    }
    Ok((model, log))
}

/// Enhancement variants of the ablation, in row order after the
/// baseline and compressed rows.
pub fn ablation_variants(base: &EnhanceConfig) -> Vec<(&'static str, EnhanceConfig)> {
    vec![
        (
            "+FP",
            EnhanceConfig {
                one_by_one: false,
                path_select: false,
                ..base.clone()
            },
        ),
        (
            "+FP+1x1",
            EnhanceConfig {
                one_by_one: true,
                path_select: false,
                ..base.clone()
            },
        ),
        (
            "+FP+1x1+PS",
            EnhanceConfig {
                one_by_one: true,
                path_select: true,
                ..base.clone()
            },
        ),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub params: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Rows: baseline, compressed, then each enhancement variant trained from
/// the compressed model.
pub fn run_ablation(
    cfg: &PipelineConfig,
    baseline: &Model,
    compact: &Model,
    train: &[TripletSample],
    val: &[TripletSample],
) -> Result<Vec<AblationRow>> {
    let row = |label: &str, m: &Model| -> Result<AblationRow> {
        let r = evaluate(m, val)?;
        Ok(AblationRow {
            label: label.into(),
            params: r.params,
            mean_psnr: r.mean_psnr,
            mean_ssim: r.mean_ssim,
        })
    };
    let mut rows = vec![row("baseline", baseline)?, row("compressed", compact)?];
    for (label, variant) in ablation_variants(&cfg.enhance) {
        let (m, _) = run_stage2_with(cfg, &variant, compact, train)?;
        rows.push(row(label, &m)?);
    }
    Ok(rows)
}
