//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Metadata};
use crate::compressor::{compress, profile_density, rebuild_model, Strategy};
use crate::config::{PipelineConfig, TrainSettings};
use crate::data::{gen_synthetic, load_split, read_ppm, write_ppm, Split};
use crate::error::{Error, Result};
use crate::gradcheck::model_gradcheck;
use crate::losses::FeatureLossPlugin;
use crate::model::Model;
use crate::pipeline::{
    evaluate, run_ablation, run_stage2_with, sparsify_model, train_baseline, train_model,
};

#[derive(Debug, Parser)]
#[command(name = "sgfi", version, about = "Sparsity-guided compression for frame interpolation")]
pub struct Cli {
    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Override any configuration key.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic train and val splits.
    GenData {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the baseline model.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// l1-regularised fine-tuning of a trained model.
    Sparsify {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Per-layer density of a sparse checkpoint.
    Profile {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rewrite a sparse model into a compact dense one with fresh weights.
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        spec_out: Option<PathBuf>,
    },
    /// Train a rebuilt compact model from its initialisation.
    Retrain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Add the feature pyramid, synthesis grid and path selection, then train.
    Enhance {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Train every ablation variant and write a table instead.
        #[arg(long)]
        ablation: Option<PathBuf>,
        /// Baseline checkpoint for the first ablation row.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Synthesise the middle frame of two PPM frames.
    Interpolate {
        #[arg(long)]
        in0: PathBuf,
        #[arg(long)]
        in1: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR/SSIM report over one split directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Finite-difference check of the full training loss on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

/// Parse `argv`, run the command and return the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match execute(&cli.command, &cfg) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

pub fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    if let Some(p) = &cli.config {
        let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
        cfg.apply_text(&text)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.gen.seed = s;
    }
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = d.clone();
    }
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv}")))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn or_out(cfg: &PipelineConfig, given: &Option<PathBuf>, name: &str) -> PathBuf {
    given.clone().unwrap_or_else(|| cfg.out_dir.join(name))
}

fn splits(cfg: &PipelineConfig, data: &Option<PathBuf>) -> Result<(Vec<crate::model::TripletSample>, Vec<crate::model::TripletSample>)> {
    let root = data.clone().unwrap_or_else(|| cfg.data_dir.clone());
    let train = load_split(&root.join(Split::Train.name()))?;
    let val_dir = root.join(Split::Val.name());
    let val = if val_dir.exists() { load_split(&val_dir)? } else { Vec::new() };
    Ok((train, val))
}

fn meta(cfg: &PipelineConfig, epoch: usize, optimizer: &str, stage: &str) -> Metadata {
    Metadata {
        epoch,
        optimizer: optimizer.into(),
        seed: cfg.seed,
        stage: stage.into(),
    }
}

fn plugin(cfg: &PipelineConfig) -> FeatureLossPlugin {
    if cfg.feature_loss {
        FeatureLossPlugin::random(cfg.seed ^ 0xFEA7)
    } else {
        FeatureLossPlugin::disabled()
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d)?;
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn execute(cmd: &Command, cfg: &PipelineConfig) -> Result<()> {
    match cmd {
        Command::GenData { data } => {
            let root = data.clone().unwrap_or_else(|| cfg.data_dir.clone());
            let mut params = cfg.gen.clone();
            params.seed = cfg.seed;
            let ms = gen_synthetic(&root, &params)?;
            for m in ms {
                println!("{}: {} triplets in {}", m.split.name(), m.triplets.len(), m.root.display());
            }
        }
        Command::Train { data, out } => {
            let (train, _) = splits(cfg, data)?;
            let (model, log) = train_baseline(cfg, &train)?;
            let path = or_out(cfg, out, "baseline.sgfi");
            save_checkpoint(&path, &model, &meta(cfg, cfg.train.epochs, "adamax", "train"))?;
            if let Some(l) = log.last() {
                println!("epoch {} loss {:.6}", l.epoch, l.loss);
            }
            println!("wrote {}", path.display());
        }
        Command::Sparsify {
            ckpt,
            data,
            out,
            trajectory,
        } => {
            let base = load_checkpoint(ckpt)?.model;
            let (train, val) = splits(cfg, data)?;
            let (sparse, traj) = sparsify_model(cfg, &base, &train, &val)?;
            let path = or_out(cfg, out, "sparse.sgfi");
            save_checkpoint(&path, &sparse, &meta(cfg, cfg.sparsify_epochs, "obprox", "sparsify"))?;
            write(&or_out(cfg, trajectory, "trajectory.csv"), &traj.to_csv())?;
            println!("final density {:.4}", traj.last_density().unwrap_or(1.0));
        }
        Command::Profile { ckpt, out } => {
            let m = load_checkpoint(ckpt)?.model;
            let prof = profile_density(&m.spec, &m.params)?;
            write(out, &prof.to_json()?)?;
            println!("global density {:.4}", prof.global_density);
        }
        Command::Reconstruct {
            ckpt,
            strategy,
            out,
            spec_out,
        } => {
            let m = load_checkpoint(ckpt)?.model;
            let prof = profile_density(&m.spec, &m.params)?;
            let spec = compress(&m.spec, &prof, strategy.unwrap_or(cfg.strategy))?;
            let params = rebuild_model(&spec, cfg.seed.wrapping_add(1))?;
            let compact = Model::new(spec.clone(), params, m.adacof)?;
            write(&or_out(cfg, spec_out, "compact_spec.json"), &spec.to_json()?)?;
            save_checkpoint(&or_out(cfg, out, "compact_init.sgfi"), &compact, &meta(cfg, 0, "none", "reconstruct"))?;
            println!("parameters {} -> {}", m.param_count(), compact.param_count());
        }
        Command::Retrain { ckpt, data, out } => {
            let mut m = load_checkpoint(ckpt)?.model;
            let (train, _) = splits(cfg, data)?;
            let settings = TrainSettings {
                epochs: cfg.retrain_epochs,
                ..cfg.train.clone()
            };
            train_model(&mut m, &train, &settings, &cfg.loss, &plugin(cfg), cfg.seed.wrapping_add(1))?;
            save_checkpoint(&or_out(cfg, out, "compact.sgfi"), &m, &meta(cfg, cfg.retrain_epochs, "adamax", "retrain"))?;
        }
        Command::Enhance {
            ckpt,
            data,
            out,
            ablation,
            baseline,
        } => {
            let compact = load_checkpoint(ckpt)?.model;
            let (train, val) = splits(cfg, data)?;
            match ablation {
                Some(table) => {
                    let base = match baseline {
                        Some(b) => load_checkpoint(b)?.model,
                        None => compact.clone(),
                    };
                    if val.is_empty() {
                        return Err(Error::Dataset("ablation needs a val split".into()));
                    }
                    let rows = run_ablation(cfg, &base, &compact, &train, &val)?;
                    for r in &rows {
                        println!("{:<12} {:>8} params  {:.3} dB  {:.4}", r.label, r.params, r.mean_psnr, r.mean_ssim);
                    }
                    write(table, &serde_json::to_string_pretty(&rows)?)?;
                }
                None => {
                    let (m, _) = run_stage2_with(cfg, &cfg.enhance, &compact, &train)?;
                    save_checkpoint(&or_out(cfg, out, "enhanced.sgfi"), &m, &meta(cfg, cfg.enhance_epochs, "adamax", "enhance"))?;
                }
            }
        }
        Command::Interpolate { in0, in1, ckpt, out } => {
            let m = load_checkpoint(ckpt)?.model;
            let a = read_ppm(in0)?;
            let b = read_ppm(in1)?;
            let mid = m.infer(&a, &b)?.i_final;
            write_ppm(out, &mid)?;
        }
        Command::Eval { ckpt, data, report } => {
            let m = load_checkpoint(ckpt)?.model;
            let samples = load_split(data)?;
            let r = evaluate(&m, &samples)?;
            write(report, &r.to_json()?)?;
            println!("PSNR {:.3} dB  SSIM {:.4}  params {}", r.mean_psnr, r.mean_ssim, r.params);
        }
        Command::Gradcheck { tolerance } => {
            let err = model_gradcheck(cfg.seed, 1e-6)?;
            println!("max relative gradient error {err:.3e}");
            if err >= *tolerance {
                return Err(Error::invalid("gradcheck", format!("error {err:.3e} exceeds {tolerance:.1e}")));
            }
        }
    }
    Ok(())
}
