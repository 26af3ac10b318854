use std::fs;
use std::path::{Path, PathBuf};

use clap::Subcommand;
use confaug::backbone::Denoiser;
use confaug::classifiers::{DownstreamModel, GuidanceClassifier};
use confaug::dataset::{fuse_datasets, load_manifest, DatasetManifest, Split};
use confaug::filtering::filter_batch;
use confaug::glyphs::{make_toy_glyph_dataset, MANIFEST_NAME};
use confaug::metrics::{fid_between_sets, render_comparison_csv, render_comparison_text, ComparisonRow};
use confaug::nn::Checkpoint;
use confaug::sampler::{generate, read_sidecar, write_sample_images, write_sidecar, GuidanceGrad};
use confaug::training::{
    evaluate_downstream, train_denoiser, train_downstream, train_guidance_classifier, EpochRecord, RunLog, TrainHooks,
};
use confaug::{NoiseSchedule, PixelTensor};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, Override};
use crate::error::CliError;
use crate::run::{stage_seed, RunDir};

const SCHEDULE_PREFIX: &str = "schedule.";

#[derive(Clone, Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case", tag = "name")]
pub enum Command {
    /// Render the seeded toy glyph dataset and its manifest.
    PrepareData {
        /// Output directory; defaults to `data/` inside the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the class-conditional denoiser.
    TrainDiffusion {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the noise-aware guidance classifier.
    TrainGuidance {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Generate a class-balanced pool of synthetic samples.
    Sample {
        #[arg(long)]
        denoiser: PathBuf,
        /// Guidance classifier; sampling is unguided without it.
        #[arg(long)]
        guidance: Option<PathBuf>,
        /// Shorthand for `--sampler.per_class`.
        #[arg(long)]
        per_class: Option<usize>,
    },
    /// Keep the samples a classifier assigns to their intended class with
    /// enough confidence.
    Filter {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Shorthand for `--filter.threshold`.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Append retained samples to the training split of a manifest.
    Fuse {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        retained: PathBuf,
    },
    /// Train a downstream classifier and score it on the test split.
    TrainClassifier {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Shorthand for `--classifier.family`.
        #[arg(long)]
        family: Option<String>,
    },
    /// Score classifiers on one split and tabulate them side by side.
    Evaluate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: Vec<PathBuf>,
        #[arg(long)]
        baseline: Vec<PathBuf>,
        #[arg(long)]
        retrained: Vec<PathBuf>,
    },
    /// Fréchet distance between real images and a synthetic sidecar.
    Fid {
        #[arg(long)]
        real: Option<PathBuf>,
        #[arg(long)]
        synthetic: PathBuf,
        #[arg(long)]
        extractor: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::PrepareData { .. } => "prepare-data",
            Command::TrainDiffusion { .. } => "train-diffusion",
            Command::TrainGuidance { .. } => "train-guidance",
            Command::Sample { .. } => "sample",
            Command::Filter { .. } => "filter",
            Command::Fuse { .. } => "fuse",
            Command::TrainClassifier { .. } => "train-classifier",
            Command::Evaluate { .. } => "evaluate",
            Command::Fid { .. } => "fid",
        }
    }

    /// Flag shorthands, expressed as config overrides so the echoed
    /// config reflects them.
    pub fn shorthand_overrides(&self) -> Vec<Override> {
        let o = |key: &str, value: String| Override { key: key.into(), value };
        match self {
            Command::Sample { per_class: Some(n), .. } => vec![o("sampler.per_class", n.to_string())],
            Command::Filter { threshold: Some(t), .. } => vec![o("filter.threshold", t.to_string())],
            Command::TrainClassifier { family: Some(f), .. } => vec![o("classifier.family", format!("\"{f}\""))],
            _ => Vec::new(),
        }
    }
}

fn manifest_arg(flag: Option<&PathBuf>, cfg: &ExperimentConfig, name: &str) -> Result<DatasetManifest, CliError> {
    let path = flag
        .or(cfg.data.manifest.as_ref())
        .ok_or_else(|| CliError::Usage(format!("--{name} or data.manifest is required")))?;
    Ok(load_manifest(path)?)
}

fn canonical(p: &Path) -> Result<PathBuf, CliError> {
    fs::canonicalize(p).map_err(|e| CliError::Invalid(format!("{}: {e}", p.display())))
}

fn log_epochs<'a>(run: &'a mut RunDir, stage: &str) -> impl FnMut(&EpochRecord) + 'a {
    let stage = stage.to_string();
    move |e: &EpochRecord| {
        log::info!("{stage} epoch {} train {:.4} val {:?}", e.epoch, e.train_loss, e.val_loss);
        run.event("epoch", json!({ "stage": stage, "record": e }));
    }
}

fn write_training_reports(run: &RunDir, log: &RunLog) -> Result<(), CliError> {
    fs::write(run.join("reports/train_log.jsonl"), log.to_jsonl())?;
    fs::write(run.join("reports/train_summary.json"), log.summary_json() + "\n")?;
    Ok(())
}

fn save_with_schedule(mut ck: Checkpoint<f32>, sched: &NoiseSchedule, path: &Path) -> Result<(), CliError> {
    ck.config.extend(sched.to_config(SCHEDULE_PREFIX));
    Ok(ck.save(path)?)
}

fn training_summary(ckpt: &Path, log: &RunLog) -> Value {
    json!({
        "checkpoint": ckpt,
        "epochs": log.epochs.len(),
        "best_epoch": log.best_epoch,
        "best_val_loss": log.best_val_loss,
        "stop_reason": log.stop_reason,
    })
}

/// Runs one subcommand and returns what it prints on stdout.
pub fn execute(cmd: &Command, cfg: &ExperimentConfig, run: &mut RunDir) -> Result<String, CliError> {
    let seed = stage_seed(cfg.seed, cmd.name());
    match cmd {
        Command::PrepareData { out } => {
            let out = out.clone().unwrap_or_else(|| run.join("data"));
            let m = make_toy_glyph_dataset(&out, cfg.data.classes, cfg.data.per_class, seed)?;
            let mut summary = json!({
                "manifest": out.join(MANIFEST_NAME),
                "classes": m.class_count,
                "train": m.count(Split::Train),
                "val": m.count(Split::Val),
                "test": m.count(Split::Test),
            });
            if let Some(n) = cfg.data.train_per_class {
                let path = out.join(format!("manifest_train{n}.txt"));
                let sub = m.subsample_train(n, seed).write(&path)?;
                summary["subsampled_manifest"] = json!(path);
                summary["subsampled_train"] = json!(sub.count(Split::Train));
            }
            run.write_json("reports/dataset.json", &summary)?;
            Ok(summary.to_string())
        }
        Command::TrainDiffusion { data } => {
            let manifest = manifest_arg(data.as_ref(), cfg, "data")?;
            let sched = cfg.schedule.build()?;
            let tc = cfg.training.with_seed(seed);
            let (model, log) = {
                let mut on_epoch = log_epochs(run, "train-diffusion");
                let hooks = TrainHooks { cancel: None, on_epoch: Some(&mut on_epoch) };
                train_denoiser::<f32>(&manifest, &sched, &cfg.backbone, &tc, hooks)?
            };
            let ckpt = run.join("checkpoints/denoiser.ckpt");
            save_with_schedule(model.to_checkpoint(), &sched, &ckpt)?;
            write_training_reports(run, &log)?;
            Ok(training_summary(&ckpt, &log).to_string())
        }
        Command::TrainGuidance { data } => {
            let manifest = manifest_arg(data.as_ref(), cfg, "data")?;
            let sched = cfg.schedule.build()?;
            let tc = cfg.training.with_seed(seed);
            let (model, log) = {
                let mut on_epoch = log_epochs(run, "train-guidance");
                let hooks = TrainHooks { cancel: None, on_epoch: Some(&mut on_epoch) };
                train_guidance_classifier::<f32>(&manifest, &sched, &cfg.backbone, &tc, hooks)?
            };
            let ckpt = run.join("checkpoints/guidance.ckpt");
            save_with_schedule(model.to_checkpoint(), &sched, &ckpt)?;
            write_training_reports(run, &log)?;
            Ok(training_summary(&ckpt, &log).to_string())
        }
        Command::Sample { denoiser, guidance, .. } => {
            let ck = Checkpoint::<f32>::load(denoiser)?;
            let den = Denoiser::from_checkpoint(&ck)?;
            let sched = NoiseSchedule::from_config(&ck.config, SCHEDULE_PREFIX)?;
            let guide = match guidance {
                Some(p) => {
                    let gck = Checkpoint::<f32>::load(p)?;
                    let g = GuidanceClassifier::from_checkpoint(&gck)?;
                    let gs = NoiseSchedule::from_config(&gck.config, SCHEDULE_PREFIX)?;
                    if gs.checksum() != sched.checksum() {
                        return Err(CliError::Invalid("guidance classifier was trained on a different schedule".into()));
                    }
                    if g.config.class_count != den.config.class_count {
                        return Err(CliError::Invalid(format!(
                            "guidance classifier has {} classes, denoiser {}",
                            g.config.class_count, den.config.class_count
                        )));
                    }
                    Some(g)
                }
                None => {
                    if cfg.sampler.guidance_scale != 0.0 {
                        log::warn!("no guidance classifier given; sampling unguided");
                    }
                    None
                }
            };
            let k = den.config.class_count;
            let labels: Vec<usize> = (0..k * cfg.sampler.per_class).map(|i| i % k).collect();
            run.event("sampling", json!({ "samples": labels.len(), "seed": seed }));
            let g: Option<&dyn GuidanceGrad<f32>> = guide.as_ref().map(|g| g as &dyn GuidanceGrad<f32>);
            let mut recs = generate(&labels, &cfg.sampler.sampler_config(), &den, g, &sched, den.config.image_size, seed)?;
            write_sample_images(&mut recs, &run.join("samples/images"))?;
            let sidecar = run.join("samples/pool.jsonl");
            write_sidecar(&recs, &sidecar)?;
            Ok(json!({ "sidecar": sidecar, "samples": recs.len(), "per_class": cfg.sampler.per_class, "seed": seed })
                .to_string())
        }
        Command::Filter { pool, model, .. } => {
            let model = DownstreamModel::<f32>::load(model)?;
            let pool = read_sidecar::<f32>(&canonical(pool)?, model.spec.input_size)?;
            let (kept, report) = filter_batch(&pool, &model, &cfg.filter)?;
            if kept.len() > pool.len() {
                return Err(CliError::Invalid(format!("retained {} of {} samples", kept.len(), pool.len())));
            }
            write_sidecar(&kept, &run.join("samples/retained.jsonl"))?;
            run.write_json("reports/filter_report.json", &report)?;
            Ok(serde_json::to_string(&report).expect("report serializes"))
        }
        Command::Fuse { data, retained } => {
            let real = manifest_arg(data.as_ref(), cfg, "data")?;
            let syn = read_sidecar::<f32>(&canonical(retained)?, real.image_size)?;
            let dir = run.join("data");
            fs::create_dir_all(&dir)?;
            let path = dir.join("fused_manifest.txt");
            let fused = fuse_datasets(&real, &syn)?.write(&path)?;
            let summary = json!({
                "manifest": path,
                "real_train": real.count(Split::Train),
                "synthetic": syn.len(),
                "train": fused.count(Split::Train),
                "val": fused.count(Split::Val),
                "test": fused.count(Split::Test),
            });
            run.write_json("reports/fuse.json", &summary)?;
            Ok(summary.to_string())
        }
        Command::TrainClassifier { data, .. } => {
            let manifest = manifest_arg(data.as_ref(), cfg, "data")?;
            let spec = cfg.classifier.spec(manifest.class_count);
            let tc = cfg.training.with_seed(stage_seed(cfg.seed, &format!("train-classifier:{}", spec.id())));
            let (model, log, report) = {
                let mut on_epoch = log_epochs(run, "train-classifier");
                let hooks = TrainHooks { cancel: None, on_epoch: Some(&mut on_epoch) };
                train_downstream::<f32>(&manifest, &spec, &tc, hooks)?
            };
            let ckpt = run.join(&format!("checkpoints/{}.ckpt", spec.id()));
            model.save(&ckpt)?;
            write_training_reports(run, &log)?;
            run.write_json("reports/test_report.json", &report)?;
            let mut summary = training_summary(&ckpt, &log);
            summary["test_accuracy"] = json!(report.accuracy);
            summary["model"] = json!(spec.id());
            Ok(summary.to_string())
        }
        Command::Evaluate { data, model, baseline, retrained } => {
            let manifest = manifest_arg(data.as_ref(), cfg, "data")?;
            let split = cfg.metrics.eval_split;
            let images = manifest.load_split::<f32>(split)?;
            let mut rows = Vec::new();
            for (role, paths) in [("baseline", baseline), ("retrained", retrained), ("model", model)] {
                for p in paths {
                    let m = DownstreamModel::<f32>::load(p)?;
                    let report = evaluate_downstream(&m, &images)?;
                    rows.push(ComparisonRow { model: m.id(), role: role.into(), report });
                }
            }
            if rows.is_empty() {
                return Err(CliError::Usage("evaluate needs at least one --model, --baseline or --retrained".into()));
            }
            let text = render_comparison_text(&rows);
            run.write_json("reports/eval.json", &json!({ "split": split, "rows": rows }))?;
            fs::write(run.join("reports/comparison.txt"), &text)?;
            fs::write(run.join("reports/comparison.csv"), render_comparison_csv(&rows))?;
            Ok(text.trim_end().to_string())
        }
        Command::Fid { real, synthetic, extractor } => {
            let real = manifest_arg(real.as_ref(), cfg, "real")?;
            let ext = DownstreamModel::<f32>::load(extractor)?;
            let real_images: Vec<PixelTensor<f32>> = real
                .load_split::<f32>(cfg.metrics.real_split)?
                .images
                .into_iter()
                .map(|t| PixelTensor::new(t).map_err(CliError::Invalid))
                .collect::<Result<_, _>>()?;
            let syn = read_sidecar::<f32>(&canonical(synthetic)?, ext.spec.input_size)?;
            let a: Vec<&PixelTensor<f32>> = real_images.iter().collect();
            let b: Vec<&PixelTensor<f32>> = syn.iter().map(|r| &r.image).collect();
            let report = fid_between_sets(&a, &b, &ext, &cfg.metrics.layer)?;
            run.write_json("reports/fid.json", &report)?;
            Ok(serde_json::to_string(&report).expect("report serializes"))
        }
    }
}
