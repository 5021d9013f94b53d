//! Command-line interface for the lesion classification pipeline.
//!
//! Subcommands mirror the pipeline stages and can be chained by hand
//! (`synth` -> `preprocess` -> `sample` -> `augment` -> `train-seg` ->
//! `train-cls` -> `ensemble` -> `evaluate`) or run end to end via `run-all`.
//! Exit code is 0 only on full success.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dermpipe::augment;
use dermpipe::checkpoint;
use dermpipe::dataset::{
    generate_synthetic, ingest_classification, ingest_segmentation, ClassLabel, DatasetManifest,
    SynthSpec, DEFAULT_MASK_SUFFIX,
};
use dermpipe::ensemble;
use dermpipe::metrics;
use dermpipe::nets::{transplant_encoder, EncoderSpec};
use dermpipe::pipeline::{self, PipelineConfig};
use dermpipe::preprocess::{preprocess_manifest, write_verdict_log, PreprocessOptions};
use dermpipe::sampler;
use dermpipe::trainer::{self, TrainConfig};
use dermpipe::TrainScalar;

#[derive(Parser)]
#[command(
    name = "dermpipe",
    version,
    about = "Dermoscopy lesion classification pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TrainOverrides {
    /// JSON file whose keys mirror the training config fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
}

impl TrainOverrides {
    fn apply(&self, mut base: TrainConfig) -> Result<TrainConfig> {
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            base = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?;
        }
        if let Some(seed) = self.seed {
            base.seed = seed;
        }
        if let Some(epochs) = self.epochs {
            base.epochs = epochs;
        }
        if let Some(batch) = self.batch_size {
            base.batch_size = batch;
        }
        if let Some(lr0) = self.lr0 {
            base.lr0 = lr0;
        }
        Ok(base)
    }
}

fn parse_encoder_spec(s: &str) -> Result<EncoderSpec> {
    match s {
        "desk" => Ok(EncoderSpec::desk()),
        "full" => Ok(EncoderSpec::full_scale()),
        path => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading encoder spec {path}"))?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic corpus with masks and optional strokes.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        n_per_class: usize,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long, default_value_t = 0.0)]
        hair_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build a manifest from an existing corpus.
    Ingest {
        #[command(subcommand)]
        kind: IngestKind,
    },
    /// Pad, optionally de-hair, and resize a manifest.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 448)]
        side: usize,
        #[arg(long)]
        hair_model: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        hair_threshold: f64,
        #[arg(long, default_value_t = false)]
        force_hair_removal: bool,
    },
    /// Stratified 9:1 train/dev split.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split and build anchor-capped balanced training sets.
    Sample {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "BCC")]
        anchor: String,
        #[arg(long, default_value_t = 4)]
        sets: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Expand a labeled manifest 8x (12x for DF and VASC).
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the segmentation model on a manifest with masks.
    TrainSeg {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `desk`, `full`, or a JSON spec file.
        #[arg(long, default_value = "desk")]
        spec: String,
        #[command(flatten)]
        train: TrainOverrides,
    },
    /// Fine-tune one classifier from a segmentation checkpoint.
    TrainCls {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        seg_checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        set_index: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainOverrides,
    },
    /// Train the stroke classifier on a manifest with hair flags.
    TrainHair {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        side: usize,
        #[command(flatten)]
        train: TrainOverrides,
    },
    /// Weight, score and predict with a set of classifier checkpoints.
    Ensemble {
        /// Classifier checkpoints, one per ensemble member.
        #[arg(long, num_args = 1.., required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a predictions file against a labeled manifest.
    Evaluate {
        /// `image,label` predictions file.
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-render report files from a completed run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Execute the full pipeline, resuming completed stages.
    RunAll {
        /// Pipeline config JSON; a desk-scale synthetic config when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the effective config to this path and exit.
        #[arg(long)]
        write_config: Option<PathBuf>,
    },
    /// Print checkpoint metadata, layer table and parameter count.
    InspectModel {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Subcommand)]
enum IngestKind {
    /// One-hot ground-truth table plus an image directory.
    Classification {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Image directory with `<id><suffix>` mask files.
    Segmentation {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = DEFAULT_MASK_SUFFIX)]
        mask_suffix: String,
    },
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn print_counts(manifest: &DatasetManifest) {
    let counts = manifest.class_counts();
    let parts: Vec<String> = ClassLabel::ALL
        .iter()
        .map(|l| format!("{} {}", l.code(), counts[l.index()]))
        .collect();
    println!("{} records ({})", manifest.len(), parts.join(", "));
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth {
            out,
            n_per_class,
            image_size,
            hair_fraction,
            seed,
        } => {
            ensure_dir(&out)?;
            let spec = SynthSpec {
                n_per_class,
                image_size,
                hair_fraction,
                seed,
            };
            let manifest = generate_synthetic(&spec, &out)?;
            manifest.write(&out.join("synthetic.manifest"))?;
            print_counts(&manifest);
            println!("manifest: {}", out.join("synthetic.manifest").display());
        }
        Command::Ingest { kind } => match kind {
            IngestKind::Classification {
                root,
                ground_truth,
                out,
            } => {
                let manifest = ingest_classification(&root, &ground_truth)?;
                manifest.write(&out)?;
                print_counts(&manifest);
            }
            IngestKind::Segmentation {
                root,
                out,
                mask_suffix,
            } => {
                let manifest = ingest_segmentation(&root, &mask_suffix)?;
                manifest.write(&out)?;
                println!("{} image/mask pairs", manifest.len());
            }
        },
        Command::Preprocess {
            manifest,
            out,
            side,
            hair_model,
            hair_threshold,
            force_hair_removal,
        } => {
            ensure_dir(&out)?;
            let input = DatasetManifest::read(&manifest)?;
            let model = match &hair_model {
                Some(path) => Some(checkpoint::load_hair::<TrainScalar>(path)?.0),
                None => None,
            };
            let opts = PreprocessOptions {
                side,
                hair_model: model.as_ref(),
                hair_threshold,
                force_hair_removal,
                removal: Default::default(),
            };
            let (result, verdicts) = preprocess_manifest(&input, &out, &opts)?;
            result.write(&out.join("preprocessed.manifest"))?;
            write_verdict_log(&out.join("hair_verdicts.tsv"), &verdicts)?;
            let removed = result
                .records
                .iter()
                .filter(|r| r.stage == dermpipe::dataset::Stage::HairRemoved)
                .count();
            println!(
                "{} images preprocessed to side {side}, {removed} de-haired",
                result.len()
            );
        }
        Command::Split {
            manifest,
            seed,
            out,
        } => {
            ensure_dir(&out)?;
            let input = DatasetManifest::read(&manifest)?;
            let (train, dev, plan) = sampler::split(&input, seed)?;
            for label in &plan.empty_classes {
                eprintln!("warning: class {label} has no records; empty strata produced");
            }
            train.write(&out.join("train.manifest"))?;
            dev.write(&out.join("dev.manifest"))?;
            std::fs::write(
                out.join("split_plan.json"),
                serde_json::to_string_pretty(&plan)?,
            )?;
            println!(
                "train {} / dev {} (plan: {})",
                train.len(),
                dev.len(),
                out.join("split_plan.json").display()
            );
        }
        Command::Sample {
            manifest,
            anchor,
            sets,
            seed,
            out,
        } => {
            ensure_dir(&out)?;
            let input = DatasetManifest::read(&manifest)?;
            let anchor = ClassLabel::from_code(&anchor)?;
            let (train, dev, plan) = sampler::split(&input, seed)?;
            for label in &plan.empty_classes {
                eprintln!("warning: class {label} has no records; empty strata produced");
            }
            train.write(&out.join("train.manifest"))?;
            dev.write(&out.join("dev.manifest"))?;
            std::fs::write(
                out.join("split_plan.json"),
                serde_json::to_string_pretty(&plan)?,
            )?;
            let balanced = sampler::balance(&train, anchor, sets, seed)?;
            for set in &balanced {
                let path = out.join(format!("balanced_{}.manifest", set.index));
                set.records.write(&path)?;
                println!(
                    "set {}: cap {} ({} records) -> {}",
                    set.index,
                    set.cap,
                    set.records.len(),
                    path.display()
                );
            }
        }
        Command::Augment { manifest, out } => {
            let input = DatasetManifest::read(&manifest)?;
            let expanded = augment::expand_manifest(&input, &out)?;
            expanded.write(&out.join("augmented.manifest"))?;
            println!("{} -> {} records", input.len(), expanded.len());
        }
        Command::TrainSeg {
            manifest,
            out,
            spec,
            train,
        } => {
            ensure_dir(&out)?;
            let spec = parse_encoder_spec(&spec)?;
            let cfg = train.apply(TrainConfig::seg_defaults())?;
            let input = DatasetManifest::read(&manifest)?;
            let data = trainer::load_seg_data::<TrainScalar>(&input)?;
            let mut model = dermpipe::nets::SegModel::build(&spec, cfg.seed)?;
            let ckpt = out.join("seg.ckpt");
            let record = trainer::train_seg(&mut model, &data, None, &cfg, &ckpt)?;
            record.write(&out.join("seg_run.json"))?;
            println!(
                "segmentation trained for {} epochs, final loss {:.4} -> {}",
                cfg.epochs,
                record.final_loss().unwrap_or(f64::NAN),
                ckpt.display()
            );
        }
        Command::TrainCls {
            manifest,
            dev,
            seg_checkpoint,
            set_index,
            out,
            train,
        } => {
            ensure_dir(&out)?;
            let cfg = train.apply(TrainConfig::cls_defaults())?;
            let (seg, header) = checkpoint::load_seg::<TrainScalar>(&seg_checkpoint)?;
            let spec = header
                .encoder_spec
                .context("segmentation checkpoint lacks an encoder spec")?;
            let input = DatasetManifest::read(&manifest)?;
            let data = trainer::load_cls_data::<TrainScalar>(&input)?;
            let dev_data = match &dev {
                Some(path) => Some(trainer::load_cls_data::<TrainScalar>(
                    &DatasetManifest::read(path)?,
                )?),
                None => None,
            };
            let mut model = transplant_encoder(
                &seg,
                &spec,
                ClassLabel::COUNT,
                cfg.seed.wrapping_add(set_index as u64),
            )?;
            let ckpt = out.join(format!("cls_{set_index}.ckpt"));
            let record = trainer::train_cls(&mut model, &data, dev_data.as_ref(), &cfg, &ckpt)?;
            record.write(&out.join(format!("cls_{set_index}_run.json")))?;
            let dev_note = record
                .epochs
                .last()
                .and_then(|e| e.dev_metric)
                .map(|m| format!(", dev balanced accuracy {m:.4}"))
                .unwrap_or_default();
            println!(
                "classifier {set_index} trained{dev_note} -> {}",
                ckpt.display()
            );
        }
        Command::TrainHair {
            manifest,
            out,
            side,
            train,
        } => {
            ensure_dir(&out)?;
            let cfg = train.apply(TrainConfig::hair_defaults())?;
            let input = DatasetManifest::read(&manifest)?;
            let data = trainer::load_hair_data::<TrainScalar>(&input, side)?;
            let mut model = dermpipe::nets::HairNet::build(side, cfg.seed)?;
            let ckpt = out.join("hair.ckpt");
            let record = trainer::train_hair(&mut model, &data, None, &cfg, &ckpt)?;
            record.write(&out.join("hair_run.json"))?;
            println!(
                "stroke classifier trained, final loss {:.4} -> {}",
                record.final_loss().unwrap_or(f64::NAN),
                ckpt.display()
            );
        }
        Command::Ensemble {
            checkpoints,
            dev,
            target,
            out,
        } => {
            let dev = DatasetManifest::read(&dev)?;
            let target = DatasetManifest::read(&target)?;
            let run = ensemble::run_ensemble(&checkpoints, &dev, &target, &out)?;
            println!(
                "{} member(s), {} target images -> {}",
                checkpoints.len(),
                run.target_ids.len(),
                run.predictions_path.display()
            );
        }
        Command::Evaluate {
            predictions,
            manifest,
            out,
        } => {
            let labels = ensemble::read_prediction_labels(&predictions)?;
            let truth_manifest = DatasetManifest::read(&manifest)?;
            let mut truth = Vec::new();
            let mut preds = Vec::new();
            let by_id: std::collections::BTreeMap<&str, ClassLabel> = truth_manifest
                .records
                .iter()
                .filter_map(|r| r.label.map(|l| (r.id.as_str(), l)))
                .collect();
            for (id, pred) in &labels {
                let Some(t) = by_id.get(id.as_str()) else {
                    bail!("prediction for unknown or unlabeled image '{id}'");
                };
                truth.push(*t);
                preds.push(*pred);
            }
            let cm = metrics::confusion_labels(&truth, &preds)?;
            let m = metrics::class_metrics::<f64>(&cm)?;
            let codes: Vec<&str> = ClassLabel::ALL.iter().map(|l| l.code()).collect();
            println!("{}", metrics::format_confusion(&cm, &codes));
            println!(
                "balanced accuracy {:.4}, accuracy {:.4}",
                m.balanced_accuracy, m.accuracy
            );
            if let Some(out) = out {
                ensure_dir(&out)?;
                std::fs::write(
                    out.join("confusion.json"),
                    serde_json::to_string_pretty(&cm)?,
                )?;
                metrics::render_heatmap(&cm, &codes, &out.join("confusion.png"))?;
                std::fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&m)?)?;
            }
        }
        Command::Report { run } => {
            let path = pipeline::report(&run)?;
            println!("{}", std::fs::read_to_string(&path)?);
            println!("report written to {}", path.display());
        }
        Command::RunAll {
            config,
            out,
            seed,
            write_config,
        } => {
            let mut cfg = match &config {
                Some(path) => PipelineConfig::read(path)?,
                None => PipelineConfig::desk_synthetic(seed.unwrap_or(0)),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
                if let dermpipe::pipeline::DataSource::Synth { spec } = &mut cfg.data {
                    spec.seed = seed;
                }
                cfg.seg_train.seed = seed;
                cfg.cls_train.seed = seed;
            }
            if let Some(path) = write_config {
                cfg.write(&path)?;
                println!("config written to {}", path.display());
                return Ok(());
            }
            let manifest = pipeline::run_all(&cfg, &out)?;
            if let Some(metrics) = &manifest.metrics {
                println!(
                    "ensemble dev balanced accuracy {:.4}, accuracy {:.4}",
                    metrics.ensemble_dev_balanced_accuracy, metrics.ensemble_dev_accuracy
                );
            }
            println!("run complete: {}", out.join("run_manifest.json").display());
        }
        Command::InspectModel { checkpoint: path } => {
            let header = checkpoint::inspect(&path)?;
            println!("kind: {:?}", header.kind);
            println!("seed: {}", header.seed);
            println!("trained epochs: {}", header.trained_epochs);
            if let Some(spec) = &header.encoder_spec {
                println!(
                    "encoder: growth {}, blocks {:?}, initial {}, side {}, compression {}",
                    spec.growth_rate,
                    spec.block_layers,
                    spec.initial_channels,
                    spec.input_side,
                    spec.compression
                );
            }
            if let Some(side) = header.hair_input_side {
                println!("input side: {side}");
            }
            let table = checkpoint::tensor_directory(&path)?;
            let mut total = 0usize;
            println!("{:<46} {:>12} shape", "tensor", "elements");
            for (name, shape) in &table {
                let count: usize = shape.iter().product();
                total += count;
                println!("{name:<46} {count:>12} {shape:?}");
            }
            println!("total elements (params + buffers): {total}");
        }
    }
    Ok(())
}
