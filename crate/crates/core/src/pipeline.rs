//! End-to-end orchestration: data -> preprocess -> split -> sample ->
//! augment -> segmentation pretraining -> four fine-tuned classifiers ->
//! weights -> ensemble -> evaluation -> report.
//!
//! Stages run sequentially and are resumable: each stage's artifacts live
//! under a fixed directory in the output root, and a stage is skipped when
//! its completion flag is set and every artifact still exists. The run
//! manifest is keyed by a hash of the semantic configuration; a changed
//! config starts a fresh run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment;
use crate::checkpoint;
use crate::dataset::{
    generate_synthetic, ingest_classification, ClassLabel, DatasetManifest, SynthSpec,
};
use crate::ensemble;
use crate::error::{Error, Result};
use crate::metrics::{self, ConfusionMatrix};
use crate::nets::{transplant_encoder, EncoderSpec, SegModel};
use crate::preprocess::{preprocess_manifest, write_verdict_log, PreprocessOptions};
use crate::sampler;
use crate::scalar::derive_seed;
use crate::trainer::{self, TrainConfig};

/// Scalar used for network training and inference throughout the pipeline.
pub type TrainScalar = f32;

/// Reference results of the original full-scale run, printed alongside every
/// report for context.
pub const REFERENCE_DEV_BALANCED_ACCURACY: f64 = 0.836;
pub const REFERENCE_DEV_BALANCED_ACCURACY_STD: f64 = 0.015;
pub const REFERENCE_VALIDATION_ACCURACY: f64 = 0.899;
pub const REFERENCE_TEST_ACCURACY: f64 = 0.785;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSource {
    /// Generate a parametric corpus.
    Synth { spec: SynthSpec },
    /// Ingest a real corpus from an image root and a one-hot table.
    Real {
        images_root: PathBuf,
        ground_truth: PathBuf,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SegSource {
    /// Train segmentation on the split training records' own masks.
    TrainMasks { max_images: Option<usize> },
    /// Train segmentation on a separate manifest.
    Manifest { path: PathBuf },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HairConfig {
    pub enabled: bool,
    pub train: TrainConfig,
    pub input_side: usize,
    pub threshold: f64,
    pub force_removal: bool,
}

impl HairConfig {
    pub fn disabled() -> Self {
        HairConfig {
            enabled: false,
            train: TrainConfig::hair_defaults(),
            input_side: 32,
            threshold: 0.5,
            force_removal: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SamplerOptions {
    pub anchor: ClassLabel,
    pub n_sets: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataSource,
    pub seg_data: SegSource,
    pub encoder: EncoderSpec,
    pub preprocess_side: usize,
    pub hair: HairConfig,
    pub sampler: SamplerOptions,
    pub seg_train: TrainConfig,
    pub cls_train: TrainConfig,
    /// Ensemble scoring target; the shared dev manifest when absent.
    pub ensemble_target: Option<PathBuf>,
}

impl PipelineConfig {
    /// Desk-scale synthetic run: the default starting point.
    ///
    /// Training uses a hotter rate plus momentum than the full-scale
    /// defaults; plain SGD at 0.001 is far too slow for the short desk
    /// epoch budgets.
    pub fn desk_synthetic(seed: u64) -> Self {
        let encoder = EncoderSpec::desk();
        let mut seg_train = TrainConfig::seg_defaults();
        seg_train.epochs = 20;
        seg_train.seed = seed;
        seg_train.lr0 = 0.01;
        seg_train.momentum = 0.9;
        seg_train.batch_size = 8;
        let mut cls_train = TrainConfig::cls_defaults();
        cls_train.epochs = 10;
        cls_train.seed = seed;
        cls_train.lr0 = 0.01;
        cls_train.momentum = 0.9;
        PipelineConfig {
            seed,
            data: DataSource::Synth {
                spec: SynthSpec {
                    n_per_class: 70,
                    image_size: encoder.input_side,
                    hair_fraction: 0.0,
                    seed,
                },
            },
            seg_data: SegSource::TrainMasks {
                max_images: Some(64),
            },
            preprocess_side: encoder.input_side,
            encoder,
            hair: HairConfig::disabled(),
            sampler: SamplerOptions {
                anchor: ClassLabel::Bcc,
                n_sets: 4,
            },
            seg_train,
            cls_train,
            ensemble_target: None,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Hash over the canonical serialization; changes iff a semantic field
    /// changes (the output directory is not part of the config).
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct StageStatus {
    pub done: bool,
    /// Artifact paths relative to the output root.
    pub artifacts: Vec<PathBuf>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub per_model_dev_balanced_accuracy: Vec<f64>,
    pub mean_dev_balanced_accuracy: f64,
    pub stddev_dev_balanced_accuracy: f64,
    pub ensemble_dev_balanced_accuracy: f64,
    pub ensemble_dev_accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub stages: BTreeMap<String, StageStatus>,
    pub metrics: Option<MetricsSummary>,
}

impl RunManifest {
    fn fresh(config_hash: String) -> Self {
        RunManifest {
            config_hash,
            stages: BTreeMap::new(),
            metrics: None,
        }
    }

    pub fn path(out_dir: &Path) -> PathBuf {
        out_dir.join("run_manifest.json")
    }

    pub fn read(out_dir: &Path) -> Result<Self> {
        let path = Self::path(out_dir);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))
    }

    fn write(&self, out_dir: &Path) -> Result<()> {
        let path = Self::path(out_dir);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Other(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// A stage is complete when its flag is set and every artifact exists.
    pub fn stage_complete(&self, out_dir: &Path, name: &str) -> bool {
        self.stages
            .get(name)
            .map(|s| s.done && s.artifacts.iter().all(|a| out_dir.join(a).exists()))
            .unwrap_or(false)
    }
}

/// The fixed stage order.
pub const STAGES: [&str; 12] = [
    "data",
    "train-hair",
    "preprocess",
    "split",
    "sample",
    "augment",
    "train-seg",
    "train-cls",
    "weights",
    "ensemble",
    "evaluate",
    "report",
];

struct StageRunner<'a> {
    out_dir: &'a Path,
    manifest: RunManifest,
}

impl StageRunner<'_> {
    fn run(
        &mut self,
        name: &str,
        artifacts: Vec<PathBuf>,
        f: impl FnOnce() -> Result<()>,
    ) -> Result<()> {
        if self.manifest.stage_complete(self.out_dir, name) {
            return Ok(());
        }
        match f() {
            Ok(()) => {
                self.manifest.stages.insert(
                    name.to_string(),
                    StageStatus {
                        done: true,
                        artifacts,
                        error: None,
                    },
                );
                self.manifest.write(self.out_dir)
            }
            Err(e) => {
                self.manifest.stages.insert(
                    name.to_string(),
                    StageStatus {
                        done: false,
                        artifacts,
                        error: Some(e.to_string()),
                    },
                );
                self.manifest.write(self.out_dir)?;
                Err(Error::Stage {
                    stage: name.to_string(),
                    source: Box::new(e),
                })
            }
        }
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Execute every stage in order, reusing completed stages from a previous
/// run with the same configuration.
pub fn run_all(config: &PipelineConfig, out_dir: &Path) -> Result<RunManifest> {
    ensure_dir(out_dir)?;
    config.encoder.validate()?;
    if config.preprocess_side != config.encoder.input_side {
        return Err(Error::Config(format!(
            "preprocess side {} does not match encoder input side {}",
            config.preprocess_side, config.encoder.input_side
        )));
    }
    let hash = config.hash();
    let manifest = match RunManifest::read(out_dir) {
        Ok(m) if m.config_hash == hash => m,
        _ => RunManifest::fresh(hash),
    };
    config.write(&out_dir.join("config.json"))?;
    let mut runner = StageRunner { out_dir, manifest };

    // data
    let data_manifest_rel = PathBuf::from("data/dataset.manifest");
    let data_manifest_path = out_dir.join(&data_manifest_rel);
    runner.run("data", vec![data_manifest_rel.clone()], || {
        ensure_dir(&out_dir.join("data"))?;
        let manifest = match &config.data {
            DataSource::Synth { spec } => generate_synthetic(spec, &out_dir.join("data"))?,
            DataSource::Real {
                images_root,
                ground_truth,
            } => ingest_classification(images_root, ground_truth)?,
        };
        manifest.write(&data_manifest_path)
    })?;

    // train-hair (optional)
    let hair_ckpt_rel = PathBuf::from("models/hair.ckpt");
    if config.hair.enabled {
        let hair_ckpt = out_dir.join(&hair_ckpt_rel);
        let hair_cfg = config.hair.clone();
        let seed = config.seed;
        runner.run("train-hair", vec![hair_ckpt_rel.clone()], || {
            ensure_dir(&out_dir.join("models"))?;
            let data_manifest = DatasetManifest::read(&data_manifest_path)?;
            let data = trainer::load_hair_data::<TrainScalar>(&data_manifest, hair_cfg.input_side)?;
            let mut cfg = hair_cfg.train.clone();
            cfg.seed = derive_seed(seed, "train-hair", 0);
            let mut model = crate::nets::HairNet::build(
                hair_cfg.input_side,
                derive_seed(seed, "hair-init", 0),
            )?;
            let record = trainer::train_hair(&mut model, &data, None, &cfg, &hair_ckpt)?;
            record.write(&out_dir.join("models/hair_run.json"))
        })?;
    }

    // preprocess
    let preproc_rel = PathBuf::from("preproc/preprocessed.manifest");
    let preproc_path = out_dir.join(&preproc_rel);
    runner.run("preprocess", vec![preproc_rel.clone()], || {
        let data_manifest = DatasetManifest::read(&data_manifest_path)?;
        let hair_model = if config.hair.enabled {
            Some(checkpoint::load_hair::<TrainScalar>(&out_dir.join(&hair_ckpt_rel))?.0)
        } else {
            None
        };
        let opts = PreprocessOptions {
            side: config.preprocess_side,
            hair_model: hair_model.as_ref(),
            hair_threshold: config.hair.threshold,
            force_hair_removal: config.hair.force_removal,
            removal: Default::default(),
        };
        let (preprocessed, verdicts) =
            preprocess_manifest(&data_manifest, &out_dir.join("preproc"), &opts)?;
        preprocessed.write(&preproc_path)?;
        write_verdict_log(&out_dir.join("preproc/hair_verdicts.tsv"), &verdicts)
    })?;

    // split
    let train_rel = PathBuf::from("split/train.manifest");
    let dev_rel = PathBuf::from("split/dev.manifest");
    runner.run(
        "split",
        vec![
            train_rel.clone(),
            dev_rel.clone(),
            PathBuf::from("split/split_plan.json"),
        ],
        || {
            ensure_dir(&out_dir.join("split"))?;
            let preprocessed = DatasetManifest::read(&preproc_path)?;
            let (train, dev, plan) =
                sampler::split(&preprocessed, derive_seed(config.seed, "split", 0))?;
            train.write(&out_dir.join(&train_rel))?;
            dev.write(&out_dir.join(&dev_rel))?;
            let text =
                serde_json::to_string_pretty(&plan).map_err(|e| Error::Other(e.to_string()))?;
            std::fs::write(out_dir.join("split/split_plan.json"), text)
                .map_err(|e| Error::io(out_dir.join("split/split_plan.json"), e))
        },
    )?;

    // sample
    let balanced_rels: Vec<PathBuf> = (1..=config.sampler.n_sets)
        .map(|k| PathBuf::from(format!("sample/balanced_{k}.manifest")))
        .collect();
    runner.run("sample", balanced_rels.clone(), || {
        ensure_dir(&out_dir.join("sample"))?;
        let train = DatasetManifest::read(&out_dir.join(&train_rel))?;
        let sets = sampler::balance(
            &train,
            config.sampler.anchor,
            config.sampler.n_sets,
            derive_seed(config.seed, "balance", 0),
        )?;
        for set in &sets {
            set.records
                .write(&out_dir.join(format!("sample/balanced_{}.manifest", set.index)))?;
        }
        Ok(())
    })?;

    // augment
    let augmented_rels: Vec<PathBuf> = (1..=config.sampler.n_sets)
        .map(|k| PathBuf::from(format!("augment/set_{k}/augmented.manifest")))
        .collect();
    runner.run("augment", augmented_rels.clone(), || {
        for k in 1..=config.sampler.n_sets {
            let balanced =
                DatasetManifest::read(&out_dir.join(format!("sample/balanced_{k}.manifest")))?;
            let set_dir = out_dir.join(format!("augment/set_{k}"));
            let expanded = augment::expand_manifest(&balanced, &set_dir)?;
            expanded.write(&set_dir.join("augmented.manifest"))?;
        }
        Ok(())
    })?;

    // train-seg
    let seg_ckpt_rel = PathBuf::from("models/seg.ckpt");
    let seg_ckpt = out_dir.join(&seg_ckpt_rel);
    runner.run("train-seg", vec![seg_ckpt_rel.clone()], || {
        ensure_dir(&out_dir.join("models"))?;
        let seg_manifest = match &config.seg_data {
            SegSource::TrainMasks { max_images } => {
                let train = DatasetManifest::read(&out_dir.join(&train_rel))?;
                let mut with_masks: Vec<_> = train
                    .records
                    .iter()
                    .filter(|r| r.mask.is_some())
                    .cloned()
                    .collect();
                if with_masks.is_empty() {
                    return Err(Error::Config(
                        "seg_data = train_masks but the training manifest has no masks".into(),
                    ));
                }
                if let Some(max) = *max_images {
                    if with_masks.len() > max && max > 0 {
                        // Evenly strided keep over the id-sorted list.
                        let n = with_masks.len();
                        with_masks = (0..max).map(|i| with_masks[i * n / max].clone()).collect();
                    }
                }
                let mut m = train.clone();
                m.records = with_masks;
                m
            }
            SegSource::Manifest { path } => DatasetManifest::read(path)?,
        };
        let data = trainer::load_seg_data::<TrainScalar>(&seg_manifest)?;
        let mut cfg = config.seg_train.clone();
        cfg.seed = derive_seed(config.seed, "train-seg", 0);
        let mut model = SegModel::<TrainScalar>::build(
            &config.encoder,
            derive_seed(config.seed, "seg-init", 0),
        )?;
        let record = trainer::train_seg(&mut model, &data, None, &cfg, &seg_ckpt)?;
        record.write(&out_dir.join("models/seg_run.json"))
    })?;

    // train-cls
    let cls_ckpt_rels: Vec<PathBuf> = (1..=config.sampler.n_sets)
        .map(|k| PathBuf::from(format!("models/cls_{k}.ckpt")))
        .collect();
    runner.run("train-cls", cls_ckpt_rels.clone(), || {
        let (seg, _) = checkpoint::load_seg::<TrainScalar>(&seg_ckpt)?;
        let dev = DatasetManifest::read(&out_dir.join(&dev_rel))?;
        let dev_data = trainer::load_cls_data::<TrainScalar>(&dev)?;
        for k in 1..=config.sampler.n_sets {
            let augmented = DatasetManifest::read(
                &out_dir.join(format!("augment/set_{k}/augmented.manifest")),
            )?;
            let data = trainer::load_cls_data::<TrainScalar>(&augmented)?;
            let mut model = transplant_encoder(
                &seg,
                &config.encoder,
                ClassLabel::COUNT,
                derive_seed(config.seed, "cls-head", k as u64),
            )?;
            let mut cfg = config.cls_train.clone();
            cfg.seed = derive_seed(config.seed, "train-cls", k as u64);
            let ckpt = out_dir.join(format!("models/cls_{k}.ckpt"));
            let record = trainer::train_cls(&mut model, &data, Some(&dev_data), &cfg, &ckpt)?;
            record.write(&out_dir.join(format!("models/cls_{k}_run.json")))?;
        }
        Ok(())
    })?;

    // weights
    runner.run(
        "weights",
        vec![
            PathBuf::from("ensemble/weights.json"),
            PathBuf::from("ensemble/dev_confusions.json"),
        ],
        || {
            ensure_dir(&out_dir.join("ensemble"))?;
            let dev = DatasetManifest::read(&out_dir.join(&dev_rel))?;
            let dev_data = trainer::load_cls_data::<TrainScalar>(&dev)?;
            let mut confusions = Vec::new();
            for k in 1..=config.sampler.n_sets {
                let (mut model, _) = checkpoint::load_cls::<TrainScalar>(
                    &out_dir.join(format!("models/cls_{k}.ckpt")),
                )?;
                let probs = crate::nets::predict_probs_batched(&mut model, &dev_data.images, 32);
                let preds: Vec<usize> = probs
                    .rows()
                    .into_iter()
                    .map(|row| {
                        row.iter()
                            .enumerate()
                            .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| {
                                if v > bv {
                                    (i, v)
                                } else {
                                    (bi, bv)
                                }
                            })
                            .0
                    })
                    .collect();
                confusions.push(metrics::confusion(
                    &dev_data.labels,
                    &preds,
                    ClassLabel::COUNT,
                )?);
            }
            let weights = ensemble::compute_weights::<f64>(&confusions)?;
            let weight_rows: Vec<Vec<f64>> = weights
                .values()
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect();
            let text = serde_json::to_string_pretty(&weight_rows)
                .map_err(|e| Error::Other(e.to_string()))?;
            std::fs::write(out_dir.join("ensemble/weights.json"), text)
                .map_err(|e| Error::io(out_dir.join("ensemble/weights.json"), e))?;
            let text = serde_json::to_string_pretty(&confusions)
                .map_err(|e| Error::Other(e.to_string()))?;
            std::fs::write(out_dir.join("ensemble/dev_confusions.json"), text)
                .map_err(|e| Error::io(out_dir.join("ensemble/dev_confusions.json"), e))
        },
    )?;

    // ensemble
    runner.run(
        "ensemble",
        vec![
            PathBuf::from("ensemble/predictions.csv"),
            PathBuf::from("ensemble/predictions_labels.csv"),
        ],
        || {
            let dev = DatasetManifest::read(&out_dir.join(&dev_rel))?;
            let target = match &config.ensemble_target {
                Some(path) => DatasetManifest::read(path)?,
                None => dev.clone(),
            };
            let checkpoints: Vec<PathBuf> = (1..=config.sampler.n_sets)
                .map(|k| out_dir.join(format!("models/cls_{k}.ckpt")))
                .collect();
            ensemble::run_ensemble(&checkpoints, &dev, &target, &out_dir.join("ensemble"))?;
            Ok(())
        },
    )?;

    // evaluate
    runner.run("evaluate", vec![PathBuf::from("eval/metrics.json")], || {
        ensure_dir(&out_dir.join("eval"))?;
        let summary = evaluate(out_dir, config)?;
        let text =
            serde_json::to_string_pretty(&summary).map_err(|e| Error::Other(e.to_string()))?;
        std::fs::write(out_dir.join("eval/metrics.json"), text)
            .map_err(|e| Error::io(out_dir.join("eval/metrics.json"), e))
    })?;

    // report
    runner.run("report", vec![PathBuf::from("report/report.txt")], || {
        report(out_dir).map(|_| ())
    })?;

    let mut manifest = runner.manifest;
    let metrics_path = out_dir.join("eval/metrics.json");
    let text = std::fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    manifest.metrics = Some(serde_json::from_str(&text).map_err(|e| Error::Other(e.to_string()))?);
    manifest.write(out_dir)?;
    Ok(manifest)
}

/// Per-model and ensemble metrics on the shared dev set.
fn evaluate(out_dir: &Path, config: &PipelineConfig) -> Result<MetricsSummary> {
    let dev = DatasetManifest::read(&out_dir.join("split/dev.manifest"))?;
    let confusions: Vec<ConfusionMatrix> = {
        let path = out_dir.join("ensemble/dev_confusions.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Other(e.to_string()))?
    };
    let per_model: Vec<f64> = confusions
        .iter()
        .map(|cm| metrics::class_metrics::<f64>(cm).map(|m| m.balanced_accuracy))
        .collect::<Result<_>>()?;
    let (mean, stddev) = mean_stddev(&per_model);

    // Ensemble metrics on dev: reuse the predictions file when the target is
    // the dev manifest, otherwise rescore dev from the checkpoints.
    let (ids, preds): (Vec<String>, Vec<ClassLabel>) = if config.ensemble_target.is_none() {
        ensemble::read_prediction_labels(&out_dir.join("ensemble/predictions_labels.csv"))?
            .into_iter()
            .unzip()
    } else {
        let checkpoints: Vec<PathBuf> = (1..=config.sampler.n_sets)
            .map(|k| out_dir.join(format!("models/cls_{k}.ckpt")))
            .collect();
        let run = ensemble::run_ensemble(&checkpoints, &dev, &dev, &out_dir.join("eval"))?;
        let labels = ensemble::predict_labels(&run.scores)?;
        (run.target_ids, labels)
    };
    let truth_by_id: BTreeMap<&str, ClassLabel> = dev
        .records
        .iter()
        .map(|r| {
            r.label
                .map(|l| (r.id.as_str(), l))
                .ok_or_else(|| Error::UnlabeledRecord(r.id.clone()))
        })
        .collect::<Result<_>>()?;
    let mut truth = Vec::with_capacity(ids.len());
    for id in &ids {
        truth.push(
            *truth_by_id
                .get(id.as_str())
                .ok_or_else(|| Error::Manifest(format!("prediction for unknown image '{id}'")))?,
        );
    }
    let cm = metrics::confusion_labels(&truth, &preds)?;
    let text = serde_json::to_string_pretty(&cm).map_err(|e| Error::Other(e.to_string()))?;
    std::fs::write(out_dir.join("eval/ensemble_confusion.json"), text)
        .map_err(|e| Error::io(out_dir.join("eval/ensemble_confusion.json"), e))?;
    let m = metrics::class_metrics::<f64>(&cm)?;
    Ok(MetricsSummary {
        per_model_dev_balanced_accuracy: per_model,
        mean_dev_balanced_accuracy: mean,
        stddev_dev_balanced_accuracy: stddev,
        ensemble_dev_balanced_accuracy: m.balanced_accuracy,
        ensemble_dev_accuracy: m.accuracy,
    })
}

/// Render the report files from a completed run; returns the report path.
pub fn report(out_dir: &Path) -> Result<PathBuf> {
    ensure_dir(&out_dir.join("report"))?;
    let metrics_path = out_dir.join("eval/metrics.json");
    if !metrics_path.is_file() {
        return Err(Error::IncompleteRun("evaluate".into()));
    }
    let text = std::fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let summary: MetricsSummary =
        serde_json::from_str(&text).map_err(|e| Error::Other(e.to_string()))?;
    let confusions: Vec<ConfusionMatrix> = {
        let path = out_dir.join("ensemble/dev_confusions.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Other(e.to_string()))?
    };
    let ensemble_cm: ConfusionMatrix = {
        let path = out_dir.join("eval/ensemble_confusion.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Other(e.to_string()))?
    };

    let codes: Vec<&str> = ClassLabel::ALL.iter().map(|l| l.code()).collect();
    let mut out = String::new();
    out.push_str("dev-set results\n===============\n\n");
    for (k, ba) in summary.per_model_dev_balanced_accuracy.iter().enumerate() {
        out.push_str(&format!("model {}: balanced accuracy {:.4}\n", k + 1, ba));
    }
    out.push_str(&format!(
        "\nmodel mean: {:.4} +/- {:.4} (population stddev)\n",
        summary.mean_dev_balanced_accuracy, summary.stddev_dev_balanced_accuracy
    ));
    out.push_str(&format!(
        "ensemble:   balanced accuracy {:.4}, accuracy {:.4}\n",
        summary.ensemble_dev_balanced_accuracy, summary.ensemble_dev_accuracy
    ));
    out.push_str(&format!(
        "\nreference full-scale run: dev balanced accuracy {:.3} +/- {:.3}, \
         validation accuracy {:.3}, test accuracy {:.3}\n",
        REFERENCE_DEV_BALANCED_ACCURACY,
        REFERENCE_DEV_BALANCED_ACCURACY_STD,
        REFERENCE_VALIDATION_ACCURACY,
        REFERENCE_TEST_ACCURACY
    ));
    out.push_str("\nensemble dev confusion (counts)\n");
    out.push_str(&metrics::format_confusion(&ensemble_cm, &codes));
    for (k, cm) in confusions.iter().enumerate() {
        metrics::render_heatmap(
            cm,
            &codes,
            &out_dir.join(format!("report/confusion_model_{}.png", k + 1)),
        )?;
    }
    metrics::render_heatmap(
        &ensemble_cm,
        &codes,
        &out_dir.join("report/confusion_ensemble.png"),
    )?;
    let report_path = out_dir.join("report/report.txt");
    std::fs::write(&report_path, out).map_err(|e| Error::io(&report_path, e))?;
    Ok(report_path)
}

/// Mean and population stddev of per-model scores, as shown in reports.
pub fn mean_stddev(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}
