//! End-to-end pipeline commands: synth, prepare, augment, tune, train,
//! evaluate, plot-data. Each command is a pure function of (config, seed,
//! upstream artifacts) and writes a `run.json` provenance record.

use std::fmt::Write as _;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment;
use crate::bayes::{self, BoOptions};
use crate::config::{file_sha256, PipelineConfig};
use crate::ensemble::{train_ensemble, Ensemble};
use crate::error::{Error, Result};
use crate::eval::{self, MetricsReport};
use crate::ingest::{self, ManifestEntry, Split};
use crate::models::{build_model, train, ArchId, LabeledImages};
use crate::scalar::mix_seed;
use crate::synth;

/// Workdir artifact paths for one configuration.
pub struct Artifacts<'a> {
    cfg: &'a PipelineConfig,
}

impl<'a> Artifacts<'a> {
    pub fn new(cfg: &'a PipelineConfig) -> Self {
        Artifacts { cfg }
    }

    pub fn manifest(&self) -> PathBuf {
        self.cfg.workdir.join("manifest.csv")
    }

    pub fn augmented_manifest(&self) -> PathBuf {
        self.cfg.workdir.join("manifest_augmented.csv")
    }

    pub fn augmented_dir(&self) -> PathBuf {
        self.cfg.workdir.join("augmented")
    }

    pub fn tune_trace(&self, arch: ArchId) -> PathBuf {
        self.cfg.workdir.join(format!("tune_{}.jsonl", arch.letter()))
    }

    pub fn best_theta(&self, arch: ArchId) -> PathBuf {
        self.cfg.workdir.join(format!("best_{}.json", arch.letter()))
    }

    pub fn ensemble_dir(&self, arch: ArchId) -> PathBuf {
        self.cfg.workdir.join("ensembles").join(arch.letter())
    }

    pub fn metrics(&self) -> PathBuf {
        self.cfg.workdir.join("metrics.json")
    }

    pub fn roc_csv(&self) -> PathBuf {
        self.cfg.workdir.join("roc.csv")
    }

    pub fn curves_csv(&self, arch: ArchId) -> PathBuf {
        self.cfg.workdir.join(format!("curves_{}.csv", arch.letter()))
    }

    pub fn run_record(&self) -> PathBuf {
        self.cfg.workdir.join("run.json")
    }
}

#[derive(Serialize, Deserialize)]
struct RunRecord {
    command: String,
    config_hash: String,
    seed: u64,
    /// Consumed artifacts with content hashes.
    inputs: Vec<RunInput>,
}

#[derive(Serialize, Deserialize)]
struct RunInput {
    path: String,
    sha256: String,
}

fn write_run_record(cfg: &PipelineConfig, command: &str, inputs: &[PathBuf]) -> Result<()> {
    let record = RunRecord {
        command: command.to_string(),
        config_hash: cfg.config_hash.clone(),
        seed: cfg.seed,
        inputs: inputs
            .iter()
            .map(|p| {
                Ok(RunInput {
                    path: p.display().to_string(),
                    sha256: file_sha256(p)?,
                })
            })
            .collect::<Result<_>>()?,
    };
    let path = Artifacts::new(cfg).run_record();
    let json = serde_json::to_string_pretty(&record)
        .map_err(|e| Error::Data(format!("run record serialization: {e}")))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

fn ensure_workdir(cfg: &PipelineConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.workdir).map_err(|e| Error::io(&cfg.workdir, e))
}

/// Generate the synthetic benchmark dataset under `dataset_root`.
pub fn cmd_synth(cfg: &PipelineConfig) -> Result<()> {
    ensure_workdir(cfg)?;
    synth::generate_dataset(
        &cfg.dataset_root,
        &cfg.class_dirs,
        cfg.synth_per_class,
        cfg.image_size,
        cfg.seed,
    )?;
    write_run_record(cfg, "synth", &[])
}

/// Scan the dataset, split it, and write the manifest.
pub fn cmd_prepare(cfg: &PipelineConfig) -> Result<()> {
    ensure_workdir(cfg)?;
    let index = ingest::scan_dataset(&cfg.dataset_root, &cfg.class_dirs)?;
    let split = ingest::split_dataset(&index, cfg.seed)?;
    let rows = ingest::manifest_entries(&index, &split);
    ingest::write_manifest(&Artifacts::new(cfg).manifest(), &rows)?;
    write_run_record(cfg, "prepare", &[])
}

fn read_manifest_or_hint(path: &PathBuf, prior: &str) -> Result<Vec<ManifestEntry>> {
    if !path.exists() {
        return Err(Error::Data(format!(
            "missing manifest {}; run `{}` first",
            path.display(),
            prior
        )));
    }
    ingest::read_manifest(path)
}

/// Expand the training split and write the augmented manifest.
pub fn cmd_augment(cfg: &PipelineConfig) -> Result<()> {
    ensure_workdir(cfg)?;
    let art = Artifacts::new(cfg);
    let rows = read_manifest_or_hint(&art.manifest(), "prepare")?;
    let train_rows: Vec<ManifestEntry> = rows
        .iter()
        .filter(|r| r.split == Split::Train)
        .cloned()
        .collect();
    let policy = cfg.augment_policy();
    let expanded = augment::augment_split::<f32>(&train_rows, &policy, &art.augmented_dir())?;
    let mut all_rows = expanded;
    all_rows.extend(rows.into_iter().filter(|r| r.split != Split::Train));
    ingest::write_manifest(&art.augmented_manifest(), &all_rows)?;
    write_run_record(cfg, "augment", &[art.manifest()])
}

/// Rows from the augmented manifest when present, else the raw manifest.
fn training_manifest(cfg: &PipelineConfig) -> Result<(PathBuf, Vec<ManifestEntry>)> {
    let art = Artifacts::new(cfg);
    let path = if art.augmented_manifest().exists() {
        art.augmented_manifest()
    } else {
        art.manifest()
    };
    let rows = read_manifest_or_hint(&path, "prepare")?;
    Ok((path, rows))
}

/// Load one split's images, resized to the configured input size.
pub fn load_split(
    cfg: &PipelineConfig,
    rows: &[ManifestEntry],
    split: Split,
) -> Result<LabeledImages<f32>> {
    let wanted: Vec<&ManifestEntry> = rows.iter().filter(|r| r.split == split).collect();
    let loaded: Vec<(crate::nn::Tensor<f32>, u8)> = wanted
        .par_iter()
        .map(|row| -> Result<_> {
            let raw = ingest::load_image(&row.path)?;
            let img = augment::scale_features::<f32>(&raw);
            let img = if raw.height == cfg.image_size && raw.width == cfg.image_size {
                img
            } else {
                augment::resize(&img, cfg.image_size, cfg.image_size)?
            };
            Ok((img, row.label.value()))
        })
        .collect::<Result<_>>()?;
    let mut set = LabeledImages::default();
    for (img, label) in loaded {
        set.push(img, label);
    }
    if set.is_empty() {
        return Err(Error::Data(format!("split {:?} is empty", split.as_str())));
    }
    Ok(set)
}

/// Bayesian-optimize hyperparameters for one architecture; writes the
/// trace (JSONL) and the best configuration.
pub fn cmd_tune(cfg: &PipelineConfig, arch: ArchId) -> Result<()> {
    ensure_workdir(cfg)?;
    let art = Artifacts::new(cfg);
    let (manifest_path, rows) = training_manifest(cfg)?;
    let train_set = load_split(cfg, &rows, Split::Train)?;
    let val_set = load_split(cfg, &rows, Split::Val)?;
    let input_hw = (cfg.image_size, cfg.image_size);

    let mut trial = 0u64;
    let objective = |h: &bayes::HyperParams| -> Result<f64> {
        let seed = mix_seed(cfg.seed, &[0x7e, arch as u64, trial]);
        trial += 1;
        let model = build_model::<f32>(arch, h, input_hw, seed)?;
        let trained = train(
            model,
            &train_set,
            &val_set,
            cfg.bo_epochs,
            cfg.batch_size.min(train_set.len()),
            h,
            seed,
        )?;
        let (_, val_acc) = trained.evaluate(&val_set)?;
        println!(
            "tune[{}] trial {}: units={} opt={} lr={:.2e} -> val acc {:.4}",
            arch.letter(),
            trial,
            h.units,
            h.optimizer,
            h.learning_rate,
            val_acc
        );
        Ok(val_acc)
    };
    let opts = BoOptions {
        k_init: cfg.bo_k_init,
        n_max: cfg.bo_n_max,
        seed: mix_seed(cfg.seed, &[0xb0, arch as u64]),
        ..BoOptions::default()
    };
    let trace = bayes::bo_loop(&cfg.space, objective, &opts)?;
    for it in &trace.iterations {
        println!(
            "tune[{}] iter {}: y={:.4} (incumbent {:.4})",
            arch.letter(),
            it.iter,
            it.y,
            trace.best_y
        );
    }
    bayes::write_trace_jsonl(&art.tune_trace(arch), &trace)?;
    let best_path = art.best_theta(arch);
    let json = serde_json::to_string_pretty(&trace.best_theta)
        .map_err(|e| Error::Data(format!("best theta serialization: {e}")))?;
    std::fs::write(&best_path, json).map_err(|e| Error::io(&best_path, e))?;
    write_run_record(cfg, "tune", &[manifest_path])
}

fn hyper_for_training(cfg: &PipelineConfig, arch: ArchId) -> Result<bayes::HyperParams> {
    let best_path = Artifacts::new(cfg).best_theta(arch);
    if best_path.exists() {
        let text = std::fs::read_to_string(&best_path).map_err(|e| Error::io(&best_path, e))?;
        let h: bayes::HyperParams = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", best_path.display())))?;
        cfg.space.validate(&h)?;
        return Ok(h);
    }
    cfg.hyper_for(arch)
}

/// Train the deep ensemble for one architecture.
pub fn cmd_train(cfg: &PipelineConfig, arch: ArchId) -> Result<()> {
    ensure_workdir(cfg)?;
    let art = Artifacts::new(cfg);
    let (manifest_path, rows) = training_manifest(cfg)?;
    let train_set = load_split(cfg, &rows, Split::Train)?;
    let val_set = load_split(cfg, &rows, Split::Val)?;
    let h = hyper_for_training(cfg, arch)?;
    let ensemble = train_ensemble::<f32>(
        arch,
        &h,
        (cfg.image_size, cfg.image_size),
        &train_set,
        &val_set,
        cfg.epochs,
        cfg.batch_size.min(train_set.len()),
        cfg.ensemble_m,
        mix_seed(cfg.seed, &[0x7a11, arch as u64]),
    )?;
    ensemble.save(&art.ensemble_dir(arch))?;
    for (i, member) in ensemble.members.iter().enumerate() {
        if let Some(last) = member.history.last() {
            println!(
                "train[{}] member {}: val loss {:.4}, val acc {:.4}",
                arch.letter(),
                i,
                last.val_loss,
                last.val_acc
            );
        }
    }
    write_run_record(cfg, "train", &[manifest_path])
}

fn load_ensemble_or_hint(cfg: &PipelineConfig, arch: ArchId) -> Result<Ensemble<f32>> {
    let dir = Artifacts::new(cfg).ensemble_dir(arch);
    if !dir.join("ensemble.json").exists() {
        return Err(Error::Data(format!(
            "missing ensemble for arch {} at {}; run `train --arch {}` first",
            arch.letter(),
            dir.display(),
            arch.letter()
        )));
    }
    Ensemble::load(&dir)
}

fn write_roc_csv(path: &PathBuf, report: &MetricsReport) -> Result<()> {
    let mut out = String::from("fpr,tpr\n");
    for (fpr, tpr) in &report.roc {
        writeln!(out, "{},{}", fpr, tpr).expect("string write cannot fail");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn write_curves_csv(path: &PathBuf, arch: ArchId, ensemble: &Ensemble<f32>) -> Result<()> {
    let mut out = String::from("arch,member,epoch,train_loss,train_acc,val_loss,val_acc\n");
    for (m, member) in ensemble.members.iter().enumerate() {
        for (e, stats) in member.history.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                arch.letter(),
                m,
                e,
                stats.train_loss,
                stats.train_acc,
                stats.val_loss,
                stats.val_acc
            )
            .expect("string write cannot fail");
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Load the three ensembles, fuse on the raw test split, and emit the
/// metrics report plus plot-data CSVs.
pub fn cmd_evaluate(cfg: &PipelineConfig) -> Result<()> {
    ensure_workdir(cfg)?;
    let art = Artifacts::new(cfg);
    let rows = read_manifest_or_hint(&art.manifest(), "prepare")?;
    let test_set = load_split(cfg, &rows, Split::Test)?;

    let ensembles = [
        load_ensemble_or_hint(cfg, ArchId::InceptionLike)?,
        load_ensemble_or_hint(cfg, ArchId::MobileLike)?,
        load_ensemble_or_hint(cfg, ArchId::EfficientLike)?,
    ];
    let mut score_sets: Vec<Vec<Vec<f64>>> = Vec::with_capacity(3);
    for ensemble in &ensembles {
        let preds = ensemble.predict_uncertain(&test_set.images)?;
        score_sets.push(preds.into_iter().map(|p| p.mean).collect());
    }
    let y_true: Vec<crate::ingest::LabelId> = test_set
        .labels
        .iter()
        .map(|&l| crate::ingest::LabelId::new(l).expect("labels come from the manifest"))
        .collect();
    let report = eval::evaluate_pipeline(
        [&score_sets[0], &score_sets[1], &score_sets[2]],
        &y_true,
    )?;

    let metrics_path = art.metrics();
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Data(format!("metrics serialization: {e}")))?;
    std::fs::write(&metrics_path, json).map_err(|e| Error::io(&metrics_path, e))?;
    write_roc_csv(&art.roc_csv(), &report)?;
    for (arch, ensemble) in ArchId::ALL.iter().zip(&ensembles) {
        write_curves_csv(&art.curves_csv(*arch), *arch, ensemble)?;
    }
    if let Some(acc) = report.accuracy {
        println!("evaluate: fused accuracy {:.4}, auc {:.4}", acc, report.auc);
    }
    let mut inputs = vec![art.manifest()];
    for arch in ArchId::ALL {
        inputs.push(art.ensemble_dir(arch).join("ensemble.json"));
    }
    write_run_record(cfg, "evaluate", &inputs)
}

/// Re-emit the ROC and per-epoch curve CSVs from stored artifacts.
pub fn cmd_plot_data(cfg: &PipelineConfig) -> Result<()> {
    ensure_workdir(cfg)?;
    let art = Artifacts::new(cfg);
    let metrics_path = art.metrics();
    if !metrics_path.exists() {
        return Err(Error::Data(format!(
            "missing metrics {}; run `evaluate` first",
            metrics_path.display()
        )));
    }
    let text = std::fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let report: MetricsReport = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", metrics_path.display())))?;
    write_roc_csv(&art.roc_csv(), &report)?;
    for arch in ArchId::ALL {
        let ensemble = load_ensemble_or_hint(cfg, arch)?;
        write_curves_csv(&art.curves_csv(arch), arch, &ensemble)?;
    }
    write_run_record(cfg, "plot-data", &[metrics_path])
}
