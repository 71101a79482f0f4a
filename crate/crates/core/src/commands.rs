//! Implementations behind the CLI subcommands: dataset generation, training
//! with stratified cross-validation, hold-out evaluation, and per-patient
//! explanation reports. All file outputs are deterministic given the seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::data::{assemble_dataset, prepare_patients, Dataset, PreparedPatient, RawDataset};
use crate::error::{Error, Result};
use crate::explain::{build_stain_report, sparsification_trace, StainReport};
use crate::io::manifest::{write_edges_file, Manifest, ManifestPatient, ManifestSlide};
use crate::io::{
    load_checkpoint, load_raw_dataset, read_manifest, read_patient_graph, save_checkpoint,
    write_coords_file, write_feature_file, write_manifest, write_patient_graph,
};
use crate::metrics::{eval_metrics, Metrics};
use crate::model::{forward, ForwardMode, ModelConfig, ModelParams};
use crate::seeding::mix_seed;
use crate::synth::{generate_csl_task, generate_patients, SynthSpec};
use crate::training::{evaluate, stratified_split, train_fold, TrainConfig};

/// Formats a float with the shortest round-trip representation; stable
/// across runs, which keeps every report byte-identical.
fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_else(|| "undefined".into())
}

// ── dataset generation ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthTask {
    Planted,
    Csl,
}

/// Writes a raw dataset as manifest + per-patient feature/coords files
/// (plus an edge file for explicit-topology patients). Returns the manifest
/// path.
pub fn write_raw_dataset(raw: &RawDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut patients = Vec::with_capacity(raw.patients.len());
    for p in &raw.patients {
        let pdir = dir.join(&p.id);
        fs::create_dir_all(&pdir)?;
        // Slides in first-appearance order; rows keep record order so the
        // loaded node order matches the generated one.
        let mut slide_order: Vec<&str> = Vec::new();
        for r in &p.records {
            if !slide_order.contains(&r.slide_id.as_str()) {
                slide_order.push(&r.slide_id);
            }
        }
        let mut slides = Vec::new();
        for slide_id in slide_order {
            let rows: Vec<&crate::graph::PatchRecord> = p
                .records
                .iter()
                .filter(|r| r.slide_id == slide_id)
                .collect();
            let stain = rows[0].stain.clone();
            let stack_index = rows[0].stack_index;
            let feats: Vec<Vec<f64>> = rows.iter().map(|r| r.feature.clone()).collect();
            let coords: Vec<(f64, f64)> = rows.iter().map(|r| (r.x, r.y)).collect();
            let feature_file = format!("{}/{}.bxf", p.id, stain);
            let coords_file = format!("{}/{}.coords.csv", p.id, stain);
            write_feature_file(&dir.join(&feature_file), &feats)?;
            write_coords_file(&dir.join(&coords_file), &coords)?;
            slides.push(ManifestSlide {
                slide_id: slide_id.to_string(),
                stain,
                stack_index,
                feature_file,
                coords_file,
            });
        }
        let edges_file = match &p.explicit_edges {
            Some(edges) => {
                let rel = format!("{}/edges.csv", p.id);
                write_edges_file(&dir.join(&rel), edges)?;
                Some(rel)
            }
            None => None,
        };
        patients.push(ManifestPatient {
            id: p.id.clone(),
            label: raw.class_names[p.label].clone(),
            edges_file,
            slides,
        });
    }
    let manifest = Manifest {
        dataset: raw.name.clone(),
        stains: raw.stains.clone(),
        labels: raw
            .class_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect(),
        patients,
    };
    let path = dir.join("manifest.toml");
    write_manifest(&path, &manifest)?;
    Ok(path)
}

pub fn cmd_generate(task: SynthTask, spec: &SynthSpec, out_dir: &Path) -> Result<PathBuf> {
    let raw = match task {
        SynthTask::Planted => generate_patients(spec)?,
        SynthTask::Csl => generate_csl_task(spec.patients_per_class, spec.seed)?,
    };
    let manifest = write_raw_dataset(&raw, out_dir)?;
    let n_nodes: usize = raw.patients.iter().map(|p| p.records.len()).sum();
    println!(
        "dataset {} written to {}: {} patients, {} classes, {} stains, {} patches",
        raw.name,
        out_dir.display(),
        raw.patients.len(),
        raw.class_names.len(),
        raw.stains.len(),
        n_nodes
    );
    Ok(manifest)
}

// ── graph building with on-disk cache ───────────────────────────────

/// Cache key: manifest bytes plus every graph-construction parameter.
fn graph_cache_dir(manifest_path: &Path, knn_k: usize) -> Result<PathBuf> {
    let bytes = fs::read(manifest_path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    hasher.update(b"knn_k");
    hasher.update(knn_k.to_le_bytes());
    let digest = hasher.finalize();
    let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    Ok(base.join("graph_cache").join(hex))
}

/// Loads built graphs from the cache, or builds and stores them.
pub fn load_or_build_graphs(manifest_path: &Path, knn_k: usize) -> Result<Dataset> {
    let raw = load_raw_dataset(manifest_path)?;
    let cache = graph_cache_dir(manifest_path, knn_k)?;
    let all_cached = raw
        .patients
        .iter()
        .all(|p| cache.join(format!("{}.bxg", p.id)).is_file());
    if all_cached {
        let patients = raw
            .patients
            .par_iter()
            .map(|p| {
                let graph = read_patient_graph(&cache.join(format!("{}.bxg", p.id)))?;
                Ok(crate::data::PatientSample {
                    id: p.id.clone(),
                    label: p.label,
                    graph,
                })
            })
            .collect::<Result<_>>()?;
        let ds = Dataset {
            name: raw.name.clone(),
            class_names: raw.class_names.clone(),
            stains: raw.stains.clone(),
            patients,
        };
        ds.validate()?;
        return Ok(ds);
    }
    let dataset = assemble_dataset(&raw, knn_k)?;
    fs::create_dir_all(&cache)?;
    for p in &dataset.patients {
        write_patient_graph(&cache.join(format!("{}.bxg", p.id)), &p.graph)?;
    }
    Ok(dataset)
}

// ── training ────────────────────────────────────────────────────────

/// User-settable encoder hyperparameters; data-dependent fields are filled
/// from the dataset.
#[derive(Debug, Clone)]
pub struct ModelSettings {
    pub layers: usize,
    pub hidden_dim: usize,
    pub pe_dim: usize,
    pub pool_ratio: f64,
    pub gat_heads: usize,
    pub mhsa_heads: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            layers: 4,
            hidden_dim: 16,
            pe_dim: 20,
            pool_ratio: 0.7,
            gat_heads: 2,
            mhsa_heads: 2,
            dropout: 0.2,
            leaky_slope: 0.2,
        }
    }
}

impl ModelSettings {
    pub fn into_config(self, dataset: &Dataset, knn_k: usize, seed: u64) -> Result<ModelConfig> {
        let input_dim = dataset
            .patients
            .first()
            .and_then(|p| p.graph.nodes.first())
            .map(|n| n.feature.len())
            .ok_or_else(|| Error::Config("dataset has no patches".into()))?;
        for p in &dataset.patients {
            if let Some(bad) = p.graph.nodes.iter().find(|n| n.feature.len() != input_dim) {
                return Err(Error::Config(format!(
                    "patient {} mixes feature dimensions {} and {input_dim}",
                    p.id,
                    bad.feature.len()
                )));
            }
        }
        let config = ModelConfig {
            layers: self.layers,
            hidden_dim: self.hidden_dim,
            pe_dim: self.pe_dim,
            pool_ratio: self.pool_ratio,
            gat_heads: self.gat_heads,
            mhsa_heads: self.mhsa_heads,
            dropout: self.dropout,
            num_classes: dataset.class_names.len(),
            knn_k,
            seed,
            input_dim,
            leaky_slope: self.leaky_slope,
        };
        config.validate()?;
        Ok(config)
    }
}

fn history_text(history: &[crate::training::EpochStats]) -> String {
    let mut out = String::new();
    for h in history {
        let _ = writeln!(
            out,
            "epoch {} train_loss {} val_loss {} val_acc {} val_auc {}",
            h.epoch,
            fmt_f64(h.train_loss),
            fmt_f64(h.val_loss),
            fmt_f64(h.val_accuracy),
            fmt_opt(h.val_auc)
        );
    }
    out
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub fold_metrics: Vec<Metrics>,
    pub report_path: PathBuf,
    pub checkpoint_paths: Vec<PathBuf>,
}

pub fn cmd_train(
    manifest_path: &Path,
    out_dir: &Path,
    settings: ModelSettings,
    train_config: &TrainConfig,
    knn_k: usize,
    seed: u64,
) -> Result<TrainOutcome> {
    train_config.validate()?;
    fs::create_dir_all(out_dir)?;
    let dataset = load_or_build_graphs(manifest_path, knn_k)?;
    let config = settings.into_config(&dataset, knn_k, seed)?;
    let prepared = prepare_patients(&dataset, &config)?;
    let labels = dataset.labels();
    let plan = stratified_split(
        &labels,
        train_config.folds,
        train_config.holdout_fraction,
        seed,
    )?;

    let trained: Vec<_> = plan
        .folds
        .par_iter()
        .enumerate()
        .map(|(f, fold)| {
            train_fold(
                &prepared,
                fold,
                &config,
                train_config,
                mix_seed(seed, 1000 + f as u64),
            )
        })
        .collect::<Result<_>>()?;

    let mut checkpoint_paths = Vec::new();
    let mut fold_metrics = Vec::new();
    for (f, t) in trained.iter().enumerate() {
        let ckpt = out_dir.join(format!("fold{f}.bxc"));
        save_checkpoint(&ckpt, &config, &t.params)?;
        fs::write(
            out_dir.join(format!("fold{f}_history.txt")),
            history_text(&t.history),
        )?;
        checkpoint_paths.push(ckpt);

        let eval = evaluate(&t.params, &prepared, &plan.holdout, &config)?;
        fold_metrics.push(eval_metrics(&eval.scores, &eval.labels)?);
    }

    let mut report = String::new();
    let _ = writeln!(report, "dataset {}", dataset.name);
    let _ = writeln!(report, "patients {}", dataset.patients.len());
    let _ = writeln!(report, "holdout_size {}", plan.holdout.len());
    let _ = writeln!(report, "folds {}", plan.folds.len());
    let _ = writeln!(report, "seed {seed}");
    for (f, m) in fold_metrics.iter().enumerate() {
        for (name, value) in Metrics::NAMES.iter().zip(m.values()) {
            let _ = writeln!(report, "fold {f} {name} {}", fmt_opt(value));
        }
    }
    for (i, name) in Metrics::NAMES.iter().enumerate() {
        let values: Vec<f64> = fold_metrics.iter().filter_map(|m| m.values()[i]).collect();
        if values.len() == fold_metrics.len() {
            let (mean, se) = mean_and_se(&values);
            let _ = writeln!(
                report,
                "aggregate {name} mean {} se {}",
                fmt_f64(mean),
                fmt_f64(se)
            );
        } else {
            let _ = writeln!(report, "aggregate {name} mean undefined se undefined");
        }
    }
    let report_path = out_dir.join("report.txt");
    fs::write(&report_path, &report)?;
    print!("{report}");
    Ok(TrainOutcome {
        fold_metrics,
        report_path,
        checkpoint_paths,
    })
}

// ── evaluation ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Holdout,
    All,
}

/// Loads a checkpoint and a manifest (graphs built with the checkpoint's
/// construction parameters) ready for inference.
fn load_model_and_data(
    manifest_path: &Path,
    checkpoint_path: &Path,
) -> Result<(ModelConfig, ModelParams, Dataset, Vec<PreparedPatient>)> {
    let (config, params) = load_checkpoint(checkpoint_path)?;
    let dataset = load_or_build_graphs(manifest_path, config.knn_k)?;
    if dataset.class_names.len() != config.num_classes {
        return Err(Error::Config(format!(
            "checkpoint expects {} classes, dataset declares {}",
            config.num_classes,
            dataset.class_names.len()
        )));
    }
    let prepared = prepare_patients(&dataset, &config)?;
    Ok((config, params, dataset, prepared))
}

pub fn cmd_eval(
    manifest_path: &Path,
    checkpoint_path: &Path,
    split: EvalSplit,
    train_config: &TrainConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<Metrics> {
    fs::create_dir_all(out_dir)?;
    let (config, params, dataset, prepared) = load_model_and_data(manifest_path, checkpoint_path)?;
    let indices: Vec<usize> = match split {
        EvalSplit::All => (0..prepared.len()).collect(),
        EvalSplit::Holdout => {
            let labels = dataset.labels();
            stratified_split(
                &labels,
                train_config.folds,
                train_config.holdout_fraction,
                seed,
            )?
            .holdout
        }
    };
    if indices.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    let eval = evaluate(&params, &prepared, &indices, &config)?;
    let metrics = eval_metrics(&eval.scores, &eval.labels)?;
    let mut report = String::new();
    let _ = writeln!(report, "dataset {}", dataset.name);
    let _ = writeln!(
        report,
        "split {}",
        match split {
            EvalSplit::Holdout => "holdout",
            EvalSplit::All => "all",
        }
    );
    let _ = writeln!(report, "patients {}", indices.len());
    for (name, value) in Metrics::NAMES.iter().zip(metrics.values()) {
        let _ = writeln!(report, "{name} {}", fmt_opt(value));
    }
    fs::write(out_dir.join("eval_report.txt"), &report)?;
    print!("{report}");
    Ok(metrics)
}

// ── explanation ─────────────────────────────────────────────────────

fn report_text(report: &StainReport, class_names: &[String]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "patient {}", report.patient_id);
    if let Some(label) = report.label {
        let _ = writeln!(out, "label {}", class_names[label]);
    }
    for (name, p) in class_names.iter().zip(&report.class_probabilities) {
        let _ = writeln!(out, "prob {name} {}", fmt_f64(*p));
    }
    let _ = writeln!(out, "layers {}", report.per_layer_alpha.len());
    for (t, alpha) in report.per_layer_alpha.iter().enumerate() {
        for (stain, v) in alpha {
            let _ = writeln!(out, "alpha layer={} stain={stain} {}", t + 1, fmt_f64(*v));
        }
    }
    for (stain, v) in &report.aggregate_alpha {
        let _ = writeln!(out, "alpha aggregate stain={stain} {}", fmt_f64(*v));
    }
    for (t, entropy) in report.per_layer_entropy.iter().enumerate() {
        for (stain, v) in entropy {
            let _ = writeln!(out, "entropy layer={} stain={stain} {}", t + 1, fmt_f64(*v));
        }
    }
    for (stain, v) in &report.aggregate_entropy {
        let _ = writeln!(out, "entropy aggregate stain={stain} {}", fmt_f64(*v));
    }
    let stains = &report.interaction.stains;
    for i in 0..stains.len() {
        for j in i..stains.len() {
            let _ = writeln!(
                out,
                "interaction {} {} {}",
                stains[i],
                stains[j],
                fmt_opt(report.interaction.get(i, j))
            );
        }
    }
    for (t, v) in report.layer_importance.iter().enumerate() {
        let _ = writeln!(out, "layer_importance {} {}", t + 1, fmt_f64(*v));
    }
    out
}

fn heatmap_csv(report: &StainReport) -> String {
    let mut out = String::new();
    for e in &report.heatmap {
        let _ = writeln!(out, "{},{},{},{}", e.slide_id, e.x, e.y, fmt_f64(e.score));
    }
    out
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// 8-bit grayscale PGM raster of heatmap scores on the slide's patch grid.
fn raster_pgm(entries: &[(f64, f64, f64)]) -> Vec<u8> {
    let min_x = entries
        .iter()
        .map(|e| e.0)
        .fold(f64::INFINITY, f64::min)
        .round() as i64;
    let max_x = entries
        .iter()
        .map(|e| e.0)
        .fold(f64::NEG_INFINITY, f64::max)
        .round() as i64;
    let min_y = entries
        .iter()
        .map(|e| e.1)
        .fold(f64::INFINITY, f64::min)
        .round() as i64;
    let max_y = entries
        .iter()
        .map(|e| e.1)
        .fold(f64::NEG_INFINITY, f64::max)
        .round() as i64;
    let w = (max_x - min_x + 1) as usize;
    let h = (max_y - min_y + 1) as usize;
    let mut pixels = vec![0u8; w * h];
    for &(x, y, score) in entries {
        let col = (x.round() as i64 - min_x) as usize;
        let row = (y.round() as i64 - min_y) as usize;
        pixels[row * w + col] = (score * 255.0).round().clamp(0.0, 255.0) as u8;
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    out
}

#[derive(Debug)]
pub struct ExplainOutcome {
    pub reports: Vec<StainReport>,
}

pub fn cmd_explain(
    manifest_path: &Path,
    checkpoint_path: &Path,
    patient_ids: Option<&[String]>,
    out_dir: &Path,
    raster: bool,
) -> Result<ExplainOutcome> {
    fs::create_dir_all(out_dir)?;
    let (config, params, dataset, prepared) = load_model_and_data(manifest_path, checkpoint_path)?;

    let selected: Vec<usize> = match patient_ids {
        None => (0..prepared.len()).collect(),
        Some(ids) => {
            let mut idx = Vec::with_capacity(ids.len());
            for id in ids {
                match prepared.iter().position(|p| &p.id == id) {
                    Some(i) => idx.push(i),
                    None => {
                        let known: Vec<&str> = prepared.iter().map(|p| p.id.as_str()).collect();
                        return Err(Error::Config(format!(
                            "unknown patient id {id:?}; valid ids: {}",
                            known.join(", ")
                        )));
                    }
                }
            }
            idx
        }
    };

    let mut reports = Vec::with_capacity(selected.len());
    for &i in &selected {
        let p = &prepared[i];
        let fwd = forward(&params, &p.graph, p.pe.as_ref(), &config, ForwardMode::Eval)?;
        let probs = crate::training::class_probabilities(fwd.tape.data(fwd.logits));
        let report = build_stain_report(&p.id, Some(p.label), probs, &fwd.record, &p.graph)?;

        let pdir = out_dir.join(sanitize(&p.id));
        fs::create_dir_all(&pdir)?;
        fs::write(
            pdir.join("report.txt"),
            report_text(&report, &dataset.class_names),
        )?;
        fs::write(pdir.join("heatmap.csv"), heatmap_csv(&report))?;

        let trace = sparsification_trace(&fwd.record, &p.graph);
        let mut trace_text = String::new();
        for (t, layer) in trace.iter().enumerate() {
            let _ = writeln!(
                trace_text,
                "layer {t} nodes {} edges {}",
                layer.node_ids.len(),
                layer.edges.len()
            );
            let ids: Vec<String> = layer.node_ids.iter().map(|i| i.to_string()).collect();
            let _ = writeln!(trace_text, "nodes {}", ids.join(" "));
            for (u, v, kind) in &layer.edges {
                let _ = writeln!(trace_text, "edge {u} {v} {}", kind.as_str());
            }
        }
        fs::write(pdir.join("sparsification.txt"), trace_text)?;

        if raster {
            let mut by_slide: BTreeMap<&str, Vec<(f64, f64, f64)>> = BTreeMap::new();
            for e in &report.heatmap {
                by_slide
                    .entry(e.slide_id.as_str())
                    .or_default()
                    .push((e.x, e.y, e.score));
            }
            for (slide, entries) in by_slide {
                fs::write(
                    pdir.join(format!("{}.pgm", sanitize(slide))),
                    raster_pgm(&entries),
                )?;
            }
        }
        reports.push(report);
    }

    // Over a full-dataset run, also aggregate per class.
    if patient_ids.is_none() {
        let mut text = String::new();
        for (class_idx, class_name) in dataset.class_names.iter().enumerate() {
            let class_reports: Vec<&StainReport> = reports
                .iter()
                .filter(|r| r.label == Some(class_idx))
                .collect();
            for stain in &dataset.stains {
                let alphas: Vec<f64> = class_reports
                    .iter()
                    .map(|r| r.aggregate_alpha.get(stain).copied().unwrap_or(0.0))
                    .collect();
                let entropies: Vec<f64> = class_reports
                    .iter()
                    .filter_map(|r| r.aggregate_entropy.get(stain).copied())
                    .collect();
                let alpha_mean = if alphas.is_empty() {
                    None
                } else {
                    Some(alphas.iter().sum::<f64>() / alphas.len() as f64)
                };
                let entropy_mean = if entropies.is_empty() {
                    None
                } else {
                    Some(entropies.iter().sum::<f64>() / entropies.len() as f64)
                };
                let _ = writeln!(
                    text,
                    "class {class_name} stain {stain} alpha_mean {} entropy_mean {}",
                    fmt_opt(alpha_mean),
                    fmt_opt(entropy_mean)
                );
            }
        }
        fs::write(out_dir.join("class_aggregate.txt"), text)?;
    }

    println!(
        "wrote {} patient reports to {}",
        reports.len(),
        out_dir.display()
    );
    Ok(ExplainOutcome { reports })
}

/// Re-reads a manifest to confirm it parses; used by the CLI for early
/// validation errors.
pub fn check_manifest(path: &Path) -> Result<()> {
    read_manifest(path).map(|_| ())
}
