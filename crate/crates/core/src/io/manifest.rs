//! Dataset manifest: a TOML document naming every patient, its label, and
//! the per-slide feature/coordinate files (paths relative to the manifest).
//! A patient may carry an explicit `edges_file` (rows `u,v,TYPE`), which
//! bypasses k-NN graph construction for structure-only datasets.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{RawDataset, RawPatient};
use crate::error::{Error, Result};
use crate::graph::{EdgeType, PatchRecord};

use super::features::{read_coords_file, read_feature_file};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: String,
    pub stains: Vec<String>,
    /// Class name -> label index; indices must cover 0..n.
    pub labels: BTreeMap<String, usize>,
    pub patients: Vec<ManifestPatient>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestPatient {
    pub id: String,
    pub label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edges_file: Option<String>,
    pub slides: Vec<ManifestSlide>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSlide {
    pub slide_id: String,
    pub stain: String,
    pub stack_index: u32,
    pub feature_file: String,
    pub coords_file: String,
}

impl Manifest {
    /// Class names ordered by label index; errors unless indices are 0..n.
    pub fn class_names(&self) -> Result<Vec<String>> {
        let mut names = vec![None; self.labels.len()];
        for (name, &idx) in &self.labels {
            if idx >= names.len() || names[idx].is_some() {
                return Err(Error::Format(format!(
                    "label map must assign indices 0..{} uniquely",
                    self.labels.len()
                )));
            }
            names[idx] = Some(name.clone());
        }
        Ok(names.into_iter().map(|n| n.unwrap()).collect())
    }
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let text = toml::to_string(manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn read_edges_file(path: &Path) -> Result<Vec<(usize, usize, EdgeType)>> {
    let text = fs::read_to_string(path)?;
    let mut edges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let mut next = |what: &str| {
            parts.next().map(str::trim).ok_or_else(|| {
                Error::Format(format!("{}:{}: missing {what}", path.display(), lineno + 1))
            })
        };
        let u: usize = next("source")?.parse().map_err(|_| {
            Error::Format(format!("{}:{}: bad node index", path.display(), lineno + 1))
        })?;
        let v: usize = next("target")?.parse().map_err(|_| {
            Error::Format(format!("{}:{}: bad node index", path.display(), lineno + 1))
        })?;
        let kind = EdgeType::parse(next("edge type")?)?;
        edges.push((u, v, kind));
    }
    Ok(edges)
}

pub fn write_edges_file(path: &Path, edges: &[(usize, usize, EdgeType)]) -> Result<()> {
    let mut out = String::new();
    for (u, v, kind) in edges {
        out.push_str(&format!("{u},{v},{}\n", kind.as_str()));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Loads the manifest and every referenced file into a [`RawDataset`].
pub fn load_raw_dataset(manifest_path: &Path) -> Result<RawDataset> {
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let class_names = manifest.class_names()?;

    let mut patients = Vec::with_capacity(manifest.patients.len());
    for p in &manifest.patients {
        let label = *manifest.labels.get(&p.label).ok_or_else(|| {
            Error::Format(format!("patient {}: unknown label {:?}", p.id, p.label))
        })?;
        let mut records = Vec::new();
        for slide in &p.slides {
            if !manifest.stains.contains(&slide.stain) {
                return Err(Error::Format(format!(
                    "slide {} uses stain {:?} outside the declared set",
                    slide.slide_id, slide.stain
                )));
            }
            let feats = read_feature_file(&base.join(&slide.feature_file))?;
            let coords = read_coords_file(&base.join(&slide.coords_file))?;
            if feats.len() != coords.len() {
                return Err(Error::Format(format!(
                    "slide {}: {} feature rows but {} coordinates",
                    slide.slide_id,
                    feats.len(),
                    coords.len()
                )));
            }
            for (feature, (x, y)) in feats.into_iter().zip(coords) {
                records.push(PatchRecord {
                    patient_id: p.id.clone(),
                    slide_id: slide.slide_id.clone(),
                    stain: slide.stain.clone(),
                    stack_index: slide.stack_index,
                    x,
                    y,
                    feature,
                });
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for r in &records {
            if !seen.insert((r.slide_id.clone(), r.x.to_bits(), r.y.to_bits())) {
                return Err(Error::Format(format!(
                    "patient {}: duplicate patch at ({}, {}) on slide {}",
                    p.id, r.x, r.y, r.slide_id
                )));
            }
        }
        let explicit_edges = match &p.edges_file {
            Some(rel) => {
                let edges = read_edges_file(&base.join(rel))?;
                for &(u, v, _) in &edges {
                    if u >= records.len() || v >= records.len() {
                        return Err(Error::Format(format!(
                            "patient {}: edge ({u}, {v}) references a missing node",
                            p.id
                        )));
                    }
                }
                Some(edges)
            }
            None => None,
        };
        patients.push(RawPatient {
            id: p.id.clone(),
            label,
            records,
            explicit_edges,
        });
    }
    Ok(RawDataset {
        name: manifest.dataset.clone(),
        class_names,
        stains: manifest.stains.clone(),
        patients,
    })
}
