//! Labeled patient collections and per-patient precomputation.

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{merge_graphs, EdgeType, PatchRecord, PatientGraph};
use crate::model::{prepare_pe, ModelConfig};
use crate::rwpe::PositionalEncoding;

/// A patient before graph construction: labeled patch records, optionally
/// with an explicit edge list that bypasses the k-NN/region build.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPatient {
    pub id: String,
    pub label: usize,
    pub records: Vec<PatchRecord>,
    pub explicit_edges: Option<Vec<(usize, usize, EdgeType)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub name: String,
    pub class_names: Vec<String>,
    pub stains: Vec<String>,
    pub patients: Vec<RawPatient>,
}

/// Builds every patient graph (dual-criteria k-NN/region merge, or the
/// explicit edges when given), in parallel with order preserved.
pub fn assemble_dataset(raw: &RawDataset, knn_k: usize) -> Result<Dataset> {
    let patients: Vec<PatientSample> = raw
        .patients
        .par_iter()
        .map(|p| {
            let graph = match &p.explicit_edges {
                None => crate::graph::build_patient_graph(&p.records, knn_k)?,
                Some(edges) => {
                    let mut fs = BTreeSet::new();
                    let mut ra = BTreeSet::new();
                    for &(u, v, kind) in edges {
                        let pair = (u.min(v), u.max(v));
                        match kind {
                            EdgeType::Fs => {
                                fs.insert(pair);
                            }
                            EdgeType::Ra => {
                                ra.insert(pair);
                            }
                            EdgeType::Both => {
                                fs.insert(pair);
                                ra.insert(pair);
                            }
                        }
                    }
                    merge_graphs(&fs, &ra, &p.records)?
                }
            };
            Ok(PatientSample {
                id: p.id.clone(),
                label: p.label,
                graph,
            })
        })
        .collect::<Result<_>>()?;
    let dataset = Dataset {
        name: raw.name.clone(),
        class_names: raw.class_names.clone(),
        stains: raw.stains.clone(),
        patients,
    };
    dataset.validate()?;
    Ok(dataset)
}

#[derive(Debug, Clone)]
pub struct PatientSample {
    pub id: String,
    pub label: usize,
    pub graph: PatientGraph,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    /// Class names by label index.
    pub class_names: Vec<String>,
    /// Declared stain set.
    pub stains: Vec<String>,
    pub patients: Vec<PatientSample>,
}

impl Dataset {
    pub fn labels(&self) -> Vec<usize> {
        self.patients.iter().map(|p| p.label).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.patients {
            if p.label >= self.class_names.len() {
                return Err(Error::Config(format!(
                    "patient {} has label {} but only {} classes are declared",
                    p.id,
                    p.label,
                    self.class_names.len()
                )));
            }
            for node in &p.graph.nodes {
                if !self.stains.contains(&node.stain) {
                    return Err(Error::Config(format!(
                        "patient {} uses undeclared stain {:?}",
                        p.id, node.stain
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A patient with its positional encoding precomputed once per run.
#[derive(Debug, Clone)]
pub struct PreparedPatient {
    pub id: String,
    pub label: usize,
    pub graph: PatientGraph,
    pub pe: Option<PositionalEncoding>,
}

/// Computes positional encodings for every patient (parallel across
/// patients, order preserved).
pub fn prepare_patients(dataset: &Dataset, config: &ModelConfig) -> Result<Vec<PreparedPatient>> {
    dataset
        .patients
        .par_iter()
        .map(|p| {
            Ok(PreparedPatient {
                id: p.id.clone(),
                label: p.label,
                graph: p.graph.clone(),
                pe: prepare_pe(&p.graph, config)?,
            })
        })
        .collect()
}
