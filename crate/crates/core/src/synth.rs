//! Synthetic multistain patients with planted, controllable class structure:
//! a feature-shift task where one stain carries the label signal, and a
//! structure-only task where triangles vs hexagons are the only difference.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{RawDataset, RawPatient};
use crate::error::{Error, Result};
use crate::graph::{EdgeType, PatchRecord};
use crate::seeding::mix_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub patients_per_class: usize,
    pub stains: Vec<String>,
    /// `None`: every patient gets every stain. `Some(k)`: each patient gets a
    /// random k-subset that always contains the signal stain.
    pub stains_per_patient: Option<usize>,
    /// Inclusive range of node counts per slide.
    pub nodes_per_slide: (usize, usize),
    pub feature_dim: usize,
    pub signal_stain: String,
    /// Mean shift added to every feature of class-1 signal-stain nodes.
    pub signal_strength: f64,
    /// Fraction of class-1 signal-stain nodes laid out as one contiguous
    /// spatial blob.
    pub cluster_concentration: f64,
    /// Side length of the per-slide coordinate grid.
    pub grid_size: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            patients_per_class: 100,
            stains: vec!["S0".into(), "S1".into(), "S2".into()],
            stains_per_patient: None,
            nodes_per_slide: (15, 25),
            feature_dim: 8,
            signal_stain: "S0".into(),
            signal_strength: 2.0,
            cluster_concentration: 0.6,
            grid_size: 16,
            seed: 42,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patients_per_class == 0 {
            return Err(Error::Config("patients_per_class must be positive".into()));
        }
        if !self.stains.contains(&self.signal_stain) {
            return Err(Error::Config(format!(
                "signal stain {:?} not in stain list {:?}",
                self.signal_stain, self.stains
            )));
        }
        if self.signal_strength < 0.0 {
            return Err(Error::Config("signal strength must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.cluster_concentration) {
            return Err(Error::Config(
                "cluster concentration must be in [0, 1]".into(),
            ));
        }
        if self.nodes_per_slide.0 == 0 || self.nodes_per_slide.0 > self.nodes_per_slide.1 {
            return Err(Error::Config(format!(
                "bad nodes_per_slide range {:?}",
                self.nodes_per_slide
            )));
        }
        if self.grid_size * self.grid_size < self.nodes_per_slide.1 {
            return Err(Error::Config(format!(
                "grid {}x{} cannot hold {} nodes",
                self.grid_size, self.grid_size, self.nodes_per_slide.1
            )));
        }
        if let Some(k) = self.stains_per_patient {
            if k == 0 || k > self.stains.len() {
                return Err(Error::Config(format!(
                    "stains_per_patient {k} out of range"
                )));
            }
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Class 0: all features standard normal. Class 1: signal-stain nodes get a
/// constant mean shift, a `cluster_concentration` fraction of them packed
/// into one contiguous grid block. Deterministic per (seed, patient index).
pub fn generate_patients(spec: &SynthSpec) -> Result<RawDataset> {
    spec.validate()?;
    let mut patients = Vec::with_capacity(2 * spec.patients_per_class);
    for class in 0..2usize {
        for i in 0..spec.patients_per_class {
            let global_idx = (class * spec.patients_per_class + i) as u64;
            let id = format!("p{global_idx:04}");
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, global_idx));
            patients.push(RawPatient {
                id: id.clone(),
                label: class,
                records: generate_one(spec, &id, class, &mut rng),
                explicit_edges: None,
            });
        }
    }
    Ok(RawDataset {
        name: "planted".into(),
        class_names: vec!["class0".into(), "class1".into()],
        stains: spec.stains.clone(),
        patients,
    })
}

fn generate_one(
    spec: &SynthSpec,
    patient_id: &str,
    class: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<PatchRecord> {
    let stains: Vec<String> = match spec.stains_per_patient {
        None => spec.stains.clone(),
        Some(k) => {
            let mut others: Vec<String> = spec
                .stains
                .iter()
                .filter(|s| **s != spec.signal_stain)
                .cloned()
                .collect();
            others.shuffle(rng);
            let mut chosen = vec![spec.signal_stain.clone()];
            chosen.extend(others.into_iter().take(k - 1));
            // Keep the declared stain order so slide stacking is stable.
            let ordered: Vec<String> = spec
                .stains
                .iter()
                .filter(|s| chosen.contains(s))
                .cloned()
                .collect();
            debug_assert_eq!(ordered.len(), k);
            ordered
        }
    };

    let mut records = Vec::new();
    for (stack, stain) in stains.iter().enumerate() {
        let n = rng.random_range(spec.nodes_per_slide.0..=spec.nodes_per_slide.1);
        let is_signal_slide = class == 1 && *stain == spec.signal_stain;
        let n_blob = if is_signal_slide {
            (spec.cluster_concentration * n as f64).round() as usize
        } else {
            0
        };
        let coords = place_coords(n, n_blob, spec.grid_size, rng);
        for (x, y) in coords {
            let mut feature: Vec<f64> = (0..spec.feature_dim)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            if is_signal_slide {
                for f in feature.iter_mut() {
                    *f += spec.signal_strength;
                }
            }
            records.push(PatchRecord {
                patient_id: patient_id.to_string(),
                slide_id: format!("{patient_id}_{stain}"),
                stain: stain.clone(),
                stack_index: stack as u32,
                x,
                y,
                feature,
            });
        }
    }
    records
}

/// The first `n_blob` coordinates form one contiguous block; the rest are
/// distinct random free cells.
fn place_coords(n: usize, n_blob: usize, grid: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let mut taken = vec![false; grid * grid];
    let mut out = Vec::with_capacity(n);
    if n_blob > 0 {
        let side = (n_blob as f64).sqrt().ceil() as usize;
        let anchor_x = rng.random_range(0..=(grid - side));
        let anchor_y = rng.random_range(0..=(grid - side));
        'blob: for dy in 0..side {
            for dx in 0..side {
                if out.len() == n_blob {
                    break 'blob;
                }
                let (x, y) = (anchor_x + dx, anchor_y + dy);
                taken[y * grid + x] = true;
                out.push((x as f64, y as f64));
            }
        }
    }
    while out.len() < n {
        let x = rng.random_range(0..grid);
        let y = rng.random_range(0..grid);
        if !taken[y * grid + x] {
            taken[y * grid + x] = true;
            out.push((x as f64, y as f64));
        }
    }
    out
}

/// Structure-only task: class 0 patients are unions of triangles, class 1
/// unions of hexagons, with equal node counts, all nodes degree 2, one
/// pseudo-stain, and identical constant features. The k-NN construction is
/// bypassed with explicit edges; topology is the only signal.
pub fn generate_csl_task(patients_per_class: usize, seed: u64) -> Result<RawDataset> {
    if patients_per_class == 0 {
        return Err(Error::Config("patients_per_class must be positive".into()));
    }
    const NODES: usize = 12;
    const FEATURE_DIM: usize = 4;
    let mut patients = Vec::with_capacity(2 * patients_per_class);
    for class in 0..2usize {
        let cycle_len = if class == 0 { 3 } else { 6 };
        for i in 0..patients_per_class {
            let global_idx = (class * patients_per_class + i) as u64;
            let id = format!("p{global_idx:04}");
            let records: Vec<PatchRecord> = (0..NODES)
                .map(|k| PatchRecord {
                    patient_id: id.clone(),
                    slide_id: format!("{id}_S0"),
                    stain: "S0".into(),
                    stack_index: 0,
                    x: (k % 4) as f64,
                    y: (k / 4) as f64,
                    feature: vec![1.0; FEATURE_DIM],
                })
                .collect();
            let mut edges = Vec::new();
            for start in (0..NODES).step_by(cycle_len) {
                for off in 0..cycle_len {
                    let u = start + off;
                    let v = start + (off + 1) % cycle_len;
                    edges.push((u.min(v), u.max(v), EdgeType::Ra));
                }
            }
            edges.sort_by_key(|e| (e.0, e.1));
            edges.dedup();
            patients.push(RawPatient {
                id,
                label: class,
                records,
                explicit_edges: Some(edges),
            });
        }
    }
    // The seed shapes nothing today (features are constant and the topology
    // is fixed) but stays part of the signature so the patient-id streams
    // remain stable if noise is ever added.
    let _ = seed;
    Ok(RawDataset {
        name: "csl".into(),
        class_names: vec!["triangles".into(), "hexagons".into()],
        stains: vec!["S0".into()],
        patients,
    })
}
