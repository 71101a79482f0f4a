//! Derived interpretability metrics computed from a forward pass's
//! [`AttentionRecord`]: per-stain attention mass, stain entropy, stain-stain
//! interaction, layer importance, node heatmaps, and the per-layer
//! sparsification trace.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{EdgeType, PatchRecord, PatientGraph};
use crate::linalg::Mat;
use crate::model::{AttentionRecord, RecordedEdge};

/// Stain name to attention mass.
pub type StainMap = BTreeMap<String, f64>;

/// Per-layer and aggregate per-stain attention mass. The aggregate is the
/// mean over layers of zero-filled vectors, renormalized to sum one.
pub fn stain_attention_summary(record: &AttentionRecord) -> Result<(Vec<StainMap>, StainMap)> {
    if record.layers.is_empty() {
        return Err(Error::Config("attention record has no layers".into()));
    }
    let per_layer: Vec<BTreeMap<String, f64>> =
        record.layers.iter().map(|l| l.alpha.clone()).collect();
    let mut universe: BTreeMap<String, f64> = BTreeMap::new();
    for alpha in &per_layer {
        for stain in alpha.keys() {
            universe.entry(stain.clone()).or_insert(0.0);
        }
    }
    for alpha in &per_layer {
        for (stain, total) in universe.iter_mut() {
            *total += alpha.get(stain).copied().unwrap_or(0.0);
        }
    }
    let layers = per_layer.len() as f64;
    for total in universe.values_mut() {
        *total /= layers;
    }
    let sum: f64 = universe.values().sum();
    if sum > 0.0 {
        for v in universe.values_mut() {
            *v /= sum;
        }
    }
    Ok((per_layer, universe))
}

/// Natural-log entropy of the normalized attention mass within each stain:
/// `H_s = -sum a'_n ln a'_n` over nodes of stain `s`. Zero-mass nodes
/// contribute nothing; stains with no nodes have no entry.
pub fn stain_entropy(norm_scores: &[f64], stains: &[String]) -> BTreeMap<String, f64> {
    let mut h: BTreeMap<String, f64> = BTreeMap::new();
    for (score, stain) in norm_scores.iter().zip(stains) {
        let entry = h.entry(stain.clone()).or_insert(0.0);
        if *score > 0.0 {
            *entry -= score * score.ln();
        }
    }
    h
}

/// Symmetric matrix of mean head-averaged attention per unordered stain
/// pair. Cells with no qualifying pairs are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionMatrix {
    pub stains: Vec<String>,
    cells: Vec<Option<f64>>,
}

impl InteractionMatrix {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.cells[i * self.stains.len() + j]
    }

    pub fn get_by_name(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.stains.iter().position(|s| s == a)?;
        let j = self.stains.iter().position(|s| s == b)?;
        self.get(i, j)
    }
}

/// Mean attention per stain pair over all directed edges, self-loops
/// excluded; both directions of a node pair pool into the same unordered
/// stain cell, so the matrix is symmetric by construction.
pub fn stain_interaction(edges: &[RecordedEdge], stains: &[String]) -> InteractionMatrix {
    let mut order: Vec<String> = stains.to_vec();
    order.sort();
    order.dedup();
    let n = order.len();
    let mut sums = vec![0.0; n * n];
    let mut counts = vec![0usize; n * n];
    for e in edges {
        if e.self_loop {
            continue;
        }
        let (Ok(a), Ok(b)) = (
            order.binary_search(&e.target_stain),
            order.binary_search(&e.source_stain),
        ) else {
            continue;
        };
        let (i, j) = (a.min(b), a.max(b));
        sums[i * n + j] += e.beta;
        counts[i * n + j] += 1;
    }
    let mut cells = vec![None; n * n];
    for i in 0..n {
        for j in i..n {
            if counts[i * n + j] > 0 {
                let mean = sums[i * n + j] / counts[i * n + j] as f64;
                cells[i * n + j] = Some(mean);
                cells[j * n + i] = Some(mean);
            }
        }
    }
    InteractionMatrix {
        stains: order,
        cells,
    }
}

/// Attention mass each readout token receives, averaged over heads and
/// query tokens; sums to one.
pub fn layer_importance(mhsa_weights: &[Mat]) -> Result<Vec<f64>> {
    let first = mhsa_weights
        .first()
        .ok_or_else(|| Error::Config("no attention heads".into()))?;
    let l = first.cols;
    let mut importance = vec![0.0; l];
    let mut rows = 0usize;
    for head in mhsa_weights {
        if head.cols != l {
            return Err(Error::Shape(
                "inconsistent attention shapes across heads".into(),
            ));
        }
        for q in 0..head.rows {
            for (j, imp) in importance.iter_mut().enumerate() {
                *imp += head.at(q, j);
            }
        }
        rows += head.rows;
    }
    for imp in importance.iter_mut() {
        *imp /= rows as f64;
    }
    Ok(importance)
}

/// One heatmap point: a patch's spatial location and its normalized
/// cumulative attention.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapEntry {
    pub slide_id: String,
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

/// Cumulative attention per original node: at every layer, the raw scores of
/// the nodes present are softmax-normalized and added to each present node's
/// running sum; dropped nodes keep their partial sum.
pub fn cumulative_scores(record: &AttentionRecord) -> Result<Vec<f64>> {
    let first = record
        .layers
        .first()
        .ok_or_else(|| Error::Config("attention record has no layers".into()))?;
    let n0 = first.node_ids.len();
    let max_id = first.node_ids.iter().copied().max().unwrap_or(0);
    if max_id >= n0 {
        return Err(Error::Graph(
            "input layer node ids are not contiguous".into(),
        ));
    }
    let mut cumulative = vec![0.0; n0];
    for layer in &record.layers {
        let normalized = crate::training::class_probabilities(&layer.raw_scores);
        for (pos, &id) in layer.node_ids.iter().enumerate() {
            cumulative[id] += normalized[pos];
        }
    }
    Ok(cumulative)
}

/// Min-max normalization to `[0, 1]`; a constant input maps to all 0.5.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max - min <= 0.0 {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - min) / (max - min)).collect()
}

/// Heatmap entries keyed by each node's slide and coordinates.
pub fn node_heatmap(record: &AttentionRecord, nodes: &[PatchRecord]) -> Result<Vec<HeatmapEntry>> {
    let cumulative = cumulative_scores(record)?;
    if cumulative.len() != nodes.len() {
        return Err(Error::Shape(format!(
            "record covers {} nodes, graph has {}",
            cumulative.len(),
            nodes.len()
        )));
    }
    let normalized = min_max_normalize(&cumulative);
    Ok(nodes
        .iter()
        .zip(normalized)
        .map(|(n, score)| HeatmapEntry {
            slide_id: n.slide_id.clone(),
            x: n.x,
            y: n.y,
            score,
        })
        .collect())
}

/// Nodes and typed edges surviving at each depth; index 0 is the input graph.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceLayer {
    pub node_ids: Vec<usize>,
    pub edges: Vec<(usize, usize, EdgeType)>,
}

pub fn sparsification_trace(record: &AttentionRecord, input: &PatientGraph) -> Vec<TraceLayer> {
    let mut trace = vec![TraceLayer {
        node_ids: input.original_ids.clone(),
        edges: input
            .edges
            .iter()
            .map(|e| (input.original_ids[e.u], input.original_ids[e.v], e.kind))
            .collect(),
    }];
    for layer in &record.layers {
        let mut ids = layer.retained_ids.clone();
        ids.sort_unstable();
        trace.push(TraceLayer {
            node_ids: ids,
            edges: layer.pruned_edges.clone(),
        });
    }
    trace
}

/// Everything reported per patient.
#[derive(Debug, Clone)]
pub struct StainReport {
    pub patient_id: String,
    pub label: Option<usize>,
    pub class_probabilities: Vec<f64>,
    pub per_layer_alpha: Vec<StainMap>,
    pub aggregate_alpha: StainMap,
    pub per_layer_entropy: Vec<StainMap>,
    /// Mean entropy per stain over the layers where the stain is present.
    pub aggregate_entropy: StainMap,
    pub interaction: InteractionMatrix,
    pub layer_importance: Vec<f64>,
    pub heatmap: Vec<HeatmapEntry>,
}

pub fn build_stain_report(
    patient_id: &str,
    label: Option<usize>,
    class_probabilities: Vec<f64>,
    record: &AttentionRecord,
    graph: &PatientGraph,
) -> Result<StainReport> {
    let (per_layer_alpha, aggregate_alpha) = stain_attention_summary(record)?;
    let per_layer_entropy: Vec<BTreeMap<String, f64>> = record
        .layers
        .iter()
        .map(|l| stain_entropy(&l.norm_scores, &l.retained_stains))
        .collect();
    let mut aggregate_entropy: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for layer in &per_layer_entropy {
        for (stain, h) in layer {
            let e = aggregate_entropy.entry(stain.clone()).or_insert((0.0, 0));
            e.0 += h;
            e.1 += 1;
        }
    }
    let aggregate_entropy = aggregate_entropy
        .into_iter()
        .map(|(s, (sum, n))| (s, sum / n as f64))
        .collect();

    let all_edges: Vec<RecordedEdge> = record
        .layers
        .iter()
        .flat_map(|l| l.edge_attention.iter().cloned())
        .collect();
    let interaction = stain_interaction(&all_edges, &graph.stains());
    let layer_importance = layer_importance(&record.mhsa_weights)?;
    let heatmap = node_heatmap(record, &graph.nodes)?;

    Ok(StainReport {
        patient_id: patient_id.to_string(),
        label,
        class_probabilities,
        per_layer_alpha,
        aggregate_alpha,
        per_layer_entropy,
        aggregate_entropy,
        interaction,
        layer_importance,
        heatmap,
    })
}
