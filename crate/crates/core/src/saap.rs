//! Stain-aware attention pooling: score nodes with a graph-convolutional
//! attention head, retain the top fraction, softmax-normalize the retained
//! scores, scale features, weight by per-stain attention mass, and emit a
//! fixed-size mean-and-max readout.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, TensorId};
use crate::error::{Error, Result};
use crate::graph::{normalized_adjacency, PatientGraph};

/// Node attention scores `tanh(A_norm X theta)` where `A_norm` is the
/// self-loop-augmented symmetrically normalized adjacency. Output `[N, 1]`.
pub fn sag_scores(
    tape: &mut Tape,
    x: TensorId,
    graph: &PatientGraph,
    theta: TensorId,
) -> Result<TensorId> {
    let n = graph.n_nodes();
    let xs = tape.shape(x).to_vec();
    if xs.len() != 2 || xs[0] != n {
        return Err(Error::Shape(format!(
            "sag_scores: features {xs:?} do not match {n} nodes"
        )));
    }
    if tape.shape(theta) != [xs[1], 1] {
        return Err(Error::Shape(format!(
            "sag_scores: theta shape {:?}, expected [{}, 1]",
            tape.shape(theta),
            xs[1]
        )));
    }
    let a_norm = normalized_adjacency(graph, true)?;
    let a_t = tape.leaf(a_norm.data, vec![n, n])?;
    let proj = tape.matmul(x, theta)?;
    let mixed = tape.matmul(a_t, proj)?;
    Ok(tape.tanh(mixed))
}

/// Indices of the `ceil(pool_ratio * N)` highest-scoring nodes, descending
/// by score with ties broken toward the lower index.
pub fn topk_select(scores: &[f64], pool_ratio: f64) -> Result<Vec<usize>> {
    if !(pool_ratio > 0.0 && pool_ratio <= 1.0) {
        return Err(Error::Config(format!(
            "pool ratio must be in (0, 1], got {pool_ratio}"
        )));
    }
    if scores.is_empty() {
        return Err(Error::Graph("top-k selection over zero nodes".into()));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Domain(format!("non-finite attention score {bad}")));
    }
    let keep = (pool_ratio * scores.len() as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores checked finite")
            .then(a.cmp(&b))
    });
    order.truncate(keep);
    Ok(order)
}

/// Induced subgraph over `retained` (local indices), nodes reordered to the
/// retained order. Edges are kept only when both endpoints survive; node
/// attributes and original ids carry over.
pub fn prune_graph(graph: &PatientGraph, retained: &[usize]) -> Result<PatientGraph> {
    let n = graph.n_nodes();
    let mut local = vec![usize::MAX; n];
    for (new_idx, &old) in retained.iter().enumerate() {
        if old >= n {
            return Err(Error::Graph(format!(
                "retained index {old} out of range ({n} nodes)"
            )));
        }
        local[old] = new_idx;
    }
    let nodes = retained.iter().map(|&i| graph.nodes[i].clone()).collect();
    let original_ids = retained.iter().map(|&i| graph.original_ids[i]).collect();
    let mut edges = Vec::new();
    for e in &graph.edges {
        let (lu, lv) = (local[e.u], local[e.v]);
        if lu != usize::MAX && lv != usize::MAX {
            edges.push(crate::graph::Edge {
                u: lu.min(lv),
                v: lu.max(lv),
                kind: e.kind,
            });
        }
    }
    edges.sort_by_key(|e| (e.u, e.v));
    Ok(PatientGraph {
        patient_id: graph.patient_id.clone(),
        nodes,
        edges,
        original_ids,
    })
}

/// Normalized scores, attention-scaled features, and per-stain weights.
pub struct StainScale {
    /// `a'`: softmax of the retained raw scores, rank-1 `[N_ret]`.
    pub norm_scores: TensorId,
    /// `X'`: features row-scaled by `a'`, `[N_ret, F]`.
    pub scaled: TensorId,
    /// Per-stain attention mass, `[n_stains, 1]`, rows follow `stain_order`.
    pub alpha: TensorId,
    /// Sorted distinct stains among the retained nodes.
    pub stain_order: Vec<String>,
}

/// Softmax-normalizes retained scores over all retained nodes, scales the
/// feature rows, and sums normalized mass per stain.
pub fn stain_weights_and_scale(
    tape: &mut Tape,
    scores_retained: TensorId,
    features_retained: TensorId,
    stains_retained: &[String],
) -> Result<StainScale> {
    let n = stains_retained.len();
    if n == 0 {
        return Err(Error::Graph(
            "stain weighting over an empty retained set".into(),
        ));
    }
    if tape.shape(scores_retained) != [n, 1] {
        return Err(Error::Shape(format!(
            "stain_weights_and_scale: scores shape {:?}, expected [{n}, 1]",
            tape.shape(scores_retained)
        )));
    }
    let fs = tape.shape(features_retained).to_vec();
    if fs.len() != 2 || fs[0] != n {
        return Err(Error::Shape(format!(
            "stain_weights_and_scale: features {fs:?} do not match {n} retained nodes"
        )));
    }

    let norm_col = tape.softmax(scores_retained, 0)?; // [N_ret, 1]
    let norm = tape.reshape(norm_col, vec![n])?;
    let scaled = tape.scale_rows(features_retained, norm)?;

    let stain_order: Vec<String> = {
        let set: std::collections::BTreeSet<&String> = stains_retained.iter().collect();
        set.into_iter().cloned().collect()
    };
    let mut indicator = vec![0.0; stain_order.len() * n];
    for (col, stain) in stains_retained.iter().enumerate() {
        let row = stain_order.binary_search(stain).expect("stain in order");
        indicator[row * n + col] = 1.0;
    }
    let ind_t = tape.leaf(indicator, vec![stain_order.len(), n])?;
    let alpha = tape.matmul(ind_t, norm_col)?; // [n_stains, 1]

    Ok(StainScale {
        norm_scores: norm,
        scaled,
        alpha,
        stain_order,
    })
}

/// Stain-weighted readout: each row of `X'` is scaled by its stain's weight,
/// then per-column mean and max are concatenated into a `[2F]` vector.
pub fn stain_pool_readout(
    tape: &mut Tape,
    scaled: TensorId,
    alpha: TensorId,
    stain_order: &[String],
    stains_retained: &[String],
) -> Result<TensorId> {
    let n = stains_retained.len();
    let fs = tape.shape(scaled).to_vec();
    if fs.len() != 2 || fs[0] != n {
        return Err(Error::Shape(format!(
            "stain_pool_readout: features {fs:?} do not match {n} retained nodes"
        )));
    }
    if tape.shape(alpha) != [stain_order.len(), 1] {
        return Err(Error::Shape(format!(
            "stain_pool_readout: alpha shape {:?} does not match {} stains",
            tape.shape(alpha),
            stain_order.len()
        )));
    }
    let mut gather = vec![0.0; n * stain_order.len()];
    for (row, stain) in stains_retained.iter().enumerate() {
        let col = stain_order
            .binary_search(stain)
            .map_err(|_| Error::Graph(format!("stain {stain:?} has no weight entry")))?;
        gather[row * stain_order.len() + col] = 1.0;
    }
    let gather_t = tape.leaf(gather, vec![n, stain_order.len()])?;
    let node_weight = tape.matmul(gather_t, alpha)?; // [N_ret, 1]
    let node_weight = tape.reshape(node_weight, vec![n])?;
    let stain_scaled = tape.scale_rows(scaled, node_weight)?;
    let mean = tape.col_mean(stain_scaled)?;
    let max = tape.col_max(stain_scaled)?;
    tape.concat_cols(mean, max)
}

/// Everything one pooling stage produces.
pub struct PoolOutput {
    /// Local indices into the incoming graph, descending score.
    pub retained_local: Vec<usize>,
    /// Raw scores of all incoming nodes.
    pub raw_scores: Vec<f64>,
    pub norm_scores: TensorId,
    pub alpha: TensorId,
    pub stain_order: Vec<String>,
    /// `X'`, forwarded to the next block.
    pub scaled: TensorId,
    pub readout: TensorId,
    pub pruned: PatientGraph,
}

impl PoolOutput {
    /// Stain-to-weight map read out of the tape.
    pub fn alpha_map(&self, tape: &Tape) -> BTreeMap<String, f64> {
        self.stain_order
            .iter()
            .cloned()
            .zip(tape.data(self.alpha).iter().copied())
            .collect()
    }
}

/// Runs scoring, selection, scaling, and readout for one block.
pub fn pool(
    tape: &mut Tape,
    features: TensorId,
    scores: TensorId,
    graph: &PatientGraph,
    pool_ratio: f64,
) -> Result<PoolOutput> {
    let raw_scores = tape.data(scores).to_vec();
    let retained = topk_select(&raw_scores, pool_ratio)?;
    let scores_ret = tape.gather_rows(scores, &retained)?;
    let feats_ret = tape.gather_rows(features, &retained)?;
    let stains_ret: Vec<String> = retained
        .iter()
        .map(|&i| graph.nodes[i].stain.clone())
        .collect();
    let scale = stain_weights_and_scale(tape, scores_ret, feats_ret, &stains_ret)?;
    let readout = stain_pool_readout(
        tape,
        scale.scaled,
        scale.alpha,
        &scale.stain_order,
        &stains_ret,
    )?;
    let pruned = prune_graph(graph, &retained)?;
    Ok(PoolOutput {
        retained_local: retained,
        raw_scores,
        norm_scores: scale.norm_scores,
        alpha: scale.alpha,
        stain_order: scale.stain_order,
        scaled: scale.scaled,
        readout,
        pruned,
    })
}
