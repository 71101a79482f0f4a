//! Per-patient joint graph construction: a feature-space k-NN graph and a
//! region-adjacency graph over the same patches, merged by edge union.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Provenance of an edge in the merged graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EdgeType {
    /// Feature-space k-NN edge only.
    Fs,
    /// Region-adjacency edge only.
    Ra,
    /// Present in both source adjacencies.
    Both,
}

impl EdgeType {
    pub fn as_str(&self) -> &'static str {
        match self {
            EdgeType::Fs => "FS",
            EdgeType::Ra => "RA",
            EdgeType::Both => "BOTH",
        }
    }

    pub fn parse(s: &str) -> Result<EdgeType> {
        match s {
            "FS" => Ok(EdgeType::Fs),
            "RA" => Ok(EdgeType::Ra),
            "BOTH" => Ok(EdgeType::Both),
            other => Err(Error::Format(format!("unknown edge type {other:?}"))),
        }
    }
}

/// One patch: a node of the patient graph.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub patient_id: String,
    pub slide_id: String,
    pub stain: String,
    pub stack_index: u32,
    pub x: f64,
    pub y: f64,
    pub feature: Vec<f64>,
}

/// Undirected typed edge, stored once with `u < v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    pub kind: EdgeType,
}

/// The joint per-patient graph over all slides of a stack.
#[derive(Debug, Clone)]
pub struct PatientGraph {
    pub patient_id: String,
    pub nodes: Vec<PatchRecord>,
    pub edges: Vec<Edge>,
    /// Node ids in the original (input) graph; identity at construction,
    /// preserved through pooling so attention maps back to input patches.
    pub original_ids: Vec<usize>,
}

impl PatientGraph {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Undirected neighbor lists, sorted ascending.
    pub fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            adj[e.u].push(e.v);
            adj[e.v].push(e.u);
        }
        for l in &mut adj {
            l.sort_unstable();
        }
        adj
    }

    pub fn stains(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.nodes.iter().map(|n| n.stain.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }
}

fn squared_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k smallest candidates of `cands` by `(distance, index)`, via partial
/// selection. `cands` holds `(squared distance, node index)` pairs.
fn k_nearest(mut cands: Vec<(f64, usize)>, k: usize) -> Vec<usize> {
    let cmp = |a: &(f64, usize), b: &(f64, usize)| {
        a.0.partial_cmp(&b.0)
            .expect("finite distance")
            .then(a.1.cmp(&b.1))
    };
    let take = k.min(cands.len());
    if take == 0 {
        return Vec::new();
    }
    if take < cands.len() {
        cands.select_nth_unstable_by(take - 1, cmp);
        cands.truncate(take);
    }
    cands.sort_unstable_by(cmp);
    cands.into_iter().map(|(_, i)| i).collect()
}

/// Feature-space k-NN edges over `features`, symmetrized: an unordered pair
/// is kept if either endpoint selected the other. Distance ties break toward
/// the lower node index. With fewer than `k` other nodes, all are neighbors.
pub fn build_feature_knn(features: &[Vec<f64>], k: usize) -> Result<BTreeSet<(usize, usize)>> {
    if features.is_empty() {
        return Err(Error::Graph("feature k-NN over zero nodes".into()));
    }
    if k == 0 {
        return Err(Error::Config(
            "k-NN neighbor count must be at least 1".into(),
        ));
    }
    if features.iter().any(|f| f.iter().any(|v| !v.is_finite())) {
        return Err(Error::Domain("non-finite feature value".into()));
    }
    let n = features.len();
    let mut edges = BTreeSet::new();
    for i in 0..n {
        let cands: Vec<(f64, usize)> = (0..n)
            .filter(|j| *j != i)
            .map(|j| (squared_dist(&features[i], &features[j]), j))
            .collect();
        for j in k_nearest(cands, k) {
            edges.insert((i.min(j), i.max(j)));
        }
    }
    Ok(edges)
}

/// Region-adjacency edges: per node, its k nearest by (x, y) within the same
/// slide, plus its k nearest by (x, y) among nodes of stack-adjacent slides
/// (stack index ±1). Symmetrized like the feature graph.
pub fn build_region_adjacency(
    records: &[PatchRecord],
    k: usize,
) -> Result<BTreeSet<(usize, usize)>> {
    if records.is_empty() {
        return Err(Error::Graph("region adjacency over zero nodes".into()));
    }
    if k == 0 {
        return Err(Error::Config(
            "k-NN neighbor count must be at least 1".into(),
        ));
    }
    if let Some(other) = records
        .iter()
        .find(|r| r.patient_id != records[0].patient_id)
    {
        return Err(Error::Graph(format!(
            "records span patients {:?} and {:?}",
            records[0].patient_id, other.patient_id
        )));
    }
    let n = records.len();
    let mut edges = BTreeSet::new();
    for i in 0..n {
        let ri = &records[i];
        let same_slide: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i && records[j].slide_id == ri.slide_id)
            .map(|j| {
                (
                    squared_dist(&[ri.x, ri.y], &[records[j].x, records[j].y]),
                    j,
                )
            })
            .collect();
        for j in k_nearest(same_slide, k) {
            edges.insert((i.min(j), i.max(j)));
        }
        let adjacent_stack: Vec<(f64, usize)> = (0..n)
            .filter(|&j| {
                j != i
                    && records[j].slide_id != ri.slide_id
                    && records[j].stack_index.abs_diff(ri.stack_index) == 1
            })
            .map(|j| {
                (
                    squared_dist(&[ri.x, ri.y], &[records[j].x, records[j].y]),
                    j,
                )
            })
            .collect();
        for j in k_nearest(adjacent_stack, k) {
            edges.insert((i.min(j), i.max(j)));
        }
    }
    Ok(edges)
}

/// Union of the two edge sets with per-edge provenance; node attributes are
/// carried over from `records`.
pub fn merge_graphs(
    fs_edges: &BTreeSet<(usize, usize)>,
    ra_edges: &BTreeSet<(usize, usize)>,
    records: &[PatchRecord],
) -> Result<PatientGraph> {
    let n = records.len();
    let check = |set: &BTreeSet<(usize, usize)>| -> Result<()> {
        for &(u, v) in set {
            if u >= n || v >= n {
                return Err(Error::Graph(format!(
                    "edge ({u}, {v}) references a missing node ({n} nodes)"
                )));
            }
            if u == v {
                return Err(Error::Graph(format!("self-edge at node {u}")));
            }
        }
        Ok(())
    };
    check(fs_edges)?;
    check(ra_edges)?;
    let mut edges = Vec::new();
    for &(u, v) in fs_edges.union(ra_edges) {
        let kind = match (fs_edges.contains(&(u, v)), ra_edges.contains(&(u, v))) {
            (true, true) => EdgeType::Both,
            (true, false) => EdgeType::Fs,
            (false, true) => EdgeType::Ra,
            (false, false) => unreachable!(),
        };
        edges.push(Edge { u, v, kind });
    }
    Ok(PatientGraph {
        patient_id: records
            .first()
            .map(|r| r.patient_id.clone())
            .unwrap_or_default(),
        nodes: records.to_vec(),
        edges,
        original_ids: (0..n).collect(),
    })
}

/// Builds the full joint graph in one call.
pub fn build_patient_graph(records: &[PatchRecord], knn_k: usize) -> Result<PatientGraph> {
    let features: Vec<Vec<f64>> = records.iter().map(|r| r.feature.clone()).collect();
    let fs = build_feature_knn(&features, knn_k)?;
    let ra = build_region_adjacency(records, knn_k)?;
    merge_graphs(&fs, &ra, records)
}

/// Symmetrically normalized dense adjacency `D^{-1/2} A D^{-1/2}`, optionally
/// with self-loops added first.
pub fn normalized_adjacency(graph: &PatientGraph, with_self_loops: bool) -> Result<Mat> {
    let n = graph.n_nodes();
    if n == 0 {
        return Err(Error::Graph(
            "normalized adjacency of an empty graph".into(),
        ));
    }
    let mut a = Mat::zeros(n, n);
    for e in &graph.edges {
        a.set(e.u, e.v, 1.0);
        a.set(e.v, e.u, 1.0);
    }
    if with_self_loops {
        for i in 0..n {
            a.set(i, i, 1.0);
        }
    }
    let mut inv_sqrt_deg = vec![0.0; n];
    for i in 0..n {
        let deg: f64 = a.row(i).iter().sum();
        inv_sqrt_deg[i] = if deg > 0.0 { deg.powf(-0.5) } else { 0.0 };
    }
    for i in 0..n {
        for j in 0..n {
            let v = a.at(i, j);
            if v != 0.0 {
                a.set(i, j, v * inv_sqrt_deg[i] * inv_sqrt_deg[j]);
            }
        }
    }
    Ok(a)
}

#[cfg(test)]
pub(crate) fn patch(
    patient: &str,
    slide: &str,
    stain: &str,
    stack: u32,
    x: f64,
    y: f64,
    feature: Vec<f64>,
) -> PatchRecord {
    PatchRecord {
        patient_id: patient.into(),
        slide_id: slide.into(),
        stain: stain.into(),
        stack_index: stack,
        x,
        y,
        feature,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive O(N^2) sort-based k-NN reference.
    fn knn_oracle(features: &[Vec<f64>], k: usize) -> BTreeSet<(usize, usize)> {
        let n = features.len();
        let mut edges = BTreeSet::new();
        for i in 0..n {
            let mut all: Vec<(f64, usize)> = (0..n)
                .filter(|j| *j != i)
                .map(|j| (squared_dist(&features[i], &features[j]), j))
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            for &(_, j) in all.iter().take(k) {
                edges.insert((i.min(j), i.max(j)));
            }
        }
        edges
    }

    #[test]
    fn feature_knn_three_points() {
        let feats = vec![vec![0.0], vec![0.1], vec![5.0]];
        let edges = build_feature_knn(&feats, 1).unwrap();
        let expect: BTreeSet<(usize, usize)> = [(0, 1), (1, 2)].into_iter().collect();
        assert_eq!(edges, expect);
    }

    #[test]
    fn feature_knn_single_node() {
        let edges = build_feature_knn(&[vec![1.0, 2.0]], 3).unwrap();
        assert!(edges.is_empty());
    }

    #[test]
    fn feature_knn_identical_points_tie_break() {
        let feats = vec![vec![7.0], vec![7.0], vec![7.0]];
        let edges = build_feature_knn(&feats, 1).unwrap();
        let expect: BTreeSet<(usize, usize)> = [(0, 1), (0, 2)].into_iter().collect();
        assert_eq!(edges, expect);
    }

    #[test]
    fn feature_knn_fewer_nodes_than_k() {
        let feats = vec![vec![0.0], vec![1.0], vec![2.0]];
        let edges = build_feature_knn(&feats, 10).unwrap();
        assert_eq!(edges.len(), 3); // complete graph on 3 nodes
    }

    #[test]
    fn feature_knn_rejects_nonfinite() {
        assert!(matches!(
            build_feature_knn(&[vec![f64::NAN], vec![0.0]], 1),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn feature_knn_matches_oracle_n200() {
        // Deterministic pseudo-random instance at the largest contract size.
        let mut state = 0x9E3779B97F4A7C15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let feats: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..4).map(|_| next() * 10.0).collect())
            .collect();
        for k in [1, 3, 7] {
            assert_eq!(build_feature_knn(&feats, k).unwrap(), knn_oracle(&feats, k));
        }
    }

    #[test]
    fn region_adjacency_grid() {
        let recs = vec![
            patch("p", "s", "HE", 0, 0.0, 0.0, vec![0.0]),
            patch("p", "s", "HE", 0, 1.0, 0.0, vec![0.0]),
            patch("p", "s", "HE", 0, 0.0, 1.0, vec![0.0]),
            patch("p", "s", "HE", 0, 1.0, 1.0, vec![0.0]),
        ];
        let edges = build_region_adjacency(&recs, 1).unwrap();
        // Brute force over the 4-node grid with the lower-index tie-break:
        // 0 -> 1, 1 -> 0, 2 -> 0, 3 -> 1.
        let expect: BTreeSet<(usize, usize)> = [(0, 1), (0, 2), (1, 3)].into_iter().collect();
        assert_eq!(edges, expect);
        assert!(edges.len() >= 2);
        let mut deg = [0usize; 4];
        for (u, v) in &edges {
            deg[*u] += 1;
            deg[*v] += 1;
        }
        assert!(deg.iter().all(|d| *d >= 1));
    }

    #[test]
    fn region_adjacency_single_node() {
        let recs = vec![patch("p", "s", "HE", 0, 0.0, 0.0, vec![0.0])];
        assert!(build_region_adjacency(&recs, 1).unwrap().is_empty());
    }

    #[test]
    fn region_adjacency_cross_slide() {
        let recs = vec![
            patch("p", "s0", "HE", 0, 2.0, 3.0, vec![0.0]),
            patch("p", "s1", "CD3", 1, 2.0, 3.0, vec![0.0]),
        ];
        let edges = build_region_adjacency(&recs, 1).unwrap();
        let expect: BTreeSet<(usize, usize)> = [(0, 1)].into_iter().collect();
        assert_eq!(edges, expect);
    }

    #[test]
    fn region_adjacency_skips_distant_stacks() {
        // Stack indices 0 and 2 are not adjacent; no cross edge forms.
        let recs = vec![
            patch("p", "s0", "HE", 0, 0.0, 0.0, vec![0.0]),
            patch("p", "s2", "CD3", 2, 0.0, 0.0, vec![0.0]),
        ];
        assert!(build_region_adjacency(&recs, 1).unwrap().is_empty());
    }

    #[test]
    fn merge_types_union_and_both() {
        let recs = vec![
            patch("p", "s", "HE", 0, 0.0, 0.0, vec![0.0]),
            patch("p", "s", "HE", 0, 1.0, 0.0, vec![0.0]),
            patch("p", "s", "HE", 0, 2.0, 0.0, vec![0.0]),
        ];
        let fs: BTreeSet<(usize, usize)> = [(0, 1)].into_iter().collect();
        let ra: BTreeSet<(usize, usize)> = [(0, 1), (1, 2)].into_iter().collect();
        let g = merge_graphs(&fs, &ra, &recs).unwrap();
        assert_eq!(g.edges.len(), 2);
        assert_eq!(
            g.edges[0],
            Edge {
                u: 0,
                v: 1,
                kind: EdgeType::Both
            }
        );
        assert_eq!(
            g.edges[1],
            Edge {
                u: 1,
                v: 2,
                kind: EdgeType::Ra
            }
        );
    }

    #[test]
    fn merge_disjoint_sets_typed_singly() {
        let recs = vec![
            patch("p", "s", "HE", 0, 0.0, 0.0, vec![0.0]),
            patch("p", "s", "HE", 0, 1.0, 0.0, vec![0.0]),
            patch("p", "s", "HE", 0, 2.0, 0.0, vec![0.0]),
        ];
        let fs: BTreeSet<(usize, usize)> = [(0, 2)].into_iter().collect();
        let ra: BTreeSet<(usize, usize)> = [(1, 2)].into_iter().collect();
        let g = merge_graphs(&fs, &ra, &recs).unwrap();
        assert!(g.edges.iter().all(|e| e.kind != EdgeType::Both));
        assert_eq!(g.edges.len(), 2);
    }

    #[test]
    fn merge_empty_sets() {
        let recs = vec![patch("p", "s", "HE", 0, 0.0, 0.0, vec![0.0])];
        let g = merge_graphs(&BTreeSet::new(), &BTreeSet::new(), &recs).unwrap();
        assert_eq!(g.n_nodes(), 1);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn merge_rejects_dangling_index() {
        let recs = vec![patch("p", "s", "HE", 0, 0.0, 0.0, vec![0.0])];
        let fs: BTreeSet<(usize, usize)> = [(0, 1)].into_iter().collect();
        assert!(matches!(
            merge_graphs(&fs, &BTreeSet::new(), &recs),
            Err(Error::Graph(_))
        ));
    }

    #[test]
    fn normalized_adjacency_worked_examples() {
        // Single node with self-loop: degree 1, entry 1.
        let recs = vec![patch("p", "s", "HE", 0, 0.0, 0.0, vec![0.0])];
        let g = merge_graphs(&BTreeSet::new(), &BTreeSet::new(), &recs).unwrap();
        let a = normalized_adjacency(&g, true).unwrap();
        assert_eq!(a.data, vec![1.0]);

        // Two nodes, one edge, self-loops: every entry 1/2.
        let recs2 = vec![
            patch("p", "s", "HE", 0, 0.0, 0.0, vec![0.0]),
            patch("p", "s", "HE", 0, 1.0, 0.0, vec![0.0]),
        ];
        let fs: BTreeSet<(usize, usize)> = [(0, 1)].into_iter().collect();
        let g2 = merge_graphs(&fs, &BTreeSet::new(), &recs2).unwrap();
        let a2 = normalized_adjacency(&g2, true).unwrap();
        for v in &a2.data {
            assert!((v - 0.5).abs() < 1e-12);
        }

        // No edges, self-loops on: identity.
        let g3 = merge_graphs(&BTreeSet::new(), &BTreeSet::new(), &recs2).unwrap();
        let a3 = normalized_adjacency(&g3, true).unwrap();
        assert_eq!(a3.data, Mat::identity(2).data);
    }

    #[test]
    fn adjacency_is_symmetric() {
        let feats: Vec<Vec<f64>> = (0..12)
            .map(|i| vec![(i as f64 * 0.7).sin(), (i as f64 * 1.3).cos()])
            .collect();
        let recs: Vec<PatchRecord> = feats
            .iter()
            .enumerate()
            .map(|(i, f)| patch("p", "s", "HE", 0, (i % 4) as f64, (i / 4) as f64, f.clone()))
            .collect();
        let g = build_patient_graph(&recs, 3).unwrap();
        let a = normalized_adjacency(&g, true).unwrap();
        for i in 0..g.n_nodes() {
            for j in 0..g.n_nodes() {
                assert_eq!(a.at(i, j), a.at(j, i));
            }
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn feature_set() -> impl Strategy<Value = Vec<Vec<f64>>> {
            proptest::collection::vec(proptest::collection::vec(-50.0f64..50.0, 3), 1..40)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn knn_matches_bruteforce_oracle(feats in feature_set(), k in 1usize..6) {
                let got = build_feature_knn(&feats, k).unwrap();
                let want = knn_oracle(&feats, k);
                prop_assert_eq!(got, want);
            }

            #[test]
            fn merge_counts_are_set_algebra(
                n in 2usize..20,
                fs_pairs in proptest::collection::btree_set((0usize..20, 0usize..20), 0..30),
                ra_pairs in proptest::collection::btree_set((0usize..20, 0usize..20), 0..30),
            ) {
                let norm = |set: &std::collections::BTreeSet<(usize, usize)>| -> BTreeSet<(usize, usize)> {
                    set.iter()
                        .filter(|(u, v)| u != v && *u < n && *v < n)
                        .map(|&(u, v)| (u.min(v), u.max(v)))
                        .collect()
                };
                let fs = norm(&fs_pairs);
                let ra = norm(&ra_pairs);
                let recs: Vec<PatchRecord> = (0..n)
                    .map(|i| patch("p", "s", "HE", 0, i as f64, 0.0, vec![0.0]))
                    .collect();
                let g = merge_graphs(&fs, &ra, &recs).unwrap();
                prop_assert_eq!(g.edges.len(), fs.union(&ra).count());
                let both = g.edges.iter().filter(|e| e.kind == EdgeType::Both).count();
                prop_assert_eq!(both, fs.intersection(&ra).count());
            }

            #[test]
            fn every_fs_edge_is_a_knn_witness(feats in feature_set(), k in 1usize..5) {
                let n = feats.len();
                let edges = build_feature_knn(&feats, k).unwrap();
                for (u, v) in edges {
                    // v must be within u's k smallest distances or vice versa.
                    let rank = |a: usize, b: usize| {
                        let d = squared_dist(&feats[a], &feats[b]);
                        (0..n)
                            .filter(|&j| j != a)
                            .filter(|&j| {
                                let dj = squared_dist(&feats[a], &feats[j]);
                                dj < d || (dj == d && j < b)
                            })
                            .count()
                    };
                    prop_assert!(rank(u, v) < k || rank(v, u) < k);
                }
            }
        }
    }
}
