//! Random-walk positional encoding: per node, the probability of returning
//! to itself after t steps of a uniform random walk over neighbors, for
//! t = 1..=l.

use crate::autodiff::{Tape, TensorId};
use crate::error::{Error, Result};
use crate::graph::PatientGraph;
use crate::linalg::Mat;

/// N x l matrix of return probabilities; row u is the encoding of node u.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncoding {
    pub walk_length: usize,
    pub values: Mat,
}

impl PositionalEncoding {
    pub fn row(&self, u: usize) -> &[f64] {
        self.values.row(u)
    }
}

/// Computes the encoding with transition matrix `M = D^{-1} A` (no
/// self-loops). Isolated nodes have no walk and get all-zero rows.
///
/// Only the diagonal of each power matters, but the powers themselves are
/// accumulated; the multiply skips the structural zeros of `M`, so cost is
/// O(l * N * E) rather than O(l * N^3).
pub fn random_walk_pe(graph: &PatientGraph, walk_length: usize) -> Result<PositionalEncoding> {
    if walk_length == 0 {
        return Err(Error::Config("walk length must be at least 1".into()));
    }
    let n = graph.n_nodes();
    let adj = graph.adjacency_lists();
    let mut pe = Mat::zeros(n, walk_length);

    // Row u of `power` is the t-step distribution started at u.
    let mut power = Mat::identity(n);
    let mut next = Mat::zeros(n, n);
    for t in 0..walk_length {
        for value in next.data.iter_mut() {
            *value = 0.0;
        }
        for i in 0..n {
            for v in 0..n {
                let p = power.at(i, v);
                if p == 0.0 {
                    continue;
                }
                let nbrs = &adj[v];
                if nbrs.is_empty() {
                    continue;
                }
                let w = p / nbrs.len() as f64;
                for &j in nbrs {
                    next.data[i * n + j] += w;
                }
            }
        }
        std::mem::swap(&mut power, &mut next);
        for u in 0..n {
            pe.set(u, t, power.at(u, u));
        }
    }
    Ok(PositionalEncoding {
        walk_length,
        values: pe,
    })
}

/// Fuses features with positional encodings: `h_u = W_c [x_u || p_u]`,
/// differentiable in both the projection and the features.
/// `features: [N, d_x]`, `pe: [N, l]`, `projection: [d, d_x + l]`.
pub fn concat_project(
    tape: &mut Tape,
    features: TensorId,
    pe: TensorId,
    projection: TensorId,
) -> Result<TensorId> {
    let fs = tape.shape(features).to_vec();
    let ps = tape.shape(pe).to_vec();
    if fs.len() != 2 || ps.len() != 2 || fs[0] != ps[0] {
        return Err(Error::Shape(format!(
            "concat_project: features {fs:?} and encoding {ps:?} must share rows"
        )));
    }
    let ws = tape.shape(projection).to_vec();
    if ws.len() != 2 || ws[1] != fs[1] + ps[1] {
        return Err(Error::Shape(format!(
            "concat_project: projection {ws:?} does not accept {} + {} columns",
            fs[1], ps[1]
        )));
    }
    let z = tape.concat_cols(features, pe)?;
    tape.matmul_nt(z, projection)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{merge_graphs, patch, PatchRecord};
    use std::collections::BTreeSet;

    pub(crate) fn ring_graph(n: usize) -> PatientGraph {
        let recs: Vec<PatchRecord> = (0..n)
            .map(|i| patch("p", "s", "HE", 0, i as f64, 0.0, vec![0.0]))
            .collect();
        let edges: BTreeSet<(usize, usize)> = (0..n)
            .map(|i| (i.min((i + 1) % n), i.max((i + 1) % n)))
            .collect();
        merge_graphs(&edges, &BTreeSet::new(), &recs).unwrap()
    }

    fn path_graph(n: usize) -> PatientGraph {
        let recs: Vec<PatchRecord> = (0..n)
            .map(|i| patch("p", "s", "HE", 0, i as f64, 0.0, vec![0.0]))
            .collect();
        let edges: BTreeSet<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
        merge_graphs(&edges, &BTreeSet::new(), &recs).unwrap()
    }

    /// Dense matrix-power oracle: M = D^{-1} A, diagonal of M^t.
    fn pe_oracle(graph: &PatientGraph, l: usize) -> Mat {
        let n = graph.n_nodes();
        let mut m = Mat::zeros(n, n);
        let adj = graph.adjacency_lists();
        for (u, nbrs) in adj.iter().enumerate() {
            for &v in nbrs {
                m.set(u, v, 1.0 / nbrs.len() as f64);
            }
        }
        let mut acc = Mat::identity(n);
        let mut out = Mat::zeros(n, l);
        for t in 0..l {
            acc = acc.matmul(&m);
            for u in 0..n {
                out.set(u, t, acc.at(u, u));
            }
        }
        out
    }

    #[test]
    fn two_node_path_alternates() {
        let g = path_graph(2);
        let pe = random_walk_pe(&g, 4).unwrap();
        for u in 0..2 {
            assert_eq!(pe.row(u), &[0.0, 1.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn triangle_return_probabilities() {
        let g = ring_graph(3);
        let pe = random_walk_pe(&g, 3).unwrap();
        for u in 0..3 {
            let row = pe.row(u);
            assert!((row[0] - 0.0).abs() < 1e-12);
            assert!((row[1] - 0.5).abs() < 1e-12);
            assert!((row[2] - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn isolated_node_gets_zero_row() {
        let recs = vec![
            patch("p", "s", "HE", 0, 0.0, 0.0, vec![0.0]),
            patch("p", "s", "HE", 0, 1.0, 0.0, vec![0.0]),
            patch("p", "s", "HE", 0, 2.0, 0.0, vec![0.0]),
        ];
        let edges: BTreeSet<(usize, usize)> = [(0, 1)].into_iter().collect();
        let g = merge_graphs(&edges, &BTreeSet::new(), &recs).unwrap();
        let pe = random_walk_pe(&g, 5).unwrap();
        assert_eq!(pe.row(2), &[0.0; 5]);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn triangle_pair_differs_from_hexagon_at_t3() {
        // Two triangles vs one hexagon: both 2-regular on 6 nodes.
        let recs: Vec<PatchRecord> = (0..6)
            .map(|i| patch("p", "s", "HE", 0, i as f64, 0.0, vec![0.0]))
            .collect();
        let tri_edges: BTreeSet<(usize, usize)> = [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)]
            .into_iter()
            .collect();
        let tri = merge_graphs(&tri_edges, &BTreeSet::new(), &recs).unwrap();
        let hex = ring_graph(6);

        let pe_tri = random_walk_pe(&tri, 3).unwrap();
        let pe_hex = random_walk_pe(&hex, 3).unwrap();
        for u in 0..6 {
            assert!((pe_tri.row(u)[2] - 0.25).abs() < 1e-12);
            assert!((pe_hex.row(u)[2] - 0.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_dense_power_oracle() {
        for n in [2usize, 3, 5, 8] {
            let g = ring_graph(n);
            let pe = random_walk_pe(&g, 7).unwrap();
            let oracle = pe_oracle(&g, 7);
            for (a, b) in pe.values.data.iter().zip(&oracle.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let g = path_graph(7);
        let pe = random_walk_pe(&g, 9).unwrap();
        let oracle = pe_oracle(&g, 9);
        for (a, b) in pe.values.data.iter().zip(&oracle.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn entries_in_unit_interval_and_no_self_loop_first_step() {
        let g = path_graph(9);
        let pe = random_walk_pe(&g, 12).unwrap();
        for u in 0..9 {
            let row = pe.row(u);
            assert_eq!(row[0], 0.0);
            assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn concat_project_selects_blocks() {
        // W_c = [I | 0] reproduces the features; W_c = [0 | I] the encoding.
        let feats = vec![0.3, -0.7, 1.1, 0.4];
        let pe = vec![0.0, 0.5, 0.25, 0.125];
        let mut tape = Tape::new();
        let f = tape.leaf(feats.clone(), vec![2, 2]).unwrap();
        let p = tape.leaf(pe.clone(), vec![2, 2]).unwrap();

        let id_zero = tape
            .leaf(vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0], vec![2, 4])
            .unwrap();
        let out = concat_project(&mut tape, f, p, id_zero).unwrap();
        assert_eq!(tape.data(out), feats.as_slice());

        let zero_id = tape
            .leaf(vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0], vec![2, 4])
            .unwrap();
        let out = concat_project(&mut tape, f, p, zero_id).unwrap();
        assert_eq!(tape.data(out), pe.as_slice());
    }

    #[test]
    fn concat_project_zero_features_passes_encoding_block() {
        let mut tape = Tape::new();
        let f = tape.leaf(vec![0.0; 4], vec![2, 2]).unwrap();
        let p = tape.leaf(vec![0.4, 0.1, 0.2, 0.3], vec![2, 2]).unwrap();
        let w = tape
            .leaf(vec![0.9, -0.3, 0.5, 0.7, 0.2, 0.6, -0.4, 0.1], vec![2, 4])
            .unwrap();
        let out = concat_project(&mut tape, f, p, w).unwrap();
        // Only the encoding block of W_c contributes.
        let want = [
            0.4 * 0.5 + 0.1 * 0.7,
            0.4 * -0.4 + 0.1 * 0.1,
            0.2 * 0.5 + 0.3 * 0.7,
            0.2 * -0.4 + 0.3 * 0.1,
        ];
        for (g, w_) in tape.data(out).iter().zip(want) {
            assert!((g - w_).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_project_rejects_mismatched_shapes() {
        let mut tape = Tape::new();
        let f = tape.leaf(vec![0.0; 4], vec![2, 2]).unwrap();
        let p = tape.leaf(vec![0.0; 3], vec![3, 1]).unwrap();
        let w = tape.leaf(vec![0.0; 6], vec![2, 3]).unwrap();
        assert!(matches!(
            concat_project(&mut tape, f, p, w),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn permutation_equivariance() {
        // Relabel a 5-node path by reversal; PE rows must permute identically.
        let g = path_graph(5);
        let perm = [4usize, 3, 2, 1, 0];
        let recs: Vec<PatchRecord> = (0..5)
            .map(|i| patch("p", "s", "HE", 0, i as f64, 0.0, vec![0.0]))
            .collect();
        let edges: BTreeSet<(usize, usize)> = g
            .edges
            .iter()
            .map(|e| (perm[e.u].min(perm[e.v]), perm[e.u].max(perm[e.v])))
            .collect();
        let gp = merge_graphs(&edges, &BTreeSet::new(), &recs).unwrap();

        let pe = random_walk_pe(&g, 6).unwrap();
        let pep = random_walk_pe(&gp, 6).unwrap();
        for u in 0..5 {
            assert_eq!(pe.row(u), pep.row(perm[u]));
        }
    }
}
