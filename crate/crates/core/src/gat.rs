//! Graph-attention message passing with exposed per-edge attention, and
//! multi-head self-attention over layer-readout tokens.
//!
//! Attention is computed densely with an additive mask: non-edges get a
//! large negative logit, which underflows to exactly zero after the
//! stabilized softmax, so attention lives only on graph edges and self-loops.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, TensorId};
use crate::error::{Error, Result};
use crate::graph::PatientGraph;

const MASK_OFF: f64 = -1.0e30;

/// Per-head GAT parameters already bound on a tape.
/// `weight` is `[F_head, F_in]`; `attn` is the rank-1 `[2 * F_head]`
/// attention vector, first half applied to the aggregating node, second
/// half to the neighbor.
#[derive(Debug, Clone, Copy)]
pub struct GatHeadTensors {
    pub weight: TensorId,
    pub attn: TensorId,
}

#[derive(Debug, Clone)]
pub struct GatLayerTensors {
    pub heads: Vec<GatHeadTensors>,
    pub leaky_slope: f64,
}

/// One attention coefficient: `beta` on the directed edge `source -> target`
/// used when aggregating at `target`. Self-loops appear as `source == target`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionEntry {
    pub target: usize,
    pub source: usize,
    pub head: usize,
    pub beta: f64,
}

/// All attention coefficients of one GAT layer.
#[derive(Debug, Clone, Default)]
pub struct EdgeAttention {
    pub entries: Vec<AttentionEntry>,
}

impl EdgeAttention {
    /// Head-averaged coefficient per directed pair, in entry order of head 0.
    pub fn head_averaged(&self, n_heads: usize) -> Vec<(usize, usize, f64)> {
        let per_head = self.entries.len() / n_heads.max(1);
        let mut out = Vec::with_capacity(per_head);
        for i in 0..per_head {
            let first = &self.entries[i];
            let mut sum = 0.0;
            for h in 0..n_heads {
                let e = &self.entries[h * per_head + i];
                debug_assert_eq!((e.target, e.source), (first.target, first.source));
                sum += e.beta;
            }
            out.push((first.target, first.source, sum / n_heads as f64));
        }
        out
    }
}

pub struct GatOutput {
    /// `[N, heads * F_head]`, ELU applied.
    pub h: TensorId,
    pub attention: EdgeAttention,
}

/// Optional attention-coefficient dropout, training mode only.
pub struct AttnDropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

/// One GAT layer: per head, logits
/// `e_uv = leaky_relu(a^T [W h_u || W h_v])` over `v in N(u) + {u}`,
/// row-softmax to attention, weighted sum of transformed neighbors; head
/// outputs are concatenated and passed through ELU.
pub fn gat_forward(
    tape: &mut Tape,
    h: TensorId,
    graph: &PatientGraph,
    params: &GatLayerTensors,
    mut dropout: Option<AttnDropout<'_>>,
) -> Result<GatOutput> {
    let n = graph.n_nodes();
    let h_shape = tape.shape(h).to_vec();
    if h_shape.len() != 2 || h_shape[0] != n {
        return Err(Error::Shape(format!(
            "gat_forward: features {h_shape:?} do not match {n} graph nodes"
        )));
    }
    if params.heads.is_empty() {
        return Err(Error::Config(
            "gat_forward: at least one head required".into(),
        ));
    }

    let adj = graph.adjacency_lists();
    // Additive mask: 0 on edges and the diagonal, -1e30 elsewhere.
    let mut mask = vec![MASK_OFF; n * n];
    for u in 0..n {
        mask[u * n + u] = 0.0;
        for &v in &adj[u] {
            mask[u * n + v] = 0.0;
        }
    }
    let mask_t = tape.leaf(mask.clone(), vec![n, n])?;

    let mut attention = EdgeAttention::default();
    let mut head_outputs = Vec::with_capacity(params.heads.len());
    for (head_idx, head) in params.heads.iter().enumerate() {
        let f_head = tape.shape(head.weight)[0];
        if tape.shape(head.attn) != [2 * f_head] {
            return Err(Error::Shape(format!(
                "gat_forward: attention vector shape {:?} does not match 2*{f_head}",
                tape.shape(head.attn)
            )));
        }
        let wh = tape.matmul_nt(h, head.weight)?; // [N, F_head]
        let a_self = tape.slice_1d(head.attn, 0, f_head)?;
        let a_self = tape.reshape(a_self, vec![1, f_head])?;
        let a_nbr = tape.slice_1d(head.attn, f_head, f_head)?;
        let a_nbr = tape.reshape(a_nbr, vec![1, f_head])?;
        let s_self = tape.matmul_nt(wh, a_self)?; // [N, 1]
        let s_self = tape.reshape(s_self, vec![n])?;
        let s_nbr = tape.matmul_nt(wh, a_nbr)?;
        let s_nbr = tape.reshape(s_nbr, vec![n])?;

        let logits = tape.outer_add(s_self, s_nbr)?; // logits[u][v]
        let logits = tape.leaky_relu(logits, params.leaky_slope);
        let masked = tape.add(logits, mask_t)?;
        let beta = tape.softmax(masked, 1)?;

        // Coefficients are recorded before dropout; rows sum to one.
        let beta_data = tape.data(beta);
        for u in 0..n {
            attention.entries.push(AttentionEntry {
                target: u,
                source: u,
                head: head_idx,
                beta: beta_data[u * n + u],
            });
            for &v in &adj[u] {
                attention.entries.push(AttentionEntry {
                    target: u,
                    source: v,
                    head: head_idx,
                    beta: beta_data[u * n + v],
                });
            }
        }

        let beta_used = if let Some(drop) = dropout.as_mut() {
            if drop.rate > 0.0 {
                let keep = 1.0 - drop.rate;
                let mut m = vec![0.0; n * n];
                for (i, mv) in m.iter_mut().enumerate() {
                    if mask[i] == 0.0 {
                        let u: f64 = drop.rng.random();
                        *mv = if u < keep { 1.0 / keep } else { 0.0 };
                    }
                }
                let mask_drop = tape.leaf(m, vec![n, n])?;
                tape.mul(beta, mask_drop)?
            } else {
                beta
            }
        } else {
            beta
        };

        let msg = tape.matmul(beta_used, wh)?; // [N, F_head]
        head_outputs.push(msg);
    }

    let mut merged = head_outputs[0];
    for out in &head_outputs[1..] {
        merged = tape.concat_cols(merged, *out)?;
    }
    let activated = tape.elu(merged);
    Ok(GatOutput {
        h: activated,
        attention,
    })
}

/// Multi-head self-attention parameters bound on a tape. Per head,
/// `query/key/value` are `[D_head, D]`; `output` is `[D, D]`.
#[derive(Debug, Clone)]
pub struct MhsaTensors {
    pub query: Vec<TensorId>,
    pub key: Vec<TensorId>,
    pub value: Vec<TensorId>,
    pub output: TensorId,
}

pub struct MhsaOutput {
    /// `[L, D]` context.
    pub context: TensorId,
    /// Row-stochastic attention per head, each `L x L` row-major.
    pub weights: Vec<Vec<f64>>,
}

/// Scaled dot-product self-attention over `tokens: [L, D]`.
pub fn mhsa_forward(tape: &mut Tape, tokens: TensorId, params: &MhsaTensors) -> Result<MhsaOutput> {
    let shape = tape.shape(tokens).to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape(format!(
            "mhsa_forward: tokens must be rank 2, got {shape:?}"
        )));
    }
    let (l, d) = (shape[0], shape[1]);
    let heads = params.query.len();
    if heads == 0 || params.key.len() != heads || params.value.len() != heads {
        return Err(Error::Config(
            "mhsa_forward: inconsistent head parameter counts".into(),
        ));
    }
    if d % heads != 0 {
        return Err(Error::Config(format!(
            "mhsa_forward: token dimension {d} not divisible by {heads} heads"
        )));
    }
    let d_head = d / heads;

    let mut weights = Vec::with_capacity(heads);
    let mut contexts = Vec::with_capacity(heads);
    for head in 0..heads {
        for (name, id) in [
            ("query", params.query[head]),
            ("key", params.key[head]),
            ("value", params.value[head]),
        ] {
            if tape.shape(id) != [d_head, d] {
                return Err(Error::Shape(format!(
                    "mhsa_forward: {name} head {head} has shape {:?}, expected [{d_head}, {d}]",
                    tape.shape(id)
                )));
            }
        }
        let q = tape.matmul_nt(tokens, params.query[head])?; // [L, d_head]
        let k = tape.matmul_nt(tokens, params.key[head])?;
        let v = tape.matmul_nt(tokens, params.value[head])?;
        let scores = tape.matmul_nt(q, k)?; // [L, L]
        let scores = tape.scale(scores, 1.0 / (d_head as f64).sqrt());
        let attn = tape.softmax(scores, 1)?;
        weights.push(tape.data(attn).to_vec());
        contexts.push(tape.matmul(attn, v)?);
    }
    let mut merged = contexts[0];
    for ctx in &contexts[1..] {
        merged = tape.concat_cols(merged, *ctx)?;
    }
    let out = tape.matmul_nt(merged, params.output)?;
    debug_assert_eq!(l, tape.shape(out)[0]);
    Ok(MhsaOutput {
        context: out,
        weights,
    })
}
