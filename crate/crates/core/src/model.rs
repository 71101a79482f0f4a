//! The hierarchical patient encoder: per block, project features together
//! with positional encodings, run graph attention, score and pool nodes, and
//! emit a stain-aware readout; then self-attend over the per-block readout
//! tokens and classify. Every forward pass captures an [`AttentionRecord`]
//! for the explainability metrics.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, TensorId};
use crate::error::{Error, Result};
use crate::gat::{
    gat_forward, mhsa_forward, AttnDropout, GatHeadTensors, GatLayerTensors, MhsaTensors,
};
use crate::graph::{EdgeType, PatientGraph};
use crate::linalg::Mat;
use crate::rwpe::{concat_project, random_walk_pe, PositionalEncoding};
use crate::saap::{pool, sag_scores};

/// All hyperparameters of the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of (GAT + pooling) blocks.
    pub layers: usize,
    /// Per-block feature width F; readouts are 2F.
    pub hidden_dim: usize,
    /// Random-walk length l; 0 disables positional encodings.
    pub pe_dim: usize,
    /// Fraction of nodes retained per block, in (0, 1].
    pub pool_ratio: f64,
    pub gat_heads: usize,
    pub mhsa_heads: usize,
    /// Attention-coefficient dropout rate, training mode only.
    pub dropout: f64,
    pub num_classes: usize,
    /// Neighbor count for graph construction.
    pub knn_k: usize,
    pub seed: u64,
    /// Input feature dimension d_x.
    pub input_dim: usize,
    /// Negative slope of the GAT logit nonlinearity.
    pub leaky_slope: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(Error::Config("layers must be at least 1".into()));
        }
        if self.hidden_dim < 1 || self.input_dim < 1 {
            return Err(Error::Config(
                "hidden_dim and input_dim must be at least 1".into(),
            ));
        }
        if !(self.pool_ratio > 0.0 && self.pool_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "pool_ratio must be in (0, 1], got {}",
                self.pool_ratio
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.gat_heads < 1 || !self.hidden_dim.is_multiple_of(self.gat_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} must be divisible by gat_heads {}",
                self.hidden_dim, self.gat_heads
            )));
        }
        if self.mhsa_heads < 1 || !(2 * self.hidden_dim).is_multiple_of(self.mhsa_heads) {
            return Err(Error::Config(format!(
                "readout dim {} must be divisible by mhsa_heads {}",
                2 * self.hidden_dim,
                self.mhsa_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.leaky_slope <= 0.0 {
            return Err(Error::Config("leaky_slope must be positive".into()));
        }
        if self.knn_k < 1 {
            return Err(Error::Config("knn_k must be at least 1".into()));
        }
        Ok(())
    }

    /// Four blocks, walk length 20, ratio 0.7, 2 attention heads, dropout 0.2.
    pub fn preset_deep_07(input_dim: usize) -> Self {
        ModelConfig {
            layers: 4,
            hidden_dim: 16,
            pe_dim: 20,
            pool_ratio: 0.7,
            gat_heads: 2,
            mhsa_heads: 2,
            dropout: 0.2,
            num_classes: 2,
            knn_k: 5,
            seed: 42,
            input_dim,
            leaky_slope: 0.2,
        }
    }

    /// Four blocks, walk length 20, ratio 0.5, 4 attention heads, dropout 0.2.
    pub fn preset_deep_05(input_dim: usize) -> Self {
        ModelConfig {
            pool_ratio: 0.5,
            gat_heads: 4,
            mhsa_heads: 4,
            ..Self::preset_deep_07(input_dim)
        }
    }

    /// Per-block GAT input width (output of the projection).
    fn block_input_dim(&self, block: usize) -> usize {
        if block == 0 {
            self.input_dim
        } else {
            self.hidden_dim
        }
    }

    pub fn token_dim(&self) -> usize {
        2 * self.hidden_dim
    }
}

/// One learnable tensor with a stable name.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Tensor layout implied by a config: (name, shape, fan_in). `fan_in == 0`
/// marks a zero-initialized tensor (biases).
pub fn tensor_plan(config: &ModelConfig) -> Vec<(String, Vec<usize>, usize)> {
    let f = config.hidden_dim;
    let f_head = f / config.gat_heads;
    let d = config.token_dim();
    let d_head = d / config.mhsa_heads;
    let mut plan = Vec::new();
    for t in 0..config.layers {
        let d_in = config.block_input_dim(t) + config.pe_dim;
        plan.push((format!("block{t}.projection"), vec![f, d_in], d_in));
        for h in 0..config.gat_heads {
            plan.push((format!("block{t}.gat{h}.weight"), vec![f_head, f], f));
            plan.push((
                format!("block{t}.gat{h}.attn"),
                vec![2 * f_head],
                2 * f_head,
            ));
        }
        plan.push((format!("block{t}.score"), vec![f, 1], f));
    }
    for m in 0..config.mhsa_heads {
        plan.push((format!("mhsa.head{m}.query"), vec![d_head, d], d));
        plan.push((format!("mhsa.head{m}.key"), vec![d_head, d], d));
        plan.push((format!("mhsa.head{m}.value"), vec![d_head, d], d));
    }
    plan.push(("mhsa.output".into(), vec![d, d], d));
    plan.push(("token_embedding".into(), vec![config.layers, d], d));
    plan.push((
        "classifier.weight".into(),
        vec![config.num_classes, config.layers * d],
        config.layers * d,
    ));
    plan.push(("classifier.bias".into(), vec![config.num_classes], 0));
    plan
}

/// All learnable tensors, in plan order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub tensors: Vec<NamedTensor>,
}

impl ModelParams {
    /// Deterministic initialization: weights uniform in
    /// `(-sqrt(1/fan_in), sqrt(1/fan_in))`, biases zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = tensor_plan(config)
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let n: usize = shape.iter().product();
                let data = if fan_in == 0 {
                    vec![0.0; n]
                } else {
                    let bound = (1.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                };
                NamedTensor { name, shape, data }
            })
            .collect();
        Ok(ModelParams { tensors })
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(NamedTensor::numel).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_scalars());
        for t in &self.tensors {
            out.extend_from_slice(&t.data);
        }
        out
    }

    pub fn from_flat(config: &ModelConfig, flat: &[f64]) -> Result<Self> {
        let plan = tensor_plan(config);
        let total: usize = plan
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum();
        if flat.len() != total {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} values, plan needs {total}",
                flat.len()
            )));
        }
        let mut tensors = Vec::with_capacity(plan.len());
        let mut off = 0;
        for (name, shape, _) in plan {
            let n: usize = shape.iter().product();
            tensors.push(NamedTensor {
                name,
                shape,
                data: flat[off..off + n].to_vec(),
            });
            off += n;
        }
        Ok(ModelParams { tensors })
    }
}

/// Tape-bound parameter tensors, in plan order.
pub struct ParamView {
    pub ids: Vec<TensorId>,
    layers: usize,
    gat_heads: usize,
    mhsa_heads: usize,
}

impl ParamView {
    fn block_base(&self, t: usize) -> usize {
        t * (2 * self.gat_heads + 2)
    }

    fn mhsa_base(&self) -> usize {
        self.layers * (2 * self.gat_heads + 2)
    }

    pub fn projection(&self, t: usize) -> TensorId {
        self.ids[self.block_base(t)]
    }

    pub fn gat_weight(&self, t: usize, h: usize) -> TensorId {
        self.ids[self.block_base(t) + 1 + 2 * h]
    }

    pub fn gat_attn(&self, t: usize, h: usize) -> TensorId {
        self.ids[self.block_base(t) + 2 + 2 * h]
    }

    pub fn score(&self, t: usize) -> TensorId {
        self.ids[self.block_base(t) + 1 + 2 * self.gat_heads]
    }

    pub fn mhsa(&self) -> MhsaTensors {
        let base = self.mhsa_base();
        MhsaTensors {
            query: (0..self.mhsa_heads)
                .map(|m| self.ids[base + 3 * m])
                .collect(),
            key: (0..self.mhsa_heads)
                .map(|m| self.ids[base + 3 * m + 1])
                .collect(),
            value: (0..self.mhsa_heads)
                .map(|m| self.ids[base + 3 * m + 2])
                .collect(),
            output: self.ids[base + 3 * self.mhsa_heads],
        }
    }

    pub fn token_embedding(&self) -> TensorId {
        self.ids[self.mhsa_base() + 3 * self.mhsa_heads + 1]
    }

    pub fn classifier_weight(&self) -> TensorId {
        self.ids[self.mhsa_base() + 3 * self.mhsa_heads + 2]
    }

    pub fn classifier_bias(&self) -> TensorId {
        self.ids[self.mhsa_base() + 3 * self.mhsa_heads + 3]
    }
}

/// Binds stored parameters onto a tape as gradient-tracked leaves.
pub fn bind(tape: &mut Tape, params: &ModelParams, config: &ModelConfig) -> Result<ParamView> {
    let mut ids = Vec::with_capacity(params.tensors.len());
    for t in &params.tensors {
        ids.push(tape.leaf_grad(t.data.clone(), t.shape.clone())?);
    }
    Ok(ParamView {
        ids,
        layers: config.layers,
        gat_heads: config.gat_heads,
        mhsa_heads: config.mhsa_heads,
    })
}

/// Carves a single flat parameter leaf into the plan's tensors, so one
/// backward pass yields the gradient of every coordinate of the leaf.
pub fn bind_flat(tape: &mut Tape, flat: TensorId, config: &ModelConfig) -> Result<ParamView> {
    let mut ids = Vec::new();
    let mut off = 0;
    for (_, shape, _) in tensor_plan(config) {
        let n: usize = shape.iter().product();
        let s = tape.slice_1d(flat, off, n)?;
        let s = if shape.len() == 2 {
            tape.reshape(s, shape)?
        } else {
            s
        };
        ids.push(s);
        off += n;
    }
    Ok(ParamView {
        ids,
        layers: config.layers,
        gat_heads: config.gat_heads,
        mhsa_heads: config.mhsa_heads,
    })
}

/// Head-averaged attention coefficient on a directed edge, with endpoint
/// stains, original node ids.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordedEdge {
    pub target: usize,
    pub source: usize,
    pub beta: f64,
    pub target_stain: String,
    pub source_stain: String,
    pub self_loop: bool,
}

/// Everything one block exposes for the explainability metrics.
#[derive(Debug, Clone)]
pub struct LayerRecord {
    /// Original ids of the nodes entering the block.
    pub node_ids: Vec<usize>,
    pub node_stains: Vec<String>,
    /// Raw attention scores, aligned with `node_ids`.
    pub raw_scores: Vec<f64>,
    /// Original ids of the retained nodes, descending score.
    pub retained_ids: Vec<usize>,
    /// Normalized scores a', aligned with `retained_ids`.
    pub norm_scores: Vec<f64>,
    pub retained_stains: Vec<String>,
    /// Stain -> attention mass; only stains present among retained nodes.
    pub alpha: BTreeMap<String, f64>,
    pub edge_attention: Vec<RecordedEdge>,
    /// Surviving typed edges after pooling, original-id endpoints.
    pub pruned_edges: Vec<(usize, usize, EdgeType)>,
}

#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub layers: Vec<LayerRecord>,
    /// Per-head L x L row-stochastic attention over the readout tokens.
    pub mhsa_weights: Vec<Mat>,
}

pub enum ForwardMode<'r> {
    Eval,
    Train { rng: &'r mut ChaCha8Rng },
}

pub struct Forward {
    pub tape: Tape,
    /// Rank-1 `[num_classes]` logits.
    pub logits: TensorId,
    pub record: AttentionRecord,
    pub bound: ParamView,
}

/// Positional encoding of the input graph, or `None` when disabled.
pub fn prepare_pe(
    graph: &PatientGraph,
    config: &ModelConfig,
) -> Result<Option<PositionalEncoding>> {
    if config.pe_dim == 0 {
        Ok(None)
    } else {
        Ok(Some(random_walk_pe(graph, config.pe_dim)?))
    }
}

/// Full forward pass binding `params` onto a fresh tape.
pub fn forward(
    params: &ModelParams,
    graph: &PatientGraph,
    pe: Option<&PositionalEncoding>,
    config: &ModelConfig,
    mode: ForwardMode<'_>,
) -> Result<Forward> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, config)?;
    let (logits, record) = forward_on_tape(&mut tape, &bound, graph, pe, config, mode)?;
    Ok(Forward {
        tape,
        logits,
        record,
        bound,
    })
}

/// Forward pass with parameters already bound (shared by training and the
/// flat-leaf gradient check).
pub fn forward_on_tape(
    tape: &mut Tape,
    bound: &ParamView,
    graph: &PatientGraph,
    pe: Option<&PositionalEncoding>,
    config: &ModelConfig,
    mut mode: ForwardMode<'_>,
) -> Result<(TensorId, AttentionRecord)> {
    config.validate()?;
    let n0 = graph.n_nodes();
    if n0 == 0 {
        return Err(Error::Graph("forward pass over an empty graph".into()));
    }
    if let Some(bad) = graph
        .nodes
        .iter()
        .find(|r| r.feature.len() != config.input_dim)
    {
        return Err(Error::Shape(format!(
            "node feature dimension {} does not match configured input_dim {}",
            bad.feature.len(),
            config.input_dim
        )));
    }
    let pe = match (config.pe_dim, pe) {
        (0, _) => None,
        (_, None) => {
            return Err(Error::Config(
                "pe_dim > 0 but no positional encoding supplied".into(),
            ))
        }
        (l, Some(p)) => {
            if p.walk_length != l {
                return Err(Error::Shape(format!(
                    "positional encoding length {} does not match pe_dim {l}",
                    p.walk_length
                )));
            }
            Some(p)
        }
    };

    let mut features = {
        let mut data = Vec::with_capacity(n0 * config.input_dim);
        for r in &graph.nodes {
            data.extend_from_slice(&r.feature);
        }
        tape.leaf(data, vec![n0, config.input_dim])?
    };
    let mut current = graph.clone();
    let mut layers = Vec::with_capacity(config.layers);
    let mut readouts = Vec::with_capacity(config.layers);

    for t in 0..config.layers {
        let n_t = current.n_nodes();
        // Re-append the input-graph positional encoding rows of the survivors.
        let projected = if let Some(p) = pe {
            let mut rows = Vec::with_capacity(n_t * config.pe_dim);
            for &orig in &current.original_ids {
                rows.extend_from_slice(p.row(orig));
            }
            let pe_t = tape.leaf(rows, vec![n_t, config.pe_dim])?;
            concat_project(tape, features, pe_t, bound.projection(t))?
        } else {
            tape.matmul_nt(features, bound.projection(t))?
        };

        let gat_params = GatLayerTensors {
            heads: (0..config.gat_heads)
                .map(|h| GatHeadTensors {
                    weight: bound.gat_weight(t, h),
                    attn: bound.gat_attn(t, h),
                })
                .collect(),
            leaky_slope: config.leaky_slope,
        };
        let dropout = match &mut mode {
            ForwardMode::Train { rng } if config.dropout > 0.0 => Some(AttnDropout {
                rate: config.dropout,
                rng,
            }),
            _ => None,
        };
        let gat_out = gat_forward(tape, projected, &current, &gat_params, dropout)?;

        let scores = sag_scores(tape, gat_out.h, &current, bound.score(t))?;
        let pooled = pool(tape, gat_out.h, scores, &current, config.pool_ratio)?;

        let edge_attention = gat_out
            .attention
            .head_averaged(config.gat_heads)
            .into_iter()
            .map(|(target, source, beta)| RecordedEdge {
                target: current.original_ids[target],
                source: current.original_ids[source],
                beta,
                target_stain: current.nodes[target].stain.clone(),
                source_stain: current.nodes[source].stain.clone(),
                self_loop: target == source,
            })
            .collect();

        layers.push(LayerRecord {
            node_ids: current.original_ids.clone(),
            node_stains: current.nodes.iter().map(|n| n.stain.clone()).collect(),
            raw_scores: pooled.raw_scores.clone(),
            retained_ids: pooled
                .retained_local
                .iter()
                .map(|&i| current.original_ids[i])
                .collect(),
            norm_scores: tape.data(pooled.norm_scores).to_vec(),
            retained_stains: pooled
                .retained_local
                .iter()
                .map(|&i| current.nodes[i].stain.clone())
                .collect(),
            alpha: pooled.alpha_map(tape),
            edge_attention,
            pruned_edges: pooled
                .pruned
                .edges
                .iter()
                .map(|e| {
                    (
                        pooled.pruned.original_ids[e.u],
                        pooled.pruned.original_ids[e.v],
                        e.kind,
                    )
                })
                .collect(),
        });

        readouts.push(pooled.readout);
        features = pooled.scaled;
        current = pooled.pruned;
    }

    let tokens = tape.stack_rows(&readouts)?;
    let tokens = tape.add(tokens, bound.token_embedding())?;
    let mhsa_out = mhsa_forward(tape, tokens, &bound.mhsa())?;
    let l = config.layers;
    let mhsa_weights = mhsa_out
        .weights
        .into_iter()
        .map(|w| Mat {
            rows: l,
            cols: l,
            data: w,
        })
        .collect();

    let flat = tape.reshape(mhsa_out.context, vec![1, l * config.token_dim()])?;
    let logits = tape.matmul_nt(flat, bound.classifier_weight())?;
    let bias = tape.reshape(bound.classifier_bias(), vec![1, config.num_classes])?;
    let logits = tape.add(logits, bias)?;
    let logits = tape.reshape(logits, vec![config.num_classes])?;

    Ok((
        logits,
        AttentionRecord {
            layers,
            mhsa_weights,
        },
    ))
}
