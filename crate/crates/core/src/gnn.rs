//! Dual-graph surrogate: two PointNet convolutions, two Transformer
//! convolutions and a single-head GAT convolution emitting one value per
//! road segment.
//!
//! Messages flow along dual edges, so the neighbourhood of node `i` is every
//! `j` with an edge `j → i`, plus `i` itself.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, pool, load_checkpoint, save_checkpoint, AdamConfig, AdamState, Index, Tape, Tensor, Var};
use crate::dual::{DualGraph, FeatureMatrix, Standardizer, POSITION_WIDTH, STATIC_WIDTH};
use crate::error::{Error, Result};

/// Width of the node input: static columns plus the variable column.
pub const INPUT_WIDTH: usize = STATIC_WIDTH + 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub transformer_heads: usize,
    pub leaky_slope: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Drop probability applied after each hidden activation while training.
    pub dropout: f64,
    /// L2 penalty added to every gradient.
    pub weight_decay: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 64,
            transformer_heads: 4,
            leaky_slope: 0.2,
            learning_rate: 1e-3,
            max_epochs: 200,
            patience: 20,
            seed: 0,
            dropout: 0.0,
            weight_decay: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.hidden_dim == 0 || self.transformer_heads == 0 {
            return bad("hidden_dim and transformer_heads must be positive".into());
        }
        if self.hidden_dim % self.transformer_heads != 0 {
            return bad(format!(
                "hidden_dim {} is not divisible by {} heads",
                self.hidden_dim, self.transformer_heads
            ));
        }
        if !(self.leaky_slope > 0.0) || !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("leaky_slope and learning_rate must be positive".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} is negative", self.weight_decay));
        }
        Ok(())
    }
}

/// Edge lists with self-loops, ordered by target then source.
#[derive(Debug, Clone)]
pub struct MessageGraph {
    nodes: usize,
    src: Index,
    dst: Index,
    /// Messages into node `i` occupy `offsets[i]..offsets[i + 1]`.
    offsets: Vec<usize>,
}

impl MessageGraph {
    pub fn new(dual: &DualGraph) -> MessageGraph {
        MessageGraph::from_edges(dual.node_count(), dual.edges())
    }

    /// Builds from raw `(source, target)` pairs; out-of-range pairs are the caller's bug.
    pub fn from_edges(nodes: usize, edges: &[(usize, usize)]) -> MessageGraph {
        let mut pairs: Vec<(usize, usize)> = edges.iter().map(|&(s, t)| (t, s)).collect();
        pairs.extend((0..nodes).map(|i| (i, i)));
        pairs.sort_unstable();
        pairs.dedup();
        let mut offsets = vec![0; nodes + 1];
        for &(t, _) in &pairs {
            offsets[t + 1] += 1;
        }
        for i in 0..nodes {
            offsets[i + 1] += offsets[i];
        }
        MessageGraph {
            nodes,
            src: pairs.iter().map(|p| p.1).collect::<Vec<_>>().into(),
            dst: pairs.iter().map(|p| p.0).collect::<Vec<_>>().into(),
            offsets,
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes
    }

    /// Message count including self-loops.
    pub fn edge_count(&self) -> usize {
        self.src.len()
    }

    pub fn sources(&self) -> &Index {
        &self.src
    }

    pub fn targets(&self) -> &Index {
        &self.dst
    }
}

/// Weight and optional bias of an affine map `x·W + b`.
#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Option<Var>,
}

pub fn linear(tape: &mut Tape, x: Var, l: &LinearVars) -> Result<Var> {
    let y = tape.matmul(x, l.weight)?;
    match l.bias {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

/// The first message layer acts on `x_j ‖ (pos_j − pos_i)`; its weight is
/// stored split into the feature rows and the position rows.
#[derive(Debug, Clone, Copy)]
pub struct PointNetVars {
    pub msg_x: Var,
    pub msg_pos: Var,
    pub msg_bias: Var,
    pub msg_out: LinearVars,
    pub gamma_hidden: LinearVars,
    pub gamma_out: LinearVars,
}

#[derive(Debug, Clone, Copy)]
pub struct TransformerVars {
    pub query: LinearVars,
    pub key: LinearVars,
    pub value: LinearVars,
    pub skip: LinearVars,
}

#[derive(Debug, Clone, Copy)]
pub struct GatVars {
    /// `hidden × 1` projection.
    pub weight: Var,
    /// `2 × 1` attention vector over `(W x_i, W x_j)`.
    pub attention: Var,
}

fn check_rows(tape: &Tape, v: Var, rows: usize, what: &str) -> Result<()> {
    let (r, c) = tape.shape(v);
    if r != rows {
        return Err(Error::Shape(format!("{what} has {r}x{c} rows for {rows} nodes")));
    }
    Ok(())
}

/// Max-aggregated PointNet convolution.
pub fn pointnet_conv(tape: &mut Tape, x: Var, pos: Var, graph: &MessageGraph, p: &PointNetVars) -> Result<Var> {
    check_rows(tape, x, graph.nodes, "pointnet input")?;
    check_rows(tape, pos, graph.nodes, "pointnet positions")?;
    // x_j·Wx + (pos_j − pos_i)·Wp + b = A_j − B_i with A = x·Wx + pos·Wp + b, B = pos·Wp
    let ax = tape.matmul(x, p.msg_x)?;
    let b = tape.matmul(pos, p.msg_pos)?;
    let a = tape.add(ax, b)?;
    let a = tape.add(a, p.msg_bias)?;
    let a_src = tape.gather_rows(a, &graph.src)?;
    let b_dst = tape.gather_rows(b, &graph.dst)?;
    let pre = tape.sub(a_src, b_dst)?;
    let h = tape.relu(pre)?;
    let m = linear(tape, h, &p.msg_out)?;
    let agg = tape.scatter_max(m, &graph.dst, graph.nodes)?;
    let g = linear(tape, agg, &p.gamma_hidden)?;
    let g = tape.relu(g)?;
    linear(tape, g, &p.gamma_out)
}

/// Attention weights `α` of a Transformer convolution, one column per head
/// and one row per message.
pub fn transformer_attention(
    tape: &mut Tape,
    x: Var,
    graph: &MessageGraph,
    p: &TransformerVars,
    heads: usize,
) -> Result<Var> {
    check_rows(tape, x, graph.nodes, "transformer input")?;
    let q = linear(tape, x, &p.query)?;
    let k = linear(tape, x, &p.key)?;
    let width = tape.shape(q).1;
    if heads == 0 || width % heads != 0 {
        return Err(Error::Shape(format!("{width} channels do not split into {heads} heads")));
    }
    let qi = tape.gather_rows(q, &graph.dst)?;
    let kj = tape.gather_rows(k, &graph.src)?;
    let dots = tape.mul(qi, kj)?;
    let scores = tape.block_sum(dots, heads)?;
    let scores = tape.scale(scores, 1.0 / ((width / heads) as f64).sqrt())?;
    tape.segment_softmax(scores, &graph.dst, graph.nodes)
}

/// Multi-head dot-product attention with a skip connection.
pub fn transformer_conv(
    tape: &mut Tape,
    x: Var,
    graph: &MessageGraph,
    p: &TransformerVars,
    heads: usize,
) -> Result<Var> {
    let alpha = transformer_attention(tape, x, graph, p, heads)?;
    let v = linear(tape, x, &p.value)?;
    let vj = tape.gather_rows(v, &graph.src)?;
    let weighted = tape.scale_rows(vj, alpha)?;
    let agg = tape.scatter_sum(weighted, &graph.dst, graph.nodes)?;
    let skip = linear(tape, x, &p.skip)?;
    tape.add(agg, skip)
}

fn gat_scores(tape: &mut Tape, x: Var, graph: &MessageGraph, p: &GatVars, slope: f64) -> Result<(Var, Var)> {
    check_rows(tape, x, graph.nodes, "gat input")?;
    let z = tape.matmul(x, p.weight)?;
    if tape.shape(z).1 != 1 {
        return Err(Error::Shape(format!("gat projection has width {}", tape.shape(z).1)));
    }
    let zi = tape.gather_rows(z, &graph.dst)?;
    let zj = tape.gather_rows(z, &graph.src)?;
    let pair = tape.concat_cols(zi, zj)?;
    let e = tape.matmul(pair, p.attention)?;
    let e = tape.leaky_relu(e, slope)?;
    let alpha = tape.segment_softmax(e, &graph.dst, graph.nodes)?;
    Ok((alpha, zj))
}

/// Single-head attention weights of the GAT layer.
pub fn gat_attention(tape: &mut Tape, x: Var, graph: &MessageGraph, p: &GatVars, slope: f64) -> Result<Var> {
    Ok(gat_scores(tape, x, graph, p, slope)?.0)
}

/// Single-head GAT convolution with output width 1 and no bias.
pub fn gat_conv(tape: &mut Tape, x: Var, graph: &MessageGraph, p: &GatVars, slope: f64) -> Result<Var> {
    let (alpha, zj) = gat_scores(tape, x, graph, p, slope)?;
    let weighted = tape.scale_rows(zj, alpha)?;
    tape.scatter_sum(weighted, &graph.dst, graph.nodes)
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data().len()).sum()
    }
}

type Entry = (String, usize, usize, usize, usize);

fn dense(out: &mut Vec<Entry>, prefix: &str, rows: usize, cols: usize, bias: bool) {
    out.push((format!("{prefix}.weight"), rows, cols, rows, cols));
    if bias {
        out.push((format!("{prefix}.bias"), 1, cols, 0, 0));
    }
}

/// `(name, rows, cols, fan_in, fan_out)`; biases have fan 0 and start at zero.
fn layout(config: &ModelConfig) -> Vec<Entry> {
    let h = config.hidden_dim;
    let mut out = Vec::new();
    for (layer, input) in [("pointnet1", INPUT_WIDTH), ("pointnet2", h)] {
        // one weight over x_j ‖ (pos_j − pos_i), stored as two row blocks
        let fan_in = input + POSITION_WIDTH;
        out.push((format!("{layer}.message.weight_x"), input, h, fan_in, h));
        out.push((format!("{layer}.message.weight_pos"), POSITION_WIDTH, h, fan_in, h));
        out.push((format!("{layer}.message.bias"), 1, h, 0, 0));
        dense(&mut out, &format!("{layer}.message_out"), h, h, true);
        dense(&mut out, &format!("{layer}.gamma_hidden"), h, h, true);
        dense(&mut out, &format!("{layer}.gamma_out"), h, h, true);
    }
    for layer in ["transformer1", "transformer2"] {
        for part in ["query", "key", "value", "skip"] {
            dense(&mut out, &format!("{layer}.{part}"), h, h, true);
        }
    }
    dense(&mut out, "gat", h, 1, false);
    out.push(("gat.attention".into(), 2, 1, 2, 1));
    out
}

impl ParamSet {
    /// Glorot-uniform weights and zero biases drawn from `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<ParamSet> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, rows, cols, fan_in, fan_out) in layout(config) {
            let t = if fan_in == 0 {
                Tensor::zeros(rows, cols)
            } else {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::from_fn(rows, cols, |_, _| rng.random_range(-limit..=limit))
            };
            names.push(name);
            tensors.push(t.with_grad());
        }
        Ok(ParamSet { names, tensors })
    }

    /// Checks names and shapes against the layout implied by `config`.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<ParamSet> {
        let expected = layout(config);
        if named.len() != expected.len() {
            return Err(Error::Data(format!("checkpoint holds {} tensors, model needs {}", named.len(), expected.len())));
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for ((name, t), (want, rows, cols, _, _)) in named.into_iter().zip(expected) {
            if name != want || t.shape() != (rows, cols) {
                return Err(Error::Data(format!(
                    "checkpoint tensor {name} {:?} does not match {want} ({rows}, {cols})",
                    t.shape()
                )));
            }
            names.push(name);
            tensors.push(t.with_grad());
        }
        Ok(ParamSet { names, tensors })
    }
}

/// Parameter leaves recorded on one tape.
#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub pointnet: [PointNetVars; 2],
    pub transformer: [TransformerVars; 2],
    pub gat: GatVars,
}

/// Records every parameter as a tape leaf, in [`ParamSet`] order.
pub fn bind(tape: &mut Tape, params: &ParamSet) -> Result<(ModelVars, Vec<Var>)> {
    let vars: Vec<Var> = params.tensors.iter().map(|t| tape.leaf(t)).collect();
    let find = |name: &str| -> Result<Var> {
        params
            .names
            .iter()
            .position(|n| n == name)
            .map(|i| vars[i])
            .ok_or_else(|| Error::Data(format!("missing parameter {name}")))
    };
    let lin = |prefix: &str, bias: bool| -> Result<LinearVars> {
        Ok(LinearVars {
            weight: find(&format!("{prefix}.weight"))?,
            bias: if bias { Some(find(&format!("{prefix}.bias"))?) } else { None },
        })
    };
    let pointnet = |layer: &str| -> Result<PointNetVars> {
        Ok(PointNetVars {
            msg_x: find(&format!("{layer}.message.weight_x"))?,
            msg_pos: find(&format!("{layer}.message.weight_pos"))?,
            msg_bias: find(&format!("{layer}.message.bias"))?,
            msg_out: lin(&format!("{layer}.message_out"), true)?,
            gamma_hidden: lin(&format!("{layer}.gamma_hidden"), true)?,
            gamma_out: lin(&format!("{layer}.gamma_out"), true)?,
        })
    };
    let transformer = |layer: &str| -> Result<TransformerVars> {
        Ok(TransformerVars {
            query: lin(&format!("{layer}.query"), true)?,
            key: lin(&format!("{layer}.key"), true)?,
            value: lin(&format!("{layer}.value"), true)?,
            skip: lin(&format!("{layer}.skip"), true)?,
        })
    };
    let model = ModelVars {
        pointnet: [pointnet("pointnet1")?, pointnet("pointnet2")?],
        transformer: [transformer("transformer1")?, transformer("transformer2")?],
        gat: GatVars { weight: find("gat.weight")?, attention: find("gat.attention")? },
    };
    Ok((model, vars))
}

/// Applies the layer stack on a tape. `dropout` is a mask source used only
/// while training. Returns predictions in scaled target units.
pub fn forward_on_tape(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &ModelConfig,
    graph: &MessageGraph,
    features: &FeatureMatrix,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    if !features.is_standardized() {
        return Err(Error::Usage("the surrogate expects standardized features".into()));
    }
    if features.rows() != graph.nodes {
        return Err(Error::Shape(format!("{} feature rows for {} graph nodes", features.rows(), graph.nodes)));
    }
    let n = features.rows();
    let x0 = tape.constant(n, INPUT_WIDTH, features.node_input())?;
    let pos = tape.constant(n, POSITION_WIDTH, features.positions())?;
    let mut act = |tape: &mut Tape, v: Var| -> Result<Var> {
        let v = tape.relu(v)?;
        match dropout.as_deref_mut() {
            Some(rng) if config.dropout > 0.0 => {
                let keep = 1.0 - config.dropout;
                let (r, c) = tape.shape(v);
                let mask = (0..r * c).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
                let mask = tape.constant(r, c, mask)?;
                tape.mul(v, mask)
            }
            _ => Ok(v),
        }
    };
    let x = pointnet_conv(tape, x0, pos, graph, &vars.pointnet[0])?;
    let x = act(tape, x)?;
    let x = pointnet_conv(tape, x, pos, graph, &vars.pointnet[1])?;
    let x = act(tape, x)?;
    let x = transformer_conv(tape, x, graph, &vars.transformer[0], config.transformer_heads)?;
    let x = act(tape, x)?;
    let x = transformer_conv(tape, x, graph, &vars.transformer[1], config.transformer_heads)?;
    let x = act(tape, x)?;
    gat_conv(tape, x, graph, &vars.gat, config.leaky_slope)
}

/// `(1/n)·Σ (pred − target)²` on the tape.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: &[f64]) -> Result<Var> {
    let (r, c) = tape.shape(pred);
    if r * c != target.len() || target.is_empty() {
        return Err(Error::Shape(format!("prediction {r}x{c} vs {} targets", target.len())));
    }
    let t = tape.constant(r, c, target.to_vec())?;
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq)?;
    tape.scale(s, 1.0 / target.len() as f64)
}

/// Mean squared error of two aligned vectors.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!("{} predictions vs {} targets", pred.len(), target.len())));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// Trained surrogate with its input standardizer and target scale.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    config: ModelConfig,
    params: ParamSet,
    standardizer: Standardizer,
    target_scale: f64,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: ModelConfig,
    standardizer: Standardizer,
    target_scale: f64,
}

impl SurrogateModel {
    /// Freshly initialised model.
    pub fn new(config: ModelConfig, standardizer: Standardizer, target_scale: f64) -> Result<SurrogateModel> {
        if !(target_scale > 0.0) || !target_scale.is_finite() {
            return Err(Error::Parameter(format!("target scale {target_scale} must be positive")));
        }
        let params = ParamSet::init(&config)?;
        Ok(SurrogateModel { config, params, standardizer, target_scale })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn target_scale(&self) -> f64 {
        self.target_scale
    }

    /// Predictions in target units for standardized features, computed by
    /// the tape-free inference kernels.
    pub fn forward(&self, graph: &MessageGraph, features: &FeatureMatrix) -> Result<Vec<f64>> {
        let mut y = infer::forward(&self.params, &self.config, graph, features)?;
        y.iter_mut().for_each(|v| *v *= self.target_scale);
        Ok(y)
    }

    /// Same as [`forward`](Self::forward) but evaluated on an autodiff tape.
    pub fn forward_reference(&self, graph: &MessageGraph, features: &FeatureMatrix) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (vars, _) = bind(&mut tape, &self.params)?;
        let out = forward_on_tape(&mut tape, &vars, &self.config, graph, features, None)?;
        Ok(tape.value(out).iter().map(|v| v * self.target_scale).collect())
    }

    /// Standardizes raw features and runs the forward pass, timing both.
    pub fn predict(&self, graph: &MessageGraph, raw: &FeatureMatrix) -> Result<(Vec<f64>, Duration)> {
        let start = Instant::now();
        let z = self.standardizer.apply(raw)?;
        let y = self.forward(graph, &z)?;
        Ok((y, start.elapsed()))
    }

    /// Writes the parameter checkpoint and its JSON sidecar.
    pub fn save(&self, params_path: impl AsRef<Path>, sidecar_path: impl AsRef<Path>) -> Result<()> {
        let named: Vec<(&str, &Tensor)> =
            self.params.names.iter().map(String::as_str).zip(self.params.tensors.iter()).collect();
        save_checkpoint(params_path, &named)?;
        let sidecar = Sidecar {
            config: self.config.clone(),
            standardizer: self.standardizer.clone(),
            target_scale: self.target_scale,
        };
        std::fs::write(sidecar_path, serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(params_path: impl AsRef<Path>, sidecar_path: impl AsRef<Path>) -> Result<SurrogateModel> {
        let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path)?)?;
        sidecar.config.validate()?;
        let params = ParamSet::from_named(&sidecar.config, load_checkpoint(params_path)?)?;
        Ok(SurrogateModel {
            config: sidecar.config,
            params,
            standardizer: sidecar.standardizer,
            target_scale: sidecar.target_scale,
        })
    }
}

/// One scenario: raw features and per-node targets, both in dual-graph node order.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub features: FeatureMatrix,
    pub targets: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    /// Mean per-step training MSE of each epoch, in target units.
    pub train_mse: Vec<f64>,
    /// Validation MSE pooled over all validation nodes, in target units.
    pub val_mse: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl TrainingHistory {
    pub fn epochs_run(&self) -> usize {
        self.val_mse.len()
    }
}

fn population_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    (values.map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Fits the standardizer and target scale on `train`, then optimises with
/// Adam, one step per scenario graph. Training stops after `max_epochs` or
/// once `patience` consecutive epochs fail to improve the validation MSE
/// after the best one; the best epoch's parameters are returned.
pub fn train(
    config: &ModelConfig,
    graph: &MessageGraph,
    train: &[Sample],
    validation: &[Sample],
) -> Result<(SurrogateModel, TrainingHistory)> {
    config.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::Parameter("training and validation splits must be non-empty".into()));
    }
    for s in train.iter().chain(validation) {
        if s.targets.len() != s.features.rows() || s.features.rows() != graph.nodes {
            return Err(Error::Shape(format!(
                "sample {}: {} targets, {} feature rows, {} graph nodes",
                s.id,
                s.targets.len(),
                s.features.rows(),
                graph.nodes
            )));
        }
    }
    let standardizer = Standardizer::fit(&train.iter().map(|s| &s.features).collect::<Vec<_>>())?;
    let std = population_std(train.iter().flat_map(|s| s.targets.iter().copied()));
    let target_scale = if std > 1e-12 { std } else { 1.0 };
    let mut model = SurrogateModel::new(config.clone(), standardizer, target_scale)?;

    let prepare = |set: &[Sample]| -> Result<Vec<(FeatureMatrix, Vec<f64>)>> {
        set.iter()
            .map(|s| {
                let z = model.standardizer.apply(&s.features)?;
                Ok((z, s.targets.iter().map(|y| y / target_scale).collect()))
            })
            .collect()
    };
    let train_set = prepare(train)?;
    let val_set = prepare(validation)?;

    let adam = AdamConfig { lr: config.learning_rate, ..AdamConfig::default() };
    let mut state = AdamState::new(&model.params.tensors);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    order_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(2);

    let mut history = TrainingHistory { train_mse: Vec::new(), val_mse: Vec::new(), best_epoch: 0 };
    let mut best: Option<(f64, ParamSet)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0u64;
    let scale2 = target_scale * target_scale;
    for epoch in 1..=config.max_epochs {
        let diverged = |e: Error| Error::Training { epoch, message: e.to_string() };
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for &i in &order {
            let (features, targets) = &train_set[i];
            let mut tape = Tape::new();
            let (vars, leaves) = bind(&mut tape, &model.params).map_err(diverged)?;
            let pred = forward_on_tape(&mut tape, &vars, config, graph, features, Some(&mut dropout_rng))
                .map_err(diverged)?;
            let loss = mse_loss(&mut tape, pred, targets).map_err(diverged)?;
            tape.backward(loss)?;
            epoch_loss += tape.value(loss)[0];
            for (t, &v) in model.params.tensors.iter_mut().zip(&leaves) {
                t.zero_grad();
                if let Some(g) = tape.grad(v) {
                    t.accumulate_grad(g);
                }
                if config.weight_decay > 0.0 {
                    let decay: Vec<f64> = t.data().iter().map(|w| config.weight_decay * w).collect();
                    t.accumulate_grad(&decay);
                }
            }
            step += 1;
            adam_step(&mut model.params.tensors, &mut state, &adam, step)?;
            if model.params.tensors.iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
                return Err(diverged(Error::NonFinite("adam update".into())));
            }
        }
        let train_mse = epoch_loss / train_set.len() as f64 * scale2;
        if !train_mse.is_finite() {
            return Err(Error::Training { epoch, message: "training loss is not finite".into() });
        }
        history.train_mse.push(train_mse);

        let (mut sq, mut count) = (0.0, 0usize);
        for (features, targets) in &val_set {
            let pred = model.forward(graph, features).map_err(diverged)?;
            for (p, t) in pred.iter().zip(targets) {
                sq += (p - t * target_scale).powi(2);
            }
            count += targets.len();
        }
        let val = sq / count as f64;
        if !val.is_finite() {
            return Err(Error::Training { epoch, message: "validation loss is not finite".into() });
        }
        history.val_mse.push(val);
        if best.as_ref().is_none_or(|(b, _)| val < *b) {
            best = Some((val, model.params.clone()));
            history.best_epoch = epoch;
        } else if epoch - history.best_epoch > config.patience {
            break;
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok((model, history))
}

/// Predictions for many scenarios, keeping the shared model read-only.
pub fn predict_many(
    model: &SurrogateModel,
    graph: &MessageGraph,
    samples: &[Sample],
) -> Result<Vec<(Vec<f64>, Duration)>> {
    use rayon::prelude::*;
    samples.par_iter().map(|s| model.predict(graph, &s.features)).collect()
}

/// Forward pass without a tape. Message tensors are produced and reduced in
/// cache-sized tiles of edges, which keeps inference memory-light.
mod infer {
    use super::*;

    const TILE: usize = 128;

    /// `out (rows × n) = x (rows × k) · w (k × n)`, in row tiles.
    fn matmul(x: &[f64], rows: usize, k: usize, w: &[f64], n: usize, out: &mut Vec<f64>) {
        // dgemm overwrites every entry (beta = 0); only newly grown space is filled
        out.resize(rows * n, 0.0);
        out.truncate(rows * n);
        for start in (0..rows).step_by(TILE) {
            let m = TILE.min(rows - start);
            if k == 0 || n == 0 {
                continue;
            }
            // SAFETY: the tile lies inside `x` and `out`, whose lengths are checked below.
            debug_assert!(x.len() >= rows * k && w.len() >= k * n);
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    x[start * k..].as_ptr(),
                    k as isize,
                    1,
                    w.as_ptr(),
                    n as isize,
                    1,
                    0.0,
                    out[start * n..].as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
    }

    fn add_row(out: &mut [f64], bias: &[f64]) {
        for row in out.chunks_mut(bias.len()) {
            row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
        }
    }

    fn relu(v: &mut [f64]) {
        v.iter_mut().for_each(|x| *x = x.max(0.0));
    }

    struct Params<'a>(&'a ParamSet);

    impl<'a> Params<'a> {
        fn get(&self, name: &str) -> Result<&'a [f64]> {
            self.0.get(name).map(Tensor::data).ok_or_else(|| Error::Data(format!("missing parameter {name}")))
        }
    }

    fn pointnet(p: &Params, layer: &str, x: &[f64], width: usize, pos: &[f64], g: &MessageGraph) -> Result<Vec<f64>> {
        let n = g.nodes;
        let wx = p.get(&format!("{layer}.message.weight_x"))?;
        let h = wx.len() / width;
        let mut pp = pool::take(n * h);
        matmul(pos, n, POSITION_WIDTH, p.get(&format!("{layer}.message.weight_pos"))?, h, &mut pp);
        let mut a = pool::take(n * h);
        matmul(x, n, width, wx, h, &mut a);
        a.iter_mut().zip(&pp).for_each(|(a, b)| *a += b);
        add_row(&mut a, p.get(&format!("{layer}.message.bias"))?);

        let w2 = p.get(&format!("{layer}.message_out.weight"))?;
        let mut agg = pool::filled(n * h, f64::NEG_INFINITY);
        let mut pre = pool::filled(TILE * h, 0.0);
        let mut msg = pool::take(TILE * h);
        let edges = g.src.len();
        for start in (0..edges).step_by(TILE) {
            let m = TILE.min(edges - start);
            let pairs = g.src[start..start + m].iter().zip(&g.dst[start..start + m]);
            for (row, (&j, &i)) in pre.chunks_exact_mut(h).zip(pairs) {
                let (aj, pi) = (&a[j * h..(j + 1) * h], &pp[i * h..(i + 1) * h]);
                for ((o, x), y) in row.iter_mut().zip(aj).zip(pi) {
                    let v = x - y;
                    *o = if v > 0.0 { v } else { 0.0 };
                }
            }
            matmul(&pre[..m * h], m, h, w2, h, &mut msg);
            for (row, &i) in msg.chunks_exact(h).zip(&g.dst[start..start + m]) {
                for (o, &v) in agg[i * h..(i + 1) * h].iter_mut().zip(row) {
                    *o = if v > *o { v } else { *o };
                }
            }
        }
        // every node receives its self-loop, so no aggregate stays at -inf
        add_row(&mut agg, p.get(&format!("{layer}.message_out.bias"))?);
        let mut hidden = pool::take(n * h);
        matmul(&agg, n, h, p.get(&format!("{layer}.gamma_hidden.weight"))?, h, &mut hidden);
        add_row(&mut hidden, p.get(&format!("{layer}.gamma_hidden.bias"))?);
        relu(&mut hidden);
        let mut out = pool::take(n * h);
        matmul(&hidden, n, h, p.get(&format!("{layer}.gamma_out.weight"))?, h, &mut out);
        add_row(&mut out, p.get(&format!("{layer}.gamma_out.bias"))?);
        for v in [pp, a, agg, pre, msg, hidden] {
            pool::give(v);
        }
        Ok(out)
    }

    fn transformer(p: &Params, layer: &str, x: &[f64], h: usize, heads: usize, g: &MessageGraph) -> Result<Vec<f64>> {
        let n = g.nodes;
        let parts = ["query", "key", "value", "skip"];
        // one product against [Wq | Wk | Wv | Ws]
        let mut w = vec![0.0; h * 4 * h];
        let mut b = vec![0.0; 4 * h];
        for (k, part) in parts.iter().enumerate() {
            let wk = p.get(&format!("{layer}.{part}.weight"))?;
            for r in 0..h {
                w[r * 4 * h + k * h..r * 4 * h + (k + 1) * h].copy_from_slice(&wk[r * h..(r + 1) * h]);
            }
            b[k * h..(k + 1) * h].copy_from_slice(p.get(&format!("{layer}.{part}.bias"))?);
        }
        let mut y = pool::take(n * 4 * h);
        matmul(x, n, h, &w, 4 * h, &mut y);
        add_row(&mut y, &b);
        let stride = 4 * h;
        let d = h / heads;
        let inv = 1.0 / (d as f64).sqrt();
        let mut out = pool::filled(n * h, 0.0);
        let mut alpha = Vec::new();
        for i in 0..n {
            let (lo, hi) = (g.offsets[i], g.offsets[i + 1]);
            let deg = hi - lo;
            let q = &y[i * stride..i * stride + h];
            alpha.clear();
            alpha.resize(deg * heads, 0.0);
            for (scores, &j) in alpha.chunks_exact_mut(heads).zip(&g.src[lo..hi]) {
                let k = &y[j * stride + h..j * stride + 2 * h];
                for ((s, qh), kh) in scores.iter_mut().zip(q.chunks_exact(d)).zip(k.chunks_exact(d)) {
                    *s = qh.iter().zip(kh).fold(0.0, |acc, (a, b)| acc + a * b) * inv;
                }
            }
            for head in 0..heads {
                let max = (0..deg).map(|t| alpha[t * heads + head]).fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for t in 0..deg {
                    let e = (alpha[t * heads + head] - max).exp();
                    alpha[t * heads + head] = e;
                    denom += e;
                }
                for t in 0..deg {
                    alpha[t * heads + head] /= denom;
                }
            }
            let target = &mut out[i * h..(i + 1) * h];
            for (weights, &j) in alpha.chunks_exact(heads).zip(&g.src[lo..hi]) {
                let v = &y[j * stride + 2 * h..j * stride + 3 * h];
                for ((block, vh), &a) in target.chunks_exact_mut(d).zip(v.chunks_exact(d)).zip(weights) {
                    block.iter_mut().zip(vh).for_each(|(o, v)| *o += v * a);
                }
            }
            let skip = &y[i * stride + 3 * h..i * stride + 4 * h];
            target.iter_mut().zip(skip).for_each(|(o, s)| *o += s);
        }
        pool::give(y);
        Ok(out)
    }

    fn gat(p: &Params, x: &[f64], h: usize, slope: f64, g: &MessageGraph) -> Result<Vec<f64>> {
        let n = g.nodes;
        let mut z = Vec::new();
        matmul(x, n, h, p.get("gat.weight")?, 1, &mut z);
        let a = p.get("gat.attention")?;
        let mut out = vec![0.0; n];
        let mut scores = Vec::new();
        for i in 0..n {
            let range = g.offsets[i]..g.offsets[i + 1];
            scores.clear();
            for e in range.clone() {
                let s = z[i] * a[0] + z[g.src[e]] * a[1];
                scores.push(if s > 0.0 { s } else { slope * s });
            }
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                denom += *s;
            }
            for (e, s) in range.zip(&scores) {
                out[i] += z[g.src[e]] * (s / denom);
            }
        }
        Ok(out)
    }

    pub fn forward(params: &ParamSet, config: &ModelConfig, g: &MessageGraph, z: &FeatureMatrix) -> Result<Vec<f64>> {
        if !z.is_standardized() {
            return Err(Error::Usage("the surrogate expects standardized features".into()));
        }
        if z.rows() != g.nodes {
            return Err(Error::Shape(format!("{} feature rows for {} graph nodes", z.rows(), g.nodes)));
        }
        let p = Params(params);
        let h = config.hidden_dim;
        let pos = z.positions();
        let mut x = pointnet(&p, "pointnet1", &z.node_input(), INPUT_WIDTH, &pos, g)?;
        relu(&mut x);
        let layers: [&dyn Fn(&[f64]) -> Result<Vec<f64>>; 3] = [
            &|x| pointnet(&p, "pointnet2", x, h, &pos, g),
            &|x| transformer(&p, "transformer1", x, h, config.transformer_heads, g),
            &|x| transformer(&p, "transformer2", x, h, config.transformer_heads, g),
        ];
        for layer in layers {
            let mut next = layer(&x)?;
            relu(&mut next);
            pool::give(std::mem::replace(&mut x, next));
        }
        let y = gat(&p, &x, h, config.leaky_slope, g)?;
        pool::give(x);
        if let Some(bad) = y.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("surrogate output {bad}")));
        }
        Ok(y)
    }
}
