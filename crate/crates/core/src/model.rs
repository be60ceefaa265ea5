//! Message-passing model zoo with a frozen-parameter contract.
//!
//! A model is a stack of message-passing and dense layers plus an aggregator
//! and optional mean-pool readout. After pretraining the model is frozen:
//! its SHA-256 `param_hash` over the canonical JSON body is the verifiable
//! guarantee that reprogramming never touches a parameter. Message-passing
//! layers always carry attention parameters so any aggregator can drive any
//! model.

use std::path::Path;
use std::rc::Rc;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::dataset::{GraphDataset, TaskKind};
use crate::error::{Error, Result};
use crate::graph::{Adjacency, Graph, MaskKind, NodeLabels};
use crate::kernels::AggMode;
use crate::metrics;
use crate::rng::substream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Neighbor-combination rules a model can run under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregator {
    Sum,
    Mean,
    Max,
    AttentionLite,
}

impl Aggregator {
    pub const ALL: [Aggregator; 4] = [
        Aggregator::Sum,
        Aggregator::Mean,
        Aggregator::Max,
        Aggregator::AttentionLite,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Aggregator::Sum => "sum",
            Aggregator::Mean => "mean",
            Aggregator::Max => "max",
            Aggregator::AttentionLite => "attention-lite",
        }
    }

    pub fn parse(s: &str) -> Result<Aggregator> {
        match s {
            "sum" => Ok(Aggregator::Sum),
            "mean" => Ok(Aggregator::Mean),
            "max" => Ok(Aggregator::Max),
            "attention-lite" => Ok(Aggregator::AttentionLite),
            other => Err(Error::Validation(format!(
                "unknown aggregator `{other}`; expected sum, mean, max, or attention-lite"
            ))),
        }
    }

    fn agg_mode(self) -> Option<AggMode> {
        match self {
            Aggregator::Sum => Some(AggMode::Sum),
            Aggregator::Mean => Some(AggMode::Mean),
            Aggregator::Max => Some(AggMode::Max),
            Aggregator::AttentionLite => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Activation> {
        match s {
            "relu" => Ok(Activation::Relu),
            "none" => Ok(Activation::None),
            other => Err(Error::Validation(format!(
                "unknown activation `{other}`; expected relu or none"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Readout {
    None,
    MeanPool,
}

impl Readout {
    pub fn as_str(self) -> &'static str {
        match self {
            Readout::None => "none",
            Readout::MeanPool => "mean-pool",
        }
    }

    pub fn parse(s: &str) -> Result<Readout> {
        match s {
            "none" => Ok(Readout::None),
            "mean-pool" => Ok(Readout::MeanPool),
            other => Err(Error::Validation(format!(
                "unknown readout `{other}`; expected none or mean-pool"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    MessagePassing,
    Dense,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::MessagePassing => "message-passing",
            LayerKind::Dense => "dense",
        }
    }

    pub fn parse(s: &str) -> Result<LayerKind> {
        match s {
            "message-passing" => Ok(LayerKind::MessagePassing),
            "dense" => Ok(LayerKind::Dense),
            other => Err(Error::Validation(format!(
                "unknown layer kind `{other}`; expected message-passing or dense"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub activation: Activation,
    /// in_dim x out_dim.
    pub weight: Tensor,
    /// 1 x out_dim.
    pub bias: Tensor,
    /// 1 x (2 * in_dim) attention scores; present on message-passing layers.
    pub attn: Option<Tensor>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    fn validate(&self, index: usize) -> Result<()> {
        if self.bias.rows() != 1 || self.bias.cols() != self.out_dim() {
            return Err(Error::Validation(format!(
                "layers[{index}] bias shape {} does not match out_dim {}",
                self.bias.shape_string(),
                self.out_dim()
            )));
        }
        match (self.kind, &self.attn) {
            (LayerKind::MessagePassing, Some(attn)) => {
                if attn.rows() != 1 || attn.cols() != 2 * self.in_dim() {
                    return Err(Error::Validation(format!(
                        "layers[{index}] attn shape {} expected 1 x {}",
                        attn.shape_string(),
                        2 * self.in_dim()
                    )));
                }
            }
            (LayerKind::MessagePassing, None) => {
                return Err(Error::Validation(format!(
                    "layers[{index}] is message-passing but has no attn parameters"
                )))
            }
            (LayerKind::Dense, Some(_)) => {
                return Err(Error::Validation(format!(
                    "layers[{index}] is dense and must not carry attn parameters"
                )))
            }
            (LayerKind::Dense, None) => {}
        }
        let finite = self.weight.all_finite()
            && self.bias.all_finite()
            && self.attn.as_ref().map_or(true, Tensor::all_finite);
        if !finite {
            return Err(Error::Validation(format!(
                "layers[{index}] contains non-finite parameters"
            )));
        }
        Ok(())
    }
}

/// Tape handles for one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
    pub attn: Option<Var>,
}

/// How message-passing layers combine neighbors during a tape forward.
pub enum AggPlan {
    Fixed(Aggregator),
    /// Convex mixture of candidate outputs; `weights` are scalar tape vars
    /// aligned with `candidates`, shared by every layer.
    Mixture {
        candidates: Vec<Aggregator>,
        weights: Vec<Var>,
    },
}

/// Runs the layer stack on the tape. `layers` supplies structure, `vars` the
/// parameter handles, so the same path serves frozen inference (leaf vars)
/// and pretraining (param vars).
#[allow(clippy::too_many_arguments)]
pub fn forward_layers(
    tape: &mut Tape,
    layers: &[Layer],
    vars: &[LayerVars],
    feats: Var,
    edge_weights: Var,
    adj: &Rc<Adjacency>,
    plan: &AggPlan,
    readout: Readout,
) -> Result<Var> {
    debug_assert_eq!(layers.len(), vars.len());
    let mut h = feats;
    for (layer, lv) in layers.iter().zip(vars) {
        if layer.kind == LayerKind::MessagePassing {
            h = aggregate_with_plan(tape, h, edge_weights, lv, adj, plan)?;
        }
        h = tape.matmul(h, lv.weight)?;
        h = tape.add_row(h, lv.bias)?;
        if layer.activation == Activation::Relu {
            h = tape.relu(h);
        }
    }
    if readout == Readout::MeanPool {
        h = tape.mean_rows(h)?;
    }
    Ok(h)
}

fn aggregate_with_plan(
    tape: &mut Tape,
    h: Var,
    edge_weights: Var,
    lv: &LayerVars,
    adj: &Rc<Adjacency>,
    plan: &AggPlan,
) -> Result<Var> {
    let one = |tape: &mut Tape, candidate: Aggregator| -> Result<Var> {
        match candidate.agg_mode() {
            Some(mode) => tape.aggregate(h, edge_weights, Rc::clone(adj), mode),
            None => {
                let attn = lv.attn.ok_or_else(|| {
                    Error::Validation("attention-lite needs attn parameters".into())
                })?;
                tape.attention_aggregate(h, edge_weights, attn, Rc::clone(adj))
            }
        }
    };
    match plan {
        AggPlan::Fixed(candidate) => one(tape, *candidate),
        AggPlan::Mixture { candidates, weights } => {
            if candidates.len() != weights.len() || candidates.is_empty() {
                return Err(Error::Validation(
                    "mixture candidates and weights must align and be non-empty".into(),
                ));
            }
            let mut total: Option<Var> = None;
            for (&candidate, &w) in candidates.iter().zip(weights) {
                let out = one(tape, candidate)?;
                let scaled = tape.scale_by(out, w)?;
                total = Some(match total {
                    None => scaled,
                    Some(t) => tape.add(t, scaled)?,
                });
            }
            Ok(total.expect("non-empty candidates"))
        }
    }
}

// ------------------------------------------------------------ FrozenModel --

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenModel {
    layers: Vec<Layer>,
    aggregator: Aggregator,
    readout: Readout,
    self_loops: bool,
    in_dim: usize,
    out_dim: usize,
    param_hash: String,
    frozen: bool,
}

impl FrozenModel {
    pub fn new(
        layers: Vec<Layer>,
        aggregator: Aggregator,
        readout: Readout,
        self_loops: bool,
    ) -> Result<FrozenModel> {
        if layers.is_empty() {
            return Err(Error::Validation("model needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            layer.validate(i)?;
        }
        for i in 1..layers.len() {
            if layers[i].in_dim() != layers[i - 1].out_dim() {
                return Err(Error::Validation(format!(
                    "layers[{i}] expects in_dim {} but layers[{}] produces {}",
                    layers[i].in_dim(),
                    i - 1,
                    layers[i - 1].out_dim()
                )));
            }
        }
        let in_dim = layers[0].in_dim();
        let out_dim = layers.last().expect("non-empty").out_dim();
        let mut model = FrozenModel {
            layers,
            aggregator,
            readout,
            self_loops,
            in_dim,
            out_dim,
            param_hash: String::new(),
            frozen: true,
        };
        model.param_hash = model.compute_hash();
        Ok(model)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn aggregator(&self) -> Aggregator {
        self.aggregator
    }

    pub fn readout(&self) -> Readout {
        self.readout
    }

    pub fn self_loops(&self) -> bool {
        self.self_loops
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn param_hash(&self) -> &str {
        &self.param_hash
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn has_message_passing(&self) -> bool {
        self.layers.iter().any(|l| l.kind == LayerKind::MessagePassing)
    }

    /// Errors unless the model is frozen and its parameters still hash to
    /// `param_hash`; reprogramming ops call this before and after work.
    pub fn check_integrity(&self) -> Result<()> {
        if !self.frozen {
            return Err(Error::Contract("model is not frozen".into()));
        }
        let fresh = self.compute_hash();
        if fresh != self.param_hash {
            return Err(Error::Integrity(format!(
                "param_hash mismatch: expected {}, parameters hash to {fresh}",
                self.param_hash
            )));
        }
        Ok(())
    }

    fn compute_hash(&self) -> String {
        let body = serde_json::to_string(&self.canonical_body()).expect("json");
        let mut hasher = Sha256::new();
        hasher.update(body.as_bytes());
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for byte in digest {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }

    fn canonical_body(&self) -> Value {
        let layers: Vec<Value> = self
            .layers
            .iter()
            .map(|l| {
                json!({
                    "kind": l.kind.as_str(),
                    "activation": l.activation.as_str(),
                    "weight": l.weight.to_json_rows(),
                    "bias": l.bias.to_json_rows(),
                    "attn": l.attn.as_ref().map(Tensor::to_json_rows).unwrap_or(Value::Null),
                })
            })
            .collect();
        json!({
            "format_version": crate::graph::FORMAT_VERSION,
            "aggregator": self.aggregator.as_str(),
            "readout": self.readout.as_str(),
            "self_loops": self.self_loops,
            "in_dim": self.in_dim,
            "out_dim": self.out_dim,
            "frozen": self.frozen,
            "layers": layers,
        })
    }

    pub fn to_json(&self) -> Value {
        let mut body = self.canonical_body();
        body.as_object_mut()
            .expect("object")
            .insert("param_hash".into(), json!(self.param_hash));
        body
    }

    pub fn from_json(value: &Value) -> Result<FrozenModel> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Validation("model must be a JSON object".into()))?;
        let claimed = obj
            .get("param_hash")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Validation("missing param_hash".into()))?
            .to_string();
        let aggregator = Aggregator::parse(
            obj.get("aggregator")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::Validation("missing aggregator".into()))?,
        )?;
        let readout = Readout::parse(
            obj.get("readout")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::Validation("missing readout".into()))?,
        )?;
        let self_loops = obj
            .get("self_loops")
            .and_then(Value::as_bool)
            .ok_or_else(|| Error::Validation("missing self_loops".into()))?;
        let frozen = obj
            .get("frozen")
            .and_then(Value::as_bool)
            .ok_or_else(|| Error::Validation("missing frozen".into()))?;
        let raw_layers = obj
            .get("layers")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Validation("missing layers".into()))?;
        let mut layers = Vec::with_capacity(raw_layers.len());
        for (i, raw) in raw_layers.iter().enumerate() {
            let kind = LayerKind::parse(
                raw.get("kind")
                    .and_then(Value::as_str)
                    .ok_or_else(|| Error::Validation(format!("layers[{i}] missing kind")))?,
            )?;
            let activation = Activation::parse(
                raw.get("activation")
                    .and_then(Value::as_str)
                    .ok_or_else(|| Error::Validation(format!("layers[{i}] missing activation")))?,
            )?;
            let weight = Tensor::from_json_rows(
                raw.get("weight")
                    .ok_or_else(|| Error::Validation(format!("layers[{i}] missing weight")))?,
                "weight",
            )?;
            let bias = Tensor::from_json_rows(
                raw.get("bias")
                    .ok_or_else(|| Error::Validation(format!("layers[{i}] missing bias")))?,
                "bias",
            )?;
            let attn = match raw.get("attn") {
                None | Some(Value::Null) => None,
                Some(v) => Some(Tensor::from_json_rows(v, "attn")?),
            };
            layers.push(Layer {
                kind,
                activation,
                weight,
                bias,
                attn,
            });
        }
        let mut model = FrozenModel::new(layers, aggregator, readout, self_loops)?;
        model.frozen = frozen;
        model.param_hash = model.compute_hash();
        if model.param_hash != claimed {
            return Err(Error::Integrity(format!(
                "param_hash mismatch: file claims {claimed}, canonical body hashes to {}",
                model.param_hash
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_json()).expect("json"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<FrozenModel> {
        let source = std::fs::read_to_string(path)?;
        let value: Value =
            serde_json::from_str(&source).map_err(|e| Error::from_json(&e, &source))?;
        FrozenModel::from_json(&value)
    }

    pub fn check_feat_dim(&self, feat_dim: usize) -> Result<()> {
        if feat_dim != self.in_dim {
            return Err(Error::Validation(format!(
                "features have dimension {feat_dim} but the model expects in_dim {}",
                self.in_dim
            )));
        }
        Ok(())
    }

    pub fn build_adjacency(&self, g: &Graph) -> Adjacency {
        Adjacency::build(g, self.self_loops)
    }

    /// Records the frozen parameters as constant tape leaves.
    pub fn layer_leaf_vars(&self, tape: &mut Tape) -> Vec<LayerVars> {
        self.layers
            .iter()
            .map(|l| LayerVars {
                weight: tape.leaf(l.weight.clone()),
                bias: tape.leaf(l.bias.clone()),
                attn: l.attn.as_ref().map(|a| tape.leaf(a.clone())),
            })
            .collect()
    }

    /// Forward pass on a caller-owned tape; `feats` may be any tape value
    /// (padded features, perturbed features) as long as its width matches.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        feats: Var,
        edge_weights: Var,
        adj: &Rc<Adjacency>,
        plan: &AggPlan,
        readout: Readout,
    ) -> Result<Var> {
        self.check_feat_dim(tape.value(feats).cols())?;
        let vars = self.layer_leaf_vars(tape);
        forward_layers(tape, &self.layers, &vars, feats, edge_weights, adj, plan, readout)
    }

    /// Plain inference: num_nodes x out_dim, or 1 x out_dim after readout.
    pub fn forward(&self, g: &Graph, override_aggregator: Option<Aggregator>) -> Result<Tensor> {
        self.check_feat_dim(g.feat_dim())?;
        let adj = Rc::new(self.build_adjacency(g));
        let mut tape = Tape::new();
        let feats = tape.leaf(g.features.clone());
        let weights = tape.leaf(Tensor::row_vector(g.edge_weights.clone()));
        let plan = AggPlan::Fixed(override_aggregator.unwrap_or(self.aggregator));
        let out = self.forward_on_tape(&mut tape, feats, weights, &adj, &plan, self.readout)?;
        Ok(tape.value(out).clone())
    }
}

// -------------------------------------------------------------- pretrain --

#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub hidden_dims: Vec<usize>,
    pub aggregator: Aggregator,
    pub self_loops: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            hidden_dims: vec![16, 16],
            aggregator: Aggregator::Mean,
            self_loops: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOpts {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts {
            lr: 0.5,
            epochs: 200,
            seed: 0,
        }
    }
}

impl TrainOpts {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Validation(format!(
                "learning rate {} must be a non-negative real",
                self.lr
            )));
        }
        Ok(())
    }
}

fn xavier(rng: &mut crate::rng::SplitMix64, rows: usize, cols: usize) -> Tensor {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| std * rng.next_normal()).collect();
    Tensor::from_vec(rows, cols, data).expect("sized data")
}

/// Fresh layer stack for the architecture: message-passing layers for every
/// hidden width, then a dense head.
pub fn init_layers(
    in_dim: usize,
    out_dim: usize,
    arch: &ArchConfig,
    seed: u64,
) -> Result<Vec<Layer>> {
    if in_dim == 0 || out_dim == 0 {
        return Err(Error::Validation(
            "model dimensions must be at least 1".into(),
        ));
    }
    let mut rng = substream(seed, "init/model");
    let mut layers = Vec::new();
    let mut current = in_dim;
    for &hidden in &arch.hidden_dims {
        if hidden == 0 {
            return Err(Error::Validation("hidden width must be at least 1".into()));
        }
        layers.push(Layer {
            kind: LayerKind::MessagePassing,
            activation: Activation::Relu,
            weight: xavier(&mut rng, current, hidden),
            bias: Tensor::zeros(1, hidden),
            attn: Some(xavier(&mut rng, 1, 2 * current)),
        });
        current = hidden;
    }
    layers.push(Layer {
        kind: LayerKind::Dense,
        activation: Activation::None,
        weight: xavier(&mut rng, current, out_dim),
        bias: Tensor::zeros(1, out_dim),
        attn: None,
    });
    Ok(layers)
}

fn dataset_out_dim(ds: &GraphDataset) -> usize {
    match ds.task_kind {
        TaskKind::NodeClassification | TaskKind::GraphClassification => {
            ds.num_classes.unwrap_or(2)
        }
        TaskKind::NodeRegression | TaskKind::GraphRegression => 1,
    }
}

fn dataset_readout(ds: &GraphDataset) -> Readout {
    if ds.task_kind.is_graph_level() {
        Readout::MeanPool
    } else {
        Readout::None
    }
}

/// One full-batch training-loss evaluation with parameter vars; returns the
/// loss var so callers can backprop.
fn training_loss(
    tape: &mut Tape,
    layers: &[Layer],
    vars: &[LayerVars],
    ds: &GraphDataset,
    aggregator: Aggregator,
    self_loops: bool,
) -> Result<Var> {
    let plan = AggPlan::Fixed(aggregator);
    if ds.task_kind.is_node_level() {
        let g = ds.sole_graph()?;
        let adj = Rc::new(Adjacency::build(g, self_loops));
        let feats = tape.leaf(g.features.clone());
        let weights = tape.leaf(Tensor::row_vector(g.edge_weights.clone()));
        let out = forward_layers(
            tape,
            layers,
            vars,
            feats,
            weights,
            &adj,
            &plan,
            Readout::None,
        )?;
        let train = g.mask_indices(MaskKind::Train)?;
        match (ds.task_kind, g.node_labels.as_ref()) {
            (TaskKind::NodeClassification, Some(NodeLabels::Class(labels))) => {
                let picks: Vec<(usize, usize)> =
                    train.iter().map(|&i| (i, labels[i] as usize)).collect();
                metrics::masked_cross_entropy(tape, out, &picks)
            }
            (TaskKind::NodeRegression, Some(NodeLabels::Value(values))) => {
                let targets: Vec<(usize, f64)> =
                    train.iter().map(|&i| (i, values[i])).collect();
                metrics::masked_mse(tape, out, &targets)
            }
            _ => Err(Error::Validation("labels do not match task kind".into())),
        }
    } else {
        let train = ds.split_indices(MaskKind::Train)?;
        let mut rows = Vec::with_capacity(train.len());
        for &gi in &train {
            let g = &ds.graphs[gi];
            let adj = Rc::new(Adjacency::build(g, self_loops));
            let feats = tape.leaf(g.features.clone());
            let weights = tape.leaf(Tensor::row_vector(g.edge_weights.clone()));
            rows.push(forward_layers(
                tape,
                layers,
                vars,
                feats,
                weights,
                &adj,
                &plan,
                Readout::MeanPool,
            )?);
        }
        let stacked = tape.concat_rows(&rows)?;
        match ds.task_kind {
            TaskKind::GraphClassification => {
                let picks: Vec<(usize, usize)> = train
                    .iter()
                    .enumerate()
                    .map(|(row, &gi)| (row, ds.graphs[gi].graph_label.unwrap_or(0.0) as usize))
                    .collect();
                metrics::masked_cross_entropy(tape, stacked, &picks)
            }
            TaskKind::GraphRegression => {
                let targets: Vec<(usize, f64)> = train
                    .iter()
                    .enumerate()
                    .map(|(row, &gi)| (row, ds.graphs[gi].graph_label.unwrap_or(0.0)))
                    .collect();
                metrics::masked_mse(tape, stacked, &targets)
            }
            _ => unreachable!("node-level handled above"),
        }
    }
}

/// Full-batch gradient descent over the layer stack; returns the per-epoch
/// training-loss trajectory.
pub fn train_layers(
    layers: &mut [Layer],
    ds: &GraphDataset,
    aggregator: Aggregator,
    self_loops: bool,
    opts: &TrainOpts,
) -> Result<Vec<f64>> {
    opts.validate()?;
    let mut trajectory = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let mut tape = Tape::new();
        let vars: Vec<LayerVars> = layers
            .iter()
            .map(|l| LayerVars {
                weight: tape.param(l.weight.clone()),
                bias: tape.param(l.bias.clone()),
                attn: l.attn.as_ref().map(|a| tape.param(a.clone())),
            })
            .collect();
        let loss = training_loss(&mut tape, layers, &vars, ds, aggregator, self_loops)?;
        let loss_value = tape.value(loss).at(0, 0);
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite training loss {loss_value} at epoch {epoch}"
            )));
        }
        trajectory.push(loss_value);
        tape.backward(loss)?;
        for (layer, lv) in layers.iter_mut().zip(&vars) {
            apply_step(&mut layer.weight, &tape.grad_or_zeros(lv.weight), opts.lr);
            apply_step(&mut layer.bias, &tape.grad_or_zeros(lv.bias), opts.lr);
            if let (Some(attn), Some(av)) = (layer.attn.as_mut(), lv.attn) {
                apply_step(attn, &tape.grad_or_zeros(av), opts.lr);
            }
        }
    }
    Ok(trajectory)
}

fn apply_step(param: &mut Tensor, grad: &Tensor, lr: f64) {
    for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p -= lr * g;
    }
}

/// Trains a fresh model on the dataset and freezes it.
pub fn pretrain(ds: &GraphDataset, arch: &ArchConfig, opts: &TrainOpts) -> Result<FrozenModel> {
    pretrain_traced(ds, arch, opts).map(|(model, _)| model)
}

/// [`pretrain`] plus the training-loss trajectory.
pub fn pretrain_traced(
    ds: &GraphDataset,
    arch: &ArchConfig,
    opts: &TrainOpts,
) -> Result<(FrozenModel, Vec<f64>)> {
    ds.validate()?;
    let mut layers = init_layers(ds.feat_dim(), dataset_out_dim(ds), arch, opts.seed)?;
    let trajectory = train_layers(&mut layers, ds, arch.aggregator, arch.self_loops, opts)?;
    let model = FrozenModel::new(
        layers,
        arch.aggregator,
        dataset_readout(ds),
        arch.self_loops,
    )?;
    Ok((model, trajectory))
}
