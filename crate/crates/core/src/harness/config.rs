//! Experiment configuration: JSON schema, dataset sources, and the
//! validation pass that rejects inconsistent setups before any compute.

use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::dataset::{split_dataset, GraphDataset, SplitFractions, TaskKind};
use crate::error::{Error, Result};
use crate::metrics::{LossKind, LossSpec};
use crate::model::{Aggregator, ArchConfig, FrozenModel};
use crate::padding::{required_pad_size, PadPosition};
use crate::rng::substream;
use crate::synth::{generate_synthetic, induce_classes, SynthTaskSpec};

/// Accepted values for the `method` config key.
pub const METHOD_NAMES: [&str; 7] = [
    "metafp",
    "edgslim",
    "metagp",
    "reagg",
    "metafp+reagg",
    "vanilla",
    "retrain",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    MetaFp,
    EdgSlim,
    MetaGp,
    ReAgg,
    MetaFpReAgg,
    Vanilla,
    Retrain,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::MetaFp => "metafp",
            Method::EdgSlim => "edgslim",
            Method::MetaGp => "metagp",
            Method::ReAgg => "reagg",
            Method::MetaFpReAgg => "metafp+reagg",
            Method::Vanilla => "vanilla",
            Method::Retrain => "retrain",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "metafp" => Ok(Method::MetaFp),
            "edgslim" => Ok(Method::EdgSlim),
            "metagp" => Ok(Method::MetaGp),
            "reagg" => Ok(Method::ReAgg),
            "metafp+reagg" => Ok(Method::MetaFpReAgg),
            "vanilla" => Ok(Method::Vanilla),
            "retrain" => Ok(Method::Retrain),
            other => Err(Error::Config(format!(
                "unknown method {other:?}; expected one of {METHOD_NAMES:?}"
            ))),
        }
    }

    /// Methods that bridge a feature-dimension gap with padding.
    pub fn uses_padding(self) -> bool {
        matches!(self, Method::MetaFp | Method::MetaFpReAgg | Method::Vanilla)
    }

    pub fn uses_reagg(self) -> bool {
        matches!(self, Method::ReAgg | Method::MetaFpReAgg)
    }
}

/// Where a dataset comes from: a JSON file on disk or a generated task.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Path(PathBuf),
    Synth {
        spec: SynthTaskSpec,
        /// Optional class subset, relabeled to 0..len in the given order.
        classes: Option<Vec<usize>>,
        /// Overrides the default 0.6/0.2/0.2 split when set.
        split: Option<SplitFractions>,
    },
}

impl DatasetSource {
    /// Builds the dataset. With a run seed, synthetic sources derive their
    /// generation seed from `substream(run_seed, label)`; file sources load
    /// the same bytes for every seed.
    pub fn realize(&self, run_seed: Option<u64>, label: &str) -> Result<GraphDataset> {
        match self {
            DatasetSource::Path(p) => GraphDataset::load(p),
            DatasetSource::Synth {
                spec,
                classes,
                split,
            } => {
                let mut spec = *spec;
                if let Some(seed) = run_seed {
                    spec.seed = substream(seed, label)
                        .next_u64()
                        .wrapping_add(spec.seed);
                }
                let ds = generate_synthetic(&spec)?;
                let ds = match classes {
                    Some(subset) => induce_classes(&ds, subset, spec.seed)?,
                    None => ds,
                };
                match split {
                    Some(fractions) => split_dataset(&ds, *fractions, spec.seed),
                    None => Ok(ds),
                }
            }
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            DatasetSource::Path(p) => json!({ "path": p.to_string_lossy() }),
            DatasetSource::Synth {
                spec,
                classes,
                split,
            } => {
                let mut obj = Map::new();
                obj.insert("seed".into(), json!(spec.seed));
                obj.insert("num_nodes".into(), json!(spec.num_nodes));
                obj.insert(
                    "num_graphs".into(),
                    spec.num_graphs.map_or(Value::Null, |n| json!(n)),
                );
                obj.insert("feat_dim".into(), json!(spec.feat_dim));
                obj.insert("num_classes".into(), json!(spec.num_classes));
                obj.insert("intra_p".into(), json!(spec.intra_p));
                obj.insert("inter_p".into(), json!(spec.inter_p));
                obj.insert("noise_std".into(), json!(spec.noise_std));
                obj.insert(
                    "classes".into(),
                    classes.as_ref().map_or(Value::Null, |c| json!(c)),
                );
                obj.insert(
                    "split".into(),
                    split.map_or(Value::Null, |f| {
                        json!({ "train": f.train, "val": f.val, "test": f.test })
                    }),
                );
                json!({ "synth": Value::Object(obj) })
            }
        }
    }

    pub fn from_json(value: &Value, ctx: &str) -> Result<DatasetSource> {
        let obj = expect_object(value, ctx)?;
        if let Some(p) = obj.get("path") {
            check_keys(obj, &["path"], ctx)?;
            let path = p
                .as_str()
                .ok_or_else(|| Error::Config(format!("{ctx}.path must be a string")))?;
            return Ok(DatasetSource::Path(PathBuf::from(path)));
        }
        let synth = obj
            .get("synth")
            .ok_or_else(|| Error::Config(format!("{ctx} needs a \"path\" or \"synth\" key")))?;
        check_keys(obj, &["synth"], ctx)?;
        let ctx = &format!("{ctx}.synth");
        let obj = expect_object(synth, ctx)?;
        check_keys(
            obj,
            &[
                "seed",
                "num_nodes",
                "num_graphs",
                "feat_dim",
                "num_classes",
                "intra_p",
                "inter_p",
                "noise_std",
                "classes",
                "split",
            ],
            ctx,
        )?;
        let spec = SynthTaskSpec {
            seed: opt_u64(obj, "seed", ctx)?.unwrap_or(0),
            num_nodes: req_usize(obj, "num_nodes", ctx)?,
            num_graphs: opt_usize(obj, "num_graphs", ctx)?,
            feat_dim: req_usize(obj, "feat_dim", ctx)?,
            num_classes: req_usize(obj, "num_classes", ctx)?,
            intra_p: opt_f64(obj, "intra_p", ctx)?.unwrap_or(0.3),
            inter_p: opt_f64(obj, "inter_p", ctx)?.unwrap_or(0.05),
            noise_std: opt_f64(obj, "noise_std", ctx)?.unwrap_or(0.5),
        };
        spec.validate()?;
        let classes = match obj.get("classes") {
            None | Some(Value::Null) => None,
            Some(v) => Some(usize_list(v, &format!("{ctx}.classes"))?),
        };
        let split = match obj.get("split") {
            None | Some(Value::Null) => None,
            Some(v) => {
                let ctx = &format!("{ctx}.split");
                let obj = expect_object(v, ctx)?;
                check_keys(obj, &["train", "val", "test"], ctx)?;
                Some(SplitFractions::new(
                    opt_f64(obj, "train", ctx)?.unwrap_or(0.0),
                    opt_f64(obj, "val", ctx)?.unwrap_or(0.0),
                    opt_f64(obj, "test", ctx)?.unwrap_or(0.0),
                )?)
            }
        };
        Ok(DatasetSource::Synth {
            spec,
            classes,
            split,
        })
    }
}

/// Learning-rate and epoch budget for one training phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptConfig {
    pub lr: f64,
    pub epochs: usize,
}

impl OptConfig {
    fn validate(&self, ctx: &str) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!(
                "{ctx}.lr = {} must be a non-negative real",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSection {
    pub dataset: DatasetSource,
    pub arch: ArchConfig,
    pub opt: OptConfig,
    /// When set, this saved model is reused instead of pretraining per seed.
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamSection {
    pub dataset: DatasetSource,
    /// Cross-checked against the dataset when given.
    pub task_kind: Option<TaskKind>,
    pub loss: LossSpec,
}

/// Per-method knobs; irrelevant ones keep their defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodParams {
    pub pad_size: Option<usize>,
    pub position: PadPosition,
    pub init_std: f64,
    pub lr: f64,
    pub epochs: usize,
    pub recompute_every: usize,
    pub max_deletions: Option<usize>,
    pub num_meta_nodes: usize,
    pub tau: f64,
    pub tau_schedule: Option<(f64, f64)>,
    pub candidates: Vec<Aggregator>,
}

impl Default for MethodParams {
    fn default() -> Self {
        MethodParams {
            pad_size: None,
            position: PadPosition::End,
            init_std: 0.01,
            lr: 0.5,
            epochs: 30,
            recompute_every: 1,
            max_deletions: None,
            num_meta_nodes: crate::metagraph::DEFAULT_META_NODES,
            tau: 1.0,
            tau_schedule: None,
            candidates: Aggregator::ALL.to_vec(),
        }
    }
}

impl MethodParams {
    fn validate(&self, method: Method) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!(
                "params.lr = {} must be a non-negative real",
                self.lr
            )));
        }
        if !self.init_std.is_finite() || self.init_std < 0.0 {
            return Err(Error::Config(format!(
                "params.init_std = {} must be a non-negative real",
                self.init_std
            )));
        }
        if !method.uses_padding() && self.pad_size.unwrap_or(0) > 0 {
            return Err(Error::Config(format!(
                "method {} does not pad features; remove pad_size",
                method.as_str()
            )));
        }
        if method == Method::EdgSlim && self.recompute_every == 0 {
            return Err(Error::Config(
                "params.recompute_every must be at least 1".into(),
            ));
        }
        if method.uses_reagg() {
            if !(self.tau.is_finite() && self.tau > 0.0) {
                return Err(Error::Config(format!(
                    "params.tau = {} must be a positive real",
                    self.tau
                )));
            }
            if let Some((start, end)) = self.tau_schedule {
                if !(start.is_finite() && start > 0.0 && end.is_finite() && end > 0.0) {
                    return Err(Error::Config(format!(
                        "params.tau_schedule ({start}, {end}) must be positive reals"
                    )));
                }
            }
            if self.candidates.len() < 2 {
                return Err(Error::Config(format!(
                    "params.candidates needs at least 2 aggregators, got {}",
                    self.candidates.len()
                )));
            }
            for (i, a) in self.candidates.iter().enumerate() {
                if self.candidates[..i].contains(a) {
                    return Err(Error::Config(format!(
                        "params.candidates repeats {}",
                        a.as_str()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One reprogramming experiment: a frozen pretrained model, a downstream
/// task, a method, and the seeds to repeat over.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub pretrain: PretrainSection,
    pub downstream: DownstreamSection,
    pub method: Method,
    pub params: MethodParams,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(value: &Value) -> Result<ExperimentConfig> {
        let obj = expect_object(value, "config")?;
        check_keys(
            obj,
            &[
                "pretrain",
                "downstream",
                "method",
                "params",
                "seeds",
                "output_dir",
            ],
            "config",
        )?;

        let pre = expect_object(
            obj.get("pretrain")
                .ok_or_else(|| Error::Config("missing pretrain section".into()))?,
            "pretrain",
        )?;
        check_keys(pre, &["dataset", "arch", "opt", "model"], "pretrain")?;
        let pretrain = PretrainSection {
            dataset: DatasetSource::from_json(
                pre.get("dataset")
                    .ok_or_else(|| Error::Config("missing pretrain.dataset".into()))?,
                "pretrain.dataset",
            )?,
            arch: parse_arch(pre.get("arch"))?,
            opt: parse_opt(pre.get("opt"), "pretrain.opt", OptConfig { lr: 0.5, epochs: 200 })?,
            model: match pre.get("model") {
                None | Some(Value::Null) => None,
                Some(v) => Some(PathBuf::from(v.as_str().ok_or_else(|| {
                    Error::Config("pretrain.model must be a path string".into())
                })?)),
            },
        };

        let down = expect_object(
            obj.get("downstream")
                .ok_or_else(|| Error::Config("missing downstream section".into()))?,
            "downstream",
        )?;
        check_keys(down, &["dataset", "task_kind", "loss"], "downstream")?;
        let downstream = DownstreamSection {
            dataset: DatasetSource::from_json(
                down.get("dataset")
                    .ok_or_else(|| Error::Config("missing downstream.dataset".into()))?,
                "downstream.dataset",
            )?,
            task_kind: match down.get("task_kind") {
                None | Some(Value::Null) => None,
                Some(v) => Some(TaskKind::parse(v.as_str().ok_or_else(|| {
                    Error::Config("downstream.task_kind must be a string".into())
                })?)?),
            },
            loss: parse_loss(down.get("loss"))?,
        };

        let method = Method::parse(
            obj.get("method")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::Config("missing method string".into()))?,
        )?;
        let params = parse_params(obj.get("params"))?;
        let seeds = match obj.get("seeds") {
            None => vec![0],
            Some(v) => {
                let list = v
                    .as_array()
                    .ok_or_else(|| Error::Config("seeds must be an array".into()))?;
                list.iter()
                    .map(|s| {
                        s.as_u64()
                            .ok_or_else(|| Error::Config("seeds must be unsigned integers".into()))
                    })
                    .collect::<Result<Vec<u64>>>()?
            }
        };
        let output_dir = match obj.get("output_dir") {
            None | Some(Value::Null) => None,
            Some(v) => Some(PathBuf::from(v.as_str().ok_or_else(|| {
                Error::Config("output_dir must be a path string".into())
            })?)),
        };

        Ok(ExperimentConfig {
            pretrain,
            downstream,
            method,
            params,
            seeds,
            output_dir,
        })
    }

    pub fn from_json_str(source: &str) -> Result<ExperimentConfig> {
        let value: Value =
            serde_json::from_str(source).map_err(|e| Error::from_json(&e, source))?;
        ExperimentConfig::from_json(&value)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let source = std::fs::read_to_string(path)?;
        ExperimentConfig::from_json_str(&source)
    }

    pub fn to_json(&self) -> Value {
        json!({
            "pretrain": {
                "dataset": self.pretrain.dataset.to_json(),
                "arch": {
                    "hidden_dims": self.pretrain.arch.hidden_dims,
                    "aggregator": self.pretrain.arch.aggregator.as_str(),
                    "self_loops": self.pretrain.arch.self_loops,
                },
                "opt": { "lr": self.pretrain.opt.lr, "epochs": self.pretrain.opt.epochs },
                "model": self.pretrain.model.as_ref().map_or(Value::Null, |p| json!(p.to_string_lossy())),
            },
            "downstream": {
                "dataset": self.downstream.dataset.to_json(),
                "task_kind": self.downstream.task_kind.map_or(Value::Null, |k| json!(k.as_str())),
                "loss": {
                    "kind": self.downstream.loss.kind.as_str(),
                    "output_slice": self.downstream.loss.output_slice.map_or(Value::Null, |(s, l)| json!([s, l])),
                },
            },
            "method": self.method.as_str(),
            "params": {
                "pad_size": self.params.pad_size.map_or(Value::Null, |p| json!(p)),
                "position": self.params.position.as_str(),
                "init_std": self.params.init_std,
                "lr": self.params.lr,
                "epochs": self.params.epochs,
                "recompute_every": self.params.recompute_every,
                "max_deletions": self.params.max_deletions.map_or(Value::Null, |m| json!(m)),
                "num_meta_nodes": self.params.num_meta_nodes,
                "tau": self.params.tau,
                "tau_schedule": self.params.tau_schedule.map_or(Value::Null, |(a, b)| json!([a, b])),
                "candidates": self.params.candidates.iter().map(|a| a.as_str()).collect::<Vec<_>>(),
            },
            "seeds": self.seeds,
            "output_dir": self.output_dir.as_ref().map_or(Value::Null, |p| json!(p.to_string_lossy())),
        })
    }

    /// Runs every validation that does not need per-seed data: dataset and
    /// method compatibility, dimension bridging, and loss slicing.
    pub fn resolve(&self) -> Result<ResolvedExperiment> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds list is empty".into()));
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return Err(Error::Config(format!("seeds repeat {s}")));
            }
        }
        self.pretrain.opt.validate("pretrain.opt")?;
        self.params.validate(self.method)?;

        let pretrain_base = self.pretrain.dataset.realize(None, "")?;
        let downstream_base = self.downstream.dataset.realize(None, "")?;
        if let Some(kind) = self.downstream.task_kind {
            if kind != downstream_base.task_kind {
                return Err(Error::Config(format!(
                    "downstream.task_kind {} does not match the dataset's {}",
                    kind.as_str(),
                    downstream_base.task_kind.as_str()
                )));
            }
        }
        let down_kind = downstream_base.task_kind;
        match self.method {
            Method::EdgSlim if !down_kind.is_node_level() => {
                return Err(Error::Config(
                    "edgslim requires a transductive node-level downstream task".into(),
                ));
            }
            Method::MetaGp if !down_kind.is_graph_level() => {
                return Err(Error::Config(
                    "metagp requires an inductive graph-level downstream task".into(),
                ));
            }
            _ => {}
        }

        let model = match &self.pretrain.model {
            Some(path) => Some(FrozenModel::load(path)?),
            None => None,
        };
        let pre_dim = match &model {
            Some(m) => {
                if m.in_dim() != pretrain_base.feat_dim() {
                    return Err(Error::Config(format!(
                        "saved model expects in_dim {} but the pretrain dataset has dimension {}",
                        m.in_dim(),
                        pretrain_base.feat_dim()
                    )));
                }
                m.in_dim()
            }
            None => pretrain_base.feat_dim(),
        };
        let down_dim = downstream_base.feat_dim();

        let pad_size = if pre_dim == down_dim {
            if let Some(p) = self.params.pad_size {
                if p > 0 {
                    return Err(Error::Config(format!(
                        "pretrained and downstream dimensions are both {pre_dim}; \
                         pad_size {p} must be zero or omitted"
                    )));
                }
            }
            0
        } else if self.method == Method::Retrain {
            0
        } else if self.method.uses_padding() {
            let need = required_pad_size(pre_dim, down_dim)?;
            if let Some(p) = self.params.pad_size {
                if p != need {
                    return Err(Error::Config(format!(
                        "pad_size {p} does not bridge feature dimension {down_dim} \
                         to model in_dim {pre_dim}; expected {need}"
                    )));
                }
            }
            need
        } else {
            return Err(Error::Config(format!(
                "pretrained dimension {pre_dim} differs from downstream dimension {down_dim}; \
                 method {} cannot bridge the gap, use metafp, metafp+reagg, vanilla, or retrain",
                self.method.as_str()
            )));
        };

        let pre_out_dim = match &model {
            Some(m) => m.out_dim(),
            None => {
                if pretrain_base.task_kind.is_classification() {
                    pretrain_base.num_classes.ok_or_else(|| {
                        Error::Config("pretrain dataset is missing num_classes".into())
                    })?
                } else {
                    1
                }
            }
        };
        if self.method != Method::Retrain {
            let (_, len) = self.downstream.loss.resolved_slice(pre_out_dim)?;
            let classification = down_kind.is_classification();
            if classification != (self.downstream.loss.kind == LossKind::CrossEntropy) {
                return Err(Error::Config(format!(
                    "loss {} does not fit a {} task",
                    self.downstream.loss.kind.as_str(),
                    down_kind.as_str()
                )));
            }
            if classification {
                let classes = downstream_base.num_classes.unwrap_or(0);
                if classes > len {
                    return Err(Error::Config(format!(
                        "output slice width {len} cannot score {classes} downstream classes"
                    )));
                }
            }
        }

        Ok(ResolvedExperiment {
            cfg: self.clone(),
            pretrain_base,
            downstream_base,
            model,
            pad_size,
            pre_out_dim,
            down_kind,
        })
    }
}

/// A validated config plus everything derivable without a run seed.
#[derive(Debug, Clone)]
pub struct ResolvedExperiment {
    pub cfg: ExperimentConfig,
    pretrain_base: GraphDataset,
    downstream_base: GraphDataset,
    pub model: Option<FrozenModel>,
    pub pad_size: usize,
    pub pre_out_dim: usize,
    pub down_kind: TaskKind,
}

impl ResolvedExperiment {
    pub fn pretrain_dataset(&self, seed: u64) -> Result<GraphDataset> {
        match &self.cfg.pretrain.dataset {
            DatasetSource::Path(_) => Ok(self.pretrain_base.clone()),
            src => src.realize(Some(seed), "data/pretrain"),
        }
    }

    pub fn downstream_dataset(&self, seed: u64) -> Result<GraphDataset> {
        match &self.cfg.downstream.dataset {
            DatasetSource::Path(_) => Ok(self.downstream_base.clone()),
            src => src.realize(Some(seed), "data/downstream"),
        }
    }
}

fn parse_arch(value: Option<&Value>) -> Result<ArchConfig> {
    let mut arch = ArchConfig::default();
    let value = match value {
        None | Some(Value::Null) => return Ok(arch),
        Some(v) => v,
    };
    let obj = expect_object(value, "pretrain.arch")?;
    check_keys(obj, &["hidden_dims", "aggregator", "self_loops"], "pretrain.arch")?;
    if let Some(v) = obj.get("hidden_dims") {
        arch.hidden_dims = usize_list(v, "pretrain.arch.hidden_dims")?;
    }
    if let Some(v) = obj.get("aggregator") {
        arch.aggregator = Aggregator::parse(v.as_str().ok_or_else(|| {
            Error::Config("pretrain.arch.aggregator must be a string".into())
        })?)?;
    }
    if let Some(v) = obj.get("self_loops") {
        arch.self_loops = v
            .as_bool()
            .ok_or_else(|| Error::Config("pretrain.arch.self_loops must be a bool".into()))?;
    }
    Ok(arch)
}

fn parse_opt(value: Option<&Value>, ctx: &str, default: OptConfig) -> Result<OptConfig> {
    let mut opt = default;
    let value = match value {
        None | Some(Value::Null) => return Ok(opt),
        Some(v) => v,
    };
    let obj = expect_object(value, ctx)?;
    check_keys(obj, &["lr", "epochs"], ctx)?;
    if let Some(lr) = opt_f64(obj, "lr", ctx)? {
        opt.lr = lr;
    }
    if let Some(epochs) = opt_usize(obj, "epochs", ctx)? {
        opt.epochs = epochs;
    }
    Ok(opt)
}

fn parse_loss(value: Option<&Value>) -> Result<LossSpec> {
    let value = match value {
        None | Some(Value::Null) => return Ok(LossSpec::new(LossKind::CrossEntropy)),
        Some(v) => v,
    };
    let obj = expect_object(value, "downstream.loss")?;
    check_keys(obj, &["kind", "output_slice"], "downstream.loss")?;
    let kind = match obj.get("kind") {
        None => LossKind::CrossEntropy,
        Some(v) => LossKind::parse(v.as_str().ok_or_else(|| {
            Error::Config("downstream.loss.kind must be a string".into())
        })?)?,
    };
    let output_slice = match obj.get("output_slice") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let pair = usize_list(v, "downstream.loss.output_slice")?;
            if pair.len() != 2 {
                return Err(Error::Config(
                    "downstream.loss.output_slice must be [start, len]".into(),
                ));
            }
            Some((pair[0], pair[1]))
        }
    };
    Ok(LossSpec { kind, output_slice })
}

fn parse_params(value: Option<&Value>) -> Result<MethodParams> {
    let mut params = MethodParams::default();
    let value = match value {
        None | Some(Value::Null) => return Ok(params),
        Some(v) => v,
    };
    let obj = expect_object(value, "params")?;
    check_keys(
        obj,
        &[
            "pad_size",
            "position",
            "init_std",
            "lr",
            "epochs",
            "recompute_every",
            "max_deletions",
            "num_meta_nodes",
            "tau",
            "tau_schedule",
            "candidates",
        ],
        "params",
    )?;
    params.pad_size = opt_usize(obj, "pad_size", "params")?;
    if let Some(v) = obj.get("position") {
        params.position = PadPosition::parse(
            v.as_str()
                .ok_or_else(|| Error::Config("params.position must be a string".into()))?,
        )?;
    }
    if let Some(v) = opt_f64(obj, "init_std", "params")? {
        params.init_std = v;
    }
    if let Some(v) = opt_f64(obj, "lr", "params")? {
        params.lr = v;
    }
    if let Some(v) = opt_usize(obj, "epochs", "params")? {
        params.epochs = v;
    }
    if let Some(v) = opt_usize(obj, "recompute_every", "params")? {
        params.recompute_every = v;
    }
    params.max_deletions = opt_usize(obj, "max_deletions", "params")?;
    if let Some(v) = opt_usize(obj, "num_meta_nodes", "params")? {
        params.num_meta_nodes = v;
    }
    if let Some(v) = opt_f64(obj, "tau", "params")? {
        params.tau = v;
    }
    params.tau_schedule = match obj.get("tau_schedule") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let arr = v
                .as_array()
                .ok_or_else(|| Error::Config("params.tau_schedule must be [start, end]".into()))?;
            if arr.len() != 2 {
                return Err(Error::Config(
                    "params.tau_schedule must be [start, end]".into(),
                ));
            }
            let start = arr[0]
                .as_f64()
                .ok_or_else(|| Error::Config("params.tau_schedule must hold numbers".into()))?;
            let end = arr[1]
                .as_f64()
                .ok_or_else(|| Error::Config("params.tau_schedule must hold numbers".into()))?;
            Some((start, end))
        }
    };
    if let Some(v) = obj.get("candidates") {
        let arr = v
            .as_array()
            .ok_or_else(|| Error::Config("params.candidates must be an array".into()))?;
        let mut candidates = Vec::with_capacity(arr.len());
        for item in arr {
            candidates.push(Aggregator::parse(item.as_str().ok_or_else(|| {
                Error::Config("params.candidates must hold aggregator names".into())
            })?)?);
        }
        params.candidates = candidates;
    }
    Ok(params)
}

fn expect_object<'a>(value: &'a Value, ctx: &str) -> Result<&'a Map<String, Value>> {
    value
        .as_object()
        .ok_or_else(|| Error::Config(format!("{ctx} must be a JSON object")))
}

fn check_keys(obj: &Map<String, Value>, allowed: &[&str], ctx: &str) -> Result<()> {
    for key in obj.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(Error::Config(format!(
                "unknown key {key:?} in {ctx}; allowed keys are {allowed:?}"
            )));
        }
    }
    Ok(())
}

fn req_usize(obj: &Map<String, Value>, key: &str, ctx: &str) -> Result<usize> {
    opt_usize(obj, key, ctx)?
        .ok_or_else(|| Error::Config(format!("missing {ctx}.{key}")))
}

fn opt_usize(obj: &Map<String, Value>, key: &str, ctx: &str) -> Result<Option<usize>> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v
            .as_u64()
            .map(|n| Some(n as usize))
            .ok_or_else(|| Error::Config(format!("{ctx}.{key} must be an unsigned integer"))),
    }
}

fn opt_u64(obj: &Map<String, Value>, key: &str, ctx: &str) -> Result<Option<u64>> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v
            .as_u64()
            .map(Some)
            .ok_or_else(|| Error::Config(format!("{ctx}.{key} must be an unsigned integer"))),
    }
}

fn opt_f64(obj: &Map<String, Value>, key: &str, ctx: &str) -> Result<Option<f64>> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v
            .as_f64()
            .map(Some)
            .ok_or_else(|| Error::Config(format!("{ctx}.{key} must be a number"))),
    }
}

fn usize_list(value: &Value, ctx: &str) -> Result<Vec<usize>> {
    let arr = value
        .as_array()
        .ok_or_else(|| Error::Config(format!("{ctx} must be an array")))?;
    arr.iter()
        .map(|v| {
            v.as_u64()
                .map(|n| n as usize)
                .ok_or_else(|| Error::Config(format!("{ctx} must hold unsigned integers")))
        })
        .collect()
}
