//! Datasets: graph collections, task kinds, and deterministic splitting.
//!
//! A transductive (node-level) dataset holds exactly one graph whose masks
//! carry the split; an inductive (graph-level) dataset holds many graphs and
//! splits them by index. Fractional splits floor each part and give the
//! remainder to train.

use std::path::Path;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::graph::{Graph, MaskKind, Masks};
use crate::rng::substream;

/// The four supported prediction tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    NodeClassification,
    NodeRegression,
    GraphClassification,
    GraphRegression,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::NodeClassification => "node-classification",
            TaskKind::NodeRegression => "node-regression",
            TaskKind::GraphClassification => "graph-classification",
            TaskKind::GraphRegression => "graph-regression",
        }
    }

    pub fn parse(s: &str) -> Result<TaskKind> {
        match s {
            "node-classification" => Ok(TaskKind::NodeClassification),
            "node-regression" => Ok(TaskKind::NodeRegression),
            "graph-classification" => Ok(TaskKind::GraphClassification),
            "graph-regression" => Ok(TaskKind::GraphRegression),
            other => Err(Error::Validation(format!(
                "unknown task_kind `{other}`; expected node-classification, \
                 node-regression, graph-classification, or graph-regression"
            ))),
        }
    }

    pub fn is_node_level(self) -> bool {
        matches!(self, TaskKind::NodeClassification | TaskKind::NodeRegression)
    }

    pub fn is_graph_level(self) -> bool {
        !self.is_node_level()
    }

    pub fn is_classification(self) -> bool {
        matches!(
            self,
            TaskKind::NodeClassification | TaskKind::GraphClassification
        )
    }
}

/// Graph-index lists for inductive splits; empty for transductive datasets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn of(&self, kind: MaskKind) -> &[usize] {
        match kind {
            MaskKind::Train => &self.train,
            MaskKind::Val => &self.val,
            MaskKind::Test => &self.test,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty() && self.val.is_empty() && self.test.is_empty()
    }
}

/// Train/val/test proportions; must sum to 1 within 1e-9.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<SplitFractions> {
        let f = SplitFractions { train, val, test };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!(
                    "split fraction {name} = {v} outside [0, 1]"
                )));
            }
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "split fractions sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }

    /// Floors val and test counts; the remainder goes to train.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let n_val = (self.val * n as f64).floor() as usize;
        let n_test = (self.test * n as f64).floor() as usize;
        let n_train = n - n_val - n_test;
        (n_train, n_val, n_test)
    }
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphDataset {
    pub graphs: Vec<Graph>,
    pub task_kind: TaskKind,
    pub num_classes: Option<usize>,
    pub split: Split,
}

impl GraphDataset {
    pub fn feat_dim(&self) -> usize {
        self.graphs.first().map_or(0, Graph::feat_dim)
    }

    /// Labels of the graphs, gathered in graph order.
    pub fn graph_labels(&self) -> Option<Vec<f64>> {
        self.graphs
            .iter()
            .map(|g| g.graph_label)
            .collect::<Option<Vec<_>>>()
    }

    /// The single graph of a transductive dataset.
    pub fn sole_graph(&self) -> Result<&Graph> {
        if self.graphs.len() != 1 {
            return Err(Error::Validation(format!(
                "expected a single-graph transductive dataset, found {} graphs",
                self.graphs.len()
            )));
        }
        Ok(&self.graphs[0])
    }

    pub fn validate(&self) -> Result<()> {
        if self.graphs.is_empty() {
            return Err(Error::Validation("dataset has no graphs".into()));
        }
        for (i, g) in self.graphs.iter().enumerate() {
            g.validate()
                .map_err(|e| Error::Validation(format!("graphs[{i}]: {e}")))?;
        }
        let dim = self.graphs[0].feat_dim();
        if let Some((i, g)) = self
            .graphs
            .iter()
            .enumerate()
            .find(|(_, g)| g.feat_dim() != dim)
        {
            return Err(Error::Validation(format!(
                "graphs[{i}] has feat_dim {}, but graphs[0] has {dim}",
                g.feat_dim()
            )));
        }
        if self.task_kind.is_classification() {
            let classes = self.num_classes.ok_or_else(|| {
                Error::Validation("classification dataset requires num_classes".into())
            })?;
            if classes < 2 {
                return Err(Error::Validation(format!(
                    "num_classes = {classes}, expected at least 2"
                )));
            }
        }
        if self.task_kind.is_node_level() {
            self.validate_node_level()?;
        } else {
            self.validate_graph_level()?;
        }
        Ok(())
    }

    fn validate_node_level(&self) -> Result<()> {
        if self.graphs.len() != 1 {
            return Err(Error::Validation(format!(
                "node-level dataset must hold exactly one graph, found {}",
                self.graphs.len()
            )));
        }
        let g = &self.graphs[0];
        if g.graph_label.is_some() {
            return Err(Error::Validation(
                "node-level dataset must not carry graph_label".into(),
            ));
        }
        let labels = g
            .node_labels
            .as_ref()
            .ok_or_else(|| Error::Validation("node-level dataset requires node_labels".into()))?;
        match (self.task_kind, labels) {
            (TaskKind::NodeClassification, crate::graph::NodeLabels::Class(classes)) => {
                if let Some(c) = self.num_classes {
                    if let Some((i, &bad)) = classes
                        .iter()
                        .enumerate()
                        .find(|(_, &v)| v as usize >= c)
                    {
                        return Err(Error::Validation(format!(
                            "node_labels[{i}] = {bad} outside 0..{c}"
                        )));
                    }
                }
            }
            (TaskKind::NodeClassification, _) => {
                return Err(Error::Validation(
                    "node-classification requires integer node_labels".into(),
                ))
            }
            (TaskKind::NodeRegression, crate::graph::NodeLabels::Value(_)) => {}
            (TaskKind::NodeRegression, _) => {
                return Err(Error::Validation(
                    "node-regression requires real-valued node_labels".into(),
                ))
            }
            _ => unreachable!(),
        }
        if g.masks.is_none() {
            return Err(Error::Validation(
                "node-level dataset requires train/val/test masks".into(),
            ));
        }
        Ok(())
    }

    fn validate_graph_level(&self) -> Result<()> {
        for (i, g) in self.graphs.iter().enumerate() {
            let label = g.graph_label.ok_or_else(|| {
                Error::Validation(format!("graphs[{i}] is missing graph_label"))
            })?;
            if self.task_kind == TaskKind::GraphClassification {
                let classes = self.num_classes.unwrap_or(0);
                if label.fract() != 0.0 || label < 0.0 || label as usize >= classes {
                    return Err(Error::Validation(format!(
                        "graphs[{i}] graph_label {label} is not a class id in 0..{classes}"
                    )));
                }
            }
        }
        let n = self.graphs.len();
        let mut seen = vec![false; n];
        for (name, list) in [
            ("train", &self.split.train),
            ("val", &self.split.val),
            ("test", &self.split.test),
        ] {
            for &idx in list {
                if idx >= n {
                    return Err(Error::Validation(format!(
                        "split.{name} index {idx} outside 0..{n}"
                    )));
                }
                if seen[idx] {
                    return Err(Error::Validation(format!(
                        "split lists overlap at graph {idx}"
                    )));
                }
                seen[idx] = true;
            }
        }
        Ok(())
    }

    /// Graph indices belonging to a split of an inductive dataset.
    pub fn split_indices(&self, kind: MaskKind) -> Result<Vec<usize>> {
        if self.task_kind.is_node_level() {
            return Err(Error::Validation(
                "node-level datasets split by node masks, not graph indices".into(),
            ));
        }
        let indices = self.split.of(kind).to_vec();
        if indices.is_empty() {
            return Err(Error::Validation(format!(
                "{} split is empty",
                kind.as_str()
            )));
        }
        Ok(indices)
    }

    // ------------------------------------------------------------- JSON --

    pub fn to_json(&self) -> Value {
        let mut obj = serde_json::Map::new();
        obj.insert("format_version".into(), json!(crate::graph::FORMAT_VERSION));
        obj.insert("task_kind".into(), json!(self.task_kind.as_str()));
        obj.insert(
            "num_classes".into(),
            match self.num_classes {
                Some(c) => json!(c),
                None => Value::Null,
            },
        );
        obj.insert(
            "graphs".into(),
            Value::Array(self.graphs.iter().map(Graph::to_json).collect()),
        );
        obj.insert(
            "split".into(),
            json!({
                "train": self.split.train,
                "val": self.split.val,
                "test": self.split.test,
            }),
        );
        Value::Object(obj)
    }

    pub fn from_json(value: &Value) -> Result<GraphDataset> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Validation("dataset must be a JSON object".into()))?;
        let task_kind = TaskKind::parse(
            obj.get("task_kind")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::Validation("missing task_kind".into()))?,
        )?;
        let num_classes = match obj.get("num_classes") {
            None | Some(Value::Null) => None,
            Some(v) => Some(
                v.as_u64()
                    .ok_or_else(|| Error::Validation("num_classes must be an integer".into()))?
                    as usize,
            ),
        };
        let raw_graphs = obj
            .get("graphs")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Validation("missing graphs array".into()))?;
        let mut graphs = Vec::with_capacity(raw_graphs.len());
        for (i, raw) in raw_graphs.iter().enumerate() {
            graphs.push(
                Graph::from_json(raw)
                    .map_err(|e| Error::Validation(format!("graphs[{i}]: {e}")))?,
            );
        }
        let split = match obj.get("split") {
            None | Some(Value::Null) => Split::default(),
            Some(v) => {
                let parse_list = |name: &str| -> Result<Vec<usize>> {
                    match v.get(name) {
                        None => Ok(Vec::new()),
                        Some(list) => serde_json::from_value(list.clone()).map_err(|e| {
                            Error::Validation(format!("split.{name}: {e}"))
                        }),
                    }
                };
                Split {
                    train: parse_list("train")?,
                    val: parse_list("val")?,
                    test: parse_list("test")?,
                }
            }
        };
        let ds = GraphDataset {
            graphs,
            task_kind,
            num_classes,
            split,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn from_json_str(source: &str) -> Result<GraphDataset> {
        let value: Value =
            serde_json::from_str(source).map_err(|e| Error::from_json(&e, source))?;
        GraphDataset::from_json(&value)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_json()).expect("json"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<GraphDataset> {
        let source = std::fs::read_to_string(path)?;
        GraphDataset::from_json_str(&source)
    }
}

/// Reassigns the split deterministically. Node-level datasets get fresh node
/// masks on their single graph; inductive datasets get graph-index lists.
pub fn split_dataset(
    ds: &GraphDataset,
    fractions: SplitFractions,
    seed: u64,
) -> Result<GraphDataset> {
    fractions.validate()?;
    let mut rng = substream(seed, "split");
    let mut out = ds.clone();
    if ds.task_kind.is_node_level() {
        let g = ds.sole_graph()?;
        let perm = rng.permutation(g.num_nodes);
        let (n_train, n_val, _) = fractions.sizes(g.num_nodes);
        let mut masks = Masks::empty(g.num_nodes);
        for (pos, &node) in perm.iter().enumerate() {
            if pos < n_train {
                masks.train[node] = true;
            } else if pos < n_train + n_val {
                masks.val[node] = true;
            } else {
                masks.test[node] = true;
            }
        }
        out.graphs[0].masks = Some(masks);
    } else {
        let n = ds.graphs.len();
        let perm = rng.permutation(n);
        let (n_train, n_val, _) = fractions.sizes(n);
        let mut train: Vec<usize> = perm[..n_train].to_vec();
        let mut val: Vec<usize> = perm[n_train..n_train + n_val].to_vec();
        let mut test: Vec<usize> = perm[n_train + n_val..].to_vec();
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        out.split = Split { train, val, test };
    }
    out.validate()?;
    Ok(out)
}
