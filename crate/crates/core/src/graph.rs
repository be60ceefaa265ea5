//! Graph data model and JSON serialization.
//!
//! A graph stores node features as a dense matrix, directed edges as
//! (source, target) pairs with weights in [0, 1], and optional labels and
//! train/val/test masks. Undirected graphs are stored as symmetric directed
//! pairs; both directions carry the same weight and count as one logical edge
//! for slimming. The on-disk format is JSON with `format_version` 1.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u64 = 1;

/// Node-level targets: integer classes or real regression values.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeLabels {
    Class(Vec<i64>),
    Value(Vec<f64>),
}

impl NodeLabels {
    pub fn len(&self) -> usize {
        match self {
            NodeLabels::Class(v) => v.len(),
            NodeLabels::Value(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Boolean node memberships for the three evaluation splits.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Masks {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

impl Masks {
    pub fn empty(num_nodes: usize) -> Self {
        Masks {
            train: vec![false; num_nodes],
            val: vec![false; num_nodes],
            test: vec![false; num_nodes],
        }
    }

    pub fn of(&self, kind: MaskKind) -> &[bool] {
        match kind {
            MaskKind::Train => &self.train,
            MaskKind::Val => &self.val,
            MaskKind::Test => &self.test,
        }
    }

    pub fn indices(&self, kind: MaskKind) -> Vec<usize> {
        self.of(kind)
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }
}

/// One of the three standard splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Train,
    Val,
    Test,
}

impl MaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskKind::Train => "train",
            MaskKind::Val => "val",
            MaskKind::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub num_nodes: usize,
    pub directed: bool,
    pub features: Tensor,
    pub edges: Vec<(usize, usize)>,
    pub edge_weights: Vec<f64>,
    pub node_labels: Option<NodeLabels>,
    pub masks: Option<Masks>,
    pub graph_label: Option<f64>,
}

impl Graph {
    pub fn feat_dim(&self) -> usize {
        self.features.cols()
    }

    /// Checks every structural invariant; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.features.rows() != self.num_nodes {
            return Err(Error::Validation(format!(
                "features has {} rows, expected num_nodes = {}",
                self.features.rows(),
                self.num_nodes
            )));
        }
        if !self.features.all_finite() {
            return Err(Error::Validation("features contains non-finite values".into()));
        }
        for (i, &(u, v)) in self.edges.iter().enumerate() {
            if u >= self.num_nodes {
                return Err(Error::Validation(format!(
                    "edges[{i}] = [{u}, {v}]: edge source out of range (num_nodes = {})",
                    self.num_nodes
                )));
            }
            if v >= self.num_nodes {
                return Err(Error::Validation(format!(
                    "edges[{i}] = [{u}, {v}]: edge target out of range (num_nodes = {})",
                    self.num_nodes
                )));
            }
        }
        if self.edge_weights.len() != self.edges.len() {
            return Err(Error::Validation(format!(
                "edge_weights has {} entries, expected one per edge ({})",
                self.edge_weights.len(),
                self.edges.len()
            )));
        }
        for (i, &w) in self.edge_weights.iter().enumerate() {
            if !w.is_finite() || !(0.0..=1.0).contains(&w) {
                return Err(Error::Validation(format!(
                    "edge_weights[{i}] = {w} outside [0, 1]"
                )));
            }
        }
        if !self.directed {
            self.check_symmetric()?;
        }
        if let Some(labels) = &self.node_labels {
            if labels.len() != self.num_nodes {
                return Err(Error::Validation(format!(
                    "node_labels has {} entries, expected num_nodes = {}",
                    labels.len(),
                    self.num_nodes
                )));
            }
            if let NodeLabels::Class(classes) = labels {
                if let Some((i, &c)) = classes.iter().enumerate().find(|(_, &c)| c < 0) {
                    return Err(Error::Validation(format!(
                        "node_labels[{i}] = {c} is a negative class id"
                    )));
                }
            }
            if let NodeLabels::Value(values) = labels {
                if let Some((i, _)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                    return Err(Error::Validation(format!("node_labels[{i}] is not finite")));
                }
            }
        }
        if let Some(masks) = &self.masks {
            for (name, mask) in [
                ("train", &masks.train),
                ("val", &masks.val),
                ("test", &masks.test),
            ] {
                if mask.len() != self.num_nodes {
                    return Err(Error::Validation(format!(
                        "masks.{name} has {} entries, expected num_nodes = {}",
                        mask.len(),
                        self.num_nodes
                    )));
                }
            }
            for i in 0..self.num_nodes {
                let memberships =
                    masks.train[i] as u8 + masks.val[i] as u8 + masks.test[i] as u8;
                if memberships > 1 {
                    return Err(Error::Validation(format!(
                        "masks overlap at node {i}; train/val/test must be disjoint"
                    )));
                }
            }
        }
        if let Some(label) = self.graph_label {
            if !label.is_finite() {
                return Err(Error::Validation("graph_label is not finite".into()));
            }
        }
        Ok(())
    }

    fn check_symmetric(&self) -> Result<()> {
        let mut weight_of: HashMap<(usize, usize), f64> = HashMap::new();
        for (&(u, v), &w) in self.edges.iter().zip(&self.edge_weights) {
            weight_of.insert((u, v), w);
        }
        for (i, &(u, v)) in self.edges.iter().enumerate() {
            match weight_of.get(&(v, u)) {
                None => {
                    return Err(Error::Validation(format!(
                        "undirected graph is missing the reverse of edges[{i}] = [{u}, {v}]"
                    )))
                }
                Some(&w) if w != self.edge_weights[i] => {
                    return Err(Error::Validation(format!(
                        "undirected edge [{u}, {v}] has asymmetric weights {} vs {w}",
                        self.edge_weights[i]
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Node indices carrying a label (all nodes when labels are present).
    pub fn mask_indices(&self, kind: MaskKind) -> Result<Vec<usize>> {
        let masks = self
            .masks
            .as_ref()
            .ok_or_else(|| Error::Validation("graph has no masks".into()))?;
        let indices = masks.indices(kind);
        if indices.is_empty() {
            return Err(Error::Validation(format!(
                "{} mask is empty",
                kind.as_str()
            )));
        }
        Ok(indices)
    }

    /// Groups symmetric directed pairs into logical edges; directed graphs
    /// map one-to-one. Self-loops stored in the edge list count once.
    pub fn logical_edges(&self) -> LogicalEdges {
        if self.directed {
            let pairs = self.edges.clone();
            let logical_of_directed = (0..self.edges.len()).collect();
            let directed_of_logical = (0..self.edges.len()).map(|i| vec![i]).collect();
            return LogicalEdges {
                pairs,
                logical_of_directed,
                directed_of_logical,
            };
        }
        let mut ids: HashMap<(usize, usize), usize> = HashMap::new();
        let mut pairs = Vec::new();
        let mut logical_of_directed = Vec::with_capacity(self.edges.len());
        let mut directed_of_logical: Vec<Vec<usize>> = Vec::new();
        for (i, &(u, v)) in self.edges.iter().enumerate() {
            let key = (u.min(v), u.max(v));
            let id = *ids.entry(key).or_insert_with(|| {
                pairs.push(key);
                directed_of_logical.push(Vec::new());
                pairs.len() - 1
            });
            logical_of_directed.push(id);
            directed_of_logical[id].push(i);
        }
        LogicalEdges {
            pairs,
            logical_of_directed,
            directed_of_logical,
        }
    }

    /// Relabels nodes: node i of the result is node `perm[i]` of `self`.
    pub fn permute_nodes(&self, perm: &[usize]) -> Result<Graph> {
        if perm.len() != self.num_nodes {
            return Err(Error::Validation(format!(
                "permutation has {} entries, expected {}",
                perm.len(),
                self.num_nodes
            )));
        }
        let mut inverse = vec![usize::MAX; self.num_nodes];
        for (new_id, &old_id) in perm.iter().enumerate() {
            if old_id >= self.num_nodes || inverse[old_id] != usize::MAX {
                return Err(Error::Validation("not a permutation of node ids".into()));
            }
            inverse[old_id] = new_id;
        }
        let mut features = Tensor::zeros(self.num_nodes, self.feat_dim());
        for new_id in 0..self.num_nodes {
            features.row_mut(new_id).copy_from_slice(self.features.row(perm[new_id]));
        }
        let edges = self
            .edges
            .iter()
            .map(|&(u, v)| (inverse[u], inverse[v]))
            .collect();
        let node_labels = self.node_labels.as_ref().map(|labels| match labels {
            NodeLabels::Class(v) => NodeLabels::Class(perm.iter().map(|&p| v[p]).collect()),
            NodeLabels::Value(v) => NodeLabels::Value(perm.iter().map(|&p| v[p]).collect()),
        });
        let masks = self.masks.as_ref().map(|m| Masks {
            train: perm.iter().map(|&p| m.train[p]).collect(),
            val: perm.iter().map(|&p| m.val[p]).collect(),
            test: perm.iter().map(|&p| m.test[p]).collect(),
        });
        Ok(Graph {
            num_nodes: self.num_nodes,
            directed: self.directed,
            features,
            edges,
            edge_weights: self.edge_weights.clone(),
            node_labels,
            masks,
            graph_label: self.graph_label,
        })
    }

    // ------------------------------------------------------------- JSON --

    pub fn to_json(&self) -> Value {
        let mut obj = serde_json::Map::new();
        obj.insert("format_version".into(), json!(FORMAT_VERSION));
        obj.insert("num_nodes".into(), json!(self.num_nodes));
        obj.insert("directed".into(), json!(self.directed));
        obj.insert("features".into(), self.features.to_json_rows());
        obj.insert(
            "edges".into(),
            Value::Array(
                self.edges
                    .iter()
                    .map(|&(u, v)| json!([u, v]))
                    .collect(),
            ),
        );
        obj.insert("edge_weights".into(), json!(self.edge_weights));
        if let Some(labels) = &self.node_labels {
            let arr = match labels {
                NodeLabels::Class(v) => json!(v),
                NodeLabels::Value(v) => json!(v),
            };
            obj.insert("node_labels".into(), arr);
        }
        if let Some(masks) = &self.masks {
            obj.insert(
                "masks".into(),
                json!({
                    "train": masks.indices(MaskKind::Train),
                    "val": masks.indices(MaskKind::Val),
                    "test": masks.indices(MaskKind::Test),
                }),
            );
        }
        if let Some(label) = self.graph_label {
            obj.insert("graph_label".into(), json!(label));
        }
        Value::Object(obj)
    }

    pub fn from_json(value: &Value) -> Result<Graph> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Validation("graph must be a JSON object".into()))?;
        if let Some(version) = obj.get("format_version") {
            let version = version
                .as_u64()
                .ok_or_else(|| Error::Validation("format_version must be an integer".into()))?;
            if version != FORMAT_VERSION {
                return Err(Error::Validation(format!(
                    "unsupported format_version {version}, expected {FORMAT_VERSION}"
                )));
            }
        }
        let known = [
            "format_version",
            "num_nodes",
            "directed",
            "features",
            "edges",
            "edge_weights",
            "node_labels",
            "masks",
            "graph_label",
        ];
        for key in obj.keys() {
            if !known.contains(&key.as_str()) {
                return Err(Error::Validation(format!("unknown graph field `{key}`")));
            }
        }
        let num_nodes = obj
            .get("num_nodes")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Validation("num_nodes must be a non-negative integer".into()))?
            as usize;
        let directed = match obj.get("directed") {
            None => false,
            Some(v) => v
                .as_bool()
                .ok_or_else(|| Error::Validation("directed must be a boolean".into()))?,
        };
        let features = Tensor::from_json_rows(
            obj.get("features")
                .ok_or_else(|| Error::Validation("missing features".into()))?,
            "features",
        )?;
        let mut edges = Vec::new();
        if let Some(raw_edges) = obj.get("edges") {
            let raw_edges = raw_edges
                .as_array()
                .ok_or_else(|| Error::Validation("edges must be an array".into()))?;
            for (i, e) in raw_edges.iter().enumerate() {
                let pair = e
                    .as_array()
                    .filter(|p| p.len() == 2)
                    .ok_or_else(|| Error::Validation(format!("edges[{i}] must be [source, target]")))?;
                let u = pair[0]
                    .as_u64()
                    .ok_or_else(|| Error::Validation(format!("edges[{i}] source must be a non-negative integer")))?;
                let v = pair[1]
                    .as_u64()
                    .ok_or_else(|| Error::Validation(format!("edges[{i}] target must be a non-negative integer")))?;
                edges.push((u as usize, v as usize));
            }
        }
        let edge_weights = match obj.get("edge_weights") {
            None => vec![1.0; edges.len()],
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| Error::Validation(format!("edge_weights: {e}")))?,
        };
        let node_labels = match obj.get("node_labels") {
            None | Some(Value::Null) => None,
            Some(v) => Some(parse_labels(v)?),
        };
        let masks = match obj.get("masks") {
            None | Some(Value::Null) => None,
            Some(v) => Some(parse_masks(v, num_nodes)?),
        };
        let graph_label = match obj.get("graph_label") {
            None | Some(Value::Null) => None,
            Some(v) => Some(
                v.as_f64()
                    .ok_or_else(|| Error::Validation("graph_label must be a number".into()))?,
            ),
        };
        let graph = Graph {
            num_nodes,
            directed,
            features,
            edges,
            edge_weights,
            node_labels,
            masks,
            graph_label,
        };
        graph.validate()?;
        Ok(graph)
    }

    pub fn from_json_str(source: &str) -> Result<Graph> {
        let value: Value =
            serde_json::from_str(source).map_err(|e| Error::from_json(&e, source))?;
        Graph::from_json(&value)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_json()).expect("json"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Graph> {
        let source = std::fs::read_to_string(path)?;
        Graph::from_json_str(&source)
    }
}

fn parse_labels(value: &Value) -> Result<NodeLabels> {
    let arr = value
        .as_array()
        .ok_or_else(|| Error::Validation("node_labels must be an array".into()))?;
    let all_integer = arr.iter().all(|v| v.as_i64().is_some());
    if all_integer {
        Ok(NodeLabels::Class(
            arr.iter().map(|v| v.as_i64().unwrap()).collect(),
        ))
    } else {
        let mut out = Vec::with_capacity(arr.len());
        for (i, v) in arr.iter().enumerate() {
            out.push(
                v.as_f64()
                    .ok_or_else(|| Error::Validation(format!("node_labels[{i}] must be a number")))?,
            );
        }
        Ok(NodeLabels::Value(out))
    }
}

fn parse_masks(value: &Value, num_nodes: usize) -> Result<Masks> {
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Validation("masks must be an object".into()))?;
    let mut masks = Masks::empty(num_nodes);
    for (name, target) in [("train", 0usize), ("val", 1), ("test", 2)] {
        let Some(list) = obj.get(name) else { continue };
        let list = list
            .as_array()
            .ok_or_else(|| Error::Validation(format!("masks.{name} must be an index array")))?;
        for v in list {
            let idx = v.as_u64().ok_or_else(|| {
                Error::Validation(format!("masks.{name} must contain non-negative integers"))
            })? as usize;
            if idx >= num_nodes {
                return Err(Error::Validation(format!(
                    "masks.{name} index {idx} outside 0..{num_nodes}"
                )));
            }
            match target {
                0 => masks.train[idx] = true,
                1 => masks.val[idx] = true,
                _ => masks.test[idx] = true,
            }
        }
    }
    for key in obj.keys() {
        if !["train", "val", "test"].contains(&key.as_str()) {
            return Err(Error::Validation(format!("unknown masks field `{key}`")));
        }
    }
    Ok(masks)
}

// -------------------------------------------------------------- adjacency --

/// How an adjacency entry maps back to trainable edge weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    /// Index into the graph's edge (and edge-weight) list.
    Edge(usize),
    /// Model-added self-loop with constant weight 1.
    SelfLoop,
}

impl EdgeKind {
    pub fn weight(self, weights: &[f64]) -> f64 {
        match self {
            EdgeKind::Edge(i) => weights[i],
            EdgeKind::SelfLoop => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdjEntry {
    pub src: usize,
    pub kind: EdgeKind,
}

/// CSR-style incoming adjacency: for each target node, its source entries
/// sorted by source id (ties keep edge-list order) so that max-aggregation
/// tie-breaking is deterministic.
#[derive(Debug, Clone)]
pub struct Adjacency {
    offsets: Vec<usize>,
    entries: Vec<AdjEntry>,
}

impl Adjacency {
    pub fn build(graph: &Graph, self_loops: bool) -> Adjacency {
        let n = graph.num_nodes;
        let mut lists: Vec<Vec<AdjEntry>> = vec![Vec::new(); n];
        for (i, &(u, v)) in graph.edges.iter().enumerate() {
            lists[v].push(AdjEntry {
                src: u,
                kind: EdgeKind::Edge(i),
            });
        }
        if self_loops {
            for (v, list) in lists.iter_mut().enumerate() {
                list.push(AdjEntry {
                    src: v,
                    kind: EdgeKind::SelfLoop,
                });
            }
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut entries = Vec::new();
        offsets.push(0);
        for mut list in lists {
            list.sort_by_key(|e| {
                (
                    e.src,
                    match e.kind {
                        EdgeKind::Edge(i) => i,
                        EdgeKind::SelfLoop => usize::MAX,
                    },
                )
            });
            entries.extend(list);
            offsets.push(entries.len());
        }
        Adjacency { offsets, entries }
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_entries(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self, v: usize) -> &[AdjEntry] {
        &self.entries[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn entry_range(&self, v: usize) -> Range<usize> {
        self.offsets[v]..self.offsets[v + 1]
    }
}

// -------------------------------------------------------- logical edges --

/// Mapping between directed edge storage and logical (undirected) edges.
#[derive(Debug, Clone)]
pub struct LogicalEdges {
    /// Canonical (low, high) node pair per logical edge.
    pub pairs: Vec<(usize, usize)>,
    pub logical_of_directed: Vec<usize>,
    pub directed_of_logical: Vec<Vec<usize>>,
}

impl LogicalEdges {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> String {
        r#"{
            "format_version": 1,
            "num_nodes": 2,
            "directed": false,
            "features": [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]],
            "edges": [[0, 1], [1, 0]],
            "edge_weights": [1.0, 1.0],
            "node_labels": [0, 1],
            "masks": {"train": [0], "val": [], "test": [1]}
        }"#
        .to_string()
    }

    #[test]
    fn loads_minimal_two_node_graph() {
        let g = Graph::from_json_str(&minimal_json()).unwrap();
        assert_eq!(g.num_nodes, 2);
        assert_eq!(g.feat_dim(), 3);
        assert_eq!(g.edges.len(), 2);
        assert_eq!(g.node_labels, Some(NodeLabels::Class(vec![0, 1])));
    }

    #[test]
    fn out_of_range_edge_names_the_edge() {
        let bad = minimal_json().replace("[[0, 1], [1, 0]]", "[[0, 5], [5, 0]]");
        let err = Graph::from_json_str(&bad).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("edges[0]"), "{msg}");
        assert!(msg.contains("edge target out of range"), "{msg}");
    }

    #[test]
    fn malformed_json_reports_position() {
        let err = Graph::from_json_str("{\"num_nodes\": }").unwrap_err();
        assert!(matches!(err, Error::Parse { offset, .. } if offset > 0));
    }

    #[test]
    fn round_trip_preserves_feature_bits() {
        let g = Graph::from_json_str(&minimal_json()).unwrap();
        let text = serde_json::to_string(&g.to_json()).unwrap();
        let back = Graph::from_json_str(&text).unwrap();
        assert_eq!(g, back);
        for (a, b) in g.features.data().iter().zip(back.features.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn regression_labels_stay_real_valued() {
        let with_floats = minimal_json().replace("\"node_labels\": [0, 1]", "\"node_labels\": [0.5, 1.0]");
        let g = Graph::from_json_str(&with_floats).unwrap();
        assert_eq!(g.node_labels, Some(NodeLabels::Value(vec![0.5, 1.0])));
        let text = serde_json::to_string(&g.to_json()).unwrap();
        let back = Graph::from_json_str(&text).unwrap();
        assert_eq!(g.node_labels, back.node_labels);
    }

    #[test]
    fn overlapping_masks_are_rejected() {
        let bad = minimal_json().replace("\"test\": [1]", "\"test\": [0, 1]");
        let err = Graph::from_json_str(&bad).unwrap_err();
        assert!(err.to_string().contains("masks overlap at node 0"));
    }

    #[test]
    fn asymmetric_undirected_graph_is_rejected() {
        let bad = minimal_json()
            .replace("[[0, 1], [1, 0]]", "[[0, 1]]")
            .replace("\"edge_weights\": [1.0, 1.0]", "\"edge_weights\": [1.0]");
        let err = Graph::from_json_str(&bad).unwrap_err();
        assert!(err.to_string().contains("missing the reverse"));
    }

    #[test]
    fn logical_edges_group_symmetric_pairs() {
        let g = Graph::from_json_str(&minimal_json()).unwrap();
        let logical = g.logical_edges();
        assert_eq!(logical.len(), 1);
        assert_eq!(logical.pairs[0], (0, 1));
        assert_eq!(logical.directed_of_logical[0], vec![0, 1]);
    }

    #[test]
    fn adjacency_sorts_incoming_by_source() {
        let g = Graph {
            num_nodes: 3,
            directed: true,
            features: Tensor::zeros(3, 1),
            edges: vec![(2, 0), (1, 0)],
            edge_weights: vec![1.0, 1.0],
            node_labels: None,
            masks: None,
            graph_label: None,
        };
        let adj = Adjacency::build(&g, true);
        let srcs: Vec<usize> = adj.entries(0).iter().map(|e| e.src).collect();
        assert_eq!(srcs, vec![0, 1, 2]);
        assert_eq!(adj.entries(0)[0].kind, EdgeKind::SelfLoop);
    }

    #[test]
    fn permute_nodes_relabels_consistently() {
        let g = Graph::from_json_str(&minimal_json()).unwrap();
        let p = g.permute_nodes(&[1, 0]).unwrap();
        assert_eq!(p.features.row(0), g.features.row(1));
        assert!(p.edges.contains(&(1, 0)) && p.edges.contains(&(0, 1)));
        assert_eq!(p.node_labels, Some(NodeLabels::Class(vec![1, 0])));
        let m = p.masks.as_ref().unwrap();
        assert!(m.test[0] && m.train[1]);
    }
}
