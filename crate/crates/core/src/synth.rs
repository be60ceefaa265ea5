//! Synthetic stochastic-block-model tasks for desk-scale experiments.
//!
//! Node class c draws features from N(2 * one-hot(c mod feat_dim), noise_std^2)
//! and edges from a two-rate SBM (intra_p within a class, inter_p across).
//! Transductive specs produce one labeled, masked graph; inductive specs
//! produce one Erdos-Renyi graph per label. Everything is a pure function of
//! the spec, drawn from named substreams of its seed.

use crate::dataset::{split_dataset, GraphDataset, Split, SplitFractions, TaskKind};
use crate::error::{Error, Result};
use crate::graph::{Graph, Masks, NodeLabels};
use crate::rng::{substream, SplitMix64};
use crate::tensor::Tensor;

pub const CLASS_MEAN_SCALE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthTaskSpec {
    pub seed: u64,
    /// Total nodes (transductive) or nodes per graph (inductive).
    pub num_nodes: usize,
    /// When set, generates this many graphs for a graph-classification task.
    pub num_graphs: Option<usize>,
    pub feat_dim: usize,
    pub num_classes: usize,
    pub intra_p: f64,
    pub inter_p: f64,
    pub noise_std: f64,
}

impl SynthTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.feat_dim < 1 {
            return Err(Error::Validation("feat_dim must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Validation("num_classes must be at least 2".into()));
        }
        if self.num_nodes < 1 {
            return Err(Error::Validation("num_nodes must be at least 1".into()));
        }
        if self.num_graphs == Some(0) {
            return Err(Error::Validation("num_graphs must be at least 1".into()));
        }
        for (name, p) in [("intra_p", self.intra_p), ("inter_p", self.inter_p)] {
            if !p.is_finite() || !(0.0..=1.0).contains(&p) {
                return Err(Error::Validation(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if self.inter_p >= self.intra_p {
            return Err(Error::Validation(format!(
                "require inter_p < intra_p, got inter_p = {} and intra_p = {}",
                self.inter_p, self.intra_p
            )));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::Validation(format!(
                "noise_std = {} must be a non-negative real",
                self.noise_std
            )));
        }
        Ok(())
    }
}

/// Mean feature vector for a class.
pub fn class_mean(class: usize, feat_dim: usize) -> Vec<f64> {
    let mut mean = vec![0.0; feat_dim];
    mean[class % feat_dim] = CLASS_MEAN_SCALE;
    mean
}

fn sample_features(
    rng: &mut SplitMix64,
    classes: &[usize],
    feat_dim: usize,
    noise_std: f64,
) -> Tensor {
    let mut features = Tensor::zeros(classes.len(), feat_dim);
    for (i, &c) in classes.iter().enumerate() {
        let mean = class_mean(c, feat_dim);
        let row = features.row_mut(i);
        for (j, m) in mean.iter().enumerate() {
            row[j] = m + noise_std * rng.next_normal();
        }
    }
    features
}

fn sample_sbm_edges(
    rng: &mut SplitMix64,
    classes: &[usize],
    intra_p: f64,
    inter_p: f64,
) -> (Vec<(usize, usize)>, Vec<f64>) {
    let n = classes.len();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if classes[i] == classes[j] { intra_p } else { inter_p };
            if rng.next_f64() < p {
                edges.push((i, j));
                edges.push((j, i));
            }
        }
    }
    let weights = vec![1.0; edges.len()];
    (edges, weights)
}

pub fn generate_synthetic(spec: &SynthTaskSpec) -> Result<GraphDataset> {
    spec.validate()?;
    match spec.num_graphs {
        None => generate_transductive(spec),
        Some(count) => generate_inductive(spec, count),
    }
}

fn generate_transductive(spec: &SynthTaskSpec) -> Result<GraphDataset> {
    let classes: Vec<usize> = (0..spec.num_nodes).map(|i| i % spec.num_classes).collect();
    let mut feat_rng = substream(spec.seed, "synth/features");
    let features = sample_features(&mut feat_rng, &classes, spec.feat_dim, spec.noise_std);
    let mut edge_rng = substream(spec.seed, "synth/edges");
    let (edges, edge_weights) = sample_sbm_edges(&mut edge_rng, &classes, spec.intra_p, spec.inter_p);
    let graph = Graph {
        num_nodes: spec.num_nodes,
        directed: false,
        features,
        edges,
        edge_weights,
        node_labels: Some(NodeLabels::Class(classes.iter().map(|&c| c as i64).collect())),
        masks: Some(Masks::empty(spec.num_nodes)),
        graph_label: None,
    };
    let ds = GraphDataset {
        graphs: vec![graph],
        task_kind: TaskKind::NodeClassification,
        num_classes: Some(spec.num_classes),
        split: Split::default(),
    };
    split_dataset(&ds, SplitFractions::default(), spec.seed)
}

fn generate_inductive(spec: &SynthTaskSpec, count: usize) -> Result<GraphDataset> {
    let mut graphs = Vec::with_capacity(count);
    for g in 0..count {
        let class = g % spec.num_classes;
        let classes = vec![class; spec.num_nodes];
        let mut feat_rng = substream(spec.seed, &format!("synth/features/{g}"));
        let features = sample_features(&mut feat_rng, &classes, spec.feat_dim, spec.noise_std);
        let mut edge_rng = substream(spec.seed, &format!("synth/edges/{g}"));
        let (edges, edge_weights) =
            sample_sbm_edges(&mut edge_rng, &classes, spec.intra_p, spec.inter_p);
        graphs.push(Graph {
            num_nodes: spec.num_nodes,
            directed: false,
            features,
            edges,
            edge_weights,
            node_labels: None,
            masks: None,
            graph_label: Some(class as f64),
        });
    }
    let ds = GraphDataset {
        graphs,
        task_kind: TaskKind::GraphClassification,
        num_classes: Some(spec.num_classes),
        split: Split::default(),
    };
    split_dataset(&ds, SplitFractions::default(), spec.seed)
}

/// Restricts a dataset to the given original classes, relabeling them to
/// 0..classes.len() in the given order, and re-splits with `split_seed`.
/// Transductive datasets keep the induced node subgraph; inductive datasets
/// keep the matching graphs.
pub fn induce_classes(
    ds: &GraphDataset,
    classes: &[usize],
    split_seed: u64,
) -> Result<GraphDataset> {
    if classes.len() < 2 {
        return Err(Error::Validation(
            "induced task needs at least two classes".into(),
        ));
    }
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != classes.len() {
        return Err(Error::Validation("induced class list repeats a class".into()));
    }
    if !ds.task_kind.is_classification() {
        return Err(Error::Validation(
            "can only induce class subsets of classification datasets".into(),
        ));
    }
    let available = ds.num_classes.unwrap_or(0);
    if let Some(&bad) = classes.iter().find(|&&c| c >= available) {
        return Err(Error::Validation(format!(
            "class {bad} outside 0..{available}"
        )));
    }
    let new_class = |old: usize| classes.iter().position(|&c| c == old).unwrap() as i64;
    let induced = if ds.task_kind.is_node_level() {
        let g = ds.sole_graph()?;
        let labels = match g.node_labels.as_ref() {
            Some(NodeLabels::Class(v)) => v,
            _ => return Err(Error::Validation("dataset has no class labels".into())),
        };
        let keep: Vec<usize> = (0..g.num_nodes)
            .filter(|&i| classes.contains(&(labels[i] as usize)))
            .collect();
        if keep.is_empty() {
            return Err(Error::Validation(
                "no nodes belong to the requested classes".into(),
            ));
        }
        let mut new_id = vec![usize::MAX; g.num_nodes];
        for (fresh, &old) in keep.iter().enumerate() {
            new_id[old] = fresh;
        }
        let mut features = Tensor::zeros(keep.len(), g.feat_dim());
        for (fresh, &old) in keep.iter().enumerate() {
            features.row_mut(fresh).copy_from_slice(g.features.row(old));
        }
        let mut edges = Vec::new();
        let mut edge_weights = Vec::new();
        for (&(u, v), &w) in g.edges.iter().zip(&g.edge_weights) {
            if new_id[u] != usize::MAX && new_id[v] != usize::MAX {
                edges.push((new_id[u], new_id[v]));
                edge_weights.push(w);
            }
        }
        let node_labels = keep
            .iter()
            .map(|&old| new_class(labels[old] as usize))
            .collect();
        let graph = Graph {
            num_nodes: keep.len(),
            directed: g.directed,
            features,
            edges,
            edge_weights,
            node_labels: Some(NodeLabels::Class(node_labels)),
            masks: Some(Masks::empty(keep.len())),
            graph_label: None,
        };
        GraphDataset {
            graphs: vec![graph],
            task_kind: ds.task_kind,
            num_classes: Some(classes.len()),
            split: Split::default(),
        }
    } else {
        let kept: Vec<Graph> = ds
            .graphs
            .iter()
            .filter(|g| classes.contains(&(g.graph_label.unwrap_or(-1.0) as usize)))
            .map(|g| {
                let mut g = g.clone();
                g.graph_label = Some(new_class(g.graph_label.unwrap() as usize) as f64);
                g
            })
            .collect();
        if kept.is_empty() {
            return Err(Error::Validation(
                "no graphs belong to the requested classes".into(),
            ));
        }
        GraphDataset {
            graphs: kept,
            task_kind: ds.task_kind,
            num_classes: Some(classes.len()),
            split: Split::default(),
        }
    };
    split_dataset(&induced, SplitFractions::default(), split_seed)
}
