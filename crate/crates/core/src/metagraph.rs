//! Meta-GraPadding: a tiny learnable subgraph attached to every downstream
//! graph.
//!
//! The meta graph is a handful of nodes (default 10) whose features are
//! trained while the model stays frozen. Each meta node is wired to every
//! original node in both message-passing directions; meta nodes carry no
//! labels, join no masks, and have no edges among themselves, but they do
//! participate in mean-pool readout.

use std::rc::Rc;

use serde_json::{json, Value};

use crate::dataset::GraphDataset;
use crate::error::{Error, Result};
use crate::graph::{Adjacency, Graph, MaskKind, Masks, NodeLabels};
use crate::metrics::{self, LossSpec};
use crate::model::{AggPlan, FrozenModel, Readout, TrainOpts};
use crate::padding::{EARLY_STOP_PATIENCE, EARLY_STOP_REL, MOMENTUM_BETA};
use crate::rng::substream;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const DEFAULT_META_NODES: usize = 10;

/// Learnable meta nodes; rows of `meta_features` are the node features.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaGraph {
    pub meta_features: Tensor,
}

impl MetaGraph {
    /// Features initialized from N(0, init_std^2).
    pub fn new(num_meta_nodes: usize, feat_dim: usize, init_std: f64, seed: u64) -> Result<Self> {
        if !init_std.is_finite() || init_std < 0.0 {
            return Err(Error::Validation(format!(
                "init_std {init_std} must be a non-negative real"
            )));
        }
        let mut rng = substream(seed, "init/meta");
        let data = (0..num_meta_nodes * feat_dim)
            .map(|_| init_std * rng.next_normal())
            .collect();
        Ok(MetaGraph {
            meta_features: Tensor::from_vec(num_meta_nodes, feat_dim, data)?,
        })
    }

    pub fn num_meta_nodes(&self) -> usize {
        self.meta_features.rows()
    }

    pub fn feat_dim(&self) -> usize {
        self.meta_features.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.meta_features.all_finite() {
            return Err(Error::Validation(
                "meta_features contain non-finite values".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        json!({
            "num_meta_nodes": self.num_meta_nodes(),
            "meta_features": self.meta_features.to_json_rows(),
        })
    }

    pub fn from_json(value: &Value) -> Result<MetaGraph> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Validation("meta graph must be a JSON object".into()))?;
        let claimed = obj
            .get("num_meta_nodes")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Validation("missing num_meta_nodes".into()))?
            as usize;
        let meta_features = Tensor::from_json_rows(
            obj.get("meta_features")
                .ok_or_else(|| Error::Validation("missing meta_features".into()))?,
            "meta_features",
        )?;
        if meta_features.rows() != claimed {
            return Err(Error::Validation(format!(
                "num_meta_nodes {claimed} does not match {} feature rows",
                meta_features.rows()
            )));
        }
        let meta = MetaGraph { meta_features };
        meta.validate()?;
        Ok(meta)
    }
}

/// The bipartite edge list wiring `num_meta` meta nodes (ids starting at
/// `num_original`) to every original node, both directions, weight 1.
fn bipartite_edges(num_original: usize, num_meta: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::with_capacity(2 * num_original * num_meta);
    for m in 0..num_meta {
        let meta_id = num_original + m;
        for v in 0..num_original {
            edges.push((v, meta_id));
            edges.push((meta_id, v));
        }
    }
    edges
}

/// A new graph with the meta nodes appended; original edges, features,
/// labels, and masks are preserved verbatim, meta nodes stay unlabeled and
/// unmasked.
pub fn attach_meta_graph(g: &Graph, meta: &MetaGraph) -> Result<Graph> {
    if meta.num_meta_nodes() == 0 {
        return Ok(g.clone());
    }
    if meta.feat_dim() != g.feat_dim() {
        return Err(Error::Validation(format!(
            "meta feature dim {} does not match graph feature dim {}",
            meta.feat_dim(),
            g.feat_dim()
        )));
    }
    let n = g.num_nodes;
    let m = meta.num_meta_nodes();
    let mut features = Vec::with_capacity((n + m) * g.feat_dim());
    features.extend_from_slice(g.features.data());
    features.extend_from_slice(meta.meta_features.data());
    let mut edges = g.edges.clone();
    let new_edges = bipartite_edges(n, m);
    let mut edge_weights = g.edge_weights.clone();
    edge_weights.extend(std::iter::repeat(1.0).take(new_edges.len()));
    edges.extend(new_edges);
    let node_labels = g.node_labels.as_ref().map(|labels| match labels {
        NodeLabels::Class(v) => {
            let mut out = v.clone();
            out.extend(std::iter::repeat(0).take(m));
            NodeLabels::Class(out)
        }
        NodeLabels::Value(v) => {
            let mut out = v.clone();
            out.extend(std::iter::repeat(0.0).take(m));
            NodeLabels::Value(out)
        }
    });
    let masks = g.masks.as_ref().map(|masks| Masks {
        train: extend_false(&masks.train, m),
        val: extend_false(&masks.val, m),
        test: extend_false(&masks.test, m),
    });
    Ok(Graph {
        num_nodes: n + m,
        directed: g.directed,
        features: Tensor::from_vec(n + m, g.feat_dim(), features)?,
        edges,
        edge_weights,
        node_labels,
        masks,
        graph_label: g.graph_label,
    })
}

fn extend_false(mask: &[bool], extra: usize) -> Vec<bool> {
    let mut out = mask.to_vec();
    out.extend(std::iter::repeat(false).take(extra));
    out
}

/// Every graph in the dataset augmented by the same meta graph.
pub fn augment_dataset(ds: &GraphDataset, meta: &MetaGraph) -> Result<GraphDataset> {
    let mut out = ds.clone();
    for g in out.graphs.iter_mut() {
        *g = attach_meta_graph(g, meta)?;
    }
    Ok(out)
}

fn graph_level_guard(ds: &GraphDataset) -> Result<()> {
    if ds.task_kind.is_node_level() {
        return Err(Error::Validation(
            "meta-graph padding requires an inductive graph-level task; \
             use edgslim or metafp for node-level tasks"
                .into(),
        ));
    }
    Ok(())
}

/// Optimized meta graph plus its per-epoch training-loss trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaResult {
    pub meta: MetaGraph,
    pub trajectory: Vec<f64>,
}

/// Gradient descent on the meta features over the training graphs, each
/// augmented by [`attach_meta_graph`]; the model is hash-checked before and
/// after.
pub fn optimize_meta_features(
    model: &FrozenModel,
    ds: &GraphDataset,
    meta: &MetaGraph,
    loss: &LossSpec,
    opt: &TrainOpts,
) -> Result<MetaResult> {
    model.check_integrity()?;
    graph_level_guard(ds)?;
    meta.validate()?;
    opt.validate()?;
    model.check_feat_dim(ds.feat_dim())?;
    if meta.num_meta_nodes() > 0 && meta.feat_dim() != ds.feat_dim() {
        return Err(Error::Validation(format!(
            "meta feature dim {} does not match dataset feature dim {}",
            meta.feat_dim(),
            ds.feat_dim()
        )));
    }
    let train = ds.split_indices(MaskKind::Train)?;
    if train.is_empty() {
        return Err(Error::Validation("train split is empty".into()));
    }
    let augmented: Vec<(Graph, Rc<Adjacency>)> = train
        .iter()
        .map(|&gi| {
            let ag = attach_meta_graph(&ds.graphs[gi], meta)?;
            let adj = Rc::new(model.build_adjacency(&ag));
            Ok((ag, adj))
        })
        .collect::<Result<_>>()?;
    let targets = metrics::graph_targets(ds, &train)?;

    let mut features = meta.meta_features.clone();
    let mut velocity = Tensor::zeros(features.rows(), features.cols());
    let mut trajectory = Vec::with_capacity(opt.epochs);
    let mut best = f64::INFINITY;
    let mut best_features = features.clone();
    let mut stall = 0usize;
    for epoch in 0..opt.epochs {
        let mut tape = Tape::new();
        let meta_var = tape.param(features.clone());
        let mut rows = Vec::with_capacity(augmented.len());
        for ((ag, adj), &gi) in augmented.iter().zip(&train) {
            let orig = tape.leaf(ds.graphs[gi].features.clone());
            let stacked = if meta.num_meta_nodes() == 0 {
                orig
            } else {
                tape.concat_rows(&[orig, meta_var])?
            };
            let weights = tape.leaf(Tensor::row_vector(ag.edge_weights.clone()));
            rows.push(model.forward_on_tape(
                &mut tape,
                stacked,
                weights,
                adj,
                &AggPlan::Fixed(model.aggregator()),
                Readout::MeanPool,
            )?);
        }
        let outputs = tape.concat_rows(&rows)?;
        let loss_var =
            metrics::sliced_training_loss(&mut tape, outputs, &targets, loss, model.out_dim())?;
        let loss_value = tape.value(loss_var).at(0, 0);
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite meta-graph loss {loss_value} at epoch {epoch}"
            )));
        }
        trajectory.push(loss_value);
        if best - loss_value >= EARLY_STOP_REL * best.abs().max(EARLY_STOP_REL) {
            best = loss_value;
            best_features = features.clone();
            stall = 0;
        } else {
            stall += 1;
            if stall >= EARLY_STOP_PATIENCE {
                break;
            }
        }
        tape.backward(loss_var)?;
        let grad = tape.grad_or_zeros(meta_var);
        for ((p, v), g) in features
            .data_mut()
            .iter_mut()
            .zip(velocity.data_mut())
            .zip(grad.data())
        {
            *v = MOMENTUM_BETA * *v + g;
            *p -= opt.lr * *v;
        }
    }
    model.check_integrity()?;
    Ok(MetaResult {
        meta: MetaGraph {
            meta_features: best_features,
        },
        trajectory,
    })
}

/// Inference on a held-out graph through the same augmentation path used in
/// training, with the loss's output slice applied.
pub fn infer_with_meta(
    model: &FrozenModel,
    g: &Graph,
    meta: &MetaGraph,
    loss: &LossSpec,
) -> Result<Tensor> {
    let augmented = attach_meta_graph(g, meta)?;
    let out = model.forward(&augmented, None)?;
    let (start, len) = loss.resolved_slice(model.out_dim())?;
    if (start, len) == (0, model.out_dim()) {
        return Ok(out);
    }
    let rows: Vec<Vec<f64>> = (0..out.rows())
        .map(|r| out.row(r)[start..start + len].to_vec())
        .collect();
    Tensor::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Split, TaskKind};
    use crate::metrics::LossKind;
    use crate::model::{Activation, Aggregator, Layer, LayerKind};

    fn ring_graph(label: f64) -> Graph {
        Graph {
            num_nodes: 3,
            directed: false,
            features: Tensor::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap(),
            edges: vec![(0, 1), (1, 0), (1, 2), (2, 1), (0, 2), (2, 0)],
            edge_weights: vec![1.0; 6],
            node_labels: None,
            masks: None,
            graph_label: Some(label),
        }
    }

    #[test]
    fn zero_meta_nodes_is_identity() {
        let g = ring_graph(0.0);
        let meta = MetaGraph {
            meta_features: Tensor::zeros(0, 2),
        };
        assert_eq!(attach_meta_graph(&g, &meta).unwrap(), g);
    }

    #[test]
    fn attachment_adds_full_bipartite_wiring() {
        let g = ring_graph(0.0);
        let meta = MetaGraph::new(10, 2, 0.01, 3).unwrap();
        let out = attach_meta_graph(&g, &meta).unwrap();
        assert_eq!(out.num_nodes, 13);
        let added = out.logical_edges().pairs.len() - g.logical_edges().pairs.len();
        assert_eq!(added, 30);
        out.validate().unwrap();
        for &(u, v) in &out.edges {
            assert!(
                !(u >= 3 && v >= 3),
                "meta nodes must not be wired to each other: ({u}, {v})"
            );
        }
    }

    #[test]
    fn original_subgraph_is_preserved_verbatim() {
        let mut g = ring_graph(1.0);
        g.node_labels = Some(NodeLabels::Class(vec![0, 1, 0]));
        g.masks = Some(Masks {
            train: vec![true, false, false],
            val: vec![false, true, false],
            test: vec![false, false, true],
        });
        let meta = MetaGraph::new(4, 2, 0.5, 9).unwrap();
        let out = attach_meta_graph(&g, &meta).unwrap();
        assert_eq!(&out.edges[..g.edges.len()], g.edges.as_slice());
        for i in 0..g.num_nodes {
            assert_eq!(out.features.row(i), g.features.row(i));
        }
        match out.node_labels.as_ref().unwrap() {
            NodeLabels::Class(labels) => assert_eq!(&labels[..3], &[0, 1, 0]),
            _ => panic!("labels changed kind"),
        }
        let masks = out.masks.as_ref().unwrap();
        assert!(!masks.train[3..].iter().any(|&b| b));
        assert!(!masks.val[3..].iter().any(|&b| b));
        assert!(!masks.test[3..].iter().any(|&b| b));
    }

    #[test]
    fn dim_mismatch_is_rejected() {
        let g = ring_graph(0.0);
        let meta = MetaGraph::new(2, 5, 0.01, 1).unwrap();
        assert!(attach_meta_graph(&g, &meta).is_err());
    }

    fn pooled_model() -> FrozenModel {
        FrozenModel::new(
            vec![Layer {
                kind: LayerKind::Dense,
                activation: Activation::None,
                weight: Tensor::from_vec(2, 1, vec![1.0, 2.0]).unwrap(),
                bias: Tensor::zeros(1, 1),
                attn: None,
            }],
            Aggregator::Mean,
            Readout::MeanPool,
            true,
        )
        .unwrap()
    }

    fn tiny_inductive() -> GraphDataset {
        GraphDataset {
            graphs: vec![ring_graph(3.0)],
            task_kind: TaskKind::GraphRegression,
            num_classes: None,
            split: Split {
                train: vec![0],
                val: vec![],
                test: vec![],
            },
        }
    }

    #[test]
    fn descent_on_quadratic_reachable_target() {
        let model = pooled_model();
        let ds = tiny_inductive();
        let meta = MetaGraph::new(2, 2, 0.01, 5).unwrap();
        let loss = LossSpec::new(LossKind::Mse);
        let opt = TrainOpts {
            lr: 0.1,
            epochs: 6,
            seed: 0,
        };
        let hash = model.param_hash().to_string();
        let result = optimize_meta_features(&model, &ds, &meta, &loss, &opt).unwrap();
        assert!(result.trajectory.len() >= 2);
        assert!(result.trajectory[1] < result.trajectory[0]);
        assert_eq!(model.param_hash(), hash);
    }

    #[test]
    fn zero_lr_leaves_meta_unchanged() {
        let model = pooled_model();
        let ds = tiny_inductive();
        let meta = MetaGraph::new(2, 2, 0.01, 5).unwrap();
        let result = optimize_meta_features(
            &model,
            &ds,
            &meta,
            &LossSpec::new(LossKind::Mse),
            &TrainOpts {
                lr: 0.0,
                epochs: 4,
                seed: 0,
            },
        )
        .unwrap();
        assert_eq!(result.meta.meta_features, meta.meta_features);
    }

    #[test]
    fn node_level_dataset_is_directed_to_other_methods() {
        let model = pooled_model();
        let mut g = ring_graph(0.0);
        g.graph_label = None;
        g.node_labels = Some(NodeLabels::Class(vec![0, 1, 0]));
        g.masks = Some(Masks {
            train: vec![true, true, false],
            val: vec![false; 3],
            test: vec![false, false, true],
        });
        let ds = GraphDataset {
            graphs: vec![g],
            task_kind: TaskKind::NodeClassification,
            num_classes: Some(2),
            split: Split::default(),
        };
        let meta = MetaGraph::new(2, 2, 0.01, 5).unwrap();
        let err = optimize_meta_features(
            &model,
            &ds,
            &meta,
            &LossSpec::new(LossKind::CrossEntropy),
            &TrainOpts::default(),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("edgslim") && msg.contains("metafp"), "{msg}");
    }

    #[test]
    fn training_and_inference_share_the_augmentation_path() {
        let model = pooled_model();
        let ds = tiny_inductive();
        let meta = MetaGraph::new(3, 2, 0.2, 8).unwrap();
        let loss = LossSpec::new(LossKind::Mse);
        let result = optimize_meta_features(
            &model,
            &ds,
            &meta,
            &loss,
            &TrainOpts {
                lr: 0.05,
                epochs: 3,
                seed: 0,
            },
        )
        .unwrap();
        let g = &ds.graphs[0];
        let direct = infer_with_meta(&model, g, &result.meta, &loss).unwrap();
        let augmented = attach_meta_graph(g, &result.meta).unwrap();
        let via_forward = model.forward(&augmented, None).unwrap();
        assert_eq!(direct, via_forward);

        let aug_ds = augment_dataset(&ds, &result.meta).unwrap();
        assert_eq!(aug_ds.graphs[0], augmented);
    }

    #[test]
    fn meta_graph_round_trips_through_json() {
        let meta = MetaGraph::new(4, 3, 0.3, 12).unwrap();
        let back = MetaGraph::from_json(&meta.to_json()).unwrap();
        assert_eq!(meta, back);
    }
}
