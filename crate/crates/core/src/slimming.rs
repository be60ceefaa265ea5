//! Edge-Slimming: reprogramming by deleting harmful downstream edges.
//!
//! Edge weights are relaxed to real-valued variables, the training loss is
//! differentiated with respect to each logical edge, and edges whose
//! gradients are strictly positive are deleted in descending-gradient order.
//! The input graph is never mutated; a slimmed copy plus the executed plan
//! come back.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::rc::Rc;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{self, LossSpec};
use crate::model::{AggPlan, FrozenModel, Readout};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// One scheduled deletion; `edge_id` indexes the logical-edge list of the
/// original graph, `iteration` counts gradient recomputations from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SlimEntry {
    pub edge_id: usize,
    pub source: usize,
    pub target: usize,
    pub gradient: f64,
    pub iteration: usize,
}

/// The executed deletion schedule plus the per-iteration objective trace
/// (sum of absolute logical-edge gradients at each recomputation).
#[derive(Debug, Clone, PartialEq)]
pub struct SlimPlan {
    pub entries: Vec<SlimEntry>,
    pub recompute_every: usize,
    pub max_deletions: Option<usize>,
    pub objective_trace: Vec<f64>,
}

impl SlimPlan {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("edge_id,source,target,gradient,iteration\n");
        for e in &self.entries {
            writeln!(
                out,
                "{},{},{},{},{}",
                e.edge_id, e.source, e.target, e.gradient, e.iteration
            )
            .expect("string write");
        }
        out
    }

    pub fn to_json(&self) -> Value {
        json!({
            "entries": self.entries.iter().map(|e| json!({
                "edge_id": e.edge_id,
                "source": e.source,
                "target": e.target,
                "gradient": e.gradient,
                "iteration": e.iteration,
            })).collect::<Vec<_>>(),
            "recompute_every": self.recompute_every,
            "max_deletions": self.max_deletions.map_or(Value::Null, |m| json!(m)),
            "objective_trace": self.objective_trace,
        })
    }

    pub fn from_json(value: &Value) -> Result<SlimPlan> {
        let usize_of = |v: &Value, name: &str| -> Result<usize> {
            v.get(name)
                .and_then(Value::as_u64)
                .map(|n| n as usize)
                .ok_or_else(|| Error::Validation(format!("plan entry is missing {name}")))
        };
        let raw = value
            .get("entries")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Validation("plan is missing its entries array".into()))?;
        let mut entries = Vec::with_capacity(raw.len());
        for item in raw {
            entries.push(SlimEntry {
                edge_id: usize_of(item, "edge_id")?,
                source: usize_of(item, "source")?,
                target: usize_of(item, "target")?,
                gradient: item
                    .get("gradient")
                    .and_then(Value::as_f64)
                    .ok_or_else(|| Error::Validation("plan entry is missing gradient".into()))?,
                iteration: usize_of(item, "iteration")?,
            });
        }
        let recompute_every = value
            .get("recompute_every")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Validation("plan is missing recompute_every".into()))?
            as usize;
        let max_deletions = match value.get("max_deletions") {
            None | Some(Value::Null) => None,
            Some(v) => Some(v.as_u64().ok_or_else(|| {
                Error::Validation("plan max_deletions must be an unsigned integer".into())
            })? as usize),
        };
        let objective_trace = match value.get("objective_trace") {
            None => Vec::new(),
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| Error::Validation(format!("plan objective_trace: {e}")))?,
        };
        Ok(SlimPlan {
            entries,
            recompute_every,
            max_deletions,
            objective_trace,
        })
    }
}

fn transductive_guard(g: &Graph) -> Result<()> {
    if g.masks.is_none() || g.node_labels.is_none() {
        return Err(Error::Validation(
            "edge slimming requires a transductive node-level task with labels and masks; \
             graph-level datasets are not supported"
                .into(),
        ));
    }
    Ok(())
}

fn canonical_pair(g: &Graph, u: usize, v: usize) -> (usize, usize) {
    if g.directed || u <= v {
        (u, v)
    } else {
        (v, u)
    }
}

/// Training loss of the frozen model on the graph's train mask, as a plain
/// number.
pub fn training_loss_value(model: &FrozenModel, g: &Graph, loss: &LossSpec) -> Result<f64> {
    transductive_guard(g)?;
    let mut tape = Tape::new();
    let feats = tape.leaf(g.features.clone());
    let weights = tape.leaf(Tensor::row_vector(g.edge_weights.clone()));
    let adj = Rc::new(model.build_adjacency(g));
    let out = model.forward_on_tape(
        &mut tape,
        feats,
        weights,
        &adj,
        &AggPlan::Fixed(model.aggregator()),
        Readout::None,
    )?;
    let targets = metrics::node_train_targets(g)?;
    let loss_var = metrics::sliced_training_loss(&mut tape, out, &targets, loss, model.out_dim())?;
    Ok(tape.value(loss_var).at(0, 0))
}

/// d(training loss)/d(edge weight) per logical edge; an undirected pair's
/// two directions are summed into one gradient.
pub fn edge_gradients(model: &FrozenModel, g: &Graph, loss: &LossSpec) -> Result<Vec<f64>> {
    model.check_integrity()?;
    transductive_guard(g)?;
    let mut tape = Tape::new();
    let feats = tape.leaf(g.features.clone());
    let weights = tape.param(Tensor::row_vector(g.edge_weights.clone()));
    let adj = Rc::new(model.build_adjacency(g));
    let out = model.forward_on_tape(
        &mut tape,
        feats,
        weights,
        &adj,
        &AggPlan::Fixed(model.aggregator()),
        Readout::None,
    )?;
    let targets = metrics::node_train_targets(g)?;
    let loss_var = metrics::sliced_training_loss(&mut tape, out, &targets, loss, model.out_dim())?;
    tape.backward(loss_var)?;
    let grad = tape.grad_or_zeros(weights);
    let logical = g.logical_edges();
    let result = logical
        .directed_of_logical
        .iter()
        .map(|dirs| dirs.iter().map(|&e| grad.at(0, e)).sum())
        .collect();
    model.check_integrity()?;
    Ok(result)
}

fn remove_pairs(g: &mut Graph, doomed: &[(usize, usize)]) {
    let doomed: std::collections::HashSet<(usize, usize)> = doomed.iter().copied().collect();
    let mut edges = Vec::with_capacity(g.edges.len());
    let mut weights = Vec::with_capacity(g.edge_weights.len());
    for (i, &(u, v)) in g.edges.iter().enumerate() {
        if !doomed.contains(&canonical_pair(g, u, v)) {
            edges.push((u, v));
            weights.push(g.edge_weights[i]);
        }
    }
    g.edges = edges;
    g.edge_weights = weights;
}

/// Iteratively deletes positive-gradient edges until none remain or
/// `max_deletions` is hit. Returns the slimmed copy and the executed plan.
pub fn slim_edges(
    model: &FrozenModel,
    g: &Graph,
    loss: &LossSpec,
    recompute_every: usize,
    max_deletions: Option<usize>,
) -> Result<(Graph, SlimPlan)> {
    if recompute_every == 0 {
        return Err(Error::Validation("recompute_every must be at least 1".into()));
    }
    model.check_integrity()?;
    let original_ids: HashMap<(usize, usize), usize> = g
        .logical_edges()
        .pairs
        .iter()
        .enumerate()
        .map(|(i, &pair)| (pair, i))
        .collect();
    let mut current = g.clone();
    let mut plan = SlimPlan {
        entries: Vec::new(),
        recompute_every,
        max_deletions,
        objective_trace: Vec::new(),
    };
    let mut iteration = 0;
    loop {
        iteration += 1;
        let grads = edge_gradients(model, &current, loss)?;
        plan.objective_trace.push(grads.iter().map(|v| v.abs()).sum());
        let pairs = current.logical_edges().pairs;
        let mut positive: Vec<usize> = (0..grads.len()).filter(|&i| grads[i] > 0.0).collect();
        if positive.is_empty() {
            break;
        }
        positive.sort_by(|&a, &b| {
            grads[b]
                .partial_cmp(&grads[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let budget = match max_deletions {
            Some(max) => max.saturating_sub(plan.entries.len()),
            None => usize::MAX,
        };
        if budget == 0 {
            break;
        }
        let batch: Vec<usize> = positive.into_iter().take(recompute_every.min(budget)).collect();
        let doomed: Vec<(usize, usize)> = batch.iter().map(|&i| pairs[i]).collect();
        for &i in &batch {
            let (source, target) = pairs[i];
            plan.entries.push(SlimEntry {
                edge_id: original_ids[&pairs[i]],
                source,
                target,
                gradient: grads[i],
                iteration,
            });
        }
        remove_pairs(&mut current, &doomed);
        if matches!(max_deletions, Some(max) if plan.entries.len() >= max) {
            break;
        }
    }
    model.check_integrity()?;
    Ok((current, plan))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Masks, NodeLabels};
    use crate::metrics::LossKind;
    use crate::model::{Activation, Aggregator, Layer, LayerKind};

    /// Two opposite-class nodes joined by one edge; mixing neighbors hurts,
    /// so the edge gradient is provably positive.
    fn antagonistic_pair() -> Graph {
        Graph {
            num_nodes: 2,
            directed: false,
            features: Tensor::from_vec(2, 1, vec![1.0, -1.0]).unwrap(),
            edges: vec![(0, 1), (1, 0)],
            edge_weights: vec![1.0, 1.0],
            node_labels: Some(NodeLabels::Class(vec![0, 1])),
            masks: Some(Masks {
                train: vec![true, true],
                val: vec![false, false],
                test: vec![false, false],
            }),
            graph_label: None,
        }
    }

    fn contrast_model() -> FrozenModel {
        FrozenModel::new(
            vec![
                Layer {
                    kind: LayerKind::MessagePassing,
                    activation: Activation::None,
                    weight: Tensor::from_vec(1, 1, vec![1.0]).unwrap(),
                    bias: Tensor::zeros(1, 1),
                    attn: Some(Tensor::zeros(1, 2)),
                },
                Layer {
                    kind: LayerKind::Dense,
                    activation: Activation::None,
                    weight: Tensor::from_vec(1, 2, vec![1.0, -1.0]).unwrap(),
                    bias: Tensor::zeros(1, 2),
                    attn: None,
                },
            ],
            Aggregator::Mean,
            Readout::None,
            true,
        )
        .unwrap()
    }

    fn ce() -> LossSpec {
        LossSpec::new(LossKind::CrossEntropy)
    }

    #[test]
    fn gradient_matches_finite_difference_on_single_edge() {
        let model = contrast_model();
        let g = antagonistic_pair();
        let grads = edge_gradients(&model, &g, &ce()).unwrap();
        assert_eq!(grads.len(), 1, "symmetric pair counts once");
        assert!(grads[0] > 0.0);

        let h = 1e-5;
        let mut plus = g.clone();
        plus.edge_weights = vec![1.0 + h, 1.0 + h];
        let mut minus = g.clone();
        minus.edge_weights = vec![1.0 - h, 1.0 - h];
        let fd = (training_loss_value(&model, &plus, &ce()).unwrap()
            - training_loss_value(&model, &minus, &ce()).unwrap())
            / (2.0 * h);
        assert!(
            (grads[0] - fd).abs() < 1e-6,
            "analytic {} vs finite difference {fd}",
            grads[0]
        );
    }

    #[test]
    fn neighbor_blind_model_has_zero_gradients() {
        let model = FrozenModel::new(
            vec![Layer {
                kind: LayerKind::MessagePassing,
                activation: Activation::None,
                weight: Tensor::zeros(1, 2),
                bias: Tensor::from_vec(1, 2, vec![0.3, -0.3]).unwrap(),
                attn: Some(Tensor::zeros(1, 2)),
            }],
            Aggregator::Mean,
            Readout::None,
            true,
        )
        .unwrap();
        let grads = edge_gradients(&model, &antagonistic_pair(), &ce()).unwrap();
        assert_eq!(grads, vec![0.0]);
    }

    #[test]
    fn zero_gradients_mean_zero_deletions() {
        let model = FrozenModel::new(
            vec![Layer {
                kind: LayerKind::MessagePassing,
                activation: Activation::None,
                weight: Tensor::zeros(1, 2),
                bias: Tensor::zeros(1, 2),
                attn: Some(Tensor::zeros(1, 2)),
            }],
            Aggregator::Mean,
            Readout::None,
            true,
        )
        .unwrap();
        let g = antagonistic_pair();
        let (slimmed, plan) = slim_edges(&model, &g, &ce(), 1, None).unwrap();
        assert!(plan.entries.is_empty());
        assert_eq!(slimmed, g);
        assert_eq!(plan.objective_trace.len(), 1);
    }

    #[test]
    fn slimming_deletes_the_harmful_edge_and_lowers_loss() {
        let model = contrast_model();
        let g = antagonistic_pair();
        let before = training_loss_value(&model, &g, &ce()).unwrap();
        let (slimmed, plan) = slim_edges(&model, &g, &ce(), 1, None).unwrap();
        assert_eq!(plan.entries.len(), 1);
        assert_eq!(
            (plan.entries[0].source, plan.entries[0].target),
            (0, 1)
        );
        assert!(slimmed.edges.is_empty());
        assert_eq!(g.edges.len(), 2, "input graph is untouched");
        let after = training_loss_value(&model, &slimmed, &ce()).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    /// Two antagonistic pairs with different feature scales; the stronger
    /// pair's edge must be scheduled first and agree with the brute-force
    /// finite-difference ranking.
    fn double_pair() -> Graph {
        Graph {
            num_nodes: 4,
            directed: false,
            features: Tensor::from_vec(4, 1, vec![0.4, -0.4, 1.0, -1.0]).unwrap(),
            edges: vec![(0, 1), (1, 0), (2, 3), (3, 2)],
            edge_weights: vec![1.0; 4],
            node_labels: Some(NodeLabels::Class(vec![0, 1, 0, 1])),
            masks: Some(Masks {
                train: vec![true; 4],
                val: vec![false; 4],
                test: vec![false; 4],
            }),
            graph_label: None,
        }
    }

    #[test]
    fn first_deletion_matches_brute_force_ranking() {
        let model = contrast_model();
        let g = double_pair();
        let grads = edge_gradients(&model, &g, &ce()).unwrap();
        let pairs = g.logical_edges().pairs;
        assert_eq!(pairs.len(), 2);

        let h = 1e-4;
        let mut fd = Vec::new();
        for &(u, v) in &pairs {
            let perturb = |w: f64| {
                let mut pg = g.clone();
                for (i, &(a, b)) in g.edges.iter().enumerate() {
                    if (a.min(b), a.max(b)) == (u, v) {
                        pg.edge_weights[i] = w;
                    }
                }
                training_loss_value(&model, &pg, &ce()).unwrap()
            };
            fd.push((perturb(1.0 + h) - perturb(1.0 - h)) / (2.0 * h));
        }
        for (a, n) in grads.iter().zip(&fd) {
            assert!((a - n).abs() < 1e-6, "analytic {a} vs fd {n}");
        }
        let fd_best = pairs[if fd[0] >= fd[1] { 0 } else { 1 }];

        let (slimmed, plan) = slim_edges(&model, &g, &ce(), 1, Some(1)).unwrap();
        assert_eq!(plan.entries.len(), 1);
        assert_eq!(
            (plan.entries[0].source, plan.entries[0].target),
            fd_best
        );
        assert_eq!(slimmed.edges.len(), 2);
        assert!(plan.entries[0].gradient > 0.0);
    }

    #[test]
    fn plan_csv_has_header_and_stable_ids() {
        let model = contrast_model();
        let (_, plan) = slim_edges(&model, &double_pair(), &ce(), 2, None).unwrap();
        let csv = plan.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "edge_id,source,target,gradient,iteration"
        );
        let body: Vec<&str> = lines.collect();
        assert_eq!(body.len(), plan.entries.len());
        for (line, entry) in body.iter().zip(&plan.entries) {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields[0], entry.edge_id.to_string());
            assert_eq!(fields[4], entry.iteration.to_string());
            let parsed: f64 = fields[3].parse().unwrap();
            assert_eq!(parsed, entry.gradient, "gradient must round-trip");
        }
        assert!(plan.entries.len() == 2, "both harmful edges deleted in one pass");
        assert!(plan.entries[0].gradient >= plan.entries[1].gradient);
    }

    #[test]
    fn recompute_every_zero_is_rejected() {
        let model = contrast_model();
        let err = slim_edges(&model, &antagonistic_pair(), &ce(), 0, None).unwrap_err();
        assert!(err.to_string().contains("recompute_every"));
    }

    #[test]
    fn graph_level_input_is_rejected() {
        let model = contrast_model();
        let g = Graph {
            num_nodes: 1,
            directed: false,
            features: Tensor::zeros(1, 1),
            edges: vec![],
            edge_weights: vec![],
            node_labels: None,
            masks: None,
            graph_label: Some(1.0),
        };
        let err = edge_gradients(&model, &g, &ce()).unwrap_err();
        assert!(err.to_string().contains("transductive"), "{err}");
    }
}
