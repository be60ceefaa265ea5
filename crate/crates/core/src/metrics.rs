//! Loss construction and evaluation metrics.
//!
//! Tape-level loss builders (`masked_cross_entropy`, `masked_mse`,
//! `masked_mae`) are shared by pretraining and every reprogramming
//! optimizer, so the loss a method minimizes is bit-identical to the loss
//! reported by [`evaluate`].

use crate::dataset::{GraphDataset, TaskKind};
use crate::error::{Error, Result};
use crate::graph::{MaskKind, NodeLabels};
use crate::model::{Aggregator, FrozenModel};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Mse,
    Mae,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross-entropy",
            LossKind::Mse => "mse",
            LossKind::Mae => "mae",
        }
    }

    pub fn parse(s: &str) -> Result<LossKind> {
        match s {
            "cross-entropy" => Ok(LossKind::CrossEntropy),
            "mse" => Ok(LossKind::Mse),
            "mae" => Ok(LossKind::Mae),
            other => Err(Error::Validation(format!(
                "unknown loss kind `{other}`; expected cross-entropy, mse, or mae"
            ))),
        }
    }
}

/// Which loss to score and, optionally, which contiguous block of model
/// output columns carries the downstream task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    pub output_slice: Option<(usize, usize)>,
}

impl LossSpec {
    pub fn new(kind: LossKind) -> LossSpec {
        LossSpec {
            kind,
            output_slice: None,
        }
    }

    /// `(start, len)` within a model of width `out_dim`; `None` means the
    /// full output.
    pub fn resolved_slice(&self, out_dim: usize) -> Result<(usize, usize)> {
        match self.output_slice {
            None => Ok((0, out_dim)),
            Some((start, len)) => {
                if len == 0 {
                    return Err(Error::Validation(
                        "output_slice length must be at least 1".into(),
                    ));
                }
                if start + len > out_dim {
                    return Err(Error::Validation(format!(
                        "output_slice [{start}, {}) exceeds model out_dim {out_dim}",
                        start + len
                    )));
                }
                Ok((start, len))
            }
        }
    }
}

/// Evaluation scores; `loss` is always present, task-appropriate metrics
/// fill in the rest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub roc_auc: Option<f64>,
}

impl Metrics {
    /// Present metrics in a fixed order, for CSV emission.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![("loss", self.loss)];
        if let Some(v) = self.accuracy {
            out.push(("accuracy", v));
        }
        if let Some(v) = self.mae {
            out.push(("mae", v));
        }
        if let Some(v) = self.rmse {
            out.push(("rmse", v));
        }
        if let Some(v) = self.roc_auc {
            out.push(("roc_auc", v));
        }
        out
    }
}

// -------------------------------------------------------- loss builders --

/// Rows of a prediction matrix paired with their supervision targets.
#[derive(Debug, Clone, PartialEq)]
pub enum RowTargets {
    Classes(Vec<(usize, usize)>),
    Values(Vec<(usize, f64)>),
}

impl RowTargets {
    pub fn len(&self) -> usize {
        match self {
            RowTargets::Classes(v) => v.len(),
            RowTargets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Training-mask targets of a transductive graph.
pub fn node_train_targets(g: &crate::graph::Graph) -> Result<RowTargets> {
    let train = g.mask_indices(MaskKind::Train)?;
    match g.node_labels.as_ref() {
        Some(NodeLabels::Class(labels)) => Ok(RowTargets::Classes(
            train.iter().map(|&i| (i, labels[i] as usize)).collect(),
        )),
        Some(NodeLabels::Value(values)) => Ok(RowTargets::Values(
            train.iter().map(|&i| (i, values[i])).collect(),
        )),
        None => Err(Error::Validation("graph has no node labels".into())),
    }
}

/// Targets for stacked per-graph outputs, row r holding graph `indices[r]`.
pub fn graph_targets(ds: &GraphDataset, indices: &[usize]) -> Result<RowTargets> {
    let mut labels = Vec::with_capacity(indices.len());
    for &gi in indices {
        labels.push(ds.graphs[gi].graph_label.ok_or_else(|| {
            Error::Validation(format!("graphs[{gi}] has no graph_label"))
        })?);
    }
    if ds.task_kind == TaskKind::GraphClassification {
        Ok(RowTargets::Classes(
            labels
                .iter()
                .enumerate()
                .map(|(r, &l)| (r, l as usize))
                .collect(),
        ))
    } else {
        Ok(RowTargets::Values(
            labels.iter().enumerate().map(|(r, &l)| (r, l)).collect(),
        ))
    }
}

/// Applies the loss's output slice to `outputs`, then builds the loss named
/// by `spec.kind` against the targets.
pub fn sliced_training_loss(
    tape: &mut Tape,
    outputs: Var,
    targets: &RowTargets,
    spec: &LossSpec,
    out_dim: usize,
) -> Result<Var> {
    let (start, len) = spec.resolved_slice(out_dim)?;
    let sliced = if (start, len) == (0, out_dim) {
        outputs
    } else {
        tape.slice_cols(outputs, start, len)?
    };
    match (targets, spec.kind) {
        (RowTargets::Classes(picks), LossKind::CrossEntropy) => {
            masked_cross_entropy(tape, sliced, picks)
        }
        (RowTargets::Values(values), LossKind::Mse) => masked_mse(tape, sliced, values),
        (RowTargets::Values(values), LossKind::Mae) => masked_mae(tape, sliced, values),
        (RowTargets::Classes(_), kind) => Err(Error::Validation(format!(
            "{} loss does not apply to a classification task",
            kind.as_str()
        ))),
        (RowTargets::Values(_), LossKind::CrossEntropy) => Err(Error::Validation(
            "cross-entropy loss does not apply to a regression task".into(),
        )),
    }
}

/// Mean negative log-likelihood over `picks = (row, class)` pairs.
pub fn masked_cross_entropy(tape: &mut Tape, logits: Var, picks: &[(usize, usize)]) -> Result<Var> {
    if picks.is_empty() {
        return Err(Error::Validation(
            "cross-entropy needs at least one labeled row".into(),
        ));
    }
    let cols = tape.value(logits).cols();
    for &(_, class) in picks {
        if class >= cols {
            return Err(Error::Validation(format!(
                "label {class} does not fit in output of width {cols}"
            )));
        }
    }
    let logp = tape.log_softmax_rows(logits);
    let mean = tape.pick_mean(logp, picks)?;
    Ok(tape.scale(mean, -1.0))
}

fn gather_residual(tape: &mut Tape, preds: Var, targets: &[(usize, f64)]) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::Validation(
            "regression loss needs at least one labeled row".into(),
        ));
    }
    if tape.value(preds).cols() != 1 {
        return Err(Error::Validation(format!(
            "regression loss needs single-column predictions, got width {}",
            tape.value(preds).cols()
        )));
    }
    let rows: Vec<usize> = targets.iter().map(|&(r, _)| r).collect();
    let picked = tape.gather_rows(preds, &rows)?;
    let target_col: Vec<f64> = targets.iter().map(|&(_, v)| v).collect();
    let t = tape.leaf(Tensor::from_vec(targets.len(), 1, target_col)?);
    let neg_t = tape.scale(t, -1.0);
    tape.add(picked, neg_t)
}

/// Mean squared error over `targets = (row, value)` pairs.
pub fn masked_mse(tape: &mut Tape, preds: Var, targets: &[(usize, f64)]) -> Result<Var> {
    let diff = gather_residual(tape, preds, targets)?;
    let sq = tape.elem_mul(diff, diff)?;
    tape.mean_all(sq)
}

/// Mean absolute error over `targets = (row, value)` pairs.
pub fn masked_mae(tape: &mut Tape, preds: Var, targets: &[(usize, f64)]) -> Result<Var> {
    let diff = gather_residual(tape, preds, targets)?;
    let abs = tape.abs(diff);
    tape.mean_all(abs)
}

// --------------------------------------------------------- pure metrics --

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    debug_assert_eq!(preds.len(), labels.len());
    if preds.is_empty() {
        return f64::NAN;
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / preds.len() as f64
}

pub fn mae(preds: &[f64], targets: &[f64]) -> f64 {
    debug_assert_eq!(preds.len(), targets.len());
    if preds.is_empty() {
        return f64::NAN;
    }
    preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / preds.len() as f64
}

pub fn rmse(preds: &[f64], targets: &[f64]) -> f64 {
    debug_assert_eq!(preds.len(), targets.len());
    if preds.is_empty() {
        return f64::NAN;
    }
    let mse = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / preds.len() as f64;
    mse.sqrt()
}

/// Mann-Whitney AUC with average ranks on ties; `None` when only one class
/// is present.
pub fn roc_auc(scores: &[f64], positives: &[bool]) -> Option<f64> {
    debug_assert_eq!(scores.len(), positives.len());
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg_rank;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks
        .iter()
        .zip(positives)
        .filter(|(_, &p)| p)
        .map(|(r, _)| r)
        .sum();
    Some((rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos as f64 * n_neg as f64))
}

/// Mean and population standard deviation.
pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

// ------------------------------------------------------------- evaluate --

enum EvalTargets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

fn gather_outputs(
    model: &FrozenModel,
    ds: &GraphDataset,
    mask: MaskKind,
    override_aggregator: Option<Aggregator>,
) -> Result<(Tensor, EvalTargets)> {
    if ds.task_kind.is_node_level() {
        let g = ds.sole_graph()?;
        let idx = g.mask_indices(mask)?;
        let out = model.forward(g, override_aggregator)?;
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| out.row(i).to_vec()).collect();
        let targets = match g.node_labels.as_ref() {
            Some(NodeLabels::Class(labels)) => {
                EvalTargets::Classes(idx.iter().map(|&i| labels[i] as usize).collect())
            }
            Some(NodeLabels::Value(values)) => {
                EvalTargets::Values(idx.iter().map(|&i| values[i]).collect())
            }
            None => return Err(Error::Validation("graph has no node labels".into())),
        };
        Ok((Tensor::from_rows(&rows)?, targets))
    } else {
        let idx = ds.split_indices(mask)?;
        if idx.is_empty() {
            return Err(Error::Validation(format!(
                "{} split is empty",
                mask.as_str()
            )));
        }
        let mut rows = Vec::with_capacity(idx.len());
        let mut labels = Vec::with_capacity(idx.len());
        for &gi in &idx {
            let g = &ds.graphs[gi];
            let out = model.forward(g, override_aggregator)?;
            rows.push(out.row(0).to_vec());
            labels.push(g.graph_label.ok_or_else(|| {
                Error::Validation(format!("graphs[{gi}] has no graph_label"))
            })?);
        }
        let targets = if ds.task_kind == TaskKind::GraphClassification {
            EvalTargets::Classes(labels.iter().map(|&l| l as usize).collect())
        } else {
            EvalTargets::Values(labels)
        };
        Ok((Tensor::from_rows(&rows)?, targets))
    }
}

fn slice_columns(t: &Tensor, start: usize, len: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..t.rows())
        .map(|r| t.row(r)[start..start + len].to_vec())
        .collect();
    Tensor::from_rows(&rows).expect("uniform rows")
}

fn softmax_prob(row: &[f64], class: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
    (row[class] - max).exp() / denom
}

/// Scores the frozen model on one mask/split of the dataset.
pub fn evaluate(
    model: &FrozenModel,
    ds: &GraphDataset,
    spec: &LossSpec,
    mask: MaskKind,
    override_aggregator: Option<Aggregator>,
) -> Result<Metrics> {
    let (start, len) = spec.resolved_slice(model.out_dim())?;
    let (outputs, targets) = gather_outputs(model, ds, mask, override_aggregator)?;
    let sliced = slice_columns(&outputs, start, len);
    match targets {
        EvalTargets::Classes(labels) => {
            if spec.kind != LossKind::CrossEntropy {
                return Err(Error::Validation(format!(
                    "{} loss does not apply to a classification task",
                    spec.kind.as_str()
                )));
            }
            for &label in &labels {
                if label >= len {
                    return Err(Error::Validation(format!(
                        "label {label} does not fit in sliced output of width {len}"
                    )));
                }
            }
            let mut tape = Tape::new();
            let logits = tape.leaf(sliced.clone());
            let picks: Vec<(usize, usize)> =
                labels.iter().enumerate().map(|(r, &c)| (r, c)).collect();
            let loss_var = masked_cross_entropy(&mut tape, logits, &picks)?;
            let loss = tape.value(loss_var).at(0, 0);
            let preds: Vec<usize> = (0..sliced.rows()).map(|r| argmax(sliced.row(r))).collect();
            let acc = accuracy(&preds, &labels);
            let auc = if len == 2 {
                let scores: Vec<f64> = (0..sliced.rows())
                    .map(|r| softmax_prob(sliced.row(r), 1))
                    .collect();
                let positives: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
                roc_auc(&scores, &positives)
            } else {
                None
            };
            Ok(Metrics {
                loss,
                accuracy: Some(acc),
                mae: None,
                rmse: None,
                roc_auc: auc,
            })
        }
        EvalTargets::Values(values) => {
            if spec.kind == LossKind::CrossEntropy {
                return Err(Error::Validation(
                    "cross-entropy loss does not apply to a regression task".into(),
                ));
            }
            if len != 1 {
                return Err(Error::Validation(format!(
                    "regression expects a single output column, got slice width {len}"
                )));
            }
            let mut tape = Tape::new();
            let preds_var = tape.leaf(sliced.clone());
            let targets_spec: Vec<(usize, f64)> =
                values.iter().enumerate().map(|(r, &v)| (r, v)).collect();
            let loss_var = match spec.kind {
                LossKind::Mse => masked_mse(&mut tape, preds_var, &targets_spec)?,
                LossKind::Mae => masked_mae(&mut tape, preds_var, &targets_spec)?,
                LossKind::CrossEntropy => unreachable!("rejected above"),
            };
            let loss = tape.value(loss_var).at(0, 0);
            let preds: Vec<f64> = (0..sliced.rows()).map(|r| sliced.at(r, 0)).collect();
            Ok(Metrics {
                loss,
                accuracy: None,
                mae: Some(mae(&preds, &values)),
                rmse: Some(rmse(&preds, &values)),
                roc_auc: None,
            })
        }
    }
}

/// Evaluates every candidate aggregator as a forward-time override on the
/// test mask, leaving the model untouched.
pub fn aggregator_sweep(
    model: &FrozenModel,
    ds: &GraphDataset,
    spec: &LossSpec,
    candidates: &[Aggregator],
) -> Result<Vec<(Aggregator, Metrics)>> {
    if candidates.is_empty() {
        return Err(Error::Validation(
            "aggregator sweep needs at least one candidate".into(),
        ));
    }
    model.check_integrity()?;
    let mut results = Vec::with_capacity(candidates.len());
    for &candidate in candidates {
        let metrics = evaluate(model, ds, spec, MaskKind::Test, Some(candidate))?;
        results.push((candidate, metrics));
    }
    model.check_integrity()?;
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Graph, Masks};
    use crate::model::{pretrain, Activation, ArchConfig, Layer, LayerKind, TrainOpts};
    use crate::synth::{generate_synthetic, SynthTaskSpec};

    #[test]
    fn accuracy_counts_matches() {
        assert_eq!(accuracy(&[0, 1, 2, 1], &[0, 1, 1, 1]), 0.75);
    }

    #[test]
    fn constant_predictor_rmse_is_population_std() {
        let targets = [1.0, 4.0, -2.0, 7.5, 0.25];
        let (mean, std) = mean_and_std(&targets);
        let preds = vec![mean; targets.len()];
        let naive_std = {
            let m = targets.iter().sum::<f64>() / targets.len() as f64;
            (targets.iter().map(|t| (t - m) * (t - m)).sum::<f64>() / targets.len() as f64).sqrt()
        };
        assert!((rmse(&preds, &targets) - std).abs() < 1e-12);
        assert!((std - naive_std).abs() < 1e-12);
    }

    #[test]
    fn roc_auc_handles_separation_and_ties() {
        let perfect = roc_auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert!((perfect - 1.0).abs() < 1e-12);
        let reversed = roc_auc(&[0.1, 0.2, 0.8, 0.9], &[true, true, false, false]).unwrap();
        assert!(reversed.abs() < 1e-12);
        let tied = roc_auc(&[0.5, 0.5], &[true, false]).unwrap();
        assert!((tied - 0.5).abs() < 1e-12);
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_none());
    }

    #[test]
    fn masked_losses_match_hand_formulas() {
        let mut tape = Tape::new();
        let preds = tape.leaf(Tensor::from_vec(3, 1, vec![1.0, -2.0, 0.5]).unwrap());
        let targets = [(0, 0.0), (1, 1.0), (2, 0.5)];
        let mse = masked_mse(&mut tape, preds, &targets).unwrap();
        assert!((tape.value(mse).at(0, 0) - (1.0 + 9.0 + 0.0) / 3.0).abs() < 1e-12);
        let mae_var = masked_mae(&mut tape, preds, &targets).unwrap();
        assert!((tape.value(mae_var).at(0, 0) - (1.0 + 3.0 + 0.0) / 3.0).abs() < 1e-12);
    }

    fn regression_fixture() -> (FrozenModel, GraphDataset) {
        let values = vec![1.0, -1.0, 3.0, 0.5];
        let g = Graph {
            num_nodes: 4,
            directed: false,
            features: Tensor::from_vec(4, 2, vec![0.1; 8]).unwrap(),
            edges: vec![],
            edge_weights: vec![],
            node_labels: Some(NodeLabels::Value(values)),
            masks: Some(Masks {
                train: vec![true, true, false, false],
                val: vec![false, false, false, false],
                test: vec![false, false, true, true],
            }),
            graph_label: None,
        };
        let ds = GraphDataset {
            graphs: vec![g],
            task_kind: TaskKind::NodeRegression,
            num_classes: None,
            split: Default::default(),
        };
        let model = FrozenModel::new(
            vec![Layer {
                kind: LayerKind::Dense,
                activation: Activation::None,
                weight: Tensor::zeros(2, 1),
                bias: Tensor::zeros(1, 1),
                attn: None,
            }],
            Aggregator::Mean,
            crate::model::Readout::None,
            true,
        )
        .unwrap();
        (model, ds)
    }

    #[test]
    fn zero_model_regression_metrics_have_closed_form() {
        let (model, ds) = regression_fixture();
        let spec = LossSpec::new(LossKind::Mse);
        let m = evaluate(&model, &ds, &spec, MaskKind::Test, None).unwrap();
        assert!((m.loss - (9.0 + 0.25) / 2.0).abs() < 1e-12);
        assert!((m.mae.unwrap() - (3.0 + 0.5) / 2.0).abs() < 1e-12);
        assert!((m.rmse.unwrap() - ((9.0 + 0.25) / 2.0f64).sqrt()).abs() < 1e-12);
        assert!(m.accuracy.is_none());

        let mae_spec = LossSpec::new(LossKind::Mae);
        let m2 = evaluate(&model, &ds, &mae_spec, MaskKind::Test, None).unwrap();
        assert!((m2.loss - m.mae.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let (model, ds) = regression_fixture();
        let spec = LossSpec::new(LossKind::Mse);
        let err = evaluate(&model, &ds, &spec, MaskKind::Val, None).unwrap_err();
        assert!(err.to_string().contains("val mask is empty"), "{err}");
    }

    #[test]
    fn output_slice_bounds_are_checked() {
        let spec = LossSpec {
            kind: LossKind::CrossEntropy,
            output_slice: Some((3, 2)),
        };
        let err = spec.resolved_slice(4).unwrap_err();
        assert!(err.to_string().contains("out_dim 4"), "{err}");
        assert_eq!(spec.resolved_slice(5).unwrap(), (3, 2));
        let zero = LossSpec {
            kind: LossKind::CrossEntropy,
            output_slice: Some((0, 0)),
        };
        assert!(zero.resolved_slice(4).is_err());
    }

    #[test]
    fn evaluate_reports_accuracy_and_auc_on_binary_task() {
        let ds = generate_synthetic(&SynthTaskSpec {
            seed: 11,
            num_nodes: 60,
            num_graphs: None,
            feat_dim: 4,
            num_classes: 2,
            intra_p: 0.25,
            inter_p: 0.05,
            noise_std: 0.0,
        })
        .unwrap();
        let model = pretrain(
            &ds,
            &ArchConfig::default(),
            &TrainOpts {
                lr: 0.5,
                epochs: 150,
                seed: 9,
            },
        )
        .unwrap();
        let spec = LossSpec::new(LossKind::CrossEntropy);
        let m = evaluate(&model, &ds, &spec, MaskKind::Test, None).unwrap();
        assert_eq!(m.accuracy, Some(1.0));
        assert_eq!(m.roc_auc, Some(1.0));
        assert!(m.loss.is_finite());
    }

    #[test]
    fn sweep_covers_candidates_and_preserves_hash() {
        let ds = generate_synthetic(&SynthTaskSpec {
            seed: 13,
            num_nodes: 50,
            num_graphs: None,
            feat_dim: 5,
            num_classes: 2,
            intra_p: 0.3,
            inter_p: 0.1,
            noise_std: 0.6,
        })
        .unwrap();
        let model = pretrain(
            &ds,
            &ArchConfig::default(),
            &TrainOpts {
                lr: 0.3,
                epochs: 30,
                seed: 4,
            },
        )
        .unwrap();
        let hash = model.param_hash().to_string();
        let spec = LossSpec::new(LossKind::CrossEntropy);
        let results = aggregator_sweep(&model, &ds, &spec, &Aggregator::ALL).unwrap();
        assert_eq!(results.len(), 4);
        assert_eq!(model.param_hash(), hash);
        let losses: Vec<f64> = results.iter().map(|(_, m)| m.loss).collect();
        assert!(
            losses.iter().any(|&l| (l - losses[0]).abs() > 1e-9),
            "aggregators should not all score identically: {losses:?}"
        );
    }
}
