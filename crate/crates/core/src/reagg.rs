//! Reprogrammable-Aggregating: differentiable aggregator selection via
//! Gumbel-softmax.
//!
//! A small task-embedding layer, living outside the frozen model, maps the
//! mean of the raw node features to one logit per candidate aggregator.
//! Training mixes candidate outputs with Gumbel-softmax weights at every
//! message-passing layer; inference picks the argmax logit with noise
//! disabled, so deployment is deterministic.

use std::rc::Rc;

use serde_json::{json, Value};

use crate::dataset::GraphDataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, MaskKind};
use crate::metrics::{self, argmax, LossSpec};
use crate::model::{AggPlan, Aggregator, FrozenModel, Readout};
use crate::padding::{PadLayout, PaddingSpec};
use crate::rng::{substream, SplitMix64};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    Soft,
    Hard,
}

impl SelectionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectionMode::Soft => "soft",
            SelectionMode::Hard => "hard",
        }
    }

    pub fn parse(s: &str) -> Result<SelectionMode> {
        match s {
            "soft" => Ok(SelectionMode::Soft),
            "hard" => Ok(SelectionMode::Hard),
            other => Err(Error::Validation(format!(
                "unknown selection mode `{other}`; expected soft or hard"
            ))),
        }
    }
}

/// Candidate aggregators plus the learnable task-embedding layer that
/// scores them.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorChoice {
    pub candidates: Vec<Aggregator>,
    /// feat_dim x num_candidates.
    pub embed_weight: Tensor,
    /// 1 x num_candidates.
    pub embed_bias: Tensor,
    pub tau: f64,
    pub seed: u64,
    pub mode: SelectionMode,
    /// Candidate picked on the training task, filled in by [`train_reagg`].
    pub selected: Option<usize>,
}

impl AggregatorChoice {
    /// Embedding initialized from N(0, init_std^2); soft mode, no selection.
    pub fn new(
        candidates: Vec<Aggregator>,
        feat_dim: usize,
        tau: f64,
        init_std: f64,
        seed: u64,
    ) -> Result<Self> {
        let k = candidates.len();
        let mut rng = substream(seed, "init/embed");
        let data = (0..feat_dim * k)
            .map(|_| init_std * rng.next_normal())
            .collect();
        let choice = AggregatorChoice {
            candidates,
            embed_weight: Tensor::from_vec(feat_dim, k, data)?,
            embed_bias: Tensor::zeros(1, k),
            tau,
            seed,
            mode: SelectionMode::Soft,
            selected: None,
        };
        choice.validate()?;
        Ok(choice)
    }

    pub fn num_candidates(&self) -> usize {
        self.candidates.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.candidates.len() < 2 {
            return Err(Error::Validation(format!(
                "aggregator choice needs at least 2 candidates, got {}",
                self.candidates.len()
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Validation(format!(
                "tau {} must be strictly positive",
                self.tau
            )));
        }
        if self.embed_weight.cols() != self.candidates.len()
            || self.embed_bias.cols() != self.candidates.len()
            || self.embed_bias.rows() != 1
        {
            return Err(Error::Validation(format!(
                "embedding shapes {} and {} do not fit {} candidates",
                self.embed_weight.shape_string(),
                self.embed_bias.shape_string(),
                self.candidates.len()
            )));
        }
        if !self.embed_weight.all_finite() || !self.embed_bias.all_finite() {
            return Err(Error::Validation(
                "embedding parameters contain non-finite values".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        json!({
            "candidates": self.candidates.iter().map(|c| c.as_str()).collect::<Vec<_>>(),
            "embed_weight": self.embed_weight.to_json_rows(),
            "embed_bias": self.embed_bias.to_json_rows(),
            "tau": self.tau,
            "seed": self.seed,
            "mode": self.mode.as_str(),
            "selected": self.selected.map(|i| self.candidates[i].as_str()),
        })
    }

    pub fn from_json(value: &Value) -> Result<AggregatorChoice> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Validation("aggregator choice must be a JSON object".into()))?;
        let candidates = obj
            .get("candidates")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Validation("missing candidates".into()))?
            .iter()
            .map(|v| {
                Aggregator::parse(v.as_str().ok_or_else(|| {
                    Error::Validation("candidates must be strings".into())
                })?)
            })
            .collect::<Result<Vec<_>>>()?;
        let embed_weight = Tensor::from_json_rows(
            obj.get("embed_weight")
                .ok_or_else(|| Error::Validation("missing embed_weight".into()))?,
            "embed_weight",
        )?;
        let embed_bias = Tensor::from_json_rows(
            obj.get("embed_bias")
                .ok_or_else(|| Error::Validation("missing embed_bias".into()))?,
            "embed_bias",
        )?;
        let tau = obj
            .get("tau")
            .and_then(Value::as_f64)
            .ok_or_else(|| Error::Validation("missing tau".into()))?;
        let seed = obj
            .get("seed")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Validation("missing seed".into()))?;
        let mode = SelectionMode::parse(
            obj.get("mode")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::Validation("missing mode".into()))?,
        )?;
        let selected = match obj.get("selected") {
            None | Some(Value::Null) => None,
            Some(v) => {
                let name = v
                    .as_str()
                    .ok_or_else(|| Error::Validation("selected must be a string".into()))?;
                let agg = Aggregator::parse(name)?;
                Some(
                    candidates
                        .iter()
                        .position(|&c| c == agg)
                        .ok_or_else(|| {
                            Error::Validation(format!("selected `{name}` is not a candidate"))
                        })?,
                )
            }
        };
        let choice = AggregatorChoice {
            candidates,
            embed_weight,
            embed_bias,
            tau,
            seed,
            mode,
            selected,
        };
        choice.validate()?;
        Ok(choice)
    }
}

/// One Gumbel-softmax draw: the noise, the simplex weights (one-hot in hard
/// mode), and the winning candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelSample {
    pub noise: Vec<f64>,
    pub weights: Vec<f64>,
    pub selected: usize,
}

/// Standard Gumbel(0, 1) noise, one value per candidate.
pub fn sample_gumbel(rng: &mut SplitMix64, k: usize) -> Vec<f64> {
    (0..k).map(|_| rng.next_gumbel()).collect()
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.iter().map(|e| e / denom).collect()
}

/// Gumbel-softmax with caller-supplied noise; hard mode returns the one-hot
/// at the soft argmax.
pub fn gumbel_softmax_with_noise(
    logits: &[f64],
    tau: f64,
    noise: &[f64],
    mode: SelectionMode,
) -> Result<GumbelSample> {
    if !(tau > 0.0) {
        return Err(Error::Validation(format!(
            "tau {tau} must be strictly positive"
        )));
    }
    if logits.len() != noise.len() || logits.is_empty() {
        return Err(Error::Validation(format!(
            "logits ({}) and noise ({}) must be non-empty and aligned",
            logits.len(),
            noise.len()
        )));
    }
    let scores: Vec<f64> = logits
        .iter()
        .zip(noise)
        .map(|(l, g)| (l + g) / tau)
        .collect();
    let soft = softmax(&scores);
    let selected = argmax(&soft);
    let weights = match mode {
        SelectionMode::Soft => soft,
        SelectionMode::Hard => {
            let mut one_hot = vec![0.0; logits.len()];
            one_hot[selected] = 1.0;
            one_hot
        }
    };
    Ok(GumbelSample {
        noise: noise.to_vec(),
        weights,
        selected,
    })
}

/// Gumbel-softmax with noise drawn from `rng`.
pub fn gumbel_softmax(
    logits: &[f64],
    tau: f64,
    rng: &mut SplitMix64,
    mode: SelectionMode,
) -> Result<GumbelSample> {
    let noise = sample_gumbel(rng, logits.len());
    gumbel_softmax_with_noise(logits, tau, &noise, mode)
}

/// Logits from the task-embedding layer: linear in the mean of the raw node
/// features, deterministic, permutation-invariant.
pub fn task_embedding(choice: &AggregatorChoice, g: &Graph) -> Result<Vec<f64>> {
    if g.num_nodes == 0 {
        return Err(Error::Validation(
            "task embedding needs a non-empty graph".into(),
        ));
    }
    if g.feat_dim() != choice.embed_weight.rows() {
        return Err(Error::Validation(format!(
            "graph feature dim {} does not match embedding input dim {}",
            g.feat_dim(),
            choice.embed_weight.rows()
        )));
    }
    let d = g.feat_dim();
    let k = choice.num_candidates();
    let mut mean = vec![0.0; d];
    for i in 0..g.num_nodes {
        for (m, &x) in mean.iter_mut().zip(g.features.row(i)) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= g.num_nodes as f64;
    }
    let mut logits = vec![0.0; k];
    for (j, logit) in logits.iter_mut().enumerate() {
        *logit = choice.embed_bias.at(0, j);
        for (jj, &m) in mean.iter().enumerate() {
            *logit += m * choice.embed_weight.at(jj, j);
        }
    }
    Ok(logits)
}

fn support_guard(model: &FrozenModel) -> Result<()> {
    if !model.has_message_passing() {
        return Err(Error::Validation(
            "model has no message-passing layers, so no aggregator candidate can apply".into(),
        ));
    }
    Ok(())
}

/// Forward pass under the choice: soft mode mixes candidate outputs with a
/// fresh Gumbel draw, hard mode runs the deterministic argmax candidate
/// with noise disabled.
pub fn select_and_forward(
    model: &FrozenModel,
    g: &Graph,
    choice: &AggregatorChoice,
) -> Result<(Tensor, GumbelSample)> {
    model.check_integrity()?;
    support_guard(model)?;
    let logits = task_embedding(choice, g)?;
    let sample = match choice.mode {
        SelectionMode::Soft => {
            let mut rng = substream(choice.seed, "gumbel");
            gumbel_softmax(&logits, choice.tau, &mut rng, SelectionMode::Soft)?
        }
        SelectionMode::Hard => {
            let zeros = vec![0.0; logits.len()];
            gumbel_softmax_with_noise(&logits, choice.tau, &zeros, SelectionMode::Hard)?
        }
    };
    let out = match choice.mode {
        SelectionMode::Hard => model.forward(g, Some(choice.candidates[sample.selected]))?,
        SelectionMode::Soft => {
            let adj = Rc::new(model.build_adjacency(g));
            let mut tape = Tape::new();
            let feats = tape.leaf(g.features.clone());
            let weights = tape.leaf(Tensor::row_vector(g.edge_weights.clone()));
            let scalars: Vec<Var> = sample
                .weights
                .iter()
                .map(|&w| tape.leaf(Tensor::scalar(w)))
                .collect();
            let plan = AggPlan::Mixture {
                candidates: choice.candidates.clone(),
                weights: scalars,
            };
            let out = model.forward_on_tape(
                &mut tape,
                feats,
                weights,
                &adj,
                &plan,
                model.readout(),
            )?;
            tape.value(out).clone()
        }
    };
    model.check_integrity()?;
    Ok((out, sample))
}

/// Training options for [`train_reagg`]; `tau_schedule` linearly moves the
/// temperature from its first to its second value across epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReaggOpts {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub tau_schedule: Option<(f64, f64)>,
}

impl Default for ReaggOpts {
    fn default() -> Self {
        ReaggOpts {
            lr: 0.1,
            epochs: 10,
            seed: 0,
            tau_schedule: None,
        }
    }
}

impl ReaggOpts {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Validation(format!(
                "learning rate {} must be a non-negative real",
                self.lr
            )));
        }
        if let Some((start, end)) = self.tau_schedule {
            if !(start > 0.0) || !(end > 0.0) {
                return Err(Error::Validation(format!(
                    "tau schedule ({start}, {end}) must stay strictly positive"
                )));
            }
        }
        Ok(())
    }

    fn tau_at(&self, base: f64, epoch: usize) -> f64 {
        match self.tau_schedule {
            None => base,
            Some((start, end)) => {
                if self.epochs <= 1 {
                    start
                } else {
                    start + (end - start) * epoch as f64 / (self.epochs - 1) as f64
                }
            }
        }
    }
}

/// Outcome of ReAgg training: the updated choice, the co-trained padding
/// when composed, the loss trajectory, and per-epoch selection counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ReaggTrained {
    pub choice: AggregatorChoice,
    pub padding: Option<PaddingSpec>,
    pub trajectory: Vec<f64>,
    pub histogram: Vec<Vec<usize>>,
}

/// Trains the task embedding (and, when `padding` is given, the MetaFP
/// delta jointly) against the frozen model.
pub fn train_reagg(
    model: &FrozenModel,
    ds: &GraphDataset,
    choice: &AggregatorChoice,
    padding: Option<&PaddingSpec>,
    loss: &LossSpec,
    opt: &ReaggOpts,
) -> Result<ReaggTrained> {
    model.check_integrity()?;
    support_guard(model)?;
    choice.validate()?;
    opt.validate()?;
    if let Some(spec) = padding {
        spec.validate()?;
        if ds.feat_dim() + spec.pad_size != model.in_dim() {
            return Err(Error::Validation(format!(
                "feature dim {} plus pad_size {} does not match model in_dim {}",
                ds.feat_dim(),
                spec.pad_size,
                model.in_dim()
            )));
        }
    } else {
        model.check_feat_dim(ds.feat_dim())?;
    }
    if choice.embed_weight.rows() != ds.feat_dim() {
        return Err(Error::Validation(format!(
            "embedding input dim {} does not match dataset feature dim {}",
            choice.embed_weight.rows(),
            ds.feat_dim()
        )));
    }

    let k = choice.num_candidates();
    let train_graphs: Vec<usize> = if ds.task_kind.is_node_level() {
        ds.sole_graph()?;
        vec![0]
    } else {
        let idx = ds.split_indices(MaskKind::Train)?;
        if idx.is_empty() {
            return Err(Error::Validation("train split is empty".into()));
        }
        idx
    };
    let layout = padding.map(|spec| PadLayout::build(spec, ds.feat_dim()));
    let sources = layout.as_ref().map(PadLayout::sources);
    let adjacencies: Vec<Rc<crate::graph::Adjacency>> = train_graphs
        .iter()
        .map(|&gi| Rc::new(model.build_adjacency(&ds.graphs[gi])))
        .collect();

    let mut embed_weight = choice.embed_weight.clone();
    let mut embed_bias = choice.embed_bias.clone();
    let mut delta: Option<Vec<f64>> = padding.map(|spec| spec.delta.clone());
    let mut rng = substream(opt.seed, "gumbel");
    let mut trajectory = Vec::with_capacity(opt.epochs);
    let mut histogram = Vec::with_capacity(opt.epochs);
    let mut last_selected = vec![0usize; k];

    for epoch in 0..opt.epochs {
        let tau = opt.tau_at(choice.tau, epoch);
        let mut tape = Tape::new();
        let w_var = tape.param(embed_weight.clone());
        let b_var = tape.param(embed_bias.clone());
        let delta_var = delta
            .as_ref()
            .map(|d| tape.param(Tensor::row_vector(d.clone())));
        let mut counts = vec![0usize; k];
        let mut rows = Vec::with_capacity(train_graphs.len());
        for (slot, &gi) in train_graphs.iter().enumerate() {
            let g = &ds.graphs[gi];
            let feats = tape.leaf(g.features.clone());
            let mean = tape.mean_rows(feats)?;
            let scored = tape.matmul(mean, w_var)?;
            let logits = tape.add_row(scored, b_var)?;
            let noise = sample_gumbel(&mut rng, k);
            let noise_var = tape.leaf(Tensor::row_vector(noise));
            let noisy = tape.add(logits, noise_var)?;
            let scaled = tape.scale(noisy, 1.0 / tau);
            let mut weights_var = tape.softmax_rows(scaled);
            let selected = argmax(tape.value(weights_var).row(0));
            counts[selected] += 1;
            if choice.mode == SelectionMode::Hard {
                let mut one_hot = Tensor::zeros(1, k);
                one_hot.set(0, selected, 1.0);
                weights_var = tape.straight_through(weights_var, one_hot)?;
            }
            let scalars: Vec<Var> = (0..k)
                .map(|c| tape.slice_cols(weights_var, c, 1))
                .collect::<Result<_>>()?;
            let model_input = match (delta_var, sources.as_ref()) {
                (Some(dv), Some(src)) => tape.assemble_cols(feats, dv, src)?,
                _ => feats,
            };
            let edge_weights = tape.leaf(Tensor::row_vector(g.edge_weights.clone()));
            let plan = AggPlan::Mixture {
                candidates: choice.candidates.clone(),
                weights: scalars,
            };
            let readout = if ds.task_kind.is_node_level() {
                Readout::None
            } else {
                Readout::MeanPool
            };
            rows.push(model.forward_on_tape(
                &mut tape,
                model_input,
                edge_weights,
                &adjacencies[slot],
                &plan,
                readout,
            )?);
        }
        let outputs = if ds.task_kind.is_node_level() {
            rows[0]
        } else {
            tape.concat_rows(&rows)?
        };
        let targets = if ds.task_kind.is_node_level() {
            metrics::node_train_targets(ds.sole_graph()?)?
        } else {
            metrics::graph_targets(ds, &train_graphs)?
        };
        let loss_var =
            metrics::sliced_training_loss(&mut tape, outputs, &targets, loss, model.out_dim())?;
        let loss_value = tape.value(loss_var).at(0, 0);
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite reagg loss {loss_value} at epoch {epoch}"
            )));
        }
        trajectory.push(loss_value);
        histogram.push(counts.clone());
        last_selected = counts;
        tape.backward(loss_var)?;
        step(&mut embed_weight, &tape.grad_or_zeros(w_var), opt.lr);
        step(&mut embed_bias, &tape.grad_or_zeros(b_var), opt.lr);
        if let (Some(d), Some(dv)) = (delta.as_mut(), delta_var) {
            let grad = tape.grad_or_zeros(dv);
            for (p, g) in d.iter_mut().zip(grad.data()) {
                *p -= opt.lr * g;
            }
        }
    }

    model.check_integrity()?;
    let selected = argmax(
        &last_selected
            .iter()
            .map(|&c| c as f64)
            .collect::<Vec<f64>>(),
    );
    Ok(ReaggTrained {
        choice: AggregatorChoice {
            embed_weight,
            embed_bias,
            selected: Some(selected),
            ..choice.clone()
        },
        padding: delta.map(|d| {
            let spec = padding.expect("delta implies padding");
            PaddingSpec {
                delta: d,
                ..spec.clone()
            }
        }),
        trajectory,
        histogram,
    })
}

fn step(param: &mut Tensor, grad: &Tensor, lr: f64) {
    for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p -= lr * g;
    }
}

/// Deterministic inference: hard selection from noise-free logits, padding
/// applied when composed, output slice applied.
pub fn infer_reagg(
    model: &FrozenModel,
    g: &Graph,
    choice: &AggregatorChoice,
    padding: Option<&PaddingSpec>,
    loss: &LossSpec,
) -> Result<(Tensor, usize)> {
    support_guard(model)?;
    let logits = task_embedding(choice, g)?;
    let selected = argmax(&logits);
    let input = match padding {
        Some(spec) => crate::padding::padded_graph(g, spec)?,
        None => g.clone(),
    };
    let out = model.forward(&input, Some(choice.candidates[selected]))?;
    let (start, len) = loss.resolved_slice(model.out_dim())?;
    if (start, len) == (0, model.out_dim()) {
        return Ok((out, selected));
    }
    let rows: Vec<Vec<f64>> = (0..out.rows())
        .map(|r| out.row(r)[start..start + len].to_vec())
        .collect();
    Ok((Tensor::from_rows(&rows)?, selected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::LossKind;
    use crate::model::{pretrain, ArchConfig, TrainOpts};
    use crate::synth::{generate_synthetic, SynthTaskSpec};
    use crate::tape::GradCheckReport;

    fn task(seed: u64) -> GraphDataset {
        generate_synthetic(&SynthTaskSpec {
            seed,
            num_nodes: 30,
            num_graphs: None,
            feat_dim: 4,
            num_classes: 2,
            intra_p: 0.3,
            inter_p: 0.1,
            noise_std: 0.4,
        })
        .unwrap()
    }

    fn frozen(seed: u64) -> (FrozenModel, GraphDataset) {
        let ds = task(seed);
        let model = pretrain(
            &ds,
            &ArchConfig::default(),
            &TrainOpts {
                lr: 0.3,
                epochs: 20,
                seed,
            },
        )
        .unwrap();
        (model, ds)
    }

    #[test]
    fn zero_embedding_gives_zero_logits() {
        let (_, ds) = frozen(1);
        let g = ds.sole_graph().unwrap();
        let choice = AggregatorChoice {
            candidates: Aggregator::ALL.to_vec(),
            embed_weight: Tensor::zeros(4, 4),
            embed_bias: Tensor::zeros(1, 4),
            tau: 1.0,
            seed: 0,
            mode: SelectionMode::Soft,
            selected: None,
        };
        assert_eq!(task_embedding(&choice, g).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn embedding_is_permutation_invariant_and_mean_determined() {
        let (_, ds) = frozen(2);
        let g = ds.sole_graph().unwrap();
        let choice = AggregatorChoice::new(Aggregator::ALL.to_vec(), 4, 1.0, 0.5, 3).unwrap();
        let base = task_embedding(&choice, g).unwrap();
        let perm = substream(5, "test/perm").permutation(g.num_nodes);
        let permuted = g.permute_nodes(&perm).unwrap();
        let other = task_embedding(&choice, &permuted).unwrap();
        for (a, b) in base.iter().zip(&other) {
            assert!((a - b).abs() < 1e-12);
        }

        let mut swapped = g.clone();
        let d = g.feat_dim();
        for j in 0..d {
            let a = swapped.features.at(0, j);
            let b = swapped.features.at(1, j);
            swapped.features.set(0, j, b);
            swapped.features.set(1, j, a);
        }
        let same_mean = task_embedding(&choice, &swapped).unwrap();
        for (a, b) in base.iter().zip(&same_mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_graph_is_rejected() {
        let choice = AggregatorChoice::new(Aggregator::ALL.to_vec(), 3, 1.0, 0.1, 0).unwrap();
        let g = Graph {
            num_nodes: 0,
            directed: false,
            features: Tensor::zeros(0, 3),
            edges: vec![],
            edge_weights: vec![],
            node_labels: None,
            masks: None,
            graph_label: None,
        };
        assert!(task_embedding(&choice, &g).is_err());
    }

    #[test]
    fn equal_logits_and_zero_noise_give_uniform_weights() {
        let sample =
            gumbel_softmax_with_noise(&[0.7; 4], 2.0, &[0.0; 4], SelectionMode::Soft).unwrap();
        for &w in &sample.weights {
            assert!((w - 0.25).abs() < 1e-12);
        }
        assert_eq!(sample.selected, 0);
    }

    #[test]
    fn low_tau_saturates_weights() {
        let sample =
            gumbel_softmax_with_noise(&[10.0, 0.0], 0.1, &[0.0, 0.0], SelectionMode::Soft)
                .unwrap();
        assert!(sample.weights[0] > 0.999);
        let total: f64 = sample.weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hard_mode_returns_one_hot_at_soft_argmax() {
        let mut rng = substream(9, "gumbel");
        let noise = sample_gumbel(&mut rng, 3);
        let soft =
            gumbel_softmax_with_noise(&[0.3, 0.1, -0.2], 1.0, &noise, SelectionMode::Soft)
                .unwrap();
        let hard =
            gumbel_softmax_with_noise(&[0.3, 0.1, -0.2], 1.0, &noise, SelectionMode::Hard)
                .unwrap();
        assert_eq!(hard.selected, soft.selected);
        assert_eq!(hard.weights[hard.selected], 1.0);
        assert_eq!(hard.weights.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn selection_is_shift_invariant_per_draw() {
        let logits = [0.4, -0.3, 1.1, 0.0];
        let shifted: Vec<f64> = logits.iter().map(|l| l + 7.5).collect();
        let mut a_rng = substream(31, "gumbel");
        let mut b_rng = substream(31, "gumbel");
        for _ in 0..1000 {
            let a = gumbel_softmax(&logits, 1.0, &mut a_rng, SelectionMode::Soft).unwrap();
            let b = gumbel_softmax(&shifted, 1.0, &mut b_rng, SelectionMode::Soft).unwrap();
            assert_eq!(a.selected, b.selected);
        }
    }

    #[test]
    fn selection_frequencies_follow_softmax_of_logits() {
        let logits = [1.0, 0.0, -0.5];
        let expected = softmax(&logits);
        let mut rng = substream(17, "gumbel");
        let n = 20_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let s = gumbel_softmax(&logits, 0.7, &mut rng, SelectionMode::Soft).unwrap();
            counts[s.selected] += 1;
        }
        let tv: f64 = counts
            .iter()
            .zip(&expected)
            .map(|(&c, &p)| (c as f64 / n as f64 - p).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.02, "total variation {tv}");
    }

    #[test]
    fn single_candidate_literal_matches_plain_forward() {
        let (model, ds) = frozen(3);
        let g = ds.sole_graph().unwrap();
        let choice = AggregatorChoice {
            candidates: vec![model.aggregator()],
            embed_weight: Tensor::zeros(4, 1),
            embed_bias: Tensor::zeros(1, 1),
            tau: 1.0,
            seed: 0,
            mode: SelectionMode::Soft,
            selected: None,
        };
        let (out, sample) = select_and_forward(&model, g, &choice).unwrap();
        assert_eq!(sample.weights, vec![1.0]);
        assert_eq!(out, model.forward(g, None).unwrap());
    }

    #[test]
    fn saturated_soft_weights_equal_hard_forward() {
        let (model, ds) = frozen(4);
        let g = ds.sole_graph().unwrap();
        let mut choice = AggregatorChoice {
            candidates: vec![Aggregator::Max, Aggregator::Sum],
            embed_weight: Tensor::zeros(4, 2),
            embed_bias: Tensor::from_vec(1, 2, vec![2000.0, 0.0]).unwrap(),
            tau: 1.0,
            seed: 0,
            mode: SelectionMode::Soft,
            selected: None,
        };
        let (soft_out, sample) = select_and_forward(&model, g, &choice).unwrap();
        assert_eq!(sample.weights[0], 1.0, "softmax saturates exactly");
        choice.mode = SelectionMode::Hard;
        let (hard_out, hard_sample) = select_and_forward(&model, g, &choice).unwrap();
        assert_eq!(hard_sample.selected, 0);
        assert_eq!(soft_out, hard_out);
        assert_eq!(hard_out, model.forward(g, Some(Aggregator::Max)).unwrap());
    }

    #[test]
    fn dense_only_model_rejects_candidates() {
        use crate::model::{Activation, Layer, LayerKind};
        let model = FrozenModel::new(
            vec![Layer {
                kind: LayerKind::Dense,
                activation: Activation::None,
                weight: Tensor::zeros(4, 2),
                bias: Tensor::zeros(1, 2),
                attn: None,
            }],
            Aggregator::Mean,
            Readout::None,
            true,
        )
        .unwrap();
        let ds = task(5);
        let choice = AggregatorChoice::new(Aggregator::ALL.to_vec(), 4, 1.0, 0.1, 0).unwrap();
        let err = select_and_forward(&model, ds.sole_graph().unwrap(), &choice).unwrap_err();
        assert!(err.to_string().contains("message-passing"), "{err}");
    }

    #[test]
    fn soft_gradient_wrt_embedding_matches_finite_differences() {
        let (model, ds) = frozen(6);
        let g = ds.sole_graph().unwrap();
        let candidates = vec![Aggregator::Sum, Aggregator::Mean, Aggregator::Max];
        let mut rng = substream(23, "gumbel");
        let noise = Tensor::row_vector(sample_gumbel(&mut rng, 3));
        let point = Tensor::from_vec(
            4,
            3,
            (0..12).map(|i| 0.3 * ((i * 7 % 5) as f64 - 2.0)).collect(),
        )
        .unwrap();
        let adj = Rc::new(model.build_adjacency(g));
        let report: GradCheckReport = crate::tape::grad_check(&point, 1e-5, |tape, w| {
            let feats = tape.leaf(g.features.clone());
            let mean = tape.mean_rows(feats)?;
            let logits = tape.matmul(mean, w)?;
            let noise_var = tape.leaf(noise.clone());
            let noisy = tape.add(logits, noise_var)?;
            let scaled = tape.scale(noisy, 1.0 / 0.8);
            let weights = tape.softmax_rows(scaled);
            let scalars: Vec<Var> = (0..3)
                .map(|c| tape.slice_cols(weights, c, 1))
                .collect::<Result<_>>()?;
            let edge_weights = tape.leaf(Tensor::row_vector(g.edge_weights.clone()));
            let plan = AggPlan::Mixture {
                candidates: candidates.clone(),
                weights: scalars,
            };
            let out = model.forward_on_tape(
                tape,
                feats,
                edge_weights,
                &adj,
                &plan,
                Readout::None,
            )?;
            tape.mean_all(out)
        })
        .unwrap();
        assert!(
            report.passes(1e-4),
            "max rel err {}",
            report.max_rel_err
        );
    }

    #[test]
    fn zero_lr_training_changes_nothing_and_records_history() {
        let (model, ds) = frozen(7);
        let choice = AggregatorChoice::new(Aggregator::ALL.to_vec(), 4, 1.0, 0.2, 8).unwrap();
        let loss = LossSpec::new(LossKind::CrossEntropy);
        let trained = train_reagg(
            &model,
            &ds,
            &choice,
            None,
            &loss,
            &ReaggOpts {
                lr: 0.0,
                epochs: 5,
                seed: 2,
                tau_schedule: None,
            },
        )
        .unwrap();
        assert_eq!(trained.choice.embed_weight, choice.embed_weight);
        assert_eq!(trained.choice.embed_bias, choice.embed_bias);
        assert_eq!(trained.trajectory.len(), 5);
        assert_eq!(trained.histogram.len(), 5);
        assert!(trained.choice.selected.is_some());
        for counts in &trained.histogram {
            assert_eq!(counts.iter().sum::<usize>(), 1, "one graph per epoch");
        }
    }

    #[test]
    fn fifty_trials_select_every_candidate() {
        let mut seen = [false; 4];
        let logits_rngs = 0..50u64;
        for trial in logits_rngs {
            let mut init = substream(trial, "init/embed");
            let logits: Vec<f64> = (0..4).map(|_| 0.3 * init.next_normal()).collect();
            let mut rng = substream(trial, "gumbel");
            let sample = gumbel_softmax(&logits, 1.0, &mut rng, SelectionMode::Soft).unwrap();
            seen[sample.selected] = true;
        }
        assert!(seen.iter().all(|&s| s), "selections {seen:?}");
    }

    #[test]
    fn annealed_tau_saturates_final_weights() {
        let (model, ds) = frozen(8);
        let choice = AggregatorChoice::new(Aggregator::ALL.to_vec(), 4, 5.0, 0.3, 4).unwrap();
        let loss = LossSpec::new(LossKind::CrossEntropy);
        let opts = ReaggOpts {
            lr: 0.2,
            epochs: 8,
            seed: 3,
            tau_schedule: Some((5.0, 0.1)),
        };
        let trained = train_reagg(&model, &ds, &choice, None, &loss, &opts).unwrap();
        let g = ds.sole_graph().unwrap();
        let logits = task_embedding(&trained.choice, g).unwrap();
        let mut rng = substream(opts.seed, "gumbel");
        for _ in 0..opts.epochs - 1 {
            sample_gumbel(&mut rng, 4);
        }
        let final_noise = sample_gumbel(&mut rng, 4);
        let sample =
            gumbel_softmax_with_noise(&logits, 0.1, &final_noise, SelectionMode::Soft).unwrap();
        assert!(
            sample.weights[sample.selected] > 0.99,
            "weights {:?}",
            sample.weights
        );
    }

    #[test]
    fn composed_training_updates_both_delta_and_embedding() {
        let pre = generate_synthetic(&SynthTaskSpec {
            seed: 41,
            num_nodes: 40,
            num_graphs: None,
            feat_dim: 6,
            num_classes: 2,
            intra_p: 0.3,
            inter_p: 0.1,
            noise_std: 0.3,
        })
        .unwrap();
        let model = pretrain(
            &pre,
            &ArchConfig::default(),
            &TrainOpts {
                lr: 0.3,
                epochs: 15,
                seed: 1,
            },
        )
        .unwrap();
        let down = generate_synthetic(&SynthTaskSpec {
            seed: 42,
            num_nodes: 30,
            num_graphs: None,
            feat_dim: 4,
            num_classes: 2,
            intra_p: 0.3,
            inter_p: 0.1,
            noise_std: 0.3,
        })
        .unwrap();
        let choice = AggregatorChoice::new(Aggregator::ALL.to_vec(), 4, 1.0, 0.1, 5).unwrap();
        let spec = PaddingSpec::new(2, crate::padding::PadPosition::End, 0.01, 6).unwrap();
        let loss = LossSpec::new(LossKind::CrossEntropy);
        let hash = model.param_hash().to_string();
        let trained = train_reagg(
            &model,
            &down,
            &choice,
            Some(&spec),
            &loss,
            &ReaggOpts {
                lr: 0.3,
                epochs: 6,
                seed: 9,
                tau_schedule: None,
            },
        )
        .unwrap();
        let padding = trained.padding.unwrap();
        assert_ne!(padding.delta, spec.delta);
        assert_ne!(trained.choice.embed_weight, choice.embed_weight);
        assert_eq!(model.param_hash(), hash);

        let g = down.sole_graph().unwrap();
        let (out, selected) = infer_reagg(&model, g, &trained.choice, Some(&padding), &loss)
            .unwrap();
        assert_eq!(out.rows(), g.num_nodes);
        assert_eq!(out.cols(), 2);
        assert!(selected < 4);
        let (again, _) = infer_reagg(&model, g, &trained.choice, Some(&padding), &loss).unwrap();
        assert_eq!(out, again, "inference is deterministic");
    }

    #[test]
    fn choice_round_trips_through_json() {
        let mut choice = AggregatorChoice::new(Aggregator::ALL.to_vec(), 3, 0.7, 0.2, 12).unwrap();
        choice.selected = Some(2);
        choice.mode = SelectionMode::Hard;
        let back = AggregatorChoice::from_json(&choice.to_json()).unwrap();
        assert_eq!(choice, back);
    }
}
