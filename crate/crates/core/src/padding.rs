//! Meta-FeatPadding: learned feature padding for heterogeneous-dimension
//! reuse.
//!
//! A single delta vector, shared by every node, fills the gap between the
//! downstream feature width and the frozen model's in_dim. Only delta is
//! trained; raw feature coordinates pass through bit-identical and the model
//! parameters never change.

use std::rc::Rc;

use serde_json::{json, Value};

use crate::dataset::GraphDataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, MaskKind};
use crate::metrics::{self, LossSpec};
use crate::model::{AggPlan, FrozenModel, Readout, TrainOpts};
use crate::rng::substream;
use crate::tape::{ColSource, Tape, Var};
use crate::tensor::Tensor;

/// Relative-improvement threshold below which padding-style optimizers stop
/// early.
pub const EARLY_STOP_REL: f64 = 1e-4;

/// Consecutive epochs without material improvement tolerated before stopping.
pub const EARLY_STOP_PATIENCE: usize = 25;

/// Heavy-ball momentum coefficient shared by the padding-style optimizers.
pub const MOMENTUM_BETA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadPosition {
    Front,
    Center,
    End,
    Random,
}

impl PadPosition {
    pub const ALL: [PadPosition; 4] = [
        PadPosition::Front,
        PadPosition::Center,
        PadPosition::End,
        PadPosition::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PadPosition::Front => "front",
            PadPosition::Center => "center",
            PadPosition::End => "end",
            PadPosition::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<PadPosition> {
        match s {
            "front" => Ok(PadPosition::Front),
            "center" => Ok(PadPosition::Center),
            "end" => Ok(PadPosition::End),
            "random" => Ok(PadPosition::Random),
            other => Err(Error::Validation(format!(
                "unknown padding position `{other}`; expected front, center, end, or random"
            ))),
        }
    }
}

/// One shared learnable padding vector plus its placement policy. The
/// `random` position draws one fixed permutation from `seed` and reuses it
/// at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddingSpec {
    pub pad_size: usize,
    pub position: PadPosition,
    pub delta: Vec<f64>,
    pub init_std: f64,
    pub seed: u64,
}

impl PaddingSpec {
    /// Delta initialized from N(0, init_std^2).
    pub fn new(pad_size: usize, position: PadPosition, init_std: f64, seed: u64) -> Result<Self> {
        if !init_std.is_finite() || init_std < 0.0 {
            return Err(Error::Validation(format!(
                "init_std {init_std} must be a non-negative real"
            )));
        }
        let mut rng = substream(seed, "init/delta");
        let delta = (0..pad_size).map(|_| init_std * rng.next_normal()).collect();
        Ok(PaddingSpec {
            pad_size,
            position,
            delta,
            init_std,
            seed,
        })
    }

    /// Zero-filled delta: the untrained vanilla-padding baseline.
    pub fn zeros(pad_size: usize, position: PadPosition, seed: u64) -> Self {
        PaddingSpec {
            pad_size,
            position,
            delta: vec![0.0; pad_size],
            init_std: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.delta.len() != self.pad_size {
            return Err(Error::Validation(format!(
                "delta has {} entries but pad_size is {}",
                self.delta.len(),
                self.pad_size
            )));
        }
        if self.delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("delta contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        json!({
            "pad_size": self.pad_size,
            "position": self.position.as_str(),
            "delta": self.delta,
            "init_std": self.init_std,
            "seed": self.seed,
        })
    }

    pub fn from_json(value: &Value) -> Result<PaddingSpec> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Validation("padding spec must be a JSON object".into()))?;
        let pad_size = obj
            .get("pad_size")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Validation("missing pad_size".into()))? as usize;
        let position = PadPosition::parse(
            obj.get("position")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::Validation("missing position".into()))?,
        )?;
        let delta = obj
            .get("delta")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Validation("missing delta".into()))?
            .iter()
            .map(|v| {
                v.as_f64()
                    .ok_or_else(|| Error::Validation("delta entries must be numbers".into()))
            })
            .collect::<Result<Vec<f64>>>()?;
        let init_std = obj
            .get("init_std")
            .and_then(Value::as_f64)
            .ok_or_else(|| Error::Validation("missing init_std".into()))?;
        let seed = obj
            .get("seed")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Validation("missing seed".into()))?;
        let spec = PaddingSpec {
            pad_size,
            position,
            delta,
            init_std,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Where padded and raw coordinates land in the widened feature space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PadLayout {
    pub total: usize,
    /// Output column of delta[k].
    pub pad_positions: Vec<usize>,
    /// Output column of raw coordinate j.
    pub raw_positions: Vec<usize>,
}

impl PadLayout {
    pub fn build(spec: &PaddingSpec, raw_dim: usize) -> PadLayout {
        let pad = spec.pad_size;
        let total = raw_dim + pad;
        let (pad_positions, raw_positions): (Vec<usize>, Vec<usize>) = match spec.position {
            PadPosition::Front => ((0..pad).collect(), (pad..total).collect()),
            PadPosition::End => ((raw_dim..total).collect(), (0..raw_dim).collect()),
            PadPosition::Center => {
                let half = raw_dim / 2;
                let pads = (half..half + pad).collect();
                let raws = (0..half).chain(half + pad..total).collect();
                (pads, raws)
            }
            PadPosition::Random => {
                let perm = substream(spec.seed, "pad/permutation").permutation(total);
                let pads: Vec<usize> = perm[..pad].to_vec();
                let mut raws: Vec<usize> = perm[pad..].to_vec();
                raws.sort_unstable();
                (pads, raws)
            }
        };
        PadLayout {
            total,
            pad_positions,
            raw_positions,
        }
    }

    /// Column routing for [`Tape::assemble_cols`]: raw column j comes from
    /// input A, delta k broadcasts from row vector B.
    pub fn sources(&self) -> Vec<ColSource> {
        let mut sources = vec![ColSource::A(0); self.total];
        for (j, &pos) in self.raw_positions.iter().enumerate() {
            sources[pos] = ColSource::A(j);
        }
        for (k, &pos) in self.pad_positions.iter().enumerate() {
            sources[pos] = ColSource::B(k);
        }
        sources
    }
}

/// Broadcasts delta into every row of `x` at the position-policy columns.
pub fn apply_padding(x: &Tensor, spec: &PaddingSpec) -> Result<Tensor> {
    spec.validate()?;
    if spec.pad_size == 0 {
        return Ok(x.clone());
    }
    let layout = PadLayout::build(spec, x.cols());
    let mut out = Tensor::zeros(x.rows(), layout.total);
    for i in 0..x.rows() {
        for (j, &pos) in layout.raw_positions.iter().enumerate() {
            out.set(i, pos, x.at(i, j));
        }
        for (k, &pos) in layout.pad_positions.iter().enumerate() {
            out.set(i, pos, spec.delta[k]);
        }
    }
    Ok(out)
}

/// The padded copy of a graph; structure and labels are untouched.
pub fn padded_graph(g: &Graph, spec: &PaddingSpec) -> Result<Graph> {
    let mut out = g.clone();
    out.features = apply_padding(&g.features, spec)?;
    Ok(out)
}

/// pad_size needed to lift `feat_dim` features into a model expecting
/// `model_in_dim`.
pub fn required_pad_size(model_in_dim: usize, feat_dim: usize) -> Result<usize> {
    if feat_dim > model_in_dim {
        return Err(Error::Validation(format!(
            "feature dim {feat_dim} exceeds model in_dim {model_in_dim}; padding cannot shrink features"
        )));
    }
    Ok(model_in_dim - feat_dim)
}

fn check_padded_dims(model: &FrozenModel, feat_dim: usize, spec: &PaddingSpec) -> Result<()> {
    if feat_dim + spec.pad_size != model.in_dim() {
        return Err(Error::Validation(format!(
            "feature dim {feat_dim} plus pad_size {} does not match model in_dim {}",
            spec.pad_size,
            model.in_dim()
        )));
    }
    Ok(())
}

/// Optimized spec plus its per-epoch training-loss trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddingResult {
    pub spec: PaddingSpec,
    pub trajectory: Vec<f64>,
}

struct PaddedForward {
    tape: Tape,
    delta: Var,
    outputs: Var,
    row_targets: metrics::RowTargets,
}

fn padded_train_forward(
    model: &FrozenModel,
    ds: &GraphDataset,
    spec: &PaddingSpec,
    delta_value: &[f64],
) -> Result<PaddedForward> {
    let mut tape = Tape::new();
    let delta = tape.param(Tensor::row_vector(delta_value.to_vec()));
    let layout = PadLayout::build(spec, ds.feat_dim());
    let sources = layout.sources();
    let forward_one = |tape: &mut Tape, g: &Graph, readout: Readout| -> Result<Var> {
        let feats = tape.leaf(g.features.clone());
        let padded = if spec.pad_size == 0 {
            feats
        } else {
            tape.assemble_cols(feats, delta, &sources)?
        };
        let weights = tape.leaf(Tensor::row_vector(g.edge_weights.clone()));
        let adj = Rc::new(model.build_adjacency(g));
        model.forward_on_tape(
            tape,
            padded,
            weights,
            &adj,
            &AggPlan::Fixed(model.aggregator()),
            readout,
        )
    };
    if ds.task_kind.is_node_level() {
        let g = ds.sole_graph()?;
        let outputs = forward_one(&mut tape, g, Readout::None)?;
        let row_targets = metrics::node_train_targets(g)?;
        Ok(PaddedForward {
            tape,
            delta,
            outputs,
            row_targets,
        })
    } else {
        let train = ds.split_indices(MaskKind::Train)?;
        if train.is_empty() {
            return Err(Error::Validation("train split is empty".into()));
        }
        let mut rows = Vec::with_capacity(train.len());
        for &gi in &train {
            rows.push(forward_one(&mut tape, &ds.graphs[gi], Readout::MeanPool)?);
        }
        let outputs = tape.concat_rows(&rows)?;
        let row_targets = metrics::graph_targets(ds, &train)?;
        Ok(PaddedForward {
            tape,
            delta,
            outputs,
            row_targets,
        })
    }
}

struct DescentState {
    delta: Vec<f64>,
    velocity: Vec<f64>,
    trajectory: Vec<f64>,
    best_loss: f64,
    best_delta: Vec<f64>,
    best_err: f64,
}

impl DescentState {
    fn fresh(delta: Vec<f64>) -> Self {
        let velocity = vec![0.0; delta.len()];
        let best_delta = delta.clone();
        DescentState {
            delta,
            velocity,
            trajectory: Vec::new(),
            best_loss: f64::INFINITY,
            best_delta,
            best_err: f64::INFINITY,
        }
    }
}

/// Epoch stride at which classification descents checkpoint training error.
const ERR_CHECK_EVERY: usize = 10;

fn training_error(
    model: &FrozenModel,
    ds: &GraphDataset,
    spec: &PaddingSpec,
    loss: &LossSpec,
    delta: &[f64],
) -> Result<f64> {
    let probe = PaddingSpec {
        delta: delta.to_vec(),
        ..spec.clone()
    };
    let padded = pad_dataset(ds, &probe)?;
    let m = metrics::evaluate(model, &padded, loss, MaskKind::Train, None)?;
    Ok(1.0 - m.accuracy.unwrap_or(0.0))
}

fn descend(
    model: &FrozenModel,
    ds: &GraphDataset,
    spec: &PaddingSpec,
    loss: &LossSpec,
    lr: f64,
    epochs: usize,
    state: &mut DescentState,
) -> Result<()> {
    let track_err = loss.kind == metrics::LossKind::CrossEntropy;
    let mut stall = 0usize;
    for epoch in 0..epochs {
        if track_err && epoch % ERR_CHECK_EVERY == 0 {
            let err = training_error(model, ds, spec, loss, &state.delta)?;
            if err < state.best_err {
                state.best_err = err;
                state.best_delta.copy_from_slice(&state.delta);
            }
        }
        let mut fwd = padded_train_forward(model, ds, spec, &state.delta)?;
        let loss_var = metrics::sliced_training_loss(
            &mut fwd.tape,
            fwd.outputs,
            &fwd.row_targets,
            loss,
            model.out_dim(),
        )?;
        let loss_value = fwd.tape.value(loss_var).at(0, 0);
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite padding loss {loss_value} at epoch {}",
                state.trajectory.len()
            )));
        }
        state.trajectory.push(loss_value);
        if state.best_loss - loss_value
            >= EARLY_STOP_REL * state.best_loss.abs().max(EARLY_STOP_REL)
        {
            state.best_loss = loss_value;
            if !track_err {
                state.best_delta.copy_from_slice(&state.delta);
            }
            stall = 0;
        } else {
            stall += 1;
            if stall >= EARLY_STOP_PATIENCE {
                break;
            }
        }
        fwd.tape.backward(loss_var)?;
        let grad = fwd.tape.grad_or_zeros(fwd.delta);
        for ((d, v), g) in state
            .delta
            .iter_mut()
            .zip(&mut state.velocity)
            .zip(grad.data())
        {
            *v = MOMENTUM_BETA * *v + g;
            *d -= lr * *v;
        }
    }
    if track_err && epochs > 0 {
        let err = training_error(model, ds, spec, loss, &state.delta)?;
        if err < state.best_err {
            state.best_err = err;
            state.best_delta.copy_from_slice(&state.delta);
        }
    }
    Ok(())
}

/// Restarts tried by [`optimize_padding`] before committing to one descent.
pub const RESTARTS: usize = 10;

/// Ranks a pilot run for restart selection; lower is better. Classification
/// pilots rank by checkpointed training error with loss as tie-break, others
/// by loss.
fn pilot_rank(loss: &LossSpec, state: &DescentState) -> f64 {
    if loss.kind != metrics::LossKind::CrossEntropy {
        return state.best_loss;
    }
    state.best_err + state.best_loss.min(1e5) * 1e-6
}

/// Gradient descent on delta against the frozen model, with momentum and a
/// short multi-start pilot phase; model parameters are hash-checked before
/// and after. `opt.epochs` bounds the selected descent path end to end.
pub fn optimize_padding(
    model: &FrozenModel,
    ds: &GraphDataset,
    spec: &PaddingSpec,
    loss: &LossSpec,
    opt: &TrainOpts,
) -> Result<PaddingResult> {
    model.check_integrity()?;
    spec.validate()?;
    opt.validate()?;
    check_padded_dims(model, ds.feat_dim(), spec)?;
    let pilot = (opt.epochs / 8).clamp(1, 80).min(opt.epochs);
    let mut starts = vec![spec.delta.clone()];
    if spec.pad_size > 0 && opt.epochs > 0 && opt.lr > 0.0 {
        let base = if spec.init_std > 0.0 {
            spec.init_std
        } else {
            1.0
        };
        let mut rng = substream(spec.seed, "padding/restarts");
        for i in 1..RESTARTS {
            let scale = base * [2.0, 4.0, 8.0, 1.0, 16.0][(i - 1) % 5];
            starts.push(
                (0..spec.pad_size)
                    .map(|_| scale * rng.next_normal())
                    .collect(),
            );
        }
    }
    let mut runs = Vec::with_capacity(starts.len());
    for delta in starts {
        let mut state = DescentState::fresh(delta);
        descend(model, ds, spec, loss, opt.lr, pilot, &mut state)?;
        let rank = pilot_rank(loss, &state);
        runs.push((rank, state));
    }
    let (_, mut selected) = runs
        .into_iter()
        .min_by(|(a, _), (b, _)| a.total_cmp(b))
        .expect("at least the spec's own delta ran");
    descend(
        model,
        ds,
        spec,
        loss,
        opt.lr,
        opt.epochs.saturating_sub(selected.trajectory.len()),
        &mut selected,
    )?;
    model.check_integrity()?;
    Ok(PaddingResult {
        spec: PaddingSpec {
            delta: selected.best_delta,
            ..spec.clone()
        },
        trajectory: selected.trajectory,
    })
}

/// Forward pass over the padded graph with the loss's output slice applied.
pub fn infer_with_padding(
    model: &FrozenModel,
    g_test: &Graph,
    spec: &PaddingSpec,
    loss: &LossSpec,
) -> Result<Tensor> {
    check_padded_dims(model, g_test.feat_dim(), spec)?;
    let padded = padded_graph(g_test, spec)?;
    let out = model.forward(&padded, None)?;
    let (start, len) = loss.resolved_slice(model.out_dim())?;
    if (start, len) == (0, model.out_dim()) {
        return Ok(out);
    }
    let rows: Vec<Vec<f64>> = (0..out.rows())
        .map(|r| out.row(r)[start..start + len].to_vec())
        .collect();
    Tensor::from_rows(&rows)
}

/// The padded dataset: every graph widened by the same spec.
pub fn pad_dataset(ds: &GraphDataset, spec: &PaddingSpec) -> Result<GraphDataset> {
    let mut out = ds.clone();
    for g in out.graphs.iter_mut() {
        g.features = apply_padding(&g.features, spec)?;
    }
    Ok(out)
}
