//! Seed-parallel experiment execution and plot-ready metric files.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde_json::{json, Value};

use crate::dataset::{GraphDataset, TaskKind};
use crate::error::{Error, Result};
use crate::exec;
use crate::graph::MaskKind;
use crate::harness::config::{ExperimentConfig, Method, ResolvedExperiment};
use crate::metagraph::{augment_dataset, optimize_meta_features, MetaGraph};
use crate::metrics::{aggregator_sweep, argmax, evaluate, LossKind, LossSpec, Metrics};
use crate::model::{pretrain, pretrain_traced, Aggregator, TrainOpts};
use crate::padding::{optimize_padding, pad_dataset, PaddingSpec};
use crate::reagg::{task_embedding, train_reagg, AggregatorChoice, ReaggOpts};
use crate::slimming::{slim_edges, training_loss_value, SlimPlan};

/// What a method left behind, for inspection and replay.
#[derive(Debug, Clone, PartialEq)]
pub enum Artifact {
    None,
    Padding(PaddingSpec),
    Slim(SlimPlan),
    Meta(MetaGraph),
    Choice {
        choice: AggregatorChoice,
        histogram: Vec<Vec<usize>>,
        selected: usize,
    },
    Composed {
        padding: PaddingSpec,
        choice: AggregatorChoice,
        selected: usize,
    },
}

impl Artifact {
    pub fn to_json(&self) -> Value {
        match self {
            Artifact::None => json!({ "kind": "none" }),
            Artifact::Padding(spec) => json!({ "kind": "padding", "padding": spec.to_json() }),
            Artifact::Slim(plan) => json!({ "kind": "slim", "plan": plan.to_json() }),
            Artifact::Meta(meta) => json!({ "kind": "meta", "meta": meta.to_json() }),
            Artifact::Choice {
                choice,
                histogram,
                selected,
            } => json!({
                "kind": "choice",
                "choice": choice.to_json(),
                "histogram": histogram,
                "selected": selected,
            }),
            Artifact::Composed {
                padding,
                choice,
                selected,
            } => json!({
                "kind": "composed",
                "padding": padding.to_json(),
                "choice": choice.to_json(),
                "selected": selected,
            }),
        }
    }

    pub fn from_json(value: &Value) -> Result<Artifact> {
        let kind = value
            .get("kind")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Validation("artifact is missing its kind".into()))?;
        let field = |name: &str| -> Result<&Value> {
            value
                .get(name)
                .ok_or_else(|| Error::Validation(format!("{kind} artifact is missing {name}")))
        };
        match kind {
            "none" => Ok(Artifact::None),
            "padding" => Ok(Artifact::Padding(PaddingSpec::from_json(field("padding")?)?)),
            "slim" => Ok(Artifact::Slim(SlimPlan::from_json(field("plan")?)?)),
            "meta" => Ok(Artifact::Meta(MetaGraph::from_json(field("meta")?)?)),
            "choice" => Ok(Artifact::Choice {
                choice: AggregatorChoice::from_json(field("choice")?)?,
                histogram: serde_json::from_value(field("histogram")?.clone())
                    .map_err(|e| Error::Validation(format!("artifact histogram: {e}")))?,
                selected: field("selected")?
                    .as_u64()
                    .ok_or_else(|| Error::Validation("artifact selected must be an index".into()))?
                    as usize,
            }),
            "composed" => Ok(Artifact::Composed {
                padding: PaddingSpec::from_json(field("padding")?)?,
                choice: AggregatorChoice::from_json(field("choice")?)?,
                selected: field("selected")?
                    .as_u64()
                    .ok_or_else(|| Error::Validation("artifact selected must be an index".into()))?
                    as usize,
            }),
            other => Err(Error::Validation(format!("unknown artifact kind {other:?}"))),
        }
    }
}

/// Everything one seed produced.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRecord {
    pub seed: u64,
    /// Test metrics on the pretraining task; absent for retrain.
    pub pretrain_metrics: Option<Metrics>,
    pub train_metrics: Metrics,
    pub test_metrics: Metrics,
    pub trajectory: Vec<f64>,
    pub wall_clock_secs: f64,
    pub param_hash_before: String,
    pub param_hash_after: String,
    pub artifact: Artifact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub method: Method,
    pub task_kind: TaskKind,
    pub records: Vec<SeedRecord>,
}

impl RunReport {
    pub fn to_json(&self) -> Value {
        json!({
            "format_version": crate::graph::FORMAT_VERSION,
            "method": self.method.as_str(),
            "task_kind": self.task_kind.as_str(),
            "records": self.records.iter().map(record_to_json).collect::<Vec<_>>(),
        })
    }

    pub fn from_json(value: &Value) -> Result<RunReport> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Validation("report must be a JSON object".into()))?;
        let method = Method::parse(
            obj.get("method")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::Validation("report is missing method".into()))?,
        )?;
        let task_kind = TaskKind::parse(
            obj.get("task_kind")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::Validation("report is missing task_kind".into()))?,
        )?;
        let raw = obj
            .get("records")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Validation("report is missing its records array".into()))?;
        let mut records = Vec::with_capacity(raw.len());
        for (i, item) in raw.iter().enumerate() {
            records.push(
                record_from_json(item)
                    .map_err(|e| Error::Validation(format!("records[{i}]: {e}")))?,
            );
        }
        Ok(RunReport {
            method,
            task_kind,
            records,
        })
    }

    pub fn from_json_str(source: &str) -> Result<RunReport> {
        let value: Value =
            serde_json::from_str(source).map_err(|e| Error::from_json(&e, source))?;
        RunReport::from_json(&value)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_json()).expect("json"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunReport> {
        let source = std::fs::read_to_string(path)?;
        RunReport::from_json_str(&source)
    }
}

fn metrics_to_json(m: &Metrics) -> Value {
    let opt = |v: Option<f64>| v.map_or(Value::Null, |x| json!(x));
    json!({
        "loss": m.loss,
        "accuracy": opt(m.accuracy),
        "mae": opt(m.mae),
        "rmse": opt(m.rmse),
        "roc_auc": opt(m.roc_auc),
    })
}

fn metrics_from_json(value: &Value) -> Result<Metrics> {
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Validation("metrics must be a JSON object".into()))?;
    let opt = |name: &str| -> Option<f64> { obj.get(name).and_then(Value::as_f64) };
    Ok(Metrics {
        loss: opt("loss")
            .ok_or_else(|| Error::Validation("metrics are missing loss".into()))?,
        accuracy: opt("accuracy"),
        mae: opt("mae"),
        rmse: opt("rmse"),
        roc_auc: opt("roc_auc"),
    })
}

fn record_to_json(rec: &SeedRecord) -> Value {
    json!({
        "seed": rec.seed,
        "pretrain_metrics": rec.pretrain_metrics.as_ref().map_or(Value::Null, metrics_to_json),
        "train_metrics": metrics_to_json(&rec.train_metrics),
        "test_metrics": metrics_to_json(&rec.test_metrics),
        "trajectory": rec.trajectory,
        "wall_clock_secs": rec.wall_clock_secs,
        "param_hash_before": rec.param_hash_before,
        "param_hash_after": rec.param_hash_after,
        "artifact": rec.artifact.to_json(),
    })
}

fn record_from_json(value: &Value) -> Result<SeedRecord> {
    let req = |name: &str| -> Result<&Value> {
        value
            .get(name)
            .ok_or_else(|| Error::Validation(format!("record is missing {name}")))
    };
    let hash = |name: &str| -> Result<String> {
        Ok(req(name)?
            .as_str()
            .ok_or_else(|| Error::Validation(format!("{name} must be a string")))?
            .to_string())
    };
    Ok(SeedRecord {
        seed: req("seed")?
            .as_u64()
            .ok_or_else(|| Error::Validation("record seed must be an unsigned integer".into()))?,
        pretrain_metrics: match value.get("pretrain_metrics") {
            None | Some(Value::Null) => None,
            Some(v) => Some(metrics_from_json(v)?),
        },
        train_metrics: metrics_from_json(req("train_metrics")?)?,
        test_metrics: metrics_from_json(req("test_metrics")?)?,
        trajectory: serde_json::from_value(req("trajectory")?.clone())
            .map_err(|e| Error::Validation(format!("record trajectory: {e}")))?,
        wall_clock_secs: req("wall_clock_secs")?.as_f64().unwrap_or(f64::NAN),
        param_hash_before: hash("param_hash_before")?,
        param_hash_after: hash("param_hash_after")?,
        artifact: Artifact::from_json(req("artifact")?)?,
    })
}

/// Long-form metric rows, one line per (seed, split, metric); identical
/// bytes for identical configs.
pub fn metrics_csv(report: &RunReport) -> String {
    let mut out = String::from("method,seed,split,metric,value\n");
    for rec in &report.records {
        let splits: [(&str, Option<&Metrics>); 3] = [
            ("pretrain", rec.pretrain_metrics.as_ref()),
            ("train", Some(&rec.train_metrics)),
            ("test", Some(&rec.test_metrics)),
        ];
        for (split, metrics) in splits {
            let Some(metrics) = metrics else { continue };
            for (name, value) in metrics.entries() {
                writeln!(
                    out,
                    "{},{},{split},{name},{value}",
                    report.method.as_str(),
                    rec.seed
                )
                .expect("string write");
            }
        }
    }
    out
}

/// Runs the configured experiment over all seeds, in parallel when the
/// `parallel` feature is on, and writes outputs when `output_dir` is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    let resolved = cfg.resolve()?;
    let outcomes = exec::map_indexed(cfg.seeds.len(), |i| run_seed(&resolved, cfg.seeds[i]));
    let mut records = Vec::with_capacity(outcomes.len());
    for outcome in outcomes {
        records.push(outcome?);
    }
    let report = RunReport {
        method: cfg.method,
        task_kind: resolved.down_kind,
        records,
    };
    if let Some(dir) = &cfg.output_dir {
        write_run_outputs(&report, dir)?;
    }
    Ok(report)
}

fn write_run_outputs(report: &RunReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    report.save(&dir.join("report.json"))?;
    std::fs::write(dir.join("metrics.csv"), metrics_csv(report))?;
    for rec in &report.records {
        if let Artifact::Slim(plan) = &rec.artifact {
            std::fs::write(
                dir.join(format!("slim_plan_seed{}.csv", rec.seed)),
                plan.to_csv(),
            )?;
        }
    }
    Ok(())
}

fn run_seed(res: &ResolvedExperiment, seed: u64) -> Result<SeedRecord> {
    let started = Instant::now();
    let down = res.downstream_dataset(seed)?;
    let loss = &res.cfg.downstream.loss;
    let p = &res.cfg.params;

    if res.cfg.method == Method::Retrain {
        let opts = TrainOpts {
            lr: res.cfg.pretrain.opt.lr,
            epochs: res.cfg.pretrain.opt.epochs,
            seed,
        };
        let (model, trajectory) = pretrain_traced(&down, &res.cfg.pretrain.arch, &opts)?;
        let plain = LossSpec::new(loss.kind);
        let train_metrics = evaluate(&model, &down, &plain, MaskKind::Train, None)?;
        let test_metrics = evaluate(&model, &down, &plain, MaskKind::Test, None)?;
        return Ok(SeedRecord {
            seed,
            pretrain_metrics: None,
            train_metrics,
            test_metrics,
            trajectory,
            wall_clock_secs: started.elapsed().as_secs_f64(),
            param_hash_before: model.param_hash().to_string(),
            param_hash_after: model.param_hash().to_string(),
            artifact: Artifact::None,
        });
    }

    let pre = res.pretrain_dataset(seed)?;
    let model = match &res.model {
        Some(m) => m.clone(),
        None => {
            let opts = TrainOpts {
                lr: res.cfg.pretrain.opt.lr,
                epochs: res.cfg.pretrain.opt.epochs,
                seed,
            };
            pretrain(&pre, &res.cfg.pretrain.arch, &opts)?
        }
    };
    let param_hash_before = model.param_hash().to_string();
    let pre_loss = LossSpec::new(if pre.task_kind.is_classification() {
        LossKind::CrossEntropy
    } else {
        LossKind::Mse
    });
    let pretrain_metrics = Some(evaluate(&model, &pre, &pre_loss, MaskKind::Test, None)?);

    let opt = TrainOpts {
        lr: p.lr,
        epochs: p.epochs,
        seed,
    };
    let (train_metrics, test_metrics, trajectory, artifact) = match res.cfg.method {
        Method::Vanilla => {
            let (eval_ds, artifact) = if res.pad_size > 0 {
                let spec = PaddingSpec::zeros(res.pad_size, p.position, seed);
                (pad_dataset(&down, &spec)?, Artifact::Padding(spec))
            } else {
                (down.clone(), Artifact::None)
            };
            let train = evaluate(&model, &eval_ds, loss, MaskKind::Train, None)?;
            let test = evaluate(&model, &eval_ds, loss, MaskKind::Test, None)?;
            (train, test, Vec::new(), artifact)
        }
        Method::MetaFp => {
            let spec = PaddingSpec::new(res.pad_size, p.position, p.init_std, seed)?;
            let fitted = optimize_padding(&model, &down, &spec, loss, &opt)?;
            let eval_ds = pad_dataset(&down, &fitted.spec)?;
            let train = evaluate(&model, &eval_ds, loss, MaskKind::Train, None)?;
            let test = evaluate(&model, &eval_ds, loss, MaskKind::Test, None)?;
            (train, test, fitted.trajectory, Artifact::Padding(fitted.spec))
        }
        Method::EdgSlim => {
            let g = down.sole_graph()?;
            let before = training_loss_value(&model, g, loss)?;
            let (slimmed, plan) =
                slim_edges(&model, g, loss, p.recompute_every, p.max_deletions)?;
            let after = training_loss_value(&model, &slimmed, loss)?;
            let mut eval_ds = down.clone();
            eval_ds.graphs[0] = slimmed;
            let train = evaluate(&model, &eval_ds, loss, MaskKind::Train, None)?;
            let test = evaluate(&model, &eval_ds, loss, MaskKind::Test, None)?;
            (train, test, vec![before, after], Artifact::Slim(plan))
        }
        Method::MetaGp => {
            let meta = MetaGraph::new(p.num_meta_nodes, down.feat_dim(), p.init_std, seed)?;
            let fitted = optimize_meta_features(&model, &down, &meta, loss, &opt)?;
            let eval_ds = augment_dataset(&down, &fitted.meta)?;
            let train = evaluate(&model, &eval_ds, loss, MaskKind::Train, None)?;
            let test = evaluate(&model, &eval_ds, loss, MaskKind::Test, None)?;
            (train, test, fitted.trajectory, Artifact::Meta(fitted.meta))
        }
        Method::ReAgg | Method::MetaFpReAgg => {
            let padding = if res.cfg.method == Method::MetaFpReAgg && res.pad_size > 0 {
                Some(PaddingSpec::new(res.pad_size, p.position, p.init_std, seed)?)
            } else {
                None
            };
            let choice =
                AggregatorChoice::new(p.candidates.clone(), down.feat_dim(), p.tau, p.init_std, seed)?;
            let ropt = ReaggOpts {
                lr: p.lr,
                epochs: p.epochs,
                seed,
                tau_schedule: p.tau_schedule,
            };
            let trained = train_reagg(&model, &down, &choice, padding.as_ref(), loss, &ropt)?;
            let selected = task_selection(&trained.choice, &down)?;
            let agg = trained.choice.candidates[selected];
            let eval_ds = match &trained.padding {
                Some(spec) => pad_dataset(&down, spec)?,
                None => down.clone(),
            };
            let train = evaluate(&model, &eval_ds, loss, MaskKind::Train, Some(agg))?;
            let test = evaluate(&model, &eval_ds, loss, MaskKind::Test, Some(agg))?;
            let artifact = match trained.padding {
                Some(spec) => Artifact::Composed {
                    padding: spec,
                    choice: trained.choice,
                    selected,
                },
                None => Artifact::Choice {
                    choice: trained.choice,
                    histogram: trained.histogram,
                    selected,
                },
            };
            (train, test, trained.trajectory, artifact)
        }
        Method::Retrain => unreachable!("handled above"),
    };

    model.check_integrity()?;
    Ok(SeedRecord {
        seed,
        pretrain_metrics,
        train_metrics,
        test_metrics,
        trajectory,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        param_hash_before,
        param_hash_after: model.param_hash().to_string(),
        artifact,
    })
}

/// One deterministic aggregator for the whole downstream task: the noise
/// free argmax on the sole graph, or a majority vote over training graphs.
fn task_selection(choice: &AggregatorChoice, ds: &GraphDataset) -> Result<usize> {
    if ds.task_kind.is_node_level() {
        let logits = task_embedding(choice, ds.sole_graph()?)?;
        return Ok(argmax(&logits));
    }
    let train = ds.split_indices(MaskKind::Train)?;
    let mut votes = vec![0usize; choice.candidates.len()];
    for &gi in &train {
        votes[argmax(&task_embedding(choice, &ds.graphs[gi])?)] += 1;
    }
    let mut best = 0;
    for (i, &v) in votes.iter().enumerate() {
        if v > votes[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Per-seed aggregator sweep results on the downstream test split.
#[derive(Debug, Clone)]
pub struct SweepRecord {
    pub seed: u64,
    pub results: Vec<(Aggregator, Metrics)>,
}

/// Evaluates every candidate aggregator as a forward-time override on the
/// downstream test split, per seed.
pub fn sweep_aggregators(cfg: &ExperimentConfig) -> Result<Vec<SweepRecord>> {
    let resolved = cfg.resolve()?;
    let outcomes = exec::map_indexed(cfg.seeds.len(), |i| {
        sweep_seed(&resolved, cfg.seeds[i])
    });
    let mut records = Vec::with_capacity(outcomes.len());
    for outcome in outcomes {
        records.push(outcome?);
    }
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("sweep.csv"), sweep_csv(&records))?;
    }
    Ok(records)
}

fn sweep_seed(res: &ResolvedExperiment, seed: u64) -> Result<SweepRecord> {
    let pre = res.pretrain_dataset(seed)?;
    let down = res.downstream_dataset(seed)?;
    let model = match &res.model {
        Some(m) => m.clone(),
        None => {
            let opts = TrainOpts {
                lr: res.cfg.pretrain.opt.lr,
                epochs: res.cfg.pretrain.opt.epochs,
                seed,
            };
            pretrain(&pre, &res.cfg.pretrain.arch, &opts)?
        }
    };
    let eval_ds = if res.pad_size > 0 {
        let spec = PaddingSpec::zeros(res.pad_size, res.cfg.params.position, seed);
        pad_dataset(&down, &spec)?
    } else {
        down
    };
    let results = aggregator_sweep(
        &model,
        &eval_ds,
        &res.cfg.downstream.loss,
        &res.cfg.params.candidates,
    )?;
    Ok(SweepRecord { seed, results })
}

/// Long-form sweep rows: `aggregator,seed,metric,value`.
pub fn sweep_csv(records: &[SweepRecord]) -> String {
    let mut out = String::from("aggregator,seed,metric,value\n");
    for rec in records {
        for (agg, metrics) in &rec.results {
            for (name, value) in metrics.entries() {
                writeln!(out, "{},{},{name},{value}", agg.as_str(), rec.seed)
                    .expect("string write");
            }
        }
    }
    out
}
