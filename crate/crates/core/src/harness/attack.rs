//! Resource-exhaustion demo: a shared additive feature perturbation turns a
//! frozen victim model into a solver for the attacker's task.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use serde_json::{json, Value};

use crate::dataset::GraphDataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::graph::MaskKind;
use crate::harness::config::{DatasetSource, PretrainSection};
use crate::metrics::{evaluate, node_train_targets, sliced_training_loss, LossSpec, Metrics};
use crate::model::{pretrain, AggPlan, FrozenModel, TrainOpts};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub victim: PretrainSection,
    pub attacker_dataset: DatasetSource,
    pub loss: LossSpec,
    pub steps: usize,
    pub lr: f64,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
}

impl AttackConfig {
    pub fn from_json(value: &Value) -> Result<AttackConfig> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Config("attack config must be a JSON object".into()))?;
        for key in obj.keys() {
            if !["victim", "attacker", "steps", "lr", "seeds", "output_dir"]
                .contains(&key.as_str())
            {
                return Err(Error::Config(format!(
                    "unknown key {key:?} in attack config"
                )));
            }
        }
        let victim_value = obj
            .get("victim")
            .cloned()
            .ok_or_else(|| Error::Config("missing victim section".into()))?;
        let attacker_value = obj
            .get("attacker")
            .cloned()
            .ok_or_else(|| Error::Config("missing attacker section".into()))?;
        let shim = json!({
            "pretrain": victim_value,
            "downstream": attacker_value,
            "method": "vanilla",
            "seeds": obj.get("seeds").cloned().unwrap_or_else(|| json!([0])),
            "output_dir": obj.get("output_dir").cloned().unwrap_or(Value::Null),
        });
        let base = crate::harness::config::ExperimentConfig::from_json(&shim)?;
        let steps = match obj.get("steps") {
            None => 50,
            Some(v) => v
                .as_u64()
                .ok_or_else(|| Error::Config("steps must be an unsigned integer".into()))?
                as usize,
        };
        let lr = match obj.get("lr") {
            None => 0.5,
            Some(v) => v
                .as_f64()
                .ok_or_else(|| Error::Config("lr must be a number".into()))?,
        };
        Ok(AttackConfig {
            victim: base.pretrain,
            attacker_dataset: base.downstream.dataset,
            loss: base.downstream.loss,
            steps,
            lr,
            seeds: base.seeds,
            output_dir: base.output_dir,
        })
    }

    pub fn from_json_str(source: &str) -> Result<AttackConfig> {
        let value: Value =
            serde_json::from_str(source).map_err(|e| Error::from_json(&e, source))?;
        AttackConfig::from_json(&value)
    }

    pub fn load(path: &Path) -> Result<AttackConfig> {
        let source = std::fs::read_to_string(path)?;
        AttackConfig::from_json_str(&source)
    }

    fn validate_pre_compute(&self) -> Result<(GraphDataset, GraphDataset)> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds list is empty".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!(
                "lr = {} must be a non-negative real",
                self.lr
            )));
        }
        let victim_base = self.victim.dataset.realize(None, "")?;
        let attacker_base = self.attacker_dataset.realize(None, "")?;
        if victim_base.feat_dim() != attacker_base.feat_dim() {
            return Err(Error::Config(format!(
                "attack demo requires homogeneous feature dimensions; \
                 victim has {} and attacker has {}",
                victim_base.feat_dim(),
                attacker_base.feat_dim()
            )));
        }
        if !attacker_base.task_kind.is_node_level() {
            return Err(Error::Config(
                "attack demo supports transductive node-level attacker tasks only".into(),
            ));
        }
        let classification = attacker_base.task_kind.is_classification();
        if classification != (self.loss.kind == crate::metrics::LossKind::CrossEntropy) {
            return Err(Error::Config(format!(
                "loss {} does not fit a {} task",
                self.loss.kind.as_str(),
                attacker_base.task_kind.as_str()
            )));
        }
        Ok((victim_base, attacker_base))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackSeedRecord {
    pub seed: u64,
    pub before_train: Metrics,
    pub before_test: Metrics,
    pub after_train: Metrics,
    pub after_test: Metrics,
    pub perturbation: Vec<f64>,
    pub trajectory: Vec<f64>,
    pub wall_clock_secs: f64,
    pub victim_hash_before: String,
    pub victim_hash_after: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackReport {
    pub records: Vec<AttackSeedRecord>,
}

impl AttackReport {
    pub fn to_json(&self) -> Value {
        let metrics_json = |m: &Metrics| {
            let opt = |v: Option<f64>| v.map_or(Value::Null, |x| json!(x));
            json!({
                "loss": m.loss,
                "accuracy": opt(m.accuracy),
                "mae": opt(m.mae),
                "rmse": opt(m.rmse),
                "roc_auc": opt(m.roc_auc),
            })
        };
        json!({
            "format_version": crate::graph::FORMAT_VERSION,
            "records": self.records.iter().map(|r| json!({
                "seed": r.seed,
                "before_train": metrics_json(&r.before_train),
                "before_test": metrics_json(&r.before_test),
                "after_train": metrics_json(&r.after_train),
                "after_test": metrics_json(&r.after_test),
                "perturbation": r.perturbation,
                "trajectory": r.trajectory,
                "wall_clock_secs": r.wall_clock_secs,
                "victim_hash_before": r.victim_hash_before,
                "victim_hash_after": r.victim_hash_after,
            })).collect::<Vec<_>>(),
        })
    }
}

/// Long-form rows: `seed,phase,split,metric,value` with phase before/after.
pub fn attack_csv(report: &AttackReport) -> String {
    let mut out = String::from("seed,phase,split,metric,value\n");
    for rec in &report.records {
        let cells = [
            ("before", "train", &rec.before_train),
            ("before", "test", &rec.before_test),
            ("after", "train", &rec.after_train),
            ("after", "test", &rec.after_test),
        ];
        for (phase, split, metrics) in cells {
            for (name, value) in metrics.entries() {
                writeln!(out, "{},{phase},{split},{name},{value}", rec.seed)
                    .expect("string write");
            }
        }
    }
    out
}

/// Pretrains the victim, then optimizes a full-dimension additive
/// perturbation shared across nodes on the attacker's training mask. The
/// victim stays frozen; zero steps reproduce the vanilla-reuse metrics.
pub fn attack_demo(cfg: &AttackConfig) -> Result<AttackReport> {
    let (_, _) = cfg.validate_pre_compute()?;
    let outcomes = exec::map_indexed(cfg.seeds.len(), |i| attack_seed(cfg, cfg.seeds[i]));
    let mut records = Vec::with_capacity(outcomes.len());
    for outcome in outcomes {
        records.push(outcome?);
    }
    let report = AttackReport { records };
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("attack_report.json"),
            serde_json::to_string(&report.to_json()).expect("json"),
        )?;
        std::fs::write(dir.join("attack.csv"), attack_csv(&report))?;
    }
    Ok(report)
}

fn attack_seed(cfg: &AttackConfig, seed: u64) -> Result<AttackSeedRecord> {
    let started = Instant::now();
    let victim_ds = cfg.victim.dataset.realize(Some(seed), "data/victim")?;
    let attacker_ds = cfg.attacker_dataset.realize(Some(seed), "data/attacker")?;
    let opts = TrainOpts {
        lr: cfg.victim.opt.lr,
        epochs: cfg.victim.opt.epochs,
        seed,
    };
    let victim = match &cfg.victim.model {
        Some(path) => FrozenModel::load(path)?,
        None => pretrain(&victim_ds, &cfg.victim.arch, &opts)?,
    };
    let victim_hash_before = victim.param_hash().to_string();

    let before_train = evaluate(&victim, &attacker_ds, &cfg.loss, MaskKind::Train, None)?;
    let before_test = evaluate(&victim, &attacker_ds, &cfg.loss, MaskKind::Test, None)?;

    let g = attacker_ds.sole_graph()?;
    victim.check_feat_dim(g.feat_dim())?;
    let targets = node_train_targets(g)?;
    let adj = Rc::new(victim.build_adjacency(g));
    let plan = AggPlan::Fixed(victim.aggregator());
    let mut perturbation = Tensor::zeros(1, g.feat_dim());
    let mut trajectory = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let delta = tape.param(perturbation.clone());
        let wide = tape.broadcast_rows(delta, g.num_nodes)?;
        let base = tape.leaf(g.features.clone());
        let shifted = tape.add(base, wide)?;
        let weights = tape.leaf(Tensor::row_vector(g.edge_weights.clone()));
        let out = victim.forward_on_tape(&mut tape, shifted, weights, &adj, &plan, victim.readout())?;
        let loss_var =
            sliced_training_loss(&mut tape, out, &targets, &cfg.loss, victim.out_dim())?;
        let loss_value = tape.value(loss_var).scalar_value();
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite attack loss {loss_value} at step {step}"
            )));
        }
        trajectory.push(loss_value);
        tape.backward(loss_var)?;
        let grad = tape.grad_or_zeros(delta);
        for (p, g) in perturbation.data_mut().iter_mut().zip(grad.data()) {
            *p -= cfg.lr * g;
        }
    }

    let mut attacked = g.clone();
    for i in 0..attacked.num_nodes {
        let row = attacked.features.row_mut(i);
        for (x, d) in row.iter_mut().zip(perturbation.data()) {
            *x += d;
        }
    }
    let mut attacked_ds = attacker_ds.clone();
    attacked_ds.graphs[0] = attacked;
    let after_train = evaluate(&victim, &attacked_ds, &cfg.loss, MaskKind::Train, None)?;
    let after_test = evaluate(&victim, &attacked_ds, &cfg.loss, MaskKind::Test, None)?;

    victim.check_integrity()?;
    Ok(AttackSeedRecord {
        seed,
        before_train,
        before_test,
        after_train,
        after_test,
        perturbation: perturbation.data().to_vec(),
        trajectory,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        victim_hash_before,
        victim_hash_after: victim.param_hash().to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::{DatasetSource, OptConfig};
    use crate::model::ArchConfig;
    use crate::synth::SynthTaskSpec;

    fn demo_config(steps: usize) -> AttackConfig {
        let spec = |seed: u64| SynthTaskSpec {
            seed,
            num_nodes: 40,
            num_graphs: None,
            feat_dim: 4,
            num_classes: 2,
            intra_p: 0.5,
            inter_p: 0.05,
            noise_std: 0.3,
        };
        AttackConfig {
            victim: PretrainSection {
                dataset: DatasetSource::Synth {
                    spec: spec(1),
                    classes: None,
                    split: None,
                },
                arch: ArchConfig {
                    hidden_dims: vec![6],
                    ..ArchConfig::default()
                },
                opt: OptConfig { lr: 0.5, epochs: 15 },
                model: None,
            },
            attacker_dataset: DatasetSource::Synth {
                spec: SynthTaskSpec {
                    num_classes: 4,
                    ..spec(2)
                },
                classes: Some(vec![2, 3]),
                split: None,
            },
            loss: LossSpec::new(crate::metrics::LossKind::CrossEntropy),
            steps,
            lr: 0.5,
            seeds: vec![0],
            output_dir: None,
        }
    }

    #[test]
    fn zero_steps_reproduce_vanilla_reuse() {
        let report = attack_demo(&demo_config(0)).unwrap();
        let rec = &report.records[0];
        assert_eq!(rec.before_train, rec.after_train);
        assert_eq!(rec.before_test, rec.after_test);
        assert!(rec.perturbation.iter().all(|&d| d == 0.0));
        assert!(rec.trajectory.is_empty());
    }

    #[test]
    fn descent_improves_the_attacker_objective_and_keeps_the_victim_frozen() {
        let report = attack_demo(&demo_config(40)).unwrap();
        let rec = &report.records[0];
        assert!(rec.after_train.loss < rec.before_train.loss);
        assert!(rec.trajectory.first().unwrap() >= rec.trajectory.last().unwrap());
        assert_eq!(rec.victim_hash_before, rec.victim_hash_after);
        assert!(rec.perturbation.iter().any(|&d| d != 0.0));
    }

    #[test]
    fn heterogeneous_dimensions_are_rejected() {
        let mut cfg = demo_config(1);
        if let DatasetSource::Synth { spec, .. } = &mut cfg.attacker_dataset {
            spec.feat_dim = 6;
        }
        let err = attack_demo(&cfg).unwrap_err();
        assert!(err.to_string().contains("homogeneous"));
    }

    #[test]
    fn config_parses_from_json_with_defaults() {
        let value = serde_json::json!({
            "victim": {
                "dataset": { "synth": { "num_nodes": 20, "feat_dim": 3, "num_classes": 2 } },
                "opt": { "epochs": 5 },
            },
            "attacker": {
                "dataset": { "synth": { "num_nodes": 20, "feat_dim": 3, "num_classes": 2, "seed": 9 } },
            },
            "steps": 7,
            "seeds": [3],
        });
        let cfg = AttackConfig::from_json(&value).unwrap();
        assert_eq!(cfg.steps, 7);
        assert_eq!(cfg.lr, 0.5);
        assert_eq!(cfg.seeds, vec![3]);
        let report = attack_demo(&cfg).unwrap();
        assert_eq!(report.records.len(), 1);
        let csv = attack_csv(&report);
        assert!(csv.starts_with("seed,phase,split,metric,value\n"));
        assert!(csv.contains("3,after,test,accuracy,"));
    }
}
