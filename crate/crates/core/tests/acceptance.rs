//! Acceptance gate: ten end-to-end criteria, one pass/fail line each.

use std::rc::Rc;
use std::time::Instant;

use regraph::dataset::GraphDataset;
use regraph::graph::{Adjacency, Graph, MaskKind};
use regraph::harness::report::median;
use regraph::harness::run::RunReport;
use regraph::harness::{
    metrics_csv, run_experiment, sweep_aggregators, Artifact, DatasetSource, DownstreamSection,
    ExperimentConfig, Method, MethodParams, OptConfig, PretrainSection,
};
use regraph::metrics::{sliced_training_loss, LossKind, LossSpec, RowTargets};
use regraph::model::{
    pretrain, AggPlan, Aggregator, ArchConfig, FrozenModel, Readout, TrainOpts,
};
use regraph::padding::{required_pad_size, PadPosition};
use regraph::reagg::{gumbel_softmax, infer_reagg, AggregatorChoice, SelectionMode};
use regraph::rng::substream;
use regraph::synth::{generate_synthetic, SynthTaskSpec};
use regraph::tape::Tape;
use regraph::tensor::Tensor;

// ------------------------------------------------------------- builders --

#[allow(clippy::too_many_arguments)]
fn synth_source(
    seed: u64,
    nodes: usize,
    graphs: Option<usize>,
    dim: usize,
    classes: usize,
    intra: f64,
    inter: f64,
    noise: f64,
    subset: Option<Vec<usize>>,
) -> DatasetSource {
    DatasetSource::Synth {
        spec: SynthTaskSpec {
            seed,
            num_nodes: nodes,
            num_graphs: graphs,
            feat_dim: dim,
            num_classes: classes,
            intra_p: intra,
            inter_p: inter,
            noise_std: noise,
        },
        classes: subset,
        split: None,
    }
}

fn experiment(
    pre: DatasetSource,
    arch: ArchConfig,
    opt: OptConfig,
    down: DatasetSource,
    method: Method,
    params: MethodParams,
    seeds: Vec<u64>,
) -> ExperimentConfig {
    ExperimentConfig {
        pretrain: PretrainSection {
            dataset: pre,
            arch,
            opt,
            model: None,
        },
        downstream: DownstreamSection {
            dataset: down,
            task_kind: None,
            loss: LossSpec::new(LossKind::CrossEntropy),
        },
        method,
        params,
        seeds,
        output_dir: None,
    }
}

fn test_accuracies(report: &RunReport) -> Vec<f64> {
    report
        .records
        .iter()
        .map(|r| r.test_metrics.accuracy.expect("classification accuracy"))
        .collect()
}

fn median_test_accuracy(report: &RunReport) -> f64 {
    median(&test_accuracies(report))
}

fn seeds(n: u64) -> Vec<u64> {
    (0..n).collect()
}

// ------------------------------------------------- 1: gradient fidelity --

struct FdTrial {
    graph: Graph,
    model: FrozenModel,
    readout: Readout,
    targets: RowTargets,
    loss: LossSpec,
    mixture: Option<Vec<f64>>,
}

fn fd_trial(index: usize) -> FdTrial {
    let mut rng = substream(0x5EED, &format!("accept/fd/{index}"));
    let nodes = 4 + rng.next_range(5);
    let dim = 2 + rng.next_range(3);
    let classes = 2 + rng.next_range(2);
    let hidden = 3 + rng.next_range(3);
    let ds = generate_synthetic(&SynthTaskSpec {
        seed: rng.next_u64(),
        num_nodes: nodes,
        num_graphs: None,
        feat_dim: dim,
        num_classes: classes,
        intra_p: 0.6,
        inter_p: 0.3,
        noise_std: 0.8,
    })
    .expect("tiny world");
    let arch = ArchConfig {
        hidden_dims: vec![hidden],
        aggregator: Aggregator::ALL[index % 4],
        self_loops: index % 2 == 0,
    };
    let model = pretrain(
        &ds,
        &arch,
        &TrainOpts {
            lr: 0.0,
            epochs: 0,
            seed: rng.next_u64(),
        },
    )
    .expect("random model");

    let mut graph = ds.graphs.into_iter().next().expect("sole graph");
    for w in &mut graph.edge_weights {
        *w = 0.6 + 0.8 * rng.next_f64();
    }

    let labels: Vec<usize> = match graph.node_labels.as_ref().expect("labels") {
        regraph::graph::NodeLabels::Class(v) => v.iter().map(|&c| c as usize).collect(),
        _ => unreachable!("classification world"),
    };
    let train: Vec<usize> = graph
        .masks
        .as_ref()
        .expect("masks")
        .train
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| if m { Some(i) } else { None })
        .collect();
    assert!(!train.is_empty(), "criterion 01 FAIL: empty train mask");

    let (readout, targets, loss) = match index % 5 {
        3 => (
            Readout::MeanPool,
            RowTargets::Classes(vec![(0, rng.next_range(classes))]),
            LossSpec::new(LossKind::CrossEntropy),
        ),
        4 => (
            Readout::None,
            RowTargets::Values(
                train
                    .iter()
                    .map(|&r| (r, 2.0 * rng.next_f64() - 1.0))
                    .collect(),
            ),
            LossSpec {
                kind: LossKind::Mse,
                output_slice: Some((0, 1)),
            },
        ),
        _ if index % 2 == 1 => (
            Readout::None,
            RowTargets::Classes(train.iter().map(|&r| (r, labels[r] % 2)).collect()),
            LossSpec {
                kind: LossKind::CrossEntropy,
                output_slice: Some((0, 2)),
            },
        ),
        _ => (
            Readout::None,
            RowTargets::Classes(train.iter().map(|&r| (r, labels[r])).collect()),
            LossSpec::new(LossKind::CrossEntropy),
        ),
    };
    let mixture = if index % 3 == 0 {
        let raw: Vec<f64> = (0..4).map(|_| rng.next_f64()).collect();
        let total: f64 = raw.iter().sum();
        Some(raw.iter().map(|r| r / total).collect())
    } else {
        None
    };
    FdTrial {
        graph,
        model,
        readout,
        targets,
        loss,
        mixture,
    }
}

fn trial_plan(tape: &mut Tape, trial: &FdTrial, mix: Option<&[f64]>) -> AggPlan {
    match mix {
        None => AggPlan::Fixed(trial.model.aggregator()),
        Some(ms) => AggPlan::Mixture {
            candidates: Aggregator::ALL.to_vec(),
            weights: ms
                .iter()
                .map(|&m| tape.leaf(Tensor::from_vec(1, 1, vec![m]).expect("scalar")))
                .collect(),
        },
    }
}

fn trial_loss(
    trial: &FdTrial,
    adj: &Rc<Adjacency>,
    feats: &Tensor,
    weights: &[f64],
    mix: Option<&[f64]>,
) -> f64 {
    let mut tape = Tape::new();
    let f = tape.leaf(feats.clone());
    let w = tape.leaf(Tensor::row_vector(weights.to_vec()));
    let plan = trial_plan(&mut tape, trial, mix);
    let out = trial
        .model
        .forward_on_tape(&mut tape, f, w, adj, &plan, trial.readout)
        .expect("forward");
    let loss = sliced_training_loss(
        &mut tape,
        out,
        &trial.targets,
        &trial.loss,
        trial.model.out_dim(),
    )
    .expect("loss");
    tape.value(loss).at(0, 0)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

#[test]
fn criterion_01_gradients_match_finite_differences() {
    let started = Instant::now();
    let mut worst = 0.0f64;
    for index in 0..50 {
        let trial = fd_trial(index);
        let g = &trial.graph;
        let adj = Rc::new(trial.model.build_adjacency(g));

        let mut tape = Tape::new();
        let feats = tape.param(g.features.clone());
        let weights = tape.param(Tensor::row_vector(g.edge_weights.clone()));
        let mix_vars: Vec<_> = trial
            .mixture
            .as_deref()
            .map(|ms| {
                ms.iter()
                    .map(|&m| tape.param(Tensor::from_vec(1, 1, vec![m]).expect("scalar")))
                    .collect()
            })
            .unwrap_or_default();
        let plan = match trial.mixture.as_deref() {
            None => AggPlan::Fixed(trial.model.aggregator()),
            Some(_) => AggPlan::Mixture {
                candidates: Aggregator::ALL.to_vec(),
                weights: mix_vars.clone(),
            },
        };
        let out = trial
            .model
            .forward_on_tape(&mut tape, feats, weights, &adj, &plan, trial.readout)
            .expect("forward");
        let loss = sliced_training_loss(
            &mut tape,
            out,
            &trial.targets,
            &trial.loss,
            trial.model.out_dim(),
        )
        .expect("loss");
        tape.backward(loss).expect("backward");
        let feat_grad = tape.grad_or_zeros(feats);
        let weight_grad = tape.grad_or_zeros(weights);
        let mix_grads: Vec<f64> = mix_vars.iter().map(|&v| tape.grad_or_zeros(v).at(0, 0)).collect();

        let h = 1e-6;
        for r in 0..g.features.rows() {
            for c in 0..g.features.cols() {
                let mut up = g.features.clone();
                let mut down = g.features.clone();
                up.row_mut(r)[c] += h;
                down.row_mut(r)[c] -= h;
                let fd = (trial_loss(&trial, &adj, &up, &g.edge_weights, trial.mixture.as_deref())
                    - trial_loss(&trial, &adj, &down, &g.edge_weights, trial.mixture.as_deref()))
                    / (2.0 * h);
                worst = worst.max(rel_err(fd, feat_grad.at(r, c)));
            }
        }
        for e in 0..g.edge_weights.len() {
            let mut up = g.edge_weights.clone();
            let mut down = g.edge_weights.clone();
            up[e] += h;
            down[e] -= h;
            let fd = (trial_loss(&trial, &adj, &g.features, &up, trial.mixture.as_deref())
                - trial_loss(&trial, &adj, &g.features, &down, trial.mixture.as_deref()))
                / (2.0 * h);
            worst = worst.max(rel_err(fd, weight_grad.at(0, e)));
        }
        if let Some(ms) = trial.mixture.as_deref() {
            for (k, &gk) in mix_grads.iter().enumerate() {
                let mut up = ms.to_vec();
                let mut down = ms.to_vec();
                up[k] += h;
                down[k] -= h;
                let fd = (trial_loss(&trial, &adj, &g.features, &g.edge_weights, Some(&up))
                    - trial_loss(&trial, &adj, &g.features, &g.edge_weights, Some(&down)))
                    / (2.0 * h);
                worst = worst.max(rel_err(fd, gk));
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(
        worst < 1e-5,
        "criterion 01 FAIL: worst relative gradient error {worst:.3e} >= 1e-5"
    );
    assert!(
        elapsed < 10.0,
        "criterion 01 FAIL: gradient checks took {elapsed:.1}s >= 10s"
    );
    println!(
        "criterion 01 gradient fidelity: PASS (50 models, worst rel err {worst:.3e}, {elapsed:.2}s)"
    );
}

// --------------------------------------------- 2: frozen hash stability --

#[test]
fn criterion_02_param_hash_preserved_across_methods() {
    let hetero_pre = || synth_source(3, 48, None, 8, 3, 0.25, 0.05, 0.4, None);
    let hetero_down = || synth_source(4, 48, None, 6, 3, 0.25, 0.05, 0.4, None);
    let homo_down = || synth_source(5, 48, None, 8, 3, 0.25, 0.05, 0.4, None);
    let graph_pre = || synth_source(6, 8, Some(10), 5, 2, 0.5, 0.2, 0.4, None);
    let graph_down = || synth_source(7, 8, Some(10), 5, 2, 0.5, 0.2, 0.4, None);
    let arch = || ArchConfig {
        hidden_dims: vec![8],
        ..ArchConfig::default()
    };
    let opt = OptConfig { lr: 0.4, epochs: 20 };
    let params = || MethodParams {
        lr: 0.3,
        epochs: 6,
        recompute_every: 10,
        max_deletions: Some(40),
        ..MethodParams::default()
    };

    let configs = vec![
        (Method::Vanilla, hetero_pre(), hetero_down()),
        (Method::MetaFp, hetero_pre(), hetero_down()),
        (Method::MetaFpReAgg, hetero_pre(), hetero_down()),
        (Method::Retrain, hetero_pre(), hetero_down()),
        (Method::EdgSlim, hetero_pre(), homo_down()),
        (Method::ReAgg, hetero_pre(), homo_down()),
        (Method::MetaGp, graph_pre(), graph_down()),
    ];
    let mut checked = 0;
    for (method, pre, down) in configs {
        let cfg = experiment(pre, arch(), opt, down, method, params(), seeds(5));
        let report = run_experiment(&cfg).expect("run");
        assert_eq!(report.records.len(), 5, "criterion 02 FAIL: missing seeds");
        if method == Method::Retrain {
            continue;
        }
        for rec in &report.records {
            assert_eq!(
                rec.param_hash_before, rec.param_hash_after,
                "criterion 02 FAIL: {} seed {} changed the frozen parameters",
                method.as_str(),
                rec.seed
            );
            checked += 1;
        }
    }
    println!("criterion 02 hash stability: PASS ({checked} reprogramming runs left the frozen model untouched)");
}

// ------------------------------------ 3: padding transfer vs baselines --

fn transfer_config(method: Method) -> ExperimentConfig {
    experiment(
        synth_source(101, 300, None, 16, 4, 0.2, 0.04, 0.4, None),
        ArchConfig {
            hidden_dims: vec![16],
            ..ArchConfig::default()
        },
        OptConfig { lr: 0.4, epochs: 60 },
        synth_source(102, 600, None, 12, 8, 0.2, 0.04, 0.4, Some(vec![4, 5, 6, 7])),
        method,
        MethodParams {
            lr: 0.6,
            epochs: 150,
            init_std: 0.05,
            ..MethodParams::default()
        },
        seeds(20),
    )
}

#[test]
fn criterion_03_padding_beats_vanilla_and_tracks_retrain() {
    let started = Instant::now();
    let padded = run_experiment(&transfer_config(Method::MetaFp)).expect("metafp run");
    let vanilla = run_experiment(&transfer_config(Method::Vanilla)).expect("vanilla run");
    let retrain = run_experiment(&transfer_config(Method::Retrain)).expect("retrain run");
    let elapsed = started.elapsed().as_secs_f64();

    let med_p = median_test_accuracy(&padded);
    let med_v = median_test_accuracy(&vanilla);
    let med_r = median_test_accuracy(&retrain);
    assert!(
        med_p >= med_v + 0.10,
        "criterion 03 FAIL: metafp median {med_p:.3} < vanilla median {med_v:.3} + 0.10"
    );
    assert!(
        med_p >= 0.85 * med_r,
        "criterion 03 FAIL: metafp median {med_p:.3} < 0.85 * retrain median {med_r:.3}"
    );
    assert!(
        elapsed < 60.0,
        "criterion 03 FAIL: transfer comparison took {elapsed:.1}s >= 60s"
    );
    println!(
        "criterion 03 padding transfer: PASS (metafp {med_p:.3}, vanilla {med_v:.3}, retrain {med_r:.3}, {elapsed:.1}s)"
    );
}

// ------------------------------------------ 4: pad arithmetic, position --

#[test]
fn criterion_04_pad_sizes_and_positions() {
    for (big, small, gap) in [
        (3703, 1433, 2270),
        (3703, 500, 3203),
        (1433, 500, 933),
        (767, 745, 22),
    ] {
        let got = required_pad_size(big, small).expect("pad size");
        assert_eq!(
            got, gap,
            "criterion 04 FAIL: pad for {big}<-{small} computed {got}, want {gap}"
        );
    }

    let mut medians = Vec::new();
    for position in [
        PadPosition::Front,
        PadPosition::Center,
        PadPosition::End,
        PadPosition::Random,
    ] {
        let cfg = experiment(
            synth_source(111, 120, None, 8, 2, 0.3, 0.06, 0.4, None),
            ArchConfig {
                hidden_dims: vec![12],
                ..ArchConfig::default()
            },
            OptConfig { lr: 0.4, epochs: 40 },
            synth_source(112, 320, None, 6, 4, 0.3, 0.06, 0.4, Some(vec![2, 3])),
            Method::MetaFp,
            MethodParams {
                position,
                lr: 0.6,
                epochs: 120,
                init_std: 0.05,
                ..MethodParams::default()
            },
            seeds(12),
        );
        let report = run_experiment(&cfg).expect("position run");
        medians.push((position.as_str(), median_test_accuracy(&report)));
    }
    let best = medians.iter().map(|(_, m)| *m).fold(f64::MIN, f64::max);
    let worst = medians.iter().map(|(_, m)| *m).fold(f64::MAX, f64::min);
    assert!(
        best - worst <= 0.05,
        "criterion 04 FAIL: position medians spread {:.3} > 0.05 ({medians:?})",
        best - worst
    );
    println!(
        "criterion 04 pad arithmetic and positions: PASS (gaps 2270/3203/933/22, position spread {:.3})",
        best - worst
    );
}

// ----------------------------------------------- 5: edge slimming lift --

fn slim_world(method: Method, params: MethodParams) -> ExperimentConfig {
    experiment(
        synth_source(121, 360, None, 8, 4, 0.3, 0.15, 0.35, Some(vec![0, 1])),
        ArchConfig {
            hidden_dims: vec![12],
            ..ArchConfig::default()
        },
        OptConfig { lr: 0.4, epochs: 50 },
        synth_source(122, 360, None, 8, 4, 0.3, 0.15, 0.35, Some(vec![2, 3])),
        method,
        params,
        seeds(20),
    )
}

#[test]
fn criterion_05_slimming_beats_vanilla_on_class_shift() {
    let slim_cfg = slim_world(
        Method::EdgSlim,
        MethodParams {
            recompute_every: 24,
            max_deletions: Some(400),
            ..MethodParams::default()
        },
    );
    let slim = run_experiment(&slim_cfg).expect("edgslim run");
    let vanilla = run_experiment(&slim_world(Method::Vanilla, MethodParams::default()))
        .expect("vanilla run");

    let med_s = median_test_accuracy(&slim);
    let med_v = median_test_accuracy(&vanilla);
    assert!(
        med_s >= med_v + 0.05,
        "criterion 05 FAIL: edgslim median {med_s:.3} < vanilla median {med_v:.3} + 0.05"
    );

    let resolved = slim_cfg.resolve().expect("resolve");
    let mut drops = 0;
    for rec in &slim.records {
        assert_eq!(rec.trajectory.len(), 2, "criterion 05 FAIL: missing loss endpoints");
        if rec.trajectory[1] < rec.trajectory[0] {
            drops += 1;
        }
        let down = resolved.downstream_dataset(rec.seed).expect("dataset");
        let available = down.sole_graph().expect("graph").logical_edges().len();
        let deleted = match &rec.artifact {
            Artifact::Slim(plan) => plan.entries.len(),
            other => panic!("criterion 05 FAIL: unexpected artifact {other:?}"),
        };
        assert!(
            deleted <= available,
            "criterion 05 FAIL: seed {} deleted {deleted} of {available} edges",
            rec.seed
        );
    }
    assert!(
        drops * 10 >= slim.records.len() * 9,
        "criterion 05 FAIL: training loss dropped on only {drops}/{} seeds",
        slim.records.len()
    );
    println!(
        "criterion 05 edge slimming: PASS (edgslim {med_s:.3}, vanilla {med_v:.3}, loss drop on {drops}/{} seeds)",
        slim.records.len()
    );
}

// ------------------------------------------------ 6: meta-node padding --

fn meta_world(method: Method) -> ExperimentConfig {
    experiment(
        synth_source(131, 12, Some(30), 6, 2, 0.5, 0.15, 0.4, None),
        ArchConfig {
            hidden_dims: vec![10],
            ..ArchConfig::default()
        },
        OptConfig { lr: 0.4, epochs: 60 },
        synth_source(132, 12, Some(60), 6, 4, 0.5, 0.15, 0.4, Some(vec![2, 3])),
        method,
        MethodParams {
            num_meta_nodes: 10,
            lr: 0.4,
            epochs: 100,
            init_std: 0.05,
            ..MethodParams::default()
        },
        seeds(20),
    )
}

#[test]
fn criterion_06_meta_nodes_lift_graph_classification() {
    let meta = run_experiment(&meta_world(Method::MetaGp)).expect("metagp run");
    let vanilla = run_experiment(&meta_world(Method::Vanilla)).expect("vanilla run");

    let med_m = median_test_accuracy(&meta);
    let med_v = median_test_accuracy(&vanilla);
    assert!(
        med_m >= med_v + 0.10,
        "criterion 06 FAIL: metagp median {med_m:.3} < vanilla median {med_v:.3} + 0.10"
    );
    for rec in &meta.records {
        assert_eq!(
            rec.param_hash_before, rec.param_hash_after,
            "criterion 06 FAIL: seed {} changed the frozen parameters",
            rec.seed
        );
    }
    println!(
        "criterion 06 meta-graph padding: PASS (metagp {med_m:.3}, vanilla {med_v:.3}, hashes stable on {} seeds)",
        meta.records.len()
    );
}

// ------------------------------------------------- 7: gumbel sampling --

#[test]
fn criterion_07_gumbel_sampler_statistics() {
    let logits = [0.8, -0.4, 0.3, 0.0];
    let tau = 0.7;
    let n = 100_000;
    let mut rng = substream(7, "accept/gumbel/tv");
    let mut counts = [0usize; 4];
    for _ in 0..n {
        let sample = gumbel_softmax(&logits, tau, &mut rng, SelectionMode::Hard).expect("sample");
        counts[sample.selected] += 1;
    }
    let max = logits.iter().cloned().fold(f64::MIN, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    let tv: f64 = counts
        .iter()
        .zip(&exps)
        .map(|(&c, e)| (c as f64 / n as f64 - e / denom).abs())
        .sum::<f64>()
        / 2.0;
    assert!(
        tv <= 0.01,
        "criterion 07 FAIL: total variation {tv:.4} > 0.01 over {n} hard samples"
    );

    for trial in 0..50 {
        let mut rng = substream(trial, "accept/gumbel/anticollapse");
        let mut seen = [false; 4];
        for _ in 0..80 {
            let sample =
                gumbel_softmax(&[0.0; 4], 1.0, &mut rng, SelectionMode::Hard).expect("sample");
            seen[sample.selected] = true;
        }
        assert!(
            seen.iter().all(|&s| s),
            "criterion 07 FAIL: trial {trial} collapsed to a candidate subset {seen:?}"
        );
    }

    let draw = |seed| {
        let mut rng = substream(seed, "accept/gumbel/replay");
        (0..25)
            .map(|_| {
                gumbel_softmax(&logits, tau, &mut rng, SelectionMode::Hard)
                    .expect("sample")
                    .selected
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(
        draw(11),
        draw(11),
        "criterion 07 FAIL: hard selection is not reproducible under the same seed"
    );

    let ds = generate_synthetic(&SynthTaskSpec {
        seed: 141,
        num_nodes: 30,
        num_graphs: None,
        feat_dim: 4,
        num_classes: 2,
        intra_p: 0.4,
        inter_p: 0.1,
        noise_std: 0.4,
    })
    .expect("world");
    let model = pretrain(
        &ds,
        &ArchConfig {
            hidden_dims: vec![6],
            ..ArchConfig::default()
        },
        &TrainOpts {
            lr: 0.3,
            epochs: 10,
            seed: 1,
        },
    )
    .expect("model");
    let choice = AggregatorChoice::new(Aggregator::ALL.to_vec(), 4, 1.0, 0.05, 9).expect("choice");
    let g = ds.sole_graph().expect("graph");
    let loss = LossSpec::new(LossKind::CrossEntropy);
    let (out_a, sel_a) = infer_reagg(&model, g, &choice, None, &loss).expect("infer");
    let (out_b, sel_b) = infer_reagg(&model, g, &choice, None, &loss).expect("infer");
    assert_eq!(
        (out_a.data(), sel_a),
        (out_b.data(), sel_b),
        "criterion 07 FAIL: deterministic inference disagrees with itself"
    );
    println!(
        "criterion 07 gumbel statistics: PASS (tv {tv:.4}, 50 trials saw all 4 candidates, hard replay stable)"
    );
}

// -------------------------------------------- 8: padding convergence --

#[test]
fn criterion_08_padding_converges_within_ten_epochs() {
    let cfg = experiment(
        synth_source(151, 200, None, 10, 3, 0.2, 0.04, 0.4, None),
        ArchConfig {
            hidden_dims: vec![12],
            ..ArchConfig::default()
        },
        OptConfig { lr: 0.4, epochs: 40 },
        synth_source(152, 400, None, 8, 6, 0.2, 0.04, 0.4, Some(vec![3, 4, 5])),
        Method::MetaFp,
        MethodParams {
            lr: 0.6,
            epochs: 80,
            init_std: 0.05,
            ..MethodParams::default()
        },
        seeds(20),
    );
    let report = run_experiment(&cfg).expect("metafp run");
    let mut settle = Vec::new();
    let mut firsts = Vec::new();
    let mut finals = Vec::new();
    for rec in &report.records {
        let traj = &rec.trajectory;
        assert!(!traj.is_empty(), "criterion 08 FAIL: empty trajectory");
        let last = *traj.last().expect("non-empty");
        let epoch = traj
            .iter()
            .position(|&l| l <= last + 0.01 * last.abs())
            .expect("final is in the trajectory");
        settle.push(epoch as f64);
        firsts.push(traj[0]);
        finals.push(last);
    }
    let med_epoch = median(&settle);
    let med_first = median(&firsts);
    let med_final = median(&finals);
    assert!(
        med_final <= 0.8 * med_first,
        "criterion 08 FAIL: padding barely trained (first {med_first:.3}, final {med_final:.3})"
    );
    assert!(
        med_epoch <= 10.0,
        "criterion 08 FAIL: median settle epoch {med_epoch} > 10"
    );
    println!(
        "criterion 08 padding convergence: PASS (median settle epoch {med_epoch}, loss {med_first:.3} -> {med_final:.3})"
    );
}

// ------------------------------------------------- 9: aggregator sweep --

#[test]
fn criterion_09_aggregator_sweep_separates_candidates() {
    let cfg = slim_world(Method::Vanilla, MethodParams::default());
    let records = sweep_aggregators(&cfg).expect("sweep");
    assert_eq!(records.len(), 20, "criterion 09 FAIL: missing sweep seeds");

    let mut medians = Vec::new();
    for (i, agg) in Aggregator::ALL.iter().enumerate() {
        let accs: Vec<f64> = records
            .iter()
            .map(|r| {
                assert_eq!(r.results[i].0, *agg, "criterion 09 FAIL: candidate order drifted");
                r.results[i].1.accuracy.expect("classification accuracy")
            })
            .collect();
        medians.push((agg.as_str(), median(&accs)));
    }
    let best = medians.iter().map(|(_, m)| *m).fold(f64::MIN, f64::max);
    let worst = medians.iter().map(|(_, m)| *m).fold(f64::MAX, f64::min);
    assert!(
        best - worst >= 0.03,
        "criterion 09 FAIL: aggregator medians spread {:.3} < 0.03 ({medians:?})",
        best - worst
    );
    println!(
        "criterion 09 aggregator sweep: PASS (median spread {:.3}, {medians:?})",
        best - worst
    );
}

// ------------------------------------------------ 10: deterministic csv --

#[test]
fn criterion_10_metrics_csv_reruns_identically() {
    let cfg = experiment(
        synth_source(3, 48, None, 8, 3, 0.25, 0.05, 0.4, None),
        ArchConfig {
            hidden_dims: vec![8],
            ..ArchConfig::default()
        },
        OptConfig { lr: 0.4, epochs: 20 },
        synth_source(4, 48, None, 6, 3, 0.25, 0.05, 0.4, None),
        Method::MetaFp,
        MethodParams {
            lr: 0.3,
            epochs: 10,
            ..MethodParams::default()
        },
        vec![0, 1, 2],
    );
    let first = metrics_csv(&run_experiment(&cfg).expect("first run"));
    let second = metrics_csv(&run_experiment(&cfg).expect("second run"));
    assert!(
        first.starts_with("method,seed,split,metric,value\n"),
        "criterion 10 FAIL: csv header changed"
    );
    assert_eq!(
        first, second,
        "criterion 10 FAIL: reruns emitted different csv bytes"
    );
    println!(
        "criterion 10 deterministic csv: PASS ({} bytes, byte-identical rerun)",
        first.len()
    );
}
