//! Command-line front end: pretrain, reprogram, evaluate, attack demo,
//! aggregator sweeps, and report summaries over JSON experiment configs.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use regraph::graph::MaskKind;
use regraph::harness::{
    attack_csv, attack_demo, report_summary, run_experiment, sweep_aggregators, sweep_csv,
    AttackConfig, ExperimentConfig, Method,
};
use regraph::harness::run::RunReport;
use regraph::metrics::{evaluate, LossKind, LossSpec, Metrics};
use regraph::model::{pretrain_traced, TrainOpts};
use regraph::{Error, Result};

#[derive(Parser)]
#[command(
    name = "regraph",
    version,
    about = "Reprogram frozen graph neural networks for new tasks"
)]
struct Cli {
    /// Experiment config JSON (attack config for attack-demo).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Replace the config's seed list with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the config's output_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on the pretraining task, save it, and report test metrics.
    Pretrain,
    /// Run the configured reprogramming method over all seeds.
    Reprogram,
    /// Evaluate a saved (or freshly pretrained) model on the downstream task.
    Eval {
        /// Saved model JSON to evaluate; pretrains one when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Optimize a shared feature perturbation so a frozen victim model
    /// solves the attacker's task.
    AttackDemo,
    /// Score every candidate aggregator as a forward-time override.
    SweepAggregators,
    /// Summarize one or more saved run reports across seeds.
    Report {
        /// Paths to report.json files.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Report { reports } = &cli.command {
        return cmd_report(reports, cli.out.as_deref());
    }
    let config_path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required for this subcommand".into()))?;
    if let Command::AttackDemo = &cli.command {
        let mut cfg = AttackConfig::load(config_path)?;
        if let Some(seed) = cli.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(out) = &cli.out {
            cfg.output_dir = Some(out.clone());
        }
        return cmd_attack(&cfg);
    }

    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = Some(out.clone());
    }
    match cli.command {
        Command::Pretrain => cmd_pretrain(&cfg),
        Command::Reprogram => cmd_reprogram(&cfg),
        Command::Eval { model } => cmd_eval(cfg, model),
        Command::SweepAggregators => cmd_sweep(&cfg),
        Command::AttackDemo | Command::Report { .. } => unreachable!("handled above"),
    }
}

fn metrics_line(m: &Metrics) -> String {
    m.entries()
        .iter()
        .map(|(name, value)| format!("{name} {value:.4}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<()> {
    let resolved = cfg.resolve()?;
    let seed = cfg.seeds[0];
    let pre = resolved.pretrain_dataset(seed)?;
    let opts = TrainOpts {
        lr: cfg.pretrain.opt.lr,
        epochs: cfg.pretrain.opt.epochs,
        seed,
    };
    let (model, trajectory) = pretrain_traced(&pre, &cfg.pretrain.arch, &opts)?;
    let loss = LossSpec::new(if pre.task_kind.is_classification() {
        LossKind::CrossEntropy
    } else {
        LossKind::Mse
    });
    let metrics = evaluate(&model, &pre, &loss, MaskKind::Test, None)?;
    let dir = cfg
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.json");
    model.save(&path)?;
    println!("saved {}", path.display());
    println!("param_hash {}", model.param_hash());
    if let Some(final_loss) = trajectory.last() {
        println!("final training loss {final_loss:.6} after {} epochs", trajectory.len());
    }
    println!("pretrain test: {}", metrics_line(&metrics));
    Ok(())
}

fn cmd_reprogram(cfg: &ExperimentConfig) -> Result<()> {
    let report = run_experiment(cfg)?;
    print_report(&report)?;
    if let Some(dir) = &cfg.output_dir {
        println!("wrote {}", dir.join("report.json").display());
        println!("wrote {}", dir.join("metrics.csv").display());
    }
    Ok(())
}

fn print_report(report: &RunReport) -> Result<()> {
    println!(
        "method {} on a {} task, {} seed(s)",
        report.method.as_str(),
        report.task_kind.as_str(),
        report.records.len()
    );
    for rec in &report.records {
        println!("seed {} test: {}", rec.seed, metrics_line(&rec.test_metrics));
    }
    let summary = report_summary(std::slice::from_ref(report))?;
    print!("{}", summary.render_table());
    Ok(())
}

fn cmd_eval(mut cfg: ExperimentConfig, model: Option<PathBuf>) -> Result<()> {
    cfg.method = Method::Vanilla;
    cfg.params.pad_size = None;
    cfg.output_dir = None;
    if let Some(path) = model {
        cfg.pretrain.model = Some(path);
    }
    let report = run_experiment(&cfg)?;
    for rec in &report.records {
        println!("seed {} param_hash {}", rec.seed, rec.param_hash_after);
        println!("seed {} train: {}", rec.seed, metrics_line(&rec.train_metrics));
        println!("seed {} test: {}", rec.seed, metrics_line(&rec.test_metrics));
    }
    Ok(())
}

fn cmd_attack(cfg: &AttackConfig) -> Result<()> {
    let report = attack_demo(cfg)?;
    for rec in &report.records {
        println!("seed {} before test: {}", rec.seed, metrics_line(&rec.before_test));
        println!("seed {} after  test: {}", rec.seed, metrics_line(&rec.after_test));
        println!(
            "seed {} victim hash unchanged: {}",
            rec.seed,
            rec.victim_hash_before == rec.victim_hash_after
        );
    }
    if let Some(dir) = &cfg.output_dir {
        println!("wrote {}", dir.join("attack.csv").display());
    } else {
        print!("{}", attack_csv(&report));
    }
    Ok(())
}

fn cmd_sweep(cfg: &ExperimentConfig) -> Result<()> {
    let records = sweep_aggregators(cfg)?;
    for rec in &records {
        for (agg, metrics) in &rec.results {
            println!("seed {} {}: {}", rec.seed, agg.as_str(), metrics_line(metrics));
        }
    }
    if let Some(dir) = &cfg.output_dir {
        println!("wrote {}", dir.join("sweep.csv").display());
    } else {
        print!("{}", sweep_csv(&records));
    }
    Ok(())
}

fn cmd_report(paths: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut reports = Vec::with_capacity(paths.len());
    for path in paths {
        reports.push(RunReport::load(path)?);
    }
    let summary = report_summary(&reports)?;
    println!(
        "{} report(s) on a {} task",
        reports.len(),
        summary.task_kind.as_str()
    );
    print!("{}", summary.render_table());
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("summary.csv");
        std::fs::write(&path, summary.to_csv())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
