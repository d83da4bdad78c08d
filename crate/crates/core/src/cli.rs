//! The `dualtrain` command line.
//!
//! Every subcommand reads one JSON config and writes `metrics.csv` and
//! `summary.json` into the output directory; `train` and `distributed` also
//! write a `checkpoint/`.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::analysis::{memory_estimate, reconstruction_sweep, MemoryBreakdown, MethodSpec};
use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, TrainerKind};
use crate::dist::run_distributed;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::optim::OptimizerKind;
use crate::trainer::{
    equivalence_harness, train_relora_baseline, AdapterRun, DecayPairing, HarnessOptions, StepRecord, TrainConfig,
    TransformSpec, TransformedRun,
};

pub mod exit {
    pub const OK: u8 = 0;
    pub const FAILURE: u8 = 1;
    pub const INVALID_CONFIG: u8 = 2;
    pub const NON_FINITE: u8 = 3;
    pub const TOLERANCE: u8 = 4;
}

const EVAL_BATCH: usize = 256;

#[derive(Debug, Parser)]
#[command(name = "dualtrain", version, about = "Transformed-gradient and adapter training on desk-scale models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train with the configured trainer.
    Train(RunArgs),
    /// Run transformed-gradient and adapter training side by side.
    VerifyDuality(RunArgs),
    /// Simulate distributed low-rank training with an outer optimizer.
    Distributed(RunArgs),
    /// Sample gradient reconstruction error during training.
    Analyze(RunArgs),
    /// Estimate training memory per method.
    Memory(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory. Defaults to the config's `output_dir`, else
    /// `runs/<config stem>` beside the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Only print errors.
    #[arg(long)]
    pub quiet: bool,
}

/// What a subcommand reports back.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub out_dir: PathBuf,
    pub passed: bool,
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    quiet: bool,
}

impl Ctx {
    fn new(args: &RunArgs) -> Result<Self> {
        let mut cfg = ExperimentConfig::load(&args.config)?;
        if let Some(s) = args.seed {
            cfg.seed = s;
        }
        let out = args.out.clone().unwrap_or_else(|| cfg.default_output(&args.config));
        fs::create_dir_all(&out)?;
        Ok(Ctx {
            cfg,
            out,
            quiet: args.quiet,
        })
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        fs::write(self.out.join(name), contents)?;
        Ok(())
    }

    fn summary(&self, value: serde_json::Value) -> Result<()> {
        self.write("summary.json", &(serde_json::to_string_pretty(&value)? + "\n"))
    }

    fn outcome(self, passed: bool) -> Outcome {
        Outcome { out_dir: self.out, passed }
    }
}

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::NonFinite { .. } => exit::NON_FINITE,
        Error::Config(_)
        | Error::Json(_)
        | Error::UnknownMethod(_)
        | Error::DecayView { .. }
        | Error::MissingDecayState(_)
        | Error::Rank { .. }
        | Error::TooManyBlocks { .. } => exit::INVALID_CONFIG,
        _ => exit::FAILURE,
    }
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::VerifyDuality(a) => cmd_verify_duality(a),
        Command::Distributed(a) => cmd_distributed(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Memory(a) => cmd_memory(a),
    }
}

/// Entry point of the binary.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(o) if o.passed => ExitCode::from(exit::OK),
        Ok(_) => ExitCode::from(exit::TOLERANCE),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn hex(x: u64) -> String {
    format!("{x:016x}")
}

fn records_csv(records: &[StepRecord]) -> String {
    let mut out = String::from("step,loss,grad_norm\n");
    for r in records {
        writeln!(out, "{},{},{}", r.step, r.loss, r.grad_norm).expect("writing to a String");
    }
    out
}

fn optimizer_name(k: &OptimizerKind) -> &'static str {
    match k {
        OptimizerKind::Sgd { .. } => "sgd",
        OptimizerKind::Momentum { .. } => "momentum",
        OptimizerKind::Adam { .. } => "adam",
    }
}

struct TrainResult {
    records: Vec<StepRecord>,
    params: ModelParams,
    trainable: usize,
    merges: usize,
    checkpoint: Checkpoint,
}

fn progress(ctx: &Ctx, steps: usize, r: &StepRecord) {
    let every = (steps / 10).max(1);
    if (r.step + 1) % every == 0 || r.step + 1 == steps {
        ctx.say(format!("step {:>6}  loss {:.6}", r.step + 1, r.loss));
    }
}

pub fn cmd_train(args: &RunArgs) -> Result<Outcome> {
    let ctx = Ctx::new(args)?;
    let cfg = &ctx.cfg;
    let task = cfg.task()?;
    let mlp = cfg.mlp(&task)?;
    let init = cfg.init_params(&mlp);
    let tc = cfg.train_config()?;
    let eval = task.eval_batch(EVAL_BATCH);
    let eval_initial = mlp.loss(&init, &eval)?;

    let res = match cfg.trainer {
        TrainerKind::Transformed => {
            let mut run = TransformedRun::new(&mlp, &task, tc.clone(), init.clone())?;
            let mut records = Vec::with_capacity(tc.steps);
            for _ in 0..tc.steps {
                let r = run.step(&task)?;
                progress(&ctx, tc.steps, &r);
                records.push(r);
            }
            let mut ckpt = Checkpoint::new(run.step as u64);
            ckpt.push_params("params.", &run.params)?;
            ckpt.push_optimizer(&run.state)?;
            TrainResult {
                records,
                trainable: run.transforms.compressed_dim(),
                merges: (1..tc.steps).filter(|&t| tc.refreshes_at(t)).count(),
                params: run.params,
                checkpoint: ckpt,
            }
        }
        TrainerKind::Adapter => {
            let mut run = AdapterRun::new(&mlp, &task, tc.clone(), init.clone())?;
            let mut records = Vec::with_capacity(tc.steps);
            for _ in 0..tc.steps {
                let r = run.step(&task)?;
                progress(&ctx, tc.steps, &r);
                records.push(r);
            }
            let params = run.set.materialize()?;
            let mut ckpt = Checkpoint::new(run.step as u64);
            ckpt.push_params("params.", &params)?;
            ckpt.push_base(&run.set.base)?;
            ckpt.push(
                "adapter.lambda",
                vec![run.set.lambda.len()],
                crate::checkpoint::TensorData::F64(run.set.lambda.to_vec()),
            )?;
            ckpt.push_optimizer(&run.state)?;
            TrainResult {
                records,
                trainable: run.set.trainable_count(),
                merges: run.merges.len(),
                params,
                checkpoint: ckpt,
            }
        }
        TrainerKind::Relora | TrainerKind::ReloraFrozen => {
            let mode = cfg.trainer.relora_mode().expect("relora trainer");
            let traj = train_relora_baseline(&mlp, &task, &init, &tc, mode)?;
            for r in &traj.records {
                progress(&ctx, tc.steps, r);
            }
            let mut ckpt = Checkpoint::new(tc.steps as u64);
            ckpt.push_params("params.", &traj.final_params)?;
            ckpt.push_optimizer(&traj.final_state)?;
            TrainResult {
                trainable: traj.trainable,
                merges: traj.merges.len(),
                params: traj.final_params,
                records: traj.records,
                checkpoint: ckpt,
            }
        }
    };

    let eval_final = mlp.loss(&res.params, &eval)?;
    let mut ckpt = res.checkpoint;
    ckpt.meta = json!({
        "trainer": cfg.trainer.name(),
        "layers": mlp.layers,
        "seed": cfg.seed,
    });
    ckpt.write(&ctx.out.join("checkpoint"))?;
    ctx.write("metrics.csv", &records_csv(&res.records))?;
    ctx.summary(json!({
        "command": "train",
        "trainer": cfg.trainer.name(),
        "seed": cfg.seed,
        "steps": tc.steps,
        "family": tc.transform.family.name(),
        "rank": tc.transform.rank,
        "trainable": res.trainable,
        "merges": res.merges,
        "first_loss": res.records.first().map(|r| r.loss),
        "final_loss": res.records.last().map(|r| r.loss),
        "eval_loss_initial": eval_initial,
        "eval_loss_final": eval_final,
        "params_fingerprint": hex(res.params.fingerprint()),
    }))?;
    ctx.say(format!("eval loss {eval_initial:.6} -> {eval_final:.6}; wrote {}", ctx.out.display()));
    Ok(ctx.outcome(true))
}

pub fn cmd_verify_duality(args: &RunArgs) -> Result<Outcome> {
    let ctx = Ctx::new(args)?;
    let cfg = &ctx.cfg;
    let d = cfg.duality()?;
    let task = cfg.task()?;
    let mlp = cfg.mlp(&task)?;
    let init = cfg.init_params(&mlp);

    let mut csv = String::from(
        "optimizer,family,merge_every,pairing,max_param_deviation,max_state_deviation,step1_abs_deviation,predicted_step1,pass\n",
    );
    let mut rows = Vec::new();
    let mut all_pass = true;
    ctx.say(format!(
        "{:<9} {:<19} {:>5} {:<20} {:>10} {:>10}  result",
        "optimizer", "family", "merge", "decay", "param dev", "state dev"
    ));
    for opt in &d.optimizers {
        for &family in &d.families {
            for &merge in &d.merge_every {
                for &pairing in &d.pairings {
                    let mut tc = TrainConfig::new(d.steps, *opt, TransformSpec { family, rank: d.rank });
                    tc.merge_every = merge;
                    tc.seed = cfg.seed;
                    let opts = HarnessOptions {
                        pairing,
                        lambda: d.lambda,
                        initial_adapter: None,
                    };
                    let r = equivalence_harness(&mlp, &task, &init, &tc, &opts)?;
                    let pass = if pairing.expects_equivalence() {
                        r.within(d.tolerance)
                    } else {
                        (r.step1_abs_deviation - r.predicted_step1).abs() <= d.step1_tolerance
                    };
                    all_pass &= pass;
                    writeln!(
                        csv,
                        "{},{},{},{},{},{},{},{},{}",
                        optimizer_name(opt),
                        family.name(),
                        merge,
                        pairing.name(),
                        r.max_param_deviation,
                        r.max_state_deviation,
                        r.step1_abs_deviation,
                        r.predicted_step1,
                        pass
                    )
                    .expect("writing to a String");
                    let verdict = match (pass, pairing == DecayPairing::Mismatched) {
                        (true, false) => "ok",
                        (true, true) => "ok (differs as predicted)",
                        (false, _) => "FAIL",
                    };
                    ctx.say(format!(
                        "{:<9} {:<19} {:>5} {:<20} {:>10.2e} {:>10.2e}  {verdict}",
                        optimizer_name(opt),
                        family.name(),
                        merge,
                        pairing.name(),
                        r.max_param_deviation,
                        r.max_state_deviation
                    ));
                    rows.push(json!({
                        "optimizer": optimizer_name(opt),
                        "family": family.name(),
                        "merge_every": merge,
                        "pairing": pairing.name(),
                        "max_param_deviation": r.max_param_deviation,
                        "max_state_deviation": r.max_state_deviation,
                        "step1_abs_deviation": r.step1_abs_deviation,
                        "predicted_step1": r.predicted_step1,
                        "pass": pass,
                    }));
                }
            }
        }
    }
    ctx.write("metrics.csv", &csv)?;
    ctx.summary(json!({
        "command": "verify-duality",
        "seed": cfg.seed,
        "steps": d.steps,
        "tolerance": d.tolerance,
        "passed": all_pass,
        "rows": rows,
    }))?;
    if !all_pass {
        eprintln!("duality check failed; see {}", ctx.out.join("metrics.csv").display());
    }
    Ok(ctx.outcome(all_pass))
}

pub fn cmd_distributed(args: &RunArgs) -> Result<Outcome> {
    let ctx = Ctx::new(args)?;
    let cfg = &ctx.cfg;
    let dc = cfg.dist_config()?;
    let task = cfg.task()?;
    let mlp = cfg.mlp(&task)?;
    let init = cfg.init_params(&mlp);
    let eval = task.eval_batch(dc.eval_batch_size);
    let report = run_distributed(&mlp, &task, &eval, &init, &dc)?;
    for (round, loss) in report.global_losses.iter().enumerate() {
        ctx.say(format!("round {:>4}  global loss {loss:.6}", round + 1));
    }
    ctx.write("metrics.csv", &report.metrics_csv())?;
    let mut ckpt = Checkpoint::new((dc.rounds * dc.local_steps) as u64);
    ckpt.meta = json!({ "scheme": dc.scheme.name(), "layers": mlp.layers, "seed": cfg.seed });
    ckpt.push_params("params.", &report.final_params)?;
    ckpt.write(&ctx.out.join("checkpoint"))?;
    ctx.summary(json!({
        "command": "distributed",
        "seed": cfg.seed,
        "scheme": dc.scheme.name(),
        "workers": dc.workers,
        "rank": dc.rank,
        "rounds": dc.rounds,
        "local_steps": dc.local_steps,
        "initial_loss": report.initial_loss,
        "final_loss": report.final_loss(),
        "coverage": report.coverage,
        "params_fingerprint": hex(report.final_params.fingerprint()),
    }))?;
    Ok(ctx.outcome(true))
}

pub fn cmd_analyze(args: &RunArgs) -> Result<Outcome> {
    let ctx = Ctx::new(args)?;
    let cfg = &ctx.cfg;
    let a = cfg.analysis()?;
    let task = cfg.task()?;
    let mlp = cfg.mlp(&task)?;
    let init = cfg.init_params(&mlp);
    let tc = cfg.train_config()?;
    let sweep = reconstruction_sweep(&mlp, &task, &init, &tc, &a.families, a.every)?;
    ctx.write("metrics.csv", &sweep.csv())?;
    for o in &sweep.outcomes {
        ctx.say(format!(
            "{:<19} mean l2 {:>12.6e}  mean cosine {:.4}  final loss {:.6}",
            o.method, o.mean_l2_sq, o.mean_cosine, o.final_loss
        ));
    }
    let aligned = sweep.lowest_error_is_lowest_loss();
    ctx.say(format!("lowest error also lowest loss: {aligned}"));
    ctx.summary(json!({
        "command": "analyze",
        "seed": cfg.seed,
        "steps": tc.steps,
        "every": a.every,
        "outcomes": sweep.outcomes,
        "lowest_error_is_lowest_loss": aligned,
    }))?;
    Ok(ctx.outcome(true))
}

pub fn cmd_memory(args: &RunArgs) -> Result<Outcome> {
    let ctx = Ctx::new(args)?;
    let cfg = &ctx.cfg;
    let mm = cfg.memory_model()?;
    let methods: Vec<String> = match &cfg.memory.as_ref().expect("checked by memory_model").methods {
        m if m.is_empty() => MethodSpec::table_rows().iter().map(ToString::to_string).collect(),
        m => m.clone(),
    };
    let rows = methods
        .iter()
        .map(|m| memory_estimate(&mm, m))
        .collect::<Result<Vec<MemoryBreakdown>>>()?;
    let mut csv = String::from("method,total_bytes,gib\n");
    for b in &rows {
        writeln!(csv, "{},{},{}", b.method, b.total_bytes, b.gib()).expect("writing to a String");
    }
    ctx.write("metrics.csv", &csv)?;
    let summary = json!({
        "command": "memory",
        "rank": mm.rank,
        "params": mm.num_params(),
        "adapted_matrices": mm.adapted.len(),
        "widths": mm.widths,
        "group_size": mm.group_size,
        "estimates": rows,
    });
    ctx.say(serde_json::to_string_pretty(&summary)?);
    ctx.summary(summary)?;
    Ok(ctx.outcome(true))
}

