//! Command-line front end: training, verification, the multiplier tuner,
//! stability experiments, the stochastic toy model, schedule dumps,
//! throughput estimates, and corpus packing.

use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use hybridlm_core::data::{synthetic_corpus, Corpus, SyntheticSpec, Vocabulary};

use hybridlm_core::mup::{tune_stage, MuPMultiplierSet, SweepRecord};
use hybridlm_core::schedule::{schedule_at, ScheduleSpec};
use hybridlm_core::stability::{
    attenuated_hessian, feedback_eigen, simulate_write_forget, stability_threshold,
    WriteForgetInstance, WriteForgetObjective,
};
use hybridlm_core::throughput::dp_throughput;
use hybridlm_core::toy::{toy_simulate, toy_stationary_moments, ToyModelSpec};
use hybridlm_core::trainer::{latest_checkpoint, train, TrainConfig, TrainOutcome};
use hybridlm_core::verify::run_all;
use hybridlm_core::Precision;

#[derive(Parser)]
#[command(name = "hybridlm", about = "Desk-scale hybrid attention/SSM training lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML config.
    Train(TrainArgs),
    /// Run the full oracle/gradient acceptance suite.
    Verify {
        /// Run a single criterion (1-10).
        #[arg(long)]
        only: Option<u8>,
    },
    /// Run one multiplier-tuning stage and emit the next stage file.
    Sweep(SweepArgs),
    /// Write/forget stability experiments: trajectory and eigenvalue scans.
    Stability(StabilityArgs),
    /// Closed-form vs Monte-Carlo stationary moments of the toy model.
    Toy(ToyArgs),
    /// Dump a schedule as CSV: tokens, eta, lambda, batch, eta_eff, lambda_eff.
    Schedule(ScheduleArgs),
    /// Data-parallel throughput model.
    Throughput(ThroughputArgs),
    /// Build a token corpus (synthetic or from text files).
    Pack(PackArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Training config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for metrics and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Corpus directory (defaults to <out>/corpus; built synthetically if missing).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Resume from the latest checkpoint under --out (or a specific one).
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    resume_from: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Stage file (JSON) holding the current multiplier set.
    #[arg(long)]
    stage: PathBuf,
    /// Where to write the next stage file.
    #[arg(long)]
    out: PathBuf,
    /// Sweep records (JSONL), one per tunable.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Micro-sweep scale factor.
    #[arg(long, default_value_t = 2.0)]
    p: f64,
    /// Loss oracle: "quadratic" (analytic demo bowl) or "train" (short
    /// training runs at the multiplier set; needs --train-config).
    #[arg(long, default_value = "quadratic")]
    oracle: String,
    #[arg(long)]
    train_config: Option<PathBuf>,
}

#[derive(Args)]
struct StabilityArgs {
    /// Output directory for trajectory.csv and eigenscan.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 24)]
    span: usize,
    #[arg(long, default_value_t = -0.4)]
    a_log: f64,
    #[arg(long, default_value_t = 4000)]
    steps: usize,
    /// Attenuation factors to simulate.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 0.5, 0.25])]
    alphas: Vec<f64>,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long, default_value_t = 0.02)]
    h: f64,
    #[arg(long, default_value_t = 0.7)]
    x_star: f64,
    #[arg(long, default_value_t = 0.3)]
    sigma: f64,
    #[arg(long, default_value_t = 4e-3)]
    eta: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    #[arg(long, default_value_t = 60_000)]
    steps: usize,
    #[arg(long, default_value_t = 20)]
    seeds: u64,
}

#[derive(Args)]
struct ScheduleArgs {
    /// Schedule spec (TOML).
    #[arg(long)]
    spec: PathBuf,
    /// Dump up to this many tokens.
    #[arg(long)]
    until: f64,
    #[arg(long, default_value_t = 200)]
    points: usize,
}

#[derive(Args)]
struct ThroughputArgs {
    #[arg(long)]
    b_global: u64,
    /// Worker counts to evaluate.
    #[arg(long, value_delimiter = ',')]
    n_dp: Vec<u64>,
    #[arg(long)]
    b_micro: u64,
    /// Seconds per micro-batch forward+backward.
    #[arg(long)]
    t_micro: f64,
    /// Sync latency model: t_sync(n) = base + per_worker * n.
    #[arg(long, default_value_t = 0.0)]
    t_sync_base: f64,
    #[arg(long, default_value_t = 0.0)]
    t_sync_per_worker: f64,
}

#[derive(Args)]
struct PackArgs {
    #[arg(long)]
    out: PathBuf,
    /// Build the deterministic synthetic corpus.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, default_value_t = 100_000)]
    tokens_per_source: usize,
    #[arg(long, default_value_t = 1234)]
    seed: u64,
    /// Text files to pack as one source each (alternative to --synthetic).
    #[arg(long)]
    input: Vec<PathBuf>,
    #[arg(long, default_value_t = true)]
    split_digits: bool,
    #[arg(long, default_value_t = true)]
    split_punct: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct StageFile {
    stage: u32,
    multipliers: MuPMultiplierSet,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Verify { only } => cmd_verify(only),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Stability(args) => cmd_stability(args),
        Command::Toy(args) => cmd_toy(args),
        Command::Schedule(args) => cmd_schedule(args),
        Command::Throughput(args) => cmd_throughput(args),
        Command::Pack(args) => cmd_pack(args),
    }
}

fn load_corpus(dir: &PathBuf) -> Result<Corpus> {
    if dir.join("vocab.json").exists() {
        Ok(Corpus::load(dir)?)
    } else {
        eprintln!("no corpus at {}; generating the synthetic one", dir.display());
        let corpus = synthetic_corpus(&SyntheticSpec { seed: 1234, tokens_per_source: 100_000 })?;
        corpus.save(dir)?;
        Ok(corpus)
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let cfg: TrainConfig = toml::from_str(&text).context("parsing train config")?;
    let corpus_dir = args.corpus.clone().unwrap_or_else(|| args.out.join("corpus"));
    let corpus = load_corpus(&corpus_dir)?;
    let resume_dir = if let Some(dir) = args.resume_from {
        Some(dir)
    } else if args.resume {
        latest_checkpoint(&args.out)
    } else {
        None
    };
    if let Some(dir) = &resume_dir {
        eprintln!("resuming from {}", dir.display());
    }
    let outcome = match cfg.model.precision {
        Precision::Verification => train::<f64>(&cfg, &corpus, Some(&args.out), resume_dir.as_deref())?,
        Precision::Training => train::<f32>(&cfg, &corpus, Some(&args.out), resume_dir.as_deref())?,
    };
    print_outcome(&outcome);
    Ok(())
}

fn print_outcome(outcome: &TrainOutcome) {
    if outcome.metrics.is_empty() {
        println!("nothing to do: run already at the configured step count");
        return;
    }
    println!(
        "trained: loss {:.4} -> {:.4} over {} tokens ({} skipped batches)",
        outcome.initial_loss, outcome.final_loss, outcome.tokens_seen, outcome.skipped_batches
    );
    if let Some(gap) = outcome.noise_gap {
        println!("noise level (loss drop across decay): {gap:.4}");
    }
}

fn cmd_verify(only: Option<u8>) -> Result<()> {
    let reports = match only {
        None => run_all(),
        Some(n) => {
            use hybridlm_core::verify::*;
            vec![match n {
                1 => criterion_1_ssm_oracle(),
                2 => criterion_2_reset_isolation(),
                3 => criterion_3_gradient_suite(),
                4 => criterion_4_symmetry(),
                5 => criterion_5_coordinate_check(),
                6 => criterion_6_toy_model(),
                7 => criterion_7_schedules(),
                8 => criterion_8_tuner(),
                9 => criterion_9_stability(),
                10 => criterion_10_harness(),
                _ => bail!("criterion must be 1..=10"),
            }]
        }
    };
    let mut failed = false;
    for r in &reports {
        println!("{}", r.line());
        failed |= !r.pass;
    }
    if failed {
        bail!("verification failed");
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let stage: StageFile = if args.stage.exists() {
        serde_json::from_reader(std::fs::File::open(&args.stage)?)?
    } else {
        eprintln!("stage file missing; starting from the tuned base multipliers");
        StageFile { stage: 0, multipliers: MuPMultiplierSet::base() }
    };

    let mut oracle: Box<dyn FnMut(&MuPMultiplierSet) -> hybridlm_core::Result<f64>> =
        match args.oracle.as_str() {
            // Demo bowl: a quadratic in three multiplier coordinates,
            // optimum two octaves from the tuned base.
            "quadratic" => {
                let base = MuPMultiplierSet::base();
                use hybridlm_core::mup::{ForwardMult, MatrixGroup, MultiplierId, VectorGroup};
                let ids = [
                    MultiplierId::Forward(ForwardMult::X),
                    MultiplierId::Elr(MatrixGroup::Up),
                    MultiplierId::VectorLr(VectorGroup::DSkip),
                ];
                let centers: Vec<f64> =
                    ids.iter().map(|id| base.coordinate(*id).log2() + 2.0).collect();
                Box::new(move |m: &MuPMultiplierSet| {
                    let mut loss = 1.0;
                    for (id, c) in ids.iter().zip(&centers) {
                        let x = m.coordinate(*id).log2();
                        loss += 0.3 * (x - c) * (x - c);
                    }
                    Ok(loss)
                })
            }
            "train" => {
                let path = args
                    .train_config
                    .clone()
                    .context("--oracle train requires --train-config")?;
                let text = std::fs::read_to_string(&path)?;
                let cfg: TrainConfig = toml::from_str(&text)?;
                let corpus = synthetic_corpus(&SyntheticSpec {
                    seed: 1234,
                    tokens_per_source: 20_000,
                })?;
                // The oracle is the mean loss over the last quarter of a
                // short deterministic run at the candidate multiplier set.
                Box::new(move |m: &MuPMultiplierSet| {
                    let mut candidate = cfg.clone();
                    candidate.multipliers = Some(m.clone());
                    let outcome = train::<f32>(&candidate, &corpus, None, None)?;
                    let tail = (outcome.metrics.len() / 4).max(1);
                    let losses: Vec<f64> =
                        outcome.metrics.iter().rev().take(tail).map(|x| x.loss).collect();
                    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
                })
            }
            other => bail!("unknown oracle {other}"),
        };

    let (next, records) = tune_stage(&stage.multipliers, args.p, &mut oracle)?;
    let records_path = args
        .records
        .clone()
        .unwrap_or_else(|| args.out.with_extension("records.jsonl"));
    let mut f = std::fs::File::create(&records_path)?;
    for r in &records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    let out = StageFile { stage: stage.stage + 1, multipliers: next };
    serde_json::to_writer_pretty(std::fs::File::create(&args.out)?, &out)?;
    summarize_records(&records);
    println!(
        "stage {} -> {}: wrote {} and {}",
        stage.stage,
        out.stage,
        args.out.display(),
        records_path.display()
    );
    Ok(())
}

fn summarize_records(records: &[SweepRecord]) {
    let moved = records.iter().filter(|r| r.chosen != r.previous && !r.failed).count();
    let mut by_sensitivity: Vec<&SweepRecord> = records.iter().collect();
    by_sensitivity.sort_by(|a, b| b.sensitivity.abs().partial_cmp(&a.sensitivity.abs()).unwrap());
    println!("{} tunables swept, {} moved; most sensitive:", records.len(), moved);
    for r in by_sensitivity.iter().take(5) {
        println!("  {:?}: sensitivity {:.4}", r.multiplier, r.sensitivity);
    }
}

fn cmd_stability(args: StabilityArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let inst = WriteForgetInstance {
        a_log: args.a_log,
        dt_raw: vec![0.0],
        b: 1.0,
        c: 1.0,
        span: args.span,
        alpha: 1.0,
        eta: 0.0,
    };
    let obj = WriteForgetObjective { span: args.span as f64, alpha: 1.0, anchor: args.a_log };
    let hessian = obj.stationary_hessian();
    let eta_star = stability_threshold(&hessian, 10.0)?
        .context("no instability threshold below eta = 10")?;
    println!("stationary Hessian {hessian:?}, instability threshold eta* = {eta_star:.5}");

    // Eigenvalue scan: spectral radius over an (alpha, eta) grid.
    let mut eig = std::fs::File::create(args.out.join("eigenscan.csv"))?;
    writeln!(eig, "alpha,eta,spectral_radius")?;
    for &alpha in &args.alphas {
        let h = attenuated_hessian(&hessian, alpha);
        for i in 1..=120 {
            let eta = eta_star * 2.0 * i as f64 / 120.0;
            writeln!(eig, "{alpha},{eta},{}", feedback_eigen(&h, eta)?)?;
        }
    }

    // Trajectories at eta slightly above the alpha = 1 threshold.
    let mut traj = std::fs::File::create(args.out.join("trajectory.csv"))?;
    writeln!(traj, "alpha,step,dt_raw,a_log,loss")?;
    let (w_star, a_star) = obj.stationary_point();
    for &alpha in &args.alphas {
        let mut i = inst.clone();
        i.eta = eta_star * 1.05;
        i.dt_raw = vec![w_star + 0.3];
        i.a_log = a_star + 1.0;
        let out = simulate_write_forget(&i, args.steps, alpha)?;
        for p in &out.trajectory {
            writeln!(traj, "{alpha},{},{},{},{}", p.step, p.dt_raw, p.a_log, p.loss)?;
        }
        println!(
            "alpha {alpha}: tail amplitude {:.3e} (window ratio {:.4}){}",
            out.tail_amplitude,
            out.amplitude_ratio(),
            if out.diverged { " (diverged)" } else { "" }
        );
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_toy(args: ToyArgs) -> Result<()> {
    let spec = ToyModelSpec {
        h: args.h,
        x_star: args.x_star,
        sigma: args.sigma,
        eta: args.eta,
        lambda: args.lambda,
        steps: args.steps,
        seed: 0,
    };
    let closed = toy_stationary_moments(&spec)?;
    println!(
        "closed form: x_inf = {:.6}, x2_inf = {:.6e} (simplified {:.6e})",
        closed.x_inf, closed.x2_inf, closed.x2_simplified
    );
    if !closed.small_eta_lambda {
        println!("warning: eta*lambda is not small; the formulas assume it");
    }
    let mut means = Vec::new();
    let mut seconds = Vec::new();
    for seed in 0..args.seeds {
        let r = toy_simulate(&ToyModelSpec { seed, ..spec })?;
        if !r.stationary {
            println!("warning: run too short relative to the relaxation time");
        }
        means.push(r.mean);
        seconds.push(r.second_moment);
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "monte carlo ({} seeds): mean = {:.6}, x2 = {:.6e}",
        args.seeds,
        avg(&means),
        avg(&seconds)
    );
    Ok(())
}

fn cmd_schedule(args: ScheduleArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.spec)?;
    let spec: ScheduleSpec = toml::from_str(&text).context("parsing schedule spec")?;
    println!("tokens,eta,lambda,batch,eta_eff,lambda_eff");
    for i in 0..=args.points {
        let tokens = args.until * i as f64 / args.points as f64;
        let p = schedule_at(tokens, &spec)?;
        println!(
            "{tokens},{},{},{},{},{}",
            p.eta, p.lambda, p.batch_tokens, p.eta_eff, p.lambda_eff
        );
    }
    Ok(())
}

fn cmd_throughput(args: ThroughputArgs) -> Result<()> {
    let sync = |n: u64| args.t_sync_base + args.t_sync_per_worker * n as f64;
    println!("n_dp,throughput,scaling_efficiency");
    let mut base: Option<f64> = None;
    for &n in &args.n_dp {
        let th = dp_throughput(args.b_global, n, args.b_micro, args.t_micro, &sync)?;
        let eff = match base {
            None => {
                base = Some(th / n as f64);
                1.0
            }
            Some(b) => th / (n as f64 * b),
        };
        println!("{n},{th:.3},{eff:.4}");
    }
    Ok(())
}

fn cmd_pack(args: PackArgs) -> Result<()> {
    if args.synthetic {
        let corpus = synthetic_corpus(&SyntheticSpec {
            seed: args.seed,
            tokens_per_source: args.tokens_per_source,
        })?;
        corpus.save(&args.out)?;
        println!(
            "synthetic corpus: {} sources, vocab {} at {}",
            corpus.sources.len(),
            corpus.vocab_size(),
            args.out.display()
        );
        return Ok(());
    }
    if args.input.is_empty() {
        bail!("pack needs --synthetic or at least one --input file");
    }
    let mut texts = Vec::new();
    for path in &args.input {
        let bytes = std::fs::read(path)?;
        // Validates UTF-8 and applies the splitting rules.
        let pieces = hybridlm_core::data::pretokenize_bytes(&bytes, args.split_digits, args.split_punct)?;
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .context("input file needs a UTF-8 name")?
            .to_string();
        texts.push((name, String::from_utf8(bytes).expect("checked"), pieces));
    }
    let vocab = Vocabulary::build(
        texts.iter().flat_map(|(_, _, pieces)| pieces.iter().map(|p| p.as_str())),
    );
    let mut sources = std::collections::BTreeMap::new();
    for (name, text, _) in &texts {
        // One document per line; blank lines separate nothing.
        let docs: Vec<Vec<u32>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| vocab.encode_text(l, args.split_digits, args.split_punct))
            .filter(|d| !d.is_empty())
            .collect();
        if docs.is_empty() {
            bail!("input source {name} produced no documents");
        }
        sources.insert(name.clone(), docs);
    }
    let corpus = Corpus { sources, vocab };
    corpus.save(&args.out)?;
    println!("packed {} sources, vocab {} at {}", corpus.sources.len(), corpus.vocab_size(), args.out.display());
    Ok(())
}
