use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lava_core::autograd::inject_backward_fault;
use lava_core::data::generate_synthetic;
use lava_core::eval::{evaluate_all_splits, train_probe};
use lava_core::losses::parse_terms;
use lava_core::train::pretrain;
use lava_core::{gradcheck, Checkpoint, Config, Dataset, Error, OpKind, ProbeHead, ProbeMode, Result, Split};

/// Tri-modal contrastive pre-training on synthetic audio/video/text data.
///
/// Exit codes: 0 ok, 1 check failure, 2 config error, 3 I/O error, 4 numeric abort.
#[derive(Parser)]
#[command(name = "lava", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (manifest.jsonl plus LTF feature files).
    GenData {
        /// JSON config; only its `data` section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Pre-train the encoders and write a checkpoint plus `<out>.log.jsonl`.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory holding manifest.jsonl.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated loss terms, e.g. `av,vt,avt`.
        #[arg(long)]
        losses: Option<String>,
        /// Override train.epochs.
        #[arg(long)]
        epochs: Option<u64>,
        /// Override train.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit a linear probe on the frozen encoders and save it.
    Probe {
        #[command(flatten)]
        probe: ProbeArgs,
        /// Where to write the probe head.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a probe on the test splits and print an EvalReport as JSON.
    Eval {
        #[command(flatten)]
        probe: ProbeArgs,
        /// Probe head from `lava probe`; trained on the fly when omitted.
        #[arg(long)]
        head: Option<PathBuf>,
        /// Clips per test video whose logits are averaged (default eval.clips_per_video).
        #[arg(long)]
        clips: Option<usize>,
        /// `1` for test1 only, `all` for test1..test3.
        #[arg(long, default_value = "all")]
        splits: String,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every op's gradient; prints a JSON report.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Seeded random instances per op.
        #[arg(long, default_value_t = gradcheck::DEFAULT_INSTANCES)]
        instances: usize,
        /// Comma-separated case names (default: all).
        #[arg(long)]
        ops: Option<String>,
        /// Corrupt one op's backward rule to test the harness.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// `video` or `audio+video`.
    #[arg(long)]
    mode: ProbeMode,
    /// JSON config whose `eval` section replaces the checkpoint's.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn gen_data(config: Option<&Path>, out: &Path, force: bool) -> Result<()> {
    let cfg = load_config(config)?;
    let s = generate_synthetic(&cfg.data, out, force)?;
    println!("manifest: {}", s.manifest.display());
    println!("samples: {} (audio {}, text {})", s.n_samples, s.with_audio, s.with_text);
    let classes: Vec<String> = s.per_class.iter().map(|(k, n)| format!("{k}:{n}")).collect();
    println!("per class: {}", classes.join(" "));
    let splits: Vec<String> = s.per_split.iter().map(|(k, n)| format!("{k}:{n}")).collect();
    println!("per split: {}", splits.join(" "));
    Ok(())
}

fn run_pretrain(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    losses: Option<&str>,
    epochs: Option<u64>,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(l) = losses {
        cfg.loss.terms = parse_terms(l)?;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if seed.is_some() {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    let ds = Dataset::load(data)?;
    let res = pretrain(&cfg, &ds, out, &mut |t| {
        log::info!("epoch {} done (step {})", t.epoch, t.step);
        Ok(())
    })?;
    println!("checkpoint: {}", res.checkpoint.display());
    println!("log: {}", res.log.display());
    for p in &res.epoch_checkpoints {
        println!("epoch checkpoint: {}", p.display());
    }
    if let Some(l) = res.final_losses {
        println!("final batch loss: {}", serde_json::to_string(&l).expect("losses serialize"));
    }
    Ok(())
}

fn fit_head(a: &ProbeArgs) -> Result<(Checkpoint, Dataset, ProbeHead, Config)> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let mut cfg = ckpt.config.clone();
    if let Some(p) = &a.config {
        cfg.eval = Config::load(p)?.eval;
    }
    let ds = Dataset::load(&a.data)?;
    let head = train_probe(&ckpt.stack, &ds, a.mode, &cfg.eval)?;
    Ok((ckpt, ds, head, cfg))
}

fn run_probe(a: &ProbeArgs, out: &Path) -> Result<()> {
    let (_, _, head, _) = fit_head(a)?;
    head.save(out)?;
    println!("probe ({}) written to {}", a.mode, out.display());
    Ok(())
}

fn run_eval(a: &ProbeArgs, head: Option<&Path>, clips: Option<usize>, splits: &str, out: Option<&Path>) -> Result<()> {
    let splits: &[Split] = match splits {
        "1" => &[Split::Test1],
        "all" => &Split::TESTS,
        other => return Err(Error::Config(format!("--splits must be 1 or all, got {other:?}"))),
    };
    let (ckpt, ds, head, cfg) = match head {
        Some(p) => {
            let ckpt = Checkpoint::load(&a.ckpt)?;
            let ds = Dataset::load(&a.data)?;
            let head = ProbeHead::load(p)?;
            if head.mode != a.mode {
                return Err(Error::Config(format!("probe head was trained for {}, not {}", head.mode, a.mode)));
            }
            let cfg = ckpt.config.clone();
            (ckpt, ds, head, cfg)
        }
        None => fit_head(a)?,
    };
    let clips = clips.unwrap_or(cfg.eval.clips_per_video);
    if clips == 0 {
        return Err(Error::Config("--clips must be positive".into()));
    }
    let report = evaluate_all_splits(&ckpt.stack, &head, &ds, splits, clips)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{json}");
    if let Some(p) = out {
        std::fs::write(p, json + "\n").map_err(|e| Error::Io { path: p.to_path_buf(), source: e })?;
    }
    Ok(())
}

fn run_gradcheck(seed: u64, instances: usize, ops: Option<&str>, fault: Option<&str>) -> Result<bool> {
    if let Some(name) = fault {
        let kind = OpKind::from_name(name).ok_or_else(|| Error::Config(format!("unknown op {name:?}")))?;
        inject_backward_fault(Some(kind));
    }
    let cases: Vec<&str> = ops.map(|s| s.split(',').map(str::trim).collect()).unwrap_or_default();
    let report = gradcheck::run_cases(seed, instances, &cases)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    for op in &report.ops {
        if !op.passed {
            eprintln!("gradcheck failed for {}: worst rel err {:e}", op.op, op.worst_rel_err);
        }
    }
    Ok(report.passed)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::GenData { config, out, force } => gen_data(config.as_deref(), out, *force).map(|_| true),
        Command::Pretrain { config, data, out, losses, epochs, seed } => {
            run_pretrain(config.as_deref(), data, out, losses.as_deref(), *epochs, *seed).map(|_| true)
        }
        Command::Probe { probe, out } => run_probe(probe, out).map(|_| true),
        Command::Eval { probe, head, clips, splits, out } => {
            run_eval(probe, head.as_deref(), *clips, splits, out.as_deref()).map(|_| true)
        }
        Command::Gradcheck { seed, instances, ops, inject_fault } => {
            run_gradcheck(*seed, *instances, ops.as_deref(), inject_fault.as_deref())
        }
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
