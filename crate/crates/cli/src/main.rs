//! `ncd`: generate puzzle shards, train, evaluate and run ablations.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
//! `NCD_THREADS` caps the worker thread count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ncd_core::checkpoint::Checkpoint;
use ncd_core::config::{ConfigError, RunConfig};
use ncd_core::eval::{evaluate, parse_variants, run_ablation, Variant};
use ncd_core::net::NcdModel;
use ncd_core::pack::{self, PackWriter};
use ncd_core::problem::ProblemView;
use ncd_core::synth::{generate_all, Attribute, GeneratorConfig, RpmProblem, CANDIDATES, PANEL_SIZES};
use ncd_core::trainer::{initial_model, run_training, RunDir};
use ncd_core::Error;

#[derive(Parser)]
#[command(name = "ncd", version, about = "Unsupervised solver for Raven-style matrix puzzles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a shard of puzzles into an RPMPACK file.
    Gen {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: u32,
        #[arg(long, default_value_t = 32)]
        panel_size: u16,
        /// First problem id; give train and test shards disjoint ranges.
        #[arg(long, default_value_t = 0)]
        id_offset: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes per-epoch checkpoints and a metrics journal.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue from a checkpoint written with the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Evaluation shard whose unlabeled problems join training when the
        /// config sets `transductive`.
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Write a freshly initialized, untrained checkpoint.
    Init {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a labeled shard.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        format: Format,
    },
    /// Train and score several variants over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Training shard.
        #[arg(long)]
        data: PathBuf,
        /// Evaluation shard; without it the last `--holdout` problems of
        /// `--data` are held out.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        holdout: usize,
        /// Comma-separated: NCD#, NCD-(NA+D), NCD-NA, NCD-D, NCD, k=0..8.
        #[arg(long, default_value = "NCD#,NCD-(NA+D),NCD-NA,NCD-D,NCD")]
        variants: String,
        /// Number of seeds, counting up from the config seed.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Also write grid.json, grid.txt and ksweep.csv here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        format: Format,
    },
}

#[derive(Args)]
#[group(multiple = false)]
struct Format {
    /// Machine-readable JSON.
    #[arg(long)]
    json: bool,
    /// Aligned text table (default).
    #[arg(long)]
    table: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::NonFiniteLoss { .. } | Error::Tensor(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(exit_code(&e));
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn configure_threads() -> ncd_core::Result<()> {
    let Ok(raw) = std::env::var("NCD_THREADS") else { return Ok(()) };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| ConfigError::Invalid(vec![format!("NCD_THREADS: expected a positive integer, got {raw:?}")]))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| ConfigError::Invalid(vec![format!("NCD_THREADS: {e}")]).into())
}

fn run(command: Command) -> ncd_core::Result<()> {
    match command {
        Command::Gen { seed, count, panel_size, id_offset, out } => gen(seed, count, panel_size, id_offset, &out),
        Command::Train { config, data, out_dir, resume, test } => train(&config, &data, &out_dir, resume.as_deref(), test.as_deref()),
        Command::Init { config, out } => {
            let config = RunConfig::read(&config)?;
            initial_model(&config.train).to_checkpoint().write(&out)
        }
        Command::Eval { checkpoint, data, format } => eval(&checkpoint, &data, &format),
        Command::Ablate { config, data, test, holdout, variants, seeds, out_dir, format } => {
            ablate(&config, &data, test.as_deref(), holdout, &variants, seeds, out_dir.as_deref(), &format)
        }
    }
}

/// Problems are generated in parallel chunks and streamed to disk in id order.
fn gen(seed: u64, count: u32, panel_size: u16, id_offset: u64, out: &Path) -> ncd_core::Result<()> {
    const CHUNK: u32 = 1024;
    if !PANEL_SIZES.contains(&panel_size) {
        return Err(ConfigError::Invalid(vec![format!("--panel-size: expected one of {PANEL_SIZES:?}, got {panel_size}")]).into());
    }
    let mut writer = PackWriter::create(out, panel_size, count)?;
    let mut answers = [0usize; CANDIDATES];
    let mut rules: BTreeMap<String, usize> = BTreeMap::new();
    let mut start = 0;
    while start < count {
        let n = CHUNK.min(count - start);
        let config = GeneratorConfig { panel_size, id_offset: id_offset + u64::from(start), ..GeneratorConfig::default() };
        for p in generate_all(seed, n as usize, &config)? {
            answers[usize::from(p.answer_index)] += 1;
            for a in Attribute::ALL {
                *rules.entry(format!("{}={}", a.name(), p.rules.get(a).name())).or_default() += 1;
            }
            writer.push(&p)?;
        }
        start += n;
    }
    writer.finish()?;
    println!("wrote {count} problems ({panel_size}x{panel_size}) to {}", out.display());
    println!("answer slots: {}", answers.map(|n| n.to_string()).join(" "));
    println!("rules:");
    for (rule, n) in &rules {
        println!("  {rule:<28} {n}");
    }
    Ok(())
}

fn train(config: &Path, data: &Path, out_dir: &Path, resume: Option<&Path>, test: Option<&Path>) -> ncd_core::Result<()> {
    let config = RunConfig::read(config)?;
    let train = pack::read(data)?;
    let extra = match (config.transductive, test) {
        (true, Some(t)) => pack::read(t)?,
        (true, None) => return Err(ConfigError::Invalid(vec!["transductive: true needs --test".into()]).into()),
        (false, _) => Vec::new(),
    };
    let mut views: Vec<ProblemView> = train.iter().map(RpmProblem::unlabeled).collect();
    ncd_core::eval::ensure_disjoint(&views, &extra)?;
    views.extend(extra.iter().map(RpmProblem::unlabeled));
    let outcome = run_training(&views, &config.train, Some(out_dir), resume)?;
    let run = RunDir { dir: out_dir.to_path_buf() };
    let last = outcome.metrics.last().map_or(f64::NAN, |m| m.loss);
    println!(
        "trained {} epochs ({} steps) on {} problems; last loss {last:.4}; checkpoint {}",
        outcome.state.epoch,
        outcome.state.step,
        views.len(),
        run.checkpoint().display()
    );
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, format: &Format) -> ncd_core::Result<()> {
    let ck = Checkpoint::read(checkpoint)?;
    let model = NcdModel::from_checkpoint(&ck)?;
    let fingerprint = match ck.get("state.config_fingerprint") {
        Some(t) => t.data().iter().rev().map(|&b| format!("{:02x}", b as u8)).collect(),
        None => "untrained".to_string(),
    };
    let test = pack::read(data)?;
    let report = evaluate(&model, &test, &fingerprint, 0)?;
    if format.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn ablate(
    config: &Path,
    data: &Path,
    test: Option<&Path>,
    holdout: usize,
    variants: &str,
    seeds: u64,
    out_dir: Option<&Path>,
    format: &Format,
) -> ncd_core::Result<()> {
    let config = RunConfig::read(config)?;
    let variants: Vec<Variant> = parse_variants(variants).map_err(|e| ConfigError::Invalid(vec![format!("--variants: {e}")]))?;
    if seeds == 0 {
        return Err(ConfigError::Invalid(vec!["--seeds: expected at least 1".into()]).into());
    }
    let mut train = pack::read(data)?;
    let test = match test {
        Some(t) => pack::read(t)?,
        None => {
            if holdout == 0 || holdout >= train.len() {
                return Err(Error::Data(format!("cannot hold out {holdout} of {} problems", train.len())));
            }
            train.split_off(train.len() - holdout)
        }
    };
    let seed_list: Vec<u64> = (config.train.seed..config.train.seed + seeds).collect();
    let grid = run_ablation(&train, &test, &config.train, &variants, &seed_list, config.transductive, |r| {
        eprintln!("{} seed {}: accuracy {:.4}", r.variant, r.seed, r.report.accuracy);
    })?;
    let has_k = variants.iter().any(|v| matches!(v, Variant::K(_)));
    if let Some(dir) = out_dir {
        let write = |name: &str, text: &str| {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
        };
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
        write("grid.json", &serde_json::to_string_pretty(&grid).expect("grid serializes"))?;
        write("grid.txt", &grid.to_table())?;
        if has_k {
            write("ksweep.csv", &grid.k_sweep_csv())?;
        }
    }
    if format.json {
        println!("{}", serde_json::to_string_pretty(&grid).expect("grid serializes"));
    } else {
        print!("{}", grid.to_table());
        if let Some(a) = grid.advisory() {
            println!("{a}");
        }
        if has_k {
            print!("{}", grid.k_sweep_csv());
        }
    }
    Ok(())
}
