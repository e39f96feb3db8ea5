//! `icct` command-line driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use icct_core::datasets::{gen_synthetic, load_csv, SynthSpec};
use icct_core::experiment::{
    comparison_table, run_born_again, run_distill, run_train, ExperimentConfig, Role,
};
use icct_core::gradcheck::{check_all, worst_failure, DEFAULT_SEED, DEFAULT_TOLERANCE};
use icct_core::icc::{icc_map_batch, IccMap};
use icct_core::mlp::{predict_logits, NetworkParams};
use icct_core::{Error, Result};

#[derive(Parser)]
#[command(name = "icct", version, about = "Inter-class correlation transfer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelRole {
    Teacher,
    Student,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/test pair from a JSON spec.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the teacher or student network alone for every seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "student")]
        model: ModelRole,
    },
    /// Distill a student from a frozen teacher checkpoint for every seed.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Run born-again generations for every seed.
    BornAgain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Check every analytic gradient against central differences.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tol: f64,
    },
    /// Write the batch-averaged ICC map of one data batch per checkpoint.
    IccDump {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        batch: usize,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long = "out", required = true)]
        outs: Vec<PathBuf>,
    },
    /// Print a comparison table over all run reports under a directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
    },
}

fn gen_data(spec: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(spec).map_err(|e| Error::io(spec, e))?;
    let spec: SynthSpec =
        serde_json::from_str(&text).map_err(|e| Error::config(format!("spec: {e}")))?;
    let (train, test) = gen_synthetic(&spec)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    train.write_csv(&out.join("train.csv"))?;
    test.write_csv(&out.join("test.csv"))?;
    println!("train.csv {} rows, test.csv {} rows", train.len(), test.len());
    Ok(())
}

fn print_summary(dir: &Path) -> Result<()> {
    let path = dir.join("summary.csv");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    print!("{text}");
    Ok(())
}

fn train(config: &Path, role: ModelRole) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let data = cfg.data.load()?;
    let role = match role {
        ModelRole::Teacher => Role::Teacher,
        ModelRole::Student => Role::Student,
    };
    let runs = run_train(&cfg, role, &data)?;
    let label = &runs[0].report.label;
    print_summary(&cfg.output_dir.join(icct_core::experiment::method_dir_name(label)))
}

fn distill(config: &Path, teacher: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let teacher = NetworkParams::load(teacher)?;
    let data = cfg.data.load()?;
    let (lambda, _) = run_distill(&cfg, &teacher, &data)?;
    println!("lambda {lambda}");
    print_summary(
        &cfg.output_dir
            .join(icct_core::experiment::method_dir_name(cfg.transfer.label())),
    )
}

fn born_again(config: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let data = cfg.data.load()?;
    let (lambda, _) = run_born_again(&cfg, &data)?;
    println!("lambda {lambda}");
    print_summary(&cfg.output_dir.join("born_again"))
}

fn gradcheck(seed: u64, tol: f64) -> Result<()> {
    let reports = check_all(seed, tol)?;
    for r in &reports {
        println!("{r}");
    }
    match worst_failure(&reports) {
        Some(r) => Err(Error::Numeric(format!("gradient check failed: {}", r.target))),
        None => Ok(()),
    }
}

fn icc_dump(
    checkpoints: &[PathBuf],
    data: &Path,
    batch: usize,
    batch_size: usize,
    outs: &[PathBuf],
) -> Result<()> {
    if checkpoints.len() != outs.len() {
        return Err(Error::usage(format!(
            "{} checkpoints but {} --out paths",
            checkpoints.len(),
            outs.len()
        )));
    }
    if batch_size == 0 {
        return Err(Error::usage("--batch-size must be at least 1"));
    }
    let ds = load_csv(data)?;
    let n_batches = ds.len().div_ceil(batch_size);
    if batch >= n_batches {
        return Err(Error::usage(format!(
            "batch {batch} out of range: {} rows make {n_batches} batches of {batch_size}",
            ds.len()
        )));
    }
    let rows: Vec<usize> = (batch * batch_size..((batch + 1) * batch_size).min(ds.len())).collect();
    let inputs = ds.features.select_rows(&rows);
    let mut maps: Vec<IccMap> = Vec::new();
    for (ckpt, out) in checkpoints.iter().zip(outs) {
        let params = NetworkParams::load(ckpt)?;
        let logits = predict_logits(&params, &inputs)?;
        let map = icc_map_batch(&logits)?;
        map.write_csv(out)?;
        println!("{} -> {}", ckpt.display(), out.display());
        maps.push(map);
    }
    for k in 1..maps.len() {
        println!("KL(map 0 || map {k}) {:.8e}", maps[0].kl_divergence(&maps[k])?);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out } => gen_data(&spec, &out),
        Command::Train { config, model } => train(&config, model),
        Command::Distill { config, teacher } => distill(&config, &teacher),
        Command::BornAgain { config } => born_again(&config),
        Command::Gradcheck { seed, tol } => gradcheck(seed, tol),
        Command::IccDump {
            checkpoints,
            data,
            batch,
            batch_size,
            outs,
        } => icc_dump(&checkpoints, &data, batch, batch_size, &outs),
        Command::Report { runs } => {
            print!("{}", comparison_table(&runs)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
