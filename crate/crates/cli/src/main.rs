use std::fs;
use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Result};
use clap::{Parser, Subcommand};
use fedbreach::harness::{
    inspect, read_records, run_experiment_in, score, write_csv, AttackBundle, Attacker, ExperimentSpec, OUT_DIR_ENV,
};

#[derive(Parser)]
#[command(
    name = "fedbreach",
    version,
    about = "Malicious-parameter data extraction from federated transformer updates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell of an experiment spec and write records and a table.
    Run {
        spec: PathBuf,
        /// Output directory; overrides the spec and the environment.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Reconstruct the sequences of a saved attack bundle.
    Attack {
        bundle: PathBuf,
        /// Denoise the readout with this jump-budget multiple.
        #[arg(long)]
        denoise: Option<f64>,
        /// Print the full result as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Print crafted-parameter diagnostics for a bundle or a spec.
    Inspect {
        /// Attack bundle directory, or experiment spec file.
        target: PathBuf,
        /// Sequence length used to craft from a spec (defaults to its first).
        #[arg(long)]
        seq_len: Option<usize>,
    },
    /// Convert a records file to CSV.
    Report {
        records: PathBuf,
        /// Write here instead of stdout.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

fn run(spec: PathBuf, out_dir: Option<PathBuf>) -> Result<bool> {
    let spec = ExperimentSpec::load(&spec)?;
    let dir = out_dir
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| spec.out_dir.clone());
    let report = run_experiment_in(&spec, &dir)?;
    print!("{}", fs::read_to_string(&report.table_path)?);
    eprintln!("records: {}", report.records_path.display());
    let failed = report.rows.iter().filter(|r| !r.is_complete()).count();
    if failed > 0 {
        eprintln!("{failed} of {} cells did not complete", report.rows.len());
    }
    Ok(failed == 0)
}

fn attack(dir: PathBuf, denoise: Option<f64>, json: bool) -> Result<()> {
    let bundle = AttackBundle::load(&dir)?;
    let res = bundle.attack(denoise)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&res)?);
    } else {
        println!(
            "{} breached embeddings, {} flagged as collisions, {}/{} slots certified",
            res.breached_count,
            res.collision_count,
            res.certified_count(),
            res.slot_count()
        );
        for (i, s) in res.sequences.iter().enumerate() {
            let toks: Vec<String> = s
                .tokens
                .iter()
                .zip(&s.certified)
                .map(|(t, &c)| if c { format!("{t}*") } else { t.to_string() })
                .collect();
            println!("sequence {i}: {}", toks.join(" "));
        }
    }
    if let Some(truth) = &bundle.truth {
        let recovered: Vec<Vec<usize>> = res.sequences.iter().map(|s| s.tokens.clone()).collect();
        let sc = score(&recovered, truth)?;
        eprintln!(
            "total accuracy {:.4}, token accuracy {:.4}, BLEU {:.4}, ROUGE-L {:.4}",
            sc.total_accuracy, sc.token_accuracy, sc.bleu, sc.rouge_l
        );
    }
    Ok(())
}

fn inspect_target(target: PathBuf, seq_len: Option<usize>) -> Result<()> {
    let text = if target.is_dir() {
        let b = AttackBundle::load(&target)?;
        inspect(&b.crafted, &b.config)?
    } else {
        let spec = ExperimentSpec::load(&target)?;
        let s = seq_len.unwrap_or(spec.sweep.seq_lens[0]);
        if s > spec.model.max_positions {
            bail!("sequence length {s} exceeds max_positions {}", spec.model.max_positions);
        }
        let mut att = Attacker::new(&spec)?;
        let (p, cfg) = att.crafted(&spec, s)?;
        inspect(p, cfg)?
    };
    print!("{text}");
    Ok(())
}

fn report(records: PathBuf, output: Option<PathBuf>) -> Result<()> {
    let rows = read_records(&records)?;
    match output {
        Some(p) => {
            let f = fs::File::create(&p).map_err(|e| anyhow!("creating {}: {e}", p.display()))?;
            write_csv(&rows, f)?;
        }
        None => write_csv(&rows, io::stdout().lock())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let out = match cli.command {
        Command::Run { spec, out_dir } => run(spec, out_dir),
        Command::Attack { bundle, denoise, json } => attack(bundle, denoise, json).map(|_| true),
        Command::Inspect { target, seq_len } => inspect_target(target, seq_len).map(|_| true),
        Command::Report { records, output } => report(records, output).map(|_| true),
    };
    match out {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
