use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cuber::harness::config::ExperimentConfig;
use cuber::harness::experiment::{run_experiment, PersistedMetrics};
use cuber::harness::metrics::{compute_metrics, AccuracyMatrix};
use cuber::theory::sweep;

#[derive(Parser)]
#[command(name = "cuber", about = "Continual learning with task-correlated subspace reuse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file (TOML, flat keys); defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's seed list with a single seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's mode list with a single mode
    #[arg(long)]
    mode: Option<String>,
    /// Output directory
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Parallel jobs (seeds/modes only; training itself is single-threaded)
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct VerifyTheoryArgs {
    /// Accepted instances per theorem sweep
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// Problem dimension
    #[arg(long, default_value_t = 4)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the machine-readable report here (JSON)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a continual-learning experiment across modes and seeds
    Run(RunArgs),
    /// Verify the convergence and transfer guarantees on synthetic instances
    VerifyTheory(VerifyTheoryArgs),
    /// Recompute metrics from a persisted accuracy matrix
    Metrics {
        /// Run directory containing accuracy.csv
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate metrics.json files across an experiment directory
    Compare {
        /// Experiment root containing per-job subdirectories
        #[arg(long)]
        out: PathBuf,
    },
}

fn cmd_run(args: RunArgs) -> Result<(), String> {
    let mut config = match &args.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| e.to_string())?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seeds = vec![seed];
    }
    if let Some(mode) = &args.mode {
        config.modes = vec![mode.clone()];
    }
    let outcomes = run_experiment(&config, &args.out, args.threads).map_err(|e| e.to_string())?;
    for o in &outcomes {
        let bwt = o.metrics.bwt.map(|b| format!("{b:+.4}")).unwrap_or_else(|| "-".into());
        println!("{:<16} seed {:<4} ACC {:.4}  BWT {}", o.mode.to_string(), o.seed, o.metrics.acc, bwt);
    }
    println!("results in {}", args.out.display());
    Ok(())
}

fn cmd_verify_theory(args: VerifyTheoryArgs) -> Result<(), String> {
    let sweeps = [
        ("thm1_convex", args.count),
        ("thm1_nonconvex", args.count),
        ("thm2_part1", args.count),
        ("thm2_part2", args.count),
        ("thm2_part2_conflict", args.count / 4),
    ];
    let mut all_ok = true;
    let mut reports = Vec::new();
    for (name, target) in sweeps {
        let s = sweep(name, target.max(1), args.dim, args.seed);
        let ok = s.all_accepted_passed();
        all_ok &= ok || name == "thm2_part2_conflict";
        println!(
            "{:<22} accepted {:>4}/{:<5} passed {:>4}  acceptance {:.1}%  {}",
            s.theorem,
            s.accepted,
            s.tried,
            s.passed,
            100.0 * s.acceptance_rate,
            if ok { "ok" } else if name == "thm2_part2_conflict" { "(conflict probe)" } else { "FAIL" },
        );
        if name == "thm2_part2_conflict" && !s.first_violations.is_empty() {
            let min = s.first_violations.iter().min().unwrap();
            let max = s.first_violations.iter().max().unwrap();
            println!("{:<22} first alignment violations at steps {min}..{max} over {} instances", "", s.first_violations.len());
        }
        reports.push(s);
    }
    if let Some(path) = &args.out {
        let json = serde_json::to_string_pretty(&reports).map_err(|e| e.to_string())?;
        std::fs::write(path, json + "\n").map_err(|e| e.to_string())?;
        println!("report written to {}", path.display());
    }
    if all_ok {
        Ok(())
    } else {
        Err("a theorem sweep failed".into())
    }
}

fn cmd_metrics(dir: PathBuf) -> Result<(), String> {
    let csv = std::fs::read_to_string(dir.join("accuracy.csv")).map_err(|e| e.to_string())?;
    let matrix = AccuracyMatrix::from_csv(&csv).map_err(|e| e.to_string())?;
    let metrics = compute_metrics(&matrix).map_err(|e| e.to_string())?;
    println!("tasks {}", matrix.num_tasks());
    println!("ACC {:.6}", metrics.acc);
    match metrics.bwt {
        Some(b) => println!("BWT {b:+.6}"),
        None => println!("BWT undefined (single task)"),
    }
    Ok(())
}

fn cmd_compare(root: PathBuf) -> Result<(), String> {
    let mut by_mode: BTreeMap<String, Vec<PersistedMetrics>> = BTreeMap::new();
    for entry in std::fs::read_dir(&root).map_err(|e| e.to_string())? {
        let entry = entry.map_err(|e| e.to_string())?;
        let path = entry.path().join("metrics.json");
        if !path.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
        let pm: PersistedMetrics = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        by_mode.entry(pm.mode.clone()).or_default().push(pm);
    }
    if by_mode.is_empty() {
        return Err(format!("no metrics.json files under {}", root.display()));
    }
    println!("{:<16} {:>5} {:>8} {:>9} {:>9}", "mode", "seeds", "ACC", "BWT", "BWT-S");
    for (mode, runs) in &by_mode {
        let n = runs.len() as f64;
        let acc = runs.iter().map(|r| r.metrics.acc).sum::<f64>() / n;
        let bwts: Vec<f64> = runs.iter().filter_map(|r| r.metrics.bwt).collect();
        let bwt = if bwts.is_empty() {
            "-".to_string()
        } else {
            format!("{:+.4}", bwts.iter().sum::<f64>() / bwts.len() as f64)
        };
        let bwtss: Vec<f64> = runs.iter().filter_map(|r| r.bwt_s.as_ref().and_then(|b| b.average)).collect();
        let bwts_avg = if bwtss.is_empty() {
            "-".to_string()
        } else {
            format!("{:+.4}", bwtss.iter().sum::<f64>() / bwtss.len() as f64)
        };
        println!("{mode:<16} {:>5} {acc:>8.4} {bwt:>9} {bwts_avg:>9}", runs.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::VerifyTheory(args) => cmd_verify_theory(args),
        Command::Metrics { out } => cmd_metrics(out),
        Command::Compare { out } => cmd_compare(out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
