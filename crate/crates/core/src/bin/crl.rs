use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crl_core::datagen::{generate_synthetic, load_dataset, save_dataset, SyntheticConfig};
use crl_core::harness::{
    compare, evaluate_model, group_records, load_records, prepare_data, run_suite, suite_summary, train_run,
    BaselineMode, ExperimentConfig, RunOptions, SuiteOptions,
};
use crl_core::losses::CrlVariant;
use crl_core::metrics::{gain_text, gain_tsv};
use crl_core::mining::MiningMode;
use crl_core::network::load_checkpoint;
use crl_core::CrlError;

#[derive(Parser)]
#[command(name = "crl", version, about = "Class rectification loss experiments on imbalanced multi-attribute data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file from a generator TOML.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one or all configured seeds.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset file, or print the default config.
    Eval {
        #[arg(long)]
        print_config: bool,
        #[arg(long, required_unless_present = "print_config")]
        checkpoint: Option<PathBuf>,
        #[arg(long, required_unless_present = "print_config")]
        data: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Median per-attribute gains of every run group over a baseline group.
    Compare {
        /// Directory holding run records.
        #[arg(long)]
        runs: PathBuf,
        #[arg(long, default_value = "ce")]
        baseline: String,
        /// Write the gain table as TSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the full method suite on the default synthetic benchmark.
    BenchSuite {
        #[arg(long)]
        out: PathBuf,
        /// Base configuration; defaults to the built-in benchmark.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Train only this seed instead of every configured one.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, requires = "seed")]
    resume: Option<PathBuf>,
    #[arg(long)]
    loss: Option<CrlVariant>,
    #[arg(long)]
    mining: Option<MiningMode>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    hist_bins: Option<usize>,
    #[arg(long)]
    m_apc: Option<f64>,
    #[arg(long)]
    baseline: Option<BaselineMode>,
    #[arg(long)]
    ref_attr: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    name: Option<String>,
    /// Write per-batch mining dumps into this directory.
    #[arg(long)]
    dump_mining: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, short)]
    verbose: bool,
}

enum Failure {
    Usage(String),
    Run(CrlError),
}

impl From<CrlError> for Failure {
    fn from(e: CrlError) -> Self {
        Failure::Run(e)
    }
}

fn read_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    if !path.is_file() {
        return Err(Failure::Usage(format!("config file not found: {}", path.display())));
    }
    Ok(ExperimentConfig::load(path)?)
}

fn train(args: TrainArgs) -> Result<(), Failure> {
    let mut cfg = read_config(&args.config)?;
    if let Some(v) = args.loss {
        cfg.loss.variant = v;
    }
    if let Some(m) = args.mining {
        cfg.loss.mining = m;
    }
    if let Some(k) = args.k {
        cfg.loss.k = k;
    }
    if let Some(b) = args.hist_bins {
        cfg.loss.hist_bins = b;
    }
    if let Some(m) = args.m_apc {
        cfg.loss.m_apc = m;
    }
    if let Some(b) = args.baseline {
        cfg.baseline.mode = b;
    }
    if args.ref_attr.is_some() {
        cfg.baseline.ref_attr = args.ref_attr;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(n) = args.name {
        cfg.name = n;
    }
    if let Some(o) = args.out {
        cfg.output_dir = o;
    }
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    let data = prepare_data(&cfg.data)?;
    let resume = args.resume.as_deref().map(load_checkpoint).transpose()?;
    for &seed in &cfg.seeds {
        let opts = RunOptions {
            resume: resume.clone(),
            dump_mining: args.dump_mining.clone(),
            persist: true,
            verbose: args.verbose,
        };
        let outcome = train_run(&cfg, &data, seed, &opts)?;
        let r = &outcome.record;
        println!(
            "{} seed {}: average mean sensitivity {:.2}% ({} epochs, {:.1}s) -> {}",
            r.name,
            seed,
            r.final_report.average_mean_sensitivity,
            r.epochs.len(),
            r.wall_clock_seconds,
            cfg.output_dir.join(format!("{}_seed{seed}.json", r.name)).display()
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData { spec, out } => {
            if !spec.is_file() {
                return Err(Failure::Usage(format!("spec file not found: {}", spec.display())));
            }
            let text = std::fs::read_to_string(&spec).map_err(|e| CrlError::Config(e.to_string()))?;
            let syn: SyntheticConfig = toml::from_str(&text).map_err(CrlError::from)?;
            let ds = generate_synthetic(&syn.to_spec()?)?;
            save_dataset(&ds, &out)?;
            println!("wrote {} samples to {}", ds.len(), out.display());
        }
        Command::Train(args) => train(args)?,
        Command::Eval {
            print_config,
            checkpoint,
            data,
            json,
        } => {
            if print_config {
                print!("{}", ExperimentConfig::default().to_toml_string());
                return Ok(());
            }
            let (Some(ckpt), Some(data)) = (checkpoint, data) else {
                return Err(Failure::Usage("eval needs --checkpoint and --data".into()));
            };
            let ckpt = load_checkpoint(&ckpt)?;
            let ds = load_dataset(&data)?;
            let counts: Vec<Vec<usize>> = (0..ds.schema().n_attr()).map(|j| ds.class_counts(j)).collect();
            let report = evaluate_model(&ckpt.params, &ds, &counts)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report).map_err(CrlError::from)?);
            } else {
                print!("{}", report.to_text());
            }
        }
        Command::Compare { runs, baseline, out } => {
            let mut groups = group_records(load_records(&runs)?);
            let base = groups
                .remove(&baseline)
                .ok_or_else(|| CrlError::Config(format!("no `{baseline}` records in {}", runs.display())))?;
            let candidates: Vec<_> = groups.into_iter().collect();
            let rows = compare(&base, &candidates)?;
            print!("{}", gain_text(&rows));
            if let Some(out) = out {
                std::fs::write(&out, gain_tsv(&rows)).map_err(|e| CrlError::Config(format!("{}: {e}", out.display())))?;
            }
        }
        Command::BenchSuite {
            out,
            config,
            seeds,
            epochs,
        } => {
            let mut opts = SuiteOptions::default();
            if let Some(path) = config {
                opts.base = read_config(&path)?;
            }
            opts.base.output_dir = out;
            if let Some(s) = seeds {
                opts.seeds = s;
            }
            if let Some(e) = epochs {
                opts.base.epochs = e;
            }
            opts.verbose = true;
            let result = run_suite(&opts)?;
            print!("{}", suite_summary(&result.records, &result.gains, &result.checks));
        }
    }
    Ok(())
}

fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("{}", error_line("usage", &msg));
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            ExitCode::from(1)
        }
    }
}
