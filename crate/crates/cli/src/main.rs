use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ltlab_core::harness::{self, DataSpec, ExperimentConfig, RunOutcome};
use ltlab_core::metatrain::SplitAccuracy;
use ltlab_core::Error;

#[derive(Parser)]
#[command(name = "ltlab", version, about = "Long-tailed classification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the benchmark described by the config and write it to disk.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for train.ltds, meta.ltds and test.ltds.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every (method, seed) pair and write run directories.
    Train(ConfigArgs),
    /// Retrain the classifier heads of finished runs on class-balanced batches.
    Crt(ConfigArgs),
    /// Evaluate linear + cosine ensembles of finished runs.
    Ensemble(ConfigArgs),
    /// Summarize run directories as medians and IQRs per method.
    Report {
        /// Run directories or output roots holding `<method>/seed-<n>/`.
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        /// Also write the summary as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file. Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set lambda=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        match &self.config {
            Some(p) => ExperimentConfig::load(p, &self.overrides),
            None => ExperimentConfig::from_text("", Path::new("<defaults>"), &self.overrides),
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::NonFinite { .. } => 3,
        _ => 1,
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.2}", 100.0 * v))
}

fn splits_line(s: &SplitAccuracy) -> String {
    format!(
        "overall {} many {} medium {} few {}",
        pct(Some(s.overall)),
        pct(s.many),
        pct(s.medium),
        pct(s.few)
    )
}

fn print_outcome(o: &RunOutcome) {
    let mut line = format!("{} seed {}:", o.method, o.seed);
    if let Some(s) = &o.splits {
        line.push(' ');
        line.push_str(&splits_line(s));
    }
    if let Some(e) = o.entropy {
        line.push_str(&format!(" entropy {e:.5}"));
    }
    println!("{line}");
    if let Some(c) = &o.crt {
        println!("  crt: {}", splits_line(c));
    }
    if let Some([_, cos, ens]) = &o.ensemble {
        println!("  cosine: {}", splits_line(cos));
        println!("  ensemble: {}", splits_line(ens));
    }
}

fn jobs(cfg: &ExperimentConfig) -> Vec<(String, u64)> {
    cfg.methods
        .iter()
        .flat_map(|m| cfg.seeds.iter().map(move |&s| (m.name().to_string(), s)))
        .collect()
}

fn execute(command: Command) -> Result<(), Error> {
    let threads = harness::thread_count();
    match command {
        Command::GenData { config, out } => {
            let cfg = config.load()?;
            let DataSpec::Synthetic(spec) = &cfg.data else {
                return Err(Error::Config {
                    key: "train_path".into(),
                    message: "gen-data needs synthetic parameters, not dataset files".into(),
                });
            };
            let data = harness::synthesize(spec)?;
            for p in harness::write_data(&data, &out)? {
                println!("wrote {}", p.display());
            }
            println!("train counts {:?}", data.train.counts());
            println!("realized imbalance ratio {}", data.realized_ratio());
        }
        Command::Train(args) => {
            let cfg = args.load()?;
            let mut first_error = None;
            for result in harness::run_all(&cfg, threads)? {
                match result {
                    Ok(o) => print_outcome(&o),
                    Err(e) => {
                        eprintln!("run failed: {e}");
                        first_error.get_or_insert(e);
                    }
                }
            }
            if let Some(e) = first_error {
                return Err(e);
            }
        }
        Command::Crt(args) => {
            let cfg = args.load()?;
            for ((method, seed), s) in jobs(&cfg).into_iter().zip(harness::run_crt(&cfg, threads)?) {
                println!("{method} seed {seed} crt: {}", splits_line(&s));
            }
        }
        Command::Ensemble(args) => {
            let cfg = args.load()?;
            for ((method, seed), [lin, cos, ens]) in jobs(&cfg).into_iter().zip(harness::run_ensemble(&cfg, threads)?) {
                println!("{method} seed {seed}:");
                println!("  linear: {}", splits_line(&lin));
                println!("  cosine: {}", splits_line(&cos));
                println!("  ensemble: {}", splits_line(&ens));
            }
        }
        Command::Report { paths, csv } => {
            let rep = harness::report(&harness::collect_run_dirs(&paths));
            print!("{}", rep.to_text());
            if let Some(p) = csv {
                std::fs::write(&p, rep.to_csv()).map_err(|e| Error::Io { path: p, source: e })?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
