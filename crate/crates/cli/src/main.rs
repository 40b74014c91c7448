use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedcl::harness::{self, Checkpoint, ExperimentConfig, Strategy};
use fedcl::metrics::{Event, MetricsSink};
use fedcl::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUN: u8 = 3;

#[derive(Parser)]
#[command(name = "fedcl", version, about = "Federated continual learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write report.json and events.jsonl.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Resume from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run several experiments and write comparison.csv.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        config: Vec<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the built-in oracle checks.
    Selftest {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(clap::Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<String>,
}

impl Overrides {
    fn load(&self, path: &Path) -> Result<ExperimentConfig, Error> {
        let mut cfg = ExperimentConfig::load(path)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(s) = &self.strategy {
            cfg.strategy = s.parse::<Strategy>()?;
        }
        if let Some(out) = &self.out {
            cfg.output.dir = Some(out.to_string_lossy().into_owned());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: Option<&ExperimentConfig>) -> PathBuf {
        self.out
            .clone()
            .or_else(|| cfg.and_then(|c| c.output.dir.clone()).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."))
    }
}

/// Writes each event as one JSON line.
struct JsonlSink {
    out: BufWriter<File>,
    error: Option<std::io::Error>,
}

impl MetricsSink for JsonlSink {
    fn record(&mut self, event: Event) {
        if self.error.is_some() {
            return;
        }
        let line = serde_json::to_string(&event).expect("events serialize");
        if let Err(e) = writeln!(self.out, "{line}") {
            self.error = Some(e);
        }
    }
}

fn exit_for(err: &Error) -> ExitCode {
    log::error!("{err}");
    eprintln!("error: {err}");
    ExitCode::from(if err.is_config() { EXIT_CONFIG } else { EXIT_RUN })
}

fn run(config: &Path, overrides: &Overrides, resume: Option<&Path>) -> ExitCode {
    let cfg = match overrides.load(config) {
        Ok(c) => c,
        Err(e) => return exit_for(&e),
    };
    let checkpoint = match resume.map(Checkpoint::read).transpose() {
        Ok(c) => c,
        Err(e) => return exit_for(&e),
    };
    let dir = overrides.out_dir(Some(&cfg));
    let result = (|| -> Result<harness::RunReport, Error> {
        fs::create_dir_all(&dir)?;
        let mut sink = JsonlSink { out: BufWriter::new(File::create(dir.join("events.jsonl"))?), error: None };
        let ck_dir = cfg.output.checkpoint.then_some(dir.as_path());
        let report = harness::run_experiment_with(&cfg, &mut sink, checkpoint, ck_dir)?;
        if let Some(e) = sink.error.take() {
            return Err(e.into());
        }
        sink.out.flush()?;
        fs::write(dir.join("report.json"), report.to_json()?)?;
        Ok(report)
    })();
    match result {
        Ok(report) => {
            println!(
                "{} seed {}: final avg accuracy {:.4}, mean forgetting {}, {} bytes",
                report.strategy,
                report.seed,
                report.final_avg_accuracy(),
                report.final_mean_forgetting().map_or_else(|| "n/a".into(), |f| format!("{f:.4}")),
                report.comm.total_bytes
            );
            ExitCode::SUCCESS
        }
        Err(e) => exit_for(&e),
    }
}

fn compare(configs: &[PathBuf], overrides: &Overrides) -> ExitCode {
    let cfgs = match configs.iter().map(|p| overrides.load(p)).collect::<Result<Vec<_>, _>>() {
        Ok(c) => c,
        Err(e) => return exit_for(&e),
    };
    let (table, reports) = match harness::compare(&cfgs) {
        Ok(t) => t,
        Err(e) => return exit_for(&e),
    };
    let dir = overrides.out_dir(None);
    let written = fs::create_dir_all(&dir).and_then(|_| fs::write(dir.join("comparison.csv"), table.to_csv()));
    if let Err(e) = written {
        return exit_for(&e.into());
    }
    print!("{}", table.to_csv());
    if reports.iter().any(Result::is_err) {
        ExitCode::from(EXIT_RUN)
    } else {
        ExitCode::SUCCESS
    }
}

fn selftest(seed: u64) -> ExitCode {
    let outcomes = fedcl::selftest::run_all(seed);
    for o in &outcomes {
        println!("{o}");
    }
    if outcomes.iter().all(|o| o.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_RUN)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(EXIT_CONFIG);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match &cli.command {
        Command::Run { config, overrides, resume } => run(config, overrides, resume.as_deref()),
        Command::Compare { config, overrides } => compare(config, overrides),
        Command::Selftest { seed } => selftest(*seed),
    }
}
