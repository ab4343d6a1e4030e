use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gesture_kd::config::RunConfig;
use gesture_kd::harness::{evaluate_run, prepare, run_loocv};
use gesture_kd::report::EvaluationReport;
use gesture_kd::synth::{nearest_centroid_loso, write_dataset, SynthSpec};
use gesture_kd::{gradcheck, Error, Result};

#[derive(Parser)]
#[command(name = "gesture-kd", version, about = "Knowledge-sharing gesture recognition ensemble")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset in the DHG directory layout.
    Synth(RunArgs),
    /// Write the augmented dataset (provenance index plus one file per record).
    Augment(RunArgs),
    /// Train the selected folds and write snapshots and a report.
    Train(RunArgs),
    /// Evaluate existing snapshots and write a report.
    Eval(RunArgs),
    /// Run the finite-difference gradient suite on reduced configurations.
    Gradcheck,
    /// Render a saved report.json.
    Report {
        /// Path to report.json, or a run directory containing one.
        path: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
    Text,
}

impl Format {
    fn name(self) -> &'static str {
        match self {
            Format::Json => "json",
            Format::Csv => "csv",
            Format::Text => "text",
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Dataset root (DHG layout). Synthetic data is generated when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the full training protocol instead of the desk profile.
    #[arg(long)]
    paper: bool,
    /// Held-out subject(s), comma separated, or "all".
    #[arg(long)]
    fold: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cycles: Option<usize>,
    /// Epochs of the first cycle.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None if self.paper => RunConfig::paper(),
            None => RunConfig::desk(),
        };
        if let Some(d) = &self.data {
            c.data = Some(d.clone());
        }
        if let Some(o) = &self.out {
            c.out = o.clone();
        }
        if let Some(f) = &self.fold {
            c.set("folds", f)?;
        }
        macro_rules! over {
            ($field:expr, $v:expr) => {
                if let Some(v) = $v {
                    $field = v;
                }
            };
        }
        over!(c.seed, self.seed);
        over!(c.num_cycles, self.cycles);
        over!(c.base_epochs, self.epochs);
        over!(c.batch_size, self.batch);
        over!(c.temperature, self.temperature);
        over!(c.model.num_classes, self.classes);
        c.validate()?;
        Ok(c)
    }
}

fn print_report(report: &EvaluationReport, format: Format) -> Result<()> {
    println!("{}", report.render(format.name())?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => {
            let c = args.config()?;
            let root = args.data.clone().unwrap_or_else(|| c.out.join("data"));
            let spec = SynthSpec::new(c.model.num_classes, c.synth_subjects, c.synth_trials, c.seed);
            let seqs = write_dataset(&spec, &root)?;
            let acc = nearest_centroid_loso(&seqs, c.window())?;
            println!(
                "wrote {} sequences to {} (nearest-centroid LOSO accuracy {:.2}%)",
                seqs.len(),
                root.display(),
                100.0 * acc
            );
        }
        Command::Augment(args) => {
            let c = args.config()?;
            let data = prepare(&c)?;
            let dir = c.out.join("augmented");
            data.augmented.write_cache(&data.originals, &dir)?;
            println!("wrote {} records to {}", data.augmented.len(), dir.display());
        }
        Command::Train(args) => {
            let c = args.config()?;
            let started = Instant::now();
            let run = run_loocv(&c)?;
            print_report(&run.report, args.format)?;
            eprintln!(
                "trained {} fold(s) in {:.1}s; reports in {}",
                run.training.len(),
                started.elapsed().as_secs_f64(),
                c.out.display()
            );
        }
        Command::Eval(args) => {
            let c = args.config()?;
            let data = prepare(&c)?;
            let report = evaluate_run(&c, &data)?;
            report.write_all(&c.out)?;
            print_report(&report, args.format)?;
        }
        Command::Gradcheck => {
            let results = gradcheck::reduced_suite()?;
            let mut worst: f64 = 0.0;
            for (name, err) in &results {
                println!("{name:<32} max relative error {err:.3e}");
                worst = worst.max(*err);
            }
            if worst >= gradcheck::TOLERANCE {
                return Err(Error::InvalidArgument(format!(
                    "gradient check failed: {worst:.3e} >= {:.0e}",
                    gradcheck::TOLERANCE
                )));
            }
        }
        Command::Report { path, format } => {
            let path = if path.is_dir() { path.join("report.json") } else { path };
            print_report(&EvaluationReport::load(&path)?, format)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
