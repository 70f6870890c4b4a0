//! `agribench`: run the forecasting benchmark stage by stage or end to end.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use agribench::models::ModelKind;
use agribench::pipeline::{
    compare_forecasts, dm_table, emit_diagnostics, emit_dm, emit_metrics, emit_tables, read_forecasts, summary_text,
    DmRow, ErrorKind, PipelineError, Run, RunConfig, Stage,
};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "agribench", version, about = "Commodity price forecasting benchmark")]
struct Cli {
    /// Commodities processed in parallel.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    jobs: u16,
    /// Suppress progress messages on standard error.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Target {
    /// Run configuration file.
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Args)]
struct Select {
    #[command(flatten)]
    target: Target,
    /// Restrict to one commodity.
    #[arg(long)]
    commodity: Option<String>,
    /// Restrict to one model.
    #[arg(long)]
    model: Option<String>,
}

#[derive(Args)]
struct DmArgs {
    /// Test every configured pair from cached forecasts.
    #[arg(long, short, conflicts_with_all = ["comparison", "reference"])]
    config: Option<PathBuf>,
    /// Prediction CSV of the comparison model (window_id,step,actual,predicted).
    comparison: Option<PathBuf>,
    /// Prediction CSV of the reference model.
    reference: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, repair and flag the input series.
    Ingest(Target),
    /// ADF and STL diagnostics per commodity.
    Diagnose(Target),
    /// Fit models and cache checkpoints.
    Train(Select),
    /// Forecast the test range from cached checkpoints.
    Predict(Select),
    /// Accuracy metrics from cached forecasts.
    Evaluate(Target),
    /// Diebold-Mariano tests, from a config or two prediction files.
    Dm(DmArgs),
    /// Assemble all tables and the summary from cached artifacts.
    Report(Target),
    /// Every stage in order.
    All(Target),
}

fn open(target: &Target, quiet: bool) -> Result<Run, PipelineError> {
    Ok(Run::new(RunConfig::load(&target.config)?)?.with_progress(!quiet))
}

fn selection(run: &Run, sel: &Select) -> Result<(Vec<String>, Vec<ModelKind>), PipelineError> {
    let bad = |m: String| PipelineError::new(Stage::Config, ErrorKind::Config, m);
    let commodities = match &sel.commodity {
        None => run.commodities(),
        Some(c) if run.config().data.contains_key(c) => vec![c.clone()],
        Some(c) => return Err(bad(format!("commodity `{c}` is not in the configuration"))),
    };
    let models = match &sel.model {
        None => run.config().models.clone(),
        Some(m) => {
            let kind: ModelKind = m.parse().map_err(|e: agribench::models::ModelError| bad(e.to_string()))?;
            if !run.config().models.contains(&kind) {
                return Err(bad(format!("model `{m}` is not selected in the configuration")));
            }
            vec![kind]
        }
    };
    Ok((commodities, models))
}

fn per_model(
    run: &Run,
    sel: &Select,
    jobs: usize,
    step: impl Fn(&Run, &str, ModelKind) -> Result<(), PipelineError> + Sync,
) -> Result<(), PipelineError> {
    let (commodities, models) = selection(run, sel)?;
    run.for_each_commodity(jobs, |c| {
        if !commodities.iter().any(|x| x == c) {
            return Ok(());
        }
        models.iter().try_for_each(|&m| step(run, c, m))
    })
}

fn execute(cli: &Cli) -> Result<(), PipelineError> {
    let jobs = usize::from(cli.jobs);
    let quiet = cli.quiet;
    match &cli.command {
        Command::Ingest(t) => {
            let run = open(t, quiet)?;
            run.for_each_commodity(jobs, |c| run.ingest(c).map(|_| ()))?;
            run.correlate()
        }
        Command::Diagnose(t) => {
            let run = open(t, quiet)?;
            run.for_each_commodity(jobs, |c| run.diagnose(c).map(|_| ()))?;
            let rows = run
                .commodities()
                .iter()
                .map(|c| run.load_diagnostics(c))
                .collect::<Result<Vec<_>, _>>()?;
            let path = emit_diagnostics(&rows, run.layout(), run.hash())?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Train(s) => {
            let run = open(&s.target, quiet)?;
            per_model(&run, s, jobs, |r, c, m| r.train(c, m))
        }
        Command::Predict(s) => {
            let run = open(&s.target, quiet)?;
            per_model(&run, s, jobs, |r, c, m| r.predict(c, m).map(|_| ()))
        }
        Command::Evaluate(t) => {
            let run = open(t, quiet)?;
            let path = emit_metrics(&run.evaluate()?, run.layout(), run.hash())?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Dm(args) => match (&args.config, &args.comparison, &args.reference) {
            (Some(cfg), _, _) => {
                let run = open(&Target { config: cfg.clone() }, quiet)?;
                let path = emit_dm(&run.dm()?, run.layout(), run.hash())?;
                println!("{}", path.display());
                Ok(())
            }
            (None, Some(a), Some(b)) => {
                let (fa, fb) = (read_forecasts(a)?, read_forecasts(b)?);
                let name = |p: &PathBuf| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let row = DmRow {
                    commodity: fa.rows[0].commodity.clone(),
                    comparison: name(a),
                    reference: name(b),
                    result: compare_forecasts(&fa, &fb)?,
                };
                print!("{}", dm_table(&[row])?);
                Ok(())
            }
            _ => Err(PipelineError::new(
                Stage::Dm,
                ErrorKind::Config,
                "dm needs --config or two prediction files",
            )),
        },
        Command::Report(t) => {
            let run = open(t, quiet)?;
            let report = run.report(None)?;
            emit_tables(&report, run.layout())?;
            print!("{}", summary_text(&report));
            Ok(())
        }
        Command::All(t) => {
            let run = open(t, quiet)?;
            let report = run.execute(jobs)?;
            print!("{}", summary_text(&report));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
