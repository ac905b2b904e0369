use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cyclespace::case::{read_case_file, write_json_case, GridCase};
use cyclespace::graph::{build_graph, minimum_cycle_basis};
use cyclespace::harness::{
    config_hash, default_partial_masks, detect_series, regions, run_attack, run_partial, run_scenario, run_simulate,
    run_sweep, run_theory, ArtifactWriter, DetectionOutcome, ExperimentConfig, Stage, StageError, REGION_F1,
};
use cyclespace::sim::MeasurementSeries;
use cyclespace::Error;

#[derive(Parser)]
#[command(name = "cyclespace", version, about = "Cycle-space detection of blind false-data-injection attacks")]
struct Cli {
    /// Grid case (MATPOWER `.m` or JSON); overrides the config's `case`.
    #[arg(long, global = true)]
    case: Option<PathBuf>,
    /// Experiment config as JSON; unset fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a case and export it with its minimum cycle basis.
    ParseCase,
    /// Simulate clean noisy measurements.
    Simulate,
    /// Simulate and inject the configured attack.
    Attack,
    /// Run detectors on a simulated scenario, or on a stored attacked series.
    Detect {
        /// Directory holding `attacked.csv` and `attacked.json` from `attack`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// F1 over the (kappa, sigma) grid.
    Sweep,
    /// Monte-Carlo validation of the generalization-error formulas.
    Theory,
    /// Sweep under full observability and with unmeasured branches.
    Partial,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::ParseCase => "parse-case",
            Command::Simulate => "simulate",
            Command::Attack => "attack",
            Command::Detect { .. } => "detect",
            Command::Sweep => "sweep",
            Command::Theory => "theory",
            Command::Partial => "partial",
        }
    }
}

fn fail(stage: Stage, source: Error) -> StageError {
    StageError { stage, source }
}

fn load(cli: &Cli) -> Result<(ExperimentConfig, GridCase), StageError> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| fail(Stage::Config, e.into()))?;
            ExperimentConfig::from_json(&text).map_err(|e| fail(Stage::Config, e))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(case) = &cli.case {
        cfg.case = Some(case.clone());
    }
    let path = cfg
        .case
        .clone()
        .ok_or_else(|| fail(Stage::Config, Error::InvalidParameter("no case given (--case or config)".into())))?;
    let case = read_case_file(&path).map_err(|e| fail(Stage::Parse, e))?;
    Ok((cfg, case))
}

fn print_rows(det: &DetectionOutcome) {
    for r in det.rows.iter().filter(|r| r.detector.parse::<usize>().is_err()) {
        println!(
            "{:<10} precision {:.4} recall {:.4} f1 {:.4}",
            r.detector, r.precision, r.recall, r.f1
        );
    }
}

fn run(cli: &Cli) -> Result<(), StageError> {
    let (cfg, case) = load(cli)?;
    let hash = config_hash(&cfg, &case);
    let mut out = ArtifactWriter::new(&cli.out, cli.command.name(), &hash)?;
    match &cli.command {
        Command::ParseCase => {
            let graph = build_graph(&case);
            let basis = minimum_cycle_basis(&graph, None).map_err(|e| fail(Stage::Parse, e))?;
            out.json("case.json", write_json_case(&case))?;
            out.json("basis.json", basis.to_json())?;
            println!(
                "{}: {} buses, {} branches, {} states, {} cycles (total length {})",
                case.case_name,
                case.n_buses(),
                case.n_branches(),
                case.n_states(),
                basis.len(),
                basis.total_length()
            );
        }
        Command::Simulate => {
            let series = run_simulate(&cfg, &case)?;
            out.csv("series.csv", &series.to_csv())?;
            out.json("series.json", series.sidecar_json())?;
            println!("{} samples of {} branch flows", series.len(), series.m());
        }
        Command::Attack => {
            let attack = run_attack(&cfg, &case)?;
            attack.write(&mut out)?;
            let (s, e) = attack.layout.window;
            println!("{:?} attack on samples [{s}, {e})", cfg.family);
        }
        Command::Detect { input } => match input {
            Some(dir) => {
                let series = load_series(dir)?;
                let det = detect_series(&cfg, &case, &series)?;
                det.write(&mut out)?;
                print_rows(&det);
            }
            None => {
                let scenario = run_scenario(&cfg, &case)?;
                scenario.write(&mut out)?;
                print_rows(&scenario.detection);
            }
        },
        Command::Sweep => {
            let sweep = run_sweep(&cfg, &case)?;
            sweep.write(&mut out)?;
            if let Some(e) = sweep.failure {
                out.finish()?;
                return Err(e);
            }
            for r in regions(&sweep.rows, REGION_F1) {
                println!("{:<10} {} cells with f1 >= {REGION_F1}", r.detector, r.cells.len());
            }
        }
        Command::Theory => {
            let theory = run_theory(&cfg, &case)?;
            theory.write(&mut out)?;
            for r in &theory.gen_error {
                println!(
                    "sigma {:<6} closed {:.6e} empirical {:.6e} rel_dev {:.4}",
                    r.sigma, r.e_gen_closed, r.e_gen_empirical, r.rel_dev
                );
            }
            println!("covariance frobenius rel err {:.4}", theory.covariance.frobenius_rel_err);
        }
        Command::Partial => {
            let masks = match &cfg.partial_masks {
                Some(m) => m.clone(),
                None => default_partial_masks(&build_graph(&case)).map_err(|e| fail(Stage::Config, e))?,
            };
            let partial = run_partial(&cfg, &case, &masks)?;
            partial.write(&mut out)?;
            for m in &partial.masks {
                println!("{}: removed {:?}, {} cycles left", m.name, m.removed, m.n_cycles);
            }
        }
    }
    let manifest = out.finish()?;
    println!("config_hash={hash} manifest={}", manifest.display());
    Ok(())
}

fn load_series(dir: &Path) -> Result<MeasurementSeries, StageError> {
    MeasurementSeries::load(dir, "attacked").map_err(|e| fail(Stage::Parse, e))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
