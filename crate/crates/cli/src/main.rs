use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trainscope::autodiff::{DiagMode, DEFAULT_DIAG_CAP};
use trainscope::log::{read_log, LogWriter};
use trainscope::problems::{self, PROBLEM_NAMES};
use trainscope::render::{export_csv, render_svg, unknown_quantities, DEFAULT_LAST_FRACTION};
use trainscope::runner::{
    overhead_benchmark, run_experiment_with, BenchCase, BenchTable, RunSettings, Schedule, Tier,
    TrackingConfig, MIN_REPEATS,
};
use trainscope::Error;

#[derive(Parser)]
#[command(name = "trainscope", version, about = "Instrumented SGD on small models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a problem with instruments and write a JSONL log.
    Train(TrainArgs),
    /// Draw the dashboard of a log as SVG and/or export it as CSV.
    Render(RenderArgs),
    /// Measure tracking overhead relative to untracked training.
    Bench(BenchArgs),
}

fn problem_name(s: &str) -> Result<String, String> {
    if PROBLEM_NAMES.contains(&s) {
        Ok(s.to_string())
    } else {
        Err(format!("expected one of {}", PROBLEM_NAMES.join(", ")))
    }
}

fn positive_float(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err("expected a positive number".into()),
    }
}

fn log_base(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 1.0 && v.is_finite() => Ok(v),
        _ => Err("expected a number above 1".into()),
    }
}

fn fraction(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if (0.0..=1.0).contains(&v) => Ok(v),
        _ => Err("expected a number between 0 and 1".into()),
    }
}

fn curvature_mode(s: &str) -> Result<DiagMode, String> {
    if s == "exact" {
        return Ok(DiagMode::Exact {
            cap: DEFAULT_DIAG_CAP,
        });
    }
    match s.strip_prefix("mc:").map(str::parse::<usize>) {
        Some(Ok(n)) if n > 0 => Ok(DiagMode::MonteCarlo { samples: n, seed: 0 }),
        _ => Err("expected `exact` or `mc:<samples>`".into()),
    }
}

fn tier(s: &str) -> Result<Tier, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = problem_name)]
    problem: String,
    #[arg(long)]
    steps: u64,
    /// Learning rate; defaults to the problem's.
    #[arg(long, value_parser = positive_float)]
    lr: Option<f64>,
    /// Mini-batch size; defaults to the problem's.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    batch_size: Option<u64>,
    #[arg(long, value_parser = tier, default_value = "economy")]
    tier: Tier,
    /// Track every k-th iteration.
    #[arg(long, conflicts_with = "log_spaced", value_parser = clap::value_parser!(u64).range(1..))]
    interval: Option<u64>,
    /// Track at iterations ⌊base^m⌋.
    #[arg(long, value_parser = log_base)]
    log_spaced: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// `exact` or `mc:<samples>` for the Hessian diagonal.
    #[arg(long, value_parser = curvature_mode, default_value = "exact")]
    curvature: DiagMode,
    /// Also log one histogram per layer.
    #[arg(long)]
    layer_histograms: bool,
    /// Record elapsed seconds in each event (logs are then not reproducible byte for byte).
    #[arg(long)]
    wall_clock: bool,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("output").required(true).multiple(true))]
struct RenderArgs {
    #[arg(long)]
    log: PathBuf,
    #[arg(long, group = "output")]
    svg: Option<PathBuf>,
    #[arg(long, group = "output")]
    csv: Option<PathBuf>,
    /// Share of the Alpha readings drawn as "late training".
    #[arg(long, value_parser = fraction, default_value_t = DEFAULT_LAST_FRACTION)]
    last_fraction: f64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_parser = problem_name)]
    problem: String,
    #[arg(long, value_delimiter = ',', value_parser = tier, default_value = "economy,business,full")]
    tiers: Vec<Tier>,
    #[arg(long, value_delimiter = ',', value_parser = clap::value_parser!(u64).range(1..), default_value = "1,4,16,64")]
    intervals: Vec<u64>,
    #[arg(long, default_value_t = MIN_REPEATS as u64, value_parser = clap::value_parser!(u64).range(MIN_REPEATS as u64..))]
    repeats: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV file for the timing table; the text grid goes to stdout.
    #[arg(long)]
    out: PathBuf,
}

fn train(args: TrainArgs) -> Result<(), Error> {
    let problem = problems::by_name(&args.problem, args.seed)?;
    let schedule = match (args.interval, args.log_spaced) {
        (_, Some(base)) => Schedule::LogSpaced(base),
        (Some(k), None) => Schedule::EveryK(k),
        (None, None) => Schedule::EveryK(1),
    };
    let mut config = TrackingConfig::tier(args.tier, schedule);
    config.curvature = args.curvature;
    config.layer_histograms = args.layer_histograms;
    let mut settings = RunSettings::for_problem(&problem, args.steps, args.seed);
    if let Some(lr) = args.lr {
        settings.lr = lr;
    }
    if let Some(b) = args.batch_size {
        settings.batch_size = b as usize;
    }
    settings.wall_clock = args.wall_clock;

    let mut writer = LogWriter::new(BufWriter::new(File::create(&args.out)?));
    let mut last_loss = None;
    let outcome = run_experiment_with(&problem, Some(&config), &settings, &mut |event| {
        last_loss = event.scalar("Loss").or(last_loss);
        writer.write(event)
    });
    let written = writer.written();
    writer.into_inner().flush()?;
    outcome?;
    let loss = last_loss.map_or_else(|| "n/a".to_string(), |l| format!("{l:.6e}"));
    println!(
        "final loss {loss}, {written} events written to {}",
        args.out.display()
    );
    Ok(())
}

fn render(args: RenderArgs) -> Result<(), Error> {
    let events = read_log(BufReader::new(File::open(&args.log)?))?;
    for warning in unknown_quantities(&events) {
        eprintln!("warning: {warning}");
    }
    if let Some(path) = &args.svg {
        std::fs::write(path, render_svg(&events, args.last_fraction))?;
    }
    if let Some(path) = &args.csv {
        let sidecars = export_csv(&events, path)?;
        for s in sidecars {
            eprintln!("wrote {}", s.display());
        }
    }
    Ok(())
}

fn text_grid(table: &BenchTable, tiers: &[Tier], intervals: &[u64]) -> String {
    let mut out = format!("overhead vs. baseline on {} (median of repeats)\n", table.problem);
    out.push_str(&format!("{:>10}", "tier"));
    for i in intervals {
        out.push_str(&format!("{:>10}", format!("every {i}")));
    }
    out.push('\n');
    for t in tiers {
        out.push_str(&format!("{:>10}", t.name()));
        for &i in intervals {
            let r = table.ratio(t.name(), Some(i)).unwrap_or(f64::NAN);
            out.push_str(&format!("{:>10}", format!("{r:.2}x")));
        }
        out.push('\n');
    }
    out
}

fn bench(args: BenchArgs) -> Result<(), Error> {
    let problem = problems::by_name(&args.problem, args.seed)?;
    let cases: Vec<BenchCase> = args
        .tiers
        .iter()
        .flat_map(|&t| args.intervals.iter().map(move |&i| BenchCase::tier(t, i)))
        .collect();
    let table = overhead_benchmark(&problem, &cases, args.repeats as usize)?;
    let mut w = csv::Writer::from_path(&args.out)?;
    w.write_record(["tier", "interval", "ratio", "seconds_per_step", "baseline_seconds_per_step"])?;
    let baseline: f64 =
        table.baseline_seconds_per_step.iter().sum::<f64>() / table.baseline_seconds_per_step.len() as f64;
    for row in &table.rows {
        let secs = row.seconds_per_step.iter().sum::<f64>() / row.seconds_per_step.len() as f64;
        w.write_record([
            row.label.clone(),
            row.interval.map_or_else(String::new, |i| i.to_string()),
            format!("{:?}", row.ratio),
            format!("{secs:?}"),
            format!("{baseline:?}"),
        ])?;
    }
    w.flush()?;
    print!("{}", text_grid(&table, &args.tiers, &args.intervals));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Render(a) => render(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::InvalidConfig(_)) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
