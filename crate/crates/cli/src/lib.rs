//! `ppou` command line: fit, predict, convergence and snapshot studies.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use ppou::data_io::{self, DataError, Problem};
use ppou::numerics::NumericsError;
use ppou::pou_net::NetError;
use ppou::study::{self, ConvergenceSpec};
use ppou::{Error, LsWeighting, TrainConfig, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "ppou", version, about = "Probabilistic partition-of-unity regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model to scattered data; writes a checkpoint and plot data.
    Fit(FitArgs),
    /// Evaluate mean and standard deviation of a checkpoint at points.
    Predict(PredictArgs),
    /// RMSE against total partition count, with fitted log-log slopes.
    Converge(ConvergeArgs),
    /// Shared partition of a snapshot database with per-snapshot errors.
    Snapshots(SnapshotArgs),
    /// Write a synthetic data set.
    Generate(GenerateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProblemArg {
    Sin1d,
    TanhNoisy,
    Sin2d,
    Sin2dLifted,
}

impl From<ProblemArg> for Problem {
    fn from(p: ProblemArg) -> Self {
        match p {
            ProblemArg::Sin1d => Problem::Sin1d,
            ProblemArg::TanhNoisy => Problem::TanhNoisy,
            ProblemArg::Sin2d => Problem::Sin2d,
            ProblemArg::Sin2dLifted => Problem::Sin2dLifted,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum WeightingArg {
    Squared,
    Linear,
}

/// Hyperparameters; unset values take the command's defaults.
#[derive(Debug, Args)]
struct Hyper {
    /// Trained partitions M.
    #[arg(short = 'M', long)]
    partitions: Option<usize>,
    /// Polynomial degree m.
    #[arg(short = 'm', long)]
    degree: Option<usize>,
    /// Bisection levels N_ref.
    #[arg(long)]
    refinements: Option<usize>,
    #[arg(long, default_value_t = 10_000)]
    stage1_iters: usize,
    #[arg(long, default_value_t = 500)]
    stage3_iters: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = ppou::pou_net::DEFAULT_WIDTH)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = WeightingArg::Squared)]
    weighting: WeightingArg,
    /// Stage-1 starts; the lowest-loss probe is trained in full.
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    /// Stage-1 iterations per probe start.
    #[arg(long, default_value_t = 1000)]
    probe_iters: usize,
}

impl Hyper {
    fn config(&self, partitions: usize, degree: usize, refinements: usize) -> TrainConfig {
        TrainConfig {
            partitions: self.partitions.unwrap_or(partitions),
            degree: self.degree.unwrap_or(degree),
            refinements: self.refinements.unwrap_or(refinements),
            stage1_iters: self.stage1_iters,
            stage3_iters: self.stage3_iters,
            learning_rate: self.lr,
            width: self.width,
            seed: self.seed,
            weighting: match self.weighting {
                WeightingArg::Squared => LsWeighting::Squared,
                WeightingArg::Linear => LsWeighting::Linear,
            },
            restarts: self.restarts,
            probe_iters: self.probe_iters,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Scattered CSV with header `x1,...,xd,y`.
    #[arg(long, conflicts_with = "problem", required_unless_present = "problem")]
    data: Option<PathBuf>,
    /// Built-in synthetic problem instead of a file.
    #[arg(long, value_enum)]
    problem: Option<ProblemArg>,
    /// Sample count for `--problem`.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Checkpoint output.
    #[arg(long)]
    model_out: PathBuf,
    /// Directory for plot CSVs.
    #[arg(long)]
    plot_dir: Option<PathBuf>,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// CSV with header `x1,...,xd` (a trailing `y` column is ignored).
    #[arg(long)]
    points: PathBuf,
    /// Output CSV `x1,...,xd,mean,std`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ConvergeArgs {
    #[arg(long, value_enum)]
    problem: ProblemArg,
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 10_000)]
    n_test: usize,
    /// Polynomial degrees, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    degrees: Vec<usize>,
    /// `M:N_ref` pairs, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_config, default_value = "1:2,2:2,4:2,8:2,16:2")]
    configs: Vec<(usize, usize)>,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    /// Directory for `convergence.csv` and `slopes.csv`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Debug, Args)]
struct SnapshotArgs {
    /// Wide CSV or snapshot directory.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    db: Option<PathBuf>,
    /// Synthetic plateau family instead of a file.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, default_value_t = 4000)]
    nodes: usize,
    #[arg(long, default_value_t = 20)]
    snapshots: usize,
    #[arg(long, default_value_t = 10)]
    plateaus: usize,
    /// Directory for `snapshot_errors.csv` and `snapshot_summary.csv`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long, value_enum, conflicts_with = "plateaus", required_unless_present = "plateaus")]
    problem: Option<ProblemArg>,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Plateau count of a synthetic snapshot family; written as a wide CSV.
    #[arg(long)]
    plateaus: Option<usize>,
    #[arg(long, default_value_t = 20)]
    snapshots: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_config(s: &str) -> Result<(usize, usize), String> {
    let (m, r) = s
        .split_once(':')
        .ok_or_else(|| format!("`{s}` is not of the form M:N_ref"))?;
    let m = m.trim().parse().map_err(|_| format!("bad partition count in `{s}`"))?;
    let r = r.trim().parse().map_err(|_| format!("bad refinement level in `{s}`"))?;
    Ok((m, r))
}

fn data_exit(e: &DataError) -> i32 {
    match e {
        DataError::Usage(_) => EXIT_USAGE,
        _ => EXIT_IO,
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Data(d) => data_exit(d),
        Error::Net(NetError::Input(_)) => EXIT_IO,
        Error::Net(_) => EXIT_USAGE,
        Error::Numerics(NumericsError::Dimension(_)) | Error::Shape(_) => EXIT_USAGE,
        Error::Numerics(_) => EXIT_NUMERICAL,
        Error::Train(t) => match t.as_ref() {
            TrainError::NonFinite { .. } => EXIT_NUMERICAL,
            TrainError::Config(_) => EXIT_USAGE,
            TrainError::Model(inner) => exit_code(inner),
        },
    }
}

fn ensure_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|source| {
        DataError::Io {
            path: dir.to_path_buf(),
            source,
        }
        .into()
    })
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    Ok(data_io::write_atomic(path, text.as_bytes())?)
}

fn fit(args: FitArgs) -> Result<(), Error> {
    let data = match (&args.data, args.problem) {
        (Some(path), _) => data_io::load_scattered_csv(path)?,
        (None, Some(p)) => Problem::from(p).training(args.n, args.hyper.seed),
        (None, None) => unreachable!("clap requires one source"),
    };
    let cfg = args.hyper.config(4, 1, 1);
    let model = ppou::fit(&data, &cfg)?;
    data_io::save_model(&args.model_out, &model)?;
    if let Some(dir) = &args.plot_dir {
        study::emit_plot_data(&model, &data, dir)?;
    }
    let rmse = study::rms_error(&model, &data)?;
    println!(
        "fitted M_tot = {} partitions, degree {}, training RMSE {:.6e}",
        model.forest.total_partitions(),
        cfg.degree,
        rmse
    );
    Ok(())
}

fn predict(args: PredictArgs) -> Result<(), Error> {
    let model = data_io::load_model(&args.model)?;
    let x = data_io::load_points_csv(&args.points)?;
    let pred = model.predict(x.view())?;
    let mut header: Vec<String> = (1..=x.ncols()).map(|i| format!("x{i}")).collect();
    header.extend(["mean".to_string(), "std".to_string()]);
    let rows = (0..x.nrows()).map(|j| {
        let mut row = x.row(j).to_vec();
        row.extend([pred.mean[j], pred.std[j]]);
        row
    });
    write(&args.out, &data_io::csv_text(&header, rows))
}

fn converge(args: ConvergeArgs) -> Result<(), Error> {
    ensure_dir(&args.out)?;
    let spec = ConvergenceSpec {
        problem: args.problem.into(),
        train_points: args.n_train,
        test_points: args.n_test,
        degrees: args.degrees,
        configs: args.configs,
        repetitions: args.reps,
        base: args.hyper.config(1, 1, 0),
    };
    let records = study::convergence_study(&spec)?;
    write(&args.out.join("convergence.csv"), &study::convergence_csv(&records))?;
    write(&args.out.join("slopes.csv"), &study::slopes_csv(&records))?;
    for rec in &records {
        for w in &rec.warnings {
            eprintln!("warning: {w}");
        }
        for row in &rec.rows {
            eprintln!(
                "m={} M={} N_ref={} M_tot={} rmse={:.4e} ({:.1} s)",
                row.degree,
                row.partitions,
                row.refinements,
                row.total_partitions,
                row.rmse.unwrap_or(f64::NAN),
                row.wall_time
            );
        }
        match rec.slope {
            Some(s) => println!("m={}: slope {:.4} +/- {:.4}", rec.degree, s.slope, s.std_err),
            None => println!("m={}: no slope", rec.degree),
        }
    }
    Ok(())
}

fn snapshots(args: SnapshotArgs) -> Result<(), Error> {
    ensure_dir(&args.out)?;
    let db = match &args.db {
        Some(path) => data_io::load_snapshot_db(path)?,
        None => data_io::gen_plateau_snapshots(args.nodes, args.snapshots, args.plateaus, args.hyper.seed),
    };
    let cfg = args.hyper.config(10, 0, 0);
    let (report, _) = study::snapshot_study(&db, &cfg)?;
    write(&args.out.join("snapshot_errors.csv"), &report.per_snapshot_csv())?;
    write(&args.out.join("snapshot_summary.csv"), &report.summary_csv())?;
    println!(
        "worst per-snapshot relative RMS {:.4e} (shared coefficients {:.4e}), dof reduction {:.1}x",
        report.worst_refit_rms(),
        report.worst_shared_rms(),
        report.dof_reduction
    );
    Ok(())
}

fn generate(args: GenerateArgs) -> Result<(), Error> {
    match (args.problem, args.plateaus) {
        (_, Some(plateaus)) => {
            let db = data_io::gen_plateau_snapshots(args.n, args.snapshots, plateaus, args.seed);
            data_io::save_snapshot_csv(&args.out, &db)?;
        }
        (Some(p), None) => {
            let data = Problem::from(p).training(args.n, args.seed);
            data_io::save_scattered_csv(&args.out, &data)?;
        }
        (None, None) => unreachable!("clap requires one source"),
    }
    Ok(())
}

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Fit(a) => fit(a),
        Command::Predict(a) => predict(a),
        Command::Converge(a) => converge(a),
        Command::Snapshots(a) => snapshots(a),
        Command::Generate(a) => generate(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Train(t) = &e {
                if let TrainError::NonFinite { last_good, .. } = t.as_ref() {
                    eprintln!(
                        "last finite state: {} network parameters, noise log-scales {:?}",
                        last_good.net.param_count(),
                        last_good.noise.log_sigma
                    );
                }
            }
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_pairs() {
        assert_eq!(parse_config("4:2"), Ok((4, 2)));
        assert!(parse_config("4").is_err());
        assert!(parse_config("a:1").is_err());
    }

    #[test]
    fn per_command_defaults() {
        let cli = Cli::try_parse_from(["ppou", "snapshots", "--synthetic", "--out", "o"]).unwrap();
        let Command::Snapshots(a) = cli.command else { panic!() };
        let cfg = a.hyper.config(10, 0, 0);
        assert_eq!((cfg.partitions, cfg.degree, cfg.refinements), (10, 0, 0));
        assert_eq!(cfg.stage1_iters, 10_000);
        assert_eq!(cfg.stage3_iters, 500);
        assert_eq!(cfg.learning_rate, 0.01);
        assert_eq!(cfg.width, 64);

        let cli = Cli::try_parse_from(["ppou", "fit", "--problem", "sin1d", "--model-out", "m", "-M", "7"]).unwrap();
        let Command::Fit(a) = cli.command else { panic!() };
        assert_eq!(a.hyper.config(4, 1, 1).partitions, 7);
    }

    #[test]
    fn usage_errors() {
        assert_eq!(run(["ppou", "fit", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["ppou"]), EXIT_USAGE);
        assert_eq!(run(["ppou", "fit", "--help"]), EXIT_OK);
    }
}
