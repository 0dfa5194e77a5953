use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use vcmm::io::{
    load_dataset, read_lambdas, write_dataset, write_json, write_path_csv, write_path_long_csv, Dataset,
    FitReport, PathSummary,
};
use vcmm::simulate::{simulate_anova, simulate_genetic, AnovaDesign, GeneticDesign, GeneticSetting};
use vcmm::study::{run_study, write_study, Method, StudyConfig, StudyDesign};
use vcmm::{compute_path_with, default_lambda_grid, fit, Criterion, FitConfig, Formulation, PathOptions, VcmmError};

#[derive(Parser)]
#[command(name = "vcmm", version, about = "Variance components of logistic linear mixed models")]
struct Cli {
    /// Worker threads for replicate and lambda-path parallelism (1 = bit-reproducible).
    #[arg(long, global = true, env = "VCMM_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the unpenalized model with MMLA1 or MMLA2.
    Fit(FitArgs),
    /// Fit a lasso path over the variance components and select by AIC/BIC.
    Path(PathArgs),
    /// Write a simulated dataset.
    Simulate(SimulateArgs),
    /// Run a Monte Carlo study and summarize it.
    Replicate(ReplicateArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Binary response, one value per line, no header.
    #[arg(long)]
    y: PathBuf,
    /// Fixed-effect design with a header row.
    #[arg(long)]
    x: PathBuf,
    /// Random-effect design with a header row.
    #[arg(long)]
    z: PathBuf,
    /// Block layout of the Z columns.
    #[arg(long)]
    blocks: PathBuf,
}

#[derive(Args, Clone)]
struct SolverArgs {
    #[arg(long, default_value_t = 500)]
    max_outer: usize,
    #[arg(long, default_value_t = 200)]
    max_inner: usize,
    /// Relative change in the objective that ends the outer loop.
    #[arg(long, default_value_t = 1e-8)]
    outer_tol: f64,
    /// Gradient max-norm that ends the inner mode search.
    #[arg(long, default_value_t = 1e-6)]
    inner_tol: f64,
}

impl SolverArgs {
    fn config(&self) -> FitConfig {
        FitConfig {
            max_outer_iters: self.max_outer,
            max_inner_iters: self.max_inner,
            outer_tol: self.outer_tol,
            inner_tol: self.inner_tol,
            ..FitConfig::default()
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Algorithm {
    Mmla1,
    Mmla2,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    formulation: Algorithm,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CriterionArg {
    Aic,
    Bic,
    Both,
}

#[derive(Args)]
struct PathArgs {
    #[command(flatten)]
    data: DataArgs,
    /// `auto` for a log-spaced grid from lambda_max, or a file with one lambda per line.
    #[arg(long, default_value = "auto")]
    lambdas: String,
    #[arg(long, value_enum, default_value_t = CriterionArg::Both)]
    criterion: CriterionArg,
    #[arg(long)]
    out_dir: PathBuf,
    /// Grid size for `--lambdas auto`.
    #[arg(long, default_value_t = 50)]
    points: usize,
    /// Smallest grid value as a fraction of lambda_max.
    #[arg(long, default_value_t = 1e-3)]
    ratio: f64,
    /// Fit each lambda from the default start instead of the previous solution.
    #[arg(long)]
    cold_start: bool,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DesignKind {
    Anova,
    Genetic,
}

#[derive(Args, Clone)]
struct DesignArgs {
    #[arg(long, value_enum)]
    design: DesignKind,
    /// Levels of the first crossed factor.
    #[arg(long, default_value_t = 5)]
    a: usize,
    /// Levels of the second crossed factor.
    #[arg(long, default_value_t = 5)]
    b: usize,
    /// Replicates per cell.
    #[arg(long, default_value_t = 50)]
    c: usize,
    /// Genetic variance pattern, 1-4.
    #[arg(long, default_value_t = 1)]
    setting: u8,
    /// Number of genomic regions.
    #[arg(long, default_value_t = 5)]
    m: usize,
    /// Genetic sample size.
    #[arg(long, default_value_t = 399)]
    n: usize,
}

impl DesignArgs {
    fn build(&self, seed: u64) -> vcmm::Result<StudyDesign> {
        Ok(match self.design {
            DesignKind::Anova => StudyDesign::Anova(AnovaDesign {
                a: self.a,
                b: self.b,
                c: self.c,
                ..AnovaDesign::standard(self.c, seed)
            }),
            DesignKind::Genetic => {
                let setting = GeneticSetting::from_index(self.setting)?;
                StudyDesign::Genetic(GeneticDesign {
                    n: self.n,
                    ..GeneticDesign::setting(setting, self.m, seed)?
                })
            }
        })
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    design: DesignArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ReplicateArgs {
    #[command(flatten)]
    design: DesignArgs,
    #[arg(long, default_value_t = 50)]
    replicates: usize,
    /// mmla1, mmla2, path-aic or path-bic.
    #[arg(long)]
    method: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 50)]
    points: usize,
    #[arg(long, default_value_t = 1e-3)]
    ratio: f64,
    #[command(flatten)]
    solver: SolverArgs,
}

/// Input problems exit with 1, non-convergence or failed replicates with 2.
enum Failure {
    Input(VcmmError),
    Incomplete(String),
}

impl From<VcmmError> for Failure {
    fn from(e: VcmmError) -> Self {
        Failure::Input(e)
    }
}

fn load(args: &DataArgs) -> vcmm::Result<Dataset> {
    load_dataset(&args.y, &args.x, &args.z, &args.blocks)
}

fn cmd_fit(args: FitArgs) -> Result<(), Failure> {
    let ds = load(&args.data)?;
    let form = match args.formulation {
        Algorithm::Mmla1 => Formulation::F1,
        Algorithm::Mmla2 => Formulation::F2,
    };
    let result = fit(form, &ds.data, &args.solver.config())?;
    write_json(&args.out, &FitReport::new(&result, &ds.x_names, &ds.block_names))?;
    if result.converged {
        Ok(())
    } else {
        Err(Failure::Incomplete(format!(
            "{} did not converge in {} iterations; result written to {}",
            form.algorithm_name(),
            result.outer_iters,
            args.out.display()
        )))
    }
}

fn cmd_path(args: PathArgs) -> Result<(), Failure> {
    let ds = load(&args.data)?;
    let cfg = args.solver.config();
    let lambdas = if args.lambdas == "auto" {
        default_lambda_grid(&ds.data, &cfg, args.points, args.ratio)?
    } else {
        read_lambdas(Path::new(&args.lambdas))?
    };
    let opts = PathOptions {
        warm_start: !args.cold_start,
    };
    let path = compute_path_with(&ds.data, &lambdas, &cfg, &opts)?;
    let criteria: Vec<Criterion> = match args.criterion {
        CriterionArg::Aic => vec![Criterion::Aic],
        CriterionArg::Bic => vec![Criterion::Bic],
        CriterionArg::Both => vec![Criterion::Aic, Criterion::Bic],
    };
    let out = &args.out_dir;
    write_path_csv(&out.join("path.csv"), &path)?;
    write_path_long_csv(&out.join("path_long.csv"), &path, &ds.block_names)?;
    let summary = PathSummary::new(&path, &ds.block_names, &criteria);
    write_json(&out.join("selected.json"), &summary)?;
    for s in &summary.selected {
        println!(
            "{:?}: lambda {:.6e}, df {}, blocks [{}]",
            s.criterion,
            s.lambda,
            s.df,
            s.selected_blocks.join(", ")
        );
    }
    println!("df nonincreasing in lambda: {}", summary.df_nonincreasing_in_lambda);
    if summary.all_converged {
        Ok(())
    } else {
        let bad = path.fits.iter().filter(|f| !f.converged).count();
        Err(Failure::Incomplete(format!("{bad} of {} path fits did not converge", path.fits.len())))
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Failure> {
    let sim = match args.design.build(args.seed)? {
        StudyDesign::Anova(d) => simulate_anova(&d)?,
        StudyDesign::Genetic(d) => simulate_genetic(&d)?,
    };
    write_dataset(&args.out_dir, &sim)?;
    Ok(())
}

fn cmd_replicate(args: ReplicateArgs) -> Result<(), Failure> {
    let method: Method = args.method.parse()?;
    let design = args.design.build(args.seed)?;
    let cfg = StudyConfig {
        fit: args.solver.config(),
        path_points: args.points,
        path_ratio: args.ratio,
        ..StudyConfig::new(design, args.replicates, method, args.seed)
    };
    let outcome = run_study(&cfg)?;
    write_study(&args.out_dir, &outcome)?;
    let s = &outcome.summary;
    println!(
        "{}: {} replicates, {} failed, {} not converged, mean runtime {:.3}s",
        s.method.name(),
        s.replicates,
        s.failed,
        s.not_converged,
        s.runtime_mean
    );
    if let Some(sel) = &s.selection {
        println!(
            "TP {:.2}  FP {:.2}  Exact {:.0}%  Over {:.0}%",
            sel.true_positive,
            sel.false_positive,
            100.0 * sel.exact,
            100.0 * sel.over
        );
    }
    if outcome.any_failed() {
        Err(Failure::Incomplete(format!("{} replicates failed", s.failed)))
    } else {
        Ok(())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Path(a) => cmd_path(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Replicate(a) => cmd_replicate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Incomplete(msg)) => {
            eprintln!("warning: {msg}");
            ExitCode::from(2)
        }
    }
}
