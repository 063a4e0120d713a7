//! Command line front end for the noise tolerant SQP solver and its
//! benchmark experiments.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use noisy_sqp::diagnostics::kkt_residual;
use noisy_sqp::harness::{
    execute, render_text, run_misestimation_table, run_relaxation_table, run_trace_experiment, write_trace_csv,
    ExperimentPlan, RunSpec, TableDocument, EPS_LEVELS,
};
use noisy_sqp::linalg::least_squares_multiplier;
use noisy_sqp::problems::verify_derivatives;
use noisy_sqp::{get_problem, ProblemName, SolverConfig, Status};

const DERIVATIVE_TOL: f64 = 1e-5;

#[derive(Parser, Debug)]
#[command(name = "noisy-sqp", version, about = "Noise tolerant SQP for equality constrained problems")]
struct Cli {
    /// Worker threads for experiment runs (defaults to available parallelism).
    #[arg(long, global = true, env = "NOISY_SQP_JOBS")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve one problem and report the final iterate.
    Solve(SolveArgs),
    /// Write per-iteration convergence traces as CSV.
    Trace(TraceArgs),
    /// Relaxation on/off comparison.
    Tables(TableArgs),
    /// Noise misestimation study.
    Misest(TableArgs),
    /// Finite-difference check of every problem's derivatives.
    Check(CheckArgs),
}

#[derive(Args, Debug, Clone)]
struct SolverFlags {
    /// JSON file with solver settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    pi_init: Option<f64>,
}

impl SolverFlags {
    fn base(&self) -> Result<SolverConfig, String> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
                serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?
            }
            None => SolverConfig::default(),
        };
        if let Some(v) = self.nu {
            cfg.nu = v;
        }
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
        if let Some(v) = self.pi_init {
            cfg.pi_init = v;
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
    Csv,
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[arg(long, default_value = "HS7")]
    problem: ProblemName,
    #[arg(long, default_value_t = 0.0)]
    eps1: f64,
    /// Defaults to `eps1`.
    #[arg(long)]
    eps2: Option<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, alias = "iters", default_value_t = 1000)]
    max_iters: usize,
    #[arg(long)]
    no_relaxation: bool,
    /// Factor applied to the true noise bounds to form the estimates.
    #[arg(long, default_value_t = 1.0)]
    est_multiplier: f64,
    /// Run the full budget instead of stopping on the noisy KKT test.
    #[arg(long)]
    no_stop_test: bool,
    /// `text`, `json`, or `csv` (the iteration trace).
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Also write the iteration trace as CSV to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    solver: SolverFlags,
}

#[derive(Args, Debug)]
struct TraceArgs {
    /// Problems to trace (all when omitted).
    #[arg(long, value_delimiter = ',')]
    problem: Vec<ProblemName>,
    #[arg(long, default_value_t = 1e-3)]
    eps1: f64,
    #[arg(long)]
    eps2: Option<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    seed: Vec<u64>,
    #[arg(long, alias = "max-iters", default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value = "traces")]
    out: PathBuf,
    #[command(flatten)]
    solver: SolverFlags,
}

#[derive(Args, Debug)]
struct TableArgs {
    #[arg(long, value_delimiter = ',')]
    problem: Vec<ProblemName>,
    /// Noise levels, applied to both `eps1` and `eps2` (all three when omitted).
    #[arg(long, value_delimiter = ',')]
    eps: Vec<f64>,
    /// Seeds 1..=N.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Output file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    solver: SolverFlags,
}

#[derive(Args, Debug)]
struct CheckArgs {
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<noisy_sqp::Error> for Failure {
    fn from(e: noisy_sqp::Error) -> Self {
        match e {
            noisy_sqp::Error::InvalidConfig(_) | noisy_sqp::Error::UnknownProblem(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let jobs = cli.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match pool.install(|| run(cli.command)) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run with --help for usage");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<ExitCode, Failure> {
    match command {
        Command::Solve(args) => solve(args),
        Command::Trace(args) => trace(args),
        Command::Tables(args) => table(args, false),
        Command::Misest(args) => table(args, true),
        Command::Check(args) => check(args),
    }
}

fn solve(args: SolveArgs) -> Result<ExitCode, Failure> {
    let base = args.solver.base().map_err(Failure::Usage)?;
    let spec = RunSpec {
        problem: args.problem,
        eps1: args.eps1,
        eps2: args.eps2.unwrap_or(args.eps1),
        seed: args.seed,
        relaxation: !args.no_relaxation,
        est_multiplier: args.est_multiplier,
        max_iters: args.max_iters,
        stop_test: !args.no_stop_test,
    };
    if !(spec.est_multiplier > 0.0 && spec.est_multiplier.is_finite()) {
        return Err(Failure::Usage("est-multiplier must be positive".into()));
    }
    let report = execute(&spec, &base)?;
    let problem = get_problem(args.problem);
    let exact = problem.eval_exact(&report.x)?;
    let feasibility = exact.c.lp_norm(1);
    let kkt = least_squares_multiplier(&exact.jac, &exact.g)
        .and_then(|lam| kkt_residual(&exact.g, &exact.jac, &(-lam)))
        .unwrap_or(f64::NAN);

    if let Some(path) = &args.out {
        write_trace_csv(BufWriter::new(File::create(path)?), &report.trace)?;
    }
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match args.format {
        Format::Csv => write_trace_csv(&mut out, &report.trace)?,
        Format::Json => {
            let (min_dist, min_dist_iter) = report.min_dist();
            let doc = serde_json::json!({
                "problem": args.problem,
                "eps1": spec.eps1,
                "eps2": spec.eps2,
                "seed": spec.seed,
                "relaxation": spec.relaxation,
                "est_multiplier": spec.est_multiplier,
                "status": report.status,
                "iterations": report.iterations,
                "failure_iter": report.failure_iter,
                "x": report.x.as_slice(),
                "f": exact.f,
                "feasibility": feasibility,
                "kkt_residual": kkt,
                "final_pi": report.final_pi,
                "final_dist": report.final_dist,
                "min_dist": min_dist,
                "min_dist_iter": min_dist_iter,
                "evaluations": report.evaluations,
            });
            serde_json::to_writer_pretty(&mut out, &doc).map_err(|e| Failure::Runtime(e.to_string()))?;
            writeln!(out)?;
        }
        Format::Text => {
            let xs: Vec<String> = report.x.iter().map(|v| format!("{v:.10e}")).collect();
            writeln!(out, "problem     {}", args.problem)?;
            writeln!(out, "status      {:?}", report.status)?;
            writeln!(out, "iterations  {}", report.iterations)?;
            if let Some(k) = report.failure_iter {
                writeln!(out, "failed at   {k}")?;
            }
            writeln!(out, "x           [{}]", xs.join(", "))?;
            writeln!(out, "f           {:.10e}", exact.f)?;
            writeln!(out, "|c|_1       {feasibility:.4e}")?;
            writeln!(out, "kkt         {kkt:.4e}")?;
            writeln!(out, "pi          {:.6}", report.final_pi)?;
            writeln!(out, "dist to x*  {:.4e}", report.final_dist)?;
        }
    }
    out.flush()?;
    Ok(match report.status {
        Status::Converged | Status::MaxIters => ExitCode::SUCCESS,
        Status::LineSearchFailure => {
            eprintln!("line search failed at iteration {}", report.failure_iter.unwrap_or(report.iterations));
            ExitCode::from(2)
        }
        Status::SingularJacobian => {
            eprintln!("singular constraint Jacobian at iteration {}", report.iterations);
            ExitCode::from(3)
        }
    })
}

fn problems_or_all(list: Vec<ProblemName>) -> Vec<ProblemName> {
    if list.is_empty() {
        ProblemName::ALL.to_vec()
    } else {
        list
    }
}

fn trace(args: TraceArgs) -> Result<ExitCode, Failure> {
    let base = args.solver.base().map_err(Failure::Usage)?;
    let plan = ExperimentPlan {
        problems: problems_or_all(args.problem),
        eps_levels: vec![(args.eps1, args.eps2.unwrap_or(args.eps1))],
        seeds: args.seed,
        k_max: vec![args.iters],
        relaxation: vec![true],
        multipliers: vec![1.0],
    };
    for path in run_trace_experiment(&plan, &base, &args.out)? {
        println!("{}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn table(args: TableArgs, misestimation: bool) -> Result<ExitCode, Failure> {
    let base = args.solver.base().map_err(Failure::Usage)?;
    if args.seeds == 0 {
        return Err(Failure::Usage("seeds must be positive".into()));
    }
    let seeds: Vec<u64> = (1..=args.seeds).collect();
    let levels = if args.eps.is_empty() { EPS_LEVELS.to_vec() } else { args.eps };
    let problems = problems_or_all(args.problem);
    let mut rows = Vec::new();
    for eps in levels {
        let mut plan = if misestimation {
            ExperimentPlan::misestimation(eps, seeds.clone())
        } else {
            ExperimentPlan::relaxation(eps, seeds.clone())
        };
        plan.problems = problems.clone();
        rows.extend(if misestimation {
            run_misestimation_table(&plan, &base)?
        } else {
            run_relaxation_table(&plan, &base)?
        });
    }
    let name = if misestimation { "misestimation" } else { "relaxation" };
    let mut out: Box<dyn Write> = match &args.out {
        Some(path) => Box::new(BufWriter::new(File::create(path)?)),
        None => Box::new(io::stdout().lock()),
    };
    match args.format {
        Format::Json => {
            TableDocument::new(name, rows).write_json(&mut out)?;
            writeln!(out)?;
        }
        Format::Text => write!(out, "{}", render_text(&rows))?,
        Format::Csv => return Err(Failure::Usage("tables support text or json output".into())),
    }
    out.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn check(args: CheckArgs) -> Result<ExitCode, Failure> {
    if !(args.step > 0.0) {
        return Err(Failure::Usage("step must be positive".into()));
    }
    let mut ok = true;
    for name in ProblemName::ALL {
        let p = get_problem(name);
        let err = verify_derivatives(&p, p.x_start(), args.step)?;
        let pass = err <= DERIVATIVE_TOL;
        ok &= pass;
        println!("{:<5} max rel err {err:.3e}  {}", name.as_str(), if pass { "ok" } else { "FAIL" });
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
