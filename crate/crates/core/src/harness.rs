//! Benchmark experiments: convergence traces, the relaxation on/off
//! comparison, and the noise misestimation study.
//!
//! Every run is keyed by its seed alone, so a row of any table can be
//! reproduced with a single solve using the same seed. Runs inside a plan are
//! independent and execute on the current rayon pool; results are returned
//! in plan order regardless of scheduling.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::NoiseSpec;
use crate::problems::{get_problem, reference_solution, ProblemName};
use crate::solver::{solve, IterateRecord, SolveReport, SolverConfig, Status};

/// Cartesian product of settings to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub problems: Vec<ProblemName>,
    /// `(eps1, eps2)` pairs.
    pub eps_levels: Vec<(f64, f64)>,
    pub seeds: Vec<u64>,
    pub k_max: Vec<usize>,
    pub relaxation: Vec<bool>,
    /// Factors applied to the true noise bounds to form the estimates.
    pub multipliers: Vec<f64>,
}

/// Noise levels used throughout the benchmark.
pub const EPS_LEVELS: [f64; 3] = [1e-5, 1e-3, 1e-1];

/// Iteration budget for misestimation runs, which stop on the noisy KKT test.
pub const MISESTIMATION_MAX_ITERS: usize = 10_000;

/// Under- and over-estimation factors paired with each true noise level.
pub fn table_multipliers(eps: f64) -> [f64; 3] {
    if eps <= 1e-5 {
        [1.0, 1e-3, 1e3]
    } else if eps <= 1e-3 {
        [1.0, 1e-2, 1e2]
    } else {
        [1.0, 1e-1, 1e1]
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        let empty = [
            (self.problems.is_empty(), "problems"),
            (self.eps_levels.is_empty(), "eps levels"),
            (self.seeds.is_empty(), "seeds"),
            (self.k_max.is_empty(), "k_max values"),
            (self.relaxation.is_empty(), "relaxation modes"),
            (self.multipliers.is_empty(), "multipliers"),
        ];
        if let Some((_, what)) = empty.iter().find(|(e, _)| *e) {
            return Err(Error::InvalidConfig(format!("experiment plan has no {what}")));
        }
        if self.multipliers.iter().any(|&m| !(m > 0.0 && m.is_finite())) {
            return Err(Error::InvalidConfig("multipliers must be positive".into()));
        }
        if self.k_max.contains(&0) {
            return Err(Error::InvalidConfig("k_max values must be positive".into()));
        }
        for &(e1, e2) in &self.eps_levels {
            NoiseSpec::new(e1, e2, 0)?;
        }
        Ok(())
    }

    /// 1000-iteration traces at `eps1 = eps2 = 1e-3`.
    pub fn traces(seeds: Vec<u64>) -> Self {
        Self {
            problems: ProblemName::ALL.to_vec(),
            eps_levels: vec![(1e-3, 1e-3)],
            seeds,
            k_max: vec![1000],
            relaxation: vec![true],
            multipliers: vec![1.0],
        }
    }

    /// Relaxation on/off at one noise level with budgets 100, 500, 1000.
    pub fn relaxation(eps: f64, seeds: Vec<u64>) -> Self {
        Self {
            problems: ProblemName::ALL.to_vec(),
            eps_levels: vec![(eps, eps)],
            seeds,
            k_max: vec![100, 500, 1000],
            relaxation: vec![false, true],
            multipliers: vec![1.0],
        }
    }

    /// Misestimation study at one true noise level.
    pub fn misestimation(eps: f64, seeds: Vec<u64>) -> Self {
        Self {
            problems: ProblemName::ALL.to_vec(),
            eps_levels: vec![(eps, eps)],
            seeds,
            k_max: vec![MISESTIMATION_MAX_ITERS],
            relaxation: vec![true],
            multipliers: table_multipliers(eps).to_vec(),
        }
    }
}

/// Settings of a single solver run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub problem: ProblemName,
    pub eps1: f64,
    pub eps2: f64,
    pub seed: u64,
    pub relaxation: bool,
    pub est_multiplier: f64,
    pub max_iters: usize,
    pub stop_test: bool,
}

impl RunSpec {
    /// Solver configuration with estimates `est_multiplier` times the true
    /// derived bounds, layered over `base`.
    pub fn config(&self, base: &SolverConfig) -> SolverConfig {
        let p = get_problem(self.problem);
        let truth = NoiseSpec { eps1: self.eps1, eps2: self.eps2, seed: self.seed }.bounds(p.n(), p.m());
        SolverConfig {
            relaxation_enabled: self.relaxation,
            max_iters: self.max_iters,
            stop_test: self.stop_test,
            ..base.clone()
        }
        .with_estimates(truth.scaled(self.est_multiplier))
    }

    pub fn noise(&self) -> Result<NoiseSpec> {
        NoiseSpec::new(self.eps1, self.eps2, self.seed)
    }
}

/// Runs one solve measured against the problem's reference solution.
pub fn execute(spec: &RunSpec, base: &SolverConfig) -> Result<SolveReport> {
    let problem = get_problem(spec.problem);
    let reference = reference_solution(spec.problem)?;
    solve(&problem, &spec.noise()?, &spec.config(base), Some(&reference.x_star))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationKind {
    Opt,
    Ls,
    MaxIters,
    SingularJacobian,
}

impl From<Status> for TerminationKind {
    fn from(s: Status) -> Self {
        match s {
            Status::Converged => TerminationKind::Opt,
            Status::LineSearchFailure => TerminationKind::Ls,
            Status::MaxIters => TerminationKind::MaxIters,
            Status::SingularJacobian => TerminationKind::SingularJacobian,
        }
    }
}

impl TerminationKind {
    pub fn label(self) -> &'static str {
        match self {
            TerminationKind::Opt => "opt",
            TerminationKind::Ls => "ls",
            TerminationKind::MaxIters => "max",
            TerminationKind::SingularJacobian => "sing",
        }
    }
}

/// One table row: a run, or a run truncated at `k_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub problem: ProblemName,
    pub eps1: f64,
    pub eps2: f64,
    pub seed: u64,
    pub relaxation: bool,
    pub est_multiplier: f64,
    pub k_max: usize,
    pub status: Status,
    pub failure_iter: Option<usize>,
    pub min_dist: f64,
    pub min_dist_iter: usize,
    pub iters_run: usize,
    pub termination_kind: TerminationKind,
    pub final_pi: f64,
    /// Iteration at which the penalty parameter took its final value.
    pub pi_settled_iter: usize,
    pub pi_nondecreasing: bool,
}

/// Penalty history of a trace: (iteration of the last change, monotone?).
pub fn penalty_profile(trace: &[IterateRecord]) -> (usize, bool) {
    let mut settled = 0;
    let mut monotone = true;
    for w in trace.windows(2) {
        if w[1].pi != w[0].pi {
            settled = w[1].k;
        }
        monotone &= w[1].pi >= w[0].pi;
    }
    (settled, monotone)
}

/// Summary of `report` as if the run had been stopped after `k_max`
/// iterations.
pub fn summarize(spec: &RunSpec, report: &SolveReport, k_max: usize) -> RunSummary {
    let truncated = report.iterations > k_max;
    let (status, iters_run) = if truncated {
        (Status::MaxIters, k_max)
    } else {
        (report.status, report.iterations)
    };
    let (min_dist, min_dist_iter) = report.min_dist_up_to(k_max);
    let kept = report.trace.len().min(k_max);
    let (pi_settled_iter, pi_nondecreasing) = penalty_profile(&report.trace[..kept]);
    RunSummary {
        problem: spec.problem,
        eps1: spec.eps1,
        eps2: spec.eps2,
        seed: spec.seed,
        relaxation: spec.relaxation,
        est_multiplier: spec.est_multiplier,
        k_max,
        status,
        failure_iter: if truncated { None } else { report.failure_iter },
        min_dist,
        min_dist_iter,
        iters_run,
        termination_kind: status.into(),
        final_pi: report.trace[..kept].last().map_or(report.final_pi, |r| r.pi),
        pi_settled_iter,
        pi_nondecreasing,
    }
}

fn run_all(specs: &[RunSpec], base: &SolverConfig) -> Result<Vec<SolveReport>> {
    specs.par_iter().map(|s| execute(s, base)).collect()
}

/// Relaxation comparison. Disabled runs stop at the first line search
/// failure and yield one row each; enabled runs yield one row per `k_max`
/// (prefixes of a single run of length `max(k_max)`).
pub fn run_relaxation_table(plan: &ExperimentPlan, base: &SolverConfig) -> Result<Vec<RunSummary>> {
    plan.validate()?;
    let budget = *plan.k_max.iter().max().expect("validated non-empty");
    let mut specs = Vec::new();
    for &problem in &plan.problems {
        for &(eps1, eps2) in &plan.eps_levels {
            for &seed in &plan.seeds {
                for &relaxation in &plan.relaxation {
                    specs.push(RunSpec {
                        problem,
                        eps1,
                        eps2,
                        seed,
                        relaxation,
                        est_multiplier: 1.0,
                        max_iters: budget,
                        stop_test: false,
                    });
                }
            }
        }
    }
    let reports = run_all(&specs, base)?;
    let mut rows = Vec::new();
    for (spec, report) in specs.iter().zip(&reports) {
        if spec.relaxation {
            let mut k_max = plan.k_max.clone();
            k_max.sort_unstable();
            rows.extend(k_max.iter().map(|&k| summarize(spec, report, k)));
        } else {
            rows.push(summarize(spec, report, budget));
        }
    }
    Ok(rows)
}

/// Misestimation study: estimates are `multiplier` times the true bounds
/// (all four scaled jointly) and runs stop on the noisy KKT test.
pub fn run_misestimation_table(plan: &ExperimentPlan, base: &SolverConfig) -> Result<Vec<RunSummary>> {
    plan.validate()?;
    let budget = *plan.k_max.iter().max().expect("validated non-empty");
    let mut specs = Vec::new();
    for &problem in &plan.problems {
        for &(eps1, eps2) in &plan.eps_levels {
            for &seed in &plan.seeds {
                for &relaxation in &plan.relaxation {
                    for &est_multiplier in &plan.multipliers {
                        specs.push(RunSpec {
                            problem,
                            eps1,
                            eps2,
                            seed,
                            relaxation,
                            est_multiplier,
                            max_iters: budget,
                            stop_test: true,
                        });
                    }
                }
            }
        }
    }
    let reports = run_all(&specs, base)?;
    Ok(specs
        .iter()
        .zip(&reports)
        .map(|(spec, report)| summarize(spec, report, budget))
        .collect())
}

/// One CSV row of a convergence trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub k: usize,
    pub dist: f64,
    pub log2_dist: f64,
    pub alpha: f64,
    pub pi: f64,
    pub merit_noisy: f64,
    pub psi: f64,
    pub backtracks: usize,
}

impl From<&IterateRecord> for TraceRow {
    fn from(r: &IterateRecord) -> Self {
        Self {
            k: r.k,
            dist: r.dist_to_ref,
            log2_dist: r.dist_to_ref.log2(),
            alpha: r.alpha,
            pi: r.pi,
            merit_noisy: r.merit_noisy,
            psi: r.psi,
            backtracks: r.backtracks,
        }
    }
}

/// Writes `k,dist,log2_dist,alpha,pi,merit_noisy,psi,backtracks`, one row
/// per iteration.
pub fn write_trace_csv<W: Write>(out: W, trace: &[IterateRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in trace {
        w.serialize(TraceRow::from(r))?;
    }
    if trace.is_empty() {
        w.write_record(["k", "dist", "log2_dist", "alpha", "pi", "merit_noisy", "psi", "backtracks"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn trace_file_name(problem: ProblemName, eps1: f64, eps2: f64, seed: u64) -> String {
    format!("trace_{problem}_eps1-{eps1:e}_eps2-{eps2:e}_seed-{seed}.csv")
}

/// Runs every `(problem, eps, seed)` of the plan with relaxation enabled for
/// `k_max[0]` iterations and writes one CSV per run into `out_dir`.
pub fn run_trace_experiment(plan: &ExperimentPlan, base: &SolverConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    plan.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut specs = Vec::new();
    for &problem in &plan.problems {
        for &(eps1, eps2) in &plan.eps_levels {
            for &seed in &plan.seeds {
                specs.push(RunSpec {
                    problem,
                    eps1,
                    eps2,
                    seed,
                    relaxation: true,
                    est_multiplier: 1.0,
                    max_iters: plan.k_max[0],
                    stop_test: false,
                });
            }
        }
    }
    let reports = run_all(&specs, base)?;
    let mut paths = Vec::with_capacity(specs.len());
    for (spec, report) in specs.iter().zip(&reports) {
        let path = out_dir.join(trace_file_name(spec.problem, spec.eps1, spec.eps2, spec.seed));
        write_trace_csv(BufWriter::new(File::create(&path)?), &report.trace)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Median `min_dist` over seeds for one table cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMedian {
    pub problem: ProblemName,
    pub eps1: f64,
    pub eps2: f64,
    pub relaxation: bool,
    pub est_multiplier: f64,
    pub k_max: usize,
    pub runs: usize,
    pub median_min_dist: f64,
    pub ls_failures: usize,
    pub opt_terminations: usize,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

/// Groups rows that differ only in seed, preserving first-seen order.
pub fn cell_medians(rows: &[RunSummary]) -> Vec<CellMedian> {
    let key = |r: &RunSummary| (r.problem, r.eps1.to_bits(), r.eps2.to_bits(), r.relaxation, r.est_multiplier.to_bits(), r.k_max);
    let mut groups: Vec<(_, Vec<&RunSummary>)> = Vec::new();
    for r in rows {
        match groups.iter_mut().find(|(k, _)| *k == key(r)) {
            Some((_, members)) => members.push(r),
            None => groups.push((key(r), vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|(_, members)| {
            let first = members[0];
            let mut dists: Vec<f64> = members.iter().map(|r| r.min_dist).collect();
            CellMedian {
                problem: first.problem,
                eps1: first.eps1,
                eps2: first.eps2,
                relaxation: first.relaxation,
                est_multiplier: first.est_multiplier,
                k_max: first.k_max,
                runs: members.len(),
                median_min_dist: median(&mut dists),
                ls_failures: members.iter().filter(|r| r.termination_kind == TerminationKind::Ls).count(),
                opt_terminations: members.iter().filter(|r| r.termination_kind == TerminationKind::Opt).count(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableDocument {
    pub table: String,
    pub runs: Vec<RunSummary>,
    pub medians: Vec<CellMedian>,
}

impl TableDocument {
    pub fn new(table: impl Into<String>, runs: Vec<RunSummary>) -> Self {
        let medians = cell_medians(&runs);
        Self {
            table: table.into(),
            runs,
            medians,
        }
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }
}

/// Plain-text rendering: one line per run, then the per-cell medians.
pub fn render_text(rows: &[RunSummary]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<5} {:>8} {:>6} {:>5} {:>8} {:>6} {:>12} {:>6}  {:<5} {:>10}",
        "prob", "eps", "seed", "relax", "est×", "k_max", "min_dist", "iters", "end", "pi"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<5} {:>8.0e} {:>6} {:>5} {:>8.0e} {:>6} {:>12.4e} {:>6}  {:<5} {:>10.4}",
            r.problem.as_str(),
            r.eps1,
            r.seed,
            if r.relaxation { "on" } else { "off" },
            r.est_multiplier,
            r.k_max,
            r.min_dist,
            r.iters_run,
            r.termination_kind.label(),
            r.final_pi,
        );
    }
    let _ = writeln!(s, "\nmedians over seeds");
    for c in cell_medians(rows) {
        let _ = writeln!(
            s,
            "{:<5} {:>8.0e} {:>5} {:>8.0e} {:>6} {:>12.4e}  runs={} ls={} opt={}",
            c.problem.as_str(),
            c.eps1,
            if c.relaxation { "on" } else { "off" },
            c.est_multiplier,
            c.k_max,
            c.median_min_dist,
            c.runs,
            c.ls_failures,
            c.opt_terminations,
        );
    }
    s
}

/// Distance helper for callers holding a plain slice.
pub fn distance(x: &[f64], reference: &DVector<f64>) -> f64 {
    (DVector::from_column_slice(x) - reference).norm()
}
