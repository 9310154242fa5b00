//! Batch runner behind the `mfgc` binary: one experiment per config file,
//! artifacts written to an output directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};

use crate::calculus::{chain_rule_check, JointFunctional, MeasureMap};
use crate::conditions::{
    check_anti_assumption, check_disp_condition, check_disp_sufficient, check_f_monotone, check_ll_condition,
    check_matrix1, generate_pairs, generate_samples,
};
use crate::config::{ChainMap, CheckName, ConfigError, ExperimentConfig};
use crate::measures::JointEmpiricalMeasure;
use crate::models::{Family, ModelSpec, FIXED_POINT_TOL};
use crate::monotonicity::{direction_battery, evaluate_battery, TestDirection};
use crate::propagation::{propagation_experiment, slice_levels, write_traces_csv, PropagationError, SplitAccess};
use crate::report::{ConditionReport, Verdict};
use crate::solver::SolverError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_FAIL: i32 = 2;
pub const EXIT_HYPOTHESIS: i32 = 3;
pub const EXIT_SOLVER: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "mfgc", version, about = "Mean field games of controls: solver, monotonicity and condition checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate the conditions listed under [check].
    Check(RunArgs),
    /// Solve the equilibrium and export the flow and value field.
    Solve(RunArgs),
    /// Evaluate the configured monotonicity functional on solved slices.
    Mono(RunArgs),
    /// Run the gated propagation experiment.
    Propagate(RunArgs),
    /// Chain-rule table for the map under [chain].
    Chain(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub jobs: Option<usize>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Check(_) => "check",
            Command::Solve(_) => "solve",
            Command::Mono(_) => "mono",
            Command::Propagate(_) => "propagate",
            Command::Chain(_) => "chain",
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::Check(a) | Command::Solve(a) | Command::Mono(a) | Command::Propagate(a) | Command::Chain(a) => a,
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum RunError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("solver: {0}")]
    Solver(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e.to_string())
    }
}

impl From<SolverError> for RunError {
    fn from(e: SolverError) -> Self {
        RunError::Solver(e.to_string())
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Io(e.to_string())
    }
}

impl From<csv::Error> for RunError {
    fn from(e: csv::Error) -> Self {
        RunError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for RunError {
    fn from(e: serde_json::Error) -> Self {
        RunError::Io(e.to_string())
    }
}

impl RunError {
    fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Io(_) => EXIT_CONFIG,
            RunError::Solver(_) => EXIT_SOLVER,
        }
    }
}

/// Version string: package version plus `git describe` when available.
pub fn version() -> String {
    let described = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string());
    match described {
        Some(d) if !d.is_empty() => format!("{}-{}", env!("CARGO_PKG_VERSION"), d),
        _ => env!("CARGO_PKG_VERSION").to_string(),
    }
}

fn write_json(path: &Path, v: &Value) -> Result<(), RunError> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, v)?;
    writeln!(f)?;
    Ok(())
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(&cli.command),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_CONFIG
            } else {
                EXIT_OK
            }
        }
    }
}

pub fn run(cmd: &Command) -> i32 {
    let start = Instant::now();
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let args = cmd.args();
    if let Some(j) = args.jobs {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global();
    }
    let mut cfg = match ExperimentConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("mfgc: {e}");
            return EXIT_CONFIG;
        }
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(cmd.name()));
    if let Err(e) = fs::create_dir_all(&out) {
        eprintln!("mfgc: cannot create {}: {e}", out.display());
        return EXIT_CONFIG;
    }
    let result = match cmd {
        Command::Check(_) => run_check(&cfg, &out),
        Command::Solve(_) => run_solve(&cfg, &out),
        Command::Mono(_) => run_mono(&cfg, &out),
        Command::Propagate(_) => run_propagate(&cfg, &out),
        Command::Chain(_) => run_chain(&cfg, &out),
    };
    let (code, error) = match result {
        Ok(v) => (v.exit_code(), None),
        Err(e) => {
            eprintln!("mfgc: {e}");
            (e.exit_code(), Some(e.to_string()))
        }
    };
    let manifest = json!({
        "tool": "mfgc",
        "version": version(),
        "subcommand": cmd.name(),
        "config_path": args.config,
        "config": cfg,
        "seed": cfg.seed,
        "started_unix": started,
        "wall_seconds": start.elapsed().as_secs_f64(),
        "exit_code": code,
        "error": error,
    });
    if let Err(e) = write_json(&out.join("manifest.json"), &manifest) {
        eprintln!("mfgc: {e}");
        return EXIT_CONFIG;
    }
    println!("{} -> exit {code} ({})", cmd.name(), out.display());
    code
}

fn fixed_point_report(model: &ModelSpec, cfg: &ExperimentConfig) -> ConditionReport {
    let samples = generate_samples(cfg.check.particles, cfg.check.samples, cfg.check.seed);
    let mut worst = 0.0f64;
    for s in &samples {
        let rho = match s.rho() {
            Ok(r) => r,
            Err(e) => return ConditionReport::hypothesis_violation("fixed_point", "sample", e.to_string()),
        };
        let r = model.fixed_point_phi(&rho).and_then(|nu| model.fixed_point_residual(&rho, &nu));
        match r {
            Ok(r) => worst = worst.max(r),
            Err(e) => return ConditionReport::hypothesis_violation("fixed_point", "fixed point", e.to_string()),
        }
    }
    ConditionReport::new("fixed_point", samples.len(), -worst, FIXED_POINT_TOL * 100.0)
        .with_metric("max_residual", worst)
}

fn check_reports(cfg: &ExperimentConfig) -> Result<Vec<ConditionReport>, RunError> {
    let model = cfg.model()?;
    let c = &cfg.check;
    let samples = generate_samples(c.particles, c.samples, c.seed);
    let lambda = cfg.experiment.lambda;
    let mut out = Vec::new();
    for name in &c.conditions {
        out.push(match name {
            CheckName::Envelope => model.verify_envelope_identities(c.samples, c.seed),
            CheckName::FixedPoint => fixed_point_report(&model, cfg),
            CheckName::Ll => check_ll_condition(&model, &samples),
            CheckName::Matrix1 => match model.family() {
                Some(Family::Ll(p)) if p.b1_m1.degree() <= 1 && p.b1_m2.degree() <= 1 => {
                    check_matrix1(p.c1, p.c2, p.c3, p.b1_m1.d1(0.0), p.b1_m2.d1(0.0))
                }
                _ => ConditionReport::hypothesis_violation(
                    "matrix1",
                    "input",
                    "needs the LL family with affine b1".into(),
                ),
            },
            CheckName::Disp => check_disp_condition(&model, lambda, &samples),
            CheckName::DispSufficient => check_disp_sufficient(&model, lambda, c.c0, &samples),
            CheckName::Anti => match &cfg.anti {
                Some(a) => check_anti_assumption(&model, a, &samples),
                None => return Err(RunError::Config("anti check needs an [anti] section".into())),
            },
            CheckName::Fmon => check_f_monotone(&model, &generate_pairs(c.particles, c.samples, c.seed)),
        });
    }
    Ok(out)
}

fn combined(reports: &[ConditionReport]) -> Verdict {
    reports.iter().fold(Verdict::Pass, |v, r| v.combine(r.verdict))
}

fn run_check(cfg: &ExperimentConfig, out: &Path) -> Result<Verdict, RunError> {
    let reports = check_reports(cfg)?;
    let verdict = combined(&reports);
    write_json(&out.join("report.json"), &json!({ "verdict": verdict, "reports": reports }))?;
    Ok(verdict)
}

fn run_solve(cfg: &ExperimentConfig, out: &Path) -> Result<Verdict, RunError> {
    let problem = cfg.problem()?;
    let flow = problem.solve(&cfg.mu0()?)?;
    flow.write_csv(BufWriter::new(File::create(out.join("flow.csv"))?))?;
    let g = flow.grid;
    let every = (g.n_t / 50).max(1);
    let mut wr = csv::Writer::from_writer(BufWriter::new(File::create(out.join("value.csv"))?));
    wr.write_record(["t", "x", "u", "ux", "uxx"])?;
    let xs = g.xs();
    for k in (0..=g.n_t).filter(|k| k % every == 0 || *k == g.n_t) {
        for (i, x) in xs.iter().enumerate() {
            wr.write_record(
                [g.t(k), *x, flow.value.u_level(k)[i], flow.value.ux_level(k)[i], flow.value.uxx_level(k)[i]]
                    .iter()
                    .map(|v| format!("{v:.12e}")),
            )?;
        }
    }
    wr.flush()?;
    let gap = problem.best_response_gap(&flow)?;
    write_json(
        &out.join("report.json"),
        &json!({
            "verdict": Verdict::Pass,
            "picard_iterations": flow.picard_iterations,
            "final_residual": flow.final_residual,
            "residual_history": flow.residual_history,
            "best_response_gap": gap,
            "max_abs_uxx": flow.value.max_abs_uxx(),
        }),
    )?;
    fs::write(
        out.join("plot.gp"),
        "set datafile separator ','\nset key autotitle columnhead\nset xlabel 'x'\nset ylabel 't'\n\
         splot 'value.csv' using 2:1:3 with points pt 7 ps 0.3\npause -1\n",
    )?;
    Ok(Verdict::Pass)
}

fn run_mono(cfg: &ExperimentConfig, out: &Path) -> Result<Verdict, RunError> {
    let problem = cfg.problem()?;
    let mu0 = cfg.mu0()?;
    let flow = problem.solve(&mu0)?;
    let pc = &cfg.experiment.propagation;
    let kind = cfg.propagation_kind()?.mono_kind();
    let slices: Vec<_> = slice_levels(flow.grid.n_t, pc.slices).iter().map(|&k| (flow.grid.t(k), flow.mu(k))).collect();
    let dirs: Vec<Vec<TestDirection>> =
        slices.iter().map(|(_, mu)| direction_battery(mu.points(), pc.directions, pc.direction_seed)).collect();
    let tol = pc.tolerance(&problem, mu0.len());
    let rep = evaluate_battery(&SplitAccess::new(&problem), kind, &slices, &dirs, pc.fd_eps, tol)
        .map_err(|e| RunError::Solver(e.to_string()))?;
    let mut wr = csv::Writer::from_writer(BufWriter::new(File::create(out.join("mono.csv"))?));
    wr.write_record(["t", "direction", "value"])?;
    for s in &rep.samples {
        wr.write_record([format!("{:.12e}", s.t), s.direction.clone(), format!("{:.12e}", s.value)])?;
    }
    wr.flush()?;
    write_json(&out.join("report.json"), &serde_json::to_value(&rep)?)?;
    fs::write(
        out.join("plot.gp"),
        "set datafile separator ','\nset key autotitle columnhead\nset xlabel 't'\nset ylabel 'MON'\n\
         plot 'mono.csv' using 1:3 with points pt 7\npause -1\n",
    )?;
    Ok(rep.verdict)
}

fn run_propagate(cfg: &ExperimentConfig, out: &Path) -> Result<Verdict, RunError> {
    let problem = cfg.problem()?;
    let kind = cfg.propagation_kind()?;
    match propagation_experiment(&problem, &cfg.mu0()?, kind, &cfg.experiment.propagation) {
        Ok(o) => {
            write_traces_csv(&o.traces, BufWriter::new(File::create(out.join("traces.csv"))?))?;
            write_json(&out.join("report.json"), &serde_json::to_value(&o)?)?;
            fs::write(
                out.join("plot.gp"),
                "set datafile separator ','\nset key autotitle columnhead\nset xlabel 't'\n\
                 plot 'traces.csv' using 2:3 with lines title 'I', '' using 2:4 with lines title 'I_bar', \
                 '' using 2:6 with lines title 'Xi'\npause -1\n",
            )?;
            Ok(o.verdict)
        }
        Err(PropagationError::Gate(reports)) => {
            write_json(&out.join("report.json"), &json!({ "verdict": Verdict::HypothesisViolation, "gate": reports }))?;
            Ok(Verdict::HypothesisViolation)
        }
        Err(PropagationError::Solver(e)) => Err(e.into()),
        Err(e) => Err(RunError::Solver(e.to_string())),
    }
}

/// Seeded (rho, rho') pairs with Gaussian states and momenta.
pub fn chain_pairs(n: usize, count: usize, seed: u64) -> Vec<(JointEmpiricalMeasure, JointEmpiricalMeasure)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(rng)).collect() };
    (0..count)
        .map(|_| {
            let (a, b, c, d) = (draw(&mut rng), draw(&mut rng), draw(&mut rng), draw(&mut rng));
            (
                JointEmpiricalMeasure::from_pairs(&a, &b).expect("finite"),
                JointEmpiricalMeasure::from_pairs(&c, &d).expect("finite"),
            )
        })
        .collect()
}

fn run_chain(cfg: &ExperimentConfig, out: &Path) -> Result<Verdict, RunError> {
    let c = &cfg.chain;
    let map = match c.map {
        ChainMap::Model => MeasureMap::from_model(&cfg.model()?),
        ChainMap::MeanShift { c } => MeasureMap::mean_shift(c),
    };
    let u = JointFunctional::polynomial(c.functional);
    let mut wr = csv::Writer::from_writer(BufWriter::new(File::create(out.join("chain.csv"))?));
    wr.write_record(["pair", "fd_value", "chain_value", "abs_error"])?;
    let mut worst = 0.0f64;
    for (k, (r1, r2)) in chain_pairs(c.n, c.pairs, c.seed).iter().enumerate() {
        let rec = chain_rule_check(&u, &map, r1, r2).map_err(|e| RunError::Config(e.to_string()))?;
        worst = worst.max(rec.abs_error);
        wr.write_record([
            k.to_string(),
            format!("{:.12e}", rec.fd_value),
            format!("{:.12e}", rec.chain_value),
            format!("{:.6e}", rec.abs_error),
        ])?;
    }
    wr.flush()?;
    let rep = ConditionReport::new("chain_rule", c.pairs, -worst, c.tolerance).with_metric("max_abs_error", worst);
    write_json(&out.join("report.json"), &json!({ "verdict": rep.verdict, "map": map.label, "report": rep }))?;
    Ok(rep.verdict)
}
