//! Command-line front end.
//!
//! Exit codes: 0 success, 1 model, usage or runtime error, 2 guard abort,
//! 3 failed `--assert` check.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis::{
    convergence_study, martingale_pdp, martingale_ssa, standard_test_functions, MartingaleConfig, MartingaleReport,
    ProbeLabel, StudyConfig, StudyTable,
};
use crate::limits::{averaged_rates, build_limit, RegimeDConstants};
use crate::model::{classify, parse_model, ClassifiedModel, Regime};
use crate::pdp::{run_pdp_ensemble, simulate_pdp, FlowConfig, PdpSpec};
use crate::rng::stream;
use crate::ssa::{run_ssa_ensemble, simulate_direct, simulate_time_change, Engine, JumpState, Scale, SimGuards};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_GUARD: i32 = 2;
pub const EXIT_ASSERT: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "pdpsim",
    version,
    about = "Exact and limiting PDP simulation of multiscale reaction networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse and classify a model, printing the reaction class table.
    Validate(ModelArgs),
    /// Simulate one trajectory or a probed ensemble.
    Simulate(SimulateArgs),
    /// Compare exact ensembles with the limit PDP across scales.
    Study(StudyArgs),
    /// Print the fast-block invariant law and averaged rates of a regime-C model.
    AvgRates(AvgRatesArgs),
    /// Martingale residuals of the generator on an ensemble.
    Martingale(MartingaleArgs),
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    regime: Regime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EngineArg {
    Exact,
    TimeChange,
    Pdp,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    samples: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// RK4 step cap for PDP flows.
    #[arg(long, default_value_t = 1e-3)]
    dt_max: f64,
    /// Jump cap per exact run.
    #[arg(long)]
    max_jumps: Option<u64>,
    /// Output directory; CSV goes to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value_t = EngineArg::Exact)]
    engine: EngineArg,
    #[arg(long = "N")]
    n: Option<u64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    t_end: f64,
    /// Comma-separated probe times; requests ensemble output.
    #[arg(long, value_delimiter = ',')]
    probes: Option<Vec<f64>>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Args)]
struct StudyArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value_t = EngineArg::Exact)]
    engine: EngineArg,
    #[arg(long, value_delimiter = ',', required = true)]
    scales: Vec<u64>,
    /// One eps per scale, or a single value for all scales.
    #[arg(long, value_delimiter = ',')]
    eps: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', required = true)]
    probes: Vec<f64>,
    /// Fail with exit code 3 unless the last scale's KS is below this value.
    #[arg(long)]
    assert: Option<f64>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Args)]
struct AvgRatesArgs {
    #[arg(long)]
    model: PathBuf,
    /// Continuous state, in declaration order.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x_c: Vec<f64>,
    /// Slow discrete state, in declaration order.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x_d1: Vec<i64>,
}

#[derive(Debug, Args)]
struct MartingaleArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value_t = EngineArg::Exact)]
    engine: EngineArg,
    #[arg(long = "N")]
    n: Option<u64>,
    #[arg(long)]
    eps: Option<f64>,
    /// Comma-separated `r:t` pairs.
    #[arg(long, value_delimiter = ',', value_parser = parse_pair, required = true)]
    pairs: Vec<(f64, f64)>,
    /// Residual allowance at zero standard error.
    #[arg(long, default_value_t = 1e-6)]
    floor: f64,
    /// Fail with exit code 3 unless every row passes.
    #[arg(long)]
    assert: bool,
    #[command(flatten)]
    run: RunArgs,
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (r, t) = s.split_once(':').ok_or_else(|| format!("expected r:t, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    Ok((parse(r)?, parse(t)?))
}

/// A failure carrying its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    msg: String,
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure {
            code: EXIT_ERROR,
            msg: e.to_string(),
        }
    }
}

type CmdResult = Result<i32, Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                stderr.write_all(text.as_bytes())
            } else {
                stdout.write_all(text.as_bytes())
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Validate(a) => cmd_validate(&a, stdout),
        Command::Simulate(a) => cmd_simulate(&a, stdout, stderr),
        Command::Study(a) => cmd_study(&a, stdout, stderr),
        Command::AvgRates(a) => cmd_avg_rates(&a, stdout),
        Command::Martingale(a) => cmd_martingale(&a, stdout, stderr),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(stderr, "error: {}", f.msg);
            f.code
        }
    }
}

fn load(path: &Path, regime: Regime) -> Result<ClassifiedModel, Failure> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let model = parse_model(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(classify(&model, regime)?)
}

fn emit(out: &Option<PathBuf>, file: &str, csv: &str, stdout: &mut dyn Write) -> Result<(), Failure> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
            let path = dir.join(file);
            fs::write(&path, csv).map_err(|e| format!("{}: {e}", path.display()))?;
        }
        None => stdout.write_all(csv.as_bytes())?,
    }
    Ok(())
}

fn guards(run: &RunArgs) -> SimGuards {
    let mut g = SimGuards::default();
    if let Some(m) = run.max_jumps {
        g.max_jumps = m;
    }
    g
}

fn flow(run: &RunArgs) -> Result<FlowConfig, Failure> {
    if !(run.dt_max > 0.0 && run.dt_max.is_finite()) {
        return Err(format!("--dt-max must be positive, got {}", run.dt_max).into());
    }
    Ok(FlowConfig {
        dt_max: run.dt_max,
        ..FlowConfig::default()
    })
}

fn scale_of(cm: &ClassifiedModel, n: Option<u64>, eps: Option<f64>) -> Scale {
    Scale::new(n.unwrap_or(cm.model.default_n), eps.or(cm.model.default_eps))
}

fn ssa_engine(e: EngineArg) -> Option<Engine> {
    match e {
        EngineArg::Exact => Some(Engine::Direct),
        EngineArg::TimeChange => Some(Engine::TimeChange),
        EngineArg::Pdp => None,
    }
}

fn cmd_validate(a: &ModelArgs, stdout: &mut dyn Write) -> CmdResult {
    let cm = load(&a.model, a.regime)?;
    let mut s = format!("model {} regime {}\nreaction,class\n", cm.model.name, cm.regime);
    for (r, reaction) in cm.model.reactions.iter().enumerate() {
        writeln!(s, "{},{}", reaction.name, cm.class(r)).expect("string write");
    }
    if cm.regime == Regime::D {
        let c = RegimeDConstants::probe_default(&cm)?;
        let axes: Vec<String> = c
            .probe_box
            .iter()
            .map(|(n, lo, hi)| format!("{n} in [{lo}, {hi}]"))
            .collect();
        writeln!(s, "probe box: {} ({} grid points per axis)", axes.join(", "), c.grid).expect("string write");
        writeln!(s, "alpha = {} (grid margin {})", c.alpha, c.alpha_margin).expect("string write");
        writeln!(s, "M_lambda = {} (grid margin {})", c.m_lambda, c.m_lambda_margin).expect("string write");
    }
    stdout.write_all(s.as_bytes())?;
    Ok(EXIT_OK)
}

fn cmd_simulate(a: &SimulateArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> CmdResult {
    let cm = load(&a.model.model, a.model.regime)?;
    if !(a.t_end > 0.0 && a.t_end.is_finite()) {
        return Err(format!("--t-end must be positive, got {}", a.t_end).into());
    }
    if a.run.samples == 0 {
        return Err("--samples must be at least 1".into());
    }
    let scale = scale_of(&cm, a.n, a.eps);
    let guards = guards(&a.run);
    let flow = flow(&a.run)?;
    let single = a.run.samples == 1 && a.probes.is_none();
    let (csv, file, aborted, total) = if single {
        let mut rng = stream(a.run.seed, 0);
        match ssa_engine(a.engine) {
            Some(engine) => {
                let x0 = JumpState::initial(&cm, scale.n);
                let traj = match engine {
                    Engine::Direct => simulate_direct(&cm, scale, &x0, a.t_end, &mut rng, &guards)?,
                    Engine::TimeChange => simulate_time_change(&cm, scale, &x0, a.t_end, &mut rng, &guards)?,
                };
                (
                    traj.to_csv(&cm, scale.n),
                    "trajectory.csv",
                    traj.flags.aborted() as usize,
                    1,
                )
            }
            None => {
                let spec = build_limit(&cm)?;
                let (y0, m0) = spec.initial_state();
                let traj = simulate_pdp(&spec, &y0, &m0, a.t_end, &mut rng, &flow)?;
                let (names, _) = spec.column_names();
                (traj.to_csv(&names), "trajectory.csv", traj.flags.aborted() as usize, 1)
            }
        }
    } else {
        let mut probes = a.probes.clone().unwrap_or_else(|| vec![a.t_end]);
        if probes.iter().any(|&p| !(0.0..=a.t_end).contains(&p)) {
            return Err(format!("probes must lie in [0, {}]", a.t_end).into());
        }
        probes.sort_by(f64::total_cmp);
        let ens = match ssa_engine(a.engine) {
            Some(engine) => run_ssa_ensemble(
                engine,
                &cm,
                scale,
                &probes,
                a.run.samples,
                a.run.seed,
                a.run.workers,
                &guards,
            )?,
            None => {
                let spec = build_limit(&cm)?;
                let (y0, m0) = spec.initial_state();
                run_pdp_ensemble(
                    &spec,
                    &y0,
                    &m0,
                    &probes,
                    a.run.samples,
                    a.run.seed,
                    a.run.workers,
                    &flow,
                )?
            }
        };
        let aborted = ens.truncated + ens.jump_cap_hits;
        (ens.to_csv(), "ensemble.csv", aborted, ens.len())
    };
    emit(&a.run.out, file, &csv, stdout)?;
    writeln!(stderr, "runs: {total}, guard aborts: {aborted}")?;
    Ok(if aborted > 0 { EXIT_GUARD } else { EXIT_OK })
}

fn cmd_study(a: &StudyArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> CmdResult {
    let cm = load(&a.model.model, a.model.regime)?;
    let engine =
        ssa_engine(a.engine).ok_or("study compares exact engines against the limit; use exact or time-change")?;
    if a.run.samples == 0 {
        return Err("--samples must be at least 1".into());
    }
    let eps: Vec<Option<f64>> = match &a.eps {
        None => vec![cm.model.default_eps; a.scales.len()],
        Some(v) if v.len() == 1 => vec![Some(v[0]); a.scales.len()],
        Some(v) if v.len() == a.scales.len() => v.iter().map(|&e| Some(e)).collect(),
        Some(v) => {
            return Err(format!("--eps has {} values for {} scales", v.len(), a.scales.len()).into());
        }
    };
    let scales: Vec<Scale> = a.scales.iter().zip(eps).map(|(&n, e)| Scale::new(n, e)).collect();
    let mut probes = a.probes.clone();
    probes.sort_by(f64::total_cmp);
    let config = StudyConfig {
        probes,
        samples: a.run.samples,
        master_seed: a.run.seed,
        workers: a.run.workers,
        engine,
        guards: guards(&a.run),
        flow: flow(&a.run)?,
    };
    let table = convergence_study(&cm, &scales, &config)?;
    emit(&a.run.out, "study.csv", &table.to_csv(), stdout)?;
    let aborted = table.rows.iter().any(|r| r.truncated_frac > 0.0);
    if let Some(threshold) = a.assert {
        let last = scales.last().expect("at least one scale").n;
        let ks = final_ks(&table, last, cm.regime);
        let verdict = if ks < threshold { "PASS" } else { "FAIL" };
        writeln!(
            stderr,
            "assert: KS at N={last} is {ks} (threshold {threshold}): {verdict}"
        )?;
        if ks >= threshold {
            return Ok(EXIT_ASSERT);
        }
    }
    Ok(if aborted { EXIT_GUARD } else { EXIT_OK })
}

/// Largest KS at scale `n`: time-averaged rows under regime D, per-probe rows otherwise.
fn final_ks(table: &StudyTable, n: u64, regime: Regime) -> f64 {
    table
        .rows
        .iter()
        .filter(|r| r.scale_n == n && ((r.probe_t == ProbeLabel::Average) == (regime == Regime::D)))
        .map(|r| r.ks)
        .fold(0.0, f64::max)
}

fn cmd_avg_rates(a: &AvgRatesArgs, stdout: &mut dyn Write) -> CmdResult {
    let cm = load(&a.model, Regime::C)?;
    let avg = averaged_rates(&cm, &a.x_c, &a.x_d1)?;
    let names: Vec<&str> = cm
        .fast_block
        .iter()
        .map(|&s| cm.model.species[s].name.as_str())
        .collect();
    let mut s = String::from("quantity,label,value\n");
    for (state, p) in avg.states.iter().zip(&avg.nu) {
        let label: Vec<String> = names.iter().zip(state).map(|(n, v)| format!("{n}={v}")).collect();
        writeln!(s, "nu,{},{p}", label.join(";")).expect("string write");
    }
    for (reaction, rate) in cm.model.reactions.iter().zip(&avg.rates) {
        if let Some(rate) = rate {
            writeln!(s, "rate,{},{rate}", reaction.name).expect("string write");
        }
    }
    stdout.write_all(s.as_bytes())?;
    Ok(EXIT_OK)
}

fn cmd_martingale(a: &MartingaleArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> CmdResult {
    let cm = load(&a.model.model, a.model.regime)?;
    let config = MartingaleConfig {
        pairs: a.pairs.clone(),
        samples: a.run.samples,
        master_seed: a.run.seed,
        workers: a.run.workers,
        floor: a.floor,
    };
    let report: MartingaleReport = match ssa_engine(a.engine) {
        Some(engine) => {
            let names =
                |idx: &[usize]| -> Vec<String> { idx.iter().map(|&s| cm.model.species[s].name.clone()).collect() };
            let functions = standard_test_functions(&names(&cm.continuous), &names(&cm.discrete));
            martingale_ssa(
                engine,
                &cm,
                scale_of(&cm, a.n, a.eps),
                &functions,
                &config,
                &guards(&a.run),
            )?
        }
        None => {
            let spec = build_limit(&cm)?;
            let (y0, m0) = spec.initial_state();
            let (c, d) = spec.column_names();
            let functions = standard_test_functions(&c, &d);
            martingale_pdp(&spec, &y0, &m0, &functions, &config, &flow(&a.run)?)?
        }
    };
    emit(&a.run.out, "martingale.csv", &report.to_csv(), stdout)?;
    if report.warning {
        writeln!(stderr, "warning: a test function was non-finite on a visited state")?;
    }
    writeln!(stderr, "runs: {}, guard aborts: {}", a.run.samples, report.aborted)?;
    if a.assert && !report.all_pass() {
        return Ok(EXIT_ASSERT);
    }
    Ok(if report.aborted > 0 { EXIT_GUARD } else { EXIT_OK })
}
