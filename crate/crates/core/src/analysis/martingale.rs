//! Martingale residuals `E[f(x_t) - f(x_r) - int_r^t A f(x_s) ds]`.
//!
//! On exact paths the integral is exact, since the state is constant between
//! events. On PDP paths it is the trapezoid rule over the RK knots; the
//! probe times are forced onto knots.

use std::sync::Arc;

use super::{AnalysisError, EmpiricalSample};
use crate::ensemble::parallel_map;
use crate::model::ClassifiedModel;
use crate::pdp::{run_pdp, FlowConfig, PdpError, PdpObserver, PdpSpec, StateFn};
use crate::rng::stream;
use crate::ssa::{run_observed, Engine, JumpObserver, JumpState, Scale, SimGuards};

type ScalarFn = dyn Fn(&[f64], &[i64]) -> f64 + Send + Sync;
type GradFn = dyn Fn(&[f64], &[i64]) -> Vec<f64> + Send + Sync;

/// A bounded test function of (continuous values, discrete values) with its gradient
/// in the continuous values.
#[derive(Clone)]
pub struct TestFunction {
    pub name: String,
    f: Arc<ScalarFn>,
    grad: Arc<GradFn>,
}

impl TestFunction {
    pub fn new(
        name: impl Into<String>,
        f: impl Fn(&[f64], &[i64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&[f64], &[i64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            f: Arc::new(f),
            grad: Arc::new(grad),
        }
    }

    pub fn eval(&self, c: &[f64], d: &[i64]) -> f64 {
        (self.f)(c, d)
    }

    pub fn gradient(&self, c: &[f64], d: &[i64]) -> Vec<f64> {
        (self.grad)(c, d)
    }
}

impl std::fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TestFunction").field("name", &self.name).finish()
    }
}

fn cut(v: f64) -> f64 {
    v * (-v * v / 100.0).exp()
}

fn cut_prime(v: f64) -> f64 {
    (1.0 - v * v / 50.0) * (-v * v / 100.0).exp()
}

/// The standard test set for the given continuous and discrete coordinates:
///
/// * `one`: the constant 1;
/// * `cut_<c>`: `c exp(-c^2 / 100)` for each continuous coordinate;
/// * `is0_<d>`: the indicator of `d = 0` for each discrete coordinate;
/// * `cut_<c>*is0_<d>` for each pair, or `cut_<c>*cut_<c>` without discrete coordinates.
pub fn standard_test_functions(continuous: &[String], discrete: &[String]) -> Vec<TestFunction> {
    let nc = continuous.len();
    let mut out = vec![TestFunction::new("one", |_, _| 1.0, move |_, _| vec![0.0; nc])];
    for (i, c) in continuous.iter().enumerate() {
        out.push(TestFunction::new(
            format!("cut_{c}"),
            move |x, _| cut(x[i]),
            move |x, _| {
                let mut g = vec![0.0; nc];
                g[i] = cut_prime(x[i]);
                g
            },
        ));
    }
    let is0 = |v: i64| if v == 0 { 1.0 } else { 0.0 };
    for (j, d) in discrete.iter().enumerate() {
        out.push(TestFunction::new(
            format!("is0_{d}"),
            move |_, m| is0(m[j]),
            move |_, _| vec![0.0; nc],
        ));
    }
    for (i, c) in continuous.iter().enumerate() {
        if discrete.is_empty() {
            out.push(TestFunction::new(
                format!("cut_{c}*cut_{c}"),
                move |x, _| cut(x[i]).powi(2),
                move |x, _| {
                    let mut g = vec![0.0; nc];
                    g[i] = 2.0 * cut(x[i]) * cut_prime(x[i]);
                    g
                },
            ));
        }
        for (j, d) in discrete.iter().enumerate() {
            out.push(TestFunction::new(
                format!("cut_{c}*is0_{d}"),
                move |x, m| cut(x[i]) * is0(m[j]),
                move |x, m| {
                    let mut g = vec![0.0; nc];
                    g[i] = cut_prime(x[i]) * is0(m[j]);
                    g
                },
            ));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleConfig {
    /// Probe pairs `(r, t)` with `r < t`.
    pub pairs: Vec<(f64, f64)>,
    pub samples: usize,
    pub master_seed: u64,
    pub workers: usize,
    /// Residuals below this pass even at zero standard error (time-discretization allowance).
    pub floor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleRow {
    pub f_name: String,
    pub r: f64,
    pub t: f64,
    pub residual: f64,
    pub se: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleReport {
    pub rows: Vec<MartingaleRow>,
    /// A test function returned a non-finite value on a visited state.
    pub warning: bool,
    /// Runs stopped by a guard.
    pub aborted: usize,
}

impl MartingaleReport {
    /// Martingale CSV: `f_name,r,t,residual,se,pass`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("f_name,r,t,residual,se,pass\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.f_name, row.r, row.t, row.residual, row.se, row.pass
            ));
        }
        out
    }

    pub fn all_pass(&self) -> bool {
        !self.warning && self.rows.iter().all(|r| r.pass)
    }
}

/// Sorted distinct probe times of the pairs.
fn time_points(pairs: &[(f64, f64)]) -> Vec<f64> {
    let mut tau: Vec<f64> = pairs.iter().flat_map(|&(r, t)| [r, t]).collect();
    tau.sort_by(f64::total_cmp);
    tau.dedup();
    tau
}

/// Per-path values `f(x_tau)` and cumulative integrals `int_0^tau A f`, per function.
struct PathRecord {
    values: Vec<Vec<f64>>,
    integrals: Vec<Vec<f64>>,
    warning: bool,
    aborted: bool,
}

/// Shared bookkeeping of both observers.
struct Accumulator<'a> {
    functions: &'a [TestFunction],
    tau: &'a [f64],
    next: usize,
    t_prev: f64,
    af_prev: Vec<f64>,
    integral: Vec<f64>,
    record: PathRecord,
}

impl<'a> Accumulator<'a> {
    fn new(functions: &'a [TestFunction], tau: &'a [f64]) -> Self {
        let nf = functions.len();
        Self {
            functions,
            tau,
            next: 0,
            t_prev: 0.0,
            af_prev: vec![0.0; nf],
            integral: vec![0.0; nf],
            record: PathRecord {
                values: vec![Vec::with_capacity(tau.len()); nf],
                integrals: vec![Vec::with_capacity(tau.len()); nf],
                warning: false,
                aborted: false,
            },
        }
    }

    fn push(&mut self, k: usize, value: f64, integral: f64) {
        if !value.is_finite() || !integral.is_finite() {
            self.record.warning = true;
        }
        self.record.values[k].push(value);
        self.record.integrals[k].push(integral);
    }

    /// Records every pending probe time `tau <= t` (or `< t`) with the state `(c, d)`,
    /// which is constant from `t_prev` with generator values `af_prev`.
    fn record_constant(&mut self, t: f64, inclusive: bool, c: &[f64], d: &[i64]) {
        while let Some(&tau) = self.tau.get(self.next) {
            if tau > t || (!inclusive && tau == t) {
                break;
            }
            for k in 0..self.functions.len() {
                let v = self.functions[k].eval(c, d);
                let i = self.integral[k] + (tau - self.t_prev) * self.af_prev[k];
                self.push(k, v, i);
            }
            self.next += 1;
        }
    }

    fn finish(self) -> PathRecord {
        self.record
    }
}

fn summarize(
    functions: &[TestFunction],
    pairs: &[(f64, f64)],
    tau: &[f64],
    records: Vec<PathRecord>,
    floor: f64,
) -> Result<MartingaleReport, AnalysisError> {
    let index = |v: f64| tau.iter().position(|&x| x == v).expect("time point");
    let warning = records.iter().any(|r| r.warning);
    let aborted = records.iter().filter(|r| r.aborted).count();
    let mut rows = Vec::new();
    for (k, f) in functions.iter().enumerate() {
        for &(r, t) in pairs {
            let (ir, it) = (index(r), index(t));
            let residuals: Vec<f64> = records
                .iter()
                .map(|p| p.values[k][it] - p.values[k][ir] - (p.integrals[k][it] - p.integrals[k][ir]))
                .collect();
            let label = format!("{} ({r}, {t})", f.name);
            let (residual, se) = if residuals.iter().all(|v| v.is_finite()) {
                let s = EmpiricalSample::new(residuals, label)?;
                (s.mean(), s.standard_error())
            } else {
                (f64::NAN, f64::NAN)
            };
            rows.push(MartingaleRow {
                f_name: f.name.clone(),
                r,
                t,
                residual,
                se,
                pass: residual.abs() <= (3.0 * se).max(floor),
            });
        }
    }
    Ok(MartingaleReport { rows, warning, aborted })
}

fn check_pairs(config: &MartingaleConfig) -> Result<(), AnalysisError> {
    if config.samples == 0 {
        return Err(AnalysisError::Empty("martingale ensemble".into()));
    }
    for &(r, t) in &config.pairs {
        if !(r >= 0.0 && t > r) {
            return Err(AnalysisError::NonFinite(format!("probe pair ({r}, {t})")));
        }
    }
    Ok(())
}

struct ExactObserver<'a> {
    acc: Accumulator<'a>,
    classified: &'a ClassifiedModel,
    jumps: &'a [Vec<(usize, f64)>],
    factors: &'a [f64],
    props: Vec<f64>,
    c: Vec<f64>,
    d: Vec<i64>,
    error: Option<AnalysisError>,
}

impl ExactObserver<'_> {
    fn split(&mut self, x: &[f64]) {
        self.c.clear();
        self.c.extend(self.classified.continuous.iter().map(|&s| x[s]));
        self.d.clear();
        self.d.extend(self.classified.discrete.iter().map(|&s| x[s] as i64));
    }

    /// Pre-limit generator `sum_r a_r(x) (f(x + Delta_r) - f(x))` for every test function.
    fn generator(&mut self, x: &[f64]) {
        self.split(x);
        if let Err(e) = self.classified.propensities_into(self.factors, x, &mut self.props) {
            self.error.get_or_insert(AnalysisError::Ssa(e.into()));
            return;
        }
        let nf = self.acc.functions.len();
        let base: Vec<f64> = (0..nf).map(|k| self.acc.functions[k].eval(&self.c, &self.d)).collect();
        let mut af = vec![0.0; nf];
        let (mut c2, mut d2) = (self.c.clone(), self.d.clone());
        let cont = &self.classified.continuous;
        let disc = &self.classified.discrete;
        for (r, &a) in self.props.iter().enumerate() {
            if a <= 0.0 {
                continue;
            }
            c2.copy_from_slice(&self.c);
            d2.copy_from_slice(&self.d);
            for &(s, delta) in &self.jumps[r] {
                if let Some(i) = cont.iter().position(|&q| q == s) {
                    c2[i] += delta;
                } else if let Some(j) = disc.iter().position(|&q| q == s) {
                    d2[j] += delta as i64;
                }
            }
            for k in 0..nf {
                af[k] += a * (self.acc.functions[k].eval(&c2, &d2) - base[k]);
            }
        }
        self.acc.af_prev = af;
    }
}

impl JumpObserver for ExactObserver<'_> {
    fn start(&mut self, t: f64, _counts: &[i64], x: &[f64]) {
        self.acc.t_prev = t;
        self.generator(x);
        let (c, d) = (self.c.clone(), self.d.clone());
        self.acc.record_constant(t, true, &c, &d);
    }

    fn event(&mut self, t: f64, _reaction: usize, _counts: &[i64], x: &[f64]) {
        let (c, d) = (self.c.clone(), self.d.clone());
        self.acc.record_constant(t, false, &c, &d);
        for k in 0..self.acc.integral.len() {
            self.acc.integral[k] += (t - self.acc.t_prev) * self.acc.af_prev[k];
        }
        self.acc.t_prev = t;
        self.generator(x);
    }

    fn end(&mut self, t: f64, _counts: &[i64], _x: &[f64]) {
        let (c, d) = (self.c.clone(), self.d.clone());
        let last = self.acc.tau.last().copied().unwrap_or(t);
        self.acc.record_constant(t.max(last), true, &c, &d);
    }
}

/// Martingale residuals of the exact pre-limit generator on exact paths.
pub fn martingale_ssa(
    engine: Engine,
    classified: &ClassifiedModel,
    scale: Scale,
    functions: &[TestFunction],
    config: &MartingaleConfig,
    guards: &SimGuards,
) -> Result<MartingaleReport, AnalysisError> {
    check_pairs(config)?;
    let tau = time_points(&config.pairs);
    let t_end = *tau.last().expect("pairs");
    let x0 = JumpState::initial(classified, scale.n);
    let factors = classified
        .order_factors(scale.n as f64, scale.eps)
        .map_err(|e| AnalysisError::Ssa(e.into()))?;
    let jumps: Vec<Vec<(usize, f64)>> = (0..classified.model.reactions.len())
        .map(|r| classified.scaled_jump(r, scale.n))
        .collect();
    let records = parallel_map(config.samples, config.workers, |i| {
        let mut rng = stream(config.master_seed, i as u64);
        let mut obs = ExactObserver {
            acc: Accumulator::new(functions, &tau),
            classified,
            jumps: &jumps,
            factors: &factors,
            props: vec![0.0; classified.model.reactions.len()],
            c: Vec::new(),
            d: Vec::new(),
            error: None,
        };
        let summary = run_observed(engine, classified, scale, &x0, t_end, &mut rng, guards, &mut obs)?;
        if let Some(e) = obs.error {
            return Err(e);
        }
        let mut record = obs.acc.finish();
        record.aborted = summary.flags.aborted();
        Ok::<_, AnalysisError>(record)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    summarize(functions, &config.pairs, &tau, records, config.floor)
}

struct PdpPathObserver<'a, S: PdpSpec + ?Sized> {
    acc: Accumulator<'a>,
    spec: &'a S,
    field: Vec<f64>,
    y: Vec<f64>,
    mode: Vec<i64>,
    error: Option<PdpError>,
}

impl<S: PdpSpec + ?Sized> PdpPathObserver<'_, S> {
    /// Full generator `F . grad f + jump part` for every test function.
    fn generator(&mut self, mode: &[i64], y: &[f64]) -> Vec<f64> {
        let nf = self.acc.functions.len();
        let mut af = vec![0.0; nf];
        if let Err(e) = self.spec.field(mode, y, &mut self.field) {
            self.error.get_or_insert(e);
            return af;
        }
        let evals: Vec<Box<StateFn<'_>>> = self
            .acc
            .functions
            .iter()
            .map(|f| Box::new(move |c: &[f64], d: &[i64]| f.eval(c, d)) as Box<StateFn<'_>>)
            .collect();
        let refs: Vec<&StateFn> = evals.iter().map(|b| b.as_ref()).collect();
        if let Err(e) = self.spec.jump_generator_many(mode, y, &refs, &mut af) {
            self.error.get_or_insert(e);
            return af;
        }
        for (k, f) in self.acc.functions.iter().enumerate() {
            let grad = f.gradient(y, mode);
            af[k] += grad.iter().zip(&self.field).map(|(g, v)| g * v).sum::<f64>();
        }
        af
    }

    fn advance(&mut self, t: f64, af: &[f64]) {
        let h = t - self.acc.t_prev;
        for ((acc, prev), now) in self.acc.integral.iter_mut().zip(&self.acc.af_prev).zip(af) {
            *acc += 0.5 * h * (prev + now);
        }
        self.acc.t_prev = t;
    }

    fn record_at(&mut self, t: f64) {
        let (y, mode) = (self.y.clone(), self.mode.clone());
        while let Some(&tau) = self.acc.tau.get(self.acc.next) {
            if tau > t {
                break;
            }
            for k in 0..self.acc.functions.len() {
                let v = self.acc.functions[k].eval(&y, &mode);
                let i = self.acc.integral[k];
                self.acc.push(k, v, i);
            }
            self.acc.next += 1;
        }
    }
}

impl<S: PdpSpec + ?Sized> PdpObserver for PdpPathObserver<'_, S> {
    fn knot(&mut self, t: f64, mode: &[i64], y: &[f64]) {
        let af = self.generator(mode, y);
        self.advance(t, &af);
        self.acc.af_prev = af;
        self.y = y.to_vec();
        self.mode = mode.to_vec();
        self.record_at(t);
    }

    fn jump(&mut self, t: f64, pre: (&[f64], &[i64]), post: (&[f64], &[i64])) {
        let af_pre = self.generator(pre.1, pre.0);
        self.advance(t, &af_pre);
        self.acc.af_prev = self.generator(post.1, post.0);
        self.y = post.0.to_vec();
        self.mode = post.1.to_vec();
    }

    fn end(&mut self, _t: f64, mode: &[i64], y: &[f64]) {
        self.y = y.to_vec();
        self.mode = mode.to_vec();
        self.record_at(f64::INFINITY);
    }
}

/// Martingale residuals of a PDP's own generator on its own paths.
pub fn martingale_pdp<S: PdpSpec + ?Sized>(
    spec: &S,
    y0: &[f64],
    mode0: &[i64],
    functions: &[TestFunction],
    config: &MartingaleConfig,
    flow: &FlowConfig,
) -> Result<MartingaleReport, AnalysisError> {
    check_pairs(config)?;
    let tau = time_points(&config.pairs);
    let t_end = *tau.last().expect("pairs");
    let records = parallel_map(config.samples, config.workers, |i| {
        let mut rng = stream(config.master_seed, i as u64);
        let mut obs = PdpPathObserver {
            acc: Accumulator::new(functions, &tau),
            spec,
            field: vec![0.0; spec.dim()],
            y: y0.to_vec(),
            mode: mode0.to_vec(),
            error: None,
        };
        let (flags, _, _, _) = run_pdp(spec, y0, mode0, t_end, &mut rng, flow, &tau, &mut obs)?;
        if let Some(e) = obs.error {
            return Err(AnalysisError::Pdp(e));
        }
        let mut record = obs.acc.finish();
        record.aborted = flags.aborted();
        Ok::<_, AnalysisError>(record)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    summarize(functions, &config.pairs, &tau, records, config.floor)
}
