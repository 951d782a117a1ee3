//! Piecewise deterministic processes given by their local characteristics.
//!
//! Between jumps the continuous part `y` follows the mode's vector field,
//! integrated with fixed-step RK4. The next jump time is found by integrating
//! the hazard `Λ(t) = ∫ λ(y(s), ν) ds` alongside the flow until it crosses a
//! unit-exponential draw; the crossing is localized by bisection within the
//! last step. The post-jump state is drawn from the transition sampler.

use thiserror::Error;

use crate::ensemble::{run_ensemble, GuardFlags, ProbeEnsemble, ProbeRecorder};
use crate::rng::{unit_exponential, SimRng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PdpError {
    #[error("non-finite {what} at t={t}")]
    NonFinite { what: &'static str, t: f64 },
    #[error("negative jump rate {rate} at y={y:?}")]
    NegativeRate { rate: f64, y: Vec<f64> },
    #[error("time span must be nonnegative, got {0}")]
    BadSpan(f64),
    #[error("exponential draw must be positive, got {0}")]
    BadDraw(f64),
    #[error("{0}")]
    Model(String),
    #[error("{0} is not available for this specification")]
    Unsupported(&'static str),
}

/// A real function of `(y, mode)`.
pub type StateFn<'a> = dyn Fn(&[f64], &[i64]) -> f64 + 'a;

/// Local characteristics `(F, λ, Q)` of a PDP with state `(y, mode)`.
pub trait PdpSpec: Send + Sync {
    /// Dimension of the continuous component `y`.
    fn dim(&self) -> usize;

    /// Column names of `y` followed by those of the mode vector.
    fn column_names(&self) -> (Vec<String>, Vec<String>);

    fn field(&self, mode: &[i64], y: &[f64], out: &mut [f64]) -> Result<(), PdpError>;

    fn jump_rate(&self, mode: &[i64], y: &[f64]) -> Result<f64, PdpError>;

    /// Samples the post-jump state from `Q(·; (y, mode))`.
    fn transition(&self, mode: &[i64], y: &[f64], rng: &mut SimRng) -> Result<(Vec<f64>, Vec<i64>), PdpError>;

    /// `λ(x) ∫ (f(z) - f(x)) Q(dz; x)`, the jump part of the generator.
    fn jump_generator(&self, _mode: &[i64], _y: &[f64], _f: &dyn Fn(&[f64], &[i64]) -> f64) -> Result<f64, PdpError> {
        Err(PdpError::Unsupported("jump generator"))
    }

    /// Jump part of the generator for several functions at once.
    fn jump_generator_many(&self, mode: &[i64], y: &[f64], fs: &[&StateFn], out: &mut [f64]) -> Result<(), PdpError> {
        for (o, f) in out.iter_mut().zip(fs) {
            *o = self.jump_generator(mode, y, *f)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowConfig {
    /// RK4 step cap.
    pub dt_max: f64,
    /// Jump-time localization tolerance.
    pub hazard_bisect_tol: f64,
    pub max_jumps: u64,
    pub max_radius: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            dt_max: 1e-3,
            hazard_bisect_tol: 1e-10,
            max_jumps: 10_000_000,
            max_radius: 1e9,
        }
    }
}

/// Classical RK4 step of size `h` for `dz/dt = f(z)`.
pub(crate) fn rk4_step<F>(f: &mut F, z: &[f64], h: f64, out: &mut [f64]) -> Result<(), PdpError>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<(), PdpError>,
{
    let n = z.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    f(z, &mut k1)?;
    for i in 0..n {
        tmp[i] = z[i] + 0.5 * h * k1[i];
    }
    f(&tmp, &mut k2)?;
    for i in 0..n {
        tmp[i] = z[i] + 0.5 * h * k2[i];
    }
    f(&tmp, &mut k3)?;
    for i in 0..n {
        tmp[i] = z[i] + h * k3[i];
    }
    f(&tmp, &mut k4)?;
    for i in 0..n {
        out[i] = z[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(())
}

/// Next step size towards `stop`; the last step lands exactly on `stop`.
fn step_size(t: f64, stop: f64, dt_max: f64) -> f64 {
    let remaining = stop - t;
    if remaining <= dt_max * (1.0 + 1e-9) {
        remaining
    } else {
        dt_max
    }
}

fn check_finite(v: &[f64], what: &'static str, t: f64) -> Result<(), PdpError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(PdpError::NonFinite { what, t })
    }
}

/// Flow endpoint plus the RK knots `(t, y)`, starting with `(0, y0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowResult {
    pub y: Vec<f64>,
    pub knots: Vec<(f64, Vec<f64>)>,
    pub truncated: bool,
}

/// Integrates `dy/dt = field(y)` over `[0, t_span]` with fixed-step RK4.
pub fn integrate_flow<F>(field: F, y0: &[f64], t_span: f64, config: &FlowConfig) -> Result<FlowResult, PdpError>
where
    F: Fn(&[f64], &mut [f64]) -> Result<(), PdpError>,
{
    if !(t_span >= 0.0) {
        return Err(PdpError::BadSpan(t_span));
    }
    let mut f = |z: &[f64], out: &mut [f64]| {
        field(z, out)?;
        check_finite(out, "vector field", f64::NAN)
    };
    let mut y = y0.to_vec();
    let mut next = y.clone();
    let mut knots = vec![(0.0, y.clone())];
    let mut t = 0.0;
    while t < t_span {
        let h = step_size(t, t_span, config.dt_max);
        rk4_step(&mut f, &y, h, &mut next)?;
        t = if h == t_span - t { t_span } else { t + h };
        std::mem::swap(&mut y, &mut next);
        check_finite(&y, "flow state", t)?;
        knots.push((t, y.clone()));
        if y.iter().any(|v| v.abs() > config.max_radius) {
            return Ok(FlowResult {
                y,
                knots,
                truncated: true,
            });
        }
    }
    Ok(FlowResult {
        y,
        knots,
        truncated: false,
    })
}

/// Outcome of hazard integration from a fixed starting point.
#[derive(Debug, Clone, PartialEq)]
pub enum JumpSample {
    Jump { t: f64, y: Vec<f64> },
    NoJump { y: Vec<f64>, hazard: f64 },
}

/// Integrates `(dy/dt = F(y), dΛ/dt = λ(y))` from `(y0, 0)` until `Λ` reaches `target`
/// or `t_max` elapses. Calls `on_step(t, y)` after every full step.
pub(crate) fn hazard_crossing<F, L, K>(
    mut field: F,
    mut rate: L,
    y0: &[f64],
    target: f64,
    t_max: f64,
    config: &FlowConfig,
    mut on_step: K,
) -> Result<JumpSample, PdpError>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<(), PdpError>,
    L: FnMut(&[f64]) -> Result<f64, PdpError>,
    K: FnMut(f64, &[f64]) -> Result<bool, PdpError>,
{
    let n = y0.len();
    let mut aug = |z: &[f64], out: &mut [f64]| -> Result<(), PdpError> {
        field(&z[..n], &mut out[..n])?;
        check_finite(&out[..n], "vector field", f64::NAN)?;
        let lam = rate(&z[..n])?;
        if lam < 0.0 || lam.is_nan() {
            return Err(PdpError::NegativeRate {
                rate: lam,
                y: z[..n].to_vec(),
            });
        }
        out[n] = lam;
        Ok(())
    };
    let mut z = y0.to_vec();
    z.push(0.0);
    let mut next = z.clone();
    let mut t = 0.0;
    while t < t_max {
        let h = step_size(t, t_max, config.dt_max);
        rk4_step(&mut aug, &z, h, &mut next)?;
        check_finite(&next, "flow state", t + h)?;
        if next[n] >= target {
            // Bisection on the step size from the start of this step.
            let (mut lo, mut hi) = (0.0, h);
            let mut probe = next.clone();
            while hi - lo > config.hazard_bisect_tol {
                let mid = 0.5 * (lo + hi);
                rk4_step(&mut aug, &z, mid, &mut probe)?;
                if probe[n] >= target {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let s = 0.5 * (lo + hi);
            rk4_step(&mut aug, &z, s, &mut probe)?;
            probe.truncate(n);
            return Ok(JumpSample::Jump { t: t + s, y: probe });
        }
        t = if h == t_max - t { t_max } else { t + h };
        std::mem::swap(&mut z, &mut next);
        if !on_step(t, &z[..n])? {
            break;
        }
    }
    let hazard = z[n];
    z.truncate(n);
    Ok(JumpSample::NoJump { y: z, hazard })
}

/// Time of the first jump from `(y, mode)` given a unit-exponential realization.
pub fn sample_jump_time<S: PdpSpec + ?Sized>(
    spec: &S,
    y: &[f64],
    mode: &[i64],
    exp_draw: f64,
    t_max: f64,
    config: &FlowConfig,
) -> Result<JumpSample, PdpError> {
    if !(exp_draw > 0.0) {
        return Err(PdpError::BadDraw(exp_draw));
    }
    if !(t_max >= 0.0) {
        return Err(PdpError::BadSpan(t_max));
    }
    hazard_crossing(
        |y, out| spec.field(mode, y, out),
        |y| spec.jump_rate(mode, y),
        y,
        exp_draw,
        t_max,
        config,
        |_, _| Ok(true),
    )
}

/// Callbacks along a PDP path.
pub trait PdpObserver {
    /// A flow knot; the state holds at `t`.
    fn knot(&mut self, t: f64, mode: &[i64], y: &[f64]);
    /// A jump at `t` from the left limit `pre` to `post`.
    fn jump(&mut self, t: f64, pre: (&[f64], &[i64]), post: (&[f64], &[i64]));
    fn end(&mut self, _t: f64, _mode: &[i64], _y: &[f64]) {}
}

/// Simulates one path on `[0, t_end]`. Every time in `stops` (sorted) is hit
/// exactly by a knot; this does not change the law of the path.
pub fn run_pdp<S: PdpSpec + ?Sized, O: PdpObserver>(
    spec: &S,
    y0: &[f64],
    mode0: &[i64],
    t_end: f64,
    rng: &mut SimRng,
    config: &FlowConfig,
    stops: &[f64],
    obs: &mut O,
) -> Result<(GuardFlags, u64, Vec<f64>, Vec<i64>), PdpError> {
    if !(t_end > 0.0) {
        return Err(PdpError::BadSpan(t_end));
    }
    let mut y = y0.to_vec();
    let mut mode = mode0.to_vec();
    let mut t = 0.0;
    let mut jumps = 0u64;
    let mut flags = GuardFlags::default();
    obs.knot(t, &mode, &y);

    let mut remaining = unit_exponential(rng);
    let mut stop_ix = stops.partition_point(|&s| s <= 0.0);
    'outer: while t < t_end {
        let horizon = match stops.get(stop_ix) {
            Some(&s) if s < t_end => s,
            _ => t_end,
        };
        let t0 = t;
        let mut outside = false;
        let sample = hazard_crossing(
            |y, out| spec.field(&mode, y, out),
            |y| spec.jump_rate(&mode, y),
            &y,
            remaining,
            horizon - t0,
            config,
            |s, z| {
                obs.knot(t0 + s, &mode, z);
                if z.iter().any(|v| v.abs() > config.max_radius) {
                    outside = true;
                    return Ok(false);
                }
                Ok(true)
            },
        )?;
        match sample {
            JumpSample::NoJump { y: y_end, hazard } => {
                y = y_end;
                if outside {
                    flags.truncated = true;
                    break 'outer;
                }
                t = horizon;
                remaining -= hazard;
                if horizon < t_end {
                    stop_ix += 1;
                }
            }
            JumpSample::Jump { t: s, y: pre } => {
                t = t0 + s;
                let (post_y, post_mode) = spec.transition(&mode, &pre, rng)?;
                obs.jump(t, (&pre, &mode), (&post_y, &post_mode));
                y = post_y;
                mode = post_mode;
                jumps += 1;
                remaining = unit_exponential(rng);
                if y.iter().any(|v| v.abs() > config.max_radius) {
                    flags.truncated = true;
                    break 'outer;
                }
                if jumps >= config.max_jumps {
                    flags.jump_cap_hit = true;
                    break 'outer;
                }
            }
        }
    }
    obs.end(t, &mode, &y);
    Ok((flags, jumps, y, mode))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub mode: Vec<i64>,
    pub knots: Vec<(f64, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JumpRecord {
    pub t: f64,
    pub pre: (Vec<f64>, Vec<i64>),
    pub post: (Vec<f64>, Vec<i64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdpTrajectory {
    pub segments: Vec<Segment>,
    pub jumps: Vec<JumpRecord>,
    pub t_end: f64,
    pub flags: GuardFlags,
}

impl PdpTrajectory {
    pub fn final_state(&self) -> (&[f64], &[i64]) {
        let seg = self.segments.last().expect("at least one segment");
        (&seg.knots.last().expect("knot").1, &seg.mode)
    }

    /// PDP trajectory CSV: `t,event,mode,<y...>`; the mode vector is `:`-joined.
    pub fn to_csv(&self, y_names: &[String]) -> String {
        let mut out = format!("t,event,mode,{}\n", y_names.join(","));
        let row = |out: &mut String, t: f64, event: &str, mode: &[i64], y: &[f64]| {
            let mode: Vec<String> = mode.iter().map(|m| m.to_string()).collect();
            out.push_str(&format!("{t},{event},{}", mode.join(":")));
            for v in y {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        };
        for (i, seg) in self.segments.iter().enumerate() {
            let last = seg.knots.len() - 1;
            for (k, (t, y)) in seg.knots.iter().enumerate() {
                if k == last && i < self.jumps.len() {
                    let j = &self.jumps[i];
                    row(&mut out, *t, "jump_pre", &j.pre.1, &j.pre.0);
                    row(&mut out, *t, "jump_post", &j.post.1, &j.post.0);
                } else if k > 0 || i == 0 {
                    row(&mut out, *t, "flow_knot", &seg.mode, y);
                }
            }
        }
        out
    }
}

struct TrajectoryBuilder {
    segments: Vec<Segment>,
    jumps: Vec<JumpRecord>,
    end: f64,
}

impl PdpObserver for TrajectoryBuilder {
    fn knot(&mut self, t: f64, mode: &[i64], y: &[f64]) {
        match self.segments.last_mut() {
            Some(seg) => {
                seg.knots.push((t, y.to_vec()));
                seg.end = t;
            }
            None => self.segments.push(Segment {
                start: t,
                end: t,
                mode: mode.to_vec(),
                knots: vec![(t, y.to_vec())],
            }),
        }
    }

    fn jump(&mut self, t: f64, pre: (&[f64], &[i64]), post: (&[f64], &[i64])) {
        if let Some(seg) = self.segments.last_mut() {
            seg.knots.push((t, pre.0.to_vec()));
            seg.end = t;
        }
        self.jumps.push(JumpRecord {
            t,
            pre: (pre.0.to_vec(), pre.1.to_vec()),
            post: (post.0.to_vec(), post.1.to_vec()),
        });
        self.segments.push(Segment {
            start: t,
            end: t,
            mode: post.1.to_vec(),
            knots: vec![(t, post.0.to_vec())],
        });
    }

    fn end(&mut self, t: f64, _mode: &[i64], _y: &[f64]) {
        self.end = t;
    }
}

/// Simulates and records one full PDP path.
pub fn simulate_pdp<S: PdpSpec + ?Sized>(
    spec: &S,
    y0: &[f64],
    mode0: &[i64],
    t_end: f64,
    rng: &mut SimRng,
    config: &FlowConfig,
) -> Result<PdpTrajectory, PdpError> {
    let mut b = TrajectoryBuilder {
        segments: Vec::new(),
        jumps: Vec::new(),
        end: t_end,
    };
    let (flags, _, _, _) = run_pdp(spec, y0, mode0, t_end, rng, config, &[], &mut b)?;
    Ok(PdpTrajectory {
        segments: b.segments,
        jumps: b.jumps,
        t_end: b.end,
        flags,
    })
}

struct ProbeObserver<'a> {
    rec: &'a mut ProbeRecorder,
    row: Vec<f64>,
}

impl ProbeObserver<'_> {
    fn fill(&mut self, y: &[f64], mode: &[i64]) {
        self.row.clear();
        self.row.extend_from_slice(y);
        self.row.extend(mode.iter().map(|&m| m as f64));
    }
}

impl PdpObserver for ProbeObserver<'_> {
    fn knot(&mut self, t: f64, mode: &[i64], y: &[f64]) {
        self.fill(y, mode);
        self.rec.at(t, &self.row);
    }

    fn jump(&mut self, t: f64, pre: (&[f64], &[i64]), post: (&[f64], &[i64])) {
        self.fill(pre.0, pre.1);
        self.rec.before(t, &self.row);
        self.fill(post.0, post.1);
        self.rec.at(t, &self.row);
    }

    fn end(&mut self, t: f64, mode: &[i64], y: &[f64]) {
        self.fill(y, mode);
        self.rec.at(t, &self.row);
    }
}

/// PDP ensemble sampled at `probes`; columns are `y` then the mode components.
pub fn run_pdp_ensemble<S: PdpSpec + ?Sized>(
    spec: &S,
    y0: &[f64],
    mode0: &[i64],
    probes: &[f64],
    m: usize,
    master_seed: u64,
    workers: usize,
    config: &FlowConfig,
) -> Result<ProbeEnsemble, PdpError> {
    let t_end = probes.iter().copied().fold(0.0, f64::max);
    let (mut columns, modes) = spec.column_names();
    columns.extend(modes);
    let mut initial: Vec<f64> = y0.to_vec();
    initial.extend(mode0.iter().map(|&m| m as f64));
    run_ensemble(columns, probes, m, master_seed, workers, |rng, rec| {
        if t_end <= 0.0 {
            rec.at(0.0, &initial);
            return Ok((GuardFlags::default(), initial.clone()));
        }
        let mut obs = ProbeObserver { rec, row: Vec::new() };
        let (flags, _, _, _) = run_pdp(spec, y0, mode0, t_end, rng, config, probes, &mut obs)?;
        Ok((flags, obs.row))
    })
}

/// A PDP specified by closures; the transition receives a uniform draw on `[0, 1)`.
pub struct ClosureSpec {
    pub dim: usize,
    pub modes: usize,
    #[allow(clippy::type_complexity)]
    pub field: Box<dyn Fn(&[i64], &[f64], &mut [f64]) + Send + Sync>,
    #[allow(clippy::type_complexity)]
    pub rate: Box<dyn Fn(&[i64], &[f64]) -> f64 + Send + Sync>,
    #[allow(clippy::type_complexity)]
    pub transition: Box<dyn Fn(&[i64], &[f64], f64) -> (Vec<f64>, Vec<i64>) + Send + Sync>,
}

impl PdpSpec for ClosureSpec {
    fn dim(&self) -> usize {
        self.dim
    }

    fn column_names(&self) -> (Vec<String>, Vec<String>) {
        (
            (0..self.dim).map(|i| format!("y{i}")).collect(),
            (0..self.modes).map(|i| format!("mode{i}")).collect(),
        )
    }

    fn field(&self, mode: &[i64], y: &[f64], out: &mut [f64]) -> Result<(), PdpError> {
        (self.field)(mode, y, out);
        Ok(())
    }

    fn jump_rate(&self, mode: &[i64], y: &[f64]) -> Result<f64, PdpError> {
        Ok((self.rate)(mode, y))
    }

    fn transition(&self, mode: &[i64], y: &[f64], rng: &mut SimRng) -> Result<(Vec<f64>, Vec<i64>), PdpError> {
        Ok((self.transition)(mode, y, crate::rng::uniform(rng)))
    }

    /// Zero where the rate vanishes; the transition kernel is opaque otherwise.
    fn jump_generator(&self, mode: &[i64], y: &[f64], _f: &dyn Fn(&[f64], &[i64]) -> f64) -> Result<f64, PdpError> {
        if (self.rate)(mode, y) == 0.0 {
            Ok(0.0)
        } else {
            Err(PdpError::Unsupported("jump generator of a closure kernel"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn cfg(dt: f64) -> FlowConfig {
        FlowConfig {
            dt_max: dt,
            ..FlowConfig::default()
        }
    }

    fn linear(a: f64, b: f64) -> impl Fn(&[f64], &mut [f64]) -> Result<(), PdpError> {
        move |y, out| {
            out[0] = a - b * y[0];
            Ok(())
        }
    }

    #[test]
    fn constant_flow() {
        let r = integrate_flow(linear(0.0, 0.0), &[7.0], 3.0, &cfg(1e-3)).unwrap();
        assert_eq!(r.y, vec![7.0]);
        assert_eq!(r.knots.last().unwrap().0, 3.0);
    }

    #[test]
    fn exponential_decay_and_gene1_mode_flow() {
        let r = integrate_flow(linear(0.0, 1.0), &[1.0], 1.0, &cfg(0.01)).unwrap();
        assert!((r.y[0] - (-1.0f64).exp()).abs() < 1e-6);
        let r = integrate_flow(linear(4.0, 1.0), &[0.0], 1.0, &cfg(1e-3)).unwrap();
        assert!((r.y[0] - 4.0 * (1.0 - (-1.0f64).exp())).abs() < 1e-6);
    }

    #[test]
    fn final_step_is_shortened_to_span() {
        let r = integrate_flow(linear(1.0, 0.0), &[0.0], 0.0105, &cfg(0.001)).unwrap();
        assert_eq!(r.knots.len(), 12);
        assert_eq!(r.knots.last().unwrap().0, 0.0105);
        assert!((r.y[0] - 0.0105).abs() < 1e-15);
        let gaps = r.knots.windows(2).all(|w| w[1].0 - w[0].0 <= 0.001 * (1.0 + 1e-9));
        assert!(gaps);
        assert!(integrate_flow(linear(1.0, 0.0), &[0.0], -1.0, &cfg(0.1)).is_err());
    }

    #[test]
    fn non_finite_field_is_an_error() {
        let bad = |_: &[f64], out: &mut [f64]| {
            out[0] = f64::NAN;
            Ok(())
        };
        assert!(matches!(
            integrate_flow(bad, &[0.0], 1.0, &cfg(0.1)),
            Err(PdpError::NonFinite { .. })
        ));
    }

    #[test]
    fn rk4_error_shrinks_fourth_order() {
        let exact = (-1.0f64).exp();
        let coarse = integrate_flow(linear(0.0, 1.0), &[1.0], 1.0, &cfg(0.1)).unwrap().y[0];
        let fine = integrate_flow(linear(0.0, 1.0), &[1.0], 1.0, &cfg(0.05)).unwrap().y[0];
        let ratio = (coarse - exact).abs() / (fine - exact).abs();
        assert!(ratio >= 15.0, "{ratio}");
    }

    fn spec(rate: impl Fn(&[f64]) -> f64 + Send + Sync + 'static, drift: f64) -> ClosureSpec {
        ClosureSpec {
            dim: 1,
            modes: 1,
            field: Box::new(move |_, _, out| out[0] = drift),
            rate: Box::new(move |_, y| rate(y)),
            transition: Box::new(|m, y, _| (y.to_vec(), vec![1 - m[0]])),
        }
    }

    #[test]
    fn constant_hazard_inversion() {
        let s = spec(|_| 3.0, 0.7);
        match sample_jump_time(&s, &[0.0], &[0], 1.5, 10.0, &FlowConfig::default()).unwrap() {
            JumpSample::Jump { t, y } => {
                assert!((t - 0.5).abs() < 1e-10, "{t}");
                assert!((y[0] - 0.35).abs() < 1e-9);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_hazard_never_jumps() {
        let s = spec(|_| 0.0, 1.0);
        match sample_jump_time(&s, &[1.0], &[0], 0.1, 5.0, &FlowConfig::default()).unwrap() {
            JumpSample::NoJump { y, hazard } => {
                assert_eq!(hazard, 0.0);
                assert!((y[0] - 6.0).abs() < 1e-9);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn linear_hazard_along_unit_drift() {
        // λ(y) = y, y(t) = 1 + t: t + t^2/2 = 1.5 at t = 1.
        let s = spec(|y| y[0], 1.0);
        let cfg = FlowConfig {
            hazard_bisect_tol: 1e-8,
            ..FlowConfig::default()
        };
        match sample_jump_time(&s, &[1.0], &[0], 1.5, 10.0, &cfg).unwrap() {
            JumpSample::Jump { t, y } => {
                assert!((t - 1.0).abs() < 1e-8, "{t}");
                assert!((y[0] - 2.0).abs() < 1e-8);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn negative_rate_and_bad_draw() {
        let s = spec(|_| -1.0, 0.0);
        assert!(matches!(
            sample_jump_time(&s, &[0.0], &[0], 1.0, 1.0, &FlowConfig::default()),
            Err(PdpError::NegativeRate { .. })
        ));
        assert!(matches!(
            sample_jump_time(&s, &[0.0], &[0], 0.0, 1.0, &FlowConfig::default()),
            Err(PdpError::BadDraw(_))
        ));
    }

    #[test]
    fn pure_flow_pdp() {
        let s = ClosureSpec {
            dim: 1,
            modes: 0,
            field: Box::new(|_, y, out| out[0] = -y[0]),
            rate: Box::new(|_, _| 0.0),
            transition: Box::new(|m, y, _| (y.to_vec(), m.to_vec())),
        };
        let traj = simulate_pdp(&s, &[1.0], &[], 1.0, &mut stream(1, 0), &FlowConfig::default()).unwrap();
        assert_eq!(traj.segments.len(), 1);
        assert!(traj.jumps.is_empty());
        assert!((traj.final_state().0[0] - (-1.0f64).exp()).abs() < 1e-6);
    }

    fn telegraph() -> ClosureSpec {
        ClosureSpec {
            dim: 1,
            modes: 1,
            field: Box::new(|m, y, out| out[0] = 4.0 * m[0] as f64 - y[0]),
            rate: Box::new(|m, _| if m[0] == 0 { 2.0 } else { 1.0 }),
            transition: Box::new(|m, y, _| (y.to_vec(), vec![1 - m[0]])),
        }
    }

    #[test]
    fn same_seed_same_pdp_path_and_continuity() {
        let s = telegraph();
        let cfg = FlowConfig::default();
        let a = simulate_pdp(&s, &[0.0], &[0], 5.0, &mut stream(4, 4), &cfg).unwrap();
        let b = simulate_pdp(&s, &[0.0], &[0], 5.0, &mut stream(4, 4), &cfg).unwrap();
        assert_eq!(a, b);
        assert!(!a.jumps.is_empty());
        assert_eq!(a.segments.len(), a.jumps.len() + 1);
        for (seg, j) in a.segments.iter().zip(&a.jumps) {
            assert_eq!(seg.knots.last().unwrap().1, j.pre.0);
            assert_eq!(seg.mode, j.pre.1);
            assert!(seg
                .knots
                .windows(2)
                .all(|w| w[1].0 - w[0].0 <= cfg.dt_max * (1.0 + 1e-9)));
        }
        for (seg, j) in a.segments[1..].iter().zip(&a.jumps) {
            assert_eq!(seg.knots[0].1, j.post.0);
            assert_eq!(seg.mode, j.post.1);
        }
        let csv = a.to_csv(&["P".to_string()]);
        assert!(csv.starts_with("t,event,mode,P\n0,flow_knot,0,0\n"));
        assert_eq!(csv.matches("jump_pre").count(), a.jumps.len());
    }

    #[test]
    fn probes_do_not_change_the_law_of_the_endpoint() {
        // Stops split the hazard integration but the endpoint statistics must agree.
        let s = telegraph();
        let cfg = FlowConfig {
            dt_max: 1e-2,
            ..FlowConfig::default()
        };
        let with = run_pdp_ensemble(&s, &[0.0], &[0], &[1.0, 2.0, 3.0], 1, 5, 1, &cfg).unwrap();
        let traj = simulate_pdp(&s, &[0.0], &[0], 3.0, &mut stream(5, 0), &cfg).unwrap();
        // Same draws are consumed in the same order, so the jump modes agree.
        let (_, mode) = traj.final_state();
        assert_eq!(with.samples[2][0][1], mode[0] as f64);
    }

    #[test]
    fn telegraph_occupancy_fraction() {
        // Two-state chain with rates 2 (0->1) and 1 (1->0): long-run time in mode 1 is 2/3.
        // From mode 0 at t = 0, E[time in mode 1 on [0, 10]] / 10 = 2/3 - (2/9)(1 - e^{-30}) / 10.
        let s = telegraph();
        let cfg = FlowConfig {
            dt_max: 1e-2,
            ..FlowConfig::default()
        };
        let m = 2000;
        let fractions: Vec<f64> = (0..m)
            .map(|i| {
                let traj = simulate_pdp(&s, &[0.0], &[0], 10.0, &mut stream(99, i), &cfg).unwrap();
                let busy: f64 = traj
                    .segments
                    .iter()
                    .filter(|seg| seg.mode[0] == 1)
                    .map(|seg| seg.end - seg.start)
                    .sum();
                busy / 10.0
            })
            .collect();
        let mean = fractions.iter().sum::<f64>() / m as f64;
        let var = fractions.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        let se = (var / m as f64).sqrt();
        let expected = 2.0 / 3.0 - (2.0 / 9.0) * (1.0 - (-30.0f64).exp()) / 10.0;
        assert!(
            (mean - expected).abs() < 3.0 * se,
            "mean={mean} expected={expected} se={se}"
        );
    }
}
