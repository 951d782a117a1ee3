//! Exact simulation of the scaled Markov jump process.
//!
//! Two independent exact kernels are provided:
//!
//! * [`Engine::Direct`]: Gillespie's direct method. The waiting time is
//!   exponential with the total propensity and the firing reaction is drawn
//!   proportionally to its propensity.
//! * [`Engine::TimeChange`]: the random time change representation. Each
//!   reaction owns a unit-rate Poisson clock run at its integrated propensity
//!   (modified next reaction method).
//!
//! Continuous species are stored as molecule counts `X_C`; rate expressions
//! see `x_C = X_C / N`.

use thiserror::Error;

use crate::ensemble::{run_ensemble, GuardFlags, ProbeEnsemble, ProbeRecorder};
use crate::model::{ClassifiedModel, PropensityError};
use crate::rng::{uniform, unit_exponential, SimRng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SsaError {
    #[error(transparent)]
    Propensity(#[from] PropensityError),
    #[error("reaction `{reaction}` at t={t} drives `{species}` negative")]
    NegativeCount { reaction: String, species: String, t: f64 },
    #[error("t_end must be positive, got {0}")]
    BadEndTime(f64),
    #[error("initial state has {got} species, model has {expected}")]
    StateSize { expected: usize, got: usize },
}

/// Scale parameters `N` and (regime D) `eps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scale {
    pub n: u64,
    pub eps: Option<f64>,
}

impl Scale {
    pub fn new(n: u64, eps: Option<f64>) -> Self {
        Self { n, eps }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimGuards {
    pub max_jumps: u64,
    /// Abort once the sup-norm of the scaled state exceeds this.
    pub max_radius: f64,
}

impl Default for SimGuards {
    fn default() -> Self {
        Self {
            max_jumps: 100_000_000,
            max_radius: 1e9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Engine {
    Direct,
    TimeChange,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JumpState {
    pub t: f64,
    pub counts: Vec<i64>,
}

impl JumpState {
    pub fn initial(classified: &ClassifiedModel, n: u64) -> Self {
        Self {
            t: 0.0,
            counts: classified.model.initial_counts(n),
        }
    }

    /// Scaled view `(x_C = X_C / N, X_D)`.
    pub fn scaled(&self, classified: &ClassifiedModel, n: u64) -> Vec<f64> {
        scale_counts(classified, n, &self.counts)
    }
}

fn scale_counts(classified: &ClassifiedModel, n: u64, counts: &[i64]) -> Vec<f64> {
    counts
        .iter()
        .enumerate()
        .map(|(s, &c)| {
            if classified.model.is_continuous(s) {
                c as f64 / n as f64
            } else {
                c as f64
            }
        })
        .collect()
}

/// Callbacks along a simulated path. `x` is the scaled state, valid from `t` on.
pub trait JumpObserver {
    fn start(&mut self, _t: f64, _counts: &[i64], _x: &[f64]) {}
    fn event(&mut self, t: f64, reaction: usize, counts: &[i64], x: &[f64]);
    /// Called once with the end time (the abort time after a guard trip).
    fn end(&mut self, _t: f64, _counts: &[i64], _x: &[f64]) {}
}

impl JumpObserver for () {
    fn event(&mut self, _: f64, _: usize, _: &[i64], _: &[f64]) {}
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub t: f64,
    pub reaction: usize,
    pub counts: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub initial: JumpState,
    pub events: Vec<Event>,
    pub t_end: f64,
    pub flags: GuardFlags,
}

impl Trajectory {
    pub fn jump_count(&self) -> usize {
        self.events.len()
    }

    /// State at time `t` (the last event at or before `t`).
    pub fn counts_at(&self, t: f64) -> &[i64] {
        let k = self.events.partition_point(|e| e.t <= t);
        if k == 0 {
            &self.initial.counts
        } else {
            &self.events[k - 1].counts
        }
    }

    /// Trajectory CSV: `t,reaction,<species...>` with scaled species values.
    pub fn to_csv(&self, classified: &ClassifiedModel, n: u64) -> String {
        let names: Vec<&str> = classified.model.species.iter().map(|s| s.name.as_str()).collect();
        let mut out = format!("t,reaction,{}\n", names.join(","));
        let mut row = |t: f64, reaction: &str, counts: &[i64]| {
            out.push_str(&format!("{t},{reaction}"));
            for v in scale_counts(classified, n, counts) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        };
        row(self.initial.t, "", &self.initial.counts);
        for e in &self.events {
            row(e.t, &classified.model.reactions[e.reaction].name, &e.counts);
        }
        out
    }
}

struct Recorder {
    events: Vec<Event>,
    end: f64,
}

impl JumpObserver for Recorder {
    fn event(&mut self, t: f64, reaction: usize, counts: &[i64], _x: &[f64]) {
        self.events.push(Event {
            t,
            reaction,
            counts: counts.to_vec(),
        });
    }

    fn end(&mut self, t: f64, _counts: &[i64], _x: &[f64]) {
        self.end = t;
    }
}

/// Summary of a run driven through [`run_observed`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub jump_count: u64,
    pub flags: GuardFlags,
    pub final_state: JumpState,
}

struct Kernel<'a> {
    classified: &'a ClassifiedModel,
    n: u64,
    factors: Vec<f64>,
    jumps: Vec<Vec<(usize, i64)>>,
    props: Vec<f64>,
    counts: Vec<i64>,
    x: Vec<f64>,
}

impl<'a> Kernel<'a> {
    fn new(classified: &'a ClassifiedModel, scale: Scale, x0: &JumpState) -> Result<Self, SsaError> {
        let species = classified.model.species.len();
        if x0.counts.len() != species {
            return Err(SsaError::StateSize {
                expected: species,
                got: x0.counts.len(),
            });
        }
        let reactions = classified.model.reactions.len();
        Ok(Self {
            classified,
            n: scale.n,
            factors: classified.order_factors(scale.n as f64, scale.eps)?,
            jumps: (0..reactions).map(|r| classified.count_jump(r, scale.n)).collect(),
            props: vec![0.0; reactions],
            counts: x0.counts.clone(),
            x: scale_counts(classified, scale.n, &x0.counts),
        })
    }

    fn refresh(&mut self) -> Result<f64, SsaError> {
        Ok(self
            .classified
            .propensities_into(&self.factors, &self.x, &mut self.props)?)
    }

    fn fire(&mut self, r: usize, t: f64) -> Result<(), SsaError> {
        for &(s, d) in &self.jumps[r] {
            let c = self.counts[s] + d;
            if c < 0 {
                return Err(SsaError::NegativeCount {
                    reaction: self.classified.model.reactions[r].name.clone(),
                    species: self.classified.model.species[s].name.clone(),
                    t,
                });
            }
            self.counts[s] = c;
            self.x[s] = if self.classified.model.is_continuous(s) {
                c as f64 / self.n as f64
            } else {
                c as f64
            };
        }
        Ok(())
    }

    fn outside(&self, radius: f64) -> bool {
        self.x.iter().any(|v| v.abs() > radius)
    }
}

/// Runs one exact trajectory on `[x0.t, t_end]`, reporting every event to `obs`.
pub fn run_observed<O: JumpObserver>(
    engine: Engine,
    classified: &ClassifiedModel,
    scale: Scale,
    x0: &JumpState,
    t_end: f64,
    rng: &mut SimRng,
    guards: &SimGuards,
    obs: &mut O,
) -> Result<RunSummary, SsaError> {
    if !(t_end > 0.0) {
        return Err(SsaError::BadEndTime(t_end));
    }
    let mut k = Kernel::new(classified, scale, x0)?;
    let mut t = x0.t;
    let mut jumps = 0u64;
    let mut flags = GuardFlags::default();
    obs.start(t, &k.counts, &k.x);

    match engine {
        Engine::Direct => loop {
            let total = k.refresh()?;
            if total <= 0.0 {
                break;
            }
            let dt = unit_exponential(rng) / total;
            if t + dt > t_end {
                break;
            }
            t += dt;
            let u = uniform(rng) * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (r, &a) in k.props.iter().enumerate() {
                if a > 0.0 {
                    acc += a;
                    chosen = Some(r);
                    if u < acc {
                        break;
                    }
                }
            }
            let r = chosen.expect("positive total propensity");
            k.fire(r, t)?;
            jumps += 1;
            obs.event(t, r, &k.counts, &k.x);
            if k.outside(guards.max_radius) {
                flags.truncated = true;
                break;
            }
            if jumps >= guards.max_jumps {
                flags.jump_cap_hit = true;
                break;
            }
        },
        Engine::TimeChange => {
            let reactions = classified.model.reactions.len();
            // internal clock of each reaction and its next firing level
            let mut internal = vec![0.0f64; reactions];
            let mut next: Vec<f64> = (0..reactions).map(|_| unit_exponential(rng)).collect();
            loop {
                k.refresh()?;
                let mut best = f64::INFINITY;
                let mut mu = None;
                for r in 0..reactions {
                    let a = k.props[r];
                    if a > 0.0 {
                        let dt = (next[r] - internal[r]) / a;
                        if dt < best {
                            best = dt;
                            mu = Some(r);
                        }
                    }
                }
                let Some(mu) = mu else { break };
                if t + best > t_end {
                    break;
                }
                t += best;
                for (tr, a) in internal.iter_mut().zip(&k.props) {
                    *tr += a * best;
                }
                internal[mu] = next[mu];
                next[mu] += unit_exponential(rng);
                k.fire(mu, t)?;
                jumps += 1;
                obs.event(t, mu, &k.counts, &k.x);
                if k.outside(guards.max_radius) {
                    flags.truncated = true;
                    break;
                }
                if jumps >= guards.max_jumps {
                    flags.jump_cap_hit = true;
                    break;
                }
            }
        }
    }

    let end = if flags.aborted() { t } else { t_end };
    obs.end(end, &k.counts, &k.x);
    Ok(RunSummary {
        jump_count: jumps,
        flags,
        final_state: JumpState {
            t: end,
            counts: k.counts,
        },
    })
}

fn simulate(
    engine: Engine,
    classified: &ClassifiedModel,
    scale: Scale,
    x0: &JumpState,
    t_end: f64,
    rng: &mut SimRng,
    guards: &SimGuards,
) -> Result<Trajectory, SsaError> {
    let mut rec = Recorder {
        events: Vec::new(),
        end: t_end,
    };
    let summary = run_observed(engine, classified, scale, x0, t_end, rng, guards, &mut rec)?;
    Ok(Trajectory {
        initial: x0.clone(),
        events: rec.events,
        t_end: rec.end,
        flags: summary.flags,
    })
}

/// Gillespie direct method.
pub fn simulate_direct(
    classified: &ClassifiedModel,
    scale: Scale,
    x0: &JumpState,
    t_end: f64,
    rng: &mut SimRng,
    guards: &SimGuards,
) -> Result<Trajectory, SsaError> {
    simulate(Engine::Direct, classified, scale, x0, t_end, rng, guards)
}

/// Random time change (next reaction) method.
pub fn simulate_time_change(
    classified: &ClassifiedModel,
    scale: Scale,
    x0: &JumpState,
    t_end: f64,
    rng: &mut SimRng,
    guards: &SimGuards,
) -> Result<Trajectory, SsaError> {
    simulate(Engine::TimeChange, classified, scale, x0, t_end, rng, guards)
}

struct ProbeObserver<'a> {
    rec: &'a mut ProbeRecorder,
    last: Vec<f64>,
}

impl JumpObserver for ProbeObserver<'_> {
    fn start(&mut self, t: f64, _counts: &[i64], x: &[f64]) {
        self.last.clear();
        self.last.extend_from_slice(x);
        let _ = t;
    }

    fn event(&mut self, t: f64, _reaction: usize, _counts: &[i64], x: &[f64]) {
        self.rec.before(t, &self.last);
        self.last.clear();
        self.last.extend_from_slice(x);
    }

    fn end(&mut self, t: f64, _counts: &[i64], x: &[f64]) {
        self.rec.at(t, x);
    }
}

/// Exact ensemble sampled at `probes`; columns are the scaled species values.
pub fn run_ssa_ensemble(
    engine: Engine,
    classified: &ClassifiedModel,
    scale: Scale,
    probes: &[f64],
    m: usize,
    master_seed: u64,
    workers: usize,
    guards: &SimGuards,
) -> Result<ProbeEnsemble, SsaError> {
    let t_end = probes.iter().copied().fold(0.0, f64::max);
    let x0 = JumpState::initial(classified, scale.n);
    let columns = classified.model.species.iter().map(|s| s.name.clone()).collect();
    if t_end <= 0.0 {
        // Only the initial state is requested.
        let x = x0.scaled(classified, scale.n);
        return run_ensemble(columns, probes, m, master_seed, workers, |_, rec| {
            rec.at(0.0, &x);
            Ok::<_, SsaError>((GuardFlags::default(), x.clone()))
        });
    }
    run_ensemble(columns, probes, m, master_seed, workers, |rng, rec| {
        let mut obs = ProbeObserver { rec, last: Vec::new() };
        let summary = run_observed(engine, classified, scale, &x0, t_end, rng, guards, &mut obs)?;
        Ok((summary.flags, obs.last))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{classify, parse_model, Regime};
    use crate::models;
    use crate::rng::stream;

    fn gene1() -> ClassifiedModel {
        classify(&parse_model(models::GENE1).unwrap(), Regime::A).unwrap()
    }

    fn birth() -> ClassifiedModel {
        let text = "[model]\nname = BIRTH\nN = 100\n[species]\nP continuous 0\n[reactions]\nR | delta: P=+1 | rate = 1 | order = N\n";
        classify(&parse_model(text).unwrap(), Regime::A).unwrap()
    }

    #[test]
    fn zero_rates_give_no_events() {
        let text = "[model]\nname = Z\nN = 10\n[species]\nG discrete 1\nP continuous 0.5\n[reactions]\nR | delta: P=+1 | rate = 0 | order = N\nS | delta: G=-1 | rate = 0*G | order = unit\n";
        let c = classify(&parse_model(text).unwrap(), Regime::A).unwrap();
        let x0 = JumpState::initial(&c, 10);
        for engine in [Engine::Direct, Engine::TimeChange] {
            let traj = simulate(
                engine,
                &c,
                Scale::new(10, None),
                &x0,
                5.0,
                &mut stream(1, 0),
                &SimGuards::default(),
            )
            .unwrap();
            assert_eq!(traj.jump_count(), 0);
            assert_eq!(traj.counts_at(5.0), &[1, 5]);
        }
    }

    #[test]
    fn same_seed_same_trajectory() {
        let c = gene1();
        let x0 = JumpState::initial(&c, 100);
        for engine in [Engine::Direct, Engine::TimeChange] {
            let a = simulate(
                engine,
                &c,
                Scale::new(100, None),
                &x0,
                3.0,
                &mut stream(9, 2),
                &SimGuards::default(),
            )
            .unwrap();
            let b = simulate(
                engine,
                &c,
                Scale::new(100, None),
                &x0,
                3.0,
                &mut stream(9, 2),
                &SimGuards::default(),
            )
            .unwrap();
            assert_eq!(a, b);
            assert!(a.jump_count() > 0);
        }
    }

    #[test]
    fn events_are_ordered_and_bookkeeping_is_exact() {
        let c = gene1();
        let x0 = JumpState::initial(&c, 100);
        for engine in [Engine::Direct, Engine::TimeChange] {
            let traj = simulate(
                engine,
                &c,
                Scale::new(100, None),
                &x0,
                4.0,
                &mut stream(3, 0),
                &SimGuards::default(),
            )
            .unwrap();
            let mut counts = x0.counts.clone();
            let mut last_t = 0.0;
            for e in &traj.events {
                assert!(e.t > last_t);
                last_t = e.t;
                for (s, d) in c.count_jump(e.reaction, 100) {
                    counts[s] += d;
                }
                assert_eq!(counts, e.counts);
            }
            assert!(last_t <= 4.0);
        }
    }

    #[test]
    fn jump_cap_returns_flagged_partial_path() {
        let c = birth();
        let x0 = JumpState::initial(&c, 100);
        let guards = SimGuards {
            max_jumps: 10,
            max_radius: 1e9,
        };
        let traj = simulate_direct(&c, Scale::new(100, None), &x0, 5.0, &mut stream(1, 1), &guards).unwrap();
        assert_eq!(traj.jump_count(), 10);
        assert!(traj.flags.jump_cap_hit);
        assert!(traj.t_end < 5.0);

        let guards = SimGuards {
            max_jumps: 1_000_000,
            max_radius: 0.5,
        };
        let traj = simulate_time_change(&c, Scale::new(100, None), &x0, 5.0, &mut stream(1, 1), &guards).unwrap();
        assert!(traj.flags.truncated);
        assert_eq!(traj.events.last().unwrap().counts, vec![51]);
    }

    #[test]
    fn negative_count_is_an_error() {
        let text = "[model]\nname = D\nN = 10\n[species]\nP continuous 0\n[reactions]\nR | delta: P=-1 | rate = 1 | order = N\n";
        let c = classify(&parse_model(text).unwrap(), Regime::A).unwrap();
        let x0 = JumpState::initial(&c, 10);
        let err = simulate_direct(
            &c,
            Scale::new(10, None),
            &x0,
            1.0,
            &mut stream(0, 0),
            &SimGuards::default(),
        )
        .unwrap_err();
        assert!(matches!(err, SsaError::NegativeCount { .. }));
    }

    #[test]
    fn bad_end_time() {
        let c = birth();
        let x0 = JumpState::initial(&c, 100);
        assert!(matches!(
            simulate_direct(
                &c,
                Scale::new(100, None),
                &x0,
                0.0,
                &mut stream(0, 0),
                &SimGuards::default()
            ),
            Err(SsaError::BadEndTime(_))
        ));
    }

    #[test]
    fn csv_has_initial_row() {
        let c = gene1();
        let x0 = JumpState::initial(&c, 100);
        let traj = simulate_direct(
            &c,
            Scale::new(100, None),
            &x0,
            0.5,
            &mut stream(5, 0),
            &SimGuards::default(),
        )
        .unwrap();
        let csv = traj.to_csv(&c, 100);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("t,reaction,G,P"));
        assert_eq!(lines.next(), Some("0,,0,0"));
        assert_eq!(csv.lines().count(), traj.jump_count() + 2);
    }

    #[test]
    fn ensemble_single_member_matches_single_run() {
        let c = gene1();
        let probes = [0.5, 1.0, 2.0];
        let ens = run_ssa_ensemble(
            Engine::Direct,
            &c,
            Scale::new(100, None),
            &probes,
            1,
            42,
            1,
            &SimGuards::default(),
        )
        .unwrap();
        let x0 = JumpState::initial(&c, 100);
        let traj = simulate_direct(
            &c,
            Scale::new(100, None),
            &x0,
            2.0,
            &mut stream(42, 0),
            &SimGuards::default(),
        )
        .unwrap();
        for (p, &t) in probes.iter().enumerate() {
            let expected = JumpState {
                t,
                counts: traj.counts_at(t).to_vec(),
            }
            .scaled(&c, 100);
            assert_eq!(ens.samples[p][0], expected);
        }
    }

    #[test]
    fn ensemble_is_independent_of_worker_count() {
        let c = gene1();
        let probes = [1.0, 2.0];
        let a = run_ssa_ensemble(
            Engine::TimeChange,
            &c,
            Scale::new(50, None),
            &probes,
            40,
            8,
            1,
            &SimGuards::default(),
        )
        .unwrap();
        let b = run_ssa_ensemble(
            Engine::TimeChange,
            &c,
            Scale::new(50, None),
            &probes,
            40,
            8,
            3,
            &SimGuards::default(),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pure_birth_probe_means() {
        // x_P(t) = Poisson(N t) / N: mean t, variance t / N.
        let c = birth();
        let probes = [1.0, 2.5, 5.0];
        let m = 2000;
        let ens = run_ssa_ensemble(
            Engine::Direct,
            &c,
            Scale::new(100, None),
            &probes,
            m,
            2024,
            1,
            &SimGuards::default(),
        )
        .unwrap();
        for (p, &t) in probes.iter().enumerate() {
            let v = ens.column(p, 0);
            let mean = v.iter().sum::<f64>() / m as f64;
            let se = (t / 100.0 / m as f64).sqrt();
            assert!((mean - t).abs() < 3.0 * se, "t={t} mean={mean} se={se}");
        }
    }

    #[test]
    fn time_change_inter_event_mean() {
        // Single constant-rate reaction: inter-event times are Exp(N * rate).
        let text = "[model]\nname = C\nN = 10\n[species]\nP continuous 0\n[reactions]\nR | delta: P=+1 | rate = 2 | order = N\n";
        let c = classify(&parse_model(text).unwrap(), Regime::A).unwrap();
        let x0 = JumpState::initial(&c, 10);
        let traj = simulate_time_change(
            &c,
            Scale::new(10, None),
            &x0,
            600.0,
            &mut stream(77, 0),
            &SimGuards::default(),
        )
        .unwrap();
        let times: Vec<f64> = traj.events.iter().map(|e| e.t).collect();
        let gaps: Vec<f64> = std::iter::once(times[0])
            .chain(times.windows(2).map(|w| w[1] - w[0]))
            .take(10_000)
            .collect();
        assert_eq!(gaps.len(), 10_000);
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        let expected = 1.0 / 20.0;
        let se = expected / (gaps.len() as f64).sqrt();
        assert!((mean - expected).abs() < 3.0 * se, "{mean}");
    }
}
