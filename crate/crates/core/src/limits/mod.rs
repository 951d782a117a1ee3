//! Limit PDPs of the four scaling regimes.
//!
//! Each builder turns a [`ClassifiedModel`] into a [`LimitSpec`], a PDP whose
//! continuous component `y` holds the continuous species and whose mode holds
//! the slow discrete species:
//!
//! * A: drift from R_C and S1, jumps from R_D and R_DC_slow.
//! * B: as A, plus S2 jumps that move `y` by their sdelta.
//! * C: S1 drift and all jump rates averaged against the fast block's invariant law.
//! * D: drift of the theta = 0 reactions; each switch to theta = 1 is collapsed
//!   into a jump along the theta = 1 flow.
//!
//! Limit transitions drop the O(1/N) continuous displacement of slow reactions.

mod averaging;
mod split;
mod switching;

pub use averaging::{
    averaged_rates, averaged_rates_at, averaging_defect, solve_poisson, stationary_distribution, AveragedRates,
    FastBlockSpec, GradientFn, SlowFunction,
};
pub use split::{simulate_split_direct, SplitEvent, SplitTrajectory};
pub use switching::{RegimeDConstants, DEFAULT_PROBE_GRID, DEFAULT_PROBE_INTERVAL};

use thiserror::Error;

use crate::model::{ClassifiedModel, ReactionClass, Regime, ThetaGate};
use crate::pdp::{hazard_crossing, rk4_step, FlowConfig, JumpSample, PdpError, PdpSpec, StateFn};
use crate::rng::{uniform, unit_exponential, SimRng};
use averaging::{averaged_rates_with, eval_rate};
use std::collections::HashMap;
use std::sync::{Arc, RwLock};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LimitError {
    #[error("model is classified under regime {got}, this construction needs regime {expected}")]
    WrongRegime { expected: Regime, got: Regime },
    #[error("invalid generator: {0}")]
    Generator(String),
    #[error("fast chain is not uniquely ergodic; closed classes: {classes:?}")]
    NotErgodic { classes: Vec<Vec<usize>> },
    #[error("singular linear system")]
    Singular,
    #[error("right-hand side is not centered (nu-mean {mean})")]
    NotCentered { mean: f64 },
    #[error("Poisson residual {0} exceeds tolerance")]
    Residual(f64),
    #[error("reaction `{reaction}` leaves the fast block from state {state:?}")]
    LeavesFastBlock { reaction: String, state: Vec<i64> },
    #[error("reaction `{reaction}`: {msg}")]
    Rate { reaction: String, msg: String },
    #[error("state must have {continuous} continuous and {discrete} slow discrete entries")]
    StateSize { continuous: usize, discrete: usize },
    #[error("probe: {0}")]
    Probe(String),
    #[error("alpha = {0} is not positive on the probe box")]
    AlphaNotPositive(f64),
}

impl From<LimitError> for PdpError {
    fn from(e: LimitError) -> Self {
        PdpError::Model(e.to_string())
    }
}

/// Drift contribution `gamma * rate` of one reaction, over `y` indices.
#[derive(Debug, Clone)]
struct DriftTerm {
    reaction: usize,
    gamma: Vec<(usize, f64)>,
    averaged: bool,
}

/// Jump channel: mode change and (S2 only) a displacement of `y`.
#[derive(Debug, Clone)]
struct JumpTerm {
    reaction: usize,
    mode_delta: Vec<(usize, i64)>,
    y_jump: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
struct Switching {
    theta: usize,
    up: usize,
    down: usize,
    flow1: Vec<DriftTerm>,
    constants: RegimeDConstants,
}

/// Flow settings used inside the regime-D transition sampler and generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwitchingConfig {
    pub flow: FlowConfig,
    /// Hazard increment per quadrature step of the jump generator.
    pub quad_hazard_step: f64,
    /// Step cap of that quadrature.
    pub quad_dt_max: f64,
    /// Survival level at which the quadrature stops.
    pub quad_cutoff: f64,
}

impl Default for SwitchingConfig {
    fn default() -> Self {
        Self {
            flow: FlowConfig::default(),
            quad_hazard_step: 0.2,
            quad_dt_max: 0.1,
            quad_cutoff: 1e-10,
        }
    }
}

/// The limit PDP of a classified model.
#[derive(Debug, Clone)]
pub struct LimitSpec {
    classified: ClassifiedModel,
    y_species: Vec<usize>,
    mode_species: Vec<usize>,
    drift: Vec<DriftTerm>,
    jumps: Vec<JumpTerm>,
    fast: Option<FastBlockSpec>,
    nu_cache: NuCache,
    switching: Option<Switching>,
    switching_config: SwitchingConfig,
}

/// Invariant laws of the fast block keyed by the slow discrete state.
#[derive(Clone, Default)]
struct NuCache(Arc<RwLock<HashMap<Vec<i64>, Vec<f64>>>>);

impl std::fmt::Debug for NuCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("NuCache")
    }
}

fn drift_term(cm: &ClassifiedModel, r: usize, species: &[usize], averaged: bool) -> DriftTerm {
    let reaction = &cm.model.reactions[r];
    let gamma = species
        .iter()
        .enumerate()
        .map(|(i, &s)| (i, reaction.delta_of(s) as f64))
        .filter(|(_, g)| *g != 0.0)
        .collect();
    DriftTerm {
        reaction: r,
        gamma,
        averaged,
    }
}

fn jump_term(cm: &ClassifiedModel, r: usize, y_species: &[usize], mode_species: &[usize]) -> JumpTerm {
    let reaction = &cm.model.reactions[r];
    JumpTerm {
        reaction: r,
        mode_delta: mode_species
            .iter()
            .enumerate()
            .map(|(i, &s)| (i, reaction.delta_of(s)))
            .filter(|(_, d)| *d != 0)
            .collect(),
        y_jump: y_species
            .iter()
            .enumerate()
            .map(|(i, &s)| (i, reaction.sdelta_of(s)))
            .filter(|(_, d)| *d != 0.0)
            .collect(),
    }
}

fn expect_regime(cm: &ClassifiedModel, regime: Regime) -> Result<(), LimitError> {
    if cm.regime == regime {
        Ok(())
    } else {
        Err(LimitError::WrongRegime {
            expected: regime,
            got: cm.regime,
        })
    }
}

fn build_ab(cm: &ClassifiedModel) -> LimitSpec {
    let y_species = cm.continuous.clone();
    let mode_species = cm.discrete.clone();
    let drift = (0..cm.model.reactions.len())
        .filter(|&r| matches!(cm.class(r), ReactionClass::RC | ReactionClass::S1))
        .map(|r| drift_term(cm, r, &y_species, false))
        .collect();
    let jumps = (0..cm.model.reactions.len())
        .filter(|&r| {
            matches!(
                cm.class(r),
                ReactionClass::RD | ReactionClass::RDCSlow | ReactionClass::S2
            )
        })
        .map(|r| jump_term(cm, r, &y_species, &mode_species))
        .collect();
    LimitSpec {
        classified: cm.clone(),
        y_species,
        mode_species,
        drift,
        jumps,
        fast: None,
        nu_cache: NuCache::default(),
        switching: None,
        switching_config: SwitchingConfig::default(),
    }
}

/// Regime A: continuous PDP with modes `X_D`.
pub fn build_regime_a(classified: &ClassifiedModel) -> Result<LimitSpec, LimitError> {
    expect_regime(classified, Regime::A)?;
    Ok(build_ab(classified))
}

/// Regime B: regime A plus O(1) jumps of the continuous species.
pub fn build_regime_b(classified: &ClassifiedModel) -> Result<LimitSpec, LimitError> {
    expect_regime(classified, Regime::B)?;
    Ok(build_ab(classified))
}

/// Regime C: averaged PDP with modes `X_D^1`.
pub fn build_regime_c(classified: &ClassifiedModel) -> Result<LimitSpec, LimitError> {
    expect_regime(classified, Regime::C)?;
    let cm = classified;
    let fast = FastBlockSpec::new(cm)?;
    let y_species = cm.continuous.clone();
    let mode_species = cm.slow_discrete.clone();
    let drift = (0..cm.model.reactions.len())
        .filter_map(|r| match cm.class(r) {
            ReactionClass::RC => Some(drift_term(cm, r, &y_species, false)),
            ReactionClass::S1 => Some(drift_term(cm, r, &y_species, true)),
            _ => None,
        })
        .collect();
    let jumps = (0..cm.model.reactions.len())
        .filter(|&r| matches!(cm.class(r), ReactionClass::RD | ReactionClass::RDCSlow))
        .map(|r| jump_term(cm, r, &y_species, &mode_species))
        .collect();
    Ok(LimitSpec {
        classified: cm.clone(),
        y_species,
        mode_species,
        drift,
        jumps,
        fast: Some(fast),
        nu_cache: NuCache::default(),
        switching: None,
        switching_config: SwitchingConfig::default(),
    })
}

/// Regime D: single-mode PDP on the continuous species.
pub fn build_regime_d(classified: &ClassifiedModel, constants: &RegimeDConstants) -> Result<LimitSpec, LimitError> {
    let (theta, up, down) = switching::theta_flips(classified)?;
    if !(constants.alpha > 0.0) {
        return Err(LimitError::AlphaNotPositive(constants.alpha));
    }
    let cm = classified;
    let y_species = cm.continuous.clone();
    let gated = |gate: ThetaGate| {
        (0..cm.model.reactions.len())
            .filter(|&r| cm.class(r) == ReactionClass::RDCSlow && cm.model.reactions[r].gate == Some(gate))
            .map(|r| drift_term(cm, r, &y_species, false))
            .collect::<Vec<_>>()
    };
    let drift = gated(ThetaGate::Theta0);
    let flow1 = gated(ThetaGate::Theta1);
    Ok(LimitSpec {
        classified: cm.clone(),
        drift,
        y_species,
        mode_species: Vec::new(),
        jumps: Vec::new(),
        fast: None,
        nu_cache: NuCache::default(),
        switching: Some(Switching {
            theta,
            up,
            down,
            flow1,
            constants: constants.clone(),
        }),
        switching_config: SwitchingConfig::default(),
    })
}

/// Builds the limit of `classified` for its own regime; regime D probes the default box.
pub fn build_limit(classified: &ClassifiedModel) -> Result<LimitSpec, LimitError> {
    match classified.regime {
        Regime::A => build_regime_a(classified),
        Regime::B => build_regime_b(classified),
        Regime::C => build_regime_c(classified),
        Regime::D => build_regime_d(classified, &RegimeDConstants::probe_default(classified)?),
    }
}

impl LimitSpec {
    pub fn classified(&self) -> &ClassifiedModel {
        &self.classified
    }

    pub fn regime(&self) -> Regime {
        self.classified.regime
    }

    pub fn constants(&self) -> Option<&RegimeDConstants> {
        self.switching.as_ref().map(|s| &s.constants)
    }

    pub fn with_switching_config(mut self, config: SwitchingConfig) -> Self {
        self.switching_config = config;
        self
    }

    /// Initial `(y, mode)` from the model's declared initial values.
    pub fn initial_state(&self) -> (Vec<f64>, Vec<i64>) {
        let species = &self.classified.model.species;
        (
            self.y_species.iter().map(|&s| species[s].init).collect(),
            self.mode_species.iter().map(|&s| species[s].init as i64).collect(),
        )
    }

    /// Species indices behind `y` and the mode vector.
    pub fn layout(&self) -> (&[usize], &[usize]) {
        (&self.y_species, &self.mode_species)
    }

    fn full(&self, mode: &[i64], y: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.classified.model.species.len()];
        for (&s, &v) in self.y_species.iter().zip(y) {
            x[s] = v;
        }
        for (&s, &v) in self.mode_species.iter().zip(mode) {
            x[s] = v as f64;
        }
        x
    }

    fn averaged(&self, x: &[f64]) -> Result<Option<AveragedRates>, LimitError> {
        match &self.fast {
            Some(fast) if fast.discrete_only() => {
                let key: Vec<i64> = self.classified.slow_discrete.iter().map(|&s| x[s] as i64).collect();
                let cached = self.nu_cache.0.read().expect("cache lock").get(&key).cloned();
                let nu = match cached {
                    Some(nu) => nu,
                    None => {
                        let nu = stationary_distribution(&fast.generator_at(&self.classified, x)?)?;
                        self.nu_cache.0.write().expect("cache lock").insert(key, nu.clone());
                        nu
                    }
                };
                Ok(Some(averaged_rates_with(&self.classified, fast, x, nu)?))
            }
            Some(fast) => Ok(Some(averaged_rates_at(&self.classified, fast, x)?)),
            None => Ok(None),
        }
    }

    fn drift_into(
        &self,
        terms: &[DriftTerm],
        x: &[f64],
        avg: Option<&AveragedRates>,
        out: &mut [f64],
    ) -> Result<(), LimitError> {
        out.iter_mut().for_each(|v| *v = 0.0);
        for term in terms {
            if term.gamma.is_empty() {
                continue;
            }
            let rate = match (term.averaged, avg) {
                (true, Some(a)) => a.rates[term.reaction].expect("averaged reaction"),
                _ => eval_rate(&self.classified, term.reaction, x)?,
            };
            for &(i, g) in &term.gamma {
                out[i] += g * rate;
            }
        }
        Ok(())
    }

    fn jump_rates(&self, x: &[f64]) -> Result<Vec<f64>, LimitError> {
        if self.jumps.is_empty() {
            return Ok(Vec::new());
        }
        let avg = self.averaged(x)?;
        self.jumps
            .iter()
            .map(|j| match &avg {
                Some(a) => Ok(a.rates[j.reaction].expect("averaged reaction")),
                None => eval_rate(&self.classified, j.reaction, x),
            })
            .collect()
    }

    fn apply(&self, j: &JumpTerm, mode: &[i64], y: &[f64]) -> Result<(Vec<f64>, Vec<i64>), PdpError> {
        let mut y = y.to_vec();
        let mut mode = mode.to_vec();
        for &(i, d) in &j.y_jump {
            y[i] += d;
        }
        for &(i, d) in &j.mode_delta {
            mode[i] += d;
            if mode[i] < 0 {
                return Err(PdpError::Model(format!(
                    "reaction `{}` drives `{}` negative",
                    self.classified.model.reactions[j.reaction].name,
                    self.classified.model.species[self.mode_species[i]].name
                )));
            }
        }
        Ok((y, mode))
    }

    /// Theta-1 flow field and switch-off hazard at `y`.
    fn theta1(&self, sw: &Switching, y: &[f64], out: &mut [f64]) -> Result<f64, LimitError> {
        let mut x = self.full(&[], y);
        x[sw.theta] = 1.0;
        self.drift_into(&sw.flow1, &x, None, out)?;
        eval_rate(&self.classified, sw.down, &x)
    }

    /// Samples the regime-D jump target from `y` given a unit-exponential draw.
    pub fn switching_target(&self, y: &[f64], exp_draw: f64) -> Result<Vec<f64>, PdpError> {
        let sw = self
            .switching
            .as_ref()
            .ok_or(PdpError::Unsupported("switching target"))?;
        let cfg = &self.switching_config.flow;
        // The off-rate stays above alpha on the probe box, so the crossing time is at most E / alpha.
        let horizon = exp_draw / sw.constants.alpha;
        let t_max = 2.0 * horizon + 10.0 * cfg.dt_max;
        let mut scratch = vec![0.0; y.len()];
        let sample = hazard_crossing(
            |z, out| self.theta1(sw, z, out).map(|_| ()).map_err(PdpError::from),
            |z| self.theta1(sw, z, &mut scratch).map_err(PdpError::from),
            y,
            exp_draw,
            t_max,
            cfg,
            |_, z| Ok(z.iter().all(|v| v.abs() <= cfg.max_radius)),
        )?;
        match sample {
            JumpSample::Jump { y, .. } => Ok(y),
            JumpSample::NoJump { hazard, .. } => Err(PdpError::Model(format!(
                "switch-off hazard reached only {hazard} of {exp_draw} within {t_max}; \
                 alpha = {} does not hold along the theta = 1 flow",
                sw.constants.alpha
            ))),
        }
    }

    /// `E f(phi_1(T, y))` with `T` the first switch-off time, by quadrature in time.
    /// `E f(phi1(T, y))` for each `f`, where `T` is the first hazard crossing of an Exp(1) draw.
    fn switching_expectation(
        &self,
        sw: &Switching,
        y: &[f64],
        fs: &[&StateFn],
        out: &mut [f64],
    ) -> Result<(), PdpError> {
        let n = y.len();
        let nf = fs.len();
        let cfg = &self.switching_config;
        // z = (y, Lambda, M, I_1..I_k) with M' = h exp(-Lambda) and I_j' = f_j(y) M'.
        // Dividing by the computed mass M + tail makes constants exact.
        let mut aug = |z: &[f64], dz: &mut [f64]| -> Result<(), PdpError> {
            let h = self.theta1(sw, &z[..n], &mut dz[..n])?;
            dz[n] = h;
            let w = h * (-z[n]).exp();
            dz[n + 1] = w;
            for (j, f) in fs.iter().enumerate() {
                dz[n + 2 + j] = f(&z[..n], &[]) * w;
            }
            Ok(())
        };
        let mut z = y.to_vec();
        z.resize(n + 2 + nf, 0.0);
        let mut next = z.clone();
        let mut scratch = vec![0.0; n];
        let lambda_stop = -cfg.quad_cutoff.ln();
        let mut steps = 0u64;
        while z[n] < lambda_stop {
            let h = self.theta1(sw, &z[..n], &mut scratch)?;
            let dt = if h > 0.0 {
                (cfg.quad_hazard_step / h).min(cfg.quad_dt_max)
            } else {
                cfg.quad_dt_max
            };
            rk4_step(&mut aug, &z, dt, &mut next)?;
            std::mem::swap(&mut z, &mut next);
            steps += 1;
            if steps > cfg.flow.max_jumps || z.iter().any(|v| !v.is_finite()) {
                return Err(PdpError::Model("switching quadrature did not converge".into()));
            }
        }
        // Remaining survival mass sits near the last point.
        let tail = (-z[n]).exp();
        let mass = z[n + 1] + tail;
        for (j, f) in fs.iter().enumerate() {
            out[j] = (z[n + 2 + j] + tail * f(&z[..n], &[])) / mass;
        }
        Ok(())
    }
}

impl PdpSpec for LimitSpec {
    fn dim(&self) -> usize {
        self.y_species.len()
    }

    fn column_names(&self) -> (Vec<String>, Vec<String>) {
        let species = &self.classified.model.species;
        (
            self.y_species.iter().map(|&s| species[s].name.clone()).collect(),
            self.mode_species.iter().map(|&s| species[s].name.clone()).collect(),
        )
    }

    fn field(&self, mode: &[i64], y: &[f64], out: &mut [f64]) -> Result<(), PdpError> {
        let x = self.full(mode, y);
        let avg = self.averaged(&x)?;
        self.drift_into(&self.drift, &x, avg.as_ref(), out)?;
        Ok(())
    }

    fn jump_rate(&self, mode: &[i64], y: &[f64]) -> Result<f64, PdpError> {
        let x = self.full(mode, y);
        if let Some(sw) = &self.switching {
            return Ok(eval_rate(&self.classified, sw.up, &x)?);
        }
        Ok(self.jump_rates(&x)?.iter().sum())
    }

    fn transition(&self, mode: &[i64], y: &[f64], rng: &mut SimRng) -> Result<(Vec<f64>, Vec<i64>), PdpError> {
        if self.switching.is_some() {
            let e = unit_exponential(rng);
            return Ok((self.switching_target(y, e)?, mode.to_vec()));
        }
        let rates = self.jump_rates(&self.full(mode, y))?;
        let total: f64 = rates.iter().sum();
        let u = uniform(rng) * total;
        let mut acc = 0.0;
        let mut chosen = None;
        for (j, &a) in rates.iter().enumerate() {
            if a > 0.0 {
                acc += a;
                chosen = Some(j);
                if u < acc {
                    break;
                }
            }
        }
        let j = chosen.ok_or_else(|| PdpError::Model("transition requested at zero jump rate".into()))?;
        self.apply(&self.jumps[j], mode, y)
    }

    fn jump_generator(&self, mode: &[i64], y: &[f64], f: &dyn Fn(&[f64], &[i64]) -> f64) -> Result<f64, PdpError> {
        let mut out = [0.0];
        self.jump_generator_many(mode, y, &[f], &mut out)?;
        Ok(out[0])
    }

    fn jump_generator_many(&self, mode: &[i64], y: &[f64], fs: &[&StateFn], out: &mut [f64]) -> Result<(), PdpError> {
        out.iter_mut().for_each(|o| *o = 0.0);
        let x = self.full(mode, y);
        if let Some(sw) = &self.switching {
            let rate = eval_rate(&self.classified, sw.up, &x)?;
            if rate == 0.0 {
                return Ok(());
            }
            self.switching_expectation(sw, y, fs, out)?;
            for (o, f) in out.iter_mut().zip(fs) {
                *o = rate * (*o - f(y, mode));
            }
            return Ok(());
        }
        let rates = self.jump_rates(&x)?;
        let f0: Vec<f64> = fs.iter().map(|f| f(y, mode)).collect();
        for (j, &a) in self.jumps.iter().zip(&rates) {
            if a > 0.0 {
                let (py, pm) = self.apply(j, mode, y)?;
                for ((o, f), v0) in out.iter_mut().zip(fs).zip(&f0) {
                    *o += a * (f(&py, &pm) - v0);
                }
            }
        }
        Ok(())
    }
}
