//! Auxiliary split system for regime B.
//!
//! The continuous counts are split as `X = X1 + X2`: S2 reactions write their
//! scaled jumps into `X2`, everything else into `X1`. Rates are evaluated at
//! `X1 + X2`, so with the same random draws the split system reproduces the
//! direct-method path of the original system event by event.

use crate::ensemble::GuardFlags;
use crate::model::{ClassifiedModel, ReactionClass};
use crate::rng::{uniform, unit_exponential, SimRng};
use crate::ssa::{JumpState, Scale, SimGuards, SsaError};

#[derive(Debug, Clone, PartialEq)]
pub struct SplitEvent {
    pub t: f64,
    pub reaction: usize,
    /// Counts of all species, continuous entries holding `X1`.
    pub counts1: Vec<i64>,
    /// Continuous counts `X2` (zero for discrete species).
    pub counts2: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitTrajectory {
    pub events: Vec<SplitEvent>,
    pub flags: GuardFlags,
}

/// Direct-method simulation of the split system from `(x0, 0)`.
pub fn simulate_split_direct(
    classified: &ClassifiedModel,
    scale: Scale,
    x0: &JumpState,
    t_end: f64,
    rng: &mut SimRng,
    guards: &SimGuards,
) -> Result<SplitTrajectory, SsaError> {
    if !(t_end > 0.0) {
        return Err(SsaError::BadEndTime(t_end));
    }
    let model = &classified.model;
    let n = scale.n;
    let species = model.species.len();
    if x0.counts.len() != species {
        return Err(SsaError::StateSize {
            expected: species,
            got: x0.counts.len(),
        });
    }
    let factors = classified.order_factors(n as f64, scale.eps)?;
    // Per reaction: (species, count change, goes to X2).
    let jumps: Vec<Vec<(usize, i64, bool)>> = (0..model.reactions.len())
        .map(|r| {
            let reaction = &model.reactions[r];
            let s2 = classified.class(r) == ReactionClass::S2;
            let mut out: Vec<(usize, i64, bool)> = reaction
                .delta
                .iter()
                .filter(|(_, d)| *d != 0)
                .map(|&(s, d)| (s, d, false))
                .collect();
            out.extend(
                reaction
                    .sdelta
                    .iter()
                    .map(|&(s, d)| (s, (d * n as f64).round() as i64, s2)),
            );
            out
        })
        .collect();

    let mut c1 = x0.counts.clone();
    let mut c2 = vec![0i64; species];
    let mut x = vec![0.0; species];
    let mut props = vec![0.0; model.reactions.len()];
    let mut events = Vec::new();
    let mut flags = GuardFlags::default();
    let mut t = x0.t;
    let refresh_x = |x: &mut Vec<f64>, c1: &[i64], c2: &[i64]| {
        for s in 0..species {
            let c = c1[s] + c2[s];
            x[s] = if model.is_continuous(s) {
                c as f64 / n as f64
            } else {
                c as f64
            };
        }
    };
    refresh_x(&mut x, &c1, &c2);
    loop {
        let total = classified.propensities_into(&factors, &x, &mut props)?;
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
        for (r, &a) in props.iter().enumerate() {
            if a > 0.0 {
                acc += a;
                chosen = Some(r);
                if u < acc {
                    break;
                }
            }
        }
        let r = chosen.expect("positive total propensity");
        for &(s, d, second) in &jumps[r] {
            if c1[s] + c2[s] + d < 0 {
                return Err(SsaError::NegativeCount {
                    reaction: model.reactions[r].name.clone(),
                    species: model.species[s].name.clone(),
                    t,
                });
            }
            if second {
                c2[s] += d;
            } else {
                c1[s] += d;
            }
        }
        refresh_x(&mut x, &c1, &c2);
        events.push(SplitEvent {
            t,
            reaction: r,
            counts1: c1.clone(),
            counts2: c2.clone(),
        });
        if x.iter().any(|v| v.abs() > guards.max_radius) {
            flags.truncated = true;
            break;
        }
        if events.len() as u64 >= guards.max_jumps {
            flags.jump_cap_hit = true;
            break;
        }
    }
    Ok(SplitTrajectory { events, flags })
}
