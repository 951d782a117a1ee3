//! Time spent at theta = 1 by exact regime-D paths.

use super::{AnalysisError, EmpiricalSample};
use crate::ensemble::parallel_map;
use crate::limits::RegimeDConstants;
use crate::model::ClassifiedModel;
use crate::rng::stream;
use crate::ssa::{run_observed, Engine, JumpObserver, JumpState, Scale, SimGuards};

#[derive(Debug, Clone, PartialEq)]
pub struct OccupationReport {
    pub mean: f64,
    pub se: f64,
    pub samples: usize,
    /// `eps (M_lambda T + 1) / alpha`.
    pub bound: f64,
    pub aborted: usize,
}

impl OccupationReport {
    /// `mean + 3 se <= bound`.
    pub fn within_bound(&self) -> bool {
        self.mean + 3.0 * self.se <= self.bound
    }
}

/// Lebesgue measure of `{s <= t_end : theta(s) = 1}` for a path starting at
/// `theta0` and switching to the given values at the given times.
pub fn occupation_time_of_path(theta0: i64, switches: &[(f64, i64)], t_end: f64) -> f64 {
    let mut total = 0.0;
    let mut since = 0.0;
    let mut theta = theta0;
    for &(t, next) in switches {
        if t > t_end {
            break;
        }
        if theta == 1 {
            total += t - since;
        }
        theta = next;
        since = t;
    }
    if theta == 1 {
        total += t_end - since;
    }
    total
}

struct ThetaObserver {
    theta: usize,
    current: i64,
    switches: Vec<(f64, i64)>,
}

impl JumpObserver for ThetaObserver {
    fn event(&mut self, t: f64, _reaction: usize, counts: &[i64], _x: &[f64]) {
        if counts[self.theta] != self.current {
            self.current = counts[self.theta];
            self.switches.push((t, self.current));
        }
    }
}

/// Ensemble estimate of `E int_0^T 1{theta = 1} ds` with its standard error.
pub fn occupation_time(
    classified: &ClassifiedModel,
    scale: Scale,
    t_end: f64,
    samples: usize,
    master_seed: u64,
    workers: usize,
    guards: &SimGuards,
    constants: &RegimeDConstants,
) -> Result<OccupationReport, AnalysisError> {
    let theta = classified.theta.ok_or(AnalysisError::MissingTheta)?;
    let x0 = JumpState::initial(classified, scale.n);
    let theta0 = x0.counts[theta];
    let runs = parallel_map(samples, workers, |i| {
        let mut rng = stream(master_seed, i as u64);
        let mut obs = ThetaObserver {
            theta,
            current: theta0,
            switches: Vec::new(),
        };
        let summary = run_observed(
            Engine::Direct,
            classified,
            scale,
            &x0,
            t_end,
            &mut rng,
            guards,
            &mut obs,
        )?;
        Ok::<_, AnalysisError>((
            occupation_time_of_path(theta0, &obs.switches, t_end),
            summary.flags.aborted(),
        ))
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let aborted = runs.iter().filter(|r| r.1).count();
    let sample = EmpiricalSample::new(runs.into_iter().map(|r| r.0).collect(), "occupation")?;
    let eps = scale
        .eps
        .or(classified.model.default_eps)
        .ok_or(AnalysisError::MissingTheta)?;
    Ok(OccupationReport {
        mean: sample.mean(),
        se: sample.standard_error(),
        samples,
        bound: constants.occupation_bound(eps, t_end),
        aborted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{classify, parse_model, Regime};
    use crate::models;

    #[test]
    fn path_occupation() {
        assert_eq!(occupation_time_of_path(0, &[], 10.0), 0.0);
        assert_eq!(occupation_time_of_path(0, &[(2.0, 1), (2.5, 0)], 10.0), 0.5);
        assert_eq!(occupation_time_of_path(1, &[(3.0, 0)], 10.0), 3.0);
        assert_eq!(occupation_time_of_path(0, &[(9.0, 1), (12.0, 0)], 10.0), 1.0);
    }

    #[test]
    fn theta_required() {
        let cm = classify(&parse_model(models::GENE1).unwrap(), Regime::A).unwrap();
        let bd = classify(&parse_model(models::BURST1).unwrap(), Regime::D).unwrap();
        let c = RegimeDConstants::probe_default(&bd).unwrap();
        assert!(matches!(
            occupation_time(&cm, Scale::new(10, None), 1.0, 2, 0, 1, &SimGuards::default(), &c),
            Err(AnalysisError::MissingTheta)
        ));
    }

    #[test]
    fn burst1_small_ensemble() {
        let cm = classify(&parse_model(models::BURST1).unwrap(), Regime::D).unwrap();
        let c = RegimeDConstants::probe_default(&cm).unwrap();
        let r = occupation_time(
            &cm,
            Scale::new(100, Some(0.01)),
            10.0,
            200,
            5,
            1,
            &SimGuards::default(),
            &c,
        )
        .unwrap();
        // About 5 sojourns of mean length eps / b = 0.005 per path.
        assert!(r.mean > 0.01 && r.mean < 0.04, "{r:?}");
        assert!((r.bound - 0.03).abs() < 1e-15);
    }
}
