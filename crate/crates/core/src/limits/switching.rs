//! Probed bounds for singular switching through theta.

use std::collections::BTreeMap;

use super::LimitError;
use crate::model::{ClassifiedModel, Regime};
use crate::rate_expr::{lipschitz_probe, Binding, ProbeBox};

/// Bounds on the theta switching rates over a probe box.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeDConstants {
    /// Lower bound of the 1 -> 0 scaled rate while theta = 1.
    pub alpha: f64,
    /// Upper bound of the 0 -> 1 rate while theta = 0.
    pub m_lambda: f64,
    /// Probe box per continuous species.
    pub probe_box: Vec<(String, f64, f64)>,
    pub grid: usize,
    /// Grid-to-box margins subtracted from alpha and added to `m_lambda`.
    pub alpha_margin: f64,
    pub m_lambda_margin: f64,
}

/// Default probe interval for every continuous species.
pub const DEFAULT_PROBE_INTERVAL: (f64, f64) = (0.0, 10.0);
pub const DEFAULT_PROBE_GRID: usize = 21;

/// The (0 -> 1, 1 -> 0) theta flip reactions of a regime-D model.
pub(crate) fn theta_flips(classified: &ClassifiedModel) -> Result<(usize, usize, usize), LimitError> {
    if classified.regime != Regime::D {
        return Err(LimitError::WrongRegime {
            expected: Regime::D,
            got: classified.regime,
        });
    }
    let theta = classified.theta.expect("regime D has theta");
    let reactions = &classified.model.reactions;
    let up = reactions.iter().position(|r| r.delta_of(theta) == 1);
    let down = reactions.iter().position(|r| r.delta_of(theta) == -1);
    Ok((theta, up.expect("classified"), down.expect("classified")))
}

impl RegimeDConstants {
    /// Probes both flip rates on a uniform grid over `probe_box`.
    ///
    /// Each bound is widened by `L * sum(h_i) / 2`, with `L` the largest grid slope,
    /// to cover points between grid nodes.
    pub fn probe(
        classified: &ClassifiedModel,
        probe_box: &[(String, f64, f64)],
        grid: usize,
    ) -> Result<Self, LimitError> {
        let (theta, up, down) = theta_flips(classified)?;
        let model = &classified.model;
        let axes: Vec<(usize, f64, f64)> = classified
            .continuous
            .iter()
            .map(|&s| {
                let name = &model.species[s].name;
                probe_box
                    .iter()
                    .find(|(n, _, _)| n == name)
                    .map(|&(_, lo, hi)| (s, lo, hi))
                    .ok_or_else(|| LimitError::Probe(format!("no probe interval for `{name}`")))
            })
            .collect::<Result<_, _>>()?;
        if grid < 2 {
            return Err(LimitError::Probe(format!("grid must be at least 2, got {grid}")));
        }

        let scan = |r: usize, theta_value: f64| -> Result<(f64, f64, f64), LimitError> {
            let reaction = &model.reactions[r];
            let mut x = vec![0.0; model.species.len()];
            x[theta] = theta_value;
            let total = grid.pow(axes.len() as u32);
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for flat in 0..total {
                let mut rest = flat;
                for &(s, a, b) in axes.iter().rev() {
                    let k = rest % grid;
                    rest /= grid;
                    x[s] = a + (b - a) * k as f64 / (grid - 1) as f64;
                }
                let v = reaction.eval(&x).map_err(|e| LimitError::Rate {
                    reaction: reaction.name.clone(),
                    msg: e.to_string(),
                })?;
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let margin = if axes.is_empty() {
                0.0
            } else {
                let mut fixed = Binding::new().species(&model.species[theta].name, theta_value);
                for (name, v) in &model.params {
                    fixed = fixed.param(name, *v);
                }
                let intervals: BTreeMap<String, (f64, f64)> = axes
                    .iter()
                    .map(|&(s, a, b)| (model.species[s].name.clone(), (a, b)))
                    .collect();
                let slope = lipschitz_probe(&reaction.rate, &ProbeBox { intervals, fixed }, grid)
                    .map_err(|e| LimitError::Probe(e.to_string()))?;
                let spacing: f64 = axes.iter().map(|&(_, a, b)| (b - a) / (grid - 1) as f64).sum();
                slope * spacing / 2.0
            };
            Ok((lo, hi, margin))
        };

        let (down_min, _, alpha_margin) = scan(down, 1.0)?;
        let (_, up_max, m_lambda_margin) = scan(up, 0.0)?;
        Ok(Self {
            alpha: down_min - alpha_margin,
            m_lambda: up_max + m_lambda_margin,
            probe_box: axes
                .iter()
                .map(|&(s, a, b)| (model.species[s].name.clone(), a, b))
                .collect(),
            grid,
            alpha_margin,
            m_lambda_margin,
        })
    }

    /// Probe over the default box for every continuous species.
    pub fn probe_default(classified: &ClassifiedModel) -> Result<Self, LimitError> {
        let probe_box: Vec<(String, f64, f64)> = classified
            .continuous
            .iter()
            .map(|&s| {
                let (lo, hi) = DEFAULT_PROBE_INTERVAL;
                (classified.model.species[s].name.clone(), lo, hi)
            })
            .collect();
        Self::probe(classified, &probe_box, DEFAULT_PROBE_GRID)
    }

    /// Upper bound `eps (M_lambda T + 1) / alpha` on the expected time spent at theta = 1.
    pub fn occupation_bound(&self, eps: f64, t: f64) -> f64 {
        eps * (self.m_lambda * t + 1.0) / self.alpha
    }
}
