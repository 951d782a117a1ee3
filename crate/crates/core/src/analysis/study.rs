//! Convergence of exact ensembles to the limit PDP across scales.

use std::fmt;

use super::{AnalysisError, DistanceReport, EmpiricalSample};
use crate::ensemble::ProbeEnsemble;
use crate::limits::build_limit;
use crate::model::{ClassifiedModel, Regime};
use crate::pdp::{run_pdp_ensemble, FlowConfig, PdpSpec};
use crate::rng::derive_seed;
use crate::ssa::{run_ssa_ensemble, Engine, Scale, SimGuards};

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub probes: Vec<f64>,
    pub samples: usize,
    pub master_seed: u64,
    pub workers: usize,
    pub engine: Engine,
    pub guards: SimGuards,
    pub flow: FlowConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProbeLabel {
    At(f64),
    /// Average over the probe grid.
    Average,
}

impl fmt::Display for ProbeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProbeLabel::At(t) => write!(f, "{t}"),
            ProbeLabel::Average => f.write_str("avg"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub scale_n: u64,
    pub eps: Option<f64>,
    pub probe_t: ProbeLabel,
    pub species: String,
    pub ks: f64,
    pub w1: f64,
    pub n_ssa: usize,
    pub n_pdp: usize,
    /// Fraction of guard-aborted runs over both ensembles.
    pub truncated_frac: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyTable {
    pub rows: Vec<StudyRow>,
}

impl StudyTable {
    /// Study CSV: `scale_N,eps,probe_t,species,ks,w1,n_ssa,n_pdp,truncated_frac`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scale_N,eps,probe_t,species,ks,w1,n_ssa,n_pdp,truncated_frac\n");
        for r in &self.rows {
            let eps = r.eps.map(|e| e.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.scale_n, eps, r.probe_t, r.species, r.ks, r.w1, r.n_ssa, r.n_pdp, r.truncated_frac
            ));
        }
        out
    }

    /// Rows of one scale and species, in probe order.
    pub fn select(&self, scale_n: u64, species: &str) -> Vec<&StudyRow> {
        self.rows
            .iter()
            .filter(|r| r.scale_n == scale_n && r.species == species)
            .collect()
    }

    /// The time-averaged row of one scale and species (regime D).
    pub fn average(&self, scale_n: u64, species: &str) -> Option<&StudyRow> {
        self.select(scale_n, species)
            .into_iter()
            .find(|r| r.probe_t == ProbeLabel::Average)
    }

    pub fn at(&self, scale_n: u64, species: &str, t: f64) -> Option<&StudyRow> {
        self.select(scale_n, species)
            .into_iter()
            .find(|r| r.probe_t == ProbeLabel::At(t))
    }
}

fn sample(ens: &ProbeEnsemble, probe: usize, name: &str, label: String) -> Result<EmpiricalSample, AnalysisError> {
    let col = ens
        .column_index(name)
        .ok_or_else(|| AnalysisError::MissingColumn(name.to_string()))?;
    EmpiricalSample::new(ens.column(probe, col), label)
}

/// Compares exact ensembles at each scale with one limit-PDP ensemble.
///
/// The limit ensemble uses sub-seed 0 of `master_seed`; scale `i` uses sub-seed `i + 1`.
/// Under regime D an extra row per species averages KS and W1 over the probes.
pub fn convergence_study(
    classified: &ClassifiedModel,
    scales: &[Scale],
    config: &StudyConfig,
) -> Result<StudyTable, AnalysisError> {
    if scales.is_empty() {
        return Err(AnalysisError::NoScales);
    }
    let spec = build_limit(classified)?;
    let (y0, mode0) = spec.initial_state();
    let limit = run_pdp_ensemble(
        &spec,
        &y0,
        &mode0,
        &config.probes,
        config.samples,
        derive_seed(config.master_seed, 0),
        config.workers,
        &config.flow,
    )?;
    let (species, _) = spec.column_names();
    let model = &classified.model;

    let mut rows = Vec::new();
    for (i, &scale) in scales.iter().enumerate() {
        let exact = run_ssa_ensemble(
            config.engine,
            classified,
            scale,
            &config.probes,
            config.samples,
            derive_seed(config.master_seed, i as u64 + 1),
            config.workers,
            &config.guards,
        )?;
        let aborted = exact.truncated + exact.jump_cap_hits + limit.truncated + limit.jump_cap_hits;
        let truncated_frac = aborted as f64 / (exact.len() + limit.len()).max(1) as f64;
        let eps = if classified.regime == Regime::D {
            scale.eps.or(model.default_eps)
        } else {
            scale.eps
        };
        for name in &species {
            let mut ks_sum = 0.0;
            let mut w1_sum = 0.0;
            for (p, &t) in config.probes.iter().enumerate() {
                let a = sample(&exact, p, name, format!("{} {name} N={} t={t}", model.name, scale.n))?;
                let b = sample(&limit, p, name, format!("{} {name} limit t={t}", model.name))?;
                let d = DistanceReport::compare(&a, &b, t)?;
                ks_sum += d.ks;
                w1_sum += d.wasserstein1;
                rows.push(StudyRow {
                    scale_n: scale.n,
                    eps,
                    probe_t: ProbeLabel::At(t),
                    species: name.clone(),
                    ks: d.ks,
                    w1: d.wasserstein1,
                    n_ssa: d.n_a,
                    n_pdp: d.n_b,
                    truncated_frac,
                });
            }
            if classified.regime == Regime::D && !config.probes.is_empty() {
                let k = config.probes.len() as f64;
                rows.push(StudyRow {
                    scale_n: scale.n,
                    eps,
                    probe_t: ProbeLabel::Average,
                    species: name.clone(),
                    ks: ks_sum / k,
                    w1: w1_sum / k,
                    n_ssa: exact.len(),
                    n_pdp: limit.len(),
                    truncated_frac,
                });
            }
        }
    }
    Ok(StudyTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{classify, parse_model};
    use crate::models;

    fn config(samples: usize) -> StudyConfig {
        StudyConfig {
            probes: vec![1.0, 2.0],
            samples,
            master_seed: 3,
            workers: 1,
            engine: Engine::Direct,
            guards: SimGuards::default(),
            flow: FlowConfig {
                dt_max: 1e-2,
                ..FlowConfig::default()
            },
        }
    }

    #[test]
    fn single_scale_table_shape() {
        let cm = classify(&parse_model(models::GENE1).unwrap(), Regime::A).unwrap();
        let table = convergence_study(&cm, &[Scale::new(50, None)], &config(40)).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert!(table
            .rows
            .iter()
            .all(|r| r.species == "P" && r.n_ssa == 40 && r.n_pdp == 40));
        let csv = table.to_csv();
        assert!(csv.starts_with("scale_N,eps,probe_t,species,ks,w1,n_ssa,n_pdp,truncated_frac\n50,,1,P,"));
        assert_eq!(
            table,
            convergence_study(&cm, &[Scale::new(50, None)], &config(40)).unwrap()
        );
        assert!(convergence_study(&cm, &[], &config(4)).is_err());
    }

    #[test]
    fn regime_d_rows_carry_eps_and_average() {
        let cm = classify(&parse_model(models::BURST1).unwrap(), Regime::D).unwrap();
        let scales = [Scale::new(50, Some(0.1)), Scale::new(100, Some(0.05))];
        let table = convergence_study(&cm, &scales, &config(20)).unwrap();
        assert_eq!(table.rows.len(), 6);
        let avg = table.average(100, "P").unwrap();
        assert_eq!(avg.eps, Some(0.05));
        let mean = (table.at(100, "P", 1.0).unwrap().ks + table.at(100, "P", 2.0).unwrap().ks) / 2.0;
        assert_eq!(avg.ks, mean);
        assert!(table.to_csv().contains("100,0.05,avg,P,"));
    }
}
