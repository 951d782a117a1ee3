//! Distances between empirical laws and the statistical checks built on them.

mod martingale;
mod occupation;
mod study;

pub use martingale::{
    martingale_pdp, martingale_ssa, standard_test_functions, MartingaleConfig, MartingaleReport, MartingaleRow,
    TestFunction,
};
pub use occupation::{occupation_time, occupation_time_of_path, OccupationReport};
pub use study::{convergence_study, ProbeLabel, StudyConfig, StudyRow, StudyTable};

use thiserror::Error;

use crate::limits::LimitError;
use crate::pdp::PdpError;
use crate::ssa::SsaError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("sample `{0}` is empty")]
    Empty(String),
    #[error("sample `{0}` contains non-finite values")]
    NonFinite(String),
    #[error("sample sizes differ: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("no scales given")]
    NoScales,
    #[error("model has no theta species")]
    MissingTheta,
    #[error("species `{0}` not found in the ensemble")]
    MissingColumn(String),
    #[error(transparent)]
    Ssa(#[from] SsaError),
    #[error(transparent)]
    Pdp(#[from] PdpError),
    #[error(transparent)]
    Limit(#[from] LimitError),
}

/// A labeled, non-empty sample of finite reals.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalSample {
    values: Vec<f64>,
    label: String,
}

impl EmpiricalSample {
    pub fn new(values: Vec<f64>, label: impl Into<String>) -> Result<Self, AnalysisError> {
        let label = label.into();
        if values.is_empty() {
            return Err(AnalysisError::Empty(label));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AnalysisError::NonFinite(label));
        }
        Ok(Self { values, label })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn sorted(&self) -> Vec<f64> {
        let mut v = self.values.clone();
        v.sort_by(f64::total_cmp);
        v
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.len() as f64
    }

    /// Standard error of the mean (zero for a single value).
    pub fn standard_error(&self) -> f64 {
        let n = self.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        let var = self.values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    }
}

/// Two-sample Kolmogorov-Smirnov statistic by a merge over the sorted samples.
pub fn ks_distance(a: &EmpiricalSample, b: &EmpiricalSample) -> f64 {
    let (xa, xb) = (a.sorted(), b.sorted());
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0f64;
    while i < xa.len() && j < xb.len() {
        let v = xa[i].min(xb[j]);
        while i < xa.len() && xa[i] <= v {
            i += 1;
        }
        while j < xb.len() && xb[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// One-sample KS statistic against a continuous CDF.
pub fn ks_one_sample(a: &EmpiricalSample, cdf: impl Fn(f64) -> f64) -> f64 {
    let x = a.sorted();
    let n = x.len() as f64;
    x.iter().enumerate().fold(0.0f64, |d, (i, &v)| {
        let f = cdf(v);
        d.max(f - i as f64 / n).max((i + 1) as f64 / n - f)
    })
}

/// Wasserstein-1 distance of two equal-size samples: mean gap of the sorted values.
pub fn wasserstein1(a: &EmpiricalSample, b: &EmpiricalSample) -> Result<f64, AnalysisError> {
    if a.len() != b.len() {
        return Err(AnalysisError::SizeMismatch(a.len(), b.len()));
    }
    let (xa, xb) = (a.sorted(), b.sorted());
    Ok(xa.iter().zip(&xb).map(|(p, q)| (p - q).abs()).sum::<f64>() / xa.len() as f64)
}

/// Asymptotic Kolmogorov tail `P(K > lambda)`.
pub fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Approximate p-value of a KS statistic `d` with effective sample size `n_eff`.
pub fn ks_pvalue(d: f64, n_eff: f64) -> f64 {
    let s = n_eff.sqrt();
    kolmogorov_tail((s + 0.12 + 0.11 / s) * d)
}

/// Effective size `n m / (n + m)` of a two-sample comparison.
pub fn effective_size(n: usize, m: usize) -> f64 {
    (n * m) as f64 / (n + m) as f64
}

/// Distances between two marginal samples at one probe.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceReport {
    pub ks: f64,
    pub wasserstein1: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub probe_t: f64,
}

impl DistanceReport {
    pub fn compare(a: &EmpiricalSample, b: &EmpiricalSample, probe_t: f64) -> Result<Self, AnalysisError> {
        Ok(Self {
            ks: ks_distance(a, b),
            wasserstein1: wasserstein1(a, b)?,
            n_a: a.len(),
            n_b: b.len(),
            probe_t,
        })
    }
}
