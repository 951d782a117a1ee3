//! Parallel ensembles with results keyed by trajectory index.

use rayon::prelude::*;

use crate::rng::{stream, SimRng};

/// Guard outcomes of a single run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GuardFlags {
    /// The state left the radius guard.
    pub truncated: bool,
    pub jump_cap_hit: bool,
}

impl GuardFlags {
    pub fn aborted(&self) -> bool {
        self.truncated || self.jump_cap_hit
    }
}

/// Records the state at a sorted list of probe times along a right-continuous path.
#[derive(Debug, Clone)]
pub struct ProbeRecorder {
    probes: Vec<f64>,
    rows: Vec<Vec<f64>>,
}

impl ProbeRecorder {
    pub fn new(probes: &[f64]) -> Self {
        Self {
            probes: probes.to_vec(),
            rows: Vec::with_capacity(probes.len()),
        }
    }

    /// Time of the next probe still to be recorded.
    pub fn next_probe(&self) -> Option<f64> {
        self.probes.get(self.rows.len()).copied()
    }

    /// `state` holds on `[.., t)`: records every pending probe strictly before `t`.
    pub fn before(&mut self, t: f64, state: &[f64]) {
        while let Some(p) = self.next_probe() {
            if p < t {
                self.rows.push(state.to_vec());
            } else {
                break;
            }
        }
    }

    /// `state` holds at `t` itself: records every pending probe at or before `t`.
    pub fn at(&mut self, t: f64, state: &[f64]) {
        while let Some(p) = self.next_probe() {
            if p <= t {
                self.rows.push(state.to_vec());
            } else {
                break;
            }
        }
    }

    /// Fills any probes left unrecorded (after a guard abort) with the last state.
    pub fn finish(mut self, state: &[f64]) -> Vec<Vec<f64>> {
        while self.rows.len() < self.probes.len() {
            self.rows.push(state.to_vec());
        }
        self.rows
    }
}

/// Per-probe sample matrices of an ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeEnsemble {
    pub probes: Vec<f64>,
    pub columns: Vec<String>,
    /// `samples[probe][trajectory][column]`.
    pub samples: Vec<Vec<Vec<f64>>>,
    pub truncated: usize,
    pub jump_cap_hits: usize,
}

impl ProbeEnsemble {
    pub fn len(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// All trajectory values of `column` at probe number `probe`.
    pub fn column(&self, probe: usize, column: usize) -> Vec<f64> {
        self.samples[probe].iter().map(|row| row[column]).collect()
    }

    pub fn aborted_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        (self.truncated + self.jump_cap_hits) as f64 / self.len() as f64
    }

    /// Ensemble probe CSV: `probe_t,traj_index,<columns...>`.
    pub fn to_csv(&self) -> String {
        let mut out = format!("probe_t,traj_index,{}\n", self.columns.join(","));
        for (p, rows) in self.probes.iter().zip(&self.samples) {
            for (i, row) in rows.iter().enumerate() {
                out.push_str(&format!("{p},{i}"));
                for v in row {
                    out.push_str(&format!(",{v}"));
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Runs `f(i)` for `i in 0..m` on `workers` threads; output is ordered by index.
pub fn parallel_map<T, F>(m: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if workers <= 1 {
        return (0..m).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool");
    pool.install(|| (0..m).into_par_iter().map(&f).collect())
}

/// Runs `m` simulations at `probes`; trajectory `i` draws from stream `(master_seed, i)`.
///
/// `sim` fills the recorder and reports guard flags. The result does not depend
/// on `workers`.
pub fn run_ensemble<E, F>(
    columns: Vec<String>,
    probes: &[f64],
    m: usize,
    master_seed: u64,
    workers: usize,
    sim: F,
) -> Result<ProbeEnsemble, E>
where
    E: Send,
    F: Fn(&mut SimRng, &mut ProbeRecorder) -> Result<(GuardFlags, Vec<f64>), E> + Sync + Send,
{
    let runs = parallel_map(m, workers, |i| {
        let mut rng = stream(master_seed, i as u64);
        let mut rec = ProbeRecorder::new(probes);
        let (flags, last) = sim(&mut rng, &mut rec)?;
        Ok((flags, rec.finish(&last)))
    });
    let mut samples = vec![Vec::with_capacity(m); probes.len()];
    let mut truncated = 0;
    let mut jump_cap_hits = 0;
    for run in runs {
        let (flags, rows) = run?;
        truncated += flags.truncated as usize;
        jump_cap_hits += flags.jump_cap_hit as usize;
        for (p, row) in rows.into_iter().enumerate() {
            samples[p].push(row);
        }
    }
    Ok(ProbeEnsemble {
        probes: probes.to_vec(),
        columns,
        samples,
        truncated,
        jump_cap_hits,
    })
}
