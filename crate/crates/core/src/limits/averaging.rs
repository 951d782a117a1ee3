//! Averaging over a finite fast discrete block.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

use super::LimitError;
use crate::model::{ClassifiedModel, ReactionClass, Regime};
use crate::pdp::StateFn;

/// Stationary law of a finite generator matrix `q` (rows sum to zero).
///
/// Requires a single closed communicating class; transient states get mass zero.
pub fn stationary_distribution(q: &DMatrix<f64>) -> Result<Vec<f64>, LimitError> {
    let n = q.nrows();
    if n == 0 || q.ncols() != n {
        return Err(LimitError::Generator("generator must be square and non-empty".into()));
    }
    for i in 0..n {
        let mut sum = 0.0;
        let mut scale = 0.0f64;
        for j in 0..n {
            let v = q[(i, j)];
            if !v.is_finite() || (i != j && v < 0.0) {
                return Err(LimitError::Generator(format!("invalid entry {v} at ({i}, {j})")));
            }
            sum += v;
            scale = scale.max(v.abs());
        }
        if sum.abs() > 1e-12 * scale.max(1.0) {
            return Err(LimitError::Generator(format!("row {i} sums to {sum}")));
        }
    }
    let closed = closed_classes(q);
    if closed.len() != 1 {
        return Err(LimitError::NotErgodic { classes: closed });
    }

    // Solve q^T nu = 0 with the last equation replaced by sum(nu) = 1.
    let mut a = q.transpose();
    let mut b = DVector::zeros(n);
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    b[n - 1] = 1.0;
    let nu = a.lu().solve(&b).ok_or(LimitError::Singular)?;
    let total: f64 = nu.iter().sum();
    Ok(nu.iter().map(|v| v / total).collect())
}

/// Closed communicating classes of the jump graph of `q`, each sorted.
fn closed_classes(q: &DMatrix<f64>) -> Vec<Vec<usize>> {
    let n = q.nrows();
    let reach: Vec<BTreeSet<usize>> = (0..n)
        .map(|start| {
            let mut seen = BTreeSet::from([start]);
            let mut stack = vec![start];
            while let Some(i) = stack.pop() {
                for j in 0..n {
                    if i != j && q[(i, j)] > 0.0 && seen.insert(j) {
                        stack.push(j);
                    }
                }
            }
            seen
        })
        .collect();
    let mut classes: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        // i is recurrent iff everything it reaches leads back to it.
        if reach[i].iter().all(|&j| reach[j].contains(&i)) {
            let class: Vec<usize> = reach[i].iter().copied().collect();
            if !classes.contains(&class) {
                classes.push(class);
            }
        }
    }
    classes
}

/// Solves `q h = g` with `sum(nu * h) = 0` for a nu-centered `g`.
pub fn solve_poisson(q: &DMatrix<f64>, g: &[f64]) -> Result<Vec<f64>, LimitError> {
    let n = q.nrows();
    if g.len() != n {
        return Err(LimitError::Generator(format!(
            "right-hand side has {} entries for {n} states",
            g.len()
        )));
    }
    let nu = stationary_distribution(q)?;
    let g_norm = g.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let mean: f64 = nu.iter().zip(g).map(|(p, v)| p * v).sum();
    if mean.abs() > 1e-12 * g_norm {
        return Err(LimitError::NotCentered { mean });
    }

    // Bordered system [[q, 1], [nu^T, 0]] (h, c) = (g, 0).
    let mut a = DMatrix::zeros(n + 1, n + 1);
    let mut b = DVector::zeros(n + 1);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = q[(i, j)];
        }
        a[(i, n)] = 1.0;
        a[(n, i)] = nu[i];
        b[i] = g[i];
    }
    let sol = a.lu().solve(&b).ok_or(LimitError::Singular)?;
    let h: Vec<f64> = sol.iter().take(n).copied().collect();

    let residual = (0..n)
        .map(|i| ((0..n).map(|j| q[(i, j)] * h[j]).sum::<f64>() - g[i]).abs())
        .fold(0.0f64, f64::max);
    if residual > 1e-10 * g_norm {
        return Err(LimitError::Residual(residual));
    }
    Ok(h)
}

/// The frozen fast chain of a regime-C model.
#[derive(Debug, Clone)]
pub struct FastBlockSpec {
    /// Fast species indices.
    pub species: Vec<usize>,
    /// Enumerated fast states, lexicographic in declaration order.
    pub states: Vec<Vec<i64>>,
    /// S1 reactions that move the fast block.
    movers: Vec<usize>,
    /// True when no mover rate reads a continuous species.
    discrete_only: bool,
}

impl FastBlockSpec {
    pub fn new(classified: &ClassifiedModel) -> Result<Self, LimitError> {
        if classified.regime != Regime::C {
            return Err(LimitError::WrongRegime {
                expected: Regime::C,
                got: classified.regime,
            });
        }
        let species = classified.fast_block.clone();
        let mut states: Vec<Vec<i64>> = vec![Vec::new()];
        for &s in &species {
            let (lo, hi) = classified.model.species[s]
                .fast_range
                .expect("fast block species carry a range");
            states = states
                .into_iter()
                .flat_map(|prefix| {
                    (lo..=hi).map(move |v| {
                        let mut p = prefix.clone();
                        p.push(v);
                        p
                    })
                })
                .collect();
        }
        let movers = classified
            .reactions_in(ReactionClass::S1)
            .filter(|&r| species.iter().any(|&s| classified.model.reactions[r].delta_of(s) != 0))
            .collect::<Vec<_>>();
        let discrete_only = movers.iter().all(|&r| {
            classified.model.reactions[r]
                .reads()
                .iter()
                .all(|s| !classified.continuous.contains(s))
        });
        Ok(Self {
            species,
            states,
            movers,
            discrete_only,
        })
    }

    /// Whether the invariant law depends on the slow discrete state only.
    pub fn discrete_only(&self) -> bool {
        self.discrete_only
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    fn state_index(&self, state: &[i64]) -> Option<usize> {
        self.states.iter().position(|s| s == state)
    }

    /// Writes fast state `k` into the full state vector `x`.
    pub fn fill(&self, k: usize, x: &mut [f64]) {
        for (&s, &v) in self.species.iter().zip(&self.states[k]) {
            x[s] = v as f64;
        }
    }

    /// Generator of the fast chain with the slow part of `x` frozen.
    pub fn generator_at(&self, classified: &ClassifiedModel, x: &[f64]) -> Result<DMatrix<f64>, LimitError> {
        let n = self.len();
        let mut q = DMatrix::zeros(n, n);
        let mut xk = x.to_vec();
        for i in 0..n {
            self.fill(i, &mut xk);
            for &r in &self.movers {
                let reaction = &classified.model.reactions[r];
                let rate = eval_rate(classified, r, &xk)?;
                if rate == 0.0 {
                    continue;
                }
                let target: Vec<i64> = self
                    .species
                    .iter()
                    .zip(&self.states[i])
                    .map(|(&s, &v)| v + reaction.delta_of(s))
                    .collect();
                let j = self.state_index(&target).ok_or_else(|| LimitError::LeavesFastBlock {
                    reaction: reaction.name.clone(),
                    state: self.states[i].clone(),
                })?;
                q[(i, j)] += rate;
                q[(i, i)] -= rate;
            }
        }
        Ok(q)
    }
}

/// Scaled rate of reaction `r` at `x`, rejecting negative or non-finite values.
pub(crate) fn eval_rate(classified: &ClassifiedModel, r: usize, x: &[f64]) -> Result<f64, LimitError> {
    let reaction = &classified.model.reactions[r];
    let v = reaction.eval(x).map_err(|e| LimitError::Rate {
        reaction: reaction.name.clone(),
        msg: e.to_string(),
    })?;
    if !(v >= 0.0) {
        return Err(LimitError::Rate {
            reaction: reaction.name.clone(),
            msg: format!("rate {v} at state {x:?}"),
        });
    }
    Ok(v)
}

/// Invariant law of the fast block and averaged rates at one slow state.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedRates {
    pub states: Vec<Vec<i64>>,
    pub nu: Vec<f64>,
    /// Averaged rate per reaction; `None` for R_C reactions, which are not averaged.
    pub rates: Vec<Option<f64>>,
}

/// Averages S1, R_DC_slow and R_D rates against the fast invariant law at `x`.
///
/// `x` is a full state vector; its fast-block entries are ignored.
pub fn averaged_rates_at(
    classified: &ClassifiedModel,
    fast: &FastBlockSpec,
    x: &[f64],
) -> Result<AveragedRates, LimitError> {
    let q = fast.generator_at(classified, x)?;
    let nu = stationary_distribution(&q)?;
    averaged_rates_with(classified, fast, x, nu)
}

/// Averaged rates at `x` under a given invariant law `nu` of the fast block.
pub(crate) fn averaged_rates_with(
    classified: &ClassifiedModel,
    fast: &FastBlockSpec,
    x: &[f64],
    nu: Vec<f64>,
) -> Result<AveragedRates, LimitError> {
    let mut rates = vec![None; classified.model.reactions.len()];
    let mut xk = x.to_vec();
    for (r, slot) in rates.iter_mut().enumerate() {
        if classified.class(r) == ReactionClass::RC {
            continue;
        }
        let mut acc = 0.0;
        for (k, p) in nu.iter().enumerate() {
            if *p == 0.0 {
                continue;
            }
            fast.fill(k, &mut xk);
            acc += p * eval_rate(classified, r, &xk)?;
        }
        *slot = Some(acc);
    }
    Ok(AveragedRates {
        states: fast.states.clone(),
        nu,
        rates,
    })
}

/// Averaged rates at continuous values `x_c` and slow discrete values `x_d1`.
pub fn averaged_rates(classified: &ClassifiedModel, x_c: &[f64], x_d1: &[i64]) -> Result<AveragedRates, LimitError> {
    let fast = FastBlockSpec::new(classified)?;
    let x = full_state(classified, x_c, x_d1)?;
    averaged_rates_at(classified, &fast, &x)
}

/// Full state vector from continuous and slow discrete components (fast block zeroed).
pub(crate) fn full_state(classified: &ClassifiedModel, x_c: &[f64], x_d1: &[i64]) -> Result<Vec<f64>, LimitError> {
    if x_c.len() != classified.continuous.len() || x_d1.len() != classified.slow_discrete.len() {
        return Err(LimitError::StateSize {
            continuous: classified.continuous.len(),
            discrete: classified.slow_discrete.len(),
        });
    }
    let mut x = vec![0.0; classified.model.species.len()];
    for (&s, &v) in classified.continuous.iter().zip(x_c) {
        x[s] = v;
    }
    for (&s, &v) in classified.slow_discrete.iter().zip(x_d1) {
        x[s] = v as f64;
    }
    Ok(x)
}

/// A test function on `(x_c, x_d1)` with an optional analytic gradient in `x_c`.
pub struct SlowFunction<'a> {
    pub f: &'a StateFn<'a>,
    pub grad: Option<&'a GradientFn<'a>>,
}

/// Gradient in the continuous coordinates.
pub type GradientFn<'a> = dyn Fn(&[f64], &[i64]) -> Vec<f64> + 'a;

impl SlowFunction<'_> {
    fn gradient(&self, x_c: &[f64], x_d1: &[i64]) -> Vec<f64> {
        if let Some(g) = self.grad {
            return g(x_c, x_d1);
        }
        let h = 1e-6;
        let mut y = x_c.to_vec();
        (0..x_c.len())
            .map(|i| {
                y[i] = x_c[i] + h;
                let up = (self.f)(&y, x_d1);
                y[i] = x_c[i] - h;
                let down = (self.f)(&y, x_d1);
                y[i] = x_c[i];
                (up - down) / (2.0 * h)
            })
            .collect()
    }
}

/// The averaging defect `g` over the fast states at slow state `(x_c, x_d1)`.
///
/// `g(k)` collects the S1 drift mismatch against `grad f` plus the jump-rate
/// mismatches of R_DC_slow and R_D reactions; it is nu-centered by construction.
pub fn averaging_defect(
    f: &SlowFunction<'_>,
    classified: &ClassifiedModel,
    x_c: &[f64],
    x_d1: &[i64],
) -> Result<(AveragedRates, Vec<f64>), LimitError> {
    let avg = averaged_rates(classified, x_c, x_d1)?;
    let fast = FastBlockSpec::new(classified)?;
    let x = full_state(classified, x_c, x_d1)?;
    let grad = f.gradient(x_c, x_d1);
    let f0 = (f.f)(x_c, x_d1);

    let mut g = vec![0.0; fast.len()];
    let mut xk = x.clone();
    for (k, gk) in g.iter_mut().enumerate() {
        fast.fill(k, &mut xk);
        for (r, reaction) in classified.model.reactions.iter().enumerate() {
            let Some(bar) = avg.rates[r] else { continue };
            let rate = eval_rate(classified, r, &xk)?;
            match classified.class(r) {
                ReactionClass::S1 => {
                    for (i, &s) in classified.continuous.iter().enumerate() {
                        let gamma = reaction.delta_of(s) as f64;
                        *gk += gamma * (bar - rate) * grad[i];
                    }
                }
                ReactionClass::RDCSlow | ReactionClass::RD => {
                    let shifted: Vec<i64> = classified
                        .slow_discrete
                        .iter()
                        .zip(x_d1)
                        .map(|(&s, &v)| v + reaction.delta_of(s))
                        .collect();
                    *gk += ((f.f)(x_c, &shifted) - f0) * (bar - rate);
                }
                _ => {}
            }
        }
    }
    let mean: f64 = avg.nu.iter().zip(&g).map(|(p, v)| p * v).sum();
    let scale = g.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if mean.abs() > 1e-10 * scale {
        return Err(LimitError::NotCentered { mean });
    }
    Ok((avg, g))
}
