//! Central finite-difference verification of [`Graph::backward`].

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{contract, Graph, ParamId, Result, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// An ordered set of named parameter values.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T> {
    entries: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, id: ParamId, value: Tensor<T>) {
        self.entries.push((id, value));
    }

    pub fn with(mut self, id: &str, value: Tensor<T>) -> Self {
        self.push(ParamId(id.to_string()), value);
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor<T>)> {
        self.entries.iter().map(|(id, t)| (id, t))
    }

    pub fn get(&self, id: &str) -> Option<&Tensor<T>> {
        self.entries
            .iter()
            .find(|(p, _)| p.as_str() == id)
            .map(|(_, t)| t)
    }

    pub fn tensor(&self, index: usize) -> &Tensor<T> {
        &self.entries[index].1
    }

    /// Registers every entry as a trainable leaf of `g`, in order.
    pub fn register(&self, g: &mut Graph<T>) -> Result<Vec<Var>> {
        self.entries
            .iter()
            .map(|(id, t)| g.param(id.clone(), t.clone()))
            .collect()
    }

    fn entry_mut(&mut self, index: usize) -> &mut Tensor<T> {
        &mut self.entries[index].1
    }
}

/// Finite-difference settings. `max_entries_per_param` limits the check to
/// a seeded random subset of each parameter's entries.
///
/// `zero_floor` is off (0) by default. When set, an entry whose analytic and
/// numeric derivatives are both below it in magnitude is treated as a zero
/// derivative: the relative error between two rounding residues carries no
/// information, so such entries are checked as `|analytic − numeric| ≤
/// zero_floor` and counted in [`GradCheckReport::zero_entries`] instead.
/// [`GradCheck::noise_floor`] gives a floor matched to the step and loss.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub eps: f64,
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
    pub zero_floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-5,
            max_entries_per_param: None,
            seed: 0,
            zero_floor: 0.0,
        }
    }
}

impl GradCheck {
    /// Resolution of a central difference with step `eps` on a loss of
    /// magnitude `loss`, in 64-bit arithmetic, with a safety factor of 100.
    pub fn noise_floor(eps: f64, loss: f64) -> f64 {
        100.0 * f64::EPSILON * loss.abs().max(1.0) / eps
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter and flat index of the worst entry.
    pub worst: Option<(ParamId, usize)>,
    /// Analytic and numeric derivative at the worst entry.
    pub worst_values: Option<(f64, f64)>,
    pub entries_checked: usize,
    /// Entries handled by the `zero_floor` rule.
    pub zero_entries: usize,
    /// Largest `|analytic − numeric|` among those entries.
    pub zero_max_abs_error: f64,
}

impl GradCheckReport {
    /// Relative bound on ordinary entries and, when enabled, the absolute
    /// bound on zero-derivative entries.
    pub fn passes(&self, tolerance: f64, zero_floor: f64) -> bool {
        self.max_relative_error <= tolerance && self.zero_max_abs_error <= zero_floor
    }
}

/// Checks every entry of every parameter; returns the maximum relative error
/// `|analytic − numeric| / max(1e-12, |analytic| + |numeric|)`.
pub fn grad_check<T, F>(f: F, params: &ParamSet<T>, eps: f64) -> Result<f64>
where
    T: Real,
    F: FnMut(&mut Graph<T>, &ParamSet<T>) -> Result<Var>,
{
    Ok(GradCheck {
        eps,
        ..GradCheck::default()
    }
    .run(f, params)?
    .max_relative_error)
}

impl GradCheck {
    /// `f` must build a scalar expression, registering the parameters it
    /// differentiates through [`ParamSet::register`] (or [`Graph::param`]
    /// with the same ids).
    pub fn run<T, F>(&self, mut f: F, params: &ParamSet<T>) -> Result<GradCheckReport>
    where
        T: Real,
        F: FnMut(&mut Graph<T>, &ParamSet<T>) -> Result<Var>,
    {
        if self.eps.is_nan() || self.eps <= 0.0 {
            return contract(format!(
                "grad_check: step must be positive, got {}",
                self.eps
            ));
        }
        let mut g = Graph::with_strict(true);
        let loss = f(&mut g, params)?;
        let analytic = g.backward(loss)?;

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut work = params.clone();
        let mut report = GradCheckReport {
            max_relative_error: 0.0,
            worst: None,
            worst_values: None,
            entries_checked: 0,
            zero_entries: 0,
            zero_max_abs_error: 0.0,
        };
        for p in 0..params.len() {
            let (id, value) = (&params.entries[p].0, &params.entries[p].1);
            let grad = analytic.get(id);
            let picks: Vec<usize> = match self.max_entries_per_param {
                Some(k) if k < value.len() => {
                    let mut v = index::sample(&mut rng, value.len(), k).into_vec();
                    v.sort_unstable();
                    v
                }
                _ => (0..value.len()).collect(),
            };
            for idx in picks {
                let original = value.data()[idx];
                work.entry_mut(p).data_mut()[idx] = original + T::c(self.eps);
                let plus = evaluate(&mut f, &work)?;
                work.entry_mut(p).data_mut()[idx] = original - T::c(self.eps);
                let minus = evaluate(&mut f, &work)?;
                work.entry_mut(p).data_mut()[idx] = original;

                let numeric = (plus - minus) / (2.0 * self.eps);
                let exact = grad.map_or(0.0, |t| t.data()[idx].as_f64());
                report.entries_checked += 1;
                if exact.abs() < self.zero_floor && numeric.abs() < self.zero_floor {
                    report.zero_entries += 1;
                    report.zero_max_abs_error =
                        report.zero_max_abs_error.max((exact - numeric).abs());
                    continue;
                }
                let rel = (exact - numeric).abs() / (exact.abs() + numeric.abs()).max(1e-12);
                if rel > report.max_relative_error || report.worst.is_none() {
                    report.max_relative_error = rel.max(report.max_relative_error);
                    report.worst = Some((id.clone(), idx));
                    report.worst_values = Some((exact, numeric));
                }
            }
        }
        Ok(report)
    }
}

fn evaluate<T, F>(f: &mut F, params: &ParamSet<T>) -> Result<f64>
where
    T: Real,
    F: FnMut(&mut Graph<T>, &ParamSet<T>) -> Result<Var>,
{
    let mut g = Graph::with_strict(true);
    let out = f(&mut g, params)?;
    match g.value(out)?.item() {
        Some(v) => Ok(v.as_f64()),
        None => contract(format!(
            "grad_check: function is not scalar, shape {:?}",
            g.shape(out)?
        )),
    }
}
