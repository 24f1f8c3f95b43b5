//! Gradient plumbing: named parameter storage, the [`Objective`] contract,
//! and a central-difference checker used to verify analytic gradients.
//!
//! Two differentiation routes live here. [`tape`] is a scalar reverse-mode
//! tape for small closures; the render pipeline implements [`Objective`]
//! directly with batched, hand-derived backward passes. Both are verified
//! the same way, against [`finite_difference_check`].

pub mod tape;

use crate::error::{Error, Result};
use crate::real::Real;

pub use tape::{Tape, TapeObjective, Var};

/// Named flat parameter arrays, kept in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<(String, Vec<T>)>,
}

/// Gradients share the parameter layout.
pub type GradStore<T> = ParamStore<T>;

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, values: Vec<T>) -> Result<()> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.entries.push((name, values));
        Ok(())
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.index_of(name).map(|i| self.entries[i].1.as_slice())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<T>> {
        self.index_of(name).map(move |i| &mut self.entries[i].1)
    }

    /// Like [`get`](Self::get) but panics on unknown names; for internal
    /// lookups of names this crate created itself.
    pub fn expect(&self, name: &str) -> &[T] {
        self.get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} missing from store"))
    }

    pub fn expect_mut(&mut self, name: &str) -> &mut Vec<T> {
        self.get_mut(name)
            .unwrap_or_else(|| panic!("parameter {name:?} missing from store"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v.as_slice()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Vec<T>)> {
        self.entries.iter_mut().map(|(n, v)| (n.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    /// Same names, same order, zero-filled.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, v)| (n.clone(), vec![T::zero(); v.len()]))
                .collect(),
        }
    }

    pub fn same_layout<U>(&self, other: &ParamStore<U>) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, va), (b, vb))| a == b && va.len() == vb.len())
    }

    /// Name of the first array holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
            .map(|(n, _)| n.as_str())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, v)| {
                    (
                        n.clone(),
                        v.iter().map(|x| U::from_f64(x.as_f64())).collect(),
                    )
                })
                .collect(),
        }
    }

    /// `self += scale * other`, layouts must match.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        debug_assert!(self.same_layout(other));
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            for (x, y) in a.iter_mut().zip(b) {
                *x = *x + scale * *y;
            }
        }
    }
}

/// A scalar loss over a [`ParamStore`] that can also produce its gradient.
pub trait Objective<T: Real> {
    fn loss(&self, params: &ParamStore<T>) -> Result<T>;

    fn loss_and_grads(&self, params: &ParamStore<T>) -> Result<(T, GradStore<T>)>;
}

/// Evaluates `pipeline` and validates the result: finite loss, finite
/// gradients, and a gradient layout identical to `params`.
pub fn eval_loss_and_grads<T: Real, O: Objective<T> + ?Sized>(
    pipeline: &O,
    params: &ParamStore<T>,
) -> Result<(T, GradStore<T>)> {
    let (loss, grads) = pipeline.loss_and_grads(params)?;
    if !loss.is_finite() {
        return Err(Error::non_finite("loss"));
    }
    if !grads.same_layout(params) {
        return Err(Error::shape(
            "gradient layout differs from parameter layout",
        ));
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::non_finite(format!("gradient of {name}")));
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    /// Worst error per parameter array, in store order.
    pub per_param: Vec<(String, f64)>,
}

/// Compares analytic gradients with central differences for every scalar
/// parameter. The error for one entry is
/// `|analytic - numeric| / max(1, |numeric|)`.
///
/// Points where the pipeline is not differentiable (a ReLU input exactly at
/// zero) give meaningless comparisons; callers perturb inputs off such kinks.
pub fn finite_difference_check<T: Real, O: Objective<T> + ?Sized>(
    pipeline: &O,
    params: &ParamStore<T>,
    epsilon: f64,
) -> Result<FdReport> {
    if !(epsilon > 0.0) {
        return Err(Error::domain("epsilon must be positive"));
    }
    let (_, grads) = eval_loss_and_grads(pipeline, params)?;
    let eps = T::from_f64(epsilon);
    let mut probe = params.clone();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        per_param: Vec::new(),
    };
    for (slot, (name, values)) in params.entries.iter().enumerate() {
        let mut worst = 0.0f64;
        for i in 0..values.len() {
            let orig = values[i];
            probe.entries[slot].1[i] = orig + eps;
            let plus = pipeline.loss(&probe)?.as_f64();
            probe.entries[slot].1[i] = orig - eps;
            let minus = pipeline.loss(&probe)?.as_f64();
            probe.entries[slot].1[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let analytic = grads.entries[slot].1[i].as_f64();
            let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
        report.per_param.push((name.clone(), worst));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_store(w: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("w", vec![w]).unwrap();
        p
    }

    #[test]
    fn square() {
        let f = TapeObjective::new(|t: &mut Tape<f64>, p: &[Vec<Var>]| t.mul(p[0][0], p[0][0]));
        let (loss, g) = eval_loss_and_grads(&f, &scalar_store(3.0)).unwrap();
        assert_eq!(loss, 9.0);
        assert_eq!(g.expect("w"), &[6.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let f = TapeObjective::new(|t: &mut Tape<f64>, p: &[Vec<Var>]| t.sigmoid(p[0][0]));
        let (loss, g) = eval_loss_and_grads(&f, &scalar_store(0.0)).unwrap();
        assert_eq!(loss, 0.5);
        assert_eq!(g.expect("w"), &[0.25]);
    }

    #[test]
    fn linear_pipeline_is_exact_under_fd() {
        let mut p = ParamStore::new();
        p.insert("a", vec![0.3, -1.2, 2.0]).unwrap();
        p.insert("b", vec![0.7]).unwrap();
        let f = TapeObjective::new(|t: &mut Tape<f64>, p: &[Vec<Var>]| {
            let coeffs = [1.5, -2.0, 0.25];
            let terms: Vec<Var> = p[0]
                .iter()
                .zip(coeffs)
                .map(|(&v, c)| t.scale(v, c))
                .collect();
            let s = t.sum(&terms);
            let b = t.scale(p[1][0], 4.0);
            t.add(s, b)
        });
        let report = finite_difference_check(&f, &p, 1e-4).unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn relu_kink_is_excluded_by_perturbing() {
        // At exactly zero the subgradient is 0 while central differences give
        // 0.5; moving the input off the kink restores agreement.
        let f = TapeObjective::new(|t: &mut Tape<f64>, p: &[Vec<Var>]| t.relu(p[0][0]));
        let at_kink = finite_difference_check(&f, &scalar_store(0.0), 1e-4).unwrap();
        assert_abs_diff_eq!(at_kink.max_rel_error, 0.5, epsilon = 1e-9);
        let off = finite_difference_check(&f, &scalar_store(1e-2), 1e-4).unwrap();
        assert!(off.max_rel_error < 1e-9);
    }

    #[test]
    fn non_finite_intermediate_names_the_op() {
        let f = TapeObjective::new(|t: &mut Tape<f64>, p: &[Vec<Var>]| t.ln(p[0][0]));
        let err = eval_loss_and_grads(&f, &scalar_store(-1.0)).unwrap_err();
        match err {
            Error::NonFinite { op } => assert!(op.contains("ln"), "{op}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = scalar_store(1.0);
        assert!(p.insert("w", vec![2.0]).is_err());
    }
}
