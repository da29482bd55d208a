//! Central finite-difference checking of tape gradients.
//!
//! The builder must be deterministic: it is re-run twice per probed element
//! and a builder that depends on hidden state gives meaningless numbers.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Which elements of each parameter tensor are probed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Probe {
    All,
    /// At most this many elements per tensor, evenly strided and always
    /// including the first and last element.
    PerTensor(usize),
}

impl Probe {
    fn indices(self, len: usize) -> Vec<usize> {
        match self {
            Probe::All => (0..len).collect(),
            Probe::PerTensor(n) if n >= len => (0..len).collect(),
            Probe::PerTensor(0) => vec![],
            Probe::PerTensor(1) => vec![0],
            Probe::PerTensor(n) => {
                let mut idx: Vec<usize> = (0..n).map(|i| i * (len - 1) / (n - 1)).collect();
                idx.dedup();
                idx
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor, element)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: None,
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        }
    }

    /// Adds one compared element, keeping the worst one.
    pub fn record(&mut self, tensor: usize, element: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = err;
            self.worst = Some((tensor, element));
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// `sum((plus - target)^2) - sum((minus - target)^2)` evaluated elementwise
/// as `(plus - minus) * (plus + minus - 2 target)`, so two large totals are
/// never subtracted.
pub fn sse_difference(plus: &[f64], minus: &[f64], target: &[f64]) -> f64 {
    plus.iter()
        .zip(minus)
        .zip(target)
        .map(|((p, m), t)| (p - m) * (p + m - 2.0 * t))
        .sum()
}

fn evaluate<F>(builder: &F, params: &[Tensor]) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let out = builder(&mut tape, &vars)?;
    Ok(tape.value(out).data().to_vec())
}

/// Compares reverse-mode gradients of `sum((builder(params) - target)^2)`
/// against central differences `(L(p + eps) - L(p - eps)) / (2 eps)` for
/// every probed element of every tensor in `params`.
pub fn grad_check<F>(builder: F, params: &[Tensor], target: &Tensor, eps: f64, probe: Probe) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let out = builder(&mut tape, &vars)?;
    let t = tape.constant(target.clone());
    let loss = tape.sum_squared_error(out, t)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.get_or_zero(v)).collect();
    drop(tape);

    let mut work = params.to_vec();
    let mut report = GradCheckReport::new();
    for (t, param) in params.iter().enumerate() {
        for e in probe.indices(param.numel()) {
            let orig = param.data()[e];
            work[t].data_mut()[e] = orig + eps;
            let plus = evaluate(&builder, &work)?;
            work[t].data_mut()[e] = orig - eps;
            let minus = evaluate(&builder, &work)?;
            work[t].data_mut()[e] = orig;

            let numeric = sse_difference(&plus, &minus, target.data()) / (2.0 * eps);
            report.record(t, e, analytic[t][e], numeric);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_indices_cover_ends() {
        assert_eq!(Probe::PerTensor(3).indices(10), vec![0, 4, 9]);
        assert_eq!(Probe::PerTensor(20).indices(4), vec![0, 1, 2, 3]);
        assert_eq!(Probe::All.indices(2), vec![0, 1]);
    }

    #[test]
    fn stable_difference_matches_naive() {
        let (p, m, t) = ([1.5, -2.0], [1.25, -2.5], [0.5, 1.0]);
        let naive: f64 = p.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            - m.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        assert!((sse_difference(&p, &m, &t) - naive).abs() < 1e-12);
    }

    #[test]
    fn linear_graph_is_exact() {
        let x = Tensor::from_fn(&[5], |i| i as f64 * 0.3 - 0.5);
        let target = Tensor::from_fn(&[5], |i| i as f64);
        let report = grad_check(|tape, v| tape.scale(v[0], 3.0), &[x], &target, 1e-6, Probe::All).unwrap();
        assert!(report.max_rel_error < 1e-10, "{report:?}");
        assert_eq!(report.checked, 5);
    }
}
