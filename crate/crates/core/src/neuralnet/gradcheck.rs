//! Central finite-difference gradient checker.

use rayon::prelude::*;
use serde::Serialize;

use super::params::ParamSet;

/// Finite-difference step used by default.
pub const FD_STEP: f64 = 1e-4;

/// Lower bound on the relative-error denominator, so entries whose true
/// gradient is (numerically) zero are judged on absolute error instead.
pub const REL_DENOM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_DENOM_FLOOR)
}

/// Compares `analytic` with `(L(p + h) − L(p − h)) / 2h` for every parameter entry.
///
/// Probes are evaluated in parallel; `loss` must be pure.
pub fn grad_check<P, F>(
    params: &P,
    analytic: &P,
    loss: F,
    step: f64,
    tolerance: f64,
) -> GradCheckReport
where
    P: ParamSet + Sync,
    F: Fn(&P) -> f64 + Sync,
{
    let analytic_tensors = analytic.tensors();
    let mut tensors = Vec::new();
    for (k, t) in params.tensors().iter().enumerate() {
        let errors: Vec<f64> = (0..t.data.len())
            .into_par_iter()
            .map(|i| {
                let probe = |delta: f64| {
                    let mut p = params.clone();
                    p.tensors_mut()[k][i] += delta;
                    loss(&p)
                };
                let numeric = (probe(step) - probe(-step)) / (2.0 * step);
                relative_error(analytic_tensors[k].data[i], numeric)
            })
            .collect();
        let (worst_index, max_rel_error) = errors
            .iter()
            .cloned()
            .enumerate()
            .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
        tensors.push(TensorCheck {
            name: t.name.to_string(),
            entries: t.data.len(),
            max_rel_error,
            worst_index,
        });
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    GradCheckReport {
        tensors,
        max_rel_error,
        tolerance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::params::TensorRef;

    #[derive(Debug, Clone)]
    struct Quad(Vec<f64>);

    impl ParamSet for Quad {
        fn tensors(&self) -> Vec<TensorRef<'_>> {
            vec![TensorRef {
                name: "q",
                rows: self.0.len(),
                cols: 1,
                data: &self.0,
            }]
        }
        fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
    }

    fn loss(p: &Quad) -> f64 {
        p.0.iter()
            .enumerate()
            .map(|(i, x)| (i as f64 + 1.0) * x * x * x)
            .sum()
    }

    fn grad(p: &Quad) -> Quad {
        Quad(
            p.0.iter()
                .enumerate()
                .map(|(i, x)| 3.0 * (i as f64 + 1.0) * x * x)
                .collect(),
        )
    }

    #[test]
    fn exact_gradient_passes() {
        let p = Quad(vec![0.5, -1.0, 2.0]);
        let r = grad_check(&p, &grad(&p), loss, FD_STEP, 1e-4);
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn corrupted_gradient_fails() {
        let p = Quad(vec![0.5, -1.0, 2.0]);
        let mut g = grad(&p);
        g.0[1] += 1.0;
        let r = grad_check(&p, &g, loss, FD_STEP, 1e-4);
        assert!(!r.passed());
        assert_eq!(r.tensors[0].worst_index, 1);
    }
}
