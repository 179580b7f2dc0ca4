//! Finite-difference gradient verification.
//!
//! Rebuilds the computation from scratch for every probe, so it checks the
//! whole pipeline (values captured by backward closures included), not
//! just individual closures. Intended for tiny problem sizes in f64.

use ndarray::ArrayD;

use super::graph::{Graph, Tensor};
use super::Real;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub probes: usize,
}

/// Compare analytic gradients of `build`'s scalar output against centered
/// finite differences, probing every element of every parameter.
///
/// The relative error denominator is floored at 1e-4 so elements whose
/// true gradient is essentially zero are judged by absolute error instead
/// of noise ratios.
pub fn finite_diff_check<T: Real>(
    params: &[ArrayD<T>],
    build: &dyn Fn(&mut Graph<T>, &[Tensor]) -> Tensor,
    step: f64,
) -> GradCheckReport {
    // Analytic pass.
    let mut g = Graph::<T>::new();
    let leaves: Vec<Tensor> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let loss = build(&mut g, &leaves);
    g.backward(loss);
    let analytic: Vec<ArrayD<T>> = leaves
        .iter()
        .zip(params.iter())
        .map(|(t, p)| {
            g.grad(*t)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(p.raw_dim()))
        })
        .collect();

    let eval = |probe: &[ArrayD<T>]| -> f64 {
        let mut g = Graph::<T>::new();
        let leaves: Vec<Tensor> = probe.iter().map(|p| g.leaf(p.clone())).collect();
        let loss = build(&mut g, &leaves);
        g.scalar_value(loss).as_f64()
    };

    let mut report = GradCheckReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        probes: 0,
    };
    let mut work: Vec<ArrayD<T>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for (flat, x) in p.iter().enumerate() {
            let h = step * x.as_f64().abs().max(1.0);
            {
                let slot = work[pi].iter_mut().nth(flat).unwrap();
                *slot = T::of_f64(x.as_f64() + h);
            }
            let up = eval(&work);
            {
                let slot = work[pi].iter_mut().nth(flat).unwrap();
                *slot = T::of_f64(x.as_f64() - h);
            }
            let down = eval(&work);
            {
                let slot = work[pi].iter_mut().nth(flat).unwrap();
                *slot = *x;
            }
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi].iter().nth(flat).unwrap().as_f64();
            let abs_err = (a - numeric).abs();
            let rel_err = abs_err / a.abs().max(numeric.abs()).max(1e-4);
            report.max_abs_err = report.max_abs_err.max(abs_err);
            report.max_rel_err = report.max_rel_err.max(rel_err);
            report.probes += 1;
        }
    }
    report
}
