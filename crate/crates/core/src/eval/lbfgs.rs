//! Limited-memory BFGS with a backtracking Armijo line search.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LbfgsConfig {
    pub max_iters: usize,
    pub history: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    pub max_backtracks: usize,
    /// Length of the very first (steepest-descent) step.
    pub initial_step: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            history: 10,
            c1: 1e-4,
            max_backtracks: 30,
            initial_step: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub initial: f64,
    pub value: f64,
    /// Objective after each executed iteration.
    pub trace: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f`, which returns the objective and its gradient.
///
/// Stops after `max_iters` iterations, or earlier when the gradient vanishes or no
/// step along the search direction decreases the objective. Fails with
/// [`Error::Numerical`] if the starting point is not finite.
pub fn minimize(
    mut f: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    x0: &[f64],
    cfg: &LbfgsConfig,
) -> Result<LbfgsResult> {
    if cfg.max_iters == 0 {
        return Err(Error::Validation(
            "L-BFGS needs at least one iteration".into(),
        ));
    }
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x)?;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "objective {fx} at the starting point"
        )));
    }
    let initial = fx;
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut trace = Vec::with_capacity(cfg.max_iters);
    for _ in 0..cfg.max_iters {
        let gnorm = dot(&g, &g).sqrt();
        if gnorm < 1e-12 {
            trace.push(fx);
            break;
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = match pairs.back() {
            Some((s, y, _)) => dot(s, y) / dot(y, y),
            None => cfg.initial_step / gnorm,
        };
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut d: Vec<f64> = q.into_iter().map(|v| -v).collect();
        let mut slope = dot(&g, &d);
        if slope.is_nan() || slope >= 0.0 {
            pairs.clear();
            d = g.iter().map(|v| -v * cfg.initial_step / gnorm).collect();
            slope = dot(&g, &d);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.max_backtracks {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            let (fnew, gnew) = f(&xn)?;
            if fnew.is_finite()
                && gnew.iter().all(|v| v.is_finite())
                && fnew <= fx + cfg.c1 * step * slope
            {
                accepted = Some((xn, fnew, gnew));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            trace.push(fx);
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            if pairs.len() == cfg.history {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        x = xn;
        fx = fnew;
        g = gnew;
        trace.push(fx);
    }
    Ok(LbfgsResult {
        x,
        initial,
        value: fx,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock_converges() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ];
            Ok((v, g))
        };
        let r = minimize(f, &[-1.2, 1.0], &LbfgsConfig::default()).unwrap();
        assert!(r.value < 1e-8, "{}", r.value);
        assert!((r.x[0] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn one_iteration_gives_one_trace_entry() {
        let f = |x: &[f64]| Ok((x[0] * x[0], vec![2.0 * x[0]]));
        let r = minimize(
            f,
            &[3.0],
            &LbfgsConfig {
                max_iters: 1,
                ..LbfgsConfig::default()
            },
        )
        .unwrap();
        assert_eq!(r.trace.len(), 1);
        assert!(r.value < r.initial);
    }

    #[test]
    fn non_finite_start_is_numerical_error() {
        let f = |_: &[f64]| Ok((f64::NAN, vec![0.0]));
        assert!(matches!(
            minimize(f, &[0.0], &LbfgsConfig::default()),
            Err(Error::Numerical(_))
        ));
    }
}
