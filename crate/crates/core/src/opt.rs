//! Gradient-based minimizers used to refine the guided posterior mean.
//!
//! Both optimizers are monotone: an iterate is only accepted if it does not
//! increase the objective, and the run stops once no acceptable step exists.

use ndarray::Array2;

const ARMIJO_C1: f64 = 1e-4;
const BACKTRACK_SHRINK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 24;
const MAX_EXPANSIONS: usize = 10;
const WOLFE_C2: f64 = 0.9;
const LBFGS_MEMORY: usize = 8;

fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Gradient descent with a fixed nominal step size. A step that would
/// increase the objective is halved a bounded number of times; if no
/// non-increasing step exists the run ends.
pub fn sgd_minimize(
    x0: Array2<f64>,
    iterations: usize,
    learning_rate: f64,
    mut objective: impl FnMut(&Array2<f64>) -> (f64, Array2<f64>),
) -> (Array2<f64>, Vec<f64>) {
    let mut x = x0;
    let (mut fx, mut grad) = objective(&x);
    let mut history = vec![fx];
    'outer: for _ in 0..iterations {
        let mut step = learning_rate;
        for _ in 0..MAX_BACKTRACKS {
            let candidate = &x - &(grad.mapv(|g| g * step));
            let (f_new, g_new) = objective(&candidate);
            if f_new.is_finite() && f_new <= fx {
                x = candidate;
                fx = f_new;
                grad = g_new;
                history.push(fx);
                continue 'outer;
            }
            step *= BACKTRACK_SHRINK;
        }
        break;
    }
    (x, history)
}

/// Limited-memory BFGS with Armijo backtracking. `learning_rate` is the
/// initial trial step length per iteration.
pub fn lbfgs_minimize(
    x0: Array2<f64>,
    iterations: usize,
    learning_rate: f64,
    mut objective: impl FnMut(&Array2<f64>) -> (f64, Array2<f64>),
) -> (Array2<f64>, Vec<f64>) {
    let mut x = x0;
    let (mut fx, mut grad) = objective(&x);
    let mut history = vec![fx];
    let mut s_hist: Vec<Array2<f64>> = Vec::new();
    let mut y_hist: Vec<Array2<f64>> = Vec::new();

    for _ in 0..iterations {
        let grad_norm_sq = dot(&grad, &grad);
        if grad_norm_sq == 0.0 {
            break;
        }

        // Two-loop recursion for the search direction.
        let mut q = grad.clone();
        let mut alphas = Vec::with_capacity(s_hist.len());
        for (s, y) in s_hist.iter().zip(&y_hist).rev() {
            let rho = 1.0 / dot(y, s);
            let alpha = rho * dot(s, &q);
            q = &q - &y.mapv(|v| v * alpha);
            alphas.push((alpha, rho));
        }
        if let (Some(s), Some(y)) = (s_hist.last(), y_hist.last()) {
            let gamma = dot(s, y) / dot(y, y);
            q.mapv_inplace(|v| v * gamma);
        }
        for ((s, y), (alpha, rho)) in s_hist.iter().zip(&y_hist).zip(alphas.iter().rev()) {
            let beta = rho * dot(y, &q);
            q = &q + &s.mapv(|v| v * (alpha - beta));
        }
        let mut direction = q.mapv(|v| -v);
        let mut slope = dot(&grad, &direction);
        if !slope.is_finite() || slope >= 0.0 {
            // Curvature information went bad; fall back to steepest descent.
            direction = grad.mapv(|g| -g);
            slope = -grad_norm_sq;
            s_hist.clear();
            y_hist.clear();
        }

        // Armijo backtracking. Once curvature pairs scale the direction, a
        // unit trial step is the natural first guess.
        let mut step = if s_hist.is_empty() { learning_rate } else { 1.0 };
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let candidate = &x + &direction.mapv(|d| d * step);
            let (f_new, g_new) = objective(&candidate);
            if f_new.is_finite() && f_new <= fx + ARMIJO_C1 * step * slope {
                accepted = Some((candidate, f_new, g_new));
                break;
            }
            step *= BACKTRACK_SHRINK;
        }
        let Some((mut x_new, mut f_new, mut g_new)) = accepted else {
            break;
        };

        // Expand toward the Wolfe curvature condition while the Armijo bound
        // still holds; without it the curvature pairs keep s.y <= 0 in
        // narrow valleys and the history goes stale.
        let mut expansions = 0;
        while expansions < MAX_EXPANSIONS && dot(&g_new, &direction) < WOLFE_C2 * slope {
            let bigger = step * 2.0;
            let candidate = &x + &direction.mapv(|d| d * bigger);
            let (f_b, g_b) = objective(&candidate);
            if f_b.is_finite() && f_b <= fx + ARMIJO_C1 * bigger * slope {
                step = bigger;
                x_new = candidate;
                f_new = f_b;
                g_new = g_b;
                expansions += 1;
            } else {
                break;
            }
        }

        let s = &x_new - &x;
        let y = &g_new - &grad;
        let sy = dot(&s, &y);
        if sy > 1e-10 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            s_hist.push(s);
            y_hist.push(y);
            if s_hist.len() > LBFGS_MEMORY {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        } else {
            // Curvature unusable; restart from steepest descent next time.
            s_hist.clear();
            y_hist.clear();
        }
        x = x_new;
        fx = f_new;
        grad = g_new;
        history.push(fx);
    }
    (x, history)
}
