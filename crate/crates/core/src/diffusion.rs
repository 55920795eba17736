//! Noise schedule, forward diffusion and the DDPM/DDIM reverse steps.
//!
//! The model predicts the clean sample x0 directly. `coef_x0` / `coef_eps`
//! are the cumulative coefficients (sqrt of alpha-bar and its complement), so
//! `coef_x0^2 + coef_eps^2 = 1` holds at every step. Step indices are
//! 1-based: `x_t` for `t` in `1..=T`, with `x_0` the clean sample.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

/// Serializable schedule parameters, stored in run configs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 2e-2,
            kind: ScheduleKind::Linear,
        }
    }
}

impl ScheduleConfig {
    pub fn with_steps(steps: usize) -> Self {
        Self { steps, ..Self::default() }
    }
}

/// Beta sequence with derived cumulative coefficients. Index 0 of every
/// internal vector corresponds to step t = 1.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub config: ScheduleConfig,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    coef_x0: Vec<f64>,
    coef_eps: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        if config.steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let t_max = config.steps;
        let beta: Vec<f64> = match config.kind {
            ScheduleKind::Linear => (0..t_max)
                .map(|i| {
                    if t_max == 1 {
                        config.beta_start
                    } else {
                        config.beta_start
                            + (config.beta_end - config.beta_start) * i as f64
                                / (t_max - 1) as f64
                    }
                })
                .collect(),
        };
        if beta.iter().any(|&b| b <= 0.0 || b >= 1.0) {
            return Err(Error::Config("beta values must lie strictly in (0,1)".into()));
        }
        let mut alpha_bar = Vec::with_capacity(t_max);
        let mut acc = 1.0;
        for &b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        let coef_x0: Vec<f64> = alpha_bar.iter().map(|a| a.sqrt()).collect();
        let coef_eps: Vec<f64> = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        for t in 0..t_max {
            let id = coef_x0[t] * coef_x0[t] + coef_eps[t] * coef_eps[t];
            debug_assert!((id - 1.0).abs() < 1e-9);
        }
        Ok(Self { config, beta, alpha_bar, coef_x0, coef_eps })
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Step(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn coef_x0(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.coef_x0[t - 1]
        }
    }

    pub fn coef_eps(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.coef_eps[t - 1]
        }
    }

    /// Posterior standard deviation: sqrt of
    /// beta-tilde_t = (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t.
    pub fn posterior_sigma(&self, t: usize) -> f64 {
        let ab_t = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        ((1.0 - ab_prev) / (1.0 - ab_t) * self.beta(t)).sqrt()
    }
}

/// Forward diffusion in one step: coef_x0_t * x0 + coef_eps_t * eps.
pub fn q_sample(
    x0: &Array2<f64>,
    t: usize,
    eps: &Array2<f64>,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    sched.check_step(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "x0 shape {:?} vs eps shape {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    Ok(x0 * sched.coef_x0(t) + eps * sched.coef_eps(t))
}

/// Mean of q(x_{t-1} | x_t, x0_hat), the standard DDPM posterior.
pub fn posterior_mean(
    x0_hat: &Array2<f64>,
    x_t: &Array2<f64>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    sched.check_step(t)?;
    if x0_hat.shape() != x_t.shape() {
        return Err(Error::Shape("x0_hat and x_t shapes differ".into()));
    }
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let beta = sched.beta(t);
    let coef0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
    let coef_t = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    Ok(x0_hat * coef0 + x_t * coef_t)
}

/// Invert `posterior_mean` for x0_hat given the (possibly refined) mean.
/// Guidance perturbs the mean; the instrumented x0 is recovered through this.
pub fn x0_from_posterior_mean(
    mu: &Array2<f64>,
    x_t: &Array2<f64>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    sched.check_step(t)?;
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let beta = sched.beta(t);
    let coef0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
    let coef_t = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    Ok((mu - &(x_t * coef_t)) / coef0)
}

/// A point in the reverse process.
#[derive(Debug, Clone)]
pub struct DiffusionState {
    pub t: usize,
    pub x_t: Array2<f64>,
}

impl DiffusionState {
    pub fn new(t: usize, x_t: Array2<f64>) -> Self {
        Self { t, x_t }
    }
}

/// One ancestral DDPM step. The optional hook refines the posterior mean
/// before noise is added (trajectory guidance plugs in here). No noise is
/// added at t = 1.
pub fn ddpm_step<R: Rng>(
    state: &DiffusionState,
    x0_hat: &Array2<f64>,
    sched: &NoiseSchedule,
    guidance_hook: Option<&mut dyn FnMut(Array2<f64>) -> Array2<f64>>,
    rng: &mut R,
) -> Result<DiffusionState> {
    let t = state.t;
    sched.check_step(t)?;
    let mut mu = posterior_mean(x0_hat, &state.x_t, t, sched)?;
    if let Some(hook) = guidance_hook {
        mu = hook(mu);
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::GuidanceDivergence(format!(
                "non-finite posterior mean after guidance at step {t}"
            )));
        }
    }
    let x_prev = if t == 1 {
        mu
    } else {
        let sigma = sched.posterior_sigma(t);
        let noise = Array2::from_shape_fn(mu.raw_dim(), |_| rng.sample::<f64, _>(StandardNormal));
        mu + noise * sigma
    };
    Ok(DiffusionState::new(t - 1, x_prev))
}

/// One deterministic (eta = 0) DDIM jump from state.t down to t_next
/// (t_next = 0 yields x0_hat itself).
pub fn ddim_step(
    state: &DiffusionState,
    x0_hat: &Array2<f64>,
    t_next: usize,
    sched: &NoiseSchedule,
) -> Result<DiffusionState> {
    let t = state.t;
    sched.check_step(t)?;
    if t_next >= t {
        return Err(Error::Step(format!("DDIM requires t_next < t, got {t_next} >= {t}")));
    }
    let ce = sched.coef_eps(t);
    if ce == 0.0 {
        return Err(Error::Numeric("coef_eps is zero; cannot recover eps_hat".into()));
    }
    let eps_hat = (&state.x_t - &(x0_hat * sched.coef_x0(t))) / ce;
    let x_next = x0_hat * sched.coef_x0(t_next) + &eps_hat * sched.coef_eps(t_next);
    Ok(DiffusionState::new(t_next, x_next))
}

/// Evenly spaced DDIM step sequence from T down to 0, `count` jumps.
pub fn ddim_timesteps(t_max: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > t_max {
        return Err(Error::Config(format!("ddim step count {count} outside 1..={t_max}")));
    }
    let mut ts: Vec<usize> = (0..count)
        .map(|i| ((i + 1) * t_max + count / 2) / count)
        .collect();
    ts.dedup();
    ts.reverse();
    // ts is now strictly decreasing, starting at t_max.
    debug_assert_eq!(ts[0], t_max);
    Ok(ts)
}
