//! Cosine variance schedule and its per-timestep quantities.
//!
//! Arrays are indexed by timestep with slot 0 holding the `t = 0`
//! convention (`alpha_bar = 1`, `beta = 0`), so `alpha_bar(t)` reads naturally
//! for `t = 1..=T`.

use std::f64::consts::FRAC_PI_2;
use std::fmt;

use crate::error::{Error, Result};

pub const DEFAULT_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    steps: usize,
    offset: f64,
    alpha_bar: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    sigma: Vec<f64>,
}

fn cosine_f(t: f64, steps: f64, s: f64) -> f64 {
    ((t / steps + s) / (1.0 + s) * FRAC_PI_2).cos().powi(2)
}

/// Number of diffusion steps `T` and cosine offset `s`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub offset: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 250, offset: DEFAULT_OFFSET }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<Schedule> {
        cosine_schedule(self.steps, self.offset)
    }
}

/// Cosine schedule with `T = steps` and offset `s`.
///
/// `beta` is clamped at [`MAX_BETA`]; `alpha_bar` is then the running product
/// of the clamped `alpha`, which differs from `f(t)/f(0)` only where the clamp
/// is active (the last step for usual `s`).
pub fn cosine_schedule(steps: usize, s: f64) -> Result<Schedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one timestep".into()));
    }
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Config(format!("schedule offset must be positive, got {s}")));
    }
    let t_f = steps as f64;
    let f0 = cosine_f(0.0, t_f, s);
    let mut alpha_bar = vec![1.0];
    let mut alpha = vec![1.0];
    let mut beta = vec![0.0];
    let mut sigma = vec![0.0];
    let mut prev_raw = 1.0;
    let mut running = 1.0;
    for t in 1..=steps {
        let raw = cosine_f(t as f64, t_f, s) / f0;
        let b = (1.0 - raw / prev_raw).min(MAX_BETA);
        prev_raw = raw;
        running *= 1.0 - b;
        alpha_bar.push(running);
        alpha.push(1.0 - b);
        beta.push(b);
        sigma.push(b.sqrt());
    }
    Ok(Schedule { steps, offset: s, alpha_bar, alpha, beta, sigma })
}

impl Schedule {
    /// Assemble from explicit per-timestep arrays (length `T`, index 0 = `t = 1`).
    /// No invariant checking; see [`Schedule::validate`].
    pub fn from_arrays(offset: f64, alpha_bar: &[f64], alpha: &[f64], beta: &[f64], sigma: &[f64]) -> Result<Self> {
        let steps = alpha_bar.len();
        if steps == 0 || alpha.len() != steps || beta.len() != steps || sigma.len() != steps {
            return Err(Error::Invalid(format!(
                "schedule arrays must share a positive length: {} {} {} {}",
                alpha_bar.len(),
                alpha.len(),
                beta.len(),
                sigma.len()
            )));
        }
        let with_origin = |v: &[f64], origin: f64| std::iter::once(origin).chain(v.iter().copied()).collect();
        Ok(Self {
            steps,
            offset,
            alpha_bar: with_origin(alpha_bar, 1.0),
            alpha: with_origin(alpha, 1.0),
            beta: with_origin(beta, 0.0),
            sigma: with_origin(sigma, 0.0),
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    /// Per-timestep arrays for `t = 1..=T`: `(alpha_bar, alpha, beta, sigma)`.
    pub fn arrays(&self) -> [&[f64]; 4] {
        [&self.alpha_bar[1..], &self.alpha[1..], &self.beta[1..], &self.sigma[1..]]
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::Invalid(format!("timestep {t} outside 1..={}", self.steps)));
        }
        Ok(())
    }

    /// Checks every schedule invariant and reports the first violation.
    pub fn validate(&self) -> ScheduleReport {
        let mut clamped = 0;
        let mut max_drop = 0.0f64;
        let mut running = 1.0f64;
        for t in 1..=self.steps {
            let (ab, a, b, s) = (self.alpha_bar[t], self.alpha[t], self.beta[t], self.sigma[t]);
            let fail = |check: &'static str, detail: String| ScheduleReport {
                violation: Some(Violation { check, timestep: t, detail }),
                clamped_steps: clamped,
                max_step_drop: max_drop,
            };
            if !(ab > 0.0 && ab < 1.0) {
                return fail("alpha_bar range", format!("alpha_bar = {ab}"));
            }
            if ab >= self.alpha_bar[t - 1] {
                return fail("monotonicity", format!("alpha_bar[{t}] = {ab} >= alpha_bar[{}] = {}", t - 1, self.alpha_bar[t - 1]));
            }
            if !(b > 0.0 && b <= MAX_BETA) {
                return fail("beta range", format!("beta = {b}"));
            }
            if (a - (1.0 - b)).abs() > 1e-12 {
                return fail("alpha = 1 - beta", format!("alpha = {a}, beta = {b}"));
            }
            if (s - b.sqrt()).abs() > 1e-12 {
                return fail("sigma = sqrt(beta)", format!("sigma = {s}, beta = {b}"));
            }
            running *= a;
            if ((running - ab) / ab).abs() > 1e-6 {
                return fail("product consistency", format!("prod alpha = {running}, alpha_bar = {ab}"));
            }
            if b == MAX_BETA {
                clamped += 1;
            }
            max_drop = max_drop.max(self.alpha_bar[t - 1] - ab);
        }
        ScheduleReport { violation: None, clamped_steps: clamped, max_step_drop: max_drop }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub check: &'static str,
    pub timestep: usize,
    pub detail: String,
}

/// Outcome of [`Schedule::validate`].
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleReport {
    pub violation: Option<Violation>,
    /// Timesteps whose beta sits at the clamp.
    pub clamped_steps: usize,
    /// Largest `alpha_bar[t-1] - alpha_bar[t]` seen before any violation.
    pub max_step_drop: f64,
}

impl ScheduleReport {
    pub fn passed(&self) -> bool {
        self.violation.is_none()
    }
}

impl fmt::Display for ScheduleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.violation {
            None => write!(
                f,
                "pass (clamped steps: {}, max alpha_bar drop: {:.6})",
                self.clamped_steps, self.max_step_drop
            ),
            Some(v) => write!(f, "fail {} at t={}: {}", v.check, v.timestep, v.detail),
        }
    }
}
