//! Forward Ornstein-Uhlenbeck process: closed-form Gaussian transition
//! kernels, the piecewise-uniform/geometric timestep grid, and the time
//! weighting measures used by the losses and the trainers.
//!
//! The forward dynamics are `dX_t = -alpha X_t dt + sqrt(2) dW_t` on
//! `[0, T]`, so `X_t | X_0 ~ N(mu_t X_0, sigma_t^2 I)` with
//! `mu_t = exp(-alpha t)` and `sigma_t^2 = (1 - mu_t^2)/alpha`
//! (`2t` in the variance-exploding case `alpha = 0`).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::standard_normal_vec;

/// Floor nudge for the step-count formula: `K = floor(L + log(1/eps)/log(1+kappa))`
/// evaluates the argument in floating point, and the exactly-integral case
/// must not round down by one ulp.
const FLOOR_NUDGE: f64 = 1e-9;

/// Noise schedule of the forward process: drift coefficient, terminal time
/// and the early-stopping time used by the backward samplers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRaw", into = "ScheduleRaw")]
pub struct Schedule {
    alpha: f64,
    horizon: f64,
    early_stop: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleRaw {
    alpha: f64,
    horizon: f64,
    early_stop: f64,
}

impl TryFrom<ScheduleRaw> for Schedule {
    type Error = Error;
    fn try_from(r: ScheduleRaw) -> Result<Self> {
        Schedule::new(r.alpha, r.horizon, r.early_stop)
    }
}

impl From<Schedule> for ScheduleRaw {
    fn from(s: Schedule) -> Self {
        ScheduleRaw {
            alpha: s.alpha,
            horizon: s.horizon,
            early_stop: s.early_stop,
        }
    }
}

impl Schedule {
    pub fn new(alpha: f64, horizon: f64, early_stop: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::domain("schedule requires alpha >= 0"));
        }
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(Error::domain("schedule requires horizon > 0"));
        }
        if !early_stop.is_finite() || early_stop <= 0.0 || early_stop >= horizon {
            return Err(Error::domain(
                "schedule requires 0 < early_stop < horizon",
            ));
        }
        Ok(Schedule {
            alpha,
            horizon,
            early_stop,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn early_stop(&self) -> f64 {
        self.early_stop
    }

    /// Prior variance used to initialise the backward process: the
    /// stationary variance `1/alpha` when `alpha > 0`, else `2 T`.
    pub fn prior_variance(&self) -> f64 {
        if self.alpha > 0.0 {
            1.0 / self.alpha
        } else {
            2.0 * self.horizon
        }
    }
}

/// Transition-kernel coefficients `(mu_t, sigma_t^2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelCoeffs {
    pub mean_scale: f64,
    pub var: f64,
}

impl KernelCoeffs {
    pub fn std(&self) -> f64 {
        self.var.sqrt()
    }
}

/// `(mu_t, sigma_t^2)` of the kernel at time `t`.
pub fn kernel_coeffs(schedule: &Schedule, t: f64) -> Result<KernelCoeffs> {
    if !t.is_finite() || t < 0.0 || t > schedule.horizon {
        return Err(Error::domain(format!(
            "kernel time {t} outside [0, {}]",
            schedule.horizon
        )));
    }
    let mean_scale = (-schedule.alpha * t).exp();
    let var = if schedule.alpha > 0.0 {
        // (1 - e^{-2 alpha t}) / alpha, via expm1 for small t
        -(-2.0 * schedule.alpha * t).exp_m1() / schedule.alpha
    } else {
        2.0 * t
    };
    Ok(KernelCoeffs { mean_scale, var })
}

/// Draw `X_t | X_0 = x0` from the transition kernel. Deterministic given
/// the RNG state; a noise vector is consumed even at `t = 0` so streams
/// stay aligned across time choices.
pub fn sample_forward(
    schedule: &Schedule,
    x0: &[f64],
    t: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let k = kernel_coeffs(schedule, t)?;
    let xi = standard_normal_vec(rng, x0.len());
    let sd = k.std();
    Ok(x0
        .iter()
        .zip(&xi)
        .map(|(x, z)| k.mean_scale * x + sd * z)
        .collect())
}

/// Discretisation grid `t_0 < t_1 < ... < t_K`: uniform with step `kappa`
/// until `T - 1`, then geometric approach to `T - eps`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepGrid {
    pub kappa: f64,
    pub times: Vec<f64>,
    pub num_steps: usize,
}

impl StepGrid {
    /// Write the grid as a one-column CSV (`t_k`).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t_k\n");
        for t in &self.times {
            s.push_str(&format!("{t}\n"));
        }
        s
    }
}

/// Build the timestep grid:
/// `t_k = kappa k` while `k < (T-1)/kappa`, then
/// `t_k = T - (1+kappa)^{(T-1)/kappa - k}`, with
/// `K = floor((T-1)/kappa + log(1/eps)/log(1+kappa))`.
pub fn build_step_grid(schedule: &Schedule, kappa: f64) -> Result<StepGrid> {
    if !kappa.is_finite() || kappa <= 0.0 {
        return Err(Error::domain("step grid requires kappa > 0"));
    }
    let t_end = schedule.horizon();
    if t_end < 1.0 {
        return Err(Error::config(
            "step grid formula assumes horizon >= 1",
        ));
    }
    let eps = schedule.early_stop();
    let l = (t_end - 1.0) / kappa;
    let geo = (1.0 / eps).ln() / (1.0 + kappa).ln();
    let num_steps = (l + geo + FLOOR_NUDGE).floor() as usize;
    if num_steps == 0 {
        return Err(Error::config(
            "step grid is empty; decrease kappa or early_stop",
        ));
    }
    let mut times = Vec::with_capacity(num_steps + 1);
    for k in 0..=num_steps {
        let kf = k as f64;
        let t = if kf < l {
            kappa * kf
        } else {
            t_end - (1.0 + kappa).powf(l - kf)
        };
        times.push(t);
    }
    for w in times.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::domain("step grid times are not strictly increasing"));
        }
    }
    let t_last = *times.last().unwrap();
    if t_last > t_end - eps + 1e-9 {
        return Err(Error::domain(format!(
            "grid overshoots the early-stopping time: t_K = {t_last}, T - eps = {}",
            t_end - eps
        )));
    }
    Ok(StepGrid {
        kappa,
        times,
        num_steps,
    })
}

/// Probability measure over times in `(0, T]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TimeWeighting {
    ContinuousUniform { lo: f64, hi: f64 },
    DiscreteAtoms { atoms: Vec<(f64, f64)> },
}

impl TimeWeighting {
    /// Normalised uniform weighting on `[lo, hi]`. The normalisation
    /// constant `hi - lo` is reported by [`TimeWeighting::scale_factor`]
    /// for callers that want the unnormalised integral back.
    pub fn uniform(schedule: &Schedule, lo: f64, hi: f64) -> Result<Self> {
        if !(lo > 0.0 && lo < hi && hi <= schedule.horizon() + 1e-12) {
            return Err(Error::domain(
                "continuous weighting requires 0 < lo < hi <= horizon",
            ));
        }
        Ok(TimeWeighting::ContinuousUniform { lo, hi })
    }

    /// Weighting concentrated on explicit atoms. Weights must sum to one.
    pub fn discrete(schedule: &Schedule, atoms: Vec<(f64, f64)>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::domain("discrete weighting requires at least one atom"));
        }
        let mut sum = 0.0;
        for &(t, w) in &atoms {
            if !(t > 0.0 && t <= schedule.horizon() + 1e-12) {
                return Err(Error::domain(format!(
                    "atom time {t} outside (0, horizon]"
                )));
            }
            if !(w >= 0.0) {
                return Err(Error::domain("atom weights must be nonnegative"));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::domain(format!(
                "atom weights sum to {sum}, expected 1 within 1e-12"
            )));
        }
        Ok(TimeWeighting::DiscreteAtoms { atoms })
    }

    /// Single atom at `t` (a Dirac weighting).
    pub fn dirac(schedule: &Schedule, t: f64) -> Result<Self> {
        Self::discrete(schedule, vec![(t, 1.0)])
    }

    /// Normalisation constant dropped when a continuous weighting is
    /// treated as a probability measure (1 for discrete weightings).
    pub fn scale_factor(&self) -> f64 {
        match self {
            TimeWeighting::ContinuousUniform { lo, hi } => hi - lo,
            TimeWeighting::DiscreteAtoms { .. } => 1.0,
        }
    }

    /// Smallest time carrying mass.
    pub fn support_min(&self) -> f64 {
        match self {
            TimeWeighting::ContinuousUniform { lo, .. } => *lo,
            TimeWeighting::DiscreteAtoms { atoms } => atoms
                .iter()
                .filter(|(_, w)| *w > 0.0)
                .map(|(t, _)| *t)
                .fold(f64::INFINITY, f64::min),
        }
    }
}

/// The discrete training weighting induced by a grid: one atom at
/// `T - t_k` for `k = 0..K-1`, each with weight `1/K`.
pub fn discrete_weighting(grid: &StepGrid, schedule: &Schedule) -> TimeWeighting {
    let k = grid.num_steps;
    let atoms = grid.times[..k]
        .iter()
        .map(|t| (schedule.horizon() - t, 1.0 / k as f64))
        .collect();
    TimeWeighting::DiscreteAtoms { atoms }
}

/// Resolution of the inverse-CDF table used for continuous reweighted
/// sampling.
const CONT_GRID: usize = 4096;

/// Draw a time with density proportional to `1/weight_fn` against the
/// weighting measure. With `weight_fn == 1` this samples the weighting
/// itself.
pub fn sample_time<F: Fn(f64) -> f64>(
    weighting: &TimeWeighting,
    weight_fn: F,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    use rand::Rng;
    match weighting {
        TimeWeighting::DiscreteAtoms { atoms } => {
            let mut probs = Vec::with_capacity(atoms.len());
            let mut total = 0.0;
            for &(t, w) in atoms {
                let wf = weight_fn(t);
                if !(wf > 0.0 && wf.is_finite()) {
                    return Err(Error::config(format!(
                        "weight function must be strictly positive and finite at t = {t}"
                    )));
                }
                let p = w / wf;
                probs.push(p);
                total += p;
            }
            if !(total > 0.0 && total.is_finite()) {
                return Err(Error::config("reweighted atom mass is not normalisable"));
            }
            let u: f64 = rng.random::<f64>() * total;
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return Ok(atoms[i].0);
                }
            }
            Ok(atoms[atoms.len() - 1].0)
        }
        TimeWeighting::ContinuousUniform { lo, hi } => {
            // Piecewise-linear inverse CDF of 1/weight_fn on [lo, hi].
            let h = (hi - lo) / CONT_GRID as f64;
            let mut cum = Vec::with_capacity(CONT_GRID + 1);
            cum.push(0.0);
            let mut prev = 1.0 / weight_fn(*lo);
            let mut total = 0.0;
            for i in 1..=CONT_GRID {
                let t = lo + h * i as f64;
                let g = 1.0 / weight_fn(t);
                if !(g.is_finite() && g >= 0.0) || !prev.is_finite() {
                    return Err(Error::config(
                        "reweighted continuous density is not integrable on the support",
                    ));
                }
                total += 0.5 * (prev + g) * h;
                cum.push(total);
                prev = g;
            }
            if !(total > 0.0 && total.is_finite()) {
                return Err(Error::config(
                    "reweighted continuous density is not normalisable",
                ));
            }
            let u: f64 = rng.random::<f64>() * total;
            let idx = cum.partition_point(|&c| c <= u).min(CONT_GRID);
            let (c0, c1) = (cum[idx - 1], cum[idx]);
            let frac = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.0 };
            Ok(lo + h * ((idx - 1) as f64 + frac))
        }
    }
}
