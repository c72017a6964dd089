//! Discrete-time diffusion pairs with anisotropic volatility, the
//! synchronous / reflection / merge coupling of their shared noise floor,
//! the concave contraction metric, and Monte-Carlo contraction curves.
//!
//! The coupled update of a pair `(x, y)` with drifts `b, b~`, volatilities
//! `sigma, sigma~` and a common noise floor `G`:
//!
//! 1. deterministic step  `x~ = (1 - eta lambda) x + eta b(x)`;
//! 2. excess noise with shared `Z'`: `x^ = x~ + sqrt(eta) (sigma sigma^T - G)^{1/2} Z'`;
//! 3. floor noise `sqrt(eta) G^{1/2} Z` with `Z` either shared
//!    (synchronous), mirrored across `e = (x^ - y^)/|x^ - y^|_{G+}`
//!    (reflection), or replaced by an exact merge accepted with the
//!    one-dimensional density ratio.
//!
//! The reflection/merge branches fire only inside the window
//! `|<(G^{1/2})+ e, Z>|^2 < m^2/eta` and radius `r^ <= r_1`.

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, mat_vec, min_sym_eigenvalue, pinv_psd, sym_sqrt_psd};
use crate::rng::{rng_for, standard_normal_vec};
use crate::stats::RunningStats;

/// Relative eigenvalue floor for the cached decompositions.
const EIG_REL_TOL: f64 = 1e-10;

/// Shared noise floor `G` with its pseudo-inverse and square roots cached.
#[derive(Clone, Debug)]
pub struct NoiseFloor {
    g: DMatrix<f64>,
    g_pinv: DMatrix<f64>,
    g_sqrt: DMatrix<f64>,
    g_sqrt_pinv: DMatrix<f64>,
}

impl NoiseFloor {
    pub fn new(g: DMatrix<f64>) -> Result<Self> {
        if g.nrows() != g.ncols() {
            return Err(Error::domain("noise floor must be square"));
        }
        let asym = (&g - g.transpose()).abs().max();
        if asym > 1e-10 {
            return Err(Error::domain("noise floor must be symmetric"));
        }
        if min_sym_eigenvalue(&g)? < -1e-12 {
            return Err(Error::domain("noise floor must be positive semi-definite"));
        }
        let g_sqrt = sym_sqrt_psd(&g, EIG_REL_TOL, 1e-12)?;
        let g_pinv = pinv_psd(&g, EIG_REL_TOL)?;
        let g_sqrt_pinv = pinv_psd(&g_sqrt, EIG_REL_TOL)?;
        Ok(NoiseFloor {
            g,
            g_pinv,
            g_sqrt,
            g_sqrt_pinv,
        })
    }

    pub fn dim(&self) -> usize {
        self.g.nrows()
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn g_sqrt(&self) -> &DMatrix<f64> {
        &self.g_sqrt
    }

    pub fn g_pinv(&self) -> &DMatrix<f64> {
        &self.g_pinv
    }

    pub fn g_sqrt_pinv(&self) -> &DMatrix<f64> {
        &self.g_sqrt_pinv
    }

    /// `|v|_{G+} = sqrt(v^T G+ v)`, zero exactly on the kernel of G.
    pub fn seminorm(&self, v: &[f64]) -> f64 {
        let gv = mat_vec(&self.g_pinv, v);
        linalg::dot(v, &gv).max(0.0).sqrt()
    }
}

/// Full configuration of one coupled step.
#[derive(Clone, Debug)]
pub struct CouplingConfig {
    pub floor: NoiseFloor,
    pub eta: f64,
    pub lambda_decay: f64,
    /// Truncation radius for the parallel component of the excess noise.
    pub trunc_parallel: f64,
    /// Truncation radius for the perpendicular component.
    pub trunc_perp: f64,
    /// Reflection/merge branches fire only below this coupled distance.
    pub switch_radius: f64,
    /// Reflection window half-width; the default is sqrt(eta)/2.
    pub m: f64,
    /// Use the truncated excess-noise construction instead of full
    /// Gaussian noise.
    pub truncated_noise: bool,
}

impl CouplingConfig {
    pub fn new(g: DMatrix<f64>, eta: f64, lambda_decay: f64, switch_radius: f64) -> Result<Self> {
        if !(eta > 0.0) {
            return Err(Error::domain("coupling requires eta > 0"));
        }
        if !(lambda_decay >= 0.0) {
            return Err(Error::domain("coupling requires lambda_decay >= 0"));
        }
        if !(switch_radius > 0.0) {
            return Err(Error::domain("coupling requires switch_radius > 0"));
        }
        Ok(CouplingConfig {
            floor: NoiseFloor::new(g)?,
            eta,
            lambda_decay,
            trunc_parallel: 1.0,
            trunc_perp: 1.0,
            switch_radius,
            m: eta.sqrt() / 2.0,
            truncated_noise: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.floor.dim()
    }
}

/// Weighted seminorm `sqrt(v^T G+ v)`.
pub fn seminorm(config: &CouplingConfig, v: &[f64]) -> f64 {
    config.floor.seminorm(v)
}

/// Which branch of the combined coupling fired.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Synchronous,
    Reflection,
    Merge,
    /// Reflection was requested but the coupled distance was zero, so the
    /// mirror direction is undefined and the step fell back to shared noise.
    SynchronousFallback,
}

/// Outcome of the floor-noise coupling given the post-drift pair.
pub struct CoupledNoise {
    pub x_next: Vec<f64>,
    pub y_next: Vec<f64>,
    pub branch: Branch,
}

/// Couple the `sqrt(eta) G^{1/2} Z` noise of the two chains given their
/// post-excess-noise positions. This is the reusable core shared by
/// [`coupled_step`] and the reflection-coupled trainers.
pub fn couple_floor_noise(
    floor: &NoiseFloor,
    eta: f64,
    m: f64,
    switch_radius: f64,
    x_hat: &[f64],
    y_hat: &[f64],
    rng: &mut ChaCha8Rng,
) -> CoupledNoise {
    use rand::Rng;
    let d = floor.dim();
    let z = standard_normal_vec(rng, d);
    let zeta: f64 = rng.random();
    let noise = {
        let gz = mat_vec(&floor.g_sqrt, &z);
        linalg::scale(&gz, eta.sqrt())
    };
    let x_next = linalg::add(x_hat, &noise);

    let diff = linalg::sub(x_hat, y_hat);
    let r_hat = floor.seminorm(&diff);
    if r_hat <= 1e-14 {
        // e undefined; synchronous keeps the chains together.
        let y_next = linalg::add(y_hat, &noise);
        return CoupledNoise {
            x_next,
            y_next,
            branch: Branch::SynchronousFallback,
        };
    }

    let e = linalg::scale(&diff, 1.0 / r_hat);
    // One-dimensional projection: z_par = <(G^{1/2})+ e, Z> is standard
    // normal when e lies in the range of G.
    let u = mat_vec(&floor.g_sqrt_pinv, &e);
    let z_par = linalg::dot(&u, &z);

    let in_window = z_par * z_par < m * m / eta;
    let in_radius = r_hat <= switch_radius;
    if in_window && in_radius {
        // log acceptance ratio of the merge move:
        // log phi_{y^,eta G}(X') - log phi_{x^,eta G}(X')
        //   = -(r^2 + 2 sqrt(eta) r z_par) / (2 eta).
        let log_ratio = -(r_hat * r_hat + 2.0 * eta.sqrt() * r_hat * z_par) / (2.0 * eta);
        if zeta.ln() <= log_ratio {
            return CoupledNoise {
                y_next: x_next.clone(),
                x_next,
                branch: Branch::Merge,
            };
        }
        // Reflection: mirror Z across u, i.e. Z_r = Z - 2 z_par u.
        let mut z_r = z;
        linalg::axpy(&mut z_r, -2.0 * z_par, &u);
        let gz = mat_vec(&floor.g_sqrt, &z_r);
        let y_next = linalg::add(y_hat, &linalg::scale(&gz, eta.sqrt()));
        return CoupledNoise {
            x_next,
            y_next,
            branch: Branch::Reflection,
        };
    }
    let y_next = linalg::add(y_hat, &noise);
    CoupledNoise {
        x_next,
        y_next,
        branch: Branch::Synchronous,
    }
}

/// Excess-noise factor `(sigma sigma^T - G)^{1/2}`.
///
/// The excess covariance is split off the shared floor so the coupled
/// marginals match the uncoupled update law exactly; the precondition
/// `min eig(sigma sigma^T - G) >= -1e-10` is asserted here.
pub fn excess_factor(floor: &NoiseFloor, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let cov = sigma * sigma.transpose();
    let excess = &cov - &floor.g;
    let min_eig = min_sym_eigenvalue(&excess)?;
    if min_eig < -1e-10 {
        return Err(Error::domain(format!(
            "volatility does not dominate the noise floor (min eig {min_eig:.3e})"
        )));
    }
    sym_sqrt_psd(&excess, EIG_REL_TOL, 1e-9)
}

/// Truncated excess noise: the standard normal `xi` is split into the
/// component parallel to the post-drift separation (measured in the `G+`
/// inner product) and the rest, and each part is norm-clipped.
fn truncate_excess(
    floor: &NoiseFloor,
    xi: &[f64],
    x_tilde: &[f64],
    y_tilde: &[f64],
    z1: f64,
    z2: f64,
) -> Vec<f64> {
    let diff = linalg::sub(x_tilde, y_tilde);
    let r = floor.seminorm(&diff);
    if r <= 1e-14 {
        return xi.to_vec();
    }
    let v = linalg::scale(&diff, 1.0 / r);
    let proj = linalg::dot(&v, xi);
    let xi1 = linalg::scale(&v, proj);
    let xi2 = linalg::sub(xi, &xi1);
    let n1 = floor.seminorm(&xi1);
    let n2 = floor.seminorm(&xi2);
    let c1 = if n1 > z1 { z1 / n1 } else { 1.0 };
    let c2 = if n2 > z2 { z2 / n2 } else { 1.0 };
    linalg::add(&linalg::scale(&xi1, c1), &linalg::scale(&xi2, c2))
}

/// One combined-coupling step of the pair of processes
/// `x' = (1 - eta lambda) x + eta b(x) + sqrt(eta) sigma(x) xi` (and the
/// tilde counterpart driven by the same randomness).
#[allow(clippy::too_many_arguments)]
pub fn coupled_step(
    x: &[f64],
    y: &[f64],
    drift_b: &dyn Fn(&[f64]) -> Vec<f64>,
    drift_b_tilde: &dyn Fn(&[f64]) -> Vec<f64>,
    vol_sigma: &dyn Fn(&[f64]) -> DMatrix<f64>,
    vol_sigma_tilde: &dyn Fn(&[f64]) -> DMatrix<f64>,
    config: &CouplingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Vec<f64>, Branch)> {
    let eta = config.eta;
    let lam = config.lambda_decay;

    let mut x_tilde = linalg::scale(x, 1.0 - eta * lam);
    linalg::axpy(&mut x_tilde, eta, &drift_b(x));
    let mut y_tilde = linalg::scale(y, 1.0 - eta * lam);
    linalg::axpy(&mut y_tilde, eta, &drift_b_tilde(y));

    let ex_x = excess_factor(&config.floor, &vol_sigma(x))?;
    let ex_y = excess_factor(&config.floor, &vol_sigma_tilde(y))?;

    let xi = standard_normal_vec(rng, config.dim());
    let z_prime = if config.truncated_noise {
        truncate_excess(
            &config.floor,
            &xi,
            &x_tilde,
            &y_tilde,
            config.trunc_parallel,
            config.trunc_perp,
        )
    } else {
        xi
    };

    let mut x_hat = x_tilde;
    linalg::axpy(&mut x_hat, eta.sqrt(), &mat_vec(&ex_x, &z_prime));
    let mut y_hat = y_tilde;
    linalg::axpy(&mut y_hat, eta.sqrt(), &mat_vec(&ex_y, &z_prime));

    let out = couple_floor_noise(
        &config.floor,
        eta,
        config.m,
        config.switch_radius,
        &x_hat,
        &y_hat,
        rng,
    );
    Ok((out.x_next, out.y_next, out.branch))
}

/// Concave-then-quadratic contraction metric:
/// `f(r) = (1 - e^{-a r})/a` for `r <= r2`, continued quadratically with a
/// matching first derivative beyond.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FMetric {
    pub a: f64,
    pub r1: f64,
    pub r2: f64,
}

impl FMetric {
    pub fn new(a: f64, r1: f64, r2: f64) -> Result<Self> {
        if !(a > 0.0 && r1 > 0.0 && r2 > r1) {
            return Err(Error::domain("f metric requires a > 0, 0 < r1 < r2"));
        }
        Ok(FMetric { a, r1, r2 })
    }
}

pub fn f_metric(fm: &FMetric, r: f64) -> f64 {
    if r < 0.0 {
        return f64::NAN;
    }
    if r <= fm.r2 {
        (1.0 - (-fm.a * r).exp()) / fm.a
    } else {
        (1.0 - (-fm.a * fm.r2).exp()) / fm.a
            + (-fm.a * fm.r2).exp() / (2.0 * fm.r2) * (r * r - fm.r2 * fm.r2)
    }
}

/// A coupled process specification for contraction experiments.
pub struct CoupledInstance<'a> {
    pub config: &'a CouplingConfig,
    pub drift_a: &'a (dyn Fn(&[f64]) -> Vec<f64> + Sync),
    pub drift_b: &'a (dyn Fn(&[f64]) -> Vec<f64> + Sync),
    pub vol_a: &'a (dyn Fn(&[f64]) -> DMatrix<f64> + Sync),
    pub vol_b: &'a (dyn Fn(&[f64]) -> DMatrix<f64> + Sync),
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
}

/// Per-step Monte-Carlo contraction curve.
#[derive(Clone, Debug, Serialize)]
pub struct ContractionCurve {
    /// `E[f(R_k)]` for `k = 0..=horizon`.
    pub mean_f: Vec<f64>,
    pub std_err: Vec<f64>,
    /// Paired per-replicate differences `f(R_k) - f(R_{k+1})`.
    pub step_decrease_mean: Vec<f64>,
    pub step_decrease_se: Vec<f64>,
    pub sync_count: usize,
    pub reflect_count: usize,
    pub merge_count: usize,
    /// Geometric factor fitted to the log of the floor-subtracted curve.
    pub fitted_rate: Option<f64>,
    /// Long-run plateau: mean of the final 20% of steps.
    pub floor: f64,
    pub floor_se: f64,
}

impl ContractionCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "step,mean_f,std_err,branch_counts_sync,branch_counts_reflect,branch_counts_merge\n",
        );
        for (k, (m, se)) in self.mean_f.iter().zip(&self.std_err).enumerate() {
            // Branch totals are whole-run counters; repeated per row to keep
            // the CSV flat.
            s.push_str(&format!(
                "{k},{m},{se},{},{},{}\n",
                self.sync_count, self.reflect_count, self.merge_count
            ));
        }
        s
    }
}

/// Simulate coupled replicates and measure `E[f(R_k)]` per step, the fitted
/// geometric decay of the de-biased curve, and the additive floor.
pub fn measure_contraction(
    instance: &CoupledInstance,
    fm: &FMetric,
    horizon_steps: usize,
    replicates: usize,
    seed: u64,
) -> Result<ContractionCurve> {
    if replicates < 2 {
        return Err(Error::domain("contraction needs at least two replicates"));
    }
    use rayon::prelude::*;
    let runs: Vec<Result<(Vec<f64>, [usize; 3])>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng_for(seed, "contraction", r as u64);
            let mut x = instance.x0.clone();
            let mut y = instance.y0.clone();
            let mut fs = Vec::with_capacity(horizon_steps + 1);
            let mut counts = [0usize; 3];
            fs.push(f_metric(
                fm,
                instance.config.floor.seminorm(&linalg::sub(&x, &y)),
            ));
            for _ in 0..horizon_steps {
                let (xn, yn, branch) = coupled_step(
                    &x,
                    &y,
                    instance.drift_a,
                    instance.drift_b,
                    instance.vol_a,
                    instance.vol_b,
                    instance.config,
                    &mut rng,
                )?;
                x = xn;
                y = yn;
                match branch {
                    Branch::Synchronous | Branch::SynchronousFallback => counts[0] += 1,
                    Branch::Reflection => counts[1] += 1,
                    Branch::Merge => counts[2] += 1,
                }
                fs.push(f_metric(
                    fm,
                    instance.config.floor.seminorm(&linalg::sub(&x, &y)),
                ));
            }
            Ok((fs, counts))
        })
        .collect();

    let mut per_step = vec![RunningStats::new(); horizon_steps + 1];
    let mut per_diff = vec![RunningStats::new(); horizon_steps];
    let mut counts = [0usize; 3];
    for run in runs {
        let (fs, c) = run?;
        for (k, v) in fs.iter().enumerate() {
            per_step[k].push(*v);
            if k + 1 < fs.len() {
                per_diff[k].push(*v - fs[k + 1]);
            }
        }
        counts[0] += c[0];
        counts[1] += c[1];
        counts[2] += c[2];
    }
    let mean_f: Vec<f64> = per_step.iter().map(|s| s.mean()).collect();
    let std_err: Vec<f64> = per_step.iter().map(|s| s.std_error()).collect();

    // Floor: mean over the final 20% of steps.
    let tail_start = (horizon_steps + 1) - ((horizon_steps + 1) / 5).max(1);
    let mut tail = RunningStats::new();
    let mut tail_se = 0.0;
    for k in tail_start..=horizon_steps {
        tail.push(mean_f[k]);
        tail_se += std_err[k] * std_err[k];
    }
    let floor = tail.mean();
    let floor_se = (tail_se / (horizon_steps + 1 - tail_start) as f64).sqrt();

    // Fit log(mean_f - floor) over the early decaying segment.
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (k, m) in mean_f.iter().enumerate().take(tail_start) {
        let v = m - floor;
        if v > (3.0 * std_err[k]).max(1e-12) {
            xs.push(k as f64);
            ys.push(v.ln());
        } else {
            break;
        }
    }
    let fitted_rate = if xs.len() >= 3 {
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let mut num = 0.0;
        let mut den = 0.0;
        for (x, y) in xs.iter().zip(&ys) {
            num += (x - mx) * (y - my);
            den += (x - mx) * (x - mx);
        }
        Some((num / den).exp())
    } else {
        None
    };

    Ok(ContractionCurve {
        mean_f,
        std_err,
        step_decrease_mean: per_diff.iter().map(|s| s.mean()).collect(),
        step_decrease_se: per_diff.iter().map(|s| s.std_error()).collect(),
        sync_count: counts[0],
        reflect_count: counts[1],
        merge_count: counts[2],
        fitted_rate,
        floor,
        floor_se,
    })
}
