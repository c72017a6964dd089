//! Backward-process samplers: the exponential integrator over the
//! uniform-then-geometric grid (exact per step for affine scores), a plain
//! Euler-Maruyama reference on the continuous backward dynamics, and the
//! nearest-neighbour memorisation profile.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::process::{kernel_coeffs, Schedule, StepGrid};
use crate::rng::{rng_for, standard_normal_vec};
use crate::scores::{Dataset, ScoreModel};

/// Any coordinate beyond this magnitude aborts the trajectory; ill-trained
/// scores can explode near the early-stopping time.
pub const DIVERGENCE_GUARD: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Integrator {
    ExponentialIntegrator,
    EulerMaruyama { dt: f64 },
}

#[derive(Clone, Debug, Serialize)]
pub struct SamplerConfig {
    pub grid: StepGrid,
    pub schedule: Schedule,
    pub num_samples: usize,
    pub integrator: Integrator,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::config("num_samples must be positive"));
        }
        match &self.integrator {
            Integrator::ExponentialIntegrator => {
                if (self.schedule.alpha() - 1.0).abs() > 1e-12 {
                    return Err(Error::config(
                        "the exponential integrator is stated for alpha = 1",
                    ));
                }
            }
            Integrator::EulerMaruyama { dt } => {
                if !(*dt > 0.0) || *dt > self.schedule.early_stop() / 2.0 {
                    return Err(Error::config(
                        "euler-maruyama requires 0 < dt <= early_stop / 2",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// A batch of backward samples. Trajectories that tripped the divergence
/// guard are excluded from `samples` and recorded as
/// `(trajectory_index, step)`.
#[derive(Clone, Debug, Serialize)]
pub struct SampleBatch {
    pub samples: Vec<Vec<f64>>,
    pub aborted: Vec<(usize, usize)>,
}

enum TrajectoryOutcome {
    Finished(Vec<f64>),
    Aborted(usize),
}

fn run_exponential_trajectory(
    model: &ScoreModel,
    config: &SamplerConfig,
    traj: usize,
    seed: u64,
) -> Result<TrajectoryOutcome> {
    let schedule = &config.schedule;
    let d = model.ambient_dim();
    let horizon = schedule.horizon();
    let mut rng = rng_for(seed, "traj", traj as u64);
    let prior_sd = schedule.prior_variance().sqrt();
    let mut y = linalg::scale(&standard_normal_vec(&mut rng, d), prior_sd);
    let times = &config.grid.times;
    for k in 0..config.grid.num_steps {
        let delta = times[k + 1] - times[k];
        let kd = kernel_coeffs(schedule, delta)?;
        let s_now = kernel_coeffs(schedule, horizon - times[k])?;
        let s_next = kernel_coeffs(schedule, horizon - times[k + 1])?;
        let score = model.evaluate(&y, horizon - times[k])?;
        let noise = standard_normal_vec(&mut rng, d);
        let noise_scale = kd.std() * (s_next.var / s_now.var).sqrt();
        let drift_scale = kd.var / kd.mean_scale;
        let inv_mean = 1.0 / kd.mean_scale;
        for i in 0..d {
            y[i] = inv_mean * y[i] + drift_scale * score[i] + noise_scale * noise[i];
        }
        if !linalg::all_finite(&y) {
            return Err(Error::DivergedSample { step: k });
        }
        if y.iter().any(|v| v.abs() > DIVERGENCE_GUARD) {
            return Ok(TrajectoryOutcome::Aborted(k));
        }
    }
    Ok(TrajectoryOutcome::Finished(y))
}

fn run_em_trajectory(
    model: &ScoreModel,
    config: &SamplerConfig,
    dt: f64,
    traj: usize,
    seed: u64,
) -> Result<TrajectoryOutcome> {
    let schedule = &config.schedule;
    let d = model.ambient_dim();
    let horizon = schedule.horizon();
    let alpha = schedule.alpha();
    let stop = horizon - schedule.early_stop();
    let mut rng = rng_for(seed, "traj", traj as u64);
    let prior_sd = schedule.prior_variance().sqrt();
    let mut y = linalg::scale(&standard_normal_vec(&mut rng, d), prior_sd);
    let mut t = 0.0;
    let mut k = 0usize;
    while t < stop - 1e-12 {
        let step = dt.min(stop - t);
        let score = model.evaluate(&y, horizon - t)?;
        let noise = standard_normal_vec(&mut rng, d);
        let noise_scale = (2.0 * step).sqrt();
        for i in 0..d {
            y[i] += step * (alpha * y[i] + 2.0 * score[i]) + noise_scale * noise[i];
        }
        if !linalg::all_finite(&y) {
            return Err(Error::DivergedSample { step: k });
        }
        if y.iter().any(|v| v.abs() > DIVERGENCE_GUARD) {
            return Ok(TrajectoryOutcome::Aborted(k));
        }
        t += step;
        k += 1;
    }
    Ok(TrajectoryOutcome::Finished(y))
}

/// Draw `num_samples` independent backward trajectories with the
/// configured integrator. Each trajectory has its own derived seed, so the
/// batch is reproducible regardless of execution order.
pub fn sample_backward(model: &ScoreModel, config: &SamplerConfig, seed: u64) -> Result<SampleBatch> {
    config.validate()?;
    use rayon::prelude::*;
    let outcomes: Vec<Result<TrajectoryOutcome>> = (0..config.num_samples)
        .into_par_iter()
        .map(|traj| match &config.integrator {
            Integrator::ExponentialIntegrator => {
                run_exponential_trajectory(model, config, traj, seed)
            }
            Integrator::EulerMaruyama { dt } => run_em_trajectory(model, config, *dt, traj, seed),
        })
        .collect();
    let mut samples = Vec::with_capacity(config.num_samples);
    let mut aborted = Vec::new();
    for (traj, out) in outcomes.into_iter().enumerate() {
        match out? {
            TrajectoryOutcome::Finished(y) => samples.push(y),
            TrajectoryOutcome::Aborted(step) => aborted.push((traj, step)),
        }
    }
    Ok(SampleBatch { samples, aborted })
}

/// Euler-Maruyama reference sampler; the config must select that
/// integrator.
pub fn sample_backward_em(
    model: &ScoreModel,
    config: &SamplerConfig,
    seed: u64,
) -> Result<SampleBatch> {
    if !matches!(config.integrator, Integrator::EulerMaruyama { .. }) {
        return Err(Error::config("config must select the Euler-Maruyama integrator"));
    }
    sample_backward(model, config, seed)
}

/// Exact brute-force nearest neighbour of each sample in the dataset:
/// `(nearest_index, euclidean_distance)`.
pub fn memorization_profile(samples: &[Vec<f64>], dataset: &Dataset) -> Vec<(usize, f64)> {
    samples
        .iter()
        .map(|s| {
            let mut best = (0usize, f64::INFINITY);
            for (i, p) in dataset.points().iter().enumerate() {
                let d = linalg::dist(s, p);
                if d < best.1 {
                    best = (i, d);
                }
            }
            best
        })
        .collect()
}

/// Sliced 1-Wasserstein distance between two sample clouds: average over
/// random unit projections of the 1-D order-statistics coupling.
pub fn sliced_wasserstein1(a: &[Vec<f64>], b: &[Vec<f64>], n_projections: usize, seed: u64) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::NAN;
    }
    let d = a[0].len();
    let n = a.len().min(b.len());
    let mut total = 0.0;
    for proj in 0..n_projections {
        let mut rng = rng_for(seed, "swproj", proj as u64);
        let mut u = standard_normal_vec(&mut rng, d);
        let nu = linalg::norm(&u);
        for x in &mut u {
            *x /= nu;
        }
        let mut pa: Vec<f64> = a[..n].iter().map(|x| linalg::dot(x, &u)).collect();
        let mut pb: Vec<f64> = b[..n].iter().map(|x| linalg::dot(x, &u)).collect();
        pa.sort_by(|x, y| x.partial_cmp(y).unwrap());
        pb.sort_by(|x, y| x.partial_cmp(y).unwrap());
        total += pa
            .iter()
            .zip(&pb)
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / n as f64;
    }
    total / n_projections as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::build_step_grid;
    use crate::stats::RunningStats;

    fn gaussian_setup(kappa: f64, eps: f64, t: f64) -> (Schedule, ScoreModel, StepGrid) {
        let s = Schedule::new(1.0, t, eps).unwrap();
        let model = ScoreModel::analytic_gaussian(s, vec![0.0, 0.0], 1.0).unwrap();
        let grid = build_step_grid(&s, kappa).unwrap();
        (s, model, grid)
    }

    #[test]
    fn gaussian_target_moments_recovered() {
        // Standard Gaussian target at alpha = 1: the early-stopped marginal
        // has mean 0 and unit variance per coordinate.
        let (s, model, grid) = gaussian_setup(0.01, 0.01, 2.0);
        let config = SamplerConfig {
            grid,
            schedule: s,
            num_samples: 20_000,
            integrator: Integrator::ExponentialIntegrator,
        };
        let batch = sample_backward(&model, &config, 5).unwrap();
        assert!(batch.aborted.is_empty());
        let mut stats = [RunningStats::new(), RunningStats::new()];
        for x in &batch.samples {
            stats[0].push(x[0]);
            stats[1].push(x[1]);
        }
        let n = batch.samples.len() as f64;
        for st in stats {
            assert!(st.mean().abs() < 4.0 / n.sqrt());
            assert!((st.variance() - 1.0).abs() < 0.05, "var {}", st.variance());
        }
    }

    #[test]
    fn zero_score_one_step_is_pure_mean_propagation() {
        let s = Schedule::new(1.0, 2.0, 0.25).unwrap();
        let grid = build_step_grid(&s, 1.0).unwrap();
        let delta = grid.times[1] - grid.times[0];
        let kd = kernel_coeffs(&s, delta).unwrap();
        // With a zero score the deterministic part of the update is exactly
        // mu_delta^{-1} y.
        let y = vec![0.7, -0.4];
        let expect: Vec<f64> = y.iter().map(|v| v / kd.mean_scale).collect();
        let score = vec![0.0, 0.0];
        let got: Vec<f64> = y
            .iter()
            .zip(&score)
            .map(|(v, sc)| v / kd.mean_scale + kd.var / kd.mean_scale * sc)
            .collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn same_seed_gives_identical_batches() {
        let (s, model, grid) = gaussian_setup(0.25, 0.05, 2.0);
        let config = SamplerConfig {
            grid,
            schedule: s,
            num_samples: 64,
            integrator: Integrator::ExponentialIntegrator,
        };
        let a = sample_backward(&model, &config, 9).unwrap();
        let b = sample_backward(&model, &config, 9).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn exponential_integrator_requires_unit_alpha() {
        let s = Schedule::new(0.5, 2.0, 0.05).unwrap();
        let grid = build_step_grid(&s, 0.25).unwrap();
        let model = ScoreModel::analytic_gaussian(s, vec![0.0], 1.0).unwrap();
        let config = SamplerConfig {
            grid,
            schedule: s,
            num_samples: 4,
            integrator: Integrator::ExponentialIntegrator,
        };
        assert!(matches!(
            sample_backward(&model, &config, 1),
            Err(Error::Configuration(_))
        ));
    }

    #[test]
    fn em_matches_exponential_integrator_on_gaussian() {
        // Oracle: the other integrator, first two moments.
        let (s, model, grid) = gaussian_setup(0.05, 0.05, 2.0);
        let exp_cfg = SamplerConfig {
            grid: grid.clone(),
            schedule: s,
            num_samples: 8000,
            integrator: Integrator::ExponentialIntegrator,
        };
        let em_cfg = SamplerConfig {
            grid,
            schedule: s,
            num_samples: 8000,
            integrator: Integrator::EulerMaruyama { dt: 1e-3 },
        };
        let a = sample_backward(&model, &exp_cfg, 3).unwrap();
        let b = sample_backward_em(&model, &em_cfg, 4).unwrap();
        let mut sa = RunningStats::new();
        let mut sb = RunningStats::new();
        for x in &a.samples {
            sa.push(x[0]);
        }
        for x in &b.samples {
            sb.push(x[0]);
        }
        let se = (sa.variance() / 8000.0).sqrt() + (sb.variance() / 8000.0).sqrt();
        assert!((sa.mean() - sb.mean()).abs() < 4.0 * se);
        let var_se = (sa.variance() + sb.variance()) * (2.0f64 / 7999.0).sqrt();
        assert!(
            (sa.variance() - sb.variance()).abs() < 4.0 * var_se,
            "{} vs {}",
            sa.variance(),
            sb.variance()
        );
    }

    #[test]
    fn em_self_convergence_under_dt_halving() {
        let (s, model, grid) = gaussian_setup(0.05, 0.05, 2.0);
        let run = |dt: f64| {
            let cfg = SamplerConfig {
                grid: grid.clone(),
                schedule: s,
                num_samples: 8000,
                integrator: Integrator::EulerMaruyama { dt },
            };
            let batch = sample_backward(&model, &cfg, 12).unwrap();
            let mut st = RunningStats::new();
            for x in &batch.samples {
                st.push(x[0]);
            }
            st.variance()
        };
        let v1 = run(2e-3);
        let v2 = run(1e-3);
        assert!(
            (v1 - v2).abs() / v2 < 0.05,
            "dt halving moved variance {v1} -> {v2}"
        );
    }

    #[test]
    fn em_zero_score_alpha_zero_is_pure_diffusion() {
        // s = 0, alpha = 0: variance grows by 2 (T - eps).
        let s = Schedule::new(0.0, 1.0, 0.05).unwrap();
        let basis = crate::scores::FeatureBasis::new(
            vec![crate::scores::Feature::Zero { dim: 2 }],
            1.0,
        )
        .unwrap();
        let zero_model = ScoreModel::dictionary(s, basis, vec![0.0], None).unwrap();
        let grid = build_step_grid(&s, 0.5).unwrap();
        let cfg = SamplerConfig {
            grid,
            schedule: s,
            num_samples: 20_000,
            integrator: Integrator::EulerMaruyama { dt: 0.02 },
        };
        let batch = sample_backward(&zero_model, &cfg, 8).unwrap();
        let mut st = RunningStats::new();
        for x in &batch.samples {
            st.push(x[0]);
        }
        // prior variance 2T = 2 plus growth 2 (T - eps) = 1.9.
        let expect = 2.0 + 2.0 * (1.0 - 0.05);
        let se = expect * (2.0f64 / 19_999.0).sqrt();
        assert!(
            (st.variance() - expect).abs() < 4.0 * se,
            "{} vs {expect}",
            st.variance()
        );
    }

    #[test]
    fn memorization_profile_basics() {
        let data = Dataset::new(vec![vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let prof = memorization_profile(data.points(), &data);
        for (i, (idx, d)) in prof.iter().enumerate() {
            assert_eq!(*idx, i);
            assert_eq!(*d, 0.0);
        }
        let single = Dataset::new(vec![vec![0.5, 0.5]]).unwrap();
        let prof = memorization_profile(&[vec![9.0, 9.0], vec![0.0, 0.0]], &single);
        assert!(prof.iter().all(|(i, _)| *i == 0));
    }

    #[test]
    fn exponential_integrator_matches_affine_recursion() {
        // With an affine score every update maps a Gaussian to a Gaussian;
        // propagate the variance through the closed-form recursion and
        // compare with the empirical value.
        let (s, model, grid) = gaussian_setup(0.25, 0.05, 2.0);
        let horizon = s.horizon();
        // For the standard Gaussian target the score at any time is -y, so
        // y' = (1/mu_d - var_d/mu_d) y + noise.
        let mut var = s.prior_variance();
        for k in 0..grid.num_steps {
            let delta = grid.times[k + 1] - grid.times[k];
            let kd = kernel_coeffs(&s, delta).unwrap();
            let a = 1.0 / kd.mean_scale - kd.var / kd.mean_scale;
            let s_now = kernel_coeffs(&s, horizon - grid.times[k]).unwrap();
            let s_next = kernel_coeffs(&s, horizon - grid.times[k + 1]).unwrap();
            let nv = kd.var * s_next.var / s_now.var;
            var = a * a * var + nv;
        }
        let cfg = SamplerConfig {
            grid,
            schedule: s,
            num_samples: 30_000,
            integrator: Integrator::ExponentialIntegrator,
        };
        let batch = sample_backward(&model, &cfg, 21).unwrap();
        let mut st = RunningStats::new();
        for x in &batch.samples {
            st.push(x[1]);
        }
        let se = var * (2.0f64 / 29_999.0).sqrt();
        assert!(
            (st.variance() - var).abs() < 4.0 * se,
            "{} vs recursion {var}",
            st.variance()
        );
    }

    #[test]
    fn early_stopping_monotonicity_of_memorisation() {
        // Mean nearest-neighbour distance is non-increasing as eps falls.
        let data = Dataset::new(
            (0..8)
                .map(|i| {
                    let a = std::f64::consts::TAU * i as f64 / 8.0;
                    vec![a.cos(), a.sin()]
                })
                .collect(),
        )
        .unwrap();
        for seed in 0..3u64 {
            let mut last = f64::INFINITY;
            for eps in [0.1, 0.01, 0.001] {
                let s = Schedule::new(1.0, 5.0, eps).unwrap();
                let model = ScoreModel::empirical_mixture(s, data.clone());
                let grid = build_step_grid(&s, 0.05).unwrap();
                let cfg = SamplerConfig {
                    grid,
                    schedule: s,
                    num_samples: 400,
                    integrator: Integrator::ExponentialIntegrator,
                };
                let batch = sample_backward(&model, &cfg, 100 + seed).unwrap();
                let prof = memorization_profile(&batch.samples, &data);
                let mean: f64 = prof.iter().map(|(_, d)| d).sum::<f64>() / prof.len() as f64;
                assert!(
                    mean <= last * 1.02,
                    "seed {seed} eps {eps}: {mean} > {last}"
                );
                last = mean;
            }
        }
    }

    #[test]
    fn kappa_sweep_distances_reproduce_across_seeds() {
        // The coarseness sweep statistic must agree across seeds within
        // Monte-Carlo error; with 500 samples per side the sliced distance
        // of near-identical laws fluctuates at the 1/sqrt(n) scale.
        let data = Dataset::new(
            (0..8)
                .map(|i| {
                    let a = std::f64::consts::TAU * i as f64 / 8.0;
                    vec![a.cos(), a.sin()]
                })
                .collect(),
        )
        .unwrap();
        let s = Schedule::new(1.0, 2.0, 0.05).unwrap();
        let model = ScoreModel::empirical_mixture(s, data.clone());
        let holdout = Dataset::new(
            (0..500)
                .map(|i| {
                    let a = std::f64::consts::TAU * (i as f64 + 0.41) / 500.0;
                    vec![a.cos(), a.sin()]
                })
                .collect(),
        )
        .unwrap();
        for kappa in [0.4, 0.1, 0.025] {
            let grid = build_step_grid(&s, kappa).unwrap();
            let run = |seed: u64| {
                let cfg = SamplerConfig {
                    grid: grid.clone(),
                    schedule: s,
                    num_samples: 500,
                    integrator: Integrator::ExponentialIntegrator,
                };
                let batch = sample_backward(&model, &cfg, seed).unwrap();
                sliced_wasserstein1(&batch.samples, holdout.points(), 64, 9)
            };
            let (a, b) = (run(100), run(200));
            let scale = 1.0 / (500.0f64).sqrt();
            assert!(
                (a - b).abs() < 4.0 * scale,
                "kappa {kappa}: {a} vs {b}"
            );
        }
    }

    #[test]
    fn sliced_wasserstein_separates_shifted_clouds() {
        let cloud: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 * 0.1, -0.3]).collect();
        assert_eq!(sliced_wasserstein1(&cloud, &cloud, 16, 1), 0.0);
        let shifted: Vec<Vec<f64>> = cloud.iter().map(|p| vec![p[0] + 1.0, p[1]]).collect();
        let d = sliced_wasserstein1(&cloud, &shifted, 64, 1);
        assert!(d > 0.3, "shifted clouds should be far: {d}");
    }
}
