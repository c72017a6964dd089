//! Monte-Carlo estimators of the score-matching losses and the separation
//! constants: the denoising loss, the loss against an exactly-known
//! reference score, and the bias constant `C_sm` (population or empirical).
//!
//! Paired-seed contract: every estimator draws sample `s` from two derived
//! sub-streams, one for the data point `x0` and one for `(t, xi)`. Two
//! estimators called with the same seed therefore share the `(t, xi)`
//! stream exactly, even when their data sources consume different amounts
//! of randomness — this is what makes differenced estimates (gaps,
//! decomposition identities) low variance.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::process::{kernel_coeffs, sample_time, Schedule, TimeWeighting};
use crate::rng::{rng_for, standard_normal_vec};
use crate::scores::{log_softmax_posterior, Dataset, ScoreModel};
use crate::stats::RunningStats;

/// A Monte-Carlo loss value with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossEstimate {
    pub value: f64,
    pub std_error: f64,
    pub num_samples: usize,
}

/// Data law the losses integrate over: a finite dataset (empirical losses
/// and discrete population laws), an isotropic Gaussian, or the uniform
/// circle distribution. The latter two carry closed-form or quadrature
/// posterior moments, which is what the population-side quantities need.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Empirical(Dataset),
    Gaussian { mean: Vec<f64>, cov_scale: f64 },
    Circle { radius: f64, ambient_dim: usize },
}

/// Nodes of the periodic trapezoid rule used for circle posteriors.
/// The integrand is smooth and periodic, so convergence is spectral.
const CIRCLE_QUAD_NODES: usize = 360;

impl DataSource {
    pub fn ambient_dim(&self) -> usize {
        match self {
            DataSource::Empirical(d) => d.dim(),
            DataSource::Gaussian { mean, .. } => mean.len(),
            DataSource::Circle { ambient_dim, .. } => *ambient_dim,
        }
    }

    pub fn draw_x0(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        use rand::Rng;
        match self {
            DataSource::Empirical(d) => d.point(rng.random_range(0..d.len())).to_vec(),
            DataSource::Gaussian { mean, cov_scale } => {
                let xi = standard_normal_vec(rng, mean.len());
                let sd = cov_scale.sqrt();
                mean.iter().zip(&xi).map(|(m, z)| m + sd * z).collect()
            }
            DataSource::Circle {
                radius,
                ambient_dim,
            } => {
                let phi: f64 = rng.random::<f64>() * std::f64::consts::TAU;
                let mut x = vec![0.0; *ambient_dim];
                x[0] = radius * phi.cos();
                x[1] = radius * phi.sin();
                x
            }
        }
    }

    /// The population score of the noised law at `(x, t)`.
    pub fn exact_score(&self, schedule: &Schedule, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let k = kernel_coeffs(schedule, t)?;
        if !(t > 0.0) || k.var <= 0.0 {
            return Err(Error::domain("population score requires t > 0"));
        }
        match self {
            DataSource::Empirical(d) => crate::scores::empirical_score(d, schedule, x, t),
            DataSource::Gaussian { mean, cov_scale } => {
                let mv = k.mean_scale * k.mean_scale * cov_scale + k.var;
                Ok(x.iter()
                    .zip(mean)
                    .map(|(xi, mi)| -(xi - k.mean_scale * mi) / mv)
                    .collect())
            }
            DataSource::Circle { radius, .. } => {
                let (pm, _) = circle_posterior_moments(*radius, schedule, x, t)?;
                Ok(x.iter()
                    .zip(&pm)
                    .map(|(xi, mi)| (k.mean_scale * mi - xi) / k.var)
                    .collect())
            }
        }
    }

    /// `Tr Cov(X0 | X_t = x)`, exact (softmax / Gaussian algebra) or by
    /// angular quadrature for the circle.
    pub fn posterior_trace_cov(&self, schedule: &Schedule, x: &[f64], t: f64) -> Result<f64> {
        let k = kernel_coeffs(schedule, t)?;
        match self {
            DataSource::Empirical(d) => {
                let (w, m) = log_softmax_posterior(d, schedule, x, t)?;
                let mut second = 0.0;
                for (wi, p) in w.iter().zip(d.points()) {
                    second += wi * linalg::dot(p, p);
                }
                Ok((second - linalg::dot(&m, &m)).max(0.0))
            }
            DataSource::Gaussian { mean, cov_scale } => {
                // Gaussian posterior: Cov = c sigma^2 / (mu^2 c + sigma^2) I.
                let d = mean.len() as f64;
                let mv = k.mean_scale * k.mean_scale * cov_scale + k.var;
                Ok(d * cov_scale * k.var / mv)
            }
            DataSource::Circle { radius, .. } => {
                let (pm, second) = circle_posterior_moments(*radius, schedule, x, t)?;
                Ok((second - linalg::dot(&pm, &pm)).max(0.0))
            }
        }
    }
}

/// Posterior mean and posterior second moment `E[|X0|^2 | X_t = x]` for the
/// uniform circle law, by periodic trapezoid quadrature over the angle.
fn circle_posterior_moments(
    radius: f64,
    schedule: &Schedule,
    x: &[f64],
    t: f64,
) -> Result<(Vec<f64>, f64)> {
    let k = kernel_coeffs(schedule, t)?;
    if k.var <= 0.0 {
        return Err(Error::domain("circle posterior requires t > 0"));
    }
    let d = x.len();
    let mut best = f64::NEG_INFINITY;
    let mut logits = Vec::with_capacity(CIRCLE_QUAD_NODES);
    let mut points = Vec::with_capacity(CIRCLE_QUAD_NODES);
    for i in 0..CIRCLE_QUAD_NODES {
        let phi = std::f64::consts::TAU * i as f64 / CIRCLE_QUAD_NODES as f64;
        let (c, s) = (radius * phi.cos(), radius * phi.sin());
        let mut d2 = (x[0] - k.mean_scale * c).powi(2) + (x[1] - k.mean_scale * s).powi(2);
        for xi in &x[2..] {
            d2 += xi * xi;
        }
        let logit = -d2 / (2.0 * k.var);
        best = best.max(logit);
        logits.push(logit);
        points.push((c, s));
    }
    let mut total = 0.0;
    let mut mean = vec![0.0; d];
    for (l, (c, s)) in logits.iter().zip(&points) {
        let w = (l - best).exp();
        total += w;
        mean[0] += w * c;
        mean[1] += w * s;
    }
    for m in &mut mean {
        *m /= total;
    }
    // Points live on the sphere of radius `radius`, so the posterior second
    // moment is exactly radius^2.
    Ok((mean, radius * radius))
}

/// One Monte-Carlo record shared by all loss estimators.
struct DsmDraw {
    t: f64,
    x_t: Vec<f64>,
    /// Conditional score (mu_t x0 - X_t) / sigma_t^2.
    target: Vec<f64>,
}

fn nth_draw(
    source: &DataSource,
    schedule: &Schedule,
    weighting: &TimeWeighting,
    seed: u64,
    outer: usize,
    inner: usize,
) -> Result<DsmDraw> {
    let mut rng_x0 = rng_for(seed, "mc-x0", outer as u64);
    let x0 = source.draw_x0(&mut rng_x0);
    let mut rng_tx = rng_for(seed, "mc-tnoise", (outer * 0x10000 + inner) as u64);
    let t = sample_time(weighting, |_| 1.0, &mut rng_tx)?;
    let k = kernel_coeffs(schedule, t)?;
    if k.var <= 0.0 {
        return Err(Error::domain("loss weighting must be supported in (0, T]"));
    }
    let xi = standard_normal_vec(&mut rng_tx, x0.len());
    let sd = k.std();
    let x_t: Vec<f64> = x0
        .iter()
        .zip(&xi)
        .map(|(x, z)| k.mean_scale * x + sd * z)
        .collect();
    let target: Vec<f64> = x0
        .iter()
        .zip(&x_t)
        .map(|(x, y)| (k.mean_scale * x - y) / k.var)
        .collect();
    Ok(DsmDraw { t, x_t, target })
}

fn run_estimator(
    source: &DataSource,
    schedule: &Schedule,
    weighting: &TimeWeighting,
    n_mc: usize,
    n_inner: usize,
    seed: u64,
    mut integrand: impl FnMut(&DsmDraw) -> Result<f64>,
) -> Result<LossEstimate> {
    if n_mc < 2 {
        return Err(Error::domain("loss estimation requires n_mc >= 2"));
    }
    if n_inner < 1 {
        return Err(Error::domain("n_inner must be at least 1"));
    }
    let mut stats = RunningStats::new();
    for outer in 0..n_mc {
        let mut acc = 0.0;
        for inner in 0..n_inner {
            let draw = nth_draw(source, schedule, weighting, seed, outer, inner)?;
            acc += integrand(&draw)?;
        }
        stats.push(acc / n_inner as f64);
    }
    Ok(LossEstimate {
        value: stats.mean(),
        std_error: stats.std_error(),
        num_samples: n_mc,
    })
}

/// Denoising score-matching loss: draw `x0` from the source, `t` from the
/// weighting, `X_t` from the kernel, and average
/// `|s(X_t, t) - (mu_t x0 - X_t)/sigma_t^2|^2`. Unbiased for the population
/// loss when the source is a distribution and for the empirical loss when
/// it is a dataset.
pub fn estimate_dsm(
    model: &ScoreModel,
    source: &DataSource,
    schedule: &Schedule,
    weighting: &TimeWeighting,
    n_mc: usize,
    n_inner: usize,
    seed: u64,
) -> Result<LossEstimate> {
    run_estimator(source, schedule, weighting, n_mc, n_inner, seed, |draw| {
        let s = model.evaluate(&draw.x_t, draw.t)?;
        Ok(linalg::dist(&s, &draw.target).powi(2))
    })
}

/// Score-matching loss against an exactly-known reference score. The
/// reference must be a closed-form variant (analytic Gaussian or empirical
/// mixture).
pub fn estimate_sm(
    model: &ScoreModel,
    reference: &ScoreModel,
    source: &DataSource,
    schedule: &Schedule,
    weighting: &TimeWeighting,
    n_mc: usize,
    n_inner: usize,
    seed: u64,
) -> Result<LossEstimate> {
    match reference {
        ScoreModel::AnalyticGaussian { .. } | ScoreModel::EmpiricalMixture { .. } => {}
        _ => {
            return Err(Error::unsupported(
                "score-matching reference must be an exactly-known score",
            ))
        }
    }
    run_estimator(source, schedule, weighting, n_mc, n_inner, seed, |draw| {
        let s = model.evaluate(&draw.x_t, draw.t)?;
        let r = reference.evaluate(&draw.x_t, draw.t)?;
        Ok(linalg::dist(&s, &r).powi(2))
    })
}

/// The separation constant between the two losses. For a dataset source
/// this is the empirical constant, computed from the exact softmax
/// posterior covariance; for distribution sources it is estimated as the
/// denoising loss of the exact population score.
pub fn estimate_csm(
    source: &DataSource,
    schedule: &Schedule,
    weighting: &TimeWeighting,
    n_mc: usize,
    n_inner: usize,
    seed: u64,
) -> Result<LossEstimate> {
    match source {
        DataSource::Empirical(_) => {
            run_estimator(source, schedule, weighting, n_mc, n_inner, seed, |draw| {
                let k = kernel_coeffs(schedule, draw.t)?;
                let tr = source.posterior_trace_cov(schedule, &draw.x_t, draw.t)?;
                Ok(k.mean_scale * k.mean_scale / (k.var * k.var) * tr)
            })
        }
        _ => run_estimator(source, schedule, weighting, n_mc, n_inner, seed, |draw| {
            let s = source.exact_score(schedule, &draw.x_t, draw.t)?;
            Ok(linalg::dist(&s, &draw.target).powi(2))
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::Schedule;
    use crate::rng::rng_from;
    use crate::scores::{Feature, FeatureBasis};
    use crate::stats::combined_se;
    use rand::Rng;

    fn sched() -> Schedule {
        Schedule::new(1.0, 2.0, 1e-3).unwrap()
    }

    #[test]
    fn one_point_conditional_score_has_zero_loss() {
        let s = sched();
        let data = Dataset::new(vec![vec![0.4, -0.7]]).unwrap();
        let model = ScoreModel::empirical_mixture(s, data.clone());
        let w = TimeWeighting::uniform(&s, 0.05, 2.0).unwrap();
        let est = estimate_dsm(&model, &DataSource::Empirical(data), &s, &w, 64, 1, 9).unwrap();
        assert!(est.value.abs() < 1e-20);
        assert!(est.std_error.abs() < 1e-20);
    }

    #[test]
    fn empirical_dsm_minus_csm_vanishes_for_empirical_score() {
        // The empirical score minimises the empirical dsm loss with
        // optimal value the empirical separation constant.
        let s = sched();
        let data =
            Dataset::new(vec![vec![1.0, 0.0], vec![-0.5, 0.8], vec![0.2, -1.1]]).unwrap();
        let src = DataSource::Empirical(data.clone());
        let model = ScoreModel::empirical_mixture(s, data);
        let w = TimeWeighting::uniform(&s, 0.05, 2.0).unwrap();
        let seed = 31;
        let dsm = estimate_dsm(&model, &src, &s, &w, 4096, 1, seed).unwrap();
        let csm = estimate_csm(&src, &s, &w, 4096, 1, seed).unwrap();
        let diff = (dsm.value - csm.value).abs();
        let se = combined_se(&[dsm.std_error, csm.std_error]);
        assert!(diff <= 3.0 * se, "diff {diff} vs 3 se {}", 3.0 * se);
    }

    #[test]
    fn gaussian_csm_matches_closed_form() {
        // Oracle: d mu^2 / (sigma^2 (mu^2 + sigma^2)) at a single atom.
        let s = sched();
        let t0 = 0.5;
        let w = TimeWeighting::dirac(&s, t0).unwrap();
        let src = DataSource::Gaussian {
            mean: vec![0.0, 0.0],
            cov_scale: 1.0,
        };
        let k = kernel_coeffs(&s, t0).unwrap();
        let mu2 = k.mean_scale * k.mean_scale;
        let expect = 2.0 * mu2 / (k.var * (mu2 + k.var));
        let est = estimate_csm(&src, &s, &w, 20_000, 1, 5).unwrap();
        assert!(
            (est.value - expect).abs() <= 3.0 * est.std_error,
            "{} vs {expect} (se {})",
            est.value,
            est.std_error
        );
    }

    #[test]
    fn dsm_of_exact_gaussian_score_equals_csm_constant() {
        let s = sched();
        let t0 = 0.7;
        let w = TimeWeighting::dirac(&s, t0).unwrap();
        let src = DataSource::Gaussian {
            mean: vec![0.0, 0.0, 0.0],
            cov_scale: 1.0,
        };
        let model = ScoreModel::analytic_gaussian(s, vec![0.0; 3], 1.0).unwrap();
        let k = kernel_coeffs(&s, t0).unwrap();
        let mu2 = k.mean_scale * k.mean_scale;
        let expect = 3.0 * mu2 / (k.var * (mu2 + k.var));
        let est = estimate_dsm(&model, &src, &s, &w, 20_000, 1, 13).unwrap();
        assert!((est.value - expect).abs() <= 3.0 * est.std_error);
    }

    #[test]
    fn sm_of_model_against_itself_is_zero() {
        let s = sched();
        let model = ScoreModel::analytic_gaussian(s, vec![0.0, 0.0], 1.0).unwrap();
        let w = TimeWeighting::uniform(&s, 0.1, 1.0).unwrap();
        let src = DataSource::Gaussian {
            mean: vec![0.0, 0.0],
            cov_scale: 1.0,
        };
        let est = estimate_sm(&model, &model, &src, &s, &w, 64, 1, 3).unwrap();
        assert_eq!(est.value, 0.0);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn zero_model_sm_against_standard_gaussian_is_dimension() {
        // E|score|^2 of the N(0,1) marginal is d when mu^2 + sigma^2 = 1.
        let s = sched();
        let t0 = 0.9;
        let w = TimeWeighting::dirac(&s, t0).unwrap();
        let src = DataSource::Gaussian {
            mean: vec![0.0, 0.0],
            cov_scale: 1.0,
        };
        let reference = ScoreModel::analytic_gaussian(s, vec![0.0, 0.0], 1.0).unwrap();
        let basis = FeatureBasis::new(vec![Feature::Zero { dim: 2 }], 1.0).unwrap();
        let zero = ScoreModel::dictionary(s, basis, vec![0.0], None).unwrap();
        let est = estimate_sm(&zero, &reference, &src, &s, &w, 20_000, 1, 23).unwrap();
        assert!((est.value - 2.0).abs() <= 3.0 * est.std_error);
    }

    #[test]
    fn sm_requires_exact_reference() {
        let s = sched();
        let basis = FeatureBasis::new(vec![Feature::Zero { dim: 2 }], 1.0).unwrap();
        let dict = ScoreModel::dictionary(s, basis, vec![0.0], None).unwrap();
        let src = DataSource::Gaussian {
            mean: vec![0.0],
            cov_scale: 1.0,
        };
        let w = TimeWeighting::dirac(&s, 0.5).unwrap();
        assert!(matches!(
            estimate_sm(&dict, &dict, &src, &s, &w, 16, 1, 1),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn one_point_dataset_has_zero_empirical_csm() {
        let s = sched();
        let src = DataSource::Empirical(Dataset::new(vec![vec![3.0, -2.0]]).unwrap());
        let w = TimeWeighting::uniform(&s, 0.05, 2.0).unwrap();
        let est = estimate_csm(&src, &s, &w, 64, 1, 2).unwrap();
        assert_eq!(est.value, 0.0);
    }

    #[test]
    fn two_point_csm_matches_quadrature_oracle() {
        // Oracle: 1-D trapezoid quadrature in the sufficient coordinate.
        // For points +-e1, Var(X0 | X_t = y) = 4 p (1-p) with
        // p = sigmoid(2 mu y_1 / sigma^2).
        let s = sched();
        let t0 = 0.4;
        let w = TimeWeighting::dirac(&s, t0).unwrap();
        let data = Dataset::new(vec![vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let src = DataSource::Empirical(data);
        let k = kernel_coeffs(&s, t0).unwrap();
        let (mu, var) = (k.mean_scale, k.var);
        let sd = var.sqrt();
        // y_1 ~ 0.5 N(mu, var) + 0.5 N(-mu, var)
        let nodes = 10_000;
        let lo = -mu - 8.0 * sd;
        let hi = mu + 8.0 * sd;
        let h = (hi - lo) / nodes as f64;
        let density = |y: f64| {
            let g = |m: f64| {
                (-(y - m) * (y - m) / (2.0 * var)).exp() / (sd * std::f64::consts::TAU.sqrt())
            };
            0.5 * g(mu) + 0.5 * g(-mu)
        };
        let integrand = |y: f64| {
            let p = 1.0 / (1.0 + (-2.0 * mu * y / var).exp());
            density(y) * 4.0 * p * (1.0 - p)
        };
        let mut acc = 0.5 * (integrand(lo) + integrand(hi));
        for i in 1..nodes {
            acc += integrand(lo + h * i as f64);
        }
        let expected = mu * mu / (var * var) * acc * h;
        let est = estimate_csm(&src, &s, &w, 30_000, 1, 77).unwrap();
        assert!(
            (est.value - expected).abs() <= 3.0 * est.std_error,
            "{} vs {expected}",
            est.value
        );
    }

    #[test]
    fn estimates_are_bitwise_deterministic() {
        let s = sched();
        let data = Dataset::new(vec![vec![1.0, 0.2], vec![-0.3, 0.6]]).unwrap();
        let src = DataSource::Empirical(data.clone());
        let model = ScoreModel::empirical_mixture(s, data);
        let w = TimeWeighting::uniform(&s, 0.05, 2.0).unwrap();
        let a = estimate_dsm(&model, &src, &s, &w, 512, 2, 99).unwrap();
        let b = estimate_dsm(&model, &src, &s, &w, 512, 2, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn decomposition_identity_for_random_dictionaries() {
        // dsm = sm + csm within combined MC error, paired seeds.
        let s = sched();
        let w = TimeWeighting::uniform(&s, 0.1, 1.5).unwrap();
        let src = DataSource::Gaussian {
            mean: vec![0.0, 0.0],
            cov_scale: 1.0,
        };
        let reference = ScoreModel::analytic_gaussian(s, vec![0.0, 0.0], 1.0).unwrap();
        let centers = vec![vec![0.5, 0.0], vec![-0.5, 0.5]];
        let basis = FeatureBasis::gaussian_bumps(&centers, 2, 1.0).unwrap();
        let mut rng = rng_from(55);
        for trial in 0..20 {
            let weights: Vec<f64> = (0..basis.count())
                .map(|_| rng.random_range(-0.5..0.5))
                .collect();
            let model = ScoreModel::dictionary(s, basis.clone(), weights, None).unwrap();
            let seed = 1000 + trial;
            let dsm = estimate_dsm(&model, &src, &s, &w, 4096, 1, seed).unwrap();
            let sm = estimate_sm(&model, &reference, &src, &s, &w, 4096, 1, seed).unwrap();
            let csm = estimate_csm(&src, &s, &w, 4096, 1, seed).unwrap();
            let diff = (dsm.value - sm.value - csm.value).abs();
            let se = combined_se(&[dsm.std_error, sm.std_error, csm.std_error]);
            assert!(diff <= 3.0 * se, "trial {trial}: diff {diff} vs {}", 3.0 * se);
        }
    }

    #[test]
    fn empirical_score_minimises_dsm_among_perturbations() {
        let s = sched();
        let data =
            Dataset::new(vec![vec![0.8, 0.1], vec![-0.6, -0.4], vec![0.1, 0.9]]).unwrap();
        let src = DataSource::Empirical(data.clone());
        let w = TimeWeighting::uniform(&s, 0.1, 1.5).unwrap();
        let best = ScoreModel::empirical_mixture(s, data.clone());
        let centers = vec![vec![0.0, 0.0], vec![0.5, -0.5]];
        let bumps = FeatureBasis::gaussian_bumps(&centers, 2, 0.8).unwrap();
        let mut rng = rng_from(4242);
        let seed = 7;
        let base = estimate_dsm(&best, &src, &s, &w, 4096, 1, seed).unwrap();
        for _ in 0..20 {
            // Perturbation: empirical score plus random bump directions.
            let mut features = vec![Feature::EmpiricalScore {
                dataset: data.clone(),
            }];
            features.extend(bumps.features.iter().cloned());
            let basis = FeatureBasis::new(features, 0.8).unwrap();
            let mut weights = vec![1.0];
            for _ in 0..bumps.count() {
                weights.push(rng.random_range(-0.3..0.3));
            }
            let perturbed = ScoreModel::dictionary(s, basis, weights, None).unwrap();
            let est = estimate_dsm(&perturbed, &src, &s, &w, 4096, 1, seed).unwrap();
            let se = combined_se(&[base.std_error, est.std_error]);
            assert!(est.value >= base.value - 3.0 * se);
        }
    }

    #[test]
    fn circle_posterior_concentrates_near_time_zero() {
        let s = sched();
        let src = DataSource::Circle {
            radius: 1.0,
            ambient_dim: 2,
        };
        let x = vec![0.9, 0.0];
        let t = 0.01;
        let score = src.exact_score(&s, &x, t).unwrap();
        // Should push outward toward (1, 0).
        assert!(score[0] > 0.0);
        // The angular posterior is approximately von Mises with
        // concentration kappa = mu r |x| / sigma^2, so TrCov ~ 1/kappa.
        let k = kernel_coeffs(&s, t).unwrap();
        let kappa = k.mean_scale * 0.9 / k.var;
        let tr = src.posterior_trace_cov(&s, &x, t).unwrap();
        assert!(tr < 2.0 / kappa, "posterior still diffuse: {tr}");
        assert!((tr - 1.0 / kappa).abs() < 0.5 / kappa);
    }
}
