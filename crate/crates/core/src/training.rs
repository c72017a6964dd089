//! Training: the mini-batch gradient estimator of the denoising objective,
//! clipped SGD with weight decay, its second-order Gaussian-noise
//! approximation, dictionary ERM via normal equations, and coupled
//! adjacent-dataset trainers sharing one randomness stream.

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coupling::{couple_floor_noise, NoiseFloor};
use crate::error::{Error, Result};
use crate::linalg::{self, mat_vec, pinv_psd, sym_eigen};
use crate::process::{kernel_coeffs, sample_time, Schedule, TimeWeighting};
use crate::rng::{rng_from, standard_normal_vec};
use crate::scores::{Dataset, FeatureBasis, ScoreModel};

/// Covariance matrices of the Gaussian-noise scheme are dense `n x n`;
/// refuse parameter vectors beyond this size.
pub const GAUSSIAN_PARAM_CEILING: usize = 256;

/// Feature-count ceiling for the ERM normal equations.
pub const ERM_BASIS_CEILING: usize = 512;

/// Step-size schedule `eta_k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum StepSizes {
    Constant { eta: f64 },
    /// `eta_k = eta_bar / (k + 1)`.
    InverseDecay { eta_bar: f64 },
}

impl StepSizes {
    pub fn at(&self, k: usize) -> f64 {
        match self {
            StepSizes::Constant { eta } => *eta,
            StepSizes::InverseDecay { eta_bar } => eta_bar / (k + 1) as f64,
        }
    }

    pub fn max(&self) -> f64 {
        match self {
            StepSizes::Constant { eta } => *eta,
            StepSizes::InverseDecay { eta_bar } => *eta_bar,
        }
    }
}

/// The time-weighting function `w_t` of the gradient estimator. Times are
/// drawn from `w^{-1} tau` and the integrand is multiplied back by `w`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum TimeWeightFn {
    Uniform,
    PowerOfTime { exponent: f64 },
}

impl TimeWeightFn {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            TimeWeightFn::Uniform => 1.0,
            TimeWeightFn::PowerOfTime { exponent } => t.powf(*exponent),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum NoiseMode {
    PathwiseSgd,
    GaussianApprox { n_inner_cov: usize },
}

/// All hyperparameters of the stochastic trainers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub step_sizes: StepSizes,
    pub weight_decay: f64,
    pub clip: f64,
    pub batch_size: usize,
    pub resamples: usize,
    pub num_steps: usize,
    pub time_weight: TimeWeightFn,
    pub noise_mode: NoiseMode,
}

impl TrainConfig {
    pub fn validate(&self, n_data: usize) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > n_data {
            return Err(Error::config(format!(
                "batch size {} must lie in 1..={n_data}",
                self.batch_size
            )));
        }
        if self.resamples == 0 {
            return Err(Error::config("resamples must be at least 1"));
        }
        if self.num_steps == 0 {
            return Err(Error::config("num_steps must be at least 1"));
        }
        if !(self.weight_decay > 0.0) {
            return Err(Error::config("weight decay must be positive"));
        }
        if !(self.clip > 0.0) {
            return Err(Error::config("clip value must be positive"));
        }
        // Every step size must stay below 1/lambda (the norm-bound regime).
        if self.step_sizes.max() * self.weight_decay >= 1.0 {
            return Err(Error::config(
                "step sizes must satisfy eta_k < 1/weight_decay",
            ));
        }
        if let NoiseMode::GaussianApprox { n_inner_cov } = self.noise_mode {
            if n_inner_cov == 0 {
                return Err(Error::config("n_inner_cov must be at least 1"));
            }
        }
        Ok(())
    }
}

/// The `(t, xi)` tuples consumed by one gradient estimate, batch-major:
/// tuple `(i, j)` sits at `i * resamples + j`.
#[derive(Clone, Debug)]
pub struct NoiseDraws {
    pub tuples: Vec<(f64, Vec<f64>)>,
}

/// Norm clipping `(1 and C/|v|) v`; the zero vector is a fixed point.
pub fn clip(v: &[f64], c: f64) -> Vec<f64> {
    let n = linalg::norm(v);
    if n <= c {
        v.to_vec()
    } else {
        linalg::scale(v, c / n)
    }
}

/// Mini-batch gradient of the weighted denoising objective together with
/// the realised mini-batch loss.
fn gradient_estimate_with_loss(
    model: &ScoreModel,
    batch: &[&[f64]],
    config: &TrainConfig,
    schedule: &Schedule,
    noise: &NoiseDraws,
) -> Result<(Vec<f64>, f64)> {
    let p = config.resamples;
    if noise.tuples.len() != batch.len() * p {
        return Err(Error::contract(format!(
            "noise supplies {} tuples, expected {} x {}",
            noise.tuples.len(),
            batch.len(),
            p
        )));
    }
    let n_param = model.param_len();
    if n_param == 0 {
        return Err(Error::unsupported("gradient requires a parametric model"));
    }
    let mut grad = vec![0.0; n_param];
    let mut loss = 0.0;
    let count = (batch.len() * p) as f64;
    for (i, x0) in batch.iter().enumerate() {
        for j in 0..p {
            let (t, xi) = &noise.tuples[i * p + j];
            let k = kernel_coeffs(schedule, *t)?;
            let sd = k.std();
            let x_t: Vec<f64> = x0
                .iter()
                .zip(xi)
                .map(|(x, z)| k.mean_scale * x + sd * z)
                .collect();
            let target: Vec<f64> = x0
                .iter()
                .zip(&x_t)
                .map(|(x, y)| (k.mean_scale * x - y) / k.var)
                .collect();
            let s = model.evaluate(&x_t, *t)?;
            let residual = linalg::sub(&s, &target);
            let w = config.time_weight.eval(*t);
            loss += w * linalg::dot(&residual, &residual);
            let cotangent = linalg::scale(&residual, 2.0 * w);
            let g = model.param_gradient(&x_t, *t, &cotangent)?;
            linalg::axpy(&mut grad, 1.0, &g);
        }
    }
    for g in &mut grad {
        *g /= count;
    }
    Ok((grad, loss / count))
}

/// The standard mini-batch gradient estimator: average over the batch and
/// the `P` resamples of `w_t * grad_theta |s_theta(X, t) - target|^2`.
pub fn gradient_estimate(
    model: &ScoreModel,
    batch: &[&[f64]],
    config: &TrainConfig,
    schedule: &Schedule,
    noise: &NoiseDraws,
) -> Result<Vec<f64>> {
    Ok(gradient_estimate_with_loss(model, batch, config, schedule, noise)?.0)
}

/// Seeded Fisher-Yates prefix: `batch_size` indices drawn uniformly
/// without replacement from `0..n`.
fn draw_batch(rng: &mut ChaCha8Rng, n: usize, batch_size: usize) -> Vec<usize> {
    use rand::Rng;
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..batch_size {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(batch_size);
    idx
}

fn draw_noise(
    rng: &mut ChaCha8Rng,
    count: usize,
    dim: usize,
    weighting: &TimeWeighting,
    weight_fn: TimeWeightFn,
) -> Result<NoiseDraws> {
    let mut tuples = Vec::with_capacity(count);
    for _ in 0..count {
        let t = sample_time(weighting, |u| weight_fn.eval(u), rng)?;
        let xi = standard_normal_vec(rng, dim);
        tuples.push((t, xi));
    }
    Ok(NoiseDraws { tuples })
}

/// Per-step trace record (emitted behind a verbosity flag by the runner).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct StepTrace {
    pub step: usize,
    pub loss_est: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    pub theta_norm: f64,
}

/// All randomness one SGD step consumes, drawn up-front so a coupled pair
/// can share it verbatim.
struct StepDraws {
    batch: Vec<usize>,
    noise: NoiseDraws,
    /// Fresh resamples for the Gaussian scheme's moment estimation.
    cov_noises: Vec<NoiseDraws>,
    /// The injected Gaussian vector of the noisy update.
    gauss_xi: Vec<f64>,
}

fn draw_step(
    rng: &mut ChaCha8Rng,
    n_data: usize,
    dim: usize,
    param_dim: usize,
    config: &TrainConfig,
    weighting: &TimeWeighting,
) -> Result<StepDraws> {
    let batch = draw_batch(rng, n_data, config.batch_size);
    let count = config.batch_size * config.resamples;
    match config.noise_mode {
        NoiseMode::PathwiseSgd => {
            let noise = draw_noise(rng, count, dim, weighting, config.time_weight)?;
            Ok(StepDraws {
                batch,
                noise,
                cov_noises: Vec::new(),
                gauss_xi: Vec::new(),
            })
        }
        NoiseMode::GaussianApprox { n_inner_cov } => {
            let noise = draw_noise(rng, count, dim, weighting, config.time_weight)?;
            let mut cov_noises = Vec::with_capacity(n_inner_cov);
            for _ in 0..n_inner_cov {
                cov_noises.push(draw_noise(rng, count, dim, weighting, config.time_weight)?);
            }
            let gauss_xi = standard_normal_vec(rng, param_dim);
            Ok(StepDraws {
                batch,
                noise,
                cov_noises,
                gauss_xi,
            })
        }
    }
}

fn gather<'a>(dataset: &'a Dataset, batch: &[usize]) -> Vec<&'a [f64]> {
    batch.iter().map(|&i| dataset.point(i)).collect()
}

/// One pathwise SGD step; returns the new parameters and the trace entry.
fn sgd_step(
    model: &ScoreModel,
    dataset: &Dataset,
    config: &TrainConfig,
    schedule: &Schedule,
    draws: &StepDraws,
    k: usize,
) -> Result<(Vec<f64>, StepTrace)> {
    let batch = gather(dataset, &draws.batch);
    let (grad, loss) = gradient_estimate_with_loss(model, &batch, config, schedule, &draws.noise)?;
    let grad_norm = linalg::norm(&grad);
    let clipped = clip(&grad, config.clip);
    let eta = config.step_sizes.at(k);
    let theta = model.params().unwrap();
    let mut next = linalg::scale(theta, 1.0 - eta * config.weight_decay);
    linalg::axpy(&mut next, -eta, &clipped);
    if !linalg::all_finite(&next) {
        return Err(Error::DivergedRun { step: k });
    }
    let theta_norm = linalg::norm(&next);
    Ok((
        next,
        StepTrace {
            step: k,
            loss_est: loss,
            grad_norm,
            clipped: grad_norm > config.clip,
            theta_norm,
        },
    ))
}

/// Plug-in conditional mean and covariance of the clipped gradient over the
/// step's fresh resamples (batch held fixed). Returns `(mean, sqrt_cov)`.
fn clipped_gradient_moments(
    model: &ScoreModel,
    dataset: &Dataset,
    config: &TrainConfig,
    schedule: &Schedule,
    draws: &StepDraws,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n_param = model.param_len();
    let batch = gather(dataset, &draws.batch);
    let reps = draws.cov_noises.len();
    let mut grads = Vec::with_capacity(reps);
    for noise in &draws.cov_noises {
        let g = gradient_estimate(model, &batch, config, schedule, noise)?;
        grads.push(clip(&g, config.clip));
    }
    let mut mean = vec![0.0; n_param];
    for g in &grads {
        linalg::axpy(&mut mean, 1.0 / reps as f64, g);
    }
    let mut cov = DMatrix::zeros(n_param, n_param);
    if reps >= 2 {
        for g in &grads {
            let d = linalg::sub(g, &mean);
            for a in 0..n_param {
                for b in 0..n_param {
                    cov[(a, b)] += d[a] * d[b];
                }
            }
        }
        cov /= (reps - 1) as f64;
    }
    // Symmetric square root with negative eigenvalues clamped to zero; the
    // sample covariance is PSD up to roundoff, and anything materially
    // negative indicates a numerics bug.
    let e = sym_eigen(&cov)?;
    debug_assert!(
        e.values.iter().all(|&l| l >= -1e-10),
        "sample covariance eigenvalue below the pre-clamp floor"
    );
    let mut sqrt = DMatrix::zeros(n_param, n_param);
    for i in 0..n_param {
        let l = e.values[i].max(0.0);
        let s = l.sqrt();
        for a in 0..n_param {
            for b in 0..n_param {
                sqrt[(a, b)] += s * e.vectors[(a, i)] * e.vectors[(b, i)];
            }
        }
    }
    Ok((mean, sqrt))
}

/// Clipped SGD with weight decay (pathwise noise), returning the trained
/// model and the per-step trace.
pub fn sgd_run_traced(
    model: &ScoreModel,
    dataset: &Dataset,
    config: &TrainConfig,
    schedule: &Schedule,
    weighting: &TimeWeighting,
    seed: u64,
) -> Result<(ScoreModel, Vec<StepTrace>)> {
    config.validate(dataset.len())?;
    if model.param_len() == 0 {
        return Err(Error::unsupported("sgd requires a parametric model"));
    }
    let mut rng = rng_from(seed);
    let mut current = model.clone();
    let mut trace = Vec::with_capacity(config.num_steps);
    for k in 0..config.num_steps {
        let draws = draw_step(
            &mut rng,
            dataset.len(),
            dataset.dim(),
            model.param_len(),
            config,
            weighting,
        )?;
        let (next, entry) = sgd_step(&current, dataset, config, schedule, &draws, k)?;
        current = current.with_params(next)?;
        trace.push(entry);
    }
    Ok((current, trace))
}

pub fn sgd_run(
    model: &ScoreModel,
    dataset: &Dataset,
    config: &TrainConfig,
    schedule: &Schedule,
    weighting: &TimeWeighting,
    seed: u64,
) -> Result<ScoreModel> {
    Ok(sgd_run_traced(model, dataset, config, schedule, weighting, seed)?.0)
}

/// The Gaussian-noise-approximated scheme: per step, estimate the
/// conditional mean and covariance of the clipped gradient over fresh
/// resamples, then update
/// `theta <- (1 - eta lambda) theta - eta mean + eta sqrt_cov xi`.
pub fn sgd_gaussian_run(
    model: &ScoreModel,
    dataset: &Dataset,
    config: &TrainConfig,
    schedule: &Schedule,
    weighting: &TimeWeighting,
    seed: u64,
) -> Result<ScoreModel> {
    config.validate(dataset.len())?;
    let n_param = model.param_len();
    if n_param == 0 {
        return Err(Error::unsupported("sgd requires a parametric model"));
    }
    if n_param > GAUSSIAN_PARAM_CEILING {
        return Err(Error::config(format!(
            "gaussian scheme covariance is {n_param} x {n_param}; ceiling is {GAUSSIAN_PARAM_CEILING}"
        )));
    }
    if !matches!(config.noise_mode, NoiseMode::GaussianApprox { .. }) {
        return Err(Error::config("config noise_mode must be GaussianApprox"));
    }
    let mut rng = rng_from(seed);
    let mut current = model.clone();
    for k in 0..config.num_steps {
        let draws = draw_step(
            &mut rng,
            dataset.len(),
            dataset.dim(),
            n_param,
            config,
            weighting,
        )?;
        let (mean, sqrt_cov) =
            clipped_gradient_moments(&current, dataset, config, schedule, &draws)?;
        let eta = config.step_sizes.at(k);
        let theta = current.params().unwrap();
        let mut next = linalg::scale(theta, 1.0 - eta * config.weight_decay);
        linalg::axpy(&mut next, -eta, &mean);
        linalg::axpy(&mut next, eta, &mat_vec(&sqrt_cov, &draws.gauss_xi));
        if !linalg::all_finite(&next) {
            return Err(Error::DivergedRun { step: k });
        }
        current = current.with_params(next)?;
    }
    Ok(current)
}

/// Dictionary empirical risk minimisation: assemble the normal equations of
/// the quadratic denoising objective by Monte Carlo over `(i, t, xi)` and
/// solve with the pseudo-inverse (minimum-norm on rank deficiency).
pub fn erm_dictionary(
    dataset: &Dataset,
    basis: &FeatureBasis,
    schedule: &Schedule,
    weighting: &TimeWeighting,
    n_mc: usize,
    seed: u64,
) -> Result<ScoreModel> {
    if basis.count() > ERM_BASIS_CEILING {
        return Err(Error::config(format!(
            "basis count {} exceeds the ERM ceiling {ERM_BASIS_CEILING}",
            basis.count()
        )));
    }
    if n_mc < 2 {
        return Err(Error::domain("erm requires n_mc >= 2"));
    }
    use rand::Rng;
    let m = basis.count();
    let d = dataset.dim();
    let mut gram = DMatrix::zeros(m, m);
    let mut rhs = vec![0.0; m];
    let mut rng = rng_from(seed);
    let mut features = vec![vec![0.0; d]; m];
    for _ in 0..n_mc {
        let i = rng.random_range(0..dataset.len());
        let x0 = dataset.point(i);
        let t = sample_time(weighting, |_| 1.0, &mut rng)?;
        let k = kernel_coeffs(schedule, t)?;
        let xi = standard_normal_vec(&mut rng, d);
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
        for (j, f) in features.iter_mut().enumerate() {
            basis.eval_feature(j, schedule, &x_t, t, f)?;
        }
        for a in 0..m {
            rhs[a] += linalg::dot(&features[a], &target);
            for b in a..m {
                let v = linalg::dot(&features[a], &features[b]);
                gram[(a, b)] += v;
                if a != b {
                    gram[(b, a)] += v;
                }
            }
        }
    }
    gram /= n_mc as f64;
    let rhs: Vec<f64> = rhs.iter().map(|v| v / n_mc as f64).collect();
    let pinv = pinv_psd(&gram, 1e-12)?;
    let weights = mat_vec(&pinv, &rhs);
    ScoreModel::dictionary(*schedule, basis.clone(), weights, None)
}

/// A score-matching algorithm handle: maps `(dataset, seed)` to a model.
#[derive(Clone, Debug)]
pub enum Trainer {
    /// Ignores the data entirely (stability constant 0).
    Constant { model: ScoreModel },
    /// Returns the closed-form empirical score of the dataset.
    EmpiricalScore { schedule: Schedule },
    ErmDictionary {
        basis: FeatureBasis,
        schedule: Schedule,
        n_mc: usize,
    },
    Sgd {
        model0: ScoreModel,
        config: TrainConfig,
        schedule: Schedule,
    },
}

impl Trainer {
    pub fn train(
        &self,
        dataset: &Dataset,
        weighting: &TimeWeighting,
        seed: u64,
    ) -> Result<ScoreModel> {
        match self {
            Trainer::Constant { model } => Ok(model.clone()),
            Trainer::EmpiricalScore { schedule } => {
                Ok(ScoreModel::empirical_mixture(*schedule, dataset.clone()))
            }
            Trainer::ErmDictionary {
                basis,
                schedule,
                n_mc,
            } => erm_dictionary(dataset, basis, schedule, weighting, *n_mc, seed),
            Trainer::Sgd {
                model0,
                config,
                schedule,
            } => match config.noise_mode {
                NoiseMode::PathwiseSgd => sgd_run(model0, dataset, config, schedule, weighting, seed),
                NoiseMode::GaussianApprox { .. } => {
                    sgd_gaussian_run(model0, dataset, config, schedule, weighting, seed)
                }
            },
        }
    }
}

/// Result of training on two adjacent datasets under one shared randomness
/// stream.
#[derive(Clone, Debug)]
pub struct CoupledRunResult {
    pub model_a: ScoreModel,
    pub model_b: ScoreModel,
    pub theta_a: Vec<f64>,
    pub theta_b: Vec<f64>,
    /// First step after which the parameter vectors differed bitwise
    /// (`Some(0)` for single-shot trainers on differing data).
    pub divergence_step: Option<usize>,
    /// Per-step `|theta_a - theta_b|` for the iterative trainers.
    pub trace: Option<Vec<f64>>,
}

/// Train on both datasets with the identical stream of mini-batch indices,
/// times, noises, and (Gaussian mode) injected noise vectors. Datasets must
/// differ in at most one index.
pub fn coupled_train(
    dataset_a: &Dataset,
    dataset_b: &Dataset,
    trainer: &Trainer,
    weighting: &TimeWeighting,
    shared_seed: u64,
) -> Result<CoupledRunResult> {
    let differing = dataset_a.differing_indices(dataset_b)?;
    if differing.len() > 1 {
        return Err(Error::contract(format!(
            "adjacent datasets must differ in at most one index, found {}",
            differing.len()
        )));
    }

    match trainer {
        Trainer::Sgd {
            model0,
            config,
            schedule,
        } => coupled_sgd(
            model0,
            dataset_a,
            dataset_b,
            config,
            schedule,
            weighting,
            shared_seed,
        ),
        _ => {
            let model_a = trainer.train(dataset_a, weighting, shared_seed)?;
            let model_b = trainer.train(dataset_b, weighting, shared_seed)?;
            let theta_a = model_a.flat_state();
            let theta_b = model_b.flat_state();
            let divergence_step = if theta_a == theta_b { None } else { Some(0) };
            Ok(CoupledRunResult {
                model_a,
                model_b,
                theta_a,
                theta_b,
                divergence_step,
                trace: None,
            })
        }
    }
}

fn coupled_sgd(
    model0: &ScoreModel,
    dataset_a: &Dataset,
    dataset_b: &Dataset,
    config: &TrainConfig,
    schedule: &Schedule,
    weighting: &TimeWeighting,
    seed: u64,
) -> Result<CoupledRunResult> {
    config.validate(dataset_a.len())?;
    let n_param = model0.param_len();
    if n_param == 0 {
        return Err(Error::unsupported("sgd requires a parametric model"));
    }
    if matches!(config.noise_mode, NoiseMode::GaussianApprox { .. })
        && n_param > GAUSSIAN_PARAM_CEILING
    {
        return Err(Error::config("parameter dimension above gaussian ceiling"));
    }
    let mut rng = rng_from(seed);
    let mut a = model0.clone();
    let mut b = model0.clone();
    let mut divergence_step = None;
    let mut trace = Vec::with_capacity(config.num_steps);
    for k in 0..config.num_steps {
        let draws = draw_step(
            &mut rng,
            dataset_a.len(),
            dataset_a.dim(),
            n_param,
            config,
            weighting,
        )?;
        let (next_a, next_b) = match config.noise_mode {
            NoiseMode::PathwiseSgd => {
                let (na, _) = sgd_step(&a, dataset_a, config, schedule, &draws, k)?;
                let (nb, _) = sgd_step(&b, dataset_b, config, schedule, &draws, k)?;
                (na, nb)
            }
            NoiseMode::GaussianApprox { .. } => {
                let eta = config.step_sizes.at(k);
                let step = |model: &ScoreModel, data: &Dataset| -> Result<Vec<f64>> {
                    let (mean, sqrt_cov) =
                        clipped_gradient_moments(model, data, config, schedule, &draws)?;
                    let mut next =
                        linalg::scale(model.params().unwrap(), 1.0 - eta * config.weight_decay);
                    linalg::axpy(&mut next, -eta, &mean);
                    linalg::axpy(&mut next, eta, &mat_vec(&sqrt_cov, &draws.gauss_xi));
                    if !linalg::all_finite(&next) {
                        return Err(Error::DivergedRun { step: k });
                    }
                    Ok(next)
                };
                (step(&a, dataset_a)?, step(&b, dataset_b)?)
            }
        };
        if divergence_step.is_none() && next_a != next_b {
            divergence_step = Some(k);
        }
        trace.push(linalg::dist(&next_a, &next_b));
        a = a.with_params(next_a)?;
        b = b.with_params(next_b)?;
    }
    let theta_a = a.flat_state();
    let theta_b = b.flat_state();
    Ok(CoupledRunResult {
        model_a: a,
        model_b: b,
        theta_a,
        theta_b,
        divergence_step,
        trace: Some(trace),
    })
}

/// How the injected noise of the Gaussian scheme is coupled across the two
/// trajectories of a coupled run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GaussianNoiseCoupling {
    /// Both chains consume the identical noise vector (the shared-stream
    /// coupling used by [`coupled_train`]).
    Shared,
    /// Reflection/merge coupling of the noise over a common floor; the
    /// construction the long-run boundedness argument actually uses.
    Reflection,
}

/// Coupled divergence experiment for the Gaussian scheme: trains the pair
/// on adjacent datasets and records `|theta_a - theta_b|` at the requested
/// checkpoints (sorted, 1-based step counts). With `noise_enabled = false`
/// the injected noise is dropped and the dynamics reduce to the
/// deterministic mean update; the checkpoint contrast between the two
/// settings is the long-run boundedness experiment.
#[allow(clippy::too_many_arguments)]
pub fn coupled_gaussian_divergence(
    model0: &ScoreModel,
    dataset_a: &Dataset,
    dataset_b: &Dataset,
    config: &TrainConfig,
    schedule: &Schedule,
    weighting: &TimeWeighting,
    noise_coupling: GaussianNoiseCoupling,
    noise_enabled: bool,
    floor_fraction: f64,
    record_at: &[usize],
    seed: u64,
) -> Result<Vec<f64>> {
    config.validate(dataset_a.len())?;
    let differing = dataset_a.differing_indices(dataset_b)?;
    if differing.len() > 1 {
        return Err(Error::contract("datasets must be adjacent"));
    }
    let n_param = model0.param_len();
    if n_param == 0 || n_param > GAUSSIAN_PARAM_CEILING {
        return Err(Error::config("parameter dimension unsupported"));
    }
    if !matches!(config.noise_mode, NoiseMode::GaussianApprox { .. }) {
        return Err(Error::config("config noise_mode must be GaussianApprox"));
    }
    let max_step = *record_at.iter().max().unwrap_or(&config.num_steps);

    let mut rng = rng_from(seed);
    let mut a = model0.clone();
    let mut b = model0.clone();

    // Noise floor for the reflection coupling: a conservative fraction of
    // the initial-step noise covariance, estimated once.
    let floor = if noise_coupling == GaussianNoiseCoupling::Reflection && noise_enabled {
        let draws = draw_step(
            &mut rng,
            dataset_a.len(),
            dataset_a.dim(),
            n_param,
            config,
            weighting,
        )?;
        let (_, sqrt_cov) = clipped_gradient_moments(&a, dataset_a, config, schedule, &draws)?;
        let eta0 = config.step_sizes.at(0);
        let cov0 = (&sqrt_cov * sqrt_cov.transpose()) * (eta0 * eta0);
        Some(NoiseFloor::new(cov0 * floor_fraction)?)
    } else {
        None
    };

    // Excess factor with negative eigenvalues clamped: the floor is a
    // calibrated estimate, so small violations are expected noise.
    let clamped_excess = |cov: &DMatrix<f64>, g: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let excess = cov - g;
        let e = sym_eigen(&excess)?;
        let n = e.values.len();
        let mut s = DMatrix::zeros(n, n);
        for i in 0..n {
            let l = e.values[i].max(0.0).sqrt();
            for p in 0..n {
                for q in 0..n {
                    s[(p, q)] += l * e.vectors[(p, i)] * e.vectors[(q, i)];
                }
            }
        }
        Ok(s)
    };

    let mut out = Vec::with_capacity(record_at.len());
    for k in 0..max_step {
        let draws = draw_step(
            &mut rng,
            dataset_a.len(),
            dataset_a.dim(),
            n_param,
            config,
            weighting,
        )?;
        let eta = config.step_sizes.at(k);
        let decay = 1.0 - eta * config.weight_decay;
        let (mean_a, sqrt_a) = clipped_gradient_moments(&a, dataset_a, config, schedule, &draws)?;
        let (mean_b, sqrt_b) = clipped_gradient_moments(&b, dataset_b, config, schedule, &draws)?;
        let mut tilde_a = linalg::scale(a.params().unwrap(), decay);
        linalg::axpy(&mut tilde_a, -eta, &mean_a);
        let mut tilde_b = linalg::scale(b.params().unwrap(), decay);
        linalg::axpy(&mut tilde_b, -eta, &mean_b);

        let (next_a, next_b) = if !noise_enabled {
            (tilde_a, tilde_b)
        } else {
            match noise_coupling {
                GaussianNoiseCoupling::Shared => {
                    let mut na = tilde_a;
                    linalg::axpy(&mut na, eta, &mat_vec(&sqrt_a, &draws.gauss_xi));
                    let mut nb = tilde_b;
                    linalg::axpy(&mut nb, eta, &mat_vec(&sqrt_b, &draws.gauss_xi));
                    (na, nb)
                }
                GaussianNoiseCoupling::Reflection => {
                    let floor = floor.as_ref().unwrap();
                    let cov_a = (&sqrt_a * sqrt_a.transpose()) * (eta * eta);
                    let cov_b = (&sqrt_b * sqrt_b.transpose()) * (eta * eta);
                    let ex_a = clamped_excess(&cov_a, floor.g())?;
                    let ex_b = clamped_excess(&cov_b, floor.g())?;
                    let mut hat_a = tilde_a;
                    linalg::axpy(&mut hat_a, 1.0, &mat_vec(&ex_a, &draws.gauss_xi));
                    let mut hat_b = tilde_b;
                    linalg::axpy(&mut hat_b, 1.0, &mat_vec(&ex_b, &draws.gauss_xi));
                    // The eta scaling lives inside the floor matrix, so the
                    // floor noise runs at unit step with a wide window.
                    let coupled =
                        couple_floor_noise(floor, 1.0, 3.0, f64::MAX, &hat_a, &hat_b, &mut rng);
                    (coupled.x_next, coupled.y_next)
                }
            }
        };
        if !linalg::all_finite(&next_a) || !linalg::all_finite(&next_b) {
            return Err(Error::DivergedRun { step: k });
        }
        a = a.with_params(next_a)?;
        b = b.with_params(next_b)?;
        if record_at.contains(&(k + 1)) {
            out.push(linalg::dist(a.params().unwrap(), b.params().unwrap()));
        }
    }
    Ok(out)
}
