//! Python bindings for the scorelab diffusion laboratory: the noise
//! schedule, score models, losses, backward samplers and the contraction
//! metric, with the same determinism contract as the Rust API.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use scorelab::losses::DataSource;
use scorelab::process;
use scorelab::sampling;
use scorelab::scores;
use scorelab::training;

fn err(e: scorelab::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Noise schedule of the forward process.
#[pyclass(name = "Schedule", from_py_object)]
#[derive(Clone)]
struct PySchedule {
    inner: process::Schedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    fn new(alpha: f64, horizon: f64, early_stop: f64) -> PyResult<Self> {
        Ok(PySchedule {
            inner: process::Schedule::new(alpha, horizon, early_stop).map_err(err)?,
        })
    }

    /// `(mu_t, sigma_t^2)` of the transition kernel.
    fn kernel_coeffs(&self, t: f64) -> PyResult<(f64, f64)> {
        let k = process::kernel_coeffs(&self.inner, t).map_err(err)?;
        Ok((k.mean_scale, k.var))
    }

    fn prior_variance(&self) -> f64 {
        self.inner.prior_variance()
    }

    fn __repr__(&self) -> String {
        format!(
            "Schedule(alpha={}, horizon={}, early_stop={})",
            self.inner.alpha(),
            self.inner.horizon(),
            self.inner.early_stop()
        )
    }
}

/// A score model with a uniform evaluate surface.
#[pyclass(name = "ScoreModel", from_py_object)]
#[derive(Clone)]
struct PyScoreModel {
    inner: scores::ScoreModel,
}

#[pymethods]
impl PyScoreModel {
    /// Exact empirical-mixture score of a dataset.
    #[staticmethod]
    fn empirical_mixture(schedule: PySchedule, points: Vec<Vec<f64>>) -> PyResult<Self> {
        let dataset = scores::Dataset::new(points).map_err(err)?;
        Ok(PyScoreModel {
            inner: scores::ScoreModel::empirical_mixture(schedule.inner, dataset),
        })
    }

    /// Exact score of an isotropic Gaussian target.
    #[staticmethod]
    fn analytic_gaussian(
        schedule: PySchedule,
        mean: Vec<f64>,
        cov_scale: f64,
    ) -> PyResult<Self> {
        Ok(PyScoreModel {
            inner: scores::ScoreModel::analytic_gaussian(schedule.inner, mean, cov_scale)
                .map_err(err)?,
        })
    }

    fn evaluate(&self, x: Vec<f64>, t: f64) -> PyResult<Vec<f64>> {
        self.inner.evaluate(&x, t).map_err(err)
    }

    fn ambient_dim(&self) -> usize {
        self.inner.ambient_dim()
    }

    /// JSON serialisation of the model (variant-tagged numeric arrays).
    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

/// Timestep grid `t_0 .. t_K`.
#[pyfunction]
fn build_step_grid(schedule: PySchedule, kappa: f64) -> PyResult<Vec<f64>> {
    Ok(process::build_step_grid(&schedule.inner, kappa)
        .map_err(err)?
        .times)
}

/// Norm clipping `(1 and C/|v|) v`.
#[pyfunction]
fn clip(v: Vec<f64>, c: f64) -> Vec<f64> {
    training::clip(&v, c)
}

/// The concave-then-quadratic contraction metric.
#[pyfunction]
fn f_metric(a: f64, r1: f64, r2: f64, r: f64) -> PyResult<f64> {
    let fm = scorelab::coupling::FMetric::new(a, r1, r2).map_err(err)?;
    Ok(scorelab::coupling::f_metric(&fm, r))
}

/// Monte-Carlo denoising loss of a model over a dataset with a uniform
/// time weighting on `[t_lo, t_hi]`. Returns `(value, std_error)`.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn estimate_dsm(
    model: PyScoreModel,
    points: Vec<Vec<f64>>,
    schedule: PySchedule,
    t_lo: f64,
    t_hi: f64,
    n_mc: usize,
    seed: u64,
) -> PyResult<(f64, f64)> {
    let dataset = scores::Dataset::new(points).map_err(err)?;
    let weighting = process::TimeWeighting::uniform(&schedule.inner, t_lo, t_hi).map_err(err)?;
    let est = scorelab::losses::estimate_dsm(
        &model.inner,
        &DataSource::Empirical(dataset),
        &schedule.inner,
        &weighting,
        n_mc,
        1,
        seed,
    )
    .map_err(err)?;
    Ok((est.value, est.std_error))
}

/// Backward samples from the exponential integrator over the grid with
/// coarseness `kappa`.
#[pyfunction]
fn sample_backward(
    model: PyScoreModel,
    schedule: PySchedule,
    kappa: f64,
    num_samples: usize,
    seed: u64,
) -> PyResult<Vec<Vec<f64>>> {
    let grid = process::build_step_grid(&schedule.inner, kappa).map_err(err)?;
    let config = sampling::SamplerConfig {
        grid,
        schedule: schedule.inner,
        num_samples,
        integrator: sampling::Integrator::ExponentialIntegrator,
    };
    Ok(sampling::sample_backward(&model.inner, &config, seed)
        .map_err(err)?
        .samples)
}

/// Nearest training point of each sample: `(index, distance)` pairs.
#[pyfunction]
fn memorization_profile(
    samples: Vec<Vec<f64>>,
    points: Vec<Vec<f64>>,
) -> PyResult<Vec<(usize, f64)>> {
    let dataset = scores::Dataset::new(points).map_err(err)?;
    Ok(sampling::memorization_profile(&samples, &dataset))
}

/// Sliced 1-Wasserstein distance between two sample clouds.
#[pyfunction]
fn sliced_wasserstein1(
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    n_projections: usize,
    seed: u64,
) -> f64 {
    sampling::sliced_wasserstein1(&a, &b, n_projections, seed)
}

/// Uniform samples on the circle embedded in the first two coordinates.
#[pyfunction]
fn generate_circle(n: usize, radius: f64, ambient_dim: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let spec = scorelab::lab::ManifoldSpec::circle(radius, ambient_dim).map_err(err)?;
    Ok(scorelab::lab::generate(&spec, n, seed)
        .map_err(err)?
        .points()
        .to_vec())
}

#[pymodule]
fn scorelab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchedule>()?;
    m.add_class::<PyScoreModel>()?;
    m.add_function(wrap_pyfunction!(build_step_grid, m)?)?;
    m.add_function(wrap_pyfunction!(clip, m)?)?;
    m.add_function(wrap_pyfunction!(f_metric, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_dsm, m)?)?;
    m.add_function(wrap_pyfunction!(sample_backward, m)?)?;
    m.add_function(wrap_pyfunction!(memorization_profile, m)?)?;
    m.add_function(wrap_pyfunction!(sliced_wasserstein1, m)?)?;
    m.add_function(wrap_pyfunction!(generate_circle, m)?)?;
    Ok(())
}
