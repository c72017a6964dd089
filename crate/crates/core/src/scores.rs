//! Score-function families with a uniform evaluate / parameter-gradient
//! surface: the analytic Gaussian score, the exact empirical-mixture score,
//! a linear dictionary over bounded features, and a small tanh MLP with
//! hand-rolled reverse-mode gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::process::{kernel_coeffs, Schedule};
use crate::rng::rng_from;

/// A finite dataset of ambient-dimension `d` points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DatasetRaw", into = "DatasetRaw")]
pub struct Dataset {
    points: Vec<Vec<f64>>,
    dim: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DatasetRaw {
    points: Vec<Vec<f64>>,
}

impl TryFrom<DatasetRaw> for Dataset {
    type Error = Error;
    fn try_from(r: DatasetRaw) -> Result<Self> {
        Dataset::new(r.points)
    }
}

impl From<Dataset> for DatasetRaw {
    fn from(d: Dataset) -> Self {
        DatasetRaw { points: d.points }
    }
}

impl Dataset {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        let dim = match points.first() {
            Some(p) => p.len(),
            None => return Err(Error::domain("dataset must contain at least one point")),
        };
        if dim == 0 {
            return Err(Error::domain("dataset points must be non-empty vectors"));
        }
        for p in &points {
            if p.len() != dim {
                return Err(Error::domain("dataset points must share one ambient dimension"));
            }
            if !linalg::all_finite(p) {
                return Err(Error::domain("dataset points must be finite"));
            }
        }
        Ok(Dataset { points, dim })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i]
    }

    /// Dataset with entry `i` replaced (the adjacent dataset `S^i`).
    pub fn with_replacement(&self, i: usize, x: Vec<f64>) -> Result<Self> {
        if i >= self.points.len() {
            return Err(Error::domain("replacement index out of range"));
        }
        if x.len() != self.dim {
            return Err(Error::domain("replacement point has wrong dimension"));
        }
        let mut points = self.points.clone();
        points[i] = x;
        Dataset::new(points)
    }

    /// Indices where two equal-shape datasets differ.
    pub fn differing_indices(&self, other: &Dataset) -> Result<Vec<usize>> {
        if self.len() != other.len() || self.dim != other.dim {
            return Err(Error::contract("datasets must have equal shape"));
        }
        Ok((0..self.len())
            .filter(|&i| self.points[i] != other.points[i])
            .collect())
    }

    pub fn flattened(&self) -> Vec<f64> {
        self.points.iter().flatten().cloned().collect()
    }
}

/// One dictionary feature. `Bump` is the standard class: a Gaussian bump
/// times a fixed axis direction, post-scaled by `1/sigma_t^2` so that any
/// two weight vectors in an l1 ball of radius `D/2` differ by at most
/// `D/sigma_t^2` in sup norm. `EmpiricalScore` and `Zero` exist so exact
/// reference directions can appear as features in least-squares checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Feature {
    Bump { center: Vec<f64>, axis: usize },
    EmpiricalScore { dataset: Dataset },
    Zero { dim: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureBasis {
    pub features: Vec<Feature>,
    pub bandwidth: f64,
}

impl FeatureBasis {
    pub fn new(features: Vec<Feature>, bandwidth: f64) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::domain("feature basis requires at least one feature"));
        }
        if !(bandwidth > 0.0) {
            return Err(Error::domain("feature bandwidth must be positive"));
        }
        Ok(FeatureBasis {
            features,
            bandwidth,
        })
    }

    /// Standard basis: every center contributes one bump per ambient axis.
    pub fn gaussian_bumps(centers: &[Vec<f64>], dim: usize, bandwidth: f64) -> Result<Self> {
        let mut features = Vec::with_capacity(centers.len() * dim);
        for c in centers {
            if c.len() != dim {
                return Err(Error::domain("bump center has wrong dimension"));
            }
            for axis in 0..dim {
                features.push(Feature::Bump {
                    center: c.clone(),
                    axis,
                });
            }
        }
        FeatureBasis::new(features, bandwidth)
    }

    pub fn count(&self) -> usize {
        self.features.len()
    }

    /// Evaluate feature `j` at `(x, t)` into `out` (overwritten).
    pub fn eval_feature(
        &self,
        j: usize,
        schedule: &Schedule,
        x: &[f64],
        t: f64,
        out: &mut [f64],
    ) -> Result<()> {
        out.fill(0.0);
        match &self.features[j] {
            Feature::Bump { center, axis } => {
                let k = kernel_coeffs(schedule, t)?;
                if k.var <= 0.0 {
                    return Err(Error::domain("dictionary features are singular at t = 0"));
                }
                let d2: f64 = x
                    .iter()
                    .zip(center)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                let bump = (-d2 / (2.0 * self.bandwidth * self.bandwidth)).exp();
                out[*axis] = bump / k.var;
            }
            Feature::EmpiricalScore { dataset } => {
                let s = empirical_score(dataset, schedule, x, t)?;
                out.copy_from_slice(&s);
            }
            Feature::Zero { .. } => {}
        }
        Ok(())
    }
}

/// Smooth nonlinearity for the MLP. `Relu` is exploratory only: it leaves
/// the smoothness regime the optimisation analysis assumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }
    fn derivative(&self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Fixed sinusoidal frequencies of the time embedding.
const TIME_FREQS: [f64; 4] = [1.0, 2.0, 4.0, 8.0];
/// Embedding width: raw t plus a (sin, cos) pair per frequency.
pub const TIME_EMBED_DIM: usize = 1 + 2 * TIME_FREQS.len();

fn time_embed(t: f64, out: &mut Vec<f64>) {
    out.push(t);
    for w in TIME_FREQS {
        out.push((w * t).sin());
        out.push((w * t).cos());
    }
}

/// A tagged score-function family with a uniform surface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant")]
pub enum ScoreModel {
    /// Exact score of `N(data_mean, data_cov_scale * I)` pushed through the
    /// forward process: `s(x, t) = -(x - mu_t m) / (mu_t^2 c + sigma_t^2)`.
    AnalyticGaussian {
        schedule: Schedule,
        data_mean: Vec<f64>,
        data_cov_scale: f64,
    },
    /// `grad log p_hat_t`, the closed-form score of the forward process
    /// started from the empirical measure of `dataset`.
    EmpiricalMixture { schedule: Schedule, dataset: Dataset },
    /// Linear dictionary `s(x, t) = sum_j w_j phi_j(x, t)`.
    Dictionary {
        schedule: Schedule,
        basis: FeatureBasis,
        weights: Vec<f64>,
        clamp: Option<f64>,
    },
    /// Fully-connected network on `[x, time_embed(t)]`.
    Mlp {
        layer_dims: Vec<usize>,
        params: Vec<f64>,
        activation: Activation,
    },
}

/// Numerically stable softmax posterior over the dataset points given an
/// observation of the noised process: weights are proportional to
/// `exp(-|x - mu_t x_i|^2 / (2 sigma_t^2))`. Returns `(weights, posterior_mean)`.
pub fn log_softmax_posterior(
    dataset: &Dataset,
    schedule: &Schedule,
    x: &[f64],
    t: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(t > 0.0) {
        return Err(Error::domain("posterior requires t > 0"));
    }
    let k = kernel_coeffs(schedule, t)?;
    if k.var <= 0.0 {
        return Err(Error::domain("posterior requires sigma_t^2 > 0"));
    }
    let n = dataset.len();
    let mut logits = Vec::with_capacity(n);
    let mut max_logit = f64::NEG_INFINITY;
    for p in dataset.points() {
        let d2: f64 = x
            .iter()
            .zip(p)
            .map(|(a, b)| {
                let r = a - k.mean_scale * b;
                r * r
            })
            .sum();
        let logit = -d2 / (2.0 * k.var);
        max_logit = max_logit.max(logit);
        logits.push(logit);
    }
    let mut weights: Vec<f64> = logits.iter().map(|l| (l - max_logit).exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    let mut mean = vec![0.0; dataset.dim()];
    for (w, p) in weights.iter().zip(dataset.points()) {
        linalg::axpy(&mut mean, *w, p);
    }
    Ok((weights, mean))
}

/// Closed-form empirical score `(mu_t E[X0 | Xt = x, S] - x) / sigma_t^2`.
pub fn empirical_score(
    dataset: &Dataset,
    schedule: &Schedule,
    x: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    let (_, mean) = log_softmax_posterior(dataset, schedule, x, t)?;
    let k = kernel_coeffs(schedule, t)?;
    Ok(x.iter()
        .zip(&mean)
        .map(|(xi, mi)| (k.mean_scale * mi - xi) / k.var)
        .collect())
}

impl ScoreModel {
    pub fn analytic_gaussian(
        schedule: Schedule,
        data_mean: Vec<f64>,
        data_cov_scale: f64,
    ) -> Result<Self> {
        if !(data_cov_scale > 0.0) {
            return Err(Error::domain("data covariance scale must be positive"));
        }
        Ok(ScoreModel::AnalyticGaussian {
            schedule,
            data_mean,
            data_cov_scale,
        })
    }

    pub fn empirical_mixture(schedule: Schedule, dataset: Dataset) -> Self {
        ScoreModel::EmpiricalMixture { schedule, dataset }
    }

    /// Dictionary model. With `clamp = Some(D)`, weight vectors are kept in
    /// the l1 ball of radius `D/2`, which bounds the scaled sup-norm
    /// difference of any two models in the class by `D/sigma_t^2`.
    pub fn dictionary(
        schedule: Schedule,
        basis: FeatureBasis,
        weights: Vec<f64>,
        clamp: Option<f64>,
    ) -> Result<Self> {
        if weights.len() != basis.count() {
            return Err(Error::domain("weight count must match feature count"));
        }
        let weights = match clamp {
            Some(d) if d > 0.0 => project_l1(weights, d / 2.0),
            Some(_) => return Err(Error::domain("clamp must be positive")),
            None => weights,
        };
        Ok(ScoreModel::Dictionary {
            schedule,
            basis,
            weights,
            clamp,
        })
    }

    /// MLP with uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialisation.
    /// `layer_dims` lists the full stack; the input layer must equal
    /// `ambient_dim + TIME_EMBED_DIM` and the output layer `ambient_dim`.
    pub fn mlp(layer_dims: Vec<usize>, activation: Activation, seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::domain("mlp needs at least input and output layers"));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::domain("mlp layer widths must be positive"));
        }
        let out = *layer_dims.last().unwrap();
        if layer_dims[0] != out + TIME_EMBED_DIM {
            return Err(Error::domain(format!(
                "mlp input width must be output + {TIME_EMBED_DIM} (time embedding)"
            )));
        }
        use rand::Rng;
        let mut rng = rng_from(seed);
        let mut params = Vec::new();
        for w in layer_dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_out * fan_in + fan_out {
                params.push(rng.random_range(-bound..bound));
            }
        }
        Ok(ScoreModel::Mlp {
            layer_dims,
            params,
            activation,
        })
    }

    /// Ambient dimension of inputs/outputs.
    pub fn ambient_dim(&self) -> usize {
        match self {
            ScoreModel::AnalyticGaussian { data_mean, .. } => data_mean.len(),
            ScoreModel::EmpiricalMixture { dataset, .. } => dataset.dim(),
            ScoreModel::Dictionary { basis, .. } => basis
                .features
                .iter()
                .find_map(|f| match f {
                    Feature::Bump { center, .. } => Some(center.len()),
                    Feature::EmpiricalScore { dataset } => Some(dataset.dim()),
                    Feature::Zero { dim } => Some(*dim),
                })
                .unwrap_or(0),
            ScoreModel::Mlp { layer_dims, .. } => *layer_dims.last().unwrap(),
        }
    }

    /// Trainable parameter count (0 for the exactly-known variants).
    pub fn param_len(&self) -> usize {
        match self {
            ScoreModel::Dictionary { weights, .. } => weights.len(),
            ScoreModel::Mlp { params, .. } => params.len(),
            _ => 0,
        }
    }

    pub fn params(&self) -> Option<&[f64]> {
        match self {
            ScoreModel::Dictionary { weights, .. } => Some(weights),
            ScoreModel::Mlp { params, .. } => Some(params),
            _ => None,
        }
    }

    /// The flat vector a coupled trainer compares bitwise: parameters for
    /// parametric models, the defining data otherwise.
    pub fn flat_state(&self) -> Vec<f64> {
        match self {
            ScoreModel::Dictionary { weights, .. } => weights.clone(),
            ScoreModel::Mlp { params, .. } => params.clone(),
            ScoreModel::EmpiricalMixture { dataset, .. } => dataset.flattened(),
            ScoreModel::AnalyticGaussian {
                data_mean,
                data_cov_scale,
                ..
            } => {
                let mut v = data_mean.clone();
                v.push(*data_cov_scale);
                v
            }
        }
    }

    /// New model with replaced parameters (trainers never mutate in place).
    pub fn with_params(&self, new_params: Vec<f64>) -> Result<Self> {
        match self {
            ScoreModel::Dictionary {
                schedule,
                basis,
                weights,
                clamp,
            } => {
                if new_params.len() != weights.len() {
                    return Err(Error::domain("parameter length mismatch"));
                }
                Ok(ScoreModel::Dictionary {
                    schedule: *schedule,
                    basis: basis.clone(),
                    weights: new_params,
                    clamp: *clamp,
                })
            }
            ScoreModel::Mlp {
                layer_dims,
                params,
                activation,
            } => {
                if new_params.len() != params.len() {
                    return Err(Error::domain("parameter length mismatch"));
                }
                Ok(ScoreModel::Mlp {
                    layer_dims: layer_dims.clone(),
                    params: new_params,
                    activation: *activation,
                })
            }
            _ => Err(Error::unsupported(
                "model variant has no trainable parameters",
            )),
        }
    }

    /// Evaluate the score at `(x, t)`.
    pub fn evaluate(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if !(t > 0.0) {
            return Err(Error::domain("score evaluation requires t > 0"));
        }
        match self {
            ScoreModel::AnalyticGaussian {
                schedule,
                data_mean,
                data_cov_scale,
            } => {
                let k = kernel_coeffs(schedule, t)?;
                let marginal_var = k.mean_scale * k.mean_scale * data_cov_scale + k.var;
                Ok(x.iter()
                    .zip(data_mean)
                    .map(|(xi, mi)| -(xi - k.mean_scale * mi) / marginal_var)
                    .collect())
            }
            ScoreModel::EmpiricalMixture { schedule, dataset } => {
                empirical_score(dataset, schedule, x, t)
            }
            ScoreModel::Dictionary {
                schedule,
                basis,
                weights,
                ..
            } => {
                let mut out = vec![0.0; x.len()];
                let mut feat = vec![0.0; x.len()];
                for (j, w) in weights.iter().enumerate() {
                    if *w == 0.0 {
                        continue;
                    }
                    basis.eval_feature(j, schedule, x, t, &mut feat)?;
                    linalg::axpy(&mut out, *w, &feat);
                }
                Ok(out)
            }
            ScoreModel::Mlp {
                layer_dims,
                params,
                activation,
            } => Ok(mlp_forward(layer_dims, params, *activation, x, t).output),
        }
    }

    /// `J^T cotangent` where `J = d s_theta(x, t) / d theta`. Exact for the
    /// dictionary (feature matrix transpose), reverse-mode for the MLP.
    pub fn param_gradient(&self, x: &[f64], t: f64, cotangent: &[f64]) -> Result<Vec<f64>> {
        if cotangent.len() != self.ambient_dim() {
            return Err(Error::domain("cotangent must have ambient dimension"));
        }
        match self {
            ScoreModel::Dictionary {
                schedule,
                basis,
                weights,
                ..
            } => {
                let mut grad = vec![0.0; weights.len()];
                let mut feat = vec![0.0; cotangent.len()];
                for (j, g) in grad.iter_mut().enumerate() {
                    basis.eval_feature(j, schedule, x, t, &mut feat)?;
                    *g = linalg::dot(&feat, cotangent);
                }
                Ok(grad)
            }
            ScoreModel::Mlp {
                layer_dims,
                params,
                activation,
            } => Ok(mlp_backward(layer_dims, params, *activation, x, t, cotangent)),
            _ => Err(Error::unsupported(
                "parameter gradient requires a Dictionary or Mlp model",
            )),
        }
    }
}

/// Project onto the l1 ball of the given radius (simple rescale; the
/// hypothesis class is the ball itself, so scaling stays inside it).
fn project_l1(mut w: Vec<f64>, radius: f64) -> Vec<f64> {
    let l1: f64 = w.iter().map(|x| x.abs()).sum();
    if l1 > radius {
        let s = radius / l1;
        for x in &mut w {
            *x *= s;
        }
    }
    w
}

struct MlpTrace {
    output: Vec<f64>,
    // Pre-activations per hidden layer plus the input vector.
    input: Vec<f64>,
    pre_acts: Vec<Vec<f64>>,
}

fn mlp_forward(
    layer_dims: &[usize],
    params: &[f64],
    act: Activation,
    x: &[f64],
    t: f64,
) -> MlpTrace {
    let mut input = Vec::with_capacity(layer_dims[0]);
    input.extend_from_slice(x);
    time_embed(t, &mut input);
    debug_assert_eq!(input.len(), layer_dims[0]);

    let n_layers = layer_dims.len() - 1;
    let mut pre_acts = Vec::with_capacity(n_layers);
    let mut a = input.clone();
    let mut offset = 0usize;
    for (l, w) in layer_dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let weights = &params[offset..offset + fan_out * fan_in];
        let biases = &params[offset + fan_out * fan_in..offset + fan_out * fan_in + fan_out];
        offset += fan_out * fan_in + fan_out;
        let mut z = vec![0.0; fan_out];
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &weights[o * fan_in..(o + 1) * fan_in];
            *zo = linalg::dot(row, &a) + biases[o];
        }
        let last = l == n_layers - 1;
        pre_acts.push(z.clone());
        a = if last {
            z
        } else {
            z.iter().map(|&v| act.apply(v)).collect()
        };
    }
    MlpTrace {
        output: a,
        input,
        pre_acts,
    }
}

fn mlp_backward(
    layer_dims: &[usize],
    params: &[f64],
    act: Activation,
    x: &[f64],
    t: f64,
    cotangent: &[f64],
) -> Vec<f64> {
    let trace = mlp_forward(layer_dims, params, act, x, t);
    let n_layers = layer_dims.len() - 1;

    // Activations entering each layer.
    let mut layer_inputs: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
    layer_inputs.push(trace.input.clone());
    for l in 0..n_layers - 1 {
        layer_inputs.push(trace.pre_acts[l].iter().map(|&z| act.apply(z)).collect());
    }

    let mut grad = vec![0.0; params.len()];
    // Adjoint of the layer output, starting from the cotangent at the
    // (linear) output layer.
    let mut delta: Vec<f64> = cotangent.to_vec();

    let mut offsets = Vec::with_capacity(n_layers);
    let mut off = 0usize;
    for w in layer_dims.windows(2) {
        offsets.push(off);
        off += w[1] * w[0] + w[1];
    }

    for l in (0..n_layers).rev() {
        let fan_in = layer_dims[l];
        let fan_out = layer_dims[l + 1];
        let off = offsets[l];
        let weights = &params[off..off + fan_out * fan_in];
        let a_in = &layer_inputs[l];

        // delta is the adjoint of the pre-activation for the output layer,
        // otherwise of the activation; convert via the derivative.
        let dz: Vec<f64> = if l == n_layers - 1 {
            delta.clone()
        } else {
            delta
                .iter()
                .zip(&trace.pre_acts[l])
                .map(|(d, &z)| d * act.derivative(z))
                .collect()
        };

        for o in 0..fan_out {
            let gw = &mut grad[off + o * fan_in..off + (o + 1) * fan_in];
            for (gi, ai) in gw.iter_mut().zip(a_in) {
                *gi += dz[o] * ai;
            }
            grad[off + fan_out * fan_in + o] += dz[o];
        }

        if l > 0 {
            let mut next = vec![0.0; fan_in];
            for o in 0..fan_out {
                let row = &weights[o * fan_in..(o + 1) * fan_in];
                linalg::axpy(&mut next, dz[o], row);
            }
            delta = next;
        }
    }
    grad
}
