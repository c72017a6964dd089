//! Declarative experiment configuration: a strict TOML schema (unknown
//! keys rejected) plus a scientific hash that ignores output paths and the
//! seed, so reruns and path moves keep the same identity.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lab::{ManifoldKind, ManifoldSpec};
use crate::process::{build_step_grid, discrete_weighting, Schedule, TimeWeighting};
use crate::sampling::Integrator;
use crate::scores::{Activation, FeatureBasis, ScoreModel};
use crate::training::{NoiseMode, StepSizes, TimeWeightFn, TrainConfig, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    Train,
    Sample,
    Stability,
    Coupling,
    Verify,
}

impl std::fmt::Display for PipelineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PipelineKind::Train => "train",
            PipelineKind::Sample => "sample",
            PipelineKind::Stability => "stability",
            PipelineKind::Coupling => "coupling",
            PipelineKind::Verify => "verify",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightingSpec {
    /// Normalised uniform density on `[lo, hi]`.
    Uniform { lo: f64, hi: f64 },
    /// The discrete weighting induced by the sampler grid with this kappa.
    Grid { kappa: f64 },
    /// Explicit `(time, weight)` atoms.
    Atoms { atoms: Vec<(f64, f64)> },
}

impl WeightingSpec {
    pub fn build(&self, schedule: &Schedule) -> Result<TimeWeighting> {
        match self {
            WeightingSpec::Uniform { lo, hi } => TimeWeighting::uniform(schedule, *lo, *hi),
            WeightingSpec::Grid { kappa } => {
                let grid = build_step_grid(schedule, *kappa)?;
                Ok(discrete_weighting(&grid, schedule))
            }
            WeightingSpec::Atoms { atoms } => TimeWeighting::discrete(schedule, atoms.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Circle { radius: f64, ambient_dim: usize, n: usize },
    GaussianBlobs { means: Vec<Vec<f64>>, scale: f64, n: usize },
    TwoPoint { separation: f64, n: usize },
}

impl DatasetSpec {
    pub fn manifold(&self) -> Result<ManifoldSpec> {
        let kind = match self {
            DatasetSpec::Circle { radius, ambient_dim, .. } => ManifoldKind::Circle {
                radius: *radius,
                ambient_dim: *ambient_dim,
            },
            DatasetSpec::GaussianBlobs { means, scale, .. } => ManifoldKind::GaussianBlobs {
                means: means.clone(),
                scale: *scale,
            },
            DatasetSpec::TwoPoint { separation, .. } => ManifoldKind::TwoPoint {
                separation: *separation,
            },
        };
        ManifoldSpec::new(kind)
    }

    pub fn n(&self) -> usize {
        match self {
            DatasetSpec::Circle { n, .. }
            | DatasetSpec::GaussianBlobs { n, .. }
            | DatasetSpec::TwoPoint { n, .. } => *n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AlgorithmSpec {
    /// Data-independent: always returns the analytic Gaussian score.
    Constant { mean_dim: usize, cov_scale: f64 },
    /// The closed-form empirical score of the training set.
    Empirical {},
    /// Dictionary ERM over Gaussian bumps on a circle of centers.
    Erm {
        n_mc: usize,
        num_centers: usize,
        center_radius: f64,
        bandwidth: f64,
    },
    /// Clipped SGD with weight decay on a dictionary or MLP model.
    Sgd {
        model: SgdModelSpec,
        eta: f64,
        decay: DecaySpec,
        weight_decay: f64,
        clip: f64,
        batch_size: usize,
        resamples: usize,
        num_steps: usize,
        noise: NoiseSpec,
        #[serde(default = "default_n_inner_cov")]
        n_inner_cov: usize,
    },
}

fn default_n_inner_cov() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum SgdModelSpec {
    Dictionary {
        num_centers: usize,
        center_radius: f64,
        bandwidth: f64,
    },
    Mlp {
        hidden: Vec<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecaySpec {
    Constant,
    Inverse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSpec {
    Pathwise,
    Gaussian,
}

/// Centers spread uniformly on a circle; the standard dictionary class.
pub fn circle_centers(num: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..num)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / num as f64;
            vec![radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

impl AlgorithmSpec {
    pub fn build_trainer(&self, schedule: &Schedule, ambient_dim: usize, seed: u64) -> Result<Trainer> {
        match self {
            AlgorithmSpec::Constant { mean_dim, cov_scale } => Ok(Trainer::Constant {
                model: ScoreModel::analytic_gaussian(*schedule, vec![0.0; *mean_dim], *cov_scale)?,
            }),
            AlgorithmSpec::Empirical {} => Ok(Trainer::EmpiricalScore {
                schedule: *schedule,
            }),
            AlgorithmSpec::Erm {
                n_mc,
                num_centers,
                center_radius,
                bandwidth,
            } => {
                let basis = FeatureBasis::gaussian_bumps(
                    &circle_centers(*num_centers, *center_radius),
                    ambient_dim,
                    *bandwidth,
                )?;
                Ok(Trainer::ErmDictionary {
                    basis,
                    schedule: *schedule,
                    n_mc: *n_mc,
                })
            }
            AlgorithmSpec::Sgd {
                model,
                eta,
                decay,
                weight_decay,
                clip,
                batch_size,
                resamples,
                num_steps,
                noise,
                n_inner_cov,
            } => {
                let model0 = match model {
                    SgdModelSpec::Dictionary {
                        num_centers,
                        center_radius,
                        bandwidth,
                    } => {
                        let basis = FeatureBasis::gaussian_bumps(
                            &circle_centers(*num_centers, *center_radius),
                            ambient_dim,
                            *bandwidth,
                        )?;
                        let m = basis.count();
                        ScoreModel::dictionary(*schedule, basis, vec![0.0; m], None)?
                    }
                    SgdModelSpec::Mlp { hidden } => {
                        let mut dims = vec![ambient_dim + crate::scores::TIME_EMBED_DIM];
                        dims.extend_from_slice(hidden);
                        dims.push(ambient_dim);
                        ScoreModel::mlp(dims, Activation::Tanh, seed)?
                    }
                };
                let config = TrainConfig {
                    step_sizes: match decay {
                        DecaySpec::Constant => StepSizes::Constant { eta: *eta },
                        DecaySpec::Inverse => StepSizes::InverseDecay { eta_bar: *eta },
                    },
                    weight_decay: *weight_decay,
                    clip: *clip,
                    batch_size: *batch_size,
                    resamples: *resamples,
                    num_steps: *num_steps,
                    time_weight: TimeWeightFn::Uniform,
                    noise_mode: match noise {
                        NoiseSpec::Pathwise => NoiseMode::PathwiseSgd,
                        NoiseSpec::Gaussian => NoiseMode::GaussianApprox {
                            n_inner_cov: *n_inner_cov,
                        },
                    },
                };
                Ok(Trainer::Sgd {
                    model0,
                    config,
                    schedule: *schedule,
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    pub integrator: IntegratorSpec,
    pub kappa: f64,
    pub num_samples: usize,
    #[serde(default)]
    pub dt: Option<f64>,
    /// Memorisation threshold for the nearest-neighbour fraction.
    #[serde(default = "default_nn_threshold")]
    pub nn_threshold: f64,
    /// Rerun the sampler at these early-stopping times.
    #[serde(default)]
    pub sweep_early_stop: Vec<f64>,
    /// Rerun the sampler at these grid coarseness values.
    #[serde(default)]
    pub sweep_kappa: Vec<f64>,
}

fn default_nn_threshold() -> f64 {
    0.05
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegratorSpec {
    Exponential,
    EulerMaruyama,
}

impl SamplerSpec {
    pub fn integrator(&self, schedule: &Schedule) -> Result<Integrator> {
        match self.integrator {
            IntegratorSpec::Exponential => Ok(Integrator::ExponentialIntegrator),
            IntegratorSpec::EulerMaruyama => {
                let dt = self.dt.ok_or_else(|| {
                    Error::config("euler_maruyama integrator requires a dt field")
                })?;
                if dt > schedule.early_stop() / 2.0 {
                    return Err(Error::config("dt must be at most early_stop / 2"));
                }
                Ok(Integrator::EulerMaruyama { dt })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilitySpec {
    pub n_datasets: usize,
    pub n_replacements: usize,
    pub n_mc: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSpec {
    pub eta: f64,
    pub lambda: f64,
    pub dim: usize,
    pub steps: usize,
    pub replicates: usize,
    /// Constant drift offset applied to the second chain along the first
    /// coordinate; a positive value produces a contraction floor.
    #[serde(default)]
    pub drift_offset: f64,
    pub metric_a: f64,
    pub switch_radius: f64,
    pub metric_r2: f64,
    #[serde(default = "default_initial_distance")]
    pub initial_distance: f64,
}

fn default_initial_distance() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySpec {
    pub harnack_trials: usize,
    pub harnack_t: f64,
    pub harnack_p: f64,
    #[serde(default = "default_harnack_mc")]
    pub harnack_mc: usize,
    pub chernoff_n: usize,
    pub chernoff_r: f64,
    pub chernoff_trials: usize,
}

fn default_harnack_mc() -> usize {
    100_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: String,
    #[serde(default)]
    pub verbose_trace: bool,
}

/// A complete, hashable description of one experiment run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: PipelineKind,
    pub seed: u64,
    pub schedule: Schedule,
    #[serde(default)]
    pub weighting: Option<WeightingSpec>,
    #[serde(default)]
    pub dataset: Option<DatasetSpec>,
    #[serde(default)]
    pub algorithm: Option<AlgorithmSpec>,
    #[serde(default)]
    pub sampler: Option<SamplerSpec>,
    #[serde(default)]
    pub stability: Option<StabilitySpec>,
    #[serde(default)]
    pub coupling: Option<CouplingSpec>,
    #[serde(default)]
    pub verify: Option<VerifySpec>,
    pub output: OutputSpec,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let need = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!(
                    "pipeline '{}' requires the [{what}] section",
                    self.kind
                )))
            }
        };
        match self.kind {
            PipelineKind::Train => {
                need(self.dataset.is_some(), "dataset")?;
                need(self.algorithm.is_some(), "algorithm")?;
                need(self.weighting.is_some(), "weighting")?;
            }
            PipelineKind::Sample => {
                need(self.dataset.is_some(), "dataset")?;
                need(self.algorithm.is_some(), "algorithm")?;
                need(self.sampler.is_some(), "sampler")?;
            }
            PipelineKind::Stability => {
                need(self.dataset.is_some(), "dataset")?;
                need(self.algorithm.is_some(), "algorithm")?;
                need(self.weighting.is_some(), "weighting")?;
                need(self.stability.is_some(), "stability")?;
            }
            PipelineKind::Coupling => {
                need(self.coupling.is_some(), "coupling")?;
            }
            PipelineKind::Verify => {
                need(self.verify.is_some(), "verify")?;
                need(self.dataset.is_some(), "dataset")?;
                need(self.algorithm.is_some(), "algorithm")?;
                need(self.weighting.is_some(), "weighting")?;
                need(self.stability.is_some(), "stability")?;
            }
        }
        // Early cross-field checks so misconfigurations fail before any
        // computation starts.
        if let (Some(ds), Some(AlgorithmSpec::Sgd { batch_size, .. })) =
            (&self.dataset, &self.algorithm)
        {
            if *batch_size > ds.n() {
                return Err(Error::config(format!(
                    "batch_size {batch_size} exceeds dataset size {}",
                    ds.n()
                )));
            }
        }
        if let Some(ds) = &self.dataset {
            ds.manifold()?;
        }
        if let Some(w) = &self.weighting {
            w.build(&self.schedule)?;
        }
        Ok(())
    }

    /// Scientific hash: canonical sorted-key JSON of everything except the
    /// seed and the output section.
    pub fn scientific_hash(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        if let Some(map) = value.as_object_mut() {
            map.remove("output");
            map.remove("seed");
        }
        // serde_json's default map is ordered by key, so this string is
        // canonical under field reordering in the source TOML.
        let canonical = serde_json::to_string(&value)?;
        let digest = Sha256::digest(canonical.as_bytes());
        let mut hex = String::with_capacity(16);
        for b in digest.iter().take(8) {
            hex.push_str(&format!("{b:02x}"));
        }
        Ok(hex)
    }
}
