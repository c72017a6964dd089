//! The experiment runner: executes one configured pipeline and emits a
//! JSON report plus CSV data files. Outputs are buffered in memory and
//! written only after the run succeeds, so failed runs leave nothing
//! behind. Reports carry the scientific hash, the library version and the
//! seed, and contain no timestamps: reruns are byte-identical.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::coupling::{measure_contraction, CoupledInstance, CouplingConfig, FMetric};
use crate::error::{Error, Result};
use crate::lab::config::*;
use crate::lab::generate;
use crate::losses::{estimate_dsm, DataSource, LossEstimate};
use crate::process::{build_step_grid, Schedule};
use crate::rng::derive_seed;
use crate::sampling::{memorization_profile, sample_backward, sliced_wasserstein1, SamplerConfig};
use crate::scores::{Dataset, ScoreModel};
use crate::stability::{
    check_ball_chernoff, check_harnack, estimate_score_stability, replicate_rows_csv,
    verify_generalisation_bound, ChernoffCheck, HarnackCheck, StabilityOptions, StabilityReport,
    Verdict,
};
use crate::training::{sgd_run_traced, StepTrace, Trainer};

pub const LIB_VERSION: &str = env!("CARGO_PKG_VERSION");

/// In-memory result of one pipeline run.
pub struct RunArtifacts {
    /// `(file name, contents)`; the first entry is always `report.json`.
    pub files: Vec<(String, String)>,
    /// Verification pipelines report failures here instead of erroring.
    pub pass: bool,
}

fn to_pretty_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

#[derive(Serialize)]
struct TrainReport {
    kind: &'static str,
    config_hash: String,
    lib_version: &'static str,
    seed: u64,
    n: usize,
    final_emp_dsm: LossEstimate,
    theta_norm: f64,
    num_steps: usize,
}

#[derive(Serialize, Clone)]
struct SweepRow {
    kappa: f64,
    early_stop: f64,
    seed: u64,
    num_samples: usize,
    aborted: usize,
    frac_within: f64,
    nn_threshold: f64,
    mean_nn_distance: f64,
    sliced_w1_holdout: f64,
}

#[derive(Serialize)]
struct SampleReport {
    kind: &'static str,
    config_hash: String,
    lib_version: &'static str,
    seed: u64,
    base: SweepRow,
    sweep: Vec<SweepRow>,
}

#[derive(Serialize)]
struct StabilityPipelineReport {
    kind: &'static str,
    config_hash: String,
    lib_version: &'static str,
    seed: u64,
    n: usize,
    report: StabilityReport,
    verdict: Verdict,
    /// The complete experiment definition, embedded for reproducibility.
    config: ExperimentConfig,
}

#[derive(Serialize)]
struct CouplingReport {
    kind: &'static str,
    config_hash: String,
    lib_version: &'static str,
    seed: u64,
    steps: usize,
    replicates: usize,
    fitted_rate: Option<f64>,
    floor: f64,
    floor_se: f64,
    sync_count: usize,
    reflect_count: usize,
    merge_count: usize,
}

#[derive(Serialize)]
struct VerifyReport {
    kind: &'static str,
    config_hash: String,
    lib_version: &'static str,
    seed: u64,
    harnack: HarnackCheck,
    chernoff: ChernoffCheck,
    generalisation: Verdict,
    pass: bool,
}

/// Execute the configured pipeline and return the artifacts in memory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunArtifacts> {
    config.validate()?;
    let hash = config.scientific_hash()?;
    match config.kind {
        PipelineKind::Train => run_train(config, &hash),
        PipelineKind::Sample => run_sample(config, &hash),
        PipelineKind::Stability => run_stability(config, &hash),
        PipelineKind::Coupling => run_coupling(config, &hash),
        PipelineKind::Verify => run_verify(config, &hash),
    }
    .map_err(|e| match e {
        Error::Configuration(m) => Error::Configuration(format!("[{}] {m}", config.kind)),
        Error::Domain(m) => Error::Domain(format!("[{}] {m}", config.kind)),
        other => other,
    })
}

/// Run and write all artifacts under the output directory (or an
/// override). Returns the directory and the pass flag.
pub fn run_and_write(
    config: &ExperimentConfig,
    out_override: Option<&Path>,
) -> Result<(PathBuf, bool)> {
    let artifacts = run_experiment(config)?;
    let dir = out_override
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from(&config.output.dir));
    std::fs::create_dir_all(&dir)?;
    for (name, contents) in &artifacts.files {
        std::fs::write(dir.join(name), contents)?;
    }
    Ok((dir, artifacts.pass))
}

fn loss_csv(rows: &[(&str, LossEstimate, u64, &str)]) -> String {
    let mut s = String::from("loss_kind,value,std_error,n,seed,config_hash\n");
    for (kind, est, seed, hash) in rows {
        s.push_str(&format!(
            "{kind},{},{},{},{seed},{hash}\n",
            est.value, est.std_error, est.num_samples
        ));
    }
    s
}

fn trace_csv(trace: &[StepTrace]) -> String {
    let mut s = String::from("step,loss_est,grad_norm,clipped_flag,theta_norm\n");
    for e in trace {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            e.step,
            e.loss_est,
            e.grad_norm,
            if e.clipped { 1 } else { 0 },
            e.theta_norm
        ));
    }
    s
}

fn run_train(config: &ExperimentConfig, hash: &str) -> Result<RunArtifacts> {
    let ds = config.dataset.as_ref().unwrap();
    let spec = ds.manifold()?;
    let dataset = generate(&spec, ds.n(), derive_seed(config.seed, "data", 0))?;
    let weighting = config
        .weighting
        .as_ref()
        .unwrap()
        .build(&config.schedule)?;
    let trainer = config.algorithm.as_ref().unwrap().build_trainer(
        &config.schedule,
        spec.ambient_dim(),
        derive_seed(config.seed, "init", 0),
    )?;
    let mut files = Vec::new();

    // Retrain with a trace when the trainer is SGD and tracing is on.
    let model = match (&trainer, config.output.verbose_trace) {
        (
            Trainer::Sgd {
                model0,
                config: tc,
                schedule,
            },
            true,
        ) => {
            let (model, trace) = sgd_run_traced(
                model0,
                &dataset,
                tc,
                schedule,
                &weighting,
                derive_seed(config.seed, "train", 0),
            )?;
            files.push(("trace.csv".to_string(), trace_csv(&trace)));
            model
        }
        _ => trainer.train(&dataset, &weighting, derive_seed(config.seed, "train", 0))?,
    };

    let emp = DataSource::Empirical(dataset);
    let final_emp_dsm = estimate_dsm(
        &model,
        &emp,
        &config.schedule,
        &weighting,
        4096,
        1,
        derive_seed(config.seed, "final-loss", 0),
    )?;
    let theta_norm = model
        .params()
        .map(crate::linalg::norm)
        .unwrap_or(0.0);
    let report = TrainReport {
        kind: "train",
        config_hash: hash.to_string(),
        lib_version: LIB_VERSION,
        seed: config.seed,
        n: ds.n(),
        final_emp_dsm,
        theta_norm,
        num_steps: match &trainer {
            Trainer::Sgd { config: tc, .. } => tc.num_steps,
            _ => 1,
        },
    };
    files.insert(0, ("report.json".to_string(), to_pretty_json(&report)?));
    files.push(("model.json".to_string(), to_pretty_json(&model)?));
    files.push((
        "losses.csv".to_string(),
        loss_csv(&[("emp_dsm", report.final_emp_dsm, config.seed, hash)]),
    ));
    Ok(RunArtifacts { files, pass: true })
}

fn samples_csv(samples: &[Vec<f64>], profile: &[(usize, f64)]) -> String {
    let d = samples.first().map_or(0, |s| s.len());
    let mut header = String::from("sample_id");
    for i in 0..d {
        header.push_str(&format!(",coord_{i}"));
    }
    header.push_str(",nearest_index,nn_distance\n");
    let mut s = header;
    for (i, (sample, (idx, dist))) in samples.iter().zip(profile).enumerate() {
        s.push_str(&i.to_string());
        for c in sample {
            s.push_str(&format!(",{c}"));
        }
        s.push_str(&format!(",{idx},{dist}\n"));
    }
    s
}

#[allow(clippy::too_many_arguments)]
fn one_sampler_run(
    config: &ExperimentConfig,
    schedule: &Schedule,
    kappa: f64,
    dataset: &Dataset,
    holdout: &Dataset,
    model: &ScoreModel,
    seed: u64,
    sampler: &SamplerSpec,
) -> Result<(SweepRow, Vec<Vec<f64>>, Vec<(usize, f64)>)> {
    let grid = build_step_grid(schedule, kappa)?;
    let cfg = SamplerConfig {
        grid,
        schedule: *schedule,
        num_samples: sampler.num_samples,
        integrator: sampler.integrator(schedule)?,
    };
    let batch = sample_backward(model, &cfg, seed)?;
    let profile = memorization_profile(&batch.samples, dataset);
    let within = profile
        .iter()
        .filter(|(_, d)| *d <= sampler.nn_threshold)
        .count();
    let mean_nn = if profile.is_empty() {
        f64::NAN
    } else {
        profile.iter().map(|(_, d)| d).sum::<f64>() / profile.len() as f64
    };
    let sw1 = sliced_wasserstein1(
        &batch.samples,
        holdout.points(),
        64,
        derive_seed(config.seed, "sw1", 0),
    );
    let row = SweepRow {
        kappa,
        early_stop: schedule.early_stop(),
        seed,
        num_samples: sampler.num_samples,
        aborted: batch.aborted.len(),
        frac_within: within as f64 / profile.len().max(1) as f64,
        nn_threshold: sampler.nn_threshold,
        mean_nn_distance: mean_nn,
        sliced_w1_holdout: sw1,
    };
    Ok((row, batch.samples, profile))
}

fn run_sample(config: &ExperimentConfig, hash: &str) -> Result<RunArtifacts> {
    let ds = config.dataset.as_ref().unwrap();
    let spec = ds.manifold()?;
    let dataset = generate(&spec, ds.n(), derive_seed(config.seed, "data", 0))?;
    let holdout = generate(
        &spec,
        ds.n().max(1000),
        derive_seed(config.seed, "holdout", 0),
    )?;
    let sampler = config.sampler.as_ref().unwrap();
    // Train the score model on the weighting induced by the sampler grid
    // unless an explicit weighting is configured.
    let weighting = match &config.weighting {
        Some(w) => w.build(&config.schedule)?,
        None => WeightingSpec::Grid {
            kappa: sampler.kappa,
        }
        .build(&config.schedule)?,
    };
    let trainer = config.algorithm.as_ref().unwrap().build_trainer(
        &config.schedule,
        spec.ambient_dim(),
        derive_seed(config.seed, "init", 0),
    )?;
    let model = trainer.train(&dataset, &weighting, derive_seed(config.seed, "train", 0))?;

    let (base, samples, profile) = one_sampler_run(
        config,
        &config.schedule,
        sampler.kappa,
        &dataset,
        &holdout,
        &model,
        derive_seed(config.seed, "sample", 0),
        sampler,
    )?;

    let mut sweep = Vec::new();
    for (j, eps) in sampler.sweep_early_stop.iter().enumerate() {
        let schedule = Schedule::new(config.schedule.alpha(), config.schedule.horizon(), *eps)?;
        // The empirical model is schedule-independent in its dataset;
        // rebuild it on the swept schedule.
        let trainer = config.algorithm.as_ref().unwrap().build_trainer(
            &schedule,
            spec.ambient_dim(),
            derive_seed(config.seed, "init", 0),
        )?;
        let weighting = WeightingSpec::Grid {
            kappa: sampler.kappa,
        }
        .build(&schedule)?;
        let model = trainer.train(&dataset, &weighting, derive_seed(config.seed, "train", 0))?;
        let (row, _, _) = one_sampler_run(
            config,
            &schedule,
            sampler.kappa,
            &dataset,
            &holdout,
            &model,
            derive_seed(config.seed, "sweep-eps", j as u64),
            sampler,
        )?;
        sweep.push(row);
    }
    for (j, kappa) in sampler.sweep_kappa.iter().enumerate() {
        let (row, _, _) = one_sampler_run(
            config,
            &config.schedule,
            *kappa,
            &dataset,
            &holdout,
            &model,
            derive_seed(config.seed, "sweep-kappa", j as u64),
            sampler,
        )?;
        sweep.push(row);
    }

    let mut sweep_csv = String::from(
        "kappa,early_stop,seed,num_samples,aborted,frac_within,nn_threshold,mean_nn_distance,sliced_w1_holdout\n",
    );
    for r in std::iter::once(&base).chain(&sweep) {
        sweep_csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.kappa,
            r.early_stop,
            r.seed,
            r.num_samples,
            r.aborted,
            r.frac_within,
            r.nn_threshold,
            r.mean_nn_distance,
            r.sliced_w1_holdout
        ));
    }

    let report = SampleReport {
        kind: "sample",
        config_hash: hash.to_string(),
        lib_version: LIB_VERSION,
        seed: config.seed,
        base,
        sweep,
    };
    let grid_csv = build_step_grid(&config.schedule, sampler.kappa)?.to_csv();
    let files = vec![
        ("report.json".to_string(), to_pretty_json(&report)?),
        ("samples.csv".to_string(), samples_csv(&samples, &profile)),
        ("sweep.csv".to_string(), sweep_csv),
        ("grid.csv".to_string(), grid_csv),
    ];
    Ok(RunArtifacts { files, pass: true })
}

fn run_stability(config: &ExperimentConfig, hash: &str) -> Result<RunArtifacts> {
    let ds = config.dataset.as_ref().unwrap();
    let spec = ds.manifold()?;
    let weighting = config
        .weighting
        .as_ref()
        .unwrap()
        .build(&config.schedule)?;
    let trainer = config.algorithm.as_ref().unwrap().build_trainer(
        &config.schedule,
        spec.ambient_dim(),
        derive_seed(config.seed, "init", 0),
    )?;
    let st = config.stability.as_ref().unwrap();
    let opts = StabilityOptions {
        n: ds.n(),
        n_datasets: st.n_datasets,
        n_replacements: st.n_replacements,
        n_mc: st.n_mc,
    };
    let (report, rows) = estimate_score_stability(
        &trainer,
        &spec,
        &opts,
        &config.schedule,
        &weighting,
        config.seed,
        hash,
    )?;
    let verdict = verify_generalisation_bound(&report, Some(hash))?;
    let pass = verdict.pass;
    let out = StabilityPipelineReport {
        kind: "stability",
        config_hash: hash.to_string(),
        lib_version: LIB_VERSION,
        seed: config.seed,
        n: ds.n(),
        report,
        verdict,
        config: config.clone(),
    };
    let files = vec![
        ("report.json".to_string(), to_pretty_json(&out)?),
        ("replicates.csv".to_string(), replicate_rows_csv(&rows)),
    ];
    Ok(RunArtifacts { files, pass })
}

fn run_coupling(config: &ExperimentConfig, hash: &str) -> Result<RunArtifacts> {
    let cp = config.coupling.as_ref().unwrap();
    let g = nalgebra::DMatrix::identity(cp.dim, cp.dim);
    let coupling_config = CouplingConfig::new(g, cp.eta, cp.lambda, cp.switch_radius)?;
    let fm = FMetric::new(cp.metric_a, cp.switch_radius, cp.metric_r2)?;
    let zero = |p: &[f64]| vec![0.0; p.len()];
    let offset = cp.drift_offset;
    let biased = move |p: &[f64]| {
        let mut v = vec![0.0; p.len()];
        v[0] = offset;
        v
    };
    let vol = |p: &[f64]| nalgebra::DMatrix::identity(p.len(), p.len());
    let mut x0 = vec![0.0; cp.dim];
    x0[0] = cp.initial_distance;
    let instance = CoupledInstance {
        config: &coupling_config,
        drift_a: &zero,
        drift_b: &biased,
        vol_a: &vol,
        vol_b: &vol,
        x0,
        y0: vec![0.0; cp.dim],
    };
    let curve = measure_contraction(&instance, &fm, cp.steps, cp.replicates, config.seed)?;
    let report = CouplingReport {
        kind: "coupling",
        config_hash: hash.to_string(),
        lib_version: LIB_VERSION,
        seed: config.seed,
        steps: cp.steps,
        replicates: cp.replicates,
        fitted_rate: curve.fitted_rate,
        floor: curve.floor,
        floor_se: curve.floor_se,
        sync_count: curve.sync_count,
        reflect_count: curve.reflect_count,
        merge_count: curve.merge_count,
    };
    let files = vec![
        ("report.json".to_string(), to_pretty_json(&report)?),
        ("contraction.csv".to_string(), curve.to_csv()),
    ];
    Ok(RunArtifacts { files, pass: true })
}

fn run_verify(config: &ExperimentConfig, hash: &str) -> Result<RunArtifacts> {
    let vf = config.verify.as_ref().unwrap();
    let ds = config.dataset.as_ref().unwrap();
    let spec = ds.manifold()?;
    let weighting = config
        .weighting
        .as_ref()
        .unwrap()
        .build(&config.schedule)?;
    let harnack = check_harnack(
        &config.schedule,
        vf.harnack_t,
        vf.harnack_p,
        vf.harnack_trials,
        vf.harnack_mc,
        derive_seed(config.seed, "harnack", 0),
    )?;
    let chernoff = check_ball_chernoff(
        &spec,
        vf.chernoff_n,
        vf.chernoff_r,
        vf.chernoff_trials,
        derive_seed(config.seed, "chernoff", 0),
    )?;
    let trainer = config.algorithm.as_ref().unwrap().build_trainer(
        &config.schedule,
        spec.ambient_dim(),
        derive_seed(config.seed, "init", 0),
    )?;
    let st = config.stability.as_ref().unwrap();
    let opts = StabilityOptions {
        n: ds.n(),
        n_datasets: st.n_datasets,
        n_replacements: st.n_replacements,
        n_mc: st.n_mc,
    };
    let (report, _) = estimate_score_stability(
        &trainer,
        &spec,
        &opts,
        &config.schedule,
        &weighting,
        config.seed,
        hash,
    )?;
    let generalisation = verify_generalisation_bound(&report, Some(hash))?;
    let pass = harnack.violations == 0 && chernoff.pass && generalisation.pass;
    let out = VerifyReport {
        kind: "verify",
        config_hash: hash.to_string(),
        lib_version: LIB_VERSION,
        seed: config.seed,
        harnack,
        chernoff,
        generalisation,
        pass,
    };
    let files = vec![("report.json".to_string(), to_pretty_json(&out)?)];
    Ok(RunArtifacts { files, pass })
}
