//! The scalar nonlinear benchmark: data generation, parametric baselines and
//! the repeated learn/evaluate protocol.

use std::collections::BTreeMap;
use std::time::Duration;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fic::InducingStrategy;
use crate::kernels::{MeanFunction, Prior};
use crate::model::{simulate, Dataset, GpSsmModel, KnownSystem, MeasurementModel, ModelConfig};
use crate::pgas::{run_pgas, ChainSample, PgasConfig, PriorKind};
use crate::predict::{post_burn_in, rmse_prediction, rmse_smoothing, MixturePredictor};
use crate::smc::{bootstrap_pf, cpf_as_sweep, ParametricPrior, SweepInput};

/// `x_{t+1} = a·x + b·x/(1+x²) + c·u + v`, `y = d·x² + e`, `u_t = cos(1.2(t+1))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSpec {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub q: f64,
    pub r: f64,
    pub initial_variance: f64,
    pub t_train: usize,
    pub t_test: usize,
    pub n_repeats: usize,
    pub seeds: Vec<u64>,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            a: 0.5,
            b: 25.0,
            c: 8.0,
            d: 0.05,
            q: 10.0,
            r: 1.0,
            initial_variance: 1.0,
            t_train: 200,
            t_test: 10_000,
            n_repeats: 10,
            seeds: (0..10).collect(),
        }
    }
}

/// Input sequence `u_t = cos(1.2(t+1))`, `t = 0..len`.
pub fn benchmark_inputs(len: usize) -> Vec<Vec<f64>> {
    (0..len)
        .map(|t| vec![(1.2 * (t + 1) as f64).cos()])
        .collect()
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0) {
            return Err(Error::config("q", "must be positive"));
        }
        if !(self.r > 0.0) {
            return Err(Error::config("r", "must be positive"));
        }
        if self.t_train < 1 {
            return Err(Error::config("t_train", "must be at least 1"));
        }
        if self.t_test < 1 {
            return Err(Error::config("t_test", "must be at least 1"));
        }
        if self.seeds.len() < self.n_repeats {
            return Err(Error::config("seeds", "fewer seeds than repeats"));
        }
        Ok(())
    }

    pub fn true_transition(&self) -> MeanFunction {
        MeanFunction::Benchmark {
            a: self.a,
            b: self.b,
            c: self.c,
        }
    }

    pub fn system(&self) -> KnownSystem {
        KnownSystem {
            transition: self.true_transition(),
            q: vec![self.q],
            measurement: MeasurementModel::Quadratic { d: self.d },
            r: self.r,
            initial_variance: self.initial_variance,
        }
    }

    /// Training (`T_train` transitions) and test (`T_test` points) data for one seed.
    pub fn simulate(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        let sys = self.system();
        let train = simulate(
            &sys,
            &benchmark_inputs(self.t_train + 1),
            seed.wrapping_mul(2),
        )?;
        let mut test = simulate(
            &sys,
            &benchmark_inputs(self.t_test + 1),
            seed.wrapping_mul(2).wrapping_add(1),
        )?;
        test.inputs.pop();
        test.observations.pop();
        test.states.as_mut().map(Vec::pop);
        test.f_values.as_mut().map(Vec::pop);
        Ok((train, test))
    }
}

/// Mean function used by the learned model: the "model B" parameters.
pub fn model_b() -> MeanFunction {
    MeanFunction::Benchmark {
        a: 0.3,
        b: 7.5,
        c: 0.0,
    }
}

/// GP-SSM configuration for the benchmark.
pub fn benchmark_model_config(spec: &BenchmarkSpec) -> ModelConfig {
    let ln = f64::ln;
    let priors: BTreeMap<String, Prior> = [
        (
            "log_lengthscale_1_1",
            Prior::LogNormal {
                mu: ln(3.0),
                sigma: 1.0,
            },
        ),
        (
            "log_lengthscale_1_2",
            Prior::LogNormal {
                mu: ln(2.0),
                sigma: 1.0,
            },
        ),
        (
            "log_signal_variance_1",
            Prior::LogNormal {
                mu: ln(50.0),
                sigma: 1.5,
            },
        ),
        (
            "log_q_1",
            Prior::LogNormal {
                mu: ln(10.0),
                sigma: 1.0,
            },
        ),
        (
            "log_r",
            Prior::LogNormal {
                mu: 0.0,
                sigma: 1.0,
            },
        ),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    ModelConfig {
        state_dim: 1,
        input_dim: 1,
        mean: model_b(),
        measurement: MeasurementModel::Quadratic { d: spec.d },
        initial_variance: spec.initial_variance,
        priors,
    }
}

/// Sparse prior used for the benchmark: an 8 × 5 grid over `[−20, 20] × [−1, 1]`.
pub fn benchmark_fic(m: usize) -> PriorKind {
    PriorKind::Fic {
        m,
        strategy: InducingStrategy::Grid {
            bounds: Some(vec![(-20.0, 20.0), (-1.0, 1.0)]),
        },
    }
}

/// Least-squares transition fits on ground-truth states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineFits {
    /// `(a, b, c)` of `a·x + b·x/(1+x²) + c·u`.
    pub true_structure: [f64; 3],
    pub true_structure_q: f64,
    /// `(α, β, γ)` of `α·x + β·u + γ`.
    pub linear: [f64; 3],
    pub linear_q: f64,
}

impl BaselineFits {
    pub fn true_structure_transition(&self) -> MeanFunction {
        let [a, b, c] = self.true_structure;
        MeanFunction::Benchmark { a, b, c }
    }

    pub fn linear_transition(&self) -> MeanFunction {
        let [a, c, offset] = self.linear;
        MeanFunction::Affine { a, c, offset }
    }
}

fn least_squares(rows: &[[f64; 3]], y: &[f64], what: &str) -> Result<([f64; 3], f64)> {
    let n = rows.len();
    let a = DMatrix::from_fn(n, 3, |i, j| rows[i][j]);
    let b = DVector::from_column_slice(y);
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if n < 3 || svd.rank(1e-10 * smax.max(f64::MIN_POSITIVE)) < 3 {
        return Err(Error::config(what, "design matrix is rank deficient"));
    }
    let sol = svd
        .solve(&b, 1e-12 * smax)
        .map_err(|e| Error::Parse(e.to_string()))?;
    let resid = &b - &a * &sol;
    let dof = (n as f64 - 3.0).max(1.0);
    Ok(([sol[0], sol[1], sol[2]], resid.norm_squared() / dof))
}

/// Fits both parametric baselines by least squares on the state sequence.
pub fn fit_baselines(states: &[Vec<f64>], inputs: &[Vec<f64>]) -> Result<BaselineFits> {
    let n = states.len().saturating_sub(1);
    let y: Vec<f64> = (0..n).map(|t| states[t + 1][0]).collect();
    let ts: Vec<[f64; 3]> = (0..n)
        .map(|t| {
            let x = states[t][0];
            [x, x / (1.0 + x * x), inputs[t][0]]
        })
        .collect();
    let lin: Vec<[f64; 3]> = (0..n).map(|t| [states[t][0], inputs[t][0], 1.0]).collect();
    let (true_structure, true_structure_q) = least_squares(&ts, &y, "true-structure fit")?;
    let (linear, linear_q) = least_squares(&lin, &y, "linear fit")?;
    Ok(BaselineFits {
        true_structure,
        true_structure_q,
        linear,
        linear_q,
    })
}

/// RMSE of a parametric transition against the test set's true `f` values.
pub fn parametric_rmse_prediction(f: &MeanFunction, test: &Dataset) -> Result<f64> {
    let states = test
        .states
        .as_ref()
        .ok_or_else(|| Error::config("test", "states required"))?;
    let truth = test
        .f_values
        .as_ref()
        .ok_or_else(|| Error::config("test", "f values required"))?;
    let mut out = vec![0.0; states[0].len()];
    let mut sq = 0.0;
    for t in 0..truth.len() {
        f.eval_into(&states[t], &test.inputs[t], &mut out);
        sq += out
            .iter()
            .zip(&truth[t])
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
    }
    Ok((sq / (truth.len() * out.len()) as f64).sqrt())
}

/// Particle Gibbs smoothing under a fixed parametric transition; returns the
/// post-burn-in trajectories.
#[allow(clippy::too_many_arguments)]
pub fn smooth_parametric(
    transition: &MeanFunction,
    q: f64,
    measurement: &MeasurementModel,
    r: f64,
    initial_variance: f64,
    data: &Dataset,
    cfg: &PgasConfig,
) -> Result<Vec<Vec<Vec<f64>>>> {
    cfg.validate()?;
    let input = SweepInput {
        data,
        measurement,
        r,
        initial_variance,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let free = ParametricPrior::new(transition.clone(), vec![q], data, None)?;
    let mut x = bootstrap_pf(&free, input, cfg.n_particles, &mut rng, cfg.parallel)?;
    let mut out = Vec::new();
    for l in 1..=cfg.n_iterations {
        let prior = ParametricPrior::new(transition.clone(), vec![q], data, Some(&x))?;
        x = cpf_as_sweep(&prior, input, &x, cfg.n_particles, &mut rng, cfg.parallel)?.1;
        if l > cfg.burn_in {
            out.push(x.clone());
        }
    }
    Ok(out)
}

fn smoothing_rmse(samples: &[Vec<Vec<f64>>], truth: &[Vec<f64>]) -> f64 {
    let l = samples.len() as f64;
    let sq: f64 = (0..truth.len())
        .map(|t| {
            let m = samples.iter().map(|s| s[t][0]).sum::<f64>() / l;
            (m - truth[t][0]).powi(2)
        })
        .sum();
    (sq / truth.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub name: String,
    pub rmse_prediction: f64,
    pub rmse_smoothing: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rmse_prediction: f64,
    pub rmse_smoothing: f64,
    pub n_samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub baselines: Vec<BaselineRow>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl EvaluationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Baseline rows on one train/test pair. Smoothing uses particle Gibbs with
/// the given transition held fixed.
pub fn evaluate_baselines(
    spec: &BenchmarkSpec,
    train: &Dataset,
    test: &Dataset,
    smoother: &PgasConfig,
) -> Result<Vec<BaselineRow>> {
    let states = train
        .states
        .as_ref()
        .ok_or_else(|| Error::config("train", "states required for baselines"))?;
    let fits = fit_baselines(states, &train.inputs)?;
    let meas = MeasurementModel::Quadratic { d: spec.d };
    let rows = [
        ("model_b_fixed", model_b(), spec.q),
        ("linear_learned", fits.linear_transition(), fits.linear_q),
        (
            "true_structure_learned",
            fits.true_structure_transition(),
            fits.true_structure_q,
        ),
        ("ground_truth", spec.true_transition(), spec.q),
    ];
    rows.into_iter()
        .map(|(name, f, q)| {
            let samples =
                smooth_parametric(&f, q, &meas, spec.r, spec.initial_variance, train, smoother)?;
            Ok(BaselineRow {
                name: name.to_string(),
                rmse_prediction: parametric_rmse_prediction(&f, test)?,
                rmse_smoothing: smoothing_rmse(&samples, states),
            })
        })
        .collect()
}

/// Evaluates a learned chain against held-out data and the training ground truth.
pub fn evaluate_chain(
    model: &GpSsmModel,
    chain: &[ChainSample],
    burn_in: usize,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
) -> Result<EvaluationReport> {
    let kept = post_burn_in(chain, burn_in);
    if kept.is_empty() {
        return Err(Error::config("burn_in", "no samples left after burn-in"));
    }
    let truth = train
        .states
        .as_ref()
        .ok_or_else(|| Error::config("train", "states required"))?;
    let predictor = MixturePredictor::new(model, &kept, &train.inputs)?;
    let mut metadata = BTreeMap::new();
    metadata.insert(
        "baseline_fit".to_string(),
        "least squares on ground-truth states".to_string(),
    );
    Ok(EvaluationReport {
        rmse_prediction: rmse_prediction(&predictor, test)?,
        rmse_smoothing: rmse_smoothing(&kept, truth)?,
        n_samples: predictor.len(),
        seed,
        baselines: Vec::new(),
        metadata,
    })
}

/// Time steps at which both signs of `x_t` each hold at least `min_fraction` of the samples.
pub fn bimodal_steps(samples: &[ChainSample], min_fraction: f64) -> Vec<usize> {
    if samples.is_empty() {
        return Vec::new();
    }
    let l = samples.len() as f64;
    (0..samples[0].trajectory.len())
        .filter(|&t| {
            let pos = samples.iter().filter(|s| s.trajectory[t][0] > 0.0).count() as f64;
            let neg = samples.iter().filter(|s| s.trajectory[t][0] < 0.0).count() as f64;
            pos / l >= min_fraction && neg / l >= min_fraction
        })
        .collect()
}

/// Outcome of one learn/evaluate repeat.
#[derive(Debug, Clone)]
pub struct RepeatOutcome {
    pub report: EvaluationReport,
    pub chain: Vec<ChainSample>,
    pub iteration_times: Vec<Duration>,
}

impl RepeatOutcome {
    pub fn mean_iteration_seconds(&self) -> f64 {
        self.iteration_times
            .iter()
            .map(Duration::as_secs_f64)
            .sum::<f64>()
            / self.iteration_times.len().max(1) as f64
    }
}

/// Simulate, learn and evaluate for one seed (GP-SSM rows only).
pub fn run_repeat(spec: &BenchmarkSpec, pgas: &PgasConfig, seed: u64) -> Result<RepeatOutcome> {
    let (train, test) = spec.simulate(seed)?;
    let model = GpSsmModel::from_config(&benchmark_model_config(spec))?;
    let cfg = PgasConfig {
        seed,
        ..pgas.clone()
    };
    let mut times = Vec::with_capacity(cfg.n_iterations);
    let chain = run_pgas(&model, &train, &cfg, None, |s, dt| {
        log::info!(
            "seed {seed} iteration {}: log_joint {:.3} ({:.2}s)",
            s.iteration,
            s.log_joint,
            dt.as_secs_f64()
        );
        times.push(dt);
        Ok(())
    })?;
    let mut report = evaluate_chain(&model, &chain, cfg.burn_in, &train, &test, seed)?;
    report.metadata.insert(
        "prior".to_string(),
        match cfg.prior {
            PriorKind::Dense => "dense".to_string(),
            PriorKind::Fic { m, .. } => format!("fic(m={m})"),
        },
    );
    Ok(RepeatOutcome {
        report,
        chain,
        iteration_times: times,
    })
}

/// Runs every repeat of the protocol (repeats in parallel), attaching
/// baseline rows when `baselines` is set.
pub fn run_protocol(
    spec: &BenchmarkSpec,
    pgas: &PgasConfig,
    baselines: bool,
) -> Result<Vec<RepeatOutcome>> {
    spec.validate()?;
    spec.seeds[..spec.n_repeats]
        .par_iter()
        .map(|&seed| {
            let mut out = run_repeat(spec, pgas, seed)?;
            if baselines {
                let (train, test) = spec.simulate(seed)?;
                let smoother = PgasConfig {
                    seed,
                    ..pgas.clone()
                };
                out.report.baselines = evaluate_baselines(spec, &train, &test, &smoother)?;
            }
            Ok(out)
        })
        .collect()
}

/// Mean and sample standard deviation.
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, sd)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub rmse_prediction_mean: f64,
    pub rmse_prediction_sd: f64,
    pub rmse_smoothing_mean: f64,
    pub rmse_smoothing_sd: f64,
}

/// Averages reports over repeats, one row for the learned model and one per baseline.
pub fn summarize_reports(name: &str, reports: &[EvaluationReport]) -> Vec<SummaryRow> {
    let row = |name: String, p: Vec<f64>, s: Vec<f64>| {
        let (pm, ps) = mean_sd(&p);
        let (sm, ss) = mean_sd(&s);
        SummaryRow {
            name,
            rmse_prediction_mean: pm,
            rmse_prediction_sd: ps,
            rmse_smoothing_mean: sm,
            rmse_smoothing_sd: ss,
        }
    };
    let mut out = vec![row(
        name.to_string(),
        reports.iter().map(|r| r.rmse_prediction).collect(),
        reports.iter().map(|r| r.rmse_smoothing).collect(),
    )];
    if let Some(first) = reports.first() {
        for (i, b) in first.baselines.iter().enumerate() {
            out.push(row(
                b.name.clone(),
                reports
                    .iter()
                    .map(|r| r.baselines[i].rmse_prediction)
                    .collect(),
                reports
                    .iter()
                    .map(|r| r.baselines[i].rmse_smoothing)
                    .collect(),
            ));
        }
    }
    out
}
