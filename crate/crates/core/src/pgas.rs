//! Particle Gibbs with ancestor sampling: alternating slice-sampling
//! hyperparameter updates with CPF-AS trajectory draws.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fic::{select_inducing, FicState, InducingSet, InducingStrategy};
use crate::gp_prior::TrajectoryFactor;
use crate::kernels::{HyperKind, HyperVector};
use crate::model::{Dataset, GpSsmModel, GpTransition};
use crate::smc::{bootstrap_pf, cpf_as_sweep, DensePrior, FicPrior, SweepInput};

/// Transition prior used inside the sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorKind {
    Dense,
    Fic {
        m: usize,
        strategy: InducingStrategy,
    },
}

/// Order of the two hyperparameter blocks within an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateOrder {
    #[default]
    TransitionFirst,
    MeasurementFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceConfig {
    pub width: f64,
    pub max_steps: usize,
}

impl Default for SliceConfig {
    fn default() -> Self {
        Self {
            width: 1.0,
            max_steps: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgasConfig {
    pub n_particles: usize,
    pub n_iterations: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub prior: PriorKind,
    pub slice: SliceConfig,
    pub order: UpdateOrder,
    /// Particle-level parallelism; results do not depend on it.
    pub parallel: bool,
}

impl Default for PgasConfig {
    fn default() -> Self {
        Self {
            n_particles: 20,
            n_iterations: 50,
            burn_in: 10,
            seed: 0,
            prior: PriorKind::Dense,
            slice: SliceConfig::default(),
            order: UpdateOrder::default(),
            parallel: true,
        }
    }
}

impl PgasConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 2 {
            return Err(Error::config("n_particles", "need at least 2 particles"));
        }
        if self.n_iterations == 0 {
            return Err(Error::config("n_iterations", "must be positive"));
        }
        if self.burn_in >= self.n_iterations {
            return Err(Error::config(
                "burn_in",
                "must be smaller than n_iterations",
            ));
        }
        if !(self.slice.width > 0.0 && self.slice.width.is_finite()) {
            return Err(Error::config("slice.width", "must be positive"));
        }
        if let PriorKind::Fic { m, .. } = self.prior {
            if m == 0 {
                return Err(Error::config("m", "need at least one inducing input"));
            }
        }
        Ok(())
    }
}

/// One iteration of the chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSample {
    pub iteration: usize,
    pub theta: HyperVector,
    pub trajectory: Vec<Vec<f64>>,
    /// `log p(x_{0:T}, y_{0:T} | θ)`.
    pub log_joint: f64,
    /// Inducing inputs used by the sparse prior at this iteration.
    pub inducing: Option<Vec<Vec<f64>>>,
}

/// Serialized form of a [`ChainSample`] (one JSON line).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub iteration: usize,
    pub theta: BTreeMap<String, f64>,
    pub trajectory: Vec<Vec<f64>>,
    pub log_joint: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inducing: Option<Vec<Vec<f64>>>,
}

impl ChainSample {
    pub fn to_record(&self) -> ChainRecord {
        ChainRecord {
            iteration: self.iteration,
            theta: self.theta.named().into_iter().collect(),
            trajectory: self.trajectory.clone(),
            log_joint: self.log_joint,
            inducing: self.inducing.clone(),
        }
    }

    pub fn from_record(model: &GpSsmModel, rec: ChainRecord) -> Result<Self> {
        let layout = model.layout();
        let mut values = Vec::with_capacity(layout.len());
        for name in layout.names() {
            let v = rec
                .theta
                .get(&name)
                .ok_or_else(|| Error::config(name.clone(), "missing from chain record"))?;
            values.push(*v);
        }
        if rec.theta.len() != layout.len() {
            return Err(Error::config(
                "theta",
                "unexpected hyperparameter names in chain record",
            ));
        }
        if rec.trajectory.iter().any(|x| x.len() != model.state_dim) {
            return Err(Error::Dimension {
                context: "chain trajectory state",
                expected: model.state_dim,
                got: rec
                    .trajectory
                    .iter()
                    .map(Vec::len)
                    .find(|&l| l != model.state_dim)
                    .unwrap_or(0),
            });
        }
        Ok(Self {
            iteration: rec.iteration,
            theta: HyperVector::from_log_values(layout, values)?,
            trajectory: rec.trajectory,
            log_joint: rec.log_joint,
            inducing: rec.inducing,
        })
    }
}

/// Reads a JSON-lines chain. A truncated final line is dropped with a warning.
pub fn read_chain(model: &GpSsmModel, path: &Path) -> Result<Vec<ChainSample>> {
    let file = std::fs::File::open(path)?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()?;
    let n = lines.len();
    let mut out = Vec::with_capacity(n);
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ChainRecord>(line) {
            Ok(rec) => out.push(ChainSample::from_record(model, rec)?),
            Err(e) if i + 1 == n => {
                log::warn!("ignoring truncated last chain record: {e}");
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

/// Append-only JSON-lines chain writer.
pub struct ChainWriter {
    file: std::io::BufWriter<std::fs::File>,
}

impl ChainWriter {
    /// Opens `path` for appending; `truncate` starts a fresh chain.
    pub fn open(path: &Path, truncate: bool) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(!truncate)
            .write(true)
            .truncate(truncate)
            .open(path)?;
        Ok(Self {
            file: std::io::BufWriter::new(file),
        })
    }

    pub fn append(&mut self, sample: &ChainSample) -> Result<()> {
        serde_json::to_writer(&mut self.file, &sample.to_record())?;
        self.file.write_all(b"\n")?;
        self.file.flush()?;
        Ok(())
    }
}

/// Univariate slice sampler with linear stepping-out and shrinkage.
/// If stepping out exceeds `max_steps`, the current value is kept.
pub fn slice_sample<F, R>(x0: f64, mut logf: F, cfg: &SliceConfig, rng: &mut R) -> f64
where
    F: FnMut(f64) -> f64,
    R: Rng + ?Sized,
{
    let f0 = logf(x0);
    if !f0.is_finite() {
        log::warn!("slice sampler started at a point of zero density; value kept");
        return x0;
    }
    let level = f0 + (1.0 - rng.random::<f64>()).ln();
    let mut lo = x0 - cfg.width * rng.random::<f64>();
    let mut hi = lo + cfg.width;
    let mut steps = 0;
    while logf(lo) > level {
        if steps == cfg.max_steps {
            log::warn!("slice step-out limit reached; value kept");
            return x0;
        }
        lo -= cfg.width;
        steps += 1;
    }
    steps = 0;
    while logf(hi) > level {
        if steps == cfg.max_steps {
            log::warn!("slice step-out limit reached; value kept");
            return x0;
        }
        hi += cfg.width;
        steps += 1;
    }
    for _ in 0..200 {
        let x = lo + (hi - lo) * rng.random::<f64>();
        if logf(x) > level {
            return x;
        }
        if x < x0 {
            lo = x;
        } else {
            hi = x;
        }
    }
    log::warn!("slice shrinkage did not terminate; value kept");
    x0
}

/// `log p(x_{1:T} | x_0, θ_x, Q)` under the selected prior; `-∞` if the
/// covariance cannot be factorized.
pub fn transition_log_prior(
    model: &GpSsmModel,
    theta: &HyperVector,
    traj: &[Vec<f64>],
    inputs: &[Vec<f64>],
    inducing: Option<&[Vec<f64>]>,
) -> f64 {
    let gp = Arc::new(model.transition(theta));
    let res = match inducing {
        None => {
            TrajectoryFactor::from_trajectory(gp, traj, inputs).and_then(|f| f.log_joint_prior())
        }
        Some(u) => InducingSet::new(gp, u.to_vec())
            .and_then(|set| FicState::from_trajectory(Arc::new(set), traj, inputs))
            .map(|s| s.closed_form_log_density()),
    };
    match res {
        Ok(v) if v.is_finite() => v,
        _ => f64::NEG_INFINITY,
    }
}

/// One slice-sampling scan over the free transition hyperparameters (kernel and `Q`).
pub fn sample_theta_x<R: Rng + ?Sized>(
    model: &GpSsmModel,
    theta: &HyperVector,
    traj: &[Vec<f64>],
    inputs: &[Vec<f64>],
    inducing: Option<&[Vec<f64>]>,
    slice: &SliceConfig,
    rng: &mut R,
) -> HyperVector {
    let layout = model.layout();
    let mut cur = theta.clone();
    for d in 0..layout.n_x {
        for idx in layout.dim_indices(d) {
            let prior = *model.priors.get(idx);
            if prior.is_fixed() {
                continue;
            }
            let base = cur.clone();
            let target = |v: f64| {
                let lp = prior.log_density(v);
                if !lp.is_finite() || !v.exp().is_finite() || v.exp() <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                let mut th = base.clone();
                th.set_index(idx, v);
                lp + transition_log_prior(model, &th, traj, inputs, inducing)
            };
            let v = slice_sample(cur.values()[idx], target, slice, rng);
            cur.set_index(idx, v);
        }
    }
    cur
}

/// Slice-samples the log measurement-noise variance.
pub fn sample_theta_y<R: Rng + ?Sized>(
    model: &GpSsmModel,
    theta: &HyperVector,
    traj: &[Vec<f64>],
    data: &Dataset,
    slice: &SliceConfig,
    rng: &mut R,
) -> HyperVector {
    let idx = model.layout().index(HyperKind::MeasurementNoise);
    let prior = *model.priors.get(idx);
    let mut cur = theta.clone();
    if prior.is_fixed() {
        return cur;
    }
    let target = |v: f64| {
        let r = v.exp();
        if !(r > 0.0 && r.is_finite()) {
            return f64::NEG_INFINITY;
        }
        prior.log_density(v) + model.trajectory_log_likelihood(data, traj, r)
    };
    let v = slice_sample(cur.values()[idx], target, slice, rng);
    cur.set_index(idx, v);
    cur
}

/// `log p(x_{0:T}, y_{0:T} | θ)`.
pub fn log_joint(
    model: &GpSsmModel,
    theta: &HyperVector,
    traj: &[Vec<f64>],
    data: &Dataset,
    inducing: Option<&[Vec<f64>]>,
) -> f64 {
    model.initial_log_density(&traj[0])
        + transition_log_prior(model, theta, traj, &data.inputs, inducing)
        + model.trajectory_log_likelihood(data, traj, GpSsmModel::measurement_noise(theta))
}

/// Random stream of one iteration; iteration 0 is the initialization.
pub fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

fn gp_inputs(traj: &[Vec<f64>], inputs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    traj[..traj.len() - 1]
        .iter()
        .zip(inputs)
        .map(|(x, u)| GpTransition::gp_input(x, u))
        .collect()
}

fn choose_inducing(
    kind: &PriorKind,
    traj: &[Vec<f64>],
    inputs: &[Vec<f64>],
    seed: u64,
) -> Result<Option<Vec<Vec<f64>>>> {
    match kind {
        PriorKind::Dense => Ok(None),
        PriorKind::Fic { m, strategy } => {
            select_inducing(&gp_inputs(traj, inputs), *m, strategy, seed).map(Some)
        }
    }
}

/// CPF-AS draw under `θ` (or a bootstrap filter draw when `reference` is `None`).
pub fn draw_trajectory<R: Rng + ?Sized>(
    model: &GpSsmModel,
    theta: &HyperVector,
    data: &Dataset,
    reference: Option<&[Vec<f64>]>,
    inducing: Option<&[Vec<f64>]>,
    n: usize,
    parallel: bool,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let gp = Arc::new(model.transition(theta));
    let input = SweepInput {
        data,
        measurement: &model.measurement,
        r: GpSsmModel::measurement_noise(theta),
        initial_variance: model.initial_variance,
    };
    match (inducing, reference) {
        (None, Some(x)) => {
            let prior = DensePrior::new(gp, data, Some(x))?;
            Ok(cpf_as_sweep(&prior, input, x, n, rng, parallel)?.1)
        }
        (None, None) => {
            let prior = DensePrior::new(gp, data, None)?;
            bootstrap_pf(&prior, input, n, rng, parallel)
        }
        (Some(u), reference) => {
            let set = Arc::new(InducingSet::new(gp, u.to_vec())?);
            let prior = FicPrior::new(set, data, reference)?;
            match reference {
                Some(x) => Ok(cpf_as_sweep(&prior, input, x, n, rng, parallel)?.1),
                None => bootstrap_pf(&prior, input, n, rng, parallel),
            }
        }
    }
}

/// Runs the sampler. `resume` continues after its iteration; each new sample
/// is passed to `sink` together with the iteration's wall time.
pub fn run_pgas<F>(
    model: &GpSsmModel,
    data: &Dataset,
    cfg: &PgasConfig,
    resume: Option<&ChainSample>,
    mut sink: F,
) -> Result<Vec<ChainSample>>
where
    F: FnMut(&ChainSample, Duration) -> Result<()>,
{
    cfg.validate()?;
    model.check_dataset(data)?;
    let (mut theta, mut traj, start) = match resume {
        Some(s) => {
            if s.trajectory.len() != data.len() {
                return Err(Error::config(
                    "resume",
                    "chain trajectory length does not match dataset",
                ));
            }
            (s.theta.clone(), s.trajectory.clone(), s.iteration + 1)
        }
        None => {
            let theta = model.priors.medians();
            let mut rng = iteration_rng(cfg.seed, 0);
            let inducing = match &cfg.prior {
                PriorKind::Dense => None,
                PriorKind::Fic { m, strategy } => {
                    // No trajectory yet: place inducing inputs over the prior state range.
                    let sd = 3.0 * model.initial_variance.sqrt().max(1.0);
                    let cand: Vec<Vec<f64>> = data
                        .inputs
                        .iter()
                        .flat_map(|u| {
                            [-sd, sd].map(|s| GpTransition::gp_input(&vec![s; model.state_dim], u))
                        })
                        .collect();
                    Some(select_inducing(&cand, *m, strategy, cfg.seed)?)
                }
            };
            let x = draw_trajectory(
                model,
                &theta,
                data,
                None,
                inducing.as_deref(),
                cfg.n_particles,
                cfg.parallel,
                &mut rng,
            )
            .map_err(|e| Error::Iteration {
                iteration: 0,
                source: Box::new(e),
            })?;
            (theta, x, 1)
        }
    };
    let mut chain = Vec::new();
    for l in start..=cfg.n_iterations {
        let t0 = Instant::now();
        let step = || -> Result<ChainSample> {
            let mut rng = iteration_rng(cfg.seed, l);
            let inducing = choose_inducing(&cfg.prior, &traj, &data.inputs, cfg.seed ^ l as u64)?;
            let u = inducing.as_deref();
            let mut th = theta.clone();
            match cfg.order {
                UpdateOrder::TransitionFirst => {
                    th = sample_theta_x(model, &th, &traj, &data.inputs, u, &cfg.slice, &mut rng);
                    th = sample_theta_y(model, &th, &traj, data, &cfg.slice, &mut rng);
                }
                UpdateOrder::MeasurementFirst => {
                    th = sample_theta_y(model, &th, &traj, data, &cfg.slice, &mut rng);
                    th = sample_theta_x(model, &th, &traj, &data.inputs, u, &cfg.slice, &mut rng);
                }
            }
            let x = draw_trajectory(
                model,
                &th,
                data,
                Some(&traj),
                u,
                cfg.n_particles,
                cfg.parallel,
                &mut rng,
            )?;
            let lj = log_joint(model, &th, &x, data, u);
            Ok(ChainSample {
                iteration: l,
                theta: th,
                trajectory: x,
                log_joint: lj,
                inducing,
            })
        };
        let sample = step().map_err(|e| Error::Iteration {
            iteration: l,
            source: Box::new(e),
        })?;
        sink(&sample, t0.elapsed())?;
        theta = sample.theta.clone();
        traj = sample.trajectory.clone();
        chain.push(sample);
    }
    Ok(chain)
}

/// Lag-`k` sample autocorrelation; 0 for a constant series.
pub fn autocorrelation(series: &[f64], lag: usize) -> f64 {
    let n = series.len();
    if n <= lag + 1 {
        return 0.0;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let var: f64 = series.iter().map(|v| (v - mean).powi(2)).sum();
    if var <= 0.0 {
        return 0.0;
    }
    let cov: f64 = (0..n - lag)
        .map(|i| (series[i] - mean) * (series[i + lag] - mean))
        .sum();
    cov / var
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub lag1_autocorrelation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub coordinates: Vec<TraceSummary>,
    /// Fraction of consecutive iterations in which `x_t` changed, per `t`.
    pub update_rate: Vec<f64>,
    pub log_joint: Vec<f64>,
}

fn summarize(name: String, v: &[f64]) -> TraceSummary {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    TraceSummary {
        name,
        mean,
        sd,
        lag1_autocorrelation: autocorrelation(v, 1),
    }
}

pub fn chain_diagnostics(chain: &[ChainSample]) -> Result<ChainDiagnostics> {
    let first = chain
        .first()
        .ok_or_else(|| Error::config("chain", "empty chain"))?;
    let layout = first.theta.layout();
    let coordinates = (0..layout.len())
        .map(|i| {
            let v: Vec<f64> = chain.iter().map(|s| s.theta.values()[i]).collect();
            summarize(layout.name(i), &v)
        })
        .collect();
    let t_len = first.trajectory.len();
    let update_rate = (0..t_len)
        .map(|t| {
            if chain.len() < 2 {
                return 0.0;
            }
            let changed = chain
                .windows(2)
                .filter(|w| w[0].trajectory[t] != w[1].trajectory[t])
                .count();
            changed as f64 / (chain.len() - 1) as f64
        })
        .collect();
    Ok(ChainDiagnostics {
        coordinates,
        update_rate,
        log_joint: chain.iter().map(|s| s.log_joint).collect(),
    })
}

/// Draws `x_{0:T}` from the marginalized trajectory prior.
pub fn sample_trajectory_prior<R: Rng + ?Sized>(
    gp: Arc<GpTransition>,
    inputs: &[Vec<f64>],
    initial_variance: f64,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let n_x = gp.n_x;
    let sd0 = initial_variance.sqrt();
    let mut x = vec![(0..n_x)
        .map(|_| sd0 * rng.sample::<f64, _>(StandardNormal))
        .collect::<Vec<f64>>()];
    let mut f = TrajectoryFactor::with_capacity(gp, inputs.len());
    for t in 1..inputs.len() {
        let z = GpTransition::gp_input(&x[t - 1], &inputs[t - 1]);
        let p = f.one_step_predictive(&z)?;
        let next: Vec<f64> =
            p.mu.iter()
                .zip(&p.var)
                .map(|(m, v)| m + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect();
        f.extend(&z, &next)?;
        x.push(next);
    }
    Ok(x)
}

/// Geweke forward vs successive-conditional comparison settings.
#[derive(Debug, Clone)]
pub struct GewekeConfig {
    pub rounds: usize,
    pub n_particles: usize,
    pub seed: u64,
    /// Resample `θ` in the successive-conditional chain.
    pub sample_theta: bool,
    pub order: UpdateOrder,
    pub batches: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GewekeStat {
    pub name: String,
    pub forward_mean: f64,
    pub forward_se: f64,
    pub successive_mean: f64,
    pub successive_se: f64,
}

impl GewekeStat {
    /// Difference of the two means in units of their combined standard error.
    pub fn z(&self) -> f64 {
        (self.forward_mean - self.successive_mean)
            / (self.forward_se.powi(2) + self.successive_se.powi(2)).sqrt()
    }
}

fn geweke_stats(model: &GpSsmModel, theta: &HyperVector, x: &[Vec<f64>]) -> Vec<f64> {
    let v: Vec<f64> = x.iter().map(|s| s[0]).collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sq = v.iter().map(|a| a * a).sum::<f64>() / n;
    let lag = v.windows(2).map(|w| w[0] * w[1]).sum::<f64>() / (n - 1.0);
    let mut out = vec![mean, sq, lag, v[v.len() - 1]];
    for (i, p) in model.priors.iter().enumerate() {
        if !p.is_fixed() {
            out.push(theta.values()[i]);
        }
    }
    out
}

fn geweke_names(model: &GpSsmModel) -> Vec<String> {
    let mut names = vec![
        "mean_x".into(),
        "mean_x2".into(),
        "lag1_x".into(),
        "x_T".into(),
    ];
    for (i, p) in model.priors.iter().enumerate() {
        if !p.is_fixed() {
            names.push(model.layout().name(i));
        }
    }
    names
}

fn simulate_observations<R: Rng + ?Sized>(
    model: &GpSsmModel,
    x: &[Vec<f64>],
    r: f64,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    x.iter()
        .map(|s| {
            model
                .measurement
                .observe(s)
                .into_iter()
                .map(|m| m + r.sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

fn mean_se_iid(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Mean and batch-means standard error of an autocorrelated series.
pub fn mean_se_batched(v: &[f64], batches: usize) -> (f64, f64) {
    let size = v.len() / batches;
    let means: Vec<f64> = (0..batches)
        .map(|b| v[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let (m, se) = mean_se_iid(&means);
    (m, se)
}

/// Compares prior-forward draws of `(θ, x)` with a successive-conditional chain
/// that alternates `y | x, θ`, the hyperparameter updates and CPF-AS.
pub fn geweke_test(
    model: &GpSsmModel,
    inputs: &[Vec<f64>],
    cfg: &GewekeConfig,
) -> Result<Vec<GewekeStat>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let slice = SliceConfig::default();
    let names = geweke_names(model);
    let mut forward: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.rounds); names.len()];
    for _ in 0..cfg.rounds {
        let theta = model.priors.sample(&mut rng);
        let x = sample_trajectory_prior(
            Arc::new(model.transition(&theta)),
            inputs,
            model.initial_variance,
            &mut rng,
        )?;
        for (acc, s) in forward.iter_mut().zip(geweke_stats(model, &theta, &x)) {
            acc.push(s);
        }
    }
    let mut successive: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.rounds); names.len()];
    let mut theta = model.priors.sample(&mut rng);
    let mut x = sample_trajectory_prior(
        Arc::new(model.transition(&theta)),
        inputs,
        model.initial_variance,
        &mut rng,
    )?;
    for _ in 0..cfg.rounds {
        let r = GpSsmModel::measurement_noise(&theta);
        let data = Dataset::new(
            inputs.to_vec(),
            simulate_observations(model, &x, r, &mut rng),
        )?;
        if cfg.sample_theta {
            match cfg.order {
                UpdateOrder::TransitionFirst => {
                    theta = sample_theta_x(model, &theta, &x, inputs, None, &slice, &mut rng);
                    theta = sample_theta_y(model, &theta, &x, &data, &slice, &mut rng);
                }
                UpdateOrder::MeasurementFirst => {
                    theta = sample_theta_y(model, &theta, &x, &data, &slice, &mut rng);
                    theta = sample_theta_x(model, &theta, &x, inputs, None, &slice, &mut rng);
                }
            }
        }
        x = draw_trajectory(
            model,
            &theta,
            &data,
            Some(&x),
            None,
            cfg.n_particles,
            false,
            &mut rng,
        )?;
        for (acc, s) in successive.iter_mut().zip(geweke_stats(model, &theta, &x)) {
            acc.push(s);
        }
    }
    Ok(names
        .into_iter()
        .zip(forward.iter().zip(&successive))
        .map(|(name, (f, s))| {
            let (fm, fse) = mean_se_iid(f);
            let (sm, sse) = mean_se_batched(s, cfg.batches);
            GewekeStat {
                name,
                forward_mean: fm,
                forward_se: fse,
                successive_mean: sm,
                successive_se: sse,
            }
        })
        .collect())
}
