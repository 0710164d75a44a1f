//! The GP-SSM generative model, datasets and forward simulation of known systems.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
pub use crate::kernels::MeanFunction;
use crate::kernels::{HyperLayout, HyperPriors, HyperVector, Prior, SeArd};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Observation map and Gaussian noise model. The noise variance `r` is a
/// hyperparameter and is passed in separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeasurementModel {
    /// `y = d·x² + e`, elementwise; `n_y = n_x`.
    Quadratic { d: f64 },
    /// `y = C x + e` with `C` given row-major as `n_y × n_x`.
    Linear { c: Vec<Vec<f64>> },
}

impl MeasurementModel {
    pub fn obs_dim(&self, n_x: usize) -> usize {
        match self {
            MeasurementModel::Quadratic { .. } => n_x,
            MeasurementModel::Linear { c } => c.len(),
        }
    }

    pub fn observe_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            MeasurementModel::Quadratic { d } => {
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = d * xi * xi;
                }
            }
            MeasurementModel::Linear { c } => {
                for (o, row) in out.iter_mut().zip(c) {
                    *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
                }
            }
        }
    }

    pub fn observe(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.obs_dim(x.len())];
        self.observe_into(x, &mut out);
        out
    }

    /// `log p(y | x, r)` without argument checks.
    #[inline]
    pub fn log_likelihood_unchecked(&self, y: &[f64], x: &[f64], r: f64) -> f64 {
        let norm = -0.5 * (LN_2PI + r.ln());
        match self {
            MeasurementModel::Quadratic { d } => y
                .iter()
                .zip(x)
                .map(|(yi, xi)| {
                    let e = yi - d * xi * xi;
                    norm - 0.5 * e * e / r
                })
                .sum(),
            MeasurementModel::Linear { c } => y
                .iter()
                .zip(c)
                .map(|(yi, row)| {
                    let g: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
                    let e = yi - g;
                    norm - 0.5 * e * e / r
                })
                .sum(),
        }
    }

    /// Exact Gaussian log-density of an observation.
    pub fn log_likelihood(&self, y: &[f64], x: &[f64], r: f64) -> Result<f64> {
        if !(r > 0.0) {
            return Err(Error::config(
                "r",
                "measurement noise variance must be positive",
            ));
        }
        check_dim("observation", self.obs_dim(x.len()), y.len())?;
        if let MeasurementModel::Linear { c } = self {
            for row in c {
                check_dim("measurement matrix row", x.len(), row.len())?;
            }
        }
        Ok(self.log_likelihood_unchecked(y, x, r))
    }
}

/// Inputs, observations and (optionally) the ground truth of one run.
///
/// All sequences have one entry per time index `0..=T`. The input at `T` is
/// carried so that `f(x_T, u_T)` can be scored; it never enters training.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub observations: Vec<Vec<f64>>,
    pub states: Option<Vec<Vec<f64>>>,
    /// Noise-free transition values `f(x_t, u_t)`.
    pub f_values: Option<Vec<Vec<f64>>>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, observations: Vec<Vec<f64>>) -> Result<Self> {
        let ds = Self {
            inputs,
            observations,
            states: None,
            f_values: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// `T`, the index of the last observation.
    pub fn horizon(&self) -> usize {
        self.observations.len().saturating_sub(1)
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn obs_dim(&self) -> usize {
        self.observations.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.observations.len();
        if n == 0 {
            return Err(Error::config("observations", "dataset is empty"));
        }
        check_dim("dataset inputs length", n, self.inputs.len())?;
        let (nu, ny) = (self.input_dim(), self.obs_dim());
        for u in &self.inputs {
            check_dim("input row", nu, u.len())?;
        }
        for y in &self.observations {
            check_dim("observation row", ny, y.len())?;
        }
        let all_finite = |rows: &Vec<Vec<f64>>| rows.iter().flatten().all(|v| v.is_finite());
        if !all_finite(&self.inputs) || !all_finite(&self.observations) {
            return Err(Error::non_finite("dataset"));
        }
        for (name, opt) in [("states", &self.states), ("f_values", &self.f_values)] {
            if let Some(rows) = opt {
                check_dim("dataset ground truth length", n, rows.len())?;
                let nx = rows.first().map_or(0, Vec::len);
                if rows.iter().any(|r| r.len() != nx) || !all_finite(rows) {
                    return Err(Error::config(name, "ragged or non-finite rows"));
                }
            }
        }
        Ok(())
    }

    /// Writes `t,u_*,y_*[,x_*][,f_*]` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.input_dim()).map(|i| format!("u_{i}")));
        header.extend((1..=self.obs_dim()).map(|i| format!("y_{i}")));
        if let Some(x) = &self.states {
            header.extend((1..=x[0].len()).map(|i| format!("x_{i}")));
        }
        if let Some(f) = &self.f_values {
            header.extend((1..=f[0].len()).map(|i| format!("f_{i}")));
        }
        w.write_record(&header)?;
        for t in 0..self.len() {
            let mut row = vec![t.to_string()];
            let push = |row: &mut Vec<String>, vals: &[f64]| {
                row.extend(vals.iter().map(|v| format!("{v:?}")));
            };
            push(&mut row, &self.inputs[t]);
            push(&mut row, &self.observations[t]);
            if let Some(x) = &self.states {
                push(&mut row, &x[t]);
            }
            if let Some(f) = &self.f_values {
                push(&mut row, &f[t]);
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let mut cols: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (j, h) in header.iter().enumerate() {
            if h == "t" {
                continue;
            }
            let (prefix, idx) = h
                .split_once('_')
                .ok_or_else(|| Error::Parse(format!("unexpected column `{h}`")))?;
            let _: usize = idx
                .parse()
                .map_err(|_| Error::Parse(format!("unexpected column `{h}`")))?;
            match prefix {
                "u" | "y" | "x" | "f" => cols.entry(prefix).or_default().push(j),
                _ => return Err(Error::Parse(format!("unexpected column `{h}`"))),
            }
        }
        if !cols.contains_key("y") {
            return Err(Error::Parse("dataset has no y_ columns".into()));
        }
        let mut table: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            for (&prefix, idx) in &cols {
                let vals = idx
                    .iter()
                    .map(|&j| {
                        rec.get(j).unwrap_or("").trim().parse::<f64>().map_err(|_| {
                            Error::Parse(format!("row {}: bad value in `{}`", line + 1, &header[j]))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                table.entry(prefix).or_default().push(vals);
            }
        }
        let observations = table.remove("y").unwrap_or_default();
        let inputs = table
            .remove("u")
            .unwrap_or_else(|| vec![Vec::new(); observations.len()]);
        let ds = Self {
            inputs,
            observations,
            states: table.remove("x"),
            f_values: table.remove("f"),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// A fully specified parametric system, used to generate ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnownSystem {
    pub transition: MeanFunction,
    /// Process-noise variances; zero is allowed here.
    pub q: Vec<f64>,
    pub measurement: MeasurementModel,
    pub r: f64,
    pub initial_variance: f64,
}

impl KnownSystem {
    pub fn state_dim(&self) -> usize {
        self.q.len()
    }
}

/// Simulates `x_{t+1} = f(x_t, u_t) + v_t`, `y_t = g(x_t) + e_t` for `t = 0..T`
/// where `T + 1 = inputs.len()`.
pub fn simulate(system: &KnownSystem, inputs: &[Vec<f64>], seed: u64) -> Result<Dataset> {
    if inputs.len() < 2 {
        return Err(Error::config("horizon", "need at least one transition"));
    }
    if system.q.iter().any(|&q| !(q >= 0.0))
        || !(system.r >= 0.0)
        || !(system.initial_variance >= 0.0)
    {
        return Err(Error::config("noise", "variances must be nonnegative"));
    }
    let n_x = system.state_dim();
    let n_y = system.measurement.obs_dim(n_x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { rng.sample(StandardNormal) };

    let sd0 = system.initial_variance.sqrt();
    let mut x: Vec<f64> = (0..n_x).map(|_| sd0 * normal()).collect();
    let (mut states, mut observations, mut f_values) = (Vec::new(), Vec::new(), Vec::new());
    let sq: Vec<f64> = system.q.iter().map(|q| q.sqrt()).collect();
    let sr = system.r.sqrt();
    for (t, u) in inputs.iter().enumerate() {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("simulated state at t={t}")));
        }
        let mut y = vec![0.0; n_y];
        system.measurement.observe_into(&x, &mut y);
        y.iter_mut().for_each(|v| *v += sr * normal());
        let mut f = vec![0.0; n_x];
        system.transition.eval_into(&x, u, &mut f);
        observations.push(y);
        states.push(x.clone());
        x = f.iter().zip(&sq).map(|(fi, s)| fi + s * normal()).collect();
        f_values.push(f);
    }
    let ds = Dataset {
        inputs: inputs.to_vec(),
        observations,
        states: Some(states),
        f_values: Some(f_values),
    };
    ds.validate()?;
    Ok(ds)
}

/// Serializable description of a GP-SSM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub state_dim: usize,
    #[serde(default)]
    pub input_dim: usize,
    pub mean: MeanFunction,
    pub measurement: MeasurementModel,
    #[serde(default = "default_initial_variance")]
    pub initial_variance: f64,
    /// One log-space prior per hyperparameter, keyed by name (`log_lengthscale_1_1`, …).
    pub priors: BTreeMap<String, Prior>,
}

fn default_initial_variance() -> f64 {
    1.0
}

/// GP-SSM: GP prior over the transition, diagonal process noise, known
/// measurement form and log-space hyperparameter priors.
#[derive(Debug, Clone, PartialEq)]
pub struct GpSsmModel {
    pub state_dim: usize,
    pub input_dim: usize,
    pub obs_dim: usize,
    pub mean: MeanFunction,
    pub measurement: MeasurementModel,
    /// Variance of the zero-mean Gaussian prior on `x_0`.
    pub initial_variance: f64,
    pub priors: HyperPriors,
}

impl GpSsmModel {
    pub fn from_config(cfg: &ModelConfig) -> Result<Self> {
        if cfg.state_dim == 0 {
            return Err(Error::config("state_dim", "must be positive"));
        }
        if !(cfg.initial_variance > 0.0 && cfg.initial_variance.is_finite()) {
            return Err(Error::config("initial_variance", "must be positive"));
        }
        if let MeasurementModel::Linear { c } = &cfg.measurement {
            if c.is_empty() || c.iter().any(|row| row.len() != cfg.state_dim) {
                return Err(Error::config("measurement.c", "must be n_y × state_dim"));
            }
        }
        if let MeasurementModel::Quadratic { d } = cfg.measurement {
            if !d.is_finite() {
                return Err(Error::config("measurement.d", "must be finite"));
            }
        }
        let layout = HyperLayout::new(cfg.state_dim, cfg.state_dim + cfg.input_dim);
        let priors = HyperPriors::from_named(layout, &cfg.priors)?;
        Ok(Self {
            state_dim: cfg.state_dim,
            input_dim: cfg.input_dim,
            obs_dim: cfg.measurement.obs_dim(cfg.state_dim),
            mean: cfg.mean.clone(),
            measurement: cfg.measurement.clone(),
            initial_variance: cfg.initial_variance,
            priors,
        })
    }

    pub fn to_config(&self) -> ModelConfig {
        ModelConfig {
            state_dim: self.state_dim,
            input_dim: self.input_dim,
            mean: self.mean.clone(),
            measurement: self.measurement.clone(),
            initial_variance: self.initial_variance,
            priors: self.priors.named(),
        }
    }

    pub fn layout(&self) -> HyperLayout {
        self.priors.layout()
    }

    /// GP input dimension `n_x + n_u`.
    pub fn gp_input_dim(&self) -> usize {
        self.state_dim + self.input_dim
    }

    /// Transition GP for a hyperparameter draw.
    pub fn transition(&self, theta: &HyperVector) -> GpTransition {
        let (cov, q, _) = theta.unpack();
        GpTransition {
            mean: self.mean.clone(),
            cov,
            q,
            n_x: self.state_dim,
        }
    }

    pub fn measurement_noise(theta: &HyperVector) -> f64 {
        theta.unpack().2
    }

    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        data.validate()?;
        check_dim("dataset input dimension", self.input_dim, data.input_dim())?;
        check_dim(
            "dataset observation dimension",
            self.obs_dim,
            data.obs_dim(),
        )?;
        if data.len() < 2 {
            return Err(Error::config("dataset", "need at least two time steps"));
        }
        Ok(())
    }

    /// Prior log-density of the initial state.
    pub fn initial_log_density(&self, x0: &[f64]) -> f64 {
        let v = self.initial_variance;
        x0.iter()
            .map(|x| -0.5 * (LN_2PI + v.ln()) - 0.5 * x * x / v)
            .sum()
    }

    /// `Σ_t log p(y_t | x_t, r)`.
    pub fn trajectory_log_likelihood(&self, data: &Dataset, traj: &[Vec<f64>], r: f64) -> f64 {
        data.observations
            .iter()
            .zip(traj)
            .map(|(y, x)| self.measurement.log_likelihood_unchecked(y, x, r))
            .sum()
    }
}

/// Exact log-density `log p(y_t | x_t, θ_y)`.
pub fn measurement_loglik(model: &GpSsmModel, y: &[f64], x: &[f64], r: f64) -> Result<f64> {
    check_dim("state", model.state_dim, x.len())?;
    model.measurement.log_likelihood(y, x, r)
}

/// Mean, kernel and process noise of the transition GP under one hyperparameter value.
#[derive(Debug, Clone, PartialEq)]
pub struct GpTransition {
    pub mean: MeanFunction,
    pub cov: SeArd,
    pub q: Vec<f64>,
    pub n_x: usize,
}

impl GpTransition {
    pub fn input_dim(&self) -> usize {
        self.cov.input_dim()
    }

    /// Concatenated GP input `(x, u)`.
    pub fn gp_input(x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut z = Vec::with_capacity(x.len() + u.len());
        z.extend_from_slice(x);
        z.extend_from_slice(u);
        z
    }

    /// Diagonal of `K̃` at a point for dimension `d`: `k(z,z) + Q_d + jitter`.
    pub fn noisy_diag(&self, d: usize) -> f64 {
        self.cov.signal_variance[d] + self.q[d] + self.cov.jitter(d)
    }
}
