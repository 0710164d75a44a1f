//! Covariance functions, mean functions and the log-space hyperparameter vector.
//!
//! The transition GP is modelled as `n_x` independent scalar GPs over the
//! concatenated input `z = (x, u)`, each with its own squared-exponential ARD
//! kernel. Hyperparameters are stored and sampled as logarithms.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Relative jitter added to every Gram diagonal, scaled by the signal variance.
pub const JITTER: f64 = 1e-8;

/// Prior mean of the transition function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeanFunction {
    Zero,
    /// `m(x, u) = x`.
    Identity,
    /// `a·x + b·x/(1+x²) + c·u`, applied per state dimension with `u` the first input.
    Benchmark {
        a: f64,
        b: f64,
        c: f64,
    },
    /// `a·x + c·u + offset`, per state dimension with `u` the first input.
    Affine {
        a: f64,
        c: f64,
        offset: f64,
    },
}

impl MeanFunction {
    pub fn eval_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        match *self {
            MeanFunction::Zero => out.iter_mut().for_each(|o| *o = 0.0),
            MeanFunction::Identity => out.copy_from_slice(x),
            MeanFunction::Benchmark { a, b, c } => {
                let drive = u.first().map_or(0.0, |&u0| c * u0);
                for (o, &xi) in out.iter_mut().zip(x) {
                    *o = a * xi + b * xi / (1.0 + xi * xi) + drive;
                }
            }
            MeanFunction::Affine { a, c, offset } => {
                let drive = u.first().map_or(0.0, |&u0| c * u0) + offset;
                for (o, &xi) in out.iter_mut().zip(x) {
                    *o = a * xi + drive;
                }
            }
        }
    }

    /// Mean of dimension `d` at the concatenated input `z = (x, u)`.
    pub fn eval_dim(&self, d: usize, z: &[f64], n_x: usize) -> f64 {
        let (x, u) = z.split_at(n_x);
        match *self {
            MeanFunction::Zero => 0.0,
            MeanFunction::Identity => x[d],
            MeanFunction::Benchmark { a, b, c } => {
                let xi = x[d];
                a * xi + b * xi / (1.0 + xi * xi) + u.first().map_or(0.0, |&u0| c * u0)
            }
            MeanFunction::Affine { a, c, offset } => {
                a * x[d] + u.first().map_or(0.0, |&u0| c * u0) + offset
            }
        }
    }
}

/// Evaluates the configured mean at `(x, u)`.
pub fn mean_eval(mean: &MeanFunction, x: &[f64], u: &[f64], n_u: usize) -> Result<Vec<f64>> {
    check_dim("mean_eval input", n_u, u.len())?;
    let mut out = vec![0.0; x.len()];
    mean.eval_into(x, u, &mut out);
    Ok(out)
}

/// Squared-exponential ARD kernel, one independent kernel per state dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct SeArd {
    /// `σ_f²` per output dimension.
    pub signal_variance: Vec<f64>,
    /// Lengthscales, `[output dimension][input coordinate]`.
    pub lengthscales: Vec<Vec<f64>>,
}

impl SeArd {
    pub fn new(signal_variance: Vec<f64>, lengthscales: Vec<Vec<f64>>) -> Result<Self> {
        check_dim(
            "kernel lengthscale rows",
            signal_variance.len(),
            lengthscales.len(),
        )?;
        let n_z = lengthscales.first().map_or(0, Vec::len);
        for ls in &lengthscales {
            check_dim("kernel lengthscales", n_z, ls.len())?;
            if ls.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
                return Err(Error::config("lengthscales", "must be finite and positive"));
            }
        }
        if signal_variance.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::config(
                "signal_variance",
                "must be finite and positive",
            ));
        }
        Ok(Self {
            signal_variance,
            lengthscales,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.signal_variance.len()
    }

    pub fn input_dim(&self) -> usize {
        self.lengthscales.first().map_or(0, Vec::len)
    }

    /// Scalar kernel of output dimension `d`.
    #[inline]
    pub fn k(&self, d: usize, zi: &[f64], zj: &[f64]) -> f64 {
        let ls = &self.lengthscales[d];
        let mut r2 = 0.0;
        for ((a, b), l) in zi.iter().zip(zj).zip(ls) {
            let s = (a - b) / l;
            r2 += s * s;
        }
        self.signal_variance[d] * (-0.5 * r2).exp()
    }

    pub fn jitter(&self, d: usize) -> f64 {
        JITTER * self.signal_variance[d]
    }

    /// Gram matrix of dimension `d` over `points`, without jitter.
    pub fn gram(&self, d: usize, points: &[Vec<f64>]) -> nalgebra::DMatrix<f64> {
        let n = points.len();
        nalgebra::DMatrix::from_fn(n, n, |i, j| self.k(d, &points[i], &points[j]))
    }
}

/// Kernel block between two GP inputs; the diagonal of an `n_x × n_x` block.
pub fn cov_eval(cov: &SeArd, zi: &[f64], zj: &[f64]) -> Result<Vec<f64>> {
    check_dim("cov_eval first input", cov.input_dim(), zi.len())?;
    check_dim("cov_eval second input", cov.input_dim(), zj.len())?;
    Ok((0..cov.output_dim()).map(|d| cov.k(d, zi, zj)).collect())
}

/// Log-space prior over one hyperparameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prior {
    /// The log-value is `N(mu, sigma²)`, i.e. a log-normal prior on the value.
    LogNormal { mu: f64, sigma: f64 },
    /// The log-value is held at `value` and never sampled.
    Fixed { value: f64 },
}

impl Prior {
    pub fn log_density(&self, log_value: f64) -> f64 {
        match *self {
            Prior::LogNormal { mu, sigma } => {
                let z = (log_value - mu) / sigma;
                -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
            }
            Prior::Fixed { value } => {
                if log_value == value {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    /// Prior median of the log-value.
    pub fn median(&self) -> f64 {
        match *self {
            Prior::LogNormal { mu, .. } => mu,
            Prior::Fixed { value } => value,
        }
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self, Prior::Fixed { .. })
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Prior::LogNormal { mu, sigma } => {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                mu + sigma * z
            }
            Prior::Fixed { value } => value,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        match *self {
            Prior::LogNormal { mu, sigma }
                if mu.is_finite() && sigma > 0.0 && sigma.is_finite() =>
            {
                Ok(())
            }
            Prior::Fixed { value } if value.is_finite() => Ok(()),
            _ => Err(Error::config(
                name,
                "prior parameters must be finite with sigma > 0",
            )),
        }
    }
}

/// Which group a hyperparameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HyperKind {
    Lengthscale { dim: usize, input: usize },
    SignalVariance { dim: usize },
    ProcessNoise { dim: usize },
    MeasurementNoise,
}

/// Index map of the flat hyperparameter vector.
///
/// Per state dimension `d`: `n_z` log-lengthscales, the log signal variance and
/// the log process-noise variance; the log measurement-noise variance comes last.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HyperLayout {
    pub n_x: usize,
    pub n_z: usize,
}

impl HyperLayout {
    pub fn new(n_x: usize, n_z: usize) -> Self {
        Self { n_x, n_z }
    }

    fn per_dim(&self) -> usize {
        self.n_z + 2
    }

    pub fn len(&self) -> usize {
        self.n_x * self.per_dim() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn kind(&self, index: usize) -> HyperKind {
        if index == self.len() - 1 {
            return HyperKind::MeasurementNoise;
        }
        let dim = index / self.per_dim();
        let k = index % self.per_dim();
        if k < self.n_z {
            HyperKind::Lengthscale { dim, input: k }
        } else if k == self.n_z {
            HyperKind::SignalVariance { dim }
        } else {
            HyperKind::ProcessNoise { dim }
        }
    }

    pub fn index(&self, kind: HyperKind) -> usize {
        match kind {
            HyperKind::Lengthscale { dim, input } => dim * self.per_dim() + input,
            HyperKind::SignalVariance { dim } => dim * self.per_dim() + self.n_z,
            HyperKind::ProcessNoise { dim } => dim * self.per_dim() + self.n_z + 1,
            HyperKind::MeasurementNoise => self.len() - 1,
        }
    }

    pub fn name(&self, index: usize) -> String {
        match self.kind(index) {
            HyperKind::Lengthscale { dim, input } => {
                format!("log_lengthscale_{}_{}", dim + 1, input + 1)
            }
            HyperKind::SignalVariance { dim } => format!("log_signal_variance_{}", dim + 1),
            HyperKind::ProcessNoise { dim } => format!("log_q_{}", dim + 1),
            HyperKind::MeasurementNoise => "log_r".to_string(),
        }
    }

    pub fn names(&self) -> Vec<String> {
        (0..self.len()).map(|i| self.name(i)).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        (0..self.len()).find(|&i| self.name(i) == name)
    }

    /// Indices of the transition hyperparameters (kernel and `Q`) of dimension `d`.
    pub fn dim_indices(&self, d: usize) -> std::ops::Range<usize> {
        d * self.per_dim()..(d + 1) * self.per_dim()
    }
}

/// Flat vector of log-hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperVector {
    layout: HyperLayout,
    values: Vec<f64>,
}

impl HyperVector {
    pub fn from_log_values(layout: HyperLayout, values: Vec<f64>) -> Result<Self> {
        check_dim("hyperparameter vector", layout.len(), values.len())?;
        let hv = Self { layout, values };
        hv.validate()?;
        Ok(hv)
    }

    /// Packs natural-scale hyperparameters into log-space.
    pub fn pack(cov: &SeArd, q: &[f64], r: f64) -> Result<Self> {
        let layout = HyperLayout::new(cov.output_dim(), cov.input_dim());
        check_dim("process noise", layout.n_x, q.len())?;
        let mut values = vec![0.0; layout.len()];
        for d in 0..layout.n_x {
            for k in 0..layout.n_z {
                values[layout.index(HyperKind::Lengthscale { dim: d, input: k })] =
                    cov.lengthscales[d][k].ln();
            }
            values[layout.index(HyperKind::SignalVariance { dim: d })] =
                cov.signal_variance[d].ln();
            values[layout.index(HyperKind::ProcessNoise { dim: d })] = q[d].ln();
        }
        values[layout.index(HyperKind::MeasurementNoise)] = r.ln();
        Self::from_log_values(layout, values)
    }

    /// Natural-scale kernel, process-noise diagonal and measurement-noise variance.
    pub fn unpack(&self) -> (SeArd, Vec<f64>, f64) {
        let l = self.layout;
        let mut sv = Vec::with_capacity(l.n_x);
        let mut ls = Vec::with_capacity(l.n_x);
        let mut q = Vec::with_capacity(l.n_x);
        for d in 0..l.n_x {
            ls.push(
                (0..l.n_z)
                    .map(|k| self.get(HyperKind::Lengthscale { dim: d, input: k }).exp())
                    .collect(),
            );
            sv.push(self.get(HyperKind::SignalVariance { dim: d }).exp());
            q.push(self.get(HyperKind::ProcessNoise { dim: d }).exp());
        }
        let r = self.get(HyperKind::MeasurementNoise).exp();
        (
            SeArd {
                signal_variance: sv,
                lengthscales: ls,
            },
            q,
            r,
        )
    }

    pub fn layout(&self) -> HyperLayout {
        self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, kind: HyperKind) -> f64 {
        self.values[self.layout.index(kind)]
    }

    pub fn set_index(&mut self, index: usize, log_value: f64) {
        self.values[index] = log_value;
    }

    pub fn named(&self) -> Vec<(String, f64)> {
        (0..self.layout.len())
            .map(|i| (self.layout.name(i), self.values[i]))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, v) in self.values.iter().enumerate() {
            if !v.is_finite() || !v.exp().is_finite() || v.exp() <= 0.0 {
                return Err(Error::config(
                    self.layout.name(i),
                    "hyperparameter out of range",
                ));
            }
        }
        Ok(())
    }
}

/// One prior per hyperparameter, in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperPriors {
    layout: HyperLayout,
    priors: Vec<Prior>,
}

impl HyperPriors {
    pub fn new(layout: HyperLayout, priors: Vec<Prior>) -> Result<Self> {
        check_dim("hyperparameter priors", layout.len(), priors.len())?;
        for (i, p) in priors.iter().enumerate() {
            p.validate(&layout.name(i))?;
        }
        Ok(Self { layout, priors })
    }

    /// Builds priors from a name map; every hyperparameter must be named exactly once.
    pub fn from_named(
        layout: HyperLayout,
        named: &std::collections::BTreeMap<String, Prior>,
    ) -> Result<Self> {
        for key in named.keys() {
            if layout.index_of(key).is_none() {
                return Err(Error::config(key.clone(), "unknown hyperparameter"));
            }
        }
        let priors = (0..layout.len())
            .map(|i| {
                let name = layout.name(i);
                named
                    .get(&name)
                    .copied()
                    .ok_or_else(|| Error::config(name, "missing prior"))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layout, priors)
    }

    pub fn layout(&self) -> HyperLayout {
        self.layout
    }

    pub fn get(&self, index: usize) -> &Prior {
        &self.priors[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Prior> {
        self.priors.iter()
    }

    pub fn medians(&self) -> HyperVector {
        HyperVector {
            layout: self.layout,
            values: self.priors.iter().map(Prior::median).collect(),
        }
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> HyperVector {
        HyperVector {
            layout: self.layout,
            values: self.priors.iter().map(|p| p.sample(rng)).collect(),
        }
    }

    pub fn log_density(&self, theta: &HyperVector) -> f64 {
        self.priors
            .iter()
            .zip(theta.values())
            .map(|(p, &v)| p.log_density(v))
            .sum()
    }

    pub fn named(&self) -> std::collections::BTreeMap<String, Prior> {
        (0..self.layout.len())
            .map(|i| (self.layout.name(i), self.priors[i]))
            .collect()
    }
}
