//! Predictive mixtures over chain samples, latent function draws and
//! evaluation metrics.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::fic::{FicState, InducingSet};
use crate::gp_prior::{PredictiveMoments, TrajectoryFactor};
use crate::model::{Dataset, GpSsmModel, GpTransition};
use crate::pgas::ChainSample;

/// Equally weighted Gaussian mixture with diagonal components.
#[derive(Debug, Clone, PartialEq)]
pub struct MixturePredictive {
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl MixturePredictive {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.len() as f64
    }

    pub fn log_density(&self, f: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .means
            .iter()
            .zip(&self.variances)
            .map(|(mu, var)| {
                PredictiveMoments {
                    mu: mu.clone(),
                    var: var.clone(),
                }
                .log_density(f)
            })
            .collect();
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max + (terms.iter().map(|t| (t - max).exp()).sum::<f64>() * self.weight()).ln()
    }
}

/// Mixture mean and variance by the law of total variance.
pub fn mixture_moments(mix: &MixturePredictive) -> (Vec<f64>, Vec<f64>) {
    let n_x = mix.means[0].len();
    let w = mix.weight();
    let mut mean = vec![0.0; n_x];
    let mut second = vec![0.0; n_x];
    for (mu, var) in mix.means.iter().zip(&mix.variances) {
        for d in 0..n_x {
            mean[d] += w * mu[d];
            second[d] += w * (var[d] + mu[d] * mu[d]);
        }
    }
    let var = second
        .iter()
        .zip(&mean)
        .map(|(s, m)| (s - m * m).max(0.0))
        .collect();
    (mean, var)
}

enum Component {
    Dense {
        factor: TrajectoryFactor,
        weights: Vec<Vec<f64>>,
    },
    Fic {
        state: FicState,
        beta: Vec<Vec<f64>>,
    },
}

impl Component {
    fn gp(&self) -> &Arc<GpTransition> {
        match self {
            Component::Dense { factor, .. } => factor.gp(),
            Component::Fic { state, .. } => state.inducing().gp(),
        }
    }

    fn moments(&self, z: &[f64], with_noise: bool) -> Result<PredictiveMoments> {
        match self {
            Component::Dense { factor, .. } => {
                let mut p = factor.one_step_predictive(z)?;
                if !with_noise {
                    let gp = factor.gp();
                    for (d, v) in p.var.iter_mut().enumerate() {
                        *v = (*v - gp.q[d] - gp.cov.jitter(d)).max(0.0);
                    }
                }
                Ok(p)
            }
            Component::Fic { state, .. } => {
                if with_noise {
                    state.predictive(z)
                } else {
                    state.predictive_f(z)
                }
            }
        }
    }

    fn mean_into(&self, z: &[f64], out: &mut [f64]) {
        let gp = self.gp();
        match self {
            Component::Dense { factor, weights } => {
                for (d, w) in weights.iter().enumerate() {
                    let mut s = gp.mean.eval_dim(d, z, gp.n_x);
                    for (k, wk) in w.iter().enumerate() {
                        s += gp.cov.k(d, factor.point(k), z) * wk;
                    }
                    out[d] = s;
                }
            }
            Component::Fic { state, beta } => {
                let set = state.inducing();
                for (d, b) in beta.iter().enumerate() {
                    let mut s = gp.mean.eval_dim(d, z, gp.n_x);
                    for (u, bk) in set.inputs().iter().zip(b) {
                        s += gp.cov.k(d, u, z) * bk;
                    }
                    out[d] = s;
                }
            }
        }
    }
}

/// Per-sample GP regressors conditioned on each sample's trajectory, with
/// `x_{0:T-1}` as inputs and `x_{1:T}` as outputs.
pub struct MixturePredictor {
    components: Vec<Component>,
    n_x: usize,
    n_u: usize,
}

impl MixturePredictor {
    /// Builds one component per sample; samples whose factorization fails are
    /// skipped with a warning.
    pub fn new(model: &GpSsmModel, chain: &[ChainSample], inputs: &[Vec<f64>]) -> Result<Self> {
        if chain.is_empty() {
            return Err(Error::config("chain", "no samples to predict from"));
        }
        let build = |s: &ChainSample| -> Result<Component> {
            check_dim("chain trajectory", inputs.len(), s.trajectory.len())?;
            let gp = Arc::new(model.transition(&s.theta));
            match &s.inducing {
                None => {
                    let factor = TrajectoryFactor::from_trajectory(gp, &s.trajectory, inputs)?;
                    let weights = (0..model.state_dim)
                        .map(|d| factor.regression_weights(d))
                        .collect();
                    Ok(Component::Dense { factor, weights })
                }
                Some(u) => {
                    let set = Arc::new(InducingSet::new(gp, u.clone())?);
                    let state = FicState::from_trajectory(set.clone(), &s.trajectory, inputs)?;
                    let beta = state
                        .dims
                        .iter()
                        .zip(&set.kuu)
                        .map(|(fd, kuu)| {
                            let mut b = fd.c_white.clone();
                            fd.chol.backward(&mut b);
                            kuu.backward(&mut b);
                            b
                        })
                        .collect();
                    Ok(Component::Fic { state, beta })
                }
            }
        };
        let built: Vec<Result<Component>> = chain.par_iter().map(build).collect();
        let mut components = Vec::with_capacity(built.len());
        for (s, c) in chain.iter().zip(built) {
            match c {
                Ok(c) => components.push(c),
                Err(e) => log::warn!("skipping chain sample {}: {e}", s.iteration),
            }
        }
        if components.is_empty() {
            return Err(Error::config(
                "chain",
                "every chain sample failed to factorize",
            ));
        }
        Ok(Self {
            components,
            n_x: model.state_dim,
            n_u: model.input_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    fn query(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        check_dim("predictive state", self.n_x, x.len())?;
        check_dim("predictive input", self.n_u, u.len())?;
        Ok(GpTransition::gp_input(x, u))
    }

    /// Mixture over samples of `f(x*, u*)`; `with_noise` adds `Q` for next-state prediction.
    pub fn predict(&self, x: &[f64], u: &[f64], with_noise: bool) -> Result<MixturePredictive> {
        let z = self.query(x, u)?;
        let comps: Vec<PredictiveMoments> = self
            .components
            .iter()
            .map(|c| c.moments(&z, with_noise))
            .collect::<Result<_>>()?;
        Ok(MixturePredictive {
            means: comps.iter().map(|p| p.mu.clone()).collect(),
            variances: comps.into_iter().map(|p| p.var).collect(),
        })
    }

    /// Mixture mean only, in `O(T)` (dense) or `O(M)` (sparse) per component.
    pub fn predict_mean(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let z = self.query(x, u)?;
        let mut acc = vec![0.0; self.n_x];
        let mut buf = vec![0.0; self.n_x];
        for c in &self.components {
            c.mean_into(&z, &mut buf);
            for (a, b) in acc.iter_mut().zip(&buf) {
                *a += b;
            }
        }
        let l = self.len() as f64;
        Ok(acc.into_iter().map(|v| v / l).collect())
    }
}

/// Mixture predictive of `f(x*, u*)` from post-burn-in samples.
pub fn predictive_mixture(
    model: &GpSsmModel,
    chain: &[ChainSample],
    inputs: &[Vec<f64>],
    x_star: &[f64],
    u_star: &[f64],
) -> Result<MixturePredictive> {
    MixturePredictor::new(model, chain, inputs)?.predict(x_star, u_star, false)
}

/// Random subsample of `keep` samples without replacement, order preserved.
pub fn thin_chain(chain: &[ChainSample], keep: usize, seed: u64) -> Result<Vec<ChainSample>> {
    if keep == 0 || keep > chain.len() {
        return Err(Error::config(
            "keep",
            format!("must be in 1..={}", chain.len()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample_indices(&mut rng, chain.len(), keep).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| chain[i].clone()).collect())
}

/// Samples after the first `burn_in` iterations.
pub fn post_burn_in(chain: &[ChainSample], burn_in: usize) -> Vec<ChainSample> {
    chain
        .iter()
        .filter(|s| s.iteration > burn_in)
        .cloned()
        .collect()
}

/// Joint draw of `f_{0:T-1}` at the sample's own inputs given `x_{t+1} = f_t + v_t`.
pub fn sample_latent_f<R: Rng + ?Sized>(
    model: &GpSsmModel,
    sample: &ChainSample,
    inputs: &[Vec<f64>],
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let x = &sample.trajectory;
    let n = x.len() - 1;
    let gp = model.transition(&sample.theta);
    let z: Vec<Vec<f64>> = (0..n)
        .map(|t| GpTransition::gp_input(&x[t], &inputs[t]))
        .collect();
    let mut out = vec![vec![0.0; gp.n_x]; n];
    for d in 0..gp.n_x {
        let q = gp.q[d];
        let kt = DMatrix::from_fn(n, n, |i, j| {
            gp.cov.k(d, &z[i], &z[j]) + if i == j { q + gp.cov.jitter(d) } else { 0.0 }
        });
        let chol = kt.cholesky().ok_or_else(|| Error::NotPositiveDefinite {
            context: "latent f covariance",
            row: 0,
            pivot: f64::NAN,
        })?;
        let r = DVector::from_fn(n, |i, _| x[i + 1][d] - gp.mean.eval_dim(d, &z[i], gp.n_x));
        // Posterior mean r − Q K̃⁻¹ r and covariance Q − Q² K̃⁻¹ (stable as Q → 0).
        let mean = &r - chol.solve(&r) * q;
        let cov = DMatrix::identity(n, n) * q - chol.inverse() * (q * q);
        let cov = (&cov + cov.transpose()) * 0.5;
        let eps = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let draw = match cov.clone().cholesky() {
            Some(c) => c.l() * eps,
            None => {
                let eig = cov.symmetric_eigen();
                let s = DVector::from_fn(n, |i, _| eig.eigenvalues[i].max(0.0).sqrt() * eps[i]);
                eig.eigenvectors * s
            }
        };
        for t in 0..n {
            out[t][d] = gp.mean.eval_dim(d, &z[t], gp.n_x) + mean[t] + draw[t];
        }
    }
    Ok(out)
}

/// RMSE of the mixture mean against the true `f(x_t, u_t)` over a test set.
pub fn rmse_prediction(predictor: &MixturePredictor, test: &Dataset) -> Result<f64> {
    let states = test
        .states
        .as_ref()
        .ok_or_else(|| Error::config("test", "states required"))?;
    let f = test
        .f_values
        .as_ref()
        .ok_or_else(|| Error::config("test", "f values required"))?;
    let sq: Vec<f64> = (0..f.len())
        .into_par_iter()
        .map(|t| {
            let m = predictor.predict_mean(&states[t], &test.inputs[t])?;
            Ok(m.iter()
                .zip(&f[t])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>())
        })
        .collect::<Result<_>>()?;
    let n = (f.len() * f[0].len()) as f64;
    Ok((sq.iter().sum::<f64>() / n).sqrt())
}

/// Per-time posterior mean over the samples.
pub fn posterior_mean_trajectory(chain: &[ChainSample]) -> Result<Vec<Vec<f64>>> {
    let first = chain
        .first()
        .ok_or_else(|| Error::config("chain", "empty chain"))?;
    let mut acc = vec![vec![0.0; first.trajectory[0].len()]; first.trajectory.len()];
    for s in chain {
        check_dim("chain trajectory", acc.len(), s.trajectory.len())?;
        for (a, x) in acc.iter_mut().zip(&s.trajectory) {
            for (ai, xi) in a.iter_mut().zip(x) {
                *ai += xi;
            }
        }
    }
    let l = chain.len() as f64;
    acc.iter_mut().flatten().for_each(|v| *v /= l);
    Ok(acc)
}

/// RMSE of the posterior-mean trajectory against the true states.
pub fn rmse_smoothing(chain: &[ChainSample], truth: &[Vec<f64>]) -> Result<f64> {
    let mean = posterior_mean_trajectory(chain)?;
    check_dim("ground-truth trajectory", mean.len(), truth.len())?;
    let n = (truth.len() * truth[0].len()) as f64;
    let sq: f64 = mean
        .iter()
        .zip(truth)
        .flat_map(|(m, x)| m.iter().zip(x).map(|(a, b)| (a - b).powi(2)))
        .sum();
    Ok((sq / n).sqrt())
}

/// One row of a predictions file.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Mixture moments over a list of `(x*, u*)` query points.
pub fn predict_points(
    predictor: &MixturePredictor,
    points: &[(Vec<f64>, Vec<f64>)],
    with_noise: bool,
) -> Result<Vec<PredictionRow>> {
    points
        .par_iter()
        .map(|(x, u)| {
            let (mean, variance) = mixture_moments(&predictor.predict(x, u, with_noise)?);
            Ok(PredictionRow {
                x: x.clone(),
                u: u.clone(),
                mean,
                variance,
            })
        })
        .collect()
}

/// Writes rows as CSV with header `x_1..,u_1..,mean_1..,var_1..`.
pub fn write_predictions_csv<W: Write>(rows: &[PredictionRow], writer: W) -> Result<()> {
    let first = rows
        .first()
        .ok_or_else(|| Error::config("predictions", "no rows"))?;
    let mut w = csv::Writer::from_writer(writer);
    let mut header = Vec::new();
    for (prefix, n) in [
        ("x", first.x.len()),
        ("u", first.u.len()),
        ("mean", first.mean.len()),
        ("var", first.variance.len()),
    ] {
        header.extend((1..=n).map(|i| format!("{prefix}_{i}")));
    }
    w.write_record(&header)?;
    for r in rows {
        let rec: Vec<String> =
            r.x.iter()
                .chain(&r.u)
                .chain(&r.mean)
                .chain(&r.variance)
                .map(|v| v.to_string())
                .collect();
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Regular grid of query points; each axis is `(lo, hi, count)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub x: Vec<(f64, f64, usize)>,
    #[serde(default)]
    pub u: Vec<(f64, f64, usize)>,
}

impl GridSpec {
    pub fn points(&self) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let axes: Vec<Vec<f64>> = self
            .x
            .iter()
            .chain(&self.u)
            .map(|&(lo, hi, n)| match n {
                0 => Err(Error::config("grid", "axis count must be positive")),
                1 => Ok(vec![lo]),
                _ => Ok((0..n)
                    .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
                    .collect()),
            })
            .collect::<Result<_>>()?;
        let mut out = vec![Vec::new()];
        for axis in &axes {
            out = out
                .into_iter()
                .flat_map(|p: Vec<f64>| {
                    axis.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.push(v);
                        q
                    })
                })
                .collect();
        }
        let n_x = self.x.len();
        Ok(out
            .into_iter()
            .map(|mut p| {
                let u = p.split_off(n_x);
                (p, u)
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fic::InducingStrategy;
    use crate::kernels::{HyperVector, MeanFunction, Prior, SeArd};
    use crate::model::{MeasurementModel, ModelConfig};
    use std::collections::BTreeMap;

    const LN_2PI: f64 = 1.837_877_066_409_345_5;

    fn model() -> GpSsmModel {
        let priors: BTreeMap<String, Prior> = [
            "log_lengthscale_1_1",
            "log_lengthscale_1_2",
            "log_signal_variance_1",
            "log_q_1",
            "log_r",
        ]
        .iter()
        .map(|k| {
            (
                k.to_string(),
                Prior::LogNormal {
                    mu: 0.0,
                    sigma: 1.0,
                },
            )
        })
        .collect();
        GpSsmModel::from_config(&ModelConfig {
            state_dim: 1,
            input_dim: 1,
            mean: MeanFunction::Benchmark {
                a: 0.3,
                b: 1.0,
                c: 0.5,
            },
            measurement: MeasurementModel::Quadratic { d: 0.05 },
            initial_variance: 1.0,
            priors,
        })
        .unwrap()
    }

    fn sample(seed: u64, t: usize, q: f64) -> (ChainSample, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = HyperVector::pack(
            &SeArd::new(
                vec![rng.random_range(0.5..2.0)],
                vec![vec![rng.random_range(0.8..2.0), 1.3]],
            )
            .unwrap(),
            &[q],
            0.5,
        )
        .unwrap();
        let traj = (0..=t).map(|_| vec![rng.random_range(-2.0..2.0)]).collect();
        let inputs = (0..=t)
            .map(|k| vec![(1.2 * (k + 1) as f64).cos()])
            .collect();
        (
            ChainSample {
                iteration: 1,
                theta,
                trajectory: traj,
                log_joint: 0.0,
                inducing: None,
            },
            inputs,
        )
    }

    /// Dense GP regression: inputs z_{0:T-1}, outputs x_{1:T}, noise Q + jitter.
    fn dense_regression(
        m: &GpSsmModel,
        s: &ChainSample,
        inputs: &[Vec<f64>],
        zs: &[f64],
    ) -> (f64, f64) {
        let gp = m.transition(&s.theta);
        let x = &s.trajectory;
        let n = x.len() - 1;
        let z: Vec<Vec<f64>> = (0..n)
            .map(|t| GpTransition::gp_input(&x[t], &inputs[t]))
            .collect();
        let kt = DMatrix::from_fn(n, n, |i, j| {
            gp.cov.k(0, &z[i], &z[j])
                + if i == j {
                    gp.q[0] + gp.cov.jitter(0)
                } else {
                    0.0
                }
        });
        let inv = kt.try_inverse().unwrap();
        let ks = DVector::from_fn(n, |i, _| gp.cov.k(0, &z[i], zs));
        let r = DVector::from_fn(n, |i, _| x[i + 1][0] - gp.mean.eval_dim(0, &z[i], 1));
        let mu = gp.mean.eval_dim(0, zs, 1) + (ks.transpose() * &inv * r)[0];
        let var = gp.cov.k(0, zs, zs) - (ks.transpose() * &inv * &ks)[0];
        (mu, var)
    }

    #[test]
    fn components_match_dense_regression() {
        let m = model();
        let mut chain = Vec::new();
        let mut inputs = Vec::new();
        for seed in 0..3 {
            let (s, u) = sample(seed, 6, 0.2);
            chain.push(s);
            inputs = u;
        }
        let pred = MixturePredictor::new(&m, &chain, &inputs).unwrap();
        for (xs, us) in [(0.3, 0.1), (-1.7, 0.9), (2.5, -0.4)] {
            let mix = pred.predict(&[xs], &[us], false).unwrap();
            for (l, s) in chain.iter().enumerate() {
                let (mu, var) = dense_regression(&m, s, &inputs, &[xs, us]);
                assert!((mix.means[l][0] - mu).abs() < 1e-8);
                assert!((mix.variances[l][0] - var).abs() < 1e-8);
            }
            let fast = pred.predict_mean(&[xs], &[us]).unwrap()[0];
            assert!((fast - mixture_moments(&mix).0[0]).abs() < 1e-10);
            let noisy = pred.predict(&[xs], &[us], true).unwrap();
            let gp = m.transition(&chain[0].theta);
            assert!(
                (noisy.variances[0][0] - mix.variances[0][0] - gp.q[0] - gp.cov.jitter(0)).abs()
                    < 1e-10
            );
        }
    }

    #[test]
    fn single_sample_is_plain_regression_and_reverts_far_away() {
        let m = model();
        let (s, inputs) = sample(7, 5, 0.3);
        let mix =
            predictive_mixture(&m, std::slice::from_ref(&s), &inputs, &[0.4], &[0.2]).unwrap();
        assert_eq!(mix.len(), 1);
        let (mu, var) = dense_regression(&m, &s, &inputs, &[0.4, 0.2]);
        assert!((mix.means[0][0] - mu).abs() < 1e-8 && (mix.variances[0][0] - var).abs() < 1e-8);
        let far = predictive_mixture(&m, &[s.clone()], &inputs, &[400.0], &[0.2]).unwrap();
        let gp = m.transition(&s.theta);
        assert!((far.means[0][0] - gp.mean.eval_dim(0, &[400.0, 0.2], 1)).abs() < 1e-12);
        assert!((far.variances[0][0] - gp.cov.signal_variance[0]).abs() < 1e-12);
    }

    #[test]
    fn sparse_components_fast_mean_and_peak() {
        let m = model();
        let (mut s, inputs) = sample(8, 12, 0.2);
        let cand: Vec<Vec<f64>> = (0..12)
            .map(|t| GpTransition::gp_input(&s.trajectory[t], &inputs[t]))
            .collect();
        s.inducing =
            Some(crate::fic::select_inducing(&cand, 5, &InducingStrategy::Kmeans, 1).unwrap());
        let pred = MixturePredictor::new(&m, &[s], &inputs).unwrap();
        for (xs, us) in [(0.3, 0.1), (-1.2, 0.8)] {
            let mix = pred.predict(&[xs], &[us], false).unwrap();
            let fast = pred.predict_mean(&[xs], &[us]).unwrap()[0];
            assert!((fast - mix.means[0][0]).abs() < 1e-10);
            let peak = mix.log_density(&mix.means[0]);
            let expect = -0.5 * (LN_2PI + mix.variances[0][0].ln());
            assert!((peak - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn mixture_moment_cases() {
        let same = MixturePredictive {
            means: vec![vec![1.5]; 3],
            variances: vec![vec![0.4]; 3],
        };
        let (m, v) = mixture_moments(&same);
        assert!((m[0] - 1.5).abs() < 1e-15 && (v[0] - 0.4).abs() < 1e-15);
        let two = MixturePredictive {
            means: vec![vec![-1.0], vec![1.0]],
            variances: vec![vec![0.0], vec![0.0]],
        };
        assert_eq!(mixture_moments(&two), (vec![0.0], vec![1.0]));
    }

    #[test]
    fn mixture_moments_match_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mix = MixturePredictive {
            means: (0..5).map(|_| vec![rng.random_range(-3.0..3.0)]).collect(),
            variances: (0..5).map(|_| vec![rng.random_range(0.1..2.0)]).collect(),
        };
        let (m, v) = mixture_moments(&mix);
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let l = rng.random_range(0..5);
                mix.means[l][0] + mix.variances[l][0].sqrt() * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let m4 = draws.iter().map(|d| (d - mean).powi(4)).sum::<f64>() / n as f64;
        assert!((mean - m[0]).abs() < 4.0 * (var / n as f64).sqrt());
        assert!((var - v[0]).abs() < 4.0 * ((m4 - var * var) / n as f64).sqrt());
    }

    #[test]
    fn thinning_cases() {
        let (s, _) = sample(1, 3, 0.2);
        let chain: Vec<ChainSample> = (1..=10)
            .map(|i| ChainSample {
                iteration: i,
                ..s.clone()
            })
            .collect();
        assert_eq!(thin_chain(&chain, 10, 0).unwrap(), chain);
        assert_eq!(thin_chain(&chain, 1, 0).unwrap().len(), 1);
        let a = thin_chain(&chain, 4, 5).unwrap();
        assert_eq!(a, thin_chain(&chain, 4, 5).unwrap());
        assert!(a.windows(2).all(|w| w[0].iteration < w[1].iteration));
        assert!(a.iter().all(|x| chain.contains(x)));
        assert!(thin_chain(&chain, 0, 0).is_err() && thin_chain(&chain, 11, 0).is_err());
    }

    #[test]
    fn latent_f_noiseless_limit_and_moments() {
        let m = model();
        let (s, inputs) = sample(3, 5, 1e-12);
        let f = sample_latent_f(&m, &s, &inputs, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for t in 0..5 {
            assert!((f[t][0] - s.trajectory[t + 1][0]).abs() < 1e-5);
        }
        let (s, inputs) = sample(4, 5, 0.5);
        let gp = m.transition(&s.theta);
        let x = &s.trajectory;
        let n = 5;
        let z: Vec<Vec<f64>> = (0..n)
            .map(|t| GpTransition::gp_input(&x[t], &inputs[t]))
            .collect();
        let k = DMatrix::from_fn(n, n, |i, j| {
            gp.cov.k(0, &z[i], &z[j]) + if i == j { gp.cov.jitter(0) } else { 0.0 }
        });
        let kt = &k + DMatrix::identity(n, n) * gp.q[0];
        let r = DVector::from_fn(n, |i, _| x[i + 1][0] - gp.mean.eval_dim(0, &z[i], 1));
        let post_mean = &k * kt.clone().try_inverse().unwrap() * &r;
        let post_cov = &k - &k * kt.try_inverse().unwrap() * &k;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = 10_000;
        let mut acc = vec![0.0; n];
        for _ in 0..draws {
            let f = sample_latent_f(&m, &s, &inputs, &mut rng).unwrap();
            for t in 0..n {
                acc[t] += f[t][0] - gp.mean.eval_dim(0, &z[t], 1);
            }
        }
        for t in 0..n {
            let se = (post_cov[(t, t)] / draws as f64).sqrt();
            assert!((acc[t] / draws as f64 - post_mean[t]).abs() < 4.0 * se);
        }
        let a = sample_latent_f(&m, &s, &inputs, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(
            a,
            sample_latent_f(&m, &s, &inputs, &mut ChaCha8Rng::seed_from_u64(2)).unwrap()
        );
    }

    #[test]
    fn rmse_cases() {
        let truth = vec![vec![1.0], vec![-2.0], vec![0.5]];
        let (s, _) = sample(1, 2, 0.2);
        let exact = ChainSample {
            trajectory: truth.clone(),
            ..s.clone()
        };
        assert_eq!(rmse_smoothing(&[exact.clone()], &truth).unwrap(), 0.0);
        let other = ChainSample {
            trajectory: vec![vec![2.0], vec![-2.0], vec![-0.5]],
            ..s
        };
        // posterior mean (1.5, -2, 0) ⇒ errors (0.5, 0, 0.5)
        let v = rmse_smoothing(&[exact, other.clone()], &truth).unwrap();
        assert!((v - (0.5f64 / 3.0).sqrt()).abs() < 1e-15);
        let single = rmse_smoothing(std::slice::from_ref(&other), &truth).unwrap();
        assert!((single - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rmse_prediction_far_from_data_is_mean_error() {
        // Test states far from the training trajectory: the prediction is the
        // mean function, so targets equal to it give zero error and targets
        // offset by unit-variance noise give RMSE ≈ 1.
        let m = model();
        let (s, inputs) = sample(5, 4, 0.2);
        let pred = MixturePredictor::new(&m, &[s.clone()], &inputs).unwrap();
        let gp = m.transition(&s.theta);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let states: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.random_range(500.0..600.0)])
            .collect();
        let u: Vec<Vec<f64>> = vec![vec![0.0]; n];
        let mean: Vec<Vec<f64>> = states
            .iter()
            .map(|x| vec![gp.mean.eval_dim(0, &[x[0], 0.0], 1)])
            .collect();
        let mut ds = Dataset::new(u, vec![vec![0.0]; n]).unwrap();
        ds.states = Some(states);
        ds.f_values = Some(mean.clone());
        assert!(rmse_prediction(&pred, &ds).unwrap() < 1e-9);
        ds.f_values = Some(
            mean.iter()
                .map(|v| vec![v[0] + rng.sample::<f64, _>(StandardNormal)])
                .collect(),
        );
        let e = rmse_prediction(&pred, &ds).unwrap();
        assert!((e - 1.0).abs() < 0.03, "{e}");
    }

    #[test]
    fn grid_and_csv() {
        let g = GridSpec {
            x: vec![(-1.0, 1.0, 3)],
            u: vec![(0.0, 0.0, 1)],
        };
        let pts = g.points().unwrap();
        assert_eq!(pts.len(), 3);
        assert_eq!(pts[2], (vec![1.0], vec![0.0]));
        let m = model();
        let (s, inputs) = sample(2, 4, 0.2);
        let pred = MixturePredictor::new(&m, &[s], &inputs).unwrap();
        let rows = predict_points(&pred, &pts[..1], false).unwrap();
        let mut buf = Vec::new();
        write_predictions_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x_1,u_1,mean_1,var_1\n"));
        assert_eq!(text.lines().count(), 2);
    }
}
