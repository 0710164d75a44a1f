//! Fully independent conditional (FIC) sparse prior over trajectories.
//!
//! With inducing inputs `U` the FIC covariance is `Φ Φᵀ + Λ`, where the rows of
//! `Φ` are the whitened features `v(z) = L_UU⁻¹ k_U(z)` and
//! `Λ = diag(k(z,z) − |v(z)|² + Q + jitter)`. A [`FicState`] accumulates, per state
//! dimension, `B = I + Σ v vᵀ/Λ`, `c = Σ v r/Λ` and the scalar sums needed for
//! the log-density, so each new transition costs `O(M²)` regardless of `t`.

use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gp_prior::PredictiveMoments;
use crate::linalg::{dot, DenseChol};
use crate::model::GpTransition;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const MAX_KUU_JITTER: f64 = 1e-4;

/// Inducing inputs and the per-dimension factor of `K_UU + jitter`.
#[derive(Debug, Clone)]
pub struct InducingSet {
    gp: Arc<GpTransition>,
    inputs: Vec<Vec<f64>>,
    pub(crate) kuu: Vec<DenseChol>,
}

impl InducingSet {
    pub fn new(gp: Arc<GpTransition>, inputs: Vec<Vec<f64>>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::config(
                "inducing",
                "need at least one inducing input",
            ));
        }
        for u in &inputs {
            check_dim("inducing input", gp.input_dim(), u.len())?;
            if u.iter().any(|v| !v.is_finite()) {
                return Err(Error::non_finite("inducing input"));
            }
        }
        let m = inputs.len();
        let mut kuu = Vec::with_capacity(gp.n_x);
        for d in 0..gp.n_x {
            let base = gp.cov.jitter(d);
            let sf2 = gp.cov.signal_variance[d];
            let mut jitter = base;
            let chol = loop {
                let mut a = vec![0.0; m * m];
                for i in 0..m {
                    for j in 0..=i {
                        let k = gp.cov.k(d, &inputs[i], &inputs[j]);
                        a[i * m + j] = k;
                        a[j * m + i] = k;
                    }
                    a[i * m + i] += jitter;
                }
                match DenseChol::factorize(m, &a) {
                    Ok(c) => break c,
                    Err(e) if jitter < MAX_KUU_JITTER * sf2 => {
                        log::debug!("K_UU factorization failed ({e}); raising jitter");
                        jitter *= 10.0;
                    }
                    Err(e) => return Err(e),
                }
            };
            kuu.push(chol);
        }
        Ok(Self { gp, inputs, kuu })
    }

    pub fn gp(&self) -> &Arc<GpTransition> {
        &self.gp
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Writes `v = L_UU⁻¹ k_U(z)` into `v` and returns `k(z,z) − |v|²`.
    pub fn features(&self, d: usize, z: &[f64], v: &mut [f64]) -> f64 {
        for (vi, u) in v.iter_mut().zip(&self.inputs) {
            *vi = self.gp.cov.k(d, u, z);
        }
        self.kuu[d].forward(v);
        (self.gp.cov.signal_variance[d] - dot(v, v)).max(0.0)
    }

    /// `Q_ff(z_i, z_j) = k(z_i, U) K_UU⁻¹ k(U, z_j)` for dimension `d`.
    pub fn q_ff(&self, d: usize, zi: &[f64], zj: &[f64]) -> f64 {
        let m = self.len();
        let mut vi = vec![0.0; m];
        let mut vj = vec![0.0; m];
        self.features(d, zi, &mut vi);
        self.features(d, zj, &mut vj);
        dot(&vi, &vj)
    }

    /// FIC kernel block between two inputs; the diagonal correction applies
    /// when the inputs coincide.
    pub fn fic_cov(&self, zi: &[f64], zj: &[f64]) -> Result<Vec<f64>> {
        check_dim("fic_cov first input", self.gp.input_dim(), zi.len())?;
        check_dim("fic_cov second input", self.gp.input_dim(), zj.len())?;
        Ok((0..self.gp.n_x)
            .map(|d| {
                if zi == zj {
                    self.gp.cov.k(d, zi, zj)
                } else {
                    self.q_ff(d, zi, zj)
                }
            })
            .collect())
    }

    /// Whitened features, `Λ` (with process noise and jitter) and residual of one transition.
    pub(crate) fn point_stats(
        &self,
        d: usize,
        z: &[f64],
        target: f64,
        v: &mut [f64],
    ) -> (f64, f64) {
        let base = self.features(d, z, v);
        let lambda = base + self.gp.q[d] + self.gp.cov.jitter(d);
        let r = target - self.gp.mean.eval_dim(d, z, self.gp.n_x);
        (lambda, r)
    }
}

/// Running sums of one state dimension.
#[derive(Debug, Clone)]
pub(crate) struct FicDim {
    /// `B = I + Σ v vᵀ/Λ`, row-major.
    pub b: Vec<f64>,
    pub chol: DenseChol,
    pub c: Vec<f64>,
    /// `L_B⁻¹ c`.
    pub c_white: Vec<f64>,
    pub sum_log_lambda: f64,
    pub sum_r2: f64,
}

/// Accumulated FIC quantities for a trajectory prefix.
#[derive(Debug, Clone)]
pub struct FicState {
    set: Arc<InducingSet>,
    pub(crate) dims: Vec<FicDim>,
    n: usize,
    log_density: f64,
}

impl FicState {
    pub fn new(set: Arc<InducingSet>) -> Self {
        let m = set.len();
        let mut eye = vec![0.0; m * m];
        for i in 0..m {
            eye[i * m + i] = 1.0;
        }
        let dims = (0..set.gp.n_x)
            .map(|_| FicDim {
                b: eye.clone(),
                chol: DenseChol::identity(m),
                c: vec![0.0; m],
                c_white: vec![0.0; m],
                sum_log_lambda: 0.0,
                sum_r2: 0.0,
            })
            .collect();
        Self {
            set,
            dims,
            n: 0,
            log_density: 0.0,
        }
    }

    /// Accumulates a whole trajectory.
    pub fn from_trajectory(
        set: Arc<InducingSet>,
        states: &[Vec<f64>],
        inputs: &[Vec<f64>],
    ) -> Result<Self> {
        let mut s = Self::new(set);
        for k in 0..states.len().saturating_sub(1) {
            s.extend(
                &GpTransition::gp_input(&states[k], &inputs[k]),
                &states[k + 1],
            )?;
        }
        Ok(s)
    }

    pub fn inducing(&self) -> &Arc<InducingSet> {
        &self.set
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    fn predictive_inner(&self, z: &[f64], with_noise: bool) -> PredictiveMoments {
        let m = self.set.len();
        let n_x = self.set.gp.n_x;
        let mut v = vec![0.0; m];
        let mut mu = Vec::with_capacity(n_x);
        let mut var = Vec::with_capacity(n_x);
        for (d, fd) in self.dims.iter().enumerate() {
            let mut lam = self.set.features(d, z, &mut v);
            if with_noise {
                lam += self.set.gp.q[d] + self.set.gp.cov.jitter(d);
            }
            fd.chol.forward(&mut v);
            mu.push(self.set.gp.mean.eval_dim(d, z, n_x) + dot(&v, &fd.c_white));
            var.push(lam + dot(&v, &v));
        }
        PredictiveMoments { mu, var }
    }

    /// One-step predictive of the next state after input `z`.
    pub fn predictive(&self, z: &[f64]) -> Result<PredictiveMoments> {
        check_dim("query input", self.set.gp.input_dim(), z.len())?;
        Ok(self.predictive_inner(z, true))
    }

    /// Predictive of the noise-free function value at `z`.
    pub fn predictive_f(&self, z: &[f64]) -> Result<PredictiveMoments> {
        check_dim("query input", self.set.gp.input_dim(), z.len())?;
        Ok(self.predictive_inner(z, false))
    }

    /// Adds the transition `z → target`.
    pub fn extend(&mut self, z: &[f64], target: &[f64]) -> Result<()> {
        check_dim("GP target", self.set.gp.n_x, target.len())?;
        let p = self.predictive(z)?;
        let inc = p.log_density(target);
        if !inc.is_finite() {
            return Err(Error::non_finite("FIC log-density increment"));
        }
        let m = self.set.len();
        let mut v = vec![0.0; m];
        for d in 0..self.dims.len() {
            let (lam, r) = self.set.point_stats(d, z, target[d], &mut v);
            let fd = &mut self.dims[d];
            for i in 0..m {
                let vi = v[i] / lam;
                fd.c[i] += vi * r;
                for j in 0..m {
                    fd.b[i * m + j] += vi * v[j];
                }
            }
            let s = lam.sqrt();
            let mut w: Vec<f64> = v.iter().map(|x| x / s).collect();
            fd.chol.rank_one_update(&mut w);
            fd.c_white.copy_from_slice(&fd.c);
            fd.chol.forward(&mut fd.c_white);
            fd.sum_log_lambda += lam.ln();
            fd.sum_r2 += r * r / lam;
        }
        self.n += 1;
        self.log_density += inc;
        Ok(())
    }

    /// `log p(x_{1:t} | x_0, θ)` under the FIC prior, accumulated by the chain rule.
    pub fn log_joint_prior(&self) -> Result<f64> {
        if self.n == 0 {
            return Err(Error::config(
                "fic state",
                "log_joint_prior needs at least one transition",
            ));
        }
        Ok(self.log_density)
    }

    /// The same log-density evaluated in one shot from the accumulated sums.
    pub fn closed_form_log_density(&self) -> f64 {
        self.dims
            .iter()
            .map(|fd| {
                -0.5 * (self.n as f64 * LN_2PI + fd.sum_log_lambda + fd.chol.log_det() + fd.sum_r2
                    - dot(&fd.c_white, &fd.c_white))
            })
            .sum()
    }
}

/// Predictive of the next state after `query` given the transitions in `state`.
pub fn fic_one_step_predictive(state: &FicState, query: &[f64]) -> Result<PredictiveMoments> {
    state.predictive(query)
}

pub fn fic_log_joint_prior(state: &FicState) -> Result<f64> {
    state.log_joint_prior()
}

/// Strategy for placing inducing inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InducingStrategy {
    /// Regular grid over `bounds` (per GP input coordinate) or, if absent, the
    /// bounding box of the candidates.
    Grid {
        #[serde(default)]
        bounds: Option<Vec<(f64, f64)>>,
    },
    /// Random subset of the candidates, order preserved.
    Subsample,
    /// k-means centres of the candidates.
    Kmeans,
}

/// Splits `m` into `dims` integer factors, as balanced as possible, larger first.
pub fn grid_counts(m: usize, dims: usize) -> Vec<usize> {
    fn rec(m: usize, dims: usize, max: usize) -> Option<Vec<usize>> {
        if dims == 1 {
            return (m <= max).then(|| vec![m]);
        }
        let mut best: Option<Vec<usize>> = None;
        for f in (1..=m.min(max)).rev() {
            if m % f != 0 {
                continue;
            }
            if let Some(mut rest) = rec(m / f, dims - 1, f) {
                rest.insert(0, f);
                let better = match &best {
                    None => true,
                    Some(b) => rest.iter().min() > b.iter().min(),
                };
                if better {
                    best = Some(rest);
                }
            }
        }
        best
    }
    if dims == 0 {
        return Vec::new();
    }
    rec(m, dims, m).unwrap_or_else(|| {
        let mut v = vec![1; dims];
        v[0] = m;
        v
    })
}

/// Chooses `m` inducing inputs from `candidates`; deterministic given `seed`.
pub fn select_inducing(
    candidates: &[Vec<f64>],
    m: usize,
    strategy: &InducingStrategy,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if m == 0 {
        return Err(Error::config("m", "need at least one inducing input"));
    }
    let dim = candidates
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::config("inducing", "no candidate inputs"))?;
    match strategy {
        InducingStrategy::Grid { bounds } => {
            let bounds = match bounds {
                Some(b) => {
                    check_dim("grid bounds", dim, b.len())?;
                    b.clone()
                }
                None => (0..dim)
                    .map(|k| {
                        let lo = candidates
                            .iter()
                            .map(|c| c[k])
                            .fold(f64::INFINITY, f64::min);
                        let hi = candidates
                            .iter()
                            .map(|c| c[k])
                            .fold(f64::NEG_INFINITY, f64::max);
                        if hi - lo > 1e-12 {
                            (lo, hi)
                        } else {
                            (lo - 1.0, hi + 1.0)
                        }
                    })
                    .collect(),
            };
            let counts = grid_counts(m, dim);
            let axes: Vec<Vec<f64>> = counts
                .iter()
                .zip(&bounds)
                .map(|(&n, &(lo, hi))| {
                    if n == 1 {
                        vec![0.5 * (lo + hi)]
                    } else {
                        (0..n)
                            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
                            .collect()
                    }
                })
                .collect();
            let mut out = Vec::with_capacity(m);
            let mut idx = vec![0usize; dim];
            loop {
                out.push(idx.iter().zip(&axes).map(|(&i, a)| a[i]).collect());
                let mut k = dim;
                loop {
                    if k == 0 {
                        return Ok(out);
                    }
                    k -= 1;
                    idx[k] += 1;
                    if idx[k] < axes[k].len() {
                        break;
                    }
                    idx[k] = 0;
                }
            }
        }
        InducingStrategy::Subsample => {
            if m > candidates.len() {
                return Err(Error::config("m", "more inducing inputs than candidates"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample_indices(&mut rng, candidates.len(), m).into_vec();
            idx.sort_unstable();
            Ok(idx.into_iter().map(|i| candidates[i].clone()).collect())
        }
        InducingStrategy::Kmeans => kmeans(candidates, m, seed),
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans(points: &[Vec<f64>], m: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let first = &points[0];
    if points.iter().all(|p| p == first) {
        return Err(Error::config(
            "inducing",
            "k-means needs non-identical candidates",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // k-means++ seeding
    let mut centres = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centres[0])).collect();
    while centres.len() < m {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            points[pick].clone()
        } else {
            points[rng.random_range(0..points.len())].clone()
        };
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &next));
        }
        centres.push(next);
    }
    let dim = first.len();
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (a, p) in assign.iter_mut().zip(points) {
            let best = (0..m)
                .min_by(|&i, &j| sq_dist(p, &centres[i]).total_cmp(&sq_dist(p, &centres[j])))
                .unwrap_or(0);
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; m];
        let mut counts = vec![0usize; m];
        for (&a, p) in assign.iter().zip(points) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for k in 0..m {
            if counts[k] > 0 {
                centres[k] = sums[k].iter().map(|s| s / counts[k] as f64).collect();
            }
        }
    }
    Ok(centres)
}
