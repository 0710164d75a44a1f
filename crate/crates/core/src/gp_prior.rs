//! Marginal prior over state trajectories with the transition GP integrated out.
//!
//! A [`TrajectoryFactor`] holds the GP inputs `z_k = (x_k, u_k)` of a trajectory,
//! the targets `x_{k+1}` and, per state dimension, the Cholesky factor of
//! `K̃ = K + Q + jitter` together with `α = L⁻¹(targets − means)`. Row `k` of
//! the factor is the transition `x_k → x_{k+1}`, so the leading rows of `L`
//! factor every prefix of the trajectory at once.

use std::sync::Arc;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{dot, PackedLower};
use crate::model::GpTransition;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Gaussian one-step predictive moments with diagonal covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveMoments {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

impl PredictiveMoments {
    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.mu
            .iter()
            .zip(&self.var)
            .zip(x)
            .map(|((m, v), xi)| {
                let e = xi - m;
                -0.5 * (LN_2PI + v.ln() + e * e / v)
            })
            .sum()
    }
}

#[derive(Debug, Clone)]
struct DimFactor {
    chol: PackedLower,
    mean: Vec<f64>,
    alpha: Vec<f64>,
}

/// Incrementally maintained factorization of the marginal trajectory prior.
#[derive(Debug, Clone)]
pub struct TrajectoryFactor {
    gp: Arc<GpTransition>,
    n_x: usize,
    n_z: usize,
    points: Vec<f64>,
    targets: Vec<f64>,
    dims: Vec<DimFactor>,
}

impl TrajectoryFactor {
    pub fn new(gp: Arc<GpTransition>) -> Self {
        Self::with_capacity(gp, 0)
    }

    pub fn with_capacity(gp: Arc<GpTransition>, n: usize) -> Self {
        let n_x = gp.n_x;
        let n_z = gp.input_dim();
        let dims = (0..n_x)
            .map(|_| DimFactor {
                chol: PackedLower::with_capacity(n),
                mean: Vec::with_capacity(n),
                alpha: Vec::with_capacity(n),
            })
            .collect();
        Self {
            gp,
            n_x,
            n_z,
            points: Vec::with_capacity(n * n_z),
            targets: Vec::with_capacity(n * n_x),
            dims,
        }
    }

    /// Factor over the transitions of `states[0..=T]` driven by `inputs[0..T]`.
    pub fn from_trajectory(
        gp: Arc<GpTransition>,
        states: &[Vec<f64>],
        inputs: &[Vec<f64>],
    ) -> Result<Self> {
        let t = states.len().saturating_sub(1);
        if inputs.len() < t {
            return Err(Error::Dimension {
                context: "trajectory inputs",
                expected: t,
                got: inputs.len(),
            });
        }
        let mut f = Self::with_capacity(gp, t);
        for k in 0..t {
            let z = GpTransition::gp_input(&states[k], &inputs[k]);
            f.extend(&z, &states[k + 1])?;
        }
        Ok(f)
    }

    pub fn from_points(
        gp: Arc<GpTransition>,
        points: &[Vec<f64>],
        targets: &[Vec<f64>],
    ) -> Result<Self> {
        check_dim("factor targets", points.len(), targets.len())?;
        let mut f = Self::with_capacity(gp, points.len());
        for (z, y) in points.iter().zip(targets) {
            f.extend(z, y)?;
        }
        Ok(f)
    }

    pub fn gp(&self) -> &Arc<GpTransition> {
        &self.gp
    }

    pub fn len(&self) -> usize {
        self.dims[0].mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, k: usize) -> &[f64] {
        &self.points[k * self.n_z..(k + 1) * self.n_z]
    }

    pub fn target(&self, k: usize) -> &[f64] {
        &self.targets[k * self.n_x..(k + 1) * self.n_x]
    }

    fn check_point(&self, z: &[f64], target: &[f64]) -> Result<()> {
        check_dim("GP input", self.n_z, z.len())?;
        check_dim("GP target", self.n_x, target.len())
    }

    /// Kernel column of dimension `d` between `z` and all stored points; the
    /// entry at `diag_at` is replaced by the noisy diagonal.
    fn kernel_column(&self, d: usize, z: &[f64], n: usize, diag_at: usize, out: &mut Vec<f64>) {
        out.clear();
        let cov = &self.gp.cov;
        for j in 0..n {
            if j == diag_at {
                out.push(self.gp.noisy_diag(d));
            } else {
                out.push(cov.k(d, self.point(j), z));
            }
        }
    }

    /// Appends the transition `z → target`.
    pub fn extend(&mut self, z: &[f64], target: &[f64]) -> Result<()> {
        self.check_point(z, target)?;
        let n = self.len();
        let mut col = Vec::with_capacity(n + 1);
        let mut work = Vec::with_capacity(n + 1);
        for d in 0..self.n_x {
            self.kernel_column(d, z, n, usize::MAX, &mut col);
            col.push(self.gp.noisy_diag(d));
            let mean = self.gp.mean.eval_dim(d, z, self.n_x);
            let df = &mut self.dims[d];
            df.chol.append(&col, &mut work)?;
            let row = df.chol.row(n);
            let a = (target[d] - mean - dot(&row[..n], &df.alpha)) / row[n];
            df.mean.push(mean);
            df.alpha.push(a);
        }
        self.points.extend_from_slice(z);
        self.targets.extend_from_slice(target);
        Ok(())
    }

    /// Replaces the GP input and target of transition `index`.
    pub fn replace_point(&mut self, index: usize, z: &[f64], target: &[f64]) -> Result<()> {
        self.check_point(z, target)?;
        if index >= self.len() {
            return Err(Error::Dimension {
                context: "replace_point index",
                expected: self.len(),
                got: index,
            });
        }
        self.replace_input_inner(index, z);
        self.targets[index * self.n_x..(index + 1) * self.n_x].copy_from_slice(target);
        self.refresh_alpha(index);
        Ok(())
    }

    /// Replaces only the GP input of transition `index`.
    pub fn replace_input(&mut self, index: usize, z: &[f64]) -> Result<()> {
        check_dim("GP input", self.n_z, z.len())?;
        if index >= self.len() {
            return Err(Error::Dimension {
                context: "replace_input index",
                expected: self.len(),
                got: index,
            });
        }
        self.replace_input_inner(index, z);
        self.refresh_alpha(index);
        Ok(())
    }

    /// Replaces only the target of transition `index`.
    pub fn set_target(&mut self, index: usize, target: &[f64]) -> Result<()> {
        check_dim("GP target", self.n_x, target.len())?;
        self.targets[index * self.n_x..(index + 1) * self.n_x].copy_from_slice(target);
        self.refresh_alpha(index);
        Ok(())
    }

    /// Moves a concatenated trajectory forward by one step: the target of row
    /// `t - 1` becomes `x_t` and, if `z_t` is given, the input of row `t` becomes it.
    pub(crate) fn splice_step(&mut self, t: usize, x_t: &[f64], z_t: Option<&[f64]>) {
        debug_assert!(t >= 1);
        self.targets[(t - 1) * self.n_x..t * self.n_x].copy_from_slice(x_t);
        if let Some(z) = z_t {
            self.replace_input_inner(t, z);
        }
        self.refresh_alpha(t - 1);
    }

    fn replace_input_inner(&mut self, k: usize, z: &[f64]) {
        let n = self.len();
        let mut col = Vec::with_capacity(n);
        let mut work = Vec::with_capacity(n);
        let mut w_up = Vec::with_capacity(n);
        let mut w_down = Vec::with_capacity(n);
        for d in 0..self.n_x {
            self.kernel_column(d, z, n, k, &mut col);
            let mean = self.gp.mean.eval_dim(d, z, self.n_x);
            let ok = Self::replace_row(
                &mut self.dims[d].chol,
                k,
                &col,
                &mut work,
                &mut w_up,
                &mut w_down,
            );
            self.dims[d].mean[k] = mean;
            if let Err(e) = ok {
                log::warn!("rank-one replace failed ({e}); refactorizing dimension {d}");
                self.points[k * self.n_z..(k + 1) * self.n_z].copy_from_slice(z);
                self.rebuild_dim(d);
            }
        }
        self.points[k * self.n_z..(k + 1) * self.n_z].copy_from_slice(z);
    }

    /// Replaces row/column `k` of the factored matrix with `col` (length `n`,
    /// `col[k]` the diagonal) via a row solve and a rank-one update/downdate of
    /// the trailing block.
    fn replace_row(
        l: &mut PackedLower,
        k: usize,
        col: &[f64],
        work: &mut Vec<f64>,
        w_up: &mut Vec<f64>,
        w_down: &mut Vec<f64>,
    ) -> Result<()> {
        let n = l.dim();
        work.clear();
        work.extend_from_slice(&col[..k]);
        l.forward_solve_prefix(work, k);
        let piv = col[k] - dot(work, work);
        if !(piv > 0.0) || !piv.is_finite() {
            return Err(Error::NotPositiveDefinite {
                context: "replace pivot",
                row: k,
                pivot: piv,
            });
        }
        let lkk = piv.sqrt();
        w_up.clear();
        w_down.clear();
        for i in k + 1..n {
            let row = l.row(i);
            w_up.push(row[k]);
            w_down.push((col[i] - dot(&row[..k], work)) / lkk);
        }
        {
            let row = l.row_mut(k);
            row[..k].copy_from_slice(work);
            row[k] = lkk;
        }
        for i in k + 1..n {
            l.set(i, k, w_down[i - k - 1]);
        }
        l.update_downdate(k + 1, w_up, w_down)
    }

    fn rebuild_dim(&mut self, d: usize) {
        let n = self.len();
        let cov = &self.gp.cov;
        let diag = self.gp.noisy_diag(d);
        let pts = &self.points;
        let nz = self.n_z;
        let p = |i: usize| &pts[i * nz..(i + 1) * nz];
        match PackedLower::factorize(n, |i, j| if i == j { diag } else { cov.k(d, p(i), p(j)) }) {
            Ok(l) => self.dims[d].chol = l,
            // K̃ ⪰ Q·I, so this only happens for pathological hyperparameters.
            Err(e) => log::error!("refactorization failed: {e}"),
        }
    }

    fn refresh_alpha(&mut self, from: usize) {
        let n = self.len();
        for d in 0..self.n_x {
            let df = &mut self.dims[d];
            for i in from..n {
                let row = df.chol.row(i);
                let r = self.targets[i * self.n_x + d] - df.mean[i];
                df.alpha[i] = (r - dot(&row[..i], &df.alpha[..i])) / row[i];
            }
        }
    }

    /// Moments of the target of row `row` given all transitions before it.
    pub fn predictive_at_row(&self, row: usize) -> PredictiveMoments {
        let mut mu = Vec::with_capacity(self.n_x);
        let mut var = Vec::with_capacity(self.n_x);
        for df in &self.dims {
            let l = df.chol.row(row);
            mu.push(df.mean[row] + dot(&l[..row], &df.alpha[..row]));
            var.push(l[row] * l[row]);
        }
        PredictiveMoments { mu, var }
    }

    /// Moments of the next state after query input `z` given all stored transitions.
    pub fn one_step_predictive(&self, z: &[f64]) -> Result<PredictiveMoments> {
        check_dim("query input", self.n_z, z.len())?;
        let n = self.len();
        let mut mu = Vec::with_capacity(self.n_x);
        let mut var = Vec::with_capacity(self.n_x);
        let mut col = Vec::with_capacity(n);
        for d in 0..self.n_x {
            let df = &self.dims[d];
            self.kernel_column(d, z, n, usize::MAX, &mut col);
            df.chol.forward_solve_prefix(&mut col, n);
            mu.push(self.gp.mean.eval_dim(d, z, self.n_x) + dot(&col, &df.alpha));
            var.push(self.gp.noisy_diag(d) - dot(&col, &col));
        }
        if var.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::non_finite("one-step predictive variance"));
        }
        Ok(PredictiveMoments { mu, var })
    }

    #[inline]
    fn row_term(df: &DimFactor, i: usize) -> f64 {
        let a = df.alpha[i];
        -0.5 * LN_2PI - df.chol.diag(i).ln() - 0.5 * a * a
    }

    /// `Σ_{k ≥ from}` of the per-transition log-density terms, i.e.
    /// `log p(x_{from+1:n} | x_{0:from})` under the stored inputs.
    pub fn suffix_log_density(&self, from: usize) -> f64 {
        let n = self.len();
        self.dims
            .iter()
            .map(|df| (from..n).map(|i| Self::row_term(df, i)).sum::<f64>())
            .sum()
    }

    /// `K̃⁻¹ (targets − means)` for dimension `d`: the weights of the GP regression mean.
    pub fn regression_weights(&self, d: usize) -> Vec<f64> {
        let df = &self.dims[d];
        let mut w = df.alpha.clone();
        df.chol.backward_solve(&mut w);
        w
    }

    /// `log p(x_{1:t} | x_0, θ)`.
    pub fn log_joint_prior(&self) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::config(
                "factor",
                "log_joint_prior needs at least one transition",
            ));
        }
        let v = self.suffix_log_density(0);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::non_finite("log_joint_prior"))
        }
    }

    /// Dense `K̃` over the stored points for dimension `d`.
    pub fn noisy_gram(&self, d: usize) -> nalgebra::DMatrix<f64> {
        let n = self.len();
        nalgebra::DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                self.gp.noisy_diag(d)
            } else {
                self.gp.cov.k(d, self.point(i), self.point(j))
            }
        })
    }

    pub fn cholesky(&self, d: usize) -> nalgebra::DMatrix<f64> {
        self.dims[d].chol.to_dense()
    }

    /// `‖L Lᵀ − K̃‖_F / ‖K̃‖_F`, maximised over dimensions.
    pub fn reconstruction_error(&self) -> f64 {
        (0..self.n_x)
            .map(|d| {
                let l = self.cholesky(d);
                let k = self.noisy_gram(d);
                (&l * l.transpose() - &k).norm() / k.norm()
            })
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{MeanFunction, SeArd};
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn gp1(q: f64, mean: MeanFunction) -> Arc<GpTransition> {
        Arc::new(GpTransition {
            mean,
            cov: SeArd::new(vec![2.0], vec![vec![1.3, 0.8]]).unwrap(),
            q: vec![q],
            n_x: 1,
        })
    }

    fn gp2() -> Arc<GpTransition> {
        Arc::new(GpTransition {
            mean: MeanFunction::Identity,
            cov: SeArd::new(
                vec![1.5, 0.7],
                vec![vec![1.0, 2.0, 0.9], vec![0.5, 1.5, 3.0]],
            )
            .unwrap(),
            q: vec![0.2, 0.05],
            n_x: 2,
        })
    }

    fn random_points(n: usize, nx: usize, nu: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| (0..nx + nu).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let tg = (0..n)
            .map(|_| (0..nx).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        (pts, tg)
    }

    /// Dense conditioning of the target at `z` on `(pts, tg)` for dimension `d`.
    fn dense_predictive(
        gp: &GpTransition,
        d: usize,
        pts: &[Vec<f64>],
        tg: &[Vec<f64>],
        z: &[f64],
    ) -> (f64, f64) {
        let n = pts.len();
        let m = |p: &[f64]| gp.mean.eval_dim(d, p, gp.n_x);
        if n == 0 {
            return (m(z), gp.noisy_diag(d));
        }
        let kt = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                gp.noisy_diag(d)
            } else {
                gp.cov.k(d, &pts[i], &pts[j])
            }
        });
        let inv = kt.try_inverse().unwrap();
        let ks = DVector::from_fn(n, |i, _| gp.cov.k(d, &pts[i], z));
        let r = DVector::from_fn(n, |i, _| tg[i][d] - m(&pts[i]));
        let mu = m(z) + (ks.transpose() * &inv * r)[0];
        let var = gp.noisy_diag(d) - (ks.transpose() * &inv * &ks)[0];
        (mu, var)
    }

    fn dense_log_prior(gp: &GpTransition, pts: &[Vec<f64>], tg: &[Vec<f64>]) -> f64 {
        let n = pts.len();
        (0..gp.n_x)
            .map(|d| {
                let kt = DMatrix::from_fn(n, n, |i, j| {
                    if i == j {
                        gp.noisy_diag(d)
                    } else {
                        gp.cov.k(d, &pts[i], &pts[j])
                    }
                });
                let r = DVector::from_fn(n, |i, _| tg[i][d] - gp.mean.eval_dim(d, &pts[i], gp.n_x));
                let quad = (r.transpose() * kt.clone().try_inverse().unwrap() * &r)[0];
                -0.5 * (n as f64 * LN_2PI + kt.determinant().ln() + quad)
            })
            .sum()
    }

    #[test]
    fn empty_factor_base_case() {
        let gp = gp1(
            0.5,
            MeanFunction::Benchmark {
                a: 0.3,
                b: 7.5,
                c: 0.1,
            },
        );
        let f = TrajectoryFactor::new(gp.clone());
        let z = [0.7, -0.2];
        let p = f.one_step_predictive(&z).unwrap();
        approx::assert_relative_eq!(p.mu[0], gp.mean.eval_dim(0, &z, 1));
        approx::assert_relative_eq!(p.var[0], 2.0 + 0.5, max_relative = 1e-7);
    }

    #[test]
    fn extend_empty_gives_scalar_factor() {
        let gp = gp1(0.5, MeanFunction::Zero);
        let mut f = TrajectoryFactor::new(gp.clone());
        f.extend(&[0.1, 0.2], &[1.0]).unwrap();
        approx::assert_relative_eq!(
            f.cholesky(0)[(0, 0)],
            gp.noisy_diag(0).sqrt(),
            max_relative = 1e-15
        );
    }

    #[test]
    fn noiseless_interpolation() {
        let gp = Arc::new(GpTransition {
            mean: MeanFunction::Zero,
            cov: SeArd::new(vec![1.0], vec![vec![1.0]]).unwrap(),
            q: vec![1e-10],
            n_x: 1,
        });
        let pts = vec![vec![-1.0], vec![0.0], vec![1.5]];
        let tg = vec![vec![0.3], vec![-0.4], vec![0.9]];
        let f = TrajectoryFactor::from_points(gp, &pts, &tg).unwrap();
        let p = f.one_step_predictive(&[0.0]).unwrap();
        approx::assert_abs_diff_eq!(p.mu[0], -0.4, epsilon = 1e-6);
        assert!(p.var[0] < 1e-7, "{}", p.var[0]);
    }

    #[test]
    fn predictive_matches_dense_oracle() {
        for (gp, nu) in [
            (
                gp1(
                    0.3,
                    MeanFunction::Benchmark {
                        a: 0.5,
                        b: 2.0,
                        c: 1.0,
                    },
                ),
                1,
            ),
            (gp2(), 1),
        ] {
            let (pts, tg) = random_points(6, gp.n_x, nu, 4);
            let f = TrajectoryFactor::from_points(gp.clone(), &pts, &tg).unwrap();
            let z: Vec<f64> = vec![0.25; gp.n_x + nu];
            let p = f.one_step_predictive(&z).unwrap();
            for d in 0..gp.n_x {
                let (mu, var) = dense_predictive(&gp, d, &pts, &tg, &z);
                approx::assert_abs_diff_eq!(p.mu[d], mu, epsilon = 1e-8);
                approx::assert_abs_diff_eq!(p.var[d], var, epsilon = 1e-8);
            }
            // Row-based predictive of the last row equals conditioning on the rest.
            let row = f.predictive_at_row(5);
            for d in 0..gp.n_x {
                let (mu, var) = dense_predictive(&gp, d, &pts[..5], &tg[..5], &pts[5]);
                approx::assert_abs_diff_eq!(row.mu[d], mu, epsilon = 1e-8);
                approx::assert_abs_diff_eq!(row.var[d], var, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn single_transition_log_prior() {
        let gp = gp1(0.4, MeanFunction::Identity);
        let mut f = TrajectoryFactor::new(gp.clone());
        f.extend(&[1.0, 0.5], &[1.7]).unwrap();
        let v = gp.noisy_diag(0);
        let expected = -0.5 * (LN_2PI + v.ln() + (1.7 - 1.0f64).powi(2) / v);
        approx::assert_abs_diff_eq!(f.log_joint_prior().unwrap(), expected, epsilon = 1e-12);
        assert!(TrajectoryFactor::new(gp).log_joint_prior().is_err());
    }

    #[test]
    fn chain_rule_and_dense_log_prior() {
        let gp = gp2();
        let (pts, tg) = random_points(8, 2, 1, 9);
        let mut f = TrajectoryFactor::new(gp.clone());
        let mut prev = 0.0;
        for k in 0..8 {
            let p = f.one_step_predictive(&pts[k]).unwrap();
            f.extend(&pts[k], &tg[k]).unwrap();
            let cur = f.log_joint_prior().unwrap();
            approx::assert_abs_diff_eq!(cur - prev, p.log_density(&tg[k]), epsilon = 1e-8);
            prev = cur;
        }
        approx::assert_abs_diff_eq!(prev, dense_log_prior(&gp, &pts, &tg), epsilon = 1e-8);
    }

    #[test]
    fn fifty_extends_match_batch_factor() {
        let gp = gp1(0.1, MeanFunction::Zero);
        let (pts, tg) = random_points(50, 1, 1, 12);
        let f = TrajectoryFactor::from_points(gp, &pts, &tg).unwrap();
        let batch = f.noisy_gram(0).cholesky().unwrap().l();
        let dev = (f.cholesky(0) - batch).amax();
        assert!(dev < 1e-8, "{dev}");
    }

    #[test]
    fn replace_with_itself_is_identity() {
        let gp = gp2();
        let (pts, tg) = random_points(10, 2, 1, 5);
        let mut f = TrajectoryFactor::from_points(gp, &pts, &tg).unwrap();
        let before: Vec<_> = (0..2).map(|d| f.cholesky(d)).collect();
        f.replace_point(4, &pts[4], &tg[4]).unwrap();
        for d in 0..2 {
            assert!((f.cholesky(d) - &before[d]).amax() < 1e-12);
        }
    }

    #[test]
    fn replace_middle_matches_rebuild() {
        let gp = gp2();
        let (mut pts, mut tg) = random_points(10, 2, 1, 6);
        let mut f = TrajectoryFactor::from_points(gp.clone(), &pts, &tg).unwrap();
        pts[5] = vec![0.9, -1.4, 0.3];
        tg[5] = vec![-0.2, 0.6];
        f.replace_point(5, &pts[5], &tg[5]).unwrap();
        let g = TrajectoryFactor::from_points(gp.clone(), &pts, &tg).unwrap();
        for d in 0..2 {
            assert!((f.cholesky(d) - g.cholesky(d)).amax() < 1e-8);
        }
        approx::assert_abs_diff_eq!(
            f.log_joint_prior().unwrap(),
            dense_log_prior(&gp, &pts, &tg),
            epsilon = 1e-8
        );
        assert!(f.replace_point(10, &pts[0], &tg[0]).is_err());
    }

    #[test]
    fn variance_never_increases_with_more_conditioning() {
        let gp = gp2();
        let (pts, tg) = random_points(15, 2, 1, 21);
        let z = [0.1, 0.2, -0.3];
        let mut f = TrajectoryFactor::new(gp);
        let mut last = f.one_step_predictive(&z).unwrap().var;
        for k in 0..15 {
            f.extend(&pts[k], &tg[k]).unwrap();
            let v = f.one_step_predictive(&z).unwrap().var;
            for d in 0..2 {
                assert!(v[d] <= last[d] + 1e-12);
            }
            last = v;
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn mutation_sequences_keep_factor_exact(seed in 0u64..10_000, ops in prop::collection::vec((0usize..3, 0usize..100), 1..25)) {
            let gp = gp2();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-2.5..2.5)).collect() };
            let mut f = TrajectoryFactor::new(gp.clone());
            let mut pts = Vec::new();
            let mut tg = Vec::new();
            for (op, idx) in ops {
                if op == 0 || pts.is_empty() {
                    let (z, y) = (draw(3), draw(2));
                    f.extend(&z, &y).unwrap();
                    pts.push(z);
                    tg.push(y);
                } else {
                    let k = idx % pts.len();
                    let (z, y) = (draw(3), draw(2));
                    f.replace_point(k, &z, &y).unwrap();
                    pts[k] = z;
                    tg[k] = y;
                }
                prop_assert!(f.reconstruction_error() < 1e-8);
            }
            let direct = TrajectoryFactor::from_points(gp, &pts, &tg).unwrap();
            let a = f.log_joint_prior().unwrap();
            let b = direct.log_joint_prior().unwrap();
            prop_assert!((a - b).abs() < 1e-8 * (1.0 + b.abs()));
        }
    }
}
