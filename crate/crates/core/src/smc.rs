//! Sequential Monte Carlo over the marginalized (non-Markovian) trajectory
//! prior: a bootstrap particle filter and the conditional particle filter with
//! ancestor sampling (CPF-AS).
//!
//! The transition prior is abstracted by [`SweepPrior`]; the dense GP, the FIC
//! sparse GP and a fixed parametric Markov transition implement it.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fic::{FicState, InducingSet};
use crate::gp_prior::{PredictiveMoments, TrajectoryFactor};
use crate::linalg::{dot, DenseChol};
use crate::model::{Dataset, GpTransition, MeanFunction, MeasurementModel};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Observations and likelihood shared by every particle of a sweep.
#[derive(Debug, Clone, Copy)]
pub struct SweepInput<'a> {
    pub data: &'a Dataset,
    pub measurement: &'a MeasurementModel,
    /// Measurement-noise variance.
    pub r: f64,
    /// Variance of the zero-mean Gaussian prior on `x_0`.
    pub initial_variance: f64,
}

/// Trajectory prior as seen by one sweep with fixed hyperparameters.
///
/// A particle that has been advanced to time `t - 1` holds the prefix
/// `x_{0:t-1}`.
pub trait SweepPrior: Sync {
    type Particle: Clone + Send + Sync;

    fn init(&self, x0: &[f64]) -> Result<Self::Particle>;

    /// Moments of `x_t` given the particle's prefix `x_{0:t-1}`.
    fn predictive(&self, p: &Self::Particle, t: usize) -> Result<PredictiveMoments>;

    /// Appends `x_t`. `is_reference` marks the conditioned particle, whose
    /// state equals the reference at `t`.
    fn advance(
        &self,
        p: &mut Self::Particle,
        t: usize,
        x_t: &[f64],
        is_reference: bool,
    ) -> Result<()>;

    /// `log p(x̃_{t:T} | x_{0:t-1})` for the particle's prefix and the reference suffix.
    fn ancestor_log_weight(&self, p: &Self::Particle, t: usize) -> f64;
}

/// Dense GP prior. With a reference trajectory every particle carries the
/// factor of the concatenated trajectory `{x_{0:t-1}, x̃_{t:T}}`.
pub struct DensePrior {
    gp: Arc<GpTransition>,
    inputs: Vec<Vec<f64>>,
    reference: Option<TrajectoryFactor>,
    horizon: usize,
}

#[derive(Debug, Clone)]
pub struct DenseParticle {
    pub factor: TrajectoryFactor,
    last: Vec<f64>,
}

impl DensePrior {
    pub fn new(
        gp: Arc<GpTransition>,
        data: &Dataset,
        reference: Option<&[Vec<f64>]>,
    ) -> Result<Self> {
        let reference = reference
            .map(|x| TrajectoryFactor::from_trajectory(gp.clone(), x, &data.inputs))
            .transpose()?;
        Ok(Self {
            gp,
            inputs: data.inputs.clone(),
            reference,
            horizon: data.horizon(),
        })
    }
}

impl SweepPrior for DensePrior {
    type Particle = DenseParticle;

    fn init(&self, x0: &[f64]) -> Result<DenseParticle> {
        let factor = match &self.reference {
            Some(rf) => {
                let mut f = rf.clone();
                let z = GpTransition::gp_input(x0, &self.inputs[0]);
                if f.point(0) != z.as_slice() {
                    f.replace_input(0, &z)?;
                }
                f
            }
            None => TrajectoryFactor::with_capacity(self.gp.clone(), self.horizon),
        };
        Ok(DenseParticle {
            factor,
            last: x0.to_vec(),
        })
    }

    fn predictive(&self, p: &DenseParticle, t: usize) -> Result<PredictiveMoments> {
        if self.reference.is_some() {
            Ok(p.factor.predictive_at_row(t - 1))
        } else {
            p.factor
                .one_step_predictive(&GpTransition::gp_input(&p.last, &self.inputs[t - 1]))
        }
    }

    fn advance(
        &self,
        p: &mut DenseParticle,
        t: usize,
        x_t: &[f64],
        is_reference: bool,
    ) -> Result<()> {
        if self.reference.is_some() {
            if !is_reference {
                let z = (t < self.horizon).then(|| GpTransition::gp_input(x_t, &self.inputs[t]));
                p.factor.splice_step(t, x_t, z.as_deref());
            }
        } else {
            let z = GpTransition::gp_input(&p.last, &self.inputs[t - 1]);
            p.factor.extend(&z, x_t)?;
        }
        p.last.clear();
        p.last.extend_from_slice(x_t);
        Ok(())
    }

    fn ancestor_log_weight(&self, p: &DenseParticle, t: usize) -> f64 {
        p.factor.suffix_log_density(t - 1)
    }
}

/// Sums over the reference transitions `k ≥ s` for one state dimension.
#[derive(Debug, Clone)]
struct FicSuffix {
    b: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    sum_log_lambda: Vec<f64>,
    sum_r2: Vec<f64>,
}

/// FIC sparse prior. Particles hold prefix accumulators only; the reference
/// suffix enters ancestor weights through precomputed reverse sums.
pub struct FicPrior {
    set: Arc<InducingSet>,
    inputs: Vec<Vec<f64>>,
    reference: Option<(Vec<Vec<f64>>, Vec<FicSuffix>)>,
    horizon: usize,
}

#[derive(Debug, Clone)]
pub struct FicParticle {
    pub state: FicState,
    last: Vec<f64>,
}

impl FicPrior {
    pub fn new(
        set: Arc<InducingSet>,
        data: &Dataset,
        reference: Option<&[Vec<f64>]>,
    ) -> Result<Self> {
        let horizon = data.horizon();
        let m = set.len();
        let n_x = set.gp().n_x;
        let reference = reference.map(|x| {
            let mut out = Vec::with_capacity(n_x);
            let mut v = vec![0.0; m];
            for d in 0..n_x {
                let mut sfx = FicSuffix {
                    b: vec![vec![0.0; m * m]; horizon + 1],
                    c: vec![vec![0.0; m]; horizon + 1],
                    sum_log_lambda: vec![0.0; horizon + 1],
                    sum_r2: vec![0.0; horizon + 1],
                };
                for k in (0..horizon).rev() {
                    let z = GpTransition::gp_input(&x[k], &data.inputs[k]);
                    let (lam, r) = set.point_stats(d, &z, x[k + 1][d], &mut v);
                    let (head, tail) = sfx.b.split_at_mut(k + 1);
                    let bk = &mut head[k];
                    bk.copy_from_slice(&tail[0]);
                    for i in 0..m {
                        let vi = v[i] / lam;
                        for j in 0..m {
                            bk[i * m + j] += vi * v[j];
                        }
                    }
                    let next_c = sfx.c[k + 1].clone();
                    for i in 0..m {
                        sfx.c[k][i] = next_c[i] + v[i] * r / lam;
                    }
                    sfx.sum_log_lambda[k] = sfx.sum_log_lambda[k + 1] + lam.ln();
                    sfx.sum_r2[k] = sfx.sum_r2[k + 1] + r * r / lam;
                }
                out.push(sfx);
            }
            (x.to_vec(), out)
        });
        Ok(Self {
            set,
            inputs: data.inputs.clone(),
            reference,
            horizon,
        })
    }
}

impl SweepPrior for FicPrior {
    type Particle = FicParticle;

    fn init(&self, x0: &[f64]) -> Result<FicParticle> {
        Ok(FicParticle {
            state: FicState::new(self.set.clone()),
            last: x0.to_vec(),
        })
    }

    fn predictive(&self, p: &FicParticle, t: usize) -> Result<PredictiveMoments> {
        p.state
            .predictive(&GpTransition::gp_input(&p.last, &self.inputs[t - 1]))
    }

    fn advance(
        &self,
        p: &mut FicParticle,
        t: usize,
        x_t: &[f64],
        _is_reference: bool,
    ) -> Result<()> {
        let z = GpTransition::gp_input(&p.last, &self.inputs[t - 1]);
        p.state.extend(&z, x_t)?;
        p.last.clear();
        p.last.extend_from_slice(x_t);
        Ok(())
    }

    fn ancestor_log_weight(&self, p: &FicParticle, t: usize) -> f64 {
        let Some((xref, suffix)) = &self.reference else {
            return 0.0;
        };
        let m = self.set.len();
        let z = GpTransition::gp_input(&p.last, &self.inputs[t - 1]);
        let n_total = self.horizon as f64;
        let mut v = vec![0.0; m];
        let mut total = 0.0;
        for (d, (fd, sfx)) in p.state.dims.iter().zip(suffix).enumerate() {
            // Bridge transition: particle input at t-1, reference target at t.
            let (lam, r) = self.set.point_stats(d, &z, xref[t][d], &mut v);
            let mut b = fd.b.clone();
            let mut c = fd.c.clone();
            let (sb, sc) = (&sfx.b[t], &sfx.c[t]);
            for i in 0..m {
                let vi = v[i] / lam;
                c[i] += sc[i] + vi * r;
                for j in 0..m {
                    b[i * m + j] += sb[i * m + j] + vi * v[j];
                }
            }
            let chol = match DenseChol::factorize(m, &b) {
                Ok(ch) => ch,
                Err(e) => {
                    log::warn!("FIC ancestor weight factorization failed: {e}");
                    return f64::NEG_INFINITY;
                }
            };
            chol.forward(&mut c);
            let concat = -0.5
                * (n_total * LN_2PI
                    + fd.sum_log_lambda
                    + lam.ln()
                    + sfx.sum_log_lambda[t]
                    + chol.log_det()
                    + fd.sum_r2
                    + r * r / lam
                    + sfx.sum_r2[t]
                    - dot(&c, &c));
            let prefix = -0.5
                * ((t - 1) as f64 * LN_2PI + fd.sum_log_lambda + fd.chol.log_det() + fd.sum_r2
                    - dot(&fd.c_white, &fd.c_white));
            total += concat - prefix;
        }
        total
    }
}

/// Known parametric Markov transition `x_{t+1} ~ N(f(x_t, u_t), Q)`.
pub struct ParametricPrior {
    transition: MeanFunction,
    q: Vec<f64>,
    inputs: Vec<Vec<f64>>,
    reference: Option<Vec<Vec<f64>>>,
}

impl ParametricPrior {
    pub fn new(
        transition: MeanFunction,
        q: Vec<f64>,
        data: &Dataset,
        reference: Option<&[Vec<f64>]>,
    ) -> Result<Self> {
        if q.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::config("q", "process noise must be positive"));
        }
        Ok(Self {
            transition,
            q,
            inputs: data.inputs.clone(),
            reference: reference.map(<[Vec<f64>]>::to_vec),
        })
    }

    fn moments(&self, last: &[f64], t: usize) -> PredictiveMoments {
        let mut mu = vec![0.0; last.len()];
        self.transition
            .eval_into(last, &self.inputs[t - 1], &mut mu);
        PredictiveMoments {
            mu,
            var: self.q.clone(),
        }
    }
}

impl SweepPrior for ParametricPrior {
    type Particle = Vec<f64>;

    fn init(&self, x0: &[f64]) -> Result<Vec<f64>> {
        Ok(x0.to_vec())
    }

    fn predictive(&self, p: &Vec<f64>, t: usize) -> Result<PredictiveMoments> {
        Ok(self.moments(p, t))
    }

    fn advance(&self, p: &mut Vec<f64>, _t: usize, x_t: &[f64], _is_reference: bool) -> Result<()> {
        p.copy_from_slice(x_t);
        Ok(())
    }

    fn ancestor_log_weight(&self, p: &Vec<f64>, t: usize) -> f64 {
        match &self.reference {
            Some(x) => self.moments(p, t).log_density(&x[t]),
            None => 0.0,
        }
    }
}

/// Per-particle random stream keyed by `(sweep key, t, i)`.
pub fn substream(key: u64, t: usize, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(((t as u64) << 32) | i as u64);
    rng
}

/// Draws from the one-step predictive.
pub fn propose<R: Rng + ?Sized>(moments: &PredictiveMoments, rng: &mut R) -> Vec<f64> {
    moments
        .mu
        .iter()
        .zip(&moments.var)
        .map(|(m, v)| {
            let e: f64 = rng.sample(StandardNormal);
            m + v.max(0.0).sqrt() * e
        })
        .collect()
}

/// Normalizes log-weights with max subtraction. Returns the normalized
/// weights and the log of the mean unnormalized weight.
pub fn normalize_log_weights(log_w: &[f64], t: usize) -> Result<(Vec<f64>, f64)> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Degenerate { t });
    }
    let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = w.iter().sum();
    Ok((
        w.iter().map(|v| v / s).collect(),
        max + (s / log_w.len() as f64).ln(),
    ))
}

/// Weights proportional to the measurement likelihood of each particle at `t`.
pub fn reweight(
    states: &[Vec<f64>],
    y: &[f64],
    measurement: &MeasurementModel,
    r: f64,
    t: usize,
) -> Result<Vec<f64>> {
    let lw: Vec<f64> = states
        .iter()
        .map(|x| measurement.log_likelihood_unchecked(y, x, r))
        .map(|l| if l.is_nan() { f64::NEG_INFINITY } else { l })
        .collect();
    normalize_log_weights(&lw, t).map(|(w, _)| w)
}

/// Index drawn with probability proportional to `w` (assumed normalized).
fn draw_index<R: Rng + ?Sized>(cdf: &[f64], rng: &mut R) -> usize {
    let u = rng.random::<f64>() * cdf[cdf.len() - 1];
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

fn cumulative(w: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    w.iter()
        .map(|v| {
            acc += v;
            acc
        })
        .collect()
}

/// Multinomial draws of `count` ancestor indices.
pub fn resample_ancestors<R: Rng + ?Sized>(
    weights: &[f64],
    count: usize,
    rng: &mut R,
) -> Vec<usize> {
    let cdf = cumulative(weights);
    (0..count).map(|_| draw_index(&cdf, rng)).collect()
}

/// Normalized ancestor-sampling probabilities
/// `w̃ⁱ ∝ wⁱ_{t-1} p(x̃_{t:T} | x_{0:t-1}ⁱ)`, computed in log-space.
pub fn ancestor_probabilities<P: SweepPrior>(
    prior: &P,
    particles: &[P::Particle],
    weights: &[f64],
    t: usize,
    parallel: bool,
) -> Result<Vec<f64>> {
    let f = |(p, w): (&P::Particle, &f64)| {
        let l = w.ln() + prior.ancestor_log_weight(p, t);
        if l.is_finite() {
            l
        } else {
            if *w > 0.0 {
                log::warn!("non-finite ancestor weight at t={t}; particle dropped");
            }
            f64::NEG_INFINITY
        }
    };
    let lw: Vec<f64> = if parallel {
        particles
            .par_iter()
            .zip(weights.par_iter())
            .map(f)
            .collect()
    } else {
        particles.iter().zip(weights).map(f).collect()
    };
    normalize_log_weights(&lw, t).map(|(w, _)| w)
}

/// Draws the ancestor index of the conditioned particle.
pub fn ancestor_sample<P: SweepPrior, R: Rng + ?Sized>(
    prior: &P,
    particles: &[P::Particle],
    weights: &[f64],
    t: usize,
    rng: &mut R,
) -> Result<usize> {
    let probs = ancestor_probabilities(prior, particles, weights, t, false)?;
    Ok(draw_index(&cumulative(&probs), rng))
}

/// Weighted particles of one sweep.
#[derive(Debug, Clone)]
pub struct ParticleSystem<P> {
    /// `states[t][i] = x_tⁱ`.
    pub states: Vec<Vec<Vec<f64>>>,
    /// `ancestors[t][i] = a_tⁱ`; `ancestors[0]` is the identity.
    pub ancestors: Vec<Vec<usize>>,
    /// Normalized weights at the latest time step.
    pub weights: Vec<f64>,
    pub particles: Vec<P>,
    pub reference: Option<Vec<Vec<f64>>>,
    /// `Σ_t log( mean unnormalized weight )`, the SMC likelihood estimate.
    pub log_evidence: f64,
}

impl<P> ParticleSystem<P> {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Full path of particle `i` at the latest time step, traced through the ancestors.
    pub fn trajectory(&self, mut i: usize) -> Vec<Vec<f64>> {
        let t_last = self.states.len() - 1;
        let mut out = vec![Vec::new(); t_last + 1];
        for t in (0..=t_last).rev() {
            out[t] = self.states[t][i].clone();
            i = self.ancestors[t][i];
        }
        out
    }
}

/// Sweep engine shared by the bootstrap filter and CPF-AS.
pub struct Sweep<'a, P: SweepPrior> {
    prior: &'a P,
    input: SweepInput<'a>,
    system: ParticleSystem<P::Particle>,
    key: u64,
    parallel: bool,
}

impl<'a, P: SweepPrior> Sweep<'a, P> {
    /// Initializes particles at `t = 0`. With a reference, the last particle is
    /// pinned to it.
    pub fn start(
        prior: &'a P,
        input: SweepInput<'a>,
        reference: Option<&[Vec<f64>]>,
        n: usize,
        key: u64,
        parallel: bool,
    ) -> Result<Self> {
        let min = if reference.is_some() { 2 } else { 1 };
        if n < min {
            return Err(Error::config(
                "particles",
                format!("need at least {min} particles"),
            ));
        }
        if let Some(x) = reference {
            if x.len() != input.data.len() {
                return Err(Error::Dimension {
                    context: "reference trajectory",
                    expected: input.data.len(),
                    got: x.len(),
                });
            }
        }
        let n_x = match reference {
            Some(x) => x[0].len(),
            None => match input.measurement {
                MeasurementModel::Linear { c } => c[0].len(),
                MeasurementModel::Quadratic { .. } => input.data.obs_dim(),
            },
        };
        let sd0 = input.initial_variance.sqrt();
        let states0: Vec<Vec<f64>> = (0..n)
            .map(|i| match reference {
                Some(x) if i == n - 1 => x[0].clone(),
                _ => {
                    let mut rng = substream(key, 0, i);
                    (0..n_x)
                        .map(|_| sd0 * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                }
            })
            .collect();
        let particles = states0
            .iter()
            .map(|x| prior.init(x))
            .collect::<Result<Vec<_>>>()?;
        let lw: Vec<f64> = states0
            .iter()
            .map(|x| {
                input
                    .measurement
                    .log_likelihood_unchecked(&input.data.observations[0], x, input.r)
            })
            .collect();
        let (weights, ev) = normalize_log_weights(&lw, 0)?;
        Ok(Self {
            prior,
            input,
            system: ParticleSystem {
                states: vec![states0],
                ancestors: vec![(0..n).collect()],
                weights,
                particles,
                reference: reference.map(<[Vec<f64>]>::to_vec),
                log_evidence: ev,
            },
            key,
            parallel,
        })
    }

    pub fn system(&self) -> &ParticleSystem<P::Particle> {
        &self.system
    }

    /// Propagates and reweights from `t - 1` to `t`. After an error the sweep
    /// cannot be continued.
    pub fn step(&mut self, t: usize) -> Result<()> {
        let sys = &self.system;
        let n = sys.len();
        let conditioned = sys.reference.is_some();
        let free = if conditioned { n - 1 } else { n };
        let mut sync_rng = substream(self.key, t, u32::MAX as usize);
        let mut ancestors = resample_ancestors(&sys.weights, free, &mut sync_rng);
        if conditioned {
            let probs =
                ancestor_probabilities(self.prior, &sys.particles, &sys.weights, t, self.parallel)?;
            ancestors.push(draw_index(&cumulative(&probs), &mut sync_rng));
        }
        let mut uses = vec![0usize; n];
        ancestors.iter().for_each(|&a| uses[a] += 1);
        let mut pool: Vec<Option<P::Particle>> = std::mem::take(&mut self.system.particles)
            .into_iter()
            .map(Some)
            .collect();
        let starts: Vec<P::Particle> = ancestors
            .iter()
            .map(|&a| {
                uses[a] -= 1;
                if uses[a] == 0 {
                    pool[a].take().expect("ancestor still pooled")
                } else {
                    pool[a].clone().expect("ancestor still pooled")
                }
            })
            .collect();
        let sys = &self.system;
        let prior = self.prior;
        let reference = sys.reference.as_ref();
        let key = self.key;
        let y = &self.input.data.observations[t];
        let (meas, r) = (self.input.measurement, self.input.r);
        let propagate = |(i, mut p): (usize, P::Particle)| -> Result<(P::Particle, Vec<f64>, f64)> {
            let x = match reference {
                Some(xr) if i == n - 1 => {
                    prior.advance(&mut p, t, &xr[t], true)?;
                    xr[t].clone()
                }
                _ => {
                    let mom = prior.predictive(&p, t)?;
                    let x = propose(&mom, &mut substream(key, t, i));
                    prior.advance(&mut p, t, &x, false)?;
                    x
                }
            };
            let l = meas.log_likelihood_unchecked(y, &x, r);
            Ok((p, x, if l.is_nan() { f64::NEG_INFINITY } else { l }))
        };
        let out: Vec<(P::Particle, Vec<f64>, f64)> = if self.parallel {
            starts
                .into_par_iter()
                .enumerate()
                .map(propagate)
                .collect::<Result<_>>()?
        } else {
            starts
                .into_iter()
                .enumerate()
                .map(propagate)
                .collect::<Result<_>>()?
        };
        let mut particles = Vec::with_capacity(n);
        let mut states = Vec::with_capacity(n);
        let mut lw = Vec::with_capacity(n);
        for (p, x, l) in out {
            particles.push(p);
            states.push(x);
            lw.push(l);
        }
        let (weights, ev) = normalize_log_weights(&lw, t)?;
        let sys = &mut self.system;
        sys.particles = particles;
        sys.states.push(states);
        sys.ancestors.push(ancestors);
        sys.weights = weights;
        sys.log_evidence += ev;
        Ok(())
    }

    /// Runs all remaining steps.
    pub fn run(mut self) -> Result<ParticleSystem<P::Particle>> {
        for t in self.system.states.len()..=self.input.data.horizon() {
            self.step(t)?;
        }
        Ok(self.system)
    }
}

/// Draws a trajectory `k ~ w_T` from a completed system.
pub fn draw_trajectory<P, R: Rng + ?Sized>(
    system: &ParticleSystem<P>,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    let k = draw_index(&cumulative(&system.weights), rng);
    system.trajectory(k)
}

/// One CPF-AS sweep conditioned on `reference`; returns the particle system and
/// a trajectory drawn with probability `w_Tⁱ`.
pub fn cpf_as_sweep<P: SweepPrior, R: Rng + ?Sized>(
    prior: &P,
    input: SweepInput<'_>,
    reference: &[Vec<f64>],
    n: usize,
    rng: &mut R,
    parallel: bool,
) -> Result<(ParticleSystem<P::Particle>, Vec<Vec<f64>>)> {
    let key = rng.random::<u64>();
    let system = Sweep::start(prior, input, Some(reference), n, key, parallel)?.run()?;
    let x = draw_trajectory(&system, rng);
    Ok((system, x))
}

/// Standard bootstrap particle filter; returns one weighted-draw trajectory.
pub fn bootstrap_pf<P: SweepPrior, R: Rng + ?Sized>(
    prior: &P,
    input: SweepInput<'_>,
    n: usize,
    rng: &mut R,
    parallel: bool,
) -> Result<Vec<Vec<f64>>> {
    let key = rng.random::<u64>();
    let system = Sweep::start(prior, input, None, n, key, parallel)?.run()?;
    Ok(draw_trajectory(&system, rng))
}
