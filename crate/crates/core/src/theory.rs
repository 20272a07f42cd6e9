//! Numerical checks of the local-drift lemma, the average-squared-norm
//! identity and the one-step FedAvg bound on tasks with known constants.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fl::{local_train, sample_batch, LearningTask, LocalTrainConfig, ParamVector, QuadraticTask};
use crate::rng::{stream, SimRng};

/// Two-sided 99% normal quantile.
pub const Z_99: f64 = 2.5758293035489004;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimateMethod {
    Analytic,
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssumptionEstimates {
    pub smoothness: f64,
    pub smoothness_method: EstimateMethod,
    /// Upper confidence bound of the largest client mini-batch variance.
    pub local_variance: f64,
    pub local_variance_method: EstimateMethod,
    pub global_variance: f64,
    pub global_variance_method: EstimateMethod,
}

/// Mean and normal-approximation 99% interval of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub samples: usize,
}

impl Interval {
    pub fn from_samples(xs: &[f64]) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::Domain("confidence interval of an empty sample".into()));
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let half = Z_99 * (var / n).sqrt();
        Ok(Self { mean, lower: mean - half, upper: mean + half, samples: xs.len() })
    }
}

/// `(1/N) sum_n ||grad F_n(w) - grad F(w)||^2`.
pub fn global_variance<T: LearningTask + ?Sized>(task: &T, w: &ParamVector) -> f64 {
    let global = task.full_gradient_global(w);
    (0..task.clients())
        .map(|n| task.full_gradient_client(w, n).sub(&global).norm_sq())
        .sum::<f64>()
        / task.clients() as f64
}

/// Upper 99% bound on `E||g_B - grad F_n||^2`, maximized over clients.
pub fn local_variance_bound<T: LearningTask + ?Sized>(
    task: &T,
    w: &ParamVector,
    batch_size: usize,
    samples: usize,
    rng: &mut SimRng,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::Config("sample budget must be positive".into()));
    }
    let mut worst: f64 = 0.0;
    for n in 0..task.clients() {
        let size = task.client_size(n);
        if batch_size == 0 || batch_size > size {
            return Err(Error::Config(format!("batch size {batch_size} invalid for client {n}")));
        }
        let full = task.full_gradient_client(w, n);
        let draws: Vec<f64> = (0..samples)
            .map(|_| {
                let b = sample_batch(rng, size, batch_size);
                task.stochastic_gradient(w, n, &b).sub(&full).norm_sq()
            })
            .collect();
        worst = worst.max(Interval::from_samples(&draws)?.upper.max(0.0));
    }
    Ok(worst)
}

pub fn estimate_constants(
    task: &QuadraticTask,
    w: &ParamVector,
    batch_size: usize,
    samples: usize,
    rng: &mut SimRng,
) -> Result<AssumptionEstimates> {
    Ok(AssumptionEstimates {
        smoothness: task.smoothness(),
        smoothness_method: EstimateMethod::Analytic,
        local_variance: local_variance_bound(task, w, batch_size, samples, rng)?,
        local_variance_method: EstimateMethod::MonteCarlo,
        global_variance: global_variance(task, w),
        global_variance_method: EstimateMethod::Exact,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremInputs {
    pub global_rate: f64,
    pub local_rate: f64,
    pub epochs: usize,
    pub smoothness: f64,
    pub clients: usize,
    pub local_variance: f64,
    pub global_variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

pub fn compute_theorem_constants(p: &TheoremInputs) -> Result<TheoremConstants> {
    let vals = [p.global_rate, p.local_rate, p.smoothness, p.local_variance, p.global_variance];
    if vals.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || p.clients == 0 {
        return Err(Error::Domain("theorem inputs must be finite and nonnegative with N >= 1".into()));
    }
    let (g, l, e, big_l, n) = (p.global_rate, p.local_rate, p.epochs as f64, p.smoothness, p.clients as f64);
    let shared = 2.0 * g * (1.0 - l * e).powi(2)
        + 12.0 * g * g * l * l * e * e * big_l
        + 24.0 * g * l.powi(4) * e.powi(4) * big_l * big_l;
    let c1 = shared - 0.5 * g;
    let c2 = g * (1.0 + g * big_l);
    let c3 = shared * p.global_variance
        + (g * l * l * e.powi(3) / (2.0 * n)
            + 3.0 * g * g * l * l * e * big_l
            + 6.0 * g * l.powi(4) * e.powi(3) * big_l * big_l)
            * p.local_variance;
    Ok(TheoremConstants { c1, c2, c3 })
}

/// Largest local rate the drift lemma admits.
pub fn max_local_rate(epochs: usize, smoothness: f64) -> f64 {
    1.0 / (8f64.sqrt() * epochs as f64 * smoothness)
}

fn check_rate(epochs: usize, rate: f64, smoothness: f64) -> Result<()> {
    let limit = max_local_rate(epochs, smoothness);
    if !(rate > 0.0) || rate > limit * (1.0 + 1e-12) {
        return Err(Error::Domain(format!(
            "local rate {rate} violates eta_l <= 1/(sqrt(8) E L) = {limit}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDrift {
    pub client: usize,
    pub drift: Interval,
    pub bound: f64,
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    pub epochs: usize,
    pub local_rate: f64,
    pub batch_size: usize,
    pub estimates: AssumptionEstimates,
    pub clients: Vec<ClientDrift>,
    pub pass: bool,
}

/// Monte Carlo check of `E||g_n||^2 <= 12 eta^2 E^2 ||grad F_n||^2 +
/// 3 eta^2 E sigma_l^2` at `w`, one client at a time. The upper confidence
/// bound of the drift is compared against the right-hand side.
pub fn check_lemma1(
    task: &QuadraticTask,
    w: &ParamVector,
    local: &LocalTrainConfig,
    trials: usize,
    seed: u64,
) -> Result<Lemma1Report> {
    if trials == 0 {
        return Err(Error::Config("trials must be positive".into()));
    }
    let smoothness = task.smoothness();
    check_rate(local.epochs, local.learning_rate, smoothness)?;
    let mut rng = stream(seed, "lemma1-variance", &[]);
    let estimates = estimate_constants(task, w, local.batch_size, trials, &mut rng)?;
    let (eta, e) = (local.learning_rate, local.epochs as f64);
    let mut clients = Vec::with_capacity(task.clients());
    for n in 0..task.clients() {
        let grad_sq = task.full_gradient_client(w, n).norm_sq();
        let bound = 12.0 * eta * eta * e * e * grad_sq + 3.0 * eta * eta * e * estimates.local_variance;
        let mut rng = stream(seed, "lemma1-drift", &[n as u64]);
        let draws = (0..trials)
            .map(|_| Ok(local_train(w, task, n, local, &mut rng)?.norm_sq()))
            .collect::<Result<Vec<f64>>>()?;
        let drift = Interval::from_samples(&draws)?;
        let margin = bound - drift.upper;
        clients.push(ClientDrift { client: n, drift, bound, margin, pass: margin >= 0.0 });
    }
    let pass = clients.iter().all(|c| c.pass);
    Ok(Lemma1Report {
        epochs: local.epochs,
        local_rate: eta,
        batch_size: local.batch_size,
        estimates,
        clients,
        pass,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lemma2Report {
    pub mean_client_sq: f64,
    pub global_sq: f64,
    pub global_variance: f64,
    pub residual: f64,
    pub pass: bool,
}

pub const LEMMA2_TOLERANCE: f64 = 1e-9;

/// `(1/N) sum ||grad F_n||^2 = ||grad F||^2 + (1/N) sum ||grad F_n - grad F||^2`.
pub fn check_lemma2<T: LearningTask + ?Sized>(task: &T, w: &ParamVector) -> Lemma2Report {
    let grads: Vec<ParamVector> = (0..task.clients()).map(|n| task.full_gradient_client(w, n)).collect();
    let n = grads.len() as f64;
    let global = ParamVector::mean(&grads, task.dim());
    let mean_client_sq = grads.iter().map(|g| g.norm_sq()).sum::<f64>() / n;
    let global_sq = global.norm_sq();
    let global_variance = grads.iter().map(|g| g.sub(&global).norm_sq()).sum::<f64>() / n;
    let scale = mean_client_sq.abs().max(f64::MIN_POSITIVE);
    let residual = (mean_client_sq - global_sq - global_variance).abs() / scale;
    Lemma2Report {
        mean_client_sq,
        global_sq,
        global_variance,
        residual,
        pass: residual < LEMMA2_TOLERANCE,
    }
}

/// How the success set is drawn in each Monte Carlo trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuccessSampler {
    /// Uniform over the `2^N - 1` nonempty subsets.
    UniformNonempty,
    /// Cycles through the given sets.
    Fixed(Vec<Vec<usize>>),
    /// Client `n` succeeds independently with probability `p[n]`, as an
    /// environment rollout would produce.
    Independent(Vec<f64>),
}

impl SuccessSampler {
    pub fn sample(&self, clients: usize, trial: usize, rng: &mut SimRng) -> Result<Vec<usize>> {
        match self {
            SuccessSampler::UniformNonempty => {
                if clients == 0 || clients > 62 {
                    return Err(Error::Domain("uniform subset sampling needs 1..=62 clients".into()));
                }
                let mask: u64 = rng.random_range(1..(1u64 << clients));
                Ok((0..clients).filter(|&n| mask >> n & 1 == 1).collect())
            }
            SuccessSampler::Fixed(sets) => {
                let set = sets
                    .get(trial % sets.len().max(1))
                    .ok_or_else(|| Error::Config("fixed sampler needs at least one set".into()))?;
                if set.iter().any(|&n| n >= clients) {
                    return Err(Error::Domain("fixed success set names an unknown client".into()));
                }
                Ok(set.clone())
            }
            SuccessSampler::Independent(p) => {
                if p.len() != clients {
                    return Err(Error::Shape("one success probability per client".into()));
                }
                Ok((0..clients).filter(|&n| rng.random_bool(p[n].clamp(0.0, 1.0))).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub constants: TheoremConstants,
    pub estimates: AssumptionEstimates,
    pub global_gradient_sq: f64,
    /// `F(w_{t+1}) - F(w_t)` over the trials.
    pub lhs: Interval,
    /// `||mean of all client gradients - aggregated gradient||^2`.
    pub middle: Interval,
    pub rhs: f64,
    /// Per-trial `RHS - LHS` with the middle term from the same trial.
    pub margin: Interval,
    pub trials: usize,
    pub empty_excluded: usize,
    pub pass: bool,
}

/// Monte Carlo check of the one-step bound. Mini-batches and success sets
/// share each trial; empty success sets are counted and skipped.
pub fn check_theorem1(
    task: &QuadraticTask,
    w: &ParamVector,
    local: &LocalTrainConfig,
    global_rate: f64,
    sampler: &SuccessSampler,
    trials: usize,
    seed: u64,
) -> Result<BoundReport> {
    if trials == 0 {
        return Err(Error::Config("trials must be positive".into()));
    }
    let smoothness = task.smoothness();
    check_rate(local.epochs, local.learning_rate, smoothness)?;
    let mut rng = stream(seed, "theorem1-variance", &[]);
    let estimates = estimate_constants(task, w, local.batch_size, trials, &mut rng)?;
    let constants = compute_theorem_constants(&TheoremInputs {
        global_rate,
        local_rate: local.learning_rate,
        epochs: local.epochs,
        smoothness,
        clients: task.clients(),
        local_variance: estimates.local_variance,
        global_variance: estimates.global_variance,
    })?;
    let grad_sq = task.full_gradient_global(w).norm_sq();
    let f0 = task.global_objective(w);
    let n = task.clients();
    let mut lhs = Vec::with_capacity(trials);
    let mut middle = Vec::with_capacity(trials);
    let mut margin = Vec::with_capacity(trials);
    let mut empty = 0;
    for trial in 0..trials {
        let mut rng = stream(seed, "theorem1-trial", &[trial as u64]);
        let grads = (0..n)
            .map(|c| local_train(w, task, c, local, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let success = sampler.sample(n, trial, &mut rng)?;
        if success.is_empty() {
            empty += 1;
            continue;
        }
        let ideal = ParamVector::mean(&grads, task.dim());
        let aggregated = ParamVector::mean(success.iter().map(|&c| &grads[c]), task.dim());
        let mut next = w.clone();
        next.axpy(-global_rate, &aggregated);
        let delta = task.global_objective(&next) - f0;
        let mid = ideal.sub(&aggregated).norm_sq();
        lhs.push(delta);
        middle.push(mid);
        margin.push(constants.c1 * grad_sq + constants.c2 * mid + constants.c3 - delta);
    }
    if lhs.is_empty() {
        return Err(Error::Domain("every sampled success set was empty".into()));
    }
    let middle = Interval::from_samples(&middle)?;
    let margin = Interval::from_samples(&margin)?;
    Ok(BoundReport {
        constants,
        estimates,
        global_gradient_sq: grad_sq,
        lhs: Interval::from_samples(&lhs)?,
        rhs: constants.c1 * grad_sq + constants.c2 * middle.mean + constants.c3,
        middle,
        margin,
        trials: lhs.len(),
        empty_excluded: empty,
        pass: margin.lower >= 0.0,
    })
}
