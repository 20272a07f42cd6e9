//! Least-squares clients `F_n(w) = 1/(2|D_n|) sum_x ||A_x w - b_x||^2`.
//! Smoothness and gradient dispersion are available in closed form, which
//! makes these tasks the fixtures for the convergence checks.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fl::{LearningTask, ParamVector};

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticSample {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl QuadraticSample {
    pub fn new(rows: Vec<Vec<f64>>, b: Vec<f64>) -> Result<Self> {
        let m = rows.len();
        let d = rows.first().map(|r| r.len()).unwrap_or(0);
        if m == 0 || d == 0 || rows.iter().any(|r| r.len() != d) || b.len() != m {
            return Err(Error::Shape("sample rows must be rectangular and match b".into()));
        }
        Ok(Self {
            a: DMatrix::from_fn(m, d, |i, j| rows[i][j]),
            b: DVector::from_vec(b),
        })
    }

    fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        self.a.transpose() * (&self.a * w - &self.b)
    }

    fn loss(&self, w: &DVector<f64>) -> f64 {
        0.5 * (&self.a * w - &self.b).norm_squared()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticConfig {
    pub clients: usize,
    pub dim: usize,
    pub samples_per_client: usize,
    pub rows_per_sample: usize,
    /// Spread of the client-specific optima around a shared one.
    pub heterogeneity: f64,
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticTask {
    clients: Vec<Vec<QuadraticSample>>,
    dim: usize,
}

fn to_dvec(w: &ParamVector) -> DVector<f64> {
    DVector::from_column_slice(w)
}

fn to_param(v: DVector<f64>) -> ParamVector {
    ParamVector::new(v.as_slice().to_vec())
}

impl QuadraticTask {
    pub fn new(clients: Vec<Vec<QuadraticSample>>) -> Result<Self> {
        let dim = clients
            .first()
            .and_then(|c| c.first())
            .map(|s| s.a.ncols())
            .ok_or_else(|| Error::Config("quadratic task needs a client with samples".into()))?;
        for c in &clients {
            if c.is_empty() {
                return Err(Error::Domain("every client needs at least one sample".into()));
            }
            if c.iter().any(|s| s.a.ncols() != dim) {
                return Err(Error::Shape("all samples must share one dimension".into()));
            }
        }
        Ok(Self { clients, dim })
    }

    /// Random Gaussian design. Client `n` fits `A_x w_n + noise` where the
    /// `w_n` scatter around a shared optimum with scale `heterogeneity`.
    pub fn random(config: &QuadraticConfig, seed: u64) -> Result<Self> {
        if config.clients == 0
            || config.dim == 0
            || config.samples_per_client == 0
            || config.rows_per_sample == 0
        {
            return Err(Error::Config("quadratic task dimensions must be positive".into()));
        }
        let mut rng = crate::rng::seeded(seed);
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let shared = DVector::from_fn(config.dim, |_, _| normal());
        let scale = 1.0 / (config.rows_per_sample as f64).sqrt();
        let mut clients = Vec::with_capacity(config.clients);
        for _ in 0..config.clients {
            let target = &shared + DVector::from_fn(config.dim, |_, _| config.heterogeneity * normal());
            let samples = (0..config.samples_per_client)
                .map(|_| {
                    let a = DMatrix::from_fn(config.rows_per_sample, config.dim, |_, _| scale * normal());
                    let noise = DVector::from_fn(config.rows_per_sample, |_, _| config.noise_std * normal());
                    let b = &a * &target + noise;
                    QuadraticSample { a, b }
                })
                .collect();
            clients.push(samples);
        }
        Self::new(clients)
    }

    /// Every client holds an identical copy of the same samples.
    pub fn replicated(samples: Vec<QuadraticSample>, clients: usize) -> Result<Self> {
        Self::new(vec![samples; clients])
    }

    pub fn samples(&self, client: usize) -> &[QuadraticSample] {
        &self.clients[client]
    }

    /// Hessian of `F_n`: `(1/|D_n|) sum_x A_x^T A_x`.
    pub fn hessian(&self, client: usize) -> DMatrix<f64> {
        let samples = &self.clients[client];
        let mut h = DMatrix::zeros(self.dim, self.dim);
        for s in samples {
            h += s.a.transpose() * &s.a;
        }
        h / samples.len() as f64
    }

    /// Smoothness constant: the largest client Hessian eigenvalue.
    pub fn smoothness(&self) -> f64 {
        (0..self.clients.len())
            .map(|n| {
                SymmetricEigen::new(self.hessian(n))
                    .eigenvalues
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .fold(0.0, f64::max)
    }

    /// Minimizer of the global objective, when the mean Hessian is
    /// invertible.
    pub fn minimizer(&self) -> Option<ParamVector> {
        let n = self.clients.len() as f64;
        let mut h = DMatrix::zeros(self.dim, self.dim);
        let mut rhs = DVector::zeros(self.dim);
        for samples in &self.clients {
            let m = samples.len() as f64;
            for s in samples {
                h += s.a.transpose() * &s.a / (m * n);
                rhs += s.a.transpose() * &s.b / (m * n);
            }
        }
        h.lu().solve(&rhs).map(to_param)
    }

    /// Per-sample gradients of one client at `w`.
    pub fn sample_gradients(&self, w: &ParamVector, client: usize) -> Vec<ParamVector> {
        let wv = to_dvec(w);
        self.clients[client].iter().map(|s| to_param(s.gradient(&wv))).collect()
    }
}

impl LearningTask for QuadraticTask {
    fn dim(&self) -> usize {
        self.dim
    }

    fn clients(&self) -> usize {
        self.clients.len()
    }

    fn client_size(&self, client: usize) -> usize {
        self.clients[client].len()
    }

    fn loss(&self, w: &ParamVector, client: usize, batch: &[usize]) -> f64 {
        let wv = to_dvec(w);
        let samples = &self.clients[client];
        batch.iter().map(|&i| samples[i].loss(&wv)).sum::<f64>() / batch.len() as f64
    }

    fn stochastic_gradient(&self, w: &ParamVector, client: usize, batch: &[usize]) -> ParamVector {
        let wv = to_dvec(w);
        let samples = &self.clients[client];
        let mut g = DVector::zeros(self.dim);
        for &i in batch {
            g += samples[i].gradient(&wv);
        }
        to_param(g / batch.len() as f64)
    }
}
