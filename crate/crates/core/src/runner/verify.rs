//! Theory checks on the configured quadratic fixture, and the data
//! partition summary.

use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::experiment::Setup;
use crate::error::{Error, Result};
use crate::fl::{LearningTask, LocalTrainConfig, ParamVector, QuadraticTask};
use crate::rng::{derive_seed, stream};
use crate::theory::{
    check_lemma1, check_lemma2, check_theorem1, max_local_rate, BoundReport, Lemma1Report, Lemma2Report,
    SuccessSampler,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TheoryCheck {
    Lemma1,
    Lemma2,
    Theorem1,
}

impl FromStr for TheoryCheck {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lemma1" => Ok(TheoryCheck::Lemma1),
            "lemma2" => Ok(TheoryCheck::Lemma2),
            "theorem1" => Ok(TheoryCheck::Theorem1),
            other => Err(Error::Config(format!("unknown check {other:?}; use lemma1, lemma2 or theorem1"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "check", content = "results")]
pub enum TheoryDetails {
    Lemma1(Vec<Lemma1Report>),
    Lemma2 { max_residual: f64, pairs: Vec<Lemma2Report> },
    Theorem1(Vec<BoundReport>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub seed: u64,
    pub trials: usize,
    pub pass: bool,
    pub details: TheoryDetails,
}

fn random_point(dim: usize, seed: u64) -> ParamVector {
    let mut rng = stream(seed, "point", &[]);
    ParamVector::new((0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
}

fn local_config(config: &ExperimentConfig, epochs: usize, smoothness: f64) -> LocalTrainConfig {
    LocalTrainConfig {
        epochs,
        learning_rate: config.theory.rate_fraction * max_local_rate(epochs, smoothness),
        batch_size: config.theory.batch_size,
    }
}

/// Runs one check at the largest admissible local rate (scaled by
/// `theory.rate_fraction`) for every configured epoch count.
pub fn verify_theory(config: &ExperimentConfig, check: TheoryCheck, trials: usize, seed: u64) -> Result<TheoryReport> {
    config.validate()?;
    if trials < 2 {
        return Err(Error::Config("at least 2 trials are needed for a confidence interval".into()));
    }
    let fixture = QuadraticTask::random(&config.quadratic(), derive_seed(seed, "fixture", &[]))?;
    let w = random_point(fixture.dim(), derive_seed(seed, "fixture-point", &[]));
    let smoothness = fixture.smoothness();
    let details = match check {
        TheoryCheck::Lemma1 => TheoryDetails::Lemma1(
            config
                .theory
                .epochs
                .iter()
                .map(|&e| check_lemma1(&fixture, &w, &local_config(config, e, smoothness), trials, seed))
                .collect::<Result<_>>()?,
        ),
        TheoryCheck::Lemma2 => {
            let mut pairs = Vec::with_capacity(config.theory.identity_pairs);
            for i in 0..config.theory.identity_pairs as u64 {
                let task = QuadraticTask::random(&config.quadratic(), derive_seed(seed, "identity-task", &[i]))?;
                let w = random_point(task.dim(), derive_seed(seed, "identity-point", &[i]));
                pairs.push(check_lemma2(&task, &w));
            }
            let max_residual = pairs.iter().map(|p| p.residual).fold(0.0, f64::max);
            TheoryDetails::Lemma2 { max_residual, pairs }
        }
        TheoryCheck::Theorem1 => TheoryDetails::Theorem1(
            config
                .theory
                .epochs
                .iter()
                .map(|&e| {
                    check_theorem1(
                        &fixture,
                        &w,
                        &local_config(config, e, smoothness),
                        config.theory.global_learning_rate,
                        &SuccessSampler::UniformNonempty,
                        trials,
                        seed,
                    )
                })
                .collect::<Result<_>>()?,
        ),
    };
    let pass = match &details {
        TheoryDetails::Lemma1(r) => r.iter().all(|x| x.pass),
        TheoryDetails::Lemma2 { pairs, .. } => pairs.iter().all(|x| x.pass),
        TheoryDetails::Theorem1(r) => r.iter().all(|x| x.pass),
    };
    Ok(TheoryReport { seed, trials, pass, details })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub dirichlet_alpha: f64,
    pub classes: usize,
    pub sizes: Vec<usize>,
    /// Samples of each class held by each client.
    pub class_counts: Vec<Vec<usize>>,
    pub proportions: Vec<Vec<f64>>,
}

/// How the training set is split across clients under `config`.
pub fn partition_report(config: &ExperimentConfig) -> Result<PartitionReport> {
    let setup = Setup::new(config)?;
    let data = &setup.task;
    let classes = data.partition.classes;
    let class_counts = data
        .partition
        .indices
        .iter()
        .map(|rows| {
            let mut counts = vec![0; classes];
            for &i in rows {
                counts[data.train.labels[i]] += 1;
            }
            counts
        })
        .collect();
    Ok(PartitionReport {
        dirichlet_alpha: config.fl.dirichlet_alpha,
        classes,
        sizes: data.partition.indices.iter().map(|r| r.len()).collect(),
        class_counts,
        proportions: data.partition.proportions.clone(),
    })
}
