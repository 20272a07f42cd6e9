use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fl::ParamVector;

/// Weights of the shaped reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    /// Per-upload bonus.
    pub completion: f64,
    /// Penalty on gradient-deviation inner products.
    pub deviation: f64,
    pub convergence: f64,
    pub transmission: f64,
}

/// Pairwise inner products of the clients' gradient deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationGram {
    clients: usize,
    inner: Vec<f64>,
}

impl DeviationGram {
    pub fn new(deviations: &[ParamVector]) -> Result<Self> {
        let clients = deviations.len();
        if let Some(first) = deviations.first() {
            for d in deviations {
                first.check_dim(d)?;
            }
        }
        let mut inner = vec![0.0; clients * clients];
        for i in 0..clients {
            for j in i..clients {
                let v = deviations[i].dot(&deviations[j]);
                inner[i * clients + j] = v;
                inner[j * clients + i] = v;
            }
        }
        Ok(Self { clients, inner })
    }

    pub fn clients(&self) -> usize {
        self.clients
    }

    pub fn inner(&self, a: usize, b: usize) -> f64 {
        self.inner[a * self.clients + b]
    }

    pub fn squared_norm(&self, a: usize) -> f64 {
        self.inner(a, a)
    }

    pub fn squared_norms(&self) -> Vec<f64> {
        (0..self.clients).map(|n| self.squared_norm(n)).collect()
    }
}

/// Convergence reward of one slot. `newly` completed in this slot,
/// `before` completed in earlier slots. Pairs across slots carry the
/// doubled inner product once so that the slot rewards sum to the episode
/// reward.
pub fn convergence_reward_slot(
    newly: &[usize],
    before: &[usize],
    gram: &DeviationGram,
    completion: f64,
    deviation: f64,
) -> Result<f64> {
    if let Some(n) = newly.iter().find(|n| before.contains(n)) {
        return Err(Error::Contract(format!(
            "client {n} cannot complete twice in one episode"
        )));
    }
    if newly.is_empty() {
        return Ok(0.0);
    }
    let mut penalty = 0.0;
    for &n in newly {
        let mut term = gram.squared_norm(n);
        for &m in before {
            term += 2.0 * gram.inner(n, m);
        }
        for &m in newly {
            if m != n {
                term += gram.inner(n, m);
            }
        }
        penalty += term;
    }
    Ok(completion * newly.len() as f64 - deviation * penalty)
}

/// Convergence reward of a whole round for its success set.
pub fn episode_convergence_reward(
    success: &[usize],
    gram: &DeviationGram,
    completion: f64,
    deviation: f64,
) -> f64 {
    let mut penalty = 0.0;
    for &n in success {
        penalty += gram.squared_norm(n);
        for &m in success {
            if m != n {
                penalty += gram.inner(n, m);
            }
        }
    }
    completion * success.len() as f64 - deviation * penalty
}

/// Slot reward split into its parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub convergence: f64,
    pub transmission: f64,
    pub total: f64,
}

/// `lambda_c * r_conv + lambda_t * sum_n C_n`.
pub fn total_reward(convergence: f64, capacities: &[f64], weights: &RewardWeights) -> RewardBreakdown {
    let transmission: f64 = capacities.iter().sum();
    RewardBreakdown {
        convergence,
        transmission,
        total: weights.convergence * convergence + weights.transmission * transmission,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gram(v: &[&[f64]]) -> DeviationGram {
        let d: Vec<ParamVector> = v.iter().map(|x| ParamVector::new(x.to_vec())).collect();
        DeviationGram::new(&d).unwrap()
    }

    #[test]
    fn empty_completion_gives_zero() {
        let g = gram(&[&[1.0, 0.0]]);
        assert_eq!(convergence_reward_slot(&[], &[0], &g, 1.0, 0.5).unwrap(), 0.0);
        assert_eq!(episode_convergence_reward(&[], &g, 1.0, 0.5), 0.0);
    }

    #[test]
    fn single_completion_with_orthogonal_history() {
        let g = gram(&[&[1.0, 0.0, 0.0], &[0.0, 3.0, 0.0], &[0.0, 0.0, -2.0]]);
        let r = convergence_reward_slot(&[0], &[1, 2], &g, 1.0, 0.5).unwrap();
        assert!((r - 0.5).abs() < 1e-15);
    }

    #[test]
    fn distinct_slots_telescope() {
        let g = gram(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let r1 = convergence_reward_slot(&[0], &[], &g, 1.0, 0.5).unwrap();
        let r2 = convergence_reward_slot(&[1], &[0], &g, 1.0, 0.5).unwrap();
        assert_eq!((r1, r2), (0.5, 0.5));
        assert_eq!(episode_convergence_reward(&[0, 1], &g, 1.0, 0.5), 1.0);
    }

    #[test]
    fn overlapping_sets_are_rejected() {
        let g = gram(&[&[1.0], &[2.0]]);
        assert!(convergence_reward_slot(&[0, 1], &[1], &g, 1.0, 0.5).is_err());
    }

    #[test]
    fn episode_reward_closed_forms() {
        let g = gram(&[&[0.6, -0.8, 1.0]]);
        assert!((episode_convergence_reward(&[0], &g, 1.0, 0.3) - (1.0 - 0.3 * 2.0)).abs() < 1e-12);
        let same = gram(&[&[0.6, 0.8], &[0.6, 0.8], &[0.6, 0.8], &[0.6, 0.8]]);
        let m = 4.0;
        let v = 1.0;
        let expected = 0.9 * m - 0.1 * m * m * v;
        assert!((episode_convergence_reward(&[0, 1, 2, 3], &same, 0.9, 0.1) - expected).abs() < 1e-12);
    }

    #[test]
    fn total_reward_examples() {
        let w = RewardWeights { completion: 1.0, deviation: 0.1, convergence: 0.0, transmission: 1e-6 };
        let r = total_reward(7.0, &[1e6, 2e6], &w);
        assert!((r.total - 3.0).abs() < 1e-12);
        let w = RewardWeights { convergence: 2.0, transmission: 0.0, ..w };
        assert_eq!(total_reward(0.25, &[5.0], &w).total, 0.5);
        assert_eq!(total_reward(0.0, &[0.0, 0.0], &w).total, 0.0);
    }
}
