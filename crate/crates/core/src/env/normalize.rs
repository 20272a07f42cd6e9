//! Feature scaling for network inputs.
//!
//! Observation layout: `N` large-scale gains, `C` own small-scale gains,
//! remaining bits, slots left, own deviation, round. The state layout is
//! `N` large-scale gains, `N*C` small-scale gains, `N` remaining volumes,
//! slots left, `N` deviations, round.

use serde::{Deserialize, Serialize};

use super::{GlobalState, Observation};
use crate::channel::{db_to_linear, linear_to_db};
use crate::error::{ensure_finite, Error, Result};

/// Fixed affine maps for gains in dB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationConfig {
    pub large_scale_offset_db: f64,
    pub large_scale_span_db: f64,
    pub small_scale_span_db: f64,
}

impl Default for NormalizationConfig {
    fn default() -> Self {
        Self {
            large_scale_offset_db: -110.0,
            large_scale_span_db: 20.0,
            small_scale_span_db: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub config: NormalizationConfig,
    pub payload_bits: f64,
    pub slots_per_round: usize,
    pub total_rounds: usize,
    /// Largest squared deviation seen so far.
    pub deviation_scale: f64,
}

// Floor on |h|^2 so deep fades stay finite in dB.
const GAIN_FLOOR: f64 = 1e-30;

impl Normalizer {
    pub fn new(
        config: NormalizationConfig,
        payload_bits: f64,
        slots_per_round: usize,
        total_rounds: usize,
    ) -> Result<Self> {
        if !(config.large_scale_span_db > 0.0 && config.small_scale_span_db > 0.0) {
            return Err(Error::Config("normalization spans must be positive".into()));
        }
        if !(payload_bits > 0.0) || slots_per_round == 0 || total_rounds == 0 {
            return Err(Error::Config("normalizer needs positive S, T_s and T".into()));
        }
        Ok(Self {
            config,
            payload_bits,
            slots_per_round,
            total_rounds,
            deviation_scale: 0.0,
        })
    }

    pub fn observation_width(clients: usize, subbands: usize) -> usize {
        clients + subbands + 4
    }

    pub fn state_width(clients: usize, subbands: usize) -> usize {
        clients * (subbands + 3) + 2
    }

    /// Folds new squared deviations into the running maximum.
    pub fn observe_deviations(&mut self, values: &[f64]) {
        for &v in values {
            if v.is_finite() && v > self.deviation_scale {
                self.deviation_scale = v;
            }
        }
    }

    fn deviation_divisor(&self) -> f64 {
        if self.deviation_scale > 0.0 {
            self.deviation_scale
        } else {
            1.0
        }
    }

    fn large(&self, g: f64) -> f64 {
        (linear_to_db(g.max(GAIN_FLOOR)) - self.config.large_scale_offset_db) / self.config.large_scale_span_db
    }

    fn large_inv(&self, x: f64) -> f64 {
        db_to_linear(x * self.config.large_scale_span_db + self.config.large_scale_offset_db)
    }

    fn small(&self, g: f64) -> f64 {
        linear_to_db(g.max(GAIN_FLOOR)) / self.config.small_scale_span_db
    }

    fn small_inv(&self, x: f64) -> f64 {
        db_to_linear(x * self.config.small_scale_span_db)
    }

    fn finish(features: Vec<f64>) -> Result<Vec<f64>> {
        for &f in &features {
            ensure_finite("feature", f)?;
        }
        Ok(features)
    }

    pub fn observation_features(&self, o: &Observation) -> Result<Vec<f64>> {
        let mut f = Vec::with_capacity(o.large_scale.len() + o.small_scale_power.len() + 4);
        f.extend(o.large_scale.iter().map(|&g| self.large(g)));
        f.extend(o.small_scale_power.iter().map(|&g| self.small(g)));
        f.push(o.remaining_bits / self.payload_bits);
        f.push(o.slots_left as f64 / self.slots_per_round as f64);
        f.push(o.deviation_sq / self.deviation_divisor());
        f.push(o.round as f64 / self.total_rounds as f64);
        Self::finish(f)
    }

    pub fn state_features(&self, s: &GlobalState) -> Result<Vec<f64>> {
        let mut f = Vec::new();
        f.extend(s.large_scale.iter().map(|&g| self.large(g)));
        for row in &s.small_scale_power {
            f.extend(row.iter().map(|&g| self.small(g)));
        }
        f.extend(s.remaining_bits.iter().map(|&d| d / self.payload_bits));
        f.push(s.slots_left as f64 / self.slots_per_round as f64);
        f.extend(s.deviation_sq.iter().map(|&d| d / self.deviation_divisor()));
        f.push(s.round as f64 / self.total_rounds as f64);
        Self::finish(f)
    }

    /// Inverse of [`Normalizer::observation_features`].
    pub fn denormalize_observation(
        &self,
        features: &[f64],
        agent: usize,
        clients: usize,
    ) -> Result<Observation> {
        if features.len() < clients + 4 {
            return Err(Error::Shape("feature vector too short".into()));
        }
        let subbands = features.len() - clients - 4;
        let tail = &features[clients + subbands..];
        Ok(Observation {
            agent,
            large_scale: features[..clients].iter().map(|&x| self.large_inv(x)).collect(),
            small_scale_power: features[clients..clients + subbands]
                .iter()
                .map(|&x| self.small_inv(x))
                .collect(),
            remaining_bits: tail[0] * self.payload_bits,
            slots_left: (tail[1] * self.slots_per_round as f64).round() as usize,
            deviation_sq: tail[2] * self.deviation_divisor(),
            round: (tail[3] * self.total_rounds as f64).round() as usize,
        })
    }
}
