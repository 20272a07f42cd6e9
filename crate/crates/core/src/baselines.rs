//! Heuristic allocation policies used as comparison points.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{capacity, sinr, ChannelRealization, LinkBudget};
use crate::env::Action;
use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Largest joint search space `max_sum_rate` will enumerate by default.
pub const DEFAULT_SEARCH_CAP: u64 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchScope {
    /// Sub-band choice only, everyone at maximum power.
    Subband,
    /// Sub-band and power level, including the null level.
    SubbandPower,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    MaxSumRate,
    MaxIndividual,
    Random,
    Perfect,
}

impl BaselineKind {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::MaxSumRate => "max-sum-rate",
            BaselineKind::MaxIndividual => "max-individual",
            BaselineKind::Random => "random",
            BaselineKind::Perfect => "perfect",
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max-sum-rate" => Ok(BaselineKind::MaxSumRate),
            "max-individual" => Ok(BaselineKind::MaxIndividual),
            "random" => Ok(BaselineKind::Random),
            "perfect" => Ok(BaselineKind::Perfect),
            other => Err(Error::Config(format!(
                "unknown policy {other:?}; expected max-sum-rate, max-individual, random or perfect"
            ))),
        }
    }
}

fn silent(budget: &LinkBudget) -> Action {
    Action::new(0, budget.null_power_index())
}

/// Sum of per-client capacities in client order.
pub fn sum_capacity(
    joint: &[Action],
    realization: &ChannelRealization,
    budget: &LinkBudget,
    slot: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for n in 0..joint.len() {
        total += capacity(sinr(n, joint, realization, budget, slot), budget.bandwidth_hz)?;
    }
    Ok(total)
}

/// Exhaustive search for the joint action with the largest sum capacity.
/// Completed clients stay silent. Ties go to the lexicographically
/// smallest joint action.
pub fn max_sum_rate(
    realization: &ChannelRealization,
    slot: usize,
    budget: &LinkBudget,
    masks: &[bool],
    scope: SearchScope,
    cap: u64,
) -> Result<Vec<Action>> {
    let n = realization.clients();
    if masks.len() != n {
        return Err(Error::Shape(format!("{} masks for {n} clients", masks.len())));
    }
    let active: Vec<usize> = (0..n).filter(|&i| !masks[i]).collect();
    let options: Vec<Action> = match scope {
        SearchScope::Subband => (0..budget.subbands)
            .map(|c| Action::new(c, budget.max_power_index()))
            .collect(),
        SearchScope::SubbandPower => (0..budget.action_count())
            .map(|i| Action::from_index(i, budget.power_level_count()))
            .collect(),
    };
    let size = (options.len() as u128).checked_pow(active.len() as u32).unwrap_or(u128::MAX);
    if size > cap as u128 {
        return Err(Error::SearchSpace { size, cap });
    }
    let mut joint = vec![silent(budget); n];
    let mut digits = vec![0usize; active.len()];
    for (&i, &d) in active.iter().zip(&digits) {
        joint[i] = options[d];
    }
    let mut best = joint.clone();
    let mut best_value = sum_capacity(&joint, realization, budget, slot)?;
    // odometer with the first active client as the most significant digit
    'search: loop {
        let mut pos = digits.len();
        loop {
            if pos == 0 {
                break 'search;
            }
            pos -= 1;
            digits[pos] += 1;
            if digits[pos] < options.len() {
                joint[active[pos]] = options[digits[pos]];
                break;
            }
            digits[pos] = 0;
            joint[active[pos]] = options[0];
        }
        let value = sum_capacity(&joint, realization, budget, slot)?;
        if value > best_value {
            best_value = value;
            best.clone_from(&joint);
        }
    }
    Ok(best)
}

/// Strongest sub-band at maximum power, from the client's own gains.
pub fn max_individual_rate(own_gains: &[f64], budget: &LinkBudget) -> Result<Action> {
    if own_gains.len() != budget.subbands {
        return Err(Error::Shape(format!(
            "{} gains for {} sub-bands",
            own_gains.len(),
            budget.subbands
        )));
    }
    let best = (0..own_gains.len()).fold(0, |b, c| if own_gains[c] > own_gains[b] { c } else { b });
    Ok(Action::new(best, budget.max_power_index()))
}

/// Uniform sub-band at maximum power.
pub fn random_action(rng: &mut SimRng, budget: &LinkBudget) -> Action {
    Action::new(rng.random_range(0..budget.subbands), budget.max_power_index())
}

/// Success set when every upload goes through.
pub fn perfect_comm_round(clients: usize) -> Vec<usize> {
    (0..clients).collect()
}

/// A heuristic with its own random stream where needed.
#[derive(Debug, Clone)]
pub struct BaselinePolicy {
    pub kind: BaselineKind,
    pub scope: SearchScope,
    pub cap: u64,
    rng: SimRng,
}

impl BaselinePolicy {
    pub fn new(kind: BaselineKind, scope: SearchScope, cap: u64, rng: SimRng) -> Self {
        Self { kind, scope, cap, rng }
    }

    /// Joint action for one slot. Completed clients are silent.
    pub fn joint_action(
        &mut self,
        realization: &ChannelRealization,
        slot: usize,
        masks: &[bool],
        budget: &LinkBudget,
    ) -> Result<Vec<Action>> {
        let n = realization.clients();
        match self.kind {
            BaselineKind::MaxSumRate => max_sum_rate(realization, slot, budget, masks, self.scope, self.cap),
            BaselineKind::MaxIndividual => (0..n)
                .map(|i| {
                    if masks[i] {
                        Ok(silent(budget))
                    } else {
                        max_individual_rate(realization.client_gains(slot, i), budget)
                    }
                })
                .collect(),
            BaselineKind::Random => Ok((0..n)
                .map(|i| {
                    if masks[i] {
                        silent(budget)
                    } else {
                        random_action(&mut self.rng, budget)
                    }
                })
                .collect()),
            BaselineKind::Perfect => Err(Error::Contract(
                "the perfect-communication reference does not choose actions".into(),
            )),
        }
    }
}
