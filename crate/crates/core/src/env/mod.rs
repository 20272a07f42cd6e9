//! Per-slot sub-band and power allocation as a cooperative Dec-POMDP.

mod normalize;
mod reward;

pub use normalize::{NormalizationConfig, Normalizer};
pub use reward::{
    convergence_reward_slot, episode_convergence_reward, total_reward, DeviationGram,
    RewardBreakdown, RewardWeights,
};

use std::cell::Cell;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::channel::{slot_capacities, ChannelRealization, LinkBudget};
use crate::error::{Error, Result};
use crate::fl::ParamVector;

/// Zero-based sub-band and power level. The last power level is null.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub subband: usize,
    pub power: usize,
}

impl Action {
    pub fn new(subband: usize, power: usize) -> Self {
        Self { subband, power }
    }

    /// Flat index `subband * P + power`.
    pub fn index(&self, power_levels: usize) -> usize {
        self.subband * power_levels + self.power
    }

    pub fn from_index(index: usize, power_levels: usize) -> Self {
        Self {
            subband: index / power_levels,
            power: index % power_levels,
        }
    }
}

/// Whether `action` is allowed for an agent, given its mask.
pub fn is_legal(action: Action, masked: bool, budget: &LinkBudget) -> bool {
    action.subband < budget.subbands
        && action.power < budget.power_level_count()
        && (!masked || action.power == budget.null_power_index())
}

/// Flat legality mask over the `C * P` actions of one agent.
pub fn legal_action_mask(masked: bool, budget: &LinkBudget) -> Vec<bool> {
    let p = budget.power_level_count();
    (0..budget.action_count())
        .map(|i| is_legal(Action::from_index(i, p), masked, budget))
        .collect()
}

/// What one agent sees in one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub agent: usize,
    /// Large-scale gains of all clients, linear.
    pub large_scale: Vec<f64>,
    /// Own `|h|^2` per sub-band.
    pub small_scale_power: Vec<f64>,
    pub remaining_bits: f64,
    pub slots_left: usize,
    pub deviation_sq: f64,
    pub round: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalState {
    pub large_scale: Vec<f64>,
    /// `|h|^2` indexed `[client][subband]`.
    pub small_scale_power: Vec<Vec<f64>>,
    pub remaining_bits: Vec<f64>,
    pub slots_left: usize,
    pub deviation_sq: Vec<f64>,
    pub round: usize,
}

impl GlobalState {
    /// Rebuilds the state from one observation per agent.
    pub fn from_observations(observations: &[Observation]) -> Result<Self> {
        let first = observations
            .first()
            .ok_or_else(|| Error::Contract("need at least one observation".into()))?;
        for (i, o) in observations.iter().enumerate() {
            if o.agent != i
                || o.large_scale != first.large_scale
                || o.slots_left != first.slots_left
                || o.round != first.round
            {
                return Err(Error::Contract(format!(
                    "observation {i} disagrees with the shared fields"
                )));
            }
        }
        Ok(Self {
            large_scale: first.large_scale.clone(),
            small_scale_power: observations.iter().map(|o| o.small_scale_power.clone()).collect(),
            remaining_bits: observations.iter().map(|o| o.remaining_bits).collect(),
            slots_left: first.slots_left,
            deviation_sq: observations.iter().map(|o| o.deviation_sq).collect(),
            round: first.round,
        })
    }
}

/// Inputs that fix one FL round's episode.
#[derive(Debug, Clone)]
pub struct RoundContext {
    pub realization: ChannelRealization,
    pub deviations: Vec<ParamVector>,
    pub round: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub slot: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state: Option<GlobalState>,
    pub observations: Vec<Observation>,
    pub actions: Vec<Action>,
    pub reward: RewardBreakdown,
    pub capacities: Vec<f64>,
    pub completed: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub round: usize,
    pub slots: Vec<SlotRecord>,
    pub success: Vec<usize>,
}

impl EpisodeTrace {
    /// Per-client capacity series over the episode.
    pub fn capacity_series(&self, client: usize) -> Vec<f64> {
        self.slots.iter().map(|s| s.capacities[client]).collect()
    }

    /// Appends the episode as JSON lines, one per slot.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for s in &self.slots {
            serde_json::to_writer(&mut out, &(self.round, s))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Result of one slot without the global state.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalStep {
    pub observations: Vec<Observation>,
    pub reward: RewardBreakdown,
    pub capacities: Vec<f64>,
    pub newly_completed: Vec<usize>,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observations: Vec<Observation>,
    pub state: GlobalState,
    pub reward: RewardBreakdown,
    pub capacities: Vec<f64>,
    pub newly_completed: Vec<usize>,
    pub done: bool,
}

struct Episode {
    context: RoundContext,
    gram: DeviationGram,
    deviation_sq: Vec<f64>,
    remaining: Vec<f64>,
    accumulated: Vec<f64>,
    completed: Vec<bool>,
    completed_order: Vec<usize>,
    slot: usize,
    trace: EpisodeTrace,
}

/// Uplink environment for the FL rounds.
pub struct FlEnv {
    budget: LinkBudget,
    weights: RewardWeights,
    record_trace: bool,
    episode: Option<Episode>,
    state_reads: Cell<usize>,
}

impl FlEnv {
    pub fn new(budget: LinkBudget, weights: RewardWeights) -> Result<Self> {
        budget.validate()?;
        if !(weights.convergence >= 0.0 && weights.transmission >= 0.0) {
            return Err(Error::Config("reward mixing weights must be nonnegative".into()));
        }
        Ok(Self {
            budget,
            weights,
            record_trace: true,
            episode: None,
            state_reads: Cell::new(0),
        })
    }

    pub fn with_trace(mut self, record: bool) -> Self {
        self.record_trace = record;
        self
    }

    pub fn budget(&self) -> &LinkBudget {
        &self.budget
    }

    pub fn weights(&self) -> &RewardWeights {
        &self.weights
    }

    pub fn set_weights(&mut self, weights: RewardWeights) {
        self.weights = weights;
    }

    pub fn clients(&self) -> usize {
        self.episode
            .as_ref()
            .map(|e| e.context.realization.clients())
            .unwrap_or(0)
    }

    /// Number of global-state snapshots handed out so far.
    pub fn state_reads(&self) -> usize {
        self.state_reads.get()
    }

    fn episode(&self) -> Result<&Episode> {
        self.episode
            .as_ref()
            .ok_or_else(|| Error::Contract("environment used before reset".into()))
    }

    pub fn reset(&mut self, context: RoundContext) -> Result<(GlobalState, Vec<Observation>)> {
        let observations = self.reset_local(context)?;
        Ok((self.state()?, observations))
    }

    /// Starts an episode and returns only the local observations.
    pub fn reset_local(&mut self, context: RoundContext) -> Result<Vec<Observation>> {
        let r = &context.realization;
        let n = r.clients();
        if n == 0 {
            return Err(Error::Shape("round needs at least one client".into()));
        }
        if r.subbands() != self.budget.subbands {
            return Err(Error::Shape(format!(
                "realization has {} sub-bands, budget has {}",
                r.subbands(),
                self.budget.subbands
            )));
        }
        if r.slots() < self.budget.slots_per_round {
            return Err(Error::Shape(format!(
                "realization covers {} slots, round needs {}",
                r.slots(),
                self.budget.slots_per_round
            )));
        }
        if context.deviations.len() != n {
            return Err(Error::Shape(format!(
                "{} deviation vectors for {n} clients",
                context.deviations.len()
            )));
        }
        let gram = DeviationGram::new(&context.deviations)?;
        let deviation_sq = gram.squared_norms();
        let round = context.round;
        self.episode = Some(Episode {
            context,
            gram,
            deviation_sq,
            remaining: vec![self.budget.payload_bits; n],
            accumulated: vec![0.0; n],
            completed: vec![false; n],
            completed_order: Vec::new(),
            slot: 0,
            trace: EpisodeTrace {
                round,
                ..Default::default()
            },
        });
        Ok(self.observations_unchecked())
    }

    fn observations_unchecked(&self) -> Vec<Observation> {
        let e = self.episode.as_ref().expect("episode");
        (0..e.remaining.len()).map(|n| self.build_observation(e, n)).collect()
    }

    fn build_observation(&self, e: &Episode, agent: usize) -> Observation {
        let r = &e.context.realization;
        let t_s = self.budget.slots_per_round;
        let channel_slot = e.slot.min(t_s - 1);
        Observation {
            agent,
            large_scale: r.large_scale().to_vec(),
            small_scale_power: r.small_scale_power(channel_slot, agent),
            remaining_bits: e.remaining[agent],
            slots_left: t_s - e.slot,
            deviation_sq: e.deviation_sq[agent],
            round: e.context.round,
        }
    }

    pub fn observation(&self, agent: usize) -> Result<Observation> {
        let e = self.episode()?;
        if agent >= e.remaining.len() {
            return Err(Error::Domain(format!("no agent {agent}")));
        }
        Ok(self.build_observation(e, agent))
    }

    pub fn observations(&self) -> Result<Vec<Observation>> {
        self.episode()?;
        Ok(self.observations_unchecked())
    }

    /// Full global state. Counted, so execution paths can prove they never
    /// look at it.
    pub fn state(&self) -> Result<GlobalState> {
        let e = self.episode()?;
        self.state_reads.set(self.state_reads.get() + 1);
        let r = &e.context.realization;
        let channel_slot = e.slot.min(self.budget.slots_per_round - 1);
        Ok(GlobalState {
            large_scale: r.large_scale().to_vec(),
            small_scale_power: (0..r.clients()).map(|n| r.small_scale_power(channel_slot, n)).collect(),
            remaining_bits: e.remaining.clone(),
            slots_left: self.budget.slots_per_round - e.slot,
            deviation_sq: e.deviation_sq.clone(),
            round: e.context.round,
        })
    }

    /// Completion masks; a masked agent may only pick the null power.
    pub fn masks(&self) -> Result<&[bool]> {
        Ok(&self.episode()?.completed)
    }

    pub fn slot(&self) -> Result<usize> {
        Ok(self.episode()?.slot)
    }

    pub fn is_done(&self) -> Result<bool> {
        Ok(self.episode()?.slot >= self.budget.slots_per_round)
    }

    pub fn deviation_gram(&self) -> Result<&DeviationGram> {
        Ok(&self.episode()?.gram)
    }

    pub fn realization(&self) -> Result<&ChannelRealization> {
        Ok(&self.episode()?.context.realization)
    }

    /// Clients whose upload completed, in index order.
    pub fn success_set(&self) -> Result<Vec<usize>> {
        let e = self.episode()?;
        Ok((0..e.completed.len()).filter(|&n| e.completed[n]).collect())
    }

    pub fn trace(&self) -> Result<&EpisodeTrace> {
        Ok(&self.episode()?.trace)
    }

    pub fn step(&mut self, joint_action: &[Action]) -> Result<StepOutcome> {
        let state_before = if self.record_trace { Some(self.state()?) } else { None };
        let local = self.advance(joint_action, state_before)?;
        Ok(StepOutcome {
            state: self.state()?,
            observations: local.observations,
            reward: local.reward,
            capacities: local.capacities,
            newly_completed: local.newly_completed,
            done: local.done,
        })
    }

    /// Decentralized step: never materializes the global state.
    pub fn step_local(&mut self, joint_action: &[Action]) -> Result<LocalStep> {
        self.advance(joint_action, None)
    }

    fn advance(&mut self, joint_action: &[Action], state_before: Option<GlobalState>) -> Result<LocalStep> {
        let budget = &self.budget;
        let record = self.record_trace;
        let observations_before = if record { self.observations()? } else { Vec::new() };
        let e = self
            .episode
            .as_mut()
            .ok_or_else(|| Error::Contract("environment used before reset".into()))?;
        let n = e.remaining.len();
        if e.slot >= budget.slots_per_round {
            return Err(Error::Contract("episode is already over".into()));
        }
        if joint_action.len() != n {
            return Err(Error::Contract(format!(
                "{} actions for {n} agents",
                joint_action.len()
            )));
        }
        for (agent, a) in joint_action.iter().enumerate() {
            if !is_legal(*a, e.completed[agent], budget) {
                return Err(Error::Contract(format!(
                    "illegal action {a:?} for agent {agent} (masked: {})",
                    e.completed[agent]
                )));
            }
        }
        let capacities = slot_capacities(joint_action, &e.context.realization, budget, e.slot)?;
        let required = budget.required_capacity_sum();
        let mut newly = Vec::new();
        for agent in 0..n {
            if e.completed[agent] {
                continue;
            }
            e.accumulated[agent] += capacities[agent];
            e.remaining[agent] = (e.remaining[agent] - capacities[agent] * budget.slot_duration_s).max(0.0);
            if e.accumulated[agent] >= required {
                e.completed[agent] = true;
                e.remaining[agent] = 0.0;
                newly.push(agent);
            }
        }
        let convergence = convergence_reward_slot(
            &newly,
            &e.completed_order,
            &e.gram,
            self.weights.completion,
            self.weights.deviation,
        )?;
        let reward = total_reward(convergence, &capacities, &self.weights);
        e.completed_order.extend_from_slice(&newly);
        let slot = e.slot;
        e.slot += 1;
        let done = e.slot >= budget.slots_per_round;
        if done {
            e.trace.success = (0..n).filter(|&m| e.completed[m]).collect();
        }
        if record {
            e.trace.slots.push(SlotRecord {
                slot,
                state: state_before,
                observations: observations_before,
                actions: joint_action.to_vec(),
                reward,
                capacities: capacities.clone(),
                completed: newly.clone(),
            });
        }
        Ok(LocalStep {
            observations: self.observations_unchecked(),
            reward,
            capacities,
            newly_completed: newly,
            done,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::upload_success;

    fn budget(slots: usize) -> LinkBudget {
        LinkBudget::new(1.0, 1.0, vec![3.0, 1.0, 0.0], 2, 1.0, slots, 3.0).unwrap()
    }

    fn context(slots: usize, clients: usize) -> RoundContext {
        let gains = (0..slots * clients * 2).map(|i| 1.0 + (i % 5) as f64).collect();
        RoundContext {
            realization: ChannelRealization::from_gains(gains, clients, 2).unwrap(),
            deviations: (0..clients)
                .map(|n| ParamVector::new(vec![n as f64, 1.0 - n as f64]))
                .collect(),
            round: 3,
        }
    }

    fn respect_masks(env: &FlEnv, wanted: &[Action]) -> Vec<Action> {
        let masks = env.masks().unwrap();
        wanted
            .iter()
            .zip(masks)
            .map(|(a, &m)| if m { Action::new(a.subband, 2) } else { *a })
            .collect()
    }

    fn weights() -> RewardWeights {
        RewardWeights { completion: 1.0, deviation: 0.1, convergence: 1.0, transmission: 0.01 }
    }

    #[test]
    fn reset_fills_payload() {
        let mut env = FlEnv::new(budget(4), weights()).unwrap();
        let (state, obs) = env.reset(context(4, 3)).unwrap();
        assert!(state.remaining_bits.iter().all(|&d| d == 3.0));
        assert_eq!(state.slots_left, 4);
        assert!(obs.iter().all(|o| o.small_scale_power.len() == 2));
        assert_eq!(GlobalState::from_observations(&obs).unwrap(), state);
        assert!(env.masks().unwrap().iter().all(|m| !m));
    }

    #[test]
    fn null_actions_change_nothing() {
        let mut env = FlEnv::new(budget(4), weights()).unwrap();
        env.reset(context(4, 3)).unwrap();
        let out = env.step(&[Action::new(0, 2); 3]).unwrap();
        assert!(out.capacities.iter().all(|&c| c == 0.0));
        assert!(out.state.remaining_bits.iter().all(|&d| d == 3.0));
        assert_eq!(out.reward.convergence, 0.0);
        assert_eq!(out.reward.total, 0.0);
    }

    #[test]
    fn completion_masks_and_matches_post_hoc_success() {
        let mut env = FlEnv::new(budget(5), weights()).unwrap();
        env.reset(context(5, 3)).unwrap();
        let mut done = false;
        let mut masked_since = [None; 3];
        while !done {
            let masks = env.masks().unwrap().to_vec();
            let slot = env.slot().unwrap();
            let actions: Vec<Action> = (0..3)
                .map(|n| if masks[n] { Action::new(0, 2) } else { Action::new(n % 2, 0) })
                .collect();
            let out = env.step(&actions).unwrap();
            for &m in &out.newly_completed {
                masked_since[m] = Some(slot);
            }
            for (m, since) in masked_since.iter().enumerate() {
                if let Some(t) = since {
                    assert!(env.masks().unwrap()[m], "mask cleared after slot {t}");
                }
            }
            done = out.done;
        }
        let trace = env.trace().unwrap();
        assert_eq!(trace.slots.len(), 5);
        for n in 0..3 {
            let ok = upload_success(&trace.capacity_series(n), 3.0, 1.0);
            assert_eq!(ok, trace.success.contains(&n));
        }
        assert!(env.step(&[Action::new(0, 2); 3]).is_err());
    }

    #[test]
    fn masked_agent_must_stay_silent() {
        let b = LinkBudget::new(1.0, 1.0, vec![3.0, 0.0], 1, 1.0, 3, 0.5).unwrap();
        let ctx = RoundContext {
            realization: ChannelRealization::from_gains(vec![10.0; 3], 1, 1).unwrap(),
            deviations: vec![ParamVector::new(vec![1.0])],
            round: 0,
        };
        let mut env = FlEnv::new(b, weights()).unwrap();
        env.reset(ctx).unwrap();
        let out = env.step(&[Action::new(0, 0)]).unwrap();
        assert_eq!(out.newly_completed, vec![0]);
        assert!(matches!(env.step(&[Action::new(0, 0)]), Err(Error::Contract(_))));
        assert!(env.step(&[Action::new(0, 1)]).is_ok());
    }

    #[test]
    fn local_path_never_reads_state() {
        let mut env = FlEnv::new(budget(4), weights()).unwrap().with_trace(false);
        env.reset_local(context(4, 2)).unwrap();
        for _ in 0..4 {
            let a = respect_masks(&env, &[Action::new(0, 0), Action::new(1, 1)]);
            env.step_local(&a).unwrap();
        }
        assert_eq!(env.state_reads(), 0);
    }

    #[test]
    fn action_index_round_trip() {
        for i in 0..12 {
            assert_eq!(Action::from_index(i, 4).index(4), i);
        }
        assert_eq!(Action::from_index(5, 4), Action::new(1, 1));
    }

    #[test]
    fn trace_writes_one_line_per_slot() {
        let mut env = FlEnv::new(budget(3), weights()).unwrap();
        env.reset(context(3, 2)).unwrap();
        for _ in 0..3 {
            let a = respect_masks(&env, &[Action::new(0, 1), Action::new(1, 1)]);
            env.step(&a).unwrap();
        }
        let mut buf = Vec::new();
        env.trace().unwrap().write_jsonl(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }
}
