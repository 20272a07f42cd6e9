//! Centralized training of decentralized agents: per-agent Q-networks,
//! a monotonic mixer, double-Q targets and uniform experience replay.

mod mixer;
mod replay;

pub use mixer::{Mixer, MixerCache, MixerDims, MixerGrads};
pub use replay::{Experience, ReplayMemory, ReplaySummary};

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuro::{Activation, NetGrads, NetParams, NetSpec, RmsProp, RmsPropConfig};
use crate::rng::SimRng;

/// Linear exploration schedule over episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_episodes: u64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self { start: 1.0, end: 0.001, anneal_episodes: 20_000 }
    }
}

pub fn anneal_epsilon(episode: u64, schedule: &EpsilonSchedule) -> f64 {
    if episode >= schedule.anneal_episodes {
        return schedule.end;
    }
    let frac = episode as f64 / schedule.anneal_episodes as f64;
    schedule.start + (schedule.end - schedule.start) * frac
}

/// Which agent networks pick the bootstrap action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetSelection {
    /// Target networks select and evaluate.
    Target,
    /// Online networks select, target networks evaluate.
    Online,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QmixConfig {
    pub gamma: f64,
    pub batch_size: usize,
    /// Environment steps between learning steps.
    pub learn_interval: u64,
    /// Learning steps between target syncs.
    pub target_update_interval: u64,
    pub replay_capacity: usize,
    pub epsilon: EpsilonSchedule,
    pub agent_learning_rate: f64,
    pub mixing_learning_rate: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
    pub agent_hidden: Vec<usize>,
    pub mixing_hidden: usize,
    pub hyper_hidden: usize,
    pub target_selection: TargetSelection,
    /// One network for all agents, fed a one-hot agent id.
    pub shared_agent_network: bool,
}

impl Default for QmixConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            batch_size: 512,
            learn_interval: 30,
            target_update_interval: 210,
            replay_capacity: 10_000,
            epsilon: EpsilonSchedule::default(),
            agent_learning_rate: 1e-5,
            mixing_learning_rate: 5e-4,
            rmsprop_decay: 0.99,
            rmsprop_epsilon: 1e-5,
            agent_hidden: vec![250, 120, 120],
            mixing_hidden: 32,
            hyper_hidden: 64,
            target_selection: TargetSelection::Target,
            shared_agent_network: false,
        }
    }
}

impl QmixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("qmix.gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("qmix.batch_size must be at least 1".into()));
        }
        if self.learn_interval == 0 || self.target_update_interval == 0 {
            return Err(Error::Config("qmix update intervals must be at least 1".into()));
        }
        if self.replay_capacity < self.batch_size {
            return Err(Error::Config("qmix.replay_capacity must be at least the batch size".into()));
        }
        let e = &self.epsilon;
        if !(0.0..=1.0).contains(&e.start) || !(0.0..=1.0).contains(&e.end) {
            return Err(Error::Config("qmix.epsilon bounds must lie in [0, 1]".into()));
        }
        for (name, v) in [
            ("qmix.agent_learning_rate", self.agent_learning_rate),
            ("qmix.mixing_learning_rate", self.mixing_learning_rate),
            ("qmix.rmsprop_epsilon", self.rmsprop_epsilon),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.rmsprop_decay) {
            return Err(Error::Config("qmix.rmsprop_decay must lie in [0, 1)".into()));
        }
        if self.agent_hidden.contains(&0) || self.mixing_hidden == 0 || self.hyper_hidden == 0 {
            return Err(Error::Config("qmix layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Problem sizes the learner is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QmixDims {
    pub agents: usize,
    pub observation_width: usize,
    pub state_width: usize,
    pub subbands: usize,
    pub power_levels: usize,
}

impl QmixDims {
    pub fn action_count(&self) -> usize {
        self.subbands * self.power_levels
    }

    /// Legal flat actions of an agent; a masked agent may only use the
    /// null power level.
    pub fn legal_actions(&self, masked: bool) -> Vec<bool> {
        (0..self.action_count())
            .map(|i| !masked || i % self.power_levels == self.power_levels - 1)
            .collect()
    }
}

/// Q-values with illegal actions at negative infinity.
pub fn masked_q_values(q: &[f64], legal: &[bool]) -> Vec<f64> {
    q.iter()
        .zip(legal)
        .map(|(&v, &ok)| if ok { v } else { f64::NEG_INFINITY })
        .collect()
}

/// Greedy legal action, lowest index on ties.
pub fn greedy_action(q: &[f64], legal: &[bool]) -> Result<usize> {
    if q.len() != legal.len() {
        return Err(Error::Shape("q-values and legality mask differ in length".into()));
    }
    let mut best: Option<usize> = None;
    for (i, (&v, &ok)) in q.iter().zip(legal).enumerate() {
        if !ok {
            continue;
        }
        if v.is_nan() {
            return Err(Error::NonFinite(format!("q-value of action {i} is NaN")));
        }
        if best.is_none_or(|b| v > q[b]) {
            best = Some(i);
        }
    }
    best.ok_or_else(|| Error::Contract("no legal action available".into()))
}

/// Epsilon-greedy choice among legal actions. Always consumes one uniform
/// draw, plus one more when exploring.
pub fn select_action(q: &[f64], epsilon: f64, legal: &[bool], rng: &mut SimRng) -> Result<usize> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Domain(format!("epsilon must lie in [0, 1], got {epsilon}")));
    }
    let candidates: Vec<usize> = (0..legal.len()).filter(|&i| legal[i]).collect();
    if candidates.is_empty() {
        return Err(Error::Contract("no legal action available".into()));
    }
    let u: f64 = rng.random();
    if u < epsilon {
        Ok(candidates[rng.random_range(0..candidates.len())])
    } else {
        greedy_action(q, legal)
    }
}

/// Agent networks plus mixer; used for both the online and target sets.
#[derive(Debug, Clone, PartialEq)]
pub struct QmixNets {
    pub agents: Vec<NetParams>,
    pub mixer: Mixer,
    shared: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QmixGrads {
    pub agents: Vec<NetGrads>,
    pub mixer: MixerGrads,
}

impl QmixGrads {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.agents.iter().flat_map(|g| g.to_flat()).collect();
        out.extend(self.mixer.to_flat());
        out
    }
}

impl QmixNets {
    pub fn init(dims: &QmixDims, config: &QmixConfig, rng: &mut SimRng) -> Result<Self> {
        let shared = config.shared_agent_network;
        let input = dims.observation_width + if shared { dims.agents } else { 0 };
        let spec = NetSpec::mlp(input, &config.agent_hidden, Activation::Relu, dims.action_count(), Activation::Linear);
        let count = if shared { 1 } else { dims.agents };
        let agents = (0..count)
            .map(|_| NetParams::init(&spec, rng))
            .collect::<Result<Vec<_>>>()?;
        let mixer = Mixer::init(
            MixerDims {
                agents: dims.agents,
                state_width: dims.state_width,
                hidden: config.mixing_hidden,
                hyper_hidden: config.hyper_hidden,
            },
            rng,
        )?;
        Ok(Self { agents, mixer, shared })
    }

    pub fn param_count(&self) -> usize {
        self.agents.iter().map(|a| a.param_count()).sum::<usize>() + self.mixer.param_count()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.agents.iter().flat_map(|a| a.to_flat()).collect();
        out.extend(self.mixer.to_flat());
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for a in &mut self.agents {
            let n = a.param_count();
            a.set_flat(&flat[offset..offset + n])?;
            offset += n;
        }
        self.mixer.set_flat(&flat[offset..])
    }

    pub fn copy_from(&mut self, other: &QmixNets) -> Result<()> {
        if self.agents.len() != other.agents.len() {
            return Err(Error::Shape("agent counts differ".into()));
        }
        for (dst, src) in self.agents.iter_mut().zip(&other.agents) {
            dst.copy_from(src)?;
        }
        self.mixer.copy_from(&other.mixer)
    }

    fn shared(&self) -> bool {
        self.shared
    }

    fn net(&self, agent: usize) -> &NetParams {
        if self.shared() {
            &self.agents[0]
        } else {
            &self.agents[agent]
        }
    }
}

/// Online and target networks with their optimizers.
#[derive(Debug, Clone)]
pub struct QmixLearner {
    config: QmixConfig,
    dims: QmixDims,
    pub online: QmixNets,
    pub target: QmixNets,
    agent_optimizers: Vec<RmsProp>,
    mixer_optimizers: Vec<RmsProp>,
    learn_steps: u64,
    env_steps: u64,
}

impl QmixLearner {
    pub fn new(dims: QmixDims, config: QmixConfig, rng: &mut SimRng) -> Result<Self> {
        config.validate()?;
        if dims.agents == 0 || dims.observation_width == 0 || dims.state_width == 0 || dims.action_count() == 0 {
            return Err(Error::Config("learner dimensions must be positive".into()));
        }
        let online = QmixNets::init(&dims, &config, rng)?;
        let target = online.clone();
        let rms = |lr: f64| RmsPropConfig {
            learning_rate: lr,
            decay: config.rmsprop_decay,
            epsilon: config.rmsprop_epsilon,
        };
        let agent_optimizers = online
            .agents
            .iter()
            .map(|a| RmsProp::new(rms(config.agent_learning_rate), a.param_count()))
            .collect();
        let mixer_optimizers = online
            .mixer
            .hypernets
            .iter()
            .map(|h| RmsProp::new(rms(config.mixing_learning_rate), h.param_count()))
            .collect();
        Ok(Self {
            config,
            dims,
            online,
            target,
            agent_optimizers,
            mixer_optimizers,
            learn_steps: 0,
            env_steps: 0,
        })
    }

    pub fn config(&self) -> &QmixConfig {
        &self.config
    }

    pub fn dims(&self) -> &QmixDims {
        &self.dims
    }

    pub fn learn_steps(&self) -> u64 {
        self.learn_steps
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    fn agent_input(&self, agent: usize, features: &[f64], out: &mut Vec<f64>) {
        out.extend_from_slice(features);
        if self.online.shared() {
            out.extend((0..self.dims.agents).map(|m| if m == agent { 1.0 } else { 0.0 }));
        }
    }

    fn check_features(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.dims.observation_width {
            return Err(Error::Shape(format!(
                "agent observation has {} features, expected {}",
                features.len(),
                self.dims.observation_width
            )));
        }
        Ok(())
    }

    fn input_matrix<'a, I>(&self, agent: usize, rows: I) -> Result<Array2<f64>>
    where
        I: Iterator<Item = &'a [f64]>,
    {
        let mut flat = Vec::new();
        let mut count = 0;
        for r in rows {
            self.check_features(r)?;
            self.agent_input(agent, r, &mut flat);
            count += 1;
        }
        let width = flat.len() / count.max(1);
        Array2::from_shape_vec((count, width), flat).map_err(|e| Error::Shape(e.to_string()))
    }

    fn state_matrix<'a, I>(&self, rows: I) -> Result<Array2<f64>>
    where
        I: Iterator<Item = &'a [f64]>,
    {
        let mut flat = Vec::new();
        let mut count = 0;
        for r in rows {
            if r.len() != self.dims.state_width {
                return Err(Error::Shape(format!(
                    "state has {} features, expected {}",
                    r.len(),
                    self.dims.state_width
                )));
            }
            flat.extend_from_slice(r);
            count += 1;
        }
        Array2::from_shape_vec((count, self.dims.state_width), flat).map_err(|e| Error::Shape(e.to_string()))
    }

    /// Online Q-values of one agent from its own observation features.
    pub fn agent_q(&self, agent: usize, features: &[f64]) -> Result<Vec<f64>> {
        self.agent_q_with(&self.online, agent, features)
    }

    pub fn agent_q_with(&self, nets: &QmixNets, agent: usize, features: &[f64]) -> Result<Vec<f64>> {
        if agent >= self.dims.agents {
            return Err(Error::Domain(format!("no agent {agent}")));
        }
        self.check_features(features)?;
        let mut input = Vec::with_capacity(features.len() + self.dims.agents);
        self.agent_input(agent, features, &mut input);
        nets.net(agent).predict_one(&input)
    }

    /// Decentralized action of one agent.
    pub fn act(
        &self,
        agent: usize,
        features: &[f64],
        masked: bool,
        epsilon: f64,
        rng: &mut SimRng,
    ) -> Result<usize> {
        let q = self.agent_q(agent, features)?;
        select_action(&q, epsilon, &self.dims.legal_actions(masked), rng)
    }

    /// `Q_tot` of the online networks for given per-agent values.
    pub fn mix(&self, q: &[f64], state: &[f64]) -> Result<f64> {
        let s = self.state_matrix(std::iter::once(state))?;
        let qm = ArrayView2::from_shape((1, q.len()), q).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.online.mixer.predict(s.view(), qm)?[0])
    }

    /// Bootstrapped targets `y = r + gamma * Q_tot'` with the target
    /// networks; terminal transitions give `y = r`.
    pub fn td_targets(&self, batch: &[&Experience]) -> Result<Vec<f64>> {
        let rows = batch.len();
        let a = self.dims.action_count();
        let mut next_q = Array2::zeros((rows, self.dims.agents));
        for n in 0..self.dims.agents {
            let x = self.input_matrix(n, batch.iter().map(|e| e.next_observations[n].as_slice()))?;
            let q_target = self.target.net(n).predict(x.view())?;
            let q_select = match self.config.target_selection {
                TargetSelection::Target => None,
                TargetSelection::Online => Some(self.online.net(n).predict(x.view())?),
            };
            for (r, e) in batch.iter().enumerate() {
                if e.terminal {
                    continue;
                }
                let legal = self.dims.legal_actions(e.next_masks[n]);
                let row_t: Vec<f64> = (0..a).map(|i| q_target[[r, i]]).collect();
                let choice = match &q_select {
                    None => greedy_action(&row_t, &legal)?,
                    Some(qs) => {
                        let row_s: Vec<f64> = (0..a).map(|i| qs[[r, i]]).collect();
                        greedy_action(&row_s, &legal)?
                    }
                };
                next_q[[r, n]] = row_t[choice];
            }
        }
        let s = self.state_matrix(batch.iter().map(|e| e.next_state.as_slice()))?;
        let q_tot = self.target.mixer.predict(s.view(), next_q.view())?;
        Ok(batch
            .iter()
            .zip(q_tot)
            .map(|(e, q)| if e.terminal { e.reward } else { e.reward + self.config.gamma * q })
            .collect())
    }

    /// Squared TD loss of the online networks against fixed targets and
    /// its gradient.
    pub fn loss_and_grads(&self, batch: &[&Experience], targets: &[f64]) -> Result<(f64, QmixGrads)> {
        self.loss_and_grads_with(&self.online, batch, targets)
    }

    pub fn loss_and_grads_with(
        &self,
        nets: &QmixNets,
        batch: &[&Experience],
        targets: &[f64],
    ) -> Result<(f64, QmixGrads)> {
        let rows = batch.len();
        if targets.len() != rows || rows == 0 {
            return Err(Error::Shape("one target per transition is required".into()));
        }
        for e in batch {
            e.validate(self.dims.agents)?;
        }
        let a = self.dims.action_count();
        let mut chosen = Array2::zeros((rows, self.dims.agents));
        let mut caches = Vec::with_capacity(self.dims.agents);
        for n in 0..self.dims.agents {
            let x = self.input_matrix(n, batch.iter().map(|e| e.observations[n].as_slice()))?;
            let (q, cache) = nets.net(n).forward(x.view())?;
            for (r, e) in batch.iter().enumerate() {
                let act = e.actions[n];
                if act >= a {
                    return Err(Error::Domain(format!("action {act} out of range")));
                }
                chosen[[r, n]] = q[[r, act]];
            }
            caches.push(cache);
        }
        let s = self.state_matrix(batch.iter().map(|e| e.state.as_slice()))?;
        let (q_tot, mcache) = nets.mixer.forward(s.view(), chosen.view())?;
        let residual: Vec<f64> = q_tot.iter().zip(targets).map(|(q, y)| q - y).collect();
        let loss: f64 = residual.iter().map(|r| r * r).sum();
        let upstream: Vec<f64> = residual.iter().map(|r| 2.0 * r).collect();
        let (mixer_grads, dq) = nets.mixer.backward(&mcache, &upstream)?;
        let mut agent_grads: Vec<NetGrads> = nets.agents.iter().map(NetGrads::zeros_like).collect();
        for (n, cache) in caches.iter().enumerate() {
            let mut up = Array2::zeros((rows, a));
            for (r, e) in batch.iter().enumerate() {
                up[[r, e.actions[n]]] = dq[[r, n]];
            }
            let (g, _) = nets.net(n).backward(cache, up.view())?;
            let slot = if nets.shared() { 0 } else { n };
            agent_grads[slot].add_assign(&g);
        }
        Ok((loss, QmixGrads { agents: agent_grads, mixer: mixer_grads }))
    }

    /// One learning step on a uniform batch. Returns `None` and changes
    /// nothing while the replay holds fewer transitions than a batch.
    pub fn train_step(&mut self, replay: &ReplayMemory, rng: &mut SimRng) -> Result<Option<f64>> {
        if replay.len() < self.config.batch_size {
            return Ok(None);
        }
        let batch = replay.sample(self.config.batch_size, rng)?;
        let targets = self.td_targets(&batch)?;
        let (loss, grads) = self.loss_and_grads(&batch, &targets)?;
        for ((net, g), opt) in self
            .online
            .agents
            .iter_mut()
            .zip(&grads.agents)
            .zip(&mut self.agent_optimizers)
        {
            opt.step(net, g)?;
        }
        self.online.mixer.apply(&grads.mixer, &mut self.mixer_optimizers)?;
        self.learn_steps += 1;
        if self.learn_steps.is_multiple_of(self.config.target_update_interval) {
            self.sync_targets()?;
        }
        Ok(Some(loss))
    }

    /// Counts one environment step and learns on the configured cadence.
    pub fn on_env_step(&mut self, replay: &ReplayMemory, rng: &mut SimRng) -> Result<Option<f64>> {
        self.env_steps += 1;
        if self.env_steps.is_multiple_of(self.config.learn_interval) {
            self.train_step(replay, rng)
        } else {
            Ok(None)
        }
    }

    pub fn sync_targets(&mut self) -> Result<()> {
        self.target.copy_from(&self.online)
    }

    pub fn checkpoint(&self) -> QmixCheckpoint {
        QmixCheckpoint {
            version: QMIX_CHECKPOINT_VERSION,
            config: self.config.clone(),
            dims: self.dims,
            online: self.online.to_flat(),
            target: self.target.to_flat(),
            agent_optimizers: self.agent_optimizers.clone(),
            mixer_optimizers: self.mixer_optimizers.clone(),
            learn_steps: self.learn_steps,
            env_steps: self.env_steps,
        }
    }

    pub fn restore(checkpoint: &QmixCheckpoint) -> Result<Self> {
        if checkpoint.version != QMIX_CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported learner checkpoint version {}",
                checkpoint.version
            )));
        }
        let mut learner = Self::new(checkpoint.dims, checkpoint.config.clone(), &mut crate::rng::seeded(0))?;
        learner.online.set_flat(&checkpoint.online)?;
        learner.target.set_flat(&checkpoint.target)?;
        if checkpoint.agent_optimizers.len() != learner.agent_optimizers.len()
            || checkpoint.mixer_optimizers.len() != learner.mixer_optimizers.len()
        {
            return Err(Error::Shape("optimizer state does not match the networks".into()));
        }
        for (dst, src) in learner
            .agent_optimizers
            .iter_mut()
            .chain(learner.mixer_optimizers.iter_mut())
            .zip(checkpoint.agent_optimizers.iter().chain(&checkpoint.mixer_optimizers))
        {
            dst.set_accumulator(src.accumulator().to_vec())?;
        }
        learner.learn_steps = checkpoint.learn_steps;
        learner.env_steps = checkpoint.env_steps;
        Ok(learner)
    }
}

pub const QMIX_CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QmixCheckpoint {
    pub version: u32,
    pub config: QmixConfig,
    pub dims: QmixDims,
    pub online: Vec<f64>,
    pub target: Vec<f64>,
    pub agent_optimizers: Vec<RmsProp>,
    pub mixer_optimizers: Vec<RmsProp>,
    pub learn_steps: u64,
    pub env_steps: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuro::{central_difference, max_relative_error};
    use crate::rng::seeded;

    fn dims() -> QmixDims {
        QmixDims { agents: 2, observation_width: 3, state_width: 4, subbands: 2, power_levels: 2 }
    }

    fn config() -> QmixConfig {
        QmixConfig {
            batch_size: 4,
            learn_interval: 1,
            target_update_interval: 5,
            replay_capacity: 16,
            agent_hidden: vec![5],
            mixing_hidden: 4,
            hyper_hidden: 3,
            agent_learning_rate: 1e-2,
            mixing_learning_rate: 1e-2,
            ..QmixConfig::default()
        }
    }

    fn random_experience(rng: &mut SimRng, terminal: bool) -> Experience {
        let mut v = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let obs = vec![v(3), v(3)];
        let next = vec![v(3), v(3)];
        let state = v(4);
        let next_state = v(4);
        Experience {
            state,
            observations: obs,
            actions: vec![rng.random_range(0..4), rng.random_range(0..4)],
            masks: vec![false, false],
            reward: rng.random_range(-1.0..1.0),
            next_state,
            next_observations: next,
            next_masks: vec![rng.random_bool(0.3), false],
            terminal,
        }
    }

    #[test]
    fn epsilon_schedule() {
        let s = EpsilonSchedule { start: 1.0, end: 0.001, anneal_episodes: 20_000 };
        assert_eq!(anneal_epsilon(0, &s), 1.0);
        assert_eq!(anneal_epsilon(20_000, &s), 0.001);
        assert_eq!(anneal_epsilon(50_000, &s), 0.001);
        assert!((anneal_epsilon(10_000, &s) - 0.5005).abs() < 1e-12);
    }

    #[test]
    fn greedy_tie_breaks_low_and_respects_mask() {
        let q = [0.0, 1.0, 3.0, 2.0, 1.0, 3.0];
        let legal = [true; 6];
        assert_eq!(greedy_action(&q, &legal).unwrap(), 2);
        let mut rng = seeded(0);
        assert_eq!(select_action(&q, 0.0, &legal, &mut rng).unwrap(), 2);
        let d = QmixDims { agents: 1, observation_width: 1, state_width: 1, subbands: 3, power_levels: 2 };
        let masked = d.legal_actions(true);
        assert_eq!(greedy_action(&q, &masked).unwrap(), 5);
        assert!(select_action(&q, 0.0, &[false; 6], &mut rng).is_err());
        let mq = masked_q_values(&q, &masked);
        assert_eq!(mq[0], f64::NEG_INFINITY);
    }

    #[test]
    fn single_agent_with_its_own_network_takes_plain_observations() {
        let d = QmixDims { agents: 1, ..dims() };
        let learner = QmixLearner::new(d, config(), &mut seeded(1)).unwrap();
        assert_eq!(learner.agent_q(0, &[0.1, 0.2, 0.3]).unwrap().len(), 4);
    }

    #[test]
    fn exploration_is_uniform_over_legal_actions() {
        let q = [5.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let legal = [true, false, true, true, true, true];
        let mut rng = seeded(4);
        let mut counts = [0usize; 6];
        let draws = 10_000;
        for _ in 0..draws {
            counts[select_action(&q, 1.0, &legal, &mut rng).unwrap()] += 1;
        }
        assert_eq!(counts[1], 0);
        let expected = draws as f64 / 5.0;
        let chi2: f64 = [0, 2, 3, 4, 5]
            .iter()
            .map(|&i| (counts[i] as f64 - expected).powi(2) / expected)
            .sum();
        // 4 degrees of freedom, 99.9% quantile
        assert!(chi2 < 18.47, "chi2 {chi2}");
    }

    #[test]
    fn agent_q_matches_substrate() {
        let l = QmixLearner::new(dims(), config(), &mut seeded(1)).unwrap();
        let f = [0.2, -0.4, 0.9];
        let q = l.agent_q(1, &f).unwrap();
        assert_eq!(q.len(), 4);
        assert_eq!(q, l.online.agents[1].predict_one(&f).unwrap());
        assert!(l.agent_q(0, &[1.0]).is_err());
    }

    #[test]
    fn terminal_and_myopic_targets_equal_reward() {
        let mut rng = seeded(2);
        let l = QmixLearner::new(dims(), config(), &mut seeded(1)).unwrap();
        let e = random_experience(&mut rng, true);
        assert_eq!(l.td_targets(&[&e]).unwrap(), vec![e.reward]);
        let myopic = QmixConfig { gamma: 0.0, ..config() };
        let l = QmixLearner::new(dims(), myopic, &mut seeded(1)).unwrap();
        let e = random_experience(&mut rng, false);
        assert_eq!(l.td_targets(&[&e]).unwrap(), vec![e.reward]);
    }

    #[test]
    fn hand_computed_target() {
        let mut rng = seeded(3);
        let l = QmixLearner::new(dims(), config(), &mut seeded(5)).unwrap();
        let mut e = random_experience(&mut rng, false);
        e.next_masks = vec![false, true];
        let q0 = l.agent_q_with(&l.target, 0, &e.next_observations[0]).unwrap();
        let q1 = l.agent_q_with(&l.target, 1, &e.next_observations[1]).unwrap();
        let a0 = (0..4).fold(0, |b, i| if q0[i] > q0[b] { i } else { b });
        // masked agent: only the null-power actions 1 and 3 are legal
        let a1 = if q1[3] > q1[1] { 3 } else { 1 };
        let s = Array2::from_shape_vec((1, 4), e.next_state.clone()).unwrap();
        let qv = Array2::from_shape_vec((1, 2), vec![q0[a0], q1[a1]]).unwrap();
        let tot = l.target.mixer.predict(s.view(), qv.view()).unwrap()[0];
        let y = l.td_targets(&[&e]).unwrap()[0];
        assert!((y - (e.reward + 0.95 * tot)).abs() < 1e-12);
    }

    #[test]
    fn zero_residual_gives_zero_loss_and_gradient() {
        let mut rng = seeded(6);
        let l = QmixLearner::new(dims(), config(), &mut seeded(1)).unwrap();
        let batch: Vec<Experience> = (0..4).map(|_| random_experience(&mut rng, false)).collect();
        let refs: Vec<&Experience> = batch.iter().collect();
        let (_, _) = l.loss_and_grads(&refs, &[0.0; 4]).unwrap();
        // targets equal to the current Q_tot
        let q_tot: Vec<f64> = batch
            .iter()
            .map(|e| {
                let q: Vec<f64> = (0..2).map(|n| l.agent_q(n, &e.observations[n]).unwrap()[e.actions[n]]).collect();
                l.mix(&q, &e.state).unwrap()
            })
            .collect();
        let (loss, grads) = l.loss_and_grads(&refs, &q_tot).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.to_flat().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        for shared in [false, true] {
            let mut rng = seeded(7);
            let cfg = QmixConfig { shared_agent_network: shared, ..config() };
            let l = QmixLearner::new(dims(), cfg, &mut seeded(2)).unwrap();
            let batch: Vec<Experience> = (0..5).map(|_| random_experience(&mut rng, false)).collect();
            let refs: Vec<&Experience> = batch.iter().collect();
            let targets: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (_, grads) = l.loss_and_grads(&refs, &targets).unwrap();
            let flat = l.online.to_flat();
            let numeric = central_difference(
                |x| {
                    let mut nets = l.online.clone();
                    nets.set_flat(x).unwrap();
                    l.loss_and_grads_with(&nets, &refs, &targets).unwrap().0
                },
                &flat,
                1e-6,
            );
            let err = max_relative_error(&grads.to_flat(), &numeric);
            assert!(err < 1e-4, "shared={shared}: {err}");
        }
    }

    #[test]
    fn overfits_a_frozen_batch() {
        let mut rng = seeded(8);
        let mut l = QmixLearner::new(dims(), config(), &mut seeded(3)).unwrap();
        let batch: Vec<Experience> = (0..4).map(|_| random_experience(&mut rng, true)).collect();
        let refs: Vec<&Experience> = batch.iter().collect();
        let targets: Vec<f64> = batch.iter().map(|e| e.reward).collect();
        let (first, _) = l.loss_and_grads(&refs, &targets).unwrap();
        for _ in 0..100 {
            let (_, g) = l.loss_and_grads(&refs, &targets).unwrap();
            for ((net, g), opt) in l.online.agents.iter_mut().zip(&g.agents).zip(&mut l.agent_optimizers) {
                opt.step(net, g).unwrap();
            }
            l.online.mixer.apply(&g.mixer, &mut l.mixer_optimizers).unwrap();
        }
        let (last, _) = l.loss_and_grads(&refs, &targets).unwrap();
        assert!(last < 0.1 * first, "{first} -> {last}");
    }

    #[test]
    fn targets_sync_on_schedule_only() {
        let mut rng = seeded(9);
        let mut l = QmixLearner::new(dims(), config(), &mut seeded(3)).unwrap();
        let mut replay = ReplayMemory::new(16).unwrap();
        for _ in 0..8 {
            replay.push(random_experience(&mut rng, false));
        }
        let frozen = l.target.to_flat();
        for _ in 0..4 {
            l.train_step(&replay, &mut rng).unwrap().unwrap();
            assert_eq!(l.target.to_flat(), frozen);
        }
        l.train_step(&replay, &mut rng).unwrap();
        assert_eq!(l.target.to_flat(), l.online.to_flat());
        let e = &random_experience(&mut rng, false);
        let s = Array2::from_shape_vec((1, 4), e.state.clone()).unwrap();
        let q = Array2::from_shape_vec((1, 2), vec![0.3, -0.7]).unwrap();
        assert_eq!(
            l.online.mixer.predict(s.view(), q.view()).unwrap(),
            l.target.mixer.predict(s.view(), q.view()).unwrap()
        );
    }

    #[test]
    fn insufficient_replay_is_a_no_op() {
        let mut rng = seeded(10);
        let mut l = QmixLearner::new(dims(), config(), &mut seeded(3)).unwrap();
        let mut replay = ReplayMemory::new(16).unwrap();
        replay.push(random_experience(&mut rng, false));
        let before = l.online.to_flat();
        assert_eq!(l.train_step(&replay, &mut rng).unwrap(), None);
        assert_eq!(l.online.to_flat(), before);
        assert_eq!(l.learn_steps(), 0);
    }

    #[test]
    fn checkpoint_round_trip_and_determinism() {
        let run = || {
            let mut rng = seeded(11);
            let mut l = QmixLearner::new(dims(), config(), &mut seeded(3)).unwrap();
            let mut replay = ReplayMemory::new(16).unwrap();
            for _ in 0..8 {
                replay.push(random_experience(&mut rng, false));
            }
            let losses: Vec<f64> = (0..6).map(|_| l.train_step(&replay, &mut rng).unwrap().unwrap()).collect();
            (l, losses)
        };
        let (a, la) = run();
        let (_, lb) = run();
        assert_eq!(la, lb);
        let ck = a.checkpoint();
        let json = serde_json::to_string(&ck).unwrap();
        let back: QmixCheckpoint = serde_json::from_str(&json).unwrap();
        let r = QmixLearner::restore(&back).unwrap();
        assert_eq!(r.online.to_flat(), a.online.to_flat());
        assert_eq!(r.target.to_flat(), a.target.to_flat());
        assert_eq!(r.learn_steps(), 6);
    }

    #[test]
    fn paper_scale_agent_layout() {
        let d = QmixDims { agents: 10, observation_width: 18, state_width: 72, subbands: 4, power_levels: 4 };
        let l = QmixLearner::new(d, QmixConfig { batch_size: 1, ..QmixConfig::default() }, &mut seeded(0)).unwrap();
        let widths: Vec<usize> = l.online.agents[0].spec().layers.iter().map(|x| x.width).collect();
        assert_eq!(widths, vec![250, 120, 120, 16]);
        assert_eq!(l.online.agents.len(), 10);
    }

    #[test]
    fn gamma_out_of_range_rejected() {
        let bad = QmixConfig { gamma: 1.5, ..config() };
        let err = bad.validate().unwrap_err().to_string();
        assert!(err.contains("gamma"));
    }
}
