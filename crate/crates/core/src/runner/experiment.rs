//! The nested loop: FL runs of `fl.rounds` rounds, `episodes_per_round`
//! episodes per round, `slots_per_round` slots per episode. The last
//! episode of a round decides which uploads enter the global update.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;

use super::checkpoint::{TrainingCheckpoint, CHECKPOINT_VERSION};
use super::config::{AutoOr, ExperimentConfig, RestartPolicy};
use super::metrics::{bitmap, write_csv, MetricsRow, RoundRow};
use crate::baselines::{BaselineKind, BaselinePolicy};
use crate::channel::{sample_client_positions, CellGeometry, ChannelConfig, LinkBudget, RoundChannel, TRACE_HEADER};
use crate::env::{
    episode_convergence_reward, Action, DeviationGram, FlEnv, Normalizer, RewardWeights, RoundContext,
};
use crate::error::{Error, Result};
use crate::fl::{
    aggregate, aggregated_gradient, gradient_deviation, local_train, make_synthetic_task,
    LocalTrainConfig, ParamVector, SyntheticTask,
};
use crate::qmix::{anneal_epsilon, Experience, QmixDims, QmixLearner, ReplayMemory};
use crate::rng::{derive_seed, stream, SimRng};

/// Everything fixed for an experiment: link, channel model, dataset and
/// its partition.
pub struct Setup {
    pub config: ExperimentConfig,
    pub budget: LinkBudget,
    pub channel: ChannelConfig,
    pub task: SyntheticTask,
    pub local: LocalTrainConfig,
    pub dims: QmixDims,
}

impl Setup {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let budget = config.link_budget()?;
        let task = make_synthetic_task(
            &config.synthetic(),
            config.model(),
            config.channel.clients,
            config.fl.dirichlet_alpha,
            derive_seed(config.run.seed, "task", &[]),
        )?;
        let local = config.local_train();
        for n in 0..config.channel.clients {
            let size = task.partition.indices[n].len();
            if size < local.batch_size {
                return Err(Error::Config(format!(
                    "fl.batch_size {} exceeds the {size} samples of client {n}",
                    local.batch_size
                )));
            }
        }
        let (n, c) = (config.channel.clients, config.channel.subbands);
        let dims = QmixDims {
            agents: n,
            observation_width: Normalizer::observation_width(n, c),
            state_width: Normalizer::state_width(n, c),
            subbands: c,
            power_levels: budget.power_level_count(),
        };
        Ok(Self {
            config: config.clone(),
            budget,
            channel: config.channel_config(),
            task,
            local,
            dims,
        })
    }

    fn normalizer(&self) -> Result<Normalizer> {
        Normalizer::new(
            self.config.env.normalization,
            self.budget.payload_bits,
            self.budget.slots_per_round,
            self.config.fl.rounds,
        )
    }

    /// Resolves `auto` weights from the first round's deviations.
    pub fn resolve_weights(&self, first_deviations_sq: &[f64]) -> RewardWeights {
        let e = &self.config.env;
        let n = first_deviations_sq.len() as f64;
        let max_sq = first_deviations_sq.iter().cloned().fold(0.0, f64::max);
        let deviation = match e.deviation_weight {
            AutoOr::Value(v) => v,
            AutoOr::Auto if max_sq > 0.0 => e.completion_weight / (n * max_sq),
            AutoOr::Auto => 0.0,
        };
        let transmission = match e.transmission_weight {
            AutoOr::Value(v) => v,
            AutoOr::Auto => e.completion_weight * self.budget.slot_duration_s / self.budget.payload_bits,
        };
        RewardWeights {
            completion: e.completion_weight,
            deviation,
            convergence: e.convergence_weight,
            transmission,
        }
    }
}

/// State of one FL run.
struct FlSession {
    run: u64,
    round: usize,
    w: ParamVector,
    previous: Option<ParamVector>,
    geometry: CellGeometry,
}

/// Per-round inputs shared by all episodes of the round.
struct RoundInputs {
    gradients: Vec<ParamVector>,
    deviations: Vec<ParamVector>,
    deviations_sq: Vec<f64>,
    channel: RoundChannel,
    zero_reference: bool,
}

impl FlSession {
    fn start(setup: &Setup, phase_seed: u64, run: u64) -> Result<Self> {
        let geometry_index = match setup.config.run.restart {
            RestartPolicy::ModelAndChannel => run,
            RestartPolicy::ModelOnly => 0,
        };
        let geometry = sample_client_positions(
            derive_seed(phase_seed, "geometry", &[geometry_index]),
            &setup.config.geometry(),
        )?;
        let w = setup.task.task.initial_params(&mut stream(phase_seed, "init", &[run]));
        Ok(Self { run, round: 0, w, previous: None, geometry })
    }

    fn prepare_round(&self, setup: &Setup, phase_seed: u64) -> Result<RoundInputs> {
        let n = setup.config.channel.clients;
        let (run, round) = (self.run, self.round as u64);
        let mut gradients = Vec::with_capacity(n);
        for client in 0..n {
            let mut rng = stream(phase_seed, "local", &[run, round, client as u64]);
            gradients.push(local_train(&self.w, &setup.task.task, client, &setup.local, &mut rng)?);
        }
        let zero = ParamVector::zeros(self.w.dim());
        let reference = self.previous.as_ref().unwrap_or(&zero);
        let mut deviations = Vec::with_capacity(n);
        let mut deviations_sq = Vec::with_capacity(n);
        for g in &gradients {
            let (d, sq) = gradient_deviation(reference, g)?;
            deviations.push(d);
            deviations_sq.push(sq);
        }
        let channel = RoundChannel::sample(
            &self.geometry,
            &setup.channel,
            &setup.budget,
            &mut stream(phase_seed, "round-channel", &[run, round]),
        )?;
        Ok(RoundInputs {
            gradients,
            deviations,
            deviations_sq,
            channel,
            zero_reference: self.previous.is_none(),
        })
    }

    /// Global update with the round's success set. An empty set keeps both
    /// the model and the previous aggregate.
    fn finish_round(&mut self, setup: &Setup, inputs: &RoundInputs, success: &[usize]) -> Result<()> {
        let eta_g = setup.config.fl.global_learning_rate;
        self.w = aggregate(&self.w, &inputs.gradients, success, eta_g)?;
        if let Some(g) = aggregated_gradient(&inputs.gradients, success)? {
            self.previous = Some(g);
        }
        self.round += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
struct EpisodeStats {
    total: f64,
    convergence: f64,
    transmission: f64,
    success: Vec<usize>,
    losses: Vec<f64>,
}

/// How joint actions are produced.
enum Driver<'a> {
    Train {
        learner: &'a mut QmixLearner,
        replay: &'a mut ReplayMemory,
        explore: SimRng,
        learn: SimRng,
    },
    Greedy {
        learner: &'a QmixLearner,
        rng: SimRng,
    },
    Baseline(BaselinePolicy),
    Perfect,
}

fn features(normalizer: &Normalizer, observations: &[crate::env::Observation]) -> Result<Vec<Vec<f64>>> {
    observations.iter().map(|o| normalizer.observation_features(o)).collect()
}

fn decode(indices: &[usize], power_levels: usize) -> Vec<Action> {
    indices.iter().map(|&i| Action::from_index(i, power_levels)).collect()
}

impl Driver<'_> {
    fn episode(
        &mut self,
        env: &mut FlEnv,
        context: RoundContext,
        normalizer: &Normalizer,
        epsilon: f64,
    ) -> Result<EpisodeStats> {
        let p = env.budget().power_level_count();
        let mut stats = EpisodeStats::default();
        match self {
            Driver::Train { learner, replay, explore, learn } => {
                let (state, observations) = env.reset(context)?;
                let mut state = normalizer.state_features(&state)?;
                let mut obs = features(normalizer, &observations)?;
                loop {
                    let masks = env.masks()?.to_vec();
                    let mut actions = Vec::with_capacity(obs.len());
                    for (agent, f) in obs.iter().enumerate() {
                        actions.push(learner.act(agent, f, masks[agent], epsilon, explore)?);
                    }
                    let out = env.step(&decode(&actions, p))?;
                    let next_state = normalizer.state_features(&out.state)?;
                    let next_obs = features(normalizer, &out.observations)?;
                    replay.push(Experience {
                        state,
                        observations: obs,
                        actions,
                        masks,
                        reward: out.reward.total,
                        next_state: next_state.clone(),
                        next_observations: next_obs.clone(),
                        next_masks: env.masks()?.to_vec(),
                        terminal: out.done,
                    });
                    if let Some(loss) = learner.on_env_step(replay, learn)? {
                        stats.losses.push(loss);
                    }
                    stats.add(&out.reward);
                    state = next_state;
                    obs = next_obs;
                    if out.done {
                        break;
                    }
                }
            }
            Driver::Greedy { learner, rng } => {
                let observations = env.reset_local(context)?;
                let mut obs = features(normalizer, &observations)?;
                loop {
                    let masks = env.masks()?.to_vec();
                    let mut actions = Vec::with_capacity(obs.len());
                    for (agent, f) in obs.iter().enumerate() {
                        actions.push(learner.act(agent, f, masks[agent], 0.0, rng)?);
                    }
                    let out = env.step_local(&decode(&actions, p))?;
                    stats.add(&out.reward);
                    obs = features(normalizer, &out.observations)?;
                    if out.done {
                        break;
                    }
                }
            }
            Driver::Baseline(policy) => {
                env.reset_local(context)?;
                loop {
                    let slot = env.slot()?;
                    let masks = env.masks()?.to_vec();
                    let actions = policy.joint_action(env.realization()?, slot, &masks, env.budget())?;
                    let out = env.step_local(&actions)?;
                    stats.add(&out.reward);
                    if out.done {
                        break;
                    }
                }
            }
            Driver::Perfect => {
                let n = context.deviations.len();
                let all: Vec<usize> = (0..n).collect();
                let gram = DeviationGram::new(&context.deviations)?;
                let w = env.weights();
                stats.convergence = episode_convergence_reward(&all, &gram, w.completion, w.deviation);
                stats.total = w.convergence * stats.convergence;
                stats.success = all;
                return Ok(stats);
            }
        }
        stats.success = env.success_set()?;
        Ok(stats)
    }
}

impl EpisodeStats {
    fn add(&mut self, r: &crate::env::RewardBreakdown) {
        self.total += r.total;
        self.convergence += r.convergence;
        self.transmission += r.transmission;
    }
}

/// What a run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_id: String,
    pub rows: Vec<MetricsRow>,
    pub rounds: Vec<RoundRow>,
    pub weights: RewardWeights,
    /// Accuracy after the last completed round.
    pub final_accuracy: f64,
    /// Mean per-episode upload success rate over the last FL run.
    pub final_run_success_rate: f64,
    pub env_steps: u64,
    /// Global-state reads made by the environment during the run.
    pub state_reads: usize,
    pub checkpoint: Option<TrainingCheckpoint>,
}

impl RunOutcome {
    fn new(run_id: String, rows: Vec<MetricsRow>, rounds: Vec<RoundRow>, weights: RewardWeights) -> Self {
        let final_accuracy = rounds.last().map(|r| r.accuracy).unwrap_or(f64::NAN);
        let last_run = rows.last().map(|r| r.run).unwrap_or(0);
        let last: Vec<f64> = rows.iter().filter(|r| r.run == last_run).map(|r| r.success_rate).collect();
        let final_run_success_rate = last.iter().sum::<f64>() / last.len().max(1) as f64;
        Self {
            run_id,
            rows,
            rounds,
            weights,
            final_accuracy,
            final_run_success_rate,
            env_steps: 0,
            state_reads: 0,
            checkpoint: None,
        }
    }

    /// Mean success rate over all episodes.
    pub fn mean_success_rate(&self) -> f64 {
        self.rows.iter().map(|r| r.success_rate).sum::<f64>() / self.rows.len().max(1) as f64
    }

    /// Cumulative episode reward series.
    pub fn rewards(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.reward_total).collect()
    }
}

/// Loop parameters that differ between training, evaluation and baselines.
struct LoopPlan {
    phase_seed: u64,
    episodes: u64,
    episodes_per_round: u64,
    weights: Option<RewardWeights>,
    trace_dir: Option<PathBuf>,
}

struct LoopResult {
    rows: Vec<MetricsRow>,
    rounds: Vec<RoundRow>,
    weights: RewardWeights,
    state_reads: usize,
}

/// Called after every episode with the number completed so far.
type EpisodeHook<'h> = dyn for<'d> FnMut(u64, &Driver<'d>, &RewardWeights, &Normalizer) -> Result<()> + 'h;

fn run_loop(
    setup: &Setup,
    plan: &LoopPlan,
    driver: &mut Driver<'_>,
    normalizer: &mut Normalizer,
    freeze_normalizer: bool,
    hook: &mut EpisodeHook<'_>,
) -> Result<LoopResult> {
    let config = &setup.config;
    let clients = config.channel.clients;
    let placeholder = RewardWeights { completion: 0.0, deviation: 0.0, convergence: 0.0, transmission: 0.0 };
    let mut env = FlEnv::new(setup.budget.clone(), plan.weights.unwrap_or(placeholder))?
        .with_trace(plan.trace_dir.is_some());
    let mut weights = plan.weights;
    let mut traces = match &plan.trace_dir {
        Some(dir) => {
            let mut channel = csv::Writer::from_path(dir.join("channel_trace.csv"))?;
            channel.write_record(TRACE_HEADER)?;
            Some((BufWriter::new(File::create(dir.join("episode_trace.jsonl"))?), channel))
        }
        None => None,
    };
    let mut rows = Vec::with_capacity(plan.episodes as usize);
    let mut rounds = Vec::new();
    let mut episode = 0u64;
    let mut run = 0u64;
    while episode < plan.episodes {
        let mut session = FlSession::start(setup, plan.phase_seed, run)?;
        while session.round < config.fl.rounds && episode < plan.episodes {
            let inputs = session.prepare_round(setup, plan.phase_seed)?;
            let w = *weights.get_or_insert_with(|| setup.resolve_weights(&inputs.deviations_sq));
            env.set_weights(w);
            if !freeze_normalizer {
                normalizer.observe_deviations(&inputs.deviations_sq);
            }
            let mut last = EpisodeStats::default();
            let mut k = 0;
            while k < plan.episodes_per_round && episode < plan.episodes {
                let epsilon = anneal_epsilon(episode, &config.qmix.epsilon);
                let realization = inputs.channel.draw_slots(
                    setup.budget.slots_per_round,
                    &mut stream(plan.phase_seed, "slots", &[run, session.round as u64, k]),
                );
                let context = RoundContext {
                    realization,
                    deviations: inputs.deviations.clone(),
                    round: session.round,
                };
                let stats = driver.episode(&mut env, context, normalizer, epsilon)?;
                let is_last = k + 1 == plan.episodes_per_round || episode + 1 == plan.episodes;
                let (learn_steps, epsilon) = match driver {
                    Driver::Train { learner, .. } => (learner.learn_steps(), epsilon),
                    Driver::Greedy { learner, .. } => (learner.learn_steps(), 0.0),
                    _ => (0, 0.0),
                };
                let loss_mean = if stats.losses.is_empty() {
                    None
                } else {
                    Some(stats.losses.iter().sum::<f64>() / stats.losses.len() as f64)
                };
                rows.push(MetricsRow {
                    episode,
                    run,
                    round: session.round,
                    episode_in_round: k,
                    reward_total: stats.total,
                    reward_convergence: stats.convergence,
                    reward_transmission: stats.transmission,
                    loss_mean,
                    learn_steps,
                    epsilon,
                    success_rate: stats.success.len() as f64 / clients as f64,
                    success_count: stats.success.len(),
                    accuracy: None,
                    test_loss: None,
                });
                if is_last {
                    if let Some((jsonl, channel)) = traces.as_mut() {
                        if let Ok(trace) = env.trace() {
                            trace.write_jsonl(&mut *jsonl)?;
                        }
                        if !matches!(driver, Driver::Perfect) {
                            // rounds are numbered across FL runs in the trace
                            let global_round = run as usize * config.fl.rounds + session.round;
                            env.realization()?.write_trace_csv(global_round, channel)?;
                        }
                    }
                }
                episode += 1;
                k += 1;
                hook(episode, driver, &w, normalizer)?;
                last = stats;
            }
            let round = session.round;
            session.finish_round(setup, &inputs, &last.success)?;
            let eval = setup.task.task.evaluate(&session.w, &setup.task.test)?;
            let row = rows.last_mut().expect("a round has at least one episode");
            row.accuracy = Some(eval.accuracy);
            row.test_loss = Some(eval.loss);
            row.check_finite()?;
            rounds.push(RoundRow {
                run,
                round,
                accuracy: eval.accuracy,
                loss: eval.loss,
                success_count: last.success.len(),
                success_bitmap: bitmap(&last.success, clients),
                wasted: last.success.is_empty(),
                zero_reference: inputs.zero_reference,
            });
        }
        run += 1;
    }
    for r in &rows {
        r.check_finite()?;
    }
    if let Some((mut jsonl, mut channel)) = traces {
        jsonl.flush()?;
        channel.flush()?;
    }
    Ok(LoopResult {
        rows,
        rounds,
        weights: weights.unwrap_or(placeholder),
        state_reads: env.state_reads(),
    })
}

fn write_outputs(dir: &Path, config: &ExperimentConfig, result: &LoopResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_csv(&dir.join("metrics.csv"), &result.rows)?;
    write_csv(&dir.join("rounds.csv"), &result.rounds)?;
    fs::write(dir.join("effective_config.toml"), config.to_toml_string()?)?;
    Ok(())
}

fn trace_dir(config: &ExperimentConfig, out: Option<&Path>) -> Result<Option<PathBuf>> {
    match out {
        Some(dir) if config.run.dump_traces => {
            fs::create_dir_all(dir)?;
            Ok(Some(dir.to_path_buf()))
        }
        _ => Ok(None),
    }
}

/// Centralized training. Writes `metrics.csv`, `rounds.csv`,
/// `effective_config.toml` and `checkpoint.json` into `out` when given,
/// plus `checkpoint-NNNNNN.json` every `run.checkpoint_every` episodes.
/// On a mid-run error the learner is saved to `checkpoint-error.json`
/// before the error is returned.
pub fn run_training(config: &ExperimentConfig, out: Option<&Path>) -> Result<RunOutcome> {
    let setup = Setup::new(config)?;
    let run_id = config.run_id()?;
    let seed = config.run.seed;
    let mut learner = QmixLearner::new(setup.dims, config.qmix.clone(), &mut stream(seed, "learner", &[]))?;
    let mut replay = ReplayMemory::new(config.qmix.replay_capacity)?;
    let mut normalizer = setup.normalizer()?;
    let plan = LoopPlan {
        phase_seed: seed,
        episodes: config.run.episodes,
        episodes_per_round: config.run.episodes_per_round,
        weights: None,
        trace_dir: trace_dir(config, out)?,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    let snapshot = |learner: &QmixLearner,
                    replay: &ReplayMemory,
                    episodes: u64,
                    weights: &RewardWeights,
                    normalizer: &Normalizer| TrainingCheckpoint {
        version: CHECKPOINT_VERSION,
        run_id: run_id.clone(),
        config: config.clone(),
        episodes_completed: episodes,
        epsilon: anneal_epsilon(episodes, &config.qmix.epsilon),
        weights: *weights,
        normalizer: normalizer.clone(),
        learner: learner.checkpoint(),
        replay: replay.summary(),
    };
    let every = config.run.checkpoint_every;
    let mut progress: Option<(u64, RewardWeights)> = None;
    let result = {
        let mut hook = |episodes: u64, driver: &Driver<'_>, w: &RewardWeights, n: &Normalizer| -> Result<()> {
            progress = Some((episodes, *w));
            if let (Some(dir), Driver::Train { learner, replay, .. }) = (out, driver) {
                if every > 0 && episodes.is_multiple_of(every) && episodes < config.run.episodes {
                    snapshot(learner, replay, episodes, w, n)
                        .save(&dir.join(format!("checkpoint-{episodes:06}.json")))?;
                }
            }
            Ok(())
        };
        let mut driver = Driver::Train {
            learner: &mut learner,
            replay: &mut replay,
            explore: stream(seed, "explore", &[]),
            learn: stream(seed, "replay", &[]),
        };
        run_loop(&setup, &plan, &mut driver, &mut normalizer, false, &mut hook)
    };
    let result = match result {
        Ok(r) => r,
        Err(e) => {
            if let (Some(dir), Some((episodes, w))) = (out, progress) {
                // best effort: the original error is what the caller needs
                let _ = snapshot(&learner, &replay, episodes, &w, &normalizer).save(&dir.join("checkpoint-error.json"));
            }
            return Err(e);
        }
    };
    let checkpoint = snapshot(&learner, &replay, config.run.episodes, &result.weights, &normalizer);
    if let Some(dir) = out {
        write_outputs(dir, config, &result)?;
        checkpoint.save(&dir.join("checkpoint.json"))?;
    }
    info!("training {run_id}: {} episodes, {} learning steps", result.rows.len(), learner.learn_steps());
    let mut outcome = RunOutcome::new(run_id, result.rows, result.rounds, result.weights);
    outcome.env_steps = config.run.episodes * setup.budget.slots_per_round as u64;
    outcome.state_reads = result.state_reads;
    outcome.checkpoint = Some(checkpoint);
    Ok(outcome)
}

/// Decentralized execution from a checkpoint: greedy actions from local
/// observations only, no learning, fresh channel and model seeds, one
/// episode per round.
pub fn run_evaluation(
    config: &ExperimentConfig,
    checkpoint: &TrainingCheckpoint,
    out: Option<&Path>,
) -> Result<RunOutcome> {
    checkpoint.check_compatible(config)?;
    let setup = Setup::new(config)?;
    let learner = QmixLearner::restore(&checkpoint.learner)?;
    if *learner.dims() != setup.dims {
        return Err(Error::Config("checkpoint network dimensions do not match the config".into()));
    }
    let mut normalizer = checkpoint.normalizer.clone();
    let seed = derive_seed(config.run.seed, "evaluation", &[]);
    let plan = LoopPlan {
        phase_seed: seed,
        episodes: (config.run.eval_runs * config.fl.rounds) as u64,
        episodes_per_round: 1,
        weights: Some(checkpoint.weights),
        trace_dir: trace_dir(config, out)?,
    };
    let mut driver = Driver::Greedy { learner: &learner, rng: stream(seed, "greedy", &[]) };
    let result = run_loop(&setup, &plan, &mut driver, &mut normalizer, true, &mut |_, _, _, _| Ok(()))?;
    if let Some(dir) = out {
        write_outputs(dir, config, &result)?;
    }
    let mut outcome = RunOutcome::new(config.run_id()?, result.rows, result.rounds, result.weights);
    outcome.env_steps = plan.episodes * setup.budget.slots_per_round as u64;
    outcome.state_reads = result.state_reads;
    Ok(outcome)
}

/// The training loop with a heuristic in place of the agents.
pub fn run_baseline(config: &ExperimentConfig, kind: BaselineKind, out: Option<&Path>) -> Result<RunOutcome> {
    let setup = Setup::new(config)?;
    let seed = config.run.seed;
    let mut driver = match kind {
        BaselineKind::Perfect => Driver::Perfect,
        _ => Driver::Baseline(BaselinePolicy::new(
            kind,
            config.baseline.search_scope,
            config.baseline.search_cap,
            stream(seed, "baseline", &[]),
        )),
    };
    let mut normalizer = setup.normalizer()?;
    let plan = LoopPlan {
        phase_seed: seed,
        episodes: config.run.episodes,
        episodes_per_round: config.run.episodes_per_round,
        weights: None,
        trace_dir: trace_dir(config, out)?,
    };
    let result = run_loop(&setup, &plan, &mut driver, &mut normalizer, false, &mut |_, _, _, _| Ok(()))?;
    if let Some(dir) = out {
        write_outputs(dir, config, &result)?;
    }
    let mut outcome = RunOutcome::new(config.run_id()?, result.rows, result.rounds, result.weights);
    if kind != BaselineKind::Perfect {
        outcome.env_steps = config.run.episodes * setup.budget.slots_per_round as u64;
    }
    outcome.state_reads = result.state_reads;
    Ok(outcome)
}
