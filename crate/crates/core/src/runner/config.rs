//! Experiment configuration. A TOML file is merged key by key over the
//! defaults of its profile, so an empty file is a valid desk-scale config.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{SearchScope, DEFAULT_SEARCH_CAP};
use crate::channel::{dbm_to_watts, noise_power_watts, ChannelConfig, GeometryConfig, LinkBudget};
use crate::env::NormalizationConfig;
use crate::error::{Error, Result};
use crate::fl::{LocalTrainConfig, ModelKind, QuadraticConfig, SyntheticConfig};
use crate::qmix::{EpsilonSchedule, QmixConfig, TargetSelection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    Desk,
    Paper,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        })
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!("profile must be desk or paper, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum AutoKeyword {
    Auto,
}

/// A weight that is either given or calibrated at the first round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AutoOr {
    #[serde(with = "auto_keyword")]
    Auto,
    Value(f64),
}

mod auto_keyword {
    use super::AutoKeyword;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str("auto")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<(), D::Error> {
        AutoKeyword::deserialize(d).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSection {
    pub clients: usize,
    pub subbands: usize,
    /// Active transmit levels in dBm, strictly decreasing. The null level
    /// is appended automatically.
    pub power_levels_dbm: Vec<f64>,
    pub bandwidth_hz: f64,
    pub noise_figure_db: f64,
    pub slot_duration_s: f64,
    pub slots_per_round: usize,
    pub cell_side_m: f64,
    pub cluster_count: usize,
    pub mean_cluster_delay_s: f64,
    pub shadowing_std_db: f64,
    pub carrier_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlSection {
    pub rounds: usize,
    pub local_epochs: usize,
    pub local_learning_rate: f64,
    pub global_learning_rate: f64,
    pub batch_size: usize,
    /// Upload size `S` in bits.
    pub payload_bits: f64,
    pub dirichlet_alpha: f64,
    pub classes: usize,
    pub feature_dim: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub class_separation: f64,
    pub noise_std: f64,
    /// Width of the hidden layer; 0 selects softmax regression.
    pub hidden_units: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    pub completion_weight: f64,
    pub deviation_weight: AutoOr,
    pub convergence_weight: f64,
    pub transmission_weight: AutoOr,
    pub normalization: NormalizationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    pub search_scope: SearchScope,
    pub search_cap: u64,
}

/// What an FL restart resets. Replay memory always persists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RestartPolicy {
    /// Fresh initial model and fresh client positions.
    ModelAndChannel,
    /// Fresh initial model; client positions are kept.
    ModelOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Empty derives an identifier from the effective config.
    pub id: String,
    pub seed: u64,
    pub episodes: u64,
    pub episodes_per_round: u64,
    pub restart: RestartPolicy,
    /// Episodes between intermediate checkpoints; 0 keeps only the final one.
    pub checkpoint_every: u64,
    pub output_dir: String,
    /// FL runs of `fl.rounds` rounds played by `eval`.
    pub eval_runs: usize,
    /// Write the slot trace and channel gains of every round's last episode.
    pub dump_traces: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheorySection {
    pub clients: usize,
    pub dim: usize,
    pub samples_per_client: usize,
    pub rows_per_sample: usize,
    pub heterogeneity: f64,
    pub noise_std: f64,
    pub epochs: Vec<usize>,
    pub batch_size: usize,
    /// Local rate as a fraction of the largest admissible `1/(sqrt(8) E L)`.
    pub rate_fraction: f64,
    pub global_learning_rate: f64,
    pub trials: usize,
    /// Random `(task, w)` pairs for the identity check.
    pub identity_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub channel: ChannelSection,
    pub fl: FlSection,
    pub env: EnvSection,
    pub qmix: QmixConfig,
    pub baseline: BaselineSection,
    pub run: RunSection,
    pub theory: TheorySection,
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        Self {
            profile: Profile::Desk,
            channel: ChannelSection {
                clients: 4,
                subbands: 2,
                power_levels_dbm: vec![23.0, 10.0, 5.0],
                bandwidth_hz: 5e6,
                noise_figure_db: 5.0,
                slot_duration_s: 2e-3,
                slots_per_round: 20,
                cell_side_m: 100.0,
                cluster_count: 21,
                mean_cluster_delay_s: 100e-9,
                shadowing_std_db: 8.0,
                carrier_hz: 2.5e9,
            },
            fl: FlSection {
                rounds: 30,
                local_epochs: 3,
                local_learning_rate: 0.01,
                global_learning_rate: 1.0,
                batch_size: 50,
                payload_bits: 1_200_000.0,
                dirichlet_alpha: 0.5,
                classes: 4,
                feature_dim: 10,
                train_samples: 2000,
                test_samples: 1000,
                class_separation: 0.5,
                noise_std: 1.0,
                hidden_units: 0,
            },
            env: EnvSection {
                completion_weight: 1.0,
                deviation_weight: AutoOr::Auto,
                convergence_weight: 1.0,
                transmission_weight: AutoOr::Auto,
                normalization: NormalizationConfig::default(),
            },
            qmix: QmixConfig {
                batch_size: 64,
                learn_interval: 4,
                target_update_interval: 200,
                replay_capacity: 10_000,
                epsilon: EpsilonSchedule { start: 1.0, end: 0.001, anneal_episodes: 1500 },
                agent_learning_rate: 5e-4,
                mixing_learning_rate: 5e-4,
                agent_hidden: vec![64, 32],
                mixing_hidden: 32,
                hyper_hidden: 64,
                target_selection: TargetSelection::Online,
                shared_agent_network: true,
                ..QmixConfig::default()
            },
            baseline: BaselineSection {
                search_scope: SearchScope::Subband,
                search_cap: DEFAULT_SEARCH_CAP,
            },
            run: RunSection {
                id: String::new(),
                seed: 0,
                episodes: 3000,
                episodes_per_round: 20,
                restart: RestartPolicy::ModelAndChannel,
                checkpoint_every: 0,
                output_dir: "runs".into(),
                eval_runs: 1,
                dump_traces: false,
            },
            theory: TheorySection {
                clients: 4,
                dim: 5,
                samples_per_client: 20,
                rows_per_sample: 3,
                heterogeneity: 1.0,
                noise_std: 0.5,
                epochs: vec![1, 3, 5],
                batch_size: 5,
                rate_fraction: 1.0,
                global_learning_rate: 1.0,
                trials: 10_000,
                identity_pairs: 100,
            },
        }
    }

    /// Table I and II values on the synthetic task.
    pub fn paper() -> Self {
        let desk = Self::desk();
        Self {
            profile: Profile::Paper,
            channel: ChannelSection {
                clients: 10,
                subbands: 4,
                slots_per_round: 250,
                ..desk.channel
            },
            fl: FlSection {
                rounds: 100,
                local_learning_rate: 0.01,
                payload_bits: 9_932_960.0,
                classes: 10,
                feature_dim: 32,
                train_samples: 10_000,
                test_samples: 2000,
                hidden_units: 64,
                ..desk.fl
            },
            qmix: QmixConfig::default(),
            run: RunSection { episodes: 30_000, ..desk.run },
            ..desk
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    /// Parses TOML text over the defaults of `profile`, or of the file's own
    /// `profile` key when no override is given.
    pub fn from_toml_str(text: &str, profile: Option<Profile>) -> Result<Self> {
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("config parse error: {e}")))?;
        let file_profile = match user.get("profile") {
            None => None,
            Some(toml::Value::String(s)) => Some(s.parse::<Profile>()?),
            Some(other) => {
                return Err(Error::Config(format!("profile must be a string, got {other}")));
            }
        };
        let profile = profile.or(file_profile).unwrap_or(Profile::Desk);
        let mut merged = toml::Table::try_from(Self::for_profile(profile))
            .map_err(|e| Error::Config(format!("default config: {e}")))?;
        merge(&mut merged, user, "")?;
        merged.insert("profile".into(), toml::Value::String(profile.to_string()));
        let config: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("config error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, profile: Option<Profile>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, profile)
    }

    /// The fully resolved config as TOML.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config dump: {e}")))
    }

    /// `run.id`, or a digest of the effective config when it is empty.
    pub fn run_id(&self) -> Result<String> {
        if !self.run.id.is_empty() {
            return Ok(self.run.id.clone());
        }
        let digest = Sha256::digest(self.to_toml_string()?.as_bytes());
        let hex: String = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
        Ok(format!("{}-s{}-{hex}", self.profile, self.run.seed))
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.channel;
        let bad = |key: &str, why: &str| Err(Error::Config(format!("{key} {why}")));
        if c.clients == 0 {
            return bad("channel.clients", "must be at least 1");
        }
        if c.cluster_count == 0 {
            return bad("channel.cluster_count", "must be at least 1");
        }
        if c.power_levels_dbm.is_empty() {
            return bad("channel.power_levels_dbm", "needs at least one active level");
        }
        if c.power_levels_dbm.windows(2).any(|w| !(w[0] > w[1])) {
            return bad("channel.power_levels_dbm", "must be strictly decreasing");
        }
        for (key, v) in [
            ("channel.cell_side_m", c.cell_side_m),
            ("channel.mean_cluster_delay_s", c.mean_cluster_delay_s),
            ("channel.carrier_hz", c.carrier_hz),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(key, "must be positive");
            }
        }
        if !(c.shadowing_std_db.is_finite() && c.shadowing_std_db >= 0.0) {
            return bad("channel.shadowing_std_db", "must be nonnegative");
        }
        self.link_budget()?;

        let f = &self.fl;
        if f.rounds == 0 || f.local_epochs == 0 || f.batch_size == 0 {
            return bad("fl", "rounds, local_epochs and batch_size must be at least 1");
        }
        for (key, v) in [
            ("fl.local_learning_rate", f.local_learning_rate),
            ("fl.global_learning_rate", f.global_learning_rate),
            ("fl.dirichlet_alpha", f.dirichlet_alpha),
            ("fl.payload_bits", f.payload_bits),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(key, "must be positive");
            }
        }
        if f.classes < 2 || f.feature_dim == 0 {
            return bad("fl", "needs classes >= 2 and feature_dim >= 1");
        }
        if f.train_samples < c.clients || f.test_samples == 0 {
            return bad("fl.train_samples", "must cover every client and test_samples must be positive");
        }

        let e = &self.env;
        for (key, v) in [
            ("env.completion_weight", Some(e.completion_weight)),
            ("env.convergence_weight", Some(e.convergence_weight)),
            ("env.deviation_weight", value_of(e.deviation_weight)),
            ("env.transmission_weight", value_of(e.transmission_weight)),
        ] {
            if let Some(v) = v {
                if !(v.is_finite() && v >= 0.0) {
                    return bad(key, "must be finite and nonnegative");
                }
            }
        }
        let n = &e.normalization;
        if !(n.large_scale_span_db > 0.0 && n.small_scale_span_db > 0.0) {
            return bad("env.normalization", "spans must be positive");
        }

        self.qmix.validate()?;

        if self.baseline.search_cap == 0 {
            return bad("baseline.search_cap", "must be at least 1");
        }

        let r = &self.run;
        if r.episodes == 0 || r.episodes_per_round == 0 {
            return bad("run", "episodes and episodes_per_round must be at least 1");
        }
        if r.eval_runs == 0 {
            return bad("run.eval_runs", "must be at least 1");
        }

        let t = &self.theory;
        if t.clients == 0 || t.dim == 0 || t.samples_per_client == 0 || t.rows_per_sample == 0 {
            return bad("theory", "task dimensions must be positive");
        }
        if t.epochs.is_empty() || t.epochs.contains(&0) {
            return bad("theory.epochs", "must list positive epoch counts");
        }
        if t.batch_size == 0 || t.batch_size > t.samples_per_client {
            return bad("theory.batch_size", "must lie in 1..=samples_per_client");
        }
        if !(t.rate_fraction > 0.0 && t.rate_fraction <= 1.0) {
            return bad("theory.rate_fraction", "must lie in (0, 1]");
        }
        if !(t.global_learning_rate.is_finite() && t.global_learning_rate > 0.0) {
            return bad("theory.global_learning_rate", "must be positive");
        }
        if t.trials < 2 || t.identity_pairs == 0 {
            return bad("theory", "needs trials >= 2 and identity_pairs >= 1");
        }
        Ok(())
    }

    pub fn link_budget(&self) -> Result<LinkBudget> {
        let c = &self.channel;
        let mut powers: Vec<f64> = c.power_levels_dbm.iter().map(|&p| dbm_to_watts(p)).collect();
        powers.push(0.0);
        LinkBudget::new(
            c.bandwidth_hz,
            noise_power_watts(c.bandwidth_hz, c.noise_figure_db),
            powers,
            c.subbands,
            c.slot_duration_s,
            c.slots_per_round,
            self.fl.payload_bits,
        )
        .map_err(|e| Error::Config(format!("channel: {e}")))
    }

    pub fn channel_config(&self) -> ChannelConfig {
        ChannelConfig {
            cluster_count: self.channel.cluster_count,
            mean_cluster_delay_s: self.channel.mean_cluster_delay_s,
            shadowing_std_db: self.channel.shadowing_std_db,
            carrier_hz: self.channel.carrier_hz,
        }
    }

    pub fn geometry(&self) -> GeometryConfig {
        GeometryConfig { clients: self.channel.clients, cell_side_m: self.channel.cell_side_m }
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            classes: self.fl.classes,
            feature_dim: self.fl.feature_dim,
            train_samples: self.fl.train_samples,
            test_samples: self.fl.test_samples,
            class_separation: self.fl.class_separation,
            noise_std: self.fl.noise_std,
        }
    }

    pub fn model(&self) -> ModelKind {
        match self.fl.hidden_units {
            0 => ModelKind::Softmax,
            w => ModelKind::Hidden(w),
        }
    }

    pub fn local_train(&self) -> LocalTrainConfig {
        LocalTrainConfig {
            epochs: self.fl.local_epochs,
            learning_rate: self.fl.local_learning_rate,
            batch_size: self.fl.batch_size,
        }
    }

    pub fn quadratic(&self) -> QuadraticConfig {
        let t = &self.theory;
        QuadraticConfig {
            clients: t.clients,
            dim: t.dim,
            samples_per_client: t.samples_per_client,
            rows_per_sample: t.rows_per_sample,
            heterogeneity: t.heterogeneity,
            noise_std: t.noise_std,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

fn value_of(v: AutoOr) -> Option<f64> {
    match v {
        AutoOr::Auto => None,
        AutoOr::Value(x) => Some(x),
    }
}

/// Overlays `user` on `base`. Tables merge recursively; anything else
/// replaces the default. Keys unknown to the defaults are kept so that
/// deserialization can reject them by name.
fn merge(base: &mut toml::Table, user: toml::Table, prefix: &str) -> Result<()> {
    for (key, value) in user {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u, &path)?,
            (Some(toml::Value::Table(_)), other) => {
                return Err(Error::Config(format!("{path} must be a table, got {other}")));
            }
            (None, _) if !prefix.is_empty() || !is_section(&key) => {
                return Err(Error::Config(format!("unknown configuration key {path}")));
            }
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
    Ok(())
}

fn is_section(key: &str) -> bool {
    matches!(key, "profile" | "channel" | "fl" | "env" | "qmix" | "baseline" | "run" | "theory")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_valid_desk_defaults() {
        let c = ExperimentConfig::from_toml_str("", None).unwrap();
        assert_eq!(c, ExperimentConfig::desk());
        assert_eq!(c.channel.clients, 4);
        assert_eq!(c.channel.slots_per_round, 20);
        assert_eq!(c.fl.rounds, 30);
        assert_eq!(c.run.episodes, 3000);
    }

    #[test]
    fn paper_profile_carries_table_values() {
        let c = ExperimentConfig::from_toml_str("", Some(Profile::Paper)).unwrap();
        assert_eq!(c.channel.clients, 10);
        assert_eq!(c.channel.subbands, 4);
        assert_eq!(c.channel.slots_per_round, 250);
        assert_eq!(c.fl.payload_bits, 9_932_960.0);
        assert_eq!(c.qmix.batch_size, 512);
        assert_eq!(c.qmix.learn_interval, 30);
        assert_eq!(c.qmix.agent_hidden, vec![250, 120, 120]);
        assert_eq!(c.run.episodes, 30_000);
        let b = c.link_budget().unwrap();
        assert_eq!(b.power_level_count(), 4);
        // -174 dBm/Hz + 66.99 dB + 5 dB
        assert!((10.0 * (b.noise_power_w * 1e3).log10() + 102.01).abs() < 0.01);
    }

    #[test]
    fn profile_key_in_file_selects_defaults() {
        let c = ExperimentConfig::from_toml_str("profile = \"paper\"\n[run]\nseed = 9\n", None).unwrap();
        assert_eq!(c.profile, Profile::Paper);
        assert_eq!(c.run.seed, 9);
        assert_eq!(c.run.episodes, 30_000);
        let forced = ExperimentConfig::from_toml_str("profile = \"paper\"", Some(Profile::Desk)).unwrap();
        assert_eq!(forced, ExperimentConfig::desk());
    }

    #[test]
    fn gamma_out_of_range_names_the_key() {
        let err = ExperimentConfig::from_toml_str("[qmix]\ngamma = 1.5\n", None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("qmix.gamma") && msg.contains("[0, 1)"), "{msg}");
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        for (text, key) in [
            ("[fl]\nroundz = 3\n", "roundz"),
            ("[nonsense]\nx = 1\n", "nonsense"),
            ("[qmix.epsilon]\nstop = 0.1\n", "stop"),
        ] {
            let msg = ExperimentConfig::from_toml_str(text, None).unwrap_err().to_string();
            assert!(msg.contains(key), "{msg}");
        }
    }

    #[test]
    fn type_errors_name_the_key() {
        let msg = ExperimentConfig::from_toml_str("[channel]\nclients = \"four\"\n", None)
            .unwrap_err()
            .to_string();
        assert!(msg.contains("clients"), "{msg}");
    }

    #[test]
    fn auto_weights_parse_both_ways() {
        let c = ExperimentConfig::from_toml_str(
            "[env]\ndeviation_weight = 0.25\ntransmission_weight = \"auto\"\n",
            None,
        )
        .unwrap();
        assert_eq!(c.env.deviation_weight, AutoOr::Value(0.25));
        assert_eq!(c.env.transmission_weight, AutoOr::Auto);
        assert!(ExperimentConfig::from_toml_str("[env]\ndeviation_weight = \"sometimes\"\n", None).is_err());
        assert!(ExperimentConfig::from_toml_str("[env]\ndeviation_weight = -1.0\n", None).is_err());
    }

    #[test]
    fn dump_round_trips() {
        for base in [ExperimentConfig::desk(), ExperimentConfig::paper()] {
            let mut c = base;
            c.env.deviation_weight = AutoOr::Value(0.125);
            c.run.seed = 17;
            let text = c.to_toml_string().unwrap();
            let back = ExperimentConfig::from_toml_str(&text, None).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_toml_string().unwrap(), text);
        }
    }

    #[test]
    fn constraint_violations_name_the_key() {
        let msg = ExperimentConfig::from_toml_str("[channel]\npower_levels_dbm = [5.0, 10.0]\n", None)
            .unwrap_err()
            .to_string();
        assert!(msg.contains("channel.power_levels_dbm"), "{msg}");
    }

    #[test]
    fn run_id_is_stable_and_config_sensitive() {
        let a = ExperimentConfig::desk();
        let mut b = a.clone();
        b.run.seed = 1;
        assert_eq!(a.run_id().unwrap(), a.run_id().unwrap());
        assert_ne!(a.run_id().unwrap(), b.run_id().unwrap());
        b.run.id = "mine".into();
        assert_eq!(b.run_id().unwrap(), "mine");
    }
}
