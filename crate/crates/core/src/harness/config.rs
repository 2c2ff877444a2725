use std::collections::HashMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::env::{EnvConfig, Scenario};
use crate::error::{Error, Result};
use crate::graph::ShiftKind;
use crate::numeric::Activation;
use crate::permutation::GsMode;
use crate::rl::{Algorithm, LossMode, TrainConfig};

/// Everything one `train` invocation needs.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub algorithms: Vec<Algorithm>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub jobs: usize,
}

impl ExperimentConfig {
    pub fn new(scenario: Scenario) -> Self {
        ExperimentConfig {
            env: EnvConfig::for_scenario(scenario),
            train: TrainConfig::default(),
            algorithms: Algorithm::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("runs"),
            jobs: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.train.validate()?;
        if self.algorithms.is_empty() || self.seeds.is_empty() {
            return Err(Error::Validation("need at least one algorithm and one seed".into()));
        }
        let mut algos = self.algorithms.clone();
        algos.sort();
        algos.dedup();
        if algos.len() != self.algorithms.len() {
            return Err(Error::Validation("duplicate algorithm".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::Validation("duplicate seed".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Validation("jobs must be positive".into()));
        }
        Ok(())
    }

    /// Serialized form accepted by [`parse_config`]; every key is written.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for &key in KEYS {
            let prefix = key.split('.').next().unwrap_or("");
            if prefix != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = prefix;
            }
            out.push_str(&format!("{key} = {}\n", get(self, key)));
        }
        out
    }
}

/// Every recognized key, in output order. `env.scenario` comes first
/// because it selects the defaults for the remaining `env.*` keys.
pub const KEYS: &[&str] = &[
    "env.scenario",
    "env.grid_size",
    "env.num_agents",
    "env.num_food",
    "env.view_size",
    "env.max_steps",
    "env.seed",
    "env.max_hp",
    "env.attack_damage",
    "env.hp_regen",
    "env.food_hits",
    "env.friendly_fire",
    "env.reward.food_absorb",
    "env.reward.attack_hit",
    "env.reward.kill",
    "env.reward.step_cost",
    "env.reward.death",
    "train.gamma",
    "train.alpha",
    "train.beta",
    "train.gs_weight",
    "train.normalize_blend",
    "train.learning_rate",
    "train.momentum",
    "train.batch_size",
    "train.buffer_capacity",
    "train.target_sync_period",
    "train.episodes",
    "train.train_start_episode",
    "train.epsilon_start",
    "train.epsilon_floor",
    "train.epsilon_decay",
    "train.epsilon_decay_start",
    "train.loss_mode",
    "train.temperature",
    "train.sinkhorn_iters",
    "train.noise_scale",
    "train.gs_mode",
    "train.feature_dim",
    "train.heads",
    "train.head_dim",
    "train.layers",
    "train.activation",
    "train.scaled_attention",
    "train.gcn_order",
    "train.gcn_shift",
    "train.neighbors",
    "run.algorithms",
    "run.seeds",
    "run.output_dir",
    "run.jobs",
];

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

fn get(c: &ExperimentConfig, key: &str) -> String {
    let (e, t, r) = (&c.env, &c.train, &c.env.rewards);
    let n = &t.network;
    match key {
        "env.scenario" => e.scenario.name().into(),
        "env.grid_size" => e.grid_size.to_string(),
        "env.num_agents" => e.num_agents.to_string(),
        "env.num_food" => e.num_food.to_string(),
        "env.view_size" => e.view_size.to_string(),
        "env.max_steps" => e.max_steps.to_string(),
        "env.seed" => e.seed.to_string(),
        "env.max_hp" => e.max_hp.to_string(),
        "env.attack_damage" => e.attack_damage.to_string(),
        "env.hp_regen" => e.hp_regen.to_string(),
        "env.food_hits" => e.food_hits.to_string(),
        "env.friendly_fire" => e.gather_friendly_fire.to_string(),
        "env.reward.food_absorb" => r.food_absorb.to_string(),
        "env.reward.attack_hit" => r.attack_hit.to_string(),
        "env.reward.kill" => r.kill.to_string(),
        "env.reward.step_cost" => r.step_cost.to_string(),
        "env.reward.death" => r.death.to_string(),
        "train.gamma" => t.gamma.to_string(),
        "train.alpha" => t.alpha.to_string(),
        "train.beta" => t.beta.to_string(),
        "train.gs_weight" => t.gs_weight.to_string(),
        "train.normalize_blend" => t.normalize_blend.to_string(),
        "train.learning_rate" => t.learning_rate.to_string(),
        "train.momentum" => t.momentum.to_string(),
        "train.batch_size" => t.batch_size.to_string(),
        "train.buffer_capacity" => t.buffer_capacity.to_string(),
        "train.target_sync_period" => t.target_sync_period.to_string(),
        "train.episodes" => t.episodes.to_string(),
        "train.train_start_episode" => t.train_start_episode.to_string(),
        "train.epsilon_start" => t.epsilon_start.to_string(),
        "train.epsilon_floor" => t.epsilon_floor.to_string(),
        "train.epsilon_decay" => t.epsilon_decay.to_string(),
        "train.epsilon_decay_start" => t.epsilon_decay_start.to_string(),
        "train.loss_mode" => t.loss_mode.name().into(),
        "train.temperature" => t.gs.temperature.to_string(),
        "train.sinkhorn_iters" => t.gs.iterations.to_string(),
        "train.noise_scale" => t.gs.noise_scale.to_string(),
        "train.gs_mode" => t.gs_mode.name().into(),
        "train.feature_dim" => n.feature_dim.to_string(),
        "train.heads" => n.heads.to_string(),
        "train.head_dim" => n.head_dim.to_string(),
        "train.layers" => n.layers.to_string(),
        "train.activation" => n.activation.name().into(),
        "train.scaled_attention" => n.scaled_attention.to_string(),
        "train.gcn_order" => n.gcn_order.to_string(),
        "train.gcn_shift" => n.gcn_shift.name().into(),
        "train.neighbors" => n.neighbors.to_string(),
        "run.algorithms" => join(&c.algorithms),
        "run.seeds" => join(&c.seeds),
        "run.output_dir" => c.output_dir.display().to_string(),
        "run.jobs" => c.jobs.to_string(),
        _ => unreachable!("unknown key {key}"),
    }
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn named<T>(v: &str, parse: impl Fn(&str) -> Option<T>) -> std::result::Result<T, String> {
    parse(v).ok_or_else(|| format!("unknown value {v:?}"))
}

fn list<T>(v: &str, item: impl Fn(&str) -> std::result::Result<T, String>) -> std::result::Result<Vec<T>, String> {
    v.split(',').map(|s| item(s.trim())).collect()
}

fn set(c: &mut ExperimentConfig, key: &str, v: &str) -> std::result::Result<(), String> {
    let (e, t) = (&mut c.env, &mut c.train);
    match key {
        "env.scenario" => e.scenario = named(v, Scenario::parse)?,
        "env.grid_size" => e.grid_size = num(v)?,
        "env.num_agents" => e.num_agents = num(v)?,
        "env.num_food" => e.num_food = num(v)?,
        "env.view_size" => e.view_size = num(v)?,
        "env.max_steps" => e.max_steps = num(v)?,
        "env.seed" => e.seed = num(v)?,
        "env.max_hp" => e.max_hp = num(v)?,
        "env.attack_damage" => e.attack_damage = num(v)?,
        "env.hp_regen" => e.hp_regen = num(v)?,
        "env.food_hits" => e.food_hits = num(v)?,
        "env.friendly_fire" => e.gather_friendly_fire = num(v)?,
        "env.reward.food_absorb" => e.rewards.food_absorb = num(v)?,
        "env.reward.attack_hit" => e.rewards.attack_hit = num(v)?,
        "env.reward.kill" => e.rewards.kill = num(v)?,
        "env.reward.step_cost" => e.rewards.step_cost = num(v)?,
        "env.reward.death" => e.rewards.death = num(v)?,
        "train.gamma" => t.gamma = num(v)?,
        "train.alpha" => t.alpha = num(v)?,
        "train.beta" => t.beta = num(v)?,
        "train.gs_weight" => t.gs_weight = num(v)?,
        "train.normalize_blend" => t.normalize_blend = num(v)?,
        "train.learning_rate" => t.learning_rate = num(v)?,
        "train.momentum" => t.momentum = num(v)?,
        "train.batch_size" => t.batch_size = num(v)?,
        "train.buffer_capacity" => t.buffer_capacity = num(v)?,
        "train.target_sync_period" => t.target_sync_period = num(v)?,
        "train.episodes" => t.episodes = num(v)?,
        "train.train_start_episode" => t.train_start_episode = num(v)?,
        "train.epsilon_start" => t.epsilon_start = num(v)?,
        "train.epsilon_floor" => t.epsilon_floor = num(v)?,
        "train.epsilon_decay" => t.epsilon_decay = num(v)?,
        "train.epsilon_decay_start" => t.epsilon_decay_start = num(v)?,
        "train.loss_mode" => t.loss_mode = named(v, LossMode::parse)?,
        "train.temperature" => t.gs.temperature = num(v)?,
        "train.sinkhorn_iters" => t.gs.iterations = num(v)?,
        "train.noise_scale" => t.gs.noise_scale = num(v)?,
        "train.gs_mode" => t.gs_mode = named(v, GsMode::parse)?,
        "train.feature_dim" => t.network.feature_dim = num(v)?,
        "train.heads" => t.network.heads = num(v)?,
        "train.head_dim" => t.network.head_dim = num(v)?,
        "train.layers" => t.network.layers = num(v)?,
        "train.activation" => t.network.activation = named(v, Activation::parse)?,
        "train.scaled_attention" => t.network.scaled_attention = num(v)?,
        "train.gcn_order" => t.network.gcn_order = num(v)?,
        "train.gcn_shift" => t.network.gcn_shift = named(v, ShiftKind::parse)?,
        "train.neighbors" => t.network.neighbors = num(v)?,
        "run.algorithms" => c.algorithms = list(v, |s| named(s, Algorithm::parse))?,
        "run.seeds" => c.seeds = list(v, num)?,
        "run.output_dir" => c.output_dir = PathBuf::from(v),
        "run.jobs" => c.jobs = num(v)?,
        _ => return Err(format!("unknown key {key:?}")),
    }
    Ok(())
}

/// Parses `key = value` lines. `#` starts a comment. `env.scenario` is
/// required and picks the scenario defaults; every other key is optional.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut entries: Vec<(usize, &str, &str)> = Vec::new();
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
            line,
            message: format!("expected `key = value`, found {content:?}"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            return Err(Error::Config {
                line,
                message: format!("unknown key {key:?}"),
            });
        }
        if let Some(first) = seen.insert(key, line) {
            return Err(Error::Config {
                line,
                message: format!("{key} already set on line {first}"),
            });
        }
        entries.push((line, key, value));
    }
    let (scenario_line, _, scenario) = entries
        .iter()
        .find(|(_, k, _)| *k == "env.scenario")
        .ok_or(Error::Config {
            line: 0,
            message: "env.scenario is required".into(),
        })?;
    let scenario = Scenario::parse(scenario).ok_or_else(|| Error::Config {
        line: *scenario_line,
        message: format!("unknown scenario {scenario:?}"),
    })?;
    let mut cfg = ExperimentConfig::new(scenario);
    for (line, key, value) in entries {
        set(&mut cfg, key, value).map_err(|message| Error::Config {
            line,
            message: format!("{key}: {message}"),
        })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

pub fn save_config(path: &Path, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::write(path, cfg.to_text())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = parse_config("env.scenario = battle\n").unwrap();
        assert_eq!(c.env, EnvConfig::battle());
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.algorithms, Algorithm::ALL.to_vec());
    }

    #[test]
    fn every_key_round_trips() {
        let mut c = ExperimentConfig::new(Scenario::Gather);
        c.train.learning_rate = 0.1 + 0.2;
        c.train.gs_mode = GsMode::Hard;
        c.algorithms = vec![Algorithm::GsGat, Algorithm::Gcn];
        c.seeds = vec![7, 3];
        let text = c.to_text();
        assert_eq!(text.lines().filter(|l| l.contains('=')).count(), KEYS.len());
        assert_eq!(parse_config(&text).unwrap(), c);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse_config("env.scenario = gather\n\n# c\nenv.colour = red\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 4, .. }), "{err}");
        let err = parse_config("env.scenario = gather\ntrain.gamma = high\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }), "{err}");
        let err = parse_config("env.scenario = gather\nrun.jobs = 1\nrun.jobs = 2\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 3, .. }), "{err}");
        assert!(parse_config("train.gamma = 0.5\n").is_err());
    }

    #[test]
    fn range_checks() {
        let err = parse_config("env.scenario = gather\ntrain.alpha = -1\n").unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
        assert!(parse_config("env.scenario = gather\nenv.view_size = 4\n").is_err());
    }

    #[test]
    fn scenario_line_position_is_irrelevant() {
        let a = parse_config("env.grid_size = 20\nenv.scenario = gather\n").unwrap();
        assert_eq!(a.env.grid_size, 20);
        assert_eq!(a.env.num_agents, 74);
    }
}
