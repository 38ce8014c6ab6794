//! Flat `key = value` experiment configuration.
//!
//! Every key has a default; unknown keys are rejected. Two hashes are
//! derived from the canonical rendering: the data hash covers only the keys
//! that shape the demonstration set, the config hash covers everything
//! except evaluation-only keys, so checkpoints stay valid when only the
//! evaluation protocol changes.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::action::ComposeMode;
use crate::curriculum::{LossWeights, Strategy, TrainConfig};
use crate::env::{EnvConfig, Layout};
use crate::error::{config_err, Error, Result};
use crate::planner::{PlannerConfig, SampleMode};
use crate::refiner::RefinerConfig;
use crate::runtime::{ClockModel, ExecMode, HorizonConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dims: usize,
    pub num_targets: usize,
    pub layout: Layout,
    pub horizon: usize,
    pub n_bins: usize,
    pub h_chunk: usize,
    pub m_factor: usize,
    /// Horizon factor the planner is trained for; 0 means `m_factor`.
    pub plan_factor: usize,
    pub k_diff: usize,
    pub compose_mode: ComposeMode,
    pub beta_start: f64,
    pub beta_end: f64,
    pub tau: f64,
    pub ema_decay: f64,
    pub lambda_diff: f64,
    pub lambda_plan: f64,
    pub strategy: Strategy,
    pub reversible: bool,
    pub planner_width: usize,
    pub planner_hidden: usize,
    pub refiner_width: usize,
    pub d_emb: usize,
    pub geo_dim: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub lr_planner: f64,
    pub lr_refiner: f64,
    pub warmup_steps: usize,
    pub data_episodes: usize,
    pub data_exec_noise: f64,
    pub data_start_jitter: f64,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    pub plan_sampling: SampleMode,
    pub exec_mode: ExecMode,
    pub c_refine: f64,
    pub c_plan: f64,
    pub sweep_bins: Vec<usize>,
    pub sweep_horizons: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dims: 2,
            num_targets: 4,
            layout: Layout::Random,
            horizon: 200,
            n_bins: 8,
            h_chunk: 5,
            m_factor: 2,
            plan_factor: 0,
            k_diff: 50,
            compose_mode: ComposeMode::Direct,
            beta_start: 1e-4,
            beta_end: 0.2,
            tau: 0.75,
            ema_decay: 0.99,
            lambda_diff: 1.0,
            lambda_plan: 0.5,
            strategy: Strategy::Dynamic,
            reversible: false,
            planner_width: 32,
            planner_hidden: 128,
            refiner_width: 128,
            d_emb: 8,
            geo_dim: 32,
            train_steps: 3000,
            batch_size: 64,
            lr_planner: 3e-3,
            lr_refiner: 1e-3,
            warmup_steps: 100,
            data_episodes: 5000,
            data_exec_noise: 0.3,
            data_start_jitter: 0.8,
            eval_episodes: 200,
            eval_seed: 1_000_000,
            plan_sampling: SampleMode::Argmax,
            exec_mode: ExecMode::Async,
            c_refine: 92.0,
            c_plan: 60.0,
            sweep_bins: vec![2, 8, 32, 128],
            sweep_horizons: vec![1, 2, 3, 4, 5],
        }
    }
}

const DATA_KEYS: &[&str] = &[
    "seed",
    "dims",
    "num_targets",
    "layout",
    "horizon",
    "data_episodes",
    "data_exec_noise",
    "data_start_jitter",
];

const EVAL_KEYS: &[&str] = &[
    "eval_episodes",
    "eval_seed",
    "plan_sampling",
    "exec_mode",
    "c_refine",
    "c_plan",
    "sweep_bins",
    "sweep_horizons",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| config_err(format!("bad value `{v}` for `{key}`: {e}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn layout_name(l: Layout) -> &'static str {
    match l {
        Layout::Random => "random",
        Layout::Symmetric => "symmetric",
    }
}

fn sampling_name(m: SampleMode) -> &'static str {
    match m {
        SampleMode::Argmax => "argmax",
        SampleMode::Categorical => "categorical",
    }
}

fn exec_name(m: ExecMode) -> &'static str {
    match m {
        ExecMode::Sync => "sync",
        ExecMode::Async => "async",
    }
}

impl ExperimentConfig {
    /// Parse a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "dims" => self.dims = parse(key, v)?,
            "num_targets" => self.num_targets = parse(key, v)?,
            "layout" => {
                self.layout = match v {
                    "random" => Layout::Random,
                    "symmetric" => Layout::Symmetric,
                    _ => return Err(config_err(format!("unknown layout `{v}`"))),
                }
            }
            "horizon" => self.horizon = parse(key, v)?,
            "n_bins" => self.n_bins = parse(key, v)?,
            "h_chunk" => self.h_chunk = parse(key, v)?,
            "m_factor" => self.m_factor = parse(key, v)?,
            "plan_factor" => self.plan_factor = parse(key, v)?,
            "k_diff" => self.k_diff = parse(key, v)?,
            "compose_mode" => self.compose_mode = v.parse()?,
            "beta_start" => self.beta_start = parse(key, v)?,
            "beta_end" => self.beta_end = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "ema_decay" => self.ema_decay = parse(key, v)?,
            "lambda_diff" => self.lambda_diff = parse(key, v)?,
            "lambda_plan" => self.lambda_plan = parse(key, v)?,
            "strategy" => self.strategy = v.parse()?,
            "reversible" => self.reversible = parse(key, v)?,
            "planner_width" => self.planner_width = parse(key, v)?,
            "planner_hidden" => self.planner_hidden = parse(key, v)?,
            "refiner_width" => self.refiner_width = parse(key, v)?,
            "d_emb" => self.d_emb = parse(key, v)?,
            "geo_dim" => self.geo_dim = parse(key, v)?,
            "train_steps" => self.train_steps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr_planner" => self.lr_planner = parse(key, v)?,
            "lr_refiner" => self.lr_refiner = parse(key, v)?,
            "warmup_steps" => self.warmup_steps = parse(key, v)?,
            "data_episodes" => self.data_episodes = parse(key, v)?,
            "data_exec_noise" => self.data_exec_noise = parse(key, v)?,
            "data_start_jitter" => self.data_start_jitter = parse(key, v)?,
            "eval_episodes" => self.eval_episodes = parse(key, v)?,
            "eval_seed" => self.eval_seed = parse(key, v)?,
            "plan_sampling" => self.plan_sampling = v.parse()?,
            "exec_mode" => {
                self.exec_mode = match v {
                    "sync" => ExecMode::Sync,
                    "async" => ExecMode::Async,
                    _ => return Err(config_err(format!("unknown exec_mode `{v}`"))),
                }
            }
            "c_refine" => self.c_refine = parse(key, v)?,
            "c_plan" => self.c_plan = parse(key, v)?,
            "sweep_bins" => self.sweep_bins = parse_list(key, v)?,
            "sweep_horizons" => self.sweep_horizons = parse_list(key, v)?,
            _ => return Err(config_err(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// All keys in a fixed order, one `key = value` per line.
    pub fn canonical(&self) -> String {
        self.entries()
            .into_iter()
            .fold(String::new(), |mut s, (k, v)| {
                let _ = writeln!(s, "{k} = {v}");
                s
            })
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("dims", self.dims.to_string()),
            ("num_targets", self.num_targets.to_string()),
            ("layout", layout_name(self.layout).into()),
            ("horizon", self.horizon.to_string()),
            ("n_bins", self.n_bins.to_string()),
            ("h_chunk", self.h_chunk.to_string()),
            ("m_factor", self.m_factor.to_string()),
            ("plan_factor", self.plan_factor.to_string()),
            ("k_diff", self.k_diff.to_string()),
            ("compose_mode", self.compose_mode.to_string()),
            ("beta_start", self.beta_start.to_string()),
            ("beta_end", self.beta_end.to_string()),
            ("tau", self.tau.to_string()),
            ("ema_decay", self.ema_decay.to_string()),
            ("lambda_diff", self.lambda_diff.to_string()),
            ("lambda_plan", self.lambda_plan.to_string()),
            ("strategy", self.strategy.to_string()),
            ("reversible", self.reversible.to_string()),
            ("planner_width", self.planner_width.to_string()),
            ("planner_hidden", self.planner_hidden.to_string()),
            ("refiner_width", self.refiner_width.to_string()),
            ("d_emb", self.d_emb.to_string()),
            ("geo_dim", self.geo_dim.to_string()),
            ("train_steps", self.train_steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr_planner", self.lr_planner.to_string()),
            ("lr_refiner", self.lr_refiner.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("data_episodes", self.data_episodes.to_string()),
            ("data_exec_noise", self.data_exec_noise.to_string()),
            ("data_start_jitter", self.data_start_jitter.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("eval_seed", self.eval_seed.to_string()),
            ("plan_sampling", sampling_name(self.plan_sampling).into()),
            ("exec_mode", exec_name(self.exec_mode).into()),
            ("c_refine", self.c_refine.to_string()),
            ("c_plan", self.c_plan.to_string()),
            ("sweep_bins", join(&self.sweep_bins)),
            ("sweep_horizons", join(&self.sweep_horizons)),
        ]
    }

    fn digest(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if keep(k) {
                h.update(format!("{k}={v}\n"));
            }
        }
        h.finalize()
            .iter()
            .take(8)
            .fold(String::new(), |mut s, b| {
                let _ = write!(s, "{b:02x}");
                s
            })
    }

    /// Hash of everything except evaluation-only keys.
    pub fn hash(&self) -> String {
        self.digest(|k| !EVAL_KEYS.contains(&k))
    }

    /// Hash of the keys that determine the demonstration set.
    pub fn data_hash(&self) -> String {
        self.digest(|k| DATA_KEYS.contains(&k))
    }

    pub fn validate(&self) -> Result<()> {
        self.env().validate()?;
        self.train_config().validate()?;
        HorizonConfig::new(self.m_factor, self.h_chunk)?;
        ClockModel::new(self.c_refine, self.c_plan)?;
        if self.n_bins < 2 {
            return Err(config_err("n_bins must be >= 2"));
        }
        if self.plan_factor != 0 && self.plan_factor < self.m_factor {
            return Err(config_err("plan_factor must be 0 or >= m_factor"));
        }
        if self.data_episodes == 0 || self.eval_episodes == 0 {
            return Err(config_err("episode counts must be positive"));
        }
        if self.sweep_bins.iter().any(|&n| n < 2) || self.sweep_horizons.contains(&0) {
            return Err(config_err("sweep values must be valid bin counts and horizon factors"));
        }
        self.refiner_config(false).validate()?;
        self.planner_config().validate()?;
        Ok(())
    }

    pub fn env(&self) -> EnvConfig {
        EnvConfig {
            dims: self.dims,
            num_targets: self.num_targets,
            horizon: self.horizon,
            layout: self.layout,
            ..EnvConfig::default()
        }
    }

    /// Environment used to collect demonstrations.
    pub fn data_env(&self) -> EnvConfig {
        EnvConfig {
            start_jitter: self.data_start_jitter,
            ..self.env()
        }
    }

    pub fn trained_factor(&self) -> usize {
        if self.plan_factor == 0 {
            self.m_factor
        } else {
            self.plan_factor
        }
    }

    pub fn l_macro(&self) -> usize {
        self.trained_factor() * self.h_chunk
    }

    pub fn horizon_config(&self) -> HorizonConfig {
        HorizonConfig {
            m: self.m_factor,
            h_chunk: self.h_chunk,
        }
    }

    pub fn clock(&self) -> ClockModel {
        ClockModel {
            c_refine: self.c_refine,
            c_plan: self.c_plan,
        }
    }

    pub fn planner_config(&self) -> PlannerConfig {
        PlannerConfig {
            width: self.planner_width,
            encoder_hidden: self.planner_hidden,
            ..PlannerConfig::new(self.n_bins, self.l_macro(), self.dims, self.num_targets)
        }
    }

    /// Refiner for the hierarchical stack, or the observation-only baseline
    /// whose noise predictor is as wide as planner and refiner together.
    pub fn refiner_config(&self, monolithic: bool) -> RefinerConfig {
        let base = RefinerConfig {
            d_emb: self.d_emb,
            width: self.refiner_width,
            geo_dim: self.geo_dim,
            k_diff: self.k_diff,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            compose: self.compose_mode,
            ..RefinerConfig::new(self.h_chunk, self.dims, self.n_bins, self.num_targets)
        };
        if monolithic {
            RefinerConfig {
                conditioned: false,
                compose: ComposeMode::Direct,
                context_dim: self.env().planner_obs_dim(),
                width: self.refiner_width + self.planner_width,
                ..base
            }
        } else {
            base
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train_steps,
            batch_size: self.batch_size,
            lr_planner: self.lr_planner,
            lr_refiner: self.lr_refiner,
            warmup_steps: self.warmup_steps,
            tau: self.tau,
            ema_decay: self.ema_decay,
            weights: LossWeights {
                lambda_diff: self.lambda_diff,
                lambda_plan: self.lambda_plan,
            },
            strategy: self.strategy,
            reversible: self.reversible,
            ..TrainConfig::default()
        }
    }
}

impl FromStr for ExperimentConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let cfg = ExperimentConfig::parse("# header\nn_bins = 32  # finer\n\nstrategy=no_tf\nsweep_bins = 2, 4\n").unwrap();
        assert_eq!(cfg.n_bins, 32);
        assert_eq!(cfg.strategy, Strategy::NoTf);
        assert_eq!(cfg.sweep_bins, vec![2, 4]);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(ExperimentConfig::parse("bogus = 1").is_err());
        assert!(ExperimentConfig::parse("n_bins").is_err());
        assert!(ExperimentConfig::parse("n_bins = many").is_err());
        assert!(ExperimentConfig::parse("n_bins = 1").is_err());
        assert!(ExperimentConfig::parse("tau = 1.5").is_err());
        assert!(ExperimentConfig::parse("layout = symmetric\ndims = 3").is_err());
    }

    #[test]
    fn canonical_round_trip() {
        let cfg = ExperimentConfig::parse("seed = 9\nbeta_end = 0.05\nlayout = symmetric").unwrap();
        let again = ExperimentConfig::parse(&cfg.canonical()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash(), again.hash());
    }

    #[test]
    fn hashes_track_the_right_keys() {
        let base = ExperimentConfig::default();
        let eval_only = ExperimentConfig::parse("eval_episodes = 10").unwrap();
        assert_eq!(base.hash(), eval_only.hash());
        let model = ExperimentConfig::parse("n_bins = 16").unwrap();
        assert_ne!(base.hash(), model.hash());
        assert_eq!(base.data_hash(), model.data_hash());
        let data = ExperimentConfig::parse("data_episodes = 7").unwrap();
        assert_ne!(base.data_hash(), data.data_hash());
        assert_eq!(base.hash().len(), 16);
    }

    #[test]
    fn baseline_is_width_matched() {
        let cfg = ExperimentConfig::default();
        let mono = cfg.refiner_config(true);
        assert_eq!(mono.width, cfg.refiner_width + cfg.planner_width);
        assert!(!mono.conditioned);
        assert_eq!(mono.obs_dim(), cfg.env().planner_obs_dim() + cfg.env().refiner_obs_dim());
    }
}
