//! Experiment configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::agent::{GradientRouting, TrainingKind, TrainingMechanism};
use crate::error::{Error, Result};
use crate::prcl::{CoefficientStrategy, SamplingMechanism};
use crate::replay::DEFAULT_CAPACITY;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    Ml1m,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoefficientKind {
    Positional,
    Balanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainingChoice {
    Auxiliary,
    Constrained,
}

/// Everything a training run depends on besides its seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub run_name: String,
    pub env: EnvKind,
    pub data_dir: PathBuf,
    pub episodes: usize,
    pub seeds: usize,
    pub seed_base: u64,
    pub batch_size: usize,
    pub prcl_frequency: f64,
    pub coefficient: CoefficientKind,
    pub sampling: SamplingMechanism,
    pub training: TrainingChoice,
    pub gamma_prcl: f64,
    pub gradient_routing: GradientRouting,
    pub crir_without_cl: bool,

    pub embedding_dim: usize,
    pub hidden_units: usize,
    pub attention_hidden: usize,
    pub max_history: usize,
    pub learning_rate: f64,
    pub discount: f64,
    pub tau: f64,
    pub top_k: usize,

    pub max_steps: usize,
    pub interest_shift: bool,
    pub early_termination: bool,
    pub users: usize,
    pub user_features: usize,
    pub reward_threshold: f64,
    pub drift_every: usize,
    pub drift_weight: f64,

    pub replay_capacity: usize,
    pub per_alpha: f64,
    pub per_beta_start: f64,
    pub per_beta_end: f64,
    pub noise_start: f64,
    pub noise_end: f64,
    pub grad_log_every: usize,
    pub smoothing_window: usize,
}

pub fn default_data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join("ml1m")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_env(EnvKind::Ml1m)
    }
}

impl ExperimentConfig {
    pub fn for_env(env: EnvKind) -> Self {
        Self {
            run_name: "crir".into(),
            env,
            data_dir: default_data_dir(),
            episodes: match env {
                EnvKind::Ml1m => 2000,
                EnvKind::Synthetic => 20000,
            },
            seeds: 5,
            seed_base: 0,
            batch_size: 32,
            prcl_frequency: 1.0,
            coefficient: CoefficientKind::Positional,
            sampling: SamplingMechanism::Mixed,
            training: TrainingChoice::Auxiliary,
            gamma_prcl: 0.5,
            gradient_routing: GradientRouting::Both,
            crir_without_cl: false,
            embedding_dim: 100,
            hidden_units: 128,
            attention_hidden: 36,
            max_history: 50,
            learning_rate: 0.001,
            discount: 0.9,
            tau: 0.001,
            top_k: 10,
            max_steps: 50,
            interest_shift: true,
            early_termination: false,
            users: 50,
            user_features: 16,
            reward_threshold: 0.3,
            drift_every: 5,
            drift_weight: 0.2,
            replay_capacity: DEFAULT_CAPACITY,
            per_alpha: 0.6,
            per_beta_start: 0.4,
            per_beta_end: 1.0,
            noise_start: 0.1,
            noise_end: 0.01,
            grad_log_every: 10,
            smoothing_window: 0,
        }
    }

    /// Parses a config file's text. Keys not set keep their defaults; the
    /// `env` key, when present, picks the environment defaults first.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            pairs.push((n + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let env = match pairs.iter().rev().find(|p| p.1 == "env") {
            Some((n, _, v)) => parse_env(v).map_err(|e| Error::Config(format!("line {n}: {e}")))?,
            None => EnvKind::Ml1m,
        };
        let mut cfg = Self::for_env(env);
        let mut explicit_freq = false;
        for (n, k, v) in &pairs {
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {n}: {e}")))?;
            explicit_freq |= k == "prcl_frequency";
        }
        if cfg.crir_without_cl {
            if explicit_freq && cfg.prcl_frequency != 0.0 {
                return Err(Error::Config(
                    "crir_without_cl requires prcl_frequency = 0".into(),
                ));
            }
            cfg.prcl_frequency = 0.0;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
        }
        match key {
            "run_name" => self.run_name = value.to_string(),
            "env" => self.env = parse_env(value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "episodes" => self.episodes = num(key, value)?,
            "seeds" => self.seeds = num(key, value)?,
            "seed_base" => self.seed_base = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "prcl_frequency" => self.prcl_frequency = num(key, value)?,
            "coefficient" => {
                self.coefficient = match value {
                    "positional" => CoefficientKind::Positional,
                    "balanced" => CoefficientKind::Balanced,
                    _ => return Err(Error::Config(format!("unknown coefficient `{value}`"))),
                }
            }
            "sampling" => {
                self.sampling = match value {
                    "mixed" => SamplingMechanism::Mixed,
                    "divided" => SamplingMechanism::Divided,
                    "combined" => SamplingMechanism::Combined,
                    _ => return Err(Error::Config(format!("unknown sampling `{value}`"))),
                }
            }
            "training" => {
                self.training = match value {
                    "auxiliary" => TrainingChoice::Auxiliary,
                    "constrained" => TrainingChoice::Constrained,
                    _ => return Err(Error::Config(format!("unknown training `{value}`"))),
                }
            }
            "gamma_prcl" => self.gamma_prcl = num(key, value)?,
            "gradient_routing" => self.gradient_routing = parse_routing(value)?,
            "crir_without_cl" => self.crir_without_cl = num(key, value)?,
            "embedding_dim" => self.embedding_dim = num(key, value)?,
            "hidden_units" => self.hidden_units = num(key, value)?,
            "attention_hidden" => self.attention_hidden = num(key, value)?,
            "max_history" => self.max_history = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "discount" => self.discount = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "top_k" => self.top_k = num(key, value)?,
            "max_steps" => self.max_steps = num(key, value)?,
            "interest_shift" => self.interest_shift = num(key, value)?,
            "early_termination" => self.early_termination = num(key, value)?,
            "users" => self.users = num(key, value)?,
            "user_features" => self.user_features = num(key, value)?,
            "reward_threshold" => self.reward_threshold = num(key, value)?,
            "drift_every" => self.drift_every = num(key, value)?,
            "drift_weight" => self.drift_weight = num(key, value)?,
            "replay_capacity" => self.replay_capacity = num(key, value)?,
            "per_alpha" => self.per_alpha = num(key, value)?,
            "per_beta_start" => self.per_beta_start = num(key, value)?,
            "per_beta_end" => self.per_beta_end = num(key, value)?,
            "noise_start" => self.noise_start = num(key, value)?,
            "noise_end" => self.noise_end = num(key, value)?,
            "grad_log_every" => self.grad_log_every = num(key, value)?,
            "smoothing_window" => self.smoothing_window = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.crir_without_cl && self.prcl_frequency != 0.0 {
            return fail("crir_without_cl requires prcl_frequency = 0".into());
        }
        if !(0.0..=1.0).contains(&self.prcl_frequency) {
            return fail(format!(
                "prcl_frequency {} outside [0, 1]",
                self.prcl_frequency
            ));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("embedding_dim", self.embedding_dim),
            ("hidden_units", self.hidden_units),
            ("attention_hidden", self.attention_hidden),
            ("max_history", self.max_history),
            ("top_k", self.top_k),
            ("max_steps", self.max_steps),
            ("users", self.users),
            ("user_features", self.user_features),
            ("replay_capacity", self.replay_capacity),
            ("grad_log_every", self.grad_log_every),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.replay_capacity < self.batch_size {
            return fail("replay_capacity smaller than batch_size".into());
        }
        if self.learning_rate.is_nan()
            || self.learning_rate <= 0.0
            || !(0.0..=1.0).contains(&self.discount)
            || !(0.0..=1.0).contains(&self.tau)
        {
            return fail("learning_rate must be positive; discount and tau in [0, 1]".into());
        }
        if self.training == TrainingChoice::Constrained
            && self.gradient_routing != GradientRouting::Both
        {
            return fail(
                "constrained training combines both losses; gradient_routing must be both".into(),
            );
        }
        if !(0.0..).contains(&self.gamma_prcl) || !(0.0..).contains(&self.per_alpha) {
            return fail("gamma_prcl and per_alpha must be non-negative".into());
        }
        if !(self.noise_start >= 0.0 && self.noise_end >= 0.0) {
            return fail("noise scales must be non-negative".into());
        }
        if self.env == EnvKind::Ml1m && !self.data_dir.join("ratings.dat").exists() {
            return fail(format!("no ratings.dat under {}", self.data_dir.display()));
        }
        Ok(())
    }

    pub fn strategy(&self) -> CoefficientStrategy {
        match self.coefficient {
            CoefficientKind::Positional => CoefficientStrategy::Positional,
            CoefficientKind::Balanced => CoefficientStrategy::balanced(self.max_history),
        }
    }

    pub fn mechanism(&self) -> TrainingMechanism {
        TrainingMechanism {
            kind: match self.training {
                TrainingChoice::Auxiliary => TrainingKind::Auxiliary,
                TrainingChoice::Constrained => TrainingKind::Constrained {
                    gamma_prcl: self.gamma_prcl,
                },
            },
            routing: self.gradient_routing,
        }
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|k| self.seed_base + k).collect()
    }

    /// The config in the same text form [`ExperimentConfig::parse`] reads.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("run_name", self.run_name.clone());
        kv(
            "env",
            match self.env {
                EnvKind::Ml1m => "ml1m",
                EnvKind::Synthetic => "synthetic",
            }
            .into(),
        );
        kv("data_dir", self.data_dir.display().to_string());
        kv("episodes", self.episodes.to_string());
        kv("seeds", self.seeds.to_string());
        kv("seed_base", self.seed_base.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("prcl_frequency", self.prcl_frequency.to_string());
        kv(
            "coefficient",
            match self.coefficient {
                CoefficientKind::Positional => "positional",
                CoefficientKind::Balanced => "balanced",
            }
            .into(),
        );
        kv(
            "sampling",
            match self.sampling {
                SamplingMechanism::Mixed => "mixed",
                SamplingMechanism::Divided => "divided",
                SamplingMechanism::Combined => "combined",
            }
            .into(),
        );
        kv(
            "training",
            match self.training {
                TrainingChoice::Auxiliary => "auxiliary",
                TrainingChoice::Constrained => "constrained",
            }
            .into(),
        );
        kv("gamma_prcl", self.gamma_prcl.to_string());
        kv(
            "gradient_routing",
            routing_name(self.gradient_routing).into(),
        );
        kv("crir_without_cl", self.crir_without_cl.to_string());
        kv("embedding_dim", self.embedding_dim.to_string());
        kv("hidden_units", self.hidden_units.to_string());
        kv("attention_hidden", self.attention_hidden.to_string());
        kv("max_history", self.max_history.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("discount", self.discount.to_string());
        kv("tau", self.tau.to_string());
        kv("top_k", self.top_k.to_string());
        kv("max_steps", self.max_steps.to_string());
        kv("interest_shift", self.interest_shift.to_string());
        kv("early_termination", self.early_termination.to_string());
        kv("users", self.users.to_string());
        kv("user_features", self.user_features.to_string());
        kv("reward_threshold", self.reward_threshold.to_string());
        kv("drift_every", self.drift_every.to_string());
        kv("drift_weight", self.drift_weight.to_string());
        kv("replay_capacity", self.replay_capacity.to_string());
        kv("per_alpha", self.per_alpha.to_string());
        kv("per_beta_start", self.per_beta_start.to_string());
        kv("per_beta_end", self.per_beta_end.to_string());
        kv("noise_start", self.noise_start.to_string());
        kv("noise_end", self.noise_end.to_string());
        kv("grad_log_every", self.grad_log_every.to_string());
        kv("smoothing_window", self.smoothing_window.to_string());
        s
    }
}

fn parse_env(v: &str) -> Result<EnvKind> {
    match v {
        "ml1m" => Ok(EnvKind::Ml1m),
        "synthetic" => Ok(EnvKind::Synthetic),
        _ => Err(Error::Config(format!("unknown env `{v}`"))),
    }
}

fn parse_routing(v: &str) -> Result<GradientRouting> {
    match v {
        "only_RL" | "only_rl" => Ok(GradientRouting::OnlyRl),
        "only_PRCL" | "only_prcl" => Ok(GradientRouting::OnlyPrcl),
        "both" => Ok(GradientRouting::Both),
        _ => Err(Error::Config(format!("unknown gradient_routing `{v}`"))),
    }
}

pub fn routing_name(r: GradientRouting) -> &'static str {
    match r {
        GradientRouting::OnlyRl => "only_RL",
        GradientRouting::OnlyPrcl => "only_PRCL",
        GradientRouting::Both => "both",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_environment() {
        assert_eq!(ExperimentConfig::for_env(EnvKind::Ml1m).episodes, 2000);
        assert_eq!(
            ExperimentConfig::for_env(EnvKind::Synthetic).episodes,
            20000
        );
        let c = ExperimentConfig::parse("env = synthetic\nbatch_size = 16 # small\n").unwrap();
        assert_eq!(c.env, EnvKind::Synthetic);
        assert_eq!(c.episodes, 20000);
        assert_eq!(c.batch_size, 16);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(
            ExperimentConfig::parse("episodez = 3"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("episodes"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("episodes = many"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn without_cl_forces_zero_frequency() {
        let c = ExperimentConfig::parse("crir_without_cl = true").unwrap();
        assert_eq!(c.prcl_frequency, 0.0);
        assert!(ExperimentConfig::parse("crir_without_cl = true\nprcl_frequency = 0.5").is_err());
        assert!(ExperimentConfig::parse("crir_without_cl = true\nprcl_frequency = 0").is_ok());
    }

    #[test]
    fn text_round_trip() {
        let mut c = ExperimentConfig::for_env(EnvKind::Synthetic);
        c.gradient_routing = GradientRouting::OnlyPrcl;
        c.coefficient = CoefficientKind::Balanced;
        c.sampling = SamplingMechanism::Divided;
        c.learning_rate = 0.0005;
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn constrained_needs_both_routing() {
        assert!(
            ExperimentConfig::parse("training = constrained\ngradient_routing = only_RL").is_err()
        );
        assert!(ExperimentConfig::parse("training = constrained\ngamma_prcl = 1.0").is_ok());
    }
}
