//! The interaction and update loop for one (config, seed) run.

use std::collections::HashSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{EnvKind, ExperimentConfig};
use super::metrics::{compute_ctr, EpisodeMetrics};
use crate::agent::{
    noise_sigma, resolve_action, Agent, AgentConfig, ConstrainedPrcl, TrainingKind,
};
use crate::env::{load_ml1m_dir, Ml1mConfig, Ml1mEnv, StepOutcome, SyntheticConfig, SyntheticEnv};
use crate::error::Result;
use crate::numcore::ParamId;
use crate::prcl::assemble_prcl_batch;
use crate::replay::{ReplayBuffer, SampleIndex, Transition};
use crate::staterep::{BehaviorRecord, EncodeInput, EncoderConfig, InputSpace};

/// Population seed of the synthetic environment; fixed so that run seeds
/// vary the learner, not the users.
const SYNTHETIC_POPULATION_SEED: u64 = 0x5eed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GradSource {
    Rl,
    Prcl,
}

impl GradSource {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Rl => "RL",
            Self::Prcl => "PRCL",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradNormRecord {
    pub episode: usize,
    pub update_step: u64,
    pub source: GradSource,
    pub grad_norm: f64,
}

/// Optional bookkeeping for invariant checks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Track which transitions reached critic updates and contrastive batches.
    pub track_coverage: bool,
    /// Compare embedding parameters bitwise around every RL and PRCL pass.
    pub audit_routing: bool,
}

/// Transitions (by slot and insertion stamp) that reached each kind of update.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Coverage {
    pub rl: HashSet<SampleIndex>,
    pub prcl: HashSet<SampleIndex>,
}

impl Coverage {
    /// RL-updated transitions that never appeared in a contrastive batch.
    pub fn uncovered(&self) -> usize {
        self.rl.difference(&self.prcl).count()
    }

    pub fn fraction_covered(&self) -> f64 {
        if self.rl.is_empty() {
            return 1.0;
        }
        1.0 - self.uncovered() as f64 / self.rl.len() as f64
    }
}

/// How many passes of each kind left the embedding parameters bitwise changed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RoutingAudit {
    pub rl_passes: u64,
    pub rl_changed: u64,
    pub prcl_passes: u64,
    pub prcl_changed: u64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub episodes: Vec<EpisodeMetrics>,
    pub grad_norms: Vec<GradNormRecord>,
    pub coverage: Option<Coverage>,
    pub audit: Option<RoutingAudit>,
    pub update_steps: u64,
    pub prcl_updates: u64,
    pub stale_priority_skips: u64,
    pub agent: Agent,
}

enum Sim {
    Ml1m(Box<Ml1mEnv>),
    Synthetic(Box<SyntheticEnv>),
}

impl Sim {
    fn build(config: &ExperimentConfig) -> Result<Self> {
        Ok(match config.env {
            EnvKind::Ml1m => {
                let table = load_ml1m_dir(&config.data_dir)?;
                Sim::Ml1m(Box::new(Ml1mEnv::new(
                    table,
                    Ml1mConfig {
                        max_steps: config.max_steps,
                        interest_shift: config.interest_shift,
                        early_termination: config.early_termination,
                    },
                )?))
            }
            EnvKind::Synthetic => Sim::Synthetic(Box::new(SyntheticEnv::new(
                SyntheticConfig {
                    users: config.users,
                    user_features: config.user_features,
                    dim: config.embedding_dim,
                    threshold: config.reward_threshold,
                    drift_every: config.drift_every,
                    drift_weight: config.drift_weight,
                    max_steps: config.max_steps,
                },
                SYNTHETIC_POPULATION_SEED,
            )?)),
        })
    }

    fn encoder_config(&self, config: &ExperimentConfig) -> EncoderConfig {
        let (space, reward_range) = match self {
            Sim::Ml1m(e) => (
                InputSpace::Discrete {
                    users: e.user_count(),
                    items: e.item_count(),
                },
                (-1.0, 1.0),
            ),
            Sim::Synthetic(e) => (
                InputSpace::Continuous {
                    user_features: e.config().user_features,
                    item_features: e.config().dim,
                },
                (0.0, 1.0),
            ),
        };
        EncoderConfig {
            space,
            repr_dim: config.embedding_dim,
            embed_dim: config.embedding_dim,
            attention_hidden: config.attention_hidden,
            max_history: config.max_history,
            reward_range,
        }
    }

    fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> crate::env::EpisodeState {
        match self {
            Sim::Ml1m(e) => e.reset(rng).clone(),
            Sim::Synthetic(e) => e.reset(rng).clone(),
        }
    }

    fn history(&self) -> &[BehaviorRecord] {
        match self {
            Sim::Ml1m(e) => &e.state().history,
            Sim::Synthetic(e) => &e.state().history,
        }
    }

    fn step<R: Rng + ?Sized>(
        &mut self,
        agent: &Agent,
        action: &[f64],
        top_k: usize,
        rng: &mut R,
    ) -> Result<StepOutcome> {
        match self {
            Sim::Ml1m(e) => {
                let table = agent
                    .item_embeddings()
                    .expect("discrete encoder has an item table");
                let ids = resolve_action(action, table, top_k.min(e.item_count()));
                e.step(&ids, rng)
            }
            Sim::Synthetic(e) => e.step(action, rng),
        }
    }
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Builds the agent a run with this config and seed starts from.
pub fn initial_agent(config: &ExperimentConfig, seed: u64) -> Result<Agent> {
    let sim = Sim::build(config)?;
    build_agent(config, &sim, seed)
}

fn build_agent(config: &ExperimentConfig, sim: &Sim, seed: u64) -> Result<Agent> {
    let mut init = rng_stream(seed, 0);
    Agent::new(
        AgentConfig {
            encoder: sim.encoder_config(config),
            action_dim: config.embedding_dim,
            hidden: config.hidden_units,
            gamma: config.discount,
            tau: config.tau,
            learning_rate: config.learning_rate,
        },
        &mut init,
    )
}

fn changed(before: &[Vec<u64>], agent: &Agent, ids: &[ParamId]) -> bool {
    agent.store.snapshot(ids) != before
}

/// Runs `config.episodes` episodes with `seed`, calling `on_episode` after each.
pub fn train(
    config: &ExperimentConfig,
    seed: u64,
    options: RunOptions,
    mut on_episode: impl FnMut(&EpisodeMetrics),
) -> Result<RunResult> {
    config.validate()?;
    let mut sim = Sim::build(config)?;
    let mut agent = build_agent(config, &sim, seed)?;
    let mut env_rng = rng_stream(seed, 1);
    let mut policy_rng = rng_stream(seed, 2);
    let mut replay_rng = rng_stream(seed, 3);
    let mut prcl_rng = rng_stream(seed, 4);
    let mut gate_rng = rng_stream(seed, 5);

    let mut buffer = ReplayBuffer::new(config.replay_capacity, config.per_alpha)?;
    let strategy = config.strategy();
    let mechanism = config.mechanism();
    let embeddings = agent.embedding_params();
    let mut coverage = options.track_coverage.then(Coverage::default);
    let mut audit = options.audit_routing.then(RoutingAudit::default);

    let mut episodes = Vec::with_capacity(config.episodes);
    let mut grad_norms = Vec::new();
    let mut update_steps = 0u64;
    let mut prcl_updates = 0u64;

    for episode in 0..config.episodes {
        let progress = episode as f64 / config.episodes as f64;
        let sigma = noise_sigma(config.noise_start, config.noise_end, progress);
        let beta = config.per_beta_start + (config.per_beta_end - config.per_beta_start) * progress;
        let state = sim.reset(&mut env_rng);
        let user = state.user;
        let mut history: Arc<[BehaviorRecord]> = Arc::from(Vec::new());
        let mut rewards = Vec::with_capacity(config.max_steps);

        loop {
            let action = agent.select_action(&user, &history, sigma, &mut policy_rng)?;
            let outcome = sim.step(&agent, &action, config.top_k, &mut env_rng)?;
            rewards.push(outcome.reward);
            let next_history: Arc<[BehaviorRecord]> = Arc::from(sim.history());
            buffer.push(Transition {
                user: user.clone(),
                history: history.clone(),
                action,
                reward: outcome.reward,
                next_history: next_history.clone(),
                done: outcome.done,
            });
            history = next_history;

            if buffer.len() >= config.batch_size {
                update_steps += 1;
                let log_grads = update_steps.is_multiple_of(config.grad_log_every as u64);
                let sample = buffer.sample_per(config.batch_size, beta, &mut replay_rng)?;
                let gate = gate_rng.gen::<f64>() < config.prcl_frequency;

                let mut prcl_batch = Vec::new();
                let mut prcl_indices = Vec::new();
                if gate {
                    let random = if config.sampling.needs_random_batch() {
                        buffer.sample_uniform_indices(config.batch_size, &mut replay_rng)?
                    } else {
                        Vec::new()
                    };
                    prcl_indices = assemble_prcl_batch(&sample.indices, &random, config.sampling);
                    prcl_batch = prcl_indices
                        .iter()
                        .map(|i| {
                            buffer
                                .get(i.slot)
                                .expect("sampled slot is resident")
                                .clone()
                        })
                        .collect::<Vec<_>>();
                }
                let prcl_inputs: Vec<EncodeInput<'_>> =
                    prcl_batch.iter().map(|t| t.state_input()).collect();

                if gate && mechanism.kind == TrainingKind::Auxiliary {
                    let before = audit.map(|_| agent.store.snapshot(&embeddings));
                    let out = agent.prcl_update(
                        &prcl_inputs,
                        strategy,
                        mechanism.routing,
                        &mut prcl_rng,
                    )?;
                    prcl_updates += 1;
                    log::debug!("step {update_steps} contrastive loss {:.6}", out.mean_loss);
                    if let (Some(a), Some(b)) = (audit.as_mut(), before) {
                        a.prcl_passes += 1;
                        a.prcl_changed += changed(&b, &agent, &embeddings) as u64;
                    }
                    if let (true, Some(g)) = (log_grads, out.grad_norm) {
                        grad_norms.push(GradNormRecord {
                            episode,
                            update_step: update_steps,
                            source: GradSource::Prcl,
                            grad_norm: g,
                        });
                    }
                }
                if let Some(c) = coverage.as_mut() {
                    c.prcl.extend(prcl_indices.iter().copied());
                    c.rl.extend(sample.indices.iter().copied());
                }

                let before = audit.map(|_| agent.store.snapshot(&embeddings));
                let batch: Vec<&Transition> =
                    sample.transitions.iter().map(|t| t.as_ref()).collect();
                let constrained = (gate
                    && matches!(mechanism.kind, TrainingKind::Constrained { .. }))
                .then(|| ConstrainedPrcl {
                    batch: &prcl_inputs,
                    strategy,
                    rng: &mut prcl_rng,
                });
                if constrained.is_some() {
                    prcl_updates += 1;
                }
                let critic =
                    agent.critic_update(&batch, &sample.weights, mechanism, constrained)?;
                agent.actor_update(&critic.states)?;
                if let (Some(a), Some(b)) = (audit.as_mut(), before) {
                    a.rl_passes += 1;
                    a.rl_changed += changed(&b, &agent, &embeddings) as u64;
                }
                if log_grads {
                    grad_norms.push(GradNormRecord {
                        episode,
                        update_step: update_steps,
                        source: GradSource::Rl,
                        grad_norm: critic.grad_norm,
                    });
                }
                buffer.update_priorities(&sample.indices, &critic.td_abs)?;
                agent.soft_update_targets()?;
            }
            if outcome.done {
                break;
            }
        }

        let metrics = EpisodeMetrics {
            episode,
            cumulative_reward: rewards.iter().sum(),
            ctr: compute_ctr(&rewards)?,
            episode_length: rewards.len(),
            seed,
        };
        on_episode(&metrics);
        episodes.push(metrics);
    }

    Ok(RunResult {
        seed,
        episodes,
        grad_norms,
        coverage,
        audit,
        update_steps,
        prcl_updates,
        stale_priority_skips: buffer.stale_skips(),
        agent,
    })
}
