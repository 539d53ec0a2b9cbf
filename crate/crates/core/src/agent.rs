//! DDPG actor-critic over encoded user states.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numcore::{
    AdamConfig, AdamState, Group, Mlp, MlpStats, Norm, OutputActivation, ParamId, ParamStore, Tape,
    Tensor, Var,
};
use crate::prcl::{self, CoefficientStrategy, PrclOutcome};
use crate::replay::Transition;
use crate::staterep::{BehaviorRecord, EncodeInput, EncoderConfig, StateEncoder, UserProfile};

/// Which losses may update the embedding/encoding parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GradientRouting {
    OnlyRl,
    OnlyPrcl,
    Both,
}

impl GradientRouting {
    pub fn rl_updates_embeddings(self) -> bool {
        !matches!(self, Self::OnlyPrcl)
    }

    pub fn prcl_updates_embeddings(self) -> bool {
        !matches!(self, Self::OnlyRl)
    }
}

/// How the contrastive loss enters training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainingKind {
    /// A separate optimization step before the RL update.
    Auxiliary,
    /// Added to the critic loss: `½δ² + gamma_prcl · L_PRCL`.
    Constrained { gamma_prcl: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingMechanism {
    pub kind: TrainingKind,
    pub routing: GradientRouting,
}

impl Default for TrainingMechanism {
    fn default() -> Self {
        Self {
            kind: TrainingKind::Auxiliary,
            routing: GradientRouting::Both,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub encoder: EncoderConfig,
    pub action_dim: usize,
    pub hidden: usize,
    pub gamma: f64,
    pub tau: f64,
    pub learning_rate: f64,
}

/// `δ = r + γ V'(s') − V(s, a)`, with the bootstrap dropped on terminal steps.
pub fn td_error(reward: f64, gamma: f64, done: bool, next_value: f64, value: f64) -> f64 {
    let bootstrap = if done { 0.0 } else { gamma * next_value };
    reward + bootstrap - value
}

/// L2 norm over the gradients of the given parameters.
pub fn gradient_norm(store: &ParamStore, ids: &[ParamId]) -> Result<f64> {
    let mut sq = 0.0;
    for &id in ids {
        let g = store
            .get(id)
            .grad()
            .ok_or_else(|| Error::MissingGradient(store.name(id).to_string()))?;
        sq += g.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(sq.sqrt())
}

/// Top-`k` items by cosine similarity with `action`; ties go to the lower
/// id and zero-norm vectors have similarity 0.
pub fn resolve_action(action: &[f64], embeddings: &Tensor, top_k: usize) -> Vec<usize> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let an = norm(action);
    let mut scored: Vec<(usize, f64)> = (0..embeddings.rows())
        .map(|i| {
            let e = embeddings.row_slice(i);
            let en = norm(e);
            let sim = if an == 0.0 || en == 0.0 {
                0.0
            } else {
                action.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() / (an * en)
            };
            (i, sim)
        })
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    scored
        .into_iter()
        .take(top_k.max(1))
        .map(|(i, _)| i)
        .collect()
}

/// Contrastive inputs for a constrained critic update.
pub struct ConstrainedPrcl<'a, R: Rng + ?Sized> {
    pub batch: &'a [EncodeInput<'a>],
    pub strategy: CoefficientStrategy,
    pub rng: &'a mut R,
}

#[derive(Debug, Clone)]
pub struct CriticOutcome {
    pub loss: f64,
    /// `|δ|` per transition, for priority refresh.
    pub td_abs: Vec<f64>,
    /// States of the batch as encoded for this update.
    pub states: Tensor,
    /// Gradient norm of the monitored item-encoder layer from this pass.
    pub grad_norm: f64,
    /// Contrastive part of a constrained loss, when one was formed.
    pub prcl_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub config: AgentConfig,
    pub store: ParamStore,
    pub encoder: StateEncoder,
    pub actor: Mlp,
    pub critic: Mlp,
    pub actor_target: Mlp,
    pub critic_target: Mlp,
    target_pairs: Vec<(ParamId, ParamId)>,
    critic_opt: AdamState,
    embedding_opt: AdamState,
    actor_opt: AdamState,
    prcl_opt: AdamState,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(config: AgentConfig, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let encoder = StateEncoder::new(&mut store, config.encoder.clone(), rng);
        let ds = config.encoder.state_dim();
        let (h, d) = (config.hidden, config.action_dim);
        let actor_widths = [ds, h, h, d];
        let critic_widths = [ds + d, h, h, 1];
        let actor = Mlp::new(
            &mut store,
            "actor",
            Group::Actor,
            &actor_widths,
            OutputActivation::Tanh,
            rng,
        );
        let critic = Mlp::new(
            &mut store,
            "critic",
            Group::Critic,
            &critic_widths,
            OutputActivation::Identity,
            rng,
        );
        let actor_target = Mlp::new(
            &mut store,
            "actor_target",
            Group::Target,
            &actor_widths,
            OutputActivation::Tanh,
            rng,
        );
        let critic_target = Mlp::new(
            &mut store,
            "critic_target",
            Group::Target,
            &critic_widths,
            OutputActivation::Identity,
            rng,
        );
        let target_pairs: Vec<_> = actor
            .params()
            .into_iter()
            .zip(actor_target.params())
            .chain(critic.params().into_iter().zip(critic_target.params()))
            .collect();
        store.hard_update(&target_pairs)?;
        let adam = AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        };
        let mut critic_params = critic.params();
        critic_params.extend(encoder.attention_params());
        let critic_opt = AdamState::new(&store, critic_params, adam);
        let embedding_opt = AdamState::new(&store, encoder.embedding_params(), adam);
        let actor_opt = AdamState::new(&store, actor.params(), adam);
        let prcl_opt = AdamState::new(&store, encoder.behavior_params(), adam);
        Ok(Self {
            config,
            store,
            encoder,
            actor,
            critic,
            actor_target,
            critic_target,
            target_pairs,
            critic_opt,
            embedding_opt,
            actor_opt,
            prcl_opt,
        })
    }

    pub fn target_pairs(&self) -> &[(ParamId, ParamId)] {
        &self.target_pairs
    }

    pub fn embedding_params(&self) -> Vec<ParamId> {
        self.encoder.embedding_params()
    }

    fn critic_value(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        critic: &Mlp,
        states: Var,
        actions: Var,
        norm: Norm,
    ) -> Result<(Var, MlpStats)> {
        let input = tape.concat_cols(&[states, actions])?;
        critic.forward(tape, store, input, norm)
    }

    /// Bootstrapped targets `r + γ V'(s', π'(s'))` for a batch.
    pub fn td_targets(&self, batch: &[&Transition]) -> Result<Vec<f64>> {
        let mut tape = Tape::tracking(&[]);
        let next: Vec<_> = batch.iter().map(|t| t.next_input()).collect();
        let enc = self
            .encoder
            .encode_batch(&mut tape, &self.store, &next, Norm::Batch)?;
        let (a, _) = self
            .actor_target
            .forward(&mut tape, &self.store, enc.states, Norm::Batch)?;
        let (q, _) = self.critic_value(
            &self.store,
            &mut tape,
            &self.critic_target,
            enc.states,
            a,
            Norm::Batch,
        )?;
        let q = tape.value(q).data();
        Ok(batch
            .iter()
            .zip(q)
            .map(|(t, &v)| td_error(t.reward, self.config.gamma, t.done, v, 0.0))
            .collect())
    }

    /// Builds `mean(w · ½δ²)` against fixed targets on `tape`, returning the
    /// loss, the per-transition `δ` and the encoded states.
    #[allow(clippy::type_complexity)]
    pub fn critic_loss(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        batch: &[&Transition],
        targets: &[f64],
        importance: &[f64],
    ) -> Result<(Var, Var, Var, MlpStats, MlpStats)> {
        if batch.len() != targets.len() || batch.len() != importance.len() {
            return Err(Error::InvalidArgument(
                "batch, targets and weights differ in length".into(),
            ));
        }
        let inputs: Vec<_> = batch.iter().map(|t| t.state_input()).collect();
        let enc = self
            .encoder
            .encode_batch(tape, store, &inputs, Norm::Batch)?;
        let actions =
            Tensor::from_rows(&batch.iter().map(|t| t.action.clone()).collect::<Vec<_>>())?;
        let actions = tape.constant(actions);
        let (q, critic_stats) =
            self.critic_value(store, tape, &self.critic, enc.states, actions, Norm::Batch)?;
        let y = tape.constant(Tensor::column(targets.to_vec())?);
        let delta = tape.sub(y, q)?;
        let sq = tape.mul(delta, delta)?;
        let half_w = tape.constant(Tensor::column(
            importance.iter().map(|w| 0.5 * w).collect(),
        )?);
        let weighted = tape.mul(sq, half_w)?;
        let loss = tape.mean(weighted)?;
        Ok((loss, delta, enc.states, enc.attention_stats, critic_stats))
    }

    /// One critic step. The state network always learns from the TD loss; the
    /// embeddings do when the routing allows it.
    pub fn critic_update<R: Rng + ?Sized>(
        &mut self,
        batch: &[&Transition],
        importance: &[f64],
        mechanism: TrainingMechanism,
        constrained: Option<ConstrainedPrcl<'_, R>>,
    ) -> Result<CriticOutcome> {
        let targets = self.td_targets(batch)?;
        let mut tape = Tape::tracking(&[Group::Critic, Group::StateNet, Group::Embedding]);
        let (mut loss, delta, states, attention_stats, critic_stats) =
            self.critic_loss(&self.store, &mut tape, batch, &targets, importance)?;
        let mut prcl_loss = None;
        if let (TrainingKind::Constrained { gamma_prcl }, Some(c)) = (mechanism.kind, constrained) {
            if let Some(built) = prcl::prcl_loss(
                &mut tape,
                &self.store,
                &self.encoder,
                c.batch,
                c.strategy,
                c.rng,
            )? {
                prcl_loss = Some(tape.scalar(built.loss));
                let scaled = tape.scale(built.loss, gamma_prcl)?;
                loss = tape.add(loss, scaled)?;
            }
        }
        let loss_value = tape.scalar(loss);
        let grads = tape.backward(loss)?;
        grads.write_into(&mut self.store);
        let layer = self.encoder.monitored_layer();
        let grad_norm = gradient_norm(&self.store, &[layer.weight, layer.bias])?;
        self.critic_opt.step(&mut self.store)?;
        let embeddings = self.encoder.embedding_params();
        if mechanism.routing.rl_updates_embeddings() {
            self.embedding_opt.step(&mut self.store)?;
        }
        self.store.clear_grads(&embeddings);
        self.encoder.attention.commit(&attention_stats);
        self.critic.commit(&critic_stats);
        Ok(CriticOutcome {
            loss: loss_value,
            td_abs: tape.value(delta).data().iter().map(|d| d.abs()).collect(),
            states: tape.value(states).detached(),
            grad_norm,
            prcl_loss,
        })
    }

    /// Builds `−mean V(s, π(s))` on `tape` for fixed states.
    pub fn actor_loss(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        states: &Tensor,
    ) -> Result<(Var, MlpStats)> {
        let s = tape.constant(states.detached());
        let (a, actor_stats) = self.actor.forward(tape, store, s, Norm::Batch)?;
        let (q, _) = self.critic_value(store, tape, &self.critic, s, a, Norm::Batch)?;
        let m = tape.mean(q)?;
        Ok((tape.scale(m, -1.0)?, actor_stats))
    }

    /// One deterministic policy-gradient step on the actor; critic and
    /// encoder are held fixed. Returns the mean value of the batch.
    pub fn actor_update(&mut self, states: &Tensor) -> Result<f64> {
        let mut tape = Tape::tracking(&[Group::Actor]);
        let (loss, stats) = self.actor_loss(&self.store, &mut tape, states)?;
        let value = -tape.scalar(loss);
        let grads = tape.backward(loss)?;
        grads.write_into(&mut self.store);
        self.actor_opt.step(&mut self.store)?;
        self.actor.commit(&stats);
        Ok(value)
    }

    /// One contrastive step on the behavior encoder.
    pub fn prcl_update<R: Rng + ?Sized>(
        &mut self,
        batch: &[EncodeInput<'_>],
        strategy: CoefficientStrategy,
        routing: GradientRouting,
        rng: &mut R,
    ) -> Result<PrclOutcome> {
        prcl::prcl_update(
            &self.encoder,
            &mut self.store,
            &mut self.prcl_opt,
            batch,
            strategy,
            rng,
            routing.prcl_updates_embeddings(),
        )
    }

    pub fn soft_update_targets(&mut self) -> Result<()> {
        self.store.soft_update(&self.target_pairs, self.config.tau)
    }

    /// Deterministic policy output for one state, using running statistics.
    pub fn policy(&self, user: &UserProfile, history: &[BehaviorRecord]) -> Result<Vec<f64>> {
        let mut tape = Tape::tracking(&[]);
        let enc = self.encoder.encode_batch(
            &mut tape,
            &self.store,
            &[EncodeInput { user, history }],
            Norm::Running,
        )?;
        let (a, _) = self
            .actor
            .forward(&mut tape, &self.store, enc.states, Norm::Running)?;
        Ok(tape.value(a).data().to_vec())
    }

    /// Policy output plus Gaussian noise of scale `sigma`, clipped to `[-1, 1]`.
    pub fn select_action<R: Rng + ?Sized>(
        &self,
        user: &UserProfile,
        history: &[BehaviorRecord],
        sigma: f64,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let mut action = self.policy(user, history)?;
        add_exploration_noise(&mut action, sigma, rng)?;
        Ok(action)
    }

    /// Current item embedding table, for discrete action resolution.
    pub fn item_embeddings(&self) -> Option<&Tensor> {
        self.encoder.item_table().map(|id| self.store.get(id))
    }
}

/// Adds `N(0, sigma²)` to every coordinate and clips to `[-1, 1]`.
pub fn add_exploration_noise<R: Rng + ?Sized>(
    action: &mut [f64],
    sigma: f64,
    rng: &mut R,
) -> Result<()> {
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for a in action.iter_mut() {
            *a += normal.sample(rng);
        }
    }
    for a in action.iter_mut() {
        *a = a.clamp(-1.0, 1.0);
    }
    Ok(())
}

/// Noise scale decaying linearly from `start` to `end` over the first half
/// of training, constant afterwards.
pub fn noise_sigma(start: f64, end: f64, progress: f64) -> f64 {
    let p = (progress / 0.5).clamp(0.0, 1.0);
    if p >= 1.0 {
        return end;
    }
    start + (end - start) * p
}
