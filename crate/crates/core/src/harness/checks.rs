//! Built-in numerical checks exposed through the CLI.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{Agent, AgentConfig};
use crate::env::ml1m_get_reward;
use crate::error::Result;
use crate::numcore::{param_finite_diff_check, ParamId, Tensor};
use crate::prcl::{prcl_loss, CoefficientStrategy};
use crate::replay::Transition;
use crate::staterep::{
    BehaviorRecord, EncodeInput, EncoderConfig, InputSpace, ItemRef, UserProfile,
};

/// Largest relative error between reverse-mode and central-difference
/// gradients for one loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub loss: &'static str,
    pub points: usize,
    pub max_rel_error: f64,
}

const USERS: usize = 5;
const ITEMS: usize = 12;
const DIM: usize = 6;
const BATCH: usize = 4;
const STEP: f64 = 1e-6;
const COORDS_PER_PARAM: usize = 2;

fn small_agent(seed: u64) -> Result<Agent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Agent::new(
        AgentConfig {
            encoder: EncoderConfig {
                space: InputSpace::Discrete {
                    users: USERS,
                    items: ITEMS,
                },
                repr_dim: DIM,
                embed_dim: DIM,
                attention_hidden: 5,
                max_history: 10,
                reward_range: (-1.0, 1.0),
            },
            action_dim: DIM,
            hidden: 8,
            gamma: 0.9,
            tau: 0.001,
            learning_rate: 0.001,
        },
        &mut rng,
    )
}

fn random_history<R: Rng>(len: usize, rng: &mut R) -> Vec<BehaviorRecord> {
    (0..len)
        .map(|k| BehaviorRecord {
            item: ItemRef::Id(rng.gen_range(0..ITEMS)),
            feedback: rng.gen_range(-1.0..1.0),
            step_index: k,
        })
        .collect()
}

fn random_batch<R: Rng>(rng: &mut R) -> Vec<Transition> {
    (0..BATCH)
        .map(|_| {
            let len = rng.gen_range(4..=10);
            let mut h = random_history(len + 1, rng);
            let next: Arc<[BehaviorRecord]> = Arc::from(h.clone());
            h.pop();
            Transition {
                user: UserProfile::with_id(rng.gen_range(0..USERS)),
                history: Arc::from(h),
                action: (0..DIM).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                reward: rng.gen_range(-1.0..1.0),
                next_history: next,
                done: rng.gen_bool(0.2),
            }
        })
        .collect()
}

/// Checks the contrastive, critic, constrained and actor losses at `points`
/// random parameter/batch draws each.
pub fn loss_gradient_checks(points: usize, seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut worst = [0.0f64; 4];
    for p in 0..points as u64 {
        let point_seed = seed.wrapping_mul(1_000_003).wrapping_add(p);
        let agent = small_agent(point_seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(point_seed ^ 0xabcdef);
        let batch = random_batch(&mut rng);
        let refs: Vec<&Transition> = batch.iter().collect();
        let inputs: Vec<EncodeInput<'_>> = batch.iter().map(|t| t.state_input()).collect();
        let weights: Vec<f64> = (0..BATCH).map(|_| rng.gen_range(0.1..1.0)).collect();
        let targets = agent.td_targets(&refs)?;
        let sample_seed = rng.gen::<u64>();
        let strategy = CoefficientStrategy::Positional;

        let behavior = agent.encoder.behavior_params();
        let mut rl_params: Vec<ParamId> = agent.critic.params();
        rl_params.extend(agent.encoder.attention_params());
        rl_params.extend(agent.encoder.embedding_params());

        let prcl = |store: &_, tape: &mut _| {
            let mut r = ChaCha8Rng::seed_from_u64(sample_seed);
            let built = prcl_loss(tape, store, &agent.encoder, &inputs, strategy, &mut r)?
                .expect("histories long enough for samples");
            Ok(built.loss)
        };
        let critic = |store: &_, tape: &mut _| {
            Ok(agent.critic_loss(store, tape, &refs, &targets, &weights)?.0)
        };
        let constrained = |store: &_, tape: &mut crate::numcore::Tape| {
            let td = agent.critic_loss(store, tape, &refs, &targets, &weights)?.0;
            let mut r = ChaCha8Rng::seed_from_u64(sample_seed);
            let c = prcl_loss(tape, store, &agent.encoder, &inputs, strategy, &mut r)?
                .expect("histories long enough for samples");
            let scaled = tape.scale(c.loss, 0.5)?;
            tape.add(td, scaled)
        };
        let states = Tensor::from_rows(
            &(0..BATCH)
                .map(|_| (0..2 * DIM).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect::<Vec<_>>(),
        )?;
        let actor = |store: &_, tape: &mut _| Ok(agent.actor_loss(store, tape, &states)?.0);

        let store = &agent.store;
        let k = Some(COORDS_PER_PARAM);
        worst[0] = worst[0].max(param_finite_diff_check(store, &behavior, STEP, k, p, prcl)?);
        worst[1] = worst[1].max(param_finite_diff_check(
            store, &rl_params, STEP, k, p, critic,
        )?);
        worst[2] = worst[2].max(param_finite_diff_check(
            store,
            &rl_params,
            STEP,
            k,
            p,
            constrained,
        )?);
        worst[3] = worst[3].max(param_finite_diff_check(
            store,
            &agent.actor.params(),
            STEP,
            k,
            p,
            actor,
        )?);
    }
    Ok(["prcl_infonce", "critic_td", "constrained", "actor"]
        .into_iter()
        .zip(worst)
        .map(|(loss, max_rel_error)| GradCheckReport {
            loss,
            points,
            max_rel_error,
        })
        .collect())
}

/// Hand-traced reward table: (rating or `None` when unrated, repeats, reward).
pub const GOLDEN_REWARD_TABLE: [(Option<u8>, usize, f64); 20] = [
    (None, 0, -1.0),
    (Some(1), 0, -1.0),
    (Some(1), 3, -1.0),
    (Some(2), 0, 0.0625),
    (Some(3), 0, 0.25),
    (Some(4), 0, 0.5625),
    (Some(5), 0, 1.0),
    (Some(5), 1, 0.01875),
    (Some(5), 2, 0.01875),
    (Some(4), 4, 0.01875),
    (Some(4), 5, 0.00625),
    (Some(2), 5, 0.00625),
    (Some(3), 6, -0.1),
    (Some(5), 7, -0.3),
    (Some(3), 8, -0.5),
    (Some(3), 9, -0.7),
    (Some(4), 10, -0.9),
    (Some(5), 11, -1.0),
    (Some(2), 20, -1.0),
    (None, 5, -1.0),
];

/// Each golden row with the implementation's value next to it.
pub fn golden_reward_rows() -> Vec<(Option<u8>, usize, f64, f64)> {
    GOLDEN_REWARD_TABLE
        .iter()
        .map(|&(rate, repeats, expected)| (rate, repeats, expected, ml1m_get_reward(rate, repeats)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_rows_bit_equal() {
        for (rate, repeats, expected, got) in golden_reward_rows() {
            assert_eq!(
                expected.to_bits(),
                got.to_bits(),
                "rate {rate:?} repeats {repeats}"
            );
        }
    }

    #[test]
    fn gradients_match_at_a_few_points() {
        for r in loss_gradient_checks(3, 1).unwrap() {
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }
}
