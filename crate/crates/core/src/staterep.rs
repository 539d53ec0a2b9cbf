//! Behavior encoding and the user state vector.
//!
//! A behavior (item plus the feedback it received) is embedded as
//! `h = Linear([item embedding ‖ feedback embedding])`. The state of user `u`
//! with history `h_1..h_n` is
//!
//! ```text
//! s = [ (1/n) Σ u ⊙ h_τ  ‖  Σ Λ(u, h_τ) h_τ ]
//! ```
//!
//! where `Λ` is a DIN-style activation unit `MLP([u ‖ u⊙h ‖ h])` whose raw
//! (unnormalized) outputs double as interest weights for ranking.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{
    Group, Linear, Mlp, MlpStats, Norm, OutputActivation, ParamId, ParamStore, Tape, Tensor, Var,
};

pub const FEEDBACK_BUCKETS: usize = 5;

/// The item a behavior refers to.
#[derive(Debug, Clone, PartialEq)]
pub enum ItemRef {
    /// Catalog index in a discrete environment.
    Id(usize),
    /// Raw feature vector in a continuous environment.
    Features(Arc<[f64]>),
}

/// One interacted item plus the feedback the user gave it.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorRecord {
    pub item: ItemRef,
    pub feedback: f64,
    pub step_index: usize,
}

/// Raw user profile: an id, plus static features in continuous environments.
#[derive(Debug, Clone, PartialEq)]
pub struct UserProfile {
    pub id: usize,
    pub features: Option<Arc<[f64]>>,
}

impl UserProfile {
    pub fn with_id(id: usize) -> Self {
        Self { id, features: None }
    }
}

/// How users and items are presented to the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputSpace {
    /// Ids looked up in learnable embedding tables.
    Discrete { users: usize, items: usize },
    /// Feature vectors passed through learnable linear encoders.
    Continuous {
        user_features: usize,
        item_features: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub space: InputSpace,
    /// Width of behavior and user representations.
    pub repr_dim: usize,
    /// Width of item and feedback embeddings.
    pub embed_dim: usize,
    pub attention_hidden: usize,
    pub max_history: usize,
    pub reward_range: (f64, f64),
}

impl EncoderConfig {
    pub fn state_dim(&self) -> usize {
        2 * self.repr_dim
    }
}

/// Maps a feedback value to one of five equal-width buckets over the reward range.
pub fn feedback_bucket(feedback: f64, range: (f64, f64)) -> usize {
    let (lo, hi) = range;
    let width = (hi - lo) / FEEDBACK_BUCKETS as f64;
    if width <= 0.0 {
        return 0;
    }
    let b = ((feedback - lo) / width).floor();
    (b.max(0.0) as usize).min(FEEDBACK_BUCKETS - 1)
}

/// The newest `max` records of a history.
pub fn truncate_history(history: &[BehaviorRecord], max: usize) -> &[BehaviorRecord] {
    &history[history.len().saturating_sub(max)..]
}

#[derive(Debug, Clone)]
enum ItemEncoder {
    Table(ParamId),
    Features(Linear),
}

#[derive(Debug, Clone)]
enum UserEncoder {
    Table(ParamId),
    Features(Linear),
}

/// Encoder parameters `ω` (embeddings, projection) and the activation unit `φ`.
#[derive(Debug, Clone)]
pub struct StateEncoder {
    pub config: EncoderConfig,
    item: ItemEncoder,
    feedback: ParamId,
    projection: Linear,
    user: UserEncoder,
    pub attention: Mlp,
}

/// A user state together with the interest weight of every behavior used.
#[derive(Debug, Clone, PartialEq)]
pub struct StateRepresentation {
    pub state: Vec<f64>,
    pub weights: Vec<f64>,
}

/// One transition's view of a user and history.
#[derive(Debug, Clone, Copy)]
pub struct EncodeInput<'a> {
    pub user: &'a UserProfile,
    pub history: &'a [BehaviorRecord],
}

/// Result of encoding a batch of (user, history) pairs on a tape.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    /// `B x 2 D_R` states.
    pub states: Var,
    /// Unique behavior representations, `U x D_R`; `None` when every history is empty.
    pub behaviors: Option<Var>,
    /// For each input, the row of `behaviors` for each kept record, oldest first.
    pub behavior_rows: Vec<Vec<usize>>,
    /// For each input, the interest weight of each kept record.
    pub weights: Vec<Vec<f64>>,
    /// For each input, the step index of each kept record.
    pub steps: Vec<Vec<usize>>,
    pub attention_stats: MlpStats,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum ItemKey {
    Id(usize),
    Ptr(usize, usize),
}

impl StateEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: EncoderConfig,
        rng: &mut R,
    ) -> Self {
        let e = config.embed_dim;
        let d = config.repr_dim;
        // Embedding tables use the same uniform scheme with fan-in = width.
        let (item, user) = match config.space {
            InputSpace::Discrete { users, items } => (
                ItemEncoder::Table(store.add_uniform(
                    "item_embedding",
                    Group::Embedding,
                    items,
                    e,
                    e,
                    rng,
                )),
                UserEncoder::Table(store.add_uniform(
                    "user_embedding",
                    Group::Embedding,
                    users,
                    d,
                    d,
                    rng,
                )),
            ),
            InputSpace::Continuous {
                user_features,
                item_features,
            } => (
                ItemEncoder::Features(Linear::new(
                    store,
                    "item_encoder",
                    Group::Embedding,
                    item_features,
                    e,
                    rng,
                )),
                UserEncoder::Features(Linear::new(
                    store,
                    "user_encoder",
                    Group::Embedding,
                    user_features,
                    d,
                    rng,
                )),
            ),
        };
        let feedback = store.add_uniform(
            "feedback_embedding",
            Group::Embedding,
            FEEDBACK_BUCKETS,
            e,
            e,
            rng,
        );
        let projection = Linear::new(
            store,
            "behavior_projection",
            Group::Embedding,
            2 * e,
            d,
            rng,
        );
        let attention = Mlp::new(
            store,
            "activation_unit",
            Group::StateNet,
            &[3 * d, config.attention_hidden, 1],
            OutputActivation::Identity,
            rng,
        );
        Self {
            config,
            item,
            feedback,
            projection,
            user,
            attention,
        }
    }

    /// Parameters that produce behavior representations (what the contrastive
    /// loss can reach).
    pub fn behavior_params(&self) -> Vec<ParamId> {
        let mut ids = match &self.item {
            ItemEncoder::Table(t) => vec![*t],
            ItemEncoder::Features(l) => l.params().to_vec(),
        };
        ids.push(self.feedback);
        ids.extend(self.projection.params());
        ids
    }

    /// All embedding/encoding parameters, including the user encoder.
    pub fn embedding_params(&self) -> Vec<ParamId> {
        let mut ids = self.behavior_params();
        match &self.user {
            UserEncoder::Table(t) => ids.push(*t),
            UserEncoder::Features(l) => ids.extend(l.params()),
        }
        ids
    }

    pub fn attention_params(&self) -> Vec<ParamId> {
        self.attention.params()
    }

    /// The linear layer of the item encoder whose gradient scale is logged.
    pub fn monitored_layer(&self) -> &Linear {
        &self.projection
    }

    /// Item embedding table, for discrete environments.
    pub fn item_table(&self) -> Option<ParamId> {
        match &self.item {
            ItemEncoder::Table(t) => Some(*t),
            ItemEncoder::Features(_) => None,
        }
    }

    fn validate(&self, record: &BehaviorRecord) -> Result<()> {
        match (&record.item, self.config.space) {
            (ItemRef::Id(id), InputSpace::Discrete { items, .. }) => {
                if *id >= items {
                    return Err(Error::UnknownItem {
                        item: *id,
                        catalog: items,
                    });
                }
            }
            (ItemRef::Features(f), InputSpace::Continuous { item_features, .. }) => {
                if f.len() != item_features {
                    return Err(Error::FeatureWidth {
                        got: f.len(),
                        expected: item_features,
                    });
                }
            }
            _ => {
                return Err(Error::InvalidArgument(
                    "behavior item kind does not match the encoder input space".into(),
                ))
            }
        }
        Ok(())
    }

    fn validate_user(&self, user: &UserProfile) -> Result<()> {
        match (self.config.space, &user.features) {
            (InputSpace::Discrete { users, .. }, _) if user.id >= users => Err(
                Error::InvalidArgument(format!("user {} outside {} users", user.id, users)),
            ),
            (InputSpace::Continuous { user_features, .. }, Some(f)) if f.len() != user_features => {
                Err(Error::FeatureWidth {
                    got: f.len(),
                    expected: user_features,
                })
            }
            (InputSpace::Continuous { .. }, None) => Err(Error::InvalidArgument(
                "continuous encoder needs user features".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Representations of the given records, one row each.
    pub fn encode_behaviors(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        records: &[&BehaviorRecord],
    ) -> Result<Var> {
        for r in records {
            self.validate(r)?;
        }
        let items = match &self.item {
            ItemEncoder::Table(table) => {
                let ids: Vec<usize> = records
                    .iter()
                    .map(|r| match r.item {
                        ItemRef::Id(id) => id,
                        ItemRef::Features(_) => unreachable!("validated"),
                    })
                    .collect();
                let t = tape.param(store, *table);
                tape.gather_rows(t, &ids)?
            }
            ItemEncoder::Features(lin) => {
                let rows: Vec<Vec<f64>> = records
                    .iter()
                    .map(|r| match &r.item {
                        ItemRef::Features(f) => f.to_vec(),
                        ItemRef::Id(_) => unreachable!("validated"),
                    })
                    .collect();
                let x = tape.constant(Tensor::from_rows(&rows)?);
                lin.forward(tape, store, x)?
            }
        };
        let buckets: Vec<usize> = records
            .iter()
            .map(|r| feedback_bucket(r.feedback, self.config.reward_range))
            .collect();
        let fb_table = tape.param(store, self.feedback);
        let fb = tape.gather_rows(fb_table, &buckets)?;
        let joined = tape.concat_cols(&[items, fb])?;
        self.projection.forward(tape, store, joined)
    }

    /// Representation of a single behavior.
    pub fn encode_behavior(&self, store: &ParamStore, record: &BehaviorRecord) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let h = self.encode_behaviors(&mut tape, store, &[record])?;
        Ok(tape.value(h).data().to_vec())
    }

    /// User representations, one row per profile.
    pub fn encode_users(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        users: &[&UserProfile],
    ) -> Result<Var> {
        for u in users {
            self.validate_user(u)?;
        }
        match &self.user {
            UserEncoder::Table(t) => {
                let ids: Vec<usize> = users.iter().map(|u| u.id).collect();
                let table = tape.param(store, *t);
                tape.gather_rows(table, &ids)
            }
            UserEncoder::Features(lin) => {
                let rows: Vec<Vec<f64>> = users
                    .iter()
                    .map(|u| u.features.as_deref().expect("validated").to_vec())
                    .collect();
                let x = tape.constant(Tensor::from_rows(&rows)?);
                lin.forward(tape, store, x)
            }
        }
    }

    /// Activation-unit outputs for paired rows of `users` and `behaviors`.
    pub fn activation_unit(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        users: Var,
        behaviors: Var,
        norm: Norm,
    ) -> Result<(Var, MlpStats)> {
        let cross = tape.mul(users, behaviors)?;
        let input = tape.concat_cols(&[users, cross, behaviors])?;
        self.attention.forward(tape, store, input, norm)
    }

    /// Encodes a batch of (user, history) pairs into states and interest weights.
    ///
    /// Identical behaviors and identical (user, behavior) pairs are computed
    /// once and shared across the batch.
    pub fn encode_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &[EncodeInput<'_>],
        norm: Norm,
    ) -> Result<EncodedBatch> {
        let batch = inputs.len();
        if batch == 0 {
            return Err(Error::InvalidArgument("empty encode batch".into()));
        }
        let d = self.config.repr_dim;

        // Unique users.
        let mut user_index: HashMap<usize, usize> = HashMap::new();
        let mut unique_users: Vec<&UserProfile> = Vec::new();
        let user_row: Vec<usize> = inputs
            .iter()
            .map(|inp| {
                *user_index.entry(inp.user.id).or_insert_with(|| {
                    unique_users.push(inp.user);
                    unique_users.len() - 1
                })
            })
            .collect();

        // Unique behaviors and unique (user, behavior) pairs.
        let mut beh_index: HashMap<(ItemKey, usize), usize> = HashMap::new();
        let mut unique_beh: Vec<&BehaviorRecord> = Vec::new();
        let mut pair_index: HashMap<(usize, usize), usize> = HashMap::new();
        let mut pair_user = Vec::new();
        let mut pair_beh = Vec::new();
        let mut behavior_rows = Vec::with_capacity(batch);
        let mut entry_pairs = Vec::with_capacity(batch);
        let mut steps = Vec::with_capacity(batch);
        for (b, inp) in inputs.iter().enumerate() {
            let kept = truncate_history(inp.history, self.config.max_history);
            let mut rows = Vec::with_capacity(kept.len());
            let mut pairs = Vec::with_capacity(kept.len());
            for rec in kept {
                let item_key = match &rec.item {
                    ItemRef::Id(id) => ItemKey::Id(*id),
                    ItemRef::Features(f) => {
                        ItemKey::Ptr(Arc::as_ptr(f) as *const f64 as usize, f.len())
                    }
                };
                let bucket = feedback_bucket(rec.feedback, self.config.reward_range);
                let row = *beh_index.entry((item_key, bucket)).or_insert_with(|| {
                    unique_beh.push(rec);
                    unique_beh.len() - 1
                });
                let pair = *pair_index.entry((user_row[b], row)).or_insert_with(|| {
                    pair_user.push(user_row[b]);
                    pair_beh.push(row);
                    pair_user.len() - 1
                });
                rows.push(row);
                pairs.push(pair);
            }
            steps.push(kept.iter().map(|r| r.step_index).collect::<Vec<_>>());
            behavior_rows.push(rows);
            entry_pairs.push(pairs);
        }

        let users = self.encode_users(tape, store, &unique_users)?;
        if unique_beh.is_empty() {
            let states = tape.constant(Tensor::zeros(batch, 2 * d));
            return Ok(EncodedBatch {
                states,
                behaviors: None,
                behavior_rows,
                weights: vec![Vec::new(); batch],
                steps,
                attention_stats: Vec::new(),
            });
        }
        let behaviors = self.encode_behaviors(tape, store, &unique_beh)?;

        let pu = tape.gather_rows(users, &pair_user)?;
        let pb = tape.gather_rows(behaviors, &pair_beh)?;
        let (pair_weights, attention_stats) = self.activation_unit(tape, store, pu, pb, norm)?;

        let mut entry_beh = Vec::new();
        let mut entry_pair = Vec::new();
        let mut segment_of = Vec::new();
        let mut inv_len = Vec::new();
        for (b, (rows, pairs)) in behavior_rows.iter().zip(&entry_pairs).enumerate() {
            let inv = 1.0 / rows.len().max(1) as f64;
            entry_beh.extend_from_slice(rows);
            entry_pair.extend_from_slice(pairs);
            segment_of.extend(std::iter::repeat_n(b, rows.len()));
            inv_len.extend(std::iter::repeat_n(inv, rows.len()));
        }
        let batch_users = tape.gather_rows(users, &user_row)?;
        let entry_h = tape.gather_rows(behaviors, &entry_beh)?;
        let entry_w = tape.gather_rows(pair_weights, &entry_pair)?;
        let inv_len = tape.constant(Tensor::column(inv_len)?);
        let states = pool_states(tape, batch_users, entry_h, entry_w, inv_len, &segment_of)?;

        let pw = tape.value(pair_weights).data();
        let weights = entry_pairs
            .iter()
            .map(|pairs| pairs.iter().map(|&p| pw[p]).collect())
            .collect();
        Ok(EncodedBatch {
            states,
            behaviors: Some(behaviors),
            behavior_rows,
            weights,
            steps,
            attention_stats,
        })
    }

    /// State and interest weights for one user and history.
    pub fn state_representation(
        &self,
        store: &ParamStore,
        user: &UserProfile,
        history: &[BehaviorRecord],
        norm: Norm,
    ) -> Result<StateRepresentation> {
        let mut tape = Tape::new();
        let enc = self.encode_batch(&mut tape, store, &[EncodeInput { user, history }], norm)?;
        Ok(StateRepresentation {
            state: tape.value(enc.states).data().to_vec(),
            weights: enc.weights.into_iter().next().unwrap_or_default(),
        })
    }
}

/// Pools per-entry behaviors into states.
///
/// `users` holds one row per segment; `entry_behaviors`, `entry_weights`
/// (column) and `entry_inv_len` (column of `1/n` for the entry's segment)
/// hold one row per history entry, with `segment_of` naming its segment.
/// Segments without entries produce zero states.
pub fn pool_states(
    tape: &mut Tape,
    users: Var,
    entry_behaviors: Var,
    entry_weights: Var,
    entry_inv_len: Var,
    segment_of: &[usize],
) -> Result<Var> {
    let segments = tape.shape(users)[0];
    let scaled = tape.mul_col(entry_behaviors, entry_inv_len)?;
    let mean_h = tape.segment_sum(scaled, segment_of, segments)?;
    let average = tape.mul(users, mean_h)?;
    let weighted_rows = tape.mul_col(entry_behaviors, entry_weights)?;
    let weighted = tape.segment_sum(weighted_rows, segment_of, segments)?;
    tape.concat_cols(&[average, weighted])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            space: InputSpace::Discrete {
                users: 4,
                items: 10,
            },
            repr_dim: 6,
            embed_dim: 5,
            attention_hidden: 7,
            max_history: 50,
            reward_range: (-1.0, 1.0),
        }
    }

    fn encoder(seed: u64) -> (ParamStore, StateEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = StateEncoder::new(&mut store, small_config(), &mut rng);
        (store, enc)
    }

    fn rec(item: usize, feedback: f64, step: usize) -> BehaviorRecord {
        BehaviorRecord {
            item: ItemRef::Id(item),
            feedback,
            step_index: step,
        }
    }

    #[test]
    fn buckets_split_range_evenly() {
        let r = (-1.0, 1.0);
        assert_eq!(feedback_bucket(-1.0, r), 0);
        assert_eq!(feedback_bucket(-0.61, r), 0);
        assert_eq!(feedback_bucket(-0.59, r), 1);
        assert_eq!(feedback_bucket(0.0, r), 2);
        assert_eq!(feedback_bucket(0.99, r), 4);
        assert_eq!(feedback_bucket(1.0, r), 4);
    }

    #[test]
    fn zero_projection_gives_zero_behavior() {
        let (mut store, enc) = encoder(1);
        for id in enc.projection.params() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let h = enc.encode_behavior(&store, &rec(3, 0.5, 0)).unwrap();
        assert!(h.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn feedback_bucket_changes_representation() {
        let (store, enc) = encoder(2);
        let a = enc.encode_behavior(&store, &rec(3, -1.0, 0)).unwrap();
        let b = enc.encode_behavior(&store, &rec(3, 1.0, 0)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn out_of_catalog_item_is_rejected() {
        let (store, enc) = encoder(3);
        assert!(matches!(
            enc.encode_behavior(&store, &rec(10, 0.0, 0)),
            Err(Error::UnknownItem { .. })
        ));
    }

    #[test]
    fn wrong_feature_width_is_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cfg = small_config();
        cfg.space = InputSpace::Continuous {
            user_features: 3,
            item_features: 4,
        };
        let enc = StateEncoder::new(&mut store, cfg, &mut rng);
        let bad = BehaviorRecord {
            item: ItemRef::Features(vec![0.0; 5].into()),
            feedback: 0.0,
            step_index: 0,
        };
        assert!(matches!(
            enc.encode_behavior(&store, &bad),
            Err(Error::FeatureWidth {
                got: 5,
                expected: 4
            })
        ));
    }

    #[test]
    fn zero_attention_network_gives_zero_weight() {
        let (mut store, enc) = encoder(5);
        for id in enc.attention_params() {
            if store.name(id).ends_with("alpha") {
                continue;
            }
            store.get_mut(id).data_mut().fill(0.0);
        }
        let user = UserProfile::with_id(1);
        let hist = vec![rec(1, 0.2, 0), rec(4, -0.5, 1)];
        let s = enc
            .state_representation(&store, &user, &hist, Norm::Batch)
            .unwrap();
        assert_eq!(s.weights, vec![0.0, 0.0]);
        // Weighted half vanishes.
        assert!(s.state[6..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn empty_history_gives_zero_state() {
        let (store, enc) = encoder(6);
        let s = enc
            .state_representation(&store, &UserProfile::with_id(0), &[], Norm::Batch)
            .unwrap();
        assert_eq!(s.state, vec![0.0; 12]);
        assert!(s.weights.is_empty());
    }

    #[test]
    fn pooling_single_behavior() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::row(vec![1.0, 2.0, -1.0]).unwrap());
        let h = tape.constant(Tensor::row(vec![0.5, 0.5, 3.0]).unwrap());
        let w = tape.constant(Tensor::scalar(0.7));
        let inv = tape.constant(Tensor::scalar(1.0));
        let s = pool_states(&mut tape, u, h, w, inv, &[0]).unwrap();
        let expected = [0.5, 1.0, -3.0, 0.35, 0.35, 2.1];
        for (a, b) in tape.value(s).data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn pooling_two_equal_behaviors_with_half_weights() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::row(vec![1.0, 0.0, 0.0]).unwrap());
        let h =
            tape.constant(Tensor::from_rows(&[vec![1.0, 1.0, 0.0], vec![1.0, 1.0, 0.0]]).unwrap());
        let w = tape.constant(Tensor::column(vec![0.5, 0.5]).unwrap());
        let inv = tape.constant(Tensor::column(vec![0.5, 0.5]).unwrap());
        let s = pool_states(&mut tape, u, h, w, inv, &[0, 0]).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn truncation_keeps_newest_records() {
        let (store, enc) = {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut cfg = small_config();
            cfg.max_history = 3;
            let enc = StateEncoder::new(&mut store, cfg, &mut rng);
            (store, enc)
        };
        let user = UserProfile::with_id(2);
        let hist: Vec<_> = (0..6).map(|i| rec(i, 0.1 * i as f64, i)).collect();
        let full = enc
            .state_representation(&store, &user, &hist, Norm::Running)
            .unwrap();
        let tail = enc
            .state_representation(&store, &user, &hist[3..], Norm::Running)
            .unwrap();
        assert_eq!(full, tail);
        assert_eq!(full.weights.len(), 3);
    }

    #[test]
    fn batch_encoding_matches_single_encoding_in_running_mode() {
        let (store, enc) = encoder(8);
        let u0 = UserProfile::with_id(0);
        let u1 = UserProfile::with_id(3);
        let h0 = vec![rec(1, 0.3, 0), rec(2, -0.9, 1), rec(1, 0.3, 2)];
        let h1 = vec![rec(9, 1.0, 0)];
        let mut tape = Tape::new();
        let batch = enc
            .encode_batch(
                &mut tape,
                &store,
                &[
                    EncodeInput {
                        user: &u0,
                        history: &h0,
                    },
                    EncodeInput {
                        user: &u1,
                        history: &h1,
                    },
                    EncodeInput {
                        user: &u1,
                        history: &[],
                    },
                ],
                Norm::Running,
            )
            .unwrap();
        let states = tape.value(batch.states).clone();
        let s0 = enc
            .state_representation(&store, &u0, &h0, Norm::Running)
            .unwrap();
        let s1 = enc
            .state_representation(&store, &u1, &h1, Norm::Running)
            .unwrap();
        for (a, b) in states.row_slice(0).iter().zip(&s0.state) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in states.row_slice(1).iter().zip(&s1.state) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(states.row_slice(2).iter().all(|v| *v == 0.0));
        // Duplicate behavior in h0 shares one representation row.
        assert_eq!(batch.behavior_rows[0][0], batch.behavior_rows[0][2]);
    }
}
