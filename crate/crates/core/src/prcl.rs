//! Preference-ranking contrastive learning.
//!
//! Behaviors of one history are ranked by interest weight. The top behavior
//! is the anchor `h*`; one behavior drawn from ranks `2..=⌊n/2⌋` is the
//! positive; every behavior ranked below `⌊n/2⌋` is a negative. The loss is
//!
//! ```text
//! L = -c · log( exp(h_kᵀ h*) / Σ_{n ∈ negatives} exp(h_nᵀ h*) )
//! ```
//!
//! with `c = 1/√rank(h_k)` (positional) or a constant (balanced). The
//! denominator runs over the negatives only.

use std::cmp::Ordering;

use rand::Rng;

use crate::agent::gradient_norm;
use crate::error::{Error, Result};
use crate::numcore::{AdamState, Group, Norm, ParamStore, Tape, Tensor, Var};
use crate::staterep::{EncodeInput, StateEncoder};

/// Behavior indices sorted by interest weight, highest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedHistory {
    /// `order[i]` is the behavior at rank `i + 1`.
    pub order: Vec<usize>,
    /// `ranks[j]` is the 1-based rank of behavior `j`.
    pub ranks: Vec<usize>,
}

/// Ranks behaviors by weight, descending; ties go to the later step first.
pub fn rank_behaviors(weights: &[f64], step_indices: &[usize]) -> Result<RankedHistory> {
    if weights.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot rank an empty history".into(),
        ));
    }
    if weights.len() != step_indices.len() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} step indices",
            weights.len(),
            step_indices.len()
        )));
    }
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        weights[b]
            .partial_cmp(&weights[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| step_indices[b].cmp(&step_indices[a]))
    });
    let mut ranks = vec![0; weights.len()];
    for (pos, &idx) in order.iter().enumerate() {
        ranks[idx] = pos + 1;
    }
    Ok(RankedHistory { order, ranks })
}

/// Anchor, positive and negatives for one transition, as indices into its history.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastiveSample {
    pub anchor: usize,
    pub positive: usize,
    pub positive_rank: usize,
    pub negatives: Vec<usize>,
}

/// Draws the positive uniformly from ranks `2..=⌊n/2⌋`. Histories shorter
/// than four behaviors have no valid window and yield `None`.
pub fn build_contrastive_sample<R: Rng + ?Sized>(
    ranked: &RankedHistory,
    rng: &mut R,
) -> Option<ContrastiveSample> {
    let n = ranked.order.len();
    let half = n / 2;
    if half < 2 {
        return None;
    }
    let rank = rng.gen_range(2..=half);
    Some(ContrastiveSample {
        anchor: ranked.order[0],
        positive: ranked.order[rank - 1],
        positive_rank: rank,
        negatives: ranked.order[half..].to_vec(),
    })
}

/// Scaling of each sample's loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CoefficientStrategy {
    /// `1/√rank` of the positive.
    Positional,
    /// One constant for every sample.
    Balanced(f64),
}

impl CoefficientStrategy {
    /// The balanced constant: the mean positional coefficient over the
    /// positive ranks `2..=⌊T/2⌋` of a history of length `max_len`.
    pub fn balanced_value(max_len: usize) -> f64 {
        let half = max_len / 2;
        if half < 2 {
            return 0.0;
        }
        (2..=half).map(|i| 1.0 / (i as f64).sqrt()).sum::<f64>() / (half - 1) as f64
    }

    pub fn balanced(max_len: usize) -> Self {
        Self::Balanced(Self::balanced_value(max_len))
    }

    pub fn coefficient(&self, rank: usize) -> f64 {
        match self {
            Self::Positional => 1.0 / (rank as f64).sqrt(),
            Self::Balanced(c) => *c,
        }
    }
}

/// A contrastive sample expressed as rows of a representation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRows {
    pub anchor: usize,
    pub positive: usize,
    pub coefficient: f64,
    pub negatives: Vec<usize>,
}

/// Mean positional-weighted InfoNCE loss over samples whose rows index `reps`.
pub fn infonce_loss(tape: &mut Tape, reps: Var, samples: &[SampleRows]) -> Result<Var> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no contrastive samples".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.negatives.is_empty()) {
        return Err(Error::InvalidArgument(format!(
            "sample anchored at row {} has no negatives",
            s.anchor
        )));
    }
    let anchors: Vec<usize> = samples.iter().map(|s| s.anchor).collect();
    let positives: Vec<usize> = samples.iter().map(|s| s.positive).collect();
    let mut neg_rows = Vec::new();
    let mut neg_anchor = Vec::new();
    let mut neg_segment = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        for &n in &s.negatives {
            neg_rows.push(n);
            neg_anchor.push(s.anchor);
            neg_segment.push(i);
        }
    }
    let a = tape.gather_rows(reps, &anchors)?;
    let p = tape.gather_rows(reps, &positives)?;
    let pos_logit = tape.row_dot(p, a)?;
    let an = tape.gather_rows(reps, &neg_anchor)?;
    let ng = tape.gather_rows(reps, &neg_rows)?;
    let neg_logit = tape.row_dot(ng, an)?;
    let lse = tape.segment_logsumexp(neg_logit, &neg_segment, samples.len())?;
    let per_sample = tape.sub(lse, pos_logit)?;
    let coef = tape.constant(Tensor::column(
        samples.iter().map(|s| s.coefficient).collect(),
    )?);
    let weighted = tape.mul_col(per_sample, coef)?;
    tape.mean(weighted)
}

/// Loss of one sample over the representations of its history (`n x D`).
pub fn positional_infonce(
    tape: &mut Tape,
    reps: Var,
    sample: &ContrastiveSample,
    strategy: CoefficientStrategy,
) -> Result<Var> {
    let rows = SampleRows {
        anchor: sample.anchor,
        positive: sample.positive,
        coefficient: strategy.coefficient(sample.positive_rank),
        negatives: sample.negatives.clone(),
    };
    infonce_loss(tape, reps, std::slice::from_ref(&rows))
}

/// How the contrastive batch is drawn from the replay buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SamplingMechanism {
    /// The prioritized batch of the next RL update plus a uniform batch.
    Mixed,
    /// The uniform batch only.
    Divided,
    /// The prioritized batch only.
    Combined,
}

impl SamplingMechanism {
    pub fn needs_random_batch(self) -> bool {
        !matches!(self, Self::Combined)
    }
}

pub fn assemble_prcl_batch<T: Clone>(
    per_batch: &[T],
    random_batch: &[T],
    mechanism: SamplingMechanism,
) -> Vec<T> {
    match mechanism {
        SamplingMechanism::Mixed => per_batch.iter().chain(random_batch).cloned().collect(),
        SamplingMechanism::Combined => per_batch.to_vec(),
        SamplingMechanism::Divided => random_batch.to_vec(),
    }
}

/// A contrastive loss built on a tape.
#[derive(Debug, Clone)]
pub struct PrclLoss {
    pub loss: Var,
    pub samples: Vec<SampleRows>,
    pub skipped: usize,
}

/// Encodes `batch`, ranks each history by its current interest weights and
/// builds the mean contrastive loss. Returns `None` when every transition is
/// skipped.
pub fn prcl_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    store: &ParamStore,
    encoder: &StateEncoder,
    batch: &[EncodeInput<'_>],
    strategy: CoefficientStrategy,
    rng: &mut R,
) -> Result<Option<PrclLoss>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty contrastive batch".into()));
    }
    let enc = encoder.encode_batch(tape, store, batch, Norm::Batch)?;
    let mut samples = Vec::new();
    let mut skipped = 0;
    for ((weights, steps), rows) in enc.weights.iter().zip(&enc.steps).zip(&enc.behavior_rows) {
        let sample = if weights.is_empty() {
            None
        } else {
            let ranked = rank_behaviors(weights, steps)?;
            build_contrastive_sample(&ranked, rng)
        };
        match sample {
            Some(s) => samples.push(SampleRows {
                anchor: rows[s.anchor],
                positive: rows[s.positive],
                coefficient: strategy.coefficient(s.positive_rank),
                negatives: s.negatives.iter().map(|&i| rows[i]).collect(),
            }),
            None => skipped += 1,
        }
    }
    let Some(reps) = enc.behaviors.filter(|_| !samples.is_empty()) else {
        return Ok(None);
    };
    let loss = infonce_loss(tape, reps, &samples)?;
    Ok(Some(PrclLoss {
        loss,
        samples,
        skipped,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrclOutcome {
    pub mean_loss: f64,
    pub samples: usize,
    pub skipped: usize,
    /// Gradient norm of the monitored item-encoder layer, when a loss was formed.
    pub grad_norm: Option<f64>,
}

/// One contrastive step on the behavior encoder.
///
/// Gradients reach only the behavior encoder. When `apply` is false the
/// gradients are measured but not applied.
pub fn prcl_update<R: Rng + ?Sized>(
    encoder: &StateEncoder,
    store: &mut ParamStore,
    optimizer: &mut AdamState,
    batch: &[EncodeInput<'_>],
    strategy: CoefficientStrategy,
    rng: &mut R,
    apply: bool,
) -> Result<PrclOutcome> {
    let mut tape = Tape::tracking(&[Group::Embedding]);
    let Some(built) = prcl_loss(&mut tape, store, encoder, batch, strategy, rng)? else {
        log::warn!("every transition in the contrastive batch was skipped");
        return Ok(PrclOutcome {
            mean_loss: 0.0,
            samples: 0,
            skipped: batch.len(),
            grad_norm: None,
        });
    };
    let mean_loss = tape.scalar(built.loss);
    let grads = tape.backward(built.loss)?;
    let tracked: Vec<_> = grads.tracked_params().collect();
    grads.write_into(store);
    let layer = encoder.monitored_layer();
    let grad_norm = gradient_norm(store, &[layer.weight, layer.bias])?;
    if apply {
        optimizer.step(store)?;
    }
    store.clear_grads(&tracked);
    Ok(PrclOutcome {
        mean_loss,
        samples: built.samples.len(),
        skipped: built.skipped,
        grad_norm: Some(grad_norm),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ranking_example() {
        let r = rank_behaviors(&[0.9, 0.1, 0.5, 0.7, 0.3, 0.2], &[0, 1, 2, 3, 4, 5]).unwrap();
        assert_eq!(r.order, vec![0, 3, 2, 4, 5, 1]);
        assert_eq!(r.ranks[3], 2);
    }

    #[test]
    fn equal_weights_rank_newest_first() {
        let r = rank_behaviors(&[0.4; 4], &[0, 1, 2, 3]).unwrap();
        assert_eq!(r.order, vec![3, 2, 1, 0]);
    }

    #[test]
    fn single_behavior_rank() {
        let r = rank_behaviors(&[1.0], &[0]).unwrap();
        assert_eq!(r.order, vec![0]);
        assert_eq!(r.ranks, vec![1]);
    }

    #[test]
    fn empty_ranking_is_rejected() {
        assert!(rank_behaviors(&[], &[]).is_err());
        assert!(rank_behaviors(&[1.0], &[0, 1]).is_err());
    }

    fn ranked(n: usize) -> RankedHistory {
        let w: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
        rank_behaviors(&w, &(0..n).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn six_behaviors_give_three_negatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let s = build_contrastive_sample(&ranked(6), &mut rng).unwrap();
            assert!(s.positive_rank == 2 || s.positive_rank == 3);
            assert_eq!(s.negatives, vec![3, 4, 5]);
            assert_eq!(s.anchor, 0);
        }
    }

    #[test]
    fn three_behaviors_skip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(build_contrastive_sample(&ranked(3), &mut rng).is_none());
        assert!(build_contrastive_sample(&ranked(1), &mut rng).is_none());
    }

    #[test]
    fn four_behaviors_force_rank_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let s = build_contrastive_sample(&ranked(4), &mut rng).unwrap();
            assert_eq!(s.positive_rank, 2);
            assert_eq!(s.positive, 1);
            assert_eq!(s.negatives, vec![2, 3]);
        }
    }

    fn equal_dot_loss(rank: usize, negatives: usize, strategy: CoefficientStrategy) -> f64 {
        // Orthonormal-free setup: every row equal gives identical dot products.
        let rows = 2 + negatives;
        let mut tape = Tape::new();
        let reps = tape.leaf(Tensor::full(rows, 3, 0.4));
        let sample = ContrastiveSample {
            anchor: 0,
            positive: 1,
            positive_rank: rank,
            negatives: (2..rows).collect(),
        };
        let l = positional_infonce(&mut tape, reps, &sample, strategy).unwrap();
        tape.scalar(l)
    }

    #[test]
    fn equal_dot_products_reduce_to_log_count() {
        let l = equal_dot_loss(4, 3, CoefficientStrategy::Positional);
        assert!((l - 0.5 * 3f64.ln()).abs() < 1e-12);
        assert!((l - 0.5493).abs() < 1e-4);
        let l = equal_dot_loss(2, 3, CoefficientStrategy::Positional);
        assert!((l - 3f64.ln() / 2f64.sqrt()).abs() < 1e-12);
        assert!((l - 0.7768).abs() < 1e-4);
        assert_eq!(equal_dot_loss(2, 1, CoefficientStrategy::Positional), 0.0);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn balanced_value_for_fifty() {
        let c = CoefficientStrategy::balanced_value(50);
        assert!((c - 0.3183).abs() < 1e-4, "{c}");
        let b = CoefficientStrategy::balanced(50);
        assert_eq!(b.coefficient(2), b.coefficient(17));
    }

    #[test]
    fn positional_coefficient_decreases() {
        let s = CoefficientStrategy::Positional;
        for r in 2..60 {
            assert!(s.coefficient(r + 1) < s.coefficient(r));
        }
        assert_eq!(s.coefficient(2), 1.0 / 2f64.sqrt());
    }

    #[test]
    fn empty_negatives_rejected() {
        let mut tape = Tape::new();
        let reps = tape.leaf(Tensor::full(2, 3, 0.1));
        let s = ContrastiveSample {
            anchor: 0,
            positive: 1,
            positive_rank: 2,
            negatives: vec![],
        };
        assert!(positional_infonce(&mut tape, reps, &s, CoefficientStrategy::Positional).is_err());
    }

    #[test]
    fn assembly_mechanisms() {
        let per: Vec<u32> = (0..32).collect();
        let rnd: Vec<u32> = (100..132).collect();
        let mixed = assemble_prcl_batch(&per, &rnd, SamplingMechanism::Mixed);
        assert_eq!(mixed.len(), 64);
        assert!(per.iter().all(|p| mixed.contains(p)));
        assert_eq!(
            assemble_prcl_batch(&per, &rnd, SamplingMechanism::Combined),
            per
        );
        assert_eq!(
            assemble_prcl_batch(&per, &rnd, SamplingMechanism::Divided),
            rnd
        );
    }
}
