//! Continuous environment with drifting user interests.
//!
//! Users carry static features and a unit interest vector. Items are action
//! vectors themselves; the reward is their cosine with the interest,
//! zeroed below a threshold.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{EpisodeState, StepOutcome};
use crate::error::{Error, Result};
use crate::staterep::{BehaviorRecord, ItemRef, UserProfile};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub users: usize,
    pub user_features: usize,
    pub dim: usize,
    pub threshold: f64,
    /// Drift after this many positive rewards; 0 disables drift.
    pub drift_every: usize,
    pub drift_weight: f64,
    pub max_steps: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            users: 50,
            user_features: 16,
            dim: 100,
            threshold: 0.3,
            drift_every: 5,
            drift_weight: 0.2,
            max_steps: 50,
        }
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn random_unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if v.iter().any(|x| *x != 0.0) {
            normalize(&mut v);
            return v;
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// A synthetic user: fixed features plus a unit interest vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticUser {
    pub features: Arc<[f64]>,
    pub interest: Vec<f64>,
    pub positives: usize,
}

impl SyntheticUser {
    /// Reward for `action` under the current interest.
    pub fn reward(&self, action: &[f64], threshold: f64) -> f64 {
        let c = cosine(action, &self.interest);
        if c < threshold {
            0.0
        } else {
            c.clamp(0.0, 1.0)
        }
    }

    /// Scores `action` and drifts the interest after every `drift_every`-th
    /// positive reward.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        action: &[f64],
        config: &SyntheticConfig,
        rng: &mut R,
    ) -> f64 {
        let r = self.reward(action, config.threshold);
        if r > 0.0 {
            self.positives += 1;
            if config.drift_every > 0 && self.positives.is_multiple_of(config.drift_every) {
                let noise = random_unit(self.interest.len(), rng);
                let w = config.drift_weight;
                for (i, n) in self.interest.iter_mut().zip(noise) {
                    *i = (1.0 - w) * *i + w * n;
                }
                normalize(&mut self.interest);
            }
        }
        r
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticEnv {
    config: SyntheticConfig,
    features: Vec<Arc<[f64]>>,
    base_interest: Vec<Vec<f64>>,
    user: Option<SyntheticUser>,
    state: EpisodeState,
}

impl SyntheticEnv {
    /// Draws the user population from `seed`.
    pub fn new(config: SyntheticConfig, seed: u64) -> Result<Self> {
        if config.users == 0
            || config.dim == 0
            || config.user_features == 0
            || config.max_steps == 0
        {
            return Err(Error::InvalidArgument(
                "synthetic environment sizes must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (config.user_features as f64).sqrt();
        let mixing: Vec<Vec<f64>> = (0..config.dim)
            .map(|_| {
                (0..config.user_features)
                    .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect()
            })
            .collect();
        let mut features = Vec::with_capacity(config.users);
        let mut base_interest = Vec::with_capacity(config.users);
        for _ in 0..config.users {
            let f: Vec<f64> = (0..config.user_features)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let mut interest: Vec<f64> = mixing
                .iter()
                .map(|row| row.iter().zip(&f).map(|(m, x)| m * x).sum())
                .collect();
            normalize(&mut interest);
            features.push(Arc::from(f));
            base_interest.push(interest);
        }
        Ok(Self {
            config,
            features,
            base_interest,
            user: None,
            state: EpisodeState::finished(),
        })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    pub fn state(&self) -> &EpisodeState {
        &self.state
    }

    pub fn user(&self) -> Option<&SyntheticUser> {
        self.user.as_ref()
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> &EpisodeState {
        let u = rng.gen_range(0..self.config.users);
        self.user = Some(SyntheticUser {
            features: self.features[u].clone(),
            interest: self.base_interest[u].clone(),
            positives: 0,
        });
        self.state = EpisodeState::new(UserProfile {
            id: u,
            features: Some(self.features[u].clone()),
        });
        &self.state
    }

    pub fn step<R: Rng + ?Sized>(&mut self, action: &[f64], rng: &mut R) -> Result<StepOutcome> {
        if self.state.done {
            return Err(Error::EpisodeDone);
        }
        if action.len() != self.config.dim {
            return Err(Error::FeatureWidth {
                got: action.len(),
                expected: self.config.dim,
            });
        }
        let user = self.user.as_mut().expect("reset before step");
        let reward = user.step(action, &self.config, rng);
        let record = BehaviorRecord {
            item: ItemRef::Features(Arc::from(action)),
            feedback: reward,
            step_index: self.state.step,
        };
        self.state.history.push(record.clone());
        self.state.step += 1;
        self.state.done = self.state.step >= self.config.max_steps;
        Ok(StepOutcome {
            reward,
            record,
            done: self.state.done,
        })
    }
}
