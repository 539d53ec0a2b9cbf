//! Simulated users: a rating-table simulator and a continuous synthetic one.

mod ml1m;
mod synthetic;

pub use ml1m::{
    load_ml1m, load_ml1m_dir, load_movies, ml1m_get_reward, Ml1mConfig, Ml1mEnv, RatingTable,
    EARLY_STOP_STREAK, MAX_EPISODE_STEPS, SHIFT_EVERY,
};
pub use synthetic::{SyntheticConfig, SyntheticEnv, SyntheticUser};

use crate::staterep::{BehaviorRecord, UserProfile};

/// The active user and what they have interacted with this episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeState {
    pub user: UserProfile,
    pub history: Vec<BehaviorRecord>,
    pub step: usize,
    pub done: bool,
}

impl EpisodeState {
    pub fn new(user: UserProfile) -> Self {
        Self {
            user,
            history: Vec::new(),
            step: 0,
            done: false,
        }
    }

    fn finished() -> Self {
        Self {
            done: true,
            ..Self::new(UserProfile::with_id(0))
        }
    }
}

/// What one environment step produced.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    /// The record appended to the history.
    pub record: BehaviorRecord,
    pub done: bool,
}
