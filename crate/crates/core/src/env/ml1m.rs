//! Rating-table simulator over MovieLens-format data.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{EpisodeState, StepOutcome};
use crate::error::{Error, Result};
use crate::staterep::{BehaviorRecord, ItemRef, UserProfile};

pub const MAX_EPISODE_STEPS: usize = 50;
pub const SHIFT_EVERY: usize = 10;
/// Consecutive negative rewards that end an episode when early termination is on.
pub const EARLY_STOP_STREAK: usize = 5;

/// Share of malformed lines above which a file is rejected.
const MALFORMED_LIMIT: f64 = 0.01;

/// Ratings keyed by dense user and item indices, with the original ids kept.
#[derive(Debug, Clone, Default)]
pub struct RatingTable {
    ratings: HashMap<(usize, usize), u8>,
    user_ids: Vec<u64>,
    item_ids: Vec<u64>,
    item_genres: Vec<Vec<String>>,
    malformed: usize,
    lines: usize,
}

impl RatingTable {
    /// Builds a table from raw `(user id, item id, rating)` triples.
    pub fn from_triples(
        triples: &[(u64, u64, u8)],
        genres: &BTreeMap<u64, Vec<String>>,
    ) -> Result<Self> {
        let users: BTreeSet<u64> = triples.iter().map(|t| t.0).collect();
        let items: BTreeSet<u64> = triples
            .iter()
            .map(|t| t.1)
            .chain(genres.keys().copied())
            .collect();
        let user_ids: Vec<u64> = users.into_iter().collect();
        let item_ids: Vec<u64> = items.into_iter().collect();
        let uix: HashMap<u64, usize> = user_ids.iter().enumerate().map(|(i, &u)| (u, i)).collect();
        let iix: HashMap<u64, usize> = item_ids.iter().enumerate().map(|(i, &m)| (m, i)).collect();
        let mut ratings = HashMap::with_capacity(triples.len());
        for &(u, m, r) in triples {
            if !(1..=5).contains(&r) {
                return Err(Error::Dataset(format!(
                    "rating {r} for ({u}, {m}) outside 1..5"
                )));
            }
            ratings.insert((uix[&u], iix[&m]), r);
        }
        let item_genres = item_ids
            .iter()
            .map(|m| genres.get(m).cloned().unwrap_or_default())
            .collect();
        Ok(Self {
            ratings,
            user_ids,
            item_ids,
            item_genres,
            malformed: 0,
            lines: triples.len(),
        })
    }

    /// Rating of a dense (user, item) pair; `None` when the pair is not in the data.
    pub fn rate(&self, user: usize, item: usize) -> Option<u8> {
        self.ratings.get(&(user, item)).copied()
    }

    pub fn user_count(&self) -> usize {
        self.user_ids.len()
    }

    pub fn item_count(&self) -> usize {
        self.item_ids.len()
    }

    pub fn rating_count(&self) -> usize {
        self.ratings.len()
    }

    pub fn user_id(&self, user: usize) -> u64 {
        self.user_ids[user]
    }

    pub fn item_id(&self, item: usize) -> u64 {
        self.item_ids[item]
    }

    /// Dense index of an original user id.
    pub fn user_index(&self, id: u64) -> Option<usize> {
        self.user_ids.binary_search(&id).ok()
    }

    /// Dense index of an original item id.
    pub fn item_index(&self, id: u64) -> Option<usize> {
        self.item_ids.binary_search(&id).ok()
    }

    pub fn genres(&self, item: usize) -> &[String] {
        &self.item_genres[item]
    }

    /// Distinct genres in catalog order of first appearance, sorted.
    pub fn genre_names(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.item_genres.iter().flatten().collect();
        set.into_iter().cloned().collect()
    }

    /// Malformed lines skipped while loading.
    pub fn malformed_lines(&self) -> usize {
        self.malformed
    }

    /// Non-blank lines read while loading.
    pub fn lines_read(&self) -> usize {
        self.lines
    }
}

fn parse_rating_line(line: &str) -> Option<(u64, u64, u8)> {
    let mut f = line.split("::");
    let u = f.next()?.trim().parse().ok()?;
    let m = f.next()?.trim().parse().ok()?;
    let r: u8 = f.next()?.trim().parse().ok()?;
    f.next()?.trim().parse::<i64>().ok()?;
    if f.next().is_some() || !(1..=5).contains(&r) {
        return None;
    }
    Some((u, m, r))
}

/// Parses `UserID::MovieID::Rating::Timestamp` lines. Malformed lines are
/// skipped and counted; more than 1% of them rejects the file.
pub fn load_ml1m(path: impl AsRef<Path>) -> Result<RatingTable> {
    load_ml1m_with_genres(path, &BTreeMap::new())
}

fn load_ml1m_with_genres(
    path: impl AsRef<Path>,
    genres: &BTreeMap<u64, Vec<String>>,
) -> Result<RatingTable> {
    let path = path.as_ref();
    let bytes =
        std::fs::read(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let text = String::from_utf8_lossy(&bytes);
    let mut triples = Vec::new();
    let mut lines = 0usize;
    let mut malformed = 0usize;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        lines += 1;
        match parse_rating_line(line) {
            Some(t) => triples.push(t),
            None => malformed += 1,
        }
    }
    if lines > 0 && malformed as f64 / lines as f64 > MALFORMED_LIMIT {
        return Err(Error::Dataset(format!(
            "{}: {malformed} of {lines} lines malformed",
            path.display()
        )));
    }
    if malformed > 0 {
        log::warn!(
            "{}: skipped {malformed} malformed of {lines} lines",
            path.display()
        );
    }
    let mut table = RatingTable::from_triples(&triples, genres)?;
    table.malformed = malformed;
    table.lines = lines;
    Ok(table)
}

/// Parses `MovieID::Title::Genre|Genre` lines into a genre map.
pub fn load_movies(path: impl AsRef<Path>) -> Result<BTreeMap<u64, Vec<String>>> {
    let path = path.as_ref();
    let bytes =
        std::fs::read(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let text = String::from_utf8_lossy(&bytes);
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split("::").collect();
        let id = match (fields.len(), fields[0].trim().parse::<u64>()) {
            (3, Ok(id)) => id,
            _ => {
                return Err(Error::Dataset(format!(
                    "{}:{}: malformed movie line",
                    path.display(),
                    n + 1
                )))
            }
        };
        let genres = fields[2]
            .split('|')
            .map(str::trim)
            .filter(|g| !g.is_empty())
            .map(String::from)
            .collect();
        out.insert(id, genres);
    }
    Ok(out)
}

/// Loads `ratings.dat` and, when present, `movies.dat` from a directory.
pub fn load_ml1m_dir(dir: impl AsRef<Path>) -> Result<RatingTable> {
    let dir = dir.as_ref();
    let movies = dir.join("movies.dat");
    let genres = if movies.exists() {
        load_movies(movies)?
    } else {
        BTreeMap::new()
    };
    load_ml1m_with_genres(dir.join("ratings.dat"), &genres)
}

/// Reward for recommending an item with the given rating that already
/// appears `repeats` times in the history.
///
/// Unrated or 1-rated items give −1. Otherwise the score is `(rate − 1)²`,
/// replaced by `clamp(1.1 − 0.2·repeats, −1, 0.3)` for repeats, and divided
/// by 16 when positive. The repeat penalty is evaluated in tenths so the
/// results are the nearest doubles to their decimal values.
pub fn ml1m_get_reward(rate: Option<u8>, repeats: usize) -> f64 {
    let rate = match rate {
        None | Some(1) => return -1.0,
        Some(r) => r as i64,
    };
    let tenths = if repeats > 0 {
        (11 - 2 * repeats.min(100) as i64).clamp(-10, 3)
    } else {
        (rate - 1) * (rate - 1) * 10
    };
    if tenths > 0 {
        tenths as f64 / 160.0
    } else {
        tenths as f64 / 10.0
    }
}

/// Settings for [`Ml1mEnv`].
#[derive(Debug, Clone, PartialEq)]
pub struct Ml1mConfig {
    pub max_steps: usize,
    pub interest_shift: bool,
    pub early_termination: bool,
}

impl Default for Ml1mConfig {
    fn default() -> Self {
        Self {
            max_steps: MAX_EPISODE_STEPS,
            interest_shift: true,
            early_termination: false,
        }
    }
}

/// Episode simulator: each step scores a list of recommended items and logs
/// the best one.
#[derive(Debug, Clone)]
pub struct Ml1mEnv {
    table: RatingTable,
    config: Ml1mConfig,
    genres: Vec<String>,
    genre_items: Vec<Vec<usize>>,
    state: EpisodeState,
    /// Ratings of the active user after interest shifts.
    shifted: HashMap<usize, u8>,
    counts: HashMap<usize, usize>,
    negative_streak: usize,
}

impl Ml1mEnv {
    pub fn new(table: RatingTable, config: Ml1mConfig) -> Result<Self> {
        if table.user_count() == 0 || table.item_count() == 0 {
            return Err(Error::Dataset("rating table has no users or items".into()));
        }
        if config.max_steps == 0 {
            return Err(Error::InvalidArgument("max_steps must be positive".into()));
        }
        let genres = table.genre_names();
        let genre_items = genres
            .iter()
            .map(|g| {
                (0..table.item_count())
                    .filter(|&i| table.genres(i).contains(g))
                    .collect()
            })
            .collect();
        Ok(Self {
            table,
            config,
            genres,
            genre_items,
            state: EpisodeState::finished(),
            shifted: HashMap::new(),
            counts: HashMap::new(),
            negative_streak: 0,
        })
    }

    pub fn table(&self) -> &RatingTable {
        &self.table
    }

    pub fn state(&self) -> &EpisodeState {
        &self.state
    }

    pub fn item_count(&self) -> usize {
        self.table.item_count()
    }

    pub fn user_count(&self) -> usize {
        self.table.user_count()
    }

    /// Starts an episode for a uniformly drawn user.
    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> &EpisodeState {
        let user = rng.gen_range(0..self.table.user_count());
        self.reset_user(user)
    }

    pub fn reset_user(&mut self, user: usize) -> &EpisodeState {
        self.state = EpisodeState::new(UserProfile::with_id(user));
        self.shifted.clear();
        self.counts.clear();
        self.negative_streak = 0;
        &self.state
    }

    /// Current rating of the active user for `item`, after interest shifts.
    pub fn current_rate(&self, item: usize) -> Option<u8> {
        self.shifted
            .get(&item)
            .copied()
            .or_else(|| self.table.rate(self.state.user.id, item))
    }

    /// Reward `item` would get now.
    pub fn item_reward(&self, item: usize) -> f64 {
        let repeats = self.counts.get(&item).copied().unwrap_or(0);
        ml1m_get_reward(self.current_rate(item), repeats)
    }

    /// Scores `items`, keeps the first best one, and advances the episode.
    pub fn step<R: Rng + ?Sized>(&mut self, items: &[usize], rng: &mut R) -> Result<StepOutcome> {
        if self.state.done {
            return Err(Error::EpisodeDone);
        }
        if items.is_empty() {
            return Err(Error::InvalidArgument("no items recommended".into()));
        }
        if let Some(&bad) = items.iter().find(|&&i| i >= self.table.item_count()) {
            return Err(Error::UnknownItem {
                item: bad,
                catalog: self.table.item_count(),
            });
        }
        let mut best = (items[0], self.item_reward(items[0]));
        for &item in &items[1..] {
            let r = self.item_reward(item);
            if r > best.1 {
                best = (item, r);
            }
        }
        let (item, reward) = best;
        let record = BehaviorRecord {
            item: ItemRef::Id(item),
            feedback: reward,
            step_index: self.state.step,
        };
        self.state.history.push(record.clone());
        *self.counts.entry(item).or_insert(0) += 1;
        self.state.step += 1;
        self.negative_streak = if reward < 0.0 {
            self.negative_streak + 1
        } else {
            0
        };
        if self.config.interest_shift && self.state.step.is_multiple_of(SHIFT_EVERY) {
            self.shift_interest(rng);
        }
        self.state.done = self.state.step >= self.config.max_steps
            || (self.config.early_termination && self.negative_streak >= EARLY_STOP_STREAK);
        Ok(StepOutcome {
            reward,
            record,
            done: self.state.done,
        })
    }

    /// Moves the active user's ratings of one random genre up or down by one.
    fn shift_interest<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let Some(g) = (0..self.genres.len())
            .collect::<Vec<_>>()
            .choose(rng)
            .copied()
        else {
            return;
        };
        let up = rng.gen_bool(0.5);
        for &item in &self.genre_items[g] {
            if let Some(r) = self.current_rate(item) {
                let r = if up { (r + 1).min(5) } else { (r - 1).max(1) };
                self.shifted.insert(item, r);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    fn write(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn parses_public_format_line() {
        let f = write("1::1193::5::978300760\n");
        let t = load_ml1m(f.path()).unwrap();
        let (u, m) = (t.user_index(1).unwrap(), t.item_index(1193).unwrap());
        assert_eq!(t.rate(u, m), Some(5));
    }

    #[test]
    fn empty_file_is_empty_table() {
        let f = write("");
        let t = load_ml1m(f.path()).unwrap();
        assert_eq!(t.user_count(), 0);
        assert_eq!(t.rating_count(), 0);
    }

    #[test]
    fn out_of_range_rating_is_malformed() {
        let mut text = String::new();
        for k in 0..200 {
            text.push_str(&format!("{}::{}::3::0\n", k % 7 + 1, k + 1));
        }
        text.push_str("1::9999::7::0\n");
        let t = load_ml1m(write(&text).path()).unwrap();
        assert_eq!(t.malformed_lines(), 1);
        assert!(t.item_index(9999).is_none());
    }

    #[test]
    fn too_many_malformed_lines_rejected() {
        let text = "1::1::3::0\n1::2::x::0\n";
        assert!(matches!(
            load_ml1m(write(text).path()),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn unreadable_file_rejected() {
        assert!(matches!(
            load_ml1m("/nonexistent/ratings.dat"),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn absent_differs_from_one() {
        let t = load_ml1m(write("1::10::1::0\n2::11::4::0\n").path()).unwrap();
        let u = t.user_index(1).unwrap();
        assert_eq!(t.rate(u, t.item_index(10).unwrap()), Some(1));
        assert_eq!(t.rate(u, t.item_index(11).unwrap()), None);
    }

    #[test]
    fn reward_examples() {
        assert_eq!(ml1m_get_reward(Some(5), 0), 1.0);
        assert_eq!(ml1m_get_reward(Some(1), 0), -1.0);
        assert_eq!(ml1m_get_reward(None, 0), -1.0);
        assert_eq!(ml1m_get_reward(Some(4), 4), 0.01875);
        assert_eq!(ml1m_get_reward(Some(4), 10), -0.9);
    }

    #[test]
    fn reward_non_increasing_in_repeats() {
        for rate in 2..=5u8 {
            let mut prev = f64::INFINITY;
            for k in 0..30 {
                let r = ml1m_get_reward(Some(rate), k);
                assert!(r <= prev, "rate {rate} repeats {k}");
                assert!((-1.0..=1.0).contains(&r));
                prev = r;
            }
        }
    }

    fn small_env(shift: bool) -> Ml1mEnv {
        let triples = [(1, 1, 1), (1, 2, 3), (1, 3, 5), (2, 1, 4)];
        let mut genres = BTreeMap::new();
        genres.insert(1, vec!["Drama".to_string()]);
        genres.insert(2, vec!["Drama".to_string()]);
        genres.insert(3, vec!["Comedy".to_string()]);
        genres.insert(4, vec!["Comedy".to_string()]);
        let t = RatingTable::from_triples(&triples, &genres).unwrap();
        Ml1mEnv::new(
            t,
            Ml1mConfig {
                interest_shift: shift,
                ..Ml1mConfig::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn step_takes_max_and_logs_item() {
        let mut env = small_env(false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        env.reset_user(0);
        // Items: 0 rated 1 (−1), 1 rated 3 (0.25), 2 rated 5 (1.0).
        let out = env.step(&[0, 1, 2], &mut rng).unwrap();
        assert_eq!(out.reward, 1.0);
        assert_eq!(out.record.item, ItemRef::Id(2));
        assert_eq!(out.record.feedback, 1.0);
    }

    #[test]
    fn all_absent_gives_minus_one() {
        let mut env = small_env(false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        env.reset_user(1);
        assert_eq!(env.step(&[1, 2, 3], &mut rng).unwrap().reward, -1.0);
    }

    #[test]
    fn episode_ends_at_fifty() {
        let mut env = small_env(true);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        env.reset(&mut rng);
        for k in 1..=MAX_EPISODE_STEPS {
            let out = env.step(&[k % 4], &mut rng).unwrap();
            assert_eq!(env.state().history.len(), k);
            assert!((-1.0..=1.0).contains(&out.reward));
            assert_eq!(out.done, k == MAX_EPISODE_STEPS);
        }
        assert!(matches!(env.step(&[0], &mut rng), Err(Error::EpisodeDone)));
    }

    #[test]
    fn early_termination_flag() {
        let mut env = small_env(false);
        env.config.early_termination = true;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        env.reset_user(1);
        let mut steps = 0;
        while !env.step(&[3], &mut rng).unwrap().done {
            steps += 1;
        }
        assert_eq!(steps + 1, EARLY_STOP_STREAK);
    }

    #[test]
    fn reset_is_seeded_and_fresh() {
        let mut a = small_env(false);
        let mut b = small_env(false);
        let mut ra = ChaCha8Rng::seed_from_u64(9);
        let mut rb = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let ua = a.reset(&mut ra).user.id;
            let ub = b.reset(&mut rb).user.id;
            assert_eq!(ua, ub);
            assert!(a.state().history.is_empty());
            assert_eq!(a.state().step, 0);
            assert!(!a.state().done);
        }
    }

    #[test]
    fn shift_changes_ratings_within_range() {
        let mut env = small_env(true);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        env.reset_user(0);
        for _ in 0..SHIFT_EVERY {
            env.step(&[3], &mut rng).unwrap();
        }
        let changed = (0..3).any(|i| env.current_rate(i) != env.table().rate(0, i));
        assert!(changed);
        assert!((0..4).all(|i| env.current_rate(i).is_none_or(|r| (1..=5).contains(&r))));
        assert_eq!(env.current_rate(3), None);
    }
}
