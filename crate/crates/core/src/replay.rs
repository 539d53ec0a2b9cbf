//! Prioritized replay over raw interaction histories.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::staterep::{BehaviorRecord, EncodeInput, ItemRef, UserProfile};

pub const DEFAULT_CAPACITY: usize = 100_000;
pub const PRIORITY_EPSILON: f64 = 1e-3;
const MAGIC: &[u8; 8] = b"CRIRBUF1";

/// One environment step. Histories are shared, so consecutive transitions of
/// an episode reference the same allocation.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub user: UserProfile,
    pub history: Arc<[BehaviorRecord]>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_history: Arc<[BehaviorRecord]>,
    pub done: bool,
}

impl Transition {
    pub fn state_input(&self) -> EncodeInput<'_> {
        EncodeInput {
            user: &self.user,
            history: &self.history,
        }
    }

    pub fn next_input(&self) -> EncodeInput<'_> {
        EncodeInput {
            user: &self.user,
            history: &self.next_history,
        }
    }
}

/// Binary tree of priority sums over a fixed number of leaves.
#[derive(Debug, Clone)]
pub struct SumTree {
    leaves: usize,
    width: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(leaves: usize) -> Self {
        let width = leaves.max(1).next_power_of_two();
        Self {
            leaves,
            width,
            nodes: vec![0.0; 2 * width],
        }
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn leaf(&self, i: usize) -> f64 {
        self.nodes[self.width + i]
    }

    pub fn set(&mut self, i: usize, value: f64) {
        assert!(i < self.leaves, "leaf {i} out of range");
        let mut n = self.width + i;
        self.nodes[n] = value;
        while n > 1 {
            n /= 2;
            self.nodes[n] = self.nodes[2 * n] + self.nodes[2 * n + 1];
        }
    }

    /// Leaf whose cumulative range contains `mass`.
    pub fn find(&self, mass: f64) -> usize {
        let mut v = mass.max(0.0);
        let mut n = 1;
        while n < self.width {
            let left = self.nodes[2 * n];
            if v < left {
                n *= 2;
            } else {
                v -= left;
                n = 2 * n + 1;
            }
        }
        let mut i = n - self.width;
        // Rounding at the top of the range can land on an empty leaf.
        while i > 0 && (i >= self.leaves || self.leaf(i) == 0.0) {
            i -= 1;
        }
        i
    }

    /// Largest deviation between an internal node and the sum of its children.
    pub fn consistency_error(&self) -> f64 {
        (1..self.width)
            .map(|n| (self.nodes[n] - self.nodes[2 * n] - self.nodes[2 * n + 1]).abs())
            .fold(0.0, f64::max)
    }
}

/// Buffer position plus the insertion stamp it held when sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SampleIndex {
    pub slot: usize,
    pub stamp: u64,
}

#[derive(Debug, Clone)]
pub struct PrioritizedSample {
    pub transitions: Vec<Arc<Transition>>,
    pub weights: Vec<f64>,
    pub indices: Vec<SampleIndex>,
}

#[derive(Debug, Clone)]
struct Slot {
    transition: Arc<Transition>,
    stamp: u64,
    priority: f64,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    alpha: f64,
    slots: Vec<Option<Slot>>,
    tree: SumTree,
    cursor: usize,
    len: usize,
    next_stamp: u64,
    max_priority: f64,
    stale_skips: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, alpha: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument(
                "replay capacity must be positive".into(),
            ));
        }
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be non-negative, got {alpha}"
            )));
        }
        Ok(Self {
            capacity,
            alpha,
            slots: vec![None; capacity],
            tree: SumTree::new(capacity),
            cursor: 0,
            len: 0,
            next_stamp: 0,
            max_priority: 1.0,
            stale_skips: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn tree(&self) -> &SumTree {
        &self.tree
    }

    /// Number of priority updates dropped because their slot was overwritten.
    pub fn stale_skips(&self) -> u64 {
        self.stale_skips
    }

    /// Raw priority of a slot, if occupied.
    pub fn priority(&self, slot: usize) -> Option<f64> {
        self.slots.get(slot)?.as_ref().map(|s| s.priority)
    }

    /// Insertion stamp of a slot, if occupied.
    pub fn stamp(&self, slot: usize) -> Option<u64> {
        self.slots.get(slot)?.as_ref().map(|s| s.stamp)
    }

    pub fn get(&self, slot: usize) -> Option<&Arc<Transition>> {
        self.slots.get(slot)?.as_ref().map(|s| &s.transition)
    }

    pub fn push(&mut self, transition: Transition) -> SampleIndex {
        self.push_with_priority(transition, self.max_priority)
    }

    fn push_with_priority(&mut self, transition: Transition, priority: f64) -> SampleIndex {
        let slot = self.cursor;
        let stamp = self.next_stamp;
        self.next_stamp += 1;
        self.slots[slot] = Some(Slot {
            transition: Arc::new(transition),
            stamp,
            priority,
        });
        self.tree.set(slot, priority.powf(self.alpha));
        self.cursor = (self.cursor + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
        SampleIndex { slot, stamp }
    }

    fn check_fill(&self, batch_size: usize) -> Result<()> {
        if batch_size == 0 || self.len < batch_size {
            return Err(Error::Underfilled {
                len: self.len,
                requested: batch_size,
            });
        }
        Ok(())
    }

    fn index(&self, slot: usize) -> SampleIndex {
        let s = self.slots[slot].as_ref().expect("sampled an empty slot");
        SampleIndex {
            slot,
            stamp: s.stamp,
        }
    }

    /// Stratified draw proportional to `priority^alpha`, with importance
    /// weights `(N P)^-beta` scaled so the largest is 1.
    pub fn sample_per<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        beta: f64,
        rng: &mut R,
    ) -> Result<PrioritizedSample> {
        self.check_fill(batch_size)?;
        let total = self.tree.total();
        let segment = total / batch_size as f64;
        let n = self.len as f64;
        let mut out = PrioritizedSample {
            transitions: Vec::with_capacity(batch_size),
            weights: Vec::with_capacity(batch_size),
            indices: Vec::with_capacity(batch_size),
        };
        for k in 0..batch_size {
            let mass = segment * (k as f64 + rng.gen::<f64>());
            let slot = self.tree.find(mass);
            let p = self.tree.leaf(slot) / total;
            out.weights.push((n * p).powf(-beta));
            out.indices.push(self.index(slot));
            out.transitions
                .push(self.slots[slot].as_ref().unwrap().transition.clone());
        }
        let max = out.weights.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 && max.is_finite() {
            for w in &mut out.weights {
                *w /= max;
            }
        }
        Ok(out)
    }

    /// Uniform draw without replacement.
    pub fn sample_uniform<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<Arc<Transition>>> {
        Ok(self
            .sample_uniform_indices(batch_size, rng)?
            .into_iter()
            .map(|i| self.slots[i.slot].as_ref().unwrap().transition.clone())
            .collect())
    }

    pub fn sample_uniform_indices<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<SampleIndex>> {
        self.check_fill(batch_size)?;
        Ok(rand::seq::index::sample(rng, self.len, batch_size)
            .into_iter()
            .map(|slot| self.index(slot))
            .collect())
    }

    /// Sets each sampled slot's priority to `|δ| + ε_p`. Slots overwritten
    /// since sampling are skipped and counted.
    pub fn update_priorities(
        &mut self,
        indices: &[SampleIndex],
        td_magnitudes: &[f64],
    ) -> Result<()> {
        if indices.len() != td_magnitudes.len() {
            return Err(Error::LengthMismatch(
                indices.len(),
                vec![td_magnitudes.len()],
            ));
        }
        for (idx, &td) in indices.iter().zip(td_magnitudes) {
            if !td.is_finite() {
                return Err(Error::NonFinite(format!(
                    "td magnitude for slot {}",
                    idx.slot
                )));
            }
            let alpha = self.alpha;
            match self.slots.get_mut(idx.slot).and_then(Option::as_mut) {
                Some(s) if s.stamp == idx.stamp => {
                    let p = td.abs() + PRIORITY_EPSILON;
                    s.priority = p;
                    self.max_priority = self.max_priority.max(p);
                    self.tree.set(idx.slot, p.powf(alpha));
                }
                _ => self.stale_skips += 1,
            }
        }
        Ok(())
    }

    /// Writes the buffer to `path` in the versioned little-endian format.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        put_u64(&mut w, self.capacity as u64)?;
        put_f64(&mut w, self.alpha)?;
        put_f64(&mut w, self.max_priority)?;
        put_u64(&mut w, self.len as u64)?;
        // Oldest first, so reloading by pushing restores ring order.
        let start = if self.len < self.capacity {
            0
        } else {
            self.cursor
        };
        for k in 0..self.len {
            let s = self.slots[(start + k) % self.capacity].as_ref().unwrap();
            let mut rec = Vec::new();
            put_f64(&mut rec, s.priority)?;
            put_transition(&mut rec, &s.transition)?;
            put_u64(&mut w, rec.len() as u64)?;
            w.write_all(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Snapshot("bad header".into()));
        }
        let capacity = get_u64(&mut r)? as usize;
        let alpha = get_f64(&mut r)?;
        let max_priority = get_f64(&mut r)?;
        let len = get_u64(&mut r)? as usize;
        if len > capacity {
            return Err(Error::Snapshot(format!(
                "{len} records exceed capacity {capacity}"
            )));
        }
        let mut buf = Self::new(capacity, alpha)?;
        for _ in 0..len {
            let n = get_u64(&mut r)? as usize;
            let mut rec = vec![0u8; n];
            r.read_exact(&mut rec)?;
            let mut c = rec.as_slice();
            let priority = get_f64(&mut c)?;
            let t = get_transition(&mut c)?;
            if !c.is_empty() {
                return Err(Error::Snapshot("trailing bytes in record".into()));
            }
            buf.push_with_priority(t, priority);
        }
        buf.max_priority = max_priority;
        Ok(buf)
    }
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64s(w: &mut impl Write, v: &[f64]) -> Result<()> {
    put_u64(w, v.len() as u64)?;
    v.iter().try_for_each(|x| put_f64(w, *x))
}

fn put_history(w: &mut impl Write, h: &[BehaviorRecord]) -> Result<()> {
    put_u64(w, h.len() as u64)?;
    for rec in h {
        match &rec.item {
            ItemRef::Id(id) => {
                w.write_all(&[0])?;
                put_u64(w, *id as u64)?;
            }
            ItemRef::Features(f) => {
                w.write_all(&[1])?;
                put_f64s(w, f)?;
            }
        }
        put_f64(w, rec.feedback)?;
        put_u64(w, rec.step_index as u64)?;
    }
    Ok(())
}

fn put_transition(w: &mut impl Write, t: &Transition) -> Result<()> {
    put_u64(w, t.user.id as u64)?;
    match &t.user.features {
        None => w.write_all(&[0])?,
        Some(f) => {
            w.write_all(&[1])?;
            put_f64s(w, f)?;
        }
    }
    put_history(w, &t.history)?;
    put_f64s(w, &t.action)?;
    put_f64(w, t.reward)?;
    put_history(w, &t.next_history)?;
    w.write_all(&[t.done as u8])?;
    Ok(())
}

fn get_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn get_f64s(r: &mut &[u8]) -> Result<Vec<f64>> {
    let n = get_u64(r)? as usize;
    if n.saturating_mul(8) > r.len() {
        return Err(Error::Snapshot("vector length exceeds record".into()));
    }
    (0..n).map(|_| get_f64(r)).collect()
}

fn get_history(r: &mut &[u8]) -> Result<Arc<[BehaviorRecord]>> {
    let n = get_u64(r)? as usize;
    let mut out = Vec::with_capacity(n.min(r.len()));
    for _ in 0..n {
        let item = match get_u8(r)? {
            0 => ItemRef::Id(get_u64(r)? as usize),
            1 => ItemRef::Features(get_f64s(r)?.into()),
            tag => return Err(Error::Snapshot(format!("unknown item tag {tag}"))),
        };
        let feedback = get_f64(r)?;
        let step_index = get_u64(r)? as usize;
        out.push(BehaviorRecord {
            item,
            feedback,
            step_index,
        });
    }
    Ok(out.into())
}

fn get_transition(r: &mut &[u8]) -> Result<Transition> {
    let id = get_u64(r)? as usize;
    let features = match get_u8(r)? {
        0 => None,
        1 => Some(get_f64s(r)?.into()),
        tag => return Err(Error::Snapshot(format!("unknown feature tag {tag}"))),
    };
    let history = get_history(r)?;
    let action = get_f64s(r)?;
    let reward = get_f64(r)?;
    let next_history = get_history(r)?;
    let done = match get_u8(r)? {
        0 => false,
        1 => true,
        v => return Err(Error::Snapshot(format!("bad done flag {v}"))),
    };
    Ok(Transition {
        user: UserProfile { id, features },
        history,
        action,
        reward,
        next_history,
        done,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(tag: usize) -> Transition {
        let h: Arc<[BehaviorRecord]> = Arc::from(Vec::new());
        Transition {
            user: UserProfile::with_id(tag),
            history: h.clone(),
            action: vec![tag as f64],
            reward: 0.0,
            next_history: h,
            done: false,
        }
    }

    #[test]
    fn first_push_gets_unit_priority() {
        let mut b = ReplayBuffer::new(4, 0.6).unwrap();
        let i = b.push(tr(0));
        assert_eq!(b.priority(i.slot), Some(1.0));
        assert_eq!(b.tree().total(), 1.0);
    }

    #[test]
    fn ring_evicts_oldest() {
        let mut b = ReplayBuffer::new(2, 0.6).unwrap();
        for k in 0..3 {
            b.push(tr(k));
        }
        assert_eq!(b.len(), 2);
        let users: Vec<_> = (0..2).map(|s| b.get(s).unwrap().user.id).collect();
        assert!(!users.contains(&0));
    }

    #[test]
    fn root_grows_by_inserted_priority() {
        let mut b = ReplayBuffer::new(8, 1.0).unwrap();
        let i = b.push(tr(0));
        b.update_priorities(&[i], &[2.0]).unwrap();
        let before = b.tree().total();
        b.push(tr(1));
        assert!((b.tree().total() - before - (2.0 + PRIORITY_EPSILON)).abs() < 1e-12);
    }

    #[test]
    fn zero_td_gets_floor() {
        let mut b = ReplayBuffer::new(4, 0.6).unwrap();
        let i = b.push(tr(0));
        b.update_priorities(&[i], &[0.0]).unwrap();
        assert_eq!(b.priority(i.slot), Some(PRIORITY_EPSILON));
    }

    #[test]
    fn leaf_update_moves_root_by_delta() {
        let mut b = ReplayBuffer::new(4, 1.0).unwrap();
        let i = b.push(tr(0));
        b.push(tr(1));
        let before = b.tree().total();
        b.update_priorities(&[i], &[0.5]).unwrap();
        let delta = 0.5 + PRIORITY_EPSILON - 1.0;
        assert!((b.tree().total() - before - delta).abs() < 1e-12);
    }

    #[test]
    fn last_write_wins() {
        let mut b = ReplayBuffer::new(4, 0.6).unwrap();
        let i = b.push(tr(0));
        b.update_priorities(&[i, i], &[3.0, 0.25]).unwrap();
        assert_eq!(b.priority(i.slot), Some(0.25 + PRIORITY_EPSILON));
    }

    #[test]
    fn stale_index_is_skipped_and_counted() {
        let mut b = ReplayBuffer::new(1, 0.6).unwrap();
        let i = b.push(tr(0));
        b.push(tr(1));
        b.update_priorities(&[i], &[5.0]).unwrap();
        assert_eq!(b.stale_skips(), 1);
        assert_eq!(b.priority(0), Some(1.0));
    }

    #[test]
    fn underfilled_rejected() {
        let mut b = ReplayBuffer::new(4, 0.6).unwrap();
        b.push(tr(0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            b.sample_per(2, 0.4, &mut rng),
            Err(Error::Underfilled { .. })
        ));
        assert!(matches!(
            b.sample_uniform(2, &mut rng),
            Err(Error::Underfilled { .. })
        ));
    }

    #[test]
    fn equal_priorities_give_unit_weights() {
        let mut b = ReplayBuffer::new(16, 0.6).unwrap();
        for k in 0..10 {
            b.push(tr(k));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = b.sample_per(5, 0.4, &mut rng).unwrap();
        assert!(s.weights.iter().all(|w| (w - 1.0).abs() < 1e-12));
    }

    #[test]
    fn full_uniform_batch_is_whole_buffer() {
        let mut b = ReplayBuffer::new(8, 0.6).unwrap();
        for k in 0..5 {
            b.push(tr(k));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ids: Vec<_> = b
            .sample_uniform(5, &mut rng)
            .unwrap()
            .iter()
            .map(|t| t.user.id)
            .collect();
        ids.sort();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn find_covers_ranges() {
        let mut t = SumTree::new(3);
        t.set(0, 1.0);
        t.set(1, 0.0);
        t.set(2, 3.0);
        assert_eq!(t.find(0.5), 0);
        assert_eq!(t.find(1.0), 2);
        assert_eq!(t.find(3.999), 2);
        assert_eq!(t.find(10.0), 2);
        assert_eq!(t.consistency_error(), 0.0);
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("buf.bin");
        let mut b = ReplayBuffer::new(3, 0.6).unwrap();
        let feats: Arc<[f64]> = Arc::from(vec![0.5, -1.0]);
        let h: Arc<[BehaviorRecord]> = Arc::from(vec![
            BehaviorRecord {
                item: ItemRef::Id(7),
                feedback: 0.25,
                step_index: 0,
            },
            BehaviorRecord {
                item: ItemRef::Features(feats.clone()),
                feedback: -1.0,
                step_index: 1,
            },
        ]);
        for k in 0..4 {
            let mut t = tr(k);
            t.user.features = Some(feats.clone());
            t.next_history = h.clone();
            t.done = k % 2 == 1;
            b.push(t);
        }
        let i = SampleIndex {
            slot: 2,
            stamp: b.stamp(2).unwrap(),
        };
        b.update_priorities(&[i], &[0.7]).unwrap();
        b.save(&path).unwrap();
        let c = ReplayBuffer::load(&path).unwrap();
        assert_eq!(c.len(), 3);
        let mut a: Vec<_> = (0..3)
            .map(|s| (b.get(s).unwrap().as_ref().clone(), b.priority(s)))
            .collect();
        let mut z: Vec<_> = (0..3)
            .map(|s| (c.get(s).unwrap().as_ref().clone(), c.priority(s)))
            .collect();
        a.sort_by_key(|x| x.0.user.id);
        z.sort_by_key(|x| x.0.user.id);
        assert_eq!(a, z);
        assert!((b.tree().total() - c.tree().total()).abs() < 1e-12);
    }

    #[test]
    fn snapshot_rejects_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        std::fs::write(&path, b"NOTABUF1").unwrap();
        assert!(matches!(ReplayBuffer::load(&path), Err(Error::Snapshot(_))));
    }
}
