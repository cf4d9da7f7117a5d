//! FIFO replay buffer shared by the online and offline learners.
//!
//! # Snapshot format (version 1)
//!
//! All integers and floats are little-endian.
//!
//! | field        | type            |
//! |--------------|-----------------|
//! | magic        | `b"OBACRB01"`   |
//! | version      | `u32` (= 1)     |
//! | state_dim    | `u32`           |
//! | action_dim   | `u32`           |
//! | capacity     | `u64`           |
//! | count        | `u64`           |
//! | records      | `count` records, oldest first |
//!
//! Each record is `state_dim` `f64` state values, `action_dim` `f64` action
//! values, the `f64` reward, `state_dim` `f64` next-state values and one
//! `u8` terminated flag (0 or 1).

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::numerics::rng_from;

pub const DEFAULT_CAPACITY: usize = 1_000_000;
pub const DEFAULT_BATCH_SIZE: usize = 512;

const MAGIC: &[u8; 8] = b"OBACRB01";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 4 + 8 + 8;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("transition dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value in transition {0}")]
    NonFinite(&'static str),
    #[error("cannot sample from an empty buffer")]
    Empty,
    #[error("invalid buffer parameters: {0}")]
    Invalid(String),
    #[error("replay snapshot format error: {0}")]
    Format(String),
    #[error("replay snapshot i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// One environment interaction `(s, a, r, s', terminated)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminated: bool,
}

/// A sampled mini-batch, one row per transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    /// 1.0 for terminated transitions, 0.0 otherwise.
    pub terminated: Array1<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn from_transitions(items: &[Transition]) -> Batch {
        let n = items.len();
        let sd = items.first().map_or(0, |t| t.state.len());
        let ad = items.first().map_or(0, |t| t.action.len());
        Batch {
            states: Array2::from_shape_fn((n, sd), |(i, j)| items[i].state[j]),
            actions: Array2::from_shape_fn((n, ad), |(i, j)| items[i].action[j]),
            rewards: Array1::from_shape_fn(n, |i| items[i].reward),
            next_states: Array2::from_shape_fn((n, sd), |(i, j)| items[i].next_state[j]),
            terminated: Array1::from_shape_fn(n, |i| if items[i].terminated { 1.0 } else { 0.0 }),
        }
    }
}

/// Ring storage of transitions with FIFO eviction and uniform sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    state_dim: usize,
    action_dim: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    next_states: Vec<f64>,
    terminated: Vec<bool>,
    /// Slot the next push writes to once the buffer is full.
    head: usize,
    len: usize,
    pushes: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, state_dim: usize, action_dim: usize) -> Result<Self, ReplayError> {
        if capacity == 0 || state_dim == 0 || action_dim == 0 {
            return Err(ReplayError::Invalid(format!(
                "capacity {capacity}, state_dim {state_dim}, action_dim {action_dim} must all be positive"
            )));
        }
        Ok(ReplayBuffer {
            capacity,
            state_dim,
            action_dim,
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            next_states: Vec::new(),
            terminated: Vec::new(),
            head: 0,
            len: 0,
            pushes: 0,
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

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// Number of transitions ever pushed.
    pub fn total_pushes(&self) -> u64 {
        self.pushes
    }

    pub fn push(&mut self, t: Transition) -> Result<(), ReplayError> {
        if t.state.len() != self.state_dim || t.next_state.len() != self.state_dim || t.action.len() != self.action_dim {
            return Err(ReplayError::Dimension(format!(
                "state {}/{}, action {} (buffer expects state {}, action {})",
                t.state.len(),
                t.next_state.len(),
                t.action.len(),
                self.state_dim,
                self.action_dim
            )));
        }
        if t.state.iter().any(|x| !x.is_finite()) {
            return Err(ReplayError::NonFinite("state"));
        }
        if t.action.iter().any(|x| !x.is_finite()) {
            return Err(ReplayError::NonFinite("action"));
        }
        if !t.reward.is_finite() {
            return Err(ReplayError::NonFinite("reward"));
        }
        if t.next_state.iter().any(|x| !x.is_finite()) {
            return Err(ReplayError::NonFinite("next_state"));
        }
        if self.len < self.capacity {
            self.states.extend_from_slice(&t.state);
            self.actions.extend_from_slice(&t.action);
            self.rewards.push(t.reward);
            self.next_states.extend_from_slice(&t.next_state);
            self.terminated.push(t.terminated);
            self.len += 1;
        } else {
            let i = self.head;
            let (sd, ad) = (self.state_dim, self.action_dim);
            self.states[i * sd..(i + 1) * sd].copy_from_slice(&t.state);
            self.actions[i * ad..(i + 1) * ad].copy_from_slice(&t.action);
            self.rewards[i] = t.reward;
            self.next_states[i * sd..(i + 1) * sd].copy_from_slice(&t.next_state);
            self.terminated[i] = t.terminated;
            self.head = (self.head + 1) % self.capacity;
        }
        self.pushes += 1;
        Ok(())
    }

    /// Physical slot of the `k`-th oldest transition.
    fn slot(&self, k: usize) -> usize {
        if self.len < self.capacity {
            k
        } else {
            (self.head + k) % self.capacity
        }
    }

    /// The `k`-th oldest transition.
    pub fn get(&self, k: usize) -> Option<Transition> {
        (k < self.len).then(|| {
            let i = self.slot(k);
            let (sd, ad) = (self.state_dim, self.action_dim);
            Transition {
                state: self.states[i * sd..(i + 1) * sd].to_vec(),
                action: self.actions[i * ad..(i + 1) * ad].to_vec(),
                reward: self.rewards[i],
                next_state: self.next_states[i * sd..(i + 1) * sd].to_vec(),
                terminated: self.terminated[i],
            }
        })
    }

    /// Transitions from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = Transition> + '_ {
        (0..self.len).map(|k| self.get(k).expect("index in range"))
    }

    /// Uniform i.i.d. sample with replacement.
    pub fn sample_batch<R: rand::Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Batch, ReplayError> {
        if self.len == 0 {
            return Err(ReplayError::Empty);
        }
        if batch_size == 0 {
            return Err(ReplayError::Invalid("batch size must be positive".into()));
        }
        let idx: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..self.len)).collect();
        Ok(self.gather(&idx))
    }

    /// [`ReplayBuffer::sample_batch`] with a generator seeded from `seed`.
    pub fn sample_batch_seeded(&self, batch_size: usize, seed: u64) -> Result<Batch, ReplayError> {
        self.sample_batch(batch_size, &mut rng_from(seed, 0))
    }

    /// Rows at the given physical slots.
    pub fn gather(&self, slots: &[usize]) -> Batch {
        let n = slots.len();
        let (sd, ad) = (self.state_dim, self.action_dim);
        let mut states = Array2::zeros((n, sd));
        let mut actions = Array2::zeros((n, ad));
        let mut next_states = Array2::zeros((n, sd));
        let mut rewards = Array1::zeros(n);
        let mut terminated = Array1::zeros(n);
        for (row, &i) in slots.iter().enumerate() {
            states.row_mut(row).as_slice_mut().unwrap().copy_from_slice(&self.states[i * sd..(i + 1) * sd]);
            actions.row_mut(row).as_slice_mut().unwrap().copy_from_slice(&self.actions[i * ad..(i + 1) * ad]);
            next_states
                .row_mut(row)
                .as_slice_mut()
                .unwrap()
                .copy_from_slice(&self.next_states[i * sd..(i + 1) * sd]);
            rewards[row] = self.rewards[i];
            terminated[row] = if self.terminated[i] { 1.0 } else { 0.0 };
        }
        Batch { states, actions, rewards, next_states, terminated }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), ReplayError> {
        let mut header = Vec::with_capacity(HEADER_LEN);
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&VERSION.to_le_bytes());
        header.extend_from_slice(&(self.state_dim as u32).to_le_bytes());
        header.extend_from_slice(&(self.action_dim as u32).to_le_bytes());
        header.extend_from_slice(&(self.capacity as u64).to_le_bytes());
        header.extend_from_slice(&(self.len as u64).to_le_bytes());
        w.write_all(&header)?;
        let mut rec = Vec::with_capacity(self.record_len());
        for t in self.iter() {
            rec.clear();
            for x in t.state.iter().chain(&t.action).chain(std::iter::once(&t.reward)).chain(&t.next_state) {
                rec.extend_from_slice(&x.to_le_bytes());
            }
            rec.push(t.terminated as u8);
            w.write_all(&rec)?;
        }
        Ok(())
    }

    fn record_len(&self) -> usize {
        8 * (2 * self.state_dim + self.action_dim + 1) + 1
    }

    /// Parses a complete snapshot; any truncation or trailing bytes is a
    /// format error and no buffer is produced.
    pub fn read_from<R: Read>(mut r: R) -> Result<Self, ReplayError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ReplayError> {
        if bytes.len() < HEADER_LEN {
            return Err(ReplayError::Format(format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(ReplayError::Format("bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(8);
        if version != VERSION {
            return Err(ReplayError::Format(format!("unsupported version {version}")));
        }
        let state_dim = u32_at(12) as usize;
        let action_dim = u32_at(16) as usize;
        let capacity = u64_at(20) as usize;
        let count = u64_at(28) as usize;
        let mut buf = ReplayBuffer::new(capacity, state_dim, action_dim).map_err(|e| ReplayError::Format(e.to_string()))?;
        if count > capacity {
            return Err(ReplayError::Format(format!("count {count} exceeds capacity {capacity}")));
        }
        let rec_len = buf.record_len();
        let expected = count
            .checked_mul(rec_len)
            .and_then(|b| b.checked_add(HEADER_LEN))
            .ok_or_else(|| ReplayError::Format("record count overflows".into()))?;
        if bytes.len() != expected {
            return Err(ReplayError::Format(format!("expected {expected} bytes, found {}", bytes.len())));
        }
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let mut off = HEADER_LEN;
        let take = |n: usize, off: &mut usize| -> Vec<f64> {
            let v = (0..n).map(|k| f64_at(*off + 8 * k)).collect();
            *off += 8 * n;
            v
        };
        for _ in 0..count {
            let state = take(state_dim, &mut off);
            let action = take(action_dim, &mut off);
            let reward = take(1, &mut off)[0];
            let next_state = take(state_dim, &mut off);
            let terminated = match bytes[off] {
                0 => false,
                1 => true,
                b => return Err(ReplayError::Format(format!("terminated flag {b}"))),
            };
            off += 1;
            buf.push(Transition { state, action, reward, next_state, terminated })
                .map_err(|e| ReplayError::Format(e.to_string()))?;
        }
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<(), ReplayError> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ReplayError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn item(k: usize) -> Transition {
        Transition {
            state: vec![k as f64, -(k as f64)],
            action: vec![0.1 * k as f64],
            reward: k as f64,
            next_state: vec![k as f64 + 1.0, 0.5],
            terminated: k.is_multiple_of(3),
        }
    }

    #[test]
    fn push_counts_and_fifo_eviction() {
        let mut buf = ReplayBuffer::new(3, 2, 1).unwrap();
        buf.push(item(1)).unwrap();
        assert_eq!(buf.len(), 1);
        for k in 2..=4 {
            buf.push(item(k)).unwrap();
        }
        assert_eq!(buf.len(), 3);
        let rewards: Vec<f64> = buf.iter().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn million_pushes_fill_default_capacity() {
        let mut buf = ReplayBuffer::new(DEFAULT_CAPACITY, 1, 1).unwrap();
        let t = Transition { state: vec![0.0], action: vec![0.0], reward: 0.0, next_state: vec![0.0], terminated: false };
        for _ in 0..DEFAULT_CAPACITY {
            buf.push(t.clone()).unwrap();
        }
        assert_eq!(buf.len(), 1_000_000);
        buf.push(t).unwrap();
        assert_eq!(buf.len(), 1_000_000);
    }

    #[test]
    fn dimension_and_finiteness_checks() {
        let mut buf = ReplayBuffer::new(4, 2, 1).unwrap();
        let mut bad = item(0);
        bad.action = vec![0.0, 0.0];
        assert!(matches!(buf.push(bad), Err(ReplayError::Dimension(_))));
        let mut nan = item(0);
        nan.reward = f64::NAN;
        assert!(matches!(buf.push(nan), Err(ReplayError::NonFinite(_))));
        assert!(buf.is_empty());
    }

    #[test]
    fn sampling() {
        let mut buf = ReplayBuffer::new(10, 2, 1).unwrap();
        assert!(matches!(buf.sample_batch_seeded(4, 0), Err(ReplayError::Empty)));
        buf.push(item(7)).unwrap();
        let b = buf.sample_batch_seeded(512, 1).unwrap();
        assert_eq!(b.len(), 512);
        assert!(b.rewards.iter().all(|&r| r == 7.0));
        for k in 0..5 {
            buf.push(item(k)).unwrap();
        }
        assert_eq!(buf.sample_batch_seeded(64, 9).unwrap(), buf.sample_batch_seeded(64, 9).unwrap());
    }

    #[test]
    fn uniformity_chi_square() {
        let mut buf = ReplayBuffer::new(100, 2, 1).unwrap();
        for k in 0..100 {
            buf.push(item(k)).unwrap();
        }
        let mut counts = [0usize; 100];
        let batch = buf.sample_batch_seeded(100_000, 2024).unwrap();
        for r in batch.rewards.iter() {
            counts[*r as usize] += 1;
        }
        let expected = 1000.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99 degrees of freedom: the upper 1% point is 134.64
        assert!(chi2 < 134.64, "chi2 = {chi2}");
    }

    #[test]
    fn snapshot_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("buf.bin");
        let mut buf = ReplayBuffer::new(5, 2, 1).unwrap();
        buf.save(&path).unwrap();
        assert_eq!(ReplayBuffer::load(&path).unwrap(), buf);

        for k in 0..8 {
            let mut t = item(k);
            t.reward = 0.1 + k as f64 / 3.0;
            buf.push(t).unwrap();
        }
        buf.save(&path).unwrap();
        let loaded = ReplayBuffer::load(&path).unwrap();
        assert_eq!(loaded.iter().collect::<Vec<_>>(), buf.iter().collect::<Vec<_>>());
        assert_eq!(loaded.capacity(), 5);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(ReplayBuffer::load(&path), Err(ReplayError::Format(_))));
        std::fs::write(&path, &bytes[..10]).unwrap();
        assert!(matches!(ReplayBuffer::load(&path), Err(ReplayError::Format(_))));
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(matches!(ReplayBuffer::from_bytes(&wrong_version), Err(ReplayError::Format(_))));
    }

    proptest! {
        #[test]
        fn snapshot_is_bit_exact(
            values in proptest::collection::vec((any::<f64>().prop_filter("finite", |x| x.is_finite()), any::<bool>()), 1..40),
            capacity in 1usize..30,
        ) {
            let mut buf = ReplayBuffer::new(capacity, 1, 1).unwrap();
            for (x, d) in &values {
                buf.push(Transition { state: vec![*x], action: vec![-*x], reward: *x * 0.5, next_state: vec![x.sqrt().max(0.0)], terminated: *d }).ok();
            }
            let mut bytes = Vec::new();
            buf.write_to(&mut bytes).unwrap();
            let back = ReplayBuffer::from_bytes(&bytes).unwrap();
            let a: Vec<_> = buf.iter().collect();
            let b: Vec<_> = back.iter().collect();
            prop_assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(x.state[0].to_bits(), y.state[0].to_bits());
                prop_assert_eq!(x.reward.to_bits(), y.reward.to_bits());
                prop_assert_eq!(x.terminated, y.terminated);
            }
        }

        #[test]
        fn fifo_keeps_most_recent(n in 1usize..60, capacity in 1usize..20) {
            let mut buf = ReplayBuffer::new(capacity, 2, 1).unwrap();
            for k in 0..n {
                buf.push(item(k)).unwrap();
            }
            let kept: Vec<f64> = buf.iter().map(|t| t.reward).collect();
            let expected: Vec<f64> = (n.saturating_sub(capacity)..n).map(|k| k as f64).collect();
            prop_assert_eq!(kept, expected);
        }
    }
}
