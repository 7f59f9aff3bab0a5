//! Fixed-capacity history of refined images for discriminator updates.
//!
//! Each discriminator step sees the current refiner's outputs plus an equal
//! number of images drawn from the history; afterwards that many randomly
//! chosen slots are overwritten with the fresh outputs.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, RngState};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ReplayBuffer<T: Clone = Tensor> {
    capacity: usize,
    slots: Vec<T>,
    rng: ChaCha8Rng,
}

impl<T: Clone> ReplayBuffer<T> {
    pub fn new(capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Buffer("capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            slots: Vec::with_capacity(capacity),
            rng: rng::derive(seed, 7),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.slots.len() == self.capacity
    }

    /// Read-only view of the slots.
    pub fn slots(&self) -> &[T] {
        &self.slots
    }

    /// Fills an empty buffer to capacity by cycling through `items`.
    pub fn seed_fill(&mut self, items: &[T]) -> Result<()> {
        if !self.slots.is_empty() {
            return Err(Error::Buffer("seed_fill on a non-empty buffer".into()));
        }
        if items.is_empty() {
            return Err(Error::Buffer("seed_fill needs at least one item".into()));
        }
        self.slots = items.iter().cycle().take(self.capacity).cloned().collect();
        Ok(())
    }

    fn require_full(&self) -> Result<()> {
        if self.is_full() {
            Ok(())
        } else {
            Err(Error::Buffer(format!(
                "buffer holds {} of {} items; seed_fill it first",
                self.slots.len(),
                self.capacity
            )))
        }
    }

    /// Copies of `k` distinct slots chosen uniformly at random.
    pub fn sample_history(&mut self, k: usize) -> Result<Vec<T>> {
        self.require_full()?;
        if k > self.capacity {
            return Err(Error::Buffer(format!("cannot sample {k} from {}", self.capacity)));
        }
        Ok(index::sample(&mut self.rng, self.capacity, k)
            .into_iter()
            .map(|i| self.slots[i].clone())
            .collect())
    }

    /// Fake stream = `current` followed by as many history samples; the real
    /// stream is passed through unchanged.
    pub fn compose_disc_batch(&mut self, current: &[T], real: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        self.require_full()?;
        let history = self.sample_history(current.len())?;
        let mut fakes = current.to_vec();
        fakes.extend(history);
        Ok((fakes, real.to_vec()))
    }

    /// Overwrites `new.len()` distinct, uniformly chosen slots. Returns the
    /// slot indices written, in write order.
    pub fn replace_half(&mut self, new: &[T]) -> Result<Vec<usize>> {
        self.require_full()?;
        if new.len() > self.capacity {
            return Err(Error::Buffer(format!(
                "cannot replace {} slots in a buffer of {}",
                new.len(),
                self.capacity
            )));
        }
        let picks: Vec<usize> = index::sample(&mut self.rng, self.capacity, new.len()).into_vec();
        for (&slot, item) in picks.iter().zip(new) {
            self.slots[slot] = item.clone();
        }
        Ok(picks)
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    pub fn restore_rng(&mut self, state: &RngState) -> Result<()> {
        self.rng = state.restore()?;
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BufferMeta {
    capacity: usize,
    len: usize,
    rng: RngState,
}

impl ReplayBuffer<Tensor> {
    /// Writes `buffer.tns` (slots stacked along a new leading axis) and
    /// `buffer.json` (capacity and RNG position) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        if !self.slots.is_empty() {
            let refs: Vec<&Tensor> = self.slots.iter().collect();
            Tensor::stack(&refs)?.write_tns1(dir.join("buffer.tns"))?;
        }
        let meta = BufferMeta {
            capacity: self.capacity,
            len: self.slots.len(),
            rng: self.rng_state(),
        };
        fs::write(dir.join("buffer.json"), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("buffer.json");
        let meta: BufferMeta =
            serde_json::from_slice(&fs::read(&mpath)?).map_err(|e| Error::corrupt(&mpath, e.to_string()))?;
        let slots = if meta.len == 0 {
            Vec::new()
        } else {
            let path = dir.join("buffer.tns");
            let stack = Tensor::read_tns1(&path)?;
            if stack.shape()[0] != meta.len {
                return Err(Error::corrupt(
                    path,
                    format!("{} images stored, manifest says {}", stack.shape()[0], meta.len),
                ));
            }
            stack.unstack()
        };
        if meta.len > meta.capacity || meta.capacity == 0 {
            return Err(Error::corrupt(mpath, "inconsistent buffer size"));
        }
        Ok(Self {
            capacity: meta.capacity,
            slots,
            rng: meta.rng.restore()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn filled(capacity: usize, seed: u64) -> ReplayBuffer<u64> {
        let mut b = ReplayBuffer::new(capacity, seed).unwrap();
        let ids: Vec<u64> = (0..capacity as u64).collect();
        b.seed_fill(&ids).unwrap();
        b
    }

    #[test]
    fn seed_fill_cycles() {
        let mut b = ReplayBuffer::new(8, 0).unwrap();
        b.seed_fill(&[10u64, 11, 12]).unwrap();
        assert_eq!(b.slots(), &[10, 11, 12, 10, 11, 12, 10, 11]);
        assert!(b.seed_fill(&[1]).is_err());

        let mut c = ReplayBuffer::new(8, 0).unwrap();
        let items: Vec<u64> = (100..108).collect();
        c.seed_fill(&items).unwrap();
        assert_eq!(c.slots(), &items[..]);
    }

    #[test]
    fn seeded_buffer_only_returns_seeded_items() {
        let mut b = ReplayBuffer::new(16, 3).unwrap();
        b.seed_fill(&[7u64, 8, 9]).unwrap();
        for _ in 0..200 {
            assert!(b.sample_history(4).unwrap().iter().all(|v| [7, 8, 9].contains(v)));
        }
    }

    #[test]
    fn unfilled_buffer_is_rejected() {
        let mut b = ReplayBuffer::<u64>::new(4, 0).unwrap();
        assert!(b.compose_disc_batch(&[1, 2], &[3, 4]).is_err());
        assert!(b.replace_half(&[1]).is_err());
        assert!(ReplayBuffer::<u64>::new(0, 0).is_err());
    }

    #[test]
    fn compose_returns_current_plus_history() {
        let mut b = filled(8, 1);
        let (fakes, reals) = b.compose_disc_batch(&[100, 101], &[200, 201]).unwrap();
        assert_eq!(fakes.len(), 4);
        assert_eq!(&fakes[..2], &[100, 101]);
        assert!(fakes[2..].iter().all(|v| *v < 8));
        assert_ne!(fakes[2], fakes[3], "history draws are without replacement");
        assert_eq!(reals, vec![200, 201]);
    }

    #[test]
    fn draws_are_seed_deterministic() {
        let mut a = filled(32, 9);
        let mut b = filled(32, 9);
        for _ in 0..10 {
            assert_eq!(a.sample_history(5).unwrap(), b.sample_history(5).unwrap());
        }
    }

    #[test]
    fn replace_whole_buffer() {
        let mut b = filled(4, 2);
        let mut slots = b.replace_half(&[10, 11, 12, 13]).unwrap();
        slots.sort();
        assert_eq!(slots, vec![0, 1, 2, 3]);
        let mut s = b.slots().to_vec();
        s.sort();
        assert_eq!(s, vec![10, 11, 12, 13]);
        assert!(b.replace_half(&[0; 5]).is_err());
    }

    #[test]
    fn replace_changes_exactly_k_slots() {
        let mut b = filled(8, 5);
        let before = b.slots().to_vec();
        b.replace_half(&[100, 101]).unwrap();
        let changed = before.iter().zip(b.slots()).filter(|(x, y)| x != y).count();
        assert_eq!(changed, 2);
        assert_eq!(b.len(), 8);
    }

    #[test]
    fn sample_is_a_copy() {
        let mut b = ReplayBuffer::new(2, 0).unwrap();
        b.seed_fill(&[Tensor::filled(&[1, 2, 2], 0.25)]).unwrap();
        let mut s = b.sample_history(1).unwrap();
        s[0].data_mut().fill(9.0);
        assert!(b.slots().iter().all(|t| t.data().iter().all(|&v| v == 0.25)));
    }

    #[test]
    fn save_load_round_trip_continues_identically() {
        let dir = tempfile::tempdir().unwrap();
        let imgs: Vec<Tensor> = (0..3).map(|i| Tensor::filled(&[1, 4, 4], i as f32 * 0.1)).collect();
        let mut a = ReplayBuffer::new(6, 11).unwrap();
        a.seed_fill(&imgs).unwrap();
        a.replace_half(&[Tensor::filled(&[1, 4, 4], 0.9)]).unwrap();
        a.save(dir.path()).unwrap();
        let mut b = ReplayBuffer::load(dir.path()).unwrap();
        assert_eq!(a.slots(), b.slots());
        assert_eq!(a.sample_history(3).unwrap(), b.sample_history(3).unwrap());
    }

    #[test]
    fn corrupted_buffer_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = ReplayBuffer::new(4, 1).unwrap();
        a.seed_fill(&[Tensor::filled(&[1, 2, 2], 0.5)]).unwrap();
        a.save(dir.path()).unwrap();
        let p = dir.path().join("buffer.tns");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(ReplayBuffer::load(dir.path()).is_err());
    }

    proptest! {
        #[test]
        fn size_is_invariant(capacity in 1usize..40, ops in proptest::collection::vec((0usize..2, 0usize..40), 1..30), seed in any::<u64>()) {
            let mut b = filled(capacity, seed);
            let mut next = 1000u64;
            for (kind, k) in ops {
                let k = k % (capacity + 1);
                if kind == 0 {
                    let cur: Vec<u64> = (0..k as u64).map(|i| next + i).collect();
                    next += k as u64;
                    let (fakes, _) = b.compose_disc_batch(&cur, &[]).unwrap();
                    prop_assert_eq!(fakes.len(), 2 * k);
                } else {
                    let new: Vec<u64> = (0..k as u64).map(|i| next + i).collect();
                    next += k as u64;
                    let before = b.slots().to_vec();
                    b.replace_half(&new).unwrap();
                    let changed = before.iter().zip(b.slots()).filter(|(x, y)| x != y).count();
                    prop_assert_eq!(changed, k);
                }
                prop_assert_eq!(b.len(), capacity);
            }
        }
    }
}
