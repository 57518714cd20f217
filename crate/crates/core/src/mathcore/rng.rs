//! Seeded, splittable random streams.
//!
//! Every stream is a ChaCha8 keystream (RFC 7539 block function reduced to
//! 8 rounds; constants "expand 32-byte k"). The 64-bit user seed is expanded
//! into a 256-bit key with PCG32 exactly as `rand_core::SeedableRng::seed_from_u64`
//! does. Child streams derive a fresh key from the first 32 keystream bytes of
//! the parent key on a dedicated stream nonce, so forking never advances the
//! parent and nested forks never collide.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

/// Serializable snapshot of an [`Rng`] position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub key: String,
    pub stream: u64,
    /// Word position in the keystream, as a decimal string (u128).
    pub word_pos: String,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent child stream identified by `id`. Does not advance `self`.
    pub fn fork(&self, id: u64) -> Rng {
        let mut keygen = ChaCha8Rng::from_seed(self.inner.get_seed());
        // Stream ids of children are offset so they never coincide with the
        // stream the parent itself draws from.
        keygen.set_stream(id.wrapping_mul(2).wrapping_add(1) ^ self.inner.get_stream());
        let mut key = [0u8; 32];
        keygen.fill_bytes(&mut key);
        Rng {
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    /// Child stream identified by a label.
    pub fn fork_named(&self, label: &str) -> Rng {
        // FNV-1a, stable across builds.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        self.fork(h)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform index in `0..n`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "Rng::below(0)");
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, uniformly over subsets, in draw order.
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }

    pub fn state(&self) -> RngState {
        let key: String = self
            .inner
            .get_seed()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        RngState {
            key,
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos().to_string(),
        }
    }

    pub fn from_state(state: &RngState) -> Result<Self> {
        let bad = || Error::Input(format!("malformed rng state {state:?}"));
        if state.key.len() != 64 {
            return Err(bad());
        }
        let mut key = [0u8; 32];
        for (i, b) in key.iter_mut().enumerate() {
            *b = u8::from_str_radix(&state.key[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let pos: u128 = state.word_pos.parse().map_err(|_| bad())?;
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(state.stream);
        inner.set_word_pos(pos);
        Ok(Self { inner })
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_seeds_give_identical_streams() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::new(8);
        assert_ne!(Rng::new(7).next_u64(), c.next_u64());
    }

    #[test]
    fn forks_are_reproducible_and_distinct() {
        let root = Rng::new(3);
        let mut f1 = root.fork(1);
        let mut f1b = root.fork(1);
        let mut f2 = root.fork(2);
        let x = f1.next_u64();
        assert_eq!(x, f1b.next_u64());
        assert_ne!(x, f2.next_u64());
        // fork does not advance the parent
        let mut r1 = root.clone();
        let mut r2 = Rng::new(3);
        assert_eq!(r1.next_u64(), r2.next_u64());
        // nested forks differ from siblings
        assert_ne!(root.fork(1).fork(1).next_u64(), root.fork(1).next_u64());
    }

    #[test]
    fn state_round_trip_resumes_stream() {
        let mut a = Rng::new(11).fork_named("data");
        for _ in 0..37 {
            a.normal();
        }
        let mut b = Rng::from_state(&a.state()).unwrap();
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn choose_distinct_is_a_subset() {
        let mut r = Rng::new(5);
        let mut s = r.choose_distinct(10, 4);
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 4);
        assert!(s.iter().all(|&i| i < 10));
    }
}
