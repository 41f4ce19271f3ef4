//! Seeded random streams.
//!
//! Every trajectory draws from its own ChaCha stream keyed by
//! `(master_seed, purpose, episode, index)`, so batches are reproducible no
//! matter how rollouts are scheduled across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// What a stream is used for. Distinct purposes never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Train = 2,
    Eval = 3,
    Replay = 4,
    Estimate = 5,
    Diagnostic = 6,
}

/// Identifies a family of per-trajectory substreams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub master_seed: u64,
    pub purpose: Purpose,
    pub episode: u64,
}

impl StreamKey {
    pub fn new(master_seed: u64, purpose: Purpose, episode: u64) -> Self {
        Self {
            master_seed,
            purpose,
            episode,
        }
    }

    /// The independent stream for trajectory `index` of this family.
    pub fn rng(&self, index: u64) -> ChaCha8Rng {
        substream(self.master_seed, self.purpose, self.episode, index)
    }

    pub fn noise(&self, index: u64) -> GaussianNoise<ChaCha8Rng> {
        GaussianNoise(self.rng(index))
    }
}

pub fn substream(master_seed: u64, purpose: Purpose, episode: u64, index: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[0..8].copy_from_slice(&master_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    seed[16..24].copy_from_slice(&episode.to_le_bytes());
    seed[24..32].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}

/// Source of the standard normal increments driving the dynamics.
pub trait NoiseSource {
    fn next_eta(&mut self) -> f64;
}

/// Standard normal draws from any RNG.
#[derive(Debug, Clone)]
pub struct GaussianNoise<R>(pub R);

impl<R: Rng> NoiseSource for GaussianNoise<R> {
    #[inline]
    fn next_eta(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }
}

/// Deterministic dynamics: every increment is zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    #[inline]
    fn next_eta(&mut self) -> f64 {
        0.0
    }
}

/// Replays a fixed list of increments, then zeros.
#[derive(Debug, Clone)]
pub struct ScriptedNoise {
    values: Vec<f64>,
    pos: usize,
}

impl ScriptedNoise {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values, pos: 0 }
    }
}

impl NoiseSource for ScriptedNoise {
    fn next_eta(&mut self) -> f64 {
        let v = self.values.get(self.pos).copied().unwrap_or(0.0);
        self.pos += 1;
        v
    }
}
