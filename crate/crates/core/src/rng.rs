//! Seeded randomness.
//!
//! Every draw in a run comes from ChaCha8 (`rand_chacha`), seeded through
//! `SeedableRng::seed_from_u64`. ChaCha output is platform independent, and
//! its 64-bit stream selector gives independent sub-generators via
//! [`SeededRng::fork`], so adding draws in one subsystem never perturbs
//! another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::time::SimTime;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RngError {
    #[error("jitter {jitter} exceeds mean {mean}")]
    InvalidJitter { mean: SimTime, jitter: SimTime },
}

#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for sub-stream `stream` of the same seed.
    pub fn fork(&self, stream: u64) -> SeededRng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        SeededRng {
            seed: self.seed,
            inner,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen()
    }

    /// Uniform draw from the closed range `[lo, hi]`.
    pub fn uniform_inclusive(&mut self, lo: u64, hi: u64) -> u64 {
        self.inner.gen_range(lo..=hi)
    }

    /// Bernoulli trial; `p` outside `[0, 1]` is clamped.
    pub fn chance(&mut self, p: f64) -> bool {
        if p <= 0.0 {
            return false;
        }
        if p >= 1.0 {
            return true;
        }
        self.inner.gen_bool(p)
    }
}

/// Uniform task length in `[mean - jitter, mean + jitter]`.
pub fn sample_task_length(
    rng: &mut SeededRng,
    mean: SimTime,
    jitter: SimTime,
) -> Result<SimTime, RngError> {
    if jitter > mean {
        return Err(RngError::InvalidJitter { mean, jitter });
    }
    if jitter == SimTime::ZERO {
        return Ok(mean);
    }
    let lo = mean.as_millis() - jitter.as_millis();
    let hi = mean.as_millis() + jitter.as_millis();
    Ok(SimTime(rng.uniform_inclusive(lo, hi)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_bounds() {
        let mut rng = SeededRng::new(7);
        for _ in 0..1000 {
            let v = sample_task_length(&mut rng, SimTime(300_000), SimTime(20_000)).unwrap();
            assert!((280_000..=320_000).contains(&v.as_millis()));
        }
    }

    #[test]
    fn zero_jitter_is_exact() {
        let mut rng = SeededRng::new(1);
        assert_eq!(
            sample_task_length(&mut rng, SimTime(5000), SimTime::ZERO).unwrap(),
            SimTime(5000)
        );
    }

    #[test]
    fn invalid_jitter() {
        let mut rng = SeededRng::new(1);
        assert_eq!(
            sample_task_length(&mut rng, SimTime(10), SimTime(11)),
            Err(RngError::InvalidJitter {
                mean: SimTime(10),
                jitter: SimTime(11)
            })
        );
    }

    #[test]
    fn same_seed_same_sequence() {
        let draw = |seed| {
            let mut rng = SeededRng::new(seed);
            (0..10)
                .map(|_| sample_task_length(&mut rng, SimTime(300_000), SimTime(20_000)).unwrap())
                .collect::<Vec<_>>()
        };
        let first = draw(42);
        assert_eq!(first, draw(42));
        assert_ne!(first, draw(43));
    }

    #[test]
    fn forks_are_independent_of_parent_draws() {
        let mut a = SeededRng::new(9);
        let b = SeededRng::new(9);
        a.next_u64();
        assert_eq!(a.fork(3).next_u64(), b.fork(3).next_u64());
        assert_ne!(b.fork(3).next_u64(), b.fork(4).next_u64());
    }

    #[test]
    fn empirical_mean_within_one_percent() {
        let mut rng = SeededRng::new(2024);
        let mean = SimTime(300_000);
        let jitter = SimTime(20_000);
        let n = 10_000u64;
        let mut sum = 0u64;
        for _ in 0..n {
            let v = sample_task_length(&mut rng, mean, jitter).unwrap();
            assert!(v >= mean - jitter && v <= mean + jitter);
            sum += v.as_millis();
        }
        let emp = sum as f64 / n as f64;
        assert!((emp - 300_000.0).abs() / 300_000.0 < 0.01, "mean {emp}");
    }
}
