//! Counter-keyed normal draws on top of ChaCha8.
//!
//! A generator is keyed by `(seed, stream)`; inside it, draw slot `(t, player)` starts at
//! word position `(t·n + player)·width`, so any slot can be reached directly and
//! sequential reads land on the same words.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// SplitMix64 finalizer; used to fold several counters into one stream id.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(a << 6).wrapping_add(a >> 2);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream_id(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed, |acc, p| mix(acc, *p))
}

pub fn keyed(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform in `(0, 1]` from one 64-bit draw.
fn open_unit(rng: &mut ChaCha8Rng) -> f64 {
    ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Normal draws addressed by `(t, player)` slots of `dim` values each.
#[derive(Debug, Clone)]
pub struct SlotRng {
    rng: ChaCha8Rng,
    players: u64,
    width: u64,
}

impl SlotRng {
    pub fn new(seed: u64, stream: u64, players: usize, dim: usize) -> Self {
        // Box–Muller consumes four 32-bit words per pair of normals.
        let pairs = dim.div_ceil(2).max(1) as u64;
        SlotRng {
            rng: keyed(seed, stream),
            players: players.max(1) as u64,
            width: 4 * pairs,
        }
    }

    fn seek(&mut self, slot: u64) {
        let pos = u128::from(slot) * u128::from(self.width);
        if self.rng.get_word_pos() != pos {
            self.rng.set_word_pos(pos);
        }
    }

    /// Fills `out` with the standard normals of slot `(t, player)`.
    pub fn normals(&mut self, t: usize, player: usize, out: &mut [f64]) {
        self.seek(t as u64 * self.players + player as u64);
        let mut i = 0;
        let pairs = self.width / 4;
        for _ in 0..pairs {
            let u1 = open_unit(&mut self.rng);
            let u2 = open_unit(&mut self.rng);
            let rad = (-2.0 * u1.ln()).sqrt();
            let (sin, cos) = (std::f64::consts::TAU * u2).sin_cos();
            for z in [rad * cos, rad * sin] {
                if i < out.len() {
                    out[i] = z;
                    i += 1;
                }
            }
        }
    }

    /// One uniform index in `0..bound` drawn from slot `(t, player)`.
    pub fn index(&mut self, t: usize, player: usize, bound: usize) -> usize {
        self.seek(t as u64 * self.players + player as u64);
        (open_unit(&mut self.rng) * bound as f64).ceil() as usize - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_access_matches_sequential() {
        let mut seq = SlotRng::new(7, 3, 4, 3);
        let mut draws = Vec::new();
        for t in 0..5 {
            for p in 0..4 {
                let mut z = [0.0; 3];
                seq.normals(t, p, &mut z);
                draws.push(z);
            }
        }
        let mut ra = SlotRng::new(7, 3, 4, 3);
        for (k, expect) in draws.iter().enumerate().rev() {
            let mut z = [0.0; 3];
            ra.normals(k / 4, k % 4, &mut z);
            assert_eq!(&z, expect);
        }
    }

    #[test]
    fn streams_differ() {
        let mut a = SlotRng::new(1, stream_id(&[0, 1]), 1, 1);
        let mut b = SlotRng::new(1, stream_id(&[1, 0]), 1, 1);
        let (mut x, mut y) = ([0.0], [0.0]);
        a.normals(0, 0, &mut x);
        b.normals(0, 0, &mut y);
        assert_ne!(x, y);
    }

    #[test]
    fn normal_moments() {
        let mut r = SlotRng::new(11, 0, 1, 2);
        let n = 200_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for t in 0..n / 2 {
            let mut z = [0.0; 2];
            r.normals(t, 0, &mut z);
            for v in z {
                s1 += v;
                s2 += v * v;
            }
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 0.02);
    }

    #[test]
    fn index_in_range() {
        let mut r = SlotRng::new(5, 9, 1, 1);
        for t in 0..1000 {
            assert!(r.index(t, 0, 10) < 10);
        }
    }
}
