//! Keyed bijection on `[0, 2^w)` for stateless random access into a shuffled pool.
//!
//! Four Feistel rounds over a `floor(w/2)` / `ceil(w/2)` split. Each round XORs
//! one half with a keyed mix of the other, so the map is invertible for any
//! split, odd widths included.

use super::ScheduleError;

const ROUNDS: usize = 4;

/// SplitMix64 finalizer.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Feistel {
    left_bits: u32,
    right_bits: u32,
    round_keys: [u64; ROUNDS],
}

impl Feistel {
    pub(crate) fn new(key: u64, width: u32) -> Self {
        debug_assert!(width <= 64);
        let mut round_keys = [0u64; ROUNDS];
        for (r, rk) in round_keys.iter_mut().enumerate() {
            *rk = mix64(key ^ (r as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        }
        let left_bits = width / 2;
        Feistel { left_bits, right_bits: width - left_bits, round_keys }
    }

    fn mask(bits: u32) -> u64 {
        if bits >= 64 {
            u64::MAX
        } else {
            (1u64 << bits) - 1
        }
    }

    fn round(&self, r: usize, half: u64) -> u64 {
        mix64(half ^ self.round_keys[r])
    }

    pub(crate) fn permute(&self, x: u64) -> u64 {
        let (lm, rm) = (Self::mask(self.left_bits), Self::mask(self.right_bits));
        let mut left = (x >> self.right_bits) & lm;
        let mut right = x & rm;
        for r in 0..ROUNDS {
            if r % 2 == 0 {
                left ^= self.round(r, right) & lm;
            } else {
                right ^= self.round(r, left) & rm;
            }
        }
        (left << self.right_bits) | right
    }

    #[cfg(test)]
    pub(crate) fn invert(&self, y: u64) -> u64 {
        let (lm, rm) = (Self::mask(self.left_bits), Self::mask(self.right_bits));
        let mut left = (y >> self.right_bits) & lm;
        let mut right = y & rm;
        for r in (0..ROUNDS).rev() {
            if r % 2 == 0 {
                left ^= self.round(r, right) & lm;
            } else {
                right ^= self.round(r, left) & rm;
            }
        }
        (left << self.right_bits) | right
    }
}

/// Element at position `index` of the keyed shuffle of `[0, pool_size)`.
pub fn permutation_at(key: u64, pool_size: u64, index: u64) -> Result<u64, ScheduleError> {
    if !pool_size.is_power_of_two() {
        return Err(ScheduleError::NotPowerOfTwo(pool_size));
    }
    if index >= pool_size {
        return Err(ScheduleError::IndexOutOfRange { index, size: pool_size });
    }
    Ok(Feistel::new(key, pool_size.trailing_zeros()).permute(index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bijection_on_16_for_many_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let key: u64 = rng.gen();
            let mut seen: Vec<u64> = (0..16).map(|i| permutation_at(key, 16, i).unwrap()).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..16).collect::<Vec<_>>());
        }
    }

    #[test]
    fn full_cycle_bitmap_2_20() {
        let size = 1u64 << 20;
        let f = Feistel::new(0xdead_beef, 20);
        let mut bitmap = vec![0u64; (size / 64) as usize];
        for i in 0..size {
            let v = f.permute(i);
            let (w, b) = ((v / 64) as usize, v % 64);
            assert_eq!(bitmap[w] & (1 << b), 0, "repeat at {v}");
            bitmap[w] |= 1 << b;
        }
        assert!(bitmap.iter().all(|w| *w == u64::MAX));
    }

    #[test]
    fn every_small_width_is_bijective() {
        for width in 0..=12u32 {
            let f = Feistel::new(42, width);
            let size = 1u64 << width;
            let mut seen = vec![false; size as usize];
            for i in 0..size {
                let v = f.permute(i);
                assert!(v < size);
                assert!(!seen[v as usize]);
                seen[v as usize] = true;
                assert_eq!(f.invert(v), i);
            }
        }
    }

    #[test]
    fn keys_change_the_order() {
        let a: Vec<u64> = (0..256).map(|i| permutation_at(1, 256, i).unwrap()).collect();
        let b: Vec<u64> = (0..256).map(|i| permutation_at(2, 256, i).unwrap()).collect();
        assert!(a.iter().zip(&b).any(|(x, y)| x != y));
    }

    #[test]
    fn rejects_bad_arguments() {
        assert_eq!(permutation_at(0, 12, 0), Err(ScheduleError::NotPowerOfTwo(12)));
        assert_eq!(permutation_at(0, 16, 16), Err(ScheduleError::IndexOutOfRange { index: 16, size: 16 }));
        assert_eq!(permutation_at(9, 1, 0), Ok(0));
    }
}
