//! Counter-based deterministic randomness for dropout masks.
//!
//! Masks are a pure function of (seed, step, layer id, element index), so a
//! run replays bit-identically no matter how the forward pass is scheduled
//! and backward can regenerate the mask instead of storing it.

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix (seed, step, layer) into a single dropout key.
pub fn dropout_key(seed: u64, step: u64, layer: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ step) ^ layer)
}

/// Uniform sample in [0, 1) for element `index` under `key`.
pub fn unit_uniform(key: u64, index: u64) -> f64 {
    let bits = splitmix64(key ^ index.wrapping_mul(0xA076_1D64_78BD_642F));
    // 53 mantissa bits
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_is_deterministic_and_in_range() {
        let key = dropout_key(7, 3, 2);
        for i in 0..10_000u64 {
            let u = unit_uniform(key, i);
            assert!((0.0..1.0).contains(&u));
            assert_eq!(u, unit_uniform(key, i));
        }
    }

    #[test]
    fn distinct_keys_give_distinct_masks() {
        let a = dropout_key(7, 3, 2);
        let b = dropout_key(7, 4, 2);
        let same = (0..1000u64)
            .filter(|&i| (unit_uniform(a, i) < 0.5) == (unit_uniform(b, i) < 0.5))
            .count();
        assert!(same > 300 && same < 700, "masks look correlated: {same}");
    }

    #[test]
    fn mean_is_near_half() {
        let key = dropout_key(1, 1, 1);
        let mean: f64 = (0..50_000u64).map(|i| unit_uniform(key, i)).sum::<f64>() / 50_000.0;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }
}
