//! Deterministic derivation of independent seeds from the global seed.

/// Mixes `base` with a stream tag and an index (splitmix64 finalizer).
pub fn derive(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const ENCODER_INIT: u64 = 1;
pub const DECODER_INIT: u64 = 2;
pub const SHUFFLE: u64 = 3;
pub const KMEANS: u64 = 4;
pub const NEGATIVES: u64 = 5;
pub const PROBE: u64 = 6;
pub const SPLIT: u64 = 7;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_and_indices_decorrelate() {
        assert_eq!(derive(7, KMEANS, 0), derive(7, KMEANS, 0));
        assert_ne!(derive(7, KMEANS, 0), derive(7, KMEANS, 1));
        assert_ne!(derive(7, KMEANS, 0), derive(7, SHUFFLE, 0));
        assert_ne!(derive(7, KMEANS, 0), derive(8, KMEANS, 0));
    }
}
