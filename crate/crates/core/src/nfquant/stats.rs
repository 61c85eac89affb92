use serde::{Deserialize, Serialize};

use crate::nfquant::QuantisedMatrix;

/// Full-precision bytes against quantised bytes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantStats {
    pub raw_bytes: u64,
    pub quantised_bytes: u64,
    pub ratio: f64,
}

impl QuantStats {
    pub fn from_bytes(raw_bytes: u64, quantised_bytes: u64) -> Self {
        assert!(raw_bytes > 0 && quantised_bytes > 0, "byte counts must be positive");
        Self {
            raw_bytes,
            quantised_bytes,
            ratio: raw_bytes as f64 / quantised_bytes as f64,
        }
    }
}

/// Payload accounting for one matrix: `4·n + extra` FP32 bytes against packed
/// codes, one FP32 scale per block and the same `extra` bytes left unquantised.
/// Section headers are not counted here; whole-model ratios come from real
/// checkpoint sizes.
pub fn compression_stats(
    raw_elements: usize,
    quantised: &QuantisedMatrix,
    unquantised_bytes: usize,
) -> QuantStats {
    debug_assert_eq!(raw_elements, quantised.num_elements());
    let raw = 4 * raw_elements + unquantised_bytes;
    let packed = (quantised.bits() as usize * raw_elements).div_ceil(8);
    let q = packed + 4 * quantised.num_blocks() + unquantised_bytes;
    QuantStats::from_bytes(raw as u64, q as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nfquant::{quantise_matrix, NormalFloatCodebook};
    use crate::tensor::Matrix;

    #[test]
    fn block_64_arithmetic() {
        let q = quantise_matrix(&Matrix::identity(512), 64, &NormalFloatCodebook::nf4()).unwrap();
        let s = compression_stats(512 * 512, &q, 0);
        assert_eq!(s.raw_bytes, 1_048_576);
        assert_eq!(s.quantised_bytes, 131_072 + 16_384);
        assert_eq!(s.ratio, 32.0 / (4.0 + 32.0 / 64.0));
    }

    #[test]
    fn larger_blocks_shrink_overhead() {
        let q = quantise_matrix(&Matrix::identity(512), 256, &NormalFloatCodebook::nf4()).unwrap();
        let s = compression_stats(512 * 512, &q, 0);
        assert_eq!(s.ratio, 32.0 / (4.0 + 32.0 / 256.0));
        assert!(s.ratio > 7.11);
    }

    #[test]
    fn unquantised_bytes_dilute_ratio() {
        let q = quantise_matrix(&Matrix::identity(64), 64, &NormalFloatCodebook::nf4()).unwrap();
        let pure = compression_stats(64 * 64, &q, 0);
        let mixed = compression_stats(64 * 64, &q, 1000);
        assert!(mixed.ratio < pure.ratio && mixed.ratio > 1.0);
    }
}
