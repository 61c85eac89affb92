use crate::error::{invalid, Result};

/// Bytes needed to hold `count` codes of `bits` each.
pub fn packed_len(count: usize, bits: u8) -> usize {
    (count * bits as usize).div_ceil(8)
}

/// Packs codes into an LSB-first bit stream. For 4-bit codes this puts the
/// earlier element in the low nibble. Unused trailing bits are zero.
pub fn pack_codes(codes: &[u8], bits: u8) -> Result<Vec<u8>> {
    if !(1..=8).contains(&bits) {
        return Err(invalid!("cannot pack {bits}-bit codes"));
    }
    let limit = 1u16 << bits;
    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    let mut bit = 0usize;
    for &code in codes {
        if u16::from(code) >= limit {
            return Err(invalid!("code {code} does not fit in {bits} bits"));
        }
        let (byte, shift) = (bit / 8, bit % 8);
        let wide = u16::from(code) << shift;
        out[byte] |= wide as u8;
        if shift + bits as usize > 8 {
            out[byte + 1] |= (wide >> 8) as u8;
        }
        bit += bits as usize;
    }
    Ok(out)
}

pub fn unpack_codes(bytes: &[u8], bits: u8, count: usize) -> Result<Vec<u8>> {
    if !(1..=8).contains(&bits) {
        return Err(invalid!("cannot unpack {bits}-bit codes"));
    }
    if bytes.len() != packed_len(count, bits) {
        return Err(invalid!(
            "{count} codes of {bits} bits need {} bytes, got {}",
            packed_len(count, bits),
            bytes.len()
        ));
    }
    let mask = (1u16 << bits) - 1;
    let mut out = Vec::with_capacity(count);
    let mut bit = 0usize;
    for _ in 0..count {
        let (byte, shift) = (bit / 8, bit % 8);
        let mut wide = u16::from(bytes[byte]);
        if byte + 1 < bytes.len() {
            wide |= u16::from(bytes[byte + 1]) << 8;
        }
        out.push(((wide >> shift) & mask) as u8);
        bit += bits as usize;
    }
    Ok(out)
}
