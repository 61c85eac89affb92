use crate::error::{corrupt, dim_err, invalid, Result};
use crate::nfquant::pack::{pack_codes, packed_len, unpack_codes};
use crate::nfquant::NormalFloatCodebook;
use crate::tensor::Matrix;

pub const DEFAULT_BLOCK_SIZE: usize = 64;

/// A weight matrix stored as packed k-bit codes plus one absmax scale per block.
///
/// Blocks run over the flattened row-major element order; the last block may
/// be short.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantisedMatrix {
    rows: usize,
    cols: usize,
    bits: u8,
    block_size: usize,
    scales: Vec<f32>,
    packed: Vec<u8>,
}

impl QuantisedMatrix {
    /// Reassembles a matrix from stored parts, checking every structural invariant.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        bits: u8,
        block_size: usize,
        scales: Vec<f32>,
        packed: Vec<u8>,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 || block_size == 0 {
            return Err(corrupt!("empty quantised matrix {rows}x{cols} block {block_size}"));
        }
        if !(2..=8).contains(&bits) {
            return Err(corrupt!("unsupported code width {bits}"));
        }
        let count = rows * cols;
        if scales.len() != count.div_ceil(block_size) {
            return Err(corrupt!(
                "{count} elements in blocks of {block_size} need {} scales, found {}",
                count.div_ceil(block_size),
                scales.len()
            ));
        }
        if scales.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(corrupt!("scales must be finite and non-negative"));
        }
        if packed.len() != packed_len(count, bits) {
            return Err(corrupt!(
                "expected {} packed bytes, found {}",
                packed_len(count, bits),
                packed.len()
            ));
        }
        let used = count * bits as usize;
        if !used.is_multiple_of(8) && packed[packed.len() - 1] >> (used % 8) != 0 {
            return Err(corrupt!("non-zero padding bits after the last code"));
        }
        Ok(Self {
            rows,
            cols,
            bits,
            block_size,
            scales,
            packed,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn num_elements(&self) -> usize {
        self.rows * self.cols
    }

    pub fn num_blocks(&self) -> usize {
        self.scales.len()
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    pub fn codes(&self) -> Vec<u8> {
        unpack_codes(&self.packed, self.bits, self.num_elements())
            .expect("length checked at construction")
    }

    /// Payload bytes: packed codes plus FP32 scales.
    pub fn payload_bytes(&self) -> usize {
        self.packed.len() + 4 * self.scales.len()
    }
}

/// Quantises one block: the scale is the block's absmax and each element maps
/// to the code of the level nearest to `value / scale`.
pub fn quantise_block(values: &[f32], cb: &NormalFloatCodebook) -> Result<(Vec<u8>, f32)> {
    if values.is_empty() {
        return Err(invalid!("cannot quantise an empty block"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid!("block contains NaN or Inf"));
    }
    let scale = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Ok((vec![cb.zero_code(); values.len()], 0.0));
    }
    let inv = f64::from(scale);
    let codes = values
        .iter()
        .map(|&v| cb.nearest(f64::from(v) / inv))
        .collect();
    Ok((codes, scale))
}

pub fn quantise_matrix(
    m: &Matrix,
    block_size: usize,
    cb: &NormalFloatCodebook,
) -> Result<QuantisedMatrix> {
    if block_size == 0 {
        return Err(invalid!("block size must be at least 1"));
    }
    let mut codes = Vec::with_capacity(m.len());
    let mut scales = Vec::with_capacity(m.len().div_ceil(block_size));
    for block in m.data().chunks(block_size) {
        let (c, s) = quantise_block(block, cb)?;
        codes.extend_from_slice(&c);
        scales.push(s);
    }
    let packed = pack_codes(&codes, cb.bits())?;
    Ok(QuantisedMatrix {
        rows: m.rows(),
        cols: m.cols(),
        bits: cb.bits(),
        block_size,
        scales,
        packed,
    })
}

/// Reconstructs `level[code] * block_scale` for every element.
pub fn dequantise(q: &QuantisedMatrix, cb: &NormalFloatCodebook) -> Result<Matrix> {
    if cb.bits() != q.bits {
        return Err(dim_err!(
            "{}-bit matrix cannot be decoded with a {}-bit codebook",
            q.bits,
            cb.bits()
        ));
    }
    let codes = unpack_codes(&q.packed, q.bits, q.num_elements())?;
    let levels = cb.levels();
    let mut data = Vec::with_capacity(codes.len());
    for (block, &scale) in codes.chunks(q.block_size).zip(&q.scales) {
        for &code in block {
            let level = *levels
                .get(code as usize)
                .ok_or_else(|| corrupt!("code {code} outside a {}-level codebook", levels.len()))?;
            data.push(level * scale);
        }
    }
    Matrix::new(q.rows, q.cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gaussian_fill, Rng};

    fn nf4() -> NormalFloatCodebook {
        NormalFloatCodebook::nf4()
    }

    #[test]
    fn zero_block() {
        let cb = nf4();
        let (codes, scale) = quantise_block(&[0.0; 10], &cb).unwrap();
        assert_eq!(scale, 0.0);
        assert!(codes.iter().all(|&c| c == cb.zero_code()));
        let q = quantise_matrix(&Matrix::zeros(2, 5), 64, &cb).unwrap();
        assert!(dequantise(&q, &cb).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn endpoints_map_to_outer_codes() {
        let cb = nf4();
        let (codes, scale) = quantise_block(&[2.0, -2.0], &cb).unwrap();
        assert_eq!(scale, 2.0);
        assert_eq!(codes, vec![15, 0]);
    }

    #[test]
    fn single_element_matrix() {
        let cb = nf4();
        let m = Matrix::new(1, 1, vec![5.0]).unwrap();
        for bs in [1, 7, 64] {
            let q = quantise_matrix(&m, bs, &cb).unwrap();
            assert_eq!(q.scales(), &[5.0]);
            assert_eq!(q.codes(), vec![15]);
        }
    }

    #[test]
    fn non_finite_rejected() {
        assert!(quantise_block(&[1.0, f32::NAN], &nf4()).is_err());
        assert!(quantise_block(&[f32::INFINITY], &nf4()).is_err());
        assert!(quantise_block(&[], &nf4()).is_err());
    }

    #[test]
    fn levels_round_trip_exactly() {
        let cb = nf4();
        let m = Matrix::new(1, 16, cb.levels().to_vec()).unwrap();
        let q = quantise_matrix(&m, 16, &cb).unwrap();
        assert_eq!(q.scales(), &[1.0]);
        assert_eq!(dequantise(&q, &cb).unwrap(), m);
    }

    #[test]
    fn short_last_block() {
        let cb = nf4();
        let mut rng = Rng::new(4);
        let m = gaussian_fill(Matrix::zeros(3, 7), 0.0, 1.0, &mut rng).unwrap();
        let q = quantise_matrix(&m, 8, &cb).unwrap();
        assert_eq!(q.num_blocks(), 3);
        let last = &m.data()[16..];
        let absmax = last.iter().fold(0.0f32, |a, v| a.max(v.abs()));
        assert_eq!(q.scales()[2], absmax);
    }

    #[test]
    fn codebook_width_mismatch_rejected() {
        let q = quantise_matrix(&Matrix::identity(4), 4, &nf4()).unwrap();
        let cb3 = NormalFloatCodebook::new(3).unwrap();
        assert!(dequantise(&q, &cb3).is_err());
    }

    #[test]
    fn from_parts_validates() {
        assert!(QuantisedMatrix::from_parts(2, 2, 4, 2, vec![1.0, 1.0], vec![0, 0]).is_ok());
        assert!(QuantisedMatrix::from_parts(2, 2, 4, 2, vec![1.0], vec![0, 0]).is_err());
        assert!(QuantisedMatrix::from_parts(2, 2, 4, 2, vec![-1.0, 1.0], vec![0, 0]).is_err());
        assert!(QuantisedMatrix::from_parts(1, 3, 4, 4, vec![1.0], vec![0, 0x10]).is_err());
        assert!(QuantisedMatrix::from_parts(1, 3, 4, 4, vec![1.0], vec![0, 0x01]).is_ok());
    }
}
