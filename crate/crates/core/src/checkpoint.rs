//! Binary model checkpoints and per-speaker adapter files.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "PQM1"
//! vocab u32 | classes u32 | d_model u32 | n_layers u32
//! manifest, per layer: kind u8 | rows u32 | cols u32 | quantised u8 | bias_len u32
//! sections, per layer:
//!     FP32 weight:      rows·cols × f32
//!     quantised weight: rows u32 | cols u32 | k u8 | block_size u32
//!                       | scales f32 × ceil(rows·cols / block_size)
//!                       | packed codes, ceil(rows·cols·k / 8) bytes
//!     bias:             bias_len × f32
//! ```
//!
//! Adapter file: `"PQMA" | speaker str | n u32`, then per adapter
//! `layer_id str | d u32 | k_dim u32 | r u32 | alpha f32 | A (r×k_dim f32) | B (d×r f32)`.
//! Strings are u32 length-prefixed UTF-8.

use std::fs;
use std::io::Read;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{corrupt, Result};
use crate::lora::{AdapterSet, LoraAdapter};
use crate::model::{LayerKind, LayerWeight, ModelLayer, ToyModel};
use crate::nfquant::{packed_len, QuantisedMatrix};
use crate::tensor::binio::*;
use crate::tensor::Matrix;

pub const MODEL_MAGIC: &[u8; 4] = b"PQM1";
pub const ADAPTER_MAGIC: &[u8; 4] = b"PQMA";

const MAX_DIM: u32 = 1 << 24;

pub fn encode_model(model: &ToyModel) -> Vec<u8> {
    let mut out = Vec::new();
    write_model(&mut out, model).expect("writing to a Vec cannot fail");
    out
}

fn write_model(w: &mut Vec<u8>, model: &ToyModel) -> Result<()> {
    w.extend_from_slice(MODEL_MAGIC);
    write_u32(w, model.vocab() as u32)?;
    write_u32(w, model.classes() as u32)?;
    write_u32(w, model.d_model() as u32)?;
    write_u32(w, model.layers().len() as u32)?;
    for layer in model.layers() {
        let (rows, cols) = layer.weight.shape();
        write_u8(w, layer.kind.tag())?;
        write_u32(w, rows as u32)?;
        write_u32(w, cols as u32)?;
        write_u8(w, u8::from(layer.weight.is_quantised()))?;
        write_u32(w, layer.bias.len() as u32)?;
    }
    for layer in model.layers() {
        match &layer.weight {
            LayerWeight::Dense(m) => write_f32_slice(w, m.data())?,
            LayerWeight::Quantised { q, .. } => write_quantised(w, q)?,
        }
        write_f32_slice(w, &layer.bias)?;
    }
    Ok(())
}

/// The packed tensor section: header, scales, codes.
pub fn write_quantised(w: &mut Vec<u8>, q: &QuantisedMatrix) -> Result<()> {
    write_u32(w, q.rows() as u32)?;
    write_u32(w, q.cols() as u32)?;
    write_u8(w, q.bits())?;
    write_u32(w, q.block_size() as u32)?;
    write_f32_slice(w, q.scales())?;
    w.extend_from_slice(q.packed());
    Ok(())
}

pub fn read_quantised(r: &mut impl Read) -> Result<QuantisedMatrix> {
    let rows = read_dim(r)?;
    let cols = read_dim(r)?;
    let bits = read_u8(r)?;
    let block_size = read_dim(r)?;
    if block_size == 0 || !(2..=8).contains(&bits) {
        return Err(corrupt!("bad quantised header: k={bits}, block={block_size}"));
    }
    let count = rows * cols;
    let scales = read_f32_vec(r, count.div_ceil(block_size))?;
    let packed = read_bytes(r, packed_len(count, bits))?;
    QuantisedMatrix::from_parts(rows, cols, bits, block_size, scales, packed)
}

fn read_dim(r: &mut impl Read) -> Result<usize> {
    let v = read_u32(r)?;
    if v == 0 || v > MAX_DIM {
        return Err(corrupt!("implausible dimension {v}"));
    }
    Ok(v as usize)
}

fn check_magic(r: &mut impl Read, magic: &[u8; 4], what: &str) -> Result<()> {
    let got = read_bytes(r, 4).map_err(|_| corrupt!("file too short for a {what}"))?;
    if got != magic {
        return Err(corrupt!("bad {what} magic {:?}", String::from_utf8_lossy(&got)));
    }
    Ok(())
}

pub fn decode_model(bytes: &[u8]) -> Result<ToyModel> {
    let mut r = bytes;
    check_magic(&mut r, MODEL_MAGIC, "checkpoint")?;
    let vocab = read_dim(&mut r)?;
    let classes = read_dim(&mut r)?;
    let d_model = read_dim(&mut r)?;
    let n_layers = read_u32(&mut r)? as usize;
    if n_layers > 64 {
        return Err(corrupt!("implausible layer count {n_layers}"));
    }
    let mut manifest = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let tag = read_u8(&mut r)?;
        let kind = LayerKind::from_tag(tag).ok_or_else(|| corrupt!("unknown layer kind {tag}"))?;
        let rows = read_dim(&mut r)?;
        let cols = read_dim(&mut r)?;
        let quantised = match read_u8(&mut r)? {
            0 => false,
            1 => true,
            v => return Err(corrupt!("bad quantised flag {v}")),
        };
        let bias_len = read_u32(&mut r)? as usize;
        if bias_len > MAX_DIM as usize {
            return Err(corrupt!("implausible bias length {bias_len}"));
        }
        manifest.push((kind, rows, cols, quantised, bias_len));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for (kind, rows, cols, quantised, bias_len) in manifest {
        let weight = if quantised {
            let q = read_quantised(&mut r)?;
            if q.shape() != (rows, cols) {
                return Err(corrupt!(
                    "section is {:?} but the manifest says {rows}x{cols}",
                    q.shape()
                ));
            }
            LayerWeight::quantised(q)?
        } else {
            let data = read_f32_vec(&mut r, rows * cols)?;
            LayerWeight::Dense(Matrix::new(rows, cols, data).map_err(|e| corrupt!("{e}"))?)
        };
        let bias = read_f32_vec(&mut r, bias_len)?;
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(corrupt!("non-finite bias"));
        }
        layers.push(ModelLayer { kind, weight, bias });
    }
    if !r.is_empty() {
        return Err(corrupt!("{} trailing bytes after the last section", r.len()));
    }
    ToyModel::from_layers(vocab, classes, d_model, layers).map_err(|e| corrupt!("{e}"))
}

pub fn save_model(path: &Path, model: &ToyModel) -> Result<()> {
    fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ToyModel> {
    decode_model(&fs::read(path)?)
}

/// SHA-256 of the serialised model, hex encoded.
pub fn model_digest(model: &ToyModel) -> String {
    hex_digest(&encode_model(model))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn encode_adapters(set: &AdapterSet) -> Vec<u8> {
    let mut w = Vec::new();
    w.extend_from_slice(ADAPTER_MAGIC);
    let io = |w: &mut Vec<u8>| -> Result<()> {
        write_str(w, &set.speaker)?;
        write_u32(w, set.adapters.len() as u32)?;
        for (id, ad) in &set.adapters {
            write_str(w, id)?;
            write_u32(w, ad.out_dim() as u32)?;
            write_u32(w, ad.in_dim() as u32)?;
            write_u32(w, ad.rank() as u32)?;
            write_f32(w, ad.alpha())?;
            write_f32_slice(w, ad.a().data())?;
            write_f32_slice(w, ad.b().data())?;
        }
        Ok(())
    };
    io(&mut w).expect("writing to a Vec cannot fail");
    w
}

pub fn decode_adapters(bytes: &[u8]) -> Result<AdapterSet> {
    let mut r = bytes;
    check_magic(&mut r, ADAPTER_MAGIC, "adapter file")?;
    let mut set = AdapterSet::new(read_str(&mut r)?);
    let n = read_u32(&mut r)?;
    for _ in 0..n {
        let id = read_str(&mut r)?;
        let d = read_dim(&mut r)?;
        let k = read_dim(&mut r)?;
        let rank = read_dim(&mut r)?;
        let alpha = read_f32(&mut r)?;
        let a = Matrix::new(rank, k, read_f32_vec(&mut r, rank * k)?).map_err(|e| corrupt!("{e}"))?;
        let b = Matrix::new(d, rank, read_f32_vec(&mut r, d * rank)?).map_err(|e| corrupt!("{e}"))?;
        let ad = LoraAdapter::from_parts(a, b, alpha).map_err(|e| corrupt!("adapter '{id}': {e}"))?;
        if set.adapters.insert(id.clone(), ad).is_some() {
            return Err(corrupt!("duplicate adapter for '{id}'"));
        }
    }
    if !r.is_empty() {
        return Err(corrupt!("{} trailing bytes in adapter file", r.len()));
    }
    Ok(set)
}

pub fn save_adapters(path: &Path, set: &AdapterSet) -> Result<()> {
    fs::write(path, encode_adapters(set))?;
    Ok(())
}

pub fn load_adapters(path: &Path) -> Result<AdapterSet> {
    decode_adapters(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, LayerSelection};
    use crate::nfquant::NormalFloatCodebook;
    use crate::tensor::Rng;

    #[test]
    fn fp32_and_quantised_round_trip() {
        let m = build_model(16, 3).unwrap();
        assert_eq!(decode_model(&encode_model(&m)).unwrap(), m);
        let q = m.quantise(LayerSelection::ALL, 64, &NormalFloatCodebook::nf4()).unwrap();
        assert_eq!(decode_model(&encode_model(&q)).unwrap(), q);
    }

    #[test]
    fn fp32_size_is_header_plus_floats() {
        let m = build_model(16, 0).unwrap();
        let header = 4 + 16 + 5 * 14;
        assert_eq!(encode_model(&m).len(), header + 4 * m.num_params());
    }

    #[test]
    fn bad_magic_and_truncation_rejected() {
        let m = build_model(8, 0).unwrap();
        let mut bytes = encode_model(&m);
        assert!(decode_model(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(matches!(decode_model(&bytes), Err(crate::PqmError::Corrupt(_))));
        assert!(decode_model(b"PQ").is_err());
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode_model(&build_model(8, 0).unwrap());
        bytes.push(0);
        assert!(decode_model(&bytes).is_err());
    }

    #[test]
    fn adapter_round_trip() {
        let m = build_model(16, 0).unwrap();
        let set = m
            .init_adapters("spk007", &["block0".into(), "head".into()], 2, 4.0, &mut Rng::new(3))
            .unwrap();
        let bytes = encode_adapters(&set);
        assert_eq!(&bytes[..4], ADAPTER_MAGIC);
        assert_eq!(decode_adapters(&bytes).unwrap(), set);
        assert!(decode_adapters(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = build_model(8, 0).unwrap();
        let b = build_model(8, 1).unwrap();
        assert_eq!(model_digest(&a), model_digest(&a.clone()));
        assert_ne!(model_digest(&a), model_digest(&b));
        assert_eq!(model_digest(&a).len(), 64);
    }
}
