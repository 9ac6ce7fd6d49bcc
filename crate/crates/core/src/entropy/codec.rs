//! Image ↔ bitstream. Compression never sees text.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsic_grad::Tensor;

use super::bitstream::Bitstream;
use super::pmf::{ElementPmf, Pmf};
use super::range_coder::{RangeDecoder, RangeEncoder};
use crate::data::{crop_to, hyper_side, latent_side, pad_to_multiple, HyperLatent, ImageTensor, LatentCode, OriginalDims, TextEmbedding, LATENT_STRIDE};
use crate::error::{Error, Result};
use crate::model::Codec;
use crate::transforms::{quantize, QuantizeMode};

/// Offsets outside the symbol window are sent as two raw 16-bit halves.
const ESCAPE_LIMIT: u64 = 1 << 32;

fn zigzag(d: i64) -> u64 {
    ((d << 1) ^ (d >> 63)) as u64
}

fn unzigzag(u: u64) -> i64 {
    ((u >> 1) as i64) ^ -((u & 1) as i64)
}

fn encode_values(values: &[f32], loc: &[f32], scale: &[f32]) -> Result<(Vec<u8>, u32)> {
    let mut enc = RangeEncoder::new();
    let mut crc = crc32fast::Hasher::new();
    for (i, ((&v, &m), &s)) in values.iter().zip(loc).zip(scale).enumerate() {
        if !v.is_finite() || v.fract() != 0.0 {
            return Err(Error::Bitstream(format!("element {i} = {v} is not an integer")));
        }
        let v = v as i64;
        let e = ElementPmf::gaussian(m, s)?;
        match e.symbol(v) {
            Some(sym) => enc.encode(&e.pmf, sym)?,
            None => {
                let u = zigzag(v - e.center);
                if u >= ESCAPE_LIMIT {
                    return Err(Error::SymbolOutOfRange {
                        index: i,
                        symbol: u as usize,
                        support: ESCAPE_LIMIT as usize,
                    });
                }
                enc.encode(&e.pmf, e.escape())?;
                enc.encode(&Pmf::Uniform16, (u >> 16) as usize)?;
                enc.encode(&Pmf::Uniform16, (u & 0xFFFF) as usize)?;
            }
        }
        crc.update(&(v as i32).to_le_bytes());
    }
    Ok((enc.finish(), crc.finalize()))
}

fn decode_values(payload: &[u8], checksum: u32, loc: &[f32], scale: &[f32]) -> Result<Vec<f32>> {
    let mut dec = RangeDecoder::new(payload)?;
    let mut crc = crc32fast::Hasher::new();
    let mut out = Vec::with_capacity(loc.len());
    for (&m, &s) in loc.iter().zip(scale) {
        let e = ElementPmf::gaussian(m, s)?;
        let sym = dec.decode(&e.pmf)?;
        let v = if sym == e.escape() {
            let hi = dec.decode(&Pmf::Uniform16)? as u64;
            let lo = dec.decode(&Pmf::Uniform16)? as u64;
            e.center + unzigzag((hi << 16) | lo)
        } else {
            e.value(sym)
        };
        crc.update(&(v as i32).to_le_bytes());
        out.push(v as f32);
    }
    let decoded = crc.finalize();
    if decoded != checksum {
        return Err(Error::Checksum {
            stored: checksum,
            decoded,
        });
    }
    Ok(out)
}

/// Quantized latents of one image, as coded.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub y_hat: LatentCode,
    pub z_hat: HyperLatent,
    pub dims: OriginalDims,
}

impl Decoded {
    /// Synthesis under `text`, cropped back to the original size.
    pub fn reconstruct(&self, codec: &Codec<f32>, text: &TextEmbedding) -> Result<ImageTensor> {
        crop_to(&codec.generate(&self.y_hat, text)?, self.dims)
    }
}

/// Quantized latents of an image without entropy coding.
pub fn analyze(codec: &Codec<f32>, img: &ImageTensor) -> Result<Decoded> {
    let (padded, dims) = pad_to_multiple(img, LATENT_STRIDE);
    let y = codec.encode(&padded)?;
    let z = codec.hyper_encode(&y)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Ok(Decoded {
        y_hat: quantize(&y, QuantizeMode::EvalRound, &mut rng)?,
        z_hat: quantize(&z, QuantizeMode::EvalRound, &mut rng)?,
        dims,
    })
}

/// Entropy-codes the quantized latents; the hyper-latent goes first.
pub fn compress(codec: &Codec<f32>, img: &ImageTensor) -> Result<(Bitstream, Decoded)> {
    let d = analyze(codec, img)?;
    let (zl, zs) = codec.hyper_density(d.z_hat.height(), d.z_hat.width());
    let (payload_z, checksum_z) = encode_values(d.z_hat.values.data(), zl.data(), zs.data())?;
    let (loc, scale) = codec.latent_density(&d.z_hat, d.y_hat.height(), d.y_hat.width())?;
    let (payload_y, checksum_y) = encode_values(d.y_hat.values.data(), loc.data(), scale.data())?;
    let stream = Bitstream {
        height: d.dims.height as u32,
        width: d.dims.width as u32,
        model_id: codec.model_id(),
        payload_z,
        checksum_z,
        payload_y,
        checksum_y,
    };
    Ok((stream, d))
}

pub fn decompress(codec: &Codec<f32>, stream: &Bitstream) -> Result<Decoded> {
    let id = codec.model_id();
    if stream.model_id != id {
        return Err(Error::ModelMismatch {
            stream: stream.model_id,
            checkpoint: id,
        });
    }
    let dims = OriginalDims {
        height: stream.height as usize,
        width: stream.width as usize,
    };
    let (h, w) = (latent_side(dims.height), latent_side(dims.width));
    let (hz, wz) = (hyper_side(h), hyper_side(w));
    let (zl, zs) = codec.hyper_density(hz, wz);
    let z = decode_values(&stream.payload_z, stream.checksum_z, zl.data(), zs.data())?;
    let z_hat = HyperLatent {
        values: Tensor::new([codec.config.hyper_channels, hz, wz], z),
        quantized: true,
    };
    let (loc, scale) = codec.latent_density(&z_hat, h, w)?;
    let y = decode_values(&stream.payload_y, stream.checksum_y, loc.data(), scale.data())?;
    let y_hat = LatentCode {
        values: Tensor::new([codec.config.latent_channels, h, w], y),
        quantized: true,
    };
    Ok(Decoded { y_hat, z_hat, dims })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zigzag_roundtrip() {
        for d in [-5i64, -1, 0, 1, 7, 1 << 30, -(1 << 30)] {
            assert_eq!(unzigzag(zigzag(d)), d);
        }
    }

    #[test]
    fn checksum_mismatch_is_detected() {
        let vals = [1.0, -2.0, 0.0, 40.0];
        let loc = [0.5, -1.0, 0.0, 0.0];
        let scale = [1.0, 2.0, 0.3, 1.0];
        let (p, c) = encode_values(&vals, &loc, &scale).unwrap();
        assert_eq!(decode_values(&p, c, &loc, &scale).unwrap(), vals);
        assert!(matches!(
            decode_values(&p, c ^ 1, &loc, &scale),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn non_integer_values_are_rejected() {
        assert!(encode_values(&[0.5], &[0.0], &[1.0]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]
        #[test]
        fn latent_streams_roundtrip(
            elems in proptest::collection::vec((-3000i32..3000, -20.0f32..20.0, 0.01f32..60.0), 1..48)
        ) {
            let vals: Vec<f32> = elems.iter().map(|e| e.0 as f32).collect();
            let loc: Vec<f32> = elems.iter().map(|e| e.1).collect();
            let scale: Vec<f32> = elems.iter().map(|e| e.2).collect();
            let (p, c) = encode_values(&vals, &loc, &scale).unwrap();
            prop_assert_eq!(decode_values(&p, c, &loc, &scale).unwrap(), vals);
        }
    }
}
