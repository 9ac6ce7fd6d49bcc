use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsic_grad::{Tape, Tensor};

use tsic_core::data::{crop_to, pad_to_multiple, ImageTensor, OriginalDims, TextEmbedding, LATENT_STRIDE};
use tsic_core::entropy::{analyze, compress, decompress, Bitstream, Pmf, RangeDecoder, RangeEncoder};
use tsic_core::model::{Codec, ModelConfig};
use tsic_core::nn::Ctx;
use tsic_core::text::{StubTextEncoder, TextEncoder};
use tsic_core::transforms::{quantize_var, QuantizeMode};
use tsic_core::Error;

fn tiny() -> ModelConfig {
    ModelConfig {
        latent_channels: 8,
        hyper_channels: 4,
        encoder_widths: [4, 6, 6, 8],
        generator_width: 6,
        res_blocks: 2,
        up_widths: [6, 6, 4, 4],
        mlp_hidden: 8,
    }
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageTensor {
    ImageTensor::new(Tensor::from_fn([3, h, w], |_| rng.gen_range(-1.0f32..=1.0))).unwrap()
}

#[test]
fn empty_stream_is_a_fixed_terminator() {
    let a = RangeEncoder::new().finish();
    let b = RangeEncoder::new().finish();
    assert_eq!(a, b);
    assert!(!a.is_empty() && a.len() <= 8, "{}", a.len());
    RangeDecoder::new(&a).unwrap();
}

#[test]
fn uniform_bytes_cost_one_byte_each() {
    let pmf = Pmf::from_probs(&[1.0; 256]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let symbols: Vec<usize> = (0..1000).map(|_| rng.gen_range(0..256)).collect();
    let mut enc = RangeEncoder::new();
    for &s in &symbols {
        enc.encode(&pmf, s).unwrap();
    }
    let bytes = enc.finish();
    assert!((1000..=1032).contains(&bytes.len()), "{}", bytes.len());
    let mut dec = RangeDecoder::new(&bytes).unwrap();
    for &s in &symbols {
        assert_eq!(dec.decode(&pmf).unwrap(), s);
    }
}

#[test]
fn known_five_symbol_stream() {
    let pmf = Pmf::from_probs(&[0.5, 0.25, 0.125, 0.0625, 0.0625]).unwrap();
    let symbols = [0, 4, 2, 1, 3];
    let mut enc = RangeEncoder::new();
    for s in symbols {
        enc.encode(&pmf, s).unwrap();
    }
    let bytes = enc.finish();
    let mut dec = RangeDecoder::new(&bytes).unwrap();
    let back: Vec<usize> = symbols.iter().map(|_| dec.decode(&pmf).unwrap()).collect();
    assert_eq!(back, symbols);
}

#[test]
fn corrupted_final_byte_is_flagged() {
    let codec = Codec::<f32>::new(tiny(), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (stream, _) = compress(&codec, &random_image(&mut rng, 32, 32)).unwrap();
    let mut bytes = stream.to_bytes();
    *bytes.last_mut().unwrap() ^= 0x5A;
    let r = Bitstream::from_bytes(&bytes).and_then(|s| decompress(&codec, &s));
    assert!(matches!(r, Err(Error::Checksum { .. })), "{r:?}");

    // The last payload byte rather than the checksum.
    let mut s = stream.clone();
    if let Some(b) = s.payload_y.last_mut() {
        *b ^= 0xFF;
    }
    let d = decompress(&codec, &s);
    assert!(d.is_err() || d.unwrap() != decompress(&codec, &stream).unwrap());
}

#[test]
fn density_mismatch_is_caught_by_the_checksum() {
    let a = Codec::<f32>::new(tiny(), 4);
    let b = Codec::<f32>::new(tiny(), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut stream, _) = compress(&a, &random_image(&mut rng, 48, 32)).unwrap();
    assert!(matches!(decompress(&b, &stream), Err(Error::ModelMismatch { .. })));
    // Pretend the stream came from `b`: symbols now decode under the wrong
    // densities.
    stream.model_id = b.model_id();
    assert!(decompress(&b, &stream).is_err());
}

/// Two-sided Kolmogorov–Smirnov p-value (asymptotic with the Stephens
/// small-sample correction).
fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut p = 0.0;
    for k in 1..200 {
        let k = k as f64;
        p += 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
    }
    p.clamp(0.0, 1.0)
}

#[test]
fn ks_oracle_sanity() {
    assert!((ks_p_value(0.0, 100) - 1.0).abs() < 1e-12);
    // Critical value at 5% for large n is 1.358/sqrt(n).
    let n = 10_000;
    let d = 1.358 / (n as f64).sqrt();
    let p = ks_p_value(d / (1.0 + 0.12 / 100.0 + 0.11 / 10_000.0), n);
    assert!((p - 0.05).abs() < 2e-3, "{p}");
}

#[test]
fn training_noise_is_uniform() {
    let n = 100_000;
    let base = Tensor::<f64>::from_fn([n], |i| (i % 7) as f64 - 3.0);
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let out = quantize_var(tape.constant(base.clone()), QuantizeMode::TrainNoise, &mut rng);
    let mut u: Vec<f64> = out.value().data().iter().zip(base.data()).map(|(o, b)| o - b).collect();
    assert!(u.iter().all(|v| (-0.5..0.5).contains(v)));
    u.sort_by(f64::total_cmp);
    let d = u
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let cdf = v + 0.5;
            (cdf - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - cdf).abs())
        })
        .fold(0.0, f64::max);
    let p = ks_p_value(d, n);
    assert!(p > 0.01, "D = {d}, p = {p}");
}

#[test]
fn generate_sensitivity_matches_finite_differences() {
    let codec = Codec::<f64>::new(tiny(), 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let latent = Tensor::<f64>::from_fn([1, 8, 4, 4], |_| rng.gen_range(-3i32..=3) as f64);
    let text = Tensor::<f64>::from_fn([1, 512], |_| rng.gen_range(-1.0..1.0));
    let weights = Tensor::<f64>::from_fn([1, 3, 64, 64], |_| rng.gen_range(-1.0..1.0));
    let eval = |l: &Tensor<f64>| {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape);
        let g = codec
            .generator
            .forward(&ctx, &codec.store, &codec.ssa, tape.constant(l.clone()), tape.constant(text.clone()));
        g.image.mul(tape.constant(weights.clone())).sum().item()
    };
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape);
    let lv = tape.leaf(latent.clone());
    let g = codec.generator.forward(&ctx, &codec.store, &codec.ssa, lv, tape.constant(text.clone()));
    let grads = tape.backward(g.image.mul(tape.constant(weights.clone())).sum());
    let analytic = grads.wrt(lv).unwrap();
    let h = 1e-6;
    for idx in [0, 17, 45, 90, 127] {
        let (mut p, mut m) = (latent.clone(), latent.clone());
        p.data_mut()[idx] += h;
        m.data_mut()[idx] -= h;
        let numeric = (eval(&p) - eval(&m)) / (2.0 * h);
        let a = analytic.data()[idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-9);
        assert!(rel < 1e-3, "element {idx}: {a} vs {numeric}");
    }
}

#[test]
fn generation_is_deterministic_and_accepts_zero_text() {
    let codec = Codec::<f32>::new(tiny(), 7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let d = analyze(&codec, &random_image(&mut rng, 32, 48)).unwrap();
    let text = StubTextEncoder::new(0).embed("a red circle").unwrap();
    let a = codec.generate(&d.y_hat, &text).unwrap();
    let b = codec.generate(&d.y_hat, &text).unwrap();
    assert_eq!(a, b);
    let z = codec.generate(&d.y_hat, &TextEmbedding::zero()).unwrap();
    assert_eq!((z.height(), z.width()), (32, 48));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn images_roundtrip_bit_exactly(h in 16usize..70, w in 16usize..70, seed in 0u64..1000) {
        let codec = Codec::<f32>::new(tiny(), 9);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(&mut rng, h, w);
        let (stream, coded) = compress(&codec, &img).unwrap();
        let back = decompress(&codec, &Bitstream::from_bytes(&stream.to_bytes()).unwrap()).unwrap();
        prop_assert_eq!(&back, &coded);
        let recon = back.reconstruct(&codec, &TextEmbedding::zero()).unwrap();
        prop_assert_eq!((recon.height(), recon.width()), (h, w));
    }

    #[test]
    fn generate_restores_padded_dims(hm in 1usize..5, wm in 1usize..5) {
        let codec = Codec::<f32>::new(tiny(), 10);
        let mut rng = ChaCha8Rng::seed_from_u64((hm * 10 + wm) as u64);
        let (h, w) = (hm * LATENT_STRIDE, wm * LATENT_STRIDE);
        let img = random_image(&mut rng, h, w);
        let d = analyze(&codec, &img).unwrap();
        let out = codec.generate(&d.y_hat, &TextEmbedding::zero()).unwrap();
        prop_assert_eq!((out.height(), out.width()), (h, w));
        let (padded, dims) = pad_to_multiple(&img, LATENT_STRIDE);
        prop_assert_eq!(&padded, &img);
        prop_assert_eq!(crop_to(&padded, dims).unwrap(), img);
        prop_assert_eq!(dims, OriginalDims { height: h, width: w });
    }
}
