//! The learned codec: analysis, hyperprior, text-conditioned synthesis.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tsic_grad::{ParamStore, Real, Tape, Tensor, Var};

use crate::data::{HyperLatent, ImageTensor, LatentCode, TextEmbedding, LATENT_STRIDE, TEXT_DIM};
use crate::entropy::HyperpriorParams;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Mode};
use crate::ssa::SsaStack;
use crate::transforms::{quantize_var, EncoderParams, GeneratorParams, QuantizeMode};

/// Probabilities below this are clamped when counting bits.
pub const PROB_FLOOR: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Latent channels `C`.
    pub latent_channels: usize,
    /// Hyper-latent channels.
    pub hyper_channels: usize,
    /// Head width followed by the widths of the four stride-2 stages.
    pub encoder_widths: [usize; 4],
    /// Width of the generator's residual section.
    pub generator_width: usize,
    pub res_blocks: usize,
    /// Widths of the four upsampling stages.
    pub up_widths: [usize; 4],
    /// Hidden width of the text-to-affine MLPs.
    pub mlp_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_channels: 64,
            hyper_channels: 32,
            encoder_widths: [16, 32, 32, 32],
            generator_width: 32,
            res_blocks: 9,
            up_widths: [32, 32, 16, 16],
            mlp_hidden: 256,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Codec<F: Real> {
    pub config: ModelConfig,
    pub store: ParamStore<F>,
    pub encoder: EncoderParams,
    pub hyper: HyperpriorParams,
    pub generator: GeneratorParams,
    pub ssa: SsaStack<F>,
}

/// How latents are relaxed for the rate term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RateMode {
    Noise,
    Round,
}

/// Everything one differentiable pass produces.
pub struct Forward<'t, F> {
    pub y: Var<'t, F>,
    pub y_hat: Var<'t, F>,
    pub z_hat: Var<'t, F>,
    /// Per-element information content of the latent, `[N, C, h, w]`.
    pub bits_y: Var<'t, F>,
    pub bits_z: Var<'t, F>,
    pub x_hat: Var<'t, F>,
    pub masks: Vec<Var<'t, F>>,
}

impl<F: Real> Codec<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::new(&mut store, &mut rng, &config);
        let hyper = HyperpriorParams::new(&mut store, &mut rng, &config);
        let generator = GeneratorParams::new(&mut store, &mut rng, &config);
        let ssa = SsaStack::new(
            &mut store,
            &mut rng,
            &GeneratorParams::stage_channels(&config),
            config.mlp_hidden,
        );
        Self {
            config,
            store,
            encoder,
            hyper,
            generator,
            ssa,
        }
    }

    /// Full pass from `[N, 3, H, W]` pixels and `[N, 512]` text. The decoder
    /// always sees rounded latents (straight-through); the rate term sees
    /// `rate_mode`.
    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t, F>,
        x: Var<'t, F>,
        text: Var<'t, F>,
        rate_mode: RateMode,
        rng: &mut ChaCha8Rng,
    ) -> Forward<'t, F> {
        let store = &self.store;
        let y = self.encoder.forward(ctx, store, x);
        let z = self.hyper.encode(ctx, store, y);
        let relax = |v: Var<'t, F>, rng: &mut ChaCha8Rng| match rate_mode {
            RateMode::Noise => quantize_var(v, QuantizeMode::TrainNoise, rng),
            RateMode::Round => quantize_var(v, QuantizeMode::TrainSte, rng),
        };
        let z_rel = relax(z, rng);
        let z_hat = quantize_var(z, QuantizeMode::TrainSte, rng);
        let zs = z.shape();
        let (z_loc, z_scale) = self.hyper.z_density(ctx, store, zs[0], zs[2], zs[3]);
        let bits_z = z_rel.gaussian_bits(z_loc, z_scale, F::of(PROB_FLOOR));
        let ys = y.shape();
        let (loc, scale) = self.hyper.decode(ctx, store, z_hat, ys[2], ys[3]);
        let y_rel = relax(y, rng);
        let y_hat = quantize_var(y, QuantizeMode::TrainSte, rng);
        let bits_y = y_rel.gaussian_bits(loc, scale, F::of(PROB_FLOOR));
        let g = self.generator.forward(ctx, store, &self.ssa, y_hat, text);
        Forward {
            y,
            y_hat,
            z_hat,
            bits_y,
            bits_z,
            x_hat: g.image,
            masks: g.masks,
        }
    }
}

fn check_padded(img: &ImageTensor) -> Result<()> {
    if img.height() % LATENT_STRIDE != 0 || img.width() % LATENT_STRIDE != 0 {
        return Err(Error::Unpadded {
            height: img.height(),
            width: img.width(),
            multiple: LATENT_STRIDE,
        });
    }
    Ok(())
}

fn owned<F: Real>(v: Var<'_, F>) -> Tensor<F> {
    (*v.value()).clone()
}

impl Codec<f32> {
    /// 16-bit fingerprint of the codec weights, stored in every bitstream.
    pub fn model_id(&self) -> u16 {
        let mut h = crc32fast::Hasher::new();
        for (name, t) in self.store.iter() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(&v.to_le_bytes());
            }
        }
        let c = h.finalize();
        ((c >> 16) ^ (c & 0xffff)) as u16
    }

    /// Analysis transform of one padded image, unquantized.
    pub fn encode(&self, img: &ImageTensor) -> Result<LatentCode> {
        check_padded(img)?;
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape);
        let y = self.encoder.forward(&ctx, &self.store, tape.constant(img.to_batch()));
        let values = owned(y);
        if values.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent"));
        }
        Ok(LatentCode {
            values: strip_batch(values),
            quantized: false,
        })
    }

    /// Hyper-analysis of an unquantized latent.
    pub fn hyper_encode(&self, y: &LatentCode) -> Result<HyperLatent> {
        self.check_latent(y)?;
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape);
        let z = self.hyper.encode(&ctx, &self.store, tape.constant(add_batch(&y.values)));
        Ok(HyperLatent {
            values: strip_batch(owned(z)),
            quantized: false,
        })
    }

    /// Location and scale of every latent element given a quantized
    /// hyper-latent, each `[C, h, w]`.
    pub fn latent_density(&self, z_hat: &HyperLatent, h: usize, w: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
        if !z_hat.quantized {
            return Err(Error::NotQuantized("hyper-latent"));
        }
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape);
        let (loc, scale) = self
            .hyper
            .decode(&ctx, &self.store, tape.constant(add_batch(&z_hat.values)), h, w);
        Ok((strip_batch(owned(loc)), strip_batch(owned(scale))))
    }

    /// Location and scale of the hyper-latent density, each `[C_z, h, w]`.
    pub fn hyper_density(&self, h: usize, w: usize) -> (Tensor<f32>, Tensor<f32>) {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape);
        let (loc, scale) = self.hyper.z_density(&ctx, &self.store, 1, h, w);
        (strip_batch(owned(loc)), strip_batch(owned(scale)))
    }

    /// Synthesis from a quantized latent under one text condition.
    pub fn generate(&self, y_hat: &LatentCode, text: &TextEmbedding) -> Result<ImageTensor> {
        let (img, _) = self.generate_with_masks(y_hat, text)?;
        Ok(img)
    }

    /// Synthesis plus the `[h_i, w_i]` mask of every SSA stage.
    pub fn generate_with_masks(&self, y_hat: &LatentCode, text: &TextEmbedding) -> Result<(ImageTensor, Vec<Tensor<f32>>)> {
        if !y_hat.quantized {
            return Err(Error::NotQuantized("latent"));
        }
        self.check_latent(y_hat)?;
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape);
        let t = tape.constant(TextEmbedding::stack(&[text]));
        let g = self
            .generator
            .forward(&ctx, &self.store, &self.ssa, tape.constant(add_batch(&y_hat.values)), t);
        let img = ImageTensor::from_batch(&g.image.value(), 0)?;
        let masks = g
            .masks
            .iter()
            .map(|m| {
                let v = owned(*m);
                let (_, _, h, w) = v.dims4();
                v.reshape([h, w])
            })
            .collect();
        Ok((img, masks))
    }

    fn check_latent(&self, y: &LatentCode) -> Result<()> {
        let s = y.values.shape();
        if s.len() != 3 || s[0] != self.config.latent_channels {
            return Err(Error::Shape(format!(
                "latent must be [{}, h, w], got {s:?}",
                self.config.latent_channels
            )));
        }
        Ok(())
    }

    /// Batched evaluation pass (no gradients, running statistics).
    pub fn eval_forward_batch(&self, x: &Tensor<f32>, text: &Tensor<f32>) -> Result<EvalBatch> {
        let (_, _, h, w) = x.dims4();
        if h % LATENT_STRIDE != 0 || w % LATENT_STRIDE != 0 {
            return Err(Error::Unpadded {
                height: h,
                width: w,
                multiple: LATENT_STRIDE,
            });
        }
        if text.shape().get(1) != Some(&TEXT_DIM) {
            return Err(Error::Shape(format!("text batch must be [N, {TEXT_DIM}]")));
        }
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, Mode::Eval, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = self.forward(&ctx, tape.constant(x.clone()), tape.constant(text.clone()), RateMode::Round, &mut rng);
        Ok(EvalBatch {
            x_hat: owned(f.x_hat),
            bits_y: owned(f.bits_y),
            bits_z: owned(f.bits_z),
        })
    }
}

/// Values of an evaluation pass.
pub struct EvalBatch {
    pub x_hat: Tensor<f32>,
    pub bits_y: Tensor<f32>,
    pub bits_z: Tensor<f32>,
}

fn strip_batch(t: Tensor<f32>) -> Tensor<f32> {
    let s = t.shape()[1..].to_vec();
    t.reshape(s)
}

fn add_batch(t: &Tensor<f32>) -> Tensor<f32> {
    let mut s = vec![1];
    s.extend_from_slice(t.shape());
    t.clone().reshape(s)
}
