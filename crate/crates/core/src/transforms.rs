//! Analysis transform, quantizer and the staged synthesis transform.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tsic_grad::{ParamStore, Real, Tensor, Var};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::{act, Conv, Ctx};
use crate::ssa::SsaStack;

/// Number of stride-2 stages; fixes the 16× spatial reduction.
pub const DOWN_STAGES: usize = 4;

/// Encoder: head conv, four stride-2 stages, tail conv to `C` channels.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    head: Conv,
    stages: [Conv; DOWN_STAGES],
    tail: Conv,
}

impl EncoderParams {
    pub fn new<F: Real>(store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let w = cfg.encoder_widths;
        let head = Conv::new(store, rng, "enc.head", 3, w[0], 3, 1);
        let mut cin = w[0];
        let stages = std::array::from_fn(|i| {
            let c = Conv::new(store, rng, &format!("enc.down{i}"), cin, w[i], 3, 2);
            cin = w[i];
            c
        });
        let tail = Conv::new(store, rng, "enc.tail", cin, cfg.latent_channels, 3, 1);
        Self { head, stages, tail }
    }

    /// `[N, 3, H, W] → [N, C, H/16, W/16]`.
    pub fn forward<'t, F: Real>(&self, ctx: &Ctx<'t, F>, store: &ParamStore<F>, x: Var<'t, F>) -> Var<'t, F> {
        let mut h = act(self.head.forward(ctx, store, x));
        for s in &self.stages {
            h = act(s.forward(ctx, store, h));
        }
        self.tail.forward(ctx, store, h)
    }
}

/// Generator skeleton: head conv, residual section, four ×2 upsampling
/// stages and a tanh-bounded tail. SSA blocks follow the residual section
/// and every upsampling stage.
#[derive(Clone, Debug)]
pub struct GeneratorParams {
    head: Conv,
    residual: Vec<(Conv, Conv)>,
    up: [Conv; DOWN_STAGES],
    tail: Conv,
}

const RES_BRANCH_GAIN: f64 = 0.1;
const TAIL_GAIN: f64 = 0.5;

/// Where the generator hands features to an SSA block.
pub const SSA_POINTS: usize = DOWN_STAGES + 1;

/// Output of a generator pass: the image and the mask of every SSA stage.
pub struct Generated<'t, F> {
    pub image: Var<'t, F>,
    pub masks: Vec<Var<'t, F>>,
}

impl GeneratorParams {
    pub fn new<F: Real>(store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        assert!(cfg.res_blocks >= 1, "generator needs at least one residual block");
        let w = cfg.generator_width;
        let head = Conv::new(store, rng, "gen.head", cfg.latent_channels, w, 3, 1);
        let residual = (0..cfg.res_blocks)
            .map(|i| {
                let a = Conv::new(store, rng, &format!("gen.res{i}.a"), w, w, 3, 1);
                // Small residual branches keep the stacked sum near unit scale.
                let b = Conv::new(store, rng, &format!("gen.res{i}.b"), w, w, 3, 1).scaled(store, RES_BRANCH_GAIN);
                (a, b)
            })
            .collect();
        let mut cin = w;
        let up = std::array::from_fn(|i| {
            let c = Conv::new(store, rng, &format!("gen.up{i}"), cin, cfg.up_widths[i], 3, 1);
            cin = cfg.up_widths[i];
            c
        });
        let tail = Conv::new(store, rng, "gen.tail", cin, 3, 3, 1).scaled(store, TAIL_GAIN);
        Self {
            head,
            residual,
            up,
            tail,
        }
    }

    /// Channel count at each SSA insertion point.
    pub fn stage_channels(cfg: &ModelConfig) -> [usize; SSA_POINTS] {
        let mut c = [cfg.generator_width; SSA_POINTS];
        c[1..].copy_from_slice(&cfg.up_widths);
        c
    }

    /// `[N, C, h, w]` latent plus `[N, 512]` text → `[N, 3, 16h, 16w]`.
    pub fn forward<'t, F: Real>(
        &self,
        ctx: &Ctx<'t, F>,
        store: &ParamStore<F>,
        ssa: &SsaStack<F>,
        latent: Var<'t, F>,
        text: Var<'t, F>,
    ) -> Generated<'t, F> {
        assert_eq!(ssa.len(), SSA_POINTS, "SSA stack size");
        let mut masks = Vec::with_capacity(SSA_POINTS);
        let mut h = act(self.head.forward(ctx, store, latent));
        for (a, b) in &self.residual {
            let r = b.forward(ctx, store, act(a.forward(ctx, store, h)));
            h = h.add(r);
        }
        let (o, m) = ssa.forward(0, ctx, store, h, text);
        h = o;
        masks.push(m);
        for (i, conv) in self.up.iter().enumerate() {
            h = act(conv.forward(ctx, store, h.upsample_nearest(2)));
            let (o, m) = ssa.forward(i + 1, ctx, store, h, text);
            h = o;
            masks.push(m);
        }
        let image = self.tail.forward(ctx, store, h).tanh();
        Generated { image, masks }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizeMode {
    /// Additive uniform noise on `[-0.5, 0.5)`.
    TrainNoise,
    /// Rounded forward, identity backward.
    TrainSte,
    /// Round half away from zero.
    EvalRound,
}

/// Tape-level quantizer.
pub fn quantize_var<'t, F: Real>(x: Var<'t, F>, mode: QuantizeMode, rng: &mut ChaCha8Rng) -> Var<'t, F> {
    match mode {
        QuantizeMode::TrainNoise => {
            let shape = x.shape();
            let noise = Tensor::from_fn(shape, |_| F::of(rng.gen_range(-0.5..0.5)));
            x.add(x.tape().constant(noise))
        }
        QuantizeMode::TrainSte | QuantizeMode::EvalRound => x.round_ste(),
    }
}

/// Latent grids that carry a quantization flag.
pub trait Quantizable: Sized {
    const NAME: &'static str;
    fn parts(&self) -> (&Tensor<f32>, bool);
    fn from_parts(values: Tensor<f32>, quantized: bool) -> Self;
}

impl Quantizable for crate::data::LatentCode {
    const NAME: &'static str = "latent";
    fn parts(&self) -> (&Tensor<f32>, bool) {
        (&self.values, self.quantized)
    }
    fn from_parts(values: Tensor<f32>, quantized: bool) -> Self {
        Self { values, quantized }
    }
}

impl Quantizable for crate::data::HyperLatent {
    const NAME: &'static str = "hyper-latent";
    fn parts(&self) -> (&Tensor<f32>, bool) {
        (&self.values, self.quantized)
    }
    fn from_parts(values: Tensor<f32>, quantized: bool) -> Self {
        Self { values, quantized }
    }
}

/// Value-level quantizer. Rounded outputs are flagged quantized; the noise
/// relaxation is not integer-valued and keeps the flag clear.
pub fn quantize<T: Quantizable>(code: &T, mode: QuantizeMode, rng: &mut ChaCha8Rng) -> Result<T> {
    let (values, quantized) = code.parts();
    if quantized {
        return Err(Error::AlreadyQuantized(T::NAME));
    }
    Ok(match mode {
        QuantizeMode::TrainNoise => {
            let noisy = Tensor::from_fn(values.shape().to_vec(), |i| values.data()[i] + rng.gen_range(-0.5f32..0.5));
            T::from_parts(noisy, false)
        }
        QuantizeMode::TrainSte | QuantizeMode::EvalRound => T::from_parts(values.map(f32::round), true),
    })
}
