//! Conditional discriminator over (image, latent, text) and its losses.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tsic_grad::{ParamStore, Real, Tape, Var};

use crate::data::{ImageTensor, LatentCode, TextEmbedding, LATENT_STRIDE, TEXT_DIM};
use crate::error::{Error, Result};
use crate::nn::{act, Conv, Ctx};

/// Log arguments are clamped to `[SCORE_EPS, 1]`.
pub const SCORE_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscConfig {
    /// Widths of the three stride-2 image stages (fusion grid is H/8).
    pub disc_widths: [usize; 3],
    /// Channels of the projected latent.
    pub disc_latent_proj: usize,
    pub disc_fusion_width: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            disc_widths: [16, 32, 32],
            disc_latent_proj: 16,
            disc_fusion_width: 32,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator<F: Real> {
    pub config: DiscConfig,
    pub store: ParamStore<F>,
    image: [Conv; 3],
    latent_proj: Conv,
    fuse: Conv,
    mid: Conv,
    head: Conv,
}

/// Latent grid is 16× smaller than the image; the fusion grid 8×.
const LATENT_TO_FUSION: usize = 2;

impl<F: Real> Discriminator<F> {
    pub fn new(config: DiscConfig, latent_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = config.disc_widths;
        let image = [
            Conv::new(&mut store, &mut rng, "disc.img0", 3, w[0], 3, 2),
            Conv::new(&mut store, &mut rng, "disc.img1", w[0], w[1], 3, 2),
            Conv::new(&mut store, &mut rng, "disc.img2", w[1], w[2], 3, 2),
        ];
        let latent_proj = Conv::new(&mut store, &mut rng, "disc.latent_proj", latent_channels, config.disc_latent_proj, 1, 1);
        let fuse_in = w[2] + config.disc_latent_proj + TEXT_DIM;
        let fuse = Conv::new(&mut store, &mut rng, "disc.fuse", fuse_in, config.disc_fusion_width, 1, 1);
        let mid = Conv::new(&mut store, &mut rng, "disc.mid", config.disc_fusion_width, config.disc_fusion_width, 3, 1);
        let head = Conv::new(&mut store, &mut rng, "disc.head", config.disc_fusion_width, 1, 3, 1);
        Self {
            config,
            store,
            image,
            latent_proj,
            fuse,
            mid,
            head,
        }
    }

    /// Zeroes the output head so every score is exactly 0.5.
    pub fn zero_head(&mut self) {
        for id in [self.head.weight, self.head.bias] {
            self.store.get_mut(id).data_mut().fill(F::zero());
        }
    }

    /// Sigmoid score map `[N, 1, H/8, W/8]`.
    pub fn score_map<'t>(
        &self,
        ctx: &Ctx<'t, F>,
        image: Var<'t, F>,
        latent: Var<'t, F>,
        text: Var<'t, F>,
    ) -> Var<'t, F> {
        let s = &self.store;
        let mut h = image;
        for c in &self.image {
            h = act(c.forward(ctx, s, h));
        }
        let hs = h.shape();
        let (gh, gw) = (hs[2], hs[3]);
        let l = act(self.latent_proj.forward(ctx, s, latent)).upsample_nearest(LATENT_TO_FUSION);
        assert_eq!(l.shape()[2..], [gh, gw], "latent projection misses the fusion grid");
        let t = text.broadcast_spatial(gh, gw);
        let f = act(self.fuse.forward(ctx, s, Var::concat_channels(&[h, l, t])));
        let f = act(self.mid.forward(ctx, s, f));
        self.head.forward(ctx, s, f).sigmoid()
    }

    /// Per-sample scores `[N]`: mean of the score map.
    pub fn scores<'t>(&self, ctx: &Ctx<'t, F>, image: Var<'t, F>, latent: Var<'t, F>, text: Var<'t, F>) -> Var<'t, F> {
        self.score_map(ctx, image, latent, text).mean_per_sample()
    }
}

/// Eval-mode score of one triple.
pub fn discriminate(disc: &Discriminator<f32>, image: &ImageTensor, latent: &LatentCode, text: &TextEmbedding) -> Result<f32> {
    if !latent.quantized {
        return Err(Error::NotQuantized("latent"));
    }
    if image.height() != LATENT_STRIDE * latent.height() || image.width() != LATENT_STRIDE * latent.width() {
        return Err(Error::Shape(format!(
            "image {}x{} does not match latent {}x{}",
            image.height(),
            image.width(),
            latent.height(),
            latent.width()
        )));
    }
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape);
    let mut ls = vec![1];
    ls.extend_from_slice(latent.values.shape());
    let s = disc.scores(
        &ctx,
        tape.constant(image.to_batch()),
        tape.constant(latent.values.clone().reshape(ls)),
        tape.constant(TextEmbedding::stack(&[text])),
    );
    Ok(s.value().data()[0])
}

/// Generator adversarial term: negative mean fake score.
pub fn generator_adv_loss(scores_fake: &[f64]) -> f64 {
    if scores_fake.is_empty() {
        return 0.0;
    }
    -scores_fake.iter().sum::<f64>() / scores_fake.len() as f64
}

pub fn generator_adv_loss_var<'t, F: Real>(scores_fake: Var<'t, F>) -> Var<'t, F> {
    scores_fake.mean().neg()
}

fn safe_ln(p: f64) -> f64 {
    p.clamp(SCORE_EPS, 1.0).ln()
}

/// Three-term cross-entropy, natural log, averaged over samples.
pub fn discriminator_loss(fake_matched: &[f64], real_matched: &[f64], real_mismatched: &[f64]) -> f64 {
    let n = fake_matched.len();
    assert!(n == real_matched.len() && n == real_mismatched.len(), "score arrays differ in length");
    if n == 0 {
        return 0.0;
    }
    let total: f64 = (0..n)
        .map(|i| {
            -safe_ln(1.0 - fake_matched[i]) - safe_ln(real_matched[i]) - safe_ln(1.0 - real_mismatched[i])
        })
        .sum();
    total / n as f64
}

pub fn discriminator_loss_var<'t, F: Real>(
    fake_matched: Var<'t, F>,
    real_matched: Var<'t, F>,
    real_mismatched: Var<'t, F>,
) -> Var<'t, F> {
    let (lo, hi) = (F::of(SCORE_EPS), F::one());
    let safe_ln = |v: Var<'t, F>| v.clamp(lo, hi).ln().mean();
    let one_minus = |v: Var<'t, F>| v.neg().add_scalar(F::one());
    let fake = safe_ln(one_minus(fake_matched));
    let real = safe_ln(real_matched);
    let mism = safe_ln(one_minus(real_mismatched));
    fake.add(real).add(mism).neg()
}

/// Permutation with no fixed points (requires `n ≥ 2`).
pub fn derangement(n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Training(format!("cannot derange {n} captions")));
    }
    // Sattolo's algorithm yields a single n-cycle.
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..i);
        p.swap(i, j);
    }
    Ok(p)
}

/// For every batch member, an index of a different dataset record whose
/// caption serves as the mismatch.
pub fn mismatch_records(batch: &[usize], dataset_len: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if batch.len() >= 2 {
        let p = derangement(batch.len(), rng)?;
        return Ok(p.into_iter().map(|j| batch[j]).collect());
    }
    if dataset_len < 2 {
        return Err(Error::Training("mismatched captions need at least two records".into()));
    }
    Ok(batch
        .iter()
        .map(|&i| {
            let mut others: Vec<usize> = (0..dataset_len).filter(|&j| j != i).collect();
            others.shuffle(rng);
            others[0]
        })
        .collect())
}
