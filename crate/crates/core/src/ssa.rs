//! Semantic-spatial-aware conditioning: a spatial mask predicted from the
//! features gates a text-driven per-channel affine over normalized features.

use rand_chacha::ChaCha8Rng;
use tsic_grad::{BatchStats, ParamStore, Real, Tape, Tensor, Var};

use crate::data::{TextEmbedding, TEXT_DIM};
use crate::error::{Error, Result};
use crate::nn::{act, Conv, Ctx, Linear, Mode};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Two-layer MLP `512 → hidden → c` with SiLU.
#[derive(Clone, Copy, Debug)]
pub struct TextMlp {
    hidden: Linear,
    out: Linear,
}

impl TextMlp {
    fn new<F: Real>(store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, name: &str, hidden: usize, c: usize) -> Self {
        Self {
            hidden: Linear::new(store, rng, &format!("{name}.0"), TEXT_DIM, hidden, 1.0),
            out: Linear::new(store, rng, &format!("{name}.1"), hidden, c, 1.0),
        }
    }

    pub fn forward<'t, F: Real>(&self, ctx: &Ctx<'t, F>, store: &ParamStore<F>, text: Var<'t, F>) -> Var<'t, F> {
        self.out.forward(ctx, store, self.hidden.forward(ctx, store, text).silu())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SsaBlock {
    pub channels: usize,
    mask_hidden: Conv,
    mask_head: Conv,
    gamma: TextMlp,
    beta: TextMlp,
}

/// Per-sample channel scales and shifts, each `[N, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineParams {
    pub gamma: Tensor<f32>,
    pub beta: Tensor<f32>,
}

impl SsaBlock {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        mlp_hidden: usize,
    ) -> Self {
        let mid = (channels / 2).max(1);
        Self {
            channels,
            mask_hidden: Conv::new(store, rng, &format!("{name}.mask.0"), channels, mid, 3, 1),
            mask_head: Conv::new(store, rng, &format!("{name}.mask.1"), mid, 1, 3, 1),
            gamma: TextMlp::new(store, rng, &format!("{name}.gamma"), mlp_hidden, channels),
            beta: TextMlp::new(store, rng, &format!("{name}.beta"), mlp_hidden, channels),
        }
    }

    /// `[N, C, H, W] → [N, 1, H, W]` in `(0, 1)`.
    pub fn mask<'t, F: Real>(&self, ctx: &Ctx<'t, F>, store: &ParamStore<F>, x: Var<'t, F>) -> Var<'t, F> {
        let h = act(self.mask_hidden.forward(ctx, store, x));
        self.mask_head.forward(ctx, store, h).sigmoid()
    }

    pub fn affine<'t, F: Real>(
        &self,
        ctx: &Ctx<'t, F>,
        store: &ParamStore<F>,
        text: Var<'t, F>,
    ) -> (Var<'t, F>, Var<'t, F>) {
        (self.gamma.forward(ctx, store, text), self.beta.forward(ctx, store, text))
    }

    /// Full block. In [`Mode::Train`] the batch statistics are recorded on
    /// `ctx`; otherwise `running` normalizes.
    pub fn forward<'t, F: Real>(
        &self,
        ctx: &Ctx<'t, F>,
        store: &ParamStore<F>,
        x: Var<'t, F>,
        text: Var<'t, F>,
        running: &BatchStats<F>,
    ) -> (Var<'t, F>, Var<'t, F>) {
        let mask = self.mask(ctx, store, x);
        let (gamma, beta) = self.affine(ctx, store, text);
        let normed = match ctx.mode {
            Mode::Train => {
                let (n, stats) = x.batch_norm(F::of(BN_EPS));
                ctx.record_stats(stats);
                n
            }
            Mode::Eval => x.normalize_with(&running.mean, &running.var, F::of(BN_EPS)),
        };
        (masked_affine(x, normed, mask, gamma, beta), mask)
    }
}

/// `x + mask ⊙ (gamma ⊙ normed + beta)`.
pub fn masked_affine<'t, F: Real>(
    x: Var<'t, F>,
    normed: Var<'t, F>,
    mask: Var<'t, F>,
    gamma: Var<'t, F>,
    beta: Var<'t, F>,
) -> Var<'t, F> {
    x.add(normed.mul_nc(gamma).add_nc(beta).mul_spatial(mask))
}

/// The generator's SSA blocks with their normalization running statistics.
#[derive(Clone, Debug)]
pub struct SsaStack<F> {
    blocks: Vec<SsaBlock>,
    running: Vec<BatchStats<F>>,
}

impl<F: Real> SsaStack<F> {
    pub fn new(store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, channels: &[usize], mlp_hidden: usize) -> Self {
        let blocks: Vec<SsaBlock> = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| SsaBlock::new(store, rng, &format!("ssa{i}"), c, mlp_hidden))
            .collect();
        let running = channels
            .iter()
            .map(|&c| BatchStats {
                mean: vec![F::zero(); c],
                var: vec![F::one(); c],
            })
            .collect();
        Self { blocks, running }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn block(&self, i: usize) -> &SsaBlock {
        &self.blocks[i]
    }

    pub fn running(&self) -> &[BatchStats<F>] {
        &self.running
    }

    pub fn set_running(&mut self, running: Vec<BatchStats<F>>) -> Result<()> {
        if running.len() != self.blocks.len()
            || running
                .iter()
                .zip(&self.blocks)
                .any(|(r, b)| r.mean.len() != b.channels || r.var.len() != b.channels)
        {
            return Err(Error::Shape("running statistics do not match the SSA blocks".into()));
        }
        self.running = running;
        Ok(())
    }

    pub fn forward<'t>(
        &self,
        i: usize,
        ctx: &Ctx<'t, F>,
        store: &ParamStore<F>,
        x: Var<'t, F>,
        text: Var<'t, F>,
    ) -> (Var<'t, F>, Var<'t, F>) {
        self.blocks[i].forward(ctx, store, x, text, &self.running[i])
    }

    /// Exponential moving average update from one training pass; `batch`
    /// holds the statistics in block order and `counts` the number of
    /// values each was computed over. Variance is stored unbiased.
    pub fn update_running(&mut self, batch: &[BatchStats<F>], counts: &[usize]) {
        assert_eq!(batch.len(), self.running.len(), "one statistics entry per block");
        assert_eq!(counts.len(), self.running.len(), "one count per block");
        let m = F::of(BN_MOMENTUM);
        let keep = F::one() - m;
        for ((r, b), &count) in self.running.iter_mut().zip(batch).zip(counts) {
            let unbias = if count > 1 {
                F::of(count as f64 / (count - 1) as f64)
            } else {
                F::one()
            };
            for (rm, &bm) in r.mean.iter_mut().zip(&b.mean) {
                *rm = keep * *rm + m * bm;
            }
            for (rv, &bv) in r.var.iter_mut().zip(&b.var) {
                *rv = keep * *rv + m * bv * unbias;
            }
        }
    }
}

fn check_features(features: &Tensor<f32>, block: &SsaBlock) -> Result<()> {
    if features.shape().len() != 4 || features.shape()[1] != block.channels {
        return Err(Error::Shape(format!(
            "SSA block expects [N, {}, H, W] features, got {:?}",
            block.channels,
            features.shape()
        )));
    }
    if features.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("features"));
    }
    Ok(())
}

/// Spatial mask of `block` for `[N, C, H, W]` features.
pub fn predict_mask(store: &ParamStore<f32>, block: &SsaBlock, features: &Tensor<f32>) -> Result<Tensor<f32>> {
    check_features(features, block)?;
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape);
    let m = block.mask(&ctx, store, tape.constant(features.clone()));
    Ok((*m.value()).clone())
}

/// Per-channel affine of `block` for one caption embedding.
pub fn affine_from_text(store: &ParamStore<f32>, block: &SsaBlock, text: &TextEmbedding) -> AffineParams {
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape);
    let t = tape.constant(TextEmbedding::stack(&[text]));
    let (g, b) = block.affine(&ctx, store, t);
    AffineParams {
        gamma: (*g.value()).clone(),
        beta: (*b.value()).clone(),
    }
}

/// Applies `block` to features with running statistics. The same text
/// conditions every sample of the batch.
pub fn ssa_transform(
    store: &ParamStore<f32>,
    block: &SsaBlock,
    running: &BatchStats<f32>,
    features: &Tensor<f32>,
    text: &TextEmbedding,
) -> Result<Tensor<f32>> {
    check_features(features, block)?;
    let n = features.shape()[0];
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape);
    let texts = vec![text; n];
    let t = tape.constant(TextEmbedding::stack(&texts));
    let (out, _) = block.forward(&ctx, store, tape.constant(features.clone()), t, running);
    Ok((*out.value()).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn features(rng: &mut ChaCha8Rng, shape: [usize; 4], scale: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
    }

    #[test]
    fn unit_affine_full_mask_adds_normalized_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tape = Tape::<f64>::new();
        let x = tape.constant(features(&mut rng, [2, 3, 4, 4], 2.0));
        let (normed, _) = x.batch_norm(BN_EPS);
        let mask = tape.constant(Tensor::full([2, 1, 4, 4], 1.0));
        let gamma = tape.constant(Tensor::full([2, 3], 1.0));
        let beta = tape.constant(Tensor::zeros([2, 3]));
        let out = masked_affine(x, normed, mask, gamma, beta);
        let expect = x.value().zip_map(&normed.value(), |a, b| a + b);
        assert_eq!(*out.value(), expect);
    }

    #[test]
    fn zero_mask_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::<f64>::new();
        let x = tape.constant(features(&mut rng, [2, 3, 4, 4], 5.0));
        let (normed, _) = x.batch_norm(BN_EPS);
        let mask = tape.constant(Tensor::zeros([2, 1, 4, 4]));
        let gamma = tape.constant(features(&mut rng, [2, 3, 1, 1], 3.0).reshape([2, 3]));
        let beta = tape.constant(features(&mut rng, [2, 3, 1, 1], 3.0).reshape([2, 3]));
        let out = masked_affine(x, normed, mask, gamma, beta);
        assert_eq!(*out.value(), *x.value());
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f32>::new();
        let block = SsaBlock::new(&mut store, &mut rng, "b", 4, 8);
        let f = Tensor::zeros([1, 3, 4, 4]);
        assert!(matches!(predict_mask(&store, &block, &f), Err(Error::Shape(_))));
    }

    #[test]
    fn running_statistics_follow_momentum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let mut stack = SsaStack::new(&mut store, &mut rng, &[2], 4);
        let batch = BatchStats {
            mean: vec![1.0, -1.0],
            var: vec![3.0, 0.0],
        };
        stack.update_running(&[batch], &[4]);
        let r = &stack.running()[0];
        assert!((r.mean[0] - 0.1).abs() < 1e-12 && (r.mean[1] + 0.1).abs() < 1e-12);
        assert!((r.var[0] - (0.9 + 0.1 * 3.0 * 4.0 / 3.0)).abs() < 1e-12);
        assert!((r.var[1] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn eval_transform_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f32>::new();
        let stack = SsaStack::new(&mut store, &mut rng, &[4], 8);
        let f = Tensor::from_fn([1, 4, 4, 4], |i| (i as f32 * 0.37).sin());
        let text = TextEmbedding::new(vec![0.25; TEXT_DIM], crate::data::TextKind::Matched).unwrap();
        let a = ssa_transform(&store, stack.block(0), &stack.running()[0], &f, &text).unwrap();
        let b = ssa_transform(&store, stack.block(0), &stack.running()[0], &f, &text).unwrap();
        assert_eq!(a, b);
        let p = affine_from_text(&store, stack.block(0), &text);
        assert_eq!(p.gamma.shape(), &[1, 4]);
    }
}
