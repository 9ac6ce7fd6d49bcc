//! Hyper-analysis/synthesis transforms and the factorized density of the
//! hyper-latent.

use rand_chacha::ChaCha8Rng;
use tsic_grad::{ParamId, ParamStore, Real, Tensor, Var};

use crate::model::ModelConfig;
use crate::nn::{act, Conv, Ctx};

/// Smallest scale the hyper-synthesis can predict.
pub const SCALE_FLOOR: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct HyperpriorParams {
    enc: [Conv; 2],
    dec: [Conv; 2],
    /// Per-channel location of the hyper-latent density.
    z_loc: ParamId,
    /// Per-channel log scale of the hyper-latent density.
    z_log_scale: ParamId,
    latent_channels: usize,
}

impl HyperpriorParams {
    pub fn new<F: Real>(store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let (c, cz) = (cfg.latent_channels, cfg.hyper_channels);
        let enc = [
            Conv::new(store, rng, "hyper.enc0", c, cz, 3, 2),
            Conv::new(store, rng, "hyper.enc1", cz, cz, 3, 2),
        ];
        let dec = [
            Conv::new(store, rng, "hyper.dec0", cz, cz, 3, 1),
            Conv::new(store, rng, "hyper.dec1", cz, 2 * c, 3, 1),
        ];
        let z_loc = store.add("hyper.z_loc", Tensor::zeros([cz]));
        let z_log_scale = store.add("hyper.z_log_scale", Tensor::zeros([cz]));
        Self {
            enc,
            dec,
            z_loc,
            z_log_scale,
            latent_channels: c,
        }
    }

    /// `[N, C, h, w] → [N, C_z, ⌈h/4⌉, ⌈w/4⌉]`.
    pub fn encode<'t, F: Real>(&self, ctx: &Ctx<'t, F>, store: &ParamStore<F>, y: Var<'t, F>) -> Var<'t, F> {
        let h = act(self.enc[0].forward(ctx, store, y));
        self.enc[1].forward(ctx, store, h)
    }

    /// Location and scale of every latent element, cropped to `h×w`.
    pub fn decode<'t, F: Real>(
        &self,
        ctx: &Ctx<'t, F>,
        store: &ParamStore<F>,
        z_hat: Var<'t, F>,
        h: usize,
        w: usize,
    ) -> (Var<'t, F>, Var<'t, F>) {
        let u = act(self.dec[0].forward(ctx, store, z_hat.upsample_nearest(2)));
        let params = self.dec[1].forward(ctx, store, u.upsample_nearest(2)).crop_spatial(h, w);
        let c = self.latent_channels;
        let loc = params.slice_channels(0, c);
        let scale = params.slice_channels(c, c).softplus().lower_bound(F::of(SCALE_FLOOR));
        (loc, scale)
    }

    /// Density parameters of the hyper-latent broadcast to `[n, C_z, h, w]`.
    pub fn z_density<'t, F: Real>(
        &self,
        ctx: &Ctx<'t, F>,
        store: &ParamStore<F>,
        n: usize,
        h: usize,
        w: usize,
    ) -> (Var<'t, F>, Var<'t, F>) {
        let loc = ctx.bind(store, self.z_loc).channel_broadcast(n, h, w);
        let scale = ctx
            .bind(store, self.z_log_scale)
            .exp()
            .lower_bound(F::of(SCALE_FLOOR))
            .channel_broadcast(n, h, w);
        (loc, scale)
    }
}
