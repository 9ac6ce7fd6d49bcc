//! Training objective pieces and the per-step report.

use serde::{Deserialize, Serialize};
use tsic_grad::{Real, Var};

use crate::data::TextEmbedding;

use super::config::Variant;

/// One optimization step (or an epoch mean of steps).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    /// Mean estimated bits per image.
    pub rate_bits: f64,
    pub bpp: f64,
    pub d_mse: f64,
    pub d_perceptual: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub lambda_effective: f64,
}

impl LossReport {
    /// Recomputes `total` from the components with the given weights.
    pub fn recompute_total(&self, k_mse: f64, k_perceptual: f64, beta: f64) -> f64 {
        egp_loss(
            self.lambda_effective,
            self.bpp,
            distortion(k_mse, self.d_mse, k_perceptual, self.d_perceptual),
            self.adv_g,
            beta,
        )
    }

    /// Component-wise mean.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut m = LossReport::default();
        for r in reports {
            m.total += r.total / n;
            m.rate_bits += r.rate_bits / n;
            m.bpp += r.bpp / n;
            m.d_mse += r.d_mse / n;
            m.d_perceptual += r.d_perceptual / n;
            m.adv_g += r.adv_g / n;
            m.adv_d += r.adv_d / n;
            m.lambda_effective += r.lambda_effective / n;
        }
        m
    }
}

/// Weighted reconstruction error.
pub fn distortion(k_mse: f64, mse: f64, k_perceptual: f64, perceptual: f64) -> f64 {
    k_mse * mse + k_perceptual * perceptual
}

/// Rate, distortion and adversarial terms combined.
pub fn egp_loss(lambda: f64, bpp: f64, distortion: f64, adv_g: f64, beta: f64) -> f64 {
    lambda * bpp + distortion + beta * adv_g
}

pub fn egp_loss_var<'t, F: Real>(lambda: f64, bpp: Var<'t, F>, distortion: Var<'t, F>, adv_g: Option<(Var<'t, F>, f64)>) -> Var<'t, F> {
    let base = bpp.scale(F::of(lambda)).add(distortion);
    match adv_g {
        Some((a, beta)) => base.add(a.scale(F::of(beta))),
        None => base,
    }
}

/// Heavier rate weight while the running rate is above target.
pub fn rate_target_controller(current_bpp: f64, target_bpp: f64, lambda_low: f64, lambda_high: f64) -> f64 {
    if current_bpp > target_bpp {
        lambda_high
    } else {
        lambda_low
    }
}

/// Text seen by the generator and by the discriminator.
pub fn apply_variant(variant: Variant, text: &TextEmbedding) -> (TextEmbedding, TextEmbedding) {
    let g = if variant.generator_uses_text() {
        text.clone()
    } else {
        TextEmbedding::zero()
    };
    let d = if variant.discriminator_uses_text() {
        text.clone()
    } else {
        TextEmbedding::zero()
    };
    (g, d)
}

/// Text given to the generator at inference time.
pub fn inference_text(variant: Variant, text: &TextEmbedding) -> TextEmbedding {
    apply_variant(variant, text).0
}
