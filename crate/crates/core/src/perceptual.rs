//! Perceptual distance adapters.
//!
//! The built-in proxy is a multi-scale structural dissimilarity. A learned
//! feature distance can be loaded from a checkpoint container instead.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tsic_grad::{ParamId, ParamStore, Real, Tape, Tensor, Var};

use crate::checkpoint::Checkpoint;
use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::nn::{act, Conv, Ctx};

pub const SSIM_WINDOW: usize = 5;
pub const SSIM_SCALES: usize = 3;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptualKind {
    MsSsim,
    Learned,
}

/// Mean SSIM map value per sample for `[0, 1]` images.
fn ssim_per_sample<'t, F: Real>(a: Var<'t, F>, b: Var<'t, F>) -> Var<'t, F> {
    let k = SSIM_WINDOW;
    let mu_a = a.box_filter(k);
    let mu_b = b.box_filter(k);
    let mu_aa = mu_a.square();
    let mu_bb = mu_b.square();
    let mu_ab = mu_a.mul(mu_b);
    let var_a = a.square().box_filter(k).sub(mu_aa);
    let var_b = b.square().box_filter(k).sub(mu_bb);
    let cov = a.mul(b).box_filter(k).sub(mu_ab);
    let two = F::of(2.0);
    let num = mu_ab
        .scale(two)
        .add_scalar(F::of(C1))
        .mul(cov.scale(two).add_scalar(F::of(C2)));
    let den = mu_aa
        .add(mu_bb)
        .add_scalar(F::of(C1))
        .mul(var_a.add(var_b).add_scalar(F::of(C2)));
    num.div(den).mean_per_sample()
}

/// `1 − mean over scales of SSIM`, per sample `[N]`, for `[-1, 1]` images.
/// Scales halve the resolution while the side still fits the window.
pub fn ms_ssim_dissimilarity<'t, F: Real>(x: Var<'t, F>, y: Var<'t, F>) -> Var<'t, F> {
    let half = F::of(0.5);
    let mut a = x.add_scalar(F::one()).scale(half);
    let mut b = y.add_scalar(F::one()).scale(half);
    let mut acc: Option<Var<'t, F>> = None;
    let mut used = 0;
    for s in 0..SSIM_SCALES {
        let shape = a.shape();
        if shape[2] < SSIM_WINDOW || shape[3] < SSIM_WINDOW {
            break;
        }
        let v = ssim_per_sample(a, b);
        acc = Some(match acc {
            Some(t) => t.add(v),
            None => v,
        });
        used += 1;
        if s + 1 < SSIM_SCALES {
            a = a.avg_pool2();
            b = b.avg_pool2();
        }
    }
    let total = acc.expect("images smaller than the SSIM window");
    total.scale(F::of(-1.0 / used as f64)).add_scalar(F::one())
}

/// Feature-space distance with fixed channel weights per layer, loaded
/// from a checkpoint holding `layer{i}.weight`, `layer{i}.bias` and
/// `layer{i}.channel_weight`. Never trained.
#[derive(Clone, Debug)]
pub struct LearnedPerceptual {
    store: ParamStore<f32>,
    layers: Vec<(Conv, ParamId)>,
}

impl LearnedPerceptual {
    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        for i in 0.. {
            let Some(w) = ckpt.get(&format!("layer{i}.weight")) else { break };
            let fetch = |k: &str| {
                ckpt.get(&format!("layer{i}.{k}"))
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint(format!("perceptual layer {i} lacks {k}")))
            };
            let (b, cw) = (fetch("bias")?, fetch("channel_weight")?);
            if w.shape().len() != 4 || b.len() != w.shape()[0] || cw.len() != w.shape()[0] {
                return Err(Error::Checkpoint(format!("perceptual layer {i} has inconsistent shapes")));
            }
            let k = w.shape()[2];
            let conv = Conv {
                weight: store.add(format!("layer{i}.weight"), w.clone()),
                bias: store.add(format!("layer{i}.bias"), b),
                stride: if i == 0 { 1 } else { 2 },
                pad: k / 2,
            };
            let cwid = store.add(format!("layer{i}.channel_weight"), cw);
            layers.push((conv, cwid));
        }
        if layers.is_empty() {
            return Err(Error::Checkpoint("perceptual weights contain no layers".into()));
        }
        Ok(Self { store, layers })
    }

    /// Per-sample distance `[N]`.
    pub fn distance<'t>(&self, tape: &'t Tape<f32>, x: Var<'t, f32>, y: Var<'t, f32>) -> Var<'t, f32> {
        let ctx = Ctx::eval(tape);
        let (mut a, mut b) = (x, y);
        let mut acc: Option<Var<'t, f32>> = None;
        for (conv, cw) in &self.layers {
            a = act(conv.forward(&ctx, &self.store, a));
            b = act(conv.forward(&ctx, &self.store, b));
            let (na, nb) = (unit_channels(a), unit_channels(b));
            let d = na.sub(nb).square();
            let (n, c) = (d.shape()[0], d.shape()[1]);
            let w = tape.frozen(&self.store, *cw).channel_broadcast(n, 1, 1).reshape([n, c]);
            let term = d.mul_nc(w).sum_channels().mean_per_sample();
            acc = Some(match acc {
                Some(t) => t.add(term),
                None => term,
            });
        }
        acc.expect("at least one layer")
    }
}

/// Normalizes every spatial feature vector to unit length.
fn unit_channels<'t, F: Real>(f: Var<'t, F>) -> Var<'t, F> {
    let norm = f.square().sum_channels().add_scalar(F::of(1e-10)).sqrt();
    let ones = f.tape().constant(Tensor::full(norm.shape(), F::one()));
    f.mul_spatial(ones.div(norm))
}

/// Configured perceptual proxy.
#[derive(Clone, Debug)]
pub enum Perceptual {
    MsSsim,
    Learned(Box<LearnedPerceptual>),
}

impl Perceptual {
    pub fn from_config(kind: PerceptualKind, weights: Option<&Path>) -> Result<Self> {
        match kind {
            PerceptualKind::MsSsim => Ok(Perceptual::MsSsim),
            PerceptualKind::Learned => {
                let p = weights.ok_or_else(|| Error::Config("perceptual = \"learned\" needs perceptual_weights".into()))?;
                Ok(Perceptual::Learned(Box::new(LearnedPerceptual::load(p)?)))
            }
        }
    }

    /// Per-sample distance on the training tape.
    pub fn per_sample<'t>(&self, x: Var<'t, f32>, y: Var<'t, f32>) -> Var<'t, f32> {
        match self {
            Perceptual::MsSsim => ms_ssim_dissimilarity(x, y),
            Perceptual::Learned(l) => l.distance(x.tape(), x, y),
        }
    }

    /// Distance between two images of equal size.
    pub fn image_distance(&self, x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
        if x.pixels().shape() != y.pixels().shape() {
            return Err(Error::Shape("perceptual distance needs equal image sizes".into()));
        }
        match self {
            Perceptual::MsSsim => {
                let tape = Tape::<f64>::new();
                let v = ms_ssim_dissimilarity(tape.constant(x.to_batch().cast()), tape.constant(y.to_batch().cast()));
                Ok(v.value().data()[0])
            }
            Perceptual::Learned(l) => {
                let tape = Tape::new();
                let v = l.distance(&tape, tape.constant(x.to_batch()), tape.constant(y.to_batch()));
                Ok(v.value().data()[0] as f64)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(seed: f32) -> ImageTensor {
        ImageTensor::new(Tensor::from_fn([3, 32, 32], |i| ((i as f32) * 0.05 + seed).sin() * 0.8)).unwrap()
    }

    #[test]
    fn identical_images_have_zero_dissimilarity() {
        let p = Perceptual::MsSsim;
        assert!(p.image_distance(&img(0.0), &img(0.0)).unwrap().abs() < 1e-6);
        let d = p.image_distance(&img(0.0), &img(1.0)).unwrap();
        assert!(d > 0.05, "{d}");
    }

    #[test]
    fn dissimilarity_grows_with_noise() {
        let base = img(0.3);
        let noisy = |amp: f32| {
            ImageTensor::new(base.pixels().zip_map(
                &Tensor::from_fn([3, 32, 32], |i| (((i * 7919) % 97) as f32 / 48.5 - 1.0) * amp),
                |a, b| a + b,
            ))
            .unwrap()
        };
        let p = Perceptual::MsSsim;
        let d1 = p.image_distance(&base, &noisy(0.05)).unwrap();
        let d2 = p.image_distance(&base, &noisy(0.2)).unwrap();
        assert!(0.0 < d1 && d1 < d2, "{d1} {d2}");
    }

    #[test]
    fn learned_adapter_loads_and_is_zero_on_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let mut c = Checkpoint::new(serde_json::json!({}));
        c.push("layer0.weight", Tensor::from_fn([4, 3, 3, 3], |i| ((i as f32) * 0.7).sin() * 0.3));
        c.push("layer0.bias", Tensor::zeros([4]));
        c.push("layer0.channel_weight", Tensor::full([4], 0.25));
        c.push("layer1.weight", Tensor::from_fn([4, 4, 3, 3], |i| ((i as f32) * 0.3).cos() * 0.2));
        c.push("layer1.bias", Tensor::zeros([4]));
        c.push("layer1.channel_weight", Tensor::full([4], 0.25));
        c.save(&path).unwrap();
        let p = Perceptual::from_config(PerceptualKind::Learned, Some(&path)).unwrap();
        assert_eq!(p.image_distance(&img(0.0), &img(0.0)).unwrap(), 0.0);
        assert!(p.image_distance(&img(0.0), &img(2.0)).unwrap() > 0.0);
        assert!(Perceptual::from_config(PerceptualKind::Learned, None).is_err());
    }
}
