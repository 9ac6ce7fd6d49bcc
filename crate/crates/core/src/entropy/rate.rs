//! Bit counts under the learned densities.

use tsic_grad::{gaussian_bin_mass, Tensor};

use crate::data::{HyperLatent, LatentCode};
use crate::error::{Error, Result};
use crate::model::{Codec, PROB_FLOOR};

/// `−log2 P[v]` for the unit bin around `v` under `N(mu, sigma²)`.
pub fn gaussian_bits(v: f64, mu: f64, sigma: f64) -> f64 {
    -gaussian_bin_mass(v, mu, sigma).max(PROB_FLOOR).log2()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateEstimate {
    pub bits_y: f64,
    pub bits_z: f64,
    /// Pixel count the rate is normalized by.
    pub pixels: usize,
}

impl RateEstimate {
    pub fn total_bits(&self) -> f64 {
        self.bits_y + self.bits_z
    }

    pub fn bpp(&self) -> f64 {
        self.total_bits() / self.pixels as f64
    }
}

fn elementwise_bits(values: &Tensor<f32>, loc: &Tensor<f32>, scale: &Tensor<f32>) -> Vec<f64> {
    values
        .data()
        .iter()
        .zip(loc.data())
        .zip(scale.data())
        .map(|((&v, &m), &s)| gaussian_bits(v as f64, m as f64, s as f64))
        .collect()
}

fn check(y_hat: &LatentCode, z_hat: &HyperLatent) -> Result<()> {
    if !y_hat.quantized {
        return Err(Error::NotQuantized("latent"));
    }
    if !z_hat.quantized {
        return Err(Error::NotQuantized("hyper-latent"));
    }
    Ok(())
}

/// Per-element latent bits `[C, h, w]` and hyper-latent bits `[C_z, hz, wz]`.
pub fn element_bits(codec: &Codec<f32>, y_hat: &LatentCode, z_hat: &HyperLatent) -> Result<(Tensor<f64>, Tensor<f64>)> {
    check(y_hat, z_hat)?;
    let (loc, scale) = codec.latent_density(z_hat, y_hat.height(), y_hat.width())?;
    if loc.shape() != y_hat.values.shape() {
        return Err(Error::Shape(format!(
            "density {:?} does not match latent {:?}",
            loc.shape(),
            y_hat.values.shape()
        )));
    }
    let by = elementwise_bits(&y_hat.values, &loc, &scale);
    let (zl, zs) = codec.hyper_density(z_hat.height(), z_hat.width());
    let bz = elementwise_bits(&z_hat.values, &zl, &zs);
    Ok((
        Tensor::new(y_hat.values.shape().to_vec(), by),
        Tensor::new(z_hat.values.shape().to_vec(), bz),
    ))
}

/// Estimated bits of both latents; `pixels` is the original image area.
pub fn estimate_rate(codec: &Codec<f32>, y_hat: &LatentCode, z_hat: &HyperLatent, pixels: usize) -> Result<RateEstimate> {
    let (by, bz) = element_bits(codec, y_hat, z_hat)?;
    Ok(RateEstimate {
        bits_y: by.sum(),
        bits_z: bz.sum(),
        pixels,
    })
}

/// Channel-mean latent bits at every latent position, `[h, w]`.
pub fn bit_allocation_map(codec: &Codec<f32>, y_hat: &LatentCode, z_hat: &HyperLatent) -> Result<Tensor<f64>> {
    let (by, _) = element_bits(codec, y_hat, z_hat)?;
    let (c, h, w) = (y_hat.channels(), y_hat.height(), y_hat.width());
    let mut map = vec![0.0; h * w];
    for plane in by.data().chunks(h * w) {
        for (m, b) in map.iter_mut().zip(plane) {
            *m += b;
        }
    }
    for m in &mut map {
        *m /= c as f64;
    }
    Ok(Tensor::new([h, w], map))
}
