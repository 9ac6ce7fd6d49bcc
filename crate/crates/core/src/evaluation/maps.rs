//! Mask and bit-allocation images for one decoded picture.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use tsic_grad::Tensor;

use crate::data::{ImageTensor, TextEmbedding};
use crate::entropy::{analyze, bit_allocation_map, estimate_rate, Decoded};
use crate::error::{IoContext, Result};
use crate::model::Codec;

/// Raw values behind a map image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapSidecar {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct EmittedMaps {
    /// One grayscale PNG per SSA stage, coarsest first.
    pub masks: Vec<PathBuf>,
    pub bit_map: PathBuf,
    pub bit_map_values: PathBuf,
    /// Latent bits the bit map accounts for.
    pub bits_y: f64,
    /// `[C, h, w]` of the latent.
    pub latent_dims: [usize; 3],
}

fn write_sidecar(path: &Path, height: usize, width: usize, values: Vec<f64>) -> Result<()> {
    let s = serde_json::to_vec(&MapSidecar { height, width, values })?;
    std::fs::write(path, s).context(|| format!("writing {}", path.display()))
}

/// Blue below the mean, white at it, red above; scaled by the largest
/// deviation.
pub fn diverging_color(v: f64, center: f64, span: f64) -> [u8; 3] {
    let t = if span > 0.0 { ((v - center) / span).clamp(-1.0, 1.0) } else { 0.0 };
    let fade = |a: f64| (255.0 * (1.0 - a.abs())).round() as u8;
    if t >= 0.0 {
        [255, fade(t), fade(t)]
    } else {
        [fade(t), fade(t), 255]
    }
}

/// Writes `mask_stage{i}.png` (+ `.json`) for every SSA stage,
/// `bit_map.png` and `bit_map.json` into `dir`.
pub fn emit_maps(codec: &Codec<f32>, image: &ImageTensor, text: &TextEmbedding, dir: &Path) -> Result<EmittedMaps> {
    emit_decoded_maps(codec, &analyze(codec, image)?, text, dir)
}

/// [`emit_maps`] for latents recovered from a bitstream.
pub fn emit_decoded_maps(codec: &Codec<f32>, d: &Decoded, text: &TextEmbedding, dir: &Path) -> Result<EmittedMaps> {
    std::fs::create_dir_all(dir).context(|| format!("creating map directory {}", dir.display()))?;
    let probe = dir.join(".write_probe");
    std::fs::write(&probe, b"").context(|| format!("{} is not writable", dir.display()))?;
    let _ = std::fs::remove_file(&probe);

    let (_, masks) = codec.generate_with_masks(&d.y_hat, text)?;
    let mut mask_paths = Vec::with_capacity(masks.len());
    for (i, m) in masks.iter().enumerate() {
        let (h, w) = (m.shape()[0], m.shape()[1]);
        let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
            let v = m.data()[y as usize * w + x as usize].clamp(0.0, 1.0);
            Luma([(v * 255.0).round() as u8])
        });
        let path = dir.join(format!("mask_stage{i}.png"));
        img.save(&path)?;
        write_sidecar(
            &path.with_extension("json"),
            h,
            w,
            m.data().iter().map(|&v| v as f64).collect(),
        )?;
        mask_paths.push(path);
    }

    let map: Tensor<f64> = bit_allocation_map(codec, &d.y_hat, &d.z_hat)?;
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let center = map.mean();
    let span = map.data().iter().map(|v| (v - center).abs()).fold(0.0, f64::max);
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        Rgb(diverging_color(map.data()[y as usize * w + x as usize], center, span))
    });
    let bit_map = dir.join("bit_map.png");
    img.save(&bit_map)?;
    let bit_map_values = dir.join("bit_map.json");
    write_sidecar(&bit_map_values, h, w, map.data().to_vec())?;
    let rate = estimate_rate(codec, &d.y_hat, &d.z_hat, d.dims.height * d.dims.width)?;
    Ok(EmittedMaps {
        masks: mask_paths,
        bit_map,
        bit_map_values,
        bits_y: rate.bits_y,
        latent_dims: [d.y_hat.channels(), h, w],
    })
}

pub fn load_sidecar(path: &Path) -> Result<MapSidecar> {
    let bytes = std::fs::read(path).context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diverging_endpoints() {
        assert_eq!(diverging_color(1.0, 1.0, 2.0), [255, 255, 255]);
        assert_eq!(diverging_color(3.0, 1.0, 2.0), [255, 0, 0]);
        assert_eq!(diverging_color(-1.0, 1.0, 2.0), [0, 0, 255]);
        assert_eq!(diverging_color(5.0, 5.0, 0.0), [255, 255, 255]);
    }
}
