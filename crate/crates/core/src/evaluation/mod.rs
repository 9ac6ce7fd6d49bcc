//! Rate-distortion measurement, curve comparison, caption stability and
//! map export.

mod bd_rate;
mod maps;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ImageTensor, TextEmbedding};
use crate::entropy::{compress, decompress};
use crate::error::{Error, IoContext, Result};
use crate::model::Codec;
use crate::perceptual::Perceptual;
use crate::text::TextEncoder;
use crate::training::{inference_text, Variant};

pub use bd_rate::{bd_rate, RdCurve};
pub use maps::{diverging_color, emit_decoded_maps, emit_maps, load_sidecar, EmittedMaps, MapSidecar};

/// PSNR reported for bit-identical images.
pub const PSNR_IDENTICAL: f64 = 999.0;

/// PSNR in dB for `[-1, 1]` images (peak-to-peak range 2).
pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_IDENTICAL
    } else {
        10.0 * (4.0 / mse).log10()
    }
}

pub fn image_mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if a.pixels().shape() != b.pixels().shape() {
        return Err(Error::Shape("images differ in size".into()));
    }
    let n = a.pixels().len() as f64;
    Ok(a.pixels()
        .data()
        .iter()
        .zip(b.pixels().data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / n)
}

/// Set-level distance between original and reconstructed images.
pub trait DistributionalMetric {
    fn name(&self) -> &str;
    fn distance(&self, originals: &[ImageTensor], reconstructions: &[ImageTensor]) -> Result<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub image_id: String,
    pub variant: Variant,
    /// Caption used for decoding; `None` when decoded without text.
    pub caption_id: Option<String>,
    /// Size of the complete compressed file per original pixel.
    pub bpp: f64,
    pub psnr_db: f64,
    pub mse: f64,
    pub perc_proxy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distributional: Option<f64>,
}

/// Image plus the captions available for it.
#[derive(Clone, Debug)]
pub struct EvalImage {
    pub id: String,
    pub image: ImageTensor,
    pub captions: Vec<String>,
}

/// Which caption to decode with.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CaptionChoice {
    /// Caption at this index of every image's list.
    Index(usize),
    /// The same caption for every image.
    Fixed(String),
    NoText,
}

fn decode_text(choice: &CaptionChoice, img: &EvalImage, encoder: &dyn TextEncoder) -> Result<(Option<String>, TextEmbedding)> {
    match choice {
        CaptionChoice::NoText => Ok((None, TextEmbedding::zero())),
        CaptionChoice::Fixed(c) => Ok((Some("fixed".into()), encoder.embed(c)?)),
        CaptionChoice::Index(i) => {
            let c = img.captions.get(*i).ok_or_else(|| {
                Error::Evaluation(format!("image {} has no caption {i}", img.id))
            })?;
            Ok((Some(i.to_string()), encoder.embed(c)?))
        }
    }
}

pub struct Evaluator<'a> {
    pub codec: &'a Codec<f32>,
    pub variant: Variant,
    pub encoder: &'a dyn TextEncoder,
    pub perceptual: &'a Perceptual,
    pub distributional: Option<&'a dyn DistributionalMetric>,
}

impl Evaluator<'_> {
    fn point(&self, image_id: &str, original: &ImageTensor, recon: &ImageTensor, bpp: f64, caption_id: Option<String>) -> Result<RdPoint> {
        let mse = image_mse(original, recon)?;
        Ok(RdPoint {
            image_id: image_id.to_string(),
            variant: self.variant,
            caption_id,
            bpp,
            psnr_db: psnr(mse),
            mse,
            perc_proxy: self.perceptual.image_distance(original, recon)?,
            distributional: None,
        })
    }

    /// Compresses, decodes and scores every image.
    pub fn evaluate(&self, images: &[EvalImage], caption: &CaptionChoice) -> Result<Vec<RdPoint>> {
        if images.is_empty() {
            return Err(Error::Evaluation("no images to evaluate".into()));
        }
        let mut points = Vec::with_capacity(images.len());
        let mut recons = Vec::with_capacity(images.len());
        for img in images {
            let (stream, _) = compress(self.codec, &img.image)?;
            let bytes = stream.to_bytes();
            let bpp = 8.0 * bytes.len() as f64 / (img.image.height() * img.image.width()) as f64;
            let decoded = decompress(self.codec, &crate::entropy::Bitstream::from_bytes(&bytes)?)?;
            let (cid, text) = decode_text(caption, img, self.encoder)?;
            let recon = decoded.reconstruct(self.codec, &inference_text(self.variant, &text))?;
            points.push(self.point(&img.id, &img.image, &recon, bpp, cid)?);
            recons.push(recon);
        }
        if let Some(m) = self.distributional {
            let originals: Vec<ImageTensor> = images.iter().map(|i| i.image.clone()).collect();
            let v = m.distance(&originals, &recons)?;
            for p in &mut points {
                p.distributional = Some(v);
            }
        }
        Ok(points)
    }

    /// One bitstream decoded once per caption. `captions` are `(id, text)`.
    pub fn stability(&self, image_id: &str, image: &ImageTensor, captions: &[(String, String)]) -> Result<Vec<RdPoint>> {
        if captions.len() < 2 {
            return Err(Error::Evaluation(format!(
                "stability needs at least 2 captions, got {}",
                captions.len()
            )));
        }
        let (stream, decoded) = compress(self.codec, image)?;
        let bpp = 8.0 * stream.len() as f64 / (image.height() * image.width()) as f64;
        captions
            .iter()
            .map(|(id, c)| {
                let text = inference_text(self.variant, &self.encoder.embed(c)?);
                let recon = decoded.reconstruct(self.codec, &text)?;
                self.point(image_id, image, &recon, bpp, Some(id.clone()))
            })
            .collect()
    }
}

/// Mean bpp, PSNR, MSE and perceptual proxy over a set of points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdSummary {
    pub bpp: f64,
    pub psnr_db: f64,
    pub mse: f64,
    pub perc_proxy: f64,
}

pub fn summarize(points: &[RdPoint]) -> Result<RdSummary> {
    if points.is_empty() {
        return Err(Error::Evaluation("nothing to summarize".into()));
    }
    let n = points.len() as f64;
    let mean = |f: fn(&RdPoint) -> f64| points.iter().map(f).sum::<f64>() / n;
    let mse = mean(|p| p.mse);
    Ok(RdSummary {
        bpp: mean(|p| p.bpp),
        psnr_db: psnr(mse),
        mse,
        perc_proxy: mean(|p| p.perc_proxy),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityAxis {
    Psnr,
    PercProxy,
}

/// Curve through the per-model means of `groups` (one group per trained
/// operating point).
pub fn curve(groups: &[Vec<RdPoint>], axis: QualityAxis) -> Result<RdCurve> {
    let pts = groups
        .iter()
        .map(|g| {
            let s = summarize(g)?;
            Ok((
                s.bpp,
                match axis {
                    QualityAxis::Psnr => s.psnr_db,
                    QualityAxis::PercProxy => s.perc_proxy,
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    RdCurve::new(pts)
}

pub fn write_rd_points(path: &Path, points: &[RdPoint]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).context(|| format!("creating {}", dir.display()))?;
    }
    let mut f = std::fs::File::create(path).context(|| format!("creating {}", path.display()))?;
    for p in points {
        writeln!(f, "{}", serde_json::to_string(p)?).context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub fn read_rd_points(path: &Path) -> Result<Vec<RdPoint>> {
    let text = std::fs::read_to_string(path).context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_values() {
        assert_eq!(psnr(0.0), PSNR_IDENTICAL);
        assert!((psnr(4.0)).abs() < 1e-12);
        assert!((psnr(0.04) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out/points.jsonl");
        let pts = vec![
            RdPoint {
                image_id: "a".into(),
                variant: Variant::NoDText,
                caption_id: None,
                bpp: 0.3,
                psnr_db: 20.0,
                mse: 0.04,
                perc_proxy: 0.1,
                distributional: None,
            },
            RdPoint {
                image_id: "b".into(),
                variant: Variant::Full,
                caption_id: Some("2".into()),
                bpp: 0.31,
                psnr_db: 21.0,
                mse: 0.03,
                perc_proxy: 0.09,
                distributional: Some(1.5),
            },
        ];
        write_rd_points(&p, &pts).unwrap();
        assert_eq!(read_rd_points(&p).unwrap(), pts);
        assert!((summarize(&pts).unwrap().bpp - 0.305).abs() < 1e-12);
        assert!(summarize(&[]).is_err());
    }
}
