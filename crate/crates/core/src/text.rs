//! Caption embedding backends.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{TextEmbedding, TextKind, TEXT_DIM};
use crate::error::{Error, IoContext, Result};

/// Words that carry no image content and are dropped before embedding.
const STOPWORDS: &[&str] = &[
    "a", "an", "the", "of", "on", "in", "at", "with", "and", "is", "are", "there", "this", "that", "it", "its",
    "to", "has", "shows", "showing", "image", "picture", "photo", "scene",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextBackendKind {
    DeterministicStub,
    PretrainedFrozen,
}

pub trait TextEncoder {
    /// Embeds a caption as a matched text vector.
    fn embed(&self, caption: &str) -> Result<TextEmbedding>;
}

/// Lowercased alphanumeric tokens with stopwords removed.
pub fn tokenize(caption: &str) -> Vec<String> {
    caption
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .collect()
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Scales to unit root-mean-square.
fn rms_normalize(v: &mut [f32]) {
    let rms = (v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
    if rms > 0.0 {
        for x in v {
            *x = (*x as f64 / rms) as f32;
        }
    }
}

/// Offline bag-of-tokens embedding: every token hashes to a fixed
/// pseudo-random direction and the caption is their normalized mean.
#[derive(Clone, Copy, Debug)]
pub struct StubTextEncoder {
    pub seed: u64,
}

impl StubTextEncoder {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn token_vector(&self, token: &str, out: &mut [f32]) {
        let base = fnv1a(token.as_bytes()) ^ splitmix(self.seed);
        for (i, o) in out.iter_mut().enumerate() {
            let r = splitmix(base.wrapping_add(i as u64));
            // top 24 bits → [-1, 1)
            *o += ((r >> 40) as f32 / (1u64 << 23) as f32) - 1.0;
        }
    }
}

impl TextEncoder for StubTextEncoder {
    fn embed(&self, caption: &str) -> Result<TextEmbedding> {
        let tokens = tokenize(caption);
        if tokens.is_empty() {
            return Err(Error::Text(format!("caption {caption:?} has no content tokens")));
        }
        let mut v = vec![0.0f32; TEXT_DIM];
        for t in &tokens {
            self.token_vector(t, &mut v);
        }
        rms_normalize(&mut v);
        TextEmbedding::new(v, TextKind::Matched)
    }
}

/// Frozen lookup-table encoder loaded from a JSON weights file
/// `{"vocab": {token: row}, "table": [[f32; 512], ...]}`.
#[derive(Clone, Debug, Deserialize)]
pub struct PretrainedTextEncoder {
    vocab: HashMap<String, usize>,
    table: Vec<Vec<f32>>,
}

impl PretrainedTextEncoder {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::TextBackendUnavailable(format!(
                "weights not found at {}",
                path.display()
            )));
        }
        let bytes = std::fs::read(path).context(|| format!("reading {}", path.display()))?;
        let enc: Self = serde_json::from_slice(&bytes)?;
        if let Some(row) = enc.table.iter().find(|r| r.len() != TEXT_DIM) {
            return Err(Error::Text(format!("table row has {} components, expected {TEXT_DIM}", row.len())));
        }
        if let Some((t, &i)) = enc.vocab.iter().find(|(_, &i)| i >= enc.table.len()) {
            return Err(Error::Text(format!("token {t:?} points past the table ({i})")));
        }
        Ok(enc)
    }
}

impl TextEncoder for PretrainedTextEncoder {
    fn embed(&self, caption: &str) -> Result<TextEmbedding> {
        let mut v = vec![0.0f32; TEXT_DIM];
        let mut hits = 0;
        for t in tokenize(caption) {
            if let Some(&row) = self.vocab.get(&t) {
                for (o, x) in v.iter_mut().zip(&self.table[row]) {
                    *o += x;
                }
                hits += 1;
            }
        }
        if hits == 0 {
            return Err(Error::Text(format!("caption {caption:?} has no known tokens")));
        }
        rms_normalize(&mut v);
        TextEmbedding::new(v, TextKind::Matched)
    }
}

/// Builds the configured backend.
pub fn text_encoder(kind: TextBackendKind, seed: u64, weights: Option<&PathBuf>) -> Result<Box<dyn TextEncoder + Send + Sync>> {
    match kind {
        TextBackendKind::DeterministicStub => Ok(Box::new(StubTextEncoder::new(seed))),
        TextBackendKind::PretrainedFrozen => {
            let path = weights.ok_or_else(|| {
                Error::TextBackendUnavailable("no text_weights path configured".into())
            })?;
            Ok(Box::new(PretrainedTextEncoder::load(path)?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stub_is_deterministic_and_order_free() {
        let enc = StubTextEncoder::new(7);
        let a = enc.embed("A red circle on the left").unwrap();
        let b = enc.embed("left circle, RED").unwrap();
        assert_eq!(a, b);
        assert_eq!(a, StubTextEncoder::new(7).embed("red circle left").unwrap());
        assert_ne!(a, StubTextEncoder::new(8).embed("red circle left").unwrap());
        assert_ne!(a, enc.embed("blue circle left").unwrap());
    }

    #[test]
    fn stub_has_unit_rms() {
        let v = StubTextEncoder::new(0).embed("green square").unwrap();
        let ms: f64 = v.vector().iter().map(|x| (*x as f64).powi(2)).sum::<f64>() / TEXT_DIM as f64;
        assert!((ms - 1.0).abs() < 1e-5);
    }

    #[test]
    fn empty_caption_is_an_error() {
        let enc = StubTextEncoder::new(0);
        assert!(enc.embed("").is_err());
        assert!(enc.embed("  the a of ").is_err());
    }

    #[test]
    fn missing_pretrained_weights_name_the_fallback() {
        let err = text_encoder(TextBackendKind::PretrainedFrozen, 0, Some(&PathBuf::from("/nonexistent/w.json")))
            .err()
            .unwrap();
        assert!(err.to_string().contains("deterministic_stub"), "{err}");
    }

    #[test]
    fn pretrained_table_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.json");
        let row: Vec<f32> = (0..TEXT_DIM).map(|i| if i == 0 { 2.0 } else { 0.0 }).collect();
        let json = serde_json::json!({"vocab": {"red": 0}, "table": [row]});
        std::fs::write(&p, json.to_string()).unwrap();
        let enc = PretrainedTextEncoder::load(&p).unwrap();
        let e = enc.embed("the red thing").unwrap();
        assert!((e.vector()[0] - (TEXT_DIM as f32).sqrt()).abs() < 1e-3);
        assert!(enc.embed("blue").is_err());
    }
}
