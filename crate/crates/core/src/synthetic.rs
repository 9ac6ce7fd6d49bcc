//! Procedural image–caption pairs: one textured shape on a patterned
//! background, described by five caption templates.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsic_grad::Tensor;

use crate::data::{save_image, write_manifest, ImageTensor, ManifestRecord};
use crate::error::{IoContext, Result};

const OBJECT_COLORS: &[(&str, [f32; 3])] = &[
    ("red", [0.85, 0.10, 0.10]),
    ("green", [0.10, 0.70, 0.20]),
    ("blue", [0.15, 0.25, 0.90]),
    ("yellow", [0.95, 0.85, 0.10]),
    ("magenta", [0.85, 0.15, 0.75]),
    ("cyan", [0.10, 0.80, 0.85]),
];
const BACKGROUND_COLORS: &[(&str, [f32; 3])] = &[
    ("black", [0.05, 0.05, 0.05]),
    ("gray", [0.50, 0.50, 0.50]),
    ("white", [0.95, 0.95, 0.95]),
    ("brown", [0.45, 0.30, 0.15]),
];
const SHAPES: &[&str] = &["circle", "square", "triangle", "diamond"];
const TEXTURES: &[&str] = &["solid", "dotted", "striped"];
const PATTERNS: &[&str] = &["plain", "checkered", "banded"];
const POSITIONS: &[(&str, [f32; 2])] = &[
    ("top left", [0.28, 0.28]),
    ("top right", [0.28, 0.72]),
    ("bottom left", [0.72, 0.28]),
    ("bottom right", [0.72, 0.72]),
    ("center", [0.5, 0.5]),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Attributes {
    pub color: usize,
    pub shape: usize,
    pub texture: usize,
    pub position: usize,
    pub background: usize,
    pub pattern: usize,
}

impl Attributes {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        Self {
            color: rng.gen_range(0..OBJECT_COLORS.len()),
            shape: rng.gen_range(0..SHAPES.len()),
            texture: rng.gen_range(0..TEXTURES.len()),
            position: rng.gen_range(0..POSITIONS.len()),
            background: rng.gen_range(0..BACKGROUND_COLORS.len()),
            pattern: rng.gen_range(0..PATTERNS.len()),
        }
    }

    /// Five paraphrases sharing the same content words.
    pub fn captions(&self) -> Vec<String> {
        let c = OBJECT_COLORS[self.color].0;
        let s = SHAPES[self.shape];
        let t = TEXTURES[self.texture];
        let p = POSITIONS[self.position].0;
        let bc = BACKGROUND_COLORS[self.background].0;
        let bp = PATTERNS[self.pattern];
        vec![
            format!("a {t} {c} {s} at the {p} on a {bc} {bp} background"),
            format!("{c} {s} with {t} fill, {p}, over a {bp} {bc} background"),
            format!("the {s} is {c} and {t}; the background is {bc} and {bp}; {p}"),
            format!("{bc} {bp} background with a {c} {t} {s} in the {p}"),
            format!("picture of a {t} {s} in {c}, {p} area, {bp} {bc} background"),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub image: ImageTensor,
    pub captions: Vec<String>,
    pub attributes: Attributes,
}

fn inside(shape: usize, dy: f32, dx: f32, r: f32) -> bool {
    match SHAPES[shape] {
        "circle" => dy * dy + dx * dx <= r * r,
        "square" => dy.abs() <= 0.8 * r && dx.abs() <= 0.8 * r,
        "triangle" => dy <= 0.7 * r && dy >= -r && dx.abs() <= (dy + r) * 0.6,
        _ => dy.abs() + dx.abs() <= r,
    }
}

fn render(a: &Attributes, side: usize, rng: &mut ChaCha8Rng) -> ImageTensor {
    let jitter = |rng: &mut ChaCha8Rng, c: [f32; 3]| c.map(|v| (v + rng.gen_range(-0.04..0.04f32)).clamp(0.0, 1.0));
    let bg = jitter(rng, BACKGROUND_COLORS[a.background].1);
    let fg = jitter(rng, OBJECT_COLORS[a.color].1);
    let sidef = side as f32;
    let [py, px] = POSITIONS[a.position].1;
    let cy = py * sidef + rng.gen_range(-0.04..0.04f32) * sidef;
    let cx = px * sidef + rng.gen_range(-0.04..0.04f32) * sidef;
    let r = rng.gen_range(0.16..0.22f32) * sidef;
    let cell = (side / 8).max(2);
    let mut data = vec![0.0f32; 3 * side * side];
    for y in 0..side {
        for x in 0..side {
            let mut px_col = bg;
            let shade = match PATTERNS[a.pattern] {
                "checkered" if ((y / cell) + (x / cell)) % 2 == 1 => 0.55,
                "banded" if (y / (cell / 2).max(1)) % 2 == 1 => 0.6,
                _ => 1.0,
            };
            px_col = px_col.map(|v| if shade < 1.0 { v * shade + (1.0 - shade) * 0.25 } else { v });
            let (dy, dx) = (y as f32 + 0.5 - cy, x as f32 + 0.5 - cx);
            if inside(a.shape, dy, dx, r) {
                px_col = fg;
                let mark = match TEXTURES[a.texture] {
                    "dotted" => y % 4 < 2 && x % 4 < 2,
                    "striped" => (x + y) % 6 < 3,
                    _ => false,
                };
                if mark {
                    px_col = fg.map(|v| v * 0.35);
                }
            }
            for c in 0..3 {
                data[(c * side + y) * side + x] = px_col[c] * 2.0 - 1.0;
            }
        }
    }
    ImageTensor::new(Tensor::new([3, side, side], data)).expect("rendered pixels are in range")
}

/// `count` samples of `side × side` pixels, deterministic in `seed`.
pub fn generate(count: usize, side: usize, seed: u64) -> Vec<SyntheticSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let attributes = Attributes::random(&mut rng);
            let image = render(&attributes, side, &mut rng);
            SyntheticSample {
                captions: attributes.captions(),
                image,
                attributes,
            }
        })
        .collect()
}

/// A caption describing a different image: one attribute group changed.
pub fn contradicting_caption(a: &Attributes, rng: &mut ChaCha8Rng) -> String {
    let mut b = a.clone();
    while b == *a {
        b.color = *(0..OBJECT_COLORS.len()).collect::<Vec<_>>().choose(rng).expect("colors");
        b.texture = *(0..TEXTURES.len()).collect::<Vec<_>>().choose(rng).expect("textures");
        b.background = *(0..BACKGROUND_COLORS.len()).collect::<Vec<_>>().choose(rng).expect("bgs");
    }
    b.captions().swap_remove(0)
}

/// Writes PNGs plus `manifest.jsonl` into `dir`; returns the manifest path.
pub fn write_dataset(dir: &Path, count: usize, side: usize, seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).context(|| format!("creating {}", dir.display()))?;
    let mut records = Vec::with_capacity(count);
    for (i, s) in generate(count, side, seed).into_iter().enumerate() {
        let name = format!("img_{i:04}.png");
        save_image(&s.image, &dir.join(&name))?;
        records.push(ManifestRecord {
            image: name,
            captions: s.captions,
        });
    }
    let path = dir.join("manifest.jsonl");
    write_manifest(&path, &records)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_manifest;
    use crate::text::{StubTextEncoder, TextEncoder};

    #[test]
    fn generation_is_deterministic() {
        let a = generate(5, 32, 9);
        let b = generate(5, 32, 9);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.captions, y.captions);
        }
        assert_ne!(generate(1, 32, 10)[0].image, a[0].image);
    }

    #[test]
    fn captions_embed_without_error_and_share_content() {
        let enc = StubTextEncoder::new(0);
        for s in generate(20, 32, 1) {
            assert_eq!(s.captions.len(), 5);
            for c in &s.captions {
                enc.embed(c).unwrap();
                assert!(c.contains(SHAPES[s.attributes.shape]));
                assert!(c.contains(OBJECT_COLORS[s.attributes.color].0));
            }
        }
    }

    #[test]
    fn contradiction_differs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = &generate(1, 32, 2)[0];
        assert_ne!(contradicting_caption(&s.attributes, &mut rng), s.captions[0]);
    }

    #[test]
    fn written_manifest_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(dir.path(), 200, 16, 3).unwrap();
        let man = load_manifest(&m).unwrap();
        assert_eq!(man.len(), 200);
        let samples = generate(200, 16, 3);
        for (r, s) in man.records.iter().zip(&samples) {
            assert_eq!(r.captions, s.captions);
        }
    }
}
