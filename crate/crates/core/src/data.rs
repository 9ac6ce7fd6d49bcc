//! Value types shared across the codec, and dataset manifest ingestion.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tsic_grad::Tensor;

use crate::error::{Error, IoContext, Result};

/// Smallest accepted image side.
pub const MIN_SIDE: usize = 16;
/// Spatial reduction of the analysis transform.
pub const LATENT_STRIDE: usize = 16;
/// Spatial reduction from latent to hyper-latent.
pub const HYPER_STRIDE: usize = 4;
/// Width of side-information text vectors.
pub const TEXT_DIM: usize = 512;

/// RGB image in `[-1, 1]`, stored `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pixels: Tensor<f32>,
}

impl ImageTensor {
    /// Clamps into `[-1, 1]`; rejects non-finite values, wrong channel
    /// counts and sides below [`MIN_SIDE`].
    pub fn new(pixels: Tensor<f32>) -> Result<Self> {
        let shape = pixels.shape().to_vec();
        let (c, h, w) = match shape[..] {
            [c, h, w] => (c, h, w),
            [1, c, h, w] => (c, h, w),
            _ => return Err(Error::Shape(format!("image tensor of shape {shape:?}"))),
        };
        if c != 3 {
            return Err(Error::Channels(c));
        }
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::TooSmall {
                height: h,
                width: w,
                min: MIN_SIDE,
            });
        }
        if pixels.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image"));
        }
        let pixels = pixels.map(|v| v.clamp(-1.0, 1.0)).reshape([3, h, w]);
        Ok(Self { pixels })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn pixels(&self) -> &Tensor<f32> {
        &self.pixels
    }

    /// `[1, 3, H, W]` copy for batched network input.
    pub fn to_batch(&self) -> Tensor<f32> {
        self.pixels.clone().reshape([1, 3, self.height(), self.width()])
    }

    /// Builds an image from one sample of a `[N, 3, H, W]` batch.
    pub fn from_batch(batch: &Tensor<f32>, index: usize) -> Result<Self> {
        Self::new(batch.sample(index))
    }
}

/// 8-bit interleaved RGB pixels as read from disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major, channel-interleaved.
    pub data: Vec<u8>,
}

/// Linear map `0 → -1`, `255 → +1`.
pub fn normalize_image(raw: &RawImage) -> Result<ImageTensor> {
    if raw.channels != 3 {
        return Err(Error::Channels(raw.channels));
    }
    let (h, w) = (raw.height, raw.width);
    if raw.data.len() != h * w * 3 {
        return Err(Error::Shape(format!(
            "{} bytes for a {h}x{w} RGB image",
            raw.data.len()
        )));
    }
    let mut planar = vec![0f32; 3 * h * w];
    for (i, px) in raw.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            planar[c * h * w + i] = 2.0 * px[c] as f32 / 255.0 - 1.0;
        }
    }
    ImageTensor::new(Tensor::new([3, h, w], planar))
}

/// Inverse of [`normalize_image`], rounding to the nearest 8-bit level.
pub fn denormalize_image(img: &ImageTensor) -> RawImage {
    let (h, w) = (img.height(), img.width());
    let p = img.pixels().data();
    let mut data = vec![0u8; h * w * 3];
    for i in 0..h * w {
        for c in 0..3 {
            let v = (p[c * h * w + i] + 1.0) * 127.5;
            data[i * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    RawImage {
        width: w,
        height: h,
        channels: 3,
        data,
    }
}

pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|e| Error::Evaluation(format!("cannot read image {}: {e}", path.display())))?
        .to_rgb8();
    normalize_image(&RawImage {
        width: img.width() as usize,
        height: img.height() as usize,
        channels: 3,
        data: img.into_raw(),
    })
}

pub fn save_image(img: &ImageTensor, path: &Path) -> Result<()> {
    let raw = denormalize_image(img);
    let buf = image::RgbImage::from_raw(raw.width as u32, raw.height as u32, raw.data)
        .expect("buffer size matches dimensions");
    buf.save(path)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OriginalDims {
    pub height: usize,
    pub width: usize,
}

/// Reflect-pads on the bottom/right to the next multiple of `multiple`.
pub fn pad_to_multiple(img: &ImageTensor, multiple: usize) -> (ImageTensor, OriginalDims) {
    assert!(multiple >= 1, "multiple must be positive");
    let (h, w) = (img.height(), img.width());
    let dims = OriginalDims {
        height: h,
        width: w,
    };
    let (ph, pw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
    if (ph, pw) == (h, w) {
        return (img.clone(), dims);
    }
    let src = img.pixels().data();
    let reflect = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
    let mut out = vec![0f32; 3 * ph * pw];
    for c in 0..3 {
        for y in 0..ph {
            let sy = reflect(y, h);
            for x in 0..pw {
                out[(c * ph + y) * pw + x] = src[(c * h + sy) * w + reflect(x, w)];
            }
        }
    }
    let padded = ImageTensor::new(Tensor::new([3, ph, pw], out)).expect("padding keeps image valid");
    (padded, dims)
}

/// Keeps the top-left `dims` region.
pub fn crop_to(img: &ImageTensor, dims: OriginalDims) -> Result<ImageTensor> {
    let (h, w) = (img.height(), img.width());
    if dims.height > h || dims.width > w {
        return Err(Error::Shape(format!(
            "cannot crop {h}x{w} to {}x{}",
            dims.height, dims.width
        )));
    }
    let src = img.pixels().data();
    let mut out = Vec::with_capacity(3 * dims.height * dims.width);
    for c in 0..3 {
        for y in 0..dims.height {
            let row = (c * h + y) * w;
            out.extend_from_slice(&src[row..row + dims.width]);
        }
    }
    ImageTensor::new(Tensor::new([3, dims.height, dims.width], out))
}

/// Main latent `y` / `ŷ`, stored `[C, H', W']`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub values: Tensor<f32>,
    pub quantized: bool,
}

/// Hyper-latent `z` / `ẑ`, stored `[C_z, H'', W'']`.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperLatent {
    pub values: Tensor<f32>,
    pub quantized: bool,
}

impl LatentCode {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }
}

impl HyperLatent {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Latent grid side for an image side (default 4-stage transform).
pub fn latent_side(image_side: usize) -> usize {
    image_side.div_ceil(LATENT_STRIDE)
}

/// Hyper-latent grid side for a latent side.
pub fn hyper_side(latent_side: usize) -> usize {
    latent_side.div_ceil(HYPER_STRIDE)
}

/// Where a text vector came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextKind {
    Matched,
    Mismatched,
    Zero,
}

/// 512-d side-information vector.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    vector: Vec<f32>,
    kind: TextKind,
}

impl TextEmbedding {
    pub fn new(vector: Vec<f32>, kind: TextKind) -> Result<Self> {
        if vector.len() != TEXT_DIM {
            return Err(Error::Text(format!(
                "embedding has {} components, expected {TEXT_DIM}",
                vector.len()
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("text embedding"));
        }
        if kind == TextKind::Zero && vector.iter().any(|&v| v != 0.0) {
            return Err(Error::Text("zero-kind embedding with nonzero components".into()));
        }
        Ok(Self { vector, kind })
    }

    pub fn zero() -> Self {
        Self {
            vector: vec![0.0; TEXT_DIM],
            kind: TextKind::Zero,
        }
    }

    pub fn vector(&self) -> &[f32] {
        &self.vector
    }

    pub fn kind(&self) -> TextKind {
        self.kind
    }

    /// Same vector relabelled (e.g. a matched caption reused as a mismatch).
    pub fn with_kind(mut self, kind: TextKind) -> Result<Self> {
        if kind == TextKind::Zero {
            return Ok(Self::zero());
        }
        self.kind = kind;
        Ok(self)
    }

    /// `[N, 512]` batch.
    pub fn stack(texts: &[&TextEmbedding]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(texts.len() * TEXT_DIM);
        for t in texts {
            data.extend_from_slice(&t.vector);
        }
        Tensor::new([texts.len(), TEXT_DIM], data)
    }
}

/// One line of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: String,
    pub captions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    /// Directory relative image paths are resolved against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_path(&self, index: usize) -> PathBuf {
        let p = Path::new(&self.records[index].image);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

/// Reads a line-delimited JSON manifest (`{"image": ..., "captions": [...]}`
/// per line). Blank lines are skipped; line numbers in errors are 1-based.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = fs::File::open(path).context(|| format!("opening manifest {}", path.display()))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.context(|| format!("reading manifest {}", path.display()))?;
        let lineno = i + 1;
        let err = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| err(format!("malformed record: {e}")))?;
        if rec.captions.is_empty() {
            return Err(err("record has no captions".into()));
        }
        let img = Path::new(&rec.image);
        let resolved = if img.is_absolute() {
            img.to_path_buf()
        } else {
            base_dir.join(img)
        };
        if !resolved.exists() {
            return Err(err(format!("image {} does not exist", resolved.display())));
        }
        records.push(rec);
    }
    Ok(DatasetManifest { records, base_dir })
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).context(|| format!("creating {}", path.display()))?;
    f.write_all(&out)
        .context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw_const(h: usize, w: usize, v: u8) -> RawImage {
        RawImage {
            width: w,
            height: h,
            channels: 3,
            data: vec![v; h * w * 3],
        }
    }

    #[test]
    fn normalize_endpoints_and_midpoint() {
        let lo = normalize_image(&raw_const(16, 16, 0)).unwrap();
        assert!(lo.pixels().data().iter().all(|&v| v == -1.0));
        let hi = normalize_image(&raw_const(16, 16, 255)).unwrap();
        assert!(hi.pixels().data().iter().all(|&v| v == 1.0));
        let mid = normalize_image(&raw_const(16, 16, 128)).unwrap();
        let want = 2.0 * 128.0 / 255.0 - 1.0;
        assert!((mid.pixels().data()[0] - want).abs() < 1e-7);
        assert!((mid.pixels().data()[0] - 0.003_92).abs() < 1e-5);
    }

    #[test]
    fn normalize_rejects_wrong_channel_count() {
        let raw = RawImage {
            width: 16,
            height: 16,
            channels: 4,
            data: vec![0; 16 * 16 * 4],
        };
        assert!(matches!(normalize_image(&raw), Err(Error::Channels(4))));
    }

    #[test]
    fn normalize_then_denormalize_is_identity_on_all_levels() {
        let data: Vec<u8> = (0..16 * 16 * 3).map(|i| (i % 256) as u8).collect();
        let raw = RawImage {
            width: 16,
            height: 16,
            channels: 3,
            data,
        };
        assert_eq!(denormalize_image(&normalize_image(&raw).unwrap()), raw);
    }

    #[test]
    fn pad_aligned_image_is_unchanged() {
        let img = normalize_image(&raw_const(256, 256, 7)).unwrap();
        let (p, dims) = pad_to_multiple(&img, 16);
        assert_eq!(p, img);
        assert_eq!((dims.height, dims.width), (256, 256));
    }

    #[test]
    fn pad_250_reflects_six_rows_and_columns() {
        let t = Tensor::from_fn([3, 250, 250], |i| ((i % 250) as f32 / 250.0) - 0.5);
        let img = ImageTensor::new(t).unwrap();
        let (p, dims) = pad_to_multiple(&img, 16);
        assert_eq!((p.height(), p.width()), (256, 256));
        assert_eq!((dims.height, dims.width), (250, 250));
        let px = |im: &ImageTensor, y: usize, x: usize| im.pixels().data()[y * im.width() + x];
        // column 250 mirrors column 248, column 255 mirrors 243
        assert_eq!(px(&p, 3, 250), px(&img, 3, 248));
        assert_eq!(px(&p, 3, 255), px(&img, 3, 243));
        assert_eq!(px(&p, 252, 10), px(&img, 246, 10));
    }

    #[test]
    fn undersized_image_is_rejected() {
        let t = Tensor::<f32>::zeros([3, 1, 40]);
        assert!(matches!(ImageTensor::new(t), Err(Error::TooSmall { .. })));
    }

    #[test]
    fn zero_text_invariants() {
        let z = TextEmbedding::zero();
        assert_eq!(z.vector().len(), TEXT_DIM);
        assert!(TextEmbedding::new(vec![1.0; TEXT_DIM], TextKind::Zero).is_err());
        assert!(TextEmbedding::new(vec![0.0; 511], TextKind::Matched).is_err());
    }

    #[test]
    fn manifest_rejects_empty_captions_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.png"), b"").unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(
            &path,
            "{\"image\":\"a.png\",\"captions\":[\"x\"]}\n{\"image\":\"a.png\",\"captions\":[]}\n",
        )
        .unwrap();
        match load_manifest(&path) {
            Err(Error::Manifest { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn manifest_malformed_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(&path, "\n\nnot json\n").unwrap();
        match load_manifest(&path) {
            Err(Error::Manifest { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
