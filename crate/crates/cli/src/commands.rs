use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use tsic_core::checkpoint::write_atomic;
use tsic_core::data::{load_image, load_manifest, save_image, TextEmbedding};
use tsic_core::entropy::{compress as encode, decompress as decode, Bitstream};
use tsic_core::error::{Error, IoContext, Result};
use tsic_core::evaluation::{
    bd_rate, curve, emit_decoded_maps, summarize, write_rd_points, CaptionChoice, EvalImage, Evaluator, QualityAxis,
    RdPoint,
};
use tsic_core::perceptual::Perceptual;
use tsic_core::text::{text_encoder, TextBackendKind, TextEncoder};
use tsic_core::training::{checkpoint_name, inference_text, run_dir, run_training, TrainConfig, TrainedModel, Variant};

use crate::{AxisArg, BackendArg, Common, StageArg, TextChoice, VariantArg};

fn backend(b: BackendArg) -> TextBackendKind {
    match b {
        BackendArg::PretrainedFrozen => TextBackendKind::PretrainedFrozen,
        BackendArg::DeterministicStub => TextBackendKind::DeterministicStub,
    }
}

fn variant(v: VariantArg) -> Variant {
    match v {
        VariantArg::Full => Variant::Full,
        VariantArg::NoGText => Variant::NoGText,
        VariantArg::NoDText => Variant::NoDText,
        VariantArg::NoText => Variant::NoText,
    }
}

fn quoted(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn path_str(p: &Path) -> String {
    quoted(&p.to_string_lossy())
}

/// Frozen description of a non-training run; its digest names the run directory.
#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    config: Option<&'a Path>,
    overrides: &'a [String],
    seed: Option<u64>,
    deterministic: bool,
    inputs: serde_json::Value,
}

/// TOML has no null; absent options are left out.
fn drop_nulls(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(m) => {
            m.retain(|_, x| !x.is_null());
            m.values_mut().for_each(drop_nulls);
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(drop_nulls),
        _ => {}
    }
}

fn prepare_run_dir(runs: &Path, record: &RunRecord) -> Result<PathBuf> {
    let mut value = serde_json::to_value(record)?;
    drop_nulls(&mut value);
    let toml_text = toml::to_string(&value)
        .map_err(|e| Error::Config(format!("freezing run config: {e}")))?;
    let digest = Sha256::digest(toml_text.as_bytes());
    let hash: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
    let dir = runs.join(format!("{}-{hash}", record.command));
    std::fs::create_dir_all(&dir).context(|| format!("creating {}", dir.display()))?;
    write_atomic(&dir.join("config.toml"), toml_text.as_bytes())?;
    Ok(dir)
}

fn encoder_for(common: &Common, model: &TrainedModel) -> Result<Box<dyn TextEncoder + Send + Sync>> {
    let kind = common.text_backend.map(backend).unwrap_or(model.text_backend);
    text_encoder(kind, model.text_seed, common.text_weights.as_ref())
}

fn decode_text(common: &Common, model: &TrainedModel, choice: &TextChoice) -> Result<TextEmbedding> {
    match &choice.caption {
        Some(c) if !choice.no_text => Ok(inference_text(model.variant, &encoder_for(common, model)?.embed(c)?)),
        _ => Ok(TextEmbedding::zero()),
    }
}

fn perceptual(common: &Common) -> Result<Perceptual> {
    let cfg = TrainConfig::resolve(common.config.as_deref(), &common.set)?;
    Perceptual::from_config(cfg.perceptual, cfg.perceptual_weights.as_deref())
}

pub fn train(
    runs: &Path,
    common: &Common,
    stage: StageArg,
    target_bpp: Option<&str>,
    variant_flag: Option<VariantArg>,
    checkpoint: Option<PathBuf>,
    manifest: Option<PathBuf>,
) -> Result<()> {
    let mut overrides = common.set.clone();
    if let Some(t) = target_bpp {
        overrides.push(format!("target_bpp={t}"));
    }
    if let Some(v) = variant_flag {
        overrides.push(format!("variant={}", quoted(variant(v).name())));
    }
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
    }
    if common.deterministic {
        overrides.push("deterministic=true".into());
    }
    if let Some(b) = common.text_backend {
        let kind = serde_json::to_value(backend(b))?;
        overrides.push(format!("text_backend={}", quoted(kind.as_str().unwrap_or_default())));
    }
    if let Some(w) = &common.text_weights {
        overrides.push(format!("text_weights={}", path_str(w)));
    }
    if let Some(m) = &manifest {
        overrides.push(format!("manifest={}", path_str(m)));
    }
    if let Some(c) = &checkpoint {
        overrides.push(format!("init_checkpoint={}", path_str(c)));
    }
    let stages: &[u8] = match stage {
        StageArg::One => &[1],
        StageArg::Two => &[2],
        StageArg::All => &[1, 2],
    };
    let base = TrainConfig::resolve(common.config.as_deref(), &overrides)?;
    let mut previous: Option<PathBuf> = None;
    for &s in stages {
        let mut cfg = base.clone();
        cfg.stage = s;
        if let Some(p) = previous.take() {
            cfg.init_checkpoint = Some(p);
        }
        let out = run_training(&cfg, runs)?;
        let dir = run_dir(&cfg, runs);
        let last = out.history.last().cloned().unwrap_or_default();
        println!(
            "stage {s}: {} epochs, final loss {:.5}, bpp {:.4}, run dir {}",
            out.history.len(),
            last.total,
            last.bpp,
            dir.display()
        );
        previous = Some(dir.join(checkpoint_name(s)));
    }
    Ok(())
}

pub fn synth(count: usize, size: usize, seed: u64, out: &Path) -> Result<()> {
    if count == 0 || size == 0 {
        return Err(Error::Config("synth needs a positive --count and --size".into()));
    }
    let manifest = tsic_core::synthetic::write_dataset(out, count, size, seed)?;
    println!("{count} images, manifest {}", manifest.display());
    Ok(())
}

pub fn compress(_common: &Common, input: &Path, checkpoint: &Path, output: &Path) -> Result<()> {
    let model = TrainedModel::load(checkpoint)?;
    let img = load_image(input)?;
    let (stream, _) = encode(&model.codec, &img)?;
    let bytes = stream.to_bytes();
    write_atomic(output, &bytes)?;
    let bpp = 8.0 * bytes.len() as f64 / (img.height() * img.width()) as f64;
    println!("{}: {} bytes, {bpp:.4} bpp", output.display(), bytes.len());
    Ok(())
}

pub fn decompress(
    common: &Common,
    input: &Path,
    checkpoint: &Path,
    text: &TextChoice,
    output: &Path,
    maps: Option<&Path>,
) -> Result<()> {
    let model = TrainedModel::load(checkpoint)?;
    let bytes = std::fs::read(input).context(|| format!("reading {}", input.display()))?;
    let decoded = decode(&model.codec, &Bitstream::from_bytes(&bytes)?)?;
    let t = decode_text(common, &model, text)?;
    let img = decoded.reconstruct(&model.codec, &t)?;
    save_image(&img, output)?;
    println!("{}: {}x{}", output.display(), img.width(), img.height());
    if let Some(dir) = maps {
        let m = emit_decoded_maps(&model.codec, &decoded, &t, dir)?;
        println!("maps: {} masks and {} in {}", m.masks.len(), m.bit_map.display(), dir.display());
    }
    Ok(())
}

fn eval_images(manifest: &Path, limit: Option<usize>) -> Result<Vec<EvalImage>> {
    let m = load_manifest(manifest)?;
    let n = limit.unwrap_or(m.len()).min(m.len());
    (0..n)
        .map(|i| {
            Ok(EvalImage {
                id: m.records[i].image.clone(),
                image: load_image(&m.image_path(i))?,
                captions: m.records[i].captions.clone(),
            })
        })
        .collect()
}

fn print_summary(label: &str, points: &[RdPoint]) -> Result<()> {
    let s = summarize(points)?;
    println!(
        "{label:<14} bpp {:>8.4}  psnr {:>7.3} dB  perc {:>8.5}",
        s.bpp, s.psnr_db, s.perc_proxy
    );
    Ok(())
}

pub fn eval(
    runs: &Path,
    common: &Common,
    checkpoint: &Path,
    manifest: &Path,
    caption: Option<String>,
    no_text: bool,
    limit: Option<usize>,
) -> Result<()> {
    let record = RunRecord {
        command: "eval",
        config: common.config.as_deref(),
        overrides: &common.set,
        seed: common.seed,
        deterministic: common.deterministic,
        inputs: serde_json::json!({
            "checkpoint": checkpoint, "manifest": manifest, "caption": caption, "no_text": no_text, "limit": limit,
        }),
    };
    let images = eval_images(manifest, limit)?;
    if images.is_empty() {
        return Err(Error::Evaluation(format!("{} lists no images", manifest.display())));
    }
    let model = TrainedModel::load(checkpoint)?;
    let encoder = encoder_for(common, &model)?;
    let perc = perceptual(common)?;
    let choice = match (caption, no_text) {
        (_, true) => CaptionChoice::NoText,
        (Some(c), false) => CaptionChoice::Fixed(c),
        (None, false) => CaptionChoice::Index(0),
    };
    let ev = Evaluator {
        codec: &model.codec,
        variant: model.variant,
        encoder: encoder.as_ref(),
        perceptual: &perc,
        distributional: None,
    };
    let points = ev.evaluate(&images, &choice)?;
    let dir = prepare_run_dir(runs, &record)?;
    write_rd_points(&dir.join("rd_points.jsonl"), &points)?;
    print_summary(model.variant.name(), &points)?;
    println!("records: {}", dir.join("rd_points.jsonl").display());
    Ok(())
}

pub fn ablate(
    runs: &Path,
    common: &Common,
    checkpoints: &[PathBuf],
    manifest: &Path,
    axis: AxisArg,
    limit: Option<usize>,
) -> Result<()> {
    let mut models: BTreeMap<&'static str, Vec<(PathBuf, TrainedModel)>> = BTreeMap::new();
    for p in checkpoints {
        let m = TrainedModel::load(p)?;
        models.entry(m.variant.name()).or_default().push((p.clone(), m));
    }
    let missing: Vec<&str> = Variant::ALL
        .iter()
        .map(|v| v.name())
        .filter(|v| models.get(v).map_or(0, |m| m.len()) < 2)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Evaluation(format!(
            "ablation needs at least two checkpoints for each variant; missing: {}",
            missing.join(", ")
        )));
    }
    let record = RunRecord {
        command: "ablate",
        config: common.config.as_deref(),
        overrides: &common.set,
        seed: common.seed,
        deterministic: common.deterministic,
        inputs: serde_json::json!({"checkpoints": checkpoints, "manifest": manifest, "limit": limit}),
    };
    let images = eval_images(manifest, limit)?;
    let perc = perceptual(common)?;
    let quality = match axis {
        AxisArg::PercProxy => QualityAxis::PercProxy,
        AxisArg::Psnr => QualityAxis::Psnr,
    };
    let mut all_points = Vec::new();
    let mut curves = BTreeMap::new();
    for v in Variant::ALL {
        let mut groups = Vec::new();
        for (_, m) in &models[v.name()] {
            let encoder = encoder_for(common, m)?;
            let ev = Evaluator {
                codec: &m.codec,
                variant: m.variant,
                encoder: encoder.as_ref(),
                perceptual: &perc,
                distributional: None,
            };
            let pts = ev.evaluate(&images, &CaptionChoice::Index(0))?;
            print_summary(&format!("{} @{:.2}", v.name(), m.target_bpp.unwrap_or(f64::NAN)), &pts)?;
            all_points.extend(pts.iter().cloned());
            groups.push(pts);
        }
        curves.insert(v.name(), curve(&groups, quality)?);
    }
    let mut rows = Vec::new();
    println!("variant        BD-rate vs full");
    for v in [Variant::NoGText, Variant::NoDText, Variant::NoText] {
        let bd = bd_rate(&curves["full"], &curves[v.name()])?;
        println!("{:<14} {bd:+.2}%", v.name());
        rows.push(serde_json::json!({"variant": v, "bd_rate_percent": bd}));
    }
    let dir = prepare_run_dir(runs, &record)?;
    write_rd_points(&dir.join("rd_points.jsonl"), &all_points)?;
    write_atomic(&dir.join("ablation.json"), serde_json::to_string_pretty(&rows)?.as_bytes())?;
    Ok(())
}

pub fn stability(runs: &Path, common: &Common, checkpoint: &Path, manifest: &Path, limit: Option<usize>) -> Result<()> {
    const MATCHED: usize = 5;
    let images = eval_images(manifest, limit)?;
    if images.len() < 2 {
        return Err(Error::Evaluation("stability needs at least two images".into()));
    }
    if let Some(img) = images.iter().find(|i| i.captions.len() < MATCHED) {
        return Err(Error::Evaluation(format!("{} has fewer than {MATCHED} captions", img.id)));
    }
    let model = TrainedModel::load(checkpoint)?;
    let encoder = encoder_for(common, &model)?;
    let perc = perceptual(common)?;
    let ev = Evaluator {
        codec: &model.codec,
        variant: model.variant,
        encoder: encoder.as_ref(),
        perceptual: &perc,
        distributional: None,
    };
    let record = RunRecord {
        command: "stability",
        config: common.config.as_deref(),
        overrides: &common.set,
        seed: common.seed,
        deterministic: common.deterministic,
        inputs: serde_json::json!({"checkpoint": checkpoint, "manifest": manifest, "limit": limit}),
    };
    let mut rows: Vec<Vec<RdPoint>> = vec![Vec::new(); MATCHED + 1];
    for (i, img) in images.iter().enumerate() {
        let other = &images[(i + 1) % images.len()];
        let mut caps: Vec<(String, String)> = (0..MATCHED)
            .map(|k| (format!("matched_{k}"), img.captions[k].clone()))
            .collect();
        caps.push(("mismatched".into(), other.captions[0].clone()));
        for (row, p) in rows.iter_mut().zip(ev.stability(&img.id, &img.image, &caps)?) {
            row.push(p);
        }
    }
    for (k, row) in rows.iter().enumerate() {
        let label = if k < MATCHED { format!("matched_{k}") } else { "mismatched".into() };
        print_summary(&label, row)?;
    }
    let dir = prepare_run_dir(runs, &record)?;
    write_rd_points(&dir.join("rd_points.jsonl"), &rows.concat())?;
    Ok(())
}

pub fn emit_maps(common: &Common, input: &Path, checkpoint: &Path, text: &TextChoice, out: &Path) -> Result<()> {
    let model = TrainedModel::load(checkpoint)?;
    let img = load_image(input)?;
    let t = decode_text(common, &model, text)?;
    let m = tsic_core::evaluation::emit_maps(&model.codec, &img, &t, out)?;
    for p in &m.masks {
        println!("{}", p.display());
    }
    println!("{}", m.bit_map.display());
    Ok(())
}
