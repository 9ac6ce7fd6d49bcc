//! Stage runner: batching, optimizer steps, logs and checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tsic_grad::{Adam, Tape, Tensor, Var};

use crate::adversarial::{discriminator_loss_var, generator_adv_loss_var, mismatch_records, Discriminator};
use crate::checkpoint::{codec_from_checkpoint, model_checkpoint, write_atomic, Checkpoint};
use crate::data::{load_image, load_manifest, pad_to_multiple, DatasetManifest, TextEmbedding, TextKind, LATENT_STRIDE};
use crate::error::{Error, IoContext, Result};
use crate::model::{Codec, RateMode};
use crate::nn::{Ctx, Mode};
use crate::perceptual::Perceptual;
use crate::synthetic::SyntheticSample;
use crate::text::{text_encoder, TextBackendKind, TextEncoder};

use super::config::{TrainConfig, Variant};
use super::loss::{apply_variant, egp_loss_var, rate_target_controller, LossReport};

pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "log.jsonl";

pub fn checkpoint_name(stage: u8) -> String {
    format!("stage{stage}.ckpt")
}

/// Equal-sized images with every caption already embedded.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    /// `[1, 3, H, W]` each.
    pub images: Vec<Tensor<f32>>,
    pub captions: Vec<Vec<TextEmbedding>>,
}

impl TrainingSet {
    pub fn new(images: Vec<Tensor<f32>>, captions: Vec<Vec<TextEmbedding>>) -> Result<Self> {
        if images.is_empty() || images.len() != captions.len() {
            return Err(Error::Training("training set needs one caption list per image".into()));
        }
        if images[0].shape().len() != 4 || images.iter().any(|i| i.shape() != images[0].shape()) {
            return Err(Error::Training("training images must be [1, 3, H, W] of one size".into()));
        }
        if captions.iter().any(|c| c.is_empty()) {
            return Err(Error::Training("every training image needs a caption".into()));
        }
        Ok(Self { images, captions })
    }

    pub fn from_manifest(manifest: &DatasetManifest, encoder: &dyn TextEncoder) -> Result<Self> {
        let mut images = Vec::with_capacity(manifest.len());
        let mut captions = Vec::with_capacity(manifest.len());
        for (i, r) in manifest.records.iter().enumerate() {
            let (img, _) = pad_to_multiple(&load_image(&manifest.image_path(i))?, LATENT_STRIDE);
            images.push(img.to_batch());
            captions.push(r.captions.iter().map(|c| encoder.embed(c)).collect::<Result<_>>()?);
        }
        Self::new(images, captions)
    }

    pub fn from_samples(samples: &[SyntheticSample], encoder: &dyn TextEncoder) -> Result<Self> {
        let images = samples
            .iter()
            .map(|s| pad_to_multiple(&s.image, LATENT_STRIDE).0.to_batch())
            .collect();
        let captions = samples
            .iter()
            .map(|s| s.captions.iter().map(|c| encoder.embed(c)).collect::<Result<_>>())
            .collect::<Result<_>>()?;
        Self::new(images, captions)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn pixels_per_image(&self) -> usize {
        self.images[0].shape()[2] * self.images[0].shape()[3]
    }
}

#[derive(Serialize, Deserialize)]
struct EpochLog {
    stage: u8,
    epoch: usize,
    steps: usize,
    #[serde(flatten)]
    report: LossReport,
}

pub struct StageOutcome {
    pub codec: Codec<f32>,
    pub disc: Option<Discriminator<f32>>,
    /// Epoch means, oldest first.
    pub history: Vec<LossReport>,
    /// Every optimization step, oldest first.
    pub steps: Vec<LossReport>,
    pub checkpoint: Option<PathBuf>,
}

struct Batch {
    x: Tensor<f32>,
    text_g: Tensor<f32>,
    text_d: Tensor<f32>,
    text_d_mismatch: Option<Tensor<f32>>,
}

fn pick_caption<'a>(data: &'a TrainingSet, record: usize, rng: &mut ChaCha8Rng) -> &'a TextEmbedding {
    let caps = &data.captions[record];
    &caps[rng.gen_range(0..caps.len())]
}

fn make_batch(cfg: &TrainConfig, data: &TrainingSet, idx: &[usize], with_mismatch: bool, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let x = Tensor::stack(&idx.iter().map(|&i| data.images[i].clone()).collect::<Vec<_>>());
    let (mut g, mut d) = (Vec::new(), Vec::new());
    for &i in idx {
        let (tg, td) = apply_variant(cfg.variant, pick_caption(data, i, rng));
        g.push(tg);
        d.push(td);
    }
    let text_d_mismatch = if with_mismatch {
        let others = mismatch_records(idx, data.len(), rng)?;
        let m = others
            .iter()
            .map(|&j| {
                let t = pick_caption(data, j, rng).clone().with_kind(TextKind::Mismatched)?;
                Ok(apply_variant(cfg.variant, &t).1)
            })
            .collect::<Result<Vec<_>>>()?;
        Some(TextEmbedding::stack(&m.iter().collect::<Vec<_>>()))
    } else {
        None
    };
    Ok(Batch {
        x,
        text_g: TextEmbedding::stack(&g.iter().collect::<Vec<_>>()),
        text_d: TextEmbedding::stack(&d.iter().collect::<Vec<_>>()),
        text_d_mismatch,
    })
}

fn finite(v: f64, what: &str, epoch: usize, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Training(format!("{what} became non-finite at epoch {epoch}, step {step}")))
    }
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    data: &'a TrainingSet,
    perceptual: Perceptual,
    codec: Codec<f32>,
    disc: Option<Discriminator<f32>>,
    adam: Adam<f32>,
    adam_d: Adam<f32>,
    rng: ChaCha8Rng,
}

impl Trainer<'_> {
    fn step(&mut self, idx: &[usize], epoch: usize, step: usize) -> Result<LossReport> {
        let cfg = self.cfg;
        let adversarial = self.disc.is_some();
        let b = make_batch(cfg, self.data, idx, adversarial, &mut self.rng)?;
        let n = idx.len();
        let pixels = (n * self.data.pixels_per_image()) as f64;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, Mode::Train, true);
        let x = tape.constant(b.x);
        let f = self.codec.forward(&ctx, x, tape.constant(b.text_g), RateMode::Noise, &mut self.rng);
        let stats = ctx.take_stats();
        let counts: Vec<usize> = f.masks.iter().map(|m| m.value().len()).collect();

        let bits = f.bits_y.sum().add(f.bits_z.sum());
        let bpp = bits.scale(1.0 / pixels as f32);
        let bpp_value = finite(bpp.item() as f64, "rate", epoch, step)?;
        let lambda = rate_target_controller(bpp_value, cfg.target_bpp, cfg.lambda_low, cfg.lambda_high);
        let mse = f.x_hat.sub(x).square().mean();
        let perc = self.perceptual.per_sample(f.x_hat, x).mean();
        let dist = mse.scale(cfg.k_mse as f32).add(perc.scale(cfg.k_perceptual as f32));

        let mut adv_d_value = 0.0;
        let mut adv_g: Option<Var<'_, f32>> = None;
        if let Some(disc) = self.disc.as_mut() {
            let text_d = tape.constant(b.text_d);
            let text_m = tape.constant(b.text_d_mismatch.expect("built with mismatches"));
            let (xh, yh) = (f.x_hat.detach(), f.y_hat.detach());
            let dctx = Ctx::new(&tape, Mode::Train, true);
            let fake = disc.scores(&dctx, xh, yh, text_d);
            let real = disc.scores(&dctx, x, yh, text_d);
            let mism = disc.scores(&dctx, x, yh, text_m);
            let ld = discriminator_loss_var(fake, real, mism);
            adv_d_value = finite(ld.item() as f64, "discriminator loss", epoch, step)?;
            let gd = tape.backward(ld);
            self.adam_d.step(&mut disc.store, &gd, |_| false);
            let gctx = Ctx::new(&tape, Mode::Eval, false);
            adv_g = Some(generator_adv_loss_var(disc.scores(&gctx, f.x_hat, yh, text_d)));
        }
        let loss = egp_loss_var(lambda, bpp, dist, adv_g.map(|a| (a, cfg.beta)));
        let total = finite(loss.item() as f64, "loss", epoch, step)?;
        let grads = tape.backward(loss);
        self.adam.step(&mut self.codec.store, &grads, |_| false);
        self.codec.ssa.update_running(&stats, &counts);
        Ok(LossReport {
            total,
            rate_bits: bpp_value * pixels / n as f64,
            bpp: bpp_value,
            d_mse: mse.item() as f64,
            d_perceptual: perc.item() as f64,
            adv_g: adv_g.map_or(0.0, |a| a.item() as f64),
            adv_d: adv_d_value,
            lambda_effective: lambda,
        })
    }
}

/// Runs one stage. Stage 2 requires `init` (a stage-1 checkpoint) and starts
/// a freshly initialized discriminator. With `out`, appends epoch reports
/// to `log.jsonl` and rewrites the stage checkpoint after every epoch.
pub fn train_stage(cfg: &TrainConfig, data: &TrainingSet, init: Option<&Checkpoint>, out: Option<&Path>) -> Result<StageOutcome> {
    cfg.validate()?;
    let codec = match init {
        Some(ckpt) => {
            let c = codec_from_checkpoint(ckpt)?;
            if c.config != cfg.model {
                return Err(Error::Config("model settings differ from the initial checkpoint".into()));
            }
            c
        }
        None if cfg.stage == 2 => {
            return Err(Error::Training(format!(
                "stage 2 needs the stage-1 checkpoint ({}); set init_checkpoint",
                checkpoint_name(1)
            )))
        }
        None => Codec::new(cfg.model.clone(), cfg.seed),
    };
    let disc = (cfg.stage == 2).then(|| Discriminator::new(cfg.disc.clone(), cfg.model.latent_channels, cfg.seed ^ 0xD15C));
    let mut t = Trainer {
        cfg,
        data,
        perceptual: Perceptual::from_config(cfg.perceptual, cfg.perceptual_weights.as_deref())?,
        codec,
        disc,
        adam: Adam::new(cfg.lr as f32),
        adam_d: Adam::new(cfg.disc_lr as f32),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(cfg.stage as u64)),
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).context(|| format!("creating {}", dir.display()))?;
    }
    let bs = cfg.batch_size();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    let mut checkpoint = None;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut t.rng);
        let mut reports = Vec::new();
        for (step, idx) in order.chunks(bs).enumerate() {
            reports.push(t.step(idx, epoch, step)?);
        }
        let mean = LossReport::mean(&reports);
        log::info!(
            "stage {} epoch {epoch}: loss {:.5} bpp {:.4} mse {:.5}",
            cfg.stage,
            mean.total,
            mean.bpp,
            mean.d_mse
        );
        history.push(mean.clone());
        if let Some(dir) = out {
            let line = serde_json::to_string(&EpochLog {
                stage: cfg.stage,
                epoch,
                steps: reports.len(),
                report: mean,
            })?;
            let log_path = dir.join(LOG_FILE);
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&log_path)
                .context(|| format!("opening {}", log_path.display()))?;
            writeln!(f, "{line}").context(|| format!("writing {}", log_path.display()))?;
            let path = dir.join(checkpoint_name(cfg.stage));
            stage_checkpoint(cfg, &t.codec, t.disc.as_ref(), &history).save(&path)?;
            checkpoint = Some(path);
        }
        steps.extend(reports);
    }
    Ok(StageOutcome {
        codec: t.codec,
        disc: t.disc,
        history,
        steps,
        checkpoint,
    })
}

pub fn stage_checkpoint(cfg: &TrainConfig, codec: &Codec<f32>, disc: Option<&Discriminator<f32>>, history: &[LossReport]) -> Checkpoint {
    model_checkpoint(
        codec,
        disc,
        serde_json::json!({
            "stage": cfg.stage,
            "epochs": history.len(),
            "variant": cfg.variant,
            "target_bpp": cfg.target_bpp,
            "config_hash": cfg.hash(),
            "text_backend": cfg.text_backend,
            "text_seed": cfg.text_seed,
            "history": history,
        }),
    )
}

/// Run directory for a configuration under `runs_root`.
pub fn run_dir(cfg: &TrainConfig, runs_root: &Path) -> PathBuf {
    runs_root.join(format!("{}-stage{}-{}", cfg.variant.name(), cfg.stage, cfg.hash()))
}

/// Loads the manifest and text backend named by `cfg`, freezes the config
/// into a fresh run directory and trains one stage there.
pub fn run_training(cfg: &TrainConfig, runs_root: &Path) -> Result<StageOutcome> {
    let init = match (&cfg.init_checkpoint, cfg.stage) {
        (Some(p), _) if p.exists() => Some(Checkpoint::load(p)?),
        (Some(p), 2) => {
            return Err(Error::Training(format!(
                "stage 2 needs the stage-1 checkpoint, {} does not exist",
                p.display()
            )))
        }
        (Some(p), _) => return Err(Error::Checkpoint(format!("{} does not exist", p.display()))),
        (None, _) => None,
    };
    if cfg.stage == 2 && init.is_none() {
        return Err(Error::Training(format!(
            "stage 2 needs the stage-1 checkpoint ({}); pass --checkpoint or set init_checkpoint",
            checkpoint_name(1)
        )));
    }
    let manifest_path = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Config("training needs a manifest".into()))?;
    let manifest = load_manifest(manifest_path)?;
    let encoder = text_encoder(cfg.text_backend, cfg.text_seed, cfg.text_weights.as_ref())?;
    let data = TrainingSet::from_manifest(&manifest, encoder.as_ref())?;
    let dir = run_dir(cfg, runs_root);
    std::fs::create_dir_all(&dir).context(|| format!("creating {}", dir.display()))?;
    let log_path = dir.join(LOG_FILE);
    if log_path.exists() {
        std::fs::remove_file(&log_path).context(|| format!("clearing {}", log_path.display()))?;
    }
    write_atomic(&dir.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
    train_stage(cfg, &data, init.as_ref(), Some(&dir))
}

/// Codec plus what inference needs to know about how it was trained.
pub struct TrainedModel {
    pub codec: Codec<f32>,
    pub variant: Variant,
    pub stage: u8,
    pub target_bpp: Option<f64>,
    pub text_backend: TextBackendKind,
    pub text_seed: u64,
}

impl TrainedModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = |k: &str| ckpt.metadata.get(k).cloned();
        let variant = match meta("variant") {
            Some(v) => serde_json::from_value(v)?,
            None => Variant::Full,
        };
        let text_backend = match meta("text_backend") {
            Some(v) => serde_json::from_value(v)?,
            None => TextBackendKind::DeterministicStub,
        };
        Ok(Self {
            codec: codec_from_checkpoint(ckpt)?,
            variant,
            stage: meta("stage").and_then(|v| v.as_u64()).unwrap_or(1) as u8,
            target_bpp: meta("target_bpp").and_then(|v| v.as_f64()),
            text_backend,
            text_seed: meta("text_seed").and_then(|v| v.as_u64()).unwrap_or(0),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
