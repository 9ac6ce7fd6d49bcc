use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsic_grad::Tensor;

use tsic_core::adversarial::DiscConfig;
use tsic_core::data::TextEmbedding;
use tsic_core::model::{Codec, ModelConfig, RateMode};
use tsic_core::nn::{Ctx, Mode};
use tsic_core::synthetic::{generate, write_dataset};
use tsic_core::text::{PretrainedTextEncoder, StubTextEncoder, TextBackendKind, TextEncoder};
use tsic_core::training::{
    apply_variant, checkpoint_name, run_training, stage_checkpoint, train_stage, TrainConfig, TrainingSet, Variant,
};

fn tiny_config() -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            latent_channels: 8,
            hyper_channels: 4,
            encoder_widths: [4, 6, 6, 8],
            generator_width: 6,
            res_blocks: 2,
            up_widths: [6, 6, 4, 4],
            mlp_hidden: 8,
        },
        disc: DiscConfig {
            disc_widths: [4, 6, 6],
            disc_latent_proj: 4,
            disc_fusion_width: 6,
        },
        epochs: 2,
        batch_size_stage1: 4,
        batch_size_stage2: 4,
        lr: 1e-3,
        disc_lr: 1e-3,
        ..TrainConfig::default()
    }
}

fn tiny_data() -> TrainingSet {
    TrainingSet::from_samples(&generate(12, 32, 1), &StubTextEncoder::new(0)).unwrap()
}

fn assert_consistent(reports: &[tsic_core::training::LossReport], cfg: &TrainConfig) {
    assert!(!reports.is_empty());
    for (i, r) in reports.iter().enumerate() {
        let again = r.recompute_total(cfg.k_mse, cfg.k_perceptual, cfg.beta);
        let rel = (again - r.total).abs() / r.total.abs();
        assert!(rel <= 1e-6, "step {i}: logged {} vs recomputed {again}", r.total);
    }
}

#[test]
fn loss_reports_are_self_consistent_every_step() {
    let data = tiny_data();
    let cfg = tiny_config();
    let s1 = train_stage(&cfg, &data, None, None).unwrap();
    assert_eq!(s1.steps.len(), 2 * 3);
    assert_consistent(&s1.steps, &cfg);
    assert!(s1.steps.iter().all(|r| r.adv_g == 0.0 && r.adv_d == 0.0));

    let init = stage_checkpoint(&cfg, &s1.codec, None, &s1.history);
    let cfg2 = TrainConfig { stage: 2, ..cfg };
    let s2 = train_stage(&cfg2, &data, Some(&init), None).unwrap();
    assert_consistent(&s2.steps, &cfg2);
    assert!(s2.steps.iter().all(|r| r.adv_d > 0.0 && r.adv_g < 0.0));
}

#[test]
fn stage_one_ignores_beta() {
    let data = tiny_data();
    let a = train_stage(&tiny_config(), &data, None, None).unwrap();
    let b = train_stage(&TrainConfig { beta: 5.0, ..tiny_config() }, &data, None, None).unwrap();
    assert_eq!(a.history, b.history);
    assert!(a.codec.store.iter().zip(b.codec.store.iter()).all(|(x, y)| x == y));
}

#[test]
fn stage_two_is_deterministic() {
    let data = tiny_data();
    let cfg = tiny_config();
    let s1 = train_stage(&cfg, &data, None, None).unwrap();
    let init = stage_checkpoint(&cfg, &s1.codec, None, &s1.history);
    let cfg2 = TrainConfig { stage: 2, epochs: 1, ..cfg };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let bytes: Vec<Vec<u8>> = dirs
        .iter()
        .map(|d| {
            train_stage(&cfg2, &data, Some(&init), Some(d.path())).unwrap();
            std::fs::read(d.path().join(checkpoint_name(2))).unwrap()
        })
        .collect();
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn zero_generator_text_blocks_text_weight_gradients() {
    let cfg = tiny_config();
    let codec = Codec::<f32>::new(cfg.model.clone(), 2);
    let data = tiny_data();
    let text = StubTextEncoder::new(0).embed("a dotted blue square at the center").unwrap();
    let (gen_text, disc_text) = apply_variant(Variant::NoGText, &text);
    assert_eq!(disc_text, text);
    let tape = tsic_grad::Tape::new();
    let ctx = Ctx::new(&tape, Mode::Train, true);
    let x = tape.constant(Tensor::stack(&data.images[..2]));
    let t = tape.constant(TextEmbedding::stack(&[&gen_text, &gen_text]));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let f = codec.forward(&ctx, x, t, RateMode::Noise, &mut rng);
    let loss = f.x_hat.sub(x).square().mean().add(f.bits_y.mean());
    let grads = tape.backward(loss);
    let mut checked = 0;
    for id in codec.store.ids() {
        let name = codec.store.name(id);
        if name.ends_with(".gamma.0.weight") || name.ends_with(".beta.0.weight") {
            if let Some(g) = grads.param(id) {
                assert!(g.data().iter().all(|&v| v == 0.0), "{name} has a gradient");
            }
            checked += 1;
        }
    }
    assert_eq!(checked, 2 * codec.ssa.len());
    // The real caption does reach those weights.
    let tape = tsic_grad::Tape::new();
    let ctx = Ctx::new(&tape, Mode::Train, true);
    let x = tape.constant(Tensor::stack(&data.images[..2]));
    let t = tape.constant(TextEmbedding::stack(&[&text, &text]));
    let f = codec.forward(&ctx, x, t, RateMode::Noise, &mut rng);
    let grads = tape.backward(f.x_hat.sub(x).square().mean());
    let id = codec.store.find("ssa0.gamma.0.weight").unwrap();
    assert!(grads.param(id).unwrap().data().iter().any(|&v| v != 0.0));
}

#[test]
fn frozen_text_adapter_is_untouched_by_training() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(&dir.path().join("data"), 8, 32, 4).unwrap();
    let vocab: Vec<String> = generate(8, 32, 4)
        .iter()
        .flat_map(|s| s.captions.iter().flat_map(|c| tsic_core::text::tokenize(c)))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let table: Vec<Vec<f32>> = (0..vocab.len())
        .map(|i| (0..512).map(|j| (((i * 131 + j * 7) % 97) as f32 / 48.5) - 1.0).collect())
        .collect();
    let weights = dir.path().join("text.json");
    let json = serde_json::json!({
        "vocab": vocab.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect::<std::collections::BTreeMap<_, _>>(),
        "table": table,
    });
    std::fs::write(&weights, serde_json::to_vec(&json).unwrap()).unwrap();
    let before = std::fs::read(&weights).unwrap();
    let caption = &generate(8, 32, 4)[0].captions[0];
    let emb_before = PretrainedTextEncoder::load(&weights).unwrap().embed(caption).unwrap();

    let cfg = TrainConfig {
        manifest: Some(manifest),
        text_backend: TextBackendKind::PretrainedFrozen,
        text_weights: Some(weights.clone()),
        epochs: 1,
        ..tiny_config()
    };
    let out = run_training(&cfg, &dir.path().join("runs")).unwrap();
    assert_eq!(std::fs::read(&weights).unwrap(), before);
    assert_eq!(PretrainedTextEncoder::load(&weights).unwrap().embed(caption).unwrap(), emb_before);
    assert!(out.codec.store.iter().all(|(name, _)| !name.starts_with("text")));
}
