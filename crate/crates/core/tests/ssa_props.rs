use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsic_grad::{BatchStats, ParamStore, Tensor};

use tsic_core::data::TextEmbedding;
use tsic_core::ssa::{affine_from_text, predict_mask, ssa_transform, SsaBlock};
use tsic_core::text::{StubTextEncoder, TextEncoder};

fn block(c: usize, seed: u64) -> (ParamStore<f32>, SsaBlock) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let b = SsaBlock::new(&mut store, &mut rng, "b", c, 16);
    (store, b)
}

fn features(seed: u64, shape: [usize; 4], scale: f32) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..=scale))
}

fn unit_running(c: usize) -> BatchStats<f32> {
    BatchStats {
        mean: vec![0.0; c],
        var: vec![1.0; c],
    }
}

#[test]
fn zeroed_mask_head_gives_one_half() {
    let (mut store, b) = block(4, 1);
    for name in ["b.mask.1.weight", "b.mask.1.bias"] {
        let id = store.find(name).unwrap();
        store.get_mut(id).data_mut().fill(0.0);
    }
    let m = predict_mask(&store, &b, &features(2, [2, 4, 5, 3], 4.0)).unwrap();
    assert_eq!(m.shape(), &[2, 1, 5, 3]);
    assert!(m.data().iter().all(|&v| v == 0.5));
}

#[test]
fn zero_text_with_zero_biases_is_neutral() {
    let (mut store, b) = block(6, 3);
    for name in ["b.gamma.0.bias", "b.gamma.1.bias", "b.beta.0.bias", "b.beta.1.bias"] {
        let id = store.find(name).unwrap();
        store.get_mut(id).data_mut().fill(0.0);
    }
    let affine = affine_from_text(&store, &b, &TextEmbedding::zero());
    assert!(affine.gamma.data().iter().chain(affine.beta.data()).all(|&v| v == 0.0));
    let x = features(4, [2, 6, 4, 4], 2.0);
    assert_eq!(ssa_transform(&store, &b, &unit_running(6), &x, &TextEmbedding::zero()).unwrap(), x);
}

#[test]
fn different_captions_change_the_affine() {
    let (store, b) = block(4, 5);
    let enc = StubTextEncoder::new(0);
    let a = affine_from_text(&store, &b, &enc.embed("red square").unwrap());
    let c = affine_from_text(&store, &b, &enc.embed("blue circle").unwrap());
    assert_ne!(a, c);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn masks_stay_in_unit_interval(
        seed in any::<u64>(),
        n in 1usize..3,
        h in 1usize..6,
        w in 1usize..6,
        scale in prop_oneof![Just(0.01f32), Just(1.0), Just(50.0), Just(1e4)],
    ) {
        let (store, b) = block(3, seed % 16);
        let m = predict_mask(&store, &b, &features(seed, [n, 3, h, w], scale)).unwrap();
        prop_assert_eq!(m.shape(), &[n, 1, h, w]);
        prop_assert!(m.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn transform_preserves_shape(seed in any::<u64>(), n in 1usize..3, h in 1usize..5, w in 1usize..5) {
        let (store, b) = block(4, seed % 8);
        let x = features(seed, [n, 4, h, w], 3.0);
        let text = StubTextEncoder::new(seed).embed("green striped triangle").unwrap();
        let y = ssa_transform(&store, &b, &unit_running(4), &x, &text).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.data().iter().all(|v| v.is_finite()));
    }
}
