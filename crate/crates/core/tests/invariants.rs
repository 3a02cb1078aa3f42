use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rskt_seg::bench::metrics::per_class_iou;
use rskt_seg::bench::{fwiou, macc, miou, vocab_overlap, ConfusionMatrix};
use rskt_seg::cma::{dino_cost, fuse_costs, multi_rotation_costs, FusionStrategy};
use rskt_seg::encoder::{encode_image, encode_text, EncoderKind, EncoderSpec, Trainability};
use rskt_seg::flops::{reduction_ratio, Ratio, Reading};
use rskt_seg::fusion::{aggregate, init_params, FusionConfig, GuidanceFeatures};
use rskt_seg::model::{ModelConfig, RsktModel};
use rskt_seg::params::ParamStore;
use rskt_seg::sample::{ImageSample, LabelMap};
use rskt_seg::synth;
use rskt_seg::training::{build_param_groups, count_params, train, TrainConfig};
use rskt_seg::transfer::DecoderConfig;
use rskt_seg::vocab::ClassVocabulary;
use rskt_seg::Tensor;

fn small_spec(kind: EncoderKind, seed: u64) -> EncoderSpec {
    EncoderSpec { embed_dim: 16, num_layers: 2, ..EncoderSpec::toy(kind, seed) }
}

fn tiny_model(decoder_layers: usize) -> RsktModel {
    RsktModel::new(
        ModelConfig { encoder_layers: 2, guidance_layer: 1, embed_dim: 16, ..ModelConfig::default() },
        FusionConfig { d_c: 8, heads: 2, num_layers: 1, ..FusionConfig::default() },
        DecoderConfig {
            num_layers: decoder_layers,
            clip_layers: vec![0, 1],
            dino_layers: vec![1],
            remoteclip_layers: vec![0],
        },
    )
    .unwrap()
}

fn text_for(n: usize) -> Tensor {
    let names: Vec<String> = (0..n).map(|i| format!("class {i}")).collect();
    let vocab = ClassVocabulary::with_default_templates(names).unwrap();
    encode_text(&small_spec(EncoderKind::ToyText, 3), &vocab).unwrap()
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn random_map(h: usize, w: usize, n: usize, ignore_p: f64, rng: &mut ChaCha8Rng) -> LabelMap {
    LabelMap::from_fn(h, w, |_, _| {
        if rng.random_bool(ignore_p) {
            255
        } else {
            rng.random_range(0..n as i64)
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rot90_inverse_pair(h in 1usize..7, w in 1usize..7, c in 1usize..4, seed in any::<u64>()) {
        let t = random_tensor(&[h, w, c], seed);
        prop_assert_eq!(t.rot90(1).rot90(3), t.clone());
        prop_assert_eq!(t.rot90(-1), t.rot90(3));
    }

    #[test]
    fn constant_image_gives_constant_features(r in 0.0f64..1.0, g in 0.0f64..1.0, b in 0.0f64..1.0) {
        let img = Tensor::from_fn(&[32, 32, 3], |i| [r, g, b][i[2]]);
        let out = encode_image(&small_spec(EncoderKind::ToyClipVisual, 0), &img).unwrap();
        let f = &out.final_grid;
        prop_assert!(f.is_finite());
        let c = f.shape()[2];
        let first = &f.data()[..c];
        let scale = first.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        for cell in f.data().chunks(c) {
            for (a, b) in cell.iter().zip(first) {
                prop_assert!((a - b).abs() / scale < 1e-6);
            }
        }
    }

    #[test]
    fn identical_seeds_give_identical_parameters(seed in any::<u64>()) {
        let a = small_spec(EncoderKind::ToyDino, seed).init_params("dino");
        let b = small_spec(EncoderKind::ToyDino, seed).init_params("dino");
        for (name, p) in a.iter() {
            prop_assert_eq!(p.value.data(), b.tensor(name).unwrap().data());
        }
    }

    #[test]
    fn cost_volumes_stay_in_cosine_range(seed in any::<u64>(), n in 1usize..5) {
        let img = synth::random_image(seed, 32);
        let text = text_for(n);
        for v in multi_rotation_costs(&img, &small_spec(EncoderKind::ToyClipVisual, 0), &text).unwrap() {
            prop_assert!(v.values.data().iter().all(|x| x.abs() <= 1.0 + 1e-6));
        }
        let d = dino_cost(&img, &small_spec(EncoderKind::ToyDino, 1), &text).unwrap();
        prop_assert!(d.values.data().iter().all(|x| x.abs() <= 1.0 + 1e-6));
    }

    #[test]
    fn cost_volumes_follow_vocabulary_permutation(seed in any::<u64>()) {
        let img = synth::random_image(seed, 32);
        let text = text_for(4);
        let mut perm: Vec<usize> = (0..4).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let permuted = Tensor::from_fn(text.shape(), |i| text.at(&[perm[i[0]], i[1], i[2]]));
        let spec = small_spec(EncoderKind::ToyClipVisual, 0);
        let base = multi_rotation_costs(&img, &spec, &text).unwrap();
        let moved = multi_rotation_costs(&img, &spec, &permuted).unwrap();
        for (b, m) in base.iter().zip(&moved) {
            let expect = Tensor::from_fn(b.values.shape(), |i| b.values.at(&[i[0], i[1], perm[i[2]], i[3]]));
            prop_assert_eq!(&m.values, &expect);
        }
    }

    #[test]
    fn flop_ratio_is_inverse_fourth_power(side in 1u64..5, r in 1u64..5, d in 1u64..64) {
        let h = side * r * 2;
        let ratio = reduction_ratio(h, h, d, r, Reading::BothOperands).unwrap();
        prop_assert_eq!(ratio, Ratio::new(1, r.pow(4)));
        let kv = reduction_ratio(h, h, d, r, Reading::KeysValuesOnly).unwrap();
        prop_assert_eq!(kv, Ratio::new(1, r.pow(2)));
    }

    #[test]
    fn confusion_is_order_independent(n in 2usize..6, k in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs: Vec<(LabelMap, LabelMap)> = (0..k)
            .map(|_| (random_map(4, 5, n, 0.0, &mut rng), random_map(4, 5, n, 0.2, &mut rng)))
            .collect();
        let mut forward = ConfusionMatrix::new(n);
        for (p, g) in &pairs {
            forward.accumulate(p, g, 255).unwrap();
        }
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut rng);
        let mut shuffled = ConfusionMatrix::new(n);
        for i in order {
            shuffled.accumulate(&pairs[i].0, &pairs[i].1, 255).unwrap();
        }
        prop_assert_eq!(forward, shuffled);
    }

    #[test]
    fn fwiou_lies_between_class_ious(n in 2usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cm = ConfusionMatrix::new(n);
        cm.accumulate(&random_map(8, 8, n, 0.0, &mut rng), &random_map(8, 8, n, 0.1, &mut rng), 255).unwrap();
        let defined: Vec<f64> = per_class_iou(&cm).into_iter().flatten().collect();
        if let Some(fw) = fwiou(&cm) {
            let lo = defined.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = defined.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(fw >= lo - 1e-12 && fw <= hi + 1e-12);
        }
        for v in [miou(&cm).0, fwiou(&cm), macc(&cm)].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn overlap_is_symmetric_and_bounded(
        a in proptest::collection::vec("[a-c]{1,2}", 0..6),
        b in proptest::collection::vec("[a-c]{1,2}", 0..6),
    ) {
        let o = vocab_overlap(&a, &b);
        prop_assert_eq!(o, vocab_overlap(&b, &a));
        prop_assert!(o <= a.len().min(b.len()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn cat_fusion_rotates_with_cyclic_clip_slots(seed in any::<u64>()) {
        let img = synth::patch_constant_image(seed, 32, 16);
        let text = text_for(2);
        let (clip, dino) = (small_spec(EncoderKind::ToyClipVisual, 0), small_spec(EncoderKind::ToyDino, 1));
        let fused = |im: &ImageSample| {
            let v = multi_rotation_costs(im, &clip, &text).unwrap();
            let d = dino_cost(im, &dino, &text).unwrap();
            fuse_costs(&v, &d, FusionStrategy::Cat).unwrap()
        };
        let base = fused(&img).rot90(1);
        let turned = fused(&img.rot90(1));
        let p = text.shape()[1];
        let expect = Tensor::from_fn(base.shape(), |i| {
            let (slot, t) = (i[3] / p, i[3] % p);
            let from = if slot < 4 { (slot + 1) % 4 } else { 4 };
            base.at(&[i[0], i[1], i[2], from * p + t])
        });
        prop_assert!(turned.max_rel_diff(&expect) < 1e-12);
    }

    #[test]
    fn aggregation_is_class_permutation_equivariant(seed in any::<u64>(), layers in 0usize..3) {
        let cfg = FusionConfig { d_c: 8, heads: 2, num_layers: layers, ..FusionConfig::default() };
        let mut params = ParamStore::new();
        init_params(&mut params, seed, &cfg, 6, 4, 4);
        let cost = random_tensor(&[4, 4, 3, 6], seed);
        let guide = GuidanceFeatures { clip_mid: random_tensor(&[4, 4, 6], seed ^ 1), dino_mid: random_tensor(&[4, 4, 6], seed ^ 2) };
        let text = random_tensor(&[3, 6], seed ^ 3);
        let perm = [2usize, 0, 1];
        let pc = Tensor::from_fn(&[4, 4, 3, 6], |i| cost.at(&[i[0], i[1], perm[i[2]], i[3]]));
        let pt = Tensor::from_fn(&[3, 6], |i| text.at(&[perm[i[0]], i[1]]));
        let base = aggregate(&cost, &guide, &text, &cfg, &params).unwrap();
        let moved = aggregate(&pc, &guide, &pt, &cfg, &params).unwrap();
        let expect = Tensor::from_fn(base.shape(), |i| base.at(&[i[0], i[1], perm[i[2]], i[3]]));
        prop_assert!(moved.max_rel_diff(&expect) < 1e-5);
    }

    #[test]
    fn output_matches_input_size(cells in 2usize..6, decoder_layers in 0usize..4, seed in any::<u64>()) {
        let model = tiny_model(decoder_layers);
        let vocab = model.vocabulary(["a", "b"]).unwrap();
        let img = synth::random_image(seed, cells * 16);
        let cfg = &model.fusion;
        if cfg.validate(cells, cells).is_ok() {
            let a = model.forward(&img, &vocab).unwrap();
            prop_assert_eq!(a.values.shape(), &[2, cells * 16, cells * 16]);
            let b = model.forward(&img, &vocab).unwrap();
            prop_assert_eq!(a.values.data(), b.values.data());
        }
    }

    #[test]
    fn trainable_never_exceeds_total(clip in 0usize..3, dino in 0usize..3) {
        let modes = [Trainability::Frozen, Trainability::Attention, Trainability::Full];
        let model = tiny_model(1);
        let groups = build_param_groups(&model.params, modes[clip], modes[dino]);
        let c = count_params(&groups);
        prop_assert!(c.trainable <= c.total);
        prop_assert_eq!(c.total, model.params.numel());
        let mut seen: Vec<&String> = groups.iter().flat_map(|g| g.tensors.keys()).collect();
        seen.sort();
        seen.dedup();
        prop_assert_eq!(seen.len(), model.params.len());
    }
}

#[test]
fn seeded_training_repeats_exactly() {
    let data = synth::dataset(6, 2, 32, 2, 0.05);
    let cfg = TrainConfig { max_iters: 3, batch_size: 1, seed: 9, ..TrainConfig::default() };
    let run = || {
        let mut m = tiny_model(1);
        let v = m.vocabulary(["a", "b"]).unwrap();
        train(&mut m, &data, &v, &cfg).unwrap().losses
    };
    let (a, b) = (run(), run());
    assert_eq!(a.len(), 3);
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}
