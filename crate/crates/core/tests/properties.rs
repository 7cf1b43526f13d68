use count_adapt::adapters::init_adapter;
use count_adapt::datagen::{augment_hflip, split_train_val, tile_patches, DotAnnotation, Image, Scene};
use count_adapt::eval::{mae, rmse};
use count_adapt::features::{build_frozen_extractor, FrozenExtractorSpec};
use count_adapt::nn::Mode;
use count_adapt::persistence::{decode_domain_into, decode_shared, encode_domain, encode_shared, ModelArchive};
use count_adapt::regressor::{
    adagrad_step, predict_image, randomize_for_grad_check, DomainId, ModelParams, TrainConfig,
};
use ndarray::Array2;
use proptest::prelude::*;

fn scene(w: usize, h: usize, dots: &[(f64, f64)]) -> Scene {
    Scene {
        id: "s".into(),
        pixels: Image::zeros(h, w, 1),
        dots: dots.iter().map(|&(x, y)| DotAnnotation { x, y }).collect(),
        domain: DomainId::new("d"),
    }
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6f64..1e6, -1.0f64..1.0, Just(0.0), Just(-0.0)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fresh_adapter_is_the_identity(
        (rows, dim, values) in (2usize..12, 1usize..40)
            .prop_flat_map(|(r, d)| (Just(r), Just(d), prop::collection::vec(finite(), r * d)))
    ) {
        let x = Array2::from_shape_vec((rows, dim), values).unwrap();
        for mode in [Mode::Train, Mode::Infer] {
            let y = init_adapter(dim).forward(&x, mode).unwrap();
            let same = y.iter().zip(x.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same, "{mode:?}");
        }
    }

    #[test]
    fn split_is_a_seeded_order_preserving_partition(
        n in 0usize..200, fraction in 0.0f64..=1.0, seed in any::<u64>()
    ) {
        let items: Vec<usize> = (0..n).collect();
        let (train, val) = split_train_val(&items, fraction, seed).unwrap();
        prop_assert_eq!(val.len(), (fraction * n as f64).round() as usize);
        prop_assert!(train.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(val.windows(2).all(|w| w[0] < w[1]));
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, items.clone());
        prop_assert_eq!(split_train_val(&items, fraction, seed).unwrap(), (train, val));
    }

    #[test]
    fn mirrored_scenes_keep_their_patch_totals(
        w in 1usize..50, h in 1usize..50, p in 1usize..20,
        raw in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 0..30),
    ) {
        // Quarter-pixel lattice, so mirroring is exact.
        let dots: Vec<(f64, f64)> = raw
            .iter()
            .map(|(u, v)| (((u * (w - 1) as f64) * 4.0).floor() / 4.0, ((v * (h - 1) as f64) * 4.0).floor() / 4.0))
            .collect();
        let s = scene(w, h, &dots);
        let both = augment_hflip(std::slice::from_ref(&s));
        prop_assert_eq!(both.len(), 2);
        let flipped = &both[1];
        flipped.check_invariants().unwrap();
        let total: f64 = tile_patches(flipped, p).iter().map(|t| t.0.gt_count).sum();
        prop_assert_eq!(total, dots.len() as f64);
        prop_assert_eq!(&flipped.hflip().dots, &s.dots);
    }

    #[test]
    fn adagrad_step_never_exceeds_the_learning_rate(
        param in -10.0f64..10.0, grad in -1e3f64..1e3, accum in 0.0f64..1e3, decay in any::<bool>()
    ) {
        let c = TrainConfig::default();
        let (p, a) = adagrad_step(param, grad, accum, &c, decay);
        prop_assert!(a >= accum);
        prop_assert!((p - param).abs() <= c.learning_rate * (1.0 + 1e-12));
    }

    #[test]
    fn errors_are_ordered(pairs in prop::collection::vec((0.0f64..100.0, -5.0f64..105.0), 1..50)) {
        let (g, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let (m, r) = (mae(&g, &p), rmse(&g, &p));
        prop_assert!(m >= 0.0);
        prop_assert!(r + 1e-12 >= m);
        prop_assert_eq!(mae(&g, &g), 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn codecs_round_trip_bit_exact(model_seed in any::<u64>(), perturb in any::<u64>(), n in 1usize..12) {
        let mut m = ModelParams::new(n, model_seed).unwrap();
        let d = DomainId::new("dom");
        m.register_domain(&d);
        randomize_for_grad_check(&mut m, &d, perturb).unwrap();
        let shared = encode_shared(&m);
        let mut back = decode_shared(&shared, "shared").unwrap();
        prop_assert_eq!(encode_shared(&back), shared);
        let bytes = encode_domain(&m, &d).unwrap();
        prop_assert_eq!(decode_domain_into(&mut back, &bytes, "dom").unwrap(), d.clone());
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(encode_domain(&back, &d).unwrap(), bytes);

        let dir = tempfile::tempdir().unwrap();
        ModelArchive::new(m.clone()).save(dir.path()).unwrap();
        prop_assert_eq!(ModelArchive::load(dir.path()).unwrap().model, m);
    }

    #[test]
    fn image_total_is_the_clamped_grid_sum(
        h in 5usize..70, w in 5usize..70, p in 5usize..33, seed in any::<u64>(),
        pixels in prop::collection::vec(0.0f32..1.0, 70 * 70),
    ) {
        let mut m = ModelParams::new(8, seed).unwrap();
        let d = DomainId::new("dom");
        m.register_domain(&d);
        randomize_for_grad_check(&mut m, &d, seed ^ 1).unwrap();
        let extractor = build_frozen_extractor(&FrozenExtractorSpec::with_output_dim(1, 8, seed)).unwrap();
        let image = Image::from_vec(h, w, 1, pixels[..h * w].to_vec()).unwrap();
        let (grid, total) = predict_image(&m, &extractor, &image, &d, p).unwrap();
        prop_assert_eq!((grid.rows(), grid.cols()), (h.div_ceil(p), w.div_ceil(p)));
        let mut sum = 0.0;
        for r in 0..grid.rows() {
            for c in 0..grid.cols() {
                sum += grid.get(r, c);
            }
        }
        prop_assert_eq!(total.to_bits(), sum.max(0.0).to_bits());
    }
}
