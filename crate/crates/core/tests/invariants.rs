use depthscape::data::{generate_scene, Dataset, SceneParams};
use depthscape::pipeline::DepthEdit;
use depthscape::types::{resize_condition, resize_depth};
use depthscape::{
    depth_order_valid, evaluate_model, shift_segment_depth, two_phase, Conditions, DepthMap, Discriminator, Encoder,
    EvalConfig, Generator, LabelSet, Mode, ModelConfig, SegmentationMap, TwoPhaseRequest,
};
use proptest::prelude::*;

fn config_strategy() -> impl Strategy<Value = ModelConfig> {
    (prop_oneof![Just(8usize), Just(16), Just(32)], 1usize..5, 1usize..4, any::<u64>(), any::<bool>()).prop_flat_map(
        |(res, c0, z, seed, depth)| {
            let layers = depthscape::config::layer_count(res);
            proptest::collection::vec(1usize..5, layers - 1).prop_map(move |rest| {
                let mut c = ModelConfig::tiny(if depth { Mode::Sd2i } else { Mode::S2i }, res);
                c.base_latent_shape = [c0, 8, 8];
                c.channels = std::iter::once(c0).chain(rest.iter().copied()).collect();
                c.z_dim = z;
                c.init_seed = seed;
                c
            })
        },
    )
}

fn scene(seed: u64, res: usize) -> depthscape::Triplet {
    generate_scene(&SceneParams::sample(seed, 0), res).unwrap()
}

fn small_pair() -> impl Strategy<Value = (SegmentationMap, DepthMap)> {
    (proptest::collection::vec(0u8..7, 16 * 16), proptest::collection::vec(0.0f32..=1.0, 16 * 16)).prop_map(|(l, d)| {
        (
            SegmentationMap::new(16, 16, l, LabelSet::default()).unwrap(),
            DepthMap::new(16, 16, d).unwrap(),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn resize_at_source_resolution_is_identity((s, d) in small_pair()) {
        let (s2, d2) = resize_condition(&s, &d, 16).unwrap();
        prop_assert_eq!(s2, s);
        prop_assert_eq!(d2, d);
    }

    #[test]
    fn depth_resize_stays_in_input_range(v in proptest::collection::vec(0.0f32..=1.0, 32 * 32), target in prop_oneof![Just(8usize), Just(16)]) {
        let d = DepthMap::new(32, 32, v).unwrap();
        let (lo, hi) = d.min_max();
        let r = resize_depth(&d, target).unwrap();
        prop_assert!(r.values().iter().all(|&v| v >= lo && v <= hi));
    }

    #[test]
    fn latent_shape_chain_and_encoder_mirror(config in config_strategy(), seed in any::<u64>()) {
        let r = config.output_resolution;
        let t = scene(seed, r);
        let g = Generator::<f32>::new(&config).unwrap();
        let z = depthscape::sample_z(config.z_dim, seed);
        let mut prev = g.map_random_latent(&z).unwrap();
        prop_assert_eq!(prev.shape(), config.base_latent_shape);
        for i in 0..config.num_layers() {
            let m = g.build_condition_latent(&t.seg, Some(&t.depth), i).unwrap();
            prev = g.fuse(&prev, &m).unwrap();
            prop_assert_eq!(prev.shape(), [config.channels[i], 8 << i, 8 << i]);
        }
        prop_assert_eq!(8usize << (config.num_layers() - 1), r);
        let enc = Encoder::<f32>::new(&config).unwrap();
        let lat = enc.encode(&t.image.to_tensor()).unwrap();
        prop_assert_eq!(lat.len(), config.num_layers());
        for (i, l) in lat.iter().enumerate() {
            prop_assert_eq!(l.shape(), config.layer_shape(i));
        }
    }

    #[test]
    fn generate_and_discriminate_are_pure(config in config_strategy(), seed in any::<u64>(), noise in any::<u64>()) {
        let t = scene(seed, config.output_resolution);
        let z = depthscape::sample_z(config.z_dim, seed);
        let a = Generator::<f32>::new(&config).unwrap().generate(&t.seg, Some(&t.depth), &z, noise).unwrap();
        let b = Generator::<f32>::new(&config).unwrap().generate(&t.seg, Some(&t.depth), &z, noise).unwrap();
        prop_assert_eq!(&a, &b);
        let d = Discriminator::<f32>::new(&config).unwrap();
        let cond = Conditions::<f32>::from_maps(&[(&t.seg, Some(&t.depth))], config.mode.uses_depth_input()).unwrap();
        let x = t.image.to_tensor();
        prop_assert_eq!(d.score(&x, &cond).unwrap().to_bits(), d.score(&x, &cond).unwrap().to_bits());
    }

    #[test]
    fn accepted_shifts_stay_in_range_and_keep_the_ranking(seed in 0u64..500, pick in any::<prop::sample::Index>(), delta in -0.5f64..0.5) {
        let t = scene(seed, 32);
        let present: Vec<usize> = t.seg.present_labels().into_iter().collect();
        let label = present[pick.index(present.len())];
        let before = depth_order_valid(&t.depth, &t.seg).unwrap();
        match shift_segment_depth(&t.depth, &t.seg, label, delta) {
            Ok(out) => {
                prop_assert!(out.values().iter().all(|v| (0.0..=1.0).contains(v)));
                prop_assert_eq!(depth_order_valid(&out, &t.seg).unwrap(), before);
            }
            Err(depthscape::Error::OrderViolation { .. }) => {}
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }
}

fn tiny_pair() -> (Generator<f32>, Generator<f32>) {
    (
        Generator::new(&ModelConfig::tiny(Mode::S2d, 16)).unwrap(),
        Generator::new(&ModelConfig::tiny(Mode::Sd2i, 16)).unwrap(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn two_phase_is_deterministic_and_keeps_the_picked_ranking(
        seed in any::<u64>(),
        scene_seed in 0u64..200,
        n_depths in 1usize..4,
        pick in any::<prop::sample::Index>(),
        delta in -0.05f64..0.05,
    ) {
        let (s2d, sd2i) = tiny_pair();
        let t = scene(scene_seed, 16);
        let req = |edits: Vec<DepthEdit>| TwoPhaseRequest { n_depths, pick: pick.index(n_depths), edits, n_images: 2, seed };
        let plain = two_phase(&s2d, &sd2i, &t.seg, &req(vec![])).unwrap();
        let picked = &plain.candidates[pick.index(n_depths)];
        prop_assert_eq!(&plain.depth, picked);
        let label = *t.seg.present_labels().iter().next().unwrap();
        let edits = vec![DepthEdit { label, delta }];
        match (two_phase(&s2d, &sd2i, &t.seg, &req(edits.clone())), two_phase(&s2d, &sd2i, &t.seg, &req(edits))) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(&a.depth, &b.depth);
                prop_assert_eq!(&a.images, &b.images);
                prop_assert!(a.depth.values().iter().all(|v| (0.0..=1.0).contains(v)));
                prop_assert_eq!(depth_order_valid(&a.depth, &t.seg).unwrap(), depth_order_valid(picked, &t.seg).unwrap());
            }
            (Err(a), Err(b)) => prop_assert_eq!(a.to_string(), b.to_string()),
            _ => prop_assert!(false, "same request gave different outcomes"),
        }
    }
}

#[test]
fn evaluation_is_deterministic_given_seeds() {
    let g = Generator::<f32>::new(&ModelConfig::tiny(Mode::Sd2i, 16)).unwrap();
    let test = Dataset::synthetic(9, 4, 16).unwrap();
    let cfg = EvalConfig {
        seed: 5,
        diversity_k: 3,
        diversity_items: 2,
    };
    let a = evaluate_model("m", &g, &test.triplets, &cfg).unwrap();
    let b = evaluate_model("m", &g, &test.triplets, &cfg).unwrap();
    assert_eq!(format!("{a:?}"), format!("{b:?}"));
}

#[test]
fn loaded_triplets_equal_generated_ones_within_quantisation() {
    let dir = tempfile::tempdir().unwrap();
    depthscape::build_dataset(4, 3, 16, dir.path()).unwrap();
    let loaded = depthscape::load_dataset(dir.path()).unwrap();
    let fresh = Dataset::synthetic(4, 3, 16).unwrap();
    for (a, b) in loaded.triplets.iter().zip(&fresh.triplets) {
        depthscape::types::validate_pair(&a.seg, &a.depth).unwrap();
        assert_eq!(a.seg, b.seg);
        let img = a.image.values().iter().zip(b.image.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        // Image values live in [-1, 1], so one 8-bit level is 2/255.
        assert!(img <= 2.0 / 255.0 + 1e-6, "image error {img}");
        let dep = a.depth.values().iter().zip(b.depth.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(dep <= 1.0 / 65535.0 + 1e-7, "depth error {dep}");
    }
}
