use lc3net::data::{
    augment, derived_rng, load_pair, make_batch, synthetic_disks, write_dataset, AugmentConfig, DatasetIndex, Sample,
};
use lc3net::tensor::Tensor;
use lc3net::train::{BatchPlan, Loader, Source};
use proptest::prelude::*;

/// A sample whose mask is recoverable from the first image channel, so any misalignment shows up.
fn coupled_sample(h: usize, w: usize, seed: u64) -> Sample {
    let mask = Tensor::from_fn(vec![1, h, w], |i| (((i as u64).wrapping_mul(2654435761) ^ seed) % 3 == 0) as u8 as f32);
    let mut image = Tensor::from_fn(vec![3, h, w], |i| (i % 7) as f32 / 7.0);
    image.data_mut()[..h * w].copy_from_slice(mask.data());
    Sample::new(image, mask, "coupled").unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn augmentation_keeps_image_and_mask_aligned(
        h in 20usize..90,
        w in 20usize..90,
        seed in any::<u64>(),
        flip in 0.0f64..=1.0,
        crop in 0.3f64..=1.0,
    ) {
        let s = coupled_sample(h, w, seed);
        let cfg = AugmentConfig { flip_prob: flip, crop_min_scale: crop, scale_set: vec![0.5, 1.0, 1.5], train_size: 64 };
        let out = augment(&s, &cfg, &mut derived_rng(seed, 0, 0, 0));
        let (oh, ow) = out.size();
        prop_assert_eq!(oh, ow);
        prop_assert_eq!(oh % 32, 0);
        prop_assert_eq!(&out.image.data()[..oh * ow], out.mask.data());
        prop_assert!(out.mask.data().iter().all(|v| *v == 0.0 || *v == 1.0));
    }

    #[test]
    fn augmentation_is_a_function_of_the_seed(seed in any::<u64>(), index in 0u64..1000) {
        let s = coupled_sample(40, 56, 1);
        let cfg = AugmentConfig { train_size: 64, ..AugmentConfig::default() };
        let a = augment(&s, &cfg, &mut derived_rng(seed, 3, index, 2));
        let b = augment(&s, &cfg, &mut derived_rng(seed, 3, index, 2));
        prop_assert_eq!(a.image.data(), b.image.data());
        prop_assert_eq!(a.mask.data(), b.mask.data());
    }

    #[test]
    fn target_sizes_are_multiples_of_32(scale in 0.01f64..4.0, size in 1usize..1000) {
        let cfg = AugmentConfig { train_size: size, ..AugmentConfig::default() };
        let t = cfg.target_size(scale);
        prop_assert!(t >= 32 && t % 32 == 0);
    }
}

#[test]
fn disabled_augmentation_is_a_plain_resize() {
    let s = coupled_sample(64, 64, 9);
    let out = augment(&s, &AugmentConfig::disabled(64), &mut derived_rng(0, 0, 0, 0));
    assert_eq!(out.image.data(), s.image.data());
    assert_eq!(out.mask.data(), s.mask.data());
}

#[test]
fn invalid_augment_configs_are_rejected() {
    let ok = AugmentConfig::default();
    assert!(ok.validate().is_ok());
    for bad in [
        AugmentConfig { flip_prob: 1.5, ..ok.clone() },
        AugmentConfig { crop_min_scale: 0.0, ..ok.clone() },
        AugmentConfig { scale_set: vec![], ..ok.clone() },
        AugmentConfig { scale_set: vec![1.0, -1.0], ..ok.clone() },
        AugmentConfig { train_size: 0, ..ok.clone() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}

#[test]
fn dataset_round_trips_through_png() {
    let dir = tempfile::tempdir().unwrap();
    let samples = synthetic_disks(3, 32, 7);
    write_dataset(dir.path(), &samples).unwrap();
    let index = DatasetIndex::open(dir.path()).unwrap();
    assert_eq!(index.len(), 3);
    for (i, s) in samples.iter().enumerate() {
        let back = index.load(i).unwrap();
        assert_eq!(back.stem, s.stem);
        assert_eq!(back.mask.data(), s.mask.data());
        for (a, b) in back.image.data().iter().zip(s.image.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn missing_mask_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &synthetic_disks(2, 32, 0)).unwrap();
    let masks = dir.path().join("masks");
    let victim = std::fs::read_dir(&masks).unwrap().next().unwrap().unwrap().path();
    std::fs::remove_file(&victim).unwrap();
    assert!(DatasetIndex::open(dir.path()).is_err());
    let image = dir.path().join("images").join(victim.file_name().unwrap());
    let err = load_pair(&image, &victim).unwrap_err();
    assert!(err.to_string().contains(victim.file_name().unwrap().to_str().unwrap()), "{err}");
}

#[test]
fn batches_reject_mixed_sizes() {
    let a = coupled_sample(32, 32, 0);
    let b = coupled_sample(64, 64, 0);
    assert!(make_batch(&[a.clone(), b]).is_err());
    let (x, y) = make_batch(&[a.clone(), a]).unwrap();
    assert_eq!(x.shape(), [2, 3, 32, 32]);
    assert_eq!(y.shape(), [2, 1, 32, 32]);
}

fn stream(workers: usize) -> Vec<(Vec<String>, Vec<f32>)> {
    let samples = synthetic_disks(5, 48, 2);
    let plan = BatchPlan {
        seed: 17,
        batch_size: 2,
        augment: AugmentConfig { train_size: 48, ..AugmentConfig::default() },
        len: samples.len(),
    };
    Loader::new(plan, Source::Memory(samples), 2, workers)
        .map(|b| {
            let b = b.unwrap();
            (b.stems, b.images.data().to_vec())
        })
        .collect()
}

#[test]
fn loader_stream_is_independent_of_worker_count() {
    let inline = stream(0);
    assert_eq!(inline.len(), 6);
    assert_eq!(inline, stream(2));
    let sizes: Vec<usize> = inline.iter().map(|(s, _)| s.len()).collect();
    assert_eq!(sizes, [2, 2, 1, 2, 2, 1]);
}
