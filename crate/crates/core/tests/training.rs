use lc3net::checkpoint::{load_model, restore_model, save_model, Checkpoint};
use lc3net::config::TrainConfig;
use lc3net::data::{synthetic_disks, AugmentConfig};
use lc3net::model::{Lc3Net, ModelConfig};
use lc3net::train::{lr_at, train, warmup_steps, Source, LOG_FILE, LOG_HEADER};
use lc3net::Error;
use proptest::prelude::*;

fn small_config() -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        epochs: 2,
        seed: Some(5),
        checkpoint_every: 1,
        model: ModelConfig {
            bcd_stages: 2,
            ..ModelConfig::default()
        },
        data: AugmentConfig {
            train_size: 32,
            ..AugmentConfig::default()
        },
        ..TrainConfig::default()
    }
}

proptest! {
    #[test]
    fn schedule_stays_within_bounds(total in 2usize..5000, frac in 0.0f64..0.5, max_lr in 1e-4f64..1.0) {
        let w = warmup_steps(total, frac);
        let mut prev = 0.0;
        for step in 0..total {
            let lr = lr_at(step, total, max_lr, frac).unwrap();
            prop_assert!(lr >= 0.0 && lr <= max_lr * (1.0 + 1e-12));
            if step > 0 && step <= w {
                prop_assert!(lr > prev);
            }
            if step > w {
                prop_assert!(lr <= prev);
            }
            prev = lr;
        }
        prop_assert!(lr_at(total, total, max_lr, frac).is_err());
    }
}

#[test]
fn warmup_then_decay_shape() {
    let total = 1000;
    assert_eq!(warmup_steps(total, 0.05), 50);
    assert_eq!(lr_at(0, total, 0.05, 0.05).unwrap(), 0.0);
    assert_eq!(lr_at(50, total, 0.05, 0.05).unwrap(), 0.05);
    let mid = lr_at(525, total, 0.05, 0.05).unwrap();
    assert!((mid - 0.05 * 0.5f64.powf(0.9)).abs() < 1e-12);
}

#[test]
fn config_text_round_trips() {
    let text = "\
# overfit run
batch_size = 4
epochs = 7
seed = 3
grad_clip = 5
model.bcd_stages = 2
model.use_dcm_d = false
loss.lambda = 0.5
data.scale_set = 0.5, 1
data.train_size = 96
";
    let cfg = TrainConfig::parse(text).unwrap();
    assert_eq!(cfg.batch_size, 4);
    assert_eq!(cfg.model.bcd_stages, 2);
    assert!(!cfg.model.use_dcm_d);
    assert_eq!(cfg.data.scale_set, [0.5, 1.0]);
    assert_eq!(cfg.grad_clip, Some(5.0));
    assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
}

#[test]
fn config_errors() {
    for bad in ["no_such_key = 1", "epochs = 0", "batch_size = many", "model.bcd_stages = 4", "just text"] {
        assert!(matches!(TrainConfig::parse(bad), Err(Error::Config(_))), "{bad}");
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let cfg = TrainConfig::default();
    let model = Lc3Net::new(ModelConfig { seed: 42, ..cfg.model.clone() }).unwrap();
    save_model(&model, &cfg, &path).unwrap();
    let (back, back_cfg) = load_model(&path).unwrap();
    assert_eq!(back_cfg.model, cfg.model);
    let (a, b) = (model.store().entries(), back.store().entries());
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.name, y.name);
        let bits = |t: &[f32]| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(x.value.data()), bits(y.value.data()), "{}", x.name);
    }
}

#[test]
fn checkpoint_corruption_is_detected() {
    let model = Lc3Net::new(ModelConfig { bcd_stages: 1, use_fcb: false, ..ModelConfig::default() }).unwrap();
    let bytes = Checkpoint::from_store(model.store(), TrainConfig::default().to_text()).to_bytes();
    for cut in [0, 4, 11, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
    let mut magic = bytes;
    magic[0] ^= 1;
    assert!(Checkpoint::from_bytes(&magic).is_err());
}

#[test]
fn architecture_mismatch_is_refused() {
    let saved = TrainConfig::default();
    let model = Lc3Net::new(saved.model.clone()).unwrap();
    let ck = Checkpoint::from_store(model.store(), saved.to_text());
    let mut other = Lc3Net::new(ModelConfig { bcd_stages: 2, ..ModelConfig::default() }).unwrap();
    let err = restore_model(&mut other, &ck).unwrap_err();
    assert!(err.to_string().contains("bcd_stages"), "{err}");
}

#[test]
fn fixed_seed_training_is_reproducible() {
    let run = |dir: &std::path::Path| {
        let samples = synthetic_disks(4, 32, 1);
        train(&small_config(), Source::Memory(samples), Some(dir), |_| {}).unwrap()
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (a, b) = (run(d1.path()), run(d2.path()));
    assert_eq!(a.log.len(), 4);
    let log1 = std::fs::read_to_string(d1.path().join(LOG_FILE)).unwrap();
    let log2 = std::fs::read_to_string(d2.path().join(LOG_FILE)).unwrap();
    assert_eq!(log1, log2);
    assert_eq!(log1.lines().next().unwrap(), LOG_HEADER);
    assert_eq!(log1.lines().count(), 5);
    assert!(d1.path().join("epoch_001.ckpt").exists());
    let (restored, _) = load_model(a.final_checkpoint.as_ref().unwrap()).unwrap();
    for (x, y) in restored.store().entries().iter().zip(b.model.store().entries()) {
        assert_eq!(x.value.data(), y.value.data(), "{}", x.name);
    }
}

#[test]
fn empty_training_set_is_an_error() {
    assert!(train(&small_config(), Source::Memory(vec![]), None, |_| {}).is_err());
}
