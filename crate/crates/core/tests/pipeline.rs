use std::fs;

use tgdfer::checkpoint::Checkpoint;
use tgdfer::dataset::{Dataset, DatasetManifest};
use tgdfer::error::Error;
use tgdfer::eval;
use tgdfer::format::{self, BagSource, TEXT_MAGIC};
use tgdfer::synthetic::{gen_synthetic, generate, SyntheticSpec};
use tgdfer::train::{lr_at, train, TrainConfig};

fn tiny_spec() -> SyntheticSpec {
    SyntheticSpec {
        train_bags: 16,
        test_bags: 8,
        frames: 8,
        d: 16,
        classes: 4,
        salient_count: 2,
        ..SyntheticSpec::default()
    }
}

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        epochs: 3,
        batch_size: 4,
        milestones: vec![1],
        ..TrainConfig::default()
    }
}

fn fixture(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

#[test]
fn exported_bag_fixture_reads_and_rewrites_identically() {
    let path = fixture("clip_bag.tgfb");
    let bag = format::read_bag_checked(&path, 512, 7).unwrap();
    assert_eq!(bag.bag_id, "dfew_clip_0001");
    assert_eq!((bag.frames(), bag.dim(), bag.label), (16, 512, 3));
    assert_eq!(bag.source, BagSource::Imported);
    for t in 0..bag.frames() {
        let n: f64 = bag.features.row(t).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-5, "row {t} norm {n}");
    }
    assert_eq!(format::encode_bag(&bag), fs::read(&path).unwrap());
    assert!(format::read_bag_checked(&path, 256, 7).is_err());
    assert!(format::read_bag_checked(&path, 512, 3).is_err());
}

#[test]
fn exported_text_fixture_reads_and_rewrites_identically() {
    let path = fixture("clip_text.tgte");
    let emb = format::read_text_embeddings(&path).unwrap();
    assert_eq!(emb.name, "descriptors");
    assert_eq!(emb.rows.shape(), &[7, 512]);
    let dir = tempfile::tempdir().unwrap();
    let copy = dir.path().join("copy.tgte");
    format::write_text_embeddings(&copy, &emb).unwrap();
    let bytes = fs::read(&copy).unwrap();
    assert_eq!(bytes, fs::read(&path).unwrap());
    assert_eq!(bytes[..4], TEXT_MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 0);
    // A text file is not a bag.
    assert!(matches!(format::read_bag(&path), Err(Error::BadMagic { .. })));
}

#[test]
fn exported_manifest_fixture_opens() {
    let text = fs::read_to_string(fixture("manifest.json")).unwrap();
    let manifest: DatasetManifest = serde_json::from_str(&text).unwrap();
    manifest.validate().unwrap();
    let ds = Dataset::open(fixture("manifest.json")).unwrap();
    assert_eq!((ds.dim(), ds.classes()), (512, 7));
    assert!(ds.train.is_empty());
    assert_eq!(ds.test.len(), 1);
    assert_eq!(ds.hash.len(), 64);
}

#[test]
fn generated_files_match_in_memory_data() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec();
    let manifest = gen_synthetic(&spec, 5, dir.path()).unwrap();
    let ds = Dataset::open(&manifest).unwrap();
    let data = generate(&spec, 5).unwrap();
    assert_eq!(ds.train.len(), 16);
    assert_eq!(ds.test.len(), 8);
    for (file, mem) in ds.train.iter().zip(&data.train) {
        assert_eq!(file.bag_id, mem.bag_id);
        assert_eq!(file.label, mem.label);
        assert_eq!(file.features, mem.features);
    }
    let masks = ds.masks().unwrap();
    for bag in ds.train.iter().chain(&ds.test) {
        let mask = masks.get(&bag.bag_id).unwrap();
        assert_eq!(mask.len(), bag.frames());
        assert_eq!(mask.iter().filter(|&&m| m).count(), 2);
    }
}

#[test]
fn data_seed_and_init_seed_are_independent() {
    let spec = tiny_spec();
    let a = generate(&spec, 1).unwrap();
    let b = generate(&spec, 1).unwrap();
    let c = generate(&spec, 2).unwrap();
    assert_eq!(a.train[0].features, b.train[0].features);
    assert_ne!(a.train[0].features, c.train[0].features);

    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::open(gen_synthetic(&spec, 1, dir.path()).unwrap()).unwrap();
    let (m1, _) = train(&ds, &tiny_config(10), |_| {}).unwrap();
    let (m2, _) = train(&ds, &tiny_config(11), |_| {}).unwrap();
    assert_ne!(m1.params, m2.params);
    // Training never touches the data or the frozen encoder.
    assert_eq!(ds.train[0].features, a.train[0].features);
    assert_eq!(m1.encoder.checksum(), m2.encoder.checksum());
}

#[test]
fn training_log_checkpoint_and_compatibility() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::open(gen_synthetic(&tiny_spec(), 3, dir.path().join("data")).unwrap()).unwrap();
    let cfg = tiny_config(0);
    let mut seen = Vec::new();
    let (model, log) = train(&ds, &cfg, |e| seen.push(e.epoch)).unwrap();
    assert_eq!(seen, vec![0, 1, 2]);
    for e in &log.epochs {
        assert_eq!(e.lr, lr_at(e.epoch, &cfg));
        assert!(e.train_loss.is_finite() && e.running_loss.is_finite());
    }
    assert!(log.epochs[1].lr.head < log.epochs[0].lr.head);

    let before = model.encoder.checksum();
    let ckpt = Checkpoint::new(&model, &cfg, &ds, log.clone());
    assert_eq!(ckpt.encoder_checksum, before);
    let path = dir.path().join("ckpt.json");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.log, log);
    loaded.check_compatible(&ds).unwrap();
    let restored = loaded.model().unwrap();
    assert_eq!(
        eval::evaluate(&restored, &ds.test).unwrap(),
        eval::evaluate(&model, &ds.test).unwrap()
    );

    let other_spec = SyntheticSpec {
        classes: 3,
        ..tiny_spec()
    };
    let other = Dataset::open(gen_synthetic(&other_spec, 3, dir.path().join("other")).unwrap()).unwrap();
    match loaded.check_compatible(&other) {
        Err(e @ Error::Incompatible { .. }) => {
            let msg = e.to_string();
            assert!(msg.contains(&loaded.config_hash), "{msg}");
            assert!(msg.contains(&other.hash), "{msg}");
        }
        other => panic!("expected incompatibility, got {other:?}"),
    }
}

#[test]
fn tampered_encoder_checksum_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::open(gen_synthetic(&tiny_spec(), 4, dir.path()).unwrap()).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        milestones: vec![],
        ..tiny_config(0)
    };
    let (model, log) = train(&ds, &cfg, |_| {}).unwrap();
    let mut ckpt = Checkpoint::new(&model, &cfg, &ds, log);
    ckpt.encoder_checksum = "0".repeat(64);
    assert!(ckpt.model().is_err());
}
