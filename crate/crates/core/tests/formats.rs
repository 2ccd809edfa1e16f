//! Binary file formats: datasets, checkpoints and feature dumps.

use proptest::prelude::*;
use tempfile::tempdir;
use tsvit::checkpoint::{checkpoint_bytes, decode_checkpoint, load_checkpoint, save_checkpoint};
use tsvit::data::{gen_synthetic, read_dataset, write_dataset, Dataset, Sample};
use tsvit::error::{Error, FormatError};
use tsvit::features::{export_features, read_features};
use tsvit::model::{init_model, model_forward};
use tsvit::rng::Rng;
use tsvit::tensor::Tensor;
use tsvit::{Model32, TsvitConfig};

fn small_config() -> TsvitConfig {
    TsvitConfig {
        signal_len: 64,
        channels: 1,
        patch_len: 16,
        embed_dim: 8,
        heads: 2,
        blocks: 2,
        mlp_dim: 16,
        num_classes: 4,
        encoder_dropout: 0.1,
        embed_dropout: 0.1,
        use_position_embedding: true,
        use_post_embedding_dropout: true,
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempdir().unwrap();
    let model: Model32 = init_model(&small_config(), &mut Rng::new(3)).unwrap();
    let a = dir.path().join("a.tsvm");
    let b = dir.path().join("b.tsvm");
    save_checkpoint(&model, &a).unwrap();
    let loaded: Model32 = load_checkpoint(&a).unwrap();
    save_checkpoint(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(loaded.config(), model.config());
    assert_eq!(loaded.seed(), 3);
    assert_eq!(loaded.params(), model.params());

    let x = Tensor::from_fn(&[2, 64, 1], |i| (i as f32 * 0.3).sin());
    let (l1, _) = model_forward(&model, &x, &mut Rng::new(0), false).unwrap();
    let (l2, _) = model_forward(&loaded, &x, &mut Rng::new(0), false).unwrap();
    assert_eq!(l1, l2);
}

#[test]
fn checkpoint_corruption_is_reported() {
    let model: Model32 = init_model(&small_config(), &mut Rng::new(1)).unwrap();
    let bytes = checkpoint_bytes(&model);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint::<f32>(&bad), Err(FormatError::BadMagic { .. })));

    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(decode_checkpoint::<f32>(&bad), Err(FormatError::BadVersion { found: 9, .. })));

    let cut = &bytes[..bytes.len() - 3];
    assert!(matches!(decode_checkpoint::<f32>(cut), Err(FormatError::Truncated { .. })));

    let mut long = bytes.clone();
    long.extend_from_slice(&[0, 0, 0, 0]);
    assert!(decode_checkpoint::<f32>(&long).is_err());

    let dir = tempdir().unwrap();
    let p = dir.path().join("bad.tsvm");
    std::fs::write(&p, &bytes[..10]).unwrap();
    match load_checkpoint::<f32>(&p) {
        Err(Error::Format { path, .. }) => assert_eq!(path, p),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn checkpoint_class_count_must_match_data() {
    let model: Model32 = init_model(&small_config(), &mut Rng::new(1)).unwrap();
    let data = gen_synthetic(2, 64, 0).unwrap();
    model.config().ensure_data_matches(64, 1, data.num_classes()).unwrap();
    let err = model.config().ensure_data_matches(64, 1, 10).unwrap_err();
    assert!(err.to_string().contains("N_c=10"), "{err}");
}

#[test]
fn dataset_truncated_payload_is_an_error() {
    let dir = tempdir().unwrap();
    let p = dir.path().join("d.tsvd");
    let data = gen_synthetic(1, 2048, 5).unwrap();
    write_dataset(&data, &p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 100]).unwrap();
    match read_dataset(&p) {
        Err(Error::Format { kind: FormatError::Truncated { what }, .. }) => assert_eq!(what, "sample payload"),
        other => panic!("expected truncation, got {other:?}"),
    }
}

#[test]
fn dataset_bad_magic_and_label_are_errors() {
    let dir = tempdir().unwrap();
    let p = dir.path().join("d.tsvd");
    write_dataset(&gen_synthetic(1, 64, 5).unwrap(), &p).unwrap();
    let mut bytes = std::fs::read(&p).unwrap();
    bytes[1] = b'Q';
    std::fs::write(&p, &bytes).unwrap();
    assert!(matches!(read_dataset(&p), Err(Error::Format { kind: FormatError::BadMagic { .. }, .. })));
    assert!(matches!(read_dataset(dir.path().join("missing")), Err(Error::Io { .. })));
}

#[test]
fn features_round_trip() {
    let dir = tempdir().unwrap();
    let p = dir.path().join("f.tsvf");
    let model: Model32 = init_model(&small_config(), &mut Rng::new(4)).unwrap();
    let data = gen_synthetic(3, 64, 1).unwrap();
    let written = export_features(&model, &data, &p).unwrap();
    assert_eq!(written.records.len(), data.len() * 3);
    let read = read_features(&p).unwrap();
    assert_eq!(read, written);
    assert_eq!(read.embed_dim, 8);
    assert_eq!(read.blocks, 2);
    for (i, r) in read.records.iter().enumerate() {
        assert_eq!(r.sample_index as usize, i / 3);
        assert_eq!(r.layer as usize, i % 3);
        assert_eq!(r.label as usize, data.samples()[i / 3].label);
    }
    // Layer 0 must differ between inputs; it is not the constant class-token row.
    assert_ne!(read.records[0].values, read.records[3].values);
}

fn arb_dataset() -> impl Strategy<Value = Dataset> {
    (1usize..5, 1usize..3, 1usize..4, 0usize..7)
        .prop_flat_map(|(len, channels, classes, count)| {
            let sample = (
                prop::collection::vec(-1e6f32..1e6, len * channels),
                0..classes,
            );
            let names = prop::collection::vec("[a-zA-Z0-9_ ]{0,12}", classes);
            (Just(len), Just(channels), names, prop::collection::vec(sample, count))
        })
        .prop_map(|(len, channels, names, samples)| {
            let samples = samples
                .into_iter()
                .map(|(v, label)| Sample {
                    signal: Tensor::new(&[len, channels], v).unwrap(),
                    label,
                })
                .collect();
            Dataset::new(samples, names, len, channels).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dataset_round_trip(d in arb_dataset()) {
        let dir = tempdir().unwrap();
        let p = dir.path().join("d.tsvd");
        write_dataset(&d, &p).unwrap();
        let back = read_dataset(&p).unwrap();
        prop_assert_eq!(back.class_names(), d.class_names());
        prop_assert_eq!(back.len(), d.len());
        for (a, b) in back.samples().iter().zip(d.samples()) {
            prop_assert_eq!(a.label, b.label);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a.signal), bits(&b.signal));
        }
    }
}
