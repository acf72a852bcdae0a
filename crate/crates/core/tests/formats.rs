use videomap_core::checkpoint::{load_into, load_model, save_checkpoint, Checkpoint};
use videomap_core::data::{gen_clip, make_dataset, read_dataset, ClipDims, ClipSpec, Dataset, DatasetKind, Sprite};
use videomap_core::{Error, Model, RunConfig};

const DIMS: ClipDims = ClipDims { frames: 4, channels: 3, height: 16, width: 16 };

fn spec(velocity: (f64, f64)) -> ClipSpec {
    ClipSpec { sprite: Sprite::Square, size: 4, start: (3.0, 5.0), velocity, texture_seed: 42, label: None }
}

#[test]
fn still_sprite_gives_identical_frames() {
    let clip = gen_clip(&spec((0.0, 0.0)), DIMS).unwrap();
    let frame = 3 * 16 * 16;
    for t in 1..4 {
        assert_eq!(clip.data()[..frame], clip.data()[t * frame..(t + 1) * frame]);
    }
    assert!(clip.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn unit_velocity_shifts_sprite_right_by_one_pixel() {
    let clip = gen_clip(&spec((1.0, 0.0)), DIMS).unwrap();
    for t in 1..4 {
        let x0 = 3 + t;
        for c in 0..3 {
            for y in 5..9 {
                for x in x0..x0 + 4 {
                    assert_eq!(clip.at(&[t, c, y, x]), clip.at(&[t - 1, c, y, x - 1]), "t={t} c={c} y={y} x={x}");
                }
            }
        }
    }
}

#[test]
fn same_spec_is_bit_identical() {
    let a = gen_clip(&spec((1.3, -0.7)), DIMS).unwrap();
    let b = gen_clip(&spec((1.3, -0.7)), DIMS).unwrap();
    assert_eq!(a, b);
    let circle = ClipSpec { sprite: Sprite::Circle, ..spec((1.3, -0.7)) };
    assert_ne!(gen_clip(&circle, DIMS).unwrap(), a);
}

#[test]
fn labeled_dataset_is_balanced_and_round_trips() {
    let ds = make_dataset(DatasetKind::Labeled, 64, 4, 7, DIMS).unwrap();
    let mut counts = [0; 4];
    for i in 0..64 {
        counts[ds.label(i).unwrap() as usize] += 1;
        assert_eq!(ds.label(i).unwrap() as usize, i % 4);
    }
    assert_eq!(counts, [16; 4]);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("labeled.bin");
    ds.write(&path).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.dims, DIMS);
    for (i, (clip, label)) in back.iter().enumerate() {
        assert_eq!(clip, ds.clip(i));
        assert_eq!(label, ds.label(i));
    }
    let path2 = dir.path().join("again.bin");
    back.write(&path2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    assert_eq!(make_dataset(DatasetKind::Labeled, 64, 4, 7, DIMS).unwrap().to_bytes(), ds.to_bytes());
}

#[test]
fn pretrain_payload_has_no_labels() {
    let ds = make_dataset(DatasetKind::Pretrain, 5, 0, 1, DIMS).unwrap();
    assert!(!ds.is_labeled());
    assert_eq!(ds.to_bytes().len(), 27 + 5 * DIMS.numel() + 4);
    let labeled = make_dataset(DatasetKind::Labeled, 5, 4, 1, DIMS).unwrap();
    assert_eq!(labeled.to_bytes().len(), 27 + 5 * (DIMS.numel() + 2) + 4);
}

#[test]
fn dataset_corruption_and_truncation_are_reported() {
    let bytes = make_dataset(DatasetKind::Labeled, 3, 4, 2, DIMS).unwrap().to_bytes();
    for i in [30, 27 + DIMS.numel(), bytes.len() - 5] {
        let mut bad = bytes.clone();
        bad[i] ^= 0x10;
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Format { .. })), "byte {i}");
    }
    let err = Dataset::from_bytes(&bytes[..bytes.len() - 10]).unwrap_err();
    match err {
        Error::Format { offset, message } => {
            assert_eq!(offset, 27);
            assert!(message.contains(&format!("expected {}", 3 * (DIMS.numel() + 2))), "{message}");
        }
        e => panic!("unexpected {e}"),
    }
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(Dataset::from_bytes(&magic), Err(Error::Format { offset: 0, .. })));
    let mut version = bytes;
    version[8] = 2;
    assert!(matches!(Dataset::from_bytes(&version), Err(Error::Format { offset: 8, .. })));
}

#[test]
fn oversized_sprite_is_a_spec_error() {
    let s = ClipSpec { size: 17, ..spec((0.0, 0.0)) };
    assert!(matches!(gen_clip(&s, DIMS), Err(Error::Spec(_))));
}

fn small() -> RunConfig {
    RunConfig::parse("frames=2\nimage_size=8\npatch=4\nembed_dim=8\nheads=2\ndepth=5\nteacher_dim=4\ndecoder_depth=1\n")
        .unwrap()
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = Model::new(&small()).unwrap();
    model.attach_head(4, 3);
    let a = dir.path().join("a.ckpt");
    save_checkpoint(&model, &a).unwrap();
    let loaded = load_model(&a).unwrap();
    for (x, y) in loaded.store.entries().iter().zip(model.store.entries()) {
        assert_eq!(x.name, y.name);
        assert_eq!(
            x.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            y.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
    let b = dir.path().join("b.ckpt");
    save_checkpoint(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn checkpoint_detects_every_single_byte_flip() {
    let model = Model::new(&small()).unwrap();
    let bytes = Checkpoint::from_model(&model).to_bytes();
    let step = (bytes.len() / 97).max(1);
    for i in (0..bytes.len()).step_by(step) {
        let mut bad = bytes.clone();
        bad[i] ^= 0x01;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))), "byte {i}");
    }
}

#[test]
fn checkpoint_name_and_config_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d5.ckpt");
    save_checkpoint(&Model::new(&small()).unwrap(), &path).unwrap();

    let mut deeper = small();
    deeper.model.depth = 6;
    let mut model = Model::new(&deeper).unwrap();
    match load_into(&mut model, &path) {
        Err(Error::Checkpoint(m)) => assert!(m.contains("missing tensor `encoder.layers.5."), "{m}"),
        other => panic!("{other:?}"),
    }

    let mut headed = Model::new(&small()).unwrap();
    headed.attach_head(3, 0);
    match load_into(&mut headed, &path) {
        Err(Error::Checkpoint(m)) => assert!(m.contains("head.linear"), "{m}"),
        other => panic!("{other:?}"),
    }

    let mut ckpt = Checkpoint::read(&path).unwrap();
    let mut model = Model::new(&small()).unwrap();
    ckpt.tensors.push(("stray".into(), videomap_core::Tensor::zeros(&[1])));
    assert!(matches!(videomap_core::checkpoint::apply_checkpoint(&mut model, &ckpt), Err(Error::Checkpoint(m)) if m.contains("stray")));

    // Training-only keys may differ; layout changes may not.
    let mut reseeded = small();
    reseeded.model.seed = 99;
    reseeded.train.lr = 0.5;
    load_into(&mut Model::new(&reseeded).unwrap(), &path).unwrap();
    let mut relaid = small();
    relaid.model.mamba_per_attn = 1;
    assert!(matches!(load_into(&mut Model::new(&relaid).unwrap(), &path), Err(Error::Checkpoint(_))));
}

#[test]
fn config_echo_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    let model = Model::new(&small()).unwrap();
    let mut ckpt = Checkpoint::from_model(&model);
    ckpt.config_text = ckpt.config_text.replace("bidirectional=true", "bidirectional=false");
    std::fs::write(&path, ckpt.to_bytes()).unwrap();
    let mut target = Model::new(&small()).unwrap();
    match load_into(&mut target, &path) {
        Err(Error::Checkpoint(m)) => assert!(m.contains("bidirectional"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_checkpoint_file_is_an_error() {
    assert!(matches!(load_model(std::path::Path::new("/nonexistent/x.ckpt")), Err(Error::Checkpoint(_))));
}
