use std::fs;

use bita::checkpoint::Checkpoint;
use bita::manifest::{encode_scene, load_manifest, read_raw_image, save_manifest, write_raw_image};
use bita::pipeline::run_stage;
use bita::{BitaError, RunConfig};
use bita_core::data::{generate_synthetic_dataset, Image, ImageTextPair, SyntheticSpec};
use bita_core::model::{BitaModel, ModelConfig};
use bita_core::train::Stage;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        hidden_dim: 16,
        num_layers: 1,
        num_heads: 2,
        num_prompts: 4,
        image_patches: 4,
        image_feat_dim: 16,
        image_layers: 1,
        image_heads: 2,
        lm_dim: 16,
        lm_layers: 1,
        lm_heads: 2,
        lm_ffn_dim: 32,
        lm_max_positions: 24,
        ..ModelConfig::default()
    }
}

fn tiny_run() -> RunConfig {
    let mut cfg = RunConfig {
        model: tiny_model(),
        ..RunConfig::default()
    };
    cfg.train.batch_size = 4;
    cfg.train.max_steps = Some(3);
    cfg.train.augment = false;
    cfg
}

fn pairs(n: usize) -> Vec<ImageTextPair> {
    generate_synthetic_dataset(&SyntheticSpec::default(), n, 3).unwrap()
}

#[test]
fn empty_manifest_is_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("empty.jsonl");
    fs::write(&p, "").unwrap();
    assert!(load_manifest(&p).unwrap().is_empty());
}

#[test]
fn synthetic_manifest_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("train.jsonl");
    let data = pairs(12);
    save_manifest(&p, &data).unwrap();
    assert_eq!(load_manifest(&p).unwrap(), data);
    let first = fs::read_to_string(&p).unwrap();
    assert!(first.lines().next().unwrap().contains("\"image\":\"synthetic:"));
}

#[test]
fn raw_images_roundtrip_through_f32_files() {
    let dir = tempfile::tempdir().unwrap();
    let data: Vec<f64> = (0..5 * 7 * 3).map(|i| (i % 256) as f64 / 256.0).collect();
    let img = Image::new(5, 7, data).unwrap();
    let pair = ImageTextPair::new("photo-1".into(), img.clone(), vec!["a photo".into()], None).unwrap();
    let p = dir.path().join("raw.jsonl");
    save_manifest(&p, std::slice::from_ref(&pair)).unwrap();
    assert_eq!(load_manifest(&p).unwrap(), vec![pair]);
    let f = dir.path().join("one.f32");
    write_raw_image(&f, &img).unwrap();
    let bytes = fs::read(&f).unwrap();
    assert_eq!(&bytes[..12], &[5, 0, 0, 0, 7, 0, 0, 0, 3, 0, 0, 0]);
    assert_eq!(bytes.len(), 12 + 5 * 7 * 3 * 4);
    assert_eq!(read_raw_image(&f).unwrap(), img);
    fs::write(&f, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(read_raw_image(&f), Err(BitaError::RawImage { .. })));
}

#[test]
fn manifest_errors_carry_line_or_id() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.jsonl");
    let good = format!(
        "{{\"id\":\"a\",\"image\":\"{}\",\"captions\":[\"x\"]}}",
        encode_scene(pairs(1)[0].scene.as_ref().unwrap())
    );
    fs::write(&p, format!("{good}\n{{not json\n")).unwrap();
    match load_manifest(&p).unwrap_err() {
        BitaError::Manifest { line, .. } => assert_eq!(line, 2),
        e => panic!("{e}"),
    }

    fs::write(&p, good.replace("[\"x\"]", "[]")).unwrap();
    let e = load_manifest(&p).unwrap_err().to_string();
    assert!(e.contains("record a has no captions") && e.contains(":1:"), "{e}");

    fs::write(&p, "{\"id\":\"lost\",\"image\":\"raw:nowhere.f32\",\"captions\":[\"x\"]}\n").unwrap();
    match load_manifest(&p).unwrap_err() {
        BitaError::Image { id, .. } => assert_eq!(id, "lost"),
        e => panic!("{e}"),
    }

    fs::write(&p, "{\"id\":\"weird\",\"image\":\"png:x\",\"captions\":[\"x\"]}\n").unwrap();
    assert!(load_manifest(&p).unwrap_err().to_string().contains("weird"));
}

fn trained_checkpoint() -> Checkpoint {
    run_stage(Stage::Stage1, &tiny_run(), &pairs(8), None, &mut |_| {}).unwrap().0
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_checkpoint();
    assert!(ckpt.tensors.iter().any(|(e, _)| e.name.starts_with("adam.m.")));
    let a = dir.path().join("a.bita");
    ckpt.save(&a).unwrap();
    let loaded = Checkpoint::load(&a).unwrap();
    assert_eq!(loaded, ckpt);
    let (model, optim) = loaded.build().unwrap();
    let again = Checkpoint::capture(&model, &optim, loaded.stage, &loaded.vocabulary().unwrap());
    let b = dir.path().join("b.bita");
    again.save(&b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(&fs::read(&a).unwrap()[..4], b"BITA");
}

#[test]
fn restored_frozen_parts_match_a_fresh_model() {
    let ckpt = trained_checkpoint();
    let (model, _) = ckpt.build().unwrap();
    let fresh = BitaModel::new(ckpt.model.clone()).unwrap();
    for id in model.params().ids() {
        if model.params().group(id).is_frozen() {
            assert!(model.params().get(id) == fresh.params().get(id));
        }
    }
}

#[test]
fn corrupt_payload_fails_the_crc() {
    let mut bytes = trained_checkpoint().to_bytes();
    let i = bytes.len() - 40;
    bytes[i] ^= 0x01;
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(BitaError::Crc { .. })));
}

#[test]
fn unknown_version_is_rejected() {
    let mut bytes = trained_checkpoint().to_bytes();
    bytes[4] = 9;
    let n = bytes.len() - 4;
    let crc = crc32(&bytes[..n]);
    bytes[n..].copy_from_slice(&crc.to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(BitaError::Version(9))));
}

fn crc32(bytes: &[u8]) -> u32 {
    // bitwise reference CRC-32 (IEEE, reflected)
    let mut c = !0u32;
    for &b in bytes {
        c ^= b as u32;
        for _ in 0..8 {
            c = if c & 1 == 1 { (c >> 1) ^ 0xEDB8_8320 } else { c >> 1 };
        }
    }
    !c
}

#[test]
fn different_hidden_dim_names_the_tensor() {
    let ckpt = trained_checkpoint();
    let mut wider = BitaModel::new(ModelConfig {
        hidden_dim: 32,
        ..tiny_model()
    })
    .unwrap();
    match ckpt.restore(&mut wider, None).unwrap_err() {
        BitaError::ShapeMismatch { name, stored, expected } => {
            assert_eq!(name, "prompts");
            assert_eq!(stored, vec![4, 16]);
            assert_eq!(expected, vec![4, 32]);
        }
        e => panic!("{e}"),
    }
}

#[test]
fn missing_and_foreign_tensors_are_named() {
    let mut ckpt = trained_checkpoint();
    ckpt.tensors.retain(|(e, _)| e.name != "proj.w");
    let mut m = BitaModel::new(tiny_model()).unwrap();
    assert_eq!(ckpt.restore(&mut m, None).unwrap_err().to_string(), "tensor proj.w missing from checkpoint");

    let ckpt = trained_checkpoint();
    let mut attn = BitaModel::new(ModelConfig {
        mixer: bita_core::MixerKind::SelfAttention,
        ..tiny_model()
    })
    .unwrap();
    let e = ckpt.restore(&mut attn, None).unwrap_err().to_string();
    assert!(e.contains("self_attn") && e.contains("missing"), "{e}");
}
