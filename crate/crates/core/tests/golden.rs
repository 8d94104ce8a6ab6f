//! Byte-exact fixtures for the two on-disk formats. They pin the encoders,
//! the generator and parameter initialization together. Regenerate with
//! `PACE_BLESS=1 cargo test -p pace-core --test golden` after an intended
//! format change.

use std::fs;
use std::path::PathBuf;

use pace_core::corpus::{decode_video, encode_video, generate_video, CorpusSpec};
use pace_core::tensornet::checkpoint::{decode_checkpoint, encode_checkpoint};
use pace_core::tensornet::{BlockConfig, InputShape, Model, ModelConfig, PoolKind, ProjectionHead};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn check_or_bless(name: &str, bytes: &[u8]) {
    let path = fixture(name);
    if std::env::var_os("PACE_BLESS").is_some() {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, bytes).unwrap();
        return;
    }
    let want = fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}; run with PACE_BLESS=1", path.display()));
    assert_eq!(want.len(), bytes.len(), "{name} length");
    if let Some(i) = want.iter().zip(bytes).position(|(a, b)| a != b) {
        panic!("{name} differs first at byte {i}");
    }
}

pub fn golden_spec() -> CorpusSpec {
    CorpusSpec {
        num_videos: 6,
        frames: 6,
        height: 12,
        width: 12,
        channels: 3,
        base_speed: 1.0,
        max_pace: 2.0,
        shape_classes: 3,
        shape_size: 4.0,
        background_noise_amplitude: 0.05,
        distractors: 0,
        seed: 2024,
    }
}

pub fn golden_model_config() -> ModelConfig {
    ModelConfig {
        input: InputShape {
            channels: 1,
            frames: 2,
            height: 4,
            width: 4,
        },
        blocks: vec![BlockConfig::conv3d(2, PoolKind::Spatial), BlockConfig::conv2plus1d(3, PoolKind::Full)],
        embed_dim: 4,
        num_classes: 2,
        projection_head: ProjectionHead::Mlp { hidden: 3 },
    }
}

#[test]
fn generated_video_matches_fixture() {
    let spec = golden_spec();
    spec.validate().unwrap();
    let (video, label, _) = generate_video(&spec, 1);
    assert_eq!(label, 1);
    let bytes = encode_video(&video);
    assert_eq!(&bytes[..4], b"VPC1");
    check_or_bless("video.vpc", &bytes);
    let raw = fs::read(fixture("video.vpc")).unwrap();
    let dims: Vec<u32> = (0..4).map(|i| le_u32(&raw, 4 + 4 * i)).collect();
    assert_eq!(dims, [6, 12, 12, 3]);
    assert_eq!(raw[20], 0, "u8 dtype code");
    assert_eq!(raw.len(), 21 + 6 * 12 * 12 * 3);
    assert_eq!(decode_video(&raw).unwrap(), video);
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

/// Walks a `PCK1` file by hand: count, then per tensor a u16 name length,
/// name, u8 rank, u32 dims and f32 data; a trailing u32 config hash.
fn walk_checkpoint(b: &[u8]) -> (Vec<(String, Vec<usize>)>, u32) {
    assert_eq!(&b[..4], b"PCK1");
    let count = le_u32(b, 4) as usize;
    let mut at = 8;
    let mut entries = Vec::new();
    for _ in 0..count {
        let n = u16::from_le_bytes([b[at], b[at + 1]]) as usize;
        let name = String::from_utf8(b[at + 2..at + 2 + n].to_vec()).unwrap();
        at += 2 + n;
        let rank = b[at] as usize;
        at += 1;
        let dims: Vec<usize> = (0..rank).map(|i| le_u32(b, at + 4 * i) as usize).collect();
        at += 4 * rank + 4 * dims.iter().product::<usize>();
        entries.push((name, dims));
    }
    assert_eq!(at + 4, b.len(), "trailing bytes");
    (entries, le_u32(b, at))
}

#[test]
fn initialized_checkpoint_matches_fixture() {
    let config = golden_model_config();
    let model = Model::<f32>::new(config.clone(), 7).unwrap();
    let bytes = encode_checkpoint(&model.params, config.hash());
    assert_eq!(&bytes[..4], b"PCK1");
    check_or_bless("model.pck", &bytes);
    let raw = fs::read(fixture("model.pck")).unwrap();
    let (entries, stored) = walk_checkpoint(&raw);
    assert_eq!(stored, config.hash());
    let names: Vec<&str> = entries.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, model.params.names().iter().map(String::as_str).collect::<Vec<_>>());
    let (_, first_dims) = &entries[0];
    assert_eq!(first_dims, &vec![2, 1, 3, 3, 3]);
    let (params, hash) = decode_checkpoint(&raw).unwrap();
    assert_eq!(hash, config.hash());
    assert_eq!(params, model.params);
}
