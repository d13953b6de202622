use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqa_core::config::TrainConfig;
use vqa_core::gradcheck::tiny_config;
use vqa_core::io::{
    decode_container, encode_container, load_checkpoint, load_checkpoint_for, load_manifest,
    read_container, save_checkpoint, save_manifest, write_container, Checkpoint, Manifest,
};
use vqa_core::regression::{MosRange, SvrParams};
use vqa_core::tensor::SgdMomentum;
use vqa_core::tokenizer::RawVideo;
use vqa_core::{Error, FormatError, Mode, ModelWeights, SvrDecoder};

fn video(seed: u64) -> RawVideo {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, h, w) = (3, 5, 7);
    let px = (0..t * h * w * 3).map(|_| rng.random()).collect();
    RawVideo::new(t, h, w, px).unwrap()
}

fn checkpoint(mode: Mode) -> Checkpoint {
    let mut cfg = TrainConfig::default();
    cfg.model = tiny_config();
    cfg.mode = mode;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let weights = ModelWeights::init(&cfg.model, mode, &mut rng).unwrap();
    let mut opt = SgdMomentum::new(cfg.momentum);
    for (name, t) in weights.params().iter().take(3) {
        opt.set_velocity(name, (0..t.len()).map(|_| rng.random_range(-1.0..1.0)).collect());
    }
    let pairs: Vec<(Vec<f64>, f64)> = (0..5)
        .map(|i| (vec![0.2 * i as f64, 1.0 - 0.2 * i as f64], i as f64))
        .collect();
    let decoder = SvrDecoder::fit(&pairs, 0.0, 5.0, SvrParams::for_range(0.0, 5.0)).unwrap();
    let mut datasets = IndexMap::new();
    datasets.insert("a".to_string(), MosRange::new(1.0, 5.0).unwrap());
    datasets.insert("b".to_string(), MosRange::new(0.0, 100.0).unwrap());
    Checkpoint::new(cfg, weights, opt, 7, datasets, Some(decoder))
}

fn format_err(e: Error) -> FormatError {
    match e {
        Error::Format(f) => f,
        other => panic!("expected a format error, got {other}"),
    }
}

#[test]
fn container_round_trip_is_byte_identical() {
    let v = video(3);
    let bytes = encode_container(&v);
    assert_eq!(bytes.len(), 17 + 3 * 5 * 7 * 3);
    assert_eq!(&bytes[..4], b"SVQV");
    let back = decode_container(&bytes).unwrap();
    assert_eq!(back, v);
    assert_eq!(encode_container(&back), bytes);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("v.svqv");
    write_container(&v, &p).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), bytes);
    assert_eq!(read_container(&p).unwrap(), v);
}

#[test]
fn container_corruptions_are_named() {
    let bytes = encode_container(&video(4));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(format_err(decode_container(&bad).unwrap_err()), FormatError::BadMagic { .. }));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(format_err(decode_container(&bad).unwrap_err()), FormatError::Version { found: 9, .. }));
    assert_eq!(format_err(decode_container(&bytes[..10]).unwrap_err()), FormatError::TruncatedHeader);
    assert!(matches!(
        format_err(decode_container(&bytes[..bytes.len() - 1]).unwrap_err()),
        FormatError::TruncatedPayload { .. }
    ));
    let mut long = bytes.clone();
    long.push(0);
    assert_eq!(format_err(decode_container(&long).unwrap_err()), FormatError::TrailingBytes { extra: 1 });
    let mut zero = bytes.clone();
    zero[5..9].copy_from_slice(&0u32.to_le_bytes());
    assert!(matches!(format_err(decode_container(&zero).unwrap_err()), FormatError::Header(_)));
    let mut huge = bytes.clone();
    for at in [5, 9, 13] {
        huge[at..at + 4].copy_from_slice(&u32::MAX.to_le_bytes());
    }
    assert!(decode_container(&huge).is_err());
    // every prefix fails cleanly
    for n in 0..bytes.len() {
        assert!(decode_container(&bytes[..n]).is_err());
    }
    assert!(matches!(read_container("/nonexistent/x.svqv"), Err(Error::Io { .. })));
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    for mode in [Mode::Image, Mode::Video] {
        let ck = checkpoint(mode);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&ck, &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
        assert_eq!(load_checkpoint_for(&p, mode).unwrap(), ck);
        let other = if mode == Mode::Image { Mode::Video } else { Mode::Image };
        assert!(matches!(
            format_err(load_checkpoint_for(&p, other).unwrap_err()),
            FormatError::Stage { .. }
        ));
    }
}

fn header_split(bytes: &[u8]) -> (String, Vec<u8>) {
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    (String::from_utf8(bytes[8..8 + n].to_vec()).unwrap(), bytes[8 + n..].to_vec())
}

fn rebuild(header: &str, body: &[u8]) -> Vec<u8> {
    let mut out = b"SVQC".to_vec();
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(body);
    out
}

#[test]
fn checkpoint_corruptions_are_named() {
    let bytes = checkpoint(Mode::Video).to_bytes();
    let (header, body) = header_split(&bytes);

    let mut bad = bytes.clone();
    bad[1] = b'?';
    assert!(matches!(format_err(Checkpoint::from_bytes(&bad).unwrap_err()), FormatError::BadMagic { .. }));
    assert_eq!(format_err(Checkpoint::from_bytes(&bytes[..6]).unwrap_err()), FormatError::TruncatedHeader);
    assert_eq!(format_err(Checkpoint::from_bytes(&bytes[..100]).unwrap_err()), FormatError::TruncatedHeader);
    assert!(matches!(
        format_err(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).unwrap_err()),
        FormatError::TruncatedPayload { .. }
    ));
    let mut long = bytes.clone();
    long.extend_from_slice(&[0; 8]);
    assert!(matches!(format_err(Checkpoint::from_bytes(&long).unwrap_err()), FormatError::TrailingBytes { .. }));

    let v2 = header.replacen("\"format_version\": 1", "\"format_version\": 2", 1);
    assert!(matches!(
        format_err(Checkpoint::from_bytes(&rebuild(&v2, &body)).unwrap_err()),
        FormatError::Version { found: 2, .. }
    ));

    // a shape that disagrees with the config snapshot names the tensor
    let reshaped = header.replacen("\"shape\": [\n        12,\n        24\n      ]", "\"shape\": [\n        24,\n        12\n      ]", 1);
    assert_ne!(reshaped, header);
    match format_err(Checkpoint::from_bytes(&rebuild(&reshaped, &body)).unwrap_err()) {
        FormatError::Tensor { name, .. } => assert_eq!(name, "embed.proj"),
        other => panic!("{other}"),
    }

    let renamed = header.replacen("\"embed.proj\"", "\"embed.bogus\"", 1);
    assert!(matches!(
        format_err(Checkpoint::from_bytes(&rebuild(&renamed, &body)).unwrap_err()),
        FormatError::Tensor { .. }
    ));

    let garbled = header.replacen('{', "[", 1);
    assert!(matches!(format_err(Checkpoint::from_bytes(&rebuild(&garbled, &body)).unwrap_err()), FormatError::Header(_)));

    let unknown = header.replacen('{', "{\"extra\": 1,", 1);
    assert!(matches!(format_err(Checkpoint::from_bytes(&rebuild(&unknown, &body)).unwrap_err()), FormatError::Header(_)));

    assert!(matches!(load_checkpoint("/nonexistent/c.ckpt"), Err(Error::Io { .. })));
}

#[test]
fn checkpoint_survives_random_damage_without_panicking() {
    let bytes = checkpoint(Mode::Video).to_bytes();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..300 {
        let mut b = bytes.clone();
        match rng.random_range(0..3) {
            0 => {
                let at = rng.random_range(0..b.len());
                b[at] ^= 1 << rng.random_range(0..8);
            }
            1 => b.truncate(rng.random_range(0..b.len())),
            _ => {
                let at = rng.random_range(0..b.len());
                b.insert(at, rng.random());
            }
        }
        // either a clean error or (for flips inside float data) a valid load
        let _ = Checkpoint::from_bytes(&b);
    }
}

#[test]
fn manifest_round_trip_is_byte_identical() {
    let text = r#"{
  "datasets": {
    "konvid": {
      "mos_min": 1.0,
      "mos_max": 5.0
    },
    "live": {
      "mos_min": 0.0,
      "mos_max": 100.0
    }
  },
  "items": [
    {
      "path": "a.svqv",
      "mos": 3.25,
      "dataset": "konvid",
      "split": "train"
    },
    {
      "path": "sub/b.svqv",
      "mos": 71.5,
      "dataset": "live",
      "label": 2
    }
  ]
}
"#;
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("manifest.json");
    std::fs::write(&p, text).unwrap();
    let m = load_manifest(&p).unwrap();
    assert_eq!(m.to_json(), text);
    assert_eq!(m.resolve(&m.items[1]), dir.path().join("sub/b.svqv"));
    let q = dir.path().join("again.json");
    save_manifest(&m, &q).unwrap();
    assert_eq!(std::fs::read_to_string(&q).unwrap(), text);
}

#[test]
fn manifest_errors_name_the_problem() {
    let p = std::path::Path::new("m.json");
    let undeclared = r#"{"datasets": {"a": {"mos_min": 1, "mos_max": 5}},
"items": [{"path": "x", "mos": 2, "dataset": "b"}]}"#;
    match Manifest::parse(undeclared, p).unwrap_err() {
        Error::Parse { message, .. } => {
            assert!(message.contains("undeclared dataset"), "{message}");
            assert!(message.contains("line 2"), "{message}");
        }
        other => panic!("{other}"),
    }
    let inverted = r#"{"datasets": {"a": {"mos_min": 5, "mos_max": 1}}, "items": []}"#;
    assert!(matches!(Manifest::parse(inverted, p), Err(Error::Parse { .. })));
    let missing = r#"{"datasets": {}, "items": [{"path": "x"}]}"#;
    assert!(matches!(Manifest::parse(missing, p), Err(Error::Parse { .. })));
    assert!(matches!(Manifest::parse("{", p), Err(Error::Parse { .. })));
    let unknown = r#"{"datasets": {}, "items": [], "extra": true}"#;
    assert!(matches!(Manifest::parse(unknown, p), Err(Error::Parse { .. })));

    let clamped = r#"{"datasets": {"a": {"mos_min": 1, "mos_max": 5}},
"items": [{"path": "x", "mos": 7, "dataset": "a"}]}"#;
    let m = Manifest::parse(clamped, p).unwrap();
    assert_eq!(m.items[0].mos, 5.0);
    assert_eq!(m.warnings.len(), 1);
}
