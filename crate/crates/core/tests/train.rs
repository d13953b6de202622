use vqa_core::config::{lr_schedule, TrainConfig};
use vqa_core::io::{Manifest, ManifestItem};
use vqa_core::model::is_time_param;
use vqa_core::regression::{make_anchors, scale_mos, MosRange};
use vqa_core::train::synth::{make_synthetic_dataset, SynthSpec};
use vqa_core::train::{
    evaluate, infer_video, load_items, split_dataset, train_stage_image, train_stage_video,
    transfer_weights, Decoder, TrainItem,
};
use vqa_core::tokenizer::RawVideo;
use vqa_core::{Error, Mode, ModelConfig};

fn small_model() -> ModelConfig {
    ModelConfig {
        n_frames: 2,
        crop: 8,
        patch: 4,
        dim: Some(24),
        heads: 2,
        blocks: 1,
        ..ModelConfig::default()
    }
}

fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        model: small_model(),
        epochs,
        batch: 2,
        lr0: 0.05,
        ..TrainConfig::default()
    }
}

/// Large enough to see the noise: two 16×16 patches per frame side.
fn learner_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            n_frames: 2,
            crop: 32,
            patch: 16,
            dim: Some(96),
            heads: 4,
            blocks: 2,
            ..ModelConfig::default()
        },
        epochs,
        batch: 4,
        lr0: 0.01,
        ..TrainConfig::default()
    }
}

fn synth(count: usize, datasets: usize, seed: u64) -> (tempfile::TempDir, Manifest, Vec<TrainItem>) {
    synth_sized(count, datasets, seed, 12)
}

fn synth_sized(count: usize, datasets: usize, seed: u64, side: usize) -> (tempfile::TempDir, Manifest, Vec<TrainItem>) {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        count,
        frames: 4,
        height: side,
        width: side,
        datasets,
        seed,
        ..SynthSpec::default()
    };
    let m = make_synthetic_dataset(&spec, dir.path()).unwrap();
    let codec = small_model().codec().unwrap();
    let items = load_items(&m, &(0..count).collect::<Vec<_>>(), &codec).unwrap();
    (dir, m, items)
}

#[test]
fn schedule_breakpoints() {
    let c = TrainConfig::default();
    assert_eq!(lr_schedule(0, &c), 0.005);
    assert_eq!(lr_schedule(10, &c), 0.0005);
    for e in 0..60 {
        assert!(lr_schedule(e + 1, &c) <= lr_schedule(e, &c));
        if (e + 1) % 10 != 0 {
            assert_eq!(lr_schedule(e + 1, &c), lr_schedule(e, &c));
        }
    }
}

fn manifest_of(sizes: &[usize]) -> Manifest {
    let mut m = Manifest::default();
    for (d, &n) in sizes.iter().enumerate() {
        m.datasets.insert(format!("d{d}"), MosRange::new(0.0, 1.0).unwrap());
        for i in 0..n {
            m.items.push(ManifestItem {
                path: format!("{d}-{i}"),
                mos: 0.5,
                dataset: format!("d{d}"),
                split: None,
                label: None,
            });
        }
    }
    m
}

#[test]
fn split_is_stratified_disjoint_and_seeded() {
    let m = manifest_of(&[10]);
    let (tr, te) = split_dataset(&m, 3).unwrap();
    assert_eq!((tr.len(), te.len()), (8, 2));
    assert!(tr.iter().all(|i| !te.contains(i)));
    assert_eq!(split_dataset(&m, 3).unwrap(), (tr, te));

    let m = manifest_of(&[10, 10]);
    let (tr, te) = split_dataset(&m, 1).unwrap();
    let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..20).collect::<Vec<_>>());
    for d in ["d0", "d1"] {
        assert_eq!(te.iter().filter(|&&i| m.items[i].dataset == d).count(), 2);
    }
    assert!(matches!(split_dataset(&manifest_of(&[4]), 0), Err(Error::Input(_))));
}

#[test]
fn synthetic_sets_are_deterministic_and_monotone() {
    let (a, ma, _) = synth(6, 2, 5);
    let (b, mb, _) = synth(6, 2, 5);
    assert_eq!(ma.items.len(), 6);
    for item in &ma.items {
        let x = std::fs::read(a.path().join(&item.path)).unwrap();
        let y = std::fs::read(b.path().join(&item.path)).unwrap();
        assert_eq!(x, y);
    }
    assert_eq!(
        std::fs::read(a.path().join("manifest.json")).unwrap(),
        std::fs::read(b.path().join("manifest.json")).unwrap()
    );
    assert_eq!(mb.items, ma.items);
    // more noise, lower score: rough pixel variance orders the items
    for ds in ["synth0", "synth1"] {
        let mut rows: Vec<(f64, f64)> = ma
            .items
            .iter()
            .filter(|i| i.dataset == ds)
            .map(|i| {
                let v = vqa_core::io::read_container(a.path().join(&i.path)).unwrap();
                (i.mos, roughness(&v))
            })
            .collect();
        rows.sort_by(|x, y| x.0.total_cmp(&y.0));
        assert!(rows.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 > w[1].1), "{rows:?}");
    }
}

/// Mean squared difference between horizontally adjacent pixels.
fn roughness(v: &RawVideo) -> f64 {
    let w = v.width() * 3;
    let px = v.pixels();
    let mut s = 0.0;
    let mut n = 0.0;
    for row in px.chunks(w) {
        for i in 3..row.len() {
            let d = row[i] as f64 - row[i - 3] as f64;
            s += d * d;
            n += 1.0;
        }
    }
    s / n
}

#[test]
fn mixed_datasets_share_encoded_targets() {
    let codec = make_anchors(6, 0.0, 5.0).unwrap();
    let a = scale_mos(3.0, MosRange::new(1.0, 5.0).unwrap(), &codec).unwrap();
    let b = scale_mos(50.0, MosRange::new(0.0, 100.0).unwrap(), &codec).unwrap();
    assert_eq!(a, b);
    assert_eq!(codec.encode(a), codec.encode(b));
}

#[test]
fn image_stage_smoke() {
    let (_d, m, items) = synth_sized(8, 1, 1, 40);
    let mut cfg = learner_config(2);
    cfg.batch = 2;
    let out = train_stage_image(&items, &cfg, &m.datasets).unwrap();
    assert_eq!(out.history.len(), 2);
    assert!(out.history[1].mean_loss < out.history[0].mean_loss, "{:?}", out.history);
    let ck = &out.checkpoint;
    assert_eq!(ck.stage, Mode::Image);
    assert!(ck.weights.params().keys().all(|k| !is_time_param(k)));
    assert!(ck.decoder.as_ref().is_some_and(|d| d.fitted));
    assert!(train_stage_image(&[], &small_config(1), &m.datasets).is_err());
}

#[test]
fn image_stage_cross_entropy_on_labels() {
    let (_d, m, mut items) = synth(8, 1, 2);
    for (i, it) in items.iter_mut().enumerate() {
        it.target.label = Some(i % 3);
    }
    let mut cfg = small_config(2);
    cfg.model.classes = Some(3);
    cfg.loss = vqa_core::LossKind::CrossEntropy;
    let out = train_stage_image(&items, &cfg, &m.datasets).unwrap();
    assert!(out.history.iter().all(|s| s.mean_loss.is_finite()));
    // a classification head has no anchor decoder
    assert!(out.checkpoint.decoder.is_none());
}

#[test]
fn vr_overfits_four_items() {
    // frames the size of the crop: every epoch sees the same clips
    let (_d, m, items) = synth_sized(4, 1, 3, 32);
    let mut cfg = learner_config(100);
    cfg.decay_every = 1000;
    let out = train_stage_image(&items, &cfg, &m.datasets).unwrap();
    let last = out.history.last().unwrap().mean_loss;
    assert!(last < 0.05, "final loss {last}");
}

#[test]
fn video_stage_smoke_and_determinism() {
    let (_d, m, items) = synth(8, 2, 4);
    let cfg = small_config(2);
    let a = train_stage_video(&items, &cfg, &m.datasets, None).unwrap();
    let b = train_stage_video(&items, &cfg, &m.datasets, None).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(a.checkpoint.stage, Mode::Video);
    assert!(a.checkpoint.decoder.as_ref().is_some_and(|d| d.fitted));
    assert_eq!(a.checkpoint.epoch, 2);

    let mut missing = m.datasets.clone();
    missing.shift_remove("synth1");
    assert!(matches!(
        train_stage_video(&items, &cfg, &missing, None),
        Err(Error::Config(_))
    ));
}

#[test]
fn memorizes_eight_videos() {
    let (_d, m, items) = synth_sized(8, 1, 6, 40);
    let mut cfg = learner_config(60);
    cfg.decay_every = 40;
    let out = train_stage_video(&items, &cfg, &m.datasets, None).unwrap();
    let (rows, _) = evaluate(&out.checkpoint, &items, "train", Decoder::Expectation).unwrap();
    let s = rows[0].srocc.unwrap();
    assert!(s >= 0.9, "train srocc {s}");
}

#[test]
fn transfer_copies_shared_weights() {
    let (_d, m, items) = synth(8, 1, 7);
    let mut cfg = small_config(1);
    let image = train_stage_image(&items, &cfg, &m.datasets).unwrap().checkpoint;
    cfg.model.n_frames = 3;
    let video = transfer_weights(&image.weights, &cfg.model, 0).unwrap();
    for (name, t) in video.params() {
        if name == "embed.pos_temporal" || name.ends_with("time.proj") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        } else if is_time_param(name) {
            let fresh = t.data();
            assert!(image.weights.params().values().all(|s| s.data() != fresh), "{name}");
        } else {
            let src = image.weights.get(name).unwrap();
            let same = src
                .data()
                .iter()
                .zip(t.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "{name}");
        }
    }
    let again = train_stage_video(&items, &cfg, &m.datasets, Some(video)).unwrap();
    assert_eq!(again.checkpoint.stage, Mode::Video);

    let mut wide = cfg.model.clone();
    wide.dim = Some(32);
    wide.heads = 4;
    match transfer_weights(&image.weights, &wide, 0) {
        Err(Error::Config(msg)) => assert!(msg.contains("dim") && msg.contains("heads"), "{msg}"),
        other => panic!("{other:?}"),
    }
    assert!(transfer_weights(&again.checkpoint.weights, &cfg.model, 0).is_err());
}

#[test]
fn inference_averages_three_crops() {
    let (_d, m, items) = synth(8, 2, 8);
    let ck = train_stage_video(&items, &small_config(1), &m.datasets, None).unwrap().checkpoint;
    let v = &items[3].video;
    let a = infer_video(&ck, v, Some("synth1"), Decoder::Svr).unwrap();
    let b = infer_video(&ck, v, Some("synth1"), Decoder::Svr).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.crop_scores.len(), 3);
    let mean = a.crop_scores.iter().sum::<f64>() / 3.0;
    assert!((mean - a.scaled).abs() < 1e-12);
    let r = m.datasets["synth1"];
    assert!((a.score - (r.mos_min + a.scaled / 5.0 * (r.mos_max - r.mos_min))).abs() < 1e-9);

    let flat = RawVideo::new(4, 12, 12, vec![90; 4 * 12 * 12 * 3]).unwrap();
    let p = infer_video(&ck, &flat, None, Decoder::Expectation).unwrap();
    assert_eq!(p.crop_scores[0], p.crop_scores[1]);
    assert_eq!(p.crop_scores[1], p.crop_scores[2]);
    assert_eq!(p.score, p.scaled);

    let mut bare = ck.clone();
    bare.decoder = None;
    assert!(matches!(infer_video(&bare, v, None, Decoder::Svr), Err(Error::State(_))));
    assert!(infer_video(&ck, v, Some("nope"), Decoder::Svr).is_err());
}

#[test]
fn evaluation_reports_each_dataset() {
    let (_d, m, items) = synth(8, 2, 9);
    let ck = train_stage_video(&items, &small_config(1), &m.datasets, None).unwrap().checkpoint;
    let (rows, preds) = evaluate(&ck, &items, "train", Decoder::Svr).unwrap();
    assert_eq!(preds.len(), 8);
    let names: Vec<&str> = rows.iter().map(|r| r.dataset.as_str()).collect();
    assert_eq!(names, ["synth0", "synth1", "all"]);
    assert_eq!(rows[0].n + rows[1].n, 8);
    let mut csv = Vec::new();
    vqa_core::train::write_eval_csv(&rows, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("dataset,split,srocc,plcc,n\n"));
    assert_eq!(text.lines().count(), 4);
}
