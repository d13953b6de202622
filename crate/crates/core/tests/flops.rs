use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqa_core::flops::{estimate_flops, estimate_flops_for_source};
use vqa_core::gradcheck::tiny_config;
use vqa_core::model::forward;
use vqa_core::tokenizer::{clip_patches, sample_frame_indices, CropMode, RawVideo};
use vqa_core::{Graph, Mode, ModelConfig, ModelWeights};

fn instrumented(cfg: &ModelConfig, mode: Mode, h: usize, w: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let weights = ModelWeights::init(cfg, mode, &mut rng).unwrap();
    let t = 5;
    let video = RawVideo::new(t, h, w, (0..t * h * w * 3).map(|_| rng.random()).collect()).unwrap();
    let frames = cfg.frames(mode);
    let idx = sample_frame_indices(t, frames).unwrap();
    let x = clip_patches(&video, &idx, cfg.crop, cfg.patch, CropMode::Center, &mut rng).unwrap();
    let mut g = Graph::new();
    let bound = weights.bind(&mut g);
    forward(&mut g, &bound, cfg, mode, x, frames).unwrap();
    g.macs()
}

#[test]
fn closed_form_matches_instrumented_counter() {
    let mut cfg = tiny_config();
    for (frames, classes) in [(2, None), (3, Some(4))] {
        cfg.n_frames = frames;
        cfg.classes = classes;
        for mode in [Mode::Video, Mode::Image] {
            for (h, w) in [(4, 4), (9, 13), (2, 3)] {
                assert_eq!(
                    instrumented(&cfg, mode, h, w),
                    estimate_flops(&cfg, mode).total(),
                    "{mode} N={frames} source {h}x{w}"
                );
            }
        }
    }
}

#[test]
fn instrumented_counter_on_wider_grid() {
    let cfg = ModelConfig {
        n_frames: 3,
        crop: 12,
        patch: 4,
        dim: Some(16),
        heads: 4,
        blocks: 1,
        ..ModelConfig::default()
    };
    assert_eq!(instrumented(&cfg, Mode::Video, 20, 30), estimate_flops(&cfg, Mode::Video).total());
}

#[test]
fn count_does_not_depend_on_source_resolution() {
    let cfg = ModelConfig::default();
    let base = estimate_flops(&cfg, Mode::Video);
    for (h, w) in [(540, 960), (720, 1280), (1080, 1920), (100, 100)] {
        assert_eq!(estimate_flops_for_source(&cfg, Mode::Video, h, w).unwrap(), base);
    }
    assert!(estimate_flops_for_source(&cfg, Mode::Video, 0, 10).is_err());
}

#[test]
fn default_breakdown() {
    // K = 196·16 = 3136, R = 3137, D = 768, 12 blocks, m = 6
    let f = estimate_flops(&ModelConfig::default(), Mode::Video);
    let (k, r, d, p, n) = (3136u64, 3137u64, 768u64, 196u64, 16u64);
    assert_eq!(f.embedding, k * 768 * d);
    assert_eq!(f.time, 12 * (4 * r * d * d + 2 * k * (n + 1) * d));
    assert_eq!(f.space, 12 * (4 * r * d * d + 2 * k * (p + 1) * d + 2 * r * d));
    assert_eq!(f.mlp, 12 * 8 * r * d * d);
    assert_eq!(f.head, d * d + d * 6);
    let image = estimate_flops(&ModelConfig::default(), Mode::Image);
    assert_eq!(image.time, 0);
    assert!(image.total() * 10 < f.total());
}
