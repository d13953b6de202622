//! The staged training protocol: image-mode training, transfer of the
//! shared weights into a video model, video-mode training with a final
//! decoder fit, and test-time inference.

pub mod data;
pub mod synth;

use std::io::Write;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{lr_schedule, TrainConfig};
use crate::encoder::Mode;
use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::metrics::{plcc, srocc};
use crate::model::{self, is_time_param, ModelConfig, ModelWeights};
use crate::regression::{
    encode_mos, expectation_decode, sample_loss, unscale_mos, MosRange, ProbabilityVector,
    SvrDecoder, SvrParams,
};
use crate::tensor::{Graph, SgdMomentum};
use crate::tokenizer::{clip_patches, ClipSampling, CropMode, RawVideo};

pub use data::{load_items, manifest_split, split_dataset, TrainItem};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    /// Correlations between targets and the expectation-decoded
    /// predictions seen during the epoch; `None` when degenerate.
    pub srocc: Option<f64>,
    pub plcc: Option<f64>,
}

pub fn write_epoch_csv(history: &[EpochStats], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "epoch,lr,mean_loss,train_srocc,train_plcc")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for s in history {
        writeln!(
            out,
            "{},{},{},{},{}",
            s.epoch,
            s.lr,
            s.mean_loss,
            opt(s.srocc),
            opt(s.plcc)
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
}

/// Independent random streams derived from one seed.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const INIT_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const TRANSFER_STREAM: u64 = 2;

/// Patch rows of one clip: `n` equally spaced frames, one crop window.
pub fn clip_tensor(
    video: &RawVideo,
    config: &ModelConfig,
    frames: usize,
    sampling: ClipSampling,
    crop: CropMode,
    rng: &mut ChaCha8Rng,
) -> Result<crate::tensor::Tensor> {
    let indices = sampling.indices(video.frame_count(), frames)?;
    clip_patches(video, &indices, config.crop, config.patch, crop, rng)
}

/// Shuffled minibatch SGD with momentum over `items` for `cfg.epochs`
/// epochs. Each sample's loss is divided by its batch size so an update
/// follows the batch-mean gradient.
pub fn run_epochs(
    weights: &mut ModelWeights,
    optimizer: &mut SgdMomentum,
    items: &[TrainItem],
    cfg: &TrainConfig,
    start_epoch: usize,
) -> Result<Vec<EpochStats>> {
    if items.is_empty() {
        return Err(Error::Input("no training items".into()));
    }
    let mcfg = weights.config.clone();
    let mode = weights.mode;
    let frames = mcfg.frames(mode);
    let codec = mcfg.codec()?;
    let mut rng = stream(cfg.seed, TRAIN_STREAM);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in start_epoch..start_epoch + cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut targets = Vec::with_capacity(items.len());
        let mut preds = Vec::with_capacity(items.len());
        for batch in order.chunks(cfg.batch) {
            weights.zero_grad();
            let share = 1.0 / batch.len() as f64;
            for &i in batch {
                let item = &items[i];
                let patches = clip_tensor(
                    &item.video,
                    &mcfg,
                    frames,
                    ClipSampling::Uniform,
                    CropMode::Random,
                    &mut rng,
                )?;
                let mut g = Graph::new();
                let bound = weights.bind(&mut g);
                let out = model::forward(&mut g, &bound, &mcfg, mode, patches, frames)?;
                let loss = sample_loss(&mut g, out.logits, cfg.loss, item.target, &codec)?;
                total += g.data(loss)[0];
                if g.value(out.probs).len() == codec.len() {
                    targets.push(item.target.score);
                    preds.push(expectation_decode(g.data(out.probs), &codec));
                }
                let scaled = g.scale(loss, share);
                g.backward(scaled)?;
                weights.accumulate_grads(&g, &bound)?;
            }
            optimizer.step(weights.iter_mut(), lr)?;
        }
        let stats = EpochStats {
            epoch,
            lr,
            mean_loss: total / items.len() as f64,
            srocc: srocc(&targets, &preds).ok(),
            plcc: plcc(&targets, &preds).ok(),
        };
        log::info!(
            "{mode} epoch {epoch}: lr {lr:e} loss {:.5} srocc {:?}",
            stats.mean_loss,
            stats.srocc
        );
        if !stats.mean_loss.is_finite() {
            return Err(Error::State(format!("loss diverged at epoch {epoch}")));
        }
        history.push(stats);
    }
    Ok(history)
}

/// Fits the score decoder on ground-truth encodings `(encode(c), c)` of
/// the training items.
pub fn fit_decoder(items: &[TrainItem], config: &ModelConfig, seed: u64) -> Result<SvrDecoder> {
    let codec = config.codec()?;
    let pairs: Vec<(Vec<f64>, f64)> = items
        .iter()
        .map(|it| (encode_mos(it.target.score, &codec).into_inner(), it.target.score))
        .collect();
    let params = SvrParams {
        seed,
        ..SvrParams::for_range(codec.lo(), codec.hi())
    };
    SvrDecoder::fit(&pairs, codec.lo(), codec.hi(), params)
}

fn finish(
    cfg: &TrainConfig,
    weights: ModelWeights,
    optimizer: SgdMomentum,
    history: Vec<EpochStats>,
    items: &[TrainItem],
    datasets: &IndexMap<String, MosRange>,
) -> Result<TrainOutcome> {
    let decoder = if weights.config.head_width() == weights.config.anchors && items.len() >= 2 {
        Some(fit_decoder(items, &weights.config, cfg.seed)?)
    } else {
        None
    };
    let epoch = history.last().map_or(0, |s| s.epoch + 1);
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(cfg.clone(), weights, optimizer, epoch, datasets.clone(), decoder),
        history,
    })
}

/// Trains the space-attention-only network on single frames.
pub fn train_stage_image(
    items: &[TrainItem],
    cfg: &TrainConfig,
    datasets: &IndexMap<String, MosRange>,
) -> Result<TrainOutcome> {
    if items.is_empty() {
        return Err(Error::Input("image stage needs at least one item".into()));
    }
    let mut cfg = cfg.clone();
    cfg.mode = Mode::Image;
    cfg.validate()?;
    let mut weights = ModelWeights::init(&cfg.model, Mode::Image, &mut stream(cfg.seed, INIT_STREAM))?;
    let mut optimizer = SgdMomentum::new(cfg.momentum);
    let history = run_epochs(&mut weights, &mut optimizer, items, &cfg, 0)?;
    finish(&cfg, weights, optimizer, history, items, datasets)
}

/// Builds a video model from an image-stage model: embedding, spatial
/// positions, MOS token, space-attention stages, MLPs, final norm and
/// (when its width matches) the head are copied; temporal positions start
/// at zero and time-attention stages are freshly initialized with a zero
/// output projection.
pub fn transfer_weights(image: &ModelWeights, video: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    if image.mode != Mode::Image {
        return Err(Error::Config("transfer source must be an image-stage model".into()));
    }
    let src = &image.config;
    let mut mismatches = Vec::new();
    let checks = [
        ("patch", src.patch, video.patch),
        ("crop", src.crop, video.crop),
        ("dim", src.width(), video.width()),
        ("heads", src.heads, video.heads),
        ("blocks", src.blocks, video.blocks),
    ];
    for (name, a, b) in checks {
        if a != b {
            mismatches.push(format!("{name}: image {a} vs video {b}"));
        }
    }
    if !mismatches.is_empty() {
        return Err(Error::Config(format!(
            "incompatible stages: {}",
            mismatches.join(", ")
        )));
    }
    let mut out = ModelWeights::init(video, Mode::Video, &mut stream(seed, TRANSFER_STREAM))?;
    for (name, t) in image.params() {
        if is_time_param(name) {
            continue;
        }
        match out.get_mut(name) {
            Some(dst) if dst.shape() == t.shape() => {
                dst.data_mut().copy_from_slice(t.data());
            }
            Some(_) => log::warn!("{name}: shape differs between stages; keeping fresh init"),
            None => {}
        }
    }
    Ok(out)
}

/// Trains the full space-time model, optionally starting from transferred
/// weights, then fits the decoder on the training items.
pub fn train_stage_video(
    items: &[TrainItem],
    cfg: &TrainConfig,
    datasets: &IndexMap<String, MosRange>,
    init: Option<ModelWeights>,
) -> Result<TrainOutcome> {
    if items.is_empty() {
        return Err(Error::Input("video stage needs at least one item".into()));
    }
    for it in items {
        if !datasets.contains_key(&it.dataset) {
            return Err(Error::Config(format!(
                "no MOS range declared for dataset {:?}",
                it.dataset
            )));
        }
    }
    let mut cfg = cfg.clone();
    cfg.mode = Mode::Video;
    cfg.validate()?;
    let mut weights = match init {
        Some(w) => {
            if w.mode != Mode::Video || w.config != cfg.model {
                return Err(Error::Config(
                    "initial weights do not match the video configuration".into(),
                ));
            }
            w
        }
        None => ModelWeights::init(&cfg.model, Mode::Video, &mut stream(cfg.seed, INIT_STREAM))?,
    };
    let mut optimizer = SgdMomentum::new(cfg.momentum);
    let history = run_epochs(&mut weights, &mut optimizer, items, &cfg, 0)?;
    finish(&cfg, weights, optimizer, history, items, datasets)
}

/// Score decoder used at inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Decoder {
    #[default]
    Svr,
    Expectation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Final score: raw scale when a dataset was given, scaled otherwise.
    pub score: f64,
    /// Mean of the crop scores on the scaled range.
    pub scaled: f64,
    /// Decoded scaled score of each crop (top-left, center, bottom-right).
    pub crop_scores: Vec<f64>,
    /// Mean of the crops' probability vectors.
    pub probs: ProbabilityVector,
}

/// Head output `ŷ` of one deterministic crop.
pub fn predict_probs(
    weights: &ModelWeights,
    video: &RawVideo,
    sampling: ClipSampling,
    crop: CropMode,
) -> Result<Vec<f64>> {
    let cfg = &weights.config;
    let frames = cfg.frames(weights.mode);
    // the crop modes used here are deterministic; the stream is never read
    let mut unused = stream(0, u64::MAX);
    let patches = clip_tensor(video, cfg, frames, sampling, crop, &mut unused)?;
    let mut g = Graph::new();
    let bound = weights.bind(&mut g);
    let out = model::forward(&mut g, &bound, cfg, weights.mode, patches, frames)?;
    Ok(g.data(out.probs).to_vec())
}

/// Three-crop inference: each crop is decoded to a scaled score, the
/// scores are averaged and, given a dataset id, mapped back to its raw
/// range.
pub fn infer_video(
    ckpt: &Checkpoint,
    video: &RawVideo,
    dataset: Option<&str>,
    decoder: Decoder,
) -> Result<Prediction> {
    let cfg = &ckpt.weights.config;
    let codec = cfg.codec()?;
    let svr = match decoder {
        Decoder::Svr => match &ckpt.decoder {
            Some(d) if d.fitted => Some(d),
            _ => return Err(Error::State("checkpoint has no fitted decoder".into())),
        },
        Decoder::Expectation => None,
    };
    let range = match dataset {
        Some(name) => Some(ckpt.datasets.get(name).copied().ok_or_else(|| {
            Error::Config(format!("checkpoint has no MOS range for dataset {name:?}"))
        })?),
        None => None,
    };
    let mut crop_scores = Vec::with_capacity(3);
    let mut mean_probs = vec![0.0; cfg.head_width()];
    for mode in CropMode::INFERENCE {
        let probs = predict_probs(&ckpt.weights, video, ckpt.config.sampling, mode)?;
        let c = match svr {
            Some(d) => d.predict(&probs)?,
            None => expectation_decode(&probs, &codec),
        };
        crop_scores.push(c);
        for (m, p) in mean_probs.iter_mut().zip(&probs) {
            *m += p / 3.0;
        }
    }
    let scaled = crop_scores.iter().sum::<f64>() / crop_scores.len() as f64;
    let score = match range {
        Some(r) => unscale_mos(scaled, r, &codec),
        None => scaled,
    };
    let total: f64 = mean_probs.iter().sum();
    mean_probs.iter_mut().for_each(|p| *p /= total);
    Ok(Prediction {
        score,
        scaled,
        crop_scores,
        probs: ProbabilityVector::new(mean_probs)?,
    })
}

/// Correlations of one evaluation group.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub dataset: String,
    pub split: String,
    pub srocc: Option<f64>,
    pub plcc: Option<f64>,
    pub n: usize,
}

/// Predicts every item and reports SROCC/PLCC on the raw scale per dataset
/// (plus an `all` row over the scaled scores when there are several).
pub fn evaluate(
    ckpt: &Checkpoint,
    items: &[TrainItem],
    split: &str,
    decoder: Decoder,
) -> Result<(Vec<EvalRow>, Vec<Prediction>)> {
    let mut preds = Vec::with_capacity(items.len());
    for it in items {
        preds.push(infer_video(ckpt, &it.video, Some(&it.dataset), decoder)?);
    }
    let mut groups: IndexMap<&str, (Vec<f64>, Vec<f64>)> = IndexMap::new();
    for (it, p) in items.iter().zip(&preds) {
        let e = groups.entry(it.dataset.as_str()).or_default();
        e.0.push(it.raw_mos);
        e.1.push(p.score);
    }
    let row = |name: &str, g: &[f64], p: &[f64]| EvalRow {
        dataset: name.to_string(),
        split: split.to_string(),
        srocc: srocc(g, p).ok(),
        plcc: plcc(g, p).ok(),
        n: g.len(),
    };
    let mut rows: Vec<EvalRow> = groups.iter().map(|(n, (g, p))| row(n, g, p)).collect();
    if groups.len() > 1 {
        let g: Vec<f64> = items.iter().map(|i| i.target.score).collect();
        let p: Vec<f64> = preds.iter().map(|p| p.scaled).collect();
        rows.push(row("all", &g, &p));
    }
    Ok((rows, preds))
}

pub fn write_eval_csv(rows: &[EvalRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "dataset,split,srocc,plcc,n")?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.dataset, r.split, opt(r.srocc), opt(r.plcc), r.n)?;
    }
    Ok(())
}
