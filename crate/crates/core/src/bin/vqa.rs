use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use vqa_core::config::TrainConfig;
use vqa_core::flops::estimate_flops_for_source;
use vqa_core::gradcheck;
use vqa_core::io::{load_checkpoint, load_manifest, read_container, save_checkpoint};
use vqa_core::regression::{encode_mos, make_anchors, LossKind};
use vqa_core::train::synth::{make_synthetic_dataset, SynthSpec};
use vqa_core::train::{self, Decoder};
use vqa_core::Mode;

#[derive(Parser)]
#[command(name = "vqa", version, about = "Divided space-time video quality model")]
struct Cli {
    /// Seed for every random stream (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Image,
    Video,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Image => Mode::Image,
            ModeArg::Video => Mode::Video,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DecoderArg {
    Svr,
    Expectation,
}

impl From<DecoderArg> for Decoder {
    fn from(d: DecoderArg) -> Self {
        match d {
            DecoderArg::Svr => Decoder::Svr,
            DecoderArg::Expectation => Decoder::Expectation,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Vr,
    L2,
    CrossEntropy,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Vr => LossKind::Vr,
            LossArg::L2 => LossKind::L2,
            LossArg::CrossEntropy => LossKind::CrossEntropy,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one stage on the training split of a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// JSON config; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "video")]
        mode: ModeArg,
        /// Image-stage checkpoint to transfer from (or a video checkpoint
        /// to continue from).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch CSV log (default: OUT with a .csv extension).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
    },
    /// SROCC/PLCC per dataset as CSV.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum, default_value = "svr")]
        decoder: DecoderArg,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score one video container.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        video: PathBuf,
        /// Map the score back to this dataset's raw MOS range.
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long, value_enum, default_value = "svr")]
        decoder: DecoderArg,
    },
    /// Print the anchor encoding of a scaled score.
    EncodeMos {
        #[arg(long, allow_hyphen_values = true)]
        mos: f64,
        #[arg(long, default_value_t = 6)]
        anchors: usize,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        lo: f64,
        #[arg(long, default_value_t = 5.0, allow_hyphen_values = true)]
        hi: f64,
    },
    /// Finite-difference check of every op and of a tiny model.
    GradCheck,
    /// Generate a synthetic fixture set.
    MakeSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 80)]
        height: usize,
        #[arg(long, default_value_t = 80)]
        width: usize,
        #[arg(long, default_value_t = 1)]
        datasets: usize,
        #[arg(long, default_value_t = 48.0)]
        max_noise: f64,
    },
    /// Multiply-accumulate count of one forward pass.
    Flops {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "video")]
        mode: ModeArg,
        /// Source frame size as HEIGHTxWIDTH.
        #[arg(long)]
        source: Option<String>,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Train {
            manifest,
            config,
            mode,
            init,
            out,
            log,
            epochs,
            loss,
        } => {
            let mut cfg = load_config(config.as_deref(), seed)?;
            cfg.mode = mode.into();
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(l) = loss {
                cfg.loss = l.into();
            }
            let m = load_manifest(&manifest)?;
            let codec = cfg.model.codec()?;
            let (train_idx, _) = train::manifest_split(&m, cfg.seed)?;
            let items = train::load_items(&m, &train_idx, &codec)?;
            let outcome = match cfg.mode {
                Mode::Image => {
                    if init.is_some() {
                        bail!("--init is only used for the video stage");
                    }
                    train::train_stage_image(&items, &cfg, &m.datasets)?
                }
                Mode::Video => {
                    let start = match init {
                        Some(p) => {
                            let ck = load_checkpoint(&p)?;
                            Some(match ck.stage {
                                Mode::Image => train::transfer_weights(&ck.weights, &cfg.model, cfg.seed)?,
                                Mode::Video => ck.weights,
                            })
                        }
                        None => None,
                    };
                    train::train_stage_video(&items, &cfg, &m.datasets, start)?
                }
            };
            save_checkpoint(&outcome.checkpoint, &out)?;
            let log = log.unwrap_or_else(|| out.with_extension("csv"));
            let f = File::create(&log).with_context(|| format!("creating {}", log.display()))?;
            train::write_epoch_csv(&outcome.history, BufWriter::new(f))?;
            println!(
                "wrote {} ({} epochs, {} items)",
                out.display(),
                outcome.history.len(),
                items.len()
            );
        }
        Command::Eval {
            manifest,
            checkpoint,
            split,
            decoder,
            out,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let m = load_manifest(&manifest)?;
            let (train_idx, test_idx) = train::manifest_split(&m, seed.unwrap_or(ck.config.seed))?;
            let (name, idx) = match split {
                SplitArg::Train => ("train", train_idx),
                SplitArg::Test => ("test", test_idx),
                SplitArg::All => ("all", (0..m.items.len()).collect()),
            };
            let items = train::load_items(&m, &idx, &ck.weights.config.codec()?)?;
            let (rows, _) = train::evaluate(&ck, &items, name, decoder.into())?;
            match out {
                Some(p) => {
                    let f = File::create(&p).with_context(|| format!("creating {}", p.display()))?;
                    train::write_eval_csv(&rows, BufWriter::new(f))?;
                }
                None => train::write_eval_csv(&rows, std::io::stdout().lock())?,
            }
        }
        Command::Infer {
            checkpoint,
            video,
            dataset,
            decoder,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let v = read_container(&video)?;
            let p = train::infer_video(&ck, &v, dataset.as_deref(), decoder.into())?;
            let join = |xs: &[f64]| xs.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",");
            println!("score,{:.6}", p.score);
            println!("scaled,{:.6}", p.scaled);
            println!("crops,{}", join(&p.crop_scores));
            println!("probs,{}", join(p.probs.values()));
        }
        Command::EncodeMos { mos, anchors, lo, hi } => {
            let codec = make_anchors(anchors, lo, hi)?;
            let y = encode_mos(mos, &codec);
            let text: Vec<String> = y.values().iter().map(|v| format!("{v:.10}")).collect();
            println!("{}", text.join(","));
            eprintln!("argmax {}", y.argmax());
        }
        Command::GradCheck => {
            let mut failed = 0;
            let mut report = |r: &gradcheck::CheckResult| {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                if !r.passed() {
                    failed += 1;
                }
                println!("{verdict:4} {:<40} {:>6} entries  max rel err {:.3e}", r.name, r.entries, r.max_rel_error);
            };
            for r in gradcheck::op_suite(seed.unwrap_or(0))? {
                report(&r);
            }
            let cfg = gradcheck::tiny_config();
            for r in gradcheck::check_model(&cfg, Mode::Video, LossKind::Vr, seed.unwrap_or(0))? {
                report(&r);
            }
            if failed > 0 {
                bail!("{failed} gradient checks exceeded relative error {}", gradcheck::TOLERANCE);
            }
        }
        Command::MakeSynth {
            out,
            count,
            frames,
            height,
            width,
            datasets,
            max_noise,
        } => {
            let spec = SynthSpec {
                count,
                frames,
                height,
                width,
                datasets,
                max_noise,
                seed: seed.unwrap_or(0),
            };
            let m = make_synthetic_dataset(&spec, &out)?;
            println!("wrote {} items to {}", m.items.len(), out.join("manifest.json").display());
        }
        Command::Flops { config, mode, source } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let (h, w) = match source {
                Some(s) => {
                    let (h, w) = s
                        .split_once('x')
                        .with_context(|| format!("--source {s:?} is not HEIGHTxWIDTH"))?;
                    (h.trim().parse()?, w.trim().parse()?)
                }
                None => (cfg.model.crop, cfg.model.crop),
            };
            let f = estimate_flops_for_source(&cfg.model, mode.into(), h, w)?;
            let mut out = std::io::stdout().lock();
            writeln!(out, "embedding,{}", f.embedding)?;
            writeln!(out, "time_attention,{}", f.time)?;
            writeln!(out, "space_attention,{}", f.space)?;
            writeln!(out, "mlp,{}", f.mlp)?;
            writeln!(out, "head,{}", f.head)?;
            writeln!(out, "total,{}", f.total())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
