//! `segcon` command-line entry point.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use segcon::ablation::{format_table, run_ablation};
use segcon::audio::{
    load_manifest_clips, load_working_clip, write_manifest, write_wav_pcm16, AudioClip,
    ManifestEntry, WORKING_RATE,
};
use segcon::checkpoint::Checkpoint;
use segcon::config::{parse_config, parse_override, Mode, RunConfig};
use segcon::contrastive::derive_seed;
use segcon::eval::{clip_segments, evaluate, predict_all};
use segcon::frontend::{Frontend, FrontendConfig};
use segcon::model::ModelParams;
use segcon::synth::{generate, split_by_parity, SynthSpec};
use segcon::trainer::{finetune, pretrain, train_probe, EpochRecord};
use segcon::{Error, Result};

#[derive(Parser)]
#[command(name = "segcon", version, about = "Contrastive audio representation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (WAV files and manifests).
    Synth(Common),
    /// Write log-mel patches of a WAV file or manifest as CSV.
    Features(Common),
    /// Contrastive pre-training on an unlabeled manifest.
    Pretrain(Common),
    /// Train a linear classifier on a frozen pre-trained encoder.
    Probe(Common),
    /// Train classifier and encoder together.
    Finetune(Common),
    /// Clip-level evaluation of a checkpoint with a classifier.
    Eval(Common),
    /// Similarity-head and batch-size sweep.
    Ablate(Common),
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Parent directory of the run directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Worker threads; 1 gives the serial mode.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Command {
    fn parts(&self) -> (Mode, &Common) {
        match self {
            Command::Synth(c) => (Mode::Synth, c),
            Command::Features(c) => (Mode::Features, c),
            Command::Pretrain(c) => (Mode::Pretrain, c),
            Command::Probe(c) => (Mode::Probe, c),
            Command::Finetune(c) => (Mode::Finetune, c),
            Command::Eval(c) => (Mode::Eval, c),
            Command::Ablate(c) => (Mode::Ablate, c),
        }
    }
}

fn resolve_config(mode: Mode, common: &Common) -> Result<RunConfig> {
    let mut overrides = common
        .set
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>>>()?;
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    overrides.push(("mode".into(), mode.as_str().into()));
    parse_config(common.config.as_deref(), &overrides)
}

/// Creates `<out>/<mode>-<unix seconds>[-n]`, never reusing an existing one.
fn create_run_dir(out: &Path, mode: Mode) -> Result<PathBuf> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    for n in 0.. {
        let name = if n == 0 {
            format!("{}-{secs}", mode.as_str())
        } else {
            format!("{}-{secs}-{n}", mode.as_str())
        };
        let dir = out.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_err(&dir, e)),
        }
    }
    unreachable!()
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

struct RunLog {
    file: File,
    path: PathBuf,
}

impl RunLog {
    fn open(dir: &Path) -> Result<Self> {
        let path = dir.join("log.txt");
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| io_err(&path, e))?;
        Ok(RunLog { file, path })
    }

    fn line(&mut self, text: &str) -> Result<()> {
        println!("{text}");
        writeln!(self.file, "{text}").map_err(|e| io_err(&self.path, e))
    }
}

fn unlabeled(manifest: &Path) -> Result<Vec<AudioClip>> {
    Ok(load_manifest_clips(manifest)?.into_iter().map(|(c, _)| c).collect())
}

fn labeled(manifest: &Path) -> Result<Vec<(AudioClip, usize)>> {
    load_manifest_clips(manifest)?
        .into_iter()
        .enumerate()
        .map(|(i, (c, l))| {
            l.map(|l| (c, l)).ok_or_else(|| Error::Manifest {
                line: i + 1,
                message: format!("{}: entry has no label", manifest.display()),
            })
        })
        .collect()
}

/// A checkpoint path, or a run directory holding `model.ckpt`.
fn checkpoint_file(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("model.ckpt")
    } else {
        p.to_path_buf()
    }
}

fn required<'a>(v: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    v.as_deref()
        .ok_or_else(|| Error::Config(format!("missing required config key `{key}`")))
}

fn run(mode: Mode, mut cfg: RunConfig, dir: &Path) -> Result<()> {
    let mut log = RunLog::open(dir)?;
    match mode {
        Mode::Synth => synth(&cfg, dir, &mut log),
        Mode::Features => features(&cfg, dir, &mut log),
        Mode::Pretrain => {
            let corpus = unlabeled(required(&cfg.pretrain_manifest, "pretrain_manifest")?)?;
            log.line(&format!("pretrain: {} clips", corpus.len()))?;
            write_file(&dir.join("config.txt"), &cfg.to_text())?;
            let ckpt = dir.join("model.ckpt");
            let mut failed = None;
            pretrain(&cfg, &corpus, Some(&ckpt), |r| {
                if let Err(e) = log.line(&r.to_string()) {
                    failed.get_or_insert(e);
                }
            })?;
            if let Some(e) = failed {
                return Err(e);
            }
            log.line(&format!("wrote {}", ckpt.display()))
        }
        Mode::Probe | Mode::Finetune => {
            let source = Checkpoint::load(checkpoint_file(required(&cfg.checkpoint, "checkpoint")?))?;
            let src_cfg = source.config()?;
            cfg.encoder_channels = src_cfg.encoder_channels;
            cfg.projection_dim = src_cfg.projection_dim;
            write_file(&dir.join("config.txt"), &cfg.to_text())?;
            let params: ModelParams<f32> = source.to_model()?;
            let train = labeled(required(&cfg.train_manifest, "train_manifest")?)?;
            let test = match &cfg.test_manifest {
                Some(p) => Some(labeled(p)?),
                None => None,
            };
            log.line(&format!("{}: {} training clips", mode.as_str(), train.len()))?;
            let mut failed = None;
            let sink = |r: &EpochRecord| {
                if let Err(e) = log.line(&r.to_string()) {
                    failed.get_or_insert(e);
                }
            };
            let out = if mode == Mode::Probe {
                train_probe(params, &train, test.as_deref(), &cfg, sink)?
            } else {
                finetune(params, &train, test.as_deref(), &cfg, sink)?
            };
            if let Some(e) = failed {
                return Err(e);
            }
            let ckpt = dir.join("model.ckpt");
            Checkpoint::from_model(&cfg, &out.params, None, cfg.epochs as u64).save(&ckpt)?;
            log.line(&format!("wrote {}", ckpt.display()))
        }
        Mode::Eval => {
            let source = Checkpoint::load(checkpoint_file(required(&cfg.checkpoint, "checkpoint")?))?;
            let src_cfg = source.config()?;
            cfg.encoder_channels = src_cfg.encoder_channels;
            cfg.projection_dim = src_cfg.projection_dim;
            write_file(&dir.join("config.txt"), &cfg.to_text())?;
            let params: ModelParams<f32> = source.to_model()?;
            if params.classifier.is_none() {
                return Err(Error::Config(
                    "checkpoint has no classifier; run probe or finetune first".into(),
                ));
            }
            eval(&cfg, &params, dir, &mut log)
        }
        Mode::Ablate => {
            write_file(&dir.join("config.txt"), &cfg.to_text())?;
            let corpus = unlabeled(required(&cfg.pretrain_manifest, "pretrain_manifest")?)?;
            let train = labeled(required(&cfg.train_manifest, "train_manifest")?)?;
            let test = labeled(required(&cfg.test_manifest, "test_manifest")?)?;
            let mut lines = Vec::new();
            let rows = run_ablation(&cfg, &corpus, &train, &test, |r| {
                lines.push(format!(
                    "ablation similarity={:?} batch_size={} final_loss={:.6} probe_accuracy={:.4}",
                    r.similarity, r.batch_size, r.final_loss, r.probe_accuracy
                ))
            })?;
            for l in &lines {
                log.line(l)?;
            }
            let table = format_table(&rows);
            write_file(&dir.join("ablation.txt"), &table)?;
            print!("{table}");
            Ok(())
        }
    }
}

fn synth(cfg: &RunConfig, dir: &Path, log: &mut RunLog) -> Result<()> {
    write_file(&dir.join("config.txt"), &cfg.to_text())?;
    let audio = dir.join("audio");
    fs::create_dir_all(&audio).map_err(|e| io_err(&audio, e))?;
    let c = cfg.synth_classes;
    let mut write_set = |name: &str, clips: &[(AudioClip, usize)], with_labels: bool| -> Result<()> {
        let mut entries = Vec::with_capacity(clips.len());
        for (clip, label) in clips {
            let rel = format!("audio/{}.wav", clip.id);
            write_wav_pcm16(dir.join(&rel), clip)?;
            entries.push(ManifestEntry {
                path: rel,
                label: with_labels.then_some(*label),
            });
        }
        write_manifest(dir.join(name), &entries)?;
        log.line(&format!("wrote {name}: {} clips", entries.len()))
    };

    let per_unlabeled = cfg.synth_unlabeled_clips.div_ceil(c);
    if cfg.synth_unlabeled_clips > 0 {
        let spec = SynthSpec::new(c, per_unlabeled, cfg.synth_clip_seconds);
        let mut corpus = generate(&spec, derive_seed(cfg.seed, &[1]))?;
        corpus.truncate(cfg.synth_unlabeled_clips);
        write_set("unlabeled.jsonl", &corpus, false)?;
    }
    let spec = SynthSpec::new(c, cfg.synth_clips_per_class, cfg.synth_clip_seconds);
    let corpus = generate(&spec, derive_seed(cfg.seed, &[2]))?;
    let (train, test) = split_by_parity(&corpus);
    write_set("train.jsonl", &train, true)?;
    write_set("test.jsonl", &test, true)
}

fn features(cfg: &RunConfig, dir: &Path, log: &mut RunLog) -> Result<()> {
    write_file(&dir.join("config.txt"), &cfg.to_text())?;
    let input = required(&cfg.input, "input")?;
    let clips = if input.extension().is_some_and(|e| e == "jsonl") {
        unlabeled(input)?
    } else {
        vec![load_working_clip(input)?]
    };
    let fe = Frontend::<f32>::new(FrontendConfig::default(), WORKING_RATE)?;
    let out = dir.join("features");
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    for clip in &clips {
        for (k, seg) in clip_segments(&clip.samples, fe.segment_len()).iter().enumerate() {
            let patch = fe.log_mel(seg)?;
            let frames = patch.shape()[1];
            let mut text = String::new();
            for row in patch.data().chunks(frames) {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
                text.push_str(&cells.join(","));
                text.push('\n');
            }
            write_file(&out.join(format!("{}.{k}.csv", clip.id)), &text)?;
        }
    }
    log.line(&format!("wrote features of {} clips to {}", clips.len(), out.display()))
}

fn eval(cfg: &RunConfig, params: &ModelParams<f32>, dir: &Path, log: &mut RunLog) -> Result<()> {
    let manifest = required(&cfg.test_manifest, "test_manifest")?;
    let fe = Frontend::<f32>::new(FrontendConfig::default(), WORKING_RATE)?;
    let items = load_manifest_clips(manifest)?;
    let mut text = String::new();
    let summary = if items.iter().all(|(_, l)| l.is_some()) {
        let labeled: Vec<(AudioClip, usize)> =
            items.into_iter().map(|(c, l)| (c, l.unwrap_or(0))).collect();
        let (preds, acc) = evaluate(params, &fe, &labeled, cfg.prediction_average)?;
        for ((clip, label), p) in labeled.iter().zip(&preds) {
            text.push_str(&prediction_line(&clip.id, Some(*label), p));
        }
        format!("accuracy={acc:.6} clips={}", labeled.len())
    } else {
        let clips: Vec<&AudioClip> = items.iter().map(|(c, _)| c).collect();
        let preds = predict_all(params, &fe, &clips, cfg.prediction_average)?;
        for ((clip, label), p) in items.iter().zip(&preds) {
            text.push_str(&prediction_line(&clip.id, *label, p));
        }
        format!("accuracy=n/a clips={}", items.len())
    };
    text.push_str(&summary);
    text.push('\n');
    write_file(&dir.join("predictions.txt"), &text)?;
    log.line(&summary)
}

fn prediction_line(id: &str, label: Option<usize>, p: &segcon::eval::ClipPrediction) -> String {
    let probs: Vec<String> = p.probabilities.iter().map(|v| format!("{v:.6}")).collect();
    let label = label.map_or("-".to_string(), |l| l.to_string());
    format!("{id} {label} {} {}\n", p.predicted, probs.join(","))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (mode, common) = cli.command.parts();
    let cfg = match resolve_config(mode, common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("usage error [{}]: {e}", e.category());
            return ExitCode::from(2);
        }
    };
    if let Some(n) = common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error [config]: cannot set up {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = create_run_dir(&common.out, mode).and_then(|dir| {
        println!("run directory: {}", dir.display());
        run(mode, cfg, &dir)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
