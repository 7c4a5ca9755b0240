//! Contrastive pre-training, linear probing and fine-tuning loops.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::audio::AudioClip;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::contrastive::{contrastive_step, derive_seed, stream_rng, Objective, PairSampler};
use crate::error::{Error, Result};
use crate::eval::{argmax, evaluate, softmax};
use crate::frontend::{Frontend, FrontendConfig};
use crate::model::{encode_train, ModelParams, ParamGroup};
use crate::numerics::Sequential;
use crate::numerics::AdamState;
use crate::tensor::Tensor;

const STREAM_INIT: u64 = 21;
const STREAM_CLASSIFIER: u64 = 22;
const STREAM_SUP_SHUFFLE: u64 = 23;
const STREAM_SUP_SEGMENT: u64 = 24;
const STREAM_SUP_STATS: u64 = 25;

const PRETRAIN_GROUPS: [ParamGroup; 3] =
    [ParamGroup::Encoder, ParamGroup::Projection, ParamGroup::Bilinear];

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based index of the completed epoch.
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: Option<f64>,
    pub eval_accuracy: Option<f64>,
    pub seconds: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch={} loss={:.6}", self.epoch, self.loss)?;
        if let Some(a) = self.train_accuracy {
            write!(f, " train_acc={a:.4}")?;
        }
        if let Some(a) = self.eval_accuracy {
            write!(f, " eval_acc={a:.4}")?;
        }
        write!(f, " seconds={:.3}", self.seconds)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_text(&self) -> String {
        self.records.iter().map(|r| format!("{r}\n")).collect()
    }

    /// Equality ignoring wall-clock time.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.loss.to_bits() == b.loss.to_bits()
                    && a.train_accuracy.map(f64::to_bits) == b.train_accuracy.map(f64::to_bits)
                    && a.eval_accuracy.map(f64::to_bits) == b.eval_accuracy.map(f64::to_bits)
            })
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }
}

fn frontend() -> Result<Frontend<f32>> {
    Frontend::new(FrontendConfig::default(), crate::audio::WORKING_RATE)
}

/// Freshly initialized model for `cfg` (without classifier).
pub fn init_model(cfg: &RunConfig) -> Result<ModelParams<f32>> {
    let fe = FrontendConfig::default();
    ModelParams::init(
        &cfg.model_config([fe.n_mels, fe.n_frames]),
        derive_seed(cfg.seed, &[STREAM_INIT]),
    )
}

#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub params: ModelParams<f32>,
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Contrastive pre-training on unlabeled clips.
///
/// With `checkpoint_path`, the final checkpoint (and one every
/// `cfg.checkpoint_every` epochs) is written there. If training hits a
/// non-finite value, the last good parameters are saved before the error is
/// returned.
pub fn pretrain(
    cfg: &RunConfig,
    corpus: &[AudioClip],
    checkpoint_path: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<PretrainOutput> {
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("learning_rate must be positive".into()));
    }
    let fe = frontend()?;
    let sampler = PairSampler::new(corpus, &fe, cfg.batch_size, cfg.seed)?;
    let mut params = init_model(cfg)?;
    let mut adam = AdamState::new(params.named_in(&PRETRAIN_GROUPS));
    let objective = Objective {
        head: cfg.head(),
        symmetric: cfg.symmetric_loss,
    };
    let lr = cfg.learning_rate as f32;
    let mut log = TrainLog::default();

    let save = |params: &ModelParams<f32>, adam: &AdamState<f32>, epoch: usize| -> Result<Checkpoint> {
        let ck = Checkpoint::from_model(cfg, params, Some(adam), epoch as u64);
        if let Some(p) = checkpoint_path {
            ck.save(p)?;
        }
        Ok(ck)
    };

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut total = 0.0;
        let plan = sampler.epoch_plan(epoch as u64);
        for (bi, indices) in plan.iter().enumerate() {
            let result = sampler
                .batch(epoch as u64, bi, indices)
                .and_then(|b| contrastive_step(&params, &b.anchors, &b.positives, objective))
                .and_then(|step| {
                    if !step.loss.is_finite() {
                        return Err(Error::Training(format!(
                            "non-finite loss at epoch {} batch {bi}",
                            epoch + 1
                        )));
                    }
                    adam.apply(
                        params.named_mut_in(&PRETRAIN_GROUPS),
                        step.grads.named_in(&PRETRAIN_GROUPS),
                        lr,
                    )?;
                    Ok(step.loss)
                });
            match result {
                Ok(loss) => total += loss as f64,
                Err(e @ Error::Training(_)) => {
                    save(&params, &adam, epoch)?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: total / plan.len() as f64,
            train_accuracy: None,
            eval_accuracy: None,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.records.push(record);
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs {
            save(&params, &adam, epoch + 1)?;
        }
    }
    let checkpoint = save(&params, &adam, cfg.epochs)?;
    Ok(PretrainOutput {
        params,
        checkpoint,
        log,
    })
}

/// Random `segment_len` window of `samples`, zero-padded when the clip is
/// shorter than that.
fn random_segment(samples: &[f32], segment_len: usize, rng: &mut impl Rng) -> Vec<f32> {
    if samples.len() <= segment_len {
        let mut s = samples.to_vec();
        s.resize(segment_len, 0.0);
        return s;
    }
    let off = rng.gen_range(0..=samples.len() - segment_len);
    samples[off..off + segment_len].to_vec()
}

fn check_labels(labeled: &[(AudioClip, usize)], num_classes: usize) -> Result<()> {
    for (i, (clip, label)) in labeled.iter().enumerate() {
        if *label >= num_classes {
            return Err(Error::Manifest {
                line: i + 1,
                message: format!(
                    "label {label} of clip `{}` is out of range for {num_classes} classes",
                    clip.id
                ),
            });
        }
    }
    Ok(())
}

/// Softmax cross-entropy of one example: `(loss, dlogits, correct)`.
fn cross_entropy(logits: &Tensor<f32>, label: usize) -> (f64, Tensor<f32>, bool) {
    let l: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
    let p = softmax(&l);
    let loss = -(p[label].max(f64::MIN_POSITIVE)).ln();
    let mut g = p.clone();
    g[label] -= 1.0;
    let grad = Tensor::new(logits.shape().to_vec(), g.iter().map(|&v| v as f32).collect())
        .expect("same length as logits");
    (loss, grad, argmax(&l) == label)
}

/// Per-feature map `(h - mean) * inv_std` in front of the classifier while it
/// trains; folded into the classifier's dense layer afterwards, so the saved
/// model is a plain linear layer on `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
}

impl Standardizer {
    pub fn fit(hs: &[Tensor<f32>]) -> Self {
        let d = hs.first().map_or(0, Tensor::len);
        let n = hs.len().max(1) as f64;
        let mut mean = vec![0.0f64; d];
        for h in hs {
            for (m, &v) in mean.iter_mut().zip(h.data()) {
                *m += v as f64 / n;
            }
        }
        let mut var = vec![0.0f64; d];
        for h in hs {
            for ((s, &v), m) in var.iter_mut().zip(h.data()).zip(&mean) {
                *s += (v as f64 - m).powi(2) / n;
            }
        }
        Standardizer {
            mean: mean.iter().map(|&m| m as f32).collect(),
            inv_std: var.iter().map(|&v| (1.0 / (v + 1e-6).sqrt()) as f32).collect(),
        }
    }

    pub fn apply(&self, h: &Tensor<f32>) -> Tensor<f32> {
        let data = h
            .data()
            .iter()
            .zip(self.mean.iter().zip(&self.inv_std))
            .map(|(&v, (&m, &s))| (v - m) * s)
            .collect();
        Tensor::new(h.shape().to_vec(), data).expect("same shape")
    }

    fn backward(&self, grad: &Tensor<f32>) -> Tensor<f32> {
        let data = grad.data().iter().zip(&self.inv_std).map(|(&g, &s)| g * s).collect();
        Tensor::new(grad.shape().to_vec(), data).expect("same shape")
    }

    /// Rewrites `classifier` (one dense layer) so that on raw `h` it computes
    /// what it computed on standardized `h`.
    pub fn fold_into(&self, classifier: &mut Sequential<f32>) {
        let params = &mut classifier.params[0];
        let d = self.mean.len();
        let (w, b) = params.split_at_mut(1);
        let (w, b) = (w[0].data_mut(), b[0].data_mut());
        for (c, bias) in b.iter_mut().enumerate() {
            let row = &mut w[c * d..(c + 1) * d];
            let mut shift = 0.0f64;
            for ((wv, &m), &s) in row.iter_mut().zip(&self.mean).zip(&self.inv_std) {
                *wv *= s;
                shift += *wv as f64 * m as f64;
            }
            *bias -= shift as f32;
        }
    }
}

struct ExampleGrad {
    loss: f64,
    correct: bool,
    grads: ModelParams<f32>,
}

fn supervised_example(
    params: &ModelParams<f32>,
    standardizer: &Standardizer,
    patch: &Tensor<f32>,
    label: usize,
    update_encoder: bool,
) -> Result<ExampleGrad> {
    let classifier = params
        .classifier
        .as_ref()
        .ok_or_else(|| Error::Config("model has no classifier attached".into()))?;
    let (h, enc_caches) = if update_encoder {
        let (h, c) = encode_train(patch, &params.encoder)?;
        (h, Some(c))
    } else {
        (params.encode(patch)?, None)
    };
    let (logits, cls_caches) = classifier.forward(&standardizer.apply(&h))?;
    let (loss, dlogits, correct) = cross_entropy(&logits, label);
    let (dh, cls_grads) = classifier.backward(cls_caches, &dlogits)?;
    let encoder = match enc_caches {
        Some(c) => params.encoder.backward(c, &standardizer.backward(&dh))?.1,
        None => params.encoder.zeros_like(),
    };
    Ok(ExampleGrad {
        loss,
        correct,
        grads: ModelParams {
            encoder,
            projection: params.projection.zeros_like(),
            bilinear: params.bilinear.zeros_like(),
            classifier: Some(cls_grads),
        },
    })
}

#[derive(Clone, Debug)]
pub struct SupervisedOutput {
    pub params: ModelParams<f32>,
    pub log: TrainLog,
}

/// Shared probe / fine-tune loop. Each epoch visits every clip once with a
/// fresh random segment; the last batch may be partial.
fn supervised(
    mut params: ModelParams<f32>,
    train: &[(AudioClip, usize)],
    eval_set: Option<&[(AudioClip, usize)]>,
    cfg: &RunConfig,
    update_encoder: bool,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<SupervisedOutput> {
    let num_classes = cfg
        .num_classes
        .ok_or_else(|| Error::Config("num_classes is required for supervised training".into()))?;
    if train.is_empty() {
        return Err(Error::CorpusTooSmall { needed: 1, available: 0 });
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    check_labels(train, num_classes)?;
    if let Some(e) = eval_set {
        check_labels(e, num_classes)?;
    }
    let fe = frontend()?;
    let seg_len = fe.segment_len();
    params.attach_classifier(num_classes, derive_seed(cfg.seed, &[STREAM_CLASSIFIER]));
    let groups: &[ParamGroup] = if update_encoder {
        &[ParamGroup::Encoder, ParamGroup::Classifier]
    } else {
        &[ParamGroup::Classifier]
    };
    let mut adam = AdamState::new(params.named_in(groups));
    let lr = cfg.learning_rate as f32;
    let mut log = TrainLog::default();

    let initial: Vec<Tensor<f32>> = (0..train.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, &[STREAM_SUP_STATS, i as u64]);
            params.encode(&fe.log_mel(&random_segment(&train[i].0.samples, seg_len, &mut rng))?)
        })
        .collect::<Result<_>>()?;
    let standardizer = Standardizer::fit(&initial);
    let folded = |params: &ModelParams<f32>| {
        let mut p = params.clone();
        if let Some(c) = p.classifier.as_mut() {
            standardizer.fold_into(c);
        }
        p
    };

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, &[STREAM_SUP_SHUFFLE, epoch as u64]));
        let (mut total, mut hits) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let examples: Vec<ExampleGrad> = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = stream_rng(cfg.seed, &[STREAM_SUP_SEGMENT, epoch as u64, i as u64]);
                    let seg = random_segment(&train[i].0.samples, seg_len, &mut rng);
                    supervised_example(&params, &standardizer, &fe.log_mel(&seg)?, train[i].1, update_encoder)
                })
                .collect::<Result<_>>()?;
            let mut grads = examples[0].grads.zeros_like();
            for ex in &examples {
                total += ex.loss;
                hits += ex.correct as usize;
                grads.add_assign(&ex.grads)?;
            }
            grads.scale(1.0 / batch.len() as f32);
            if !total.is_finite() {
                return Err(Error::Training(format!("non-finite loss at epoch {}", epoch + 1)));
            }
            adam.apply(params.named_mut_in(groups), grads.named_in(groups), lr)?;
        }
        let last = epoch + 1 == cfg.epochs;
        let eval_accuracy = match eval_set {
            Some(e) if last => Some(evaluate(&folded(&params), &fe, e, cfg.prediction_average)?.1),
            _ => None,
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: total / train.len() as f64,
            train_accuracy: Some(hits as f64 / train.len() as f64),
            eval_accuracy,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.records.push(record);
    }
    Ok(SupervisedOutput {
        params: folded(&params),
        log,
    })
}

/// Trains a fresh linear classifier on top of the frozen encoder of `params`.
pub fn train_probe(
    params: ModelParams<f32>,
    train: &[(AudioClip, usize)],
    eval_set: Option<&[(AudioClip, usize)]>,
    cfg: &RunConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<SupervisedOutput> {
    supervised(params, train, eval_set, cfg, false, on_epoch)
}

/// Like [`train_probe`] but the encoder is updated too.
pub fn finetune(
    params: ModelParams<f32>,
    train: &[(AudioClip, usize)],
    eval_set: Option<&[(AudioClip, usize)]>,
    cfg: &RunConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<SupervisedOutput> {
    supervised(params, train, eval_set, cfg, true, on_epoch)
}
