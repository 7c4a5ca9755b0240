//! Anchor/positive batch construction and the multi-class cross-entropy
//! objective over in-batch similarities.
//!
//! Row `i` of the similarity matrix scores anchor `i` against every positive
//! in the batch: the diagonal holds the positive pair, the off-diagonal
//! entries are the `B - 1` negatives for that anchor.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::frontend::Frontend;
use crate::model::{encode_train, ModelParams, SimilarityHead};
use crate::numerics::LayerCache;
use crate::scalar::{matmul, matmul_acc_bt, matmul_at, Scalar};
use crate::tensor::Tensor;

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed derived from a base seed and a path of stream identifiers, so results
/// do not depend on how work is spread across threads.
pub fn derive_seed(seed: u64, stream: &[u64]) -> u64 {
    stream.iter().fold(mix(seed), |acc, &s| mix(acc ^ mix(s)))
}

pub fn stream_rng(seed: u64, stream: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_PAIR: u64 = 2;

/// Independent uniform offsets in `[0, len - segment_len]` for anchor and positive.
pub fn sample_offsets(
    clip_len: usize,
    segment_len: usize,
    rng: &mut impl Rng,
) -> Option<(usize, usize)> {
    let max = clip_len.checked_sub(segment_len)?;
    Some((rng.gen_range(0..=max), rng.gen_range(0..=max)))
}

/// Draws two segments of `clip` and featurizes both.
pub fn sample_pair<T: Scalar>(
    clip: &AudioClip,
    frontend: &Frontend<T>,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let seg = frontend.segment_len();
    let (a, p) = sample_offsets(clip.len(), seg, rng).ok_or_else(|| Error::ClipTooShort {
        id: clip.id.clone(),
        len: clip.len(),
        needed: seg,
    })?;
    Ok((
        frontend.log_mel(&clip.samples[a..a + seg])?,
        frontend.log_mel(&clip.samples[p..p + seg])?,
    ))
}

#[derive(Clone, Debug)]
pub struct ContrastiveBatch<T> {
    pub anchors: Vec<Tensor<T>>,
    pub positives: Vec<Tensor<T>>,
    /// Source clip id of each pair.
    pub clip_ids: Vec<String>,
}

impl<T> ContrastiveBatch<T> {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Per-epoch shuffling and on-the-fly pair sampling over the eligible clips
/// of a corpus (clips at least one segment long).
pub struct PairSampler<'a, T: Scalar> {
    clips: Vec<&'a AudioClip>,
    frontend: &'a Frontend<T>,
    batch_size: usize,
    seed: u64,
}

impl<'a, T: Scalar> PairSampler<'a, T> {
    pub fn new(
        corpus: &'a [AudioClip],
        frontend: &'a Frontend<T>,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let seg = frontend.segment_len();
        let clips: Vec<&AudioClip> = corpus.iter().filter(|c| c.len() >= seg).collect();
        if clips.len() < batch_size {
            return Err(Error::CorpusTooSmall {
                needed: batch_size,
                available: clips.len(),
            });
        }
        Ok(PairSampler {
            clips,
            frontend,
            batch_size,
            seed,
        })
    }

    pub fn eligible(&self) -> usize {
        self.clips.len()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.clips.len() / self.batch_size
    }

    /// Clip indices of every full batch of `epoch`, from a fresh shuffle.
    pub fn epoch_plan(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.clips.len()).collect();
        order.shuffle(&mut stream_rng(self.seed, &[STREAM_SHUFFLE, epoch]));
        order
            .chunks_exact(self.batch_size)
            .map(|c| c.to_vec())
            .collect()
    }

    /// Featurizes batch `batch_index` of `epoch`. Every pair has its own RNG
    /// stream keyed by `(seed, epoch, pair index)`.
    pub fn batch(
        &self,
        epoch: u64,
        batch_index: usize,
        clip_indices: &[usize],
    ) -> Result<ContrastiveBatch<T>> {
        let pairs: Vec<(Tensor<T>, Tensor<T>)> = clip_indices
            .par_iter()
            .enumerate()
            .map(|(i, &ci)| {
                let pair_index = (batch_index * self.batch_size + i) as u64;
                let mut rng = stream_rng(self.seed, &[STREAM_PAIR, epoch, pair_index]);
                sample_pair(self.clips[ci], self.frontend, &mut rng)
            })
            .collect::<Result<_>>()?;
        let (anchors, positives) = pairs.into_iter().unzip();
        Ok(ContrastiveBatch {
            anchors,
            positives,
            clip_ids: clip_indices.iter().map(|&i| self.clips[i].id.clone()).collect(),
        })
    }
}

/// Batch `batch_index` of `epoch` drawn from `corpus`.
pub fn build_batch<T: Scalar>(
    corpus: &[AudioClip],
    batch_size: usize,
    seed: u64,
    epoch: u64,
    batch_index: usize,
    frontend: &Frontend<T>,
) -> Result<ContrastiveBatch<T>> {
    let sampler = PairSampler::new(corpus, frontend, batch_size, seed)?;
    let plan = sampler.epoch_plan(epoch);
    let indices = plan.get(batch_index).ok_or_else(|| {
        Error::Bounds(format!(
            "batch {batch_index} of an epoch with {} batches",
            plan.len()
        ))
    })?;
    sampler.batch(epoch, batch_index, indices)
}

fn check_projections<T: Scalar>(za: &Tensor<T>, zp: &Tensor<T>) -> Result<(usize, usize)> {
    if za.rank() != 2 || za.shape() != zp.shape() {
        return Err(Error::shape("similarity matrix projections", za.shape(), zp.shape()));
    }
    Ok((za.shape()[0], za.shape()[1]))
}

fn unit_rows<T: Scalar>(z: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    let (b, k) = (z.shape()[0], z.shape()[1]);
    let mut out = z.clone();
    let mut norms = Vec::with_capacity(b);
    for i in 0..b {
        let row = &mut out.data_mut()[i * k..(i + 1) * k];
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if n == T::zero() {
            return Err(Error::Degenerate(format!("projection row {i} has zero norm")));
        }
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// `S[i][j] = s(anchor_i, positive_j)` from stacked projections `[B, k]`.
pub fn similarity_matrix<T: Scalar>(
    za: &Tensor<T>,
    zp: &Tensor<T>,
    w: &Tensor<T>,
    head: SimilarityHead,
) -> Result<Tensor<T>> {
    let (b, k) = check_projections(za, zp)?;
    let mut s = vec![T::zero(); b * b];
    match head {
        SimilarityHead::Bilinear => {
            w.ensure_shape(&[k, k], "bilinear W")?;
            let mut zaw = vec![T::zero(); b * k];
            matmul(b, k, k, za.data(), w.data(), &mut zaw);
            matmul_acc_bt(b, k, b, &zaw, zp.data(), &mut s);
        }
        SimilarityHead::Cosine { temperature } => {
            let (ua, _) = unit_rows(za)?;
            let (up, _) = unit_rows(zp)?;
            matmul_acc_bt(b, k, b, ua.data(), up.data(), &mut s);
            let inv_t = T::of(1.0 / temperature);
            s.iter_mut().for_each(|v| *v *= inv_t);
        }
    }
    Tensor::new([b, b], s)
}

/// Gradients of a scalar loss w.r.t. `za`, `zp` and `W` given `dL/dS`.
pub fn similarity_backward<T: Scalar>(
    za: &Tensor<T>,
    zp: &Tensor<T>,
    w: &Tensor<T>,
    head: SimilarityHead,
    grad_s: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, k) = check_projections(za, zp)?;
    grad_s.ensure_shape(&[b, b], "similarity gradient")?;
    let g = grad_s.data();
    match head {
        SimilarityHead::Bilinear => {
            // S = Za W Zp^T
            let mut zaw = vec![T::zero(); b * k];
            matmul(b, k, k, za.data(), w.data(), &mut zaw);
            let mut zpwt = vec![T::zero(); b * k];
            matmul_acc_bt(b, k, k, zp.data(), w.data(), &mut zpwt);
            let mut dza = vec![T::zero(); b * k];
            matmul(b, b, k, g, &zpwt, &mut dza);
            let mut dzp = vec![T::zero(); b * k];
            matmul_at(b, b, k, g, &zaw, &mut dzp);
            // dW = Za^T G Zp
            let mut gzp = vec![T::zero(); b * k];
            matmul(b, b, k, g, zp.data(), &mut gzp);
            let mut dw = vec![T::zero(); k * k];
            matmul_at(k, b, k, za.data(), &gzp, &mut dw);
            Ok((
                Tensor::new([b, k], dza)?,
                Tensor::new([b, k], dzp)?,
                Tensor::new([k, k], dw)?,
            ))
        }
        SimilarityHead::Cosine { temperature } => {
            let (ua, na) = unit_rows(za)?;
            let (up, np) = unit_rows(zp)?;
            let inv_t = T::of(1.0 / temperature);
            let mut dua = vec![T::zero(); b * k];
            matmul(b, b, k, g, up.data(), &mut dua);
            let mut dup = vec![T::zero(); b * k];
            matmul_at(b, b, k, g, ua.data(), &mut dup);
            let through_norm = |u: &Tensor<T>, du: &mut [T], norms: &[T]| {
                for i in 0..b {
                    let ur = u.row(i);
                    let dr = &mut du[i * k..(i + 1) * k];
                    let proj = ur.iter().zip(dr.iter()).map(|(&a, &d)| a * d).sum::<T>();
                    for (d, &a) in dr.iter_mut().zip(ur) {
                        *d = (*d - a * proj) * inv_t / norms[i];
                    }
                }
            };
            through_norm(&ua, &mut dua, &na);
            through_norm(&up, &mut dup, &np);
            Ok((
                Tensor::new([b, k], dua)?,
                Tensor::new([b, k], dup)?,
                w.zeros_like(),
            ))
        }
    }
}

/// Loss and `dL/dS` of the anchor-to-positive cross entropy.
#[derive(Clone, Debug)]
pub struct InfoNce<T> {
    pub loss: T,
    pub grad: Tensor<T>,
}

/// Mean over rows of `-log softmax(S[i])[i]`; gradient `(softmax_rows(S) - I) / B`.
pub fn info_nce<T: Scalar>(s: &Tensor<T>) -> Result<InfoNce<T>> {
    let b = match s.shape() {
        [r, c] if r == c && *r > 0 => *r,
        other => return Err(Error::shape("info_nce", "[B, B] with B > 0", other)),
    };
    if !s.all_finite() {
        return Err(Error::Training("non-finite similarity matrix".into()));
    }
    let inv_b = T::one() / T::of(b as f64);
    let mut loss = T::zero();
    let mut grad = Tensor::zeros([b, b]);
    for i in 0..b {
        let row = s.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        loss += max + sum.ln() - row[i];
        let g = &mut grad.data_mut()[i * b..(i + 1) * b];
        for (j, (gv, &e)) in g.iter_mut().zip(&exps).enumerate() {
            let p = e / sum;
            *gv = (if i == j { p - T::one() } else { p }) * inv_b;
        }
    }
    Ok(InfoNce {
        loss: loss * inv_b,
        grad,
    })
}

fn transpose<T: Scalar>(s: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (s.shape()[0], s.shape()[1]);
    let mut out = Tensor::zeros([c, r]);
    for i in 0..r {
        for j in 0..c {
            out.data_mut()[j * r + i] = s.at2(i, j);
        }
    }
    out
}

/// Average of the anchor→positive and positive→anchor losses.
pub fn info_nce_symmetric<T: Scalar>(s: &Tensor<T>) -> Result<InfoNce<T>> {
    let forward = info_nce(s)?;
    let backward = info_nce(&transpose(s))?;
    let mut grad = forward.grad;
    grad.add_assign(&transpose(&backward.grad))?;
    let half = T::of(0.5);
    grad.scale(half);
    Ok(InfoNce {
        loss: (forward.loss + backward.loss) * half,
        grad,
    })
}

/// Options of the contrastive objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub head: SimilarityHead,
    /// Adds the positive→anchor direction.
    pub symmetric: bool,
}

impl Default for Objective {
    fn default() -> Self {
        Objective {
            head: SimilarityHead::Bilinear,
            symmetric: false,
        }
    }
}

/// Above this many patches per batch, caches are dropped after the forward
/// pass and rebuilt during backpropagation.
const MAX_CACHED_PATCHES: usize = 512;

/// Encoder and projection caches of one patch.
type PatchCaches<T> = (Vec<LayerCache<T>>, Vec<LayerCache<T>>);

struct PatchForward<T> {
    z: Tensor<T>,
    caches: Option<PatchCaches<T>>,
}

fn forward_patch<T: Scalar>(
    params: &ModelParams<T>,
    patch: &Tensor<T>,
    keep: bool,
) -> Result<PatchForward<T>> {
    let (h, enc) = encode_train(patch, &params.encoder)?;
    let (z, proj) = params.projection.forward(&h)?;
    Ok(PatchForward {
        z,
        caches: keep.then_some((enc, proj)),
    })
}

fn backward_patch<T: Scalar>(
    params: &ModelParams<T>,
    patch: &Tensor<T>,
    caches: Option<PatchCaches<T>>,
    dz: Tensor<T>,
) -> Result<ModelParams<T>> {
    let (enc, proj) = match caches {
        Some(c) => c,
        None => {
            let (h, enc) = encode_train(patch, &params.encoder)?;
            let (_, proj) = params.projection.forward(&h)?;
            (enc, proj)
        }
    };
    let (dh, projection) = params.projection.backward(proj, &dz)?;
    let (_, encoder) = params.encoder.backward(enc, &dh)?;
    Ok(ModelParams {
        encoder,
        projection,
        bilinear: params.bilinear.zeros_like(),
        classifier: None,
    })
}

/// Output of one forward/backward pass of the contrastive objective.
#[derive(Clone, Debug)]
pub struct ContrastiveStep<T> {
    pub loss: T,
    pub similarities: Tensor<T>,
    /// Gradients shaped like the model; the classifier slot is `None`.
    pub grads: ModelParams<T>,
}

/// Encodes and projects each of the `2B` patches once, scores every anchor
/// against every positive, and backpropagates the loss into the encoder,
/// projection head and `W`.
pub fn contrastive_step<T: Scalar>(
    params: &ModelParams<T>,
    anchors: &[Tensor<T>],
    positives: &[Tensor<T>],
    objective: Objective,
) -> Result<ContrastiveStep<T>> {
    if anchors.len() != positives.len() || anchors.is_empty() {
        return Err(Error::shape(
            "contrastive batch",
            "equal non-zero anchor and positive counts",
            (anchors.len(), positives.len()),
        ));
    }
    let b = anchors.len();
    let keep = 2 * b <= MAX_CACHED_PATCHES;
    let patches: Vec<&Tensor<T>> = anchors.iter().chain(positives).collect();
    let mut forwards: Vec<PatchForward<T>> = patches
        .par_iter()
        .map(|p| forward_patch(params, p, keep))
        .collect::<Result<_>>()?;

    let zs: Vec<Tensor<T>> = forwards.iter().map(|f| f.z.clone()).collect();
    let za = Tensor::stack_rows(&zs[..b])?;
    let zp = Tensor::stack_rows(&zs[b..])?;
    let s = similarity_matrix(&za, &zp, &params.bilinear, objective.head)?;
    let nce = if objective.symmetric {
        info_nce_symmetric(&s)?
    } else {
        info_nce(&s)?
    };
    let (dza, dzp, dw) = similarity_backward(&za, &zp, &params.bilinear, objective.head, &nce.grad)?;

    let dzs: Vec<Tensor<T>> = dza.unstack_rows().into_iter().chain(dzp.unstack_rows()).collect();
    let work: Vec<_> = forwards
        .iter_mut()
        .map(|f| f.caches.take())
        .zip(dzs)
        .zip(patches)
        .collect();
    let per_patch: Vec<ModelParams<T>> = work
        .into_par_iter()
        .map(|((caches, dz), patch)| backward_patch(params, patch, caches, dz))
        .collect::<Result<_>>()?;

    // fixed-order reduction keeps results independent of the thread count
    let mut grads = ModelParams {
        encoder: params.encoder.zeros_like(),
        projection: params.projection.zeros_like(),
        bilinear: dw,
        classifier: None,
    };
    for g in &per_patch {
        grads.encoder.add_assign(&g.encoder)?;
        grads.projection.add_assign(&g.projection)?;
    }
    Ok(ContrastiveStep {
        loss: nce.loss,
        similarities: s,
        grads,
    })
}
