//! Encoder `f`, projection head `g`, similarity heads and the linear classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{LayerCache, LayerSpec, Sequential};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Patch shape `(mel bins, frames)`.
    pub input_shape: [usize; 2],
    /// Output channels of each conv block; the last one is the embedding size `d`.
    pub encoder_channels: Vec<usize>,
    /// Projection size `k`.
    pub projection_dim: usize,
    pub num_classes: Option<usize>,
}

impl ModelConfig {
    pub fn embedding_dim(&self) -> usize {
        self.encoder_channels.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::Config(
                "model: encoder needs at least one block with positive channels".into(),
            ));
        }
        if self.projection_dim == 0 {
            return Err(Error::Config("model: projection size must be positive".into()));
        }
        if self.num_classes == Some(0) {
            return Err(Error::Config("model: number of classes must be positive".into()));
        }
        let blocks = self.encoder_channels.len() as u32;
        let [h, w] = self.input_shape;
        if h >> blocks == 0 || w >> blocks == 0 {
            return Err(Error::Config(format!(
                "model: {blocks} pooling blocks collapse a {h}x{w} patch"
            )));
        }
        Ok(())
    }
}

/// Conv blocks `conv3x3 -> relu -> maxpool 2x2` followed by global max pooling.
pub fn encoder_layers(channels: &[usize]) -> Vec<LayerSpec> {
    let mut layers = Vec::with_capacity(channels.len() * 3 + 1);
    let mut in_channels = 1;
    for &c in channels {
        layers.push(LayerSpec::Conv3x3 { in_channels, out_channels: c });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::MaxPool2);
        in_channels = c;
    }
    layers.push(LayerSpec::GlobalMaxPool);
    layers
}

/// `dense(d -> k) -> layer norm -> tanh`.
pub fn projection_layers(embedding_dim: usize, projection_dim: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Dense { inputs: embedding_dim, outputs: projection_dim },
        LayerSpec::LayerNorm { size: projection_dim },
        LayerSpec::Tanh,
    ]
}

pub fn classifier_layers(embedding_dim: usize, num_classes: usize) -> Vec<LayerSpec> {
    vec![LayerSpec::Dense { inputs: embedding_dim, outputs: num_classes }]
}

/// Named parameter groups, used to pick what an optimizer updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Projection,
    Bilinear,
    Classifier,
}

/// Every learnable array of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub encoder: Sequential<T>,
    pub projection: Sequential<T>,
    /// `k x k` bilinear form `W`.
    pub bilinear: Tensor<T>,
    pub classifier: Option<Sequential<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Random weights, zero biases, unit layer-norm gain and `W = I`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.embedding_dim();
        let encoder = Sequential::init(encoder_layers(&cfg.encoder_channels), &mut rng);
        let projection = Sequential::init(projection_layers(d, cfg.projection_dim), &mut rng);
        let classifier = cfg
            .num_classes
            .map(|c| Sequential::init(classifier_layers(d, c), &mut rng));
        Ok(ModelParams {
            encoder,
            projection,
            bilinear: Tensor::eye(cfg.projection_dim),
            classifier,
        })
    }

    /// All-zero parameters with the architecture of `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.embedding_dim();
        ModelParams {
            encoder: Sequential::zeros(encoder_layers(&cfg.encoder_channels)),
            projection: Sequential::zeros(projection_layers(d, cfg.projection_dim)),
            bilinear: Tensor::zeros([cfg.projection_dim, cfg.projection_dim]),
            classifier: cfg
                .num_classes
                .map(|c| Sequential::zeros(classifier_layers(d, c))),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            encoder: self.encoder.zeros_like(),
            projection: self.projection.zeros_like(),
            bilinear: self.bilinear.zeros_like(),
            classifier: self.classifier.as_ref().map(Sequential::zeros_like),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        match self.projection.layers.first() {
            Some(LayerSpec::Dense { inputs, .. }) => *inputs,
            _ => 0,
        }
    }

    pub fn projection_dim(&self) -> usize {
        self.bilinear.shape()[0]
    }

    /// Replaces the classifier with a freshly initialized `d -> num_classes` layer.
    pub fn attach_classifier(&mut self, num_classes: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.classifier = Some(Sequential::init(
            classifier_layers(self.embedding_dim(), num_classes),
            &mut rng,
        ));
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        self.named_in(&[
            ParamGroup::Encoder,
            ParamGroup::Projection,
            ParamGroup::Bilinear,
            ParamGroup::Classifier,
        ])
    }

    pub fn named_in(&self, groups: &[ParamGroup]) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for g in groups {
            match g {
                ParamGroup::Encoder => out.extend(self.encoder.named("encoder")),
                ParamGroup::Projection => out.extend(self.projection.named("projection")),
                ParamGroup::Bilinear => out.push(("bilinear.weight".to_string(), &self.bilinear)),
                ParamGroup::Classifier => {
                    if let Some(c) = &self.classifier {
                        out.extend(c.named("classifier"));
                    }
                }
            }
        }
        out
    }

    pub fn named_mut_in(&mut self, groups: &[ParamGroup]) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        let ModelParams { encoder, projection, bilinear, classifier } = self;
        let mut bilinear = Some(bilinear);
        let mut encoder = Some(encoder);
        let mut projection = Some(projection);
        let mut classifier = classifier.as_mut();
        for g in groups {
            match g {
                ParamGroup::Encoder => {
                    if let Some(e) = encoder.take() {
                        out.extend(e.named_mut("encoder"));
                    }
                }
                ParamGroup::Projection => {
                    if let Some(p) = projection.take() {
                        out.extend(p.named_mut("projection"));
                    }
                }
                ParamGroup::Bilinear => {
                    if let Some(b) = bilinear.take() {
                        out.push(("bilinear.weight".to_string(), b));
                    }
                }
                ParamGroup::Classifier => {
                    if let Some(c) = classifier.take() {
                        out.extend(c.named_mut("classifier"));
                    }
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &ModelParams<T>) -> Result<()> {
        self.encoder.add_assign(&other.encoder)?;
        self.projection.add_assign(&other.projection)?;
        self.bilinear.add_assign(&other.bilinear)?;
        if let (Some(a), Some(b)) = (self.classifier.as_mut(), other.classifier.as_ref()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        self.encoder.scale(factor);
        self.projection.scale(factor);
        self.bilinear.scale(factor);
        if let Some(c) = self.classifier.as_mut() {
            c.scale(factor);
        }
    }

    /// Embedding `h = f(x)` of one `(mel, frame)` patch.
    pub fn encode(&self, patch: &Tensor<T>) -> Result<Tensor<T>> {
        encode(patch, &self.encoder)
    }

    /// `z = g(h)`.
    pub fn project(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        project(h, &self.projection)
    }

    pub fn classify(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        let c = self
            .classifier
            .as_ref()
            .ok_or_else(|| Error::Config("model has no classifier attached".into()))?;
        classify(h, c)
    }
}

fn as_image<T: Scalar>(patch: &Tensor<T>) -> Result<Tensor<T>> {
    match patch.shape() {
        [h, w] => patch.clone().reshape([1, *h, *w]),
        [1, _, _] => Ok(patch.clone()),
        other => Err(Error::shape("encode input", "[mels, frames]", other)),
    }
}

pub fn encode<T: Scalar>(patch: &Tensor<T>, encoder: &Sequential<T>) -> Result<Tensor<T>> {
    encoder.infer(&as_image(patch)?)
}

/// Encoder forward keeping the caches needed for backpropagation.
pub fn encode_train<T: Scalar>(
    patch: &Tensor<T>,
    encoder: &Sequential<T>,
) -> Result<(Tensor<T>, Vec<LayerCache<T>>)> {
    encoder.forward(&as_image(patch)?)
}

pub fn project<T: Scalar>(h: &Tensor<T>, projection: &Sequential<T>) -> Result<Tensor<T>> {
    projection.infer(h)
}

pub fn classify<T: Scalar>(h: &Tensor<T>, classifier: &Sequential<T>) -> Result<Tensor<T>> {
    classifier.infer(h)
}

/// Similarity applied to projections.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SimilarityHead {
    /// `z^T W z'`.
    Bilinear,
    /// `cos(z, z') / temperature`.
    Cosine { temperature: f64 },
}

impl SimilarityHead {
    pub fn cosine() -> Self {
        SimilarityHead::Cosine { temperature: 0.2 }
    }
}

pub fn bilinear_sim<T: Scalar>(z: &Tensor<T>, z2: &Tensor<T>, w: &Tensor<T>) -> Result<T> {
    let k = z.len();
    if z2.len() != k || w.shape() != [k, k] {
        return Err(Error::shape(
            "bilinear similarity",
            format!("z, z' of length {k} and W of [{k}, {k}]"),
            (z.shape(), z2.shape(), w.shape()),
        ));
    }
    let mut acc = T::zero();
    for (i, &zi) in z.data().iter().enumerate() {
        let row = &w.data()[i * k..(i + 1) * k];
        let inner = row
            .iter()
            .zip(z2.data())
            .fold(T::zero(), |a, (&wij, &zj)| a + wij * zj);
        acc += zi * inner;
    }
    Ok(acc)
}

pub fn cosine_sim<T: Scalar>(z: &Tensor<T>, z2: &Tensor<T>, temperature: f64) -> Result<T> {
    if z.len() != z2.len() {
        return Err(Error::shape("cosine similarity", z.shape(), z2.shape()));
    }
    if temperature <= 0.0 {
        return Err(Error::Config("cosine temperature must be positive".into()));
    }
    let (na, nb) = (z.norm(), z2.norm());
    if na == T::zero() || nb == T::zero() {
        return Err(Error::Degenerate("cosine similarity of a zero-norm vector".into()));
    }
    Ok(z.dot(z2) / (na * nb * T::of(temperature)))
}
