//! Log-compressed mel-filterbank features.
//!
//! A 960 ms segment at 16 kHz becomes a `64 x 96` patch: Hann-windowed STFT
//! (400-sample window, 160-sample hop, 512-point FFT, reflection-padded so
//! frame `t` is centred on sample `t * hop`), power spectrum, triangular HTK
//! mel filters between 60 and 7800 Hz, then `ln(energy + 1e-6)`.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct FrontendConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub n_frames: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub fft_size: usize,
    pub log_offset: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            window_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 64,
            n_frames: 96,
            fmin: 60.0,
            fmax: 7800.0,
            fft_size: 512,
            log_offset: 1e-6,
        }
    }
}

impl FrontendConfig {
    pub fn window_len(&self, sample_rate: u32) -> usize {
        (sample_rate as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_len(&self, sample_rate: u32) -> usize {
        (sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    /// Samples per patch: `n_frames * hop`.
    pub fn segment_len(&self, sample_rate: u32) -> usize {
        self.n_frames * self.hop_len(sample_rate)
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        if !(self.fmin >= 0.0 && self.fmin < self.fmax) {
            return Err(Error::Config(format!(
                "frontend: fmin {} must be non-negative and below fmax {}",
                self.fmin, self.fmax
            )));
        }
        if self.fmax > nyquist {
            return Err(Error::Config(format!(
                "frontend: fmax {} Hz exceeds Nyquist {nyquist} Hz",
                self.fmax
            )));
        }
        let win = self.window_len(sample_rate);
        if win == 0 || self.hop_len(sample_rate) == 0 {
            return Err(Error::Config("frontend: window and hop must be non-empty".into()));
        }
        if self.fft_size < win {
            return Err(Error::Config(format!(
                "frontend: fft size {} is smaller than the {win}-sample window",
                self.fft_size
            )));
        }
        if self.n_mels == 0 || self.n_frames == 0 {
            return Err(Error::Config("frontend: n_mels and n_frames must be positive".into()));
        }
        if self.log_offset <= 0.0 {
            return Err(Error::Config("frontend: log offset must be positive".into()));
        }
        Ok(())
    }
}

/// HTK mel scale: `2595 * log10(1 + f / 700)`.
pub fn hz_to_mel<T: Scalar>(hz: T) -> T {
    T::of(2595.0) * (T::one() + hz / T::of(700.0)).log10()
}

pub fn mel_to_hz<T: Scalar>(mel: T) -> T {
    T::of(700.0) * (T::of(10.0).powf(mel / T::of(2595.0)) - T::one())
}

/// Triangular mel filters over the non-negative FFT bins.
#[derive(Clone, Debug)]
pub struct MelBank<T> {
    /// `n_mels x (fft_size / 2 + 1)`.
    pub weights: Tensor<T>,
    pub centers_hz: Vec<f64>,
    /// Half-open range of FFT bins with non-zero weight, per filter.
    support: Vec<(usize, usize)>,
}

impl<T: Scalar> MelBank<T> {
    pub fn n_mels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn n_bins(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Projects a power spectrum onto the filters.
    pub fn apply(&self, power: &[T], out: &mut [T]) {
        let n_bins = self.n_bins();
        for (m, o) in out.iter_mut().enumerate() {
            let (lo, hi) = self.support[m];
            let row = &self.weights.data()[m * n_bins..(m + 1) * n_bins];
            *o = row[lo..hi]
                .iter()
                .zip(&power[lo..hi])
                .fold(T::zero(), |acc, (&w, &p)| acc + w * p);
        }
    }
}

pub fn mel_filterbank<T: Scalar>(cfg: &FrontendConfig, sample_rate: u32) -> Result<MelBank<T>> {
    cfg.validate(sample_rate)?;
    let n_bins = cfg.fft_size / 2 + 1;
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(cfg.fmax);
    let step = (mel_hi - mel_lo) / (cfg.n_mels + 1) as f64;
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| {
            if i == 0 {
                cfg.fmin
            } else if i == cfg.n_mels + 1 {
                cfg.fmax
            } else {
                mel_to_hz(mel_lo + step * i as f64)
            }
        })
        .collect();

    let bin_hz = sample_rate as f64 / cfg.fft_size as f64;
    let mut weights = Tensor::zeros([cfg.n_mels, n_bins]);
    let mut support = Vec::with_capacity(cfg.n_mels);
    for m in 0..cfg.n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut weights.data_mut()[m * n_bins..(m + 1) * n_bins];
        let mut first = n_bins;
        let mut last = 0;
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let v = if f > lo && f <= center {
                (f - lo) / (center - lo)
            } else if f > center && f < hi {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            if v > 0.0 {
                *w = T::of(v);
                first = first.min(k);
                last = k + 1;
            }
        }
        support.push(if first < last { (first, last) } else { (0, 0) });
    }

    Ok(MelBank {
        weights,
        centers_hz: edges[1..=cfg.n_mels].to_vec(),
        support,
    })
}

/// Reusable log-mel extractor; immutable and shareable across threads.
pub struct Frontend<T: Scalar> {
    cfg: FrontendConfig,
    sample_rate: u32,
    bank: MelBank<T>,
    window: Vec<T>,
    hop: usize,
    fft: Arc<dyn Fft<T>>,
}

impl<T: Scalar> Frontend<T> {
    pub fn new(cfg: FrontendConfig, sample_rate: u32) -> Result<Self> {
        let bank = mel_filterbank(&cfg, sample_rate)?;
        let win = cfg.window_len(sample_rate);
        // periodic Hann
        let window = (0..win)
            .map(|n| {
                let phase = 2.0 * std::f64::consts::PI * n as f64 / win as f64;
                T::of(0.5 - 0.5 * phase.cos())
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(Frontend {
            hop: cfg.hop_len(sample_rate),
            cfg,
            sample_rate,
            bank,
            window,
            fft,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn bank(&self) -> &MelBank<T> {
        &self.bank
    }

    pub fn segment_len(&self) -> usize {
        self.cfg.segment_len(self.sample_rate)
    }

    pub fn patch_shape(&self) -> [usize; 2] {
        [self.cfg.n_mels, self.cfg.n_frames]
    }

    /// Power spectrum of every frame: `n_frames x (fft_size / 2 + 1)`.
    pub fn power_spectrogram(&self, segment: &[f32]) -> Result<Tensor<T>> {
        let expected = self.segment_len();
        if segment.len() != expected {
            return Err(Error::shape("log_mel segment", expected, segment.len()));
        }
        let n = segment.len();
        let win = self.window.len();
        let half = win / 2;
        let n_bins = self.cfg.fft_size / 2 + 1;
        let mut out = Tensor::zeros([self.cfg.n_frames, n_bins]);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); self.cfg.fft_size];
        let mut scratch =
            vec![Complex::new(T::zero(), T::zero()); self.fft.get_inplace_scratch_len()];
        for t in 0..self.cfg.n_frames {
            let start = (t * self.hop) as isize - half as isize;
            for (j, c) in buf.iter_mut().enumerate() {
                *c = if j < win {
                    let s = segment[reflect(start + j as isize, n)];
                    Complex::new(T::of(s as f64) * self.window[j], T::zero())
                } else {
                    Complex::new(T::zero(), T::zero())
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            let row = &mut out.data_mut()[t * n_bins..(t + 1) * n_bins];
            for (r, c) in row.iter_mut().zip(&buf) {
                *r = c.norm_sqr();
            }
        }
        Ok(out)
    }

    /// `n_mels x n_frames` log-mel patch of one segment.
    pub fn log_mel(&self, segment: &[f32]) -> Result<Tensor<T>> {
        let power = self.power_spectrogram(segment)?;
        let n_bins = power.shape()[1];
        let (n_mels, n_frames) = (self.cfg.n_mels, self.cfg.n_frames);
        let offset = T::of(self.cfg.log_offset);
        let mut mel = vec![T::zero(); n_mels];
        let mut patch = Tensor::zeros([n_mels, n_frames]);
        let data = patch.data_mut();
        for t in 0..n_frames {
            self.bank
                .apply(&power.data()[t * n_bins..(t + 1) * n_bins], &mut mel);
            for (m, &e) in mel.iter().enumerate() {
                data[m * n_frames + t] = (e + offset).ln();
            }
        }
        Ok(patch)
    }
}

/// Reflection index into `[0, n)` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// One-shot extraction with a freshly built frontend.
pub fn log_mel<T: Scalar>(segment: &[f32], cfg: &FrontendConfig, sample_rate: u32) -> Result<Tensor<T>> {
    Frontend::new(cfg.clone(), sample_rate)?.log_mel(segment)
}

/// The `len`-sample window of `clip` starting at `offset`.
pub fn segment(clip: &AudioClip, offset: usize, len: usize) -> Result<&[f32]> {
    match offset.checked_add(len) {
        Some(end) if end <= clip.samples.len() => Ok(&clip.samples[offset..end]),
        _ => Err(Error::Bounds(format!(
            "segment [{offset}, {offset}+{len}) exceeds clip `{}` of {} samples",
            clip.id,
            clip.samples.len()
        ))),
    }
}
