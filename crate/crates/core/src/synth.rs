//! Seeded synthetic corpus with known class structure.
//!
//! A class is a set of three steady tones, a band of noise and an amplitude
//! envelope rate. Clips of one class differ in tone phases, noise draw, SNR,
//! envelope depth and phase, and in loud class-independent broadband bursts
//! that change from one segment to the next.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audio::{AudioClip, WORKING_RATE};
use crate::contrastive::stream_rng;
use crate::error::{Error, Result};

const STREAM_CLIP: u64 = 11;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassSignature {
    /// Integer tone frequencies in Hz.
    pub tones_hz: [u32; 3],
    /// Pass band of the additive noise, Hz.
    pub noise_band_hz: (f64, f64),
    /// Amplitude envelope rate, Hz.
    pub envelope_hz: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub clips_per_class: usize,
    pub clip_seconds: f64,
    pub sample_rate: u32,
    pub snr_db: (f64, f64),
    /// Maximum envelope modulation depth.
    pub envelope_depth: f64,
    /// Mean rate of class-independent broadband noise bursts (Poisson count per clip).
    pub bursts_per_second: f64,
    /// Burst amplitude range relative to one class tone.
    pub burst_level: (f64, f64),
    /// Burst duration range, seconds.
    pub burst_seconds: (f64, f64),
    /// Range of the per-clip peak level after normalization, dB re full scale.
    pub peak_db: (f64, f64),
    pub classes: Vec<ClassSignature>,
}

impl SynthSpec {
    /// `num_classes` generated signatures with interleaved tones on a mel grid.
    pub fn new(num_classes: usize, clips_per_class: usize, clip_seconds: f64) -> Self {
        SynthSpec {
            clips_per_class,
            clip_seconds,
            sample_rate: WORKING_RATE,
            snr_db: (5.0, 20.0),
            envelope_depth: 0.8,
            bursts_per_second: 10.0,
            burst_level: (4.0, 16.0),
            burst_seconds: (0.1, 0.3),
            peak_db: (-1.0, -1.0),
            classes: default_signatures(num_classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_clips(&self) -> usize {
        self.classes.len() * self.clips_per_class
    }

    pub fn clip_len(&self) -> usize {
        (self.clip_seconds * self.sample_rate as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate as f64 / 2.0;
        if self.classes.is_empty() || self.clips_per_class == 0 || self.clip_len() == 0 {
            return Err(Error::Synth(
                "spec needs at least one class, one clip per class and a positive length".into(),
            ));
        }
        for (c, sig) in self.classes.iter().enumerate() {
            if sig.tones_hz.iter().any(|&f| f == 0 || f as f64 >= nyquist) {
                return Err(Error::Synth(format!(
                    "class {c}: tones {:?} must lie in (0, {nyquist}) Hz",
                    sig.tones_hz
                )));
            }
            let (lo, hi) = sig.noise_band_hz;
            if !(0.0 <= lo && lo < hi && hi <= nyquist) {
                return Err(Error::Synth(format!("class {c}: invalid noise band {lo}..{hi} Hz")));
            }
            if !(sig.envelope_hz > 0.0) {
                return Err(Error::Synth(format!("class {c}: envelope rate must be positive")));
            }
            for (d, other) in self.classes[..c].iter().enumerate() {
                if same_signature(sig, other) {
                    return Err(Error::Synth(format!(
                        "classes {d} and {c} have the same signature"
                    )));
                }
            }
        }
        let (lo, hi) = self.snr_db;
        if !(lo <= hi) || !(0.0..=1.0).contains(&self.envelope_depth) {
            return Err(Error::Synth("invalid SNR range or envelope depth".into()));
        }
        let ranges = [self.burst_level, self.burst_seconds, self.peak_db];
        if !(self.bursts_per_second >= 0.0)
            || ranges.iter().any(|(a, b)| !(a <= b))
            || self.burst_seconds.0 <= 0.0
            || self.peak_db.1 > 0.0
        {
            return Err(Error::Synth("invalid burst or peak-level settings".into()));
        }
        Ok(())
    }
}

fn same_signature(a: &ClassSignature, b: &ClassSignature) -> bool {
    let mut ta = a.tones_hz;
    let mut tb = b.tones_hz;
    ta.sort_unstable();
    tb.sort_unstable();
    ta == tb && a.noise_band_hz == b.noise_band_hz && a.envelope_hz == b.envelope_hz
}

fn mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn inv_mel(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Tone `j` of class `c` sits at slot `j * C + c` of `3C` mel-spaced slots
/// between 200 Hz and 5 kHz; the noise bands tile 100 Hz..7.5 kHz on the mel
/// axis.
pub fn default_signatures(num_classes: usize) -> Vec<ClassSignature> {
    let c_total = num_classes.max(1);
    let slots = 3 * c_total;
    let (m_lo, m_hi) = (mel(200.0), mel(5000.0));
    let slot_hz = |s: usize| {
        let m = m_lo + (m_hi - m_lo) * (s as f64 + 0.5) / slots as f64;
        inv_mel(m).round() as u32
    };
    let (n_lo, n_hi) = (mel(100.0), mel(7500.0));
    (0..num_classes)
        .map(|c| {
            let band = |k: f64| inv_mel(n_lo + (n_hi - n_lo) * k / c_total as f64).round();
            ClassSignature {
                tones_hz: [slot_hz(c), slot_hz(c_total + c), slot_hz(2 * c_total + c)],
                noise_band_hz: (band(c as f64), band(c as f64 + 1.0)),
                envelope_hz: 1.0 + c as f64,
            }
        })
        .collect()
}

/// White Gaussian noise restricted to `band` by zeroing FFT bins outside it.
fn band_noise(len: usize, sample_rate: u32, band: (f64, f64), rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..len)
        .map(|_| Complex::new(StandardNormal.sample(rng), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    let df = sample_rate as f64 / len as f64;
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(len - k) as f64 * df;
        if f < band.0 || f > band.1 {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    buf.iter().map(|c| c.re / len as f64).collect()
}

fn mean_power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

/// Hann-windowed white-noise bursts at random times. `burst_level` is the
/// burst RMS relative to the RMS of one class tone.
fn add_bursts(x: &mut [f64], cfg: &SynthSpec, rng: &mut ChaCha8Rng) {
    if cfg.bursts_per_second <= 0.0 {
        return;
    }
    let sr = cfg.sample_rate as f64;
    let lambda = cfg.bursts_per_second * x.len() as f64 / sr;
    let count = rand_distr::Poisson::new(lambda).map_or(0, |p| p.sample(rng) as usize);
    for _ in 0..count {
        let len = ((rng.gen_range(cfg.burst_seconds.0..=cfg.burst_seconds.1) * sr) as usize).clamp(1, x.len());
        let start = rng.gen_range(0..=x.len() - len);
        // Hann window has mean square 3/8
        let amp = rng.gen_range(cfg.burst_level.0..=cfg.burst_level.1) * (0.5f64 / 0.375).sqrt();
        for j in 0..len {
            let win = 0.5 - 0.5 * (2.0 * PI * j as f64 / len as f64).cos();
            let z: f64 = StandardNormal.sample(rng);
            x[start + j] += amp * win * z;
        }
    }
}

fn render(spec: &ClassSignature, cfg: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = cfg.clip_len();
    let sr = cfg.sample_rate as f64;
    let mut tones = vec![0.0f64; n];
    for &f in &spec.tones_hz {
        let phase = rng.gen_range(0.0..2.0 * PI);
        let w = 2.0 * PI * f as f64 / sr;
        for (i, v) in tones.iter_mut().enumerate() {
            *v += (w * i as f64 + phase).sin();
        }
    }
    let tone_power = mean_power(&tones);
    add_bursts(&mut tones, cfg, rng);
    let snr_db = rng.gen_range(cfg.snr_db.0..=cfg.snr_db.1);
    let mut noise = band_noise(n, cfg.sample_rate, spec.noise_band_hz, rng);
    let np = mean_power(&noise);
    if np > 0.0 {
        let gain = (tone_power / np / 10f64.powf(snr_db / 10.0)).sqrt();
        noise.iter_mut().for_each(|v| *v *= gain);
    }
    let depth = rng.gen_range(0.0..=cfg.envelope_depth);
    let env_phase = rng.gen_range(0.0..2.0 * PI);
    let we = 2.0 * PI * spec.envelope_hz / sr;
    let mixed: Vec<f64> = tones
        .iter()
        .zip(&noise)
        .enumerate()
        .map(|(i, (t, z))| (t + z) * (1.0 - depth * 0.5 * (1.0 - (we * i as f64 + env_phase).cos())))
        .collect();
    let peak = mixed.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let target = 10f64.powf(rng.gen_range(cfg.peak_db.0..=cfg.peak_db.1) / 20.0);
    let scale = if peak > 0.0 { target / peak } else { 0.0 };
    mixed.iter().map(|v| (v * scale) as f32).collect()
}

/// Clip `i` has label `i % C`; the same `(spec, seed)` gives the same corpus.
pub fn generate(spec: &SynthSpec, seed: u64) -> Result<Vec<(AudioClip, usize)>> {
    spec.validate()?;
    let c = spec.num_classes();
    (0..spec.num_clips())
        .into_par_iter()
        .map(|i| {
            let label = i % c;
            let mut rng = stream_rng(seed, &[STREAM_CLIP, i as u64]);
            let samples = render(&spec.classes[label], spec, &mut rng);
            Ok((
                AudioClip::new(format!("synth-{seed}-{i:05}"), samples, spec.sample_rate),
                label,
            ))
        })
        .collect()
}

/// Splits by the parity of each clip's index within its class: even indices
/// train, odd indices test.
pub fn split_by_parity<T: Clone>(corpus: &[(T, usize)]) -> (Vec<(T, usize)>, Vec<(T, usize)>) {
    let mut seen = std::collections::HashMap::<usize, usize>::new();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for item in corpus {
        let k = seen.entry(item.1).or_insert(0);
        if k.is_multiple_of(2) {
            train.push(item.clone());
        } else {
            test.push(item.clone());
        }
        *k += 1;
    }
    (train, test)
}
