//! WAV decoding, resampling and dataset manifests.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Working sample rate of the whole pipeline.
pub const WORKING_RATE: u32 = 16_000;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub id: String,
    /// Mono samples in `[-1, 1]`.
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(id: impl Into<String>, samples: Vec<f32>, sample_rate: u32) -> Self {
        AudioClip {
            id: id.into(),
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SampleFormat {
    U8,
    I16,
    I32,
    F32,
}

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

/// Reads a RIFF/WAVE file into a mono clip whose id is the file stem.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_wav(&bytes, id)
}

fn parse_err(chunk: &str, message: impl Into<String>) -> Error {
    Error::WavParse {
        chunk: chunk.to_string(),
        message: message.into(),
    }
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decodes an in-memory RIFF/WAVE byte stream.
///
/// Stereo is downmixed by channel mean; integer PCM is divided by the
/// format's max positive magnitude and clamped to `[-1, 1]`.
pub fn decode_wav(bytes: &[u8], id: impl Into<String>) -> Result<AudioClip> {
    if bytes.len() < 12 {
        return Err(parse_err("RIFF", "file shorter than the 12-byte RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(parse_err("RIFF", "missing RIFF magic"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(parse_err("RIFF", "form type is not WAVE"));
    }

    let mut fmt: Option<(SampleFormat, u16, u32, usize)> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let chunk_id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let name = String::from_utf8_lossy(chunk_id).into_owned();
        let body_end = body_start
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| {
                parse_err(
                    &name,
                    format!("declared size {size} overruns file of {} bytes", bytes.len()),
                )
            })?;
        let body = &bytes[body_start..body_end];
        match chunk_id {
            b"fmt " => fmt = Some(parse_fmt(body)?),
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word aligned
        pos = body_end + (size & 1);
    }

    let (format, channels, sample_rate, block_align) =
        fmt.ok_or_else(|| parse_err("fmt ", "required chunk not found"))?;
    let data = data.ok_or_else(|| parse_err("data", "required chunk not found"))?;
    if data.len() % block_align != 0 {
        return Err(parse_err(
            "data",
            format!(
                "length {} is not a multiple of the {block_align}-byte frame",
                data.len()
            ),
        ));
    }
    let frames = data.len() / block_align;
    if frames == 0 {
        return Err(parse_err("data", "contains no sample frames"));
    }

    let width = block_align / channels as usize;
    let decode = |raw: &[u8]| -> f32 {
        let v = match format {
            SampleFormat::U8 => (raw[0] as f32 - 128.0) / 127.0,
            SampleFormat::I16 => i16::from_le_bytes([raw[0], raw[1]]) as f32 / i16::MAX as f32,
            SampleFormat::I32 => {
                (i32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]) as f64 / i32::MAX as f64)
                    as f32
            }
            SampleFormat::F32 => f32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]),
        };
        v.clamp(-1.0, 1.0)
    };

    let mut samples = Vec::with_capacity(frames);
    for frame in data.chunks_exact(block_align) {
        let mut acc = 0.0f32;
        for ch in 0..channels as usize {
            let v = decode(&frame[ch * width..(ch + 1) * width]);
            if v.is_nan() {
                return Err(parse_err("data", "non-finite float sample"));
            }
            acc += v;
        }
        samples.push(acc / channels as f32);
    }

    Ok(AudioClip::new(id, samples, sample_rate))
}

fn parse_fmt(body: &[u8]) -> Result<(SampleFormat, u16, u32, usize)> {
    if body.len() < 16 {
        return Err(parse_err(
            "fmt ",
            format!("{} bytes, need at least 16", body.len()),
        ));
    }
    let mut tag = u16_at(body, 0);
    let channels = u16_at(body, 2);
    let sample_rate = u32_at(body, 4);
    let block_align = u16_at(body, 12) as usize;
    let bits = u16_at(body, 14);
    if tag == FORMAT_EXTENSIBLE {
        if body.len() < 26 {
            return Err(parse_err("fmt ", "extensible format without sub-format GUID"));
        }
        tag = u16_at(body, 24);
    }
    if !(1..=2).contains(&channels) {
        return Err(Error::UnsupportedFormat(format!(
            "{channels} channels (only mono and stereo are supported)"
        )));
    }
    if sample_rate == 0 {
        return Err(parse_err("fmt ", "sample rate is zero"));
    }
    let format = match (tag, bits) {
        (FORMAT_PCM, 8) => SampleFormat::U8,
        (FORMAT_PCM, 16) => SampleFormat::I16,
        (FORMAT_PCM, 32) => SampleFormat::I32,
        (FORMAT_FLOAT, 32) => SampleFormat::F32,
        (FORMAT_PCM, b) => {
            return Err(Error::UnsupportedFormat(format!("{b}-bit integer PCM")))
        }
        (FORMAT_FLOAT, b) => return Err(Error::UnsupportedFormat(format!("{b}-bit float"))),
        (t, _) => {
            return Err(Error::UnsupportedFormat(format!(
                "format tag {t:#06x} (only PCM and IEEE float)"
            )))
        }
    };
    let expected_align = channels as usize * bits as usize / 8;
    if block_align != expected_align {
        return Err(parse_err(
            "fmt ",
            format!("block align {block_align}, expected {expected_align}"),
        ));
    }
    Ok((format, channels, sample_rate, block_align))
}

/// Encodes a clip as 16-bit mono PCM.
pub fn encode_wav_pcm16(clip: &AudioClip) -> Vec<u8> {
    let data_len = clip.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &clip.samples {
        let q = (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn write_wav_pcm16(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_wav_pcm16(clip)).map_err(|e| Error::io(path, e))
}

/// Linear-interpolation resampling with the last sample held at the right edge.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(Error::Config("resample target rate must be positive".into()));
    }
    if clip.sample_rate == target_rate {
        return Ok(clip.clone());
    }
    let n = clip.samples.len();
    let ratio = clip.sample_rate as f64 / target_rate as f64;
    let out_len = (n as f64 * target_rate as f64 / clip.sample_rate as f64).round() as usize;
    let last = n.saturating_sub(1);
    let samples = (0..out_len)
        .map(|i| {
            let t = i as f64 * ratio;
            let i0 = (t.floor() as usize).min(last);
            let i1 = (i0 + 1).min(last);
            let frac = (t - i0 as f64).clamp(0.0, 1.0);
            let a = clip.samples[i0] as f64;
            let b = clip.samples[i1] as f64;
            (a + (b - a) * frac) as f32
        })
        .collect();
    Ok(AudioClip::new(clip.id.clone(), samples, target_rate))
}

/// Loads a WAV file and brings it to [`WORKING_RATE`].
pub fn load_working_clip(path: impl AsRef<Path>) -> Result<AudioClip> {
    let clip = load_wav(path)?;
    resample(&clip, WORKING_RATE)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

/// Parses a manifest: one flat JSON object per line, blank lines skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(line).map_err(|e| Error::Manifest {
                line: i + 1,
                message: e.to_string(),
            })?;
        entries.push(entry);
    }
    Ok(entries)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line.map_err(|e| Error::io(path, e))?);
        text.push('\n');
    }
    parse_manifest(&text)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e).expect("manifest entries serialize");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Resolves an entry path relative to the directory holding the manifest.
pub fn resolve_entry_path(manifest: &Path, entry: &ManifestEntry) -> PathBuf {
    let p = Path::new(&entry.path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Loads every clip named in a manifest at the working rate, with its label.
pub fn load_manifest_clips(manifest: impl AsRef<Path>) -> Result<Vec<(AudioClip, Option<usize>)>> {
    let manifest = manifest.as_ref();
    load_manifest(manifest)?
        .iter()
        .map(|e| {
            let clip = load_working_clip(resolve_entry_path(manifest, e))?;
            Ok((clip, e.label))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn wav_bytes(tag: u16, channels: u16, bits: u16, rate: u32, data: &[u8]) -> Vec<u8> {
        let block = channels * bits / 8;
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + data.len() as u32).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&tag.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&rate.to_le_bytes());
        out.extend_from_slice(&(rate * block as u32).to_le_bytes());
        out.extend_from_slice(&block.to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(data.len() as u32).to_le_bytes());
        out.extend_from_slice(data);
        out
    }

    fn pcm16(values: &[i16]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    #[test]
    fn single_16_bit_sample_scales_by_max_magnitude() {
        let clip = decode_wav(&wav_bytes(1, 1, 16, 16000, &pcm16(&[16384])), "a").unwrap();
        assert_eq!(clip.samples.len(), 1);
        assert!((clip.samples[0] - 0.500_015_3).abs() < 1e-6);
        assert_eq!(clip.sample_rate, 16000);
    }

    #[test]
    fn symmetric_stereo_frame_downmixes_to_zero() {
        let clip = decode_wav(&wav_bytes(1, 2, 16, 16000, &pcm16(&[1000, -1000])), "a").unwrap();
        assert_eq!(clip.samples, vec![0.0]);
    }

    #[test]
    fn other_supported_encodings_decode() {
        let u8clip = decode_wav(&wav_bytes(1, 1, 8, 8000, &[128, 255, 0]), "a").unwrap();
        assert_eq!(u8clip.samples, vec![0.0, 1.0, -1.0]);

        let i32data: Vec<u8> = [i32::MAX, 0].iter().flat_map(|v| v.to_le_bytes()).collect();
        let i32clip = decode_wav(&wav_bytes(1, 1, 32, 8000, &i32data), "a").unwrap();
        assert_eq!(i32clip.samples, vec![1.0, 0.0]);

        let fdata: Vec<u8> = [0.25f32, -2.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        let fclip = decode_wav(&wav_bytes(3, 1, 32, 8000, &fdata), "a").unwrap();
        assert_eq!(fclip.samples, vec![0.25, -1.0]);
    }

    #[test]
    fn most_negative_16_bit_value_clamps_to_unit_range() {
        let clip = decode_wav(&wav_bytes(1, 1, 16, 16000, &pcm16(&[i16::MIN])), "a").unwrap();
        assert_eq!(clip.samples, vec![-1.0]);
    }

    #[test]
    fn twenty_four_bit_pcm_is_unsupported() {
        let err = decode_wav(&wav_bytes(1, 1, 24, 16000, &[0, 0, 0]), "a").unwrap_err();
        assert!(matches!(err, Error::UnsupportedFormat(_)), "{err}");
    }

    #[test]
    fn malformed_headers_name_the_chunk() {
        let mut bytes = wav_bytes(1, 1, 16, 16000, &pcm16(&[1, 2]));
        bytes[0] = b'X';
        assert!(matches!(decode_wav(&bytes, "a"), Err(Error::WavParse { chunk, .. }) if chunk == "RIFF"));

        // truncate inside the data chunk
        let bytes = wav_bytes(1, 1, 16, 16000, &pcm16(&[1, 2]));
        let err = decode_wav(&bytes[..bytes.len() - 1], "a").unwrap_err();
        assert!(matches!(err, Error::WavParse { ref chunk, .. } if chunk == "data"), "{err}");

        // short fmt chunk
        let mut bytes = wav_bytes(1, 1, 16, 16000, &pcm16(&[1]));
        bytes[16..20].copy_from_slice(&8u32.to_le_bytes());
        let err = decode_wav(&bytes, "a").unwrap_err();
        assert!(matches!(err, Error::WavParse { ref chunk, .. } if chunk == "fmt "), "{err}");
    }

    #[test]
    fn unknown_chunks_are_skipped() {
        let base = wav_bytes(1, 1, 16, 16000, &pcm16(&[100]));
        let mut bytes = base[..12].to_vec();
        bytes.extend_from_slice(b"LIST");
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&[1, 2, 3, 0]); // odd size plus pad byte
        bytes.extend_from_slice(&base[12..]);
        let clip = decode_wav(&bytes, "a").unwrap();
        assert_eq!(clip.samples.len(), 1);
    }

    #[test]
    fn resample_identity_and_upsampling() {
        let clip = AudioClip::new("a", vec![0.1, 0.2, 0.3], 16000);
        assert_eq!(resample(&clip, 16000).unwrap(), clip);

        let up = resample(&AudioClip::new("a", vec![0.0, 1.0], 8000), 16000).unwrap();
        assert_eq!(up.samples, vec![0.0, 0.5, 1.0, 1.0]);
        assert_eq!(up.sample_rate, 16000);

        let down = resample(&AudioClip::new("a", vec![0.0; 32000], 32000), 16000).unwrap();
        assert_eq!(down.samples.len(), 16000);
        assert!(resample(&clip, 0).is_err());
    }

    #[test]
    fn resample_round_trip_on_low_sine() {
        let r = 8000u32;
        let samples: Vec<f32> = (0..4000)
            .map(|i| (2.0 * std::f64::consts::PI * 1500.0 * i as f64 / r as f64).sin() as f32 * 0.8)
            .collect();
        let clip = AudioClip::new("s", samples, r);
        let back = resample(&resample(&clip, 2 * r).unwrap(), r).unwrap();
        assert!((back.len() as i64 - clip.len() as i64).abs() <= 1);
        let err = clip
            .samples
            .iter()
            .zip(&back.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err <= 0.05, "max error {err}");
    }

    #[test]
    fn manifest_parsing() {
        let entries = parse_manifest(
            "{\"path\": \"a.wav\", \"label\": 1}\n\n{\"path\": \"b.wav\"}\n",
        )
        .unwrap();
        assert_eq!(
            entries,
            vec![
                ManifestEntry { path: "a.wav".into(), label: Some(1) },
                ManifestEntry { path: "b.wav".into(), label: None },
            ]
        );
        assert!(parse_manifest("").unwrap().is_empty());

        let err = parse_manifest("{\"label\": 2}\n").unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 1, .. }), "{err}");
        let err = parse_manifest("{\"path\": \"a\"}\n{\"path\": \"b\", \"label\": -1}").unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 2, .. }), "{err}");
    }

    #[test]
    fn manifest_file_round_trip_and_path_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let entries = vec![
            ManifestEntry { path: "x/a.wav".into(), label: Some(0) },
            ManifestEntry { path: "/abs/b.wav".into(), label: None },
        ];
        write_manifest(&path, &entries).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back, entries);
        assert_eq!(resolve_entry_path(&path, &back[0]), dir.path().join("x/a.wav"));
        assert_eq!(resolve_entry_path(&path, &back[1]), PathBuf::from("/abs/b.wav"));
    }

    proptest! {
        #[test]
        fn pcm16_decode_encode_decode_is_sample_exact(values in proptest::collection::vec(any::<i16>(), 1..200)) {
            let first = decode_wav(&wav_bytes(1, 1, 16, 16000, &pcm16(&values)), "a").unwrap();
            let second = decode_wav(&encode_wav_pcm16(&first), "a").unwrap();
            prop_assert_eq!(first.samples, second.samples);
        }

        #[test]
        fn downmix_is_channel_order_independent(frames in proptest::collection::vec((any::<i16>(), any::<i16>()), 1..100)) {
            let lr: Vec<i16> = frames.iter().flat_map(|&(l, r)| [l, r]).collect();
            let rl: Vec<i16> = frames.iter().flat_map(|&(l, r)| [r, l]).collect();
            let a = decode_wav(&wav_bytes(1, 2, 16, 16000, &pcm16(&lr)), "a").unwrap();
            let b = decode_wav(&wav_bytes(1, 2, 16, 16000, &pcm16(&rl)), "a").unwrap();
            prop_assert_eq!(a.samples, b.samples);
        }
    }
}
