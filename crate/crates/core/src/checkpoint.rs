//! Binary checkpoint: resolved config text plus a table of named `f32` tensors.
//!
//! Layout (integers little-endian `u32`): magic `COLA`, version, config text
//! length + UTF-8 bytes, tensor count, then per tensor the name length + name,
//! rank, dims and raw `f32` data.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::{parse_config_text, RunConfig};
use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::model::{ModelParams, ParamGroup};
use crate::numerics::AdamState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"COLA";
pub const VERSION: u32 = 1;

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Canonical text of the run config that produced the weights.
    pub config_text: String,
    /// Completed epochs.
    pub epoch: u64,
    pub seed: u64,
    /// Optimizer step count; present iff Adam moments are stored.
    pub adam_step: Option<u64>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(
        cfg: &RunConfig,
        params: &ModelParams<T>,
        adam: Option<&AdamState<T>>,
        epoch: u64,
    ) -> Self {
        let mut tensors: Vec<(String, Tensor<f32>)> =
            params.named().into_iter().map(|(n, t)| (n, t.cast())).collect();
        if let Some(a) = adam {
            for (n, m) in a.names.iter().zip(&a.first_moment) {
                tensors.push((format!("{ADAM_M}{n}"), m.cast()));
            }
            for (n, v) in a.names.iter().zip(&a.second_moment) {
                tensors.push((format!("{ADAM_V}{n}"), v.cast()));
            }
        }
        Checkpoint {
            config_text: cfg.to_text(),
            epoch,
            seed: cfg.seed,
            adam_step: adam.map(|a| a.step),
            tensors,
        }
    }

    pub fn config(&self) -> Result<RunConfig> {
        parse_config_text(&self.config_text, &[])
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuilds the model described by the stored config and fills it from the
    /// tensor table. A classifier is attached iff one was saved.
    pub fn to_model<T: Scalar>(&self) -> Result<ModelParams<T>> {
        let cfg = self.config()?;
        let fe = FrontendConfig::default();
        let mut mcfg = cfg.model_config([fe.n_mels, fe.n_frames]);
        mcfg.num_classes = self
            .tensor("classifier.0.bias")
            .map(|t| t.len());
        mcfg.validate()?;
        let mut params = ModelParams::<T>::zeros(&mcfg);
        let all = [
            ParamGroup::Encoder,
            ParamGroup::Projection,
            ParamGroup::Bilinear,
            ParamGroup::Classifier,
        ];
        for (name, slot) in params.named_mut_in(&all) {
            let stored = self
                .tensor(&name)
                .ok_or_else(|| Error::Checkpoint {
                    offset: 0,
                    message: format!("tensor `{name}` missing"),
                })?;
            if stored.shape() != slot.shape() {
                return Err(Error::shape(format!("checkpoint tensor `{name}`"), slot.shape(), stored.shape()));
            }
            *slot = stored.cast();
        }
        Ok(params)
    }

    /// Adam moments for the parameters of `groups`, if they were stored.
    pub fn adam_state<T: Scalar>(&self, params: &ModelParams<T>, groups: &[ParamGroup]) -> Option<AdamState<T>> {
        let step = self.adam_step?;
        let mut state = AdamState::new(params.named_in(groups));
        for (i, name) in state.names.iter().enumerate() {
            state.first_moment[i] = self.tensor(&format!("{ADAM_M}{name}"))?.cast();
            state.second_moment[i] = self.tensor(&format!("{ADAM_V}{name}"))?.cast();
        }
        state.step = step;
        Some(state)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let mut text = format!("@epoch = {}\n@seed = {}\n", self.epoch, self.seed);
        if let Some(s) = self.adam_step {
            text.push_str(&format!("@adam_step = {s}\n"));
        }
        text.push_str(&self.config_text);
        put_u32(&mut out, text.len() as u32);
        out.extend_from_slice(text.as_bytes());
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(r.err_at(0, "bad magic, not a checkpoint file"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let text_len = r.u32("config length")? as usize;
        let text_at = r.pos;
        let text = std::str::from_utf8(r.take(text_len, "config text")?)
            .map_err(|_| r.err_at(text_at, "config text is not UTF-8"))?;
        let (mut epoch, mut seed, mut adam_step) = (None, None, None);
        let mut config_text = String::new();
        for line in text.lines() {
            if let Some(meta) = line.strip_prefix('@') {
                let (k, v) = meta.split_once('=').ok_or_else(|| r.err_at(text_at, "malformed meta line"))?;
                let v: u64 = v.trim().parse().map_err(|_| r.err_at(text_at, "malformed meta value"))?;
                match k.trim() {
                    "epoch" => epoch = Some(v),
                    "seed" => seed = Some(v),
                    "adam_step" => adam_step = Some(v),
                    other => return Err(r.err_at(text_at, &format!("unknown meta key `{other}`"))),
                }
            } else {
                config_text.push_str(line);
                config_text.push('\n');
            }
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u32("tensor name length")? as usize;
            let name_at = r.pos;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| r.err_at(name_at, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32("tensor rank")? as usize;
            if rank > 8 {
                return Err(r.err_at(r.pos - 4, &format!("tensor `{name}` has implausible rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("tensor dim")? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| r.err_at(r.pos, "tensor too large"))?, &format!("data of `{name}`"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(r.err_at(r.pos, "trailing bytes after tensor table"));
        }
        Ok(Checkpoint {
            config_text,
            epoch: epoch.ok_or_else(|| r.err_at(text_at, "missing @epoch"))?,
            seed: seed.ok_or_else(|| r.err_at(text_at, "missing @seed"))?,
            adam_step,
            tensors,
        })
    }

    /// Writes to a sibling temp file and renames it over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes())
            .and_then(|_| f.sync_all())
            .map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err_at(&self, offset: usize, message: &str) -> Error {
        Error::Checkpoint {
            offset: offset as u64,
            message: message.to_string(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.bytes.len() => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => Err(self.err_at(self.pos, &format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config_text;

    fn cfg() -> RunConfig {
        parse_config_text(
            "mode = pretrain\npreset = desk\npretrain_manifest = p.jsonl\nencoder_channels = 2,3\nprojection_dim = 4\nseed = 5\n",
            &[],
        )
        .unwrap()
    }

    fn model(c: &RunConfig) -> ModelParams<f32> {
        ModelParams::init(&c.model_config([64, 96]), 1).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = cfg();
        let mut p = model(&c);
        p.attach_classifier(3, 2);
        let mut adam = AdamState::new(p.named());
        adam.step = 7;
        adam.first_moment[0].data_mut()[0] = 0.25;
        let ck = Checkpoint::from_model(&c, &p, Some(&adam), 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let before = fs::read(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), before);
        assert_eq!(back, ck);
        let q: ModelParams<f32> = back.to_model().unwrap();
        for ((n1, a), (n2, b)) in p.named().into_iter().zip(q.named()) {
            assert_eq!(n1, n2);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b), "{n1}");
        }
        let all = [ParamGroup::Encoder, ParamGroup::Projection, ParamGroup::Bilinear, ParamGroup::Classifier];
        assert_eq!(back.adam_state(&q, &all).unwrap(), adam);
        assert_eq!(back.config().unwrap(), c);
    }

    #[test]
    fn truncation_is_rejected_at_every_length() {
        let c = cfg();
        let bytes = Checkpoint::from_model(&c, &model(&c), None, 0).to_bytes();
        for cut in (0..bytes.len()).step_by(37).chain([bytes.len() - 1]) {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::Checkpoint { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn version_and_magic_are_checked() {
        let c = cfg();
        let mut bytes = Checkpoint::from_model(&c, &model(&c), None, 0).to_bytes();
        bytes[4] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::VersionMismatch { found: 2, expected: 1 })
        ));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint { offset: 0, .. })));
    }

    #[test]
    fn missing_tensor_fails_model_rebuild() {
        let c = cfg();
        let mut ck = Checkpoint::from_model(&c, &model(&c), None, 0);
        ck.tensors.retain(|(n, _)| n != "bilinear.weight");
        assert!(ck.to_model::<f32>().is_err());
    }
}
