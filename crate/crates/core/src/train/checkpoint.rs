//! Binary checkpoints: little-endian header, config JSON, named tensor table
//! and a trailing SHA-256 of everything before it.
//!
//! Layout:
//! `magic[8] version:u32 dtype:u8 step:u64 rng_seed[32] rng_stream:u64
//! rng_word_pos:u128 fingerprint[32] config_len:u32 config[config_len]
//! n_tensors:u32 { name_len:u16 name flags:u8 rank:u8 dims:u64* data }*
//! checksum[32]`

use std::collections::BTreeMap;
use std::path::Path;

use lvqa_tensor::{DType, Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::{AdamW, AdamWConfig, Moments};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;

const MAGIC: &[u8; 8] = b"LVQACKPT";
pub const FORMAT_VERSION: u32 = 1;
const MOMENT_M: &str = "adam.m/";
const MOMENT_V: &str = "adam.v/";
const FLAG_TRAINABLE: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    optimizer: AdamWConfig,
    optimizer_step: u64,
    stage: u8,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Real> {
    pub model: Model<T>,
    pub optimizer: AdamW<T>,
    /// Training steps taken in the stage that produced this checkpoint.
    pub step: u64,
    pub stage: u8,
    pub rng: ChaCha8Rng,
}

/// SHA-256 of the canonical JSON of a model configuration.
pub fn config_fingerprint(cfg: &ModelConfig) -> [u8; 32] {
    let json = serde_json::to_vec(cfg).expect("model config serializes");
    Sha256::digest(json).into()
}

fn put_tensor<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>, flags: u8) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(flags);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(out);
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn new(model: Model<T>, optimizer: AdamW<T>, step: u64, stage: u8, rng: ChaCha8Rng) -> Self {
        Checkpoint { model, optimizer, step, stage, rng }
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        config_fingerprint(&self.model.config)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            model: self.model.config.clone(),
            optimizer: self.optimizer.config,
            optimizer_step: self.optimizer.step,
            stage: self.stage,
        };
        let config = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.get_seed());
        out.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        out.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        out.extend_from_slice(&self.fingerprint());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);

        let n = self.model.params.len() + 2 * self.optimizer.moments.len();
        out.extend_from_slice(&(n as u32).to_le_bytes());
        for (name, t) in self.model.params.iter() {
            let flags = if t.requires_grad() { FLAG_TRAINABLE } else { 0 };
            put_tensor(&mut out, name, t, flags);
        }
        for (name, mo) in &self.optimizer.moments {
            for (prefix, buf) in [(MOMENT_M, &mo.m), (MOMENT_V, &mo.v)] {
                let t = Tensor::new(vec![buf.len()], buf.clone()).expect("flat moment");
                put_tensor(&mut out, &format!("{prefix}{name}"), &t, 0);
            }
        }
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        let mut r = Reader { buf: body, at: 8 };
        let version = u32::from_le_bytes(r.array()?);
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version} (expected {FORMAT_VERSION})")));
        }
        if Sha256::digest(body).as_slice() != sum {
            return Err(bad("checksum mismatch; the file is corrupt"));
        }
        let dtype = DType::from_tag(r.take(1)?[0]).ok_or_else(|| bad("unknown dtype tag"))?;
        let step = u64::from_le_bytes(r.array()?);
        let seed: [u8; 32] = r.array()?;
        let stream = u64::from_le_bytes(r.array()?);
        let word_pos = u128::from_le_bytes(r.array()?);
        let fingerprint: [u8; 32] = r.array()?;
        let config_len = u32::from_le_bytes(r.array()?) as usize;
        let header: Header =
            serde_json::from_slice(r.take(config_len)?).map_err(|e| bad(&format!("bad header: {e}")))?;
        if config_fingerprint(&header.model) != fingerprint {
            return Err(bad("configuration fingerprint mismatch"));
        }

        let n = u32::from_le_bytes(r.array()?) as usize;
        let mut params = ParamStore::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for _ in 0..n {
            let name_len = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_string();
            let flags = r.take(1)?[0];
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(r.array()?) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * dtype.size_of())?;
            let data: Vec<T> = raw
                .chunks_exact(dtype.size_of())
                .map(|c| match dtype {
                    DType::F32 => T::from_f64_lossy(f32::read_le(c) as f64),
                    DType::F64 => T::from_f64_lossy(f64::read_le(c)),
                })
                .collect();
            if let Some(p) = name.strip_prefix(MOMENT_M) {
                m.insert(p.to_string(), data);
            } else if let Some(p) = name.strip_prefix(MOMENT_V) {
                v.insert(p.to_string(), data);
            } else {
                params.insert(name.clone(), Tensor::new(shape, data)?);
                params.set_trainable(&name, flags & FLAG_TRAINABLE != 0)?;
            }
        }
        if r.at != body.len() {
            return Err(bad("trailing bytes after tensor table"));
        }
        let mut moments = BTreeMap::new();
        for (name, m) in m {
            let v = v.remove(&name).ok_or_else(|| bad(&format!("missing second moment for `{name}`")))?;
            moments.insert(name, Moments { m, v });
        }
        if let Some(name) = v.keys().next() {
            return Err(bad(&format!("missing first moment for `{name}`")));
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        let model = Model { config: header.model, params };
        check_shapes(&model)?;
        let optimizer = AdamW { config: header.optimizer, step: header.optimizer_step, moments };
        Ok(Checkpoint { model, optimizer, step, stage: header.stage, rng })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

/// Verifies that a model's tensors have the shapes its config implies.
fn check_shapes<T: Real>(model: &Model<T>) -> Result<()> {
    let fresh = Model::<T>::new(model.config.clone(), 0)?;
    let problems = shape_diff(&fresh.params, &model.params, |_| false);
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Incompatible(problems))
    }
}

fn shape_diff<T: Real>(want: &ParamStore<T>, have: &ParamStore<T>, optional: impl Fn(&str) -> bool) -> Vec<String> {
    let mut problems = Vec::new();
    for (name, w) in want.iter() {
        match have.get(name) {
            Ok(h) if h.shape() != w.shape() => {
                problems.push(format!("{name}: expected shape {:?}, found {:?}", w.shape(), h.shape()))
            }
            Ok(_) => {}
            Err(_) if optional(name) => {}
            Err(_) => problems.push(format!("{name}: missing")),
        }
    }
    for name in have.names() {
        if !want.contains(name) && !optional(name) {
            problems.push(format!("{name}: unexpected"));
        }
    }
    problems
}

/// Builds a model for `target` from `source` weights. Past-branch
/// parameters missing from the source are freshly initialized from `seed`,
/// and surplus ones are dropped. Any other difference is an error that lists
/// every offending tensor.
pub fn transfer<T: Real>(source: &Model<T>, target: &ModelConfig, seed: u64) -> Result<Model<T>> {
    let mut fresh = Model::<T>::new(target.clone(), seed)?;
    let past = Model::<T>::past_branch_params();
    let problems = shape_diff(&fresh.params, &source.params, |n| past.contains(&n));
    if !problems.is_empty() {
        return Err(Error::Incompatible(problems));
    }
    let names: Vec<String> = fresh.params.names().map(str::to_string).collect();
    for name in names {
        if let Ok(t) = source.params.get(&name) {
            let mut t = Tensor::clone(t);
            t.set_requires_grad(true);
            fresh.params.insert(name, t);
        }
    }
    Ok(fresh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{InputMode, ModelConfig};
    use crate::fusion;

    fn ckpt() -> Checkpoint<f32> {
        let model = Model::<f32>::new(ModelConfig::tiny(32), 3).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        for (name, t) in model.params.iter().take(3) {
            opt.moments.insert(
                name.to_string(),
                Moments { m: vec![0.5; t.numel()], v: vec![0.25; t.numel()] },
            );
        }
        opt.step = 7;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.set_word_pos(123);
        Checkpoint::new(model, opt, 42, 3, rng)
    }

    #[test]
    fn roundtrip_is_exact() {
        let mut c = ckpt();
        c.model.params.set_trainable(fusion::TIME_CUR, false).unwrap();
        let bytes = c.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.step, 42);
        assert_eq!(back.optimizer.step, 7);
        assert_eq!(back.optimizer.moments, c.optimizer.moments);
        assert_eq!(back.rng, c.rng);
        assert!(!back.model.params.is_trainable(fusion::TIME_CUR).unwrap());
        for (name, t) in c.model.params.iter() {
            assert_eq!(back.model.params.get(name).unwrap().data(), t.data(), "{name}");
        }
    }

    #[test]
    fn corruption_and_version_are_detected() {
        let bytes = ckpt().to_bytes();
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        assert!(matches!(Checkpoint::<f32>::from_bytes(&flipped), Err(Error::Checkpoint(_))));
        let mut versioned = bytes.clone();
        versioned[8] = 9;
        let err = Checkpoint::<f32>::from_bytes(&versioned).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 40]).is_err());
        assert!(Checkpoint::<f32>::from_bytes(b"nope").is_err());
    }

    #[test]
    fn loads_across_precision() {
        let c = ckpt();
        let wide = Checkpoint::<f64>::from_bytes(&c.to_bytes()).unwrap();
        let name = "decoder.out.w";
        let a = c.model.params.get(name).unwrap().data()[0];
        assert_eq!(wide.model.params.get(name).unwrap().data()[0], a as f64);
    }

    #[test]
    fn single_to_dual_transfer_adds_fresh_past_branch() {
        let single = Model::<f32>::new(ModelConfig::tiny(32).with_mode(InputMode::Single), 1).unwrap();
        let dual_cfg = single.config.clone().with_mode(InputMode::Dual);
        let dual = transfer(&single, &dual_cfg, 9).unwrap();
        let past = Model::<f32>::past_branch_params();
        for (name, t) in dual.params.iter() {
            if past.contains(&name) {
                assert!(!single.params.contains(name));
            } else {
                assert_eq!(single.params.get(name).unwrap().data(), t.data(), "{name}");
            }
        }
        assert_eq!(dual.params.len(), single.params.len() + past.len());
    }

    #[test]
    fn wrong_width_names_offenders() {
        let source = Model::<f32>::new(ModelConfig::tiny(32), 1).unwrap();
        let mut cfg = ModelConfig::tiny(32);
        cfg.d_model = 24;
        let err = transfer(&source, &cfg, 0).unwrap_err();
        let Error::Incompatible(list) = err else { panic!("wrong error") };
        assert!(list.iter().any(|s| s.starts_with("decoder.out.w")));
        assert!(list.iter().any(|s| s.starts_with(fusion::PROJ_W)));
    }
}
