//! Versioned binary checkpoints: parameters, config, iteration counter and
//! optimizer moments. Little-endian throughout; round-trips are bit-exact.
//!
//! Layout (version 1):
//!   magic "LALB" | version u16 | config_len u32 | config JSON |
//!   n_params u32 | per param: name_len u32, name, ndim u32, dims u64…,
//!   values f64… | iteration u64 | adam step u64 | per param: m f64…, v f64…

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lm::AdamState;
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LALB";
pub const VERSION: u16 = 1;

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &Model,
    opt: &AdamState,
    iteration: u64,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());

    let config = serde_json::to_vec(&model.cfg)
        .map_err(|e| Error::Input(format!("config serialization failed: {e}")))?;
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);

    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, param) in model.params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let shape = param.value.shape();
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &dim in shape {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for v in param.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    buf.extend_from_slice(&iteration.to_le_bytes());
    buf.extend_from_slice(&opt.step.to_le_bytes());
    for (name, param) in model.params.iter() {
        let numel = param.value.numel();
        for moments in [&opt.m, &opt.v] {
            match moments.get(name) {
                Some(m) => {
                    for v in m {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
                None => buf.extend(std::iter::repeat(0u8).take(8 * numel)),
            }
        }
    }

    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + len > self.buf.len() {
            return Err(Error::Format {
                offset: self.offset as u64,
                msg: format!(
                    "unexpected end of file while reading {what} ({len} bytes needed, {} left)",
                    self.buf.len() - self.offset
                ),
            });
        }
        let out = &self.buf[self.offset..self.offset + len];
        self.offset += len;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(8 * count, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.offset as u64,
            msg: msg.into(),
        }
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, AdamState, u64)> {
    let buf = fs::read(path)?;
    let mut r = Reader {
        buf: &buf,
        offset: 0,
    };

    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}, expected {VERSION}")));
    }

    let config_len = r.u32("config length")? as usize;
    let config_bytes = r.take(config_len, "config")?;
    let cfg: ModelConfig = serde_json::from_slice(config_bytes)
        .map_err(|e| r.err(format!("config decode failed: {e}")))?;
    cfg.validate()?;

    let n_params = r.u32("parameter count")? as usize;
    let mut params = ParamStore::new();
    let mut order: Vec<(String, usize)> = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| r.err("parameter name is not utf-8"))?
            .to_string();
        let ndim = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.f64_vec(numel, &format!("values of `{name}`"))?;
        order.push((name.clone(), numel));
        params.insert(name, Tensor::new(shape, data)?)?;
    }

    // integrity: the stored tensors must be exactly the config's parameters
    let expect: BTreeMap<String, Vec<usize>> = cfg.param_specs().into_iter().collect();
    let got: BTreeMap<String, Vec<usize>> = params
        .iter()
        .map(|(n, p)| (n.to_string(), p.value.shape().to_vec()))
        .collect();
    if expect != got {
        return Err(r.err("stored tensors do not match the configuration's parameter set"));
    }

    let iteration = r.u64("iteration")?;
    let step = r.u64("optimizer step")?;
    let mut opt = AdamState::new();
    opt.step = step;
    for (name, numel) in &order {
        let m = r.f64_vec(*numel, &format!("first moment of `{name}`"))?;
        let v = r.f64_vec(*numel, &format!("second moment of `{name}`"))?;
        opt.m.insert(name.clone(), m);
        opt.v.insert(name.clone(), v);
    }

    if r.offset != buf.len() {
        return Err(r.err(format!("{} trailing bytes", buf.len() - r.offset)));
    }

    Ok((Model { cfg, params }, opt, iteration))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::PeKind;
    use crate::lm::{train, Schedule, TrainConfig};
    use crate::model::{build_model, forward, Variant};

    fn cfg() -> ModelConfig {
        ModelConfig {
            variant: Variant::Llp,
            seq_len: 16,
            latent_len: 8,
            segment_size: 8,
            projection_len: 4,
            d_model: 16,
            num_heads: 2,
            num_layers: 2,
            vocab_size: 256,
            ffn_multiplier: 2,
            pe_kind: PeKind::LearnedAbsolute,
            share_llp_block_weights: true,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_model(&cfg(), 1).unwrap();
        let opt = AdamState::new();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        save_checkpoint(&p1, &model, &opt, 0).unwrap();
        let (loaded, opt2, it) = load_checkpoint(&p1).unwrap();
        assert_eq!(it, 0);
        save_checkpoint(&p2, &loaded, &opt2, it).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn load_then_forward_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = build_model(&cfg(), 2).unwrap();
        let corpus = crate::lm::synthetic_text(2048, 0);
        let tc = TrainConfig {
            batch_size: 4,
            total_iterations: 10,
            base_lr: 1e-3,
            warmup_iterations: 2,
            schedule: Schedule::Cosine,
            seed: 3,
            eval_interval: 5,
            checkpoint_path: Some(dir.path().join("ck.bin")),
        };
        train(&mut model, &corpus, &tc).unwrap();
        let (loaded, _, it) = load_checkpoint(tc.checkpoint_path.as_ref().unwrap()).unwrap();
        assert_eq!(it, 10);
        let tokens: Vec<u32> = (0..16).collect();
        let a = forward(&model, &tokens).unwrap();
        let b = forward(&loaded, &tokens).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn wrong_magic_and_truncation_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_model(&cfg(), 4).unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&path, &model, &AdamState::new(), 5).unwrap();

        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = dir.path().join("bad.bin");
        fs::write(&bad, &bytes).unwrap();
        let err = load_checkpoint(&bad).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");

        let truncated = dir.path().join("trunc.bin");
        let good = fs::read(&path).unwrap();
        fs::write(&truncated, &good[..good.len() / 2]).unwrap();
        let err = load_checkpoint(&truncated).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        assert!(err.to_string().contains("byte"), "{err}");

        let padded = dir.path().join("pad.bin");
        let mut long = good.clone();
        long.extend_from_slice(&[0, 1, 2]);
        fs::write(&padded, &long).unwrap();
        let err = load_checkpoint(&padded).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }

    #[test]
    fn resume_matches_uninterrupted_run_bit_exactly() {
        let corpus = crate::lm::synthetic_text(2048, 5);
        let tc_full = TrainConfig {
            batch_size: 4,
            total_iterations: 6,
            base_lr: 1e-3,
            warmup_iterations: 2,
            schedule: Schedule::Cosine,
            seed: 11,
            eval_interval: 2,
            checkpoint_path: None,
        };

        // uninterrupted
        let mut a = build_model(&cfg(), 6).unwrap();
        train(&mut a, &corpus, &tc_full).unwrap();

        // stop after 4 of the same 6-iteration schedule, save, reload,
        // resume for the final 2
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.bin");
        let mut b = build_model(&cfg(), 6).unwrap();
        let mut opt = AdamState::new();
        crate::lm::train_range(&mut b, &mut opt, 0, 4, &corpus, &tc_full).unwrap();
        save_checkpoint(&path, &b, &opt, 4).unwrap();
        let (mut resumed, mut opt2, it) = load_checkpoint(&path).unwrap();
        crate::lm::train_resume(&mut resumed, &mut opt2, it as usize, &corpus, &tc_full).unwrap();

        for ((na, pa), (_, pb)) in a.params.iter().zip(resumed.params.iter()) {
            let bits_a: Vec<u64> = pa.value.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = pb.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "parameter {na} diverged after resume");
        }
    }
}
