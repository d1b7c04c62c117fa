//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `SRCK`, `u32` version, `u32` config length,
//! config text, 32-byte SHA-256 of the config text, `u32` tensor count, then
//! per tensor `u32` name length, name, `u8` dtype tag, `u32` rank, `u64` dims,
//! raw values; then `u32` EMA count and per entry `u32` name length, name,
//! `f64` value, `u8` initialized flag; finally a CRC-32 of everything before it.

use super::{Model, ModelConfig};
use crate::attention::FiringRateEma;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::HashMap;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"SRCK";
pub const FORMAT_VERSION: u32 = 2;
const DTYPE_F64: u8 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    put_str(out, name);
    out.push(DTYPE_F64);
    put_u32(out, shape.len() as u32);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    let text = model.config.to_text();
    put_str(&mut out, &text);
    out.extend_from_slice(&model.config.digest());
    put_u32(&mut out, (model.params.len() + 2 * model.bn.len()) as u32);
    for (_, p) in model.params.iter() {
        put_tensor(&mut out, &p.name, p.value.shape(), p.value.data());
    }
    for (name, st) in model.bn_names.iter().zip(&model.bn) {
        let c = st.channels();
        put_tensor(&mut out, &format!("{name}.running_mean"), &[c], &st.running_mean);
        put_tensor(&mut out, &format!("{name}.running_var"), &[c], &st.running_var);
    }
    put_u32(&mut out, model.ema.len() as u32);
    for (name, e) in model.ema_names.iter().zip(&model.ema) {
        let (v, init) = e.raw();
        put_str(&mut out, name);
        out.extend_from_slice(&v.to_le_bytes());
        out.push(u8::from(init));
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("name is not UTF-8".into()))
    }
}

/// Parses a checkpoint. When `expected` is given, the embedded configuration
/// must equal it.
pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Model> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic bytes)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        let detail = if version < FORMAT_VERSION {
            ": older checkpoints carry no firing-rate EMA table".to_string()
        } else {
            ": written by a newer release".to_string()
        };
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
            detail,
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 8 };
    let text = r.string()?;
    let digest = r.take(32)?;
    let config = ModelConfig::from_text(&text)?;
    if digest != config.digest() {
        return Err(Error::Format("configuration digest mismatch".into()));
    }
    if let Some(want) = expected {
        if *want != config {
            return Err(Error::Config(format!(
                "checkpoint was built for configuration {:?}, not the requested {:?}",
                config.name, want.name
            )));
        }
    }
    let mut model = Model::build(&config, 0)?;
    let mut tensors: HashMap<String, Tensor> = HashMap::new();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        if r.u8()? != DTYPE_F64 {
            return Err(Error::Format(format!("{name}: unsupported dtype")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        tensors.insert(name, Tensor::new(&shape, data)?);
    }
    for p in model.params.iter_mut() {
        let t = tensors
            .remove(&p.name)
            .ok_or_else(|| Error::Format(format!("missing tensor {}", p.name)))?;
        if t.shape() != p.value.shape() {
            return Err(Error::shape("checkpoint", t.shape(), p.value.shape()));
        }
        p.value = t;
    }
    for (name, st) in model.bn_names.iter().zip(model.bn.iter_mut()) {
        for (suffix, dst) in [("running_mean", &mut st.running_mean), ("running_var", &mut st.running_var)] {
            let key = format!("{name}.{suffix}");
            let t = tensors
                .remove(&key)
                .ok_or_else(|| Error::Format(format!("missing tensor {key}")))?;
            if t.len() != dst.len() {
                return Err(Error::shape("checkpoint", t.shape(), &[dst.len()]));
            }
            *dst = t.into_data();
        }
    }
    if let Some(extra) = tensors.keys().min() {
        return Err(Error::Format(format!("unexpected tensor {extra}")));
    }
    let count = r.u32()? as usize;
    if count != model.ema.len() {
        return Err(Error::Format(format!(
            "EMA table has {count} entries, model needs {}",
            model.ema.len()
        )));
    }
    for i in 0..count {
        let name = r.string()?;
        if name != model.ema_names[i] {
            return Err(Error::Format(format!("EMA entry {name} out of order")));
        }
        let v = r.f64()?;
        let init = r.u8()? != 0;
        model.ema[i] = FiringRateEma::from_parts(v, init)?;
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes after EMA table".into()));
    }
    Ok(model)
}

pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Model> {
    from_bytes(&std::fs::read(path)?, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuron::SpikeFn;
    use crate::nn::RunOptions;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trained_nano() -> (Model, Tensor) {
        let mut m = Model::build(&ModelConfig::registry("Nano").unwrap(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[2, 3, 32, 32], 1.0, &mut rng);
        let f = m.forward(&x, RunOptions::train(SpikeFn::default()), None).unwrap();
        m.apply(&f.updates).unwrap();
        (m, x)
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let (m, x) = trained_nano();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nano.ckpt");
        save(&m, &path).unwrap();
        let back = load(&path, Some(&m.config)).unwrap();
        assert_eq!(back.ema, m.ema);
        assert_eq!(back.bn, m.bn);
        let (a, b) = (m.predict(&x).unwrap(), back.predict(&x).unwrap());
        assert_eq!(a.max_abs_diff(&b).unwrap(), 0.0);
        assert_eq!(to_bytes(&back), to_bytes(&m));
    }

    #[test]
    fn corruption_is_checksum_error() {
        let (m, _) = trained_nano();
        let mut bytes = to_bytes(&m);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(from_bytes(&bytes, None), Err(Error::Checksum { .. })));
    }

    #[test]
    fn old_version_rejected_with_message() {
        let (m, _) = trained_nano();
        let mut bytes = to_bytes(&m);
        bytes[4..8].copy_from_slice(&1u32.to_le_bytes());
        let err = from_bytes(&bytes, None).unwrap_err();
        assert!(matches!(err, Error::Version { found: 1, expected: 2, .. }));
        assert!(err.to_string().contains("EMA"));
    }

    #[test]
    fn config_echo_mismatch_rejected() {
        let (m, _) = trained_nano();
        let bytes = to_bytes(&m);
        let mut other = m.config.clone();
        other.num_classes = 7;
        assert!(matches!(from_bytes(&bytes, Some(&other)), Err(Error::Config(_))));
    }

    #[test]
    fn bad_magic() {
        assert!(matches!(from_bytes(b"NOPE00000000", None), Err(Error::Format(_))));
    }
}
