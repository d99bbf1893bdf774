//! Binary checkpoints.
//!
//! Layout: an 8-byte magic, a format version, the sha256 digest of the
//! canonical config text, three progress counters, then a named-tensor
//! table followed by the little-endian payload. Optimizer state rides
//! along as `opt.`-prefixed tensors, so a checkpoint fully resumes
//! training, while evaluation rebuilds the model from the parameter shapes
//! alone and never needs the config file.
//!
//! Saving is a pure function of the in-memory checkpoint: tensors are laid
//! out in table order, offsets are derived, and a save -> load -> save
//! cycle reproduces the file byte for byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Real};
use crate::tensor::Tensor;
use crate::ParamSet;

const MAGIC: &[u8; 8] = b"AGESPLIT";
const VERSION: u32 = 1;
/// Optimizer-state tensors are prefixed so model reconstruction can skip
/// them.
pub const OPT_PREFIX: &str = "opt.";

#[derive(Debug, Clone)]
pub struct Checkpoint<F: Real> {
    pub config_digest: [u8; 32],
    pub epoch: u64,
    pub step: u64,
    pub adam_t: u64,
    /// Model parameters plus optimizer state, in a fixed order.
    pub tensors: ParamSet<F>,
}

impl<F: Real> Checkpoint<F> {
    /// The model parameters only (everything not under [`OPT_PREFIX`]).
    pub fn model_params(&self) -> ParamSet<F> {
        self.tensors
            .iter()
            .filter(|(name, _)| !name.starts_with(OPT_PREFIX))
            .map(|(name, t)| (name.clone(), t.clone()))
            .collect()
    }
}

pub fn save<F: Real>(path: &Path, ckpt: &Checkpoint<F>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&ckpt.config_digest)?;
    w.write_all(&ckpt.epoch.to_le_bytes())?;
    w.write_all(&ckpt.step.to_le_bytes())?;
    w.write_all(&ckpt.adam_t.to_le_bytes())?;
    w.write_all(&(ckpt.tensors.len() as u32).to_le_bytes())?;
    let mut offset = 0u64;
    for (name, t) in &ckpt.tensors {
        let bytes = (t.numel() * F::DTYPE.byte_width()) as u64;
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[F::DTYPE.code()])?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&offset.to_le_bytes())?;
        w.write_all(&bytes.to_le_bytes())?;
        offset += bytes;
    }
    for t in ckpt.tensors.values() {
        for &v in t.data() {
            v.write_le(&mut w)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// The dtype stored in a checkpoint, read from the table without loading
/// the payload. Callers use it to pick the right precision before
/// [`load`].
pub fn peek_dtype(path: &Path) -> Result<Dtype> {
    let mut r = BufReader::new(
        File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?,
    );
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format version {version}",
            path.display()
        )));
    }
    let mut skip = [0u8; 32 + 24];
    r.read_exact(&mut skip)?;
    let count = read_u32(&mut r)?;
    if count == 0 {
        return Err(Error::Checkpoint(format!(
            "{}: checkpoint holds no tensors",
            path.display()
        )));
    }
    let name_len = read_u32(&mut r)? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let mut code = [0u8; 1];
    r.read_exact(&mut code)?;
    Dtype::from_code(code[0])
        .ok_or_else(|| Error::Checkpoint(format!("{}: unknown dtype code", path.display())))
}

pub fn load<F: Real>(path: &Path) -> Result<Checkpoint<F>> {
    let mut r = BufReader::new(
        File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?,
    );
    let bad = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let mut config_digest = [0u8; 32];
    r.read_exact(&mut config_digest)?;
    let epoch = read_u64(&mut r)?;
    let step = read_u64(&mut r)?;
    let adam_t = read_u64(&mut r)?;
    let count = read_u32(&mut r)? as usize;
    if count > 1 << 16 {
        return Err(bad("implausible tensor count"));
    }

    struct Entry {
        name: String,
        shape: Vec<usize>,
        offset: u64,
        bytes: u64,
    }
    let mut entries = Vec::with_capacity(count);
    let mut expected_offset = 0u64;
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(bad("implausible tensor name length"));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not utf-8"))?;
        let mut code = [0u8; 1];
        r.read_exact(&mut code)?;
        let dtype =
            Dtype::from_code(code[0]).ok_or_else(|| bad("unknown dtype code"))?;
        if dtype != F::DTYPE {
            return Err(bad(&format!(
                "holds {} tensors, expected {}",
                dtype.name(),
                F::DTYPE.name()
            )));
        }
        let rank = read_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(bad("implausible tensor rank"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let offset = read_u64(&mut r)?;
        let bytes = read_u64(&mut r)?;
        let numel: usize = shape.iter().product();
        if offset != expected_offset || bytes != (numel * F::DTYPE.byte_width()) as u64 {
            return Err(bad(&format!("corrupt table entry for `{name}`")));
        }
        expected_offset += bytes;
        entries.push(Entry {
            name,
            shape,
            offset,
            bytes,
        });
    }

    let mut tensors = ParamSet::default();
    for e in &entries {
        let numel = e.bytes as usize / F::DTYPE.byte_width();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(F::read_le(&mut r).map_err(|_| {
                bad(&format!("truncated payload at `{}` (offset {})", e.name, e.offset))
            })?);
        }
        if tensors
            .insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)
            .is_some()
        {
            return Err(bad(&format!("duplicate tensor `{}`", e.name)));
        }
    }
    let mut tail = [0u8; 1];
    if r.read(&mut tail)? != 0 {
        return Err(bad("trailing bytes after payload"));
    }
    Ok(Checkpoint {
        config_digest,
        epoch,
        step,
        adam_t,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use std::fs;
    use tempfile::tempdir;

    fn sample() -> Checkpoint<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(60);
        let mut tensors = ParamSet::default();
        tensors.insert("enc.w1".into(), Tensor::randn(&[3, 4], 1.0, &mut rng));
        tensors.insert("enc.b1".into(), Tensor::zeros(&[4]));
        tensors.insert("opt.sgd.m.enc.w1".into(), Tensor::randn(&[3, 4], 0.1, &mut rng));
        Checkpoint {
            config_digest: [7u8; 32],
            epoch: 3,
            step: 210,
            adam_t: 209,
            tensors,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ck = sample();
        save(&p1, &ck).unwrap();
        let loaded = load::<f64>(&p1).unwrap();
        assert_eq!(loaded.epoch, 3);
        assert_eq!(loaded.step, 210);
        assert_eq!(loaded.adam_t, 209);
        assert_eq!(loaded.config_digest, [7u8; 32]);
        save(&p2, &loaded).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn tensors_round_trip_in_order_with_values() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let ck = sample();
        save(&p, &ck).unwrap();
        let loaded = load::<f64>(&p).unwrap();
        let names: Vec<&String> = loaded.tensors.keys().collect();
        assert_eq!(names, vec!["enc.w1", "enc.b1", "opt.sgd.m.enc.w1"]);
        for (name, t) in &ck.tensors {
            let l = &loaded.tensors[name];
            assert_eq!(l.shape(), t.shape());
            assert_eq!(l.data(), t.data());
        }
        let model = loaded.model_params();
        assert!(model.contains_key("enc.w1"));
        assert!(!model.contains_key("opt.sgd.m.enc.w1"));
    }

    #[test]
    fn dtype_is_peekable_and_enforced() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save(&p, &sample()).unwrap();
        assert_eq!(peek_dtype(&p).unwrap(), Dtype::F64);
        let err = load::<f32>(&p).unwrap_err();
        assert!(format!("{err}").contains("f64"), "{err}");
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save(&p, &sample()).unwrap();
        let bytes = fs::read(&p).unwrap();

        fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(load::<f64>(&p).is_err());

        let mut padded = bytes.clone();
        padded.push(1);
        fs::write(&p, &padded).unwrap();
        assert!(load::<f64>(&p).is_err());

        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        fs::write(&p, &wrong_magic).unwrap();
        assert!(load::<f64>(&p).is_err());
        assert!(peek_dtype(&p).is_err());
    }
}
