//! Training checkpoint container.
//!
//! Layout, all little-endian: magic `MRCK`, format version (u32), step (u64),
//! running loss (f64 bit pattern), config text block (u64 byte length +
//! UTF-8), parameter count (u64), then per parameter: name (u64 byte length +
//! UTF-8), value tensor, first-moment tensor, second-moment tensor, each as a
//! `MRTN` block. Save/load roundtrips bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::ParamSet;
use crate::tensorfile;
use crate::train::OptimState;

pub const MAGIC: [u8; 4] = *b"MRCK";
pub const VERSION: u32 = 1;
const MAX_NAME_LEN: u64 = 4096;
const MAX_CONFIG_LEN: u64 = 1 << 20;

/// Full training state: everything needed to resume a run or reconstruct
/// with the saved weights.
pub struct Checkpoint {
    pub config_text: String,
    pub step: u64,
    pub running_loss: f64,
    pub params: ParamSet,
    pub optim: OptimState,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if self.optim.m.len() != self.params.len() || self.optim.v.len() != self.params.len() {
            return Err(Error::shape("optimizer state does not match parameter set"));
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn write(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&self.running_loss.to_bits().to_le_bytes())?;
        let cfg = self.config_text.as_bytes();
        w.write_all(&(cfg.len() as u64).to_le_bytes())?;
        w.write_all(cfg)?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for i in 0..self.params.len() {
            let name = self.params.names()[i].as_bytes();
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name)?;
            tensorfile::write_tensor(w, &self.params.tensors()[i])?;
            tensorfile::write_tensor(w, &self.optim.m[i])?;
            tensorfile::write_tensor(w, &self.optim.v[i])?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let ckpt = Self::read(&mut r, path)?;
        let mut probe = [0u8; 1];
        match r.read(&mut probe) {
            Ok(0) => Ok(ckpt),
            Ok(_) => Err(Error::format(path, 0, "trailing bytes after last tensor")),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    fn read(r: &mut impl Read, path: &Path) -> Result<Checkpoint> {

        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, path, "magic")?;
        if magic != MAGIC {
            return Err(Error::format(path, 0, "bad magic (expected MRCK)"));
        }
        let version = read_u32(r, path, "version")?;
        if version != VERSION {
            return Err(Error::format(path, 4, format!("unsupported version {version}")));
        }
        let step = read_u64(r, path, "step")?;
        let running_loss = f64::from_bits(read_u64(r, path, "running loss")?);
        let config_text = read_string(r, path, "config block", MAX_CONFIG_LEN)?;
        let n_params = read_u64(r, path, "parameter count")?;
        if n_params > 1 << 20 {
            return Err(Error::format(path, 0, format!("implausible parameter count {n_params}")));
        }
        let mut params = ParamSet::new();
        let mut optim = OptimState { m: Vec::new(), v: Vec::new(), step };
        for _ in 0..n_params {
            let name = read_string(r, path, "parameter name", MAX_NAME_LEN)?;
            if params.index_of(&name).is_some() {
                return Err(Error::format(path, 0, format!("duplicate parameter {name}")));
            }
            let value = tensorfile::read_tensor(r, path)?;
            let m = tensorfile::read_tensor(r, path)?;
            let v = tensorfile::read_tensor(r, path)?;
            if m.shape() != value.shape() || v.shape() != value.shape() {
                return Err(Error::format(
                    path,
                    0,
                    format!("moment shapes disagree with parameter {name}"),
                ));
            }
            params.push(name, value);
            optim.m.push(m);
            optim.v.push(v);
        }
        Ok(Checkpoint { config_text, step, running_loss, params, optim })
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(path, 0, format!("truncated while reading {what}")))
}

fn read_u32(r: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, path: &Path, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, path, what)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_string(r: &mut impl Read, path: &Path, what: &str, max_len: u64) -> Result<String> {
    let len = read_u64(r, path, what)?;
    if len > max_len {
        return Err(Error::format(path, 0, format!("{what} length {len} exceeds {max_len}")));
    }
    let mut buf = vec![0u8; len as usize];
    read_exact(r, &mut buf, path, what)?;
    String::from_utf8(buf).map_err(|_| Error::format(path, 0, format!("{what} is not UTF-8")))
}
