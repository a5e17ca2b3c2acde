//! Self-describing binary tensor container.
//!
//! Layout, all little-endian: magic `MRTN`, format version (u32), dtype code
//! (u32, 0 = f64), ndim (u32), ndim dimension sizes (u64 each), then the
//! payload of product(dims) f64 values. Save/load roundtrips bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MRTN";
pub const VERSION: u32 = 1;
const DTYPE_F64: u32 = 0;
const MAX_NDIM: u32 = 8;

/// Writes the header and payload of one tensor into any sink.
pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&DTYPE_F64.to_le_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads one tensor from a source, tracking the byte offset for diagnostics.
/// `path` only labels errors.
pub fn read_tensor(r: &mut impl Read, path: &Path) -> Result<Tensor> {
    let mut offset: u64 = 0;
    let mut take = |buf: &mut [u8], what: &str| -> Result<()> {
        r.read_exact(buf).map_err(|_| {
            Error::format(path, offset, format!("truncated while reading {what}"))
        })?;
        offset += buf.len() as u64;
        Ok(())
    };

    let mut magic = [0u8; 4];
    take(&mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(path, 0, "bad magic (expected MRTN)"));
    }
    let mut u32buf = [0u8; 4];
    take(&mut u32buf, "version")?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::format(path, 4, format!("unsupported version {version}")));
    }
    take(&mut u32buf, "dtype")?;
    let dtype = u32::from_le_bytes(u32buf);
    if dtype != DTYPE_F64 {
        return Err(Error::format(path, 8, format!("unsupported dtype code {dtype}")));
    }
    take(&mut u32buf, "ndim")?;
    let ndim = u32::from_le_bytes(u32buf);
    if ndim > MAX_NDIM {
        return Err(Error::format(path, 12, format!("ndim {ndim} exceeds limit {MAX_NDIM}")));
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    let mut u64buf = [0u8; 8];
    for i in 0..ndim {
        take(&mut u64buf, "dims")?;
        let d = u64::from_le_bytes(u64buf);
        if d == 0 || d > (1 << 32) {
            return Err(Error::format(
                path,
                16 + 8 * i as u64,
                format!("implausible dimension {d}"),
            ));
        }
        dims.push(d as usize);
    }
    let numel: usize = dims.iter().product();
    if numel > (1 << 31) {
        return Err(Error::format(path, 16, "payload too large"));
    }
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        take(&mut u64buf, "payload")?;
        data.push(f64::from_le_bytes(u64buf));
    }
    Ok(Tensor::from_vec(&dims, data))
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensor(&mut w, t).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let t = read_tensor(&mut r, path)?;
    // Trailing bytes mean the file is not what the header claims.
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => Ok(t),
        Ok(_) => Err(Error::format(path, 0, "trailing bytes after payload")),
        Err(e) => Err(Error::io(path, e)),
    }
}
