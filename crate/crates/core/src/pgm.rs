//! 8-bit binary PGM (P5) writer for magnitude images and sensitivity maps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Writes `t` (shape `[h, w]`, nonnegative) normalized so its peak maps to
/// 255. Negative values clamp to 0; an all-zero image stays black.
pub fn save_pgm(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let shape = t.shape();
    if shape.len() != 2 {
        return Err(Error::shape(format!("image must be [h,w], got {shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    let peak = t.data().iter().cloned().fold(0.0, f64::max);
    let scale = if peak > 0.0 { 255.0 / peak } else { 0.0 };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write!(out, "P5\n{w} {h}\n255\n").map_err(|e| Error::io(path, e))?;
    let bytes: Vec<u8> = t
        .data()
        .iter()
        .map(|&v| (v.max(0.0) * scale).round().min(255.0) as u8)
        .collect();
    out.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}
