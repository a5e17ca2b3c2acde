//! Centered orthonormal 2-D Fourier transforms on power-of-two grids.
//!
//! `fft2c` applies an explicit pre-shift (ifftshift), a radix-2 iterative
//! transform along rows then columns, a `1/sqrt(h*w)` scaling, and a
//! post-shift (fftshift), so the zero-frequency coefficient sits at
//! `(h/2, w/2)`. The same scaling is used in both directions, making the
//! transform unitary and its adjoint equal to its inverse.

use crate::error::{Error, Result};
use crate::image::ComplexImage;

/// Centered orthonormal forward transform. Image dims must be powers of two.
pub fn fft2c(img: &ComplexImage) -> Result<ComplexImage> {
    transform(img, false)
}

/// Centered orthonormal inverse transform. Image dims must be powers of two.
pub fn ifft2c(img: &ComplexImage) -> Result<ComplexImage> {
    transform(img, true)
}

fn transform(img: &ComplexImage, inverse: bool) -> Result<ComplexImage> {
    let (h, w) = (img.h(), img.w());
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(Error::shape(format!(
            "fft2c requires power-of-two dims, got {h}x{w}"
        )));
    }
    let mut re = img.re().data().to_vec();
    let mut im = img.im().data().to_vec();
    fft2c_slices(&mut re, &mut im, h, w, inverse);
    Ok(ComplexImage::new(
        crate::tensor::Tensor::from_vec(&[h, w], re),
        crate::tensor::Tensor::from_vec(&[h, w], im),
    ))
}

/// In-place centered orthonormal transform over `[h,w]` planes.
/// Contract: `h` and `w` are powers of two (validated by callers).
pub(crate) fn fft2c_slices(re: &mut [f64], im: &mut [f64], h: usize, w: usize, inverse: bool) {
    assert!(
        h.is_power_of_two() && w.is_power_of_two(),
        "fft2c_slices: dims must be powers of two"
    );
    // Pre-shift: move the image center to index 0.
    shift2(re, im, h, w, h / 2, w / 2);

    // Rows.
    let tw_w = twiddles(w);
    for y in 0..h {
        fft1d(&mut re[y * w..(y + 1) * w], &mut im[y * w..(y + 1) * w], inverse, &tw_w);
    }
    // Columns, via scratch buffers.
    let tw_h = if h == w { tw_w } else { twiddles(h) };
    let mut cre = vec![0.0; h];
    let mut cim = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            cre[y] = re[y * w + x];
            cim[y] = im[y * w + x];
        }
        fft1d(&mut cre, &mut cim, inverse, &tw_h);
        for y in 0..h {
            re[y * w + x] = cre[y];
            im[y * w + x] = cim[y];
        }
    }

    // Orthonormal scaling, identical in both directions.
    let scale = 1.0 / ((h * w) as f64).sqrt();
    for v in re.iter_mut() {
        *v *= scale;
    }
    for v in im.iter_mut() {
        *v *= scale;
    }

    // Post-shift: move the zero-frequency bin to the grid center. For the
    // even sizes admitted here fftshift and ifftshift coincide.
    shift2(re, im, h, w, h - h / 2, w - w / 2);
}

/// Cyclically rotates both planes so that `out[y][x] = in[(y+sy)%h][(x+sx)%w]`.
fn shift2(re: &mut [f64], im: &mut [f64], h: usize, w: usize, sy: usize, sx: usize) {
    if sy % h == 0 && sx % w == 0 {
        return;
    }
    let mut tre = vec![0.0; h * w];
    let mut tim = vec![0.0; h * w];
    for y in 0..h {
        let src_y = (y + sy) % h;
        for x in 0..w {
            let src_x = (x + sx) % w;
            tre[y * w + x] = re[src_y * w + src_x];
            tim[y * w + x] = im[src_y * w + src_x];
        }
    }
    re.copy_from_slice(&tre);
    im.copy_from_slice(&tim);
}

/// Forward twiddle factors for a length-`n` transform, concatenated stage by
/// stage: for each `len = 2, 4, .., n` the entries `j = 0..len/2` hold
/// `(cos, sin)` of `-2*pi*j/len`.
fn twiddles(n: usize) -> Vec<(f64, f64)> {
    let mut t = Vec::with_capacity(n.saturating_sub(1));
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * std::f64::consts::PI / len as f64;
        for j in 0..len / 2 {
            let a = ang * j as f64;
            t.push((a.cos(), a.sin()));
        }
        len <<= 1;
    }
    t
}

/// Iterative radix-2 transform, unnormalized. `inverse` flips the twiddle
/// sign; scaling is handled by the caller. `tw` must come from `twiddles(n)`.
fn fft1d(re: &mut [f64], im: &mut [f64], inverse: bool, tw: &[(f64, f64)]) {
    let n = re.len();
    if n <= 1 {
        return;
    }
    // Bit-reversal permutation.
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = (i.reverse_bits() >> (usize::BITS - bits)) as usize;
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if inverse { -1.0 } else { 1.0 };
    let mut len = 2;
    let mut base = 0;
    while len <= n {
        for start in (0..n).step_by(len) {
            for j in 0..len / 2 {
                let (wr, wi) = tw[base + j];
                let wi = sign * wi;
                let (ur, ui) = (re[start + j], im[start + j]);
                let (vr, vi) = (
                    re[start + j + len / 2] * wr - im[start + j + len / 2] * wi,
                    re[start + j + len / 2] * wi + im[start + j + len / 2] * wr,
                );
                re[start + j] = ur + vr;
                im[start + j] = ui + vi;
                re[start + j + len / 2] = ur - vr;
                im[start + j + len / 2] = ui - vi;
            }
        }
        base += len / 2;
        len <<= 1;
    }
}
