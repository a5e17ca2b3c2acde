//! Accelerated multi-coil acquisition model.
//!
//! A fully sampled complex image is multiplied by each coil's sensitivity
//! map, transformed to k-space, and undersampled by a variable-density
//! binary mask. The adjoint (zero-filled) reconstruction applies the inverse
//! transform per coil and combines with conjugate sensitivities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fourier::{fft2c, ifft2c};
use crate::image::ComplexImage;
use crate::tensor::Tensor;

/// Documented ceiling for the per-pixel gradient magnitude of generated
/// coil maps; the smoothness test pins generated maps under this bound.
pub const COIL_MAP_MAX_GRADIENT: f64 = 0.25;

/// Binary undersampling pattern with its acceleration and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    grid: Tensor,
    r: u32,
    calib: usize,
    seed: u64,
}

impl Mask {
    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    pub fn r(&self) -> u32 {
        self.r
    }

    pub fn calib(&self) -> usize {
        self.calib
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn h(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn count_ones(&self) -> usize {
        self.grid.data().iter().filter(|&&v| v == 1.0).count()
    }

    /// `1 - mask` grid.
    pub fn complement(&self) -> Tensor {
        self.grid.map(|v| 1.0 - v)
    }

    /// Fully sampled pattern (every sample acquired).
    pub fn full(h: usize, w: usize) -> Mask {
        Mask {
            grid: Tensor::ones(&[h, w]),
            r: 1,
            calib: 0,
            seed: 0,
        }
    }

    /// Empty pattern (no samples), used by the receptive-field protocol.
    pub fn empty(h: usize, w: usize) -> Mask {
        Mask {
            grid: Tensor::zeros(&[h, w]),
            r: 0,
            calib: 0,
            seed: 0,
        }
    }

    pub fn from_grid(grid: Tensor, r: u32, calib: usize, seed: u64) -> Mask {
        assert_eq!(grid.shape().len(), 2, "mask grid must be rank 2");
        assert!(
            grid.data().iter().all(|&v| v == 0.0 || v == 1.0),
            "mask grid must be binary"
        );
        Mask {
            grid,
            r,
            calib,
            seed,
        }
    }
}

/// Default Gaussian width fraction for an acceleration factor.
pub fn default_sigma_frac(r: u32) -> f64 {
    match r {
        4 => 0.15,
        8 => 0.10,
        _ => 0.15 * (4.0 / r as f64).sqrt(),
    }
}

/// Draws a variable-density 2-D Gaussian undersampling mask.
///
/// Exactly `floor(h*w / r)` entries are set, a centered `calib x calib`
/// block is always fully sampled, and the remaining locations are drawn
/// without replacement with probability proportional to
/// `exp(-(dx^2+dy^2) / (2 sigma^2))` around the grid center.
pub fn generate_gaussian_mask(
    h: usize,
    w: usize,
    r: u32,
    calib: usize,
    sigma_frac: Option<f64>,
    seed: u64,
) -> Result<Mask> {
    if r == 0 {
        return Err(Error::config("acceleration must be >= 1"));
    }
    if calib > h.min(w) {
        return Err(Error::config(format!(
            "calibration block {calib} exceeds grid {h}x{w}"
        )));
    }
    let target = (h * w) / (r as usize);
    if calib * calib > target {
        return Err(Error::config(format!(
            "calibration block {calib}x{calib} exceeds sample budget {target} at r={r}"
        )));
    }
    let sigma = sigma_frac.unwrap_or_else(|| default_sigma_frac(r)) * h.min(w) as f64;
    if sigma <= 0.0 {
        return Err(Error::config("mask sigma must be positive"));
    }

    let (cy, cx) = (h / 2, w / 2);
    let cal_y0 = cy - calib / 2;
    let cal_x0 = cx - calib / 2;
    let in_calib = |y: usize, x: usize| {
        calib > 0 && y >= cal_y0 && y < cal_y0 + calib && x >= cal_x0 && x < cal_x0 + calib
    };

    let mut grid = vec![0.0; h * w];
    for y in cal_y0..cal_y0 + calib {
        for x in cal_x0..cal_x0 + calib {
            grid[y * w + x] = 1.0;
        }
    }

    // Weighted draw without replacement: each candidate gets the key
    // ln(u)/weight and the largest keys win; one uniform per cell in fixed
    // row-major order keeps the draw a pure function of the seed.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(h * w - calib * calib);
    for y in 0..h {
        for x in 0..w {
            let u: f64 = 1.0 - rng.gen::<f64>();
            if in_calib(y, x) {
                continue;
            }
            let dy = y as f64 - cy as f64;
            let dx = x as f64 - cx as f64;
            let weight = (-(dx * dx + dy * dy) * inv_two_sigma_sq).exp().max(1e-290);
            keyed.push((u.ln() / weight, y * w + x));
        }
    }
    keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let remaining = target - calib * calib;
    for &(_, idx) in keyed.iter().take(remaining) {
        grid[idx] = 1.0;
    }

    Ok(Mask {
        grid: Tensor::from_vec(&[h, w], grid),
        r,
        calib,
        seed,
    })
}

/// Receive-coil sensitivity maps, normalized so the pixelwise sum of
/// squared magnitudes is one.
#[derive(Clone, Debug, PartialEq)]
pub struct CoilMaps {
    maps: Vec<ComplexImage>,
}

impl CoilMaps {
    pub fn new(maps: Vec<ComplexImage>) -> Self {
        assert!(!maps.is_empty(), "at least one coil required");
        CoilMaps { maps }
    }

    pub fn ncoils(&self) -> usize {
        self.maps.len()
    }

    pub fn map(&self, c: usize) -> &ComplexImage {
        &self.maps[c]
    }

    pub fn maps(&self) -> &[ComplexImage] {
        &self.maps
    }

    pub fn h(&self) -> usize {
        self.maps[0].h()
    }

    pub fn w(&self) -> usize {
        self.maps[0].w()
    }
}

/// Generates smooth Gaussian-profile sensitivity maps.
///
/// A single coil yields the constant unit map (uniform receive field), so
/// single-coil acquisitions reduce to plain Fourier undersampling. Multiple
/// coils sit on a ring around the image with gentle linear phase ramps, then
/// everything is normalized pixelwise.
pub fn generate_coil_maps(h: usize, w: usize, ncoils: usize, seed: u64) -> Result<CoilMaps> {
    if ncoils == 0 {
        return Err(Error::config("ncoils must be >= 1"));
    }
    if ncoils == 1 {
        return Ok(CoilMaps::new(vec![ComplexImage::new(
            Tensor::ones(&[h, w]),
            Tensor::zeros(&[h, w]),
        )]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
    let ring = 0.55 * h.min(w) as f64;
    let width = 0.50 * h.min(w) as f64;
    let mut maps = Vec::with_capacity(ncoils);
    for c in 0..ncoils {
        let ang = 2.0 * std::f64::consts::PI * (c as f64 / ncoils as f64)
            + rng.gen_range(-0.15..0.15);
        let (oy, ox) = (cy + ring * ang.sin(), cx + ring * ang.cos());
        let phase0: f64 = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let ky: f64 = rng.gen_range(-0.5..0.5) * std::f64::consts::PI;
        let kx: f64 = rng.gen_range(-0.5..0.5) * std::f64::consts::PI;
        let mut re = vec![0.0; h * w];
        let mut im = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 - oy;
                let dx = x as f64 - ox;
                let mag = (-(dx * dx + dy * dy) / (2.0 * width * width)).exp();
                let phase = phase0 + ky * (y as f64 - cy) / h as f64 + kx * (x as f64 - cx) / w as f64;
                re[y * w + x] = mag * phase.cos();
                im[y * w + x] = mag * phase.sin();
            }
        }
        maps.push(ComplexImage::new(
            Tensor::from_vec(&[h, w], re),
            Tensor::from_vec(&[h, w], im),
        ));
    }
    // Pixelwise normalization to unit sum of squared magnitudes.
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            let s: f64 = maps
                .iter()
                .map(|m| m.re().data()[idx] * m.re().data()[idx] + m.im().data()[idx] * m.im().data()[idx])
                .sum::<f64>()
                .sqrt();
            for m in maps.iter_mut() {
                m.re_mut().data_mut()[idx] /= s;
                m.im_mut().data_mut()[idx] /= s;
            }
        }
    }
    Ok(CoilMaps::new(maps))
}

/// Undersampled multi-coil k-space, stored on full grids with zeros at
/// unsampled locations.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpace {
    coils: Vec<ComplexImage>,
}

impl KSpace {
    pub fn new(coils: Vec<ComplexImage>) -> Self {
        assert!(!coils.is_empty(), "at least one coil required");
        KSpace { coils }
    }

    pub fn ncoils(&self) -> usize {
        self.coils.len()
    }

    pub fn coil(&self, c: usize) -> &ComplexImage {
        &self.coils[c]
    }

    pub fn coils(&self) -> &[ComplexImage] {
        &self.coils
    }
}

/// Applies the acquisition operator: per coil, sensitivity-weighted image to
/// masked k-space.
pub fn encode(x: &ComplexImage, coils: &CoilMaps, mask: &Mask) -> Result<KSpace> {
    if coils.h() != x.h() || coils.w() != x.w() {
        return Err(Error::shape("encode: coil map dims differ from image"));
    }
    if mask.h() != x.h() || mask.w() != x.w() {
        return Err(Error::shape("encode: mask dims differ from image"));
    }
    let mut out = Vec::with_capacity(coils.ncoils());
    for c in 0..coils.ncoils() {
        let weighted = coils.map(c).cmul(x);
        let k = fft2c(&weighted)?;
        out.push(k.mul_real(mask.grid()));
    }
    Ok(KSpace::new(out))
}

/// Adjoint of [`encode`]: inverse transform per coil, conjugate-sensitivity
/// combine. This is the zero-filled reconstruction of undersampled data.
pub fn zero_filled(y: &KSpace, coils: &CoilMaps) -> Result<ComplexImage> {
    if y.ncoils() != coils.ncoils() {
        return Err(Error::shape("zero_filled: coil counts differ"));
    }
    let mut acc = ComplexImage::zeros(coils.h(), coils.w());
    for c in 0..coils.ncoils() {
        let img = ifft2c(y.coil(c))?;
        acc = acc.add(&coils.map(c).conj().cmul(&img));
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> ComplexImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let re: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let im: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ComplexImage::new(Tensor::from_vec(&[h, w], re), Tensor::from_vec(&[h, w], im))
    }

    #[test]
    fn test_mask_exact_count_r4() {
        let m = generate_gaussian_mask(64, 64, 4, 8, None, 7).unwrap();
        assert_eq!(m.count_ones(), 1024);
    }

    #[test]
    fn test_mask_exact_count_r8() {
        let m = generate_gaussian_mask(64, 64, 8, 8, None, 7).unwrap();
        assert_eq!(m.count_ones(), 512);
    }

    #[test]
    fn test_mask_calibration_block_fully_sampled() {
        let m = generate_gaussian_mask(64, 64, 4, 8, None, 3).unwrap();
        for y in 28..36 {
            for x in 28..36 {
                assert_eq!(m.grid().data()[y * 64 + x], 1.0, "calib hole at {y},{x}");
            }
        }
    }

    #[test]
    fn test_mask_deterministic_in_seed() {
        let a = generate_gaussian_mask(64, 64, 4, 8, None, 11).unwrap();
        let b = generate_gaussian_mask(64, 64, 4, 8, None, 11).unwrap();
        let c = generate_gaussian_mask(64, 64, 4, 8, None, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.grid().data(), c.grid().data());
    }

    #[test]
    fn test_mask_rejects_infeasible_budget() {
        // floor(64/4) = 16 samples cannot contain an 8x8 calibration block.
        assert!(generate_gaussian_mask(8, 8, 4, 8, None, 0).is_err());
    }

    #[test]
    fn test_mask_density_decreases_radially() {
        // Mean sampling rate in the inner quarter radius must exceed the
        // outer quarter, averaged over 100 seeds.
        let (h, w) = (64, 64);
        let r_max = (h.min(w) / 2) as f64;
        let mut inner_hits = 0usize;
        let mut inner_cells = 0usize;
        let mut outer_hits = 0usize;
        let mut outer_cells = 0usize;
        for seed in 0..100u64 {
            let m = generate_gaussian_mask(h, w, 4, 8, None, seed).unwrap();
            for y in 0..h {
                for x in 0..w {
                    let dy = y as f64 - (h / 2) as f64;
                    let dx = x as f64 - (w / 2) as f64;
                    let rad = (dy * dy + dx * dx).sqrt();
                    if rad < 0.25 * r_max {
                        inner_cells += 1;
                        inner_hits += (m.grid().data()[y * w + x] == 1.0) as usize;
                    } else if rad > 0.75 * r_max {
                        outer_cells += 1;
                        outer_hits += (m.grid().data()[y * w + x] == 1.0) as usize;
                    }
                }
            }
        }
        let inner_rate = inner_hits as f64 / inner_cells as f64;
        let outer_rate = outer_hits as f64 / outer_cells as f64;
        assert!(
            inner_rate > outer_rate,
            "inner {inner_rate} must exceed outer {outer_rate}"
        );
    }

    #[test]
    fn test_single_coil_is_unit_map() {
        let maps = generate_coil_maps(16, 16, 1, 5).unwrap();
        assert_eq!(maps.map(0).re().data(), Tensor::ones(&[16, 16]).data());
        assert_eq!(maps.map(0).im().data(), Tensor::zeros(&[16, 16]).data());
    }

    #[test]
    fn test_coil_maps_normalized() {
        for ncoils in [2usize, 4, 5] {
            let maps = generate_coil_maps(32, 32, ncoils, 9).unwrap();
            for idx in 0..32 * 32 {
                let s: f64 = (0..ncoils)
                    .map(|c| {
                        let m = maps.map(c);
                        m.re().data()[idx] * m.re().data()[idx]
                            + m.im().data()[idx] * m.im().data()[idx]
                    })
                    .sum();
                assert!((s - 1.0).abs() < 1e-12, "ncoils={ncoils} idx={idx}: {s}");
            }
        }
    }

    #[test]
    fn test_coil_maps_smooth() {
        let (h, w) = (64, 64);
        let maps = generate_coil_maps(h, w, 4, 13).unwrap();
        let mut max_grad: f64 = 0.0;
        for c in 0..4 {
            let m = maps.map(c);
            for y in 0..h {
                for x in 0..w {
                    if x + 1 < w {
                        let dr = m.re().data()[y * w + x + 1] - m.re().data()[y * w + x];
                        let di = m.im().data()[y * w + x + 1] - m.im().data()[y * w + x];
                        max_grad = max_grad.max((dr * dr + di * di).sqrt());
                    }
                    if y + 1 < h {
                        let dr = m.re().data()[(y + 1) * w + x] - m.re().data()[y * w + x];
                        let di = m.im().data()[(y + 1) * w + x] - m.im().data()[y * w + x];
                        max_grad = max_grad.max((dr * dr + di * di).sqrt());
                    }
                }
            }
        }
        assert!(
            max_grad < COIL_MAP_MAX_GRADIENT,
            "max gradient {max_grad} exceeds documented bound"
        );
    }

    #[test]
    fn test_encode_full_mask_single_coil_is_fft() {
        let x = random_image(3, 16, 16);
        let coils = generate_coil_maps(16, 16, 1, 0).unwrap();
        let mask = Mask::full(16, 16);
        let y = encode(&x, &coils, &mask).unwrap();
        let expect = fft2c(&x).unwrap();
        assert!(y.coil(0).sub(&expect).max_abs() < 1e-12);
    }

    #[test]
    fn test_encode_zero_mask_is_zero() {
        let x = random_image(4, 16, 16);
        let coils = generate_coil_maps(16, 16, 3, 1).unwrap();
        let mask = Mask::empty(16, 16);
        let y = encode(&x, &coils, &mask).unwrap();
        for c in 0..3 {
            assert_eq!(y.coil(c).max_abs(), 0.0);
        }
    }

    #[test]
    fn test_zero_filled_is_adjoint_of_encode() {
        let (h, w, nc) = (16usize, 16usize, 3usize);
        let x = random_image(5, h, w);
        let coils = generate_coil_maps(h, w, nc, 2).unwrap();
        let mask = generate_gaussian_mask(h, w, 4, 4, None, 6).unwrap();
        let ex = encode(&x, &coils, &mask).unwrap();
        // Test vectors live in the sampled subspace, as all acquired data does.
        let ys: Vec<ComplexImage> = (0..nc)
            .map(|c| random_image(50 + c as u64, h, w).mul_real(mask.grid()))
            .collect();
        let y = KSpace::new(ys.clone());
        let lhs: f64 = (0..nc).map(|c| ex.coil(c).dot_real(&ys[c])).sum();
        let rhs = x.dot_real(&zero_filled(&y, &coils).unwrap());
        assert!((lhs - rhs).abs() < 1e-10, "adjoint identity: {lhs} vs {rhs}");
    }

    #[test]
    fn test_zero_filled_roundtrip_on_full_mask() {
        for ncoils in [1usize, 4] {
            let x = random_image(8, 16, 16);
            let coils = generate_coil_maps(16, 16, ncoils, 3).unwrap();
            let mask = Mask::full(16, 16);
            let y = encode(&x, &coils, &mask).unwrap();
            let back = zero_filled(&y, &coils).unwrap();
            assert!(back.sub(&x).max_abs() < 1e-10, "ncoils={ncoils}");
        }
    }
}
