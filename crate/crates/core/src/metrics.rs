//! Reconstruction quality metrics on magnitude images.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Peak signal-to-noise ratio in dB against the reference's own peak.
/// Identical images return `f64::INFINITY`.
pub fn psnr(x: &Tensor, reference: &Tensor) -> f64 {
    assert_eq!(x.shape(), reference.shape(), "psnr: shape mismatch");
    let peak = reference.max();
    assert!(peak > 0.0, "psnr: reference peak must be positive");
    let n = x.numel() as f64;
    let mse: f64 = x
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (peak * peak / mse).log10()
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalized 1-D Gaussian taps for the separable window.
fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as isize;
    let mut sum = 0.0;
    for (i, tap) in g.iter_mut().enumerate() {
        let d = (i as isize - half) as f64;
        *tap = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *tap;
    }
    for tap in &mut g {
        *tap /= sum;
    }
    g
}

/// Valid-mode separable Gaussian filtering: rows then columns, keeping only
/// positions where the full window fits.
fn separable_valid(img: &Tensor, g: &[f64; SSIM_WINDOW]) -> Tensor {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let vw = w - SSIM_WINDOW + 1;
    let vh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * vw];
    for y in 0..h {
        for x in 0..vw {
            let mut acc = 0.0;
            for (k, tap) in g.iter().enumerate() {
                acc += tap * img.data()[y * w + x + k];
            }
            rows[y * vw + x] = acc;
        }
    }
    let mut out = vec![0.0; vh * vw];
    for y in 0..vh {
        for x in 0..vw {
            let mut acc = 0.0;
            for (k, tap) in g.iter().enumerate() {
                acc += tap * rows[(y + k) * vw + x];
            }
            out[y * vw + x] = acc;
        }
    }
    Tensor::from_vec(&[vh, vw], out)
}

/// Mean local structural similarity with an 11x11 Gaussian window
/// (sigma 1.5) and the given dynamic range.
pub fn ssim_with_range(x: &Tensor, reference: &Tensor, range: f64) -> Result<f64> {
    if x.shape() != reference.shape() {
        return Err(Error::shape(format!(
            "ssim: shapes {:?} vs {:?}",
            x.shape(),
            reference.shape()
        )));
    }
    let (h, w) = (x.shape()[0], x.shape()[1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::config(format!(
            "ssim: image {h}x{w} smaller than {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let g = gaussian_taps();
    let xx = Tensor::from_vec(&[h, w], x.data().iter().map(|v| v * v).collect());
    let rr = Tensor::from_vec(&[h, w], reference.data().iter().map(|v| v * v).collect());
    let xr = Tensor::from_vec(
        &[h, w],
        x.data().iter().zip(reference.data()).map(|(a, b)| a * b).collect(),
    );
    let mu_x = separable_valid(x, &g);
    let mu_r = separable_valid(reference, &g);
    let e_xx = separable_valid(&xx, &g);
    let e_rr = separable_valid(&rr, &g);
    let e_xr = separable_valid(&xr, &g);

    let c1 = (SSIM_K1 * range) * (SSIM_K1 * range);
    let c2 = (SSIM_K2 * range) * (SSIM_K2 * range);
    let mut acc = 0.0;
    for i in 0..mu_x.numel() {
        let (mx, mr) = (mu_x.data()[i], mu_r.data()[i]);
        let vx = e_xx.data()[i] - mx * mx;
        let vr = e_rr.data()[i] - mr * mr;
        let cov = e_xr.data()[i] - mx * mr;
        acc += ((2.0 * mx * mr + c1) * (2.0 * cov + c2))
            / ((mx * mx + mr * mr + c1) * (vx + vr + c2));
    }
    Ok(acc / mu_x.numel() as f64)
}

/// SSIM with dynamic range taken from the reference peak.
pub fn ssim(x: &Tensor, reference: &Tensor) -> Result<f64> {
    ssim_with_range(x, reference, reference.max())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_img(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[h, w], (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    #[test]
    fn test_psnr_twenty_db_case() {
        // Reference peak 1, MSE exactly 0.01.
        let h = 8;
        let reference = Tensor::ones(&[h, h]);
        let x = Tensor::full(&[h, h], 0.9);
        assert!((psnr(&x, &reference) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn test_psnr_identical_is_infinite() {
        let a = rand_img(1, 8, 8);
        assert_eq!(psnr(&a, &a), f64::INFINITY);
    }

    #[test]
    fn test_psnr_matches_loop_oracle() {
        let x = rand_img(2, 16, 16);
        let r = rand_img(3, 16, 16);
        let mut peak: f64 = 0.0;
        for &v in r.data() {
            peak = peak.max(v);
        }
        let mut se = 0.0;
        for i in 0..256 {
            let d = x.data()[i] - r.data()[i];
            se += d * d;
        }
        let expect = 10.0 * (peak * peak / (se / 256.0)).log10();
        assert!((psnr(&x, &r) - expect).abs() < 1e-10);
    }

    #[test]
    fn test_ssim_self_is_one() {
        let a = rand_img(4, 16, 16);
        let s = ssim(&a, &a).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "ssim(x,x) = {s}");
    }

    #[test]
    fn test_ssim_constant_images_closed_form() {
        // Constant images have zero variance, so the structure factor is
        // exactly one and SSIM reduces to the luminance term.
        let x = Tensor::full(&[16, 16], 0.25);
        let r = Tensor::full(&[16, 16], 0.5);
        let range: f64 = 0.5;
        let c1 = (0.01 * range) * (0.01 * range);
        let expect = (2.0 * 0.5 * 0.25 + c1) / (0.25 + 0.0625 + c1);
        let got = ssim(&x, &r).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        // Sanity: the luminance-only value rounds to ~0.8000.
        assert!((expect - 0.8000159987).abs() < 1e-9);
    }

    #[test]
    fn test_ssim_symmetric_under_shared_range() {
        let a = rand_img(5, 16, 16);
        let b = rand_img(6, 16, 16);
        let s1 = ssim_with_range(&a, &b, 1.0).unwrap();
        let s2 = ssim_with_range(&b, &a, 1.0).unwrap();
        assert!((s1 - s2).abs() < 1e-14);
    }

    #[test]
    fn test_ssim_rejects_small_images() {
        let a = rand_img(7, 8, 8);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn test_ssim_matches_per_window_oracle() {
        // Independent oracle: direct double loop per window position.
        let x = rand_img(8, 16, 16);
        let r = rand_img(9, 16, 16);
        let range = 1.0;
        let g = {
            let mut g = [0.0; 11];
            let mut sum = 0.0;
            for (i, tap) in g.iter_mut().enumerate() {
                let d = i as f64 - 5.0;
                *tap = (-d * d / (2.0 * 1.5 * 1.5)).exp();
                sum += *tap;
            }
            for tap in &mut g {
                *tap /= sum;
            }
            g
        };
        let c1 = (0.01 * range) * (0.01 * range);
        let c2 = (0.03 * range) * (0.03 * range);
        let mut acc = 0.0;
        let mut count = 0;
        for cy in 0..6 {
            for cx in 0..6 {
                let (mut mx, mut mr) = (0.0, 0.0);
                let (mut exx, mut err, mut exr) = (0.0, 0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let wgt = g[dy] * g[dx];
                        let xv = x.data()[(cy + dy) * 16 + cx + dx];
                        let rv = r.data()[(cy + dy) * 16 + cx + dx];
                        mx += wgt * xv;
                        mr += wgt * rv;
                        exx += wgt * xv * xv;
                        err += wgt * rv * rv;
                        exr += wgt * xv * rv;
                    }
                }
                let vx = exx - mx * mx;
                let vr = err - mr * mr;
                let cov = exr - mx * mr;
                acc += ((2.0 * mx * mr + c1) * (2.0 * cov + c2))
                    / ((mx * mx + mr * mr + c1) * (vx + vr + c2));
                count += 1;
            }
        }
        let oracle = acc / count as f64;
        let got = ssim_with_range(&x, &r, range).unwrap();
        assert!((got - oracle).abs() < 1e-10, "{got} vs {oracle}");
    }
}
