//! Hard data-consistency block.
//!
//! In k-space, network-predicted values are kept only where the mask is
//! zero; acquired values overwrite the sampled locations. The mixed per-coil
//! spectra are brought back to image space and combined with conjugate
//! sensitivities, after which the block re-activates and re-tokenizes.

use crate::autodiff::{Tape, Var};
use crate::forward_model::{CoilMaps, Mask};
use crate::tensor::Tensor;
use crate::vssm::{patch_embed, unpatchify};

/// Per-block learned reprojection weights: unpatchify `[D,2p^2]`/`[2p^2]`
/// followed by patch embedding `[2p^2,D]`/`[D]`.
pub struct DcParams {
    pub unpat_w: Var,
    pub unpat_b: Var,
    pub embed_w: Var,
    pub embed_b: Var,
}

/// Acquisition context staged onto the tape once per reconstruction and
/// shared by every consistency block: coil constants, the mask on both
/// channels, and the acquired k-space built from the undersampled input
/// variable (so gradients flow back to the input).
pub struct StagedAcquisition {
    pub x_us: Var,
    coil_vars: Vec<Var>,
    coil_conj_vars: Vec<Var>,
    inv_mask2: Var,
    acquired_k: Vec<Var>,
    h: usize,
    w: usize,
}

impl StagedAcquisition {
    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn ncoils(&self) -> usize {
        self.coil_vars.len()
    }
}

fn mask_channels(mask: &Mask) -> Tensor {
    let (h, w) = (mask.h(), mask.w());
    let mut data = Vec::with_capacity(2 * h * w);
    data.extend_from_slice(mask.grid().data());
    data.extend_from_slice(mask.grid().data());
    Tensor::from_vec(&[2, h, w], data)
}

/// Stages coils, mask, and the masked acquired spectra `fft(C_c x_us) M`.
pub fn stage_acquisition(
    tape: &mut Tape,
    x_us: Var,
    coils: &CoilMaps,
    mask: &Mask,
) -> StagedAcquisition {
    let (h, w) = (coils.h(), coils.w());
    assert_eq!(tape.value(x_us).shape(), &[2, h, w], "x_us must be [2,h,w]");
    assert_eq!((mask.h(), mask.w()), (h, w), "mask dims differ from coils");

    let m2 = mask_channels(mask);
    let mask2 = tape.constant(m2.clone());
    let inv_mask2 = tape.constant(m2.map(|v| 1.0 - v));

    let mut coil_vars = Vec::with_capacity(coils.ncoils());
    let mut coil_conj_vars = Vec::with_capacity(coils.ncoils());
    let mut acquired_k = Vec::with_capacity(coils.ncoils());
    for c in 0..coils.ncoils() {
        let cv = tape.constant(coils.map(c).to_channels());
        let cj = tape.constant(coils.map(c).conj().to_channels());
        let weighted = tape.complex_mul(cv, x_us);
        let k = tape.fft2c(weighted);
        let k = tape.mul(k, mask2);
        coil_vars.push(cv);
        coil_conj_vars.push(cj);
        acquired_k.push(k);
    }
    StagedAcquisition {
        x_us,
        coil_vars,
        coil_conj_vars,
        inv_mask2,
        acquired_k,
        h,
        w,
    }
}

/// Per-coil k-space mixing: predicted spectrum off the mask support,
/// acquired spectrum on it.
pub fn consistency_mix(tape: &mut Tape, x_img: Var, acq: &StagedAcquisition) -> Vec<Var> {
    (0..acq.ncoils())
        .map(|c| {
            let weighted = tape.complex_mul(acq.coil_vars[c], x_img);
            let k = tape.fft2c(weighted);
            let keep = tape.mul(k, acq.inv_mask2);
            tape.add(keep, acq.acquired_k[c])
        })
        .collect()
}

/// Conjugate-sensitivity combine of per-coil spectra back to one image.
pub fn consistency_combine(tape: &mut Tape, kcs: &[Var], acq: &StagedAcquisition) -> Var {
    let mut out: Option<Var> = None;
    for (c, &k) in kcs.iter().enumerate() {
        let img = tape.ifft2c(k);
        let term = tape.complex_mul(acq.coil_conj_vars[c], img);
        out = Some(match out {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    out.expect("at least one coil")
}

/// Replaces the predicted k-space of `x` with acquired samples on the mask
/// support and returns the combined image. With normalized coils this leaves
/// sampled frequencies exactly equal to the acquisition.
pub fn hard_consistency_project(tape: &mut Tape, x: Var, acq: &StagedAcquisition) -> Var {
    let kcs = consistency_mix(tape, x, acq);
    consistency_combine(tape, &kcs, acq)
}

/// Full consistency block on tokens: unpatchify, k-space replacement,
/// channelwise SiLU, re-embed.
pub fn dc_apply(
    tape: &mut Tape,
    x_p: Var,
    acq: &StagedAcquisition,
    p: usize,
    params: &DcParams,
) -> Var {
    let x_img = unpatchify(tape, x_p, acq.h, acq.w, p, params.unpat_w, params.unpat_b);
    let x_dc = hard_consistency_project(tape, x_img, acq);
    let act = tape.silu(x_dc);
    patch_embed(tape, act, acq.h, acq.w, p, params.embed_w, params.embed_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward_model::{encode, generate_coil_maps, generate_gaussian_mask, zero_filled};
    use crate::fourier::fft2c;
    use crate::gradcheck::{central_diff, max_rel_err};
    use crate::image::ComplexImage;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect())
    }

    fn random_image(seed: u64, h: usize, w: usize) -> ComplexImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexImage::new(
            rand_tensor(&mut rng, &[h, w], 1.0),
            rand_tensor(&mut rng, &[h, w], 1.0),
        )
    }

    /// Builds x_us = zero_filled(encode(x_fs)) for a scene.
    fn make_scene(
        seed: u64,
        h: usize,
        w: usize,
        ncoils: usize,
        r: u32,
    ) -> (ComplexImage, ComplexImage, CoilMaps, Mask) {
        let x_fs = random_image(seed, h, w);
        let coils = generate_coil_maps(h, w, ncoils, seed + 1).unwrap();
        let mask = generate_gaussian_mask(h, w, r, 4, None, seed + 2).unwrap();
        let y = encode(&x_fs, &coils, &mask).unwrap();
        let x_us = zero_filled(&y, &coils).unwrap();
        (x_fs, x_us, coils, mask)
    }

    #[test]
    fn test_project_full_mask_returns_acquisition() {
        // With every sample acquired, the projection ignores x entirely.
        let (h, w) = (16, 16);
        let x_us = random_image(1, h, w);
        let coils = generate_coil_maps(h, w, 3, 2).unwrap();
        let mask = Mask::full(h, w);
        for xseed in [10u64, 11] {
            let x = random_image(xseed, h, w);
            let mut tape = Tape::new();
            let xv = tape.constant(x.to_channels());
            let uv = tape.constant(x_us.to_channels());
            let acq = stage_acquisition(&mut tape, uv, &coils, &mask);
            let out = hard_consistency_project(&mut tape, xv, &acq);
            let got = ComplexImage::from_channels(tape.value(out));
            assert!(got.sub(&x_us).max_abs() < 1e-12);
        }
    }

    #[test]
    fn test_project_zero_mask_returns_input() {
        let (h, w) = (16, 16);
        let x = random_image(3, h, w);
        let x_us = random_image(4, h, w);
        let coils = generate_coil_maps(h, w, 4, 5).unwrap();
        let mask = Mask::empty(h, w);
        let mut tape = Tape::new();
        let xv = tape.constant(x.to_channels());
        let uv = tape.constant(x_us.to_channels());
        let acq = stage_acquisition(&mut tape, uv, &coils, &mask);
        let out = hard_consistency_project(&mut tape, xv, &acq);
        let got = ComplexImage::from_channels(tape.value(out));
        assert!(got.sub(&x).max_abs() < 1e-12);
    }

    #[test]
    fn test_project_single_coil_exact_on_mask_support() {
        let (h, w) = (16, 16);
        let (_, x_us, coils, mask) = make_scene(6, h, w, 1, 4);
        let x = random_image(7, h, w);
        let mut tape = Tape::new();
        let xv = tape.constant(x.to_channels());
        let uv = tape.constant(x_us.to_channels());
        let acq = stage_acquisition(&mut tape, uv, &coils, &mask);
        let out = hard_consistency_project(&mut tape, xv, &acq);
        let got = ComplexImage::from_channels(tape.value(out));

        let k_out = fft2c(&got).unwrap();
        let k_us = fft2c(&x_us).unwrap();
        let k_x = fft2c(&x).unwrap();
        let on = k_out.sub(&k_us).mul_real(mask.grid()).max_abs();
        let off = k_out.sub(&k_x).mul_real(&mask.complement()).max_abs();
        assert!(on < 1e-10, "on-support error {on}");
        assert!(off < 1e-10, "off-support error {off}");
    }

    #[test]
    fn test_project_is_idempotent_single_coil() {
        let (h, w) = (16, 16);
        let (_, x_us, coils, mask) = make_scene(8, h, w, 1, 4);
        let x = random_image(9, h, w);
        let mut tape = Tape::new();
        let xv = tape.constant(x.to_channels());
        let uv = tape.constant(x_us.to_channels());
        let acq = stage_acquisition(&mut tape, uv, &coils, &mask);
        let once = hard_consistency_project(&mut tape, xv, &acq);
        let twice = hard_consistency_project(&mut tape, once, &acq);
        let a = ComplexImage::from_channels(tape.value(once));
        let b = ComplexImage::from_channels(tape.value(twice));
        assert!(a.sub(&b).max_abs() < 1e-10);
    }

    #[test]
    fn test_mixed_kspace_matches_acquisition_per_coil() {
        // Before the coil combine, every mixed spectrum equals the acquired
        // one on the mask support.
        let (h, w, nc) = (16, 16, 4);
        let (_, x_us, coils, mask) = make_scene(12, h, w, nc, 4);
        let x = random_image(13, h, w);
        let mut tape = Tape::new();
        let xv = tape.constant(x.to_channels());
        let uv = tape.constant(x_us.to_channels());
        let acq = stage_acquisition(&mut tape, uv, &coils, &mask);
        let kcs = consistency_mix(&mut tape, xv, &acq);
        for c in 0..nc {
            let mixed = ComplexImage::from_channels(tape.value(kcs[c]));
            let acquired = fft2c(&coils.map(c).cmul(&x_us)).unwrap();
            let diff = mixed.sub(&acquired).mul_real(mask.grid()).max_abs();
            assert!(diff < 1e-12, "coil {c}: on-support diff {diff}");
        }
    }

    #[test]
    fn test_dc_apply_shape() {
        let (h, w, p, d) = (16, 16, 2, 4);
        let (_, x_us, coils, mask) = make_scene(14, h, w, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let l = (h / p) * (w / p);
        let mut tape = Tape::new();
        let xp = tape.constant(rand_tensor(&mut rng, &[l, d], 1.0));
        let uv = tape.constant(x_us.to_channels());
        let acq = stage_acquisition(&mut tape, uv, &coils, &mask);
        let params = DcParams {
            unpat_w: tape.constant(rand_tensor(&mut rng, &[d, 2 * p * p], 0.5)),
            unpat_b: tape.constant(rand_tensor(&mut rng, &[2 * p * p], 0.5)),
            embed_w: tape.constant(rand_tensor(&mut rng, &[2 * p * p, d], 0.5)),
            embed_b: tape.constant(rand_tensor(&mut rng, &[d], 0.5)),
        };
        let out = dc_apply(&mut tape, xp, &acq, p, &params);
        assert_eq!(tape.value(out).shape(), &[l, d]);
        assert!(tape.value(out).is_finite());
    }

    #[test]
    fn test_dc_apply_gradient_matches_finite_differences() {
        let (h, w, p, d) = (8, 8, 2, 4);
        let (_, x_us, coils, mask) = make_scene(16, h, w, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let l = (h / p) * (w / p);
        let inputs = vec![
            rand_tensor(&mut rng, &[l, d], 0.8),
            x_us.to_channels(),
            rand_tensor(&mut rng, &[d, 2 * p * p], 0.5),
            rand_tensor(&mut rng, &[2 * p * p], 0.5),
            rand_tensor(&mut rng, &[2 * p * p, d], 0.5),
            rand_tensor(&mut rng, &[d], 0.5),
        ];
        let weights = rand_tensor(&mut rng, &[l, d], 1.0);

        let run = |xs: &[Tensor], want_grads: bool| -> (f64, Vec<Vec<f64>>) {
            let mut tape = Tape::new();
            let xp = tape.leaf(xs[0].clone(), true);
            let uv = tape.leaf(xs[1].clone(), true);
            let acq = stage_acquisition(&mut tape, uv, &coils, &mask);
            let params = DcParams {
                unpat_w: tape.leaf(xs[2].clone(), true),
                unpat_b: tape.leaf(xs[3].clone(), true),
                embed_w: tape.leaf(xs[4].clone(), true),
                embed_b: tape.leaf(xs[5].clone(), true),
            };
            let out = dc_apply(&mut tape, xp, &acq, p, &params);
            let wv = tape.constant(weights.clone());
            let prod = tape.mul(out, wv);
            let loss = tape.sum_all(prod);
            let value = tape.value(loss).data()[0];
            if !want_grads {
                return (value, vec![]);
            }
            let grads = tape.backward(loss).unwrap();
            let gs = [xp, uv, params.unpat_w, params.unpat_b, params.embed_w, params.embed_b]
                .iter()
                .map(|v| grads.get(*v).unwrap().to_vec())
                .collect();
            (value, gs)
        };

        let (_, analytic) = run(&inputs, true);
        let numeric = central_diff(&inputs, |xs| run(xs, false).0, 1e-6);
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let rel = max_rel_err(a, n.data());
            assert!(rel < 1e-4, "input {i}: rel err {rel}");
        }
    }
}
