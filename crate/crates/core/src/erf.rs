//! Effective receptive field analysis.
//!
//! For each evaluation slice the derivative of the center output magnitude
//! with respect to the undersampled input image is computed by reverse-mode
//! differentiation; per-pixel gradient magnitudes (L2 over the two channels)
//! are averaged across slices and the map is normalized to peak 1. With
//! `zero_mask` the consistency blocks see an all-zero sampling mask, which
//! turns k-space replacement into a pass-through and isolates the backbone's
//! spatial mixing.

use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::forward_model::Mask;
use crate::net::{reconstruct, stage_params, NetworkConfig, ParamSet};
use crate::phantom::Sample;
use crate::tensor::Tensor;

/// Normalized map of input sensitivity, `[h, w]`.
pub struct ErfMap {
    pub grid: Tensor,
    pub slices_used: usize,
}

/// Slices whose center output magnitude is below this are skipped: the
/// magnitude's derivative is undefined at zero.
const CENTER_MAGNITUDE_FLOOR: f64 = 1e-30;

/// Receptive field of an arbitrary `[2,h,w] -> [2,h,w]` staged forward pass.
/// Each input is staged as a differentiable leaf; `forward` must consume it
/// and return the output variable on the same tape.
pub fn erf_of_forward(
    h: usize,
    w: usize,
    inputs: &[Tensor],
    mut forward: impl FnMut(&mut Tape, Var) -> Var,
) -> Result<ErfMap> {
    if inputs.is_empty() {
        return Err(Error::config("receptive field analysis needs at least one slice"));
    }
    let hw = h * w;
    let center = (h / 2) * w + w / 2;
    let mut sum = vec![0.0; hw];
    let mut used = 0usize;
    for input in inputs {
        if input.shape() != [2, h, w] {
            return Err(Error::shape(format!(
                "receptive field input must be [2,{h},{w}], got {:?}",
                input.shape()
            )));
        }
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone(), true);
        let out = forward(&mut tape, x);
        let pick = Rc::new(vec![center, hw + center]);
        let c = tape.gather_elems(out, pick, &[2]);
        let c2 = tape.mul(c, c);
        let power = tape.sum_all(c2);
        if tape.value(power).data()[0].sqrt() < CENTER_MAGNITUDE_FLOOR {
            continue;
        }
        let magnitude = tape.sqrt(power);
        let grads = tape.backward(magnitude)?;
        let g = grads.get(x).expect("input leaf requires grad");
        for i in 0..hw {
            sum[i] += (g[i] * g[i] + g[hw + i] * g[hw + i]).sqrt();
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::config("every slice had numerically zero center output"));
    }
    let mut grid: Vec<f64> = sum.iter().map(|v| v / used as f64).collect();
    let peak = grid.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        for v in &mut grid {
            *v /= peak;
        }
    }
    Ok(ErfMap { grid: Tensor::from_vec(&[h, w], grid), slices_used: used })
}

/// Receptive field of a reconstruction network over evaluation slices.
pub fn effective_receptive_field(
    params: &ParamSet,
    cfg: &NetworkConfig,
    slices: &[Sample],
    zero_mask: bool,
) -> Result<ErfMap> {
    cfg.validate()?;
    let empty = Mask::empty(cfg.h, cfg.w);
    let inputs: Vec<Tensor> = slices.iter().map(|s| s.x_us.to_channels()).collect();
    let mut which = 0usize;
    erf_of_forward(cfg.h, cfg.w, &inputs, |tape, x| {
        let s = &slices[which];
        which += 1;
        let mask = if zero_mask { &empty } else { &s.mask };
        let net = stage_params(tape, params, cfg, false);
        reconstruct(tape, x, mask, &s.coils, &net, cfg)
    })
}

/// Fraction of total map mass strictly outside a centered disc of `radius`
/// pixels (Euclidean distance from the center sample).
pub fn mass_outside_radius(map: &ErfMap, radius: f64) -> f64 {
    let shape = map.grid.shape();
    let (h, w) = (shape[0], shape[1]);
    let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
    let mut inside = 0.0;
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let v = map.grid.data()[y * w + x];
            total += v;
            let dist = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            if dist <= radius {
                inside += v;
            }
        }
    }
    if total == 0.0 {
        0.0
    } else {
        (total - inside) / total
    }
}
