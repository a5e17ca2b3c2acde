//! 2-D selective-scan block over a token grid.
//!
//! A complex image is tokenized into non-overlapping patches, the token grid
//! is unfolded along four corner-to-corner traversal orders, each sequence
//! runs through a shared selective scan, and the folded results are summed
//! and gated before the residual connection.

use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::ssm::{selective_scan, BbarMode, SsmVars};

/// Inverts a permutation given as `perm[out] = src`.
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (out, &src) in perm.iter().enumerate() {
        inv[src] = out;
    }
    inv
}

/// Flat gather indices taking a `[2,h,w]` image to patch-major `[L, 2p^2]`
/// layout: token t = gy*gw + gx, feature k = c*p^2 + py*p + px.
pub fn patch_gather_indices(h: usize, w: usize, p: usize) -> Vec<usize> {
    assert!(p > 0 && h % p == 0 && w % p == 0, "dims must divide by patch");
    let (gh, gw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(2 * h * w);
    for gy in 0..gh {
        for gx in 0..gw {
            for c in 0..2 {
                for py in 0..p {
                    for px in 0..p {
                        idx.push(c * h * w + (gy * p + py) * w + (gx * p + px));
                    }
                }
            }
        }
    }
    idx
}

/// Inverse of [`patch_gather_indices`]: takes `[L, 2p^2]` back to `[2,h,w]`.
pub fn patch_scatter_indices(h: usize, w: usize, p: usize) -> Vec<usize> {
    invert_permutation(&patch_gather_indices(h, w, p))
}

/// The four traversal orders over a `gh x gw` grid, as row-major token
/// indices: d0 row-major, d1 its reverse, d2 column-major, d3 its reverse.
pub fn direction_orders(gh: usize, gw: usize) -> [Vec<usize>; 4] {
    let l = gh * gw;
    let d0: Vec<usize> = (0..l).collect();
    let d1: Vec<usize> = (0..l).rev().collect();
    let mut d2 = Vec::with_capacity(l);
    for x in 0..gw {
        for y in 0..gh {
            d2.push(y * gw + x);
        }
    }
    let d3: Vec<usize> = d2.iter().rev().copied().collect();
    [d0, d1, d2, d3]
}

/// Embeds a `[2,h,w]` image variable into `L x D` tokens via a strided
/// patch rearrangement and a linear map (`weight [2p^2, D]`, `bias [D]`).
pub fn patch_embed(tape: &mut Tape, x: Var, h: usize, w: usize, p: usize, weight: Var, bias: Var) -> Var {
    let l = (h / p) * (w / p);
    let feat = 2 * p * p;
    let idx = Rc::new(patch_gather_indices(h, w, p));
    let patches = tape.gather_elems(x, idx, &[l, feat]);
    let proj = tape.matmul(patches, weight);
    tape.add_row_vec(proj, bias)
}

/// Projects `L x D` tokens back to a `[2,h,w]` image via a linear map
/// (`weight [D, 2p^2]`, `bias [2p^2]`) and the inverse patch rearrangement.
pub fn unpatchify(tape: &mut Tape, t: Var, h: usize, w: usize, p: usize, weight: Var, bias: Var) -> Var {
    let proj = tape.matmul(t, weight);
    let proj = tape.add_row_vec(proj, bias);
    let idx = Rc::new(patch_scatter_indices(h, w, p));
    tape.gather_elems(proj, idx, &[2, h, w])
}

/// Parameters of one block. One shared set of scan parameters serves all
/// four directions; projections carry no bias.
pub struct VssmParams {
    pub norm1_gamma: Var,
    pub norm1_beta: Var,
    /// `[D, E]` main-branch input projection.
    pub in_proj: Var,
    /// `[D, E]` gate-branch projection.
    pub gate_proj: Var,
    /// `[3, 3, E]` depthwise convolution kernel.
    pub dw_kernel: Var,
    pub ssm: SsmVars,
    pub norm2_gamma: Var,
    pub norm2_beta: Var,
    /// `[E, D]` output projection.
    pub out_proj: Var,
}

/// Layer-norm epsilon shared by every block.
pub const NORM_EPS: f64 = 1e-6;

/// One block forward pass on `L x D` tokens laid out row-major on a
/// `gh x gw` grid.
///
/// `u = norm1(t)`; main branch `silu(dwconv(u W_in))` is unfolded along the
/// four directions, scanned, folded back and summed; the normalized sum is
/// gated by `silu(u W_gate)` and projected back onto the residual stream.
pub fn vssm_forward(
    tape: &mut Tape,
    t: Var,
    gh: usize,
    gw: usize,
    params: &VssmParams,
    mode: BbarMode,
) -> Var {
    let e = tape.value(params.in_proj).shape()[1];

    let u = tape.layer_norm(t, params.norm1_gamma, params.norm1_beta, NORM_EPS);
    let main = tape.matmul(u, params.in_proj);
    // Row-major [L,E] tokens are already a [gh,gw,E] grid in memory.
    let main = tape.reshape(main, &[gh, gw, e]);
    let main = tape.depthwise_conv2d(main, params.dw_kernel);
    let main = tape.reshape(main, &[gh * gw, e]);
    let main = tape.silu(main);

    let orders = direction_orders(gh, gw);
    let mut merged: Option<Var> = None;
    for order in orders.iter() {
        let seq = tape.gather_rows(main, Rc::new(order.clone()));
        let y = selective_scan(tape, seq, &params.ssm, mode);
        let folded = tape.gather_rows(y, Rc::new(invert_permutation(order)));
        merged = Some(match merged {
            None => folded,
            Some(acc) => tape.add(acc, folded),
        });
    }
    let s = merged.expect("four directions");
    let s = tape.layer_norm(s, params.norm2_gamma, params.norm2_beta, NORM_EPS);

    let gate = tape.matmul(u, params.gate_proj);
    let gate = tape.silu(gate);
    let gated = tape.mul(s, gate);
    let out = tape.matmul(gated, params.out_proj);
    tape.add(out, t)
}
