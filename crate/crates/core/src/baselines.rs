//! Classical regularized least-squares reconstruction baseline.
//!
//! Solves (EᴴE + λI) x = Eᴴy by a conjugate-residual Krylov iteration,
//! where E is the masked multi-coil encoding operator. Conjugate residual
//! minimizes the residual norm over the growing Krylov space, so the
//! residual is monotone nonincreasing, which the tests pin down.

use crate::error::Result;
use crate::forward_model::{encode, zero_filled, CoilMaps, KSpace, Mask};
use crate::image::ComplexImage;

#[derive(Clone, Debug)]
pub struct CgConfig {
    pub lambda: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for CgConfig {
    fn default() -> Self {
        CgConfig {
            lambda: 0.01,
            max_iters: 50,
            tol: 1e-9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CgReport {
    pub iters: usize,
    pub residual: f64,
    pub converged: bool,
    /// Residual norm before each iteration, then the final norm.
    pub residual_history: Vec<f64>,
}

/// Applies the normal operator EᴴE x + λx.
fn normal_op(x: &ComplexImage, coils: &CoilMaps, mask: &Mask, lambda: f64) -> Result<ComplexImage> {
    let ex = encode(x, coils, mask)?;
    let ehe = zero_filled(&ex, coils)?;
    Ok(ehe.add(&x.scale(lambda)))
}

/// Tikhonov-regularized reconstruction of undersampled multi-coil data.
pub fn cg_tikhonov(
    y: &KSpace,
    coils: &CoilMaps,
    mask: &Mask,
    cfg: &CgConfig,
) -> Result<(ComplexImage, CgReport)> {
    assert!(cfg.lambda >= 0.0, "lambda must be nonnegative");
    assert!(cfg.max_iters >= 1, "max_iters must be >= 1");
    let b = zero_filled(y, coils)?;
    let b_norm = b.norm();
    let mut x = ComplexImage::zeros(coils.h(), coils.w());
    let mut r = b.clone();
    let mut p = r.clone();
    let mut ar = normal_op(&r, coils, mask, cfg.lambda)?;
    let mut ap = ar.clone();
    let mut rar = r.dot_real(&ar);

    let mut history = vec![r.norm()];
    let mut iters = 0;
    let mut converged = b_norm == 0.0;
    while iters < cfg.max_iters && !converged {
        let apap = ap.dot_real(&ap);
        if apap <= f64::EPSILON * b_norm * b_norm {
            break;
        }
        let alpha = rar / apap;
        x = x.add(&p.scale(alpha));
        r = r.sub(&ap.scale(alpha));
        iters += 1;
        history.push(r.norm());
        if r.norm() <= cfg.tol * b_norm {
            converged = true;
            break;
        }
        ar = normal_op(&r, coils, mask, cfg.lambda)?;
        let rar_new = r.dot_real(&ar);
        let beta = rar_new / rar;
        p = r.add(&p.scale(beta));
        ap = ar.add(&ap.scale(beta));
        rar = rar_new;
    }
    let residual = r.norm();
    Ok((
        x,
        CgReport {
            iters,
            residual,
            converged,
            residual_history: history,
        },
    ))
}
