//! Training loop: L1 objective over complex channels, linear warm-up with
//! half-cosine decay, and an adaptive optimizer with decoupled weight decay.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::net::{reconstruct, stage_params, NetworkConfig, ParamSet};
use crate::phantom::Sample;
use crate::tensor::{derive_seed, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iters: u64,
    pub batch: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_iters: u64,
    pub weight_decay: f64,
    pub seed: u64,
    pub log_every: u64,
}

impl TrainConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        TrainConfig {
            iters: cfg.iters,
            batch: cfg.batch,
            lr_max: cfg.lr_max,
            lr_min: cfg.lr_min,
            warmup_iters: cfg.warmup(),
            weight_decay: cfg.weight_decay,
            seed: cfg.train_seed,
            log_every: cfg.log_every,
        }
    }
}

/// Learning rate at a step: linear 0 -> lr_max over the warm-up, then a
/// half cosine from lr_max down to lr_min at the final iteration.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    assert!(step <= cfg.iters, "step {step} beyond iters {}", cfg.iters);
    if cfg.warmup_iters > 0 && step <= cfg.warmup_iters {
        return cfg.lr_max * step as f64 / cfg.warmup_iters as f64;
    }
    let span = (cfg.iters - cfg.warmup_iters) as f64;
    let t = (step - cfg.warmup_iters) as f64 / span;
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// First/second moment accumulators plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimState {
    pub fn zeros_like(params: &ParamSet) -> Self {
        OptimState {
            m: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            step: 0,
        }
    }
}

/// One optimizer step. Decay is decoupled: parameters shrink by
/// `(1 - lr*wd)` multiplicatively, independent of the gradient term.
/// Missing gradients count as zero.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &[Option<Vec<f64>>],
    state: &mut OptimState,
    lr: f64,
    wd: f64,
) {
    assert_eq!(grads.len(), params.len(), "gradient/parameter count mismatch");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..params.len() {
        let theta = &mut params.tensors_mut()[i];
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..theta.numel() {
            let g = grads[i].as_ref().map_or(0.0, |gv| gv[j]);
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let d = theta.data_mut();
            d[j] = d[j] * (1.0 - lr * wd) - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Mean absolute difference over both channels, on the tape.
pub fn l1_loss(tape: &mut Tape, x_r: Var, target: Var) -> Var {
    let d = tape.sub(x_r, target);
    let a = tape.abs(d);
    tape.mean_all(a)
}

/// One `step,lr,loss` record.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Deterministic batch indices for a step: a fresh stream seeded from
/// (seed, step), so resumed runs draw identical batches without carrying
/// generator state in checkpoints.
pub fn batch_indices(seed: u64, step: u64, batch: usize, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xBA7C4, step]));
    (0..batch).map(|_| rng.gen_range(0..len)).collect()
}

/// Loss and parameter gradients for one batch element on its own tape.
fn element_pass(
    sample: &Sample,
    params: &ParamSet,
    net_cfg: &NetworkConfig,
) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
    let mut tape = Tape::new();
    let net = stage_params(&mut tape, params, net_cfg, true);
    let x_us = tape.constant(sample.x_us.to_channels());
    let x_fs = tape.constant(sample.x_fs.to_channels());
    let x_r = reconstruct(&mut tape, x_us, &sample.mask, &sample.coils, &net, net_cfg);
    let loss = l1_loss(&mut tape, x_r, x_fs);
    let loss_value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    let flat = net
        .flat
        .iter()
        .map(|&v| grads.get(v).map(|g| g.to_vec()))
        .collect();
    Ok((loss_value, flat))
}

/// Runs iterations `start_step+1 ..= stop_step` (defaulting to the full
/// horizon `cfg.iters`, which also fixes the schedule), updating `params`
/// and `state` in place. Loss rows are returned and streamed as CSV to
/// `sink` when given. Aborts with a diagnostic on a non-finite loss.
///
/// Batch elements are evaluated on independent tapes, in waves of up to
/// `min(batch, available cores)` threads. Losses and gradients are reduced
/// in batch-index order, so the result is bitwise identical whatever the
/// thread count.
pub fn train(
    dataset: &[Sample],
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
    params: &mut ParamSet,
    state: &mut OptimState,
    start_step: u64,
    stop_step: Option<u64>,
    mut sink: Option<&mut dyn Write>,
) -> Result<Vec<LossRow>> {
    assert!(!dataset.is_empty(), "dataset must be nonempty");
    let stop = stop_step.unwrap_or(cfg.iters).min(cfg.iters);
    let lanes = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(cfg.batch)
        .max(1);
    let mut rows = Vec::new();
    if let Some(w) = sink.as_deref_mut() {
        if start_step == 0 {
            writeln!(w, "step,lr,loss").map_err(|e| Error::train(format!("log write: {e}")))?;
        }
    }
    for step in start_step + 1..=stop {
        let lr = lr_schedule(step, cfg);
        let idx = batch_indices(cfg.seed, step, cfg.batch, dataset.len());

        let mut parts: Vec<(f64, Vec<Option<Vec<f64>>>)> = Vec::with_capacity(idx.len());
        if lanes <= 1 {
            for &i in &idx {
                parts.push(element_pass(&dataset[i], params, net_cfg)?);
            }
        } else {
            let shared: &ParamSet = params;
            for wave in idx.chunks(lanes) {
                let results = std::thread::scope(|scope| {
                    let handles: Vec<_> = wave
                        .iter()
                        .map(|&i| {
                            let sample = &dataset[i];
                            scope.spawn(move || element_pass(sample, shared, net_cfg))
                        })
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().expect("batch worker panicked"))
                        .collect::<Vec<_>>()
                });
                for r in results {
                    parts.push(r?);
                }
            }
        }

        let loss_value =
            parts.iter().map(|p| p.0).fold(0.0, |a, b| a + b) / cfg.batch as f64;
        if !loss_value.is_finite() {
            return Err(Error::train(format!(
                "non-finite loss {loss_value} at step {step}"
            )));
        }
        let mut it = parts.into_iter();
        let (_, mut flat_grads) = it.next().expect("nonzero batch");
        for (_, g) in it {
            for (slot, gi) in flat_grads.iter_mut().zip(g) {
                match (slot.as_mut(), gi) {
                    (Some(a), Some(b)) => {
                        for (x, y) in a.iter_mut().zip(&b) {
                            *x += y;
                        }
                    }
                    (None, Some(b)) => *slot = Some(b),
                    _ => {}
                }
            }
        }
        let inv_b = 1.0 / cfg.batch as f64;
        for slot in flat_grads.iter_mut().flatten() {
            for x in slot.iter_mut() {
                *x *= inv_b;
            }
        }
        adamw_step(params, &flat_grads, state, lr, cfg.weight_decay);

        if step == 1 || step % cfg.log_every == 0 || step == cfg.iters {
            let row = LossRow {
                step,
                lr,
                loss: loss_value,
            };
            if let Some(w) = sink.as_deref_mut() {
                writeln!(w, "{},{:e},{:e}", row.step, row.lr, row.loss)
                    .map_err(|e| Error::train(format!("log write: {e}")))?;
            }
            rows.push(row);
        }
    }
    Ok(rows)
}
