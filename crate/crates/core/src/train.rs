//! Objectives, optimizer, learning-rate schedule, and the training loop.
//!
//! The objective is mean binary cross-entropy on logits with a
//! positive-class weight, applied to both prediction heads:
//! `total = bce(y_final) + alpha * bce(y_early)`. The optimizer is AdamW
//! with decoupled weight decay; the learning rate shrinks by a fixed
//! factor whenever validation loss worsens between epochs.

use crate::data::{stack_samples, Sample};
use crate::error::{Error, Result};
use crate::metrics::{binarize_and_score, miou};
use crate::model::{forward, ForwardOpts, ModelConfig, ParamStore};
use crate::tape::Tape;
use crate::tensor::{Mode, Tensor5};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Training hyperparameters. Defaults are the reference values; `desk()`
/// shrinks batch and epochs for laptop-scale runs.
#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub pos_weight: f64,
    /// Weight of the early-head loss term.
    pub alpha: f64,
    pub batch: usize,
    pub epochs: usize,
    pub plateau_factor: f64,
    /// Probability threshold for validation scoring.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            pos_weight: 4.0,
            alpha: 0.2,
            batch: 16,
            epochs: 90,
            plateau_factor: 0.9,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale defaults: batch 4, 10 epochs.
    pub fn desk() -> Self {
        TrainConfig {
            batch: 4,
            epochs: 10,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig("lr must be positive".into()));
        }
        if self.alpha < 0.0 {
            return Err(Error::InvalidConfig("alpha must be >= 0".into()));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::InvalidConfig(
                "plateau factor must be in (0, 1)".into(),
            ));
        }
        if !(0.5..=0.6).contains(&self.threshold) {
            return Err(Error::InvalidConfig(format!(
                "decision threshold must be in [0.5, 0.6], got {}",
                self.threshold
            )));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("batch and epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean weighted binary cross-entropy on logits, stable softplus form:
/// `mean((1 - y) z + (1 + (pw - 1) y) softplus(-z))`.
pub fn bce_with_logits_value(logits: &Tensor5, y: &Tensor5, pos_weight: f64) -> Result<f64> {
    if logits.shape() != y.shape() {
        return Err(Error::shape_mismatch(logits.shape(), y.shape()));
    }
    let zv = logits.to_f64_vec();
    let yv = y.to_f64_vec();
    if yv.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArg(
            "cross-entropy targets must be exactly 0 or 1".into(),
        ));
    }
    let mut total = 0.0f64;
    for (&z, &yi) in zv.iter().zip(&yv) {
        let softplus_neg = (-z.abs()).exp().ln_1p() + (-z).max(0.0);
        total += (1.0 - yi) * z + (1.0 + (pos_weight - 1.0) * yi) * softplus_neg;
    }
    let loss = total / zv.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("bce_loss".into()));
    }
    Ok(loss)
}

/// Spec-named alias of [`bce_with_logits_value`].
pub fn bce_loss(logits: &Tensor5, y: &Tensor5, pos_weight: f64) -> Result<f64> {
    bce_with_logits_value(logits, y, pos_weight)
}

/// `bce(y_final) + alpha * bce(y_early)`, both heads against the same
/// target with the same positive weight.
pub fn total_loss(
    y_final_logits: &Tensor5,
    y_early_logits: &Tensor5,
    y: &Tensor5,
    tc: &TrainConfig,
) -> Result<f64> {
    Ok(bce_with_logits_value(y_final_logits, y, tc.pos_weight)?
        + tc.alpha * bce_with_logits_value(y_early_logits, y, tc.pos_weight)?)
}

/// First/second-moment buffers for AdamW, aligned with a store's entries.
pub struct AdamState {
    m: Vec<Tensor5>,
    v: Vec<Tensor5>,
    last_step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = (0..store.len())
            .map(|i| Tensor5::zeros_like(store.value(i)))
            .collect();
        let v = (0..store.len())
            .map(|i| Tensor5::zeros_like(store.value(i)))
            .collect();
        AdamState {
            m,
            v,
            last_step: 0,
        }
    }
}

/// One AdamW step over every parameter in the store, reading gradients
/// from the store's buffers. Decoupled weight decay is applied to the
/// parameter before the moment update; moments are bias-corrected with
/// `step_index` (1-based, strictly increasing).
pub fn adamw_step(
    store: &mut ParamStore,
    state: &mut AdamState,
    tc: &TrainConfig,
    lr: f64,
    step_index: u64,
) -> Result<()> {
    if step_index == 0 || step_index <= state.last_step {
        return Err(Error::InvalidArg(format!(
            "step index must advance: got {step_index} after {}",
            state.last_step
        )));
    }
    if state.m.len() != store.len() {
        return Err(Error::InvalidArg(
            "optimizer state does not match parameter store".into(),
        ));
    }
    state.last_step = step_index;
    let bc1 = 1.0 - tc.beta1.powi(step_index as i32);
    let bc2 = 1.0 - tc.beta2.powi(step_index as i32);
    for i in 0..store.len() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let (param, grad) = store.value_grad_mut(i);
        adamw_update_tensor(param, grad, m, v, tc, lr, bc1, bc2);
    }
    Ok(())
}

fn adamw_update_tensor(
    param: &mut Tensor5,
    grad: &Tensor5,
    m: &mut Tensor5,
    v: &mut Tensor5,
    tc: &TrainConfig,
    lr: f64,
    bc1: f64,
    bc2: f64,
) {
    use crate::tensor::Dtype;
    match param.dtype() {
        Dtype::F32 => {
            let g: Vec<f32> = grad.as_f32().expect("grad dtype").to_vec();
            let p = param.as_f32_mut();
            let mv = m.as_f32_mut();
            let vv = v.as_f32_mut();
            let (b1, b2) = (tc.beta1 as f32, tc.beta2 as f32);
            let (lrf, wd, eps) = (lr as f32, tc.weight_decay as f32, tc.eps as f32);
            let (bc1, bc2) = (bc1 as f32, bc2 as f32);
            for j in 0..p.len() {
                p[j] *= 1.0 - lrf * wd;
                mv[j] = b1 * mv[j] + (1.0 - b1) * g[j];
                vv[j] = b2 * vv[j] + (1.0 - b2) * g[j] * g[j];
                let mhat = mv[j] / bc1;
                let vhat = vv[j] / bc2;
                p[j] -= lrf * mhat / (vhat.sqrt() + eps);
            }
        }
        Dtype::F64 => {
            let g: Vec<f64> = grad.as_f64().expect("grad dtype").to_vec();
            let p = param.as_f64_mut();
            let mv = m.as_f64_mut();
            let vv = v.as_f64_mut();
            for j in 0..p.len() {
                p[j] *= 1.0 - lr * tc.weight_decay;
                mv[j] = tc.beta1 * mv[j] + (1.0 - tc.beta1) * g[j];
                vv[j] = tc.beta2 * vv[j] + (1.0 - tc.beta2) * g[j] * g[j];
                let mhat = mv[j] / bc1;
                let vhat = vv[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + tc.eps);
            }
        }
    }
}

/// Shrinks the learning rate by `factor` when validation loss strictly
/// worsened relative to the previous epoch.
pub fn plateau_schedule(prev_val_loss: f64, curr_val_loss: f64, lr: f64, factor: f64) -> f64 {
    if curr_val_loss > prev_val_loss {
        lr * factor
    } else {
        lr
    }
}

/// One line of the per-epoch training log.
#[derive(Clone, Copy, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_miou: f64,
    pub lr: f64,
}

/// Training outcome: the log, the best-validation parameters, and the
/// final parameters.
pub struct TrainResult {
    pub log: Vec<EpochRecord>,
    pub best: ParamStore,
    pub best_epoch: usize,
}

/// Renders the log as the fixed-column CSV contract.
pub fn log_to_csv(log: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,val_miou,lr\n");
    for r in log {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6e}\n",
            r.epoch, r.train_loss, r.val_loss, r.val_miou, r.lr
        ));
    }
    s
}

/// Full training loop: deterministic shuffling, forward/backward over the
/// tape, AdamW updates, per-epoch validation (loss and mean IoU of the
/// final head at the configured threshold), plateau LR decay, best-epoch
/// tracking. Aborts with diagnostics if the loss goes non-finite.
pub fn train_loop(
    cfg: &ModelConfig,
    store: &mut ParamStore,
    train: &[Sample],
    val: &[Sample],
    tc: &TrainConfig,
) -> Result<TrainResult> {
    tc.validate()?;
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArg(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let mut state = AdamState::new(store);
    let mut lr = tc.lr;
    let mut step: u64 = 0;
    let mut log = Vec::with_capacity(tc.epochs);
    let mut best: Option<(f64, ParamStore, usize)> = None;
    let mut prev_val_loss: Option<f64> = None;

    for epoch in 1..=tc.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ (epoch as u64).wrapping_mul(0x9E37));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(tc.batch).enumerate() {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let (xb, yb) = stack_samples(&samples)?;
            let mut tape = Tape::new();
            let x = tape.input(xb);
            let y = tape.input(yb);
            let opts = ForwardOpts {
                mode: Mode::Train,
                dropout_seed: tc
                    .seed
                    .wrapping_mul(0x100_0193)
                    .wrapping_add((epoch as u64) << 24)
                    .wrapping_add(batch_idx as u64),
                ablate_skip: None,
            };
            let (y_early, y_final) = forward(&mut tape, store, cfg, x, &opts)?;
            let l_final = tape.bce_with_logits(y_final, y, tc.pos_weight)?;
            let l_early = tape.bce_with_logits(y_early, y, tc.pos_weight)?;
            let loss = tape.add_scaled(l_final, l_early, tc.alpha)?;
            let loss_val = tape.value(loss).get(0, 0, 0, 0, 0);
            if !loss_val.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, batch {batch_idx} (lr {lr:.3e})"
                )));
            }
            loss_sum += loss_val * chunk.len() as f64;

            store.zero_grads();
            tape.backward(loss, store)?;
            step += 1;
            adamw_step(store, &mut state, tc, lr, step)?;
        }
        let train_loss = loss_sum / train.len() as f64;

        let (val_loss, val_miou) = evaluate(cfg, store, val, tc)?;
        if let Some(prev) = prev_val_loss {
            lr = plateau_schedule(prev, val_loss, lr, tc.plateau_factor);
        }
        prev_val_loss = Some(val_loss);

        log.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_miou,
            lr,
        });
        if best.as_ref().map_or(true, |(b, _, _)| val_loss < *b) {
            best = Some((val_loss, store.clone(), epoch));
        }
    }
    let (_, best_store, best_epoch) = best.expect("at least one epoch ran");
    Ok(TrainResult {
        log,
        best: best_store,
        best_epoch,
    })
}

/// Mean total loss and mean per-sample IoU (final head, configured
/// threshold) over a dataset, eval mode.
pub fn evaluate(
    cfg: &ModelConfig,
    store: &ParamStore,
    data: &[Sample],
    tc: &TrainConfig,
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut records = Vec::with_capacity(data.len());
    for sample in data {
        let (y_early, y_final) = crate::model::predict(store, cfg, &sample.x)?;
        loss_sum += total_loss(&y_final, &y_early, &sample.y, tc)?;
        records.push(binarize_and_score(&y_final, &sample.y, tc.threshold)?);
    }
    Ok((loss_sum / data.len() as f64, miou(&records)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Dtype, Shape5};

    fn sh(n: usize, c: usize, t: usize, h: usize, w: usize) -> Shape5 {
        Shape5::new(n, c, t, h, w).unwrap()
    }

    fn scalar(v: f64) -> Tensor5 {
        Tensor5::full(sh(1, 1, 1, 1, 1), Dtype::F64, v).unwrap()
    }

    #[test]
    fn bce_hand_cases() {
        // y = 1, sigma(z) = 0.9  ->  -ln 0.9
        let z = scalar((0.9f64 / 0.1).ln());
        let y = scalar(1.0);
        let loss = bce_loss(&z, &y, 1.0).unwrap();
        assert!((loss - 0.10536).abs() < 1e-5, "{loss}");

        // y = 1, z = 0, pos_weight 4  ->  4 ln 2
        let loss = bce_loss(&scalar(0.0), &y, 4.0).unwrap();
        assert!((loss - 4.0 * std::f64::consts::LN_2).abs() < 1e-9);

        // saturated logits with matching targets: tiny loss, no NaN/Inf
        let l1 = bce_loss(&scalar(50.0), &scalar(1.0), 1.0).unwrap();
        let l0 = bce_loss(&scalar(-50.0), &scalar(0.0), 1.0).unwrap();
        assert!(l1 < 1e-20 && l0 < 1e-20);
        assert!(l1.is_finite() && l0.is_finite());
    }

    #[test]
    fn bce_rejects_non_binary_targets() {
        let z = scalar(0.0);
        assert!(bce_loss(&z, &scalar(0.5), 1.0).is_err());
    }

    #[test]
    fn bce_matches_naive_formula() {
        // naive direct evaluation with clamped probabilities
        let shape = sh(1, 1, 4, 3, 3);
        let z = Tensor5::uniform(shape, Dtype::F64, 8.0, 5);
        let y = Tensor5::from_fn(shape, Dtype::F64, |i| ((i % 3) == 1) as u64 as f64).unwrap();
        let got = bce_loss(&z, &y, 1.0).unwrap();
        let zv = z.to_f64_vec();
        let yv = y.to_f64_vec();
        let naive: f64 = zv
            .iter()
            .zip(&yv)
            .map(|(&zi, &yi)| {
                let p = (1.0 / (1.0 + (-zi).exp())).clamp(1e-12, 1.0 - 1e-12);
                -(yi * p.ln() + (1.0 - yi) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / zv.len() as f64;
        assert!((got - naive).abs() < 1e-6, "{got} vs {naive}");
    }

    #[test]
    fn total_loss_cases() {
        let y = scalar(1.0);
        let z = scalar(2.0);
        let tc0 = TrainConfig {
            alpha: 0.0,
            pos_weight: 1.0,
            ..TrainConfig::default()
        };
        let t0 = total_loss(&z, &scalar(-1.0), &y, &tc0).unwrap();
        assert_eq!(t0, bce_loss(&z, &y, 1.0).unwrap());

        let tc = TrainConfig {
            alpha: 0.2,
            pos_weight: 1.0,
            ..TrainConfig::default()
        };
        let same = total_loss(&z, &z, &y, &tc).unwrap();
        assert!((same - 1.2 * bce_loss(&z, &y, 1.0).unwrap()).abs() < 1e-12);

        // monotone in alpha for positive early loss
        let mut last = 0.0;
        for a in [0.0, 0.1, 0.5, 1.0] {
            let tc = TrainConfig {
                alpha: a,
                pos_weight: 1.0,
                ..TrainConfig::default()
            };
            let v = total_loss(&z, &scalar(-3.0), &y, &tc).unwrap();
            assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn adamw_hand_step() {
        // single scalar parameter: w=1, g=1, lr=0.1, wd=0 -> w' ~ 0.9
        let mut store = ParamStore::new();
        store.register("w", scalar(1.0)).unwrap();
        store.accumulate_grad(0, &scalar(1.0)).unwrap();
        let tc = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut state = AdamState::new(&store);
        adamw_step(&mut store, &mut state, &tc, 0.1, 1).unwrap();
        let w = store.value(0).get(0, 0, 0, 0, 0);
        assert!((w - 0.9).abs() < 1e-7, "{w}");
    }

    #[test]
    fn adamw_zero_grad_and_decay_cases() {
        // g = 0, wd = 0: parameter unchanged
        let mut store = ParamStore::new();
        store.register("w", scalar(0.7)).unwrap();
        let tc = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut state = AdamState::new(&store);
        adamw_step(&mut store, &mut state, &tc, 1e-4, 1).unwrap();
        assert_eq!(store.value(0).get(0, 0, 0, 0, 0), 0.7);

        // wd = 0.1, g = 0, lr = 1e-4: pure decoupled decay by (1 - 1e-5)
        let mut store = ParamStore::new();
        store.register("w", scalar(1.0)).unwrap();
        let tc = TrainConfig::default();
        let mut state = AdamState::new(&store);
        adamw_step(&mut store, &mut state, &tc, 1e-4, 1).unwrap();
        let w = store.value(0).get(0, 0, 0, 0, 0);
        assert!((w - (1.0 - 1e-5)).abs() < 1e-12, "{w}");
    }

    #[test]
    fn adamw_step_regression_rejected() {
        let mut store = ParamStore::new();
        store.register("w", scalar(1.0)).unwrap();
        let tc = TrainConfig::default();
        let mut state = AdamState::new(&store);
        adamw_step(&mut store, &mut state, &tc, 1e-4, 3).unwrap();
        assert!(adamw_step(&mut store, &mut state, &tc, 1e-4, 3).is_err());
        assert!(adamw_step(&mut store, &mut state, &tc, 1e-4, 2).is_err());
        assert!(adamw_step(&mut store, &mut state, &tc, 1e-4, 4).is_ok());
    }

    /// Reference Adam (no weight decay), direct transcription of the
    /// update equations, f64.
    struct RefAdam {
        m: Vec<f64>,
        v: Vec<f64>,
    }

    impl RefAdam {
        fn step(
            &mut self,
            p: &mut [f64],
            g: &[f64],
            lr: f64,
            b1: f64,
            b2: f64,
            eps: f64,
            t: u64,
        ) {
            for i in 0..p.len() {
                self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
                self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = self.m[i] / (1.0 - b1.powi(t as i32));
                let vhat = self.v[i] / (1.0 - b2.powi(t as i32));
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    #[test]
    fn adamw_with_zero_decay_matches_reference_adam() {
        let shape = sh(1, 2, 1, 3, 3);
        let tc = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut store = ParamStore::new();
        store
            .register("p", Tensor5::uniform(shape, Dtype::F64, 1.0, 3))
            .unwrap();
        let mut state = AdamState::new(&store);
        let mut refp = store.value(0).to_f64_vec();
        let mut ra = RefAdam {
            m: vec![0.0; refp.len()],
            v: vec![0.0; refp.len()],
        };
        for t in 1..=25u64 {
            let g = Tensor5::uniform(shape, Dtype::F64, 1.0, 100 + t);
            store.zero_grads();
            store.accumulate_grad(0, &g).unwrap();
            adamw_step(&mut store, &mut state, &tc, 3e-3, t).unwrap();
            ra.step(
                &mut refp,
                &g.to_f64_vec(),
                3e-3,
                tc.beta1,
                tc.beta2,
                tc.eps,
                t,
            );
        }
        let got = store.value(0).to_f64_vec();
        for (a, b) in got.iter().zip(&refp) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn plateau_rule() {
        assert!((plateau_schedule(0.5, 0.6, 1e-4, 0.9) - 9e-5).abs() < 1e-20);
        assert_eq!(plateau_schedule(0.5, 0.4, 1e-4, 0.9), 1e-4);
        assert_eq!(plateau_schedule(0.5, 0.5, 1e-4, 0.9), 1e-4);
    }
}
