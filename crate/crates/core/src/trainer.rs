//! Deterministic training loop: AdamW with decoupled decay, cosine schedule
//! with linear warmup, global-norm gradient clipping, per-epoch validation,
//! and best-checkpoint retention.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TensorRecord, CKPT_VERSION};
use crate::crossmodal::Variant;
use crate::data::{make_batches, make_eval_batch, DataBundle, Split};
use crate::fusion::{rec_loss_bpr, rec_loss_ce, sample_negatives, total_loss, LossKind};
use crate::iicm::{alignment_loss, iicm_loss, SteinConfig};
use crate::metrics::{self, MetricsError};
use crate::model::{FindRecModel, ModelConfig};
use crate::params::{Mode, ParamSet};
use crate::tensor::{Tape, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("numerical failure at step {step}: {source}")]
    Numerical { step: u64, source: TensorError },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub loss: LossKind,
    /// Negatives per positive for the pairwise loss.
    pub n_neg: usize,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_peak: 1e-3,
            weight_decay: 0.01,
            batch_size: 128,
            epochs: 100,
            warmup_steps: 2000,
            clip_norm: 1.0,
            loss: LossKind::CrossEntropy,
            n_neg: 1,
            variant: Variant::Full,
            seed: 0,
        }
    }
}

/// First/second moment buffers plus the shared step counter.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &ParamSet) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        OptimState { m, v, step: 0 }
    }
}

/// Linear warmup to the peak, then cosine decay to zero at `total_steps`.
pub fn lr_schedule(step: u64, warmup: u64, total_steps: u64, lr_peak: f64) -> f64 {
    if warmup > 0 && step < warmup {
        return lr_peak * step as f64 / warmup as f64;
    }
    if total_steps <= warmup {
        return lr_peak;
    }
    let progress = ((step - warmup) as f64 / (total_steps - warmup) as f64).min(1.0);
    lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scale all gradients so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_gradients(params: &mut ParamSet, max_norm: f64) -> f64 {
    debug_assert!(max_norm > 0.0);
    let norm_sq: f64 = params
        .iter()
        .flat_map(|p| p.grad.data.iter())
        .map(|&g| g * g)
        .sum();
    let norm = norm_sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            p.grad.data.iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

/// One AdamW update: decoupled decay `theta *= 1 - lr wd` first, then the
/// bias-corrected Adam step. The frozen embedding padding row is exempt from
/// both.
pub fn adamw_step(
    params: &mut ParamSet,
    state: &mut OptimState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) -> Result<(), TensorError> {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = betas;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (idx, p) in params.iter_mut().enumerate() {
        if !p.grad.is_finite() {
            return Err(TensorError::Numerical {
                op: "adamw_step",
                details: format!("non-finite gradient in {}", p.name),
            });
        }
        let skip = if p.pad_row_frozen { p.row_len() } else { 0 };
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for i in skip..p.value.numel() {
            let g = p.grad.data[i];
            p.value.data[i] *= 1.0 - lr * weight_decay;
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p.value.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// One line of the JSON-lines run log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunLogEntry {
    pub step: u64,
    pub lr: f64,
    pub l_rec: f64,
    #[serde(rename = "l_align_rawEK")]
    pub l_align_raw_ek: Option<f64>,
    pub l_ent: Option<f64>,
    pub grad_norm: f64,
}

/// Everything the config needs to rebuild the exact model from a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub stein: SteinConfig,
    pub n_items: usize,
    pub d_txt: usize,
    pub d_img: usize,
}

pub struct TrainResult {
    /// Best checkpoint by validation NDCG@10.
    pub best: Checkpoint,
    pub best_valid_ndcg10: f64,
    pub run_log: Vec<RunLogEntry>,
    /// Model state after the final step (not necessarily the best).
    pub model: FindRecModel,
}

fn snapshot(model: &FindRecModel, opt: &OptimState, meta_json: &str, seed: u64) -> Checkpoint {
    let tensors = model
        .params
        .iter()
        .map(|p| TensorRecord { name: p.name.clone(), shape: p.value.shape.clone(), data: p.value.data.clone() })
        .collect();
    let mut opt_records: Vec<TensorRecord> = Vec::with_capacity(2 * model.params.len() + 1);
    for (i, p) in model.params.iter().enumerate() {
        opt_records.push(TensorRecord {
            name: format!("opt.m.{}", p.name),
            shape: p.value.shape.clone(),
            data: opt.m[i].clone(),
        });
        opt_records.push(TensorRecord {
            name: format!("opt.v.{}", p.name),
            shape: p.value.shape.clone(),
            data: opt.v[i].clone(),
        });
    }
    opt_records.push(TensorRecord { name: "opt.step".into(), shape: vec![1], data: vec![opt.step as f64] });
    Checkpoint {
        version: CKPT_VERSION,
        config_json: meta_json.to_string(),
        tensors,
        opt: opt_records,
        rng_state: ChaCha20Rng::seed_from_u64(seed).get_seed(),
    }
}

/// Rebuild a model from a checkpoint (parameters overwritten by name).
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<FindRecModel, TrainError> {
    let meta: CheckpointMeta = serde_json::from_str(&ckpt.config_json).map_err(|e| {
        TrainError::Tensor(TensorError::Graph(format!("checkpoint config does not parse: {e}")))
    })?;
    let mut model = FindRecModel::init(
        &meta.model,
        meta.n_items,
        meta.d_txt,
        meta.d_img,
        meta.train.variant,
        meta.train.seed,
    )?;
    for rec in &ckpt.tensors {
        let p = model.params.iter_mut().find(|p| p.name == rec.name).ok_or_else(|| {
            TrainError::Tensor(TensorError::Graph(format!("unknown parameter {}", rec.name)))
        })?;
        if p.value.shape != rec.shape {
            return Err(TrainError::Tensor(TensorError::ShapeMismatch {
                op: "load_checkpoint",
                details: format!("{}: {:?} vs {:?}", rec.name, p.value.shape, rec.shape),
            }));
        }
        p.value.data.copy_from_slice(&rec.data);
    }
    Ok(model)
}

/// Train on the bundle's leave-one-out train split, validating per epoch.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    stein_cfg: &SteinConfig,
    bundle: &DataBundle,
) -> Result<TrainResult, TrainError> {
    let (train_split, valid_split, _) = crate::data::leave_one_out_split(&bundle.dataset);
    let mut model = FindRecModel::init(
        model_cfg,
        bundle.dataset.n_items(),
        bundle.text.dim,
        bundle.image.dim,
        train_cfg.variant,
        train_cfg.seed,
    )?;
    let lambda_eff = if train_cfg.variant == Variant::NoIicm { 0.0 } else { stein_cfg.lambda };

    let steps_per_epoch = train_split.examples.len().div_ceil(train_cfg.batch_size).max(1);
    let total_steps = (train_cfg.epochs * steps_per_epoch) as u64;
    let meta = CheckpointMeta {
        model: *model_cfg,
        train: *train_cfg,
        stein: *stein_cfg,
        n_items: bundle.dataset.n_items(),
        d_txt: bundle.text.dim,
        d_img: bundle.image.dim,
    };
    let meta_json = serde_json::to_string(&meta).expect("meta serializes");

    let mut opt = OptimState::new(&model.params);
    let mut run_log = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut step: u64 = 0;

    for epoch in 0..train_cfg.epochs {
        let batches = make_batches(
            bundle,
            &train_split,
            train_cfg.batch_size,
            model_cfg.max_len,
            train_cfg.seed.wrapping_add(epoch as u64),
        );
        for batch in &batches {
            let mut tape = Tape::new();
            let bind = model.params.bind(&mut tape)?;
            let mode = Mode::Train { seed: train_cfg.seed, step, dropout: model_cfg.dropout };
            let fail = |source: TensorError| TrainError::Numerical { step, source };

            let out = model.forward(&mut tape, &bind, batch, mode).map_err(fail)?;
            let l_rec = match train_cfg.loss {
                LossKind::CrossEntropy => rec_loss_ce(&mut tape, out.logits, &batch.target).map_err(fail)?,
                LossKind::Bpr => {
                    let mut neg_rng =
                        ChaCha20Rng::seed_from_u64(train_cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(step));
                    let negs = sample_negatives(&batch.target, model.n_items, train_cfg.n_neg, &mut neg_rng);
                    rec_loss_bpr(&mut tape, out.logits, &batch.target, &negs).map_err(fail)?
                }
            };
            let l_rec_val = tape.scalar_value(l_rec);

            let (loss, raw_ek, l_ent) = if lambda_eff > 0.0 {
                let ii = iicm_loss(&mut tape, out.z_img_last, out.z_txt_last, stein_cfg).map_err(fail)?;
                let t = total_loss(&mut tape, l_rec, ii.loss, lambda_eff).map_err(fail)?;
                (t, Some(ii.raw_ek), ii.l_ent)
            } else {
                (l_rec, None, None)
            };

            let store = tape.backward(loss).map_err(fail)?;
            model.params.zero_grads();
            model.params.accumulate_grads(&bind, &store);
            let grad_norm = clip_gradients(&mut model.params, train_cfg.clip_norm);
            let lr = lr_schedule(step, train_cfg.warmup_steps as u64, total_steps, train_cfg.lr_peak);
            adamw_step(&mut model.params, &mut opt, lr, (0.9, 0.999), 1e-8, train_cfg.weight_decay)
                .map_err(fail)?;

            run_log.push(RunLogEntry {
                step,
                lr,
                l_rec: l_rec_val,
                l_align_raw_ek: raw_ek,
                l_ent,
                grad_norm,
            });
            step += 1;
        }

        let report = metrics::evaluate(&model, bundle, &valid_split, true, train_cfg.batch_size)?;
        let ndcg10 = report.overall.ndcg10.unwrap_or(0.0);
        if best.as_ref().map_or(true, |(b, _)| ndcg10 > *b) {
            best = Some((ndcg10, snapshot(&model, &opt, &meta_json, train_cfg.seed)));
        }
    }

    let (best_valid_ndcg10, best) =
        best.unwrap_or_else(|| (0.0, snapshot(&model, &opt, &meta_json, train_cfg.seed)));
    Ok(TrainResult { best, best_valid_ndcg10, run_log, model })
}

/// Eval-mode mean kernel value E[K] between the modality summaries over a
/// split, for before/after comparisons of the alignment effect.
pub fn mean_alignment_ek(
    model: &FindRecModel,
    bundle: &DataBundle,
    split: &Split,
    batch_size: usize,
) -> Result<f64, TensorError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in split.examples.chunks(batch_size.max(1)) {
        let sub = Split { examples: chunk.to_vec() };
        let batch = make_eval_batch(bundle, &sub, model.cfg.max_len);
        let mut tape = Tape::new();
        let bind = model.params.bind(&mut tape)?;
        let out = model.forward(&mut tape, &bind, &batch, Mode::Eval)?;
        let (_, raw_ek) = alignment_loss(&mut tape, out.z_img_last, out.z_txt_last)?;
        total += raw_ek * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Serialize the run log as JSON lines.
pub fn run_log_to_string(log: &[RunLogEntry]) -> String {
    let mut out = String::new();
    for entry in log {
        out.push_str(&serde_json::to_string(entry).expect("log entry serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params;
    use crate::tensor::Parameter;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        assert_eq!(lr_schedule(0, 100, 1000, 1e-3), 0.0);
        assert_eq!(lr_schedule(100, 100, 1000, 1e-3), 1e-3);
        // halfway through decay: cos(pi/2) = 0 -> half the peak
        let mid = lr_schedule(550, 100, 1000, 1e-3);
        assert!((mid - 0.5e-3).abs() < 1e-12);
        assert_eq!(lr_schedule(1000, 100, 1000, 1e-3), 0.0);
        // past the end stays clamped at zero
        assert!(lr_schedule(2000, 100, 1000, 1e-3).abs() < 1e-18);
    }

    fn two_param_set(grads: &[f64]) -> ParamSet {
        let mut set = ParamSet::new();
        let a = set.add(Parameter::new("a", params::full(&[2], 1.0)));
        let b = set.add(Parameter::new("b", params::full(&[2], 1.0)));
        set.get_mut(a).grad.data.copy_from_slice(&grads[..2]);
        set.get_mut(b).grad.data.copy_from_slice(&grads[2..]);
        set
    }

    #[test]
    fn clipping_rescales_only_above_the_threshold() {
        let mut set = two_param_set(&[0.3, 0.0, 0.4, 0.0]); // norm 0.5
        let norm = clip_gradients(&mut set, 1.0);
        assert!((norm - 0.5).abs() < 1e-15);
        assert_eq!(set.by_name("a").unwrap().grad.data[0], 0.3, "below max: untouched");

        let mut set = two_param_set(&[2.0, 0.0, 0.0, 0.0]); // norm 2
        let norm = clip_gradients(&mut set, 1.0);
        assert!((norm - 2.0).abs() < 1e-15);
        let new_norm: f64 = set
            .iter()
            .flat_map(|p| p.grad.data.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        assert!((new_norm - 1.0).abs() <= 1e-12, "post-clip norm exactly the max");

        let mut set = two_param_set(&[0.0; 4]);
        assert_eq!(clip_gradients(&mut set, 1.0), 0.0);
    }

    #[test]
    fn adamw_decay_only_closed_form() {
        // zero grads: theta' = theta (1 - lr wd), moments stay zero
        let mut set = two_param_set(&[0.0; 4]);
        let mut opt = OptimState::new(&set);
        adamw_step(&mut set, &mut opt, 1e-3, (0.9, 0.999), 1e-8, 0.01).unwrap();
        for p in set.iter() {
            for &v in &p.value.data {
                assert!((v - (1.0 - 1e-5)).abs() < 1e-15);
            }
        }
        assert!(opt.m.iter().flatten().all(|&m| m == 0.0));
    }

    #[test]
    fn adamw_first_step_bias_correction() {
        // at t = 1 with wd = 0: m_hat = g, v_hat = g^2,
        // update = -lr g / (|g| + eps) ~ -lr sign(g)
        let mut set = two_param_set(&[0.5, -0.5, 0.25, 0.0]);
        let mut opt = OptimState::new(&set);
        adamw_step(&mut set, &mut opt, 1e-2, (0.9, 0.999), 1e-8, 0.0).unwrap();
        let a = &set.by_name("a").unwrap().value.data;
        assert!((a[0] - (1.0 - 1e-2 * 0.5 / (0.5 + 1e-8))).abs() < 1e-12);
        assert!((a[1] - (1.0 + 1e-2 * 0.5 / (0.5 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn adamw_rejects_nonfinite_grads() {
        let mut set = two_param_set(&[f64::NAN, 0.0, 0.0, 0.0]);
        let mut opt = OptimState::new(&set);
        assert!(matches!(
            adamw_step(&mut set, &mut opt, 1e-3, (0.9, 0.999), 1e-8, 0.0),
            Err(TensorError::Numerical { .. })
        ));
    }

    #[test]
    fn frozen_pad_row_is_exempt_from_decay_and_update() {
        let mut set = ParamSet::new();
        let id = set.add(Parameter::frozen_pad_row("emb", params::full(&[3, 2], 1.0)));
        // row 0 frozen at 1.0 here to make any incorrect touch visible
        set.get_mut(id).grad.data.copy_from_slice(&[9.0, 9.0, 0.1, 0.1, 0.1, 0.1]);
        let mut opt = OptimState::new(&set);
        adamw_step(&mut set, &mut opt, 1e-2, (0.9, 0.999), 1e-8, 0.5).unwrap();
        let v = &set.get(id).value.data;
        assert_eq!(&v[..2], &[1.0, 1.0], "padding row untouched");
        assert!(v[2] < 1.0);
    }
}
