//! The optimization loop: clipped AdamW (default) or Lamb with a
//! lookahead outer loop, annealed loss weighting, slice batching,
//! validation-based checkpointing and early stopping.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{slice_batches, DataError, Split, TabularDataset};
use crate::model::{
    embed_batch, encode, predict, AttrKind, EmbeddedBatch, ModelConfig, ModelError, SchemaSpec,
    SpinModel, SpinParams, Value,
};
use crate::numerics::{Graph, Scalar, Tensor};
use crate::objective::{
    attribute_loss, label_loss, lambda_at, sample_masks, MaskRates, Schedule,
};
use crate::serialize::{fnv1a64, write_blob, read_blob, BlobHeader, CHECKPOINT_MAGIC, FORMAT_VERSION};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("diverged: {0}")]
    Diverged(String),
    #[error("{0}")]
    Invalid(String),
}

impl From<crate::numerics::NumericsError> for TrainError {
    fn from(e: crate::numerics::NumericsError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    AdamW,
    LambLookahead,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip threshold.
    pub clip: f64,
    /// Slow-weight sync interval (lookahead only).
    pub lookahead_k: usize,
    /// Slow-weight interpolation factor (lookahead only).
    pub lookahead_alpha: f64,
    /// Upper bound on the Lamb trust ratio.
    pub trust_clamp: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::AdamW,
            lr: 1e-3,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 1.0,
            lookahead_k: 5,
            lookahead_alpha: 0.5,
            trust_clamp: 10.0,
        }
    }
}

/// Moment accumulators plus the lookahead slow weights.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub slow: Option<Vec<Tensor<T>>>,
    pub step: usize,
    pub consecutive_skips: usize,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &[Tensor<T>], cfg: &OptimizerConfig) -> Self {
        OptimizerState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            slow: (cfg.kind == OptimizerKind::LambLookahead)
                .then(|| params.to_vec()),
            step: 0,
            consecutive_skips: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Applied { grad_norm: f64 },
    Skipped { consecutive: usize },
}

/// Scale all gradients in place so their global L2 norm is at most `max`.
/// Returns the pre-clip norm; never increases it.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter() {
        for &x in g.data() {
            let x = x.to_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max {
        let s = T::from_f64(max / norm);
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// One clipped update. Non-finite gradients skip the step; three skips in
/// a row abort.
pub fn opt_step<T: Scalar>(
    cfg: &OptimizerConfig,
    state: &mut OptimizerState<T>,
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
) -> Result<StepOutcome> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::Invalid(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(TrainError::Invalid(format!(
                "gradient shape {:?} does not match parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    if grads.iter().any(|g| !g.all_finite()) {
        state.consecutive_skips += 1;
        log::warn!(
            "non-finite gradients; skipping step ({} consecutive)",
            state.consecutive_skips
        );
        if state.consecutive_skips >= 3 {
            return Err(TrainError::Diverged(
                "3 consecutive non-finite gradient batches".into(),
            ));
        }
        return Ok(StepOutcome::Skipped {
            consecutive: state.consecutive_skips,
        });
    }
    state.consecutive_skips = 0;

    let mut grads = grads.to_vec();
    let grad_norm = clip_global_norm(&mut grads, cfg.clip);
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);

    for i in 0..params.len() {
        let p = params[i].data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = grads[i].data();
        let mut update = vec![0.0f64; p.len()];
        for j in 0..p.len() {
            let gj = g[j].to_f64();
            let mj = cfg.beta1 * m[j].to_f64() + (1.0 - cfg.beta1) * gj;
            let vj = cfg.beta2 * v[j].to_f64() + (1.0 - cfg.beta2) * gj * gj;
            m[j] = T::from_f64(mj);
            v[j] = T::from_f64(vj);
            update[j] = (mj / bc1) / ((vj / bc2).sqrt() + cfg.eps)
                + cfg.weight_decay * p[j].to_f64();
        }
        let scale = match cfg.kind {
            OptimizerKind::AdamW => cfg.lr,
            OptimizerKind::LambLookahead => {
                let wn = p.iter().map(|x| x.to_f64() * x.to_f64()).sum::<f64>().sqrt();
                let un = update.iter().map(|x| x * x).sum::<f64>().sqrt();
                let trust = if wn > 0.0 && un > 0.0 {
                    (wn / un).min(cfg.trust_clamp)
                } else {
                    1.0
                };
                cfg.lr * trust
            }
        };
        for j in 0..p.len() {
            p[j] = T::from_f64(p[j].to_f64() - scale * update[j]);
        }
    }

    if let Some(slow) = &mut state.slow {
        if state.step % cfg.lookahead_k == 0 {
            for (s, p) in slow.iter_mut().zip(params.iter_mut()) {
                for (sj, pj) in s.data_mut().iter_mut().zip(p.data_mut()) {
                    let interp =
                        sj.to_f64() + cfg.lookahead_alpha * (pj.to_f64() - sj.to_f64());
                    *sj = T::from_f64(interp);
                    *pj = *sj;
                }
            }
        }
    }
    Ok(StepOutcome::Applied { grad_norm })
}

/// Everything a run needs: model hyperparameters, optimizer, batching,
/// masking, annealing, stopping. Serializes as the run-manifest JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub slice_size: usize,
    pub mask_rates: MaskRates,
    pub schedule: Schedule,
    pub lambda_floor: f64,
    pub patience: usize,
    pub seed: u64,
}

impl RunConfig {
    pub fn new(model: ModelConfig) -> Self {
        RunConfig {
            model,
            optimizer: OptimizerConfig::default(),
            epochs: 100,
            slice_size: 256,
            mask_rates: MaskRates::default(),
            schedule: Schedule::Linear,
            lambda_floor: 0.1,
            patience: 30,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss_labels: f64,
    pub train_loss_attributes: f64,
    pub lambda: f64,
    pub val_loss_labels: f64,
    /// Label accuracy for categorical targets, negated label loss
    /// otherwise; higher is better either way.
    pub val_metric: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRun {
    pub config: RunConfig,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub steps_taken: usize,
}

fn mix_seed(seed: u64, tag: &str, n: usize) -> u64 {
    let mut buf = seed.to_le_bytes().to_vec();
    buf.extend_from_slice(tag.as_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    fnv1a64(&buf)
}

fn flat_params<T: Scalar>(p: &SpinParams<T>) -> Vec<Tensor<T>> {
    let mut out = Vec::new();
    p.for_each(&mut |_, t| out.push(t.clone()));
    out
}

fn set_flat_params<T: Scalar>(p: &mut SpinParams<T>, flat: &[Tensor<T>]) {
    let mut i = 0;
    p.for_each_mut(&mut |_, t| {
        *t = flat[i].clone();
        i += 1;
    });
    assert_eq!(i, flat.len());
}

/// Build the batch for a set of rows: `extra_mask` is OR-ed with the
/// missing-value mask, and missing positions are excluded from
/// `supervisable` so placeholder values are never supervised.
fn build_batch<T: Scalar>(
    ds: &TabularDataset,
    idx: &[usize],
    extra_mask: &[bool],
) -> Result<(EmbeddedBatch<T>, Vec<bool>)> {
    let (values, missing) = ds.gather(idx);
    let mask: Vec<bool> = extra_mask
        .iter()
        .zip(&missing)
        .map(|(&e, &m)| e || m)
        .collect();
    let batch = EmbeddedBatch::new(&ds.schema, &values, &mask)?;
    let supervisable = missing.iter().map(|&m| !m).collect();
    Ok((batch, supervisable))
}

fn target_mask(schema: &SchemaSpec, rows: usize) -> Vec<bool> {
    let targets = schema.target_indices();
    let d = schema.d();
    let mut mask = vec![false; rows * d];
    for r in 0..rows {
        for &a in &targets {
            mask[r * d + a] = true;
        }
    }
    mask
}

/// Evaluate label prediction on `eval_idx` rows against an encoding of
/// `context_idx` rows. Returns (mean label loss, task metric).
pub fn eval_split<T: Scalar>(
    model: &SpinModel<T>,
    ds: &TabularDataset,
    context_idx: &[usize],
    eval_idx: &[usize],
) -> Result<(f64, f64)> {
    let schema = &ds.schema;
    let (ctx_batch, _) = build_batch::<T>(ds, context_idx, &vec![false; context_idx.len() * schema.d()])?;
    let enc = model.encode_dataset(&ctx_batch)?;
    let label_mask = target_mask(schema, eval_idx.len());
    let (q_batch, _) = build_batch::<T>(ds, eval_idx, &label_mask)?;
    let outs = model.predict_with(&enc.h_d, &q_batch)?;
    let mut loss = 0.0;
    let mut positions = 0usize;
    let mut correct = 0usize;
    let mut cat_positions = 0usize;
    for (local, &row) in eval_idx.iter().enumerate() {
        for (a, spec) in schema.attributes.iter().enumerate() {
            if spec.role != crate::model::Role::Target {
                continue;
            }
            let gold = ds.rows[row][a].ok_or_else(|| {
                TrainError::Invalid(format!("row {row} is missing target {:?}", spec.name))
            })?;
            match (gold, spec.kind) {
                (Value::Cat(gold), AttrKind::Categorical { vocab }) => {
                    let logits: Vec<f64> =
                        (0..vocab).map(|k| outs[a].at2(local, k).to_f64()).collect();
                    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max
                        + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
                    loss += lse - logits[gold];
                    let argmax = logits
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0;
                    correct += usize::from(argmax == gold);
                    cat_positions += 1;
                }
                (Value::Cont(gold), AttrKind::Continuous) => {
                    let pred = outs[a].at2(local, 0).to_f64();
                    loss += (pred - gold) * (pred - gold);
                }
                _ => unreachable!("batch construction validated kinds"),
            }
            positions += 1;
        }
    }
    let mean_loss = loss / positions as f64;
    let metric = if cat_positions > 0 {
        correct as f64 / cat_positions as f64
    } else {
        -mean_loss
    };
    Ok((mean_loss, metric))
}

struct TrainState<T> {
    params: SpinParams<T>,
    opt: OptimizerState<T>,
    start_epoch: usize,
}

fn run_loop<T: Scalar>(
    ds: &TabularDataset,
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    init: Option<TrainState<T>>,
) -> Result<(SpinModel<T>, TrainRun)> {
    ds.schema.validate()?;
    cfg.model.validate(&ds.schema)?;
    let train_idx = ds.indices_of(Split::Train);
    let val_idx = ds.indices_of(Split::Val);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(TrainError::Invalid(format!(
            "need non-empty train and val splits, got {}/{}",
            train_idx.len(),
            val_idx.len()
        )));
    }

    let per_epoch = slice_batches(
        &train_idx,
        cfg.slice_size.min(train_idx.len()),
        cfg.mask_rates.p_label,
        0,
    )?
    .len();
    let total_steps = cfg.epochs * per_epoch;

    let (mut params, mut opt, start_epoch) = match init {
        Some(s) => (s.params, s.opt, s.start_epoch),
        None => {
            let params = SpinParams::init(&ds.schema, &cfg.model, cfg.seed)?;
            let flat = flat_params(&params);
            let opt = OptimizerState::new(&flat, &cfg.optimizer);
            (params, opt, 0)
        }
    };

    let mut history = Vec::new();
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut best_params = params.clone();
    let mut since_best = 0usize;
    let d = ds.schema.d();

    for epoch in start_epoch..cfg.epochs {
        let slices = slice_batches(
            &train_idx,
            cfg.slice_size.min(train_idx.len()),
            cfg.mask_rates.p_label,
            mix_seed(cfg.seed, "slices", epoch),
        )?;
        let mut epoch_ll = 0.0;
        let mut epoch_al = 0.0;
        let mut epoch_lambda = 0.0;
        let mut applied = 0usize;

        for slice in &slices {
            let step = opt.step;
            let step_seed = mix_seed(cfg.seed, "mask", epoch * per_epoch + applied);
            // context rows keep labels visible; query rows hide them and
            // additionally get denoising masks on their inputs
            let nq = slice.query.len();
            let mut plan = sample_masks(&ds.schema, nq, cfg.mask_rates, step_seed);
            plan.label_masked = target_mask(&ds.schema, nq);

            let (ctx_batch, _) =
                build_batch::<T>(ds, &slice.context, &vec![false; slice.context.len() * d])?;
            let merged: Vec<bool> = plan
                .label_masked
                .iter()
                .zip(&plan.attr_masked)
                .map(|(&l, &a)| l || a)
                .collect();
            let (q_batch, supervisable) = build_batch::<T>(ds, &slice.query, &merged)?;
            for (flag, &ok) in plan.attr_masked.iter_mut().zip(&supervisable) {
                *flag &= ok;
            }

            let mut g: Graph<T> = Graph::new();
            g.set_train(true);
            g.seed_dropout(step_seed);
            let vars = {
                let mut vs = Vec::new();
                params.for_each(&mut |_, t| vs.push(g.param(t.clone())));
                vs
            };
            let sv = params.vars_from(&cfg.model, &vars);

            let d_ctx = embed_batch(&mut g, &ctx_batch, &sv)?;
            let h_d = encode(&mut g, d_ctx, &sv, &cfg.model)?;
            let x_q = embed_batch(&mut g, &q_batch, &sv)?;
            let outs = predict(&mut g, x_q, h_d, &sv, cfg.model.dropout)?;

            let ll = label_loss(&mut g, &outs, &q_batch, &ds.schema, &plan)?;
            let al = attribute_loss(&mut g, &outs, &q_batch, &ds.schema, &plan)?;
            let lambda = lambda_at(step.min(total_steps), total_steps, cfg.schedule, cfg.lambda_floor);
            let loss = crate::objective::combine(&mut g, ll, al, lambda)?;

            let (ll_v, al_v) = (
                g.value(ll).data()[0].to_f64(),
                g.value(al).data()[0].to_f64(),
            );
            if !ll_v.is_finite() || !al_v.is_finite() {
                return Err(TrainError::Diverged(format!(
                    "epoch {epoch}, step {step}: loss_labels={ll_v}, loss_attributes={al_v}"
                )));
            }

            let mut grads_by_var = g.backward(loss)?;
            let grads: Vec<Tensor<T>> = vars
                .iter()
                .zip(flat_params(&params).iter())
                .map(|(&v, p)| {
                    grads_by_var
                        .take(v)
                        .unwrap_or_else(|| Tensor::zeros(p.shape()))
                })
                .collect();
            let mut flat = flat_params(&params);
            match opt_step(&cfg.optimizer, &mut opt, &mut flat, &grads)? {
                StepOutcome::Applied { .. } => set_flat_params(&mut params, &flat),
                StepOutcome::Skipped { .. } => {}
            }

            epoch_ll += ll_v;
            epoch_al += al_v;
            epoch_lambda = lambda;
            applied += 1;
        }

        let model = SpinModel {
            schema: ds.schema.clone(),
            config: cfg.model.clone(),
            params: params.clone(),
        };
        let (val_loss, val_metric) = eval_split(&model, ds, &train_idx, &val_idx)?;
        history.push(EpochRecord {
            epoch,
            train_loss_labels: epoch_ll / slices.len() as f64,
            train_loss_attributes: epoch_al / slices.len() as f64,
            lambda: epoch_lambda,
            val_loss_labels: val_loss,
            val_metric,
        });

        if val_metric > best_metric {
            best_metric = val_metric;
            best_epoch = epoch;
            best_params = params.clone();
            since_best = 0;
            if let Some(path) = checkpoint {
                save_checkpoint(path, &ds.schema, &cfg.model, &params, &opt, epoch + 1)?;
            }
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log::info!("early stop at epoch {epoch}: no val improvement in {since_best}");
                break;
            }
        }
    }

    let run = TrainRun {
        config: cfg.clone(),
        history,
        best_epoch,
        best_metric,
        steps_taken: opt.step,
    };
    let model = SpinModel {
        schema: ds.schema.clone(),
        config: cfg.model.clone(),
        params: best_params,
    };
    Ok((model, run))
}

/// Train from a fresh initialization, checkpointing the best-validation
/// parameters to `checkpoint` when given.
pub fn train<T: Scalar>(
    ds: &TabularDataset,
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
) -> Result<(SpinModel<T>, TrainRun)> {
    run_loop(ds, cfg, checkpoint, None)
}

/// Continue a run from a checkpoint; the next update is bit-identical to
/// what the uninterrupted run would have taken.
pub fn resume<T: Scalar>(
    ds: &TabularDataset,
    cfg: &RunConfig,
    checkpoint: &Path,
) -> Result<(SpinModel<T>, TrainRun)> {
    let (params, opt, start_epoch) = load_checkpoint(checkpoint, &ds.schema, &cfg.model)?;
    run_loop(
        ds,
        cfg,
        Some(checkpoint),
        Some(TrainState {
            params,
            opt,
            start_epoch,
        }),
    )
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    schema: &SchemaSpec,
    config: &ModelConfig,
    params: &SpinParams<T>,
    opt: &OptimizerState<T>,
    next_epoch: usize,
) -> Result<()> {
    let header = BlobHeader {
        magic: CHECKPOINT_MAGIC,
        version: FORMAT_VERSION,
        h: config.h as u32,
        f: config.f as u32,
        e: config.e as u32,
        dtype: T::DTYPE,
        schema_fp: schema.fingerprint(),
        params_fp: params.values_fingerprint(),
    };
    let mut named: Vec<(String, Tensor<T>)> = Vec::new();
    params.for_each(&mut |name, t| named.push((name, t.clone())));
    for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
        named.push((format!("opt.m.{i}"), m.clone()));
        named.push((format!("opt.v.{i}"), v.clone()));
    }
    if let Some(slow) = &opt.slow {
        for (i, s) in slow.iter().enumerate() {
            named.push((format!("opt.slow.{i}"), s.clone()));
        }
    }
    named.push((
        "opt.meta".into(),
        Tensor::from_f64s(
            &[3],
            &[
                opt.step as f64,
                next_epoch as f64,
                opt.consecutive_skips as f64,
            ],
        )
        .expect("static shape"),
    ));
    let entries: Vec<(&str, &Tensor<T>)> =
        named.iter().map(|(n, t)| (n.as_str(), t)).collect();
    write_blob(path, &header, &entries).map_err(ModelError::from)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(
    path: &Path,
    schema: &SchemaSpec,
    config: &ModelConfig,
) -> Result<(SpinParams<T>, OptimizerState<T>, usize)> {
    let blob = read_blob::<T>(path, CHECKPOINT_MAGIC).map_err(ModelError::from)?;
    if blob.header.schema_fp != schema.fingerprint() {
        return Err(TrainError::Invalid(format!(
            "checkpoint schema fingerprint {:#x} does not match {:#x}",
            blob.header.schema_fp,
            schema.fingerprint()
        )));
    }
    let mut params = SpinParams::init(schema, config, 0)?;
    let mut missing = Vec::new();
    params.for_each_mut(&mut |name, t| match blob.get(&name) {
        Some(stored) if stored.shape() == t.shape() => *t = stored.clone(),
        Some(stored) => missing.push(format!(
            "{name}: shape {:?} vs checkpoint {:?}",
            t.shape(),
            stored.shape()
        )),
        None => missing.push(format!("{name}: absent from checkpoint")),
    });
    if !missing.is_empty() {
        return Err(TrainError::Invalid(format!(
            "checkpoint does not fit the model: {}",
            missing.join("; ")
        )));
    }
    let n = flat_params(&params).len();
    let grab = |prefix: &str, i: usize| -> Result<Tensor<T>> {
        blob.get(&format!("{prefix}.{i}"))
            .cloned()
            .ok_or_else(|| TrainError::Invalid(format!("checkpoint lacks {prefix}.{i}")))
    };
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for i in 0..n {
        m.push(grab("opt.m", i)?);
        v.push(grab("opt.v", i)?);
    }
    let slow = if blob.get("opt.slow.0").is_some() {
        let mut s = Vec::with_capacity(n);
        for i in 0..n {
            s.push(grab("opt.slow", i)?);
        }
        Some(s)
    } else {
        None
    };
    let meta = blob
        .get("opt.meta")
        .ok_or_else(|| TrainError::Invalid("checkpoint lacks opt.meta".into()))?
        .to_f64_vec();
    let opt = OptimizerState {
        m,
        v,
        slow,
        step: meta[0] as usize,
        consecutive_skips: meta[2] as usize,
    };
    Ok((params, opt, meta[1] as usize))
}

/// Write the epoch history as CSV: one train row and one val row per
/// epoch.
pub fn write_history_csv(run: &TrainRun, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "split", "loss_labels", "loss_attributes", "lambda", "task_metric"])?;
    for r in &run.history {
        w.write_record([
            r.epoch.to_string(),
            "train".into(),
            r.train_loss_labels.to_string(),
            r.train_loss_attributes.to_string(),
            r.lambda.to_string(),
            String::new(),
        ])?;
        w.write_record([
            r.epoch.to_string(),
            "val".into(),
            r.val_loss_labels.to_string(),
            String::new(),
            r.lambda.to_string(),
            r.val_metric.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneRow {
    pub index: usize,
    pub best_epoch: usize,
    pub val_metric: f64,
}

/// Grid search on the validation metric; returns the winning index and
/// the full result table.
pub fn tune<T: Scalar>(ds: &TabularDataset, grid: &[RunConfig]) -> Result<(usize, Vec<TuneRow>)> {
    if grid.is_empty() {
        return Err(TrainError::Invalid("empty tuning grid".into()));
    }
    let mut table = Vec::with_capacity(grid.len());
    for (i, cfg) in grid.iter().enumerate() {
        let result = train::<T>(ds, cfg, None);
        let (best_epoch, metric) = match result {
            Ok((_, run)) => (run.best_epoch, run.best_metric),
            // a diverging configuration loses, it does not abort the search
            Err(TrainError::Diverged(msg)) => {
                log::warn!("grid entry {i} diverged: {msg}");
                (0, f64::NEG_INFINITY)
            }
            Err(e) => return Err(e),
        };
        table.push(TuneRow {
            index: i,
            best_epoch,
            val_metric: metric,
        });
    }
    let best = table
        .iter()
        .max_by(|a, b| a.val_metric.partial_cmp(&b.val_metric).unwrap())
        .unwrap()
        .index;
    Ok((best, table))
}

pub fn write_tune_csv(table: &[TuneRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["index", "best_epoch", "val_metric"])?;
    for r in table {
        w.write_record([
            r.index.to_string(),
            r.best_epoch.to_string(),
            r.val_metric.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttrSpec, Role};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_state(cfg: &OptimizerConfig, w: f64) -> (Vec<Tensor<f64>>, OptimizerState<f64>) {
        let params = vec![Tensor::from_f64s(&[1], &[w]).unwrap()];
        let state = OptimizerState::new(&params, cfg);
        (params, state)
    }

    #[test]
    fn zero_grads_leave_params_unchanged_without_decay() {
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let (mut params, mut state) = scalar_state(&cfg, 1.25);
        let grads = vec![Tensor::zeros(&[1])];
        for _ in 0..10 {
            opt_step(&cfg, &mut state, &mut params, &grads).unwrap();
        }
        assert_eq!(params[0].data()[0], 1.25);
    }

    #[test]
    fn quadratic_converges_within_500_steps() {
        for kind in [OptimizerKind::AdamW, OptimizerKind::LambLookahead] {
            let cfg = OptimizerConfig {
                kind,
                lr: 0.05,
                weight_decay: 0.0,
                ..OptimizerConfig::default()
            };
            let (mut params, mut state) = scalar_state(&cfg, 0.0);
            for _ in 0..500 {
                let w = params[0].data()[0];
                let grads = vec![Tensor::from_f64s(&[1], &[2.0 * (w - 3.0)]).unwrap()];
                opt_step(&cfg, &mut state, &mut params, &grads).unwrap();
            }
            let w = params[0].data()[0];
            assert!((w - 3.0).abs() < 1e-3, "{kind:?} ended at {w}");
        }
    }

    #[test]
    fn degenerate_lookahead_matches_plain_lamb() {
        let plain = OptimizerConfig {
            kind: OptimizerKind::LambLookahead,
            lookahead_k: 1,
            lookahead_alpha: 1.0,
            ..OptimizerConfig::default()
        };
        // alpha 0 freezes slow weights only at sync; k=1 alpha=1 copies fast
        // weights through, so the trajectory equals no lookahead at all
        let mut off = plain.clone();
        off.lookahead_k = usize::MAX;
        let run = |cfg: &OptimizerConfig| {
            let (mut params, mut state) = scalar_state(cfg, 0.3);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let mut traj = Vec::new();
            for _ in 0..20 {
                let g = rng.gen_range(-1.0..1.0);
                let grads = vec![Tensor::from_f64s(&[1], &[g]).unwrap()];
                opt_step(cfg, &mut state, &mut params, &grads).unwrap();
                traj.push(params[0].data()[0]);
            }
            traj
        };
        assert_eq!(run(&plain), run(&off));
    }

    #[test]
    fn clipping_never_increases_global_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
            let mut grads: Vec<Tensor<f64>> = vec![
                Tensor::from_f64s(&[3], &[rng.gen::<f64>() * scale, rng.gen::<f64>() * scale, 0.1]).unwrap(),
                Tensor::from_f64s(&[2], &[rng.gen::<f64>() * scale, -rng.gen::<f64>()]).unwrap(),
            ];
            let before = clip_global_norm(&mut grads, 1.0);
            let after_sq: f64 = grads
                .iter()
                .flat_map(|g| g.data())
                .map(|&x| x * x)
                .sum();
            assert!(after_sq.sqrt() <= before.max(1.0) + 1e-12);
            assert!(after_sq.sqrt() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn nonfinite_grads_skip_then_abort() {
        let cfg = OptimizerConfig::default();
        let (mut params, mut state) = scalar_state(&cfg, 1.0);
        let bad = vec![Tensor::from_f64s(&[1], &[f64::NAN]).unwrap()];
        for expect in 1..=2 {
            match opt_step(&cfg, &mut state, &mut params, &bad).unwrap() {
                StepOutcome::Skipped { consecutive } => assert_eq!(consecutive, expect),
                other => panic!("expected skip, got {other:?}"),
            }
            assert_eq!(params[0].data()[0], 1.0);
        }
        // a good step resets the counter
        let good = vec![Tensor::from_f64s(&[1], &[0.5]).unwrap()];
        opt_step(&cfg, &mut state, &mut params, &good).unwrap();
        assert_eq!(state.consecutive_skips, 0);
        for _ in 0..2 {
            opt_step(&cfg, &mut state, &mut params, &bad).unwrap();
        }
        assert!(matches!(
            opt_step(&cfg, &mut state, &mut params, &bad),
            Err(TrainError::Diverged(_))
        ));
    }

    fn toy_schema() -> SchemaSpec {
        SchemaSpec {
            attributes: vec![
                AttrSpec {
                    name: "a".into(),
                    kind: AttrKind::Categorical { vocab: 4 },
                    role: Role::Input,
                },
                AttrSpec {
                    name: "b".into(),
                    kind: AttrKind::Continuous,
                    role: Role::Input,
                },
                AttrSpec {
                    name: "y".into(),
                    kind: AttrKind::Categorical { vocab: 4 },
                    role: Role::Target,
                },
            ],
        }
    }

    /// label = input category; 32 train rows + 8 val rows
    fn toy_dataset() -> TabularDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<Option<Value>>> = (0..40)
            .map(|i| {
                let c = i % 4;
                vec![
                    Some(Value::Cat(c)),
                    Some(Value::Cont(rng.gen_range(-1.0..1.0))),
                    Some(Value::Cat(c)),
                ]
            })
            .collect();
        let mut ds = TabularDataset::new(toy_schema(), rows);
        for i in 32..40 {
            ds.split[i] = Split::Val;
        }
        ds
    }

    fn toy_config(epochs: usize) -> RunConfig {
        let mut model = ModelConfig::default();
        model.e = 16;
        model.h = 4;
        model.f = 3;
        model.depth = 2;
        let mut cfg = RunConfig::new(model);
        cfg.epochs = epochs;
        cfg.slice_size = 32;
        cfg.optimizer.lr = 3e-3;
        cfg.patience = 1000;
        cfg.seed = 5;
        cfg
    }

    #[test]
    fn overfits_a_toy_dataset() {
        let ds = toy_dataset();
        let mut cfg = toy_config(300);
        cfg.patience = 300;
        let (model, run) = train::<f64>(&ds, &cfg, None).unwrap();
        let train_idx = ds.indices_of(Split::Train);
        let (_, acc) = eval_split(&model, &ds, &train_idx, &train_idx).unwrap();
        assert_eq!(acc, 1.0, "train accuracy {acc} after {} epochs", run.history.len());
    }

    #[test]
    fn same_seed_same_history() {
        let ds = toy_dataset();
        let cfg = toy_config(3);
        let (_, a) = train::<f64>(&ds, &cfg, None).unwrap();
        let (_, b) = train::<f64>(&ds, &cfg, None).unwrap();
        assert_eq!(serde_json::to_string(&a.history).unwrap(), serde_json::to_string(&b.history).unwrap());
        for (x, y) in a.history.iter().zip(&b.history) {
            assert!(x.train_loss_labels.to_bits() == y.train_loss_labels.to_bits());
            assert!(x.val_metric.to_bits() == y.val_metric.to_bits());
        }
    }

    #[test]
    fn best_checkpoint_tracks_max_val_metric() {
        let ds = toy_dataset();
        let cfg = toy_config(8);
        let (_, run) = train::<f64>(&ds, &cfg, None).unwrap();
        let max = run
            .history
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, |m, r| m.max(r.val_metric));
        assert_eq!(run.best_metric, max);
        assert_eq!(run.history[run.best_epoch].val_metric, max);
    }

    #[test]
    fn lambda_history_matches_schedule_exactly() {
        let ds = toy_dataset();
        let cfg = toy_config(5);
        let (_, run) = train::<f64>(&ds, &cfg, None).unwrap();
        // one slice per epoch, so the step at epoch t is t
        for r in &run.history {
            let expect = lambda_at(r.epoch, cfg.epochs, cfg.schedule, cfg.lambda_floor);
            assert_eq!(r.lambda, expect);
        }
    }

    #[test]
    fn checkpoint_roundtrip_resumes_bit_identically() {
        let ds = toy_dataset();
        let cfg = toy_config(4);
        let mut opt_cfg = cfg.optimizer.clone();
        opt_cfg.kind = OptimizerKind::LambLookahead;

        // reach a mid-training state: real params, warm moments
        let mut params = SpinParams::<f64>::init(&ds.schema, &cfg.model, cfg.seed).unwrap();
        let mut flat = flat_params(&params);
        let mut opt = OptimizerState::new(&flat, &opt_cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let fake_grads = |rng: &mut ChaCha8Rng, flat: &[Tensor<f64>]| -> Vec<Tensor<f64>> {
            flat.iter()
                .map(|p| {
                    let vals: Vec<f64> = (0..p.len()).map(|_| rng.gen_range(-0.1..0.1)).collect();
                    Tensor::from_f64s(p.shape(), &vals).unwrap()
                })
                .collect()
        };
        for _ in 0..5 {
            let grads = fake_grads(&mut rng, &flat);
            opt_step(&opt_cfg, &mut opt, &mut flat, &grads).unwrap();
        }
        set_flat_params(&mut params, &flat);

        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("run.ckpt");
        save_checkpoint(&ckpt, &ds.schema, &cfg.model, &params, &opt, 2).unwrap();
        let (params2, mut opt2, next_epoch) =
            load_checkpoint::<f64>(&ckpt, &ds.schema, &cfg.model).unwrap();

        assert_eq!(next_epoch, 2);
        assert_eq!(opt2.step, opt.step);
        let bits = |ts: &[Tensor<f64>]| -> Vec<u64> {
            ts.iter().flat_map(|t| t.data().iter().map(|x| x.to_bits())).collect()
        };
        assert_eq!(bits(&flat_params(&params2)), bits(&flat_params(&params)));
        assert_eq!(bits(&opt2.m), bits(&opt.m));
        assert_eq!(bits(&opt2.v), bits(&opt.v));
        assert_eq!(
            bits(opt2.slow.as_ref().unwrap()),
            bits(opt.slow.as_ref().unwrap())
        );

        // the next update from the reloaded state is bit-identical
        let grads = fake_grads(&mut rng, &flat);
        let mut flat2 = flat_params(&params2);
        opt_step(&opt_cfg, &mut opt, &mut flat, &grads).unwrap();
        opt_step(&opt_cfg, &mut opt2, &mut flat2, &grads).unwrap();
        assert_eq!(bits(&flat), bits(&flat2));
    }

    #[test]
    fn resume_continues_from_the_saved_epoch() {
        let ds = toy_dataset();
        let cfg = toy_config(4);
        let params = SpinParams::<f64>::init(&ds.schema, &cfg.model, cfg.seed).unwrap();
        let opt = OptimizerState::new(&flat_params(&params), &cfg.optimizer);
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("run.ckpt");
        save_checkpoint(&ckpt, &ds.schema, &cfg.model, &params, &opt, 2).unwrap();
        let (_, run) = resume::<f64>(&ds, &cfg, &ckpt).unwrap();
        let epochs: Vec<usize> = run.history.iter().map(|r| r.epoch).collect();
        assert_eq!(epochs, vec![2, 3]);
    }

    #[test]
    fn history_csv_has_two_rows_per_epoch() {
        let ds = toy_dataset();
        let cfg = toy_config(3);
        let (_, run) = train::<f64>(&ds, &cfg, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        write_history_csv(&run, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 2 * run.history.len());
        assert!(lines[0].starts_with("epoch,split,loss_labels"));
    }

    #[test]
    fn tune_selects_the_healthy_config() {
        let ds = toy_dataset();
        let good = toy_config(3);
        let mut bad = good.clone();
        bad.optimizer.lr = 10.0;
        let (best, table) = tune::<f64>(&ds, &[bad, good.clone()]).unwrap();
        assert_eq!(table.len(), 2);
        assert_eq!(best, 1);
        assert!(table[1].val_metric >= table[0].val_metric);

        let (only, table) = tune::<f64>(&ds, &[good]).unwrap();
        assert_eq!(only, 0);
        assert_eq!(table.len(), 1);
    }
}
