//! Masked training objective: label loss on hidden targets, a
//! reconstruction loss on stochastically masked input attributes, and the
//! annealed weight blending the two.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{AttrKind, EmbeddedBatch, ModelError, Result, SchemaSpec, Value};
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// Masking rates; `p_attr` drives input-attribute reconstruction masks,
/// `p_label` the fraction of rows treated as queries with hidden labels.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct MaskRates {
    pub p_attr: f64,
    pub p_label: f64,
}

impl Default for MaskRates {
    fn default() -> Self {
        MaskRates {
            p_attr: 0.3,
            p_label: 0.5,
        }
    }
}

/// Per-(row, attribute) masking decisions for one batch.
#[derive(Debug, Clone)]
pub struct MaskPlan {
    pub rows: usize,
    pub d: usize,
    /// Row-major; true on every target attribute of a query row.
    pub label_masked: Vec<bool>,
    /// Row-major; sampled only over input attributes.
    pub attr_masked: Vec<bool>,
    /// Rows whose labels are hidden this step.
    pub is_query: Vec<bool>,
}

impl MaskPlan {
    /// Union of both mask kinds, the mask to embed the batch with.
    pub fn merged(&self) -> Vec<bool> {
        self.label_masked
            .iter()
            .zip(&self.attr_masked)
            .map(|(&l, &a)| l || a)
            .collect()
    }
}

/// Independent Bernoulli(p_attr) per input attribute per row; every target
/// attribute of a query row is label-masked. Deterministic given the seed.
pub fn sample_masks(schema: &SchemaSpec, rows: usize, rates: MaskRates, seed: u64) -> MaskPlan {
    let d = schema.d();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let is_query: Vec<bool> = (0..rows).map(|_| rng.gen::<f64>() < rates.p_label).collect();
    let mut label_masked = vec![false; rows * d];
    let mut attr_masked = vec![false; rows * d];
    for r in 0..rows {
        for (a, spec) in schema.attributes.iter().enumerate() {
            match spec.role {
                crate::model::Role::Target => {
                    label_masked[r * d + a] = is_query[r];
                }
                crate::model::Role::Input => {
                    attr_masked[r * d + a] = rng.gen::<f64>() < rates.p_attr;
                }
            }
        }
    }
    MaskPlan {
        rows,
        d,
        label_masked,
        attr_masked,
        is_query,
    }
}

/// Mean loss over the selected positions: cross-entropy for categorical
/// attributes, squared error for continuous ones. `outs` is one logits or
/// value tensor per attribute, as `predict` returns.
fn masked_mean_loss<T: Scalar>(
    g: &mut Graph<T>,
    outs: &[Var],
    batch: &EmbeddedBatch<T>,
    schema: &SchemaSpec,
    masked: &[bool],
) -> Result<Option<Var>> {
    let d = schema.d();
    let rows = batch.rows();
    let mut terms: Vec<Var> = Vec::new();
    let mut count = 0usize;
    for (a, spec) in schema.attributes.iter().enumerate() {
        let picked_rows: Vec<usize> = (0..rows).filter(|&r| masked[r * d + a]).collect();
        if picked_rows.is_empty() {
            continue;
        }
        count += picked_rows.len();
        match spec.kind {
            AttrKind::Categorical { .. } => {
                let gold: Vec<usize> = picked_rows
                    .iter()
                    .map(|&r| match batch.gold[r * d + a] {
                        Some(Value::Cat(v)) => Ok(v),
                        _ => Err(ModelError::Batch(format!(
                            "row {r}, attribute {:?}: masked position lacks a gold class",
                            spec.name
                        ))),
                    })
                    .collect::<Result<_>>()?;
                let lp = g.log_softmax(outs[a])?;
                let sel = g.select_rows(lp, &picked_rows)?;
                let picked = g.select_per_row(sel, &gold)?;
                let nll = g.sum_all(picked)?;
                terms.push(g.scale(nll, T::from_f64(-1.0))?);
            }
            AttrKind::Continuous => {
                let gold: Vec<f64> = picked_rows
                    .iter()
                    .map(|&r| match batch.gold[r * d + a] {
                        Some(Value::Cont(x)) => Ok(x),
                        _ => Err(ModelError::Batch(format!(
                            "row {r}, attribute {:?}: masked position lacks a gold value",
                            spec.name
                        ))),
                    })
                    .collect::<Result<_>>()?;
                let pred = g.select_rows(outs[a], &picked_rows)?;
                let target = g.leaf(Tensor::from_f64s(&[gold.len(), 1], &gold)?);
                let diff = g.sub(pred, target)?;
                let sq = g.mul(diff, diff)?;
                terms.push(g.sum_all(sq)?);
            }
        }
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(Some(g.scale(total, T::from_f64(1.0 / count as f64))?))
}

/// Mean loss over label-masked positions. Errors when the plan masks no
/// labels (a degenerate batch).
pub fn label_loss<T: Scalar>(
    g: &mut Graph<T>,
    outs: &[Var],
    batch: &EmbeddedBatch<T>,
    schema: &SchemaSpec,
    plan: &MaskPlan,
) -> Result<Var> {
    masked_mean_loss(g, outs, batch, schema, &plan.label_masked)?.ok_or_else(|| {
        ModelError::Batch("no label-masked positions in batch".into())
    })
}

/// Mean reconstruction loss over attribute-masked input positions; zero
/// (with a logged note) when nothing is masked.
pub fn attribute_loss<T: Scalar>(
    g: &mut Graph<T>,
    outs: &[Var],
    batch: &EmbeddedBatch<T>,
    schema: &SchemaSpec,
    plan: &MaskPlan,
) -> Result<Var> {
    match masked_mean_loss(g, outs, batch, schema, &plan.attr_masked)? {
        Some(v) => Ok(v),
        None => {
            log::info!("no attribute-masked positions; reconstruction loss is 0");
            Ok(g.leaf(Tensor::scalar(T::ZERO)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Linear,
    Cosine,
}

/// Annealed attribute-loss weight: 0.5 at step 0, non-increasing, reaching
/// `floor` at `total_steps`.
pub fn lambda_at(step: usize, total_steps: usize, schedule: Schedule, floor: f64) -> f64 {
    debug_assert!(step <= total_steps);
    let start = 0.5f64;
    if total_steps == 0 {
        return start;
    }
    let t = step as f64 / total_steps as f64;
    match schedule {
        Schedule::Linear => start + (floor - start) * t,
        Schedule::Cosine => floor + (start - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()),
    }
}

/// The two loss terms and their exact affine combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_labels: f64,
    pub l_attributes: f64,
    pub lambda: f64,
    pub l_total: f64,
}

pub fn total_loss(l_labels: f64, l_attributes: f64, lambda: f64) -> LossBreakdown {
    debug_assert!((0.0..=1.0).contains(&lambda));
    LossBreakdown {
        l_labels,
        l_attributes,
        lambda,
        l_total: (1.0 - lambda) * l_labels + lambda * l_attributes,
    }
}

/// Graph-level counterpart of [`total_loss`] for backprop.
pub fn combine<T: Scalar>(
    g: &mut Graph<T>,
    l_labels: Var,
    l_attributes: Var,
    lambda: f64,
) -> Result<Var> {
    let a = g.scale(l_labels, T::from_f64(1.0 - lambda))?;
    let b = g.scale(l_attributes, T::from_f64(lambda))?;
    Ok(g.add(a, b)?)
}
