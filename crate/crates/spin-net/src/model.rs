//! The semi-parametric inducing-point network.
//!
//! A dataset of n rows with d attributes is embedded to a `(n, d, e)`
//! tensor, compressed by an encoder stack into a fixed `(h, f, e)` tensor
//! of inducing points, and queried by a cross-attention predictor whose
//! cost does not depend on n. The encoder alternates three sublayers:
//!
//! * XABA: per-datapoint cross-attention from f latent attribute slots to
//!   the row's d attribute embeddings, cost O(n d f e);
//! * XABD: each of h inducing points attends over all n datapoints in a
//!   folded (f e)-wide token space, cost O(n h f e), linear in n;
//! * ABLA: optional self-attention over the f slots of each row.

use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{mab, xavier, MabParams, MabVars};
use crate::numerics::{
    AttrParamVars, EmbedEntry, EmbedSpec, Graph, NumericsError, Scalar, Tensor, Var,
};
use crate::serialize::{
    fnv1a64, read_blob, write_blob, BlobHeader, SerializeError, ENCODING_MAGIC, FORMAT_VERSION,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Serialize(#[from] SerializeError),
    #[error("schema: {0}")]
    Schema(String),
    #[error("config: {0}")]
    Config(String),
    #[error("batch: {0}")]
    Batch(String),
    #[error("encoding mismatch: {0}")]
    Fingerprint(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Attribute kind; categorical attributes carry their vocab size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttrKind {
    Categorical { vocab: usize },
    Continuous,
}

/// Whether the attribute is an input (x) or a prediction target (y).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Input,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttrSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: AttrKind,
    pub role: Role,
}

/// Ordered attribute list; d = inputs + targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaSpec {
    pub attributes: Vec<AttrSpec>,
}

impl SchemaSpec {
    pub fn d(&self) -> usize {
        self.attributes.len()
    }

    pub fn input_indices(&self) -> Vec<usize> {
        self.indices_of(Role::Input)
    }

    pub fn target_indices(&self) -> Vec<usize> {
        self.indices_of(Role::Target)
    }

    fn indices_of(&self, role: Role) -> Vec<usize> {
        self.attributes
            .iter()
            .enumerate()
            .filter(|(_, a)| a.role == role)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.attributes.is_empty() {
            return Err(ModelError::Schema("no attributes".into()));
        }
        for a in &self.attributes {
            if let AttrKind::Categorical { vocab } = a.kind {
                if vocab < 2 {
                    return Err(ModelError::Schema(format!(
                        "attribute {:?}: categorical vocab {vocab} < 2",
                        a.name
                    )));
                }
            }
        }
        if self.target_indices().is_empty() {
            return Err(ModelError::Schema("no target attributes".into()));
        }
        Ok(())
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("schema serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let s: SchemaSpec =
            serde_json::from_str(json).map_err(|e| ModelError::Schema(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn fingerprint(&self) -> u64 {
        fnv1a64(self.canonical_json().as_bytes())
    }
}

/// Encoder/predictor hyperparameters. `depth` counts XABA and XABD
/// sublayers, so the default 4 means two full encoder units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub e: usize,
    pub heads: usize,
    pub h: usize,
    pub f: usize,
    pub depth: usize,
    pub use_xaba: bool,
    pub use_xabd: bool,
    pub use_abla: bool,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            e: 16,
            heads: 1,
            h: 10,
            f: 10,
            depth: 4,
            use_xaba: true,
            use_xabd: true,
            use_abla: true,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn encoder_units(&self) -> usize {
        self.depth.div_ceil(2)
    }

    pub fn validate(&self, schema: &SchemaSpec) -> Result<()> {
        let mut problems = Vec::new();
        if self.e == 0 || self.h == 0 || self.f == 0 || self.depth == 0 {
            problems.push("e, h, f, depth must all be >= 1".to_string());
        }
        if self.heads == 0 || self.e % self.heads.max(1) != 0 {
            problems.push(format!(
                "heads {} must divide embedding width {}",
                self.heads, self.e
            ));
        }
        if self.f > schema.d() {
            problems.push(format!(
                "latent slots f={} exceed attribute count d={}",
                self.f,
                schema.d()
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Config(problems.join("; ")))
        }
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn fingerprint(&self) -> u64 {
        fnv1a64(self.canonical_json().as_bytes())
    }
}

/// A raw attribute value before embedding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Value {
    Cat(usize),
    Cont(f64),
}

/// Embedded rows plus the gold values at masked positions.
#[derive(Debug, Clone)]
pub struct EmbeddedBatch<T> {
    pub spec: EmbedSpec<T>,
    /// Row-major `(row, attribute)`; `Some` wherever a gold value is known.
    pub gold: Vec<Option<Value>>,
}

impl<T: Scalar> EmbeddedBatch<T> {
    /// `masked` is row-major `(row, attribute)`; masked positions embed the
    /// mask indicator and keep their value as gold supervision.
    pub fn new(schema: &SchemaSpec, rows: &[Vec<Value>], masked: &[bool]) -> Result<Self> {
        let d = schema.d();
        if rows.is_empty() {
            return Err(ModelError::Batch("empty batch".into()));
        }
        if masked.len() != rows.len() * d {
            return Err(ModelError::Batch(format!(
                "mask length {} does not match {} rows x {} attributes",
                masked.len(),
                rows.len(),
                d
            )));
        }
        let mut entries = Vec::with_capacity(rows.len() * d);
        let mut gold = Vec::with_capacity(rows.len() * d);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(ModelError::Batch(format!(
                    "row {r} has {} values, schema has {d} attributes",
                    row.len()
                )));
            }
            for (a, (&value, spec)) in row.iter().zip(&schema.attributes).enumerate() {
                match (value, spec.kind) {
                    (Value::Cat(v), AttrKind::Categorical { vocab }) => {
                        if v >= vocab {
                            return Err(ModelError::Batch(format!(
                                "row {r}, attribute {:?}: index {v} outside vocab {vocab}",
                                spec.name
                            )));
                        }
                    }
                    (Value::Cont(x), AttrKind::Continuous) => {
                        if !x.is_finite() {
                            return Err(ModelError::Batch(format!(
                                "row {r}, attribute {:?}: non-finite value",
                                spec.name
                            )));
                        }
                    }
                    _ => {
                        return Err(ModelError::Batch(format!(
                            "row {r}, attribute {:?}: value kind does not match schema",
                            spec.name
                        )));
                    }
                }
                gold.push(Some(value));
                entries.push(if masked[r * d + a] {
                    EmbedEntry::Masked
                } else {
                    match value {
                        Value::Cat(v) => EmbedEntry::Cat(v),
                        Value::Cont(x) => EmbedEntry::Cont(T::from_f64(x)),
                    }
                });
            }
        }
        Ok(EmbeddedBatch {
            spec: EmbedSpec {
                rows: rows.len(),
                d,
                entries,
            },
            gold,
        })
    }

    pub fn rows(&self) -> usize {
        self.spec.rows
    }

    pub fn is_masked(&self, row: usize, attr: usize) -> bool {
        matches!(
            self.spec.entries[row * self.spec.d + attr],
            EmbedEntry::Masked
        )
    }
}

/// Per-attribute content-embedding parameters.
#[derive(Debug, Clone)]
pub enum AttrEmbed<T> {
    Cat { table: Tensor<T> },
    Cont { weight: Tensor<T>, bias: Tensor<T> },
}

/// One encoder unit. `abla_a` refreshes H_A for the next unit and is not
/// allocated on the last unit, where it could not affect the output.
#[derive(Debug, Clone)]
pub struct LayerParams<T> {
    pub xaba: MabParams<T>,
    pub xabd: MabParams<T>,
    pub abla_a: Option<MabParams<T>>,
    pub abla_d: MabParams<T>,
}

/// Cross-attention from query tokens to the h*f latent tokens, one
/// self-attention pass over the query row's d tokens so masked positions
/// can condition on the row's observed attributes, then per-attribute
/// linear output heads.
#[derive(Debug, Clone)]
pub struct PredictorParams<T> {
    pub cross: MabParams<T>,
    pub rowmix: MabParams<T>,
    pub heads: Vec<(Tensor<T>, Tensor<T>)>,
}

#[derive(Debug, Clone)]
pub struct SpinParams<T> {
    pub attrs: Vec<AttrEmbed<T>>,
    pub attr_emb: Tensor<T>,
    pub mask_emb: Tensor<T>,
    pub p_proj: Tensor<T>,
    pub h0: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub predictor: PredictorParams<T>,
}

#[derive(Debug, Clone)]
pub struct LayerVars {
    pub xaba: MabVars,
    pub xabd: MabVars,
    pub abla_a: Option<MabVars>,
    pub abla_d: MabVars,
}

#[derive(Debug, Clone)]
pub struct PredictorVars {
    pub cross: MabVars,
    pub rowmix: MabVars,
    pub heads: Vec<(Var, Var)>,
}

/// Graph handles for one bound [`SpinParams`].
#[derive(Debug, Clone)]
pub struct SpinVars {
    pub attrs: Vec<AttrParamVars>,
    pub attr_emb: Var,
    pub mask_emb: Var,
    pub p_proj: Var,
    pub h0: Var,
    pub layers: Vec<LayerVars>,
    pub predictor: PredictorVars,
}

impl<T: Scalar> SpinParams<T> {
    pub fn init(schema: &SchemaSpec, config: &ModelConfig, seed: u64) -> Result<Self> {
        schema.validate()?;
        config.validate(schema)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (e, d) = (config.e, schema.d());
        let emb_std = 0.02;
        let attrs = schema
            .attributes
            .iter()
            .map(|a| match a.kind {
                AttrKind::Categorical { vocab } => AttrEmbed::Cat {
                    table: Tensor::trunc_normal(&[vocab, e], emb_std, &mut rng),
                },
                AttrKind::Continuous => AttrEmbed::Cont {
                    weight: Tensor::trunc_normal(&[e], emb_std, &mut rng),
                    bias: Tensor::trunc_normal(&[e], emb_std, &mut rng),
                },
            })
            .collect();
        let attr_emb = Tensor::trunc_normal(&[d, e], emb_std, &mut rng);
        let mask_emb = Tensor::trunc_normal(&[e], emb_std, &mut rng);
        let p_proj = xavier(&[config.f, d], &mut rng);
        let h0 = Tensor::trunc_normal(&[config.h, config.f, e], emb_std, &mut rng);
        let units = config.encoder_units();
        let mut layers = Vec::with_capacity(units);
        for i in 0..units {
            layers.push(LayerParams {
                xaba: MabParams::init(e, config.heads, &mut rng)?,
                xabd: MabParams::init(config.f * e, config.heads, &mut rng)?,
                abla_a: if i + 1 < units {
                    Some(MabParams::init(e, config.heads, &mut rng)?)
                } else {
                    None
                },
                abla_d: MabParams::init(e, config.heads, &mut rng)?,
            });
        }
        let heads = schema
            .attributes
            .iter()
            .map(|a| {
                let out = match a.kind {
                    AttrKind::Categorical { vocab } => vocab,
                    AttrKind::Continuous => 1,
                };
                (xavier(&[e, out], &mut rng), Tensor::zeros(&[out]))
            })
            .collect();
        let predictor = PredictorParams {
            cross: MabParams::init(e, config.heads, &mut rng)?,
            rowmix: MabParams::init(e, config.heads, &mut rng)?,
            heads,
        };
        Ok(SpinParams {
            attrs,
            attr_emb,
            mask_emb,
            p_proj,
            h0,
            layers,
            predictor,
        })
    }

    /// Visit every tensor in the fixed order that [`SpinParams::vars_from`]
    /// consumes.
    pub fn for_each(&self, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, a) in self.attrs.iter().enumerate() {
            match a {
                AttrEmbed::Cat { table } => f(format!("attr{i}.table"), table),
                AttrEmbed::Cont { weight, bias } => {
                    f(format!("attr{i}.weight"), weight);
                    f(format!("attr{i}.bias"), bias);
                }
            }
        }
        f("attr_emb".into(), &self.attr_emb);
        f("mask_emb".into(), &self.mask_emb);
        f("p_proj".into(), &self.p_proj);
        f("h0".into(), &self.h0);
        for (i, l) in self.layers.iter().enumerate() {
            l.xaba.for_each(&format!("layer{i}.xaba"), f);
            l.xabd.for_each(&format!("layer{i}.xabd"), f);
            if let Some(abla_a) = &l.abla_a {
                abla_a.for_each(&format!("layer{i}.abla_a"), f);
            }
            l.abla_d.for_each(&format!("layer{i}.abla_d"), f);
        }
        self.predictor.cross.for_each("predictor.cross", f);
        self.predictor.rowmix.for_each("predictor.rowmix", f);
        for (i, (w, b)) in self.predictor.heads.iter().enumerate() {
            f(format!("head{i}.w"), w);
            f(format!("head{i}.b"), b);
        }
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, a) in self.attrs.iter_mut().enumerate() {
            match a {
                AttrEmbed::Cat { table } => f(format!("attr{i}.table"), table),
                AttrEmbed::Cont { weight, bias } => {
                    f(format!("attr{i}.weight"), weight);
                    f(format!("attr{i}.bias"), bias);
                }
            }
        }
        f("attr_emb".into(), &mut self.attr_emb);
        f("mask_emb".into(), &mut self.mask_emb);
        f("p_proj".into(), &mut self.p_proj);
        f("h0".into(), &mut self.h0);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.xaba.for_each_mut(&format!("layer{i}.xaba"), f);
            l.xabd.for_each_mut(&format!("layer{i}.xabd"), f);
            if let Some(abla_a) = &mut l.abla_a {
                abla_a.for_each_mut(&format!("layer{i}.abla_a"), f);
            }
            l.abla_d.for_each_mut(&format!("layer{i}.abla_d"), f);
        }
        self.predictor.cross.for_each_mut("predictor.cross", f);
        self.predictor.rowmix.for_each_mut("predictor.rowmix", f);
        for (i, (w, b)) in self.predictor.heads.iter_mut().enumerate() {
            f(format!("head{i}.w"), w);
            f(format!("head{i}.b"), b);
        }
    }

    /// Rebuild structured vars from a flat list in [`SpinParams::for_each`]
    /// order (the list `bind` produces, or `grad_check` inputs).
    pub fn vars_from(&self, config: &ModelConfig, vars: &[Var]) -> SpinVars {
        let mut it = vars.iter().copied();
        let attrs = self
            .attrs
            .iter()
            .map(|a| match a {
                AttrEmbed::Cat { .. } => AttrParamVars::Cat {
                    table: it.next().expect("table"),
                },
                AttrEmbed::Cont { .. } => AttrParamVars::Cont {
                    weight: it.next().expect("weight"),
                    bias: it.next().expect("bias"),
                },
            })
            .collect();
        let attr_emb = it.next().expect("attr_emb");
        let mask_emb = it.next().expect("mask_emb");
        let p_proj = it.next().expect("p_proj");
        let h0 = it.next().expect("h0");
        let layers = self
            .layers
            .iter()
            .map(|l| LayerVars {
                xaba: MabVars::take(config.heads, &mut it),
                xabd: MabVars::take(config.heads, &mut it),
                abla_a: l
                    .abla_a
                    .as_ref()
                    .map(|_| MabVars::take(config.heads, &mut it)),
                abla_d: MabVars::take(config.heads, &mut it),
            })
            .collect();
        let cross = MabVars::take(config.heads, &mut it);
        let rowmix = MabVars::take(config.heads, &mut it);
        let heads = self
            .predictor
            .heads
            .iter()
            .map(|_| (it.next().expect("head w"), it.next().expect("head b")))
            .collect();
        assert!(it.next().is_none(), "extra vars beyond parameter layout");
        SpinVars {
            attrs,
            attr_emb,
            mask_emb,
            p_proj,
            h0,
            layers,
            predictor: PredictorVars {
                cross,
                rowmix,
                heads,
            },
        }
    }

    pub fn bind(&self, config: &ModelConfig, g: &mut Graph<T>) -> SpinVars {
        let mut vars = Vec::new();
        self.for_each(&mut |_, t| vars.push(g.param(t.clone())));
        self.vars_from(config, &vars)
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, t| n += t.len());
        n
    }

    /// Parameters used at prediction time: everything except the encoder
    /// stack, the attribute-reduction projection, and the initial inducing
    /// tensor (the encoding replaces them).
    pub fn inference_param_count(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |name, t| {
            let encoder_only =
                name.starts_with("layer") || name == "p_proj" || name == "h0";
            if !encoder_only {
                n += t.len();
            }
        });
        n
    }

    /// Fingerprint over every parameter value, order-sensitive.
    pub fn values_fingerprint(&self) -> u64 {
        let mut buf = Vec::new();
        self.for_each(&mut |name, t| {
            buf.extend_from_slice(name.as_bytes());
            for &ext in t.shape() {
                buf.extend_from_slice(&(ext as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut buf);
            }
        });
        fnv1a64(&buf)
    }
}

/// Embed a batch: content embedding (table lookup or value * weight + bias,
/// or the mask indicator) plus the attribute-index embedding, per position.
pub fn embed_batch<T: Scalar>(
    g: &mut Graph<T>,
    batch: &EmbeddedBatch<T>,
    v: &SpinVars,
) -> Result<Var> {
    Ok(g.embed(batch.spec.clone(), v.attrs.clone(), v.attr_emb, v.mask_emb)?)
}

/// `H_A[i] = P . D[i]`: project each datapoint's d attribute embeddings
/// down to f latent slots.
pub fn init_h_a<T: Scalar>(g: &mut Graph<T>, d: Var, p_proj: Var) -> Result<Var> {
    Ok(g.matmul(p_proj, d)?)
}

/// `(a, f, e) -> (1, a, f*e)`: each datapoint's f embeddings become one
/// wide token, row-major by slot.
pub fn unfold<T: Scalar>(g: &mut Graph<T>, t: Var) -> Result<Var> {
    let s = g.value(t).shape().to_vec();
    if s.len() != 3 {
        return Err(NumericsError::InvalidShape {
            op: "unfold",
            shape: s,
            reason: "expected rank 3".into(),
        }
        .into());
    }
    Ok(g.reshape(t, &[1, s[0], s[1] * s[2]])?)
}

/// Inverse of [`unfold`]; errors when the token width is not `f*e`.
pub fn fold<T: Scalar>(g: &mut Graph<T>, t: Var, f: usize, e: usize) -> Result<Var> {
    let s = g.value(t).shape().to_vec();
    if s.len() != 3 || s[0] != 1 || s[2] != f * e {
        return Err(NumericsError::InvalidShape {
            op: "fold",
            shape: s,
            reason: format!("expected (1, a, {}*{})", f, e),
        }
        .into());
    }
    Ok(g.reshape(t, &[s[1], f, e])?)
}

/// Cross-attention among attributes: latent slots of each datapoint attend
/// over that datapoint's attribute embeddings.
pub fn xaba<T: Scalar>(
    g: &mut Graph<T>,
    h_a: Var,
    d: Var,
    p: &MabVars,
    rate: f64,
) -> Result<Var> {
    Ok(mab(g, h_a, d, p, rate)?)
}

/// Cross-attention among datapoints in folded token space:
/// `fold(MAB(unfold(H_D), unfold(H_A')))`.
pub fn xabd<T: Scalar>(
    g: &mut Graph<T>,
    h_d: Var,
    h_a: Var,
    p: &MabVars,
    rate: f64,
) -> Result<Var> {
    let s = g.value(h_d).shape().to_vec();
    let (f, e) = (s[1], s[2]);
    let ud = unfold(g, h_d)?;
    let ua = unfold(g, h_a)?;
    let out = mab(g, ud, ua, p, rate)?;
    fold(g, out, f, e)
}

/// Self-attention over the f slots of each row.
pub fn abla<T: Scalar>(g: &mut Graph<T>, t: Var, p: &MabVars, rate: f64) -> Result<Var> {
    Ok(mab(g, t, t, p, rate)?)
}

/// Run the encoder stack over an embedded dataset `(n, d, e)` and return
/// the final `(h, f, e)` inducing tensor.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    d: Var,
    v: &SpinVars,
    config: &ModelConfig,
) -> Result<Var> {
    if g.value(d).rank() != 3 {
        return Err(NumericsError::InvalidShape {
            op: "encode",
            shape: g.value(d).shape().to_vec(),
            reason: "expected (n, d, e)".into(),
        }
        .into());
    }
    let rate = config.dropout;
    let mut h_a = init_h_a(g, d, v.p_proj)?;
    let mut h_d = v.h0;
    for layer in &v.layers {
        if config.use_xaba {
            h_a = xaba(g, h_a, d, &layer.xaba, rate)?;
        }
        if config.use_xabd {
            h_d = xabd(g, h_d, h_a, &layer.xabd, rate)?;
        }
        if config.use_abla {
            if let Some(abla_a) = &layer.abla_a {
                h_a = abla(g, h_a, abla_a, rate)?;
            }
            h_d = abla(g, h_d, &layer.abla_d, rate)?;
        }
    }
    Ok(h_d)
}

/// Predict per-attribute logits (categorical) or scalars (continuous) for
/// a `(b, d, e)` query batch against a fixed `(h, f, e)` encoding. Each
/// query row is processed independently of the others.
pub fn predict<T: Scalar>(
    g: &mut Graph<T>,
    x_query: Var,
    h_d: Var,
    v: &SpinVars,
    rate: f64,
) -> Result<Vec<Var>> {
    let s = g.value(h_d).shape().to_vec();
    if s.len() != 3 {
        return Err(NumericsError::InvalidShape {
            op: "predict",
            shape: s,
            reason: "encoding must be (h, f, e)".into(),
        }
        .into());
    }
    let latents = g.reshape(h_d, &[s[0] * s[1], s[2]])?;
    let t = mab(g, x_query, latents, &v.predictor.cross, rate)?;
    let t = mab(g, t, t, &v.predictor.rowmix, rate)?;
    let mut outs = Vec::with_capacity(v.predictor.heads.len());
    for (a, &(w, b)) in v.predictor.heads.iter().enumerate() {
        let tok = g.index_axis1(t, a)?;
        let lin = g.matmul(tok, w)?;
        outs.push(g.add_bias(lin, b)?);
    }
    Ok(outs)
}

/// A dataset compressed to `(h, f, e)`; replaces the training rows at
/// prediction time.
#[derive(Debug, Clone)]
pub struct EncodedDataset<T> {
    pub h_d: Tensor<T>,
    pub schema_fp: u64,
    pub params_fp: u64,
    pub version: u32,
}

/// Schema + config + parameters; the complete trainable model.
#[derive(Debug, Clone)]
pub struct SpinModel<T> {
    pub schema: SchemaSpec,
    pub config: ModelConfig,
    pub params: SpinParams<T>,
}

impl<T: Scalar> SpinModel<T> {
    pub fn new(schema: SchemaSpec, config: ModelConfig, seed: u64) -> Result<Self> {
        let params = SpinParams::init(&schema, &config, seed)?;
        Ok(SpinModel {
            schema,
            config,
            params,
        })
    }

    /// Fingerprint binding an encoding to the parameters and config that
    /// produced it.
    pub fn params_fingerprint(&self) -> u64 {
        let mut buf = Vec::new();
        buf.extend_from_slice(self.schema.canonical_json().as_bytes());
        buf.extend_from_slice(self.config.canonical_json().as_bytes());
        buf.extend_from_slice(&self.params.values_fingerprint().to_le_bytes());
        fnv1a64(&buf)
    }

    /// Eval-mode encoder pass.
    pub fn encode_dataset(&self, batch: &EmbeddedBatch<T>) -> Result<EncodedDataset<T>> {
        let mut g = Graph::new();
        let v = self.params.bind(&self.config, &mut g);
        let d = embed_batch(&mut g, batch, &v)?;
        let h_d = encode(&mut g, d, &v, &self.config)?;
        Ok(EncodedDataset {
            h_d: g.value(h_d).clone(),
            schema_fp: self.schema.fingerprint(),
            params_fp: self.params_fingerprint(),
            version: FORMAT_VERSION,
        })
    }

    /// Eval-mode prediction against an explicit encoding tensor.
    pub fn predict_with(
        &self,
        h_d: &Tensor<T>,
        query: &EmbeddedBatch<T>,
    ) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let v = self.params.bind(&self.config, &mut g);
        let x = embed_batch(&mut g, query, &v)?;
        let enc = g.leaf(h_d.clone());
        let outs = predict(&mut g, x, enc, &v, self.config.dropout)?;
        Ok(outs.into_iter().map(|o| g.value(o).clone()).collect())
    }

    pub fn predict_from_encoding(
        &self,
        enc: &EncodedDataset<T>,
        query: &EmbeddedBatch<T>,
    ) -> Result<Vec<Tensor<T>>> {
        if enc.schema_fp != self.schema.fingerprint() {
            return Err(ModelError::Fingerprint(format!(
                "encoding schema fingerprint {:#x} != model schema {:#x}",
                enc.schema_fp,
                self.schema.fingerprint()
            )));
        }
        if enc.params_fp != self.params_fingerprint() {
            return Err(ModelError::Fingerprint(format!(
                "encoding was produced by different parameters ({:#x} != {:#x})",
                enc.params_fp,
                self.params_fingerprint()
            )));
        }
        self.predict_with(&enc.h_d, query)
    }

    pub fn export_encoding(&self, enc: &EncodedDataset<T>, path: &Path) -> Result<()> {
        let s = enc.h_d.shape();
        let header = BlobHeader {
            magic: ENCODING_MAGIC,
            version: FORMAT_VERSION,
            h: s[0] as u32,
            f: s[1] as u32,
            e: s[2] as u32,
            dtype: T::DTYPE,
            schema_fp: enc.schema_fp,
            params_fp: enc.params_fp,
        };
        write_blob(path, &header, &[("h_d", &enc.h_d)])?;
        Ok(())
    }

    pub fn import_encoding(path: &Path) -> Result<EncodedDataset<T>> {
        let blob = read_blob::<T>(path, ENCODING_MAGIC)?;
        let h_d = blob
            .get("h_d")
            .ok_or_else(|| ModelError::Fingerprint("encoding file lacks h_d entry".into()))?
            .clone();
        let hd = blob.header;
        if h_d.shape() != [hd.h as usize, hd.f as usize, hd.e as usize] {
            return Err(ModelError::Fingerprint(format!(
                "h_d shape {:?} disagrees with header ({}, {}, {})",
                h_d.shape(),
                hd.h,
                hd.f,
                hd.e
            )));
        }
        Ok(EncodedDataset {
            h_d,
            schema_fp: hd.schema_fp,
            params_fp: hd.params_fp,
            version: hd.version,
        })
    }
}

/// Build a schema of `n_cont_in` continuous inputs followed by
/// `n_cont_target` continuous targets; handy for tests and baselines.
pub fn continuous_schema(n_in: usize, n_target: usize) -> SchemaSpec {
    let mut attributes = Vec::new();
    for i in 0..n_in {
        attributes.push(AttrSpec {
            name: format!("x{i}"),
            kind: AttrKind::Continuous,
            role: Role::Input,
        });
    }
    for i in 0..n_target {
        attributes.push(AttrSpec {
            name: format!("y{i}"),
            kind: AttrKind::Continuous,
            role: Role::Target,
        });
    }
    SchemaSpec { attributes }
}
