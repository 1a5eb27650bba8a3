use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::par;
use super::scalar::Scalar;
use super::tensor::Tensor;
use super::{NumericsError, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// One raw cell of an embedding request.
#[derive(Debug, Clone, Copy)]
pub enum EmbedEntry<T> {
    /// Zero content embedding plus the learned mask indicator.
    Masked,
    /// Categorical vocab index.
    Cat(usize),
    /// Continuous value, embedded as `value * weight + bias`.
    Cont(T),
}

/// Raw values and mask flags for a `rows x d` batch, row-major.
#[derive(Debug, Clone)]
pub struct EmbedSpec<T> {
    pub rows: usize,
    pub d: usize,
    pub entries: Vec<EmbedEntry<T>>,
}

/// Per-attribute embedding parameters bound to graph nodes.
#[derive(Debug, Clone, Copy)]
pub enum AttrParamVars {
    Cat { table: Var },
    Cont { weight: Var, bias: Var },
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    AddBias(usize, usize),
    Mul(usize, usize),
    MulVec(usize, usize),
    Scale(usize, T),
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm(usize),
    Gelu(usize),
    Reshape(usize),
    ConcatLast(Vec<usize>),
    IndexAxis1(usize, usize),
    SelectRows(usize, Vec<usize>),
    SelectPerRow(usize, Vec<usize>),
    SumAll(usize),
    Dropout {
        input: usize,
        mask: Vec<bool>,
        keep_scale: T,
    },
    Embed {
        spec: EmbedSpec<T>,
        attrs: Vec<AttrParamVars>,
        attr_emb: usize,
        mask_emb: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to every tape node that needs
/// them; each parameter receives its gradient exactly once per backward.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Reverse-mode tape over dense tensors.
///
/// Forward/backward on one graph is single-threaded and deterministic;
/// element-wise kernels may fan out over rows but every reduction runs in a
/// fixed order.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    train: bool,
    rng: ChaCha8Rng,
    flops: std::cell::Cell<u64>,
    finite_checks: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            flops: std::cell::Cell::new(0),
            finite_checks: true,
        }
    }

    pub fn set_train(&mut self, train: bool) {
        self.train = train;
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn seed_dropout(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn set_finite_checks(&mut self, on: bool) {
        self.finite_checks = on;
    }

    /// Multiply-accumulate count of all matmul kernels run so far
    /// (forward and backward), two flops per fused multiply-add.
    pub fn flops(&self) -> u64 {
        self.flops.get()
    }

    pub fn reset_flops(&self) {
        self.flops.set(0);
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if self.finite_checks && !value.all_finite() {
            return Err(NumericsError::NonFinite {
                op: op_name(&op),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; gradients do not flow into it.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false).expect("leaf finite")
    }

    /// Trainable input; `backward` produces its gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true).expect("param finite")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "add",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(out, Op::Add(a.0, b.0), self.needs(a) || self.needs(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, T::from_f64(-1.0))?;
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "mul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(out, Op::Mul(a.0, b.0), self.needs(a) || self.needs(b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x * c).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(out, Op::Scale(a.0, c), self.needs(a))
    }

    /// `a + bias`, bias broadcast over the last axis.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        let e = va.last_extent();
        if vb.shape() != [e] {
            return Err(NumericsError::ShapeMismatch {
                op: "add_bias",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let bdat = vb.data().to_vec();
        let mut out = va.clone();
        for row in out.data_mut().chunks_mut(e) {
            for (o, &b) in row.iter_mut().zip(&bdat) {
                *o += b;
            }
        }
        self.push(
            out,
            Op::AddBias(a.0, bias.0),
            self.needs(a) || self.needs(bias),
        )
    }

    /// `a * v`, v broadcast over the last axis.
    pub fn mul_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (va, vv) = (self.value(a), self.value(v));
        let e = va.last_extent();
        if vv.shape() != [e] {
            return Err(NumericsError::ShapeMismatch {
                op: "mul_vec",
                lhs: va.shape().to_vec(),
                rhs: vv.shape().to_vec(),
            });
        }
        let vdat = vv.data().to_vec();
        let mut out = va.clone();
        for row in out.data_mut().chunks_mut(e) {
            for (o, &s) in row.iter_mut().zip(&vdat) {
                *o *= s;
            }
        }
        self.push(out, Op::MulVec(a.0, v.0), self.needs(a) || self.needs(v))
    }

    /// Batched matrix product. Operands may be rank 2 or rank 3; a rank-2
    /// operand broadcasts over the other's batch extent. With `trans_b` the
    /// second operand is stored `(q, p)` and used as its transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let dims = mm_dims(
            self.value(a).shape(),
            self.value(b).shape(),
            trans_b,
            "matmul",
        )?;
        let mut out = Tensor::zeros(&dims.out_shape);
        let mode = if trans_b { MatMode::NT } else { MatMode::NN };
        run_mm(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            out.data_mut(),
            &dims,
            mode,
            &self.flops,
        );
        self.push(
            out,
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b,
            },
            self.needs(a) || self.needs(b),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false)
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let e = va.last_extent();
        let mut out = va.clone();
        par::for_each_row(out.data_mut(), e, |_, row| {
            let m = row.iter().fold(row[0], |acc, &x| acc.maxv(x));
            let mut s = T::ZERO;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x = *x / s;
            }
        });
        self.push(out, Op::Softmax(a.0), self.needs(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let e = va.last_extent();
        let mut out = va.clone();
        par::for_each_row(out.data_mut(), e, |_, row| {
            let m = row.iter().fold(row[0], |acc, &x| acc.maxv(x));
            let mut s = T::ZERO;
            for x in row.iter() {
                s += (*x - m).exp();
            }
            let lse = m + s.ln();
            for x in row.iter_mut() {
                *x = *x - lse;
            }
        });
        self.push(out, Op::LogSoftmax(a.0), self.needs(a))
    }

    /// Normalize the last axis to zero mean, unit variance (epsilon 1e-5).
    /// Affine gain/bias are applied separately via `mul_vec`/`add_bias`.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let e = va.last_extent();
        let mut out = va.clone();
        par::for_each_row(out.data_mut(), e, |_, row| {
            let (mean, rstd) = row_moments(row);
            for x in row.iter_mut() {
                *x = (*x - mean) * rstd;
            }
        });
        self.push(out, Op::LayerNorm(a.0), self.needs(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| gelu_fwd(x)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(out, Op::Gelu(a.0), self.needs(a))
    }

    /// Identity in eval mode or at rate zero; otherwise zero each element
    /// with probability `rate` and rescale the survivors.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !self.train || rate <= 0.0 {
            return Ok(a);
        }
        if rate >= 1.0 {
            return Err(NumericsError::Invalid(format!(
                "dropout rate {rate} out of range"
            )));
        }
        let n = self.value(a).len();
        let mask: Vec<bool> = (0..n).map(|_| self.rng.gen::<f64>() >= rate).collect();
        let keep_scale = T::from_f64(1.0 / (1.0 - rate));
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &keep)| if keep { x * keep_scale } else { T::ZERO })
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(
            out,
            Op::Dropout {
                input: a.0,
                mask,
                keep_scale,
            },
            self.needs(a),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshaped(shape)?;
        self.push(out, Op::Reshape(a.0), self.needs(a))
    }

    /// Concatenate along the last axis; all other extents must match.
    pub fn concat_last(&mut self, inputs: &[Var]) -> Result<Var> {
        assert!(!inputs.is_empty());
        let first = self.value(inputs[0]).shape().to_vec();
        let lead = &first[..first.len() - 1];
        let mut total_last = 0usize;
        for &v in inputs {
            let s = self.value(v).shape();
            if &s[..s.len() - 1] != lead {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_last",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total_last += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total_last);
        for r in 0..rows {
            for &v in inputs {
                let t = self.value(v);
                let e = t.last_extent();
                data.extend_from_slice(&t.data()[r * e..(r + 1) * e]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total_last);
        let out = Tensor::new(shape, data)?;
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(
            out,
            Op::ConcatLast(inputs.iter().map(|v| v.0).collect()),
            needs,
        )
    }

    /// For a rank-3 `(b, d, e)` input, select position `i` of the middle
    /// axis, yielding `(b, e)`.
    pub fn index_axis1(&mut self, a: Var, i: usize) -> Result<Var> {
        let va = self.value(a);
        let s = va.shape();
        if s.len() != 3 || i >= s[1] {
            return Err(NumericsError::InvalidShape {
                op: "index_axis1",
                shape: s.to_vec(),
                reason: format!("expected rank 3 with middle extent > {i}"),
            });
        }
        let (b, d, e) = (s[0], s[1], s[2]);
        let mut data = Vec::with_capacity(b * e);
        for bi in 0..b {
            let off = (bi * d + i) * e;
            data.extend_from_slice(&va.data()[off..off + e]);
        }
        let out = Tensor::new(vec![b, e], data)?;
        self.push(out, Op::IndexAxis1(a.0, i), self.needs(a))
    }

    /// Select a subset of rows of a rank-2 tensor.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let s = va.shape();
        if s.len() != 2 || rows.iter().any(|&r| r >= s[0]) {
            return Err(NumericsError::InvalidShape {
                op: "select_rows",
                shape: s.to_vec(),
                reason: "expected rank 2 and in-range row indices".into(),
            });
        }
        let c = s[1];
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(&va.data()[r * c..(r + 1) * c]);
        }
        let out = Tensor::new(vec![rows.len(), c], data)?;
        self.push(out, Op::SelectRows(a.0, rows.to_vec()), self.needs(a))
    }

    /// For a rank-2 `(m, c)` input and one column index per row, gather
    /// `a[r, cols[r]]` into a length-m vector.
    pub fn select_per_row(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let s = va.shape();
        if s.len() != 2 || cols.len() != s[0] || cols.iter().any(|&c| c >= s[1]) {
            return Err(NumericsError::InvalidShape {
                op: "select_per_row",
                shape: s.to_vec(),
                reason: "expected rank 2 with one in-range column per row".into(),
            });
        }
        let c = s[1];
        let data: Vec<T> = cols
            .iter()
            .enumerate()
            .map(|(r, &j)| va.data()[r * c + j])
            .collect();
        let out = Tensor::new(vec![cols.len()], data)?;
        self.push(out, Op::SelectPerRow(a.0, cols.to_vec()), self.needs(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let mut s = T::ZERO;
        for &x in self.value(a).data() {
            s += x;
        }
        self.push(Tensor::scalar(s), Op::SumAll(a.0), self.needs(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s = self.sum_all(a)?;
        self.scale(s, T::from_f64(1.0 / n as f64))
    }

    /// Embed a batch of raw attribute values. Every position receives its
    /// attribute-index embedding; masked positions carry the mask indicator
    /// in place of content.
    pub fn embed(
        &mut self,
        spec: EmbedSpec<T>,
        attrs: Vec<AttrParamVars>,
        attr_emb: Var,
        mask_emb: Var,
    ) -> Result<Var> {
        let e = self.value(mask_emb).shape()[0];
        let d = spec.d;
        if attrs.len() != d
            || self.value(attr_emb).shape() != [d, e]
            || spec.entries.len() != spec.rows * d
        {
            return Err(NumericsError::Invalid(format!(
                "embed: inconsistent spec ({} attrs, attr_emb {:?}, {} entries for {}x{})",
                attrs.len(),
                self.value(attr_emb).shape(),
                spec.entries.len(),
                spec.rows,
                d
            )));
        }
        let mut out = Tensor::zeros(&[spec.rows, d, e]);
        {
            let ae = self.value(attr_emb).data().to_vec();
            let me = self.value(mask_emb).data().to_vec();
            let odata = out.data_mut();
            for r in 0..spec.rows {
                for a in 0..d {
                    let dst = &mut odata[(r * d + a) * e..(r * d + a + 1) * e];
                    dst.copy_from_slice(&ae[a * e..(a + 1) * e]);
                    match (spec.entries[r * d + a], attrs[a]) {
                        (EmbedEntry::Masked, _) => {
                            for (o, &m) in dst.iter_mut().zip(&me) {
                                *o += m;
                            }
                        }
                        (EmbedEntry::Cat(v), AttrParamVars::Cat { table }) => {
                            let t = &self.nodes[table.0].value;
                            if v >= t.shape()[0] {
                                return Err(NumericsError::Invalid(format!(
                                    "embed: attribute {a} index {v} outside vocab {}",
                                    t.shape()[0]
                                )));
                            }
                            for (o, &c) in dst.iter_mut().zip(&t.data()[v * e..(v + 1) * e]) {
                                *o += c;
                            }
                        }
                        (EmbedEntry::Cont(x), AttrParamVars::Cont { weight, bias }) => {
                            if !x.is_finite() {
                                return Err(NumericsError::NonFinite { op: "embed" });
                            }
                            let w = self.nodes[weight.0].value.data();
                            let b = self.nodes[bias.0].value.data();
                            for j in 0..e {
                                dst[j] += x * w[j] + b[j];
                            }
                        }
                        _ => {
                            return Err(NumericsError::Invalid(format!(
                                "embed: attribute {a} kind does not match its entry"
                            )))
                        }
                    }
                }
            }
        }
        let mut needs = self.needs(attr_emb) || self.needs(mask_emb);
        for ap in &attrs {
            needs |= match *ap {
                AttrParamVars::Cat { table } => self.needs(table),
                AttrParamVars::Cont { weight, bias } => self.needs(weight) || self.needs(bias),
            };
        }
        self.push(
            out,
            Op::Embed {
                spec,
                attrs,
                attr_emb: attr_emb.0,
                mask_emb: mask_emb.0,
            },
            needs,
        )
    }

    /// Reverse pass from a scalar loss. Returns a gradient per leaf
    /// parameter; intermediate gradients are dropped once consumed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).shape() != [1] {
            return Err(NumericsError::NotScalar {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::ONE));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            self.accumulate_inputs(id, &gout, &mut grads)?;
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(gout);
            }
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], id: usize, contrib: Tensor<T>) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => {
                for (a, &b) in g.data_mut().iter_mut().zip(contrib.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    fn accumulate_inputs(
        &self,
        id: usize,
        gout: &Tensor<T>,
        grads: &mut Vec<Option<Tensor<T>>>,
    ) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(grads, a, gout.clone());
                self.accum(grads, b, gout.clone());
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                let mut g = gout.clone();
                for x in g.data_mut() {
                    *x *= c;
                }
                self.accum(grads, a, g);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a].needs_grad {
                    let mut g = gout.clone();
                    for (x, &y) in g.data_mut().iter_mut().zip(self.nodes[b].value.data()) {
                        *x *= y;
                    }
                    self.accum(grads, a, g);
                }
                if self.nodes[b].needs_grad {
                    let mut g = gout.clone();
                    for (x, &y) in g.data_mut().iter_mut().zip(self.nodes[a].value.data()) {
                        *x *= y;
                    }
                    self.accum(grads, b, g);
                }
            }
            Op::AddBias(a, bias) => {
                let (a, bias) = (*a, *bias);
                self.accum(grads, a, gout.clone());
                if self.nodes[bias].needs_grad {
                    let e = self.nodes[bias].value.len();
                    let mut g = Tensor::zeros(&[e]);
                    for row in gout.data().chunks(e) {
                        for (o, &x) in g.data_mut().iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                    self.accum(grads, bias, g);
                }
            }
            Op::MulVec(a, v) => {
                let (a, v) = (*a, *v);
                let e = self.nodes[v].value.len();
                if self.nodes[a].needs_grad {
                    let vdat = self.nodes[v].value.data().to_vec();
                    let mut g = gout.clone();
                    for row in g.data_mut().chunks_mut(e) {
                        for (o, &s) in row.iter_mut().zip(&vdat) {
                            *o *= s;
                        }
                    }
                    self.accum(grads, a, g);
                }
                if self.nodes[v].needs_grad {
                    let mut g = Tensor::zeros(&[e]);
                    for (grow, arow) in gout
                        .data()
                        .chunks(e)
                        .zip(self.nodes[a].value.data().chunks(e))
                    {
                        for j in 0..e {
                            g.data_mut()[j] += grow[j] * arow[j];
                        }
                    }
                    self.accum(grads, v, g);
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (a, b, trans_b) = (*a, *b, *trans_b);
                let dims = mm_dims(
                    self.nodes[a].value.shape(),
                    self.nodes[b].value.shape(),
                    trans_b,
                    "matmul-backward",
                )?;
                if self.nodes[a].needs_grad {
                    // dA = dY * B^T   (or dY * B when forward transposed B)
                    let mut ga = Tensor::zeros(self.nodes[a].value.shape());
                    let gd = MmDims {
                        batch: dims.batch,
                        m: dims.m,
                        p: dims.q,
                        q: dims.p,
                        a_stride: dims.m * dims.q,
                        b_stride: dims.b_stride,
                        out_stride: if dims.a_stride == 0 { 0 } else { dims.m * dims.p },
                        out_shape: vec![],
                    };
                    let mode = if trans_b { MatMode::NN } else { MatMode::NT };
                    run_mm(
                        gout.data(),
                        self.nodes[b].value.data(),
                        ga.data_mut(),
                        &gd,
                        mode,
                        &self.flops,
                    );
                    self.accum(grads, a, ga);
                }
                if self.nodes[b].needs_grad {
                    let mut gb = Tensor::zeros(self.nodes[b].value.shape());
                    let (gd, mode) = if trans_b {
                        // B stored (q, p): dB = dY^T * A
                        (
                            MmDims {
                                batch: dims.batch,
                                m: dims.q,
                                p: dims.m,
                                q: dims.p,
                                a_stride: dims.m * dims.q,
                                b_stride: dims.a_stride,
                                out_stride: if dims.b_stride == 0 {
                                    0
                                } else {
                                    dims.q * dims.p
                                },
                                out_shape: vec![],
                            },
                            MatMode::TN,
                        )
                    } else {
                        // dB = A^T * dY
                        (
                            MmDims {
                                batch: dims.batch,
                                m: dims.p,
                                p: dims.m,
                                q: dims.q,
                                a_stride: dims.a_stride,
                                b_stride: dims.m * dims.q,
                                out_stride: if dims.b_stride == 0 {
                                    0
                                } else {
                                    dims.p * dims.q
                                },
                                out_shape: vec![],
                            },
                            MatMode::TN,
                        )
                    };
                    if trans_b {
                        run_mm(
                            gout.data(),
                            self.nodes[a].value.data(),
                            gb.data_mut(),
                            &gd,
                            mode,
                            &self.flops,
                        );
                    } else {
                        run_mm(
                            self.nodes[a].value.data(),
                            gout.data(),
                            gb.data_mut(),
                            &gd,
                            mode,
                            &self.flops,
                        );
                    }
                    self.accum(grads, b, gb);
                }
            }
            Op::Softmax(a) => {
                let a = *a;
                let e = self.nodes[id].value.last_extent();
                let y = self.nodes[id].value.clone();
                let mut g = gout.clone();
                par::for_each_row(g.data_mut(), e, |r, grow| {
                    let yrow = &y.data()[r * e..(r + 1) * e];
                    let mut dot = T::ZERO;
                    for j in 0..e {
                        dot += grow[j] * yrow[j];
                    }
                    for j in 0..e {
                        grow[j] = yrow[j] * (grow[j] - dot);
                    }
                });
                self.accum(grads, a, g);
            }
            Op::LogSoftmax(a) => {
                let a = *a;
                let e = self.nodes[id].value.last_extent();
                let y = self.nodes[id].value.clone();
                let mut g = gout.clone();
                par::for_each_row(g.data_mut(), e, |r, grow| {
                    let yrow = &y.data()[r * e..(r + 1) * e];
                    let mut s = T::ZERO;
                    for j in 0..e {
                        s += grow[j];
                    }
                    for j in 0..e {
                        grow[j] -= yrow[j].exp() * s;
                    }
                });
                self.accum(grads, a, g);
            }
            Op::LayerNorm(a) => {
                let a = *a;
                let e = self.nodes[id].value.last_extent();
                let x = self.nodes[a].value.clone();
                let mut g = gout.clone();
                par::for_each_row(g.data_mut(), e, |r, grow| {
                    let xrow = &x.data()[r * e..(r + 1) * e];
                    let (mean, rstd) = row_moments(xrow);
                    let inv_e = T::from_f64(1.0 / e as f64);
                    let mut gmean = T::ZERO;
                    let mut gydot = T::ZERO;
                    for j in 0..e {
                        let yj = (xrow[j] - mean) * rstd;
                        gmean += grow[j];
                        gydot += grow[j] * yj;
                    }
                    gmean *= inv_e;
                    gydot *= inv_e;
                    for j in 0..e {
                        let yj = (xrow[j] - mean) * rstd;
                        grow[j] = rstd * (grow[j] - gmean - yj * gydot);
                    }
                });
                self.accum(grads, a, g);
            }
            Op::Gelu(a) => {
                let a = *a;
                let mut g = gout.clone();
                for (gx, &x) in g.data_mut().iter_mut().zip(self.nodes[a].value.data()) {
                    *gx *= gelu_grad(x);
                }
                self.accum(grads, a, g);
            }
            Op::Reshape(a) => {
                let a = *a;
                let g = gout.reshaped(self.nodes[a].value.shape())?;
                self.accum(grads, a, g);
            }
            Op::ConcatLast(inputs) => {
                let inputs = inputs.clone();
                let lasts: Vec<usize> = inputs
                    .iter()
                    .map(|&i| self.nodes[i].value.last_extent())
                    .collect();
                let total: usize = lasts.iter().sum();
                let rows = gout.len() / total;
                for (k, &inp) in inputs.iter().enumerate() {
                    if !self.nodes[inp].needs_grad {
                        continue;
                    }
                    let e = lasts[k];
                    let off: usize = lasts[..k].iter().sum();
                    let mut g = Tensor::zeros(self.nodes[inp].value.shape());
                    for r in 0..rows {
                        let src = &gout.data()[r * total + off..r * total + off + e];
                        g.data_mut()[r * e..(r + 1) * e].copy_from_slice(src);
                    }
                    self.accum(grads, inp, g);
                }
            }
            Op::IndexAxis1(a, i) => {
                let (a, i) = (*a, *i);
                let s = self.nodes[a].value.shape().to_vec();
                let (b, d, e) = (s[0], s[1], s[2]);
                let mut g = Tensor::zeros(&[b, d, e]);
                for bi in 0..b {
                    let off = (bi * d + i) * e;
                    g.data_mut()[off..off + e].copy_from_slice(&gout.data()[bi * e..(bi + 1) * e]);
                }
                self.accum(grads, a, g);
            }
            Op::SelectRows(a, rows) => {
                let a = *a;
                let rows = rows.clone();
                let c = self.nodes[a].value.shape()[1];
                let mut g = Tensor::zeros(self.nodes[a].value.shape());
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        g.data_mut()[r * c + j] += gout.data()[k * c + j];
                    }
                }
                self.accum(grads, a, g);
            }
            Op::SelectPerRow(a, cols) => {
                let a = *a;
                let cols = cols.clone();
                let c = self.nodes[a].value.shape()[1];
                let mut g = Tensor::zeros(self.nodes[a].value.shape());
                for (r, &j) in cols.iter().enumerate() {
                    g.data_mut()[r * c + j] += gout.data()[r];
                }
                self.accum(grads, a, g);
            }
            Op::SumAll(a) => {
                let a = *a;
                let g = Tensor::full(self.nodes[a].value.shape(), gout.data()[0]);
                self.accum(grads, a, g);
            }
            Op::Dropout {
                input,
                mask,
                keep_scale,
            } => {
                let (input, ks) = (*input, *keep_scale);
                let mask = mask.clone();
                let mut g = gout.clone();
                for (x, &keep) in g.data_mut().iter_mut().zip(&mask) {
                    if keep {
                        *x *= ks;
                    } else {
                        *x = T::ZERO;
                    }
                }
                self.accum(grads, input, g);
            }
            Op::Embed {
                spec,
                attrs,
                attr_emb,
                mask_emb,
            } => {
                let spec = spec.clone();
                let attrs = attrs.clone();
                let (attr_emb, mask_emb) = (*attr_emb, *mask_emb);
                let e = self.nodes[mask_emb].value.len();
                let d = spec.d;
                if self.nodes[attr_emb].needs_grad {
                    let mut g = Tensor::zeros(&[d, e]);
                    for r in 0..spec.rows {
                        for a in 0..d {
                            let src = &gout.data()[(r * d + a) * e..(r * d + a + 1) * e];
                            for j in 0..e {
                                g.data_mut()[a * e + j] += src[j];
                            }
                        }
                    }
                    self.accum(grads, attr_emb, g);
                }
                if self.nodes[mask_emb].needs_grad {
                    let mut g = Tensor::zeros(&[e]);
                    for r in 0..spec.rows {
                        for a in 0..d {
                            if matches!(spec.entries[r * d + a], EmbedEntry::Masked) {
                                let src = &gout.data()[(r * d + a) * e..(r * d + a + 1) * e];
                                for j in 0..e {
                                    g.data_mut()[j] += src[j];
                                }
                            }
                        }
                    }
                    self.accum(grads, mask_emb, g);
                }
                for (a, ap) in attrs.iter().enumerate() {
                    match *ap {
                        AttrParamVars::Cat { table } => {
                            if !self.nodes[table.0].needs_grad {
                                continue;
                            }
                            let mut g = Tensor::zeros(self.nodes[table.0].value.shape());
                            for r in 0..spec.rows {
                                if let EmbedEntry::Cat(v) = spec.entries[r * d + a] {
                                    let src =
                                        &gout.data()[(r * d + a) * e..(r * d + a + 1) * e];
                                    for j in 0..e {
                                        g.data_mut()[v * e + j] += src[j];
                                    }
                                }
                            }
                            self.accum(grads, table.0, g);
                        }
                        AttrParamVars::Cont { weight, bias } => {
                            if !self.nodes[weight.0].needs_grad
                                && !self.nodes[bias.0].needs_grad
                            {
                                continue;
                            }
                            let mut gw = Tensor::zeros(&[e]);
                            let mut gb = Tensor::zeros(&[e]);
                            for r in 0..spec.rows {
                                if let EmbedEntry::Cont(x) = spec.entries[r * d + a] {
                                    let src =
                                        &gout.data()[(r * d + a) * e..(r * d + a + 1) * e];
                                    for j in 0..e {
                                        gw.data_mut()[j] += x * src[j];
                                        gb.data_mut()[j] += src[j];
                                    }
                                }
                            }
                            self.accum(grads, weight.0, gw);
                            self.accum(grads, bias.0, gb);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::AddBias(..) => "add_bias",
        Op::Mul(..) => "mul",
        Op::MulVec(..) => "mul_vec",
        Op::Scale(..) => "scale",
        Op::MatMul { .. } => "matmul",
        Op::Softmax(..) => "softmax",
        Op::LogSoftmax(..) => "log_softmax",
        Op::LayerNorm(..) => "layer_norm",
        Op::Gelu(..) => "gelu",
        Op::Reshape(..) => "reshape",
        Op::ConcatLast(..) => "concat_last",
        Op::IndexAxis1(..) => "index_axis1",
        Op::SelectRows(..) => "select_rows",
        Op::SelectPerRow(..) => "select_per_row",
        Op::SumAll(..) => "sum_all",
        Op::Dropout { .. } => "dropout",
        Op::Embed { .. } => "embed",
    }
}

const LN_EPS: f64 = 1e-5;

fn row_moments<T: Scalar>(row: &[T]) -> (T, T) {
    let inv_e = T::from_f64(1.0 / row.len() as f64);
    let mut mean = T::ZERO;
    for &x in row {
        mean += x;
    }
    mean *= inv_e;
    let mut var = T::ZERO;
    for &x in row {
        let d = x - mean;
        var += d * d;
    }
    var *= inv_e;
    let rstd = T::ONE / (var + T::from_f64(LN_EPS)).sqrt();
    (mean, rstd)
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let k = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let c = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * x * (T::ONE + t)
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::from_f64(0.797_884_560_802_865_4);
    let c = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = k * (x + c * x * x * x);
    let t = inner.tanh();
    let sech2 = T::ONE - t * t;
    half * (T::ONE + t) + half * x * sech2 * k * (T::ONE + three * c * x * x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MatMode {
    /// a stored (m,p), b stored (p,q)
    NN,
    /// a stored (m,p), b stored (q,p), used transposed
    NT,
    /// a stored (p,m), used transposed, b stored (p,q)
    TN,
}

#[derive(Debug)]
struct MmDims {
    batch: usize,
    m: usize,
    p: usize,
    q: usize,
    /// elements to advance per batch; 0 broadcasts
    a_stride: usize,
    b_stride: usize,
    out_stride: usize,
    out_shape: Vec<usize>,
}

fn mm_dims(
    a_shape: &[usize],
    b_shape: &[usize],
    trans_b: bool,
    op: &'static str,
) -> Result<MmDims> {
    let mismatch = || NumericsError::ShapeMismatch {
        op,
        lhs: a_shape.to_vec(),
        rhs: b_shape.to_vec(),
    };
    if !(2..=3).contains(&a_shape.len()) || !(2..=3).contains(&b_shape.len()) {
        return Err(mismatch());
    }
    let (m, p) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
    let (bp, q) = if trans_b {
        (b_shape[b_shape.len() - 1], b_shape[b_shape.len() - 2])
    } else {
        (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1])
    };
    if bp != p {
        return Err(mismatch());
    }
    let ab = if a_shape.len() == 3 { a_shape[0] } else { 1 };
    let bb = if b_shape.len() == 3 { b_shape[0] } else { 1 };
    let batch = if a_shape.len() == 3 && b_shape.len() == 3 {
        if ab != bb {
            return Err(mismatch());
        }
        ab
    } else {
        ab.max(bb)
    };
    let out_shape = if a_shape.len() == 3 || b_shape.len() == 3 {
        vec![batch, m, q]
    } else {
        vec![m, q]
    };
    Ok(MmDims {
        batch,
        m,
        p,
        q,
        a_stride: if a_shape.len() == 3 { m * p } else { 0 },
        b_stride: if b_shape.len() == 3 { p * q } else { 0 },
        out_stride: m * q,
        out_shape,
    })
}

/// Drive the matmul kernel over batches. `out` is accumulated into; when
/// `out_stride` is zero every batch adds into the same `m x q` block
/// (broadcast-gradient reduction), with batches processed in order.
fn run_mm<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    dims: &MmDims,
    mode: MatMode,
    flops: &std::cell::Cell<u64>,
) {
    flops.set(flops.get() + 2 * (dims.batch * dims.m * dims.p * dims.q) as u64);
    for bi in 0..dims.batch {
        let ab = &a[bi * dims.a_stride..];
        let bb = &b[bi * dims.b_stride..];
        let ob = &mut out[bi * dims.out_stride..][..dims.m * dims.q];
        mm_one(ab, bb, ob, dims.m, dims.p, dims.q, mode);
    }
}

/// One batch: accumulate `A (m,p) * B (p,q)` into `out (m,q)`; rows of the
/// output are independent and may run in parallel.
fn mm_one<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, p: usize, q: usize, mode: MatMode) {
    match mode {
        MatMode::NN => par::for_each_row(out, q, |i, orow| {
            let arow = &a[i * p..(i + 1) * p];
            for (pp, &s) in arow.iter().enumerate() {
                let brow = &b[pp * q..(pp + 1) * q];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += s * bv;
                }
            }
        }),
        MatMode::NT => par::for_each_row(out, q, |i, orow| {
            let arow = &a[i * p..(i + 1) * p];
            for (j, o) in orow.iter_mut().enumerate() {
                *o += dot4(arow, &b[j * p..(j + 1) * p]);
            }
        }),
        MatMode::TN => par::for_each_row(out, q, |i, orow| {
            // a stored (p, m), logical row i is the strided column i
            for pp in 0..p {
                let s = a[pp * m + i];
                let brow = &b[pp * q..(pp + 1) * q];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += s * bv;
                }
            }
        }),
    }
}

/// Four-accumulator dot product; the lane split is fixed, so the summation
/// order is identical on every run.
fn dot4<T: Scalar>(x: &[T], y: &[T]) -> T {
    let n = x.len();
    let mut acc = [T::ZERO; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += x[i] * y[i];
        acc[1] += x[i + 1] * y[i + 1];
        acc[2] += x[i + 2] * y[i + 2];
        acc[3] += x[i + 3] * y[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..n {
        s += x[i] * y[i];
    }
    s
}
