//! Dot-product attention, multi-head attention, and the pre-norm
//! multi-head attention block (MAB) that every encoder sublayer wraps.
//!
//! All functions are stateless given their parameters: they only append to
//! the caller's graph, so concurrent forward passes over shared read-only
//! parameter tensors are safe.

use rand::Rng;

use crate::numerics::{Graph, NumericsError, Result, Scalar, Tensor, Var};

/// Scaled dot-product attention: `softmax(Q K^T / sqrt(e_q)) V`,
/// softmax over the key axis.
///
/// `q` is `(d_q, e_q)` or `(b, d_q, e_q)`; `k` is `(d_v, e_q)`, `v` is
/// `(d_v, e_v)`, either batched alike. A rank-2 operand broadcasts over the
/// other's batch extent. Returns `(.., d_q, e_v)`.
pub fn att<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    att_dropout(g, q, k, v, 0.0)
}

/// [`att`] with dropout on the attention weights (train mode only).
pub fn att_dropout<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, rate: f64) -> Result<Var> {
    let e_q = g.value(q).last_extent();
    let scores = g.matmul_t(q, k, true)?;
    let scaled = g.scale(scores, T::from_f64(1.0 / (e_q as f64).sqrt()))?;
    let weights = g.softmax(scaled)?;
    let weights = g.dropout(weights, rate)?;
    g.matmul(weights, v)
}

/// Per-head projections packed head-major: `wq`/`wk` are `(e_q, e_q)`,
/// `wv` is `(e_v, e_h * e_vh)`, `wo` mixes the concatenated heads back to
/// `e_o = e_q`. Head `j` owns columns `j*e_qh..(j+1)*e_qh`.
#[derive(Debug, Clone)]
pub struct MhaParams<T> {
    pub heads: usize,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

/// Graph handles for one bound [`MhaParams`].
#[derive(Debug, Clone, Copy)]
pub struct MhaVars {
    pub heads: usize,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

impl<T: Scalar> MhaParams<T> {
    /// Xavier-uniform init. Errors unless `heads` divides both widths.
    pub fn init<R: Rng>(e_q: usize, e_v: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || e_q % heads != 0 || e_v % heads != 0 {
            return Err(NumericsError::Invalid(format!(
                "mha: {heads} heads must divide query width {e_q} and value width {e_v}"
            )));
        }
        Ok(MhaParams {
            heads,
            wq: xavier(&[e_q, e_q], rng),
            wk: xavier(&[e_q, e_q], rng),
            wv: xavier(&[e_v, e_v], rng),
            wo: xavier(&[e_v, e_q], rng),
        })
    }

    pub fn bind(&self, g: &mut Graph<T>) -> MhaVars {
        MhaVars {
            heads: self.heads,
            wq: g.param(self.wq.clone()),
            wk: g.param(self.wk.clone()),
            wv: g.param(self.wv.clone()),
            wo: g.param(self.wo.clone()),
        }
    }

    pub fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.wq"), &self.wq);
        f(format!("{prefix}.wk"), &self.wk);
        f(format!("{prefix}.wv"), &self.wv);
        f(format!("{prefix}.wo"), &self.wo);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.wq"), &mut self.wq);
        f(format!("{prefix}.wk"), &mut self.wk);
        f(format!("{prefix}.wv"), &mut self.wv);
        f(format!("{prefix}.wo"), &mut self.wo);
    }
}

impl MhaVars {
    pub fn list(&self) -> Vec<Var> {
        vec![self.wq, self.wk, self.wv, self.wo]
    }

    /// Rebuild from a var stream laid out in [`MhaParams::for_each`] order.
    pub fn take(heads: usize, it: &mut impl Iterator<Item = Var>) -> Self {
        MhaVars {
            heads,
            wq: it.next().expect("wq"),
            wk: it.next().expect("wk"),
            wv: it.next().expect("wv"),
            wo: it.next().expect("wo"),
        }
    }
}

/// Multi-head attention: project Q/K/V per head, attend per head with
/// `sqrt(e_qh)` scaling, concatenate, and mix with `wo`.
pub fn mha<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    p: &MhaVars,
    rate: f64,
) -> Result<Var> {
    let pq = g.matmul(q, p.wq)?;
    let pk = g.matmul(k, p.wk)?;
    let pv = g.matmul(v, p.wv)?;
    let mut heads = Vec::with_capacity(p.heads);
    for j in 0..p.heads {
        let qh = take_head(g, pq, p.heads, j)?;
        let kh = take_head(g, pk, p.heads, j)?;
        let vh = take_head(g, pv, p.heads, j)?;
        heads.push(att_dropout(g, qh, kh, vh, rate)?);
    }
    let cat = g.concat_last(&heads)?;
    g.matmul(cat, p.wo)
}

/// Slice head `j`'s contiguous column block out of a packed projection.
fn take_head<T: Scalar>(g: &mut Graph<T>, x: Var, heads: usize, j: usize) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let width = shape[shape.len() - 1];
    let per = width / heads;
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let split = g.reshape(x, &[rows, heads, per])?;
    let head = g.index_axis1(split, j)?;
    let mut out = shape;
    *out.last_mut().unwrap() = per;
    g.reshape(head, &out)
}

/// Layer-norm gain and bias, applied after the parameter-free normalization.
#[derive(Debug, Clone)]
pub struct LnParams<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct LnVars {
    pub gain: Var,
    pub bias: Var,
}

impl<T: Scalar> LnParams<T> {
    pub fn init(e: usize) -> Self {
        LnParams {
            gain: Tensor::full(&[e], T::ONE),
            bias: Tensor::zeros(&[e]),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> LnVars {
        LnVars {
            gain: g.param(self.gain.clone()),
            bias: g.param(self.bias.clone()),
        }
    }

    pub fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.gain"), &self.gain);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.gain"), &mut self.gain);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

pub fn layer_norm_affine<T: Scalar>(g: &mut Graph<T>, x: Var, p: &LnVars) -> Result<Var> {
    let n = g.layer_norm(x)?;
    let scaled = g.mul_vec(n, p.gain)?;
    g.add_bias(scaled, p.bias)
}

/// Position-wise feed-forward `e -> 4e -> e` with GELU.
#[derive(Debug, Clone)]
pub struct FfParams<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct FfVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl<T: Scalar> FfParams<T> {
    pub fn init<R: Rng>(e: usize, rng: &mut R) -> Self {
        FfParams {
            w1: xavier(&[e, 4 * e], rng),
            b1: Tensor::zeros(&[4 * e]),
            w2: xavier(&[4 * e, e], rng),
            b2: Tensor::zeros(&[e]),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> FfVars {
        FfVars {
            w1: g.param(self.w1.clone()),
            b1: g.param(self.b1.clone()),
            w2: g.param(self.w2.clone()),
            b2: g.param(self.b2.clone()),
        }
    }

    pub fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.w1"), &mut self.w1);
        f(format!("{prefix}.b1"), &mut self.b1);
        f(format!("{prefix}.w2"), &mut self.w2);
        f(format!("{prefix}.b2"), &mut self.b2);
    }
}

pub fn feed_forward<T: Scalar>(g: &mut Graph<T>, x: Var, p: &FfVars) -> Result<Var> {
    let h = g.matmul(x, p.w1)?;
    let h = g.add_bias(h, p.b1)?;
    let h = g.gelu(h)?;
    let h = g.matmul(h, p.w2)?;
    g.add_bias(h, p.b2)
}

/// Pre-norm attention block:
/// `O = X + MHA(LayerNorm(X), H, H)`; `MAB(X, H) = O + FF(LayerNorm(O))`.
///
/// X is normalized before attending; H enters raw. Input and output widths
/// are equal, a requirement of the two residual connections.
#[derive(Debug, Clone)]
pub struct MabParams<T> {
    pub mha: MhaParams<T>,
    pub ln_x: LnParams<T>,
    pub ln_o: LnParams<T>,
    pub ff: FfParams<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct MabVars {
    pub mha: MhaVars,
    pub ln_x: LnVars,
    pub ln_o: LnVars,
    pub ff: FfVars,
}

impl<T: Scalar> MabParams<T> {
    pub fn init<R: Rng>(e: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(MabParams {
            mha: MhaParams::init(e, e, heads, rng)?,
            ln_x: LnParams::init(e),
            ln_o: LnParams::init(e),
            ff: FfParams::init(e, rng),
        })
    }

    pub fn bind(&self, g: &mut Graph<T>) -> MabVars {
        MabVars {
            mha: self.mha.bind(g),
            ln_x: self.ln_x.bind(g),
            ln_o: self.ln_o.bind(g),
            ff: self.ff.bind(g),
        }
    }

    pub fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.mha.for_each(&format!("{prefix}.mha"), f);
        self.ln_x.for_each(&format!("{prefix}.ln_x"), f);
        self.ln_o.for_each(&format!("{prefix}.ln_o"), f);
        self.ff.for_each(&format!("{prefix}.ff"), f);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.mha.for_each_mut(&format!("{prefix}.mha"), f);
        self.ln_x.for_each_mut(&format!("{prefix}.ln_x"), f);
        self.ln_o.for_each_mut(&format!("{prefix}.ln_o"), f);
        self.ff.for_each_mut(&format!("{prefix}.ff"), f);
    }
}

impl MabVars {
    /// Rebuild from a var stream laid out in [`MabParams::for_each`] order.
    pub fn take(heads: usize, it: &mut impl Iterator<Item = Var>) -> Self {
        let mha = MhaVars::take(heads, it);
        let mut two = || LnVars {
            gain: it.next().expect("gain"),
            bias: it.next().expect("bias"),
        };
        let ln_x = two();
        let ln_o = two();
        let ff = FfVars {
            w1: it.next().expect("w1"),
            b1: it.next().expect("b1"),
            w2: it.next().expect("w2"),
            b2: it.next().expect("b2"),
        };
        MabVars { mha, ln_x, ln_o, ff }
    }

    pub fn list(&self) -> Vec<Var> {
        let mut out = self.mha.list();
        out.extend([self.ln_x.gain, self.ln_x.bias, self.ln_o.gain, self.ln_o.bias]);
        out.extend([self.ff.w1, self.ff.b1, self.ff.w2, self.ff.b2]);
        out
    }
}

pub fn mab<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    h: Var,
    p: &MabVars,
    rate: f64,
) -> Result<Var> {
    let ex = g.value(x).last_extent();
    let eh = g.value(h).last_extent();
    if ex != eh {
        return Err(NumericsError::ShapeMismatch {
            op: "mab",
            lhs: g.value(x).shape().to_vec(),
            rhs: g.value(h).shape().to_vec(),
        });
    }
    let xn = layer_norm_affine(g, x, &p.ln_x)?;
    let attended = mha(g, xn, h, h, &p.mha, rate)?;
    let o = g.add(x, attended)?;
    let on = layer_norm_affine(g, o, &p.ln_o)?;
    let ff = feed_forward(g, on, &p.ff)?;
    g.add(o, ff)
}

/// Xavier-uniform init for a rank-2 weight.
pub fn xavier<T: Scalar, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
    Tensor::uniform(shape, limit, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use proptest::prelude::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn leafed<'a>(g: &mut Graph<f64>, ts: &[&Tensor<f64>]) -> Vec<Var> {
        ts.iter().map(|t| g.leaf((*t).clone())).collect()
    }

    #[test]
    fn identical_keys_average_the_values() {
        let mut g = Graph::<f64>::new();
        let q = Tensor::from_f64s(&[2, 3], &[0.3, -1.0, 2.0, 5.0, 0.0, -0.7]).unwrap();
        let k = Tensor::from_f64s(&[4, 3], &[1.0, 2.0, -0.5].repeat(4).as_slice()).unwrap();
        let v = Tensor::from_f64s(&[4, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let vs = leafed(&mut g, &[&q, &k, &v]);
        let out = att(&mut g, vs[0], vs[1], vs[2]).unwrap();
        let expect = Tensor::from_f64s(&[2, 2], &[4.0, 5.0, 4.0, 5.0]).unwrap();
        assert!(g.value(out).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn two_key_weights_match_arbitrary_precision_values() {
        // softmax([1/sqrt(2), 0]) evaluated to 30 digits
        let w0 = 0.669761549326656925616794945834_f64;
        let mut g = Graph::<f64>::new();
        let q = Tensor::from_f64s(&[1, 2], &[1.0, 0.0]).unwrap();
        let kv = Tensor::from_f64s(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let vs = leafed(&mut g, &[&q, &kv, &kv]);
        let out = att(&mut g, vs[0], vs[1], vs[2]).unwrap();
        assert!((g.value(out).data()[0] - w0).abs() < 1e-12);
        assert!((g.value(out).data()[1] - (1.0 - w0)).abs() < 1e-12);
    }

    #[test]
    fn single_value_row_passes_through() {
        let mut g = Graph::<f64>::new();
        let q = Tensor::from_f64s(&[3, 2], &[9.0, -3.0, 0.1, 0.0, 100.0, 2.0]).unwrap();
        let k = Tensor::from_f64s(&[1, 2], &[0.5, 0.5]).unwrap();
        let v = Tensor::from_f64s(&[1, 4], &[1.0, -2.0, 3.0, -4.0]).unwrap();
        let vs = leafed(&mut g, &[&q, &k, &v]);
        let out = att(&mut g, vs[0], vs[1], vs[2]).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                assert_eq!(g.value(out).at2(r, c), v.data()[c]);
            }
        }
    }

    #[test]
    fn key_value_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Tensor::<f64>::uniform(&[3, 4], 1.5, &mut rng);
        let k = Tensor::<f64>::uniform(&[5, 4], 1.5, &mut rng);
        let v = Tensor::<f64>::uniform(&[5, 2], 1.5, &mut rng);
        let perm = [4usize, 0, 3, 1, 2];
        let permute = |t: &Tensor<f64>| {
            let e = t.last_extent();
            let mut data = Vec::new();
            for &r in &perm {
                data.extend_from_slice(&t.data()[r * e..(r + 1) * e]);
            }
            Tensor::new(t.shape().to_vec(), data).unwrap()
        };
        let mut g = Graph::<f64>::new();
        let vs = leafed(&mut g, &[&q, &k, &v, &permute(&k), &permute(&v)]);
        let base = att(&mut g, vs[0], vs[1], vs[2]).unwrap();
        let shuffled = att(&mut g, vs[0], vs[3], vs[4]).unwrap();
        let base = g.value(base).clone();
        assert!(base.max_abs_diff(g.value(shuffled)) < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn att_outputs_are_convex_combinations_of_values(
            qv in proptest::collection::vec(-3.0f64..3.0, 6),
            kv in proptest::collection::vec(-3.0f64..3.0, 12),
            vv in proptest::collection::vec(-3.0f64..3.0, 8),
        ) {
            let mut g = Graph::<f64>::new();
            let q = g.leaf(Tensor::new(vec![2, 3], qv).unwrap());
            let k = g.leaf(Tensor::new(vec![4, 3], kv).unwrap());
            let v = g.leaf(Tensor::new(vec![4, 2], vv.clone()).unwrap());
            let out = att(&mut g, q, k, v).unwrap();
            for c in 0..2 {
                let col: Vec<f64> = (0..4).map(|r| vv[r * 2 + c]).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min) - 1e-12;
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1e-12;
                for r in 0..2 {
                    let x = g.value(out).at2(r, c);
                    prop_assert!(x >= lo && x <= hi, "({r},{c}) = {x} outside [{lo},{hi}]");
                }
            }
        }
    }

    #[test]
    fn extent_mismatch_is_rejected() {
        let mut g = Graph::<f64>::new();
        let q = g.leaf(Tensor::zeros(&[2, 3]));
        let k = g.leaf(Tensor::zeros(&[4, 5]));
        let v = g.leaf(Tensor::zeros(&[4, 2]));
        assert!(att(&mut g, q, k, v).is_err());
    }

    fn identity(n: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data_mut()[i * n + i] = 1.0;
        }
        t
    }

    #[test]
    fn single_head_identity_projections_reduce_to_att() {
        let p = MhaParams {
            heads: 1,
            wq: identity(4),
            wk: identity(4),
            wv: identity(4),
            wo: identity(4),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = Tensor::<f64>::uniform(&[3, 4], 1.0, &mut rng);
        let k = Tensor::<f64>::uniform(&[5, 4], 1.0, &mut rng);
        let v = Tensor::<f64>::uniform(&[5, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let pv = p.bind(&mut g);
        let vs = leafed(&mut g, &[&q, &k, &v]);
        let multi = mha(&mut g, vs[0], vs[1], vs[2], &pv, 0.0).unwrap();
        let plain = att(&mut g, vs[0], vs[1], vs[2]).unwrap();
        let multi = g.value(multi).clone();
        assert!(multi.max_abs_diff(g.value(plain)) < 1e-12);
    }

    #[test]
    fn head_count_must_divide_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(MhaParams::<f64>::init(6, 6, 4, &mut rng).is_err());
        assert!(MhaParams::<f64>::init(6, 6, 0, &mut rng).is_err());
        assert!(MhaParams::<f64>::init(6, 6, 3, &mut rng).is_ok());
    }

    /// Literal per-head loop over raw tensors, no graph machinery.
    fn mha_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, p: &MhaParams<f64>) -> Tensor<f64> {
        let (dq, eq) = (q.shape()[0], q.shape()[1]);
        let (dv, ev) = (v.shape()[0], v.shape()[1]);
        let eo = p.wo.shape()[1];
        let eqh = eq / p.heads;
        let evh = ev / p.heads;
        let proj = |x: &Tensor<f64>, w: &Tensor<f64>| {
            let (n, a) = (x.shape()[0], x.shape()[1]);
            let b = w.shape()[1];
            let mut out = vec![0.0; n * b];
            for i in 0..n {
                for jj in 0..b {
                    let mut s = 0.0;
                    for t in 0..a {
                        s += x.at2(i, t) * w.at2(t, jj);
                    }
                    out[i * b + jj] = s;
                }
            }
            out
        };
        let pq = proj(q, &p.wq);
        let pk = proj(k, &p.wk);
        let pv = proj(v, &p.wv);
        let mut cat = vec![0.0; dq * ev];
        for h in 0..p.heads {
            for i in 0..dq {
                let mut scores = vec![0.0; dv];
                for r in 0..dv {
                    let mut s = 0.0;
                    for t in 0..eqh {
                        s += pq[i * eq + h * eqh + t] * pk[r * eq + h * eqh + t];
                    }
                    scores[r] = s / (eqh as f64).sqrt();
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                for c in 0..evh {
                    let mut s = 0.0;
                    for r in 0..dv {
                        s += exps[r] / z * pv[r * ev + h * evh + c];
                    }
                    cat[i * ev + h * evh + c] = s;
                }
            }
        }
        let mut out = Tensor::zeros(&[dq, eo]);
        for i in 0..dq {
            for jj in 0..eo {
                let mut s = 0.0;
                for t in 0..ev {
                    s += cat[i * ev + t] * p.wo.at2(t, jj);
                }
                out.data_mut()[i * eo + jj] = s;
            }
        }
        out
    }

    #[test]
    fn two_head_output_matches_per_head_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = MhaParams::<f64>::init(6, 6, 2, &mut rng).unwrap();
        let q = Tensor::uniform(&[4, 6], 1.0, &mut rng);
        let k = Tensor::uniform(&[5, 6], 1.0, &mut rng);
        let v = Tensor::uniform(&[5, 6], 1.0, &mut rng);
        let mut g = Graph::new();
        let pv = p.bind(&mut g);
        let vs = leafed(&mut g, &[&q, &k, &v]);
        let out = mha(&mut g, vs[0], vs[1], vs[2], &pv, 0.0).unwrap();
        let oracle = mha_oracle(&q, &k, &v, &p);
        assert!(g.value(out).max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn mha_output_width_equals_query_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = MhaParams::<f64>::init(8, 8, 4, &mut rng).unwrap();
        let mut g = Graph::new();
        let pv = p.bind(&mut g);
        let q = g.leaf(Tensor::uniform(&[3, 8], 1.0, &mut rng));
        let h = g.leaf(Tensor::uniform(&[7, 8], 1.0, &mut rng));
        let out = mha(&mut g, q, h, h, &pv, 0.0).unwrap();
        assert_eq!(g.value(out).shape(), &[3, 8]);
    }

    #[test]
    fn zero_sublayer_weights_make_mab_the_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = MabParams::<f64>::init(4, 2, &mut rng).unwrap();
        p.mha.wo = Tensor::zeros(&[4, 4]);
        p.ff.w2 = Tensor::zeros(&[16, 4]);
        p.ff.b2 = Tensor::zeros(&[4]);
        let x = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let h = Tensor::uniform(&[6, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let pv = p.bind(&mut g);
        let vs = leafed(&mut g, &[&x, &h]);
        let out = mab(&mut g, vs[0], vs[1], &pv, 0.0).unwrap();
        assert!(g.value(out).max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn mab_output_shape_matches_x_for_any_context_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = MabParams::<f64>::init(6, 3, &mut rng).unwrap();
        for m in [1usize, 2, 9] {
            let mut g = Graph::new();
            let pv = p.bind(&mut g);
            let x = g.leaf(Tensor::uniform(&[4, 6], 1.0, &mut rng));
            let h = g.leaf(Tensor::uniform(&[m, 6], 1.0, &mut rng));
            let out = mab(&mut g, x, h, &pv, 0.0).unwrap();
            assert_eq!(g.value(out).shape(), &[4, 6]);
        }
    }

    #[test]
    fn mab_batched_matches_per_batch_rank2() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = MabParams::<f64>::init(4, 2, &mut rng).unwrap();
        let x = Tensor::<f64>::uniform(&[2, 3, 4], 1.0, &mut rng);
        let h = Tensor::<f64>::uniform(&[2, 5, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let pv = p.bind(&mut g);
        let vs = leafed(&mut g, &[&x, &h]);
        let batched = mab(&mut g, vs[0], vs[1], &pv, 0.0).unwrap();
        let batched = g.value(batched).clone();
        for b in 0..2 {
            let xb = Tensor::new(vec![3, 4], x.data()[b * 12..(b + 1) * 12].to_vec()).unwrap();
            let hb = Tensor::new(vec![5, 4], h.data()[b * 20..(b + 1) * 20].to_vec()).unwrap();
            let mut g2 = Graph::new();
            let pv2 = p.bind(&mut g2);
            let vs2 = leafed(&mut g2, &[&xb, &hb]);
            let out = mab(&mut g2, vs2[0], vs2[1], &pv2, 0.0).unwrap();
            for i in 0..12 {
                let got = batched.data()[b * 12 + i];
                assert!((got - g2.value(out).data()[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mab_width_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = MabParams::<f64>::init(4, 2, &mut rng).unwrap();
        let mut g = Graph::new();
        let pv = p.bind(&mut g);
        let x = g.leaf(Tensor::zeros(&[3, 4]));
        let h = g.leaf(Tensor::zeros(&[3, 6]));
        assert!(mab(&mut g, x, h, &pv, 0.0).is_err());
    }

    #[test]
    fn mab_parameter_gradients_pass_grad_check() {
        // params enter as grad_check inputs; x and h stay fixed
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = MabParams::<f64>::init(4, 2, &mut rng).unwrap();
        let x = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let h = Tensor::uniform(&[5, 4], 1.0, &mut rng);
        let probe = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let mut flat: Vec<Tensor<f64>> = Vec::new();
        p.for_each("mab", &mut |_, t| flat.push(t.clone()));
        flat.push(x.clone());
        flat.push(h.clone());
        flat.push(probe);
        let f = move |g: &mut Graph<f64>, vs: &[Var]| {
            let pv = MabVars {
                mha: MhaVars {
                    heads: 2,
                    wq: vs[0],
                    wk: vs[1],
                    wv: vs[2],
                    wo: vs[3],
                },
                ln_x: LnVars { gain: vs[4], bias: vs[5] },
                ln_o: LnVars { gain: vs[6], bias: vs[7] },
                ff: FfVars { w1: vs[8], b1: vs[9], w2: vs[10], b2: vs[11] },
            };
            let out = mab(g, vs[12], vs[13], &pv, 0.0)?;
            let weighted = g.mul(out, vs[14])?;
            g.sum_all(weighted)
        };
        let err = grad_check(&f, &flat, 1e-5).unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn bind_order_matches_for_each_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = MabParams::<f64>::init(4, 2, &mut rng).unwrap();
        let mut g = Graph::new();
        let pv = p.bind(&mut g);
        let vars = pv.list();
        let mut shapes = Vec::new();
        p.for_each("m", &mut |_, t| shapes.push(t.shape().to_vec()));
        assert_eq!(vars.len(), shapes.len());
        for (v, s) in vars.iter().zip(&shapes) {
            assert_eq!(g.value(*v).shape(), s.as_slice());
        }
    }
}
