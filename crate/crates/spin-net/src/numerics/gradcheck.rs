use super::graph::{Graph, Var};
use super::tensor::Tensor;
use super::Result;

/// Compare analytic gradients of a scalar-valued function against central
/// finite differences over every input coordinate.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: &F, inputs: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).shape() != [1] {
            return Err(super::NumericsError::NotScalar {
                shape: g.value(out).shape().to_vec(),
            });
        }
        Ok(g.value(out).data()[0])
    };

    // analytic pass
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).shape() != [1] {
        return Err(super::NumericsError::NotScalar {
            shape: g.value(out).shape().to_vec(),
        });
    }
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut xs: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let n = xs[ti].len();
        for ci in 0..n {
            let orig = xs[ti].data()[ci];
            xs[ti].data_mut()[ci] = orig + step;
            let fp = eval(&xs)?;
            xs[ti].data_mut()[ci] = orig - step;
            let fm = eval(&xs)?;
            xs[ti].data_mut()[ci] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let analytic = grads
                .get(*var)
                .map(|t| t.data()[ci])
                .unwrap_or(0.0);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_near_exact() {
        // f(x) = sum x^2, analytic 2x
        let f = |g: &mut Graph<f64>, vs: &[Var]| {
            let sq = g.mul(vs[0], vs[0])?;
            g.sum_all(sq)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let err = grad_check(&f, &[x], 1e-5).unwrap();
        assert!(err < 1e-9, "rel err {err}");
    }

    #[test]
    fn softmax_cross_entropy_on_random_logits() {
        let f = |g: &mut Graph<f64>, vs: &[Var]| {
            let lp = g.log_softmax(vs[0])?;
            let picked = g.select_per_row(lp, &[1, 0, 3, 2])?;
            let s = g.sum_all(picked)?;
            g.scale(s, -0.25)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform(&[4, 5], 1.0, &mut rng);
        let err = grad_check(&f, &[x], 1e-5).unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn non_scalar_function_is_rejected() {
        let f = |g: &mut Graph<f64>, vs: &[Var]| g.mul(vs[0], vs[0]);
        let x = Tensor::zeros(&[2]);
        assert!(grad_check(&f, &[x], 1e-5).is_err());
    }

    #[test]
    fn every_primitive_passes_grad_check() {
        // one composite touching matmul, layer_norm, gelu, softmax,
        // add_bias, mul_vec, concat, reshape, select paths
        let f = |g: &mut Graph<f64>, vs: &[Var]| {
            let h = g.matmul(vs[0], vs[1])?;
            let h = g.layer_norm(h)?;
            let h = g.mul_vec(h, vs[2])?;
            let h = g.add_bias(h, vs[3])?;
            let h = g.gelu(h)?;
            let s = g.softmax(h)?;
            let c = g.concat_last(&[h, s])?;
            let r = g.reshape(c, &[4, 2, 4])?;
            let sel = g.index_axis1(r, 1)?;
            let rows = g.select_rows(sel, &[0, 2, 3])?;
            // project against random weights so every coordinate's gradient
            // stays O(1) and finite differences are well posed
            let weighted = g.mul(rows, vs[4])?;
            g.sum_all(weighted)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..20 {
            let x = Tensor::uniform(&[4, 3], 1.0, &mut rng);
            let w = Tensor::uniform(&[3, 4], 1.0, &mut rng);
            let gain = Tensor::uniform(&[4], 1.0, &mut rng);
            let bias = Tensor::uniform(&[4], 0.5, &mut rng);
            let probe = Tensor::uniform(&[3, 4], 1.0, &mut rng);
            let err = grad_check(&f, &[x, w, gain, bias, probe], 1e-5).unwrap();
            assert!(err < 1e-6, "trial {trial}: rel err {err}");
        }
    }

    #[test]
    fn layer_norm_grad_check_with_random_probe() {
        let f = |g: &mut Graph<f64>, vs: &[Var]| {
            let h = g.layer_norm(vs[0])?;
            let weighted = g.mul(h, vs[1])?;
            g.sum_all(weighted)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let x = Tensor::uniform(&[4, 5], 1.0, &mut rng);
            let probe = Tensor::uniform(&[4, 5], 1.0, &mut rng);
            let err = grad_check(&f, &[x, probe], 1e-5).unwrap();
            assert!(err < 1e-6, "ln rel err {err}");
        }
    }
}
