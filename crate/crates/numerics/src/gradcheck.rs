use rand::Rng;

use crate::error::{NumericsError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// Draw `n` (parameter, element) coordinates uniformly over all scalars.
pub fn sample_coords<R: Rng>(params: &ParamStore<f64>, n: usize, rng: &mut R) -> Vec<(ParamId, usize)> {
    let total = params.numel();
    (0..n)
        .map(|_| {
            let mut k = rng.gen_range(0..total);
            for (id, _, t) in params.iter() {
                if k < t.len() {
                    return (id, k);
                }
                k -= t.len();
            }
            unreachable!("coordinate inside parameter range")
        })
        .collect()
}

/// Max relative error between tape gradients and central differences
/// `|a - n| / (|a| + |n| + 1e-12)` over `coords`.
///
/// `f` builds the scalar loss on a fresh tape from the given parameters.
pub fn grad_check<F>(params: &ParamStore<f64>, h: f64, coords: &[(ParamId, usize)], f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(NumericsError::Contract(format!("step {h} outside [1e-6, 1e-3]")));
    }
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let grads = tape.backward(loss)?;
    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(&mut t, p)?;
        let v = t.value(l).data()[0];
        if !v.is_finite() {
            return Err(NumericsError::Numeric("non-finite loss during gradient check".into()));
        }
        Ok(v)
    };
    let mut worst = 0.0f64;
    for &(id, k) in coords {
        let analytic = grads.param(id).map_or(0.0, |g| g[k]);
        let mut p = params.clone();
        let x0 = p.get(id).data()[k];
        p.get_mut(id).data_mut()[k] = x0 + h;
        let up = eval(&p)?;
        p.get_mut(id).data_mut()[k] = x0 - h;
        let down = eval(&p)?;
        let numeric = (up - down) / (2.0 * h);
        if !analytic.is_finite() || !numeric.is_finite() {
            return Err(NumericsError::Numeric(format!("non-finite gradient at {}[{k}]", params.name(id))));
        }
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use std::sync::Arc;

    fn one(x: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::scalar(x));
        p
    }

    #[test]
    fn quadratic() {
        let p = one(1.0);
        let err = grad_check(&p, 1e-4, &[(ParamId(0), 0)], |t, p| {
            let x = t.param(p, ParamId(0));
            t.mul(x, x)
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn linear_is_exact() {
        let p = one(0.37);
        let err = grad_check(&p, 1e-3, &[(ParamId(0), 0)], |t, p| {
            let x = t.param(p, ParamId(0));
            Ok(t.scale(x, 3.5))
        })
        .unwrap();
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn step_out_of_range() {
        let p = one(1.0);
        let r = grad_check(&p, 1e-2, &[], |t, p| Ok(t.param(p, ParamId(0))));
        assert!(matches!(r, Err(NumericsError::Contract(_))));
    }

    /// Every differentiable op composed into one scalar, checked against central differences.
    /// No key bias: its gradient is exactly zero and the relative error would measure rounding noise.
    #[test]
    fn all_ops_match_central_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut rand_t = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let mut p = ParamStore::new();
        let table = p.insert("table", rand_t(&[5, 6]));
        let w = p.insert("w", rand_t(&[6, 18]));
        let g = p.insert("g", rand_t(&[6]));
        let bb = p.insert("bb", rand_t(&[6]));
        let head = p.insert("head", rand_t(&[6, 4]));
        let extra = p.insert("extra", rand_t(&[2, 6]));
        let refs: Vec<f64> = {
            let row = [0.3, -0.2, 0.1, 0.5];
            let mut v = Vec::new();
            for _ in 0..4 {
                v.extend(crate::tensor::log_softmax_row(&row, 3));
            }
            v
        };
        let len = 4;
        let mask: Vec<bool> = (0..len * len).map(|k| k % len <= k / len || k % len == 3).collect();
        let mask = Arc::new(mask);
        let f = |t: &mut Tape<f64>, ps: &ParamStore<f64>| -> Result<Var> {
            let tb = t.param(ps, table);
            let e = t.gather(tb, &[0, 3, 3, 1])?;
            let ex = t.param(ps, extra);
            let ex2 = t.select_rows(ex, &[1, 0])?;
            let top = t.select_rows(e, &[0, 1])?;
            let top = t.add(top, ex2)?;
            let bottom = t.select_rows(e, &[2, 3])?;
            let x = t.concat_rows(&[top, bottom])?;
            let (gv, bv) = (t.param(ps, g), t.param(ps, bb));
            let n = t.layer_norm(x, gv, bv, 1e-5)?;
            let wv = t.param(ps, w);
            let qkv = t.linear(n, wv, None)?;
            let a = t.attention(qkv, mask.clone(), 2)?;
            let a = t.gelu(a);
            let sq = t.mul(a, x)?;
            let hv = t.param(ps, head);
            let logits = t.matmul(sq, hv)?;
            let ce = t.cross_entropy_masked(logits, &[1, 0, 3, 2], &[true, false, true, true])?;
            let lp = t.log_prob_gather(logits, &[(0, 2), (3, 1)], 3)?;
            let lps = t.dot_const(lp, vec![0.7, -1.3])?;
            let kl = t.kl_to_const(logits, refs.clone(), 3)?;
            let sm = t.softmax(logits)?;
            let sms = t.dot_const(sm, (0..16).map(|k| (k as f64 * 0.37).sin()).collect())?;
            let tot = t.add(ce, lps)?;
            let tot = t.add(tot, kl)?;
            let tot = t.add(tot, sms)?;
            let s = t.sum(tot);
            Ok(t.scale(s, 0.9))
        };
        let coords: Vec<_> = p
            .iter()
            .flat_map(|(id, _, t)| (0..t.len()).map(move |k| (id, k)))
            .collect();
        let err = grad_check(&p, 1e-5, &coords, f).unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }
}
