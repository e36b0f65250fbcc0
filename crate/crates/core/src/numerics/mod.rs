//! Dense f64 arithmetic, reverse-mode gradients and the neural building
//! blocks shared by the response model and the text classifiers.

mod block;
mod graph;
mod tensor;

pub use block::{
    causal_attention_block, Affine, BlockParams, Decoder, DecoderShape, Norm, DEFAULT_MAX_LEN,
};
pub use graph::{Graph, Var};
pub use tensor::{Gradients, ParamId, ParamStore, Tensor};

use crate::error::{Error, Result};

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("logit {i} is {}", logits[i])));
    }
    Ok(())
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    check_logits(logits)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    check_logits(logits)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    Ok(logits.iter().map(|&x| x - lse).collect())
}

/// `-ln softmax(logits)[target]`.
pub fn cross_entropy_from_logits(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::invalid(format!(
            "target {target} out of range for {} logits",
            logits.len()
        )));
    }
    Ok(-log_softmax(logits)?[target])
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Compares tape gradients against central finite differences.
///
/// `loss_fn` builds a scalar loss on a fresh graph. Returns the maximum
/// over every parameter element of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn gradient_check<F>(params: &mut ParamStore, epsilon: f64, loss_fn: F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    if epsilon <= 0.0 {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let mut analytic = Gradients::zeros_like(params);
    {
        let mut g = Graph::new(params);
        let loss = loss_fn(&mut g)?;
        g.backward(loss, &mut analytic)?;
    }
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(p);
        let loss = loss_fn(&mut g)?;
        Ok(g.scalar(loss))
    };
    let ids: Vec<ParamId> = params.ids().collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        for k in 0..params.get(id).len() {
            let orig = params.get(id).data()[k];
            params.get_mut(id).data_mut()[k] = orig + epsilon;
            let plus = eval(params)?;
            params.get_mut(id).data_mut()[k] = orig - epsilon;
            let minus = eval(params)?;
            params.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.get(id)[k];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_uniform_and_known_values() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        // 30-digit reference values
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        let expected = [0.090_030_573_170_380_46, 0.244_728_471_054_797_65, 0.665_240_955_774_821_9];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_empty_and_non_finite() {
        assert!(softmax(&[]).is_err());
        assert!(softmax(&[1.0, f64::NAN]).is_err());
        assert!(softmax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let uniform = [0.0; 10];
        for t in 0..10 {
            let l = cross_entropy_from_logits(&uniform, t).unwrap();
            assert!((l - 10f64.ln()).abs() < 1e-12);
        }
        let mut peaked = [0.0; 4];
        peaked[2] = 1e6;
        assert!(cross_entropy_from_logits(&peaked, 2).unwrap() < 1e-6);
        let l = cross_entropy_from_logits(&[1.0, 2.0, 3.0], 0).unwrap();
        assert!((l - 2.407_605_964_444_380_3).abs() < 1e-12);
        assert!(cross_entropy_from_logits(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn gradient_check_of_squared_norm() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let mut grads = Gradients::zeros_like(&store);
        {
            let mut g = Graph::new(&store);
            let a = g.param(w);
            let b = g.param(w);
            let loss = g.matmul_bt(a, b).unwrap();
            assert_eq!(g.scalar(loss), 5.0);
            g.backward(loss, &mut grads).unwrap();
        }
        assert_eq!(grads.get(w), &[2.0, 4.0]);
        let err = gradient_check(&mut store, 1e-5, |g| {
            let a = g.param(w);
            let b = g.param(w);
            g.matmul_bt(a, b)
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    /// Every differentiable op passes a finite-difference check.
    #[test]
    fn gradient_check_covers_every_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let table = store.add("table", Tensor::randn(vec![5, 6], 0.5, &mut rng));
        let w = store.add("w", Tensor::randn(vec![6, 6], 0.5, &mut rng));
        let b = store.add("b", Tensor::randn(vec![1, 6], 0.5, &mut rng));
        let gain = store.add("gain", Tensor::randn(vec![1, 6], 0.5, &mut rng));
        let qkv = store.add("qkv", Tensor::randn(vec![6, 18], 0.5, &mut rng));
        let head = store.add("head", Tensor::randn(vec![4, 12], 0.5, &mut rng));
        let err = gradient_check(&mut store, 1e-5, |g| {
            let t = g.param(table);
            let x = g.gather(t, &[0, 3, 3, 1])?;
            let wv = g.param(w);
            let bv = g.param(b);
            let h = g.affine(x, wv, bv)?;
            let h = g.gelu(h);
            let gv = g.param(gain);
            let n = g.layer_norm(h, gv, bv)?;
            let q = g.param(qkv);
            let packed = g.matmul(n, q)?;
            let att = g.causal_attention(packed, 2)?;
            let s = g.add(att, x)?;
            let s = g.tanh(s);
            let s = g.scale(s, 1.5);
            let both = g.concat_cols(&[s, x])?;
            let tail = g.slice_rows(both, 1, 3)?;
            let mean = g.mean_rows(both);
            let stacked = g.concat_rows(&[tail, mean])?;
            let hv = g.param(head);
            let logits = g.matmul_bt(stacked, hv)?;
            let ce = g.cross_entropy(logits, &[1, 0, 3, 2])?;
            let ce2 = g.cross_entropy(logits, &[0, 0, 1, 1])?;
            g.sum(&[ce, ce2])
        })
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    proptest! {
        #[test]
        fn softmax_normalized_and_shift_invariant(
            v in proptest::collection::vec(-50.0f64..50.0, 1..20),
            c in -100.0f64..100.0,
        ) {
            let p = softmax(&v).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn cross_entropy_lower_bound(
            v in proptest::collection::vec(-20.0f64..20.0, 2..12),
            t in 0usize..12,
        ) {
            let t = t % v.len();
            let p = softmax(&v).unwrap();
            let best = -p.iter().copied().fold(0.0, f64::max).ln();
            let ce = cross_entropy_from_logits(&v, t).unwrap();
            prop_assert!(ce >= best - 1e-12);
            if t == argmax(&p) {
                prop_assert!((ce - best).abs() < 1e-12);
            }
        }
    }
}
