//! Softmax and cross-entropy. Both accumulate in `f64` regardless of the
//! logit type.

use super::tensor::{Scalar, Tensor};
use crate::{Error, Result};

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// Row-wise softmax of `N x K` logits with max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = logits.dims2()?;
    let mut out = Vec::with_capacity(logits.len());
    let mut row = vec![0.0; k];
    let mut probs = vec![0.0; k];
    for chunk in logits.data().chunks(k) {
        row.iter_mut().zip(chunk).for_each(|(r, &v)| *r = v.as_f64());
        softmax_row(&row, &mut probs);
        out.extend(probs.iter().map(|&p| T::of(p)));
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean negative log-likelihood and its gradient `(softmax - onehot) / N`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<(f64, Tensor<T>)> {
    let (n, k) = logits.dims2()?;
    if targets.len() != n {
        return Err(Error::Shape(format!(
            "{} targets for {n} rows of logits",
            targets.len()
        )));
    }
    if let Some((i, &t)) = targets.iter().enumerate().find(|(_, &t)| t >= k) {
        return Err(Error::Index(format!("target {t} at row {i} is outside 0..{k}")));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * k);
    let mut row = vec![0.0; k];
    let inv_n = 1.0 / n as f64;
    for (chunk, &t) in logits.data().chunks(k).zip(targets) {
        row.iter_mut().zip(chunk).for_each(|(r, &v)| *r = v.as_f64());
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss -= row[t] - lse;
        for (j, &v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            let onehot = if j == t { 1.0 } else { 0.0 };
            grad.push(T::of((p - onehot) * inv_n));
        }
    }
    Ok((loss * inv_n, Tensor::new(vec![n, k], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{assert_close, numeric_grad, random_tensor};
    use crate::seed;
    use proptest::prelude::*;

    #[test]
    fn uniform_logits() {
        let logits = Tensor::<f32>::full(&[3, 10], 0.7);
        let p = softmax(&logits).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.1).abs() < 1e-7));
        let (loss, _) = cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let p = softmax(&Tensor::new(vec![1, 2], vec![1000.0f64, 0.0]).unwrap()).unwrap();
        assert!((p.data()[0] - 1.0).abs() < 1e-9 && p.data()[1].abs() < 1e-9);
        let (loss, _) = cross_entropy(&Tensor::new(vec![1, 3], vec![50.0f32, 0.0, 0.0]).unwrap(), &[0]).unwrap();
        assert!(loss < 1e-6);
    }

    /// Softmax evaluated with 128-bit-style compensated arithmetic: exact
    /// exponent differences, then Neumaier summation.
    fn reference_softmax(row: &[f64]) -> Vec<f64> {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for &e in &exps {
            let t = sum + e;
            comp += if sum.abs() >= e.abs() { (sum - t) + e } else { (e - t) + sum };
            sum = t;
        }
        let total = sum + comp;
        exps.iter().map(|e| e / total).collect()
    }

    #[test]
    fn matches_reference_softmax() {
        let mut rng = seed::rng(9, "softmax-ref");
        let logits = random_tensor(&[8, 10], &mut rng);
        let scaled = Tensor::new(vec![8, 10], logits.data().iter().map(|v| v * 20.0).collect()).unwrap();
        let p = softmax(&scaled).unwrap();
        for (chunk, got) in scaled.data().chunks(10).zip(p.data().chunks(10)) {
            for (a, b) in got.iter().zip(reference_softmax(chunk)) {
                assert!((a - b).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = seed::rng(10, "ce-fd");
        let logits = random_tensor(&[5, 10], &mut rng);
        let targets = [3, 0, 9, 9, 1];
        let (_, g) = cross_entropy(&logits, &targets).unwrap();
        assert_close(&g, &numeric_grad(&logits, |t| cross_entropy(t, &targets).unwrap().0));
    }

    #[test]
    fn bad_target_is_index_error() {
        let logits = Tensor::<f32>::zeros(&[2, 10]);
        assert!(matches!(cross_entropy(&logits, &[0, 10]), Err(Error::Index(_))));
    }

    proptest! {
        #[test]
        fn rows_are_distributions(vals in proptest::collection::vec(-50.0f64..50.0, 10), shift in -100.0f64..100.0) {
            let t = Tensor::new(vec![1, 10], vals.clone()).unwrap();
            let p = softmax(&t).unwrap();
            prop_assert!(p.data().iter().all(|&v| v >= 0.0));
            prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let shifted = Tensor::new(vec![1, 10], vals.iter().map(|v| v + shift).collect()).unwrap();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.data().iter().zip(q.data()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
