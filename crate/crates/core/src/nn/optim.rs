//! SGD with heavy-ball momentum: `v = momentum * v + g; theta -= lr * v`.
//! Updates happen in place on the parameter tensors.

use std::collections::BTreeMap;

use super::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Named tensors. Used for weights, buffers and gradients alike.
pub type Parameters<T = f32> = BTreeMap<String, Tensor<T>>;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: Parameters<T>,
}

impl<T: Scalar> OptimizerState<T> {
    /// Zero velocity for every tensor in `params`.
    pub fn new<'a>(lr: f64, momentum: f64, params: impl IntoIterator<Item = (&'a String, &'a Tensor<T>)>) -> Result<Self> {
        // zero is allowed: it turns training into a pure measurement run
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be non-negative, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum must be in [0, 1), got {momentum}")));
        }
        let velocity = params
            .into_iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        Ok(Self { lr, momentum, velocity })
    }
}

/// Applies one step to `(name, tensor)` pairs. Every name must appear in
/// both `grads` and the velocity map with a matching shape, and `grads`
/// must not carry extra names.
pub fn step_named<'a, T: Scalar>(
    params: impl IntoIterator<Item = (String, &'a mut Tensor<T>)>,
    grads: &Parameters<T>,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    let params: Vec<_> = params.into_iter().collect();
    for (name, theta) in &params {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no gradient for parameter `{name}`")))?;
        let v = state
            .velocity
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no velocity for parameter `{name}`")))?;
        if g.shape() != theta.shape() || v.shape() != theta.shape() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has shape {:?}, gradient {:?}, velocity {:?}",
                theta.shape(),
                g.shape(),
                v.shape()
            )));
        }
    }
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        let extra = grads
            .keys()
            .chain(state.velocity.keys())
            .find(|k| !params.iter().any(|(n, _)| n == *k))
            .cloned()
            .unwrap_or_default();
        return Err(Error::invalid(format!("`{extra}` is not a parameter")));
    }

    let (lr, mu) = (T::of(state.lr), T::of(state.momentum));
    for (name, theta) in params {
        let g = &grads[&name];
        let v = state.velocity.get_mut(&name).expect("checked above");
        for ((t, vv), &gg) in theta.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = mu * *vv + gg;
            *t -= lr * *vv;
        }
    }
    Ok(())
}

pub fn sgd_momentum_step<T: Scalar>(
    params: &mut Parameters<T>,
    grads: &Parameters<T>,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    step_named(params.iter_mut().map(|(k, v)| (k.clone(), v)), grads, state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Parameters<f64> {
        BTreeMap::from([("w".to_string(), Tensor::new(vec![1], vec![v]).unwrap())])
    }

    #[test]
    fn two_step_recursion() {
        let mut p = scalar(0.0);
        let g = scalar(1.0);
        let mut st = OptimizerState::new(1e-3, 0.9, &p).unwrap();
        sgd_momentum_step(&mut p, &g, &mut st).unwrap();
        assert!((p["w"].data()[0] + 0.001).abs() < 1e-15);
        sgd_momentum_step(&mut p, &g, &mut st).unwrap();
        assert!((st.velocity["w"].data()[0] - 1.9).abs() < 1e-15);
        assert!((p["w"].data()[0] + 0.001 + 0.0019).abs() < 1e-15);
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut p = scalar(0.5);
        let mut st = OptimizerState::new(0.25, 0.0, &p).unwrap();
        sgd_momentum_step(&mut p, &scalar(2.0), &mut st).unwrap();
        assert_eq!(p["w"].data()[0], 0.5 - 0.25 * 2.0);
        sgd_momentum_step(&mut p, &scalar(0.0), &mut st).unwrap();
        assert_eq!(p["w"].data()[0], 0.0);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar(3.0);
        let mut st = OptimizerState::new(0.1, 0.9, &p).unwrap();
        sgd_momentum_step(&mut p, &scalar(0.0), &mut st).unwrap();
        assert_eq!(p["w"].data()[0], 3.0);
    }

    #[test]
    fn mismatches_name_the_parameter() {
        let mut p = scalar(1.0);
        let mut st = OptimizerState::new(0.1, 0.9, &p).unwrap();
        let wrong: Parameters<f64> = BTreeMap::from([("w".to_string(), Tensor::zeros(&[2]))]);
        let msg = sgd_momentum_step(&mut p, &wrong, &mut st).unwrap_err().to_string();
        assert!(msg.contains("`w`"), "{msg}");
        let other: Parameters<f64> = BTreeMap::from([("u".to_string(), Tensor::zeros(&[1]))]);
        assert!(sgd_momentum_step(&mut p, &other, &mut st).unwrap_err().to_string().contains("`w`"));
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let p = scalar(0.0);
        assert!(OptimizerState::new(-1e-3, 0.9, &p).is_err());
        assert!(OptimizerState::new(0.0, 0.9, &p).is_ok());
        assert!(OptimizerState::new(1e-3, 1.0, &p).is_err());
    }
}
