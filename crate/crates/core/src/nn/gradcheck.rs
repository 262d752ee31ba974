//! Central finite differences for gradient tests.
//!
//! ReLU makes the objectives piecewise smooth. When a probe of width `EPS`
//! straddles a kink the central difference is meaningless, so
//! [`assert_grad`] detects that case (the two one-sided differences
//! disagree) and re-checks the element with a probe narrow enough to stay on
//! one side. Elements that are smooth at `EPS` must pass at `EPS`.

use rand::Rng;

use super::tensor::Tensor;

pub const EPS: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-3;
/// Magnitudes below this are compared absolutely.
pub const FLOOR: f64 = 1e-4;
const NARROW_EPS: f64 = 1e-7;

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

/// d f / d t at every element of `t`.
pub fn numeric_grad(t: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut probe = t.clone();
    let out = (0..t.len()).map(|i| central(&mut probe, i, EPS, &mut f).0).collect();
    Tensor::new(t.shape().to_vec(), out).unwrap()
}

/// Central difference plus the gap between the one-sided differences.
fn central(probe: &mut Tensor<f64>, i: usize, eps: f64, f: &mut impl FnMut(&Tensor<f64>) -> f64) -> (f64, f64) {
    let orig = probe.data()[i];
    let mut along = |d: f64| {
        probe.data_mut()[i] = orig + d;
        let v = f(probe);
        probe.data_mut()[i] = orig;
        v
    };
    central_1d(&mut along, eps)
}

fn central_1d(f: &mut impl FnMut(f64) -> f64, eps: f64) -> (f64, f64) {
    let (mid, up, down) = (f(0.0), f(eps), f(-eps));
    let (right, left) = ((up - mid) / eps, (mid - down) / eps);
    ((up - down) / (2.0 * eps), rel_err(right, left))
}

/// Kink-aware comparison of one analytic derivative against `f(delta)`,
/// the objective with the coordinate shifted by `delta`. Returns the
/// relative error that passed.
pub fn check_scalar(analytic: f64, mut f: impl FnMut(f64) -> f64, tol: f64) -> Result<f64, String> {
    let (n, gap) = central_1d(&mut f, EPS);
    let err = rel_err(analytic, n);
    if err < tol {
        return Ok(err);
    }
    // a smooth objective has one-sided slopes that agree to O(EPS)
    if gap <= 10.0 * REL_TOL {
        return Err(format!("analytic {analytic}, numeric {n} (no kink in the probe window)"));
    }
    let (fine, _) = central_1d(&mut f, NARROW_EPS);
    let err = rel_err(analytic, fine);
    if err < tol {
        Ok(err)
    } else {
        Err(format!("analytic {analytic}, numeric {fine} at a kink"))
    }
}

/// Checks every element of `analytic` against finite differences of `f`
/// at `t`; returns the largest relative error seen.
pub fn check_grad(
    analytic: &Tensor<f64>,
    t: &Tensor<f64>,
    mut f: impl FnMut(&Tensor<f64>) -> f64,
    tol: f64,
) -> Result<f64, String> {
    if analytic.shape() != t.shape() {
        return Err(format!("gradient shape {:?} vs input {:?}", analytic.shape(), t.shape()));
    }
    let mut probe = t.clone();
    let mut worst = 0.0f64;
    for (i, &a) in analytic.data().iter().enumerate() {
        let orig = probe.data()[i];
        let along = |d: f64| {
            probe.data_mut()[i] = orig + d;
            let v = f(&probe);
            probe.data_mut()[i] = orig;
            v
        };
        let err = check_scalar(a, along, tol).map_err(|msg| format!("element {i}: {msg}"))?;
        worst = worst.max(err);
    }
    Ok(worst)
}

#[track_caller]
pub fn assert_close(analytic: &Tensor<f64>, numeric: &Tensor<f64>) {
    assert_eq!(analytic.shape(), numeric.shape());
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        assert!(rel_err(a, n) < REL_TOL, "element {i}: analytic {a}, numeric {n}");
    }
}

/// Kink-aware check of `analytic` against finite differences of `f` at `t`.
#[track_caller]
pub fn assert_grad(analytic: &Tensor<f64>, t: &Tensor<f64>, f: impl FnMut(&Tensor<f64>) -> f64) {
    if let Err(msg) = check_grad(analytic, t, f, REL_TOL) {
        panic!("{msg}");
    }
}
