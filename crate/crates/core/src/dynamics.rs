//! Closed-form evolution of the dynamic latent component between
//! observations, for static, exponential-decay and periodic dynamics, plus
//! an RK4 integrator of the underlying linear ODE used as a reference.
//!
//! Parameter layout for the periodic kind with latent size `d`:
//! entries `0..d/2` hold the decay rates (negated real parts) and entries
//! `d/2..d` the rotation frequencies. Dimension pair `(2k, 2k+1)` uses decay
//! slot `k` and frequency slot `d/2 + k`.

use std::f64::consts::TAU;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DynamicsKind {
    Static,
    Exponential,
    Periodic,
}

impl DynamicsKind {
    pub const ALL: [DynamicsKind; 3] = [Self::Static, Self::Exponential, Self::Periodic];

    pub fn name(self) -> &'static str {
        match self {
            Self::Static => "static",
            Self::Exponential => "exponential",
            Self::Periodic => "periodic",
        }
    }

    /// Length of the dynamics parameter vector for latent size `d_h`.
    pub fn param_len(self, d_h: usize) -> usize {
        match self {
            Self::Static => 0,
            Self::Exponential | Self::Periodic => d_h,
        }
    }

    pub fn check_dim(self, d_h: usize) -> Result<(), DynamicsError> {
        if self == Self::Periodic && !d_h.is_multiple_of(2) {
            return Err(DynamicsError::OddDimension(d_h));
        }
        Ok(())
    }
}

impl std::fmt::Display for DynamicsKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DynamicsKind {
    type Err = DynamicsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "static" => Ok(Self::Static),
            "exponential" => Ok(Self::Exponential),
            "periodic" => Ok(Self::Periodic),
            other => Err(DynamicsError::UnknownKind(other.to_string())),
        }
    }
}

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("elapsed time must be non-negative, got {0}")]
    NegativeDelta(f64),
    #[error("dynamics parameters must be strictly positive, got {0}")]
    NonPositiveParam(f64),
    #[error("periodic dynamics need an even latent size, got {0}")]
    OddDimension(usize),
    #[error("expected {expected} dynamics parameters, got {got}")]
    ParamLength { expected: usize, got: usize },
    #[error("unknown dynamics kind `{0}`")]
    UnknownKind(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

fn check_inputs(kind: DynamicsKind, params: &[f64], c: &[f64], dt: f64) -> Result<(), DynamicsError> {
    if !(dt >= 0.0) {
        return Err(DynamicsError::NegativeDelta(dt));
    }
    kind.check_dim(c.len())?;
    let expected = kind.param_len(c.len());
    if params.len() != expected {
        return Err(DynamicsError::ParamLength {
            expected,
            got: params.len(),
        });
    }
    if let Some(&bad) = params.iter().find(|&&w| !(w > 0.0)) {
        return Err(DynamicsError::NonPositiveParam(bad));
    }
    Ok(())
}

/// Value of the dynamic component `delta_t` after it was set to `c`.
pub fn evolve(
    kind: DynamicsKind,
    params: &[f64],
    c: &[f64],
    delta_t: f64,
) -> Result<Vec<f64>, DynamicsError> {
    check_inputs(kind, params, c, delta_t)?;
    Ok(match kind {
        DynamicsKind::Static => c.to_vec(),
        DynamicsKind::Exponential => c
            .iter()
            .zip(params)
            .map(|(ci, wi)| (-delta_t * wi).exp() * ci)
            .collect(),
        DynamicsKind::Periodic => {
            let half = c.len() / 2;
            let mut out = vec![0.0; c.len()];
            for k in 0..half {
                let decay = (-delta_t * params[k]).exp();
                let angle = (params[half + k] * delta_t).rem_euclid(TAU);
                let (s, co) = angle.sin_cos();
                let (x, y) = (c[2 * k], c[2 * k + 1]);
                out[2 * k] = decay * (co * x - s * y);
                out[2 * k + 1] = decay * (s * x + co * y);
            }
            out
        }
    })
}

/// Full latent state: decay target plus evolved dynamic component.
pub fn full_state(
    h_bar: &[f64],
    kind: DynamicsKind,
    params: &[f64],
    c: &[f64],
    delta_t: f64,
) -> Result<Vec<f64>, DynamicsError> {
    let dynamic = evolve(kind, params, c, delta_t)?;
    Ok(h_bar.iter().zip(dynamic).map(|(a, b)| a + b).collect())
}

/// ODE matrix `-diag(w)` of the exponential kind.
pub fn exponential_matrix(w: &[f64]) -> Tensor {
    let d = w.len();
    let mut a = Tensor::zeros(&[d, d]);
    for (i, wi) in w.iter().enumerate() {
        a.data_mut()[i * d + i] = -wi;
    }
    a
}

/// Block-diagonal ODE matrix of the periodic kind, one `[[a, -b], [b, a]]`
/// block per dimension pair.
pub fn periodic_matrix(w: &[f64]) -> Tensor {
    let d = w.len();
    let half = d / 2;
    let mut a = Tensor::zeros(&[d, d]);
    let m = a.data_mut();
    for k in 0..half {
        let (decay, freq) = (-w[k], w[half + k]);
        let (i, j) = (2 * k, 2 * k + 1);
        m[i * d + i] = decay;
        m[i * d + j] = -freq;
        m[j * d + i] = freq;
        m[j * d + j] = decay;
    }
    a
}

/// ODE matrix for any kind; the static kind has `A = 0`.
pub fn dynamics_matrix(kind: DynamicsKind, w: &[f64], d_h: usize) -> Tensor {
    match kind {
        DynamicsKind::Static => Tensor::zeros(&[d_h, d_h]),
        DynamicsKind::Exponential => exponential_matrix(w),
        DynamicsKind::Periodic => periodic_matrix(w),
    }
}

/// Classic fourth-order Runge-Kutta integration of `dh/dt = A h` from
/// `h(0) = c` over `delta_t` with `steps` equal steps.
pub fn ode_reference(a: &Tensor, c: &[f64], delta_t: f64, steps: usize) -> Vec<f64> {
    let d = c.len();
    assert_eq!(a.shape(), &[d, d], "ODE matrix must be {d}x{d}");
    let steps = steps.max(1);
    let h = delta_t / steps as f64;
    let apply = |x: &[f64]| -> Vec<f64> {
        (0..d)
            .map(|i| a.row(i).iter().zip(x).map(|(aij, xj)| aij * xj).sum())
            .collect()
    };
    let axpy = |x: &[f64], k: &[f64], s: f64| -> Vec<f64> {
        x.iter().zip(k).map(|(xi, ki)| xi + s * ki).collect()
    };
    let mut x = c.to_vec();
    for _ in 0..steps {
        let k1 = apply(&x);
        let k2 = apply(&axpy(&x, &k1, h / 2.0));
        let k3 = apply(&axpy(&x, &k2, h / 2.0));
        let k4 = apply(&axpy(&x, &k3, h));
        for i in 0..d {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    x
}

/// Row-wise differentiable evolution. `c` is `rows x d_h`, `w` is
/// `rows x d_h` (ignored for the static kind) and `delta_t[r]` is the
/// elapsed time of row `r`.
pub fn evolve_var<'t>(
    kind: DynamicsKind,
    c: Var<'t>,
    w: Option<Var<'t>>,
    delta_t: Rc<[f64]>,
) -> Result<Var<'t>, DynamicsError> {
    if let Some(&bad) = delta_t.iter().find(|&&d| !(d >= 0.0)) {
        return Err(DynamicsError::NegativeDelta(bad));
    }
    if kind == DynamicsKind::Static {
        return Ok(c);
    }
    let d_h = c.cols();
    kind.check_dim(d_h)?;
    let w = w.ok_or(DynamicsError::ParamLength {
        expected: d_h,
        got: 0,
    })?;
    if w.cols() != d_h {
        return Err(DynamicsError::ParamLength {
            expected: d_h,
            got: w.cols(),
        });
    }
    if let Some(&bad) = w.value().data().iter().find(|&&x| !(x > 0.0)) {
        return Err(DynamicsError::NonPositiveParam(bad));
    }
    match kind {
        DynamicsKind::Static => unreachable!(),
        DynamicsKind::Exponential => {
            let neg_dt: Rc<[f64]> = delta_t.iter().map(|d| -d).collect();
            let factor = w.scale_rows(neg_dt)?.exp()?;
            Ok(factor.mul(&c)?)
        }
        DynamicsKind::Periodic => Ok(c.damped_rotation(&w, delta_t)?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, LN_2, PI};

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn exponential_examples() {
        let c = [0.3, -1.2];
        assert_eq!(evolve(DynamicsKind::Exponential, &[0.5, 2.0], &c, 0.0).unwrap(), c);
        let out = evolve(DynamicsKind::Exponential, &[LN_2], &[1.0], 1.0).unwrap();
        assert!((out[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn periodic_quarter_turn() {
        let eps = 1e-12;
        let out = evolve(DynamicsKind::Periodic, &[eps, FRAC_PI_2], &[1.0, 0.0], 1.0).unwrap();
        let decay = (-eps).exp();
        assert!(close(&out, &[0.0, decay], 1e-12), "{out:?}");
    }

    #[test]
    fn periodic_reduces_to_shared_exponential() {
        let w = [0.7, 1.3, 1e-10, 1e-10];
        let c = [0.4, -0.9, 1.1, 0.2];
        let per = evolve(DynamicsKind::Periodic, &w, &c, 0.8).unwrap();
        let exp = evolve(DynamicsKind::Exponential, &[0.7, 0.7, 1.3, 1.3], &c, 0.8).unwrap();
        assert!(close(&per, &exp, 1e-6));
    }

    #[test]
    fn full_state_examples() {
        let hb = [1.0, -2.0];
        let c = [0.5, 0.25];
        let w = [1.0, 1.0];
        assert_eq!(full_state(&hb, DynamicsKind::Exponential, &w, &c, 0.0).unwrap(), [1.5, -1.75]);
        let far = full_state(&hb, DynamicsKind::Exponential, &w, &c, 50.0).unwrap();
        assert!(close(&far, &hb, 1e-6));
        for dt in [0.0, 3.0, 1e6] {
            assert_eq!(full_state(&hb, DynamicsKind::Static, &[], &c, dt).unwrap(), [1.5, -1.75]);
        }
    }

    #[test]
    fn invalid_inputs() {
        assert!(matches!(
            evolve(DynamicsKind::Exponential, &[1.0], &[1.0], -0.1),
            Err(DynamicsError::NegativeDelta(_))
        ));
        assert!(matches!(
            evolve(DynamicsKind::Exponential, &[0.0], &[1.0], 0.1),
            Err(DynamicsError::NonPositiveParam(_))
        ));
        assert!(matches!(
            evolve(DynamicsKind::Periodic, &[1.0; 3], &[1.0; 3], 0.1),
            Err(DynamicsError::OddDimension(3))
        ));
    }

    #[test]
    fn rk4_reference_examples() {
        let c = [1.0, -0.5, 2.0];
        assert_eq!(ode_reference(&Tensor::zeros(&[3, 3]), &c, 1.0, 1000), c);
        let a = exponential_matrix(&[1.0, 1.0]);
        let out = ode_reference(&a, &[1.0, 1.0], 1.0, 1000);
        let e = (-1.0f64).exp();
        assert!(close(&out, &[e, e], 1e-8));
        // A full rotation returns to the start.
        let b = 3.0;
        let rot = Tensor::matrix(2, 2, vec![0.0, -b, b, 0.0]).unwrap();
        let out = ode_reference(&rot, &[0.6, -0.8], 2.0 * PI / b, 4000);
        assert!(close(&out, &[0.6, -0.8], 1e-6));
    }

    #[test]
    fn closed_form_matches_rk4_on_fixed_cases() {
        let w = [0.3, 1.7, 4.0, 9.5];
        let c = [1.0, -0.4, 0.25, 0.8];
        for kind in DynamicsKind::ALL {
            let params = &w[..kind.param_len(4)];
            let closed = evolve(kind, params, &c, 0.73).unwrap();
            let a = dynamics_matrix(kind, params, 4);
            let numeric = ode_reference(&a, &c, 0.73, 2000);
            assert!(close(&closed, &numeric, 1e-9), "{kind}");
        }
    }

    fn var_evolve(kind: DynamicsKind, w: &[f64], c: &[f64], dt: f64) -> Vec<f64> {
        let tape = Tape::new();
        let d = c.len();
        let cv = tape.leaf(Tensor::matrix(1, d, c.to_vec()).unwrap());
        let wv = (!w.is_empty()).then(|| tape.leaf(Tensor::matrix(1, d, w.to_vec()).unwrap()));
        evolve_var(kind, cv, wv, Rc::from(vec![dt])).unwrap().value().data().to_vec()
    }

    #[test]
    fn tape_version_matches_plain_version() {
        let w = [0.3, 1.7, 4.0, 9.5];
        let c = [1.0, -0.4, 0.25, 0.8];
        for kind in DynamicsKind::ALL {
            let params = &w[..kind.param_len(4)];
            for dt in [0.0, 0.1, 2.5] {
                let plain = evolve(kind, params, &c, dt).unwrap();
                assert!(close(&var_evolve(kind, params, &c, dt), &plain, 1e-14));
            }
        }
    }

    #[test]
    fn tape_gradients_match_finite_differences() {
        let w = [0.3, 1.7, 4.0, 9.5];
        let c = [1.0, -0.4, 0.25, 0.8];
        let weights = [0.5, -1.0, 0.75, 2.0];
        for kind in [DynamicsKind::Exponential, DynamicsKind::Periodic] {
            let dt = 0.61;
            let f = |w: &[f64], c: &[f64]| -> f64 {
                evolve(kind, w, c, dt).unwrap().iter().zip(weights).map(|(a, b)| a * b).sum()
            };
            let tape = Tape::new();
            let cv = tape.leaf(Tensor::matrix(1, 4, c.to_vec()).unwrap());
            let wv = tape.leaf(Tensor::matrix(1, 4, w.to_vec()).unwrap());
            let out = evolve_var(kind, cv, Some(wv), Rc::from(vec![dt])).unwrap();
            let lw = tape.constant(Tensor::matrix(1, 4, weights.to_vec()).unwrap());
            let grads = tape.backward(out.mul(&lw).unwrap().sum().unwrap()).unwrap();
            let h = 1e-5;
            for i in 0..4 {
                let (mut wp, mut wm) = (w, w);
                wp[i] += h;
                wm[i] -= h;
                let fd = (f(&wp, &c) - f(&wm, &c)) / (2.0 * h);
                let an = grads.get(wv).data()[i];
                assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-6), "{kind} w[{i}]: {an} vs {fd}");
                let (mut cp, mut cm) = (c, c);
                cp[i] += h;
                cm[i] -= h;
                let fd = (f(&w, &cp) - f(&w, &cm)) / (2.0 * h);
                let an = grads.get(cv).data()[i];
                assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-6), "{kind} c[{i}]: {an} vs {fd}");
            }
        }
    }

    fn kind_strategy() -> impl Strategy<Value = DynamicsKind> {
        prop_oneof![
            Just(DynamicsKind::Static),
            Just(DynamicsKind::Exponential),
            Just(DynamicsKind::Periodic)
        ]
    }

    proptest! {
        #[test]
        fn semigroup_property(
            kind in kind_strategy(),
            w in proptest::collection::vec(0.01f64..5.0, 6),
            c in proptest::collection::vec(-2.0f64..2.0, 6),
            s in 0.0f64..2.0,
            t in 0.0f64..2.0,
        ) {
            let p = &w[..kind.param_len(6)];
            let two_step = evolve(kind, p, &evolve(kind, p, &c, s).unwrap(), t).unwrap();
            let one_step = evolve(kind, p, &c, s + t).unwrap();
            prop_assert!(close(&two_step, &one_step, 1e-10));
        }

        #[test]
        fn exponential_contracts_norm(
            w in proptest::collection::vec(0.01f64..5.0, 5),
            c in proptest::collection::vec(-2.0f64..2.0, 5),
            dt in 0.0f64..10.0,
        ) {
            let out = evolve(DynamicsKind::Exponential, &w, &c, dt).unwrap();
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(norm(&out) <= norm(&c) + 1e-15);
        }

        #[test]
        fn periodic_pair_magnitude(
            w in proptest::collection::vec(0.01f64..5.0, 4),
            c in proptest::collection::vec(-2.0f64..2.0, 4),
            dt in 0.0f64..3.0,
        ) {
            let out = evolve(DynamicsKind::Periodic, &w, &c, dt).unwrap();
            for k in 0..2 {
                let before = c[2 * k].hypot(c[2 * k + 1]);
                let after = out[2 * k].hypot(out[2 * k + 1]);
                prop_assert!((after - (-dt * w[k]).exp() * before).abs() < 1e-12);
            }
        }
    }
}
