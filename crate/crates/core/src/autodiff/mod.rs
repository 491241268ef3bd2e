//! Tape-based reverse-mode automatic differentiation over dense `f64`
//! arrays, limited to the operators the forecasting models use.
//!
//! A forward pass records every primitive on a [`Tape`]; [`Tape::backward`]
//! replays the tape in reverse and returns the gradient of each leaf.
//! Shapes never broadcast implicitly: bias rows are expanded with
//! [`Var::gather_rows`], per-row constants applied with [`Var::scale_rows`].
//!
//! ```
//! use tgnn4i::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = x.square().unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).item(), 6.0);
//! ```

mod params;
mod tape;
mod tensor;

pub use params::{ParamLeaves, ParamStore};
pub use tape::{Gradients, RowCombination, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("data of length {len} does not fit shape {shape:?}")]
    BadData { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: produced a non-finite gradient")]
    NonFiniteGradient { op: &'static str },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
    #[error("parameter snapshot: {0}")]
    Snapshot(String),
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::rc::Rc;

    type ScalarFn<'a> = dyn Fn(&Tape, &[Var<'_>]) -> Result<f64, AutodiffError> + 'a;
    type BuildFn = dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, AutodiffError>;

    /// Central finite differences of a scalar function of several inputs.
    fn numeric_grads(
        inputs: &[Tensor],
        f: &ScalarFn<'_>,
        step: f64,
    ) -> Vec<Tensor> {
        let eval = |xs: &[Tensor]| {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
            f(&tape, &vars).unwrap()
        };
        inputs
            .iter()
            .enumerate()
            .map(|(k, x)| {
                let mut g = Tensor::zeros(x.shape());
                for i in 0..x.numel() {
                    let mut plus = inputs.to_vec();
                    plus[k].data_mut()[i] += step;
                    let mut minus = inputs.to_vec();
                    minus[k].data_mut()[i] -= step;
                    g.data_mut()[i] = (eval(&plus) - eval(&minus)) / (2.0 * step);
                }
                g
            })
            .collect()
    }

    fn analytic_grads(
        inputs: &[Tensor],
        build: &BuildFn,
    ) -> Vec<Tensor> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = build(&tape, &vars).unwrap();
        let grads = tape.backward(out).unwrap();
        vars.iter().map(|v| grads.get(*v)).collect()
    }

    fn check(
        inputs: &[Tensor],
        build: &BuildFn,
    ) -> f64 {
        let analytic = analytic_grads(inputs, build);
        let numeric = numeric_grads(
            inputs,
            &|tape, vars| Ok(build(tape, vars)?.value().item()),
            1e-5,
        );
        let mut worst: f64 = 0.0;
        for (a, n) in analytic.iter().zip(&numeric) {
            for (x, y) in a.data().iter().zip(n.data()) {
                let scale = x.abs().max(y.abs()).max(1e-6);
                worst = worst.max((x - y).abs() / scale);
            }
        }
        worst
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    type Builder = Box<BuildFn>;

    /// One scalar-valued probe per operator kind, each reduced with a
    /// weighted sum so every output entry carries a distinct sensitivity.
    fn op_probes() -> Vec<(&'static str, usize, Builder)> {
        fn weighted<'t>(v: Var<'t>) -> Result<Var<'t>, AutodiffError> {
            let t = v.value();
            let w: Vec<f64> = (0..t.numel()).map(|i| 0.3 + 0.1 * i as f64).collect();
            let w = v.tape().constant(Tensor::new(t.shape().to_vec(), w)?);
            v.mul(&w)?.sum()
        }
        vec![
            ("matmul", 2, Box::new(|_, v| weighted(v[0].matmul(&v[1].reshape(&[3, 3])?)?))),
            ("add", 2, Box::new(|_, v| weighted(v[0].add(&v[1])?))),
            ("sub", 2, Box::new(|_, v| weighted(v[0].sub(&v[1])?))),
            ("mul", 2, Box::new(|_, v| weighted(v[0].mul(&v[1])?))),
            ("concat", 2, Box::new(|t, v| weighted(t.concat_cols(&[v[0], v[1]])?))),
            ("split", 1, Box::new(|t, v| {
                let parts = v[0].split_cols(3)?;
                weighted(t.add_n(&[parts[0], parts[2].scale(2.0)?])?)
            })),
            ("gather_rows", 1, Box::new(|_, v| weighted(v[0].gather_rows(Rc::from(vec![2usize, 0, 2, 1]))?))),
            ("gather_cols", 1, Box::new(|_, v| weighted(v[0].gather_cols(Rc::from(vec![1usize, 1, 0]))?))),
            ("scatter_mean_rows", 1, Box::new(|_, v| {
                weighted(v[0].scatter_mean_rows(Rc::from(vec![1usize, 1, 3]), Rc::from(vec![0usize, 2, 1, 1]))?)
            })),
            ("where_rows", 2, Box::new(|_, v| weighted(v[0].where_rows(Rc::from(vec![true, false, true]), &v[1])?))),
            ("scale_rows", 1, Box::new(|_, v| weighted(v[0].scale_rows(Rc::from(vec![0.5, -1.0, 2.0]))?))),
            ("sigmoid", 1, Box::new(|_, v| weighted(v[0].sigmoid()?))),
            ("tanh", 1, Box::new(|_, v| weighted(v[0].tanh()?))),
            ("softplus", 1, Box::new(|_, v| weighted(v[0].softplus()?))),
            ("exp", 1, Box::new(|_, v| weighted(v[0].exp()?))),
            ("sin", 1, Box::new(|_, v| weighted(v[0].scale(4.0)?.sin()?))),
            ("cos", 1, Box::new(|_, v| weighted(v[0].scale(4.0)?.cos()?))),
            ("negate", 1, Box::new(|_, v| weighted(v[0].neg()?))),
            ("scale", 1, Box::new(|_, v| weighted(v[0].scale(-1.7)?))),
            ("sum", 1, Box::new(|_, v| v[0].sum()?.scale(1.3))),
            ("mean", 1, Box::new(|_, v| v[0].mean()?.square())),
            ("square", 1, Box::new(|_, v| weighted(v[0].square()?))),
            ("reshape", 1, Box::new(|_, v| weighted(v[0].reshape(&[9, 1])?))),
            ("concat_rows", 2, Box::new(|t, v| weighted(t.concat_rows(&[v[0], v[1]])?))),
            ("add_row", 2, Box::new(|_, v| {
                let row = v[1].gather_rows(Rc::from(vec![1usize]))?;
                weighted(v[0].add_row(&row)?)
            })),
            ("combine_rows", 1, Box::new(|_, v| {
                let map = RowCombination::new(3, 4, vec![(0, 0, 0.5), (2, 0, -1.5), (1, 2, 2.0), (3, 1, 1.0), (3, 0, 0.25)])?;
                weighted(v[0].combine_rows(Rc::new(map))?)
            })),
            ("damped_rotation", 2, Box::new(|_, v| {
                let c = v[0].gather_cols(Rc::from(vec![0usize, 1, 2, 0]))?;
                let rates = v[1].gather_cols(Rc::from(vec![0usize, 1, 2, 2]))?.softplus()?;
                weighted(c.damped_rotation(&rates, Rc::from(vec![0.3, 0.0, 1.1]))?)
            })),
        ]
    }

    #[test]
    fn identity_matmul_and_scalar_functions() {
        let tape = Tape::new();
        let eye = tape.constant(Tensor::identity(2));
        let v = tape.leaf(Tensor::matrix(2, 1, vec![1.5, -2.0]).unwrap());
        assert_eq!(eye.matmul(&v).unwrap().value().data(), &[1.5, -2.0]);
        let zero = tape.leaf(Tensor::scalar(0.0));
        assert!((zero.softplus().unwrap().value().item() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(zero.sigmoid().unwrap().value().item(), 0.5);
    }

    #[test]
    fn backward_of_sum_and_square() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let grads = tape.backward(x.sum().unwrap()).unwrap();
        assert_eq!(grads.get(x).data(), &[1.0; 6]);

        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let grads = tape.backward(x.square().unwrap()).unwrap();
        assert_eq!(grads.get(x).item(), 6.0);
    }

    #[test]
    fn unreachable_leaves_get_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let unused = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        let grads = tape.backward(x.exp().unwrap()).unwrap();
        assert_eq!(grads.get(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn errors_are_descriptive() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        assert!(matches!(tape.backward(a), Err(AutodiffError::NonScalarLoss { .. })));
        let big = tape.leaf(Tensor::scalar(1000.0));
        assert!(matches!(big.exp(), Err(AutodiffError::NonFinite { op: "exp" })));
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..5 {
            for (name, arity, build) in op_probes() {
                let inputs: Vec<Tensor> = (0..arity).map(|_| random_matrix(&mut rng, 3, 3)).collect();
                let err = check(&inputs, build.as_ref());
                assert!(err < 1e-5, "{name} (trial {trial}): rel err {err}");
            }
        }
    }

    #[test]
    fn composite_of_all_ops_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inputs: Vec<Tensor> = (0..3).map(|_| random_matrix(&mut rng, 3, 3)).collect();
        let build: Builder = Box::new(|t, v| {
            let h = v[0].matmul(&v[1])?.tanh()?;
            let g = v[2].sigmoid()?.mul(&h)?;
            let parts = t.concat_cols(&[g, v[0].softplus()?])?.split_cols(2)?;
            let agg = parts[0]
                .gather_rows(Rc::from(vec![0usize, 1, 2, 2]))?
                .scatter_mean_rows(Rc::from(vec![0usize, 0, 1, 2]), Rc::from(vec![2usize, 1, 1]))?;
            let mixed = agg.where_rows(Rc::from(vec![true, false, true]), &parts[1].relu()?)?;
            let osc = mixed.scale(3.0)?.sin()?.add(&mixed.cos()?)?.exp()?;
            let per_row = osc.scale_rows(Rc::from(vec![1.0, 0.5, -0.25]))?.neg()?;
            let cols = per_row.gather_cols(Rc::from(vec![2usize, 0]))?;
            t.add_n(&[cols.square()?.mean()?, per_row.sub(&v[2])?.sum()?])
        });
        assert!(check(&inputs, build.as_ref()) < 1e-5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn backward_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_matrix(&mut rng, 2, 3);
            fn f(v: Var<'_>) -> Var<'_> {
                v.tanh().unwrap().square().unwrap().sum().unwrap()
            }
            fn g(v: Var<'_>) -> Var<'_> {
                v.sin().unwrap().mul(&v).unwrap().sum().unwrap()
            }
            let single = |which: u8| {
                let tape = Tape::new();
                let v = tape.leaf(x.clone());
                let out = if which == 0 { f(v) } else { g(v) };
                tape.backward(out).unwrap().get(v)
            };
            let tape = Tape::new();
            let v = tape.leaf(x.clone());
            let combo = f(v).scale(a).unwrap().add(&g(v).scale(b).unwrap()).unwrap();
            let joint = tape.backward(combo).unwrap().get(v);
            let (gf, gg) = (single(0), single(1));
            for i in 0..joint.numel() {
                let expected = a * gf.data()[i] + b * gg.data()[i];
                prop_assert!((joint.data()[i] - expected).abs() < 1e-12);
            }
        }

        #[test]
        fn forward_is_deterministic(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, 4, 4);
            let b = random_matrix(&mut rng, 4, 4);
            let run = || {
                let tape = Tape::new();
                let x = tape.leaf(a.clone());
                let y = tape.leaf(b.clone());
                let out = x.matmul(&y).unwrap().softplus().unwrap().sum().unwrap();
                out.value().item().to_bits()
            };
            prop_assert_eq!(run(), run());
        }
    }
}
