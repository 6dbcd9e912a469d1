//! Reverse-mode automatic differentiation over dense matrix-valued nodes.
//!
//! The primitive set covers what the rest of the crate differentiates: affine
//! layers and ReLU for the networks, `log`/`exp`/`square` for Gaussian
//! densities, `sigmoid` for bound repair and `sin`/`cos`/`sqrt` for polar power
//! flow. Column gathers and concatenation are structural helpers used to split
//! and join output groups.
//!
//! The ReLU derivative at 0 is 0.

mod matrix;
mod tape;

pub use matrix::Matrix;
pub use tape::{
    gradcheck, sigmoid, softplus, AutodiffError, GradVector, NodeId, Result, Tape, Trace,
};

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn scalar_tape(f: impl Fn(&mut Tape, NodeId) -> NodeId) -> Tape {
        let mut t = Tape::new();
        let x = t.leaf(1, 1);
        let y = f(&mut t, x);
        t.mark_output(y);
        t
    }

    fn eval1(t: &Tape, x: f64) -> f64 {
        t.evaluate(&[[x]]).unwrap()[0].get(0, 0)
    }

    fn grad1(t: &Tape, x: f64) -> f64 {
        let tr = t.forward(&[[x]]).unwrap();
        t.backward(&tr, 0).unwrap().partials[0].get(0, 0)
    }

    #[test]
    fn relu_negative_branch() {
        let t = scalar_tape(|t, x| t.relu(x));
        assert_eq!(eval1(&t, -2.0), 0.0);
    }

    #[test]
    fn pythagorean_identity() {
        let t = scalar_tape(|t, x| {
            let s = t.sin(x);
            let c = t.cos(x);
            let s2 = t.square(s);
            let c2 = t.square(c);
            t.add(s2, c2)
        });
        assert_abs_diff_eq!(eval1(&t, 0.7), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn x_exp_x_at_one_is_e() {
        let t = scalar_tape(|t, x| {
            let e = t.exp(x);
            t.mul(x, e)
        });
        assert_abs_diff_eq!(eval1(&t, 1.0), std::f64::consts::E, epsilon = 1e-15);
    }

    #[test]
    fn backward_examples() {
        let sq = scalar_tape(|t, x| t.square(x));
        assert_eq!(grad1(&sq, 3.0), 6.0);

        let relu = scalar_tape(|t, x| t.relu(x));
        assert_eq!(grad1(&relu, 0.0), 0.0);
        assert_eq!(grad1(&relu, 0.5), 1.0);

        let sig = scalar_tape(|t, x| t.sigmoid(x));
        assert_eq!(grad1(&sig, 0.0), 0.25);
    }

    #[test]
    fn output_index_out_of_range() {
        let t = scalar_tape(|t, x| t.square(x));
        let tr = t.forward(&[[1.0]]).unwrap();
        assert_eq!(
            t.backward(&tr, 3).unwrap_err(),
            AutodiffError::OutputIndex { index: 3, count: 1 }
        );
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(2, 1);
        t.mark_output(x);
        let tr = t.forward(&[[1.0, 2.0]]).unwrap();
        assert!(matches!(
            t.backward(&tr, 0),
            Err(AutodiffError::NotScalar { .. })
        ));
    }

    #[test]
    fn domain_violations_are_errors() {
        let log = scalar_tape(|t, x| t.log(x));
        assert!(matches!(
            log.forward(&[[0.0]]),
            Err(AutodiffError::Domain { op: "log", .. })
        ));
        assert!(matches!(
            log.forward(&[[-1.0]]),
            Err(AutodiffError::Domain { op: "log", .. })
        ));

        let div = scalar_tape(|t, x| {
            let one = t.scalar(1.0);
            t.div(one, x)
        });
        assert!(matches!(
            div.forward(&[[0.0]]),
            Err(AutodiffError::Domain { op: "div", .. })
        ));

        let sqrt = scalar_tape(|t, x| t.sqrt(x));
        assert!(matches!(
            sqrt.forward(&[[-1e-3]]),
            Err(AutodiffError::Domain { op: "sqrt", .. })
        ));

        let exp = scalar_tape(|t, x| t.exp(x));
        assert!(matches!(
            exp.forward(&[[1000.0]]),
            Err(AutodiffError::NonFinite { op: "exp", .. })
        ));
        assert!(matches!(
            exp.forward(&[[f64::NAN]]),
            Err(AutodiffError::NonFiniteLeaf { leaf: 0 })
        ));
    }

    #[test]
    fn leaf_shape_checked() {
        let t = scalar_tape(|t, x| t.square(x));
        assert!(matches!(
            t.forward(&[[1.0, 2.0]]),
            Err(AutodiffError::LeafShape { .. })
        ));
        assert!(matches!(
            t.forward::<[f64; 1]>(&[]),
            Err(AutodiffError::LeafCount { .. })
        ));
    }

    #[test]
    fn gradcheck_cubic() {
        let t = scalar_tape(|t, x| {
            let x2 = t.square(x);
            t.mul(x2, x)
        });
        let err = gradcheck(&t, &[[1.5]], 0, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn gradcheck_constant_tape_is_zero() {
        let mut t = Tape::new();
        let _x = t.leaf(1, 3);
        let c = t.scalar(4.0);
        let s = t.sum(c);
        t.mark_output(s);
        assert_eq!(gradcheck(&t, &[[0.1, 0.2, 0.3]], 0, 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn gradcheck_rejects_bad_step() {
        let t = scalar_tape(|t, x| t.square(x));
        assert_eq!(
            gradcheck(&t, &[[1.0]], 0, 0.0).unwrap_err(),
            AutodiffError::InvalidStep(0.0)
        );
    }

    #[test]
    fn two_layer_relu_chain() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut t = Tape::new();
        let x = t.leaf(4, 3);
        let w1 = t.leaf(3, 3);
        let w2 = t.leaf(3, 3);
        let h = t.matmul(x, w1);
        let h = t.relu(h);
        let o = t.matmul(h, w2);
        let o = t.square(o);
        let s = t.sum(o);
        t.mark_output(s);
        for _ in 0..20 {
            let leaves: Vec<Vec<f64>> = [12, 9, 9]
                .iter()
                .map(|&n| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let err = gradcheck(&t, &leaves, 0, 1e-5).unwrap();
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn broadcasting_reduces_gradients() {
        let mut t = Tape::new();
        let m = t.leaf(3, 2);
        let row = t.leaf(1, 2);
        let col = t.leaf(3, 1);
        let s = t.leaf(1, 1);
        let a = t.add(m, row);
        let b = t.mul(a, col);
        let c = t.div(b, s);
        let d = t.sub(c, row);
        let out = t.sum(d);
        t.mark_output(out);
        let leaves = vec![
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            vec![1.5, -0.5],
            vec![2.0, 3.0, -1.0],
            vec![0.7],
        ];
        let err = gradcheck(&t, &leaves, 0, 1e-6).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn select_and_concat_gradients() {
        let mut t = Tape::new();
        let y = t.leaf(2, 4);
        let a = t.select_cols(y, vec![3, 0, 3]);
        let b = t.row_sum(y);
        let c = t.concat_cols(vec![a, b, y]);
        let c = t.sin(c);
        let out = t.sum(c);
        t.mark_output(out);
        let err = gradcheck(&t, &[[0.3, -0.2, 1.1, 0.5, 0.9, -1.3, 0.05, 0.4]], 0, 1e-6).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn sqrt_at_zero_uses_zero_derivative() {
        let t = scalar_tape(|t, x| t.sqrt(x));
        assert_eq!(grad1(&t, 0.0), 0.0);
        assert_abs_diff_eq!(grad1(&t, 4.0), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn softplus_is_stable() {
        assert_abs_diff_eq!(softplus(0.0), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert_abs_diff_eq!(sigmoid(-800.0), 0.0, epsilon = 1e-300);
    }

    type Unary = fn(&mut Tape, NodeId) -> NodeId;

    fn primitives() -> Vec<(&'static str, Unary, f64, f64)> {
        // (name, op, lower, upper) sampling domain avoiding kinks and poles.
        vec![
            ("neg", |t, x| t.neg(x), -3.0, 3.0),
            ("relu+", |t, x| t.relu(x), 0.1, 3.0),
            ("relu-", |t, x| t.relu(x), -3.0, -0.1),
            ("sigmoid", |t, x| t.sigmoid(x), -4.0, 4.0),
            ("softplus", |t, x| t.softplus(x), -4.0, 4.0),
            ("exp", |t, x| t.exp(x), -3.0, 3.0),
            ("log", |t, x| t.log(x), 0.2, 5.0),
            ("sin", |t, x| t.sin(x), -3.0, 3.0),
            ("cos", |t, x| t.cos(x), -3.0, 3.0),
            ("square", |t, x| t.square(x), -3.0, 3.0),
            ("sqrt", |t, x| t.sqrt(x), 0.2, 5.0),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn unary_primitives_match_finite_differences(u in 0.0f64..1.0, v in 0.0f64..1.0, w in 0.0f64..1.0) {
            for (name, op, lo, hi) in primitives() {
                let mut t = Tape::new();
                let x = t.leaf(1, 3);
                let y = op(&mut t, x);
                let s = t.sum(y);
                t.mark_output(s);
                let pt = [lo + u * (hi - lo), lo + v * (hi - lo), lo + w * (hi - lo)];
                let err = gradcheck(&t, &[pt], 0, 1e-5).unwrap();
                prop_assert!(err < 1e-6, "{name}: {err}");
            }
        }

        #[test]
        fn binary_primitives_match_finite_differences(
            a in proptest::collection::vec(-2.0f64..2.0, 4),
            b in proptest::collection::vec(0.3f64..2.0, 4),
        ) {
            let ops: Vec<(&str, fn(&mut Tape, NodeId, NodeId) -> NodeId)> = vec![
                ("add", |t, x, y| t.add(x, y)),
                ("sub", |t, x, y| t.sub(x, y)),
                ("mul", |t, x, y| t.mul(x, y)),
                ("div", |t, x, y| t.div(x, y)),
                ("matmul", |t, x, y| t.matmul(x, y)),
            ];
            for (name, op) in ops {
                let mut t = Tape::new();
                let x = t.leaf(2, 2);
                let y = t.leaf(2, 2);
                let z = op(&mut t, x, y);
                let z = t.square(z);
                let s = t.sum(z);
                t.mark_output(s);
                let err = gradcheck(&t, &[a.clone(), b.clone()], 0, 1e-5).unwrap();
                prop_assert!(err < 1e-6, "{name}: {err}");
            }
        }

        #[test]
        fn gradient_is_linear(x0 in -2.0f64..2.0, x1 in -2.0f64..2.0, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            // f = sin(x0) * x1, g = exp(x0) + x1^2
            let record = |ka: f64, kb: f64| {
                let mut t = Tape::new();
                let x = t.leaf(1, 2);
                let p = t.select_cols(x, vec![0]);
                let q = t.select_cols(x, vec![1]);
                let sp = t.sin(p);
                let f = t.mul(sp, q);
                let ep = t.exp(p);
                let q2 = t.square(q);
                let g = t.add(ep, q2);
                let fa = t.scale(f, ka);
                let gb = t.scale(g, kb);
                let out = t.add(fa, gb);
                t.mark_output(out);
                let tr = t.forward(&[[x0, x1]]).unwrap();
                t.backward(&tr, 0).unwrap().flatten()
            };
            let combined = record(a, b);
            let gf = record(1.0, 0.0);
            let gg = record(0.0, 1.0);
            for k in 0..2 {
                let expect = a * gf[k] + b * gg[k];
                prop_assert!((combined[k] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
            }
        }
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let mut t = Tape::new();
        let x = t.leaf(5, 4);
        let w = t.leaf(4, 2);
        let h = t.matmul(x, w);
        let h = t.softplus(h);
        let s = t.sum(h);
        t.mark_output(s);
        let xs: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let ws: Vec<f64> = (0..8).map(|i| (i as f64 * 0.91).cos()).collect();
        let run = || {
            let tr = t.forward(&[xs.clone(), ws.clone()]).unwrap();
            let v = t.output_value(&tr, 0).unwrap().get(0, 0);
            let g = t.backward(&tr, 0).unwrap().flatten();
            (v.to_bits(), g.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }
}
