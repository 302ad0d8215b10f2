mod common;

use common::{max_abs_diff, naive_matmul, randn, randn_vec, rng};
use metapico_core::gradcheck::finite_diff_check;
use metapico_core::tape::logsumexp_slice;
use metapico_core::{backward, Error, ParamStore, Result, Tape, Tensor, Var};
use proptest::prelude::*;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let n = tape.value(x).len();
    let w = randn_vec(n, &mut rng(seed));
    let y = tape.mul_const(x, w)?;
    Ok(tape.sum(y))
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::<f64>::new();
    let i = tape.constant(Tensor::eye(2));
    let i2 = tape.matmul(i, i).unwrap();
    assert_eq!(tape.value(i2), Tensor::<f64>::eye(2).data());

    let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let b = tape.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c), &[3.0, 7.0]);
    assert_eq!(tape.shape(c), &[2, 1]);

    let bad = tape.constant(Tensor::zeros(&[3, 1]));
    match tape.matmul(a, bad) {
        Err(Error::Shape(m)) => assert!(m.contains("[2, 2]") && m.contains("[3, 1]"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn matmul_matches_naive_product() {
    let mut r = rng(3);
    let (a, b) = (randn(&[4, 5], &mut r), randn(&[5, 3], &mut r));
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(va, vb).unwrap();
    assert!(max_abs_diff(tape.value(c), &naive_matmul(a.data(), b.data(), 4, 5, 3)) < 1e-12);
}

#[test]
fn matmul_gradient_of_sum() {
    let mut r = rng(4);
    let b = randn(&[3, 2], &mut r);
    let a = randn(&[4, 3], &mut r);
    let err = finite_diff_check(
        |t, x| {
            let vb = t.constant(b.clone());
            let y = t.matmul(x, vb)?;
            Ok(t.sum(y))
        },
        &a,
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn logsumexp_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![1000.0, 1000.0]]).unwrap());
    let l = tape.logsumexp_rows(x).unwrap();
    assert!((tape.value(l)[0] - 2f64.ln()).abs() < 1e-15);
    assert!((tape.value(l)[1] - (1000.0 + 2f64.ln())).abs() < 1e-12);

    let y = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
    let l = tape.logsumexp_rows(y).unwrap();
    let naive = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
    assert!((tape.value(l)[0] - naive).abs() < 1e-10);
}

#[test]
fn logsumexp_is_stable_at_range_limits() {
    for row in [vec![1e4f64, -1e4, 0.0], vec![-1e4, -1e4], vec![1e4, 1e4 - 1.0]] {
        assert!(logsumexp_slice(&row).is_finite());
    }
}

proptest! {
    #[test]
    fn logsumexp_shift_invariance(row in prop::collection::vec(-50.0f64..50.0, 1..12), c in -1e3f64..1e3) {
        let shifted: Vec<f64> = row.iter().map(|v| v + c).collect();
        let (a, b) = (logsumexp_slice(&row), logsumexp_slice(&shifted));
        prop_assert!((b - (a + c)).abs() < 1e-10);
    }
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::<f64>::new();
    let u = tape.constant(Tensor::zeros(&[1, 4]));
    let l = tape.cross_entropy(u, &[Some(2)]).unwrap();
    assert!((tape.value(l)[0] - 4f64.ln()).abs() < 1e-15);

    let x = tape.constant(Tensor::from_rows(&[vec![10.0, -10.0]]).unwrap());
    let l = tape.cross_entropy(x, &[Some(0)]).unwrap();
    // −log softmax = log(1 + e^{−20}); the max-shifted form loses ~1e-15 absolute to cancellation.
    let closed = (-20f64).exp().ln_1p();
    assert!((tape.value(l)[0] - closed).abs() < 1e-14);
    assert!((tape.value(l)[0] - 2.06e-9).abs() < 1e-11);

    let two = tape.constant(Tensor::from_rows(&[vec![10.0, -10.0], vec![0.3, 0.1]]).unwrap());
    let l2 = tape.cross_entropy(two, &[Some(0), None]).unwrap();
    assert_eq!(tape.value(l2)[0], tape.value(l)[0]);

    match tape.cross_entropy(two, &[None, None]) {
        Err(Error::Data(m)) => assert_eq!(m, "no supervised positions"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(tape.cross_entropy(two, &[Some(2), None]), Err(Error::Index(_))));
}

#[test]
fn backward_examples() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());

    let mut tape = Tape::new();
    let x = tape.param(&store, id);
    let s = tape.sum(x);
    backward(&tape, s, &mut store).unwrap();
    assert_eq!(store.get(id).grad().unwrap(), &[1.0, 1.0]);
    store.zero_grad();

    let mut tape = Tape::new();
    let x = tape.param(&store, id);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    backward(&tape, s, &mut store).unwrap();
    assert_eq!(store.get(id).grad().unwrap(), &[2.0, 4.0]);
    backward(&tape, s, &mut store).unwrap();
    assert_eq!(store.get(id).grad().unwrap(), &[4.0, 8.0]);

    assert!(matches!(backward(&tape, sq, &mut store), Err(Error::Shape(_))));
}

#[test]
fn finite_diff_check_contract() {
    let x = randn(&[7], &mut rng(5));
    let err = finite_diff_check(|t, v| Ok(t.sum(v)), &x, EPS).unwrap();
    assert!(err < 1e-9, "{err}");

    let x = randn(&[1, 5], &mut rng(6));
    let err = finite_diff_check(
        |t, v| {
            let l = t.logsumexp_rows(v)?;
            Ok(t.sum(l))
        },
        &x,
        EPS,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");

    let bad = finite_diff_check(
        |t, v| {
            let s = t.sum(v);
            Ok(t.scale(s, f64::INFINITY))
        },
        &x,
        EPS,
    );
    assert!(matches!(bad, Err(Error::Numeric(_))));
}

type Unary = fn(&mut Tape<f64>, Var) -> Result<Var>;

/// Each primitive as a tensor→tensor map on a 3×4 input.
fn primitives() -> Vec<(&'static str, Unary)> {
    vec![
        ("matmul", |t, x| {
            let w = t.constant(randn(&[4, 3], &mut rng(11)));
            t.matmul(x, w)
        }),
        ("matmul_rhs", |t, x| {
            let a = t.constant(randn(&[2, 3], &mut rng(12)));
            t.matmul(a, x)
        }),
        ("add", |t, x| {
            let c = t.constant(randn(&[3, 4], &mut rng(13)));
            t.add(x, c)
        }),
        ("mul", |t, x| {
            let c = t.constant(randn(&[3, 4], &mut rng(14)));
            let y = t.mul(x, c)?;
            t.mul(y, x)
        }),
        ("sub", |t, x| {
            let c = t.constant(randn(&[3, 4], &mut rng(15)));
            t.sub(c, x)
        }),
        ("row_bias", |t, x| {
            let b = t.constant(randn(&[4], &mut rng(16)));
            t.add_row_bias(x, b)
        }),
        ("logsumexp", |t, x| t.logsumexp_rows(x)),
        ("softmax", |t, x| t.softmax_rows(x)),
        ("causal_softmax", |t, x| {
            let sq = t.slice_cols(x, 0, 3)?;
            t.causal_softmax(sq)
        }),
        ("embedding_gather", |t, x| t.select_rows(x, &[2, 0, 2, 1])),
        ("cross_entropy", |t, x| t.cross_entropy(x, &[Some(1), None, Some(3)])),
        ("rmsnorm", |t, x| {
            let g = t.constant(randn(&[4], &mut rng(17)));
            t.rmsnorm(x, g, 1e-6)
        }),
        ("swiglu", |t, x| {
            let u = t.constant(randn(&[3, 4], &mut rng(18)));
            t.swiglu(x, u)
        }),
        ("rope", |t, x| t.rope(x, &[0, 3, 7], 10_000.0)),
        ("transpose", |t, x| t.transpose(x)),
        ("concat", |t, x| {
            let c = t.constant(randn(&[3, 2], &mut rng(19)));
            let a = t.concat_cols(&[x, c])?;
            t.concat_rows(&[a, a])
        }),
        ("scale_mean", |t, x| {
            let y = t.scale(x, 2.5);
            Ok(t.mean(y))
        }),
    ]
}

#[test]
fn every_primitive_passes_gradient_check() {
    for (name, f) in primitives() {
        for seed in 0..5 {
            let x = randn(&[3, 4], &mut rng(100 + seed));
            let err = finite_diff_check(
                |t, v| {
                    let y = f(t, v)?;
                    weighted_sum(t, y, 1000 + seed)
                },
                &x,
                EPS,
            )
            .unwrap();
            assert!(err < TOL, "{name} seed {seed}: {err}");
        }
    }
}

#[test]
fn rmsnorm_gain_gradient() {
    let x = randn(&[3, 4], &mut rng(21));
    let g = randn(&[4], &mut rng(22));
    let err = finite_diff_check(
        |t, gain| {
            let vx = t.constant(x.clone());
            let y = t.rmsnorm(vx, gain, 1e-6)?;
            weighted_sum(t, y, 23)
        },
        &g,
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn relu_gradient_away_from_kink() {
    let x = Tensor::from_fn(&[2, 5], |i| if i % 2 == 0 { 0.3 + i as f64 } else { -0.4 - i as f64 });
    let err = finite_diff_check(
        |t, v| {
            let y = t.relu(v);
            weighted_sum(t, y, 24)
        },
        &x,
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

/// Shape-preserving primitives used for random compositions on a 3×4 input.
fn composable() -> Vec<Unary> {
    vec![
        |t, x| t.softmax_rows(x),
        |t, x| {
            let g = t.constant(randn(&[4], &mut rng(31)));
            t.rmsnorm(x, g, 1e-6)
        },
        |t, x| {
            let u = t.constant(randn(&[3, 4], &mut rng(32)));
            t.swiglu(x, u)
        },
        |t, x| {
            let w = t.constant(randn(&[4, 4], &mut rng(33)));
            t.matmul(x, w)
        },
        |t, x| t.mul(x, x),
        |t, x| t.rope(x, &[1, 2, 5], 100.0),
        |t, x| {
            let b = t.constant(randn(&[4], &mut rng(34)));
            t.add_row_bias(x, b)
        },
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn three_deep_compositions(ops in prop::collection::vec(0usize..7, 3), seed in 0u64..1000) {
        let fs = composable();
        let x = randn(&[3, 4], &mut rng(seed));
        let err = finite_diff_check(
            |t, v| {
                let mut y = v;
                for &o in &ops {
                    y = fs[o](t, y)?;
                }
                weighted_sum(t, y, seed + 1)
            },
            &x,
            EPS,
        )
        .unwrap();
        prop_assert!(err < TOL, "ops {:?}: {}", ops, err);
    }
}

#[test]
fn shared_subexpression_accumulates_both_paths() {
    // y = x·x + x, used twice: d/dx sum(y) + sum(y ⊙ y).
    let x = randn(&[2, 3], &mut rng(41));
    let mut tape = Tape::new();
    let v = tape.input(x.clone());
    let sq = tape.mul(v, v).unwrap();
    let y = tape.add(sq, v).unwrap();
    let yy = tape.mul(y, y).unwrap();
    let s1 = tape.sum(y);
    let s2 = tape.sum(yy);
    let both = tape.add(s1, s2).unwrap();
    let g = tape.backward(both).unwrap();
    let expected: Vec<f64> = x
        .data()
        .iter()
        .map(|&x| {
            let y = x * x + x;
            (2.0 * x + 1.0) * (1.0 + 2.0 * y)
        })
        .collect();
    assert!(max_abs_diff(g.wrt(v).unwrap(), &expected) < 1e-12);
}
