use pointssm_core::numerics::{grad_check, grad_check_with, Activation, GradCheckOptions};
use pointssm_core::{GradTape, Result, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Contracts an arbitrary output with fixed random weights so every entry
/// contributes a distinct gradient.
fn contract(tape: &mut GradTape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(Tensor::randn(shape, 1.0, &mut rng(seed)));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn check_many(points: &[Tensor], f: impl Fn(&mut GradTape, &[Var]) -> Result<Var>) -> f64 {
    grad_check_with(f, points, &GradCheckOptions::default()).unwrap()
}

#[test]
fn sum_of_squares_is_exact() {
    let x = Tensor::randn([5, 3], 1.0, &mut rng(1));
    let err = grad_check(
        |t, v| {
            let sq = t.mul(v, v)?;
            t.sum(sq)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn softplus_sum_at_reference_points() {
    let x = Tensor::new([3], vec![-1.0, 0.0, 1.0]).unwrap();
    let err = grad_check(
        |t, v| {
            let s = t.softplus(v)?;
            t.sum(s)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn elementwise_ops() {
    for (i, f) in [
        Activation::Silu,
        Activation::Softplus,
        Activation::Gelu,
        Activation::Relu,
    ]
    .into_iter()
    .enumerate()
    {
        let x = Tensor::randn([4, 5], 1.5, &mut rng(10 + i as u64));
        let err = grad_check(
            |t, v| {
                let y = t.activation(v, f)?;
                contract(t, y, 99)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{f:?}: {err}");
    }
    let a = Tensor::randn([3, 4], 1.0, &mut rng(20));
    let b = Tensor::randn([3, 4], 1.0, &mut rng(21));
    for op in 0..4 {
        let err = check_many(&[a.clone(), b.clone()], |t, v| {
            let y = match op {
                0 => t.add(v[0], v[1])?,
                1 => t.sub(v[0], v[1])?,
                2 => t.mul(v[0], v[1])?,
                _ => t.scale(v[0], -2.5)?,
            };
            contract(t, y, 7)
        });
        assert!(err < 1e-6, "op {op}: {err}");
    }
}

#[test]
fn matmul_and_linear() {
    let a = Tensor::randn([5, 4], 1.0, &mut rng(30));
    let b = Tensor::randn([4, 3], 1.0, &mut rng(31));
    let bias = Tensor::randn([3], 1.0, &mut rng(32));
    let err = check_many(&[a.clone(), b.clone(), bias], |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        contract(t, y, 3)
    });
    assert!(err < 1e-6, "{err}");

    let c = Tensor::randn([6, 4], 1.0, &mut rng(33));
    let err = check_many(&[a, c], |t, v| {
        let y = t.matmul_nt(v[0], v[1])?;
        contract(t, y, 4)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn row_broadcasts() {
    let x = Tensor::randn([4, 3], 1.0, &mut rng(40));
    let r = Tensor::randn([3], 1.0, &mut rng(41));
    let err = check_many(&[x.clone(), r.clone()], |t, v| {
        let y = t.mul_row(v[0], v[1])?;
        let y = t.add_row(y, v[1])?;
        contract(t, y, 5)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn layer_norm_gradients() {
    let x = Tensor::randn([5, 6], 2.0, &mut rng(50));
    let g = Tensor::randn([6], 1.0, &mut rng(51));
    let b = Tensor::randn([6], 1.0, &mut rng(52));
    let err = check_many(&[x, g, b], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        contract(t, y, 6)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn causal_conv_gradients() {
    let x = Tensor::randn([7, 3], 1.0, &mut rng(60));
    let k = Tensor::randn([4, 3], 1.0, &mut rng(61));
    let b = Tensor::randn([3], 1.0, &mut rng(62));
    let err = check_many(&[x, k, b], |t, v| {
        let y = t.causal_conv(v[0], v[1], v[2])?;
        contract(t, y, 8)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn pooling_and_reshaping_ops() {
    let x = Tensor::randn([6, 4], 1.0, &mut rng(70));
    let y = Tensor::randn([6, 2], 1.0, &mut rng(71));
    let err = check_many(&[x.clone(), y.clone()], |t, v| {
        let m = t.group_max(v[0], 3)?;
        let r = t.group_repeat(m, 3)?;
        let c = t.concat_cols(r, v[1])?;
        let s = t.slice_cols(c, 1, 4)?;
        let g = t.gather_rows(s, &[5, 0, 0, 2])?;
        let cat = t.concat_rows(&[g, s])?;
        let mr = t.mean_rows(cat)?;
        contract(t, mr, 9)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn attention_pieces() {
    let q = Tensor::randn([5, 3], 1.0, &mut rng(80));
    let k = Tensor::randn([5, 3], 1.0, &mut rng(81));
    let err = check_many(&[q, k], |t, v| {
        let s = t.matmul_nt(v[0], v[1])?;
        let p = t.causal_softmax(s)?;
        contract(t, p, 10)
    });
    assert!(err < 1e-4, "{err}");

    let mut tape = GradTape::new();
    let s = tape.constant(Tensor::randn([6, 6], 3.0, &mut rng(82)));
    let p = tape.causal_softmax(s).unwrap();
    let p = tape.value(p);
    for i in 0..6 {
        let row: f64 = p.row(i).iter().sum();
        assert!((row - 1.0).abs() < 1e-12);
        assert!(p.row(i)[i + 1..].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn cross_entropy_gradients() {
    let logits = Tensor::randn([4, 5], 1.0, &mut rng(90));
    let err = grad_check(|t, v| t.cross_entropy(v, &[0, 4, 2, 2]), &logits, 1e-5).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn backward_reaches_only_params() {
    let mut tape = GradTape::new();
    let c = tape.constant(Tensor::full([2], 3.0));
    let p = tape.param(Tensor::full([2], 2.0));
    let y = tape.mul(c, p).unwrap();
    let l = tape.sum(y).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(p).unwrap(), &[3.0, 3.0]);
    assert!(g.get(c).is_none());
}

#[test]
fn shared_inputs_accumulate() {
    let mut tape = GradTape::new();
    let p = tape.param(Tensor::full([1], 2.0));
    let a = tape.mul(p, p).unwrap();
    let b = tape.add(a, p).unwrap();
    let l = tape.sum(b).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(p).unwrap(), &[5.0]);
}

#[test]
fn non_finite_results_are_errors() {
    let mut tape = GradTape::new().with_finite_checks(true);
    let a = tape.constant(Tensor::full([1], f64::MAX));
    assert!(tape.scale(a, 10.0).is_err());
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut tape = GradTape::new();
        let x = tape.param(Tensor::randn([8, 8], 1.0, &mut rng(5)));
        let w = tape.param(Tensor::randn([8, 8], 1.0, &mut rng(6)));
        let y = tape.matmul(x, w).unwrap();
        let y = tape.gelu(y).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        (tape.value(l).data().to_vec(), g.get(w).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}
