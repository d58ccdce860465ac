use pointssm_core::numerics::{grad_check_with, Binder, GradCheckOptions, ParamStore};
use pointssm_core::ssm::infer::{flops_estimate, InferenceBlock};
use pointssm_core::ssm::scan::{scan_on_tape, ScanDims};
use pointssm_core::ssm::{
    block_forward, block_partition_probe, init_block, mamba_block, selective_parameters,
    selective_ssm_on_tape, ssm_hidden_states, ssm_matrix_form, ssm_scan, transfer_matrix,
    zoh_discretize, BlockConfig, BlockKind, SelectiveSsmParams, SsmVars, TransferMode,
};
use pointssm_core::{GradTape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn zoh_examples() {
    let (a, b) = zoh_discretize(&[-1.0], &[1.0], std::f64::consts::LN_2, false).unwrap();
    assert!((a[0] - 0.5).abs() < 1e-15 && (b[0] - 0.5).abs() < 1e-15);

    let (a, b) = zoh_discretize(&[-2.0], &[1.5], 0.3, false).unwrap();
    let expect_a = (-0.6f64).exp();
    let expect_b = (expect_a - 1.0) / -0.6 * 0.3 * 1.5;
    assert!((a[0] - expect_a).abs() < 1e-15 && (a[0] - 0.548_812).abs() < 1e-6);
    assert!((b[0] - expect_b).abs() < 1e-15 && (b[0] - 0.338_391).abs() < 1e-6);

    for delta in [1e-3, 1e-6, 1e-9] {
        let (a, b) = zoh_discretize(&[-0.05], &[2.0], delta, false).unwrap();
        assert!((a[0] - 1.0).abs() < 0.1 * delta);
        assert!((b[0] - delta * 2.0).abs() < delta * 0.1 * delta);
    }
    let (_, b) = zoh_discretize(&[-2.0], &[1.5], 0.3, true).unwrap();
    assert!((b[0] - 0.45).abs() < 1e-15);
    assert!(zoh_discretize(&[-1.0], &[1.0], 0.0, false).is_err());
    assert!(zoh_discretize(&[-1.0], &[1.0], -0.1, false).is_err());
}

#[test]
fn selective_parameter_examples() {
    let mut p = SelectiveSsmParams::random(4, 3, 2, 1.0, &mut rng(1));
    p.dt_bias = Tensor::new([4], vec![0.1, -0.2, 0.3, 0.0]).unwrap();
    let (b, c, d) = selective_parameters(&Tensor::zeros([5, 4]), &p).unwrap();
    assert!(b.data().iter().chain(c.data()).all(|&v| v == 0.0));
    for t in 0..5 {
        for j in 0..4 {
            let sp = (1.0 + p.dt_bias.data()[j].exp()).ln();
            assert!((d.at(t, j) - sp).abs() < 1e-15 && d.at(t, j) > 0.0);
        }
    }

    let x = Tensor::randn([8, 4], 1.0, &mut rng(2));
    let (b, c, d) = selective_parameters(&x, &p).unwrap();
    assert!(d.data().iter().all(|&v| v > 0.0));
    for t in 0..8 {
        for n in 0..3 {
            let hb: f64 = (0..4).map(|j| x.at(t, j) * p.w_b.at(j, n)).sum();
            let hc: f64 = (0..4).map(|j| x.at(t, j) * p.w_c.at(j, n)).sum();
            assert!((b.at(t, n) - hb).abs() < 1e-12 && (c.at(t, n) - hc).abs() < 1e-12);
        }
        for j in 0..4 {
            let mut pre = p.dt_bias.data()[j];
            for r in 0..2 {
                let low: f64 = (0..4).map(|m| x.at(t, m) * p.w_dt_down.at(m, r)).sum();
                pre += low * p.w_dt_up.at(r, j);
            }
            assert!((d.at(t, j) - (1.0 + pre.exp()).ln()).abs() < 1e-12);
        }
    }
}

#[test]
fn scan_small_cases() {
    let p = SelectiveSsmParams::random(3, 2, 1, 0.7, &mut rng(3));
    let y = ssm_scan(&Tensor::zeros([6, 3]), &p, false).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));

    let x = Tensor::randn([1, 3], 1.0, &mut rng(4));
    let y = ssm_scan(&x, &p, false).unwrap();
    let (b, c, dl) = selective_parameters(&x, &p).unwrap();
    let a = p.a();
    for d in 0..3 {
        let mut expect = p.d.data()[d] * x.at(0, d);
        for n in 0..2 {
            let z = a[d * 2 + n] * dl.at(0, d);
            let bbar = z.exp_m1() / z * dl.at(0, d) * b.at(0, n);
            expect += c.at(0, n) * bbar * x.at(0, d);
        }
        assert!((y.at(0, d) - expect).abs() < 1e-14);
    }
    let ym = ssm_matrix_form(&x, &p, false).unwrap();
    assert!(y.max_abs_diff(&ym) < 1e-14);
}

#[test]
fn matrix_form_two_steps_by_hand() {
    let p = SelectiveSsmParams::random(2, 3, 1, 0.8, &mut rng(5));
    let x = Tensor::randn([2, 2], 1.0, &mut rng(6));
    let h = ssm_hidden_states(&x, &p, false).unwrap();
    let (b, _, dl) = selective_parameters(&x, &p).unwrap();
    let a = p.a();
    for d in 0..2 {
        for n in 0..3 {
            let disc = |t: usize| {
                let (ab, bb) =
                    zoh_discretize(&[a[d * 3 + n]], &[b.at(t, n)], dl.at(t, d), false).unwrap();
                (ab[0], bb[0])
            };
            let (_, b1) = disc(0);
            let (a2, b2) = disc(1);
            let h1 = b1 * x.at(0, d);
            let h2 = a2 * b1 * x.at(0, d) + b2 * x.at(1, d);
            assert!((h.data()[d * 3 + n] - h1).abs() < 1e-14);
            assert!((h.data()[6 + d * 3 + n] - h2).abs() < 1e-14);
        }
    }
}

#[test]
fn scan_agrees_with_matrix_form() {
    let mut r = rng(7);
    for simplified in [false, true] {
        for _ in 0..50 {
            let len = r.random_range(1..=64);
            let state = r.random_range(1..=8);
            let inner = r.random_range(1..=16);
            let rank = r.random_range(1..=4);
            let p = SelectiveSsmParams::random(inner, state, rank, 0.5, &mut r);
            let x = Tensor::randn([len, inner], 1.0, &mut r);
            let a = ssm_scan(&x, &p, simplified).unwrap();
            let b = ssm_matrix_form(&x, &p, simplified).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-10, "diff {}", a.max_abs_diff(&b));
        }
    }
    let p = SelectiveSsmParams::random(2, 2, 1, 0.5, &mut r);
    assert!(ssm_matrix_form(&Tensor::zeros([257, 2]), &p, false).is_err());
}

#[test]
fn transfer_matrix_properties() {
    let mut r = rng(8);
    for _ in 0..10 {
        let (len, inner, state) = (
            r.random_range(2..=24),
            r.random_range(1..=6),
            r.random_range(1..=4),
        );
        let p = SelectiveSsmParams::random(inner, state, 2, 0.5, &mut r);
        let x = Tensor::randn([len, inner], 1.0, &mut r);
        let view = transfer_matrix(&x, &p, TransferMode::Exact, false).unwrap();
        for i in 0..len {
            for j in i + 1..len {
                for d in 0..inner {
                    assert_eq!(view.at(i, j, d), 0.0);
                }
            }
        }
        let y = ssm_scan(&x, &p, false).unwrap();
        let wx = view.apply(&x).unwrap();
        for t in 0..len {
            for d in 0..inner {
                let resid = y.at(t, d) - p.d.data()[d] * x.at(t, d);
                assert!((resid - wx.at(t, d)).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn relu_transfer_matches_in_linear_regime() {
    let mut r = rng(9);
    let (len, inner, state) = (16, 4, 4);
    let mut p = SelectiveSsmParams::init(inner, state, 1, &mut r);
    p.w_dt_down = Tensor::randn([inner, 1], 0.1, &mut r);
    p.w_dt_up = Tensor::randn([1, inner], 0.1, &mut r);
    p.dt_bias = Tensor::full([inner], 6.0);
    let x = Tensor::uniform([len, inner], -1.0, 1.0, &mut r);
    let pre = p.delta_preactivation(&x).unwrap();
    assert!(pre.data().iter().all(|&v| v >= 5.0));
    let exact = transfer_matrix(&x, &p, TransferMode::Exact, false).unwrap();
    let relu = transfer_matrix(&x, &p, TransferMode::ReluApprox, false).unwrap();
    let num: f64 = exact
        .w
        .iter()
        .zip(&relu.w)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    let den: f64 = exact.w.iter().map(|a| a * a).sum();
    assert!((num / den).sqrt() < 1e-2);
    // Q/T/K factorisation reproduces W
    let (i, j, d) = (9, 4, 2);
    let w: f64 = (0..state)
        .map(|n| {
            relu.q[i * state + n]
                * relu.t[((i * len + j) * inner + d) * state + n]
                * relu.k[(j * inner + d) * state + n]
        })
        .sum();
    assert!((w - relu.at(i, j, d)).abs() < 1e-15);
}

#[test]
fn half_sequence_structure() {
    let mut r = rng(10);
    for len in [2, 8, 32] {
        let p = SelectiveSsmParams::random(6, 4, 2, 0.5, &mut r);
        let x = Tensor::randn([len, 6], 1.0, &mut r);
        let rep = block_partition_probe(&x, &p, false, &mut r).unwrap();
        assert_eq!(rep.first_half_change_from_second, 0.0);
        assert_eq!(rep.first_half_self_contained, 0.0);
        assert!(rep.second_half_change_from_first > 0.0);
        assert!(rep.second_half_change_from_second > 0.0);
    }
    let p = SelectiveSsmParams::random(2, 2, 1, 0.5, &mut r);
    assert!(block_partition_probe(&Tensor::zeros([3, 2]), &p, false, &mut r).is_err());
}

#[test]
fn long_sequences_stay_bounded() {
    let mut r = rng(11);
    let p = SelectiveSsmParams::random(4, 8, 1, 1.0, &mut r);
    let a = p.a();
    let x = Tensor::uniform([4096, 4], -1.0, 1.0, &mut r);
    let (_, _, dl) = selective_parameters(&x, &p).unwrap();
    for &dt in dl.data() {
        for &av in &a {
            assert!((av * dt).exp() < 1.0);
        }
    }
    let h = ssm_hidden_states(&x, &p, false).unwrap();
    assert!(h.is_finite());
    assert!(h.max_abs() < 1e6);
}

fn ssm_points(p: &SelectiveSsmParams) -> Vec<Tensor> {
    vec![
        p.a_log.clone(),
        p.d.clone(),
        p.w_b.clone(),
        p.w_c.clone(),
        p.w_dt_down.clone(),
        p.w_dt_up.clone(),
        p.dt_bias.clone(),
    ]
}

#[test]
fn scan_gradients() {
    let mut r = rng(12);
    for simplified in [false, true] {
        let p = SelectiveSsmParams::random(3, 4, 2, 0.5, &mut r);
        let x = Tensor::randn([9, 3], 1.0, &mut r);
        let w = Tensor::randn([9, 3], 1.0, &mut r);
        let mut points = vec![x];
        points.extend(ssm_points(&p));
        let err = grad_check_with(
            |t, v| {
                let vars = SsmVars {
                    a_log: v[1],
                    d: v[2],
                    w_b: v[3],
                    w_c: v[4],
                    w_dt_down: v[5],
                    w_dt_up: v[6],
                    dt_bias: v[7],
                };
                let y = selective_ssm_on_tape(t, v[0], &vars, simplified)?;
                let wv = t.constant(w.clone());
                let m = t.mul(y, wv)?;
                t.sum(m)
            },
            &points,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(err < 1e-4, "simplified={simplified}: {err}");
    }
}

#[test]
fn raw_scan_gradients_with_long_chunks() {
    // 30 steps use chunks of 6, exercising checkpoint recomputation
    let mut r = rng(13);
    let (len, inner, state) = (30, 2, 3);
    let dims = ScanDims { len, inner, state };
    let u = Tensor::randn([len, inner], 1.0, &mut r);
    let delta = Tensor::uniform([len, inner], 0.05, 0.8, &mut r);
    let a_log = Tensor::randn([inner, state], 0.5, &mut r);
    let b = Tensor::randn([len, state], 1.0, &mut r);
    let c = Tensor::randn([len, state], 1.0, &mut r);
    let d = Tensor::randn([inner], 1.0, &mut r);
    let w = Tensor::randn([len, inner], 1.0, &mut r);
    assert_eq!(dims.len, u.rows());
    let err = grad_check_with(
        |t, v| {
            let y = scan_on_tape(t, [v[0], v[1], v[2], v[3], v[4], v[5]], false)?;
            let wv = t.constant(w.clone());
            let m = t.mul(y, wv)?;
            t.sum(m)
        },
        &[u, delta, a_log, b, c, d],
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

fn block_store(cfg: &BlockConfig, seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    init_block(&mut s, "b.", cfg, &mut rng(seed)).unwrap();
    s
}

fn perturb_tail(z: &Tensor, from: usize, r: &mut ChaCha8Rng) -> Tensor {
    let mut z2 = z.clone();
    let c = z.cols();
    for v in &mut z2.data_mut()[from * c..] {
        *v += r.random_range(-1.0..1.0);
    }
    z2
}

#[test]
fn block_residual_identity() {
    for kind in BlockKind::ALL {
        let cfg = BlockConfig::new(8, kind);
        let mut s = block_store(&cfg, 14);
        for (_, t) in s.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let z = Tensor::randn([6, 8], 1.0, &mut rng(15));
        assert_eq!(mamba_block(&z, &s, "b.", &cfg).unwrap(), z, "{kind}");
        let mut s = block_store(&cfg, 14);
        s.get_mut("b.out_proj.weight").unwrap().data_mut().fill(0.0);
        assert_eq!(mamba_block(&z, &s, "b.", &cfg).unwrap(), z, "{kind}");
    }
}

#[test]
fn blocks_are_causal() {
    let mut r = rng(16);
    for kind in BlockKind::ALL {
        let cfg = BlockConfig::new(16, kind);
        let s = block_store(&cfg, 17);
        let z = Tensor::randn([12, 16], 1.0, &mut r);
        let base = mamba_block(&z, &s, "b.", &cfg).unwrap();
        for t0 in [1, 5, 11] {
            let out = mamba_block(&perturb_tail(&z, t0, &mut r), &s, "b.", &cfg).unwrap();
            let diff = base.data()[..t0 * 16]
                .iter()
                .zip(&out.data()[..t0 * 16])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12, "{kind} t0={t0}: {diff}");
            assert!(base.row(t0) != out.row(t0));
        }
    }
}

#[test]
fn mlp_mixer_is_position_wise() {
    let cfg = BlockConfig::new(8, BlockKind::Mlp);
    let s = block_store(&cfg, 18);
    let mut tape = GradTape::new();
    let mut bind = Binder::new(&s);
    let x = Tensor::randn([7, 16], 1.0, &mut rng(19));
    let mut x2 = x.clone();
    x2.data_mut()[3 * 16..4 * 16]
        .iter_mut()
        .for_each(|v| *v += 1.0);
    // run the mixer alone by feeding it through the block's linear layers
    let run = |tape: &mut GradTape, bind: &mut Binder<'_>, x: &Tensor| {
        let xv = tape.constant(x.clone());
        let w1 = bind.var(tape, "b.mlp.fc1.weight").unwrap();
        let b1 = bind.var(tape, "b.mlp.fc1.bias").unwrap();
        let w2 = bind.var(tape, "b.mlp.fc2.weight").unwrap();
        let b2 = bind.var(tape, "b.mlp.fc2.bias").unwrap();
        let h = tape.linear(xv, w1, Some(b1)).unwrap();
        let h = tape.gelu(h).unwrap();
        let y = tape.linear(h, w2, Some(b2)).unwrap();
        tape.value(y).clone()
    };
    let a = run(&mut tape, &mut bind, &x);
    let b = run(&mut tape, &mut bind, &x2);
    for t in 0..7 {
        assert_eq!(a.row(t) == b.row(t), t != 3);
    }

    // the block's trace exposes the same mixer
    let z = Tensor::randn([7, 8], 1.0, &mut rng(20));
    let zv = tape.constant(z);
    let tr = block_forward(&mut tape, &mut bind, "b.", zv, &cfg).unwrap();
    assert_eq!(tape.value(tr.mixer_output).shape(), &[7, 16]);
}

#[test]
fn attention_weights_are_causal_distributions() {
    let mut tape = GradTape::new();
    let s = tape.constant(Tensor::randn([9, 9], 3.0, &mut rng(22)));
    let att = tape.causal_softmax(s).unwrap();
    let att = tape.value(att);
    for r in 0..9 {
        assert!((att.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(att.row(r)[..=r].iter().all(|&v| v > 0.0));
        assert!(att.row(r)[r + 1..].iter().all(|&v| v == 0.0));
    }
}

fn block_grad_err(len: usize, c: usize, kind: BlockKind, seed: u64) -> f64 {
    let cfg = BlockConfig {
        d_state: 4,
        ..BlockConfig::new(c, kind)
    };
    let s = block_store(&cfg, seed);
    let names: Vec<String> = s.names().map(str::to_string).collect();
    let mut points: Vec<Tensor> = names.iter().map(|n| s.get(n).unwrap().clone()).collect();
    points.push(Tensor::randn([len, c], 1.0, &mut rng(seed + 1)));
    let w = Tensor::randn([len, c], 1.0, &mut rng(seed + 2));
    // h = 1e-4: at 1e-5 round-off in the O(10) loss swamps the ~1e-8 gradients of some a_log entries
    let opts = GradCheckOptions {
        h: 1e-4,
        max_coords: Some(24),
        ..GradCheckOptions::default()
    };
    grad_check_with(
        |t, v| {
            let mut bind = Binder::new(&s);
            for (n, &var) in names.iter().zip(v) {
                bind.preset(n, var);
            }
            let y = block_forward(t, &mut bind, "b.", *v.last().unwrap(), &cfg)?.output;
            let wv = t.constant(w.clone());
            let m = t.mul(y, wv)?;
            t.sum(m)
        },
        &points,
        &opts,
    )
    .unwrap()
}

#[test]
fn block_gradients() {
    assert!(block_grad_err(8, 16, BlockKind::SelectiveSsm, 30) < 1e-4);
    let err = block_grad_err(16, 32, BlockKind::SelectiveSsm, 31);
    assert!(err < 1e-4, "{err}");
    for kind in [
        BlockKind::Identity,
        BlockKind::MaskedAttention,
        BlockKind::Mlp,
    ] {
        let err = block_grad_err(8, 8, kind, 32);
        assert!(err < 1e-4, "{kind}: {err}");
    }
}

#[test]
fn parameter_counts_match_stores() {
    for kind in BlockKind::ALL {
        let cfg = BlockConfig::new(24, kind);
        assert_eq!(
            block_store(&cfg, 40).count(),
            cfg.parameter_count(),
            "{kind}"
        );
    }
    assert_eq!(
        BlockConfig::new(384, BlockKind::SelectiveSsm).parameter_count(),
        964_608
    );
}

#[test]
fn inference_kernels_match_tape() {
    for kind in [BlockKind::SelectiveSsm, BlockKind::MaskedAttention] {
        let cfg = BlockConfig::new(16, kind);
        let s = block_store(&cfg, 50);
        let z = Tensor::randn([20, 16], 1.0, &mut rng(51));
        let want = mamba_block(&z, &s, "b.", &cfg).unwrap();
        let f64_out = InferenceBlock::<f64>::from_store(&s, "b.", &cfg)
            .unwrap()
            .forward(z.data(), 20)
            .unwrap();
        let diff = want
            .data()
            .iter()
            .zip(&f64_out)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-10, "{kind}: {diff}");
        let z32: Vec<f32> = z.data().iter().map(|&v| v as f32).collect();
        let f32_out = InferenceBlock::<f32>::from_store(&s, "b.", &cfg)
            .unwrap()
            .forward(&z32, 20)
            .unwrap();
        let diff = want
            .data()
            .iter()
            .zip(&f32_out)
            .map(|(a, &b)| (a - b as f64).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-3, "{kind}: {diff}");
    }
    assert!(InferenceBlock::<f32>::from_store(
        &ParamStore::new(),
        "b.",
        &BlockConfig::new(8, BlockKind::Mlp)
    )
    .is_err());
}

#[test]
fn flop_estimates_scale() {
    let ssm = BlockConfig::new(32, BlockKind::SelectiveSsm);
    let att = BlockConfig::new(32, BlockKind::MaskedAttention);
    for l in [128, 1024, 4096] {
        assert_eq!(
            flops_estimate(&ssm, 2 * l).total(),
            2 * flops_estimate(&ssm, l).total()
        );
        assert_eq!(
            flops_estimate(&att, 2 * l).quadratic,
            4 * flops_estimate(&att, l).quadratic
        );
    }
}
