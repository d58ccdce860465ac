use std::collections::BTreeMap;

use pointssm_core::data::{synthetic_datasets, Dataset, Sample, Split, SyntheticConfig};
use pointssm_core::model::{init_model, parameter_breakdown, ModelConfig, Stage};
use pointssm_core::numerics::{ParamStore, Tensor};
use pointssm_core::training::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(classes: usize) -> ModelConfig {
    ModelConfig {
        num_points: 64,
        num_patches: 8,
        patch_size: 8,
        embed_dim: 16,
        encoder_layers: 2,
        decoder_layers: 1,
        num_classes: classes,
        d_state: 4,
        tokenizer_widths: [8, 12, 16],
        pos_hidden: 8,
        head_hidden: 16,
        dropout: 0.0,
        ..ModelConfig::full()
    }
}

fn tiny_data(per_class: usize, test_per_class: usize) -> (Dataset, Dataset) {
    synthetic_datasets(&SyntheticConfig {
        train_per_class: per_class,
        test_per_class,
        points: 64,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn scalar_store(name: &str, v: f64) -> ParamStore {
    let mut p = ParamStore::new();
    p.insert(name, Tensor::new([1], vec![v]).unwrap()).unwrap();
    p
}

fn grads(name: &str, g: f64) -> BTreeMap<String, Vec<f64>> {
    BTreeMap::from([(name.to_string(), vec![g])])
}

fn no_decay() -> AdamW {
    AdamW {
        weight_decay: 0.0,
        ..AdamW::default()
    }
}

#[test]
fn adamw_examples() {
    let mut p = scalar_store("w", 1.0);
    let mut st = OptimizerState::new(no_decay());
    adamw_step(&mut p, &grads("w", 0.0), &mut st, 0.1).unwrap();
    assert_eq!(p.get("w").unwrap().data()[0], 1.0);

    let mut p = scalar_store("w", 1.0);
    let mut st = OptimizerState::new(no_decay());
    adamw_step(&mut p, &grads("w", 1.0), &mut st, 0.1).unwrap();
    assert!((p.get("w").unwrap().data()[0] - 0.9).abs() < 1e-6);
    assert_eq!(st.step, 1);

    let mut p = scalar_store("w", 1.0);
    let mut st = OptimizerState::new(AdamW::default());
    adamw_step(&mut p, &grads("w", 0.0), &mut st, 0.1).unwrap();
    assert!((p.get("w").unwrap().data()[0] - 0.995).abs() < 1e-15);

    // biases are not decayed
    let mut p = scalar_store("fc.bias", 1.0);
    let mut st = OptimizerState::new(AdamW::default());
    adamw_step(&mut p, &grads("fc.bias", 0.0), &mut st, 0.1).unwrap();
    assert_eq!(p.get("fc.bias").unwrap().data()[0], 1.0);
}

#[test]
fn adamw_errors() {
    let mut p = scalar_store("w", 1.0);
    let mut st = OptimizerState::new(AdamW::default());
    assert!(adamw_step(&mut p, &grads("w", 1.0), &mut st, 0.0).is_err());
    let bad = BTreeMap::from([("w".to_string(), vec![1.0, 2.0])]);
    assert!(adamw_step(&mut p, &bad, &mut st, 0.1).is_err());
    assert!(adamw_step(&mut p, &grads("missing", 1.0), &mut st, 0.1).is_err());
    assert_eq!(st.step, 0);
}

#[test]
fn skip_list() {
    for n in [
        "encoder.norm.weight",
        "encoder.blocks.0.norm.bias",
        "head.fc1.bias",
        "indicator.0.gamma",
        "encoder.blocks.3.ssm.a_log",
        "encoder.blocks.3.ssm.d",
        "cls_token",
        "decoder.mask_token",
    ] {
        assert!(skips_weight_decay(n), "{n}");
    }
    for n in [
        "head.fc1.weight",
        "encoder.blocks.0.in_proj.weight",
        "encoder.blocks.0.ssm.dt_down.weight",
    ] {
        assert!(!skips_weight_decay(n), "{n}");
    }
}

#[test]
fn adamw_matches_scalar_reference() {
    let (b1, b2, eps, wd) = (0.9, 0.999, 1e-8, 0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let init: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut p = ParamStore::new();
    p.insert("w", Tensor::new([5], init.clone()).unwrap())
        .unwrap();
    let mut st = OptimizerState::new(AdamW {
        beta1: b1,
        beta2: b2,
        eps,
        weight_decay: wd,
    });

    let mut w = init;
    let (mut m, mut v) = (vec![0.0; 5], vec![0.0; 5]);
    for step in 1..=100 {
        let g: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lr = 1e-2 / step as f64;
        adamw_step(
            &mut p,
            &BTreeMap::from([("w".to_string(), g.clone())]),
            &mut st,
            lr,
        )
        .unwrap();
        for i in 0..5 {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(step));
            let vh = v[i] / (1.0 - b2.powi(step));
            w[i] = w[i] - lr * wd * w[i] - lr * mh / (vh.sqrt() + eps);
        }
    }
    assert_eq!(st.step, 100);
    for (a, b) in p.get("w").unwrap().data().iter().zip(&w) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn cosine_examples() {
    let (base, min) = (1e-3, 1e-6);
    assert_eq!(cosine_lr(0, 100, 10, base, min), 0.0);
    assert_eq!(cosine_lr(5, 100, 10, base, min), base / 2.0);
    assert_eq!(cosine_lr(10, 100, 10, base, min), base);
    assert!((cosine_lr(100, 100, 10, base, min) - min).abs() < 1e-18);
    assert!((cosine_lr(55, 100, 10, base, min) - (min + 0.5 * (base - min))).abs() < 1e-15);
    assert_eq!(cosine_lr(0, 100, 0, base, min), base);
}

proptest! {
    #[test]
    fn cosine_continuous_and_monotone(total in 2usize..400, warm_frac in 0.0f64..0.9, base in 1e-5f64..1.0) {
        let warm = ((total as f64) * warm_frac) as usize;
        let min = base * 1e-3;
        let mut prev = f64::INFINITY;
        for s in warm..=total {
            let lr = cosine_lr(s, total, warm, base, min);
            prop_assert!(lr <= prev + 1e-15);
            prop_assert!(lr >= min - 1e-15 && lr <= base + 1e-15);
            prev = lr;
        }
        if warm > 0 {
            let before = cosine_lr(warm - 1, total, warm, base, min);
            let jump = base / warm as f64;
            prop_assert!((base - before - jump).abs() < 1e-12);
        }
        let step_after = cosine_lr(warm + 1, total, warm, base, min);
        let slope = (base - min) * std::f64::consts::PI / (total - warm) as f64;
        prop_assert!(base - step_after <= slope + 1e-12);
    }
}

#[test]
fn clipping() {
    let mut g = BTreeMap::from([("a".to_string(), vec![3.0]), ("b".to_string(), vec![4.0])]);
    assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
    assert_eq!(g["a"], vec![3.0]);
    assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
    assert!((g["a"][0] - 0.6).abs() < 1e-15 && (g["b"][0] - 0.8).abs() < 1e-15);
    assert_eq!(clip_grad_norm(&mut g, 0.0), 1.0);
}

#[test]
fn accuracy_examples() {
    let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
    let perfect: Vec<Vec<f64>> = labels
        .iter()
        .map(|&y| (0..4).map(|c| f64::from(u8::from(c == y))).collect())
        .collect();
    let e = accuracy(&perfect, &labels, 4).unwrap();
    assert_eq!(e.overall, 1.0);
    assert_eq!(e.per_class, vec![1.0; 4]);

    // P(|Binomial(1000, 1/4)/1000 − 1/4| > 0.05) < 3e-4
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let labels: Vec<usize> = (0..1000).map(|i| i % 4).collect();
    let logits: Vec<Vec<f64>> = labels
        .iter()
        .map(|_| (0..4).map(|_| rng.random::<f64>()).collect())
        .collect();
    let e = accuracy(&logits, &labels, 4).unwrap();
    assert!((0.2..=0.3).contains(&e.overall), "{}", e.overall);

    for y in 0..2 {
        let e = accuracy(&[vec![0.3, 0.7]], &[y], 2).unwrap();
        assert_eq!(e.overall, f64::from(u8::from(y == 1)));
    }
    assert!(accuracy(&[], &[], 2).is_err());
    assert!(accuracy(&[vec![1.0]], &[3], 2).is_err());
    assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
}

#[test]
fn train_config_validation() {
    for c in [
        TrainConfig::pretrain_full(),
        TrainConfig::classify_full(),
        TrainConfig::pretrain_desk(),
        TrainConfig::classify_desk(),
    ] {
        c.validate().unwrap();
    }
    let bad = TrainConfig {
        epochs: 0,
        lr: -1.0,
        ..TrainConfig::pretrain_desk()
    };
    assert_eq!(bad.validate().unwrap_err().len(), 4);
    assert_eq!(TrainConfig::pretrain_full().lr, 1e-3);
    assert_eq!(TrainConfig::pretrain_full().batch_size, 128);
    assert_eq!(TrainConfig::classify_full().lr, 5e-4);
    assert_eq!(TrainConfig::pretrain_full().warmup_epochs, 10);
    assert_eq!(TrainConfig::pretrain_full().weight_decay, 0.05);
}

#[test]
fn pretrain_smoke_and_determinism() {
    let cfg = tiny(4);
    let (train, _) = tiny_data(2, 1);
    assert_eq!(train.len(), 8);
    let t = TrainConfig {
        epochs: 2,
        batch_size: 4,
        warmup_epochs: 1,
        ..TrainConfig::pretrain_desk()
    };
    let a = pretrain(&cfg, &t, &train, None).unwrap();
    let b = pretrain(&cfg, &t, &train, None).unwrap();
    let losses = a.series("train", "chamfer");
    assert_eq!(losses.len(), 2);
    assert!(losses.iter().all(|l| l.is_finite() && *l > 0.0));
    assert_eq!(a.history, b.history);
    assert_eq!(a.params, b.params);
    assert_eq!(a.optimizer.step, 4);
    let c = pretrain(
        &cfg,
        &TrainConfig {
            seed: 1,
            ..t.clone()
        },
        &train,
        None,
    )
    .unwrap();
    assert_ne!(a.history, c.history);

    let empty = Dataset::new(vec![], vec!["a".into()], Split::Train).unwrap();
    assert!(pretrain(&cfg, &t, &empty, None).is_err());
}

#[test]
fn transfer_drops_decoder_and_reports_fresh_tensors() {
    let cfg = tiny(4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pre = init_model(&cfg, Stage::Pretrain, &mut rng).unwrap();
    let mut cls = init_model(&cfg, Stage::Classify, &mut rng).unwrap();
    let rep = transfer_weights(&pre, &mut cls, true).unwrap();
    assert!(!rep.dropped.is_empty() && rep.dropped.iter().all(|n| n.starts_with("decoder.")));
    assert!(!rep.fresh.is_empty() && rep.fresh.iter().all(|n| n.starts_with("head.")));
    let b = parameter_breakdown(&cfg, Stage::Pretrain);
    assert_eq!(
        rep.dropped
            .iter()
            .map(|n| pre.get(n).unwrap().len())
            .sum::<usize>(),
        b.decoder
    );
    for n in &rep.copied {
        assert_eq!(cls.get(n).unwrap(), pre.get(n).unwrap());
    }

    let mut other = pre.clone();
    other.set("head.fc1.weight", Tensor::zeros([3, 3]));
    assert!(transfer_weights(&other, &mut cls, false).is_err());
    let mut extra = pre.clone();
    extra.set("mystery", Tensor::zeros([1]));
    assert!(transfer_weights(&extra, &mut cls, true).is_err());
    assert!(transfer_weights(&extra, &mut cls, false)
        .unwrap()
        .dropped
        .contains(&"mystery".to_string()));
}

#[test]
fn finetune_determinism_and_evaluation() {
    let cfg = tiny(4);
    let (train, test) = tiny_data(2, 2);
    let t = TrainConfig {
        epochs: 2,
        batch_size: 4,
        warmup_epochs: 1,
        ..TrainConfig::classify_desk()
    };
    let a = finetune(&cfg, &t, None, &train, &test, None).unwrap();
    let b = finetune(&cfg, &t, None, &train, &test, None).unwrap();
    assert_eq!(a.run.history, b.run.history);
    assert!(a.transfer.is_none());
    let acc = a.run.series("test", "accuracy");
    assert_eq!(acc.len(), 2);
    let e1 = evaluate(&cfg, &a.run.params, &test).unwrap();
    let e2 = evaluate(&cfg, &a.run.params, &test).unwrap();
    assert_eq!(e1, e2);
    assert_eq!(e1.overall, acc[1]);
    assert_eq!(e1.per_class.len(), 4);

    let wrong = tiny(3);
    assert!(finetune(&wrong, &t, None, &train, &test, None).is_err());

    let one = Dataset::new(
        vec![Sample {
            cloud: test.samples[0].cloud.clone(),
            label: 0,
        }],
        test.class_names.clone(),
        Split::Test,
    )
    .unwrap();
    let e = evaluate(&cfg, &a.run.params, &one).unwrap();
    assert!(e.overall == 0.0 || e.overall == 1.0);
}

#[test]
fn linear_probe_beats_chance() {
    let cfg = tiny(4);
    let (train, test) = tiny_data(16, 8);
    let t = TrainConfig {
        epochs: 20,
        batch_size: 8,
        warmup_epochs: 1,
        lr: 1e-2,
        freeze_encoder: true,
        ..TrainConfig::classify_desk()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let frozen = init_model(&cfg, Stage::Classify, &mut rng).unwrap();
    let out = finetune(&cfg, &t, Some(&frozen), &train, &test, None).unwrap();
    for (name, tensor) in out.run.params.iter() {
        if !name.starts_with("head.") {
            assert_eq!(tensor, frozen.get(name).unwrap(), "{name} moved");
        }
    }
    let acc = evaluate(&cfg, &out.run.params, &test).unwrap().overall;
    assert!(acc > 0.25 + 0.15, "probe accuracy {acc}");
}

#[test]
fn metric_rows_and_checkpoint_struct() {
    let rows = vec![
        MetricRow::new(1, "train", "loss", 2.0),
        MetricRow::new(1, "test", "accuracy", 0.5),
        MetricRow::new(2, "train", "loss", 1.0),
    ];
    assert_eq!(series(&rows, "train", "loss"), vec![2.0, 1.0]);
    let cfg = tiny(4);
    let p = init_model(&cfg, Stage::Classify, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let ck = ModelCheckpoint::new(Stage::Classify, cfg, p);
    assert_eq!(ck.version, CHECKPOINT_VERSION);
    assert!(ck.optimizer.is_none());
}
