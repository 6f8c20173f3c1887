use indexmap::IndexMap;
use proptest::prelude::*;
use robustlab::attack::{evaluate, pgd, AttackConfig};
use robustlab::data::{gen_train, NUM_CLASSES, PIXELS};
use robustlab::model::{build, LayerSpec, Network, NetworkMeta, Regime, INPUT_OFFSET};
use robustlab::tensor::Tensor;

/// Mean-pool then a 3→8 linear map: the input gradient has a closed form.
fn pooled_linear(w: Vec<f32>, b: Vec<f32>) -> Network {
    let mut params = IndexMap::new();
    params.insert("fc.weight".to_string(), Tensor::new(vec![NUM_CLASSES, 3], w).unwrap());
    params.insert("fc.bias".to_string(), Tensor::new(vec![NUM_CLASSES], b).unwrap());
    Network {
        arch: "pooled-linear".into(),
        layers: vec![
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear {
                name: "fc".into(),
                in_features: 3,
                out_features: NUM_CLASSES,
            },
        ],
        params,
        meta: NetworkMeta {
            regime: Regime::Standard,
            seed: 0,
            epochs: 0,
        },
    }
}

#[test]
fn one_step_matches_closed_form() {
    let w: Vec<f32> = (0..NUM_CLASSES * 3).map(|i| ((i * 7 % 11) as f32 - 5.0) * 0.3).collect();
    let b: Vec<f32> = (0..NUM_CLASSES).map(|k| k as f32 * 0.1).collect();
    let net = pooled_linear(w.clone(), b.clone());
    let x: Vec<f32> = (0..3 * PIXELS).map(|i| 0.4 + 0.2 * ((i * 31 % 97) as f32 / 97.0)).collect();
    let xt = Tensor::new(vec![1, 3, 32, 32], x.clone()).unwrap();
    let y = 3usize;
    let cfg = AttackConfig {
        epsilon: 10.0,
        alpha: 0.05,
        steps: 1,
    };
    let res = pgd(&net, &xt, &[y], &cfg).unwrap();

    // logits = W (mean_c(x) - offset) + b; dL/dx[c, p] = (softmax - onehot) . W[:, c] / PIXELS
    let feat: Vec<f64> = (0..3)
        .map(|c| x[c * PIXELS..(c + 1) * PIXELS].iter().map(|&v| v as f64).sum::<f64>() / PIXELS as f64 - INPUT_OFFSET as f64)
        .collect();
    let logits: Vec<f64> = (0..NUM_CLASSES)
        .map(|k| (0..3).map(|c| w[k * 3 + c] as f64 * feat[c]).sum::<f64>() + b[k] as f64)
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let dlogit: Vec<f64> = (0..NUM_CLASSES)
        .map(|k| (logits[k] - m).exp() / z - (k == y) as u8 as f64)
        .collect();
    let gc: Vec<f64> = (0..3)
        .map(|c| (0..NUM_CLASSES).map(|k| dlogit[k] * w[k * 3 + c] as f64).sum::<f64>() / PIXELS as f64)
        .collect();
    let gnorm = (gc.iter().map(|g| g * g).sum::<f64>() * PIXELS as f64).sqrt();
    for c in 0..3 {
        let want = cfg.alpha as f64 * gc[c] / gnorm;
        for p in 0..PIXELS {
            let i = c * PIXELS + p;
            let got = res.x_adv.data()[i] as f64 - x[i] as f64;
            assert!((got - want).abs() < 1e-5, "channel {c} pixel {p}: {got} vs {want}");
        }
    }
}

#[test]
fn zero_radius_accuracy_equals_clean_and_params_untouched() {
    let net = build("mini3", 5).unwrap();
    let before = net.clone();
    let shard = gen_train(2, 4).unwrap();
    let cfg = AttackConfig {
        epsilon: 0.0,
        alpha: 0.25,
        steps: 3,
    };
    let e = evaluate(&net, &shard, &cfg, 16).unwrap();
    assert_eq!(e.adv_accuracy, e.clean_accuracy);
    assert!(e.degenerate_exact);
    assert_eq!(net, before);
}

#[test]
fn projection_is_idempotent() {
    // Attacking an already-projected point with zero steps leaves it fixed,
    // and a second pass from x keeps the same budget.
    let net = build("mini3", 6).unwrap();
    let shard = gen_train(3, 1).unwrap();
    let idx: Vec<usize> = (0..8).collect();
    let x = shard.batch(&idx);
    let y = shard.labels_usize();
    let cfg = AttackConfig {
        epsilon: 0.3,
        alpha: 0.2,
        steps: 4,
    };
    let first = pgd(&net, &x, &y, &cfg).unwrap();
    let again = pgd(&net, &first.x_adv, &y, &AttackConfig { steps: 0, ..cfg }).unwrap();
    assert_eq!(again.x_adv, first.x_adv);
    assert!(first.delta_norm.iter().all(|&d| d <= 0.3 + 1e-5));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn budget_and_range_hold(seed in 0u64..1000, eps in 0.0f32..3.0, alpha in 0.01f32..1.0, steps in 0usize..4) {
        let net = build("mini3", seed).unwrap();
        let shard = gen_train(seed, 1).unwrap();
        let idx: Vec<usize> = (0..4).collect();
        let x = shard.batch(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| shard.label(i)).collect();
        let res = pgd(&net, &x, &y, &AttackConfig { epsilon: eps, alpha, steps }).unwrap();
        for &d in &res.delta_norm {
            prop_assert!(d as f64 <= eps as f64 + 1e-5);
        }
        prop_assert!(res.x_adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
