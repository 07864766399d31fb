mod common;

use common::{all_variants, finite_difference_check, lively_params, naive_loss, tiny_batch, tiny_config};
use fedbreach::model::{forward_loss, gradient, Activation, Task};
use fedbreach::numkernel::Rng;

#[test]
fn loss_matches_straight_line_oracle() {
    for (act, task, tied) in all_variants() {
        let cfg = tiny_config(act, task, tied);
        let p = lively_params(&cfg, 3);
        let batch = tiny_batch(&cfg, &mut Rng::new(4), 2, 8);
        let ours = forward_loss(&p, &batch).unwrap();
        let oracle = naive_loss(&p, &batch);
        assert!(
            (ours - oracle).abs() < 1e-10,
            "{act:?} {task:?} tied={tied}: {ours} vs {oracle}"
        );
    }
}

#[test]
fn gradients_match_finite_differences() {
    for (i, (act, task, tied)) in all_variants().into_iter().enumerate() {
        let cfg = tiny_config(act, task, tied);
        let p = lively_params(&cfg, 10 + i as u64);
        let batch = tiny_batch(&cfg, &mut Rng::new(20 + i as u64), 2, 5);
        let (err, name) = finite_difference_check(&p, &batch, 1e-5, None);
        assert!(err <= 1e-4, "{act:?} {task:?} tied={tied}: {name} rel err {err:e}");
    }
}

#[test]
fn dropout_gradient_matches_realised_loss() {
    let mut cfg = tiny_config(Activation::Gelu, Task::Causal, false);
    cfg.dropout_rate = 0.2;
    let p = lively_params(&cfg, 5);
    let batch = tiny_batch(&cfg, &mut Rng::new(6), 2, 5);
    let (err, name) = finite_difference_check(&p, &batch, 1e-5, Some(99));
    assert!(err <= 1e-4, "{name} rel err {err:e}");
}

#[test]
fn single_precision_gradient_tracks_double() {
    let cfg = tiny_config(Activation::Relu, Task::Causal, false);
    let p = lively_params(&cfg, 8);
    let batch = tiny_batch(&cfg, &mut Rng::new(9), 2, 6);
    let g64 = gradient(&p, &batch, None).unwrap().grads.to_flat();
    let g32 = gradient(&p.cast::<f32>(), &batch, None).unwrap().grads.to_flat();
    let num: f64 = g64.iter().zip(&g32).map(|(a, &b)| (a - b as f64).powi(2)).sum();
    let den: f64 = g64.iter().map(|a| a * a).sum();
    assert!((num / den).sqrt() < 1e-3);
}
