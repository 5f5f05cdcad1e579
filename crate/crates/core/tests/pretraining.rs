mod common;

use common::unit;
use gfpc::autodiff::Graph;
use gfpc::contrast::{info_nce, init_pair, pretrain, pretrain_step, ContrastConfig, KeyQueue};
use gfpc::data::synth::{render_scene, SyntheticSceneParams};
use gfpc::encoder::EncoderConfig;
use gfpc::gradfield::{gradient_field, ColorImage};
use gfpc::optim::{OptimizerConfig, OptimizerState};

fn config() -> ContrastConfig {
    ContrastConfig {
        encoder: EncoderConfig::new(vec![4, 8], 1, 8, 4).unwrap(),
        batch_size: 3,
        queue_size: 8,
        tau: 0.2,
        momentum: 0.9,
        max_steps: Some(4),
        ..Default::default()
    }
}

fn images(n: usize) -> Vec<ColorImage> {
    let p = SyntheticSceneParams { height: 16, width: 16, seed: 8, ..Default::default() };
    (0..n).map(|i| render_scene(&p, i).rgb).collect()
}

#[test]
fn step_follows_the_update_rules() {
    let cfg = config();
    let mut pair = init_pair::<f64>(&cfg.encoder, 1).unwrap();
    let mut queue = KeyQueue::new(cfg.queue_size, cfg.encoder.head_dim).unwrap();
    let mut r = common::rng(4);
    for _ in 0..5 {
        queue.push(&unit(&mut r, cfg.encoder.head_dim)).unwrap();
    }
    let mut opt = OptimizerState::new(OptimizerConfig::sgd_default()).unwrap();
    let batch = images(3);

    let before = pair.clone();
    let queue_before = queue.clone();
    let report = pretrain_step(&mut pair, &mut queue, &mut opt, &batch, &cfg).unwrap();

    // keys come from the key encoder before its update, one per image
    let expected_keys: Vec<Vec<f64>> = batch
        .iter()
        .map(|img| {
            let field = gradient_field(img, &cfg.canny).unwrap().to_tensor::<f64>(3);
            before.key.embed(&field).unwrap().into_data()
        })
        .collect();
    assert_eq!(report.keys, expected_keys);

    // mean InfoNCE against the queue as it stood before the step
    let mut mean = 0.0;
    for (img, k) in batch.iter().zip(&expected_keys) {
        let mut g = Graph::new();
        let x = g.constant(img.to_tensor::<f64>());
        let h = before.query.embed(g.value(x)).unwrap();
        let h = g.constant(h);
        let loss = info_nce(&mut g, h, k, &queue_before, cfg.tau).unwrap();
        mean += g.value(loss).item() / batch.len() as f64;
    }
    assert!((report.loss - mean).abs() < 1e-12, "{} vs {mean}", report.loss);

    // only query-side parameters get gradients; the key side moves by EMA
    assert!(report.grads.keys().all(|k| before.query.params().contains_key(k)));
    assert!(report.grads.keys().any(|k| k.starts_with("head.")));
    for (name, k1) in pair.key.params() {
        for ((a, k0), q1) in
            k1.data().iter().zip(before.key.params()[name].data()).zip(pair.query.params()[name].data())
        {
            assert!((a - (0.9 * k0 + 0.1 * q1)).abs() < 1e-12);
        }
    }

    // queue: five old keys plus three new ones, oldest first
    assert_eq!(queue.len(), 8);
    let held: Vec<Vec<f64>> = queue.iter().map(<[f64]>::to_vec).collect();
    assert_eq!(held[5..], expected_keys[..]);
    assert_eq!(held[..5], queue_before.iter().map(<[f64]>::to_vec).collect::<Vec<_>>()[..]);
}

#[test]
fn pretraining_is_reproducible_and_logged() {
    let cfg = config();
    let imgs = images(7);
    let mut log_a = Vec::new();
    let mut log_b = Vec::new();
    let a = pretrain::<f32>(&imgs, &cfg, &mut log_a).unwrap();
    let b = pretrain::<f32>(&imgs, &cfg, &mut log_b).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.pair.query.params(), b.pair.query.params());
    assert_eq!(log_a, log_b);
    let text = String::from_utf8(log_a).unwrap();
    assert_eq!(text.lines().next(), Some("step,loss"));
    assert_eq!(text.lines().count(), 1 + 4);
    assert_eq!(a.losses.len(), 4);
}

#[test]
fn queue_smaller_than_batch_is_rejected() {
    let cfg = ContrastConfig { queue_size: 2, ..config() };
    assert!(matches!(pretrain::<f32>(&images(4), &cfg, &mut std::io::sink()), Err(gfpc::Error::Config(_))));
}
