// Scratch probe: delayed-label training diagnostics. Not part of the
// deliverable surface.
use srwm_core::episodes::{EpisodeSpec, Protocol, SyntheticTaskConfig};
use srwm_core::fwp::{InputActivation, LayerKind, LrMode};
use srwm_core::model::{BlockConfig, ModelConfig, NormPlacement};
use srwm_core::numerics::{Real, Rng};
use srwm_core::training::{
    evaluate, EpisodeSource, EvalOptions, TrainConfig, Trainer, STREAM_POOL_BASE,
};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(3000);
    let lr: Real = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let clip: Real = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let inst: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(5);
    let span: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(25);
    let seed: u64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1);
    let warmup: u64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0);
    let blocks: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(2);
    let noise: Real = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let post_norm: bool = args.get(9).map(|s| s == "post").unwrap_or(false);
    let soft_in: bool = args.get(10).map(|s| s == "softmax").unwrap_or(false);
    let multitask: bool = args.get(11).map(|s| s == "multi").unwrap_or(false);

    let model_cfg = ModelConfig {
        feature_dim: 16,
        num_classes: 5,
        blocks: vec![
            BlockConfig {
                layer_kind: LayerKind::Srwm,
                d_model: 32,
                num_heads: 4,
                d_ff: 64,
                dropout_p: 0.0,
                norm_placement: if post_norm { NormPlacement::Post } else { NormPlacement::Pre },
                lr_mode: LrMode::PerSubmatrix4,
                input_activation: if soft_in {
                    InputActivation::Softmax
                } else {
                    InputActivation::Identity
                },
            };
            blocks
        ],
    };
    let pool = srwm_core::episodes::gen_synthetic_classes(
        &SyntheticTaskConfig {
            num_classes: 20,
            feature_dim: 16,
            noise_std: noise,
            prototype_scale: 1.0,
            task_id: 0,
        },
        &mut Rng::new(seed, STREAM_POOL_BASE),
    )
    .unwrap();
    let pool_b = srwm_core::episodes::gen_synthetic_classes(
        &SyntheticTaskConfig {
            num_classes: 20,
            feature_dim: 16,
            noise_std: 0.05,
            prototype_scale: 1.5,
            task_id: 1,
        },
        &mut Rng::new(seed, STREAM_POOL_BASE + 1),
    )
    .unwrap();
    let spec = EpisodeSpec {
        n_ways: 5,
        k_shots: 1,
        protocol: Protocol::Delayed,
        max_instances_per_class: inst,
    };
    let source = if multitask {
        EpisodeSource::MultiTask {
            cfg: srwm_core::episodes::MultiTaskStreamConfig {
                segments: vec![
                    srwm_core::episodes::SegmentSpec { pool_index: 0, max_instances_per_class: inst },
                    srwm_core::episodes::SegmentSpec { pool_index: 1, max_instances_per_class: inst },
                ],
                trim_lo: 1,
                trim_hi: 5 * inst - 1,
                alternate_per_batch: true,
            },
            pools: vec![pool.clone(), pool_b.clone()],
            spec,
        }
    } else {
        EpisodeSource::SingleTask { pool: pool.clone(), spec }
    };
    let train_cfg = TrainConfig {
        learning_rate: lr,
        warmup_steps: warmup,
        batch_size: 32,
        bptt_span: span,
        total_steps: steps,
        grad_clip_norm: clip,
        seed,
        eval_every: 0,
        eval_episodes: 40,
        threads: 1,
    };
    let mut trainer = Trainer::new(model_cfg, train_cfg, source).unwrap();
    let mut gsum = 0.0;
    for s in 1..=steps {
        let m = trainer.train_step().unwrap();
        gsum += m.grad_norm;
        if s % 400 == 0 {
            let eval = trainer
                .evaluate(EvalOptions { n_episodes: 40, reset_every: None, per_position: false })
                .unwrap();
            let sig: Vec<String> = m
                .mean_sigma_beta
                .iter()
                .map(|v| v.map_or("na".into(), |x| format!("{x:.4}")))
                .collect();
            println!(
                "step {s:5}: loss {:.4} acc {:.4} | eval acc {:.4} inst2 {:?} | gnorm~{:.3} | sig {}",
                m.loss,
                m.accuracy,
                eval.total_accuracy,
                eval.instance_acc(2).map(|a| (a * 1000.0).round() / 1000.0),
                gsum / 400.0,
                sig.join(",")
            );
            gsum = 0.0;
        }
    }
    // Final: long-stream eval, 15 instances per class, first pool.
    let long_source = EpisodeSource::SingleTask {
        pool: pool.clone(),
        spec: EpisodeSpec {
            n_ways: 5,
            k_shots: 1,
            protocol: Protocol::Delayed,
            max_instances_per_class: 15,
        },
    };
    let m = evaluate(
        &trainer.model_cfg,
        &trainer.params,
        &long_source,
        EvalOptions { n_episodes: 100, reset_every: None, per_position: false },
        &mut Rng::new(seed, 999_999),
    )
    .unwrap();
    println!("long-stream total {:.4}", m.total_accuracy);
    for (k, a, n) in &m.instance_accuracy {
        print!(" k{k}:{a:.3}({n})");
    }
    println!();

    // Reset ablation on the same long streams.
    let r = evaluate(
        &trainer.model_cfg,
        &trainer.params,
        &long_source,
        EvalOptions { n_episodes: 100, reset_every: Some(span), per_position: false },
        &mut Rng::new(seed, 999_999),
    )
    .unwrap();
    println!("reset-every-{span} total {:.4} (carry {:.4})", r.total_accuracy, m.total_accuracy);

    // Switch-stream eval: fixed order, no trimming, switch at 75.
    let switch_source = EpisodeSource::MultiTask {
        cfg: srwm_core::episodes::MultiTaskStreamConfig {
            segments: vec![
                srwm_core::episodes::SegmentSpec { pool_index: 0, max_instances_per_class: 15 },
                srwm_core::episodes::SegmentSpec { pool_index: 1, max_instances_per_class: 15 },
            ],
            trim_lo: 0,
            trim_hi: 0,
            alternate_per_batch: false,
        },
        pools: vec![pool, pool_b],
        spec: EpisodeSpec {
            n_ways: 5,
            k_shots: 1,
            protocol: Protocol::Delayed,
            max_instances_per_class: 15,
        },
    };
    let sw = evaluate(
        &trainer.model_cfg,
        &trainer.params,
        &switch_source,
        EvalOptions { n_episodes: 150, reset_every: None, per_position: true },
        &mut Rng::new(seed, 888_888),
    )
    .unwrap();
    let curve: Vec<Real> = sw.per_position.unwrap().iter().map(|(a, _)| *a).collect();
    let plateau: Real = curve[55..75].iter().sum::<Real>() / 20.0;
    let recovered = curve[76..=100].iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    println!(
        "switch: plateau {plateau:.3} at75 {:.3} best-recovery {recovered:.3} | curve55..110 {:?}",
        curve[75],
        curve[55..110].iter().map(|a| (a * 100.0).round() / 100.0).collect::<Vec<_>>()
    );
}
