// Scratch probe: short-episode delayed pretraining, then multitask
// fine-tuning on full-length trimmed streams; prints every criterion-5/6/7
// quantity. Not part of the deliverable surface.
use srwm_core::episodes::{
    EpisodeSpec, MultiTaskStreamConfig, Protocol, SegmentSpec, SyntheticTaskConfig,
};
use srwm_core::fwp::{InputActivation, LayerKind, LrMode};
use srwm_core::model::{BlockConfig, ModelConfig, NormPlacement};
use srwm_core::numerics::{Real, Rng};
use srwm_core::training::{
    evaluate, EpisodeSource, EvalOptions, TrainConfig, Trainer, STREAM_POOL_BASE,
};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let phase1_steps: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(24_000);
    let phase2_steps: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(8_000);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);

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
                norm_placement: NormPlacement::Pre,
                lr_mode: LrMode::PerSubmatrix4,
                input_activation: InputActivation::Identity,
            };
            2
        ],
    };
    let pool_a = srwm_core::episodes::gen_synthetic_classes(
        &SyntheticTaskConfig {
            num_classes: 20,
            feature_dim: 16,
            noise_std: 0.02,
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

    // Phase 1: single-task short episodes, dense binding signal.
    let phase1_source = EpisodeSource::SingleTask {
        pool: pool_a.clone(),
        spec: EpisodeSpec {
            n_ways: 5,
            k_shots: 1,
            protocol: Protocol::Delayed,
            max_instances_per_class: 3,
        },
    };
    let mut t1 = Trainer::new(
        model_cfg.clone(),
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            bptt_span: 15,
            total_steps: phase1_steps,
            grad_clip_norm: 1.0,
            seed,
            eval_every: 0,
            eval_episodes: 50,
            threads: 1,
            ..Default::default()
        },
        phase1_source,
    )
    .unwrap();
    while t1.step < phase1_steps {
        t1.train_step().unwrap();
        if t1.step % 1000 == 0 {
            let e = t1
                .evaluate(EvalOptions { n_episodes: 50, reset_every: None, per_position: false })
                .unwrap();
            let i2 = e.instance_acc(2).unwrap_or(0.0);
            println!(
                "phase1 step {:5}: eval acc {:.3} inst2 {:.3}",
                t1.step, e.total_accuracy, i2
            );
            if i2 >= 0.78 {
                break;
            }
        }
    }

    // Phase 2: the full multitask pipeline (15 instances per class,
    // trimming 1..60, per-batch order alternation).
    let phase2_source = EpisodeSource::MultiTask {
        cfg: MultiTaskStreamConfig {
            segments: vec![
                SegmentSpec { pool_index: 0, max_instances_per_class: 15 },
                SegmentSpec { pool_index: 1, max_instances_per_class: 15 },
            ],
            trim_lo: 1,
            trim_hi: 60,
            alternate_per_batch: true,
        },
        pools: vec![pool_a.clone(), pool_b.clone()],
        spec: EpisodeSpec {
            n_ways: 5,
            k_shots: 1,
            protocol: Protocol::Delayed,
            max_instances_per_class: 15,
        },
    };
    let mut t2 = Trainer::new(
        model_cfg.clone(),
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            bptt_span: 25,
            total_steps: phase2_steps,
            grad_clip_norm: 1.0,
            seed: seed + 1,
            eval_every: 0,
            eval_episodes: 50,
            threads: 1,
            ..Default::default()
        },
        phase2_source,
    )
    .unwrap();
    t2.params = t1.params.clone();
    while t2.step < phase2_steps {
        t2.train_step().unwrap();
        if t2.step % 1000 == 0 {
            let e = t2
                .evaluate(EvalOptions { n_episodes: 40, reset_every: None, per_position: false })
                .unwrap();
            println!(
                "phase2 step {:5}: eval acc {:.3} inst2 {:.3}",
                t2.step,
                e.total_accuracy,
                e.instance_acc(2).unwrap_or(0.0)
            );
        }
    }

    // Criterion-5 view: single-task 15-instance streams from pool A.
    let single_source = EpisodeSource::SingleTask {
        pool: pool_a.clone(),
        spec: EpisodeSpec {
            n_ways: 5,
            k_shots: 1,
            protocol: Protocol::Delayed,
            max_instances_per_class: 15,
        },
    };
    let m = evaluate(
        &t2.model_cfg,
        &t2.params,
        &single_source,
        EvalOptions { n_episodes: 300, reset_every: None, per_position: false },
        &mut Rng::new(seed, 999_999),
    )
    .unwrap();
    println!("single-task 15-inst total {:.4}", m.total_accuracy);
    for (k, a, n) in &m.instance_accuracy {
        print!(" k{k}:{a:.3}({n})");
    }
    println!();

    // Criterion-7 view: forced resets every span tokens.
    let r = evaluate(
        &t2.model_cfg,
        &t2.params,
        &single_source,
        EvalOptions { n_episodes: 300, reset_every: Some(25), per_position: false },
        &mut Rng::new(seed, 999_999),
    )
    .unwrap();
    println!("reset-every-25 total {:.4} (drop {:.4})", r.total_accuracy, m.total_accuracy - r.total_accuracy);

    // Criterion-6 view: fixed-order untrimmed switch streams.
    let switch_source = EpisodeSource::MultiTask {
        cfg: MultiTaskStreamConfig {
            segments: vec![
                SegmentSpec { pool_index: 0, max_instances_per_class: 15 },
                SegmentSpec { pool_index: 1, max_instances_per_class: 15 },
            ],
            trim_lo: 0,
            trim_hi: 0,
            alternate_per_batch: false,
        },
        pools: vec![pool_a, pool_b],
        spec: EpisodeSpec {
            n_ways: 5,
            k_shots: 1,
            protocol: Protocol::Delayed,
            max_instances_per_class: 15,
        },
    };
    let sw = evaluate(
        &t2.model_cfg,
        &t2.params,
        &switch_source,
        EvalOptions { n_episodes: 200, reset_every: None, per_position: true },
        &mut Rng::new(seed, 888_888),
    )
    .unwrap();
    let curve: Vec<Real> = sw.per_position.unwrap().iter().map(|(a, _)| *a).collect();
    let plateau: Real = curve[55..75].iter().sum::<Real>() / 20.0;
    let recovered = curve[76..=100].iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    println!(
        "switch: plateau {plateau:.3} at75 {:.3} best-recovery {recovered:.3}",
        curve[75]
    );
    println!(
        "curve[70..105]: {:?}",
        curve[70..105].iter().map(|a| (a * 100.0).round() / 100.0).collect::<Vec<_>>()
    );
}
