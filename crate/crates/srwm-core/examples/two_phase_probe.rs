// Scratch probe: synchronous pretraining followed by delayed-label
// finetuning. Not part of the deliverable surface.
use srwm_core::episodes::{EpisodeSpec, Protocol, SyntheticTaskConfig};
use srwm_core::fwp::{InputActivation, LayerKind, LrMode};
use srwm_core::model::{BlockConfig, ModelConfig, NormPlacement};
use srwm_core::numerics::{Real, Rng};
use srwm_core::training::{
    evaluate, EpisodeSource, EvalOptions, TrainConfig, Trainer, STREAM_POOL_BASE,
};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let sync_steps: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(3000);
    let delayed_steps: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10_000);
    let inst: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);
    let lr2: Real = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-3);

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
    let pool = srwm_core::episodes::gen_synthetic_classes(
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

    let sync_source = EpisodeSource::SingleTask {
        pool: pool.clone(),
        spec: EpisodeSpec {
            n_ways: 5,
            k_shots: 1,
            protocol: Protocol::Synchronous,
            max_instances_per_class: 0,
        },
    };
    let delayed_source = EpisodeSource::SingleTask {
        pool: pool.clone(),
        spec: EpisodeSpec {
            n_ways: 5,
            k_shots: 1,
            protocol: Protocol::Delayed,
            max_instances_per_class: inst,
        },
    };

    // Phase 1: synchronous pretraining.
    let mut t1 = Trainer::new(
        model_cfg.clone(),
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            bptt_span: 6,
            total_steps: sync_steps,
            grad_clip_norm: 1.0,
            seed,
            eval_every: 0,
            eval_episodes: 100,
            threads: 1,
            ..Default::default()
        },
        sync_source,
    )
    .unwrap();
    while t1.step < sync_steps {
        t1.train_step().unwrap();
        if t1.step % 500 == 0 {
            let e = t1
                .evaluate(EvalOptions { n_episodes: 100, reset_every: None, per_position: false })
                .unwrap();
            println!("sync step {:5}: eval acc {:.4}", t1.step, e.total_accuracy);
        }
    }

    // Phase 2: delayed finetuning from the pretrained parameters.
    let mut t2 = Trainer::new(
        model_cfg.clone(),
        TrainConfig {
            learning_rate: lr2,
            batch_size: 32,
            bptt_span: 5 * inst,
            total_steps: delayed_steps,
            grad_clip_norm: 1.0,
            seed: seed + 1,
            eval_every: 0,
            eval_episodes: 40,
            threads: 1,
            ..Default::default()
        },
        delayed_source,
    )
    .unwrap();
    t2.params = t1.params.clone();
    let mut best = 0.0;
    while t2.step < delayed_steps {
        t2.train_step().unwrap();
        if t2.step % 400 == 0 {
            let e = t2
                .evaluate(EvalOptions { n_episodes: 40, reset_every: None, per_position: false })
                .unwrap();
            let i2 = e.instance_acc(2).unwrap_or(0.0);
            if e.total_accuracy > best {
                best = e.total_accuracy;
            }
            println!(
                "delayed step {:5}: eval acc {:.4} inst1 {:.3} inst2 {:.3}",
                t2.step,
                e.total_accuracy,
                e.instance_acc(1).unwrap_or(0.0),
                i2
            );
        }
    }

    // Long-stream check: 15 instances per class.
    let long_source = EpisodeSource::SingleTask {
        pool,
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
}
