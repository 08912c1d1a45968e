//! Command implementations behind the CLI dispatch.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use srwm_core::error::{Error, Result};
use srwm_core::fwp::{LayerKind, LrMode};
use srwm_core::model::{model_forward, sigma_beta_samples, ModelState, TrainCtx};
use srwm_core::numerics::{Real, Rng};
use srwm_core::oracle::{gradcheck_layer, GradCheckSizes};
use srwm_core::training::{
    evaluate, load_checkpoint, metrics_csv_header, metrics_csv_row, save_checkpoint, EvalOptions,
    Trainer, STREAM_EVAL_BASE,
};

use crate::config::RunConfig;

pub fn cmd_train(cfg: &RunConfig, out_dir: &Path, resume: Option<&Path>) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let resolved = cfg.resolved_text();
    std::fs::write(out_dir.join("resolved.cfg"), &resolved)?;
    let hash = cfg.config_hash();

    let mut trainer = match resume {
        Some(path) => load_checkpoint(
            path,
            hash,
            cfg.model_config(),
            cfg.train.clone(),
            cfg.episode_source()?,
        )?,
        None => Trainer::new(cfg.model_config(), cfg.train.clone(), cfg.episode_source()?)?,
    };

    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = if resume.is_some() && metrics_path.exists() {
        std::fs::OpenOptions::new().append(true).open(&metrics_path)?
    } else {
        let mut f = File::create(&metrics_path)?;
        f.write_all(metrics_csv_header(cfg.blocks).as_bytes())?;
        f
    };

    let eval_opts = EvalOptions {
        n_episodes: cfg.train.eval_episodes,
        reset_every: None,
        per_position: false,
    };
    while trainer.step < cfg.train.total_steps {
        let step_metrics = trainer.train_step()?;
        let step = trainer.step;
        let due_eval = cfg.train.eval_every > 0
            && (step % cfg.train.eval_every == 0 || step == cfg.train.total_steps);
        if due_eval {
            let eval = trainer.evaluate(eval_opts)?;
            metrics.write_all(metrics_csv_row(step, &step_metrics, &eval).as_bytes())?;
            println!(
                "step {step}: train_loss {:.4} eval_loss {:.4} eval_acc {:.4}",
                step_metrics.loss, eval.loss, eval.total_accuracy
            );
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            save_checkpoint(&out_dir.join(format!("step_{step}.ckpt")), &trainer, hash)?;
        }
    }
    metrics.flush()?;
    save_checkpoint(&out_dir.join("final.ckpt"), &trainer, hash)?;
    println!("trained {} steps; outputs in {}", trainer.step, out_dir.display());
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let trainer = load_checkpoint(
        checkpoint,
        cfg.config_hash(),
        cfg.model_config(),
        cfg.train.clone(),
        cfg.episode_source()?,
    )?;
    let mut rng = Rng::new(cfg.train.seed, STREAM_EVAL_BASE + trainer.step);
    let metrics = evaluate(
        &trainer.model_cfg,
        &trainer.params,
        &trainer.source,
        EvalOptions {
            n_episodes: cfg.train.eval_episodes,
            reset_every: None,
            per_position: true,
        },
        &mut rng,
    )?;

    let mut table = String::new();
    table.push_str(&format!(
        "checkpoint step {} | {} episodes | {} scored tokens\n",
        trainer.step, cfg.train.eval_episodes, metrics.masked_tokens
    ));
    table.push_str(&metrics.instance_table());
    for (task, acc, n) in &metrics.task_accuracy {
        table.push_str(&format!("task {task}: accuracy {acc:.4} over {n} tokens\n"));
    }
    print!("{table}");
    std::fs::write(out_dir.join("eval.txt"), &table)?;

    if cfg.multitask {
        let mut csv = String::from("position,accuracy,count\n");
        if let Some(per_position) = &metrics.per_position {
            for (pos, (acc, n)) in per_position.iter().enumerate() {
                csv.push_str(&format!("{pos},{acc},{n}\n"));
            }
        }
        std::fs::write(out_dir.join("per_position.csv"), &csv)?;
        println!("per-position curve written to {}", out_dir.join("per_position.csv").display());
    }
    Ok(())
}

/// Runs the finite-difference oracle against every requested layer kind at
/// the desk-scale sizes (T = 8, d_model = 8, H in {1, 2}). Returns whether
/// every coordinate passed at the tolerance.
pub fn cmd_gradcheck(kind_filter: Option<&str>, seed: u64, tolerance: Real) -> Result<bool> {
    let combos: Vec<(LayerKind, LrMode, &str)> = vec![
        (LayerKind::Srwm, LrMode::Single, "srwm (single lr)"),
        (LayerKind::Srwm, LrMode::PerSubmatrix4, "srwm (per-submatrix lr)"),
        (LayerKind::DeltaNet, LrMode::Single, "delta_net"),
        (LayerKind::SrDelta, LrMode::PerSubmatrix4, "sr_delta"),
        (LayerKind::FakeSr, LrMode::Single, "fake_sr"),
    ];
    let mut all_pass = true;
    let mut matched = false;
    for (kind, lr_mode, label) in combos {
        if let Some(filter) = kind_filter {
            if filter != "all" && filter != kind.name() {
                continue;
            }
        }
        matched = true;
        for heads in [1usize, 2] {
            let sizes = GradCheckSizes { d_model: 8, heads, seq_len: 8 };
            let report = gradcheck_layer(kind, lr_mode, sizes, seed, tolerance)?;
            println!("── {label}, {heads} head(s) ──");
            print!("{}", report.render());
            all_pass &= report.passed();
        }
    }
    if !matched {
        return Err(Error::Config(format!(
            "unknown gradcheck kind `{}` (expected srwm, delta_net, fake_sr, sr_delta or all)",
            kind_filter.unwrap_or("")
        )));
    }
    Ok(all_pass)
}

pub fn cmd_gen_episodes(cfg: &RunConfig, out_dir: &Path, n_episodes: usize) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let source = cfg.episode_source()?;
    let mut rng = Rng::new(cfg.train.seed, srwm_core::training::STREAM_DATA_BASE);
    let mut out = String::new();
    for i in 0..n_episodes {
        let episode = source.sample(&mut rng, i as u64)?;
        out.push_str(&srwm_core::episodes::dump_episode(&episode));
    }
    let path = out_dir.join("episodes.txt");
    std::fs::write(&path, &out)?;
    println!("{n_episodes} episodes written to {}", path.display());
    Ok(())
}

pub fn cmd_inspect(cfg: &RunConfig, checkpoint: &Path, n_episodes: usize) -> Result<()> {
    let self_referential = matches!(cfg.layer_kind, LayerKind::Srwm | LayerKind::SrDelta);
    if !self_referential {
        return Err(Error::Config(format!(
            "model has no self-referential weight layers to inspect (layer_kind = {})",
            cfg.layer_kind.name()
        )));
    }
    let trainer = load_checkpoint(
        checkpoint,
        cfg.config_hash(),
        cfg.model_config(),
        cfg.train.clone(),
        cfg.episode_source()?,
    )?;

    // Dropout-free traced forward over evaluation episodes.
    let mut model_cfg = trainer.model_cfg.clone();
    for b in &mut model_cfg.blocks {
        b.dropout_p = 0.0;
    }
    let mut rng = Rng::new(cfg.train.seed, STREAM_EVAL_BASE + trainer.step);
    let mut per_block: Vec<Option<Vec<Vec<Real>>>> = Vec::new();
    for i in 0..n_episodes {
        let episode = trainer.source.sample(&mut rng, i as u64)?;
        let tokens: Vec<Vec<Real>> = episode
            .tokens
            .iter()
            .map(|t| srwm_core::model::encode_token(&t.feature, t.label_in, cfg.n_ways))
            .collect::<Result<_>>()?;
        let mut dummy = Rng::new(0, 0);
        let out = model_forward(
            &model_cfg,
            &trainer.params,
            Some(ModelState::fresh(&model_cfg, &trainer.params)),
            &tokens,
            Some(TrainCtx { dropout_rng: &mut dummy }),
        )?;
        let samples = sigma_beta_samples(out.trace.as_ref().expect("traced forward"));
        if per_block.is_empty() {
            per_block = samples;
        } else {
            for (acc, add) in per_block.iter_mut().zip(samples) {
                if let (Some(acc), Some(add)) = (acc.as_mut(), add) {
                    for (a, b) in acc.iter_mut().zip(add) {
                        a.extend(b);
                    }
                }
            }
        }
    }

    println!("sigma(beta) statistics over {n_episodes} episodes");
    for (layer, comps) in per_block.iter().enumerate() {
        let Some(comps) = comps else {
            println!("layer {layer}: no beta signal");
            continue;
        };
        for (c, values) in comps.iter().enumerate() {
            if values.is_empty() {
                continue;
            }
            let min = values.iter().cloned().fold(Real::INFINITY, Real::min);
            let max = values.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let mean = values.iter().sum::<Real>() / values.len() as Real;
            println!(
                "layer {layer} component {c}: min {min:.6} mean {mean:.6} max {max:.6} ({} samples)",
                values.len()
            );
            let mut bins = [0usize; 20];
            for v in values {
                let b = ((v * 20.0) as usize).min(19);
                bins[b] += 1;
            }
            let peak = bins.iter().copied().max().unwrap_or(1).max(1);
            for (b, count) in bins.iter().enumerate() {
                if *count == 0 {
                    continue;
                }
                let bar = "#".repeat(1 + count * 40 / peak);
                println!("  [{:4.2},{:4.2}) {count:>7} {bar}", b as Real / 20.0, (b + 1) as Real / 20.0);
            }
        }
    }
    Ok(())
}
