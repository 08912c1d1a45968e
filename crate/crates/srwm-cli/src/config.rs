//! Plain-text run configuration: `[section]` headers over `key = value`
//! lines. Unknown keys and unknown sections are hard errors — a silently
//! ignored typo in a hyperparameter name is the classic reproduction
//! killer. A resolved copy with every default filled in is written next to
//! the outputs, and its hash is stamped into checkpoints.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use srwm_core::episodes::{
    gen_synthetic_classes, load_feature_file, ClassPool, EpisodeSpec, MultiTaskStreamConfig,
    Protocol, SegmentSpec, SyntheticTaskConfig,
};
use srwm_core::error::{Error, Result};
use srwm_core::fwp::{InputActivation, LayerKind, LrMode};
use srwm_core::model::{BlockConfig, ModelConfig, NormPlacement};
use srwm_core::numerics::{Real, Rng};
use srwm_core::training::{fnv1a64, EpisodeSource, TrainConfig, STREAM_POOL_BASE};

#[derive(Debug, Clone)]
pub struct RunConfig {
    // [model]
    pub layer_kind: LayerKind,
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: Real,
    pub norm_placement: NormPlacement,
    pub lr_mode: LrMode,
    pub input_activation: InputActivation,
    // [data]
    pub protocol: Protocol,
    pub n_ways: usize,
    pub k_shots: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub noise_std: Real,
    pub prototype_scale: Real,
    pub max_instances_per_class: usize,
    pub multitask: bool,
    pub second_noise_std: Real,
    pub second_prototype_scale: Real,
    pub trim_lo: usize,
    pub trim_hi: usize,
    pub alternate_order: bool,
    pub feature_file: Option<PathBuf>,
    pub second_feature_file: Option<PathBuf>,
    // [train]
    pub train: TrainConfig,
    pub checkpoint_every: u64,
}

fn parse_usize(section: &str, key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| Error::Config(format!("[{section}] {key}: `{v}` is not an integer")))
}

fn parse_u64(section: &str, key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| Error::Config(format!("[{section}] {key}: `{v}` is not an integer")))
}

fn parse_real(section: &str, key: &str, v: &str) -> Result<Real> {
    if v == "inf" {
        return Ok(Real::INFINITY);
    }
    v.parse().map_err(|_| Error::Config(format!("[{section}] {key}: `{v}` is not a number")))
}

fn parse_bool(section: &str, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("[{section}] {key}: `{v}` is not true/false"))),
    }
}

impl RunConfig {
    /// Parses and validates a config file. Required keys: model.layer_kind,
    /// model.d_model and train.total_steps; everything else has a default.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                current = line[1..line.len() - 1].trim().to_string();
                if !matches!(current.as_str(), "model" | "data" | "train") {
                    return Err(Error::Config(format!(
                        "line {}: unknown section [{current}]",
                        lineno + 1
                    )));
                }
                sections.entry(current.clone()).or_default();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                )));
            };
            if current.is_empty() {
                return Err(Error::Config(format!(
                    "line {}: key `{}` appears before any [section]",
                    lineno + 1,
                    key.trim()
                )));
            }
            let prior = sections
                .get_mut(&current)
                .unwrap()
                .insert(key.trim().to_string(), value.trim().to_string());
            if prior.is_some() {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{}` in [{current}]",
                    lineno + 1,
                    key.trim()
                )));
            }
        }

        let mut model = sections.remove("model").unwrap_or_default();
        let mut data = sections.remove("data").unwrap_or_default();
        let mut train = sections.remove("train").unwrap_or_default();

        let take = |map: &mut BTreeMap<String, String>, key: &str| map.remove(key);

        let layer_kind = take(&mut model, "layer_kind")
            .ok_or_else(|| Error::Config("missing required key [model] layer_kind".into()))?;
        let layer_kind = LayerKind::parse(&layer_kind)?;
        let d_model = take(&mut model, "d_model")
            .ok_or_else(|| Error::Config("missing required key [model] d_model".into()))?;
        let d_model = parse_usize("model", "d_model", &d_model)?;
        let blocks = match take(&mut model, "blocks") {
            Some(v) => parse_usize("model", "blocks", &v)?,
            None => 2,
        };
        let heads = match take(&mut model, "heads") {
            Some(v) => parse_usize("model", "heads", &v)?,
            None => 4,
        };
        let d_ff = match take(&mut model, "d_ff") {
            Some(v) => parse_usize("model", "d_ff", &v)?,
            None => 2 * d_model,
        };
        let dropout = match take(&mut model, "dropout") {
            Some(v) => parse_real("model", "dropout", &v)?,
            None => 0.0,
        };
        let norm_placement = match take(&mut model, "norm_placement") {
            Some(v) => NormPlacement::parse(&v)?,
            None => NormPlacement::Pre,
        };
        let lr_mode = match take(&mut model, "lr_mode") {
            Some(v) => LrMode::parse(&v)?,
            None => LrMode::PerSubmatrix4,
        };
        let input_activation = match take(&mut model, "input_activation") {
            Some(v) => InputActivation::parse(&v)?,
            None => InputActivation::Identity,
        };
        if let Some(key) = model.keys().next() {
            return Err(Error::Config(format!("unknown key `{key}` in [model]")));
        }

        let protocol = match take(&mut data, "protocol") {
            Some(v) => Protocol::parse(&v)?,
            None => Protocol::Synchronous,
        };
        let n_ways = match take(&mut data, "n_ways") {
            Some(v) => parse_usize("data", "n_ways", &v)?,
            None => 5,
        };
        let k_shots = match take(&mut data, "k_shots") {
            Some(v) => parse_usize("data", "k_shots", &v)?,
            None => 1,
        };
        let num_classes = match take(&mut data, "num_classes") {
            Some(v) => parse_usize("data", "num_classes", &v)?,
            None => 20,
        };
        let feature_dim = match take(&mut data, "feature_dim") {
            Some(v) => parse_usize("data", "feature_dim", &v)?,
            None => 16,
        };
        let noise_std = match take(&mut data, "noise_std") {
            Some(v) => parse_real("data", "noise_std", &v)?,
            None => 0.1,
        };
        let prototype_scale = match take(&mut data, "prototype_scale") {
            Some(v) => parse_real("data", "prototype_scale", &v)?,
            None => 1.0,
        };
        let max_instances_per_class = match take(&mut data, "max_instances_per_class") {
            Some(v) => parse_usize("data", "max_instances_per_class", &v)?,
            None => 15,
        };
        let multitask = match take(&mut data, "multitask") {
            Some(v) => parse_bool("data", "multitask", &v)?,
            None => false,
        };
        let second_noise_std = match take(&mut data, "second_noise_std") {
            Some(v) => parse_real("data", "second_noise_std", &v)?,
            None => 0.05,
        };
        let second_prototype_scale = match take(&mut data, "second_prototype_scale") {
            Some(v) => parse_real("data", "second_prototype_scale", &v)?,
            None => 1.5,
        };
        let trim_lo = match take(&mut data, "trim_lo") {
            Some(v) => parse_usize("data", "trim_lo", &v)?,
            None => 1,
        };
        let trim_hi = match take(&mut data, "trim_hi") {
            Some(v) => parse_usize("data", "trim_hi", &v)?,
            None => 60,
        };
        let alternate_order = match take(&mut data, "alternate_order") {
            Some(v) => parse_bool("data", "alternate_order", &v)?,
            None => true,
        };
        let feature_file = take(&mut data, "feature_file").map(PathBuf::from);
        let second_feature_file = take(&mut data, "second_feature_file").map(PathBuf::from);
        if let Some(key) = data.keys().next() {
            return Err(Error::Config(format!("unknown key `{key}` in [data]")));
        }

        let total_steps = take(&mut train, "total_steps")
            .ok_or_else(|| Error::Config("missing required key [train] total_steps".into()))?;
        let total_steps = parse_u64("train", "total_steps", &total_steps)?;
        let learning_rate = match take(&mut train, "learning_rate") {
            Some(v) => parse_real("train", "learning_rate", &v)?,
            None => 3e-4,
        };
        let warmup_steps = match take(&mut train, "warmup_steps") {
            Some(v) => parse_u64("train", "warmup_steps", &v)?,
            None => 0,
        };
        let batch_size = match take(&mut train, "batch_size") {
            Some(v) => parse_usize("train", "batch_size", &v)?,
            None => 32,
        };
        let bptt_span = match take(&mut train, "bptt_span") {
            Some(v) => parse_usize("train", "bptt_span", &v)?,
            None => 50,
        };
        let grad_clip_norm = match take(&mut train, "grad_clip_norm") {
            Some(v) => parse_real("train", "grad_clip_norm", &v)?,
            None => 1.0,
        };
        let seed = match take(&mut train, "seed") {
            Some(v) => parse_u64("train", "seed", &v)?,
            None => 0,
        };
        let eval_every = match take(&mut train, "eval_every") {
            Some(v) => parse_u64("train", "eval_every", &v)?,
            None => 250,
        };
        let eval_episodes = match take(&mut train, "eval_episodes") {
            Some(v) => parse_usize("train", "eval_episodes", &v)?,
            None => 200,
        };
        let threads = match take(&mut train, "threads") {
            Some(v) => parse_usize("train", "threads", &v)?,
            None => 1,
        };
        let checkpoint_every = match take(&mut train, "checkpoint_every") {
            Some(v) => parse_u64("train", "checkpoint_every", &v)?,
            None => 0,
        };
        if let Some(key) = train.keys().next() {
            return Err(Error::Config(format!("unknown key `{key}` in [train]")));
        }

        let cfg = RunConfig {
            layer_kind,
            d_model,
            blocks,
            heads,
            d_ff,
            dropout,
            norm_placement,
            lr_mode,
            input_activation,
            protocol,
            n_ways,
            k_shots,
            num_classes,
            feature_dim,
            noise_std,
            prototype_scale,
            max_instances_per_class,
            multitask,
            second_noise_std,
            second_prototype_scale,
            trim_lo,
            trim_hi,
            alternate_order,
            feature_file,
            second_feature_file,
            train: TrainConfig {
                learning_rate,
                warmup_steps,
                batch_size,
                bptt_span,
                total_steps,
                grad_clip_norm,
                seed,
                eval_every,
                eval_episodes,
                threads,
            },
            checkpoint_every,
        };
        cfg.model_config().validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }

    /// Canonical serialization with every default filled in; hashing this
    /// text fingerprints the run.
    pub fn resolved_text(&self) -> String {
        let mut s = String::new();
        s.push_str("[model]\n");
        s.push_str(&format!("layer_kind = {}\n", self.layer_kind.name()));
        s.push_str(&format!("d_model = {}\n", self.d_model));
        s.push_str(&format!("blocks = {}\n", self.blocks));
        s.push_str(&format!("heads = {}\n", self.heads));
        s.push_str(&format!("d_ff = {}\n", self.d_ff));
        s.push_str(&format!("dropout = {}\n", self.dropout));
        s.push_str(&format!("norm_placement = {}\n", self.norm_placement.name()));
        s.push_str(&format!("lr_mode = {}\n", self.lr_mode.name()));
        s.push_str(&format!("input_activation = {}\n", self.input_activation.name()));
        s.push_str("\n[data]\n");
        s.push_str(&format!("protocol = {}\n", self.protocol.name()));
        s.push_str(&format!("n_ways = {}\n", self.n_ways));
        s.push_str(&format!("k_shots = {}\n", self.k_shots));
        s.push_str(&format!("num_classes = {}\n", self.num_classes));
        s.push_str(&format!("feature_dim = {}\n", self.feature_dim));
        s.push_str(&format!("noise_std = {}\n", self.noise_std));
        s.push_str(&format!("prototype_scale = {}\n", self.prototype_scale));
        s.push_str(&format!("max_instances_per_class = {}\n", self.max_instances_per_class));
        s.push_str(&format!("multitask = {}\n", self.multitask));
        s.push_str(&format!("second_noise_std = {}\n", self.second_noise_std));
        s.push_str(&format!("second_prototype_scale = {}\n", self.second_prototype_scale));
        s.push_str(&format!("trim_lo = {}\n", self.trim_lo));
        s.push_str(&format!("trim_hi = {}\n", self.trim_hi));
        s.push_str(&format!("alternate_order = {}\n", self.alternate_order));
        if let Some(p) = &self.feature_file {
            s.push_str(&format!("feature_file = {}\n", p.display()));
        }
        if let Some(p) = &self.second_feature_file {
            s.push_str(&format!("second_feature_file = {}\n", p.display()));
        }
        s.push_str("\n[train]\n");
        s.push_str(&format!("learning_rate = {}\n", self.train.learning_rate));
        s.push_str(&format!("warmup_steps = {}\n", self.train.warmup_steps));
        s.push_str(&format!("batch_size = {}\n", self.train.batch_size));
        s.push_str(&format!("bptt_span = {}\n", self.train.bptt_span));
        s.push_str(&format!("total_steps = {}\n", self.train.total_steps));
        if self.train.grad_clip_norm.is_finite() {
            s.push_str(&format!("grad_clip_norm = {}\n", self.train.grad_clip_norm));
        } else {
            s.push_str("grad_clip_norm = inf\n");
        }
        s.push_str(&format!("seed = {}\n", self.train.seed));
        s.push_str(&format!("eval_every = {}\n", self.train.eval_every));
        s.push_str(&format!("eval_episodes = {}\n", self.train.eval_episodes));
        s.push_str(&format!("threads = {}\n", self.train.threads));
        s.push_str(&format!("checkpoint_every = {}\n", self.checkpoint_every));
        s
    }

    pub fn config_hash(&self) -> u64 {
        fnv1a64(self.resolved_text().as_bytes())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            feature_dim: self.feature_dim,
            num_classes: self.n_ways,
            blocks: vec![
                BlockConfig {
                    layer_kind: self.layer_kind,
                    d_model: self.d_model,
                    num_heads: self.heads,
                    d_ff: self.d_ff,
                    dropout_p: self.dropout,
                    norm_placement: self.norm_placement,
                    lr_mode: self.lr_mode,
                    input_activation: self.input_activation,
                };
                self.blocks
            ],
        }
    }

    /// Builds the episode source; synthetic pools are seeded from the run
    /// seed so training and evaluation share them across processes.
    pub fn episode_source(&self) -> Result<EpisodeSource> {
        let spec = EpisodeSpec {
            n_ways: self.n_ways,
            k_shots: self.k_shots,
            protocol: self.protocol,
            max_instances_per_class: self.max_instances_per_class,
        };
        let first_pool = |task_id: u32| -> Result<ClassPool> {
            match &self.feature_file {
                Some(path) => load_feature_file(path),
                None => gen_synthetic_classes(
                    &SyntheticTaskConfig {
                        num_classes: self.num_classes,
                        feature_dim: self.feature_dim,
                        noise_std: self.noise_std,
                        prototype_scale: self.prototype_scale,
                        task_id,
                    },
                    &mut Rng::new(self.train.seed, STREAM_POOL_BASE),
                ),
            }
        };
        if !self.multitask {
            return Ok(EpisodeSource::SingleTask { pool: first_pool(0)?, spec });
        }
        let second_pool = match &self.second_feature_file {
            Some(path) => {
                let pool = load_feature_file(path)?;
                match pool {
                    ClassPool::Fixed { dim, classes, .. } => {
                        ClassPool::Fixed { task_id: 1, dim, classes }
                    }
                    other => other,
                }
            }
            None => gen_synthetic_classes(
                &SyntheticTaskConfig {
                    num_classes: self.num_classes,
                    feature_dim: self.feature_dim,
                    noise_std: self.second_noise_std,
                    prototype_scale: self.second_prototype_scale,
                    task_id: 1,
                },
                &mut Rng::new(self.train.seed, STREAM_POOL_BASE + 1),
            )?,
        };
        Ok(EpisodeSource::MultiTask {
            cfg: MultiTaskStreamConfig {
                segments: vec![
                    SegmentSpec {
                        pool_index: 0,
                        max_instances_per_class: self.max_instances_per_class,
                    },
                    SegmentSpec {
                        pool_index: 1,
                        max_instances_per_class: self.max_instances_per_class,
                    },
                ],
                trim_lo: self.trim_lo,
                trim_hi: self.trim_hi,
                alternate_per_batch: self.alternate_order,
            },
            pools: vec![first_pool(0)?, second_pool],
            spec,
        })
    }
}
