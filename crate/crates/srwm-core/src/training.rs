//! Loss, Adam with optional warmup scheduling, the truncated-backprop
//! training loop with state carry and episode-boundary resets, evaluation
//! metrics (total, instance-level, per-task, per-position), gradient
//! clipping, and bit-exact checkpointing.
//!
//! State carry across spans is by value: the carried fast-weight delta is
//! gradient-stopped at every span boundary, while the additive decomposition
//! W = W_0 + Δ keeps routing a W_0 gradient through each span's backward
//! (see the srwm module docs). States reset only at episode boundaries.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::episodes::{
    instance_index_annotate, sample_episode, sample_multitask_stream, ClassPool, Episode,
    EpisodeSpec, MultiTaskStreamConfig, Protocol, Token,
};
use crate::error::{Error, Result};
use crate::model::{
    encode_token, mean_sigma_beta, model_backward, model_forward, predict, LayerState,
    ModelConfig, ModelParams, ModelState, TrainCtx,
};
use crate::numerics::{softmax, Matrix, Real, Rng};

// Stream-id layout for the seeded generators; everything a run draws is
// addressed by (seed, stream, counter) so checkpoints can capture it.
pub const STREAM_PARAM_INIT: u64 = 1;
pub const STREAM_POOL_BASE: u64 = 50;
pub const STREAM_DATA_BASE: u64 = 100;
pub const STREAM_DROPOUT_BASE: u64 = 10_000;
pub const STREAM_EVAL_BASE: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: Real,
    /// 0 disables the inverse-square-root warmup schedule.
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub bptt_span: usize,
    pub total_steps: u64,
    /// Infinity disables clipping.
    pub grad_clip_norm: Real,
    pub seed: u64,
    /// 0 disables periodic evaluation.
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            warmup_steps: 0,
            batch_size: 32,
            bptt_span: 50,
            total_steps: 1000,
            grad_clip_norm: 1.0,
            seed: 0,
            eval_every: 250,
            eval_episodes: 200,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.bptt_span < 1 {
            return Err(Error::Config("bptt_span must be at least 1".into()));
        }
        if self.threads < 1 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate at 1-based `step`: constant, or ramping linearly to the
/// peak at `warmup_steps` and decaying as step^-1/2 after.
pub fn lr_at(cfg: &TrainConfig, step: u64) -> Real {
    if cfg.warmup_steps == 0 {
        return cfg.learning_rate;
    }
    let s = step.max(1) as Real;
    let w = cfg.warmup_steps as Real;
    cfg.learning_rate * w.sqrt() * (1.0 / s.sqrt()).min(s / (w * w.sqrt()))
}

/// loss = -log softmax(logits)[target]; grad = softmax(logits) - onehot.
pub fn cross_entropy(logits: &[Real], target: usize) -> Result<(Real, Vec<Real>)> {
    if target >= logits.len() {
        return Err(Error::Config(format!(
            "target {target} out of range for {} logits",
            logits.len()
        )));
    }
    let p = softmax(logits);
    let loss = -(p[target].max(Real::MIN_POSITIVE)).ln();
    let mut grad = p;
    grad[target] -= 1.0;
    Ok((loss, grad))
}

// ── Adam ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment accumulators laid out flat in parameter-group order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Real>,
    pub v: Vec<Real>,
    pub step: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(num_params: usize, hyper: AdamHyper) -> Self {
        AdamState { m: vec![0.0; num_params], v: vec![0.0; num_params], step: 0, hyper }
    }
}

/// Standard bias-corrected Adam update over all parameter groups.
pub fn adam_step(
    adam: &mut AdamState,
    params: &mut ModelParams,
    grads: &ModelParams,
    lr: Real,
) -> Result<()> {
    let total: usize = params.num_params();
    if adam.m.len() != total {
        return Err(Error::Shape {
            op: "adam_step",
            detail: format!("{} moments vs {} parameters", adam.m.len(), total),
        });
    }
    adam.step += 1;
    let h = adam.hyper;
    let bc1 = 1.0 - h.beta1.powi(adam.step as i32);
    let bc2 = 1.0 - h.beta2.powi(adam.step as i32);
    let mut offset = 0usize;
    let grad_groups = grads.param_groups();
    for ((_, pslice), (_, gslice)) in params.param_groups_mut().into_iter().zip(grad_groups) {
        for (i, (p, g)) in pslice.iter_mut().zip(gslice.iter()).enumerate() {
            let j = offset + i;
            adam.m[j] = h.beta1 * adam.m[j] + (1.0 - h.beta1) * g;
            adam.v[j] = h.beta2 * adam.v[j] + (1.0 - h.beta2) * g * g;
            let m_hat = adam.m[j] / bc1;
            let v_hat = adam.v[j] / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + h.eps);
        }
        offset += pslice.len();
    }
    Ok(())
}

pub fn global_grad_norm(grads: &ModelParams) -> Real {
    grads
        .param_groups()
        .iter()
        .map(|(_, s)| s.iter().map(|v| v * v).sum::<Real>())
        .sum::<Real>()
        .sqrt()
}

/// Scales gradients so the global norm is at most `max_norm`; returns the
/// pre-clip norm.
pub fn clip_gradients(grads: &mut ModelParams, max_norm: Real) -> Real {
    let norm = global_grad_norm(grads);
    if norm.is_finite() && max_norm.is_finite() && norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for (_, s) in grads.param_groups_mut() {
            for v in s {
                *v *= scale;
            }
        }
    }
    norm
}

// ── Episode sources ──────────────────────────────────────────────────

/// Where training and evaluation episodes come from.
#[derive(Debug, Clone)]
pub enum EpisodeSource {
    SingleTask { pool: ClassPool, spec: EpisodeSpec },
    MultiTask { cfg: MultiTaskStreamConfig, pools: Vec<ClassPool>, spec: EpisodeSpec },
    /// Uniform mixture over sources; each episode draws its source from the
    /// stream generator, so mixtures stay deterministic per cursor.
    Mixture(Vec<EpisodeSource>),
}

impl EpisodeSource {
    pub fn spec(&self) -> &EpisodeSpec {
        match self {
            EpisodeSource::SingleTask { spec, .. } => spec,
            EpisodeSource::MultiTask { spec, .. } => spec,
            EpisodeSource::Mixture(sources) => sources[0].spec(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            EpisodeSource::SingleTask { pool, .. } => pool.feature_dim(),
            EpisodeSource::MultiTask { pools, .. } => pools[0].feature_dim(),
            EpisodeSource::Mixture(sources) => sources[0].feature_dim(),
        }
    }

    pub fn sample(&self, rng: &mut Rng, batch_idx: u64) -> Result<Episode> {
        match self {
            EpisodeSource::SingleTask { pool, spec } => sample_episode(spec, pool, rng),
            EpisodeSource::MultiTask { cfg, pools, spec } => {
                sample_multitask_stream(cfg, pools, spec, rng, batch_idx)
            }
            EpisodeSource::Mixture(sources) => {
                let pick = rng.gen_range(sources.len());
                sources[pick].sample(rng, batch_idx)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EpisodeSource::SingleTask { pool, spec } => spec.validate(pool),
            EpisodeSource::MultiTask { cfg, pools, spec } => {
                cfg.validate(spec)?;
                for pool in pools {
                    spec.validate(pool)?;
                }
                Ok(())
            }
            EpisodeSource::Mixture(sources) => {
                if sources.is_empty() {
                    return Err(Error::Config("mixture source needs at least one member".into()));
                }
                let ways = sources[0].spec().n_ways;
                let dim = sources[0].feature_dim();
                for s in sources {
                    s.validate()?;
                    if s.spec().n_ways != ways || s.feature_dim() != dim {
                        return Err(Error::Config(
                            "mixture members must share n_ways and feature_dim".into(),
                        ));
                    }
                }
                Ok(())
            }
        }
    }
}

// ── Metrics ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Default)]
pub struct MetricsAccum {
    loss_sum: Real,
    correct: usize,
    masked: usize,
    instance: BTreeMap<usize, (usize, usize)>,
    task: BTreeMap<u32, (usize, usize)>,
    position: Vec<(usize, usize)>,
}

impl MetricsAccum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_token(
        &mut self,
        position: usize,
        task_id: u32,
        instance_k: Option<usize>,
        loss: Real,
        correct: bool,
    ) {
        self.loss_sum += loss;
        self.masked += 1;
        if correct {
            self.correct += 1;
        }
        if let Some(k) = instance_k {
            let e = self.instance.entry(k).or_insert((0, 0));
            e.1 += 1;
            if correct {
                e.0 += 1;
            }
        }
        let e = self.task.entry(task_id).or_insert((0, 0));
        e.1 += 1;
        if correct {
            e.0 += 1;
        }
        while self.position.len() <= position {
            self.position.push((0, 0));
        }
        let e = &mut self.position[position];
        e.1 += 1;
        if correct {
            e.0 += 1;
        }
    }

    pub fn finish(self, keep_positions: bool) -> Metrics {
        let ratio = |c: usize, n: usize| if n == 0 { 0.0 } else { c as Real / n as Real };
        Metrics {
            loss: if self.masked == 0 { 0.0 } else { self.loss_sum / self.masked as Real },
            total_accuracy: ratio(self.correct, self.masked),
            masked_tokens: self.masked,
            instance_accuracy: self
                .instance
                .into_iter()
                .map(|(k, (c, n))| (k, ratio(c, n), n))
                .collect(),
            task_accuracy: self.task.into_iter().map(|(t, (c, n))| (t, ratio(c, n), n)).collect(),
            per_position: keep_positions.then(|| {
                self.position.into_iter().map(|(c, n)| (ratio(c, n), n)).collect()
            }),
        }
    }
}

/// Total and instance-level accuracies plus optional per-position curve.
#[derive(Debug, Clone)]
pub struct Metrics {
    pub loss: Real,
    pub total_accuracy: Real,
    pub masked_tokens: usize,
    /// (instance index k, accuracy, token count), ascending in k.
    pub instance_accuracy: Vec<(usize, Real, usize)>,
    /// (task id, accuracy, token count).
    pub task_accuracy: Vec<(u32, Real, usize)>,
    /// (accuracy, count) per stream position, when requested.
    pub per_position: Option<Vec<(Real, usize)>>,
}

impl Metrics {
    pub fn instance_acc(&self, k: usize) -> Option<Real> {
        self.instance_accuracy.iter().find(|(kk, _, _)| *kk == k).map(|(_, a, _)| *a)
    }

    /// Table 2-style layout: instance columns k in {1, 2, 3, 5, 10} + Total.
    pub fn instance_table(&self) -> String {
        let mut out = String::from("k        1      2      3      5     10  Total\n");
        out.push_str("acc ");
        for k in [1usize, 2, 3, 5, 10] {
            match self.instance_acc(k) {
                Some(a) => out.push_str(&format!(" {:6.3}", a)),
                None => out.push_str("     na"),
            }
        }
        out.push_str(&format!(" {:6.3}\n", self.total_accuracy));
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub n_episodes: usize,
    /// Forced state reset every this many tokens; None carries state across
    /// the whole episode (resets still happen at episode boundaries).
    pub reset_every: Option<usize>,
    pub per_position: bool,
}

/// Evaluation is dropout-free and a pure function of (params, episodes).
pub fn evaluate(
    model_cfg: &ModelConfig,
    params: &ModelParams,
    source: &EpisodeSource,
    opts: EvalOptions,
    rng: &mut Rng,
) -> Result<Metrics> {
    if opts.n_episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let mut accum = MetricsAccum::new();
    for e in 0..opts.n_episodes {
        let episode = source.sample(rng, e as u64)?;
        let instance = match episode.protocol {
            Protocol::Delayed => Some(instance_index_annotate(&episode)?),
            Protocol::Synchronous => None,
        };
        let tokens = encode_episode(&episode, model_cfg.num_classes)?;
        let chunk = opts.reset_every.unwrap_or(usize::MAX).max(1);
        let mut pos = 0usize;
        let mut state: Option<ModelState> = None;
        while pos < tokens.len() {
            let take = chunk.min(tokens.len() - pos);
            let out = model_forward(model_cfg, params, state.take(), &tokens[pos..pos + take], None)?;
            for (i, logits) in out.logits.iter().enumerate() {
                let tok = &episode.tokens[pos + i];
                if !tok.loss_mask {
                    continue;
                }
                let target = tok.target.expect("loss-masked tokens carry targets");
                let (loss, _) = cross_entropy(logits, target)?;
                accum.add_token(
                    pos + i,
                    tok.task_id,
                    instance.as_ref().map(|ks| ks[pos + i]),
                    loss,
                    predict(logits) == target,
                );
            }
            pos += take;
            // Forced reset between chunks: drop the carried state.
            state = if opts.reset_every.is_some() { None } else { Some(out.state) };
        }
    }
    Ok(accum.finish(opts.per_position))
}

fn encode_episode(episode: &Episode, num_classes: usize) -> Result<Vec<Vec<Real>>> {
    episode
        .tokens
        .iter()
        .map(|t| encode_token(&t.feature, t.label_in, num_classes))
        .collect()
}

// ── Training loop ────────────────────────────────────────────────────

/// One live stream position: its data and dropout generators, the episode
/// being consumed, and the carried model state.
#[derive(Debug, Clone)]
pub struct StreamCursor {
    pub data_rng: Rng,
    pub dropout_rng: Rng,
    pub episode: Episode,
    pub pos: usize,
    pub state: ModelState,
    pub episodes_started: u64,
}

#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub loss: Real,
    pub accuracy: Real,
    pub masked_tokens: usize,
    pub grad_norm: Real,
    pub lr: Real,
    /// Mean σ(β) per block over the span (None for blocks without β).
    pub mean_sigma_beta: Vec<Option<Real>>,
}

#[derive(Debug)]
pub struct Trainer {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub source: EpisodeSource,
    pub params: ModelParams,
    pub adam: AdamState,
    pub cursors: Vec<StreamCursor>,
    pub step: u64,
}

struct CursorResult {
    grads: ModelParams,
    loss_sum: Real,
    correct: usize,
    masked: usize,
    sigma_sums: Vec<(Real, usize)>,
}

impl Trainer {
    pub fn new(
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
        source: EpisodeSource,
    ) -> Result<Self> {
        model_cfg.validate()?;
        train_cfg.validate()?;
        source.validate()?;
        if source.spec().n_ways != model_cfg.num_classes {
            return Err(Error::Config(format!(
                "episode n_ways {} must equal model num_classes {}",
                source.spec().n_ways,
                model_cfg.num_classes
            )));
        }
        if source.feature_dim() != model_cfg.feature_dim {
            return Err(Error::Config(format!(
                "pool feature_dim {} must equal model feature_dim {}",
                source.feature_dim(),
                model_cfg.feature_dim
            )));
        }
        let mut init_rng = Rng::new(train_cfg.seed, STREAM_PARAM_INIT);
        let params = ModelParams::init(&model_cfg, &mut init_rng)?;
        let mut cursors = Vec::with_capacity(train_cfg.batch_size);
        for i in 0..train_cfg.batch_size {
            let mut data_rng = Rng::new(train_cfg.seed, STREAM_DATA_BASE + i as u64);
            let dropout_rng = Rng::new(train_cfg.seed, STREAM_DROPOUT_BASE + i as u64);
            let episode = source.sample(&mut data_rng, 0)?;
            cursors.push(StreamCursor {
                data_rng,
                dropout_rng,
                episode,
                pos: 0,
                state: ModelState::fresh(&model_cfg, &params),
                episodes_started: 1,
            });
        }
        let adam = AdamState::new(params.num_params(), AdamHyper::default());
        Ok(Trainer { model_cfg, train_cfg, source, params, adam, cursors, step: 0 })
    }

    /// Advances every cursor by `bptt_span` tokens, backpropagates within
    /// the span (carried state values are gradient-stopped; episode
    /// boundaries inside the span reset state), clips the global gradient
    /// norm, and applies one Adam update.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let n_blocks = self.model_cfg.blocks.len();
        let mut results: Vec<Option<Result<CursorResult>>> =
            (0..self.cursors.len()).map(|_| None).collect();

        let threads = self.train_cfg.threads.min(self.cursors.len()).max(1);
        if threads <= 1 {
            for (cursor, slot) in self.cursors.iter_mut().zip(results.iter_mut()) {
                *slot = Some(process_cursor(
                    &self.model_cfg,
                    &self.source,
                    &self.params,
                    self.train_cfg.bptt_span,
                    cursor,
                ));
            }
        } else {
            let model_cfg = &self.model_cfg;
            let source = &self.source;
            let params = &self.params;
            let span = self.train_cfg.bptt_span;
            let chunk = self.cursors.len().div_ceil(threads);
            std::thread::scope(|scope| {
                for (cursor_chunk, result_chunk) in
                    self.cursors.chunks_mut(chunk).zip(results.chunks_mut(chunk))
                {
                    scope.spawn(move || {
                        for (cursor, slot) in cursor_chunk.iter_mut().zip(result_chunk.iter_mut())
                        {
                            *slot = Some(process_cursor(model_cfg, source, params, span, cursor));
                        }
                    });
                }
            });
        }

        // Deterministic ordered reduction over cursor index.
        let mut total = self.params.zeros_like();
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut masked = 0usize;
        let mut sigma_sums = vec![(0.0, 0usize); n_blocks];
        for (i, slot) in results.into_iter().enumerate() {
            let r = slot.expect("every cursor produces a result").map_err(|e| match e {
                Error::Divergence { .. } | Error::NonFinite { .. } => {
                    Error::TrainDiverged { cursor: i, detail: e.to_string() }
                }
                other => other,
            })?;
            total.axpy(1.0, &r.grads);
            loss_sum += r.loss_sum;
            correct += r.correct;
            masked += r.masked;
            for (acc, add) in sigma_sums.iter_mut().zip(r.sigma_sums.iter()) {
                acc.0 += add.0;
                acc.1 += add.1;
            }
        }

        if masked > 0 {
            let scale = 1.0 / masked as Real;
            for (_, s) in total.param_groups_mut() {
                for v in s {
                    *v *= scale;
                }
            }
        }
        let grad_norm = clip_gradients(&mut total, self.train_cfg.grad_clip_norm);
        let lr = lr_at(&self.train_cfg, self.step + 1);
        adam_step(&mut self.adam, &mut self.params, &total, lr)?;
        self.step += 1;

        Ok(StepMetrics {
            loss: if masked == 0 { 0.0 } else { loss_sum / masked as Real },
            accuracy: if masked == 0 { 0.0 } else { correct as Real / masked as Real },
            masked_tokens: masked,
            grad_norm,
            lr,
            mean_sigma_beta: sigma_sums
                .into_iter()
                .map(|(s, n)| (n > 0).then(|| s / n as Real))
                .collect(),
        })
    }

    /// Deterministic evaluation addressed by the current step, so resumed
    /// runs evaluate on identical episodes.
    pub fn evaluate(&self, opts: EvalOptions) -> Result<Metrics> {
        let mut rng = Rng::new(self.train_cfg.seed, STREAM_EVAL_BASE + self.step);
        evaluate(&self.model_cfg, &self.params, &self.source, opts, &mut rng)
    }
}

fn process_cursor(
    model_cfg: &ModelConfig,
    source: &EpisodeSource,
    params: &ModelParams,
    span: usize,
    cursor: &mut StreamCursor,
) -> Result<CursorResult> {
    let n_blocks = model_cfg.blocks.len();
    let mut result = CursorResult {
        grads: params.zeros_like(),
        loss_sum: 0.0,
        correct: 0,
        masked: 0,
        sigma_sums: vec![(0.0, 0usize); n_blocks],
    };
    let mut remaining = span;
    while remaining > 0 {
        if cursor.pos == cursor.episode.len() {
            cursor.episode = source.sample(&mut cursor.data_rng, cursor.episodes_started)?;
            cursor.episodes_started += 1;
            cursor.pos = 0;
            cursor.state = ModelState::fresh(model_cfg, params);
        }
        let take = remaining.min(cursor.episode.len() - cursor.pos);
        let slice = &cursor.episode.tokens[cursor.pos..cursor.pos + take];
        let tokens: Vec<Vec<Real>> = slice
            .iter()
            .map(|t| encode_token(&t.feature, t.label_in, model_cfg.num_classes))
            .collect::<Result<_>>()?;
        let out = model_forward(
            model_cfg,
            params,
            Some(cursor.state.clone()),
            &tokens,
            Some(TrainCtx { dropout_rng: &mut cursor.dropout_rng }),
        )?;

        let mut grad_logits = vec![vec![0.0; model_cfg.num_classes]; take];
        for (i, tok) in slice.iter().enumerate() {
            if !tok.loss_mask {
                continue;
            }
            let target = tok.target.expect("loss-masked tokens carry targets");
            let (loss, grad) = cross_entropy(&out.logits[i], target)?;
            result.loss_sum += loss;
            result.masked += 1;
            if predict(&out.logits[i]) == target {
                result.correct += 1;
            }
            grad_logits[i] = grad;
        }
        let trace = out.trace.as_ref().expect("training forward records a trace");
        let grads = model_backward(model_cfg, params, trace, &grad_logits)?;
        result.grads.axpy(1.0, &grads);
        for (acc, mean) in result.sigma_sums.iter_mut().zip(mean_sigma_beta(trace)) {
            if let Some(m) = mean {
                acc.0 += m * take as Real;
                acc.1 += take;
            }
        }

        cursor.state = out.state;
        cursor.pos += take;
        remaining -= take;
    }
    Ok(result)
}

// ── Metrics log format ───────────────────────────────────────────────

/// Fixed CSV header; one column of mean σ(β) per block.
pub fn metrics_csv_header(n_blocks: usize) -> String {
    let mut h = String::from("step,lr,train_loss,eval_loss,total_acc,inst1,inst2,inst3,inst5,inst10");
    for i in 0..n_blocks {
        h.push_str(&format!(",sigma_beta_l{i}"));
    }
    h.push('\n');
    h
}

pub fn metrics_csv_row(
    step: u64,
    train: &StepMetrics,
    eval: &Metrics,
) -> String {
    let mut row = format!(
        "{step},{},{},{},{}",
        train.lr, train.loss, eval.loss, eval.total_accuracy
    );
    for k in [1usize, 2, 3, 5, 10] {
        match eval.instance_acc(k) {
            Some(a) => row.push_str(&format!(",{a}")),
            None => row.push_str(",na"),
        }
    }
    for s in &train.mean_sigma_beta {
        match s {
            Some(v) => row.push_str(&format!(",{v}")),
            None => row.push_str(",na"),
        }
    }
    row.push('\n');
    row
}

// ── Checkpointing ────────────────────────────────────────────────────

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SRWMCKP1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// FNV-1a used to fingerprint the resolved configuration.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Header text stored inside every checkpoint: records the row-block layout
/// conventions and the key model dimensions.
pub fn checkpoint_header(cfg: &ModelConfig) -> String {
    let b = &cfg.blocks[0];
    format!(
        "srwm_row_order=y,q,k,beta\n\
         delta_row_order=k,v,q,beta\n\
         blocks={}\n\
         d_model={}\n\
         heads={}\n\
         layer_kind={}\n\
         lr_mode={}\n\
         input_activation={}\n\
         feature_dim={}\n\
         num_classes={}\n",
        cfg.blocks.len(),
        b.d_model,
        b.num_heads,
        b.layer_kind.name(),
        b.lr_mode.name(),
        b.input_activation.name(),
        cfg.feature_dim,
        cfg.num_classes
    )
}

struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    fn new() -> Self {
        ByteWriter { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn real_slice(&mut self, s: &[Real]) {
        self.u64(s.len() as u64);
        for v in s {
            self.buf.extend_from_slice(&(*v as f64).to_le_bytes());
        }
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn matrix(&mut self, m: &Matrix) {
        self.u64(m.rows() as u64);
        self.u64(m.cols() as u64);
        self.real_slice(m.data());
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, at: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Truncated { what: format!("{what} at offset {}", self.at) });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn i64(&mut self, what: &str) -> Result<i64> {
        let b = self.take(8, what)?;
        Ok(i64::from_le_bytes(b.try_into().unwrap()))
    }

    fn real_vec(&mut self, what: &str) -> Result<Vec<Real>> {
        let n = self.u64(what)? as usize;
        let raw = self.take(8 * n, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Real)
            .collect())
    }

    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::FormatInconsistent(format!("{what} is not utf-8")))
    }

    fn matrix(&mut self, what: &str) -> Result<Matrix> {
        let rows = self.u64(what)? as usize;
        let cols = self.u64(what)? as usize;
        let data = self.real_vec(what)?;
        Matrix::from_vec(rows, cols, data)
    }
}

fn write_rng(w: &mut ByteWriter, rng: &Rng) {
    let (seed, stream, counter) = rng.state();
    w.u64(seed);
    w.u64(stream);
    w.u64(counter);
}

fn read_rng(r: &mut ByteReader) -> Result<Rng> {
    let seed = r.u64("rng seed")?;
    let stream = r.u64("rng stream")?;
    let counter = r.u64("rng counter")?;
    Ok(Rng::from_state(seed, stream, counter))
}

fn write_episode(w: &mut ByteWriter, e: &Episode) {
    w.u8(match e.protocol {
        Protocol::Synchronous => 0,
        Protocol::Delayed => 1,
    });
    w.u64(e.n_ways as u64);
    w.u32(e.segment_starts.len() as u32);
    for s in &e.segment_starts {
        w.u64(*s as u64);
    }
    w.u64(e.tokens.len() as u64);
    for t in &e.tokens {
        w.real_slice(&t.feature);
        w.i64(t.label_in.map_or(-1, |v| v as i64));
        w.i64(t.target.map_or(-1, |v| v as i64));
        w.u8(t.loss_mask as u8);
        w.u32(t.task_id);
        w.u64(t.segment as u64);
    }
}

fn read_episode(r: &mut ByteReader) -> Result<Episode> {
    let protocol = match r.u8("protocol")? {
        0 => Protocol::Synchronous,
        1 => Protocol::Delayed,
        other => return Err(Error::FormatInconsistent(format!("bad protocol tag {other}"))),
    };
    let n_ways = r.u64("n_ways")? as usize;
    let n_segments = r.u32("segment count")? as usize;
    let mut segment_starts = Vec::with_capacity(n_segments);
    for _ in 0..n_segments {
        segment_starts.push(r.u64("segment start")? as usize);
    }
    let n_tokens = r.u64("token count")? as usize;
    let mut tokens = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        let feature = r.real_vec("token feature")?;
        let label_in = match r.i64("label_in")? {
            -1 => None,
            v => Some(v as usize),
        };
        let target = match r.i64("target")? {
            -1 => None,
            v => Some(v as usize),
        };
        let loss_mask = r.u8("loss_mask")? != 0;
        let task_id = r.u32("task_id")?;
        let segment = r.u64("segment")? as usize;
        tokens.push(Token { feature, label_in, target, loss_mask, task_id, segment });
    }
    Ok(Episode { protocol, n_ways, tokens, segment_starts })
}

fn write_layer_state(w: &mut ByteWriter, s: &LayerState) {
    match s {
        LayerState::Srwm(st) => {
            w.u8(0);
            w.u32(st.w.len() as u32);
            for m in &st.w {
                w.matrix(m);
            }
            w.u64(st.step_count);
        }
        LayerState::Delta(st) => {
            w.u8(1);
            w.u32(st.w.len() as u32);
            for m in &st.w {
                w.matrix(m);
            }
            w.u64(st.step_count);
        }
        LayerState::Stateless => w.u8(2),
        LayerState::SrDelta(st) => {
            w.u8(3);
            w.u32(st.srwm.w.len() as u32);
            for m in &st.srwm.w {
                w.matrix(m);
            }
            w.u64(st.srwm.step_count);
            w.u32(st.delta.w.len() as u32);
            for m in &st.delta.w {
                w.matrix(m);
            }
            w.u64(st.delta.step_count);
        }
    }
}

fn read_layer_state(r: &mut ByteReader) -> Result<LayerState> {
    use crate::fwp::{DeltaNetState, SrDeltaState, SrwmState};
    match r.u8("layer state tag")? {
        0 => {
            let n = r.u32("srwm heads")? as usize;
            let w = (0..n).map(|_| r.matrix("srwm state")).collect::<Result<_>>()?;
            let step_count = r.u64("srwm step count")?;
            Ok(LayerState::Srwm(SrwmState { w, step_count }))
        }
        1 => {
            let n = r.u32("delta heads")? as usize;
            let w = (0..n).map(|_| r.matrix("delta state")).collect::<Result<_>>()?;
            let step_count = r.u64("delta step count")?;
            Ok(LayerState::Delta(DeltaNetState { w, step_count }))
        }
        2 => Ok(LayerState::Stateless),
        3 => {
            let n = r.u32("srwm heads")? as usize;
            let w = (0..n).map(|_| r.matrix("srwm state")).collect::<Result<_>>()?;
            let srwm_steps = r.u64("srwm step count")?;
            let nd = r.u32("delta heads")? as usize;
            let wd = (0..nd).map(|_| r.matrix("delta state")).collect::<Result<_>>()?;
            let delta_steps = r.u64("delta step count")?;
            Ok(LayerState::SrDelta(SrDeltaState {
                srwm: SrwmState { w, step_count: srwm_steps },
                delta: DeltaNetState { w: wd, step_count: delta_steps },
            }))
        }
        other => Err(Error::FormatInconsistent(format!("bad layer state tag {other}"))),
    }
}

/// Serializes trainable parameters, optimizer moments, every stream
/// generator and cursor (episode buffer, position, carried state), and the
/// step counter. save ∘ load is bit-exact on all payloads.
pub fn save_checkpoint(path: &Path, trainer: &Trainer, config_hash: u64) -> Result<()> {
    let mut w = ByteWriter::new();
    w.buf.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u64(config_hash);
    w.str(&checkpoint_header(&trainer.model_cfg));

    let groups = trainer.params.param_groups();
    w.u32(groups.len() as u32);
    for (name, slice) in groups {
        w.str(&name);
        w.real_slice(slice);
    }
    w.real_slice(&trainer.adam.m);
    w.real_slice(&trainer.adam.v);
    w.u64(trainer.adam.step);

    w.u32(trainer.cursors.len() as u32);
    for c in &trainer.cursors {
        write_rng(&mut w, &c.data_rng);
        write_rng(&mut w, &c.dropout_rng);
        w.u64(c.episodes_started);
        w.u64(c.pos as u64);
        write_episode(&mut w, &c.episode);
        w.u32(c.state.layers.len() as u32);
        for l in &c.state.layers {
            write_layer_state(&mut w, l);
        }
    }
    w.u64(trainer.step);

    std::fs::File::create(path)?.write_all(&w.buf)?;
    Ok(())
}

/// Rebuilds a trainer from a checkpoint. Refuses files whose config hash
/// differs from `expected_hash`.
pub fn load_checkpoint(
    path: &Path,
    expected_hash: u64,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    source: EpisodeSource,
) -> Result<Trainer> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = ByteReader::new(&bytes);
    let magic = r.take(8, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { expected: "SRWMCKP1", found: magic.to_vec() });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::FormatInconsistent(format!(
            "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let found_hash = r.u64("config hash")?;
    if found_hash != expected_hash {
        return Err(Error::ConfigHashMismatch { expected: expected_hash, found: found_hash });
    }
    let _header = r.str("header")?;

    let mut trainer = Trainer::new(model_cfg, train_cfg, source)?;
    let n_groups = r.u32("group count")? as usize;
    {
        let mut groups = trainer.params.param_groups_mut();
        if n_groups != groups.len() {
            return Err(Error::FormatInconsistent(format!(
                "{n_groups} parameter groups in file, model has {}",
                groups.len()
            )));
        }
        for (name, slice) in groups.iter_mut() {
            let file_name = r.str("group name")?;
            if &file_name != name {
                return Err(Error::FormatInconsistent(format!(
                    "group `{file_name}` in file, expected `{name}`"
                )));
            }
            let values = r.real_vec("group payload")?;
            if values.len() != slice.len() {
                return Err(Error::FormatInconsistent(format!(
                    "group `{name}` has {} values, expected {}",
                    values.len(),
                    slice.len()
                )));
            }
            slice.copy_from_slice(&values);
        }
    }
    trainer.adam.m = r.real_vec("adam m")?;
    trainer.adam.v = r.real_vec("adam v")?;
    if trainer.adam.m.len() != trainer.params.num_params()
        || trainer.adam.v.len() != trainer.params.num_params()
    {
        return Err(Error::FormatInconsistent("adam moment length mismatch".into()));
    }
    trainer.adam.step = r.u64("adam step")?;

    let n_cursors = r.u32("cursor count")? as usize;
    if n_cursors != trainer.cursors.len() {
        return Err(Error::FormatInconsistent(format!(
            "{n_cursors} cursors in file, batch size is {}",
            trainer.cursors.len()
        )));
    }
    for c in trainer.cursors.iter_mut() {
        c.data_rng = read_rng(&mut r)?;
        c.dropout_rng = read_rng(&mut r)?;
        c.episodes_started = r.u64("episodes started")?;
        c.pos = r.u64("cursor pos")? as usize;
        c.episode = read_episode(&mut r)?;
        let n_layers = r.u32("layer count")? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            layers.push(read_layer_state(&mut r)?);
        }
        c.state = ModelState { layers };
    }
    trainer.step = r.u64("step")?;
    Ok(trainer)
}
