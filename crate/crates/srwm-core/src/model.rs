//! Sequence classifier built from fast-weight-programmer blocks.
//!
//! Token encoding concatenates [feature | one-hot(label) | no-label flag].
//! Each block wraps one FWP layer and a two-layer relu feedforward with
//! residual connections and layer norm (pre-norm by default); a linear head
//! maps the final width to class logits. Dropout applies to the two sublayer
//! outputs before their residual additions and is disabled in evaluation.
//!
//! Forward in training mode records a trace sufficient for the exact
//! backward pass; evaluation is a pure function of (params, state, input).

use crate::error::{Error, Result};
use crate::fwp::{
    delta_backward, delta_forward, fake_sr_backward, fake_sr_forward, sr_delta_backward,
    sr_delta_forward, srwm_backward, srwm_forward, DeltaNetConfig, DeltaNetParams, DeltaNetState,
    DeltaTrace, FakeSrTrace, InputActivation, LayerKind, LrMode, SrDeltaConfig, SrDeltaParams,
    SrDeltaState, SrDeltaTrace, SrwmParams, SrwmState, SrwmTrace,
};
use crate::numerics::{layer_norm_bwd, layer_norm_fwd, relu, Matrix, Real, Rng};

pub const LN_EPS: Real = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormPlacement {
    Pre,
    Post,
}

impl NormPlacement {
    pub fn name(self) -> &'static str {
        match self {
            NormPlacement::Pre => "pre",
            NormPlacement::Post => "post",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pre" => Ok(NormPlacement::Pre),
            "post" => Ok(NormPlacement::Post),
            other => Err(Error::Config(format!("unknown norm placement `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockConfig {
    pub layer_kind: LayerKind,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub dropout_p: Real,
    pub norm_placement: NormPlacement,
    pub lr_mode: LrMode,
    pub input_activation: InputActivation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub blocks: Vec<BlockConfig>,
}

impl ModelConfig {
    pub fn token_width(&self) -> usize {
        self.feature_dim + self.num_classes + 1
    }

    pub fn d_model(&self) -> usize {
        self.blocks[0].d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.blocks.is_empty() {
            return Err(Error::Config("model needs at least one block".into()));
        }
        let d_model = self.blocks[0].d_model;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.d_model != d_model {
                return Err(Error::Config(format!(
                    "block {i} d_model {} differs from block 0 d_model {d_model}",
                    b.d_model
                )));
            }
            if b.d_ff < b.d_model {
                return Err(Error::Config(format!(
                    "block {i}: d_ff {} < d_model {}",
                    b.d_ff, b.d_model
                )));
            }
            if !(0.0..1.0).contains(&b.dropout_p) {
                return Err(Error::Config(format!(
                    "block {i}: dropout_p {} outside [0, 1)",
                    b.dropout_p
                )));
            }
            match b.layer_kind {
                LayerKind::Srwm | LayerKind::FakeSr => srwm_cfg(b).validate()?,
                LayerKind::DeltaNet => delta_cfg(b).validate()?,
                LayerKind::SrDelta => sr_delta_cfg(b).validate()?,
            }
        }
        Ok(())
    }
}

fn srwm_cfg(b: &BlockConfig) -> crate::fwp::SrwmConfig {
    crate::fwp::SrwmConfig {
        d_in: b.d_model,
        d_out: b.d_model,
        num_heads: b.num_heads,
        lr_mode: b.lr_mode,
        input_activation: b.input_activation,
    }
}

fn delta_cfg(b: &BlockConfig) -> DeltaNetConfig {
    DeltaNetConfig { d_in: b.d_model, d_out: b.d_model, d_key: b.d_model, num_heads: b.num_heads }
}

fn sr_delta_cfg(b: &BlockConfig) -> SrDeltaConfig {
    SrDeltaConfig {
        d_in: b.d_model,
        d_out: b.d_model,
        d_key: b.d_model,
        num_heads: b.num_heads,
        lr_mode: b.lr_mode,
        input_activation: b.input_activation,
    }
}

// ── Token encoding ───────────────────────────────────────────────────

/// [feature | one-hot(label) | flag]; a missing label sets the flag bit and
/// zeros the one-hot.
pub fn encode_token(
    feature: &[Real],
    label_in: Option<usize>,
    num_classes: usize,
) -> Result<Vec<Real>> {
    if let Some(label) = label_in {
        if label >= num_classes {
            return Err(Error::Config(format!(
                "label {label} out of range for {num_classes} classes"
            )));
        }
    }
    let mut tok = Vec::with_capacity(feature.len() + num_classes + 1);
    tok.extend_from_slice(feature);
    for c in 0..num_classes {
        tok.push(if label_in == Some(c) { 1.0 } else { 0.0 });
    }
    tok.push(if label_in.is_none() { 1.0 } else { 0.0 });
    Ok(tok)
}

/// Inverse of `encode_token` for well-formed tokens.
pub fn decode_token(token: &[Real], num_classes: usize) -> (Vec<Real>, Option<usize>) {
    let feat_len = token.len() - num_classes - 1;
    let feature = token[..feat_len].to_vec();
    if token[token.len() - 1] != 0.0 {
        return (feature, None);
    }
    let label = token[feat_len..feat_len + num_classes]
        .iter()
        .position(|v| *v != 0.0)
        .expect("labelled token must set a one-hot bit");
    (feature, Some(label))
}

/// Argmax with ties broken toward the lowest index.
pub fn predict(logits: &[Real]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate().skip(1) {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

// ── Parameters ───────────────────────────────────────────────────────

/// Per-kind layer parameters; the same enum doubles as the gradient
/// container returned by the layer backward passes.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Srwm(SrwmParams),
    Delta(DeltaNetParams),
    FakeSr(SrwmParams),
    SrDelta(SrDeltaParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub layer: LayerParams,
    pub norm1_gain: Vec<Real>,
    pub norm1_bias: Vec<Real>,
    pub norm2_gain: Vec<Real>,
    pub norm2_bias: Vec<Real>,
    pub ff_w1: Matrix,
    pub ff_b1: Vec<Real>,
    pub ff_w2: Matrix,
    pub ff_b2: Vec<Real>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub input_w: Matrix,
    pub input_b: Vec<Real>,
    pub blocks: Vec<BlockParams>,
    pub head_w: Matrix,
    pub head_b: Vec<Real>,
}

fn normal_matrix(rng: &mut Rng, rows: usize, cols: usize, std: Real) -> Matrix {
    Matrix::from_vec(rows, cols, rng.normal_vec(rows * cols, std)).expect("sized draw")
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let tw = cfg.token_width();
        let d = cfg.d_model();
        let input_w = normal_matrix(rng, d, tw, 1.0 / (tw as Real).sqrt());
        let input_b = vec![0.0; d];
        let mut blocks = Vec::with_capacity(cfg.blocks.len());
        for b in &cfg.blocks {
            let layer = match b.layer_kind {
                LayerKind::Srwm => LayerParams::Srwm(SrwmParams::init(&srwm_cfg(b), rng)),
                LayerKind::FakeSr => LayerParams::FakeSr(SrwmParams::init(&srwm_cfg(b), rng)),
                LayerKind::DeltaNet => {
                    LayerParams::Delta(DeltaNetParams::init(&delta_cfg(b), rng))
                }
                LayerKind::SrDelta => {
                    LayerParams::SrDelta(SrDeltaParams::init(&sr_delta_cfg(b), rng))
                }
            };
            blocks.push(BlockParams {
                layer,
                norm1_gain: vec![1.0; d],
                norm1_bias: vec![0.0; d],
                norm2_gain: vec![1.0; d],
                norm2_bias: vec![0.0; d],
                ff_w1: normal_matrix(rng, b.d_ff, d, 1.0 / (d as Real).sqrt()),
                ff_b1: vec![0.0; b.d_ff],
                ff_w2: normal_matrix(rng, d, b.d_ff, 1.0 / (b.d_ff as Real).sqrt()),
                ff_b2: vec![0.0; d],
            });
        }
        let head_w = normal_matrix(rng, cfg.num_classes, d, 1.0 / (d as Real).sqrt());
        let head_b = vec![0.0; cfg.num_classes];
        Ok(ModelParams { input_w, input_b, blocks, head_w, head_b })
    }

    pub fn zeros_like(&self) -> ModelParams {
        let mut z = self.clone();
        for (_, slice) in z.param_groups_mut() {
            slice.fill(0.0);
        }
        z
    }

    /// Named parameter groups in fixed declaration order; the order defines
    /// the Adam moment layout and the checkpoint payload.
    pub fn param_groups(&self) -> Vec<(String, &[Real])> {
        let mut g: Vec<(String, &[Real])> = Vec::new();
        g.push(("input_w".into(), self.input_w.data()));
        g.push(("input_b".into(), &self.input_b));
        for (i, b) in self.blocks.iter().enumerate() {
            match &b.layer {
                LayerParams::Srwm(p) | LayerParams::FakeSr(p) => {
                    for (h, w) in p.w0.iter().enumerate() {
                        g.push((format!("block{i}.w0.h{h}"), w.data()));
                    }
                }
                LayerParams::Delta(p) => {
                    g.push((format!("block{i}.w_slow"), p.w_slow.data()));
                }
                LayerParams::SrDelta(p) => {
                    g.push((format!("block{i}.srwm_w0"), p.srwm.w0[0].data()));
                }
            }
            g.push((format!("block{i}.norm1_gain"), &b.norm1_gain));
            g.push((format!("block{i}.norm1_bias"), &b.norm1_bias));
            g.push((format!("block{i}.ff_w1"), b.ff_w1.data()));
            g.push((format!("block{i}.ff_b1"), &b.ff_b1));
            g.push((format!("block{i}.ff_w2"), b.ff_w2.data()));
            g.push((format!("block{i}.ff_b2"), &b.ff_b2));
            g.push((format!("block{i}.norm2_gain"), &b.norm2_gain));
            g.push((format!("block{i}.norm2_bias"), &b.norm2_bias));
        }
        g.push(("head_w".into(), self.head_w.data()));
        g.push(("head_b".into(), &self.head_b));
        g
    }

    pub fn param_groups_mut(&mut self) -> Vec<(String, &mut [Real])> {
        let mut g: Vec<(String, &mut [Real])> = Vec::new();
        g.push(("input_w".into(), self.input_w.data_mut()));
        g.push(("input_b".into(), self.input_b.as_mut_slice()));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            match &mut b.layer {
                LayerParams::Srwm(p) | LayerParams::FakeSr(p) => {
                    for (h, w) in p.w0.iter_mut().enumerate() {
                        g.push((format!("block{i}.w0.h{h}"), w.data_mut()));
                    }
                }
                LayerParams::Delta(p) => {
                    g.push((format!("block{i}.w_slow"), p.w_slow.data_mut()));
                }
                LayerParams::SrDelta(p) => {
                    g.push((format!("block{i}.srwm_w0"), p.srwm.w0[0].data_mut()));
                }
            }
            g.push((format!("block{i}.norm1_gain"), b.norm1_gain.as_mut_slice()));
            g.push((format!("block{i}.norm1_bias"), b.norm1_bias.as_mut_slice()));
            g.push((format!("block{i}.ff_w1"), b.ff_w1.data_mut()));
            g.push((format!("block{i}.ff_b1"), b.ff_b1.as_mut_slice()));
            g.push((format!("block{i}.ff_w2"), b.ff_w2.data_mut()));
            g.push((format!("block{i}.ff_b2"), b.ff_b2.as_mut_slice()));
            g.push((format!("block{i}.norm2_gain"), b.norm2_gain.as_mut_slice()));
            g.push((format!("block{i}.norm2_bias"), b.norm2_bias.as_mut_slice()));
        }
        g.push(("head_w".into(), self.head_w.data_mut()));
        g.push(("head_b".into(), self.head_b.as_mut_slice()));
        g
    }

    pub fn num_params(&self) -> usize {
        self.param_groups().iter().map(|(_, s)| s.len()).sum()
    }

    /// self += s · other, group by group.
    pub fn axpy(&mut self, s: Real, other: &ModelParams) {
        let other_groups = other.param_groups();
        for ((_, dst), (_, src)) in self.param_groups_mut().into_iter().zip(other_groups) {
            for (d, v) in dst.iter_mut().zip(src.iter()) {
                *d += s * v;
            }
        }
    }
}

// ── State ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum LayerState {
    Srwm(SrwmState),
    Delta(DeltaNetState),
    Stateless,
    SrDelta(SrDeltaState),
}

/// Per-block layer states; reset restores every block to its initial state
/// exactly (SRWM back to W_0, fast memories back to zero).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub layers: Vec<LayerState>,
}

impl ModelState {
    pub fn fresh(cfg: &ModelConfig, params: &ModelParams) -> Self {
        let layers = cfg
            .blocks
            .iter()
            .zip(params.blocks.iter())
            .map(|(b, bp)| match (&bp.layer, b.layer_kind) {
                (LayerParams::Srwm(p), _) => LayerState::Srwm(SrwmState::fresh(p)),
                (LayerParams::FakeSr(_), _) => LayerState::Stateless,
                (LayerParams::Delta(_), _) => LayerState::Delta(DeltaNetState::fresh(&delta_cfg(b))),
                (LayerParams::SrDelta(p), _) => {
                    LayerState::SrDelta(SrDeltaState::fresh(&sr_delta_cfg(b), p))
                }
            })
            .collect();
        ModelState { layers }
    }

    pub fn reset(&mut self, cfg: &ModelConfig, params: &ModelParams) {
        *self = ModelState::fresh(cfg, params);
    }
}

// ── Forward / backward ───────────────────────────────────────────────

#[derive(Debug, Clone)]
pub enum LayerTrace {
    Srwm(SrwmTrace),
    Delta(DeltaTrace),
    FakeSr(FakeSrTrace),
    SrDelta(SrDeltaTrace),
}

#[derive(Debug, Clone)]
struct BlockStepTrace {
    xhat1: Vec<Real>,
    inv_std1: Real,
    mask1: Option<Vec<Real>>,
    xhat2: Vec<Real>,
    inv_std2: Real,
    h1: Vec<Real>,
    ff_in: Vec<Real>,
    mask2: Option<Vec<Real>>,
}

#[derive(Debug, Clone)]
struct BlockTrace {
    steps: Vec<BlockStepTrace>,
    layer: LayerTrace,
}

#[derive(Debug, Clone)]
pub struct ModelTrace {
    tokens: Vec<Vec<Real>>,
    blocks: Vec<BlockTrace>,
    final_z: Vec<Vec<Real>>,
}

pub struct TrainCtx<'a> {
    pub dropout_rng: &'a mut Rng,
}

pub struct ModelForwardOut {
    pub logits: Vec<Vec<Real>>,
    pub state: ModelState,
    pub trace: Option<ModelTrace>,
}

fn layer_forward(
    b: &BlockConfig,
    params: &LayerParams,
    state: LayerState,
    xs: &[Vec<Real>],
) -> Result<(Vec<Vec<Real>>, LayerState, LayerTrace)> {
    match (params, state) {
        (LayerParams::Srwm(p), LayerState::Srwm(s)) => {
            let out = srwm_forward(&srwm_cfg(b), p, xs, Some(s), false)?;
            Ok((out.ys, LayerState::Srwm(out.state), LayerTrace::Srwm(out.trace)))
        }
        (LayerParams::FakeSr(p), LayerState::Stateless) => {
            let (ys, trace) = fake_sr_forward(&srwm_cfg(b), p, xs)?;
            Ok((ys, LayerState::Stateless, LayerTrace::FakeSr(trace)))
        }
        (LayerParams::Delta(p), LayerState::Delta(s)) => {
            let out = delta_forward(&delta_cfg(b), p, xs, Some(s), false)?;
            Ok((out.ys, LayerState::Delta(out.state), LayerTrace::Delta(out.trace)))
        }
        (LayerParams::SrDelta(p), LayerState::SrDelta(s)) => {
            let out = sr_delta_forward(&sr_delta_cfg(b), p, xs, Some(s), false)?;
            Ok((out.ys, LayerState::SrDelta(out.state), LayerTrace::SrDelta(out.trace)))
        }
        _ => Err(Error::Config("layer params and state kinds disagree".into())),
    }
}

fn layer_backward(
    b: &BlockConfig,
    params: &LayerParams,
    trace: &LayerTrace,
    grad_ys: &[Vec<Real>],
) -> Result<(Vec<Vec<Real>>, LayerParams)> {
    match (params, trace) {
        (LayerParams::Srwm(_), LayerTrace::Srwm(tr)) => {
            let back = srwm_backward(&srwm_cfg(b), tr, grad_ys, None)?;
            Ok((back.grad_xs, LayerParams::Srwm(SrwmParams { w0: back.grad_w0 })))
        }
        (LayerParams::FakeSr(p), LayerTrace::FakeSr(tr)) => {
            let back = fake_sr_backward(&srwm_cfg(b), p, tr, grad_ys)?;
            Ok((back.grad_xs, LayerParams::FakeSr(SrwmParams { w0: back.grad_w0 })))
        }
        (LayerParams::Delta(p), LayerTrace::Delta(tr)) => {
            let back = delta_backward(&delta_cfg(b), p, tr, grad_ys, None)?;
            Ok((back.grad_xs, LayerParams::Delta(DeltaNetParams { w_slow: back.grad_w_slow })))
        }
        (LayerParams::SrDelta(_), LayerTrace::SrDelta(tr)) => {
            let back = sr_delta_backward(&sr_delta_cfg(b), tr, grad_ys, None, None)?;
            Ok((
                back.grad_xs,
                LayerParams::SrDelta(SrDeltaParams { srwm: SrwmParams { w0: back.grad_w0 } }),
            ))
        }
        _ => Err(Error::Config("layer params and trace kinds disagree".into())),
    }
}

fn dropout_mask(rng: &mut Rng, n: usize, p: Real) -> Vec<Real> {
    let keep = 1.0 / (1.0 - p);
    (0..n).map(|_| if rng.uniform() < p { 0.0 } else { keep }).collect()
}

/// Runs the block stack over a token sequence. `state` of `None` starts a
/// fresh episode. Passing a `TrainCtx` enables dropout and trace recording.
pub fn model_forward(
    cfg: &ModelConfig,
    params: &ModelParams,
    state: Option<ModelState>,
    tokens: &[Vec<Real>],
    mut train: Option<TrainCtx>,
) -> Result<ModelForwardOut> {
    let tw = cfg.token_width();
    for (t, tok) in tokens.iter().enumerate() {
        if tok.len() != tw {
            return Err(Error::Shape {
                op: "model_forward",
                detail: format!("token {t} width {} vs input projection {tw}", tok.len()),
            });
        }
    }
    if params.blocks.len() != cfg.blocks.len() {
        return Err(Error::Shape {
            op: "model_forward",
            detail: format!("{} param blocks vs {} config blocks", params.blocks.len(), cfg.blocks.len()),
        });
    }
    for (i, (b, bp)) in cfg.blocks.iter().zip(params.blocks.iter()).enumerate() {
        let matches = matches!(
            (b.layer_kind, &bp.layer),
            (LayerKind::Srwm, LayerParams::Srwm(_))
                | (LayerKind::FakeSr, LayerParams::FakeSr(_))
                | (LayerKind::DeltaNet, LayerParams::Delta(_))
                | (LayerKind::SrDelta, LayerParams::SrDelta(_))
        );
        if !matches {
            return Err(Error::Config(format!(
                "block {i}: parameter kind does not match configured layer kind {}",
                b.layer_kind.name()
            )));
        }
    }
    let d = cfg.d_model();
    let state = state.unwrap_or_else(|| ModelState::fresh(cfg, params));
    let record = train.is_some();

    // Input projection.
    let mut stream: Vec<Vec<Real>> = tokens
        .iter()
        .map(|tok| {
            let mut x = vec![0.0; d];
            params.input_w.matvec_into(tok, &mut x);
            for (xi, bi) in x.iter_mut().zip(params.input_b.iter()) {
                *xi += bi;
            }
            x
        })
        .collect();

    let mut block_traces: Vec<BlockTrace> = Vec::new();
    let mut new_states: Vec<LayerState> = Vec::new();

    for (bi, (bcfg, bp)) in cfg.blocks.iter().zip(params.blocks.iter()).enumerate() {
        let layer_state = state.layers[bi].clone();
        match bcfg.norm_placement {
            NormPlacement::Pre => {
                // a = LN1(x); u = layer(a); r = x + drop(u);
                // f = FF(LN2(r)); out = r + drop(f).
                let mut ln1: Vec<(Vec<Real>, (Vec<Real>, Real))> = Vec::with_capacity(stream.len());
                for x in &stream {
                    ln1.push(layer_norm_fwd(x, &bp.norm1_gain, &bp.norm1_bias, LN_EPS));
                }
                let a_seq: Vec<Vec<Real>> = ln1.iter().map(|(a, _)| a.clone()).collect();
                let (u_seq, next_state, layer_trace) =
                    layer_forward(bcfg, &bp.layer, layer_state, &a_seq)?;
                new_states.push(next_state);

                let mut steps: Vec<BlockStepTrace> = Vec::with_capacity(stream.len());
                for (t, x) in stream.iter_mut().enumerate() {
                    let mask1 = match (&mut train, bcfg.dropout_p > 0.0) {
                        (Some(ctx), true) => Some(dropout_mask(ctx.dropout_rng, d, bcfg.dropout_p)),
                        _ => None,
                    };
                    for i in 0..d {
                        let scaled = match &mask1 {
                            Some(m) => u_seq[t][i] * m[i],
                            None => u_seq[t][i],
                        };
                        x[i] += scaled;
                    }
                    let (b_vec, (xhat2, inv_std2)) =
                        layer_norm_fwd(x, &bp.norm2_gain, &bp.norm2_bias, LN_EPS);
                    let mut h1 = vec![0.0; bcfg.d_ff];
                    bp.ff_w1.matvec_into(&b_vec, &mut h1);
                    for (h, b1) in h1.iter_mut().zip(bp.ff_b1.iter()) {
                        *h = relu(*h + b1);
                    }
                    let mut f = vec![0.0; d];
                    bp.ff_w2.matvec_into(&h1, &mut f);
                    for (fi, b2) in f.iter_mut().zip(bp.ff_b2.iter()) {
                        *fi += b2;
                    }
                    let mask2 = match (&mut train, bcfg.dropout_p > 0.0) {
                        (Some(ctx), true) => Some(dropout_mask(ctx.dropout_rng, d, bcfg.dropout_p)),
                        _ => None,
                    };
                    for i in 0..d {
                        let scaled = match &mask2 {
                            Some(m) => f[i] * m[i],
                            None => f[i],
                        };
                        x[i] += scaled;
                    }
                    if record {
                        steps.push(BlockStepTrace {
                            xhat1: ln1[t].1 .0.clone(),
                            inv_std1: ln1[t].1 .1,
                            mask1,
                            xhat2,
                            inv_std2,
                            h1,
                            ff_in: b_vec,
                            mask2,
                        });
                    }
                }
                if record {
                    block_traces.push(BlockTrace { steps, layer: layer_trace });
                }
            }
            NormPlacement::Post => {
                // u = layer(x); r = LN1(x + drop(u)); f = FF(r);
                // out = LN2(r + drop(f)).
                let (u_seq, next_state, layer_trace) =
                    layer_forward(bcfg, &bp.layer, layer_state, &stream)?;
                new_states.push(next_state);

                let mut steps: Vec<BlockStepTrace> = Vec::with_capacity(stream.len());
                for (t, x) in stream.iter_mut().enumerate() {
                    let mask1 = match (&mut train, bcfg.dropout_p > 0.0) {
                        (Some(ctx), true) => Some(dropout_mask(ctx.dropout_rng, d, bcfg.dropout_p)),
                        _ => None,
                    };
                    for i in 0..d {
                        let scaled = match &mask1 {
                            Some(m) => u_seq[t][i] * m[i],
                            None => u_seq[t][i],
                        };
                        x[i] += scaled;
                    }
                    let (r, (xhat1, inv_std1)) =
                        layer_norm_fwd(x, &bp.norm1_gain, &bp.norm1_bias, LN_EPS);
                    let mut h1 = vec![0.0; bcfg.d_ff];
                    bp.ff_w1.matvec_into(&r, &mut h1);
                    for (h, b1) in h1.iter_mut().zip(bp.ff_b1.iter()) {
                        *h = relu(*h + b1);
                    }
                    let mut f = vec![0.0; d];
                    bp.ff_w2.matvec_into(&h1, &mut f);
                    for (fi, b2) in f.iter_mut().zip(bp.ff_b2.iter()) {
                        *fi += b2;
                    }
                    let mask2 = match (&mut train, bcfg.dropout_p > 0.0) {
                        (Some(ctx), true) => Some(dropout_mask(ctx.dropout_rng, d, bcfg.dropout_p)),
                        _ => None,
                    };
                    let mut s = r.clone();
                    for i in 0..d {
                        let scaled = match &mask2 {
                            Some(m) => f[i] * m[i],
                            None => f[i],
                        };
                        s[i] += scaled;
                    }
                    let (out, (xhat2, inv_std2)) =
                        layer_norm_fwd(&s, &bp.norm2_gain, &bp.norm2_bias, LN_EPS);
                    *x = out;
                    if record {
                        steps.push(BlockStepTrace {
                            xhat1,
                            inv_std1,
                            mask1,
                            xhat2,
                            inv_std2,
                            h1,
                            ff_in: r,
                            mask2,
                        });
                    }
                }
                if record {
                    block_traces.push(BlockTrace { steps, layer: layer_trace });
                }
            }
        }
    }

    // Classifier head.
    let logits: Vec<Vec<Real>> = stream
        .iter()
        .map(|z| {
            let mut l = vec![0.0; cfg.num_classes];
            params.head_w.matvec_into(z, &mut l);
            for (li, b) in l.iter_mut().zip(params.head_b.iter()) {
                *li += b;
            }
            l
        })
        .collect();

    let trace = record.then(|| ModelTrace {
        tokens: tokens.to_vec(),
        blocks: block_traces,
        final_z: stream,
    });
    Ok(ModelForwardOut { logits, state: ModelState { layers: new_states }, trace })
}

/// Exact backward through a traced forward; returns parameter gradients
/// shaped like `ModelParams`.
pub fn model_backward(
    cfg: &ModelConfig,
    params: &ModelParams,
    trace: &ModelTrace,
    grad_logits: &[Vec<Real>],
) -> Result<ModelParams> {
    let steps = trace.tokens.len();
    if grad_logits.len() != steps {
        return Err(Error::Shape {
            op: "model_backward",
            detail: format!("{} logit grads vs {} traced steps", grad_logits.len(), steps),
        });
    }
    let d = cfg.d_model();
    let mut grads = params.zeros_like();

    // Head.
    let mut g_stream: Vec<Vec<Real>> = vec![vec![0.0; d]; steps];
    for t in 0..steps {
        let gl = &grad_logits[t];
        grads.head_w.add_scaled_outer(1.0, gl, &trace.final_z[t]);
        for (gb, g) in grads.head_b.iter_mut().zip(gl.iter()) {
            *gb += g;
        }
        params.head_w.matvec_t_into(gl, &mut g_stream[t]);
    }

    // Blocks in reverse.
    for bi in (0..cfg.blocks.len()).rev() {
        let bcfg = &cfg.blocks[bi];
        let bp = &params.blocks[bi];
        let btr = &trace.blocks[bi];
        let gb = &mut grads.blocks[bi];

        match bcfg.norm_placement {
            NormPlacement::Pre => {
                let mut g_u: Vec<Vec<Real>> = Vec::with_capacity(steps);
                let mut g_r: Vec<Vec<Real>> = Vec::with_capacity(steps);
                for t in 0..steps {
                    let st = &btr.steps[t];
                    let g_out = &g_stream[t];
                    // out = r + drop(f): feedforward branch.
                    let g_f: Vec<Real> = match &st.mask2 {
                        Some(m) => g_out.iter().zip(m.iter()).map(|(g, mv)| g * mv).collect(),
                        None => g_out.clone(),
                    };
                    for (gb2, g) in gb.ff_b2.iter_mut().zip(g_f.iter()) {
                        *gb2 += g;
                    }
                    gb.ff_w2.add_scaled_outer(1.0, &g_f, &st.h1);
                    let mut g_h1 = vec![0.0; bcfg.d_ff];
                    bp.ff_w2.matvec_t_into(&g_f, &mut g_h1);
                    for (g, h) in g_h1.iter_mut().zip(st.h1.iter()) {
                        if *h <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    for (gb1, g) in gb.ff_b1.iter_mut().zip(g_h1.iter()) {
                        *gb1 += g;
                    }
                    gb.ff_w1.add_scaled_outer(1.0, &g_h1, &st.ff_in);
                    let mut g_b = vec![0.0; d];
                    bp.ff_w1.matvec_t_into(&g_h1, &mut g_b);
                    let g_r_ln = layer_norm_bwd(
                        &g_b,
                        &bp.norm2_gain,
                        &st.xhat2,
                        st.inv_std2,
                        &mut gb.norm2_gain,
                        &mut gb.norm2_bias,
                    );
                    let mut g_r_t = g_out.clone();
                    for (a, b) in g_r_t.iter_mut().zip(g_r_ln.iter()) {
                        *a += b;
                    }
                    // r = x + drop(u).
                    let g_u_t: Vec<Real> = match &st.mask1 {
                        Some(m) => g_r_t.iter().zip(m.iter()).map(|(g, mv)| g * mv).collect(),
                        None => g_r_t.clone(),
                    };
                    g_u.push(g_u_t);
                    g_r.push(g_r_t);
                }
                let (g_a, layer_grads) = layer_backward(bcfg, &bp.layer, &btr.layer, &g_u)?;
                accumulate_layer_grads(&mut gb.layer, &layer_grads);
                for t in 0..steps {
                    let st = &btr.steps[t];
                    let g_x_ln = layer_norm_bwd(
                        &g_a[t],
                        &bp.norm1_gain,
                        &st.xhat1,
                        st.inv_std1,
                        &mut gb.norm1_gain,
                        &mut gb.norm1_bias,
                    );
                    for i in 0..d {
                        g_stream[t][i] = g_r[t][i] + g_x_ln[i];
                    }
                }
            }
            NormPlacement::Post => {
                let mut g_u: Vec<Vec<Real>> = Vec::with_capacity(steps);
                for t in 0..steps {
                    let st = &btr.steps[t];
                    let g_out = &g_stream[t];
                    // out = LN2(r + drop(f)).
                    let g_s = layer_norm_bwd(
                        g_out,
                        &bp.norm2_gain,
                        &st.xhat2,
                        st.inv_std2,
                        &mut gb.norm2_gain,
                        &mut gb.norm2_bias,
                    );
                    let g_f: Vec<Real> = match &st.mask2 {
                        Some(m) => g_s.iter().zip(m.iter()).map(|(g, mv)| g * mv).collect(),
                        None => g_s.clone(),
                    };
                    for (gb2, g) in gb.ff_b2.iter_mut().zip(g_f.iter()) {
                        *gb2 += g;
                    }
                    gb.ff_w2.add_scaled_outer(1.0, &g_f, &st.h1);
                    let mut g_h1 = vec![0.0; bcfg.d_ff];
                    bp.ff_w2.matvec_t_into(&g_f, &mut g_h1);
                    for (g, h) in g_h1.iter_mut().zip(st.h1.iter()) {
                        if *h <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    for (gb1, g) in gb.ff_b1.iter_mut().zip(g_h1.iter()) {
                        *gb1 += g;
                    }
                    gb.ff_w1.add_scaled_outer(1.0, &g_h1, &st.ff_in);
                    let mut g_r = g_s.clone();
                    let mut g_r_ff = vec![0.0; d];
                    bp.ff_w1.matvec_t_into(&g_h1, &mut g_r_ff);
                    for (a, b) in g_r.iter_mut().zip(g_r_ff.iter()) {
                        *a += b;
                    }
                    // r = LN1(x + drop(u)).
                    let g_z = layer_norm_bwd(
                        &g_r,
                        &bp.norm1_gain,
                        &st.xhat1,
                        st.inv_std1,
                        &mut gb.norm1_gain,
                        &mut gb.norm1_bias,
                    );
                    let g_u_t: Vec<Real> = match &st.mask1 {
                        Some(m) => g_z.iter().zip(m.iter()).map(|(g, mv)| g * mv).collect(),
                        None => g_z.clone(),
                    };
                    g_stream[t] = g_z;
                    g_u.push(g_u_t);
                }
                let (g_layer_in, layer_grads) = layer_backward(bcfg, &bp.layer, &btr.layer, &g_u)?;
                accumulate_layer_grads(&mut gb.layer, &layer_grads);
                for t in 0..steps {
                    for i in 0..d {
                        g_stream[t][i] += g_layer_in[t][i];
                    }
                }
            }
        }
    }

    // Input projection.
    for t in 0..steps {
        grads.input_w.add_scaled_outer(1.0, &g_stream[t], &trace.tokens[t]);
        for (gb, g) in grads.input_b.iter_mut().zip(g_stream[t].iter()) {
            *gb += g;
        }
    }
    Ok(grads)
}

fn accumulate_layer_grads(dst: &mut LayerParams, src: &LayerParams) {
    match (dst, src) {
        (LayerParams::Srwm(d), LayerParams::Srwm(s))
        | (LayerParams::FakeSr(d), LayerParams::FakeSr(s)) => {
            for (dw, sw) in d.w0.iter_mut().zip(s.w0.iter()) {
                dw.add_assign(sw);
            }
        }
        (LayerParams::Delta(d), LayerParams::Delta(s)) => {
            d.w_slow.add_assign(&s.w_slow);
        }
        (LayerParams::SrDelta(d), LayerParams::SrDelta(s)) => {
            for (dw, sw) in d.srwm.w0.iter_mut().zip(s.srwm.w0.iter()) {
                dw.add_assign(sw);
            }
        }
        _ => unreachable!("layer grad kinds always match their params"),
    }
}

/// Mean σ(β) over every learning rate the layers applied during a traced
/// forward, per block. Blocks without a β signal (Fake-SR) report None.
pub fn mean_sigma_beta(trace: &ModelTrace) -> Vec<Option<Real>> {
    use crate::numerics::sigmoid;
    trace
        .blocks
        .iter()
        .map(|b| match &b.layer {
            LayerTrace::Srwm(tr) => {
                let mut sum = 0.0;
                let mut n = 0usize;
                for step in &tr.steps {
                    for head in step {
                        for beta in &head.beta_raw {
                            sum += sigmoid(*beta);
                            n += 1;
                        }
                    }
                }
                (n > 0).then(|| sum / n as Real)
            }
            LayerTrace::Delta(tr) => {
                let steps = tr.steps();
                let n = steps.len();
                (n > 0).then(|| {
                    steps.iter().map(|s| sigmoid(s.beta_raw)).sum::<Real>() / n as Real
                })
            }
            LayerTrace::SrDelta(tr) => {
                let mut sum = 0.0;
                let mut n = 0usize;
                for step in &tr.srwm.steps {
                    for head in step {
                        for beta in &head.beta_raw {
                            sum += sigmoid(*beta);
                            n += 1;
                        }
                    }
                }
                for step in tr.delta_steps() {
                    sum += sigmoid(step.beta_raw);
                    n += 1;
                }
                (n > 0).then(|| sum / n as Real)
            }
            LayerTrace::FakeSr(_) => None,
        })
        .collect()
}

/// Raw σ(β) samples per block and per β component, across all traced steps
/// and heads. Blocks without a β signal report None. SR-DeltaNet blocks
/// list their SRWM components first, then the fast-memory component.
pub fn sigma_beta_samples(trace: &ModelTrace) -> Vec<Option<Vec<Vec<Real>>>> {
    use crate::numerics::sigmoid;
    trace
        .blocks
        .iter()
        .map(|b| match &b.layer {
            LayerTrace::Srwm(tr) => {
                let lr = tr.steps.first().map_or(0, |s| s[0].beta_raw.len());
                let mut comps = vec![Vec::new(); lr];
                for step in &tr.steps {
                    for head in step {
                        for (c, beta) in head.beta_raw.iter().enumerate() {
                            comps[c].push(sigmoid(*beta));
                        }
                    }
                }
                Some(comps)
            }
            LayerTrace::Delta(tr) => {
                let comps = vec![tr.steps().iter().map(|s| sigmoid(s.beta_raw)).collect()];
                Some(comps)
            }
            LayerTrace::SrDelta(tr) => {
                let lr = tr.srwm.steps.first().map_or(0, |s| s[0].beta_raw.len());
                let mut comps = vec![Vec::new(); lr + 1];
                for step in &tr.srwm.steps {
                    for head in step {
                        for (c, beta) in head.beta_raw.iter().enumerate() {
                            comps[c].push(sigmoid(*beta));
                        }
                    }
                }
                for step in tr.delta_steps() {
                    comps[lr].push(sigmoid(step.beta_raw));
                }
                Some(comps)
            }
            LayerTrace::FakeSr(_) => None,
        })
        .collect()
}
