//! SR-DeltaNet: a DeltaNet whose slow projection matrix is itself an SRWM.
//!
//! The SRWM's y-output is sized to the DeltaNet projection layout
//! [k | v | q | β] (d_out + 2·d_key + 1 rows), so the self-referential
//! matrix both generates the fast-memory programming signals and keeps
//! rewriting itself. Because that projection width is not configurable,
//! the SRWM side runs single-head; the fast memory keeps its own heads.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};

use super::delta::{fast_mem_backward, fast_mem_step, FastDims, FastMemTrace};
use super::srwm::{srwm_backward, srwm_step, SrwmParams, SrwmState, SrwmTrace};
use super::{DeltaNetState, DeltaStepTrace, InputActivation, LrMode, SrwmConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SrDeltaConfig {
    pub d_in: usize,
    /// Fast-memory output width.
    pub d_out: usize,
    pub d_key: usize,
    /// Heads of the fast memory; the SRWM projector is always single-head.
    pub num_heads: usize,
    pub lr_mode: LrMode,
    pub input_activation: InputActivation,
}

impl SrDeltaConfig {
    pub(super) fn fast(&self) -> FastDims {
        FastDims { d_key: self.d_key, d_out: self.d_out, num_heads: self.num_heads }
    }

    /// The projector: d_in → d_out + 2·d_key + 1, single head.
    pub fn srwm_config(&self) -> SrwmConfig {
        SrwmConfig {
            d_in: self.d_in,
            d_out: self.fast().proj_rows(),
            num_heads: 1,
            lr_mode: self.lr_mode,
            input_activation: self.input_activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fast().validate()?;
        self.srwm_config().validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrDeltaParams {
    pub srwm: SrwmParams,
}

impl SrDeltaParams {
    pub fn init(cfg: &SrDeltaConfig, rng: &mut crate::numerics::Rng) -> Self {
        SrDeltaParams { srwm: SrwmParams::init(&cfg.srwm_config(), rng) }
    }

    pub fn validate(&self, cfg: &SrDeltaConfig) -> Result<()> {
        cfg.validate()?;
        self.srwm.validate(&cfg.srwm_config())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrDeltaState {
    pub srwm: SrwmState,
    pub delta: DeltaNetState,
}

impl SrDeltaState {
    pub fn fresh(cfg: &SrDeltaConfig, params: &SrDeltaParams) -> Self {
        SrDeltaState {
            srwm: SrwmState::fresh(&params.srwm),
            delta: DeltaNetState::fresh_dims(&cfg.fast()),
        }
    }

    pub fn reset(&mut self, params: &SrDeltaParams) {
        self.srwm.reset(&params.srwm);
        self.delta.reset();
    }
}

#[derive(Debug, Clone)]
pub struct SrDeltaTrace {
    pub srwm: SrwmTrace,
    pub(super) fast: FastMemTrace,
}

impl SrDeltaTrace {
    pub fn delta_steps(&self) -> &[DeltaStepTrace] {
        &self.fast.steps
    }
}

/// One composed step: the SRWM projects (and rewrites itself), the fast
/// memory consumes the projection (and rewrites itself).
pub fn sr_delta_step(
    cfg: &SrDeltaConfig,
    state: &mut SrDeltaState,
    x: &[Real],
) -> Result<(Vec<Real>, super::SrwmStepTrace, DeltaStepTrace)> {
    let scfg = cfg.srwm_config();
    let (proj, mut srwm_heads) = srwm_step(&scfg, &mut state.srwm, x)?;
    let (y, delta_tr) = fast_mem_step(&cfg.fast(), &mut state.delta, &proj)?;
    Ok((y, srwm_heads.pop().expect("single-head projector"), delta_tr))
}

pub struct SrDeltaForwardOut {
    pub ys: Vec<Vec<Real>>,
    pub state: SrDeltaState,
    pub trace: SrDeltaTrace,
}

pub fn sr_delta_forward(
    cfg: &SrDeltaConfig,
    params: &SrDeltaParams,
    xs: &[Vec<Real>],
    initial: Option<SrDeltaState>,
    record_states: bool,
) -> Result<SrDeltaForwardOut> {
    params.validate(cfg)?;
    let mut state = initial.unwrap_or_else(|| SrDeltaState::fresh(cfg, params));
    let srwm_start = state.srwm.step_count;
    let mut srwm_states = record_states.then(|| vec![state.srwm.w.clone()]);
    let mut fast_states = record_states.then(|| vec![state.delta.w.clone()]);
    let mut ys = Vec::with_capacity(xs.len());
    let mut srwm_steps = Vec::with_capacity(xs.len());
    let mut fast_steps = Vec::with_capacity(xs.len());
    for x in xs {
        let (y, s_tr, d_tr) = sr_delta_step(cfg, &mut state, x)?;
        ys.push(y);
        srwm_steps.push(vec![s_tr]);
        fast_steps.push(d_tr);
        if let Some(s) = srwm_states.as_mut() {
            s.push(state.srwm.w.clone());
        }
        if let Some(s) = fast_states.as_mut() {
            s.push(state.delta.w.clone());
        }
    }
    let trace = SrDeltaTrace {
        srwm: SrwmTrace {
            steps: srwm_steps,
            final_w: state.srwm.w.clone(),
            full_states: srwm_states,
            start_step: srwm_start,
        },
        fast: FastMemTrace {
            steps: fast_steps,
            final_w: state.delta.w.clone(),
            full_states: fast_states,
        },
    };
    Ok(SrDeltaForwardOut { ys, state, trace })
}

pub struct SrDeltaBackwardOut {
    pub grad_xs: Vec<Vec<Real>>,
    /// Adjoint of the segment-initial SRWM matrix (the only trained
    /// parameter of the composed layer).
    pub grad_w0: Vec<Matrix>,
}

pub fn sr_delta_backward(
    cfg: &SrDeltaConfig,
    trace: &SrDeltaTrace,
    grad_ys: &[Vec<Real>],
    grad_final_srwm: Option<&[Matrix]>,
    grad_final_fast: Option<&[Matrix]>,
) -> Result<SrDeltaBackwardOut> {
    if grad_ys.len() != trace.fast.steps.len() {
        return Err(Error::Shape {
            op: "sr_delta_backward",
            detail: format!(
                "{} output grads vs {} traced steps",
                grad_ys.len(),
                trace.fast.steps.len()
            ),
        });
    }
    let grad_projs = fast_mem_backward(&cfg.fast(), &trace.fast, grad_ys, grad_final_fast)?;
    let back = srwm_backward(&cfg.srwm_config(), &trace.srwm, &grad_projs, grad_final_srwm)?;
    Ok(SrDeltaBackwardOut { grad_xs: back.grad_xs, grad_w0: back.grad_w0 })
}
