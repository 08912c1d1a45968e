//! Self-referential weight matrix layer.
//!
//! Per head, one matrix W with row blocks [y | q | k | β] both produces the
//! layer output and rewrites itself:
//!
//! ```text
//! [y, q, k, β] = W_{t-1} φ(x_t)
//! v̄ = W_{t-1} φ(k)
//! v  = W_{t-1} φ(q)
//! W_t = W_{t-1} + σ(β)(v − v̄) ⊗ φ(k)
//! ```
//!
//! In `PerSubmatrix4` mode each of the four row blocks uses its own σ(β_b).
//! The initial value W_0 is the only gradient-trained parameter; y is read
//! from W_{t-1}, so the first output of a fresh layer depends on W_0 alone.
//!
//! The backward pass is an exact reverse sweep. It reconstructs W_{t-1} by
//! subtracting the stored rank-1 update from W_t (or reads stored states in
//! debug mode) and returns, besides input gradients, the adjoint of the
//! segment-initial matrix. Because the update is additive, a carried state
//! decomposes as W_0 plus a gradient-stopped delta, so that adjoint is the
//! W_0 gradient of every truncated-backprop span, not just of spans that
//! start an episode.

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, softmax, softmax_backward, Matrix, Real};

use super::{check_finite, check_guard, init_srwm_w0, InputActivation, LrMode, SrwmConfig};

/// Per-head initial matrices W_0; the layer's only trained parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SrwmParams {
    pub w0: Vec<Matrix>,
}

impl SrwmParams {
    pub fn init(cfg: &SrwmConfig, rng: &mut crate::numerics::Rng) -> Self {
        SrwmParams { w0: init_srwm_w0(cfg, rng) }
    }

    pub fn zeros(cfg: &SrwmConfig) -> Self {
        SrwmParams {
            w0: (0..cfg.num_heads)
                .map(|_| Matrix::zeros(cfg.rows_per_head(), cfg.head_in()))
                .collect(),
        }
    }

    pub fn validate(&self, cfg: &SrwmConfig) -> Result<()> {
        cfg.validate()?;
        if self.w0.len() != cfg.num_heads {
            return Err(Error::Shape {
                op: "srwm params",
                detail: format!("{} head matrices, expected {}", self.w0.len(), cfg.num_heads),
            });
        }
        for (h, w) in self.w0.iter().enumerate() {
            if w.rows() != cfg.rows_per_head() || w.cols() != cfg.head_in() {
                return Err(Error::Shape {
                    op: "srwm params",
                    detail: format!(
                        "head {h} is {}x{}, expected {}x{}",
                        w.rows(),
                        w.cols(),
                        cfg.rows_per_head(),
                        cfg.head_in()
                    ),
                });
            }
        }
        Ok(())
    }
}

/// The layer's only mutable state: the current per-head matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct SrwmState {
    pub w: Vec<Matrix>,
    pub step_count: u64,
}

impl SrwmState {
    /// Fresh episode state: W := W_0, bit-exact.
    pub fn fresh(params: &SrwmParams) -> Self {
        SrwmState { w: params.w0.clone(), step_count: 0 }
    }

    pub fn reset(&mut self, params: &SrwmParams) {
        self.w = params.w0.clone();
        self.step_count = 0;
    }
}

/// Everything the backward pass needs from one step of one head.
#[derive(Debug, Clone)]
pub struct SrwmStepTrace {
    pub phi_x: Vec<Real>,
    pub k_raw: Vec<Real>,
    pub q_raw: Vec<Real>,
    pub beta_raw: Vec<Real>,
    pub phi_k: Vec<Real>,
    pub phi_q: Vec<Real>,
    pub v: Vec<Real>,
    pub v_bar: Vec<Real>,
}

/// Trace of a forward segment: per-step per-head records plus the final
/// matrices the reverse replay starts from. `full_states` is the debug path
/// holding every intermediate W (index 0 = segment-initial value).
#[derive(Debug, Clone)]
pub struct SrwmTrace {
    pub steps: Vec<Vec<SrwmStepTrace>>,
    pub final_w: Vec<Matrix>,
    pub full_states: Option<Vec<Vec<Matrix>>>,
    pub start_step: u64,
}

/// One step: returns the concatenated head outputs and per-head traces,
/// advancing the state in place.
pub fn srwm_step(
    cfg: &SrwmConfig,
    state: &mut SrwmState,
    x: &[Real],
) -> Result<(Vec<Real>, Vec<SrwmStepTrace>)> {
    if x.len() != cfg.d_in {
        return Err(Error::Shape {
            op: "srwm_step",
            detail: format!("input length {} vs d_in {}", x.len(), cfg.d_in),
        });
    }
    if state.w.len() != cfg.num_heads {
        return Err(Error::Shape {
            op: "srwm_step",
            detail: format!("{} state heads vs {}", state.w.len(), cfg.num_heads),
        });
    }
    let d = cfg.head_in();
    let o = cfg.head_out();
    let rows = cfg.rows_per_head();
    let step = state.step_count;

    let mut y_out = vec![0.0; cfg.d_out];
    let mut traces = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let w = &mut state.w[h];
        let x_h = &x[h * d..(h + 1) * d];
        let phi_x = match cfg.input_activation {
            InputActivation::Identity => x_h.to_vec(),
            InputActivation::Softmax => softmax(x_h),
        };
        let mut proj = vec![0.0; rows];
        w.matvec_into(&phi_x, &mut proj);
        check_finite(&proj, step, h, "projection")?;

        let y = &proj[0..o];
        let q_raw = proj[o..o + d].to_vec();
        let k_raw = proj[o + d..o + 2 * d].to_vec();
        let beta_raw = proj[o + 2 * d..].to_vec();
        let phi_q = softmax(&q_raw);
        let phi_k = softmax(&k_raw);

        let mut v_bar = vec![0.0; rows];
        w.matvec_into(&phi_k, &mut v_bar);
        check_finite(&v_bar, step, h, "retrieved value")?;
        let mut v = vec![0.0; rows];
        w.matvec_into(&phi_q, &mut v);
        check_finite(&v, step, h, "target value")?;

        let sig: Vec<Real> = beta_raw.iter().map(|b| sigmoid(*b)).collect();
        for r in 0..rows {
            let b = match cfg.lr_mode {
                LrMode::Single => 0,
                LrMode::PerSubmatrix4 => cfg.block_of_row(r),
            };
            let rs = sig[b] * (v[r] - v_bar[r]);
            let row = w.row_mut(r);
            for (wv, pk) in row.iter_mut().zip(phi_k.iter()) {
                *wv += rs * pk;
            }
        }
        check_guard(w, step, h)?;

        y_out[h * o..(h + 1) * o].copy_from_slice(y);
        traces.push(SrwmStepTrace { phi_x, k_raw, q_raw, beta_raw, phi_k, phi_q, v, v_bar });
    }
    state.step_count += 1;
    Ok((y_out, traces))
}

pub struct SrwmForwardOut {
    pub ys: Vec<Vec<Real>>,
    pub state: SrwmState,
    pub trace: SrwmTrace,
}

/// Folds `srwm_step` over a sequence. `initial` of `None` starts a fresh
/// episode at W_0. `record_states` switches the trace to the debug path that
/// stores every intermediate matrix.
pub fn srwm_forward(
    cfg: &SrwmConfig,
    params: &SrwmParams,
    xs: &[Vec<Real>],
    initial: Option<SrwmState>,
    record_states: bool,
) -> Result<SrwmForwardOut> {
    params.validate(cfg)?;
    let mut state = initial.unwrap_or_else(|| SrwmState::fresh(params));
    let start_step = state.step_count;
    let mut full_states = record_states.then(|| vec![state.w.clone()]);
    let mut ys = Vec::with_capacity(xs.len());
    let mut steps = Vec::with_capacity(xs.len());
    for x in xs {
        let (y, tr) = srwm_step(cfg, &mut state, x)?;
        ys.push(y);
        steps.push(tr);
        if let Some(states) = full_states.as_mut() {
            states.push(state.w.clone());
        }
    }
    let trace = SrwmTrace { steps, final_w: state.w.clone(), full_states, start_step };
    Ok(SrwmForwardOut { ys, state, trace })
}

pub struct SrwmBackwardOut {
    /// dL/dx_t for every input of the segment.
    pub grad_xs: Vec<Vec<Real>>,
    /// Adjoint of the segment-initial matrices; the W_0 gradient of the
    /// segment (see module docs for the carried-state decomposition).
    pub grad_w0: Vec<Matrix>,
}

/// Exact reverse-mode sweep through a traced forward segment. `grad_final_w`
/// optionally injects a gradient on the segment-final matrices.
pub fn srwm_backward(
    cfg: &SrwmConfig,
    trace: &SrwmTrace,
    grad_ys: &[Vec<Real>],
    grad_final_w: Option<&[Matrix]>,
) -> Result<SrwmBackwardOut> {
    let steps = trace.steps.len();
    if grad_ys.len() != steps {
        return Err(Error::Shape {
            op: "srwm_backward",
            detail: format!("{} output grads vs {} traced steps", grad_ys.len(), steps),
        });
    }
    let d = cfg.head_in();
    let o = cfg.head_out();
    let lr = cfg.lr_count();
    let rows = cfg.rows_per_head();

    let mut grad_xs = vec![vec![0.0; cfg.d_in]; steps];
    let mut grad_w0 = Vec::with_capacity(cfg.num_heads);

    for h in 0..cfg.num_heads {
        let mut w_cur = trace.final_w[h].clone();
        let mut g = match grad_final_w {
            Some(gf) => gf[h].clone(),
            None => Matrix::zeros(rows, d),
        };

        // Scratch buffers reused across the sweep.
        let mut g_phik_vec = vec![0.0; rows];
        let mut g_u = vec![0.0; rows];
        let mut rs = vec![0.0; rows];
        let mut g_phik_upd = vec![0.0; d];
        let mut wt_gv = vec![0.0; d];
        let mut wt_gvbar = vec![0.0; d];
        let mut g_h = vec![0.0; rows];
        let mut g_phix = vec![0.0; d];

        for t in (0..steps).rev() {
            let tr = &trace.steps[t][h];
            let sig: Vec<Real> = tr.beta_raw.iter().map(|b| sigmoid(*b)).collect();
            for r in 0..rows {
                let b = match cfg.lr_mode {
                    LrMode::Single => 0,
                    LrMode::PerSubmatrix4 => cfg.block_of_row(r),
                };
                rs[r] = sig[b] * (tr.v[r] - tr.v_bar[r]);
            }

            // W_{t-1}: stored in debug mode, reconstructed otherwise.
            let w_prev: Matrix = match &trace.full_states {
                Some(states) => states[t][h].clone(),
                None => {
                    let mut wp = w_cur.clone();
                    wp.add_scaled_outer(-1.0, &rs, &tr.phi_k);
                    wp
                }
            };

            // Update pullback: uses the W_t adjoint before this step's read
            // contributions are added.
            g.matvec_into(&tr.phi_k, &mut g_phik_vec);
            let mut g_beta = vec![0.0; lr];
            for r in 0..rows {
                let b = match cfg.lr_mode {
                    LrMode::Single => 0,
                    LrMode::PerSubmatrix4 => cfg.block_of_row(r),
                };
                g_u[r] = sig[b] * g_phik_vec[r];
                g_beta[b] += (tr.v[r] - tr.v_bar[r]) * g_phik_vec[r];
            }
            for b in 0..lr {
                g_beta[b] *= sig[b] * (1.0 - sig[b]);
            }
            g.matvec_t_into(&rs, &mut g_phik_upd);

            // Value reads: v = W_{t-1} φ(q), v̄ = W_{t-1} φ(k).
            w_prev.matvec_t_into(&g_u, &mut wt_gv);
            let g_vbar: Vec<Real> = g_u.iter().map(|v| -v).collect();
            w_prev.matvec_t_into(&g_vbar, &mut wt_gvbar);

            let g_phiq = wt_gv.clone();
            let g_phik: Vec<Real> =
                g_phik_upd.iter().zip(wt_gvbar.iter()).map(|(a, b)| a + b).collect();
            let g_qraw = softmax_backward(&tr.phi_q, &g_phiq);
            let g_kraw = softmax_backward(&tr.phi_k, &g_phik);

            // Projection pullback through h = W_{t-1} φ(x).
            g_h[0..o].copy_from_slice(&grad_ys[t][h * o..(h + 1) * o]);
            g_h[o..o + d].copy_from_slice(&g_qraw);
            g_h[o + d..o + 2 * d].copy_from_slice(&g_kraw);
            g_h[o + 2 * d..].copy_from_slice(&g_beta);

            g.add_scaled_outer(1.0, &g_u, &tr.phi_q);
            g.add_scaled_outer(-1.0, &g_u, &tr.phi_k);
            g.add_scaled_outer(1.0, &g_h, &tr.phi_x);

            w_prev.matvec_t_into(&g_h, &mut g_phix);
            let g_x = match cfg.input_activation {
                InputActivation::Identity => g_phix.clone(),
                InputActivation::Softmax => softmax_backward(&tr.phi_x, &g_phix),
            };
            grad_xs[t][h * d..(h + 1) * d].copy_from_slice(&g_x);

            w_cur = w_prev;
        }
        grad_w0.push(g);
    }
    Ok(SrwmBackwardOut { grad_xs, grad_w0 })
}

// ── Fake-SR ablation ─────────────────────────────────────────────────

/// Fake-SR keeps only the y-producing block of W_0 with no self-modification:
/// a stateless per-head affine read of φ(x).
pub fn fake_sr_step(cfg: &SrwmConfig, params: &SrwmParams, x: &[Real]) -> Result<Vec<Real>> {
    if x.len() != cfg.d_in {
        return Err(Error::Shape {
            op: "fake_sr_step",
            detail: format!("input length {} vs d_in {}", x.len(), cfg.d_in),
        });
    }
    let d = cfg.head_in();
    let o = cfg.head_out();
    let mut y = vec![0.0; cfg.d_out];
    for h in 0..cfg.num_heads {
        let x_h = &x[h * d..(h + 1) * d];
        let phi_x = match cfg.input_activation {
            InputActivation::Identity => x_h.to_vec(),
            InputActivation::Softmax => softmax(x_h),
        };
        let w = &params.w0[h];
        for r in 0..o {
            let mut acc = 0.0;
            for (wv, xv) in w.row(r).iter().zip(phi_x.iter()) {
                acc += wv * xv;
            }
            y[h * o + r] = acc;
        }
    }
    Ok(y)
}

/// Trace of a Fake-SR forward: just φ(x) per step per head.
#[derive(Debug, Clone)]
pub struct FakeSrTrace {
    pub phi_x: Vec<Vec<Vec<Real>>>,
}

pub fn fake_sr_forward(
    cfg: &SrwmConfig,
    params: &SrwmParams,
    xs: &[Vec<Real>],
) -> Result<(Vec<Vec<Real>>, FakeSrTrace)> {
    params.validate(cfg)?;
    let d = cfg.head_in();
    let mut ys = Vec::with_capacity(xs.len());
    let mut phi = Vec::with_capacity(xs.len());
    for x in xs {
        ys.push(fake_sr_step(cfg, params, x)?);
        let per_head: Vec<Vec<Real>> = (0..cfg.num_heads)
            .map(|h| {
                let x_h = &x[h * d..(h + 1) * d];
                match cfg.input_activation {
                    InputActivation::Identity => x_h.to_vec(),
                    InputActivation::Softmax => softmax(x_h),
                }
            })
            .collect();
        phi.push(per_head);
    }
    Ok((ys, FakeSrTrace { phi_x: phi }))
}

/// Backward through the stateless read. The W_0 gradient touches only the
/// y-block rows; the remaining rows of the returned matrices stay zero.
pub fn fake_sr_backward(
    cfg: &SrwmConfig,
    params: &SrwmParams,
    trace: &FakeSrTrace,
    grad_ys: &[Vec<Real>],
) -> Result<SrwmBackwardOut> {
    if grad_ys.len() != trace.phi_x.len() {
        return Err(Error::Shape {
            op: "fake_sr_backward",
            detail: format!("{} output grads vs {} traced steps", grad_ys.len(), trace.phi_x.len()),
        });
    }
    let d = cfg.head_in();
    let o = cfg.head_out();
    let rows = cfg.rows_per_head();
    let mut grad_xs = vec![vec![0.0; cfg.d_in]; grad_ys.len()];
    let mut grad_w0: Vec<Matrix> =
        (0..cfg.num_heads).map(|_| Matrix::zeros(rows, d)).collect();
    for (t, g_y) in grad_ys.iter().enumerate() {
        for h in 0..cfg.num_heads {
            let phi_x = &trace.phi_x[t][h];
            let g_y_h = &g_y[h * o..(h + 1) * o];
            let mut g_phix = vec![0.0; d];
            for r in 0..o {
                let grow = grad_w0[h].row_mut(r);
                for c in 0..d {
                    grow[c] += g_y_h[r] * phi_x[c];
                }
                for (gp, wv) in g_phix.iter_mut().zip(params.w0[h].row(r).iter()) {
                    *gp += wv * g_y_h[r];
                }
            }
            let g_x = match cfg.input_activation {
                InputActivation::Identity => g_phix,
                InputActivation::Softmax => softmax_backward(phi_x, &g_phix),
            };
            grad_xs[t][h * d..(h + 1) * d].copy_from_slice(&g_x);
        }
    }
    Ok(SrwmBackwardOut { grad_xs, grad_w0 })
}
