//! DeltaNet layer: a trained slow matrix projects each input to key, value,
//! query and a scalar learning rate; per-head fast matrices are rewritten by
//! the delta rule and queried after the update:
//!
//! ```text
//! [k, v, q, β] = W_slow x_t
//! v̄ = W_{t-1} φ(k)
//! W_t = W_{t-1} + σ(β)(v − v̄) ⊗ φ(k)
//! y_t = W_t φ(q)
//! ```
//!
//! k, v, q are split across H heads; β is the single shared scalar produced
//! by the last row of W_slow. Fast matrices start at zero each episode.
//!
//! The fast-memory recurrence (everything downstream of the projection) is
//! factored out so the SR-DeltaNet composition can drive it from a
//! self-referential projection instead of W_slow.

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, softmax, softmax_backward, Matrix, Real, Rng};

use super::{check_finite, check_guard};

/// Head geometry of the fast memory and its projection layout [k | v | q | β].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) struct FastDims {
    pub d_key: usize,
    pub d_out: usize,
    pub num_heads: usize,
}

impl FastDims {
    pub fn kd(&self) -> usize {
        self.d_key / self.num_heads
    }

    pub fn vo(&self) -> usize {
        self.d_out / self.num_heads
    }

    pub fn proj_rows(&self) -> usize {
        self.d_out + 2 * self.d_key + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_key == 0 || self.d_out == 0 || self.num_heads == 0 {
            return Err(Error::Config(format!(
                "delta dims must be positive: d_key={}, d_out={}, heads={}",
                self.d_key, self.d_out, self.num_heads
            )));
        }
        if self.d_key % self.num_heads != 0 || self.d_out % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_key = {} and d_out = {} must both be divisible by num_heads = {}",
                self.d_key, self.d_out, self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeltaNetConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub d_key: usize,
    pub num_heads: usize,
}

impl DeltaNetConfig {
    pub(super) fn fast(&self) -> FastDims {
        FastDims { d_key: self.d_key, d_out: self.d_out, num_heads: self.num_heads }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 {
            return Err(Error::Config("delta d_in must be positive".into()));
        }
        self.fast().validate()
    }

    /// Rows of W_slow: d_out + 2·d_key + 1, exactly.
    pub fn proj_rows(&self) -> usize {
        self.fast().proj_rows()
    }
}

/// The trained slow projection matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaNetParams {
    pub w_slow: Matrix,
}

impl DeltaNetParams {
    /// Normal(0, 1/√d_in) entries; the β row starts at zero so σ(β) = 0.5.
    pub fn init(cfg: &DeltaNetConfig, rng: &mut Rng) -> Self {
        let rows = cfg.proj_rows();
        let std = 1.0 / (cfg.d_in as Real).sqrt();
        let mut w_slow = Matrix::zeros(rows, cfg.d_in);
        for r in 0..rows - 1 {
            let row = rng.normal_vec(cfg.d_in, std);
            w_slow.row_mut(r).copy_from_slice(&row);
        }
        DeltaNetParams { w_slow }
    }

    pub fn validate(&self, cfg: &DeltaNetConfig) -> Result<()> {
        cfg.validate()?;
        if self.w_slow.rows() != cfg.proj_rows() || self.w_slow.cols() != cfg.d_in {
            return Err(Error::Shape {
                op: "delta params",
                detail: format!(
                    "w_slow is {}x{}, expected {}x{}",
                    self.w_slow.rows(),
                    self.w_slow.cols(),
                    cfg.proj_rows(),
                    cfg.d_in
                ),
            });
        }
        Ok(())
    }
}

/// Per-head fast matrices, zero at episode start.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaNetState {
    pub w: Vec<Matrix>,
    pub step_count: u64,
}

impl DeltaNetState {
    pub fn fresh(cfg: &DeltaNetConfig) -> Self {
        Self::fresh_dims(&cfg.fast())
    }

    pub(super) fn fresh_dims(dims: &FastDims) -> Self {
        DeltaNetState {
            w: (0..dims.num_heads).map(|_| Matrix::zeros(dims.vo(), dims.kd())).collect(),
            step_count: 0,
        }
    }

    pub fn reset(&mut self) {
        for w in &mut self.w {
            w.data_mut().fill(0.0);
        }
        self.step_count = 0;
    }
}

#[derive(Debug, Clone)]
pub struct DeltaHeadTrace {
    pub phi_k: Vec<Real>,
    pub phi_q: Vec<Real>,
    pub v: Vec<Real>,
    pub v_bar: Vec<Real>,
}

#[derive(Debug, Clone)]
pub struct DeltaStepTrace {
    pub beta_raw: Real,
    pub heads: Vec<DeltaHeadTrace>,
}

/// Trace of the fast-memory recurrence over a segment.
#[derive(Debug, Clone)]
pub(super) struct FastMemTrace {
    pub steps: Vec<DeltaStepTrace>,
    pub final_w: Vec<Matrix>,
    pub full_states: Option<Vec<Vec<Matrix>>>,
}

/// Full DeltaNet trace: inputs kept for the W_slow pullback.
#[derive(Debug, Clone)]
pub struct DeltaTrace {
    pub xs: Vec<Vec<Real>>,
    pub(super) fast: FastMemTrace,
    pub start_step: u64,
}

impl DeltaTrace {
    pub fn steps(&self) -> &[DeltaStepTrace] {
        &self.fast.steps
    }

    pub fn final_w(&self) -> &[Matrix] {
        &self.fast.final_w
    }
}

/// One fast-memory step driven by an already-computed projection vector.
pub(super) fn fast_mem_step(
    dims: &FastDims,
    state: &mut DeltaNetState,
    proj: &[Real],
) -> Result<(Vec<Real>, DeltaStepTrace)> {
    let kd = dims.kd();
    let vo = dims.vo();
    let step = state.step_count;
    let beta_raw = proj[dims.proj_rows() - 1];
    let sig = sigmoid(beta_raw);

    let mut y = vec![0.0; dims.d_out];
    let mut heads = Vec::with_capacity(dims.num_heads);
    for h in 0..dims.num_heads {
        let k_h = &proj[h * kd..(h + 1) * kd];
        let v_h = &proj[dims.d_key + h * vo..dims.d_key + (h + 1) * vo];
        let q_h = &proj[dims.d_key + dims.d_out
            + h * kd..dims.d_key + dims.d_out + (h + 1) * kd];
        let phi_k = softmax(k_h);
        let phi_q = softmax(q_h);

        let w = &mut state.w[h];
        let mut v_bar = vec![0.0; vo];
        w.matvec_into(&phi_k, &mut v_bar);
        check_finite(&v_bar, step, h, "retrieved value")?;
        for r in 0..vo {
            let rs = sig * (v_h[r] - v_bar[r]);
            let row = w.row_mut(r);
            for (wv, pk) in row.iter_mut().zip(phi_k.iter()) {
                *wv += rs * pk;
            }
        }
        check_guard(w, step, h)?;
        // Query the updated matrix.
        w.matvec_into(&phi_q, &mut y[h * vo..(h + 1) * vo]);

        heads.push(DeltaHeadTrace { phi_k, phi_q, v: v_h.to_vec(), v_bar });
    }
    state.step_count += 1;
    Ok((y, DeltaStepTrace { beta_raw, heads }))
}

/// Reverse sweep of the fast-memory recurrence. Returns per-step gradients
/// with respect to the projection vectors.
pub(super) fn fast_mem_backward(
    dims: &FastDims,
    trace: &FastMemTrace,
    grad_ys: &[Vec<Real>],
    grad_final_w: Option<&[Matrix]>,
) -> Result<Vec<Vec<Real>>> {
    let steps = trace.steps.len();
    if grad_ys.len() != steps {
        return Err(Error::Shape {
            op: "delta_backward",
            detail: format!("{} output grads vs {} traced steps", grad_ys.len(), steps),
        });
    }
    let kd = dims.kd();
    let vo = dims.vo();
    let mut grad_projs = vec![vec![0.0; dims.proj_rows()]; steps];

    for h in 0..dims.num_heads {
        let mut w_cur = trace.final_w[h].clone();
        let mut g = match grad_final_w {
            Some(gf) => gf[h].clone(),
            None => Matrix::zeros(vo, kd),
        };
        let mut g_phiq = vec![0.0; kd];
        let mut g_phik_vec = vec![0.0; vo];
        let mut rs = vec![0.0; vo];
        let mut g_u = vec![0.0; vo];
        let mut g_phik_upd = vec![0.0; kd];
        let mut wt_gvbar = vec![0.0; kd];

        for t in (0..steps).rev() {
            let tr = &trace.steps[t];
            let head = &tr.heads[h];
            let sig = sigmoid(tr.beta_raw);
            let g_y_h = &grad_ys[t][h * vo..(h + 1) * vo];

            // y = W_t φ(q): read pullback on the post-update matrix.
            w_cur.matvec_t_into(g_y_h, &mut g_phiq);
            g.add_scaled_outer(1.0, g_y_h, &head.phi_q);

            // Update pullback.
            g.matvec_into(&head.phi_k, &mut g_phik_vec);
            let mut g_sig = 0.0;
            for r in 0..vo {
                rs[r] = sig * (head.v[r] - head.v_bar[r]);
                g_u[r] = sig * g_phik_vec[r];
                g_sig += (head.v[r] - head.v_bar[r]) * g_phik_vec[r];
            }
            let g_beta = g_sig * sig * (1.0 - sig);
            g.matvec_t_into(&rs, &mut g_phik_upd);

            let w_prev: Matrix = match &trace.full_states {
                Some(states) => states[t][h].clone(),
                None => {
                    let mut wp = w_cur.clone();
                    wp.add_scaled_outer(-1.0, &rs, &head.phi_k);
                    wp
                }
            };

            // v̄ = W_{t-1} φ(k).
            let g_vbar: Vec<Real> = g_u.iter().map(|v| -v).collect();
            w_prev.matvec_t_into(&g_vbar, &mut wt_gvbar);
            g.add_scaled_outer(1.0, &g_vbar, &head.phi_k);

            let g_phik: Vec<Real> =
                g_phik_upd.iter().zip(wt_gvbar.iter()).map(|(a, b)| a + b).collect();
            let g_kraw = softmax_backward(&head.phi_k, &g_phik);
            let g_qraw = softmax_backward(&head.phi_q, &g_phiq);

            let gp = &mut grad_projs[t];
            gp[h * kd..(h + 1) * kd].copy_from_slice(&g_kraw);
            for r in 0..vo {
                gp[dims.d_key + h * vo + r] += g_u[r];
            }
            gp[dims.d_key + dims.d_out + h * kd..dims.d_key + dims.d_out + (h + 1) * kd]
                .copy_from_slice(&g_qraw);
            let beta_idx = dims.proj_rows() - 1;
            gp[beta_idx] += g_beta;

            w_cur = w_prev;
        }
    }
    Ok(grad_projs)
}

/// One DeltaNet step: slow projection (no activation on x), then the
/// fast-memory update and query.
pub fn delta_step(
    cfg: &DeltaNetConfig,
    params: &DeltaNetParams,
    state: &mut DeltaNetState,
    x: &[Real],
) -> Result<(Vec<Real>, DeltaStepTrace)> {
    if x.len() != cfg.d_in {
        return Err(Error::Shape {
            op: "delta_step",
            detail: format!("input length {} vs d_in {}", x.len(), cfg.d_in),
        });
    }
    let mut proj = vec![0.0; cfg.proj_rows()];
    params.w_slow.matvec_into(x, &mut proj);
    check_finite(&proj, state.step_count, 0, "slow projection")?;
    fast_mem_step(&cfg.fast(), state, &proj)
}

pub struct DeltaForwardOut {
    pub ys: Vec<Vec<Real>>,
    pub state: DeltaNetState,
    pub trace: DeltaTrace,
}

pub fn delta_forward(
    cfg: &DeltaNetConfig,
    params: &DeltaNetParams,
    xs: &[Vec<Real>],
    initial: Option<DeltaNetState>,
    record_states: bool,
) -> Result<DeltaForwardOut> {
    params.validate(cfg)?;
    let mut state = initial.unwrap_or_else(|| DeltaNetState::fresh(cfg));
    let start_step = state.step_count;
    let mut full_states = record_states.then(|| vec![state.w.clone()]);
    let mut ys = Vec::with_capacity(xs.len());
    let mut steps = Vec::with_capacity(xs.len());
    for x in xs {
        let (y, tr) = delta_step(cfg, params, &mut state, x)?;
        ys.push(y);
        steps.push(tr);
        if let Some(states) = full_states.as_mut() {
            states.push(state.w.clone());
        }
    }
    let trace = DeltaTrace {
        xs: xs.to_vec(),
        fast: FastMemTrace { steps, final_w: state.w.clone(), full_states },
        start_step,
    };
    Ok(DeltaForwardOut { ys, state, trace })
}

pub struct DeltaBackwardOut {
    pub grad_xs: Vec<Vec<Real>>,
    pub grad_w_slow: Matrix,
}

pub fn delta_backward(
    cfg: &DeltaNetConfig,
    params: &DeltaNetParams,
    trace: &DeltaTrace,
    grad_ys: &[Vec<Real>],
    grad_final_w: Option<&[Matrix]>,
) -> Result<DeltaBackwardOut> {
    let grad_projs = fast_mem_backward(&cfg.fast(), &trace.fast, grad_ys, grad_final_w)?;
    let mut grad_w_slow = Matrix::zeros(cfg.proj_rows(), cfg.d_in);
    let mut grad_xs = Vec::with_capacity(trace.xs.len());
    for (x, gp) in trace.xs.iter().zip(grad_projs.iter()) {
        grad_w_slow.add_scaled_outer(1.0, gp, x);
        let mut g_x = vec![0.0; cfg.d_in];
        params.w_slow.matvec_t_into(gp, &mut g_x);
        grad_xs.push(g_x);
    }
    Ok(DeltaBackwardOut { grad_xs, grad_w_slow })
}
