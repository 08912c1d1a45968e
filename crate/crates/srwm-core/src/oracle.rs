//! Independent verification machinery: deliberately naive single-head
//! forwards written one line per update equation, and a central
//! finite-difference differentiator. Used only by tests and the
//! `gradcheck` CLI command.
//!
//! The naive forwards deliberately share nothing with the `fwp` module
//! beyond the numerics kernels; their agreement with the optimized paths
//! is the point of the comparison.

use crate::error::{Error, Result};
use crate::numerics::{outer, sigmoid, softmax, Matrix, Real};

/// Naive single-head SRWM forward. Returns the output sequence and every
/// intermediate weight matrix W_0..W_T for inspection.
pub struct NaiveSrwmOut {
    pub ys: Vec<Vec<Real>>,
    pub w_seq: Vec<Matrix>,
}

/// Single head only: `w0` has `o + 2d + lr_count` rows and `d` columns with
/// row blocks [y | q | k | β]. `input_softmax` selects the activation
/// applied to x before the projection read.
pub fn naive_srwm_forward(
    o: usize,
    d: usize,
    lr_count: usize,
    input_softmax: bool,
    w0: &Matrix,
    xs: &[Vec<Real>],
) -> Result<NaiveSrwmOut> {
    let rows = o + 2 * d + lr_count;
    if w0.rows() != rows || w0.cols() != d {
        return Err(Error::Shape {
            op: "naive_srwm_forward",
            detail: format!("w0 is {}x{}, expected {rows}x{d}", w0.rows(), w0.cols()),
        });
    }
    let mut w = w0.clone();
    let mut w_seq = vec![w.clone()];
    let mut ys = Vec::with_capacity(xs.len());
    for x in xs {
        let phi_x = if input_softmax { softmax(x) } else { x.clone() };
        let h = w.matvec(&phi_x)?;
        let y = h[0..o].to_vec();
        let q = h[o..o + d].to_vec();
        let k = h[o + d..o + 2 * d].to_vec();
        let beta = h[o + 2 * d..].to_vec();
        let phi_k = softmax(&k);
        let phi_q = softmax(&q);
        let v_bar = w.matvec(&phi_k)?;
        let v = w.matvec(&phi_q)?;
        // W_t = W_{t-1} + σ(β)(v − v̄) ⊗ φ(k), one σ(β_b) per row block.
        let scaled: Vec<Real> = (0..rows)
            .map(|r| {
                let block = if r < o {
                    0
                } else if r < o + d {
                    1
                } else if r < o + 2 * d {
                    2
                } else {
                    3
                };
                let b = if lr_count == 1 { 0 } else { block };
                sigmoid(beta[b]) * (v[r] - v_bar[r])
            })
            .collect();
        let update = outer(&scaled, &phi_k)?;
        w.add_assign(&update);
        w_seq.push(w.clone());
        ys.push(y);
    }
    Ok(NaiveSrwmOut { ys, w_seq })
}

/// Naive single-head DeltaNet forward. `w_slow` has `2*d_key + d_out + 1`
/// rows by `d_in` columns, row blocks [k | v | q | β]; the fast matrix starts
/// at zero and the output queries the updated matrix.
pub struct NaiveDeltaOut {
    pub ys: Vec<Vec<Real>>,
    pub w_seq: Vec<Matrix>,
}

pub fn naive_delta_forward(
    d_key: usize,
    d_out: usize,
    w_slow: &Matrix,
    xs: &[Vec<Real>],
) -> Result<NaiveDeltaOut> {
    let rows = d_out + 2 * d_key + 1;
    if w_slow.rows() != rows {
        return Err(Error::Shape {
            op: "naive_delta_forward",
            detail: format!("w_slow has {} rows, expected {rows}", w_slow.rows()),
        });
    }
    let mut w = Matrix::zeros(d_out, d_key);
    let mut w_seq = vec![w.clone()];
    let mut ys = Vec::with_capacity(xs.len());
    for x in xs {
        let proj = w_slow.matvec(x)?;
        let k = proj[0..d_key].to_vec();
        let v = proj[d_key..d_key + d_out].to_vec();
        let q = proj[d_key + d_out..2 * d_key + d_out].to_vec();
        let beta = proj[2 * d_key + d_out];
        let phi_k = softmax(&k);
        let phi_q = softmax(&q);
        let v_bar = w.matvec(&phi_k)?;
        let scaled: Vec<Real> = (0..d_out).map(|r| sigmoid(beta) * (v[r] - v_bar[r])).collect();
        let update = outer(&scaled, &phi_k)?;
        w.add_assign(&update);
        let y = w.matvec(&phi_q)?;
        w_seq.push(w.clone());
        ys.push(y);
    }
    Ok(NaiveDeltaOut { ys, w_seq })
}

/// Central finite differences with per-coordinate step 1e-6·max(1, |θ_i|).
/// `loss` must be a pure deterministic function of the parameter vector.
pub fn finite_diff<F>(loss: F, theta: &[Real]) -> Result<Vec<Real>>
where
    F: Fn(&[Real]) -> Real,
{
    let mut grads = Vec::with_capacity(theta.len());
    let mut probe = theta.to_vec();
    for i in 0..theta.len() {
        let eps = 1e-6 * theta[i].abs().max(1.0);
        probe[i] = theta[i] + eps;
        let up = loss(&probe);
        probe[i] = theta[i] - eps;
        let down = loss(&probe);
        probe[i] = theta[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite { step: i as u64, head: 0, what: "finite-diff loss" });
        }
        grads.push((up - down) / (2.0 * eps));
    }
    Ok(grads)
}

/// |a − f| / max(|a|, |f|, 1e-8); the floor avoids blow-ups near zero.
pub fn relative_error(analytic: Real, numeric: Real) -> Real {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Per-parameter-group result of a gradient check.
#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub len: usize,
    pub max_rel_err: Real,
    pub worst_index: usize,
    pub analytic_at_worst: Real,
    pub numeric_at_worst: Real,
}

/// Aggregated gradient-check result over all parameter groups and inputs.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: Real,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_err <= self.tolerance)
    }

    pub fn worst(&self) -> Real {
        self.groups.iter().fold(0.0, |m, g| m.max(g.max_rel_err))
    }

    /// Plain-text report table, one row per parameter group.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<28} {:>6} {:>12} {:>8} {:>14} {:>14}  status\n",
            "group", "size", "max_rel_err", "worst_i", "analytic", "numeric"
        ));
        for g in &self.groups {
            let status = if g.max_rel_err <= self.tolerance { "ok" } else { "FAIL" };
            out.push_str(&format!(
                "{:<28} {:>6} {:>12.3e} {:>8} {:>14.6e} {:>14.6e}  {status}\n",
                g.name, g.len, g.max_rel_err, g.worst_index, g.analytic_at_worst, g.numeric_at_worst
            ));
        }
        out.push_str(&format!(
            "tolerance {:.1e}: {}\n",
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        ));
        out
    }
}

/// Compare one analytic gradient group against finite differences of `loss`.
pub fn check_group<F>(name: &str, loss: F, theta: &[Real], analytic: &[Real]) -> Result<GroupReport>
where
    F: Fn(&[Real]) -> Real,
{
    assert_eq!(theta.len(), analytic.len(), "gradient group length mismatch");
    let numeric = finite_diff(&loss, theta)?;
    let mut worst = GroupReport {
        name: name.to_string(),
        len: theta.len(),
        max_rel_err: 0.0,
        worst_index: 0,
        analytic_at_worst: analytic.first().copied().unwrap_or(0.0),
        numeric_at_worst: numeric.first().copied().unwrap_or(0.0),
    };
    for i in 0..theta.len() {
        let err = relative_error(analytic[i], numeric[i]);
        if err > worst.max_rel_err {
            worst.max_rel_err = err;
            worst.worst_index = i;
            worst.analytic_at_worst = analytic[i];
            worst.numeric_at_worst = numeric[i];
        }
    }
    Ok(worst)
}

// ── Layer gradient-check harness ─────────────────────────────────────

/// Instance sizes for a layer gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckSizes {
    pub d_model: usize,
    pub heads: usize,
    pub seq_len: usize,
}

/// Builds a random layer instance of the requested kind and compares its
/// analytic backward against central finite differences, coordinate by
/// coordinate, over every trainable parameter group and all inputs.
///
/// The scalar loss is Σ_t ⟨g_t, y_t⟩ plus ⟨G, W_final⟩ for stateful kinds,
/// exercising both gradient inputs of the backward signature; the final-
/// state term also keeps every parameter's gradient well above the f64
/// central-difference noise floor.
pub fn gradcheck_layer(
    kind: crate::fwp::LayerKind,
    lr_mode: crate::fwp::LrMode,
    sizes: GradCheckSizes,
    seed: u64,
    tolerance: Real,
) -> Result<GradCheckReport> {
    use crate::fwp::{
        delta_backward, delta_forward, fake_sr_backward, fake_sr_forward, sr_delta_backward,
        sr_delta_forward, srwm_backward, srwm_forward, DeltaNetConfig, DeltaNetParams,
        InputActivation, LayerKind, SrDeltaConfig, SrDeltaParams, SrwmConfig, SrwmParams,
    };
    use crate::numerics::Rng;

    let d = sizes.d_model;
    let t_len = sizes.seq_len;
    let mut rng = Rng::new(seed, 0);
    let xs: Vec<Vec<Real>> = (0..t_len).map(|_| rng.normal_vec(d, 1.0)).collect();
    let loss_w: Vec<Vec<Real>> = (0..t_len).map(|_| rng.normal_vec(d, 1.0)).collect();
    let flat_x: Vec<Real> = xs.iter().flatten().copied().collect();
    let mut groups: Vec<GroupReport> = Vec::new();

    match kind {
        LayerKind::Srwm => {
            let cfg = SrwmConfig {
                d_in: d,
                d_out: d,
                num_heads: sizes.heads,
                lr_mode,
                input_activation: InputActivation::Identity,
            };
            cfg.validate()?;
            let rows = cfg.rows_per_head();
            let hd = cfg.head_in();
            let params = SrwmParams {
                w0: (0..cfg.num_heads)
                    .map(|_| Matrix::from_vec(rows, hd, rng.normal_vec(rows * hd, 0.5)).unwrap())
                    .collect(),
            };
            let final_w: Vec<Matrix> = (0..cfg.num_heads)
                .map(|_| Matrix::from_vec(rows, hd, rng.normal_vec(rows * hd, 0.5)).unwrap())
                .collect();

            let loss_of = |p: &SrwmParams, xs: &[Vec<Real>]| -> Real {
                let out = srwm_forward(&cfg, p, xs, None, false).unwrap();
                let mut l: Real = out
                    .ys
                    .iter()
                    .zip(loss_w.iter())
                    .map(|(y, g)| y.iter().zip(g.iter()).map(|(a, b)| a * b).sum::<Real>())
                    .sum();
                for (wh, gh) in out.trace.final_w.iter().zip(final_w.iter()) {
                    l += wh
                        .data()
                        .iter()
                        .zip(gh.data().iter())
                        .map(|(a, b)| a * b)
                        .sum::<Real>();
                }
                l
            };
            let out = srwm_forward(&cfg, &params, &xs, None, false)?;
            let back = srwm_backward(&cfg, &out.trace, &loss_w, Some(&final_w))?;
            for h in 0..cfg.num_heads {
                let theta: Vec<Real> = params.w0[h].data().to_vec();
                let p2 = params.clone();
                let xs2 = xs.clone();
                let loss = |v: &[Real]| {
                    let mut p = p2.clone();
                    p.w0[h] = Matrix::from_vec(rows, hd, v.to_vec()).unwrap();
                    loss_of(&p, &xs2)
                };
                groups.push(check_group(
                    &format!("w0.h{h}"),
                    loss,
                    &theta,
                    back.grad_w0[h].data(),
                )?);
            }
            let analytic_x: Vec<Real> = back.grad_xs.iter().flatten().copied().collect();
            let p2 = params.clone();
            let loss = |v: &[Real]| {
                let xs2: Vec<Vec<Real>> = v.chunks(d).map(|c| c.to_vec()).collect();
                loss_of(&p2, &xs2)
            };
            groups.push(check_group("x", loss, &flat_x, &analytic_x)?);
        }
        LayerKind::FakeSr => {
            let cfg = SrwmConfig {
                d_in: d,
                d_out: d,
                num_heads: sizes.heads,
                lr_mode,
                input_activation: InputActivation::Identity,
            };
            cfg.validate()?;
            let rows = cfg.rows_per_head();
            let hd = cfg.head_in();
            let params = SrwmParams {
                w0: (0..cfg.num_heads)
                    .map(|_| Matrix::from_vec(rows, hd, rng.normal_vec(rows * hd, 0.5)).unwrap())
                    .collect(),
            };
            let loss_of = |p: &SrwmParams, xs: &[Vec<Real>]| -> Real {
                let (ys, _) = fake_sr_forward(&cfg, p, xs).unwrap();
                ys.iter()
                    .zip(loss_w.iter())
                    .map(|(y, g)| y.iter().zip(g.iter()).map(|(a, b)| a * b).sum::<Real>())
                    .sum()
            };
            let (_, trace) = fake_sr_forward(&cfg, &params, &xs)?;
            let back = fake_sr_backward(&cfg, &params, &trace, &loss_w)?;
            for h in 0..cfg.num_heads {
                let theta: Vec<Real> = params.w0[h].data().to_vec();
                let p2 = params.clone();
                let xs2 = xs.clone();
                let loss = |v: &[Real]| {
                    let mut p = p2.clone();
                    p.w0[h] = Matrix::from_vec(rows, hd, v.to_vec()).unwrap();
                    loss_of(&p, &xs2)
                };
                groups.push(check_group(
                    &format!("w0.h{h}"),
                    loss,
                    &theta,
                    back.grad_w0[h].data(),
                )?);
            }
            let analytic_x: Vec<Real> = back.grad_xs.iter().flatten().copied().collect();
            let p2 = params.clone();
            let loss = |v: &[Real]| {
                let xs2: Vec<Vec<Real>> = v.chunks(d).map(|c| c.to_vec()).collect();
                loss_of(&p2, &xs2)
            };
            groups.push(check_group("x", loss, &flat_x, &analytic_x)?);
        }
        LayerKind::DeltaNet => {
            let cfg = DeltaNetConfig { d_in: d, d_out: d, d_key: d, num_heads: sizes.heads };
            cfg.validate()?;
            let rows = cfg.proj_rows();
            let kd = d / sizes.heads;
            let vo = d / sizes.heads;
            let params = DeltaNetParams {
                w_slow: Matrix::from_vec(rows, d, rng.normal_vec(rows * d, 0.5)).unwrap(),
            };
            let final_w: Vec<Matrix> = (0..sizes.heads)
                .map(|_| Matrix::from_vec(vo, kd, rng.normal_vec(vo * kd, 0.5)).unwrap())
                .collect();
            let loss_of = |p: &DeltaNetParams, xs: &[Vec<Real>]| -> Real {
                let out = delta_forward(&cfg, p, xs, None, false).unwrap();
                let mut l: Real = out
                    .ys
                    .iter()
                    .zip(loss_w.iter())
                    .map(|(y, g)| y.iter().zip(g.iter()).map(|(a, b)| a * b).sum::<Real>())
                    .sum();
                for (wh, gh) in out.trace.final_w().iter().zip(final_w.iter()) {
                    l += wh
                        .data()
                        .iter()
                        .zip(gh.data().iter())
                        .map(|(a, b)| a * b)
                        .sum::<Real>();
                }
                l
            };
            let out = delta_forward(&cfg, &params, &xs, None, false)?;
            let back = delta_backward(&cfg, &params, &out.trace, &loss_w, Some(&final_w))?;
            let theta: Vec<Real> = params.w_slow.data().to_vec();
            let xs2 = xs.clone();
            let loss = |v: &[Real]| {
                let p = DeltaNetParams { w_slow: Matrix::from_vec(rows, d, v.to_vec()).unwrap() };
                loss_of(&p, &xs2)
            };
            groups.push(check_group("w_slow", loss, &theta, back.grad_w_slow.data())?);
            let analytic_x: Vec<Real> = back.grad_xs.iter().flatten().copied().collect();
            let p2 = params.clone();
            let loss = |v: &[Real]| {
                let xs2: Vec<Vec<Real>> = v.chunks(d).map(|c| c.to_vec()).collect();
                loss_of(&p2, &xs2)
            };
            groups.push(check_group("x", loss, &flat_x, &analytic_x)?);
        }
        LayerKind::SrDelta => {
            let cfg = SrDeltaConfig {
                d_in: d,
                d_out: d,
                d_key: d,
                num_heads: sizes.heads,
                lr_mode,
                input_activation: InputActivation::Identity,
            };
            cfg.validate()?;
            let scfg = cfg.srwm_config();
            let rows = scfg.rows_per_head();
            let hd = scfg.head_in();
            let kd = d / sizes.heads;
            let vo = d / sizes.heads;
            let params = SrDeltaParams {
                srwm: SrwmParams {
                    w0: vec![Matrix::from_vec(rows, hd, rng.normal_vec(rows * hd, 0.4)).unwrap()],
                },
            };
            let final_srwm =
                vec![Matrix::from_vec(rows, hd, rng.normal_vec(rows * hd, 0.5)).unwrap()];
            let final_fast: Vec<Matrix> = (0..sizes.heads)
                .map(|_| Matrix::from_vec(vo, kd, rng.normal_vec(vo * kd, 0.5)).unwrap())
                .collect();
            let loss_of = |p: &SrDeltaParams, xs: &[Vec<Real>]| -> Real {
                let out = sr_delta_forward(&cfg, p, xs, None, false).unwrap();
                let mut l: Real = out
                    .ys
                    .iter()
                    .zip(loss_w.iter())
                    .map(|(y, g)| y.iter().zip(g.iter()).map(|(a, b)| a * b).sum::<Real>())
                    .sum();
                l += out.trace.srwm.final_w[0]
                    .data()
                    .iter()
                    .zip(final_srwm[0].data().iter())
                    .map(|(a, b)| a * b)
                    .sum::<Real>();
                for (wh, gh) in out.state.delta.w.iter().zip(final_fast.iter()) {
                    l += wh
                        .data()
                        .iter()
                        .zip(gh.data().iter())
                        .map(|(a, b)| a * b)
                        .sum::<Real>();
                }
                l
            };
            let out = sr_delta_forward(&cfg, &params, &xs, None, false)?;
            let back = sr_delta_backward(
                &cfg,
                &out.trace,
                &loss_w,
                Some(&final_srwm),
                Some(&final_fast),
            )?;
            let theta: Vec<Real> = params.srwm.w0[0].data().to_vec();
            let xs2 = xs.clone();
            let loss = |v: &[Real]| {
                let p = SrDeltaParams {
                    srwm: SrwmParams {
                        w0: vec![Matrix::from_vec(rows, hd, v.to_vec()).unwrap()],
                    },
                };
                loss_of(&p, &xs2)
            };
            groups.push(check_group("srwm_w0", loss, &theta, back.grad_w0[0].data())?);
            let analytic_x: Vec<Real> = back.grad_xs.iter().flatten().copied().collect();
            let p2 = params.clone();
            let loss = |v: &[Real]| {
                let xs2: Vec<Vec<Real>> = v.chunks(d).map(|c| c.to_vec()).collect();
                loss_of(&p2, &xs2)
            };
            groups.push(check_group("x", loss, &flat_x, &analytic_x)?);
        }
    }
    Ok(GradCheckReport { tolerance, groups })
}
