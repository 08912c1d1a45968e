//! Fast weight programmer layers: DeltaNet, the self-referential weight
//! matrix (SRWM), the Fake-SR ablation, and the SR-DeltaNet composition.
//!
//! Shared conventions:
//! - Multi-head layers run H independent single-head computations on equal
//!   slices of the input; outputs are concatenated in head order.
//! - Fast/self-referential weights change by rank-1 delta updates only:
//!   W ← W + σ(β)(v − v̄) ⊗ φ(k).
//! - Forward passes record a per-step trace holding every vector needed to
//!   run the exact backward pass; fast-weight matrices are reconstructed
//!   during the reverse sweep by subtracting the stored rank-1 updates.

mod delta;
mod sr_delta;
mod srwm;

pub use delta::{
    delta_backward, delta_forward, delta_step, DeltaBackwardOut, DeltaForwardOut, DeltaNetConfig,
    DeltaNetParams, DeltaNetState, DeltaStepTrace, DeltaTrace,
};
pub use sr_delta::{
    sr_delta_backward, sr_delta_forward, sr_delta_step, SrDeltaBackwardOut, SrDeltaConfig,
    SrDeltaForwardOut, SrDeltaParams, SrDeltaState, SrDeltaTrace,
};
pub use srwm::{
    fake_sr_backward, fake_sr_forward, fake_sr_step, srwm_backward, srwm_forward, srwm_step,
    FakeSrTrace, SrwmBackwardOut, SrwmForwardOut, SrwmParams, SrwmState, SrwmStepTrace, SrwmTrace,
};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real, Rng};

/// Any fast-weight entry beyond this magnitude aborts the forward pass.
pub const DIVERGENCE_GUARD: Real = 1e6;

/// Layer kinds available to the block stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    DeltaNet,
    Srwm,
    FakeSr,
    SrDelta,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::DeltaNet => "delta_net",
            LayerKind::Srwm => "srwm",
            LayerKind::FakeSr => "fake_sr",
            LayerKind::SrDelta => "sr_delta",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "delta_net" => Ok(LayerKind::DeltaNet),
            "srwm" => Ok(LayerKind::Srwm),
            "fake_sr" => Ok(LayerKind::FakeSr),
            "sr_delta" => Ok(LayerKind::SrDelta),
            other => Err(Error::Config(format!("unknown layer kind `{other}`"))),
        }
    }
}

/// One learning rate for the whole matrix, or one per (y, q, k, β) row block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrMode {
    Single,
    PerSubmatrix4,
}

impl LrMode {
    pub fn lr_count(self) -> usize {
        match self {
            LrMode::Single => 1,
            LrMode::PerSubmatrix4 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LrMode::Single => "single",
            LrMode::PerSubmatrix4 => "per_submatrix_4",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(LrMode::Single),
            "per_submatrix_4" => Ok(LrMode::PerSubmatrix4),
            other => Err(Error::Config(format!("unknown lr mode `{other}`"))),
        }
    }
}

/// Activation applied to the raw layer input before any projection. Keys and
/// queries always go through softmax regardless of this setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputActivation {
    Identity,
    Softmax,
}

impl InputActivation {
    pub fn name(self) -> &'static str {
        match self {
            InputActivation::Identity => "identity",
            InputActivation::Softmax => "softmax",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(InputActivation::Identity),
            "softmax" => Ok(InputActivation::Softmax),
            other => Err(Error::Config(format!("unknown input activation `{other}`"))),
        }
    }
}

/// Shape and mode description of one SRWM layer.
///
/// Per head the matrix has `o + 2d + L` rows by `d` columns, where
/// o = d_out/H, d = d_in/H and L is the learning-rate count. The row blocks
/// are laid out in the fixed order [y (o), q (d), k (d), β (L)]; this order
/// is part of the checkpoint header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SrwmConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub num_heads: usize,
    pub lr_mode: LrMode,
    pub input_activation: InputActivation,
}

impl SrwmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_out == 0 || self.num_heads == 0 {
            return Err(Error::Config(format!(
                "srwm dims must be positive: d_in={}, d_out={}, heads={}",
                self.d_in, self.d_out, self.num_heads
            )));
        }
        if self.d_in % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_in = {} not divisible by num_heads = {}",
                self.d_in, self.num_heads
            )));
        }
        if self.d_out % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_out = {} not divisible by num_heads = {}",
                self.d_out, self.num_heads
            )));
        }
        Ok(())
    }

    /// Per-head input width d.
    pub fn head_in(&self) -> usize {
        self.d_in / self.num_heads
    }

    /// Per-head output width o.
    pub fn head_out(&self) -> usize {
        self.d_out / self.num_heads
    }

    pub fn lr_count(&self) -> usize {
        self.lr_mode.lr_count()
    }

    /// Rows of each per-head matrix: o + 2d + L.
    pub fn rows_per_head(&self) -> usize {
        self.head_out() + 2 * self.head_in() + self.lr_count()
    }

    /// Row-block boundaries [y | q | k | β] within a per-head matrix.
    pub fn block_offsets(&self) -> (usize, usize, usize, usize) {
        let o = self.head_out();
        let d = self.head_in();
        (0, o, o + d, o + 2 * d)
    }

    /// Block index (0 = y, 1 = q, 2 = k, 3 = β) of a row.
    pub fn block_of_row(&self, row: usize) -> usize {
        let (_, q0, k0, b0) = self.block_offsets();
        if row < q0 {
            0
        } else if row < k0 {
            1
        } else if row < b0 {
            2
        } else {
            3
        }
    }
}

/// Draws per-head initial matrices: Normal(0, 1/√d) entries for the y/q/k
/// row blocks and exactly zero β rows, so σ(β) starts at 0.5 and the β rows
/// stay zero until gradient descent moves them.
pub fn init_srwm_w0(cfg: &SrwmConfig, rng: &mut Rng) -> Vec<Matrix> {
    let rows = cfg.rows_per_head();
    let d = cfg.head_in();
    let std = 1.0 / (d as Real).sqrt();
    let (_, _, _, beta0) = cfg.block_offsets();
    (0..cfg.num_heads)
        .map(|_| {
            let mut w = Matrix::zeros(rows, d);
            for r in 0..beta0 {
                let row = rng.normal_vec(d, std);
                w.row_mut(r).copy_from_slice(&row);
            }
            w
        })
        .collect()
}

pub(crate) fn check_finite(xs: &[Real], step: u64, head: usize, what: &'static str) -> Result<()> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { step, head, what })
    }
}

pub(crate) fn check_guard(w: &Matrix, step: u64, head: usize) -> Result<()> {
    let max_abs = w.max_abs();
    if max_abs > DIVERGENCE_GUARD {
        Err(Error::Divergence { step, head, max_abs: max_abs as f64 })
    } else {
        Ok(())
    }
}
