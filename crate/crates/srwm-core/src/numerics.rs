//! Minimal dense linear algebra, elementwise nonlinearities and a seeded
//! deterministic PRNG. Every other module is built on top of this one.
//!
//! All kernels use fixed, sequential evaluation order, so results are
//! bit-reproducible for fixed inputs across runs.

use crate::error::{Error, Result};

/// Scalar type of the default build. The `real32` feature switches the whole
/// crate to single precision; oracle tolerances assume the default `f64`.
#[cfg(not(feature = "real32"))]
pub type Real = f64;
#[cfg(feature = "real32")]
pub type Real = f32;

/// Dense row-major real matrix; the universal numeric carrier.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<Real>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Real>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "Matrix::from_vec",
                detail: format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<Real>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Shape {
                    op: "Matrix::from_rows",
                    detail: format!("ragged rows: expected {c}, got {}", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Real {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: Real) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[Real] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [Real] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// y = W x.
    pub fn matvec(&self, x: &[Real]) -> Result<Vec<Real>> {
        if x.len() != self.cols {
            return Err(Error::Shape {
                op: "matvec",
                detail: format!("matrix {}x{} vs vector length {}", self.rows, self.cols, x.len()),
            });
        }
        let mut y = vec![0.0; self.rows];
        self.matvec_into(x, &mut y);
        Ok(y)
    }

    /// y = W x without shape checks; caller guarantees lengths.
    #[inline]
    pub fn matvec_into(&self, x: &[Real], y: &mut [Real]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        for (i, out) in y.iter_mut().enumerate() {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let mut acc = 0.0;
            for (w, xv) in row.iter().zip(x.iter()) {
                acc += w * xv;
            }
            *out = acc;
        }
    }

    /// y = Wᵀ x.
    pub fn matvec_t(&self, x: &[Real]) -> Result<Vec<Real>> {
        if x.len() != self.rows {
            return Err(Error::Shape {
                op: "matvec_t",
                detail: format!("matrix {}x{} vs vector length {}", self.rows, self.cols, x.len()),
            });
        }
        let mut y = vec![0.0; self.cols];
        self.matvec_t_into(x, &mut y);
        Ok(y)
    }

    #[inline]
    pub fn matvec_t_into(&self, x: &[Real], y: &mut [Real]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(y.len(), self.cols);
        y.fill(0.0);
        for (i, xv) in x.iter().enumerate() {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            for (out, w) in y.iter_mut().zip(row.iter()) {
                *out += w * xv;
            }
        }
    }

    /// W += s · u ⊗ v.
    pub fn add_scaled_outer(&mut self, s: Real, u: &[Real], v: &[Real]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (i, ui) in u.iter().enumerate() {
            let su = s * ui;
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (w, vj) in row.iter_mut().zip(v.iter()) {
                *w += su * vj;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.rows, other.rows);
        debug_assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: Real) {
        for v in self.data.iter_mut() {
            *v *= s;
        }
    }

    pub fn max_abs(&self) -> Real {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// u ⊗ v as a fresh matrix; rank ≤ 1 by construction.
pub fn outer(u: &[Real], v: &[Real]) -> Result<Matrix> {
    if u.is_empty() || v.is_empty() {
        return Err(Error::Shape {
            op: "outer",
            detail: format!("empty input: lengths {} and {}", u.len(), v.len()),
        });
    }
    let mut m = Matrix::zeros(u.len(), v.len());
    m.add_scaled_outer(1.0, u, v);
    Ok(m)
}

/// Numerically safe softmax (max subtraction). A length-1 input returns [1.0].
pub fn softmax(x: &[Real]) -> Vec<Real> {
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(x: &mut [Real]) {
    if x.is_empty() {
        return;
    }
    let max = x.iter().fold(Real::NEG_INFINITY, |m, v| m.max(*v));
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Pullback through `p = softmax(z)`: given p and dL/dp, returns dL/dz.
pub fn softmax_backward(p: &[Real], grad_p: &[Real]) -> Vec<Real> {
    debug_assert_eq!(p.len(), grad_p.len());
    let dot: Real = p.iter().zip(grad_p.iter()).map(|(a, b)| a * b).sum();
    p.iter().zip(grad_p.iter()).map(|(pi, gi)| pi * (gi - dot)).collect()
}

#[inline]
pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// y = gain ⊙ (x − μ)/√(σ² + eps) + bias, with biased variance.
pub fn layer_norm(x: &[Real], gain: &[Real], bias: &[Real], eps: Real) -> Result<Vec<Real>> {
    if x.len() != gain.len() || x.len() != bias.len() {
        return Err(Error::Shape {
            op: "layer_norm",
            detail: format!("lengths x={}, gain={}, bias={}", x.len(), gain.len(), bias.len()),
        });
    }
    let (normed, _) = layer_norm_fwd(x, gain, bias, eps);
    Ok(normed)
}

/// Layer norm forward returning (output, (x̂, inv_std)) for the backward pass.
pub fn layer_norm_fwd(
    x: &[Real],
    gain: &[Real],
    bias: &[Real],
    eps: Real,
) -> (Vec<Real>, (Vec<Real>, Real)) {
    let n = x.len() as Real;
    let mean: Real = x.iter().sum::<Real>() / n;
    let var: Real = x.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    let xhat: Vec<Real> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let out = xhat
        .iter()
        .zip(gain.iter().zip(bias.iter()))
        .map(|(xh, (g, b))| xh * g + b)
        .collect();
    (out, (xhat, inv_std))
}

/// Pullback through layer norm. Accumulates into grad_gain/grad_bias, returns dL/dx.
pub fn layer_norm_bwd(
    grad_out: &[Real],
    gain: &[Real],
    xhat: &[Real],
    inv_std: Real,
    grad_gain: &mut [Real],
    grad_bias: &mut [Real],
) -> Vec<Real> {
    let n = xhat.len();
    let nf = n as Real;
    let mut grad_xhat = vec![0.0; n];
    for i in 0..n {
        grad_gain[i] += grad_out[i] * xhat[i];
        grad_bias[i] += grad_out[i];
        grad_xhat[i] = grad_out[i] * gain[i];
    }
    let mean_gx: Real = grad_xhat.iter().sum::<Real>() / nf;
    let mean_gx_xhat: Real =
        grad_xhat.iter().zip(xhat.iter()).map(|(g, xh)| g * xh).sum::<Real>() / nf;
    (0..n)
        .map(|i| inv_std * (grad_xhat[i] - mean_gx - xhat[i] * mean_gx_xhat))
        .collect()
}

#[inline]
pub fn relu(x: Real) -> Real {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

// ── Deterministic counter-based PRNG ─────────────────────────────────

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based generator with explicit (seed, stream) addressing.
/// Identical (seed, stream) yields an identical draw sequence across runs;
/// independent streams never share state, so parallel workers stay reproducible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    stream: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Rng { seed, stream, counter: 0 }
    }

    /// (seed, stream, counter) triple for checkpointing.
    pub fn state(&self) -> (u64, u64, u64) {
        (self.seed, self.stream, self.counter)
    }

    pub fn from_state(seed: u64, stream: u64, counter: u64) -> Self {
        Rng { seed, stream, counter }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let key = mix64(self.seed ^ mix64(self.stream.wrapping_mul(GOLDEN) ^ 0x6A09_E667_F3BC_C909));
        let out = mix64(key ^ self.counter.wrapping_mul(GOLDEN));
        self.counter = self.counter.wrapping_add(1);
        out
    }

    /// Uniform in [0, 1).
    #[inline]
    pub fn uniform(&mut self) -> Real {
        ((self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)) as Real
    }

    /// Standard normal via Box-Muller (one draw per pair of uniforms).
    pub fn normal(&mut self) -> Real {
        // u1 in (0, 1] so the log is finite.
        let u1 = (((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)) as Real;
        let u2 = self.uniform();
        let two_pi = 2.0 * std::f64::consts::PI as Real;
        (-2.0 * u1.ln()).sqrt() * (two_pi * u2).cos()
    }

    /// Deterministic vector of Normal(0, std²) draws; std = 0 yields zeros.
    pub fn normal_vec(&mut self, n: usize, std: Real) -> Vec<Real> {
        (0..n).map(|_| self.normal() * std).collect()
    }

    /// Uniform integer in [0, n). n must be positive.
    pub fn gen_range(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.gen_range(i + 1);
            xs.swap(i, j);
        }
    }

    /// k distinct indices drawn from 0..n, in random order.
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        debug_assert!(k <= n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.gen_range(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}
