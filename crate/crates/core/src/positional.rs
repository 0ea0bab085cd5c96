//! Sinusoidal position table and the Gaussian-window reordering embedding.
//!
//! A reorder predictor maps each hidden state to a real position
//! `b = J · sigmoid(u · tanh(W h))`; the embedding for `b` is the sum of the
//! table rows at integer slots inside `[b - D, b + D]` (clamped to the
//! sentence), each weighted by `exp(-(s - b)² / (2σ))`.

use std::rc::Rc;
use std::sync::Arc;

use crate::autodiff::{GaussianWindow, Var, WindowGradient};
use crate::error::{Error, Result};

pub const DEFAULT_HALF_WIDTH: f64 = 0.5;
pub const DEFAULT_SIGMA: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct PositionalTable {
    max_len: usize,
    d_model: usize,
    table: Arc<Vec<f64>>,
}

impl PositionalTable {
    /// `table[pos][2k] = sin(pos / 10000^(2k/d))`, `table[pos][2k+1] = cos(..)`.
    pub fn sinusoidal(max_len: usize, d_model: usize) -> Result<Self> {
        if d_model == 0 || !d_model.is_multiple_of(2) {
            return Err(Error::Invalid(format!("d_model must be even and positive, got {d_model}")));
        }
        if max_len == 0 {
            return Err(Error::Invalid("max_len must be at least 1".into()));
        }
        let mut table = vec![0.0; max_len * d_model];
        for pos in 0..max_len {
            for k in 0..d_model / 2 {
                let angle = pos as f64 / 10000f64.powf(2.0 * k as f64 / d_model as f64);
                table[pos * d_model + 2 * k] = angle.sin();
                table[pos * d_model + 2 * k + 1] = angle.cos();
            }
        }
        Ok(PositionalTable { max_len, d_model, table: Arc::new(table) })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn row(&self, pos: usize) -> &[f64] {
        &self.table[pos * self.d_model..(pos + 1) * self.d_model]
    }

    /// Rows `0..len` concatenated.
    pub fn prefix(&self, len: usize) -> &[f64] {
        &self.table[..len * self.d_model]
    }

    pub(crate) fn shared(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.table)
    }

    pub fn window(&self, half_width: f64, sigma: f64, gradient: WindowGradient) -> GaussianWindow {
        GaussianWindow {
            table: self.shared(),
            d_model: self.d_model,
            half_width,
            sigma,
            gradient,
        }
    }
}

/// Hyper-parameters of the Gaussian selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowConfig {
    pub half_width: f64,
    pub sigma: f64,
    pub gradient: WindowGradient,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig { half_width: DEFAULT_HALF_WIDTH, sigma: DEFAULT_SIGMA, gradient: WindowGradient::default() }
    }
}

/// Predicted reordered positions `b_j = J · sigmoid(u · tanh(W h_j))` for packed rows.
///
/// `weight` is `d×d`, `score` is `d×1`, `lens[r]` is the sentence length of row `r`.
pub fn predict_positions<'t>(hidden: Var<'t>, weight: Var<'t>, score: Var<'t>, lens: &[usize]) -> Result<Var<'t>> {
    let (rows, d) = hidden.shape();
    if weight.shape() != (d, d) || score.shape() != (d, 1) {
        return Err(Error::shape(
            "predict_positions",
            format!("hidden {rows}x{d}, W {:?}, u {:?}", weight.shape(), score.shape()),
        ));
    }
    if lens.len() != rows {
        return Err(Error::shape("predict_positions", format!("{rows} rows vs {} lengths", lens.len())));
    }
    let scale = hidden.tape().constant(rows, 1, lens.iter().map(|&n| n as f64).collect())?;
    hidden.matmul(weight)?.tanh().matmul(score)?.sigmoid().mul(scale)
}

/// Gaussian-window reordering embedding for packed predicted positions (`n×1`).
pub fn gaussian_reorder_embedding<'t>(
    positions: Var<'t>,
    table: &PositionalTable,
    window: WindowConfig,
    lens: &[usize],
) -> Result<Var<'t>> {
    let w = Rc::new(table.window(window.half_width, window.sigma, window.gradient));
    positions.gaussian_select(&w, lens)
}

/// Eager evaluation for a single position `b` in a sentence of length `len`.
pub fn reorder_embedding_at(b: f64, table: &PositionalTable, window: WindowConfig, len: usize) -> Vec<f64> {
    let w = table.window(window.half_width, window.sigma, window.gradient);
    let mut out = vec![0.0; table.d_model()];
    for (s, wt) in w.weights(b, len) {
        for (o, p) in out.iter_mut().zip(table.row(s)) {
            *o += wt * p;
        }
    }
    out
}

/// `H̄ = H + PR`.
pub fn inject_reordering<'t>(hidden: Var<'t>, reordering: Var<'t>) -> Result<Var<'t>> {
    hidden.add(reordering)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn table_rows() {
        let t = PositionalTable::sinusoidal(8, 6).unwrap();
        assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let t = PositionalTable::sinusoidal(4, 4).unwrap();
        let want = [0.841471, 0.540302, 0.010000, 0.999950];
        for (g, w) in t.row(1).iter().zip(want) {
            assert!((g - w).abs() < 1e-6);
        }
        assert!((t.row(2)[0] - 0.909297).abs() < 1e-6);
        assert!((t.row(2)[1] + 0.416147).abs() < 1e-6);
        assert!(PositionalTable::sinusoidal(4, 5).is_err());
    }

    #[test]
    fn zero_score_predicts_midpoint() {
        let tape = Tape::new(0);
        let h = tape.constant(3, 2, vec![0.3, -1.0, 2.0, 0.5, -0.7, 0.1]).unwrap();
        let w = tape.constant(2, 2, vec![1.0, 0.5, -0.5, 1.0]).unwrap();
        let u = tape.constant(2, 1, vec![0.0, 0.0]).unwrap();
        let b = predict_positions(h, w, u, &[3, 3, 3]).unwrap();
        assert_eq!(b.value(), vec![1.5; 3]);
        let bad = tape.constant(3, 1, vec![0.0; 3]).unwrap();
        assert!(predict_positions(h, w, bad, &[3, 3, 3]).is_err());
    }

    #[test]
    fn saturated_score_approaches_length() {
        let tape = Tape::new(0);
        let h = tape.constant(1, 1, vec![1.0]).unwrap();
        let w = tape.constant(1, 1, vec![100.0]).unwrap();
        let u = tape.constant(1, 1, vec![60.0]).unwrap();
        let b = predict_positions(h, w, u, &[4]).unwrap().scalar();
        assert!(b <= 4.0 && 4.0 - b < 1e-12);
    }

    #[test]
    fn injection_is_addition() {
        let tape = Tape::new(0);
        let h = tape.constant(1, 2, vec![1.0, 2.0]).unwrap();
        let z = tape.constant(1, 2, vec![0.0, 0.0]).unwrap();
        assert_eq!(inject_reordering(h, z).unwrap().value(), vec![1.0, 2.0]);
        assert_eq!(inject_reordering(z, h).unwrap().value(), vec![1.0, 2.0]);
        let other = tape.constant(2, 1, vec![0.0, 0.0]).unwrap();
        assert!(inject_reordering(h, other).is_err());
    }
}
