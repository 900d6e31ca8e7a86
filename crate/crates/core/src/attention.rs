//! Logit-level attention modulation.
//!
//! Standard attention normalises a row of logits `z` with a softmax. The
//! modulation multiplies each exponentiated logit by a factor `Γ_j`:
//!
//! ```text
//! Ã_j = Γ_j·exp(z_j) / Σ_k Γ_k·exp(z_k) = softmax(z + log Γ)_j
//! ```
//!
//! with `Γ_j = α` on target visual tokens, `β` on background tokens and `1`
//! elsewhere. `Γ_j = 0` removes position `j` from the softmax support.
//!
//! These functions operate on logits only; computing `z = QKᵀ/√d_k` belongs
//! to the host model. They are the reference the inference sidecar's hooked
//! attention rows are checked against.

use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ModulationConfig;

#[derive(Debug, Error, PartialEq)]
pub enum AttentionError {
    #[error("logit row contains a non-finite value at position {0}")]
    NonFinite(usize),
    #[error("parameter out of range: {0}")]
    ParameterRange(String),
    #[error("length mismatch: {logits} logits, {factors} factors")]
    LengthMismatch { logits: usize, factors: usize },
    #[error("every factor is zero, the softmax support is empty")]
    EmptySupport,
    #[error("invalid token layout: {0}")]
    Layout(String),
}

/// Which keys outside the target set receive the background factor β.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundMode {
    /// Only visual tokens outside the target; text tokens keep factor 1.
    #[default]
    VisualOnly,
    /// Every key outside the target, text tokens included.
    Literal,
}

/// Where the visual tokens sit in the full sequence and which are targeted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLayout {
    pub visual_range: Range<usize>,
    /// Target sequence positions, a subset of `visual_range`.
    pub target: BTreeSet<usize>,
}

impl TokenLayout {
    pub fn new(visual_range: Range<usize>, target: BTreeSet<usize>) -> Result<Self, AttentionError> {
        if let Some(&t) = target.iter().find(|t| !visual_range.contains(t)) {
            return Err(AttentionError::Layout(format!(
                "target position {t} outside visual range {visual_range:?}"
            )));
        }
        Ok(Self {
            visual_range,
            target,
        })
    }

    /// Layout whose target is every visual token.
    pub fn whole(visual_range: Range<usize>) -> Self {
        let target = visual_range.clone().collect();
        Self {
            visual_range,
            target,
        }
    }

    /// Maps row-major grid indices onto sequence positions, assuming the
    /// visual tokens occupy `visual_range` in grid order.
    pub fn from_grid_indices(
        visual_range: Range<usize>,
        grid_indices: impl IntoIterator<Item = usize>,
    ) -> Result<Self, AttentionError> {
        let start = visual_range.start;
        let target = grid_indices.into_iter().map(|i| start + i).collect();
        Self::new(visual_range, target)
    }

    fn covers_all_visual(&self) -> bool {
        self.target.len() == self.visual_range.len()
    }
}

/// Per-key multiplicative factors applied to the exponentiated logits.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaVector(Vec<f64>);

impl GammaVector {
    pub fn new(factors: Vec<f64>) -> Result<Self, AttentionError> {
        if let Some(v) = factors.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(AttentionError::ParameterRange(format!("factor {v} is not a finite non-negative number")));
        }
        if !factors.iter().any(|&v| v > 0.0) {
            return Err(AttentionError::EmptySupport);
        }
        Ok(Self(factors))
    }

    pub fn uniform(n: usize, value: f64) -> Result<Self, AttentionError> {
        Self::new(vec![value; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_finite(row: &[f64]) -> Result<(), AttentionError> {
    match row.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(AttentionError::NonFinite(i)),
        None => Ok(()),
    }
}

/// Max-subtracted softmax of one logit row.
pub fn softmax_row(row: &[f64]) -> Result<Vec<f64>, AttentionError> {
    check_finite(row)?;
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Builds `Γ` for a sequence of length `n`.
///
/// The targeted setting (target a strict subset of the visual tokens)
/// requires `alpha >= 1` and `0 <= beta <= 1`; scaling every visual token
/// requires `alpha > 0`.
pub fn build_gamma(
    n: usize,
    layout: &TokenLayout,
    alpha: f64,
    beta: f64,
    mode: BackgroundMode,
) -> Result<GammaVector, AttentionError> {
    if layout.visual_range.end > n {
        return Err(AttentionError::Layout(format!(
            "visual range {:?} exceeds sequence length {n}",
            layout.visual_range
        )));
    }
    if !(alpha.is_finite() && beta.is_finite()) {
        return Err(AttentionError::ParameterRange(format!("non-finite factors ({alpha}, {beta})")));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(AttentionError::ParameterRange(format!("beta {beta} outside [0, 1]")));
    }
    if layout.covers_all_visual() {
        if alpha <= 0.0 {
            return Err(AttentionError::ParameterRange(format!(
                "alpha {alpha} must be > 0 when scaling all visual tokens"
            )));
        }
    } else if alpha < 1.0 {
        return Err(AttentionError::ParameterRange(format!(
            "alpha {alpha} must be >= 1 in the targeted setting"
        )));
    }

    let factors = (0..n)
        .map(|k| {
            if layout.target.contains(&k) {
                alpha
            } else if mode == BackgroundMode::Literal || layout.visual_range.contains(&k) {
                beta
            } else {
                1.0
            }
        })
        .collect();
    GammaVector::new(factors)
}

/// Modulated attention in the logit-shift form: softmax over `z_j + log Γ_j`
/// restricted to the keys with `Γ_j > 0`.
pub fn modulate_row(row: &[f64], gamma: &GammaVector) -> Result<Vec<f64>, AttentionError> {
    let factors = gamma.as_slice();
    check_lengths(row, factors)?;
    let shifted: Vec<Option<f64>> = row
        .iter()
        .zip(factors)
        .map(|(&z, &g)| (g > 0.0).then(|| z + g.ln()))
        .collect();
    let max = shifted.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = shifted
        .iter()
        .map(|s| s.map_or(0.0, |v| (v - max).exp()))
        .collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Modulated attention in the exponent-scaling form:
/// `Γ_j·exp(z_j − m) / Σ_k Γ_k·exp(z_k − m)`, `m` the largest supported logit.
pub fn modulate_row_scaled(row: &[f64], gamma: &GammaVector) -> Result<Vec<f64>, AttentionError> {
    let factors = gamma.as_slice();
    check_lengths(row, factors)?;
    let max = row
        .iter()
        .zip(factors)
        .filter(|(_, &g)| g > 0.0)
        .map(|(&z, _)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = row
        .iter()
        .zip(factors)
        .map(|(&z, &g)| if g > 0.0 { g * (z - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / sum).collect())
}

fn check_lengths(row: &[f64], factors: &[f64]) -> Result<(), AttentionError> {
    if row.len() != factors.len() {
        return Err(AttentionError::LengthMismatch {
            logits: row.len(),
            factors: factors.len(),
        });
    }
    check_finite(row)?;
    if !factors.iter().any(|&g| g > 0.0) {
        return Err(AttentionError::EmptySupport);
    }
    Ok(())
}

/// Attention row under a modulation configuration.
///
/// `layout.target` must hold the tokens of `config.region()`; for the
/// whole-image family every visual token is targeted regardless. The
/// baseline returns [`softmax_row`] unchanged.
pub fn modulated_attention(
    row: &[f64],
    config: &ModulationConfig,
    layout: &TokenLayout,
    mode: BackgroundMode,
) -> Result<Vec<f64>, AttentionError> {
    if config.is_baseline() {
        return softmax_row(row);
    }
    let gamma = if config.region().is_local() {
        build_gamma(row.len(), layout, config.alpha(), config.beta(), mode)?
    } else {
        let whole = TokenLayout::whole(layout.visual_range.clone());
        build_gamma(row.len(), &whole, config.alpha(), config.beta(), mode)?
    };
    modulate_row(row, &gamma)
}
