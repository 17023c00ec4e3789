//! Closed-form iteration counts and bounds.
//!
//! All formulas are evaluated in `f64` and ceilings are applied last.
//! `H = (1/p) Σⱼ 1/L¹ⱼ` denotes the harmonic-mean factor of the weighted variants.

use std::f64::consts::{E, SQRT_2};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("invalid rate inputs: {0}")]
    Invalid(String),
    #[error("the weighted variant requires L1 > 0 for every group (use the plain variant)")]
    WeightedNeedsPositiveL1,
    #[error("L0 and L1 are all zero; the bound is vacuous")]
    AllZero,
    #[error("branch does not match the constants: {0}")]
    Branch(String),
    #[error("iteration count is not representable: {0}")]
    Overflow(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateInputs {
    /// `Δ⁰ = f(X⁰) − f_inf`
    pub delta0: f64,
    pub l0: Vec<f64>,
    pub l1: Vec<f64>,
    pub epsilon: f64,
    pub sigma: f64,
    /// PŁ constant.
    pub mu: Option<f64>,
    /// Relative noise level of the adaptive stochastic stepsizes.
    pub zeta: Option<f64>,
    /// Base radii `tᵢ` of `tᵢᵏ = tᵢ(k+1)^(-3/4)`, used by the `L¹ = 0`
    /// branch of the stochastic bound.
    pub radii: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Plain,
    Weighted,
}

impl RateInputs {
    pub fn new(delta0: f64, l0: Vec<f64>, l1: Vec<f64>, epsilon: f64) -> Self {
        Self {
            delta0,
            l0,
            l1,
            epsilon,
            sigma: 0.0,
            mu: None,
            zeta: None,
            radii: None,
        }
    }

    pub fn p(&self) -> usize {
        self.l0.len()
    }

    pub fn validate(&self) -> Result<(), TheoryError> {
        let bad = |m: String| Err(TheoryError::Invalid(m));
        if self.l0.is_empty() {
            return bad("at least one group is required".into());
        }
        if self.l0.len() != self.l1.len() {
            return bad(format!("{} L0 values but {} L1 values", self.l0.len(), self.l1.len()));
        }
        if let Some(r) = &self.radii {
            if r.len() != self.l0.len() {
                return bad(format!("{} radii for {} groups", r.len(), self.l0.len()));
            }
            if r.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
                return bad("radii must be positive".into());
            }
        }
        if self.l0.iter().chain(&self.l1).any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("L0 and L1 must be finite and nonnegative".into());
        }
        if !(self.delta0 >= 0.0 && self.delta0.is_finite()) {
            return bad(format!("delta0 must be finite and nonnegative, got {}", self.delta0));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be nonnegative, got {}", self.sigma));
        }
        Ok(())
    }

    fn sum_l0(&self) -> f64 {
        self.l0.iter().sum()
    }

    fn l0_max(&self) -> f64 {
        self.l0.iter().copied().fold(0.0, f64::max)
    }

    fn l1_max(&self) -> f64 {
        self.l1.iter().copied().fold(0.0, f64::max)
    }

    /// `H = (1/p) Σⱼ 1/L¹ⱼ`
    fn harmonic(&self) -> Result<f64, TheoryError> {
        if self.l1.contains(&0.0) {
            return Err(TheoryError::WeightedNeedsPositiveL1);
        }
        Ok(self.l1.iter().map(|v| 1.0 / v).sum::<f64>() / self.p() as f64)
    }

    fn zeta(&self) -> Result<f64, TheoryError> {
        match self.zeta {
            Some(z) if (0.0..1.0).contains(&z) => Ok(z),
            Some(z) => Err(TheoryError::Invalid(format!("zeta must lie in [0, 1), got {z}"))),
            None => Err(TheoryError::Invalid("zeta is required".into())),
        }
    }

    fn mu(&self) -> Result<f64, TheoryError> {
        match self.mu {
            Some(m) if m > 0.0 && m.is_finite() => Ok(m),
            Some(m) => Err(TheoryError::Invalid(format!("mu must be positive, got {m}"))),
            None => Err(TheoryError::Invalid("mu is required".into())),
        }
    }
}

fn ceil_count(v: f64) -> Result<u64, TheoryError> {
    if !v.is_finite() || v < 0.0 || v >= u64::MAX as f64 {
        return Err(TheoryError::Overflow(v));
    }
    Ok(v.ceil() as u64)
}

/// Pre-ceiling `(first, second)` terms of the plain count with noise level `ζ`:
/// `2Δ⁰ΣL⁰ / ((1−ζ)²ε²)` and `2(1+ζ)Δ⁰L¹max / ((1−ζ)²ε)`.
fn plain_terms(inp: &RateInputs, zeta: f64) -> (f64, f64) {
    let shrink = (1.0 - zeta) * (1.0 - zeta);
    let eps = inp.epsilon;
    let first = 2.0 * inp.delta0 * inp.sum_l0() / (eps * eps * shrink);
    let second = 2.0 * inp.delta0 * inp.l1_max() * (1.0 + zeta) / (eps * shrink);
    (first, second)
}

/// Pre-ceiling `(first, second)` terms of the weighted count with noise level `ζ`:
/// `2Δ⁰Σ(L⁰/L¹²) / ((1−ζ)²ε²H²)` and `2(1+ζ)Δ⁰ / ((1−ζ)²εH)`.
fn weighted_terms(inp: &RateInputs, zeta: f64) -> Result<(f64, f64), TheoryError> {
    let h = inp.harmonic()?;
    let shrink = (1.0 - zeta) * (1.0 - zeta);
    let eps = inp.epsilon;
    let ratio: f64 = inp.l0.iter().zip(&inp.l1).map(|(a, b)| a / (b * b)).sum();
    let first = 2.0 * inp.delta0 * ratio / (eps * eps * h * h * shrink);
    let second = 2.0 * inp.delta0 * (1.0 + zeta) / (eps * h * shrink);
    Ok((first, second))
}

fn check_not_all_zero(inp: &RateInputs) -> Result<(), TheoryError> {
    if inp.l0.iter().chain(&inp.l1).all(|&v| v == 0.0) {
        return Err(TheoryError::AllZero);
    }
    Ok(())
}

/// Pre-ceiling terms of [`det_iterations_plain`].
pub fn det_plain_terms(inp: &RateInputs) -> Result<(f64, f64), TheoryError> {
    inp.validate()?;
    check_not_all_zero(inp)?;
    Ok(plain_terms(inp, 0.0))
}

/// Pre-ceiling terms of [`det_iterations_weighted`].
pub fn det_weighted_terms(inp: &RateInputs) -> Result<(f64, f64), TheoryError> {
    inp.validate()?;
    weighted_terms(inp, 0.0)
}

/// Iterations after which the adaptive deterministic method has
/// `min_k Σᵢ ‖∇ᵢf(Xᵏ)‖⋆ ≤ ε`:
/// `⌈2Δ⁰ΣL⁰/ε² + 2Δ⁰L¹max/ε⌉`.
pub fn det_iterations_plain(inp: &RateInputs) -> Result<u64, TheoryError> {
    let (a, b) = det_plain_terms(inp)?;
    ceil_count(a + b)
}

/// Iterations after which the harmonic-weighted criterion drops below `ε`:
/// `⌈2Δ⁰Σ(L⁰ᵢ/L¹ᵢ²)/(ε²H²) + 2Δ⁰/(εH)⌉`.
pub fn det_iterations_weighted(inp: &RateInputs) -> Result<u64, TheoryError> {
    let (a, b) = det_weighted_terms(inp)?;
    ceil_count(a + b)
}

/// Adaptive stochastic stepsizes. With `ζ = 0` this is bit-for-bit the
/// deterministic count of the same variant.
pub fn adaptive_stoch_iterations(inp: &RateInputs, variant: Variant) -> Result<u64, TheoryError> {
    inp.validate()?;
    let zeta = inp.zeta()?;
    let (a, b) = match variant {
        Variant::Plain => {
            check_not_all_zero(inp)?;
            plain_terms(inp, zeta)
        }
        Variant::Weighted => weighted_terms(inp, zeta)?,
    };
    ceil_count(a + b)
}

/// Iterations to reach `f(Xᴷ) − f_inf ≤ ε` under the layer-wise PŁ condition.
///
/// General: `⌈ΣL⁰Δ⁰/(με) + √2·L¹maxΔ⁰/√(με)⌉`.
/// `L¹ = 0`: `⌈(L⁰max/μ)·log(Δ⁰/ε)⌉`, and 0 when `ε ≥ Δ⁰`.
pub fn pl_iterations(inp: &RateInputs, l1_zero: bool) -> Result<u64, TheoryError> {
    inp.validate()?;
    let mu = inp.mu()?;
    let eps = inp.epsilon;
    if l1_zero {
        if inp.l1.iter().any(|&v| v != 0.0) {
            return Err(TheoryError::Branch("the logarithmic branch requires L1 = 0".into()));
        }
        if eps >= inp.delta0 {
            return Ok(0);
        }
        return ceil_count(inp.l0_max() / mu * (inp.delta0 / eps).ln());
    }
    check_not_all_zero(inp)?;
    let first = inp.sum_l0() * inp.delta0 / (mu * eps);
    let second = SQRT_2 * inp.l1_max() * inp.delta0 / (mu * eps).sqrt();
    ceil_count(first + second)
}

/// Weights `wᵢ` such that the stochastic bound controls
/// `min_k Σᵢ wᵢ E‖∇ᵢf(Xᵏ)‖⋆`: the base radii `tᵢ` when `L¹ = 0`, and
/// `1/(12L¹ᵢ)` otherwise.
pub fn stoch_criterion_weights(inp: &RateInputs, l1_zero: bool) -> Result<Vec<f64>, TheoryError> {
    inp.validate()?;
    if l1_zero {
        if inp.l1.iter().any(|&v| v != 0.0) {
            return Err(TheoryError::Branch("the L1 = 0 branch requires L1 = 0".into()));
        }
        inp.radii
            .clone()
            .ok_or_else(|| TheoryError::Branch("the L1 = 0 branch requires base radii".into()))
    } else {
        if inp.l1.contains(&0.0) {
            return Err(TheoryError::Branch(
                "the L1 > 0 branch requires L1 > 0 for every group".into(),
            ));
        }
        Ok(inp.l1.iter().map(|l| 1.0 / (12.0 * l)).collect())
    }
}

/// Right-hand side of the momentum method's bound after `K` iterations
/// with `βᵏ = 1 − (k+1)^(-1/2)` and `tᵢᵏ = tᵢ(k+1)^(-3/4)`.
///
/// `L¹ = 0`: `Δ⁰/K^¼ + K^(-¼) Σᵢ [σtᵢ(7 + 2√(2e²)·log K) + L⁰ᵢtᵢ²(87/2 + 14·log K)]`.
///
/// `L¹ ≠ 0`, `tᵢ = 1/(12L¹ᵢ)`:
/// `2Δ⁰/K^¼ + K^(-¼) Σᵢ [σ/(6L¹ᵢ)(7 + 2√(2e²)·log K) + L⁰ᵢ/(144L¹ᵢ²)(87 + 28·log K)]`.
pub fn stoch_bound(k: u64, inp: &RateInputs, l1_zero: bool) -> Result<f64, TheoryError> {
    if k == 0 {
        return Err(TheoryError::Invalid("K must be at least 1".into()));
    }
    let weights = stoch_criterion_weights(inp, l1_zero)?;
    let log_k = (k as f64).ln();
    let quarter = (k as f64).powf(0.25);
    // √(2e²) = e·√2
    let noise_factor = 7.0 + 2.0 * (E * SQRT_2) * log_k;
    let sigma = inp.sigma;
    let sum: f64 = if l1_zero {
        weights
            .iter()
            .zip(&inp.l0)
            .map(|(t, l0)| sigma * t * noise_factor + l0 * t * t * (87.0 / 2.0 + 14.0 * log_k))
            .sum()
    } else {
        inp.l0
            .iter()
            .zip(&inp.l1)
            .map(|(l0, l1)| sigma / (6.0 * l1) * noise_factor + l0 / (144.0 * l1 * l1) * (87.0 + 28.0 * log_k))
            .sum()
    };
    let lead = if l1_zero { inp.delta0 } else { 2.0 * inp.delta0 };
    Ok(lead / quarter + sum / quarter)
}

/// `Σᵢ wᵢ‖gᵢ‖⋆` with `wᵢ = (1/L¹ᵢ) / H`; the weights sum to `p`.
pub fn weighted_grad_criterion(l1: &[f64], g_dual: &[f64]) -> Result<f64, TheoryError> {
    Ok(criterion_weights(l1, g_dual.len())?
        .iter()
        .zip(g_dual)
        .map(|(w, g)| w * g)
        .sum())
}

/// `wᵢ = (1/L¹ᵢ) / ((1/p) Σⱼ 1/L¹ⱼ)`
pub fn criterion_weights(l1: &[f64], expected_len: usize) -> Result<Vec<f64>, TheoryError> {
    if l1.is_empty() || l1.len() != expected_len {
        return Err(TheoryError::Invalid(format!(
            "{} L1 values for {} gradients",
            l1.len(),
            expected_len
        )));
    }
    if l1.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(TheoryError::WeightedNeedsPositiveL1);
    }
    let h = l1.iter().map(|v| 1.0 / v).sum::<f64>() / l1.len() as f64;
    Ok(l1.iter().map(|v| (1.0 / v) / h).collect())
}
