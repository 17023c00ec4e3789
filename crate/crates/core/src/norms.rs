//! Per-group norm geometry: primal and dual norms, the unit-ball LMO, and
//! the product-space max-norm.
//!
//! Each [`NormSpec`] is a positive multiple `α` of one of three base norms.
//! Scaling the primal norm by `α` divides the dual norm by `α`, and the LMO
//! over the unit ball becomes `1/α` times the base LMO.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{
    entrywise_l1, frobenius_norm, max_abs_entry, ns_orthogonalize, nuclear_norm, reduced_svd_default, spectral_norm,
    LinalgError, Matrix, NewtonSchulz,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NormError {
    #[error("norm scale must be a positive finite number, got {0}")]
    BadScale(f64),
    #[error("group lists have different lengths ({specs} specs, {mats} matrices)")]
    LengthMismatch { specs: usize, mats: usize },
    #[error("max-norm over an empty group list")]
    Empty,
    #[error("cannot parse norm spec {0:?}")]
    Parse(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormFamily {
    /// α·‖·‖₂→₂, dual (1/α)·nuclear.
    Spectral,
    /// α·‖·‖₁→∞ (largest absolute entry), dual (1/α)·entrywise ℓ₁.
    MaxEntry,
    /// α·‖·‖_F, self-dual up to 1/α.
    Euclidean,
}

impl NormFamily {
    pub fn name(self) -> &'static str {
        match self {
            NormFamily::Spectral => "spectral",
            NormFamily::MaxEntry => "max",
            NormFamily::Euclidean => "euclid",
        }
    }
}

/// How the spectral LMO computes `U Vᵀ`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum SpectralBackend {
    #[default]
    Exact,
    NewtonSchulz(NewtonSchulz),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    family: NormFamily,
    scale: f64,
}

impl NormSpec {
    pub fn new(family: NormFamily, scale: f64) -> Result<Self, NormError> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(NormError::BadScale(scale));
        }
        Ok(Self { family, scale })
    }

    pub fn spectral(scale: f64) -> Result<Self, NormError> {
        Self::new(NormFamily::Spectral, scale)
    }

    pub fn max_entry(scale: f64) -> Result<Self, NormError> {
        Self::new(NormFamily::MaxEntry, scale)
    }

    pub fn euclidean(scale: f64) -> Result<Self, NormError> {
        Self::new(NormFamily::Euclidean, scale)
    }

    pub fn family(&self) -> NormFamily {
        self.family
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Same family, scale multiplied by `c`.
    pub fn rescaled(&self, c: f64) -> Result<Self, NormError> {
        Self::new(self.family, self.scale * c)
    }

    pub fn primal_norm(&self, x: &Matrix) -> Result<f64, NormError> {
        let base = match self.family {
            NormFamily::Spectral => spectral_norm(x)?,
            NormFamily::MaxEntry => max_abs_entry(x),
            NormFamily::Euclidean => frobenius_norm(x),
        };
        Ok(self.scale * base)
    }

    pub fn dual_norm(&self, g: &Matrix) -> Result<f64, NormError> {
        let base = match self.family {
            NormFamily::Spectral => nuclear_norm(g)?,
            NormFamily::MaxEntry => entrywise_l1(g),
            NormFamily::Euclidean => frobenius_norm(g),
        };
        Ok(base / self.scale)
    }

    /// argmin of ⟨g, D⟩ over the unit ball, with the exact spectral backend.
    pub fn lmo_direction(&self, g: &Matrix) -> Result<Matrix, NormError> {
        self.lmo_direction_with(g, &SpectralBackend::Exact)
    }

    /// argmin of ⟨g, D⟩ over the unit ball. Zero gradients map to the zero
    /// direction; zero entries get sign 0 under the max-entry norm.
    pub fn lmo_direction_with(&self, g: &Matrix, backend: &SpectralBackend) -> Result<Matrix, NormError> {
        if g.is_zero() {
            return Ok(Matrix::zeros(g.rows(), g.cols()));
        }
        let inv = -1.0 / self.scale;
        let d = match self.family {
            NormFamily::Spectral => {
                let polar = match backend {
                    SpectralBackend::Exact => reduced_svd_default(g)?.polar_factor(),
                    SpectralBackend::NewtonSchulz(ns) => ns_orthogonalize(g, ns)?,
                };
                polar.scale(inv)
            }
            NormFamily::MaxEntry => g.map(|v| {
                if v > 0.0 {
                    inv
                } else if v < 0.0 {
                    -inv
                } else {
                    0.0
                }
            }),
            NormFamily::Euclidean => g.scale(inv / frobenius_norm(g)),
        };
        Ok(d)
    }

    /// `x + radius · lmo_direction(g)`: the minimizer of ⟨g, ·⟩ over the ball
    /// of the given radius centred at `x`.
    pub fn lmo_step(&self, x: &Matrix, g: &Matrix, radius: f64) -> Result<Matrix, NormError> {
        self.lmo_step_with(x, g, radius, &SpectralBackend::Exact)
    }

    pub fn lmo_step_with(
        &self,
        x: &Matrix,
        g: &Matrix,
        radius: f64,
        backend: &SpectralBackend,
    ) -> Result<Matrix, NormError> {
        x.ensure_shape(g.rows(), g.cols())?;
        let d = self.lmo_direction_with(g, backend)?;
        Ok(x.axpy(radius, &d))
    }
}

impl fmt::Display for NormSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.family.name(), self.scale)
    }
}

impl FromStr for NormSpec {
    type Err = NormError;

    /// Parses `family[:scale]`, e.g. `spectral:1.5`, `max:2`, `euclid`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.trim().splitn(2, ':');
        let family = match parts.next().unwrap_or_default() {
            "spectral" => NormFamily::Spectral,
            "max" | "max_entry" => NormFamily::MaxEntry,
            "euclid" | "euclidean" => NormFamily::Euclidean,
            _ => return Err(NormError::Parse(s.to_string())),
        };
        let scale = match parts.next() {
            Some(v) => v.parse().map_err(|_| NormError::Parse(s.to_string()))?,
            None => 1.0,
        };
        Self::new(family, scale)
    }
}

/// ‖X‖_max = maxᵢ ‖Xᵢ‖₍ᵢ₎ over the product space.
pub fn max_norm(specs: &[NormSpec], xs: &[Matrix]) -> Result<f64, NormError> {
    check_aligned(specs, xs)?;
    specs
        .iter()
        .zip(xs)
        .try_fold(0.0_f64, |acc, (s, x)| Ok(acc.max(s.primal_norm(x)?)))
}

/// Dual of the max-norm: Σᵢ ‖Yᵢ‖₍ᵢ₎⋆.
pub fn max_norm_dual(specs: &[NormSpec], ys: &[Matrix]) -> Result<f64, NormError> {
    check_aligned(specs, ys)?;
    specs
        .iter()
        .zip(ys)
        .try_fold(0.0_f64, |acc, (s, y)| Ok(acc + s.dual_norm(y)?))
}

fn check_aligned(specs: &[NormSpec], xs: &[Matrix]) -> Result<(), NormError> {
    if specs.len() != xs.len() {
        return Err(NormError::LengthMismatch {
            specs: specs.len(),
            mats: xs.len(),
        });
    }
    if specs.is_empty() {
        return Err(NormError::Empty);
    }
    Ok(())
}
