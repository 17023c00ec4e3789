//! The Gluon iteration over parameter groups.
//!
//! Deterministic step, per group `i`:
//!
//! ```text
//! tᵢᵏ    = radius(schedule, k, ‖∇ᵢf(Xᵏ)‖₍ᵢ₎⋆)
//! Xᵢᵏ⁺¹ = Xᵢᵏ + tᵢᵏ · LMO₍ᵢ₎(∇ᵢf(Xᵏ))
//! ```
//!
//! The stochastic step first folds the stochastic gradient into a momentum
//! buffer `Mᵢᵏ = βᵏ Mᵢᵏ⁻¹ + (1 − βᵏ) gᵢᵏ` and feeds `Mᵢᵏ` to the LMO instead.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::linalg::Matrix;
use crate::norms::{NormError, NormSpec, SpectralBackend};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("group {group:?}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        group: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("expected {expected} gradient matrices, got {got}")]
    GroupCount { expected: usize, got: usize },
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("invalid momentum rule: {0}")]
    Momentum(String),
    #[error("invalid preset: {0}")]
    Preset(String),
    #[error("duplicate or malformed group id {0:?}")]
    GroupId(String),
    #[error("group {group:?}: {source}")]
    Norm {
        group: String,
        #[source]
        source: NormError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepsizeSchedule {
    Constant {
        t: f64,
    },
    /// `tᵏ = t_base · (k+1)^(-3/4)`
    PolynomialDecay {
        t_base: f64,
    },
    /// `tᵏ = ‖g‖⋆ / (L⁰ + L¹‖g‖⋆)`
    AdaptiveDeterministic {
        l0: f64,
        l1: f64,
    },
    /// `tᵏ = (1−ζ)‖g‖⋆ / (L⁰ + (1+ζ)L¹‖g‖⋆)`
    AdaptiveStochastic {
        l0: f64,
        l1: f64,
        zeta: f64,
    },
}

impl StepsizeSchedule {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |msg: String| Err(OptimError::Schedule(msg));
        match *self {
            Self::Constant { t } if !(t > 0.0 && t.is_finite()) => bad(format!("constant radius {t}")),
            Self::PolynomialDecay { t_base } if !(t_base > 0.0 && t_base.is_finite()) => {
                bad(format!("polynomial base radius {t_base}"))
            }
            Self::AdaptiveDeterministic { l0, l1 } | Self::AdaptiveStochastic { l0, l1, .. }
                if !(l0 >= 0.0 && l1 >= 0.0 && l0.is_finite() && l1.is_finite()) =>
            {
                bad(format!(
                    "smoothness constants must be nonnegative, got L0={l0}, L1={l1}"
                ))
            }
            Self::AdaptiveDeterministic { l0, l1 } | Self::AdaptiveStochastic { l0, l1, .. }
                if l0 == 0.0 && l1 == 0.0 =>
            {
                bad("L0 and L1 cannot both be zero".into())
            }
            Self::AdaptiveStochastic { zeta, .. } if !(0.0..1.0).contains(&zeta) => {
                bad(format!("zeta must lie in [0, 1), got {zeta}"))
            }
            _ => Ok(()),
        }
    }

    pub fn is_adaptive(&self) -> bool {
        matches!(
            self,
            Self::AdaptiveDeterministic { .. } | Self::AdaptiveStochastic { .. }
        )
    }

    /// Radius for iteration `k` given the dual norm of the driving matrix.
    /// Adaptive variants return 0 when the driver vanishes (frozen step).
    pub fn radius_at(&self, k: u64, driver_dual: f64) -> f64 {
        match *self {
            Self::Constant { t } => t,
            Self::PolynomialDecay { t_base } => t_base * ((k + 1) as f64).powf(-0.75),
            Self::AdaptiveDeterministic { l0, l1 } => {
                if driver_dual == 0.0 {
                    0.0
                } else {
                    driver_dual / (l0 + l1 * driver_dual)
                }
            }
            Self::AdaptiveStochastic { l0, l1, zeta } => {
                if driver_dual == 0.0 {
                    0.0
                } else {
                    (1.0 - zeta) * driver_dual / (l0 + (1.0 + zeta) * l1 * driver_dual)
                }
            }
        }
    }
}

impl fmt::Display for StepsizeSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant { t } => write!(f, "constant:{t}"),
            Self::PolynomialDecay { t_base } => write!(f, "poly:{t_base}"),
            Self::AdaptiveDeterministic { l0, l1 } => write!(f, "adaptive:{l0}:{l1}"),
            Self::AdaptiveStochastic { l0, l1, zeta } => write!(f, "adaptive_stoch:{l0}:{l1}:{zeta}"),
        }
    }
}

impl FromStr for StepsizeSchedule {
    type Err = OptimError;

    /// `constant:T`, `poly:T`, `adaptive:L0:L1`, `adaptive_stoch:L0:L1:ZETA`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let nums = parts[1..]
            .iter()
            .map(|p| p.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| OptimError::Schedule(format!("cannot parse {s:?}")))?;
        let sched = match (parts[0], nums.as_slice()) {
            ("constant", &[t]) => Self::Constant { t },
            ("poly", &[t_base]) => Self::PolynomialDecay { t_base },
            ("adaptive", &[l0, l1]) => Self::AdaptiveDeterministic { l0, l1 },
            ("adaptive_stoch", &[l0, l1, zeta]) => Self::AdaptiveStochastic { l0, l1, zeta },
            _ => return Err(OptimError::Schedule(format!("cannot parse {s:?}"))),
        };
        sched.validate()?;
        Ok(sched)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum MomentumRule {
    /// β ≡ 0
    #[default]
    None,
    Constant(f64),
    /// `βᵏ = 1 − (k+1)^(-1/2)`, so β⁰ = 0.
    SqrtDecay,
}

impl MomentumRule {
    pub fn validate(&self) -> Result<(), OptimError> {
        match *self {
            Self::Constant(b) if !(0.0..1.0).contains(&b) => {
                Err(OptimError::Momentum(format!("beta must lie in [0, 1), got {b}")))
            }
            _ => Ok(()),
        }
    }

    pub fn beta_at(&self, k: u64) -> f64 {
        match *self {
            Self::None => 0.0,
            Self::Constant(b) => b,
            Self::SqrtDecay => 1.0 - 1.0 / ((k + 1) as f64).sqrt(),
        }
    }
}

impl fmt::Display for MomentumRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => write!(f, "none"),
            Self::Constant(b) => write!(f, "constant:{b}"),
            Self::SqrtDecay => write!(f, "sqrt"),
        }
    }
}

impl FromStr for MomentumRule {
    type Err = OptimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let rule = match s.trim() {
            "none" => Self::None,
            "sqrt" => Self::SqrtDecay,
            other => match other.strip_prefix("constant:").map(str::parse::<f64>) {
                Some(Ok(b)) => Self::Constant(b),
                _ => return Err(OptimError::Momentum(format!("cannot parse {s:?}"))),
            },
        };
        rule.validate()?;
        Ok(rule)
    }
}

#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub id: String,
    pub x: Matrix,
    pub norm: NormSpec,
    pub schedule: StepsizeSchedule,
    pub backend: SpectralBackend,
}

impl ParamGroup {
    pub fn new(id: impl Into<String>, x: Matrix, norm: NormSpec, schedule: StepsizeSchedule) -> Self {
        Self {
            id: id.into(),
            x,
            norm,
            schedule,
            backend: SpectralBackend::Exact,
        }
    }

    pub fn with_backend(mut self, backend: SpectralBackend) -> Self {
        self.backend = backend;
        self
    }
}

/// What happened to one group during a step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupStep {
    /// Radius `tᵢᵏ` actually used.
    pub radius: f64,
    /// Dual norm of the matrix fed to the LMO (gradient or momentum).
    pub driver_dual: f64,
    /// True when the driver was zero or the radius was zero, so `Xᵢ` did not move.
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Iteration index the step was taken at.
    pub k: u64,
    pub groups: Vec<GroupStep>,
}

/// Optimizer state: iterates, momentum buffers and the iteration counter.
#[derive(Debug, Clone)]
pub struct Gluon {
    k: u64,
    groups: Vec<ParamGroup>,
    momentum: Vec<Option<Matrix>>,
    momentum_rule: MomentumRule,
}

impl Gluon {
    pub fn new(groups: Vec<ParamGroup>, momentum_rule: MomentumRule) -> Result<Self, OptimError> {
        momentum_rule.validate()?;
        for (i, g) in groups.iter().enumerate() {
            g.schedule.validate()?;
            if g.id.is_empty() || g.id.contains([',', '\n', '\r', '"']) {
                return Err(OptimError::GroupId(g.id.clone()));
            }
            if groups[..i].iter().any(|h| h.id == g.id) {
                return Err(OptimError::GroupId(g.id.clone()));
            }
        }
        let momentum = vec![None; groups.len()];
        Ok(Self {
            k: 0,
            groups,
            momentum,
            momentum_rule,
        })
    }

    /// Overrides the default `M⁰ = first stochastic gradient`.
    pub fn with_initial_momentum(mut self, m0: Vec<Matrix>) -> Result<Self, OptimError> {
        self.check_shapes(&m0)?;
        self.momentum = m0.into_iter().map(Some).collect();
        Ok(self)
    }

    pub fn iteration(&self) -> u64 {
        self.k
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn params(&self) -> Vec<Matrix> {
        self.groups.iter().map(|g| g.x.clone()).collect()
    }

    pub fn momentum(&self) -> &[Option<Matrix>] {
        &self.momentum
    }

    pub fn momentum_rule(&self) -> MomentumRule {
        self.momentum_rule
    }

    fn check_shapes(&self, mats: &[Matrix]) -> Result<(), OptimError> {
        if mats.len() != self.groups.len() {
            return Err(OptimError::GroupCount {
                expected: self.groups.len(),
                got: mats.len(),
            });
        }
        for (g, m) in self.groups.iter().zip(mats) {
            if !g.x.same_shape(m) {
                return Err(OptimError::ShapeMismatch {
                    group: g.id.clone(),
                    expected: g.x.shape(),
                    got: m.shape(),
                });
            }
        }
        Ok(())
    }

    fn move_group(group: &mut ParamGroup, k: u64, driver: &Matrix) -> Result<GroupStep, OptimError> {
        let wrap = |source| OptimError::Norm {
            group: group.id.clone(),
            source,
        };
        let driver_dual = group.norm.dual_norm(driver).map_err(wrap)?;
        let radius = group.schedule.radius_at(k, driver_dual);
        let frozen = driver_dual == 0.0 || radius == 0.0;
        if !frozen {
            group.x = group
                .norm
                .lmo_step_with(&group.x, driver, radius, &group.backend)
                .map_err(wrap)?;
        }
        Ok(GroupStep {
            radius,
            driver_dual,
            frozen,
        })
    }

    /// One deterministic step driven by exact gradients. Momentum is untouched.
    pub fn step_deterministic(&mut self, grads: &[Matrix]) -> Result<StepReport, OptimError> {
        self.check_shapes(grads)?;
        let k = self.k;
        let groups = self
            .groups
            .iter_mut()
            .zip(grads)
            .map(|(g, grad)| Self::move_group(g, k, grad))
            .collect::<Result<Vec<_>, _>>()?;
        self.k += 1;
        Ok(StepReport { k, groups })
    }

    /// One momentum step driven by stochastic gradients.
    pub fn step_stochastic(&mut self, grads: &[Matrix]) -> Result<StepReport, OptimError> {
        self.check_shapes(grads)?;
        let k = self.k;
        let beta = self.momentum_rule.beta_at(k);
        let mut out = Vec::with_capacity(self.groups.len());
        for ((group, buf), grad) in self.groups.iter_mut().zip(&mut self.momentum).zip(grads) {
            let m = match buf.take() {
                Some(prev) if beta != 0.0 => prev.scale(beta).axpy(1.0 - beta, grad),
                _ => grad.clone(),
            };
            let step = Self::move_group(group, k, &m)?;
            *buf = Some(m);
            out.push(step);
        }
        self.k += 1;
        Ok(StepReport { k, groups: out })
    }
}

/// Structural role of a parameter group, used by presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupRole {
    Hidden,
    Head,
    Bias,
    /// A 4D kernel reshaped to `c_out × (c_in·k²)`.
    Conv {
        c_in: usize,
        c_out: usize,
        kernel: usize,
    },
}

impl FromStr for GroupRole {
    type Err = OptimError;

    /// `hidden`, `head`, `bias`, or `conv:C_IN:C_OUT:K`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        match parts.as_slice() {
            ["hidden"] => Ok(Self::Hidden),
            ["head"] => Ok(Self::Head),
            ["bias"] => Ok(Self::Bias),
            ["conv", a, b, c] => {
                let p = |v: &str| {
                    v.parse::<usize>()
                        .ok()
                        .filter(|&n| n > 0)
                        .ok_or_else(|| OptimError::Preset(format!("bad conv role {s:?}")))
                };
                Ok(Self::Conv {
                    c_in: p(a)?,
                    c_out: p(b)?,
                    kernel: p(c)?,
                })
            }
            _ => Err(OptimError::Preset(format!("unknown role {s:?}"))),
        }
    }
}

impl fmt::Display for GroupRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Hidden => write!(f, "hidden"),
            Self::Head => write!(f, "head"),
            Self::Bias => write!(f, "bias"),
            Self::Conv { c_in, c_out, kernel } => write!(f, "conv:{c_in}:{c_out}:{kernel}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Muon,
    UnscionLlm,
    UnscionCnn,
    NormalizedGd,
    SignGd,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Muon,
        Preset::UnscionLlm,
        Preset::UnscionCnn,
        Preset::NormalizedGd,
        Preset::SignGd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Muon => "muon",
            Preset::UnscionLlm => "unscion_llm",
            Preset::UnscionCnn => "unscion_cnn",
            Preset::NormalizedGd => "normalized_gd",
            Preset::SignGd => "sign_gd",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Preset::Muon => "spectral norm on every group: X - t*U*V^T",
            Preset::UnscionLlm => {
                "sqrt(n/m)*spectral on hidden groups, n*max-entry on the head, sqrt(1/m)*euclid on biases"
            }
            Preset::UnscionCnn => {
                "k^2*sqrt(Cin/Cout)*spectral on conv kernels, sqrt(1/Cout)*euclid on biases, n*max-entry on the head"
            }
            Preset::NormalizedGd => "euclidean norm on every group: X - t*G/||G||_F",
            Preset::SignGd => "max-entry norm on every group: X - t*sign(G)",
        }
    }

    /// Norm specs for groups of the given shapes. For the unScion presets,
    /// groups without an explicit role are hidden layers, except the last,
    /// which is the head.
    pub fn norms(self, shapes: &[(usize, usize)], roles: Option<&[GroupRole]>) -> Result<Vec<NormSpec>, OptimError> {
        if let Some(r) = roles {
            if r.len() != shapes.len() {
                return Err(OptimError::Preset(format!(
                    "{} roles for {} groups",
                    r.len(),
                    shapes.len()
                )));
            }
        }
        if shapes.iter().any(|&(m, n)| m == 0 || n == 0) {
            return Err(OptimError::Preset("group shapes must be positive".into()));
        }
        let last = shapes.len().saturating_sub(1);
        let role_of = |i: usize| match roles {
            Some(r) => r[i],
            None if i == last => GroupRole::Head,
            None => GroupRole::Hidden,
        };
        let wrap = |e: NormError| OptimError::Preset(e.to_string());
        shapes
            .iter()
            .enumerate()
            .map(|(i, &(m, n))| {
                let (m_f, n_f) = (m as f64, n as f64);
                match self {
                    Preset::Muon => NormSpec::spectral(1.0),
                    Preset::NormalizedGd => NormSpec::euclidean(1.0),
                    Preset::SignGd => NormSpec::max_entry(1.0),
                    Preset::UnscionLlm | Preset::UnscionCnn => match role_of(i) {
                        GroupRole::Hidden => NormSpec::spectral((n_f / m_f).sqrt()),
                        GroupRole::Head => NormSpec::max_entry(n_f),
                        GroupRole::Bias => {
                            if n != 1 && m != 1 {
                                return Err(OptimError::Preset(format!(
                                    "bias group {i} must be a vector, got {m}x{n}"
                                )));
                            }
                            NormSpec::euclidean((1.0 / m.max(n) as f64).sqrt())
                        }
                        GroupRole::Conv { c_in, c_out, kernel } => {
                            if self == Preset::UnscionLlm {
                                return Err(OptimError::Preset("conv role is only valid for unscion_cnn".into()));
                            }
                            if (m, n) != (c_out, c_in * kernel * kernel) {
                                return Err(OptimError::Preset(format!(
                                    "conv group {i} must be reshaped to {c_out}x{}, got {m}x{n}",
                                    c_in * kernel * kernel
                                )));
                            }
                            let k2 = (kernel * kernel) as f64;
                            NormSpec::spectral(k2 * (c_in as f64 / c_out as f64).sqrt())
                        }
                    },
                }
                .map_err(wrap)
            })
            .collect()
    }
}

impl FromStr for Preset {
    type Err = OptimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s.trim())
            .ok_or_else(|| OptimError::Preset(format!("unknown preset {s:?}")))
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
