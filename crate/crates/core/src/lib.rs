//! Layer-wise LMO-based optimization.
//!
//! Parameters are split into groups `X = [X₁, …, X_p]`, each a dense matrix
//! equipped with its own norm. Every step moves each group to the minimizer
//! of a linear model over a norm ball of radius `tᵢᵏ` around the current
//! iterate. Norm choices recover Muon, unScion, layer-wise normalized GD and
//! layer-wise signGD.
//!
//! Modules:
//! - [`linalg`]: dense matrices, reduced SVD, Newton–Schulz orthogonalization.
//! - [`norms`]: primal/dual norms and LMO directions per group.
//! - [`optimizer`]: deterministic and momentum steps, schedules, presets.
//! - [`problems`]: synthetic objectives with analytic gradients.
//! - [`smoothness`]: trajectory smoothness, `(L⁰, L¹)` fitting, stepsize suggestion.
//! - [`theory`]: closed-form iteration counts and bounds.
//! - [`harness`]: configs, runs, trace files and reports used by the CLI.

pub mod harness;
pub mod linalg;
pub mod norms;
pub mod optimizer;
pub mod problems;
pub mod smoothness;
pub mod theory;

pub use linalg::{Matrix, NewtonSchulz, ReducedSvd};
pub use norms::{NormFamily, NormSpec, SpectralBackend};
pub use optimizer::{Gluon, GroupRole, MomentumRule, ParamGroup, Preset, StepsizeSchedule};
