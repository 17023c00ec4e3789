//! Synthetic objectives with analytic gradients.
//!
//! Every objective works on a list of matrices, one per parameter group, and
//! reports whatever smoothness constants are known for it.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::linalg::{frobenius_norm, Matrix};
use crate::norms::{NormFamily, NormSpec};
use crate::optimizer::GroupRole;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("invalid problem parameter: {0}")]
    Invalid(String),
    #[error("expected {expected} groups, got {got}")]
    GroupCount { expected: usize, got: usize },
    #[error("group {group:?}: expected {expected:?}, got {got:?}")]
    Shape {
        group: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("objective {0:?} has no stochastic gradient oracle")]
    NoStochasticOracle(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupInfo {
    pub id: String,
    pub rows: usize,
    pub cols: usize,
    pub norm: NormSpec,
    pub role: Option<GroupRole>,
}

impl GroupInfo {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// Known constants of an objective. `None` means "not available".
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Metadata {
    pub l0: Option<Vec<f64>>,
    pub l1: Option<Vec<f64>>,
    pub mu: Option<f64>,
    pub f_inf: Option<f64>,
    /// Bound on `E‖gᵢ − ∇ᵢf‖⋆²` per group, squared-rooted.
    pub sigma: Option<f64>,
    pub notes: Vec<String>,
}

pub trait Objective: Send + Sync {
    fn name(&self) -> &str;

    fn groups(&self) -> &[GroupInfo];

    fn value(&self, x: &[Matrix]) -> Result<f64, ProblemError>;

    fn gradient(&self, x: &[Matrix]) -> Result<Vec<Matrix>, ProblemError>;

    /// Stochastic gradient for sample `seed`. Unbiased by construction.
    fn stochastic_gradient(&self, x: &[Matrix], seed: u64) -> Result<Vec<Matrix>, ProblemError> {
        let _ = (x, seed);
        Err(ProblemError::NoStochasticOracle(self.name().to_string()))
    }

    fn has_stochastic_oracle(&self) -> bool {
        false
    }

    /// Constants measured in the suggested group norms.
    fn metadata(&self) -> Metadata {
        let norms: Vec<NormSpec> = self.groups().iter().map(|g| g.norm).collect();
        self.metadata_for(&norms)
    }

    /// Constants measured in the given group norms.
    fn metadata_for(&self, norms: &[NormSpec]) -> Metadata;

    fn initial_point(&self, seed: u64) -> Vec<Matrix>;
}

fn check_point(groups: &[GroupInfo], x: &[Matrix]) -> Result<(), ProblemError> {
    if x.len() != groups.len() {
        return Err(ProblemError::GroupCount {
            expected: groups.len(),
            got: x.len(),
        });
    }
    for (g, m) in groups.iter().zip(x) {
        if m.shape() != g.shape() {
            return Err(ProblemError::Shape {
                group: g.id.clone(),
                expected: g.shape(),
                got: m.shape(),
            });
        }
    }
    Ok(())
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

fn seeded_point(groups: &[GroupInfo], seed: u64) -> Vec<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups
        .iter()
        .map(|g| gaussian_matrix(&mut rng, g.rows, g.cols, 1.0))
        .collect()
}

fn check_positive(c: &[f64]) -> Result<(), ProblemError> {
    if c.is_empty() {
        return Err(ProblemError::Invalid("at least one group is required".into()));
    }
    match c.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        Some(v) => Err(ProblemError::Invalid(format!("curvatures must be positive, got {v}"))),
        None => Ok(()),
    }
}

fn default_groups(shapes: &[(usize, usize)]) -> Result<Vec<GroupInfo>, ProblemError> {
    shapes
        .iter()
        .enumerate()
        .map(|(i, &(rows, cols))| {
            if rows == 0 || cols == 0 {
                return Err(ProblemError::Invalid(format!("group {i} has an empty shape")));
            }
            Ok(GroupInfo {
                id: format!("x{i}"),
                rows,
                cols,
                norm: NormSpec::euclidean(1.0).expect("unit scale"),
                role: None,
            })
        })
        .collect()
}

/// The constant `κ/α²` with `‖cD‖⋆ ≤ c·κ/α² · ‖D‖` for every `D` of the
/// given shape.
fn norm_equivalence(spec: &NormSpec, rows: usize, cols: usize) -> f64 {
    let kappa = match spec.family() {
        NormFamily::Euclidean => 1.0,
        NormFamily::Spectral => rows.min(cols) as f64,
        NormFamily::MaxEntry => (rows * cols) as f64,
    };
    kappa / (spec.scale() * spec.scale())
}

/// `f(X) = Σᵢ (cᵢ/2)‖Xᵢ − Aᵢ‖_F²`.
#[derive(Debug, Clone)]
pub struct LayeredQuadratic {
    groups: Vec<GroupInfo>,
    c: Vec<f64>,
    anchors: Vec<Matrix>,
}

pub fn layered_quadratic(c: &[f64], anchors: Vec<Matrix>) -> Result<LayeredQuadratic, ProblemError> {
    check_positive(c)?;
    if c.len() != anchors.len() {
        return Err(ProblemError::Invalid(format!(
            "{} curvatures for {} anchors",
            c.len(),
            anchors.len()
        )));
    }
    if anchors.iter().any(|a| !a.is_finite()) {
        return Err(ProblemError::Invalid("anchors must be finite".into()));
    }
    let shapes: Vec<_> = anchors.iter().map(Matrix::shape).collect();
    Ok(LayeredQuadratic {
        groups: default_groups(&shapes)?,
        c: c.to_vec(),
        anchors,
    })
}

impl LayeredQuadratic {
    pub fn curvatures(&self) -> &[f64] {
        &self.c
    }

    pub fn anchors(&self) -> &[Matrix] {
        &self.anchors
    }
}

impl Objective for LayeredQuadratic {
    fn name(&self) -> &str {
        "layered_quadratic"
    }

    fn groups(&self) -> &[GroupInfo] {
        &self.groups
    }

    fn value(&self, x: &[Matrix]) -> Result<f64, ProblemError> {
        check_point(&self.groups, x)?;
        Ok(x.iter()
            .zip(&self.anchors)
            .zip(&self.c)
            .map(|((xi, ai), ci)| {
                let d = frobenius_norm(&(xi - ai));
                0.5 * ci * d * d
            })
            .sum())
    }

    fn gradient(&self, x: &[Matrix]) -> Result<Vec<Matrix>, ProblemError> {
        check_point(&self.groups, x)?;
        Ok(x.iter()
            .zip(&self.anchors)
            .zip(&self.c)
            .map(|((xi, ai), ci)| (xi - ai).scale(*ci))
            .collect())
    }

    /// `L⁰ᵢ = cᵢκᵢ/αᵢ²` with `κ` = 1, min(m,n), mn for the Euclidean,
    /// spectral and max-entry families; `μ = min cᵢ/αᵢ²`.
    fn metadata_for(&self, norms: &[NormSpec]) -> Metadata {
        if norms.len() != self.groups.len() {
            return Metadata::default();
        }
        let l0 = self
            .groups
            .iter()
            .zip(norms)
            .zip(&self.c)
            .map(|((g, n), c)| c * norm_equivalence(n, g.rows, g.cols))
            .collect();
        let mu = norms
            .iter()
            .zip(&self.c)
            .map(|(n, c)| c / (n.scale() * n.scale()))
            .fold(f64::INFINITY, f64::min);
        Metadata {
            l0: Some(l0),
            l1: Some(vec![0.0; self.c.len()]),
            mu: Some(mu),
            f_inf: Some(0.0),
            sigma: None,
            notes: vec![],
        }
    }

    fn initial_point(&self, seed: u64) -> Vec<Matrix> {
        seeded_point(&self.groups, seed)
    }
}

/// `f(X) = Σᵢ cᵢ Σⱼₗ cosh(xᵢ,ⱼₗ)`.
#[derive(Debug, Clone)]
pub struct CoshSeparable {
    groups: Vec<GroupInfo>,
    c: Vec<f64>,
}

pub fn cosh_separable(c: &[f64], shapes: &[(usize, usize)]) -> Result<CoshSeparable, ProblemError> {
    check_positive(c)?;
    if c.len() != shapes.len() {
        return Err(ProblemError::Invalid(format!(
            "{} curvatures for {} shapes",
            c.len(),
            shapes.len()
        )));
    }
    Ok(CoshSeparable {
        groups: default_groups(shapes)?,
        c: c.to_vec(),
    })
}

impl Objective for CoshSeparable {
    fn name(&self) -> &str {
        "cosh_separable"
    }

    fn groups(&self) -> &[GroupInfo] {
        &self.groups
    }

    fn value(&self, x: &[Matrix]) -> Result<f64, ProblemError> {
        check_point(&self.groups, x)?;
        Ok(x.iter()
            .zip(&self.c)
            .map(|(xi, ci)| ci * xi.as_slice().iter().map(|v| v.cosh()).sum::<f64>())
            .sum())
    }

    fn gradient(&self, x: &[Matrix]) -> Result<Vec<Matrix>, ProblemError> {
        check_point(&self.groups, x)?;
        Ok(x.iter()
            .zip(&self.c)
            .map(|(xi, ci)| xi.map(|v| ci * v.sinh()))
            .collect())
    }

    /// Reference constants `L⁰ᵢ ≈ cᵢ`, `L¹ᵢ ≈ 1` hold along trajectories under
    /// unit Euclidean norms only; no constants are reported otherwise.
    fn metadata_for(&self, norms: &[NormSpec]) -> Metadata {
        let f_inf = self
            .groups
            .iter()
            .zip(&self.c)
            .map(|(g, c)| c * (g.rows * g.cols) as f64)
            .sum();
        let unit_euclid = norms.len() == self.groups.len()
            && norms
                .iter()
                .all(|n| n.family() == NormFamily::Euclidean && n.scale() == 1.0);
        let (l0, l1, note) = if unit_euclid {
            (
                Some(self.c.clone()),
                Some(vec![1.0; self.c.len()]),
                "L0, L1 are empirical reference values, valid locally along trajectories",
            )
        } else {
            (
                None,
                None,
                "smoothness constants are only estimated empirically under these norms",
            )
        };
        Metadata {
            l0,
            l1,
            mu: None,
            f_inf: Some(f_inf),
            sigma: None,
            notes: vec![note.to_string()],
        }
    }

    fn initial_point(&self, seed: u64) -> Vec<Matrix> {
        seeded_point(&self.groups, seed)
    }
}

/// Two-layer tanh network `W₂·tanh(W₁x + b₁) + b₂` fit by mean squared error
/// to the outputs of a seeded teacher network of the same widths.
#[derive(Debug, Clone)]
pub struct TinyMlp {
    groups: Vec<GroupInfo>,
    inputs: Matrix,
    targets: Matrix,
    batch: usize,
}

pub fn tiny_mlp(widths: (usize, usize, usize), dataset_seed: u64, n_samples: usize) -> Result<TinyMlp, ProblemError> {
    let (d, h, o) = widths;
    if d == 0 || h == 0 || o == 0 {
        return Err(ProblemError::Invalid(format!(
            "widths must be positive, got {widths:?}"
        )));
    }
    if n_samples == 0 {
        return Err(ProblemError::Invalid("n_samples must be at least 1".into()));
    }
    let shapes = [(h, d), (h, 1), (o, h), (o, 1)];
    let roles = [GroupRole::Hidden, GroupRole::Bias, GroupRole::Head, GroupRole::Bias];
    let ids = ["W1", "b1", "W2", "b2"];
    let groups = shapes
        .iter()
        .zip(roles)
        .zip(ids)
        .map(|((&(rows, cols), role), id)| GroupInfo {
            id: id.to_string(),
            rows,
            cols,
            norm: NormSpec::euclidean(1.0).expect("unit scale"),
            role: Some(role),
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(dataset_seed);
    let inputs = gaussian_matrix(&mut rng, d, n_samples, 1.0);
    let teacher: Vec<Matrix> = shapes
        .iter()
        .map(|&(r, c)| gaussian_matrix(&mut rng, r, c, 1.0 / (c as f64).sqrt()))
        .collect();
    let mut mlp = TinyMlp {
        groups,
        inputs,
        targets: Matrix::zeros(o, n_samples),
        batch: n_samples,
    };
    let all: Vec<usize> = (0..n_samples).collect();
    mlp.targets = mlp.forward(&teacher, &all).1;
    Ok(mlp)
}

impl TinyMlp {
    /// Minibatch size used by the stochastic oracle.
    pub fn with_batch(mut self, batch: usize) -> Result<Self, ProblemError> {
        if batch == 0 || batch > self.n_samples() {
            return Err(ProblemError::Invalid(format!(
                "batch must lie in [1, {}], got {batch}",
                self.n_samples()
            )));
        }
        self.batch = batch;
        Ok(self)
    }

    pub fn n_samples(&self) -> usize {
        self.inputs.cols()
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Hidden activations and predictions for the given sample columns.
    fn forward(&self, x: &[Matrix], idx: &[usize]) -> (Matrix, Matrix) {
        let (w1, b1, w2, b2) = (&x[0], &x[1], &x[2], &x[3]);
        let cols = Matrix::from_fn(self.inputs.rows(), idx.len(), |r, j| self.inputs[(r, idx[j])]);
        let pre = w1.matmul(&cols);
        let hidden = Matrix::from_fn(pre.rows(), pre.cols(), |r, j| (pre[(r, j)] + b1[(r, 0)]).tanh());
        let out = w2.matmul(&hidden);
        let pred = Matrix::from_fn(out.rows(), out.cols(), |r, j| out[(r, j)] + b2[(r, 0)]);
        (hidden, pred)
    }

    fn loss_and_grad(&self, x: &[Matrix], idx: &[usize]) -> (f64, Vec<Matrix>) {
        let (hidden, pred) = self.forward(x, idx);
        let norm = 1.0 / (idx.len() * pred.rows()) as f64;
        let resid = Matrix::from_fn(pred.rows(), pred.cols(), |r, j| {
            pred[(r, j)] - self.targets[(r, idx[j])]
        });
        let loss = norm * resid.as_slice().iter().map(|v| v * v).sum::<f64>();

        // dL/dpred = 2·norm·resid
        let d_out = resid.scale(2.0 * norm);
        let g_w2 = d_out.matmul(&hidden.transpose());
        let g_b2 = Matrix::from_fn(d_out.rows(), 1, |r, _| d_out.row(r).iter().sum());
        let back = x[2].transpose().matmul(&d_out);
        let d_pre = Matrix::from_fn(back.rows(), back.cols(), |r, j| {
            let a = hidden[(r, j)];
            back[(r, j)] * (1.0 - a * a)
        });
        let cols = Matrix::from_fn(self.inputs.rows(), idx.len(), |r, j| self.inputs[(r, idx[j])]);
        let g_w1 = d_pre.matmul(&cols.transpose());
        let g_b1 = Matrix::from_fn(d_pre.rows(), 1, |r, _| d_pre.row(r).iter().sum());
        (loss, vec![g_w1, g_b1, g_w2, g_b2])
    }

    fn all_samples(&self) -> Vec<usize> {
        (0..self.n_samples()).collect()
    }
}

impl Objective for TinyMlp {
    fn name(&self) -> &str {
        "tiny_mlp"
    }

    fn groups(&self) -> &[GroupInfo] {
        &self.groups
    }

    fn value(&self, x: &[Matrix]) -> Result<f64, ProblemError> {
        check_point(&self.groups, x)?;
        Ok(self.loss_and_grad(x, &self.all_samples()).0)
    }

    fn gradient(&self, x: &[Matrix]) -> Result<Vec<Matrix>, ProblemError> {
        check_point(&self.groups, x)?;
        Ok(self.loss_and_grad(x, &self.all_samples()).1)
    }

    /// Minibatch gradient over `batch` samples drawn without replacement.
    fn stochastic_gradient(&self, x: &[Matrix], seed: u64) -> Result<Vec<Matrix>, ProblemError> {
        check_point(&self.groups, x)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, self.n_samples(), self.batch).into_vec();
        idx.sort_unstable();
        Ok(self.loss_and_grad(x, &idx).1)
    }

    fn has_stochastic_oracle(&self) -> bool {
        true
    }

    fn metadata_for(&self, _norms: &[NormSpec]) -> Metadata {
        Metadata {
            f_inf: Some(0.0),
            notes: vec!["targets come from a teacher of the same widths, so the infimum is 0".into()],
            ..Metadata::default()
        }
    }

    fn initial_point(&self, seed: u64) -> Vec<Matrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.groups
            .iter()
            .map(|g| match g.role {
                Some(GroupRole::Bias) => Matrix::zeros(g.rows, g.cols),
                _ => gaussian_matrix(&mut rng, g.rows, g.cols, 1.0 / (g.cols as f64).sqrt()),
            })
            .collect()
    }
}

/// Per-entry standard deviation such that `E‖N‖⋆² ≤ σ²` for `N` with
/// i.i.d. `N(0, s²)` entries, using `‖N‖⋆ ≤ √κ·‖N‖_F/α`.
pub fn noise_std(spec: &NormSpec, rows: usize, cols: usize, sigma: f64) -> f64 {
    let mn = (rows * cols) as f64;
    let kappa = match spec.family() {
        NormFamily::Euclidean => 1.0,
        NormFamily::Spectral => rows.min(cols) as f64,
        NormFamily::MaxEntry => mn,
    };
    sigma * spec.scale() / (kappa * mn).sqrt()
}

/// Adds seeded zero-mean Gaussian noise to the exact gradient.
pub struct GaussianNoise {
    base: Box<dyn Objective>,
    sigma: f64,
    seed: u64,
    norms: Vec<NormSpec>,
    std: Vec<f64>,
}

/// Noise is calibrated against the base objective's suggested norms.
pub fn with_gaussian_noise(base: Box<dyn Objective>, sigma: f64, seed: u64) -> Result<GaussianNoise, ProblemError> {
    let norms: Vec<NormSpec> = base.groups().iter().map(|g| g.norm).collect();
    with_gaussian_noise_in(base, sigma, seed, &norms)
}

/// Noise is calibrated against the given group norms.
pub fn with_gaussian_noise_in(
    base: Box<dyn Objective>,
    sigma: f64,
    seed: u64,
    norms: &[NormSpec],
) -> Result<GaussianNoise, ProblemError> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(ProblemError::Invalid(format!("sigma must be nonnegative, got {sigma}")));
    }
    if norms.len() != base.groups().len() {
        return Err(ProblemError::Invalid(format!(
            "{} norms for {} groups",
            norms.len(),
            base.groups().len()
        )));
    }
    let std = base
        .groups()
        .iter()
        .zip(norms)
        .map(|(g, n)| noise_std(n, g.rows, g.cols, sigma))
        .collect();
    Ok(GaussianNoise {
        base,
        sigma,
        seed,
        norms: norms.to_vec(),
        std,
    })
}

impl GaussianNoise {
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn noise_stds(&self) -> &[f64] {
        &self.std
    }
}

impl Objective for GaussianNoise {
    fn name(&self) -> &str {
        self.base.name()
    }

    fn groups(&self) -> &[GroupInfo] {
        self.base.groups()
    }

    fn value(&self, x: &[Matrix]) -> Result<f64, ProblemError> {
        self.base.value(x)
    }

    fn gradient(&self, x: &[Matrix]) -> Result<Vec<Matrix>, ProblemError> {
        self.base.gradient(x)
    }

    fn stochastic_gradient(&self, x: &[Matrix], seed: u64) -> Result<Vec<Matrix>, ProblemError> {
        let grad = self.base.gradient(x)?;
        if self.sigma == 0.0 {
            return Ok(grad);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(seed);
        Ok(grad
            .into_iter()
            .zip(&self.std)
            .map(|(g, &s)| {
                let noise = gaussian_matrix(&mut rng, g.rows(), g.cols(), s);
                &g + &noise
            })
            .collect())
    }

    fn has_stochastic_oracle(&self) -> bool {
        true
    }

    fn metadata_for(&self, norms: &[NormSpec]) -> Metadata {
        let mut meta = self.base.metadata_for(norms);
        if norms == self.norms.as_slice() {
            meta.sigma = Some(self.sigma);
            meta.notes.push(format!(
                "noise std per group {:?}, calibrated so E||noise||_*^2 <= sigma^2",
                self.std
            ));
        }
        meta
    }

    fn initial_point(&self, seed: u64) -> Vec<Matrix> {
        self.base.initial_point(seed)
    }
}

/// Largest relative error `‖g_fd − g‖_F / max(‖g‖_F, 1e-12)` over all groups
/// jointly, with central differences of step `h`.
pub fn finite_difference_error(obj: &dyn Objective, x: &[Matrix], h: f64) -> Result<f64, ProblemError> {
    let grad = obj.gradient(x)?;
    let mut point = x.to_vec();
    let mut err_sq = 0.0;
    let mut norm_sq = 0.0;
    for (gi, g) in grad.iter().enumerate() {
        for e in 0..g.as_slice().len() {
            let orig = point[gi].as_slice()[e];
            point[gi].as_mut_slice()[e] = orig + h;
            let up = obj.value(&point)?;
            point[gi].as_mut_slice()[e] = orig - h;
            let down = obj.value(&point)?;
            point[gi].as_mut_slice()[e] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = g.as_slice()[e];
            err_sq += (fd - an) * (fd - an);
            norm_sq += an * an;
        }
    }
    Ok(err_sq.sqrt() / norm_sq.sqrt().max(1e-12))
}
