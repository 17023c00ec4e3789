//! Experiment configs, the run loop, trace files and reports.
//!
//! Files written by [`run`] next to `trace_path`:
//! - `trace_path`: CSV, one row per (iteration, group)
//! - `trace_path.meta`: TOML table of run metadata
//! - `trace_path.params.toml`: final parameters, only with `dump_params`

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{Matrix, NewtonSchulz};
use crate::norms::{NormSpec, SpectralBackend};
use crate::optimizer::{Gluon, GroupRole, MomentumRule, ParamGroup, Preset, StepsizeSchedule};
use crate::problems::{cosh_separable, layered_quadratic, tiny_mlp, with_gaussian_noise_in, Objective};
use crate::smoothness::{
    fit_constants, suggest_stepsize, trajectory_smoothness, SmoothnessFit, TraceRecord, TrajectoryTrace,
    DEFAULT_LAMBDA, MIN_DELTA_X,
};
use crate::theory::{self, RateInputs, Variant};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    /// Bad config, arguments or input files.
    #[error("{0}")]
    Input(String),
    /// The run or estimate started but could not finish.
    #[error("{0}")]
    Runtime(String),
}

impl HarnessError {
    /// CLI exit code: 2 for input errors, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Input(_) => 2,
            HarnessError::Runtime(_) => 1,
        }
    }
}

fn input<E: std::fmt::Display>(e: E) -> HarnessError {
    HarnessError::Input(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> HarnessError {
    HarnessError::Runtime(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `layered_quadratic`, `cosh_separable` or `tiny_mlp`.
    pub problem: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curvatures: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shapes: Option<Vec<[usize; 2]>>,
    /// `[input, hidden, output]` for `tiny_mlp`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub widths: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roles: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norms: Option<Vec<String>>,
    /// One schedule for every group.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<String>,
    /// One schedule per group.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedules: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum: Option<String>,
    pub iterations: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub stochastic: bool,
    #[serde(default)]
    pub noise_sigma: f64,
    pub trace_path: PathBuf,
    /// `exact` or `newton_schulz`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectral_backend: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ns_iterations: Option<usize>,
    #[serde(default)]
    pub dump_params: bool,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| input(format!("config: {e}")))?;
        if cfg.iterations == 0 {
            return Err(input("config: iterations must be at least 1"));
        }
        Ok(cfg)
    }

    /// Loads a config; a relative `trace_path` is taken relative to the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if cfg.trace_path.is_relative() {
            let dir = path.parent().unwrap_or_else(|| Path::new("."));
            cfg.trace_path = dir.join(&cfg.trace_path);
        }
        Ok(cfg)
    }
}

/// Everything a run needs, resolved from a config.
pub struct Experiment {
    pub objective: Box<dyn Objective>,
    pub norms: Vec<NormSpec>,
    pub schedules: Vec<StepsizeSchedule>,
    pub momentum: MomentumRule,
    pub backend: SpectralBackend,
    pub preset: Option<Preset>,
}

const STREAM_PROBLEM: u64 = 0;
const STREAM_INIT: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_SAMPLES: u64 = 3;

/// Independent seed for purpose `stream` derived from the run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

fn base_objective(cfg: &ExperimentConfig) -> Result<Box<dyn Objective>, HarnessError> {
    let problem_seed = derive_seed(cfg.seed, STREAM_PROBLEM);
    let shapes = || -> Result<Vec<(usize, usize)>, HarnessError> {
        let s = cfg
            .shapes
            .as_ref()
            .ok_or_else(|| input(format!("{} needs `shapes`", cfg.problem)))?;
        Ok(s.iter().map(|[r, c]| (*r, *c)).collect())
    };
    let curvatures = || {
        cfg.curvatures
            .clone()
            .ok_or_else(|| input(format!("{} needs `curvatures`", cfg.problem)))
    };
    let reject = |field: &str, present: bool| {
        if present {
            Err(input(format!("`{field}` does not apply to {}", cfg.problem)))
        } else {
            Ok(())
        }
    };
    match cfg.problem.as_str() {
        "layered_quadratic" | "cosh_separable" => {
            reject("widths", cfg.widths.is_some())?;
            reject("samples", cfg.samples.is_some())?;
            reject("batch", cfg.batch.is_some())?;
            let shapes = shapes()?;
            let c = curvatures()?;
            if cfg.problem == "cosh_separable" {
                return Ok(Box::new(cosh_separable(&c, &shapes).map_err(input)?));
            }
            if shapes.iter().any(|&(r, k)| r == 0 || k == 0) {
                return Err(input("shapes must be positive"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(problem_seed);
            let anchors = shapes
                .iter()
                .map(|&(r, k)| {
                    Matrix::from_fn(r, k, |_, _| {
                        rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal)
                    })
                })
                .collect();
            Ok(Box::new(layered_quadratic(&c, anchors).map_err(input)?))
        }
        "tiny_mlp" => {
            reject("shapes", cfg.shapes.is_some())?;
            reject("curvatures", cfg.curvatures.is_some())?;
            let [d, h, o] = cfg.widths.ok_or_else(|| input("tiny_mlp needs `widths`"))?;
            let n = cfg.samples.ok_or_else(|| input("tiny_mlp needs `samples`"))?;
            let mlp = tiny_mlp((d, h, o), problem_seed, n).map_err(input)?;
            let mlp = match cfg.batch {
                Some(b) => mlp.with_batch(b).map_err(input)?,
                None => mlp,
            };
            Ok(Box::new(mlp))
        }
        other => Err(input(format!(
            "unknown problem {other:?} (expected layered_quadratic, cosh_separable or tiny_mlp)"
        ))),
    }
}

/// Resolves problem, norms, schedules, momentum and backend.
pub fn build_experiment(cfg: &ExperimentConfig) -> Result<Experiment, HarnessError> {
    if cfg.iterations == 0 {
        return Err(input("iterations must be at least 1"));
    }
    let base = base_objective(cfg)?;
    let shapes: Vec<(usize, usize)> = base.groups().iter().map(|g| g.shape()).collect();
    let p = shapes.len();

    let preset = cfg
        .preset
        .as_deref()
        .map(str::parse::<Preset>)
        .transpose()
        .map_err(input)?;
    let norms: Vec<NormSpec> = match (&preset, &cfg.norms) {
        (Some(_), Some(_)) => return Err(input("give either `preset` or `norms`, not both")),
        (Some(preset), None) => {
            let roles: Option<Vec<GroupRole>> = match &cfg.roles {
                Some(r) => Some(r.iter().map(|s| s.parse()).collect::<Result<_, _>>().map_err(input)?),
                None => base.groups().iter().map(|g| g.role).collect(),
            };
            preset.norms(&shapes, roles.as_deref()).map_err(input)?
        }
        (None, Some(specs)) => {
            if cfg.roles.is_some() {
                return Err(input("`roles` only applies together with `preset`"));
            }
            if specs.len() != p {
                return Err(input(format!("{} norms for {p} groups", specs.len())));
            }
            specs
                .iter()
                .map(|s| s.parse())
                .collect::<Result<_, _>>()
                .map_err(input)?
        }
        (None, None) => {
            if cfg.roles.is_some() {
                return Err(input("`roles` only applies together with `preset`"));
            }
            base.groups().iter().map(|g| g.norm).collect()
        }
    };

    let schedules: Vec<StepsizeSchedule> = match (&cfg.schedule, &cfg.schedules) {
        (Some(s), None) => vec![s.parse().map_err(input)?; p],
        (None, Some(list)) if list.len() == p => list
            .iter()
            .map(|s| s.parse())
            .collect::<Result<_, _>>()
            .map_err(input)?,
        (None, Some(list)) => return Err(input(format!("{} schedules for {p} groups", list.len()))),
        (Some(_), Some(_)) => return Err(input("give either `schedule` or `schedules`, not both")),
        (None, None) => return Err(input("a `schedule` or `schedules` entry is required")),
    };

    let momentum: MomentumRule = match &cfg.momentum {
        Some(m) => m.parse().map_err(input)?,
        None => MomentumRule::None,
    };
    if !cfg.stochastic && momentum != MomentumRule::None {
        return Err(input("momentum requires `stochastic = true`"));
    }

    let backend = match (cfg.spectral_backend.as_deref(), cfg.ns_iterations) {
        (None | Some("exact"), None) => SpectralBackend::Exact,
        (Some("exact"), Some(_)) => return Err(input("`ns_iterations` requires spectral_backend = \"newton_schulz\"")),
        (None | Some("newton_schulz"), Some(0)) => return Err(input("`ns_iterations` must be at least 1")),
        (Some("newton_schulz"), n) => SpectralBackend::NewtonSchulz(NewtonSchulz {
            iterations: n.unwrap_or(NewtonSchulz::default().iterations),
            ..NewtonSchulz::default()
        }),
        (None, Some(_)) => return Err(input("`ns_iterations` requires spectral_backend = \"newton_schulz\"")),
        (Some(other), _) => return Err(input(format!("unknown spectral backend {other:?}"))),
    };

    if !(cfg.noise_sigma >= 0.0 && cfg.noise_sigma.is_finite()) {
        return Err(input(format!(
            "noise_sigma must be nonnegative, got {}",
            cfg.noise_sigma
        )));
    }
    let objective: Box<dyn Objective> = if base.has_stochastic_oracle() {
        if cfg.noise_sigma > 0.0 {
            return Err(input(format!(
                "{} samples its own gradients; noise_sigma must be 0",
                cfg.problem
            )));
        }
        base
    } else if cfg.stochastic {
        let seed = derive_seed(cfg.seed, STREAM_NOISE);
        Box::new(with_gaussian_noise_in(base, cfg.noise_sigma, seed, &norms).map_err(input)?)
    } else {
        if cfg.noise_sigma > 0.0 {
            return Err(input("noise_sigma requires `stochastic = true`"));
        }
        base
    };
    if !cfg.stochastic && cfg.batch.is_some() {
        return Err(input("`batch` requires `stochastic = true`"));
    }

    Ok(Experiment {
        objective,
        norms,
        schedules,
        momentum,
        backend,
        preset,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub trace: TrajectoryTrace,
    pub params: Vec<(String, Matrix)>,
    /// Set when the run stopped early on a non-finite value.
    pub failure: Option<String>,
}

fn fmt_list<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn fmt_float_list(xs: &[f64]) -> String {
    xs.iter().map(|v| format!("{v:.16e}")).collect::<Vec<_>>().join(",")
}

fn run_meta(cfg: &ExperimentConfig, exp: &Experiment) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    let ids: Vec<&str> = exp.objective.groups().iter().map(|g| g.id.as_str()).collect();
    meta.insert("problem".into(), cfg.problem.clone());
    meta.insert("seed".into(), cfg.seed.to_string());
    meta.insert("iterations".into(), cfg.iterations.to_string());
    meta.insert("stochastic".into(), cfg.stochastic.to_string());
    meta.insert("noise_sigma".into(), format!("{:.16e}", cfg.noise_sigma));
    meta.insert("groups".into(), ids.join(","));
    meta.insert("norms".into(), fmt_list(&exp.norms));
    meta.insert(
        "schedules".into(),
        exp.schedules
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(";"),
    );
    meta.insert("momentum".into(), exp.momentum.to_string());
    meta.insert(
        "preset".into(),
        exp.preset.map_or_else(|| "none".to_string(), |p| p.name().to_string()),
    );
    meta.insert(
        "spectral_backend".into(),
        match &exp.backend {
            SpectralBackend::Exact => "exact".to_string(),
            SpectralBackend::NewtonSchulz(ns) => format!("newton_schulz:{}", ns.iterations),
        },
    );
    let known = exp.objective.metadata_for(&exp.norms);
    if let Some(v) = known.f_inf {
        meta.insert("f_inf".into(), format!("{v:.16e}"));
    }
    if let Some(v) = &known.l0 {
        meta.insert("known_l0".into(), fmt_float_list(v));
    }
    if let Some(v) = &known.l1 {
        meta.insert("known_l1".into(), fmt_float_list(v));
    }
    if let Some(v) = known.mu {
        meta.insert("known_mu".into(), format!("{v:.16e}"));
    }
    if let Some(v) = known.sigma {
        meta.insert("known_sigma".into(), format!("{v:.16e}"));
    }
    meta
}

fn first_non_finite(ids: &[String], mats: &[Matrix]) -> Option<String> {
    ids.iter()
        .zip(mats)
        .find(|(_, m)| !m.is_finite())
        .map(|(id, _)| id.clone())
}

/// Runs the configured loop in memory.
///
/// Row `k` of group `i` records `f(Xᵏ)`, `‖gᵢᵏ⁺¹‖⋆`, `‖gᵢᵏ⁺¹ − gᵢᵏ‖⋆`,
/// `‖Xᵢᵏ⁺¹ − Xᵢᵏ‖` and `tᵢᵏ`. In stochastic runs `gᵏ` is the single sample
/// drawn at `Xᵏ`, which both drives step `k` and closes row `k − 1`.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunOutcome, HarnessError> {
    let exp = build_experiment(cfg)?;
    let obj = exp.objective.as_ref();
    let ids: Vec<String> = obj.groups().iter().map(|g| g.id.clone()).collect();
    let x0 = obj.initial_point(derive_seed(cfg.seed, STREAM_INIT));
    let groups = ids
        .iter()
        .zip(x0)
        .zip(exp.norms.iter().zip(&exp.schedules))
        .map(|((id, x), (norm, sched))| ParamGroup::new(id.clone(), x, *norm, *sched).with_backend(exp.backend))
        .collect();
    let mut opt = Gluon::new(groups, exp.momentum).map_err(input)?;

    let sample_seed = derive_seed(cfg.seed, STREAM_SAMPLES);
    let oracle = |x: &[Matrix], k: u64| -> Result<Vec<Matrix>, HarnessError> {
        if cfg.stochastic {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
            rng.set_stream(k);
            obj.stochastic_gradient(x, rng.next_u64()).map_err(runtime)
        } else {
            obj.gradient(x).map_err(runtime)
        }
    };

    let mut records = Vec::new();
    let mut failure = None;
    let mut x = opt.params();
    let mut g = oracle(&x, 0)?;
    for k in 0..cfg.iterations {
        let f = obj.value(&x).map_err(runtime)?;
        if !f.is_finite() {
            failure = Some(format!("non-finite objective value at iteration {k}"));
            break;
        }
        if let Some(id) = first_non_finite(&ids, &g) {
            failure = Some(format!("non-finite gradient at iteration {k}, group {id}"));
            break;
        }
        let report = if cfg.stochastic {
            opt.step_stochastic(&g)
        } else {
            opt.step_deterministic(&g)
        }
        .map_err(runtime)?;
        let x_next = opt.params();
        if let Some(id) = first_non_finite(&ids, &x_next) {
            failure = Some(format!("non-finite parameters at iteration {k}, group {id}"));
            break;
        }
        let g_next = oracle(&x_next, k + 1)?;
        if let Some(id) = first_non_finite(&ids, &g_next) {
            failure = Some(format!("non-finite gradient at iteration {}, group {id}", k + 1));
            break;
        }
        for (i, id) in ids.iter().enumerate() {
            let norm = &exp.norms[i];
            let dual = |m: &Matrix| norm.dual_norm(m).map_err(runtime);
            records.push(TraceRecord {
                k,
                group_id: id.clone(),
                f_value: f,
                g_dual_next: dual(&g_next[i])?,
                delta_g_dual: dual(&(&g_next[i] - &g[i]))?,
                delta_x_norm: norm.primal_norm(&(&x_next[i] - &x[i])).map_err(runtime)?,
                radius_used: report.groups[i].radius,
            });
        }
        x = x_next;
        g = g_next;
    }

    let mut meta = run_meta(cfg, &exp);
    if let Some(msg) = &failure {
        meta.insert("failure".into(), msg.clone());
    }
    let trace = TrajectoryTrace { records, meta };
    Ok(RunOutcome {
        trace,
        params: ids.into_iter().zip(opt.params()).collect(),
        failure,
    })
}

pub fn meta_path(trace_path: &Path) -> PathBuf {
    suffixed(trace_path, ".meta")
}

pub fn params_path(trace_path: &Path) -> PathBuf {
    suffixed(trace_path, ".params.toml")
}

pub fn report_path(trace_path: &Path) -> PathBuf {
    suffixed(trace_path, ".report.toml")
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct DumpedGroup<'a> {
    id: &'a str,
    rows: usize,
    cols: usize,
    data: &'a [f64],
}

#[derive(Serialize)]
struct Dump<'a> {
    groups: Vec<DumpedGroup<'a>>,
}

pub fn params_to_toml(params: &[(String, Matrix)]) -> String {
    let dump = Dump {
        groups: params
            .iter()
            .map(|(id, m)| DumpedGroup {
                id,
                rows: m.rows(),
                cols: m.cols(),
                data: m.as_slice(),
            })
            .collect(),
    };
    toml::to_string(&dump).expect("parameter dump is valid toml")
}

/// Runs the config and writes the trace and metadata (and parameters when
/// `dump_params` is set). A run that stops on a non-finite value still
/// writes what it recorded, then fails.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome, HarnessError> {
    let outcome = execute(cfg)?;
    write_file(&cfg.trace_path, outcome.trace.to_csv_string().as_bytes())?;
    let meta = toml::to_string(&outcome.trace.meta).map_err(runtime)?;
    write_file(&meta_path(&cfg.trace_path), meta.as_bytes())?;
    if cfg.dump_params {
        write_file(
            &params_path(&cfg.trace_path),
            params_to_toml(&outcome.params).as_bytes(),
        )?;
    }
    if let Some(msg) = &outcome.failure {
        return Err(runtime(msg));
    }
    Ok(outcome)
}

/// Reads a trace and, when present, its metadata sidecar.
pub fn load_trace(path: &Path) -> Result<TrajectoryTrace, HarnessError> {
    let bytes = fs::read(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
    if bytes.is_empty() {
        return Err(input(format!("{}: empty trace file", path.display())));
    }
    let mut trace =
        TrajectoryTrace::read_csv(bytes.as_slice()).map_err(|e| input(format!("{}: {e}", path.display())))?;
    if trace.records.is_empty() {
        return Err(input(format!("{}: trace has no records", path.display())));
    }
    let mp = meta_path(path);
    if mp.exists() {
        let text = fs::read_to_string(&mp).map_err(|e| input(format!("{}: {e}", mp.display())))?;
        trace.meta = toml::from_str(&text).map_err(|e| input(format!("{}: {e}", mp.display())))?;
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<SmoothnessFit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub suggested_stepsize: Option<f64>,
    pub skipped: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub lambda: f64,
    pub config: BTreeMap<String, String>,
    pub groups: Vec<GroupReport>,
    /// Calculator outputs at the fitted constants; strings mark
    /// inapplicable formulas.
    pub theory: toml::Table,
}

impl FitReport {
    pub fn has_errors(&self) -> bool {
        self.groups.iter().any(|g| g.error.is_some())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report is valid toml")
    }
}

/// Fits `(L⁰, L¹)` per group and suggests the next stepsize from the last
/// recorded `‖gᵢ‖⋆`.
pub fn estimate(trace: &TrajectoryTrace, lambda: f64, epsilon: f64) -> Result<FitReport, HarnessError> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(input(format!("lambda must be nonnegative, got {lambda}")));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(input(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut groups = Vec::new();
    for id in trace.group_ids() {
        let skipped_all = trace.records_for(&id).filter(|r| r.delta_x_norm < MIN_DELTA_X).count();
        let entry = match trajectory_smoothness(trace, &id) {
            Err(e) => GroupReport {
                id: id.clone(),
                fit: None,
                suggested_stepsize: None,
                skipped: skipped_all,
                error: Some(e.to_string()),
            },
            Ok(series) => match fit_constants(&series.l_hat, &series.g_dual_next, lambda) {
                Err(e) => GroupReport {
                    id: id.clone(),
                    fit: None,
                    suggested_stepsize: None,
                    skipped: series.skipped,
                    error: Some(e.to_string()),
                },
                Ok(fit) => {
                    let last_g = trace.records_for(&id).last().map_or(0.0, |r| r.g_dual_next);
                    let (step, error) = match suggest_stepsize(&fit, last_g) {
                        Ok(t) => (Some(t), None),
                        Err(e) => (None, Some(e.to_string())),
                    };
                    GroupReport {
                        id: id.clone(),
                        fit: Some(fit),
                        suggested_stepsize: step,
                        skipped: series.skipped,
                        error,
                    }
                }
            },
        };
        groups.push(entry);
    }

    let theory = theory_at_fit(trace, &groups, epsilon);
    Ok(FitReport {
        lambda,
        config: trace.meta.clone(),
        groups,
        theory,
    })
}

fn theory_at_fit(trace: &TrajectoryTrace, groups: &[GroupReport], epsilon: f64) -> toml::Table {
    let mut table = toml::Table::new();
    let fits: Option<Vec<SmoothnessFit>> = groups.iter().map(|g| g.fit).collect();
    let Some(fits) = fits else {
        table.insert("status".into(), "unavailable: some groups could not be fitted".into());
        return table;
    };
    let f0 = trace.records.first().map_or(0.0, |r| r.f_value);
    let (f_inf, f_inf_source) = match trace.meta.get("f_inf").and_then(|s| s.parse::<f64>().ok()) {
        Some(v) => (v, "metadata"),
        None => (
            trace.records.iter().map(|r| r.f_value).fold(f64::INFINITY, f64::min),
            "lowest recorded value",
        ),
    };
    let sigma = trace
        .meta
        .get("known_sigma")
        .and_then(|s| s.parse::<f64>().ok())
        .unwrap_or(0.0);
    let k_final = trace.records.last().map_or(0, |r| r.k + 1);
    let mut inp = RateInputs::new(
        (f0 - f_inf).max(0.0),
        fits.iter().map(|f| f.l0).collect(),
        fits.iter().map(|f| f.l1).collect(),
        epsilon,
    );
    inp.sigma = sigma;
    table.insert("delta0".into(), inp.delta0.into());
    table.insert("f_inf_source".into(), f_inf_source.into());
    table.insert("epsilon".into(), epsilon.into());
    table.insert("sigma".into(), sigma.into());
    table.insert("final_k".into(), (k_final as i64).into());
    let as_value = |r: Result<u64, theory::TheoryError>| -> toml::Value {
        match r {
            Ok(k) if k <= i64::MAX as u64 => toml::Value::Integer(k as i64),
            Ok(k) => toml::Value::String(format!("{k}")),
            Err(e) => toml::Value::String(format!("unavailable: {e}")),
        }
    };
    table.insert(
        "det_iterations_plain".into(),
        as_value(theory::det_iterations_plain(&inp)),
    );
    table.insert(
        "det_iterations_weighted".into(),
        as_value(theory::det_iterations_weighted(&inp)),
    );
    let bound = if k_final == 0 {
        toml::Value::String("unavailable: empty trace".into())
    } else {
        match theory::stoch_bound(k_final, &inp, false) {
            Ok(v) => v.into(),
            Err(e) => toml::Value::String(format!("unavailable: {e}")),
        }
    };
    table.insert("stoch_bound_final_k".into(), bound);
    table
}

/// Reads a trace, writes `<trace>.report.toml` (or `out`), and returns the
/// report. A report with per-group errors is still written, then the call
/// fails with a runtime error.
pub fn estimate_file(
    trace_path: &Path,
    lambda: Option<f64>,
    epsilon: f64,
    out: Option<&Path>,
) -> Result<FitReport, HarnessError> {
    let trace = load_trace(trace_path)?;
    let report = estimate(&trace, lambda.unwrap_or(DEFAULT_LAMBDA), epsilon)?;
    let out = out.map_or_else(|| report_path(trace_path), Path::to_path_buf);
    write_file(&out, report.to_toml().as_bytes())?;
    if report.has_errors() {
        let msgs: Vec<String> = report
            .groups
            .iter()
            .filter_map(|g| g.error.as_ref().map(|e| format!("{}: {e}", g.id)))
            .collect();
        return Err(runtime(msgs.join("; ")));
    }
    Ok(report)
}

/// Every calculator at the given inputs; inapplicable ones carry the reason.
/// `k` selects where the stochastic bound is evaluated.
pub fn rates_table(inp: &RateInputs, k: Option<u64>) -> Result<toml::Table, HarnessError> {
    inp.validate().map_err(input)?;
    let mut t = toml::Table::new();
    let count = |r: Result<u64, theory::TheoryError>| -> toml::Value {
        match r {
            Ok(k) if k <= i64::MAX as u64 => toml::Value::Integer(k as i64),
            Ok(k) => toml::Value::String(k.to_string()),
            Err(e) => toml::Value::String(format!("unavailable: {e}")),
        }
    };
    let real = |r: Result<f64, theory::TheoryError>| -> toml::Value {
        match r {
            Ok(v) => toml::Value::Float(v),
            Err(e) => toml::Value::String(format!("unavailable: {e}")),
        }
    };
    let l1_zero = inp.l1.iter().all(|&v| v == 0.0);
    t.insert("det_iterations_plain".into(), count(theory::det_iterations_plain(inp)));
    t.insert(
        "det_iterations_weighted".into(),
        count(theory::det_iterations_weighted(inp)),
    );
    let stoch = |variant| {
        if inp.zeta.is_none() {
            toml::Value::String("unavailable: requires zeta".into())
        } else {
            count(theory::adaptive_stoch_iterations(inp, variant))
        }
    };
    t.insert("adaptive_stoch_iterations_plain".into(), stoch(Variant::Plain));
    t.insert("adaptive_stoch_iterations_weighted".into(), stoch(Variant::Weighted));
    let pl = |zero: bool| {
        if inp.mu.is_none() {
            toml::Value::String("unavailable: requires mu".into())
        } else {
            count(theory::pl_iterations(inp, zero))
        }
    };
    t.insert("pl_iterations".into(), pl(false));
    t.insert(
        "pl_iterations_l1_zero".into(),
        if l1_zero {
            pl(true)
        } else {
            toml::Value::String("unavailable: requires L1 = 0".into())
        },
    );
    match k {
        Some(k) => {
            t.insert(
                "stoch_bound_k".into(),
                toml::Value::Integer(k.min(i64::MAX as u64) as i64),
            );
            t.insert("stoch_bound".into(), real(theory::stoch_bound(k, inp, false)));
            t.insert("stoch_bound_l1_zero".into(), real(theory::stoch_bound(k, inp, true)));
        }
        None => {
            t.insert("stoch_bound".into(), "unavailable: requires K".into());
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_cfg(dir: &Path) -> ExperimentConfig {
        ExperimentConfig::from_toml_str(&format!(
            r#"
            problem = "layered_quadratic"
            curvatures = [2.5, 1.0]
            shapes = [[3, 2], [2, 2]]
            norms = ["euclid", "euclid"]
            schedule = "constant:0.05"
            iterations = 20
            seed = 7
            trace_path = "{}"
            "#,
            dir.join("t.csv").display()
        ))
        .unwrap()
    }

    #[test]
    fn config_rejects_unknown_keys_and_zero_iterations() {
        let base = "problem = \"tiny_mlp\"\niterations = 1\ntrace_path = \"x\"\n";
        assert!(ExperimentConfig::from_toml_str(base).is_ok());
        assert!(ExperimentConfig::from_toml_str(&format!("{base}colour = 1\n")).is_err());
        assert!(
            ExperimentConfig::from_toml_str("problem = \"tiny_mlp\"\niterations = 0\ntrace_path = \"x\"\n").is_err()
        );
    }

    #[test]
    fn build_rejects_inconsistent_configs() {
        let dir = tempfile::tempdir().unwrap();
        let ok = quad_cfg(dir.path());
        assert!(build_experiment(&ok).is_ok());
        let mut c = ok.clone();
        c.preset = Some("muon".into());
        assert!(build_experiment(&c).is_err());
        let mut c = ok.clone();
        c.norms = Some(vec!["euclid".into()]);
        assert!(build_experiment(&c).is_err());
        let mut c = ok.clone();
        c.schedule = None;
        assert!(build_experiment(&c).is_err());
        let mut c = ok.clone();
        c.momentum = Some("sqrt".into());
        assert!(build_experiment(&c).is_err());
        let mut c = ok.clone();
        c.problem = "rosenbrock".into();
        assert!(build_experiment(&c).is_err());
        let mut c = ok.clone();
        c.noise_sigma = 1.0;
        assert!(build_experiment(&c).is_err());
        let mut c = ok.clone();
        c.ns_iterations = Some(3);
        assert!(build_experiment(&c).is_err());
        let mut c = ok;
        c.widths = Some([1, 1, 1]);
        assert!(build_experiment(&c).is_err());
    }

    #[test]
    fn one_iteration_gives_one_row_per_group() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = quad_cfg(dir.path());
        c.iterations = 1;
        let out = execute(&c).unwrap();
        assert_eq!(out.trace.records.len(), 2);
        assert_eq!(out.trace.group_ids(), vec!["x0", "x1"]);
    }

    #[test]
    fn quadratic_smoothness_is_exact_curvature() {
        let dir = tempfile::tempdir().unwrap();
        let out = execute(&quad_cfg(dir.path())).unwrap();
        let s = trajectory_smoothness(&out.trace, "x0").unwrap();
        assert!(s.l_hat.iter().all(|v| (v - 2.5).abs() < 1e-12));
        let report = estimate(&out.trace, 1.0, 1e-3).unwrap();
        let fit = report.groups[0].fit.unwrap();
        assert!((fit.l0 - 2.5).abs() < 1e-9 && fit.l1.abs() < 1e-9, "{fit:?}");
        let fit = report.groups[1].fit.unwrap();
        assert!((fit.l0 - 1.0).abs() < 1e-9 && fit.l1.abs() < 1e-9, "{fit:?}");
    }

    #[test]
    fn files_round_trip_and_reestimation_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quad_cfg(dir.path());
        cfg.dump_params = true;
        let out = run(&cfg).unwrap();
        let loaded = load_trace(&cfg.trace_path).unwrap();
        assert_eq!(loaded.records, out.trace.records);
        assert_eq!(loaded.meta, out.trace.meta);
        assert!(params_path(&cfg.trace_path).exists());
        let a = estimate_file(&cfg.trace_path, None, 1e-3, None).unwrap();
        let b = estimate_file(&cfg.trace_path, None, 1e-3, None).unwrap();
        assert_eq!(a, b);
        let text = fs::read_to_string(report_path(&cfg.trace_path)).unwrap();
        let parsed: FitReport = toml::from_str(&text).unwrap();
        assert_eq!(parsed, a);
    }

    #[test]
    fn empty_and_degenerate_traces() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.csv");
        fs::write(&empty, "").unwrap();
        let err = estimate_file(&empty, None, 1e-3, None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(!report_path(&empty).exists());

        let degenerate = TrajectoryTrace::new(vec![TraceRecord {
            k: 0,
            group_id: "w".into(),
            f_value: 1.0,
            g_dual_next: 0.0,
            delta_g_dual: 0.0,
            delta_x_norm: 0.0,
            radius_used: 0.0,
        }])
        .unwrap();
        let path = dir.path().join("degenerate.csv");
        fs::write(&path, degenerate.to_csv_string()).unwrap();
        let err = estimate_file(&path, None, 1e-3, None).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        let text = fs::read_to_string(report_path(&path)).unwrap();
        assert!(text.contains("degenerate trajectory"));
    }

    #[test]
    fn rates_table_marks_inapplicable_formulas() {
        let inp = RateInputs::new(1.0, vec![1.0], vec![0.0], 0.1);
        let t = rates_table(&inp, None).unwrap();
        assert_eq!(t["det_iterations_plain"].as_integer(), Some(200));
        assert!(t["det_iterations_weighted"]
            .as_str()
            .unwrap()
            .contains("requires L1 > 0"));
        assert!(t["pl_iterations"].as_str().unwrap().contains("requires mu"));
        let mut inp = RateInputs::new(0.5, vec![1.0], vec![0.0], 0.5);
        inp.mu = Some(1.0);
        let t = rates_table(&inp, Some(10)).unwrap();
        assert_eq!(t["pl_iterations_l1_zero"].as_integer(), Some(0));
        assert!(rates_table(&RateInputs::new(1.0, vec![1.0], vec![1.0, 2.0], 1.0), None).is_err());
    }

    #[test]
    fn derived_seeds_differ_per_stream() {
        let s: Vec<u64> = (0..4).map(|k| derive_seed(42, k)).collect();
        for i in 0..4 {
            for j in 0..i {
                assert_ne!(s[i], s[j]);
            }
        }
        assert_eq!(derive_seed(42, 1), derive_seed(42, 1));
    }
}
