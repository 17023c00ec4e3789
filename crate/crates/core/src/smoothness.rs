//! Trajectory smoothness along a run and `(L⁰, L¹)` fitting.
//!
//! ```text
//! L̂ᵢ[k]        = ‖gᵢᵏ⁺¹ − gᵢᵏ‖⋆ / ‖Xᵢᵏ⁺¹ − Xᵢᵏ‖
//! L̂ᵢᵃᵖᵖʳᵒˣ[k] = L⁰ᵢ + L¹ᵢ‖gᵢᵏ⁺¹‖⋆
//! ```
//!
//! Constants are fitted by minimizing
//! `Σ r² + λ Σ max(0, r)²` with `r = L̂ − L̂ᵃᵖᵖʳᵒˣ` over `L⁰, L¹ ≥ 0`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Records with a parameter change below this are skipped.
pub const MIN_DELTA_X: f64 = 1e-14;

pub const DEFAULT_LAMBDA: f64 = 1.0;

pub const TRACE_HEADER: [&str; 7] = [
    "k",
    "group_id",
    "f_value",
    "g_dual_next",
    "delta_g_dual",
    "delta_x_norm",
    "radius_used",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmoothnessError {
    #[error("no records for group {0:?}")]
    UnknownGroup(String),
    #[error("degenerate trajectory for group {group:?}: all {skipped} records have a vanishing step")]
    Degenerate { group: String, skipped: usize },
    #[error("sequences must be aligned and hold at least {min} points, got {got:?}")]
    Length { min: usize, got: (usize, usize) },
    #[error("relative error is undefined: L_hat[{0}] = 0")]
    ZeroReference(usize),
    #[error("unfitted constants: L0 = L1 = 0")]
    Unfitted,
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("trace line {line}: {msg}")]
    Trace { line: usize, msg: String },
    #[error("i/o: {0}")]
    Io(String),
}

impl From<csv::Error> for SmoothnessError {
    fn from(e: csv::Error) -> Self {
        let line = e.position().map_or(0, |p| p.line() as usize);
        match e.kind() {
            csv::ErrorKind::Io(io) => SmoothnessError::Io(io.to_string()),
            _ => SmoothnessError::Trace {
                line,
                msg: e.to_string(),
            },
        }
    }
}

/// One row of a trace: what happened to group `group_id` between `Xᵏ` and `Xᵏ⁺¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub k: u64,
    pub group_id: String,
    /// `f(Xᵏ)`
    pub f_value: f64,
    /// `‖gᵢᵏ⁺¹‖⋆`
    pub g_dual_next: f64,
    /// `‖gᵢᵏ⁺¹ − gᵢᵏ‖⋆`
    pub delta_g_dual: f64,
    /// `‖Xᵢᵏ⁺¹ − Xᵢᵏ‖`
    pub delta_x_norm: f64,
    pub radius_used: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryTrace {
    pub records: Vec<TraceRecord>,
    /// Run metadata such as seed, preset and schedules.
    pub meta: BTreeMap<String, String>,
}

fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

impl TrajectoryTrace {
    pub fn new(records: Vec<TraceRecord>) -> Result<Self, SmoothnessError> {
        let trace = Self {
            records,
            meta: BTreeMap::new(),
        };
        trace.validate()?;
        Ok(trace)
    }

    /// Iterations start at 0, are non-decreasing, have no gaps, and every
    /// scalar is finite with nonnegative norms.
    pub fn validate(&self) -> Result<(), SmoothnessError> {
        let mut prev: Option<u64> = None;
        for (i, r) in self.records.iter().enumerate() {
            let line = i + 2;
            let bad = |msg: String| Err(SmoothnessError::Trace { line, msg });
            match prev {
                None if r.k != 0 => return bad(format!("first iteration must be 0, got {}", r.k)),
                Some(p) if r.k != p && r.k != p + 1 => {
                    return bad(format!("iteration {} follows {p}", r.k));
                }
                _ => {}
            }
            prev = Some(r.k);
            let fields = [
                ("f_value", r.f_value),
                ("g_dual_next", r.g_dual_next),
                ("delta_g_dual", r.delta_g_dual),
                ("delta_x_norm", r.delta_x_norm),
                ("radius_used", r.radius_used),
            ];
            for (name, v) in fields {
                if !v.is_finite() {
                    return bad(format!("{name} is not finite"));
                }
                if name != "f_value" && v < 0.0 {
                    return bad(format!("{name} is negative"));
                }
            }
            if r.group_id.is_empty() {
                return bad("empty group id".into());
            }
        }
        Ok(())
    }

    /// Group ids in order of first appearance.
    pub fn group_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for r in &self.records {
            if !ids.contains(&r.group_id) {
                ids.push(r.group_id.clone());
            }
        }
        ids
    }

    pub fn records_for<'a>(&'a self, group: &'a str) -> impl Iterator<Item = &'a TraceRecord> + 'a {
        self.records.iter().filter(move |r| r.group_id == group)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), SmoothnessError> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record(TRACE_HEADER)?;
        for r in &self.records {
            w.write_record([
                r.k.to_string(),
                r.group_id.clone(),
                fmt_float(r.f_value),
                fmt_float(r.g_dual_next),
                fmt_float(r.delta_g_dual),
                fmt_float(r.delta_x_norm),
                fmt_float(r.radius_used),
            ])?;
        }
        w.flush().map_err(|e| SmoothnessError::Io(e.to_string()))
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }

    /// Parses and validates a trace. Metadata is not part of the CSV.
    pub fn read_csv<R: Read>(input: R) -> Result<Self, SmoothnessError> {
        let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        let header = rd.headers()?.clone();
        if header.iter().ne(TRACE_HEADER.iter().copied()) {
            return Err(SmoothnessError::Trace {
                line: 1,
                msg: format!("expected header {:?}", TRACE_HEADER.join(",")),
            });
        }
        let mut records = Vec::new();
        for row in rd.records() {
            let row = row?;
            let line = row.position().map_or(0, |p| p.line() as usize);
            let field = |i: usize| row.get(i).unwrap_or("");
            let num = |i: usize| {
                field(i).parse::<f64>().map_err(|_| SmoothnessError::Trace {
                    line,
                    msg: format!("{} is not a number: {:?}", TRACE_HEADER[i], field(i)),
                })
            };
            records.push(TraceRecord {
                k: field(0).parse().map_err(|_| SmoothnessError::Trace {
                    line,
                    msg: format!("k is not an iteration index: {:?}", field(0)),
                })?,
                group_id: field(1).to_string(),
                f_value: num(2)?,
                g_dual_next: num(3)?,
                delta_g_dual: num(4)?,
                delta_x_norm: num(5)?,
                radius_used: num(6)?,
            });
        }
        Self::new(records)
    }
}

/// Trajectory smoothness of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothnessSeries {
    pub k: Vec<u64>,
    pub l_hat: Vec<f64>,
    /// `‖gᵢᵏ⁺¹‖⋆` for the kept records.
    pub g_dual_next: Vec<f64>,
    /// Records dropped because `‖ΔXᵢ‖ < 1e-14`.
    pub skipped: usize,
}

pub fn trajectory_smoothness(trace: &TrajectoryTrace, group: &str) -> Result<SmoothnessSeries, SmoothnessError> {
    let mut series = SmoothnessSeries {
        k: vec![],
        l_hat: vec![],
        g_dual_next: vec![],
        skipped: 0,
    };
    let mut seen = false;
    for r in trace.records_for(group) {
        seen = true;
        if r.delta_x_norm < MIN_DELTA_X {
            series.skipped += 1;
            continue;
        }
        series.k.push(r.k);
        series.l_hat.push(r.delta_g_dual / r.delta_x_norm);
        series.g_dual_next.push(r.g_dual_next);
    }
    if !seen {
        return Err(SmoothnessError::UnknownGroup(group.to_string()));
    }
    if series.l_hat.is_empty() {
        return Err(SmoothnessError::Degenerate {
            group: group.to_string(),
            skipped: series.skipped,
        });
    }
    Ok(series)
}

pub fn approx_curve(l0: f64, l1: f64, g_dual_next: &[f64]) -> Vec<f64> {
    g_dual_next.iter().map(|g| l0 + l1 * g).collect()
}

/// `(1/K) Σ ((L̂[k] − L̂ᵃᵖᵖʳᵒˣ[k]) / L̂[k])²`
pub fn mse_rel(l_hat: &[f64], l_approx: &[f64]) -> Result<f64, SmoothnessError> {
    if l_hat.len() != l_approx.len() || l_hat.is_empty() {
        return Err(SmoothnessError::Length {
            min: 1,
            got: (l_hat.len(), l_approx.len()),
        });
    }
    if let Some(i) = l_hat.iter().position(|&v| v == 0.0) {
        return Err(SmoothnessError::ZeroReference(i));
    }
    let sum: f64 = l_hat.iter().zip(l_approx).map(|(h, a)| ((h - a) / h).powi(2)).sum();
    Ok(sum / l_hat.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessFit {
    pub l0: f64,
    pub l1: f64,
    pub lambda: f64,
    /// `None` when some `L̂[k]` is 0.
    pub mse_rel: Option<f64>,
    pub n_points: usize,
    /// True when the data cannot separate `L⁰` from `L¹` and `L¹ = 0` was chosen.
    pub tie_broken: bool,
}

fn term(r: f64, lambda: f64) -> f64 {
    if r > 0.0 {
        (1.0 + lambda) * r * r
    } else {
        r * r
    }
}

/// `Σ r² + λ Σ max(0, r)²` at `(l0, l1)`.
pub fn fit_loss(l_hat: &[f64], g: &[f64], lambda: f64, l0: f64, l1: f64) -> f64 {
    l_hat.iter().zip(g).map(|(y, g)| term(y - l0 - l1 * g, lambda)).sum()
}

/// `Σ max(0, r)²` at `(l0, l1)`.
pub fn hinge_penalty(l_hat: &[f64], g: &[f64], l0: f64, l1: f64) -> f64 {
    l_hat
        .iter()
        .zip(g)
        .map(|(y, g)| (y - l0 - l1 * g).max(0.0).powi(2))
        .sum()
}

/// Exact minimizer over `s ∈ [lo, hi]` of `Σⱼ term(aⱼ + bⱼs)`, a convex
/// piecewise quadratic with kinks at `s = −aⱼ/bⱼ`.
fn line_minimize(a: &[f64], b: &[f64], lambda: f64, lo: f64, hi: f64) -> f64 {
    let slope = |s: f64| -> f64 {
        a.iter()
            .zip(b)
            .map(|(a, b)| {
                let r = a + b * s;
                let w = if r > 0.0 { 1.0 + lambda } else { 1.0 };
                w * b * r
            })
            .sum()
    };
    let mut kinks: Vec<f64> = a
        .iter()
        .zip(b)
        .filter(|(_, b)| **b != 0.0)
        .map(|(a, b)| -a / b)
        .filter(|s| *s > lo && *s < hi)
        .collect();
    kinks.sort_by(f64::total_cmp);
    kinks.dedup();

    // Segment [edges[j], edges[j+1]] containing the sign change of the slope.
    let mut edges = Vec::with_capacity(kinks.len() + 2);
    edges.push(lo);
    edges.extend(kinks);
    edges.push(hi);
    if slope(lo) >= 0.0 {
        return lo;
    }
    let (mut left, mut right) = (0usize, edges.len() - 1);
    if hi.is_finite() && slope(hi) <= 0.0 {
        return hi;
    }
    // Invariant: slope(edges[left]) < 0, slope(edges[right]) > 0 (or right is +∞).
    while right - left > 1 {
        let mid = (left + right) / 2;
        if slope(edges[mid]) < 0.0 {
            left = mid;
        } else {
            right = mid;
        }
    }
    let (s_lo, s_hi) = (edges[left], edges[right]);
    let probe = if s_hi.is_finite() {
        0.5 * (s_lo + s_hi)
    } else {
        s_lo + 1.0
    };
    let (mut num, mut den) = (0.0, 0.0);
    for (a, b) in a.iter().zip(b) {
        let w = if a + b * probe > 0.0 { 1.0 + lambda } else { 1.0 };
        num += w * a * b;
        den += w * b * b;
    }
    if den == 0.0 {
        return s_lo;
    }
    (-num / den).clamp(s_lo, s_hi)
}

/// Minimizer of `Σ wⱼ (yⱼ − l0 − l1·gⱼ)²` over `l0, l1 ≥ 0`.
fn weighted_nnls(y: &[f64], g: &[f64], w: &[f64]) -> (f64, f64) {
    let sw: f64 = w.iter().sum();
    let y_bar = w.iter().zip(y).map(|(w, y)| w * y).sum::<f64>() / sw;
    let g_bar = w.iter().zip(g).map(|(w, g)| w * g).sum::<f64>() / sw;
    let (mut sgg, mut sgy) = (0.0, 0.0);
    for ((w, y), g) in w.iter().zip(y).zip(g) {
        sgg += w * (g - g_bar) * (g - g_bar);
        sgy += w * (g - g_bar) * (y - y_bar);
    }
    if sgg > 0.0 {
        let l1 = sgy / sgg;
        let l0 = y_bar - l1 * g_bar;
        if l0 >= 0.0 && l1 >= 0.0 {
            return (l0, l1);
        }
    }
    let q = |l0: f64, l1: f64| -> f64 {
        w.iter()
            .zip(y)
            .zip(g)
            .map(|((w, y), g)| w * (y - l0 - l1 * g).powi(2))
            .sum()
    };
    let wgg: f64 = w.iter().zip(g).map(|(w, g)| w * g * g).sum();
    let wgy: f64 = w.iter().zip(g).zip(y).map(|((w, g), y)| w * g * y).sum();
    let mut best = (0.0, 0.0);
    let mut best_q = q(0.0, 0.0);
    let mut candidates = vec![(y_bar.max(0.0), 0.0)];
    if wgg > 0.0 {
        candidates.push((0.0, (wgy / wgg).max(0.0)));
    }
    for (l0, l1) in candidates {
        let v = q(l0, l1);
        if v < best_q || (v == best_q && l1 < best.1) {
            best = (l0, l1);
            best_q = v;
        }
    }
    best
}

const FIT_MAX_ITERATIONS: usize = 200;

/// Minimizes the hinge-penalized loss over `L⁰, L¹ ≥ 0`.
///
/// When all `g` are equal the loss depends on `L⁰ + L¹g` only; `L¹ = 0` is
/// returned. Otherwise the loss is strictly convex and the minimizer is found
/// by a finite Newton method: weighted nonnegative least squares on the
/// current sign pattern, followed by an exact line search on the true loss.
pub fn fit_constants(l_hat: &[f64], g_dual_next: &[f64], lambda: f64) -> Result<SmoothnessFit, SmoothnessError> {
    if l_hat.len() != g_dual_next.len() || l_hat.len() < 2 {
        return Err(SmoothnessError::Length {
            min: 2,
            got: (l_hat.len(), g_dual_next.len()),
        });
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(SmoothnessError::Invalid(format!(
            "lambda must be nonnegative, got {lambda}"
        )));
    }
    if l_hat.iter().chain(g_dual_next).any(|v| !v.is_finite()) {
        return Err(SmoothnessError::Invalid("inputs must be finite".into()));
    }
    if g_dual_next.iter().any(|&v| v < 0.0) {
        return Err(SmoothnessError::Invalid("dual norms must be nonnegative".into()));
    }

    let g0 = g_dual_next[0];
    let constant_g = g_dual_next.iter().all(|&v| v == g0);
    let (l0, l1) = if constant_g {
        let neg_ones = vec![-1.0; l_hat.len()];
        (line_minimize(l_hat, &neg_ones, lambda, 0.0, f64::INFINITY), 0.0)
    } else {
        newton_fit(l_hat, g_dual_next, lambda)
    };

    Ok(SmoothnessFit {
        l0,
        l1,
        lambda,
        mse_rel: mse_rel(l_hat, &approx_curve(l0, l1, g_dual_next)).ok(),
        n_points: l_hat.len(),
        tie_broken: constant_g,
    })
}

fn newton_fit(y: &[f64], g: &[f64], lambda: f64) -> (f64, f64) {
    let unit = vec![1.0; y.len()];
    let mut x = weighted_nnls(y, g, &unit);
    if lambda == 0.0 {
        return x;
    }
    for _ in 0..FIT_MAX_ITERATIONS {
        let w: Vec<f64> = y
            .iter()
            .zip(g)
            .map(|(y, g)| if y - x.0 - x.1 * g > 0.0 { 1.0 + lambda } else { 1.0 })
            .collect();
        let z = weighted_nnls(y, g, &w);
        let d = (z.0 - x.0, z.1 - x.1);
        if d.0 == 0.0 && d.1 == 0.0 {
            break;
        }
        // r(s) = y − (x0 + s·d0) − (x1 + s·d1)·g
        let a: Vec<f64> = y.iter().zip(g).map(|(y, g)| y - x.0 - x.1 * g).collect();
        let b: Vec<f64> = g.iter().map(|g| -d.0 - d.1 * g).collect();
        let s = line_minimize(&a, &b, lambda, 0.0, 1.0);
        let next = ((x.0 + s * d.0).max(0.0), (x.1 + s * d.1).max(0.0));
        if next == x || fit_loss(y, g, lambda, next.0, next.1) > fit_loss(y, g, lambda, x.0, x.1) {
            break;
        }
        x = next;
    }
    x
}

/// `t = g / (L⁰ + L¹g)`
pub fn suggest_stepsize(fit: &SmoothnessFit, current_g_dual: f64) -> Result<f64, SmoothnessError> {
    if fit.l0 == 0.0 && fit.l1 == 0.0 {
        return Err(SmoothnessError::Unfitted);
    }
    if !(current_g_dual >= 0.0 && current_g_dual.is_finite()) {
        return Err(SmoothnessError::Invalid(format!(
            "dual norm must be finite and nonnegative, got {current_g_dual}"
        )));
    }
    if current_g_dual == 0.0 {
        return Ok(0.0);
    }
    Ok(current_g_dual / (fit.l0 + fit.l1 * current_g_dual))
}
