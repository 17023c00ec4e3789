//! End-to-end acceptance checks. Runs without the libtest harness and prints
//! one PASS/FAIL line per criterion; exits nonzero if any fails.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use gluon::harness::{self, ExperimentConfig};
use gluon::problems::{
    cosh_separable, finite_difference_error, layered_quadratic, tiny_mlp, with_gaussian_noise_in, Objective,
};
use gluon::smoothness::{fit_constants, trajectory_smoothness, DEFAULT_LAMBDA};
use gluon::theory::{
    adaptive_stoch_iterations, det_iterations_plain, det_iterations_weighted, pl_iterations, stoch_bound,
    stoch_criterion_weights, RateInputs, Variant,
};
use gluon::{Gluon, GroupRole, Matrix, MomentumRule, NormSpec, ParamGroup, Preset, StepsizeSchedule};

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Outcome,
}

// NaN makes the condition false, which counts as a failure.
macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn oracle_polar(g: &Matrix) -> Matrix {
    let a = DMatrix::from_row_slice(g.rows(), g.cols(), g.as_slice());
    let svd = a.svd(true, true);
    let uv = svd.u.unwrap() * svd.v_t.unwrap();
    Matrix::from_fn(g.rows(), g.cols(), |r, c| uv[(r, c)])
}

fn frob_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.axpy(-1.0, b).frobenius_norm()
}

fn sum_dual(norms: &[NormSpec], grads: &[Matrix]) -> f64 {
    norms.iter().zip(grads).map(|(n, g)| n.dual_norm(g).unwrap()).sum()
}

fn gluon_for(x: Vec<Matrix>, norms: &[NormSpec], schedules: &[StepsizeSchedule], rule: MomentumRule) -> Gluon {
    let groups = x
        .into_iter()
        .zip(norms)
        .zip(schedules)
        .enumerate()
        .map(|(i, ((x, n), s))| ParamGroup::new(format!("g{i}"), x, *n, *s))
        .collect();
    Gluon::new(groups, rule).unwrap()
}

fn lmo_duality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scales = [0.1, 0.5, 1.0, 3.0, 40.0];
    let mut worst_dual: f64 = 0.0;
    let mut worst_primal: f64 = 0.0;
    let mut checks = 0;
    for _ in 0..200 {
        let (m, n) = (rng.random_range(1..=9), rng.random_range(1..=9));
        let g = gaussian(&mut rng, m, n).scale(10f64.powf(rng.random_range(-3.0..3.0)));
        for s in scales {
            for spec in [
                NormSpec::spectral(s).unwrap(),
                NormSpec::max_entry(s).unwrap(),
                NormSpec::euclidean(s).unwrap(),
            ] {
                let d = spec.lmo_direction(&g).unwrap();
                let dual = spec.dual_norm(&g).unwrap();
                let rel = (g.inner(&d) + dual).abs() / dual;
                worst_dual = worst_dual.max(rel);
                worst_primal = worst_primal.max(spec.primal_norm(&d).unwrap());
                ensure!(rel <= 1e-8, "<g, d> = {} vs -{dual} for {spec} on {m}x{n}", g.inner(&d));
                ensure!(
                    spec.primal_norm(&d).unwrap() <= 1.0 + 1e-10,
                    "primal norm {} for {spec}",
                    spec.primal_norm(&d).unwrap()
                );
                checks += 1;
            }
        }
    }
    Ok(format!(
        "{checks} cases, worst duality gap {worst_dual:.1e}, largest primal norm {worst_primal:.12}"
    ))
}

fn update_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for trial in 0..40 {
        let t = rng.random_range(0.01..2.0);
        let shapes = [
            (rng.random_range(2..9), rng.random_range(2..9)),
            (6, 3),
            (rng.random_range(2..7), 7),
        ];
        let x: Vec<Matrix> = shapes.iter().map(|&(m, n)| gaussian(&mut rng, m, n)).collect();
        let g: Vec<Matrix> = shapes.iter().map(|&(m, n)| gaussian(&mut rng, m, n)).collect();
        let constant = vec![StepsizeSchedule::Constant { t }; 3];

        // unScion LLM: hidden layers then a max-entry head.
        let norms = Preset::UnscionLlm.norms(&shapes, None).unwrap();
        let mut opt = gluon_for(x.clone(), &norms, &constant, MomentumRule::None);
        opt.step_deterministic(&g).unwrap();
        let got = opt.params();
        for i in 0..2 {
            let (m, n) = shapes[i];
            let want = x[i].axpy(-t * (m as f64 / n as f64).sqrt(), &oracle_polar(&g[i]));
            worst = worst.max(frob_diff(&got[i], &want));
        }
        let n_p = shapes[2].1 as f64;
        let want_head = x[2].axpy(-t / n_p, &g[2].map(f64::signum));
        worst = worst.max(frob_diff(&got[2], &want_head));

        // Muon.
        let norms = Preset::Muon.norms(&shapes, None).unwrap();
        let mut opt = gluon_for(x.clone(), &norms, &constant, MomentumRule::None);
        opt.step_deterministic(&g).unwrap();
        for (i, got) in opt.params().iter().enumerate() {
            worst = worst.max(frob_diff(got, &x[i].axpy(-t, &oracle_polar(&g[i]))));
        }

        // unScion CNN: conv kernel, bias, head.
        let (c_in, c_out, k) = (2 + trial % 3, 3, 3);
        let shapes = [(c_out, c_in * k * k), (c_out, 1), (4, c_out)];
        let roles = [
            GroupRole::Conv { c_in, c_out, kernel: k },
            GroupRole::Bias,
            GroupRole::Head,
        ];
        let x: Vec<Matrix> = shapes.iter().map(|&(m, n)| gaussian(&mut rng, m, n)).collect();
        let g: Vec<Matrix> = shapes.iter().map(|&(m, n)| gaussian(&mut rng, m, n)).collect();
        let norms = Preset::UnscionCnn.norms(&shapes, Some(&roles)).unwrap();
        let mut opt = gluon_for(x.clone(), &norms, &constant, MomentumRule::None);
        opt.step_deterministic(&g).unwrap();
        let got = opt.params();
        let conv_scale = (c_out as f64 / c_in as f64).sqrt() / (k * k) as f64;
        worst = worst.max(frob_diff(&got[0], &x[0].axpy(-t * conv_scale, &oracle_polar(&g[0]))));
        let bias = g[1].scale((c_out as f64).sqrt() / g[1].frobenius_norm());
        worst = worst.max(frob_diff(&got[1], &x[1].axpy(-t, &bias)));
        worst = worst.max(frob_diff(
            &got[2],
            &x[2].axpy(-t / c_out as f64, &g[2].map(f64::signum)),
        ));
    }
    ensure!(worst <= 1e-6, "largest Frobenius deviation {worst:.3e}");
    Ok(format!("120 updates, largest Frobenius deviation {worst:.1e}"))
}

fn boundary_property() -> Outcome {
    let mut checked = 0usize;
    let mut worst: f64 = 0.0;

    // Stochastic unScion on the MLP with momentum and decaying radii.
    let mlp = tiny_mlp((5, 8, 3), 11, 64).unwrap().with_batch(8).unwrap();
    let shapes: Vec<_> = mlp.groups().iter().map(|g| g.shape()).collect();
    let roles: Vec<_> = mlp.groups().iter().map(|g| g.role.unwrap()).collect();
    let norms = Preset::UnscionLlm.norms(&shapes, Some(&roles)).unwrap();
    let schedules = vec![StepsizeSchedule::PolynomialDecay { t_base: 0.05 }; norms.len()];
    let mut opt = gluon_for(mlp.initial_point(3), &norms, &schedules, MomentumRule::SqrtDecay);

    // Deterministic run on a quadratic mixing all three families and schedules.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let anchors = vec![
        gaussian(&mut rng, 4, 3),
        gaussian(&mut rng, 3, 3),
        gaussian(&mut rng, 5, 1),
    ];
    let quad = layered_quadratic(&[1.0, 0.5, 2.0], anchors).unwrap();
    let qnorms = [
        NormSpec::spectral(0.8).unwrap(),
        NormSpec::max_entry(3.0).unwrap(),
        NormSpec::euclidean(0.4).unwrap(),
    ];
    let qsched = [
        StepsizeSchedule::AdaptiveDeterministic { l0: 3.0, l1: 0.5 },
        StepsizeSchedule::Constant { t: 1e-3 },
        StepsizeSchedule::PolynomialDecay { t_base: 0.2 },
    ];
    let mut qopt = gluon_for(quad.initial_point(6), &qnorms, &qsched, MomentumRule::None);

    for k in 0..500u64 {
        let before = opt.params();
        let g = mlp.stochastic_gradient(&before, k).unwrap();
        let report = opt.step_stochastic(&g).unwrap();
        let after = opt.params();
        for (i, s) in report.groups.iter().enumerate() {
            if s.frozen || s.driver_dual == 0.0 {
                continue;
            }
            let moved = norms[i].primal_norm(&after[i].axpy(-1.0, &before[i])).unwrap();
            worst = worst.max((moved - s.radius).abs());
            checked += 1;
        }

        let before = qopt.params();
        let g = quad.gradient(&before).unwrap();
        let report = qopt.step_deterministic(&g).unwrap();
        let after = qopt.params();
        for (i, s) in report.groups.iter().enumerate() {
            if s.frozen || s.driver_dual == 0.0 {
                continue;
            }
            let moved = qnorms[i].primal_norm(&after[i].axpy(-1.0, &before[i])).unwrap();
            worst = worst.max((moved - s.radius).abs());
            checked += 1;
        }
    }
    ensure!(worst <= 1e-8, "largest |‖ΔX‖ - t| = {worst:.3e}");
    Ok(format!("{checked} group steps, largest |‖ΔX‖ - t| {worst:.1e}"))
}

fn descent_inequality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let c = [1.0, 2.0, 0.5];
    let anchors = vec![
        gaussian(&mut rng, 3, 4),
        gaussian(&mut rng, 2, 2),
        gaussian(&mut rng, 5, 1),
    ];
    let quad = layered_quadratic(&c, anchors).unwrap();
    let mut summary = Vec::new();
    let setups = [
        ("euclidean", vec![NormSpec::euclidean(1.0).unwrap(); 3]),
        (
            "mixed",
            vec![
                NormSpec::spectral(1.0).unwrap(),
                NormSpec::max_entry(1.0).unwrap(),
                NormSpec::euclidean(1.0).unwrap(),
            ],
        ),
    ];
    for (label, norms) in setups {
        let meta = quad.metadata_for(&norms);
        let l0 = meta.l0.unwrap();
        let l1 = meta.l1.unwrap();
        let schedules: Vec<_> = l0
            .iter()
            .zip(&l1)
            .map(|(&l0, &l1)| StepsizeSchedule::AdaptiveDeterministic { l0, l1 })
            .collect();
        let x0 = quad.initial_point(8);
        let delta0 = quad.value(&x0).unwrap() - meta.f_inf.unwrap();
        let mut opt = gluon_for(x0, &norms, &schedules, MomentumRule::None);
        let mut worst_slack = f64::NEG_INFINITY;
        for _ in 0..1000 {
            let x = opt.params();
            let f = quad.value(&x).unwrap();
            let g = quad.gradient(&x).unwrap();
            let decrease: f64 = norms
                .iter()
                .zip(&g)
                .zip(l0.iter().zip(&l1))
                .map(|((n, g), (l0, l1))| {
                    let d = n.dual_norm(g).unwrap();
                    d * d / (2.0 * (l0 + l1 * d))
                })
                .sum();
            opt.step_deterministic(&g).unwrap();
            let f_next = quad.value(&opt.params()).unwrap();
            worst_slack = worst_slack.max(f_next - (f - decrease));
        }
        ensure!(
            worst_slack <= 1e-9,
            "{label}: descent bound exceeded by {worst_slack:.3e}"
        );

        for eps in [1e-1, 1e-2, 1e-3] {
            let k_bound = det_iterations_plain(&RateInputs::new(delta0, l0.clone(), l1.clone(), eps)).unwrap();
            let mut opt = gluon_for(quad.initial_point(8), &norms, &schedules, MomentumRule::None);
            let mut hit = None;
            for k in 0..=k_bound {
                let g = quad.gradient(&opt.params()).unwrap();
                if sum_dual(&norms, &g) <= eps {
                    hit = Some(k);
                    break;
                }
                opt.step_deterministic(&g).unwrap();
            }
            let Some(k) = hit else {
                return Err(format!("{label}: eps {eps} not reached within {k_bound}"));
            };
            summary.push(format!("{label} eps {eps:.0e}: {k} <= {k_bound}"));
        }
    }
    Ok(summary.join("; "))
}

fn pl_linear_rate() -> Outcome {
    let c = [1.0, 2.0];
    let shapes = [(3, 3), (2, 4)];
    let anchors: Vec<_> = shapes.iter().map(|&(m, n)| Matrix::zeros(m, n)).collect();
    let quad = layered_quadratic(&c, anchors).unwrap();
    let mut summary = Vec::new();
    for (label, norms) in [
        ("euclidean", vec![NormSpec::euclidean(1.0).unwrap(); 2]),
        ("spectral", vec![NormSpec::spectral(1.0).unwrap(); 2]),
    ] {
        let meta = quad.metadata_for(&norms);
        let (l0, mu) = (meta.l0.unwrap(), meta.mu.unwrap());
        let l0_max = l0.iter().cloned().fold(0.0, f64::max);
        let schedules: Vec<_> = l0
            .iter()
            .map(|&l0| StepsizeSchedule::AdaptiveDeterministic { l0, l1: 0.0 })
            .collect();
        let x0 = quad.initial_point(9);
        let delta0 = quad.value(&x0).unwrap();
        let eps = 1e-8;
        let mut inp = RateInputs::new(delta0, l0.clone(), vec![0.0; 2], eps);
        inp.mu = Some(mu);
        let k_pl = pl_iterations(&inp, true).unwrap();
        let mut opt = gluon_for(x0, &norms, &schedules, MomentumRule::None);
        let rate = 1.0 - mu / l0_max;
        let mut reached = None;
        for k in 0..=200u64.max(k_pl) {
            let x = opt.params();
            let gap = quad.value(&x).unwrap();
            if k <= 200 {
                let bound = rate.powi(k as i32) * delta0;
                ensure!(
                    gap <= bound * (1.0 + 1e-12),
                    "{label}: k = {k}, gap {gap:e} > {bound:e}"
                );
            }
            if reached.is_none() && gap <= eps {
                reached = Some(k);
            }
            opt.step_deterministic(&quad.gradient(&x).unwrap()).unwrap();
        }
        match reached {
            Some(k) if k <= k_pl => summary.push(format!("{label}: eps reached at {k} <= {k_pl}")),
            _ => return Err(format!("{label}: eps {eps} not reached within {k_pl}")),
        }
    }
    Ok(summary.join("; "))
}

/// Mean over seeds of Σ tᵢ‖∇ᵢf(Xᵏ)‖⋆ for k < `steps`, with base radii `t`
/// weighting the criterion as well as driving the decaying schedule.
fn averaged_criterion(
    noisy: &dyn Objective,
    exact: &dyn Objective,
    x0: &[Matrix],
    norms: &[NormSpec],
    t: &[f64],
    seeds: u64,
    steps: usize,
) -> Vec<f64> {
    let mut mean = vec![0.0; steps];
    let schedules: Vec<_> = t
        .iter()
        .map(|&t| StepsizeSchedule::PolynomialDecay { t_base: t })
        .collect();
    for seed in 0..seeds {
        let mut opt = gluon_for(x0.to_vec(), norms, &schedules, MomentumRule::SqrtDecay);
        for (k, slot) in mean.iter_mut().enumerate() {
            let x = opt.params();
            let g = exact.gradient(&x).unwrap();
            let crit: f64 = t
                .iter()
                .zip(norms.iter().zip(&g))
                .map(|(w, (n, g))| w * n.dual_norm(g).unwrap())
                .sum();
            *slot += crit / seeds as f64;
            let sg = noisy.stochastic_gradient(&x, seed * 1_000_003 + k as u64).unwrap();
            opt.step_stochastic(&sg).unwrap();
        }
    }
    mean
}

fn stochastic_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let anchors = vec![gaussian(&mut rng, 3, 2), gaussian(&mut rng, 4, 1)];
    let c = [1.0, 2.0];
    let sigma = 0.5;
    let norms = [NormSpec::spectral(1.0).unwrap(), NormSpec::euclidean(1.0).unwrap()];
    let exact = layered_quadratic(&c, anchors.clone()).unwrap();
    let noisy = with_gaussian_noise_in(Box::new(layered_quadratic(&c, anchors).unwrap()), sigma, 17, &norms).unwrap();
    let meta = noisy.metadata_for(&norms);
    ensure!(meta.sigma == Some(sigma), "noise wrapper did not report its sigma");
    let l0 = meta.l0.unwrap();
    let x0 = exact.initial_point(19);
    let delta0 = exact.value(&x0).unwrap() - meta.f_inf.unwrap();
    let k_max = 10_000usize;
    let mut summary = Vec::new();

    // L¹ ≠ 0 branch: any L¹ is admissible on a quadratic; radii 1/(12L¹ᵢ).
    let mut with_l1 = RateInputs::new(delta0, l0.clone(), vec![1.0, 0.5], 1.0);
    with_l1.sigma = sigma;
    // L¹ = 0 branch with free base radii.
    let mut without_l1 = RateInputs::new(delta0, l0.clone(), vec![0.0, 0.0], 1.0);
    without_l1.sigma = sigma;
    without_l1.radii = Some(vec![0.1, 0.05]);

    for (label, inp, l1_zero) in [("L1 > 0", &with_l1, false), ("L1 = 0", &without_l1, true)] {
        let t = stoch_criterion_weights(inp, l1_zero).unwrap();
        let series = averaged_criterion(&noisy, &exact, &x0, &norms, &t, 10, k_max);
        for k in [100u64, 1_000, 10_000] {
            let best = series[..k as usize].iter().cloned().fold(f64::INFINITY, f64::min);
            let bound = stoch_bound(k, inp, l1_zero).unwrap();
            ensure!(best <= bound, "{label}, K = {k}: criterion {best:e} > bound {bound:e}");
            summary.push(format!("{label} K={k}: {best:.3e} <= {bound:.3e}"));
        }
    }
    Ok(summary.join("; "))
}

fn scratch_dir() -> tempfile::TempDir {
    tempfile::tempdir().expect("temporary directory")
}

fn estimator_exactness() -> Outcome {
    let dir = scratch_dir();
    let trace_path = dir.path().join("quad.csv");
    let cfg = ExperimentConfig::from_toml_str(&format!(
        r#"
problem = "layered_quadratic"
curvatures = [2.5, 2.5, 2.5]
shapes = [[3, 4], [2, 2], [6, 1]]
norms = ["euclid", "euclid", "euclid"]
schedule = "constant:0.05"
iterations = 300
seed = 4
trace_path = {:?}
"#,
        trace_path.display().to_string()
    ))
    .map_err(|e| e.to_string())?;
    harness::run(&cfg).map_err(|e| e.to_string())?;
    let trace = harness::load_trace(&trace_path).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    let mut points = 0;
    for id in trace.group_ids() {
        let series = trajectory_smoothness(&trace, &id).map_err(|e| e.to_string())?;
        for l in &series.l_hat {
            worst = worst.max((l - 2.5).abs());
            points += 1;
        }
    }
    ensure!(worst <= 1e-9, "largest |L̂ - 2.5| = {worst:.3e}");
    let report = harness::estimate_file(&trace_path, None, 1e-3, None).map_err(|e| e.to_string())?;
    let mut fits = Vec::new();
    for g in &report.groups {
        let fit = g.fit.as_ref().ok_or_else(|| format!("group {} has no fit", g.id))?;
        ensure!(
            (fit.l0 - 2.5).abs() <= 1e-9 && fit.l1.abs() <= 1e-9,
            "group {}: fit ({}, {})",
            g.id,
            fit.l0,
            fit.l1
        );
        fits.push(format!("{}=({:.10}, {:.1e})", g.id, fit.l0, fit.l1));
    }
    Ok(format!(
        "{points} estimates, largest |L̂ - 2.5| {worst:.1e}, fits {}",
        fits.join(" ")
    ))
}

fn fit_recovery() -> Outcome {
    let (l0_star, l1_star) = (1.0, 2.0);
    let g: Vec<f64> = (0..100).map(|i| 10f64.powf(i as f64 / 99.0)).collect();
    let mut good = 0;
    let mut worst: f64 = 0.0;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let l_hat: Vec<f64> = g
            .iter()
            .map(|g| (l0_star + l1_star * g) * (1.0 + rng.random_range(-0.01..0.01)))
            .collect();
        let fit = fit_constants(&l_hat, &g, DEFAULT_LAMBDA).map_err(|e| e.to_string())?;
        let err = ((fit.l0 - l0_star).abs() / l0_star).max((fit.l1 - l1_star).abs() / l1_star);
        worst = worst.max(err);
        if err <= 0.05 {
            good += 1;
        }
    }
    ensure!(good >= 95, "only {good}/100 trials within 5%");
    Ok(format!(
        "{good}/100 trials within 5%, worst relative error {:.2}%",
        100.0 * worst
    ))
}

fn gluon_cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_gluon"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "gluon {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).trim().to_string())
}

fn stepsize_anchors() -> Outcome {
    let hidden = gluon_cli(&["suggest", "--l0", "0", "--l1", "70", "--g", "5"])?;
    let head = gluon_cli(&["suggest", "--l0", "0", "--l1", "1.3", "--g", "5"])?;
    ensure!(hidden == "0.0143", "hidden stepsize printed as {hidden}");
    ensure!(head == "0.769", "head stepsize printed as {head}");
    let two_sig = |s: &str, digits: usize| format!("{:.*}", digits, s.parse::<f64>().unwrap());
    ensure!(
        two_sig(&hidden, 3) == "0.014",
        "hidden rounds to {}",
        two_sig(&hidden, 3)
    );
    ensure!(two_sig(&head, 2) == "0.77", "head rounds to {}", two_sig(&head, 2));

    // The same value from a fit on a synthetic trace with L̂ = 70g.
    let g: Vec<f64> = (0..50).map(|i| 0.1 + 0.05 * i as f64).collect();
    let l_hat: Vec<f64> = g.iter().map(|g| 70.0 * g).collect();
    let fit = fit_constants(&l_hat, &g, DEFAULT_LAMBDA).map_err(|e| e.to_string())?;
    let step = gluon::smoothness::suggest_stepsize(&fit, 2.0).map_err(|e| e.to_string())?;
    ensure!((step - 1.0 / 70.0).abs() <= 1e-9, "fitted suggestion {step}");

    // Tuned reference values: learning rate 0.00036 times radius multipliers 50 and 3000.
    let (tuned_hidden, tuned_head) = (0.00036 * 50.0, 0.00036 * 3000.0);
    ensure!(
        (tuned_hidden - 0.018f64).abs() < 1e-12 && (tuned_head - 1.08f64).abs() < 1e-12,
        "tuned values"
    );
    Ok(format!(
        "suggested {hidden} and {head}; tuned {tuned_hidden:.3} and {tuned_head:.2}"
    ))
}

fn rate_regression() -> Outcome {
    let k = det_iterations_plain(&RateInputs::new(1.0, vec![1.0], vec![0.0], 0.1)).map_err(|e| e.to_string())?;
    ensure!(k == 200, "deterministic plain count {k}");
    let k = det_iterations_weighted(&RateInputs::new(1.0, vec![0.0, 0.0], vec![2.0, 4.0], 1.0))
        .map_err(|e| e.to_string())?;
    ensure!(k == 6, "deterministic weighted count {k}");
    let mut inp = RateInputs::new(1.0, vec![10.0, 3.0], vec![0.0, 0.0], (-1.0f64).exp());
    inp.mu = Some(1.0);
    let k = pl_iterations(&inp, true).map_err(|e| e.to_string())?;
    ensure!(k == 10, "PL count {k}");
    let b = stoch_bound(1, &RateInputs::new(1.0, vec![0.0], vec![1.0], 1.0), false).map_err(|e| e.to_string())?;
    ensure!(b == 2.0, "stochastic bound {b}");
    let mut inp = RateInputs::new(1.0, vec![1.0], vec![0.0], 0.1);
    inp.zeta = Some(0.5);
    let k = adaptive_stoch_iterations(&inp, Variant::Plain).map_err(|e| e.to_string())?;
    ensure!(k == 800, "adaptive stochastic count {k}");

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..500 {
        let p = rng.random_range(1..6);
        let l0: Vec<f64> = (0..p).map(|_| rng.random_range(0.0..10.0)).collect();
        let l1: Vec<f64> = (0..p).map(|_| rng.random_range(0.01..10.0)).collect();
        let mut inp = RateInputs::new(rng.random_range(0.1..100.0), l0, l1, rng.random_range(1e-4..1.0));
        inp.zeta = Some(0.0);
        for (variant, det) in [
            (Variant::Plain, det_iterations_plain(&inp)),
            (Variant::Weighted, det_iterations_weighted(&inp)),
        ] {
            let a = adaptive_stoch_iterations(&inp, variant).map_err(|e| e.to_string())?;
            let d = det.map_err(|e| e.to_string())?;
            ensure!(a == d, "zeta = 0 gives {a}, deterministic {d}");
        }
    }
    Ok("K = 200, 6, 10, 800 and bound 2.0 reproduced; zeta = 0 identities hold on 500 random inputs".into())
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let anchors = vec![gaussian(&mut rng, 3, 4), gaussian(&mut rng, 5, 1)];
    let norms = [NormSpec::spectral(1.0).unwrap(), NormSpec::euclidean(1.0).unwrap()];
    let objectives: Vec<Box<dyn Objective>> = vec![
        Box::new(layered_quadratic(&[0.7, 3.0], anchors.clone()).unwrap()),
        Box::new(cosh_separable(&[0.5, 2.0], &[(3, 2), (1, 4)]).unwrap()),
        Box::new(tiny_mlp((4, 6, 2), 2, 32).unwrap()),
        Box::new(
            with_gaussian_noise_in(
                Box::new(layered_quadratic(&[1.0, 1.0], anchors).unwrap()),
                0.3,
                1,
                &norms,
            )
            .unwrap(),
        ),
    ];
    let mut worst: f64 = 0.0;
    for obj in &objectives {
        for point in 0..20 {
            let x: Vec<Matrix> = obj
                .groups()
                .iter()
                .map(|g| gaussian(&mut rng, g.rows, g.cols).scale(0.8))
                .collect();
            let err = finite_difference_error(obj.as_ref(), &x, 1e-5).map_err(|e| e.to_string())?;
            worst = worst.max(err);
            ensure!(err <= 1e-5, "{} point {point}: relative error {err:.3e}", obj.name());
        }
    }
    Ok(format!(
        "{} objectives x 20 points, worst relative error {worst:.1e}",
        objectives.len()
    ))
}

fn run_twice(dir: &Path, name: &str, body: &str) -> Result<(), String> {
    let config = dir.join(format!("{name}.toml"));
    let trace = dir.join(format!("{name}.csv"));
    std::fs::write(
        &config,
        format!("{body}\ntrace_path = {:?}\n", trace.display().to_string()),
    )
    .map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for _ in 0..2 {
        gluon_cli(&["run", "--config", config.to_str().unwrap(), "--dump-params"])?;
        let files: Vec<Vec<u8>> = [trace.clone(), harness::meta_path(&trace), harness::params_path(&trace)]
            .iter()
            .map(|p| std::fs::read(p).map_err(|e| format!("{}: {e}", p.display())))
            .collect::<Result<_, _>>()?;
        for p in [trace.clone(), harness::meta_path(&trace), harness::params_path(&trace)] {
            std::fs::remove_file(p).map_err(|e| e.to_string())?;
        }
        outputs.push(files);
    }
    ensure!(outputs[0][0].len() > 100, "{name}: trace is suspiciously short");
    ensure!(outputs[0] == outputs[1], "{name}: outputs differ between invocations");
    Ok(())
}

fn determinism() -> Outcome {
    let dir = scratch_dir();
    run_twice(
        dir.path(),
        "mlp",
        r#"problem = "tiny_mlp"
widths = [5, 7, 3]
samples = 40
batch = 6
preset = "unscion_llm"
schedule = "poly:0.05"
momentum = "sqrt"
stochastic = true
spectral_backend = "newton_schulz"
iterations = 150
seed = 99"#,
    )?;
    run_twice(
        dir.path(),
        "noisy",
        r#"problem = "layered_quadratic"
curvatures = [1.0, 3.0]
shapes = [[4, 3], [3, 1]]
norms = ["spectral:1", "max:2"]
schedules = ["adaptive:1:0.5", "constant:0.01"]
momentum = "constant:0.9"
stochastic = true
noise_sigma = 0.2
iterations = 150
seed = 7"#,
    )?;
    Ok("trace, metadata and parameter files byte-identical across two invocations for 2 configs".into())
}

fn main() {
    let criteria = [
        Criterion {
            id: 1,
            name: "LMO duality suite",
            budget: Some(Duration::from_secs(5)),
            run: lmo_duality,
        },
        Criterion {
            id: 2,
            name: "Muon/unScion update equivalence",
            budget: Some(Duration::from_secs(5)),
            run: update_equivalence,
        },
        Criterion {
            id: 3,
            name: "boundary property",
            budget: None,
            run: boundary_property,
        },
        Criterion {
            id: 4,
            name: "descent inequality",
            budget: None,
            run: descent_inequality,
        },
        Criterion {
            id: 5,
            name: "PL linear rate",
            budget: Some(Duration::from_secs(1)),
            run: pl_linear_rate,
        },
        Criterion {
            id: 6,
            name: "stochastic bound",
            budget: Some(Duration::from_secs(120)),
            run: stochastic_bound,
        },
        Criterion {
            id: 7,
            name: "estimator exactness",
            budget: None,
            run: estimator_exactness,
        },
        Criterion {
            id: 8,
            name: "fit recovery",
            budget: None,
            run: fit_recovery,
        },
        Criterion {
            id: 9,
            name: "stepsize anchors",
            budget: None,
            run: stepsize_anchors,
        },
        Criterion {
            id: 10,
            name: "rate-calculator regression",
            budget: None,
            run: rate_regression,
        },
        Criterion {
            id: 11,
            name: "gradient checks",
            budget: None,
            run: gradient_checks,
        },
        Criterion {
            id: 12,
            name: "determinism",
            budget: None,
            run: determinism,
        },
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match (outcome, c.budget) {
            (Ok(_), Some(b)) if elapsed > b => {
                Err(format!("took {:.2} s, budget {} s", elapsed.as_secs_f64(), b.as_secs()))
            }
            (o, _) => o,
        };
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "{tag} criterion {:>2} {}: {detail} ({:.2} s)",
            c.id,
            c.name,
            elapsed.as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
