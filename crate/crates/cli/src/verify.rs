//! The `verify-all` suite: one fresh SDE ensemble checked against every
//! reduction law, plus master-equation and change-of-measure cross-checks.

use collapse_core::girsanov::{
    ensemble_average_observable, sample_q_marginal, weighted_expectation,
};
use collapse_core::hilbert::{CMatrix, HermitianObservable};
use collapse_core::io::Report;
use collapse_core::lindblad::{
    default_integration_dt, max_element_distance, rho_closed_form, rho_integrate,
};
use collapse_core::rng::child_seed;
use collapse_core::sde::InitialCondition;
use collapse_core::stats::{
    check_agreement, check_born_frequencies, check_conditional_variance, check_doob_bounds,
    check_energy_martingale, check_luders_confinement, check_mean, check_mixed_state_luders,
    check_quadratic_variation, check_two_sample_ks, check_variance_laws, mean_se, CheckResult,
    EnsembleSeries,
};
use collapse_core::Result;
use num_complex::Complex64;
use serde_json::json;

use crate::modes::{
    energy_variance, girsanov_paths, level_weights, sde_ensemble, write_series_summary,
};
use crate::Context;

/// Terminal fidelity tolerance for the Lüders check.
const FIDELITY_TOL: f64 = 1e-6;
/// Closed form against RK4.
const ODE_TOL: f64 = 1e-8;
/// Closed-form ensemble averages against `Tr(G rho_t)`.
const TRACE_TOL: f64 = 1e-12;
const QV_TRAJECTORIES: usize = 1000;

pub fn run(ctx: &Context) -> Result<Report> {
    let cfg = &ctx.config;
    let dec = &ctx.fixture.decomposition;
    let rho0 = ctx.rho0();
    let v0 = energy_variance(dec, &rho0);
    let weights = level_weights(dec, &rho0);

    let sim = ctx.simulator(cfg.wants("lindblad"))?;
    let ens = sde_ensemble(ctx, &sim, cfg.n_trajectories)?;
    let series = &ens.series;
    write_series_summary(ctx, series, v0)?;

    let mut checks = Vec::new();
    if cfg.wants("born") {
        checks.push(check_born_frequencies(&series.terminal_level, &weights)?);
    }
    if cfg.wants("martingale") {
        checks.push(check_energy_martingale(series)?);
    }
    if cfg.wants("variance") {
        checks.push(check_variance_laws(series, v0, cfg.sim.sigma)?);
    }
    if cfg.wants("doob") {
        checks.push(check_doob_bounds(series, series.mean_v0(), &cfg.lambdas)?);
    }
    if cfg.wants("conditional-variance") {
        checks.push(check_conditional_variance(series)?);
    }
    match &ctx.fixture.initial {
        InitialCondition::Pure(psi0) => {
            if cfg.wants("luders") {
                checks.push(check_luders_confinement(series, dec, psi0, FIDELITY_TOL)?);
            }
        }
        InitialCondition::Mixture(_) => {
            if cfg.wants("mixed-luders") {
                checks.push(check_mixed_state_luders(series, &rho0, dec)?);
            }
        }
    }
    if cfg.wants("lindblad") {
        checks.push(lindblad_checks(
            ctx,
            series,
            ens.densities.as_deref().unwrap_or(&[]),
        )?);
    }
    if cfg.wants("girsanov") {
        checks.push(girsanov_checks(ctx, series, sim.resolved().dt)?);
    }
    if cfg.wants("quadratic-variation") {
        checks.push(quadratic_variation(ctx)?);
    }

    let run = sim.resolved();
    Ok(
        Report::new(ctx.manifest.clone(), checks).with_summary(json!({
            "tau_r": run.tau_r,
            "dt": run.dt,
            "n_steps": run.n_steps,
            "record_stride": run.record_stride,
            "grid_points": series.times.len(),
            "trajectories": series.len(),
            "v0": v0,
            "max_norm_error": series.max_norm_error,
            "max_complement": series.max_complement,
        })),
    )
}

/// Ensemble density against the closed form, closed form against RK4, and
/// the closed-form ensemble average against `Tr(G rho_t)`.
fn lindblad_checks(
    ctx: &Context,
    series: &EnsembleSeries,
    densities: &[(f64, collapse_core::hilbert::DensityMatrix)],
) -> Result<CheckResult> {
    let dec = &ctx.fixture.decomposition;
    let sigma = ctx.config.sim.sigma;
    let rho0 = ctx.rho0();
    let n = series.len();

    let (mut worst, mut worst_t) = (0.0f64, 0.0);
    for (t, rho) in densities {
        let d = max_element_distance(rho, &rho_closed_form(&rho0, dec, sigma, *t)?);
        if d > worst {
            (worst, worst_t) = (d, *t);
        }
    }
    let ensemble =
        CheckResult::upper_bound("ensemble_density", worst, 4.0 / (n as f64).sqrt(), 0.0, n)
            .with_detail(json!({ "worst_time": worst_t, "grid_points": densities.len() }));

    // a handful of checkpoints keeps the RK4 cost bounded on long horizons
    let checkpoints: Vec<f64> = [0.5, 1.0, 2.0, 4.0]
        .iter()
        .map(|f| {
            f * if series.times.len() > 1 {
                ctx_tau(ctx, series)
            } else {
                1.0
            }
        })
        .collect();
    let dt = default_integration_dt(dec, sigma);
    let (mut ode_worst, mut t_prev, mut rho) = (0.0f64, 0.0, rho0.clone());
    for &t in &checkpoints {
        rho = rho_integrate(&rho, dec, sigma, t - t_prev, dt)?;
        t_prev = t;
        ode_worst = ode_worst.max(max_element_distance(
            &rho,
            &rho_closed_form(&rho0, dec, sigma, t)?,
        ));
    }
    let ode = CheckResult::upper_bound(
        "closed_form_vs_rk4",
        ode_worst,
        ODE_TOL,
        0.0,
        checkpoints.len(),
    )
    .with_detail(json!({ "times": checkpoints, "integration_dt": dt }));

    // G: all-ones matrix, sensitive to every coherence
    let dim = rho0.dim();
    let g = HermitianObservable::new(
        CMatrix::from_element(dim, dim, Complex64::new(1.0, 0.0)),
        1e-12,
    )?;
    let mut trace_worst = 0.0f64;
    for &t in series
        .times
        .iter()
        .step_by((series.times.len() / 20).max(1))
    {
        let direct = rho_closed_form(&rho0, dec, sigma, t)?
            .expectation(g.matrix())
            .re;
        let averaged = ensemble_average_observable(&g, &rho0, dec, sigma, t)?;
        trace_worst = trace_worst.max((direct - averaged).abs());
    }
    let trace =
        CheckResult::upper_bound("ensemble_average_vs_trace", trace_worst, TRACE_TOL, 0.0, 1);

    Ok(CheckResult::composite(
        "lindblad",
        vec![ensemble, ode, trace],
    ))
}

fn ctx_tau(ctx: &Context, series: &EnsembleSeries) -> f64 {
    let rate = ctx.config.sim.sigma.powi(2) * series.mean_v0();
    if rate > 0.0 {
        1.0 / rate
    } else {
        1.0
    }
}

/// Law of `H_t` at `t ~ tau_R` from the scalar `W*` equation against the
/// full SDE, plus the two `Q`-measure identities at the same time.
fn girsanov_checks(ctx: &Context, series: &EnsembleSeries, dt: f64) -> Result<CheckResult> {
    let n = series.len();
    let j = series.nearest_index(ctx_tau(ctx, series)).max(1);
    let t = series.times[j];
    let steps = (t / dt).round() as usize;
    let paths = girsanov_paths(ctx, dt, t, steps, n, "girsanov")?;
    let scalar: Vec<f64> = paths
        .iter()
        .map(|(_, s)| *s.h.last().expect("non-empty"))
        .collect();
    let ks = check_two_sample_ks("scalar_vs_full_ks", &series.h[j], &scalar);
    let means = check_agreement(
        "scalar_vs_full_mean",
        mean_se(&series.h[j]),
        mean_se(&scalar),
        n,
    );

    let dec = &ctx.fixture.decomposition;
    let rho0 = ctx.rho0();
    let pi = level_weights(dec, &rho0);
    let h0: f64 = pi.iter().zip(dec.eigenvalues()).map(|(p, e)| p * e).sum();
    let draws = sample_q_marginal(
        &pi,
        &dec.eigenvalues(),
        ctx.config.sim.sigma,
        t,
        n,
        child_seed(ctx.config.sim.seed, 1 << 32),
    )?;
    let lambdas: Vec<f64> = draws.iter().map(|d| d.2).collect();
    let q_martingale = check_mean("q_expectation_of_lambda_star", &lambdas, 1.0);
    let weighted: Vec<(f64, f64)> = draws.iter().map(|&(_, h, l)| (h, l)).collect();
    let est = weighted_expectation(&weighted)?;
    let importance = CheckResult::equality("weighted_mean_energy", est.mean, h0, 3.0 * est.standard_error + 1e-9, n)
        .with_detail(json!({ "standard_error": est.standard_error, "effective_sample_size": est.effective_sample_size }));

    Ok(
        CheckResult::composite("girsanov", vec![ks, means, q_martingale, importance])
            .with_detail(json!({ "time": t })),
    )
}

/// `d<H>_t = sigma^2 V_t^2 dt` on a short, finely recorded ensemble.
fn quadratic_variation(ctx: &Context) -> Result<CheckResult> {
    let mut config = ctx.config.clone();
    config.n_trajectories = config.n_trajectories.min(QV_TRAJECTORIES);
    config.record_points = None;
    config.csv_trajectories = Some(0);
    config.out = None;
    config.sim.record_states = false;
    config.sim.record_stride = 10;
    config.sim.horizon_tau = 2.0;
    config.sim.horizon_time = None;
    config.sim.seed = child_seed(config.sim.seed, 2 << 32);
    let fine = Context {
        command: ctx.command,
        config,
        fixture: ctx.fixture.clone(),
        manifest: ctx.manifest.clone(),
    };
    let sim = fine.simulator(false)?;
    let ens = sde_ensemble(&fine, &sim, fine.config.n_trajectories)?;
    check_quadratic_variation(&ens.series, fine.config.sim.sigma)
}
