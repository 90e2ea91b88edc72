//! Single-mode runs and the ensemble builders shared with `verify-all` and `compare`.

use collapse_core::ensemble::{run_indexed, run_trajectories};
use collapse_core::girsanov::{
    sample_q_marginal, simulate_wstar_physical, weighted_expectation, GirsanovSample,
};
use collapse_core::hilbert::{level_probabilities, DensityMatrix, SpectralDecomposition};
use collapse_core::io::{
    write_json, write_table, DensitySnapshot, GirsanovCsv, Report, TrajectoryCsv,
};
use collapse_core::lindblad::{
    default_integration_dt, rho_closed_form, rho_integrate, DensityAccumulator,
};
use collapse_core::rng::{child_seed, tagged_stream};
use collapse_core::sde::{sample_initial, Simulator};
use collapse_core::stats::{mean_se, EnsembleSeries};
use collapse_core::Result;
use serde_json::json;

use crate::{Context, Mode};

/// Born weights `Tr(P_n rho_0)` of the fixture's initial density.
pub fn level_weights(dec: &SpectralDecomposition, rho0: &DensityMatrix) -> Vec<f64> {
    dec.levels()
        .iter()
        .map(|l| rho0.expectation(&l.projector).re)
        .collect()
}

/// `Var_rho0(H)`.
pub fn energy_variance(dec: &SpectralDecomposition, rho0: &DensityMatrix) -> f64 {
    let w = level_weights(dec, rho0);
    let e = dec.eigenvalues();
    let mean: f64 = w.iter().zip(&e).map(|(w, e)| w * e).sum();
    w.iter()
        .zip(&e)
        .map(|(w, e)| w * (e - mean) * (e - mean))
        .sum::<f64>()
        .max(0.0)
}

pub struct SdeEnsemble {
    pub series: EnsembleSeries,
    /// Ensemble density at every grid time, when states were recorded.
    pub densities: Option<Vec<(f64, DensityMatrix)>>,
}

/// Runs `n` trajectories of `sim`, writing the first `csv_trajectories` to
/// `trajectories.csv` when an output directory is set.
pub fn sde_ensemble(ctx: &Context, sim: &Simulator, n: usize) -> Result<SdeEnsemble> {
    let mut series = EnsembleSeries::for_simulator(sim);
    let mut csv = match ctx.out_file("trajectories.csv") {
        Some(path) => Some(TrajectoryCsv::create(
            &path,
            &ctx.provenance(),
            series.level_energies.len(),
            &series.complement_levels,
        )?),
        None => None,
    };
    let limit = ctx.config.csv_trajectories.unwrap_or(usize::MAX);
    let mut density = sim
        .config()
        .record_states
        .then(|| DensityAccumulator::new(sim.resolved().grid(), sim.model().dim()));
    run_trajectories(sim, n, ctx.config.workers, |t| {
        if let Some(w) = csv.as_mut() {
            if t.index < limit {
                w.write(&t)?;
            }
        }
        if let Some(acc) = density.as_mut() {
            acc.add(&t)?;
        }
        series.push(&t)
    })?;
    if let Some(w) = csv {
        w.finish()?;
    }
    Ok(SdeEnsemble {
        series,
        densities: density.map(|d| d.finish()).transpose()?,
    })
}

/// Per-time ensemble means written to `summary.csv`.
pub fn write_series_summary(ctx: &Context, series: &EnsembleSeries, v0: f64) -> Result<()> {
    let Some(path) = ctx.out_file("summary.csv") else {
        return Ok(());
    };
    let sigma = series.sigma;
    let rows: Vec<Vec<f64>> = (0..series.times.len())
        .map(|j| {
            let t = series.times[j];
            let (h, h_se) = mean_se(&series.h[j]);
            let (v, v_se) = mean_se(&series.v[j]);
            let (z, _) = mean_se(&series.z[j]);
            vec![t, h, h_se, v, v_se, z, v0 / (1.0 + sigma * sigma * v0 * t)]
        })
        .collect();
    write_table(
        &path,
        &ctx.provenance(),
        &["t", "mean_H", "se_H", "mean_V", "se_V", "mean_Z", "V_bound"],
        &rows,
    )
}

fn terminal_counts(
    levels: impl Iterator<Item = Option<usize>>,
    num_levels: usize,
) -> (Vec<usize>, usize) {
    let mut counts = vec![0; num_levels];
    let mut open = 0;
    for l in levels {
        match l {
            Some(l) => counts[l] += 1,
            None => open += 1,
        }
    }
    (counts, open)
}

pub fn sde(ctx: &Context) -> Result<Report> {
    let sim = ctx.simulator(false)?;
    let ens = sde_ensemble(ctx, &sim, ctx.config.n_trajectories)?;
    let series = &ens.series;
    let v0 = energy_variance(&ctx.fixture.decomposition, &ctx.rho0());
    write_series_summary(ctx, series, v0)?;
    let (counts, open) = terminal_counts(
        series.terminal_level.iter().copied(),
        series.level_energies.len(),
    );
    let run = sim.resolved();
    Ok(
        Report::new(ctx.manifest.clone(), Vec::new()).with_summary(json!({
            "tau_r": run.tau_r,
            "dt": run.dt,
            "n_steps": run.n_steps,
            "record_stride": run.record_stride,
            "trajectories": series.len(),
            "terminal_counts": counts,
            "unterminated": open,
            "max_norm_error": series.max_norm_error,
            "max_complement": series.max_complement,
        })),
    )
}

/// `n` closed-form paths driven by the scalar `W*` equation under the
/// physical measure. Mixtures draw one member per path. Returns each path's
/// initial level weights with its sample.
pub fn girsanov_paths(
    ctx: &Context,
    dt: f64,
    horizon: f64,
    stride: usize,
    n: usize,
    tag: &str,
) -> Result<Vec<(Vec<f64>, GirsanovSample)>> {
    let dec = &ctx.fixture.decomposition;
    let eigs = dec.eigenvalues();
    let sigma = ctx.config.sim.sigma;
    let seed = ctx.config.sim.seed;
    let mut out = Vec::with_capacity(n);
    run_indexed(
        n,
        ctx.config.workers,
        |i| {
            let mut stream = tagged_stream(seed, tag, i as u64);
            let member = sample_initial(&ctx.fixture.initial, &mut stream);
            let pi = level_probabilities(&member, dec)?;
            let sample =
                simulate_wstar_physical(&pi, &eigs, sigma, dt, horizon, stride, &mut stream)?;
            Ok((pi, sample))
        },
        |_, x| {
            out.push(x);
            Ok(())
        },
    )?;
    Ok(out)
}

pub fn girsanov_scalar(ctx: &Context) -> Result<Report> {
    let sim = ctx.simulator(false)?;
    let run = *sim.resolved();
    let n = ctx.config.n_trajectories;
    let paths = girsanov_paths(
        ctx,
        run.dt,
        run.n_steps as f64 * run.dt,
        run.record_stride,
        n,
        "girsanov",
    )?;
    let eigs = ctx.fixture.decomposition.eigenvalues();
    if let Some(path) = ctx.out_file("trajectories.csv") {
        let mut w = GirsanovCsv::create(&path, &ctx.provenance(), &eigs, ctx.config.sim.sigma)?;
        let limit = ctx.config.csv_trajectories.unwrap_or(usize::MAX);
        for (i, (pi, s)) in paths.iter().enumerate().take(limit) {
            w.write(i, pi, s)?;
        }
        w.finish()?;
    }
    let (counts, _) = terminal_counts(
        paths.iter().map(|(_, s)| Some(s.terminal_level())),
        eigs.len(),
    );
    let final_h: Vec<f64> = paths
        .iter()
        .map(|(_, s)| *s.h.last().expect("non-empty"))
        .collect();
    let (mean, se) = mean_se(&final_h);
    Ok(
        Report::new(ctx.manifest.clone(), Vec::new()).with_summary(json!({
            "tau_r": run.tau_r,
            "dt": run.dt,
            "n_steps": run.n_steps,
            "record_stride": run.record_stride,
            "trajectories": n,
            "terminal_counts": counts,
            "final_mean_h": mean,
            "final_mean_h_se": se,
        })),
    )
}

/// One row per grid time `t > 0`: `(t, weighted mean H, se, ESS, mean Lambda*, se)`.
pub fn weighted_rows(ctx: &Context, times: &[f64], n: usize) -> Result<Vec<Vec<f64>>> {
    let dec = &ctx.fixture.decomposition;
    let pi = level_weights(dec, &ctx.rho0());
    let eigs = dec.eigenvalues();
    let mut rows = Vec::new();
    for (j, &t) in times.iter().enumerate().filter(|(_, &t)| t > 0.0) {
        let draws = sample_q_marginal(
            &pi,
            &eigs,
            ctx.config.sim.sigma,
            t,
            n,
            child_seed(ctx.config.sim.seed, j as u64),
        )?;
        let weighted: Vec<(f64, f64)> = draws.iter().map(|&(_, h, l)| (h, l)).collect();
        let est = weighted_expectation(&weighted)?;
        let lambdas: Vec<f64> = draws.iter().map(|d| d.2).collect();
        let (lm, lse) = mean_se(&lambdas);
        rows.push(vec![
            t,
            est.mean,
            est.standard_error,
            est.effective_sample_size,
            lm,
            lse,
        ]);
    }
    Ok(rows)
}

pub fn girsanov_weighted(ctx: &Context) -> Result<Report> {
    let sim = ctx.simulator(false)?;
    let rows = weighted_rows(ctx, &sim.resolved().grid(), ctx.config.n_trajectories)?;
    if let Some(path) = ctx.out_file("weighted.csv") {
        write_table(
            &path,
            &ctx.provenance(),
            &[
                "t",
                "mean_H",
                "se_H",
                "ess",
                "mean_lambda_star",
                "se_lambda_star",
            ],
            &rows,
        )?;
    }
    let min_ess = rows.iter().map(|r| r[3]).fold(f64::INFINITY, f64::min);
    Ok(
        Report::new(ctx.manifest.clone(), Vec::new()).with_summary(json!({
            "tau_r": sim.resolved().tau_r,
            "samples_per_time": ctx.config.n_trajectories,
            "grid_points": rows.len(),
            "min_effective_sample_size": min_ess,
        })),
    )
}

/// Density matrices at `times` from the selected master-equation solver.
pub fn lindblad_series(
    ctx: &Context,
    mode: Mode,
    times: &[f64],
) -> Result<Vec<(f64, DensityMatrix)>> {
    let dec = &ctx.fixture.decomposition;
    let sigma = ctx.config.sim.sigma;
    let rho0 = ctx.rho0();
    match mode {
        Mode::LindbladOde => {
            let dt = default_integration_dt(dec, sigma);
            let mut out = Vec::with_capacity(times.len());
            let (mut t_prev, mut rho) = (0.0, rho0);
            for &t in times {
                if t > t_prev {
                    rho = rho_integrate(&rho, dec, sigma, t - t_prev, dt)?;
                    t_prev = t;
                }
                out.push((t, rho.clone()));
            }
            Ok(out)
        }
        _ => times
            .iter()
            .map(|&t| Ok((t, rho_closed_form(&rho0, dec, sigma, t)?)))
            .collect(),
    }
}

pub fn lindblad(ctx: &Context) -> Result<Report> {
    let sim = ctx.simulator(false)?;
    let series = lindblad_series(ctx, ctx.config.mode, &sim.resolved().grid())?;
    if let Some(path) = ctx.out_file("density.json") {
        let snapshots: Vec<DensitySnapshot> = series
            .iter()
            .map(|(t, r)| DensitySnapshot::new(*t, r))
            .collect();
        write_json(
            &path,
            &json!({ "manifest": ctx.manifest, "source": ctx.config.mode, "snapshots": snapshots }),
        )?;
    }
    let (t_end, rho_end) = series.last().expect("grid is non-empty");
    Ok(
        Report::new(ctx.manifest.clone(), Vec::new()).with_summary(json!({
            "tau_r": sim.resolved().tau_r,
            "snapshots": series.len(),
            "final_time": t_end,
            "final_purity": rho_end.purity(),
            "final_trace": rho_end.trace(),
        })),
    )
}
