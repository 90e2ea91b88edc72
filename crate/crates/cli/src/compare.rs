//! Cross-validation of two modes at matched times.

use collapse_core::io::Report;
use collapse_core::lindblad::max_element_distance;
use collapse_core::stats::{check_agreement, check_two_sample_ks, mean_se, CheckResult};
use collapse_core::{Error, Result};
use serde_json::json;

use crate::modes::{girsanov_paths, lindblad_series, sde_ensemble, weighted_rows};
use crate::{Context, Mode};

/// Grid indices nearest to `tau_R / 2`, `tau_R` and `2 tau_R`, deduplicated.
fn checkpoints(times: &[f64], tau: f64) -> Vec<usize> {
    let mut out: Vec<usize> = [0.5, 1.0, 2.0]
        .iter()
        .map(|f| {
            (1..times.len())
                .min_by(|&a, &b| {
                    (times[a] - f * tau)
                        .abs()
                        .total_cmp(&(times[b] - f * tau).abs())
                })
                .unwrap_or(0)
        })
        .collect();
    out.dedup();
    out
}

/// Energy samples per checkpoint from an SDE or scalar-Girsanov ensemble.
fn energy_samples(ctx: &Context, mode: Mode, idx: &[usize]) -> Result<Vec<Vec<f64>>> {
    let sim = ctx.simulator(false)?;
    let run = *sim.resolved();
    let n = ctx.config.n_trajectories;
    match mode {
        Mode::Sde => {
            let ens = sde_ensemble(ctx, &sim, n)?;
            Ok(idx.iter().map(|&j| ens.series.h[j].clone()).collect())
        }
        Mode::GirsanovScalar => {
            let paths = girsanov_paths(
                ctx,
                run.dt,
                run.n_steps as f64 * run.dt,
                run.record_stride,
                n,
                "girsanov",
            )?;
            Ok(idx
                .iter()
                .map(|&j| paths.iter().map(|(_, s)| s.h[j]).collect())
                .collect())
        }
        _ => unreachable!("only path modes produce energy samples"),
    }
}

pub fn run(ctx: &Context) -> Result<Report> {
    let a = ctx.config.mode;
    let b = ctx.config.compare_with.expect("validated");
    let (a, b) = if a.as_str() <= b.as_str() {
        (a, b)
    } else {
        (b, a)
    };
    let sim = ctx.simulator(false)?;
    let times = sim.resolved().grid();
    let idx = checkpoints(&times, sim.resolved().tau_r);
    let n = ctx.config.n_trajectories;
    let name = format!("{}_vs_{}", a.as_str(), b.as_str());
    use Mode::*;
    let check = match (a, b) {
        (GirsanovScalar, Sde) => {
            let full = energy_samples(ctx, Sde, &idx)?;
            let scalar = energy_samples(ctx, GirsanovScalar, &idx)?;
            let mut children = Vec::new();
            for (k, &j) in idx.iter().enumerate() {
                children.push(check_two_sample_ks(
                    &format!("ks_t_{:.4}", times[j]),
                    &full[k],
                    &scalar[k],
                ));
                children.push(check_agreement(
                    &format!("mean_t_{:.4}", times[j]),
                    mean_se(&full[k]),
                    mean_se(&scalar[k]),
                    n,
                ));
            }
            CheckResult::composite(&name, children)
        }
        (GirsanovWeighted, path @ (Sde | GirsanovScalar))
        | (path @ GirsanovScalar, GirsanovWeighted) => {
            let samples = energy_samples(ctx, path, &idx)?;
            let at: Vec<f64> = idx.iter().map(|&j| times[j]).collect();
            let rows = weighted_rows(ctx, &at, n)?;
            let children = rows
                .iter()
                .zip(&samples)
                .map(|(row, s)| {
                    check_agreement(
                        &format!("mean_t_{:.4}", row[0]),
                        mean_se(s),
                        (row[1], row[2]),
                        n,
                    )
                })
                .collect();
            CheckResult::composite(&name, children)
        }
        (LindbladClosed, LindbladOde) => {
            let closed = lindblad_series(ctx, LindbladClosed, &times)?;
            let ode = lindblad_series(ctx, LindbladOde, &times)?;
            let worst = closed
                .iter()
                .zip(&ode)
                .map(|((_, x), (_, y))| max_element_distance(x, y))
                .fold(0.0, f64::max);
            CheckResult::upper_bound(&name, worst, 1e-8, 0.0, times.len())
        }
        (solver @ (LindbladClosed | LindbladOde), Sde) => {
            let sim = ctx.simulator(true)?;
            let ens = sde_ensemble(ctx, &sim, n)?;
            let densities = ens.densities.expect("states recorded");
            let reference = lindblad_series(ctx, solver, &sim.resolved().grid())?;
            let (mut worst, mut worst_t) = (0.0f64, 0.0);
            for ((t, x), (_, y)) in densities.iter().zip(&reference) {
                let d = max_element_distance(x, y);
                if d > worst {
                    (worst, worst_t) = (d, *t);
                }
            }
            CheckResult::upper_bound(&name, worst, 4.0 / (n as f64).sqrt(), 0.0, n)
                .with_detail(json!({ "worst_time": worst_t }))
        }
        _ => {
            return Err(Error::Configuration(format!(
                "compare_with: no comparison defined between `{}` and `{}`",
                a.as_str(),
                b.as_str()
            )))
        }
    };
    Ok(
        Report::new(ctx.manifest.clone(), vec![check]).with_summary(json!({
            "tau_r": sim.resolved().tau_r,
            "times": idx.iter().map(|&j| times[j]).collect::<Vec<_>>(),
        })),
    )
}
