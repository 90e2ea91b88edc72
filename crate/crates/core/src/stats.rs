//! Statistical verification of the reduction laws against Monte Carlo ensembles.
//!
//! Every check returns a [`CheckResult`] whose verdict can be recomputed from
//! `(kind, statistic, target, tolerance)` alone. Checks over a time grid are
//! normalized: the statistic is `max_t |deviation_t| / (3 SE_t + tol_num)` and
//! must not exceed 1.
//!
//! Tolerances are 3 standard errors per comparison. A check that scans a
//! grid of `G` correlated points therefore has a family-wise false-positive
//! rate above the nominal 0.27%, at most `1 - 0.9973^G`; the report records
//! `G` for each such check. No multiple-comparison correction is applied.

use serde::Serialize;
use serde_json::json;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::hilbert::{luders_state, DensityMatrix, SpectralDecomposition, StateVector, Tolerances};
use crate::lindblad::max_element_distance;
use crate::sde::{Simulator, Trajectory};

const TOL_NUM: f64 = 1e-9;
const MIN_TRAJECTORIES: usize = 100;
const MIN_BIN: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    /// Passes iff `|statistic - target| <= tolerance`.
    Equality,
    /// Passes iff `statistic <= target + tolerance`.
    UpperBound,
    /// Passes iff `statistic >= target - tolerance`.
    LowerBound,
    /// Not evaluated; counts as passed.
    NotApplicable,
}

/// Outcome of one verification check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub kind: CheckKind,
    pub statistic: f64,
    pub target: f64,
    pub tolerance: f64,
    pub n_samples: usize,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
    pub detail: serde_json::Value,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<CheckResult>,
}

fn verdict(kind: CheckKind, statistic: f64, target: f64, tolerance: f64) -> bool {
    match kind {
        CheckKind::Equality => (statistic - target).abs() <= tolerance,
        CheckKind::UpperBound => statistic <= target + tolerance,
        CheckKind::LowerBound => statistic >= target - tolerance,
        CheckKind::NotApplicable => true,
    }
}

impl CheckResult {
    fn new(
        name: &str,
        kind: CheckKind,
        statistic: f64,
        target: f64,
        tolerance: f64,
        n: usize,
    ) -> Self {
        Self {
            name: name.to_string(),
            kind,
            statistic,
            target,
            tolerance,
            n_samples: n,
            passed: verdict(kind, statistic, target, tolerance),
            p_value: None,
            detail: serde_json::Value::Null,
            children: Vec::new(),
        }
    }

    pub fn equality(name: &str, statistic: f64, target: f64, tolerance: f64, n: usize) -> Self {
        Self::new(name, CheckKind::Equality, statistic, target, tolerance, n)
    }

    pub fn upper_bound(name: &str, statistic: f64, bound: f64, tolerance: f64, n: usize) -> Self {
        Self::new(name, CheckKind::UpperBound, statistic, bound, tolerance, n)
    }

    pub fn lower_bound(name: &str, statistic: f64, bound: f64, tolerance: f64, n: usize) -> Self {
        Self::new(name, CheckKind::LowerBound, statistic, bound, tolerance, n)
    }

    pub fn not_applicable(name: &str, reason: &str) -> Self {
        let mut out = Self::new(name, CheckKind::NotApplicable, 0.0, 0.0, 0.0, 0);
        out.detail = json!({ "reason": reason });
        out
    }

    /// Passes iff every child passes; the statistic counts failing children.
    pub fn composite(name: &str, children: Vec<CheckResult>) -> Self {
        let failing = children.iter().filter(|c| !c.passed).count();
        let n = children.iter().map(|c| c.n_samples).max().unwrap_or(0);
        let mut out = Self::new(name, CheckKind::Equality, failing as f64, 0.0, 0.0, n);
        out.children = children;
        out
    }

    pub fn with_detail(mut self, detail: serde_json::Value) -> Self {
        self.detail = detail;
        self
    }

    pub fn with_p_value(mut self, p: f64) -> Self {
        self.p_value = Some(p);
        self
    }

    /// Re-derives the verdict from `(kind, statistic, target, tolerance)`.
    pub fn recompute(&self) -> bool {
        verdict(self.kind, self.statistic, self.target, self.tolerance)
    }

    /// All leaf checks, depth first.
    pub fn leaves(&self) -> Vec<&CheckResult> {
        if self.children.is_empty() {
            vec![self]
        } else {
            self.children.iter().flat_map(|c| c.leaves()).collect()
        }
    }

    pub fn child(&self, name: &str) -> Option<&CheckResult> {
        self.children.iter().find(|c| c.name == name)
    }
}

/// Mean and standard error of the mean (sample standard deviation, `n - 1`).
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Sample variance (`n - 1`) and its jackknife standard error.
pub fn jackknife_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n < 3 {
        return (f64::NAN, f64::NAN);
    }
    let nf = n as f64;
    let sum: f64 = xs.iter().sum();
    let sum_sq: f64 = xs.iter().map(|x| x * x).sum();
    let var = (sum_sq - sum * sum / nf) / (nf - 1.0);
    // leave-one-out variances from the running sums
    let loo: Vec<f64> = xs
        .iter()
        .map(|x| {
            let s = sum - x;
            let q = sum_sq - x * x;
            (q - s * s / (nf - 1.0)) / (nf - 2.0)
        })
        .collect();
    let loo_mean = loo.iter().sum::<f64>() / nf;
    let spread: f64 = loo.iter().map(|v| (v - loo_mean) * (v - loo_mean)).sum();
    (var, ((nf - 1.0) / nf * spread).sqrt())
}

/// Two-sample Kolmogorov–Smirnov statistic `sup |F_a - F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    d
}

/// Asymptotic 1% critical value `1.6276 sqrt((n + m) / (n m))`.
pub fn ks_critical_1pct(n: usize, m: usize) -> f64 {
    1.6276 * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}

/// Asymptotic p-value from the Kolmogorov distribution, with the usual
/// finite-sample correction of the scaled statistic.
pub fn ks_p_value(d: f64, n: usize, m: usize) -> f64 {
    let ne = (n as f64 * m as f64) / (n + m) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

fn two_sided_normal_p(z: f64) -> f64 {
    if !z.is_finite() {
        return if z.is_nan() { f64::NAN } else { 0.0 };
    }
    let normal = Normal::standard();
    2.0 * normal.sf(z.abs())
}

/// KS two-sample test at the 1% level.
pub fn check_two_sample_ks(name: &str, a: &[f64], b: &[f64]) -> CheckResult {
    let d = ks_statistic(a, b);
    let critical = ks_critical_1pct(a.len(), b.len());
    CheckResult::upper_bound(name, d, critical, 0.0, a.len().min(b.len()))
        .with_p_value(ks_p_value(d, a.len(), b.len()))
        .with_detail(json!({ "n_a": a.len(), "n_b": b.len(), "level": 0.01 }))
}

/// Sample mean equal to `target` within 3 standard errors.
pub fn check_mean(name: &str, xs: &[f64], target: f64) -> CheckResult {
    let (mean, se) = mean_se(xs);
    CheckResult::equality(name, mean, target, 3.0 * se + TOL_NUM, xs.len())
        .with_p_value(two_sided_normal_p((mean - target) / se))
        .with_detail(json!({ "standard_error": se }))
}

/// Two independent estimates agree within 3 combined standard errors.
pub fn check_agreement(name: &str, a: (f64, f64), b: (f64, f64), n: usize) -> CheckResult {
    let se = (a.1 * a.1 + b.1 * b.1).sqrt();
    CheckResult::equality(name, a.0 - b.0, 0.0, 3.0 * se + TOL_NUM, n)
        .with_p_value(two_sided_normal_p((a.0 - b.0) / se))
        .with_detail(json!({ "estimate_a": a.0, "se_a": a.1, "estimate_b": b.0, "se_b": b.1 }))
}

/// A measured ratio lies in `[lo, hi]`.
pub fn check_ratio_in(name: &str, ratio: f64, lo: f64, hi: f64) -> CheckResult {
    CheckResult::equality(name, ratio, 0.5 * (lo + hi), 0.5 * (hi - lo), 1)
        .with_detail(json!({ "lo": lo, "hi": hi }))
}

/// Per-trajectory scalar series on a common grid, plus terminal data and
/// pathwise suprema over every integration step.
///
/// Grid series are stored time-major: `h[t][i]` is trajectory `i` at grid point `t`.
#[derive(Debug, Clone)]
pub struct EnsembleSeries {
    pub times: Vec<f64>,
    pub sigma: f64,
    /// Hamiltonian eigenvalue of each reduction level.
    pub level_energies: Vec<f64>,
    /// Degenerate reduction levels whose `Pi_nt` is tracked.
    pub complement_levels: Vec<usize>,
    pub h: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    /// `level_probs[n][t][i]`.
    pub level_probs: Vec<Vec<Vec<f64>>>,
    /// `complement[k][t][i]` for `complement_levels[k]`.
    pub complement: Vec<Vec<Vec<f64>>>,
    pub h0: Vec<f64>,
    pub v0: Vec<f64>,
    pub terminal_level: Vec<Option<usize>>,
    pub terminal_time: Vec<Option<f64>>,
    pub initial_states: Vec<StateVector>,
    pub terminal_states: Vec<StateVector>,
    pub sup_dev_sq: Vec<f64>,
    pub sup_v: Vec<f64>,
    pub max_norm_error: f64,
    pub max_complement: f64,
}

impl EnsembleSeries {
    pub fn new(
        times: Vec<f64>,
        sigma: f64,
        level_energies: Vec<f64>,
        level_multiplicities: &[usize],
    ) -> Self {
        let grid = times.len();
        let complement_levels: Vec<usize> = (0..level_multiplicities.len())
            .filter(|&n| level_multiplicities[n] > 1)
            .collect();
        Self {
            sigma,
            h: vec![Vec::new(); grid],
            v: vec![Vec::new(); grid],
            z: vec![Vec::new(); grid],
            level_probs: vec![vec![Vec::new(); grid]; level_energies.len()],
            complement: vec![vec![Vec::new(); grid]; complement_levels.len()],
            complement_levels,
            level_energies,
            times,
            h0: Vec::new(),
            v0: Vec::new(),
            terminal_level: Vec::new(),
            terminal_time: Vec::new(),
            initial_states: Vec::new(),
            terminal_states: Vec::new(),
            sup_dev_sq: Vec::new(),
            sup_v: Vec::new(),
            max_norm_error: 0.0,
            max_complement: 0.0,
        }
    }

    /// Empty series laid out for trajectories of `sim`.
    pub fn for_simulator(sim: &Simulator) -> Self {
        let model = sim.model();
        Self::new(
            sim.resolved().grid(),
            model.sigma(0),
            model.reduction_level_energies(),
            &model.reduction_level_multiplicities(),
        )
    }

    pub fn len(&self) -> usize {
        self.h0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h0.is_empty()
    }

    pub fn push(&mut self, traj: &Trajectory) -> Result<()> {
        if traj.times.len() != self.times.len()
            || traj
                .times
                .iter()
                .zip(&self.times)
                .any(|(a, b)| (a - b).abs() > 1e-12 * b.abs().max(1.0))
        {
            return Err(Error::Validation(format!(
                "trajectory {} is not on the ensemble time grid",
                traj.index
            )));
        }
        for t in 0..self.times.len() {
            self.h[t].push(traj.h[t]);
            self.v[t].push(traj.v[t]);
            self.z[t].push(traj.z[t]);
            for (n, probs) in self.level_probs.iter_mut().enumerate() {
                probs[t].push(traj.level_probs[t][n]);
            }
            for (k, level) in self.complement_levels.iter().enumerate() {
                let value = traj
                    .monitored_levels
                    .iter()
                    .position(|l| l == level)
                    .map_or(0.0, |pos| traj.complement[t][pos]);
                self.complement[k][t].push(value);
            }
        }
        self.h0.push(traj.h0);
        self.v0.push(traj.v0);
        self.terminal_level.push(traj.terminal_level);
        self.terminal_time.push(traj.terminal_time);
        self.initial_states.push(traj.initial_state.clone());
        self.terminal_states.push(traj.terminal_state.clone());
        self.sup_dev_sq.push(traj.sup_dev_sq);
        self.sup_v.push(traj.sup_v);
        self.max_norm_error = self.max_norm_error.max(traj.max_norm_error);
        self.max_complement = self.max_complement.max(traj.max_complement);
        Ok(())
    }

    pub fn from_trajectories(sim: &Simulator, trajectories: &[Trajectory]) -> Result<Self> {
        let mut out = Self::for_simulator(sim);
        for t in trajectories {
            out.push(t)?;
        }
        Ok(out)
    }

    /// Indices of trajectories that never met the collapse criterion.
    pub fn unterminated(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.terminal_level[i].is_none())
            .collect()
    }

    fn require_terminated(&self) -> Result<()> {
        let open = self.unterminated();
        if open.is_empty() {
            return Ok(());
        }
        let shown: Vec<String> = open.iter().take(20).map(|i| i.to_string()).collect();
        Err(Error::Validation(format!(
            "{} trajectories did not terminate (indices {}{})",
            open.len(),
            shown.join(", "),
            if open.len() > 20 { ", ..." } else { "" }
        )))
    }

    fn require_size(&self) -> Result<()> {
        if self.len() < MIN_TRAJECTORIES {
            return Err(Error::Validation(format!(
                "need at least {MIN_TRAJECTORIES} trajectories, got {}",
                self.len()
            )));
        }
        Ok(())
    }

    /// `H_infinity` proxy: the eigenvalue of the terminal level.
    pub fn terminal_energies(&self) -> Option<Vec<f64>> {
        self.terminal_level
            .iter()
            .map(|l| l.map(|l| self.level_energies[l]))
            .collect()
    }

    pub fn mean_v0(&self) -> f64 {
        mean_se(&self.v0).0
    }

    /// Grid index closest to `t`.
    pub fn nearest_index(&self, t: f64) -> usize {
        (0..self.times.len())
            .min_by(|&a, &b| {
                (self.times[a] - t)
                    .abs()
                    .total_cmp(&(self.times[b] - t).abs())
            })
            .unwrap_or(0)
    }

    /// Ensemble mean of `V_t` at every grid point.
    pub fn mean_v(&self) -> Vec<f64> {
        self.v.iter().map(|xs| mean_se(xs).0).collect()
    }
}

/// Scans a per-time statistic whose mean should vanish: `deviation(j)` returns
/// `(mean, standard error)` at grid point `j`, or `None` to skip it.
/// `one_sided` only penalizes positive means.
pub fn grid_scan(
    name: &str,
    times: &[f64],
    n: usize,
    one_sided: bool,
    mut deviation: impl FnMut(usize) -> Option<(f64, f64)>,
) -> CheckResult {
    let (mut worst, mut worst_t, mut worst_mean, mut worst_se) = (0.0f64, f64::NAN, 0.0, 0.0);
    let mut points = 0usize;
    for (j, &t) in times.iter().enumerate() {
        let Some((mean, se)) = deviation(j) else {
            continue;
        };
        points += 1;
        let excess = if one_sided { mean.max(0.0) } else { mean.abs() };
        let ratio = excess / (3.0 * se + TOL_NUM);
        if ratio > worst || worst_t.is_nan() || ratio.is_nan() {
            worst = if ratio.is_nan() { f64::INFINITY } else { ratio };
            worst_t = t;
            worst_mean = mean;
            worst_se = se;
        }
    }
    CheckResult::upper_bound(name, worst, 1.0, 0.0, n).with_detail(json!({
        "grid_points": points,
        "worst_time": worst_t,
        "worst_mean": worst_mean,
        "worst_standard_error": worst_se,
        "familywise_bound": 1.0 - 0.9973f64.powi(points as i32),
    }))
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    let denom = (sxx * syy).sqrt();
    // degenerate spreads (all paths collapsed, or deterministic start) carry no information
    let scale = 1e-24 * n;
    (sxx > scale && syy > scale && denom > 0.0).then(|| sxy / denom)
}

/// Born rule: terminal-level frequencies against `expected_pi`.
pub fn check_born_frequencies(
    terminals: &[Option<usize>],
    expected_pi: &[f64],
) -> Result<CheckResult> {
    let n = terminals.len();
    if n < MIN_TRAJECTORIES {
        return Err(Error::Validation(format!(
            "need at least {MIN_TRAJECTORIES} terminals, got {n}"
        )));
    }
    let open: Vec<usize> = (0..n).filter(|&i| terminals[i].is_none()).collect();
    if !open.is_empty() {
        let shown: Vec<String> = open.iter().take(20).map(|i| i.to_string()).collect();
        return Err(Error::Validation(format!(
            "{} trajectories did not terminate (indices {})",
            open.len(),
            shown.join(", ")
        )));
    }
    let d = expected_pi.len();
    let mut counts = vec![0usize; d];
    for l in terminals.iter().flatten() {
        if *l >= d {
            return Err(Error::LevelOutOfRange {
                level: *l,
                levels: d,
            });
        }
        counts[*l] += 1;
    }
    let nf = n as f64;
    let mut children = Vec::new();
    for (level, (&count, &pi)) in counts.iter().zip(expected_pi).enumerate() {
        let freq = count as f64 / nf;
        let se = (pi * (1.0 - pi) / nf).max(0.0).sqrt();
        children.push(
            CheckResult::equality(
                &format!("level_{level}_frequency"),
                freq,
                pi,
                3.0 * se + TOL_NUM,
                n,
            )
            .with_p_value(if se > 0.0 {
                two_sided_normal_p((freq - pi) / se)
            } else {
                f64::from(u8::from(freq == pi))
            })
            .with_detail(json!({ "count": count, "standard_error": se })),
        );
    }
    let support: Vec<usize> = (0..d).filter(|&l| expected_pi[l] > 0.0).collect();
    let chi_p = if support.len() >= 2 {
        let chi2: f64 = support
            .iter()
            .map(|&l| {
                let expected = expected_pi[l] * nf;
                (counts[l] as f64 - expected).powi(2) / expected
            })
            .sum();
        let df = (support.len() - 1) as f64;
        let p = ChiSquared::new(df).expect("df >= 1").sf(chi2);
        children.push(
            CheckResult::lower_bound("chi_square_p_value", p, 1e-3, 0.0, n)
                .with_p_value(p)
                .with_detail(json!({ "chi_square": chi2, "degrees_of_freedom": df })),
        );
        Some(p)
    } else {
        children.push(CheckResult::not_applicable(
            "chi_square_p_value",
            "fewer than two levels with positive probability",
        ));
        None
    };
    let mut out = CheckResult::composite("born_frequencies", children).with_detail(json!({
        "counts": counts,
        "expected": expected_pi,
    }));
    out.p_value = chi_p;
    Ok(out)
}

/// Weak energy conservation: mean constancy, terminal mean and increment orthogonality.
pub fn check_energy_martingale(series: &EnsembleSeries) -> Result<CheckResult> {
    series.require_size()?;
    let n = series.len();
    let mut buf = vec![0.0; n];

    let mean_constant = grid_scan("mean_constant", &series.times, n, false, |j| {
        for i in 0..n {
            buf[i] = series.h[j][i] - series.h0[i];
        }
        Some(mean_se(&buf))
    });

    let terminal = match series.terminal_energies() {
        Some(energies) => {
            let diffs: Vec<f64> = energies
                .iter()
                .zip(&series.h0)
                .map(|(e, h)| e - h)
                .collect();
            let (_, se) = mean_se(&diffs);
            let (mean_terminal, _) = mean_se(&energies);
            let (mean_h0, _) = mean_se(&series.h0);
            CheckResult::equality(
                "terminal_mean",
                mean_terminal,
                mean_h0,
                3.0 * se + TOL_NUM,
                n,
            )
            .with_p_value(two_sided_normal_p((mean_terminal - mean_h0) / se))
            .with_detail(json!({ "standard_error": se }))
        }
        None if series.unterminated().len() == n => CheckResult::not_applicable(
            "terminal_mean",
            "no trajectory reached the collapse criterion",
        ),
        None => {
            series.require_terminated()?;
            unreachable!("require_terminated fails when some trajectories are open")
        }
    };

    let bound = 3.0 / (n as f64).sqrt();
    let mut increments = vec![0.0; n];
    let (mut worst, mut worst_t, mut points) = (0.0f64, f64::NAN, 0usize);
    for j in 0..series.times.len().saturating_sub(1) {
        for i in 0..n {
            increments[i] = series.h[j + 1][i] - series.h[j][i];
        }
        if let Some(r) = pearson(&series.h[j], &increments) {
            points += 1;
            if r.abs() > worst || worst_t.is_nan() {
                worst = r.abs();
                worst_t = series.times[j];
            }
        }
    }
    let orthogonality = CheckResult::upper_bound("increment_orthogonality", worst, bound, 0.0, n)
        .with_detail(json!({
            "grid_points": points,
            "worst_time": worst_t,
            "familywise_bound": 1.0 - 0.9973f64.powi(points as i32),
        }));

    Ok(CheckResult::composite(
        "energy_martingale",
        vec![mean_constant, terminal, orthogonality],
    ))
}

/// Variance laws: supermartingale decay, the `V_0 / (1 + sigma^2 V_0 t)` bound,
/// the identity `E[(H_t - H_0)^2] = V_0 - E[V_t]`, and the terminal variance.
///
/// `v0` is the initial energy variance of the ensemble density (for a pure
/// initial state simply `V_0`); it is the target of the terminal-variance check.
/// The decay bound is applied per trajectory and averaged.
pub fn check_variance_laws(series: &EnsembleSeries, v0: f64, sigma: f64) -> Result<CheckResult> {
    series.require_size()?;
    let n = series.len();
    let grid = series.times.len();
    let mut buf = vec![0.0; n];

    let non_increasing = grid_scan(
        "mean_non_increasing",
        &series.times[..grid.saturating_sub(1)],
        n,
        true,
        |j| {
            for i in 0..n {
                buf[i] = series.v[j + 1][i] - series.v[j][i];
            }
            Some(mean_se(&buf))
        },
    );

    let bound_at = |t: f64| -> f64 {
        series
            .v0
            .iter()
            .map(|&v| v / (1.0 + sigma * sigma * v * t))
            .sum::<f64>()
            / n as f64
    };
    let mut decay_bound = grid_scan("decay_bound", &series.times, n, true, |j| {
        let (mean, se) = mean_se(&series.v[j]);
        Some((mean - bound_at(series.times[j]), se))
    });
    let mean_v0 = series.mean_v0();
    if mean_v0 > 0.0 && sigma > 0.0 {
        let tau = 1.0 / (sigma * sigma * mean_v0);
        let j = series.nearest_index(tau);
        let (mean, se) = mean_se(&series.v[j]);
        if let serde_json::Value::Object(map) = &mut decay_bound.detail {
            map.insert(
                "at_reduction_time".into(),
                json!({ "time": series.times[j], "mean_v": mean, "bound": bound_at(series.times[j]), "standard_error": se }),
            );
        }
    }

    let identity = grid_scan("energy_spread_identity", &series.times, n, false, |j| {
        for i in 0..n {
            let dh = series.h[j][i] - series.h0[i];
            buf[i] = dh * dh + series.v[j][i] - series.v0[i];
        }
        Some(mean_se(&buf))
    });

    let terminal = match series.terminal_energies() {
        Some(energies) => {
            let (var, se) = jackknife_variance(&energies);
            CheckResult::equality("terminal_variance", var, v0, 3.0 * se + TOL_NUM, n)
                .with_p_value(two_sided_normal_p((var - v0) / se))
                .with_detail(json!({ "jackknife_standard_error": se }))
        }
        None if series.unterminated().len() == n => CheckResult::not_applicable(
            "terminal_variance",
            "no trajectory reached the collapse criterion",
        ),
        None => {
            series.require_terminated()?;
            unreachable!()
        }
    };

    // eta_t = Var[V_t] / mean(V_t)^2 and xi_t two ways; diagnostics only
    let mut xi_integral = 0.0;
    let mut eta_prev: Option<f64> = None;
    let mut diagnostics = Vec::new();
    let stride = (grid / 10).max(1);
    for j in 0..grid {
        let (mean, se) = mean_se(&series.v[j]);
        let var = se * se * n as f64;
        let eta = if mean > 0.0 {
            Some(var / (mean * mean))
        } else {
            None
        };
        if let (Some(a), Some(b)) = (eta_prev, eta) {
            xi_integral += 0.5 * (a + b) * (series.times[j] - series.times[j - 1]);
        }
        eta_prev = eta;
        if j % stride == 0 && mean > 0.0 && mean_v0 > 0.0 && sigma > 0.0 {
            let xi_inverted =
                1.0 / (sigma * sigma * mean) - 1.0 / (sigma * sigma * mean_v0) - series.times[j];
            diagnostics.push(json!({
                "time": series.times[j],
                "eta": eta,
                "xi_integrated": xi_integral,
                "xi_from_mean": xi_inverted,
            }));
        }
    }

    Ok(CheckResult::composite(
        "variance_laws",
        vec![non_increasing, decay_bound, identity, terminal],
    )
    .with_detail(json!({ "v0": v0, "sigma": sigma, "eta_xi": diagnostics })))
}

/// Doob maximal inequalities for `H_t - H_0` and `V_t`.
///
/// Thresholds scale with each trajectory's own `V_0`; `v0` is the mean
/// initial variance used in the `4 V_0` bound.
pub fn check_doob_bounds(series: &EnsembleSeries, v0: f64, lambdas: &[f64]) -> Result<CheckResult> {
    series.require_size()?;
    let n = series.len();
    let nf = n as f64;
    let (mean_sup, se_sup) = mean_se(&series.sup_dev_sq);
    let rel_se = if mean_sup > 0.0 {
        se_sup / mean_sup
    } else {
        0.0
    };
    let mut children = vec![CheckResult::upper_bound(
        "mean_sup_deviation",
        mean_sup,
        4.0 * v0,
        4.0 * v0 * 3.0 * rel_se + TOL_NUM,
        n,
    )
    .with_detail(json!({ "relative_standard_error": rel_se }))];
    for &lambda in lambdas {
        if lambda <= 0.0 {
            return Err(Error::Configuration(format!(
                "Doob lambda must be > 0, got {lambda}"
            )));
        }
        let p0 = (1.0 / (lambda * lambda)).min(1.0);
        let se = (p0 * (1.0 - p0) / nf).sqrt();
        let l2 = lambda * lambda;
        let dev = (0..n)
            .filter(|&i| series.sup_dev_sq[i] > l2 * series.v0[i])
            .count() as f64
            / nf;
        let var = (0..n)
            .filter(|&i| series.sup_v[i] > l2 * series.v0[i])
            .count() as f64
            / nf;
        children.push(
            CheckResult::upper_bound(
                &format!("energy_exceedance_lambda_{lambda}"),
                dev,
                p0,
                3.0 * se + TOL_NUM,
                n,
            )
            .with_detail(json!({ "lambda": lambda, "binomial_standard_error": se })),
        );
        children.push(
            CheckResult::upper_bound(
                &format!("variance_exceedance_lambda_{lambda}"),
                var,
                p0,
                3.0 * se + TOL_NUM,
                n,
            )
            .with_detail(json!({ "lambda": lambda, "binomial_standard_error": se })),
        );
    }
    Ok(CheckResult::composite("doob_bounds", children)
        .with_detail(json!({ "v0": v0, "lambdas": lambdas })))
}

/// Mean and standard error of `(H_inf - H_t)^2 - V_t` over `members`.
///
/// Paths near an eigenvalue reverse with small probability, and a sample
/// without reversals understates the spread. Under the null hypothesis
/// `Var[(H_inf - H_t)^2 | F_t] <= range^2 V_t`, so the standard error is
/// floored at `sqrt(range^2 mean(V_t) / n)`.
fn conditional_deviation(
    terminal: &[f64],
    h: &[f64],
    v: &[f64],
    members: &[usize],
    range_sq: f64,
) -> (f64, f64) {
    let d: Vec<f64> = members
        .iter()
        .map(|&i| (terminal[i] - h[i]).powi(2) - v[i])
        .collect();
    let (mean, se) = mean_se(&d);
    let mean_v = members.iter().map(|&i| v[i]).sum::<f64>() / members.len() as f64;
    (
        mean,
        se.max((range_sq * mean_v / members.len() as f64).sqrt()),
    )
}

/// `V_t` as the conditional variance of the terminal energy: the unconditional
/// identity `E[V_t] = E[(H_inf - H_t)^2]` on the grid, and decile-binned
/// versions at `t = tau_R / 2, tau_R, 2 tau_R`.
pub fn check_conditional_variance(series: &EnsembleSeries) -> Result<CheckResult> {
    series.require_size()?;
    series.require_terminated()?;
    let n = series.len();
    let terminal = series.terminal_energies().expect("all terminated");
    let (lo, hi) = series
        .level_energies
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &e| {
            (l.min(e), h.max(e))
        });
    let range_sq = (hi - lo).powi(2);
    let everyone: Vec<usize> = (0..n).collect();
    let unconditional = grid_scan("unconditional", &series.times, n, false, |j| {
        Some(conditional_deviation(
            &terminal,
            &series.h[j],
            &series.v[j],
            &everyone,
            range_sq,
        ))
    });

    let mean_v0 = series.mean_v0();
    let mut children = vec![unconditional];
    if mean_v0 > 0.0 && series.sigma > 0.0 {
        let tau = 1.0 / (series.sigma * series.sigma * mean_v0);
        for factor in [0.5, 1.0, 2.0] {
            let j = series.nearest_index(factor * tau);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| series.h[j][a].total_cmp(&series.h[j][b]).then(a.cmp(&b)));
            let mut bins = Vec::new();
            let mut skipped = Vec::new();
            for b in 0..10 {
                let members = &order[b * n / 10..(b + 1) * n / 10];
                if members.len() < MIN_BIN {
                    skipped.push(b);
                    continue;
                }
                bins.push(conditional_deviation(
                    &terminal,
                    &series.h[j],
                    &series.v[j],
                    members,
                    range_sq,
                ));
            }
            let mut check = grid_scan(
                &format!("binned_t_{:.4}", series.times[j]),
                &vec![series.times[j]; bins.len()],
                n,
                false,
                |k| Some(bins[k]),
            );
            if let serde_json::Value::Object(map) = &mut check.detail {
                map.insert("skipped_bins".into(), json!(skipped));
                map.insert("bins".into(), json!(bins.len()));
            }
            children.push(check);
        }
    } else {
        children.push(CheckResult::not_applicable(
            "binned",
            "reduction time undefined (V_0 = 0 or sigma = 0)",
        ));
    }
    Ok(CheckResult::composite("conditional_variance", children))
}

/// Lüders confinement: `Pi_nt` consistent with zero, terminal fidelity with
/// the Lüders state, and zero drift of `V_t + Z_t`.
pub fn check_luders_confinement(
    series: &EnsembleSeries,
    dec: &SpectralDecomposition,
    psi0: &StateVector,
    fid_tol: f64,
) -> Result<CheckResult> {
    series.require_size()?;
    let n = series.len();
    let pi = crate::hilbert::level_probabilities(psi0, dec)?;
    let tol = dec.tolerances();
    let degenerate: Vec<usize> = series
        .complement_levels
        .iter()
        .copied()
        .filter(|&l| l < pi.len() && pi[l] > tol.prob)
        .collect();

    let mut children = Vec::new();
    if degenerate.is_empty() {
        children.push(CheckResult::not_applicable(
            "complement_mean",
            "no degenerate level with positive weight",
        ));
        children.push(CheckResult::not_applicable(
            "terminal_fidelity",
            "no degenerate level with positive weight",
        ));
    } else {
        for &level in &degenerate {
            let k = series
                .complement_levels
                .iter()
                .position(|&l| l == level)
                .expect("monitored");
            children.push(
                grid_scan(
                    &format!("complement_mean_level_{level}"),
                    &series.times,
                    n,
                    true,
                    |j| Some(mean_se(&series.complement[k][j])),
                )
                .with_detail(json!({ "pathwise_max": series.max_complement })),
            );
            let target = luders_state(psi0, dec, level)?;
            let fidelities: Vec<f64> = (0..n)
                .filter(|&i| series.terminal_level[i] == Some(level))
                .map(|i| series.terminal_states[i].fidelity(&target))
                .collect();
            let name = format!("terminal_fidelity_level_{level}");
            if fidelities.is_empty() {
                children.push(CheckResult::not_applicable(
                    &name,
                    "no trajectory terminated at this level",
                ));
            } else {
                let min = fidelities.iter().copied().fold(f64::INFINITY, f64::min);
                children.push(
                    CheckResult::lower_bound(&name, min, 1.0 - fid_tol, 0.0, fidelities.len())
                        .with_detail(json!({ "count": fidelities.len() })),
                );
            }
        }
    }

    let mut buf = vec![0.0; n];
    children.push(grid_scan(
        "doob_meyer_drift",
        &series.times,
        n,
        false,
        |j| {
            for i in 0..n {
                buf[i] = series.v[j][i] + series.z[j][i] - series.v0[i];
            }
            Some(mean_se(&buf))
        },
    ));
    Ok(CheckResult::composite("luders_confinement", children))
}

/// Mixed initial state: terminal ensemble density, per-outcome conditional
/// densities and outcome frequencies against the Lüders rule applied to `rho0`.
pub fn check_mixed_state_luders(
    series: &EnsembleSeries,
    rho0: &DensityMatrix,
    dec: &SpectralDecomposition,
) -> Result<CheckResult> {
    series.require_size()?;
    series.require_terminated()?;
    let n = series.len();
    let tol = Tolerances::default();
    let levels = dec.levels();
    if levels.len() != series.level_energies.len() {
        return Err(Error::DimensionMismatch {
            expected: levels.len(),
            found: series.level_energies.len(),
        });
    }
    let weights: Vec<f64> = levels
        .iter()
        .map(|l| rho0.expectation(&l.projector).re)
        .collect();

    let dim = rho0.dim();
    let mut total = crate::hilbert::CMatrix::zeros(dim, dim);
    let mut per_level = vec![crate::hilbert::CMatrix::zeros(dim, dim); levels.len()];
    let mut counts = vec![0usize; levels.len()];
    for i in 0..n {
        let level = series.terminal_level[i].expect("terminated");
        let proj = series.terminal_states[i].projector();
        total += &proj;
        per_level[level] += proj;
        counts[level] += 1;
    }
    let unconditional = crate::hilbert::luders_map(rho0, dec, None)?;
    let empirical =
        DensityMatrix::from_matrix_unchecked(total / num_complex::Complex64::new(n as f64, 0.0));
    let bound = 4.0 / (n as f64).sqrt();
    let mut children = vec![CheckResult::upper_bound(
        "terminal_density",
        max_element_distance(&empirical, &unconditional),
        bound,
        0.0,
        n,
    )];

    for (level, (sum, &count)) in per_level.into_iter().zip(&counts).enumerate() {
        let name = format!("conditional_density_level_{level}");
        if weights[level] <= tol.prob {
            continue;
        }
        if count < MIN_BIN {
            children.push(CheckResult::not_applicable(
                &name,
                &format!("only {count} samples (< {MIN_BIN})"),
            ));
            continue;
        }
        let target = crate::hilbert::luders_map(rho0, dec, Some(level))?;
        let empirical = DensityMatrix::from_matrix_unchecked(
            sum / num_complex::Complex64::new(count as f64, 0.0),
        );
        children.push(CheckResult::upper_bound(
            &name,
            max_element_distance(&empirical, &target),
            4.0 / (count as f64).sqrt(),
            0.0,
            count,
        ));
    }

    let mut born = check_born_frequencies(&series.terminal_level, &weights)?;
    born.name = "outcome_frequencies".into();
    children.push(born);
    Ok(CheckResult::composite("mixed_state_luders", children)
        .with_detail(json!({ "expected_weights": weights })))
}

/// Regression slope of `(H_{t+D} - H_t)^2` on `V_t^2 D` through the origin
/// equals `sigma^2` within 10%. Needs a grid fine compared with `tau_R`.
pub fn check_quadratic_variation(series: &EnsembleSeries, sigma: f64) -> Result<CheckResult> {
    series.require_size()?;
    let n = series.len();
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for j in 0..series.times.len().saturating_sub(1) {
        let delta = series.times[j + 1] - series.times[j];
        for i in 0..n {
            let x = series.v[j][i] * series.v[j][i] * delta;
            let dh = series.h[j + 1][i] - series.h[j][i];
            sxy += x * dh * dh;
            sxx += x * x;
        }
    }
    if sxx == 0.0 {
        return Ok(CheckResult::not_applicable(
            "quadratic_variation",
            "V_t vanishes on the whole grid",
        ));
    }
    let slope = sxy / sxx;
    Ok(CheckResult::equality(
        "quadratic_variation",
        slope,
        sigma * sigma,
        0.1 * sigma * sigma,
        n,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn ks_identical_and_disjoint() {
        let a: Vec<f64> = (0..100).map(f64::from).collect();
        assert_eq!(ks_statistic(&a, &a), 0.0);
        let b: Vec<f64> = (200..300).map(f64::from).collect();
        assert_eq!(ks_statistic(&a, &b), 1.0);
        assert!(ks_p_value(1.0, 100, 100) < 1e-10);
        assert!(ks_p_value(0.0, 100, 100) == 1.0);
    }

    #[test]
    fn ks_critical_value_matches_tables() {
        // 1.6276 * sqrt(2 / 10^4)
        assert_relative_eq!(ks_critical_1pct(10_000, 10_000), 0.023018, epsilon = 1e-6);
        // the p-value at the critical value is about 1%
        let p = ks_p_value(ks_critical_1pct(10_000, 10_000), 10_000, 10_000);
        assert!((p - 0.01).abs() < 1e-3, "{p}");
    }

    #[test]
    fn jackknife_matches_plain_variance() {
        let xs = [1.0, 2.0, 4.0, 7.0, 11.0];
        let (var, se) = jackknife_variance(&xs);
        let mean = 5.0;
        let direct = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0;
        assert_relative_eq!(var, direct, epsilon = 1e-12);
        // brute-force leave-one-out
        let loo: Vec<f64> = (0..5)
            .map(|k| {
                let rest: Vec<f64> = xs
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != k)
                    .map(|(_, x)| *x)
                    .collect();
                let m = rest.iter().sum::<f64>() / 4.0;
                rest.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 3.0
            })
            .collect();
        let lm = loo.iter().sum::<f64>() / 5.0;
        let brute = (0.8 * loo.iter().map(|v| (v - lm) * (v - lm)).sum::<f64>()).sqrt();
        assert_relative_eq!(se, brute, epsilon = 1e-12);
    }

    #[test]
    fn born_rejects_small_or_open_ensembles() {
        assert!(check_born_frequencies(&[Some(0); 50], &[1.0]).is_err());
        let mut t = vec![Some(0); 200];
        t[17] = None;
        let err = check_born_frequencies(&t, &[1.0]).unwrap_err().to_string();
        assert!(err.contains("17"));
    }

    #[test]
    fn born_with_certain_outcome() {
        let r = check_born_frequencies(&[Some(1); 300], &[0.0, 1.0, 0.0]).unwrap();
        assert!(r.passed);
        assert_eq!(r.child("level_1_frequency").unwrap().statistic, 1.0);
        assert_eq!(
            r.child("chi_square_p_value").unwrap().kind,
            CheckKind::NotApplicable
        );
    }

    #[test]
    fn born_detects_wrong_frequencies() {
        let terminals: Vec<Option<usize>> =
            (0..1000).map(|i| Some(usize::from(i % 2 == 0))).collect();
        let r = check_born_frequencies(&terminals, &[0.25, 0.75]).unwrap();
        assert!(!r.passed);
        assert!(r.p_value.unwrap() < 1e-10);
    }

    #[test]
    fn composite_counts_failures() {
        let ok = CheckResult::equality("a", 1.0, 1.0, 0.0, 1);
        let bad = CheckResult::upper_bound("b", 2.0, 1.0, 0.5, 1);
        let na = CheckResult::not_applicable("c", "n/a");
        let c = CheckResult::composite("all", vec![ok.clone(), bad, na.clone()]);
        assert!(!c.passed);
        assert_eq!(c.statistic, 1.0);
        assert!(CheckResult::composite("good", vec![ok, na]).passed);
    }

    fn kinds() -> impl Strategy<Value = CheckKind> {
        prop_oneof![
            Just(CheckKind::Equality),
            Just(CheckKind::UpperBound),
            Just(CheckKind::LowerBound),
            Just(CheckKind::NotApplicable),
        ]
    }

    proptest! {
        #[test]
        fn verdict_is_recomputable(kind in kinds(), s in -10.0..10.0f64, t in -10.0..10.0f64, tol in 0.0..5.0f64) {
            let r = CheckResult::new("x", kind, s, t, tol, 1);
            prop_assert_eq!(r.passed, r.recompute());
            let json = serde_json::to_value(&r).unwrap();
            prop_assert_eq!(json["passed"].as_bool().unwrap(), r.passed);
        }

        #[test]
        fn ks_is_symmetric_and_bounded(a in prop::collection::vec(-5.0..5.0f64, 1..60), b in prop::collection::vec(-5.0..5.0f64, 1..60)) {
            let d = ks_statistic(&a, &b);
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert_eq!(d, ks_statistic(&b, &a));
        }
    }
}
