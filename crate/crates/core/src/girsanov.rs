//! Closed-form solution of the reduction dynamics via a change of measure.
//!
//! Under the measure `Q` the process `W*_t = W_t + sigma int_0^t H_s ds` is a
//! Brownian motion, and everything else is an explicit function of `(W*_t, t)`:
//!
//! ```text
//! a_n(W*, t) = sigma E_n W* - 1/2 sigma^2 E_n^2 t
//! Lambda*_t  = sum_n pi_n exp(a_n)
//! H_t        = sum_n pi_n E_n exp(a_n) / Lambda*_t
//! ```
//!
//! Physical (`P`) expectations follow from `E[X_t] = E^Q[Lambda*_t X_t]`.
//! Exponentials are evaluated as `exp(a_n - max a)`; the shift cancels in
//! every ratio.
//!
//! `Q` computations are restricted to finite horizons: the two measures are
//! equivalent on each `[0, T]` but not in the limit `T -> infinity`.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::hilbert::{
    level_probabilities, CMatrix, DensityMatrix, HermitianObservable, SpectralDecomposition,
    StateVector,
};
use crate::rng;

/// A path of the scalar `W*` dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct GirsanovSample {
    pub times: Vec<f64>,
    pub wstar: Vec<f64>,
    pub lambda_star: Vec<f64>,
    pub h: Vec<f64>,
    /// `Lambda*` at the final time: the `Q -> P` density.
    pub weight: f64,
    /// Level weights `pi_n exp(a_n) / Lambda*` at the final time.
    pub final_level_probs: Vec<f64>,
}

impl GirsanovSample {
    /// Level with the largest final weight.
    pub fn terminal_level(&self) -> usize {
        argmax(&self.final_level_probs)
    }
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

fn validate(pi: &[f64], eigenvalues: &[f64], sigma: f64, wstar: f64, t: f64) -> Result<()> {
    if pi.is_empty() || pi.len() != eigenvalues.len() {
        return Err(Error::DimensionMismatch {
            expected: eigenvalues.len(),
            found: pi.len(),
        });
    }
    if pi.iter().any(|p| !(p.is_finite() && *p >= -1e-12)) {
        return Err(Error::Validation(
            "pi has negative or non-finite entries".into(),
        ));
    }
    let total: f64 = pi.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("pi sums to {total}, not 1")));
    }
    if !(t >= 0.0 && t.is_finite() && wstar.is_finite() && sigma.is_finite()) {
        return Err(Error::Validation("need finite W*, sigma and t >= 0".into()));
    }
    Ok(())
}

/// Returns `(max a_n, sum pi_n exp(a_n - max), sum pi_n E_n exp(a_n - max))`.
fn shifted_sums(
    pi: &[f64],
    eigenvalues: &[f64],
    sigma: f64,
    wstar: f64,
    t: f64,
) -> (f64, f64, f64) {
    let exponent = |e: f64| sigma * e * wstar - 0.5 * sigma * sigma * e * e * t;
    let amax = pi
        .iter()
        .zip(eigenvalues)
        .filter(|(p, _)| **p > 0.0)
        .map(|(_, &e)| exponent(e))
        .fold(f64::NEG_INFINITY, f64::max);
    let (mut z, mut ez) = (0.0, 0.0);
    for (&p, &e) in pi.iter().zip(eigenvalues) {
        if p > 0.0 {
            let w = p * (exponent(e) - amax).exp();
            z += w;
            ez += w * e;
        }
    }
    (amax, z, ez)
}

fn h_unchecked(pi: &[f64], eigenvalues: &[f64], sigma: f64, wstar: f64, t: f64) -> f64 {
    let (_, z, ez) = shifted_sums(pi, eigenvalues, sigma, wstar, t);
    let (lo, hi) = eigenvalues
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &e| {
            (l.min(e), h.max(e))
        });
    (ez / z).clamp(lo, hi)
}

/// `H_t` as a function of `(W*_t, t)`.
pub fn h_of_wstar(pi: &[f64], eigenvalues: &[f64], sigma: f64, wstar: f64, t: f64) -> Result<f64> {
    validate(pi, eigenvalues, sigma, wstar, t)?;
    Ok(h_unchecked(pi, eigenvalues, sigma, wstar, t))
}

/// `ln Lambda*_t`, finite even where `Lambda*` itself overflows.
pub fn ln_lambda_star_of_wstar(
    pi: &[f64],
    eigenvalues: &[f64],
    sigma: f64,
    wstar: f64,
    t: f64,
) -> Result<f64> {
    validate(pi, eigenvalues, sigma, wstar, t)?;
    let (amax, z, _) = shifted_sums(pi, eigenvalues, sigma, wstar, t);
    Ok(amax + z.ln())
}

/// `Lambda*_t = sum_n pi_n exp(sigma E_n W* - 1/2 sigma^2 E_n^2 t)`.
pub fn lambda_star_of_wstar(
    pi: &[f64],
    eigenvalues: &[f64],
    sigma: f64,
    wstar: f64,
    t: f64,
) -> Result<f64> {
    ln_lambda_star_of_wstar(pi, eigenvalues, sigma, wstar, t).map(f64::exp)
}

/// Level weights `pi_n exp(a_n) / Lambda*_t`.
pub fn level_weights(
    pi: &[f64],
    eigenvalues: &[f64],
    sigma: f64,
    wstar: f64,
    t: f64,
) -> Result<Vec<f64>> {
    validate(pi, eigenvalues, sigma, wstar, t)?;
    Ok(level_weights_unchecked(pi, eigenvalues, sigma, wstar, t))
}

fn level_weights_unchecked(
    pi: &[f64],
    eigenvalues: &[f64],
    sigma: f64,
    wstar: f64,
    t: f64,
) -> Vec<f64> {
    let (amax, z, _) = shifted_sums(pi, eigenvalues, sigma, wstar, t);
    pi.iter()
        .zip(eigenvalues)
        .map(|(&p, &e)| {
            if p > 0.0 {
                p * (sigma * e * wstar - 0.5 * sigma * sigma * e * e * t - amax).exp() / z
            } else {
                0.0
            }
        })
        .collect()
}

/// `|psi_t> = U_t R_t |psi_0>` reconstructed from `(W*_t, t)`.
///
/// Each level block of `psi0` is multiplied by
/// `exp(-i E_n t) exp(1/2 sigma E_n W* - 1/4 sigma^2 E_n^2 t) / sqrt(Lambda*_t)`;
/// the result has unit norm by construction.
pub fn state_closed_form(
    psi0: &StateVector,
    dec: &SpectralDecomposition,
    sigma: f64,
    wstar: f64,
    t: f64,
) -> Result<StateVector> {
    let pi = level_probabilities(psi0, dec)?;
    let eigenvalues = dec.eigenvalues();
    validate(&pi, &eigenvalues, sigma, wstar, t)?;
    let (amax, z, _) = shifted_sums(&pi, &eigenvalues, sigma, wstar, t);
    let factors: Vec<Complex64> = pi
        .iter()
        .zip(&eigenvalues)
        .map(|(&p, &e)| {
            if p > 0.0 {
                let a = sigma * e * wstar - 0.5 * sigma * sigma * e * e * t;
                Complex64::from_polar((0.5 * (a - amax)).exp() / z.sqrt(), -e * t)
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect();
    let mut coords = dec.to_frame(psi0);
    for (c, &level) in coords.iter_mut().zip(dec.column_level()) {
        *c *= factors[level];
    }
    Ok(dec.from_frame(&coords))
}

/// Integrates `dW* = sigma h(W*, t) dt + dW` under the physical measure,
/// with `dW ~ N(0, dt)` drawn from `stream`, recording every `record_stride` steps.
pub fn simulate_wstar_physical<R: Rng + ?Sized>(
    pi: &[f64],
    eigenvalues: &[f64],
    sigma: f64,
    dt: f64,
    horizon: f64,
    record_stride: usize,
    stream: &mut R,
) -> Result<GirsanovSample> {
    validate(pi, eigenvalues, sigma, 0.0, 0.0)?;
    if !(dt > 0.0 && dt.is_finite() && horizon > 0.0 && horizon.is_finite()) || record_stride == 0 {
        return Err(Error::Configuration(
            "need dt > 0, horizon > 0, record_stride >= 1".into(),
        ));
    }
    let n_steps = (horizon / dt - 1e-9).ceil().max(1.0) as usize;
    let sqrt_dt = dt.sqrt();
    let capacity = n_steps / record_stride + 2;
    let mut sample = GirsanovSample {
        times: Vec::with_capacity(capacity),
        wstar: Vec::with_capacity(capacity),
        lambda_star: Vec::with_capacity(capacity),
        h: Vec::with_capacity(capacity),
        weight: 1.0,
        final_level_probs: Vec::new(),
    };
    let lambda = |w: f64, t: f64| {
        let (amax, z, _) = shifted_sums(pi, eigenvalues, sigma, w, t);
        (amax + z.ln()).exp()
    };
    let mut w = 0.0;
    let mut h = h_unchecked(pi, eigenvalues, sigma, w, 0.0);
    sample.times.push(0.0);
    sample.wstar.push(w);
    sample.lambda_star.push(1.0);
    sample.h.push(h);
    for step in 1..=n_steps {
        let dw: f64 = stream.sample::<f64, _>(StandardNormal) * sqrt_dt;
        w += sigma * h * dt + dw;
        if !w.is_finite() {
            return Err(Error::NumericBlowup { step });
        }
        let t = step as f64 * dt;
        h = h_unchecked(pi, eigenvalues, sigma, w, t);
        if step % record_stride == 0 || step == n_steps {
            sample.times.push(t);
            sample.wstar.push(w);
            sample.lambda_star.push(lambda(w, t));
            sample.h.push(h);
        }
    }
    let t_end = n_steps as f64 * dt;
    sample.weight = *sample.lambda_star.last().expect("non-empty");
    sample.final_level_probs = level_weights_unchecked(pi, eigenvalues, sigma, w, t_end);
    Ok(sample)
}

/// `n` independent `Q`-draws of `W*_t ~ N(0, t)`, returned as `(W*, H_t, Lambda*_t)`.
///
/// A fixed-time functional of `H` needs only the marginal of `W*_t`;
/// path functionals (suprema) must use [`simulate_wstar_physical`] instead.
pub fn sample_q_marginal(
    pi: &[f64],
    eigenvalues: &[f64],
    sigma: f64,
    t: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<(f64, f64, f64)>> {
    validate(pi, eigenvalues, sigma, 0.0, t)?;
    let mut stream = rng::tagged_stream(seed, "q-marginal", 0);
    let sd = t.sqrt();
    Ok((0..n)
        .map(|_| {
            let w = stream.sample::<f64, _>(StandardNormal) * sd;
            let (amax, z, ez) = shifted_sums(pi, eigenvalues, sigma, w, t);
            (w, ez / z, (amax + z.ln()).exp())
        })
        .collect())
}

/// `sum_{m,n} Tr(G P_n rho0 P_m) exp(i (E_m - E_n) t - 1/8 sigma^2 (E_m - E_n)^2 t)`.
pub fn ensemble_average_complex(
    g: &HermitianObservable,
    rho0: &DensityMatrix,
    dec: &SpectralDecomposition,
    sigma: f64,
    t: f64,
) -> Result<Complex64> {
    dec.check_dim(g.dim())?;
    dec.check_dim(rho0.dim())?;
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::Validation(format!("t must be >= 0, got {t}")));
    }
    let levels = dec.levels();
    let mut total = Complex64::new(0.0, 0.0);
    for n in levels {
        let left: CMatrix = g.matrix() * &n.projector * rho0.matrix();
        for m in levels {
            let gbar = (&left * &m.projector).trace();
            let w = m.eigenvalue - n.eigenvalue;
            let decay = (-0.125 * sigma * sigma * w * w * t).exp();
            total += gbar * Complex64::from_polar(decay, w * t);
        }
    }
    Ok(total)
}

/// Real ensemble average `E[<psi_t|G|psi_t>]`; fails if the imaginary part
/// exceeds `tol_num` (scaled by the size of `G`).
pub fn ensemble_average_observable(
    g: &HermitianObservable,
    rho0: &DensityMatrix,
    dec: &SpectralDecomposition,
    sigma: f64,
    t: f64,
) -> Result<f64> {
    let z = ensemble_average_complex(g, rho0, dec, sigma, t)?;
    let scale = crate::hilbert::max_abs(g.matrix()).max(1.0);
    if z.im.abs() > dec.tolerances().num * scale {
        return Err(Error::Validation(format!(
            "ensemble average has imaginary part {:.3e}",
            z.im
        )));
    }
    Ok(z.re)
}

/// Self-normalized importance-sampling estimate.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct WeightedEstimate {
    pub mean: f64,
    pub standard_error: f64,
    pub effective_sample_size: f64,
    pub n: usize,
    pub warning: Option<String>,
}

/// `sum w_i x_i / sum w_i` for `(value, weight)` samples, with the delta-method
/// standard error `sqrt(sum w_i^2 (x_i - mean)^2) / sum w_i` and
/// `ESS = (sum w)^2 / sum w^2`.
pub fn weighted_expectation(samples: &[(f64, f64)]) -> Result<WeightedEstimate> {
    if samples.is_empty() {
        return Err(Error::Validation("no samples".into()));
    }
    if let Some(i) = samples
        .iter()
        .position(|&(x, w)| !(w > 0.0 && w.is_finite() && x.is_finite()))
    {
        return Err(Error::Validation(format!(
            "sample {i} has a non-positive or non-finite weight or value"
        )));
    }
    let sw: f64 = samples.iter().map(|s| s.1).sum();
    let sw2: f64 = samples.iter().map(|s| s.1 * s.1).sum();
    let mean = samples.iter().map(|&(x, w)| w * x).sum::<f64>() / sw;
    let spread: f64 = samples
        .iter()
        .map(|&(x, w)| w * w * (x - mean) * (x - mean))
        .sum();
    let ess = sw * sw / sw2;
    let warning = (ess < 10.0).then(|| format!("effective sample size {ess:.2} is below 10"));
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(WeightedEstimate {
        mean,
        standard_error: spread.sqrt() / sw,
        effective_sample_size: ess,
        n: samples.len(),
        warning,
    })
}

/// Pathwise check of `Lambda_t Lambda*_t = 1`.
///
/// Integrates the state along `increments` (single channel), accumulates
/// `ln Lambda_t = -sigma sum H dW - 1/2 sigma^2 sum H^2 dt` and
/// `W*_t = sum (dW + sigma H dt)` with left-point (Ito) sums, and returns
/// `Lambda_t * Lambda*(W*_t, t)` at every step boundary.
pub fn measure_change_product(
    psi0: &StateVector,
    dec: &SpectralDecomposition,
    sigma: f64,
    dt: f64,
    increments: &[f64],
) -> Result<Vec<f64>> {
    let model = crate::sde::ReductionModel::energy(dec, sigma)?;
    let (_, energies) = model.energy_path(psi0, dt, increments)?;
    let pi = level_probabilities(psi0, dec)?;
    let eigenvalues = dec.eigenvalues();
    let mut ln_lambda = 0.0;
    let mut w = 0.0;
    let mut out = Vec::with_capacity(increments.len() + 1);
    out.push(1.0);
    for (step, (&dw, &h)) in increments.iter().zip(&energies).enumerate() {
        ln_lambda += -sigma * h * dw - 0.5 * sigma * sigma * h * h * dt;
        w += dw + sigma * h * dt;
        let t = (step + 1) as f64 * dt;
        let ln_star = ln_lambda_star_of_wstar(&pi, &eigenvalues, sigma, w, t)?;
        out.push((ln_lambda + ln_star).exp());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::{random_density, random_hermitian, random_state, Fixture};
    use crate::hilbert::spectral_decompose;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const PI: [f64; 2] = [0.25, 0.75];
    const E: [f64; 2] = [0.0, 1.0];

    #[test]
    fn h_at_origin_is_initial_energy() {
        assert_relative_eq!(
            h_of_wstar(&PI, &E, 1.0, 0.0, 0.0).unwrap(),
            0.75,
            epsilon = 1e-15
        );
        let pi = [0.25, 0.5, 0.25];
        let e = [-1.0, 0.0, 1.0];
        assert_relative_eq!(
            h_of_wstar(&pi, &e, 2.0, 0.0, 0.0).unwrap(),
            0.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn single_level_is_constant() {
        let pi = [0.0, 1.0, 0.0];
        let e = [-1.0, 0.3, 2.0];
        for (w, t) in [(0.0, 0.0), (5.0, 1.0), (-300.0, 50.0)] {
            assert_eq!(h_of_wstar(&pi, &e, 1.0, w, t).unwrap(), 0.3);
            let expected = (0.3 * w - 0.5 * 0.09 * t).exp();
            assert_relative_eq!(
                lambda_star_of_wstar(&pi, &e, 1.0, w, t).unwrap(),
                expected,
                max_relative = 1e-14
            );
        }
    }

    #[test]
    fn dominant_level_wins_at_large_t() {
        let t = 100.0;
        let h = h_of_wstar(&PI, &E, 1.0, E[1] * t, t).unwrap();
        assert!((h - 1.0).abs() < 1e-10);
        // far outside the range where exp() is representable
        let h = h_of_wstar(&PI, &E, 1.0, 1e4, 1e4).unwrap();
        assert!(h.is_finite() && (h - 1.0).abs() < 1e-10);
    }

    #[test]
    fn lambda_star_is_one_at_origin() {
        assert_eq!(
            lambda_star_of_wstar(&PI, &E, 1.0, 0.3, 0.0).unwrap(),
            PI[0] + PI[1] * 0.3f64.exp()
        );
        assert_relative_eq!(
            lambda_star_of_wstar(&PI, &E, 1.0, 0.0, 0.0).unwrap(),
            1.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn rejects_bad_pi() {
        assert!(h_of_wstar(&[0.5, 0.6], &E, 1.0, 0.0, 0.0).is_err());
        assert!(h_of_wstar(&[1.0], &E, 1.0, 0.0, 0.0).is_err());
        assert!(h_of_wstar(&PI, &E, 1.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn h_is_monotone_in_wstar() {
        let pi = [0.2, 0.1, 0.3, 0.4];
        let e = [-1.3, 0.0, 0.4, 2.0];
        for t in [0.0, 0.5, 5.0] {
            let mut prev = f64::NEG_INFINITY;
            for i in -400..=400 {
                let h = h_of_wstar(&pi, &e, 1.0, i as f64 * 0.05, t).unwrap();
                assert!(h >= prev - 1e-15);
                prev = h;
            }
        }
    }

    #[test]
    fn closed_form_state_basics() {
        let f = Fixture::builtin("spin-pair").unwrap();
        let psi = f.initial.as_pure().unwrap();
        let dec = &f.decomposition;
        let same = state_closed_form(psi, dec, 1.0, 0.0, 0.0).unwrap();
        assert!((same.amplitudes() - psi.amplitudes()).norm() < 1e-15);

        let eig = StateVector::basis(4, 3);
        let out = state_closed_form(&eig, dec, 1.0, 0.7, 2.0).unwrap();
        assert_relative_eq!(out.fidelity(&eig), 1.0, epsilon = 1e-14);
        assert_relative_eq!(out.amplitudes()[3].arg(), -2.0, epsilon = 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let psi = random_state(4, &mut rng);
            let w: f64 = rng.sample::<f64, _>(StandardNormal) * 30.0;
            let t = rng.random::<f64>() * 40.0;
            let out = state_closed_form(&psi, dec, 1.0, w, t).unwrap();
            assert!((out.norm() - 1.0).abs() < 1e-12);
            let pi = level_probabilities(&psi, dec).unwrap();
            let expected = level_weights(&pi, &dec.eigenvalues(), 1.0, w, t).unwrap();
            let got = level_probabilities(&out, dec).unwrap();
            for (a, b) in got.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scalar_sde_with_single_level_drifts_linearly() {
        let mut stream = ChaCha8Rng::seed_from_u64(4);
        let s = simulate_wstar_physical(&[0.0, 1.0], &[0.0, 2.0], 0.5, 1e-2, 1.0, 1, &mut stream)
            .unwrap();
        // W* - sigma E t is a Brownian motion; over 100 steps it stays O(1)
        assert!(s.h.iter().all(|&h| h == 2.0));
        let drift_removed = s.wstar.last().unwrap() - 0.5 * 2.0 * 1.0;
        assert!(drift_removed.abs() < 5.0);
        assert_eq!(s.lambda_star[0], 1.0);
        assert_eq!(s.wstar[0], 0.0);
        assert_eq!(s.terminal_level(), 1);
    }

    #[test]
    fn ensemble_average_identity_and_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dec = spectral_decompose(&random_hermitian(4, &mut rng), None).unwrap();
        let rho = random_density(4, 2, &mut rng);
        let id = HermitianObservable::diagonal(&[1.0; 4]);
        for t in [0.0, 0.3, 7.0] {
            assert_relative_eq!(
                ensemble_average_observable(&id, &rho, &dec, 1.3, t).unwrap(),
                1.0,
                epsilon = 1e-12
            );
        }
        let g = random_hermitian(4, &mut rng);
        let direct = rho.expectation(g.matrix()).re;
        assert_relative_eq!(
            ensemble_average_observable(&g, &rho, &dec, 1.3, 0.0).unwrap(),
            direct,
            epsilon = 1e-12
        );
    }

    #[test]
    fn weighted_expectation_basics() {
        let plain = weighted_expectation(&[(1.0, 1.0), (2.0, 1.0), (6.0, 1.0)]).unwrap();
        assert_relative_eq!(plain.mean, 3.0, epsilon = 1e-15);
        assert_relative_eq!(plain.effective_sample_size, 3.0, epsilon = 1e-15);
        assert!(plain.warning.is_some());
        let ones: Vec<(f64, f64)> = (1..200).map(|i| (1.0, i as f64)).collect();
        let est = weighted_expectation(&ones).unwrap();
        assert_eq!(est.mean, 1.0);
        assert_eq!(est.standard_error, 0.0);
        assert!(weighted_expectation(&[(1.0, 0.0)]).is_err());
        assert!(weighted_expectation(&[]).is_err());
    }

    #[test]
    fn measure_change_product_starts_at_one() {
        let f = Fixture::builtin("qubit").unwrap();
        let psi = f.initial.as_pure().unwrap();
        let out =
            measure_change_product(psi, &f.decomposition, 1.0, 1e-3, &[0.01, -0.02, 0.03]).unwrap();
        assert_eq!(out[0], 1.0);
        for x in &out {
            assert!((x - 1.0).abs() < 1e-3);
        }
    }
}
