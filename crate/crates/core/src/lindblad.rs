//! Ensemble density-matrix evolution under the dephasing master equation
//!
//! ```text
//! d rho/dt = -i [H, rho] + 1/4 sigma^2 (H rho H - 1/2 H^2 rho - 1/2 rho H^2)
//! ```
//!
//! whose Lindblad operator is `sigma H / 2`. The exact solution keeps every
//! diagonal block `P_n rho P_n` fixed and damps the block `P_n rho P_m` by
//! `exp(-1/8 sigma^2 (E_n - E_m)^2 t)` while it rotates with `exp(-i (E_n - E_m) t)`.
//!
//! For a related result, see Parthasarathy's work on quantum stochastic
//! calculus; nothing here depends on it.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::hilbert::{max_abs, CMatrix, DensityMatrix, SpectralDecomposition, Tolerances};
use crate::sde::Trajectory;

/// Heisenberg-picture block decomposition `R_nm = P_n r_t P_m` of the
/// density matrix, with `r_t = e^{iHt} rho_t e^{-iHt}`.
#[derive(Debug, Clone)]
pub struct BlockDecomposedDensity {
    blocks: Vec<Vec<CMatrix>>,
    eigenvalues: Vec<f64>,
    sigma: f64,
    time: f64,
}

impl BlockDecomposedDensity {
    /// Blocks of `rho0` at `t = 0`.
    pub fn new(rho0: &DensityMatrix, dec: &SpectralDecomposition, sigma: f64) -> Result<Self> {
        dec.check_dim(rho0.dim())?;
        let levels = dec.levels();
        let blocks = levels
            .iter()
            .map(|n| {
                levels
                    .iter()
                    .map(|m| &n.projector * rho0.matrix() * &m.projector)
                    .collect()
            })
            .collect();
        Ok(Self {
            blocks,
            eigenvalues: dec.eigenvalues(),
            sigma,
            time: 0.0,
        })
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn num_levels(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, n: usize, m: usize) -> &CMatrix {
        &self.blocks[n][m]
    }

    /// Advances the Heisenberg-picture blocks by `dt`; only off-diagonal blocks change.
    pub fn evolve(&self, dt: f64) -> Self {
        let mut out = self.clone();
        for (n, row) in out.blocks.iter_mut().enumerate() {
            for (m, block) in row.iter_mut().enumerate() {
                let w = self.eigenvalues[n] - self.eigenvalues[m];
                if n != m {
                    *block *=
                        Complex64::new((-0.125 * self.sigma * self.sigma * w * w * dt).exp(), 0.0);
                }
            }
        }
        out.time += dt;
        out
    }

    /// Schrödinger-picture density `sum_nm e^{-i (E_n - E_m) t} R_nm`.
    pub fn density(&self) -> DensityMatrix {
        let dim = self.blocks[0][0].nrows();
        let mut rho = CMatrix::zeros(dim, dim);
        for (n, row) in self.blocks.iter().enumerate() {
            for (m, block) in row.iter().enumerate() {
                let w = self.eigenvalues[n] - self.eigenvalues[m];
                rho += block * Complex64::from_polar(1.0, -w * self.time);
            }
        }
        DensityMatrix::from_matrix_unchecked(rho)
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::Validation(format!(
            "time must be finite and >= 0, got {t}"
        )));
    }
    Ok(())
}

/// Exact solution at time `t`.
pub fn rho_closed_form(
    rho0: &DensityMatrix,
    dec: &SpectralDecomposition,
    sigma: f64,
    t: f64,
) -> Result<DensityMatrix> {
    dec.check_dim(rho0.dim())?;
    check_time(t)?;
    let energies = dec.column_eigenvalues();
    let basis = dec.basis();
    let mut frame = basis.adjoint() * rho0.matrix() * basis;
    let n = frame.nrows();
    for k in 0..n {
        for l in 0..n {
            let w = energies[k] - energies[l];
            if w != 0.0 {
                frame[(k, l)] *=
                    Complex64::from_polar((-0.125 * sigma * sigma * w * w * t).exp(), -w * t);
            }
        }
    }
    let rho = basis * frame * basis.adjoint();
    Ok(DensityMatrix::from_matrix_unchecked(symmetrize(rho)))
}

fn symmetrize(m: CMatrix) -> CMatrix {
    (&m + m.adjoint()) * Complex64::new(0.5, 0.0)
}

/// Default integrator step `1e-3 * min(1, 8 / (sigma^2 range^2))`.
pub fn default_integration_dt(dec: &SpectralDecomposition, sigma: f64) -> f64 {
    let stiffness = sigma * sigma * dec.spectral_range().powi(2);
    if stiffness > 0.0 {
        1e-3 * (8.0 / stiffness).min(1.0)
    } else {
        1e-3
    }
}

/// Classical fourth-order Runge–Kutta integration of the master equation in
/// the computational basis.
///
/// The state is symmetrized after each step and rescaled to unit trace at the
/// end. Positivity is monitored, not enforced: a minimum eigenvalue below
/// `-tol_psd` is reported as an integration-quality error.
pub fn rho_integrate(
    rho0: &DensityMatrix,
    dec: &SpectralDecomposition,
    sigma: f64,
    t_end: f64,
    dt: f64,
) -> Result<DensityMatrix> {
    dec.check_dim(rho0.dim())?;
    check_time(t_end)?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Configuration(format!("dt must be > 0, got {dt}")));
    }
    let h = dec.reconstruct();
    let h2 = &h * &h;
    let gamma = Complex64::new(0.25 * sigma * sigma, 0.0);
    let half = Complex64::new(0.5, 0.0);
    let minus_i = Complex64::new(0.0, -1.0);
    let rhs = |rho: &CMatrix| -> CMatrix {
        let commutator = &h * rho - rho * &h;
        let dissipator = &h * rho * &h - (&h2 * rho + rho * &h2) * half;
        commutator * minus_i + dissipator * gamma
    };

    let full_steps = (t_end / dt).floor() as usize;
    let remainder = t_end - full_steps as f64 * dt;
    let mut rho = rho0.matrix().clone();
    let step = |rho: &CMatrix, dt: f64| -> CMatrix {
        let c = |x: f64| Complex64::new(x, 0.0);
        let k1 = rhs(rho);
        let k2 = rhs(&(rho + &k1 * c(0.5 * dt)));
        let k3 = rhs(&(rho + &k2 * c(0.5 * dt)));
        let k4 = rhs(&(rho + &k3 * c(dt)));
        let next = rho + (k1 + (k2 + k3) * c(2.0) + k4) * c(dt / 6.0);
        symmetrize(next)
    };
    for n in 0..full_steps {
        rho = step(&rho, dt);
        if !rho.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            return Err(Error::NumericBlowup { step: n + 1 });
        }
    }
    if remainder > 1e-12 * dt {
        rho = step(&rho, remainder);
    }
    let trace = rho.trace().re;
    rho /= Complex64::new(trace, 0.0);
    let out = DensityMatrix::from_matrix_unchecked(rho);
    let tol = dec.tolerances().psd;
    let min_eigenvalue = out.min_eigenvalue()?;
    if min_eigenvalue < -tol {
        return Err(Error::IntegrationQuality {
            min_eigenvalue,
            tol,
        });
    }
    Ok(out)
}

/// `(1/T) int_0^T e^{-iHt} rho0 e^{iHt} dt`, evaluated analytically block by block.
pub fn unitary_time_average(
    rho0: &DensityMatrix,
    dec: &SpectralDecomposition,
    horizon: f64,
) -> Result<DensityMatrix> {
    dec.check_dim(rho0.dim())?;
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::Validation(format!(
            "averaging time must be > 0, got {horizon}"
        )));
    }
    let energies = dec.column_eigenvalues();
    let basis = dec.basis();
    let mut frame = basis.adjoint() * rho0.matrix() * basis;
    let n = frame.nrows();
    for k in 0..n {
        for l in 0..n {
            let w = energies[k] - energies[l];
            if w != 0.0 {
                let wt = w * horizon;
                frame[(k, l)] *= Complex64::new(wt.sin() / wt, (wt.cos() - 1.0) / wt);
            }
        }
    }
    Ok(DensityMatrix::from_matrix_unchecked(symmetrize(
        basis * frame * basis.adjoint(),
    )))
}

/// Running sum of `|psi><psi|` over trajectories on a shared time grid.
#[derive(Debug, Clone)]
pub struct DensityAccumulator {
    times: Vec<f64>,
    sums: Vec<CMatrix>,
    count: usize,
}

impl DensityAccumulator {
    pub fn new(times: Vec<f64>, dim: usize) -> Self {
        let sums = vec![CMatrix::zeros(dim, dim); times.len()];
        Self {
            times,
            sums,
            count: 0,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn add(&mut self, traj: &Trajectory) -> Result<()> {
        let states = traj.states.as_ref().ok_or_else(|| {
            Error::Validation(format!("trajectory {} has no recorded states", traj.index))
        })?;
        if traj.times != self.times {
            return Err(Error::Validation(format!(
                "trajectory {} is on a different time grid",
                traj.index
            )));
        }
        for (sum, state) in self.sums.iter_mut().zip(states) {
            if state.dim() != sum.nrows() {
                return Err(Error::DimensionMismatch {
                    expected: sum.nrows(),
                    found: state.dim(),
                });
            }
            sum.gerc(
                Complex64::new(1.0, 0.0),
                state.amplitudes(),
                state.amplitudes(),
                Complex64::new(1.0, 0.0),
            );
        }
        self.count += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<Vec<(f64, DensityMatrix)>> {
        if self.count == 0 {
            return Err(Error::Validation("no trajectories".into()));
        }
        let scale = Complex64::new(1.0 / self.count as f64, 0.0);
        Ok(self
            .times
            .into_iter()
            .zip(self.sums)
            .map(|(t, s)| (t, DensityMatrix::from_matrix_unchecked(s * scale)))
            .collect())
    }
}

/// `rho_t = E[|psi_t><psi_t|]` estimated from trajectories with recorded states.
pub fn ensemble_density_from_trajectories(
    trajectories: &[Trajectory],
) -> Result<Vec<(f64, DensityMatrix)>> {
    let first = trajectories
        .first()
        .ok_or_else(|| Error::Validation("no trajectories".into()))?;
    let mut acc = DensityAccumulator::new(first.times.clone(), first.initial_state.dim());
    for traj in trajectories {
        acc.add(traj)?;
    }
    acc.finish()
}

/// Largest elementwise difference between two density matrices.
pub fn max_element_distance(a: &DensityMatrix, b: &DensityMatrix) -> f64 {
    max_abs(&(a.matrix() - b.matrix()))
}

/// Checks the density-matrix invariants of `rho` with the given tolerances.
pub fn validate_density(rho: &DensityMatrix, tol: &Tolerances) -> Result<()> {
    DensityMatrix::new(rho.matrix().clone(), tol).map(|_| ())
}
