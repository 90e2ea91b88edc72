//! Finite-dimensional complex linear algebra for the reduction model.
//!
//! States, Hermitian observables, their spectral structure (distinct
//! eigenvalues with possibly degenerate eigenspaces), the Lüders projection
//! machinery and energy moment functionals.
//!
//! States are compared up to a global phase: use [`StateVector::fidelity`],
//! never componentwise equality.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Numerical tolerances shared by every validation in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Allowed deviation of `<psi|psi>` and of `Tr rho` from one.
    pub norm: f64,
    /// Allowed elementwise asymmetry `|A_ij - conj(A_ji)|`.
    pub herm: f64,
    /// Most negative eigenvalue accepted in a density matrix.
    pub psd: f64,
    /// Projection weights at or below this are treated as zero.
    pub prob: f64,
    /// Generic arithmetic tolerance for derived identities.
    pub num: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            norm: 1e-10,
            herm: 1e-10,
            psd: 1e-10,
            prob: 1e-12,
            num: 1e-9,
        }
    }
}

/// A state vector `|psi>` on an `N`-dimensional Hilbert space.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    amplitudes: CVector,
}

impl StateVector {
    /// Wraps raw amplitudes. No normalization is applied.
    pub fn new(amplitudes: CVector) -> Result<Self> {
        if amplitudes.is_empty() {
            return Err(Error::InvalidInput("state must have dimension >= 1".into()));
        }
        if amplitudes
            .iter()
            .any(|a| !a.re.is_finite() || !a.im.is_finite())
        {
            return Err(Error::InvalidInput(
                "state has non-finite amplitudes".into(),
            ));
        }
        Ok(Self { amplitudes })
    }

    /// Wraps amplitudes and rescales them to unit norm.
    pub fn normalized(amplitudes: CVector) -> Result<Self> {
        let mut state = Self::new(amplitudes)?;
        let norm = state.norm();
        if norm == 0.0 {
            return Err(Error::InvalidInput(
                "cannot normalize the zero vector".into(),
            ));
        }
        state.amplitudes.unscale_mut(norm);
        Ok(state)
    }

    pub fn from_slice(amplitudes: &[Complex64]) -> Result<Self> {
        Self::new(CVector::from_column_slice(amplitudes))
    }

    pub fn from_real(amplitudes: &[f64]) -> Result<Self> {
        Self::new(CVector::from_iterator(
            amplitudes.len(),
            amplitudes.iter().map(|&x| Complex64::new(x, 0.0)),
        ))
    }

    /// The `k`-th computational basis vector.
    pub fn basis(dim: usize, k: usize) -> Self {
        let mut amplitudes = CVector::zeros(dim);
        amplitudes[k] = ONE;
        Self { amplitudes }
    }

    /// Equal-weight superposition of all basis vectors.
    pub fn uniform(dim: usize) -> Self {
        let a = Complex64::new(1.0 / (dim as f64).sqrt(), 0.0);
        Self {
            amplitudes: CVector::from_element(dim, a),
        }
    }

    pub(crate) fn from_vector_unchecked(amplitudes: CVector) -> Self {
        Self { amplitudes }
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &CVector {
        &self.amplitudes
    }

    pub fn into_amplitudes(self) -> CVector {
        self.amplitudes
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.norm()
    }

    /// `|<psi|psi> - 1|`.
    pub fn norm_deviation(&self) -> f64 {
        (self.amplitudes.norm_squared() - 1.0).abs()
    }

    pub fn ensure_normalized(&self, tol: f64) -> Result<()> {
        let deviation = self.norm_deviation();
        if deviation > tol {
            return Err(Error::NotNormalized { deviation, tol });
        }
        Ok(())
    }

    /// `<self|other>`.
    pub fn inner(&self, other: &StateVector) -> Complex64 {
        self.amplitudes.dotc(&other.amplitudes)
    }

    /// Phase-insensitive overlap `|<a|b>|^2`.
    pub fn fidelity(&self, other: &StateVector) -> f64 {
        self.inner(other).norm_sqr()
    }

    /// `|psi><psi|`.
    pub fn projector(&self) -> CMatrix {
        &self.amplitudes * self.amplitudes.adjoint()
    }
}

/// Largest elementwise deviation from Hermiticity.
pub fn max_asymmetry(m: &CMatrix) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

/// Largest elementwise modulus of `a - b`.
pub fn max_abs_diff(a: &CMatrix, b: &CMatrix) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}

/// Largest elementwise modulus.
pub fn max_abs(m: &CMatrix) -> f64 {
    m.iter().map(|x| x.norm()).fold(0.0, f64::max)
}

fn ensure_square(m: &CMatrix) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::InvalidInput(format!(
            "matrix must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.nrows() == 0 {
        return Err(Error::InvalidInput(
            "matrix must have dimension >= 1".into(),
        ));
    }
    Ok(())
}

/// A Hermitian operator such as the Hamiltonian.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianObservable {
    matrix: CMatrix,
}

impl HermitianObservable {
    pub fn new(matrix: CMatrix, tol_herm: f64) -> Result<Self> {
        ensure_square(&matrix)?;
        if matrix
            .iter()
            .any(|a| !a.re.is_finite() || !a.im.is_finite())
        {
            return Err(Error::InvalidInput(
                "observable has non-finite entries".into(),
            ));
        }
        let max_asymmetry = max_asymmetry(&matrix);
        if max_asymmetry > tol_herm {
            return Err(Error::NotHermitian {
                max_asymmetry,
                tol: tol_herm,
            });
        }
        Ok(Self { matrix })
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let diag =
            CVector::from_iterator(values.len(), values.iter().map(|&x| Complex64::new(x, 0.0)));
        Self {
            matrix: CMatrix::from_diagonal(&diag),
        }
    }

    pub(crate) fn from_matrix_unchecked(matrix: CMatrix) -> Self {
        Self { matrix }
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// `<psi|A|psi>` (real for Hermitian `A`).
    pub fn expectation(&self, state: &StateVector) -> f64 {
        state
            .amplitudes
            .dotc(&(&self.matrix * &state.amplitudes))
            .re
    }
}

/// One distinct eigenvalue together with its eigenspace projector.
#[derive(Debug, Clone, PartialEq)]
pub struct Level {
    pub eigenvalue: f64,
    pub multiplicity: usize,
    pub projector: CMatrix,
}

/// Distinct eigenvalues `E_1 < ... < E_D`, multiplicities and projectors.
///
/// Also carries an orthonormal eigenbasis whose columns are grouped by level;
/// the dynamics run in that frame, where the observable is diagonal.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    levels: Vec<Level>,
    basis: CMatrix,
    column_level: Vec<usize>,
    tol: Tolerances,
}

/// Hermitian eigendecomposition, eigenvalues ascending.
pub(crate) fn hermitian_eigen(m: &CMatrix) -> Result<(Vec<f64>, CMatrix)> {
    let n = m.nrows();
    let sym = (m + m.adjoint()).scale(0.5);
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 1000 * n.max(1))
        .ok_or(Error::EigenNotConverged { dim: n })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = CMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

/// Decomposes a Hermitian observable into its distinct levels.
///
/// Adjacent eigenvalues closer than `tol_degeneracy` are merged into one level
/// (default `1e-9 * max(spectral_range, max |E|)`, so a multiple of the
/// identity stays one level).
pub fn spectral_decompose(
    obs: &HermitianObservable,
    tol_degeneracy: Option<f64>,
) -> Result<SpectralDecomposition> {
    spectral_decompose_with(obs, tol_degeneracy, Tolerances::default())
}

pub fn spectral_decompose_with(
    obs: &HermitianObservable,
    tol_degeneracy: Option<f64>,
    tol: Tolerances,
) -> Result<SpectralDecomposition> {
    let m = obs.matrix();
    let max_asymmetry = max_asymmetry(m);
    if max_asymmetry > tol.herm {
        return Err(Error::NotHermitian {
            max_asymmetry,
            tol: tol.herm,
        });
    }
    let n = m.nrows();
    let (values, vectors) = hermitian_eigen(m)?;
    let range = values[n - 1] - values[0];
    let scale = range.max(values[0].abs()).max(values[n - 1].abs());
    let gap_tol = tol_degeneracy.unwrap_or(1e-9 * scale);

    let mut groups: Vec<Vec<usize>> = vec![vec![0]];
    for i in 1..n {
        if values[i] - values[i - 1] <= gap_tol {
            groups.last_mut().unwrap().push(i);
        } else {
            groups.push(vec![i]);
        }
    }

    let mut levels = Vec::with_capacity(groups.len());
    let mut column_level = vec![0; n];
    for (level, cols) in groups.iter().enumerate() {
        let eigenvalue = cols.iter().map(|&c| values[c]).sum::<f64>() / cols.len() as f64;
        let mut projector = CMatrix::zeros(n, n);
        for &c in cols {
            let v = vectors.column(c);
            projector += &v * v.adjoint();
            column_level[c] = level;
        }
        levels.push(Level {
            eigenvalue,
            multiplicity: cols.len(),
            projector,
        });
    }

    Ok(SpectralDecomposition {
        levels,
        basis: vectors,
        column_level,
        tol,
    })
}

impl SpectralDecomposition {
    /// Builds a decomposition from explicit spectral data and validates it.
    ///
    /// Levels may be given in any order; they are sorted by eigenvalue.
    pub fn from_spectral(
        eigenvalues: &[f64],
        projectors: Vec<CMatrix>,
        tol: Tolerances,
    ) -> Result<Self> {
        if eigenvalues.is_empty() || eigenvalues.len() != projectors.len() {
            return Err(Error::InvalidInput(format!(
                "{} eigenvalues but {} projectors",
                eigenvalues.len(),
                projectors.len()
            )));
        }
        let n = projectors[0].nrows();
        for p in &projectors {
            ensure_square(p)?;
            if p.nrows() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: p.nrows(),
                });
            }
        }
        if eigenvalues.iter().any(|e| !e.is_finite()) {
            return Err(Error::InvalidInput("eigenvalues must be finite".into()));
        }

        let mut order: Vec<usize> = (0..eigenvalues.len()).collect();
        order.sort_by(|&a, &b| eigenvalues[a].total_cmp(&eigenvalues[b]));
        for w in order.windows(2) {
            if eigenvalues[w[1]] <= eigenvalues[w[0]] {
                return Err(Error::InvalidInput(format!(
                    "eigenvalue {} listed twice; merge the projectors instead",
                    eigenvalues[w[0]]
                )));
            }
        }

        let mut levels = Vec::with_capacity(order.len());
        let mut basis = CMatrix::zeros(n, n);
        let mut column_level = Vec::with_capacity(n);
        let mut total = CMatrix::zeros(n, n);
        for (level, &i) in order.iter().enumerate() {
            let p = &projectors[i];
            let asym = max_asymmetry(p);
            if asym > tol.herm {
                return Err(Error::NotHermitian {
                    max_asymmetry: asym,
                    tol: tol.herm,
                });
            }
            let idem = max_abs_diff(&(p * p), p);
            if idem > tol.herm {
                return Err(Error::InvalidInput(format!(
                    "projector for eigenvalue {} is not idempotent (|P^2 - P| = {idem:.3e})",
                    eigenvalues[i]
                )));
            }
            let trace = p.trace().re;
            let multiplicity = trace.round() as usize;
            if multiplicity == 0 || (trace - multiplicity as f64).abs() > tol.herm * n as f64 {
                return Err(Error::InvalidInput(format!(
                    "projector for eigenvalue {} has non-integer or zero trace {trace}",
                    eigenvalues[i]
                )));
            }
            let (pv, vecs) = hermitian_eigen(p)?;
            let start = column_level.len();
            for (c, &val) in pv.iter().enumerate() {
                if val > 0.5 {
                    if column_level.len() == n {
                        return Err(Error::InvalidInput(
                            "projector ranks exceed the dimension".into(),
                        ));
                    }
                    basis.set_column(column_level.len(), &vecs.column(c));
                    column_level.push(level);
                }
            }
            if column_level.len() - start != multiplicity {
                return Err(Error::InvalidInput(format!(
                    "projector for eigenvalue {} has rank {} but trace {multiplicity}",
                    eigenvalues[i],
                    column_level.len() - start
                )));
            }
            total += p;
            levels.push(Level {
                eigenvalue: eigenvalues[i],
                multiplicity,
                projector: p.clone(),
            });
        }

        if column_level.len() != n {
            return Err(Error::InvalidInput(format!(
                "multiplicities sum to {} but the dimension is {n}",
                column_level.len()
            )));
        }
        let resolution = max_abs_diff(&total, &CMatrix::identity(n, n));
        if resolution > tol.herm {
            return Err(Error::InvalidInput(format!(
                "projectors do not resolve the identity (deviation {resolution:.3e})"
            )));
        }
        for a in 0..levels.len() {
            for b in (a + 1)..levels.len() {
                let overlap = max_abs(&(&levels[a].projector * &levels[b].projector));
                if overlap > tol.herm {
                    return Err(Error::InvalidInput(format!(
                        "projectors {a} and {b} are not orthogonal (overlap {overlap:.3e})"
                    )));
                }
            }
        }

        Ok(Self {
            levels,
            basis,
            column_level,
            tol,
        })
    }

    pub fn with_tolerances(mut self, tol: Tolerances) -> Self {
        self.tol = tol;
        self
    }

    pub fn tolerances(&self) -> &Tolerances {
        &self.tol
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn level(&self, n: usize) -> Result<&Level> {
        self.levels.get(n).ok_or(Error::LevelOutOfRange {
            level: n,
            levels: self.levels.len(),
        })
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.eigenvalue).collect()
    }

    pub fn multiplicities(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.multiplicity).collect()
    }

    pub fn projector(&self, n: usize) -> Result<&CMatrix> {
        Ok(&self.level(n)?.projector)
    }

    pub fn e_min(&self) -> f64 {
        self.levels[0].eigenvalue
    }

    pub fn e_max(&self) -> f64 {
        self.levels[self.levels.len() - 1].eigenvalue
    }

    /// `E_+ - E_-`.
    pub fn spectral_range(&self) -> f64 {
        self.e_max() - self.e_min()
    }

    /// Levels with multiplicity greater than one.
    pub fn degenerate_levels(&self) -> Vec<usize> {
        (0..self.levels.len())
            .filter(|&n| self.levels[n].multiplicity > 1)
            .collect()
    }

    /// Orthonormal eigenbasis, columns grouped by level.
    pub fn basis(&self) -> &CMatrix {
        &self.basis
    }

    /// Level index of each basis column.
    pub fn column_level(&self) -> &[usize] {
        &self.column_level
    }

    /// Eigenvalue attached to each basis column.
    pub fn column_eigenvalues(&self) -> Vec<f64> {
        self.column_level
            .iter()
            .map(|&l| self.levels[l].eigenvalue)
            .collect()
    }

    /// `sum_n E_n P_n`.
    pub fn reconstruct(&self) -> CMatrix {
        let n = self.dim();
        self.levels.iter().fold(CMatrix::zeros(n, n), |acc, l| {
            acc + l.projector.scale(l.eigenvalue)
        })
    }

    pub fn observable(&self) -> HermitianObservable {
        HermitianObservable::from_matrix_unchecked(self.reconstruct())
    }

    /// Coordinates of a state in the eigenbasis.
    pub fn to_frame(&self, state: &StateVector) -> CVector {
        self.basis.adjoint() * state.amplitudes()
    }

    pub fn from_frame(&self, coords: &CVector) -> StateVector {
        StateVector::from_vector_unchecked(&self.basis * coords)
    }

    pub(crate) fn check_dim(&self, dim: usize) -> Result<()> {
        if dim != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: dim,
            });
        }
        Ok(())
    }

    pub(crate) fn check_state(&self, state: &StateVector) -> Result<()> {
        self.check_dim(state.dim())?;
        state.ensure_normalized(self.tol.norm)
    }

    /// Level weights from frame coordinates.
    pub(crate) fn frame_probabilities(&self, coords: &CVector) -> Vec<f64> {
        let mut probs = vec![0.0; self.levels.len()];
        for (c, &l) in coords.iter().zip(&self.column_level) {
            probs[l] += c.norm_sqr();
        }
        probs
    }
}

/// Energy moments of a state with respect to a decomposed observable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSet {
    /// `H = <psi|H|psi>`.
    pub h: f64,
    /// Raw moments `H^(n)` for `n = 1..=n_max`; index 0 holds `H^(1)`.
    pub raw: Vec<f64>,
    /// Variance `<(H - h)^2>`.
    pub v: f64,
    /// Third central moment `<(H - h)^3>`.
    pub beta: f64,
}

impl MomentSet {
    pub fn moment(&self, n: usize) -> Option<f64> {
        n.checked_sub(1).and_then(|i| self.raw.get(i)).copied()
    }
}

/// Moments of the level distribution `pi_n` with support `E_n`.
pub fn moments_from_probabilities(probs: &[f64], eigenvalues: &[f64], n_max: usize) -> MomentSet {
    let raw: Vec<f64> = (1..=n_max as i32)
        .map(|k| {
            probs
                .iter()
                .zip(eigenvalues)
                .map(|(p, e)| p * e.powi(k))
                .sum()
        })
        .collect();
    let h = raw[0];
    let (mut v, mut beta) = (0.0, 0.0);
    for (p, e) in probs.iter().zip(eigenvalues) {
        let d = e - h;
        v += p * d * d;
        beta += p * d * d * d;
    }
    MomentSet { h, raw, v, beta }
}

pub fn moments(
    state: &StateVector,
    dec: &SpectralDecomposition,
    n_max: usize,
) -> Result<MomentSet> {
    if n_max < 3 {
        return Err(Error::InvalidInput(format!(
            "n_max must be >= 3, got {n_max}"
        )));
    }
    let probs = level_probabilities(state, dec)?;
    Ok(moments_from_probabilities(
        &probs,
        &dec.eigenvalues(),
        n_max,
    ))
}

/// `pi_n = <psi|P_n|psi>` for every level.
pub fn level_probabilities(state: &StateVector, dec: &SpectralDecomposition) -> Result<Vec<f64>> {
    dec.check_state(state)?;
    Ok(dec.frame_probabilities(&dec.to_frame(state)))
}

fn projection_weight(
    state: &StateVector,
    dec: &SpectralDecomposition,
    level: usize,
) -> Result<(CVector, f64)> {
    dec.check_state(state)?;
    let projected = dec.projector(level)? * state.amplitudes();
    let weight = projected.norm_squared();
    if weight <= dec.tol.prob {
        return Err(Error::DegenerateProjection { level, weight });
    }
    Ok((projected, weight))
}

/// Normalized Lüders state `P_n|psi> / <psi|P_n|psi>^(1/2)`.
///
/// The global phase is inherited from `P_n|psi>`.
pub fn luders_state(
    state: &StateVector,
    dec: &SpectralDecomposition,
    level: usize,
) -> Result<StateVector> {
    let (projected, weight) = projection_weight(state, dec, level)?;
    Ok(StateVector::from_vector_unchecked(
        projected.unscale(weight.sqrt()),
    ))
}

/// Projector onto the part of level `n`'s eigenspace orthogonal to the Lüders state.
pub fn orthogonal_luders_complement(
    state: &StateVector,
    dec: &SpectralDecomposition,
    level: usize,
) -> Result<HermitianObservable> {
    let luders = luders_state(state, dec, level)?;
    let complement = dec.projector(level)? - luders.projector();
    Ok(HermitianObservable::from_matrix_unchecked(complement))
}

/// Lüders map: conditional `P_n rho P_n / Tr(P_n rho)` when `level` is given,
/// otherwise the non-selective `sum_n P_n rho P_n`.
pub fn luders_map(
    rho: &DensityMatrix,
    dec: &SpectralDecomposition,
    level: Option<usize>,
) -> Result<DensityMatrix> {
    dec.check_dim(rho.dim())?;
    let m = rho.matrix();
    match level {
        Some(n) => {
            let p = dec.projector(n)?;
            let weight = (p * m).trace().re;
            if weight <= dec.tol.prob {
                return Err(Error::DegenerateProjection { level: n, weight });
            }
            Ok(DensityMatrix::from_matrix_unchecked(
                (p * m * p).unscale(weight),
            ))
        }
        None => {
            let n = rho.dim();
            let out = dec.levels.iter().fold(CMatrix::zeros(n, n), |acc, l| {
                acc + &l.projector * m * &l.projector
            });
            Ok(DensityMatrix::from_matrix_unchecked(out))
        }
    }
}

/// Hermitian, positive-semidefinite, unit-trace matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    matrix: CMatrix,
}

impl DensityMatrix {
    pub fn new(matrix: CMatrix, tol: &Tolerances) -> Result<Self> {
        ensure_square(&matrix)?;
        let asym = max_asymmetry(&matrix);
        if asym > tol.herm {
            return Err(Error::NotHermitian {
                max_asymmetry: asym,
                tol: tol.herm,
            });
        }
        let trace = matrix.trace().re;
        if (trace - 1.0).abs() > tol.norm {
            return Err(Error::InvalidDensity(format!(
                "trace is {trace}, expected 1"
            )));
        }
        let rho = Self { matrix };
        let min_eig = rho.min_eigenvalue()?;
        if min_eig < -tol.psd {
            return Err(Error::InvalidDensity(format!(
                "eigenvalue {min_eig:.3e} is negative beyond tolerance"
            )));
        }
        Ok(rho)
    }

    pub(crate) fn from_matrix_unchecked(matrix: CMatrix) -> Self {
        Self { matrix }
    }

    pub fn pure(state: &StateVector) -> Self {
        Self {
            matrix: state.projector(),
        }
    }

    /// `sum_i w_i |psi_i><psi_i|` for a validated mixture.
    pub fn from_mixture(members: &[(f64, StateVector)], tol: &Tolerances) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::InvalidInput("mixture has no members".into()))?;
        let n = first.1.dim();
        let mut total = 0.0;
        let mut m = CMatrix::zeros(n, n);
        for (w, s) in members {
            if *w < 0.0 || !w.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "mixture weight {w} is negative"
                )));
            }
            if s.dim() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: s.dim(),
                });
            }
            s.ensure_normalized(tol.norm)?;
            total += w;
            m += s.projector().scale(*w);
        }
        if (total - 1.0).abs() > tol.num {
            return Err(Error::InvalidInput(format!(
                "mixture weights sum to {total}"
            )));
        }
        Ok(Self { matrix: m })
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace().re
    }

    /// `Tr rho^2`.
    pub fn purity(&self) -> f64 {
        (&self.matrix * &self.matrix).trace().re
    }

    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        Ok(hermitian_eigen(&self.matrix)?.0)
    }

    pub fn min_eigenvalue(&self) -> Result<f64> {
        Ok(self.eigenvalues()?[0])
    }

    /// `Tr(rho A)`.
    pub fn expectation(&self, op: &CMatrix) -> Complex64 {
        (&self.matrix * op).trace()
    }

    pub fn max_abs_diff(&self, other: &DensityMatrix) -> f64 {
        max_abs_diff(&self.matrix, &other.matrix)
    }

    /// Largest elementwise modulus of `[A, rho]`.
    pub fn commutator_norm(&self, op: &CMatrix) -> f64 {
        max_abs(&(op * &self.matrix - &self.matrix * op))
    }
}

/// Largest elementwise modulus of `[a, b]`.
pub fn commutator_norm(a: &CMatrix, b: &CMatrix) -> f64 {
    max_abs(&(a * b - b * a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::{random_hermitian, random_state};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn czero() -> Complex64 {
        Complex64::new(0.0, 0.0)
    }

    fn qubit_state() -> StateVector {
        StateVector::from_real(&[0.25f64.sqrt(), 0.75f64.sqrt()]).unwrap()
    }

    fn spin_pair() -> SpectralDecomposition {
        spectral_decompose(&HermitianObservable::diagonal(&[-1.0, 0.0, 0.0, 1.0]), None).unwrap()
    }

    #[test]
    fn diagonal_qubit_has_two_levels() {
        let dec = spectral_decompose(&HermitianObservable::diagonal(&[0.0, 1.0]), None).unwrap();
        assert_eq!(dec.num_levels(), 2);
        assert_eq!(dec.eigenvalues(), vec![0.0, 1.0]);
        assert_eq!(dec.multiplicities(), vec![1, 1]);
        assert_relative_eq!(dec.projector(0).unwrap()[(0, 0)].re, 1.0);
        assert_relative_eq!(dec.projector(1).unwrap()[(1, 1)].re, 1.0);
    }

    #[test]
    fn spin_pair_merges_degenerate_zero_level() {
        let dec = spin_pair();
        assert_eq!(dec.num_levels(), 3);
        assert_eq!(dec.eigenvalues(), vec![-1.0, 0.0, 1.0]);
        assert_eq!(dec.multiplicities(), vec![1, 2, 1]);
        assert_eq!(dec.degenerate_levels(), vec![1]);
        assert_relative_eq!(dec.projector(1).unwrap().trace().re, 2.0, epsilon = 1e-12);
        assert_eq!(dec.spectral_range(), 2.0);
    }

    #[test]
    fn random_hermitian_is_reconstructed() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let obs = random_hermitian(5, &mut rng);
        let dec = spectral_decompose(&obs, None).unwrap();
        assert!(max_abs_diff(&dec.reconstruct(), obs.matrix()) < 1e-12);
    }

    #[test]
    fn non_hermitian_is_rejected_with_asymmetry() {
        let mut m = CMatrix::zeros(2, 2);
        m[(0, 1)] = c(1.0);
        let err = HermitianObservable::new(m.clone(), 1e-10).unwrap_err();
        match err {
            Error::NotHermitian { max_asymmetry, .. } => assert_relative_eq!(max_asymmetry, 1.0),
            other => panic!("unexpected {other:?}"),
        }
        let obs = HermitianObservable::from_matrix_unchecked(m);
        assert!(matches!(
            spectral_decompose(&obs, None),
            Err(Error::NotHermitian { .. })
        ));
    }

    #[test]
    fn nearly_degenerate_eigenvalues_merge_only_within_tolerance() {
        let obs = HermitianObservable::diagonal(&[0.0, 1e-12, 1.0]);
        assert_eq!(spectral_decompose(&obs, None).unwrap().num_levels(), 2);
        assert_eq!(spectral_decompose(&obs, Some(0.0)).unwrap().num_levels(), 3);
    }

    #[test]
    fn explicit_spectral_data_roundtrips() {
        let dec = spin_pair();
        let projectors = dec
            .levels()
            .iter()
            .rev()
            .map(|l| l.projector.clone())
            .collect();
        let rebuilt = SpectralDecomposition::from_spectral(
            &[1.0, 0.0, -1.0],
            projectors,
            Tolerances::default(),
        )
        .unwrap();
        assert_eq!(rebuilt.eigenvalues(), vec![-1.0, 0.0, 1.0]);
        assert_eq!(rebuilt.multiplicities(), vec![1, 2, 1]);
        assert!(max_abs_diff(&rebuilt.reconstruct(), &dec.reconstruct()) < 1e-14);
    }

    #[test]
    fn explicit_spectral_data_rejects_incomplete_resolution() {
        let dec = spin_pair();
        let projectors = dec.levels()[..2]
            .iter()
            .map(|l| l.projector.clone())
            .collect();
        let err =
            SpectralDecomposition::from_spectral(&[-1.0, 0.0], projectors, Tolerances::default());
        assert!(err.is_err());
    }

    #[test]
    fn eigenstate_moments_vanish() {
        let dec = spin_pair();
        let m = moments(&StateVector::basis(4, 3), &dec, 4).unwrap();
        assert_eq!(m.h, 1.0);
        assert_eq!(m.v, 0.0);
        assert_eq!(m.beta, 0.0);
    }

    #[test]
    fn qubit_moments() {
        let dec = spectral_decompose(&HermitianObservable::diagonal(&[0.0, 1.0]), None).unwrap();
        let m = moments(&qubit_state(), &dec, 3).unwrap();
        assert_relative_eq!(m.h, 0.75, epsilon = 1e-14);
        assert_relative_eq!(m.v, 0.1875, epsilon = 1e-14);
        assert_relative_eq!(m.moment(2).unwrap() - m.h * m.h, m.v, epsilon = 1e-14);
    }

    #[test]
    fn uniform_spin_pair_moments_by_brute_force() {
        // brute force over the four basis amplitudes, each with weight 1/4
        let energies = [-1.0f64, 0.0, 0.0, 1.0];
        let h: f64 = energies.iter().map(|e| 0.25 * e).sum();
        let v: f64 = energies.iter().map(|e| 0.25 * (e - h).powi(2)).sum();
        let beta: f64 = energies.iter().map(|e| 0.25 * (e - h).powi(3)).sum();
        let m = moments(&StateVector::uniform(4), &spin_pair(), 3).unwrap();
        assert_relative_eq!(m.h, h, epsilon = 1e-14);
        assert_relative_eq!(m.v, v, epsilon = 1e-14);
        assert_relative_eq!(m.beta, beta, epsilon = 1e-14);
        assert_relative_eq!(m.v, 0.5, epsilon = 1e-14);
    }

    #[test]
    fn moments_reject_unnormalized_and_small_order() {
        let dec = spin_pair();
        let s = StateVector::from_real(&[1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            moments(&s, &dec, 3),
            Err(Error::NotNormalized { .. })
        ));
        assert!(moments(&StateVector::uniform(4), &dec, 2).is_err());
    }

    #[test]
    fn level_probability_examples() {
        let dec = spin_pair();
        assert_eq!(
            level_probabilities(&StateVector::basis(4, 0), &dec).unwrap(),
            vec![1.0, 0.0, 0.0]
        );
        let p = level_probabilities(&StateVector::uniform(4), &dec).unwrap();
        for (a, b) in p.iter().zip([0.25, 0.5, 0.25]) {
            assert_relative_eq!(*a, b, epsilon = 1e-14);
        }
        let qdec = spectral_decompose(&HermitianObservable::diagonal(&[0.0, 1.0]), None).unwrap();
        let q = level_probabilities(&qubit_state(), &qdec).unwrap();
        assert_relative_eq!(q[0], 0.25, epsilon = 1e-14);
        assert_relative_eq!(q[1], 0.75, epsilon = 1e-14);
    }

    #[test]
    fn luders_state_examples() {
        let dec = spin_pair();
        let s = StateVector::basis(4, 3);
        assert_relative_eq!(
            luders_state(&s, &dec, 2).unwrap().fidelity(&s),
            1.0,
            epsilon = 1e-14
        );

        let l = luders_state(&StateVector::uniform(4), &dec, 1).unwrap();
        let expected = StateVector::from_real(&[0.0, 0.5f64.sqrt(), 0.5f64.sqrt(), 0.0]).unwrap();
        assert_relative_eq!(l.fidelity(&expected), 1.0, epsilon = 1e-14);

        let qdec = spectral_decompose(&HermitianObservable::diagonal(&[0.0, 1.0]), None).unwrap();
        let q = luders_state(&qubit_state(), &qdec, 1).unwrap();
        assert_relative_eq!(q.fidelity(&StateVector::basis(2, 1)), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn luders_state_on_empty_level_is_an_error() {
        let dec = spin_pair();
        let err = luders_state(&StateVector::basis(4, 0), &dec, 2).unwrap_err();
        assert!(matches!(err, Error::DegenerateProjection { level: 2, .. }));
        assert!(matches!(
            luders_state(&StateVector::basis(4, 0), &dec, 5),
            Err(Error::LevelOutOfRange { .. })
        ));
    }

    #[test]
    fn complement_examples() {
        let dec = spin_pair();
        let psi = StateVector::uniform(4);
        let nondeg = orthogonal_luders_complement(&psi, &dec, 0).unwrap();
        assert!(max_abs(nondeg.matrix()) < 1e-15);

        let pi = orthogonal_luders_complement(&psi, &dec, 1).unwrap();
        let target = StateVector::from_real(&[0.0, 0.5f64.sqrt(), -(0.5f64.sqrt()), 0.0]).unwrap();
        assert!(max_abs_diff(pi.matrix(), &target.projector()) < 1e-14);
        assert!(pi.expectation(&psi).abs() < 1e-12);
    }

    #[test]
    fn luders_map_examples() {
        let dec = spin_pair();
        let tol = Tolerances::default();
        let block = DensityMatrix::from_mixture(
            &[
                (0.5, StateVector::basis(4, 0)),
                (0.5, StateVector::from_real(&[0.0, 0.6, 0.8, 0.0]).unwrap()),
            ],
            &tol,
        )
        .unwrap();
        assert!(luders_map(&block, &dec, None).unwrap().max_abs_diff(&block) < 1e-15);

        let psi = StateVector::uniform(4);
        let cond = luders_map(&DensityMatrix::pure(&psi), &dec, Some(1)).unwrap();
        let l = luders_state(&psi, &dec, 1).unwrap();
        assert!(cond.max_abs_diff(&DensityMatrix::pure(&l)) < 1e-14);

        let qdec = spectral_decompose(&HermitianObservable::diagonal(&[0.0, 1.0]), None).unwrap();
        let mut m = CMatrix::zeros(2, 2);
        m[(0, 0)] = c(0.4);
        m[(1, 1)] = c(0.6);
        m[(0, 1)] = Complex64::new(0.2, 0.3);
        m[(1, 0)] = Complex64::new(0.2, -0.3);
        let rho = DensityMatrix::new(m, &tol).unwrap();
        let out = luders_map(&rho, &qdec, None).unwrap();
        assert_eq!(out.matrix()[(0, 1)], czero());
        assert_relative_eq!(out.matrix()[(0, 0)].re, 0.4);
        assert_relative_eq!(out.matrix()[(1, 1)].re, 0.6);
    }

    #[test]
    fn density_validation() {
        let tol = Tolerances::default();
        let mut m = CMatrix::zeros(2, 2);
        m[(0, 0)] = c(1.5);
        m[(1, 1)] = c(-0.5);
        assert!(matches!(
            DensityMatrix::new(m, &tol),
            Err(Error::InvalidDensity(_))
        ));
        let rho = DensityMatrix::pure(&StateVector::uniform(3));
        assert_relative_eq!(rho.purity(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn random_state_probabilities_reproduce_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for dim in 1..8 {
            let dec = spectral_decompose(&random_hermitian(dim, &mut rng), None).unwrap();
            let psi = random_state(dim, &mut rng);
            let p = level_probabilities(&psi, &dec).unwrap();
            let h: f64 = p.iter().zip(dec.eigenvalues()).map(|(p, e)| p * e).sum();
            assert_relative_eq!(h, dec.observable().expectation(&psi), epsilon = 1e-12);
        }
    }
}
