//! Euler–Maruyama integration of the energy-based reduction equation
//!
//! ```text
//! d|psi> = -i H |psi> dt - 1/8 sigma^2 (H - <H>)^2 |psi> dt + 1/2 sigma (H - <H>) |psi> dW
//! ```
//!
//! and of its generalization to a commuting family of observables `F_a`, each
//! with its own coupling `sigma_a` and Wiener process.
//!
//! All observables involved commute, so the integration runs in a joint
//! eigenbasis where every operator is diagonal and a step costs `O(N)`.
//! The state is renormalized after every step; the norm error before
//! renormalization is reported as a diagnostic.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::hilbert::{
    commutator_norm, hermitian_eigen, CMatrix, CVector, DensityMatrix, SpectralDecomposition,
    StateVector, Tolerances,
};
use crate::rng;

/// Upper bound on the number of reduction channels.
pub const MAX_CHANNELS: usize = 8;

/// Pure or mixed initial condition.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition {
    Pure(StateVector),
    /// `(weight, state)` members; weights sum to one.
    Mixture(Vec<(f64, StateVector)>),
}

impl InitialCondition {
    pub fn mixture(members: Vec<(f64, StateVector)>) -> Result<Self> {
        // validates weights, normalization and dimensions
        DensityMatrix::from_mixture(&members, &Tolerances::default())?;
        Ok(Self::Mixture(members))
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Pure(s) => s.dim(),
            Self::Mixture(m) => m[0].1.dim(),
        }
    }

    /// `E[|Psi_0><Psi_0|]`.
    pub fn density(&self) -> DensityMatrix {
        match self {
            Self::Pure(s) => DensityMatrix::pure(s),
            Self::Mixture(m) => DensityMatrix::from_mixture(m, &Tolerances::default())
                .expect("validated at construction"),
        }
    }

    pub fn as_pure(&self) -> Option<&StateVector> {
        match self {
            Self::Pure(s) => Some(s),
            Self::Mixture(_) => None,
        }
    }
}

/// Draws the initial state: a pure condition is returned as is, a mixture
/// member is chosen with probability equal to its weight (one uniform draw).
pub fn sample_initial<R: Rng + ?Sized>(init: &InitialCondition, stream: &mut R) -> StateVector {
    match init {
        InitialCondition::Pure(s) => s.clone(),
        InitialCondition::Mixture(members) => {
            let u: f64 = stream.random();
            let mut acc = 0.0;
            for (w, s) in members {
                acc += w;
                if u < acc {
                    return s.clone();
                }
            }
            // weights sum to 1 within rounding; fall back to the last member with weight
            members
                .iter()
                .rev()
                .find(|(w, _)| *w > 0.0)
                .map(|(_, s)| s.clone())
                .unwrap_or_else(|| members[0].1.clone())
        }
    }
}

/// One reduction channel: an observable and its coupling `sigma`.
#[derive(Debug, Clone)]
pub struct Channel {
    pub observable: SpectralDecomposition,
    pub sigma: f64,
}

#[derive(Debug, Clone)]
struct FrameChannel {
    values: Vec<f64>,
    sigma: f64,
    range: f64,
}

/// Reduction dynamics expressed in a joint eigenbasis of the Hamiltonian
/// and every channel observable.
#[derive(Debug, Clone)]
pub struct ReductionModel {
    hamiltonian: SpectralDecomposition,
    frame: CMatrix,
    energies: Vec<f64>,
    channels: Vec<FrameChannel>,
    /// Joint eigenspace ("reduction level") of each frame column.
    joint_level: Vec<usize>,
    num_joint_levels: usize,
}

fn snap_to_level(value: f64, dec: &SpectralDecomposition) -> f64 {
    dec.levels()
        .iter()
        .map(|l| l.eigenvalue)
        .min_by(|a, b| (a - value).abs().total_cmp(&(b - value).abs()))
        .expect("at least one level")
}

impl ReductionModel {
    /// The energy-based model: a single channel whose observable is the Hamiltonian.
    pub fn energy(dec: &SpectralDecomposition, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Configuration(format!(
                "sigma must be finite and >= 0, got {sigma}"
            )));
        }
        let energies = dec.column_eigenvalues();
        let channel = FrameChannel {
            values: energies.clone(),
            sigma,
            range: dec.spectral_range(),
        };
        Ok(Self {
            hamiltonian: dec.clone(),
            frame: dec.basis().clone(),
            energies,
            channels: vec![channel],
            joint_level: dec.column_level().to_vec(),
            num_joint_levels: dec.num_levels(),
        })
    }

    /// A commuting family of reduction channels together with a Hamiltonian.
    ///
    /// Every pair of operators must commute to within `tol_herm` (scaled by
    /// the product of their spectral ranges).
    pub fn multi(hamiltonian: &SpectralDecomposition, channels: &[Channel]) -> Result<Self> {
        if channels.is_empty() || channels.len() > MAX_CHANNELS {
            return Err(Error::Configuration(format!(
                "need between 1 and {MAX_CHANNELS} channels, got {}",
                channels.len()
            )));
        }
        let n = hamiltonian.dim();
        let tol = hamiltonian.tolerances().herm;
        let mut ops = vec![(hamiltonian.reconstruct(), hamiltonian.spectral_range())];
        for (a, ch) in channels.iter().enumerate() {
            if ch.observable.dim() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: ch.observable.dim(),
                });
            }
            if !(ch.sigma >= 0.0 && ch.sigma.is_finite()) {
                return Err(Error::Configuration(format!(
                    "channel {a}: sigma must be >= 0"
                )));
            }
            ops.push((ch.observable.reconstruct(), ch.observable.spectral_range()));
        }
        for i in 0..ops.len() {
            for j in (i + 1)..ops.len() {
                let norm = commutator_norm(&ops[i].0, &ops[j].0);
                let scale = (ops[i].1 * ops[j].1).max(1.0);
                if norm > tol * scale {
                    return Err(Error::Configuration(format!(
                        "operators {i} and {j} do not commute (|[A,B]| = {norm:.3e}); index 0 is the Hamiltonian"
                    )));
                }
            }
        }

        // Refine the Hamiltonian eigenbasis block by block until every
        // channel observable is diagonal in it.
        let mut frame = hamiltonian.basis().clone();
        let levels = hamiltonian.column_level();
        let generic = [
            1.0,
            0.414_213_562_373_095,
            0.141_592_653_589_793,
            0.718_281_828_459_045,
        ];
        for level in 0..hamiltonian.num_levels() {
            let cols: Vec<usize> = (0..n).filter(|&c| levels[c] == level).collect();
            if cols.len() < 2 {
                continue;
            }
            let block = CMatrix::from_fn(n, cols.len(), |r, c| frame[(r, cols[c])]);
            let restricted: Vec<CMatrix> = channels
                .iter()
                .map(|ch| block.adjoint() * ch.observable.reconstruct() * &block)
                .collect();
            let off_diagonal = restricted
                .iter()
                .map(|m| {
                    let mut worst = 0.0f64;
                    for r in 0..m.nrows() {
                        for c in 0..m.ncols() {
                            if r != c {
                                worst = worst.max(m[(r, c)].norm());
                            }
                        }
                    }
                    worst
                })
                .fold(0.0, f64::max);
            if off_diagonal <= tol {
                continue;
            }
            let mut combo = CMatrix::zeros(cols.len(), cols.len());
            for (a, (m, ch)) in restricted.iter().zip(channels).enumerate() {
                let w = generic[a % generic.len()] * (1.0 + a as f64)
                    / ch.observable.spectral_range().max(1e-300);
                combo += m.scale(w);
            }
            let (_, rotation) = hermitian_eigen(&combo)?;
            let rotated = &block * rotation;
            for (i, &c) in cols.iter().enumerate() {
                frame.set_column(c, &rotated.column(i));
            }
        }

        let mut frame_channels = Vec::with_capacity(channels.len());
        for (a, ch) in channels.iter().enumerate() {
            let op = ch.observable.reconstruct();
            let mut values = Vec::with_capacity(n);
            for k in 0..n {
                let col = frame.column(k).into_owned();
                let raw = col.dotc(&(&op * &col)).re;
                let residual = (&op * &col - col.scale(raw)).norm();
                if residual > tol.sqrt() * ch.observable.spectral_range().max(1.0) {
                    return Err(Error::Configuration(format!(
                        "channel {a} is not diagonal in the joint eigenbasis (residual {residual:.3e})"
                    )));
                }
                values.push(snap_to_level(raw, &ch.observable));
            }
            frame_channels.push(FrameChannel {
                values,
                sigma: ch.sigma,
                range: ch.observable.spectral_range(),
            });
        }

        // joint levels: distinct tuples of (H level, channel eigenvalues)
        let mut keys: Vec<Vec<f64>> = Vec::new();
        let mut joint_level = Vec::with_capacity(n);
        for k in 0..n {
            let mut key = vec![levels[k] as f64];
            key.extend(frame_channels.iter().map(|c| c.values[k]));
            let id = match keys.iter().position(|x| *x == key) {
                Some(id) => id,
                None => {
                    keys.push(key);
                    keys.len() - 1
                }
            };
            joint_level.push(id);
        }

        Ok(Self {
            hamiltonian: hamiltonian.clone(),
            frame,
            energies: hamiltonian.column_eigenvalues(),
            channels: frame_channels,
            joint_level,
            num_joint_levels: keys.len(),
        })
    }

    pub fn dim(&self) -> usize {
        self.frame.nrows()
    }

    pub fn hamiltonian(&self) -> &SpectralDecomposition {
        &self.hamiltonian
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// Number of joint eigenspaces the dynamics can reduce to.
    pub fn num_reduction_levels(&self) -> usize {
        self.num_joint_levels
    }

    /// Joint eigenspace index of each frame column.
    pub fn reduction_level_of_columns(&self) -> &[usize] {
        &self.joint_level
    }

    /// Hamiltonian eigenvalue of each reduction level.
    pub fn reduction_level_energies(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.num_joint_levels];
        for (k, &l) in self.joint_level.iter().enumerate() {
            out[l] = self.energies[k];
        }
        out
    }

    /// Dimension of each reduction level.
    pub fn reduction_level_multiplicities(&self) -> Vec<usize> {
        let mut out = vec![0; self.num_joint_levels];
        for &l in &self.joint_level {
            out[l] += 1;
        }
        out
    }

    pub fn sigma(&self, channel: usize) -> f64 {
        self.channels[channel].sigma
    }

    /// Frame basis (columns are joint eigenvectors).
    pub fn frame(&self) -> &CMatrix {
        &self.frame
    }

    pub fn to_frame(&self, state: &StateVector) -> CVector {
        self.frame.adjoint() * state.amplitudes()
    }

    pub fn from_frame(&self, coords: &CVector) -> StateVector {
        StateVector::from_vector_unchecked(&self.frame * coords)
    }

    /// One renormalized Euler–Maruyama step in frame coordinates.
    /// Returns the pre-renormalization norm error, or NaN on blow-up.
    fn step_frame(&self, coords: &mut [Complex64], dt: f64, dws: &[f64]) -> f64 {
        let r = self.channels.len();
        let mut means = [0.0f64; MAX_CHANNELS];
        for (a, ch) in self.channels.iter().enumerate() {
            means[a] = coords
                .iter()
                .zip(&ch.values)
                .map(|(c, f)| c.norm_sqr() * f)
                .sum();
        }
        let mut norm_sq = 0.0;
        for (k, c) in coords.iter_mut().enumerate() {
            let mut re = 1.0;
            for a in 0..r {
                let ch = &self.channels[a];
                let d = ch.values[k] - means[a];
                re += -0.125 * ch.sigma * ch.sigma * d * d * dt + 0.5 * ch.sigma * d * dws[a];
            }
            *c *= Complex64::new(re, -self.energies[k] * dt);
            norm_sq += c.norm_sqr();
        }
        let norm = norm_sq.sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return f64::NAN;
        }
        let inv = 1.0 / norm;
        for c in coords.iter_mut() {
            *c *= inv;
        }
        (norm - 1.0).abs()
    }

    /// One step on a computational-basis state with explicit Wiener increments.
    pub fn step(&self, state: &StateVector, dt: f64, dws: &[f64]) -> Result<(StateVector, f64)> {
        if dws.len() != self.channels.len() {
            return Err(Error::InvalidInput(format!(
                "{} Wiener increments for {} channels",
                dws.len(),
                self.channels.len()
            )));
        }
        if dws.iter().any(|w| !w.is_finite()) || !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidInput(
                "dt and dW must be finite, dt > 0".into(),
            ));
        }
        if state.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: state.dim(),
            });
        }
        state.ensure_normalized(self.hamiltonian.tolerances().norm)?;
        let mut coords = self.to_frame(state);
        let err = self.step_frame(coords.as_mut_slice(), dt, dws);
        if err.is_nan() {
            return Err(Error::NumericBlowup { step: 1 });
        }
        Ok((self.from_frame(&coords), err))
    }

    /// Integrates along a prescribed sequence of increments (`num_channels`
    /// values per step) without collapse detection.
    pub fn integrate_increments(
        &self,
        psi0: &StateVector,
        dt: f64,
        increments: &[f64],
    ) -> Result<StateVector> {
        let r = self.channels.len();
        if increments.len() % r != 0 {
            return Err(Error::InvalidInput(
                "increment count is not a multiple of the channel count".into(),
            ));
        }
        let mut coords = self.to_frame(psi0);
        for (step, dws) in increments.chunks(r).enumerate() {
            if self.step_frame(coords.as_mut_slice(), dt, dws).is_nan() {
                return Err(Error::NumericBlowup { step: step + 1 });
            }
        }
        Ok(self.from_frame(&coords))
    }

    /// Like [`Self::integrate_increments`], also returning `H` at every step
    /// boundary (`n_steps + 1` values).
    pub fn energy_path(
        &self,
        psi0: &StateVector,
        dt: f64,
        increments: &[f64],
    ) -> Result<(StateVector, Vec<f64>)> {
        let r = self.channels.len();
        if increments.len() % r != 0 {
            return Err(Error::InvalidInput(
                "increment count is not a multiple of the channel count".into(),
            ));
        }
        let mut coords = self.to_frame(psi0);
        let mut energies = Vec::with_capacity(increments.len() / r + 1);
        energies.push(self.frame_energy(coords.as_slice()).0);
        for (step, dws) in increments.chunks(r).enumerate() {
            if self.step_frame(coords.as_mut_slice(), dt, dws).is_nan() {
                return Err(Error::NumericBlowup { step: step + 1 });
            }
            energies.push(self.frame_energy(coords.as_slice()).0);
        }
        Ok((self.from_frame(&coords), energies))
    }

    fn frame_energy(&self, coords: &[Complex64]) -> (f64, f64, f64) {
        let h: f64 = coords
            .iter()
            .zip(&self.energies)
            .map(|(c, e)| c.norm_sqr() * e)
            .sum();
        let (mut v, mut beta) = (0.0, 0.0);
        for (c, e) in coords.iter().zip(&self.energies) {
            let p = c.norm_sqr();
            let d = e - h;
            v += p * d * d;
            beta += p * d * d * d;
        }
        (h, v, beta)
    }

    /// Sum over channels of `Var(F_a) / range_a^2`; zero exactly on joint eigenstates.
    fn collapse_metric(&self, coords: &[Complex64]) -> f64 {
        let mut total = 0.0;
        for ch in &self.channels {
            if ch.range <= 0.0 {
                continue;
            }
            let mean: f64 = coords
                .iter()
                .zip(&ch.values)
                .map(|(c, f)| c.norm_sqr() * f)
                .sum();
            let var: f64 = coords
                .iter()
                .zip(&ch.values)
                .map(|(c, f)| c.norm_sqr() * (f - mean) * (f - mean))
                .sum();
            total += var / (ch.range * ch.range);
        }
        total
    }

    /// Reduction rate `sum_a sigma_a^2 Var_rho(F_a)` of a density matrix.
    fn reduction_rate(&self, rho: &DensityMatrix) -> f64 {
        let m = self.frame.adjoint() * rho.matrix() * &self.frame;
        let diag: Vec<f64> = (0..self.dim()).map(|k| m[(k, k)].re).collect();
        self.channels
            .iter()
            .map(|ch| {
                let mean: f64 = diag.iter().zip(&ch.values).map(|(p, f)| p * f).sum();
                let var: f64 = diag
                    .iter()
                    .zip(&ch.values)
                    .map(|(p, f)| p * (f - mean).powi(2))
                    .sum();
                ch.sigma * ch.sigma * var
            })
            .sum()
    }

    fn joint_probabilities(&self, coords: &[Complex64], out: &mut [f64]) {
        out.iter_mut().for_each(|p| *p = 0.0);
        for (c, &l) in coords.iter().zip(&self.joint_level) {
            out[l] += c.norm_sqr();
        }
    }
}

/// Single renormalized Euler–Maruyama step of the energy-based equation.
pub fn em_step(
    state: &StateVector,
    dec: &SpectralDecomposition,
    sigma: f64,
    dt: f64,
    dw: f64,
) -> Result<(StateVector, f64)> {
    ReductionModel::energy(dec, sigma)?.step(state, dt, &[dw])
}

/// Single step of the multi-channel equation; validates commutation first.
pub fn em_step_multi(
    state: &StateVector,
    hamiltonian: &SpectralDecomposition,
    channels: &[Channel],
    dt: f64,
    dws: &[f64],
) -> Result<(StateVector, f64)> {
    ReductionModel::multi(hamiltonian, channels)?.step(state, dt, dws)
}

/// Run parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Coupling constant of the energy channel.
    pub sigma: f64,
    /// Time step; `None` means `tau_R / 1000`.
    pub dt: Option<f64>,
    /// Horizon in units of the reduction time `tau_R = 1 / (sigma^2 V_0)`.
    pub horizon_tau: f64,
    /// Absolute horizon; overrides `horizon_tau` when set.
    pub horizon_time: Option<f64>,
    /// Stop once `V_t < collapse_threshold * spectral_range^2`.
    pub collapse_threshold: f64,
    pub record_stride: usize,
    pub seed: u64,
    /// Keep the full state at every recorded time.
    pub record_states: bool,
    /// Keep per-step Wiener increments and norm errors.
    pub record_steps: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            dt: None,
            horizon_tau: 20.0,
            horizon_time: None,
            collapse_threshold: 1e-12,
            record_stride: 1,
            seed: 0,
            record_states: false,
            record_steps: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Configuration(format!(
                "sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(Error::Configuration(format!("dt must be > 0, got {dt}")));
            }
        }
        match self.horizon_time {
            Some(h) if !(h > 0.0 && h.is_finite()) => {
                return Err(Error::Configuration(format!(
                    "horizon_time must be > 0, got {h}"
                )))
            }
            None if !(self.horizon_tau >= 1.0 && self.horizon_tau.is_finite()) => {
                return Err(Error::Configuration(format!(
                    "horizon_tau must be >= 1, got {}",
                    self.horizon_tau
                )))
            }
            _ => {}
        }
        if !(self.collapse_threshold > 0.0) {
            return Err(Error::Configuration(
                "collapse_threshold must be > 0".into(),
            ));
        }
        if self.record_stride == 0 {
            return Err(Error::Configuration("record_stride must be >= 1".into()));
        }
        Ok(())
    }
}

/// Step size, step count and reduction time after resolving defaults.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedRun {
    pub dt: f64,
    pub n_steps: usize,
    pub tau_r: f64,
    pub horizon: f64,
    pub record_stride: usize,
}

impl ResolvedRun {
    pub fn grid_len(&self) -> usize {
        self.n_steps / self.record_stride + 1
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..self.grid_len())
            .map(|j| (j * self.record_stride) as f64 * self.dt)
            .collect()
    }
}

/// One instrumented realization.
///
/// Series are sampled on the common grid `j * record_stride * dt`. After
/// collapse the process is stopped: scalar series hold their terminal values
/// and recorded states only rotate by the free phase `exp(-i E t)`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub index: usize,
    pub times: Vec<f64>,
    pub states: Option<Vec<StateVector>>,
    pub h: Vec<f64>,
    pub v: Vec<f64>,
    pub beta: Vec<f64>,
    /// Reduction-level weights `P_nt`, one vector per recorded time.
    pub level_probs: Vec<Vec<f64>>,
    /// Reduction levels whose complement expectation is tracked.
    pub monitored_levels: Vec<usize>,
    /// `Pi_nt` for each monitored level, one vector per recorded time.
    pub complement: Vec<Vec<f64>>,
    /// `sigma^2 int_0^t V_u^2 du` (trapezoidal over every step).
    pub z: Vec<f64>,
    /// `W*_t = W_t + sigma int_0^t H_s ds` (trapezoidal over every step).
    pub wstar: Vec<f64>,
    /// Largest pre-renormalization norm error since the previous record.
    pub norm_err: Vec<f64>,
    /// Per-step Wiener increments (all channels interleaved) when requested.
    pub noise: Option<Vec<f64>>,
    /// Per-step norm errors when requested.
    pub step_norm_err: Option<Vec<f64>>,
    pub initial_state: StateVector,
    pub terminal_state: StateVector,
    pub terminal_level: Option<usize>,
    pub terminal_time: Option<f64>,
    pub h0: f64,
    pub v0: f64,
    /// `sup_t (H_t - H_0)^2` over every integration step.
    pub sup_dev_sq: f64,
    /// `sup_t V_t` over every integration step.
    pub sup_v: f64,
    pub max_norm_error: f64,
    /// Pathwise maximum of any monitored `Pi_nt` (diagnostic).
    pub max_complement: f64,
    pub steps_taken: usize,
}

/// Simulates an ensemble member-by-member from one model, config and initial condition.
#[derive(Debug, Clone)]
pub struct Simulator {
    model: ReductionModel,
    config: SimConfig,
    init: InitialCondition,
    run: ResolvedRun,
}

impl Simulator {
    pub fn new(model: ReductionModel, config: SimConfig, init: InitialCondition) -> Result<Self> {
        config.validate()?;
        if init.dim() != model.dim() {
            return Err(Error::DimensionMismatch {
                expected: model.dim(),
                found: init.dim(),
            });
        }
        let rate = model.reduction_rate(&init.density());
        let tau_r = 1.0 / rate;
        // eigenstate ensembles have no natural time-scale; fall back to the widest spread
        let reference_tau = if rate > 0.0 {
            tau_r
        } else {
            let spread: f64 = model
                .channels
                .iter()
                .map(|c| c.sigma * c.sigma * 0.25 * c.range * c.range)
                .sum();
            if spread > 0.0 {
                1.0 / spread
            } else {
                1.0
            }
        };
        let dt = config.dt.unwrap_or(reference_tau / 1000.0);
        if dt > 0.01 * reference_tau {
            log::warn!("dt = {dt} exceeds 0.01 tau_R = {}", 0.01 * reference_tau);
        }
        let horizon = config
            .horizon_time
            .unwrap_or(config.horizon_tau * reference_tau);
        let n_steps = (horizon / dt - 1e-9).ceil().max(1.0) as usize;
        let run = ResolvedRun {
            dt,
            n_steps,
            tau_r,
            horizon,
            record_stride: config.record_stride,
        };
        Ok(Self {
            model,
            config,
            init,
            run,
        })
    }

    /// Energy-based simulator.
    pub fn energy(
        dec: &SpectralDecomposition,
        config: SimConfig,
        init: InitialCondition,
    ) -> Result<Self> {
        let model = ReductionModel::energy(dec, config.sigma)?;
        Self::new(model, config, init)
    }

    pub fn model(&self) -> &ReductionModel {
        &self.model
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn initial(&self) -> &InitialCondition {
        &self.init
    }

    pub fn resolved(&self) -> &ResolvedRun {
        &self.run
    }

    /// Runs trajectory `index`, drawing from `rng::stream(seed, index)`.
    pub fn run(&self, index: usize) -> Result<Trajectory> {
        let mut stream = rng::stream(self.config.seed, index as u64);
        let psi0 = sample_initial(&self.init, &mut stream);
        self.run_from(index, psi0, &mut stream)
    }

    fn run_from<R: Rng>(
        &self,
        index: usize,
        psi0: StateVector,
        stream: &mut R,
    ) -> Result<Trajectory> {
        let model = &self.model;
        let run = &self.run;
        let dt = run.dt;
        let sqrt_dt = dt.sqrt();
        let r = model.channels.len();
        let n_levels = model.num_joint_levels;
        let tol = *model.hamiltonian.tolerances();
        let threshold = self.config.collapse_threshold;
        let sigma = model.channels[0].sigma;

        let mut coords = model.to_frame(&psi0);
        let mut probs = vec![0.0; n_levels];
        model.joint_probabilities(coords.as_slice(), &mut probs);

        // Lüders directions of the initial state inside degenerate reduction levels
        let mut luders: Vec<(usize, CVector)> = Vec::new();
        for level in 0..n_levels {
            let cols: Vec<usize> = (0..model.dim())
                .filter(|&k| model.joint_level[k] == level)
                .collect();
            if cols.len() > 1 && probs[level] > tol.prob {
                let mut v = CVector::zeros(model.dim());
                for &k in &cols {
                    v[k] = coords[k];
                }
                v.unscale_mut(probs[level].sqrt());
                luders.push((level, v));
            }
        }
        let complement = |coords: &CVector, probs: &[f64]| -> Vec<f64> {
            luders
                .iter()
                .map(|(level, l)| (probs[*level] - l.dotc(coords).norm_sqr()).max(0.0))
                .collect()
        };

        let grid_len = run.grid_len();
        let mut traj = Trajectory {
            index,
            times: Vec::with_capacity(grid_len),
            states: self
                .config
                .record_states
                .then(|| Vec::with_capacity(grid_len)),
            h: Vec::with_capacity(grid_len),
            v: Vec::with_capacity(grid_len),
            beta: Vec::with_capacity(grid_len),
            level_probs: Vec::with_capacity(grid_len),
            monitored_levels: luders.iter().map(|(l, _)| *l).collect(),
            complement: Vec::with_capacity(grid_len),
            z: Vec::with_capacity(grid_len),
            wstar: Vec::with_capacity(grid_len),
            norm_err: Vec::with_capacity(grid_len),
            noise: self.config.record_steps.then(Vec::new),
            step_norm_err: self.config.record_steps.then(Vec::new),
            initial_state: psi0,
            terminal_state: StateVector::basis(1, 0),
            terminal_level: None,
            terminal_time: None,
            h0: 0.0,
            v0: 0.0,
            sup_dev_sq: 0.0,
            sup_v: 0.0,
            max_norm_error: 0.0,
            max_complement: 0.0,
            steps_taken: 0,
        };

        let (mut h, mut v, mut beta) = model.frame_energy(coords.as_slice());
        traj.h0 = h;
        traj.v0 = v;
        traj.sup_v = v;
        let (mut z, mut wstar) = (0.0, 0.0);
        let mut norm_since_record = 0.0f64;
        let mut terminated_at: Option<usize> = None;
        if model.collapse_metric(coords.as_slice()) < threshold {
            terminated_at = Some(0);
        }

        let record = |traj: &mut Trajectory,
                      coords: &CVector,
                      probs: &[f64],
                      t: f64,
                      h,
                      v,
                      beta,
                      z,
                      wstar,
                      ne| {
            traj.times.push(t);
            traj.h.push(h);
            traj.v.push(v);
            traj.beta.push(beta);
            traj.level_probs.push(probs.to_vec());
            let pi = complement(coords, probs);
            traj.max_complement = pi.iter().copied().fold(traj.max_complement, f64::max);
            traj.complement.push(pi);
            traj.z.push(z);
            traj.wstar.push(wstar);
            traj.norm_err.push(ne);
            if let Some(states) = traj.states.as_mut() {
                states.push(model.from_frame(coords));
            }
        };
        record(&mut traj, &coords, &probs, 0.0, h, v, beta, z, wstar, 0.0);

        let mut dws = [0.0f64; MAX_CHANNELS];
        let mut step = 0usize;
        while terminated_at.is_none() && step < run.n_steps {
            step += 1;
            for dw in dws.iter_mut().take(r) {
                *dw = stream.sample::<f64, _>(StandardNormal) * sqrt_dt;
            }
            let (h_prev, v_prev) = (h, v);
            let err = model.step_frame(coords.as_mut_slice(), dt, &dws[..r]);
            if err.is_nan() {
                return Err(Error::NumericBlowup { step });
            }
            (h, v, beta) = model.frame_energy(coords.as_slice());
            wstar += dws[0] + sigma * 0.5 * (h_prev + h) * dt;
            z += sigma * sigma * 0.5 * (v_prev * v_prev + v * v) * dt;
            traj.sup_dev_sq = traj.sup_dev_sq.max((h - traj.h0) * (h - traj.h0));
            traj.sup_v = traj.sup_v.max(v);
            traj.max_norm_error = traj.max_norm_error.max(err);
            norm_since_record = norm_since_record.max(err);
            if let Some(noise) = traj.noise.as_mut() {
                noise.extend_from_slice(&dws[..r]);
            }
            if let Some(errs) = traj.step_norm_err.as_mut() {
                errs.push(err);
            }
            if model.collapse_metric(coords.as_slice()) < threshold {
                terminated_at = Some(step);
            }
            if step % run.record_stride == 0 {
                model.joint_probabilities(coords.as_slice(), &mut probs);
                record(
                    &mut traj,
                    &coords,
                    &probs,
                    step as f64 * dt,
                    h,
                    v,
                    beta,
                    z,
                    wstar,
                    norm_since_record,
                );
                norm_since_record = 0.0;
            }
        }
        traj.steps_taken = step;

        // stopped process: hold scalars, rotate phases of the recorded state
        model.joint_probabilities(coords.as_slice(), &mut probs);
        let stop_time = step as f64 * dt;
        let pi = complement(&coords, &probs);
        while traj.times.len() < grid_len {
            let t = (traj.times.len() * run.record_stride) as f64 * dt;
            traj.times.push(t);
            traj.h.push(h);
            traj.v.push(v);
            traj.beta.push(beta);
            traj.level_probs.push(probs.clone());
            traj.complement.push(pi.clone());
            traj.z.push(z);
            traj.wstar.push(wstar);
            traj.norm_err.push(0.0);
            if let Some(states) = traj.states.as_mut() {
                let elapsed = t - stop_time;
                let rotated = CVector::from_iterator(
                    model.dim(),
                    coords
                        .iter()
                        .zip(&model.energies)
                        .map(|(c, e)| c * Complex64::from_polar(1.0, -e * elapsed)),
                );
                states.push(model.from_frame(&rotated));
            }
        }

        if let Some(s) = terminated_at {
            traj.terminal_time = Some(s as f64 * dt);
            traj.terminal_level = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i);
        }
        traj.terminal_state = model.from_frame(&coords);
        Ok(traj)
    }
}

/// Integrates one energy-based trajectory (index 0 of `config.seed`).
pub fn simulate(
    config: &SimConfig,
    init: &InitialCondition,
    dec: &SpectralDecomposition,
) -> Result<Trajectory> {
    Simulator::energy(dec, config.clone(), init.clone())?.run(0)
}

/// Sums consecutive groups of `factor` increments: the coarse path of a
/// fine Brownian path.
pub fn coarsen_increments(fine: &[f64], factor: usize) -> Vec<f64> {
    fine.chunks(factor).map(|c| c.iter().sum()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::{random_state, Fixture};
    use crate::hilbert::{
        level_probabilities, luders_state, spectral_decompose, HermitianObservable,
    };
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn qubit() -> (SpectralDecomposition, StateVector) {
        let f = Fixture::builtin("qubit").unwrap();
        (f.decomposition, f.initial.as_pure().unwrap().clone())
    }

    fn spin_pair() -> (SpectralDecomposition, StateVector) {
        let f = Fixture::builtin("spin-pair").unwrap();
        (f.decomposition, f.initial.as_pure().unwrap().clone())
    }

    #[test]
    fn eigenstate_step_is_pure_phase() {
        let (dec, _) = spin_pair();
        let psi = StateVector::basis(4, 3);
        let dt = 1e-3;
        let (out, err) = em_step(&psi, &dec, 1.0, dt, 0.7).unwrap();
        assert_relative_eq!(out.fidelity(&psi), 1.0, epsilon = 1e-14);
        let expected_phase = -dt.atan(); // arg(1 - i E dt) with E = 1
        assert_relative_eq!(out.amplitudes()[3].arg(), expected_phase, epsilon = 1e-14);
        // |1 - i dt| - 1 ~ dt^2 / 2
        assert!(err < dt * dt);
    }

    #[test]
    fn deterministic_limit_is_schrodinger_step() {
        let (dec, psi) = qubit();
        let dt = 1e-3;
        let (out, _) = em_step(&psi, &dec, 0.0, dt, 0.0).unwrap();
        let h = dec.reconstruct();
        let raw = psi.amplitudes() - (&h * psi.amplitudes()) * Complex64::new(0.0, dt);
        let expected = StateVector::normalized(raw).unwrap();
        assert!((out.amplitudes() - expected.amplitudes()).norm() < 1e-15);
    }

    #[test]
    fn energy_drift_vanishes_to_second_order() {
        // Averaging over dW = +-sqrt(dt) reproduces E[dW] = 0 and E[dW^2] = dt,
        // so the mean one-step change of H is O(dt^2).
        let (dec, psi) = qubit();
        let obs = dec.observable();
        let h0 = obs.expectation(&psi);
        let mean_change = |dt: f64| {
            let up = em_step(&psi, &dec, 1.0, dt, dt.sqrt()).unwrap().0;
            let down = em_step(&psi, &dec, 1.0, dt, -dt.sqrt()).unwrap().0;
            0.5 * (obs.expectation(&up) + obs.expectation(&down)) - h0
        };
        let changes: Vec<f64> = [1e-2, 5e-3, 2.5e-3, 1e-4]
            .iter()
            .map(|&dt| mean_change(dt).abs())
            .collect();
        assert!(changes[3] < 1e-7, "{changes:?}");
        assert_relative_eq!(changes[0] / changes[1], 4.0, epsilon = 0.2);
        assert_relative_eq!(changes[1] / changes[2], 4.0, epsilon = 0.2);
    }

    #[test]
    fn noiseless_step_carries_the_ito_correction() {
        // with dW = 0 the step drifts H by -sigma^2 beta dt / 4
        let (dec, psi) = qubit();
        let obs = dec.observable();
        let m = crate::hilbert::moments(&psi, &dec, 3).unwrap();
        let dt = 1e-5;
        let (out, _) = em_step(&psi, &dec, 1.0, dt, 0.0).unwrap();
        let change = obs.expectation(&out) - m.h;
        assert_relative_eq!(change / dt, -0.25 * m.beta, max_relative = 1e-3);
    }

    #[test]
    fn step_rejects_bad_input() {
        let (dec, _) = qubit();
        let bad = StateVector::from_real(&[1.0, 1.0]).unwrap();
        assert!(matches!(
            em_step(&bad, &dec, 1.0, 1e-3, 0.0),
            Err(Error::NotNormalized { .. })
        ));
        let psi = StateVector::basis(2, 0);
        assert!(em_step(&psi, &dec, 1.0, 1e-3, f64::NAN).is_err());
        assert!(matches!(
            em_step(&StateVector::basis(3, 0), &dec, 1.0, 1e-3, 0.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn huge_increment_blows_up() {
        let (dec, psi) = qubit();
        let err = em_step(&psi, &dec, 1.0, 1e-3, f64::MAX).unwrap_err();
        assert!(matches!(err, Error::NumericBlowup { .. }));
    }

    #[test]
    fn single_channel_multi_step_is_bitwise_identical() {
        let (dec, psi) = spin_pair();
        let channels = [Channel {
            observable: dec.clone(),
            sigma: 1.3,
        }];
        for dw in [-0.05, 0.0, 0.031] {
            let (a, ea) = em_step(&psi, &dec, 1.3, 1e-3, dw).unwrap();
            let (b, eb) = em_step_multi(&psi, &dec, &channels, 1e-3, &[dw]).unwrap();
            assert_eq!(a, b);
            assert_eq!(ea.to_bits(), eb.to_bits());
        }
    }

    #[test]
    fn non_commuting_channels_are_rejected() {
        let (dec, _) = qubit();
        let mut x = CMatrix::zeros(2, 2);
        x[(0, 1)] = Complex64::new(1.0, 0.0);
        x[(1, 0)] = Complex64::new(1.0, 0.0);
        let xdec = spectral_decompose(&HermitianObservable::new(x, 1e-10).unwrap(), None).unwrap();
        let err = ReductionModel::multi(
            &dec,
            &[Channel {
                observable: xdec,
                sigma: 1.0,
            }],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Configuration(_)));
    }

    #[test]
    fn joint_frame_splits_hamiltonian_degeneracy() {
        // H degenerate on {1,2}; F splits it
        let (dec, psi) = spin_pair();
        let f = spectral_decompose(&HermitianObservable::diagonal(&[0.0, 1.0, 2.0, 3.0]), None)
            .unwrap();
        let model = ReductionModel::multi(
            &dec,
            &[Channel {
                observable: f,
                sigma: 1.0,
            }],
        )
        .unwrap();
        assert_eq!(model.num_reduction_levels(), 4);
        let (out, _) = model.step(&psi, 1e-3, &[0.01]).unwrap();
        assert_relative_eq!(out.norm(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn sample_initial_examples() {
        let mut stream = ChaCha8Rng::seed_from_u64(5);
        let e0 = StateVector::basis(2, 0);
        let e1 = StateVector::basis(2, 1);
        let pure = InitialCondition::Pure(e1.clone());
        for _ in 0..10 {
            assert_eq!(sample_initial(&pure, &mut stream), e1);
        }
        let certain =
            InitialCondition::mixture(vec![(1.0, e0.clone()), (0.0, e1.clone())]).unwrap();
        for _ in 0..1000 {
            assert_eq!(sample_initial(&certain, &mut stream), e0);
        }
        let half = InitialCondition::mixture(vec![(0.5, e0.clone()), (0.5, e1)]).unwrap();
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| sample_initial(&half, &mut stream) == e0)
            .count();
        let se = (0.25f64 / n as f64).sqrt();
        assert!((hits as f64 / n as f64 - 0.5).abs() <= 3.0 * se);
    }

    #[test]
    fn mixture_validation() {
        let e0 = StateVector::basis(2, 0);
        assert!(InitialCondition::mixture(vec![(0.7, e0.clone()), (0.7, e0.clone())]).is_err());
        assert!(InitialCondition::mixture(vec![(
            1.0,
            StateVector::from_real(&[1.0, 1.0]).unwrap()
        )])
        .is_err());
    }

    #[test]
    fn eigenstate_terminates_immediately() {
        let (dec, _) = spin_pair();
        let config = SimConfig::default();
        let traj = simulate(
            &config,
            &InitialCondition::Pure(StateVector::basis(4, 0)),
            &dec,
        )
        .unwrap();
        assert_eq!(traj.terminal_level, Some(0));
        assert_eq!(traj.terminal_time, Some(0.0));
        assert!(traj.v.iter().all(|&v| v == 0.0));
        assert_eq!(traj.steps_taken, 0);
    }

    #[test]
    fn qubit_collapses_within_horizon() {
        let (dec, psi) = qubit();
        let config = SimConfig {
            horizon_tau: 20.0,
            record_stride: 100,
            seed: 3,
            ..SimConfig::default()
        };
        let sim = Simulator::energy(&dec, config, InitialCondition::Pure(psi)).unwrap();
        let mut collapsed = 0;
        for i in 0..20 {
            let traj = sim.run(i).unwrap();
            assert_eq!(traj.times.len(), sim.resolved().grid_len());
            if let Some(level) = traj.terminal_level {
                collapsed += 1;
                assert!(level < 2);
                assert!(traj.v.last().unwrap() < &1e-12);
            }
            for (&h, &v) in traj.h.iter().zip(&traj.v) {
                assert!((-1e-12..=1.0 + 1e-12).contains(&h));
                assert!(v <= 0.25 + 1e-12);
            }
            for p in &traj.level_probs {
                assert_relative_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
            }
        }
        assert!(collapsed >= 18, "only {collapsed} of 20 collapsed");
    }

    #[test]
    fn degenerate_level_collapses_to_luders_state() {
        let (dec, psi) = spin_pair();
        let luders = luders_state(&psi, &dec, 1).unwrap();
        let config = SimConfig {
            horizon_tau: 200.0,
            record_stride: 1000,
            seed: 11,
            ..SimConfig::default()
        };
        let sim = Simulator::energy(&dec, config, InitialCondition::Pure(psi)).unwrap();
        let mut seen = 0;
        for i in 0..40 {
            let traj = sim.run(i).unwrap();
            assert!(traj.max_complement < 1e-12);
            if traj.terminal_level == Some(1) {
                seen += 1;
                assert!(traj.terminal_state.fidelity(&luders) >= 1.0 - 1e-6);
            }
        }
        assert!(seen > 5);
    }

    #[test]
    fn runs_are_reproducible_per_index() {
        let (dec, psi) = qubit();
        let config = SimConfig {
            record_stride: 50,
            seed: 99,
            record_steps: true,
            ..SimConfig::default()
        };
        let sim = Simulator::energy(&dec, config, InitialCondition::Pure(psi)).unwrap();
        let a = sim.run(4).unwrap();
        let b = sim.run(4).unwrap();
        assert_eq!(a.h, b.h);
        assert_eq!(a.noise, b.noise);
        assert_ne!(sim.run(5).unwrap().h, a.h);
    }

    #[test]
    fn recorded_noise_replays_the_trajectory() {
        let (dec, psi) = qubit();
        let config = SimConfig {
            horizon_tau: 1.0,
            record_stride: 1000,
            seed: 1,
            record_steps: true,
            ..SimConfig::default()
        };
        let sim = Simulator::energy(&dec, config, InitialCondition::Pure(psi.clone())).unwrap();
        let traj = sim.run(0).unwrap();
        let replay = sim
            .model()
            .integrate_increments(&psi, sim.resolved().dt, traj.noise.as_ref().unwrap())
            .unwrap();
        assert!((replay.amplitudes() - traj.terminal_state.amplitudes()).norm() < 1e-13);
    }

    #[test]
    fn config_validation() {
        let bad = [
            SimConfig {
                sigma: -1.0,
                ..SimConfig::default()
            },
            SimConfig {
                dt: Some(0.0),
                ..SimConfig::default()
            },
            SimConfig {
                horizon_tau: 0.5,
                ..SimConfig::default()
            },
            SimConfig {
                record_stride: 0,
                ..SimConfig::default()
            },
            SimConfig {
                collapse_threshold: 0.0,
                ..SimConfig::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Configuration(_))));
        }
        assert!(SimConfig::default().validate().is_ok());
    }

    #[test]
    fn default_step_resolves_reduction_time() {
        let (dec, psi) = qubit();
        let sim =
            Simulator::energy(&dec, SimConfig::default(), InitialCondition::Pure(psi)).unwrap();
        let run = sim.resolved();
        assert_relative_eq!(run.tau_r, 1.0 / 0.1875, epsilon = 1e-12);
        assert_relative_eq!(run.dt, run.tau_r / 1000.0, epsilon = 1e-15);
        assert_eq!(run.n_steps, 20_000);
    }

    #[test]
    fn random_states_keep_level_weights_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (dec, _) = spin_pair();
        for _ in 0..20 {
            let psi = random_state(4, &mut rng);
            let (out, _) = em_step(&psi, &dec, 1.0, 1e-3, 0.02).unwrap();
            let p = level_probabilities(&out, &dec).unwrap();
            assert_relative_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }
}
