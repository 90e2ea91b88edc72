//! Observable/state fixtures: the JSON fixture format, the built-in
//! `qubit` and `spin-pair` fixtures, and seeded random generators for tests.
//!
//! ```json
//! { "dimension": 2,
//!   "matrix": [[0,0],[0,0],[0,0],[1,0]],
//!   "state": [[0.5,0],[0.8660254037844386,0]] }
//! ```
//!
//! `matrix` is row-major `[re, im]` pairs. Instead of `matrix` a fixture may
//! give `spectral: { eigenvalues, projectors }`. Instead of `state` it may give
//! `mixture: [{ weight, state }, ...]`.

use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hilbert::{
    spectral_decompose, CMatrix, CVector, DensityMatrix, HermitianObservable,
    SpectralDecomposition, StateVector, Tolerances,
};
use crate::sde::InitialCondition;

pub type ComplexPair = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralData {
    pub eigenvalues: Vec<f64>,
    pub projectors: Vec<Vec<ComplexPair>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureMember {
    pub weight: f64,
    pub state: Vec<ComplexPair>,
}

/// On-disk fixture document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub dimension: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<ComplexPair>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectral: Option<SpectralData>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<Vec<ComplexPair>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture: Option<Vec<MixtureMember>>,
}

pub fn matrix_from_pairs(dim: usize, pairs: &[ComplexPair]) -> Result<CMatrix> {
    if pairs.len() != dim * dim {
        return Err(Error::InvalidInput(format!(
            "matrix has {} entries, expected {}",
            pairs.len(),
            dim * dim
        )));
    }
    Ok(DMatrix::from_row_iterator(
        dim,
        dim,
        pairs.iter().map(|p| Complex64::new(p[0], p[1])),
    ))
}

pub fn matrix_to_pairs(m: &CMatrix) -> Vec<ComplexPair> {
    let mut out = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push([m[(r, c)].re, m[(r, c)].im]);
        }
    }
    out
}

pub fn vector_from_pairs(dim: usize, pairs: &[ComplexPair]) -> Result<CVector> {
    if pairs.len() != dim {
        return Err(Error::InvalidInput(format!(
            "state has {} amplitudes, expected {dim}",
            pairs.len()
        )));
    }
    Ok(CVector::from_iterator(
        dim,
        pairs.iter().map(|p| Complex64::new(p[0], p[1])),
    ))
}

pub fn vector_to_pairs(v: &CVector) -> Vec<ComplexPair> {
    v.iter().map(|a| [a.re, a.im]).collect()
}

/// A validated fixture: decomposed observable plus initial condition.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub name: String,
    pub file: FixtureFile,
    pub decomposition: SpectralDecomposition,
    pub initial: InitialCondition,
}

impl Fixture {
    pub fn from_file(file: FixtureFile) -> Result<Self> {
        let tol = Tolerances::default();
        let dim = file.dimension;
        if dim == 0 {
            return Err(Error::InvalidInput("fixture dimension must be >= 1".into()));
        }
        let decomposition = match (&file.matrix, &file.spectral) {
            (Some(m), None) => {
                let obs = HermitianObservable::new(matrix_from_pairs(dim, m)?, tol.herm)?;
                spectral_decompose(&obs, None)?
            }
            (None, Some(s)) => {
                let projectors = s
                    .projectors
                    .iter()
                    .map(|p| matrix_from_pairs(dim, p))
                    .collect::<Result<Vec<_>>>()?;
                SpectralDecomposition::from_spectral(&s.eigenvalues, projectors, tol)?
            }
            _ => {
                return Err(Error::InvalidInput(
                    "fixture needs exactly one of `matrix` or `spectral`".into(),
                ))
            }
        };
        let initial = match (&file.state, &file.mixture) {
            (Some(s), None) => {
                let state = StateVector::new(vector_from_pairs(dim, s)?)?;
                state.ensure_normalized(tol.norm)?;
                InitialCondition::Pure(state)
            }
            (None, Some(members)) => {
                let members = members
                    .iter()
                    .map(|m| {
                        Ok((
                            m.weight,
                            StateVector::new(vector_from_pairs(dim, &m.state)?)?,
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?;
                InitialCondition::mixture(members)?
            }
            _ => {
                return Err(Error::InvalidInput(
                    "fixture needs exactly one of `state` or `mixture`".into(),
                ))
            }
        };
        Ok(Self {
            name: file.name.clone().unwrap_or_else(|| "custom".into()),
            file,
            decomposition,
            initial,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut fixture = Self::from_json(&text)?;
        if fixture.file.name.is_none() {
            fixture.name = path.display().to_string();
        }
        Ok(fixture)
    }

    /// `qubit`, `spin-pair` or `spin-pair-mixture`.
    pub fn builtin(name: &str) -> Option<Self> {
        let file = match name {
            "qubit" => qubit_file(),
            "spin-pair" => spin_pair_file(),
            "spin-pair-mixture" => spin_pair_mixture_file(),
            _ => return None,
        };
        Some(Self::from_file(file).expect("built-in fixtures are valid"))
    }

    /// Built-in name, or else a path to a fixture file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        let path = Path::new(name_or_path);
        if !path.exists() {
            if let Some(f) = Self::builtin(name_or_path) {
                return Ok(f);
            }
        }
        Self::load(path)
    }

    /// SHA-256 of the canonical JSON encoding of the fixture document.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.file).expect("fixture serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn initial_density(&self) -> DensityMatrix {
        self.initial.density()
    }
}

fn real_pairs(xs: &[f64]) -> Vec<ComplexPair> {
    xs.iter().map(|&x| [x, 0.0]).collect()
}

fn diagonal_pairs(diag: &[f64]) -> Vec<ComplexPair> {
    let n = diag.len();
    let mut out = vec![[0.0, 0.0]; n * n];
    for (i, &d) in diag.iter().enumerate() {
        out[i * n + i] = [d, 0.0];
    }
    out
}

/// `diag(0, 1)` with state `(sqrt(0.25), sqrt(0.75))`.
pub fn qubit_file() -> FixtureFile {
    FixtureFile {
        name: Some("qubit".into()),
        dimension: 2,
        matrix: Some(diagonal_pairs(&[0.0, 1.0])),
        spectral: None,
        state: Some(real_pairs(&[0.25f64.sqrt(), 0.75f64.sqrt()])),
        mixture: None,
    }
}

/// Two non-interacting spin-1/2 particles in a field: `diag(-1, 0, 0, 1)`
/// with the uniform superposition as initial state.
pub fn spin_pair_file() -> FixtureFile {
    FixtureFile {
        name: Some("spin-pair".into()),
        dimension: 4,
        matrix: Some(diagonal_pairs(&[-1.0, 0.0, 0.0, 1.0])),
        spectral: None,
        state: Some(real_pairs(&[0.5; 4])),
        mixture: None,
    }
}

/// Rank-2 mixture on the spin-pair spectrum: the two members overlap the
/// degenerate level in different directions so the conditional state there is mixed.
pub fn spin_pair_mixture_file() -> FixtureFile {
    let a = [0.5, 0.5, 0.5, 0.5];
    let s = 1.0 / 3.0f64.sqrt();
    let b = [s, s, 0.0, -s];
    FixtureFile {
        name: Some("spin-pair-mixture".into()),
        dimension: 4,
        matrix: Some(diagonal_pairs(&[-1.0, 0.0, 0.0, 1.0])),
        spectral: None,
        state: None,
        mixture: Some(vec![
            MixtureMember {
                weight: 0.6,
                state: real_pairs(&a),
            },
            MixtureMember {
                weight: 0.4,
                state: real_pairs(&b),
            },
        ]),
    }
}

fn gaussian_complex<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
}

/// Random Hermitian matrix from the Gaussian unitary ensemble, scaled so its
/// entries are O(1).
pub fn random_hermitian<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> HermitianObservable {
    let a = CMatrix::from_fn(dim, dim, |_, _| gaussian_complex(rng));
    let h = (&a + a.adjoint()).scale(0.5 / (dim as f64).sqrt());
    HermitianObservable::from_matrix_unchecked(h)
}

/// Haar-random pure state.
pub fn random_state<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> StateVector {
    let v = CVector::from_fn(dim, |_, _| gaussian_complex(rng));
    StateVector::normalized(v).expect("gaussian vector is nonzero")
}

/// Random density matrix of the given rank.
pub fn random_density<R: Rng + ?Sized>(dim: usize, rank: usize, rng: &mut R) -> DensityMatrix {
    let mut weights: Vec<f64> = (0..rank).map(|_| rng.random::<f64>() + 0.1).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let members: Vec<(f64, StateVector)> = weights
        .into_iter()
        .map(|w| (w, random_state(dim, rng)))
        .collect();
    DensityMatrix::from_mixture(&members, &Tolerances::default()).expect("valid mixture")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse() {
        let q = Fixture::builtin("qubit").unwrap();
        assert_eq!(q.decomposition.eigenvalues(), vec![0.0, 1.0]);
        let s = Fixture::builtin("spin-pair").unwrap();
        assert_eq!(s.decomposition.multiplicities(), vec![1, 2, 1]);
        assert!(Fixture::builtin("nope").is_none());
        Fixture::from_file(spin_pair_mixture_file()).unwrap();
    }

    #[test]
    fn json_roundtrip_and_hash_is_stable() {
        let q = Fixture::builtin("qubit").unwrap();
        let text = serde_json::to_string(&q.file).unwrap();
        let back = Fixture::from_json(&text).unwrap();
        assert_eq!(back.hash(), q.hash());
        assert_ne!(q.hash(), Fixture::builtin("spin-pair").unwrap().hash());
    }

    #[test]
    fn spectral_form_is_accepted() {
        let text = r#"{
            "dimension": 2,
            "spectral": {
                "eigenvalues": [1.0, 0.0],
                "projectors": [[[0,0],[0,0],[0,0],[1,0]], [[1,0],[0,0],[0,0],[0,0]]]
            },
            "state": [[0.6,0],[0,0.8]]
        }"#;
        let f = Fixture::from_json(text).unwrap();
        assert_eq!(f.decomposition.eigenvalues(), vec![0.0, 1.0]);
    }

    #[test]
    fn malformed_fixtures_are_rejected() {
        let both = r#"{"dimension": 1, "matrix": [[1,0]], "state": [[1,0]],
                       "mixture": [{"weight": 1, "state": [[1,0]]}]}"#;
        assert!(Fixture::from_json(both).is_err());
        let unnormalized = r#"{"dimension": 1, "matrix": [[1,0]], "state": [[2,0]]}"#;
        assert!(matches!(
            Fixture::from_json(unnormalized),
            Err(Error::NotNormalized { .. })
        ));
        let short = r#"{"dimension": 2, "matrix": [[1,0]], "state": [[1,0],[0,0]]}"#;
        assert!(Fixture::from_json(short).is_err());
        assert!(matches!(
            Fixture::resolve("/no/such/fixture.json"),
            Err(Error::Io { .. })
        ));
    }
}
