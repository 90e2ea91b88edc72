use collapse_core::fixture::{random_density, random_hermitian, random_state};
use collapse_core::hilbert::{
    level_probabilities, luders_state, max_abs, moments, orthogonal_luders_complement,
    spectral_decompose, CMatrix, HermitianObservable, SpectralDecomposition,
};
use collapse_core::lindblad::{max_element_distance, rho_closed_form, BlockDecomposedDensity};
use collapse_core::rng::stream;
use num_complex::Complex64;
use proptest::prelude::*;

/// `U diag(levels) U^dagger` with `U` the eigenbasis of a random Hermitian
/// matrix and eigenvalues drawn from `distinct` integer values, so that
/// degeneracies are exact.
fn degenerate_observable(dim: usize, distinct: usize, seed: u64) -> SpectralDecomposition {
    let mut rng = stream(seed, 0);
    let u = spectral_decompose(&random_hermitian(dim, &mut rng), None)
        .unwrap()
        .basis()
        .clone();
    let diag = CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        dim,
        (0..dim).map(|k| Complex64::new((k % distinct) as f64 - 1.0, 0.0)),
    ));
    let m = &u * diag * u.adjoint();
    let m = (&m + m.adjoint()) * Complex64::new(0.5, 0.0);
    spectral_decompose(&HermitianObservable::new(m, 1e-10).unwrap(), None).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projectors_resolve_identity(dim in 1usize..=32, distinct in 1usize..=4, seed in any::<u64>()) {
        let dec = degenerate_observable(dim, distinct, seed);
        prop_assert_eq!(dec.levels().len(), distinct.min(dim));
        let mut sum = CMatrix::zeros(dim, dim);
        for (a, la) in dec.levels().iter().enumerate() {
            sum += &la.projector;
            for (b, lb) in dec.levels().iter().enumerate() {
                let prod = &la.projector * &lb.projector;
                let expected = if a == b { la.projector.clone() } else { CMatrix::zeros(dim, dim) };
                prop_assert!(max_abs(&(prod - expected)) < 1e-9);
            }
        }
        prop_assert!(max_abs(&(sum - CMatrix::identity(dim, dim))) < 1e-9);
        let mut weighted = CMatrix::zeros(dim, dim);
        for l in dec.levels() {
            weighted += &l.projector * Complex64::new(l.eigenvalue, 0.0);
        }
        prop_assert!(max_abs(&(dec.reconstruct() - weighted)) < 1e-9);
    }

    #[test]
    fn probabilities_reproduce_energy(dim in 1usize..=16, seed in any::<u64>()) {
        let mut rng = stream(seed, 1);
        let obs = random_hermitian(dim, &mut rng);
        let dec = spectral_decompose(&obs, None).unwrap();
        let psi = random_state(dim, &mut rng);
        let pi = level_probabilities(&psi, &dec).unwrap();
        prop_assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(pi.iter().all(|&p| p >= 0.0));
        let h: f64 = pi.iter().zip(dec.eigenvalues()).map(|(p, e)| p * e).sum();
        prop_assert!((h - obs.expectation(&psi)).abs() < 1e-10);
        let m = moments(&psi, &dec, 4).unwrap();
        prop_assert!(m.v >= -1e-12);
    }

    #[test]
    fn luders_state_is_idempotent_and_orthogonal_to_complement(
        dim in 2usize..=12, distinct in 1usize..=3, seed in any::<u64>()
    ) {
        let dec = degenerate_observable(dim, distinct, seed);
        let psi = random_state(dim, &mut stream(seed, 2));
        for n in 0..dec.levels().len() {
            let once = luders_state(&psi, &dec, n).unwrap();
            let twice = luders_state(&once, &dec, n).unwrap();
            prop_assert!((once.norm() - 1.0).abs() < 1e-12);
            prop_assert!((once.fidelity(&twice) - 1.0).abs() < 1e-12);
            let pi = orthogonal_luders_complement(&psi, &dec, n).unwrap();
            prop_assert!(pi.expectation(&psi).abs() < 1e-12);
        }
    }

    #[test]
    fn master_equation_semigroup_and_purity(
        dim in 1usize..=6, seed in any::<u64>(), s in 0.0..3.0f64, t in 0.0..3.0f64, sigma in 0.0..2.0f64
    ) {
        let mut rng = stream(seed, 3);
        let dec = spectral_decompose(&random_hermitian(dim, &mut rng), None).unwrap();
        let rho0 = random_density(dim, dim.min(2), &mut rng);
        let direct = rho_closed_form(&rho0, &dec, sigma, s + t).unwrap();
        let composed = rho_closed_form(&rho_closed_form(&rho0, &dec, sigma, s).unwrap(), &dec, sigma, t).unwrap();
        prop_assert!(max_element_distance(&direct, &composed) < 1e-10);
        let blocks = BlockDecomposedDensity::new(&rho0, &dec, sigma).unwrap();
        let later = blocks.evolve(s).evolve(t);
        prop_assert!(max_element_distance(&later.density(), &direct) < 1e-10);
        let mid = rho_closed_form(&rho0, &dec, sigma, s).unwrap();
        prop_assert!(direct.purity() <= mid.purity() + 1e-12);
        prop_assert!(mid.purity() <= rho0.purity() + 1e-12);
        for l in dec.levels() {
            let before = rho0.expectation(&l.projector).re;
            let after = direct.expectation(&l.projector).re;
            prop_assert!((before - after).abs() < 1e-12);
            let block0 = &l.projector * rho0.matrix() * &l.projector;
            let block_t = &l.projector * direct.matrix() * &l.projector;
            // diagonal blocks only rotate: Hilbert-Schmidt norm is conserved
            prop_assert!((block0.norm() - block_t.norm()).abs() < 1e-10);
        }
    }
}
