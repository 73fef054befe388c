use hetphase_core::interaction::{
    expected_terms, plan_frequencies, resonant_terms, DEFAULT_FREQUENCY_TOL,
};
use hetphase_core::twinbeam::displaced_twin_beams;
use hetphase_core::{
    c64, delta_sq, DetectorParams, DisplacedTwinBeamParams, Heterodyne, KetHeterodyne, KetSampler,
    SamplerSpec, Truncation,
};
use proptest::prelude::*;

fn state(n_max: usize) -> hetphase_core::KetState {
    let p = DisplacedTwinBeamParams::new(0.3, c64::new(0.6, -0.2)).unwrap();
    displaced_twin_beams(&p, &Truncation::new(n_max, 2).unwrap()).unwrap()
}

#[test]
fn ket_and_dense_instruments_agree() {
    let psi = state(10);
    let det = DetectorParams::ideal(0.6).unwrap();
    let dense = Heterodyne::new(det, *psi.truncation()).unwrap();
    let ket = KetHeterodyne::new(det, *psi.truncation()).unwrap();
    for z in [c64::new(0.0, 0.0), c64::new(0.8, -0.4), c64::new(-1.1, 0.9)] {
        let a = dense.outcome_density_ket(&psi, z).unwrap();
        let b = ket.outcome_density(&psi, z).unwrap();
        assert!((a - b).abs() < 1e-10, "{z}: {a} vs {b}");
    }
}

#[test]
fn ideal_reduction_is_pure_on_both_paths() {
    let psi = state(8);
    let det = DetectorParams::ideal(0.0).unwrap();
    let z = c64::new(0.5, 0.3);
    let dense = Heterodyne::new(det, *psi.truncation())
        .unwrap()
        .reduce_state(&psi.to_density(), z)
        .unwrap();
    assert!((dense.purity - 1.0).abs() < 1e-9);
    assert!((dense.state.trace() - 1.0).abs() < 1e-9);

    let (ket, outcome) = KetHeterodyne::new(det, *psi.truncation())
        .unwrap()
        .reduce(&psi, z)
        .unwrap();
    assert!((ket.norm_sqr() - 1.0).abs() < 1e-9);
    assert!((outcome.density - dense.outcome.density).abs() < 1e-9);
}

#[test]
fn ket_sequences_follow_the_seed() {
    let psi = state(12);
    let det = DetectorParams::ideal(0.0).unwrap();
    let spec = SamplerSpec {
        nodes_per_axis: 21,
        ..SamplerSpec::new(5)
    };
    let sampler = KetSampler::new(det, spec).unwrap();
    let a = sampler.run_sequence_stream(&psi, 2, 0).unwrap();
    let b = sampler.run_sequence_stream(&psi, 2, 0).unwrap();
    let c = sampler.run_sequence_stream(&psi, 2, 1).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.outcomes, c.outcomes);
}

#[test]
fn designed_plan_keeps_only_the_coupling_terms() {
    let plan = plan_frequencies(1.0, 3.0, 4.5, DEFAULT_FREQUENCY_TOL).unwrap();
    assert!(plan.is_valid());
    assert_eq!(resonant_terms(&plan).unwrap(), expected_terms());
}

proptest! {
    #[test]
    fn noise_grows_with_loss_and_shrinks_with_squeezing(
        lambda in 0.0f64..0.95,
        eta in 0.05f64..1.0,
    ) {
        let d = delta_sq(lambda, eta);
        prop_assert!(d >= delta_sq(lambda, 1.0));
        prop_assert!(d <= delta_sq(0.0, eta) + 1e-15);
        prop_assert!(d > 0.0);
    }
}
