use hetphase_bench::{angles, reference_state};

#[test]
fn reference_state_is_normalized_and_resolved() {
    let psi = reference_state(40).unwrap();
    assert!((psi.norm_sqr() - 1.0).abs() < 1e-12);
    assert!(psi.boundary_mass() < 1e-12);
}

#[test]
fn angles_cover_one_period() {
    let a = angles(4);
    assert_eq!(a.len(), 4);
    assert_eq!(a[0], -std::f64::consts::PI);
    assert!((a[2]).abs() < 1e-15);
}
