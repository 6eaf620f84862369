mod common;

use weather_gan::generator::Composition;

const TOL: f64 = 1e-3;

#[test]
fn every_loss_matches_finite_differences() {
    for (name, err) in common::cases::loss_cases() {
        assert!(err <= TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn generator_forward_matches_finite_differences() {
    for c in [Composition::Full, Composition::AttentionOnly, Composition::SegmentationOnly, Composition::InitOnly] {
        let err = common::cases::generator_case(c);
        assert!(err <= TOL, "{}: relative error {err:e}", c.name());
    }
}

#[test]
fn discriminator_heads_match_finite_differences() {
    let err = common::cases::discriminator_case();
    assert!(err <= TOL, "relative error {err:e}");
}
