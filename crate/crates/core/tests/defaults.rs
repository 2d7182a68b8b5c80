//! Defaults published with the method, checked against their stated values.

use attnguide::experiment::ExperimentConfig;
use attnguide::losses::Activation;

#[test]
fn published_defaults() {
    let c = ExperimentConfig::default();
    let l = &c.guidance.loss;
    assert_eq!((l.alpha, l.margin), (1.5, 0.25));
    assert_eq!((l.lambda_s, l.lambda_p, l.lambda_b), (0.5, 1.0, 0.5));
    assert_eq!(l.activation, Activation::GeluExact);
    assert_eq!(c.guidance.gamma, 7.5);
    assert_eq!(c.guidance.eta, 1000.0);
    assert_eq!(c.schedule.steps, 50);
    assert_eq!(c.benchmark.base_seed, 42);
    assert_eq!(c.benchmark.images_per_prompt, 4);
    // Guidance runs at every step.
    assert!((1..=50).all(|t| c.guidance.is_active(t, 50)));
}
