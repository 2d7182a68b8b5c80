use attnguide::backbone::{add_noise, Backbone, BackboneConfig, Level, Schedule, Token, LAYERS};
use attnguide::grid::Latent;
use attnguide::guidance::{guidance_loss, guided_noise, loss_gradient, reverse_step, sample, EtaMode, GuidanceConfig};
use attnguide::prompt::{PromptTriplet, Relation};
use attnguide::stats::stats_for_token;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup() -> (Backbone<f64>, Schedule<f64>) {
    (
        Backbone::new(BackboneConfig::default()).unwrap(),
        Schedule::linear(50, 1e-4, 0.02).unwrap(),
    )
}

#[test]
fn zero_eta_is_plain_cfg() {
    let (bb, s) = setup();
    let tri = PromptTriplet::new("dog", Relation::Above, "bench", bb.vocabulary()).unwrap();
    let cfg = GuidanceConfig {
        eta: 0.0,
        ..GuidanceConfig::default()
    };
    let out = sample(&bb, &tri, &s, &cfg, 9).unwrap();

    let mut z = bb.gaussian_latent(9);
    let zero = Latent::zeros(32, 32, 32);
    for t in (1..=50).rev() {
        let d = bb.denoise(&z, t, &tri, &s).unwrap();
        let eps = guided_noise(&d.eps_unconditional, &d.eps_conditional, &zero, 7.5, 0.0).unwrap();
        z = reverse_step(&z, t, &eps, &s).unwrap();
    }
    assert_eq!(out.latent, z);
    assert!(out.trace.iter().all(|st| st.gradient_norm == 0.0));
}

#[test]
fn sampling_is_deterministic_with_finite_traces() {
    let (bb, s) = setup();
    let tri = PromptTriplet::new("cup", Relation::Near, "laptop", bb.vocabulary()).unwrap();
    let cfg = GuidanceConfig::default();
    let a = sample(&bb, &tri, &s, &cfg, 3).unwrap();
    let b = sample(&bb, &tri, &s, &cfg, 3).unwrap();
    assert_eq!(a.latent, b.latent);
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.trace.len(), 50);
    assert_eq!(a.trace.first().unwrap().t, 50);
    assert!(a.trace.iter().all(|st| st.loss.total.is_finite() && st.gradient_norm.is_finite()));
}

#[test]
fn guided_right_of_holds_for_most_seeds() {
    let (bb, s) = setup();
    let tri = PromptTriplet::new("dog", Relation::Right, "cat", bb.vocabulary()).unwrap();
    let cfg = GuidanceConfig::default();
    let mut hits = 0;
    for seed in 0..20 {
        let out = sample(&bb, &tri, &s, &cfg, seed).unwrap();
        let stack = bb.attention(&out.latent, &tri, &[Level::Fine]).unwrap();
        let a = stats_for_token(&stack, Token::A, &[Level::Fine]).unwrap();
        let b = stats_for_token(&stack, Token::B, &[Level::Fine]).unwrap();
        let (ca, cb) = (a.get(Level::Fine, LAYERS).unwrap().centroid, b.get(Level::Fine, LAYERS).unwrap().centroid);
        if ca.x > cb.x {
            hits += 1;
        }
    }
    assert!(hits >= 18, "{hits}/20 seeds put A right of B");
}

#[test]
fn one_guided_step_usually_lowers_the_loss() {
    let (bb, s) = setup();
    let cfg = GuidanceConfig::default();
    let ids: Vec<String> = bb.vocabulary().entries().iter().map(|e| e.id.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let probes = 40;
    let mut lowered = 0;
    for _ in 0..probes {
        let i = rng.random_range(0..ids.len());
        let j = (i + rng.random_range(1..ids.len())) % ids.len();
        let rel = Relation::ALL[rng.random_range(0..5)];
        let tri = PromptTriplet::new(&ids[i], rel, &ids[j], bb.vocabulary()).unwrap();
        let t = rng.random_range(2..=50);
        let x0 = bb
            .synthesize_clean(&tri, (rng.random(), rng.random()), (rng.random(), rng.random()))
            .unwrap();
        let (z, _) = add_noise(&x0, t, &s, rng.random()).unwrap();

        let d = bb.denoise(&z, t, &tri, &s).unwrap();
        let (mut grad, _) = loss_gradient(&bb, &z, t, &tri, &s, &cfg.loss).unwrap();
        if cfg.eta_mode == EtaMode::Normalized {
            grad = grad.scale(1.0 / grad.norm());
        }
        let step = |eta: f64| {
            let eps = guided_noise(&d.eps_unconditional, &d.eps_conditional, &grad, cfg.gamma, eta).unwrap();
            let next = reverse_step(&z, t, &eps, &s).unwrap();
            guidance_loss(&bb, &next, &tri, &cfg.loss).unwrap().total
        };
        if step(cfg.eta) <= step(0.0) {
            lowered += 1;
        }
    }
    assert!(lowered * 5 >= probes * 4, "{lowered}/{probes} probes lowered the loss");
}
