use ordchange_core::losses::{finite_difference_check, LossConfig, LossKind};
use ordchange_core::model::{init_model, init_params, network_gradient_check, Architecture, ModelInput, Topology};
use ordchange_core::{LogitVector, ProbVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn variants() -> Vec<(LossKind, f64)> {
    let mut v = vec![(LossKind::CrossEntropy, 2.0)];
    v.extend([0.0, 1.0, 2.0, 5.0].map(|g| (LossKind::Focal, g)));
    v.push((LossKind::Emd, 2.0));
    v.push((LossKind::Combined, 2.0));
    v
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

#[test]
fn plain_network_gradients() {
    let mut worst = 0.0f64;
    for (v, (kind, gamma)) in variants().into_iter().enumerate() {
        let cfg = LossConfig { gamma, ..LossConfig::default() };
        for case in 0..4u64 {
            let seed = 100 * v as u64 + case;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = init_params(&[4, 8, 3], if case % 2 == 0 { 0.0 } else { 0.3 }, seed).unwrap();
            let x = uniform(&mut rng, 4);
            let y = ProbVector::one_hot(3, rng.random_range(0..3)).unwrap();
            let err = network_gradient_check(&params, ModelInput::Single(&x), &y, kind, &cfg, H, seed).unwrap();
            assert!(err < TOL, "{kind} gamma={gamma} case {case}: {err}");
            worst = worst.max(err);
        }
    }
    assert!(worst < TOL);
}

#[test]
fn siamese_network_gradients() {
    for (v, (kind, gamma)) in variants().into_iter().enumerate() {
        let cfg = LossConfig { gamma, ..LossConfig::default() };
        for case in 0..3u64 {
            let seed = 1000 + 100 * v as u64 + case;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let arch = Architecture {
                topology: Topology::Siamese,
                input_dim: 4,
                encoder_hidden: vec![6, 5],
                head_hidden: vec![7],
                num_classes: 3,
                dropout: if case == 1 { 0.25 } else { 0.0 },
            };
            let params = init_model(&arch, seed).unwrap();
            let a = uniform(&mut rng, 4);
            let b = uniform(&mut rng, 4);
            let y = ProbVector::one_hot(3, rng.random_range(0..3)).unwrap();
            let err = network_gradient_check(&params, ModelInput::Pair(&a, &b), &y, kind, &cfg, H, seed).unwrap();
            assert!(err < TOL, "{kind} gamma={gamma} case {case}: {err}");
        }
    }
}

#[test]
fn logit_gradients_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for (kind, gamma) in variants() {
        let cfg = LossConfig { gamma, ..LossConfig::default() };
        for _ in 0..100 {
            let c = rng.random_range(3..=4);
            let z = LogitVector::new(uniform(&mut rng, c)).unwrap();
            let y = ProbVector::one_hot(c, rng.random_range(0..c)).unwrap();
            let err = finite_difference_check(kind, &z, &y, &cfg, H).unwrap();
            assert!(err < TOL, "{kind} gamma={gamma} z={z:?}: {err}");
        }
    }
}
