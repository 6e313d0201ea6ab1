use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use trainscope::autodiff::{
    batch_gradient, hessian_vector_product, BatchCurvature, DiagMode, DEFAULT_DIAG_CAP,
};
use trainscope::problems::{self, BatchSampler, PROBLEM_NAMES};
use trainscope::quantities::hess_trace;

#[test]
fn quadratic_hessian_trace_is_the_trace_of_its_matrix() {
    let p = problems::noisy_quadratic(30, 4).unwrap();
    let a = p.curvature.as_ref().unwrap();
    let d = p.dim();
    let expected: f64 = (0..d).map(|i| a.get(i, i)).sum();
    let batch = p.batch(&[0, 5, 9]);
    let probe = BatchCurvature::new(
        p.model.as_ref(),
        &p.init,
        &batch,
        DiagMode::Exact {
            cap: DEFAULT_DIAG_CAP,
        },
    )
    .unwrap();
    let t = hess_trace(&probe).unwrap();
    assert!((t - expected).abs() <= 1e-10 * expected);
}

#[test]
fn quadratic_gradient_vanishes_at_the_mean_centre() {
    let p = problems::anisotropic_quadratic(2).unwrap();
    let idx: Vec<usize> = (0..p.meta.n).collect();
    let batch = p.batch(&idx);
    let x = batch.inputs.data();
    let mean = [
        (0..p.meta.n).map(|i| x[2 * i]).sum::<f64>() / p.meta.n as f64,
        (0..p.meta.n).map(|i| x[2 * i + 1]).sum::<f64>() / p.meta.n as f64,
    ];
    let at_mean = p.init.with_values(mean.to_vec()).unwrap();
    let g = batch_gradient(p.model.as_ref(), &at_mean, &batch).unwrap().batch_grad;
    assert!(g.iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn logistic_regression_loss_is_convex() {
    let p = problems::logistic_regression_synthetic(5, 3, 300, 1).unwrap();
    let batch = p.batch(&(0..64).collect::<Vec<_>>());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let theta: Vec<f64> = (0..p.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..p.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let params = p.init.with_values(theta).unwrap();
        let hv = hessian_vector_product(p.model.as_ref(), &params, &batch, &v).unwrap();
        let curv: f64 = v.iter().zip(&hv).map(|(a, b)| a * b).sum();
        assert!(curv >= -1e-12, "{curv}");
    }
}

#[test]
fn problems_are_reproducible_from_their_seed() {
    for name in PROBLEM_NAMES {
        let a = problems::by_name(name, 7).unwrap();
        let b = problems::by_name(name, 7).unwrap();
        let c = problems::by_name(name, 8).unwrap();
        assert_eq!(a.data.inputs.data(), b.data.inputs.data(), "{name}");
        assert_eq!(a.init.values(), b.init.values(), "{name}");
        assert_eq!(a.meta.name, name);
        assert_ne!(a.data.inputs.data(), c.data.inputs.data(), "{name}");
    }
    assert!(problems::by_name("nope", 0).is_err());
}

#[test]
fn sampler_visits_every_example_once_per_epoch() {
    let mut s = BatchSampler::new(103, 10, 3).unwrap();
    assert_eq!(s.steps_per_epoch(), 10);
    let mut seen = BTreeSet::new();
    for _ in 0..10 {
        let idx = s.next_indices();
        assert_eq!(idx.len(), 10);
        for i in idx {
            assert!(seen.insert(i));
        }
    }
    assert_eq!(seen.len(), 100);
    s.next_indices();
    assert_eq!(s.epoch(), 1);
    assert!(BatchSampler::new(5, 6, 0).is_err());
}
