//! Analytic gradients, convexity and the sensitivity bound of the local learner.

use dphelmet::data::synth_blobs;
use dphelmet::rng::{seed_from_u64, Rng};
use dphelmet::svm::{self, ClippedData, LossSpec};
use dphelmet::{DataPoint, Dataset, Hyperparams, LossKind};

fn blobs(seed: u64) -> Dataset {
    synth_blobs(&mut Rng::spawn(&seed_from_u64(seed), b"blobs"), 3, 6, 30, 1.0, 2.0).unwrap()
}

fn random_point(rng: &mut Rng, cols: usize, scale: f64) -> Vec<f64> {
    (0..cols).map(|_| scale * rng.standard_normal()).collect()
}

fn central_difference(data: &ClippedData, f: &[f64], k: u32, lambda: f64, loss: LossSpec) -> Vec<f64> {
    let eps = 1e-6;
    (0..f.len())
        .map(|j| {
            let mut hi = f.to_vec();
            let mut lo = f.to_vec();
            hi[j] += eps;
            lo[j] -= eps;
            (data.objective(&hi, k, lambda, loss) - data.objective(&lo, k, lambda, loss)) / (2.0 * eps)
        })
        .collect()
}

#[test]
fn gradients_match_central_differences() {
    let d = blobs(1);
    for kind in [LossKind::HuberHinge, LossKind::Logistic] {
        let loss = LossSpec { kind, h: 0.1 };
        let data = ClippedData::new(&d, 2.0);
        let mut rng = Rng::spawn(&seed_from_u64(2), b"probe");
        for probe in 0..40 {
            let f = random_point(&mut rng, d.cols(), 0.5);
            let k = (probe % 3) as u32;
            let g = data.gradient(&f, k, 0.7, loss);
            let num = central_difference(&data, &f, k, 0.7, loss);
            let err: f64 = g.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8);
            assert!(err / scale <= 1e-4, "{kind:?} probe {probe}: relative error {}", err / scale);
        }
    }
}

#[test]
fn objective_is_lambda_strongly_convex() {
    let d = blobs(3);
    let xi = Hyperparams { lambda: 0.3, c: 2.0, ..Hyperparams::default() };
    let data = ClippedData::new(&d, xi.c);
    let mut rng = Rng::spawn(&seed_from_u64(4), b"convex");
    for kind in [LossKind::HuberHinge, LossKind::Logistic] {
        let loss = LossSpec { kind, h: xi.h };
        for _ in 0..200 {
            let a = random_point(&mut rng, d.cols(), 1.0);
            let b = random_point(&mut rng, d.cols(), 1.0);
            let t = rng.uniform();
            let mix: Vec<f64> = a.iter().zip(&b).map(|(a, b)| t * a + (1.0 - t) * b).collect();
            let dist2: f64 = a.iter().zip(&b).map(|(a, b)| (a - b).powi(2)).sum();
            let lhs = data.objective(&mix, 0, xi.lambda, loss);
            let rhs = t * data.objective(&a, 0, xi.lambda, loss) + (1.0 - t) * data.objective(&b, 0, xi.lambda, loss)
                - 0.5 * xi.lambda * t * (1.0 - t) * dist2;
            assert!(lhs <= rhs + 1e-12, "{kind:?}: {lhs} > {rhs}");
        }
    }
}

#[test]
fn neighboring_datasets_respect_the_sensitivity_bound() {
    let mut rng = Rng::spawn(&seed_from_u64(5), b"neighbors");
    for (c, radius, lambda) in [(1.0, 0.07, 2.0), (5.0, 0.05, 10.0)] {
        let xi = Hyperparams { c, radius, lambda, iterations: 200, batch_size: 7, ..Hyperparams::default() };
        let bound = svm::sensitivity(&xi, 50);
        for pair in 0..20 {
            let d = synth_blobs(&mut rng, 3, 6, 17, 2.0, 3.0).unwrap();
            let d = d.subset(&(0..50).collect::<Vec<_>>()).unwrap();
            let raw: Vec<f64> = random_point(&mut rng, 6, 4.0);
            let neighbor = d.with_replaced(pair % 50, DataPoint::from_raw(&raw, (pair % 3) as u32)).unwrap();
            let seed = seed_from_u64(pair as u64);
            let a = svm::train(&d, &xi, &mut Rng::spawn(&seed, b"train")).unwrap();
            let b = svm::train(&neighbor, &xi, &mut Rng::spawn(&seed, b"train")).unwrap();
            for dist in a.row_distances(&b).unwrap() {
                assert!(dist <= bound + 1e-6, "distance {dist} exceeds {bound}");
            }
        }
    }
}

#[test]
fn trained_rows_stay_in_the_ball() {
    let d = blobs(6);
    for loss in [LossKind::HuberHinge, LossKind::Logistic] {
        let xi = Hyperparams { radius: 0.2, lambda: 0.01, c: 3.0, iterations: 300, loss, ..Hyperparams::default() };
        let m = svm::train(&d, &xi, &mut Rng::spawn(&seed_from_u64(0), b"t")).unwrap();
        assert!(m.row_norms().iter().all(|n| *n <= xi.radius + 1e-9));
    }
}
