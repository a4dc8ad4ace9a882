//! End-to-end protocol properties on the in-memory harness.

use dphelmet::data::synth_blobs;
use dphelmet::dp::NoiseMode;
use dphelmet::protocol::RunStatus;
use dphelmet::rng::{seed_from_u64, Rng};
use dphelmet::secagg::Transcript;
use dphelmet::sim::{self, SimConfig};
use dphelmet::stats::{ks_test_normal, mean_std};
use dphelmet::{svm, DataPoint, Dataset, Hyperparams, PrivacySpec};

fn blobs() -> Dataset {
    synth_blobs(&mut Rng::spawn(&seed_from_u64(9), b"blobs"), 4, 8, 150, 1.0, 3.0).unwrap()
}

fn hyper() -> Hyperparams {
    Hyperparams { c: 3.0, radius: 0.5, lambda: 1.0, iterations: 100, batch_size: 10, ..Hyperparams::default() }
}

fn config(users: usize, sigma: f64) -> SimConfig {
    let privacy = PrivacySpec { sigma, ..PrivacySpec::default() };
    let mut cfg = SimConfig::new(users, hyper(), privacy);
    cfg.points_per_user = Some(40);
    cfg.holdout_fraction = 0.0;
    cfg
}

#[test]
fn single_invocation_of_secure_summation() {
    let out = sim::run(&config(12, 4.0), &blobs()).unwrap();
    assert_eq!(out.report.status, RunStatus::Completed);
    assert_eq!(out.report.aggregations, 1);
    assert_eq!(out.transcript.messages.len(), 12);
    let mut senders: Vec<u32> = out.transcript.messages.iter().map(|m| m.user_id).collect();
    senders.sort_unstable();
    senders.dedup();
    assert_eq!(senders.len(), 12);
    let bytes = out.transcript.to_bytes();
    assert_eq!(Transcript::read_from(bytes.as_slice()).unwrap().messages, out.transcript.messages);
}

#[test]
fn noiseless_release_is_the_mean_of_local_models() {
    let out = sim::run(&config(8, 0.0), &blobs()).unwrap();
    let mean = dphelmet::ModelStack::average(&out.local_models).unwrap();
    let released = out.released.unwrap();
    for (a, b) in released.as_flat().iter().zip(mean.as_flat()) {
        assert!((a - b).abs() <= 8.0 * 2f64.powi(-25), "{a} vs {b}");
    }
}

#[test]
fn averaged_sensitivity_shrinks_with_users() {
    let d = blobs();
    let cfg = config(10, 0.0);
    let a = sim::run(&cfg, &d).unwrap();
    let neighbor = d.with_replaced(0, DataPoint::from_raw(&[5.0; 8], 3)).unwrap();
    let b = sim::run(&cfg, &neighbor).unwrap();
    let s = svm::sensitivity(&cfg.hyper, 40);
    let slack = 10.0 * 2f64.powi(-25);
    for dist in a.released.unwrap().row_distances(&b.released.unwrap()).unwrap() {
        assert!(dist <= s / 10.0 + slack, "{dist} > {}", s / 10.0);
    }
}

#[test]
fn central_and_distributed_noise_match_in_distribution() {
    // Released noise around the noiseless average: one user with the
    // central mechanism vs many users each adding a share.
    let d = blobs();
    let params = |users: usize| {
        let mut cfg = config(users, 2.0);
        cfg.privacy.honest_fraction = 1.0;
        cfg
    };
    let mut central = Vec::new();
    let mut distributed = Vec::new();
    for seed in 0..40u64 {
        let mut one = params(1);
        one.master_seed = seed;
        let out = sim::run(&one, &d).unwrap();
        let noiseless = &out.local_models[0];
        let s = svm::sensitivity(&one.hyper, 40);
        assert_eq!(out.report.accounting.mode, NoiseMode::Central);
        central.extend(out.released.unwrap().as_flat().iter().zip(noiseless.as_flat()).map(|(a, b)| (a - b) / (2.0 * s)));

        let mut many = params(12);
        many.master_seed = seed;
        let out = sim::run(&many, &d).unwrap();
        let mean = dphelmet::ModelStack::average(&out.local_models).unwrap();
        let s_avg = svm::sensitivity(&many.hyper, 40) / 12.0;
        distributed.extend(out.released.unwrap().as_flat().iter().zip(mean.as_flat()).map(|(a, b)| (a - b) / (2.0 * s_avg)));
    }
    for sample in [&central, &distributed] {
        let (_, p) = ks_test_normal(sample, 0.0, 1.0).unwrap();
        assert!(p > 0.01, "p = {p}");
    }
}

#[test]
fn colluders_leave_the_honest_noise_in_place() {
    let d = blobs();
    let mut cfg = config(10, 3.0);
    cfg.privacy.honest_fraction = 0.5;
    cfg.colluding_ids = (0..5).collect();
    let mut residual = Vec::new();
    for seed in 0..30 {
        cfg.master_seed = seed;
        let out = sim::run(&cfg, &d).unwrap();
        let mean = dphelmet::ModelStack::average(&out.local_models).unwrap();
        residual.extend(out.released.unwrap().as_flat().iter().zip(mean.as_flat()).map(|(a, b)| a - b));
    }
    let plan = cfg.protocol_params().noise_plan(40).unwrap();
    let required = plan.required_std();
    let (_, std) = mean_std(&residual);
    // Five honest users still deliver the required noise.
    assert!((std - required).abs() < 0.1 * required, "{std} vs {required}");
    let (_, p) = ks_test_normal(&residual, 0.0, required).unwrap();
    assert!(p > 0.01, "p = {p}");
    cfg.colluding_ids = (0..6).collect();
    assert!(sim::run(&cfg, &d).is_err());
}

#[test]
fn dropout_aborts_the_round() {
    let mut cfg = config(6, 1.0);
    cfg.dropout_ids = vec![4, 1];
    let out = sim::run(&cfg, &blobs()).unwrap();
    match out.report.status {
        RunStatus::Aborted { missing, .. } => assert_eq!(missing, vec![1, 4]),
        RunStatus::Completed => panic!("round must abort"),
    }
    assert!(out.released.is_none());
}

#[test]
fn zero_noise_reports_infinite_epsilon() {
    let out = sim::run(&config(3, 0.0), &blobs()).unwrap();
    assert!(out.report.accounting.epsilon.is_infinite());
    let json = serde_json::to_value(&out.report).unwrap();
    assert_eq!(json["accounting"]["epsilon"], "inf");
    assert_eq!(json["status"], "completed");
}
