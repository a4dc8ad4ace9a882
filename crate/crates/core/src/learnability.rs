//! Empirical suites for the learning guarantees of model averaging.
//!
//! * [`stability_probe`] replaces one point of one user, retrains that user
//!   with the same randomness and measures how far the pointwise objective
//!   of the averaged model moves on a fixed probe set. Uniform stability
//!   bounds the move by `2L²/(ΛN)` with `L = c + RΛ` and `N` the pooled
//!   size.
//! * [`convergence_probe`] compares the pooled objective of the averaged
//!   model after `M` steps with the pooled optimum and fits the decay rate.
//!
//! The probe set only approximates the supremum over all instances, and the
//! dataset is held fixed while the algorithm randomness is averaged, so both
//! suites observe lower bounds of the quantities the guarantees speak about.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{partition, PartitionPlan};
use crate::rng::{Rng, Seed};
use crate::stats::linear_fit;
use crate::svm::{self, ovr_label, ClippedData, LossSpec};
use crate::types::{dot, norm, Dataset, Hyperparams, ModelStack};
use crate::{Error, Result};

/// Pointwise objective `(Λ/2)‖f‖² + ℓ(y_k·fᵀ clip(z))`, maximized over
/// classes, of the difference between two models on every probe point.
fn max_pointwise_gap(a: &ModelStack, b: &ModelStack, probe: &ClippedData, xi: &Hyperparams) -> f64 {
    let loss = LossSpec::from_hyperparams(xi);
    let mut worst = 0.0f64;
    for (row, &k) in a.classes().iter().enumerate() {
        let (fa, fb) = (a.row(row), b.row(row));
        let reg = 0.5 * xi.lambda * (dot(fa, fa) - dot(fb, fb));
        for i in 0..probe.len() {
            let x = probe.x(i);
            let y = ovr_label(probe.label(i), k);
            let gap = reg + loss.value(dot(fa, x) * y) - loss.value(dot(fb, x) * y);
            worst = worst.max(gap.abs());
        }
    }
    worst
}

fn user_seed(seed: &Seed, user: usize) -> Rng {
    Rng::spawn(seed, format!("user/{user}").as_bytes())
}

fn train_users(locals: &[Dataset], xi: &Hyperparams, seed: &Seed) -> Result<Vec<ModelStack>> {
    locals
        .par_iter()
        .enumerate()
        .map(|(u, local)| svm::train(local, xi, &mut user_seed(seed, u)))
        .collect()
}

/// Outcome of [`stability_probe`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub bound: f64,
    pub observed: f64,
    pub lipschitz: f64,
    pub lambda: f64,
    pub total_points: usize,
    pub num_users: usize,
    pub probes: usize,
    pub violations: usize,
    pub probe_points: usize,
    /// Per probe: `(user, replaced local index, gap)`.
    pub gaps: Vec<StabilitySample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilitySample {
    pub user: usize,
    pub index: usize,
    pub gap: f64,
}

/// Source of the replacement point in a stability probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Replacement {
    /// A random point of the probe set.
    ProbeSet,
    /// The point itself; the pools coincide and every gap must be zero.
    Identity,
}

/// Measures the uniform-stability gap of the averaged model.
///
/// `pool` is split evenly among `num_users`; `probe_set` supplies the
/// instances `z` over which the gap is maximized and, with
/// [`Replacement::ProbeSet`], the replacement points.
pub fn stability_probe(
    pool: &Dataset,
    probe_set: &Dataset,
    xi: &Hyperparams,
    num_users: usize,
    probes: usize,
    replacement: Replacement,
    rng: &mut Rng,
) -> Result<StabilityReport> {
    if probes == 0 {
        return Err(Error::param("stability probe needs at least one probe"));
    }
    if probe_set.cols() != pool.cols() {
        return Err(Error::param("probe set and pool differ in dimension"));
    }
    let seed = rng.next_seed();
    let plan = PartitionPlan {
        num_users,
        points_per_user: None,
    };
    let locals = partition(pool, &plan, &mut Rng::spawn(&seed, b"partition"))?;
    xi.validate_for(locals.iter().map(Dataset::len).min().unwrap_or(0))?;
    let models = train_users(&locals, xi, &seed)?;
    let average = ModelStack::average(&models)?;
    let probe = ClippedData::new(probe_set, xi.c);
    let users = num_users as f64;

    let gaps: Vec<StabilitySample> = (0..probes)
        .into_par_iter()
        .map(|p| {
            let mut pick = Rng::spawn(&seed, format!("probe/{p}").as_bytes());
            let user = pick.below(num_users);
            let index = pick.below(locals[user].len());
            let point = match replacement {
                Replacement::ProbeSet => probe_set.points()[pick.below(probe_set.len())].clone(),
                Replacement::Identity => locals[user].points()[index].clone(),
            };
            let neighbor = locals[user].with_replaced(index, point)?;
            let retrained = svm::train(&neighbor, xi, &mut user_seed(&seed, user))?;
            let mut other = average.clone();
            other
                .as_flat_mut()
                .iter_mut()
                .zip(retrained.as_flat().iter().zip(models[user].as_flat()))
                .for_each(|(a, (new, old))| *a += (new - old) / users);
            Ok(StabilitySample {
                user,
                index,
                gap: max_pointwise_gap(&average, &other, &probe, xi),
            })
        })
        .collect::<Result<_>>()?;

    let lipschitz = xi.lipschitz();
    let bound = stability_bound(xi, pool.len());
    let observed = gaps.iter().map(|s| s.gap).fold(0.0, f64::max);
    Ok(StabilityReport {
        bound,
        observed,
        lipschitz,
        lambda: xi.lambda,
        total_points: pool.len(),
        num_users,
        probes,
        violations: gaps.iter().filter(|s| s.gap > bound + 1e-6).count(),
        probe_points: probe_set.len(),
        gaps,
    })
}

/// `2L²/(ΛN)` with `L = c + RΛ`.
pub fn stability_bound(xi: &Hyperparams, total_points: usize) -> f64 {
    let l = xi.lipschitz();
    2.0 * l * l / (xi.lambda * total_points as f64)
}

pub const STABILITY_CSV_HEADER: &str = "probe,user,index,gap,bound";

pub fn write_stability_csv(report: &StabilityReport, mut writer: impl Write) -> Result<()> {
    writeln!(writer, "{STABILITY_CSV_HEADER}")?;
    for (p, s) in report.gaps.iter().enumerate() {
        writeln!(writer, "{p},{},{},{:e},{:e}", s.user, s.index, s.gap, report.bound)?;
    }
    Ok(())
}

/// Pooled optimum of one class as found by [`reference_optimum`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceOptimum {
    pub weights: Vec<f64>,
    pub objective: f64,
    /// Norm of the projected-gradient mapping at `weights`.
    pub stationarity: f64,
    pub iterations: usize,
}

const REFERENCE_MAX_ITERS: usize = 100_000;
const REFERENCE_TOL: f64 = 1e-10;
const REFERENCE_ACCEPT: f64 = 1e-6;

/// Minimizes the pooled objective of class `k` over the radius-`R` ball by
/// projected full-batch gradient descent with step `1/β`.
///
/// Fails with an oracle error when the stationarity measure stays at or
/// above `1e-6` after `10⁵` iterations.
pub fn reference_optimum(data: &ClippedData, k: u32, xi: &Hyperparams) -> Result<ReferenceOptimum> {
    let loss = LossSpec::from_hyperparams(xi);
    let step = 1.0 / xi.smoothness();
    let mut f = vec![0.0; data.cols()];
    let mut stationarity = f64::INFINITY;
    let mut iterations = 0;
    while iterations < REFERENCE_MAX_ITERS {
        let g = data.gradient(&f, k, xi.lambda, loss);
        let mut next: Vec<f64> = f.iter().zip(&g).map(|(f, g)| f - step * g).collect();
        svm::project_to_ball(&mut next, xi.radius);
        let moved: Vec<f64> = f.iter().zip(&next).map(|(a, b)| a - b).collect();
        stationarity = norm(&moved) / step;
        f = next;
        iterations += 1;
        if stationarity < REFERENCE_TOL {
            break;
        }
    }
    if stationarity >= REFERENCE_ACCEPT {
        return Err(Error::Oracle(format!(
            "reference optimizer for class {k} stalled at stationarity {stationarity:e} after {iterations} iterations"
        )));
    }
    Ok(ReferenceOptimum {
        objective: data.objective(&f, k, xi.lambda, loss),
        weights: f,
        stationarity,
        iterations,
    })
}

/// Outcome of [`convergence_probe`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub grid: Vec<usize>,
    /// Mean over repeats and classes of `J(avg_M) − J(f*)`.
    pub gap: Vec<f64>,
    /// Per grid point, the spread of the per-repeat gaps.
    pub gap_std: Vec<f64>,
    /// Log-log slope of `gap` against `M − 1` over the whole grid.
    pub slope: f64,
    /// The same slope over the upper half of the grid.
    pub tail_slope: f64,
    /// Leading constant `βL²/(2Λ²)`.
    pub leading: f64,
    /// Bias term fitted at the second largest grid point.
    pub bias: f64,
    /// `leading/(M−1) + bias/(M−1)²` at each grid point.
    pub bound: Vec<f64>,
    pub monotone: bool,
    pub reference_objective: Vec<f64>,
    pub reference_stationarity: Vec<f64>,
    pub num_users: usize,
    pub repeats: usize,
}

impl ConvergenceReport {
    /// Whether `gap(M_max)` respects the bound with the fitted bias.
    pub fn within_bound(&self) -> bool {
        match (self.gap.last(), self.bound.last()) {
            (Some(g), Some(b)) => *g <= *b,
            _ => false,
        }
    }
}

/// Relative noise tolerated between consecutive gaps before the trend counts
/// as increasing.
pub const MONOTONE_BAND: f64 = 0.05;

/// Trains averaged models for every `M` in `grid` and compares their pooled
/// objective to the pooled optimum.
pub fn convergence_probe(
    pool: &Dataset,
    xi: &Hyperparams,
    num_users: usize,
    grid: &[usize],
    repeats: usize,
    rng: &mut Rng,
) -> Result<ConvergenceReport> {
    if grid.len() < 3 || grid.windows(2).any(|w| w[0] >= w[1]) || grid[0] < 2 {
        return Err(Error::param("M grid must hold at least 3 strictly increasing values >= 2"));
    }
    if repeats == 0 {
        return Err(Error::param("convergence probe needs at least one repeat"));
    }
    let seed = rng.next_seed();
    let plan = PartitionPlan {
        num_users,
        points_per_user: None,
    };
    let locals = partition(pool, &plan, &mut Rng::spawn(&seed, b"partition"))?;
    xi.validate_for(locals.iter().map(Dataset::len).min().unwrap_or(0))?;

    let data = ClippedData::new(pool, xi.c);
    let loss = LossSpec::from_hyperparams(xi);
    let optima: Vec<ReferenceOptimum> = pool
        .classes()
        .par_iter()
        .map(|&k| reference_optimum(&data, k, xi))
        .collect::<Result<_>>()?;

    let cells: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|g| (0..repeats).map(move |r| (g, r)))
        .collect();
    let gaps: Vec<f64> = cells
        .par_iter()
        .map(|&(g, r)| {
            let mut cfg = xi.clone();
            cfg.iterations = grid[g];
            let run_seed = crate::rng::derive_seed(&seed, format!("repeat/{r}").as_bytes());
            let average = ModelStack::average(&train_users(&locals, &cfg, &run_seed)?)?;
            let total: f64 = pool
                .classes()
                .iter()
                .enumerate()
                .map(|(row, &k)| data.objective(average.row(row), k, xi.lambda, loss) - optima[row].objective)
                .sum();
            Ok(total / pool.classes().len() as f64)
        })
        .collect::<Result<_>>()?;

    let mut gap = Vec::with_capacity(grid.len());
    let mut gap_std = Vec::with_capacity(grid.len());
    for per_m in gaps.chunks(repeats) {
        let (m, s) = crate::stats::mean_std(per_m);
        gap.push(m);
        gap_std.push(if repeats > 1 { s } else { 0.0 });
    }

    let slope = log_slope(grid, &gap)?;
    let half = grid.len() / 2;
    let tail_slope = log_slope(&grid[half..], &gap[half..])?;
    let leading = xi.smoothness() * xi.lipschitz().powi(2) / (2.0 * xi.lambda * xi.lambda);
    let second = (grid[grid.len() - 2] - 1) as f64;
    let bias = ((gap[grid.len() - 2] - leading / second) * second * second).max(0.0);
    let bound = grid
        .iter()
        .map(|&m| {
            let m = (m - 1) as f64;
            leading / m + bias / (m * m)
        })
        .collect();
    let monotone = gap.windows(2).all(|w| w[1] <= w[0] * (1.0 + MONOTONE_BAND));

    Ok(ConvergenceReport {
        grid: grid.to_vec(),
        gap,
        gap_std,
        slope,
        tail_slope,
        leading,
        bias,
        bound,
        monotone,
        reference_objective: optima.iter().map(|o| o.objective).collect(),
        reference_stationarity: optima.iter().map(|o| o.stationarity).collect(),
        num_users,
        repeats,
    })
}

/// Least-squares slope of `ln gap` against `ln(M − 1)`.
fn log_slope(grid: &[usize], gap: &[f64]) -> Result<f64> {
    if gap.iter().any(|g| !(*g > 0.0)) {
        return Err(Error::Oracle(
            "non-positive optimality gap; the reference optimum is not optimal".into(),
        ));
    }
    let xs: Vec<f64> = grid.iter().map(|&m| ((m - 1) as f64).ln()).collect();
    let ys: Vec<f64> = gap.iter().map(|g| g.ln()).collect();
    linear_fit(&xs, &ys).map(|(slope, _)| slope)
}

pub const CONVERGENCE_CSV_HEADER: &str = "m,gap,gap_std,bound";

pub fn write_convergence_csv(report: &ConvergenceReport, mut writer: impl Write) -> Result<()> {
    writeln!(writer, "{CONVERGENCE_CSV_HEADER}")?;
    for i in 0..report.grid.len() {
        writeln!(
            writer,
            "{},{:e},{:e},{:e}",
            report.grid[i], report.gap[i], report.gap_std[i], report.bound[i]
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::rng::seed_from_u64;

    fn blobs(per_class: usize, seed: u64) -> Dataset {
        synth_blobs(&mut Rng::spawn(&seed_from_u64(seed), b"blobs"), 3, 5, per_class, 1.0, 2.0).unwrap()
    }

    fn hyper(lambda: f64, radius: f64, iterations: usize) -> Hyperparams {
        Hyperparams {
            c: 1.0,
            lambda,
            radius,
            iterations,
            batch_size: 5,
            ..Hyperparams::default()
        }
    }

    #[test]
    fn identical_pools_have_zero_gap() {
        let report = stability_probe(
            &blobs(40, 1),
            &blobs(20, 2),
            &hyper(1.0, 1.0, 80),
            4,
            10,
            Replacement::Identity,
            &mut Rng::spawn(&seed_from_u64(0), b"t"),
        )
        .unwrap();
        assert_eq!(report.observed, 0.0);
        assert_eq!(report.violations, 0);
    }

    #[test]
    fn bound_matches_hand_value_and_scales() {
        let xi = hyper(1.0, 1.0, 10);
        assert!((stability_bound(&xi, 100) - 0.08).abs() < 1e-15);
        assert!((stability_bound(&xi, 200) - 0.04).abs() < 1e-15);
    }

    #[test]
    fn replaced_points_stay_within_bound() {
        let report = stability_probe(
            &blobs(40, 1),
            &blobs(30, 2),
            &hyper(1.0, 1.0, 100),
            4,
            30,
            Replacement::ProbeSet,
            &mut Rng::spawn(&seed_from_u64(0), b"t"),
        )
        .unwrap();
        assert_eq!(report.total_points, 120);
        assert!(report.observed > 0.0);
        assert_eq!(report.violations, 0, "{} > {}", report.observed, report.bound);
        let mut csv = Vec::new();
        write_stability_csv(&report, &mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 31);
    }

    #[test]
    fn reference_optimum_is_stationary() {
        let d = blobs(30, 3);
        let xi = hyper(0.5, 1.0, 1);
        let data = ClippedData::new(&d, xi.c);
        let opt = reference_optimum(&data, 1, &xi).unwrap();
        assert!(opt.stationarity < 1e-10);
        let g = data.gradient(&opt.weights, 1, xi.lambda, LossSpec::from_hyperparams(&xi));
        if norm(&opt.weights) < xi.radius - 1e-6 {
            assert!(norm(&g) < 1e-9);
        }
    }

    #[test]
    fn convergence_gap_decays() {
        let xi = Hyperparams {
            batch_size: 1,
            ..hyper(10.0, 10.0, 1)
        };
        let report = convergence_probe(
            &blobs(40, 4),
            &xi,
            4,
            &[8, 32, 128, 512],
            3,
            &mut Rng::spawn(&seed_from_u64(1), b"conv"),
        )
        .unwrap();
        assert!(report.gap.iter().all(|g| *g > 0.0));
        assert!(report.gap[3] < report.gap[0]);
        assert!(report.slope < -0.5, "slope {}", report.slope);
        assert!(report.within_bound());
        let mut csv = Vec::new();
        write_convergence_csv(&report, &mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with(CONVERGENCE_CSV_HEADER));
    }

    #[test]
    fn slope_of_exact_power_law() {
        let grid = [9, 17, 33, 65];
        let gap: Vec<f64> = grid.iter().map(|&m| 3.0 / ((m - 1) as f64).powi(2)).collect();
        assert!((log_slope(&grid, &gap).unwrap() + 2.0).abs() < 1e-12);
        assert!(log_slope(&grid, &[1.0, 0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn grid_is_validated() {
        let mut rng = Rng::spawn(&seed_from_u64(1), b"g");
        let d = blobs(10, 1);
        let xi = hyper(1.0, 1.0, 1);
        assert!(convergence_probe(&d, &xi, 2, &[4, 8], 1, &mut rng).is_err());
        assert!(convergence_probe(&d, &xi, 2, &[8, 4, 16], 1, &mut rng).is_err());
    }
}
