//! Gaussian output perturbation and its `(ε, δ)` accounting.
//!
//! Accounting uses the classical closed form `ε = √(2 ln(1.25/δ)) / σ` for
//! noise of standard deviation `σ·s` on an `s`-sensitive output. That bound is
//! only proven for `ε < 1`; larger values are still reported, with a
//! validity warning attached.

use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::types::{ModelStack, PrivacySpec};
use crate::{Error, Result};

/// `√(2 ln(1.25/δ))`.
pub fn gaussian_factor(delta: f64) -> f64 {
    (2.0 * (1.25 / delta).ln()).sqrt()
}

/// An ε value together with whether the closed-form bound applies to it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpsilonBound {
    pub epsilon: f64,
    /// Set when `ε ≥ 1`, outside the proven range of the bound.
    pub validity_warning: bool,
}

impl EpsilonBound {
    fn new(epsilon: f64) -> Self {
        EpsilonBound {
            epsilon,
            validity_warning: !(epsilon < 1.0),
        }
    }
}

/// ε of the Gaussian mechanism with noise multiplier `sigma`.
///
/// `sigma = 0` (no noise) yields `ε = ∞`.
pub fn epsilon_of_sigma(sigma: f64, delta: f64) -> EpsilonBound {
    if sigma == 0.0 {
        return EpsilonBound::new(f64::INFINITY);
    }
    EpsilonBound::new(gaussian_factor(delta) / sigma)
}

/// Noise multiplier that achieves `epsilon`; rejects `ε ∉ (0, 1)`.
pub fn sigma_of_epsilon(epsilon: f64, delta: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Validity(format!(
            "epsilon must lie in (0,1) for the Gaussian bound, got {epsilon}"
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Validity(format!("delta must lie in (0,1), got {delta}")));
    }
    Ok(gaussian_factor(delta) / epsilon)
}

/// ε for groups of `upsilon` records under linear group-privacy scaling.
pub fn group_epsilon(epsilon: f64, upsilon: usize) -> f64 {
    upsilon as f64 * epsilon
}

/// Extrapolates ε to a population of `target_users` when models were only
/// trained for `trained_users`: `ε' = trained·ε·Υ / target`.
pub fn rescale_epsilon(epsilon: f64, upsilon: usize, trained_users: usize, target_users: usize) -> f64 {
    trained_users as f64 * epsilon * upsilon as f64 / target_users as f64
}

/// Sensitivity of any learner whose output norm is bounded by `radius`,
/// valid for replacing a user's entire local dataset.
pub fn user_level_sensitivity(radius: f64) -> f64 {
    2.0 * radius
}

/// ε of noise calibrated as `σ·noise_sensitivity` when the actual
/// sensitivity of the protected neighborhood is `target_sensitivity`.
pub fn epsilon_for_sensitivity(
    sigma: f64,
    delta: f64,
    noise_sensitivity: f64,
    target_sensitivity: f64,
) -> EpsilonBound {
    let base = epsilon_of_sigma(sigma, delta).epsilon;
    EpsilonBound::new(base * target_sensitivity / noise_sensitivity)
}

/// Adds i.i.d. `N(0, std²)` to every entry of the model.
pub fn perturb(model: &ModelStack, std: f64, rng: &mut Rng) -> Result<ModelStack> {
    let noise = rng.gaussian_vector(model.as_flat().len(), std)?;
    let mut out = model.clone();
    out.as_flat_mut()
        .iter_mut()
        .zip(noise)
        .for_each(|(w, z)| *w += z);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// One party adds all the noise.
    Central,
    /// Every user adds a share, inflated for the honest fraction.
    Distributed,
}

/// Per-user noise scale of one release.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisePlan {
    pub mode: NoiseMode,
    pub per_user_std: f64,
    pub sensitivity: f64,
    pub sigma: f64,
    pub honest_fraction: f64,
    pub num_users: usize,
}

impl NoisePlan {
    /// Std of the noise in the released average when `contributors` of the
    /// users add their share.
    pub fn averaged_std(&self, contributors: usize) -> f64 {
        match self.mode {
            NoiseMode::Central => self.per_user_std,
            NoiseMode::Distributed => {
                (contributors as f64).sqrt() * self.per_user_std / self.num_users as f64
            }
        }
    }

    /// Std the DP guarantee requires in the average: `σ·s/|U|`.
    pub fn required_std(&self) -> f64 {
        match self.mode {
            NoiseMode::Central => self.sigma * self.sensitivity,
            NoiseMode::Distributed => self.sigma * self.sensitivity / self.num_users as f64,
        }
    }

    /// Smallest number of noise contributors the accounting assumes.
    pub fn min_honest(&self) -> usize {
        match self.mode {
            NoiseMode::Central => 1,
            NoiseMode::Distributed => {
                (self.honest_fraction * self.num_users as f64 - 1e-9).ceil().max(1.0) as usize
            }
        }
    }
}

/// Calibrates per-user noise: `σ·s` centrally, `σ·s/√(t·|U|)` distributed.
pub fn noise_plan(mode: NoiseMode, sensitivity: f64, spec: &PrivacySpec, num_users: usize) -> Result<NoisePlan> {
    spec.validate()?;
    if !(sensitivity > 0.0 && sensitivity.is_finite()) {
        return Err(Error::param(format!("sensitivity must be positive, got {sensitivity}")));
    }
    if num_users == 0 {
        return Err(Error::param("noise plan needs at least one user"));
    }
    let per_user_std = match mode {
        NoiseMode::Central => spec.sigma * sensitivity,
        NoiseMode::Distributed => {
            spec.sigma * sensitivity / (spec.honest_fraction * num_users as f64).sqrt()
        }
    };
    Ok(NoisePlan {
        mode,
        per_user_std,
        sensitivity,
        sigma: spec.sigma,
        honest_fraction: spec.honest_fraction,
        num_users,
    })
}

/// Serializes non-finite floats as the strings `"inf"`, `"-inf"`, `"nan"`
/// so that JSON reports can carry ε = ∞.
pub mod float_or_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a float: {other}"))),
            },
        }
    }
}

/// One line of an accounting table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonRow {
    /// `pointwise`, `group` or `user_level`.
    pub kind: String,
    pub upsilon: usize,
    /// Sensitivity of the protected neighborhood.
    pub sensitivity: f64,
    #[serde(with = "float_or_inf")]
    pub epsilon: f64,
    pub validity_warning: bool,
}

/// Accounting report of one release.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccountingReport {
    pub mode: NoiseMode,
    pub sigma: f64,
    pub delta: f64,
    pub t: f64,
    pub num_users: usize,
    /// Sensitivity the noise was calibrated to.
    pub sensitivity: f64,
    pub per_user_std: f64,
    #[serde(with = "float_or_inf")]
    pub epsilon: f64,
    pub upsilon: usize,
    #[serde(with = "float_or_inf")]
    pub group_epsilon: f64,
    pub validity_warning: bool,
    pub rows: Vec<EpsilonRow>,
}

/// Bounds needed for the group and user-level rows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupContext {
    /// Per-record sensitivity of the local learner.
    pub pointwise_sensitivity: f64,
    /// Model norm bound `R`, enabling the `2R` user-level bound.
    pub radius: Option<f64>,
    /// Local dataset size `N`; `Υ = N` protects a whole user.
    pub points_per_user: Option<usize>,
    /// Report the user-level row as the headline ε.
    pub user_level: bool,
}

/// Builds the accounting report for noise calibrated to `noise_sensitivity`.
///
/// Rows: the pointwise guarantee, the `Υ`-group guarantee (the tighter of
/// linear scaling and the `2R` bound) and, when `R` and `N` are known, the
/// user-level guarantee.
pub fn account(
    mode: NoiseMode,
    spec: &PrivacySpec,
    num_users: usize,
    noise_sensitivity: f64,
    ctx: GroupContext,
) -> Result<AccountingReport> {
    let plan = noise_plan(mode, noise_sensitivity, spec, num_users)?;
    let row = |kind: &str, upsilon: usize, target: f64| {
        let b = epsilon_for_sensitivity(spec.sigma, spec.delta, noise_sensitivity, target);
        EpsilonRow {
            kind: kind.into(),
            upsilon,
            sensitivity: target,
            epsilon: b.epsilon,
            validity_warning: b.validity_warning,
        }
    };
    let s1 = ctx.pointwise_sensitivity;
    let group_sens = |upsilon: usize| {
        let linear = upsilon as f64 * s1;
        ctx.radius
            .map_or(linear, |r| linear.min(user_level_sensitivity(r)))
    };
    let mut rows = vec![row("pointwise", 1, s1)];
    let upsilon = spec.group_size;
    if upsilon > 1 {
        rows.push(row("group", upsilon, group_sens(upsilon)));
    }
    if let (Some(_), Some(n)) = (ctx.radius, ctx.points_per_user) {
        rows.push(row("user_level", n, group_sens(n)));
    }
    if ctx.user_level && !rows.iter().any(|r| r.kind == "user_level") {
        return Err(Error::param("user-level accounting needs the radius and local dataset size"));
    }
    let headline_kind = if ctx.user_level { "user_level" } else { "pointwise" };
    let headline = rows.iter().find(|r| r.kind == headline_kind).unwrap_or(&rows[0]);
    let group = rows
        .iter()
        .find(|r| r.kind == "group")
        .map_or(rows[0].epsilon, |r| r.epsilon);
    Ok(AccountingReport {
        mode,
        sigma: spec.sigma,
        delta: spec.delta,
        t: spec.honest_fraction,
        num_users,
        sensitivity: noise_sensitivity,
        per_user_std: plan.per_user_std,
        epsilon: headline.epsilon,
        upsilon,
        group_epsilon: group,
        validity_warning: rows.iter().any(|r| r.validity_warning),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seed_from_u64;

    #[test]
    fn closed_form_values() {
        let e = epsilon_of_sigma(10.0, 1e-5);
        // √(2·ln 125000)/10, with ln 125000 = 11.736069016284437
        assert!((e.epsilon - 0.484480).abs() < 1e-5, "{}", e.epsilon);
        assert!(!e.validity_warning);
        let e = epsilon_of_sigma(4.8448, 1e-5);
        assert!((e.epsilon - 1.0).abs() < 1e-4);
        assert!(epsilon_of_sigma(4.8, 1e-5).validity_warning);
        assert_eq!(epsilon_of_sigma(20.0, 1e-5).epsilon * 2.0, epsilon_of_sigma(10.0, 1e-5).epsilon);
        assert!(epsilon_of_sigma(0.0, 1e-5).epsilon.is_infinite());
    }

    #[test]
    fn inversion() {
        let s = sigma_of_epsilon(0.59, 1e-5).unwrap();
        assert!((s - 8.2115).abs() < 1e-3, "{s}");
        for sigma in [1.5, 4.9, 8.2, 100.0] {
            let eps = epsilon_of_sigma(sigma, 1e-5).epsilon;
            if eps < 1.0 {
                assert!((sigma_of_epsilon(eps, 1e-5).unwrap() - sigma).abs() < 1e-12);
            }
        }
        assert!(matches!(sigma_of_epsilon(1.5, 1e-5), Err(Error::Validity(_))));
        assert!(sigma_of_epsilon(0.0, 1e-5).is_err());
    }

    #[test]
    fn group_and_user_level_scaling() {
        assert_eq!(group_epsilon(0.3, 1), 0.3);
        assert_eq!(group_epsilon(0.01, 50), 0.5);
        assert_eq!(user_level_sensitivity(0.07), 0.14);
        assert!((rescale_epsilon(0.5, 50, 1000, 200_000) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn noise_plans() {
        let spec = PrivacySpec {
            sigma: 10.0,
            honest_fraction: 0.5,
            ..Default::default()
        };
        let central = noise_plan(NoiseMode::Central, 1.0, &spec, 1).unwrap();
        assert_eq!(central.per_user_std, 10.0);
        let dist = noise_plan(NoiseMode::Distributed, 1.0, &spec, 1000).unwrap();
        assert!((dist.per_user_std - 10.0 / 500f64.sqrt()).abs() < 1e-12);
        assert_eq!(dist.min_honest(), 500);
        // ⌈t·|U|⌉ honest contributors already meet the required std.
        assert!(dist.averaged_std(dist.min_honest()) >= dist.required_std() * (1.0 - 1e-12));
        assert!(noise_plan(NoiseMode::Central, 0.0, &spec, 1).is_err());
    }

    #[test]
    fn perturbation() {
        let m = ModelStack::from_rows(vec![0, 1], vec![vec![0.5, -0.5], vec![1.0, 2.0]]).unwrap();
        let mut rng = Rng::spawn(&seed_from_u64(0), b"noise");
        assert_eq!(perturb(&m, 0.0, &mut rng).unwrap(), m);
        let a = perturb(&m, 1.0, &mut Rng::spawn(&seed_from_u64(0), b"n")).unwrap();
        let b = perturb(&m, 1.0, &mut Rng::spawn(&seed_from_u64(0), b"n")).unwrap();
        assert_eq!(a, b);

        let big = ModelStack::zeros(&(0..10).collect::<Vec<_>>(), 100_000);
        let noisy = perturb(&big, 0.25, &mut rng).unwrap();
        let v = noisy.as_flat();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
        assert!((std / 0.25 - 1.0).abs() < 0.01, "{std}");
    }

    #[test]
    fn accounting_rows() {
        let spec = PrivacySpec {
            sigma: 8.2115,
            delta: 1e-5,
            honest_fraction: 0.5,
            group_size: 50,
        };
        let ctx = GroupContext {
            pointwise_sensitivity: 0.69988,
            radius: Some(0.07),
            points_per_user: Some(50),
            user_level: false,
        };
        let r = account(NoiseMode::Distributed, &spec, 1000, 0.69988, ctx).unwrap();
        assert!((r.epsilon - 0.59).abs() < 1e-4);
        // 2R = 0.14 < 50·s, so the group row uses the 2R bound.
        let expect = r.epsilon * 0.14 / 0.69988;
        assert!((r.group_epsilon - expect).abs() < 1e-12);
        assert_eq!(r.rows.len(), 3);
        let json = serde_json::to_string(&r).unwrap();
        let back: AccountingReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn infinite_epsilon_serializes() {
        let spec = PrivacySpec {
            sigma: 0.0,
            ..Default::default()
        };
        let ctx = GroupContext {
            pointwise_sensitivity: 1.0,
            radius: None,
            points_per_user: None,
            user_level: false,
        };
        let r = account(NoiseMode::Central, &spec, 1, 1.0, ctx).unwrap();
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["epsilon"], "inf");
        assert!(r.validity_warning);
    }

    #[test]
    fn monotonicity() {
        let sigmas = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0];
        for w in sigmas.windows(2) {
            assert!(epsilon_of_sigma(w[0], 1e-5).epsilon > epsilon_of_sigma(w[1], 1e-5).epsilon);
        }
        for u in 1..20 {
            assert!(group_epsilon(0.1, u) < group_epsilon(0.1, u + 1));
        }
    }
}
