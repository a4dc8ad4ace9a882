//! Deterministic in-memory multi-user harness.
//!
//! A run partitions the training pool, plays every client round (in
//! parallel), aggregates once and evaluates the released model on held-out
//! data. Everything derives from the config's master seed, so identical
//! inputs produce identical reports and transcripts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{partition, stratified_folds, PartitionPlan};
use crate::dp::float_or_inf;
use crate::protocol::{self, ClientState, ProtocolParams, RunReport, RunStatus};
use crate::rng::{derive_seed, seed_from_u64, Rng, Seed};
use crate::secagg::{PairwiseSeedDirectory, Transcript, UserId};
use crate::stats::mean_std;
use crate::svm;
use crate::types::{Dataset, Hyperparams, ModelStack, PrivacySpec};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub num_users: usize,
    /// Local dataset size; `None` splits the training pool evenly.
    pub points_per_user: Option<usize>,
    pub hyper: Hyperparams,
    pub privacy: PrivacySpec,
    #[serde(default)]
    pub user_level: bool,
    /// Users that never submit; any entry aborts the round.
    #[serde(default)]
    pub dropout_ids: Vec<UserId>,
    /// Protocol-conformant users that omit their noise share.
    #[serde(default)]
    pub colluding_ids: Vec<UserId>,
    pub master_seed: u64,
    /// Fraction of each class held out for evaluation by [`run`].
    pub holdout_fraction: f64,
    pub scale_bits: u32,
    pub noise_allowance: f64,
}

impl SimConfig {
    pub fn new(num_users: usize, hyper: Hyperparams, privacy: PrivacySpec) -> Self {
        SimConfig {
            num_users,
            points_per_user: None,
            hyper,
            privacy,
            user_level: false,
            dropout_ids: Vec::new(),
            colluding_ids: Vec::new(),
            master_seed: 0,
            holdout_fraction: 1.0 / 6.0,
            scale_bits: crate::secagg::DEFAULT_SCALE_BITS,
            noise_allowance: protocol::DEFAULT_NOISE_ALLOWANCE,
        }
    }

    pub fn protocol_params(&self) -> ProtocolParams {
        ProtocolParams {
            num_users: self.num_users,
            hyper: self.hyper.clone(),
            privacy: self.privacy.clone(),
            user_level: self.user_level,
            scale_bits: self.scale_bits,
            noise_allowance: self.noise_allowance,
            round_tag: self.master_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.protocol_params().validate()?;
        let users = self.num_users as UserId;
        for &id in self.dropout_ids.iter().chain(&self.colluding_ids) {
            if id >= users {
                return Err(Error::param(format!("user id {id} out of range 0..{users}")));
            }
        }
        let allowed = ((1.0 - self.privacy.honest_fraction) * self.num_users as f64 + 1e-9).floor() as usize;
        let mut colluding = self.colluding_ids.clone();
        colluding.sort_unstable();
        colluding.dedup();
        if colluding.len() > allowed {
            return Err(Error::param(format!(
                "{} colluding users exceed the (1-t)|U| = {allowed} the accounting tolerates",
                colluding.len()
            )));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::param("holdout fraction must lie in [0,1)"));
        }
        Ok(())
    }

    /// The `(train, test)` split [`run`] uses; no test set when the holdout
    /// fraction is zero.
    pub fn split(&self, dataset: &Dataset) -> Result<(Dataset, Option<Dataset>)> {
        if self.holdout_fraction == 0.0 {
            return Ok((dataset.clone(), None));
        }
        let mut rng = Rng::spawn(&self.seed(), b"holdout");
        let (train, test) = holdout_split(dataset, self.holdout_fraction, &mut rng)?;
        Ok((train, Some(test)))
    }

    fn seed(&self) -> Seed {
        seed_from_u64(self.master_seed)
    }
}

/// Everything a run produced; the report is the serializable part.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub released: Option<ModelStack>,
    /// Noise-free local models, indexed by user id.
    pub local_models: Vec<ModelStack>,
    pub transcript: Transcript,
}

impl RunOutcome {
    /// Held-out accuracy of each local model.
    pub fn local_accuracies(&self, test: &Dataset, c: f64) -> Result<Vec<f64>> {
        self.local_models
            .par_iter()
            .map(|m| svm::accuracy(m, test, c))
            .collect()
    }
}

/// Stratified split into `(train, test)` with `fraction` of every class
/// held out.
pub fn holdout_split(dataset: &Dataset, fraction: f64, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
    use rand::seq::SliceRandom;

    let mut train = Vec::new();
    let mut test = Vec::new();
    for &class in dataset.classes() {
        let mut members: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.points()[i].label == class)
            .collect();
        members.shuffle(rng);
        let cut = (members.len() as f64 * fraction).round() as usize;
        test.extend_from_slice(&members[..cut]);
        train.extend_from_slice(&members[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((dataset.subset(&train)?, dataset.subset(&test)?))
}

/// Holds out `holdout_fraction` of the data for evaluation and runs the
/// protocol on the rest.
pub fn run(config: &SimConfig, dataset: &Dataset) -> Result<RunOutcome> {
    config.validate()?;
    let (train, test) = config.split(dataset)?;
    run_split(config, &train, test.as_ref())
}

/// Runs the protocol on `train`, evaluating on `test` when given.
pub fn run_split(config: &SimConfig, train: &Dataset, test: Option<&Dataset>) -> Result<RunOutcome> {
    config.validate()?;
    let params = config.protocol_params();
    let seed = config.seed();
    let plan = PartitionPlan {
        num_users: config.num_users,
        points_per_user: config.points_per_user,
    };
    let locals = partition(train, &plan, &mut Rng::spawn(&seed, b"partition"))?;
    let min_local = locals.iter().map(Dataset::len).min().unwrap_or(0);
    params.hyper.validate_for(min_local)?;
    let codec = params.codec(min_local)?;
    let ids = params.user_ids();
    let directory = PairwiseSeedDirectory::provision(&derive_seed(&seed, b"pairs"), &ids);

    let rounds: Vec<(Option<_>, ModelStack)> = locals
        .into_par_iter()
        .enumerate()
        .map(|(i, local)| {
            let id = i as UserId;
            let mut state = ClientState::new(id, local);
            if config.colluding_ids.contains(&id) {
                state = state.colluding();
            }
            let mut rng = Rng::spawn(&seed, format!("user/{id}").as_bytes());
            let (share, model) = protocol::client_round(&mut state, &params, &codec, &directory, &mut rng)?;
            let sent = (!config.dropout_ids.contains(&id)).then_some(share);
            Ok((sent, model))
        })
        .collect::<Result<_>>()?;

    let mut transcript = Transcript::default();
    let mut local_models = Vec::with_capacity(rounds.len());
    for (share, model) in rounds {
        transcript.messages.extend(share);
        local_models.push(model);
    }

    let ppu = config
        .points_per_user
        .unwrap_or(min_local);
    let accounting = protocol::released_epsilon(&params, ppu)?;
    let classes = train.classes();
    let (status, released) = match protocol::server_round(&transcript.messages, &ids, &codec, classes, train.cols()) {
        Ok(model) => {
            transcript.aggregations += 1;
            (RunStatus::Completed, Some(model))
        }
        Err(Error::Dropout { missing }) => (
            RunStatus::Aborted {
                reason: format!("dropout of users {missing:?}"),
                missing,
            },
            None,
        ),
        Err(e) => return Err(e),
    };
    let accuracy = match (&released, test) {
        (Some(model), Some(test)) => Some(svm::accuracy(model, test, config.hyper.c)?),
        _ => None,
    };
    let report = RunReport {
        status,
        released: released.clone(),
        accounting,
        accuracy,
        points_per_user: ppu,
        transcript_digest: transcript.digest(),
        shares: transcript.messages.len(),
        aggregations: transcript.aggregations,
        config: serde_json::to_value(config)?,
    };
    Ok(RunOutcome {
        report,
        released,
        local_models,
        transcript,
    })
}

/// Repeated stratified k-fold cross-validation; `folds <= 1` falls back to
/// a single holdout split per repeat.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub repeats: usize,
    pub folds: usize,
}

impl Default for CrossValidation {
    fn default() -> Self {
        CrossValidation { repeats: 5, folds: 6 }
    }
}

/// Seed of repeat `repeat` in grid cell `cell`.
pub fn cell_seed(master: u64, cell: usize, repeat: usize) -> u64 {
    let s = derive_seed(&seed_from_u64(master), format!("cell/{cell}/repeat/{repeat}").as_bytes());
    u64::from_le_bytes(s[..8].try_into().unwrap())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma: f64,
    #[serde(with = "float_or_inf")]
    pub epsilon: f64,
    pub num_users: usize,
    pub points_per_user: usize,
    pub lambda: f64,
    pub radius: f64,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub runs: usize,
    pub aborted: usize,
}

pub const SWEEP_CSV_HEADER: &str = "sigma,epsilon,num_users,points_per_user,lambda,radius,acc_mean,acc_std";

pub fn write_sweep_csv(rows: &[SweepRow], mut w: impl std::io::Write) -> Result<()> {
    writeln!(w, "{SWEEP_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.sigma, r.epsilon, r.num_users, r.points_per_user, r.lambda, r.radius, r.acc_mean, r.acc_std
        )?;
    }
    Ok(())
}

/// Runs every `(config, σ)` cell with repeated cross-validation.
///
/// Rows follow the order configs × sigmas.
pub fn sweep(configs: &[SimConfig], sigmas: &[f64], cv: CrossValidation, dataset: &Dataset) -> Result<Vec<SweepRow>> {
    if configs.is_empty() || sigmas.is_empty() {
        return Err(Error::param("sweep needs at least one config and one sigma"));
    }
    if cv.repeats == 0 {
        return Err(Error::param("sweep needs at least one repeat"));
    }
    let cells: Vec<(usize, SimConfig)> = configs
        .iter()
        .flat_map(|c| {
            sigmas.iter().map(move |&sigma| {
                let mut cfg = c.clone();
                cfg.privacy.sigma = sigma;
                cfg
            })
        })
        .enumerate()
        .collect();
    cells.par_iter().map(|(cell, cfg)| sweep_cell(*cell, cfg, cv, dataset)).collect()
}

fn sweep_cell(cell: usize, config: &SimConfig, cv: CrossValidation, dataset: &Dataset) -> Result<SweepRow> {
    let runs: Vec<RunReport> = (0..cv.repeats)
        .into_par_iter()
        .map(|repeat| {
            let mut cfg = config.clone();
            cfg.master_seed = cell_seed(config.master_seed, cell, repeat);
            if cv.folds <= 1 {
                return Ok(vec![run(&cfg, dataset)?.report]);
            }
            let folds = stratified_folds(dataset, cv.folds, &mut Rng::spawn(&cfg.seed(), b"folds"))?;
            folds
                .iter()
                .map(|fold| {
                    let mut held = vec![false; dataset.len()];
                    fold.iter().for_each(|&i| held[i] = true);
                    let train: Vec<usize> = (0..dataset.len()).filter(|&i| !held[i]).collect();
                    let outcome = run_split(&cfg, &dataset.subset(&train)?, Some(&dataset.subset(fold)?))?;
                    Ok(outcome.report)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<Vec<_>>>>()?
        .into_iter()
        .flatten()
        .collect();
    let accs: Vec<f64> = runs.iter().filter_map(|r| r.accuracy).collect();
    let (acc_mean, acc_std) = mean_std(&accs);
    // Folds may differ by a point; report the least private run.
    let worst = runs
        .iter()
        .min_by_key(|r| r.points_per_user)
        .ok_or_else(|| Error::param("cross-validation needs at least one repeat"))?;
    let points_per_user = worst.points_per_user;
    let epsilon = worst.accounting.epsilon;
    Ok(SweepRow {
        sigma: config.privacy.sigma,
        epsilon,
        num_users: config.num_users,
        points_per_user,
        lambda: config.hyper.lambda,
        radius: config.hyper.radius,
        acc_mean,
        acc_std,
        runs: runs.len(),
        aborted: runs.len() - accs.len(),
    })
}

/// Picks, for every `(σ, |U|, N)` combination, the row with the best mean
/// accuracy over the hyperparameter grid.
pub fn select_best(rows: &[SweepRow]) -> Vec<SweepRow> {
    let mut best: Vec<SweepRow> = Vec::new();
    for row in rows {
        let key = |r: &SweepRow| (r.sigma.to_bits(), r.num_users, r.points_per_user);
        match best.iter_mut().find(|b| key(b) == key(row)) {
            Some(b) if row.acc_mean > b.acc_mean => *b = row.clone(),
            Some(_) => {}
            None => best.push(row.clone()),
        }
    }
    best
}
