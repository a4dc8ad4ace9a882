//! Client and server rounds of the distributed release.
//!
//! A client trains locally, adds its share of Gaussian noise with
//! `σ̃ = σ/√(t·|U|)`, divides by `|U|`, encodes and masks the result and
//! sends it once. The server sums the masked shares in a single aggregation
//! and decodes the released average.

use serde::{Deserialize, Serialize};

use crate::dp::{self, AccountingReport, GroupContext, NoiseMode, NoisePlan};
use crate::rng::Rng;
use crate::secagg::{self, FixedPointCodec, MaskedShare, PairwiseSeedDirectory, UserId};
use crate::svm;
use crate::types::{Dataset, Hyperparams, Label, ModelStack, PrivacySpec};
use crate::{Error, Result};

/// Default clamp allowance, in per-user noise standard deviations.
pub const DEFAULT_NOISE_ALLOWANCE: f64 = 10.0;

/// Round-wide parameters every participant agrees on before training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolParams {
    pub num_users: usize,
    pub hyper: Hyperparams,
    pub privacy: PrivacySpec,
    /// Protect whole local datasets with the `2R` sensitivity bound.
    pub user_level: bool,
    pub scale_bits: u32,
    /// Codec clamp headroom, in per-user noise standard deviations.
    pub noise_allowance: f64,
    pub round_tag: u64,
}

impl ProtocolParams {
    pub fn new(num_users: usize, hyper: Hyperparams, privacy: PrivacySpec) -> Self {
        ProtocolParams {
            num_users,
            hyper,
            privacy,
            user_level: false,
            scale_bits: secagg::DEFAULT_SCALE_BITS,
            noise_allowance: DEFAULT_NOISE_ALLOWANCE,
            round_tag: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.privacy.validate()?;
        if self.num_users == 0 {
            return Err(Error::param("need at least one user"));
        }
        if self.privacy.honest_fraction * (self.num_users as f64) < 1.0 - 1e-9 {
            return Err(Error::param(format!(
                "honest fraction {} leaves no honest user among {}",
                self.privacy.honest_fraction, self.num_users
            )));
        }
        if !(self.noise_allowance >= 0.0) {
            return Err(Error::param("noise allowance must be non-negative"));
        }
        Ok(())
    }

    /// Sensitivity the noise is calibrated to for a local dataset of `n`
    /// points: the per-record bound, or `2R` in user-level mode.
    pub fn noise_sensitivity(&self, n: usize) -> f64 {
        if self.user_level {
            dp::user_level_sensitivity(self.hyper.radius)
        } else {
            svm::sensitivity(&self.hyper, n)
        }
    }

    pub fn noise_mode(&self) -> NoiseMode {
        if self.num_users == 1 {
            NoiseMode::Central
        } else {
            NoiseMode::Distributed
        }
    }

    pub fn noise_plan(&self, n: usize) -> Result<NoisePlan> {
        dp::noise_plan(self.noise_mode(), self.noise_sensitivity(n), &self.privacy, self.num_users)
    }

    /// Codec shared by all users when the smallest local dataset has
    /// `min_local` points. Each coordinate of `M_priv/|U|` is bounded by
    /// `(R + allowance·σ̃s)/|U|`.
    pub fn codec(&self, min_local: usize) -> Result<FixedPointCodec> {
        let plan = self.noise_plan(min_local)?;
        let clamp = (self.hyper.radius + self.noise_allowance * plan.per_user_std) / self.num_users as f64;
        let codec = FixedPointCodec::new(self.scale_bits, clamp)?;
        codec.validate_users(self.num_users)?;
        Ok(codec)
    }

    /// All user ids of the round, `0..|U|`.
    pub fn user_ids(&self) -> Vec<UserId> {
        (0..self.num_users as UserId).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientPhase {
    Idle,
    Trained,
    Noised,
    Submitted,
}

/// One user's protocol state machine: idle → trained → noised → submitted.
#[derive(Clone, Debug)]
pub struct ClientState {
    user_id: UserId,
    dataset: Dataset,
    phase: ClientPhase,
    /// Honest clients always add noise; colluders skip it.
    adds_noise: bool,
    model: Option<ModelStack>,
}

impl ClientState {
    pub fn new(user_id: UserId, dataset: Dataset) -> Self {
        ClientState {
            user_id,
            dataset,
            phase: ClientPhase::Idle,
            adds_noise: true,
            model: None,
        }
    }

    /// Marks the client as colluding: it still follows the protocol but
    /// omits its noise share.
    pub fn colluding(mut self) -> Self {
        self.adds_noise = false;
        self
    }

    pub fn user_id(&self) -> UserId {
        self.user_id
    }

    pub fn phase(&self) -> ClientPhase {
        self.phase
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    fn expect(&self, phase: ClientPhase) -> Result<()> {
        if self.phase != phase {
            return Err(Error::protocol(format!(
                "user {} is in phase {:?}, expected {phase:?}",
                self.user_id, self.phase
            )));
        }
        Ok(())
    }

    /// Trains the local model; returns the noise-free model.
    pub fn train(&mut self, params: &ProtocolParams, rng: &mut Rng) -> Result<ModelStack> {
        self.expect(ClientPhase::Idle)?;
        let model = svm::train(&self.dataset, &params.hyper, rng)?;
        self.model = Some(model.clone());
        self.phase = ClientPhase::Trained;
        Ok(model)
    }

    pub fn add_noise(&mut self, params: &ProtocolParams, rng: &mut Rng) -> Result<()> {
        self.expect(ClientPhase::Trained)?;
        let plan = params.noise_plan(self.dataset.len())?;
        let std = if self.adds_noise { plan.per_user_std } else { 0.0 };
        let model = self.model.take().expect("trained phase holds a model");
        self.model = Some(dp::perturb(&model, std, rng)?);
        self.phase = ClientPhase::Noised;
        Ok(())
    }

    /// Encodes `M_priv/|U|`, masks it and produces the single outgoing share.
    pub fn submit(
        &mut self,
        params: &ProtocolParams,
        codec: &FixedPointCodec,
        directory: &PairwiseSeedDirectory,
    ) -> Result<MaskedShare> {
        self.expect(ClientPhase::Noised)?;
        let model = self.model.as_ref().expect("noised phase holds a model");
        let scale = 1.0 / params.num_users as f64;
        let scaled: Vec<f64> = model.as_flat().iter().map(|v| v * scale).collect();
        let encoded = codec.encode(&scaled).map_err(|e| match e {
            Error::Saturation {
                coordinate, value, bound,
            } => Error::protocol(format!(
                "user {} cannot encode coordinate {coordinate} ({value} > clamp {bound}); \
                 the clamp (R={} plus {} noise std over |U|={}) is too small for this share",
                self.user_id, params.hyper.radius, params.noise_allowance, params.num_users
            )),
            other => other,
        })?;
        let payload = secagg::mask(
            &encoded,
            self.user_id,
            directory,
            &params.user_ids(),
            params.round_tag,
        )?;
        self.model = None;
        self.phase = ClientPhase::Submitted;
        Ok(MaskedShare {
            round_tag: params.round_tag,
            user_id: self.user_id,
            payload,
        })
    }
}

/// A whole client round. Returns the share and the noise-free local model.
pub fn client_round(
    state: &mut ClientState,
    params: &ProtocolParams,
    codec: &FixedPointCodec,
    directory: &PairwiseSeedDirectory,
    rng: &mut Rng,
) -> Result<(MaskedShare, ModelStack)> {
    if params.num_users < 2 && params.noise_mode() == NoiseMode::Distributed {
        return Err(Error::param("distributed rounds need at least two users"));
    }
    let local = state.train(params, rng)?;
    state.add_noise(params, rng)?;
    let share = state.submit(params, codec, directory)?;
    Ok((share, local))
}

/// Aggregates once and decodes the released model. The `1/|U|` scaling was
/// applied by the clients.
pub fn server_round(
    shares: &[MaskedShare],
    expected_ids: &[UserId],
    codec: &FixedPointCodec,
    classes: &[Label],
    cols: usize,
) -> Result<ModelStack> {
    let sum = secagg::aggregate(shares, expected_ids)?;
    ModelStack::from_flat(classes.to_vec(), cols, codec.decode(&sum, 1))
}

/// Privacy of the released average for local datasets of `points_per_user`.
pub fn released_epsilon(params: &ProtocolParams, points_per_user: usize) -> Result<AccountingReport> {
    params.validate()?;
    let ctx = GroupContext {
        pointwise_sensitivity: svm::sensitivity(&params.hyper, points_per_user),
        radius: Some(params.hyper.radius),
        points_per_user: Some(points_per_user),
        user_level: params.user_level,
    };
    dp::account(
        params.noise_mode(),
        &params.privacy,
        params.num_users,
        params.noise_sensitivity(points_per_user),
        ctx,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Aborted { reason: String, missing: Vec<UserId> },
}

/// Outcome of one protocol run, as written to the JSON report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    #[serde(flatten)]
    pub status: RunStatus,
    pub released: Option<ModelStack>,
    pub accounting: AccountingReport,
    pub accuracy: Option<f64>,
    /// Smallest local dataset size, the `N` of the accounting.
    pub points_per_user: usize,
    pub transcript_digest: String,
    pub shares: usize,
    pub aggregations: usize,
    pub config: serde_json::Value,
}
