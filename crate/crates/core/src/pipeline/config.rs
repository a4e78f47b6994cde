use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::arbiter::{ArbiterConfig, GasModel, DEFAULT_CLAIM_WINDOW, DEFAULT_TIMEOUT_ROUNDS};
use crate::committee::CommitteeConfig;
use crate::vm::FixedPoint;

fn default_claim_window() -> u64 {
    DEFAULT_CLAIM_WINDOW
}

fn default_timeout_rounds() -> u64 {
    DEFAULT_TIMEOUT_ROUNDS
}

fn default_true() -> bool {
    true
}

fn default_tau() -> f64 {
    1.0
}

/// Training schedule for both pipeline models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub steps: u32,
    pub signature_eta: f64,
    pub reader_eta: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            steps: 8,
            signature_eta: 1.0 / 64.0,
            reader_eta: 1.0 / 64.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElectionConfig {
    pub voters: u32,
    pub candidates: u32,
    pub seed: u64,
    /// Signature acceptance threshold on the squared embedding distance.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Fraction of voters whose envelope is signed by someone else; rounded
    /// to an exact count.
    pub impostor_rate: f64,
    /// Fraction of voters whose mark the reader cannot place; exact count,
    /// disjoint from impostors.
    pub unclear_rate: f64,
    #[serde(default)]
    pub abstain_rate: f64,
    pub scrutineers: CommitteeConfig,
    #[serde(default)]
    pub gas: GasModel,
    #[serde(default = "default_claim_window")]
    pub claim_window: u64,
    #[serde(default = "default_timeout_rounds")]
    pub timeout_rounds: u64,
    /// Print ballot ids on papers; off is the untraceable mode.
    #[serde(default = "default_true")]
    pub ballot_ids: bool,
    #[serde(default)]
    pub training: TrainingConfig,
}

impl ElectionConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.into()));
        if self.voters == 0 {
            return Err(PipelineError::EmptyRegistry);
        }
        if !(1..=super::models::MAX_CANDIDATES).contains(&self.candidates) {
            return bad("candidates must be between 1 and 4");
        }
        for (name, r) in [
            ("impostor_rate", self.impostor_rate),
            ("unclear_rate", self.unclear_rate),
            ("abstain_rate", self.abstain_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(PipelineError::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        let (imp, unc, abs) = self.counts();
        if imp + unc + abs > self.voters {
            return bad("impostor, unclear and abstaining voters exceed the electorate");
        }
        if !(self.tau > 0.0 && self.tau < 32768.0) {
            return bad("tau must be positive and representable");
        }
        if self.training.steps == 0
            || self.training.signature_eta < 0.0
            || self.training.reader_eta < 0.0
        {
            return bad("training needs at least one step and non-negative learning rates");
        }
        if self.claim_window == 0 || self.timeout_rounds == 0 {
            return bad("claim window and timeout must be positive");
        }
        Ok(())
    }

    /// Exact `(impostors, unclear, abstaining)` counts.
    pub fn counts(&self) -> (u32, u32, u32) {
        let n = self.voters as f64;
        let c = |r: f64| (r * n).round() as u32;
        (
            c(self.impostor_rate),
            c(self.unclear_rate),
            c(self.abstain_rate),
        )
    }

    pub fn tau_fixed(&self) -> FixedPoint {
        FixedPoint::from_f64(self.tau)
    }

    pub fn arbiter_config(&self) -> ArbiterConfig {
        ArbiterConfig {
            gas: self.gas.clone(),
            claim_window: self.claim_window,
            timeout_rounds: self.timeout_rounds,
        }
    }
}
