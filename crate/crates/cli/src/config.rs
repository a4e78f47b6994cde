//! Scenario and training-audit config files.

use std::path::{Path, PathBuf};

use dvote_core::committee::CommitteeConfig;
use dvote_core::pipeline::ballots::sub_seed;
use dvote_core::pipeline::models::{
    reader_m0, reader_training_stream, signature_m0, signature_training_stream,
};
use dvote_core::pipeline::ElectionConfig;
use dvote_core::provenance::{fixtures, Hyperparams, Minibatch, Model};
use dvote_core::FixedPoint;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.into(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Config {
        what: what.into(),
        message: format!("{}: {e}", path.display()),
    })
}

/// A scenario fully determines every output byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub election: ElectionConfig,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainedModel {
    /// The 2→1 linear fixture.
    Linear,
    /// The 16→32→8 signature embedding.
    Signature,
    VoteReader,
}

fn default_steps() -> u32 {
    8
}

fn default_committee() -> CommitteeConfig {
    CommitteeConfig::honest(1)
}

fn default_candidates() -> u32 {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingAuditConfig {
    pub model: TrainedModel,
    #[serde(default = "default_steps")]
    pub steps: u32,
    #[serde(default)]
    pub seed: u64,
    /// Learning rate; each model has its own default.
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default = "default_candidates")]
    pub candidates: u32,
    #[serde(default = "default_committee")]
    pub scrutineers: CommitteeConfig,
    /// Forge the record from this step on and check it is caught there.
    #[serde(default)]
    pub tamper_step: Option<u32>,
}

impl TrainingAuditConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| {
            Err(CliError::Config {
                what: "training config".into(),
                message: m,
            })
        };
        if self.steps == 0 || self.steps > 32 {
            return bad("steps must be between 1 and 32".into());
        }
        if self.eta.is_some_and(|e| !(0.0..1024.0).contains(&e)) {
            return bad("eta must be non-negative and small".into());
        }
        if !(1..=4).contains(&self.candidates) {
            return bad("candidates must be between 1 and 4".into());
        }
        if let Some(j) = self.tamper_step {
            if j == 0 || j > self.steps {
                return bad(format!("tamper_step {j} is outside 1..={}", self.steps));
            }
        }
        Ok(())
    }

    /// `M_0`, the committed stream and the hyperparameters.
    pub fn build(&self) -> (Model, Vec<Minibatch>, Hyperparams) {
        let n = self.steps;
        let (m0, data, mut hp) = match self.model {
            TrainedModel::Linear => (
                fixtures::linear_model(),
                fixtures::linear_stream(n),
                fixtures::linear_hyperparams(n),
            ),
            TrainedModel::Signature => {
                let m0 = signature_m0(self.seed);
                let data =
                    signature_training_stream(&m0.spec, n, sub_seed(self.seed, "signature-data"));
                let hp = Hyperparams {
                    eta: FixedPoint::dyadic(1, 6),
                    batch: data[0].batch(),
                    steps: n,
                };
                (m0, data, hp)
            }
            TrainedModel::VoteReader => {
                let data =
                    reader_training_stream(self.candidates, n, sub_seed(self.seed, "reader-data"));
                let hp = Hyperparams {
                    eta: FixedPoint::dyadic(1, 6),
                    batch: data[0].batch(),
                    steps: n,
                };
                (reader_m0(self.candidates, self.seed), data, hp)
            }
        };
        if let Some(eta) = self.eta {
            hp.eta = FixedPoint::from_f64(eta);
        }
        (m0, data, hp)
    }
}
