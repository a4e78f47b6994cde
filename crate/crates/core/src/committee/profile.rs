use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::prover::Fabrication;
use crate::arbiter::ScrutineerId;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    Honest,
    /// Claims a perturbed output on tasks whose id starts with the filter.
    WrongOutput {
        filter: String,
    },
    /// Perturbs state `k` and executes honestly from there.
    CorruptAtStep {
        k: u64,
    },
    /// Copies `peer`'s claim once it is on record.
    LazyCopy {
        peer: ScrutineerId,
    },
    Silent,
}

impl Strategy {
    pub fn is_honest(&self) -> bool {
        matches!(self, Strategy::Honest)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Honest => "honest",
            Strategy::WrongOutput { .. } => "wrong-output",
            Strategy::CorruptAtStep { .. } => "corrupt-at-step",
            Strategy::LazyCopy { .. } => "lazy-copy",
            Strategy::Silent => "silent",
        }
    }

    /// Local trace this strategy commits to for `task_id`, if it computes one.
    pub fn fabrication(&self, task_id: &str) -> Option<Fabrication> {
        match self {
            Strategy::Honest => Some(Fabrication::Honest),
            Strategy::WrongOutput { filter } if task_id.starts_with(filter.as_str()) => {
                Some(Fabrication::WrongOutput)
            }
            Strategy::WrongOutput { .. } => Some(Fabrication::Honest),
            Strategy::CorruptAtStep { k } => Some(Fabrication::CorruptAt(*k)),
            Strategy::LazyCopy { .. } | Strategy::Silent => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::WrongOutput { filter } if filter.is_empty() => write!(f, "wrong-output"),
            Strategy::WrongOutput { filter } => write!(f, "wrong-output({filter}*)"),
            Strategy::CorruptAtStep { k } => write!(f, "corrupt-at-step({k})"),
            Strategy::LazyCopy { peer } => write!(f, "lazy-copy({peer})"),
            s => f.write_str(s.name()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StrategyParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    filter: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    k: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    peer: Option<u32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProfile {
    id: u32,
    #[serde(default)]
    affiliation: String,
    strategy: String,
    #[serde(default)]
    params: StrategyParams,
}

/// Committee member: identity plus a strategy fixed for the whole run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawProfile", into = "RawProfile")]
pub struct ScrutineerProfile {
    pub id: ScrutineerId,
    pub affiliation: String,
    pub strategy: Strategy,
}

impl ScrutineerProfile {
    pub fn new(id: u32, affiliation: impl Into<String>, strategy: Strategy) -> Self {
        ScrutineerProfile {
            id: ScrutineerId(id),
            affiliation: affiliation.into(),
            strategy,
        }
    }
}

impl TryFrom<RawProfile> for ScrutineerProfile {
    type Error = String;

    fn try_from(r: RawProfile) -> Result<Self, String> {
        let p = &r.params;
        let missing = |what: &str| {
            format!(
                "scrutineer {}: strategy `{}` needs param `{what}`",
                r.id, r.strategy
            )
        };
        let strategy = match r.strategy.as_str() {
            "honest" => Strategy::Honest,
            "wrong-output" => Strategy::WrongOutput {
                filter: p.filter.clone().unwrap_or_default(),
            },
            "corrupt-at-step" => Strategy::CorruptAtStep {
                k: p.k.ok_or_else(|| missing("k"))?,
            },
            "lazy-copy" => Strategy::LazyCopy {
                peer: ScrutineerId(p.peer.ok_or_else(|| missing("peer"))?),
            },
            "silent" => Strategy::Silent,
            other => return Err(format!("scrutineer {}: unknown strategy `{other}`", r.id)),
        };
        Ok(ScrutineerProfile {
            id: ScrutineerId(r.id),
            affiliation: r.affiliation,
            strategy,
        })
    }
}

impl From<ScrutineerProfile> for RawProfile {
    fn from(p: ScrutineerProfile) -> Self {
        let mut params = StrategyParams::default();
        match &p.strategy {
            Strategy::WrongOutput { filter } if !filter.is_empty() => {
                params.filter = Some(filter.clone())
            }
            Strategy::CorruptAtStep { k } => params.k = Some(*k),
            Strategy::LazyCopy { peer } => params.peer = Some(peer.0),
            _ => {}
        }
        RawProfile {
            id: p.id.0,
            affiliation: p.affiliation,
            strategy: p.strategy.name().to_string(),
            params,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CommitteeError {
    #[error("committee has no members")]
    Empty,
    #[error("duplicate scrutineer id {0}")]
    DuplicateId(ScrutineerId),
    #[error("{0} copies unknown or self peer {1}")]
    BadPeer(ScrutineerId, ScrutineerId),
}

/// The committee; `anytrust_holds` is always derived from the profiles.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ScrutineerProfile>", into = "Vec<ScrutineerProfile>")]
pub struct CommitteeConfig {
    profiles: Vec<ScrutineerProfile>,
}

impl CommitteeConfig {
    /// Profiles are kept sorted by id.
    pub fn new(mut profiles: Vec<ScrutineerProfile>) -> Result<Self, CommitteeError> {
        if profiles.is_empty() {
            return Err(CommitteeError::Empty);
        }
        profiles.sort_by_key(|p| p.id);
        let ids: BTreeSet<ScrutineerId> = profiles.iter().map(|p| p.id).collect();
        if ids.len() != profiles.len() {
            let dup = profiles
                .windows(2)
                .find(|w| w[0].id == w[1].id)
                .map(|w| w[0].id)
                .unwrap();
            return Err(CommitteeError::DuplicateId(dup));
        }
        for p in &profiles {
            if let Strategy::LazyCopy { peer } = p.strategy {
                if peer == p.id || !ids.contains(&peer) {
                    return Err(CommitteeError::BadPeer(p.id, peer));
                }
            }
        }
        Ok(CommitteeConfig { profiles })
    }

    /// `n` honest members with ids `0..n`.
    pub fn honest(n: u32) -> Self {
        Self::new(
            (0..n)
                .map(|i| ScrutineerProfile::new(i, format!("party-{i}"), Strategy::Honest))
                .collect(),
        )
        .expect("n > 0")
    }

    pub fn profiles(&self) -> &[ScrutineerProfile] {
        &self.profiles
    }

    pub fn profile(&self, id: ScrutineerId) -> Option<&ScrutineerProfile> {
        self.profiles.iter().find(|p| p.id == id)
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn anytrust_holds(&self) -> bool {
        self.profiles.iter().any(|p| p.strategy.is_honest())
    }

    pub fn honest_ids(&self) -> BTreeSet<ScrutineerId> {
        self.profiles
            .iter()
            .filter(|p| p.strategy.is_honest())
            .map(|p| p.id)
            .collect()
    }
}

impl TryFrom<Vec<ScrutineerProfile>> for CommitteeConfig {
    type Error = CommitteeError;

    fn try_from(v: Vec<ScrutineerProfile>) -> Result<Self, CommitteeError> {
        CommitteeConfig::new(v)
    }
}

impl From<CommitteeConfig> for Vec<ScrutineerProfile> {
    fn from(c: CommitteeConfig) -> Self {
        c.profiles
    }
}
