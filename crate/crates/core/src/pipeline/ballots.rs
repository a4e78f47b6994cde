//! Voters, envelopes and ballot papers: registration, production and casting.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::models::{quadrant, GRID, SIGNATURE_DIM};
use super::PipelineError;
use crate::hash::Digest;
use crate::vm::{FixedPoint, FixedTensor};

/// Independent PRNG stream `label` of the scenario seed.
pub fn sub_seed(seed: u64, label: &str) -> u64 {
    let d = Digest::of_parts([&seed.to_le_bytes()[..], label.as_bytes()]);
    u64::from_le_bytes(d.as_bytes()[..8].try_into().expect("8 bytes"))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoterRecord {
    pub voter_id: String,
    pub reference_signature: FixedTensor,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<VoterRecord>", into = "Vec<VoterRecord>")]
pub struct Registry {
    voters: Vec<VoterRecord>,
    index: BTreeMap<String, usize>,
}

impl TryFrom<Vec<VoterRecord>> for Registry {
    type Error = PipelineError;

    fn try_from(v: Vec<VoterRecord>) -> Result<Self, PipelineError> {
        Registry::new(v)
    }
}

impl From<Registry> for Vec<VoterRecord> {
    fn from(r: Registry) -> Self {
        r.voters
    }
}

impl Registry {
    pub fn new(voters: Vec<VoterRecord>) -> Result<Self, PipelineError> {
        if voters.is_empty() {
            return Err(PipelineError::EmptyRegistry);
        }
        let mut index = BTreeMap::new();
        for (i, v) in voters.iter().enumerate() {
            if index.insert(v.voter_id.clone(), i).is_some() {
                return Err(PipelineError::DuplicateVoter(v.voter_id.clone()));
            }
        }
        Ok(Registry { voters, index })
    }

    pub fn voters(&self) -> &[VoterRecord] {
        &self.voters
    }

    pub fn get(&self, voter_id: &str) -> Option<&VoterRecord> {
        self.index.get(voter_id).map(|&i| &self.voters[i])
    }

    pub fn len(&self) -> usize {
        self.voters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voters.is_empty()
    }

    pub fn digest(&self) -> Digest {
        Digest::of(
            serde_json::to_string(&self.voters)
                .expect("registry serializes")
                .as_bytes(),
        )
    }
}

fn grid_vector(rng: &mut ChaCha8Rng) -> FixedTensor {
    let v = (0..SIGNATURE_DIM)
        .map(|_| FixedPoint::dyadic(rng.gen_range(-8i64..=8), 3))
        .collect();
    FixedTensor::new(vec![1, SIGNATURE_DIM], v).expect("shape")
}

/// `n` voters `voter-0000…` with reference signatures on the `1/8` grid,
/// each drawn from its own per-voter seed.
pub fn register_voters(n: u32, seed: u64) -> Result<Registry, PipelineError> {
    let voters = (0..n)
        .map(|i| {
            let voter_id = format!("voter-{i:04}");
            let mut rng =
                ChaCha8Rng::seed_from_u64(sub_seed(seed, &format!("signature/{voter_id}")));
            VoterRecord {
                voter_id,
                reference_signature: grid_vector(&mut rng),
            }
        })
        .collect();
    Registry::new(voters)
}

/// What the machine read off a paper.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReadVote {
    Candidate(u32),
    Unidentifiable,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BallotPaper {
    /// Empty in no-ballot-id mode.
    pub ballot_id: String,
    /// `[1, 64]`, row-major 8×8.
    pub mark_image: FixedTensor,
    pub read_vote: Option<ReadVote>,
    /// What a human reviewer records for this paper; used only by the
    /// manual-review queue.
    pub manual_label: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub voter_id: String,
    pub scanned_signature: Option<FixedTensor>,
    pub ballot: BallotPaper,
}

/// One envelope per voter, each enclosing a blank paper. Ballot ids come
/// from their own PRNG stream and are dealt to envelopes in a permuted order
/// drawn from that stream, never from voter data.
pub fn produce_ballots(registry: &Registry, seed: u64, with_ids: bool) -> Vec<Envelope> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "ballot-ids"));
    let mut ids: Vec<String> = (0..registry.len())
        .map(|_| {
            if with_ids {
                format!("ballot-{:016x}", rng.gen::<u64>())
            } else {
                String::new()
            }
        })
        .collect();
    ids.shuffle(&mut rng);
    let blank = FixedTensor::new(
        vec![1, GRID * GRID],
        vec![FixedPoint::ZERO; (GRID * GRID) as usize],
    )
    .expect("shape");
    registry
        .voters()
        .iter()
        .zip(ids)
        .map(|(v, ballot_id)| Envelope {
            voter_id: v.voter_id.clone(),
            scanned_signature: None,
            ballot: BallotPaper {
                ballot_id,
                mark_image: blank.clone(),
                read_vote: None,
                manual_label: None,
            },
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Vote {
    Candidate(u32),
    /// A mark the reader cannot place; humans read it as the candidate.
    Unclear(u32),
    Abstain,
}

impl Vote {
    pub fn intended(&self) -> Option<u32> {
        match self {
            Vote::Candidate(c) | Vote::Unclear(c) => Some(*c),
            Vote::Abstain => None,
        }
    }
}

/// Scenario ground truth: each voter's vote and who signs as an impostor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VotePlan {
    pub votes: BTreeMap<String, Vote>,
    pub impostors: BTreeSet<String>,
}

/// Seeded ground truth with exact counts: impostors first, then unclear
/// marks and abstentions among the remaining voters; everyone else votes
/// for a uniformly drawn candidate.
pub fn plan_votes(
    registry: &Registry,
    candidates: u32,
    counts: (u32, u32, u32),
    seed: u64,
) -> VotePlan {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "plan"));
    let (impostors, unclear, abstain) = counts;
    let mut order: Vec<usize> = (0..registry.len()).collect();
    order.shuffle(&mut rng);
    let id = |i: usize| registry.voters()[i].voter_id.clone();
    let impostor_set: BTreeSet<String> =
        order[..impostors as usize].iter().map(|&i| id(i)).collect();
    let unclear_set: BTreeSet<usize> = order[impostors as usize..(impostors + unclear) as usize]
        .iter()
        .copied()
        .collect();
    let abstain_set: BTreeSet<usize> = order
        [(impostors + unclear) as usize..(impostors + unclear + abstain) as usize]
        .iter()
        .copied()
        .collect();
    let votes = (0..registry.len())
        .map(|i| {
            let c = rng.gen_range(0..candidates);
            let v = if unclear_set.contains(&i) {
                Vote::Unclear(c)
            } else if abstain_set.contains(&i) {
                Vote::Abstain
            } else {
                Vote::Candidate(c)
            };
            (id(i), v)
        })
        .collect();
    VotePlan {
        votes,
        impostors: impostor_set,
    }
}

/// Clear mark for candidate `c`: its quadrant nearly full, light stray ink
/// elsewhere.
pub fn render_clear(c: u32, rng: &mut impl Rng) -> Vec<FixedPoint> {
    (0..GRID * GRID)
        .map(|i| {
            if quadrant(i / GRID, i % GRID) == c {
                FixedPoint::dyadic(16 - rng.gen_range(0i64..=2), 4)
            } else {
                FixedPoint::dyadic(rng.gen_range(0i64..=1), 4)
            }
        })
        .collect()
}

/// Smudge spread over the whole grid, no quadrant standing out.
pub fn render_unclear(rng: &mut impl Rng) -> Vec<FixedPoint> {
    (0..GRID * GRID)
        .map(|_| FixedPoint::dyadic(rng.gen_range(2i64..=6), 3))
        .collect()
}

/// Signs and marks every envelope. Genuine signatures are the reference
/// plus a perturbation of at most `2/64` per feature; impostors sign with a
/// fresh vector. Abstaining voters mail nothing.
pub fn cast_votes(
    envelopes: Vec<Envelope>,
    registry: &Registry,
    plan: &VotePlan,
    candidates: u32,
    seed: u64,
) -> Result<Vec<Envelope>, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "cast"));
    let mut mailed = Vec::new();
    for mut e in envelopes {
        let vote = *plan
            .votes
            .get(&e.voter_id)
            .ok_or_else(|| PipelineError::UnknownVoter(e.voter_id.clone()))?;
        if let Some(c) = vote.intended() {
            if c >= candidates {
                return Err(PipelineError::UnknownCandidate(c));
            }
        }
        let reference = &registry
            .get(&e.voter_id)
            .ok_or_else(|| PipelineError::UnknownVoter(e.voter_id.clone()))?
            .reference_signature;
        let image = match vote {
            Vote::Abstain => continue,
            Vote::Candidate(c) => render_clear(c, &mut rng),
            Vote::Unclear(_) => render_unclear(&mut rng),
        };
        let signature = if plan.impostors.contains(&e.voter_id) {
            grid_vector(&mut rng)
        } else {
            let v = reference
                .data()
                .iter()
                .map(|r| FixedPoint::from_raw(r.raw() + rng.gen_range(-2i64..=2) * 1024))
                .collect();
            FixedTensor::new(vec![1, SIGNATURE_DIM], v).expect("shape")
        };
        e.scanned_signature = Some(signature);
        e.ballot.mark_image = FixedTensor::new(vec![1, GRID * GRID], image).expect("shape");
        e.ballot.manual_label = vote.intended();
        mailed.push(e);
    }
    Ok(mailed)
}
