//! Benchmark inputs shared by the criterion targets.

use dvote_core::committee::{CommitteeConfig, ScrutineerProfile, Strategy, TaskInput};
use dvote_core::demo::signature_task;

/// A signature-distance task, the pipeline's most frequent workload.
pub fn signature_workload() -> TaskInput {
    signature_task("bench/sig", 3)
}

/// One corrupt claimant and one honest challenger.
pub fn dispute_committee(k: u64) -> CommitteeConfig {
    CommitteeConfig::new(vec![
        ScrutineerProfile::new(0, "claimant", Strategy::CorruptAtStep { k }),
        ScrutineerProfile::new(1, "challenger", Strategy::Honest),
    ])
    .expect("distinct ids")
}
