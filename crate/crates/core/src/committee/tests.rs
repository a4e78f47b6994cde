use proptest::prelude::*;

use super::Strategy;
use super::*;
use crate::arbiter::{ArbiterConfig, ScrutineerId, Verdict};
use crate::demo::{add_task, chain_task};
use crate::vm::FixedPoint;
use proptest::strategy::Strategy as _;

fn committee(strategies: Vec<Strategy>) -> CommitteeConfig {
    CommitteeConfig::new(
        strategies
            .into_iter()
            .enumerate()
            .map(|(i, s)| ScrutineerProfile::new(i as u32, format!("party-{i}"), s))
            .collect(),
    )
    .unwrap()
}

fn wrong() -> Strategy {
    Strategy::WrongOutput {
        filter: String::new(),
    }
}

fn honest_hash(task: &TaskInput) -> crate::hash::Digest {
    task.program
        .execute(&task.inputs)
        .unwrap()
        .trace
        .commitment
        .output_hash
}

#[test]
fn empty_round_only_advances_the_counter() {
    let mut w = World::new(CommitteeConfig::honest(3), ArbiterConfig::default());
    let digest = w.arbiter().state_digest();
    w.run_round();
    assert_eq!(w.round(), 1);
    assert_eq!(w.arbiter().state_digest(), digest);
    assert!(w.transcript().is_empty());
}

#[test]
fn honest_committee_of_five_is_unanimous_within_three_rounds() {
    let task = chain_task("t", 12, 1);
    let mut w = World::new(CommitteeConfig::honest(5), ArbiterConfig::default());
    let out = w.run_task(&task).unwrap();
    assert_eq!(out.accepted_output(), Some(honest_hash(&task)));
    assert!(out.games.is_empty());
    assert_eq!(out.compute_gas, 0);
    assert!(out.rounds() <= 3, "took {} rounds", out.rounds());
}

#[test]
fn seven_of_ten_dishonest_are_all_voided() {
    let mut s = vec![wrong(); 7];
    s.extend(vec![Strategy::Honest; 3]);
    let task = chain_task("t", 20, 2);
    let mut w = World::new(committee(s), ArbiterConfig::default());
    let out = w.run_task(&task).unwrap();
    assert_eq!(out.accepted_output(), Some(honest_hash(&task)));
    assert_eq!(out.voided, (0..7).map(ScrutineerId).collect::<Vec<_>>());
}

#[test]
fn corruption_at_step_k_is_localized() {
    let task = chain_task("t", 16, 3);
    for k in 1..=16 {
        let mut w = World::new(
            committee(vec![Strategy::CorruptAtStep { k }, Strategy::Honest]),
            ArbiterConfig::default(),
        );
        let out = w.run_task(&task).unwrap();
        assert_eq!(out.accepted_output(), Some(honest_hash(&task)));
        assert_eq!(out.games.len(), 1);
        let g = &out.games[0];
        assert_eq!(g.window, (k - 1, k));
        assert_eq!(g.loser, Some(ScrutineerId(0)));
        assert!(g.rounds_elapsed <= g.round_bound);
    }
}

#[test]
fn one_plus_one_dispute_in_committee() {
    let task = add_task("add", FixedPoint::ONE, FixedPoint::ONE);
    let mut w = World::new(
        committee(vec![wrong(), Strategy::Honest]),
        ArbiterConfig::default(),
    );
    let out = w.run_task(&task).unwrap();
    assert_eq!(out.games[0].verdict, Some(Verdict::ChallengerWins));
    assert_eq!(out.games[0].rounds_elapsed, 1);
    assert_eq!(
        out.outputs.unwrap()["sum"].data()[0],
        FixedPoint::from_int(2)
    );
}

#[test]
fn corrupted_input_claim_is_rejected_and_times_out() {
    let task = chain_task("t", 8, 4);
    let mut w = World::new(
        committee(vec![Strategy::CorruptAtStep { k: 0 }, Strategy::Honest]),
        ArbiterConfig::default(),
    );
    let out = w.run_task(&task).unwrap();
    assert_eq!(out.accepted_output(), Some(honest_hash(&task)));
    assert_eq!(out.timed_out, vec![ScrutineerId(0)]);
    assert!(w.rejections()[0].error.contains("committed input"));
}

#[test]
fn silent_and_lazy_members() {
    let task = chain_task("t", 8, 5);
    let s = vec![
        Strategy::Silent,
        Strategy::LazyCopy {
            peer: ScrutineerId(2),
        },
        Strategy::Honest,
    ];
    let mut w = World::new(committee(s), ArbiterConfig::default());
    let out = w.run_task(&task).unwrap();
    assert_eq!(out.accepted_output(), Some(honest_hash(&task)));
    assert!(out.games.is_empty());
    assert_eq!(out.timed_out, vec![ScrutineerId(0)]);
    let rec = w.arbiter().task("t").unwrap();
    assert_eq!(
        rec.claim_of(ScrutineerId(1)).unwrap().commitment(),
        rec.claim_of(ScrutineerId(2)).unwrap().commitment()
    );
    assert!(w
        .transcript()
        .iter()
        .any(|m| m.kind == PayloadKind::Noop && m.from == ScrutineerId(0)));
}

#[test]
fn wrong_output_filter_limits_the_lie() {
    let s = vec![
        Strategy::WrongOutput {
            filter: "vote/".into(),
        },
        Strategy::Honest,
    ];
    let mut w = World::new(committee(s), ArbiterConfig::default());
    let sig = w.run_task(&chain_task("sig/0", 8, 6)).unwrap();
    assert!(sig.games.is_empty());
    let vote = w.run_task(&chain_task("vote/0", 8, 6)).unwrap();
    assert_eq!(vote.voided, vec![ScrutineerId(0)]);
}

#[test]
fn zero_honest_members_accept_the_lie() {
    let task = chain_task("t", 8, 7);
    let cfg = committee(vec![wrong(); 10]);
    assert!(!cfg.anytrust_holds());
    let mut w = World::new(cfg, ArbiterConfig::default());
    let out = w.run_task(&task).unwrap();
    assert!(out.accepted_output().is_some());
    assert_ne!(out.accepted_output(), Some(honest_hash(&task)));
}

fn mixed_run(parallel: bool) -> (crate::hash::Digest, String) {
    let s = vec![
        Strategy::CorruptAtStep { k: 5 },
        Strategy::Honest,
        wrong(),
        Strategy::LazyCopy {
            peer: ScrutineerId(0),
        },
        Strategy::Silent,
    ];
    let mut w = World::new(committee(s), ArbiterConfig::default()).parallel(parallel);
    let tasks: Vec<TaskInput> = (0..4)
        .map(|i| chain_task(&format!("t{i}"), 10 + i, i as u64))
        .collect();
    w.run_tasks(&tasks).unwrap();
    (w.ledger_digest(), w.transcript_jsonl())
}

#[test]
fn runs_are_reproducible_and_parallel_matches_sequential() {
    let a = mixed_run(false);
    assert_eq!(a, mixed_run(false));
    assert_eq!(a, mixed_run(true));
}

fn strategy(n: u32) -> impl proptest::strategy::Strategy<Value = Strategy> {
    prop_oneof![
        Just(Strategy::Honest),
        Just(wrong()),
        (0u64..40).prop_map(|k| Strategy::CorruptAtStep { k }),
        (0..n).prop_map(|p| Strategy::LazyCopy {
            peer: ScrutineerId(p)
        }),
        Just(Strategy::Silent),
    ]
}

fn scenario() -> impl proptest::strategy::Strategy<Value = (Vec<Strategy>, u32, u64, usize)> {
    (2u32..=8).prop_flat_map(|n| {
        (
            prop::collection::vec(strategy(n), n as usize),
            2u32..40,
            any::<u64>(),
            0..n as usize,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn anytrust_soundness((mut strategies, steps, seed, h) in scenario()) {
        strategies[h] = Strategy::Honest;
        for (i, s) in strategies.iter_mut().enumerate() {
            if *s == (Strategy::LazyCopy { peer: ScrutineerId(i as u32) }) {
                *s = Strategy::Silent;
            }
        }
        let cfg = committee(strategies);
        let honest_ids = cfg.honest_ids();
        let task = chain_task("t", steps, seed);
        let mut w = World::new(cfg, ArbiterConfig::default());
        let out = w.run_task(&task).unwrap();
        prop_assert_eq!(out.accepted_output(), Some(honest_hash(&task)));
        for g in &out.games {
            prop_assert!(!honest_ids.contains(&g.loser.unwrap()));
            prop_assert!(g.rounds_elapsed <= g.round_bound);
        }
    }
}
