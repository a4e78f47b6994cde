//! The acceptance suite: one line per criterion on stdout, then a single
//! assertion that every criterion passed.

use std::collections::BTreeSet;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use dvote_core::arbiter::{ArbiterConfig, GasModel, ScrutineerId, TaskStatus};
use dvote_core::committee::{CommitteeConfig, ScrutineerProfile, Strategy, TaskInput, World};
use dvote_core::demo::{chain_task, signature_task};
use dvote_core::pipeline::{
    local_oracle, run_election, ElectionConfig, ElectionRun, ReadVote, TallyResult,
};
use dvote_core::provenance::fixtures::{
    forge_from_step, linear_hyperparams, linear_model, linear_stream, signature_hyperparams,
    signature_m0, signature_stream,
};
use dvote_core::provenance::{
    grad_name, train_local, train_model, train_step, verify_provenance, InvalidReason, Minibatch,
    Model, Verification,
};
use dvote_core::vm::trace::NamedTensors;
use dvote_core::vm::{linearize, LayerSpec, ModelSpec};
use dvote_core::{Digest, FixedPoint, FixedTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture_config(name: &str) -> ElectionConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name);
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    serde_json::from_value(v["election"].clone()).unwrap()
}

fn elect(config: &ElectionConfig, parallel: bool) -> ElectionRun {
    let world = World::new(config.scrutineers.clone(), config.arbiter_config()).parallel(parallel);
    run_election(config, world).unwrap()
}

fn committee(strategies: &[Strategy]) -> CommitteeConfig {
    CommitteeConfig::new(
        strategies
            .iter()
            .enumerate()
            .map(|(i, s)| ScrutineerProfile::new(i as u32, format!("m{i}"), s.clone()))
            .collect(),
    )
    .unwrap()
}

fn honest_output(task: &TaskInput) -> Digest {
    task.program
        .execute(&task.inputs)
        .unwrap()
        .trace
        .commitment
        .output_hash
}

fn gas_estimate() {
    let e = GasModel::default().estimate_gas(30_000_000_000).unwrap();
    assert_eq!(e.gas, 90_000_000_000);
    assert_eq!(e.block_gas_limit, 30_000_000);
    assert_eq!(e.whole_blocks(), Some(3000));
}

fn dispute_round_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0002);
    let mut violations = Vec::new();
    for case in 0..500u32 {
        // Log-uniform lengths so short traces are as well covered as long ones.
        let t: u64 = match case {
            0 => 2,
            1 => 10_000,
            _ => (2f64.powf(rng.gen_range(1.0..(10_000f64).log2())))
                .round()
                .clamp(2.0, 10_000.0) as u64,
        };
        let k = rng.gen_range(1..=t);
        let task = chain_task(&format!("bound/{case}"), t as u32, rng.gen());
        let strategies = if rng.gen_bool(0.5) {
            [Strategy::CorruptAtStep { k }, Strategy::Honest]
        } else {
            [Strategy::Honest, Strategy::CorruptAtStep { k }]
        };
        let mut w = World::new(committee(&strategies), ArbiterConfig::default());
        let out = w.run_task(&task).unwrap();
        assert_eq!(out.games.len(), 1);
        let g = &out.games[0];
        let bound = (t as f64).log2().ceil() as u32 + 1;
        if g.rounds_elapsed > bound
            || g.window != (k - 1, k)
            || out.accepted_output() != Some(honest_output(&task))
        {
            violations.push((t, k, g.rounds_elapsed, bound, g.window));
        }
    }
    assert!(violations.is_empty(), "violations: {violations:?}");
}

fn random_adversary(rng: &mut ChaCha8Rng, steps: u64) -> Strategy {
    match rng.gen_range(0..4) {
        0 => Strategy::WrongOutput {
            filter: String::new(),
        },
        1 => Strategy::CorruptAtStep {
            k: rng.gen_range(1..=steps),
        },
        // Peer chosen once positions are fixed.
        2 => Strategy::LazyCopy {
            peer: ScrutineerId(u32::MAX),
        },
        _ => Strategy::Silent,
    }
}

fn anytrust_soundness() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0003);
    let mut failures = Vec::new();
    for s in 0..200u32 {
        let task = if s % 25 == 0 {
            signature_task(&format!("sound/{s}"), s as u64)
        } else {
            chain_task(&format!("sound/{s}"), rng.gen_range(2..=300), rng.gen())
        };
        let steps = task.program.step_count();
        let (size, dishonest) = if s % 5 == 0 {
            (10, 7)
        } else {
            let size = rng.gen_range(2..=16usize);
            (size, rng.gen_range(0..size))
        };
        let mut strategies: Vec<Strategy> = (0..size)
            .map(|i| {
                if i < dishonest {
                    random_adversary(&mut rng, steps)
                } else {
                    Strategy::Honest
                }
            })
            .collect();
        // Shuffle so honest members are not always the late claimants.
        for i in (1..size).rev() {
            strategies.swap(i, rng.gen_range(0..=i));
        }
        for (i, s) in strategies.iter_mut().enumerate() {
            if let Strategy::LazyCopy { peer } = s {
                let p = (i + rng.gen_range(1..size)) % size;
                *peer = ScrutineerId(p as u32);
            }
        }
        let c = committee(&strategies);
        let honest = c.honest_ids();
        assert!(!honest.is_empty());
        let mut w = World::new(c, ArbiterConfig::default());
        let out = w.run_task(&task).unwrap();
        let honest_lost = out
            .games
            .iter()
            .any(|g| g.loser.is_some_and(|l| honest.contains(&l)))
            || out.voided.iter().any(|v| honest.contains(v));
        if out.accepted_output() != Some(honest_output(&task)) || honest_lost {
            failures.push((
                s,
                strategies.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            ));
        }
    }
    assert!(failures.is_empty(), "unsound scenarios: {failures:?}");
}

fn anytrust_failure_boundary() {
    let config = fixture_config("zero-honest.json");
    let run = elect(&config, false);
    assert!(!run.report.anytrust_holds);
    let reads: Vec<_> = run
        .world
        .arbiter()
        .tasks()
        .filter(|t| t.spec.task_id.starts_with("read/"))
        .collect();
    assert!(!reads.is_empty());
    for t in &reads {
        assert!(
            matches!(
                t.status,
                TaskStatus::Accepted {
                    after_dispute: false,
                    ..
                }
            ),
            "{} not accepted unanimously",
            t.spec.task_id
        );
        assert!(t.games.is_empty());
    }
    assert_ne!(
        run.report.tally,
        local_oracle(&config).unwrap().tally,
        "the wrong tally should have been accepted"
    );
}

fn random_model(rng: &mut ChaCha8Rng) -> ModelSpec {
    let depth = rng.gen_range(1..=3);
    let mut widths = vec![rng.gen_range(1..=12u32)];
    for _ in 0..depth {
        widths.push(rng.gen_range(1..=12));
    }
    let mut spec = ModelSpec::mlp(&widths, rng.gen());
    if rng.gen_bool(0.3) {
        let last = spec.layers.len() - 1;
        spec.layers.insert(last, LayerSpec::activation("sigmoid"));
        spec.layers.swap(last, last + 1);
    }
    if rng.gen_bool(0.3) {
        spec.layers.push(LayerSpec::activation("argmax"));
    }
    spec
}

fn determinism() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0005);
    for _ in 0..50 {
        let spec = random_model(&mut rng);
        let model = Model::dyadic("random", spec.clone()).unwrap();
        let batch = rng.gen_range(1..=4u32);
        let width = spec.input_width().unwrap();
        let x: Vec<FixedPoint> = (0..batch * width)
            .map(|_| FixedPoint::from_raw(rng.gen_range(-(2 << 16)..(2 << 16))))
            .collect();
        let mut inputs: NamedTensors = model.params.clone();
        inputs.insert("x".into(), FixedTensor::new(vec![batch, width], x).unwrap());
        let graph = spec.inference_graph(batch).unwrap();
        let first = linearize(&graph)
            .unwrap()
            .execute(&inputs)
            .unwrap()
            .trace
            .commitment;
        let second = linearize(&spec.inference_graph(batch).unwrap())
            .unwrap()
            .execute(&inputs)
            .unwrap()
            .trace
            .commitment;
        assert_eq!(
            serde_json::to_vec(&first).unwrap(),
            serde_json::to_vec(&second).unwrap()
        );
    }
    let config = fixture_config("election-100.json");
    let a = elect(&config, false).report.to_json();
    let b = elect(&config, true).report.to_json();
    assert_eq!(a.as_bytes(), b.as_bytes());
}

/// Scalar Q16.16 gradient descent on `y = x₀w₀ + x₁w₁ + b`, written against
/// raw integers: products floor-shift by 16 and each dot product truncates
/// once.
fn scalar_linear_oracle(n: u32) -> Model {
    let m = linear_model();
    let mut w = [m.param("w0").data()[0].raw(), m.param("w0").data()[1].raw()];
    let mut b = m.param("b0").data()[0].raw();
    let eta = linear_hyperparams(n).eta.raw() as i128;
    let mul = |a: i128, c: i128| (a * c) >> 16;
    for d in linear_stream(n) {
        let x: Vec<[i128; 2]> =
            d.x.data()
                .chunks(2)
                .map(|r| [r[0].raw() as i128, r[1].raw() as i128])
                .collect();
        let t: Vec<i128> = d.t.data().iter().map(|v| v.raw() as i128).collect();
        let inv_b = 65536 / x.len() as i128;
        let e: Vec<i128> = x
            .iter()
            .zip(&t)
            .map(|(r, t)| ((r[0] * w[0] as i128 + r[1] * w[1] as i128) >> 16) + b as i128 - t)
            .collect();
        for (j, wj) in w.iter_mut().enumerate() {
            let raw = x.iter().zip(&e).map(|(r, e)| r[j] * e).sum::<i128>() >> 16;
            *wj -= mul(mul(raw, inv_b), eta) as i64;
        }
        b -= mul(mul(e.iter().sum(), inv_b), eta) as i64;
    }
    let mut p = NamedTensors::new();
    p.insert("w0".into(), FixedTensor::from_raw(&[2, 1], &w).unwrap());
    p.insert("b0".into(), FixedTensor::from_raw(&[1], &[b]).unwrap());
    Model::new("linear", m.spec, &p).unwrap()
}

fn composition_identity() {
    let (m0, data, hp) = (linear_model(), linear_stream(8), linear_hyperparams(8));
    let (record, trained) = train_model(
        &m0,
        &data,
        &hp,
        &mut World::new(CommitteeConfig::honest(3), ArbiterConfig::default()),
    )
    .unwrap();
    let mut fold = m0.clone();
    for d in &data {
        fold = train_step(&fold, d, hp.eta).unwrap().model;
    }
    assert_eq!(record.final_hash, trained.hash());
    assert_eq!(record.final_hash, fold.hash());
    assert_eq!(record.final_hash, scalar_linear_oracle(8).hash());
    assert_ne!(record.final_hash, m0.hash());

    let (sm0, sdata, shp) = (
        signature_m0(),
        signature_stream(8),
        signature_hyperparams(8),
    );
    let (srecord, _) = train_model(
        &sm0,
        &sdata,
        &shp,
        &mut World::new(CommitteeConfig::honest(2), ArbiterConfig::default()),
    )
    .unwrap();
    assert_eq!(
        srecord.final_hash,
        train_local(&sm0, &sdata, &shp).unwrap().1.hash()
    );
}

fn tamper_localization() {
    let (m0, data, hp) = (
        signature_m0(),
        signature_stream(8),
        signature_hyperparams(8),
    );
    let mut w = World::new(CommitteeConfig::honest(1), ArbiterConfig::default());
    let (record, _) = train_model(&m0, &data, &hp, &mut w).unwrap();
    assert_eq!(
        verify_provenance(&record, &m0, &data, &mut w).unwrap(),
        Verification::Valid
    );
    for j in 1..=8u32 {
        let forged = forge_from_step(&record, &m0, &data, j).unwrap();
        let v = verify_provenance(&forged, &m0, &data, &mut w).unwrap();
        assert_eq!(
            v,
            Verification::Invalid {
                step: j,
                reason: InvalidReason::TraceMismatch
            },
            "forged step {j}"
        );

        let mut relabeled = record.clone();
        relabeled.steps[j as usize - 1].minibatch_hash =
            Digest::of(format!("other batch {j}").as_bytes());
        let v = verify_provenance(&relabeled, &m0, &data, &mut w).unwrap();
        assert_eq!(
            v,
            Verification::Invalid {
                step: j,
                reason: InvalidReason::ChainMismatch
            },
            "relabeled step {j}"
        );
    }
}

fn tally_equivalence() {
    let config = fixture_config("election-100.json");
    assert_eq!(config.scrutineers.len(), 10);
    assert_eq!(config.scrutineers.honest_ids().len(), 9);
    let oracle = local_oracle(&config).unwrap();
    // The oracle's labels: exactly the planted impostors rejected, exactly
    // the unclear marks queued, every clear mark read as cast.
    assert_eq!(oracle.tally.rejected_signature, 5);
    assert_eq!(oracle.tally.unidentifiable, 3);
    assert!(oracle
        .papers
        .iter()
        .all(|p| p.read_vote == Some(ReadVote::Unidentifiable)
            || p.read_vote
                .map(|r| matches!(r, ReadVote::Candidate(c) if Some(c) == p.manual_label))
                == Some(true)));
    let frozen: TallyResult = serde_json::from_str(
        &std::fs::read_to_string(
            Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/expected-tally.json"),
        )
        .unwrap(),
    )
    .unwrap();
    assert_eq!(oracle.tally, frozen);

    let run = elect(&config, false);
    assert_eq!(run.report.tally, oracle.tally);
    assert_eq!(run.report.signature_rejects, 5);
    assert_eq!(run.report.manual_queue, 3);
    // The corrupt scrutineer disputed and lost every counting task.
    let corrupt = ScrutineerId(6);
    for t in run
        .world
        .arbiter()
        .tasks()
        .filter(|t| t.spec.task_id.starts_with("sig/") || t.spec.task_id.starts_with("read/"))
    {
        assert!(t.voided.contains(&corrupt), "{}", t.spec.task_id);
    }
}

/// Loss `1/(2b) Σ (y - t)²` in f64 from the model's exact fixed-point values.
fn f64_loss(spec: &ModelSpec, params: &NamedTensors, d: &Minibatch) -> f64 {
    let batch = d.batch() as usize;
    let din = d.x.shape()[1] as usize;
    let mut total = 0.0;
    for r in 0..batch {
        let mut a: Vec<f64> = d.x.data()[r * din..(r + 1) * din]
            .iter()
            .map(|v| v.to_f64())
            .collect();
        let mut k = 0;
        for (li, l) in spec.layers.iter().enumerate() {
            if l.kind != "dense" {
                continue;
            }
            let cols = l.cols as usize;
            let (w, b) = (
                params[&format!("w{k}")].data(),
                params[&format!("b{k}")].data(),
            );
            let mut z: Vec<f64> = (0..cols).map(|c| b[c].to_f64()).collect();
            for (i, ai) in a.iter().enumerate() {
                for (c, zc) in z.iter_mut().enumerate() {
                    *zc += ai * w[i * cols + c].to_f64();
                }
            }
            if spec.layers.get(li + 1).is_some_and(|n| n.kind == "relu") {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            a = z;
            k += 1;
        }
        let dout = a.len();
        total += a
            .iter()
            .enumerate()
            .map(|(c, y)| (y - d.t.data()[r * dout + c].to_f64()).powi(2))
            .sum::<f64>();
    }
    total / (2.0 * batch as f64)
}

/// Worst |vm gradient - central difference| in ulps, `h` = one ulp.
fn gradient_gap(m: &Model, d: &Minibatch) -> f64 {
    let r = train_step(m, d, FixedPoint::ZERO).unwrap();
    let mut worst: f64 = 0.0;
    for (p, _) in m.spec.parameter_shapes() {
        let g = &r.gradients[&grad_name(&p)];
        for i in 0..g.data().len() {
            let (mut plus, mut minus) = (m.params.clone(), m.params.clone());
            let raw = m.params[&p].data()[i].raw();
            plus.get_mut(&p).unwrap().data_mut()[i] = FixedPoint::from_raw(raw + 1);
            minus.get_mut(&p).unwrap().data_mut()[i] = FixedPoint::from_raw(raw - 1);
            // Divide by 2h and rescale to raw units: both factors are 2^16.
            let fd_raw = (f64_loss(&m.spec, &plus, d) - f64_loss(&m.spec, &minus, d)) / 2.0
                * 65536.0
                * 65536.0;
            worst = worst.max((fd_raw - g.data()[i].raw() as f64).abs());
        }
    }
    worst
}

fn gradient_check() {
    for d in linear_stream(4) {
        let gap = gradient_gap(&linear_model(), &d);
        assert!(gap <= 2.0, "linear gap {gap} ulps");
    }
    for d in signature_stream(4) {
        let gap = gradient_gap(&signature_m0(), &d);
        assert!(gap <= 2.0, "signature gap {gap} ulps");
    }
}

fn unlinkability() {
    let mut configs = vec![
        fixture_config("election-100.json"),
        fixture_config("zero-honest.json"),
    ];
    configs.push(ElectionConfig {
        ballot_ids: false,
        ..fixture_config("election-100.json")
    });
    for c in &configs {
        let run = elect(c, false);
        let audit = run.audit_links();
        assert!(
            audit.records_scanned > 1000,
            "audit scanned only {} records",
            audit.records_scanned
        );
        assert!(audit.is_clean(), "links: {:?}", audit.paths);
        assert_eq!(run.report.unlinkability, audit);
    }
    // The auditor does see a link when one exists.
    let voters: BTreeSet<String> = ["voter-0001".into()].into();
    let ballots: BTreeSet<String> = ["ballot-00000000000000aa".into()].into();
    let planted = serde_json::json!({"box": [{"voter": "voter-0001", "ballot_id": "ballot-00000000000000aa"}]});
    assert!(
        !dvote_core::pipeline::audit_links(&[("planted", planted)], &voters, &ballots).is_clean()
    );
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn()); 10] = [
        ("gas estimate for 30e9 FLOPs", gas_estimate),
        (
            "dispute rounds within ceil(log2 T) + 1",
            dispute_round_bound,
        ),
        ("AnyTrust soundness over 200 committees", anytrust_soundness),
        ("AnyTrust failure boundary", anytrust_failure_boundary),
        ("determinism of traces and reports", determinism),
        ("training composition identity", composition_identity),
        ("tamper localization", tamper_localization),
        ("end-to-end tally equivalence", tally_equivalence),
        ("gradient check", gradient_check),
        ("unlinkability audit", unlinkability),
    ];
    let mut failed = Vec::new();
    let mut out = std::io::stdout();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check));
        let status = if result.is_ok() { "PASS" } else { "FAIL" };
        // Written past the test harness capture so the summary always shows.
        writeln!(
            out,
            "criterion {:>2}: {status}  {name} ({:.1}s)",
            i + 1,
            start.elapsed().as_secs_f64()
        )
        .unwrap();
        if result.is_err() {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
