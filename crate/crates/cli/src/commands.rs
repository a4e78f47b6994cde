use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dvote_core::arbiter::{to_jsonl, ArbiterConfig, GasModel};
use dvote_core::committee::{CommitteeConfig, ScrutineerProfile, Strategy, World};
use dvote_core::demo::{add_task, signature_task};
use dvote_core::pipeline::{run_election, PipelineError};
use dvote_core::provenance::{
    fixtures::forge_from_step, train_model, verify_provenance, ProvenanceRecord, Verification,
};
use dvote_core::FixedPoint;
use serde::Serialize;
use serde_json::json;

use crate::args::{Cli, Command, DemoProgram, GlobalArgs};
use crate::config::{read_json, Scenario, TrainingAuditConfig};
use crate::CliError;

pub fn dispatch(cli: &Cli) -> Result<String, CliError> {
    let g = &cli.global;
    match &cli.command {
        Command::RunElection { scenario } => run_election_cmd(g, scenario),
        Command::DisputeDemo { program, k } => dispute_demo(g, *program, *k),
        Command::AuditTraining { config } => audit_training(g, config),
        Command::EstimateGas {
            flops,
            gas_per_flop,
            block_gas_limit,
        } => estimate_gas(flops, *gas_per_flop, *block_gas_limit),
        Command::VerifyRecord { record, config } => verify_record(g, record, config),
    }
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Write {
            path: dir.into(),
            source,
        })?;
    }
    std::fs::write(path, contents).map_err(|source| CliError::Write {
        path: path.into(),
        source,
    })
}

fn pretty(v: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("outputs serialize");
    s.push('\n');
    s
}

fn out_dir(g: &GlobalArgs, fallback: Option<&PathBuf>) -> PathBuf {
    g.out
        .clone()
        .or_else(|| fallback.cloned())
        .unwrap_or_else(|| PathBuf::from("dvote-out"))
}

fn world(g: &GlobalArgs, committee: CommitteeConfig, arbiter: ArbiterConfig) -> World {
    World::new(committee, arbiter).parallel(g.parallel)
}

fn now_stamp() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    format!("unix:{secs}")
}

fn pipeline_error(e: PipelineError) -> CliError {
    match e {
        PipelineError::Config(_)
        | PipelineError::EmptyRegistry
        | PipelineError::UnknownCandidate(_) => CliError::Config {
            what: "scenario".into(),
            message: e.to_string(),
        },
        other => CliError::Invariant(other.to_string()),
    }
}

fn run_election_cmd(g: &GlobalArgs, path: &Path) -> Result<String, CliError> {
    let mut scenario: Scenario = read_json(path, "scenario")?;
    if let Some(seed) = g.seed {
        scenario.election.seed = seed;
    }
    let config = &scenario.election;
    config.validate().map_err(pipeline_error)?;
    let mut run = run_election(
        config,
        world(g, config.scrutineers.clone(), config.arbiter_config()),
    )
    .map_err(pipeline_error)?;
    if !g.fixed_clock {
        run.report.generated_at = Some(now_stamp());
    }
    let out = out_dir(g, scenario.out.as_ref());
    write(&out.join("report.json"), &pretty(&run.report))?;
    write(&out.join("tally.json"), &pretty(&run.report.tally))?;
    write(
        &out.join("ledger.jsonl"),
        &to_jsonl(run.world.arbiter().ledger()),
    )?;
    write(&out.join("transcript.jsonl"), &run.world.transcript_jsonl())?;
    for r in &run.records {
        write(
            &out.join("provenance").join(format!("{}.json", r.model)),
            &pretty(r),
        )?;
    }

    let r = &run.report;
    let mut s = String::new();
    if !r.anytrust_holds {
        writeln!(
            s,
            "WARNING: anytrust_holds=false: no honest scrutineer, the result below is unverified"
        )
        .unwrap();
    }
    writeln!(s, "election `{}` seed {}", scenario.name, r.seed).unwrap();
    for (c, n) in r.totals.iter().enumerate() {
        writeln!(
            s,
            "  candidate {c}: {n} ({} read, {} manual)",
            r.tally.counts[c], r.tally.manual_resolved[c]
        )
        .unwrap();
    }
    writeln!(s, "  rejected signatures: {}", r.signature_rejects).unwrap();
    writeln!(s, "  manual-review queue: {}", r.manual_queue).unwrap();
    writeln!(
        s,
        "  disputes: {}, ledger digest {}",
        r.committee.disputes, r.ledger_digest
    )
    .unwrap();
    writeln!(
        s,
        "  voter/ballot links found: {}",
        r.unlinkability.paths.len()
    )
    .unwrap();
    writeln!(s, "  report: {}", out.join("report.json").display()).unwrap();
    Ok(s)
}

fn dispute_demo(g: &GlobalArgs, program: DemoProgram, k: Option<u64>) -> Result<String, CliError> {
    let seed = g.seed.unwrap_or(0);
    let task = match program {
        DemoProgram::Add => add_task("dispute/add", FixedPoint::ONE, FixedPoint::ONE),
        DemoProgram::SigModel => signature_task("dispute/sig-model", seed),
    };
    let t = task.program.step_count();
    let k = k.unwrap_or(match program {
        DemoProgram::Add => t,
        DemoProgram::SigModel => t / 2,
    });
    if k > t {
        return Err(CliError::Usage(format!(
            "k = {k} is outside the trace 0..={t}"
        )));
    }
    let committee = CommitteeConfig::new(vec![
        ScrutineerProfile::new(0, "claimant", Strategy::CorruptAtStep { k }),
        ScrutineerProfile::new(1, "challenger", Strategy::Honest),
    ])
    .expect("distinct ids");
    let mut w = world(g, committee, ArbiterConfig::default());
    let outcome = w
        .run_task(&task)
        .map_err(|e| CliError::Invariant(e.to_string()))?;
    let events: Vec<_> = w
        .arbiter()
        .ledger()
        .iter()
        .filter(|e| e.task_id == task.task_id)
        .cloned()
        .collect();

    let mut s = String::new();
    writeln!(
        s,
        "program {program:?}: T = {t}, claimant s0 corrupts state {k}"
    )
    .unwrap();
    for e in &events {
        writeln!(
            s,
            "  round {:>3}  {:<18} {}",
            e.round,
            format!("{:?}", e.kind),
            e.detail
        )
        .unwrap();
    }
    for r in w.rejections() {
        writeln!(
            s,
            "  round {:>3}  rejected claim from {}: {}",
            r.round, r.from, r.error
        )
        .unwrap();
    }
    let bisections = events
        .iter()
        .filter(|e| format!("{:?}", e.kind) == "Bisection")
        .count();
    for game in &outcome.games {
        writeln!(
            s,
            "verdict: {:?}, loser {:?}, localized window {:?}, {} bisection rounds (bound {})",
            game.verdict, game.loser, game.window, bisections, game.round_bound
        )
        .unwrap();
    }
    if outcome.games.is_empty() {
        writeln!(
            s,
            "no dispute; accepted output {:?}",
            outcome.accepted_output().map(|d| d.to_hex())
        )
        .unwrap();
    }
    let transcript = json!({
        "program": format!("{program:?}"),
        "step_count": t,
        "k": k,
        "bisections": bisections,
        "events": events,
        "rejections": w.rejections(),
        "games": outcome.games,
        "accepted_output": outcome.accepted_output(),
    });
    let path = out_dir(g, None).join("dispute.json");
    write(&path, &pretty(&transcript))?;
    writeln!(s, "transcript: {}", path.display()).unwrap();
    Ok(s)
}

fn training_config(g: &GlobalArgs, path: &Path) -> Result<TrainingAuditConfig, CliError> {
    let mut c: TrainingAuditConfig = read_json(path, "training config")?;
    if let Some(seed) = g.seed {
        c.seed = seed;
    }
    c.validate()?;
    Ok(c)
}

fn describe(v: &Verification) -> String {
    match v {
        Verification::Valid => "valid".into(),
        Verification::Invalid { step, reason } => format!("invalid({step}, {reason:?})"),
    }
}

fn audit_training(g: &GlobalArgs, path: &Path) -> Result<String, CliError> {
    let c = training_config(g, path)?;
    let (m0, data, hp) = c.build();
    let mut w = world(g, c.scrutineers.clone(), ArbiterConfig::default());
    let (record, _) =
        train_model(&m0, &data, &hp, &mut w).map_err(|e| CliError::Invariant(e.to_string()))?;
    let out = out_dir(g, None);
    write(
        &out.join(format!("record-{}.json", record.model)),
        &pretty(&record),
    )?;
    if let Some(f) = &record.failure {
        return Err(CliError::Invariant(format!(
            "training aborted at step {}: {}",
            f.step, f.reason
        )));
    }
    let verdict = verify_provenance(&record, &m0, &data, &mut w)
        .map_err(|e| CliError::Invariant(e.to_string()))?;
    let mut s = String::new();
    writeln!(
        s,
        "trained `{}` for {} steps, final hash {}",
        record.model,
        record.steps.len(),
        record.final_hash
    )
    .unwrap();
    writeln!(s, "verification: {}", describe(&verdict)).unwrap();
    let mut summary = json!({ "record_digest": record.digest(), "verdict": verdict });
    if !verdict.is_valid() {
        write(&out.join("verdict.json"), &pretty(&summary))?;
        return Err(CliError::Invariant(format!(
            "honest record failed verification: {}",
            describe(&verdict)
        )));
    }
    if let Some(j) = c.tamper_step {
        let forged = forge_from_step(&record, &m0, &data, j)
            .map_err(|e| CliError::Invariant(e.to_string()))?;
        write(
            &out.join(format!("record-{}-forged.json", record.model)),
            &pretty(&forged),
        )?;
        let v = verify_provenance(&forged, &m0, &data, &mut w)
            .map_err(|e| CliError::Invariant(e.to_string()))?;
        writeln!(s, "forged from step {j}: {}", describe(&v)).unwrap();
        summary["forged"] = json!({ "step": j, "verdict": v });
        if !matches!(v, Verification::Invalid { step, .. } if step == j) {
            write(&out.join("verdict.json"), &pretty(&summary))?;
            return Err(CliError::Invariant(format!(
                "forgery at step {j} not localized: {}",
                describe(&v)
            )));
        }
    }
    write(&out.join("verdict.json"), &pretty(&summary))?;
    Ok(s)
}

fn verify_record(g: &GlobalArgs, record: &Path, config: &Path) -> Result<String, CliError> {
    let c = training_config(g, config)?;
    let record: ProvenanceRecord = read_json(record, "provenance record")?;
    let (m0, data, _) = c.build();
    let mut w = world(g, c.scrutineers.clone(), ArbiterConfig::default());
    let v = verify_provenance(&record, &m0, &data, &mut w).map_err(|e| CliError::Config {
        what: "provenance record".into(),
        message: e.to_string(),
    })?;
    match v {
        Verification::Valid => Ok(format!(
            "valid: `{}` final hash {}\n",
            record.model, record.final_hash
        )),
        _ => Err(CliError::Invariant(describe(&v))),
    }
}

/// Parses `30000000000`, `30e9` or `3.5e10`; the value must be a whole number.
pub fn parse_flops(s: &str) -> Result<u64, CliError> {
    let bad = || CliError::Usage(format!("`{s}` is not a whole number of FLOPs"));
    if let Ok(v) = s.parse::<u64>() {
        return Ok(v);
    }
    let (mantissa, exp) = s.split_once(['e', 'E']).ok_or_else(bad)?;
    let exp: u32 = exp.parse().map_err(|_| bad())?;
    let (int, frac) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    if exp < frac.len() as u32 || int.is_empty() && frac.is_empty() {
        return Err(bad());
    }
    let digits: u64 = format!("{int}{frac}").parse().map_err(|_| bad())?;
    10u64
        .checked_pow(exp - frac.len() as u32)
        .and_then(|p| digits.checked_mul(p))
        .ok_or_else(bad)
}

fn estimate_gas(
    flops: &str,
    gas_per_flop: Option<u64>,
    block_gas_limit: Option<u64>,
) -> Result<String, CliError> {
    let flops = parse_flops(flops)?;
    let mut model = GasModel::default();
    if let Some(g) = gas_per_flop {
        model.gas_per_flop = g;
    }
    if let Some(b) = block_gas_limit {
        if b == 0 {
            return Err(CliError::Usage("block gas limit must be positive".into()));
        }
        model.block_gas_limit = b;
    }
    let e = model
        .estimate_gas(flops)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(pretty(&json!({
        "flops": e.flops,
        "gas": e.gas,
        "block_gas_limit": e.block_gas_limit,
        "blocks": e.blocks(),
        "whole_blocks": e.whole_blocks(),
        "fits_in_block": e.fits_in_block(),
    })))
}

#[cfg(test)]
mod tests {
    use super::parse_flops;

    #[test]
    fn flops_parse_exactly() {
        assert_eq!(parse_flops("30e9").unwrap(), 30_000_000_000);
        assert_eq!(parse_flops("3.5E10").unwrap(), 35_000_000_000);
        assert_eq!(parse_flops("12").unwrap(), 12);
        for bad in ["1.5", "1e", "e9", "-3", "1e30", "x"] {
            assert!(parse_flops(bad).is_err(), "{bad}");
        }
    }
}
