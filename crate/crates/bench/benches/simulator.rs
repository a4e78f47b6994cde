use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use dvote_bench::{dispute_committee, signature_workload};
use dvote_core::arbiter::ArbiterConfig;
use dvote_core::committee::{CommitteeConfig, World};
use dvote_core::provenance::{fixtures, train_step};
use dvote_core::{Digest, MerkleTree};

fn vm(c: &mut Criterion) {
    let task = signature_workload();
    c.bench_function("execute signature distance with trace", |b| {
        b.iter(|| task.program.execute(&task.inputs).unwrap())
    });

    let leaves: Vec<Digest> = (0u32..4096).map(|i| Digest::of(&i.to_le_bytes())).collect();
    c.bench_function("merkle tree over 4096 leaves", |b| {
        b.iter(|| MerkleTree::new(&leaves).root())
    });

    let (m, d) = (
        fixtures::signature_m0(),
        fixtures::signature_stream(1).remove(0),
    );
    c.bench_function("signature training step", |b| {
        b.iter(|| train_step(&m, &d, fixtures::signature_hyperparams(1).eta).unwrap())
    });
}

fn committee(c: &mut Criterion) {
    let task = signature_workload();
    let t = task.program.step_count();
    c.bench_function("unanimous task, 5 honest", |b| {
        b.iter_batched(
            || World::new(CommitteeConfig::honest(5), ArbiterConfig::default()),
            |mut w| w.run_task(&task).unwrap(),
            BatchSize::SmallInput,
        )
    });
    c.bench_function("dispute at the middle step", |b| {
        b.iter_batched(
            || World::new(dispute_committee(t / 2), ArbiterConfig::default()),
            |mut w| w.run_task(&task).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, vm, committee);
criterion_main!(benches);
