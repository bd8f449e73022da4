use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use wsc_core::engines::{self, GreedyPlan, Prepared};
use wsc_core::pipeline::{self, StageTiming};
use wsc_core::placement::{self, MeshGrid, PairLoad};
use wsc_core::search::{self, Genome};
use wsc_core::{gcmr, presets, EngineParams, GaParams, TpSplit, TrainingWorkload, WaferConfig};

struct Fixture {
    wafer: WaferConfig,
    wl: TrainingWorkload,
    split: TpSplit,
    prep: Prepared,
    greedy: GreedyPlan,
}

/// GPT-175B at tp=8, pp=8 on the 64-die configuration.
fn fixture() -> Fixture {
    let wafer = presets::representative_config(1).unwrap();
    let wl = TrainingWorkload::new(presets::model("gpt-175b").unwrap(), 1, 128).unwrap();
    let params = EngineParams::default();
    let grid = MeshGrid::new(wafer.grid_x, wafer.grid_y);
    let split = engines::default_split(8, &wl, grid).unwrap();
    let table = engines::table_for(&wafer, &wl, &[split], &params).unwrap();
    let prep = engines::prepare(&wafer, &wl, 8, split, &table, &params).unwrap();
    let greedy = engines::greedy_plan(&prep, 0).unwrap();
    Fixture {
        wafer,
        wl,
        split,
        prep,
        greedy,
    }
}

fn bench_kernels(c: &mut Criterion) {
    let f = fixture();
    let params = EngineParams::default();

    c.bench_function("perf_table_gpt175b_tp8", |b| {
        b.iter(|| engines::table_for(&f.wafer, &f.wl, &[f.split], &params).unwrap())
    });

    let inputs = f.prep.stage_inputs().unwrap();
    c.bench_function("gcmr_dp_pp8", |b| {
        b.iter(|| gcmr::gcmr_dp(black_box(&inputs), f.prep.capacity, params.quantum).unwrap())
    });

    let timings: Vec<StageTiming> = (0..16)
        .map(|s| StageTiming::new(1.0 + 0.01 * s as f64, 2.0, 0.5))
        .collect();
    let transfers = vec![0.05; 15];
    c.bench_function("schedule_1f1b_p16_n128", |b| {
        b.iter(|| pipeline::schedule_1f1b(16, 128, black_box(&timings), &transfers).unwrap())
    });

    let loads: Vec<PairLoad> = f
        .greedy
        .initial_pairs
        .iter()
        .map(|p| PairLoad {
            sender: p.sender,
            helper: p.helper,
            bytes: p.offload_bytes as f64,
        })
        .collect();
    let comm = f.prep.comm_pp();
    c.bench_function("location_aware_placement_pp8", |b| {
        b.iter(|| placement::location_aware_placement(8, f.split.shape, f.prep.grid(), &comm, &loads, 0).unwrap())
    });

    let g = &f.greedy;
    c.bench_function("evaluate_iteration_pp8", |b| {
        b.iter(|| engines::evaluate_iteration(&f.prep, &g.recomp, &g.placement, &g.allocation).unwrap())
    });

    let seed = Genome {
        masks: g.recomp.masks(),
        placement: g.placement.clone(),
        allocation: g.allocation.clone(),
    };
    let ga = GaParams {
        population: 16,
        steps: 10,
        ..GaParams::default()
    };
    let mut group = c.benchmark_group("ga");
    group.sample_size(10);
    group.bench_function("ga_pop16_steps10", |b| {
        b.iter(|| search::ga_optimize(&f.prep, seed.clone(), &ga).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_kernels);
criterion_main!(benches);
