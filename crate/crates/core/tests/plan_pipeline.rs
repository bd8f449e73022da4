//! End-to-end properties of the planning pipeline on small random
//! instances: prepare, greedy plan, genetic refinement and evaluation.

use proptest::prelude::*;
use wsc_core::engines::{self, Prepared};
use wsc_core::placement::{self, MeshGrid};
use wsc_core::search::{self, Genome};
use wsc_core::{presets, EngineParams, GaParams, ModelConfig, SearchOptions, TrainingWorkload};

#[derive(Debug, Clone)]
struct Instance {
    layers: u32,
    hidden: u64,
    seq: u64,
    n: u64,
    grid: (u32, u32),
    tp: u64,
    pp: usize,
    share: f64,
}

fn instance() -> impl Strategy<Value = Instance> {
    (2u32..=8, prop::sample::select(vec![256u64, 512]), prop::sample::select(vec![64u64, 128]))
        .prop_flat_map(|(layers, hidden, seq)| {
            (
                Just(layers),
                Just(hidden),
                Just(seq),
                prop::sample::select(vec![4u64, 8, 16]),
                (2u32..=4, 1u32..=4),
                prop::sample::select(vec![1u64, 2, 4]),
                1usize..=layers.min(4) as usize,
                0.0f64..1.3,
            )
        })
        .prop_map(|(layers, hidden, seq, n, grid, tp, pp, share)| Instance {
            layers,
            hidden,
            seq,
            n,
            grid,
            tp,
            pp,
            share,
        })
}

fn params() -> EngineParams {
    EngineParams {
        quantum: 1 << 14,
        ..EngineParams::default()
    }
}

/// Builds the prepared strategy, or `None` when the instance does not fit
/// on the grid or in memory.
fn prepare(inst: &Instance) -> Option<Prepared> {
    let model = ModelConfig {
        name: "prop".into(),
        num_layers: inst.layers,
        hidden_size: inst.hidden,
        num_heads: 8,
        seq_len: inst.seq,
        vocab_size: 1000,
        param_count: None,
        num_experts: None,
    };
    let wl = TrainingWorkload::new(model, 1, inst.n).ok()?;
    if (inst.pp as u64) > inst.n {
        return None;
    }
    let mut wafer = presets::representative_config(3).unwrap();
    wafer.grid_x = inst.grid.0;
    wafer.grid_y = inst.grid.1;
    let split = engines::default_split(inst.tp, &wl, MeshGrid::new(inst.grid.0, inst.grid.1))?;
    let p = params();
    let table = engines::table_for(&wafer, &wl, &[split], &p).ok()?;
    // Size DRAM between the largest fixed footprint and the largest
    // footprint with every checkpoint stored, so offloading shows up.
    wafer.dram.capacity_bytes = 1e15;
    let roomy = engines::prepare(&wafer, &wl, inst.pp, split, &table, &p).ok()?;
    let fixed = roomy.stages.iter().map(|s| s.fixed_bytes).max()?;
    let full = roomy.stages.iter().map(|s| s.fixed_bytes + s.op_bytes.iter().sum::<u64>()).max()?;
    let cap = fixed as f64 + inst.share * (full - fixed) as f64;
    wafer.dram.capacity_bytes = cap / f64::from(wafer.dram_chiplets_per_die);
    let prep = engines::prepare(&wafer, &wl, inst.pp, split, &table, &p).ok()?;
    placement::serpentine_placement(inst.pp, split.shape, prep.grid()).ok()?;
    Some(prep)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn greedy_plans_fit_and_evaluate_consistently(inst in instance()) {
        let Some(prep) = prepare(&inst) else { return Ok(()) };
        let Ok(g) = engines::greedy_plan(&prep, 1) else { return Ok(()) };
        let memory = g.recomp.memory();
        let overflow: u64 = memory.iter().map(|&m| m.saturating_sub(prep.capacity)).sum();
        prop_assert_eq!(g.allocation.total(), overflow);
        for (s, &m) in memory.iter().enumerate() {
            prop_assert_eq!(g.allocation.sent_by(s), m.saturating_sub(prep.capacity));
        }
        for r in g.allocation.resident(&memory) {
            prop_assert!(r <= prep.capacity);
        }

        let (rep, tl) = engines::evaluate_iteration(&prep, &g.recomp, &g.placement, &g.allocation).unwrap();
        prop_assert!(rep.iteration_time > 0.0);
        prop_assert_eq!(rep.iteration_time, tl.iteration_time);
        let rel = (rep.throughput * rep.iteration_time - rep.useful_flops).abs() / rep.useful_flops;
        prop_assert!(rel < 1e-12);
        prop_assert!(rep.stages.iter().all(|s| s.resident_bytes <= prep.capacity));

        // Every stage runs its n forwards and n backwards back to back at best.
        let sched = engines::stage_schedule(&prep, &g.recomp, &g.placement, &g.allocation).unwrap();
        let n = inst.n as f64;
        for t in &sched.timings {
            prop_assert!(rep.iteration_time >= n * t.steady_time() * (1.0 - 1e-12));
        }
    }

    #[test]
    fn ga_never_loses_to_its_seed(inst in instance(), seed in 0u64..1000) {
        let Some(prep) = prepare(&inst) else { return Ok(()) };
        let Ok(g) = engines::greedy_plan(&prep, 1) else { return Ok(()) };
        let genome = Genome {
            masks: g.recomp.masks(),
            placement: g.placement,
            allocation: g.allocation,
        };
        let ga = GaParams { population: 6, steps: 6, seed, ..GaParams::default() };
        let r = search::ga_optimize(&prep, genome.clone(), &ga).unwrap();
        prop_assert_eq!(r.trace.len(), 7);
        prop_assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(r.best.fitness <= r.trace[0]);
        prop_assert!(r.best.t_max <= r.seed_t_max || r.best.global_cost < r.seed_global_cost);

        // The winner is a legal plan in its own right.
        let best = &r.best.genome;
        // Region swaps may break chain adjacency but never overlap regions.
        let mut seen = std::collections::HashSet::new();
        for reg in best.placement.regions() {
            for d in reg.dies() {
                prop_assert!(prep.grid().contains(d));
                prop_assert!(seen.insert(d));
            }
        }
        let recomp = prep.recomp_from_masks(&best.masks).unwrap();
        let memory = recomp.memory();
        for res in best.allocation.resident(&memory) {
            prop_assert!(res <= prep.capacity);
        }
        engines::evaluate_iteration(&prep, &recomp, &best.placement, &best.allocation).unwrap();

        let again = search::ga_optimize(&prep, genome, &ga).unwrap();
        prop_assert_eq!(again.best.genome, r.best.genome);
    }
}

#[test]
fn search_best_plan_reevaluates_to_its_report() {
    let model = ModelConfig {
        name: "e2e".into(),
        num_layers: 6,
        hidden_size: 512,
        num_heads: 8,
        seq_len: 128,
        vocab_size: 1000,
        param_count: None,
        num_experts: None,
    };
    let wl = TrainingWorkload::new(model, 1, 8).unwrap();
    let mut wafer = presets::representative_config(3).unwrap();
    wafer.grid_x = 4;
    wafer.grid_y = 2;
    wafer.dram.capacity_bytes = wl.model_p_bytes as f64 / 3.0 / f64::from(wafer.dram_chiplets_per_die);
    let opts = SearchOptions {
        ga: GaParams { population: 8, steps: 8, seed: 4, ..GaParams::default() },
        top_k: 2,
        engine: params(),
        ..SearchOptions::default()
    };
    let shapes = search::required_shapes(&wafer, &wl, &opts).unwrap();
    let table = wsc_core::cost_model::build_perf_table(&shapes, &[engines::cost_context(&wafer, &opts.engine)]);
    let out = search::search_parallelism(&wafer, &wl, &table, &opts).unwrap();
    let best = out.best.as_ref().expect("a feasible plan");

    let prep = engines::prepare(&wafer, &wl, best.pp, best.split, &table, &opts.engine).unwrap();
    let (rep, _) = engines::evaluate_iteration(&prep, &best.recomp, &best.placement, &best.allocation).unwrap();
    assert_eq!(rep, best.report);
    let ok = out
        .ledger
        .iter()
        .filter_map(|c| c.throughput)
        .fold(0.0, f64::max);
    assert!(best.report.throughput >= ok * (1.0 - 1e-12));

    let again = search::search_parallelism(&wafer, &wl, &table, &opts).unwrap();
    assert_eq!(again.best.as_ref().unwrap().report, best.report);
    assert_eq!(again.ledger.len(), out.ledger.len());
}
