//! Tensor/pipeline execution engines and the iteration evaluator.
//!
//! A strategy is `(tp, pp, split)`: `pp` stages of contiguous layers, each
//! stage a `tp`-die rectangle that shards every operator along the split's
//! batch/sequence/hidden/reduction factors. [`prepare`] prices the sharded
//! operators from the perf table and builds the recomputation inputs;
//! [`stage_schedule`] adds routed link traffic and checkpoint offloading;
//! [`evaluate_iteration`] runs the 1F1B simulation on top.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::cost_model::{allreduce_time, CostContext, Direction, PerfTable};
use crate::dram_alloc::AllocationSet;
use crate::gcmr::{self, ProfileItem, RecompConfig, StageInput};
use crate::pipeline::{self, PipelineTimeline, StageTiming};
use crate::placement::{self, Coord, Link, MeshGrid, PairLoad, PlacementMap, TpShape};
use crate::workload::{
    build_sharded_graph, model_state_bytes, split_layers, OpShape, SplitFactors,
};
use crate::{Error, OpKind, OperatorNode, Result, TrainingWorkload, WaferConfig, FP16_BYTES};

pub const DEFAULT_PUNISHMENT: f64 = 4.0;

/// FLOPs per byte used to fold traffic into the analytic baseline.
pub const DEFAULT_ETA: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineParams {
    pub utilization: f64,
    pub punishment: f64,
    pub quantum: u64,
}

impl Default for EngineParams {
    fn default() -> Self {
        Self {
            utilization: crate::cost_model::DEFAULT_UTILIZATION,
            punishment: DEFAULT_PUNISHMENT,
            quantum: gcmr::DEFAULT_QUANTUM,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TpSplit {
    pub shape: TpShape,
    pub factors: SplitFactors,
}

impl TpSplit {
    pub fn tp(&self) -> u64 {
        self.factors.product()
    }

    pub fn label(&self) -> String {
        let f = self.factors;
        format!(
            "{}x{}:B{}S{}H{}K{}",
            self.shape.width, self.shape.height, f.b, f.s, f.h, f.k
        )
    }
}

fn divisors(n: u64) -> Vec<u64> {
    (1..=n).filter(|d| n % d == 0).collect()
}

/// Every valid `(shape, factors)` for `tp` dies.
pub fn enumerate_tp_splits(
    tp: u64,
    wl: &TrainingWorkload,
    grid: MeshGrid,
) -> Vec<TpSplit> {
    let mut out = Vec::new();
    let shapes = TpShape::candidates(tp as u32, grid);
    for b in divisors(tp) {
        for s in divisors(tp / b) {
            for h in divisors(tp / (b * s)) {
                let k = tp / (b * s * h);
                let f = SplitFactors { b, s, h, k };
                if !f.divides(&wl.model, wl.microbatch_size) {
                    continue;
                }
                out.extend(shapes.iter().map(|&shape| TpSplit { shape, factors: f }));
            }
        }
    }
    out
}

/// Default split: hidden-dimension sharding on the squarest rectangle.
pub fn default_split(tp: u64, wl: &TrainingWorkload, grid: MeshGrid) -> Option<TpSplit> {
    let splits = enumerate_tp_splits(tp, wl, grid);
    let squareness = |s: &TpSplit| s.shape.width.abs_diff(s.shape.height);
    splits
        .iter()
        .filter(|s| s.factors.h == tp)
        .min_by_key(|s| (squareness(s), s.shape.height))
        .or_else(|| splits.iter().min_by_key(|s| (squareness(s), s.factors)))
        .copied()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RingInfo {
    /// Most ring edges routed over any one link.
    pub max_occupancy: u32,
    /// No Hamiltonian cycle exists: a chain is used and latency doubles.
    pub chain_fallback: bool,
}

/// Cyclic die order used for the ring inside a `w × h` region.
pub fn ring_embedding(shape: TpShape) -> Vec<Coord> {
    let (w, h) = (shape.width, shape.height);
    let serp = || {
        let mut v = Vec::new();
        for y in 0..h {
            if y % 2 == 0 {
                v.extend((0..w).map(|x| Coord::new(x, y)));
            } else {
                v.extend((0..w).rev().map(|x| Coord::new(x, y)));
            }
        }
        v
    };
    if w < 2 || h < 2 || (w * h) % 2 == 1 {
        return serp();
    }
    if h % 2 == 0 {
        let mut v: Vec<Coord> = (0..w).map(|x| Coord::new(x, 0)).collect();
        for y in 1..h {
            if y % 2 == 1 {
                v.extend((1..w).rev().map(|x| Coord::new(x, y)));
            } else {
                v.extend((1..w).map(|x| Coord::new(x, y)));
            }
        }
        v.extend((1..h).rev().map(|y| Coord::new(0, y)));
        v
    } else {
        ring_embedding(TpShape::new(h, w))
            .into_iter()
            .map(|c| Coord::new(c.y, c.x))
            .collect()
    }
}

pub fn ring_info(shape: TpShape) -> RingInfo {
    let order = ring_embedding(shape);
    let n = order.len();
    if n < 2 {
        return RingInfo {
            max_occupancy: 0,
            chain_fallback: false,
        };
    }
    let mut occ: BTreeMap<Link, u32> = BTreeMap::new();
    for i in 0..n {
        for l in placement::xy_path(order[i], order[(i + 1) % n]) {
            *occ.entry(l).or_default() += 1;
        }
    }
    let (w, h) = (shape.width, shape.height);
    let chain_fallback = (w * h) % 2 == 1;
    RingInfo {
        max_occupancy: occ.values().copied().max().unwrap_or(0),
        chain_fallback,
    }
}

/// All-reduce of `bytes` among `group` dies on the ring embedded in `shape`.
pub fn ring_allreduce_mesh(shape: TpShape, group: u64, bytes: f64, wafer: &WaferConfig) -> f64 {
    if group <= 1 {
        return 0.0;
    }
    let info = ring_info(shape);
    let bw = wafer.d2d_bandwidth / f64::from(info.max_occupancy.max(1));
    let alpha = if info.chain_fallback {
        2.0 * wafer.d2d_latency
    } else {
        wafer.d2d_latency
    };
    allreduce_time(group, bytes, bw, alpha)
}

/// Per-die operator graph of one layer and the table shapes it needs.
pub fn required_shapes(wl: &TrainingWorkload, split: &TpSplit) -> Result<Vec<(OpKind, OpShape)>> {
    let g = build_sharded_graph(&wl.model, wl.microbatch_size, split.factors)?;
    Ok(g.iter().map(|o| (o.kind, o.shape)).collect())
}

/// Costs of one layer's operators on one die, communication included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    /// Forward latency plus the collective that follows, per op.
    pub op_fwd: Vec<f64>,
    pub op_bwd: Vec<f64>,
    pub op_fwd_ema: Vec<f64>,
    pub comm_fwd: f64,
    pub comm_bwd: f64,
    /// Weight-gradient all-reduce across token shards, once per iteration.
    pub weight_grad_comm: f64,
}

fn needs_allreduce(op: &OperatorNode, f: &SplitFactors) -> bool {
    (op.tp_comm_after && f.h > 1) || (op.kind.is_gemm() && f.k > 1)
}

pub fn layer_cost(
    graph: &[OperatorNode],
    split: &TpSplit,
    wafer: &WaferConfig,
    ctx: &CostContext,
    table: &PerfTable,
) -> Result<LayerCost> {
    let f = split.factors;
    let mut lc = LayerCost {
        op_fwd: Vec::with_capacity(graph.len()),
        op_bwd: Vec::with_capacity(graph.len()),
        op_fwd_ema: Vec::with_capacity(graph.len()),
        comm_fwd: 0.0,
        comm_bwd: 0.0,
        weight_grad_comm: 0.0,
    };
    for op in graph {
        let fwd = table.lookup(op, &ctx.identity, Direction::Fwd)?;
        let bwd = table.lookup(op, &ctx.identity, Direction::Bwd)?;
        let comm = if needs_allreduce(op, &f) {
            let bytes = (op.shape.m * op.shape.n * FP16_BYTES) as f64;
            ring_allreduce_mesh(split.shape, f.h * f.k, bytes, wafer)
        } else {
            0.0
        };
        lc.comm_fwd += comm;
        lc.comm_bwd += comm;
        lc.op_fwd.push(fwd.latency + comm);
        lc.op_bwd.push(bwd.latency + comm);
        lc.op_fwd_ema.push(fwd.ema_bytes);
        if op.kind.is_gemm() && f.b * f.s > 1 {
            let bytes = (op.shape.k * op.shape.n * FP16_BYTES) as f64;
            lc.weight_grad_comm += ring_allreduce_mesh(split.shape, f.b * f.s, bytes, wafer);
        }
    }
    Ok(lc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub stage: usize,
    pub layers: u32,
    pub live: u64,
    pub fwd_time: f64,
    pub bwd_time: f64,
    /// Forward time of each op across the stage's layers.
    pub op_value: Vec<f64>,
    /// Per-die checkpoint bytes of each op across layers and live batches.
    pub op_bytes: Vec<u64>,
    pub fixed_bytes: u64,
    /// DRAM traffic per microbatch without recomputation.
    pub ema_bytes: f64,
    pub op_fwd_ema: Vec<f64>,
    /// Forward FLOPs per die per microbatch of each op across layers.
    pub op_flops: Vec<f64>,
}

/// Everything about a strategy that does not depend on recomputation,
/// placement or allocation choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prepared {
    pub wafer: WaferConfig,
    pub workload: TrainingWorkload,
    pub tp: u64,
    pub pp: usize,
    pub split: TpSplit,
    pub params: EngineParams,
    pub capacity: u64,
    pub model_state_per_die: u64,
    pub boundary_bytes_per_die: u64,
    pub layer: LayerCost,
    pub stages: Vec<StageCost>,
}

pub fn cost_context(wafer: &WaferConfig, params: &EngineParams) -> CostContext {
    CostContext::from_wafer(wafer, params.utilization)
}

pub fn prepare(
    wafer: &WaferConfig,
    wl: &TrainingWorkload,
    pp: usize,
    split: TpSplit,
    table: &PerfTable,
    params: &EngineParams,
) -> Result<Prepared> {
    let tp = split.tp();
    if u64::from(split.shape.area()) != tp {
        return Err(Error::InvalidArgument(format!(
            "split {} covers {} dies, tp is {tp}",
            split.label(),
            split.shape.area()
        )));
    }
    if pp == 0 || pp > wl.model.num_layers as usize {
        return Err(Error::InvalidArgument(format!(
            "pp {pp} outside 1..={}",
            wl.model.num_layers
        )));
    }
    let ctx = cost_context(wafer, params);
    let graph = build_sharded_graph(&wl.model, wl.microbatch_size, split.factors)?;
    let layer = layer_cost(&graph, &split, wafer, &ctx, table)?;
    let model_state = model_state_bytes(&wl.model, tp, pp as u64);
    let boundary = wl.boundary_bytes().div_ceil(tp);
    let n = wl.num_microbatches;
    let stages = split_layers(wl.model.num_layers, pp as u32)
        .into_iter()
        .enumerate()
        .map(|(s, layers)| {
            let lf = f64::from(layers);
            let live = ((pp - s) as u64).min(n);
            let op_value: Vec<f64> = layer.op_fwd.iter().map(|t| t * lf).collect();
            let op_bytes: Vec<u64> = graph
                .iter()
                .map(|o| o.checkpoint_bytes * u64::from(layers) * live)
                .collect();
            let fwd_ema: f64 = layer.op_fwd_ema.iter().sum::<f64>() * lf;
            StageCost {
                stage: s,
                layers,
                live,
                fwd_time: op_value.iter().sum(),
                bwd_time: layer.op_bwd.iter().sum::<f64>() * lf + layer.weight_grad_comm * lf / n as f64,
                op_value,
                op_bytes,
                fixed_bytes: model_state + boundary * live,
                ema_bytes: 3.0 * fwd_ema,
                op_fwd_ema: layer.op_fwd_ema.iter().map(|e| e * lf).collect(),
                op_flops: graph.iter().map(|o| o.fwd_flops * lf).collect(),
            }
        })
        .collect();
    Ok(Prepared {
        wafer: wafer.clone(),
        workload: wl.clone(),
        tp,
        pp,
        split,
        params: *params,
        capacity: wafer.dram_capacity_per_die().floor() as u64,
        model_state_per_die: model_state,
        boundary_bytes_per_die: boundary,
        layer,
        stages,
    })
}

impl Prepared {
    pub fn grid(&self) -> MeshGrid {
        MeshGrid::new(self.wafer.grid_x, self.wafer.grid_y)
    }

    pub fn stage_inputs(&self) -> Result<Vec<StageInput>> {
        self.stages
            .iter()
            .map(|sc| {
                let items: Vec<ProfileItem> = sc
                    .op_value
                    .iter()
                    .zip(&sc.op_bytes)
                    .enumerate()
                    .map(|(index, (&value, &bytes))| ProfileItem {
                        index,
                        bytes,
                        value,
                    })
                    .collect();
                Ok(StageInput {
                    profile: gcmr::recomp_profile(sc.stage, &items, self.params.quantum)?,
                    fixed_bytes: sc.fixed_bytes,
                    fwd_time: sc.fwd_time,
                    bwd_time: sc.bwd_time,
                })
            })
            .collect()
    }

    pub fn recomp_from_masks(&self, masks: &[u32]) -> Result<RecompConfig> {
        Ok(RecompConfig::from_masks(
            &self.stage_inputs()?,
            masks,
            self.capacity,
            self.params.quantum,
        ))
    }

    /// Pipeline traffic per boundary for the placement objective: forward
    /// activation plus backward gradient.
    pub fn comm_pp(&self) -> Vec<f64> {
        vec![2.0 * self.workload.boundary_bytes() as f64; self.pp.saturating_sub(1)]
    }

    /// Store masks that keep every operator.
    pub fn all_store_masks(&self) -> Vec<u32> {
        let n = self.layer.op_fwd.len();
        vec![(1u32 << n) - 1; self.pp]
    }
}

/// A point-to-point transfer to route on the mesh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkTask {
    pub src: Coord,
    pub dst: Coord,
    pub bytes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkLoadMap {
    pub loads: BTreeMap<Link, f64>,
    pub occupancy: BTreeMap<Link, u32>,
    /// Route of each task, in input order.
    pub routes: Vec<Vec<Link>>,
    /// `hops·α + bytes·occupancy / bw` on the busiest link of the route.
    pub effective_times: Vec<f64>,
    /// Bandwidth each task sees on its bottleneck link.
    pub effective_bandwidth: Vec<f64>,
}

/// Routes tasks largest-first, each on the shortest path minimising
/// `Σ (1 + punishment·occupancy)` over its links.
pub fn pp_link_allocation(tasks: &[LinkTask], bw: f64, alpha: f64, punishment: f64) -> LinkLoadMap {
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    order.sort_by(|&a, &b| tasks[b].bytes.total_cmp(&tasks[a].bytes).then(a.cmp(&b)));
    let mut occupancy: BTreeMap<Link, u32> = BTreeMap::new();
    let mut loads: BTreeMap<Link, f64> = BTreeMap::new();
    let mut routes = vec![Vec::new(); tasks.len()];
    for &i in &order {
        let t = &tasks[i];
        let path = placement::min_weight_shortest_path(t.src, t.dst, |l| {
            1.0 + punishment * f64::from(occupancy.get(l).copied().unwrap_or(0))
        });
        for l in &path {
            *occupancy.entry(*l).or_default() += 1;
            *loads.entry(*l).or_default() += t.bytes;
        }
        routes[i] = path;
    }
    let mut effective_times = Vec::with_capacity(tasks.len());
    let mut effective_bandwidth = Vec::with_capacity(tasks.len());
    for (t, r) in tasks.iter().zip(&routes) {
        let occ = r.iter().map(|l| occupancy[l]).max().unwrap_or(0);
        if r.is_empty() {
            effective_times.push(0.0);
            effective_bandwidth.push(bw);
        } else {
            let eff = bw / f64::from(occ);
            effective_times.push(r.len() as f64 * alpha + t.bytes / eff);
            effective_bandwidth.push(eff);
        }
    }
    LinkLoadMap {
        loads,
        occupancy,
        routes,
        effective_times,
        effective_bandwidth,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub timings: Vec<StageTiming>,
    pub transfers: Vec<f64>,
    /// Offload time that could not hide under compute, per stage.
    pub offload_extra: Vec<f64>,
    /// Offload bytes moved per microbatch, per stage (sent + received).
    pub offload_traffic: Vec<f64>,
    pub links: LinkLoadMap,
    pub t_max: f64,
    pub resident: Vec<u64>,
}

/// Per-stage timings including routed traffic and offloading.
pub fn stage_schedule(
    prep: &Prepared,
    recomp: &RecompConfig,
    pm: &PlacementMap,
    alloc: &AllocationSet,
) -> Result<StageSchedule> {
    let pp = prep.pp;
    if recomp.stages.len() != pp || pm.stages() != pp {
        return Err(Error::InvalidArgument(format!(
            "strategy has {pp} stages, recompute config {} and placement {}",
            recomp.stages.len(),
            pm.stages()
        )));
    }
    let memory = recomp.memory();
    for a in &alloc.allocations {
        if a.sender >= pp || a.helper >= pp || a.bytes > memory[a.sender] {
            return Err(Error::InvalidArgument(format!(
                "allocation {a:?} does not match the strategy"
            )));
        }
    }
    let resident = alloc.resident(&memory);
    for (t, &r) in resident.iter().enumerate() {
        if r > prep.capacity {
            return Err(Error::MemoryInfeasible(format!(
                "stage {t} needs {r} bytes per die after offloading, capacity {}",
                prep.capacity
            )));
        }
    }

    let wafer = &prep.wafer;
    let act = prep.workload.boundary_bytes() as f64;
    let mut tasks: Vec<LinkTask> = (1..pp)
        .map(|s| LinkTask {
            src: pm.center(s - 1),
            dst: pm.center(s),
            bytes: act,
        })
        .collect();
    let live = |s: usize| prep.stages[s].live.max(1) as f64;
    for a in &alloc.allocations {
        tasks.push(LinkTask {
            src: pm.center(a.sender),
            dst: pm.center(a.helper),
            bytes: 2.0 * a.bytes as f64 / live(a.sender),
        });
    }
    let links = pp_link_allocation(&tasks, wafer.d2d_bandwidth, wafer.d2d_latency, prep.params.punishment);
    let transfers: Vec<f64> = links.effective_times[..pp.saturating_sub(1)].to_vec();

    let mut timings: Vec<StageTiming> = recomp
        .stages
        .iter()
        .zip(&prep.stages)
        .map(|(r, sc)| StageTiming::new(sc.fwd_time, sc.bwd_time, r.recompute_time.max(0.0)))
        .collect();

    // Offload overlap: traffic drains at min(spare link bw, spare DRAM bw)
    // while the stage computes; whatever does not fit is serialized.
    let dram_bw = wafer.dram_bandwidth_per_die();
    let spare_dram: Vec<f64> = (0..pp)
        .map(|s| {
            let sc = &prep.stages[s];
            let window = timings[s].steady_time();
            let recompute_ema: f64 = (0..sc.op_fwd_ema.len())
                .filter(|&i| !recomp.stages[s].stores(i))
                .map(|i| sc.op_fwd_ema[i])
                .sum();
            let used = if window > 0.0 {
                (sc.ema_bytes + recompute_ema) / window
            } else {
                0.0
            };
            (dram_bw - used).max(0.0)
        })
        .collect();
    let mut need = vec![0.0f64; pp];
    let mut traffic = vec![0.0f64; pp];
    for (k, a) in alloc.allocations.iter().enumerate() {
        let bytes = tasks[pp - 1 + k].bytes;
        let link_bw = links.effective_bandwidth[pp - 1 + k];
        for s in [a.sender, a.helper] {
            let rate = link_bw.min(spare_dram[s]);
            need[s] += if rate > 1e-9 * dram_bw {
                bytes / rate
            } else {
                // No headroom: the transfer runs alone at full speed.
                bytes / link_bw.min(dram_bw) + timings[s].steady_time()
            };
            traffic[s] += bytes;
        }
    }
    let offload_extra: Vec<f64> = (0..pp)
        .map(|s| (need[s] - timings[s].steady_time()).max(0.0))
        .collect();
    for (t, extra) in timings.iter_mut().zip(&offload_extra) {
        t.bwd_time += extra;
    }
    let t_max = timings.iter().map(|t| t.steady_time()).fold(0.0, f64::max);
    Ok(StageSchedule {
        timings,
        transfers,
        offload_extra,
        offload_traffic: traffic,
        links,
        t_max,
        resident,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub layers: u32,
    pub fwd_time: f64,
    pub bwd_time: f64,
    pub recompute_time: f64,
    pub offload_extra: f64,
    pub resident_bytes: u64,
    pub dram_occupancy: f64,
    pub dram_bw_utilization: f64,
    pub compute_utilization: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub iteration_time: f64,
    /// Useful FLOP/s: forward and backward work only.
    pub throughput: f64,
    pub useful_flops: f64,
    pub recompute_flops: f64,
    pub t_max: f64,
    pub compute_utilization: f64,
    pub max_link_utilization: f64,
    pub mean_link_utilization: f64,
    pub stages: Vec<StageReport>,
    /// DRAM occupancy fraction of every die, row-major (`grid_y × grid_x`).
    pub dram_heatmap: Vec<Vec<f64>>,
    pub transfers: Vec<f64>,
    /// Optimizer-step time is not part of `iteration_time`.
    pub excludes_optimizer_step: bool,
}

pub fn evaluate_iteration(
    prep: &Prepared,
    recomp: &RecompConfig,
    pm: &PlacementMap,
    alloc: &AllocationSet,
) -> Result<(EvaluationReport, PipelineTimeline)> {
    let sched = stage_schedule(prep, recomp, pm, alloc)?;
    let n = prep.workload.num_microbatches;
    let tl = pipeline::schedule_1f1b(prep.pp, n, &sched.timings, &sched.transfers)?;
    let t = tl.iteration_time;
    let wafer = &prep.wafer;
    let nf = n as f64;
    let tp = prep.tp as f64;
    let useful = prep.workload.useful_flops()?;

    let mut recompute_flops = 0.0;
    let mut stages = Vec::with_capacity(prep.pp);
    let die_flops = wafer.die.compute_flops();
    let dram_bw = wafer.dram_bandwidth_per_die();
    for (s, sc) in prep.stages.iter().enumerate() {
        let r = &recomp.stages[s];
        let recomp_die: f64 = (0..sc.op_flops.len())
            .filter(|&i| !r.stores(i))
            .map(|i| sc.op_flops[i])
            .sum();
        let recomp_ema: f64 = (0..sc.op_fwd_ema.len())
            .filter(|&i| !r.stores(i))
            .map(|i| sc.op_fwd_ema[i])
            .sum();
        recompute_flops += recomp_die * tp * nf;
        let work_die: f64 = 3.0 * sc.op_flops.iter().sum::<f64>() + recomp_die;
        let timing = &sched.timings[s];
        stages.push(StageReport {
            stage: s,
            layers: sc.layers,
            fwd_time: timing.fwd_time,
            bwd_time: timing.bwd_time,
            recompute_time: timing.recompute_time,
            offload_extra: sched.offload_extra[s],
            resident_bytes: sched.resident[s],
            dram_occupancy: sched.resident[s] as f64 / wafer.dram_capacity_per_die(),
            dram_bw_utilization: if t > 0.0 {
                (nf * (sc.ema_bytes + recomp_ema + sched.offload_traffic[s])) / (dram_bw * t)
            } else {
                0.0
            },
            compute_utilization: if t > 0.0 {
                nf * work_die / (die_flops * t)
            } else {
                0.0
            },
        });
    }

    let mut heat = vec![vec![0.0; wafer.grid_x as usize]; wafer.grid_y as usize];
    for s in 0..prep.pp {
        for d in pm.region(s).dies() {
            heat[d.y as usize][d.x as usize] = stages[s].dram_occupancy;
        }
    }
    let link_util: Vec<f64> = sched
        .links
        .loads
        .values()
        .map(|b| if t > 0.0 { 2.0 * nf * b / (wafer.d2d_bandwidth * t) } else { 0.0 })
        .collect();
    let links_total = f64::from(
        wafer.grid_x.saturating_sub(1) * wafer.grid_y + wafer.grid_y.saturating_sub(1) * wafer.grid_x,
    );
    let report = EvaluationReport {
        iteration_time: t,
        throughput: if t > 0.0 { useful / t } else { 0.0 },
        useful_flops: useful,
        recompute_flops,
        t_max: sched.t_max,
        compute_utilization: if t > 0.0 {
            useful / (wafer.wafer_compute_flops() * t)
        } else {
            0.0
        },
        max_link_utilization: link_util.iter().copied().fold(0.0, f64::max),
        mean_link_utilization: if links_total > 0.0 {
            link_util.iter().sum::<f64>() / links_total
        } else {
            0.0
        },
        stages,
        dram_heatmap: heat,
        transfers: sched.transfers.clone(),
        excludes_optimizer_step: true,
    };
    Ok((report, tl))
}

/// Breakdown of the first-order baseline cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineCost {
    pub comp_flops: f64,
    pub recomp_flops: f64,
    pub access_bytes: f64,
    pub comm_bytes: f64,
    pub recompute_fraction: f64,
    pub eta: f64,
    pub total: f64,
}

/// `C_comp + C_recomp + η·(C_access + C_comm)` from workload totals.
///
/// The recompute share is whatever part of the first stage's checkpoints
/// does not fit per-die DRAM next to the model state. Hardware speed does
/// not enter, so more DRAM always looks better.
pub fn analytic_baseline(
    wafer: &WaferConfig,
    wl: &TrainingWorkload,
    tp: u64,
    pp: usize,
    eta: f64,
) -> Result<BaselineCost> {
    let useful = wl.useful_flops()?;
    let fwd = useful / 3.0;
    let state = model_state_bytes(&wl.model, tp, pp as u64) as f64;
    let ckpt_per_mb_layer = (wl.checkpoint_bytes_total / u64::from(wl.model.num_layers)) as f64;
    let layers0 = f64::from(split_layers(wl.model.num_layers, pp as u32)[0]);
    let live0 = (pp as u64).min(wl.num_microbatches) as f64;
    let ckpt_die = ckpt_per_mb_layer * layers0 * live0 / tp as f64;
    let cap = wafer.dram_capacity_per_die();
    let r = if ckpt_die <= 0.0 {
        0.0
    } else {
        ((state + ckpt_die - cap) / ckpt_die).clamp(0.0, 1.0)
    };
    let n = wl.num_microbatches as f64;
    let access = 3.0 * wl.model_p_bytes as f64 / 16.0 * FP16_BYTES as f64 * n
        + 2.0 * wl.checkpoint_bytes_total as f64 * n;
    let act = wl.boundary_bytes() as f64;
    let tp_f = tp as f64;
    let tp_comm = if tp > 1 {
        // Two all-reduces forward and two backward per layer.
        4.0 * 2.0 * (tp_f - 1.0) / tp_f * act * f64::from(wl.model.num_layers) * n
    } else {
        0.0
    };
    let pp_comm = 2.0 * act * (pp as f64 - 1.0) * n;
    let comm = tp_comm + pp_comm;
    let recomp = r * fwd;
    Ok(BaselineCost {
        comp_flops: useful,
        recomp_flops: recomp,
        access_bytes: access,
        comm_bytes: comm,
        recompute_fraction: r,
        eta,
        total: useful + recomp + eta * (access + comm),
    })
}

/// Helper for tests and callers with a single die type: table covering a
/// strategy's operator shapes.
pub fn table_for(
    wafer: &WaferConfig,
    wl: &TrainingWorkload,
    splits: &[TpSplit],
    params: &EngineParams,
) -> Result<PerfTable> {
    let ctx = cost_context(wafer, params);
    let mut shapes = Vec::new();
    let mut seen = HashSet::new();
    for s in splits {
        for sh in required_shapes(wl, s)? {
            if seen.insert(sh) {
                shapes.push(sh);
            }
        }
    }
    Ok(crate::cost_model::build_perf_table(&shapes, std::slice::from_ref(&ctx)))
}

/// Plain greedy pipeline for a strategy: GCMR, capacity pairing, location
/// aware placement, then location-aware allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyPlan {
    pub recomp: RecompConfig,
    pub placement: PlacementMap,
    pub allocation: AllocationSet,
    pub initial_pairs: Vec<gcmr::MemPair>,
}

pub fn greedy_plan(prep: &Prepared, seed: u64) -> Result<GreedyPlan> {
    let inputs = prep.stage_inputs()?;
    let recomp = gcmr::gcmr_dp(&inputs, prep.capacity, prep.params.quantum)?;
    plan_for_recomp(prep, recomp, seed)
}

/// Pairs, places and allocates for a fixed recomputation choice.
pub fn plan_for_recomp(prep: &Prepared, recomp: RecompConfig, seed: u64) -> Result<GreedyPlan> {
    let memory = recomp.memory();
    let pairs = gcmr::pair_memory(&memory, prep.capacity)?;
    let loads: Vec<PairLoad> = pairs
        .iter()
        .map(|p| PairLoad {
            sender: p.sender,
            helper: p.helper,
            bytes: p.offload_bytes as f64,
        })
        .collect();
    let pm = placement::location_aware_placement(
        prep.pp,
        prep.split.shape,
        prep.grid(),
        &prep.comm_pp(),
        &loads,
        seed,
    )?;
    let allocation = allocate_for(prep, &memory, &pm)?;
    Ok(GreedyPlan {
        recomp,
        placement: pm,
        allocation,
        initial_pairs: pairs,
    })
}

/// Location-aware allocation of every sender's overflow.
pub fn allocate_for(prep: &Prepared, memory: &[u64], pm: &PlacementMap) -> Result<AllocationSet> {
    let (senders, helpers) = gcmr::identify_senders_helpers(memory, prep.capacity);
    let s: Vec<(usize, u64)> = senders.iter().map(|&t| (t, memory[t] - prep.capacity)).collect();
    let h: Vec<(usize, u64)> = helpers.iter().map(|&t| (t, prep.capacity - memory[t])).collect();
    crate::dram_alloc::allocate_overflow(&s, &h, pm)
}
