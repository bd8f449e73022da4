//! Roofline + tiled-EMA operator cost model.
//!
//! GEMMs `C[M×N] = A[M×K]·B[K×N]` are tiled into `tm × tk × tn` blocks that
//! fit the die SRAM. The on-chip buffer holds one tile per tensor; a tile is
//! fetched from DRAM whenever it differs from the one currently resident.
//! The three loop nests are:
//!
//! | dataflow | loop order (outer → inner) | resident |
//! |----------|----------------------------|----------|
//! | OS       | `i, j, k`                  | C tile   |
//! | WS       | `j, k, i`                  | B tile   |
//! | IS       | `i, k, j`                  | A tile   |
//!
//! With `nX = ceil(X / tX)` the resulting traffic in elements is
//!
//! ```text
//! OS: A = MK·(nK == 1 ? 1 : nN)        B = KN·(nK·nN == 1 ? 1 : nM)   C = MN
//! WS: A = MK·(nM·nK == 1 ? 1 : nN)     B = KN                         C = MN·(nM == 1 ? 1 : 2nK−1)
//! IS: A = MK                           B = KN·(nN·nK == 1 ? 1 : nM)   C = MN·(nN == 1 ? 1 : 2nK−1)
//! ```
//!
//! where `2nK−1` counts partial-sum write-backs plus re-reads. Latency is
//! `max(flops / (die_flops·utilization), ema / dram_bandwidth)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::workload::{OpShape, OperatorNode};
use crate::{Error, OpKind, Result, WaferConfig, FP16_BYTES};

pub const DEFAULT_UTILIZATION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataflowKind {
    OutputStationary,
    WeightStationary,
    InputStationary,
    /// Only meaningful for convolutions; never admissible for transformer ops.
    RowStationary,
}

impl DataflowKind {
    pub fn short(self) -> &'static str {
        match self {
            DataflowKind::OutputStationary => "OS",
            DataflowKind::WeightStationary => "WS",
            DataflowKind::InputStationary => "IS",
            DataflowKind::RowStationary => "RS",
        }
    }
}

/// Dataflows the selector may pick for `kind`, in tie-break order.
pub fn admissible_dataflows(kind: OpKind) -> &'static [DataflowKind] {
    if kind.is_gemm() {
        &[
            DataflowKind::OutputStationary,
            DataflowKind::WeightStationary,
            DataflowKind::InputStationary,
        ]
    } else {
        &[DataflowKind::OutputStationary]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tiling {
    pub tm: u64,
    pub tk: u64,
    pub tn: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpCost {
    pub latency: f64,
    pub ema_bytes: f64,
    pub dataflow: DataflowKind,
}

/// What the cost model needs to know about a die.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostContext {
    pub identity: String,
    pub compute_flops: f64,
    pub sram_bytes: f64,
    pub array_rows: u64,
    pub array_cols: u64,
    pub dram_bandwidth: f64,
    pub utilization: f64,
}

impl CostContext {
    pub fn from_wafer(cfg: &WaferConfig, utilization: f64) -> Self {
        Self {
            identity: format!("{}/u{utilization:.6}", cfg.die_identity()),
            compute_flops: cfg.die.compute_flops(),
            sram_bytes: cfg.die.sram_total_bytes(),
            array_rows: u64::from(cfg.die.core_rows).max(1),
            array_cols: u64::from(cfg.die.core_cols).max(1),
            dram_bandwidth: cfg.dram_bandwidth_per_die(),
            utilization,
        }
    }

    pub fn effective_flops(&self) -> f64 {
        self.compute_flops * self.utilization
    }
}

fn round_to_multiple(t: u64, unit: u64) -> u64 {
    if t >= unit {
        t / unit * unit
    } else {
        t.max(1)
    }
}

/// Largest cube-ish tile fitting three FP16 tiles in SRAM, aligned to the
/// array and clamped per dimension. A problem that fits whole is one tile.
pub fn choose_tiling(m: u64, k: u64, n: u64, rows: u64, cols: u64, sram_bytes: f64) -> Tiling {
    let total = (m * k + k * n + m * n) as f64 * FP16_BYTES as f64;
    if total <= sram_bytes {
        return Tiling { tm: m, tk: k, tn: n };
    }
    let t = (sram_bytes / (3.0 * FP16_BYTES as f64)).sqrt().floor().max(1.0) as u64;
    Tiling {
        tm: round_to_multiple(t, rows).min(m).max(1),
        tk: t.min(k).max(1),
        tn: round_to_multiple(t, cols).min(n).max(1),
    }
}

/// EMA in bytes of a GEMM under an explicit tiling.
pub fn ema_for_tiling(m: u64, k: u64, n: u64, t: Tiling, dataflow: DataflowKind) -> f64 {
    let nm = m.div_ceil(t.tm) as f64;
    let nk = k.div_ceil(t.tk) as f64;
    let nn = n.div_ceil(t.tn) as f64;
    let (mk, kn, mn) = ((m * k) as f64, (k * n) as f64, (m * n) as f64);
    let elems = match dataflow {
        DataflowKind::OutputStationary | DataflowKind::RowStationary => {
            let a = if nk == 1.0 { mk } else { mk * nn };
            let b = if nk * nn == 1.0 { kn } else { kn * nm };
            a + b + mn
        }
        DataflowKind::WeightStationary => {
            let a = if nm * nk == 1.0 { mk } else { mk * nn };
            let c = if nm == 1.0 { mn } else { mn * (2.0 * nk - 1.0) };
            a + kn + c
        }
        DataflowKind::InputStationary => {
            let b = if nn * nk == 1.0 { kn } else { kn * nm };
            let c = if nn == 1.0 { mn } else { mn * (2.0 * nk - 1.0) };
            mk + b + c
        }
    };
    elems * FP16_BYTES as f64
}

pub fn ema_for_dataflow(
    m: u64,
    k: u64,
    n: u64,
    dataflow: DataflowKind,
    rows: u64,
    cols: u64,
    sram_bytes: f64,
) -> f64 {
    let t = choose_tiling(m, k, n, rows, cols, sram_bytes);
    ema_for_tiling(m, k, n, t, dataflow)
}

fn ema_of(kind: OpKind, shape: &OpShape, df: DataflowKind, ctx: &CostContext) -> f64 {
    if shape.is_empty() {
        return 0.0;
    }
    if kind.is_gemm() {
        ema_for_dataflow(
            shape.m,
            shape.k,
            shape.n,
            df,
            ctx.array_rows,
            ctx.array_cols,
            ctx.sram_bytes,
        )
    } else if kind == OpKind::FlashAttention {
        // Q, O once; K, V once per batch-head.
        let q_o = 2 * shape.m * shape.k;
        let k_v = 2 * shape.batch * shape.n * shape.k;
        ((q_o + k_v) * FP16_BYTES) as f64
    } else {
        (2 * shape.m * shape.n * FP16_BYTES) as f64
    }
}

fn roofline(flops: f64, ema: f64, ctx: &CostContext) -> f64 {
    let compute = if flops > 0.0 {
        flops / ctx.effective_flops()
    } else {
        0.0
    };
    let memory = if ema > 0.0 {
        ema / ctx.dram_bandwidth
    } else {
        0.0
    };
    compute.max(memory)
}

/// Cost of running `kind` on `shape` with a given dataflow.
pub fn cost_with_dataflow(
    kind: OpKind,
    shape: &OpShape,
    df: DataflowKind,
    ctx: &CostContext,
) -> OpCost {
    let flops = crate::workload::forward_flops(kind, shape);
    let ema = ema_of(kind, shape, df, ctx);
    OpCost {
        latency: roofline(flops, ema, ctx),
        ema_bytes: ema,
        dataflow: df,
    }
}

/// Forward cost under the best admissible dataflow. Ties go to the earlier
/// entry of [`admissible_dataflows`].
pub fn forward_cost(kind: OpKind, shape: &OpShape, ctx: &CostContext) -> OpCost {
    let mut best: Option<OpCost> = None;
    for &df in admissible_dataflows(kind) {
        let c = cost_with_dataflow(kind, shape, df, ctx);
        if best.is_none_or(|b| c.latency < b.latency) {
            best = Some(c);
        }
    }
    best.expect("at least one admissible dataflow")
}

pub fn select_dataflow(op: &OperatorNode, ctx: &CostContext) -> DataflowKind {
    forward_cost(op.kind, &op.shape, ctx).dataflow
}

pub fn op_latency(op: &OperatorNode, ctx: &CostContext) -> OpCost {
    forward_cost(op.kind, &op.shape, ctx)
}

/// Ring all-reduce: `α + 2(tp−1)/tp · bytes / bw`.
pub fn allreduce_time(tp: u64, bytes: f64, bw: f64, alpha: f64) -> f64 {
    if tp <= 1 {
        return 0.0;
    }
    let tp = tp as f64;
    alpha + 2.0 * (tp - 1.0) / tp * bytes / bw
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Fwd,
    Bwd,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PerfKey {
    pub kind: OpKind,
    pub shape: OpShape,
    pub die: String,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PerfEntry {
    key: PerfKey,
    cost: OpCost,
}

/// Offline operator table. Built once, then only read.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<PerfEntry>", into = "Vec<PerfEntry>")]
pub struct PerfTable {
    entries: BTreeMap<PerfKey, OpCost>,
}

impl From<Vec<PerfEntry>> for PerfTable {
    fn from(v: Vec<PerfEntry>) -> Self {
        Self {
            entries: v.into_iter().map(|e| (e.key, e.cost)).collect(),
        }
    }
}

impl From<PerfTable> for Vec<PerfEntry> {
    fn from(t: PerfTable) -> Self {
        t.entries
            .into_iter()
            .map(|(key, cost)| PerfEntry { key, cost })
            .collect()
    }
}

impl PerfTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, kind: OpKind, shape: &OpShape, die: &str, dir: Direction) -> Result<OpCost> {
        let key = PerfKey {
            kind,
            shape: *shape,
            die: die.to_string(),
            direction: dir,
        };
        self.entries.get(&key).copied().ok_or_else(|| {
            Error::TableMiss(format!(
                "{} {:?} {}x{}x{} (batch {}) on {die}",
                kind.as_str(),
                dir,
                shape.m,
                shape.k,
                shape.n,
                shape.batch
            ))
        })
    }

    pub fn lookup(&self, op: &OperatorNode, die: &str, dir: Direction) -> Result<OpCost> {
        self.get(op.kind, &op.shape, die, dir)
    }

    /// Adds forward and backward entries for one shape on one die.
    pub fn insert(&mut self, kind: OpKind, shape: OpShape, ctx: &CostContext) {
        let key = |direction| PerfKey {
            kind,
            shape,
            die: ctx.identity.clone(),
            direction,
        };
        if self.entries.contains_key(&key(Direction::Fwd)) {
            return;
        }
        let fwd = forward_cost(kind, &shape, ctx);
        let bwd = OpCost {
            latency: 2.0 * fwd.latency,
            ema_bytes: 2.0 * fwd.ema_bytes,
            dataflow: fwd.dataflow,
        };
        self.entries.insert(key(Direction::Fwd), fwd);
        self.entries.insert(key(Direction::Bwd), bwd);
    }

    pub fn merge(&mut self, other: PerfTable) {
        self.entries.extend(other.entries);
    }

    pub fn keys(&self) -> impl Iterator<Item = &PerfKey> {
        self.entries.keys()
    }
}

/// Builds a table for every `(kind, shape)` on every die context.
pub fn build_perf_table(shapes: &[(OpKind, OpShape)], dies: &[CostContext]) -> PerfTable {
    let mut t = PerfTable::default();
    for ctx in dies {
        for &(kind, shape) in shapes {
            t.insert(kind, shape, ctx);
        }
    }
    t
}
