//! Location-aware assignment of sender overflow to helper DRAM.
//!
//! Senders are served in the order given (largest overflow first). Each one
//! drains a priority queue of helpers keyed by `Dist·(1+γ)`, taking
//! `min(need, capacity)` from the cheapest helper and re-queueing it while it
//! still has room.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use serde::{Deserialize, Serialize};

use crate::placement::{self, Link, PairLoad, PlacementMap};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    pub sender: usize,
    pub helper: usize,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueuePop {
    pub sender: usize,
    pub helper: usize,
    pub cost: f64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AllocationSet {
    pub allocations: Vec<Allocation>,
    /// Remaining free bytes per helper stage.
    pub residual: Vec<(usize, u64)>,
    pub trace: Vec<QueuePop>,
}

impl AllocationSet {
    pub fn total(&self) -> u64 {
        self.allocations.iter().map(|a| a.bytes).sum()
    }

    pub fn sent_by(&self, sender: usize) -> u64 {
        self.allocations
            .iter()
            .filter(|a| a.sender == sender)
            .map(|a| a.bytes)
            .sum()
    }

    pub fn received_by(&self, helper: usize) -> u64 {
        self.allocations
            .iter()
            .filter(|a| a.helper == helper)
            .map(|a| a.bytes)
            .sum()
    }

    pub fn pair_loads(&self) -> Vec<PairLoad> {
        self.allocations
            .iter()
            .map(|a| PairLoad {
                sender: a.sender,
                helper: a.helper,
                bytes: a.bytes as f64,
            })
            .collect()
    }

    /// Per-stage resident bytes after offloading.
    pub fn resident(&self, memory: &[u64]) -> Vec<u64> {
        let mut r = memory.to_vec();
        for a in &self.allocations {
            r[a.sender] -= a.bytes;
            r[a.helper] += a.bytes;
        }
        r
    }
}

/// `Dist·(1+γ)` from sender to helper given the placement's pipeline links.
pub fn pair_cost(pm: &PlacementMap, pipe: &HashSet<Link>, sender: usize, helper: usize) -> f64 {
    let path = placement::min_weight_shortest_path(pm.center(sender), pm.center(helper), |l| {
        if pipe.contains(l) {
            1.0
        } else {
            0.0
        }
    });
    let gamma = path.iter().filter(|l| pipe.contains(l)).count();
    path.len() as f64 * (1.0 + gamma as f64)
}

#[derive(PartialEq)]
struct Entry {
    cost: f64,
    helper: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    // Min-heap on (cost, helper id).
    fn cmp(&self, o: &Self) -> Ordering {
        o.cost
            .total_cmp(&self.cost)
            .then_with(|| o.helper.cmp(&self.helper))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

/// `senders`: `(stage, overflow bytes)` in service order; `helpers`:
/// `(stage, free bytes)`.
pub fn allocate_overflow(
    senders: &[(usize, u64)],
    helpers: &[(usize, u64)],
    pm: &PlacementMap,
) -> Result<AllocationSet> {
    let pipe: HashSet<Link> = placement::pipeline_paths(pm).into_iter().flatten().collect();
    let mut cap: Vec<(usize, u64)> = helpers.to_vec();
    let mut out = AllocationSet::default();
    for &(s, need0) in senders {
        let mut need = need0;
        if need == 0 {
            continue;
        }
        let mut q: BinaryHeap<Entry> = cap
            .iter()
            .filter(|(h, c)| *c > 0 && *h != s)
            .map(|&(h, _)| Entry {
                cost: pair_cost(pm, &pipe, s, h),
                helper: h,
            })
            .collect();
        while need > 0 {
            let Some(e) = q.pop() else {
                return Err(Error::MemoryInfeasible(format!(
                    "stage {s}: {need} bytes of overflow left with no helper capacity"
                )));
            };
            let slot = cap.iter_mut().find(|(h, _)| *h == e.helper).expect("queued helper");
            let take = need.min(slot.1);
            slot.1 -= take;
            need -= take;
            out.trace.push(QueuePop {
                sender: s,
                helper: e.helper,
                cost: e.cost,
                bytes: take,
            });
            out.allocations.push(Allocation {
                sender: s,
                helper: e.helper,
                bytes: take,
            });
            if slot.1 > 0 {
                q.push(e);
            }
        }
    }
    out.residual = cap;
    Ok(out)
}
