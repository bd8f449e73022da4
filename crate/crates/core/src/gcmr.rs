//! Globally coordinated recomputation planning.
//!
//! Each pipeline stage gets a memory → saved-time profile `P(m)` (a 0/1
//! knapsack over its operators). A min-max dynamic program then hands out
//! checkpoint memory so the slowest stage is as fast as possible:
//!
//! ```text
//! T[t, m] = min over m_t ≤ m of max(T[t+1, m − m_t], B_t + 2F_t − P_t(m_t))
//! ```
//!
//! `m` ranges over the cumulative capacity of stages `t..pp`, so a stage may
//! take more than its own DRAM share only by borrowing from later stages.
//! Stages that end up above capacity are senders; the rest are helpers.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// 256 MiB.
pub const DEFAULT_QUANTUM: u64 = 256 * 1024 * 1024;

/// One operator (across all layers of a stage) as a knapsack item.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileItem {
    /// Operator position within the layer; bit `index` of a store mask.
    pub index: usize,
    /// Checkpoint bytes per die for all layers and live microbatches.
    pub bytes: u64,
    /// Forward time avoided per microbatch when stored.
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub quanta: u64,
    pub bytes: u64,
    pub value: f64,
    pub mask: u32,
}

/// `P(m)` as a step function: `frontier` is sorted by `quanta` with strictly
/// increasing `value`; `P(m)` is the last point with `quanta ≤ m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecompProfile {
    pub stage: usize,
    pub quantum: u64,
    pub items: Vec<ProfileItem>,
    pub frontier: Vec<ProfilePoint>,
}

/// Value of a store mask, summed in item order.
pub fn subset_value(items: &[ProfileItem], mask: u32) -> f64 {
    items
        .iter()
        .filter(|it| mask & (1 << it.index) != 0)
        .map(|it| it.value)
        .sum()
}

pub fn subset_bytes(items: &[ProfileItem], mask: u32) -> u64 {
    items
        .iter()
        .filter(|it| mask & (1 << it.index) != 0)
        .map(|it| it.bytes)
        .sum()
}

pub fn recomp_profile(stage: usize, items: &[ProfileItem], quantum: u64) -> Result<RecompProfile> {
    if quantum == 0 {
        return Err(Error::InvalidArgument("memory quantum must be positive".into()));
    }
    if let Some(it) = items.iter().find(|it| it.index >= 32) {
        return Err(Error::InvalidArgument(format!(
            "operator index {} exceeds mask width",
            it.index
        )));
    }
    // Pareto frontier over (bytes, value), built item by item.
    let mut front: Vec<(u64, u32)> = vec![(0, 0)];
    for it in items {
        let bit = 1u32 << it.index;
        let mut cand: Vec<(u64, u32)> = front.clone();
        cand.extend(front.iter().map(|&(b, m)| (b + it.bytes, m | bit)));
        cand.sort_by_key(|&(b, m)| (b, m));
        front.clear();
        let mut best = f64::NEG_INFINITY;
        for (b, m) in cand {
            let v = subset_value(items, m);
            if v > best {
                best = v;
                front.push((b, m));
            }
        }
    }
    let mut frontier: Vec<ProfilePoint> = Vec::with_capacity(front.len());
    for (bytes, mask) in front {
        let p = ProfilePoint {
            quanta: bytes.div_ceil(quantum),
            bytes,
            value: subset_value(items, mask),
            mask,
        };
        match frontier.last_mut() {
            Some(last) if last.quanta == p.quanta => *last = p,
            _ => frontier.push(p),
        }
    }
    Ok(RecompProfile {
        stage,
        quantum,
        items: items.to_vec(),
        frontier,
    })
}

impl RecompProfile {
    pub fn at(&self, quanta: u64) -> &ProfilePoint {
        let idx = self.frontier.partition_point(|p| p.quanta <= quanta);
        &self.frontier[idx.max(1) - 1]
    }

    pub fn full(&self) -> &ProfilePoint {
        self.frontier.last().expect("frontier holds the empty set")
    }

    /// Forward time of every item: the saving when all are stored.
    pub fn total_value(&self) -> f64 {
        subset_value(&self.items, u32::MAX)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageInput {
    pub profile: RecompProfile,
    /// Model state and stage-input activations that must stay on the die.
    pub fixed_bytes: u64,
    pub fwd_time: f64,
    pub bwd_time: f64,
}

/// Steady time with recomputation: backward, the recomputed forward and the
/// original forward, minus what the stored checkpoints buy back.
pub fn stage_time(fwd: f64, bwd: f64, saved: f64) -> f64 {
    bwd + 2.0 * fwd - saved
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecomp {
    pub stage: usize,
    pub store_mask: u32,
    pub stored_bytes: u64,
    pub fixed_bytes: u64,
    /// `M[t]`: fixed plus stored checkpoint bytes, before offloading.
    pub memory_bytes: u64,
    pub budget_quanta: u64,
    pub recompute_time: f64,
    pub fwd_time: f64,
    pub bwd_time: f64,
    pub stage_time: f64,
}

impl StageRecomp {
    pub fn stores(&self, op_index: usize) -> bool {
        self.store_mask & (1 << op_index) != 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecompConfig {
    pub quantum: u64,
    pub capacity: u64,
    pub stages: Vec<StageRecomp>,
    pub max_stage_time: f64,
}

impl RecompConfig {
    /// Builds a configuration from explicit store masks.
    pub fn from_masks(stages: &[StageInput], masks: &[u32], capacity: u64, quantum: u64) -> Self {
        let recs: Vec<StageRecomp> = stages
            .iter()
            .zip(masks)
            .enumerate()
            .map(|(t, (st, &mask))| stage_record(t, st, mask))
            .collect();
        let max = recs.iter().map(|r| r.stage_time).fold(0.0, f64::max);
        Self {
            quantum,
            capacity,
            stages: recs,
            max_stage_time: max,
        }
    }

    pub fn memory(&self) -> Vec<u64> {
        self.stages.iter().map(|s| s.memory_bytes).collect()
    }

    pub fn masks(&self) -> Vec<u32> {
        self.stages.iter().map(|s| s.store_mask).collect()
    }

    pub fn total_overflow(&self) -> u64 {
        self.stages
            .iter()
            .map(|s| s.memory_bytes.saturating_sub(self.capacity))
            .sum()
    }

    pub fn total_free(&self) -> u64 {
        self.stages
            .iter()
            .map(|s| self.capacity.saturating_sub(s.memory_bytes))
            .sum()
    }

    /// Overflow can be absorbed on-wafer and every stage's fixed part fits.
    pub fn is_feasible(&self) -> bool {
        self.stages.iter().all(|s| s.fixed_bytes <= self.capacity)
            && self.total_overflow() <= self.total_free()
    }
}

fn stage_record(t: usize, st: &StageInput, mask: u32) -> StageRecomp {
    let items = &st.profile.items;
    let stored = subset_bytes(items, mask);
    let saved = subset_value(items, mask);
    let q = st.profile.quantum.max(1);
    StageRecomp {
        stage: t,
        store_mask: mask,
        stored_bytes: stored,
        fixed_bytes: st.fixed_bytes,
        memory_bytes: st.fixed_bytes + stored,
        budget_quanta: stored.div_ceil(q),
        recompute_time: st.fwd_time - saved,
        fwd_time: st.fwd_time,
        bwd_time: st.bwd_time,
        stage_time: stage_time(st.fwd_time, st.bwd_time, saved),
    }
}

/// Per-stage capacity in quanta left after the fixed part.
pub fn stage_caps(stages: &[StageInput], capacity: u64, quantum: u64) -> Result<Vec<u64>> {
    stages
        .iter()
        .enumerate()
        .map(|(t, st)| {
            if st.fixed_bytes > capacity {
                Err(Error::MemoryInfeasible(format!(
                    "stage {t}: model state and stage inputs need {} bytes, die holds {capacity}",
                    st.fixed_bytes
                )))
            } else {
                Ok((capacity - st.fixed_bytes) / quantum)
            }
        })
        .collect()
}

pub fn gcmr_dp(stages: &[StageInput], capacity: u64, quantum: u64) -> Result<RecompConfig> {
    if quantum == 0 {
        return Err(Error::InvalidArgument("memory quantum must be positive".into()));
    }
    if stages.is_empty() {
        return Err(Error::InvalidArgument("no pipeline stages".into()));
    }
    if let Some(st) = stages.iter().find(|s| s.profile.quantum != quantum) {
        return Err(Error::InvalidArgument(format!(
            "stage {} profiled with quantum {}, expected {quantum}",
            st.profile.stage, st.profile.quantum
        )));
    }
    let pp = stages.len();
    let caps = stage_caps(stages, capacity, quantum)?;
    let mut suffix = vec![0u64; pp + 1];
    for t in (0..pp).rev() {
        suffix[t] = suffix[t + 1] + caps[t];
    }

    let mut next: Vec<f64> = vec![0.0];
    let mut choice: Vec<Vec<u32>> = vec![Vec::new(); pp];
    for t in (0..pp).rev() {
        let st = &stages[t];
        let times: Vec<f64> = st
            .profile
            .frontier
            .iter()
            .map(|p| stage_time(st.fwd_time, st.bwd_time, p.value))
            .collect();
        let width = suffix[t] as usize + 1;
        let mut cur = vec![f64::INFINITY; width];
        let mut pick = vec![0u32; width];
        for m in 0..width as u64 {
            for (i, p) in st.profile.frontier.iter().enumerate() {
                if p.quanta > m {
                    break;
                }
                let rest = (m - p.quanta).min(suffix[t + 1]) as usize;
                let v = next[rest].max(times[i]);
                if v < cur[m as usize] {
                    cur[m as usize] = v;
                    pick[m as usize] = i as u32;
                }
            }
        }
        next = cur;
        choice[t] = pick;
    }

    let mut m = suffix[0];
    let mut masks = Vec::with_capacity(pp);
    for t in 0..pp {
        let p = &stages[t].profile.frontier[choice[t][m as usize] as usize];
        masks.push(p.mask);
        m = (m - p.quanta).min(suffix[t + 1]);
    }
    let mut cfg = RecompConfig::from_masks(stages, &masks, capacity, quantum);
    cfg.max_stage_time = next[suffix[0] as usize];
    Ok(cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemPair {
    pub sender: usize,
    pub helper: usize,
    pub offload_bytes: u64,
}

/// Senders by overflow descending, helpers by free capacity descending;
/// ties by stage id.
pub fn identify_senders_helpers(memory: &[u64], capacity: u64) -> (Vec<usize>, Vec<usize>) {
    let mut senders: Vec<usize> = (0..memory.len()).filter(|&t| memory[t] > capacity).collect();
    let mut helpers: Vec<usize> = (0..memory.len()).filter(|&t| memory[t] <= capacity).collect();
    senders.sort_by_key(|&t| (std::cmp::Reverse(memory[t] - capacity), t));
    helpers.sort_by_key(|&t| (std::cmp::Reverse(capacity - memory[t]), t));
    (senders, helpers)
}

/// Greedy pairing: the sender with most remaining overflow takes from the
/// helper with most remaining room until every overflow is placed.
pub fn pair_memory(memory: &[u64], capacity: u64) -> Result<Vec<MemPair>> {
    let (senders, helpers) = identify_senders_helpers(memory, capacity);
    let mut need: Vec<(usize, u64)> = senders.iter().map(|&s| (s, memory[s] - capacity)).collect();
    let mut room: Vec<(usize, u64)> = helpers.iter().map(|&h| (h, capacity - memory[h])).collect();
    let total_need: u64 = need.iter().map(|x| x.1).sum();
    let total_room: u64 = room.iter().map(|x| x.1).sum();
    if total_need > total_room {
        return Err(Error::MemoryInfeasible(format!(
            "checkpoint overflow exceeds free DRAM by {} bytes",
            total_need - total_room
        )));
    }
    let largest = |v: &[(usize, u64)]| {
        v.iter()
            .enumerate()
            .filter(|(_, x)| x.1 > 0)
            .max_by_key(|(_, x)| (x.1, std::cmp::Reverse(x.0)))
            .map(|(i, _)| i)
    };
    let mut pairs = Vec::new();
    while let Some(si) = largest(&need) {
        let hi = largest(&room).expect("capacity checked above");
        let amount = need[si].1.min(room[hi].1);
        pairs.push(MemPair {
            sender: need[si].0,
            helper: room[hi].0,
            offload_bytes: amount,
        });
        need[si].1 -= amount;
        room[hi].1 -= amount;
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(spec: &[(u64, f64)]) -> Vec<ProfileItem> {
        spec.iter()
            .enumerate()
            .map(|(index, &(bytes, value))| ProfileItem {
                index,
                bytes,
                value,
            })
            .collect()
    }

    fn brute_profile(it: &[ProfileItem], q: u64, m: u64) -> f64 {
        let n = it.len();
        (0..1u32 << n)
            .filter(|&mask| subset_bytes(it, mask).div_ceil(q) <= m)
            .map(|mask| subset_value(it, mask))
            .fold(0.0, f64::max)
    }

    /// Exhaustive search over per-stage store sets under the suffix
    /// capacity constraints.
    fn brute_dp(stages: &[StageInput], capacity: u64, q: u64) -> Option<f64> {
        let caps = stage_caps(stages, capacity, q).ok()?;
        let pp = stages.len();
        let n: Vec<usize> = stages.iter().map(|s| s.profile.items.len()).collect();
        let mut best: Option<f64> = None;
        let total: usize = n.iter().sum();
        for code in 0..1u64 << total {
            let mut shift = 0;
            let mut masks = Vec::new();
            for &k in &n {
                masks.push(((code >> shift) & ((1 << k) - 1)) as u32);
                shift += k;
            }
            let used: Vec<u64> = (0..pp)
                .map(|t| subset_bytes(&stages[t].profile.items, masks[t]).div_ceil(q))
                .collect();
            let ok = (0..pp).all(|t| used[t..].iter().sum::<u64>() <= caps[t..].iter().sum::<u64>());
            if !ok {
                continue;
            }
            let worst = (0..pp)
                .map(|t| {
                    let s = &stages[t];
                    stage_time(s.fwd_time, s.bwd_time, subset_value(&s.profile.items, masks[t]))
                })
                .fold(0.0, f64::max);
            if best.is_none_or(|b| worst < b) {
                best = Some(worst);
            }
        }
        best
    }

    fn stage(t: usize, it: Vec<ProfileItem>, q: u64, fixed: u64, bwd: f64) -> StageInput {
        let profile = recomp_profile(t, &it, q).unwrap();
        let fwd = profile.total_value();
        StageInput {
            profile,
            fixed_bytes: fixed,
            fwd_time: fwd,
            bwd_time: bwd,
        }
    }

    #[test]
    fn profile_extremes() {
        let it = items(&[(3, 1.0), (5, 2.0), (2, 0.5)]);
        let p = recomp_profile(0, &it, 1).unwrap();
        assert_eq!(p.at(0).value, 0.0);
        assert_eq!(p.at(0).mask, 0);
        assert_eq!(p.at(100).value, 3.5);
        assert_eq!(p.full().bytes, 10);
    }

    #[test]
    fn profile_matches_brute_force() {
        let it = items(&[(3, 1.0), (5, 2.5), (2, 0.5), (4, 2.0)]);
        let p = recomp_profile(0, &it, 2).unwrap();
        for m in 0..=8 {
            assert_eq!(p.at(m).value, brute_profile(&it, 2, m), "m={m}");
        }
    }

    #[test]
    fn single_stage_stores_what_fits() {
        let it = items(&[(3, 1.0), (5, 2.0)]);
        let s = stage(0, it, 1, 2, 3.0);
        let cfg = gcmr_dp(std::slice::from_ref(&s), 12, 1).unwrap();
        assert_eq!(cfg.stages[0].memory_bytes, 10);
        assert_eq!(cfg.stages[0].recompute_time, 0.0);
        let cfg = gcmr_dp(&[s], 7, 1).unwrap();
        assert_eq!(cfg.stages[0].stored_bytes, 5);
    }

    #[test]
    fn two_stage_matches_exhaustive() {
        let q = 1;
        let a = stage(0, items(&[(3, 1.0), (2, 2.0)]), q, 0, 4.0);
        let b = stage(1, items(&[(1, 0.5), (2, 1.5)]), q, 0, 3.0);
        let stages = [a, b];
        for cap in 0..=6 {
            let dp = gcmr_dp(&stages, cap, q).unwrap();
            assert_eq!(Some(dp.max_stage_time), brute_dp(&stages, cap, q), "cap={cap}");
        }
    }

    #[test]
    fn ample_memory_removes_recompute() {
        let stages: Vec<_> = (0..3)
            .map(|t| stage(t, items(&[(1, 1.0), (1, 1.0)]), 1, 0, 4.0))
            .collect();
        let cfg = gcmr_dp(&stages, 100, 1).unwrap();
        for s in &cfg.stages {
            assert_eq!(s.stage_time, s.bwd_time + s.fwd_time);
        }
    }

    #[test]
    fn fixed_part_overflow_is_infeasible() {
        let s = stage(0, items(&[(1, 1.0)]), 1, 11, 1.0);
        assert!(matches!(gcmr_dp(&[s], 10, 1), Err(Error::MemoryInfeasible(_))));
    }

    #[test]
    fn sender_helper_example() {
        let (c, q) = (100, 10);
        let (s, h) = identify_senders_helpers(&[c + 2 * q, c, c - q, c - 3 * q], c);
        assert_eq!(s, vec![0]);
        assert_eq!(h, vec![3, 2, 1]);
        let (s, h) = identify_senders_helpers(&[1, 2, 3], c);
        assert!(s.is_empty());
        assert_eq!(h.len(), 3);
    }

    #[test]
    fn pairing_spans_helpers() {
        let (c, q) = (100, 1);
        let pairs = pair_memory(&[c + 10 * q, c - 6 * q, c - 5 * q], c).unwrap();
        assert_eq!(
            pairs,
            vec![
                MemPair { sender: 0, helper: 1, offload_bytes: 6 },
                MemPair { sender: 0, helper: 2, offload_bytes: 4 }
            ]
        );
        assert!(pair_memory(&[50, 60], c).unwrap().is_empty());
    }

    #[test]
    fn pairing_ties_follow_stage_id() {
        let c = 100;
        let pairs = pair_memory(&[105, 105, 95, 95], c).unwrap();
        assert_eq!(
            pairs,
            vec![
                MemPair { sender: 0, helper: 2, offload_bytes: 5 },
                MemPair { sender: 1, helper: 3, offload_bytes: 5 }
            ]
        );
    }

    #[test]
    fn pairing_reports_shortfall() {
        let err = pair_memory(&[120, 95], 100).unwrap_err();
        assert!(matches!(err, Error::MemoryInfeasible(ref m) if m.contains("15")));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn instance() -> impl Strategy<Value = (Vec<StageInput>, u64)> {
            let st = (
                prop::collection::vec((0u64..5, 0.1f64..3.0), 1..=4),
                0u64..3,
                0.5f64..6.0,
            );
            (prop::collection::vec(st, 1..=3), 1u64..=8).prop_map(|(v, cap)| {
                let stages = v
                    .into_iter()
                    .enumerate()
                    .map(|(t, (it, fixed, bwd))| stage(t, items(&it), 1, fixed, bwd))
                    .collect();
                (stages, cap + 2)
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(300))]

            #[test]
            fn dp_equals_exhaustive((stages, cap) in instance()) {
                let dp = gcmr_dp(&stages, cap, 1).ok().map(|c| c.max_stage_time);
                prop_assert_eq!(dp, brute_dp(&stages, cap, 1));
            }

            #[test]
            fn dp_config_is_consistent((stages, cap) in instance()) {
                if let Ok(cfg) = gcmr_dp(&stages, cap, 1) {
                    let worst = cfg.stages.iter().map(|s| s.stage_time).fold(0.0, f64::max);
                    prop_assert_eq!(worst, cfg.max_stage_time);
                    prop_assert!(cfg.is_feasible());
                    let pairs = pair_memory(&cfg.memory(), cap).unwrap();
                    let mut resident = cfg.memory();
                    for p in &pairs {
                        prop_assert!(p.offload_bytes > 0 && p.sender != p.helper);
                        resident[p.sender] -= p.offload_bytes;
                        resident[p.helper] += p.offload_bytes;
                    }
                    prop_assert!(resident.iter().all(|&r| r <= cap));
                    let sent: u64 = pairs.iter().map(|p| p.offload_bytes).sum();
                    prop_assert_eq!(sent, cfg.total_overflow());
                }
            }

            #[test]
            fn more_capacity_never_hurts((stages, cap) in instance()) {
                if let Ok(a) = gcmr_dp(&stages, cap, 1) {
                    let b = gcmr_dp(&stages, cap + 1, 1).unwrap();
                    prop_assert!(b.max_stage_time <= a.max_stage_time);
                }
            }

            #[test]
            fn profile_is_monotone_knapsack(spec in prop::collection::vec((0u64..20, 0.0f64..5.0), 0..=5), q in 1u64..6) {
                let it = items(&spec);
                let p = recomp_profile(0, &it, q).unwrap();
                prop_assert_eq!(p.at(0).value, brute_profile(&it, q, 0));
                let mut prev = -1.0;
                for m in 0..=(100 / q + 1) {
                    let v = p.at(m).value;
                    prop_assert!(v >= prev);
                    prop_assert_eq!(v, brute_profile(&it, q, m));
                    prev = v;
                }
            }
        }
    }
}
