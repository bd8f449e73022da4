//! 1F1B pipeline schedule simulation.
//!
//! Stage `s` of `p` (0-based) runs `p − s` warmup forwards, then
//! `n − p + s` backward/forward pairs, then `p − s` trailing backwards.
//! A backward event first recomputes whatever the stage did not store.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTiming {
    pub fwd_time: f64,
    pub bwd_time: f64,
    /// Charged at the start of every backward of this stage.
    pub recompute_time: f64,
}

impl StageTiming {
    pub fn new(fwd_time: f64, bwd_time: f64, recompute_time: f64) -> Self {
        Self {
            fwd_time,
            bwd_time,
            recompute_time,
        }
    }

    /// Forward plus backward (including recompute) of one microbatch.
    pub fn steady_time(&self) -> f64 {
        self.fwd_time + self.bwd_time + self.recompute_time
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    WarmupFwd,
    SteadyFwd,
    SteadyBwd,
    EndingBwd,
}

impl Phase {
    pub fn is_forward(self) -> bool {
        matches!(self, Phase::WarmupFwd | Phase::SteadyFwd)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineEvent {
    pub stage: usize,
    pub microbatch: u64,
    pub phase: Phase,
    pub start: f64,
    pub end: f64,
    /// Leading part of a backward event spent recomputing.
    pub recompute: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTimeline {
    pub stages: usize,
    pub microbatches: u64,
    /// Per-stage events in execution order.
    pub events: Vec<Vec<PipelineEvent>>,
    pub iteration_time: f64,
    pub peak_live: Vec<u64>,
}

/// Microbatches whose activations stage `s` of `p` holds at its peak.
pub fn peak_live_microbatches(p: usize, s: usize) -> Result<u64> {
    if s >= p {
        return Err(Error::InvalidArgument(format!(
            "stage {s} out of range for {p} stages"
        )));
    }
    Ok((p - s) as u64)
}

/// Execution order of stage `s`: `(microbatch, phase)` pairs.
pub fn stage_sequence(p: usize, n: u64, s: usize) -> Vec<(u64, Phase)> {
    let warm = ((p - s) as u64).min(n);
    let mut seq = Vec::with_capacity(2 * n as usize);
    for b in 0..warm {
        seq.push((b, Phase::WarmupFwd));
    }
    let mut next_f = warm;
    let mut next_b = 0;
    while next_f < n {
        seq.push((next_b, Phase::SteadyBwd));
        next_b += 1;
        seq.push((next_f, Phase::SteadyFwd));
        next_f += 1;
    }
    while next_b < n {
        seq.push((next_b, Phase::EndingBwd));
        next_b += 1;
    }
    seq
}

fn check_inputs(p: usize, n: u64, timings: &[StageTiming], transfer: &[f64]) -> Result<()> {
    if p == 0 {
        return Err(Error::InvalidArgument("pipeline needs at least one stage".into()));
    }
    if n < p as u64 {
        return Err(Error::ScheduleInfeasible(format!(
            "{n} microbatches cannot fill {p} pipeline stages"
        )));
    }
    if timings.len() != p {
        return Err(Error::InvalidArgument(format!(
            "expected {p} stage timings, got {}",
            timings.len()
        )));
    }
    if transfer.len() + 1 < p {
        return Err(Error::InvalidArgument(format!(
            "expected {} boundary transfers, got {}",
            p - 1,
            transfer.len()
        )));
    }
    for t in timings {
        if !(t.fwd_time >= 0.0 && t.bwd_time >= 0.0 && t.recompute_time >= 0.0) {
            return Err(Error::InvalidArgument(format!("negative stage timing {t:?}")));
        }
    }
    Ok(())
}

/// Discrete-event simulation of one training iteration.
pub fn schedule_1f1b(
    p: usize,
    n: u64,
    timings: &[StageTiming],
    transfer: &[f64],
) -> Result<PipelineTimeline> {
    check_inputs(p, n, timings, transfer)?;
    let seqs: Vec<_> = (0..p).map(|s| stage_sequence(p, n, s)).collect();
    let nu = n as usize;
    let mut fwd_end = vec![vec![f64::NAN; nu]; p];
    let mut bwd_end = vec![vec![f64::NAN; nu]; p];
    let mut cursor = vec![0usize; p];
    let mut clock = vec![0.0f64; p];
    let mut events: Vec<Vec<PipelineEvent>> = (0..p).map(|_| Vec::with_capacity(2 * nu)).collect();

    let total = 2 * nu * p;
    let mut done = 0;
    while done < total {
        let mut progressed = false;
        for s in 0..p {
            while let Some(&(b, phase)) = seqs[s].get(cursor[s]) {
                let bi = b as usize;
                let ready = if phase.is_forward() {
                    if s == 0 {
                        Some(0.0)
                    } else {
                        let e = fwd_end[s - 1][bi];
                        (!e.is_nan()).then(|| e + transfer[s - 1])
                    }
                } else if s + 1 == p {
                    Some(fwd_end[s][bi])
                } else {
                    let e = bwd_end[s + 1][bi];
                    (!e.is_nan()).then(|| e + transfer[s])
                };
                let Some(ready) = ready else { break };
                let start = clock[s].max(ready);
                let t = &timings[s];
                let (dur, recompute) = if phase.is_forward() {
                    (t.fwd_time, 0.0)
                } else {
                    (t.recompute_time + t.bwd_time, t.recompute_time)
                };
                let end = start + dur;
                if phase.is_forward() {
                    fwd_end[s][bi] = end;
                } else {
                    bwd_end[s][bi] = end;
                }
                clock[s] = end;
                events[s].push(PipelineEvent {
                    stage: s,
                    microbatch: b,
                    phase,
                    start,
                    end,
                    recompute,
                });
                cursor[s] += 1;
                done += 1;
                progressed = true;
            }
        }
        if !progressed {
            return Err(Error::ScheduleInfeasible("1F1B dependency deadlock".into()));
        }
    }

    let iteration_time = clock.iter().copied().fold(0.0, f64::max);
    let peak_live = events.iter().map(|ev| replay_live_high_water(ev)).collect();
    Ok(PipelineTimeline {
        stages: p,
        microbatches: n,
        events,
        iteration_time,
        peak_live,
    })
}

/// Maximum number of microbatches with a forward done and backward pending,
/// replayed from a stage's event list.
pub fn replay_live_high_water(events: &[PipelineEvent]) -> u64 {
    let mut live = 0u64;
    let mut peak = 0u64;
    for e in events {
        if e.phase.is_forward() {
            live += 1;
            peak = peak.max(live);
        } else {
            live = live.saturating_sub(1);
        }
    }
    peak
}

/// Peak DRAM footprint of a stage: model state plus, per live microbatch,
/// the stored checkpoints and the stage-input activation.
pub fn stage_memory_peak(
    model_state_bytes: u64,
    stored_checkpoint_bytes_per_microbatch: u64,
    boundary_bytes_per_microbatch: u64,
    p: usize,
    s: usize,
) -> Result<u64> {
    let live = peak_live_microbatches(p, s)?;
    Ok(model_state_bytes
        + (stored_checkpoint_bytes_per_microbatch + boundary_bytes_per_microbatch) * live)
}

impl PipelineTimeline {
    /// Chrome `about:tracing` / Perfetto event list; times in microseconds.
    pub fn to_chrome_trace(&self) -> serde_json::Value {
        let mut trace = Vec::new();
        for (s, evs) in self.events.iter().enumerate() {
            trace.push(json!({
                "name": "thread_name", "ph": "M", "pid": 0, "tid": s,
                "args": { "name": format!("stage {s}") }
            }));
            for e in evs {
                let label = if e.phase.is_forward() { "F" } else { "B" };
                trace.push(json!({
                    "name": format!("{label}{}", e.microbatch),
                    "cat": serde_json::to_value(e.phase).unwrap_or_default(),
                    "ph": "X",
                    "pid": 0,
                    "tid": s,
                    "ts": e.start * 1e6,
                    "dur": (e.end - e.start) * 1e6,
                    "args": { "microbatch": e.microbatch, "recompute_us": e.recompute * 1e6 }
                }));
            }
        }
        json!({ "traceEvents": trace, "displayTimeUnit": "ms" })
    }

    pub fn busy_time(&self, s: usize) -> f64 {
        self.events[s].iter().map(|e| e.end - e.start).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed-point relaxation over the precedence graph: every event starts
    /// at the max of its in-stage predecessor and cross-stage dependency.
    fn relaxation_oracle(p: usize, n: u64, t: &[StageTiming], x: &[f64]) -> f64 {
        let seqs: Vec<_> = (0..p).map(|s| stage_sequence(p, n, s)).collect();
        let nu = n as usize;
        let mut fe = vec![vec![0.0; nu]; p];
        let mut be = vec![vec![0.0; nu]; p];
        loop {
            let mut changed = false;
            for s in 0..p {
                let mut prev = 0.0f64;
                for &(b, ph) in &seqs[s] {
                    let b = b as usize;
                    let dep = if ph.is_forward() {
                        if s == 0 { 0.0 } else { fe[s - 1][b] + x[s - 1] }
                    } else if s + 1 == p {
                        fe[s][b]
                    } else {
                        be[s + 1][b] + x[s]
                    };
                    let start = prev.max(dep);
                    let end = if ph.is_forward() {
                        start + t[s].fwd_time
                    } else {
                        start + t[s].bwd_time + t[s].recompute_time
                    };
                    let slot = if ph.is_forward() { &mut fe[s][b] } else { &mut be[s][b] };
                    if (*slot - end).abs() > 1e-12 {
                        *slot = end;
                        changed = true;
                    }
                    prev = end;
                }
            }
            if !changed {
                break;
            }
        }
        (0..p).map(|s| be[s][nu - 1]).fold(0.0, f64::max)
    }

    fn uniform(p: usize, f: f64, b: f64) -> Vec<StageTiming> {
        vec![StageTiming::new(f, b, 0.0); p]
    }

    #[test]
    fn three_stage_five_microbatch_phases() {
        let seq = stage_sequence(3, 5, 0);
        let count = |ph| seq.iter().filter(|(_, x)| *x == ph).count();
        assert_eq!(count(Phase::WarmupFwd), 3);
        assert_eq!(count(Phase::SteadyFwd), 2);
        assert_eq!(count(Phase::SteadyBwd), 2);
        assert_eq!(count(Phase::EndingBwd), 3);
        let tl = schedule_1f1b(3, 5, &uniform(3, 1.0, 2.0), &[0.0, 0.0]).unwrap();
        assert_eq!(tl.peak_live[0], 3);
        assert_eq!(peak_live_microbatches(3, 0).unwrap(), 3);
    }

    #[test]
    fn single_stage_has_no_bubble() {
        let tl = schedule_1f1b(1, 4, &uniform(1, 1.0, 2.0), &[]).unwrap();
        assert_eq!(tl.iteration_time, 12.0);
        assert_eq!(tl.busy_time(0), tl.iteration_time);
    }

    #[test]
    fn two_by_two_takes_six() {
        let tl = schedule_1f1b(2, 2, &uniform(2, 1.0, 1.0), &[0.0]).unwrap();
        assert_eq!(tl.iteration_time, 6.0);
    }

    #[test]
    fn rejects_short_batches() {
        assert!(matches!(
            schedule_1f1b(4, 3, &uniform(4, 1.0, 1.0), &[0.0; 3]),
            Err(Error::ScheduleInfeasible(_))
        ));
    }

    #[test]
    fn peak_live_examples() {
        assert_eq!(peak_live_microbatches(5, 4).unwrap(), 1);
        assert_eq!(peak_live_microbatches(8, 3).unwrap(), 5);
        assert!(peak_live_microbatches(3, 3).is_err());
    }

    #[test]
    fn memory_peak_modes() {
        let all = stage_memory_peak(100, 30, 2, 3, 0).unwrap();
        let last = stage_memory_peak(100, 30, 2, 3, 2).unwrap();
        assert_eq!(all - 100, 3 * (last - 100));
        assert_eq!(stage_memory_peak(100, 0, 2, 3, 0).unwrap(), 106);
    }

    #[test]
    fn chrome_trace_has_every_event() {
        let tl = schedule_1f1b(2, 3, &uniform(2, 1.0, 2.0), &[0.1]).unwrap();
        let v = tl.to_chrome_trace();
        let xs = v["traceEvents"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|e| e["ph"] == "X")
            .count();
        assert_eq!(xs, 12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn instance() -> impl Strategy<Value = (usize, u64, Vec<StageTiming>, Vec<f64>)> {
            (1usize..6).prop_flat_map(|p| {
                (
                    Just(p),
                    (p as u64)..(p as u64 + 8),
                    prop::collection::vec(
                        (0.1f64..3.0, 0.1f64..5.0, 0.0f64..2.0)
                            .prop_map(|(f, b, r)| StageTiming::new(f, b, r)),
                        p,
                    ),
                    prop::collection::vec(0.0f64..0.5, p.saturating_sub(1)),
                )
            })
        }

        proptest! {
            #[test]
            fn matches_relaxation_oracle((p, n, t, x) in instance()) {
                let tl = schedule_1f1b(p, n, &t, &x).unwrap();
                let oracle = relaxation_oracle(p, n, &t, &x);
                prop_assert!((tl.iteration_time - oracle).abs() <= 1e-9 * oracle.max(1.0));
            }

            #[test]
            fn counts_and_dependencies((p, n, t, x) in instance()) {
                let tl = schedule_1f1b(p, n, &t, &x).unwrap();
                for s in 0..p {
                    let ev = &tl.events[s];
                    prop_assert_eq!(ev.iter().filter(|e| e.phase.is_forward()).count() as u64, n);
                    prop_assert_eq!(ev.iter().filter(|e| !e.phase.is_forward()).count() as u64, n);
                    for w in ev.windows(2) {
                        prop_assert!(w[1].start >= w[0].end - 1e-12);
                    }
                    prop_assert_eq!(tl.peak_live[s], peak_live_microbatches(p, s).unwrap());
                }
                let find = |s: usize, b: u64, fwd: bool| {
                    *tl.events[s].iter().find(|e| e.microbatch == b && e.phase.is_forward() == fwd).unwrap()
                };
                for s in 1..p {
                    for b in 0..n {
                        prop_assert!(find(s, b, true).start >= find(s - 1, b, true).end + x[s - 1] - 1e-12);
                        prop_assert!(find(s - 1, b, false).start >= find(s, b, false).end + x[s - 1] - 1e-12);
                    }
                }
            }

            #[test]
            fn uniform_closed_form(p in 1usize..6, extra in 0u64..6, f in 0.5f64..2.0, b in 0.5f64..2.0) {
                let n = p as u64 + extra;
                let tl = schedule_1f1b(p, n, &uniform(p, f, b), &vec![0.0; p.saturating_sub(1)]).unwrap();
                let expect = (n as f64 + p as f64 - 1.0) * (f + b);
                prop_assert!((tl.iteration_time - expect).abs() < 1e-9 * expect);
            }
        }
    }
}
