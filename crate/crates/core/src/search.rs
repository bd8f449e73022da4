//! Parallelism search with early pruning, and the genetic optimizer over
//! recomputation, placement and offload pairs.
//!
//! [`search_parallelism`] walks every `tp·pp = mp ≤ MP`. Candidates whose
//! model state alone overflows a die are pruned; candidates whose
//! checkpoints overflow are delegated to recomputation and offloading.
//! Every TP split of a surviving candidate is evaluated on a serpentine
//! layout, the best split gets the full greedy plan, and the top few
//! candidates are refined by [`ga_optimize`].

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost_model::PerfTable;
use crate::dram_alloc::{Allocation, AllocationSet};
use crate::engines::{
    self, analytic_baseline, BaselineCost, EngineParams, EvaluationReport, Prepared, TpSplit,
};
use crate::gcmr::{self, RecompConfig, StageInput};
use crate::placement::{self, MeshGrid, PlacementMap};
use crate::workload::model_state_bytes;
use crate::{Error, Result, TrainingWorkload, WaferConfig};

/// Offset keeping fitness finite when there is no traffic at all.
const FITNESS_EPS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaParams {
    pub population: usize,
    pub steps: usize,
    /// Share of survivors kept by rank; the rest win binary tournaments.
    pub omega: f64,
    /// Application probability of Op1..Op5 once drawn.
    pub op_probs: [f64; 5],
    pub seed: u64,
    /// Also seed the population with randomized genomes.
    pub random_restarts: bool,
    pub max_retries: usize,
}

impl Default for GaParams {
    fn default() -> Self {
        Self {
            population: 32,
            steps: 100,
            omega: 0.25,
            op_probs: [1.0; 5],
            seed: 0,
            random_restarts: false,
            max_retries: 8,
        }
    }
}

impl GaParams {
    pub fn validate(&self) -> Result<()> {
        if self.population == 0 {
            return Err(Error::InvalidArgument("population must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::InvalidArgument(format!("omega {} outside [0, 1]", self.omega)));
        }
        if self.op_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("operator probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Genome {
    pub masks: Vec<u32>,
    pub placement: PlacementMap,
    pub allocation: AllocationSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub genome: Genome,
    pub t_max: f64,
    pub global_cost: f64,
    pub fitness: f64,
}

/// Everything the operators and the fitness need for one strategy.
pub struct GaContext<'a> {
    pub prep: &'a Prepared,
    pub inputs: Vec<StageInput>,
    pub comm_pp: Vec<f64>,
    /// Attempts per operator before it falls back to identity.
    pub retries: usize,
    t0: f64,
    gc0: f64,
}

impl<'a> GaContext<'a> {
    /// Normalizes fitness by `seed`'s `t_max` and global cost.
    pub fn new(prep: &'a Prepared, seed: &Genome) -> Result<Self> {
        let mut ctx = Self {
            prep,
            inputs: prep.stage_inputs()?,
            comm_pp: prep.comm_pp(),
            retries: GaParams::default().max_retries,
            t0: 1.0,
            gc0: 0.0,
        };
        let (t, gc) = ctx.raw_score(seed)?;
        ctx.t0 = t;
        ctx.gc0 = gc;
        Ok(ctx)
    }

    pub fn recomp(&self, masks: &[u32]) -> RecompConfig {
        RecompConfig::from_masks(&self.inputs, masks, self.prep.capacity, self.prep.params.quantum)
    }

    pub fn memory(&self, masks: &[u32]) -> Vec<u64> {
        self.inputs
            .iter()
            .zip(masks)
            .map(|(st, &m)| st.fixed_bytes + gcmr::subset_bytes(&st.profile.items, m))
            .collect()
    }

    /// `(t_max, GlobalCost)` of a genome.
    pub fn raw_score(&self, g: &Genome) -> Result<(f64, f64)> {
        let recomp = self.recomp(&g.masks);
        let sched = engines::stage_schedule(self.prep, &recomp, &g.placement, &g.allocation)?;
        let gc = placement::global_cost(&g.placement, &self.comm_pp, &g.allocation.pair_loads())?;
        Ok((sched.t_max, gc.total))
    }

    pub fn fitness_of(&self, t_max: f64, gc: f64) -> f64 {
        (t_max / self.t0) * ((gc + FITNESS_EPS) / (self.gc0 + FITNESS_EPS))
    }

    pub fn score(&self, g: Genome) -> Result<Scored> {
        let (t, gc) = self.raw_score(&g)?;
        Ok(Scored {
            fitness: self.fitness_of(t, gc),
            t_max: t,
            global_cost: gc,
            genome: g,
        })
    }

    /// Every die fits its DRAM and each sender offloads exactly its
    /// overflow to non-senders.
    pub fn is_feasible(&self, g: &Genome) -> bool {
        let c = self.prep.capacity;
        let pp = self.prep.pp;
        if g.masks.len() != pp || g.placement.stages() != pp {
            return false;
        }
        let n_ops = self.prep.layer.op_fwd.len() as u32;
        if g.masks.iter().any(|&m| n_ops < 32 && m >> n_ops != 0) {
            return false;
        }
        let mem = self.memory(&g.masks);
        if mem.iter().zip(&self.inputs).any(|(_, st)| st.fixed_bytes > c) {
            return false;
        }
        for a in &g.allocation.allocations {
            if a.sender >= pp || a.helper >= pp || a.sender == a.helper || mem[a.helper] > c {
                return false;
            }
        }
        (0..pp).all(|s| g.allocation.sent_by(s) == mem[s].saturating_sub(c))
            && g.allocation.resident(&mem).iter().all(|&r| r <= c)
    }

    /// Re-runs allocation after the store masks changed.
    fn repair(&self, masks: Vec<u32>, placement: PlacementMap) -> Option<Genome> {
        let mem = self.memory(&masks);
        if mem.iter().zip(&self.inputs).any(|(_, st)| st.fixed_bytes > self.prep.capacity) {
            return None;
        }
        let allocation = engines::allocate_for(self.prep, &mem, &placement).ok()?;
        let g = Genome {
            masks,
            placement,
            allocation,
        };
        self.is_feasible(&g).then_some(g)
    }

    fn n_ops(&self) -> usize {
        self.prep.layer.op_fwd.len()
    }

    fn with_retries<T>(&self, rng: &mut ChaCha8Rng, mut f: impl FnMut(&mut ChaCha8Rng) -> Option<T>) -> Option<T> {
        (0..self.retries.max(1)).find_map(|_| f(rng))
    }

    /// Op1: flip the store decision of one operator on one stage.
    pub fn op1_recomp_mutate(&self, g: &Genome, rng: &mut ChaCha8Rng) -> Option<Genome> {
        let n = self.n_ops();
        self.with_retries(rng, |rng| {
            let s = rng.gen_range(0..self.prep.pp);
            let i = rng.gen_range(0..n);
            let mut masks = g.masks.clone();
            masks[s] ^= 1 << i;
            self.repair(masks, g.placement.clone())
        })
    }

    /// Op2: exchange one stage's store decisions past a cut operator.
    pub fn op2_recomp_crossover(
        &self,
        a: &Genome,
        b: &Genome,
        rng: &mut ChaCha8Rng,
    ) -> (Option<Genome>, Option<Genome>) {
        let n = self.n_ops();
        let s = rng.gen_range(0..self.prep.pp);
        let cut = rng.gen_range(0..n);
        let high: u32 = !((1u32 << cut) - 1) & ((1u32 << n) - 1);
        let mix = |x: u32, y: u32| (x & !high) | (y & high);
        let mut ma = a.masks.clone();
        let mut mb = b.masks.clone();
        ma[s] = mix(a.masks[s], b.masks[s]);
        mb[s] = mix(b.masks[s], a.masks[s]);
        (
            self.repair(ma, a.placement.clone()),
            self.repair(mb, b.placement.clone()),
        )
    }

    /// Op3: swap the regions of two stages.
    pub fn op3_placement_swap(&self, g: &Genome, rng: &mut ChaCha8Rng) -> Option<Genome> {
        let pp = self.prep.pp;
        if pp < 2 {
            return None;
        }
        let i = rng.gen_range(0..pp);
        let j = (i + rng.gen_range(1..pp)) % pp;
        let mut out = g.clone();
        out.placement.blocks.swap(i, j);
        Some(out)
    }

    /// Op4: move part of one offload pair to another helper with room.
    pub fn op4_mempair_mutate(&self, g: &Genome, rng: &mut ChaCha8Rng) -> Option<Genome> {
        if g.allocation.allocations.is_empty() {
            return None;
        }
        let c = self.prep.capacity;
        let mem = self.memory(&g.masks);
        let resident = g.allocation.resident(&mem);
        self.with_retries(rng, |rng| {
            let k = rng.gen_range(0..g.allocation.allocations.len());
            let a = g.allocation.allocations[k];
            let helpers: Vec<usize> = (0..self.prep.pp)
                .filter(|&h| h != a.sender && h != a.helper && mem[h] <= c && resident[h] < c)
                .collect();
            if helpers.is_empty() {
                return None;
            }
            let h = helpers[rng.gen_range(0..helpers.len())];
            let room = c - resident[h];
            let moved = if rng.gen_bool(0.5) {
                a.bytes.min(room)
            } else {
                rng.gen_range(1..=a.bytes.min(room))
            };
            let mut allocs = g.allocation.allocations.clone();
            allocs[k].bytes -= moved;
            add_allocation(&mut allocs, a.sender, h, moved);
            allocs.retain(|x| x.bytes > 0);
            let out = Genome {
                masks: g.masks.clone(),
                placement: g.placement.clone(),
                allocation: self.rebuild(allocs, &mem),
            };
            self.is_feasible(&out).then_some(out)
        })
    }

    /// Op5: two senders trade helpers.
    pub fn op5_mempair_crossover(&self, g: &Genome, rng: &mut ChaCha8Rng) -> Option<Genome> {
        let mut senders: Vec<usize> = g.allocation.allocations.iter().map(|a| a.sender).collect();
        senders.sort_unstable();
        senders.dedup();
        if senders.len() < 2 {
            return None;
        }
        let i = rng.gen_range(0..senders.len());
        let j = (i + rng.gen_range(1..senders.len())) % senders.len();
        let (s1, s2) = (senders[i], senders[j]);
        let c = self.prep.capacity;
        let mem = self.memory(&g.masks);
        let keep: Vec<Allocation> = g
            .allocation
            .allocations
            .iter()
            .filter(|a| a.sender != s1 && a.sender != s2)
            .copied()
            .collect();
        let helpers_of = |s: usize| -> Vec<usize> {
            g.allocation.allocations.iter().filter(|a| a.sender == s).map(|a| a.helper).collect()
        };
        let mut resident = mem.clone();
        for a in &keep {
            resident[a.sender] -= a.bytes;
            resident[a.helper] += a.bytes;
        }
        let mut allocs = keep;
        for (s, prefer) in [(s1, helpers_of(s2)), (s2, helpers_of(s1))] {
            let mut need = mem[s] - c;
            let fallback = (0..self.prep.pp).filter(|&h| mem[h] <= c);
            for h in prefer.into_iter().chain(fallback) {
                if need == 0 {
                    break;
                }
                if h == s || mem[h] > c || resident[h] >= c {
                    continue;
                }
                let take = need.min(c - resident[h]);
                resident[h] += take;
                need -= take;
                add_allocation(&mut allocs, s, h, take);
            }
            if need > 0 {
                return None;
            }
        }
        let out = Genome {
            masks: g.masks.clone(),
            placement: g.placement.clone(),
            allocation: self.rebuild(allocs, &mem),
        };
        self.is_feasible(&out).then_some(out)
    }

    fn rebuild(&self, mut allocations: Vec<Allocation>, mem: &[u64]) -> AllocationSet {
        allocations.sort_by_key(|a| (a.sender, a.helper));
        let c = self.prep.capacity;
        let mut set = AllocationSet {
            allocations,
            residual: Vec::new(),
            trace: Vec::new(),
        };
        let resident = set.resident(mem);
        set.residual = (0..mem.len())
            .filter(|&h| mem[h] <= c)
            .map(|h| (h, c.saturating_sub(resident[h])))
            .collect();
        set
    }

    /// Randomized feasible genome for restarts.
    fn random_genome(&self, seed: &Genome, rng: &mut ChaCha8Rng) -> Option<Genome> {
        let n = self.n_ops() as u32;
        let masks: Vec<u32> = (0..self.prep.pp).map(|_| rng.gen_range(0..(1u32 << n))).collect();
        let mut pm = seed.placement.clone();
        for _ in 0..self.prep.pp {
            let i = rng.gen_range(0..self.prep.pp);
            let j = rng.gen_range(0..self.prep.pp);
            pm.blocks.swap(i, j);
        }
        self.repair(masks, pm)
    }

    /// Draws one operator and applies it with its probability.
    fn vary(
        &self,
        params: &GaParams,
        a: &Genome,
        b: &Genome,
        rng: &mut ChaCha8Rng,
    ) -> Genome {
        let op = rng.gen_range(0..5);
        if !rng.gen_bool(params.op_probs[op]) {
            return a.clone();
        }
        let out = match op {
            0 => self.op1_recomp_mutate(a, rng),
            1 => self.op2_recomp_crossover(a, b, rng).0,
            2 => self.op3_placement_swap(a, rng),
            3 => self.op4_mempair_mutate(a, rng),
            _ => self.op5_mempair_crossover(a, rng),
        };
        out.unwrap_or_else(|| a.clone())
    }
}

fn add_allocation(allocs: &mut Vec<Allocation>, sender: usize, helper: usize, bytes: u64) {
    if bytes == 0 {
        return;
    }
    if let Some(x) = allocs.iter_mut().find(|x| x.sender == sender && x.helper == helper) {
        x.bytes += bytes;
    } else {
        allocs.push(Allocation { sender, helper, bytes });
    }
}

/// Stream `(step, slot)` of the master seed.
fn stream_rng(seed: u64, step: usize, slot: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(((step as u64) << 32) | slot as u64);
    r
}

fn tournament<'p>(pop: &'p [Scored], rng: &mut ChaCha8Rng) -> &'p Scored {
    let i = rng.gen_range(0..pop.len());
    let j = rng.gen_range(0..pop.len());
    if pop[j].fitness < pop[i].fitness || (pop[j].fitness == pop[i].fitness && j < i) {
        &pop[j]
    } else {
        &pop[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaResult {
    pub best: Scored,
    pub seed_t_max: f64,
    pub seed_global_cost: f64,
    /// Best-ever fitness after initialization and after every step.
    pub trace: Vec<f64>,
    pub evaluations: usize,
}

/// Evolves a population grown from `seed`. Never returns anything worse
/// than the seed.
pub fn ga_optimize(prep: &Prepared, seed: Genome, params: &GaParams) -> Result<GaResult> {
    params.validate()?;
    let mut ctx = GaContext::new(prep, &seed)?;
    ctx.retries = params.max_retries;
    if !ctx.is_feasible(&seed) {
        return Err(Error::InvalidArgument("seed genome is infeasible".into()));
    }
    let seed_scored = ctx.score(seed.clone())?;
    let pop_n = params.population;
    let init: Vec<Scored> = (1..pop_n)
        .into_par_iter()
        .map(|slot| {
            let mut rng = stream_rng(params.seed, 0, slot);
            let g = if params.random_restarts && slot % 2 == 1 {
                ctx.random_genome(&seed, &mut rng).unwrap_or_else(|| seed.clone())
            } else {
                ctx.vary(params, &seed, &seed, &mut rng)
            };
            ctx.score(g)
        })
        .collect::<Result<_>>()?;
    let mut pop = Vec::with_capacity(pop_n);
    pop.push(seed_scored.clone());
    pop.extend(init);
    let mut evaluations = pop_n;
    let mut best = best_of(&pop).clone();
    if seed_scored.fitness <= best.fitness {
        best = seed_scored.clone();
    }
    let mut trace = vec![best.fitness];
    let elites = (params.omega * pop_n as f64).ceil() as usize;
    for step in 1..=params.steps {
        let offspring: Vec<Scored> = (0..pop_n)
            .into_par_iter()
            .map(|slot| {
                let mut rng = stream_rng(params.seed, step, slot);
                let a = tournament(&pop, &mut rng);
                let b = tournament(&pop, &mut rng);
                ctx.score(ctx.vary(params, &a.genome, &b.genome, &mut rng))
            })
            .collect::<Result<_>>()?;
        evaluations += offspring.len();
        let mut pool = std::mem::take(&mut pop);
        pool.extend(offspring);
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.sort_by(|&i, &j| pool[i].fitness.total_cmp(&pool[j].fitness).then(i.cmp(&j)));
        let cand = &pool[order[0]];
        if cand.fitness < best.fitness {
            best = cand.clone();
        }
        let mut rng = stream_rng(params.seed, step, pop_n);
        let mut next: Vec<Scored> = order.iter().take(elites.min(pop_n)).map(|&i| pool[i].clone()).collect();
        while next.len() < pop_n {
            next.push(tournament(&pool, &mut rng).clone());
        }
        pop = next;
        trace.push(best.fitness);
    }
    Ok(GaResult {
        best,
        seed_t_max: ctx.t0,
        seed_global_cost: ctx.gc0,
        trace,
        evaluations,
    })
}

fn best_of(pop: &[Scored]) -> &Scored {
    let mut b = &pop[0];
    for s in &pop[1..] {
        if s.fitness < b.fitness {
            b = s;
        }
    }
    b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Disposition {
    /// Model state alone exceeds a die.
    Pruned,
    /// Every split failed scheduling, memory or placement.
    Infeasible,
    /// Checkpoints overflow; recomputation and offloading made it fit.
    Delegated,
    Ok,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GaStatus {
    NotRun,
    SkippedFast,
    Ran,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub mp: u64,
    pub tp: u64,
    pub pp: usize,
    pub disposition: Disposition,
    pub needs_recompute: bool,
    pub splits_tried: usize,
    pub split: Option<TpSplit>,
    pub throughput: Option<f64>,
    pub iteration_time: Option<f64>,
    pub t_max: Option<f64>,
    pub global_cost: Option<f64>,
    pub ga: GaStatus,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub tp: u64,
    pub pp: usize,
    pub split: TpSplit,
    pub recomp: RecompConfig,
    pub placement: PlacementMap,
    pub allocation: AllocationSet,
    pub report: EvaluationReport,
    pub t_max: f64,
    pub global_cost: f64,
    pub ga_trace: Vec<f64>,
    pub baseline: BaselineCost,
}

impl Plan {
    /// Raw `t_max × GlobalCost` of the plan: lower is better.
    pub fn score(&self) -> f64 {
        self.t_max * self.global_cost.max(FITNESS_EPS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchOptions {
    /// Die budget `MP`; defaults to the whole wafer.
    pub max_dies: Option<u32>,
    pub ga: GaParams,
    /// Skip the genetic refinement.
    pub fast: bool,
    /// Candidates refined by the GA.
    pub top_k: usize,
    pub engine: EngineParams,
    pub eta: f64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            max_dies: None,
            ga: GaParams::default(),
            fast: false,
            top_k: 3,
            engine: EngineParams::default(),
            eta: engines::DEFAULT_ETA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub wafer: String,
    pub max_dies: u32,
    pub model_pruned: bool,
    pub ledger: Vec<CandidateRecord>,
    pub best: Option<Plan>,
    /// Lowest analytic baseline over unpruned candidates.
    pub baseline: Option<BaselineCost>,
}

/// `(tp, pp)` pairs with `tp·pp = mp` for every `mp ≤ max_dies`, `tp` one or
/// even, `pp` at most the layer count.
pub fn parallelism_candidates(max_dies: u32, layers: u32) -> Vec<(u64, u64, usize)> {
    let mut out = Vec::new();
    for mp in 1..=u64::from(max_dies) {
        for tp in (1..=mp).filter(|t| mp % t == 0 && (*t == 1 || t % 2 == 0)) {
            let pp = mp / tp;
            if pp <= u64::from(layers) {
                out.push((mp, tp, pp as usize));
            }
        }
    }
    out
}

pub fn model_pruned(wl: &TrainingWorkload, max_dies: u32, capacity: f64) -> bool {
    wl.model_p_bytes as f64 / f64::from(max_dies) > capacity
}

/// Per-candidate guard: the model state share overflows a die.
pub fn candidate_pruned(wl: &TrainingWorkload, tp: u64, pp: usize, capacity: u64) -> bool {
    model_state_bytes(&wl.model, tp, pp as u64) > capacity
}

/// Checkpoints of a store-everything schedule do not fit next to the state.
pub fn needs_recompute(wl: &TrainingWorkload, mp: u64, pp: usize, capacity: f64) -> bool {
    (wl.model_p_bytes + wl.pipeline_checkpoint_bytes(pp as u32)) as f64 / mp as f64 > capacity
}

/// Shapes any candidate of the search can look up.
pub fn required_shapes(
    wafer: &WaferConfig,
    wl: &TrainingWorkload,
    opts: &SearchOptions,
) -> Result<Vec<(crate::OpKind, crate::workload::OpShape)>> {
    let grid = MeshGrid::new(wafer.grid_x, wafer.grid_y);
    let max_dies = opts.max_dies.unwrap_or(wafer.num_dies()).min(wafer.num_dies());
    let cap = wafer.dram_capacity_per_die().floor() as u64;
    let mut tps: Vec<u64> = parallelism_candidates(max_dies, wl.model.num_layers)
        .into_iter()
        .filter(|&(_, tp, pp)| !candidate_pruned(wl, tp, pp, cap))
        .map(|(_, tp, _)| tp)
        .collect();
    tps.sort_unstable();
    tps.dedup();
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for tp in tps {
        for split in engines::enumerate_tp_splits(tp, wl, grid) {
            for sh in engines::required_shapes(wl, &split)? {
                if seen.insert(sh) {
                    out.push(sh);
                }
            }
        }
    }
    Ok(out)
}

struct Triage {
    prep: Prepared,
    report: EvaluationReport,
}

fn serpentine_eval(prep: Prepared) -> Result<Triage> {
    let inputs = prep.stage_inputs()?;
    let recomp = gcmr::gcmr_dp(&inputs, prep.capacity, prep.params.quantum)?;
    let pm = placement::serpentine_placement(prep.pp, prep.split.shape, prep.grid())?;
    let alloc = engines::allocate_for(&prep, &recomp.memory(), &pm)?;
    let (report, _) = engines::evaluate_iteration(&prep, &recomp, &pm, &alloc)?;
    Ok(Triage { prep, report })
}

fn full_plan(prep: &Prepared, seed: u64, ga: Option<&GaParams>, eta: f64) -> Result<Plan> {
    let greedy = engines::greedy_plan(prep, seed)?;
    let genome = Genome {
        masks: greedy.recomp.masks(),
        placement: greedy.placement,
        allocation: greedy.allocation,
    };
    let (genome, trace) = match ga {
        Some(p) => {
            let r = ga_optimize(prep, genome, p)?;
            (r.best.genome, r.trace)
        }
        None => (genome, Vec::new()),
    };
    let ctx_inputs = prep.stage_inputs()?;
    let recomp = RecompConfig::from_masks(&ctx_inputs, &genome.masks, prep.capacity, prep.params.quantum);
    let (report, _) = engines::evaluate_iteration(prep, &recomp, &genome.placement, &genome.allocation)?;
    let gc = placement::global_cost(&genome.placement, &prep.comm_pp(), &genome.allocation.pair_loads())?;
    Ok(Plan {
        tp: prep.tp,
        pp: prep.pp,
        split: prep.split,
        t_max: report.t_max,
        global_cost: gc.total,
        recomp,
        placement: genome.placement,
        allocation: genome.allocation,
        report,
        ga_trace: trace,
        baseline: analytic_baseline(&prep.wafer, &prep.workload, prep.tp, prep.pp, eta)?,
    })
}

/// Early-pruning search over `(tp, pp, split)` on one wafer.
pub fn search_parallelism(
    wafer: &WaferConfig,
    wl: &TrainingWorkload,
    table: &PerfTable,
    opts: &SearchOptions,
) -> Result<SearchOutcome> {
    opts.ga.validate()?;
    let max_dies = opts.max_dies.unwrap_or(wafer.num_dies());
    if max_dies == 0 {
        return Err(Error::InvalidArgument("die budget must be at least 1".into()));
    }
    let max_dies = max_dies.min(wafer.num_dies());
    let cap_f = wafer.dram_capacity_per_die();
    let cap = cap_f.floor() as u64;
    let mut out = SearchOutcome {
        wafer: wafer.name.clone(),
        max_dies,
        model_pruned: false,
        ledger: Vec::new(),
        best: None,
        baseline: None,
    };
    if model_pruned(wl, max_dies, cap_f) {
        out.model_pruned = true;
        return Ok(out);
    }
    let grid = MeshGrid::new(wafer.grid_x, wafer.grid_y);
    let cands = parallelism_candidates(max_dies, wl.model.num_layers);

    // Split triage on serpentine layouts, one task per candidate.
    let triaged: Vec<(CandidateRecord, Option<Triage>)> = cands
        .par_iter()
        .map(|&(mp, tp, pp)| {
            let mut rec = CandidateRecord {
                mp,
                tp,
                pp,
                disposition: Disposition::Ok,
                needs_recompute: needs_recompute(wl, mp, pp, cap_f),
                splits_tried: 0,
                split: None,
                throughput: None,
                iteration_time: None,
                t_max: None,
                global_cost: None,
                ga: GaStatus::NotRun,
                reason: None,
            };
            if candidate_pruned(wl, tp, pp, cap) {
                rec.disposition = Disposition::Pruned;
                rec.needs_recompute = true;
                rec.reason = Some("model state exceeds die capacity".into());
                return Ok((rec, None));
            }
            if (pp as u64) > wl.num_microbatches {
                rec.disposition = Disposition::Infeasible;
                rec.reason = Some(format!("{pp} stages but {} microbatches", wl.num_microbatches));
                return Ok((rec, None));
            }
            let mut best: Option<Triage> = None;
            let mut last_err = None;
            for split in engines::enumerate_tp_splits(tp, wl, grid) {
                rec.splits_tried += 1;
                let r = engines::prepare(wafer, wl, pp, split, table, &opts.engine).and_then(serpentine_eval);
                match r {
                    Ok(t) => {
                        if best.as_ref().is_none_or(|b| t.report.throughput > b.report.throughput) {
                            best = Some(t);
                        }
                    }
                    Err(e) if e.is_infeasibility() => last_err = Some(e),
                    Err(e) => return Err(e),
                }
            }
            match best {
                Some(t) => {
                    rec.disposition = if rec.needs_recompute {
                        Disposition::Delegated
                    } else {
                        Disposition::Ok
                    };
                    rec.split = Some(t.prep.split);
                    Ok((rec, Some(t)))
                }
                None => {
                    rec.disposition = Disposition::Infeasible;
                    rec.reason = Some(match last_err {
                        Some(e) => e.to_string(),
                        None => "no tensor split fits the grid".into(),
                    });
                    Ok((rec, None))
                }
            }
        })
        .collect::<Result<_>>()?;

    let (mut ledger, triages): (Vec<CandidateRecord>, Vec<Option<Triage>>) = triaged.into_iter().unzip();
    out.baseline = ledger
        .iter()
        .filter(|r| r.disposition != Disposition::Pruned)
        .map(|r| analytic_baseline(wafer, wl, r.tp, r.pp, opts.eta))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .min_by(|a, b| a.total.total_cmp(&b.total));

    // Greedy plans for survivors; GA on the best few.
    let mut ranked: Vec<usize> = (0..ledger.len()).filter(|&i| triages[i].is_some()).collect();
    let tput = |i: usize| triages[i].as_ref().map_or(0.0, |t| t.report.throughput);
    ranked.sort_by(|&a, &b| tput(b).total_cmp(&tput(a)).then(a.cmp(&b)));
    let ga_set: Vec<usize> = ranked.iter().take(opts.top_k).copied().collect();
    let plans: Vec<(usize, Result<Plan>)> = ranked
        .par_iter()
        .map(|&i| {
            let prep = &triages[i].as_ref().expect("triaged").prep;
            let ga = (!opts.fast && ga_set.contains(&i)).then_some(&opts.ga);
            (i, full_plan(prep, opts.ga.seed, ga, opts.eta))
        })
        .collect();
    let mut best: Option<(usize, Plan)> = None;
    for (i, plan) in plans {
        let rec = &mut ledger[i];
        rec.ga = match (opts.fast, ga_set.contains(&i)) {
            (true, _) => GaStatus::SkippedFast,
            (false, true) => GaStatus::Ran,
            (false, false) => GaStatus::NotRun,
        };
        match plan {
            Ok(p) => {
                rec.throughput = Some(p.report.throughput);
                rec.iteration_time = Some(p.report.iteration_time);
                rec.t_max = Some(p.t_max);
                rec.global_cost = Some(p.global_cost);
                let better = best.as_ref().is_none_or(|(bi, b)| {
                    p.report.throughput > b.report.throughput
                        || (p.report.throughput == b.report.throughput && i < *bi)
                });
                if better {
                    best = Some((i, p));
                }
            }
            Err(e) if e.is_infeasibility() => {
                rec.disposition = Disposition::Infeasible;
                rec.reason = Some(e.to_string());
            }
            Err(e) => return Err(e),
        }
    }
    out.best = best.map(|(_, p)| p);
    out.ledger = ledger;
    Ok(out)
}

/// Counts of each disposition, for summaries.
pub fn disposition_counts(ledger: &[CandidateRecord]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for r in ledger {
        let k = serde_json::to_value(r.disposition)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default();
        *m.entry(k).or_default() += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engines::{prepare, table_for};
    use crate::placement::TpShape;
    use crate::presets;
    use crate::workload::SplitFactors;
    use crate::ModelConfig;

    fn tiny(layers: u32) -> ModelConfig {
        ModelConfig {
            name: "tiny".into(),
            num_layers: layers,
            hidden_size: 512,
            num_heads: 8,
            seq_len: 256,
            vocab_size: 1000,
            param_count: None,
            num_experts: None,
        }
    }

    fn small_wafer(cols: u32, rows: u32, capacity: f64) -> WaferConfig {
        let mut w = presets::representative_config(3).unwrap();
        w.name = "toy".into();
        w.grid_x = cols;
        w.grid_y = rows;
        w.dram.capacity_bytes = capacity / f64::from(w.dram_chiplets_per_die);
        w
    }

    fn prep_for(w: &WaferConfig, wl: &TrainingWorkload, pp: usize, tp: u64) -> Prepared {
        let split = TpSplit {
            shape: TpShape::new(tp as u32, 1),
            factors: SplitFactors { b: 1, s: 1, h: tp, k: 1 },
        };
        let params = EngineParams {
            quantum: 1 << 20,
            ..EngineParams::default()
        };
        let table = table_for(w, wl, &[split], &params).unwrap();
        prepare(w, wl, pp, split, &table, &params).unwrap()
    }

    fn seed_genome(prep: &Prepared) -> Genome {
        let g = engines::greedy_plan(prep, 0).unwrap();
        Genome {
            masks: g.recomp.masks(),
            placement: g.placement,
            allocation: g.allocation,
        }
    }

    /// Four stages where the front ones must offload.
    fn offload_instance() -> Prepared {
        let wl = TrainingWorkload::new(tiny(8), 4, 8).unwrap();
        let w = small_wafer(4, 1, 1.0);
        let mut prep = prep_for(&w, &wl, 4, 1);
        let mem_all: Vec<u64> = prep
            .stages
            .iter()
            .map(|s| s.fixed_bytes + s.op_bytes.iter().sum::<u64>())
            .collect();
        let total: u64 = mem_all.iter().sum();
        prep.capacity = total / 4 + 1;
        prep
    }

    #[test]
    fn candidates_follow_even_rule() {
        let c = parallelism_candidates(8, 4);
        assert!(c.iter().all(|&(mp, tp, pp)| tp * pp as u64 == mp && (tp == 1 || tp % 2 == 0)));
        assert!(c.contains(&(6, 2, 3)));
        assert!(!c.iter().any(|&(_, tp, _)| tp == 3));
        assert!(!c.iter().any(|&(_, _, pp)| pp > 4));
    }

    #[test]
    fn gpt175b_on_config3_is_not_pruned() {
        let wl = TrainingWorkload::new(presets::model("gpt-175b").unwrap(), 1, 64).unwrap();
        let w = presets::representative_config(3).unwrap();
        assert!(!model_pruned(&wl, w.num_dies(), w.dram_capacity_per_die()));
        assert!(wl.model_p_bytes as f64 > 2.7e12 && (wl.model_p_bytes as f64) < 3.92e12);
    }

    #[test]
    fn oversize_model_is_pruned_at_the_top() {
        let wl = TrainingWorkload::new(presets::model("gpt-175b").unwrap(), 1, 64).unwrap();
        let w = small_wafer(2, 2, 70e9);
        let table = PerfTable::default();
        let out = search_parallelism(&w, &wl, &table, &SearchOptions::default()).unwrap();
        assert!(out.model_pruned);
        assert!(out.best.is_none());
    }

    #[test]
    fn delegated_candidate_fits_with_recompute() {
        let wl = TrainingWorkload::new(tiny(4), 8, 4).unwrap();
        let state = model_state_bytes(&wl.model, 1, 2);
        let ck = wl.pipeline_checkpoint_bytes(2);
        // Room for the state, boundaries and some but not all checkpoints.
        let cap = state as f64 + 8.0 * wl.boundary_bytes() as f64 + ck as f64 / 8.0;
        let w = small_wafer(2, 1, cap);
        let opts = SearchOptions {
            max_dies: Some(2),
            fast: true,
            engine: EngineParams {
                quantum: 1 << 16,
                ..EngineParams::default()
            },
            ..SearchOptions::default()
        };
        let shapes = required_shapes(&w, &wl, &opts).unwrap();
        let table = crate::cost_model::build_perf_table(&shapes, &[engines::cost_context(&w, &opts.engine)]);
        let out = search_parallelism(&w, &wl, &table, &opts).unwrap();
        let rec = out.ledger.iter().find(|r| r.tp == 1 && r.pp == 2).unwrap();
        assert_eq!(rec.disposition, Disposition::Delegated, "{rec:?}");
        assert_eq!(rec.ga, GaStatus::SkippedFast);
        let best = out.best.unwrap();
        assert!(best.recomp.stages.iter().any(|s| s.recompute_time > 0.0));
    }

    #[test]
    fn frozen_ga_returns_seed() {
        let prep = offload_instance();
        let seed = seed_genome(&prep);
        let params = GaParams {
            omega: 1.0,
            op_probs: [0.0; 5],
            steps: 5,
            population: 6,
            ..GaParams::default()
        };
        let r = ga_optimize(&prep, seed.clone(), &params).unwrap();
        assert_eq!(r.best.genome, seed);
        assert!(r.trace.iter().all(|&f| f == 1.0));
    }

    #[test]
    fn ga_trace_is_monotone_and_dominates_seed() {
        let prep = offload_instance();
        let seed = seed_genome(&prep);
        let params = GaParams {
            steps: 20,
            population: 12,
            seed: 7,
            ..GaParams::default()
        };
        let r = ga_optimize(&prep, seed, &params).unwrap();
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(r.best.fitness <= 1.0);
        let ctx = GaContext::new(&prep, &r.best.genome).unwrap();
        assert!(ctx.is_feasible(&r.best.genome));
    }

    #[test]
    fn ga_is_thread_count_independent() {
        let prep = offload_instance();
        let seed = seed_genome(&prep);
        let params = GaParams {
            steps: 10,
            population: 8,
            seed: 3,
            random_restarts: true,
            ..GaParams::default()
        };
        let run = |n| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .unwrap()
                .install(|| ga_optimize(&prep, seed.clone(), &params).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn op3_on_two_stages_transposes() {
        let wl = TrainingWorkload::new(tiny(2), 1, 2).unwrap();
        let w = small_wafer(2, 1, 64e9);
        let prep = prep_for(&w, &wl, 2, 1);
        let g = seed_genome(&prep);
        let ctx = GaContext::new(&prep, &g).unwrap();
        let mut rng = stream_rng(0, 0, 0);
        let out = ctx.op3_placement_swap(&g, &mut rng).unwrap();
        assert_eq!(out.placement.blocks, vec![g.placement.blocks[1], g.placement.blocks[0]]);
    }

    #[test]
    fn op1_respects_capacity() {
        let prep = offload_instance();
        let seed = seed_genome(&prep);
        let ctx = GaContext::new(&prep, &seed).unwrap();
        for k in 0..50 {
            let mut rng = stream_rng(k, 1, 1);
            if let Some(g) = ctx.op1_recomp_mutate(&seed, &mut rng) {
                assert!(ctx.is_feasible(&g));
                assert_ne!(g.masks, seed.masks);
            }
        }
    }

    #[test]
    fn op5_swaps_helpers_and_conserves() {
        let prep = offload_instance();
        let seed = seed_genome(&prep);
        let ctx = GaContext::new(&prep, &seed).unwrap();
        let mem = ctx.memory(&seed.masks);
        let mut changed = false;
        for k in 0..20 {
            let mut rng = stream_rng(k, 2, 2);
            let Some(g) = ctx.op4_mempair_mutate(&seed, &mut rng) else { continue };
            assert!(ctx.is_feasible(&g));
            let mut rng = stream_rng(k, 3, 3);
            if let Some(h) = ctx.op5_mempair_crossover(&g, &mut rng) {
                assert!(ctx.is_feasible(&h));
                for s in 0..prep.pp {
                    assert_eq!(h.allocation.sent_by(s), mem[s].saturating_sub(prep.capacity));
                }
                changed |= h.allocation != g.allocation;
            }
        }
        let senders = mem.iter().filter(|&&m| m > prep.capacity).count();
        if senders >= 2 {
            assert!(changed);
        }
    }

    #[test]
    fn reachability_on_two_stage_toy() {
        // Every store-mask/placement pair of a 2-stage toy is reachable from
        // the seed through operator applications.
        let wl = TrainingWorkload::new(tiny(2), 1, 2).unwrap();
        let w = small_wafer(2, 1, 64e9);
        let prep = prep_for(&w, &wl, 2, 1);
        let seed = seed_genome(&prep);
        let ctx = GaContext::new(&prep, &seed).unwrap();
        let n = ctx.n_ops() as u32;
        let mut seen = std::collections::HashSet::new();
        let key = |g: &Genome| (g.masks.clone(), g.placement.blocks.clone());
        let mut frontier = vec![seed.clone()];
        seen.insert(key(&seed));
        while let Some(g) = frontier.pop() {
            let mut next = Vec::new();
            for s in 0..2 {
                for i in 0..n {
                    let mut m = g.masks.clone();
                    m[s] ^= 1 << i;
                    if let Some(x) = ctx.repair(m, g.placement.clone()) {
                        next.push(x);
                    }
                }
            }
            let mut sw = g.clone();
            sw.placement.blocks.swap(0, 1);
            next.push(sw);
            for x in next {
                if seen.insert(key(&x)) {
                    frontier.push(x);
                }
            }
        }
        assert_eq!(seen.len(), (1usize << (2 * n)) * 2);
    }
}
