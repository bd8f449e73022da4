//! The workflows and the run report.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wsc_core::cost_model::{build_perf_table, Direction, PerfTable};
use wsc_core::engines::{self, Prepared};
use wsc_core::hw_model::enumerate_wafer_configs;
use wsc_core::pipeline::PipelineTimeline;
use wsc_core::placement::{self, MeshGrid};
use wsc_core::search::{self, Plan, SearchOutcome};
use wsc_core::{presets, OpKind, TrainingWorkload, WaferConfig};

use crate::error::{CliError, CliResult};
use crate::spec::{PlacementChoice, RunSpec};

pub const TOOL_NAME: &str = "wsc";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const PERF_CACHE_FILE: &str = "perf_table.json";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Enumerate,
    Evaluate,
    Search,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub tool: String,
    pub tool_version: String,
    pub command: Command,
    /// SHA-256 of the spec file as read.
    pub input_sha256: String,
    /// Effective spec after command-line overrides.
    pub spec: RunSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enumerate: Option<EnumerateResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluate: Option<EvaluateResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search: Option<SearchResult>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Schema(format!("report: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigSummary {
    pub config: WaferConfig,
    pub num_dies: u32,
    pub compute_flops_per_die: f64,
    pub wafer_compute_flops: f64,
    pub dram_capacity_per_die: f64,
    pub wafer_dram_capacity: f64,
    pub dram_bandwidth_per_die: f64,
    pub max_feasible_d2d_bandwidth: f64,
}

impl ConfigSummary {
    pub fn of(c: &WaferConfig) -> Self {
        Self {
            config: c.clone(),
            num_dies: c.num_dies(),
            compute_flops_per_die: c.die.compute_flops(),
            wafer_compute_flops: c.wafer_compute_flops(),
            dram_capacity_per_die: c.dram_capacity_per_die(),
            wafer_dram_capacity: c.wafer_dram_capacity(),
            dram_bandwidth_per_die: c.dram_bandwidth_per_die(),
            max_feasible_d2d_bandwidth: c.max_feasible_d2d_bandwidth(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnumerateResult {
    pub template_candidates: usize,
    pub configs: Vec<ConfigSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateResult {
    pub wafer: WaferConfig,
    pub plan: Plan,
    pub grid: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigResult {
    pub wafer: WaferConfig,
    /// 1-based rank by evaluated throughput; absent when nothing fits.
    pub rank: Option<usize>,
    /// 1-based rank by the analytic baseline.
    pub baseline_rank: Option<usize>,
    pub outcome: SearchOutcome,
    pub grid: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchResult {
    pub configs: Vec<ConfigResult>,
    pub best: Option<String>,
}

/// Side artifacts that accompany a report.
#[derive(Debug, Default)]
pub struct Artifacts {
    /// `(file name, contents)` written next to the report.
    pub files: Vec<(String, String)>,
}

pub struct Run {
    pub report: RunReport,
    pub artifacts: Artifacts,
    pub failure: Option<CliError>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn base_report(cmd: Command, spec: &RunSpec, input_sha256: &str) -> RunReport {
    RunReport {
        tool: TOOL_NAME.into(),
        tool_version: TOOL_VERSION.into(),
        command: cmd,
        input_sha256: input_sha256.into(),
        spec: spec.clone(),
        error: None,
        enumerate: None,
        evaluate: None,
        search: None,
    }
}

/// Wafer configurations named by the spec; template candidates that equal
/// a built-in configuration take its name.
pub fn wafers_for(spec: &RunSpec) -> CliResult<(Vec<WaferConfig>, usize)> {
    let mut out = spec.fixed_wafers()?;
    let mut template_candidates = 0;
    if let Some(r) = &spec.wafer.ranges {
        let t = spec.template(r)?;
        template_candidates = t.candidate_count();
        let builtin = presets::representative_configs();
        for mut c in enumerate_wafer_configs(&t, r.wafer_width_mm, r.wafer_height_mm) {
            let same = |b: &WaferConfig| {
                let mut x = c.clone();
                x.name = b.name.clone();
                x.label = b.label.clone();
                x == *b
            };
            if let Some(b) = builtin.iter().find(|b| same(b)) {
                c.name = b.name.clone();
                c.label = b.label.clone();
            }
            out.push(c);
        }
    }
    Ok((out, template_candidates))
}

pub fn cmd_enumerate(spec: &RunSpec, input_sha256: &str) -> CliResult<Run> {
    let (wafers, template_candidates) = wafers_for(spec)?;
    let mut report = base_report(Command::Enumerate, spec, input_sha256);
    let configs: Vec<ConfigSummary> = wafers
        .iter()
        .filter(|c| c.validate().feasible)
        .map(ConfigSummary::of)
        .collect();
    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record([
        "config",
        "grid_x",
        "grid_y",
        "die",
        "dram_chiplets_per_die",
        "dram_capacity_per_die",
        "dram_bandwidth_per_die",
        "d2d_bandwidth",
        "wafer_compute_flops",
        "wafer_dram_capacity",
    ])?;
    for s in &configs {
        let c = &s.config;
        csv.write_record([
            c.name.clone(),
            c.grid_x.to_string(),
            c.grid_y.to_string(),
            c.die.name.clone(),
            c.dram_chiplets_per_die.to_string(),
            s.dram_capacity_per_die.to_string(),
            s.dram_bandwidth_per_die.to_string(),
            c.d2d_bandwidth.to_string(),
            s.wafer_compute_flops.to_string(),
            s.wafer_dram_capacity.to_string(),
        ])?;
    }
    report.enumerate = Some(EnumerateResult {
        template_candidates,
        configs,
    });
    Ok(Run {
        report,
        artifacts: Artifacts {
            files: vec![("configs.csv".into(), csv_string(csv)?)],
        },
        failure: None,
    })
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> CliResult<String> {
    let bytes = w.into_inner().map_err(|e| CliError::Internal(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Internal(e.to_string()))
}

/// Loads the cached perf table from `dir` (if any), adds missing entries
/// and reports `(table, reused, computed)`.
pub fn load_perf_table(
    dir: Option<&Path>,
    needs: &[(WaferConfig, Vec<(OpKind, wsc_core::workload::OpShape)>)],
    utilization: f64,
) -> (PerfTable, usize, usize) {
    let mut table: PerfTable = dir
        .map(|d| d.join(PERF_CACHE_FILE))
        .and_then(|p| fs::read_to_string(p).ok())
        .and_then(|s| serde_json::from_str(&s).ok())
        .unwrap_or_default();
    let (mut reused, mut computed) = (0, 0);
    for (w, shapes) in needs {
        let ctx = engines::cost_context(w, &wsc_core::EngineParams {
            utilization,
            ..Default::default()
        });
        let missing: Vec<_> = shapes
            .iter()
            .filter(|(k, s)| table.get(*k, s, &ctx.identity, Direction::Fwd).is_err())
            .copied()
            .collect();
        reused += shapes.len() - missing.len();
        computed += missing.len();
        if !missing.is_empty() {
            table.merge(build_perf_table(&missing, std::slice::from_ref(&ctx)));
        }
    }
    (table, reused, computed)
}

pub fn cmd_evaluate(spec: &RunSpec, input_sha256: &str, cache_dir: Option<&Path>) -> CliResult<Run> {
    let st = spec
        .strategy
        .clone()
        .ok_or_else(|| CliError::Schema("evaluate needs a [strategy] section".into()))?;
    let (wafers, _) = wafers_for(spec)?;
    let [wafer] = wafers.as_slice() else {
        return Err(CliError::Schema(format!(
            "evaluate needs exactly one wafer configuration, found {}",
            wafers.len()
        )));
    };
    let wl = spec.workload()?;
    let grid = MeshGrid::new(wafer.grid_x, wafer.grid_y);
    let split = match st.split {
        Some(s) => s.into(),
        None => engines::default_split(st.tp, &wl, grid).ok_or_else(|| {
            CliError::Schema(format!("strategy: no tensor split of {} dies fits the model", st.tp))
        })?,
    };
    if split.tp() != st.tp {
        return Err(CliError::Schema(format!(
            "strategy.split multiplies to {}, tp is {}",
            split.tp(),
            st.tp
        )));
    }
    let engine = spec.search.engine();
    let shapes = engines::required_shapes(&wl, &split)?;
    let (table, _, _) = load_perf_table(cache_dir, &[(wafer.clone(), shapes)], engine.utilization);
    let prep = engines::prepare(wafer, &wl, st.pp, split, &table, &engine)?;
    let mut report = base_report(Command::Evaluate, spec, input_sha256);
    let mut artifacts = Artifacts::default();
    artifacts.files.push((PERF_CACHE_FILE.into(), perf_json(&table)));
    match evaluate_plan(&prep, spec, &st) {
        Ok((plan, tl)) => {
            artifacts.files.push(("trace.json".into(), trace_json(&tl)));
            artifacts.files.push(("heatmap.csv".into(), heatmap_csv(&[(&wafer.name, &plan)])?));
            let grid = plan.placement.render_grid();
            artifacts.files.push(("grid.txt".into(), grid.clone()));
            report.evaluate = Some(EvaluateResult {
                wafer: wafer.clone(),
                plan,
                grid,
            });
            Ok(Run {
                report,
                artifacts,
                failure: None,
            })
        }
        Err(e) => {
            let e = CliError::from(e);
            report.error = Some(e.to_string());
            Ok(Run {
                report,
                artifacts,
                failure: Some(e),
            })
        }
    }
}

/// The plan `evaluate` reports: masks from the spec or the recomputation
/// DP, then pairing, placement and allocation, optionally GA-refined.
pub fn evaluate_plan(
    prep: &Prepared,
    spec: &RunSpec,
    st: &crate::spec::StrategySection,
) -> wsc_core::Result<(Plan, PipelineTimeline)> {
    let inputs = prep.stage_inputs()?;
    let recomp = match &st.store_masks {
        Some(m) => {
            if m.len() != prep.pp {
                return Err(wsc_core::Error::InvalidArgument(format!(
                    "strategy.store_masks has {} entries for {} stages",
                    m.len(),
                    prep.pp
                )));
            }
            prep.recomp_from_masks(m)?
        }
        None => wsc_core::gcmr::gcmr_dp(&inputs, prep.capacity, prep.params.quantum)?,
    };
    let mut greedy = match st.placement {
        PlacementChoice::LocationAware => engines::plan_for_recomp(prep, recomp, spec.search.seed)?,
        PlacementChoice::Serpentine => {
            let pm = placement::serpentine_placement(prep.pp, prep.split.shape, prep.grid())?;
            let allocation = engines::allocate_for(prep, &recomp.memory(), &pm)?;
            engines::GreedyPlan {
                recomp,
                placement: pm,
                allocation,
                initial_pairs: Vec::new(),
            }
        }
    };
    let mut trace = Vec::new();
    if st.ga {
        let seed = search::Genome {
            masks: greedy.recomp.masks(),
            placement: greedy.placement.clone(),
            allocation: greedy.allocation.clone(),
        };
        let r = search::ga_optimize(prep, seed, &spec.search.ga_params())?;
        greedy.recomp = prep.recomp_from_masks(&r.best.genome.masks)?;
        greedy.placement = r.best.genome.placement;
        greedy.allocation = r.best.genome.allocation;
        trace = r.trace;
    }
    let (report, tl) = engines::evaluate_iteration(prep, &greedy.recomp, &greedy.placement, &greedy.allocation)?;
    let gc = placement::global_cost(&greedy.placement, &prep.comm_pp(), &greedy.allocation.pair_loads())?;
    Ok((
        Plan {
            tp: prep.tp,
            pp: prep.pp,
            split: prep.split,
            recomp: greedy.recomp,
            placement: greedy.placement,
            allocation: greedy.allocation,
            t_max: report.t_max,
            global_cost: gc.total,
            report,
            ga_trace: trace,
            baseline: engines::analytic_baseline(&prep.wafer, &prep.workload, prep.tp, prep.pp, spec.search.eta)?,
        },
        tl,
    ))
}

fn perf_json(t: &PerfTable) -> String {
    serde_json::to_string(t).expect("perf table serializes")
}

fn trace_json(tl: &PipelineTimeline) -> String {
    let mut s = serde_json::to_string_pretty(&tl.to_chrome_trace()).expect("trace serializes");
    s.push('\n');
    s
}

pub fn cmd_search(spec: &RunSpec, input_sha256: &str, cache_dir: Option<&Path>) -> CliResult<Run> {
    let (wafers, _) = wafers_for(spec)?;
    if wafers.is_empty() {
        return Err(CliError::Schema("search needs at least one wafer configuration".into()));
    }
    let wl = spec.workload()?;
    let opts = spec.search.options();
    let needs = wafers
        .iter()
        .map(|w| Ok((w.clone(), search::required_shapes(w, &wl, &opts)?)))
        .collect::<CliResult<Vec<_>>>()?;
    let (table, reused, computed) = load_perf_table(cache_dir, &needs, opts.engine.utilization);
    eprintln!("perf table: {reused} entries reused, {computed} computed");

    let mut results = Vec::with_capacity(wafers.len());
    for w in &wafers {
        let outcome = search::search_parallelism(w, &wl, &table, &opts)?;
        eprintln!(
            "{}: {} candidates, {}",
            w.name,
            outcome.ledger.len(),
            match &outcome.best {
                Some(p) => format!("best tp={} pp={} {:.4e} FLOP/s", p.tp, p.pp, p.report.throughput),
                None => "no feasible strategy".into(),
            }
        );
        results.push(ConfigResult {
            wafer: w.clone(),
            rank: None,
            baseline_rank: None,
            grid: outcome.best.as_ref().map(|p| p.placement.render_grid()),
            outcome,
        });
    }
    rank_results(&mut results);
    let best = results
        .iter()
        .find(|r| r.rank == Some(1))
        .map(|r| r.wafer.name.clone());

    let mut artifacts = Artifacts::default();
    artifacts.files.push((PERF_CACHE_FILE.into(), perf_json(&table)));
    artifacts.files.push(("ranking.csv".into(), ranking_csv(&results, &wl)?));
    artifacts.files.push(("ledger.csv".into(), ledger_csv(&results)?));
    let plans: Vec<(&str, &Plan)> = results
        .iter()
        .filter_map(|r| r.outcome.best.as_ref().map(|p| (r.wafer.name.as_str(), p)))
        .collect();
    artifacts.files.push(("heatmap.csv".into(), heatmap_csv(&plans)?));
    for r in &results {
        if let (Some(p), Some(g)) = (&r.outcome.best, &r.grid) {
            artifacts.files.push((format!("grid_{}.txt", r.wafer.name), g.clone()));
            let tl = timeline_of(&r.wafer, &wl, p, &table, &opts.engine)?;
            artifacts.files.push((format!("trace_{}.json", r.wafer.name), trace_json(&tl)));
        }
    }

    let mut report = base_report(Command::Search, spec, input_sha256);
    let failure = best.is_none().then(|| {
        CliError::Infeasible("no wafer configuration admits a feasible strategy".into())
    });
    if let Some(f) = &failure {
        report.error = Some(f.to_string());
    }
    report.search = Some(SearchResult { configs: results, best });
    Ok(Run {
        report,
        artifacts,
        failure,
    })
}

fn timeline_of(
    wafer: &WaferConfig,
    wl: &TrainingWorkload,
    p: &Plan,
    table: &PerfTable,
    engine: &wsc_core::EngineParams,
) -> CliResult<PipelineTimeline> {
    let prep = engines::prepare(wafer, wl, p.pp, p.split, table, engine)?;
    Ok(engines::evaluate_iteration(&prep, &p.recomp, &p.placement, &p.allocation)?.1)
}

/// Ranks configurations by the throughput of their optimized plan and by
/// the analytic baseline; ties keep input order.
pub fn rank_results(results: &mut [ConfigResult]) {
    let mut by_score: Vec<(f64, usize)> = results
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.outcome.best.as_ref().map(|p| (-p.report.throughput, i)))
        .collect();
    by_score.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for (rank, (_, i)) in by_score.into_iter().enumerate() {
        results[i].rank = Some(rank + 1);
    }
    let mut by_base: Vec<(f64, usize)> = results
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.outcome.baseline.map(|b| (b.total, i)))
        .collect();
    by_base.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for (rank, (_, i)) in by_base.into_iter().enumerate() {
        results[i].baseline_rank = Some(rank + 1);
    }
}

pub const RANKING_COLUMNS: [&str; 19] = [
    "rank",
    "config",
    "dies",
    "dram_capacity_per_die",
    "tp",
    "pp",
    "split",
    "throughput",
    "iteration_time",
    "t_max",
    "global_cost",
    "score",
    "recompute_fraction",
    "compute_utilization",
    "max_dram_occupancy",
    "offload_bytes",
    "ga_steps",
    "analytic_baseline",
    "baseline_rank",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn ranking_csv(results: &[ConfigResult], wl: &TrainingWorkload) -> CliResult<String> {
    let fwd_flops = wl.useful_flops()? / 3.0;
    let mut order: Vec<&ConfigResult> = results.iter().collect();
    order.sort_by_key(|r| (r.rank.is_none(), r.rank));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RANKING_COLUMNS)?;
    for r in order {
        let p = r.outcome.best.as_ref();
        let rep = p.map(|p| &p.report);
        w.write_record([
            opt(r.rank),
            r.wafer.name.clone(),
            r.wafer.num_dies().to_string(),
            r.wafer.dram_capacity_per_die().to_string(),
            opt(p.map(|p| p.tp)),
            opt(p.map(|p| p.pp)),
            opt(p.map(|p| p.split.label())),
            opt(rep.map(|r| r.throughput)),
            opt(rep.map(|r| r.iteration_time)),
            opt(p.map(|p| p.t_max)),
            opt(p.map(|p| p.global_cost)),
            opt(p.map(|p| p.score())),
            opt(rep.map(|r| r.recompute_flops / fwd_flops)),
            opt(rep.map(|r| r.compute_utilization)),
            opt(rep.map(|r| r.stages.iter().map(|s| s.dram_occupancy).fold(0.0, f64::max))),
            opt(p.map(|p| p.allocation.total())),
            opt(p.map(|p| p.ga_trace.len().saturating_sub(1))),
            opt(r.outcome.baseline.map(|b| b.total)),
            opt(r.baseline_rank),
        ])?;
    }
    csv_string(w)
}

fn ledger_csv(results: &[ConfigResult]) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "config",
        "mp",
        "tp",
        "pp",
        "disposition",
        "needs_recompute",
        "splits_tried",
        "split",
        "throughput",
        "iteration_time",
        "t_max",
        "global_cost",
        "ga",
        "reason",
    ])?;
    for r in results {
        for c in &r.outcome.ledger {
            let json_str = |v: serde_json::Value| v.as_str().unwrap_or_default().to_string();
            w.write_record([
                r.wafer.name.clone(),
                c.mp.to_string(),
                c.tp.to_string(),
                c.pp.to_string(),
                json_str(serde_json::to_value(c.disposition)?),
                c.needs_recompute.to_string(),
                c.splits_tried.to_string(),
                opt(c.split.map(|s| s.label())),
                opt(c.throughput),
                opt(c.iteration_time),
                opt(c.t_max),
                opt(c.global_cost),
                json_str(serde_json::to_value(c.ga)?),
                c.reason.clone().unwrap_or_default(),
            ])?;
        }
    }
    csv_string(w)
}

fn heatmap_csv(plans: &[(&str, &Plan)]) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["config", "x", "y", "stage", "dram_occupancy"])?;
    for (name, p) in plans {
        for (y, row) in p.report.dram_heatmap.iter().enumerate() {
            for (x, v) in row.iter().enumerate() {
                let c = placement::Coord::new(x as u32, y as u32);
                let stage = p
                    .placement
                    .stage_at(c)
                    .filter(|&s| p.placement.region(s).contains(c))
                    .map(|s| s + 1);
                w.write_record([name.to_string(), x.to_string(), y.to_string(), opt(stage), v.to_string()])?;
            }
        }
    }
    csv_string(w)
}

/// Writes the report and its artifacts into `dir`.
pub fn write_run(dir: &Path, run: &Run) -> CliResult<PathBuf> {
    fs::create_dir_all(dir)?;
    for (name, body) in &run.artifacts.files {
        fs::write(dir.join(name), body)?;
    }
    let path = dir.join(REPORT_FILE);
    fs::write(&path, run.report.to_json())?;
    Ok(path)
}

/// Human-readable summary of a report.
pub fn summarize(r: &RunReport) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    let _ = writeln!(s, "{} {} ({:?}), input {}", r.tool, r.tool_version, r.command, &r.input_sha256[..12.min(r.input_sha256.len())]);
    if let Some(e) = &r.error {
        let _ = writeln!(s, "error: {e}");
    }
    if let Some(en) = &r.enumerate {
        let _ = writeln!(s, "{} feasible of {} template candidates", en.configs.len(), en.template_candidates);
        for c in &en.configs {
            let _ = writeln!(
                s,
                "  {:<12} {}x{} dies, {:.1} GB/die",
                c.config.name,
                c.config.grid_x,
                c.config.grid_y,
                c.dram_capacity_per_die / 1e9
            );
        }
    }
    if let Some(ev) = &r.evaluate {
        let p = &ev.plan;
        let _ = writeln!(
            s,
            "{}: tp={} pp={} iteration {:.6} s, {:.4e} FLOP/s",
            ev.wafer.name, p.tp, p.pp, p.report.iteration_time, p.report.throughput
        );
        s.push_str(&ev.grid);
    }
    if let Some(se) = &r.search {
        let mut rows: Vec<&ConfigResult> = se.configs.iter().collect();
        rows.sort_by_key(|c| (c.rank.is_none(), c.rank));
        for c in rows {
            let _ = match &c.outcome.best {
                Some(p) => writeln!(
                    s,
                    "  #{} {:<10} tp={} pp={} {:.4e} FLOP/s, score {:.4e}, baseline #{}",
                    opt(c.rank),
                    c.wafer.name,
                    p.tp,
                    p.pp,
                    p.report.throughput,
                    p.score(),
                    opt(c.baseline_rank)
                ),
                None => writeln!(s, "  -  {:<10} no feasible strategy", c.wafer.name),
            };
        }
    }
    s
}
