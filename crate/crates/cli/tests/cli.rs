use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use wsc_cli::RunReport;
use wsc_core::engines::{self, EngineParams};
use wsc_core::placement::MeshGrid;
use wsc_core::presets;

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn wsc(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wsc"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("spawn wsc")
}

fn report(out: &Path) -> RunReport {
    RunReport::from_json(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_spec(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("spec.toml");
    fs::write(&p, text).unwrap();
    p
}

fn csv_rows(path: &Path) -> (csv::StringRecord, Vec<csv::StringRecord>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let h = r.headers().unwrap().clone();
    (h, r.records().map(Result::unwrap).collect())
}

#[test]
fn enumerate_representative_ranges_lists_named_configs() {
    let dir = tempfile::tempdir().unwrap();
    let o = wsc(&["enumerate"], &config("representative_enumerate.toml"), dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let (_, rows) = csv_rows(&dir.path().join("configs.csv"));
    let names: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    for c in ["config1", "config2", "config3", "config4"] {
        assert!(names.contains(&c), "{c} missing");
    }
    let r = report(dir.path());
    let en = r.enumerate.unwrap();
    assert_eq!(en.configs.len(), rows.len());
    assert!(en.template_candidates >= rows.len());
}

#[test]
fn empty_ranges_give_empty_list() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(
        dir.path(),
        r#"
version = 1
[wafer.ranges]
preset = "representative"
grid_x = [20]
grid_y = [20]
[model]
preset = "gpt-175b"
[training]
microbatch_size = 1
num_microbatches = 8
"#,
    );
    let out = dir.path().join("out");
    let o = wsc(&["enumerate"], &spec, &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let (h, rows) = csv_rows(&out.join("configs.csv"));
    assert_eq!(&h[0], "config");
    assert!(rows.is_empty());
    assert!(report(&out).enumerate.unwrap().configs.is_empty());
}

#[test]
fn malformed_spec_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(config("toy_search.toml"))
        .unwrap()
        .replace("num_microbatches = 8", "num_microbatches = 8\nmicrobatch_sz = 2");
    let spec = write_spec(dir.path(), &text);
    let o = wsc(&["search"], &spec, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("microbatch_sz"), "{}", stderr(&o));

    let missing = fs::read_to_string(config("toy_search.toml"))
        .unwrap()
        .replace("num_microbatches = 8\n", "");
    let spec = write_spec(dir.path(), &missing);
    let o = wsc(&["search"], &spec, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("num_microbatches"), "{}", stderr(&o));
}

#[test]
fn unknown_preset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(config("toy_search.toml"))
        .unwrap()
        .replace("\"config2\"", "\"config9\"");
    let spec = write_spec(dir.path(), &text);
    let o = wsc(&["search"], &spec, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("config9"), "{}", stderr(&o));
}

#[test]
fn evaluate_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let o = wsc(&["evaluate"], &config("toy_evaluate.toml"), dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let ev = report(dir.path()).evaluate.unwrap();
    for f in ["trace.json", "heatmap.csv", "grid.txt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }

    let spec = wsc_cli::RunSpec::parse(&fs::read_to_string(config("toy_evaluate.toml")).unwrap()).unwrap();
    let wafer = presets::wafer("config3").unwrap();
    let wl = spec.workload().unwrap();
    let params = EngineParams {
        quantum: 1 << 20,
        ..EngineParams::default()
    };
    let split: engines::TpSplit = spec.strategy.as_ref().unwrap().split.unwrap().into();
    let table = engines::table_for(&wafer, &wl, &[split], &params).unwrap();
    let prep = engines::prepare(&wafer, &wl, 3, split, &table, &params).unwrap();
    let g = engines::greedy_plan(&prep, 3).unwrap();
    let (rep, _) = engines::evaluate_iteration(&prep, &g.recomp, &g.placement, &g.allocation).unwrap();
    assert_eq!(ev.plan.report, rep);
    assert_eq!(ev.plan.placement, g.placement);
    assert_eq!(ev.grid, g.placement.render_grid());
}

#[test]
fn out_of_memory_strategy_exits_3_naming_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(
        dir.path(),
        r#"
version = 1
[wafer]
presets = ["config3"]
[model]
preset = "gpt-175b"
[training]
microbatch_size = 1
num_microbatches = 8
[strategy]
tp = 2
pp = 1
"#,
    );
    let out = dir.path().join("out");
    let o = wsc(&["evaluate"], &spec, &out);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("stage 0"), "{}", stderr(&o));
    let r = report(&out);
    assert!(r.error.unwrap().contains("stage 0"));
    assert!(r.evaluate.is_none());
}

#[test]
fn search_is_reproducible_and_reuses_the_perf_cache() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let first = wsc(&["search"], &config("toy_search.toml"), &a);
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(stderr(&first).contains(" 0 entries reused"), "{}", stderr(&first));
    let second = wsc(&["search"], &config("toy_search.toml"), &b);
    assert!(second.status.success());
    for f in ["report.json", "ranking.csv", "ledger.csv", "heatmap.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }

    // Same directory again: every operator cost comes from the cache.
    let again = wsc(&["search"], &config("toy_search.toml"), &a);
    assert!(again.status.success());
    assert!(stderr(&again).contains(" 0 computed"), "{}", stderr(&again));
    assert_eq!(fs::read(a.join("report.json")).unwrap(), fs::read(b.join("report.json")).unwrap());

    let (h, rows) = csv_rows(&a.join("ranking.csv"));
    assert_eq!(h.len(), 19);
    assert_eq!(rows.len(), 2);
    let r = report(&a);
    let s = r.search.unwrap();
    let best = s.best.unwrap();
    assert!(s.configs.iter().any(|c| c.wafer.name == best && c.rank == Some(1)));
    for c in &s.configs {
        assert!(a.join(format!("grid_{}.txt", c.wafer.name)).exists());
        assert!(a.join(format!("trace_{}.json", c.wafer.name)).exists());
    }
}

#[test]
fn fast_mode_skips_the_ga() {
    let dir = tempfile::tempdir().unwrap();
    let o = wsc(&["search", "--fast"], &config("toy_search.toml"), dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let (h, rows) = csv_rows(&dir.path().join("ledger.csv"));
    let ga = h.iter().position(|c| c == "ga").unwrap();
    let disp = h.iter().position(|c| c == "disposition").unwrap();
    let evaluated: Vec<_> = rows
        .iter()
        .filter(|r| matches!(&r[disp], "ok" | "delegated"))
        .collect();
    assert!(!evaluated.is_empty());
    assert!(evaluated.iter().all(|r| &r[ga] == "skipped-fast"));
    assert!(rows.iter().all(|r| &r[ga] != "ran"));
    assert!(report(dir.path()).spec.search.fast);
}

#[test]
fn overrides_land_in_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = wsc(
        &["search", "--fast", "--seed", "11", "--steps", "5", "--population", "4", "--omega", "0.5"],
        &config("toy_search.toml"),
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let s = report(dir.path()).spec.search;
    assert_eq!((s.seed, s.steps, s.population, s.omega), (11, 5, 4, 0.5));
}

#[test]
fn report_subcommand_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let o = wsc(&["evaluate"], &config("toy_evaluate.toml"), dir.path());
    assert!(o.status.success());
    let path = dir.path().join("report.json");
    let r = Command::new(env!("CARGO_BIN_EXE_wsc"))
        .arg("report")
        .arg(&path)
        .output()
        .unwrap();
    assert!(r.status.success(), "{}", stderr(&r));
    let text = String::from_utf8(r.stdout).unwrap();
    assert!(text.contains("tp=4 pp=3"), "{text}");
    let rep = report(dir.path());
    assert_eq!(RunReport::from_json(&rep.to_json()).unwrap(), rep);

    fs::write(&path, "{\"tool\": 1}").unwrap();
    let bad = Command::new(env!("CARGO_BIN_EXE_wsc")).arg("report").arg(&path).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn search_grid_matches_block_layout() {
    let dir = tempfile::tempdir().unwrap();
    let o = wsc(&["search", "--fast"], &config("toy_search.toml"), dir.path());
    assert!(o.status.success());
    let s = report(dir.path()).search.unwrap();
    for c in &s.configs {
        let Some(p) = &c.outcome.best else { continue };
        let g = MeshGrid::new(c.wafer.grid_x, c.wafer.grid_y);
        assert_eq!(p.placement.grid, g);
        let text = fs::read_to_string(dir.path().join(format!("grid_{}.txt", c.wafer.name))).unwrap();
        assert_eq!(text.lines().count(), g.rows as usize);
    }
}
