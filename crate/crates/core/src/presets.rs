//! Built-in dies, wafer configurations and model zoo, loaded from the
//! TOML files embedded at compile time.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::Deserialize;

use crate::hw_model::{ConfigLabel, DieSpec, DramChipletSpec, TemplateRanges, WaferConfig};
use crate::{Error, ModelConfig, Result};

const WAFERS_TOML: &str = include_str!("../presets/wafers.toml");
const MODELS_TOML: &str = include_str!("../presets/models.toml");

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WaferFile {
    dies: BTreeMap<String, DieSpec>,
    configs: Vec<ConfigEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigEntry {
    name: String,
    die: String,
    grid_x: u32,
    grid_y: u32,
    dram_chiplets_per_die: u32,
    dram: DramChipletSpec,
    d2d_bandwidth: f64,
    d2d_latency: f64,
    wafer_width_mm: f64,
    wafer_height_mm: f64,
    #[serde(default)]
    label: ConfigLabel,
}

struct Loaded {
    dies: BTreeMap<String, DieSpec>,
    configs: Vec<WaferConfig>,
    models: BTreeMap<String, ModelConfig>,
}

fn loaded() -> &'static Loaded {
    static CELL: OnceLock<Loaded> = OnceLock::new();
    CELL.get_or_init(|| {
        let wf: WaferFile = toml::from_str(WAFERS_TOML).expect("embedded wafers.toml");
        let configs = wf
            .configs
            .into_iter()
            .map(|c| WaferConfig {
                die: wf.dies.get(&c.die).expect("preset die key").clone(),
                name: c.name,
                grid_x: c.grid_x,
                grid_y: c.grid_y,
                dram_chiplets_per_die: c.dram_chiplets_per_die,
                dram: c.dram,
                d2d_bandwidth: c.d2d_bandwidth,
                d2d_latency: c.d2d_latency,
                wafer_width_mm: c.wafer_width_mm,
                wafer_height_mm: c.wafer_height_mm,
                label: c.label,
            })
            .collect();
        let mut models: BTreeMap<String, ModelConfig> =
            toml::from_str(MODELS_TOML).expect("embedded models.toml");
        for (name, m) in models.iter_mut() {
            m.name = name.clone();
        }
        Loaded {
            dies: wf.dies,
            configs,
            models,
        }
    })
}

pub fn die_16x16() -> DieSpec {
    loaded().dies["die16"].clone()
}

pub fn die_18x18() -> DieSpec {
    loaded().dies["die18"].clone()
}

pub fn die(name: &str) -> Result<DieSpec> {
    loaded()
        .dies
        .get(name)
        .cloned()
        .ok_or_else(|| Error::UnknownPreset(name.to_string()))
}

pub fn die_names() -> Vec<String> {
    loaded().dies.keys().cloned().collect()
}

/// Representative configuration `i` (1-based).
pub fn representative_config(i: usize) -> Result<WaferConfig> {
    i.checked_sub(1)
        .and_then(|k| loaded().configs.get(k))
        .cloned()
        .ok_or_else(|| Error::UnknownPreset(format!("config{i}")))
}

pub fn wafer(name: &str) -> Result<WaferConfig> {
    loaded()
        .configs
        .iter()
        .find(|c| c.name == name)
        .cloned()
        .ok_or_else(|| Error::UnknownPreset(name.to_string()))
}

pub fn representative_configs() -> Vec<WaferConfig> {
    loaded().configs.clone()
}

pub fn wafer_names() -> Vec<String> {
    loaded().configs.iter().map(|c| c.name.clone()).collect()
}

/// Template ranges that span the four representative configurations.
pub fn representative_ranges() -> TemplateRanges {
    let configs = &loaded().configs;
    let mut drams: Vec<DramChipletSpec> = Vec::new();
    for c in configs {
        if !drams.contains(&c.dram) {
            drams.push(c.dram.clone());
        }
    }
    TemplateRanges {
        grid_x: vec![6, 7, 8],
        grid_y: vec![6, 7, 8],
        dies: vec![die_16x16(), die_18x18()],
        dram_chiplets_per_die: vec![3, 4, 5, 6],
        drams,
        d2d_bandwidth: vec![3.5e12, 4e12, 4.5e12],
        d2d_latency: vec![100e-9],
    }
}

pub fn model(name: &str) -> Result<ModelConfig> {
    loaded()
        .models
        .get(name)
        .cloned()
        .ok_or_else(|| Error::UnknownPreset(name.to_string()))
}

pub fn model_names() -> Vec<String> {
    loaded().models.keys().cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_load() {
        assert_eq!(representative_configs().len(), 4);
        assert_eq!(model_names().len(), 3);
        let c = representative_config(3).unwrap();
        assert_eq!(c.name, "config3");
        assert_eq!(c.die.name, "18x18-core");
        assert!(representative_config(0).is_err());
        assert!(representative_config(5).is_err());
        assert!(matches!(model("nope"), Err(Error::UnknownPreset(_))));
        assert_eq!(model("gpt-175b").unwrap().name, "gpt-175b");
    }

    #[test]
    fn preset_models_validate() {
        for n in model_names() {
            model(&n).unwrap().validate().unwrap();
        }
    }
}
