//! The run-spec document.

use serde::{Deserialize, Serialize};
use wsc_core::engines::{EngineParams, TpSplit};
use wsc_core::hw_model::TemplateRanges;
use wsc_core::placement::TpShape;
use wsc_core::search::{GaParams, SearchOptions};
use wsc_core::workload::SplitFactors;
use wsc_core::{presets, DieSpec, DramChipletSpec, ModelConfig, TrainingWorkload, WaferConfig};

use crate::error::{CliError, CliResult};

pub const SPEC_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub wafer: WaferSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<StrategySection>,
    #[serde(default)]
    pub search: SearchSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct WaferSection {
    /// Built-in configurations by name.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub presets: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub configs: Vec<WaferConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranges: Option<RangesSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RangesSection {
    /// Start from a built-in range set (`"representative"`); explicit lists below
    /// replace its fields.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub grid_x: Vec<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub grid_y: Vec<u32>,
    /// Built-in die names.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub die_presets: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dies: Vec<DieSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dram_chiplets_per_die: Vec<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub drams: Vec<DramChipletSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub d2d_bandwidth: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub d2d_latency: Vec<f64>,
    #[serde(default = "default_edge")]
    pub wafer_width_mm: f64,
    #[serde(default = "default_edge")]
    pub wafer_height_mm: f64,
}

fn default_edge() -> f64 {
    216.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ModelConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub microbatch_size: u64,
    pub num_microbatches: u64,
    /// Overrides the model's sequence length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq_len: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PlacementChoice {
    #[default]
    LocationAware,
    Serpentine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub width: u32,
    pub height: u32,
    #[serde(default = "one")]
    pub b: u64,
    #[serde(default = "one")]
    pub s: u64,
    #[serde(default = "one")]
    pub h: u64,
    #[serde(default = "one")]
    pub k: u64,
}

fn one() -> u64 {
    1
}

impl From<SplitSpec> for TpSplit {
    fn from(s: SplitSpec) -> Self {
        TpSplit {
            shape: TpShape::new(s.width, s.height),
            factors: SplitFactors {
                b: s.b,
                s: s.s,
                h: s.h,
                k: s.k,
            },
        }
    }
}

/// Fixed strategy for `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySection {
    pub tp: u64,
    pub pp: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSpec>,
    #[serde(default)]
    pub placement: PlacementChoice,
    /// Per-stage store masks; planned by the recomputation DP when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store_masks: Option<Vec<u32>>,
    /// Refine the greedy plan with the genetic optimizer.
    #[serde(default)]
    pub ga: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub seed: u64,
    pub omega: f64,
    pub steps: usize,
    pub population: usize,
    pub fast: bool,
    pub top_k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_dies: Option<u32>,
    pub random_restarts: bool,
    pub op_probs: [f64; 5],
    pub utilization: f64,
    pub punishment: f64,
    pub quantum_bytes: u64,
    pub eta: f64,
}

impl Default for SearchSection {
    fn default() -> Self {
        let o = SearchOptions::default();
        Self {
            seed: o.ga.seed,
            omega: o.ga.omega,
            steps: o.ga.steps,
            population: o.ga.population,
            fast: o.fast,
            top_k: o.top_k,
            max_dies: None,
            random_restarts: o.ga.random_restarts,
            op_probs: o.ga.op_probs,
            utilization: o.engine.utilization,
            punishment: o.engine.punishment,
            quantum_bytes: o.engine.quantum,
            eta: o.eta,
        }
    }
}

impl SearchSection {
    pub fn ga_params(&self) -> GaParams {
        GaParams {
            population: self.population,
            steps: self.steps,
            omega: self.omega,
            op_probs: self.op_probs,
            seed: self.seed,
            random_restarts: self.random_restarts,
            ..GaParams::default()
        }
    }

    pub fn engine(&self) -> EngineParams {
        EngineParams {
            utilization: self.utilization,
            punishment: self.punishment,
            quantum: self.quantum_bytes,
        }
    }

    pub fn options(&self) -> SearchOptions {
        SearchOptions {
            max_dies: self.max_dies,
            ga: self.ga_params(),
            fast: self.fast,
            top_k: self.top_k,
            engine: self.engine(),
            eta: self.eta,
        }
    }
}

/// Command-line overrides of the search section.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub omega: Option<f64>,
    pub steps: Option<usize>,
    pub population: Option<usize>,
    pub fast: bool,
}

impl RunSpec {
    pub fn parse(text: &str) -> CliResult<Self> {
        let spec: RunSpec = toml::from_str(text).map_err(|e| CliError::Schema(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run spec serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        let s = &mut self.search;
        if let Some(v) = o.seed {
            s.seed = v;
        }
        if let Some(v) = o.omega {
            s.omega = v;
        }
        if let Some(v) = o.steps {
            s.steps = v;
        }
        if let Some(v) = o.population {
            s.population = v;
        }
        s.fast |= o.fast;
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.version != SPEC_VERSION {
            return Err(CliError::Schema(format!(
                "version: expected {SPEC_VERSION}, found {}",
                self.version
            )));
        }
        self.model()?.validate()?;
        if self.training.microbatch_size == 0 || self.training.num_microbatches == 0 {
            return Err(CliError::Schema(
                "training: microbatch_size and num_microbatches must be positive".into(),
            ));
        }
        let s = &self.search;
        self.search.ga_params().validate()?;
        if !(s.utilization > 0.0 && s.utilization <= 1.0) {
            return Err(CliError::Schema(format!("search.utilization {} outside (0, 1]", s.utilization)));
        }
        if s.quantum_bytes == 0 || s.punishment < 0.0 || s.eta < 0.0 {
            return Err(CliError::Schema(
                "search: quantum_bytes must be positive, punishment and eta non-negative".into(),
            ));
        }
        for p in &self.wafer.presets {
            presets::wafer(p)?;
        }
        if let Some(r) = &self.wafer.ranges {
            self.template(r)?;
        }
        if let Some(st) = &self.strategy {
            if st.tp == 0 || st.pp == 0 {
                return Err(CliError::Schema("strategy: tp and pp must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn model(&self) -> CliResult<ModelConfig> {
        let mut m = match (&self.model.preset, &self.model.config) {
            (Some(name), None) => presets::model(name)?,
            (None, Some(cfg)) => cfg.clone(),
            _ => {
                return Err(CliError::Schema(
                    "model: set exactly one of `preset` or `config`".into(),
                ))
            }
        };
        if let Some(s) = self.training.seq_len {
            m.seq_len = s;
        }
        Ok(m)
    }

    pub fn workload(&self) -> CliResult<TrainingWorkload> {
        Ok(TrainingWorkload::new(
            self.model()?,
            self.training.microbatch_size,
            self.training.num_microbatches,
        )?)
    }

    pub fn template(&self, r: &RangesSection) -> CliResult<TemplateRanges> {
        let mut t = match r.preset.as_deref() {
            None => TemplateRanges::default(),
            Some("representative") => presets::representative_ranges(),
            Some(other) => {
                return Err(CliError::Schema(format!("wafer.ranges.preset: unknown range set `{other}`")))
            }
        };
        let mut dies: Vec<DieSpec> = r
            .die_presets
            .iter()
            .map(|n| presets::die(n))
            .collect::<wsc_core::Result<_>>()?;
        dies.extend(r.dies.iter().cloned());
        macro_rules! take {
            ($field:ident, $src:expr) => {
                if !$src.is_empty() {
                    t.$field = $src;
                }
            };
        }
        take!(grid_x, r.grid_x.clone());
        take!(grid_y, r.grid_y.clone());
        take!(dies, dies);
        take!(dram_chiplets_per_die, r.dram_chiplets_per_die.clone());
        take!(drams, r.drams.clone());
        take!(d2d_bandwidth, r.d2d_bandwidth.clone());
        take!(d2d_latency, r.d2d_latency.clone());
        Ok(t)
    }

    /// Explicit configurations: presets first, then inline ones.
    pub fn fixed_wafers(&self) -> CliResult<Vec<WaferConfig>> {
        let mut out: Vec<WaferConfig> = self
            .wafer
            .presets
            .iter()
            .map(|p| presets::wafer(p))
            .collect::<wsc_core::Result<_>>()?;
        for (i, c) in self.wafer.configs.iter().enumerate() {
            let mut c = c.clone();
            if c.name.is_empty() {
                c.name = format!("inline-{}", i + 1);
            }
            out.push(c);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
version = 1
[wafer]
presets = ["config3"]
[model]
preset = "llama2-30b"
[training]
microbatch_size = 1
num_microbatches = 8
"#;

    #[test]
    fn minimal_spec_roundtrips() {
        let s = RunSpec::parse(MINIMAL).unwrap();
        assert_eq!(s.search, SearchSection::default());
        let again = RunSpec::parse(&s.to_toml()).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn unknown_key_is_rejected_with_field() {
        let bad = MINIMAL.replace("num_microbatches = 8", "num_microbatches = 8\nbogus = 1");
        match RunSpec::parse(&bad) {
            Err(CliError::Schema(m)) => assert!(m.contains("bogus"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_version_is_schema_error() {
        let bad = MINIMAL.replace("version = 1", "version = 2");
        assert!(matches!(RunSpec::parse(&bad), Err(CliError::Schema(_))));
    }

    #[test]
    fn overrides_apply() {
        let mut s = RunSpec::parse(MINIMAL).unwrap();
        s.apply(&Overrides {
            seed: Some(9),
            steps: Some(3),
            fast: true,
            ..Overrides::default()
        });
        assert_eq!((s.search.seed, s.search.steps, s.search.fast), (9, 3, true));
    }

    #[test]
    fn moe_model_is_rejected() {
        let bad = MINIMAL.replace(
            "preset = \"llama2-30b\"",
            "config = { num_layers = 2, hidden_size = 64, num_heads = 4, seq_len = 16, vocab_size = 10, num_experts = 8 }",
        );
        assert!(matches!(RunSpec::parse(&bad), Err(CliError::Schema(_))));
    }
}
