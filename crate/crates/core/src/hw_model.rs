//! Configurable wafer / die / core hardware template.
//!
//! A wafer carries a `grid_x × grid_y` mesh of identical compute dies. Each
//! die owns a bank of DRAM chiplets attached along its vertical edges, so
//! chiplet columns widen the horizontal footprint of every die slot. The
//! die's edge IO is split between DRAM interfaces and the four D2D links.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Default usable wafer edge in millimetres.
pub const DEFAULT_WAFER_EDGE_MM: f64 = 198.0;

/// Upper bound on chiplets per vertical die edge.
pub const MAX_CHIPLETS_PER_SIDE: u32 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoreSpec {
    /// FP16 FLOP/s.
    pub peak_flops: f64,
    pub sram_bytes: f64,
    /// Hz.
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DieSpec {
    #[serde(default)]
    pub name: String,
    pub width_mm: f64,
    pub height_mm: f64,
    pub core_rows: u32,
    pub core_cols: u32,
    pub core: CoreSpec,
    /// Total bytes/s across all four die edges.
    pub edge_io_bandwidth: f64,
    /// Share of edge IO reserved for DRAM interfaces.
    pub dram_io_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DramChipletSpec {
    pub width_mm: f64,
    pub height_mm: f64,
    pub capacity_bytes: f64,
    /// bytes/s per chiplet.
    pub bandwidth: f64,
}

/// Metadata carried along from published configuration tables. Never used
/// in any computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ConfigLabel {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table_compute_power: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaferConfig {
    #[serde(default)]
    pub name: String,
    pub grid_x: u32,
    pub grid_y: u32,
    pub die: DieSpec,
    pub dram_chiplets_per_die: u32,
    pub dram: DramChipletSpec,
    /// bytes/s per mesh link.
    pub d2d_bandwidth: f64,
    /// Per-hop link latency in seconds.
    pub d2d_latency: f64,
    #[serde(default = "default_wafer_edge")]
    pub wafer_width_mm: f64,
    #[serde(default = "default_wafer_edge")]
    pub wafer_height_mm: f64,
    #[serde(default, skip_serializing_if = "is_default_label")]
    pub label: ConfigLabel,
}

fn default_wafer_edge() -> f64 {
    DEFAULT_WAFER_EDGE_MM
}

fn is_default_label(l: &ConfigLabel) -> bool {
    *l == ConfigLabel::default()
}

impl DieSpec {
    pub fn core_count(&self) -> u64 {
        u64::from(self.core_rows) * u64::from(self.core_cols)
    }

    pub fn compute_flops(&self) -> f64 {
        derive_die_metrics(self).0
    }

    pub fn sram_total_bytes(&self) -> f64 {
        derive_die_metrics(self).1
    }
}

/// Returns `(compute_flops, sram_total_bytes)` for a die.
pub fn derive_die_metrics(die: &DieSpec) -> (f64, f64) {
    let cores = die.core_count() as f64;
    (cores * die.core.peak_flops, cores * die.core.sram_bytes)
}

impl WaferConfig {
    pub fn num_dies(&self) -> u32 {
        self.grid_x * self.grid_y
    }

    /// Per-die DRAM capacity.
    pub fn dram_capacity_per_die(&self) -> f64 {
        f64::from(self.dram_chiplets_per_die) * self.dram.capacity_bytes
    }

    /// Per-die aggregate DRAM bandwidth.
    pub fn dram_bandwidth_per_die(&self) -> f64 {
        f64::from(self.dram_chiplets_per_die) * self.dram.bandwidth
    }

    pub fn wafer_dram_capacity(&self) -> f64 {
        self.dram_capacity_per_die() * f64::from(self.num_dies())
    }

    pub fn wafer_compute_flops(&self) -> f64 {
        self.die.compute_flops() * f64::from(self.num_dies())
    }

    /// Chiplets that stack along one die edge.
    pub fn chiplets_per_column(&self) -> u32 {
        if self.dram.height_mm <= 0.0 {
            return 1;
        }
        ((self.die.height_mm / self.dram.height_mm).floor() as u32).max(1)
    }

    pub fn chiplet_columns(&self) -> u32 {
        self.dram_chiplets_per_die.div_ceil(self.chiplets_per_column())
    }

    /// Footprint of one die slot (die plus its DRAM columns) in mm.
    pub fn slot_footprint_mm(&self) -> (f64, f64) {
        let w = self.die.width_mm + f64::from(self.chiplet_columns()) * self.dram.width_mm;
        let stacked = self.dram_chiplets_per_die.min(self.chiplets_per_column());
        let h = self
            .die
            .height_mm
            .max(f64::from(stacked) * self.dram.height_mm);
        (w, h)
    }

    /// Edge IO consumed by DRAM interfaces: the reserved share, or more if the
    /// attached chiplets need it.
    pub fn dram_io_consumption(&self) -> f64 {
        let reserved = self.die.dram_io_fraction * self.die.edge_io_bandwidth;
        reserved.max(self.dram_bandwidth_per_die())
    }

    /// Largest per-link D2D bandwidth the IO budget admits.
    pub fn max_feasible_d2d_bandwidth(&self) -> f64 {
        (self.die.edge_io_bandwidth - self.dram_io_consumption()).max(0.0)
    }

    /// Stable identity of the die as seen by the cost model: compute array,
    /// SRAM and DRAM bandwidth.
    pub fn die_identity(&self) -> String {
        format!(
            "{}x{}@{:.6e}f/{:.6e}s/{:.6e}bw",
            self.die.core_rows,
            self.die.core_cols,
            self.die.core.peak_flops,
            self.die.core.sram_bytes,
            self.dram_bandwidth_per_die()
        )
    }

    pub fn validate(&self) -> Verdict {
        validate_config(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    NonPositive { field: String },
    DramIoFraction { value: f64 },
    ChipletCount { count: u32, max: u32 },
    Area { axis: Axis, required_mm: f64, available_mm: f64 },
    IoBudget { required: f64, available: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Horizontal,
    Vertical,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonPositive { field } => write!(f, "non-positive field `{field}`"),
            Violation::DramIoFraction { value } => {
                write!(f, "dram_io_fraction {value} outside [0, 1]")
            }
            Violation::ChipletCount { count, max } => {
                write!(f, "chiplet count: {count} chiplets exceed {max}")
            }
            Violation::Area {
                axis,
                required_mm,
                available_mm,
            } => write!(
                f,
                "area ({axis:?}): footprint {required_mm:.2} mm exceeds wafer {available_mm:.2} mm"
            ),
            Violation::IoBudget {
                required,
                available,
            } => write!(
                f,
                "IO budget: D2D + DRAM interfaces need {required:.4e} B/s of {available:.4e} B/s"
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub feasible: bool,
    pub violations: Vec<Violation>,
}

pub fn validate_config(cfg: &WaferConfig) -> Verdict {
    let mut violations = Vec::new();
    let mut positive = |name: &str, v: f64| {
        if !(v > 0.0) {
            violations.push(Violation::NonPositive {
                field: name.to_string(),
            });
        }
    };
    positive("grid_x", f64::from(cfg.grid_x));
    positive("grid_y", f64::from(cfg.grid_y));
    positive("die.width_mm", cfg.die.width_mm);
    positive("die.height_mm", cfg.die.height_mm);
    positive("die.core_rows", f64::from(cfg.die.core_rows));
    positive("die.core_cols", f64::from(cfg.die.core_cols));
    positive("die.core.peak_flops", cfg.die.core.peak_flops);
    positive("die.core.sram_bytes", cfg.die.core.sram_bytes);
    positive("die.core.frequency", cfg.die.core.frequency);
    positive("die.edge_io_bandwidth", cfg.die.edge_io_bandwidth);
    positive("dram.width_mm", cfg.dram.width_mm);
    positive("dram.height_mm", cfg.dram.height_mm);
    positive("dram.capacity_bytes", cfg.dram.capacity_bytes);
    positive("dram.bandwidth", cfg.dram.bandwidth);
    positive("wafer_width_mm", cfg.wafer_width_mm);
    positive("wafer_height_mm", cfg.wafer_height_mm);
    if cfg.d2d_latency < 0.0 || !cfg.d2d_latency.is_finite() {
        violations.push(Violation::NonPositive {
            field: "d2d_latency".into(),
        });
    }
    if cfg.d2d_bandwidth < 0.0 || !cfg.d2d_bandwidth.is_finite() {
        violations.push(Violation::NonPositive {
            field: "d2d_bandwidth".into(),
        });
    }
    if !(0.0..=1.0).contains(&cfg.die.dram_io_fraction) {
        violations.push(Violation::DramIoFraction {
            value: cfg.die.dram_io_fraction,
        });
    }
    let max_chiplets = 2 * MAX_CHIPLETS_PER_SIDE;
    if cfg.dram_chiplets_per_die > max_chiplets {
        violations.push(Violation::ChipletCount {
            count: cfg.dram_chiplets_per_die,
            max: max_chiplets,
        });
    }
    if !violations.is_empty() {
        return Verdict {
            feasible: false,
            violations,
        };
    }

    let (slot_w, slot_h) = cfg.slot_footprint_mm();
    let need_w = f64::from(cfg.grid_x) * slot_w;
    let need_h = f64::from(cfg.grid_y) * slot_h;
    // Tolerate float noise when a candidate exactly fills the wafer.
    let fits = |need: f64, have: f64| need <= have * (1.0 + 1e-12);
    if !fits(need_w, cfg.wafer_width_mm) {
        violations.push(Violation::Area {
            axis: Axis::Horizontal,
            required_mm: need_w,
            available_mm: cfg.wafer_width_mm,
        });
    }
    if !fits(need_h, cfg.wafer_height_mm) {
        violations.push(Violation::Area {
            axis: Axis::Vertical,
            required_mm: need_h,
            available_mm: cfg.wafer_height_mm,
        });
    }

    let io_need = cfg.d2d_bandwidth + cfg.dram_io_consumption();
    if io_need > cfg.die.edge_io_bandwidth * (1.0 + 1e-12) {
        violations.push(Violation::IoBudget {
            required: io_need,
            available: cfg.die.edge_io_bandwidth,
        });
    }

    Verdict {
        feasible: violations.is_empty(),
        violations,
    }
}

/// Candidate lists per template field. Enumeration walks the Cartesian
/// product in the field order below, last field fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TemplateRanges {
    pub grid_x: Vec<u32>,
    pub grid_y: Vec<u32>,
    pub dies: Vec<DieSpec>,
    pub dram_chiplets_per_die: Vec<u32>,
    pub drams: Vec<DramChipletSpec>,
    pub d2d_bandwidth: Vec<f64>,
    pub d2d_latency: Vec<f64>,
}

impl TemplateRanges {
    pub fn candidate_count(&self) -> usize {
        self.grid_x.len()
            * self.grid_y.len()
            * self.dies.len()
            * self.dram_chiplets_per_die.len()
            * self.drams.len()
            * self.d2d_bandwidth.len()
            * self.d2d_latency.len()
    }
}

/// Exhaustively enumerates the template and keeps the feasible candidates.
pub fn enumerate_wafer_configs(
    ranges: &TemplateRanges,
    wafer_width_mm: f64,
    wafer_height_mm: f64,
) -> Vec<WaferConfig> {
    let mut out = Vec::new();
    let mut idx = 0usize;
    for &gx in &ranges.grid_x {
        for &gy in &ranges.grid_y {
            for die in &ranges.dies {
                for &chiplets in &ranges.dram_chiplets_per_die {
                    for dram in &ranges.drams {
                        for &bw in &ranges.d2d_bandwidth {
                            for &lat in &ranges.d2d_latency {
                                let cfg = WaferConfig {
                                    name: format!("cand-{idx:05}"),
                                    grid_x: gx,
                                    grid_y: gy,
                                    die: die.clone(),
                                    dram_chiplets_per_die: chiplets,
                                    dram: dram.clone(),
                                    d2d_bandwidth: bw,
                                    d2d_latency: lat,
                                    wafer_width_mm,
                                    wafer_height_mm,
                                    label: ConfigLabel::default(),
                                };
                                idx += 1;
                                if validate_config(&cfg).feasible {
                                    out.push(cfg);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}
