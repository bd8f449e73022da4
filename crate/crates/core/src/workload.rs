//! Dense transformer workloads as per-layer operator graphs.
//!
//! One canonical layer is expanded in forward execution order:
//!
//! ```text
//! LayerNorm -> QKV-GEMM -> FlashAttention -> Proj-GEMM
//!           -> LayerNorm -> MLP-Up-GEMM -> Activation -> MLP-Down-GEMM
//! ```
//!
//! Every operator records the activation it must retain for its backward
//! pass. Activations are FP16; model state is 16 bytes per parameter
//! (FP16 weights and gradients, FP32 master weights and two Adam moments).

use serde::{Deserialize, Serialize};

use crate::{Error, Result, FP16_BYTES};

/// Bytes of training state per parameter.
pub const MODEL_STATE_BYTES_PER_PARAM: f64 = 16.0;

/// Per-die model-state allocations are rounded up to this quantum.
pub const ALIGNMENT_BYTES: u64 = 256;

/// FP32 softmax statistics kept by the fused attention kernel.
const SOFTMAX_STAT_BYTES: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub name: String,
    pub num_layers: u32,
    pub hidden_size: u64,
    pub num_heads: u64,
    pub seq_len: u64,
    pub vocab_size: u64,
    /// Derived from the layer shapes when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_count: Option<f64>,
    /// Mixture-of-experts models are not supported.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_experts: Option<u32>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(e) = self.num_experts {
            if e > 1 {
                return Err(Error::UnsupportedModel(format!(
                    "{}: mixture-of-experts graphs ({e} experts) are not supported",
                    self.name
                )));
            }
        }
        if self.num_layers == 0
            || self.hidden_size == 0
            || self.num_heads == 0
            || self.seq_len == 0
            || self.vocab_size == 0
        {
            return Err(Error::InvalidModel(format!(
                "{}: all dimensions must be positive",
                self.name
            )));
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::InvalidModel(format!(
                "{}: hidden_size {} not divisible by num_heads {}",
                self.name, self.hidden_size, self.num_heads
            )));
        }
        if let Some(p) = self.param_count {
            if !(p > 0.0) {
                return Err(Error::InvalidModel(format!(
                    "{}: param_count must be positive",
                    self.name
                )));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> u64 {
        self.hidden_size / self.num_heads
    }

    /// Given parameter count, or `L·(12H² + 13H) + V·H + S·H`.
    pub fn params(&self) -> f64 {
        self.param_count.unwrap_or_else(|| {
            let h = self.hidden_size as f64;
            f64::from(self.num_layers) * (12.0 * h * h + 13.0 * h)
                + (self.vocab_size as f64) * h
                + (self.seq_len as f64) * h
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OpKind {
    LayerNorm,
    QkvGemm,
    FlashAttention,
    ProjGemm,
    MlpUpGemm,
    MlpDownGemm,
    ActivationFn,
}

impl OpKind {
    pub fn is_gemm(self) -> bool {
        matches!(
            self,
            OpKind::QkvGemm | OpKind::ProjGemm | OpKind::MlpUpGemm | OpKind::MlpDownGemm
        )
    }

    pub fn is_elementwise(self) -> bool {
        matches!(self, OpKind::LayerNorm | OpKind::ActivationFn)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::LayerNorm => "layer-norm",
            OpKind::QkvGemm => "qkv-gemm",
            OpKind::FlashAttention => "flash-attention",
            OpKind::ProjGemm => "proj-gemm",
            OpKind::MlpUpGemm => "mlp-up-gemm",
            OpKind::MlpDownGemm => "mlp-down-gemm",
            OpKind::ActivationFn => "activation-fn",
        }
    }

    /// FLOPs per element for the elementwise kinds.
    fn elementwise_flops(self) -> f64 {
        match self {
            OpKind::LayerNorm => 5.0,
            OpKind::ActivationFn => 8.0,
            _ => 0.0,
        }
    }
}

/// Operator dimensions.
///
/// * GEMM: `m × k` times `k × n`.
/// * Elementwise: `m` rows of width `n` (`k = 1`).
/// * Fused attention: `m = batch·heads·queries`, `k` the head dim, `n` the
///   key length, `batch` the number of batch-head pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OpShape {
    pub m: u64,
    pub k: u64,
    pub n: u64,
    pub batch: u64,
}

impl OpShape {
    pub fn gemm(m: u64, k: u64, n: u64) -> Self {
        Self { m, k, n, batch: 1 }
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0 || self.k == 0 || self.n == 0 || self.batch == 0
    }
}

/// Forward FLOPs of an operator of the given kind and shape.
pub fn forward_flops(kind: OpKind, shape: &OpShape) -> f64 {
    let (m, k, n) = (shape.m as f64, shape.k as f64, shape.n as f64);
    if kind.is_gemm() {
        2.0 * m * k * n
    } else if kind == OpKind::FlashAttention {
        // QK^T and PV, each 2·rows·keys·head_dim.
        4.0 * m * n * k
    } else {
        kind.elementwise_flops() * m * n
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorNode {
    /// Position within the layer, in forward order.
    pub index: usize,
    pub kind: OpKind,
    pub shape: OpShape,
    pub fwd_flops: f64,
    pub bwd_flops: f64,
    /// Input activation retained for backward, bytes per microbatch.
    pub checkpoint_bytes: u64,
    pub output_bytes: u64,
    /// An all-reduce follows this operator under hidden-dim tensor parallelism.
    pub tp_comm_after: bool,
}

/// Tensor-parallel partition factors over batch, sequence, hidden and
/// reduction dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SplitFactors {
    pub b: u64,
    pub s: u64,
    pub h: u64,
    pub k: u64,
}

impl SplitFactors {
    pub const NONE: SplitFactors = SplitFactors {
        b: 1,
        s: 1,
        h: 1,
        k: 1,
    };

    pub fn product(&self) -> u64 {
        self.b * self.s * self.h * self.k
    }

    /// Whether the factors evenly partition the model at this microbatch.
    pub fn divides(&self, model: &ModelConfig, microbatch: u64) -> bool {
        self.b >= 1
            && self.s >= 1
            && self.h >= 1
            && self.k >= 1
            && microbatch % self.b == 0
            && model.seq_len % self.s == 0
            && model.num_heads % (self.h * self.k) == 0
    }
}

impl Default for SplitFactors {
    fn default() -> Self {
        Self::NONE
    }
}

/// Expands one canonical layer for a microbatch of `microbatch` sequences.
pub fn build_operator_graph(model: &ModelConfig, microbatch: u64) -> Result<Vec<OperatorNode>> {
    build_sharded_graph(model, microbatch, SplitFactors::NONE)
}

/// Same as [`build_operator_graph`] with per-die shapes under a TP split.
/// Checkpoint and output bytes are divided by the full TP degree.
pub fn build_sharded_graph(
    model: &ModelConfig,
    microbatch: u64,
    f: SplitFactors,
) -> Result<Vec<OperatorNode>> {
    model.validate()?;
    if microbatch != 0 && !f.divides(model, microbatch) {
        return Err(Error::InvalidArgument(format!(
            "split {f:?} does not divide {} at microbatch {microbatch}",
            model.name
        )));
    }
    let tp = f.product();
    let b = microbatch;
    let s = model.seq_len;
    let h = model.hidden_size;
    let heads = model.num_heads;
    let dh = model.head_dim();
    let tokens = b * s / (f.b * f.s);
    let hk = f.h * f.k;

    let act = |width: u64| b * s * width * FP16_BYTES;
    let shard = |bytes: u64| bytes.div_ceil(tp);

    let ln_shape = OpShape {
        m: tokens,
        k: 1,
        n: h / hk,
        batch: 1,
    };
    let flash_batch = b * heads / (f.b * hk);
    let flash_shape = OpShape {
        m: flash_batch * (s / f.s),
        k: dh,
        n: s,
        batch: flash_batch,
    };
    let flash_ckpt = 3 * act(h) + b * heads * s * SOFTMAX_STAT_BYTES;

    let specs: [(OpKind, OpShape, u64, u64, bool); 8] = [
        (OpKind::LayerNorm, ln_shape, act(h), act(h), false),
        (
            OpKind::QkvGemm,
            OpShape::gemm(tokens, h / f.k, 3 * h / f.h),
            act(h),
            act(3 * h),
            false,
        ),
        (OpKind::FlashAttention, flash_shape, flash_ckpt, act(h), false),
        (
            OpKind::ProjGemm,
            OpShape::gemm(tokens, h / hk, h),
            act(h),
            act(h),
            true,
        ),
        (OpKind::LayerNorm, ln_shape, act(h), act(h), false),
        (
            OpKind::MlpUpGemm,
            OpShape::gemm(tokens, h / f.k, 4 * h / f.h),
            act(h),
            act(4 * h),
            false,
        ),
        (
            OpKind::ActivationFn,
            OpShape {
                m: tokens,
                k: 1,
                n: 4 * h / hk,
                batch: 1,
            },
            act(4 * h),
            act(4 * h),
            false,
        ),
        (
            OpKind::MlpDownGemm,
            OpShape::gemm(tokens, 4 * h / hk, h),
            act(4 * h),
            act(h),
            true,
        ),
    ];

    Ok(specs
        .into_iter()
        .enumerate()
        .map(|(index, (kind, shape, ckpt, out, comm))| {
            let fwd = forward_flops(kind, &shape);
            OperatorNode {
                index,
                kind,
                shape,
                fwd_flops: fwd,
                bwd_flops: 2.0 * fwd,
                checkpoint_bytes: shard(ckpt),
                output_bytes: shard(out),
                tp_comm_after: comm,
            }
        })
        .collect())
}

/// Per-die model state (weights, gradients, optimizer states), aligned.
pub fn model_state_bytes(model: &ModelConfig, tp: u64, pp: u64) -> u64 {
    let shards = (tp.max(1) * pp.max(1)) as f64;
    let raw = (MODEL_STATE_BYTES_PER_PARAM * model.params() / shards).ceil() as u64;
    raw.div_ceil(ALIGNMENT_BYTES) * ALIGNMENT_BYTES
}

/// Checkpoint bytes held by one die of a stage: the stored operators'
/// retained activations, for every layer in the stage and every live
/// microbatch. `graph` is the unsharded layer graph.
pub fn checkpoint_bytes_per_stage(
    graph: &[OperatorNode],
    stored: impl Fn(usize) -> bool,
    layers_in_stage: u32,
    tp: u64,
    live_microbatches: u64,
) -> u64 {
    let per_layer: u64 = graph
        .iter()
        .filter(|op| stored(op.index))
        .map(|op| op.checkpoint_bytes.div_ceil(tp.max(1)))
        .sum();
    per_layer * u64::from(layers_in_stage) * live_microbatches
}

/// Splits `num_layers` into `pp` contiguous stages; earlier stages take the
/// remainder.
pub fn split_layers(num_layers: u32, pp: u32) -> Vec<u32> {
    let pp = pp.max(1);
    let base = num_layers / pp;
    let extra = num_layers % pp;
    (0..pp).map(|s| base + u32::from(s < extra)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingWorkload {
    pub model: ModelConfig,
    pub microbatch_size: u64,
    pub num_microbatches: u64,
    /// Weights + gradients + optimizer states, whole model.
    pub model_p_bytes: u64,
    /// Checkpoint bytes of one microbatch across all layers, unsharded.
    pub checkpoint_bytes_total: u64,
}

impl TrainingWorkload {
    pub fn new(model: ModelConfig, microbatch_size: u64, num_microbatches: u64) -> Result<Self> {
        model.validate()?;
        if num_microbatches == 0 {
            return Err(Error::InvalidArgument(
                "num_microbatches must be at least 1".into(),
            ));
        }
        let graph = build_operator_graph(&model, microbatch_size)?;
        let per_layer: u64 = graph.iter().map(|o| o.checkpoint_bytes).sum();
        Ok(Self {
            model_p_bytes: (MODEL_STATE_BYTES_PER_PARAM * model.params()).ceil() as u64,
            checkpoint_bytes_total: per_layer * u64::from(model.num_layers),
            model,
            microbatch_size,
            num_microbatches,
        })
    }

    pub fn graph(&self) -> Result<Vec<OperatorNode>> {
        build_operator_graph(&self.model, self.microbatch_size)
    }

    /// Stage-input activation per microbatch (unsharded).
    pub fn boundary_bytes(&self) -> u64 {
        self.microbatch_size * self.model.seq_len * self.model.hidden_size * FP16_BYTES
    }

    /// Aggregate checkpoint footprint of a store-everything 1F1B pipeline
    /// with `pp` stages: stage `s` keeps `pp - s` microbatches.
    pub fn pipeline_checkpoint_bytes(&self, pp: u32) -> u64 {
        let per_layer = self.checkpoint_bytes_total / u64::from(self.model.num_layers);
        split_layers(self.model.num_layers, pp)
            .iter()
            .enumerate()
            .map(|(s, &layers)| {
                let live = (u64::from(pp) - s as u64).min(self.num_microbatches);
                per_layer * u64::from(layers) * live
            })
            .sum()
    }

    /// Forward + backward FLOPs of one iteration, excluding recomputation.
    pub fn useful_flops(&self) -> Result<f64> {
        let graph = self.graph()?;
        let per_layer: f64 = graph.iter().map(|o| o.fwd_flops + o.bwd_flops).sum();
        Ok(per_layer * f64::from(self.model.num_layers) * self.num_microbatches as f64)
    }
}
