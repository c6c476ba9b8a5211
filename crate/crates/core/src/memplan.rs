//! Parameter and memory accounting, and the choice between keeping
//! half-precision weights resident on the GPU and streaming them from the CPU.
//!
//! Byte counts are `f64`. Every product here is a small-integer multiple of
//! the parameter count and stays exact well past the largest preset.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::hwmodel::{efficiency, HardwareProfile};
use crate::{Error, Result};

const PRESETS_TOML: &str = include_str!("../../../presets/models.toml");

pub const DEFAULT_VOCAB: u64 = 50257;
pub const DEFAULT_SEQ: u64 = 1024;

/// Bytes of model state per parameter under mixed-precision Adam:
/// fp16 weights (2) + fp16 grads (2) + fp32 master, momentum, variance (12).
pub const MODEL_STATE_BYTES_PER_PARAM: f64 = 16.0;

/// Activation bytes kept per token, per hidden unit, per layer without
/// checkpointing. Chosen so a 32-layer, 4096-wide model at one million tokens
/// needs about 1.3 TB.
pub const ACTIVATION_BYTES_PER_ELEMENT: f64 = 10.0;

/// Fraction of GPU memory held back for workspace and fragmentation.
pub const GPU_RESERVE_FRACTION: f64 = 0.35;
/// Fraction of CPU memory held back for the OS and pinned staging buffers.
pub const CPU_RESERVE_FRACTION: f64 = 0.10;

/// Granularity of the largest-model search.
pub const PARAM_SEARCH_STEP: f64 = 1e8;

/// Streaming weights is worthwhile once compute covers this share of a layer.
pub const FLOW_EFFICIENCY_THRESHOLD: f64 = 0.60;

/// Layers of fp16 weights the GPU buffers while streaming (current + prefetch).
pub const FLOW_WINDOW_LAYERS: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub layers: u64,
    pub hidden: u64,
    #[serde(default = "default_vocab")]
    pub vocab: u64,
    #[serde(default = "default_seq")]
    pub seq_default: u64,
}

fn default_vocab() -> u64 {
    DEFAULT_VOCAB
}

fn default_seq() -> u64 {
    DEFAULT_SEQ
}

/// Micro-batch size and sequence length of one training step on one chip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Workload {
    pub bsz: u64,
    pub seq: u64,
}

impl Workload {
    pub fn new(bsz: u64, seq: u64) -> Self {
        Workload { bsz, seq }
    }

    pub fn tokens(&self) -> f64 {
        self.bsz as f64 * self.seq as f64
    }
}

/// A named row of the shipped preset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub nominal: f64,
    pub layers: u64,
    pub hidden: u64,
    #[serde(default)]
    pub vocab: Option<u64>,
}

#[derive(Deserialize)]
struct PresetFile {
    preset: Vec<Preset>,
}

impl Preset {
    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            name: Some(self.name.clone()),
            layers: self.layers,
            hidden: self.hidden,
            vocab: self.vocab.unwrap_or(DEFAULT_VOCAB),
            seq_default: DEFAULT_SEQ,
        }
    }
}

/// All shipped presets, in file order (ascending size).
pub fn presets() -> Vec<Preset> {
    parse_presets(PRESETS_TOML).expect("shipped preset file is valid")
}

pub fn parse_presets(text: &str) -> Result<Vec<Preset>> {
    let file: PresetFile =
        toml::from_str(text).map_err(|e| Error::config(format!("invalid preset file: {e}")))?;
    Ok(file.preset)
}

pub fn load_presets(path: &Path) -> Result<Vec<Preset>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file: PresetFile = toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(file.preset)
}

impl ModelConfig {
    pub fn new(layers: u64, hidden: u64) -> Self {
        ModelConfig {
            name: None,
            layers,
            hidden,
            vocab: DEFAULT_VOCAB,
            seq_default: DEFAULT_SEQ,
        }
    }

    pub fn with_vocab(mut self, vocab: u64) -> Self {
        self.vocab = vocab;
        self
    }

    pub fn preset(name: &str) -> Option<Self> {
        presets()
            .into_iter()
            .find(|p| p.name == name)
            .map(|p| p.config())
    }

    /// Accepts a preset name (`"13b"`) or `layers,hidden` (`"44,3072"`).
    pub fn from_spec_str(spec: &str) -> Result<Self> {
        if let Some(cfg) = Self::preset(spec) {
            return Ok(cfg);
        }
        let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
        if parts.len() == 2 {
            if let (Ok(layers), Ok(hidden)) = (parts[0].parse::<u64>(), parts[1].parse::<u64>()) {
                if hidden == 0 {
                    return Err(Error::config("model: hidden size must be positive"));
                }
                return Ok(ModelConfig::new(layers, hidden));
            }
        }
        Err(Error::config(format!(
            "model: `{spec}` is neither a preset nor `layers,hidden`"
        )))
    }

    pub fn label(&self) -> String {
        match &self.name {
            Some(n) => n.clone(),
            None => format!("{}x{}", self.layers, self.hidden),
        }
    }

    pub fn param_count(&self) -> u64 {
        param_count(self)
    }

    /// Parameter count as `f64`, the unit the cost models work in.
    pub fn params(&self) -> f64 {
        param_count(self) as f64
    }

    /// Parameters in one transformer block.
    pub fn params_per_layer(&self) -> f64 {
        let h = self.hidden as f64;
        12.0 * h * h + 13.0 * h
    }
}

/// `12·L·h² + 13·L·h + V·h`: attention and MLP weights, their biases and
/// layer norms per block, plus the (tied) token embedding.
pub fn param_count(config: &ModelConfig) -> u64 {
    let (l, h, v) = (config.layers, config.hidden, config.vocab);
    12 * l * h * h + 13 * l * h + v * h
}

/// `16·params` bytes of weights, gradients and optimizer state.
pub fn model_state_bytes(params: f64) -> f64 {
    MODEL_STATE_BYTES_PER_PARAM * params
}

/// Activation memory for one step.
///
/// Without checkpointing every layer keeps `C·bsz·seq·h` bytes. With
/// checkpointing only the fp16 layer inputs survive (`2·bsz·seq·h` per layer)
/// plus one layer's full working set during recomputation.
pub fn activation_bytes(config: &ModelConfig, bsz: f64, seq: f64, checkpointing: bool) -> f64 {
    let per_layer_tokens = bsz * seq * config.hidden as f64;
    let layers = config.layers as f64;
    if checkpointing {
        2.0 * per_layer_tokens * layers + ACTIVATION_BYTES_PER_ELEMENT * per_layer_tokens
    } else {
        ACTIVATION_BYTES_PER_ELEMENT * per_layer_tokens * layers
    }
}

pub fn usable_gpu_bytes(profile: &HardwareProfile) -> f64 {
    profile.gpu_mem_bytes * (1.0 - GPU_RESERVE_FRACTION)
}

pub fn usable_cpu_bytes(profile: &HardwareProfile) -> f64 {
    profile.cpu_mem_bytes * (1.0 - CPU_RESERVE_FRACTION)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WeightPolicy {
    /// fp16 weights stay on the GPU.
    Stationary,
    /// fp16 weights stream from the CPU per layer group.
    Flow,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryFootprint {
    pub model_state_bytes: f64,
    pub activation_bytes: f64,
    pub gpu_resident_bytes: f64,
    pub cpu_resident_bytes: f64,
}

impl MemoryFootprint {
    pub fn fits(&self, profile: &HardwareProfile) -> bool {
        self.gpu_resident_bytes <= usable_gpu_bytes(profile)
            && self.cpu_resident_bytes <= usable_cpu_bytes(profile)
    }
}

/// How a multi-chip run splits work.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Parallelism {
    /// Data parallel with weights, gradients and optimizer state sharded 1/K.
    Zero3,
    /// Sequence dimension sharded 1/K with all-to-all attention.
    UlyssesSp,
}

/// Per-chip memory for a K-way sharded run.
///
/// ZeRO-3 keeps each chip's fp16 weight and gradient shard on the GPU
/// (stationary) or only a streaming window (flow); the CPU holds the fp32
/// optimizer shard, plus fp16 weights and fp32 gradient staging under flow.
///
/// Ulysses replicates the fp16 weights. Stationary keeps them on the GPU with
/// the sharded gradient and optimizer state; flow streams weights, keeps one
/// layer's working set on the GPU and offloads checkpoint boundaries to the CPU.
pub fn sharded_placement(
    config: &ModelConfig,
    bsz: f64,
    seq: f64,
    chips: u32,
    parallelism: Parallelism,
    policy: WeightPolicy,
) -> MemoryFootprint {
    let k = chips.max(1) as f64;
    let psi = config.params();
    let h = config.hidden as f64;
    let window = FLOW_WINDOW_LAYERS * 2.0 * config.params_per_layer();
    match parallelism {
        Parallelism::Zero3 => {
            let act = activation_bytes(config, bsz, seq, true);
            let (gpu, cpu) = match policy {
                WeightPolicy::Stationary => (4.0 * psi / k + act, 12.0 * psi / k),
                WeightPolicy::Flow => (window + act, 18.0 * psi / k),
            };
            MemoryFootprint {
                model_state_bytes: model_state_bytes(psi),
                activation_bytes: act,
                gpu_resident_bytes: gpu,
                cpu_resident_bytes: cpu,
            }
        }
        Parallelism::UlyssesSp => {
            let local_seq = seq / k;
            match policy {
                WeightPolicy::Stationary => {
                    let act = activation_bytes(config, bsz, local_seq, true);
                    MemoryFootprint {
                        model_state_bytes: model_state_bytes(psi),
                        activation_bytes: act,
                        gpu_resident_bytes: 2.0 * psi + 14.0 * psi / k + act,
                        cpu_resident_bytes: 0.0,
                    }
                }
                WeightPolicy::Flow => {
                    let working = ACTIVATION_BYTES_PER_ELEMENT * bsz * local_seq * h;
                    let boundaries = 2.0 * bsz * local_seq * h * config.layers as f64;
                    MemoryFootprint {
                        model_state_bytes: model_state_bytes(psi),
                        activation_bytes: working + boundaries,
                        gpu_resident_bytes: window + working,
                        cpu_resident_bytes: 18.0 * psi / k + boundaries,
                    }
                }
            }
        }
    }
}

/// Single-chip placement; the same rules as a one-way ZeRO-3 shard.
pub fn placement(
    config: &ModelConfig,
    bsz: f64,
    seq: f64,
    policy: WeightPolicy,
) -> MemoryFootprint {
    sharded_placement(config, bsz, seq, 1, Parallelism::Zero3, policy)
}

/// Largest batch for which the stationary single-chip placement fits, or 0.
pub fn max_batch_size(config: &ModelConfig, seq: f64, profile: &HardwareProfile) -> u64 {
    let mut bsz = 0u64;
    while bsz < 1 << 16
        && placement(config, (bsz + 1) as f64, seq, WeightPolicy::Stationary).fits(profile)
    {
        bsz += 1;
    }
    bsz
}

/// The choice made by [`choose_weight_policy`] and the values that drove it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyDecision {
    pub policy: WeightPolicy,
    /// fp16 weights plus un-checkpointed activations.
    pub stationary_gpu_bytes: f64,
    pub gpu_budget_bytes: f64,
    pub exceeds_gpu: bool,
    pub efficiency: f64,
    pub efficiency_threshold: f64,
    pub overlappable: bool,
}

impl PolicyDecision {
    /// Recomputes the choice from the recorded values alone.
    pub fn reevaluate(&self) -> WeightPolicy {
        let exceeds = self.stationary_gpu_bytes > self.gpu_budget_bytes;
        let overlappable = self.efficiency >= self.efficiency_threshold;
        if exceeds || overlappable {
            WeightPolicy::Flow
        } else {
            WeightPolicy::Stationary
        }
    }
}

/// Flow when stationary weights and activations overflow the GPU budget or
/// when streaming a layer hides behind its compute; stationary otherwise.
pub fn choose_weight_policy(
    config: &ModelConfig,
    bsz: f64,
    seq: f64,
    profile: &HardwareProfile,
) -> Result<PolicyDecision> {
    if !(bsz > 0.0 && seq > 0.0) || config.hidden == 0 {
        return Err(Error::domain("bsz, seq and hidden must be positive"));
    }
    let psi = config.params();
    let states = model_state_bytes(psi);
    let total = profile.gpu_mem_bytes + profile.cpu_mem_bytes;
    if states > total {
        return Err(Error::infeasible(format!(
            "{}: model state {states:.3e} B exceeds GPU+CPU memory {total:.3e} B",
            config.label()
        )));
    }
    let stationary_gpu_bytes = 2.0 * psi + activation_bytes(config, bsz, seq, false);
    let gpu_budget_bytes = usable_gpu_bytes(profile);
    let eff = efficiency(psi, bsz, seq, profile, None)?;
    let mut decision = PolicyDecision {
        policy: WeightPolicy::Stationary,
        stationary_gpu_bytes,
        gpu_budget_bytes,
        exceeds_gpu: stationary_gpu_bytes > gpu_budget_bytes,
        efficiency: eff,
        efficiency_threshold: FLOW_EFFICIENCY_THRESHOLD,
        overlappable: eff >= FLOW_EFFICIENCY_THRESHOLD,
    };
    decision.policy = decision.reevaluate();
    Ok(decision)
}

/// Placement rules compared by [`max_trainable_params`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PolicyMode {
    /// Everything on the GPU.
    GpuOnly,
    /// fp16 weights and gradients on the GPU, fp32 optimizer state on the CPU.
    OptimOffload,
    /// Weights stream from the CPU when they do not fit.
    Adaptive,
}

impl PolicyMode {
    pub const ALL: [PolicyMode; 3] = [
        PolicyMode::GpuOnly,
        PolicyMode::OptimOffload,
        PolicyMode::Adaptive,
    ];
}

/// Whether a model of `psi` parameters fits under `mode`, ignoring activations
/// (the reserve fractions stand in for them).
pub fn fits_mode(psi: f64, profile: &HardwareProfile, mode: PolicyMode) -> bool {
    let gpu = usable_gpu_bytes(profile);
    let cpu = usable_cpu_bytes(profile);
    let gpu_only = model_state_bytes(psi) <= gpu;
    let offload = gpu_only || (4.0 * psi <= gpu && 12.0 * psi <= cpu);
    match mode {
        PolicyMode::GpuOnly => gpu_only,
        PolicyMode::OptimOffload => offload,
        // flow keeps fp16 weights, fp32 master/momentum/variance and fp32
        // gradient staging in CPU memory; GPU memory absorbs what spills over
        PolicyMode::Adaptive => offload || 18.0 * psi <= gpu + cpu,
    }
}

/// Largest multiple of [`PARAM_SEARCH_STEP`] that fits under `mode`.
pub fn max_trainable_params(profile: &HardwareProfile, mode: PolicyMode) -> u64 {
    let ceiling =
        ((profile.gpu_mem_bytes + profile.cpu_mem_bytes) / PARAM_SEARCH_STEP).ceil() as u64 + 1;
    let (mut lo, mut hi) = (0u64, ceiling);
    // invariant: lo steps fit (trivially for 0), hi steps do not
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fits_mode(mid as f64 * PARAM_SEARCH_STEP, profile, mode) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo * PARAM_SEARCH_STEP as u64
}
