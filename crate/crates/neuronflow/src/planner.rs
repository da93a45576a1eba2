//! Offline execution planning.
//!
//! Profiles activation frequencies from a trace, classifies neurons
//! into hot and cold sets per batch size under the I/O-hiding
//! constraint (hot weights must stream in no slower than attention
//! computes), and emits a serialized plan consumed by the cache, the
//! pipeline and the engine.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cache::CacheConfig;
use crate::error::{Error, Result};
use crate::model::{ActivationTrace, Dtype, ModelSpec};
use crate::quant::bundle_bytes;
use crate::storage::{seq_load_time, CoreKind, IoModelParams};

/// Activation statistics at one batch size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    /// Per-neuron fraction of profiled tokens that activated it.
    pub frequency: Vec<f64>,
    pub token_count: u64,
}

/// Per-batch-size activation frequencies over the FFN neurons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronStats {
    pub d_ffn: usize,
    pub per_batch: BTreeMap<u32, BatchStats>,
}

/// Affine attention-time model: `(base_s + per_seq_s * batch)` scaled
/// by `(d_model / 4096)^2`. A declared calibration input, not a
/// measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionTimeModel {
    pub base_s: f64,
    pub per_seq_s: f64,
}

impl AttentionTimeModel {
    pub fn time(&self, d_model: usize, batch: u32) -> f64 {
        let scale = (d_model as f64 / 4096.0).powi(2);
        ((self.base_s + self.per_seq_s * batch as f64) * scale).max(0.0)
    }
}

/// Calibrated description of the target device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    /// Per-core compute throughputs, elements per second.
    pub big_throughput: f64,
    pub mid_throughput: f64,
    pub little_throughput: f64,
    pub npu_throughput: f64,
    pub n_big: usize,
    pub n_mid: usize,
    pub n_little: usize,
    /// Memory bandwidth caps, GB/s.
    pub cpu_only_bw_gbps: f64,
    pub npu_only_bw_gbps: f64,
    pub combined_bw_gbps: f64,
    pub io: IoModelParams,
    pub attention: AttentionTimeModel,
}

impl HardwareProfile {
    pub fn validate(&self) -> Result<()> {
        let ts = [
            self.big_throughput,
            self.mid_throughput,
            self.little_throughput,
            self.npu_throughput,
        ];
        if ts.iter().any(|&t| t <= 0.0) {
            return Err(Error::constraint("core throughputs must be positive".to_string()));
        }
        if self.combined_bw_gbps < self.cpu_only_bw_gbps.max(self.npu_only_bw_gbps) {
            return Err(Error::constraint(
                "combined bandwidth cap below a solo cap".to_string(),
            ));
        }
        if self.n_big + self.n_mid + self.n_little == 0 {
            return Err(Error::constraint("at least one CPU core required".to_string()));
        }
        self.io.validate()
    }

    /// Default profile for a flagship phone SoC: one prime core, three
    /// performance cores, four efficiency cores, an NPU several times
    /// faster than the whole CPU cluster, and the measured bandwidth
    /// caps (CPU-only 43.9, NPU-only 56, combined 59.6 GB/s).
    pub fn default_profile() -> Self {
        HardwareProfile {
            big_throughput: 8.0e9,
            mid_throughput: 6.0e9,
            little_throughput: 2.5e9,
            npu_throughput: 40.0e9,
            n_big: 1,
            n_mid: 3,
            n_little: 4,
            cpu_only_bw_gbps: 43.9,
            npu_only_bw_gbps: 56.0,
            combined_bw_gbps: 59.6,
            io: crate::storage::default_profile(),
            attention: AttentionTimeModel { base_s: 2.0e-3, per_seq_s: 1.0e-3 },
        }
    }
}

/// Computes per-neuron activation frequencies, partitioned by batch
/// size: each trace entry contributes to its own batch size only.
pub fn profile(trace: &ActivationTrace, d_ffn: usize) -> Result<NeuronStats> {
    if trace.entries.is_empty() {
        return Err(Error::constraint("cannot profile an empty trace".to_string()));
    }
    let mut counts: BTreeMap<u32, (Vec<u64>, u64)> = BTreeMap::new();
    for e in &trace.entries {
        let (hits, n) = counts.entry(e.batch_size).or_insert_with(|| (vec![0u64; d_ffn], 0));
        *n += 1;
        for &i in &e.activated {
            let i = i as usize;
            if i >= d_ffn {
                return Err(Error::IndexOutOfRange(format!(
                    "trace activates neuron {i} but d_ffn is {d_ffn}"
                )));
            }
            hits[i] += 1;
        }
    }
    let per_batch = counts
        .into_iter()
        .map(|(b, (hits, n))| {
            let frequency = hits.iter().map(|&h| h as f64 / n as f64).collect();
            (b, BatchStats { frequency, token_count: n })
        })
        .collect();
    Ok(NeuronStats { d_ffn, per_batch })
}

/// Hot/cold split at one batch size.
#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    /// Sorted by descending activation frequency (ascending index on
    /// ties).
    pub hot_set: Vec<u32>,
    pub cold_set: Vec<u32>,
    /// Set when even a single hot neuron would violate the I/O-hiding
    /// constraint, leaving the hot set empty.
    pub infeasible: bool,
}

/// Bytes of one neuron's weights (gate row, up row, down column).
pub fn neuron_bytes(d_model: usize, dtype: Dtype) -> Result<u64> {
    match dtype {
        Dtype::Fp32 => Ok(3 * 4 * d_model as u64),
        Dtype::Fp16 | Dtype::Int4Group => Ok(bundle_bytes(d_model, dtype)?.bundle),
        Dtype::Int4Mixed => Err(Error::constraint(
            "mixed int4 has no fixed per-neuron size".to_string(),
        )),
    }
}

fn frequency_order(freq: &[f64]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..freq.len() as u32).collect();
    order.sort_by(|&a, &b| {
        freq[b as usize]
            .partial_cmp(&freq[a as usize])
            .unwrap()
            .then(a.cmp(&b))
    });
    order
}

/// Greedy hot/cold classification: take neurons in descending
/// frequency order while the sequential load of the hot weights still
/// fits within one attention block.
pub fn classify(
    stats: &NeuronStats,
    hw: &HardwareProfile,
    b: u32,
    model: &ModelSpec,
) -> Result<Classification> {
    hw.validate()?;
    let batch = stats
        .per_batch
        .get(&b)
        .ok_or_else(|| Error::constraint(format!("no profiled data for batch size {b}")))?;
    if batch.frequency.len() != stats.d_ffn {
        return Err(Error::ShapeMismatch(format!(
            "frequency vector has {} entries, d_ffn is {}",
            batch.frequency.len(),
            stats.d_ffn
        )));
    }
    let per_neuron = neuron_bytes(model.d_model, model.dtype)?;
    let budget = hw.attention.time(model.d_model, b);
    // seq_load_time is monotone in bytes, so the maximal feasible
    // prefix can be found by bisection.
    let fits = |k: u64| seq_load_time(&hw.io, k * per_neuron, CoreKind::Big) <= budget;
    let (mut lo, mut hi) = (0u64, stats.d_ffn as u64);
    while lo < hi {
        let mid = (lo + hi + 1) / 2;
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    let k = lo as usize;
    let order = frequency_order(&batch.frequency);
    let hot_set = order[..k].to_vec();
    let mut cold_set = order[k..].to_vec();
    cold_set.sort_unstable();
    Ok(Classification { hot_set, cold_set, infeasible: k == 0 && stats.d_ffn > 0 })
}

/// Target NPU fraction: 0.5 at batch 1 rising linearly to 0.7 at batch
/// 32, clamped outside that span.
pub fn npu_target_fraction(b: u32) -> f64 {
    let b = b.clamp(1, 32) as f64;
    0.5 + 0.2 * (b - 1.0) / 31.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    /// Hot neuron indices, descending activation frequency.
    pub hot_set: Vec<u32>,
    /// |hot_set| / d_ffn.
    pub npu_fraction: f64,
    pub infeasible: bool,
}

/// Shape and load cost of one pre-built static NPU graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphDescriptor {
    pub batch: u32,
    pub hot_rows: u32,
    pub d_model: u32,
    /// Graph descriptors are small; loading one is ~10KB of I/O.
    pub load_bytes: u64,
}

pub const NPU_GRAPH_BYTES: u64 = 10 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub version: u32,
    pub d_model: usize,
    pub d_ffn: usize,
    pub dtype: Dtype,
    pub cache_budget: CacheConfig,
    pub entries: BTreeMap<u32, PlanEntry>,
    pub npu_graph_table: BTreeMap<u32, GraphDescriptor>,
}

pub const PLAN_VERSION: u32 = 1;

impl ExecutionPlan {
    pub fn entry(&self, b: u32) -> Result<&PlanEntry> {
        self.entries
            .get(&b)
            .ok_or_else(|| Error::constraint(format!("plan has no entry for batch size {b}")))
    }
}

/// Builds the plan for a set of batch sizes. The hot count at each b is
/// the smaller of the feasibility-derived capacity and the batch-indexed
/// NPU target; cache budgets are carved from `cache_total_bytes` (a
/// small fixed slice, hot sized to the largest hot set, remainder cold).
pub fn generate_plan(
    stats: &NeuronStats,
    hw: &HardwareProfile,
    model: &ModelSpec,
    batch_sizes: &[u32],
    cache_total_bytes: u64,
) -> Result<ExecutionPlan> {
    if batch_sizes.is_empty() {
        return Err(Error::constraint("batch_sizes must be non-empty".to_string()));
    }
    let per_neuron = neuron_bytes(model.d_model, model.dtype)?;
    let mut entries = BTreeMap::new();
    let mut graphs = BTreeMap::new();
    let mut max_hot_bytes = 0u64;
    for &b in batch_sizes {
        let cls = classify(stats, hw, b, model)?;
        let target = (npu_target_fraction(b) * stats.d_ffn as f64).round() as usize;
        let k = cls.hot_set.len().min(target);
        let hot_set = cls.hot_set[..k].to_vec();
        max_hot_bytes = max_hot_bytes.max(k as u64 * per_neuron * model.n_layers as u64);
        graphs.insert(
            b,
            GraphDescriptor {
                batch: b,
                hot_rows: k as u32,
                d_model: model.d_model as u32,
                load_bytes: NPU_GRAPH_BYTES,
            },
        );
        entries.insert(
            b,
            PlanEntry {
                hot_set,
                npu_fraction: k as f64 / stats.d_ffn as f64,
                infeasible: cls.infeasible,
            },
        );
    }
    let fixed = cache_total_bytes / 8;
    let hot = max_hot_bytes.min((cache_total_bytes - fixed) * 3 / 4);
    let cold = cache_total_bytes - fixed - hot;
    let cache_budget = CacheConfig {
        total_bytes: cache_total_bytes,
        fixed_bytes: fixed,
        hot_bytes: hot,
        cold_bytes: cold,
    };
    cache_budget.validate()?;
    Ok(ExecutionPlan {
        version: PLAN_VERSION,
        d_model: model.d_model,
        d_ffn: model.d_ffn,
        dtype: model.dtype,
        cache_budget,
        entries,
        npu_graph_table: graphs,
    })
}

/// Writes the plan as versioned, key-ordered JSON (byte-deterministic
/// for a given plan).
pub fn write_plan(path: &Path, plan: &ExecutionPlan) -> Result<()> {
    let json = serde_json::to_string_pretty(plan)
        .map_err(|e| Error::internal(format!("plan serialization failed: {e}")))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn read_plan(path: &Path) -> Result<ExecutionPlan> {
    let text = fs::read_to_string(path)?;
    let plan: ExecutionPlan =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("bad plan file: {e}")))?;
    if plan.version != PLAN_VERSION {
        return Err(Error::Parse(format!("unsupported plan version {}", plan.version)));
    }
    Ok(plan)
}

pub fn write_profile(path: &Path, hw: &HardwareProfile) -> Result<()> {
    let text = toml::to_string(hw)
        .map_err(|e| Error::internal(format!("profile serialization failed: {e}")))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn read_profile(path: &Path) -> Result<HardwareProfile> {
    let text = fs::read_to_string(path)?;
    let hw: HardwareProfile =
        toml::from_str(&text).map_err(|e| Error::Parse(format!("bad profile file: {e}")))?;
    hw.validate()?;
    Ok(hw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_trace, SkewParams, TraceEntry};

    fn spec(d_model: usize, d_ffn: usize, dtype: Dtype) -> ModelSpec {
        ModelSpec { n_layers: 4, d_model, d_ffn, dtype, seed: 11 }
    }

    #[test]
    fn profile_always_on_neuron() {
        let trace = ActivationTrace {
            entries: (0..10)
                .map(|t| TraceEntry {
                    token_index: t,
                    batch_size: 1,
                    layer_index: 0,
                    activated: vec![3],
                })
                .collect(),
        };
        let stats = profile(&trace, 8).unwrap();
        let b1 = &stats.per_batch[&1];
        assert_eq!(b1.frequency[3], 1.0);
        assert_eq!(b1.frequency[0], 0.0);
        assert_eq!(b1.token_count, 10);
    }

    #[test]
    fn profile_partitions_by_batch_size() {
        let mk = |b, act: Vec<u32>| TraceEntry {
            token_index: 0,
            batch_size: b,
            layer_index: 0,
            activated: act,
        };
        let trace = ActivationTrace { entries: vec![mk(1, vec![0]), mk(2, vec![1])] };
        let stats = profile(&trace, 4).unwrap();
        assert_eq!(stats.per_batch[&1].frequency, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(stats.per_batch[&2].frequency, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn profile_uniform_trace_matches_base_rate() {
        // A synthetic skewed trace at batch 1: per-neuron frequencies
        // must stay within a loose binomial envelope of the generative
        // probabilities, checked via the mean activated fraction.
        let m = spec(64, 512, Dtype::Int4Group);
        let skew = SkewParams::measured();
        let trace = generate_trace(&m, &skew, 200, &vec![1; 200]).unwrap();
        let stats = profile(&trace, 512).unwrap();
        let mean: f64 =
            stats.per_batch[&1].frequency.iter().sum::<f64>() / 512.0;
        assert!((mean - skew.base_sparsity).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn profile_empty_trace_rejected() {
        assert!(profile(&ActivationTrace::default(), 4).is_err());
    }

    fn stats_with_rank_order(d_ffn: usize, b: u32) -> NeuronStats {
        // frequency strictly decreasing in index
        let frequency = (0..d_ffn).map(|i| 1.0 - i as f64 / (2 * d_ffn) as f64).collect();
        let mut per_batch = BTreeMap::new();
        per_batch.insert(b, BatchStats { frequency, token_count: 100 });
        NeuronStats { d_ffn, per_batch }
    }

    /// Attention model whose batch-1 and batch-32 times equal given
    /// seconds (inverts the (d_model/4096)^2 scale).
    fn attention_through(d_model: usize, t1: f64, t32: f64) -> AttentionTimeModel {
        let scale = (d_model as f64 / 4096.0).powi(2);
        let per_seq_s = (t32 - t1) / 31.0 / scale;
        let base_s = t1 / scale - per_seq_s;
        AttentionTimeModel { base_s, per_seq_s }
    }

    #[test]
    fn classify_hot_fraction_tracks_attention_budget() {
        let m = spec(1024, 2048, Dtype::Int4Group);
        let per_neuron = neuron_bytes(1024, Dtype::Int4Group).unwrap();
        let mut hw = HardwareProfile::default_profile();
        // Budget for ~1% of neurons at b=1 and ~75% at b=32.
        let t1 = seq_load_time(&hw.io, (2048 / 100) * per_neuron, CoreKind::Big);
        let t32 = seq_load_time(&hw.io, (2048 * 3 / 4) * per_neuron, CoreKind::Big);
        hw.attention = attention_through(1024, t1, t32);

        let c1 = classify(&stats_with_rank_order(2048, 1), &hw, 1, &m).unwrap();
        let frac1 = c1.hot_set.len() as f64 / 2048.0;
        assert!((0.005..0.02).contains(&frac1), "batch-1 hot fraction {frac1}");

        let c32 = classify(&stats_with_rank_order(2048, 32), &hw, 32, &m).unwrap();
        let frac32 = c32.hot_set.len() as f64 / 2048.0;
        assert!((0.70..0.80).contains(&frac32), "batch-32 hot fraction {frac32}");

        // Greedy takes the most frequent first; ranks equal indices here.
        assert_eq!(c1.hot_set, (0..c1.hot_set.len() as u32).collect::<Vec<_>>());
        // Disjoint and exhaustive.
        let mut all: Vec<u32> = c1.hot_set.iter().chain(&c1.cold_set).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..2048).collect::<Vec<_>>());
    }

    #[test]
    fn classify_unbounded_attention_makes_all_hot() {
        let m = spec(256, 64, Dtype::Fp16);
        let mut hw = HardwareProfile::default_profile();
        hw.attention = AttentionTimeModel { base_s: 1e12, per_seq_s: 0.0 };
        let c = classify(&stats_with_rank_order(64, 1), &hw, 1, &m).unwrap();
        assert_eq!(c.hot_set.len(), 64);
        assert!(c.cold_set.is_empty());
        assert!(!c.infeasible);
    }

    #[test]
    fn classify_zero_attention_flags_infeasible() {
        let m = spec(256, 64, Dtype::Fp16);
        let mut hw = HardwareProfile::default_profile();
        hw.attention = AttentionTimeModel { base_s: 0.0, per_seq_s: 0.0 };
        let c = classify(&stats_with_rank_order(64, 1), &hw, 1, &m).unwrap();
        assert!(c.hot_set.is_empty());
        assert!(c.infeasible);
    }

    #[test]
    fn classify_tie_break_ascending_index() {
        let mut per_batch = BTreeMap::new();
        per_batch.insert(1, BatchStats { frequency: vec![0.5; 6], token_count: 1 });
        let stats = NeuronStats { d_ffn: 6, per_batch };
        let m = spec(256, 6, Dtype::Fp16);
        let mut hw = HardwareProfile::default_profile();
        let per_neuron = neuron_bytes(256, Dtype::Fp16).unwrap();
        let t = seq_load_time(&hw.io, 3 * per_neuron, CoreKind::Big);
        hw.attention = AttentionTimeModel { base_s: t * (4096.0f64 / 256.0).powi(2), per_seq_s: 0.0 };
        let c = classify(&stats, &hw, 1, &m).unwrap();
        assert_eq!(c.hot_set, vec![0, 1, 2]);
    }

    #[test]
    fn plan_npu_fraction_endpoints() {
        let m = spec(1024, 2048, Dtype::Int4Group);
        let mut hw = HardwareProfile::default_profile();
        hw.attention = AttentionTimeModel { base_s: 1e6, per_seq_s: 0.0 }; // never binding
        let mut stats = stats_with_rank_order(2048, 1);
        stats
            .per_batch
            .insert(32, stats.per_batch[&1].clone());
        let plan = generate_plan(&stats, &hw, &m, &[1, 32], 64 * 1024 * 1024).unwrap();
        assert!((plan.entry(1).unwrap().npu_fraction - 0.5).abs() < 1e-3);
        assert!((plan.entry(32).unwrap().npu_fraction - 0.7).abs() < 1e-3);
        // Invariant: npu_fraction * d_ffn = |hot_set|.
        for e in plan.entries.values() {
            assert_eq!((e.npu_fraction * 2048.0).round() as usize, e.hot_set.len());
        }
    }

    #[test]
    fn plan_feasibility_holds_for_every_entry() {
        let m = spec(1024, 2048, Dtype::Int4Group);
        let per_neuron = neuron_bytes(1024, Dtype::Int4Group).unwrap();
        let mut hw = HardwareProfile::default_profile();
        let t1 = seq_load_time(&hw.io, 100 * per_neuron, CoreKind::Big);
        let t32 = seq_load_time(&hw.io, 1000 * per_neuron, CoreKind::Big);
        hw.attention = attention_through(1024, t1, t32);
        let mut stats = stats_with_rank_order(2048, 1);
        for b in [2u32, 4, 8, 16, 32] {
            stats.per_batch.insert(b, stats.per_batch[&1].clone());
        }
        let plan = generate_plan(&stats, &hw, &m, &[1, 2, 4, 8, 16, 32], 64 * 1024 * 1024).unwrap();
        let mut prev_len = 0usize;
        for (&b, e) in &plan.entries {
            let load = seq_load_time(&hw.io, e.hot_set.len() as u64 * per_neuron, CoreKind::Big);
            assert!(load <= hw.attention.time(1024, b) + 1e-12, "b={b}");
            assert!(e.hot_set.len() >= prev_len, "hot set shrank at b={b}");
            prev_len = e.hot_set.len();
        }
    }

    #[test]
    fn plan_round_trips_and_is_deterministic() {
        let m = spec(256, 64, Dtype::Fp16);
        let hw = HardwareProfile::default_profile();
        let stats = stats_with_rank_order(64, 1);
        let plan = generate_plan(&stats, &hw, &m, &[1], 1024 * 1024).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.json");
        let p2 = dir.path().join("b.json");
        write_plan(&p1, &plan).unwrap();
        write_plan(&p2, &generate_plan(&stats, &hw, &m, &[1], 1024 * 1024).unwrap()).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let back = read_plan(&p1).unwrap();
        assert_eq!(back, plan);
        assert_eq!(back.cache_budget.total_bytes, 1024 * 1024);
    }

    #[test]
    fn profile_toml_round_trip() {
        let hw = HardwareProfile::default_profile();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("profile.toml");
        write_profile(&path, &hw).unwrap();
        let back = read_profile(&path).unwrap();
        assert_eq!(back, hw);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("[io]"));
    }
}
