//! End-to-end decode and prefill simulation.
//!
//! Composes the planner, cache, storage model and pipeline scheduler
//! into a token loop: each decode token runs an attention block (under
//! which hot prefetches and NPU graph loads overlap), then the FFN as a
//! pipeline of neuron-cluster tasks across all layers with
//! cache-resolved residency. Policy flags gate the individual
//! optimizations (neuron bundling, the segmented cache, cluster-level
//! pipelining, CPU/NPU hybrid execution) so ablations can toggle each
//! one independently. Everything is deterministic in the model seed.

use std::collections::HashSet;

use serde::Serialize;

use crate::cache::{
    CacheConfig, CacheStats, Fragment, Key, Lookup, NeuronCache, NeuronId, Phase, Query,
};
use crate::error::{Error, Result};
use crate::model::{
    bundle_coactivates, generate_trace, mix64, Dtype, ModelSpec, SkewParams,
};
use crate::pipeline::{
    simulate, utilization, ClusterTask, ComputeCore, EventLog, Policy, Resources,
};
use crate::planner::{
    generate_plan, neuron_bytes, profile, AttentionTimeModel, ExecutionPlan, HardwareProfile,
    NPU_GRAPH_BYTES,
};
use crate::storage::{
    bandwidth, layout, read_time, seq_load_time, CoreKind, FlashLayout, ReadKind,
};

/// How many cold neurons form one pipeline cluster task.
pub const CLUSTER_NEURONS: usize = 32;

/// Predictor stage cost as a fraction of the Gate compute stage.
const PRED_COST_FRACTION: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PolicyFlags {
    /// Neuron-bundled flash layout with two-phase int4 loading; off
    /// means three separate per-matrix reads per missing neuron.
    pub bundle: bool,
    /// Plan-driven segmented LRU cache; off means a static
    /// pseudorandom resident set of the same total size.
    pub cache: bool,
    /// Cluster-level pipelining; off means matrix-level barriers.
    pub pipeline: bool,
    /// CPU/NPU hybrid execution; off means CPU-only sparse compute.
    pub hybrid_xpu: bool,
}

impl PolicyFlags {
    pub fn all_on() -> Self {
        PolicyFlags { bundle: true, cache: true, pipeline: true, hybrid_xpu: true }
    }

    pub fn all_off() -> Self {
        PolicyFlags { bundle: false, cache: false, pipeline: false, hybrid_xpu: false }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub skew: SkewParams,
    pub plan: ExecutionPlan,
    pub hw: HardwareProfile,
    /// Fraction of FFN weight bytes not resident at start; the cache
    /// budget is the complement.
    pub offload_fraction: f64,
    /// Batch size per decode token.
    pub batch_schedule: Vec<u32>,
    pub flags: PolicyFlags,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.skew.validate()?;
        self.hw.validate()?;
        if !(0.0..=1.0).contains(&self.offload_fraction) {
            return Err(Error::constraint(format!(
                "offload_fraction {} outside [0,1]",
                self.offload_fraction
            )));
        }
        if self.batch_schedule.is_empty() {
            return Err(Error::constraint("batch_schedule must be non-empty".to_string()));
        }
        for &b in &self.batch_schedule {
            self.plan.entry(b)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub tokens_per_s: f64,
    pub latency_mean_s: f64,
    pub latency_p50_s: f64,
    pub latency_p90_s: f64,
    pub latency_p99_s: f64,
    /// Fraction of the critical path where I/O runs with no concurrent
    /// compute.
    pub io_overhead_fraction: f64,
    /// Fraction with at least one compute unit busy.
    pub compute_fraction: f64,
    /// Fraction with neither (scheduling bubbles).
    pub stall_fraction: f64,
    /// Weight-residency hit rate over all per-neuron accesses.
    pub cache_hit_rate: f64,
    /// Detailed cache statistics when the segmented cache is enabled.
    pub cache: Option<CacheStats>,
    pub effective_bandwidth_gbps: f64,
    /// Critical-path time added by NPU graph switches.
    pub graph_switch_cost_s: f64,
    pub total_io_bytes: u64,
    pub per_token_latency_s: Vec<f64>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((sorted.len() as f64 - 1.0) * q).round() as usize;
    sorted[idx]
}

/// Bytes of one element of a neuron's weights under the given dtype.
fn bytes_per_element(d_model: usize, dtype: Dtype) -> Result<f64> {
    Ok(neuron_bytes(d_model, dtype)? as f64 / (3 * d_model) as f64)
}

/// Effective compute throughputs in elements/s after applying the
/// memory-bandwidth caps: CPU and NPU each get a proportional share of
/// the combined cap when both run, the solo cap otherwise.
struct EffectiveThroughput {
    cpu_big: f64,
    cpu_mid: f64,
    cpu_little: f64,
    npu: f64,
}

fn effective_throughput(hw: &HardwareProfile, bpe: f64, hybrid: bool) -> EffectiveThroughput {
    let (cpu_cap_gbps, npu_cap_gbps) = if hybrid {
        let total = hw.cpu_only_bw_gbps + hw.npu_only_bw_gbps;
        (
            hw.combined_bw_gbps * hw.cpu_only_bw_gbps / total,
            hw.combined_bw_gbps * hw.npu_only_bw_gbps / total,
        )
    } else {
        (hw.cpu_only_bw_gbps, 0.0)
    };
    let cpu_cap = cpu_cap_gbps * 1e9 / bpe;
    let cpu_raw = hw.big_throughput * hw.n_big as f64
        + hw.mid_throughput * hw.n_mid as f64
        + hw.little_throughput * hw.n_little as f64;
    let cpu_scale = (cpu_cap / cpu_raw).min(1.0);
    EffectiveThroughput {
        cpu_big: hw.big_throughput * cpu_scale,
        cpu_mid: hw.mid_throughput * cpu_scale,
        cpu_little: hw.little_throughput * cpu_scale,
        npu: if hybrid { hw.npu_throughput.min(npu_cap_gbps * 1e9 / bpe) } else { 0.0 },
    }
}

/// Core speed in scheduler units: elements per 1024 ns.
fn core_speed(elems_per_s: f64) -> u64 {
    ((elems_per_s * 1024.0 / 1e9).round() as u64).max(1)
}

/// Stage work in scheduler units: `work / speed` nanoseconds.
fn elems_work(elems: u64) -> u64 {
    elems * 1024
}

fn build_resources(hw: &HardwareProfile, eff: &EffectiveThroughput, hybrid: bool) -> Resources {
    let mut cores = Vec::new();
    for i in 0..hw.n_big {
        cores.push(ComputeCore { name: format!("big{i}"), speed: core_speed(eff.cpu_big), npu: false });
    }
    for i in 0..hw.n_mid {
        cores.push(ComputeCore { name: format!("mid{i}"), speed: core_speed(eff.cpu_mid), npu: false });
    }
    for i in 0..hw.n_little {
        cores.push(ComputeCore {
            name: format!("little{i}"),
            speed: core_speed(eff.cpu_little),
            npu: false,
        });
    }
    if hybrid {
        cores.push(ComputeCore { name: "npu".to_string(), speed: core_speed(eff.npu), npu: true });
    }
    Resources { compute_cores: cores, io_channel: "io".to_string() }
}

/// Weight residency: either the plan-driven segmented cache or a
/// static pseudorandom resident set of the same capacity (the
/// cache-off baseline, which cannot adapt to the activation skew).
enum Residency {
    Lru(Box<NeuronCache>),
    Static { seed: u64, threshold: u64 },
}

const RESIDENCY_TAG: u64 = 0x7265_7369_64;

impl Residency {
    /// Whole-neuron residency for the static policy.
    fn static_resident(seed: u64, threshold: u64, layer: usize, neuron: u32) -> bool {
        mix64(seed, &[RESIDENCY_TAG, layer as u64, neuron as u64]) < threshold
    }
}

/// Warm-fills the cold region with the best-ranked non-hot neurons
/// (neuron index doubles as frequency rank), most valuable inserted
/// last so they are also most recently used.
fn prefill_cold(
    cache: &mut NeuronCache,
    hot_flags: &[bool],
    n_layers: usize,
    per_neuron: u64,
) -> Result<()> {
    let capacity = (cache.config().cold_bytes / per_neuron.max(1)) as usize;
    if capacity == 0 {
        return Ok(());
    }
    let quota = (capacity / n_layers.max(1)).min(hot_flags.len());
    let picked: Vec<u32> = (0..hot_flags.len() as u32)
        .filter(|&i| !hot_flags[i as usize])
        .take(quota)
        .collect();
    for l in 0..n_layers {
        for &i in picked.iter().rev() {
            let id = NeuronId { layer: l as u32, index: i };
            cache.insert(Key::Neuron(id, Fragment::Gate), per_neuron / 3)?;
            cache.insert(Key::Neuron(id, Fragment::UpDown), per_neuron - per_neuron / 3)?;
        }
    }
    Ok(())
}

/// One read against the flash model, in engine accounting units.
struct MissCost {
    gate_ns: u64,
    updown_ns: u64,
    bytes: u64,
}

struct IoCoster<'a> {
    hw: &'a HardwareProfile,
    layout: &'a FlashLayout,
    data_range: u64,
}

impl IoCoster<'_> {
    fn rand_read_ns(&self, size: u64) -> u64 {
        (read_time(&self.hw.io, size, ReadKind::Rand, self.data_range, CoreKind::Big) * 1e9)
            .round() as u64
    }

    /// Bundled miss: 4KB Gate half plus, when the Up/Down phase is
    /// needed, the second 4KB half (fp16 bundles load whole).
    fn bundled(&self, need_updown: bool, gate_missing: bool, updown_missing: bool) -> MissCost {
        match self.layout.dtype {
            Dtype::Int4Group => {
                let half = self.layout.aligned_bundle_size / 2;
                let g = if gate_missing { half } else { 0 };
                let u = if need_updown && updown_missing { half } else { 0 };
                MissCost {
                    gate_ns: if g > 0 { self.rand_read_ns(g) } else { 0 },
                    updown_ns: if u > 0 { self.rand_read_ns(u) } else { 0 },
                    bytes: g + u,
                }
            }
            _ => {
                let size = if gate_missing || (need_updown && updown_missing) {
                    self.layout.bundle_size
                } else {
                    0
                };
                MissCost {
                    gate_ns: if size > 0 { self.rand_read_ns(size) } else { 0 },
                    updown_ns: 0,
                    bytes: size,
                }
            }
        }
    }

    /// Unbundled miss: the three weight slices live in three separate
    /// matrix-major regions, so a miss costs three random reads (each
    /// rounded up to the 4KB flash granularity) with no two-phase skip.
    fn unbundled(&self) -> MissCost {
        let slice = (self.layout.bundle_size / 3).max(1);
        let aligned = slice.div_ceil(4096) * 4096;
        MissCost { gate_ns: 3 * self.rand_read_ns(aligned), updown_ns: 0, bytes: 3 * aligned }
    }
}

struct Accounting {
    wall_ns: u64,
    compute_ns: u64,
    io_only_ns: u64,
    stall_ns: u64,
    io_bytes: u64,
    compute_elems: u64,
    weight_lookups: u64,
    weight_hits: u64,
    graph_switch_ns: u64,
}

/// Simulates autoregressive decode over `batch_schedule` tokens.
/// Returns the aggregated metrics and the event log of the final
/// token's FFN pipeline.
pub fn simulate_decode(cfg: &RunConfig) -> Result<(RunMetrics, EventLog)> {
    cfg.validate()?;
    let model = &cfg.model;
    let lay = layout(model, model.dtype)?;
    let per_neuron = neuron_bytes(model.d_model, model.dtype)?;
    let bpe = bytes_per_element(model.d_model, model.dtype)?;
    let total_actual = model.n_layers as u64 * model.d_ffn as u64 * per_neuron;
    let budget = ((1.0 - cfg.offload_fraction) * total_actual as f64) as u64;
    let n_tokens = cfg.batch_schedule.len();
    let trace = generate_trace(model, &cfg.skew, n_tokens, &cfg.batch_schedule)?;

    let eff = effective_throughput(&cfg.hw, bpe, cfg.flags.hybrid_xpu);
    let resources = build_resources(&cfg.hw, &eff, cfg.flags.hybrid_xpu);
    let policy = if cfg.flags.pipeline { Policy::ClusterLevel } else { Policy::MatrixLevel };
    let coster = IoCoster { hw: &cfg.hw, layout: &lay, data_range: lay.total_bytes() };
    let graph_load_s = NPU_GRAPH_BYTES as f64
        / bandwidth(&cfg.hw.io, NPU_GRAPH_BYTES, ReadKind::Seq, NPU_GRAPH_BYTES);

    // Residency setup. The fixed region pins the NPU graph table.
    let fixed_bytes = cfg.plan.npu_graph_table.len() as u64 * NPU_GRAPH_BYTES;
    let hot_bytes_of = |k: usize| k as u64 * per_neuron * model.n_layers as u64;
    let mut current_b = cfg.batch_schedule[0];
    let mut hot_set: Vec<u32> = cfg.plan.entry(current_b)?.hot_set.clone();
    let mut hot_flags = vec![false; model.d_ffn];
    for &i in &hot_set {
        hot_flags[i as usize] = true;
    }
    let mut residency = if cfg.flags.cache {
        let hot_budget = hot_bytes_of(hot_set.len()).min(budget);
        let config = CacheConfig {
            total_bytes: fixed_bytes + budget,
            fixed_bytes,
            hot_bytes: hot_budget,
            cold_bytes: budget - hot_budget,
        };
        let mut cache = NeuronCache::new(config)?;
        for (g, &b) in cfg.plan.npu_graph_table.keys().enumerate() {
            let _ = b;
            cache.insert(Key::Fixed(g as u64), NPU_GRAPH_BYTES)?;
        }
        // Prefill the hot region: one cluster per layer, trimmed from
        // the last layer on if the plan's hot set overflows the budget.
        let per_layer = hot_set.len() as u64 * per_neuron;
        let mut left = hot_budget;
        for l in 0..model.n_layers {
            let bytes = per_layer.min(left);
            left -= bytes;
            if bytes > 0 {
                cache.insert(Key::Cluster(l as u64), bytes)?;
            }
        }
        prefill_cold(&mut cache, &hot_flags, model.n_layers, per_neuron)?;
        Residency::Lru(Box::new(cache))
    } else {
        let frac = (budget as f64 / total_actual as f64).clamp(0.0, 1.0);
        Residency::Static { seed: model.seed, threshold: (frac * u64::MAX as f64) as u64 }
    };

    let mut acc = Accounting {
        wall_ns: 0,
        compute_ns: 0,
        io_only_ns: 0,
        stall_ns: 0,
        io_bytes: 0,
        compute_elems: 0,
        weight_lookups: 0,
        weight_hits: 0,
        graph_switch_ns: 0,
    };
    let mut latencies_ns: Vec<u64> = Vec::with_capacity(n_tokens);
    let mut last_log: Option<EventLog> = None;

    for (t, &b) in cfg.batch_schedule.iter().enumerate() {
        // --- Batch switch: graph load + hot-set prefetch, overlapped
        // with the attention block below.
        let mut att_io_s = 0.0;
        if t == 0 || b != current_b {
            let new_hot = cfg.plan.entry(b)?.hot_set.clone();
            att_io_s += graph_load_s;
            if cfg.flags.cache {
                let old: HashSet<u32> = hot_set.iter().copied().collect();
                let added = new_hot.iter().filter(|i| !old.contains(i)).count();
                att_io_s += seq_load_time(
                    &cfg.hw.io,
                    added as u64 * per_neuron * model.n_layers as u64,
                    CoreKind::Big,
                );
                acc.io_bytes += added as u64 * per_neuron * model.n_layers as u64;
                if let Residency::Lru(cache) = &mut residency {
                    let hot_budget = hot_bytes_of(new_hot.len()).min(budget);
                    // Grow hot before shrinking cold or vice versa by
                    // resizing to the final budgets in one step.
                    cache.resize(CacheConfig {
                        total_bytes: fixed_bytes + budget,
                        fixed_bytes,
                        hot_bytes: hot_budget,
                        cold_bytes: budget - hot_budget,
                    })?;
                    let per_layer = new_hot.len() as u64 * per_neuron;
                    let mut left = hot_budget;
                    for l in 0..model.n_layers {
                        let bytes = per_layer.min(left);
                        left -= bytes;
                        if bytes > 0 {
                            cache.insert(Key::Cluster(l as u64), bytes)?;
                        }
                    }
                }
            }
            acc.io_bytes += NPU_GRAPH_BYTES;
            hot_flags.fill(false);
            for &i in &new_hot {
                hot_flags[i as usize] = true;
            }
            hot_set = new_hot;
            current_b = b;
        }

        // --- Attention block (dense time) with overlapped I/O.
        let att_s = cfg.hw.attention.time(model.d_model, b);
        let att_ns = (att_s * 1e9).round() as u64;
        let att_io_ns = (att_io_s * 1e9).round() as u64;
        let graph_ns = (graph_load_s * 1e9).round() as u64;
        if att_io_ns > 0 {
            acc.graph_switch_ns += graph_ns.min(att_io_ns).saturating_sub(att_ns);
        }
        let att_wall = att_ns.max(att_io_ns);
        acc.compute_ns += att_ns;
        acc.io_only_ns += att_wall - att_ns;
        acc.wall_ns += att_wall;

        // --- FFN across all layers as one pipeline instance.
        let hot_k = hot_set.len();
        let hot_resident_k = match &residency {
            Residency::Lru(cache) => {
                // Residency in the hot region, trimmed tail excluded.
                let per_layer = hot_k as u64 * per_neuron;
                if per_layer == 0 {
                    0
                } else {
                    (cache.resident_bytes(crate::cache::Region::Hot)
                        / model.n_layers as u64)
                        .min(per_layer) as usize
                        / per_neuron as usize
                }
            }
            Residency::Static { .. } => 0,
        };
        // Neurons served from the pinned hot region (relevant when the
        // hybrid flag is off and hot neurons run through the CPU path).
        let mut hot_res_flags = vec![false; model.d_ffn];
        for &i in hot_set.iter().take(hot_resident_k) {
            hot_res_flags[i as usize] = true;
        }
        let mut tasks: Vec<ClusterTask> = Vec::new();
        for l in 0..model.n_layers {
            let entry = &trace.entries[t * model.n_layers + l];
            debug_assert_eq!(entry.layer_index, l);
            let activated = &entry.activated;

            // Split activated neurons into the NPU-dense hot part and
            // the CPU sparse cold part. Without the hybrid flag the
            // whole activated set runs CPU-sparse.
            let cold: Vec<u32> = if cfg.flags.hybrid_xpu {
                activated.iter().copied().filter(|&i| !hot_flags[i as usize]).collect()
            } else {
                activated.clone()
            };

            if cfg.flags.hybrid_xpu && hot_k > 0 {
                // Hot region residency accounting, one probe per row.
                let (hits, miss) = match &mut residency {
                    Residency::Lru(cache) => {
                        cache.lookup(Query::Cluster(l as u64));
                        (hot_resident_k, hot_k - hot_resident_k)
                    }
                    Residency::Static { seed, threshold } => {
                        let hits = hot_set
                            .iter()
                            .filter(|&&i| Residency::static_resident(*seed, *threshold, l, i))
                            .count();
                        (hits, hot_k - hits)
                    }
                };
                acc.weight_lookups += hot_k as u64;
                acc.weight_hits += hits as u64;
                let mut gio_ns = 0u64;
                for _ in 0..miss {
                    let c = if cfg.flags.bundle {
                        coster.bundled(true, true, true)
                    } else {
                        coster.unbundled()
                    };
                    gio_ns += c.gate_ns + c.updown_ns;
                    acc.io_bytes += c.bytes;
                }
                let gc = elems_work((hot_k * model.d_model) as u64);
                let udc = elems_work((2 * hot_k * model.d_model) as u64);
                let pred = ((gc as f64 * PRED_COST_FRACTION) as u64).max(1);
                acc.compute_elems += 3 * (hot_k * model.d_model) as u64;
                tasks.push(ClusterTask {
                    task_id: tasks.len() as u32,
                    matrix_id: l as u32,
                    cluster_id: 0,
                    npu: true,
                    stages: [
                        Some(pred),
                        (gio_ns > 0).then_some(gio_ns),
                        Some(gc),
                        None,
                        Some(udc),
                    ],
                });
            }

            for chunk in cold.chunks(CLUSTER_NEURONS) {
                let mut gio_ns = 0u64;
                let mut udio_ns = 0u64;
                let mut need_ud = 0usize;
                for &i in chunk {
                    let coact = bundle_coactivates(
                        model.seed,
                        t as u64,
                        l as u64,
                        i,
                        cfg.skew.bundle_coactivation,
                    );
                    if coact {
                        need_ud += 1;
                    }
                    acc.weight_lookups += 1;
                    let id = NeuronId { layer: l as u32, index: i };
                    if hot_res_flags[i as usize] {
                        // Served from the pinned hot region.
                        if let Residency::Lru(cache) = &mut residency {
                            cache.lookup(Query::Cluster(l as u64));
                        }
                        acc.weight_hits += 1;
                        continue;
                    }
                    match &mut residency {
                        Residency::Lru(cache) => {
                            if cfg.flags.bundle && model.dtype == Dtype::Int4Group {
                                let gate_hit = cache.lookup(Query::Neuron(id, Phase::Gate))
                                    == Lookup::Hit;
                                let ud_hit = !coact
                                    || cache.lookup(Query::Neuron(id, Phase::UpDown))
                                        == Lookup::Hit;
                                if gate_hit && ud_hit {
                                    acc.weight_hits += 1;
                                }
                                let c = coster.bundled(coact, !gate_hit, !ud_hit);
                                gio_ns += c.gate_ns;
                                udio_ns += c.updown_ns;
                                acc.io_bytes += c.bytes;
                                if cache.config().cold_bytes >= per_neuron {
                                    if !gate_hit {
                                        cache.insert(
                                            Key::Neuron(id, Fragment::Gate),
                                            per_neuron / 3,
                                        )?;
                                    }
                                    if coact && !ud_hit {
                                        cache.insert(
                                            Key::Neuron(id, Fragment::UpDown),
                                            per_neuron - per_neuron / 3,
                                        )?;
                                    }
                                }
                            } else {
                                let hit =
                                    cache.lookup(Query::Neuron(id, Phase::Whole)) == Lookup::Hit;
                                if hit {
                                    acc.weight_hits += 1;
                                } else {
                                    let c = if cfg.flags.bundle {
                                        coster.bundled(true, true, true)
                                    } else {
                                        coster.unbundled()
                                    };
                                    gio_ns += c.gate_ns + c.updown_ns;
                                    acc.io_bytes += c.bytes;
                                    if cache.config().cold_bytes >= per_neuron {
                                        cache.insert(
                                            Key::Neuron(id, Fragment::Gate),
                                            per_neuron / 3,
                                        )?;
                                        cache.insert(
                                            Key::Neuron(id, Fragment::UpDown),
                                            per_neuron - per_neuron / 3,
                                        )?;
                                    }
                                }
                            }
                        }
                        Residency::Static { seed, threshold } => {
                            if Residency::static_resident(*seed, *threshold, l, i) {
                                acc.weight_hits += 1;
                            } else {
                                let c = if cfg.flags.bundle {
                                    coster.bundled(coact, true, true)
                                } else {
                                    coster.unbundled()
                                };
                                gio_ns += c.gate_ns;
                                udio_ns += c.updown_ns;
                                acc.io_bytes += c.bytes;
                            }
                        }
                    }
                }
                let n = chunk.len();
                let gc = elems_work((n * model.d_model) as u64);
                let udc = (need_ud > 0)
                    .then_some(elems_work((2 * need_ud * model.d_model) as u64));
                let pred = ((gc as f64 * PRED_COST_FRACTION) as u64).max(1);
                acc.compute_elems += ((n + 2 * need_ud) * model.d_model) as u64;
                tasks.push(ClusterTask {
                    task_id: tasks.len() as u32,
                    matrix_id: l as u32,
                    cluster_id: tasks.len() as u32,
                    npu: false,
                    stages: [
                        Some(pred),
                        (gio_ns > 0).then_some(gio_ns),
                        Some(gc),
                        (udio_ns > 0).then_some(udio_ns),
                        udc,
                    ],
                });
            }
        }

        let ffn_ns = if tasks.is_empty() {
            0
        } else {
            let log = simulate(&tasks, &resources, policy)?;
            let u = utilization(&log)?;
            acc.compute_ns += u.compute_ns;
            acc.io_only_ns += u.io_only_ns;
            acc.stall_ns += u.idle_ns;
            let makespan = u.makespan;
            last_log = Some(log);
            makespan
        };
        acc.wall_ns += ffn_ns;
        latencies_ns.push(att_wall + ffn_ns);
        if let Residency::Lru(cache) = &mut residency {
            cache.end_window();
        }
    }

    let total_s = acc.wall_ns as f64 / 1e9;
    let mut sorted: Vec<f64> = latencies_ns.iter().map(|&n| n as f64 / 1e9).collect();
    let per_token = sorted.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let compute_bytes = (acc.compute_elems as f64 * bpe) as u64;
    let metrics = RunMetrics {
        tokens_per_s: n_tokens as f64 / total_s,
        latency_mean_s: total_s / n_tokens as f64,
        latency_p50_s: percentile(&sorted, 0.50),
        latency_p90_s: percentile(&sorted, 0.90),
        latency_p99_s: percentile(&sorted, 0.99),
        io_overhead_fraction: acc.io_only_ns as f64 / acc.wall_ns as f64,
        compute_fraction: acc.compute_ns as f64 / acc.wall_ns as f64,
        stall_fraction: acc.stall_ns as f64 / acc.wall_ns as f64,
        cache_hit_rate: if acc.weight_lookups == 0 {
            1.0
        } else {
            acc.weight_hits as f64 / acc.weight_lookups as f64
        },
        cache: match &residency {
            Residency::Lru(cache) => Some(cache.stats()),
            Residency::Static { .. } => None,
        },
        effective_bandwidth_gbps: (acc.io_bytes + compute_bytes) as f64 / total_s / 1e9,
        graph_switch_cost_s: acc.graph_switch_ns as f64 / 1e9,
        total_io_bytes: acc.io_bytes,
        per_token_latency_s: per_token,
    };
    debug_assert_eq!(acc.compute_ns + acc.io_only_ns + acc.stall_ns, acc.wall_ns);
    let log = last_log.unwrap_or(EventLog { events: Vec::new(), makespan: 0 });
    Ok((metrics, log))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrefillMetrics {
    pub total_s: f64,
    pub tokens_per_s: f64,
    pub per_layer_compute_s: Vec<f64>,
    pub per_layer_load_s: Vec<f64>,
    /// True when every layer's preload fits under the previous layer's
    /// compute window.
    pub io_hidden_after_first: bool,
    /// Random-read preload time divided by sequential preload time for
    /// the same bytes.
    pub seq_vs_random_preload_ratio: f64,
}

/// Simulates the prefill phase: dense NPU layers with one big core
/// sequentially preloading the next layer's offloaded weights during
/// the current layer's compute.
pub fn simulate_prefill(cfg: &RunConfig, prompt_len: usize) -> Result<PrefillMetrics> {
    cfg.validate()?;
    if prompt_len == 0 {
        return Err(Error::constraint("prompt_len must be >= 1".to_string()));
    }
    let model = &cfg.model;
    let per_neuron = neuron_bytes(model.d_model, model.dtype)?;
    let bpe = bytes_per_element(model.d_model, model.dtype)?;
    let layer_bytes = model.d_ffn as u64 * per_neuron;
    let load_bytes = (cfg.offload_fraction * layer_bytes as f64) as u64;
    let npu_eff = cfg.hw.npu_throughput.min(cfg.hw.npu_only_bw_gbps * 1e9 / bpe);
    let ffn_elems = prompt_len as f64 * 3.0 * model.d_ffn as f64 * model.d_model as f64;
    let att_s = cfg.hw.attention.time(model.d_model, prompt_len as u32);
    let compute_s = att_s + ffn_elems / npu_eff;
    let load_s = seq_load_time(&cfg.hw.io, load_bytes, CoreKind::Big);

    let per_layer_compute_s = vec![compute_s; model.n_layers];
    let per_layer_load_s = vec![load_s; model.n_layers];
    let mut total = load_s; // first layer's load cannot be hidden
    for l in 0..model.n_layers {
        let next_load = if l + 1 < model.n_layers { load_s } else { 0.0 };
        total += compute_s.max(next_load);
    }
    let random_s = if load_bytes == 0 {
        0.0
    } else {
        load_bytes as f64
            / bandwidth(&cfg.hw.io, 4096, ReadKind::Rand, model.n_layers as u64 * layer_bytes)
    };
    Ok(PrefillMetrics {
        total_s: total,
        tokens_per_s: prompt_len as f64 / total,
        per_layer_compute_s,
        per_layer_load_s,
        io_hidden_after_first: load_s <= compute_s,
        seq_vs_random_preload_ratio: if load_s > 0.0 { random_s / load_s } else { 1.0 },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SplitChange {
    pub changed: bool,
    pub from_batch: u32,
    pub to_batch: u32,
    pub npu_fraction_from: f64,
    pub npu_fraction_to: f64,
    pub graph_load_s: f64,
    pub attention_s: f64,
    /// Critical-path time the switch adds; zero whenever the graph
    /// load fits under one attention block.
    pub added_critical_path_s: f64,
}

/// Plans a CPU/NPU split switch when the batch size changes: the new
/// NPU graph loads asynchronously during the next attention block.
pub fn adjust_split(
    plan: &ExecutionPlan,
    hw: &HardwareProfile,
    d_model: usize,
    current_batch: u32,
    new_batch: u32,
) -> Result<SplitChange> {
    let from = plan.entry(current_batch)?.npu_fraction;
    let to = plan.entry(new_batch)?.npu_fraction;
    if current_batch == new_batch {
        return Ok(SplitChange {
            changed: false,
            from_batch: current_batch,
            to_batch: new_batch,
            npu_fraction_from: from,
            npu_fraction_to: to,
            graph_load_s: 0.0,
            attention_s: 0.0,
            added_critical_path_s: 0.0,
        });
    }
    let graph_load_s = NPU_GRAPH_BYTES as f64
        / bandwidth(&hw.io, NPU_GRAPH_BYTES, ReadKind::Seq, NPU_GRAPH_BYTES);
    let attention_s = hw.attention.time(d_model, new_batch);
    Ok(SplitChange {
        changed: true,
        from_batch: current_batch,
        to_batch: new_batch,
        npu_fraction_from: from,
        npu_fraction_to: to,
        graph_load_s,
        attention_s,
        added_critical_path_s: (graph_load_s - attention_s).max(0.0),
    })
}

/// The five incremental optimization configurations, in order.
pub fn ablation_steps() -> [(&'static str, PolicyFlags); 5] {
    [
        ("baseline", PolicyFlags::all_off()),
        ("+bundle", PolicyFlags { bundle: true, ..PolicyFlags::all_off() }),
        ("+cache", PolicyFlags { bundle: true, cache: true, ..PolicyFlags::all_off() }),
        (
            "+pipeline",
            PolicyFlags { bundle: true, cache: true, pipeline: true, hybrid_xpu: false },
        ),
        ("+xpu", PolicyFlags::all_on()),
    ]
}

/// Runs the incremental ablation and returns per-step metrics.
pub fn run_ablation(base: &RunConfig) -> Result<Vec<(String, RunMetrics)>> {
    let mut out = Vec::new();
    for (name, flags) in ablation_steps() {
        let cfg = RunConfig { flags, ..base.clone() };
        let (metrics, _) = simulate_decode(&cfg)?;
        out.push((name.to_string(), metrics));
    }
    Ok(out)
}

/// Serializes ablation results with a stable column order.
pub fn ablation_csv(rows: &[(String, RunMetrics)]) -> String {
    let mut out = String::from(
        "config,tokens_per_s,latency_mean_s,io_overhead_fraction,compute_fraction,stall_fraction,cache_hit_rate\n",
    );
    for (name, m) in rows {
        out.push_str(&format!(
            "{},{:.6},{:.9},{:.6},{:.6},{:.6},{:.6}\n",
            name,
            m.tokens_per_s,
            m.latency_mean_s,
            m.io_overhead_fraction,
            m.compute_fraction,
            m.stall_fraction,
            m.cache_hit_rate
        ));
    }
    out
}

/// Default desk-scale configuration calibrated so the qualitative
/// claims (ablation ordering, overlap structure, hybrid advantage) are
/// visible at small model sizes.
pub fn default_config(seed: u64, batch_schedule: Vec<u32>) -> Result<RunConfig> {
    let model = ModelSpec {
        n_layers: 4,
        d_model: 1024,
        d_ffn: 2048,
        dtype: Dtype::Int4Group,
        seed,
    };
    let skew = SkewParams {
        hot_fraction_by_batch: [(1u32, 0.01), (32u32, 0.75)].into_iter().collect(),
        base_sparsity: 0.09,
        bundle_coactivation: 0.8,
        cold_coactivation: 0.15,
        zipf_exponent: 2.0,
    };
    let mut hw = HardwareProfile::default_profile();
    // Compute-bound CPU cluster; NPU limited by its bandwidth cap.
    hw.big_throughput = 2.0e9;
    hw.mid_throughput = 1.2e9;
    hw.little_throughput = 0.6e9;
    hw.npu_throughput = 100.0e9;
    hw.attention = AttentionTimeModel { base_s: 3.5e-3, per_seq_s: 0.4e-3 };

    // Calibration trace covering the planned batch sizes.
    let mut plan_batches: Vec<u32> = vec![1, 2, 4, 8, 16, 32];
    for &b in &batch_schedule {
        if !plan_batches.contains(&b) {
            plan_batches.push(b);
        }
    }
    plan_batches.sort_unstable();
    let tokens_per_batch = 24;
    let mut calib_schedule = Vec::new();
    for &b in &plan_batches {
        calib_schedule.extend(std::iter::repeat(b).take(tokens_per_batch));
    }
    let calib_model = ModelSpec { seed: seed ^ 0x5052_4f46, ..model };
    let trace = generate_trace(&calib_model, &skew, calib_schedule.len(), &calib_schedule)?;
    let stats = profile(&trace, model.d_ffn)?;
    let per_neuron = neuron_bytes(model.d_model, model.dtype)?;
    let total_actual = model.n_layers as u64 * model.d_ffn as u64 * per_neuron;
    let plan = generate_plan(&stats, &hw, &model, &plan_batches, total_actual / 2)?;
    Ok(RunConfig {
        model,
        skew,
        plan,
        hw,
        offload_fraction: 0.5,
        batch_schedule,
        flags: PolicyFlags::all_on(),
    })
}
