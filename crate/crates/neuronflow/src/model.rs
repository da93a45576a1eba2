//! Synthetic gated-FFN model definition and activation-trace generation.
//!
//! A "neuron" `i` spans row `i` of the Gate matrix, row `i` of the Up
//! matrix, and column `i` of the Down matrix. Traces record, per token
//! and layer, the set of neuron indices activated by at least one
//! sequence in the batch (union-over-batch semantics).

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weight storage format. `Int4Group` carries group-of-32 scales,
/// `Int4Mixed` additionally preserves outliers in INT8.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dtype {
    Fp32,
    Fp16,
    Int4Group,
    Int4Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub dtype: Dtype,
    pub seed: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.d_ffn == 0 {
            return Err(Error::constraint(format!(
                "model dimensions must be >= 1 (n_layers={}, d_model={}, d_ffn={})",
                self.n_layers, self.d_model, self.d_ffn
            )));
        }
        Ok(())
    }
}

/// One layer of gated-FFN weights.
///
/// `gate` and `up` are `d_ffn x d_model` row-major; `down` is
/// `d_model x d_ffn` row-major, so neuron `i` owns column `i` of `down`.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnWeights {
    pub layer_index: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub gate: Vec<f32>,
    pub up: Vec<f32>,
    pub down: Vec<f32>,
}

impl FfnWeights {
    pub fn gate_row(&self, i: usize) -> &[f32] {
        &self.gate[i * self.d_model..(i + 1) * self.d_model]
    }

    pub fn up_row(&self, i: usize) -> &[f32] {
        &self.up[i * self.d_model..(i + 1) * self.d_model]
    }

    pub fn down_col(&self, i: usize) -> Vec<f32> {
        (0..self.d_model).map(|j| self.down[j * self.d_ffn + i]).collect()
    }
}

/// The Gate/Up/Down slices of a single neuron, as stored contiguously on
/// flash.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronBundle {
    pub layer_index: usize,
    pub row_index: usize,
    pub gate_row: Vec<f32>,
    pub up_row: Vec<f32>,
    pub down_col: Vec<f32>,
}

/// Generates all per-layer weights for a spec. Deterministic for a fixed
/// seed; every matrix element is drawn from a zero-mean unit normal.
pub fn make_synthetic_model(spec: &ModelSpec) -> Result<Vec<FfnWeights>> {
    spec.validate()?;
    let mut layers = Vec::with_capacity(spec.n_layers);
    for layer in 0..spec.n_layers {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(spec.seed, &[0x6d6f_64656c, layer as u64]));
        let n = spec.d_ffn * spec.d_model;
        let mut draw = |count: usize| -> Vec<f32> {
            (0..count).map(|_| StandardNormal.sample(&mut rng)).collect()
        };
        layers.push(FfnWeights {
            layer_index: layer,
            d_model: spec.d_model,
            d_ffn: spec.d_ffn,
            gate: draw(n),
            up: draw(n),
            down: draw(n),
        });
    }
    Ok(layers)
}

pub fn extract_bundle(weights: &FfnWeights, i: usize) -> Result<NeuronBundle> {
    if i >= weights.d_ffn {
        return Err(Error::IndexOutOfRange(format!(
            "neuron {i} out of range (d_ffn={})",
            weights.d_ffn
        )));
    }
    Ok(NeuronBundle {
        layer_index: weights.layer_index,
        row_index: i,
        gate_row: weights.gate_row(i).to_vec(),
        up_row: weights.up_row(i).to_vec(),
        down_col: weights.down_col(i),
    })
}

/// Writes a bundle back into its source position.
pub fn insert_bundle(weights: &mut FfnWeights, bundle: &NeuronBundle) -> Result<()> {
    let i = bundle.row_index;
    if i >= weights.d_ffn {
        return Err(Error::IndexOutOfRange(format!(
            "neuron {i} out of range (d_ffn={})",
            weights.d_ffn
        )));
    }
    let d = weights.d_model;
    weights.gate[i * d..(i + 1) * d].copy_from_slice(&bundle.gate_row);
    weights.up[i * d..(i + 1) * d].copy_from_slice(&bundle.up_row);
    for j in 0..d {
        weights.down[j * weights.d_ffn + i] = bundle.down_col[j];
    }
    Ok(())
}

/// Parameters of the two-tier activation model: a hot tier activated
/// with high per-sequence probability plus a Zipf-tailed cold tier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewParams {
    /// Fraction of neurons in the hot tier, keyed by batch size.
    /// Interpolated linearly between anchors, clamped at the ends.
    pub hot_fraction_by_batch: BTreeMap<u32, f64>,
    /// Target expected per-sequence activated fraction of the cold tier.
    pub base_sparsity: f64,
    /// P(Up/Down slices needed | Gate row activated).
    pub bundle_coactivation: f64,
    /// P(two distinct cold neurons co-activate); used by the
    /// bundling-comparison cache policy.
    pub cold_coactivation: f64,
    /// Exponent of the Zipf tail over cold-neuron ranks.
    pub zipf_exponent: f64,
}

/// Per-sequence activation probability of a hot-tier neuron. Union over
/// the batch pushes the per-entry probability toward 1 for large batches.
pub const HOT_SEQ_ACTIVATION_PROB: f64 = 0.7;

impl SkewParams {
    /// Skew matching the measured activation-pattern endpoints:
    /// hot fraction <1% at batch 1 growing to ~75% at batch 32.
    pub fn measured() -> Self {
        let mut hot = BTreeMap::new();
        hot.insert(1, 0.01);
        hot.insert(32, 0.75);
        SkewParams {
            hot_fraction_by_batch: hot,
            base_sparsity: 0.1,
            bundle_coactivation: 0.8,
            cold_coactivation: 0.15,
            zipf_exponent: 1.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in [self.bundle_coactivation, self.cold_coactivation, self.base_sparsity] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::constraint(format!("probability {p} outside [0,1]")));
            }
        }
        if self.zipf_exponent <= 0.0 {
            return Err(Error::constraint("zipf_exponent must be > 0".to_string()));
        }
        let mut prev = f64::NEG_INFINITY;
        for (&b, &f) in &self.hot_fraction_by_batch {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::constraint(format!("hot fraction {f} outside [0,1]")));
            }
            if b == 0 {
                return Err(Error::constraint("batch size 0 in hot_fraction map".to_string()));
            }
            if f < prev {
                return Err(Error::constraint(
                    "hot_fraction_by_batch must be non-decreasing in batch size".to_string(),
                ));
            }
            prev = f;
        }
        Ok(())
    }

    /// Hot-tier fraction at batch size `b`, linearly interpolated.
    pub fn hot_fraction(&self, b: u32) -> f64 {
        let mut iter = self.hot_fraction_by_batch.iter();
        let Some((&b0, &f0)) = iter.next() else { return 0.0 };
        if b <= b0 {
            return f0;
        }
        let (mut lb, mut lf) = (b0, f0);
        for (&bi, &fi) in iter {
            if b <= bi {
                let t = (b - lb) as f64 / (bi - lb) as f64;
                return lf + t * (fi - lf);
            }
            lb = bi;
            lf = fi;
        }
        lf
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub token_index: u64,
    pub batch_size: u32,
    pub layer_index: usize,
    /// Sorted, deduplicated neuron indices activated by at least one
    /// sequence in the batch.
    pub activated: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ActivationTrace {
    pub entries: Vec<TraceEntry>,
}

/// Per-sequence cold-tier activation probabilities for a given tier
/// layout, normalized numerically so the expected activated count equals
/// `base_sparsity * d_ffn` despite probability clipping at 1.
fn cold_probabilities(n_cold: usize, d_ffn: usize, skew: &SkewParams) -> Vec<f64> {
    if n_cold == 0 {
        return Vec::new();
    }
    let target = (skew.base_sparsity * d_ffn as f64).min(n_cold as f64);
    let z = skew.zipf_exponent;
    let mass = |c: f64| -> f64 {
        (0..n_cold).map(|k| (c / ((k + 1) as f64).powf(z)).min(1.0)).sum()
    };
    // Bisection on the scaling constant; mass(c) is monotone in c.
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while mass(hi) < target && hi < 1e12 {
        hi *= 2.0;
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = 0.5 * (lo + hi);
    (0..n_cold).map(|k| (c / ((k + 1) as f64).powf(z)).min(1.0)).collect()
}

/// Generates a deterministic activation trace.
///
/// Neuron index doubles as frequency rank: indices below the hot-tier
/// boundary activate with [`HOT_SEQ_ACTIVATION_PROB`] per sequence, the
/// rest follow the Zipf tail. A neuron is recorded as activated when any
/// sequence in the batch activates it.
pub fn generate_trace(
    spec: &ModelSpec,
    skew: &SkewParams,
    n_tokens: usize,
    batch_schedule: &[u32],
) -> Result<ActivationTrace> {
    spec.validate()?;
    skew.validate()?;
    if batch_schedule.len() != n_tokens {
        return Err(Error::constraint(format!(
            "batch_schedule length {} != n_tokens {}",
            batch_schedule.len(),
            n_tokens
        )));
    }
    if n_tokens == 0 {
        return Ok(ActivationTrace::default());
    }
    if batch_schedule.iter().any(|&b| b == 0) {
        return Err(Error::constraint("batch sizes must be >= 1".to_string()));
    }

    // Cold-tier probability vectors are shared across tokens with the
    // same batch size.
    let mut cold_by_batch: BTreeMap<u32, (usize, Vec<f64>)> = BTreeMap::new();
    for &b in batch_schedule {
        cold_by_batch.entry(b).or_insert_with(|| {
            let h = (skew.hot_fraction(b) * spec.d_ffn as f64).round() as usize;
            let h = h.min(spec.d_ffn);
            (h, cold_probabilities(spec.d_ffn - h, spec.d_ffn, skew))
        });
    }

    let mut entries = Vec::with_capacity(n_tokens * spec.n_layers);
    for (token, &b) in batch_schedule.iter().enumerate() {
        let (h, cold_p) = &cold_by_batch[&b];
        for layer in 0..spec.n_layers {
            let mut rng = ChaCha8Rng::seed_from_u64(mix64(
                spec.seed,
                &[0x7472_6163_65, token as u64, layer as u64],
            ));
            let mut active = vec![false; spec.d_ffn];
            for _seq in 0..b {
                for slot in active.iter_mut().take(*h) {
                    if rng.gen::<f64>() < HOT_SEQ_ACTIVATION_PROB {
                        *slot = true;
                    }
                }
                for (k, &p) in cold_p.iter().enumerate() {
                    if rng.gen::<f64>() < p {
                        active[h + k] = true;
                    }
                }
            }
            let activated: Vec<u32> = active
                .iter()
                .enumerate()
                .filter_map(|(i, &a)| a.then_some(i as u32))
                .collect();
            entries.push(TraceEntry {
                token_index: token as u64,
                batch_size: b,
                layer_index: layer,
                activated,
            });
        }
    }
    Ok(ActivationTrace { entries })
}

/// Deterministic Bernoulli draw deciding whether an activated neuron's
/// Gate output is nonzero (so the Up/Down phase is actually needed).
pub fn bundle_coactivates(seed: u64, token: u64, layer: u64, neuron: u32, p: f64) -> bool {
    let h = mix64(seed, &[0x636f_6163, token, layer, neuron as u64]);
    (h as f64 / u64::MAX as f64) < p
}

/// SplitMix64-based hash combining a seed with a context tuple; used to
/// derive independent RNG streams without wall-clock entropy.
pub fn mix64(seed: u64, ctx: &[u64]) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &c in ctx {
        h = h.wrapping_add(c).wrapping_add(0x9e37_79b9_7f4a_7c15);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

// --- persistence -----------------------------------------------------

/// Writes a trace as JSON-Lines, one entry per (token, layer).
pub fn write_trace(path: &Path, trace: &ActivationTrace) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in &trace.entries {
        let line = serde_json::to_string(e).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<ActivationTrace> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut entries = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(serde_json::from_str(&line).map_err(|e| Error::Parse(e.to_string()))?);
    }
    Ok(ActivationTrace { entries })
}

#[derive(Debug, Serialize, Deserialize)]
struct ContainerHeader {
    spec: ModelSpec,
    format: String,
}

/// Persists weights as a flat little-endian f32 binary container with a
/// length-prefixed JSON header.
pub fn write_model(path: &Path, spec: &ModelSpec, layers: &[FfnWeights]) -> Result<()> {
    let header = serde_json::to_vec(&ContainerHeader {
        spec: *spec,
        format: "neuronflow-weights-v1".to_string(),
    })
    .map_err(|e| Error::Parse(e.to_string()))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&(header.len() as u64).to_le_bytes())?;
    f.write_all(&header)?;
    for layer in layers {
        for mat in [&layer.gate, &layer.up, &layer.down] {
            for &v in mat.iter() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_model(path: &Path) -> Result<(ModelSpec, Vec<FfnWeights>)> {
    let mut f = BufReader::new(std::fs::File::open(path)?);
    let mut len = [0u8; 8];
    f.read_exact(&mut len)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    f.read_exact(&mut header)?;
    let header: ContainerHeader =
        serde_json::from_slice(&header).map_err(|e| Error::Parse(e.to_string()))?;
    let spec = header.spec;
    let n = spec.d_ffn * spec.d_model;
    let mut read_mat = |count: usize| -> Result<Vec<f32>> {
        let mut buf = vec![0u8; count * 4];
        f.read_exact(&mut buf)?;
        Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    };
    let mut layers = Vec::with_capacity(spec.n_layers);
    for layer in 0..spec.n_layers {
        layers.push(FfnWeights {
            layer_index: layer,
            d_model: spec.d_model,
            d_ffn: spec.d_ffn,
            gate: read_mat(n)?,
            up: read_mat(n)?,
            down: read_mat(n)?,
        });
    }
    Ok((spec, layers))
}
