//! Parameterized UFS read-cost model and the on-flash bundle layout.
//!
//! Bandwidth surfaces are anchor lists interpolated log-log linearly and
//! clamped at the curve endpoints. Bandwidths are decimal (1 GB/s =
//! 1e9 bytes/s); block sizes are binary (4KB = 4096 bytes).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dtype, ModelSpec};
use crate::quant::bundle_bytes;

pub const KIB: u64 = 1024;
pub const MIB: u64 = 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoreKind {
    Big,
    Mid,
    Little,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadKind {
    Seq,
    Rand,
}

/// One random-read bandwidth curve at a fixed data range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandCurve {
    pub data_range_bytes: u64,
    /// (block_size_bytes, GB/s) anchors, ascending in block size.
    pub anchors: Vec<(u64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoModelParams {
    /// Sequential-read anchors (block_size_bytes, GB/s), ascending.
    pub seq_bw_curve: Vec<(u64, f64)>,
    /// Random-read surfaces, ascending in data range.
    pub rand_bw_curve: Vec<RandCurve>,
    /// Bandwidth multiplier of the core servicing I/O; big-core = 1.0.
    pub core_coeff_big: f64,
    pub core_coeff_mid: f64,
    pub core_coeff_little: f64,
    /// UFS exposes one command queue.
    pub single_queue: bool,
    /// Aggregate bandwidth loss when multiple issuers contend for the
    /// queue.
    pub concurrency_penalty: f64,
}

impl IoModelParams {
    pub fn core_coeff(&self, core: CoreKind) -> f64 {
        match core {
            CoreKind::Big => self.core_coeff_big,
            CoreKind::Mid => self.core_coeff_mid,
            CoreKind::Little => self.core_coeff_little,
        }
    }

    /// Per-issuer share of solo bandwidth with `n` concurrent issuers.
    pub fn issuer_bandwidth_share(&self, n: usize) -> f64 {
        if n <= 1 {
            1.0
        } else {
            (1.0 - self.concurrency_penalty) / n as f64
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_bw_curve.is_empty() || self.rand_bw_curve.is_empty() {
            return Err(Error::constraint("bandwidth curves must be non-empty".to_string()));
        }
        if !self
            .seq_bw_curve
            .windows(2)
            .all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1)
        {
            return Err(Error::constraint(
                "sequential bandwidth must be non-decreasing in block size".to_string(),
            ));
        }
        for w in self.rand_bw_curve.windows(2) {
            if w[0].data_range_bytes >= w[1].data_range_bytes {
                return Err(Error::constraint("rand curves must ascend in data range".to_string()));
            }
            for (a, b) in w[0].anchors.iter().zip(&w[1].anchors) {
                if a.0 != b.0 {
                    return Err(Error::constraint(
                        "rand curves must share block-size anchors".to_string(),
                    ));
                }
                if b.1 > a.1 {
                    return Err(Error::constraint(
                        "rand bandwidth must be non-increasing in data range".to_string(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Log-log linear interpolation with endpoint clamping.
fn loglog_interp(x: f64, anchors: &[(u64, f64)]) -> f64 {
    debug_assert!(!anchors.is_empty());
    if x <= anchors[0].0 as f64 {
        return anchors[0].1;
    }
    if x >= anchors[anchors.len() - 1].0 as f64 {
        return anchors[anchors.len() - 1].1;
    }
    for w in anchors.windows(2) {
        let (x0, y0) = (w[0].0 as f64, w[0].1);
        let (x1, y1) = (w[1].0 as f64, w[1].1);
        if x <= x1 {
            let t = (x.ln() - x0.ln()) / (x1.ln() - x0.ln());
            return (y0.ln() + t * (y1.ln() - y0.ln())).exp();
        }
    }
    unreachable!()
}

/// Interpolated bandwidth in bytes/s for a solo issuer on a big core.
pub fn bandwidth(params: &IoModelParams, block_size: u64, kind: ReadKind, data_range: u64) -> f64 {
    let gbps = match kind {
        ReadKind::Seq => loglog_interp(block_size as f64, &params.seq_bw_curve),
        ReadKind::Rand => {
            // Interpolate within each range surface, then across ranges.
            let per_range: Vec<(u64, f64)> = params
                .rand_bw_curve
                .iter()
                .map(|c| (c.data_range_bytes, loglog_interp(block_size as f64, &c.anchors)))
                .collect();
            loglog_interp(data_range as f64, &per_range)
        }
    };
    gbps * 1e9
}

/// Time to read one block.
pub fn read_time(
    params: &IoModelParams,
    block_size: u64,
    kind: ReadKind,
    data_range: u64,
    core: CoreKind,
) -> f64 {
    if block_size == 0 {
        return 0.0;
    }
    block_size as f64 / (bandwidth(params, block_size, kind, data_range) * params.core_coeff(core))
}

/// Time to stream `total_bytes` sequentially in large blocks.
pub fn seq_load_time(params: &IoModelParams, total_bytes: u64, core: CoreKind) -> f64 {
    if total_bytes == 0 {
        return 0.0;
    }
    let block = total_bytes.clamp(4 * KIB, 512 * KIB);
    total_bytes as f64 / (bandwidth(params, block, ReadKind::Seq, total_bytes) * params.core_coeff(core))
}

/// Default UFS 4.0 profile.
///
/// Quoted anchors: 450 MB/s (4KB seq), 4 GB/s (512KB seq), 1 GB/s
/// (4KB rand / 128MB), 850 MB/s (4KB rand / 512MB), 3.5 GB/s (512KB
/// rand). The 8KB random anchor (650 MB/s, with the range ratio of the
/// 4KB anchors) is a calibration constant, not a measured value.
pub fn default_profile() -> IoModelParams {
    let ratio = 0.85;
    IoModelParams {
        seq_bw_curve: vec![(4 * KIB, 0.45), (512 * KIB, 4.0)],
        rand_bw_curve: vec![
            RandCurve {
                data_range_bytes: 128 * MIB,
                anchors: vec![(4 * KIB, 1.0), (8 * KIB, 0.65), (512 * KIB, 3.5)],
            },
            RandCurve {
                data_range_bytes: 512 * MIB,
                anchors: vec![(4 * KIB, ratio), (8 * KIB, 0.65 * ratio), (512 * KIB, 3.5)],
            },
        ],
        core_coeff_big: 1.0,
        core_coeff_mid: 1007.95 / 1076.10,
        core_coeff_little: 761.87 / 1076.10,
        single_queue: true,
        concurrency_penalty: 0.4,
    }
}

/// Position-major placement of neuron bundles: adjacent neuron ids are
/// adjacent on flash, bundle strides aligned to the flash read
/// granularity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlashLayout {
    pub n_layers: usize,
    pub d_ffn: usize,
    pub dtype: Dtype,
    pub bundle_size: u64,
    pub aligned_bundle_size: u64,
}

impl FlashLayout {
    pub fn offset(&self, layer: usize, neuron: u32) -> Result<u64> {
        if layer >= self.n_layers || neuron as usize >= self.d_ffn {
            return Err(Error::IndexOutOfRange(format!(
                "neuron ({layer}, {neuron}) outside layout ({} layers x {} neurons)",
                self.n_layers, self.d_ffn
            )));
        }
        Ok((layer as u64 * self.d_ffn as u64 + neuron as u64) * self.aligned_bundle_size)
    }

    pub fn layer_bytes(&self) -> u64 {
        self.d_ffn as u64 * self.aligned_bundle_size
    }

    pub fn total_bytes(&self) -> u64 {
        self.n_layers as u64 * self.layer_bytes()
    }
}

pub fn layout(model: &ModelSpec, dtype: Dtype) -> Result<FlashLayout> {
    model.validate()?;
    let acct = bundle_bytes(model.d_model, dtype)?;
    Ok(FlashLayout {
        n_layers: model.n_layers,
        d_ffn: model.d_ffn,
        dtype,
        bundle_size: acct.bundle,
        aligned_bundle_size: acct.aligned,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadPhase {
    Gate,
    UpDown,
    Whole,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReadOp {
    pub offset: u64,
    pub size: u64,
    pub kind: ReadKind,
    pub phase: LoadPhase,
}

/// Cold-neuron load plan.
///
/// fp16 bundles are fetched with one large random read; int4 bundles use
/// the two-phase strategy: a 4KB Gate read, then a 4KB Up/Down read only
/// if the Gate output is known (or later found) to be nonzero.
/// `gate_activated_hint` of `Some(false)` suppresses phase 2; `None`
/// plans phase 1 only, leaving phase 2 to a follow-up call once the Gate
/// product is known.
pub fn plan_io(
    layout: &FlashLayout,
    layer: usize,
    neuron: u32,
    gate_activated_hint: Option<bool>,
) -> Result<Vec<ReadOp>> {
    let base = layout.offset(layer, neuron)?;
    match layout.dtype {
        Dtype::Fp16 => Ok(vec![ReadOp {
            offset: base,
            size: layout.bundle_size,
            kind: ReadKind::Rand,
            phase: LoadPhase::Whole,
        }]),
        Dtype::Int4Group => {
            let half = layout.aligned_bundle_size / 2;
            let mut ops = vec![ReadOp {
                offset: base,
                size: half,
                kind: ReadKind::Rand,
                phase: LoadPhase::Gate,
            }];
            if gate_activated_hint == Some(true) {
                ops.push(ReadOp {
                    offset: base + half,
                    size: half,
                    kind: ReadKind::Rand,
                    phase: LoadPhase::UpDown,
                });
            }
            Ok(ops)
        }
        other => Err(Error::constraint(format!("no load plan for dtype {other:?}"))),
    }
}

/// Phase-2 (Up/Down) read for an int4 neuron whose Gate output turned
/// out nonzero.
pub fn plan_updown_io(layout: &FlashLayout, layer: usize, neuron: u32) -> Result<ReadOp> {
    let base = layout.offset(layer, neuron)?;
    let half = layout.aligned_bundle_size / 2;
    Ok(ReadOp { offset: base + half, size: half, kind: ReadKind::Rand, phase: LoadPhase::UpDown })
}
