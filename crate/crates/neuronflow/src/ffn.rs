//! Exact gated-FFN math: dense oracle, predictor-gated sparse paths,
//! hybrid hot/cold row-split evaluation, and two-phase per-neuron
//! evaluation.
//!
//! All paths share one accumulation discipline: neurons are evaluated in
//! ascending index order and a neuron whose contribution coefficient is
//! exactly zero is skipped. Under that discipline a sparse evaluation
//! over the oracle-activated set produces the bit-identical sequence of
//! floating-point additions as the dense evaluation, so equality tests
//! are exact rather than tolerance-based.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::model::{mix64, FfnWeights, NeuronBundle};

/// Activation function for the Gate output.
///
/// `Relu` defines "activated" as `gate_i . x > 0` (the zero boundary is
/// inactive). `Silu` uses a magnitude threshold on the neuron's output
/// coefficient, so its sparse path is approximate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    Silu { threshold: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PredictorMode {
    Oracle,
    Noisy,
}

/// Behavioral activation predictor: the oracle returns the true set, the
/// noisy mode drops/adds members with configured error rates,
/// deterministically under (seed, token_key).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Predictor {
    pub mode: PredictorMode,
    pub false_negative_rate: f64,
    pub false_positive_rate: f64,
    pub seed: u64,
}

impl Predictor {
    pub fn oracle() -> Self {
        Predictor {
            mode: PredictorMode::Oracle,
            false_negative_rate: 0.0,
            false_positive_rate: 0.0,
            seed: 0,
        }
    }

    pub fn noisy(fnr: f64, fpr: f64, seed: u64) -> Self {
        Predictor {
            mode: PredictorMode::Noisy,
            false_negative_rate: fnr,
            false_positive_rate: fpr,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.false_negative_rate)
            || !(0.0..=1.0).contains(&self.false_positive_rate)
        {
            return Err(Error::constraint("predictor error rates must be in [0,1]".to_string()));
        }
        if self.mode == PredictorMode::Oracle
            && (self.false_negative_rate != 0.0 || self.false_positive_rate != 0.0)
        {
            return Err(Error::constraint("oracle predictor implies zero error rates".to_string()));
        }
        Ok(())
    }
}

/// Fraction of neuron rows assigned to the dense (NPU) partition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatio {
    pub npu_fraction: f64,
}

impl SplitRatio {
    pub fn hot_rows(&self, d_ffn: usize) -> usize {
        (self.npu_fraction * d_ffn as f64).round() as usize
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn check_shapes(weights: &FfnWeights, x: &[f32]) -> Result<()> {
    if x.len() != weights.d_model {
        return Err(Error::ShapeMismatch(format!(
            "input length {} != d_model {}",
            x.len(),
            weights.d_model
        )));
    }
    Ok(())
}

/// Contribution coefficient of neuron `i`: activation(gate_i.x) * (up_i.x).
fn neuron_coeff(weights: &FfnWeights, i: usize, x: &[f32], act: Activation) -> f32 {
    let g = dot(weights.gate_row(i), x);
    let a = match act {
        Activation::Relu => {
            if g > 0.0 {
                g
            } else {
                return 0.0;
            }
        }
        Activation::Silu { .. } => g / (1.0 + (-g).exp()),
    };
    a * dot(weights.up_row(i), x)
}

fn accumulate_neuron(weights: &FfnWeights, i: usize, coeff: f32, out: &mut [f32]) {
    for (j, slot) in out.iter_mut().enumerate() {
        *slot += coeff * weights.down[j * weights.d_ffn + i];
    }
}

/// Dense gated-FFN: `out = sum_i act(gate_i.x) * (up_i.x) * down_col_i`.
/// The oracle for every sparse path.
pub fn ffn_dense(weights: &FfnWeights, x: &[f32]) -> Result<Vec<f32>> {
    ffn_dense_act(weights, x, Activation::Relu)
}

pub fn ffn_dense_act(weights: &FfnWeights, x: &[f32], act: Activation) -> Result<Vec<f32>> {
    check_shapes(weights, x)?;
    let mut out = vec![0.0f32; weights.d_model];
    for i in 0..weights.d_ffn {
        let coeff = neuron_coeff(weights, i, x, act);
        if coeff == 0.0 {
            continue;
        }
        accumulate_neuron(weights, i, coeff, &mut out);
    }
    Ok(out)
}

/// The true activated set under ReLU: `{ i : gate_i . x > 0 }`.
pub fn oracle_activated(weights: &FfnWeights, x: &[f32]) -> BTreeSet<u32> {
    (0..weights.d_ffn)
        .filter(|&i| dot(weights.gate_row(i), x) > 0.0)
        .map(|i| i as u32)
        .collect()
}

/// Activated set under SiLU with a magnitude threshold on the neuron's
/// output coefficient.
pub fn silu_activated(weights: &FfnWeights, x: &[f32], threshold: f32) -> BTreeSet<u32> {
    (0..weights.d_ffn)
        .filter(|&i| {
            neuron_coeff(weights, i, x, Activation::Silu { threshold }).abs() > threshold
        })
        .map(|i| i as u32)
        .collect()
}

/// Applies predictor noise to the true activated set.
pub fn predict(
    pred: &Predictor,
    true_activated: &BTreeSet<u32>,
    d_ffn: usize,
    token_key: u64,
) -> Result<BTreeSet<u32>> {
    pred.validate()?;
    match pred.mode {
        PredictorMode::Oracle => Ok(true_activated.clone()),
        PredictorMode::Noisy => {
            let mut out = BTreeSet::new();
            for i in 0..d_ffn as u32 {
                let member = true_activated.contains(&i);
                let (p_flip, tag) = if member {
                    (pred.false_negative_rate, 0u64)
                } else {
                    (pred.false_positive_rate, 1u64)
                };
                let u = mix64(pred.seed, &[0x7072_6564, token_key, i as u64, tag]) as f64
                    / u64::MAX as f64;
                if member != (u < p_flip) {
                    out.insert(i);
                }
            }
            Ok(out)
        }
    }
}

/// Evaluates only the predicted neurons, in ascending index order.
pub fn ffn_sparse(
    weights: &FfnWeights,
    x: &[f32],
    predicted: &BTreeSet<u32>,
) -> Result<Vec<f32>> {
    ffn_sparse_act(weights, x, predicted, Activation::Relu)
}

pub fn ffn_sparse_act(
    weights: &FfnWeights,
    x: &[f32],
    predicted: &BTreeSet<u32>,
    act: Activation,
) -> Result<Vec<f32>> {
    check_shapes(weights, x)?;
    if let Some(&max) = predicted.iter().next_back() {
        if max as usize >= weights.d_ffn {
            return Err(Error::IndexOutOfRange(format!(
                "predicted neuron {max} out of range (d_ffn={})",
                weights.d_ffn
            )));
        }
    }
    let mut out = vec![0.0f32; weights.d_model];
    for &i in predicted {
        let coeff = neuron_coeff(weights, i as usize, x, act);
        if coeff == 0.0 {
            continue;
        }
        accumulate_neuron(weights, i as usize, coeff, &mut out);
    }
    Ok(out)
}

/// Work accounting for the hybrid path: weight elements touched per
/// partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HybridWork {
    pub hot_elements: usize,
    pub cold_elements: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridOutput {
    pub output: Vec<f32>,
    pub work: HybridWork,
    /// Cold neurons the predictor selected (before the zero-coefficient
    /// skip).
    pub predicted_cold: BTreeSet<u32>,
}

/// Dense evaluation over `hot_set` plus predictor-gated evaluation over
/// its complement, merged in ascending neuron order so the result equals
/// `ffn_dense` bit-for-bit under an oracle predictor.
pub fn ffn_hybrid(
    weights: &FfnWeights,
    x: &[f32],
    ratio: SplitRatio,
    hot_set: &BTreeSet<u32>,
    predictor: &Predictor,
    token_key: u64,
) -> Result<HybridOutput> {
    check_shapes(weights, x)?;
    let expected = ratio.hot_rows(weights.d_ffn);
    if hot_set.len() != expected {
        return Err(Error::constraint(format!(
            "hot_set size {} != round(npu_fraction * d_ffn) = {expected}",
            hot_set.len()
        )));
    }
    if let Some(&max) = hot_set.iter().next_back() {
        if max as usize >= weights.d_ffn {
            return Err(Error::IndexOutOfRange(format!("hot neuron {max} out of range")));
        }
    }
    let true_cold: BTreeSet<u32> = oracle_activated(weights, x)
        .into_iter()
        .filter(|i| !hot_set.contains(i))
        .collect();
    let predicted_cold = predict(predictor, &true_cold, weights.d_ffn, token_key)?
        .into_iter()
        .filter(|i| !hot_set.contains(i))
        .collect::<BTreeSet<u32>>();
    if predicted_cold.intersection(hot_set).next().is_some() {
        return Err(Error::internal("hot and predicted cold partitions overlap".to_string()));
    }

    let mut out = vec![0.0f32; weights.d_model];
    let mut hot_iter = hot_set.iter().peekable();
    let mut cold_iter = predicted_cold.iter().peekable();
    // Merge the two sorted partitions so accumulation order matches the
    // dense path.
    loop {
        let i = match (hot_iter.peek(), cold_iter.peek()) {
            (Some(&&h), Some(&&c)) => {
                if h < c {
                    hot_iter.next();
                    h
                } else {
                    cold_iter.next();
                    c
                }
            }
            (Some(&&h), None) => {
                hot_iter.next();
                h
            }
            (None, Some(&&c)) => {
                cold_iter.next();
                c
            }
            (None, None) => break,
        };
        let coeff = neuron_coeff(weights, i as usize, x, Activation::Relu);
        if coeff == 0.0 {
            continue;
        }
        accumulate_neuron(weights, i as usize, coeff, &mut out);
    }
    let per_neuron = 3 * weights.d_model;
    Ok(HybridOutput {
        output: out,
        work: HybridWork {
            hot_elements: hot_set.len() * per_neuron,
            cold_elements: predicted_cold.len() * per_neuron,
        },
        predicted_cold,
    })
}

/// Phase tags emitted by the two-phase per-neuron evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IoPhase {
    /// Gate weights were loaded but the neuron turned out inactive.
    GateOnly,
    Gate,
    UpDown,
}

/// Phase 1 evaluates the Gate row; the Up/Down slices are touched only
/// when the ReLU output is nonzero.
pub fn two_phase_eval(bundle: &NeuronBundle, x: &[f32]) -> (Vec<f32>, Vec<IoPhase>) {
    let g = dot(&bundle.gate_row, x);
    if g <= 0.0 {
        return (vec![0.0f32; x.len()], vec![IoPhase::GateOnly]);
    }
    let coeff = g * dot(&bundle.up_row, x);
    let contribution = bundle.down_col.iter().map(|&d| coeff * d).collect();
    (contribution, vec![IoPhase::Gate, IoPhase::UpDown])
}


#[cfg(test)]
pub(crate) fn tests_dot32(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}
