//! Central finite-difference verification of analytic gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::multitask::{model_gradients, FormatBatch};
use crate::corpus::ScoredExample;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::packing::{pack, Segment, TaskFormat};
use crate::tensor::Matrix;

/// Smallest denominator of the relative error.
const REL_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Worst coordinate as `(tensor index, flat offset, analytic, numeric)`.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub per_tensor: Vec<TensorCheck>,
}

/// Compares `analytic` against central differences of `loss` at the given
/// `(tensor, flat offset)` coordinates. `tensors` is restored afterwards.
pub fn grad_check_fn(
    tensors: &mut [Matrix],
    names: &[String],
    analytic: &[Matrix],
    coords: &[(usize, usize)],
    epsilon: f64,
    mut loss: impl FnMut(&[Matrix]) -> Result<f64>,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Invalid(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    if tensors.len() != analytic.len() || tensors.len() != names.len() {
        return Err(Error::LengthMismatch(format!(
            "{} tensors, {} gradients, {} names",
            tensors.len(),
            analytic.len(),
            names.len()
        )));
    }
    let mut per_tensor: Vec<TensorCheck> = names
        .iter()
        .map(|n| TensorCheck {
            name: n.clone(),
            checked: 0,
            max_rel_error: 0.0,
        })
        .collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
        per_tensor: Vec::new(),
    };
    for &(t, i) in coords {
        let original = tensors[t].as_slice()[i];
        tensors[t].as_mut_slice()[i] = original + epsilon;
        let plus = loss(tensors)?;
        tensors[t].as_mut_slice()[i] = original - epsilon;
        let minus = loss(tensors)?;
        tensors[t].as_mut_slice()[i] = original;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[t].as_slice()[i];
        let err = relative_error(a, numeric);
        if !err.is_finite() {
            return Err(Error::NonFinite(format!("gradient check at {}[{i}]", names[t])));
        }
        let slot = &mut per_tensor[t];
        slot.checked += 1;
        slot.max_rel_error = slot.max_rel_error.max(err);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((t, i, a, numeric));
        }
    }
    report.per_tensor = per_tensor;
    Ok(report)
}

/// Flat offsets of `m` whose gradient can be non-zero for this input: only
/// the looked-up rows of gather tables.
fn eligible(name: &str, m: &Matrix, tokens: &[u32], seg_rows: &[usize]) -> Vec<usize> {
    let rows: Vec<usize> = match name {
        "token_embedding" => {
            let mut r: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
            r.sort_unstable();
            r.dedup();
            r
        }
        "position_embedding" => (0..tokens.len()).collect(),
        "segment_embedding" => seg_rows.to_vec(),
        _ => return (0..m.len()).collect(),
    };
    rows.iter().flat_map(|&r| r * m.cols()..(r + 1) * m.cols()).collect()
}

/// Checks the model gradient of `(p − q)²` on one example in one format,
/// sampling at least `samples` coordinates spread over every tensor.
pub fn model_grad_check(
    params: &ModelParams,
    config: &ModelConfig,
    example: &ScoredExample,
    format: TaskFormat,
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let batch = [FormatBatch::new(format, vec![example])];
    let (analytic, _) = model_gradients(params, config, &batch)?;
    let packed = pack(&example.hyp, Some(&example.src), Some(&example.reference), format)?;
    let seg_rows: Vec<usize> = packed.spans().present().iter().map(|(s, _)| Segment::index(*s)).collect();

    let named = params.tensors();
    let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    let pools: Vec<Vec<usize>> = named
        .iter()
        .map(|(n, m)| eligible(n, m, packed.tokens(), &seg_rows))
        .collect();
    // Equal quota per tensor, then spare budget to tensors with room left.
    let mut quota: Vec<usize> = pools.iter().map(|p| p.len().min(samples.div_ceil(pools.len()).max(1))).collect();
    let capacity: usize = pools.iter().map(Vec::len).sum();
    while quota.iter().sum::<usize>() < samples.min(capacity) {
        for (q, p) in quota.iter_mut().zip(&pools) {
            if *q < p.len() {
                *q += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<(usize, usize)> = pools
        .iter()
        .zip(&quota)
        .enumerate()
        .flat_map(|(t, (pool, &q))| {
            pool.choose_multiple(&mut rng, q)
                .map(move |&i| (t, i))
                .collect::<Vec<_>>()
        })
        .collect();

    let mut tensors: Vec<Matrix> = named.iter().map(|(_, m)| (*m).clone()).collect();
    drop(named);
    let mut scratch = params.clone();
    grad_check_fn(&mut tensors, &names, &analytic, &coords, epsilon, |ts| {
        for (dst, src) in scratch.tensors_mut().into_iter().zip(ts) {
            dst.as_mut_slice().copy_from_slice(src.as_slice());
        }
        let p = crate::model::score_packed(&packed, &scratch, config, None)?;
        Ok(crate::autodiff::mse_loss(p, example.score))
    })
}

/// A regression target 0.01 above the current prediction. Roundoff in the
/// loss scales with `|p − q|`, so a near target keeps the central-difference
/// noise on vanishing gradients well under the denominator floor.
pub fn grad_check_target(
    params: &ModelParams,
    config: &ModelConfig,
    example: &ScoredExample,
    format: TaskFormat,
) -> Result<f64> {
    let p = crate::model::score(&example.hyp, Some(&example.src), Some(&example.reference), format, params, config, None)?;
    Ok(p + 0.01)
}

/// Gradient check with the default sample budget of 256 coordinates.
pub fn grad_check(
    params: &ModelParams,
    config: &ModelConfig,
    example: &ScoredExample,
    format: TaskFormat,
    epsilon: f64,
) -> Result<GradCheckReport> {
    model_grad_check(params, config, example, format, epsilon, 256, 0)
}
