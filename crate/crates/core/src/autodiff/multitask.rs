//! The multi-format training step: one forward pass per example on a shared
//! tape, per-format mean squared errors summed into one loss, a single
//! backward pass and one Adam update.

use crate::autodiff::optim::{adam_step, OptimizerState};
use crate::autodiff::Tape;
use crate::corpus::ScoredExample;
use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig, ModelParams, ParamNodes};
use crate::mra::build_mask;
use crate::packing::{pack, TaskFormat};
use crate::tensor::Matrix;

/// Examples trained under one input format.
#[derive(Debug, Clone)]
pub struct FormatBatch<'e> {
    pub format: TaskFormat,
    pub examples: Vec<&'e ScoredExample>,
}

impl<'e> FormatBatch<'e> {
    pub fn new(format: TaskFormat, examples: Vec<&'e ScoredExample>) -> Self {
        Self { format, examples }
    }
}

/// Per-format mean losses of one step, before the update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLosses {
    pub ref_loss: Option<f64>,
    pub src_loss: Option<f64>,
    pub src_ref_loss: Option<f64>,
    pub grad_norm: f64,
}

impl StepLosses {
    pub fn get(&self, format: TaskFormat) -> Option<f64> {
        match format {
            TaskFormat::Ref => self.ref_loss,
            TaskFormat::Src => self.src_loss,
            TaskFormat::SrcRef => self.src_ref_loss,
        }
    }

    fn set(&mut self, format: TaskFormat, value: f64) {
        match format {
            TaskFormat::Ref => self.ref_loss = Some(value),
            TaskFormat::Src => self.src_loss = Some(value),
            TaskFormat::SrcRef => self.src_ref_loss = Some(value),
        }
    }

    /// Sum of the present per-format losses.
    pub fn total(&self) -> f64 {
        TaskFormat::ALL.iter().filter_map(|&f| self.get(f)).sum()
    }
}

/// Gradients of `Σ_format mean_batch (p − q)²` with respect to every
/// parameter tensor, in declaration order.
pub fn model_gradients(
    params: &ModelParams,
    config: &ModelConfig,
    batches: &[FormatBatch<'_>],
) -> Result<(Vec<Matrix>, StepLosses)> {
    if batches.is_empty() {
        return Err(Error::EmptyBatch("no format batches".into()));
    }
    let mut tape = Tape::new();
    let nodes = ParamNodes::register(&mut tape, params);
    let mut format_losses = Vec::with_capacity(batches.len());
    let mut losses = StepLosses::default();
    for batch in batches {
        if batch.examples.is_empty() {
            return Err(Error::EmptyBatch(format!("{} batch", batch.format)));
        }
        if losses.get(batch.format).is_some() {
            return Err(Error::Invalid(format!("duplicate {} batch", batch.format)));
        }
        let variant = config.masks.get(batch.format);
        let mut errs = Vec::with_capacity(batch.examples.len());
        for ex in &batch.examples {
            let packed = pack(&ex.hyp, Some(&ex.src), Some(&ex.reference), batch.format)?;
            let mask = build_mask(variant, &packed)?;
            let trace = forward(&mut tape, &nodes, params, config, &packed, &mask)?;
            errs.push(tape.squared_error(trace.prediction, ex.score)?);
        }
        let n = errs.len() as f64;
        let sum = tape.sum(errs)?;
        let mean = tape.scale(sum, 1.0 / n);
        losses.set(batch.format, tape.value(mean).item());
        format_losses.push(mean);
    }
    let total = tape.sum(format_losses)?;
    if !tape.value(total).is_finite() {
        return Err(Error::NonFinite(format!("loss {}", tape.value(total).item())));
    }
    let grads = tape.backward(total)?;
    let out = nodes
        .ids()
        .iter()
        .zip(params.tensors())
        .map(|(&id, (_, m))| {
            grads
                .wrt(id)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()))
        })
        .collect();
    Ok((out, losses))
}

/// One summed-loss update across the given format batches.
pub fn multitask_step(
    params: &mut ModelParams,
    config: &ModelConfig,
    batches: &[FormatBatch<'_>],
    state: &mut OptimizerState,
) -> Result<StepLosses> {
    let (grads, mut losses) = model_gradients(params, config, batches)?;
    losses.grad_norm = adam_step(&mut params.tensors_mut(), grads, state)?;
    Ok(losses)
}
