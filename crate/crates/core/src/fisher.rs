//! Diagonal Fisher-information traces and the training-efficiency utility.
//!
//! For one example the trace of the Fisher matrix is the expected squared
//! norm of the loss gradient, where the label is drawn from the model's own
//! predictive distribution. [`FisherMode`] picks how that expectation is
//! realized:
//!
//! * `Sampled`: one label `ŷ ~ softmax(logits)` per example.
//! * `Exact`: `Σ_c p_c·‖∇ℓ(x, c)‖²`, one backward pass per class.
//! * `Empirical`: the true label, reusing the training gradient's deltas.
//!
//! A batch's trace is the mean over its examples.

use std::collections::VecDeque;

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax_rows, Batch, Model, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FisherMode {
    #[default]
    Sampled,
    Exact,
    Empirical,
}

/// Fisher trace of one batch under `model`.
pub fn batch_fisher_trace<R: Rng + ?Sized>(
    model: &Model,
    batch: &Batch,
    mode: FisherMode,
    rng: &mut R,
) -> Result<f64> {
    let k = model.arch().class_count();
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= k) {
        return Err(Error::DimensionMismatch(format!(
            "label {bad} outside 0..{k}"
        )));
    }
    let trace = model.forward_trace(batch.inputs.view())?;
    let probs = softmax_rows(trace.logits());
    Ok(trace_from_forward(
        model,
        &trace,
        &probs,
        &batch.labels,
        mode,
        rng,
    ))
}

/// Shared path for callers that already ran the forward pass.
pub(crate) fn trace_from_forward<R: Rng + ?Sized>(
    model: &Model,
    trace: &Trace,
    probs: &Array2<f64>,
    labels: &[usize],
    mode: FisherMode,
    rng: &mut R,
) -> f64 {
    let n = labels.len() as f64;
    let per_example: Vec<f64> = match mode {
        FisherMode::Empirical => {
            model.per_example_grad_sq_norms(trace, output_deltas(probs, labels.iter().copied()))
        }
        FisherMode::Sampled => {
            let drawn: Vec<usize> = probs
                .axis_iter(Axis(0))
                .map(|row| sample_categorical(row.iter().copied(), rng))
                .collect();
            model.per_example_grad_sq_norms(trace, output_deltas(probs, drawn))
        }
        FisherMode::Exact => {
            let k = probs.ncols();
            let mut acc = vec![0.0; labels.len()];
            for c in 0..k {
                let norms = model.per_example_grad_sq_norms(
                    trace,
                    output_deltas(probs, std::iter::repeat_n(c, labels.len())),
                );
                for (i, (a, g)) in acc.iter_mut().zip(norms).enumerate() {
                    *a += probs[[i, c]] * g;
                }
            }
            acc
        }
    };
    per_example.iter().sum::<f64>() / n
}

/// `softmax − onehot(label)` for every row.
fn output_deltas(probs: &Array2<f64>, labels: impl IntoIterator<Item = usize>) -> Array2<f64> {
    let mut delta = probs.clone();
    for (mut row, y) in delta.axis_iter_mut(Axis(0)).zip(labels) {
        row[y] -= 1.0;
    }
    delta
}

fn sample_categorical<R: Rng + ?Sized>(probs: impl Iterator<Item = f64>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.enumerate() {
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// One client's recent per-batch traces, newest last.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherHistory {
    entries: VecDeque<(usize, Vec<f64>)>,
    capacity: usize,
    window: usize,
    batch_count: usize,
}

impl FisherHistory {
    /// `window` is the smoothing window `D`; `capacity ≥ window` bounds memory.
    pub fn new(batch_count: usize, window: usize, capacity: usize) -> Result<Self> {
        if batch_count == 0 || window == 0 || capacity < window {
            return Err(Error::InvalidArgument(format!(
                "history needs batch_count ≥ 1 and 1 ≤ window ≤ capacity, got {batch_count}, {window}, {capacity}"
            )));
        }
        Ok(Self {
            entries: VecDeque::with_capacity(capacity),
            capacity,
            window,
            batch_count,
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn batch_count(&self) -> usize {
        self.batch_count
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn record_round(&mut self, round: usize, traces: Vec<f64>) -> Result<()> {
        if traces.len() != self.batch_count {
            return Err(Error::DimensionMismatch(format!(
                "{} traces for {} batches",
                traces.len(),
                self.batch_count
            )));
        }
        if let Some(bad) = traces.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::NumericFailure(format!("Fisher trace {bad}")));
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((round, traces));
        Ok(())
    }

    pub fn get(&self, round: usize) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(r, _)| *r == round)
            .map(|(_, v)| v.as_slice())
    }

    pub fn rounds(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|(r, _)| *r)
    }

    /// Traces recorded for rounds `round − D ..= round − 1`.
    pub fn windowed(&self, round: usize) -> impl Iterator<Item = &[f64]> {
        let lo = round.saturating_sub(self.window);
        self.entries
            .iter()
            .filter(move |(r, _)| *r >= lo && *r < round)
            .map(|(_, v)| v.as_slice())
    }

    /// Training-efficiency utility for selecting at `round`.
    ///
    /// `TE = |B|·sqrt( Σ_k Σ_d FI_{r−d}(k)² / (|B|·|D'|) )` where `D'` is the
    /// part of the window that has been recorded. Zero with no history.
    pub fn training_efficiency(&self, round: usize) -> f64 {
        let mut sum_sq = 0.0;
        let mut slots = 0usize;
        for traces in self.windowed(round) {
            sum_sq += traces.iter().map(|v| v * v).sum::<f64>();
            slots += 1;
        }
        if slots == 0 {
            return 0.0;
        }
        let b = self.batch_count as f64;
        b * (sum_sq / (b * slots as f64)).sqrt()
    }
}
