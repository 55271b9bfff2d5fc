//! Central-difference verification of the backward pass.
//!
//! Relative error is `|a - b| / max(|a|, |b|, 1e-8)`. Every parameter and
//! input coordinate is checked when there are at most 1,000 of them;
//! otherwise a random subsample of 1,000 drawn from a fixed-seed generator,
//! so repeated runs check the same coordinates.
//!
//! The network is piecewise smooth: ReLU and max pooling fold the loss
//! surface along the hyperplanes where an activation changes sign or a
//! pooling window changes winner. A central difference whose `[-h, +h]`
//! probe interval crosses such a fold estimates the secant across the kink,
//! not the one-sided derivative that backprop (correctly) reports, so the
//! comparison at that coordinate says nothing about gradient correctness.
//! The check therefore evaluates the activation pattern at the base point
//! and at both probe points, and excludes coordinates whose pattern changes
//! — the classic "track the winners" rule for checking gradients of
//! piecewise-linear networks. Excluded coordinates are tallied in
//! [`GradCheckReport::skipped`]; callers that want a guarantee on oracle
//! coverage should bound it. The exclusion looks only at forward-pass
//! activations, so a broken backward pass cannot hide behind it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{self, GradRequest};
use crate::error::{Error, Result};
use crate::model::{Layer, Model};
use crate::tensor::Tensor;

const SUBSAMPLE: usize = 1000;
const SUBSAMPLE_SEED: u64 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    /// Number of coordinates actually compared.
    pub checked: usize,
    /// Coordinates excluded because the `[-h, +h]` probe interval crossed a
    /// ReLU sign change or a pooling-winner change, making the central
    /// difference a secant across a kink rather than a derivative estimate.
    pub skipped: usize,
}

/// Compares analytic gradients against central finite differences with step
/// `h`; passes iff the maximum relative error over the compared coordinates
/// is at most `tol`. Coordinates where the probe interval crosses an
/// activation-pattern boundary are skipped (see the module docs) and
/// reported in [`GradCheckReport::skipped`].
///
/// `tol = 0` is accepted and simply cannot pass: truncation error is nonzero.
pub fn grad_check(
    model: &Model,
    batch: &Tensor,
    labels: &[usize],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::invalid_param("h", format!("{h} (need finite > 0)")));
    }
    if !(tol >= 0.0) || !tol.is_finite() {
        return Err(Error::invalid_param("tol", format!("{tol} (need finite >= 0)")));
    }

    let (_, _, grads) = autodiff::run(model, batch, labels, GradRequest { params: true, input: true })?;
    let (_, base_pattern) = autodiff::loss_and_pattern(model, batch, labels)?;

    // Flat coordinate space: parameters in layer order (weight then bias),
    // then the input batch.
    let mut spans = Vec::new(); // (layer, which) per parameter tensor
    for (li, layer) in model.layers().iter().enumerate() {
        if let Layer::Conv2d { weight, bias, .. } | Layer::Dense { weight, bias, .. } = layer {
            spans.push((li, 0, weight.len()));
            spans.push((li, 1, bias.len()));
        }
    }
    let param_total: usize = spans.iter().map(|s| s.2).sum();
    let total = param_total + batch.len();

    let coords: Vec<usize> = if total <= SUBSAMPLE {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(SUBSAMPLE_SEED);
        let mut picks = rand::seq::index::sample(&mut rng, total, SUBSAMPLE).into_vec();
        picks.sort_unstable();
        picks
    };

    let mut work_model = model.clone();
    let mut work_batch = batch.clone();
    let ginput = grads.input.as_ref().expect("input gradient requested");

    let mut max_rel_err = 0.0f64;
    let mut skipped = 0usize;
    for &coord in &coords {
        let analytic;
        let (plus, pat_plus);
        let (minus, pat_minus);
        if coord < param_total {
            let (li, which, offset) = locate(&spans, coord);
            let (gw, gb) = grads.layers[li].as_ref().expect("param layer has gradients");
            analytic = if which == 0 { gw.data()[offset] } else { gb.data()[offset] };
            nudge(&mut work_model, li, which, offset, h);
            (plus, pat_plus) = autodiff::loss_and_pattern(&work_model, batch, labels)?;
            nudge(&mut work_model, li, which, offset, -2.0 * h);
            (minus, pat_minus) = autodiff::loss_and_pattern(&work_model, batch, labels)?;
            nudge(&mut work_model, li, which, offset, h);
        } else {
            let j = coord - param_total;
            analytic = ginput.data()[j];
            work_batch.data_mut()[j] += h;
            (plus, pat_plus) = autodiff::loss_and_pattern(model, &work_batch, labels)?;
            work_batch.data_mut()[j] -= 2.0 * h;
            (minus, pat_minus) = autodiff::loss_and_pattern(model, &work_batch, labels)?;
            work_batch.data_mut()[j] = batch.data()[j];
        }
        if pat_plus != base_pattern || pat_minus != base_pattern {
            skipped += 1;
            continue;
        }
        let fd = (plus - minus) / (2.0 * h);
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
        max_rel_err = max_rel_err.max(rel);
    }

    Ok(GradCheckReport {
        max_rel_err,
        pass: max_rel_err <= tol,
        checked: coords.len() - skipped,
        skipped,
    })
}

/// Maps a flat parameter coordinate to (layer, weight-or-bias, offset).
fn locate(spans: &[(usize, usize, usize)], coord: usize) -> (usize, usize, usize) {
    let mut at = coord;
    for &(li, which, len) in spans {
        if at < len {
            return (li, which, at);
        }
        at -= len;
    }
    unreachable!("coordinate within param_total");
}

fn nudge(model: &mut Model, li: usize, which: usize, offset: usize, delta: f64) {
    let t = match (&mut model.layers_mut()[li], which) {
        (Layer::Conv2d { weight, .. }, 0) | (Layer::Dense { weight, .. }, 0) => weight,
        (Layer::Conv2d { bias, .. }, 1) | (Layer::Dense { bias, .. }, 1) => bias,
        _ => unreachable!("span points at a parameter tensor"),
    };
    t.data_mut()[offset] += delta;
}
