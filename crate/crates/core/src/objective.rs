//! Losses: classification cross-entropy, the Wasserstein critic loss, the
//! gradient penalty, and their assembly into the critic and generator
//! objectives.

use ndarray::{concatenate, Array2, Axis};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{critic_input_gradient, CriticVars, DenseMatrix, Tape, Var};
use crate::error::{Error, Result};
use crate::model::TaskMode;

/// Scalar values of the loss terms for one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub classification: f64,
    pub critic: f64,
    pub gradient_penalty: f64,
    pub weight_decay: f64,
}

/// Cross-entropy averaged over labeled rows.
///
/// Multi-class uses `-Σ Y log Ŷ`; multi-label uses the full binary
/// cross-entropy `-Σ [Y log Ŷ + (1-Y) log(1-Ŷ)]`. Logarithm arguments are
/// clamped at `1e-12`.
pub fn classification_loss(
    tape: &mut Tape,
    scores: Var,
    labels: &DenseMatrix,
    mode: TaskMode,
) -> Result<Var> {
    let (rows, cols) = tape.shape(scores);
    if rows == 0 {
        return Err(Error::Config(
            "classification loss over an empty labeled set".into(),
        ));
    }
    if labels.shape() != [rows, cols] {
        return Err(Error::Shape(format!(
            "scores {rows}x{cols} against labels {:?}",
            labels.shape()
        )));
    }
    let y = tape.constant(labels.clone());
    let log_p = tape.log_clamped(scores);
    let positive = tape.mul(y, log_p)?;
    let per_entry = match mode {
        TaskMode::MultiClass => positive,
        TaskMode::MultiLabel => {
            let not_y = tape.constant(labels.mapv(|v| 1.0 - v));
            let flipped = tape.scale(scores, -1.0);
            let complement = tape.add_scalar(flipped, 1.0);
            let log_q = tape.log_clamped(complement);
            let negative = tape.mul(not_y, log_q)?;
            tape.add(positive, negative)?
        }
    };
    let total = tape.sum(per_entry);
    Ok(tape.scale(total, -1.0 / rows as f64))
}

/// `mean(source_scores) - mean(target_scores)`.
pub fn critic_loss(tape: &mut Tape, source_scores: Var, target_scores: Var) -> Result<Var> {
    if tape.shape(source_scores).0 == 0 || tape.shape(target_scores).0 == 0 {
        return Err(Error::Contract("critic loss over an empty batch".into()));
    }
    let s = tape.mean(source_scores)?;
    let t = tape.mean(target_scores)?;
    tape.sub(s, t)
}

/// Random points on segments between source and target representations.
///
/// With `N = min(rows)`, draws `N` source rows and `N` target rows (without
/// replacement), pairs them in draw order, and mixes each pair with a fresh
/// `ε ~ U[0, 1]`: `ε·h_s + (1-ε)·h_t`.
pub fn interpolate<R: Rng + ?Sized>(
    source: &DenseMatrix,
    target: &DenseMatrix,
    rng: &mut R,
) -> Result<DenseMatrix> {
    if source.ncols() != target.ncols() {
        return Err(Error::Shape(format!(
            "interpolating widths {} and {}",
            source.ncols(),
            target.ncols()
        )));
    }
    let n = source.nrows().min(target.nrows());
    let s_idx = sample(rng, source.nrows(), n).into_vec();
    let t_idx = sample(rng, target.nrows(), n).into_vec();
    let mut out = Array2::zeros((n, source.ncols()));
    for (k, (&i, &j)) in s_idx.iter().zip(&t_idx).enumerate() {
        let eps: f64 = rng.gen();
        let mut row = out.row_mut(k);
        row.assign(&(&source.row(i) * eps + &target.row(j) * (1.0 - eps)));
    }
    Ok(out)
}

/// Stacks source rows, target rows and their interpolates into the
/// gradient-penalty batch.
pub fn penalty_batch<R: Rng + ?Sized>(
    source: &DenseMatrix,
    target: &DenseMatrix,
    rng: &mut R,
) -> Result<DenseMatrix> {
    let mixed = interpolate(source, target, rng)?;
    concatenate(Axis(0), &[source.view(), target.view(), mixed.view()])
        .map_err(|e| Error::Shape(e.to_string()))
}

/// `mean_rows (‖∇_h f_d(h)‖₂ - 1)²`, differentiable in the critic weights.
pub fn gradient_penalty(tape: &mut Tape, critic: &CriticVars, batch: &DenseMatrix) -> Result<Var> {
    let h = tape.constant(batch.clone());
    let grads = critic_input_gradient(tape, critic, h)?;
    let norms = tape.row_norms(grads);
    let shifted = tape.add_scalar(norms, -1.0);
    let squared = tape.square(shifted);
    tape.mean(squared)
}

/// `L_d - γ·L_grad`, ascended in the critic weights.
pub fn critic_objective(
    tape: &mut Tape,
    critic_loss: Var,
    penalty: Var,
    gamma: f64,
) -> Result<Var> {
    if gamma < 0.0 {
        return Err(Error::Config(format!(
            "gradient penalty coefficient {gamma} < 0"
        )));
    }
    let scaled = tape.scale(penalty, gamma);
    tape.sub(critic_loss, scaled)
}

/// `coefficient · Σ‖θ‖²` over the given parameters.
pub fn weight_decay(tape: &mut Tape, params: &[Var], coefficient: f64) -> Result<Var> {
    let mut total = tape.constant(Array2::zeros((1, 1)));
    for &p in params {
        let sq = tape.sum_squares(p);
        total = tape.add(total, sq)?;
    }
    Ok(tape.scale(total, coefficient))
}

/// `L_c + λ·L_d + decay`, descended in the generator and classifier weights.
///
/// With `λ = 0` the critic term is left out of the graph entirely.
pub fn generator_objective(
    tape: &mut Tape,
    classification: Var,
    critic_loss: Var,
    lambda: f64,
    decay: Var,
) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::Config(format!(
            "domain adaptation coefficient {lambda} < 0"
        )));
    }
    let base = if lambda == 0.0 {
        classification
    } else {
        let scaled = tape.scale(critic_loss, lambda);
        tape.add(classification, scaled)?
    };
    tape.add(base, decay)
}
