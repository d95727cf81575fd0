use serde::{Deserialize, Serialize};

use super::{bin_of, AffectLabel, ClassWeights, MetricError, CLASS_BINS};
use crate::scalar::Scalar;
use crate::tensor::{Graph, NodeId};

/// Variances at or below this are treated as degenerate in the loss.
const DEGENERATE_VAR: f64 = 1e-12;
/// Distance kept from 0 and 1 before taking logs of probabilities.
const PROB_CLAMP: f64 = 1e-7;

/// Class-balanced affect objective over predictions `[N × 2]` (valence, arousal).
///
/// Per dimension: the class-weighted mean of per-bin RMSE, plus batch-level
/// `(1 − COR) + (1 − CCC) + (1 − ICC)`. Correlation terms whose variances vanish
/// contribute nothing. The two dimensions are averaged.
pub fn affect_loss<T: Scalar>(
    g: &mut Graph<T>,
    preds: NodeId,
    truths: &[AffectLabel],
    weights: &ClassWeights,
) -> Result<NodeId, MetricError> {
    let shape = g.shape(preds).to_vec();
    if truths.is_empty() {
        return Err(MetricError::Empty);
    }
    if shape != [truths.len(), 2] {
        return Err(MetricError::LengthMismatch(shape[0], truths.len()));
    }
    let n = truths.len();
    let mut per_dim = Vec::with_capacity(2);
    for dim in 0..2 {
        let truth: Vec<f64> = truths.iter().map(|l| l.get(dim)).collect();
        let p = g.slice(preds, 1, dim, 1)?;
        let t = g.constant_from(&[n, 1], truth.iter().map(|&v| T::of(v)).collect())?;
        let diff = g.sub(p, t)?;
        let sq = g.mul(diff, diff)?;
        let mut total = weighted_rmse(g, sq, &truth, &weights.weights[dim])?;

        let mean_t = truth.iter().sum::<f64>() / n as f64;
        let var_t = truth.iter().map(|v| (v - mean_t) * (v - mean_t)).sum::<f64>() / n as f64;
        if n >= 2 && var_t > DEGENERATE_VAR {
            let mp = g.mean(p)?;
            let vp = g.var(p)?;
            let pc = g.sub(p, mp)?;
            let tc = g.offset(t, T::of(-mean_t));
            let prod = g.mul(pc, tc)?;
            let cov = g.mean(prod)?;
            let var_pred = g.scalar_value(vp).as_f64();
            let two_cov = g.scale(cov, T::of(2.0));
            if var_pred > DEGENERATE_VAR {
                let scaled = g.scale(vp, T::of(var_t));
                let denom = g.sqrt(scaled);
                let cor = g.div(cov, denom)?;
                total = one_minus(g, total, cor)?;
            }
            let shift = g.offset(mp, T::of(-mean_t));
            let shift_sq = g.mul(shift, shift)?;
            let var_sum = g.offset(vp, T::of(var_t));
            let ccc_denom = g.add(var_sum, shift_sq)?;
            let ccc = g.div(two_cov, ccc_denom)?;
            total = one_minus(g, total, ccc)?;
            let icc = g.div(two_cov, var_sum)?;
            total = one_minus(g, total, icc)?;
        }
        per_dim.push(total);
    }
    let both = g.add(per_dim[0], per_dim[1])?;
    Ok(g.scale(both, T::of(0.5)))
}

/// `acc + (1 − term)`
fn one_minus<T: Scalar>(g: &mut Graph<T>, acc: NodeId, term: NodeId) -> Result<NodeId, MetricError> {
    let neg = g.scale(term, -T::one());
    let part = g.offset(neg, T::one());
    Ok(g.add(acc, part)?)
}

/// `Σ_i w_i · RMSE_i / Σ_i w_i` over the bins present in the batch.
fn weighted_rmse<T: Scalar>(
    g: &mut Graph<T>,
    sq: NodeId,
    truth: &[f64],
    bin_weights: &[f64; CLASS_BINS],
) -> Result<NodeId, MetricError> {
    let n = truth.len();
    let bins: Vec<usize> = truth.iter().map(|&v| bin_of(v)).collect();
    let mut members = [0usize; CLASS_BINS];
    bins.iter().for_each(|&b| members[b] += 1);
    let present: f64 = (0..CLASS_BINS)
        .filter(|&b| members[b] > 0)
        .map(|b| bin_weights[b])
        .sum();
    if present <= 0.0 {
        // Every sample fell into a bin the weights never saw.
        let mse = g.mean(sq)?;
        return Ok(g.sqrt(mse));
    }
    let mut acc: Option<NodeId> = None;
    for b in 0..CLASS_BINS {
        let w = bin_weights[b];
        if members[b] == 0 || w <= 0.0 {
            continue;
        }
        let mask: Vec<T> = bins
            .iter()
            .map(|&x| if x == b { T::one() } else { T::zero() })
            .collect();
        let mask = g.constant_from(&[n, 1], mask)?;
        let masked = g.mul(sq, mask)?;
        let total = g.sum(masked)?;
        let mse = g.scale(total, T::of(1.0 / members[b] as f64));
        let rmse = g.sqrt(mse);
        let term = g.scale(rmse, T::of(w / present));
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one weighted bin is present"))
}

/// Generator objective variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialForm {
    /// `−E[log D(G(Ĩ))]`
    #[default]
    NonSaturating,
    /// `E[log(1 − D(G(Ĩ)))]`, the minimax form.
    Minimax,
}

fn check_probabilities<T: Scalar>(g: &Graph<T>, id: NodeId) -> Result<(), MetricError> {
    if let Some(&bad) = g.value(id).iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
        return Err(MetricError::OutOfRange(bad.as_f64(), 0.0, 1.0));
    }
    Ok(())
}

/// `(loss_D, loss_G)` from discriminator probabilities on real and generated images.
///
/// `loss_D = −mean log d_real − mean log(1 − d_fake)`. Probabilities are clamped
/// `1e-7` away from 0 and 1 before the logarithm.
pub fn adversarial_losses<T: Scalar>(
    g: &mut Graph<T>,
    d_real: NodeId,
    d_fake: NodeId,
    form: AdversarialForm,
) -> Result<(NodeId, NodeId), MetricError> {
    check_probabilities(g, d_real)?;
    check_probabilities(g, d_fake)?;
    let lo = T::of(PROB_CLAMP);
    let hi = T::one() - lo;
    let real = g.clamp(d_real, lo, hi);
    let fake = g.clamp(d_fake, lo, hi);
    let log_real = g.ln(real);
    let neg_fake = g.scale(fake, -T::one());
    let one_minus_fake = g.offset(neg_fake, T::one());
    let log_not_fake = g.ln(one_minus_fake);
    let mean_real = g.mean(log_real)?;
    let mean_not_fake = g.mean(log_not_fake)?;
    let sum = g.add(mean_real, mean_not_fake)?;
    let loss_d = g.scale(sum, -T::one());
    let loss_g = match form {
        AdversarialForm::NonSaturating => {
            let log_fake = g.ln(fake);
            let m = g.mean(log_fake)?;
            g.scale(m, -T::one())
        }
        AdversarialForm::Minimax => g.mean(log_not_fake)?,
    };
    Ok((loss_d, loss_g))
}

/// Mean of `−log softmax(logits_i)[target_i]` over rows of `logits [B × 4]` (or a single `[4]`).
pub fn quadrant_cross_entropy<T: Scalar>(
    g: &mut Graph<T>,
    logits: NodeId,
    targets: &[usize],
) -> Result<NodeId, MetricError> {
    let shape = g.shape(logits).to_vec();
    let rows = if shape == [4] {
        1
    } else if shape.len() == 2 && shape[1] == 4 {
        shape[0]
    } else {
        return Err(MetricError::LengthMismatch(shape.iter().product(), 4 * targets.len()));
    };
    if rows != targets.len() {
        return Err(MetricError::LengthMismatch(rows, targets.len()));
    }
    if let Some(&q) = targets.iter().find(|&&q| q >= 4) {
        return Err(MetricError::BadQuadrant(q));
    }
    let logp = g.log_softmax(logits)?;
    let mut onehot = vec![T::zero(); rows * 4];
    for (i, &q) in targets.iter().enumerate() {
        onehot[i * 4 + q] = T::one();
    }
    let mask = g.constant_from(&shape, onehot)?;
    let picked = g.mul(logp, mask)?;
    let total = g.sum(picked)?;
    Ok(g.scale(total, T::of(-1.0 / rows as f64)))
}
