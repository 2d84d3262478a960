//! Normalized root-mean-squared error over `(w, v)` pairs.

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub sum: f64,
    pub mean: f64,
}

fn check(preds: &[(f64, f64)], truths: &[(f64, f64)], max_w: f64, max_v: f64) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if preds.len() != truths.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} truths", preds.len()),
            got: format!("{}", truths.len()),
        });
    }
    if !(max_w > 0.0 && max_v > 0.0) {
        return Err(Error::InvalidArg(format!("normalizers must be positive, got ({max_w}, {max_v})")));
    }
    Ok(())
}

fn radicand(p: (f64, f64), t: (f64, f64), max_w: f64, max_v: f64) -> f64 {
    let dw = p.0 - t.0;
    let dv = p.1 - t.1;
    dw * dw / max_w + dv * dv / max_v
}

/// `sum_i sqrt((w_hat - w)^2 / max_w + (v_hat - v)^2 / max_v)`, also
/// reported as a per-sample mean.
pub fn nrmse_loss(preds: &[(f64, f64)], truths: &[(f64, f64)], max_w: f64, max_v: f64) -> Result<LossValue> {
    check(preds, truths, max_w, max_v)?;
    let sum: f64 = preds.iter().zip(truths).map(|(&p, &t)| radicand(p, t, max_w, max_v).sqrt()).sum();
    Ok(LossValue { sum, mean: sum / preds.len() as f64 })
}

/// Gradient of the summed loss with respect to the normalized network
/// outputs `(w_hat / max_w, v_hat / max_v)`. Zero where the radicand is 0.
pub fn nrmse_grad(preds: &[(f64, f64)], truths: &[(f64, f64)], max_w: f64, max_v: f64) -> Result<Vec<(f64, f64)>> {
    check(preds, truths, max_w, max_v)?;
    Ok(preds
        .iter()
        .zip(truths)
        .map(|(&p, &t)| {
            let r = radicand(p, t, max_w, max_v);
            if r > 0.0 {
                let root = r.sqrt();
                ((p.0 - t.0) / root, (p.1 - t.1) / root)
            } else {
                (0.0, 0.0)
            }
        })
        .collect())
}
