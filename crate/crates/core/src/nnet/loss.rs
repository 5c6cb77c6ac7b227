use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Loss {
    CrossEntropy,
    /// `(1 - p_y)^gamma * CE`.
    Focal { gamma: f64 },
}

pub fn log_softmax_rows(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax_rows(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    log_softmax_rows(logits).mapv(f64::exp)
}

fn check(logits: &ArrayView2<'_, f64>, labels: &[usize], weights: Option<&[f64]>) -> Result<()> {
    if labels.len() != logits.nrows() {
        return Err(Error::shape(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.nrows()
        )));
    }
    if let Some(w) = weights {
        if w.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} weights for batch of {}",
                w.len(),
                labels.len()
            )));
        }
        if w.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::invalid("sample weights must be non-negative"));
        }
    }
    let classes = logits.ncols();
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

impl Loss {
    /// Mean weighted loss `(1/b) sum w_i l_i`, the weighted per-sample
    /// terms `w_i l_i`, and the gradient of the mean with respect to the
    /// logits.
    pub fn evaluate(
        self,
        logits: ArrayView2<'_, f64>,
        labels: &[usize],
        weights: &[f64],
    ) -> Result<(f64, Vec<f64>, Array2<f64>)> {
        check(&logits, labels, Some(weights))?;
        let b = labels.len();
        if b == 0 {
            return Ok((0.0, Vec::new(), Array2::zeros(logits.dim())));
        }
        let logp = log_softmax_rows(logits);
        let mut grad = logp.mapv(f64::exp);
        let mut per_sample = Vec::with_capacity(b);
        for (i, (&y, &w)) in labels.iter().zip(weights).enumerate() {
            let lp = logp[[i, y]];
            let ce = -lp;
            let mut row = grad.row_mut(i);
            match self {
                Loss::CrossEntropy => {
                    per_sample.push(w * ce);
                    row[y] -= 1.0;
                    row.mapv_inplace(|g| g * w / b as f64);
                }
                Loss::Focal { gamma } => {
                    let p = lp.exp();
                    let q = 1.0 - p;
                    let modulator = q.powf(gamma);
                    per_sample.push(w * modulator * ce);
                    // d/dp [(1-p)^g * (-ln p)], with the (1-p)^(g-1) ln p term
                    // taken as its limit 0 at p = 1
                    let dq_term = if q > 0.0 && gamma > 0.0 {
                        gamma * q.powf(gamma - 1.0) * lp
                    } else {
                        0.0
                    };
                    let dl_dp = dq_term - modulator / p;
                    // dp/dz_k = p ([k == y] - p_k)
                    let scale = w * dl_dp * p / b as f64;
                    row.mapv_inplace(|pk| -pk * scale);
                    row[y] += scale;
                }
            }
        }
        let mean = per_sample.iter().sum::<f64>() / b as f64;
        Ok((mean, per_sample, grad))
    }
}

/// `(mean, per_sample)` of the weighted cross-entropy, where
/// `per_sample[i] = w_i * CE_i` and `mean = sum / b`.
pub fn weighted_ce_loss(
    logits: ArrayView2<'_, f64>,
    labels: &[usize],
    weights: &[f64],
) -> Result<(f64, Vec<f64>)> {
    Loss::CrossEntropy
        .evaluate(logits, labels, weights)
        .map(|(m, p, _)| (m, p))
}

pub fn focal_loss(logits: ArrayView2<'_, f64>, labels: &[usize], gamma: f64) -> Result<(f64, Vec<f64>)> {
    if !(gamma >= 0.0) {
        return Err(Error::invalid(format!("focal gamma must be >= 0, got {gamma}")));
    }
    let ones = vec![1.0; labels.len()];
    Loss::Focal { gamma }
        .evaluate(logits, labels, &ones)
        .map(|(m, p, _)| (m, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::f64::consts::LN_2;

    #[test]
    fn weighted_ce_hand_values() {
        let z = array![[0.0, 0.0]];
        let (mean, per) = weighted_ce_loss(z.view(), &[0], &[2.0]).unwrap();
        assert!((per[0] - 2.0 * LN_2).abs() < 1e-15);
        assert!((mean - 2.0 * LN_2).abs() < 1e-15);
    }

    #[test]
    fn unit_and_zero_weights() {
        let z = array![[1.0, -1.0, 0.5], [0.0, 2.0, -3.0]];
        let y = [2, 1];
        let (mean, _) = weighted_ce_loss(z.view(), &y, &[1.0, 1.0]).unwrap();
        let logp = log_softmax_rows(z.view());
        let expected = -(logp[[0, 2]] + logp[[1, 1]]) / 2.0;
        assert!((mean - expected).abs() < 1e-15);
        let (zero, _) = weighted_ce_loss(z.view(), &y, &[0.0, 0.0]).unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn shape_and_label_errors() {
        let z = array![[1.0, 2.0]];
        assert!(matches!(weighted_ce_loss(z.view(), &[0], &[1.0, 1.0]), Err(Error::ShapeMismatch(_))));
        assert!(matches!(weighted_ce_loss(z.view(), &[0, 1], &[1.0, 1.0]), Err(Error::ShapeMismatch(_))));
        assert!(matches!(weighted_ce_loss(z.view(), &[2], &[1.0]), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn focal_hand_values() {
        let z = array![[0.0, 0.0]];
        let (f, _) = focal_loss(z.view(), &[0], 2.0).unwrap();
        assert!((f - 0.25 * LN_2).abs() < 1e-15);
        let z = array![[0.3, -1.2, 2.0], [1.0, 1.0, 0.0]];
        let (f0, _) = focal_loss(z.view(), &[1, 2], 0.0).unwrap();
        let (ce, _) = weighted_ce_loss(z.view(), &[1, 2], &[1.0, 1.0]).unwrap();
        assert!((f0 - ce).abs() < 1e-15);
        // confident correct prediction: modulating factor vanishes
        let z = array![[60.0, 0.0]];
        let (f, _) = focal_loss(z.view(), &[0], 2.0).unwrap();
        assert!(f < 1e-40);
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        let z = array![[0.3, -1.2, 2.0], [1.0, 1.0, 0.0]];
        let y = [1, 2];
        let w = [0.7, 1.3];
        for loss in [Loss::CrossEntropy, Loss::Focal { gamma: 2.0 }, Loss::Focal { gamma: 0.5 }] {
            let (_, _, g) = loss.evaluate(z.view(), &y, &w).unwrap();
            let h = 1e-6;
            for i in 0..2 {
                for k in 0..3 {
                    let mut up = z.clone();
                    up[[i, k]] += h;
                    let mut dn = z.clone();
                    dn[[i, k]] -= h;
                    let fd = (loss.evaluate(up.view(), &y, &w).unwrap().0
                        - loss.evaluate(dn.view(), &y, &w).unwrap().0)
                        / (2.0 * h);
                    assert!((fd - g[[i, k]]).abs() < 1e-8, "{loss:?} {i} {k}");
                }
            }
        }
    }
}
