use crate::{Error, Result, Tensor};

/// Mean squared error over every element, with its gradient.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::Dimension {
            op: "mse_loss",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let n = pred.numel() as f64;
    let diff: Vec<f64> = pred.data().iter().zip(target.data()).map(|(p, t)| p - t).collect();
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let grad = Tensor::with_dtype(
        pred.shape().to_vec(),
        diff.into_iter().map(|d| 2.0 * d / n).collect(),
        pred.dtype(),
    )?;
    Ok((loss, grad))
}

/// Mean softmax cross-entropy over the rows of `logits[.., K]`.
pub fn cross_entropy_loss(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    let k = logits.last_dim();
    let rows = logits.numel() / k;
    if rows != targets.len() {
        return Err(Error::Dimension {
            op: "cross_entropy_loss",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::Domain(format!("target class {bad} outside 0..{k}")));
    }
    let mut grad = Vec::with_capacity(logits.numel());
    let mut total = 0.0;
    for (row, &t) in logits.data().chunks(k).zip(targets) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        total += log_z - row[t];
        grad.extend(row.iter().enumerate().map(|(j, x)| {
            let p = (x - log_z).exp();
            (p - if j == t { 1.0 } else { 0.0 }) / rows as f64
        }));
    }
    let grad = Tensor::with_dtype(logits.shape().to_vec(), grad, logits.dtype())?;
    Ok((total / rows as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Distribution;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        Tensor::seeded_fill(shape, Distribution::Normal { mean: 0.0, std: 1.0 }, seed).unwrap()
    }

    #[test]
    fn mse_zero_at_target() {
        let x = randn(&[3, 2], 1);
        let (l, g) = mse_loss(&x, &x).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let (l, _) = cross_entropy_loss(&Tensor::zeros(&[4, 7]).unwrap(), &[0, 3, 6, 2]).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_central_differences() {
        let pred = randn(&[3, 4], 2);
        let target = randn(&[3, 4], 3);
        let labels = [1, 0, 3];
        let (_, g_mse) = mse_loss(&pred, &target).unwrap();
        let (_, g_ce) = cross_entropy_loss(&pred, &labels).unwrap();
        let h = 1e-6;
        for i in 0..pred.numel() {
            let bump = |d: f64| {
                let mut p = pred.clone();
                p.data_mut()[i] += d;
                p
            };
            let fd = (mse_loss(&bump(h), &target).unwrap().0 - mse_loss(&bump(-h), &target).unwrap().0) / (2.0 * h);
            assert!((fd - g_mse.data()[i]).abs() <= 1e-4 * fd.abs().max(g_mse.data()[i].abs()) + 1e-9);
            let fd = (cross_entropy_loss(&bump(h), &labels).unwrap().0 - cross_entropy_loss(&bump(-h), &labels).unwrap().0) / (2.0 * h);
            assert!((fd - g_ce.data()[i]).abs() <= 1e-4 * fd.abs().max(g_ce.data()[i].abs()) + 1e-9);
        }
    }

    #[test]
    fn error_paths() {
        assert!(mse_loss(&randn(&[2], 1), &randn(&[3], 1)).is_err());
        assert!(cross_entropy_loss(&randn(&[2, 3], 1), &[0]).is_err());
        assert!(matches!(cross_entropy_loss(&randn(&[1, 3], 1), &[3]), Err(Error::Domain(_))));
    }
}
