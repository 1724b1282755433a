//! Training losses selectable by name.

use std::sync::Arc;

use crate::error::{ensure, Result};
use crate::registry::Registry;

pub trait Loss: Send + Sync {
    /// Loss value and its gradient with respect to `pred`. Optional
    /// non-negative weights turn the mean into a weighted mean.
    fn value_and_grad(&self, pred: &[f64], target: &[f64], weights: Option<&[f64]>) -> Result<(f64, Vec<f64>)>;

    fn value(&self, pred: &[f64], target: &[f64], weights: Option<&[f64]>) -> Result<f64> {
        self.value_and_grad(pred, target, weights).map(|(v, _)| v)
    }
}

fn normalizer(n: usize, weights: Option<&[f64]>) -> Result<f64> {
    match weights {
        None => Ok(n as f64),
        Some(w) => {
            ensure!(w.len() == n, Shape, "{} weights for {n} values", w.len());
            ensure!(w.iter().all(|&v| v >= 0.0), InvalidArgument, "negative loss weight");
            let total: f64 = w.iter().sum();
            ensure!(total > 0.0, InvalidArgument, "loss weights sum to zero");
            Ok(total)
        }
    }
}

fn check(pred: &[f64], target: &[f64]) -> Result<()> {
    ensure!(
        pred.len() == target.len(),
        Shape,
        "prediction has {} values, target {}",
        pred.len(),
        target.len()
    );
    ensure!(!pred.is_empty(), Shape, "empty prediction");
    Ok(())
}

/// Mean squared error.
pub struct Mse;

impl Loss for Mse {
    fn value_and_grad(&self, pred: &[f64], target: &[f64], weights: Option<&[f64]>) -> Result<(f64, Vec<f64>)> {
        check(pred, target)?;
        let z = normalizer(pred.len(), weights)?;
        let mut value = 0.0;
        let mut grad = Vec::with_capacity(pred.len());
        for (i, (p, t)) in pred.iter().zip(target).enumerate() {
            let w = weights.map_or(1.0, |w| w[i]);
            let d = p - t;
            value += w * d * d;
            grad.push(2.0 * w * d / z);
        }
        Ok((value / z, grad))
    }
}

/// Mean absolute error; the subgradient at a tie is zero.
pub struct L1;

impl Loss for L1 {
    fn value_and_grad(&self, pred: &[f64], target: &[f64], weights: Option<&[f64]>) -> Result<(f64, Vec<f64>)> {
        check(pred, target)?;
        let z = normalizer(pred.len(), weights)?;
        let mut value = 0.0;
        let mut grad = Vec::with_capacity(pred.len());
        for (i, (p, t)) in pred.iter().zip(target).enumerate() {
            let w = weights.map_or(1.0, |w| w[i]);
            let d = p - t;
            value += w * d.abs();
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            grad.push(w * sign / z);
        }
        Ok((value / z, grad))
    }
}

pub fn loss_registry() -> Registry<dyn Loss> {
    let mut r: Registry<dyn Loss> = Registry::new("loss");
    r.register("mse", Arc::new(Mse));
    r.register("l1", Arc::new(L1));
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_values() {
        let (v, g) = Mse.value_and_grad(&[1.0, 2.0], &[1.0, 2.0], None).unwrap();
        assert_eq!((v, g), (0.0, vec![0.0, 0.0]));
        assert_eq!(Mse.value(&[1.0, -1.0], &[0.0, 0.0], None).unwrap(), 1.0);
        assert_eq!(L1.value(&[1.0, -1.0], &[0.0, 0.0], None).unwrap(), 1.0);
        let (_, g) = L1.value_and_grad(&[0.5, 0.0], &[0.5, 1.0], None).unwrap();
        assert_eq!(g, vec![0.0, -0.5]);
        assert!(Mse.value(&[1.0], &[1.0, 2.0], None).is_err());
        assert!(loss_registry().get("huber").is_err());
    }

    #[test]
    fn weights_give_weighted_means() {
        let w = [3.0, 1.0];
        assert_eq!(Mse.value(&[1.0, 2.0], &[0.0, 0.0], Some(&w)).unwrap(), 7.0 / 4.0);
        assert_eq!(L1.value(&[1.0, 2.0], &[0.0, 0.0], Some(&w)).unwrap(), 5.0 / 4.0);
        assert!(Mse.value(&[1.0, 2.0], &[0.0, 0.0], Some(&[0.0, 0.0])).is_err());
    }

    proptest! {
        #[test]
        fn gradients_match_finite_differences(
            pairs in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0, 0.1f64..2.0), 1..20),
            weighted in any::<bool>(),
        ) {
            let pred: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let target: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let w: Vec<f64> = pairs.iter().map(|p| p.2).collect();
            let weights = weighted.then_some(&w[..]);
            let h = 1e-6;
            for loss in [&Mse as &dyn Loss, &L1] {
                let (_, g) = loss.value_and_grad(&pred, &target, weights).unwrap();
                for i in 0..pred.len() {
                    if (pred[i] - target[i]).abs() < 1e-3 {
                        continue;
                    }
                    let mut up = pred.clone();
                    up[i] += h;
                    let mut dn = pred.clone();
                    dn[i] -= h;
                    let fd = (loss.value(&up, &target, weights).unwrap() - loss.value(&dn, &target, weights).unwrap()) / (2.0 * h);
                    prop_assert!((fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1e-3), "{} vs {}", fd, g[i]);
                }
            }
        }
    }
}
