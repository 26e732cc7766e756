//! Plain stochastic gradient descent over masked parameters.

use crate::error::{Error, Result};
use crate::model::{Grads, Parameter};

/// `theta <- theta - lr * grad` wherever the element mask is one.
///
/// Entries whose mask is zero are never written.
pub fn sgd_step(params: &mut [Parameter], grads: &Grads, lr: f64) -> Result<()> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::Config(format!(
            "learning rate must be non-negative and finite, got {lr}"
        )));
    }
    if grads.0.len() != params.len() {
        let missing = params
            .get(grads.0.len())
            .map(|p| p.id.clone())
            .unwrap_or_default();
        return Err(Error::MissingGradient(missing));
    }
    if lr == 0.0 {
        return Ok(());
    }
    for (p, g) in params.iter_mut().zip(&grads.0) {
        if g.len() != p.len() {
            return Err(Error::MissingGradient(p.id.clone()));
        }
        let mask = p.mask.data().to_vec();
        for ((v, gv), m) in p.values.data_mut().iter_mut().zip(g.data()).zip(mask) {
            if m != 0.0 {
                *v -= lr * gv;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Partition;
    use crate::tensor::Tensor;

    fn param(values: Vec<f64>) -> Parameter {
        Parameter::new(
            "p",
            Partition::Fusion,
            Tensor::new(vec![values.len()], values).unwrap(),
        )
    }

    #[test]
    fn arithmetic_step() {
        let mut ps = vec![param(vec![1.0])];
        let g = Grads(vec![Tensor::new(vec![1], vec![2.0]).unwrap()]);
        sgd_step(&mut ps, &g, 0.1).unwrap();
        assert!((ps[0].values.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn masked_entry_stays_zero() {
        let mut ps = vec![param(vec![0.0, 1.0])];
        ps[0].mask.data_mut()[0] = 0.0;
        let g = Grads(vec![Tensor::new(vec![2], vec![123.0, 1.0]).unwrap()]);
        sgd_step(&mut ps, &g, 0.5).unwrap();
        assert_eq!(ps[0].values.data()[0].to_bits(), 0.0f64.to_bits());
        assert_eq!(ps[0].values.data()[1], 0.5);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut ps = vec![param(vec![0.1, -0.0, 3.7])];
        let before = ps[0].values.clone();
        let g = Grads(vec![Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()]);
        sgd_step(&mut ps, &g, 0.0).unwrap();
        let same = before
            .data()
            .iter()
            .zip(ps[0].values.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same);
    }

    #[test]
    fn missing_gradient_errors() {
        let mut ps = vec![param(vec![1.0]), param(vec![2.0])];
        let g = Grads(vec![Tensor::new(vec![1], vec![1.0]).unwrap()]);
        assert!(sgd_step(&mut ps, &g, 0.1).is_err());
    }
}
