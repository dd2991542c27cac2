use crate::tensor::Tensor;
use crate::{Error, Result};

/// `Σ_t (Π_{τ>t} (1 - β̄_τ)) β̄_t ΔW_t`.
pub fn accumulate_closed(deltas: &[Tensor], beta: &[f64]) -> Result<Tensor> {
    if deltas.len() != beta.len() || deltas.is_empty() {
        return Err(Error::Data(format!(
            "{} deltas for {} weights",
            deltas.len(),
            beta.len()
        )));
    }
    let mut out = Tensor::zeros(deltas[0].shape());
    for t in 0..deltas.len() {
        let decay: f64 = beta[t + 1..].iter().map(|b| 1.0 - b).product();
        out = out.add(&deltas[t].scale(decay * beta[t]))?;
    }
    Ok(out)
}

/// `(1 - β̄_t) ΔW̃_{t-1} + β̄_t ΔW_t`.
pub fn accumulate_recursive(prev: &Tensor, delta: &Tensor, beta: f64) -> Result<Tensor> {
    Ok(prev.scale(1.0 - beta).add(&delta.scale(beta))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_example() {
        let d1 = Tensor::identity(2);
        let d2 = Tensor::identity(2).scale(2.0);
        let closed = accumulate_closed(&[d1.clone(), d2.clone()], &[0.5, 0.5]).unwrap();
        assert_eq!(closed.data(), Tensor::identity(2).scale(1.25).data());
        let r1 = accumulate_recursive(&Tensor::zeros(&[2, 2]), &d1, 0.5).unwrap();
        let r2 = accumulate_recursive(&r1, &d2, 0.5).unwrap();
        assert_eq!(r2.data(), closed.data());
    }

    #[test]
    fn last_weight_one_forgets_history() {
        let d1 = Tensor::identity(2).scale(7.0);
        let d2 = Tensor::identity(2);
        let closed = accumulate_closed(&[d1, d2.clone()], &[0.3, 1.0]).unwrap();
        assert_eq!(closed.data(), d2.data());
    }

    #[test]
    fn zero_weight_passes_prior_through() {
        let prev = Tensor::identity(2).scale(3.0);
        let r = accumulate_recursive(&prev, &Tensor::identity(2), 0.0).unwrap();
        assert_eq!(r.data(), prev.data());
    }
}
