use crate::error::Result;
use crate::numerics::ops::softmax_rows;
use crate::numerics::{ParamStore, Real, Tape, Tensor, Var};

/// Distillation objective `α·CE + (1−α)·T²·KL(softmax(prev/T) ‖ softmax(curr/T))`.
///
/// Without a previous model the distillation term is zero and the result is
/// `α·CE`.
pub fn kd_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    prev_logits: Option<&Tensor<T>>,
    labels: &[usize],
    alpha: f64,
    temperature: f64,
) -> Result<Var> {
    let ce = tape.cross_entropy(logits, labels)?;
    let ce = tape.scale(ce, T::lit(alpha));
    let Some(prev) = prev_logits else {
        return Ok(ce);
    };
    let target = softmax_rows(prev, T::lit(temperature));
    let kl = tape.soft_kl(logits, &target, T::lit(temperature))?;
    let kl = tape.scale(kl, T::lit(1.0 - alpha));
    tape.add_scalars(&[ce, kl])
}

/// `λ·Σ‖θ‖²` over the trainable parameters of `store`, or `None` when there is
/// nothing to penalize.
pub fn l2_penalty<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, lambda: f64) -> Result<Option<Var>> {
    if lambda == 0.0 {
        return Ok(None);
    }
    let terms: Vec<Var> = store
        .trainable_ids()
        .into_iter()
        .map(|id| {
            let p = tape.param(store, id);
            tape.sum_squares(p)
        })
        .collect();
    if terms.is_empty() {
        return Ok(None);
    }
    let total = tape.add_scalars(&terms)?;
    Ok(Some(tape.scale(total, T::lit(lambda))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_teacher_leaves_weighted_ce() {
        let logits = Tensor::<f64>::from_f64(&[2, 3], &[1.0, -0.5, 0.2, 0.0, 2.0, -1.0]).unwrap();
        let labels = [2, 1];
        let mut tape = Tape::new();
        let v = tape.constant(logits.clone());
        let l = kd_loss(&mut tape, v, Some(&logits), &labels, 0.5, 2.0).unwrap();
        let ce = crate::numerics::ops::cross_entropy(&logits, &labels).unwrap();
        assert!((tape.value(l).item() - 0.5 * ce).abs() < 1e-14);
    }

    #[test]
    fn no_teacher_is_weighted_ce() {
        let logits = Tensor::<f64>::from_f64(&[1, 2], &[0.3, -0.3]).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(logits.clone());
        let l = kd_loss(&mut tape, v, None, &[0], 0.25, 2.0).unwrap();
        let ce = crate::numerics::ops::cross_entropy(&logits, &[0]).unwrap();
        assert_eq!(tape.value(l).item(), 0.25 * ce);
    }
}
