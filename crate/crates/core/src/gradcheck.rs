//! Central finite-difference verification of tape gradients.

use crate::tape::{Tape, TensorId};
use crate::tensor::{Tensor, TensorResult};

/// Max over coordinates of |a - n| / max(|a|, |n|, 1e-12).
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

/// Compare tape gradients of a scalar function against central differences.
///
/// `build` constructs the loss from leaves bound in the order of `params`;
/// every parameter is treated as differentiable. Returns the worst relative
/// error over all coordinates of all parameters.
pub fn finite_diff_check<F>(build: F, params: &[Tensor], h: f64) -> TensorResult<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> TensorResult<TensorId>,
{
    assert!((1e-7..=1e-3).contains(&h), "step size h={h} out of contract range");

    let eval = |points: &[Tensor]| -> TensorResult<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = points
            .iter()
            .map(|p| {
                let mut frozen = p.clone();
                frozen.requires_grad = false;
                tape.leaf(&frozen)
            })
            .collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss)[0])
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params
        .iter()
        .map(|p| {
            let mut live = p.clone();
            live.requires_grad = true;
            tape.leaf(&live)
        })
        .collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut scratch: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let zero = vec![0.0; param.data.len()];
        let analytic = tape.grad(ids[pi]).unwrap_or(&zero).to_vec();
        for c in 0..param.data.len() {
            let orig = param.data[c];
            scratch[pi].data[c] = orig + h;
            let up = eval(&scratch)?;
            scratch[pi].data[c] = orig - h;
            let down = eval(&scratch)?;
            scratch[pi].data[c] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(max_rel_err(&analytic[c..c + 1], &[numeric]));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::new(vec![1, 4], vec![0.3, -1.0, 2.0, 0.7]).unwrap();
        let err = finite_diff_check(|tape, ids| Ok(tape.sum(ids[0])), &[w], 1e-5).unwrap();
        assert!(err < 1e-10, "linear check error {err}");
    }

    #[test]
    fn sum_of_sines_matches_analytic_cosine() {
        let w = Tensor::new(vec![1, 2], vec![0.1, 0.2]).unwrap();
        // Analytic oracle: d/dw sum(sin(w)) = cos(w).
        let mut tape = Tape::new();
        let id = tape.leaf(&w.clone().requires_grad(true));
        let s = tape.sin(id);
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(id).unwrap();
        assert!((analytic[0] - 0.1f64.cos()).abs() < 1e-12);
        assert!((analytic[1] - 0.2f64.cos()).abs() < 1e-12);

        let err = finite_diff_check(
            |tape, ids| {
                let s = tape.sin(ids[0]);
                Ok(tape.sum(s))
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "sin check error {err}");
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        // Scale the analytic gradient by 2 and feed it through the same
        // error formula the checker uses: the mismatch must be glaring.
        let w = Tensor::new(vec![1, 3], vec![0.4, -0.8, 1.3]).unwrap();
        let mut tape = Tape::new();
        let id = tape.leaf(&w.clone().requires_grad(true));
        let sq = tape.mul(id, id).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        let corrupted: Vec<f64> = tape.grad(id).unwrap().iter().map(|g| 2.0 * g).collect();
        let numeric: Vec<f64> = w.data.iter().map(|&x| 2.0 * x).collect();
        assert!(max_rel_err(&corrupted, &numeric) > 0.4);
    }
}
