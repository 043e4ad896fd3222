use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over elements of |a − n| / max(|a|, |n|, 1e-8)
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst element
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub elements: usize,
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences `(f(x+εe) − f(x−εe)) / 2ε`. Everything runs in 64-bit.
/// A difference no larger than 4 ulps of |f| counts as a zero slope.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Validation(format!("eps must be positive, got {eps}")));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map_or_else(|| vec![0.0; tape.value(v).len()], <[f64]>::to_vec))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).values()[0])
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        elements: 0,
    };
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let x = input.values()[j];
            work[i].values_mut()[j] = x + eps;
            let plus = eval(&work)?;
            work[i].values_mut()[j] = x - eps;
            let minus = eval(&work)?;
            work[i].values_mut()[j] = x;

            // differences within a few ulps of f are rounding noise, not slope
            let noise = 4.0 * f64::EPSILON * plus.abs().max(minus.abs());
            let numeric = if (plus - minus).abs() <= noise { 0.0 } else { (plus - minus) / (2.0 * eps) };
            let a = analytic[i][j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.elements += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((i, j));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn sum_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = grad_check(|t, v| Ok(t.sum(v[0])), &[random(&[4, 3], &mut rng)], 1e-3).unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn softmax_then_sum_is_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = grad_check(
            |t, v| {
                let s = t.softmax(v[0], 0)?;
                Ok(t.sum(s))
            },
            &[random(&[5], &mut rng)],
            1e-3,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // sum(x ⊙ stop_grad(x)) has true derivative 2x but the tape only sees x
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = grad_check(
            |t, v| {
                let c = t.constant(t.value(v[0]).clone());
                let y = t.mul(v[0], c)?;
                Ok(t.sum(y))
            },
            &[random(&[3], &mut rng)],
            1e-3,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.4);
    }

    #[test]
    fn rejects_nonpositive_eps() {
        assert!(grad_check(|t, v| Ok(t.sum(v[0])), &[Tensor::ones(&[1])], 0.0).is_err());
    }
}
