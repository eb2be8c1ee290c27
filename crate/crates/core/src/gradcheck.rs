//! Central finite-difference oracle for tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// max |autodiff − central difference| / max(1, |central difference|)
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

/// Compares autodiff gradients of a scalar function against central
/// differences with step `step`.
///
/// `f` receives a fresh tape and one leaf per parameter. At most
/// `max_coords` coordinates per parameter are probed (chosen with `seed`);
/// `None` probes all of them.
pub fn finite_difference_check<F>(
    f: F,
    params: &[Tensor],
    step: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::invalid(
            "finite_difference_check: step must be positive",
        ));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = ps
            .iter()
            .map(|p| tape.param(p, false))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        let v = tape.item(out);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                op: "finite_difference_check",
            })
        }
    };

    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.param(p, true))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    if !tape.item(out).is_finite() {
        return Err(Error::NonFinite {
            op: "finite_difference_check",
        });
    }
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut probe = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let n = params[pi].numel();
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = params[pi].data()[c];
            probe[pi].data_mut()[c] = orig + step;
            let plus = eval(&probe)?;
            probe[pi].data_mut()[c] = orig - step;
            let minus = eval(&probe)?;
            probe[pi].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = (analytic.data()[c] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        coords_checked: checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_quadratic() {
        let r = finite_difference_check(
            |t, p| t.mul(p[0], p[0]),
            &[Tensor::scalar(3.0)],
            1e-6,
            None,
            0,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn constant_function() {
        let r = finite_difference_check(
            |t, _| t.scalar(4.0),
            &[Tensor::from_vec(vec![1.0, 2.0])],
            1e-6,
            None,
            0,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.coords_checked, 2);
    }

    #[test]
    fn non_finite_aborts() {
        let r = finite_difference_check(|t, p| t.log(p[0]), &[Tensor::scalar(0.0)], 1e-6, None, 0);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn rejects_bad_step() {
        assert!(
            finite_difference_check(|t, p| t.sum(p[0]), &[Tensor::scalar(1.0)], 0.0, None, 0)
                .is_err()
        );
    }
}
