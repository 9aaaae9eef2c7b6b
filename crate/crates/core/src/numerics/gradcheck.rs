use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct InputError {
    pub input: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub inputs: Vec<InputError>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn max_abs_err(&self) -> f64 {
        self.inputs.iter().map(|e| e.max_abs_err).fold(0.0, f64::max)
    }
}

/// Compares tape gradients of a scalar function against central differences.
///
/// Relative error per entry is `|tape - fd| / max(|tape|, |fd|, 1e-3·scale)`
/// where `scale` is the largest gradient magnitude of that input, so entries
/// many orders below the gradient's scale do not dominate the report. The
/// denominator never drops below [`ABS_FLOOR`], the rounding noise of a
/// central difference; identically zero gradients would otherwise report
/// pure noise as relative error 1.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step <= 1e-2) {
        return Err(Error::domain("grad_check", format!("step {step} outside (0, 1e-2]")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let f0 = tape.value(out);
    if f0.numel() != 1 || !f0.data()[0].is_finite() {
        return Err(Error::GradCheck("function must return a finite scalar".into()));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |point: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = point.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut point: Vec<Tensor> = inputs.to_vec();
    let mut report = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let x = input.data()[j];
            point[i].data_mut()[j] = x + step;
            let plus = eval(&point).map_err(|e| perturb_err(i, j, e))?;
            point[i].data_mut()[j] = x - step;
            let minus = eval(&point).map_err(|e| perturb_err(i, j, e))?;
            point[i].data_mut()[j] = x;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::GradCheck(format!("non-finite value perturbing input {i} entry {j}")));
            }
            *slot = (plus - minus) / (2.0 * step);
        }
        let a = &analytic[i];
        let scale = a
            .iter()
            .chain(&numeric)
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        let floor = (1e-3 * scale).max(ABS_FLOOR);
        let mut max_abs = 0.0f64;
        let mut max_rel = 0.0f64;
        for (x, y) in a.iter().zip(&numeric) {
            let abs = (x - y).abs();
            max_abs = max_abs.max(abs);
            if abs > 0.0 {
                max_rel = max_rel.max(abs / x.abs().max(y.abs()).max(floor));
            }
        }
        report.push(InputError {
            input: i,
            max_abs_err: max_abs,
            max_rel_err: max_rel,
        });
    }
    Ok(GradCheckReport { inputs: report })
}

fn perturb_err(input: usize, entry: usize, e: Error) -> Error {
    Error::GradCheck(format!("evaluation failed perturbing input {input} entry {entry}: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_is_exact() {
        let x = Tensor::vector(vec![0.3, -1.2, 4.0, 2.2]);
        let r = grad_check(|t, v| t.sum(v[0]), &[x], 1e-4).unwrap();
        assert!(r.max_abs_err() < 1e-10, "{r:?}");
    }

    #[test]
    fn quadratic_is_exact_under_central_differences() {
        let x = Tensor::vector(vec![0.3, -1.2, 4.0, 2.2, 7.5]);
        let r = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &[x],
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_err() < 1e-8, "{r:?}");
    }

    #[test]
    fn step_out_of_range_is_rejected() {
        let x = Tensor::vector(vec![1.0]);
        assert!(grad_check(|t, v| t.sum(v[0]), &[x.clone()], 0.0).is_err());
        assert!(grad_check(|t, v| t.sum(v[0]), &[x], 0.5).is_err());
    }

    #[test]
    fn non_finite_perturbation_names_entry() {
        // log is undefined once the perturbation crosses zero.
        let x = Tensor::vector(vec![1.0, 5e-5]);
        let err = grad_check(
            |t, v| {
                let l = t.pointwise(super::super::Pointwise::Log, v[0])?;
                t.sum(l)
            },
            &[x],
            1e-4,
        )
        .unwrap_err();
        assert!(err.to_string().contains("entry 1"), "{err}");
    }
}
