use super::{AutodiffError, Tape, Tensor, Var};

/// Compares reverse-mode gradients against central differences.
///
/// Returns `max |analytic - numeric| / max(1, |analytic|)` over every
/// component of every input.
pub fn grad_check_many<F>(mut f: F, inputs: &[Tensor], eps: f64) -> Result<f64, AutodiffError>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    if !(eps > 0.0) {
        return Err(AutodiffError::Invalid {
            op: "grad_check",
            msg: format!("eps must be positive, got {eps}"),
        });
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(AutodiffError::NonScalarLoss(tape.shape(out).to_vec()));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| tape.grad_or_zeros(*v)).collect();
    drop(tape);

    let mut eval = |probe: &[Tensor]| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out)[0])
    };

    let mut probe: Vec<Tensor> = inputs
        .iter()
        .map(|t| {
            let mut c = t.clone();
            c.set_requires_grad(false);
            c
        })
        .collect();
    let mut worst: f64 = 0.0;
    for (p, grads) in analytic.iter().enumerate() {
        for c in 0..grads.len() {
            let orig = probe[p].data()[c];
            probe[p].data_mut()[c] = orig + eps;
            let up = eval(&probe)?;
            probe[p].data_mut()[c] = orig - eps;
            let down = eval(&probe)?;
            probe[p].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (grads[c] - numeric).abs() / grads[c].abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(mut f: F, x: &Tensor, eps: f64) -> Result<f64, AutodiffError>
where
    F: FnMut(&mut Tape, Var) -> Result<Var, AutodiffError>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}
