//! Fixed-step classic Runge-Kutta integration on plain slices and on a tape.

use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("non-finite derivative in RK4 stage {stage} at t = {time}")]
    NonFinite { stage: usize, time: f64 },
    #[error("time grid is not strictly ascending at index {index}")]
    NonAscending { index: usize },
    #[error("invalid integration request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Reusable stage buffers for [`rk4_step_into`].
#[derive(Clone, Debug, Default)]
pub struct Rk4Workspace {
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

impl Rk4Workspace {
    pub fn new(n: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![0.0; n]),
            tmp: vec![0.0; n],
        }
    }

    fn resize(&mut self, n: usize) {
        for k in &mut self.k {
            k.resize(n, 0.0);
        }
        self.tmp.resize(n, 0.0);
    }
}

/// In-place RK4 step; `f(x, u, dx)` writes the derivative into `dx`.
/// `time` only labels error reports.
pub fn rk4_step_into<F>(f: &mut F, x: &mut [f64], u: &[f64], h: f64, time: f64, ws: &mut Rk4Workspace) -> Result<(), OdeError>
where
    F: FnMut(&[f64], &[f64], &mut [f64]),
{
    let n = x.len();
    ws.resize(n);
    let [k1, k2, k3, k4] = &mut ws.k;
    let tmp = &mut ws.tmp;
    let check = |k: &[f64], stage: usize| {
        if k.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(OdeError::NonFinite { stage, time })
        }
    };

    f(x, u, k1);
    check(k1, 1)?;
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k1[i];
    }
    f(tmp, u, k2);
    check(k2, 2)?;
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k2[i];
    }
    f(tmp, u, k3);
    check(k3, 3)?;
    for i in 0..n {
        tmp[i] = x[i] + h * k3[i];
    }
    f(tmp, u, k4);
    check(k4, 4)?;
    for i in 0..n {
        x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(())
}

pub fn rk4_step<F>(mut f: F, x: &[f64], u: &[f64], h: f64) -> Result<Vec<f64>, OdeError>
where
    F: FnMut(&[f64], &[f64], &mut [f64]),
{
    if !(h > 0.0) {
        return Err(OdeError::Invalid(format!("step size must be positive, got {h}")));
    }
    let mut out = x.to_vec();
    rk4_step_into(&mut f, &mut out, u, h, 0.0, &mut Rk4Workspace::new(x.len()))?;
    Ok(out)
}

/// Integrates over `t_grid` with `substeps` equal steps per interval, holding
/// `u_schedule(k)` fixed on `[t_k, t_{k+1})`. Returns `[|t_grid|, n]` row-major,
/// row 0 being `x0`.
pub fn integrate<F, U>(mut f: F, x0: &[f64], t_grid: &[f64], mut u_schedule: U, substeps: usize) -> Result<Vec<f64>, OdeError>
where
    F: FnMut(&[f64], &[f64], &mut [f64]),
    U: FnMut(usize) -> Vec<f64>,
{
    if substeps == 0 {
        return Err(OdeError::Invalid("substeps must be >= 1".into()));
    }
    if let Some(index) = (1..t_grid.len()).find(|&k| !(t_grid[k] > t_grid[k - 1])) {
        return Err(OdeError::NonAscending { index });
    }
    let n = x0.len();
    let mut out = Vec::with_capacity(n * t_grid.len().max(1));
    out.extend_from_slice(x0);
    let mut x = x0.to_vec();
    let mut ws = Rk4Workspace::new(n);
    for k in 1..t_grid.len() {
        let u = u_schedule(k - 1);
        let h = (t_grid[k] - t_grid[k - 1]) / substeps as f64;
        for s in 0..substeps {
            let time = t_grid[k - 1] + s as f64 * h;
            rk4_step_into(&mut f, &mut x, &u, h, time, &mut ws)?;
        }
        out.extend_from_slice(&x);
    }
    Ok(out)
}

fn check_stage(tape: &Tape, v: Var, stage: usize) -> Result<(), OdeError> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(OdeError::NonFinite { stage, time: f64::NAN })
    }
}

/// Differentiable RK4 step recorded on `tape`; `f(tape, x, u)` must return a
/// derivative of the same shape as `x`.
pub fn rk4_step_tape<F>(tape: &mut Tape, f: &mut F, x: Var, u: Var, h: f64) -> Result<Var, OdeError>
where
    F: FnMut(&mut Tape, Var, Var) -> Result<Var, OdeError>,
{
    let k1 = f(tape, x, u)?;
    check_stage(tape, k1, 1)?;
    let s = tape.scale(k1, 0.5 * h);
    let x2 = tape.add(x, s)?;
    let k2 = f(tape, x2, u)?;
    check_stage(tape, k2, 2)?;
    let s = tape.scale(k2, 0.5 * h);
    let x3 = tape.add(x, s)?;
    let k3 = f(tape, x3, u)?;
    check_stage(tape, k3, 3)?;
    let s = tape.scale(k3, h);
    let x4 = tape.add(x, s)?;
    let k4 = f(tape, x4, u)?;
    check_stage(tape, k4, 4)?;

    let k23 = tape.add(k2, k3)?;
    let k23 = tape.scale(k23, 2.0);
    let acc = tape.add(k1, k23)?;
    let acc = tape.add(acc, k4)?;
    let incr = tape.scale(acc, h / 6.0);
    Ok(tape.add(x, incr)?)
}

/// Chains `controls.len()` intervals of length `dt`, each split into
/// `substeps` RK4 steps with the interval's control held fixed. Returns the
/// state at the end of every interval.
pub fn integrate_tape<F>(
    tape: &mut Tape,
    mut f: F,
    x0: Var,
    controls: &[Var],
    dt: f64,
    substeps: usize,
) -> Result<Vec<Var>, OdeError>
where
    F: FnMut(&mut Tape, Var, Var) -> Result<Var, OdeError>,
{
    if substeps == 0 {
        return Err(OdeError::Invalid("substeps must be >= 1".into()));
    }
    if !(dt > 0.0) {
        return Err(OdeError::Invalid(format!("interval length must be positive, got {dt}")));
    }
    let h = dt / substeps as f64;
    let mut x = x0;
    let mut states = Vec::with_capacity(controls.len());
    for &u in controls {
        for _ in 0..substeps {
            x = rk4_step_tape(tape, &mut f, x, u, h)?;
        }
        states.push(x);
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check_many, Tensor};
    use crate::nn::{Activation, Mlp, MlpConfig, ParamCursor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn decay(x: &[f64], _u: &[f64], dx: &mut [f64]) {
        for (d, v) in dx.iter_mut().zip(x) {
            *d = -v;
        }
    }

    fn decay_error(h: f64) -> f64 {
        let steps = (1.0 / h).round() as usize;
        let grid = [0.0, 1.0];
        let out = integrate(decay, &[1.0], &grid, |_| vec![], steps).unwrap();
        (out[1] - (-1.0f64).exp()).abs()
    }

    #[test]
    fn step_examples() {
        let zero = |_: &[f64], _: &[f64], dx: &mut [f64]| dx.fill(0.0);
        assert_eq!(rk4_step(zero, &[1.5, -2.0], &[], 0.3).unwrap(), vec![1.5, -2.0]);

        let one = |_: &[f64], _: &[f64], dx: &mut [f64]| dx.fill(1.0);
        assert!((rk4_step(one, &[0.0], &[], 0.1).unwrap()[0] - 0.1).abs() < 1e-15);

        let h: f64 = 0.1;
        let expected = 1.0 - h + h * h / 2.0 - h.powi(3) / 6.0 + h.powi(4) / 24.0;
        let got = rk4_step(decay, &[1.0], &[], h).unwrap()[0];
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.9048375).abs() < 1e-8);
    }

    #[test]
    fn step_rejects_nan_with_stage() {
        // finite at x = 1, NaN once a stage moves x below zero
        let f = |x: &[f64], _: &[f64], dx: &mut [f64]| dx[0] = if x[0] < 1.0 { f64::NAN } else { -10.0 };
        assert_eq!(
            rk4_step(f, &[1.0], &[], 0.1),
            Err(OdeError::NonFinite { stage: 2, time: 0.0 })
        );
        assert!(rk4_step(decay, &[1.0], &[], 0.0).is_err());
    }

    #[test]
    fn substeps_equal_chained_steps() {
        let f = |x: &[f64], u: &[f64], dx: &mut [f64]| {
            dx[0] = x[1];
            dx[1] = -x[0].sin() + u[0];
        };
        let x0 = [0.3, -0.1];
        let out = integrate(f, &x0, &[0.0, 0.5], |_| vec![0.2], 5).unwrap();
        let mut x = x0.to_vec();
        for _ in 0..5 {
            x = rk4_step(f, &x, &[0.2], 0.1).unwrap();
        }
        assert_eq!(&out[..2], &x0);
        assert_eq!(&out[2..], &x[..]);
    }

    #[test]
    fn control_is_held_per_interval() {
        let f = |_: &[f64], u: &[f64], dx: &mut [f64]| dx[0] = u[0];
        let out = integrate(f, &[0.0], &[0.0, 1.0, 2.0, 2.5], |k| vec![[1.0, -2.0, 4.0][k]], 3).unwrap();
        let expected = [0.0, 1.0, -1.0, 1.0];
        for (o, e) in out.iter().zip(expected) {
            assert!((o - e).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_bad_grids() {
        assert_eq!(
            integrate(decay, &[1.0], &[0.0, 1.0, 1.0], |_| vec![], 1),
            Err(OdeError::NonAscending { index: 2 })
        );
        assert!(integrate(decay, &[1.0], &[0.0, 1.0], |_| vec![], 0).is_err());
    }

    #[test]
    fn decay_accuracy() {
        assert!(decay_error(0.01) < 1e-8);
    }

    #[test]
    fn fourth_order_convergence() {
        for h in [0.1, 0.05, 0.025] {
            let ratio = decay_error(h) / decay_error(h / 2.0);
            assert!((14.0..=18.0).contains(&ratio), "h={h}: ratio {ratio}");
        }
    }

    #[test]
    fn time_reversal_returns_initial_state() {
        let fwd = |x: &[f64], _: &[f64], dx: &mut [f64]| {
            dx[0] = -x[0] + 0.5 * x[1];
            dx[1] = -0.3 * x[0] - 0.2 * x[1];
        };
        let bwd = |x: &[f64], u: &[f64], dx: &mut [f64]| {
            fwd(x, u, dx);
            dx.iter_mut().for_each(|d| *d = -*d);
        };
        let x0 = [1.0, -0.5];
        let a = integrate(fwd, &x0, &[0.0, 1.0], |_| vec![], 100).unwrap();
        let b = integrate(bwd, &a[2..], &[0.0, 1.0], |_| vec![], 100).unwrap();
        assert!((b[2] - x0[0]).abs() < 1e-9 && (b[3] - x0[1]).abs() < 1e-9);
    }

    #[test]
    fn tape_step_matches_plain_step() {
        let mut tape = Tape::new();
        let x = tape.constant(&[2], vec![0.4, -1.2]).unwrap();
        let u = tape.constant(&[2], vec![0.7, 0.7]).unwrap();
        let mut f = |t: &mut Tape, x: Var, u: Var| -> Result<Var, OdeError> {
            let s = t.sin(x);
            let n = t.neg(s);
            Ok(t.add(n, u)?)
        };
        let y = rk4_step_tape(&mut tape, &mut f, x, u, 0.05).unwrap();
        let plain = rk4_step(
            |x: &[f64], u: &[f64], dx: &mut [f64]| {
                for (d, v) in dx.iter_mut().zip(x) {
                    *d = -v.sin() + u[0];
                }
            },
            &[0.4, -1.2],
            &[0.7],
            0.05,
        )
        .unwrap();
        for (a, b) in tape.value(y).iter().zip(&plain) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn mlp_rhs(rng: &mut ChaCha8Rng) -> Mlp {
        let cfg = MlpConfig {
            input_dim: 4,
            hidden_layers: 1,
            hidden_width: 6,
            output_dim: 3,
            activation: Activation::Tanh,
        };
        Mlp::new(cfg, rng).unwrap()
    }

    /// Gradient check of `sum(sin(final state))` with respect to `x0`, `u`
    /// and all MLP parameters.
    fn check_through_rk4(intervals: usize, substeps: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = mlp_rhs(&mut rng);
        let np = mlp.params().len();
        let mut inputs: Vec<Tensor> = mlp.params().into_iter().cloned().collect();
        inputs.push(random(&[2, 3], &mut rng));
        inputs.push(random(&[2, 1], &mut rng));
        grad_check_many(
            |tape, vars| {
                let net = mlp.bind_from(&mut ParamCursor::new(&vars[..np]));
                let f = |t: &mut Tape, x: Var, u: Var| -> Result<Var, OdeError> {
                    let xu = t.concat(&[x, u], 1)?;
                    net.forward(t, xu).map_err(|e| OdeError::Invalid(e.to_string()))
                };
                let controls = vec![vars[np + 1]; intervals];
                let states = integrate_tape(tape, f, vars[np], &controls, 0.1, substeps).map_err(|e| match e {
                    OdeError::Autodiff(a) => a,
                    other => AutodiffError::Invalid {
                        op: "rk4",
                        msg: other.to_string(),
                    },
                })?;
                let y = tape.sin(*states.last().unwrap());
                Ok(tape.sum(y))
            },
            &inputs,
            1e-6,
        )
        .unwrap()
    }

    #[test]
    fn rk4_step_through_mlp_passes_grad_check() {
        let err = check_through_rk4(1, 1, 3);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn integrate_passes_grad_check() {
        let err = check_through_rk4(3, 2, 4);
        assert!(err < 1e-5, "{err}");
    }
}
