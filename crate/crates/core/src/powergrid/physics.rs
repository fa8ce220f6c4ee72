use crate::autodiff::{AutodiffError, Tape, Var};

use super::{GridModel, PowerGridError, UnitParams};

pub const STATE_PER_NODE: usize = 3;

/// Reference frame angular velocity (pu).
pub const OMEGA_REF: f64 = 1.0;

/// Active and reactive power flowing from `i` to `j`.
pub fn line_flow(v_i: f64, v_j: f64, delta_ij: f64, g: f64, b: f64) -> (f64, f64) {
    let (s, c) = delta_ij.sin_cos();
    let vv = v_i * v_j;
    let p = g * v_i * v_i - g * vv * c - b * vv * s;
    let q = -b * v_i * v_i + b * vv * c - g * vv * s;
    (p, q)
}

/// Injected `(p_i, q_i)` at node position `i` for a node-major `[δ, ω, v]` state.
pub fn node_injection(grid: &GridModel, x: &[f64], i: usize) -> (f64, f64) {
    let topo = grid.topology();
    let (di, vi) = (x[3 * i], x[3 * i + 2]);
    let sh = grid.shunts()[i];
    let mut p = vi * vi * sh.g;
    let mut q = -vi * vi * sh.b;
    for (&j, &e) in topo.neighbors(i).iter().zip(topo.incident_edges(i)) {
        let line = grid.lines()[e];
        let (pij, qij) = line_flow(vi, x[3 * j + 2], di - x[3 * j], line.g, line.b);
        p += pij;
        q += qij;
    }
    (p, q)
}

/// Droop unit derivatives `(dδ, dω, dv)`.
pub fn unit_rhs(
    state: (f64, f64, f64),
    p_i: f64,
    q_i: f64,
    params: &UnitParams,
    p_d: f64,
    omega_ref: f64,
) -> (f64, f64, f64) {
    let (_, omega, v) = state;
    let d_delta = omega - omega_ref;
    let d_omega = (-omega + params.omega_d - params.k_p * (p_i - p_d)) / params.tau;
    let d_v = (-v + params.v_d - params.k_q * (q_i - params.q_d_nom)) / params.tau;
    (d_delta, d_omega, d_v)
}

/// Full-system derivative of a node-major `[δ, ω, v]` state under active
/// power setpoints `u`.
pub fn system_rhs(grid: &GridModel, x: &[f64], u: &[f64], dx: &mut [f64]) -> Result<(), PowerGridError> {
    let n = grid.n_nodes();
    for (len, expected) in [(x.len(), 3 * n), (u.len(), n), (dx.len(), 3 * n)] {
        if len != expected {
            return Err(PowerGridError::Dimension { expected, got: len });
        }
    }
    system_rhs_unchecked(grid, x, u, dx);
    Ok(())
}

/// [`system_rhs`] without length checks, for inner integration loops.
pub fn system_rhs_unchecked(grid: &GridModel, x: &[f64], u: &[f64], dx: &mut [f64]) {
    let n = grid.n_nodes();
    for i in 0..n {
        let (p, q) = node_injection(grid, x, i);
        let (a, b, c) = unit_rhs((x[3 * i], x[3 * i + 1], x[3 * i + 2]), p, q, &grid.units()[i], u[i], OMEGA_REF);
        dx[3 * i] = a;
        dx[3 * i + 1] = b;
        dx[3 * i + 2] = c;
    }
}

/// Selects `(ω_i, v_i)` per node.
pub fn measure(x: &[f64]) -> Vec<f64> {
    x.chunks_exact(3).flat_map(|s| [s[1], s[2]]).collect()
}

/// The ground-truth right-hand side recorded on a tape for a batch of
/// samples. Rows are sample-major, node-minor; state columns are
/// `(ω, v, δ)` and the control has one column.
pub struct GridRhsVars {
    rows: usize,
    recv: Vec<usize>,
    send: Vec<usize>,
    line_g: Var,
    line_b: Var,
    shunt_g: Var,
    shunt_b: Var,
    k_p: Var,
    k_q: Var,
    inv_tau: Var,
    omega_d: Var,
    v_drive: Var,
}

impl GridRhsVars {
    pub fn bind(tape: &mut Tape, grid: &GridModel, batch: usize) -> Result<Self, AutodiffError> {
        let n = grid.n_nodes();
        let rows = batch * n;
        let directed = grid.topology().directed_edges();
        let mut recv = Vec::with_capacity(batch * directed.len());
        let mut send = Vec::with_capacity(batch * directed.len());
        let mut lg = Vec::with_capacity(recv.capacity());
        let mut lb = Vec::with_capacity(recv.capacity());
        for s in 0..batch {
            for d in &directed {
                recv.push(s * n + d.receiver);
                send.push(s * n + d.sender);
                lg.push(grid.lines()[d.edge].g);
                lb.push(grid.lines()[d.edge].b);
            }
        }
        let m = recv.len();
        let units = grid.units();
        let shunts = grid.shunts();
        let mut column = |f: &dyn Fn(usize) -> f64| tape.constant(&[rows, 1], (0..rows).map(|r| f(r % n)).collect());
        let shunt_g = column(&|i| shunts[i].g)?;
        let shunt_b = column(&|i| shunts[i].b)?;
        let k_p = column(&|i| units[i].k_p)?;
        let k_q = column(&|i| units[i].k_q)?;
        let inv_tau = column(&|i| 1.0 / units[i].tau)?;
        let omega_d = column(&|i| units[i].omega_d)?;
        let v_drive = column(&|i| units[i].v_d + units[i].k_q * units[i].q_d_nom)?;
        Ok(Self {
            rows,
            line_g: tape.constant(&[m, 1], lg)?,
            line_b: tape.constant(&[m, 1], lb)?,
            recv,
            send,
            shunt_g,
            shunt_b,
            k_p,
            k_q,
            inv_tau,
            omega_d,
            v_drive,
        })
    }

    /// `x: [rows, 3]` with columns `(ω, v, δ)`, `u: [rows, 1]`; returns the
    /// derivative in the same column order.
    pub fn eval(&self, tape: &mut Tape, x: Var, u: Var) -> Result<Var, AutodiffError> {
        if tape.shape(x) != [self.rows, 3] || tape.shape(u) != [self.rows, 1] {
            return Err(AutodiffError::ShapeMismatch {
                op: "grid_rhs",
                lhs: tape.shape(x).to_vec(),
                rhs: tape.shape(u).to_vec(),
            });
        }
        let omega = tape.slice(x, 1, 0, 1)?;
        let v = tape.slice(x, 1, 1, 2)?;
        let delta = tape.slice(x, 1, 2, 3)?;

        let vr = tape.gather_rows(v, &self.recv)?;
        let vs = tape.gather_rows(v, &self.send)?;
        let dr = tape.gather_rows(delta, &self.recv)?;
        let ds = tape.gather_rows(delta, &self.send)?;
        let dij = tape.sub(dr, ds)?;
        let (s, c) = (tape.sin(dij), tape.cos(dij));
        let vv = tape.mul(vr, vs)?;
        let vr2 = tape.square(vr);

        // p_ij = g v_i² − v_i v_j (g cos + b sin)
        let gc = tape.mul(self.line_g, c)?;
        let bs = tape.mul(self.line_b, s)?;
        let t = tape.add(gc, bs)?;
        let t = tape.mul(vv, t)?;
        let gv = tape.mul(self.line_g, vr2)?;
        let p_flow = tape.sub(gv, t)?;
        // q_ij = −b v_i² + v_i v_j (b cos − g sin)
        let bc = tape.mul(self.line_b, c)?;
        let gs = tape.mul(self.line_g, s)?;
        let t = tape.sub(bc, gs)?;
        let t = tape.mul(vv, t)?;
        let bv = tape.mul(self.line_b, vr2)?;
        let q_flow = tape.sub(t, bv)?;

        let v2 = tape.square(v);
        let p_sh = tape.mul(self.shunt_g, v2)?;
        let q_sh = tape.mul(self.shunt_b, v2)?;
        let p_lines = tape.scatter_add_rows(p_flow, &self.recv, self.rows)?;
        let q_lines = tape.scatter_add_rows(q_flow, &self.recv, self.rows)?;
        let p = tape.add(p_sh, p_lines)?;
        let q = tape.sub(q_lines, q_sh)?;

        // dω = (ω_d − ω − k_p (p − u)) / τ
        let dev = tape.sub(p, u)?;
        let dev = tape.mul(self.k_p, dev)?;
        let a = tape.sub(self.omega_d, omega)?;
        let a = tape.sub(a, dev)?;
        let d_omega = tape.mul(a, self.inv_tau)?;
        // dv = (v_d + k_q q_d − v − k_q q) / τ
        let kq = tape.mul(self.k_q, q)?;
        let b = tape.sub(self.v_drive, v)?;
        let b = tape.sub(b, kq)?;
        let d_v = tape.mul(b, self.inv_tau)?;
        let d_delta = tape.add_scalar(omega, -OMEGA_REF);
        tape.concat(&[d_omega, d_v, d_delta], 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check_many, Tensor};
    use crate::powergrid::{
        ieee9_model, triangle3_model, EdgeAdmittance, GridTopology, ShuntAdmittance,
    };
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit() -> UnitParams {
        UnitParams {
            k_p: 1.0,
            k_q: 0.1,
            tau: 1.0,
            omega_d: 1.0,
            v_d: 1.0,
            p_d_nom: 0.0,
            q_d_nom: 0.0,
        }
    }

    fn random_state(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n)
            .flat_map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(0.9..1.1),
                    rng.random_range(0.8..1.2),
                ]
            })
            .collect()
    }

    fn lossless(grid: &GridModel) -> GridModel {
        let mut cfg = grid.to_config();
        for n in &mut cfg.nodes {
            n.g_shunt = 0.0;
        }
        for e in &mut cfg.edges {
            e.g = 0.0;
        }
        GridModel::from_config(&cfg).unwrap()
    }

    #[test]
    fn line_flow_examples() {
        assert_eq!(line_flow(1.0, 1.0, 0.0, 0.7, -3.0), (0.0, 0.0));
        let (p, q) = line_flow(1.0, 1.0, 0.1, 0.0, -10.0);
        assert!((p - 10.0 * 0.1f64.sin()).abs() < 1e-15 && (p - 0.99833).abs() < 1e-5);
        assert!((q - 10.0 * (1.0 - 0.1f64.cos())).abs() < 1e-15 && (q - 0.04996).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn lossless_line_antisymmetry(d in -3.0f64..3.0, vi in 0.5f64..1.5, vj in 0.5f64..1.5, b in -20.0f64..20.0) {
            let (pij, _) = line_flow(vi, vj, d, 0.0, b);
            let (pji, _) = line_flow(vj, vi, -d, 0.0, b);
            prop_assert!((pij + pji).abs() <= 1e-12 * (1.0 + pij.abs()));
        }

        #[test]
        fn unit_rhs_is_affine_in_deviations(dp in -1.0f64..1.0, dq in -1.0f64..1.0, w in 0.9f64..1.1, v in 0.9f64..1.1) {
            let u = UnitParams { tau: 0.4, q_d_nom: 0.2, ..unit() };
            let base = unit_rhs((0.0, w, v), 0.3, u.q_d_nom, &u, 0.3, 1.0);
            let one = unit_rhs((0.0, w, v), 0.3 + dp, u.q_d_nom + dq, &u, 0.3, 1.0);
            let two = unit_rhs((0.0, w, v), 0.3 + 2.0 * dp, u.q_d_nom + 2.0 * dq, &u, 0.3, 1.0);
            prop_assert!(((two.1 - base.1) - 2.0 * (one.1 - base.1)).abs() < 1e-12);
            prop_assert!(((two.2 - base.2) - 2.0 * (one.2 - base.2)).abs() < 1e-12);
        }
    }

    #[test]
    fn injection_examples() {
        let topo = GridTopology::new(&[1], &[]).unwrap();
        let grid = GridModel::new(topo, vec![unit()], vec![ShuntAdmittance { g: 0.04, b: 0.0 }], vec![]).unwrap();
        assert_eq!(node_injection(&grid, &[0.3, 1.0, 1.0], 0), (0.04, 0.0));

        let topo = GridTopology::new(&[1, 2], &[(1, 2)]).unwrap();
        let grid = GridModel::new(
            topo,
            vec![unit(); 2],
            vec![ShuntAdmittance::default(); 2],
            vec![EdgeAdmittance { g: 0.0, b: -8.0 }],
        )
        .unwrap();
        let x = [0.2, 1.0, 1.05, -0.1, 1.0, 0.97];
        let (p1, _) = node_injection(&grid, &x, 0);
        let (p2, _) = node_injection(&grid, &x, 1);
        assert!(p1.abs() > 0.1 && (p1 + p2).abs() < 1e-12);
    }

    #[test]
    fn injections_cover_losses() {
        let grid = ieee9_model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let x = random_state(9, &mut rng);
            let total: f64 = (0..9).map(|i| node_injection(&grid, &x, i).0).sum();
            assert!(total >= -1e-12, "{total}");
        }
    }

    #[test]
    fn lossless_conservation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for grid in [lossless(&ieee9_model()), lossless(&triangle3_model())] {
            for _ in 0..200 {
                let x = random_state(grid.n_nodes(), &mut rng);
                let total: f64 = (0..grid.n_nodes()).map(|i| node_injection(&grid, &x, i).0).sum();
                assert!(total.abs() < 1e-12, "{total}");
            }
        }
    }

    #[test]
    fn unit_rhs_examples() {
        let u = UnitParams { q_d_nom: 0.3, ..unit() };
        assert_eq!(unit_rhs((0.4, 1.0, 1.0), 0.5, 0.3, &u, 0.5, 1.0), (0.0, 0.0, 0.0));
        let (_, dw, _) = unit_rhs((0.0, 1.0, 1.0), 0.0, 0.0, &unit(), 0.2, 1.0);
        assert!((dw - 0.2).abs() < 1e-15);
        let slow = UnitParams { tau: 2.0, ..unit() };
        let a = unit_rhs((0.0, 1.02, 0.97), 0.3, -0.1, &unit(), 0.1, 1.0);
        let b = unit_rhs((0.0, 1.02, 0.97), 0.3, -0.1, &slow, 0.1, 1.0);
        assert_eq!((b.1, b.2), (a.1 / 2.0, a.2 / 2.0));
    }

    #[test]
    fn system_rhs_shift_invariance() {
        let grid = ieee9_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        for _ in 0..50 {
            let x = random_state(9, &mut rng);
            let shift = rng.random_range(-10.0..10.0);
            let y: Vec<f64> = x.iter().enumerate().map(|(k, v)| if k % 3 == 0 { v + shift } else { *v }).collect();
            let mut a = vec![0.0; 27];
            let mut b = vec![0.0; 27];
            system_rhs(&grid, &x, &u, &mut a).unwrap();
            system_rhs(&grid, &y, &u, &mut b).unwrap();
            for k in 0..27 {
                assert!((a[k] - b[k]).abs() < 1e-12 * (1.0 + a[k].abs()), "{k}");
            }
        }
    }

    #[test]
    fn system_rhs_single_node_and_dimensions() {
        let topo = GridTopology::new(&[1], &[]).unwrap();
        let sh = ShuntAdmittance { g: 0.05, b: 0.1 };
        let grid = GridModel::new(topo, vec![unit()], vec![sh], vec![]).unwrap();
        let x = [0.1, 1.01, 0.99];
        let mut dx = [0.0; 3];
        system_rhs(&grid, &x, &[0.3], &mut dx).unwrap();
        let expected = unit_rhs((0.1, 1.01, 0.99), 0.05 * 0.99 * 0.99, -0.1 * 0.99 * 0.99, &unit(), 0.3, 1.0);
        assert_eq!(dx, [expected.0, expected.1, expected.2]);
        assert!(system_rhs(&grid, &x, &[0.3, 0.1], &mut dx).is_err());
    }

    #[test]
    fn measure_selects_outputs() {
        assert_eq!(measure(&[0.3, 1.0, 0.98]), vec![1.0, 0.98]);
        let x = [0.3, 1.0, 0.98, -2.0, 1.01, 1.02];
        let y = measure(&x);
        assert_eq!(y.len(), 4);
        let mut shifted = x;
        shifted[0] += 1.0;
        shifted[3] -= 0.5;
        assert_eq!(measure(&shifted), y);
    }

    fn to_rows(grid: &GridModel, batch: &[Vec<f64>]) -> Vec<f64> {
        let n = grid.n_nodes();
        batch
            .iter()
            .flat_map(|x| (0..n).flat_map(move |i| [x[3 * i + 1], x[3 * i + 2], x[3 * i]]))
            .collect()
    }

    #[test]
    fn tape_rhs_matches_plain_rhs() {
        let grid = ieee9_model();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let states: Vec<Vec<f64>> = (0..3).map(|_| random_state(9, &mut rng)).collect();
        let controls: Vec<Vec<f64>> = (0..3).map(|_| (0..9).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut tape = Tape::new();
        let rhs = GridRhsVars::bind(&mut tape, &grid, 3).unwrap();
        let x = tape.constant(&[27, 3], to_rows(&grid, &states)).unwrap();
        let u = tape.constant(&[27, 1], controls.concat()).unwrap();
        let dx = rhs.eval(&mut tape, x, u).unwrap();
        let got = tape.value(dx).to_vec();
        for s in 0..3 {
            let mut plain = vec![0.0; 27];
            system_rhs(&grid, &states[s], &controls[s], &mut plain).unwrap();
            let expected = to_rows(&grid, &[plain]);
            for k in 0..27 {
                assert!((got[s * 27 + k] - expected[k]).abs() < 1e-12, "sample {s} entry {k}");
            }
        }
    }

    #[test]
    fn tape_rhs_passes_grad_check() {
        let grid = triangle3_model();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let states: Vec<Vec<f64>> = (0..2).map(|_| random_state(3, &mut rng)).collect();
        let x = Tensor::new(&[6, 3], to_rows(&grid, &states)).unwrap();
        let u = Tensor::new(&[6, 1], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let err = grad_check_many(
            |tape, v| {
                let rhs = GridRhsVars::bind(tape, &grid, 2)?;
                let d = rhs.eval(tape, v[0], v[1])?;
                let d = tape.sin(d);
                Ok(tape.sum(d))
            },
            &[x, u],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
