use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EdgeAdmittance, GridModel, GridTopology, ShuntAdmittance, UnitParams};

/// Seed for the one-off draw of the unit time constants.
pub const IEEE9_TAU_SEED: u64 = 0x1EEE_0009;

const BASE_MVA: f64 = 100.0;

/// `(from, to, r, x, b_charging)` in pu on a 100 MVA base (case9).
const IEEE9_BRANCHES: [(usize, usize, f64, f64, f64); 9] = [
    (1, 4, 0.0, 0.0576, 0.0),
    (4, 5, 0.017, 0.092, 0.158),
    (5, 6, 0.039, 0.17, 0.358),
    (3, 6, 0.0, 0.0586, 0.0),
    (6, 7, 0.0119, 0.1008, 0.209),
    (7, 8, 0.0085, 0.072, 0.149),
    (8, 2, 0.0, 0.0625, 0.0),
    (8, 9, 0.032, 0.161, 0.306),
    (9, 4, 0.01, 0.085, 0.176),
];

/// `(bus, P_gen, Q_gen, P_load, Q_load)` in MW / MVAr (case9).
const IEEE9_BUSES: [(usize, f64, f64, f64, f64); 9] = [
    (1, 72.3, 27.03, 0.0, 0.0),
    (2, 163.0, 6.54, 0.0, 0.0),
    (3, 85.0, -10.95, 0.0, 0.0),
    (4, 0.0, 0.0, 0.0, 0.0),
    (5, 0.0, 0.0, 90.0, 30.0),
    (6, 0.0, 0.0, 0.0, 0.0),
    (7, 0.0, 0.0, 100.0, 35.0),
    (8, 0.0, 0.0, 0.0, 0.0),
    (9, 0.0, 0.0, 125.0, 50.0),
];

fn draw_taus(n: usize, slow: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            if i < slow {
                rng.random_range(0.9..=1.1)
            } else {
                rng.random_range(0.3..=0.5)
            }
        })
        .collect()
}

fn unit(tau: f64, p: f64, q: f64) -> UnitParams {
    UnitParams {
        k_p: 1.0,
        k_q: 0.1,
        tau,
        omega_d: 1.0,
        v_d: 1.0,
        p_d_nom: p,
        q_d_nom: q,
    }
}

/// The IEEE 9-bus system with a droop-controlled unit at every bus.
/// Net injections (generation minus load) become nominal setpoints; half of
/// each line's charging susceptance is placed at either end as a shunt.
pub fn ieee9_model() -> GridModel {
    let ids: Vec<usize> = IEEE9_BUSES.iter().map(|b| b.0).collect();
    let pairs: Vec<(usize, usize)> = IEEE9_BRANCHES.iter().map(|b| (b.0, b.1)).collect();
    let topology = GridTopology::new(&ids, &pairs).expect("static case data is valid");

    let mut shunts = vec![ShuntAdmittance::default(); 9];
    let lines = IEEE9_BRANCHES
        .iter()
        .map(|&(from, to, r, x, bc)| {
            shunts[from - 1].b += bc / 2.0;
            shunts[to - 1].b += bc / 2.0;
            let z2 = r * r + x * x;
            EdgeAdmittance { g: r / z2, b: -x / z2 }
        })
        .collect();

    let taus = draw_taus(9, 3, IEEE9_TAU_SEED);
    let units = IEEE9_BUSES
        .iter()
        .zip(taus)
        .map(|(&(_, pg, qg, pd, qd), tau)| unit(tau, (pg - pd) / BASE_MVA, (qg - qd) / BASE_MVA))
        .collect();
    GridModel::new(topology, units, shunts, lines).expect("static case data is valid")
}

/// A three-node meshed grid with one slow and two fast units.
pub fn triangle3_model() -> GridModel {
    let topology = GridTopology::new(&[1, 2, 3], &[(1, 2), (1, 3), (2, 3)]).expect("static case data is valid");
    let taus = draw_taus(3, 1, IEEE9_TAU_SEED ^ 3);
    let p = [0.5, -0.2, -0.3];
    let q = [0.1, 0.0, -0.1];
    let units = (0..3).map(|i| unit(taus[i], p[i], q[i])).collect();
    let shunts = vec![
        ShuntAdmittance { g: 0.0, b: 0.05 },
        ShuntAdmittance { g: 0.01, b: 0.03 },
        ShuntAdmittance { g: 0.02, b: 0.04 },
    ];
    let lines = vec![
        EdgeAdmittance { g: 1.2, b: -11.0 },
        EdgeAdmittance { g: 0.9, b: -9.0 },
        EdgeAdmittance { g: 1.0, b: -10.0 },
    ];
    GridModel::new(topology, units, shunts, lines).expect("static case data is valid")
}

/// Two nodes joined by one line: a slow source and a fast load.
pub fn pair2_model() -> GridModel {
    let topology = GridTopology::new(&[1, 2], &[(1, 2)]).expect("static case data is valid");
    let units = vec![unit(1.0, 0.3, 0.05), unit(0.4, -0.3, -0.05)];
    let shunts = vec![ShuntAdmittance { g: 0.0, b: 0.02 }, ShuntAdmittance { g: 0.01, b: 0.02 }];
    let lines = vec![EdgeAdmittance { g: 1.0, b: -10.0 }];
    GridModel::new(topology, units, shunts, lines).expect("static case data is valid")
}
