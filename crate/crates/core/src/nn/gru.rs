//! Gated recurrent unit. The hidden state doubles as the model's latent
//! state, so the cell exposes a tangent-propagating step for Jacobian
//! extraction.
//!
//! Convention: h' = z (*) h + (1 - z) (*) c, with z the update gate (z = 1
//! keeps the previous state) and c = tanh(Wc [r (*) h; x] + bc).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::init_matrix;
use crate::mat::Mat;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GruParams {
    /// Update gate, (hidden x (hidden + input)).
    pub wz: Mat,
    pub bz: Mat,
    /// Reset gate, same shape.
    pub wr: Mat,
    pub br: Mat,
    /// Candidate, same shape.
    pub wc: Mat,
    pub bc: Mat,
    pub hidden_dim: usize,
    pub input_dim: usize,
}

impl GruParams {
    pub fn new(hidden_dim: usize, input_dim: usize, rng: &mut impl Rng) -> Self {
        let cat = hidden_dim + input_dim;
        GruParams {
            wz: init_matrix(hidden_dim, cat, rng),
            bz: Mat::zeros(hidden_dim, 1),
            wr: init_matrix(hidden_dim, cat, rng),
            br: Mat::zeros(hidden_dim, 1),
            wc: init_matrix(hidden_dim, cat, rng),
            bc: Mat::zeros(hidden_dim, 1),
            hidden_dim,
            input_dim,
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(&Mat)) {
        f(&self.wz);
        f(&self.bz);
        f(&self.wr);
        f(&self.br);
        f(&self.wc);
        f(&self.bc);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut Mat)) {
        f(&mut self.wz);
        f(&mut self.bz);
        f(&mut self.wr);
        f(&mut self.br);
        f(&mut self.wc);
        f(&mut self.bc);
    }

    pub fn stage(&self, tape: &mut Tape) -> GruVars {
        GruVars {
            wz: tape.leaf(&self.wz.data, self.wz.rows, self.wz.cols),
            bz: tape.leaf(&self.bz.data, self.bz.rows, self.bz.cols),
            wr: tape.leaf(&self.wr.data, self.wr.rows, self.wr.cols),
            br: tape.leaf(&self.br.data, self.br.rows, self.br.cols),
            wc: tape.leaf(&self.wc.data, self.wc.rows, self.wc.cols),
            bc: tape.leaf(&self.bc.data, self.bc.rows, self.bc.cols),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub wz: Var,
    pub bz: Var,
    pub wr: Var,
    pub br: Var,
    pub wc: Var,
    pub bc: Var,
}

impl GruVars {
    pub fn vars(&self) -> Vec<Var> {
        vec![self.wz, self.bz, self.wr, self.br, self.wc, self.bc]
    }

    /// One recurrence step: hidden (h_dim x 1), input (x_dim x 1).
    pub fn step(&self, tape: &mut Tape, hidden: Var, input: Var) -> Var {
        let u = tape.concat_rows(&[hidden, input]);
        let z = gate(tape, self.wz, self.bz, u);
        let r = gate(tape, self.wr, self.br, u);
        let rh = tape.mul(r, hidden);
        let v = tape.concat_rows(&[rh, input]);
        let cv = tape.matmul(self.wc, v);
        let cpre = tape.add(cv, self.bc);
        let c = tape.tanh(cpre);
        let zh = tape.mul(z, hidden);
        let one_minus_z = tape.affine(z, -1.0, 1.0);
        let zc = tape.mul(one_minus_z, c);
        tape.add(zh, zc)
    }

    /// Recurrence step with tangent propagation. `dh` and `dx` hold
    /// d(hidden)/d(basis) and d(input)/d(basis) as (dim x p) matrices;
    /// returns (h', dh'). Built from tape primitives so the Jacobian remains
    /// differentiable with respect to the gate weights.
    pub fn step_with_tangent(
        &self,
        tape: &mut Tape,
        hidden: Var,
        input: Var,
        dh: Var,
        dx: Var,
    ) -> (Var, Var) {
        let u = tape.concat_rows(&[hidden, input]);
        let du = tape.concat_rows(&[dh, dx]);

        let (z, dz) = gate_with_tangent(tape, self.wz, self.bz, u, du);
        let (r, dr) = gate_with_tangent(tape, self.wr, self.br, u, du);

        let rh = tape.mul(r, hidden);
        // d(r*h) = r*dh + h*dr, rowwise over the tangent columns.
        let r_dh = tape.row_scale(dh, r);
        let h_dr = tape.row_scale(dr, hidden);
        let drh = tape.add(r_dh, h_dr);

        let v = tape.concat_rows(&[rh, input]);
        let dv = tape.concat_rows(&[drh, dx]);
        let cv = tape.matmul(self.wc, v);
        let cpre = tape.add(cv, self.bc);
        let c = tape.tanh(cpre);
        let dcpre = tape.matmul(self.wc, dv);
        let csq = tape.square(c);
        let cgate = tape.affine(csq, -1.0, 1.0);
        let dc = tape.row_scale(dcpre, cgate);

        let zh = tape.mul(z, hidden);
        let one_minus_z = tape.affine(z, -1.0, 1.0);
        let zc = tape.mul(one_minus_z, c);
        let hnew = tape.add(zh, zc);

        // dh' = z*dh + (h - c)*dz + (1 - z)*dc
        let z_dh = tape.row_scale(dh, z);
        let h_minus_c = tape.sub(hidden, c);
        let hc_dz = tape.row_scale(dz, h_minus_c);
        let omz_dc = tape.row_scale(dc, one_minus_z);
        let s1 = tape.add(z_dh, hc_dz);
        let dhnew = tape.add(s1, omz_dc);
        (hnew, dhnew)
    }
}

fn gate(tape: &mut Tape, w: Var, b: Var, u: Var) -> Var {
    let wu = tape.matmul(w, u);
    let pre = tape.add(wu, b);
    tape.sigmoid(pre)
}

fn gate_with_tangent(tape: &mut Tape, w: Var, b: Var, u: Var, du: Var) -> (Var, Var) {
    let wu = tape.matmul(w, u);
    let pre = tape.add(wu, b);
    let g = tape.sigmoid(pre);
    let dpre = tape.matmul(w, du);
    // d sigmoid = g (1 - g)
    let omg = tape.affine(g, -1.0, 1.0);
    let scale = tape.mul(g, omg);
    let dg = tape.row_scale(dpre, scale);
    (g, dg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn step_vec(p: &GruParams, h: &[f64], x: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let vars = p.stage(&mut tape);
        let hv = tape.leaf_vec(h);
        let xv = tape.leaf_vec(x);
        let out = vars.step(&mut tape, hv, xv);
        tape.value(out).to_vec()
    }

    #[test]
    fn large_update_bias_carries_hidden_over() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = GruParams::new(4, 2, &mut rng);
        p.bz.data.fill(50.0);
        let h = [0.3, -0.7, 1.1, 0.05];
        let out = step_vec(&p, &h, &[0.4, -0.2]);
        let max_diff = out
            .iter()
            .zip(&h)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-9, "carry-over violated: {max_diff}");
    }

    #[test]
    fn zero_update_gate_returns_candidate() {
        // Scalar cell with z forced to 0: h' = tanh(wc . [r*h; x] + bc),
        // r = sigmoid(wr . [h; x] + br).
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = GruParams::new(1, 1, &mut rng);
        p.bz.data.fill(-50.0);
        p.wz.data.fill(0.0);
        p.wr.data.copy_from_slice(&[0.4, -0.3]);
        p.br.data.fill(0.1);
        p.wc.data.copy_from_slice(&[0.7, 0.2]);
        p.bc.data.fill(-0.05);
        let (h, x) = (0.6, -0.9);
        let out = step_vec(&p, &[h], &[x]);
        let r = 1.0 / (1.0 + (-(0.4 * h - 0.3 * x + 0.1)).exp());
        let want = (0.7 * (r * h) + 0.2 * x - 0.05).tanh();
        assert!((out[0] - want).abs() < 1e-12, "{} vs {}", out[0], want);
    }

    #[test]
    fn zero_weights_halve_the_hidden_state() {
        // All gates sit at sigmoid(0) = 0.5 and the candidate is tanh(0) = 0,
        // so h' = 0.5 h + 0.5 * 0.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = GruParams::new(3, 2, &mut rng);
        p.visit_mut(&mut |m| m.data.fill(0.0));
        let h = [0.8, -0.4, 2.0];
        let out = step_vec(&p, &h, &[1.0, -1.0]);
        for (o, hv) in out.iter().zip(&h) {
            assert!((o - 0.5 * hv).abs() < 1e-15);
        }
    }

    #[test]
    fn gate_shapes_are_hidden_by_hidden_plus_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = GruParams::new(5, 3, &mut rng);
        for m in [&p.wz, &p.wr, &p.wc] {
            assert_eq!((m.rows, m.cols), (5, 8));
        }
    }

    #[test]
    fn tangent_matches_finite_difference_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = GruParams::new(4, 3, &mut rng);
        let h: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();

        // Tangent basis spans (h, x) jointly: p = 7 columns.
        let mut tape = Tape::new();
        let vars = p.stage(&mut tape);
        let hv = tape.leaf_vec(&h);
        let xv = tape.leaf_vec(&x);
        let basis = tape.eye(7);
        let dh = tape.block(basis, 0, 0, 4, 7);
        let dx = tape.block(basis, 4, 0, 3, 7);
        let (_, jac) = vars.step_with_tangent(&mut tape, hv, xv, dh, dx);
        let j = tape.value(jac).to_vec();

        let eps = 1e-6;
        for col in 0..7 {
            let perturb = |sign: f64| -> Vec<f64> {
                let mut hh = h.clone();
                let mut xx = x.clone();
                if col < 4 {
                    hh[col] += sign * eps;
                } else {
                    xx[col - 4] += sign * eps;
                }
                step_vec(&p, &hh, &xx)
            };
            let yp = perturb(1.0);
            let ym = perturb(-1.0);
            for row in 0..4 {
                let fd = (yp[row] - ym[row]) / (2.0 * eps);
                assert!(
                    (j[row * 7 + col] - fd).abs() < 1e-7,
                    "J[{row}][{col}]: {} vs fd {fd}",
                    j[row * 7 + col]
                );
            }
        }
    }

    #[test]
    fn tangent_step_values_match_plain_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = GruParams::new(6, 4, &mut rng);
        let h: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();

        let plain = step_vec(&p, &h, &x);

        let mut tape = Tape::new();
        let vars = p.stage(&mut tape);
        let hv = tape.leaf_vec(&h);
        let xv = tape.leaf_vec(&x);
        let dh = tape.zeros(6, 2);
        let dx = tape.zeros(4, 2);
        let (out, _) = vars.step_with_tangent(&mut tape, hv, xv, dh, dx);
        let with_tangent = tape.value(out).to_vec();
        assert_eq!(plain, with_tangent);
    }

    #[test]
    fn grad_through_step_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = GruParams::new(3, 2, &mut rng);
        let h = [0.2, -0.5, 0.8];
        let x = [0.6, -0.1];

        let loss_of = |p: &GruParams| -> f64 {
            let mut tape = Tape::new();
            let vars = p.stage(&mut tape);
            let hv = tape.leaf_vec(&h);
            let xv = tape.leaf_vec(&x);
            let out = vars.step(&mut tape, hv, xv);
            let sq = tape.square(out);
            let s = tape.sum_all(sq);
            tape.scalar(s)
        };

        let mut tape = Tape::new();
        let vars = p.stage(&mut tape);
        let hv = tape.leaf_vec(&h);
        let xv = tape.leaf_vec(&x);
        let out = vars.step(&mut tape, hv, xv);
        let sq = tape.square(out);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();

        let mut probe = p.clone();
        let eps = 1e-6;
        for (mat_idx, var) in [(0usize, vars.wr), (1, vars.wc)] {
            let g = grads.get(var).to_vec();
            for e in [0usize, 4, 9] {
                let m = if mat_idx == 0 {
                    &mut probe.wr
                } else {
                    &mut probe.wc
                };
                let orig = m.data[e];
                m.data[e] = orig + eps;
                let fp = loss_of(&probe);
                let m = if mat_idx == 0 {
                    &mut probe.wr
                } else {
                    &mut probe.wc
                };
                m.data[e] = orig - eps;
                let fm = loss_of(&probe);
                let m = if mat_idx == 0 {
                    &mut probe.wr
                } else {
                    &mut probe.wc
                };
                m.data[e] = orig;
                let fd = (fp - fm) / (2.0 * eps);
                let denom = fd.abs().max(g[e].abs()).max(1e-8);
                assert!(
                    (fd - g[e]).abs() / denom < 1e-4,
                    "mat {mat_idx} elem {e}: ad {} vs fd {fd}",
                    g[e]
                );
            }
        }
    }
}
