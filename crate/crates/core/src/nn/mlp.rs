//! Fully connected network with tanh hidden activations and residual
//! connections between equal-width hidden layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::init_matrix;
use crate::mat::Mat;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dense {
    /// (out x in)
    pub w: Mat,
    /// (out x 1)
    pub b: Mat,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
    pub residual: bool,
}

impl MlpParams {
    /// `depth` counts weight layers; the last one is linear, the rest apply
    /// tanh. `depth = 1` is a plain affine map.
    pub fn new(
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        depth: usize,
        residual: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(depth >= 1, "mlp needs at least one layer");
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            let din = if i == 0 { in_dim } else { hidden };
            let dout = if i + 1 == depth { out_dim } else { hidden };
            layers.push(Dense {
                w: init_matrix(dout, din, rng),
                b: Mat::zeros(dout, 1),
            });
        }
        MlpParams { layers, residual }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].w.cols
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().w.rows
    }

    pub fn visit(&self, f: &mut impl FnMut(&Mat)) {
        for l in &self.layers {
            f(&l.w);
            f(&l.b);
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut Mat)) {
        for l in &mut self.layers {
            f(&mut l.w);
            f(&mut l.b);
        }
    }

    /// Copy parameters onto the tape as leaves, in `visit` order.
    pub fn stage(&self, tape: &mut Tape) -> MlpVars {
        let layers = self
            .layers
            .iter()
            .map(|l| DenseVars {
                w: tape.leaf(&l.w.data, l.w.rows, l.w.cols),
                b: tape.leaf(&l.b.data, l.b.rows, l.b.cols),
            })
            .collect();
        MlpVars {
            layers,
            residual: self.residual,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DenseVars {
    pub w: Var,
    pub b: Var,
}

#[derive(Clone, Debug)]
pub struct MlpVars {
    pub layers: Vec<DenseVars>,
    pub residual: bool,
}

impl MlpVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            out.push(l.w);
            out.push(l.b);
        }
        out
    }

    /// Forward pass on a column vector input.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let wx = tape.matmul(l.w, h);
            let pre = tape.add(wx, l.b);
            if i == last {
                return pre;
            }
            let act = tape.tanh(pre);
            let (wr, wc) = tape.shape(l.w);
            h = if self.residual && wr == wc {
                tape.add(h, act)
            } else {
                act
            };
        }
        unreachable!()
    }

    /// Forward pass that also propagates an input tangent: `dx` holds
    /// d(input)/d(basis) as an (in_dim x p) matrix and the returned pair is
    /// (output, d(output)/d(basis)). The tangent is built from tape
    /// primitives, so it stays differentiable with respect to the weights.
    pub fn forward_with_tangent(&self, tape: &mut Tape, x: Var, dx: Var) -> (Var, Var) {
        let mut h = x;
        let mut dh = dx;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let wx = tape.matmul(l.w, h);
            let pre = tape.add(wx, l.b);
            let dpre = tape.matmul(l.w, dh);
            if i == last {
                return (pre, dpre);
            }
            let act = tape.tanh(pre);
            // d tanh = (1 - tanh^2) applied per row of the tangent.
            let sq = tape.square(act);
            let gate = tape.affine(sq, -1.0, 1.0);
            let dact = tape.row_scale(dpre, gate);
            let (wr, wc) = tape.shape(l.w);
            if self.residual && wr == wc {
                h = tape.add(h, act);
                dh = tape.add(dh, dact);
            } else {
                h = act;
                dh = dact;
            }
        }
        unreachable!()
    }
}
