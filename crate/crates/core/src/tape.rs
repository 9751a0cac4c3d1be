//! Reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! Operations are recorded eagerly on a linear tape backed by a single value
//! arena; a backward pass walks the tape in reverse and accumulates adjoints
//! into a parallel gradient arena. The op set is the minimum needed to express
//! recurrent network steps, their Jacobians (propagated as tangent matrices),
//! Kalman-filter algebra and Gaussian log-densities, so that any smooth
//! functional of a filter rollout can be differentiated with respect to the
//! network parameters.
//!
//! All values are row-major `(rows, cols)` matrices; vectors are `(len, 1)`.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Snapshot of tape length; see [`Tape::mark`].
#[derive(Clone, Copy, Debug)]
pub struct TapeMark {
    ops: usize,
    vals: usize,
    cat_args: usize,
}

#[derive(Clone, Copy, Debug)]
struct Meta {
    off: usize,
    rows: u32,
    cols: u32,
}

impl Meta {
    #[inline]
    fn len(&self) -> usize {
        self.rows as usize * self.cols as usize
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// k * a + c, elementwise with scalar constants.
    Affine(Var, f64, f64),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    /// max(a, c) elementwise; gradient passes through where a >= c.
    ClampMin(Var, f64),
    /// diag(s) * a where s is a column vector with one entry per row of a.
    RowScale(Var, Var),
    RowSum(Var),
    SumAll(Var),
    /// Vertical stack; operand list lives in `cat_args[start..start+count]`.
    ConcatRows { start: u32, count: u32 },
    SliceRows(Var, usize, usize),
    Block(Var, usize, usize, usize, usize),
    DiagMake(Var),
    DiagExtract(Var),
    /// Lower Cholesky factor of the symmetrized input.
    Cholesky(Var),
    /// Matrix inverse via Gauss-Jordan with partial pivoting.
    Inverse(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Affine(..) => "affine",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::ClampMin(..) => "clamp_min",
            Op::RowScale(..) => "row_scale",
            Op::RowSum(..) => "row_sum",
            Op::SumAll(..) => "sum_all",
            Op::ConcatRows { .. } => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::Block(..) => "block",
            Op::DiagMake(..) => "diag_make",
            Op::DiagExtract(..) => "diag_extract",
            Op::Cholesky(..) => "cholesky",
            Op::Inverse(..) => "inverse",
        }
    }
}

/// General small-matrix multiply: out (m x n) += or = opA(a) * opB(b).
/// `a` is (m x k) when `ta` is false, (k x m) when true; likewise for `b`.
fn gemm(
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    out: &mut [f64],
    acc: bool,
) {
    debug_assert_eq!(out.len(), m * n);
    if !acc {
        out.fill(0.0);
    }
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let or = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let br = &b[p * n..(p + 1) * n];
                    for j in 0..n {
                        or[j] += av * br[j];
                    }
                }
            }
        }
        (true, false) => {
            // a stored (k x m)
            for i in 0..m {
                let or = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[p * m + i];
                    if av == 0.0 {
                        continue;
                    }
                    let br = &b[p * n..(p + 1) * n];
                    for j in 0..n {
                        or[j] += av * br[j];
                    }
                }
            }
        }
        (false, true) => {
            // b stored (n x k)
            for i in 0..m {
                let ar = &a[i * k..(i + 1) * k];
                let or = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    let br = &b[j * k..(j + 1) * k];
                    let mut s = 0.0;
                    for p in 0..k {
                        s += ar[p] * br[p];
                    }
                    or[j] += s;
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                let or = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += a[p * m + i] * b[j * k + p];
                    }
                    or[j] += s;
                }
            }
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Recording tape. Create one per differentiated computation (or reuse via
/// [`Tape::clear`]); record leaves, build the expression, then call
/// [`Tape::backward`] on a scalar node.
pub struct Tape {
    ops: Vec<Op>,
    meta: Vec<Meta>,
    vals: Vec<f64>,
    cat_args: Vec<Var>,
    eye_cache: HashMap<usize, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            ops: Vec::new(),
            meta: Vec::new(),
            vals: Vec::new(),
            cat_args: Vec::new(),
            eye_cache: HashMap::new(),
        }
    }

    /// Drop all recorded nodes but keep allocated capacity.
    pub fn clear(&mut self) {
        self.ops.clear();
        self.meta.clear();
        self.vals.clear();
        self.cat_args.clear();
        self.eye_cache.clear();
    }

    /// Snapshot the tape length so later nodes can be rolled back.
    pub fn mark(&self) -> TapeMark {
        TapeMark {
            ops: self.ops.len(),
            vals: self.vals.len(),
            cat_args: self.cat_args.len(),
        }
    }

    /// Discard every node recorded after `mark`. Handles created after the
    /// mark become invalid; handles from before (typically staged
    /// parameters) stay usable, which lets rollout loops re-stage once and
    /// replay many short computations.
    pub fn truncate(&mut self, mark: TapeMark) {
        assert!(mark.ops <= self.ops.len(), "mark from a different tape state");
        self.ops.truncate(mark.ops);
        self.meta.truncate(mark.ops);
        self.vals.truncate(mark.vals);
        self.cat_args.truncate(mark.cat_args);
        self.eye_cache.retain(|_, v| v.index() < mark.ops);
    }

    pub fn num_nodes(&self) -> usize {
        self.ops.len()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let m = &self.meta[v.index()];
        (m.rows as usize, m.cols as usize)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let m = &self.meta[v.index()];
        &self.vals[m.off..m.off + m.len()]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        val[0]
    }

    // -- construction ------------------------------------------------------

    pub fn leaf(&mut self, data: &[f64], rows: usize, cols: usize) -> Var {
        assert_eq!(data.len(), rows * cols, "leaf data length");
        let off = self.vals.len();
        self.vals.extend_from_slice(data);
        self.meta.push(Meta {
            off,
            rows: rows as u32,
            cols: cols as u32,
        });
        self.ops.push(Op::Leaf);
        Var((self.ops.len() - 1) as u32)
    }

    pub fn leaf_vec(&mut self, data: &[f64]) -> Var {
        self.leaf(data, data.len(), 1)
    }

    pub fn scalar_leaf(&mut self, x: f64) -> Var {
        self.leaf(&[x], 1, 1)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        let off = self.vals.len();
        self.vals.resize(off + rows * cols, 0.0);
        self.meta.push(Meta {
            off,
            rows: rows as u32,
            cols: cols as u32,
        });
        self.ops.push(Op::Leaf);
        Var((self.ops.len() - 1) as u32)
    }

    /// Constant identity, cached per size within the tape.
    pub fn eye(&mut self, n: usize) -> Var {
        if let Some(&v) = self.eye_cache.get(&n) {
            return v;
        }
        let off = self.vals.len();
        self.vals.resize(off + n * n, 0.0);
        for i in 0..n {
            self.vals[off + i * n + i] = 1.0;
        }
        self.meta.push(Meta {
            off,
            rows: n as u32,
            cols: n as u32,
        });
        self.ops.push(Op::Leaf);
        let v = Var((self.ops.len() - 1) as u32);
        self.eye_cache.insert(n, v);
        v
    }

    fn record(&mut self, op: Op, rows: usize, cols: usize) -> Var {
        self.try_record(op, rows, cols)
            .expect("infallible op failed")
    }

    fn try_record(&mut self, op: Op, rows: usize, cols: usize) -> Result<Var> {
        let off = self.vals.len();
        self.vals.resize(off + rows * cols, 0.0);
        let (src, dst) = self.vals.split_at_mut(off);
        if let Err(e) = eval_op(&op, &self.meta, &self.cat_args, src, dst, rows, cols) {
            self.vals.truncate(off);
            return Err(e);
        }
        self.meta.push(Meta {
            off,
            rows: rows as u32,
            cols: cols as u32,
        });
        self.ops.push(op);
        Ok(Var((self.ops.len() - 1) as u32))
    }

    // -- ops ---------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        assert_eq!(ka, kb, "matmul inner dims {}x{} * {}x{}", m, ka, kb, n);
        self.record(Op::MatMul(a, b), m, n)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        self.record(Op::Transpose(a), n, m)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let s = self.shape(a);
        assert_eq!(s, self.shape(b), "add shapes");
        self.record(Op::Add(a, b), s.0, s.1)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let s = self.shape(a);
        assert_eq!(s, self.shape(b), "sub shapes");
        self.record(Op::Sub(a, b), s.0, s.1)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let s = self.shape(a);
        assert_eq!(s, self.shape(b), "mul shapes");
        self.record(Op::Mul(a, b), s.0, s.1)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let s = self.shape(a);
        assert_eq!(s, self.shape(b), "div shapes");
        self.record(Op::Div(a, b), s.0, s.1)
    }

    pub fn affine(&mut self, a: Var, k: f64, c: f64) -> Var {
        let s = self.shape(a);
        self.record(Op::Affine(a, k, c), s.0, s.1)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        self.record(Op::Tanh(a), s.0, s.1)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        self.record(Op::Sigmoid(a), s.0, s.1)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        self.record(Op::Softplus(a), s.0, s.1)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        self.record(Op::Exp(a), s.0, s.1)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        self.record(Op::Ln(a), s.0, s.1)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        self.record(Op::Sqrt(a), s.0, s.1)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        self.record(Op::Square(a), s.0, s.1)
    }

    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        let s = self.shape(a);
        self.record(Op::ClampMin(a, c), s.0, s.1)
    }

    pub fn row_scale(&mut self, a: Var, s: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(s), (m, 1), "row_scale scaler shape");
        self.record(Op::RowScale(a, s), m, n)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let (m, _) = self.shape(a);
        self.record(Op::RowSum(a), m, 1)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        self.record(Op::SumAll(a), 1, 1)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.shape(parts[0]).1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            assert_eq!(c, cols, "concat_rows col mismatch");
            rows += r;
        }
        let start = self.cat_args.len() as u32;
        self.cat_args.extend_from_slice(parts);
        self.record(
            Op::ConcatRows {
                start,
                count: parts.len() as u32,
            },
            rows,
            cols,
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(start + len <= m, "slice_rows out of range");
        self.record(Op::SliceRows(a, start, len), len, n)
    }

    pub fn block(&mut self, a: Var, r0: usize, c0: usize, rows: usize, cols: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(r0 + rows <= m && c0 + cols <= n, "block out of range");
        self.record(Op::Block(a, r0, c0, rows, cols), rows, cols)
    }

    pub fn diag_make(&mut self, v: Var) -> Var {
        let (m, n) = self.shape(v);
        assert_eq!(n, 1, "diag_make wants a column vector");
        self.record(Op::DiagMake(v), m, m)
    }

    pub fn diag_extract(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(m, n, "diag_extract wants square");
        self.record(Op::DiagExtract(a), m, 1)
    }

    /// Lower Cholesky factor of the symmetrized input. Fails if a pivot is
    /// not strictly positive.
    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        assert_eq!(m, n, "cholesky wants square");
        self.try_record(Op::Cholesky(a), m, m)
    }

    /// Inverse of a square matrix; fails on (near-)singular input.
    pub fn inverse(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        assert_eq!(m, n, "inverse wants square");
        self.try_record(Op::Inverse(a), m, m)
    }

    // -- composites --------------------------------------------------------

    pub fn symmetrize(&mut self, a: Var) -> Var {
        let at = self.transpose(a);
        let s = self.add(a, at);
        self.affine(s, 0.5, 0.0)
    }

    /// mean + sqrt_diag .* noise, the reparametrized sample of a diagonal
    /// Gaussian. Gradients flow to `mean` and `sqrt_diag`; `noise` is
    /// ordinarily a constant leaf.
    pub fn reparam_sample(&mut self, mean: Var, sqrt_diag: Var, noise: Var) -> Var {
        let scaled = self.mul(sqrt_diag, noise);
        self.add(mean, scaled)
    }

    // -- differentiation ---------------------------------------------------

    /// Locate the first node whose value contains a non-finite entry.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        for (i, meta) in self.meta.iter().enumerate() {
            let val = &self.vals[meta.off..meta.off + meta.len()];
            if val.iter().any(|v| !v.is_finite()) {
                return Some((i, self.ops[i].name()));
            }
        }
        None
    }

    /// Reverse pass from a finite scalar node. Returns per-node adjoints;
    /// nodes not on the path to `loss` get exact zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<'_>> {
        let lm = &self.meta[loss.index()];
        assert_eq!(lm.len(), 1, "backward from non-scalar");
        if !self.vals[lm.off].is_finite() {
            let (node, op) = self
                .first_non_finite()
                .unwrap_or((loss.index(), "unknown"));
            return Err(Error::Gradient { node, op });
        }
        let mut g = vec![0.0; self.vals.len()];
        g[lm.off] = 1.0;

        for id in (0..self.ops.len()).rev() {
            let out = self.meta[id];
            let out_len = out.len();
            // Inputs always precede outputs in the arena.
            let (gin, gout_region) = g.split_at_mut(out.off);
            let gout = &gout_region[..out_len];
            if gout.iter().all(|&x| x == 0.0) {
                continue;
            }
            self.backward_op(id, out, gout, gin);
        }
        Ok(Gradients { tape: self, g })
    }

    fn backward_op(&self, id: usize, out: Meta, gout: &[f64], gin: &mut [f64]) {
        let m = |v: Var| self.meta[v.index()];
        let val = |v: Var| {
            let mm = self.meta[v.index()];
            &self.vals[mm.off..mm.off + mm.len()]
        };
        let (orows, ocols) = (out.rows as usize, out.cols as usize);
        let oval = &self.vals[out.off..out.off + out.len()];

        match &self.ops[id] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (am, ak) = (m(*a).rows as usize, m(*a).cols as usize);
                let (_, bn) = (m(*b).rows as usize, m(*b).cols as usize);
                let aoff = m(*a).off;
                let boff = m(*b).off;
                // ga += gout * b^T
                gemm(
                    am,
                    ak,
                    bn,
                    gout,
                    false,
                    val(*b),
                    true,
                    &mut gin[aoff..aoff + am * ak],
                    true,
                );
                // gb += a^T * gout
                gemm(
                    ak,
                    bn,
                    am,
                    val(*a),
                    true,
                    gout,
                    false,
                    &mut gin[boff..boff + ak * bn],
                    true,
                );
            }
            Op::Transpose(a) => {
                let am = m(*a);
                let (ar, ac) = (am.rows as usize, am.cols as usize);
                for i in 0..ar {
                    for j in 0..ac {
                        gin[am.off + i * ac + j] += gout[j * ar + i];
                    }
                }
            }
            Op::Add(a, b) => {
                for (i, &gv) in gout.iter().enumerate() {
                    gin[m(*a).off + i] += gv;
                }
                for (i, &gv) in gout.iter().enumerate() {
                    gin[m(*b).off + i] += gv;
                }
            }
            Op::Sub(a, b) => {
                for (i, &gv) in gout.iter().enumerate() {
                    gin[m(*a).off + i] += gv;
                }
                for (i, &gv) in gout.iter().enumerate() {
                    gin[m(*b).off + i] -= gv;
                }
            }
            Op::Mul(a, b) => {
                let (ao, bo) = (m(*a).off, m(*b).off);
                let (av, bv) = (val(*a), val(*b));
                for (i, &gv) in gout.iter().enumerate() {
                    gin[ao + i] += gv * bv[i];
                }
                for (i, &gv) in gout.iter().enumerate() {
                    gin[bo + i] += gv * av[i];
                }
            }
            Op::Div(a, b) => {
                let (ao, bo) = (m(*a).off, m(*b).off);
                let (av, bv) = (val(*a), val(*b));
                for (i, &gv) in gout.iter().enumerate() {
                    gin[ao + i] += gv / bv[i];
                }
                for (i, &gv) in gout.iter().enumerate() {
                    gin[bo + i] -= gv * av[i] / (bv[i] * bv[i]);
                }
            }
            Op::Affine(a, k, _) => {
                let ao = m(*a).off;
                for (i, &gv) in gout.iter().enumerate() {
                    gin[ao + i] += k * gv;
                }
            }
            Op::Tanh(a) => {
                let ao = m(*a).off;
                for (i, &gv) in gout.iter().enumerate() {
                    gin[ao + i] += gv * (1.0 - oval[i] * oval[i]);
                }
            }
            Op::Sigmoid(a) => {
                let ao = m(*a).off;
                for (i, &gv) in gout.iter().enumerate() {
                    gin[ao + i] += gv * oval[i] * (1.0 - oval[i]);
                }
            }
            Op::Softplus(a) => {
                let ao = m(*a).off;
                let av = val(*a);
                for (i, &gv) in gout.iter().enumerate() {
                    gin[ao + i] += gv * sigmoid(av[i]);
                }
            }
            Op::Exp(a) => {
                let ao = m(*a).off;
                for (i, &gv) in gout.iter().enumerate() {
                    gin[ao + i] += gv * oval[i];
                }
            }
            Op::Ln(a) => {
                let ao = m(*a).off;
                let av = val(*a);
                for (i, &gv) in gout.iter().enumerate() {
                    gin[ao + i] += gv / av[i];
                }
            }
            Op::Sqrt(a) => {
                let ao = m(*a).off;
                for (i, &gv) in gout.iter().enumerate() {
                    gin[ao + i] += gv * 0.5 / oval[i];
                }
            }
            Op::Square(a) => {
                let ao = m(*a).off;
                let av = val(*a);
                for (i, &gv) in gout.iter().enumerate() {
                    gin[ao + i] += gv * 2.0 * av[i];
                }
            }
            Op::ClampMin(a, c) => {
                let ao = m(*a).off;
                let av = val(*a);
                for (i, &gv) in gout.iter().enumerate() {
                    if av[i] >= *c {
                        gin[ao + i] += gv;
                    }
                }
            }
            Op::RowScale(a, s) => {
                let (ao, so) = (m(*a).off, m(*s).off);
                let av = val(*a);
                let sv = val(*s);
                for i in 0..orows {
                    let si = sv[i];
                    let mut acc = 0.0;
                    for j in 0..ocols {
                        let gv = gout[i * ocols + j];
                        gin[ao + i * ocols + j] += gv * si;
                        acc += gv * av[i * ocols + j];
                    }
                    gin[so + i] += acc;
                }
            }
            Op::RowSum(a) => {
                let am = m(*a);
                let ac = am.cols as usize;
                for i in 0..am.rows as usize {
                    let gv = gout[i];
                    for j in 0..ac {
                        gin[am.off + i * ac + j] += gv;
                    }
                }
            }
            Op::SumAll(a) => {
                let am = m(*a);
                let gv = gout[0];
                for i in 0..am.len() {
                    gin[am.off + i] += gv;
                }
            }
            Op::ConcatRows { start, count } => {
                let mut row0 = 0usize;
                for t in 0..*count as usize {
                    let p = self.cat_args[*start as usize + t];
                    let pm = m(p);
                    let plen = pm.len();
                    let src = &gout[row0 * ocols..row0 * ocols + plen];
                    for (i, &gv) in src.iter().enumerate() {
                        gin[pm.off + i] += gv;
                    }
                    row0 += pm.rows as usize;
                }
            }
            Op::SliceRows(a, start, _) => {
                let am = m(*a);
                let ac = am.cols as usize;
                let base = am.off + start * ac;
                for (i, &gv) in gout.iter().enumerate() {
                    gin[base + i] += gv;
                }
            }
            Op::Block(a, r0, c0, rows, cols) => {
                let am = m(*a);
                let ac = am.cols as usize;
                for i in 0..*rows {
                    for j in 0..*cols {
                        gin[am.off + (r0 + i) * ac + (c0 + j)] += gout[i * cols + j];
                    }
                }
            }
            Op::DiagMake(v) => {
                let vm = m(*v);
                for i in 0..orows {
                    gin[vm.off + i] += gout[i * ocols + i];
                }
            }
            Op::DiagExtract(a) => {
                let am = m(*a);
                let ac = am.cols as usize;
                for i in 0..orows {
                    gin[am.off + i * ac + i] += gout[i];
                }
            }
            Op::Cholesky(a) => {
                self.backward_cholesky(m(*a), oval, gout, gin, orows);
            }
            Op::Inverse(a) => {
                // abar = -X^T * gout * X^T with X the stored inverse.
                let am = m(*a);
                let n = orows;
                let mut tmp = vec![0.0; n * n];
                gemm(n, n, n, oval, true, gout, false, &mut tmp, false);
                let mut abar = vec![0.0; n * n];
                gemm(n, n, n, &tmp, false, oval, true, &mut abar, false);
                for (i, v) in abar.iter().enumerate() {
                    gin[am.off + i] -= v;
                }
            }
        }
    }

    /// Reverse pass through the Cholesky recurrence. `lval` is the computed
    /// lower factor, `gout` the adjoint of the factor (upper part ignored:
    /// those outputs are structural zeros). The input was read symmetrized,
    /// so the resulting adjoint is distributed across both triangles.
    fn backward_cholesky(&self, am: Meta, lval: &[f64], gout: &[f64], gin: &mut [f64], n: usize) {
        let l = |i: usize, j: usize| lval[i * n + j];
        // Working adjoint of L, lower triangle only.
        let mut lb = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                lb[i * n + j] = gout[i * n + j];
            }
        }
        // Adjoint of the (symmetrized) input, accumulated on the lower triangle.
        let mut ab = vec![0.0; n * n];
        for j in (0..n).rev() {
            let ljj = l(j, j);
            for i in (j + 1..n).rev() {
                // L[i][j] = t / L[j][j]
                let tbar = lb[i * n + j] / ljj;
                lb[j * n + j] -= lb[i * n + j] * l(i, j) / ljj;
                // t = A[i][j] - sum_k L[i][k] L[j][k]
                ab[i * n + j] += tbar;
                for k in 0..j {
                    lb[i * n + k] -= tbar * l(j, k);
                    lb[j * n + k] -= tbar * l(i, k);
                }
            }
            // L[j][j] = sqrt(s)
            let sbar = lb[j * n + j] * 0.5 / ljj;
            ab[j * n + j] += sbar;
            for k in 0..j {
                lb[j * n + k] -= 2.0 * sbar * l(j, k);
            }
        }
        // Distribute: forward read (A[i][j] + A[j][i]) / 2 off the diagonal.
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * ab[i * n + j];
                gin[am.off + i * n + j] += v;
                gin[am.off + j * n + i] += v;
            }
            gin[am.off + i * n + i] += ab[i * n + i];
        }
    }

    // -- replay ------------------------------------------------------------

    /// Recompute every non-leaf node from the recorded leaves into a fresh
    /// arena and return it. Used to verify that replaying the tape forward
    /// reproduces the recorded values bit-identically.
    pub fn replay_values(&self) -> Vec<f64> {
        let mut fresh = vec![0.0; self.vals.len()];
        for (id, op) in self.ops.iter().enumerate() {
            let meta = self.meta[id];
            if matches!(op, Op::Leaf) {
                fresh[meta.off..meta.off + meta.len()]
                    .copy_from_slice(&self.vals[meta.off..meta.off + meta.len()]);
                continue;
            }
            let (src, dst) = fresh.split_at_mut(meta.off);
            eval_op(
                op,
                &self.meta,
                &self.cat_args,
                src,
                &mut dst[..meta.len()],
                meta.rows as usize,
                meta.cols as usize,
            )
            .expect("replay of recorded op failed");
        }
        fresh
    }

    /// Whether a forward replay reproduces the recorded arena bit for bit.
    pub fn replay_matches(&self) -> bool {
        let fresh = self.replay_values();
        fresh
            .iter()
            .zip(&self.vals)
            .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Forward evaluation of one op, shared by recording and replay. `src` holds
/// everything before the output node, `dst` is the output buffer.
fn eval_op(
    op: &Op,
    metas: &[Meta],
    cat_args: &[Var],
    src: &[f64],
    dst: &mut [f64],
    orows: usize,
    ocols: usize,
) -> Result<()> {
    let val = |v: Var| {
        let m = metas[v.index()];
        &src[m.off..m.off + m.len()]
    };
    let shp = |v: Var| {
        let m = metas[v.index()];
        (m.rows as usize, m.cols as usize)
    };
    match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::MatMul(a, b) => {
            let (am, ak) = shp(*a);
            let (_, bn) = shp(*b);
            gemm(am, bn, ak, val(*a), false, val(*b), false, dst, false);
        }
        Op::Transpose(a) => {
            let (ar, ac) = shp(*a);
            let av = val(*a);
            for i in 0..ar {
                for j in 0..ac {
                    dst[j * ar + i] = av[i * ac + j];
                }
            }
        }
        Op::Add(a, b) => {
            for (o, (&x, &y)) in dst.iter_mut().zip(val(*a).iter().zip(val(*b))) {
                *o = x + y;
            }
        }
        Op::Sub(a, b) => {
            for (o, (&x, &y)) in dst.iter_mut().zip(val(*a).iter().zip(val(*b))) {
                *o = x - y;
            }
        }
        Op::Mul(a, b) => {
            for (o, (&x, &y)) in dst.iter_mut().zip(val(*a).iter().zip(val(*b))) {
                *o = x * y;
            }
        }
        Op::Div(a, b) => {
            for (o, (&x, &y)) in dst.iter_mut().zip(val(*a).iter().zip(val(*b))) {
                *o = x / y;
            }
        }
        Op::Affine(a, k, c) => {
            for (o, &x) in dst.iter_mut().zip(val(*a)) {
                *o = k * x + c;
            }
        }
        Op::Tanh(a) => {
            for (o, &x) in dst.iter_mut().zip(val(*a)) {
                *o = x.tanh();
            }
        }
        Op::Sigmoid(a) => {
            for (o, &x) in dst.iter_mut().zip(val(*a)) {
                *o = sigmoid(x);
            }
        }
        Op::Softplus(a) => {
            for (o, &x) in dst.iter_mut().zip(val(*a)) {
                *o = softplus(x);
            }
        }
        Op::Exp(a) => {
            for (o, &x) in dst.iter_mut().zip(val(*a)) {
                *o = x.exp();
            }
        }
        Op::Ln(a) => {
            for (o, &x) in dst.iter_mut().zip(val(*a)) {
                *o = x.ln();
            }
        }
        Op::Sqrt(a) => {
            for (o, &x) in dst.iter_mut().zip(val(*a)) {
                *o = x.sqrt();
            }
        }
        Op::Square(a) => {
            for (o, &x) in dst.iter_mut().zip(val(*a)) {
                *o = x * x;
            }
        }
        Op::ClampMin(a, c) => {
            for (o, &x) in dst.iter_mut().zip(val(*a)) {
                *o = x.max(*c);
            }
        }
        Op::RowScale(a, s) => {
            let av = val(*a);
            let sv = val(*s);
            for i in 0..orows {
                for j in 0..ocols {
                    dst[i * ocols + j] = av[i * ocols + j] * sv[i];
                }
            }
        }
        Op::RowSum(a) => {
            let (ar, ac) = shp(*a);
            let av = val(*a);
            for i in 0..ar {
                dst[i] = av[i * ac..(i + 1) * ac].iter().sum();
            }
        }
        Op::SumAll(a) => {
            dst[0] = val(*a).iter().sum();
        }
        Op::ConcatRows { start, count } => {
            let mut o = 0usize;
            for t in 0..*count as usize {
                let p = cat_args[*start as usize + t];
                let pv = val(p);
                dst[o..o + pv.len()].copy_from_slice(pv);
                o += pv.len();
            }
        }
        Op::SliceRows(a, start, len) => {
            let (_, ac) = shp(*a);
            let av = val(*a);
            dst.copy_from_slice(&av[start * ac..(start + len) * ac]);
        }
        Op::Block(a, r0, c0, rows, cols) => {
            let (_, ac) = shp(*a);
            let av = val(*a);
            for i in 0..*rows {
                for j in 0..*cols {
                    dst[i * cols + j] = av[(r0 + i) * ac + (c0 + j)];
                }
            }
        }
        Op::DiagMake(v) => {
            dst.fill(0.0);
            let vv = val(*v);
            for i in 0..orows {
                dst[i * ocols + i] = vv[i];
            }
        }
        Op::DiagExtract(a) => {
            let (_, ac) = shp(*a);
            let av = val(*a);
            for i in 0..orows {
                dst[i] = av[i * ac + i];
            }
        }
        Op::Cholesky(a) => {
            let n = orows;
            let av = val(*a);
            let sym = |i: usize, j: usize| 0.5 * (av[i * n + j] + av[j * n + i]);
            dst.fill(0.0);
            for j in 0..n {
                let mut s = sym(j, j);
                for k in 0..j {
                    s -= dst[j * n + k] * dst[j * n + k];
                }
                if !(s > 0.0) || !s.is_finite() {
                    return Err(Error::Numerical(format!(
                        "cholesky: non-positive pivot {s:.3e} at index {j}"
                    )));
                }
                let ljj = s.sqrt();
                dst[j * n + j] = ljj;
                for i in j + 1..n {
                    let mut t = sym(i, j);
                    for k in 0..j {
                        t -= dst[i * n + k] * dst[j * n + k];
                    }
                    dst[i * n + j] = t / ljj;
                }
            }
        }
        Op::Inverse(a) => {
            let n = orows;
            let av = val(*a);
            let mut work = av.to_vec();
            let scale = av.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
            dst.fill(0.0);
            for i in 0..n {
                dst[i * n + i] = 1.0;
            }
            for col in 0..n {
                // partial pivot
                let mut piv = col;
                for r in col + 1..n {
                    if work[r * n + col].abs() > work[piv * n + col].abs() {
                        piv = r;
                    }
                }
                let pv = work[piv * n + col];
                if !pv.is_finite() || pv.abs() < 1e-12 * scale {
                    return Err(Error::Numerical(format!(
                        "inverse: singular pivot {pv:.3e} at column {col}"
                    )));
                }
                if piv != col {
                    for j in 0..n {
                        work.swap(col * n + j, piv * n + j);
                        dst.swap(col * n + j, piv * n + j);
                    }
                }
                let inv_p = 1.0 / work[col * n + col];
                for j in 0..n {
                    work[col * n + j] *= inv_p;
                    dst[col * n + j] *= inv_p;
                }
                for r in 0..n {
                    if r == col {
                        continue;
                    }
                    let f = work[r * n + col];
                    if f == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        work[r * n + j] -= f * work[col * n + j];
                        dst[r * n + j] -= f * dst[col * n + j];
                    }
                }
            }
        }
    }
    Ok(())
}

/// Adjoints produced by [`Tape::backward`]; indexed by the originating [`Var`].
pub struct Gradients<'a> {
    tape: &'a Tape,
    g: Vec<f64>,
}

impl<'a> Gradients<'a> {
    pub fn get(&self, v: Var) -> &[f64] {
        let m = self.tape.meta[v.index()];
        &self.g[m.off..m.off + m.len()]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let s = self.get(v);
        assert_eq!(s.len(), 1);
        s[0]
    }
}
