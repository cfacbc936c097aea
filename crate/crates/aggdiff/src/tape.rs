//! Reverse-mode automatic differentiation over grid-valued quantities.
//!
//! Losses are recorded as a sequence of primitives acting on vectors (grid
//! samples or parameter segments) and scalars, then differentiated by a
//! single backward sweep. Every primitive implements a vector-Jacobian
//! product, so the backward pass costs a small constant multiple of the
//! forward pass regardless of the parameter count.
//!
//! Linear grid operators (convolution against a fixed profile, spectral
//! derivatives) use their exact adjoints; the convolution adjoint is the
//! correlation, i.e. a frequency-domain conjugate.

use std::sync::Arc;

use rustfft::num_complex::Complex;

use crate::error::{Error, Result};
use crate::grid::PeriodicGrid;

/// Handle to a vector-valued node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Handle to a scalar-valued node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScalarVar(usize);

/// Activation functions available to [`MlpArch`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Act {
    Softplus,
    Relu,
}

impl Act {
    pub fn eval(self, z: f64) -> f64 {
        match self {
            Act::Softplus => {
                if z > 30.0 {
                    z
                } else {
                    z.exp().ln_1p()
                }
            }
            Act::Relu => z.max(0.0),
        }
    }

    fn deriv(self, z: f64) -> f64 {
        match self {
            Act::Softplus => 1.0 / (1.0 + (-z).exp()),
            Act::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Feedforward network shape: `widths` includes the single input and output,
/// e.g. `[1, 16, 16, 1]`.
#[derive(Clone, Debug)]
pub struct MlpArch {
    pub widths: Vec<usize>,
    pub hidden_act: Act,
    pub output_act: Act,
}

impl MlpArch {
    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    fn layer_act(&self, layer: usize) -> Act {
        if layer + 2 == self.widths.len() {
            self.output_act
        } else {
            self.hidden_act
        }
    }
}

/// Precomputed evaluation matrix for a linear-in-parameters basis
/// (truncated Fourier expansions). Row-major `n_rows x n_cols`.
#[derive(Clone, Debug)]
pub struct BasisMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub data: Vec<f64>,
}

impl BasisMatrix {
    pub fn apply(&self, theta: &[f64]) -> Vec<f64> {
        assert_eq!(theta.len(), self.n_cols);
        let mut out = vec![0.0; self.n_rows];
        for (j, row) in self.data.chunks(self.n_cols).enumerate() {
            out[j] = row.iter().zip(theta).map(|(&b, &t)| b * t).sum();
        }
        out
    }

    fn apply_transpose(&self, v: &[f64], out: &mut [f64]) {
        for (j, row) in self.data.chunks(self.n_cols).enumerate() {
            let vj = v[j];
            for (o, &b) in out.iter_mut().zip(row) {
                *o += b * vj;
            }
        }
    }
}

/// Frequency-domain multiplier for convolution against a fixed profile.
/// Built once per (grid, profile) pair and shared across loss evaluations.
#[derive(Clone)]
pub struct ConvOperator {
    grid: PeriodicGrid,
    multiplier: Arc<Vec<Complex<f64>>>,
}

impl ConvOperator {
    /// Operator computing `x -> x * g` (periodic convolution, quadrature
    /// weight included) for the fixed profile `g`.
    pub fn new(grid: &PeriodicGrid, g_values: &[f64]) -> Self {
        let n = grid.n_points();
        assert_eq!(g_values.len(), n);
        // Rotate so index k holds the sample at offset k*h; nodes start at
        // -L/2, so offset k*h lives at node (k + N/2) mod N.
        let mut buf: Vec<Complex<f64>> = (0..n)
            .map(|k| Complex::new(g_values[(k + n / 2) % n] * grid.spacing(), 0.0))
            .collect();
        fft_in_place(grid, &mut buf, false);
        ConvOperator {
            grid: grid.clone(),
            multiplier: Arc::new(buf),
        }
    }

    pub fn apply(&self, x: &[f64], conjugate: bool) -> Vec<f64> {
        let n = self.grid.n_points();
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft_in_place(&self.grid, &mut buf, false);
        for (c, m) in buf.iter_mut().zip(self.multiplier.iter()) {
            *c *= if conjugate { m.conj() } else { *m };
        }
        fft_in_place(&self.grid, &mut buf, true);
        let scale = 1.0 / n as f64;
        buf.into_iter().map(|c| c.re * scale).collect()
    }
}

fn fft_in_place(grid: &PeriodicGrid, buf: &mut [Complex<f64>], inverse: bool) {
    grid.fft_complex(buf, inverse);
}

fn spectral_diff(grid: &PeriodicGrid, x: &[f64], order: u32) -> Vec<f64> {
    grid.from_values(x.to_vec()).diff(order).values().to_vec()
}

enum Op {
    ParamLeaf {
        offset: usize,
    },
    ParamScalar {
        offset: usize,
    },
    Basis {
        src: usize,
        basis: Arc<BasisMatrix>,
    },
    Mlp {
        src: usize,
        arch: Arc<MlpArch>,
        inputs: Arc<Vec<f64>>,
        pre_acts: Vec<Vec<f64>>,
        post_acts: Vec<Vec<f64>>,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    AddC {
        a: usize,
    },
    MulC {
        a: usize,
        c: Arc<Vec<f64>>,
    },
    Scale {
        a: usize,
        k: f64,
    },
    ScaleS {
        a: usize,
        s: usize,
    },
    ScaleCS {
        s: usize,
        c: Arc<Vec<f64>>,
    },
    DivS {
        a: usize,
        s: usize,
    },
    ScalarMinusVec {
        s: usize,
        a: usize,
    },
    VecMinusScalar {
        a: usize,
        s: usize,
    },
    Exp {
        a: usize,
    },
    Conv {
        a: usize,
        op: ConvOperator,
    },
    Diff {
        a: usize,
        order: u32,
    },
    SumVec {
        a: usize,
    },
    MinVec {
        a: usize,
        argmin: usize,
    },
    NormL2 {
        a: usize,
    },
    SAdd {
        a: usize,
        b: usize,
    },
    SMul {
        a: usize,
        b: usize,
    },
    SScale {
        a: usize,
        k: f64,
    },
    SAddK {
        a: usize,
    },
    SExp {
        a: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::ParamLeaf { .. } => "param_leaf",
            Op::ParamScalar { .. } => "param_scalar",
            Op::Basis { .. } => "basis_eval",
            Op::Mlp { .. } => "mlp_eval",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::AddC { .. } => "add_const",
            Op::MulC { .. } => "mul_const",
            Op::Scale { .. } => "scale",
            Op::ScaleS { .. } => "scale_by_scalar",
            Op::ScaleCS { .. } => "scalar_times_const",
            Op::DivS { .. } => "div_by_scalar",
            Op::ScalarMinusVec { .. } => "scalar_minus_vec",
            Op::VecMinusScalar { .. } => "vec_minus_scalar",
            Op::Exp { .. } => "exp",
            Op::Conv { .. } => "convolve_fixed",
            Op::Diff { .. } => "spectral_diff",
            Op::SumVec { .. } => "sum",
            Op::MinVec { .. } => "min",
            Op::NormL2 { .. } => "norm_l2",
            Op::SAdd { .. } => "scalar_add",
            Op::SMul { .. } => "scalar_mul",
            Op::SScale { .. } => "scalar_scale",
            Op::SAddK { .. } => "scalar_add_const",
            Op::SExp { .. } => "scalar_exp",
        }
    }
}

enum Value {
    Vec(Vec<f64>),
    Scalar(f64),
}

struct Node {
    value: Value,
    op: Op,
}

/// Recording tape. Create one per loss evaluation with the parameter vector
/// the gradient is taken against.
pub struct Tape<'p> {
    grid: PeriodicGrid,
    params: &'p [f64],
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(grid: &PeriodicGrid, params: &'p [f64]) -> Self {
        Tape {
            grid: grid.clone(),
            params,
            nodes: Vec::with_capacity(64),
        }
    }

    pub fn grid(&self) -> &PeriodicGrid {
        &self.grid
    }

    fn push_vec(&mut self, value: Vec<f64>, op: Op) -> Result<Var> {
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::Gradient(op.name()));
        }
        self.nodes.push(Node {
            value: Value::Vec(value),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_scalar(&mut self, value: f64, op: Op) -> Result<ScalarVar> {
        if !value.is_finite() {
            return Err(Error::Gradient(op.name()));
        }
        self.nodes.push(Node {
            value: Value::Scalar(value),
            op,
        });
        Ok(ScalarVar(self.nodes.len() - 1))
    }

    fn vec(&self, v: Var) -> &[f64] {
        self.value_of(v.0)
    }

    fn scalar(&self, s: ScalarVar) -> f64 {
        self.scalar_of(s.0)
    }

    /// Current forward value of a vector node.
    pub fn value_vec(&self, v: Var) -> &[f64] {
        self.vec(v)
    }

    /// Current forward value of a scalar node.
    pub fn value_scalar(&self, s: ScalarVar) -> f64 {
        self.scalar(s)
    }

    /// Register a parameter segment as a differentiable leaf.
    pub fn param_leaf(&mut self, offset: usize, len: usize) -> Result<Var> {
        let value = self.params[offset..offset + len].to_vec();
        self.push_vec(value, Op::ParamLeaf { offset })
    }

    /// Register a single parameter as a differentiable scalar leaf.
    pub fn param_scalar(&mut self, offset: usize) -> Result<ScalarVar> {
        let value = self.params[offset];
        self.push_scalar(value, Op::ParamScalar { offset })
    }

    /// Linear basis evaluation `y = B theta`.
    pub fn basis_eval(&mut self, theta: Var, basis: Arc<BasisMatrix>) -> Result<Var> {
        let value = basis.apply(self.vec(theta));
        self.push_vec(value, Op::Basis { src: theta.0, basis })
    }

    /// Feedforward-network evaluation at the fixed input locations.
    pub fn mlp_eval(&mut self, theta: Var, arch: Arc<MlpArch>, inputs: Arc<Vec<f64>>) -> Result<Var> {
        let params = self.vec(theta);
        let n = inputs.len();
        let mut pre_acts = Vec::with_capacity(arch.widths.len() - 1);
        let mut post_acts = Vec::with_capacity(arch.widths.len() - 1);
        let mut h: Vec<f64> = inputs.as_ref().clone(); // width 1, n columns
        let mut h_width = 1usize;
        let mut off = 0usize;
        for l in 0..arch.widths.len() - 1 {
            let w_in = arch.widths[l];
            let w_out = arch.widths[l + 1];
            debug_assert_eq!(w_in, h_width);
            let weights = &params[off..off + w_out * w_in];
            let biases = &params[off + w_out * w_in..off + w_out * w_in + w_out];
            off += w_out * w_in + w_out;
            let act = arch.layer_act(l);
            let mut z = vec![0.0; w_out * n];
            for o in 0..w_out {
                let wrow = &weights[o * w_in..(o + 1) * w_in];
                let zrow = &mut z[o * n..(o + 1) * n];
                for (j, zj) in zrow.iter_mut().enumerate() {
                    let mut acc = biases[o];
                    for (i, &wi) in wrow.iter().enumerate() {
                        acc += wi * h[i * n + j];
                    }
                    *zj = acc;
                }
            }
            let a: Vec<f64> = z.iter().map(|&v| act.eval(v)).collect();
            pre_acts.push(z);
            post_acts.push(a.clone());
            h = a;
            h_width = w_out;
        }
        debug_assert_eq!(h_width, 1);
        self.push_vec(
            h,
            Op::Mlp {
                src: theta.0,
                arch,
                inputs,
                pre_acts,
                post_acts,
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self
            .vec(a)
            .iter()
            .zip(self.vec(b))
            .map(|(&x, &y)| x + y)
            .collect();
        self.push_vec(v, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self
            .vec(a)
            .iter()
            .zip(self.vec(b))
            .map(|(&x, &y)| x - y)
            .collect();
        self.push_vec(v, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self
            .vec(a)
            .iter()
            .zip(self.vec(b))
            .map(|(&x, &y)| x * y)
            .collect();
        self.push_vec(v, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        let v = self.vec(a).iter().zip(c).map(|(&x, &y)| x + y).collect();
        self.push_vec(v, Op::AddC { a: a.0 })
    }

    pub fn mul_const(&mut self, a: Var, c: Arc<Vec<f64>>) -> Result<Var> {
        let v = self.vec(a).iter().zip(c.iter()).map(|(&x, &y)| x * y).collect();
        self.push_vec(v, Op::MulC { a: a.0, c })
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let v = self.vec(a).iter().map(|&x| k * x).collect();
        self.push_vec(v, Op::Scale { a: a.0, k })
    }

    /// Add a plain constant to every entry; backward is a pass-through, so
    /// this shares the `AddC` adjoint.
    pub fn add_scalar_const(&mut self, a: Var, k: f64) -> Result<Var> {
        let v = self.vec(a).iter().map(|&x| x + k).collect();
        self.push_vec(v, Op::AddC { a: a.0 })
    }

    pub fn scale_by_scalar(&mut self, a: Var, s: ScalarVar) -> Result<Var> {
        let sv = self.scalar(s);
        let v = self.vec(a).iter().map(|&x| sv * x).collect();
        self.push_vec(v, Op::ScaleS { a: a.0, s: s.0 })
    }

    pub fn scalar_times_const(&mut self, s: ScalarVar, c: Arc<Vec<f64>>) -> Result<Var> {
        let sv = self.scalar(s);
        let v = c.iter().map(|&x| sv * x).collect();
        self.push_vec(v, Op::ScaleCS { s: s.0, c })
    }

    pub fn div_by_scalar(&mut self, a: Var, s: ScalarVar) -> Result<Var> {
        let sv = self.scalar(s);
        let v = self.vec(a).iter().map(|&x| x / sv).collect();
        self.push_vec(v, Op::DivS { a: a.0, s: s.0 })
    }

    pub fn scalar_minus_vec(&mut self, s: ScalarVar, a: Var) -> Result<Var> {
        let sv = self.scalar(s);
        let v = self.vec(a).iter().map(|&x| sv - x).collect();
        self.push_vec(v, Op::ScalarMinusVec { s: s.0, a: a.0 })
    }

    pub fn vec_minus_scalar(&mut self, a: Var, s: ScalarVar) -> Result<Var> {
        let sv = self.scalar(s);
        let v = self.vec(a).iter().map(|&x| x - sv).collect();
        self.push_vec(v, Op::VecMinusScalar { a: a.0, s: s.0 })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.vec(a).iter().map(|&x| x.exp()).collect();
        self.push_vec(v, Op::Exp { a: a.0 })
    }

    /// Convolution against the fixed profile captured by `op`.
    pub fn convolve_fixed(&mut self, a: Var, op: &ConvOperator) -> Result<Var> {
        let v = op.apply(self.vec(a), false);
        self.push_vec(v, Op::Conv { a: a.0, op: op.clone() })
    }

    pub fn diff(&mut self, a: Var, order: u32) -> Result<Var> {
        let v = spectral_diff(&self.grid, self.vec(a), order);
        self.push_vec(v, Op::Diff { a: a.0, order })
    }

    pub fn sum(&mut self, a: Var) -> Result<ScalarVar> {
        let v = self.vec(a).iter().sum();
        self.push_scalar(v, Op::SumVec { a: a.0 })
    }

    /// Minimum entry; backward routes through the first argmin.
    pub fn min(&mut self, a: Var) -> Result<ScalarVar> {
        let (argmin, value) =
            self.vec(a)
                .iter()
                .enumerate()
                .fold((0usize, f64::INFINITY), |(bi, bv), (i, &v)| {
                    if v < bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                });
        self.push_scalar(value, Op::MinVec { a: a.0, argmin })
    }

    /// Grid L2 norm `sqrt(h * sum v^2)`.
    pub fn norm_l2(&mut self, a: Var) -> Result<ScalarVar> {
        let h = self.grid.spacing();
        let v = (h * self.vec(a).iter().map(|x| x * x).sum::<f64>()).sqrt();
        self.push_scalar(v, Op::NormL2 { a: a.0 })
    }

    pub fn scalar_add(&mut self, a: ScalarVar, b: ScalarVar) -> Result<ScalarVar> {
        let v = self.scalar(a) + self.scalar(b);
        self.push_scalar(v, Op::SAdd { a: a.0, b: b.0 })
    }

    pub fn scalar_mul(&mut self, a: ScalarVar, b: ScalarVar) -> Result<ScalarVar> {
        let v = self.scalar(a) * self.scalar(b);
        self.push_scalar(v, Op::SMul { a: a.0, b: b.0 })
    }

    pub fn scalar_scale(&mut self, a: ScalarVar, k: f64) -> Result<ScalarVar> {
        let v = self.scalar(a) * k;
        self.push_scalar(v, Op::SScale { a: a.0, k })
    }

    pub fn scalar_add_const(&mut self, a: ScalarVar, k: f64) -> Result<ScalarVar> {
        let v = self.scalar(a) + k;
        self.push_scalar(v, Op::SAddK { a: a.0 })
    }

    pub fn scalar_exp(&mut self, a: ScalarVar) -> Result<ScalarVar> {
        let v = self.scalar(a).exp();
        self.push_scalar(v, Op::SExp { a: a.0 })
    }

    /// Backward sweep from `output`; returns the gradient with respect to the
    /// full parameter vector the tape was created over.
    pub fn gradient(self, output: ScalarVar) -> Result<Vec<f64>> {
        let n_nodes = self.nodes.len();
        let mut adj: Vec<Option<Value>> = (0..n_nodes).map(|_| None).collect();
        adj[output.0] = Some(Value::Scalar(1.0));
        let mut grad = vec![0.0; self.params.len()];

        fn vec_slot<'a>(slot: &'a mut Option<Value>, n: usize) -> &'a mut Vec<f64> {
            let v = slot.get_or_insert_with(|| Value::Vec(vec![0.0; n]));
            match v {
                Value::Vec(x) => x,
                Value::Scalar(_) => unreachable!(),
            }
        }
        fn add_scalar(slot: &mut Option<Value>, inc: f64) {
            let v = slot.get_or_insert(Value::Scalar(0.0));
            match v {
                Value::Scalar(x) => *x += inc,
                Value::Vec(_) => unreachable!(),
            }
        }

        for i in (0..n_nodes).rev() {
            let Some(out_adj) = adj[i].take() else {
                continue;
            };
            match (&self.nodes[i].op, &out_adj) {
                (Op::ParamLeaf { offset }, Value::Vec(g)) => {
                    for (k, gv) in g.iter().enumerate() {
                        grad[offset + k] += gv;
                    }
                }
                (Op::ParamScalar { offset }, Value::Scalar(g)) => {
                    grad[*offset] += g;
                }
                (Op::Basis { src, basis }, Value::Vec(g)) => {
                    let acc = vec_slot(&mut adj[*src], basis.n_cols);
                    basis.apply_transpose(g, acc);
                }
                (
                    Op::Mlp {
                        src,
                        arch,
                        inputs,
                        pre_acts,
                        post_acts,
                    },
                    Value::Vec(g),
                ) => {
                    let n = inputs.len();
                    let params = self.value_of(*src);
                    let mut theta_bar = vec![0.0; params.len()];
                    let n_layers = arch.widths.len() - 1;
                    let mut delta: Vec<f64> = {
                        let z = &pre_acts[n_layers - 1];
                        g.iter()
                            .zip(z)
                            .map(|(&gv, &zv)| gv * arch.layer_act(n_layers - 1).deriv(zv))
                            .collect()
                    };
                    let mut offsets = Vec::with_capacity(n_layers);
                    let mut off = 0usize;
                    for l in 0..n_layers {
                        offsets.push(off);
                        off += arch.widths[l + 1] * arch.widths[l] + arch.widths[l + 1];
                    }
                    for l in (0..n_layers).rev() {
                        let w_in = arch.widths[l];
                        let w_out = arch.widths[l + 1];
                        let off = offsets[l];
                        let h_prev: &[f64] = if l == 0 { inputs } else { &post_acts[l - 1] };
                        for o in 0..w_out {
                            let drow = &delta[o * n..(o + 1) * n];
                            for iin in 0..w_in {
                                let hrow = &h_prev[iin * n..(iin + 1) * n];
                                theta_bar[off + o * w_in + iin] +=
                                    drow.iter().zip(hrow).map(|(&d, &h)| d * h).sum::<f64>();
                            }
                            theta_bar[off + w_out * w_in + o] += drow.iter().sum::<f64>();
                        }
                        if l > 0 {
                            let weights = &params[off..off + w_out * w_in];
                            let z_prev = &pre_acts[l - 1];
                            let act = arch.layer_act(l - 1);
                            let mut new_delta = vec![0.0; w_in * n];
                            for o in 0..w_out {
                                let drow = &delta[o * n..(o + 1) * n];
                                for iin in 0..w_in {
                                    let w = weights[o * w_in + iin];
                                    let nd = &mut new_delta[iin * n..(iin + 1) * n];
                                    for (ndj, &dj) in nd.iter_mut().zip(drow) {
                                        *ndj += w * dj;
                                    }
                                }
                            }
                            for (ndj, &zj) in new_delta.iter_mut().zip(z_prev) {
                                *ndj *= act.deriv(zj);
                            }
                            delta = new_delta;
                        }
                    }
                    let acc = vec_slot(&mut adj[*src], theta_bar.len());
                    for (a, t) in acc.iter_mut().zip(&theta_bar) {
                        *a += t;
                    }
                }
                (Op::Add { a, b }, Value::Vec(g)) => {
                    let n = g.len();
                    for (x, gv) in vec_slot(&mut adj[*a], n).iter_mut().zip(g) {
                        *x += gv;
                    }
                    for (x, gv) in vec_slot(&mut adj[*b], n).iter_mut().zip(g) {
                        *x += gv;
                    }
                }
                (Op::Sub { a, b }, Value::Vec(g)) => {
                    let n = g.len();
                    for (x, gv) in vec_slot(&mut adj[*a], n).iter_mut().zip(g) {
                        *x += gv;
                    }
                    for (x, gv) in vec_slot(&mut adj[*b], n).iter_mut().zip(g) {
                        *x -= gv;
                    }
                }
                (Op::Mul { a, b }, Value::Vec(g)) => {
                    let av = self.value_of(*a).to_vec();
                    let bv = self.value_of(*b).to_vec();
                    let n = g.len();
                    for ((x, gv), bvv) in vec_slot(&mut adj[*a], n).iter_mut().zip(g).zip(&bv) {
                        *x += gv * bvv;
                    }
                    for ((x, gv), avv) in vec_slot(&mut adj[*b], n).iter_mut().zip(g).zip(&av) {
                        *x += gv * avv;
                    }
                }
                (Op::AddC { a }, Value::Vec(g)) => {
                    let n = g.len();
                    for (x, gv) in vec_slot(&mut adj[*a], n).iter_mut().zip(g) {
                        *x += gv;
                    }
                }
                (Op::MulC { a, c }, Value::Vec(g)) => {
                    let n = g.len();
                    for ((x, gv), cv) in vec_slot(&mut adj[*a], n).iter_mut().zip(g).zip(c.iter()) {
                        *x += gv * cv;
                    }
                }
                (Op::Scale { a, k }, Value::Vec(g)) => {
                    let n = g.len();
                    for (x, gv) in vec_slot(&mut adj[*a], n).iter_mut().zip(g) {
                        *x += k * gv;
                    }
                }
                (Op::ScaleS { a, s }, Value::Vec(g)) => {
                    let sv = self.scalar_of(*s);
                    let av = self.value_of(*a).to_vec();
                    let n = g.len();
                    for (x, gv) in vec_slot(&mut adj[*a], n).iter_mut().zip(g) {
                        *x += sv * gv;
                    }
                    let dot: f64 = g.iter().zip(&av).map(|(&gv, &avv)| gv * avv).sum();
                    add_scalar(&mut adj[*s], dot);
                }
                (Op::ScaleCS { s, c }, Value::Vec(g)) => {
                    let dot: f64 = g.iter().zip(c.iter()).map(|(&gv, &cv)| gv * cv).sum();
                    add_scalar(&mut adj[*s], dot);
                }
                (Op::DivS { a, s }, Value::Vec(g)) => {
                    let sv = self.scalar_of(*s);
                    let yv = match &self.nodes[i].value {
                        Value::Vec(y) => y.clone(),
                        _ => unreachable!(),
                    };
                    let n = g.len();
                    for (x, gv) in vec_slot(&mut adj[*a], n).iter_mut().zip(g) {
                        *x += gv / sv;
                    }
                    let dot: f64 = g.iter().zip(&yv).map(|(&gv, &y)| gv * y).sum();
                    add_scalar(&mut adj[*s], -dot / sv);
                }
                (Op::ScalarMinusVec { s, a }, Value::Vec(g)) => {
                    let n = g.len();
                    add_scalar(&mut adj[*s], g.iter().sum());
                    for (x, gv) in vec_slot(&mut adj[*a], n).iter_mut().zip(g) {
                        *x -= gv;
                    }
                }
                (Op::VecMinusScalar { a, s }, Value::Vec(g)) => {
                    let n = g.len();
                    for (x, gv) in vec_slot(&mut adj[*a], n).iter_mut().zip(g) {
                        *x += gv;
                    }
                    add_scalar(&mut adj[*s], -g.iter().sum::<f64>());
                }
                (Op::Exp { a }, Value::Vec(g)) => {
                    let yv = match &self.nodes[i].value {
                        Value::Vec(y) => y.clone(),
                        _ => unreachable!(),
                    };
                    let n = g.len();
                    for ((x, gv), y) in vec_slot(&mut adj[*a], n).iter_mut().zip(g).zip(&yv) {
                        *x += gv * y;
                    }
                }
                (Op::Conv { a, op }, Value::Vec(g)) => {
                    let back = op.apply(g, true);
                    for (x, bv) in vec_slot(&mut adj[*a], back.len()).iter_mut().zip(&back) {
                        *x += bv;
                    }
                }
                (Op::Diff { a, order }, Value::Vec(g)) => {
                    // D1 is skew-adjoint, D2 self-adjoint.
                    let mut back = spectral_diff(&self.grid, g, *order);
                    if *order == 1 {
                        for b in &mut back {
                            *b = -*b;
                        }
                    }
                    for (x, bv) in vec_slot(&mut adj[*a], back.len()).iter_mut().zip(&back) {
                        *x += bv;
                    }
                }
                (Op::SumVec { a }, Value::Scalar(g)) => {
                    let n = self.value_of(*a).len();
                    for x in vec_slot(&mut adj[*a], n).iter_mut() {
                        *x += g;
                    }
                }
                (Op::MinVec { a, argmin }, Value::Scalar(g)) => {
                    let n = self.value_of(*a).len();
                    vec_slot(&mut adj[*a], n)[*argmin] += g;
                }
                (Op::NormL2 { a }, Value::Scalar(g)) => {
                    let av = self.value_of(*a).to_vec();
                    let y = match &self.nodes[i].value {
                        Value::Scalar(y) => *y,
                        _ => unreachable!(),
                    };
                    let h = self.grid.spacing();
                    // At an exactly-zero residual the norm is not
                    // differentiable; use the zero subgradient.
                    let coef = if y > 0.0 { g * h / y } else { 0.0 };
                    let n = av.len();
                    for (x, avv) in vec_slot(&mut adj[*a], n).iter_mut().zip(&av) {
                        *x += coef * avv;
                    }
                }
                (Op::SAdd { a, b }, Value::Scalar(g)) => {
                    add_scalar(&mut adj[*a], *g);
                    add_scalar(&mut adj[*b], *g);
                }
                (Op::SMul { a, b }, Value::Scalar(g)) => {
                    let av = self.scalar_of(*a);
                    let bv = self.scalar_of(*b);
                    add_scalar(&mut adj[*a], g * bv);
                    add_scalar(&mut adj[*b], g * av);
                }
                (Op::SScale { a, k }, Value::Scalar(g)) => {
                    add_scalar(&mut adj[*a], g * k);
                }
                (Op::SAddK { a }, Value::Scalar(g)) => {
                    add_scalar(&mut adj[*a], *g);
                }
                (Op::SExp { a }, Value::Scalar(g)) => {
                    let y = match &self.nodes[i].value {
                        Value::Scalar(y) => *y,
                        _ => unreachable!(),
                    };
                    add_scalar(&mut adj[*a], g * y);
                }
                _ => unreachable!("adjoint/value shape mismatch"),
            }
        }

        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::Gradient("backward_accumulate"));
        }
        Ok(grad)
    }

    fn value_of(&self, idx: usize) -> &[f64] {
        match &self.nodes[idx].value {
            Value::Vec(v) => v,
            Value::Scalar(_) => unreachable!(),
        }
    }

    fn scalar_of(&self, idx: usize) -> f64 {
        match &self.nodes[idx].value {
            Value::Scalar(v) => *v,
            Value::Vec(_) => unreachable!(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn grid() -> PeriodicGrid {
        PeriodicGrid::new(2.0 * PI, 64).unwrap()
    }

    /// Central finite differences of a scalar function of the parameters.
    fn fd_gradient<F: Fn(&[f64]) -> f64>(f: F, params: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; params.len()];
        for i in 0..params.len() {
            let step = 1e-6 * (1.0 + params[i].abs());
            let mut p = params.to_vec();
            p[i] = params[i] + step;
            let up = f(&p);
            p[i] = params[i] - step;
            let dn = f(&p);
            g[i] = (up - dn) / (2.0 * step);
        }
        g
    }

    fn assert_grad_close(ad: &[f64], fd: &[f64], tol: f64) {
        for (i, (&a, &b)) in ad.iter().zip(fd).enumerate() {
            // Components whose true gradient vanishes leave only FD
            // cancellation noise; skip the relative comparison there.
            if a.abs() < 1e-9 && b.abs() < 1e-9 {
                continue;
            }
            let denom = a.abs().max(b.abs());
            assert!((a - b).abs() / denom < tol, "component {i}: ad={a} fd={b}");
        }
    }

    #[test]
    fn quadratic_gradient() {
        let g = grid();
        let params = vec![0.3, -1.2, 2.0];
        let mut tape = Tape::new(&g, &params);
        let leaf = tape.param_leaf(0, 3).unwrap();
        let sq = tape.mul(leaf, leaf).unwrap();
        let out = tape.sum(sq).unwrap();
        assert!((tape.value_scalar(out) - (0.09 + 1.44 + 4.0)).abs() < 1e-12);
        let grad = tape.gradient(out).unwrap();
        assert_grad_close(&grad, &[0.6, -2.4, 4.0], 1e-12);
    }

    #[test]
    fn softmax_style_chain_matches_fd() {
        // exp/normalize/norm chain shaped like the fixed-point map
        let g = grid();
        let n = g.n_points();
        let h = g.spacing();
        let target: Vec<f64> = g.nodes().iter().map(|x| 0.2 + 0.1 * x.cos()).collect();
        let basis = Arc::new(BasisMatrix {
            n_rows: n,
            n_cols: 3,
            data: g
                .nodes()
                .iter()
                .flat_map(|&x| vec![1.0, x.cos(), (2.0 * x).cos()])
                .collect(),
        });
        let basis2 = basis.clone();
        let target2 = target.clone();
        let eval = move |p: &[f64]| -> f64 {
            let w = basis2.apply(p);
            let e: Vec<f64> = w.iter().map(|&v| (-v).exp()).collect();
            let z: f64 = h * e.iter().sum::<f64>();
            let r: Vec<f64> = e
                .iter()
                .zip(&target2)
                .map(|(&ev, &t)| ev / z - t)
                .collect();
            (h * r.iter().map(|v| v * v).sum::<f64>()).sqrt()
        };
        let params = vec![0.4, -0.7, 0.2];
        let mut tape = Tape::new(&g, &params);
        let leaf = tape.param_leaf(0, 3).unwrap();
        let w = tape.basis_eval(leaf, basis).unwrap();
        let neg = tape.scale(w, -1.0).unwrap();
        let e = tape.exp(neg).unwrap();
        let s = tape.sum(e).unwrap();
        let z = tape.scalar_scale(s, h).unwrap();
        let t = tape.div_by_scalar(e, z).unwrap();
        let negt: Vec<f64> = target.iter().map(|v| -v).collect();
        let r = tape.add_const(t, &negt).unwrap();
        let out = tape.norm_l2(r).unwrap();
        assert!((tape.value_scalar(out) - eval(&params)).abs() < 1e-13);
        let ad = tape.gradient(out).unwrap();
        let fd = fd_gradient(eval, &params);
        assert_grad_close(&ad, &fd, 1e-6);
    }

    #[test]
    fn convolution_and_diff_adjoints_match_fd() {
        let g = grid();
        let n = g.n_points();
        let u: Vec<f64> = g
            .nodes()
            .iter()
            .map(|&x| (1.0 + 0.4 * x.sin()) / (2.0 * PI))
            .collect();
        let conv = ConvOperator::new(&g, &u);
        let basis = Arc::new(BasisMatrix {
            n_rows: n,
            n_cols: 2,
            data: g
                .nodes()
                .iter()
                .flat_map(|&x| vec![x.cos(), (3.0 * x).cos()])
                .collect(),
        });
        let h = g.spacing();
        let basis2 = basis.clone();
        let u2 = u.clone();
        let g2 = g.clone();
        let eval = move |p: &[f64]| -> f64 {
            let w = basis2.apply(p);
            let wf = g2.from_values(w);
            let uu = g2.from_values(u2.clone());
            let c = wf.convolve(&uu).diff(1);
            (h * c.values().iter().map(|v| v * v).sum::<f64>()).sqrt()
        };
        let params = vec![0.8, -0.3];
        let mut tape = Tape::new(&g, &params);
        let leaf = tape.param_leaf(0, 2).unwrap();
        let w = tape.basis_eval(leaf, basis).unwrap();
        let c = tape.convolve_fixed(w, &conv).unwrap();
        let d = tape.diff(c, 1).unwrap();
        let out = tape.norm_l2(d).unwrap();
        assert!((tape.value_scalar(out) - eval(&params)).abs() < 1e-12);
        let ad = tape.gradient(out).unwrap();
        let fd = fd_gradient(eval, &params);
        assert_grad_close(&ad, &fd, 1e-6);
    }

    #[test]
    fn min_subtraction_constraint_matches_fd() {
        let g = grid();
        let n = g.n_points();
        let basis = Arc::new(BasisMatrix {
            n_rows: n,
            n_cols: 3,
            data: g
                .nodes()
                .iter()
                .flat_map(|&x| vec![1.0, x.cos(), (2.0 * x).cos()])
                .collect(),
        });
        let h = g.spacing();
        let basis2 = basis.clone();
        let eval = move |p: &[f64]| -> f64 {
            let raw = basis2.apply(p);
            let m = raw.iter().cloned().fold(f64::INFINITY, f64::min);
            let w: Vec<f64> = raw.iter().map(|&r| m - r).collect();
            h * w.iter().map(|v| v * v).sum::<f64>()
        };
        let params = vec![0.5, 1.3, -0.6];
        let mut tape = Tape::new(&g, &params);
        let leaf = tape.param_leaf(0, 3).unwrap();
        let raw = tape.basis_eval(leaf, basis).unwrap();
        let m = tape.min(raw).unwrap();
        let w = tape.scalar_minus_vec(m, raw).unwrap();
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq).unwrap();
        let out = tape.scalar_scale(s, h).unwrap();
        let ad = tape.gradient(out).unwrap();
        let fd = fd_gradient(eval, &params);
        assert_grad_close(&ad, &fd, 1e-5);
    }

    #[test]
    fn mlp_gradient_matches_fd() {
        let g = grid();
        let arch = Arc::new(MlpArch {
            widths: vec![1, 5, 4, 1],
            hidden_act: Act::Softplus,
            output_act: Act::Softplus,
        });
        let inputs: Arc<Vec<f64>> = Arc::new(g.nodes().iter().map(|x| x.abs()).collect());
        let p_count = arch.param_count();
        let mut params = Vec::with_capacity(p_count);
        let mut state = 0x12345u64;
        for _ in 0..p_count {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            params.push(((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5);
        }
        let h = g.spacing();
        let arch2 = arch.clone();
        let inputs2 = inputs.clone();
        let eval = move |p: &[f64]| -> f64 {
            let gg = PeriodicGrid::new(2.0 * PI, 64).unwrap();
            let mut tape = Tape::new(&gg, p);
            let leaf = tape.param_leaf(0, p.len()).unwrap();
            let y = tape.mlp_eval(leaf, arch2.clone(), inputs2.clone()).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let s = tape.sum(sq).unwrap();
            let out = tape.scalar_scale(s, h).unwrap();
            tape.value_scalar(out)
        };
        let mut tape = Tape::new(&g, &params);
        let leaf = tape.param_leaf(0, params.len()).unwrap();
        let y = tape.mlp_eval(leaf, arch, inputs).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let s = tape.sum(sq).unwrap();
        let out = tape.scalar_scale(s, h).unwrap();
        let ad = tape.gradient(out).unwrap();
        let fd = fd_gradient(eval, &params);
        assert_grad_close(&ad, &fd, 1e-5);
    }

    #[test]
    fn frozen_segment_gets_exact_zero_gradient() {
        let g = grid();
        let params = vec![1.0, 2.0, 3.0, 4.0];
        let mut tape = Tape::new(&g, &params);
        let active = tape.param_leaf(0, 2).unwrap();
        let _frozen = tape.param_leaf(2, 2).unwrap();
        let sq = tape.mul(active, active).unwrap();
        let out = tape.sum(sq).unwrap();
        let grad = tape.gradient(out).unwrap();
        assert_eq!(&grad[2..], &[0.0, 0.0]);
        assert!((grad[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn kappa_exponential_reparameterization() {
        let g = grid();
        let params = vec![0.7];
        let conv_profile: Vec<f64> = g.nodes().iter().map(|x| x.cos()).collect();
        let cp = Arc::new(conv_profile.clone());
        let h = g.spacing();
        let eval = |p: &[f64]| {
            let kappa = p[0].exp();
            h * conv_profile
                .iter()
                .map(|c| (kappa * c).powi(2))
                .sum::<f64>()
        };
        let mut tape = Tape::new(&g, &params);
        let lk = tape.param_scalar(0).unwrap();
        let kappa = tape.scalar_exp(lk).unwrap();
        let v = tape.scalar_times_const(kappa, cp).unwrap();
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq).unwrap();
        let out = tape.scalar_scale(s, h).unwrap();
        let ad = tape.gradient(out).unwrap();
        let fd = fd_gradient(eval, &params);
        assert_grad_close(&ad, &fd, 1e-7);
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let g = grid();
        let params = vec![800.0];
        let mut tape = Tape::new(&g, &params);
        let lk = tape.param_scalar(0).unwrap();
        let err = tape.scalar_exp(lk).unwrap_err();
        assert!(matches!(err, Error::Gradient("scalar_exp")));
    }
}
