//! Loss functionals over observed profiles, Adam and L-BFGS optimizers,
//! multi-start ensembles, recovery metrics, and identifiability diagnostics.
//!
//! Both losses map each observation through the model rather than re-solving
//! it: the fixed-point loss is `sum_i ||T(u_i) - u_i||` with the candidate
//! kernel/potential/kappa inside `T`, and the PDE loss is the norm of the
//! stationary equation's right-hand side evaluated spectrally on the
//! observation. An observation that is a steady state of the candidate
//! parameters therefore contributes (numerically) zero.
//!
//! The scalar interaction strength is optimized as `exp(log_kappa)` so the
//! constraint `kappa >= 0` never binds.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approx::{Approximator, InitScheme, ParamVector, Segment};
use crate::data::derive_seed;
use crate::error::{Error, Result};
use crate::grid::{GridFunction, PeriodicGrid};
use crate::tape::{ConvOperator, ScalarVar, Tape, Var};

/// Which residual the optimization minimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Fp,
    Pde,
}

/// A functional component of the model: known and fixed, or an approximator
/// whose parameters are optimized.
#[derive(Clone)]
pub enum ComponentSource {
    Known(GridFunction),
    Unknown(Approximator),
}

impl ComponentSource {
    fn is_unknown(&self) -> bool {
        matches!(self, ComponentSource::Unknown(_))
    }
}

/// How the interaction strength enters the problem.
#[derive(Clone, Debug)]
pub enum KappaSpec {
    /// Known value; per-observation overrides may refine it.
    Known(f64),
    /// One shared unknown spanning all observations.
    Unknown,
}

/// One observed profile.
#[derive(Clone)]
pub struct ObservationEntry {
    pub profile: GridFunction,
    /// Known per-observation kappa (the multi-kappa sampling mode); only
    /// valid when the problem kappa is `Known`.
    pub kappa: Option<f64>,
    pub weight: f64,
}

impl ObservationEntry {
    pub fn new(profile: GridFunction) -> Self {
        ObservationEntry {
            profile,
            kappa: None,
            weight: 1.0,
        }
    }

    pub fn with_kappa(profile: GridFunction, kappa: f64) -> Self {
        ObservationEntry {
            profile,
            kappa: Some(kappa),
            weight: 1.0,
        }
    }
}

#[derive(Clone)]
struct PreparedObservation {
    u: Arc<Vec<f64>>,
    /// Convolution against the observation, for unknown kernels.
    conv_op: ConvOperator,
    /// `W*u` for a known kernel (zeros otherwise).
    conv_known: Arc<Vec<f64>>,
    /// `sigma * du/dx`, the fixed part of the PDE-loss flux.
    sigma_du: Arc<Vec<f64>>,
    /// `u * dV/dx` for a known potential (zeros otherwise).
    u_dv_known: Arc<Vec<f64>>,
    kappa_known: f64,
    weight: f64,
}

/// An inverse problem: which components are unknown, the observations, and
/// the loss to minimize. Immutable and shareable across optimizer runs.
#[derive(Clone)]
pub struct InferenceProblem {
    grid: PeriodicGrid,
    sigma: f64,
    w: ComponentSource,
    v: ComponentSource,
    kappa: KappaSpec,
    loss_kind: LossKind,
    layout: Vec<Segment>,
    prepared: Vec<PreparedObservation>,
    /// Weight of the depth-gauge anchor; see [`InferenceProblem::new`].
    gauge_weight: f64,
}

/// Realized components for a parameter vector.
#[derive(Clone, Debug)]
pub struct Recovered {
    pub kernel: GridFunction,
    pub potential: GridFunction,
    pub kappa: f64,
}

impl InferenceProblem {
    pub fn new(
        grid: &PeriodicGrid,
        sigma: f64,
        observations: Vec<ObservationEntry>,
        w: ComponentSource,
        v: ComponentSource,
        kappa: KappaSpec,
        loss_kind: LossKind,
    ) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::Input("at least one observation is required".into()));
        }
        if !(w.is_unknown() || v.is_unknown() || matches!(kappa, KappaSpec::Unknown)) {
            return Err(Error::Input("no unknown components to fit".into()));
        }
        if matches!(kappa, KappaSpec::Unknown) && observations.iter().any(|o| o.kappa.is_some()) {
            return Err(Error::Input(
                "per-observation kappa values require a known kappa spec".into(),
            ));
        }
        for (i, o) in observations.iter().enumerate() {
            if o.profile.grid() != grid {
                return Err(Error::Input(format!(
                    "observation {i} lives on a different grid"
                )));
            }
            if (o.profile.integrate() - 1.0).abs() > 1e-6 {
                return Err(Error::Input(format!(
                    "observation {i} is not normalized to unit mass"
                )));
            }
        }
        if let ComponentSource::Unknown(a) = &w {
            if a.grid() != grid {
                return Err(Error::Input("kernel approximator grid mismatch".into()));
            }
        }
        if let ComponentSource::Unknown(a) = &v {
            if a.grid() != grid {
                return Err(Error::Input("potential approximator grid mismatch".into()));
            }
        }

        let mut layout = Vec::new();
        if let ComponentSource::Unknown(a) = &w {
            layout.push(Segment {
                name: "w".into(),
                len: a.param_count(),
            });
        }
        if let ComponentSource::Unknown(a) = &v {
            layout.push(Segment {
                name: "v".into(),
                len: a.param_count(),
            });
        }
        if matches!(kappa, KappaSpec::Unknown) {
            layout.push(Segment {
                name: "log_kappa".into(),
                len: 1,
            });
        }

        let w_known = match &w {
            ComponentSource::Known(f) => Some(f.clone()),
            ComponentSource::Unknown(_) => None,
        };
        let v_known = match &v {
            ComponentSource::Known(f) => Some(f.clone()),
            ComponentSource::Unknown(_) => None,
        };
        let zero = Arc::new(vec![0.0; grid.n_points()]);
        let prepared = observations
            .iter()
            .map(|o| {
                let kappa_known = o.kappa.unwrap_or(match kappa {
                    KappaSpec::Known(k) => k,
                    KappaSpec::Unknown => f64::NAN,
                });
                let conv_known = match &w_known {
                    Some(wf) => Arc::new(wf.convolve(&o.profile).values().to_vec()),
                    None => zero.clone(),
                };
                let u_dv_known = match &v_known {
                    Some(vf) => Arc::new(o.profile.mul(&vf.diff(1)).values().to_vec()),
                    None => zero.clone(),
                };
                PreparedObservation {
                    u: Arc::new(o.profile.values().to_vec()),
                    conv_op: ConvOperator::new(grid, o.profile.values()),
                    conv_known,
                    sigma_du: Arc::new(o.profile.diff(1).scale(sigma).values().to_vec()),
                    u_dv_known,
                    kappa_known,
                    weight: o.weight,
                }
            })
            .collect();

        // With both the kernel and kappa unknown, the loss is exactly
        // invariant under (W, kappa) -> (s W, kappa / s): only the product
        // enters the drift and the max-zero normalization does not pin the
        // scale. A soft anchor on the kernel depth (the built-in families
        // have unit depth) fixes the gauge so kappa is a number, not a ray.
        let gauge_weight =
            if w.is_unknown() && matches!(kappa, KappaSpec::Unknown) {
                1e-3
            } else {
                0.0
            };
        Ok(InferenceProblem {
            grid: grid.clone(),
            sigma,
            w,
            v,
            kappa,
            loss_kind,
            layout,
            prepared,
            gauge_weight,
        })
    }

    pub fn grid(&self) -> &PeriodicGrid {
        &self.grid
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss_kind
    }

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.iter().map(|s| s.len).sum()
    }

    /// Deterministic randomized initialization for one optimizer start,
    /// using the spec default scale for Fourier coefficients.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        self.init_params_scaled(seed, 0.1)
    }

    /// Initialization with an explicit Fourier coefficient scale. Small
    /// scales keep data-blind modes near zero, which otherwise imprint their
    /// random initialization on the recovered function. Network weights use
    /// Glorot regardless.
    pub fn init_params_scaled(&self, seed: u64, fourier_scale: f64) -> ParamVector {
        let mut pv = ParamVector::new(self.layout.to_vec());
        if let ComponentSource::Unknown(a) = &self.w {
            let init = a.init_params(derive_seed(seed, "init_w", 0), scheme_with_scale(a, fourier_scale));
            pv.segment_mut("w").unwrap().copy_from_slice(&init);
        }
        if let ComponentSource::Unknown(a) = &self.v {
            let init = a.init_params(derive_seed(seed, "init_v", 1), scheme_with_scale(a, fourier_scale));
            pv.segment_mut("v").unwrap().copy_from_slice(&init);
        }
        if matches!(self.kappa, KappaSpec::Unknown) {
            // Wide log-normal spread so a multi-start ensemble straddles the
            // interaction strengths where distinct basins live.
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init_kappa", 2));
            pv.segment_mut("log_kappa").unwrap()[0] =
                0.7 + 1.2 * rng.sample::<f64, _>(StandardNormal);
        }
        pv
    }

    /// Realize the kernel, potential, and kappa for a parameter vector.
    pub fn realize(&self, params: &ParamVector) -> Result<Recovered> {
        let kernel = match &self.w {
            ComponentSource::Known(f) => f.clone(),
            ComponentSource::Unknown(a) => a.realize(params.segment("w").unwrap())?,
        };
        let potential = match &self.v {
            ComponentSource::Known(f) => f.clone(),
            ComponentSource::Unknown(a) => a.realize(params.segment("v").unwrap())?,
        };
        let kappa = match self.kappa {
            KappaSpec::Known(k) => k,
            KappaSpec::Unknown => params.segment("log_kappa").unwrap()[0].exp(),
        };
        Ok(Recovered {
            kernel,
            potential,
            kappa,
        })
    }

    /// Loss value under the problem's configured loss kind.
    pub fn loss(&self, params: &ParamVector) -> Result<f64> {
        self.eval(params, self.loss_kind, false).map(|(v, _)| v)
    }

    /// Loss value under an explicit loss kind.
    pub fn loss_with_kind(&self, params: &ParamVector, kind: LossKind) -> Result<f64> {
        self.eval(params, kind, false).map(|(v, _)| v)
    }

    /// Loss value and gradient via one reverse sweep.
    pub fn loss_grad(&self, params: &ParamVector) -> Result<(f64, Vec<f64>)> {
        let (v, g) = self.eval(params, self.loss_kind, true)?;
        Ok((v, g.unwrap()))
    }

    fn eval(
        &self,
        params: &ParamVector,
        kind: LossKind,
        want_grad: bool,
    ) -> Result<(f64, Option<Vec<f64>>)> {
        if params.len() != self.param_count() {
            return Err(Error::InvalidParameter(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut tape = Tape::new(&self.grid, params.values());
        let h = self.grid.spacing();

        let w_var = match &self.w {
            ComponentSource::Unknown(a) => {
                Some(a.realize_on_tape(&mut tape, offset_of(&self.layout, "w"))?)
            }
            ComponentSource::Known(_) => None,
        };
        let v_var = match &self.v {
            ComponentSource::Unknown(a) => {
                Some(a.realize_on_tape(&mut tape, offset_of(&self.layout, "v"))?)
            }
            ComponentSource::Known(_) => None,
        };
        let v_known_values: Option<Vec<f64>> = match &self.v {
            ComponentSource::Known(f) => Some(f.values().to_vec()),
            ComponentSource::Unknown(_) => None,
        };
        let dv_var = match (kind, v_var) {
            (LossKind::Pde, Some(vv)) => Some(tape.diff(vv, 1)?),
            _ => None,
        };
        let kappa_var: Option<ScalarVar> = match self.kappa {
            KappaSpec::Unknown => {
                let lk = tape.param_scalar(offset_of(&self.layout, "log_kappa"))?;
                Some(tape.scalar_exp(lk)?)
            }
            KappaSpec::Known(_) => None,
        };

        let mut total: Option<ScalarVar> = None;
        for obs in &self.prepared {
            let term = match kind {
                LossKind::Fp => {
                    self.fp_term(&mut tape, obs, w_var, v_var, &v_known_values, kappa_var, h)?
                }
                LossKind::Pde => self.pde_term(&mut tape, obs, w_var, dv_var, kappa_var)?,
            };
            let weighted = if obs.weight == 1.0 {
                term
            } else {
                tape.scalar_scale(term, obs.weight)?
            };
            total = Some(match total {
                None => weighted,
                Some(t) => tape.scalar_add(t, weighted)?,
            });
        }
        let mut total = total.expect("at least one observation");
        if self.gauge_weight > 0.0 {
            // depth(W*) = -min(W*); anchor (depth - 1)^2.
            let w = w_var.expect("gauge anchor requires an unknown kernel");
            let min_w = tape.min(w)?;
            let d = tape.scalar_add_const(min_w, 1.0)?;
            let sq = tape.scalar_mul(d, d)?;
            let penalty = tape.scalar_scale(sq, self.gauge_weight)?;
            total = tape.scalar_add(total, penalty)?;
        }
        let value = tape.value_scalar(total);
        if want_grad {
            let grad = tape.gradient(total)?;
            Ok((value, Some(grad)))
        } else {
            Ok((value, None))
        }
    }

    /// `|| T(u) - u ||` with the candidate components inside the map.
    #[allow(clippy::too_many_arguments)]
    fn fp_term(
        &self,
        tape: &mut Tape,
        obs: &PreparedObservation,
        w_var: Option<Var>,
        v_var: Option<Var>,
        v_known: &Option<Vec<f64>>,
        kappa_var: Option<ScalarVar>,
        h: f64,
    ) -> Result<ScalarVar> {
        // Accumulate kappa*(W*u) + V, splitting parameter-dependent terms
        // (tape vars) from fixed ones (a plain constant vector).
        let mut var_acc: Option<Var> = None;
        let mut const_acc = vec![0.0; self.grid.n_points()];
        match (w_var, kappa_var) {
            (Some(w), Some(kv)) => {
                let conv = tape.convolve_fixed(w, &obs.conv_op)?;
                var_acc = Some(tape.scale_by_scalar(conv, kv)?);
            }
            (Some(w), None) => {
                let conv = tape.convolve_fixed(w, &obs.conv_op)?;
                var_acc = Some(tape.scale(conv, obs.kappa_known)?);
            }
            (None, Some(kv)) => {
                var_acc = Some(tape.scalar_times_const(kv, obs.conv_known.clone())?);
            }
            (None, None) => {
                for (c, &k) in const_acc.iter_mut().zip(obs.conv_known.iter()) {
                    *c += obs.kappa_known * k;
                }
            }
        }
        match (v_var, v_known) {
            (Some(vv), _) => {
                var_acc = Some(match var_acc {
                    Some(a) => tape.add(a, vv)?,
                    None => vv,
                });
            }
            (None, Some(vk)) => {
                for (c, &v) in const_acc.iter_mut().zip(vk) {
                    *c += v;
                }
            }
            (None, None) => {}
        }
        let drift_var = var_acc.expect("problems without unknowns are rejected");
        let drift = tape.add_const(drift_var, &const_acc)?;
        let s = tape.scale(drift, -1.0 / self.sigma)?;
        // The max shift cancels exactly in the normalization, so it is
        // detached from the gradient.
        let m = tape
            .value_vec(s)
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let shifted = tape.add_scalar_const(s, -m)?;
        let e = tape.exp(shifted)?;
        let zsum = tape.sum(e)?;
        let z = tape.scalar_scale(zsum, h)?;
        let t = tape.div_by_scalar(e, z)?;
        let neg_u: Vec<f64> = obs.u.iter().map(|&v| -v).collect();
        let r = tape.add_const(t, &neg_u)?;
        tape.norm_l2(r)
    }

    /// `|| d/dx (sigma du/dx + kappa u d(W*u)/dx + u dV/dx) ||` on the
    /// observation, all derivatives spectral.
    fn pde_term(
        &self,
        tape: &mut Tape,
        obs: &PreparedObservation,
        w_var: Option<Var>,
        dv_var: Option<Var>,
        kappa_var: Option<ScalarVar>,
    ) -> Result<ScalarVar> {
        let mut var_acc: Option<Var> = None;
        let mut const_acc: Vec<f64> = obs.sigma_du.as_ref().clone();
        for (c, &udv) in const_acc.iter_mut().zip(obs.u_dv_known.iter()) {
            *c += udv;
        }
        match (w_var, kappa_var) {
            (Some(w), kv) => {
                let conv = tape.convolve_fixed(w, &obs.conv_op)?;
                let dconv = tape.diff(conv, 1)?;
                let u_dconv = tape.mul_const(dconv, obs.u.clone())?;
                var_acc = Some(match kv {
                    Some(kv) => tape.scale_by_scalar(u_dconv, kv)?,
                    None => tape.scale(u_dconv, obs.kappa_known)?,
                });
            }
            (None, kv) => {
                // Known kernel: u * d(W*u)/dx is a fixed profile.
                let dconv = self
                    .grid
                    .from_values(obs.conv_known.as_ref().clone())
                    .diff(1);
                let u_dconv: Vec<f64> = dconv
                    .values()
                    .iter()
                    .zip(obs.u.iter())
                    .map(|(&d, &u)| d * u)
                    .collect();
                match kv {
                    Some(kv) => {
                        var_acc = Some(tape.scalar_times_const(kv, Arc::new(u_dconv))?);
                    }
                    None => {
                        for (c, &t) in const_acc.iter_mut().zip(&u_dconv) {
                            *c += obs.kappa_known * t;
                        }
                    }
                }
            }
        }
        if let Some(dv) = dv_var {
            let u_dv = tape.mul_const(dv, obs.u.clone())?;
            var_acc = Some(match var_acc {
                Some(a) => tape.add(a, u_dv)?,
                None => u_dv,
            });
        }
        let flux_var = var_acc.expect("problems without unknowns are rejected");
        let flux = tape.add_const(flux_var, &const_acc)?;
        let r = tape.diff(flux, 1)?;
        tape.norm_l2(r)
    }
}

fn scheme_with_scale(a: &Approximator, scale: f64) -> InitScheme {
    match a.spec() {
        crate::approx::ApproximatorSpec::Fourier { .. } => InitScheme::SmallNormal(scale),
        crate::approx::ApproximatorSpec::Network { .. } => InitScheme::GlorotUniform,
    }
}

fn offset_of(layout: &[Segment], name: &str) -> usize {
    let mut off = 0;
    for seg in layout {
        if seg.name == name {
            return off;
        }
        off += seg.len;
    }
    unreachable!("segment {name} not in layout");
}

/// Fixed-point loss of the parameters, regardless of the configured kind.
pub fn loss_fp(problem: &InferenceProblem, params: &ParamVector) -> Result<f64> {
    problem.loss_with_kind(params, LossKind::Fp)
}

/// PDE loss of the parameters, regardless of the configured kind.
pub fn loss_pde(problem: &InferenceProblem, params: &ParamVector) -> Result<f64> {
    problem.loss_with_kind(params, LossKind::Pde)
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

/// Options for the Adam run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamOptions {
    pub lr: f64,
    pub iters: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_trace_stride")]
    pub trace_stride: usize,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_trace_stride() -> usize {
    100
}

impl Default for AdamOptions {
    fn default() -> Self {
        AdamOptions {
            lr: 1e-3,
            iters: 50_000,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            trace_stride: default_trace_stride(),
        }
    }
}

/// Result of one optimization run.
#[derive(Clone, Debug)]
pub struct FitResult {
    pub params: ParamVector,
    pub final_loss: f64,
    /// `(iteration, best loss so far)`; non-increasing in the loss.
    pub trace: Vec<(usize, f64)>,
    pub recovered: Option<Recovered>,
    pub seed: u64,
    pub failed: bool,
}

/// Minimize a generic objective with Adam. A non-finite evaluation aborts
/// the run, preserving the trace. Returns `(best_x, best_loss, trace,
/// failed)`.
pub fn adam_minimize<F>(
    mut f: F,
    x0: &[f64],
    opts: &AdamOptions,
) -> (Vec<f64>, f64, Vec<(usize, f64)>, bool)
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut best_x = x.clone();
    let mut best_loss = f64::INFINITY;
    let mut trace = Vec::new();
    let mut failed = false;
    for it in 0..opts.iters {
        let (loss, grad) = match f(&x) {
            Ok(lg) => lg,
            Err(_) => {
                failed = true;
                break;
            }
        };
        if loss < best_loss {
            best_loss = loss;
            best_x = x.clone();
        }
        if it % opts.trace_stride == 0 {
            trace.push((it, best_loss));
        }
        let t = (it + 1) as f64;
        let bc1 = 1.0 - opts.beta1.powf(t);
        let bc2 = 1.0 - opts.beta2.powf(t);
        for i in 0..n {
            m[i] = opts.beta1 * m[i] + (1.0 - opts.beta1) * grad[i];
            v[i] = opts.beta2 * v[i] + (1.0 - opts.beta2) * grad[i] * grad[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            x[i] -= opts.lr * mh / (vh.sqrt() + opts.eps);
        }
    }
    if !failed {
        if let Ok((loss, _)) = f(&x) {
            if loss < best_loss {
                best_loss = loss;
                best_x = x;
            }
        }
    }
    trace.push((opts.iters, best_loss));
    (best_x, best_loss, trace, failed)
}

/// Adam on an inference problem.
pub fn adam_run(problem: &InferenceProblem, params0: &ParamVector, opts: &AdamOptions) -> FitResult {
    let (x, loss, trace, failed) = adam_minimize(
        |x| {
            let pv = ParamVector::from_parts(problem.layout().to_vec(), x.to_vec()).unwrap();
            problem.loss_grad(&pv)
        },
        params0.values(),
        opts,
    );
    let params = ParamVector::from_parts(problem.layout().to_vec(), x).unwrap();
    let recovered = problem.realize(&params).ok();
    FitResult {
        params,
        final_loss: loss,
        trace,
        recovered,
        seed: 0,
        failed,
    }
}

/// Options for the L-BFGS polish.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LbfgsOptions {
    pub max_iters: usize,
    #[serde(default = "default_memory")]
    pub memory: usize,
    #[serde(default = "default_grad_tol")]
    pub grad_tol: f64,
    #[serde(default = "default_loss_change_tol")]
    pub loss_change_tol: f64,
}

fn default_memory() -> usize {
    10
}
fn default_grad_tol() -> f64 {
    1e-10
}
fn default_loss_change_tol() -> f64 {
    1e-12
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            max_iters: 2000,
            memory: default_memory(),
            grad_tol: default_grad_tol(),
            loss_change_tol: default_loss_change_tol(),
        }
    }
}

/// L-BFGS with a strong-Wolfe line search. Terminates on gradient norm,
/// relative loss change, or the iteration cap; a failed line search returns
/// the best iterate found with the failure flag set.
pub fn lbfgs_minimize<F>(mut f: F, x0: &[f64], opts: &LbfgsOptions) -> (Vec<f64>, f64, bool)
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut x = x0.to_vec();
    let Ok((mut fx, mut gx)) = f(&x) else {
        return (x, f64::INFINITY, true);
    };
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();
    let mut line_search_failed = false;
    let mut cleared_memory = false;
    for _ in 0..opts.max_iters {
        let gnorm = norm2(&gx);
        if gnorm < opts.grad_tol {
            break;
        }
        // Two-loop recursion for the search direction.
        let mut q = gx.clone();
        let k = s_hist.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            alpha[i] = rho_hist[i] * dot(&s_hist[i], &q);
            for (qj, yj) in q.iter_mut().zip(&y_hist[i]) {
                *qj -= alpha[i] * yj;
            }
        }
        if k > 0 {
            let gamma =
                dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1]).max(1e-300);
            for qj in q.iter_mut() {
                *qj *= gamma;
            }
        }
        for i in 0..k {
            let beta = rho_hist[i] * dot(&y_hist[i], &q);
            for (qj, sj) in q.iter_mut().zip(&s_hist[i]) {
                *qj += (alpha[i] - beta) * sj;
            }
        }
        let dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let dg0 = dot(&dir, &gx);
        if dg0 >= 0.0 {
            if cleared_memory {
                break;
            }
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            cleared_memory = true;
            continue;
        }
        cleared_memory = false;
        match strong_wolfe(&mut f, &x, fx, &dir, dg0) {
            Some((fx_new, gx_new, x_new)) => {
                let s: Vec<f64> = x_new.iter().zip(&x).map(|(&a, &b)| a - b).collect();
                let y: Vec<f64> = gx_new.iter().zip(&gx).map(|(&a, &b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 1e-12 * norm2(&s) * norm2(&y) {
                    if s_hist.len() == opts.memory {
                        s_hist.remove(0);
                        y_hist.remove(0);
                        rho_hist.remove(0);
                    }
                    rho_hist.push(1.0 / sy);
                    s_hist.push(s);
                    y_hist.push(y);
                }
                let rel_change = (fx - fx_new).abs() / fx.abs().max(1e-300);
                x = x_new;
                fx = fx_new;
                gx = gx_new;
                if rel_change < opts.loss_change_tol {
                    break;
                }
            }
            None => {
                line_search_failed = true;
                break;
            }
        }
    }
    (x, fx, line_search_failed)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Strong-Wolfe line search (c1 = 1e-4, c2 = 0.9): bracketing phase followed
/// by cubic-interpolated zoom.
fn strong_wolfe<F>(
    f: &mut F,
    x: &[f64],
    f0: f64,
    dir: &[f64],
    dg0: f64,
) -> Option<(f64, Vec<f64>, Vec<f64>)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    const C1: f64 = 1e-4;
    const C2: f64 = 0.9;
    let eval = |f: &mut F, t: f64| -> Option<(f64, Vec<f64>, Vec<f64>, f64)> {
        let xt: Vec<f64> = x.iter().zip(dir).map(|(&xi, &di)| xi + t * di).collect();
        match f(&xt) {
            Ok((ft, gt)) if ft.is_finite() => {
                let dgt = dot(&gt, dir);
                Some((ft, gt, xt, dgt))
            }
            _ => None,
        }
    };
    let mut t_prev = 0.0;
    let mut f_prev = f0;
    let mut dg_prev = dg0;
    let mut t = 1.0;
    let mut bracket: Option<(f64, f64, f64, f64, f64, f64)> = None;
    let mut first = true;
    for _ in 0..25 {
        let Some((ft, gt, xt, dgt)) = eval(f, t) else {
            t *= 0.5;
            if t < 1e-16 {
                return None;
            }
            continue;
        };
        if ft > f0 + C1 * t * dg0 || (!first && ft >= f_prev) {
            bracket = Some((t_prev, f_prev, dg_prev, t, ft, dgt));
            break;
        }
        if dgt.abs() <= -C2 * dg0 {
            return Some((ft, gt, xt));
        }
        if dgt >= 0.0 {
            bracket = Some((t, ft, dgt, t_prev, f_prev, dg_prev));
            break;
        }
        t_prev = t;
        f_prev = ft;
        dg_prev = dgt;
        t *= 2.0;
        first = false;
    }
    let (mut lo, mut f_lo, mut dg_lo, mut hi, mut f_hi, mut dg_hi) = bracket?;
    for _ in 0..30 {
        let mid = {
            // Cubic-interpolated trial, safeguarded toward bisection.
            let d1 = dg_lo + dg_hi - 3.0 * (f_lo - f_hi) / (lo - hi);
            let d2sq = d1 * d1 - dg_lo * dg_hi;
            if d2sq > 0.0 && (lo - hi).abs() > 1e-16 {
                let d2 = d2sq.sqrt() * (hi - lo).signum();
                let cand = hi - (hi - lo) * (dg_hi + d2 - d1) / (dg_hi - dg_lo + 2.0 * d2);
                let (a, b) = (lo.min(hi), lo.max(hi));
                let margin = 0.1 * (b - a);
                if cand.is_finite() && cand > a + margin && cand < b - margin {
                    cand
                } else {
                    0.5 * (lo + hi)
                }
            } else {
                0.5 * (lo + hi)
            }
        };
        let Some((fm, gm, xm, dgm)) = eval(f, mid) else {
            hi = mid;
            continue;
        };
        if fm > f0 + C1 * mid * dg0 || fm >= f_lo {
            hi = mid;
            f_hi = fm;
            dg_hi = dgm;
        } else {
            if dgm.abs() <= -C2 * dg0 {
                return Some((fm, gm, xm));
            }
            if dgm * (hi - lo) >= 0.0 {
                hi = lo;
                f_hi = f_lo;
                dg_hi = dg_lo;
            }
            lo = mid;
            f_lo = fm;
            dg_lo = dgm;
        }
        if (hi - lo).abs() < 1e-14 {
            break;
        }
    }
    // Wolfe conditions could not be met exactly; fall back to the best
    // sufficient-decrease point so the polish stays monotone.
    let (ft, gt, xt, _) = eval(f, lo)?;
    if ft < f0 {
        Some((ft, gt, xt))
    } else {
        None
    }
}

/// L-BFGS polish on an inference problem, starting from `params0` (usually
/// an Adam result).
pub fn lbfgs_polish(
    problem: &InferenceProblem,
    params0: &ParamVector,
    opts: &LbfgsOptions,
) -> FitResult {
    let (x, loss, ls_failed) = lbfgs_minimize(
        |x| {
            let pv = ParamVector::from_parts(problem.layout().to_vec(), x.to_vec()).unwrap();
            problem.loss_grad(&pv)
        },
        params0.values(),
        opts,
    );
    let params = ParamVector::from_parts(problem.layout().to_vec(), x).unwrap();
    let recovered = problem.realize(&params).ok();
    FitResult {
        params,
        final_loss: loss,
        trace: vec![(0, loss)],
        recovered,
        seed: 0,
        failed: ls_failed && !loss.is_finite(),
    }
}

/// Multi-start schedule: Adam then L-BFGS per start.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultistartSchedule {
    pub adam: AdamOptions,
    pub lbfgs: LbfgsOptions,
    #[serde(default = "default_threshold_factor")]
    pub threshold_factor: f64,
    /// Initialization scale for Fourier coefficients.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    /// Add one start seeded from the stationary-relation algebra on top of
    /// the random starts (Fourier approximators only).
    #[serde(default = "default_informed_start")]
    pub informed_start: bool,
}

fn default_threshold_factor() -> f64 {
    2.0
}

fn default_init_scale() -> f64 {
    0.01
}

fn default_informed_start() -> bool {
    true
}

impl Default for MultistartSchedule {
    fn default() -> Self {
        MultistartSchedule {
            adam: AdamOptions::default(),
            lbfgs: LbfgsOptions::default(),
            threshold_factor: default_threshold_factor(),
            init_scale: default_init_scale(),
            informed_start: default_informed_start(),
        }
    }
}

/// Ensemble of independent optimization runs with the accepted subset.
#[derive(Clone, Debug)]
pub struct EnsembleResult {
    pub runs: Vec<FitResult>,
    pub threshold_factor: f64,
    /// Indices into `runs`, best first, whose final loss is within the
    /// threshold factor of the best. Never empty.
    pub accepted: Vec<usize>,
}

impl EnsembleResult {
    pub fn best(&self) -> &FitResult {
        &self.runs[self.accepted[0]]
    }
}

/// Build one starting point from the stationary relation
/// `sigma log u + kappa W*u + V = const`, which is linear in the unknowns:
/// with a known potential the kernel coefficients follow by deconvolution;
/// with an unknown potential, pairwise differences of observations eliminate
/// it first. The scale between the kernel and an unknown kappa is fixed by
/// the unit-depth gauge. Returns `None` when the problem shape does not
/// support the construction (non-Fourier approximators, or a single
/// observation with unknown potential).
pub fn algebraic_seed(problem: &InferenceProblem) -> Option<ParamVector> {
    let w_approx = match &problem.w {
        ComponentSource::Unknown(a) => match a.spec() {
            crate::approx::ApproximatorSpec::Fourier { k_max, .. } => Some((a, *k_max)),
            _ => return None,
        },
        ComponentSource::Known(_) => None,
    };
    let (_, k_max) = w_approx?;
    let v_unknown = match &problem.v {
        ComponentSource::Unknown(a) => match a.spec() {
            crate::approx::ApproximatorSpec::Fourier { k_max, .. } => Some(*k_max),
            _ => return None,
        },
        ComponentSource::Known(_) => None,
    };
    if v_unknown.is_some() && problem.prepared.len() < 2 {
        return None;
    }
    let grid = &problem.grid;
    let l = grid.length();
    let n = grid.n_points();
    // Clamp away from zero so logs of noisy near-vacuum data stay finite;
    // this is only an initial guess.
    let logs: Vec<GridFunction> = problem
        .prepared
        .iter()
        .map(|o| {
            grid.from_values(o.u.iter().map(|&u| problem.sigma * u.max(1e-9).ln()).collect())
        })
        .collect();
    let us: Vec<GridFunction> = problem
        .prepared
        .iter()
        .map(|o| grid.from_values(o.u.as_ref().clone()))
        .collect();
    let v_known = match &problem.v {
        ComponentSource::Known(f) => Some(f),
        ComponentSource::Unknown(_) => None,
    };
    // Complex coefficients of kappa*W per mode, averaged with weights
    // proportional to the squared denominator magnitude.
    let mut p_hat = vec![rustfft::num_complex::Complex::new(0.0, 0.0); n / 2];
    let mut weights = vec![0.0f64; n / 2];
    let mut accumulate = |num: &GridFunction, den: &GridFunction| {
        let cn = num.fourier_coeffs();
        let cd = den.fourier_coeffs();
        for k in 1..n / 2 {
            let mag2 = cd[k].norm_sqr();
            if mag2 > 1e-14 {
                // kappa W~(k) = -num~(k) / (L den~(k))
                p_hat[k] += -cn[k] / (cd[k] * l) * mag2;
                weights[k] += mag2;
            }
        }
    };
    match v_known {
        Some(v) => {
            for (lg, u) in logs.iter().zip(&us) {
                accumulate(&lg.add(v), u);
            }
        }
        None => {
            for i in 0..logs.len() {
                for j in i + 1..logs.len() {
                    accumulate(&logs[i].sub(&logs[j]), &us[i].sub(&us[j]));
                }
            }
        }
    }
    // Reconstruct the even real profile kappa*W from the recovered modes.
    let mut p = vec![0.0f64; n];
    for k in 1..n / 2 {
        if weights[k] > 0.0 {
            let c = p_hat[k] / weights[k];
            let om = 2.0 * std::f64::consts::PI * k as f64 / l;
            for (j, &x) in grid.nodes().iter().enumerate() {
                p[j] += 2.0 * (c.re * (om * x).cos() - c.im * (om * x).sin());
            }
        }
    }
    let pf = grid.from_values(p);
    let pf = pf.add_scalar(-pf.max()); // the additive mode is gauge; pin max = 0
    if !pf.is_finite() {
        return None;
    }
    let (kappa0, w0) = match problem.kappa {
        KappaSpec::Known(k) => {
            if k <= 0.0 {
                return None;
            }
            (k, pf.scale(1.0 / k))
        }
        KappaSpec::Unknown => {
            let depth = -pf.min();
            if !(depth > 1e-8) {
                return None;
            }
            (depth, pf.scale(1.0 / depth))
        }
    };
    // Potential estimate from the relation, averaged over observations.
    let v0 = v_unknown.map(|_| {
        let mut acc = grid.zeros();
        for (lg, u) in logs.iter().zip(&us) {
            let res = lg.add(&w0.convolve(u).scale(kappa0)).scale(-1.0);
            acc = acc.add(&res);
        }
        let mean = acc.scale(1.0 / logs.len() as f64);
        mean.add_scalar(-mean.mean())
    });

    let mut pv = ParamVector::new(problem.layout.to_vec());
    let plain_cos = |f: &GridFunction, k: usize| -> f64 {
        let om = 2.0 * std::f64::consts::PI * k as f64 / l;
        f.grid().sample(|x| (om * x).cos()).mul(f).integrate() * 2.0 / l
    };
    let plain_sin = |f: &GridFunction, k: usize| -> f64 {
        let om = 2.0 * std::f64::consts::PI * k as f64 / l;
        f.grid().sample(|x| (om * x).sin()).mul(f).integrate() * 2.0 / l
    };
    {
        // raw = -W0 realizes W0 through the min-subtraction transform.
        let raw = w0.scale(-1.0);
        let seg = pv.segment_mut("w").unwrap();
        seg[0] = raw.mean();
        for k in 1..=k_max {
            seg[k] = plain_cos(&raw, k);
        }
    }
    if let (Some(kv), Some(v0)) = (v_unknown, v0) {
        let seg = pv.segment_mut("v").unwrap();
        seg[0] = v0.mean();
        for k in 1..=kv {
            seg[k] = plain_cos(&v0, k);
            seg[kv + k] = plain_sin(&v0, k);
        }
    }
    if matches!(problem.kappa, KappaSpec::Unknown) {
        pv.segment_mut("log_kappa").unwrap()[0] = kappa0.max(1e-6).ln();
    }
    if pv.values().iter().all(|v| v.is_finite()) {
        Some(pv)
    } else {
        None
    }
}

/// Run `n_starts` seeded Adam + L-BFGS fits in parallel, plus one
/// algebraically seeded start when available. Deterministic given the master
/// seed; individual run failures are recorded, not fatal. Ties on the final
/// loss resolve to the lowest seed.
pub fn multistart_fit(
    problem: &InferenceProblem,
    n_starts: usize,
    schedule: &MultistartSchedule,
    master_seed: u64,
) -> Result<EnsembleResult> {
    if n_starts == 0 {
        return Err(Error::Input("n_starts must be at least 1".into()));
    }
    let informed: Option<ParamVector> = if schedule.informed_start {
        algebraic_seed(problem)
    } else {
        None
    };
    let starts: Vec<(u64, ParamVector)> = (0..n_starts)
        .map(|i| {
            let seed = derive_seed(master_seed, "multistart", i as u64);
            (seed, problem.init_params_scaled(seed, schedule.init_scale))
        })
        .chain(
            informed
                .into_iter()
                .map(|pv| (derive_seed(master_seed, "informed", 0), pv)),
        )
        .collect();
    let runs: Vec<FitResult> = starts
        .into_par_iter()
        .map(|(seed, params0)| {
            let mut fit = adam_run(problem, &params0, &schedule.adam);
            if !fit.failed {
                let polished = lbfgs_polish(problem, &fit.params, &schedule.lbfgs);
                if polished.final_loss <= fit.final_loss {
                    let mut trace = fit.trace;
                    trace.push((schedule.adam.iters + 1, polished.final_loss));
                    fit = FitResult { trace, ..polished };
                }
            }
            FitResult { seed, ..fit }
        })
        .collect();
    let finite: Vec<usize> = runs
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.failed && r.final_loss.is_finite())
        .map(|(i, _)| i)
        .collect();
    if finite.is_empty() {
        return Err(Error::NoConvergence {
            context: "every optimization start failed".into(),
            residual: f64::INFINITY,
            best: None,
        });
    }
    let best = finite
        .iter()
        .cloned()
        .min_by(|&a, &b| {
            (runs[a].final_loss, runs[a].seed)
                .partial_cmp(&(runs[b].final_loss, runs[b].seed))
                .unwrap()
        })
        .unwrap();
    let cutoff = schedule.threshold_factor * runs[best].final_loss;
    let mut accepted: Vec<usize> = finite
        .iter()
        .cloned()
        .filter(|&i| i == best || runs[i].final_loss <= cutoff)
        .collect();
    accepted.sort_by(|&a, &b| {
        (runs[a].final_loss, runs[a].seed)
            .partial_cmp(&(runs[b].final_loss, runs[b].seed))
            .unwrap()
    });
    Ok(EnsembleResult {
        runs,
        threshold_factor: schedule.threshold_factor,
        accepted,
    })
}

// ---------------------------------------------------------------------------
// Recovery metrics and identifiability diagnostics
// ---------------------------------------------------------------------------

/// `integral (W* - W)^2 dx + integral (V* - V)^2 dx`; pass `None` for a
/// component that was not fitted.
pub fn recovery_error(
    w_star: Option<&GridFunction>,
    v_star: Option<&GridFunction>,
    w_true: Option<&GridFunction>,
    v_true: Option<&GridFunction>,
) -> f64 {
    let sq = |a: &GridFunction, b: &GridFunction| {
        let d = a.sub(b);
        d.mul(&d).integrate()
    };
    let mut total = 0.0;
    if let (Some(ws), Some(wt)) = (w_star, w_true) {
        total += sq(ws, wt);
    }
    if let (Some(vs), Some(vt)) = (v_star, v_true) {
        total += sq(vs, vt);
    }
    total
}

/// Node-wise min/max envelope of a realized component across accepted runs.
#[derive(Clone, Debug)]
pub struct Band {
    pub lower: GridFunction,
    pub upper: GridFunction,
    pub best: GridFunction,
    /// Maximum node-wise spread of the envelope.
    pub width: f64,
}

fn band_of(curves: &[GridFunction], best: GridFunction) -> Band {
    let grid = best.grid().clone();
    let n = grid.n_points();
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    for c in curves {
        for (j, &v) in c.values().iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    let width = lo.iter().zip(&hi).map(|(&a, &b)| b - a).fold(0.0f64, f64::max);
    Band {
        lower: grid.from_values(lo),
        upper: grid.from_values(hi),
        best,
        width,
    }
}

/// Envelopes of the accepted runs' kernels and potentials. A narrow band
/// containing the truth indicates practical identifiability; the band is
/// reported, not auto-judged.
pub fn identifiability_band(ensemble: &EnsembleResult) -> Result<(Band, Band)> {
    let mut kernels = Vec::new();
    let mut potentials = Vec::new();
    for &i in &ensemble.accepted {
        let rec = ensemble.runs[i]
            .recovered
            .as_ref()
            .ok_or_else(|| Error::Input("accepted run lacks realized components".into()))?;
        kernels.push(rec.kernel.clone());
        potentials.push(rec.potential.clone());
    }
    let best = ensemble.best().recovered.as_ref().unwrap();
    Ok((
        band_of(&kernels, best.kernel.clone()),
        band_of(&potentials, best.potential.clone()),
    ))
}

/// One spectral line of an observed profile.
#[derive(Clone, Debug, Serialize)]
pub struct SpectrumEntry {
    pub k: usize,
    pub magnitude: f64,
    /// Below the blind-mode threshold: the profile carries no information
    /// about this kernel mode.
    pub blind: bool,
}

pub const BLIND_MODE_THRESHOLD: f64 = 1e-8;

/// Combined cosine/sine coefficient magnitudes up to the Nyquist mode.
pub fn spectrum_report(u: &GridFunction) -> Vec<SpectrumEntry> {
    let n = u.grid().n_points();
    let mut out = Vec::with_capacity(n / 2);
    for k in 0..n / 2 {
        let a = u.cosine_coeff(k).unwrap();
        let b = if k == 0 { 0.0 } else { u.sine_coeff(k).unwrap() };
        let magnitude = (a * a + b * b).sqrt();
        out.push(SpectrumEntry {
            k,
            magnitude,
            blind: magnitude < BLIND_MODE_THRESHOLD,
        });
    }
    out
}

/// Recover the kernel's cosine coefficients from one exact steady state via
/// the stationary relation `sigma log u + kappa W*u + V = const`: wherever
/// the profile's Fourier coefficient is above threshold,
/// `W~(k) = -g~(k) / (kappa u~(k) sqrt(L/2))` with `g = sigma log u + V`
/// mean-removed. Blind modes come back as `None`. This route never touches
/// the optimizer, so it serves as an independent oracle for fitted kernels.
pub fn deconvolve_kernel(
    u_star: &GridFunction,
    v_known: &GridFunction,
    kappa: f64,
    sigma: f64,
) -> Result<Vec<(usize, Option<f64>)>> {
    if u_star.min() <= 0.0 {
        return Err(Error::Domain("deconvolution needs u > 0 everywhere".into()));
    }
    if kappa <= 0.0 {
        return Err(Error::InvalidParameter("deconvolution needs kappa > 0".into()));
    }
    let grid = u_star.grid().clone();
    let l = grid.length();
    let g = u_star.map(|v| sigma * v.ln()).add(v_known);
    let g = g.add_scalar(-g.mean());
    // Complex coefficients so arbitrary translations of the profile drop out;
    // the kernel coefficient is real for even kernels.
    let cu = u_star.fourier_coeffs();
    let cg = g.fourier_coeffs();
    let n = grid.n_points();
    let mut out = Vec::new();
    for k in 1..n / 2 {
        let u_mag = (2.0 * l).sqrt() * cu[k].norm();
        if u_mag < BLIND_MODE_THRESHOLD {
            out.push((k, None));
            continue;
        }
        let c_w = -cg[k] / (cu[k] * kappa * l);
        out.push((k, Some((2.0 * l).sqrt() * c_w.re)));
    }
    Ok(out)
}

/// The compensation construction behind joint non-identifiability of
/// `(W, V)` from a single profile: for an even zero-mean `Q`, the pair
/// `(W + Q, V - kappa Q*u*)` leaves `u*` a steady state. The kappa factor
/// keeps the compensation exact when the interaction strength multiplies the
/// kernel term of the drift.
pub fn nonidentifiability_construct(
    w: &GridFunction,
    v: &GridFunction,
    u_star: &GridFunction,
    kappa: f64,
    q: &GridFunction,
) -> Result<(GridFunction, GridFunction)> {
    if q.asymmetry() > 1e-10 {
        return Err(Error::Input("Q must be even".into()));
    }
    if q.integrate().abs() > 1e-10 {
        return Err(Error::Input("Q must have zero mean".into()));
    }
    let w0 = w.add(q);
    let v0 = v.sub(&q.convolve(u_star).scale(kappa));
    Ok((w0, v0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approx::{Activation, ApproximatorSpec, Role};
    use crate::model::{KernelSpec, ModelInstance, PotentialSpec};
    use crate::steady::{enumerate_steady_states, EnumerateOptions};
    use std::f64::consts::PI;

    fn grid() -> PeriodicGrid {
        PeriodicGrid::new(2.0 * PI, 256).unwrap()
    }

    fn four_state_instance() -> ModelInstance {
        ModelInstance::new(
            grid(),
            &KernelSpec::Multimodal { n: 3.0, d: 1.0 },
            &PotentialSpec::Constant,
            13.0,
            1.0,
        )
        .unwrap()
    }

    fn observations_of(inst: &ModelInstance) -> Vec<ObservationEntry> {
        enumerate_steady_states(inst, &EnumerateOptions::default())
            .unwrap()
            .states
            .into_iter()
            .map(|s| ObservationEntry::new(s.profile))
            .collect()
    }

    fn kernel_problem(inst: &ModelInstance, loss: LossKind) -> InferenceProblem {
        let approx =
            Approximator::new(ApproximatorSpec::default_kernel_fourier(), inst.grid()).unwrap();
        InferenceProblem::new(
            inst.grid(),
            inst.sigma(),
            observations_of(inst),
            ComponentSource::Unknown(approx),
            ComponentSource::Known(inst.potential().clone()),
            KappaSpec::Known(inst.kappa()),
            loss,
        )
        .unwrap()
    }

    /// Project the true kernel onto the Fourier approximator's raw basis so
    /// the constrained realization reproduces it.
    fn true_kernel_params(inst: &ModelInstance, k_max: usize) -> Vec<f64> {
        let w = inst.kernel();
        let l = inst.grid().length();
        let mut params = vec![0.0; k_max + 1];
        // raw(x) = -W(x), so that min(raw) - raw(|x|) lands back on W.
        let neg = w.scale(-1.0);
        params[0] = neg.mean();
        for (k, slot) in params.iter_mut().enumerate().skip(1) {
            let om = 2.0 * PI * k as f64 / l;
            *slot = neg.grid().sample(|x| (om * x).cos()).mul(&neg).integrate() * 2.0 / l;
        }
        params
    }

    #[test]
    fn true_parameters_reach_solver_floor() {
        let inst = four_state_instance();
        let problem = kernel_problem(&inst, LossKind::Fp);
        let params =
            ParamVector::from_parts(problem.layout().to_vec(), true_kernel_params(&inst, 20))
                .unwrap();
        let loss = problem.loss(&params).unwrap();
        assert!(loss <= 1e-7, "fp loss at truth {loss}");
        let loss_pde = loss_pde(&problem, &params).unwrap();
        assert!(loss_pde <= 1e-4, "pde loss at truth {loss_pde}");
    }

    #[test]
    fn perturbed_kernel_loss_strictly_positive() {
        let inst = four_state_instance();
        let problem = kernel_problem(&inst, LossKind::Fp);
        let truth = true_kernel_params(&inst, 20);
        let base = {
            let pv = ParamVector::from_parts(problem.layout().to_vec(), truth.clone()).unwrap();
            problem.loss(&pv).unwrap()
        };
        let mut pert = truth;
        pert[3] += 0.5;
        let pv = ParamVector::from_parts(problem.layout().to_vec(), pert).unwrap();
        let loss = problem.loss(&pv).unwrap();
        assert!(loss > 1e3 * base.max(1e-12), "base {base}, perturbed {loss}");
    }

    #[test]
    fn zero_kernel_against_patterned_data_gives_gibbs_distance() {
        let inst = four_state_instance();
        let problem = kernel_problem(&inst, LossKind::Fp);
        // All-zero parameters realize the zero kernel, so T(u) is the uniform
        // state (V = 0 here) for every observation.
        let pv = ParamVector::from_parts(
            problem.layout().to_vec(),
            vec![0.0; problem.param_count()],
        )
        .unwrap();
        let loss = problem.loss(&pv).unwrap();
        let expect: f64 = observations_of(&inst)
            .iter()
            .map(|o| o.profile.sub(&inst.grid().uniform_state()).norm_l2())
            .sum();
        assert!((loss - expect).abs() < 1e-10, "loss {loss} vs {expect}");
    }

    #[test]
    fn constant_observation_is_blind_for_pde_loss() {
        let inst = four_state_instance();
        let uniform = inst.grid().uniform_state();
        let approx =
            Approximator::new(ApproximatorSpec::default_kernel_fourier(), inst.grid()).unwrap();
        let problem = InferenceProblem::new(
            inst.grid(),
            1.0,
            vec![ObservationEntry::new(uniform)],
            ComponentSource::Unknown(approx),
            ComponentSource::Known(inst.grid().zeros()),
            KappaSpec::Known(5.0),
            LossKind::Pde,
        )
        .unwrap();
        for seed in 0..5 {
            let p = problem.init_params(seed);
            assert!(problem.loss(&p).unwrap() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences_both_losses_both_families() {
        let inst = four_state_instance();
        let specs = [
            ApproximatorSpec::Fourier {
                role: Role::Kernel,
                k_max: 8,
            },
            ApproximatorSpec::Network {
                role: Role::Kernel,
                widths: vec![1, 6, 6, 1],
                activation: Activation::Softplus,
            },
        ];
        for spec in specs {
            for loss in [LossKind::Fp, LossKind::Pde] {
                let approx = Approximator::new(spec.clone(), inst.grid()).unwrap();
                let problem = InferenceProblem::new(
                    inst.grid(),
                    inst.sigma(),
                    observations_of(&inst).into_iter().take(2).collect(),
                    ComponentSource::Unknown(approx),
                    ComponentSource::Known(inst.potential().clone()),
                    KappaSpec::Unknown,
                    loss,
                )
                .unwrap();
                for seed in 0..3u64 {
                    let p = problem.init_params(seed);
                    let (value, grad) = problem.loss_grad(&p).unwrap();
                    for i in 0..p.len() {
                        let step = 1e-6 * (1.0 + p.values()[i].abs());
                        let mut up = p.clone();
                        up.values_mut()[i] += step;
                        let mut dn = p.clone();
                        dn.values_mut()[i] -= step;
                        let fd =
                            (problem.loss(&up).unwrap() - problem.loss(&dn).unwrap()) / (2.0 * step);
                        let ad = grad[i];
                        // The oracle itself carries a rounding floor of about
                        // eps * |f| / step; differences inside it carry no
                        // signal about the gradient.
                        let fd_floor = 100.0 * f64::EPSILON * value.abs().max(1.0) / step;
                        if (ad - fd).abs() <= fd_floor {
                            continue;
                        }
                        let rel = (ad - fd).abs() / ad.abs().max(fd.abs());
                        assert!(
                            rel < 1e-5,
                            "{spec:?} {loss:?} seed {seed} comp {i}: ad={ad} fd={fd}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let target = vec![1.0, -2.0, 3.0];
        let opts = AdamOptions {
            lr: 1e-2,
            iters: 5000,
            trace_stride: 100,
            ..AdamOptions::default()
        };
        let (x, loss, trace, failed) = adam_minimize(
            |x| {
                let l: f64 = x
                    .iter()
                    .zip(&target)
                    .map(|(&xi, &ti)| (xi - ti) * (xi - ti))
                    .sum();
                let g: Vec<f64> = x
                    .iter()
                    .zip(&target)
                    .map(|(&xi, &ti)| 2.0 * (xi - ti))
                    .collect();
                Ok((l, g))
            },
            &[0.0, 0.0, 0.0],
            &opts,
        );
        assert!(!failed);
        assert!(loss < 1e-6, "loss {loss}");
        for (xi, ti) in x.iter().zip(&target) {
            assert!((xi - ti).abs() < 1e-3);
        }
        for w in trace.windows(2) {
            assert!(w[1].1 <= w[0].1, "trace must be non-increasing");
        }
    }

    #[test]
    fn adam_zero_learning_rate_is_a_no_op() {
        let opts = AdamOptions {
            lr: 0.0,
            iters: 50,
            trace_stride: 10,
            ..AdamOptions::default()
        };
        let x0 = vec![0.7, -0.3];
        let (x, _, trace, _) = adam_minimize(
            |x| {
                let l: f64 = x.iter().map(|v| v * v).sum();
                Ok((l, x.iter().map(|v| 2.0 * v).collect()))
            },
            &x0,
            &opts,
        );
        assert_eq!(x, x0);
        let first = trace.first().unwrap().1;
        assert!(trace.iter().all(|&(_, l)| l == first));
    }

    #[test]
    fn lbfgs_stops_immediately_at_optimum() {
        let opts = LbfgsOptions::default();
        let mut calls = 0;
        let (x, loss, failed) = lbfgs_minimize(
            |x| {
                calls += 1;
                let l: f64 = x.iter().map(|v| v * v).sum();
                Ok((l, x.iter().map(|v| 2.0 * v).collect()))
            },
            &[0.0, 0.0],
            &opts,
        );
        assert!(!failed);
        assert_eq!(x, vec![0.0, 0.0]);
        assert!(loss == 0.0);
        assert!(calls <= 2);
    }

    #[test]
    fn lbfgs_solves_rosenbrock() {
        let opts = LbfgsOptions {
            max_iters: 500,
            ..LbfgsOptions::default()
        };
        let (x, loss, _failed) = lbfgs_minimize(
            |x| {
                let (a, b) = (x[0], x[1]);
                let l = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
                let g = vec![
                    -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                    200.0 * (b - a * a),
                ];
                Ok((l, g))
            },
            &[-1.2, 1.0],
            &opts,
        );
        assert!(loss < 1e-12, "loss {loss}");
        assert!((x[0] - 1.0).abs() < 1e-6 && (x[1] - 1.0).abs() < 1e-6, "{x:?}");
    }

    #[test]
    fn multistart_single_run_is_accepted() {
        let inst = four_state_instance();
        let problem = kernel_problem(&inst, LossKind::Fp);
        let schedule = MultistartSchedule {
            adam: AdamOptions {
                iters: 50,
                ..AdamOptions::default()
            },
            lbfgs: LbfgsOptions {
                max_iters: 5,
                ..LbfgsOptions::default()
            },
            threshold_factor: 2.0,
            init_scale: 0.01,
            informed_start: false,
        };
        let ens = multistart_fit(&problem, 1, &schedule, 7).unwrap();
        assert_eq!(ens.runs.len(), 1);
        assert_eq!(ens.accepted, vec![0]);
    }

    #[test]
    fn multistart_is_deterministic_and_keeps_best() {
        let inst = four_state_instance();
        let problem = kernel_problem(&inst, LossKind::Fp);
        let schedule = MultistartSchedule {
            adam: AdamOptions {
                iters: 30,
                ..AdamOptions::default()
            },
            lbfgs: LbfgsOptions {
                max_iters: 3,
                ..LbfgsOptions::default()
            },
            threshold_factor: 2.0,
            init_scale: 0.01,
            informed_start: false,
        };
        let a = multistart_fit(&problem, 4, &schedule, 11).unwrap();
        let b = multistart_fit(&problem, 4, &schedule, 11).unwrap();
        for (ra, rb) in a.runs.iter().zip(&b.runs) {
            assert_eq!(ra.final_loss, rb.final_loss);
            assert_eq!(ra.params.values(), rb.params.values());
        }
        assert_eq!(a.accepted, b.accepted);
        let min_loss = a
            .runs
            .iter()
            .map(|r| r.final_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(a.best().final_loss, min_loss);
    }

    #[test]
    fn recovery_error_basics() {
        let g = grid();
        let w = g.sample(|x| -((2.0 * x).cos().powi(2)));
        let v = g.sample(|x| x.sin());
        assert_eq!(recovery_error(Some(&w), Some(&v), Some(&w), Some(&v)), 0.0);
        let w_off = w.add_scalar(0.5);
        let err = recovery_error(Some(&w_off), None, Some(&w), None);
        assert!((err - 0.25 * g.length()).abs() < 1e-12);
    }

    #[test]
    fn spectrum_report_flags_blind_modes() {
        let g = grid();
        let u = g.uniform_state();
        let report = spectrum_report(&u);
        assert!(!report[0].blind);
        assert!(report[1..].iter().all(|e| e.blind));
        let u2 = g.uniform_state().add(&g.basis_fn(2).scale(0.1));
        let report2 = spectrum_report(&u2);
        let loud: Vec<usize> = report2.iter().filter(|e| !e.blind).map(|e| e.k).collect();
        assert_eq!(loud, vec![0, 2]);
    }

    #[test]
    fn deconvolution_zero_kernel_recovers_zero() {
        let g = grid();
        let inst = ModelInstance::new(
            g.clone(),
            &KernelSpec::Triangle { w: 1e-14 },
            &PotentialSpec::Plateau { a: 2.0, n: 1.5 },
            3.0,
            1.0,
        )
        .unwrap();
        let gibbs = {
            let w = inst.potential().map(|v| (-v).exp());
            let z = w.integrate();
            w.scale(1.0 / z)
        };
        let coeffs = deconvolve_kernel(&gibbs, inst.potential(), 3.0, 1.0).unwrap();
        for (k, c) in coeffs {
            if let Some(c) = c {
                assert!(c.abs() < 1e-8, "mode {k}: {c}");
            }
        }
    }

    #[test]
    fn deconvolution_matches_true_kernel_on_loud_modes() {
        let inst = four_state_instance();
        let set = enumerate_steady_states(&inst, &EnumerateOptions::default()).unwrap();
        // The most structured state has the fullest spectrum.
        let state = &set.states.last().unwrap().profile;
        let coeffs = deconvolve_kernel(state, inst.potential(), inst.kappa(), inst.sigma()).unwrap();
        let mut checked = 0;
        for (k, c) in coeffs {
            if let Some(c) = c {
                let truth = inst.kernel().cosine_coeff(k).unwrap();
                assert!(
                    (c - truth).abs() < 1e-6,
                    "mode {k}: deconvolved {c}, true {truth}"
                );
                checked += 1;
            }
        }
        assert!(checked >= 5, "too few loud modes ({checked})");
    }

    #[test]
    fn compensation_construction_preserves_the_profile() {
        let inst = ModelInstance::new(
            grid(),
            &KernelSpec::Multimodal { n: 2.0, d: 1.5 },
            &PotentialSpec::Plateau { a: 2.0, n: 1.5 },
            5.0,
            1.0,
        )
        .unwrap();
        let set = enumerate_steady_states(&inst, &EnumerateOptions::default()).unwrap();
        assert!(set.len() >= 2);
        let u_star = &set.states[0].profile;
        let q = inst.grid().basis_fn(2).scale(0.3);
        let (w0, v0) =
            nonidentifiability_construct(inst.kernel(), inst.potential(), u_star, inst.kappa(), &q)
                .unwrap();
        let alt =
            ModelInstance::from_realized(inst.grid().clone(), w0, v0, inst.kappa(), inst.sigma())
                .unwrap();
        let res = crate::steady::fp_residual(u_star, &alt).unwrap();
        assert!(res <= 1e-9, "compensated residual {res}");
        // A profile from a different branch breaks the degeneracy.
        let twin = &set.states.last().unwrap().profile;
        let res_twin = crate::steady::fp_residual(twin, &alt).unwrap();
        assert!(res_twin > 1e-2, "twin residual {res_twin}");
        // Q = 0 leaves everything unchanged.
        let zero = inst.grid().zeros();
        let (w0, v0) = nonidentifiability_construct(
            inst.kernel(),
            inst.potential(),
            u_star,
            inst.kappa(),
            &zero,
        )
        .unwrap();
        assert_eq!(w0.values(), inst.kernel().values());
        assert_eq!(v0.values(), inst.potential().values());
    }

    #[test]
    fn rejects_invalid_problem_shapes() {
        let inst = four_state_instance();
        let approx =
            Approximator::new(ApproximatorSpec::default_kernel_fourier(), inst.grid()).unwrap();
        // No observations.
        assert!(InferenceProblem::new(
            inst.grid(),
            1.0,
            vec![],
            ComponentSource::Unknown(approx.clone()),
            ComponentSource::Known(inst.potential().clone()),
            KappaSpec::Known(1.0),
            LossKind::Fp,
        )
        .is_err());
        // No unknowns.
        assert!(InferenceProblem::new(
            inst.grid(),
            1.0,
            observations_of(&inst),
            ComponentSource::Known(inst.kernel().clone()),
            ComponentSource::Known(inst.potential().clone()),
            KappaSpec::Known(1.0),
            LossKind::Fp,
        )
        .is_err());
        // Per-observation kappa with unknown kappa.
        let obs = vec![ObservationEntry::with_kappa(
            observations_of(&inst)[0].profile.clone(),
            4.0,
        )];
        assert!(InferenceProblem::new(
            inst.grid(),
            1.0,
            obs,
            ComponentSource::Unknown(approx),
            ComponentSource::Known(inst.potential().clone()),
            KappaSpec::Unknown,
            LossKind::Fp,
        )
        .is_err());
    }
}
