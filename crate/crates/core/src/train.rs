//! Fitting and PINN losses, optimizers, and the instrumented training loop
//! that records loss and ε-rank trajectories.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gram::{layer_spectra, BoxDomain, GramSpectrum, QuadratureGrid};
use crate::linalg::DenseMatrix;
use crate::net::{ChannelData, DerivRequest, Network, Objective};

const SAMPLE_STREAM: u64 = 1 << 33;

/// Diffusion coefficient of the heat problem.
pub const HEAT_DIFFUSION: f64 = 0.02;
/// Diffusion coefficient of the Allen–Cahn problem.
pub const ALLEN_CAHN_DIFFUSION: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "fit1d")]
    Fit1d,
    #[serde(rename = "fit2d")]
    Fit2d,
    #[serde(rename = "poisson2d")]
    Poisson2d,
    #[serde(rename = "heat2d")]
    Heat2d,
    #[serde(rename = "allen-cahn")]
    AllenCahn,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Fit1d => "fit1d",
            TaskKind::Fit2d => "fit2d",
            TaskKind::Poisson2d => "poisson2d",
            TaskKind::Heat2d => "heat2d",
            TaskKind::AllenCahn => "allen-cahn",
        }
    }

    pub fn is_pde(&self) -> bool {
        !matches!(self, TaskKind::Fit1d | TaskKind::Fit2d)
    }

    pub fn input_dim(&self) -> usize {
        match self {
            TaskKind::Fit1d => 1,
            TaskKind::Fit2d | TaskKind::Poisson2d | TaskKind::AllenCahn => 2,
            TaskKind::Heat2d => 3,
        }
    }

    pub fn domain(&self) -> BoxDomain {
        let h = PI / 2.0;
        let (lo, hi) = match self {
            TaskKind::Fit1d => (vec![-1.0], vec![1.0]),
            TaskKind::Fit2d => (vec![-1.0, -1.0], vec![1.0, 1.0]),
            TaskKind::Poisson2d => (vec![-h, -h], vec![h, h]),
            TaskKind::Heat2d => (vec![-PI, -PI, 0.0], vec![PI, PI, 1.0]),
            TaskKind::AllenCahn => (vec![-1.0, 0.0], vec![1.0, 1.0]),
        };
        BoxDomain::new(lo, hi).expect("task domains are valid")
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fit1d" => Ok(TaskKind::Fit1d),
            "fit2d" => Ok(TaskKind::Fit2d),
            "poisson2d" => Ok(TaskKind::Poisson2d),
            "heat2d" => Ok(TaskKind::Heat2d),
            "allen-cahn" => Ok(TaskKind::AllenCahn),
            other => Err(Error::Parse(format!(
                "unknown task '{other}' (expected fit1d, fit2d, poisson2d, heat2d, allen-cahn)"
            ))),
        }
    }
}

/// `cos x + cos 2x + cos 30x`.
pub fn fit1d_target(x: f64) -> f64 {
    x.cos() + (2.0 * x).cos() + (30.0 * x).cos()
}

/// `e^{-(x²+y²)} sin(5x + 5y)`.
pub fn fit2d_target(x: f64, y: f64) -> f64 {
    (-(x * x + y * y)).exp() * (5.0 * x + 5.0 * y).sin()
}

/// Poisson forcing `f = 32 sin 4x sin 4y`.
pub fn poisson_forcing(x: f64, y: f64) -> f64 {
    32.0 * (4.0 * x).sin() * (4.0 * y).sin()
}

/// Interior residual `Δu + f`.
pub fn poisson_residual(x: f64, y: f64, u_xx: f64, u_yy: f64) -> f64 {
    u_xx + u_yy + poisson_forcing(x, y)
}

/// Interior residual `u_t - 0.02 (u_xx + u_yy)`.
pub fn heat_residual(u_t: f64, u_xx: f64, u_yy: f64) -> f64 {
    u_t - HEAT_DIFFUSION * (u_xx + u_yy)
}

pub fn heat_initial(x: f64, y: f64) -> f64 {
    (5.0 * x).sin() * (5.0 * y).sin()
}

/// Interior residual `u_t - 10⁻⁴ u_xx - u + u³`.
pub fn allen_cahn_residual(u: f64, u_t: f64, u_xx: f64) -> f64 {
    u_t - ALLEN_CAHN_DIFFUSION * u_xx - u + u * u * u
}

pub fn allen_cahn_initial(x: f64) -> f64 {
    (PI * x).cos()
}

/// Value, gradient and diagonal Hessian of a function at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalJet {
    pub u: f64,
    pub grad: Vec<f64>,
    pub hess_diag: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleCounts {
    pub interior: usize,
    #[serde(default)]
    pub initial: usize,
    #[serde(default)]
    pub boundary: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Task {
    pub kind: TaskKind,
    pub mu_bc: f64,
    pub mu_ic: f64,
    pub samples: SampleCounts,
}

impl Task {
    pub fn new(kind: TaskKind, samples: SampleCounts, mu_bc: f64, mu_ic: f64) -> Result<Self> {
        let t = Self {
            kind,
            mu_bc,
            mu_ic,
            samples,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn fit1d(n: usize) -> Result<Self> {
        Self::new(TaskKind::Fit1d, counts(n, 0, 0), 1.0, 1.0)
    }

    pub fn fit2d(n: usize) -> Result<Self> {
        Self::new(TaskKind::Fit2d, counts(n, 0, 0), 1.0, 1.0)
    }

    pub fn poisson2d(interior: usize, boundary: usize, mu_bc: f64) -> Result<Self> {
        Self::new(TaskKind::Poisson2d, counts(interior, 0, boundary), mu_bc, 1.0)
    }

    pub fn heat2d(interior: usize, initial: usize, boundary: usize) -> Result<Self> {
        Self::new(TaskKind::Heat2d, counts(interior, initial, boundary), 1.0, 1.0)
    }

    pub fn allen_cahn(interior: usize, initial: usize, boundary: usize) -> Result<Self> {
        Self::new(TaskKind::AllenCahn, counts(interior, initial, boundary), 1.0, 1.0)
    }

    pub fn domain(&self) -> BoxDomain {
        self.kind.domain()
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.samples;
        if s.interior == 0 {
            return Err(Error::Config(format!("{}: interior sample count must be >= 1", self.kind)));
        }
        let (need_ic, need_bc) = match self.kind {
            TaskKind::Fit1d | TaskKind::Fit2d => (false, false),
            TaskKind::Poisson2d => (false, true),
            TaskKind::Heat2d | TaskKind::AllenCahn => (true, true),
        };
        if need_ic && s.initial == 0 {
            return Err(Error::Config(format!("{}: initial sample count must be >= 1", self.kind)));
        }
        if need_bc && s.boundary == 0 {
            return Err(Error::Config(format!("{}: boundary sample count must be >= 1", self.kind)));
        }
        if need_bc && !(self.mu_bc > 0.0 && self.mu_bc.is_finite()) {
            return Err(Error::Config(format!("mu_bc must be > 0, got {}", self.mu_bc)));
        }
        if need_ic && !(self.mu_ic > 0.0 && self.mu_ic.is_finite()) {
            return Err(Error::Config(format!("mu_ic must be > 0, got {}", self.mu_ic)));
        }
        Ok(())
    }

    /// Target for fitting tasks.
    pub fn target(&self, x: &[f64]) -> Option<f64> {
        match self.kind {
            TaskKind::Fit1d => Some(fit1d_target(x[0])),
            TaskKind::Fit2d => Some(fit2d_target(x[0], x[1])),
            _ => None,
        }
    }

    /// Closed-form solution where one is known.
    pub fn exact_solution(&self, x: &[f64]) -> Option<f64> {
        match self.kind {
            TaskKind::Fit1d | TaskKind::Fit2d => self.target(x),
            TaskKind::Poisson2d => Some((4.0 * x[0]).sin() * (4.0 * x[1]).sin()),
            TaskKind::Heat2d => Some((-x[2]).exp() * heat_initial(x[0], x[1])),
            TaskKind::AllenCahn => None,
        }
    }

    /// PDE residual at `x` for a function with the given local derivatives.
    pub fn pde_residual(&self, x: &[f64], jet: &LocalJet) -> Option<f64> {
        match self.kind {
            TaskKind::Poisson2d => Some(poisson_residual(x[0], x[1], jet.hess_diag[0], jet.hess_diag[1])),
            TaskKind::Heat2d => Some(heat_residual(jet.grad[2], jet.hess_diag[0], jet.hess_diag[1])),
            TaskKind::AllenCahn => Some(allen_cahn_residual(jet.u, jet.grad[1], jet.hess_diag[0])),
            _ => None,
        }
    }

    /// Draws the training sets. Fitting in 1D uses an evenly spaced grid;
    /// everything else is uniform random, fixed for the whole run.
    pub fn build_samples(&self, seed: u64) -> Result<SampleSet> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(SAMPLE_STREAM);
        let dom = self.domain();
        let s = self.samples;
        let d = self.kind.input_dim();
        let empty = || DenseMatrix::zeros(0, d);
        let set = match self.kind {
            TaskKind::Fit1d => {
                let n = s.interior;
                let pts: Vec<f64> = if n == 1 {
                    vec![0.5 * (dom.lo[0] + dom.hi[0])]
                } else {
                    let h = (dom.hi[0] - dom.lo[0]) / (n - 1) as f64;
                    (0..n).map(|i| dom.lo[0] + h * i as f64).collect()
                };
                let vals = pts.iter().map(|&x| fit1d_target(x)).collect();
                SampleSet {
                    interior: DenseMatrix::new(n, 1, pts)?,
                    interior_values: vals,
                    initial: empty(),
                    initial_values: vec![],
                    boundary: empty(),
                }
            }
            TaskKind::Fit2d => {
                let pts = uniform_points(&mut rng, &dom, s.interior);
                let vals = rows(&pts).map(|x| fit2d_target(x[0], x[1])).collect();
                SampleSet {
                    interior: pts,
                    interior_values: vals,
                    initial: empty(),
                    initial_values: vec![],
                    boundary: empty(),
                }
            }
            TaskKind::Poisson2d => {
                let pts = uniform_points(&mut rng, &dom, s.interior);
                let vals = rows(&pts).map(|x| poisson_forcing(x[0], x[1])).collect();
                let bnd = boundary_points(&mut rng, &dom, 2, s.boundary);
                SampleSet {
                    interior: pts,
                    interior_values: vals,
                    initial: empty(),
                    initial_values: vec![],
                    boundary: bnd,
                }
            }
            TaskKind::Heat2d => {
                let pts = uniform_points(&mut rng, &dom, s.interior);
                let mut init = uniform_points(&mut rng, &dom, s.initial).into_vec();
                init.chunks_exact_mut(3).for_each(|p| p[2] = 0.0);
                let init = DenseMatrix::new(s.initial, 3, init)?;
                let ivals = rows(&init).map(|x| heat_initial(x[0], x[1])).collect();
                let bnd = boundary_points(&mut rng, &dom, 2, s.boundary);
                SampleSet {
                    interior_values: vec![0.0; s.interior],
                    interior: pts,
                    initial: init,
                    initial_values: ivals,
                    boundary: bnd,
                }
            }
            TaskKind::AllenCahn => {
                let pts = uniform_points(&mut rng, &dom, s.interior);
                let init: Vec<f64> = (0..s.initial)
                    .flat_map(|_| [rng.random_range(dom.lo[0]..=dom.hi[0]), 0.0])
                    .collect();
                let init = DenseMatrix::new(s.initial, 2, init)?;
                let ivals = rows(&init).map(|x| allen_cahn_initial(x[0])).collect();
                // rows 0..k at x = -1, rows k..2k at x = 1 with matching times
                let ts: Vec<f64> = (0..s.boundary)
                    .map(|_| rng.random_range(dom.lo[1]..=dom.hi[1]))
                    .collect();
                let mut b = Vec::with_capacity(4 * s.boundary);
                for x in [dom.lo[0], dom.hi[0]] {
                    for &t in &ts {
                        b.extend([x, t]);
                    }
                }
                SampleSet {
                    interior_values: vec![0.0; s.interior],
                    interior: pts,
                    initial: init,
                    initial_values: ivals,
                    boundary: DenseMatrix::new(2 * s.boundary, 2, b)?,
                }
            }
        };
        Ok(set)
    }
}

fn counts(interior: usize, initial: usize, boundary: usize) -> SampleCounts {
    SampleCounts {
        interior,
        initial,
        boundary,
    }
}

fn rows(m: &DenseMatrix) -> impl Iterator<Item = &[f64]> {
    (0..m.rows()).map(move |i| m.row(i))
}

fn uniform_points(rng: &mut ChaCha8Rng, dom: &BoxDomain, m: usize) -> DenseMatrix {
    let d = dom.dim();
    let mut v = Vec::with_capacity(m * d);
    for _ in 0..m {
        for i in 0..d {
            v.push(rng.random_range(dom.lo[i]..=dom.hi[i]));
        }
    }
    DenseMatrix::new(m, d, v).expect("finite samples")
}

/// Uniform points on the faces of the first `spatial` coordinates; any
/// remaining coordinates (time) are drawn uniformly over their range.
fn boundary_points(rng: &mut ChaCha8Rng, dom: &BoxDomain, spatial: usize, m: usize) -> DenseMatrix {
    let d = dom.dim();
    let lens: Vec<f64> = (0..spatial).map(|i| dom.hi[i] - dom.lo[i]).collect();
    // face (axis i fixed) has measure ∏_{j≠i} len_j; two faces per axis
    let face_w: Vec<f64> = (0..spatial)
        .map(|i| (0..spatial).filter(|&j| j != i).map(|j| lens[j]).product::<f64>())
        .collect();
    let total: f64 = face_w.iter().sum();
    let mut v = Vec::with_capacity(m * d);
    for _ in 0..m {
        let mut p: Vec<f64> = (0..d).map(|i| rng.random_range(dom.lo[i]..=dom.hi[i])).collect();
        let mut pick = rng.random_range(0.0..total);
        let mut axis = spatial - 1;
        for (i, w) in face_w.iter().enumerate() {
            if pick < *w {
                axis = i;
                break;
            }
            pick -= w;
        }
        p[axis] = if rng.random_bool(0.5) { dom.lo[axis] } else { dom.hi[axis] };
        v.extend(p);
    }
    DenseMatrix::new(m, d, v).expect("finite samples")
}

/// Fixed training points for one run. For fitting tasks `interior_values`
/// holds the targets; for Poisson it holds the forcing. Allen–Cahn boundary
/// rows come in two halves: `x = -1` then `x = 1` at the same times.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub interior: DenseMatrix,
    pub interior_values: Vec<f64>,
    pub initial: DenseMatrix,
    pub initial_values: Vec<f64>,
    pub boundary: DenseMatrix,
}

fn loss_term(
    net: &Network,
    points: &DenseMatrix,
    req: &DerivRequest,
    grad: Option<&mut [f64]>,
    f: impl FnOnce(&ChannelData, &mut ChannelData) -> f64,
) -> Result<f64> {
    if points.rows() == 0 {
        return Ok(0.0);
    }
    match grad {
        Some(g) => {
            let (out, tape) = net.eval_with_tape(points, req)?;
            let mut adj = out.zeros_like();
            let l = f(&out, &mut adj);
            net.backprop(&tape, &adj, g)?;
            Ok(l)
        }
        None => {
            let out = net.eval_batch(points, req)?;
            let mut adj = out.zeros_like();
            Ok(f(&out, &mut adj))
        }
    }
}

/// `mean (y(x_s) - target_s)²` with the value-channel adjoint scaled by `weight`.
fn value_mse(
    net: &Network,
    points: &DenseMatrix,
    targets: &[f64],
    weight: f64,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let n = points.rows() as f64;
    loss_term(net, points, &DerivRequest::value_only(), grad, |out, adj| {
        let a = adj.value_mut();
        let mut l = 0.0;
        for (s, (&y, &t)) in out.value().iter().zip(targets).enumerate() {
            let r = y - t;
            l += r * r;
            a[s] = 2.0 * weight * r / n;
        }
        weight * l / n
    })
}

/// Mean squared error over the samples; `grad` is overwritten when given.
pub fn mse_loss(net: &Network, points: &DenseMatrix, targets: &[f64], grad: Option<&mut [f64]>) -> Result<f64> {
    if points.rows() == 0 {
        return Err(Error::Config("mean square error needs at least one sample".into()));
    }
    if targets.len() != points.rows() {
        return Err(Error::Shape(format!(
            "{} targets for {} points",
            targets.len(),
            points.rows()
        )));
    }
    let mut grad = grad;
    if let Some(g) = grad.as_deref_mut() {
        g.iter_mut().for_each(|v| *v = 0.0);
    }
    value_mse(net, points, targets, 1.0, grad)
}

/// Residual loss of a PDE task: mean squared interior residual plus
/// `μ_bc`·boundary and `μ_ic`·initial mean squares. `grad` is overwritten.
pub fn pinn_loss(net: &Network, task: &Task, samples: &SampleSet, grad: Option<&mut [f64]>) -> Result<f64> {
    if !task.kind.is_pde() {
        return Err(Error::Config(format!("{} is not a PDE task", task.kind)));
    }
    if !net.activation().supports_second_derivatives() {
        return Err(Error::UnsupportedActivation(format!(
            "{} has no usable second derivative for PDE residuals",
            net.activation()
        )));
    }
    let mut grad = grad;
    if let Some(g) = grad.as_deref_mut() {
        g.iter_mut().for_each(|v| *v = 0.0);
    }
    let ni = samples.interior.rows() as f64;
    let pts = &samples.interior;
    let interior = match task.kind {
        TaskKind::Poisson2d => {
            let req = DerivRequest::new(&[], &[(0, 0), (1, 1)]);
            loss_term(net, pts, &req, grad.as_deref_mut(), |out, adj| {
                let (uxx, uyy) = (out.second(0, 0).unwrap(), out.second(1, 1).unwrap());
                let mut l = 0.0;
                let mut ad = vec![0.0; out.batch()];
                for s in 0..out.batch() {
                    let r = uxx[s] + uyy[s] + samples.interior_values[s];
                    l += r * r;
                    ad[s] = 2.0 * r / ni;
                }
                adj.second_mut(0, 0).unwrap().copy_from_slice(&ad);
                adj.second_mut(1, 1).unwrap().copy_from_slice(&ad);
                l / ni
            })?
        }
        TaskKind::Heat2d => {
            let req = DerivRequest::new(&[2], &[(0, 0), (1, 1)]);
            loss_term(net, pts, &req, grad.as_deref_mut(), |out, adj| {
                let ut = out.first(2).unwrap();
                let (uxx, uyy) = (out.second(0, 0).unwrap(), out.second(1, 1).unwrap());
                let mut l = 0.0;
                let mut ad = vec![0.0; out.batch()];
                for s in 0..out.batch() {
                    let r = heat_residual(ut[s], uxx[s], uyy[s]);
                    l += r * r;
                    ad[s] = 2.0 * r / ni;
                }
                adj.first_mut(2).unwrap().copy_from_slice(&ad);
                for v in ad.iter_mut() {
                    *v *= -HEAT_DIFFUSION;
                }
                adj.second_mut(0, 0).unwrap().copy_from_slice(&ad);
                adj.second_mut(1, 1).unwrap().copy_from_slice(&ad);
                l / ni
            })?
        }
        TaskKind::AllenCahn => {
            let req = DerivRequest::new(&[1], &[(0, 0)]);
            loss_term(net, pts, &req, grad.as_deref_mut(), |out, adj| {
                let (u, ut, uxx) = (out.value(), out.first(1).unwrap(), out.second(0, 0).unwrap());
                let b = out.batch();
                let mut l = 0.0;
                let (mut av, mut at, mut ax) = (vec![0.0; b], vec![0.0; b], vec![0.0; b]);
                for s in 0..b {
                    let r = allen_cahn_residual(u[s], ut[s], uxx[s]);
                    l += r * r;
                    let g = 2.0 * r / ni;
                    av[s] = g * (3.0 * u[s] * u[s] - 1.0);
                    at[s] = g;
                    ax[s] = -ALLEN_CAHN_DIFFUSION * g;
                }
                adj.value_mut().copy_from_slice(&av);
                adj.first_mut(1).unwrap().copy_from_slice(&at);
                adj.second_mut(0, 0).unwrap().copy_from_slice(&ax);
                l / ni
            })?
        }
        TaskKind::Fit1d | TaskKind::Fit2d => unreachable!(),
    };

    let initial = if samples.initial.rows() > 0 {
        value_mse(net, &samples.initial, &samples.initial_values, task.mu_ic, grad.as_deref_mut())?
    } else {
        0.0
    };

    let boundary = match task.kind {
        TaskKind::AllenCahn => {
            let k = samples.boundary.rows() / 2;
            let mu = task.mu_bc;
            loss_term(
                net,
                &samples.boundary,
                &DerivRequest::value_only(),
                grad.as_deref_mut(),
                |out, adj| {
                    let u = out.value();
                    let a = adj.value_mut();
                    let mut l = 0.0;
                    for s in 0..k {
                        let r = u[s] - u[s + k];
                        l += r * r;
                        a[s] = 2.0 * mu * r / k as f64;
                        a[s + k] = -a[s];
                    }
                    mu * l / k as f64
                },
            )?
        }
        _ => {
            let zeros = vec![0.0; samples.boundary.rows()];
            value_mse(net, &samples.boundary, &zeros, task.mu_bc, grad.as_deref_mut())?
        }
    };
    Ok(interior + initial + boundary)
}

/// A task with its fixed samples, usable as an [`Objective`].
pub struct TaskLoss<'a> {
    pub task: &'a Task,
    pub samples: &'a SampleSet,
}

impl Objective for TaskLoss<'_> {
    fn loss(&self, net: &Network, grad: Option<&mut [f64]>) -> Result<f64> {
        if self.task.kind.is_pde() {
            pinn_loss(net, self.task, self.samples, grad)
        } else {
            mse_loss(net, &self.samples.interior, &self.samples.interior_values, grad)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Parse(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            ..Self::adam(lr)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return Err(Error::Config("adam needs 0 <= beta < 1 and eps > 0".into()));
        }
        Ok(())
    }
}

/// Optimizer moments aligned with the canonical parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: usize) -> Self {
        let buf = match config.kind {
            OptimizerKind::Adam => params,
            OptimizerKind::Sgd => 0,
        };
        Self {
            config,
            m: vec![0.0; buf],
            v: vec![0.0; buf],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let c = self.config;
        self.t += 1;
        match c.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= c.lr * g;
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - c.beta1.powi(self.t as i32);
                let bc2 = 1.0 - c.beta2.powi(self.t as i32);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
                    self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
                    let mh = self.m[i] / bc1;
                    let vh = self.v[i] / bc2;
                    params[i] -= c.lr * mh / (vh.sqrt() + c.eps);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    #[serde(default = "default_rank_every")]
    pub rank_every: usize,
    pub epsilon: f64,
    /// Record every layer's ε-rank, not only the last.
    #[serde(default)]
    pub per_layer: bool,
    /// How many leading eigenvalues to keep per record (0 = none).
    #[serde(default)]
    pub top_eigenvalues: usize,
}

fn default_rank_every() -> usize {
    100
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.rank_every == 0 {
            return Err(Error::Config("rank_every must be >= 1".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Snapshot taken at `iteration` before that iteration's update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub iteration: usize,
    pub loss: f64,
    pub eps_rank: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_rank_per_layer: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_eigenvalues: Option<Vec<f64>>,
    /// Elapsed time; kept out of files so they stay reproducible.
    #[serde(skip)]
    pub wall_ms: u64,
}

impl TrajectoryRecord {
    pub fn csv_header(layers: Option<usize>) -> String {
        let mut h = String::from("iteration,loss,eps_rank");
        for k in 1..=layers.unwrap_or(0) {
            h.push_str(&format!(",rank_layer{k}"));
        }
        h
    }

    /// Loss is written with 17 significant digits (`{:e}` round-trips).
    pub fn csv_row(&self) -> String {
        let mut s = format!("{},{:e},{}", self.iteration, self.loss, self.eps_rank);
        for r in self.eps_rank_per_layer.iter().flatten() {
            s.push_str(&format!(",{r}"));
        }
        s
    }

    pub fn json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Why a run stopped early.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAbort {
    pub iteration: usize,
    pub loss: f64,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub records: Vec<TrajectoryRecord>,
    /// `loss_history[i]` is the loss before update `i`.
    pub loss_history: Vec<f64>,
    pub final_network: Network,
    /// Loss and spectra after the last update (absent if aborted).
    pub final_loss: Option<f64>,
    pub final_spectra: Option<Vec<GramSpectrum>>,
    pub abort: Option<RunAbort>,
}

impl RunOutcome {
    pub fn initial_loss(&self) -> Option<f64> {
        self.loss_history.first().copied()
    }

    pub fn final_rank(&self) -> Option<usize> {
        self.final_spectra.as_ref().and_then(|s| s.last()).map(|s| s.eps_rank)
    }

    /// First iteration whose pre-update loss is `<= threshold`; `steps` if
    /// only the final loss qualifies.
    pub fn first_loss_below(&self, threshold: f64) -> Option<usize> {
        self.loss_history
            .iter()
            .position(|&l| l <= threshold)
            .or_else(|| match self.final_loss {
                Some(l) if l <= threshold => Some(self.loss_history.len()),
                _ => None,
            })
    }

    /// First recorded iteration with last-layer rank `>= rank`.
    pub fn first_rank_at_least(&self, rank: usize) -> Option<usize> {
        self.records
            .iter()
            .find(|r| r.eps_rank >= rank)
            .map(|r| r.iteration)
            .or_else(|| match self.final_rank() {
                Some(r) if r >= rank => Some(self.loss_history.len()),
                _ => None,
            })
    }
}

/// Trains `net` on `task` with full-batch updates. Samples are drawn from
/// `seed`. Every `rank_every` iterations (starting at 0) a record of the
/// pre-update loss and the ε-rank on `grid` is pushed and handed to `sink`.
/// A non-finite loss stops the run and is reported in [`RunOutcome::abort`].
pub fn train_run(
    net: &Network,
    task: &Task,
    opt: &OptimizerConfig,
    cfg: &TrainConfig,
    grid: &QuadratureGrid,
    seed: u64,
    mut sink: impl FnMut(&TrajectoryRecord),
) -> Result<RunOutcome> {
    cfg.validate()?;
    opt.validate()?;
    if grid.points.cols() != net.input_dim() || task.kind.input_dim() != net.input_dim() {
        return Err(Error::Shape(format!(
            "network input dimension {} does not match task {} / grid dimension {}",
            net.input_dim(),
            task.kind,
            grid.points.cols()
        )));
    }
    if task.kind.is_pde() && !net.activation().supports_second_derivatives() {
        return Err(Error::UnsupportedActivation(format!(
            "{} cannot be used for {}",
            net.activation(),
            task.kind
        )));
    }
    let samples = task.build_samples(seed)?;
    let objective = TaskLoss {
        task,
        samples: &samples,
    };
    let start = Instant::now();
    let mut net = net.clone();
    let mut params = net.to_flat();
    let mut grad = vec![0.0; params.len()];
    let mut state = OptimizerState::new(*opt, params.len());
    let mut records = Vec::new();
    let mut history = Vec::with_capacity(cfg.steps);

    let abort = |iteration: usize, loss: f64, detail: String, records, history, net| RunOutcome {
        records,
        loss_history: history,
        final_network: net,
        final_loss: None,
        final_spectra: None,
        abort: Some(RunAbort {
            iteration,
            loss,
            detail,
        }),
    };

    for i in 0..cfg.steps {
        let loss = match objective.loss(&net, Some(&mut grad)) {
            Ok(l) => l,
            Err(e @ Error::Numeric { .. }) => {
                return Ok(abort(i, f64::NAN, e.to_string(), records, history, net));
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            let detail = format!("non-finite loss or gradient at iteration {i}");
            return Ok(abort(i, loss, detail, records, history, net));
        }
        history.push(loss);
        if i % cfg.rank_every == 0 {
            let spectra = match layer_spectra(&net, grid, cfg.epsilon) {
                Ok(s) => s,
                Err(e @ Error::Numeric { .. }) => {
                    return Ok(abort(i, loss, e.to_string(), records, history, net));
                }
                Err(e) => return Err(e),
            };
            let rec = make_record(i, loss, &spectra, cfg, start);
            sink(&rec);
            records.push(rec);
        }
        state.step(&mut params, &grad);
        if let Err(e) = net.set_flat(&params) {
            return Ok(abort(i, loss, format!("parameter update failed: {e}"), records, history, net));
        }
    }

    let final_loss = match objective.loss(&net, None) {
        Ok(l) if l.is_finite() => l,
        Ok(l) => {
            let detail = "non-finite loss after the last update".to_string();
            return Ok(abort(cfg.steps, l, detail, records, history, net));
        }
        Err(e @ Error::Numeric { .. }) => {
            return Ok(abort(cfg.steps, f64::NAN, e.to_string(), records, history, net));
        }
        Err(e) => return Err(e),
    };
    let final_spectra = layer_spectra(&net, grid, cfg.epsilon)?;
    Ok(RunOutcome {
        records,
        loss_history: history,
        final_network: net,
        final_loss: Some(final_loss),
        final_spectra: Some(final_spectra),
        abort: None,
    })
}

fn make_record(
    iteration: usize,
    loss: f64,
    spectra: &[GramSpectrum],
    cfg: &TrainConfig,
    start: Instant,
) -> TrajectoryRecord {
    let last = spectra.last().expect("at least one hidden layer");
    TrajectoryRecord {
        iteration,
        loss,
        eps_rank: last.eps_rank,
        eps_rank_per_layer: cfg
            .per_layer
            .then(|| spectra.iter().map(|s| s.eps_rank).collect()),
        top_eigenvalues: (cfg.top_eigenvalues > 0).then(|| last.top(cfg.top_eigenvalues)),
        wall_ms: start.elapsed().as_millis() as u64,
    }
}

/// Centered moving average (window clipped at the ends).
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}
