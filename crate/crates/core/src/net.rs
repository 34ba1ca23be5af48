//! Fully connected networks `y_{k+1} = σ(W_k y_k + b_k)`, `y = β·y_L` with
//! uniform hidden width.
//!
//! Evaluation is batched and carries derivative *channels*: besides the value
//! of every neuron, the first derivatives along requested input directions and
//! selected second derivatives are pushed forward layer by layer. Rows of every
//! layer buffer are grouped channel-major (`row = channel * batch + sample`), so
//! each affine map is a single matrix product over all channels. The reverse
//! pass differentiates this forward computation, which gives exact parameter
//! gradients of losses built from values *and* input derivatives (PINN
//! residuals).
//!
//! Flat parameter order: `W_0` (row-major), `b_0`, `W_1`, `b_1`, …, `β`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, gemm, DenseMatrix, MatRef};

pub const CHECKPOINT_MAGIC: &str = "ERANK-NET";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
    Elu { alpha: f64 },
    Cosine,
    Sigmoid,
}

impl Activation {
    pub const DEFAULT_ELU_ALPHA: f64 = 1.0;

    /// `[σ(z), σ'(z), σ''(z), σ'''(z)]`.
    #[inline]
    pub fn derivatives(&self, z: f64) -> [f64; 4] {
        match *self {
            Activation::Tanh => {
                let t = z.tanh();
                let s = 1.0 - t * t;
                [t, s, -2.0 * t * s, s * (6.0 * t * t - 2.0)]
            }
            Activation::Relu => {
                if z > 0.0 {
                    [z, 1.0, 0.0, 0.0]
                } else {
                    [0.0, 0.0, 0.0, 0.0]
                }
            }
            Activation::Elu { alpha } => {
                if z > 0.0 {
                    [z, 1.0, 0.0, 0.0]
                } else {
                    let e = alpha * z.exp();
                    [e - alpha, e, e, e]
                }
            }
            Activation::Cosine => {
                let (s, c) = z.sin_cos();
                [c, -s, -c, s]
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-z).exp());
                let d1 = s * (1.0 - s);
                let d2 = d1 * (1.0 - 2.0 * s);
                let d3 = d2 * (1.0 - 2.0 * s) - 2.0 * d1 * d1;
                [s, d1, d2, d3]
            }
        }
    }

    #[inline]
    pub fn eval(&self, z: f64) -> f64 {
        match *self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Elu { alpha } => {
                if z > 0.0 {
                    z
                } else {
                    alpha * (z.exp() - 1.0)
                }
            }
            Activation::Cosine => z.cos(),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    pub fn supports_second_derivatives(&self) -> bool {
        !matches!(self, Activation::Relu)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Elu { .. } => "elu",
            Activation::Cosine => "cosine",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Elu { alpha } => write!(f, "elu({alpha})"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "elu" => Ok(Activation::Elu {
                alpha: Activation::DEFAULT_ELU_ALPHA,
            }),
            "cosine" | "cos" => Ok(Activation::Cosine),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::Parse(format!(
                "unknown activation '{other}' (expected tanh, relu, elu, cosine, sigmoid)"
            ))),
        }
    }
}

/// Which input derivatives to carry alongside the value.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DerivRequest {
    pub first: Vec<usize>,
    pub second: Vec<(usize, usize)>,
}

impl DerivRequest {
    pub fn value_only() -> Self {
        Self::default()
    }

    pub fn new(first: &[usize], second: &[(usize, usize)]) -> Self {
        Self {
            first: first.to_vec(),
            second: second.to_vec(),
        }
    }
}

/// Channel layout resolved from a [`DerivRequest`].
#[derive(Debug, Clone, PartialEq, Eq)]
struct ChannelPlan {
    /// Input directions with a tangent channel (sorted, unique).
    tangents: Vec<usize>,
    /// Second-derivative pairs `(i, j)` with `i <= j` (sorted, unique).
    seconds: Vec<(usize, usize)>,
    /// Tangent-channel positions of each pair's members.
    pair_channels: Vec<(usize, usize)>,
}

impl ChannelPlan {
    fn new(req: &DerivRequest, input_dim: usize) -> Result<Self> {
        let mut seconds: Vec<(usize, usize)> = req
            .second
            .iter()
            .map(|&(i, j)| (i.min(j), i.max(j)))
            .collect();
        seconds.sort_unstable();
        seconds.dedup();
        let mut tangents: Vec<usize> = req.first.clone();
        for &(i, j) in &seconds {
            tangents.push(i);
            tangents.push(j);
        }
        tangents.sort_unstable();
        tangents.dedup();
        if let Some(&bad) = tangents.iter().find(|&&i| i >= input_dim) {
            return Err(Error::Shape(format!(
                "derivative direction {bad} out of range for input dimension {input_dim}"
            )));
        }
        let pos = |d: usize| tangents.binary_search(&d).expect("direction present");
        let pair_channels = seconds.iter().map(|&(i, j)| (pos(i), pos(j))).collect();
        Ok(Self {
            tangents,
            seconds,
            pair_channels,
        })
    }

    fn channels(&self) -> usize {
        1 + self.tangents.len() + self.seconds.len()
    }

    fn tangent_channel(&self, dir: usize) -> Option<usize> {
        self.tangents.binary_search(&dir).ok().map(|p| 1 + p)
    }

    fn second_channel(&self, i: usize, j: usize) -> Option<usize> {
        let key = (i.min(j), i.max(j));
        self.seconds
            .binary_search(&key)
            .ok()
            .map(|p| 1 + self.tangents.len() + p)
    }
}

/// Per-sample scalars for every channel of a batch: the network output and
/// its requested input derivatives, or adjoints of those quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelData {
    batch: usize,
    plan: ChannelPlan,
    data: Vec<f64>,
}

impl ChannelData {
    pub fn batch(&self) -> usize {
        self.batch
    }

    fn block(&self, ch: usize) -> &[f64] {
        &self.data[ch * self.batch..(ch + 1) * self.batch]
    }

    fn block_mut(&mut self, ch: usize) -> &mut [f64] {
        &mut self.data[ch * self.batch..(ch + 1) * self.batch]
    }

    pub fn value(&self) -> &[f64] {
        self.block(0)
    }

    pub fn value_mut(&mut self) -> &mut [f64] {
        self.block_mut(0)
    }

    /// ∂y/∂x_dir for every sample, if that direction was requested.
    pub fn first(&self, dir: usize) -> Option<&[f64]> {
        self.plan.tangent_channel(dir).map(|c| self.block(c))
    }

    pub fn first_mut(&mut self, dir: usize) -> Option<&mut [f64]> {
        let c = self.plan.tangent_channel(dir)?;
        Some(self.block_mut(c))
    }

    /// ∂²y/∂x_i∂x_j for every sample, if that pair was requested.
    pub fn second(&self, i: usize, j: usize) -> Option<&[f64]> {
        self.plan.second_channel(i, j).map(|c| self.block(c))
    }

    pub fn second_mut(&mut self, i: usize, j: usize) -> Option<&mut [f64]> {
        let c = self.plan.second_channel(i, j)?;
        Some(self.block_mut(c))
    }

    /// Zero-filled data with the same layout, used for adjoints.
    pub fn zeros_like(&self) -> Self {
        Self {
            batch: self.batch,
            plan: self.plan.clone(),
            data: vec![0.0; self.data.len()],
        }
    }
}

struct LayerTape {
    input: Vec<f64>,
    pre: Vec<f64>,
    d1: Vec<f64>,
    d2: Vec<f64>,
    d3: Vec<f64>,
}

/// Intermediate buffers of a batched evaluation, consumed by
/// [`Network::backprop`].
pub struct Tape {
    batch: usize,
    plan: ChannelPlan,
    layers: Vec<LayerTape>,
    last: Vec<f64>,
}

/// Layer outputs of a single forward evaluation; `layer_outputs[0]` is the input.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub layer_outputs: Vec<Vec<f64>>,
    pub output: f64,
}

/// Value, gradient and selected second derivatives of the network output at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct InputDerivatives {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub second: Vec<((usize, usize), f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_dim: usize,
    depth: usize,
    width: usize,
    activation: Activation,
    weights: Vec<DenseMatrix>,
    biases: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl Network {
    /// All-zero network with `depth` hidden layers of `width` neurons.
    pub fn zeros(input_dim: usize, depth: usize, width: usize, activation: Activation) -> Result<Self> {
        if input_dim == 0 || depth == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "network dimensions must be positive (d={input_dim}, L={depth}, n={width})"
            )));
        }
        if let Activation::Elu { alpha } = activation {
            if !alpha.is_finite() {
                return Err(Error::Domain("elu alpha must be finite".into()));
            }
        }
        let weights = (0..depth)
            .map(|k| DenseMatrix::zeros(width, if k == 0 { input_dim } else { width }))
            .collect();
        Ok(Self {
            input_dim,
            depth,
            width,
            activation,
            weights,
            biases: vec![vec![0.0; width]; depth],
            output: vec![0.0; width],
        })
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    #[inline]
    pub fn depth(&self) -> usize {
        self.depth
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self, k: usize) -> &DenseMatrix {
        &self.weights[k]
    }

    pub fn biases(&self, k: usize) -> &[f64] {
        &self.biases[k]
    }

    pub fn output_weights(&self) -> &[f64] {
        &self.output
    }

    /// Replaces the affine map of hidden layer `k` (0-based, producing `y_{k+1}`).
    pub fn set_layer(&mut self, k: usize, weights: DenseMatrix, biases: Vec<f64>) -> Result<()> {
        if k >= self.depth {
            return Err(Error::Domain(format!("layer {k} out of range for depth {}", self.depth)));
        }
        if weights.shape() != self.weights[k].shape() || biases.len() != self.width {
            return Err(Error::Shape(format!(
                "layer {k} expects {:?} weights and {} biases",
                self.weights[k].shape(),
                self.width
            )));
        }
        if biases.iter().any(|b| !b.is_finite()) {
            return Err(Error::Domain("non-finite bias".into()));
        }
        self.weights[k] = weights;
        self.biases[k] = biases;
        Ok(())
    }

    pub fn set_output_weights(&mut self, beta: Vec<f64>) -> Result<()> {
        if beta.len() != self.width {
            return Err(Error::Shape(format!(
                "output weights need length {}, got {}",
                self.width,
                beta.len()
            )));
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Domain("non-finite output weight".into()));
        }
        self.output = beta;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let n = self.width;
        n * self.input_dim + n + (self.depth - 1) * (n * n + n) + n
    }

    /// Offsets of `W_k` and `b_k` in the flat parameter vector.
    pub fn layer_offsets(&self, k: usize) -> (usize, usize) {
        let n = self.width;
        let w = if k == 0 {
            0
        } else {
            n * self.input_dim + n + (k - 1) * (n * n + n)
        };
        (w, w + self.weights[k].rows() * self.weights[k].cols())
    }

    fn output_offset(&self) -> usize {
        self.param_count() - self.width
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for k in 0..self.depth {
            out.extend_from_slice(self.weights[k].as_slice());
            out.extend_from_slice(&self.biases[k]);
        }
        out.extend_from_slice(&self.output);
        out
    }

    pub fn set_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        if let Some(pos) = params.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite parameter at index {pos}")));
        }
        let mut at = 0;
        for k in 0..self.depth {
            let len = self.weights[k].rows() * self.weights[k].cols();
            self.weights[k]
                .as_mut_slice()
                .copy_from_slice(&params[at..at + len]);
            at += len;
            self.biases[k].copy_from_slice(&params[at..at + self.width]);
            at += self.width;
        }
        self.output.copy_from_slice(&params[at..]);
        Ok(())
    }

    /// Single-point evaluation keeping every layer output.
    pub fn forward(&self, x: &[f64]) -> Result<EvalRecord> {
        if x.len() != self.input_dim {
            return Err(Error::Shape(format!(
                "input of length {} for a network with d={}",
                x.len(),
                self.input_dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite input".into()));
        }
        let mut layer_outputs = vec![x.to_vec()];
        for k in 0..self.depth {
            let prev = layer_outputs.last().expect("non-empty");
            let w = &self.weights[k];
            let next: Vec<f64> = (0..self.width)
                .map(|j| self.activation.eval(dot(w.row(j), prev) + self.biases[k][j]))
                .collect();
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    layer: k + 1,
                    detail: "forward activation".into(),
                });
            }
            layer_outputs.push(next);
        }
        let output = dot(&self.output, layer_outputs.last().expect("non-empty"));
        Ok(EvalRecord {
            layer_outputs,
            output,
        })
    }

    /// Outputs of every hidden layer at each point: `result[k-1]` is the m×n
    /// matrix of layer `k` neuron values.
    pub fn all_layer_features(&self, points: &DenseMatrix) -> Result<Vec<DenseMatrix>> {
        self.check_points(points)?;
        let plan = ChannelPlan::new(&DerivRequest::value_only(), self.input_dim)?;
        let mut outs = Vec::with_capacity(self.depth);
        let (last, _) = self.run_forward(points, &plan, false, Some(&mut outs))?;
        outs.push(last);
        Ok(outs
            .into_iter()
            .map(|d| DenseMatrix::from_raw(points.rows(), self.width, d))
            .collect())
    }

    /// `D[i][j] = φ_j^{(k)}(x_i)` for hidden layer `k` in `1..=L`.
    pub fn layer_features(&self, points: &DenseMatrix, k: usize) -> Result<DenseMatrix> {
        if k == 0 || k > self.depth {
            return Err(Error::Domain(format!(
                "layer index {k} outside 1..={}",
                self.depth
            )));
        }
        let mut all = self.all_layer_features(points)?;
        Ok(all.swap_remove(k - 1))
    }

    /// Batched outputs with the requested input derivatives.
    pub fn eval_batch(&self, points: &DenseMatrix, req: &DerivRequest) -> Result<ChannelData> {
        let plan = self.plan_for(points, req)?;
        let (last, _) = self.run_forward(points, &plan, false, None)?;
        self.contract_output(points.rows(), plan, &last)
    }

    /// Like [`eval_batch`](Self::eval_batch) but keeps what the reverse pass needs.
    pub fn eval_with_tape(&self, points: &DenseMatrix, req: &DerivRequest) -> Result<(ChannelData, Tape)> {
        let plan = self.plan_for(points, req)?;
        let (last, layers) = self.run_forward(points, &plan, true, None)?;
        let out = self.contract_output(points.rows(), plan.clone(), &last)?;
        Ok((
            out,
            Tape {
                batch: points.rows(),
                plan,
                layers,
                last,
            },
        ))
    }

    /// Adds `Σ_s Σ_c adjoint[c][s] · ∂out[c][s]/∂θ` into `grad` (canonical order).
    pub fn backprop(&self, tape: &Tape, adjoint: &ChannelData, grad: &mut [f64]) -> Result<()> {
        if grad.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "gradient buffer of length {} for {} parameters",
                grad.len(),
                self.param_count()
            )));
        }
        if adjoint.plan != tape.plan || adjoint.batch != tape.batch {
            return Err(Error::Shape("adjoint layout differs from the tape".into()));
        }
        let b = tape.batch;
        let plan = &tape.plan;
        let c = plan.channels();
        let r = b * c;
        let n = self.width;
        let nt = plan.tangents.len();

        // output layer: y[row] = β · y_L[row]
        let out_off = self.output_offset();
        {
            let g = &mut grad[out_off..];
            for row in 0..r {
                let a = adjoint.data[row];
                if a != 0.0 {
                    for (gj, yj) in g.iter_mut().zip(&tape.last[row * n..(row + 1) * n]) {
                        *gj += a * yj;
                    }
                }
            }
        }
        let mut abar = vec![0.0; r * n];
        for row in 0..r {
            let a = adjoint.data[row];
            for (dst, beta) in abar[row * n..(row + 1) * n].iter_mut().zip(&self.output) {
                *dst = a * beta;
            }
        }

        let mut zbar = vec![0.0; r * n];
        for k in (0..self.depth).rev() {
            let lt = &tape.layers[k];
            let n_in = self.weights[k].cols();
            zbar.iter_mut().for_each(|v| *v = 0.0);
            let blk = |ch: usize, s: usize| (ch * b + s) * n;
            for s in 0..b {
                let vrow = blk(0, s);
                for j in 0..n {
                    let e = s * n + j;
                    let (d1, d2, d3) = (lt.d1[e], lt.d2[e], lt.d3[e]);
                    let mut zv = abar[vrow + j] * d1;
                    for tc in 0..nt {
                        let row = blk(1 + tc, s);
                        zv += abar[row + j] * d2 * lt.pre[row + j];
                        zbar[row + j] = abar[row + j] * d1;
                    }
                    for (p, &(ci, cj)) in plan.pair_channels.iter().enumerate() {
                        let row = blk(1 + nt + p, s);
                        let ap = abar[row + j];
                        let ti = lt.pre[blk(1 + ci, s) + j];
                        let tj = lt.pre[blk(1 + cj, s) + j];
                        zv += ap * (d3 * ti * tj + d2 * lt.pre[row + j]);
                        zbar[blk(1 + ci, s) + j] += ap * d2 * tj;
                        zbar[blk(1 + cj, s) + j] += ap * d2 * ti;
                        zbar[row + j] = ap * d1;
                    }
                    zbar[vrow + j] = zv;
                }
            }
            let (w_off, b_off) = self.layer_offsets(k);
            gemm(
                n,
                r,
                n_in,
                1.0,
                MatRef::transposed(&zbar, n),
                MatRef::row_major(&lt.input, n_in),
                1.0,
                &mut grad[w_off..w_off + n * n_in],
            );
            let gb = &mut grad[b_off..b_off + n];
            for s in 0..b {
                for (g, z) in gb.iter_mut().zip(&zbar[s * n..(s + 1) * n]) {
                    *g += z;
                }
            }
            if k > 0 {
                gemm(
                    r,
                    n,
                    n_in,
                    1.0,
                    MatRef::row_major(&zbar, n),
                    MatRef::row_major(self.weights[k].as_slice(), n_in),
                    0.0,
                    &mut abar,
                );
            }
        }
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                layer: 0,
                detail: "non-finite parameter gradient".into(),
            });
        }
        Ok(())
    }

    /// Output value, full input gradient and the requested second derivatives at `x`.
    pub fn input_derivatives(&self, x: &[f64], pairs: &[(usize, usize)]) -> Result<InputDerivatives> {
        let pts = DenseMatrix::new(1, x.len(), x.to_vec())?;
        let all: Vec<usize> = (0..self.input_dim).collect();
        let out = self.eval_batch(&pts, &DerivRequest::new(&all, pairs))?;
        Ok(InputDerivatives {
            value: out.value()[0],
            gradient: all.iter().map(|&i| out.first(i).expect("requested")[0]).collect(),
            second: pairs
                .iter()
                .map(|&(i, j)| ((i, j), out.second(i, j).expect("requested")[0]))
                .collect(),
        })
    }

    fn check_points(&self, points: &DenseMatrix) -> Result<()> {
        if points.cols() != self.input_dim {
            return Err(Error::Shape(format!(
                "points have dimension {}, network expects {}",
                points.cols(),
                self.input_dim
            )));
        }
        Ok(())
    }

    fn plan_for(&self, points: &DenseMatrix, req: &DerivRequest) -> Result<ChannelPlan> {
        self.check_points(points)?;
        if !req.second.is_empty() && !self.activation.supports_second_derivatives() {
            return Err(Error::UnsupportedActivation(self.activation.to_string()));
        }
        ChannelPlan::new(req, self.input_dim)
    }

    fn contract_output(&self, batch: usize, plan: ChannelPlan, last: &[f64]) -> Result<ChannelData> {
        let n = self.width;
        let data: Vec<f64> = last.chunks_exact(n).map(|row| dot(row, &self.output)).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                layer: self.depth + 1,
                detail: "network output".into(),
            });
        }
        Ok(ChannelData { batch, plan, data })
    }

    fn run_forward(
        &self,
        points: &DenseMatrix,
        plan: &ChannelPlan,
        keep: bool,
        mut hidden: Option<&mut Vec<Vec<f64>>>,
    ) -> Result<(Vec<f64>, Vec<LayerTape>)> {
        let b = points.rows();
        let d = self.input_dim;
        let n = self.width;
        let c = plan.channels();
        let r = b * c;
        let nt = plan.tangents.len();

        let mut a = vec![0.0; r * d];
        a[..b * d].copy_from_slice(points.as_slice());
        for (tc, &dir) in plan.tangents.iter().enumerate() {
            for s in 0..b {
                a[((1 + tc) * b + s) * d + dir] = 1.0;
            }
        }

        let mut tapes = Vec::with_capacity(if keep { self.depth } else { 0 });
        for k in 0..self.depth {
            let n_in = if k == 0 { d } else { n };
            let mut pre = vec![0.0; r * n];
            gemm(
                r,
                n_in,
                n,
                1.0,
                MatRef::row_major(&a, n_in),
                MatRef::transposed(self.weights[k].as_slice(), n_in),
                0.0,
                &mut pre,
            );
            let bias = &self.biases[k];
            for row in pre[..b * n].chunks_exact_mut(n) {
                for (z, bj) in row.iter_mut().zip(bias) {
                    *z += bj;
                }
            }
            let mut out = vec![0.0; r * n];
            let mut d1 = vec![0.0; b * n];
            let mut d2 = vec![0.0; b * n];
            let mut d3 = vec![0.0; b * n];
            for e in 0..b * n {
                let [f0, f1, f2, f3] = self.activation.derivatives(pre[e]);
                out[e] = f0;
                d1[e] = f1;
                d2[e] = f2;
                d3[e] = f3;
            }
            for tc in 0..nt {
                let base = (1 + tc) * b * n;
                for e in 0..b * n {
                    out[base + e] = d1[e] * pre[base + e];
                }
            }
            for (p, &(ci, cj)) in plan.pair_channels.iter().enumerate() {
                let base = (1 + nt + p) * b * n;
                let bi = (1 + ci) * b * n;
                let bj = (1 + cj) * b * n;
                for e in 0..b * n {
                    out[base + e] = d2[e] * pre[bi + e] * pre[bj + e] + d1[e] * pre[base + e];
                }
            }
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    layer: k + 1,
                    detail: "forward activation".into(),
                });
            }
            let input = std::mem::replace(&mut a, out);
            if keep {
                tapes.push(LayerTape {
                    input,
                    pre,
                    d1,
                    d2,
                    d3,
                });
            }
            if k + 1 < self.depth {
                if let Some(h) = hidden.as_deref_mut() {
                    h.push(a[..b * n].to_vec());
                }
            }
        }
        Ok((a, tapes))
    }

    /// Text checkpoint: magic line, dimensions, activation, then the flat
    /// parameters one per line in shortest round-trip form.
    pub fn to_checkpoint(&self) -> String {
        let mut s = format!(
            "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\ninput_dim {}\ndepth {}\nwidth {}\n",
            self.input_dim, self.depth, self.width
        );
        match self.activation {
            Activation::Elu { alpha } => s.push_str(&format!("activation elu {alpha:e}\n")),
            other => s.push_str(&format!("activation {}\n", other.name())),
        }
        let flat = self.to_flat();
        s.push_str(&format!("params {}\n", flat.len()));
        for v in flat {
            s.push_str(&format!("{v:e}\n"));
        }
        s
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let lines: Vec<Vec<&str>> = text.lines().map(|l| l.split_whitespace().collect()).collect();
        let line = |i: usize, what: &str| -> Result<&Vec<&str>> {
            lines
                .get(i)
                .ok_or_else(|| Error::Parse(format!("checkpoint truncated before {what}")))
        };
        let header = line(0, "header")?;
        if header.len() != 2 || header[0] != CHECKPOINT_MAGIC {
            return Err(Error::Parse(format!("line 1: missing {CHECKPOINT_MAGIC} header")));
        }
        if header[1] != CHECKPOINT_VERSION.to_string() {
            return Err(Error::Parse(format!("line 1: unsupported version {}", header[1])));
        }
        let field = |i: usize, name: &str| -> Result<usize> {
            match line(i, name)?.as_slice() {
                [key, v] if *key == name => v
                    .parse()
                    .map_err(|_| Error::Parse(format!("line {}: bad {name} value '{v}'", i + 1))),
                _ => Err(Error::Parse(format!("line {}: expected '{name} <count>'", i + 1))),
            }
        };
        let input_dim = field(1, "input_dim")?;
        let depth = field(2, "depth")?;
        let width = field(3, "width")?;
        let activation = match line(4, "activation")?.as_slice() {
            ["activation", "elu", alpha] => Activation::Elu {
                alpha: alpha
                    .parse()
                    .map_err(|_| Error::Parse("line 5: bad elu alpha".into()))?,
            },
            ["activation", name] => name.parse()?,
            _ => return Err(Error::Parse("line 5: expected 'activation <name>'".into())),
        };
        let count = field(5, "params")?;
        let mut net = Network::zeros(input_dim, depth, width, activation)?;
        if count != net.param_count() {
            return Err(Error::Parse(format!(
                "parameter count {count} does not match dimensions ({})",
                net.param_count()
            )));
        }
        let flat = (0..count)
            .map(|k| {
                let i = 6 + k;
                line(i, "parameter")?
                    .first()
                    .and_then(|p| p.parse::<f64>().ok())
                    .ok_or_else(|| Error::Parse(format!("line {}: bad parameter value", i + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        net.set_flat(&flat)?;
        Ok(net)
    }
}

/// A scalar loss of the network parameters.
pub trait Objective {
    /// Loss at the current parameters. When `grad` is given it is overwritten
    /// with the gradient in canonical flat order.
    fn loss(&self, net: &Network, grad: Option<&mut [f64]>) -> Result<f64>;
}

/// Exact reverse-mode gradient of `loss` at the network's parameters.
pub fn param_gradient(net: &Network, loss: &dyn Objective) -> Result<Vec<f64>> {
    let mut g = vec![0.0; net.param_count()];
    loss.loss(net, Some(&mut g))?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_net(d: usize, depth: usize, width: usize, act: Activation, seed: u64, scale: f64) -> Network {
        let mut net = Network::zeros(d, depth, width, act).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<f64> = (0..net.param_count())
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        net.set_flat(&p).unwrap();
        net
    }

    /// Sum over samples of `c_v y + Σ c_i ∂_i y + Σ c_p ∂²_p y`, a loss that
    /// touches every channel linearly.
    struct ChannelProbe {
        points: DenseMatrix,
        req: DerivRequest,
        coef: Vec<f64>,
    }

    impl Objective for ChannelProbe {
        fn loss(&self, net: &Network, grad: Option<&mut [f64]>) -> Result<f64> {
            let (out, tape) = net.eval_with_tape(&self.points, &self.req)?;
            let loss: f64 = out.data.iter().zip(&self.coef).map(|(a, b)| a * b).sum::<f64>()
                + 0.5 * out.value().iter().map(|v| v * v).sum::<f64>();
            if let Some(g) = grad {
                g.iter_mut().for_each(|v| *v = 0.0);
                let mut adj = out.zeros_like();
                adj.data.copy_from_slice(&self.coef);
                for (a, v) in adj.value_mut().iter_mut().zip(out.value()) {
                    *a += v;
                }
                net.backprop(&tape, &adj, g)?;
            }
            Ok(loss)
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Network::zeros(2, 3, 4, Activation::Tanh).unwrap();
        let rec = net.forward(&[0.3, -0.7]).unwrap();
        assert_eq!(rec.output, 0.0);
        assert!(rec.layer_outputs[1..].iter().all(|y| y.iter().all(|&v| v == 0.0)));
        let pts = DenseMatrix::from_rows(&[vec![0.1, 0.2], vec![0.5, -1.0]]).unwrap();
        let d = net.layer_features(&pts, 3).unwrap();
        assert!(d.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_tanh_neuron_limits() {
        let mut net = Network::zeros(1, 1, 1, Activation::Tanh).unwrap();
        net.set_flat(&[1.0, 0.0, 1.0]).unwrap();
        assert_eq!(net.forward(&[0.0]).unwrap().output, 0.0);
        assert!((net.forward(&[40.0]).unwrap().output - 1.0).abs() < 1e-15);
    }

    #[test]
    fn shape_and_range_errors() {
        let net = Network::zeros(2, 2, 3, Activation::Tanh).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::Shape(_))));
        let pts = DenseMatrix::zeros(4, 2);
        assert!(matches!(net.layer_features(&pts, 0), Err(Error::Domain(_))));
        assert!(matches!(net.layer_features(&pts, 3), Err(Error::Domain(_))));
        let relu = Network::zeros(2, 2, 3, Activation::Relu).unwrap();
        assert!(matches!(
            relu.input_derivatives(&[0.1, 0.2], &[(0, 0)]),
            Err(Error::UnsupportedActivation(_))
        ));
        assert!(relu.input_derivatives(&[0.1, 0.2], &[]).is_ok());
    }

    #[test]
    fn features_match_forward_and_output() {
        let net = random_net(2, 3, 5, Activation::Tanh, 7, 1.0);
        let pts = DenseMatrix::from_rows(&[vec![0.1, 0.2], vec![0.1, 0.2], vec![-0.4, 0.9]]).unwrap();
        let feats = net.all_layer_features(&pts).unwrap();
        for i in 0..pts.rows() {
            let rec = net.forward(pts.row(i)).unwrap();
            for k in 1..=3 {
                for j in 0..5 {
                    assert_abs_diff_eq!(feats[k - 1][(i, j)], rec.layer_outputs[k][j], epsilon = 1e-14);
                }
            }
            let y: f64 = dot(feats[2].row(i), net.output_weights());
            assert_abs_diff_eq!(y, rec.output, epsilon = 1e-12);
        }
        assert_eq!(feats[1].row(0), feats[1].row(1));
    }

    #[test]
    fn one_parameter_gradient_closed_form() {
        // y = β tanh(w x), loss (y - f)^2 ; d/dw = 2 (y - f) β x (1 - tanh²(w x))
        struct Sq(f64, f64);
        impl Objective for Sq {
            fn loss(&self, net: &Network, grad: Option<&mut [f64]>) -> Result<f64> {
                let pts = DenseMatrix::new(1, 1, vec![self.0])?;
                let (out, tape) = net.eval_with_tape(&pts, &DerivRequest::value_only())?;
                let r = out.value()[0] - self.1;
                if let Some(g) = grad {
                    g.iter_mut().for_each(|v| *v = 0.0);
                    let mut adj = out.zeros_like();
                    adj.value_mut()[0] = 2.0 * r;
                    net.backprop(&tape, &adj, g)?;
                }
                Ok(r * r)
            }
        }
        let (w, beta, x, f) = (0.7, 1.3, 0.4, 0.2);
        let mut net = Network::zeros(1, 1, 1, Activation::Tanh).unwrap();
        net.set_flat(&[w, 0.0, beta]).unwrap();
        let g = param_gradient(&net, &Sq(x, f)).unwrap();
        let t = (w * x).tanh();
        let r = beta * t - f;
        assert_abs_diff_eq!(g[0], 2.0 * r * beta * x * (1.0 - t * t), epsilon = 1e-14);
        assert_abs_diff_eq!(g[1], 2.0 * r * beta * (1.0 - t * t), epsilon = 1e-14);
        assert_abs_diff_eq!(g[2], 2.0 * r * t, epsilon = 1e-14);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        struct Const;
        impl Objective for Const {
            fn loss(&self, _: &Network, grad: Option<&mut [f64]>) -> Result<f64> {
                if let Some(g) = grad {
                    g.iter_mut().for_each(|v| *v = 0.0);
                }
                Ok(3.0)
            }
        }
        let net = random_net(2, 2, 4, Activation::Tanh, 1, 1.0);
        assert!(param_gradient(&net, &Const).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn second_derivative_of_tanh() {
        let mut net = Network::zeros(1, 1, 1, Activation::Tanh).unwrap();
        net.set_flat(&[1.0, 0.0, 1.0]).unwrap();
        let x = 0.3f64;
        let d = net.input_derivatives(&[x], &[(0, 0)]).unwrap();
        let t = x.tanh();
        assert_abs_diff_eq!(d.value, t, epsilon = 1e-15);
        assert_abs_diff_eq!(d.gradient[0], 1.0 - t * t, epsilon = 1e-15);
        assert_abs_diff_eq!(d.second[0].1, -2.0 * t * (1.0 - t * t), epsilon = 1e-15);
    }

    #[test]
    fn linear_regime_gradient() {
        let net = random_net(3, 2, 6, Activation::Tanh, 3, 1e-3);
        let d = net.input_derivatives(&[0.0, 0.0, 0.0], &[]).unwrap();
        // βᵀ W_1 W_0 to first order
        let w0 = net.weights(0);
        let w1 = net.weights(1);
        let prod = w1.matmul(w0).unwrap();
        for i in 0..3 {
            let lin: f64 = (0..6).map(|j| net.output_weights()[j] * prod[(j, i)]).sum();
            assert!((d.gradient[i] - lin).abs() <= 1e-6 * lin.abs().max(1e-9));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = random_net(2, 3, 4, Activation::Elu { alpha: 0.5 }, 9, 1.0);
        let text = net.to_checkpoint();
        assert!(text.starts_with("ERANK-NET 1\n"));
        let back = Network::from_checkpoint(&text).unwrap();
        assert_eq!(back, net);
        assert!(Network::from_checkpoint("bogus").is_err());
        let truncated: String = text.lines().take(10).collect::<Vec<_>>().join("\n");
        assert!(Network::from_checkpoint(&truncated).is_err());
    }

    fn fd_check(act: Activation, d: usize, depth: usize, width: usize, seed: u64) {
        let net = random_net(d, depth, width, act, seed, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let pts = DenseMatrix::from_fn(3, d, |_, _| rng.random_range(-1.0..1.0)).unwrap();
        let mut second = vec![];
        for i in 0..d {
            for j in i..d {
                second.push((i, j));
            }
        }
        let req = DerivRequest::new(&[0], &second);
        let probe_len = {
            let out = net.eval_batch(&pts, &req).unwrap();
            out.data.len()
        };
        let coef: Vec<f64> = (0..probe_len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let probe = ChannelProbe {
            points: pts,
            req,
            coef,
        };
        let g = param_gradient(&net, &probe).unwrap();
        let base = net.to_flat();
        let h = 1e-5;
        for (i, &gi) in g.iter().enumerate() {
            let mut p = base.clone();
            p[i] += h;
            let mut np = net.clone();
            np.set_flat(&p).unwrap();
            let lp = probe.loss(&np, None).unwrap();
            p[i] -= 2.0 * h;
            np.set_flat(&p).unwrap();
            let lm = probe.loss(&np, None).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - gi).abs() / fd.abs().max(gi.abs()).max(1e-8);
            assert!(
                rel <= 1e-4 || (fd - gi).abs() < 1e-9,
                "{act} param {i}: analytic {gi} vs fd {fd}"
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (s, act) in [
            Activation::Tanh,
            Activation::Sigmoid,
            Activation::Cosine,
            Activation::Elu { alpha: 1.0 },
        ]
        .into_iter()
        .enumerate()
        {
            fd_check(act, 2, 2, 4, s as u64);
            fd_check(act, 3, 3, 3, 10 + s as u64);
        }
    }
}
