//! Parameter initializers: Xavier-style uniform, the deterministic 1D grid
//! layer, and uniform distribution initialization (UDI) of the first layer.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gram::BoxDomain;
use crate::linalg::DenseMatrix;
use crate::net::{Activation, Network};

// Stream ids. Layer k of the Xavier draw uses stream k, β uses stream L.
const UDI_STREAM: u64 = 1 << 32;

fn layer_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Every weight, bias and output weight drawn i.i.d. from `U(-1/√n, 1/√n)`,
/// `n` the hidden width. Each layer draws from its own stream of `seed`.
pub fn xavier_init(net: &Network, seed: u64) -> Result<Network> {
    let mut out = net.clone();
    let n = net.width();
    let bound = 1.0 / (n as f64).sqrt();
    for k in 0..net.depth() {
        let fan_in = if k == 0 { net.input_dim() } else { n };
        let mut rng = layer_rng(seed, k as u64);
        let w = DenseMatrix::from_fn(n, fan_in, |_, _| rng.random_range(-bound..=bound))?;
        let b = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        out.set_layer(k, w, b)?;
    }
    let mut rng = layer_rng(seed, net.depth() as u64);
    out.set_output_weights((0..n).map(|_| rng.random_range(-bound..=bound)).collect())?;
    Ok(out)
}

/// Nodes `x_j = -1 + 2(j-1)/n`, `j = 1..n`.
pub fn grid_nodes(n: usize) -> Vec<f64> {
    (0..n).map(|j| -1.0 + 2.0 * j as f64 / n as f64).collect()
}

/// Sets the first layer so that neuron `j` is `tanh(n/2 · (x - x_j))`.
/// Deeper layers and β are left as they are.
pub fn grid_init_1d(net: &Network) -> Result<Network> {
    if net.input_dim() != 1 {
        return Err(Error::Domain(format!(
            "grid initialization needs a 1-D input, got d = {}",
            net.input_dim()
        )));
    }
    if net.activation() != Activation::Tanh {
        return Err(Error::UnsupportedActivation(format!(
            "grid initialization is defined for tanh, not {}",
            net.activation()
        )));
    }
    let n = net.width();
    let s = n as f64 / 2.0;
    let w = DenseMatrix::new(n, 1, vec![s; n])?;
    let b = grid_nodes(n).into_iter().map(|x| -s * x).collect();
    let mut out = net.clone();
    out.set_layer(0, w, b)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UdiConfig {
    pub gamma: f64,
    pub radius: f64,
    pub seed: u64,
}

impl UdiConfig {
    pub fn new(gamma: f64, radius: f64, seed: u64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Config(format!("UDI gamma must be > 0, got {gamma}")));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::Config(format!("UDI radius must be > 0, got {radius}")));
        }
        Ok(Self { gamma, radius, seed })
    }

    /// `R = max_{x∈Ω} ‖x‖₂`.
    pub fn for_domain(gamma: f64, domain: &BoxDomain, seed: u64) -> Result<Self> {
        Self::new(gamma, domain.max_norm(), seed)
    }
}

/// A point on the unit sphere `S^{d-1}` from a normalized Gaussian draw.
pub fn unit_direction(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm >= 1e-12 {
            return g.into_iter().map(|v| v / norm).collect();
        }
    }
}

/// First-layer neurons `tanh(γ(a_j·x + b_j))` with `a_j` uniform on the
/// sphere and `b_j ~ U(0, R)`. Deeper layers and β are left as they are.
pub fn udi_init(net: &Network, cfg: &UdiConfig) -> Result<Network> {
    if net.activation() != Activation::Tanh {
        return Err(Error::UnsupportedActivation(format!(
            "UDI is defined for tanh, not {}",
            net.activation()
        )));
    }
    let (n, d) = (net.width(), net.input_dim());
    let mut rng = layer_rng(cfg.seed, UDI_STREAM);
    let mut w = Vec::with_capacity(n * d);
    let mut b = Vec::with_capacity(n);
    for _ in 0..n {
        w.extend(unit_direction(&mut rng, d).into_iter().map(|v| cfg.gamma * v));
        b.push(cfg.gamma * rng.random_range(0.0..=cfg.radius));
    }
    let mut out = net.clone();
    out.set_layer(0, DenseMatrix::new(n, d, w)?, b)?;
    Ok(out)
}

/// Initializer choice as it appears in experiment configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Initializer {
    Xavier,
    Grid,
    Udi {
        gamma: f64,
        /// Defaults to the largest norm of a point in the domain.
        #[serde(default)]
        radius: Option<f64>,
    },
}

impl Initializer {
    pub fn name(&self) -> &'static str {
        match self {
            Initializer::Xavier => "xavier",
            Initializer::Grid => "grid",
            Initializer::Udi { .. } => "udi",
        }
    }

    /// Xavier everywhere, then the first layer replaced for grid/UDI.
    pub fn apply(&self, net: &Network, seed: u64, domain: &BoxDomain) -> Result<Network> {
        let base = xavier_init(net, seed)?;
        match *self {
            Initializer::Xavier => Ok(base),
            Initializer::Grid => grid_init_1d(&base),
            Initializer::Udi { gamma, radius } => {
                let cfg = match radius {
                    Some(r) => UdiConfig::new(gamma, r, seed)?,
                    None => UdiConfig::for_domain(gamma, domain, seed)?,
                };
                udi_init(&base, &cfg)
            }
        }
    }
}

impl fmt::Display for Initializer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Initializer {
    type Err = Error;

    /// `xavier`, `grid` or `udi` (γ = 2, default radius).
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xavier" => Ok(Initializer::Xavier),
            "grid" => Ok(Initializer::Grid),
            "udi" => Ok(Initializer::Udi {
                gamma: 2.0,
                radius: None,
            }),
            other => Err(Error::Parse(format!("unknown initializer '{other}'"))),
        }
    }
}
