//! Quadrature grids over boxes, discrete Gram matrices `M = DᵀWD` of sampled
//! functions, and the ε-rank `#{λ(M) > ε}`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gemm, sym_eig, DenseMatrix, MatRef};
use crate::net::Network;

/// Tolerance used for ε-rank unless an experiment overrides it.
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Axis-aligned box `Π [lo_i, hi_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::Shape("box bounds must be non-empty and of equal length".into()));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a.is_finite() && b.is_finite() && a < b)) {
            return Err(Error::Domain(format!("degenerate box {lo:?} x {hi:?}")));
        }
        Ok(Self { lo, hi })
    }

    /// `[a, b]^d`.
    pub fn cube(a: f64, b: f64, d: usize) -> Result<Self> {
        Self::new(vec![a; d], vec![b; d])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    /// `max_{x ∈ Ω} ‖x‖₂`, attained at a corner.
    pub fn max_norm(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| a.abs().max(b.abs()).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (a, b))| a <= v && v <= b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuadratureScheme {
    /// Tensor trapezoid rule including the box faces.
    Trapezoid,
    /// Tensor Gauss–Legendre rule.
    Gauss,
    /// Tensor midpoint rule on a uniform cell mesh.
    UniformMesh,
    /// Uniform random points with equal weights `|Ω|/m`.
    MonteCarlo,
}

impl QuadratureScheme {
    pub fn name(&self) -> &'static str {
        match self {
            QuadratureScheme::Trapezoid => "trapezoid",
            QuadratureScheme::Gauss => "gauss",
            QuadratureScheme::UniformMesh => "uniform-mesh",
            QuadratureScheme::MonteCarlo => "monte-carlo",
        }
    }
}

impl fmt::Display for QuadratureScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QuadratureScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trapezoid" => Ok(Self::Trapezoid),
            "gauss" => Ok(Self::Gauss),
            "uniform-mesh" => Ok(Self::UniformMesh),
            "monte-carlo" => Ok(Self::MonteCarlo),
            other => Err(Error::Parse(format!("unknown quadrature scheme '{other}'"))),
        }
    }
}

/// Evaluation points with non-negative integration weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureGrid {
    pub points: DenseMatrix,
    pub weights: Vec<f64>,
    pub scheme: QuadratureScheme,
    pub domain: BoxDomain,
}

impl QuadratureGrid {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `Σ_k w_k g(x_k)`.
    pub fn integrate(&self, mut g: impl FnMut(&[f64]) -> f64) -> f64 {
        (0..self.len())
            .map(|k| self.weights[k] * g(self.points.row(k)))
            .sum()
    }

    /// Discrete L² norm of sampled values.
    pub fn l2_norm(&self, values: &[f64]) -> f64 {
        values
            .iter()
            .zip(&self.weights)
            .map(|(v, w)| w * v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`, by Newton iteration on `P_m`.
pub fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; m];
    let mut weights = vec![0.0; m];
    for i in 0..m.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(m, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() <= 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(m, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[m - 1 - i] = x;
        weights[i] = w;
        weights[m - 1 - i] = w;
    }
    if m % 2 == 1 {
        nodes[m / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre_with_derivative(m: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=m {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    if m == 0 {
        return (1.0, 0.0);
    }
    (p1, m as f64 * (x * p1 - p0) / (x * x - 1.0))
}

fn rule_1d(scheme: QuadratureScheme, a: f64, b: f64, m: usize) -> (Vec<f64>, Vec<f64>) {
    match scheme {
        QuadratureScheme::Trapezoid => {
            let h = (b - a) / (m - 1) as f64;
            let pts = (0..m)
                .map(|i| if i + 1 == m { b } else { a + h * i as f64 })
                .collect();
            let w = (0..m)
                .map(|i| if i == 0 || i + 1 == m { 0.5 * h } else { h })
                .collect();
            (pts, w)
        }
        QuadratureScheme::Gauss => {
            let (x, w) = gauss_legendre(m);
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            (
                x.iter().map(|t| mid + half * t).collect(),
                w.iter().map(|v| v * half).collect(),
            )
        }
        QuadratureScheme::UniformMesh => {
            let h = (b - a) / m as f64;
            ((0..m).map(|i| a + h * (i as f64 + 0.5)).collect(), vec![h; m])
        }
        QuadratureScheme::MonteCarlo => unreachable!("not a tensor rule"),
    }
}

/// Builds a quadrature grid on `domain`.
///
/// For tensor schemes `m` counts points per dimension; for Monte Carlo it is
/// the total number of points and `seed` is required.
pub fn build_grid(
    domain: &BoxDomain,
    scheme: QuadratureScheme,
    m: usize,
    seed: Option<u64>,
) -> Result<QuadratureGrid> {
    let d = domain.dim();
    match scheme {
        QuadratureScheme::MonteCarlo => {
            let seed = seed.ok_or_else(|| Error::Domain("monte-carlo grid needs a seed".into()))?;
            if m == 0 {
                return Err(Error::Domain("monte-carlo grid needs at least one point".into()));
            }
            let points = sample_box(domain, m, seed);
            Ok(QuadratureGrid {
                points,
                weights: vec![domain.volume() / m as f64; m],
                scheme,
                domain: domain.clone(),
            })
        }
        _ => {
            let min_m = if scheme == QuadratureScheme::Trapezoid { 2 } else { 1 };
            if m < min_m {
                return Err(Error::Domain(format!(
                    "{scheme} needs at least {min_m} points per dimension, got {m}"
                )));
            }
            let total = m
                .checked_pow(d as u32)
                .filter(|&t| t <= 50_000_000)
                .ok_or_else(|| Error::Domain(format!("{m}^{d} grid points is too many")))?;
            let rules: Vec<_> = (0..d)
                .map(|i| rule_1d(scheme, domain.lo[i], domain.hi[i], m))
                .collect();
            let mut pts = Vec::with_capacity(total * d);
            let mut weights = Vec::with_capacity(total);
            let mut idx = vec![0usize; d];
            for _ in 0..total {
                let mut w = 1.0;
                for (i, &k) in idx.iter().enumerate() {
                    pts.push(rules[i].0[k]);
                    w *= rules[i].1[k];
                }
                weights.push(w);
                // last coordinate varies fastest
                for i in (0..d).rev() {
                    idx[i] += 1;
                    if idx[i] < m {
                        break;
                    }
                    idx[i] = 0;
                }
            }
            Ok(QuadratureGrid {
                points: DenseMatrix::from_raw(total, d, pts),
                weights,
                scheme,
                domain: domain.clone(),
            })
        }
    }
}

/// `m` points uniformly distributed in `domain`.
pub fn sample_box(domain: &BoxDomain, m: usize, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = domain.dim();
    let mut pts = Vec::with_capacity(m * d);
    for _ in 0..m {
        for i in 0..d {
            pts.push(rng.random_range(domain.lo[i]..domain.hi[i]));
        }
    }
    DenseMatrix::from_raw(m, d, pts)
}

/// `M = DᵀWD` for features sampled at the grid points (rows of `features`).
pub fn gram_matrix(features: &DenseMatrix, grid: &QuadratureGrid) -> Result<DenseMatrix> {
    let (m, n) = features.shape();
    if m != grid.len() {
        return Err(Error::Shape(format!(
            "feature matrix has {m} rows but the grid has {} points",
            grid.len()
        )));
    }
    let mut scaled = features.as_slice().to_vec();
    for (row, w) in scaled.chunks_exact_mut(n.max(1)).zip(&grid.weights) {
        let s = w.sqrt();
        row.iter_mut().for_each(|v| *v *= s);
    }
    let mut out = vec![0.0; n * n];
    gemm(
        n,
        m,
        n,
        1.0,
        MatRef::transposed(&scaled, n),
        MatRef::row_major(&scaled, n),
        0.0,
        &mut out,
    );
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (out[i * n + j] + out[j * n + i]);
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    Ok(DenseMatrix::from_raw(n, n, out))
}

/// Eigenvalues of a Gram matrix with its ε-rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramSpectrum {
    pub epsilon: f64,
    pub eigenvalues: Vec<f64>,
    pub eps_rank: usize,
}

impl GramSpectrum {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("spectrum serializes")
    }

    /// The `k` largest eigenvalues.
    pub fn top(&self, k: usize) -> Vec<f64> {
        self.eigenvalues.iter().take(k).copied().collect()
    }
}

/// Spectrum of a symmetric PSD matrix and the number of eigenvalues strictly
/// above `epsilon`. Round-off negatives are clamped to zero.
pub fn eps_rank(m: &DenseMatrix, epsilon: f64) -> Result<GramSpectrum> {
    if !(epsilon >= 0.0) {
        return Err(Error::Domain(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let eig = sym_eig(m)?;
    let eigenvalues: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    let eps_rank = eigenvalues.iter().filter(|&&l| l > epsilon).count();
    Ok(GramSpectrum {
        epsilon,
        eigenvalues,
        eps_rank,
    })
}

/// Spectrum of every hidden layer's neuron functions on `grid`.
pub fn layer_spectra(net: &Network, grid: &QuadratureGrid, epsilon: f64) -> Result<Vec<GramSpectrum>> {
    net.all_layer_features(&grid.points)?
        .iter()
        .map(|d| eps_rank(&gram_matrix(d, grid)?, epsilon))
        .collect()
}

/// ε-rank of each hidden layer, first to last.
pub fn layer_rank_profile(net: &Network, grid: &QuadratureGrid, epsilon: f64) -> Result<Vec<usize>> {
    Ok(layer_spectra(net, grid, epsilon)?
        .into_iter()
        .map(|s| s.eps_rank)
        .collect())
}

/// Spectrum of the last hidden layer only.
pub fn last_layer_spectrum(net: &Network, grid: &QuadratureGrid, epsilon: f64) -> Result<GramSpectrum> {
    let d = net.layer_features(&grid.points, net.depth())?;
    eps_rank(&gram_matrix(&d, grid)?, epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn features(grid: &QuadratureGrid, fs: &[fn(f64) -> f64]) -> DenseMatrix {
        DenseMatrix::from_fn(grid.len(), fs.len(), |i, j| fs[j](grid.points[(i, 0)])).unwrap()
    }

    #[test]
    fn trapezoid_three_points() {
        let g = build_grid(&BoxDomain::cube(-1.0, 1.0, 1).unwrap(), QuadratureScheme::Trapezoid, 3, None).unwrap();
        assert_eq!(g.points.as_slice(), &[-1.0, 0.0, 1.0]);
        assert_eq!(g.weights, vec![0.5, 1.0, 0.5]);
    }

    #[test]
    fn gauss_integrates_polynomials() {
        let dom = BoxDomain::cube(-1.0, 1.0, 1).unwrap();
        let g = build_grid(&dom, QuadratureScheme::Gauss, 5, None).unwrap();
        assert_abs_diff_eq!(g.integrate(|x| x[0] * x[0]), 2.0 / 3.0, epsilon = 1e-12);
        // degree 9 is exact for 5 nodes
        assert_abs_diff_eq!(g.integrate(|x| x[0].powi(8)), 2.0 / 9.0, epsilon = 1e-12);
        let (x, w) = gauss_legendre(1);
        assert_eq!(x, vec![0.0]);
        assert_abs_diff_eq!(w[0], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn weights_sum_to_volume() {
        let dom = BoxDomain::new(vec![-1.0, 0.0, 2.0], vec![1.0, 3.0, 2.5]).unwrap();
        for scheme in [
            QuadratureScheme::Trapezoid,
            QuadratureScheme::Gauss,
            QuadratureScheme::UniformMesh,
        ] {
            let g = build_grid(&dom, scheme, 6, None).unwrap();
            let s: f64 = g.weights.iter().sum();
            assert!((s - dom.volume()).abs() <= 1e-8 * dom.volume(), "{scheme}");
            assert!(g.weights.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn monte_carlo_constant_integrand() {
        let dom = BoxDomain::cube(-1.0, 1.0, 2).unwrap();
        let g = build_grid(&dom, QuadratureScheme::MonteCarlo, 10_000, Some(4)).unwrap();
        assert_abs_diff_eq!(g.integrate(|_| 1.0), 4.0, epsilon = 1e-12);
        assert!((0..g.len()).all(|k| dom.contains(g.points.row(k))));
        assert!(matches!(
            build_grid(&dom, QuadratureScheme::MonteCarlo, 10, None),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            build_grid(&dom, QuadratureScheme::Trapezoid, 1, None),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn gram_of_one_and_x() {
        let dom = BoxDomain::cube(-1.0, 1.0, 1).unwrap();
        let g = build_grid(&dom, QuadratureScheme::Trapezoid, 2001, None).unwrap();
        let m = gram_matrix(&features(&g, &[|_| 1.0, |x| x]), &g).unwrap();
        assert_abs_diff_eq!(m[(0, 0)], 2.0, epsilon = 1e-4);
        assert_abs_diff_eq!(m[(1, 1)], 2.0 / 3.0, epsilon = 1e-4);
        assert_abs_diff_eq!(m[(0, 1)], 0.0, epsilon = 1e-4);

        let single = gram_matrix(&features(&g, &[|_| 1.0]), &g).unwrap();
        assert_abs_diff_eq!(single[(0, 0)], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn sin_cos_orthogonal_on_gauss() {
        let dom = BoxDomain::cube(-1.0, 1.0, 1).unwrap();
        let g = build_grid(&dom, QuadratureScheme::Gauss, 40, None).unwrap();
        let m = gram_matrix(
            &features(&g, &[|x| (PI * x).sin(), |x| (PI * x).cos(), |x| (PI * x).sin()]),
            &g,
        )
        .unwrap();
        assert!(m[(0, 1)].abs() < 1e-10);
        let s = eps_rank(&m, 1e-6).unwrap();
        assert_eq!(s.eps_rank, 2);
        assert_abs_diff_eq!(s.eigenvalues[0], 2.0, epsilon = 1e-10);
        assert_abs_diff_eq!(s.eigenvalues[1], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(s.eigenvalues[2], 0.0, epsilon = 1e-10);
    }

    #[test]
    fn eps_rank_trivial_cases() {
        assert_eq!(eps_rank(&DenseMatrix::identity(5), 1e-6).unwrap().eps_rank, 5);
        assert_eq!(eps_rank(&DenseMatrix::zeros(4, 4), 0.0).unwrap().eps_rank, 0);
        // ties at exactly ε count as below
        let m = DenseMatrix::from_rows(&[vec![1e-6, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(eps_rank(&m, 1e-6).unwrap().eps_rank, 1);
        assert!(matches!(eps_rank(&m, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn spectrum_json_shape() {
        let s = eps_rank(&DenseMatrix::identity(2), 1e-6).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s.to_json()).unwrap();
        assert_eq!(v["eps_rank"], 2);
        assert_eq!(v["eigenvalues"].as_array().unwrap().len(), 2);
        assert_eq!(v["epsilon"], 1e-6);
    }

    #[test]
    fn shape_mismatch() {
        let dom = BoxDomain::cube(-1.0, 1.0, 1).unwrap();
        let g = build_grid(&dom, QuadratureScheme::Trapezoid, 5, None).unwrap();
        assert!(matches!(gram_matrix(&DenseMatrix::zeros(4, 2), &g), Err(Error::Shape(_))));
    }

    #[test]
    fn rank_deficient_features_at_zero_tolerance() {
        // columns: x, x², 2x - x² (dependent) → rank 2
        let dom = BoxDomain::cube(-1.0, 1.0, 1).unwrap();
        let g = build_grid(&dom, QuadratureScheme::Gauss, 12, None).unwrap();
        let d = features(&g, &[|x| x, |x| x * x, |x| 2.0 * x - x * x]);
        let m = gram_matrix(&d, &g).unwrap();
        let s = eps_rank(&m, 1e-12).unwrap();
        assert_eq!(s.eps_rank, 2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn eps_rank_monotone_in_epsilon(seed in 0u64..5000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let d = DenseMatrix::from_fn(20, 6, |_, _| rng.random_range(-1.0..1.0)).unwrap();
                let m = d.transpose().matmul(&d).unwrap();
                let mut last = usize::MAX;
                for e in [0.0, 1e-8, 1e-4, 1e-2, 1.0, 10.0, 1e3] {
                    let r = eps_rank(&m, e).unwrap().eps_rank;
                    prop_assert!(r <= last);
                    last = r;
                }
            }

            #[test]
            fn gram_permutation_invariant(seed in 0u64..5000) {
                let dom = BoxDomain::cube(-1.0, 1.0, 1).unwrap();
                let g = build_grid(&dom, QuadratureScheme::Trapezoid, 33, None).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let d = DenseMatrix::from_fn(33, 5, |_, _| rng.random_range(-1.0..1.0)).unwrap();
                let mut perm: Vec<usize> = (0..33).collect();
                for i in (1..33).rev() {
                    perm.swap(i, rng.random_range(0..=i));
                }
                let cols: Vec<usize> = (0..5).collect();
                let pg = QuadratureGrid {
                    points: g.points.select(&perm, &[0]),
                    weights: perm.iter().map(|&i| g.weights[i]).collect(),
                    scheme: g.scheme,
                    domain: dom.clone(),
                };
                let m1 = gram_matrix(&d, &g).unwrap();
                let m2 = gram_matrix(&d.select(&perm, &cols), &pg).unwrap();
                for (a, b) in m1.as_slice().iter().zip(m2.as_slice()) {
                    prop_assert!((a - b).abs() <= 1e-9);
                }
            }
        }
    }
}
