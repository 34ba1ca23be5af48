//! Training-free random feature models: the extreme learning machine (one
//! global feature set) and the random feature method (features localized by
//! an indicator partition of unity over a tensor grid of cells).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gram::{eps_rank, gram_matrix, BoxDomain, QuadratureGrid};
use crate::init::unit_direction;
use crate::linalg::{truncated_lstsq, DenseMatrix};

/// `cos x cos y + cos 10x cos 10y`.
pub fn rfm_target(x: &[f64]) -> f64 {
    x[0].cos() * x[1].cos() + (10.0 * x[0]).cos() * (10.0 * x[1]).cos()
}

/// Tensor grid of `m^d` equal cells. Each cell is half-open `[lo, hi)` per
/// axis except along the upper face of the domain, which is closed, so every
/// point of the domain lies in exactly one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub domain: BoxDomain,
    pub cells_per_dim: usize,
}

impl Partition {
    pub fn new(domain: BoxDomain, cells_per_dim: usize) -> Result<Self> {
        if cells_per_dim == 0 {
            return Err(Error::Config("a partition needs at least one cell per dimension".into()));
        }
        Ok(Self {
            domain,
            cells_per_dim,
        })
    }

    pub fn cell_count(&self) -> usize {
        self.cells_per_dim.pow(self.domain.dim() as u32)
    }

    /// Cell `i` as a box; the last axis index varies fastest.
    pub fn cell(&self, i: usize) -> BoxDomain {
        let m = self.cells_per_dim;
        let d = self.domain.dim();
        let mut idx = vec![0; d];
        let mut r = i;
        for a in (0..d).rev() {
            idx[a] = r % m;
            r /= m;
        }
        let (lo, hi) = (0..d)
            .map(|a| {
                let h = (self.domain.hi[a] - self.domain.lo[a]) / m as f64;
                let lo = self.domain.lo[a] + h * idx[a] as f64;
                let hi = if idx[a] + 1 == m { self.domain.hi[a] } else { lo + h };
                (lo, hi)
            })
            .unzip();
        BoxDomain { lo, hi }
    }

    /// Index of the cell containing `x`, or `None` outside the domain.
    pub fn cell_of(&self, x: &[f64]) -> Option<usize> {
        if !self.domain.contains(x) {
            return None;
        }
        let m = self.cells_per_dim;
        let mut i = 0;
        for (a, &v) in x.iter().enumerate() {
            let h = (self.domain.hi[a] - self.domain.lo[a]) / m as f64;
            let k = (((v - self.domain.lo[a]) / h).floor() as usize).min(m - 1);
            i = i * m + k;
        }
        Some(i)
    }

    /// Indicator ψ_i(x).
    pub fn pou(&self, i: usize, x: &[f64]) -> f64 {
        if self.cell_of(x) == Some(i) {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    /// Steepness γ in `tanh(γ(a·x̃ + b))`.
    pub gamma: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { gamma: 1.0 }
    }
}

/// `u(x) = Σ_i ψ_i(x) Σ_j u_ij tanh(γ(a_ij·x̃ + b_ij))` with `x̃` the
/// coordinate of `x` inside its cell rescaled to `[-1, 1]^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomFeatureModel {
    pub partition: Partition,
    pub per_cell: usize,
    pub gamma: f64,
    /// One row per feature, cell-major.
    pub directions: DenseMatrix,
    pub offsets: Vec<f64>,
    pub coefficients: Vec<f64>,
}

/// Draws the random features. `cells_per_dim = 1` gives an extreme learning machine.
pub fn build_model(
    domain: &BoxDomain,
    cells_per_dim: usize,
    per_cell: usize,
    cfg: FeatureConfig,
    seed: u64,
) -> Result<RandomFeatureModel> {
    if per_cell == 0 {
        return Err(Error::Config("features per cell must be >= 1".into()));
    }
    if !(cfg.gamma > 0.0 && cfg.gamma.is_finite()) {
        return Err(Error::Config(format!("feature gamma must be > 0, got {}", cfg.gamma)));
    }
    let partition = Partition::new(domain.clone(), cells_per_dim)?;
    let total = partition.cell_count() * per_cell;
    let d = domain.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dirs = Vec::with_capacity(total * d);
    let mut offsets = Vec::with_capacity(total);
    for _ in 0..total {
        dirs.extend(unit_direction(&mut rng, d));
        offsets.push(rng.random_range(-1.0..=1.0));
    }
    Ok(RandomFeatureModel {
        partition,
        per_cell,
        gamma: cfg.gamma,
        directions: DenseMatrix::new(total, d, dirs)?,
        offsets,
        coefficients: vec![0.0; total],
    })
}

impl RandomFeatureModel {
    pub fn feature_count(&self) -> usize {
        self.offsets.len()
    }

    /// `ψ_i φ_ij` at every point (rows) for every feature (columns).
    pub fn feature_matrix(&self, points: &DenseMatrix) -> Result<DenseMatrix> {
        let d = self.partition.domain.dim();
        if points.cols() != d {
            return Err(Error::Shape(format!("points have dimension {}, model expects {d}", points.cols())));
        }
        let total = self.feature_count();
        let mut out = vec![0.0; points.rows() * total];
        let mut local = vec![0.0; d];
        for s in 0..points.rows() {
            let x = points.row(s);
            let Some(c) = self.partition.cell_of(x) else {
                continue;
            };
            let cell = self.partition.cell(c);
            for a in 0..d {
                local[a] = 2.0 * (x[a] - cell.lo[a]) / (cell.hi[a] - cell.lo[a]) - 1.0;
            }
            let row = &mut out[s * total..(s + 1) * total];
            for j in c * self.per_cell..(c + 1) * self.per_cell {
                let a = self.directions.row(j);
                let z: f64 = a.iter().zip(&local).map(|(p, q)| p * q).sum::<f64>() + self.offsets[j];
                row[j] = (self.gamma * z).tanh();
            }
        }
        DenseMatrix::new(points.rows(), total, out)
    }

    pub fn evaluate(&self, points: &DenseMatrix) -> Result<Vec<f64>> {
        self.feature_matrix(points)?.matvec(&self.coefficients)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub residual: f64,
    pub relative_residual: f64,
}

/// Least-squares fit of the coefficients to `target` at the collocation
/// points (unweighted), singular values below `trunc_tol·σ_max` dropped.
pub fn fit(
    model: &mut RandomFeatureModel,
    target: impl Fn(&[f64]) -> f64,
    collocation: &DenseMatrix,
    trunc_tol: f64,
) -> Result<FitReport> {
    let a = model.feature_matrix(collocation)?;
    let b: Vec<f64> = (0..collocation.rows()).map(|i| target(collocation.row(i))).collect();
    let coef = truncated_lstsq(&a, &b, trunc_tol)?;
    let fitted = a.matvec(&coef)?;
    model.coefficients = coef;
    let residual = fitted
        .iter()
        .zip(&b)
        .map(|(f, t)| (f - t).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = b.iter().map(|t| t * t).sum::<f64>().sqrt();
    Ok(FitReport {
        residual,
        relative_residual: if norm > 0.0 { residual / norm } else { residual },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankAndError {
    pub eps_rank: usize,
    pub l2_error: f64,
    pub relative_l2_error: f64,
}

/// ε-rank of the model's features and its L² error against `target`, both
/// with the quadrature weights of `grid`.
pub fn model_rank_and_error(
    model: &RandomFeatureModel,
    target: impl Fn(&[f64]) -> f64,
    grid: &QuadratureGrid,
    epsilon: f64,
) -> Result<RankAndError> {
    let f = model.feature_matrix(&grid.points)?;
    let spec = eps_rank(&gram_matrix(&f, grid)?, epsilon)?;
    let u = f.matvec(&model.coefficients)?;
    let exact: Vec<f64> = (0..grid.len()).map(|k| target(grid.points.row(k))).collect();
    let diff: Vec<f64> = u.iter().zip(&exact).map(|(a, b)| a - b).collect();
    let l2_error = grid.l2_norm(&diff);
    let norm = grid.l2_norm(&exact);
    Ok(RankAndError {
        eps_rank: spec.eps_rank,
        l2_error,
        relative_l2_error: if norm > 0.0 { l2_error / norm } else { l2_error },
    })
}

/// One row of an RFM/ELM comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub cells: usize,
    pub features: usize,
    pub eps_rank: usize,
    pub l2_error: f64,
    pub relative_l2_error: f64,
    pub solve_ms: u64,
}

/// Builds, fits and scores a model with `cells_per_dim^d` cells.
pub fn run_method(
    domain: &BoxDomain,
    cells_per_dim: usize,
    per_cell: usize,
    cfg: FeatureConfig,
    seed: u64,
    collocation: &DenseMatrix,
    eval_grid: &QuadratureGrid,
    tol: f64,
) -> Result<(RandomFeatureModel, MethodReport)> {
    let start = std::time::Instant::now();
    let mut model = build_model(domain, cells_per_dim, per_cell, cfg, seed)?;
    fit(&mut model, rfm_target, collocation, tol)?;
    let solve_ms = start.elapsed().as_millis() as u64;
    let re = model_rank_and_error(&model, rfm_target, eval_grid, tol)?;
    let cells = model.partition.cell_count();
    Ok((
        model.clone(),
        MethodReport {
            method: if cells == 1 { "elm".into() } else { "rfm".into() },
            cells,
            features: model.feature_count(),
            eps_rank: re.eps_rank,
            l2_error: re.l2_error,
            relative_l2_error: re.relative_l2_error,
            solve_ms,
        },
    ))
}
