//! Constructive compression of a function combination to its ε-rank with a
//! certified error bound, and a sampling probe of the orthogonal-submatrix
//! lower bound used by the certificate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gram::{gram_matrix, QuadratureGrid};
use crate::linalg::{householder_qr, singular_values, sym_eig, truncated_lstsq, DenseMatrix};

/// Subset counts up to this size are searched exhaustively.
pub const EXHAUSTIVE_LIMIT: u64 = 10_000;

/// `C(n, k)`, saturating.
pub fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut c: u64 = 1;
    for i in 0..k {
        c = c.saturating_mul((n - i) as u64) / (i as u64 + 1);
    }
    c
}

/// Lower bound `1/√(p(n-p) + min(p, n-p))` on the best square-subblock
/// σ_min of an orthonormal `n×p` matrix.
pub fn lemma_bound(n: usize, p: usize) -> f64 {
    1.0 / ((p * (n - p) + p.min(n - p)) as f64).sqrt()
}

/// Conjectured sharp bound `1/√n`.
pub fn conjecture_bound(n: usize) -> f64 {
    1.0 / (n as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetSelection {
    /// Row indices (ascending) of the chosen square block.
    pub rows: Vec<usize>,
    pub sigma_min: f64,
    pub exhaustive: bool,
}

fn sigma_min_of(q: &DenseMatrix, rows: &[usize]) -> Result<f64> {
    let cols: Vec<usize> = (0..q.cols()).collect();
    let s = singular_values(&q.select(rows, &cols))?;
    Ok(s.last().copied().unwrap_or(0.0))
}

/// Next k-combination of `0..n` in lexicographic order.
fn next_combination(c: &mut [usize], n: usize) -> bool {
    let k = c.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if c[i] < n - k + i {
            c[i] += 1;
            for j in i + 1..k {
                c[j] = c[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Best σ_min over every `k`-row square block of `q` (`k = q.cols()`); ties
/// go to the lexicographically smallest row set.
pub fn best_subset_exhaustive(q: &DenseMatrix) -> Result<SubsetSelection> {
    let (n, k) = q.shape();
    if k == 0 || k > n {
        return Err(Error::Shape(format!("cannot pick {k} rows out of {n}")));
    }
    let mut c: Vec<usize> = (0..k).collect();
    let mut best = (f64::NEG_INFINITY, c.clone());
    loop {
        let s = sigma_min_of(q, &c)?;
        if s > best.0 {
            best = (s, c.clone());
        }
        if !next_combination(&mut c, n) {
            break;
        }
    }
    Ok(SubsetSelection {
        rows: best.1,
        sigma_min: best.0,
        exhaustive: true,
    })
}

/// Rows picked by column-pivoted Gram–Schmidt on `qᵀ`.
pub fn best_subset_greedy(q: &DenseMatrix) -> Result<SubsetSelection> {
    let (n, k) = q.shape();
    if k == 0 || k > n {
        return Err(Error::Shape(format!("cannot pick {k} rows out of {n}")));
    }
    // columns of qᵀ are the rows of q
    let mut cols: Vec<Vec<f64>> = (0..n).map(|i| q.row(i).to_vec()).collect();
    let mut chosen = Vec::with_capacity(k);
    for _ in 0..k {
        let (piv, _) = cols
            .iter()
            .enumerate()
            .filter(|(i, _)| !chosen.contains(i))
            .map(|(i, c)| (i, c.iter().map(|v| v * v).sum::<f64>()))
            .fold((usize::MAX, -1.0), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
        chosen.push(piv);
        let norm = cols[piv].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let u: Vec<f64> = cols[piv].iter().map(|v| v / norm).collect();
        for (i, c) in cols.iter_mut().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let proj: f64 = c.iter().zip(&u).map(|(a, b)| a * b).sum();
            c.iter_mut().zip(&u).for_each(|(a, b)| *a -= proj * b);
        }
    }
    chosen.sort_unstable();
    Ok(SubsetSelection {
        sigma_min: sigma_min_of(q, &chosen)?,
        rows: chosen,
        exhaustive: false,
    })
}

/// Exhaustive when `C(n, k) <= 10⁴`, greedy otherwise.
pub fn select_subset(q: &DenseMatrix) -> Result<SubsetSelection> {
    let (n, k) = q.shape();
    let qtq = q.transpose().matmul(q)?;
    let dev = (0..k)
        .flat_map(|i| (0..k).map(move |j| (i, j)))
        .map(|(i, j)| (qtq[(i, j)] - if i == j { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max);
    if dev > 1e-8 {
        return Err(Error::Domain(format!("columns are not orthonormal (deviation {dev:.2e})")));
    }
    if binomial(n, k) <= EXHAUSTIVE_LIMIT {
        best_subset_exhaustive(q)
    } else {
        best_subset_greedy(q)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionResult {
    pub n: usize,
    pub p: usize,
    pub epsilon: f64,
    /// Indices of the functions kept, ascending.
    pub selected_indices: Vec<usize>,
    pub beta_tilde: Vec<f64>,
    /// `‖β‖² (p+1)(n-p)² ε`.
    pub certified_bound: f64,
    /// `‖β‖² (p(n-p) + min(p, n-p))(n-p) ε`, the same argument with the
    /// orthogonal-submatrix bound used directly.
    pub lemma_based_bound: f64,
    /// `‖β‖² ‖V₂₂⁻¹‖² (λ_{p+1} + … + λ_n)`.
    pub spectral_bound: f64,
    pub measured_error: f64,
    pub v22_min_sigma: f64,
    pub exhaustive: bool,
    pub eigenvalues: Vec<f64>,
}

/// Replaces `f = Σ β_j f_j` (columns of `features` sampled on `grid`) by a
/// combination of `p = r_ε` of the `f_j`, following the spectral split
/// `M = QΛQᵀ`: the `n-p` functions dropped are the rows of `Q[:, p..]`
/// with the best-conditioned square block `V₂₂`, and
/// `β̃ = β_K - V₁₂ V₂₂⁻¹ β_D`.
pub fn compress(
    features: &DenseMatrix,
    beta: &[f64],
    grid: &QuadratureGrid,
    epsilon: f64,
) -> Result<CompressionResult> {
    let n = features.cols();
    if beta.len() != n {
        return Err(Error::Shape(format!("{} coefficients for {n} functions", beta.len())));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::Domain(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let c = beta.iter().map(|b| b * b).sum::<f64>();
    let gram = gram_matrix(features, grid)?;
    let eig = sym_eig(&gram)?;
    let eigenvalues: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    let p = eigenvalues.iter().filter(|&&l| l > epsilon).count();
    if p == 0 {
        return Err(Error::Domain(format!("ε-rank is 0 at ε = {epsilon}; nothing to keep")));
    }
    let f = features.matvec(beta)?;
    if p == n {
        return Ok(CompressionResult {
            n,
            p,
            epsilon,
            selected_indices: (0..n).collect(),
            beta_tilde: beta.to_vec(),
            certified_bound: 0.0,
            lemma_based_bound: 0.0,
            spectral_bound: 0.0,
            measured_error: 0.0,
            v22_min_sigma: 1.0,
            exhaustive: true,
            eigenvalues,
        });
    }
    let all_rows: Vec<usize> = (0..n).collect();
    let tail_cols: Vec<usize> = (p..n).collect();
    let q2 = eig.eigenvectors.select(&all_rows, &tail_cols);
    let sel = select_subset(&q2)?;
    if !(sel.sigma_min > 1e-13) {
        return Err(Error::Selection(format!(
            "every candidate V22 block is singular (best σ_min = {:.3e}, n = {n}, p = {p})",
            sel.sigma_min
        )));
    }
    let dropped = sel.rows.clone();
    let kept: Vec<usize> = all_rows.iter().copied().filter(|i| !dropped.contains(i)).collect();
    let v12 = q2.select(&kept, &(0..n - p).collect::<Vec<_>>());
    let v22 = q2.select(&dropped, &(0..n - p).collect::<Vec<_>>());
    let beta_d: Vec<f64> = dropped.iter().map(|&i| beta[i]).collect();
    let x = truncated_lstsq(&v22, &beta_d, 0.0)?;
    let correction = v12.matvec(&x)?;
    let beta_tilde: Vec<f64> = kept
        .iter()
        .zip(&correction)
        .map(|(&i, corr)| beta[i] - corr)
        .collect();

    let ftilde = features.select(&(0..features.rows()).collect::<Vec<_>>(), &kept).matvec(&beta_tilde)?;
    let measured_error = f
        .iter()
        .zip(&ftilde)
        .zip(&grid.weights)
        .map(|((a, b), w)| w * (a - b) * (a - b))
        .sum::<f64>();
    let m = (n - p) as f64;
    let tail: f64 = eigenvalues[p..].iter().sum();
    Ok(CompressionResult {
        n,
        p,
        epsilon,
        selected_indices: kept,
        beta_tilde,
        certified_bound: c * (p as f64 + 1.0) * m * m * epsilon,
        lemma_based_bound: c * (p * (n - p) + p.min(n - p)) as f64 * m * epsilon,
        spectral_bound: c * tail / (sel.sigma_min * sel.sigma_min),
        measured_error,
        v22_min_sigma: sel.sigma_min,
        exhaustive: sel.exhaustive,
        eigenvalues,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaProbe {
    pub n: usize,
    pub p: usize,
    pub trials: usize,
    /// Minimum over samples of the best square-block σ_min.
    pub worst_best_sigma: f64,
    pub paper_bound: f64,
    pub conjecture_bound: f64,
    /// Samples below `paper_bound - 10⁻¹⁰`.
    pub violations: usize,
    /// Samples below `conjecture_bound - 10⁻¹⁰` (reported, not a failure).
    pub below_conjecture: usize,
}

/// Orthonormal `n×p` matrix distributed by Haar measure.
pub fn haar_orthonormal(rng: &mut impl Rng, n: usize, p: usize) -> Result<DenseMatrix> {
    let g = DenseMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal))?;
    Ok(householder_qr(&g)?.0)
}

/// Samples Haar orthonormal `n×p` matrices and records the smallest best
/// square-block σ_min seen.
pub fn probe_lemma(n: usize, p: usize, trials: usize, seed: u64) -> Result<LemmaProbe> {
    if !(1 <= p && p < n && n <= 10) {
        return Err(Error::Domain(format!("need 1 <= p < n <= 10, got n = {n}, p = {p}")));
    }
    if trials == 0 {
        return Err(Error::Domain("need at least one trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pb = lemma_bound(n, p);
    let cb = conjecture_bound(n);
    let mut worst = f64::INFINITY;
    let (mut violations, mut below) = (0, 0);
    for _ in 0..trials {
        let q = haar_orthonormal(&mut rng, n, p)?;
        let s = best_subset_exhaustive(&q)?.sigma_min;
        worst = worst.min(s);
        if s < pb - 1e-10 {
            violations += 1;
        }
        if s < cb - 1e-10 {
            below += 1;
        }
    }
    Ok(LemmaProbe {
        n,
        p,
        trials,
        worst_best_sigma: worst,
        paper_bound: pb,
        conjecture_bound: cb,
        violations,
        below_conjecture: below,
    })
}

/// A test instance on `grid` (1-D): `p` random tanh functions and `n - p`
/// functions that are random combinations of them plus a `delta`-sized
/// random tanh perturbation. Returns the sampled functions, a unit-norm β
/// and an ε halfway (geometrically) between λ_p and λ_{p+1}.
pub fn planted_instance(
    n: usize,
    p: usize,
    delta: f64,
    grid: &QuadratureGrid,
    seed: u64,
) -> Result<(DenseMatrix, Vec<f64>, f64)> {
    if !(1 <= p && p <= n) {
        return Err(Error::Domain(format!("need 1 <= p <= n, got n = {n}, p = {p}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = grid.len();
    let x: Vec<f64> = (0..m).map(|k| grid.points[(k, 0)]).collect();
    let tanh_fn = |rng: &mut ChaCha8Rng| {
        let a: f64 = rng.random_range(-4.0..4.0);
        let b: f64 = rng.random_range(-1.0..1.0);
        x.iter().map(|&t| (a * t + b).tanh()).collect::<Vec<f64>>()
    };
    let mut cols: Vec<Vec<f64>> = (0..p).map(|_| tanh_fn(&mut rng)).collect();
    for _ in p..n {
        let mut f = tanh_fn(&mut rng);
        f.iter_mut().for_each(|v| *v *= delta);
        for base in cols.iter().take(p) {
            let c: f64 = rng.random_range(-1.0..1.0);
            f.iter_mut().zip(base).for_each(|(v, b)| *v += c * b);
        }
        cols.push(f);
    }
    let d = DenseMatrix::from_fn(m, n, |i, j| cols[j][i])?;
    let mut beta: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let norm = beta.iter().map(|b| b * b).sum::<f64>().sqrt();
    beta.iter_mut().for_each(|b| *b /= norm);
    let eig = sym_eig(&gram_matrix(&d, grid)?)?;
    let l = &eig.eigenvalues;
    let eps = if p == n {
        0.5 * l[n - 1].max(0.0)
    } else {
        (l[p - 1].max(1e-300) * l[p].max(1e-300)).sqrt()
    };
    Ok((d, beta, eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gram::{build_grid, BoxDomain, QuadratureScheme};

    fn line_grid(m: usize) -> QuadratureGrid {
        build_grid(&BoxDomain::cube(-1.0, 1.0, 1).unwrap(), QuadratureScheme::Gauss, m, None).unwrap()
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial(10, 5), 252);
        assert_eq!(binomial(8, 0), 1);
        assert_eq!(binomial(3, 4), 0);
        assert!((lemma_bound(4, 2) - 1.0 / 6f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn symmetric_two_rows() {
        let s = 0.5f64.sqrt();
        let q = DenseMatrix::new(2, 1, vec![s, s]).unwrap();
        let sel = select_subset(&q).unwrap();
        assert!((sel.sigma_min - s).abs() < 1e-15);
        assert_eq!(sel.rows, vec![0]);
    }

    #[test]
    fn axis_vector_picks_its_row() {
        let q = DenseMatrix::new(3, 1, vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(select_subset(&q).unwrap().rows, vec![0]);
        let q = DenseMatrix::new(3, 1, vec![0.0, 0.0, 1.0]).unwrap();
        assert_eq!(best_subset_greedy(&q).unwrap().rows, vec![2]);
    }

    #[test]
    fn greedy_close_to_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let q = haar_orthonormal(&mut rng, 8, 3).unwrap();
            let e = best_subset_exhaustive(&q).unwrap().sigma_min;
            let g = best_subset_greedy(&q).unwrap().sigma_min;
            assert!(g <= e + 1e-12 && 2.0 * g >= e, "greedy {g} exhaustive {e}");
        }
    }

    #[test]
    fn non_orthonormal_rejected() {
        let q = DenseMatrix::new(2, 1, vec![1.0, 1.0]).unwrap();
        assert!(matches!(select_subset(&q), Err(Error::Domain(_))));
    }

    #[test]
    fn duplicate_function_compresses_exactly() {
        let g = line_grid(40);
        let d = DenseMatrix::from_fn(g.len(), 3, |i, j| {
            let x = g.points[(i, 0)];
            if j == 1 { (2.0 * x).tanh() } else { (x + 0.3).tanh() }
        })
        .unwrap();
        let r = compress(&d, &[1.0, 1.0, 1.0], &g, 1e-6).unwrap();
        assert_eq!(r.p, 2);
        assert!(r.measured_error <= 1e-10);
        assert!(r.measured_error <= r.certified_bound);
        // f̃ = 2 f₁ + f₂ whichever copy is kept
        let mut coef = r.beta_tilde.clone();
        coef.sort_by(f64::total_cmp);
        assert!((coef[0] - 1.0).abs() < 1e-8 && (coef[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn full_rank_is_identity() {
        let g = line_grid(20);
        let d = DenseMatrix::from_fn(g.len(), 2, |i, j| g.points[(i, 0)].powi(j as i32)).unwrap();
        let r = compress(&d, &[0.3, -2.0], &g, 1e-6).unwrap();
        assert_eq!(r.selected_indices, vec![0, 1]);
        assert_eq!(r.beta_tilde, vec![0.3, -2.0]);
        assert_eq!(r.measured_error, 0.0);
    }

    #[test]
    fn zero_rank_rejected() {
        let g = line_grid(10);
        let d = DenseMatrix::zeros(g.len(), 3);
        assert!(matches!(compress(&d, &[1.0; 3], &g, 1e-6), Err(Error::Domain(_))));
    }

    #[test]
    fn random_instances_within_bound() {
        let g = line_grid(60);
        for seed in 0..50u64 {
            let p = 2 + (seed as usize % 7);
            let (d, beta, eps) = planted_instance(10, p, 1e-3, &g, seed).unwrap();
            let r = compress(&d, &beta, &g, eps).unwrap();
            assert!(r.measured_error >= 0.0);
            assert!(r.measured_error <= r.spectral_bound * (1.0 + 1e-8) + 1e-15);
            assert!(r.spectral_bound <= r.lemma_based_bound * (1.0 + 1e-8));
            assert!(r.lemma_based_bound <= r.certified_bound * (1.0 + 1e-12));
        }
    }

    #[test]
    fn probe_small_cases() {
        let r = probe_lemma(2, 1, 500, 1).unwrap();
        assert!(r.worst_best_sigma >= 0.5f64.sqrt() - 1e-12);
        assert_eq!(r.violations, 0);
        let r = probe_lemma(6, 3, 300, 2).unwrap();
        assert_eq!(r.violations, 0);
        assert!(probe_lemma(11, 2, 1, 0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn selection_permutation_invariant(seed in any::<u64>(), n in 3usize..8, k in 1usize..3) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let q = haar_orthonormal(&mut rng, n, k).unwrap();
                let mut perm: Vec<usize> = (0..n).collect();
                for i in (1..n).rev() {
                    perm.swap(i, rng.random_range(0..=i));
                }
                let cols: Vec<usize> = (0..k).collect();
                let pq = q.select(&perm, &cols);
                let a = best_subset_exhaustive(&q).unwrap();
                let b = best_subset_exhaustive(&pq).unwrap();
                prop_assert!((a.sigma_min - b.sigma_min).abs() <= 1e-10);
                // rows chosen for the permuted matrix map back onto the original choice
                let mut back: Vec<usize> = b.rows.iter().map(|&r| perm[r]).collect();
                back.sort_unstable();
                let again = sigma_min_of(&q, &back).unwrap();
                prop_assert!((again - a.sigma_min).abs() <= 1e-10);
            }

            #[test]
            fn dependent_functions_compress_exactly(seed in any::<u64>()) {
                let g = line_grid(30);
                let (d, beta, _) = planted_instance(6, 3, 0.0, &g, seed).unwrap();
                let r = compress(&d, &beta, &g, 1e-9).unwrap();
                prop_assert_eq!(r.p, 3);
                prop_assert!(r.measured_error <= 1e-10);
            }
        }
    }
}
