//! Structural invariants checked through the public API.

use erank::gram::{build_grid, eps_rank, gram_matrix, BoxDomain, QuadratureScheme};
use erank::init::{xavier_init, Initializer};
use erank::linalg::{svd, sym_eig, truncated_lstsq, DenseMatrix};
use erank::net::{Activation, Network};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DenseMatrix> {
    prop::collection::vec(-1.0f64..1.0, rows * cols).prop_map(move |v| DenseMatrix::new(rows, cols, v).unwrap())
}

fn sym_matrix(n: usize) -> impl Strategy<Value = DenseMatrix> {
    matrix(n, n).prop_map(|a| {
        let at = a.transpose();
        DenseMatrix::from_fn(a.rows(), a.cols(), |i, j| 0.5 * (a.as_slice()[i * a.cols() + j] + at.as_slice()[i * a.cols() + j])).unwrap()
    })
}

fn max_abs_diff(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn eigendecomposition_reconstructs(m in (1usize..9).prop_flat_map(sym_matrix)) {
        let eig = sym_eig(&m).unwrap();
        let n = m.rows();
        let q = &eig.eigenvectors;
        let lam = DenseMatrix::from_fn(n, n, |i, j| if i == j { eig.eigenvalues[i] } else { 0.0 }).unwrap();
        let back = q.matmul(&lam).unwrap().matmul(&q.transpose()).unwrap();
        prop_assert!(max_abs_diff(&back, &m) < 1e-10);
        let qtq = q.transpose().matmul(q).unwrap();
        prop_assert!(max_abs_diff(&qtq, &DenseMatrix::identity(n)) < 1e-10);
        prop_assert!(eig.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn svd_reconstructs(a in (1usize..8, 1usize..8).prop_flat_map(|(r, c)| matrix(r, c))) {
        let s = svd(&a).unwrap();
        let k = s.singular_values.len();
        let sig = DenseMatrix::from_fn(k, k, |i, j| if i == j { s.singular_values[i] } else { 0.0 }).unwrap();
        let back = s.u.matmul(&sig).unwrap().matmul(&s.v.transpose()).unwrap();
        prop_assert!(max_abs_diff(&back, &a) < 1e-10);
        prop_assert!(s.singular_values.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn lstsq_residual_is_orthogonal_to_columns(
        a in (4usize..10, 1usize..4).prop_flat_map(|(r, c)| matrix(r, c)),
        seed in any::<u64>(),
    ) {
        let b: Vec<f64> = (0..a.rows()).map(|i| ((seed.wrapping_add(i as u64) % 97) as f64 / 48.0) - 1.0).collect();
        let x = truncated_lstsq(&a, &b, 1e-12).unwrap();
        let ax = a.matvec(&x).unwrap();
        let r: Vec<f64> = b.iter().zip(&ax).map(|(u, v)| u - v).collect();
        let atr = a.transpose().matvec(&r).unwrap();
        let scale = 1.0 + b.iter().map(|v| v.abs()).sum::<f64>();
        prop_assert!(atr.iter().all(|v| v.abs() < 1e-8 * scale));
    }

    #[test]
    fn gram_is_symmetric_psd_and_rank_is_monotone(width in 1usize..12, depth in 1usize..3, seed in any::<u64>()) {
        let dom = BoxDomain::cube(-1.0, 1.0, 1).unwrap();
        let grid = build_grid(&dom, QuadratureScheme::Trapezoid, 33, None).unwrap();
        let net = xavier_init(&Network::zeros(1, depth, width, Activation::Tanh).unwrap(), seed).unwrap();
        let d = net.layer_features(&grid.points, depth).unwrap();
        let g = gram_matrix(&d, &grid).unwrap();
        prop_assert!(g.asymmetry() < 1e-12);
        let mut last = usize::MAX;
        for eps in [0.0, 1e-12, 1e-8, 1e-4, 1e-1] {
            let spec = eps_rank(&g, eps).unwrap();
            prop_assert!(spec.eigenvalues.iter().all(|&l| l >= 0.0));
            prop_assert!(spec.eps_rank <= width);
            prop_assert!(spec.eps_rank <= last);
            last = spec.eps_rank;
        }
    }

    #[test]
    fn xavier_draws_stay_in_bound(width in 1usize..40, depth in 1usize..4, d in 1usize..4, seed in any::<u64>()) {
        let net = xavier_init(&Network::zeros(d, depth, width, Activation::Tanh).unwrap(), seed).unwrap();
        let bound = 1.0 / (width as f64).sqrt();
        prop_assert!(net.to_flat().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn initializers_are_deterministic(width in 2usize..20, seed in any::<u64>()) {
        let dom = BoxDomain::cube(-1.0, 1.0, 2).unwrap();
        let base = Network::zeros(2, 2, width, Activation::Tanh).unwrap();
        for init in [Initializer::Xavier, Initializer::Udi { gamma: 2.0, radius: None }] {
            let a = init.apply(&base, seed, &dom).unwrap();
            let b = init.apply(&base, seed, &dom).unwrap();
            prop_assert_eq!(a.to_flat(), b.to_flat());
        }
    }

    #[test]
    fn checkpoint_round_trips(width in 1usize..10, depth in 1usize..4, seed in any::<u64>()) {
        let net = xavier_init(&Network::zeros(2, depth, width, Activation::Sigmoid).unwrap(), seed).unwrap();
        let back = Network::from_checkpoint(&net.to_checkpoint()).unwrap();
        prop_assert_eq!(back.to_flat(), net.to_flat());
        prop_assert_eq!(back.activation(), net.activation());
    }
}
