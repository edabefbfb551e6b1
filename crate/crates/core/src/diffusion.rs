//! Truncated diffusion operators `S = Σ_{k=1}^{K} α(1−α)^k T^k`.
//!
//! The identity (`k = 0`) term is left out so a node's own features never
//! reach its output through the diffusion branch.

use ndarray::{Array2, ArrayView2};

use crate::graph::{transition_decoupled, TransitionKind, TransitionMatrix, WeightedDigraph};
use crate::sparse::CsrMatrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Congestion,
    FreeFlow,
    Coupled,
}

#[derive(Debug, Clone)]
pub struct DiffusionKernel {
    pub alpha: f64,
    pub k_max: usize,
    pub branch: Branch,
    matrix: CsrMatrix,
    matrix_t: CsrMatrix,
}

/// Weight of hop `k`.
pub fn theta(alpha: f64, k: usize) -> f64 {
    alpha * (1.0 - alpha).powi(k as i32)
}

pub fn build_kernel(t: &TransitionMatrix, alpha: f64, k_max: usize) -> Result<DiffusionKernel> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if k_max == 0 {
        return Err(Error::invalid("k_max must be at least 1"));
    }
    let branch = match t.kind {
        TransitionKind::Congestion => Branch::Congestion,
        TransitionKind::FreeFlow => Branch::FreeFlow,
        TransitionKind::Coupled | TransitionKind::SymNormalized => Branch::Coupled,
    };
    let n = t.matrix.nrows();
    let mut power = t.matrix.clone();
    let mut s = CsrMatrix::zeros(n, n);
    for k in 1..=k_max {
        if k > 1 {
            power = power.matmul(&t.matrix);
        }
        s = s.add_scaled(theta(alpha, k), &power);
    }
    let matrix_t = s.transpose();
    Ok(DiffusionKernel {
        alpha,
        k_max,
        branch,
        matrix: s,
        matrix_t,
    })
}

/// Congestion and free-flow kernels for a graph.
pub fn kernel_pair(g: &WeightedDigraph, alpha: f64, k_max: usize) -> Result<(DiffusionKernel, DiffusionKernel)> {
    let (cog, free) = transition_decoupled(g);
    Ok((build_kernel(&cog, alpha, k_max)?, build_kernel(&free, alpha, k_max)?))
}

impl DiffusionKernel {
    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }

    /// `S · X`.
    pub fn diffuse(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(x)?;
        Ok(self.matrix.mul_dense(x))
    }

    /// `Sᵀ · X`, the adjoint used in backpropagation.
    pub fn diffuse_transpose(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(x)?;
        Ok(self.matrix_t.mul_dense(x))
    }

    fn check(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.nrows() != self.len() {
            return Err(Error::shape(format!(
                "feature matrix has {} rows, kernel has {}",
                x.nrows(),
                self.len()
            )));
        }
        Ok(())
    }
}

/// Free-function form of [`DiffusionKernel::diffuse`].
pub fn diffuse(kernel: &DiffusionKernel, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    kernel.diffuse(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{transition_coupled, tests::random_graph};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense_series(t: &Array2<f64>, alpha: f64, k_max: usize) -> Array2<f64> {
        let n = t.nrows();
        let mut p = Array2::<f64>::eye(n);
        let mut s = Array2::<f64>::zeros((n, n));
        for k in 1..=k_max {
            p = p.dot(t);
            s = s + theta(alpha, k) * &p;
        }
        s
    }

    #[test]
    fn coefficients() {
        assert_abs_diff_eq!(theta(0.1, 1), 0.09, epsilon = 1e-15);
        assert_abs_diff_eq!(theta(0.1, 2), 0.081, epsilon = 1e-15);
        let g = WeightedDigraph::from_edges(3, &[(0, 1, 1.0), (1, 2, 0.5), (2, 0, 0.3)]).unwrap();
        let t = transition_coupled(&g);
        let k = build_kernel(&t, 0.1, 2).unwrap();
        let td = t.matrix.to_dense();
        let expect = 0.09 * &td + 0.081 * td.dot(&td);
        for (a, b) in k.matrix().to_dense().iter().zip(expect.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_transition_gives_zero_kernel() {
        let t = TransitionMatrix {
            kind: TransitionKind::Coupled,
            matrix: CsrMatrix::zeros(4, 4),
        };
        let k = build_kernel(&t, 0.3, 3).unwrap();
        assert_eq!(k.matrix().nnz(), 0);
    }

    #[test]
    fn bad_parameters() {
        let t = TransitionMatrix {
            kind: TransitionKind::Coupled,
            matrix: CsrMatrix::zeros(2, 2),
        };
        assert!(build_kernel(&t, 0.0, 2).is_err());
        assert!(build_kernel(&t, 1.0, 2).is_err());
        assert!(build_kernel(&t, 0.5, 0).is_err());
        let k = build_kernel(&t, 0.5, 1).unwrap();
        assert!(k.diffuse(Array2::zeros((3, 1)).view()).is_err());
    }

    #[test]
    fn row_sum_bound_and_truncation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let g = random_graph(9, 0.3, &mut rng);
        let t = transition_coupled(&g);
        for &alpha in &[0.05, 0.3, 0.7] {
            let k3 = build_kernel(&t, alpha, 3).unwrap();
            let bound: f64 = (1..=3).map(|k| theta(alpha, k)).sum();
            assert!(k3.matrix().norm_inf() <= bound + 1e-12);
            let dense = dense_series(&t.matrix.to_dense(), alpha, 3);
            for (a, b) in k3.matrix().to_dense().iter().zip(dense.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-14);
            }
            let k4 = build_kernel(&t, alpha, 4).unwrap();
            let diff = k4.matrix().add_scaled(-1.0, k3.matrix()).max_abs();
            assert!(diff <= theta(alpha, 4) + 1e-15);
        }
    }

    #[test]
    fn single_edge_congestion_branch() {
        // 0 -> 1, congestion transition has only (0, 1) = 1
        let g = WeightedDigraph::from_edges(2, &[(0, 1, 0.8)]).unwrap();
        let (cog, free) = kernel_pair(&g, 0.5, 1).unwrap();
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        let y = cog.diffuse(x.view()).unwrap();
        assert_eq!(y, array![[0.75, 1.0], [0.0, 0.0]]);
        let y = free.diffuse(x.view()).unwrap();
        assert_eq!(y, array![[0.0, 0.0], [0.25, 0.5]]);
    }

    #[test]
    fn direction_separation_and_no_self_term_on_chain() {
        let edges: Vec<_> = (0..5).map(|i| (i, i + 1, 0.6)).collect();
        let g = WeightedDigraph::from_edges(6, &edges).unwrap();
        let (cog, free) = kernel_pair(&g, 0.2, 3).unwrap();
        for (i, j, _) in cog.matrix().triplets() {
            assert!(j > i, "congestion kernel must pull from downstream only");
        }
        for (i, j, _) in free.matrix().triplets() {
            assert!(j < i, "free-flow kernel must pull from upstream only");
        }
    }

    #[test]
    fn linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_graph(7, 0.4, &mut rng);
        let (k, _) = kernel_pair(&g, 0.25, 3).unwrap();
        let a = Array2::from_shape_fn((7, 3), |_| rng.random_range(-1.0..1.0));
        let b = Array2::from_shape_fn((7, 3), |_| rng.random_range(-1.0..1.0));
        let lhs = k.diffuse((&a + &b).view()).unwrap();
        let rhs = k.diffuse(a.view()).unwrap() + k.diffuse(b.view()).unwrap();
        for (x, y) in lhs.iter().zip(rhs.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        assert!(k.diffuse(Array2::zeros((7, 2)).view()).unwrap().iter().all(|&v| v == 0.0));
    }
}
