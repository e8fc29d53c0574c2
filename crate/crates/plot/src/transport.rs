//! Sinkhorn solvers for balanced entropic transport and one-sided
//! unbalanced transport over discrete measures, plus conversion of
//! coupling rows into renormalized top-K intervention weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::matrix::{squared_distance, Matrix};

pub const DEFAULT_MAX_ITERS: usize = 10_000;
pub const DEFAULT_TOL: f64 = 1e-9;

/// Empirical measure: nonnegative weights over rows of a support matrix.
#[derive(Debug, Clone)]
pub struct DiscreteMeasure {
    pub weights: Vec<f64>,
    pub support: Matrix,
}

impl DiscreteMeasure {
    /// Uniform weights 1/n over the support rows.
    pub fn uniform(support: Matrix) -> Self {
        let n = support.rows;
        DiscreteMeasure { weights: vec![1.0 / n as f64; n], support }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Squared Euclidean cost between the supports of two measures.
pub fn cost_matrix(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<Matrix> {
    if mu.support.cols != nu.support.cols {
        return Err(Error::DimensionMismatch(format!(
            "support feature dims {} vs {}",
            mu.support.cols, nu.support.cols
        )));
    }
    let mut c = Matrix::zeros(mu.len(), nu.len());
    for i in 0..mu.len() {
        for j in 0..nu.len() {
            c.set(i, j, squared_distance(mu.support.row(i), nu.support.row(j)));
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CouplingMode {
    Balanced,
    OneSidedUnbalanced { beta: f64 },
}

/// Transport plan with solver metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Coupling {
    pub pi: Matrix,
    pub eps: f64,
    pub mode: CouplingMode,
    pub iterations: usize,
    pub converged: bool,
}

impl Coupling {
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.pi.rows).map(|i| self.pi.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.pi.cols];
        for i in 0..self.pi.rows {
            for (acc, v) in s.iter_mut().zip(self.pi.row(i)) {
                *acc += v;
            }
        }
        s
    }

    pub fn transport_cost(&self, cost: &Matrix) -> f64 {
        self.pi.data.iter().zip(&cost.data).map(|(p, c)| p * c).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.pi.rows {
            let row: Vec<String> = self.pi.row(i).iter().map(|v| format!("{v:.12e}")).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

fn log_sum_exp(terms: impl Iterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = terms.collect();
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_inputs(mu: &DiscreteMeasure, nu: &DiscreteMeasure, eps: f64) -> Result<()> {
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    if mu.is_empty() || nu.is_empty() {
        return Err(Error::InvalidArgument("empty measure".into()));
    }
    if mu.support.cols != nu.support.cols {
        return Err(Error::DimensionMismatch("measure supports differ in feature dimension".into()));
    }
    Ok(())
}

/// Log-domain Sinkhorn for the balanced entropic plan.
///
/// Stops when the L1 marginal violation on both sides drops below `tol`, or
/// reports `converged = false` after `max_iters` iterations.
pub fn sinkhorn_eot(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    eps: f64,
    max_iters: usize,
    tol: f64,
) -> Result<Coupling> {
    check_inputs(mu, nu, eps)?;
    let cost = cost_matrix(mu, nu)?;
    solve(mu, nu, &cost, eps, None, max_iters, tol)
}

/// One-sided unbalanced Sinkhorn: the row marginal is fixed to mu, the
/// column marginal is relaxed by a KL penalty of strength `beta` (scaling
/// update damped by the exponent beta / (beta + eps)).
pub fn sinkhorn_uot_one_sided(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    eps: f64,
    beta: f64,
    max_iters: usize,
    tol: f64,
) -> Result<Coupling> {
    check_inputs(mu, nu, eps)?;
    if beta <= 0.0 {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    let cost = cost_matrix(mu, nu)?;
    solve(mu, nu, &cost, eps, Some(beta), max_iters, tol)
}

/// Same solvers, but from a precomputed cost matrix.
pub fn solve(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    cost: &Matrix,
    eps: f64,
    beta: Option<f64>,
    max_iters: usize,
    tol: f64,
) -> Result<Coupling> {
    let m = mu.len();
    let n = nu.len();
    let log_mu: Vec<f64> = mu.weights.iter().map(|w| w.max(1e-300).ln()).collect();
    let log_nu: Vec<f64> = nu.weights.iter().map(|w| w.max(1e-300).ln()).collect();
    let damp = beta.map(|b| b / (b + eps)).unwrap_or(1.0);

    let mut f = vec![0.0; m];
    let mut g = vec![0.0; n];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        let g_prev = g.clone();
        for j in 0..n {
            let lse = log_sum_exp((0..m).map(|i| (f[i] - cost.get(i, j)) / eps));
            g[j] = damp * eps * (log_nu[j] - lse);
        }
        // Row update last so the mu marginal holds exactly.
        for i in 0..m {
            let lse = log_sum_exp((0..n).map(|j| (g[j] - cost.get(i, j)) / eps));
            f[i] = eps * (log_mu[i] - lse);
        }
        let pi = plan(&f, &g, cost, eps);
        let row_violation: f64 = (0..m)
            .map(|i| (pi.row(i).iter().sum::<f64>() - mu.weights[i]).abs())
            .sum();
        let done = match beta {
            None => {
                let mut col_violation = 0.0;
                for j in 0..n {
                    let s: f64 = (0..m).map(|i| pi.get(i, j)).sum();
                    col_violation += (s - nu.weights[j]).abs();
                }
                row_violation + col_violation < tol
            }
            Some(_) => {
                let pot_change = g.iter().zip(&g_prev).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                row_violation < tol && pot_change < tol * eps.max(1.0)
            }
        };
        if done {
            converged = true;
            break;
        }
    }
    let pi = plan(&f, &g, cost, eps);
    let mode = match beta {
        None => CouplingMode::Balanced,
        Some(b) => CouplingMode::OneSidedUnbalanced { beta: b },
    };
    Ok(Coupling { pi, eps, mode, iterations, converged })
}

fn plan(f: &[f64], g: &[f64], cost: &Matrix, eps: f64) -> Matrix {
    let mut pi = Matrix::zeros(f.len(), g.len());
    for i in 0..f.len() {
        for j in 0..g.len() {
            pi.set(i, j, ((f[i] + g[j] - cost.get(i, j)) / eps).exp());
        }
    }
    pi
}

/// Renormalized top-K weights of one coupling row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HandleWeights {
    pub variable: usize,
    pub site_indices: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Keep the K highest-mass sites of row `i` and renormalize to sum 1.
/// Ties at the K-th entry break toward the lower site index.
pub fn topk_renormalize(coupling: &Coupling, i: usize, k: usize) -> Result<HandleWeights> {
    let n = coupling.pi.cols;
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("K = {k} out of range 1..={n}")));
    }
    let row = coupling.pi.row(i);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    let mut site_indices: Vec<usize> = order[..k].to_vec();
    site_indices.sort_unstable();
    let total: f64 = site_indices.iter().map(|&j| row[j]).sum();
    if total <= 0.0 {
        return Err(Error::DegenerateCouplingRow(i));
    }
    let weights = site_indices.iter().map(|&j| row[j] / total).collect();
    Ok(HandleWeights { variable: i, site_indices, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::SeedStream;
    use rand::Rng;

    fn measure(points: Vec<Vec<f64>>) -> DiscreteMeasure {
        DiscreteMeasure::uniform(Matrix::from_rows(&points))
    }

    fn coupling_from_row(row: Vec<f64>) -> Coupling {
        Coupling {
            pi: Matrix::from_vec(1, row.len(), row),
            eps: 1.0,
            mode: CouplingMode::Balanced,
            iterations: 0,
            converged: true,
        }
    }

    #[test]
    fn one_by_one_is_trivial() {
        let mu = measure(vec![vec![0.0]]);
        let nu = measure(vec![vec![1.0]]);
        let c = sinkhorn_eot(&mu, &nu, 0.5, 1000, 1e-9).unwrap();
        assert!((c.pi.get(0, 0) - 1.0).abs() < 1e-9);
        assert!(c.converged);
    }

    #[test]
    fn identical_supports_tiny_eps_is_diagonal() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let mu = measure(pts.clone());
        let nu = measure(pts);
        let c = sinkhorn_eot(&mu, &nu, 1e-3, 100_000, 1e-10).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 / 3.0 } else { 0.0 };
                assert!((c.pi.get(i, j) - target).abs() < 1e-6, "pi[{i}][{j}] = {}", c.pi.get(i, j));
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mu = measure(vec![vec![0.0]]);
        let nu = measure(vec![vec![1.0]]);
        assert!(sinkhorn_eot(&mu, &nu, 0.0, 10, 1e-9).is_err());
        assert!(sinkhorn_uot_one_sided(&mu, &nu, 1.0, 0.0, 10, 1e-9).is_err());
        let empty = DiscreteMeasure { weights: vec![], support: Matrix::zeros(0, 1) };
        assert!(sinkhorn_eot(&empty, &nu, 1.0, 10, 1e-9).is_err());
    }

    #[test]
    fn uot_large_beta_recovers_balanced() {
        let mut rng = SeedStream::new(31).rng("uot-beta");
        for _ in 0..5 {
            let pts_a: Vec<Vec<f64>> = (0..3).map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let pts_b: Vec<Vec<f64>> = (0..4).map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let mu = measure(pts_a);
            let nu = measure(pts_b);
            let eot = sinkhorn_eot(&mu, &nu, 0.1, 50_000, 1e-12).unwrap();
            let uot = sinkhorn_uot_one_sided(&mu, &nu, 0.1, 1e6, 50_000, 1e-12).unwrap();
            for (a, b) in eot.pi.data.iter().zip(&uot.pi.data) {
                assert!((a - b).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn uot_outlier_column_left_unmatched() {
        // 2x3 instance: one nu atom much farther than beta allows.
        let mu = measure(vec![vec![0.0, 0.0], vec![1.0, 0.0]]);
        let nu = measure(vec![vec![0.1, 0.0], vec![0.9, 0.0], vec![100.0, 0.0]]);
        let c = sinkhorn_uot_one_sided(&mu, &nu, 0.05, 1.0, 50_000, 1e-10).unwrap();
        let cols = c.col_sums();
        assert!(cols[2] < 1e-6, "outlier column mass {}", cols[2]);
        for (s, w) in c.row_sums().iter().zip(&[0.5, 0.5]) {
            assert!((s - w).abs() < 1e-8);
        }
    }

    #[test]
    fn uot_one_by_one_row_sum_is_one() {
        let mu = measure(vec![vec![0.0]]);
        let nu = measure(vec![vec![2.0]]);
        let c = sinkhorn_uot_one_sided(&mu, &nu, 0.5, 3.0, 10_000, 1e-10).unwrap();
        assert!((c.row_sums()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn eot_entries_strictly_positive() {
        let mut rng = SeedStream::new(37).rng("eot-pos");
        let mu = measure((0..4).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen()]).collect());
        let nu = measure((0..5).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen()]).collect());
        let c = sinkhorn_eot(&mu, &nu, 0.5, 10_000, 1e-9).unwrap();
        assert!(c.pi.data.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn decreasing_eps_weakly_decreases_cost() {
        let mut rng = SeedStream::new(41).rng("eot-eps");
        for _ in 0..5 {
            let mu = measure((0..4).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect());
            let nu = measure((0..4).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect());
            let cost = cost_matrix(&mu, &nu).unwrap();
            let mut prev = f64::INFINITY;
            for eps in [1.0, 0.3, 0.1, 0.03, 0.01] {
                let c = sinkhorn_eot(&mu, &nu, eps, 100_000, 1e-11).unwrap();
                let tc = c.transport_cost(&cost);
                assert!(tc <= prev + 1e-9, "cost rose from {prev} to {tc} at eps {eps}");
                prev = tc;
            }
        }
    }

    #[test]
    fn balanced_marginals_on_random_instances() {
        let mut rng = SeedStream::new(43).rng("eot-marg");
        for _ in 0..100 {
            let m = rng.gen_range(1..=10);
            let n = rng.gen_range(1..=10);
            let mu = measure((0..m).map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect());
            let nu = measure((0..n).map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect());
            let c = sinkhorn_eot(&mu, &nu, 0.2, 50_000, 1e-9).unwrap();
            assert!(c.converged);
            let row_err: f64 = c.row_sums().iter().zip(&mu.weights).map(|(a, b)| (a - b).abs()).sum();
            let col_err: f64 = c.col_sums().iter().zip(&nu.weights).map(|(a, b)| (a - b).abs()).sum();
            assert!(row_err + col_err < 1e-6);
        }
    }

    #[test]
    fn topk_hand_example() {
        let c = coupling_from_row(vec![0.5, 0.3, 0.2]);
        let hw = topk_renormalize(&c, 0, 2).unwrap();
        assert_eq!(hw.site_indices, vec![0, 1]);
        assert!((hw.weights[0] - 0.625).abs() < 1e-12);
        assert!((hw.weights[1] - 0.375).abs() < 1e-12);
    }

    #[test]
    fn topk_full_and_single() {
        let c = coupling_from_row(vec![0.2, 0.5, 0.3]);
        let full = topk_renormalize(&c, 0, 3).unwrap();
        assert_eq!(full.site_indices, vec![0, 1, 2]);
        assert!((full.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((full.weights[1] - 0.5).abs() < 1e-12);
        let single = topk_renormalize(&c, 0, 1).unwrap();
        assert_eq!(single.site_indices, vec![1]);
        assert_eq!(single.weights, vec![1.0]);
    }

    #[test]
    fn topk_tie_breaks_to_lower_index() {
        let c = coupling_from_row(vec![0.25, 0.25, 0.25, 0.25]);
        let hw = topk_renormalize(&c, 0, 2).unwrap();
        assert_eq!(hw.site_indices, vec![0, 1]);
    }

    #[test]
    fn topk_degenerate_row_errors() {
        let c = coupling_from_row(vec![0.0, 0.0]);
        assert!(matches!(topk_renormalize(&c, 0, 1), Err(Error::DegenerateCouplingRow(0))));
    }
}
