//! Shared test helpers: an exact small-instance transportation LP oracle
//! and random instance generators.

use plot::numerics::matrix::Matrix;
use plot::transport::DiscreteMeasure;
use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

/// Exact optimal transport cost for a balanced transportation problem by
/// enumerating basic feasible solutions (spanning trees of the bipartite
/// supply/demand graph). Intended for instances up to about 4x4.
pub fn lp_transport_cost(mu: &[f64], nu: &[f64], cost: &Matrix) -> f64 {
    let (m, n) = (mu.len(), nu.len());
    assert_eq!((cost.rows, cost.cols), (m, n));
    let edges: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    let tree_size = m + n - 1;
    let mut best = f64::INFINITY;
    let mut chosen = Vec::with_capacity(tree_size);
    enumerate(&edges, 0, &mut chosen, tree_size, &mut |tree| {
        if let Some(flows) = solve_tree(tree, mu, nu) {
            if flows.iter().all(|&f| f >= -1e-9) {
                let c: f64 = tree.iter().zip(&flows).map(|(&(i, j), &f)| f * cost.get(i, j)).sum();
                if c < best {
                    best = c;
                }
            }
        }
    });
    assert!(best.is_finite(), "no basic feasible solution found");
    best
}

fn enumerate(
    edges: &[(usize, usize)],
    start: usize,
    chosen: &mut Vec<(usize, usize)>,
    size: usize,
    visit: &mut impl FnMut(&[(usize, usize)]),
) {
    if chosen.len() == size {
        visit(chosen);
        return;
    }
    let need = size - chosen.len();
    for k in start..=edges.len().saturating_sub(need) {
        chosen.push(edges[k]);
        enumerate(edges, k + 1, chosen, size, visit);
        chosen.pop();
    }
}

/// Solve the unique flow on a candidate spanning tree by leaf elimination;
/// returns None if the edge set is not a spanning tree.
fn solve_tree(tree: &[(usize, usize)], mu: &[f64], nu: &[f64]) -> Option<Vec<f64>> {
    let (m, n) = (mu.len(), nu.len());
    let nodes = m + n;
    let mut remaining: Vec<f64> = mu.iter().chain(nu.iter()).copied().collect();
    let mut degree = vec![0usize; nodes];
    for &(i, j) in tree {
        degree[i] += 1;
        degree[m + j] += 1;
    }
    let mut flows = vec![f64::NAN; tree.len()];
    let mut alive: Vec<bool> = vec![true; tree.len()];
    for _ in 0..tree.len() {
        // Find a leaf node with exactly one live incident edge.
        let mut leaf = None;
        'outer: for v in 0..nodes {
            if degree[v] == 1 {
                for (e, &(i, j)) in tree.iter().enumerate() {
                    if alive[e] && (i == v || m + j == v) {
                        leaf = Some((v, e));
                        break 'outer;
                    }
                }
            }
        }
        let (v, e) = leaf?;
        let (i, j) = tree[e];
        flows[e] = remaining[v];
        alive[e] = false;
        let other = if i == v { m + j } else { i };
        remaining[other] -= remaining[v];
        remaining[v] = 0.0;
        degree[v] -= 1;
        degree[other] -= 1;
    }
    // Balanced marginals leave zero residual everywhere on a spanning tree.
    if remaining.iter().any(|&r| r.abs() > 1e-7) {
        return None;
    }
    Some(flows)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random measure over `n` random points in `dim` dimensions with uniform
/// or random positive normalized weights.
pub fn random_measure(r: &mut ChaCha8Rng, n: usize, dim: usize, uniform: bool) -> DiscreteMeasure {
    let rows: Vec<Vec<f64>> =
        (0..n).map(|_| (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
    let support = Matrix::from_rows(&rows);
    if uniform {
        DiscreteMeasure::uniform(support)
    } else {
        let mut weights: Vec<f64> = (0..n).map(|_| r.gen_range(0.1..1.0)).collect();
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        DiscreteMeasure { weights, support }
    }
}
