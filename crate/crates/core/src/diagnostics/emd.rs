//! Earth mover's distance between uniformly weighted point clouds.
//!
//! The transport problem is solved exactly as an integer min-cost flow: with `n`
//! sources and `m` sinks, each source supplies `m / g` units and each sink absorbs
//! `n / g` units (`g = gcd(n, m)`), which is the uniform-weight problem scaled by
//! `nm / g`. Flow is pushed along successive shortest paths (Dijkstra on reduced
//! costs), so for equal sizes the result is an optimal assignment.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GroundMetric {
    #[default]
    Euclidean,
    /// Great-circle arc length between unit vectors.
    Geodesic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmdConfig {
    pub metric: GroundMetric,
    /// Sets larger than this are subsampled.
    pub max_exact: usize,
    /// Number of subsample draws averaged above `max_exact`.
    pub draws: usize,
    pub seed: u64,
}

impl Default for EmdConfig {
    fn default() -> Self {
        Self {
            metric: GroundMetric::Euclidean,
            max_exact: 512,
            draws: 5,
            seed: 0,
        }
    }
}

/// Optimal transport plan in integer units plus its cost under uniform weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Transport {
    /// `flow[[i, j]]` units moved from source `i` to sink `j`.
    pub flow: Array2<u64>,
    /// Total mass in flow units (`nm / g`).
    pub total: u64,
    pub cost: f64,
}

pub fn ground_cost(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, metric: GroundMetric) -> Array2<f64> {
    Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| {
        let (x, y) = (a.row(i), b.row(j));
        match metric {
            GroundMetric::Euclidean => x
                .iter()
                .zip(y.iter())
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt(),
            GroundMetric::Geodesic => x.dot(&y).clamp(-1.0, 1.0).acos(),
        }
    })
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Exact uniform-weight transport for a cost matrix.
pub fn solve_transport(cost: ArrayView2<'_, f64>) -> Result<Transport> {
    let (n, m) = cost.dim();
    if n == 0 || m == 0 {
        return Err(Error::EmptySet);
    }
    if cost.iter().any(|c| !c.is_finite() || *c < 0.0) {
        return Err(Error::InvalidArgument("transport costs must be finite and >= 0".into()));
    }
    let g = gcd(n, m);
    let (supply, demand) = ((m / g) as u64, (n / g) as u64);
    let mut left = vec![supply; n];
    let mut need = vec![demand; m];
    let mut flow = Array2::<u64>::zeros((n, m));
    // potentials: sources 0..n, sinks n..n+m
    let mut pot = vec![0.0f64; n + m];
    let total = supply * n as u64;
    let mut shipped = 0u64;
    let inf = f64::INFINITY;
    let v = n + m;
    let mut dist = vec![inf; v];
    let mut prev = vec![usize::MAX; v];
    let mut done = vec![false; v];
    while shipped < total {
        dist.fill(inf);
        prev.fill(usize::MAX);
        done.fill(false);
        // sources with spare supply always sit at distance 0, so their potentials stay 0
        // and the implicit super-source edges have zero reduced cost
        for i in 0..n {
            if left[i] > 0 {
                dist[i] = 0.0;
            }
        }
        loop {
            let mut u = usize::MAX;
            let mut best = inf;
            for (k, (&d, &fin)) in dist.iter().zip(&done).enumerate() {
                if !fin && d < best {
                    best = d;
                    u = k;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u < n {
                for j in 0..m {
                    let rc = (cost[[u, j]] + pot[u] - pot[n + j]).max(0.0);
                    let nd = best + rc;
                    if nd < dist[n + j] {
                        dist[n + j] = nd;
                        prev[n + j] = u;
                    }
                }
            } else {
                let j = u - n;
                for i in 0..n {
                    if flow[[i, j]] > 0 {
                        let rc = (-cost[[i, j]] + pot[u] - pot[i]).max(0.0);
                        let nd = best + rc;
                        if nd < dist[i] {
                            dist[i] = nd;
                            prev[i] = u;
                        }
                    }
                }
            }
        }
        let mut sink = usize::MAX;
        let mut best = inf;
        for j in 0..m {
            if need[j] > 0 && dist[n + j] < best {
                best = dist[n + j];
                sink = j;
            }
        }
        if sink == usize::MAX {
            return Err(Error::NumericFailure("transport network disconnected".into()));
        }
        for (p, d) in pot.iter_mut().zip(&dist) {
            *p += d.min(best);
        }
        // walk back to find the bottleneck
        let mut bottleneck = need[sink];
        let mut node = n + sink;
        loop {
            let p = prev[node];
            if p == usize::MAX {
                bottleneck = bottleneck.min(left[node]);
                break;
            }
            if node < n {
                // backward edge sink p -> source node cancels flow[node][p - n]
                bottleneck = bottleneck.min(flow[[node, p - n]]);
            }
            node = p;
        }
        let mut node = n + sink;
        loop {
            let p = prev[node];
            if p == usize::MAX {
                left[node] -= bottleneck;
                break;
            }
            if node < n {
                flow[[node, p - n]] -= bottleneck;
            } else {
                flow[[p, node - n]] += bottleneck;
            }
            node = p;
        }
        need[sink] -= bottleneck;
        shipped += bottleneck;
    }
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..m {
            if flow[[i, j]] > 0 {
                acc += flow[[i, j]] as f64 * cost[[i, j]];
            }
        }
    }
    Ok(Transport {
        flow,
        total,
        cost: acc / total as f64,
    })
}

/// EMD between two point sets (rows) with uniform weights.
pub fn emd(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, cfg: &EmdConfig) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::EmptySet);
    }
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch {
            expected: a.ncols(),
            found: b.ncols(),
        });
    }
    let cap = cfg.max_exact.max(1);
    if a.nrows() <= cap && b.nrows() <= cap {
        return Ok(solve_transport(ground_cost(a, b, cfg.metric).view())?.cost);
    }
    let draws = cfg.draws.max(1);
    let mut sum = 0.0;
    for k in 0..draws {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, &[seeds::label("emd"), k as u64]));
        let mut pick = |x: ArrayView2<'_, f64>| -> Array2<f64> {
            if x.nrows() <= cap {
                x.to_owned()
            } else {
                let mut idx = sample(&mut rng, x.nrows(), cap).into_vec();
                idx.sort_unstable();
                x.select(Axis(0), &idx)
            }
        };
        let (sa, sb) = (pick(a), pick(b));
        sum += solve_transport(ground_cost(sa.view(), sb.view(), cfg.metric).view())?.cost;
    }
    Ok(sum / draws as f64)
}

/// Minimum over all assignments of `sum_i cost[i, perm(i)] / n`, by enumeration.
/// Exponential; meant as a reference for small `n`.
pub fn brute_force_assignment(cost: ArrayView2<'_, f64>) -> f64 {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "brute force needs a square cost matrix");
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    // Heap's algorithm
    let mut c = vec![0usize; n];
    let eval = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum::<f64>();
    best = best.min(eval(&perm));
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(eval(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best / n as f64
}
