//! k-means++ seeding followed by Lloyd iterations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::numerics::tensor::gemm;
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Cluster index of every row.
    pub labels: Vec<usize>,
    pub centroids: Tensor,
    /// Sum of squared distances of rows to their centroid.
    pub inertia: f64,
    /// Inertia after every assignment step, in order.
    pub history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn seed_plus_plus(x: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (n, f) = (x.rows(), x.last_dim());
    let mut centroids = Vec::with_capacity(k * f);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(x.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(first))).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            rng.gen_range(0..n)
        };
        let c = x.row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), &c));
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

/// Nearest centroid of every row (lowest index on ties) and its squared distance.
fn assign(x: &Tensor, centroids: &[f64], k: usize) -> (Vec<usize>, Vec<f64>) {
    let (n, f) = (x.rows(), x.last_dim());
    // |x − c|² = |x|² − 2 x·c + |c|², with the cross term as one matrix product.
    let mut cross = vec![0.0; n * k];
    gemm(n, f, k, x.data(), false, centroids, true, &mut cross, 0.0);
    let cnorm: Vec<f64> = centroids.chunks(f).map(|c| c.iter().map(|v| v * v).sum()).collect();
    let mut labels = vec![0; n];
    let mut dists = vec![0.0; n];
    for i in 0..n {
        let xnorm: f64 = x.row(i).iter().map(|v| v * v).sum();
        let row = &cross[i * k..(i + 1) * k];
        let mut best = (0, f64::INFINITY);
        for j in 0..k {
            let d = xnorm - 2.0 * row[j] + cnorm[j];
            if d < best.1 {
                best = (j, d);
            }
        }
        labels[i] = best.0;
        // Exact distance for the chosen centroid, so inertia is not skewed by cancellation.
        dists[i] = sq_dist(x.row(i), &centroids[best.0 * f..(best.0 + 1) * f]);
    }
    (labels, dists)
}

/// Clusters the rows of `x: [N, F]` into `k` groups.
///
/// Iterates until assignments stop changing or `max_iters` assignment steps
/// have run. A cluster left empty by an update is re-seeded at the row
/// farthest from its current centroid.
pub fn kmeans(x: &Tensor, k: usize, max_iters: usize, seed: u64) -> Result<KMeansResult> {
    if x.ndim() != 2 {
        return Err(shape_err!("kmeans expects [N, F], got {:?}", x.dims()));
    }
    let (n, f) = (x.rows(), x.last_dim());
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if n < k {
        return Err(Error::Input(format!("{n} points cannot form {k} clusters")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(x, k, &mut rng);
    let (mut labels, mut dists) = assign(x, &centroids, k);
    let mut history = vec![dists.iter().sum::<f64>()];
    let mut iterations = 1;
    while iterations < max_iters.max(1) {
        let mut sums = vec![0.0; k * f];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, v) in sums[l * f..(l + 1) * f].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        let mut taken = vec![false; n];
        for j in 0..k {
            if counts[j] > 0 {
                for (c, s) in centroids[j * f..(j + 1) * f].iter_mut().zip(&sums[j * f..]) {
                    *c = s / counts[j] as f64;
                }
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("n >= k leaves a point to reseed from");
                taken[far] = true;
                dists[far] = 0.0;
                centroids[j * f..(j + 1) * f].copy_from_slice(x.row(far));
            }
        }
        let (new_labels, new_dists) = assign(x, &centroids, k);
        iterations += 1;
        history.push(new_dists.iter().sum());
        let stable = new_labels == labels;
        labels = new_labels;
        dists = new_dists;
        if stable {
            break;
        }
    }
    Ok(KMeansResult {
        labels,
        centroids: Tensor::new([k, f], centroids)?,
        inertia: *history.last().expect("at least one step"),
        history,
        iterations,
    })
}

/// Best of `restarts` runs with seeds derived from `seed`.
pub fn kmeans_restarts(
    x: &Tensor,
    k: usize,
    max_iters: usize,
    restarts: usize,
    seed: u64,
) -> Result<KMeansResult> {
    let mut best: Option<KMeansResult> = None;
    for r in 0..restarts.max(1) {
        let run = kmeans(x, k, max_iters, seed.wrapping_add(r as u64))?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Per-dimension standardisation over all rows; constant columns are centred only.
pub fn standardize_columns(x: &Tensor) -> Tensor {
    let (n, f) = (x.rows(), x.last_dim());
    let mut out = x.clone();
    for j in 0..f {
        let mean = (0..n).map(|i| x.at2(i, j)).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (x.at2(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
        for i in 0..n {
            out.row_mut(i)[j] = (x.at2(i, j) - mean) * inv;
        }
    }
    out
}
