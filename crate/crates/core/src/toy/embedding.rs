use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::pmf::{Partition, TokenId};
use crate::rng::RngStream;

const KMEANS_MAX_ITERS: usize = 100;

/// Codebook stand-in: `V` unit-norm vectors of dimension `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    vocab: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingTable {
    /// Rows are normalized to unit length; zero rows are rejected.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let vocab = rows.len();
        let dim = rows.first().map_or(0, Vec::len);
        if vocab == 0 || dim == 0 {
            return Err(Error::InvalidConfig("embedding table must be non-empty".into()));
        }
        let mut data = Vec::with_capacity(vocab * dim);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != dim {
                return Err(Error::LengthMismatch {
                    expected: dim,
                    actual: row.len(),
                });
            }
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::InvalidConfig(format!("embedding row {i} has norm {norm}")));
            }
            data.extend(row.into_iter().map(|x| x / norm));
        }
        Ok(Self { vocab, dim, data })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, token: TokenId) -> &[f64] {
        let i = token.index();
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }
}

/// Rows uniform on the unit sphere (normalized Gaussians).
pub fn make_embeddings(vocab: usize, dim: usize, seed: u64) -> Result<EmbeddingTable> {
    if vocab == 0 || dim == 0 {
        return Err(Error::InvalidConfig("V and D must be at least 1".into()));
    }
    let mut rng = RngStream::new(seed);
    let rows = (0..vocab)
        .map(|_| {
            loop {
                let row: Vec<f64> = (0..dim)
                    .map(|_| StandardNormal.sample(rng.inner_mut()))
                    .collect();
                if row.iter().any(|x: &f64| *x != 0.0) {
                    return row;
                }
            }
        })
        .collect();
    EmbeddingTable::from_rows(rows)
}

/// Symmetric cosine-distance matrix `1 − <e_i, e_j>` with an exact zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    vocab: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn get(&self, a: TokenId, b: TokenId) -> f64 {
        self.data[a.index() * self.vocab + b.index()]
    }

    pub fn mean_off_diagonal(&self) -> f64 {
        if self.vocab < 2 {
            return 0.0;
        }
        let total: f64 = self.data.iter().sum();
        total / (self.vocab * (self.vocab - 1)) as f64
    }
}

pub fn distance_matrix(table: &EmbeddingTable) -> DistanceMatrix {
    let v = table.vocab;
    let mut data = vec![0.0; v * v];
    for i in 0..v {
        let a = table.row(TokenId::new(i));
        for j in (i + 1)..v {
            let b = table.row(TokenId::new(j));
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let d = (1.0 - dot).clamp(0.0, 2.0);
            data[i * v + j] = d;
            data[j * v + i] = d;
        }
    }
    DistanceMatrix { vocab: v, data }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Static k-means partition of the codebook into `⌈V / G⌉` clusters.
///
/// Lloyd iterations (at most 100) from seeded distinct initial centers. A cluster
/// that empties out takes the point of the largest cluster farthest from that
/// cluster's center.
pub fn static_partition(table: &EmbeddingTable, group_size: usize, seed: u64) -> Result<Partition> {
    if group_size == 0 {
        return Err(Error::InvalidConfig("group size must be at least 1".into()));
    }
    let v = table.vocab;
    let d = table.dim;
    let k = v.div_ceil(group_size);
    let mut rng = RngStream::new(seed);

    let mut centers: Vec<f64> = index::sample(rng.inner_mut(), v, k)
        .into_iter()
        .flat_map(|i| table.row(TokenId::new(i)).to_vec())
        .collect();
    let mut assignment = vec![usize::MAX; v];

    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for i in 0..v {
            let x = table.row(TokenId::new(i));
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let dist = sq_dist(x, &centers[c * d..(c + 1) * d]);
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }

        repair_empty(table, &centers, &mut assignment, k);

        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..v {
            let c = assignment[i];
            counts[c] += 1;
            for (s, x) in sums[c * d..(c + 1) * d].iter_mut().zip(table.row(TokenId::new(i))) {
                *s += x;
            }
        }
        for c in 0..k {
            for s in &mut sums[c * d..(c + 1) * d] {
                *s /= counts[c] as f64;
            }
        }
        centers = sums;
        if !changed {
            break;
        }
    }
    Partition::new(assignment, k)
}

fn repair_empty(table: &EmbeddingTable, centers: &[f64], assignment: &mut [usize], k: usize) {
    let d = table.dim;
    loop {
        let mut counts = vec![0usize; k];
        for &c in assignment.iter() {
            counts[c] += 1;
        }
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            return;
        };
        let largest = (0..k).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap();
        let center = &centers[largest * d..(largest + 1) * d];
        let farthest = (0..assignment.len())
            .filter(|&i| assignment[i] == largest)
            .max_by(|&a, &b| {
                sq_dist(table.row(TokenId::new(a)), center)
                    .total_cmp(&sq_dist(table.row(TokenId::new(b)), center))
                    .then(b.cmp(&a))
            })
            .unwrap();
        assignment[farthest] = empty;
    }
}
