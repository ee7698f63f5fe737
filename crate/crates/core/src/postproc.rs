//! Iterative K-nearest-neighbor averaging of category probabilities, with
//! neighbors found by cosine similarity of backbone features.

use ndarray::Array2;

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::segpipe::ProbabilityMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PostprocessConfig {
    /// Neighbors per position, the position itself included.
    pub k: usize,
    pub iterations: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig { k: 3, iterations: 25 }
    }
}

impl PostprocessConfig {
    pub fn new(k: usize, iterations: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("K must be >= 1"));
        }
        Ok(PostprocessConfig { k, iterations })
    }
}

/// `neighbors[i]` lists K distinct positions, `i` first, then by decreasing
/// similarity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborGraph {
    neighbors: Vec<Vec<u32>>,
}

impl NeighborGraph {
    pub fn new(neighbors: Vec<Vec<u32>>) -> Result<Self> {
        let n = neighbors.len();
        for (i, row) in neighbors.iter().enumerate() {
            if !row.contains(&(i as u32)) {
                return Err(Error::invalid(format!("neighbor row {i} does not contain itself")));
            }
            if row.iter().any(|&j| j as usize >= n) {
                return Err(Error::invalid(format!("neighbor row {i} has an index out of range")));
            }
            let mut sorted = row.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != row.len() {
                return Err(Error::invalid(format!("neighbor row {i} repeats an index")));
            }
        }
        Ok(NeighborGraph { neighbors })
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.neighbors[i]
    }

    pub fn rows(&self) -> &[Vec<u32>] {
        &self.neighbors
    }
}

/// For each feature row, itself plus the K−1 other rows of highest cosine
/// similarity; equal similarities go to the lower index.
pub fn knn_graph<T: Scalar>(features: &FeatureMap<T>, k: usize) -> Result<NeighborGraph> {
    let n = features.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("K = {k} must lie in 1..={n}")));
    }
    let mut unit = features.rows.clone();
    for (i, mut row) in unit.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == T::zero() {
            return Err(Error::invalid(format!(
                "feature row {i} has zero norm; cosine similarity is undefined"
            )));
        }
        row.mapv_inplace(|v| v / norm);
    }
    let sims: Array2<T> = unit.dot(&unit.t());
    let mut order: Vec<u32> = Vec::with_capacity(n);
    let neighbors = (0..n)
        .map(|i| {
            order.clear();
            order.extend((0..n as u32).filter(|&j| j as usize != i));
            let row = sims.row(i);
            order.sort_by(|&a, &b| {
                row[b as usize]
                    .partial_cmp(&row[a as usize])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            std::iter::once(i as u32)
                .chain(order.iter().copied().take(k - 1))
                .collect()
        })
        .collect();
    Ok(NeighborGraph { neighbors })
}

/// Synchronous neighborhood averaging: every iteration reads only the previous
/// iterate.
pub fn smooth<T: Scalar>(p: &ProbabilityMap<T>, graph: &NeighborGraph, iterations: usize) -> Result<ProbabilityMap<T>> {
    if graph.len() != p.len() {
        return Err(Error::shape(format!(
            "graph has {} rows, map has {}",
            graph.len(),
            p.len()
        )));
    }
    let mut cur = p.probs.clone();
    let mut next = Array2::<T>::zeros(cur.raw_dim());
    for _ in 0..iterations {
        for (i, mut dst) in next.rows_mut().into_iter().enumerate() {
            dst.fill(T::zero());
            let nbrs = graph.row(i);
            for &j in nbrs {
                dst += &cur.row(j as usize);
            }
            let count = T::lit(nbrs.len() as f64);
            dst.mapv_inplace(|v| v / count);
        }
        std::mem::swap(&mut cur, &mut next);
    }
    ProbabilityMap::new(cur, p.h, p.w)
}
