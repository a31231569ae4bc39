use ndarray::Array2;

use crate::error::{FlError, Result};
use crate::model::ParamVector;

/// Cosine similarity of two update vectors, clamped to `[-1, 1]`.
pub fn gradient_cosine(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    if a.len() != b.len() {
        return Err(FlError::shape("update vectors differ in length"));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(FlError::UndefinedSimilarity);
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Symmetric pairwise similarities in `[-1, 1]` with a unit diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    values: Array2<f64>,
}

impl SimilarityMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let n = values.nrows();
        if values.ncols() != n {
            return Err(FlError::shape("similarity matrix must be square"));
        }
        for i in 0..n {
            if (values[[i, i]] - 1.0).abs() > 1e-12 {
                return Err(FlError::domain(format!("diagonal entry {i} is not 1")));
            }
            for j in 0..n {
                let v = values[[i, j]];
                if !(-1.0..=1.0).contains(&v) {
                    return Err(FlError::domain(format!("entry ({i}, {j}) = {v} outside [-1, 1]")));
                }
                if (v - values[[j, i]]).abs() > 1e-12 {
                    return Err(FlError::domain(format!("entries ({i}, {j}) and ({j}, {i}) differ")));
                }
            }
        }
        Ok(SimilarityMatrix { values })
    }

    /// Pairwise [`gradient_cosine`] of the given updates.
    pub fn from_updates(updates: &[ParamVector]) -> Result<Self> {
        let n = updates.len();
        let mut values = Array2::eye(n);
        for i in 0..n {
            for j in (i + 1)..n {
                let s = gradient_cosine(&updates[i], &updates[j])?;
                values[[i, j]] = s;
                values[[j, i]] = s;
            }
        }
        if n == 1 && updates[0].norm() == 0.0 {
            return Err(FlError::UndefinedSimilarity);
        }
        Ok(SimilarityMatrix { values })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

/// Complete-linkage agglomeration on `1 - similarity` until two groups
/// remain. Merges pick the closest pair, ties to the lowest indices.
fn bipartition(sim: &SimilarityMatrix, group: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut clusters: Vec<Vec<usize>> = group.iter().map(|&i| vec![i]).collect();
    let linkage = |a: &[usize], b: &[usize]| -> f64 {
        a.iter()
            .flat_map(|&i| b.iter().map(move |&j| 1.0 - sim.get(i, j)))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    while clusters.len() > 2 {
        let mut best = (0, 1, f64::INFINITY);
        for a in 0..clusters.len() {
            for b in (a + 1)..clusters.len() {
                let d = linkage(&clusters[a], &clusters[b]);
                if d < best.2 {
                    best = (a, b, d);
                }
            }
        }
        let merged = clusters.remove(best.1);
        clusters[best.0].extend(merged);
    }
    let mut b = clusters.pop().expect("two clusters");
    let mut a = clusters.pop().expect("two clusters");
    a.sort_unstable();
    b.sort_unstable();
    if a[0] > b[0] {
        (b, a)
    } else {
        (a, b)
    }
}

fn split_recursive(
    sim: &SimilarityMatrix,
    group: Vec<usize>,
    threshold: f64,
    min_size: usize,
    out: &mut Vec<Vec<usize>>,
) {
    if group.len() < 2 {
        out.push(group);
        return;
    }
    let (a, b) = bipartition(sim, &group);
    let cross_max = a
        .iter()
        .flat_map(|&i| b.iter().map(move |&j| sim.get(i, j)))
        .fold(f64::NEG_INFINITY, f64::max);
    if cross_max >= threshold || a.len() < min_size || b.len() < min_size {
        out.push(group);
        return;
    }
    split_recursive(sim, a, threshold, min_size, out);
    split_recursive(sim, b, threshold, min_size, out);
}

/// Recursively bi-partitions `0..n`. A group is split in two by complete
/// linkage and the split is kept only when every cross-group similarity is
/// below `split_threshold` and both sides have at least `min_cluster_size`
/// members. Groups come back sorted, ordered by their smallest member.
pub fn hierarchical_split(sim: &SimilarityMatrix, split_threshold: f64, min_cluster_size: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if sim.is_empty() {
        return out;
    }
    split_recursive(sim, (0..sim.len()).collect(), split_threshold, min_cluster_size.max(1), &mut out);
    for g in out.iter_mut() {
        g.sort_unstable();
    }
    out.sort_by_key(|g| g.first().copied().unwrap_or(usize::MAX));
    out
}
