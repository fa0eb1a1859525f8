//! Cosine-similarity matrices, neighbor degrees and patch-similarity diagnostics.

use rayon::prelude::*;
use serde::Serialize;

use crate::embedding_io::{LayerwiseEmbeddings, PatchSet};
use crate::error::{Error, Result};
use crate::matrix::{dot, norm, Matrix};

/// Symmetric `N × N` cosine-similarity matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SimMatrix {
    n: usize,
    values: Vec<f64>,
}

impl SimMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }
}

/// Neighbor count per patch, self included.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DegreeVector(pub Vec<usize>);

impl DegreeVector {
    pub fn counts(&self) -> &[usize] {
        &self.0
    }
}

/// Cosine similarity of every row pair. A zero row has similarity 0 to
/// every other row and 1 to itself.
pub fn cosine_matrix(ps: &PatchSet) -> SimMatrix {
    cosine_matrix_of(ps.data())
}

pub fn cosine_matrix_of(rows: &Matrix) -> SimMatrix {
    let n = rows.rows();
    let unit: Vec<Option<Vec<f64>>> = (0..n)
        .map(|i| {
            let r = rows.row(i);
            let len = norm(r);
            (len > 0.0).then(|| r.iter().map(|v| v / len).collect())
        })
        .collect();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        let Some(ui) = &unit[i] else { continue };
        for j in i + 1..n {
            if let Some(uj) = &unit[j] {
                let s = dot(ui, uj);
                values[i * n + j] = s;
                values[j * n + i] = s;
            }
        }
    }
    SimMatrix { n, values }
}

pub(crate) fn check_theta(theta: f64) -> Result<()> {
    if !(-1.0..=1.0).contains(&theta) {
        return Err(Error::InvalidParameter(format!(
            "similarity threshold must lie in [-1, 1], got {theta}"
        )));
    }
    Ok(())
}

/// `n_i = #{ j : S_ij > θ }`, with `j = i` included.
pub fn neighbor_degrees(s: &SimMatrix, theta: f64) -> Result<DegreeVector> {
    check_theta(theta)?;
    Ok(DegreeVector(
        (0..s.n)
            .map(|i| s.row(i).iter().filter(|&&v| v > theta).count())
            .collect(),
    ))
}

/// Mean cosine similarity over the `M(M−1)/2` unordered row pairs.
pub fn mean_pairwise_similarity(rows: &Matrix) -> Result<f64> {
    let m = rows.rows();
    if m < 2 {
        return Err(Error::InvalidInput(format!(
            "mean pairwise similarity needs at least 2 rows, got {m}"
        )));
    }
    let s = cosine_matrix_of(rows);
    let mut sum = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            sum += s.get(i, j);
        }
    }
    Ok(sum / (m * (m - 1) / 2) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerSimilarity {
    pub layer: usize,
    pub mean_similarity: f64,
    /// Population standard deviation of the per-image means; 0 for a single image.
    pub stddev: f64,
}

/// Mean pairwise patch similarity of each layer of one image.
pub fn layerwise_similarity_profile(le: &LayerwiseEmbeddings) -> Result<Vec<LayerSimilarity>> {
    le.layers()
        .iter()
        .enumerate()
        .map(|(layer, ps)| {
            Ok(LayerSimilarity {
                layer,
                mean_similarity: mean_pairwise_similarity(ps.data())?,
                stddev: 0.0,
            })
        })
        .collect()
}

/// Per-layer means averaged over images. All images must have the same
/// number of layers. Per-image work runs in parallel; the reduction runs in
/// corpus order.
pub fn corpus_similarity_profile(corpus: &[LayerwiseEmbeddings]) -> Result<Vec<LayerSimilarity>> {
    let first = corpus
        .first()
        .ok_or_else(|| Error::InvalidInput("empty corpus".into()))?;
    let n_layers = first.n_layers();
    if let Some(bad) = corpus.iter().find(|le| le.n_layers() != n_layers) {
        return Err(Error::ShapeMismatch(format!(
            "{} has {} layers, expected {n_layers}",
            bad.id(),
            bad.n_layers()
        )));
    }
    let per_image: Vec<Vec<LayerSimilarity>> = corpus
        .par_iter()
        .map(layerwise_similarity_profile)
        .collect::<Result<_>>()?;
    let count = per_image.len() as f64;
    Ok((0..n_layers)
        .map(|layer| {
            let means: Vec<f64> = per_image.iter().map(|p| p[layer].mean_similarity).collect();
            let mean = means.iter().sum::<f64>() / count;
            let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / count;
            LayerSimilarity {
                layer,
                mean_similarity: mean,
                stddev: var.sqrt(),
            }
        })
        .collect())
}

pub fn profile_csv(profile: &[LayerSimilarity]) -> String {
    let mut out = String::from("layer,mean_similarity,stddev\n");
    for p in profile {
        out.push_str(&format!("{},{},{}\n", p.layer, p.mean_similarity, p.stddev));
    }
    out
}
