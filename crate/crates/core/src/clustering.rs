//! Adaptive centroid selection, nearest-centroid refinement and spatial
//! ordering.
//!
//! Centroids are picked greedily from the neighborhood graph in which two
//! patches are adjacent when their cosine similarity exceeds `theta`. The
//! highest-degree remaining patch becomes a centroid and every remaining
//! patch adjacent to it drops out of the candidate pool. The number of
//! clusters therefore follows the image content rather than a fixed budget.
//! Afterwards every patch joins its most similar centroid.

use serde::{Deserialize, Serialize};

use crate::embedding_io::PatchSet;
use crate::error::{Error, Result};
use crate::similarity::{cosine_matrix, neighbor_degrees, SimMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegreePolicy {
    /// Degrees computed once on the full graph, candidates sorted once.
    #[default]
    Static,
    /// Degrees recomputed on the surviving candidates before every pick.
    Recompute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreak {
    #[default]
    LowestIndex,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GranularityConfig {
    pub theta: f64,
    pub degree_policy: DegreePolicy,
    pub tie_break: TieBreak,
}

impl GranularityConfig {
    pub fn new(theta: f64) -> Result<Self> {
        let cfg = Self {
            theta,
            degree_policy: DegreePolicy::Static,
            tie_break: TieBreak::LowestIndex,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_policy(mut self, policy: DegreePolicy) -> Self {
        self.degree_policy = policy;
        self
    }

    /// `theta` must lie in the open interval (-1, 1).
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > -1.0 && self.theta < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "theta must lie in (-1, 1), got {}",
                self.theta
            )));
        }
        Ok(())
    }
}

/// Partition of an image's patches into `k` clusters.
///
/// `centroids[k]` is the anchoring patch of cluster `k`, listed in row-major
/// grid order; `assignment[i]` is the (0-based) cluster of patch `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clustering {
    pub centroids: Vec<usize>,
    pub assignment: Vec<usize>,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn n_patches(&self) -> usize {
        self.assignment.len()
    }

    /// Patch indices of cluster `k`, ascending.
    pub fn members(&self, k: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| (a == k).then_some(i))
            .collect()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }

    /// Checks that the assignment covers `0..k` with nonempty clusters and
    /// that each centroid belongs to its own cluster.
    pub fn validate(&self, n_patches: usize) -> Result<()> {
        if self.assignment.len() != n_patches {
            return Err(Error::ShapeMismatch(format!(
                "assignment covers {} patches, expected {n_patches}",
                self.assignment.len()
            )));
        }
        let k = self.k();
        if k == 0 {
            return Err(Error::InvalidInput("clustering has no centroids".into()));
        }
        if let Some(&bad) = self.assignment.iter().find(|&&a| a >= k) {
            return Err(Error::InvalidInput(format!("cluster index {bad} out of range 0..{k}")));
        }
        for (c, &centroid) in self.centroids.iter().enumerate() {
            if centroid >= n_patches {
                return Err(Error::InvalidInput(format!(
                    "centroid {centroid} out of range 0..{n_patches}"
                )));
            }
            if self.assignment[centroid] != c {
                return Err(Error::InvalidInput(format!(
                    "centroid {centroid} is not assigned to its own cluster {c}"
                )));
            }
        }
        Ok(())
    }
}

/// Greedy centroid selection. Returns patch indices in selection order.
pub fn select_centroids(s: &SimMatrix, cfg: &GranularityConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    match cfg.degree_policy {
        DegreePolicy::Static => select_static(s, cfg.theta),
        DegreePolicy::Recompute => Ok(select_recompute(s, cfg.theta)),
    }
}

fn select_static(s: &SimMatrix, theta: f64) -> Result<Vec<usize>> {
    let degrees = neighbor_degrees(s, theta)?;
    let mut order: Vec<usize> = (0..s.n()).collect();
    // Stable sort keeps lower indices first among equal degrees.
    order.sort_by(|&a, &b| degrees.0[b].cmp(&degrees.0[a]));

    let mut alive = vec![true; s.n()];
    let mut centroids = Vec::new();
    for &c in &order {
        if !alive[c] {
            continue;
        }
        centroids.push(c);
        alive[c] = false;
        for (j, &v) in s.row(c).iter().enumerate() {
            if v > theta {
                alive[j] = false;
            }
        }
    }
    Ok(centroids)
}

fn select_recompute(s: &SimMatrix, theta: f64) -> Vec<usize> {
    let n = s.n();
    let mut alive = vec![true; n];
    let mut degree: Vec<usize> = (0..n)
        .map(|i| s.row(i).iter().filter(|&&v| v > theta).count())
        .collect();
    let mut remaining = n;
    let mut centroids = Vec::new();
    while remaining > 0 {
        let c = (0..n)
            .filter(|&i| alive[i])
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if degree[b] >= degree[i] => Some(b),
                _ => Some(i),
            })
            .expect("remaining > 0");
        centroids.push(c);
        let removed: Vec<usize> = (0..n)
            .filter(|&j| alive[j] && (j == c || s.get(c, j) > theta))
            .collect();
        for &j in &removed {
            alive[j] = false;
        }
        remaining -= removed.len();
        for i in (0..n).filter(|&i| alive[i]) {
            let row = s.row(i);
            degree[i] -= removed.iter().filter(|&&j| row[j] > theta).count();
        }
    }
    centroids
}

/// Assigns each patch to its most similar centroid, preferring the earliest
/// centroid in `centroids` on ties. Cluster `k` is `centroids[k]`.
pub fn refine_assignments(ps: &PatchSet, centroids: &[usize]) -> Result<Clustering> {
    refine_with_similarity(&cosine_matrix(ps), centroids)
}

pub fn refine_with_similarity(s: &SimMatrix, centroids: &[usize]) -> Result<Clustering> {
    if centroids.is_empty() {
        return Err(Error::InvalidInput("empty centroid list".into()));
    }
    let n = s.n();
    let mut seen = vec![false; n];
    for &c in centroids {
        if c >= n {
            return Err(Error::InvalidInput(format!("centroid {c} out of range 0..{n}")));
        }
        if std::mem::replace(&mut seen[c], true) {
            return Err(Error::InvalidInput(format!("duplicate centroid {c}")));
        }
    }
    let assignment = (0..n)
        .map(|i| {
            let row = s.row(i);
            let mut best = 0;
            for (k, &c) in centroids.iter().enumerate().skip(1) {
                if row[c] > row[centroids[best]] {
                    best = k;
                }
            }
            best
        })
        .collect();
    Ok(Clustering {
        centroids: centroids.to_vec(),
        assignment,
    })
}

/// Sorts centroids by row-major grid position.
pub fn order_centroids_spatial(centroids: &[usize], grid_h: usize, grid_w: usize) -> Result<Vec<usize>> {
    let n = grid_h * grid_w;
    if let Some(&bad) = centroids.iter().find(|&&c| c >= n) {
        return Err(Error::InvalidInput(format!(
            "centroid {bad} outside {grid_h}x{grid_w} grid"
        )));
    }
    let mut sorted = centroids.to_vec();
    sorted.sort_by_key(|&c| (c / grid_w, c % grid_w));
    Ok(sorted)
}

/// Full clustering pipeline: similarity, greedy selection, refinement, then
/// relabeling so cluster `k` is the `k`-th centroid in grid order.
pub fn cluster(ps: &PatchSet, cfg: &GranularityConfig) -> Result<Clustering> {
    let s = cosine_matrix(ps);
    cluster_with_similarity(&s, ps.grid(), cfg)
}

pub fn cluster_with_similarity(
    s: &SimMatrix,
    (grid_h, grid_w): (usize, usize),
    cfg: &GranularityConfig,
) -> Result<Clustering> {
    let selected = select_centroids(s, cfg)?;
    let refined = refine_with_similarity(s, &selected)?;
    let spatial = order_centroids_spatial(&selected, grid_h, grid_w)?;

    let mut relabel = vec![0; selected.len()];
    for (new, c) in spatial.iter().enumerate() {
        let old = selected.iter().position(|x| x == c).expect("same centroid set");
        relabel[old] = new;
    }
    let clustering = Clustering {
        centroids: spatial,
        assignment: refined.assignment.iter().map(|&a| relabel[a]).collect(),
    };
    // Cross-centroid similarity is at most theta < 1, so every centroid
    // wins its own row and no cluster can be empty.
    assert!(
        clustering.validate(s.n()).is_ok(),
        "refinement produced an invalid clustering"
    );
    Ok(clustering)
}

/// On-disk form of a clustering, also consumed by the renderer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterExport {
    pub id: String,
    pub theta: f64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub k: usize,
    pub centroids: Vec<usize>,
    pub assignment: Vec<usize>,
}

impl ClusterExport {
    pub fn new(ps: &PatchSet, theta: f64, cl: &Clustering) -> Self {
        let (grid_h, grid_w) = ps.grid();
        Self {
            id: ps.id().to_string(),
            theta,
            grid_h,
            grid_w,
            k: cl.k(),
            centroids: cl.centroids.clone(),
            assignment: cl.assignment.clone(),
        }
    }

    pub fn clustering(&self) -> Result<Clustering> {
        if self.grid_h * self.grid_w != self.assignment.len() {
            return Err(Error::ShapeMismatch(format!(
                "grid {}x{} does not match {} assignments",
                self.grid_h,
                self.grid_w,
                self.assignment.len()
            )));
        }
        if self.k != self.centroids.len() {
            return Err(Error::ShapeMismatch(format!(
                "k = {} but {} centroids listed",
                self.k,
                self.centroids.len()
            )));
        }
        let cl = Clustering {
            centroids: self.centroids.clone(),
            assignment: self.assignment.clone(),
        };
        cl.validate(self.assignment.len())?;
        Ok(cl)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding_io::{synth_clustered, SynthSpec};
    use crate::matrix::Matrix;

    fn four() -> PatchSet {
        PatchSet::from_rows(
            "four",
            2,
            2,
            &[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]],
        )
        .unwrap()
    }

    fn cfg(theta: f64) -> GranularityConfig {
        GranularityConfig::new(theta).unwrap()
    }

    fn identity(n: usize) -> PatchSet {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        PatchSet::new("eye", 1, n, m).unwrap()
    }

    #[test]
    fn low_threshold_merges_everything() {
        let s = cosine_matrix(&four());
        assert_eq!(neighbor_degrees(&s, 0.5).unwrap().0, vec![3, 3, 2, 4]);
        assert_eq!(select_centroids(&s, &cfg(0.5)).unwrap(), vec![3]);
    }

    #[test]
    fn high_threshold_splits() {
        let s = cosine_matrix(&four());
        assert_eq!(neighbor_degrees(&s, 0.9).unwrap().0, vec![2, 2, 1, 1]);
        assert_eq!(select_centroids(&s, &cfg(0.9)).unwrap(), vec![0, 2, 3]);
    }

    #[test]
    fn orthogonal_rows_are_all_centroids() {
        let s = cosine_matrix(&identity(6));
        for theta in [0.1, 0.5, 0.9] {
            for policy in [DegreePolicy::Static, DegreePolicy::Recompute] {
                let c = select_centroids(&s, &cfg(theta).with_policy(policy)).unwrap();
                assert_eq!(c, (0..6).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn recompute_policy_differs_from_static_on_a_chain() {
        // Seven points on a circle; only chain neighbors exceed theta.
        // Degrees (2,3,3,3,3,3,2). Static picks 1, then 3, then 5. With
        // residual degrees, after removing {0,1,2} patch 4 has degree 3 and
        // wins, leaving 6.
        let rows: Vec<Vec<f64>> = (0..7)
            .map(|i| {
                let a = i as f64 * 0.6;
                vec![a.cos(), a.sin()]
            })
            .collect();
        let ps = PatchSet::from_rows("chain", 1, 7, &rows).unwrap();
        let s = cosine_matrix(&ps);
        let c = cfg(0.8);
        assert_eq!(neighbor_degrees(&s, 0.8).unwrap().0, vec![2, 3, 3, 3, 3, 3, 2]);
        assert_eq!(select_centroids(&s, &c).unwrap(), vec![1, 3, 5]);
        assert_eq!(
            select_centroids(&s, &c.with_policy(DegreePolicy::Recompute)).unwrap(),
            vec![1, 4, 6]
        );
    }

    #[test]
    fn refinement_follows_argmax() {
        let cl = refine_assignments(&four(), &[0, 2, 3]).unwrap();
        assert_eq!(cl.assignment, vec![0, 0, 1, 2]);
        let single = refine_assignments(&four(), &[2]).unwrap();
        assert_eq!(single.assignment, vec![0; 4]);
        assert!(refine_assignments(&four(), &[]).is_err());
        assert!(refine_assignments(&four(), &[1, 1]).is_err());
        assert!(refine_assignments(&four(), &[9]).is_err());
    }

    #[test]
    fn refinement_tie_goes_to_earlier_position() {
        // Patch 3 has cos 0.7 to both patch 1 and patch 2.
        let t = 0.7f64;
        let u = (1.0 - t * t).sqrt();
        let rows = vec![
            vec![0.0, 0.0, 1.0],
            vec![t, u, 0.0],
            vec![t, -u, 0.0],
            vec![1.0, 0.0, 0.0],
        ];
        let ps = PatchSet::from_rows("tie", 2, 2, &rows).unwrap();
        let s = cosine_matrix(&ps);
        assert_eq!(s.get(3, 1), s.get(3, 2));
        let cl = refine_with_similarity(&s, &[0, 1, 2]).unwrap();
        assert_eq!(cl.assignment[3], 1);
        let cl = refine_with_similarity(&s, &[0, 2, 1]).unwrap();
        assert_eq!(cl.assignment[3], 1);
    }

    #[test]
    fn spatial_order() {
        assert_eq!(order_centroids_spatial(&[7, 2, 5], 3, 3).unwrap(), vec![2, 5, 7]);
        assert_eq!(order_centroids_spatial(&[2, 5, 7], 3, 3).unwrap(), vec![2, 5, 7]);
        assert_eq!(order_centroids_spatial(&[0, 2, 3], 2, 2).unwrap(), vec![0, 2, 3]);
        assert!(order_centroids_spatial(&[9], 3, 3).is_err());
    }

    #[test]
    fn pipeline_relabels_in_spatial_order() {
        let cl = cluster(&four(), &cfg(0.9)).unwrap();
        assert_eq!(cl.centroids, vec![0, 2, 3]);
        assert_eq!(cl.assignment, vec![0, 0, 1, 2]);

        // Selection order [1, 0] must become spatial order [0, 1].
        let ps = PatchSet::from_rows(
            "r",
            1,
            4,
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.1, 1.0], vec![-0.1, 1.0]],
        )
        .unwrap();
        let cl = cluster(&ps, &cfg(0.5)).unwrap();
        assert_eq!(cl.centroids, vec![0, 1]);
        assert_eq!(cl.assignment, vec![0, 1, 1, 1]);
    }

    #[test]
    fn single_patch_and_duplicate_image() {
        let one = PatchSet::from_rows("one", 1, 1, &[vec![0.3, -0.2]]).unwrap();
        let cl = cluster(&one, &cfg(0.5)).unwrap();
        assert_eq!((cl.k(), cl.assignment.clone()), (1, vec![0]));

        let dup = PatchSet::from_rows("dup", 2, 3, &vec![vec![0.2, 0.4, -0.1]; 6]).unwrap();
        for theta in [-0.5, 0.0, 0.5, 0.99] {
            assert_eq!(cluster(&dup, &cfg(theta)).unwrap().k(), 1);
        }
    }

    #[test]
    fn zero_noise_synthetic_recovers_labels() {
        let spec = SynthSpec::new(3, 36, 16, 0.0, 9).with_max_anchor_similarity(0.5);
        let s = synth_clustered(&spec).unwrap();
        let cl = cluster(&s.patches, &cfg(0.65)).unwrap();
        assert_eq!(cl.k(), 3);
        // Round-robin labels 0,1,2 meet the grid in that order, so the
        // spatial relabeling reproduces them exactly.
        assert_eq!(cl.assignment, s.labels);
    }

    #[test]
    fn theta_out_of_range() {
        assert!(GranularityConfig::new(1.0).is_err());
        assert!(GranularityConfig::new(-1.0).is_err());
        assert!(GranularityConfig::new(f64::NAN).is_err());
        let bad = GranularityConfig { theta: 1.5, ..cfg(0.5) };
        assert!(cluster(&four(), &bad).is_err());
    }

    #[test]
    fn export_round_trip_and_validation() {
        let ps = four();
        let cl = cluster(&ps, &cfg(0.9)).unwrap();
        let ex = ClusterExport::new(&ps, 0.9, &cl);
        let json = serde_json::to_string(&ex).unwrap();
        let back: ClusterExport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.clustering().unwrap(), cl);

        let mut bad = back.clone();
        bad.grid_w = 3;
        assert!(bad.clustering().is_err());
        let mut bad = back;
        bad.assignment[0] = 1;
        assert!(bad.clustering().is_err());
    }
}
