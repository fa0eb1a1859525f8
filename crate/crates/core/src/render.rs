//! Binary PPM (P6) cluster maps: each patch is drawn as a square block in
//! its cluster's color.

use crate::clustering::ClusterExport;
use crate::error::Result;

/// Colors guaranteed to be pairwise distinct. Clusters past the end of the
/// table get hash-derived colors.
pub const PALETTE: [[u8; 3]; 20] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
    [174, 199, 232],
    [255, 187, 120],
    [152, 223, 138],
    [255, 152, 150],
    [197, 176, 213],
    [196, 156, 148],
    [247, 182, 210],
    [199, 199, 199],
    [219, 219, 141],
    [158, 218, 229],
];

pub fn cluster_color(k: usize) -> [u8; 3] {
    if let Some(c) = PALETTE.get(k) {
        return *c;
    }
    // splitmix64 finalizer
    let mut z = (k as u64).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    [(z >> 16) as u8, (z >> 8) as u8, z as u8]
}

/// Renders a clustering as a `grid_w·block × grid_h·block` P6 image.
pub fn render_ppm(export: &ClusterExport, block: usize) -> Result<Vec<u8>> {
    let cl = export.clustering()?;
    let block = block.max(1);
    let (w, h) = (export.grid_w * block, export.grid_h * block);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(w * h * 3);
    for y in 0..h {
        let row = y / block;
        for x in 0..w {
            let col = x / block;
            let color = cluster_color(cl.assignment[row * export.grid_w + col]);
            out.extend_from_slice(&color);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn export(grid_h: usize, grid_w: usize, centroids: Vec<usize>, assignment: Vec<usize>) -> ClusterExport {
        ClusterExport {
            id: "t".into(),
            theta: 0.5,
            grid_h,
            grid_w,
            k: centroids.len(),
            centroids,
            assignment,
        }
    }

    fn pixels(ppm: &[u8]) -> &[u8] {
        // header has exactly three newlines
        let mut seen = 0;
        let start = ppm
            .iter()
            .position(|&b| {
                if b == b'\n' {
                    seen += 1;
                }
                seen == 3
            })
            .unwrap();
        &ppm[start + 1..]
    }

    #[test]
    fn single_cluster_is_solid() {
        let ppm = render_ppm(&export(2, 3, vec![0], vec![0; 6]), 4).unwrap();
        assert!(ppm.starts_with(b"P6\n12 8\n255\n"));
        let px = pixels(&ppm);
        assert_eq!(px.len(), 12 * 8 * 3);
        assert!(px.chunks(3).all(|c| c == PALETTE[0]));
    }

    #[test]
    fn all_singletons_get_distinct_colors() {
        let n = PALETTE.len();
        let ppm = render_ppm(&export(1, n, (0..n).collect(), (0..n).collect()), 1).unwrap();
        let colors: HashSet<&[u8]> = pixels(&ppm).chunks(3).collect();
        assert_eq!(colors.len(), n);
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        assert!(render_ppm(&export(2, 2, vec![0], vec![0; 3]), 1).is_err());
    }

    #[test]
    fn colors_past_the_table_are_stable() {
        assert_eq!(cluster_color(20), cluster_color(20));
        assert_ne!(cluster_color(20), cluster_color(21));
    }
}
