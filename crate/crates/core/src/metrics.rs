//! Token-count statistics, threshold sweeps, token similarity and the
//! KV-cache cost model.

use rayon::prelude::*;
use serde::Serialize;

use crate::clustering::{cluster, GranularityConfig};
use crate::embedding_io::PatchSet;
use crate::error::{Error, Result};
use crate::similarity::mean_pairwise_similarity;
use crate::token_former::TokenSequence;

/// Mean pairwise similarity of text-token embeddings in a 7B LLM, quoted for
/// comparison only (± 0.0002).
pub const REFERENCE_LANGUAGE_TOKEN_SIMILARITY: f64 = 0.0378;
/// Mean pairwise similarity of fixed-grid MLP-projector visual tokens, quoted
/// for comparison only (± 0.0018).
pub const REFERENCE_MLP_VISION_TOKEN_SIMILARITY: f64 = 0.3823;
/// Average token counts measured on real benchmark images at θ = 0.65 and
/// θ = 0.75, quoted for comparison only.
pub const REFERENCE_MEAN_TOKENS: [(f64, f64); 2] = [(0.65, 74.1), (0.75, 136.5)];

/// Decoder geometry relevant to KV-cache size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ModelProfile {
    pub n_layers: u64,
    pub hidden_dim: u64,
    pub bytes_per_scalar: u64,
    /// Keys and values.
    pub kv_streams: u64,
}

impl ModelProfile {
    /// 32 layers, hidden size 4096, fp16.
    pub const LLAMA_7B: ModelProfile = ModelProfile {
        n_layers: 32,
        hidden_dim: 4096,
        bytes_per_scalar: 2,
        kv_streams: 2,
    };

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.hidden_dim == 0 || self.bytes_per_scalar == 0 || self.kv_streams == 0 {
            return Err(Error::InvalidParameter(format!(
                "model profile fields must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Bytes of KV-cache held for `n_tokens` positions.
pub fn kv_cache_bytes(n_tokens: u64, profile: &ModelProfile) -> u64 {
    n_tokens * profile.n_layers * profile.kv_streams * profile.hidden_dim * profile.bytes_per_scalar
}

/// Same as [`kv_cache_bytes`] in MiB (2^20 bytes).
pub fn kv_cache_mib(n_tokens: u64, profile: &ModelProfile) -> f64 {
    kv_cache_bytes(n_tokens, profile) as f64 / (1u64 << 20) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenCountStats {
    pub theta: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: usize,
    pub max: usize,
    pub counts: Vec<usize>,
}

impl TokenCountStats {
    fn from_counts(theta: f64, counts: Vec<usize>) -> Self {
        let n = counts.len() as f64;
        let mean = counts.iter().sum::<usize>() as f64 / n;
        let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n;
        Self {
            theta,
            mean,
            std: var.sqrt(),
            min: *counts.iter().min().unwrap(),
            max: *counts.iter().max().unwrap(),
            counts,
        }
    }
}

/// Per-image token counts at one threshold, plus mean and population std.
pub fn token_count_stats(corpus: &[PatchSet], theta: f64) -> Result<TokenCountStats> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("empty corpus".into()));
    }
    let cfg = GranularityConfig::new(theta)?;
    let counts: Vec<usize> = corpus
        .par_iter()
        .map(|ps| cluster(ps, &cfg).map(|c| c.k()))
        .collect::<Result<_>>()?;
    Ok(TokenCountStats::from_counts(theta, counts))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub image_ids: Vec<String>,
    pub std_kind: &'static str,
    pub rows: Vec<TokenCountStats>,
}

/// Thresholds are deduplicated and sorted ascending before sweeping.
pub fn theta_sweep(corpus: &[PatchSet], thetas: &[f64]) -> Result<SweepReport> {
    if thetas.is_empty() {
        return Err(Error::InvalidParameter("empty threshold list".into()));
    }
    if let Some(t) = thetas.iter().find(|t| t.is_nan()) {
        return Err(Error::InvalidParameter(format!("invalid threshold {t}")));
    }
    let mut sorted = thetas.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted.dedup();
    let rows = sorted
        .iter()
        .map(|&t| token_count_stats(corpus, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport {
        image_ids: corpus.iter().map(|ps| ps.id().to_string()).collect(),
        std_kind: "population",
        rows,
    })
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("theta,mean,std,min,max\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{}\n", r.theta, r.mean, r.std, r.min, r.max));
        }
        out
    }
}

/// Mean pairwise cosine similarity among output tokens; `None` when fewer
/// than two tokens exist.
pub fn token_similarity_report(tokens: &TokenSequence) -> Option<f64> {
    if tokens.k() < 2 {
        return None;
    }
    mean_pairwise_similarity(&tokens.tokens).ok()
}

/// Chance-corrected agreement between two labelings of the same items.
/// Two single-cluster (or two all-singleton) labelings score 1.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "labelings have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n == 0 {
        return Err(Error::InvalidInput("empty labeling".into()));
    }
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![0u64; ka * kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
    }
    let pairs = |c: u64| (c * c.saturating_sub(1) / 2) as f64;
    let index: f64 = table.iter().map(|&c| pairs(c)).sum();
    let row_sum: f64 = (0..ka).map(|i| pairs(table[i * kb..(i + 1) * kb].iter().sum())).sum();
    let col_sum: f64 = (0..kb).map(|j| pairs((0..ka).map(|i| table[i * kb + j]).sum())).sum();
    let total = pairs(n as u64);
    let expected = if total > 0.0 { row_sum * col_sum / total } else { 0.0 };
    let max_index = 0.5 * (row_sum + col_sum);
    if max_index == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max_index - expected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::Clustering;
    use crate::embedding_io::{synth_clustered, SynthSpec};
    use crate::matrix::Matrix;

    #[test]
    fn kv_cache_anchors() {
        let p = ModelProfile::LLAMA_7B;
        assert_eq!(kv_cache_bytes(1, &p), 524_288);
        assert_eq!(kv_cache_mib(1, &p), 0.5);
        assert_eq!(kv_cache_mib(576, &p), 288.0);
        assert_eq!(kv_cache_bytes(0, &p), 0);
    }

    #[test]
    fn kv_cache_is_linear_in_every_field() {
        let p = ModelProfile::LLAMA_7B;
        let base = kv_cache_bytes(7, &p);
        assert_eq!(kv_cache_bytes(14, &p), 2 * base);
        for scaled in [
            ModelProfile { n_layers: 64, ..p },
            ModelProfile { hidden_dim: 8192, ..p },
            ModelProfile {
                bytes_per_scalar: 4,
                ..p
            },
            ModelProfile { kv_streams: 4, ..p },
        ] {
            assert_eq!(kv_cache_bytes(7, &scaled), 2 * base);
        }
        assert!(ModelProfile { kv_streams: 0, ..p }.validate().is_err());
    }

    #[test]
    fn trivial_corpora() {
        let dup: Vec<PatchSet> = (0..3)
            .map(|i| PatchSet::from_rows(format!("d{i}"), 2, 2, &vec![vec![0.5, 0.5]; 4]).unwrap())
            .collect();
        let s = token_count_stats(&dup, 0.65).unwrap();
        assert_eq!((s.mean, s.std), (1.0, 0.0));

        let mut eye = Matrix::zeros(4, 4);
        (0..4).for_each(|i| eye.set(i, i, 1.0));
        let orth: Vec<PatchSet> = (0..3).map(|_| PatchSet::new("o", 2, 2, eye.clone()).unwrap()).collect();
        let s = token_count_stats(&orth, 0.65).unwrap();
        assert_eq!((s.mean, s.std, s.min, s.max), (4.0, 0.0, 4, 4));

        assert!(token_count_stats(&[], 0.5).is_err());
    }

    #[test]
    fn sweep_normalizes_thresholds() {
        let corpus: Vec<PatchSet> = (0..5)
            .map(|s| synth_clustered(&SynthSpec::new(3, 16, 8, 0.3, s)).unwrap().patches)
            .collect();
        let r = theta_sweep(&corpus, &[0.75, 0.5, 0.75, 0.3]).unwrap();
        assert_eq!(r.rows.iter().map(|x| x.theta).collect::<Vec<_>>(), vec![0.3, 0.5, 0.75]);
        let single = theta_sweep(&corpus, &[0.5]).unwrap();
        assert_eq!(single.rows[0], token_count_stats(&corpus, 0.5).unwrap());
        for row in &r.rows {
            assert!(row.min as f64 <= row.mean && row.mean <= row.max as f64);
            assert!(row.min >= 1);
        }
        assert!(theta_sweep(&corpus, &[]).is_err());
        assert!(theta_sweep(&corpus, &[1.2]).is_err());
        assert!(r.to_csv().starts_with("theta,mean,std,min,max\n0.3,"));
    }

    #[test]
    fn token_similarity_cases() {
        let cl = Clustering {
            centroids: vec![0, 1],
            assignment: vec![0, 1],
        };
        let dup = TokenSequence {
            tokens: Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]),
            clustering: cl.clone(),
        };
        assert!((token_similarity_report(&dup).unwrap() - 1.0).abs() < 1e-15);
        let orth = TokenSequence {
            tokens: Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 3.0]]),
            clustering: cl,
        };
        assert_eq!(token_similarity_report(&orth), Some(0.0));
        let one = TokenSequence {
            tokens: Matrix::from_rows(&[vec![1.0, 0.0]]),
            clustering: Clustering {
                centroids: vec![0],
                assignment: vec![0],
            },
        };
        assert_eq!(token_similarity_report(&one), None);
    }

    #[test]
    fn ari_known_values() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&[0, 0, 0], &[0, 0, 0]).unwrap(), 1.0);
        // sklearn: adjusted_rand_score([0,0,1,1],[0,0,1,2]) = 0.5714285714
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 0, 1, 2]).unwrap();
        assert!((v - 4.0 / 7.0).abs() < 1e-12);
        // sklearn: adjusted_rand_score([0,0,1,1],[0,1,0,1]) = -0.5
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
        assert!((v + 0.5).abs() < 1e-12);
        assert!(adjusted_rand_index(&[0], &[0, 1]).is_err());
    }
}
