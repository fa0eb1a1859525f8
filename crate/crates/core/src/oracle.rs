//! Slow, literal reference implementations used to cross-check the fast
//! paths. Nothing here calls into `clustering` or `token_former` compute
//! code; only the shared data types are reused.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeSet;

use crate::clustering::Clustering;
use crate::embedding_io::PatchSet;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::similarity::SimMatrix;
use crate::token_former::{ScalePolicy, TokenFormerParams, TokenSequence};

/// Oracle inputs are capped at this many patches.
pub const MAX_ORACLE_PATCHES: usize = 128;

/// Literal greedy centroid selection: degree array, full argsort by
/// descending degree (lower index first on ties), then repeated
/// "take the head, drop its neighbors" over an explicit candidate list.
pub fn brute_force_centroids(s: &SimMatrix, theta: f64) -> Result<Vec<usize>> {
    if !(theta > -1.0 && theta < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "theta must lie in (-1, 1), got {theta}"
        )));
    }
    let n = s.n();
    if n > MAX_ORACLE_PATCHES {
        return Err(Error::InvalidInput(format!(
            "oracle supports N <= {MAX_ORACLE_PATCHES}, got {n}"
        )));
    }

    let mut degree = vec![0usize; n];
    for i in 0..n {
        for j in 0..n {
            if s.get(i, j) > theta {
                degree[i] += 1;
            }
        }
    }

    // Selection-sort style argsort over an explicit set.
    let mut unsorted: BTreeSet<usize> = (0..n).collect();
    let mut candidates: Vec<usize> = Vec::with_capacity(n);
    while !unsorted.is_empty() {
        let mut best: Option<usize> = None;
        for &i in &unsorted {
            best = match best {
                None => Some(i),
                Some(b) if degree[i] > degree[b] => Some(i),
                keep => keep,
            };
        }
        let b = best.unwrap();
        unsorted.remove(&b);
        candidates.push(b);
    }

    let mut centroids = Vec::new();
    while !candidates.is_empty() {
        let c = candidates[0];
        centroids.push(c);
        let drop: BTreeSet<usize> = (0..n).filter(|&j| s.get(c, j) > theta).collect();
        candidates.retain(|j| !drop.contains(j));
    }
    Ok(centroids)
}

fn oracle_gelu(x: f64) -> f64 {
    let inner = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3));
    0.5 * x * (1.0 + inner.tanh())
}

/// Cluster-masked attention written as explicit loops over clusters,
/// patches and dimensions.
pub fn naive_attention(ps: &PatchSet, cl: &Clustering, params: &TokenFormerParams) -> Result<TokenSequence> {
    let n = ps.n_patches();
    let d = ps.dim();
    let dims = params.dims;
    if d != dims.d || n > dims.n_max || cl.assignment.len() != n {
        return Err(Error::ShapeMismatch("oracle inputs disagree on shape".into()));
    }
    let scale = match params.scale_policy {
        ScalePolicy::Scaled => 1.0 / (dims.d_att as f64).sqrt(),
        ScalePolicy::Unscaled => 1.0,
    };
    let x = |i: usize, j: usize| ps.data().get(i, j);

    let mut tokens = Matrix::zeros(cl.centroids.len(), dims.d_out);
    for (k, &c) in cl.centroids.iter().enumerate() {
        let mut q = vec![0.0; dims.d_att];
        for a in 0..dims.d_att {
            for j in 0..d {
                q[a] += params.w_q.get(a, j) * x(c, j);
            }
        }

        let mut logits: Vec<(usize, f64)> = Vec::new();
        for i in 0..n {
            if cl.assignment[i] != k {
                continue;
            }
            let mut l = 0.0;
            for a in 0..dims.d_att {
                let mut key = 0.0;
                for j in 0..d {
                    key += params.w_k.get(a, j) * x(i, j);
                }
                l += q[a] * key;
            }
            logits.push((i, scale * l));
        }
        if logits.is_empty() {
            return Err(Error::InvalidInput(format!("cluster {k} is empty")));
        }
        let mut max = f64::NEG_INFINITY;
        for &(_, l) in &logits {
            if l > max {
                max = l;
            }
        }
        let mut denom = 0.0;
        for &(_, l) in &logits {
            denom += (l - max).exp();
        }

        let mut z = vec![0.0; dims.d_att];
        for &(i, l) in &logits {
            let w = (l - max).exp() / denom;
            for a in 0..dims.d_att {
                let mut v = 0.0;
                for j in 0..d {
                    v += params.w_v.get(a, j) * (x(i, j) + params.pos_table.get(i, j));
                }
                z[a] += w * v;
            }
        }

        let mut h = vec![0.0; dims.d_hidden];
        for r in 0..dims.d_hidden {
            let mut acc = params.b1[r];
            for a in 0..dims.d_att {
                acc += params.w1.get(r, a) * z[a];
            }
            h[r] = oracle_gelu(acc);
        }
        for o in 0..dims.d_out {
            let mut acc = params.b2[o];
            for r in 0..dims.d_hidden {
                acc += params.w2.get(o, r) * h[r];
            }
            tokens.set(k, o, acc);
        }
    }
    Ok(TokenSequence {
        tokens,
        clustering: cl.clone(),
    })
}

/// Central differences `(f(p + ε e_i) − f(p − ε e_i)) / 2ε` per coordinate.
pub fn finite_diff_grad<F>(mut loss: F, point: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidParameter(format!("eps must be positive, got {eps}")));
    }
    let mut p = point.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let up = loss(&p);
        p[i] = orig - eps;
        let down = loss(&p);
        p[i] = orig;
        if !up.is_finite() {
            return Err(Error::NonFiniteLoss(up));
        }
        if !down.is_finite() {
            return Err(Error::NonFiniteLoss(down));
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

pub const GRADCHECK_RTOL: f64 = 1e-4;
pub const GRADCHECK_ATOL: f64 = 1e-7;

/// Error of an analytic gradient entry against its numeric estimate,
/// relative to the larger magnitude but never to less than
/// `GRADCHECK_ATOL / GRADCHECK_RTOL`, so entries below that floor are judged
/// on absolute error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let floor = GRADCHECK_ATOL / GRADCHECK_RTOL;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
