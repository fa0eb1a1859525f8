//! Cluster-restricted cross-attention pooling.
//!
//! For cluster `k` with centroid `c_k` the token is
//!
//! ```text
//! q_k  = W_q x_{c_k}
//! κ_i  = W_k x_i
//! v_i  = W_v (x_i + P_i)
//! a_ki = softmax_{i ∈ C_k}(s · q_k · κ_i)
//! t_k  = MLP(Σ_{i ∈ C_k} a_ki v_i)
//! ```
//!
//! where `s` is `1/√d_att` or 1 depending on [`ScalePolicy`], `P` is a
//! learnable table indexed by row-major grid position, and the MLP is
//! `W_2 gelu(W_1 z + b_1) + b_2`. Patches outside `C_k` never enter the
//! softmax for token `k`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::clustering::Clustering;
use crate::embedding_io::PatchSet;
use crate::error::{Error, FormatError, Result};
use crate::fsutil::atomic_write;
use crate::matrix::{dot, Matrix};

pub const DEFAULT_N_MAX: usize = 576;
pub const INIT_STD: f64 = 0.02;
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DIVP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalePolicy {
    /// Logits multiplied by `1/√d_att`.
    #[default]
    Scaled,
    /// Raw dot-product logits.
    Unscaled,
}

impl ScalePolicy {
    pub fn factor(self, d_att: usize) -> f64 {
        match self {
            ScalePolicy::Scaled => 1.0 / (d_att as f64).sqrt(),
            ScalePolicy::Unscaled => 1.0,
        }
    }

    fn code(self) -> u32 {
        match self {
            ScalePolicy::Scaled => 0,
            ScalePolicy::Unscaled => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenFormerDims {
    pub d: usize,
    pub d_att: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub n_max: usize,
}

impl TokenFormerDims {
    /// `d_hidden = d_out` and a 576-position table.
    pub fn new(d: usize, d_att: usize, d_out: usize) -> Self {
        Self {
            d,
            d_att,
            d_hidden: d_out,
            d_out,
            n_max: DEFAULT_N_MAX,
        }
    }

    pub fn with_n_max(mut self, n_max: usize) -> Self {
        self.n_max = n_max;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_att == 0 || self.d_hidden == 0 || self.d_out == 0 || self.n_max == 0 {
            return Err(Error::InvalidParameter(format!(
                "token former dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Learnable parameters. Also used as the container for their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFormerParams {
    pub dims: TokenFormerDims,
    pub scale_policy: ScalePolicy,
    /// `d_att × d`
    pub w_q: Matrix,
    /// `d_att × d`
    pub w_k: Matrix,
    /// `d_att × d`
    pub w_v: Matrix,
    /// `n_max × d`
    pub pos_table: Matrix,
    /// `d_hidden × d_att`
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// `d_out × d_hidden`
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

pub const TENSOR_NAMES: [&str; 8] = ["w_q", "w_k", "w_v", "pos_table", "w1", "b1", "w2", "b2"];

impl TokenFormerParams {
    pub fn zeros(dims: TokenFormerDims, scale_policy: ScalePolicy) -> Self {
        let TokenFormerDims {
            d,
            d_att,
            d_hidden,
            d_out,
            n_max,
        } = dims;
        Self {
            dims,
            scale_policy,
            w_q: Matrix::zeros(d_att, d),
            w_k: Matrix::zeros(d_att, d),
            w_v: Matrix::zeros(d_att, d),
            pos_table: Matrix::zeros(n_max, d),
            w1: Matrix::zeros(d_hidden, d_att),
            b1: vec![0.0; d_hidden],
            w2: Matrix::zeros(d_out, d_hidden),
            b2: vec![0.0; d_out],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims, self.scale_policy)
    }

    pub fn with_scale_policy(mut self, policy: ScalePolicy) -> Self {
        self.scale_policy = policy;
        self
    }

    /// Views of every tensor in checkpoint order (see [`TENSOR_NAMES`]).
    pub fn tensors(&self) -> [&[f64]; 8] {
        [
            self.w_q.as_slice(),
            self.w_k.as_slice(),
            self.w_v.as_slice(),
            self.pos_table.as_slice(),
            self.w1.as_slice(),
            &self.b1,
            self.w2.as_slice(),
            &self.b2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 8] {
        [
            self.w_q.as_mut_slice(),
            self.w_k.as_mut_slice(),
            self.w_v.as_mut_slice(),
            self.pos_table.as_mut_slice(),
            self.w1.as_mut_slice(),
            &mut self.b1,
            self.w2.as_mut_slice(),
            &mut self.b2,
        ]
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_scalars(), "flat parameter length");
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
    }

    /// `self += alpha · other`, tensor by tensor.
    pub fn axpy(&mut self, alpha: f64, other: &TokenFormerParams) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += alpha * b;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Weights `N(0, 0.02²)`, biases 0, positional table `N(0, 0.02²)`.
pub fn init_params(dims: TokenFormerDims, seed: u64) -> Result<TokenFormerParams> {
    init_params_with_std(dims, INIT_STD, seed)
}

pub fn init_params_with_std(dims: TokenFormerDims, std: f64, seed: u64) -> Result<TokenFormerParams> {
    dims.validate()?;
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidParameter(format!("init std {std}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = TokenFormerParams::zeros(dims, ScalePolicy::default());
    for t in [
        p.w_q.as_mut_slice(),
        p.w_k.as_mut_slice(),
        p.w_v.as_mut_slice(),
        p.pos_table.as_mut_slice(),
        p.w1.as_mut_slice(),
        p.w2.as_mut_slice(),
    ] {
        t.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
    }
    Ok(p)
}

/// Dense `K × N` cluster-membership mask. `true` means the patch takes part
/// in that token's softmax (logit offset 0); `false` means `−∞`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    k: usize,
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_clustering(cl: &Clustering) -> Self {
        let (k, n) = (cl.k(), cl.n_patches());
        let mut allowed = vec![false; k * n];
        for (i, &a) in cl.assignment.iter().enumerate() {
            allowed[a * n + i] = true;
        }
        Self { k, n, allowed }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_allowed(&self, k: usize, i: usize) -> bool {
        self.allowed[k * self.n + i]
    }

    pub fn members(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        self.allowed[k * self.n..(k + 1) * self.n]
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| a.then_some(i))
    }
}

/// One token per cluster, rows in the clustering's (spatial) centroid order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Matrix,
    pub clustering: Clustering,
}

impl TokenSequence {
    pub fn k(&self) -> usize {
        self.tokens.rows()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn check_inputs(ps: &PatchSet, cl: &Clustering, params: &TokenFormerParams) -> Result<()> {
    let dims = &params.dims;
    if ps.dim() != dims.d {
        return Err(Error::ShapeMismatch(format!(
            "patch dim {} but token former expects d = {}",
            ps.dim(),
            dims.d
        )));
    }
    if ps.n_patches() > dims.n_max {
        return Err(Error::ShapeMismatch(format!(
            "{} patches exceed positional table capacity {}",
            ps.n_patches(),
            dims.n_max
        )));
    }
    cl.validate(ps.n_patches())
}

struct ClusterPass {
    members: Vec<usize>,
    centroid: usize,
    query: Vec<f64>,
    keys: Vec<Vec<f64>>,
    /// `x_i + P_i` per member.
    value_inputs: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    weights: Vec<f64>,
    pooled: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    token: Vec<f64>,
}

fn cluster_pass(ps: &PatchSet, params: &TokenFormerParams, members: Vec<usize>, centroid: usize) -> ClusterPass {
    let scale = params.scale_policy.factor(params.dims.d_att);
    let query = params.w_q.matvec(ps.row(centroid));
    let keys: Vec<Vec<f64>> = members.iter().map(|&i| params.w_k.matvec(ps.row(i))).collect();
    let value_inputs: Vec<Vec<f64>> = members
        .iter()
        .map(|&i| {
            ps.row(i)
                .iter()
                .zip(params.pos_table.row(i))
                .map(|(x, p)| x + p)
                .collect()
        })
        .collect();
    let values: Vec<Vec<f64>> = value_inputs.iter().map(|u| params.w_v.matvec(u)).collect();

    let logits: Vec<f64> = keys.iter().map(|key| scale * dot(&query, key)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|e| e / total).collect();

    let mut pooled = vec![0.0; params.dims.d_att];
    for (w, v) in weights.iter().zip(&values) {
        for (p, x) in pooled.iter_mut().zip(v) {
            *p += w * x;
        }
    }
    let mut hidden_pre = params.w1.matvec(&pooled);
    hidden_pre.iter_mut().zip(&params.b1).for_each(|(h, b)| *h += b);
    let hidden: Vec<f64> = hidden_pre.iter().map(|&h| gelu(h)).collect();
    let mut token = params.w2.matvec(&hidden);
    token.iter_mut().zip(&params.b2).for_each(|(t, b)| *t += b);

    ClusterPass {
        members,
        centroid,
        query,
        keys,
        value_inputs,
        values,
        weights,
        pooled,
        hidden_pre,
        hidden,
        token,
    }
}

fn forward_passes(ps: &PatchSet, cl: &Clustering, params: &TokenFormerParams) -> Result<Vec<ClusterPass>> {
    check_inputs(ps, cl, params)?;
    let mask = AttentionMask::from_clustering(cl);
    Ok((0..cl.k())
        .map(|k| cluster_pass(ps, params, mask.members(k).collect(), cl.centroids[k]))
        .collect())
}

/// One visual token per cluster.
pub fn form_tokens(ps: &PatchSet, cl: &Clustering, params: &TokenFormerParams) -> Result<TokenSequence> {
    let passes = forward_passes(ps, cl, params)?;
    let mut tokens = Matrix::zeros(cl.k(), params.dims.d_out);
    for (k, pass) in passes.iter().enumerate() {
        tokens.row_mut(k).copy_from_slice(&pass.token);
    }
    Ok(TokenSequence {
        tokens,
        clustering: cl.clone(),
    })
}

/// The `K × N` softmax weights; zero outside each token's cluster.
pub fn attention_weights(ps: &PatchSet, cl: &Clustering, params: &TokenFormerParams) -> Result<Matrix> {
    let passes = forward_passes(ps, cl, params)?;
    let mut out = Matrix::zeros(cl.k(), ps.n_patches());
    for (k, pass) in passes.iter().enumerate() {
        for (&i, &w) in pass.members.iter().zip(&pass.weights) {
            out.set(k, i, w);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: TokenFormerParams,
    /// `N × d`, gradient with respect to the patch embeddings.
    pub inputs: Matrix,
}

/// Gradients of `Σ_k ⟨upstream_k, t_k⟩` with respect to every parameter and
/// every patch embedding. The clustering is held fixed.
pub fn backward(ps: &PatchSet, cl: &Clustering, params: &TokenFormerParams, upstream: &Matrix) -> Result<Gradients> {
    if upstream.rows() != cl.k() || upstream.cols() != params.dims.d_out {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient is {}x{}, expected {}x{}",
            upstream.rows(),
            upstream.cols(),
            cl.k(),
            params.dims.d_out
        )));
    }
    let passes = forward_passes(ps, cl, params)?;
    let scale = params.scale_policy.factor(params.dims.d_att);
    let d = params.dims.d;
    let d_att = params.dims.d_att;
    let mut g = params.zeros_like();
    let mut g_in = Matrix::zeros(ps.n_patches(), d);

    for (k, pass) in passes.iter().enumerate() {
        let d_token = upstream.row(k);

        // Output MLP.
        g.w2.add_outer(d_token, &pass.hidden);
        g.b2.iter_mut().zip(d_token).for_each(|(g, u)| *g += u);
        let mut d_hidden = vec![0.0; params.dims.d_hidden];
        params.w2.matvec_t_acc(d_token, &mut d_hidden);
        let d_hidden_pre: Vec<f64> = d_hidden
            .iter()
            .zip(&pass.hidden_pre)
            .map(|(dh, &h)| dh * gelu_grad(h))
            .collect();
        g.w1.add_outer(&d_hidden_pre, &pass.pooled);
        g.b1.iter_mut().zip(&d_hidden_pre).for_each(|(g, u)| *g += u);
        let mut d_pooled = vec![0.0; d_att];
        params.w1.matvec_t_acc(&d_hidden_pre, &mut d_pooled);

        // Pooling and softmax.
        let d_weights: Vec<f64> = pass.values.iter().map(|v| dot(&d_pooled, v)).collect();
        let expected: f64 = pass.weights.iter().zip(&d_weights).map(|(a, b)| a * b).sum();

        let mut d_query = vec![0.0; d_att];
        for (m, &i) in pass.members.iter().enumerate() {
            let a = pass.weights[m];

            // Value branch: v = W_v (x + P).
            let d_value: Vec<f64> = d_pooled.iter().map(|dz| a * dz).collect();
            g.w_v.add_outer(&d_value, &pass.value_inputs[m]);
            let mut d_value_in = vec![0.0; d];
            params.w_v.matvec_t_acc(&d_value, &mut d_value_in);
            for (j, dv) in d_value_in.iter().enumerate() {
                g_in.row_mut(i)[j] += dv;
                g.pos_table.row_mut(i)[j] += dv;
            }

            // Key branch.
            let d_logit = a * (d_weights[m] - expected);
            if d_logit != 0.0 {
                for (dq, kv) in d_query.iter_mut().zip(&pass.keys[m]) {
                    *dq += scale * d_logit * kv;
                }
                let d_key: Vec<f64> = pass.query.iter().map(|q| scale * d_logit * q).collect();
                g.w_k.add_outer(&d_key, ps.row(i));
                params.w_k.matvec_t_acc(&d_key, g_in.row_mut(i));
            }
        }

        // Query branch.
        g.w_q.add_outer(&d_query, ps.row(pass.centroid));
        params.w_q.matvec_t_acc(&d_query, g_in.row_mut(pass.centroid));
    }
    Ok(Gradients {
        params: g,
        inputs: g_in,
    })
}

/// Serializes parameters as a `DIVP` blob: magic, version, then
/// `d, d_att, d_hidden, d_out, n_max, scale_policy` as `u32`, then every
/// tensor in [`TENSOR_NAMES`] order as little-endian `f64`.
pub fn encode_checkpoint(params: &TokenFormerParams) -> Result<Vec<u8>> {
    let dims = params.dims;
    let mut out = Vec::with_capacity(32 + 8 * params.num_scalars());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    let header = [
        CHECKPOINT_VERSION as usize,
        dims.d,
        dims.d_att,
        dims.d_hidden,
        dims.d_out,
        dims.n_max,
        params.scale_policy.code() as usize,
    ];
    for v in header {
        let v = u32::try_from(v).map_err(|_| Error::InvalidParameter(format!("{v} does not fit in u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for t in params.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TokenFormerParams, FormatError> {
    const HEADER: usize = 32;
    if bytes.len() < 4 {
        return Err(FormatError::Truncated {
            expected: HEADER,
            actual: bytes.len(),
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic {
            found,
            expected: CHECKPOINT_MAGIC,
        });
    }
    if bytes.len() < HEADER {
        return Err(FormatError::Truncated {
            expected: HEADER,
            actual: bytes.len(),
        });
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    if field(0) != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion(field(0)));
    }
    let dims = TokenFormerDims {
        d: field(1) as usize,
        d_att: field(2) as usize,
        d_hidden: field(3) as usize,
        d_out: field(4) as usize,
        n_max: field(5) as usize,
    };
    if dims.validate().is_err() {
        return Err(FormatError::InvalidHeader(format!(
            "non-positive dimension in {dims:?}"
        )));
    }
    let scale_policy = match field(6) {
        0 => ScalePolicy::Scaled,
        1 => ScalePolicy::Unscaled,
        other => return Err(FormatError::InvalidHeader(format!("unknown scale policy {other}"))),
    };
    let mut params = TokenFormerParams::zeros(dims, scale_policy);
    let expected = HEADER + 8 * params.num_scalars();
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(FormatError::TrailingBytes {
            expected,
            actual: bytes.len(),
        });
    }
    let mut values = bytes[HEADER..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for (t_idx, t) in params.tensors_mut().into_iter().enumerate() {
        for (j, v) in t.iter_mut().enumerate() {
            *v = values.next().unwrap();
            if !v.is_finite() {
                return Err(FormatError::NonFinite {
                    layer: t_idx,
                    row: j,
                    col: 0,
                });
            }
        }
    }
    Ok(params)
}

pub fn save_checkpoint(params: &TokenFormerParams, path: impl AsRef<Path>) -> Result<()> {
    atomic_write(path.as_ref(), &encode_checkpoint(params)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TokenFormerParams> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| Error::format(path, e))
}

/// `token,dim_0,…` with one row per token.
pub fn tokens_csv(tokens: &TokenSequence) -> String {
    matrix_csv(&tokens.tokens, "token", "dim")
}

/// `token,patch_0,…` with one row per token.
pub fn attention_csv(weights: &Matrix) -> String {
    matrix_csv(weights, "token", "patch")
}

fn matrix_csv(m: &Matrix, row_label: &str, col_prefix: &str) -> String {
    let mut out = String::from(row_label);
    for c in 0..m.cols() {
        out.push_str(&format!(",{col_prefix}_{c}"));
    }
    out.push('\n');
    for r in 0..m.rows() {
        out.push_str(&r.to_string());
        for v in m.row(r) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::{cluster, GranularityConfig};
    use crate::embedding_io::{synth_clustered, SynthSpec};

    fn dims(d: usize) -> TokenFormerDims {
        TokenFormerDims::new(d, 4, 3).with_n_max(16)
    }

    fn mlp(params: &TokenFormerParams, z: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = (0..params.dims.d_hidden)
            .map(|r| gelu(dot(params.w1.row(r), z) + params.b1[r]))
            .collect();
        (0..params.dims.d_out)
            .map(|r| dot(params.w2.row(r), &h) + params.b2[r])
            .collect()
    }

    #[test]
    fn init_is_seeded() {
        let a = init_params(dims(5), 1).unwrap();
        let b = init_params(dims(5), 1).unwrap();
        let c = init_params(dims(5), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.b1.iter().chain(&a.b2).all(|&v| v == 0.0));
        assert!(init_params(TokenFormerDims::new(0, 1, 1), 0).is_err());
    }

    #[test]
    fn init_moments() {
        // 8 × 125_000 w_q entries gives 10^6 samples.
        let d = TokenFormerDims {
            d: 125_000,
            d_att: 8,
            d_hidden: 1,
            d_out: 1,
            n_max: 1,
        };
        let p = init_params(d, 7).unwrap();
        let w = p.w_q.as_slice();
        assert_eq!(w.len(), 1_000_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        assert!(mean.abs() < 0.01 * INIT_STD, "mean {mean}");
        assert!((std - INIT_STD).abs() < 0.01 * INIT_STD, "std {std}");
    }

    #[test]
    fn singleton_cluster_takes_its_own_value() {
        let ps = PatchSet::from_rows("s", 1, 2, &[vec![1.0, 0.0, 0.5], vec![0.0, 1.0, -0.5]]).unwrap();
        let cl = Clustering {
            centroids: vec![0, 1],
            assignment: vec![0, 1],
        };
        let params = init_params_with_std(dims(3), 0.5, 3).unwrap();
        let tokens = form_tokens(&ps, &cl, &params).unwrap();
        let w = attention_weights(&ps, &cl, &params).unwrap();
        for i in 0..2 {
            let u: Vec<f64> = ps
                .row(i)
                .iter()
                .zip(params.pos_table.row(i))
                .map(|(x, p)| x + p)
                .collect();
            let expected = mlp(&params, &params.w_v.matvec(&u));
            assert_eq!(tokens.tokens.row(i), expected.as_slice());
            assert_eq!(w.get(i, i), 1.0);
            assert_eq!(w.get(i, 1 - i), 0.0);
        }
    }

    #[test]
    fn identical_pair_splits_attention_evenly() {
        let ps = PatchSet::from_rows("p", 1, 2, &[vec![0.3, -0.7], vec![0.3, -0.7]]).unwrap();
        let mut params = init_params_with_std(dims(2), 0.4, 9).unwrap();
        let row0 = params.pos_table.row(0).to_vec();
        params.pos_table.row_mut(1).copy_from_slice(&row0);
        let cl = Clustering {
            centroids: vec![0],
            assignment: vec![0, 0],
        };
        let w = attention_weights(&ps, &cl, &params).unwrap();
        assert_eq!(w.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn rows_sum_to_one_and_respect_mask() {
        let s = synth_clustered(&SynthSpec::new(3, 8, 5, 0.2, 4)).unwrap();
        let cl = cluster(&s.patches, &GranularityConfig::new(0.6).unwrap()).unwrap();
        let params = init_params_with_std(dims(5), 0.5, 1).unwrap();
        let w = attention_weights(&s.patches, &cl, &params).unwrap();
        let mask = AttentionMask::from_clustering(&cl);
        for k in 0..cl.k() {
            let sum: f64 = w.row(k).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for i in 0..8 {
                assert_eq!(w.get(k, i) > 0.0, mask.is_allowed(k, i));
            }
        }
    }

    #[test]
    fn shape_errors() {
        let ps = PatchSet::from_rows("p", 1, 2, &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let cl = Clustering {
            centroids: vec![0],
            assignment: vec![0, 0],
        };
        let wrong_d = init_params(dims(3), 0).unwrap();
        assert!(matches!(form_tokens(&ps, &cl, &wrong_d), Err(Error::ShapeMismatch(_))));
        let small = init_params(TokenFormerDims::new(2, 2, 2).with_n_max(1), 0).unwrap();
        assert!(matches!(form_tokens(&ps, &cl, &small), Err(Error::ShapeMismatch(_))));
        let bad_cl = Clustering {
            centroids: vec![0],
            assignment: vec![0],
        };
        let ok = init_params(dims(2), 0).unwrap();
        assert!(form_tokens(&ps, &bad_cl, &ok).is_err());
        assert!(backward(&ps, &cl, &ok, &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let s = synth_clustered(&SynthSpec::new(2, 6, 4, 0.3, 2)).unwrap();
        let cl = cluster(&s.patches, &GranularityConfig::new(0.5).unwrap()).unwrap();
        let params = init_params_with_std(dims(4), 0.5, 5).unwrap();
        let g = backward(&s.patches, &cl, &params, &Matrix::zeros(cl.k(), 3)).unwrap();
        assert!(g.params.to_flat().iter().all(|&v| v == 0.0));
        assert!(g.inputs.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unused_positional_rows_get_no_gradient() {
        let s = synth_clustered(&SynthSpec::new(2, 6, 4, 0.3, 2)).unwrap();
        let cl = cluster(&s.patches, &GranularityConfig::new(0.5).unwrap()).unwrap();
        let params = init_params_with_std(dims(4), 0.5, 5).unwrap();
        let up = Matrix::from_vec(cl.k(), 3, vec![1.0; cl.k() * 3]);
        let g = backward(&s.patches, &cl, &params, &up).unwrap();
        for row in 6..16 {
            assert!(g.params.pos_table.row(row).iter().all(|&v| v == 0.0));
        }
        assert!(g.params.pos_table.row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let p = init_params(dims(3), 11)
            .unwrap()
            .with_scale_policy(ScalePolicy::Unscaled);
        let bytes = encode_checkpoint(&p).unwrap();
        assert_eq!(&bytes[..4], b"DIVP");
        assert_eq!(bytes.len(), 32 + 8 * p.num_scalars());
        assert_eq!(decode_checkpoint(&bytes).unwrap(), p);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(FormatError::BadMagic { .. })));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 8]),
            Err(FormatError::Truncated { .. })
        ));
        let mut nan = bytes;
        let at = nan.len() - 8;
        nan[at..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode_checkpoint(&nan), Err(FormatError::NonFinite { .. })));
    }

    #[test]
    fn flat_view_round_trip() {
        let p = init_params(dims(3), 1).unwrap();
        let mut q = p.zeros_like();
        q.set_flat(&p.to_flat());
        assert_eq!(p, q);
    }

    #[test]
    fn csv_layout() {
        let ts = TokenSequence {
            tokens: Matrix::from_rows(&[vec![1.0, -0.5], vec![0.25, 2.0]]),
            clustering: Clustering {
                centroids: vec![0, 1],
                assignment: vec![0, 1],
            },
        };
        assert_eq!(tokens_csv(&ts), "token,dim_0,dim_1\n0,1,-0.5\n1,0.25,2\n");
    }
}
