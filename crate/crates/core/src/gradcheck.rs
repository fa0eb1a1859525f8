//! Analytic-versus-numeric gradient comparison for the token former.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::clustering::{cluster, Clustering, GranularityConfig};
use crate::embedding_io::{synth_clustered, PatchSet, SynthSpec};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::oracle::{finite_diff_grad, relative_error, GRADCHECK_RTOL};
use crate::token_former::{
    backward, form_tokens, init_params_with_std, ScalePolicy, TokenFormerDims, TokenFormerParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckConfig {
    pub n: usize,
    pub d: usize,
    pub d_att: usize,
    pub d_out: usize,
    pub theta: f64,
    pub seed: u64,
    pub eps: f64,
    /// Parameter init scale; larger than the training default so that the
    /// softmax is far from uniform and every branch carries signal.
    pub init_std: f64,
    pub scale_policy: ScalePolicy,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            n: 12,
            d: 6,
            d_att: 4,
            d_out: 3,
            theta: 0.6,
            seed: 0,
            eps: 1e-5,
            init_std: 0.5,
            scale_policy: ScalePolicy::Scaled,
        }
    }
}

/// A fixed problem: patches, clustering, parameters and regression targets.
#[derive(Debug, Clone)]
pub struct GradcheckInstance {
    pub patches: PatchSet,
    pub clustering: Clustering,
    pub params: TokenFormerParams,
    pub targets: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub k: usize,
    pub n_coords: usize,
    pub max_rel_error: f64,
    /// Name of the tensor holding the worst coordinate.
    pub worst_tensor: String,
    pub passed: bool,
}

pub fn random_instance(cfg: &GradcheckConfig) -> Result<GradcheckInstance> {
    if cfg.n == 0 || cfg.d == 0 {
        return Err(Error::InvalidParameter("gradcheck needs n >= 1 and d >= 1".into()));
    }
    let gran = GranularityConfig::new(cfg.theta)?;
    let spec = SynthSpec::new((cfg.n / 4).max(1), cfg.n, cfg.d, 0.4, cfg.seed);
    let mut patches = synth_clustered(&spec)?.patches;
    // Break unit norms so that cosine scale-invariance is exercised too.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    for i in 0..cfg.n {
        let s: f64 = rng.random_range(0.5..2.0);
        patches.data_mut().row_mut(i).iter_mut().for_each(|v| *v *= s);
    }
    let clustering = cluster(&patches, &gran)?;
    let dims = TokenFormerDims {
        d: cfg.d,
        d_att: cfg.d_att,
        d_hidden: cfg.d_out,
        d_out: cfg.d_out,
        n_max: cfg.n,
    };
    let mut params =
        init_params_with_std(dims, cfg.init_std, cfg.seed.wrapping_add(1))?.with_scale_policy(cfg.scale_policy);
    // Nonzero biases so their gradients are checked away from the origin.
    for b in params.b1.iter_mut().chain(params.b2.iter_mut()) {
        *b = rng.random_range(-0.5..0.5);
    }
    let k = clustering.k();
    let targets = Matrix::from_vec(
        k,
        cfg.d_out,
        (0..k * cfg.d_out).map(|_| rng.random_range(-1.0..1.0)).collect(),
    );
    Ok(GradcheckInstance {
        patches,
        clustering,
        params,
        targets,
    })
}

/// `½ ‖T − Y‖²` over all token entries.
fn half_sq_error(tokens: &Matrix, targets: &Matrix) -> f64 {
    0.5 * tokens
        .as_slice()
        .iter()
        .zip(targets.as_slice())
        .map(|(t, y)| (t - y).powi(2))
        .sum::<f64>()
}

/// Compares `backward` with central differences of the forward pass over
/// every parameter and every input coordinate.
pub fn run_gradcheck(inst: &GradcheckInstance, eps: f64) -> Result<GradcheckReport> {
    let GradcheckInstance {
        patches,
        clustering,
        params,
        targets,
    } = inst;
    let tokens = form_tokens(patches, clustering, params)?;
    let mut upstream = tokens.tokens.clone();
    for (u, y) in upstream.as_mut_slice().iter_mut().zip(targets.as_slice()) {
        *u -= y;
    }
    let grads = backward(patches, clustering, params, &upstream)?;

    let n_param = params.num_scalars();
    let mut point = params.to_flat();
    point.extend_from_slice(patches.data().as_slice());
    let mut analytic = grads.params.to_flat();
    analytic.extend_from_slice(grads.inputs.as_slice());

    let mut p_work = params.clone();
    let mut x_work = patches.clone();
    let numeric = finite_diff_grad(
        |flat| {
            p_work.set_flat(&flat[..n_param]);
            x_work.data_mut().as_mut_slice().copy_from_slice(&flat[n_param..]);
            match form_tokens(&x_work, clustering, &p_work) {
                Ok(t) => half_sq_error(&t.tokens, targets),
                Err(_) => f64::NAN,
            }
        },
        &point,
        eps,
    )?;

    let mut names: Vec<&str> = Vec::with_capacity(point.len());
    for (name, t) in crate::token_former::TENSOR_NAMES.iter().zip(params.tensors()) {
        names.extend(std::iter::repeat_n(*name, t.len()));
    }
    names.extend(std::iter::repeat_n("inputs", patches.data().as_slice().len()));

    let (worst, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0f64), |(bi, be), (i, e)| if e > be { (i, e) } else { (bi, be) });

    Ok(GradcheckReport {
        k: clustering.k(),
        n_coords: point.len(),
        max_rel_error,
        worst_tensor: names[worst].to_string(),
        passed: max_rel_error < GRADCHECK_RTOL,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_instance_passes() {
        let cfg = GradcheckConfig::default();
        let inst = random_instance(&cfg).unwrap();
        assert!(inst.clustering.k() >= 2);
        assert!(inst.clustering.cluster_sizes().iter().any(|&s| s >= 2));
        let r = run_gradcheck(&inst, cfg.eps).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn unscaled_policy_passes() {
        let cfg = GradcheckConfig {
            scale_policy: ScalePolicy::Unscaled,
            seed: 3,
            ..Default::default()
        };
        let r = run_gradcheck(&random_instance(&cfg).unwrap(), cfg.eps).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn single_patch_passes() {
        let cfg = GradcheckConfig {
            n: 1,
            ..Default::default()
        };
        let r = run_gradcheck(&random_instance(&cfg).unwrap(), cfg.eps).unwrap();
        assert_eq!(r.k, 1);
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn absurd_step_fails() {
        let cfg = GradcheckConfig::default();
        let r = run_gradcheck(&random_instance(&cfg).unwrap(), 10.0).unwrap();
        assert!(!r.passed, "{r:?}");
    }
}
