//! Small-scale surrogate training of the token former.
//!
//! Without a language model, the token former is fit against a synthetic
//! regression target. What matters is that gradients reach every parameter
//! through the masked attention and that training at one or several
//! thresholds behaves sensibly.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{cluster, Clustering, GranularityConfig};
use crate::embedding_io::{synth_clustered, PatchSet, SynthSpec};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::token_former::{
    backward, form_tokens, init_params_with_std, TokenFormerDims, TokenFormerParams, TokenSequence,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ThetaSchedule {
    Fixed {
        theta: f64,
    },
    /// A threshold drawn uniformly from the set, independently per image and step.
    Uniform {
        thetas: Vec<f64>,
    },
}

impl ThetaSchedule {
    pub fn thetas(&self) -> Vec<f64> {
        match self {
            ThetaSchedule::Fixed { theta } => vec![*theta],
            ThetaSchedule::Uniform { thetas } => thetas.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    /// Target token = fixed random linear map of the cluster's mean patch.
    ClusterMeanRegression,
    /// Target token = output of a fixed, randomly initialized teacher token former.
    TeacherPooling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub theta_schedule: ThetaSchedule,
    pub seed: u64,
    pub target_mode: TargetMode,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidParameter("steps must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be >= 1".into()));
        }
        let thetas = self.theta_schedule.thetas();
        if thetas.is_empty() {
            return Err(Error::InvalidParameter("theta set is empty".into()));
        }
        for t in thetas {
            GranularityConfig::new(t)?;
        }
        Ok(())
    }
}

/// The fixed map that defines regression targets for each cluster.
#[derive(Debug, Clone, PartialEq)]
pub enum SurrogateTarget {
    /// `d_out × d`, entries `N(0, 1/d)`.
    ClusterMean(Matrix),
    Teacher(Box<TokenFormerParams>),
}

const TEACHER_INIT_STD: f64 = 0.3;

impl SurrogateTarget {
    pub fn new(mode: TargetMode, dims: TokenFormerDims, seed: u64) -> Result<Self> {
        match mode {
            TargetMode::ClusterMeanRegression => {
                let normal = Normal::new(0.0, 1.0 / (dims.d as f64).sqrt())
                    .map_err(|e| Error::InvalidParameter(e.to_string()))?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let data = (0..dims.d_out * dims.d).map(|_| normal.sample(&mut rng)).collect();
                Ok(SurrogateTarget::ClusterMean(Matrix::from_vec(dims.d_out, dims.d, data)))
            }
            TargetMode::TeacherPooling => Ok(SurrogateTarget::Teacher(Box::new(init_params_with_std(
                dims,
                TEACHER_INIT_STD,
                seed,
            )?))),
        }
    }

    /// `K × d_out` target tokens for one clustered image.
    pub fn targets(&self, ps: &PatchSet, cl: &Clustering) -> Result<Matrix> {
        match self {
            SurrogateTarget::ClusterMean(map) => {
                if map.cols() != ps.dim() {
                    return Err(Error::ShapeMismatch(format!(
                        "target map expects d = {}, patches have d = {}",
                        map.cols(),
                        ps.dim()
                    )));
                }
                let mut out = Matrix::zeros(cl.k(), map.rows());
                for k in 0..cl.k() {
                    let members = cl.members(k);
                    let mut mean = vec![0.0; ps.dim()];
                    for &i in &members {
                        mean.iter_mut().zip(ps.row(i)).for_each(|(m, x)| *m += x);
                    }
                    mean.iter_mut().for_each(|m| *m /= members.len() as f64);
                    out.row_mut(k).copy_from_slice(&map.matvec(&mean));
                }
                Ok(out)
            }
            SurrogateTarget::Teacher(teacher) => Ok(form_tokens(ps, cl, teacher)?.tokens),
        }
    }
}

/// Squared error `‖t_k − y_k‖²` averaged over the `K` tokens.
pub fn surrogate_loss(tokens: &TokenSequence, targets: &Matrix) -> Result<f64> {
    if tokens.tokens.rows() != targets.rows() || tokens.tokens.cols() != targets.cols() {
        return Err(Error::ShapeMismatch(format!(
            "tokens {}x{} vs targets {}x{}",
            tokens.tokens.rows(),
            tokens.tokens.cols(),
            targets.rows(),
            targets.cols()
        )));
    }
    let n = targets.rows() as f64;
    Ok(tokens
        .tokens
        .as_slice()
        .iter()
        .zip(targets.as_slice())
        .map(|(t, y)| (t - y).powi(2))
        .sum::<f64>()
        / n)
}

/// Loss and parameter gradient for one image.
fn image_step(
    ps: &PatchSet,
    cl: &Clustering,
    params: &TokenFormerParams,
    target: &SurrogateTarget,
) -> Result<(f64, TokenFormerParams)> {
    let tokens = form_tokens(ps, cl, params)?;
    let targets = target.targets(ps, cl)?;
    let loss = surrogate_loss(&tokens, &targets)?;
    let scale = 2.0 / targets.rows() as f64;
    let mut upstream = tokens.tokens;
    for (u, y) in upstream.as_mut_slice().iter_mut().zip(targets.as_slice()) {
        *u = scale * (*u - y);
    }
    Ok((loss, backward(ps, cl, params, &upstream)?.params))
}

/// Clusterings keyed on (image index, threshold bits).
#[derive(Debug, Default, Clone)]
pub struct ClusterCache {
    entries: HashMap<(usize, u64), Clustering>,
}

impl ClusterCache {
    pub fn build(corpus: &[PatchSet], thetas: &[f64]) -> Result<Self> {
        let keys: Vec<(usize, f64)> = (0..corpus.len())
            .flat_map(|i| thetas.iter().map(move |&t| (i, t)))
            .collect();
        let values: Vec<Clustering> = keys
            .par_iter()
            .map(|&(i, t)| cluster(&corpus[i], &GranularityConfig::new(t)?))
            .collect::<Result<_>>()?;
        Ok(Self {
            entries: keys.into_iter().map(|(i, t)| (i, t.to_bits())).zip(values).collect(),
        })
    }

    pub fn get(&self, image: usize, theta: f64) -> Option<&Clustering> {
        self.entries.get(&(image, theta.to_bits()))
    }
}

/// Patch count, width and row norm of the standard training corpus.
pub const TRAIN_CORPUS_N: usize = 16;
pub const TRAIN_CORPUS_DIM: usize = 16;
pub const TRAIN_CORPUS_ROW_NORM: f64 = 12.0;

/// The standard synthetic training corpus: image `i` has 4 planted clusters,
/// noise 0.1 and seed `seed + i`. Rows are scaled to norm 12 so that each
/// coordinate has a spread of about 3; clustering is unaffected by the scale.
pub fn training_corpus(n_images: usize, seed: u64) -> Result<Vec<PatchSet>> {
    (0..n_images as u64)
        .map(|i| {
            let spec =
                SynthSpec::new(4, TRAIN_CORPUS_N, TRAIN_CORPUS_DIM, 0.1, seed + i).with_row_norm(TRAIN_CORPUS_ROW_NORM);
            Ok(synth_clustered(&spec)?.patches)
        })
        .collect()
}

/// Token-former shape matching [`training_corpus`].
pub fn training_dims() -> TokenFormerDims {
    TokenFormerDims::new(TRAIN_CORPUS_DIM, TRAIN_CORPUS_DIM, TRAIN_CORPUS_DIM).with_n_max(TRAIN_CORPUS_N)
}

/// Mean surrogate loss over the corpus at a single threshold.
pub fn evaluate_loss(
    corpus: &[PatchSet],
    theta: f64,
    params: &TokenFormerParams,
    target: &SurrogateTarget,
) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("empty corpus".into()));
    }
    let cfg = GranularityConfig::new(theta)?;
    let losses: Vec<f64> = corpus
        .par_iter()
        .map(|ps| {
            let cl = cluster(ps, &cfg)?;
            surrogate_loss(&form_tokens(ps, &cl, params)?, &target.targets(ps, &cl)?)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: TokenFormerParams,
    /// Mean batch loss before each update.
    pub trace: Vec<f64>,
}

/// Plain full-step gradient descent on the surrogate loss.
///
/// Batches walk the corpus cyclically. With a uniform schedule every image in
/// every batch draws its own threshold from a seeded stream, so the run is
/// reproducible for a fixed seed regardless of thread count.
pub fn fit(
    corpus: &[PatchSet],
    cfg: &TrainConfig,
    params: TokenFormerParams,
    target: &SurrogateTarget,
) -> Result<FitResult> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidInput("empty corpus".into()));
    }
    let thetas = cfg.theta_schedule.thetas();
    let cache = ClusterCache::build(corpus, &thetas)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch = cfg.batch_size.min(corpus.len());
    let mut params = params;
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let picks: Vec<(usize, f64)> = (0..batch)
            .map(|b| {
                let image = (step * batch + b) % corpus.len();
                let theta = match &cfg.theta_schedule {
                    ThetaSchedule::Fixed { theta } => *theta,
                    ThetaSchedule::Uniform { thetas } => thetas[rng.random_range(0..thetas.len())],
                };
                (image, theta)
            })
            .collect();

        let results: Vec<(f64, TokenFormerParams)> = picks
            .par_iter()
            .map(|&(image, theta)| {
                let cl = cache.get(image, theta).expect("cached clustering");
                image_step(&corpus[image], cl, &params, target)
            })
            .collect::<Result<_>>()?;

        let mut loss = 0.0;
        let mut grad = params.zeros_like();
        for (l, g) in &results {
            loss += l;
            grad.axpy(1.0, g);
        }
        loss /= batch as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        trace.push(loss);
        params.axpy(-cfg.learning_rate / batch as f64, &grad);
        if !params.is_finite() {
            return Err(Error::Divergence { step, loss: f64::NAN });
        }
    }
    Ok(FitResult { params, trace })
}

pub fn trace_csv(trace: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding_io::{synth_clustered, SynthSpec};
    use crate::token_former::init_params;

    fn corpus(n: usize, noise: f64) -> Vec<PatchSet> {
        (0..n as u64)
            .map(|s| synth_clustered(&SynthSpec::new(4, 16, 8, noise, s)).unwrap().patches)
            .collect()
    }

    fn dims() -> TokenFormerDims {
        TokenFormerDims::new(8, 8, 8).with_n_max(16)
    }

    fn cfg(steps: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            steps,
            learning_rate: lr,
            batch_size: 8,
            theta_schedule: ThetaSchedule::Fixed { theta: 0.65 },
            seed: 1,
            target_mode: TargetMode::ClusterMeanRegression,
        }
    }

    #[test]
    fn exact_targets_give_zero_loss() {
        let c = corpus(1, 0.1);
        let cl = cluster(&c[0], &GranularityConfig::new(0.65).unwrap()).unwrap();
        let params = init_params(dims(), 0).unwrap();
        let tokens = form_tokens(&c[0], &cl, &params).unwrap();
        assert_eq!(surrogate_loss(&tokens, &tokens.tokens.clone()).unwrap(), 0.0);
        let target = SurrogateTarget::new(TargetMode::ClusterMeanRegression, dims(), 3).unwrap();
        let l = surrogate_loss(&tokens, &target.targets(&c[0], &cl).unwrap()).unwrap();
        assert!(l > 0.0 && l.is_finite());
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let c = corpus(4, 0.1);
        let params = init_params(dims(), 0).unwrap();
        let target = SurrogateTarget::new(TargetMode::ClusterMeanRegression, dims(), 3).unwrap();
        let mut cfg = cfg(5, 0.0);
        cfg.batch_size = 4;
        let r = fit(&c, &cfg, params.clone(), &target).unwrap();
        assert_eq!(r.params, params);
        assert!(r.trace.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn fit_is_deterministic() {
        let c = corpus(6, 0.1);
        let target = SurrogateTarget::new(TargetMode::TeacherPooling, dims(), 3).unwrap();
        let mut cfg = cfg(4, 0.05);
        cfg.theta_schedule = ThetaSchedule::Uniform {
            thetas: vec![0.5, 0.65, 0.75],
        };
        let a = fit(&c, &cfg, init_params(dims(), 2).unwrap(), &target).unwrap();
        let b = fit(&c, &cfg, init_params(dims(), 2).unwrap(), &target).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn one_step_moves_every_branch() {
        let c = corpus(4, 0.1);
        let params = init_params(dims(), 0).unwrap();
        let target = SurrogateTarget::new(TargetMode::ClusterMeanRegression, dims(), 3).unwrap();
        let mut cfg = cfg(1, 0.1);
        cfg.batch_size = 4;
        let cl = cluster(&c[0], &GranularityConfig::new(0.65).unwrap()).unwrap();
        assert!(cl.cluster_sizes().iter().any(|&s| s >= 2));
        let r = fit(&c, &cfg, params.clone(), &target).unwrap();
        assert_ne!(r.params.w_v, params.w_v);
        assert_ne!(r.params.w1, params.w1);
        assert_ne!(r.params.w2, params.w2);
        assert_ne!(r.params.w_q, params.w_q);
        assert_ne!(r.params.w_k, params.w_k);
        for row in 0..16 {
            assert_ne!(r.params.pos_table.row(row), params.pos_table.row(row));
        }
    }

    #[test]
    fn singleton_clusterings_leave_query_and_key_alone() {
        // theta just below 1 on noisy data: every patch is its own cluster.
        let c = corpus(2, 0.3);
        let params = init_params(dims(), 0).unwrap();
        let target = SurrogateTarget::new(TargetMode::ClusterMeanRegression, dims(), 3).unwrap();
        let mut cfg = cfg(1, 0.1);
        cfg.theta_schedule = ThetaSchedule::Fixed { theta: 0.999 };
        let r = fit(&c, &cfg, params.clone(), &target).unwrap();
        assert_eq!(r.params.w_q, params.w_q);
        assert_eq!(r.params.w_k, params.w_k);
        assert_ne!(r.params.w_v, params.w_v);
    }

    #[test]
    fn early_steps_decrease_on_zero_noise_corpus() {
        let c = corpus(8, 0.0);
        let target = SurrogateTarget::new(TargetMode::ClusterMeanRegression, dims(), 3).unwrap();
        let r = fit(&c, &cfg(10, 1e-3), init_params(dims(), 0).unwrap(), &target).unwrap();
        assert!(r.trace.windows(2).all(|w| w[1] < w[0]), "{:?}", r.trace);
    }

    #[test]
    fn config_validation() {
        let mut bad = cfg(0, 0.1);
        assert!(bad.validate().is_err());
        bad = cfg(1, -0.1);
        assert!(bad.validate().is_err());
        bad = cfg(1, 0.1);
        bad.theta_schedule = ThetaSchedule::Uniform { thetas: vec![] };
        assert!(bad.validate().is_err());
        bad.theta_schedule = ThetaSchedule::Fixed { theta: 1.0 };
        assert!(bad.validate().is_err());
        assert!(fit(
            &[],
            &cfg(1, 0.1),
            init_params(dims(), 0).unwrap(),
            &SurrogateTarget::new(TargetMode::ClusterMeanRegression, dims(), 0).unwrap()
        )
        .is_err());
    }

    #[test]
    fn trace_csv_layout() {
        assert_eq!(trace_csv(&[1.5, 0.25]), "step,loss\n0,1.5\n1,0.25\n");
    }
}
