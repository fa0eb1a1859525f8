//! The `divt` command-line tool.
//!
//! Exit codes: 0 success, 1 check failure, 2 input or format error,
//! 3 parameter error. `DIVT_THREADS` caps the worker pool.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::clustering::{cluster, ClusterExport, DegreePolicy, GranularityConfig};
use crate::embedding_io::{
    load_layerwise, load_patch_set, save_layerwise, save_patch_set, synth_clustered, synth_layerwise, Dtype,
    LayerwiseEmbeddings, PatchSet, SynthSpec,
};
use crate::error::Error;
use crate::fsutil::atomic_write;
use crate::gradcheck::{random_instance, run_gradcheck, GradcheckConfig};
use crate::metrics::{kv_cache_mib, theta_sweep, token_count_stats, ModelProfile};
use crate::render::render_ppm;
use crate::similarity::{corpus_similarity_profile, layerwise_similarity_profile, profile_csv};
use crate::token_former::{
    attention_csv, attention_weights, form_tokens, init_params, load_checkpoint, save_checkpoint, tokens_csv,
    ScalePolicy, TokenFormerDims, TokenFormerParams, DEFAULT_N_MAX,
};
use crate::training::{
    evaluate_loss, fit, trace_csv, training_corpus, SurrogateTarget, TargetMode, ThetaSchedule, TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_PARAMETER: i32 = 3;

pub const THREADS_ENV: &str = "DIVT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "divt", version, about = "Similarity-driven visual tokenization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cluster patches and form one token per cluster.
    Tokenize(TokenizeArgs),
    /// Token-count statistics over a corpus for several thresholds.
    Sweep(SweepArgs),
    /// Layer-wise mean pairwise patch similarity.
    Analyze(AnalyzeArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Draw a cluster map as a PPM image.
    Render(RenderArgs),
    /// Write synthetic embedding files.
    Synth(SynthArgs),
    /// Fit the token former on the surrogate objective.
    Train(TrainArgs),
    /// Token counts, KV-cache size and clustering time per threshold.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyArg {
    Static,
    Recompute,
}

impl From<PolicyArg> for DegreePolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Static => DegreePolicy::Static,
            PolicyArg::Recompute => DegreePolicy::Recompute,
        }
    }
}

#[derive(Debug, Args)]
struct TokenizeArgs {
    /// A DIVT file or a directory of them.
    input: PathBuf,
    #[arg(long, default_value_t = 0.65, allow_negative_numbers = true)]
    theta: f64,
    /// Token-former checkpoint; random init from --seed when absent.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Attention width for random init (default: d).
    #[arg(long)]
    d_att: Option<usize>,
    /// Token width for random init (default: d).
    #[arg(long)]
    d_out: Option<usize>,
    /// Use raw dot-product logits for random init.
    #[arg(long)]
    unscaled: bool,
    #[arg(long, value_enum, default_value = "static")]
    degree_policy: PolicyArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Directory of DIVT files.
    input: PathBuf,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "0.3,0.5,0.65,0.75",
        allow_negative_numbers = true
    )]
    thetas: Vec<f64>,
    #[arg(long)]
    csv: PathBuf,
    /// JSON report with per-image counts (default: CSV path with .json).
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// A DIVL file or a directory of them.
    input: PathBuf,
    #[arg(long)]
    csv: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 12)]
    n: usize,
    #[arg(long, default_value_t = 6)]
    d: usize,
    #[arg(long, default_value_t = 4)]
    d_att: usize,
    #[arg(long, default_value_t = 3)]
    d_out: usize,
    #[arg(long, default_value_t = 0.6, allow_negative_numbers = true)]
    theta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long)]
    unscaled: bool,
}

#[derive(Debug, Args)]
struct RenderArgs {
    /// Cluster JSON written by `tokenize`.
    input: PathBuf,
    #[arg(long)]
    ppm: PathBuf,
    /// Pixel edge length of one patch.
    #[arg(long, default_value_t = 8)]
    block: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory; one file per image.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write DIVL files with this many layers instead of DIVT files.
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long, value_enum, default_value = "f64")]
    dtype: DtypeArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TargetArg {
    ClusterMean,
    Teacher,
}

impl From<TargetArg> for TargetMode {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::ClusterMean => TargetMode::ClusterMeanRegression,
            TargetArg::Teacher => TargetMode::TeacherPooling,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Directory of DIVT files (default: the built-in synthetic corpus).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Size of the built-in synthetic corpus.
    #[arg(long, default_value_t = 32)]
    images: usize,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Fixed threshold, or a comma list sampled per image and step.
    #[arg(long, value_delimiter = ',', default_value = "0.65", allow_negative_numbers = true)]
    thetas: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "cluster-mean")]
    target: TargetArg,
    /// Loss trace CSV.
    #[arg(long)]
    trace: PathBuf,
    /// Checkpoint of the trained parameters.
    #[arg(long)]
    params_out: PathBuf,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Directory of DIVT files.
    input: PathBuf,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "0.5,0.65,0.75",
        allow_negative_numbers = true
    )]
    thetas: Vec<f64>,
}

/// Record of one invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub inputs: Vec<String>,
    pub granularity: Vec<GranularityConfig>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub outputs: Vec<String>,
}

impl RunManifest {
    fn new(command: &str, inputs: &[PathBuf], granularity: Vec<GranularityConfig>, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            granularity,
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            outputs: Vec::new(),
        }
    }

    /// Writes `<out>.manifest.json`.
    fn write(&self, out: &Path) -> anyhow::Result<()> {
        let mut path = out.as_os_str().to_owned();
        path.push(".manifest.json");
        write_json(Path::new(&path), self)
    }
}

/// Tokenizer output for one image.
#[derive(Debug, Serialize)]
struct TokenizeRecord<'a> {
    #[serde(flatten)]
    cluster: &'a ClusterExport,
    d_out: usize,
    tokens: Vec<Vec<f64>>,
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    atomic_write(path, text.as_bytes())?;
    Ok(())
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

/// A file, or the files in a directory with the given extension sorted by name.
fn collect_inputs(input: &Path, ext: &str) -> anyhow::Result<Vec<PathBuf>> {
    if !input.is_dir() {
        if !input.exists() {
            return Err(Error::InvalidInput(format!("{}: no such file or directory", input.display())).into());
        }
        return Ok(vec![input.to_path_buf()]);
    }
    let entries = std::fs::read_dir(input).map_err(|e| Error::io(input, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(input, e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext)) {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidInput(format!("{}: no .{ext} files found", input.display())).into());
    }
    Ok(files)
}

fn load_corpus(files: &[PathBuf]) -> anyhow::Result<Vec<PatchSet>> {
    Ok(files.par_iter().map(load_patch_set).collect::<Result<_, _>>()?)
}

fn granularity(thetas: &[f64]) -> anyhow::Result<Vec<GranularityConfig>> {
    Ok(thetas
        .iter()
        .map(|&t| GranularityConfig::new(t))
        .collect::<Result<_, _>>()?)
}

fn cmd_tokenize(a: TokenizeArgs) -> anyhow::Result<i32> {
    let cfg = GranularityConfig::new(a.theta)?.with_policy(a.degree_policy.into());
    let files = collect_inputs(&a.input, "divt")?;
    let corpus = load_corpus(&files)?;

    let params = match &a.params {
        Some(path) => load_checkpoint(path)?,
        None => {
            let d = corpus[0].dim();
            let n_max = corpus
                .iter()
                .map(PatchSet::n_patches)
                .max()
                .unwrap_or(0)
                .max(DEFAULT_N_MAX);
            let dims = TokenFormerDims::new(d, a.d_att.unwrap_or(d), a.d_out.unwrap_or(d)).with_n_max(n_max);
            let policy = if a.unscaled {
                ScalePolicy::Unscaled
            } else {
                ScalePolicy::Scaled
            };
            init_params(dims, a.seed)?.with_scale_policy(policy)
        }
    };

    let results: Vec<(ClusterExport, String, String, Vec<Vec<f64>>)> = corpus
        .par_iter()
        .zip(&files)
        .map(|(ps, path)| -> anyhow::Result<_> {
            let cl = cluster(ps, &cfg)?;
            let tokens = form_tokens(ps, &cl, &params).with_context(|| path.display().to_string())?;
            let weights = attention_weights(ps, &cl, &params)?;
            Ok((
                ClusterExport::new(ps, a.theta, &cl),
                tokens_csv(&tokens),
                attention_csv(&weights),
                tokens.tokens.to_rows(),
            ))
        })
        .collect::<anyhow::Result<_>>()?;

    ensure_dir(&a.out)?;
    let mut manifest = RunManifest::new("tokenize", &files, vec![cfg], a.params.is_none().then_some(a.seed));
    if let Some(p) = &a.params {
        manifest.inputs.push(p.display().to_string());
    }
    for (export, tok_csv, att_csv, tokens) in &results {
        let json_path = a.out.join(format!("{}.json", export.id));
        let tok_path = a.out.join(format!("{}.tokens.csv", export.id));
        let att_path = a.out.join(format!("{}.attention.csv", export.id));
        let record = TokenizeRecord {
            cluster: export,
            d_out: params.dims.d_out,
            tokens: tokens.clone(),
        };
        write_json(&json_path, &record)?;
        write_text(&tok_path, tok_csv)?;
        write_text(&att_path, att_csv)?;
        for p in [json_path, tok_path, att_path] {
            manifest.outputs.push(p.display().to_string());
        }
        println!("{}: K={}", export.id, export.k);
    }
    manifest.write(&a.out)?;
    Ok(EXIT_OK)
}

fn cmd_sweep(a: SweepArgs) -> anyhow::Result<i32> {
    let configs = granularity(&a.thetas)?;
    if !a.input.is_dir() {
        return Err(Error::InvalidInput(format!("{}: not a directory", a.input.display())).into());
    }
    let files = collect_inputs(&a.input, "divt")?;
    let corpus = load_corpus(&files)?;
    let report = theta_sweep(&corpus, &a.thetas)?;
    let json = a.json.clone().unwrap_or_else(|| a.csv.with_extension("json"));
    write_text(&a.csv, &report.to_csv())?;
    write_json(&json, &report)?;
    let mut manifest = RunManifest::new("sweep", &files, configs, None);
    manifest.outputs = vec![a.csv.display().to_string(), json.display().to_string()];
    manifest.write(&a.csv)?;
    for r in &report.rows {
        println!(
            "theta={}: mean={:.2} std={:.2} min={} max={}",
            r.theta, r.mean, r.std, r.min, r.max
        );
    }
    Ok(EXIT_OK)
}

fn cmd_analyze(a: AnalyzeArgs) -> anyhow::Result<i32> {
    let files = collect_inputs(&a.input, "divl")?;
    let corpus: Vec<LayerwiseEmbeddings> = files.par_iter().map(load_layerwise).collect::<Result<_, _>>()?;
    let profile = if corpus.len() == 1 {
        layerwise_similarity_profile(&corpus[0])?
    } else {
        corpus_similarity_profile(&corpus)?
    };
    write_text(&a.csv, &profile_csv(&profile))?;
    let mut manifest = RunManifest::new("analyze", &files, Vec::new(), None);
    manifest.outputs = vec![a.csv.display().to_string()];
    manifest.write(&a.csv)?;
    for p in &profile {
        println!("layer {}: {:.4} ± {:.4}", p.layer, p.mean_similarity, p.stddev);
    }
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: GradcheckArgs) -> anyhow::Result<i32> {
    let cfg = GradcheckConfig {
        n: a.n,
        d: a.d,
        d_att: a.d_att,
        d_out: a.d_out,
        theta: a.theta,
        seed: a.seed,
        eps: a.eps,
        scale_policy: if a.unscaled {
            ScalePolicy::Unscaled
        } else {
            ScalePolicy::Scaled
        },
        ..GradcheckConfig::default()
    };
    let report = run_gradcheck(&random_instance(&cfg)?, cfg.eps)?;
    println!(
        "K={} coords={} max_rel_error={:.3e} worst={} {}",
        report.k,
        report.n_coords,
        report.max_rel_error,
        report.worst_tensor,
        if report.passed { "PASS" } else { "FAIL" }
    );
    Ok(if report.passed { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn cmd_render(a: RenderArgs) -> anyhow::Result<i32> {
    let bytes = std::fs::read(&a.input).map_err(|e| Error::io(&a.input, e))?;
    let export: ClusterExport =
        serde_json::from_slice(&bytes).map_err(|e| Error::InvalidInput(format!("{}: {e}", a.input.display())))?;
    let ppm = render_ppm(&export, a.block).with_context(|| a.input.display().to_string())?;
    atomic_write(&a.ppm, &ppm)?;
    let mut manifest = RunManifest::new(
        "render",
        std::slice::from_ref(&a.input),
        vec![GranularityConfig {
            theta: export.theta,
            degree_policy: DegreePolicy::default(),
            tie_break: Default::default(),
        }],
        None,
    );
    manifest.outputs = vec![a.ppm.display().to_string()];
    manifest.write(&a.ppm)?;
    println!("{}: K={} -> {}", export.id, export.k, a.ppm.display());
    Ok(EXIT_OK)
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<i32> {
    if a.count == 0 {
        return Err(Error::InvalidParameter("count must be >= 1".into()).into());
    }
    ensure_dir(&a.out)?;
    let dtype = match a.dtype {
        DtypeArg::F32 => Dtype::F32,
        DtypeArg::F64 => Dtype::F64,
    };
    let mut manifest = RunManifest::new("synth", &[], Vec::new(), Some(a.seed));
    for i in 0..a.count as u64 {
        let spec = SynthSpec::new(a.k, a.n, a.d, a.noise, a.seed + i);
        let path = match a.layers {
            Some(layers) => {
                let le = synth_layerwise(&spec, layers)?;
                let le = LayerwiseEmbeddings::new(
                    le.id(),
                    le.layers().iter().map(|l| l.clone().with_dtype(dtype)).collect(),
                )?;
                let path = a.out.join(format!("synth-{}.divl", spec.seed));
                save_layerwise(&le, &path)?;
                path
            }
            None => {
                let ps = synth_clustered(&spec)?.patches.with_dtype(dtype);
                let path = a.out.join(format!("synth-{}.divt", spec.seed));
                save_patch_set(&ps, &path)?;
                path
            }
        };
        manifest.outputs.push(path.display().to_string());
    }
    manifest.write(&a.out)?;
    println!("wrote {} file(s) to {}", a.count, a.out.display());
    Ok(EXIT_OK)
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<i32> {
    let configs = granularity(&a.thetas)?;
    let (corpus, inputs) = match &a.corpus {
        Some(dir) => {
            let files = collect_inputs(dir, "divt")?;
            (load_corpus(&files)?, files)
        }
        None => (training_corpus(a.images, a.seed)?, Vec::new()),
    };
    let d = corpus[0].dim();
    if let Some(bad) = corpus.iter().find(|ps| ps.dim() != d) {
        return Err(Error::ShapeMismatch(format!("{} has d = {}, expected {d}", bad.id(), bad.dim())).into());
    }
    let n_max = corpus.iter().map(PatchSet::n_patches).max().unwrap_or(1);
    let dims = TokenFormerDims::new(d, d, d).with_n_max(n_max);
    let schedule = match a.thetas.as_slice() {
        [theta] => ThetaSchedule::Fixed { theta: *theta },
        thetas => ThetaSchedule::Uniform {
            thetas: thetas.to_vec(),
        },
    };
    let cfg = TrainConfig {
        steps: a.steps,
        learning_rate: a.lr,
        batch_size: a.batch,
        theta_schedule: schedule,
        seed: a.seed,
        target_mode: a.target.into(),
    };
    cfg.validate()?;
    let target = SurrogateTarget::new(cfg.target_mode, dims, a.seed.wrapping_add(1))?;
    let init: TokenFormerParams = init_params(dims, a.seed)?;
    let result = fit(&corpus, &cfg, init.clone(), &target)?;

    write_text(&a.trace, &trace_csv(&result.trace))?;
    save_checkpoint(&result.params, &a.params_out)?;
    let mut manifest = RunManifest::new("train", &inputs, configs, Some(a.seed));
    manifest.outputs = vec![a.trace.display().to_string(), a.params_out.display().to_string()];
    manifest.write(&a.params_out)?;

    let first = result.trace[0];
    let last = *result.trace.last().unwrap();
    println!("loss {first:.6} -> {last:.6} (ratio {:.4})", last / first);
    for t in cfg.theta_schedule.thetas() {
        println!(
            "theta={t}: untrained {:.6} trained {:.6}",
            evaluate_loss(&corpus, t, &init, &target)?,
            evaluate_loss(&corpus, t, &result.params, &target)?
        );
    }
    Ok(EXIT_OK)
}

fn cmd_bench(a: BenchArgs) -> anyhow::Result<i32> {
    granularity(&a.thetas)?;
    let files = collect_inputs(&a.input, "divt")?;
    let corpus = load_corpus(&files)?;
    let profile = ModelProfile::LLAMA_7B;
    let fixed = corpus.iter().map(PatchSet::n_patches).max().unwrap_or(0) as u64;
    println!(
        "fixed grid: {fixed} tokens, KV {:.1} MiB",
        kv_cache_mib(fixed, &profile)
    );
    for &t in &a.thetas {
        let start = Instant::now();
        let stats = token_count_stats(&corpus, t)?;
        let elapsed = start.elapsed();
        println!(
            "theta={t}: mean tokens {:.2}, KV {:.1} MiB, clustering {:.3} ms/image",
            stats.mean,
            kv_cache_mib(1, &profile) * stats.mean,
            elapsed.as_secs_f64() * 1e3 / corpus.len() as f64
        );
    }
    Ok(EXIT_OK)
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidParameter(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    // A pool built earlier in the same process wins; that only happens in tests.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::InvalidParameter(_) => EXIT_PARAMETER,
                Error::Divergence { .. } | Error::NonFiniteLoss(_) => EXIT_CHECK_FAILED,
                _ => EXIT_INPUT,
            };
        }
    }
    EXIT_INPUT
}

fn dispatch(cli: Cli) -> anyhow::Result<i32> {
    configure_threads()?;
    match cli.command {
        Command::Tokenize(a) => cmd_tokenize(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Render(a) => cmd_render(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

/// Runs the tool on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_PARAMETER } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            exit_code(&err)
        }
    }
}

pub fn main() -> i32 {
    run(std::env::args_os())
}
