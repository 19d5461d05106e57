//! Command implementations behind the `pillarnext` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use pillarnext::autograd::Tape;
use pillarnext::config::{Precision, RunConfig};
use pillarnext::conv::{build_rulebook, init_params, KernelSpec};
use pillarnext::encoding::{read_points, PointCloud};
use pillarnext::network::{Detection, ForwardStats, PillarNet};
use pillarnext::rng;
use pillarnext::sample::{random_layout, random_matrix};
use pillarnext::train::suite::run_suite;
use pillarnext::train::{detect_batch, eval_toy, overfit_toy, SceneLabels, TrainBatch};
use pillarnext::{NormMode, ParamStore, Real, SparseTensor};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_CHECK_FAILED: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] pillarnext::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::CheckFailed(_) => EXIT_CHECK_FAILED,
            _ => EXIT_INVALID,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "pillarnext", version, about = "Sparse pillar-based 3-D detector toolkit")]
pub struct Cli {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random stream (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Floating-point width of network evaluation (overrides the config).
    #[arg(long, global = true, value_parser = ["32", "64"])]
    pub precision: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic scenes: scene_<i>.bin points and scene_<i>.json labels.
    Synth(SynthArgs),
    /// Run the detector on one point file.
    Forward(ForwardArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Time rulebook construction and convolution at several densities.
    Bench(BenchArgs),
    /// Overfit the detector on synthetic scenes and evaluate it.
    TrainToy(TrainArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub scenes: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ForwardArgs {
    /// Checkpoint to load; seeded initialization when omitted.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = pillarnext::train::gradcheck::DEFAULT_TOL)]
    pub tol: f64,
    /// CSV report path; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Active-site densities in (0, 1].
    #[arg(long = "density", num_args = 1.., default_values_t = [0.005, 0.02, 0.1])]
    pub densities: Vec<f64>,
    /// Input and output channels of the benchmarked convolutions.
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training steps (overrides the config).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Write `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn json_bytes<S: Serialize>(value: &S) -> CliResult<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value).map_err(pillarnext::Error::from)?;
    v.push(b'\n');
    Ok(v)
}

fn csv_bytes<S: Serialize>(rows: &[S]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| CliError::Argument(e.to_string()))
}

/// Resolve the effective configuration from the file and global overrides.
pub fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            RunConfig::from_json(&text).map_err(|e| match e {
                pillarnext::Error::Json(j) => CliError::Argument(format!("{}: {j}", p.display())),
                other => CliError::Core(other),
            })?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(p) = &cli.precision {
        cfg.precision = Precision::from_bits(p.parse().map_err(|_| CliError::Argument(format!("precision {p}")))?)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_synth(cfg: &RunConfig, args: &SynthArgs) -> CliResult<()> {
    let mut outputs = Vec::with_capacity(args.scenes);
    for i in 0..args.scenes {
        let (pc, boxes) = cfg.scene(i)?;
        outputs.push((i, pc.to_bytes(), json_bytes(&SceneLabels { boxes })?));
    }
    for (i, bin, labels) in outputs {
        write_atomic(&args.out.join(format!("scene_{i}.bin")), &bin)?;
        write_atomic(&args.out.join(format!("scene_{i}.json")), &labels)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ForwardReport {
    detections: Vec<Detection>,
    stats: ForwardStats,
}

fn forward_impl<T: Real>(cfg: &RunConfig, args: &ForwardArgs, pc: PointCloud) -> CliResult<ForwardReport> {
    let mut store = ParamStore::<T>::new();
    let net = PillarNet::new(&mut store, &cfg.network, &cfg.grid, cfg.seed)?;
    if let Some(w) = &args.weights {
        let f = fs::File::open(w).map_err(io_err(w))?;
        store.load_checkpoint(std::io::BufReader::new(f))?;
    }
    let vb = net.prepare(&[pc], cfg.seed)?;
    let mut tape = Tape::new(NormMode::Eval);
    let out = net.forward(&mut tape, &store, &vb)?;
    Ok(ForwardReport {
        detections: net.detect(&tape, &out, cfg.score_thresh),
        stats: out.stats,
    })
}

pub fn cmd_forward(cfg: &RunConfig, args: &ForwardArgs) -> CliResult<()> {
    let pc = read_points(&args.input).map_err(|e| match e {
        pillarnext::Error::Io(source) => CliError::Io {
            path: args.input.clone(),
            source,
        },
        other => CliError::Core(pillarnext::Error::MalformedInput(format!("{}: {other}", args.input.display()))),
    })?;
    let report = match cfg.precision {
        Precision::F32 => forward_impl::<f32>(cfg, args, pc)?,
        Precision::F64 => forward_impl::<f64>(cfg, args, pc)?,
    };
    write_atomic(&args.out, &json_bytes(&report)?)
}

#[derive(Serialize)]
struct GradcheckRow {
    check: String,
    passed: bool,
    max_rel_err: f64,
    worst_group: String,
    groups: usize,
    entries: usize,
    resamples: usize,
    error: String,
}

/// Returns the CSV report and whether every check passed.
pub fn cmd_gradcheck(cfg: &RunConfig, args: &GradcheckArgs) -> CliResult<bool> {
    if !(args.tol >= 0.0) {
        return Err(CliError::Argument(format!("tolerance {}", args.tol)));
    }
    let rows: Vec<GradcheckRow> = run_suite(cfg.seed, args.tol)
        .into_iter()
        .map(|r| GradcheckRow {
            check: r.name,
            passed: r.passed,
            max_rel_err: r.max_rel_err,
            worst_group: r.worst_group,
            groups: r.groups,
            entries: r.entries,
            resamples: r.resamples,
            error: r.error,
        })
        .collect();
    let all = rows.iter().all(|r| r.passed);
    let bytes = csv_bytes(&rows)?;
    match &args.out {
        Some(p) => write_atomic(p, &bytes)?,
        None => std::io::stdout().write_all(&bytes).map_err(io_err(Path::new("<stdout>")))?,
    }
    Ok(all)
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub kernel: String,
    pub density: f64,
    pub n_active: usize,
    pub rulebook_pairs: usize,
    pub rulebook_build_ms: f64,
    pub conv_forward_ms: f64,
}

/// The benchmarked kernel types.
pub fn bench_kernels() -> Vec<(&'static str, KernelSpec)> {
    vec![
        ("submanifold3x3", KernelSpec::submanifold(&[3, 3])),
        ("dilated3x3m2", KernelSpec::submanifold(&[3, 3]).with_dilation(2)),
        ("spatial3x3s2", KernelSpec::spatial(&[3, 3], 2)),
        ("sep1x9", KernelSpec::submanifold(&[1, 9])),
    ]
}

pub fn bench_rows(shape: [usize; 2], densities: &[f64], channels: usize, seed: u64) -> CliResult<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &d in densities {
        if !(d > 0.0 && d <= 1.0) {
            return Err(CliError::Argument(format!("density {d} is outside (0, 1]")));
        }
        let layout = Arc::new(random_layout(&shape, 1, d, seed)?);
        let x = SparseTensor::from_layout(layout.clone(), random_matrix::<f32>(layout.len(), channels, seed))?;
        for (name, spec) in bench_kernels() {
            let t0 = Instant::now();
            let rb = Arc::new(build_rulebook(&layout, &spec)?);
            let build_ms = t0.elapsed().as_secs_f64() * 1e3;
            let p = init_params::<f32>(&spec, channels, channels, rng::stream_seed(seed, name));
            let mut tape = Tape::<f32>::new(NormMode::Eval);
            let xv = tape.sparse_input(&x);
            let w = tape.constant(p.weight);
            let t1 = Instant::now();
            tape.conv(&xv, &rb, w, None)?;
            let conv_ms = t1.elapsed().as_secs_f64() * 1e3;
            rows.push(BenchRow {
                kernel: name.to_string(),
                density: d,
                n_active: layout.len(),
                rulebook_pairs: rb.total_pairs(),
                rulebook_build_ms: build_ms,
                conv_forward_ms: conv_ms,
            });
        }
    }
    Ok(rows)
}

pub fn cmd_bench(cfg: &RunConfig, args: &BenchArgs) -> CliResult<()> {
    if args.channels == 0 {
        return Err(CliError::Argument("channels must be positive".into()));
    }
    let rows = bench_rows(cfg.grid.bev_shape(), &args.densities, args.channels, cfg.seed)?;
    write_atomic(&args.out, &csv_bytes(&rows)?)
}

#[derive(Serialize)]
struct CurveRow {
    step: usize,
    loss: f64,
    cls_loss: f64,
    reg_loss: f64,
}

fn train_impl<T: Real>(cfg: &RunConfig, steps: usize, out: &Path) -> CliResult<()> {
    let scenes = (0..cfg.train.scenes).map(|i| cfg.scene(i)).collect::<pillarnext::Result<Vec<_>>>()?;
    let mut store = ParamStore::<T>::new();
    let net = PillarNet::new(&mut store, &cfg.network, &cfg.grid, cfg.seed)?;
    let batch = TrainBatch::new(&net, &scenes, cfg.seed)?;
    let curve = overfit_toy(&net, &mut store, &batch, steps, cfg.train.lr)?;
    let dets = detect_batch(&net, &store, &batch.voxels, cfg.score_thresh)?;
    let report = eval_toy(&dets, &batch.boxes, cfg.train.iou_thresh);

    let rows: Vec<CurveRow> = curve
        .iter()
        .map(|c| CurveRow {
            step: c.step,
            loss: c.loss,
            cls_loss: c.cls_loss,
            reg_loss: c.reg_loss,
        })
        .collect();
    let mut ckpt = Vec::new();
    store.write_checkpoint(&mut ckpt)?;
    #[derive(Serialize)]
    struct EvalFile<'a> {
        #[serde(flatten)]
        report: &'a pillarnext::train::EvalReport,
        detections: &'a [Detection],
    }
    write_atomic(&out.join("curve.csv"), &csv_bytes(&rows)?)?;
    write_atomic(&out.join("weights.ckpt"), &ckpt)?;
    write_atomic(
        &out.join("eval.json"),
        &json_bytes(&EvalFile {
            report: &report,
            detections: &dets,
        })?,
    )
}

pub fn cmd_train_toy(cfg: &RunConfig, args: &TrainArgs) -> CliResult<()> {
    let steps = args.steps.unwrap_or(cfg.train.steps);
    match cfg.precision {
        Precision::F32 => train_impl::<f32>(cfg, steps, &args.out),
        Precision::F64 => train_impl::<f64>(cfg, steps, &args.out),
    }
}

/// Parse-free entry point used by the binary; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = load_config(&cli).and_then(|cfg| match &cli.command {
        Command::Synth(a) => cmd_synth(&cfg, a),
        Command::Forward(a) => cmd_forward(&cfg, a),
        Command::Gradcheck(a) => match cmd_gradcheck(&cfg, a)? {
            true => Ok(()),
            false => Err(CliError::CheckFailed("gradient check failures".into())),
        },
        Command::Bench(a) => cmd_bench(&cfg, a),
        Command::TrainToy(a) => cmd_train_toy(&cfg, a),
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
