//! `voxnn` — command-line front end for the dense-output ConvNet engine:
//! synthetic datasets, training, inference, segmentation scoring, the
//! two-stage recursive protocol, conv self-tuning, and feature-map dumps.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
//! failure.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use voxnn_core::data::{
    load_checkpoint, read_segmentation, read_volume, save_checkpoint, synth_generate,
    write_segmentation, write_volume, Dtype, Role, StackMeta,
};
use voxnn_core::eval::{best_pixel_error, best_rand_f, rand_pr_curve, SegParams};
use voxnn_core::exec::{forward, map_dims, tune_plan, MethodPlan, TuneReport};
use voxnn_core::net::{field_of_view, infer_plan, param_count, parse_spec, NetworkSpec, NodeKind};
use voxnn_core::tensor::{dims_len, Dims, Volume};
use voxnn_core::train::{
    derive_boundary_labels, infer, pad_map, recursive_infer, recursive_pipeline, LogRecord,
    RecursiveOutcome, StackPair, TrainConfig, TrainState,
};
use voxnn_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "voxnn",
    version,
    about = "Dense-output ConvNet engine for boundary detection in anisotropic 3D stacks"
)]
struct Cli {
    /// Cap engine worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Deterministic mode: force direct convolution everywhere and skip
    /// self-tuning, so results are bit-identical across runs and thread counts
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic (image, truth, boundary) stack
    Synth(SynthArgs),
    /// Train a network on labeled stacks
    Train(TrainArgs),
    /// Run dense inference, producing a boundary-probability map
    Infer(InferArgs),
    /// Score a boundary map against ground truth (pixel error + Rand curve)
    Eval(EvalArgs),
    /// Run the two-stage recursive protocol end to end
    Recursive(RecursiveArgs),
    /// Time direct vs FFT convolution per layer and report the chosen methods
    Bench(BenchArgs),
    /// Describe a checkpoint, or dump a node's feature maps as PGM slices
    Inspect(InspectArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stack dims NX,NY,NZ
    #[arg(long, value_parser = parse_dims_arg, default_value = "96,96,16")]
    dims: Dims,
    /// Number of Voronoi cells
    #[arg(long, default_value_t = 40)]
    cells: usize,
    /// Magnitude of per-slice sub-pixel jitter (pixels)
    #[arg(long, default_value_t = 0.5)]
    z_blur: f64,
    /// Additive Gaussian noise standard deviation
    #[arg(long, default_value_t = 0.05)]
    noise_sd: f64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Stack name; files become <out>/<name>_image.raw etc.
    #[arg(long, default_value = "stack")]
    name: String,
}

#[derive(Args)]
struct TrainArgs {
    /// Network spec file (not needed with --resume: the checkpoint embeds it)
    #[arg(long, required_unless_present = "resume", conflicts_with = "resume")]
    net: Option<PathBuf>,
    /// Training stack stem; expects <stem>_image.{raw,meta} and
    /// <stem>_truth.{raw,meta} (repeat per stack)
    #[arg(long = "data", required = true)]
    data: Vec<PathBuf>,
    /// Fixed recursive boundary map volume per stack, aligned with --data
    /// (required for two-input networks)
    #[arg(long = "map")]
    maps: Vec<PathBuf>,
    #[arg(long)]
    updates: u64,
    /// Learning rate
    #[arg(long, default_value_t = 0.01)]
    lr: f32,
    #[arg(long, default_value_t = 0.9)]
    momentum: f32,
    /// Output patch shape PX,PY,PZ
    #[arg(long, value_parser = parse_dims_arg, default_value = "16,16,1")]
    patch: Dims,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Disable class-rebalanced loss weighting
    #[arg(long)]
    no_rebalance: bool,
    /// Disable random dihedral augmentation
    #[arg(long)]
    no_augment: bool,
    /// Emit a log record every N updates (0 = none)
    #[arg(long, default_value_t = 100)]
    log_every: u64,
    /// Continue training from this checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Checkpoint output path
    #[arg(long)]
    out: PathBuf,
    /// Also write the training log to this file
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Input image volume stem (reads <image>.raw + <image>.meta)
    #[arg(long)]
    image: PathBuf,
    /// Recursive boundary map volume stem (two-input networks)
    #[arg(long)]
    recursive_map: Option<PathBuf>,
    /// Compute the output in tiles of this shape (default: one pass)
    #[arg(long, value_parser = parse_dims_arg)]
    tile: Option<Dims>,
    /// Pad the map back to input dims with 0.5 in the field-of-view margin,
    /// so it aligns pixel-for-pixel with the truth stack
    #[arg(long)]
    pad: bool,
    /// Output volume stem (writes <out>.raw + <out>.meta)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Algo {
    /// Threshold + 2D connected components
    Cc,
    /// Seeded 2D watershed
    Ws,
}

#[derive(Args)]
struct EvalArgs {
    /// Boundary-map volume stem
    #[arg(long)]
    map: PathBuf,
    /// Ground-truth segmentation stem (u32 labels)
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, value_enum, default_value_t = Algo::Cc)]
    algo: Algo,
    /// Threshold grid: "start:stop:step" or comma-separated values. For cc
    /// these are component thresholds; for ws they sweep t_high.
    #[arg(long, default_value = "0.1:0.9:0.1")]
    grid: String,
    /// Watershed seed threshold
    #[arg(long, default_value_t = 0.1)]
    t_low: f32,
    /// Watershed: merge basins smaller than this many pixels
    #[arg(long, default_value_t = 0)]
    min_size: usize,
    /// Write the PR-curve text here as well
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RecursiveArgs {
    /// Stage-1 (single-input) network spec
    #[arg(long)]
    net1: PathBuf,
    /// Stage-2 (two-input) network spec
    #[arg(long)]
    net2: PathBuf,
    /// Training stack stems for both stages (repeatable)
    #[arg(long = "data", required = true)]
    data: Vec<PathBuf>,
    /// Additional stacks used only for stage-2 training (repeatable)
    #[arg(long = "extra-data")]
    extra_data: Vec<PathBuf>,
    #[arg(long)]
    updates1: u64,
    #[arg(long)]
    updates2: u64,
    /// Continue stage-1 training this many updates after stage 2 (0 = skip)
    #[arg(long, default_value_t = 0)]
    continue1: u64,
    #[arg(long, default_value_t = 0.01)]
    lr: f32,
    #[arg(long, default_value_t = 0.9)]
    momentum: f32,
    #[arg(long, value_parser = parse_dims_arg, default_value = "16,16,1")]
    patch: Dims,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_rebalance: bool,
    #[arg(long)]
    no_augment: bool,
    #[arg(long, default_value_t = 100)]
    log_every: u64,
    /// Output directory for checkpoints and preliminary/final maps
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Network spec file
    #[arg(long)]
    net: PathBuf,
    /// Input volume shape to probe with
    #[arg(long, value_parser = parse_dims_arg, default_value = "128,128,8")]
    shape: Dims,
    /// Timing trials per layer and method
    #[arg(long, default_value_t = 3)]
    trials: usize,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Forward this image and dump feature maps (needs --node and --out)
    #[arg(long, requires = "node", requires = "out")]
    image: Option<PathBuf>,
    /// Node whose maps to dump
    #[arg(long)]
    node: Option<String>,
    /// Recursive boundary map stem (two-input networks)
    #[arg(long)]
    recursive_map: Option<PathBuf>,
    /// Directory for PGM slices
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let usage_ok =
                matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return ExitCode::from(if usage_ok { 0 } else { 1 });
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("voxnn: error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("voxnn: error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Shape(_)
        | Error::Bounds(_)
        | Error::Spec(_)
        | Error::Format(_)
        | Error::Io { .. } => 2,
        Error::Numerical(_) | Error::Internal(_) => 3,
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Train(a) => cmd_train(a, cli.deterministic),
        Cmd::Infer(a) => cmd_infer(a, cli.deterministic),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Recursive(a) => cmd_recursive(a, cli.deterministic),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Inspect(a) => cmd_inspect(a),
    }
}

// ---- argument parsing helpers ----

fn parse_dims_arg(s: &str) -> std::result::Result<Dims, String> {
    let parts: Vec<&str> =
        if s.contains(',') { s.split(',').collect() } else { s.split('x').collect() };
    if parts.len() != 3 {
        return Err(format!("expected three dims like 96,96,16 — got `{s}`"));
    }
    let mut d = [0usize; 3];
    for (i, p) in parts.iter().enumerate() {
        d[i] = p
            .trim()
            .parse::<usize>()
            .map_err(|_| format!("bad dimension `{p}` in `{s}`"))?;
        if d[i] == 0 {
            return Err(format!("dims must be nonzero, got `{s}`"));
        }
    }
    Ok(d)
}

fn parse_grid(s: &str) -> Result<Vec<f32>> {
    let bad = |m: String| Error::Config(m);
    let vals = if let Some((start, rest)) = s.split_once(':') {
        let (stop, step) = rest
            .split_once(':')
            .ok_or_else(|| bad(format!("grid range must be start:stop:step, got `{s}`")))?;
        let a: f32 = start.trim().parse().map_err(|_| bad(format!("bad grid start `{start}`")))?;
        let b: f32 = stop.trim().parse().map_err(|_| bad(format!("bad grid stop `{stop}`")))?;
        let c: f32 = step.trim().parse().map_err(|_| bad(format!("bad grid step `{step}`")))?;
        if c <= 0.0 || b < a {
            return Err(bad(format!("grid range `{s}` is empty or has nonpositive step")));
        }
        let n = ((b - a) / c + 1e-4).floor() as usize + 1;
        (0..n).map(|i| a + i as f32 * c).collect()
    } else {
        s.split(',')
            .map(|p| p.trim().parse::<f32>().map_err(|_| bad(format!("bad grid value `{p}`"))))
            .collect::<Result<Vec<f32>>>()?
    };
    if vals.is_empty() {
        return Err(bad(format!("grid `{s}` is empty")));
    }
    Ok(vals)
}

// ---- shared I/O helpers ----

/// `stem` + suffix as a sibling path: `d/stack` + `_image` -> `d/stack_image`.
fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_net(path: &Path) -> Result<NetworkSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_spec(&text)
}

fn load_stack(stem: &Path) -> Result<StackPair> {
    let image = read_volume(&with_suffix(stem, "_image"))?;
    let truth = read_segmentation(&with_suffix(stem, "_truth"))?;
    StackPair::new(image, truth)
}

fn stack_name(stem: &Path) -> String {
    stem.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "stack".into())
}

fn volume_meta(v: &Volume, role: Role) -> StackMeta {
    StackMeta::new(v.dims(), Dtype::F32, v.voxel_size_nm.unwrap_or([1.0, 1.0, 1.0]), role)
}

/// Direct everywhere in deterministic mode; otherwise a quick self-tuning
/// pass sized to the volumes the run will actually see.
fn choose_methods(
    spec: &NetworkSpec,
    input_dims: Dims,
    deterministic: bool,
) -> Result<MethodPlan> {
    if deterministic {
        return Ok(MethodPlan::all_direct(spec));
    }
    let (methods, _) = tune_plan(spec, input_dims, 1)?;
    Ok(methods)
}

fn train_config(
    updates: u64,
    lr: f32,
    momentum: f32,
    patch: Dims,
    seed: u64,
    no_rebalance: bool,
    no_augment: bool,
    log_every: u64,
) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        momentum,
        updates,
        patch,
        seed,
        rebalance: !no_rebalance,
        augment: !no_augment,
        log_every,
    }
}

// ---- subcommands ----

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let (image, truth) = synth_generate(a.seed, a.dims, a.cells, a.z_blur, a.noise_sd)?;
    let boundary = derive_boundary_labels(&truth);
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let stem = a.out.join(&a.name);
    let voxel = image.voxel_size_nm.unwrap_or([1.0, 1.0, 1.0]);
    write_volume(&with_suffix(&stem, "_image"), &image, &volume_meta(&image, Role::Image))?;
    write_segmentation(&with_suffix(&stem, "_truth"), &truth, voxel)?;
    let mut bmeta = volume_meta(&boundary, Role::BoundaryMap);
    bmeta.voxel_size_nm = voxel;
    write_volume(&with_suffix(&stem, "_boundary"), &boundary, &bmeta)?;
    let frac = boundary.values().iter().filter(|&&v| v >= 0.5).count() as f64
        / boundary.len() as f64;
    println!(
        "wrote {}_{{image,truth,boundary}}: dims {}x{}x{}, {} cells, boundary fraction {:.3}",
        stem.display(),
        a.dims[0],
        a.dims[1],
        a.dims[2],
        truth.segment_count(),
        frac
    );
    Ok(())
}

struct LogSinks {
    file: Option<fs::File>,
}

impl LogSinks {
    fn new(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => Some(fs::File::create(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Ok(LogSinks { file })
    }

    fn line(&mut self, s: &str) {
        println!("{s}");
        if let Some(f) = &mut self.file {
            let _ = writeln!(f, "{s}");
        }
    }
}

fn cmd_train(a: &TrainArgs, deterministic: bool) -> Result<()> {
    if !a.maps.is_empty() && a.maps.len() != a.data.len() {
        return Err(Error::Config(format!(
            "got {} --map flags for {} --data stacks; counts must match",
            a.maps.len(),
            a.data.len()
        )));
    }

    let (spec, resume_state) = match &a.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let rng = ck.restore_rng();
            (ck.spec, Some(TrainState { params: ck.params, update: ck.update, rng }))
        }
        None => (load_net(a.net.as_ref().expect("clap enforces --net"))?, None),
    };

    let mut stacks = Vec::new();
    for (i, stem) in a.data.iter().enumerate() {
        let mut pair = load_stack(stem)?;
        if let Some(map_path) = a.maps.get(i) {
            pair = pair.with_recursive_map(read_volume(map_path)?)?;
        }
        stacks.push(pair);
    }

    let cfg = train_config(
        a.updates,
        a.lr,
        a.momentum,
        a.patch,
        a.seed,
        a.no_rebalance,
        a.no_augment,
        a.log_every,
    );
    let fov = field_of_view(&spec)?;
    let window = [
        a.patch[0] + fov[0] - 1,
        a.patch[1] + fov[1] - 1,
        a.patch[2] + fov[2] - 1,
    ];
    let methods = choose_methods(&spec, window, deterministic)?;

    let mut sinks = LogSinks::new(a.log.as_deref())?;
    let patch_pixels = dims_len(a.patch);
    sinks.line(&format!(
        "# voxnn train: net {}, {} stacks",
        a.net
            .as_deref()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| "embedded in checkpoint".into()),
        stacks.len()
    ));
    sinks.line(&format!(
        "# lr {} momentum {} updates {} patch {}x{}x{} seed {} rebalance {} augment {} deterministic {}",
        cfg.learning_rate,
        cfg.momentum,
        cfg.updates,
        cfg.patch[0],
        cfg.patch[1],
        cfg.patch[2],
        cfg.seed,
        if cfg.rebalance { "on" } else { "off" },
        if cfg.augment { "on" } else { "off" },
        if deterministic { "on" } else { "off" },
    ));
    sinks.line(&format!(
        "# effective_lr {:e} (lr / {} patch pixels)",
        cfg.learning_rate / patch_pixels as f32,
        patch_pixels
    ));
    sinks.line("# update loss pixel_error wallclock_s");

    let mut on_log = |r: &LogRecord| sinks.line(&r.line());
    let (state, log) =
        voxnn_core::train::train(&spec, &stacks, &cfg, &methods, resume_state, Some(&mut on_log))?;

    save_checkpoint(
        &a.out,
        &spec,
        &state.params,
        state.update,
        state.rng.get_seed(),
        state.rng.get_word_pos(),
    )?;
    let tail = log
        .last()
        .map(|r| format!(", loss {:.4}, pixel_error {:.4}", r.loss, r.pixel_error))
        .unwrap_or_default();
    println!("checkpoint {}: {} updates{}", a.out.display(), state.update, tail);
    Ok(())
}

/// Builds the named input map, enforcing arity (1 or 2 input streams).
fn input_map(
    spec: &NetworkSpec,
    image: Volume,
    rmap: Option<Volume>,
) -> Result<HashMap<String, Volume>> {
    let names = spec.input_names();
    let mut inputs = HashMap::new();
    match (names.len(), rmap) {
        (1, None) => {
            inputs.insert(names[0].to_string(), image);
        }
        (1, Some(_)) => {
            return Err(Error::Config(
                "this network has one input; --recursive-map does not apply".into(),
            ))
        }
        (2, Some(m)) => {
            inputs.insert(names[0].to_string(), image);
            inputs.insert(names[1].to_string(), m);
        }
        (2, None) => {
            return Err(Error::Config(
                "this network has two inputs; pass --recursive-map".into(),
            ))
        }
        (n, _) => {
            return Err(Error::Config(format!("unsupported input count {n}")));
        }
    }
    Ok(inputs)
}

fn cmd_infer(a: &InferArgs, deterministic: bool) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let image = read_volume(&a.image)?;
    let voxel = image.voxel_size_nm.unwrap_or([1.0, 1.0, 1.0]);
    let dims = image.dims();
    let rmap = a.recursive_map.as_deref().map(read_volume).transpose()?;
    let inputs = input_map(&ck.spec, image, rmap)?;
    let methods = choose_methods(&ck.spec, dims, deterministic)?;
    let mut map = infer(&ck.spec, &ck.params, &methods, &inputs, a.tile)?;
    if a.pad {
        map = pad_map(&map, dims, field_of_view(&ck.spec)?)?;
    }
    map.voxel_size_nm = Some(voxel);
    write_volume(&a.out, &map, &volume_meta(&map, Role::BoundaryMap))?;
    println!(
        "wrote {}.raw: boundary map {}x{}x{}",
        a.out.display(),
        map.dims()[0],
        map.dims()[1],
        map.dims()[2]
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let map = read_volume(&a.map)?;
    let truth = read_segmentation(&a.truth)?;
    if map.dims() != truth.dims() {
        return Err(Error::Shape(format!(
            "map dims {:?} do not match truth dims {:?}; pad the map to stack dims first",
            map.dims(),
            truth.dims()
        )));
    }
    let boundary = derive_boundary_labels(&truth);
    let (t, err) = best_pixel_error(&map, &boundary)?;
    println!("pixel_error: best {:.4} at threshold {:.2}", err, t);

    // both segmenters are 2D, so volumetric truth is scored slice by slice
    let truth = truth.slicewise();
    let grid_vals = parse_grid(&a.grid)?;
    let grid: Vec<SegParams> = match a.algo {
        Algo::Cc => grid_vals.iter().map(|&t| SegParams::Cc { t }).collect(),
        Algo::Ws => grid_vals
            .iter()
            .map(|&t_high| SegParams::Ws { t_low: a.t_low, t_high, min_size: a.min_size })
            .collect(),
    };
    let (best_p, best_s) = best_rand_f(&map, &truth, &grid)?;
    println!(
        "rand: best f {:.4} (split {:.4}, merge {:.4}) at {}",
        best_s.f,
        best_s.split,
        best_s.merge,
        best_p.param_text()
    );
    let curve = rand_pr_curve(&map, &truth, &grid)?;
    let text = curve.to_text();
    print!("{text}");
    if let Some(out) = &a.out {
        fs::write(out, &text).map_err(|e| Error::io(out, e))?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn cmd_recursive(a: &RecursiveArgs, deterministic: bool) -> Result<()> {
    let spec1 = load_net(&a.net1)?;
    let spec2 = load_net(&a.net2)?;
    let pairs: Vec<StackPair> =
        a.data.iter().map(|s| load_stack(s)).collect::<Result<_>>()?;
    let extra: Vec<StackPair> =
        a.extra_data.iter().map(|s| load_stack(s)).collect::<Result<_>>()?;

    let cfg1 = train_config(
        a.updates1,
        a.lr,
        a.momentum,
        a.patch,
        a.seed,
        a.no_rebalance,
        a.no_augment,
        a.log_every,
    );
    let cfg2 = TrainConfig { updates: a.updates2, seed: a.seed + 1, ..cfg1.clone() };
    let cont = (a.continue1 > 0).then(|| TrainConfig { updates: a.continue1, ..cfg1.clone() });

    let fov1 = field_of_view(&spec1)?;
    let fov2 = field_of_view(&spec2)?;
    let win = |patch: Dims, fov: Dims| {
        [patch[0] + fov[0] - 1, patch[1] + fov[1] - 1, patch[2] + fov[2] - 1]
    };
    let m1 = choose_methods(&spec1, win(a.patch, fov1), deterministic)?;
    let m2 = choose_methods(&spec2, win(a.patch, fov2), deterministic)?;

    println!("# stage update loss pixel_error wallclock_s");
    let mut on_log = |stage: &str, r: &LogRecord| println!("{stage} {}", r.line());
    let out: RecursiveOutcome = recursive_pipeline(
        &spec1,
        &spec2,
        &pairs,
        &extra,
        &cfg1,
        &cfg2,
        cont.as_ref(),
        &m1,
        &m2,
        Some(&mut on_log),
    )?;

    let report = &out.warm_start;
    if !report.copied.is_empty() {
        println!("warm-start copied: {}", report.copied.join(", "));
    }
    if !report.embedded.is_empty() {
        println!("warm-start embedded at central z-plane: {}", report.embedded.join(", "));
    }
    for line in &report.fresh {
        println!("warm-start kept fresh: {line}");
    }

    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let ck1 = a.out_dir.join("stage1.ckpt");
    let ck2 = a.out_dir.join("stage2.ckpt");
    save_checkpoint(
        &ck1,
        &spec1,
        &out.state1.params,
        out.state1.update,
        out.state1.rng.get_seed(),
        out.state1.rng.get_word_pos(),
    )?;
    save_checkpoint(
        &ck2,
        &spec2,
        &out.state2.params,
        out.state2.update,
        out.state2.rng.get_seed(),
        out.state2.rng.get_word_pos(),
    )?;
    println!("checkpoints: {} ({} updates), {} ({} updates)",
        ck1.display(), out.state1.update, ck2.display(), out.state2.update);

    // preliminary maps exactly as used in stage-2 training, plus final maps
    // from the full two-stage cascade, both padded to stack dims
    let stems: Vec<&PathBuf> = a.data.iter().chain(&a.extra_data).collect();
    for (i, (pair, stem)) in pairs.iter().chain(&extra).zip(&stems).enumerate() {
        let name = stack_name(stem);
        let voxel = pair.image.voxel_size_nm.unwrap_or([1.0, 1.0, 1.0]);
        let mut prelim = out.prelim_maps[i].clone();
        prelim.voxel_size_nm = Some(voxel);
        let prelim_path = a.out_dir.join(format!("{name}_prelim"));
        write_volume(&prelim_path, &prelim, &volume_meta(&prelim, Role::BoundaryMap))?;

        let final_map = recursive_infer(
            &spec1,
            &out.state1.params,
            &m1,
            &spec2,
            &out.state2.params,
            &m2,
            &pair.image,
            None,
        )?;
        let mut padded = pad_map(&final_map, pair.dims(), fov2)?;
        padded.voxel_size_nm = Some(voxel);
        let final_path = a.out_dir.join(format!("{name}_final"));
        write_volume(&final_path, &padded, &volume_meta(&padded, Role::BoundaryMap))?;
        println!("maps: {}.raw, {}.raw", prelim_path.display(), final_path.display());
    }
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let spec = load_net(&a.net)?;
    let (methods, reports) = tune_plan(&spec, a.shape, a.trials)?;
    let ms = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
    println!(
        "{:<10} {:>12} {:>8} {:>9} {:>11} {:>11} {:>10} {:>7}",
        "node", "input", "kernel", "sparsity", "direct_ms", "fft_ms", "rel_err", "choice"
    );
    for TuneReport { node, input_dims, kshape, sparsity, outcome } in &reports {
        let idx = spec.node_index(node).expect("node from report");
        println!(
            "{:<10} {:>12} {:>8} {:>9} {:>11} {:>11} {:>10} {:>7}",
            node,
            format!("{}x{}x{}", input_dims[0], input_dims[1], input_dims[2]),
            format!("{}x{}x{}", kshape[0], kshape[1], kshape[2]),
            format!("{},{},{}", sparsity.0[0], sparsity.0[1], sparsity.0[2]),
            ms(outcome.direct_ms),
            ms(outcome.fft_ms),
            outcome
                .rel_err
                .map(|e| format!("{e:.2e}"))
                .unwrap_or_else(|| "-".into()),
            methods.get(idx).name(),
        );
    }
    Ok(())
}

fn write_pgm(path: &Path, plane: &[f32], w: usize, h: usize) -> Result<()> {
    let lo = plane.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(plane.iter().map(|&v| ((v - lo) * scale).round().clamp(0.0, 255.0) as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let spec = &ck.spec;

    if a.image.is_none() {
        let plan = infer_plan(spec)?;
        let fov = field_of_view(spec)?;
        println!("checkpoint: {} ({} updates)", a.ckpt.display(), ck.update);
        println!("parameters: {}", param_count(spec));
        println!("field of view: {} x {} x {}", fov[0], fov[1], fov[2]);
        println!("inputs: {}", spec.input_names().join(", "));
        println!("{:<12} {:<12} {:<18} {:>8} {:>9}", "node", "kind", "details", "maps", "sparsity");
        for (i, n) in spec.nodes().iter().enumerate() {
            let details = match &n.kind {
                NodeKind::Input => "-".to_string(),
                NodeKind::Conv { shape, out_maps } => {
                    format!("{}x{}x{} -> {}", shape[0], shape[1], shape[2], out_maps)
                }
                NodeKind::MaxFilter { window } => {
                    format!("{}x{}x{}", window[0], window[1], window[2])
                }
                NodeKind::Activation(f) => f.name().to_string(),
                NodeKind::Concat => format!("{} upstreams", spec.upstream_of(i).len()),
                NodeKind::Output => "softmax".to_string(),
            };
            let s = plan.produced[i].0;
            println!(
                "{:<12} {:<12} {:<18} {:>8} {:>9}",
                n.name,
                n.kind.kind_name(),
                details,
                spec.channels(i),
                format!("{},{},{}", s[0], s[1], s[2]),
            );
        }
        return Ok(());
    }

    let image = read_volume(a.image.as_ref().expect("checked above"))?;
    let dims = image.dims();
    let node = a.node.as_deref().expect("clap requires --node with --image");
    let out_dir = a.out.as_ref().expect("clap requires --out with --image");
    let rmap = a.recursive_map.as_deref().map(read_volume).transpose()?;
    let inputs = input_map(spec, image, rmap)?;
    let methods = MethodPlan::all_direct(spec);
    let acts = forward(spec, &ck.params, &methods, &inputs, true)?;
    let maps = acts
        .node(spec, node)
        .ok_or_else(|| Error::Config(format!("network has no node named `{node}`")))?;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let node_dims = map_dims(spec, dims)?[spec.node_index(node).expect("resolved above")];
    let [nx, ny, nz] = node_dims;
    let mut count = 0usize;
    for (c, map) in maps.iter().enumerate() {
        for z in 0..nz {
            let plane = &map.values()[nx * ny * z..nx * ny * (z + 1)];
            let path = out_dir.join(format!("{node}_m{c:03}_z{z:03}.pgm"));
            write_pgm(&path, plane, nx, ny)?;
            count += 1;
        }
    }
    println!(
        "wrote {count} PGM slices ({} maps of {}x{}x{}) to {}",
        maps.len(),
        nx,
        ny,
        nz,
        out_dir.display()
    );
    Ok(())
}
