//! Output-patch training: boundary-label derivation, patch sampling with
//! class rebalancing and dihedral augmentation, the weighted cross-entropy
//! loss, SGD with momentum, dense inference by output tiling, and the
//! two-stage recursive protocol.
//!
//! Input-stream convention for two-input networks: the first declared input
//! carries the image, the second carries the (fixed) recursive boundary map.

use std::collections::HashMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::eval::{pixel_error, Segmentation};
use crate::exec::{backward, forward, Gradients, MethodPlan};
use crate::net::{field_of_view, init_params, NetworkSpec, NodeKind, ParamState};
use crate::tensor::{crop, dihedral_xy, dims_len, Dims, Volume, Window};
use crate::{Error, Result};

/// Hyperparameters and loop controls for one training run.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub updates: u64,
    /// Output-patch shape (the input window is larger by fov − 1 per axis).
    pub patch: Dims,
    pub seed: u64,
    pub rebalance: bool,
    pub augment: bool,
    /// Emit a log record every this many updates; 0 disables logging.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            updates: 0,
            patch: [16, 16, 1],
            seed: 0,
            rebalance: true,
            augment: true,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.patch.iter().any(|&p| p == 0) {
            return Err(Error::Config(format!("patch dims must be nonzero, got {:?}", self.patch)));
        }
        Ok(())
    }
}

/// One training stack: raw image, ground-truth segmentation, the boundary
/// labels derived from it, and (for recursive stage-2 training) a fixed
/// boundary map from the previous stage.
#[derive(Clone, Debug)]
pub struct StackPair {
    pub image: Volume,
    pub truth: Segmentation,
    pub boundary_labels: Volume,
    pub recursive_map: Option<Volume>,
}

impl StackPair {
    pub fn new(image: Volume, truth: Segmentation) -> Result<Self> {
        if image.dims() != truth.dims() {
            return Err(Error::Shape(format!(
                "image dims {:?} do not match truth dims {:?}",
                image.dims(),
                truth.dims()
            )));
        }
        let boundary_labels = derive_boundary_labels(&truth);
        Ok(StackPair { image, truth, boundary_labels, recursive_map: None })
    }

    pub fn with_recursive_map(mut self, map: Volume) -> Result<Self> {
        if map.dims() != self.image.dims() {
            return Err(Error::Shape(format!(
                "recursive map dims {:?} do not match image dims {:?}",
                map.dims(),
                self.image.dims()
            )));
        }
        self.recursive_map = Some(map);
        Ok(self)
    }

    pub fn dims(&self) -> Dims {
        self.image.dims()
    }
}

/// Marks a pixel as boundary (1.0) iff its label is 0 or any in-plane
/// 4-neighbor carries a different label; z neighbors are ignored.
pub fn derive_boundary_labels(truth: &Segmentation) -> Volume {
    let [nx, ny, nz] = truth.dims();
    let labels = truth.labels();
    let mut out = Volume::zeros([nx, ny, nz]);
    out.values_mut()
        .par_chunks_mut(nx * ny)
        .enumerate()
        .for_each(|(z, plane)| {
            let base = nx * ny * z;
            for y in 0..ny {
                for x in 0..nx {
                    let i = x + nx * y;
                    let l = labels[base + i];
                    let diff = l == 0
                        || (x > 0 && labels[base + i - 1] != l)
                        || (x + 1 < nx && labels[base + i + 1] != l)
                        || (y > 0 && labels[base + i - nx] != l)
                        || (y + 1 < ny && labels[base + i + nx] != l);
                    plane[i] = if diff { 1.0 } else { 0.0 };
                }
            }
        });
    out
}

/// Per-pixel loss weights: class c gets P/(2·N_c) so both classes contribute
/// equal total weight; if either class is absent (or `rebalance` is off) all
/// weights are 1.
pub fn class_weights(labels: &Volume, rebalance: bool) -> Volume {
    let p = labels.len();
    let n1 = labels.values().iter().filter(|&&y| y >= 0.5).count();
    let n0 = p - n1;
    if !rebalance || n1 == 0 || n0 == 0 {
        return Volume::filled(labels.dims(), 1.0);
    }
    let w1 = (p as f64 / (2.0 * n1 as f64)) as f32;
    let w0 = (p as f64 / (2.0 * n0 as f64)) as f32;
    let mut out = Volume::zeros(labels.dims());
    for (w, y) in out.values_mut().iter_mut().zip(labels.values()) {
        *w = if *y >= 0.5 { w1 } else { w0 };
    }
    out
}

/// Weighted cross-entropy `Σ_p w·[−y log p − (1−y) log(1−p)]` with
/// probabilities clamped to [1e-7, 1−1e-7]. Accumulated in f64, slice order.
pub fn loss(probs: &Volume, labels: &Volume, weights: &Volume) -> Result<f64> {
    if probs.dims() != labels.dims() || probs.dims() != weights.dims() {
        return Err(Error::Shape(format!(
            "loss shapes differ: probs {:?}, labels {:?}, weights {:?}",
            probs.dims(),
            labels.dims(),
            weights.dims()
        )));
    }
    let mut total = 0.0f64;
    for ((&p, &y), &w) in probs.values().iter().zip(labels.values()).zip(weights.values()) {
        let p = (p as f64).clamp(1e-7, 1.0 - 1e-7);
        let y = y as f64;
        total += w as f64 * (-y * p.ln() - (1.0 - y) * (1.0 - p).ln());
    }
    Ok(total)
}

/// One SGD-with-momentum update: per parameter,
/// `v ← momentum·v + (lr/patch_pixels)·g; w ← w − v`.
pub fn sgd_step(
    params: &mut ParamState,
    grads: &Gradients,
    learning_rate: f32,
    momentum: f32,
    patch_pixels: usize,
) -> Result<()> {
    if patch_pixels == 0 {
        return Err(Error::Config("patch_pixels must be nonzero".into()));
    }
    let eff = learning_rate / patch_pixels as f32;
    for (p, g) in params.nodes.iter_mut().zip(&grads.nodes) {
        let (p, g) = match (p, g) {
            (Some(p), Some(g)) => (p, g),
            (None, None) => continue,
            _ => return Err(Error::Internal("gradient/parameter node mismatch".into())),
        };
        if p.w.len() != g.gw.len() || p.b.len() != g.gb.len() {
            return Err(Error::Shape("gradient shape does not match parameters".into()));
        }
        for ((w, v), &gw) in p.w.iter_mut().zip(p.vw.iter_mut()).zip(&g.gw) {
            *v = momentum * *v + eff * gw;
            *w -= *v;
        }
        for ((b, v), &gb) in p.b.iter_mut().zip(p.vb.iter_mut()).zip(&g.gb) {
            *v = momentum * *v + eff * gb;
            *b -= *v;
        }
    }
    Ok(())
}

/// A sampled training example: per-input-stream windows, boundary labels for
/// the output patch, and loss weights.
#[derive(Clone, Debug)]
pub struct Patch {
    pub inputs: HashMap<String, Volume>,
    pub labels: Volume,
    pub weights: Volume,
}

/// Draws one output patch: a stack is chosen with probability proportional to
/// its number of legal placements, then a legal offset uniformly; the input
/// window is the label window grown by fov−1 per axis. With `augment`, one
/// uniformly random `dihedral_xy` transform is applied jointly to all streams
/// and the labels (restricted to the shape-preserving subgroup when the
/// windows are not square in-plane).
pub fn sample_patch(
    pairs: &[StackPair],
    input_names: &[&str],
    fov: Dims,
    patch: Dims,
    rebalance: bool,
    augment: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Patch> {
    if input_names.is_empty() || input_names.len() > 2 {
        return Err(Error::Config(format!(
            "expected 1 or 2 input streams, the network declares {}",
            input_names.len()
        )));
    }
    let needs_map = input_names.len() == 2;
    if pairs.is_empty() {
        return Err(Error::Config("no training stacks provided".into()));
    }
    let input_shape = [patch[0] + fov[0] - 1, patch[1] + fov[1] - 1, patch[2] + fov[2] - 1];
    let margin = [(fov[0] - 1) / 2, (fov[1] - 1) / 2, (fov[2] - 1) / 2];

    let placements: Vec<usize> = pairs
        .iter()
        .map(|p| {
            let d = p.dims();
            (0..3)
                .map(|a| d[a].saturating_sub(input_shape[a] - 1))
                .product()
        })
        .collect();
    let total: usize = placements.iter().sum();
    if total == 0 {
        return Err(Error::Config(format!(
            "no training stack admits an output patch {patch:?} with field of view {fov:?} \
             (input window {input_shape:?})"
        )));
    }
    if needs_map {
        for (i, p) in pairs.iter().enumerate() {
            if placements[i] > 0 && p.recursive_map.is_none() {
                return Err(Error::Config(format!(
                    "stack {i} has no recursive map but the network declares two inputs"
                )));
            }
        }
    }

    let mut r = rng.random_range(0..total);
    let mut stack = 0usize;
    while r >= placements[stack] {
        r -= placements[stack];
        stack += 1;
    }
    let pair = &pairs[stack];
    let d = pair.dims();
    let wx = d[0] - input_shape[0] + 1;
    let wy = d[1] - input_shape[1] + 1;
    let ox = r % wx;
    let oy = (r / wx) % wy;
    let oz = r / (wx * wy);

    let input_win = Window::new([ox, oy, oz], input_shape)?;
    let label_win =
        Window::new([ox + margin[0], oy + margin[1], oz + margin[2]], patch)?;

    let t = if augment {
        // the full 8-element group needs square in-plane windows; otherwise
        // restrict to the four shape-preserving transforms
        if input_shape[0] == input_shape[1] && patch[0] == patch[1] {
            rng.random_range(0..8u8)
        } else {
            [0u8, 2, 4, 6][rng.random_range(0..4usize)]
        }
    } else {
        0
    };

    let labels = dihedral_xy(&crop(&pair.boundary_labels, &label_win)?, t)?;
    let weights = class_weights(&labels, rebalance);
    let mut inputs = HashMap::new();
    inputs.insert(
        input_names[0].to_string(),
        dihedral_xy(&crop(&pair.image, &input_win)?, t)?,
    );
    if needs_map {
        let map = pair.recursive_map.as_ref().expect("validated above");
        inputs.insert(input_names[1].to_string(), dihedral_xy(&crop(map, &input_win)?, t)?);
    }
    Ok(Patch { inputs, labels, weights })
}

/// One training-log record; the per-pixel weighted loss and the pixel error
/// are EMA(0.99)-smoothed, seeded with the first observation.
#[derive(Clone, Copy, Debug)]
pub struct LogRecord {
    pub update: u64,
    pub loss: f64,
    pub pixel_error: f64,
    pub wallclock_s: f64,
}

impl LogRecord {
    /// The canonical text form: `update loss pixel_error wallclock_s`.
    pub fn line(&self) -> String {
        format!("{} {:.6} {:.6} {:.3}", self.update, self.loss, self.pixel_error, self.wallclock_s)
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParamState,
    pub update: u64,
    pub rng: ChaCha8Rng,
}

// Decorrelates the sampler stream from parameter initialization, which also
// derives from cfg.seed.
const SAMPLER_SALT: u64 = 0x5341_4d50_4c45_5231;

impl TrainState {
    /// Fresh state: initialized parameters and a sampler RNG, both derived
    /// from `cfg.seed`.
    pub fn fresh(spec: &NetworkSpec, cfg: &TrainConfig) -> Self {
        TrainState {
            params: init_params(spec, cfg.seed),
            update: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ SAMPLER_SALT),
        }
    }
}

/// Runs `cfg.updates` iterations of sample → forward → loss → backward →
/// sgd_step, starting from `resume` (or fresh state). Returns the final state
/// and the log records (also streamed to `on_log` as they happen).
pub fn train(
    spec: &NetworkSpec,
    pairs: &[StackPair],
    cfg: &TrainConfig,
    methods: &MethodPlan,
    resume: Option<TrainState>,
    mut on_log: Option<&mut dyn FnMut(&LogRecord)>,
) -> Result<(TrainState, Vec<LogRecord>)> {
    cfg.validate()?;
    let fov = field_of_view(spec)?;
    let input_names = spec.input_names();
    let mut state = resume.unwrap_or_else(|| TrainState::fresh(spec, cfg));
    let patch_pixels = dims_len(cfg.patch);

    let start = Instant::now();
    let mut ema_loss: Option<f64> = None;
    let mut ema_err: Option<f64> = None;
    let mut log = Vec::new();

    for _ in 0..cfg.updates {
        let patch = sample_patch(
            pairs,
            &input_names,
            fov,
            cfg.patch,
            cfg.rebalance,
            cfg.augment,
            &mut state.rng,
        )?;
        let acts = forward(spec, &state.params, methods, &patch.inputs, true)?;
        // recorded per pixel so the log is comparable across patch shapes
        let l = loss(acts.output_probs(), &patch.labels, &patch.weights)? / patch_pixels as f64;
        let pe = pixel_error(acts.output_probs(), &patch.labels, 0.5)?;
        let grads = backward(spec, &state.params, &acts, &patch.labels, &patch.weights)?;
        sgd_step(&mut state.params, &grads, cfg.learning_rate, cfg.momentum, patch_pixels)?;
        state.update += 1;

        ema_loss = Some(match ema_loss {
            None => l,
            Some(e) => 0.99 * e + 0.01 * l,
        });
        ema_err = Some(match ema_err {
            None => pe,
            Some(e) => 0.99 * e + 0.01 * pe,
        });
        if cfg.log_every > 0 && state.update % cfg.log_every == 0 {
            let rec = LogRecord {
                update: state.update,
                loss: ema_loss.unwrap(),
                pixel_error: ema_err.unwrap(),
                wallclock_s: start.elapsed().as_secs_f64(),
            };
            if let Some(f) = on_log.as_mut() {
                f(&rec);
            }
            log.push(rec);
        }
    }
    Ok((state, log))
}

/// Tile starts/sizes covering `n` with disjoint tiles of at most `tile`.
fn tiles_1d(n: usize, tile: usize) -> Vec<(usize, usize)> {
    let tile = tile.min(n).max(1);
    let mut out = Vec::new();
    let mut s = 0;
    while s < n {
        let len = tile.min(n - s);
        out.push((s, len));
        s += len;
    }
    out
}

/// Dense boundary-probability map of dims `image dims − fov + 1`. With
/// `out_patch` the output is computed in disjoint tiles (each from its own
/// input window) and stitched; tilings agree exactly in deterministic mode.
pub fn infer(
    spec: &NetworkSpec,
    params: &ParamState,
    methods: &MethodPlan,
    inputs: &HashMap<String, Volume>,
    out_patch: Option<Dims>,
) -> Result<Volume> {
    let fov = field_of_view(spec)?;
    let input_names = spec.input_names();
    let first = input_names
        .first()
        .and_then(|n| inputs.get(*n))
        .ok_or_else(|| Error::Config("missing input volume".into()))?;
    let in_dims = first.dims();
    let mut out_dims = [0usize; 3];
    for a in 0..3 {
        if in_dims[a] < fov[a] {
            return Err(Error::Shape(format!(
                "input dims {in_dims:?} smaller than the field of view {fov:?}"
            )));
        }
        out_dims[a] = in_dims[a] - fov[a] + 1;
    }

    let Some(tile) = out_patch else {
        let acts = forward(spec, params, methods, inputs, false)?;
        return Ok(acts.output_probs().clone());
    };
    if tile.iter().any(|&t| t == 0) {
        return Err(Error::Config(format!("output tile dims must be nonzero, got {tile:?}")));
    }

    let mut out = Volume::zeros(out_dims);
    for &(tz, lz) in &tiles_1d(out_dims[2], tile[2]) {
        for &(ty, ly) in &tiles_1d(out_dims[1], tile[1]) {
            for &(tx, lx) in &tiles_1d(out_dims[0], tile[0]) {
                let win = Window::new(
                    [tx, ty, tz],
                    [lx + fov[0] - 1, ly + fov[1] - 1, lz + fov[2] - 1],
                )?;
                let mut tile_inputs = HashMap::new();
                for (name, v) in inputs {
                    tile_inputs.insert(name.clone(), crop(v, &win)?);
                }
                let acts = forward(spec, params, methods, &tile_inputs, false)?;
                let probs = acts.output_probs();
                for z in 0..lz {
                    for y in 0..ly {
                        for x in 0..lx {
                            let v = probs.at(x, y, z);
                            out.set(tx + x, ty + y, tz + z, v);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Re-embeds a valid-region map into full stack dims: the map lands at offset
/// floor((fov−1)/2) and the surrounding margin is filled with 0.5 (maximal
/// uncertainty), so stage-2 sampling geometry matches the raw stacks.
pub fn pad_map(map: &Volume, full_dims: Dims, fov: Dims) -> Result<Volume> {
    let md = map.dims();
    for a in 0..3 {
        if md[a] + fov[a] - 1 != full_dims[a] {
            return Err(Error::Shape(format!(
                "map dims {md:?} + fov {fov:?} − 1 do not give full dims {full_dims:?}"
            )));
        }
    }
    let off = [(fov[0] - 1) / 2, (fov[1] - 1) / 2, (fov[2] - 1) / 2];
    let mut out = Volume::filled(full_dims, 0.5);
    for z in 0..md[2] {
        for y in 0..md[1] {
            for x in 0..md[0] {
                let v = map.at(x, y, z);
                out.set(x + off[0], y + off[1], z + off[2], v);
            }
        }
    }
    Ok(out)
}

/// What happened to each stage-2 conv layer at warm-start.
#[derive(Clone, Debug, Default)]
pub struct WarmStartReport {
    /// Same name, same shape: weights and biases copied.
    pub copied: Vec<String>,
    /// Same name, kernel extended along z: source taps embedded at the
    /// central z-plane, other planes zero.
    pub embedded: Vec<String>,
    /// Same name but incompatible shape: left at fresh initialization, with
    /// the reason.
    pub fresh: Vec<String>,
}

/// Initializes `dst` layers from same-named `src` layers. Kernels whose only
/// difference is a larger z-extent get the source taps embedded at the
/// central z-plane (other planes zero); incompatible shapes are reported and
/// left at their fresh initialization. Momenta always start at zero.
pub fn warm_start(
    dst_spec: &NetworkSpec,
    dst: &mut ParamState,
    src_spec: &NetworkSpec,
    src: &ParamState,
) -> Result<WarmStartReport> {
    let mut report = WarmStartReport::default();
    for (i, node) in dst_spec.nodes().iter().enumerate() {
        if !matches!(node.kind, NodeKind::Conv { .. }) {
            continue;
        }
        let Some(j) = src_spec.node_index(&node.name) else { continue };
        if !matches!(src_spec.nodes()[j].kind, NodeKind::Conv { .. }) {
            report.fresh.push(format!("`{}`: source node is not a conv layer", node.name));
            continue;
        }
        let sp = src.nodes[j].as_ref().expect("conv node has params");
        let (s_shape, s_in, s_out) = (sp.kshape, sp.in_maps, sp.out_maps);
        let dp = dst.nodes[i].as_mut().expect("conv node has params");
        let (d_shape, d_in, d_out) = (dp.kshape, dp.in_maps, dp.out_maps);

        if s_in != d_in || s_out != d_out {
            report.fresh.push(format!(
                "`{}`: channel shape {}x{} vs {}x{}, re-initialized",
                node.name, s_in, s_out, d_in, d_out
            ));
            continue;
        }
        if s_shape == d_shape {
            dp.w.copy_from_slice(&sp.w);
            dp.b.copy_from_slice(&sp.b);
            report.copied.push(node.name.clone());
        } else if s_shape[0] == d_shape[0] && s_shape[1] == d_shape[1] && s_shape[2] < d_shape[2] {
            let plane = s_shape[0] * s_shape[1];
            let qz0 = (d_shape[2] - s_shape[2]) / 2;
            dp.w.fill(0.0);
            for o in 0..d_out {
                for c in 0..d_in {
                    let dk = dp.kernel_mut(o, c);
                    // borrow juggling: take the source kernel slice by index math
                    let t_src = s_shape[0] * s_shape[1] * s_shape[2];
                    let sk = &sp.w[t_src * (c + s_in * o)..][..t_src];
                    for qz in 0..s_shape[2] {
                        dk[plane * (qz0 + qz)..plane * (qz0 + qz) + plane]
                            .copy_from_slice(&sk[plane * qz..plane * (qz + 1)]);
                    }
                }
            }
            dp.b.copy_from_slice(&sp.b);
            report.embedded.push(node.name.clone());
        } else {
            report.fresh.push(format!(
                "`{}`: kernel {}x{}x{} vs {}x{}x{}, re-initialized",
                node.name,
                s_shape[0],
                s_shape[1],
                s_shape[2],
                d_shape[0],
                d_shape[1],
                d_shape[2]
            ));
        }
    }
    Ok(report)
}

/// Result of the two-stage recursive protocol.
#[derive(Clone, Debug)]
pub struct RecursiveOutcome {
    pub state1: TrainState,
    pub state2: TrainState,
    pub warm_start: WarmStartReport,
    /// The fixed preliminary maps stage 2 trained on, padded to full stack
    /// dims, in `pairs` then `extra_pairs` order.
    pub prelim_maps: Vec<Volume>,
    pub log1: Vec<LogRecord>,
    pub log2: Vec<LogRecord>,
    pub log1_continued: Vec<LogRecord>,
}

/// The two-stage protocol: (1) train stage 1 on `pairs`; (2) produce
/// preliminary boundary maps for `pairs ∪ extra_pairs`, fixed from here on;
/// (3) warm-start stage 2 from stage 1 by layer name; (4) train stage 2 on
/// (image, fixed map) inputs; (5) optionally continue stage-1 training
/// afterwards (fresh maps for final evaluation then come from
/// `recursive_infer`).
#[allow(clippy::too_many_arguments)]
pub fn recursive_pipeline(
    spec1: &NetworkSpec,
    spec2: &NetworkSpec,
    pairs: &[StackPair],
    extra_pairs: &[StackPair],
    cfg1: &TrainConfig,
    cfg2: &TrainConfig,
    continue1: Option<&TrainConfig>,
    methods1: &MethodPlan,
    methods2: &MethodPlan,
    mut on_log: Option<&mut dyn FnMut(&str, &LogRecord)>,
) -> Result<RecursiveOutcome> {
    if spec1.input_names().len() != 1 {
        return Err(Error::Config("stage-1 network must declare exactly one input".into()));
    }
    if spec2.input_names().len() != 2 {
        return Err(Error::Config(
            "stage-2 network must declare two inputs (image, recursive map)".into(),
        ));
    }
    let fov1 = field_of_view(spec1)?;
    let in1 = spec1.input_names()[0].to_string();

    // routes a stage's log records into the shared (stage, record) callback
    fn with_stage_sink<R>(
        stage: &'static str,
        on_log: &mut Option<&mut dyn FnMut(&str, &LogRecord)>,
        f: impl FnOnce(Option<&mut dyn FnMut(&LogRecord)>) -> Result<R>,
    ) -> Result<R> {
        match on_log {
            Some(cb) => {
                let mut adapter = |r: &LogRecord| cb(stage, r);
                f(Some(&mut adapter))
            }
            None => f(None),
        }
    }

    // (1) stage-1 training
    let (state1, log1) = with_stage_sink("stage1", &mut on_log, |sink| {
        train(spec1, pairs, cfg1, methods1, None, sink)
    })?;

    // (2) preliminary maps, fixed from here on
    let mut stage2_pairs: Vec<StackPair> = Vec::new();
    let mut prelim_maps: Vec<Volume> = Vec::new();
    for pair in pairs.iter().chain(extra_pairs) {
        let inputs = HashMap::from([(in1.clone(), pair.image.clone())]);
        let map = infer(spec1, &state1.params, methods1, &inputs, None)?;
        let padded = pad_map(&map, pair.dims(), fov1)?;
        prelim_maps.push(padded.clone());
        stage2_pairs.push(pair.clone().with_recursive_map(padded)?);
    }

    // (3) warm-start stage 2 by layer name
    let mut params2 = init_params(spec2, cfg2.seed);
    let warm = warm_start(spec2, &mut params2, spec1, &state1.params)?;

    // (4) stage-2 training on (image, fixed map)
    let resume2 = TrainState {
        params: params2,
        update: 0,
        rng: ChaCha8Rng::seed_from_u64(cfg2.seed ^ SAMPLER_SALT),
    };
    let (state2, log2) = with_stage_sink("stage2", &mut on_log, |sink| {
        train(spec2, &stage2_pairs, cfg2, methods2, Some(resume2), sink)
    })?;

    // (5) optional continued stage-1 training
    let (state1, log1_continued) = match continue1 {
        Some(cfgc) => with_stage_sink("stage1+", &mut on_log, |sink| {
            train(spec1, pairs, cfgc, methods1, Some(state1), sink)
        })?,
        None => (state1, Vec::new()),
    };

    Ok(RecursiveOutcome {
        state1,
        state2,
        warm_start: warm,
        prelim_maps,
        log1,
        log2,
        log1_continued,
    })
}

/// End-to-end recursive inference: stage 1 on the image, pad, then stage 2 on
/// (image, map).
pub fn recursive_infer(
    spec1: &NetworkSpec,
    params1: &ParamState,
    methods1: &MethodPlan,
    spec2: &NetworkSpec,
    params2: &ParamState,
    methods2: &MethodPlan,
    image: &Volume,
    out_patch: Option<Dims>,
) -> Result<Volume> {
    let fov1 = field_of_view(spec1)?;
    let in1 = spec1.input_names()[0].to_string();
    let map = infer(spec1, params1, methods1, &HashMap::from([(in1, image.clone())]), out_patch)?;
    let padded = pad_map(&map, image.dims(), fov1)?;
    let names2 = spec2.input_names();
    if names2.len() != 2 {
        return Err(Error::Config(
            "stage-2 network must declare two inputs (image, recursive map)".into(),
        ));
    }
    let inputs2 = HashMap::from([
        (names2[0].to_string(), image.clone()),
        (names2[1].to_string(), padded),
    ]);
    infer(spec2, params2, methods2, &inputs2, out_patch)
}
