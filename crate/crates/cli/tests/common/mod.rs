//! Shared fixtures for the acceptance suite: scalar reference
//! implementations (a pooled-network evaluator, an f64 graph evaluator for
//! finite-difference checks, a pair-counting Rand scorer) and a random
//! architecture generator. Everything here is written as straight-line
//! scalar code, independent of the engine's execution strategy, so it can
//! serve as an oracle for it.

use std::collections::HashMap;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use voxnn_core::conv::Sparsity;
use voxnn_core::eval::Segmentation;
use voxnn_core::net::{
    infer_plan, init_params, parse_spec, Activation, ConvParams, NetworkSpec, NodeKind, ParamState,
};
use voxnn_core::tensor::{crop, Dims, Volume, Window};

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_volume(dims: Dims, lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Volume {
    let mut v = Volume::zeros(dims);
    for x in v.values_mut() {
        *x = rng.random_range(lo..hi);
    }
    v
}

/// Crop that keeps everything from `offset` to the end of the volume.
pub fn crop_from(v: &Volume, offset: Dims) -> Volume {
    let d = v.dims();
    let shape = [d[0] - offset[0], d[1] - offset[1], d[2] - offset[2]];
    crop(v, &Window::new(offset, shape).unwrap()).unwrap()
}

pub fn crop_volume(v: &Volume, offset: Dims, shape: Dims) -> Volume {
    crop(v, &Window::new(offset, shape).unwrap()).unwrap()
}

pub fn crop_seg(seg: &Segmentation, offset: Dims, shape: Dims) -> Segmentation {
    let [nx, ny, _] = seg.dims();
    let mut out = Vec::with_capacity(shape[0] * shape[1] * shape[2]);
    for z in 0..shape[2] {
        for y in 0..shape[1] {
            for x in 0..shape[0] {
                let i = (offset[0] + x) + nx * ((offset[1] + y) + ny * (offset[2] + z));
                out.push(seg.labels()[i]);
            }
        }
    }
    Segmentation::new(shape, out).unwrap()
}

/// A `Command` for the built CLI binary.
pub fn voxnn_cmd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_voxnn"))
}

/// Path of a shipped network description.
pub fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

// ---------------------------------------------------------------------------
// Pooled-network oracle (f32, bit-exact replica of the engine's arithmetic)
// ---------------------------------------------------------------------------

/// The engine's logistic function, reproduced operation for operation.
fn sigmoid_f32(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn dense_out_dims(input: Dims, k: Dims) -> Dims {
    [input[0] - (k[0] - 1), input[1] - (k[1] - 1), input[2] - (k[2] - 1)]
}

/// Dense scalar convolution of all input channels into output channel `o`,
/// with the same per-pixel accumulation order as the engine: bias first, then
/// input channels ascending, then taps in ascending linear order, skipping
/// exact-zero taps.
fn dense_conv_channel(ins: &[Volume], p: &ConvParams, o: usize) -> Volume {
    let [kx, ky, _] = p.kshape;
    let od = dense_out_dims(ins[0].dims(), p.kshape);
    let mut out = Volume::zeros(od);
    for oz in 0..od[2] {
        for oy in 0..od[1] {
            for ox in 0..od[0] {
                let mut acc = p.b[o];
                for (ci, cin) in ins.iter().enumerate() {
                    let taps = p.kernel(o, ci);
                    for (t, &w) in taps.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let qx = t % kx;
                        let qy = (t / kx) % ky;
                        let qz = t / (kx * ky);
                        acc += w * cin.at(ox + qx, oy + qy, oz + qz);
                    }
                }
                out.set(ox, oy, oz, acc);
            }
        }
    }
    out
}

/// Ordinary valid max-pooling: window == stride, truncating remainders.
/// Window positions are scanned in the same ascending order as the engine's
/// max filter, with strict improvement, so ties resolve identically.
fn strided_pool(m: &Volume, w: Dims) -> Volume {
    let d = m.dims();
    let od = [
        (d[0] - w[0]) / w[0] + 1,
        (d[1] - w[1]) / w[1] + 1,
        (d[2] - w[2]) / w[2] + 1,
    ];
    let mut out = Volume::zeros(od);
    for oz in 0..od[2] {
        for oy in 0..od[1] {
            for ox in 0..od[0] {
                let mut best = f32::NEG_INFINITY;
                for qz in 0..w[2] {
                    for qy in 0..w[1] {
                        for qx in 0..w[0] {
                            let v = m.at(ox * w[0] + qx, oy * w[1] + qy, oz * w[2] + qz);
                            if v > best {
                                best = v;
                            }
                        }
                    }
                }
                out.set(ox, oy, oz, best);
            }
        }
    }
    out
}

/// Evaluates the graph as a classical pooled network: every convolution runs
/// dense and every max-filter node is a strided max-pooling. Returns the
/// boundary-probability map. A dense engine pass subsampled on the pooling
/// grid must reproduce these values bit for bit.
pub fn pooled_forward(
    spec: &NetworkSpec,
    params: &ParamState,
    inputs: &HashMap<String, Volume>,
) -> Volume {
    let n = spec.nodes().len();
    let mut maps: Vec<Option<Vec<Volume>>> = vec![None; n];
    for &i in spec.topo_order() {
        let node = &spec.nodes()[i];
        let produced: Vec<Volume> = match &node.kind {
            NodeKind::Input => vec![inputs[node.name.as_str()].clone()],
            NodeKind::Conv { out_maps, .. } => {
                let ins = maps[spec.upstream_of(i)[0]].as_ref().unwrap();
                let p = params.get(i).unwrap();
                (0..*out_maps).map(|o| dense_conv_channel(ins, p, o)).collect()
            }
            NodeKind::MaxFilter { window } => {
                let ins = maps[spec.upstream_of(i)[0]].as_ref().unwrap();
                ins.iter().map(|m| strided_pool(m, *window)).collect()
            }
            NodeKind::Activation(f) => {
                let ins = maps[spec.upstream_of(i)[0]].as_ref().unwrap();
                ins.iter()
                    .map(|m| {
                        let mut v = m.clone();
                        for x in v.values_mut() {
                            *x = f.apply(*x);
                        }
                        v
                    })
                    .collect()
            }
            NodeKind::Concat => {
                let mut all = Vec::new();
                for &u in spec.upstream_of(i) {
                    all.extend(maps[u].as_ref().unwrap().iter().cloned());
                }
                all
            }
            NodeKind::Output => {
                let ins = maps[spec.upstream_of(i)[0]].as_ref().unwrap();
                let mut p1 = Volume::zeros(ins[0].dims());
                match ins.len() {
                    1 => {
                        for (p, &z) in p1.values_mut().iter_mut().zip(ins[0].values()) {
                            *p = sigmoid_f32(z);
                        }
                    }
                    2 => {
                        let (z0, z1) = (ins[0].values(), ins[1].values());
                        for ((p, &a), &b) in
                            p1.values_mut().iter_mut().zip(z0).zip(z1)
                        {
                            *p = sigmoid_f32(b - a);
                        }
                    }
                    c => panic!("output with {c} upstream channels"),
                }
                return p1;
            }
        };
        maps[i] = Some(produced);
    }
    unreachable!("every parsed network has an output node")
}

// ---------------------------------------------------------------------------
// f64 reference evaluator (same geometry as the engine, double precision)
// ---------------------------------------------------------------------------

struct M64 {
    dims: Dims,
    v: Vec<f64>,
}

impl M64 {
    fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.v[x + self.dims[0] * (y + self.dims[1] * z)]
    }
}

fn sigmoid_f64(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn sparse_out_dims(input: Dims, k: Dims, s: Sparsity) -> Dims {
    [
        input[0] - (k[0] - 1) * s.0[0],
        input[1] - (k[1] - 1) * s.0[1],
        input[2] - (k[2] - 1) * s.0[2],
    ]
}

fn conv_f64(ins: &[M64], p: &ConvParams, o: usize, s: Sparsity) -> M64 {
    let [kx, ky, _] = p.kshape;
    let od = sparse_out_dims(ins[0].dims, p.kshape, s);
    let mut v = vec![0.0f64; od[0] * od[1] * od[2]];
    let mut i = 0;
    for oz in 0..od[2] {
        for oy in 0..od[1] {
            for ox in 0..od[0] {
                let mut acc = p.b[o] as f64;
                for (ci, cin) in ins.iter().enumerate() {
                    let taps = p.kernel(o, ci);
                    for (t, &w) in taps.iter().enumerate() {
                        let qx = t % kx;
                        let qy = (t / kx) % ky;
                        let qz = t / (kx * ky);
                        acc += w as f64
                            * cin.at(ox + qx * s.0[0], oy + qy * s.0[1], oz + qz * s.0[2]);
                    }
                }
                v[i] = acc;
                i += 1;
            }
        }
    }
    M64 { dims: od, v }
}

fn max_filter_f64(m: &M64, w: Dims, s: Sparsity) -> M64 {
    let od = sparse_out_dims(m.dims, w, s);
    let mut v = vec![0.0f64; od[0] * od[1] * od[2]];
    let mut i = 0;
    for oz in 0..od[2] {
        for oy in 0..od[1] {
            for ox in 0..od[0] {
                let mut best = f64::NEG_INFINITY;
                for qz in 0..w[2] {
                    for qy in 0..w[1] {
                        for qx in 0..w[0] {
                            let x =
                                m.at(ox + qx * s.0[0], oy + qy * s.0[1], oz + qz * s.0[2]);
                            if x > best {
                                best = x;
                            }
                        }
                    }
                }
                v[i] = best;
                i += 1;
            }
        }
    }
    M64 { dims: od, v }
}

/// Dense forward pass in f64 with the engine's exact geometry (applied
/// sparsities from the plan), returning the boundary-probability map.
fn ref_forward_f64(
    spec: &NetworkSpec,
    params: &ParamState,
    inputs: &HashMap<String, Volume>,
) -> M64 {
    let plan = infer_plan(spec).unwrap();
    let n = spec.nodes().len();
    let mut maps: Vec<Option<Vec<M64>>> = Vec::with_capacity(n);
    maps.resize_with(n, || None);
    for &i in spec.topo_order() {
        let node = &spec.nodes()[i];
        let produced: Vec<M64> = match &node.kind {
            NodeKind::Input => {
                let v = &inputs[node.name.as_str()];
                vec![M64 {
                    dims: v.dims(),
                    v: v.values().iter().map(|&x| x as f64).collect(),
                }]
            }
            NodeKind::Conv { out_maps, .. } => {
                let ins = maps[spec.upstream_of(i)[0]].as_ref().unwrap();
                let p = params.get(i).unwrap();
                (0..*out_maps).map(|o| conv_f64(ins, p, o, plan.applied[i])).collect()
            }
            NodeKind::MaxFilter { window } => {
                let ins = maps[spec.upstream_of(i)[0]].as_ref().unwrap();
                ins.iter().map(|m| max_filter_f64(m, *window, plan.applied[i])).collect()
            }
            NodeKind::Activation(f) => {
                let ins = maps[spec.upstream_of(i)[0]].as_ref().unwrap();
                ins.iter()
                    .map(|m| M64 {
                        dims: m.dims,
                        v: m.v
                            .iter()
                            .map(|&x| match f {
                                Activation::Relu => x.max(0.0),
                                Activation::Tanh => x.tanh(),
                            })
                            .collect(),
                    })
                    .collect()
            }
            NodeKind::Concat => {
                let mut all = Vec::new();
                for &u in spec.upstream_of(i) {
                    let ins = maps[u].as_ref().unwrap();
                    for m in ins {
                        all.push(M64 { dims: m.dims, v: m.v.clone() });
                    }
                }
                all
            }
            NodeKind::Output => {
                let ins = maps[spec.upstream_of(i)[0]].as_ref().unwrap();
                let p1: Vec<f64> = match ins.len() {
                    1 => ins[0].v.iter().map(|&z| sigmoid_f64(z)).collect(),
                    2 => ins[0]
                        .v
                        .iter()
                        .zip(&ins[1].v)
                        .map(|(&a, &b)| sigmoid_f64(b - a))
                        .collect(),
                    c => panic!("output with {c} upstream channels"),
                };
                return M64 { dims: ins[0].dims, v: p1 };
            }
        };
        maps[i] = Some(produced);
    }
    unreachable!("every parsed network has an output node")
}

/// The training loss in double precision:
/// `sum_p w(p) * [-y ln p1 - (1-y) ln(1-p1)]` with the same clamp as the
/// engine. Used as the scalar function for finite differences.
pub fn ref_loss_f64(
    spec: &NetworkSpec,
    params: &ParamState,
    inputs: &HashMap<String, Volume>,
    labels: &Volume,
    weights: &Volume,
) -> f64 {
    let probs = ref_forward_f64(spec, params, inputs);
    assert_eq!(probs.dims, labels.dims(), "reference output dims");
    let mut total = 0.0f64;
    for ((&p, &y), &w) in probs.v.iter().zip(labels.values()).zip(weights.values()) {
        let p = p.clamp(1e-7, 1.0 - 1e-7);
        let (y, w) = (y as f64, w as f64);
        total += w * (-y * p.ln() - (1.0 - y) * (1.0 - p).ln());
    }
    total
}

// ---------------------------------------------------------------------------
// Flat parameter addressing (for finite-difference sweeps)
// ---------------------------------------------------------------------------

/// Address of one scalar parameter: `(node index, weight?, flat index)`.
#[derive(Clone, Copy, Debug)]
pub struct ParamRef {
    pub node: usize,
    pub is_weight: bool,
    pub idx: usize,
}

pub fn all_param_refs(params: &ParamState) -> Vec<ParamRef> {
    let mut refs = Vec::new();
    for (node, p) in params.nodes.iter().enumerate() {
        let Some(p) = p else { continue };
        for idx in 0..p.w.len() {
            refs.push(ParamRef { node, is_weight: true, idx });
        }
        for idx in 0..p.b.len() {
            refs.push(ParamRef { node, is_weight: false, idx });
        }
    }
    refs
}

pub fn param_add(params: &mut ParamState, r: ParamRef, delta: f32) {
    let p = params.nodes[r.node].as_mut().unwrap();
    if r.is_weight {
        p.w[r.idx] += delta;
    } else {
        p.b[r.idx] += delta;
    }
}

pub fn param_get(params: &ParamState, r: ParamRef) -> f32 {
    let p = params.nodes[r.node].as_ref().unwrap();
    if r.is_weight {
        p.w[r.idx]
    } else {
        p.b[r.idx]
    }
}

pub fn grad_at(grads: &voxnn_core::exec::Gradients, r: ParamRef) -> f32 {
    let g = grads.nodes[r.node].as_ref().unwrap();
    if r.is_weight {
        g.gw[r.idx]
    } else {
        g.gb[r.idx]
    }
}

// ---------------------------------------------------------------------------
// Random architecture generator
// ---------------------------------------------------------------------------

pub struct SpecOpts {
    pub max_mf: usize,
    pub concat_prob: f64,
    pub max_maps: usize,
    pub kxy: RangeInclusive<usize>,
    pub kz: RangeInclusive<usize>,
    pub wxy: RangeInclusive<usize>,
    pub wz: RangeInclusive<usize>,
    pub act_prob: f64,
    pub tanh_prob: f64,
    pub fov_cap: Dims,
    pub param_cap: usize,
}

impl Default for SpecOpts {
    fn default() -> Self {
        SpecOpts {
            max_mf: 2,
            concat_prob: 0.3,
            max_maps: 3,
            kxy: 1..=3,
            kz: 1..=2,
            wxy: 2..=3,
            wz: 1..=2,
            act_prob: 0.7,
            tanh_prob: 0.4,
            fov_cap: [20, 20, 6],
            param_cap: usize::MAX,
        }
    }
}

/// Draws random valid architectures (single input, optional symmetric concat
/// branch, up to `max_mf` max-filter nodes on the trunk) until one fits the
/// field-of-view and parameter caps.
pub fn random_net(rng: &mut ChaCha8Rng, opts: &SpecOpts) -> (NetworkSpec, String) {
    for _ in 0..500 {
        let text = random_net_text(rng, opts);
        let Ok(spec) = parse_spec(&text) else {
            panic!("generator produced an unparseable spec:\n{text}");
        };
        let fov = voxnn_core::net::field_of_view(&spec).unwrap();
        let params = voxnn_core::net::param_count(&spec);
        if (0..3).all(|a| fov[a] <= opts.fov_cap[a]) && params <= opts.param_cap {
            return (spec, text);
        }
    }
    panic!("no architecture fit the caps after 500 attempts");
}

fn rand_kshape(rng: &mut ChaCha8Rng, opts: &SpecOpts) -> String {
    let kx = rng.random_range(opts.kxy.clone());
    let ky = rng.random_range(opts.kxy.clone());
    let kz = rng.random_range(opts.kz.clone());
    format!("{kx}x{ky}x{kz}")
}

/// Appends one conv line (plus an optional activation line) and returns the
/// name downstream nodes should read from.
fn push_conv(
    rng: &mut ChaCha8Rng,
    opts: &SpecOpts,
    lines: &mut Vec<String>,
    serial: &mut usize,
    up: &str,
    shape: Option<&str>,
) -> String {
    let name = format!("c{serial}");
    *serial += 1;
    let maps = rng.random_range(1..=opts.max_maps);
    let shape = match shape {
        Some(s) => s.to_string(),
        None => rand_kshape(rng, opts),
    };
    lines.push(format!("{name} conv {shape} {maps} <- {up}"));
    if rng.random_bool(opts.act_prob) {
        let act = if rng.random_bool(opts.tanh_prob) { "tanh" } else { "relu" };
        let aname = format!("a{name}");
        lines.push(format!("{aname} activation {act} <- {name}"));
        aname
    } else {
        name
    }
}

fn random_net_text(rng: &mut ChaCha8Rng, opts: &SpecOpts) -> String {
    let mut lines = vec!["image input".to_string()];
    let mut last = "image".to_string();
    let mut serial = 0usize;

    // optional symmetric two-branch start: equal kernel extents keep the
    // branches' shrink and sparsity equal, as concat requires
    if rng.random_bool(opts.concat_prob) {
        let shape = rand_kshape(rng, opts);
        let a = push_conv(rng, opts, &mut lines, &mut serial, &last, Some(&shape));
        let b = push_conv(rng, opts, &mut lines, &mut serial, &last, Some(&shape));
        lines.push(format!("j0 concat <- {a}, {b}"));
        last = push_conv(rng, opts, &mut lines, &mut serial, "j0", Some("1x1x1"));
    }

    let n_mf = rng.random_range(0..=opts.max_mf);
    for seg in 0..=n_mf {
        for _ in 0..rng.random_range(1..=2usize) {
            let up = last.clone();
            last = push_conv(rng, opts, &mut lines, &mut serial, &up, None);
        }
        if seg < n_mf {
            let wx = rng.random_range(opts.wxy.clone());
            let wy = rng.random_range(opts.wxy.clone());
            let wz = rng.random_range(opts.wz.clone());
            lines.push(format!("m{seg} max_filter {wx}x{wy}x{wz} <- {last}"));
            last = format!("m{seg}");
        }
    }

    let out_ch = rng.random_range(1..=2usize);
    lines.push(format!("final conv 1x1x1 {out_ch} <- {last}"));
    lines.push("out output <- final".to_string());
    lines.join("\n") + "\n"
}

/// Initialized parameters with randomized biases on top of the usual fan-in
/// weight draw, so bias handling is exercised too.
pub fn randomized_params(spec: &NetworkSpec, seed: u64) -> ParamState {
    let mut params = init_params(spec, seed);
    let mut rng = seeded(seed ^ 0xB1A5);
    for p in params.nodes.iter_mut().flatten() {
        for b in p.b.iter_mut() {
            *b = rng.random_range(-0.2..0.2);
        }
    }
    params
}

// ---------------------------------------------------------------------------
// Pair-counting Rand scorer (quadratic, independent of the engine's
// contingency-table implementation)
// ---------------------------------------------------------------------------

pub struct PairRand {
    pub merge: f64,
    pub split: f64,
    pub f: f64,
}

/// Rand scores by brute-force enumeration of all ordered pixel pairs
/// (including self-pairs), skipping pixels labeled 0 in either volume.
/// Returns `None` when no pixel survives the exclusion.
pub fn pair_rand(proposal: &Segmentation, truth: &Segmentation) -> Option<PairRand> {
    assert_eq!(proposal.dims(), truth.dims());
    let valid: Vec<(u32, u32)> = proposal
        .labels()
        .iter()
        .zip(truth.labels())
        .filter(|(&p, &t)| p != 0 && t != 0)
        .map(|(&p, &t)| (p, t))
        .collect();
    if valid.is_empty() {
        return None;
    }
    let (mut same_p, mut same_t, mut same_both) = (0u64, 0u64, 0u64);
    for &(p1, t1) in &valid {
        for &(p2, t2) in &valid {
            let sp = p1 == p2;
            let st = t1 == t2;
            if sp {
                same_p += 1;
            }
            if st {
                same_t += 1;
            }
            if sp && st {
                same_both += 1;
            }
        }
    }
    let merge = same_both as f64 / same_p as f64;
    let split = same_both as f64 / same_t as f64;
    Some(PairRand { merge, split, f: 2.0 * merge * split / (merge + split) })
}
