//! Whole-graph forward and backward execution over dense feature maps.
//!
//! Every node's activation is a list of channel volumes kept intact as dense
//! 3D maps. Determinism contract: for a fixed convolution method plan the
//! results are bit-identical across thread counts, because all accumulation
//! orders (bias first, then input channels ascending, taps ascending within a
//! channel) are fixed by the algorithm, never by scheduling.

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::conv::{
    self, conv_backward_input_accumulate, conv_grad_kernel, max_filter, max_filter_backward,
    ArgmaxMap, ConvMethod, Kernel, Sparsity, TuneOutcome,
};
use crate::net::{field_of_view, infer_plan, NetworkSpec, NodeKind, ParamState, SparsityPlan};
use crate::tensor::{Dims, Volume};
use crate::{Error, Result};

/// Per-conv-node choice of convolution algorithm. Defaults to direct
/// everywhere, which is also the deterministic-mode setting.
#[derive(Clone, Debug)]
pub struct MethodPlan {
    methods: Vec<ConvMethod>,
}

impl MethodPlan {
    pub fn all_direct(spec: &NetworkSpec) -> Self {
        MethodPlan { methods: vec![ConvMethod::Direct; spec.nodes().len()] }
    }

    pub fn get(&self, node_idx: usize) -> ConvMethod {
        self.methods[node_idx]
    }

    pub fn set(&mut self, node_idx: usize, m: ConvMethod) {
        self.methods[node_idx] = m;
    }
}

/// One conv layer's tuning record, as emitted by `bench`.
#[derive(Clone, Debug)]
pub struct TuneReport {
    pub node: String,
    pub input_dims: Dims,
    pub kshape: Dims,
    pub sparsity: Sparsity,
    pub outcome: TuneOutcome,
}

/// Feature-map dims per node for a given input volume size, from the
/// field-of-view accounting: `dims[i] = input - shrink[i]`.
pub fn map_dims(spec: &NetworkSpec, input_dims: Dims) -> Result<Vec<Dims>> {
    let plan = infer_plan(spec)?;
    let mut out = Vec::with_capacity(spec.nodes().len());
    for (i, n) in spec.nodes().iter().enumerate() {
        let mut d = [0usize; 3];
        for a in 0..3 {
            let s = plan.shrink[i][a];
            if input_dims[a] <= s {
                return Err(Error::Shape(format!(
                    "input dims {input_dims:?} too small at node `{}` (needs > {s} on axis {a})",
                    n.name
                )));
            }
            d[a] = input_dims[a] - s;
        }
        out.push(d);
    }
    Ok(out)
}

/// Times each conv layer both ways on probe data of the shapes it would see
/// for `input_dims`-sized inputs, returning the resulting plan and one report
/// per conv node. `trials == 0` leaves every layer direct without timing.
pub fn tune_plan(
    spec: &NetworkSpec,
    input_dims: Dims,
    trials: usize,
) -> Result<(MethodPlan, Vec<TuneReport>)> {
    let plan = infer_plan(spec)?;
    let dims = map_dims(spec, input_dims)?;
    let mut methods = MethodPlan::all_direct(spec);
    let mut reports = Vec::new();
    for (i, n) in spec.nodes().iter().enumerate() {
        if let NodeKind::Conv { shape, .. } = &n.kind {
            let up = spec.upstream_of(i)[0];
            let outcome = conv::tune_layer(dims[up], *shape, plan.applied[i], trials);
            methods.set(i, outcome.choice);
            reports.push(TuneReport {
                node: n.name.clone(),
                input_dims: dims[up],
                kshape: *shape,
                sparsity: plan.applied[i],
                outcome,
            });
        }
    }
    Ok((methods, reports))
}

/// Dense feature maps retained from a forward pass.
#[derive(Clone, Debug)]
pub struct Activations {
    maps: Vec<Option<Vec<Arc<Volume>>>>,
    argmax: Vec<Option<Vec<ArgmaxMap>>>,
    plan: SparsityPlan,
    output_idx: usize,
}

impl Activations {
    /// Channel volumes of a node, if retained (`keep_maps`, or the output).
    pub fn node(&self, spec: &NetworkSpec, name: &str) -> Option<&[Arc<Volume>]> {
        let idx = spec.node_index(name)?;
        self.maps[idx].as_deref()
    }

    fn node_maps(&self, idx: usize) -> Result<&[Arc<Volume>]> {
        self.maps[idx]
            .as_deref()
            .ok_or_else(|| Error::Internal(format!("activation of node {idx} was not retained")))
    }

    /// Oriented probability volumes of the output node: `(p0, p1)` where
    /// channel 1 is the boundary probability.
    pub fn output_pair(&self) -> (&Volume, &Volume) {
        let m = self.maps[self.output_idx].as_ref().expect("output always retained");
        (&m[0], &m[1])
    }

    /// The boundary-probability map (class-1 softmax output).
    pub fn output_probs(&self) -> &Volume {
        self.output_pair().1
    }
}

fn add_into(dst: &mut Volume, src: &Volume) {
    dst.values_mut()
        .par_iter_mut()
        .zip(src.values().par_iter())
        .for_each(|(d, s)| *d += *s);
}

/// Numerically stable logistic function.
fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Evaluates the graph on `inputs` (one single-channel volume per input
/// node, all of equal dims). With `keep_maps` every node's dense maps (and
/// max-filter argmaxes) are retained for inspection or a backward pass;
/// otherwise maps are dropped as soon as their last consumer has run.
pub fn forward(
    spec: &NetworkSpec,
    params: &ParamState,
    methods: &MethodPlan,
    inputs: &HashMap<String, Volume>,
    keep_maps: bool,
) -> Result<Activations> {
    let n = spec.nodes().len();
    let plan = infer_plan(spec)?;

    // validate the input set: exactly the declared inputs, all equal dims
    let input_names = spec.input_names();
    for name in inputs.keys() {
        let known = spec
            .node_index(name)
            .map(|i| spec.nodes()[i].kind == NodeKind::Input)
            .unwrap_or(false);
        if !known {
            return Err(Error::Config(format!("`{name}` is not an input of this network")));
        }
    }
    let mut in_dims: Option<Dims> = None;
    for name in &input_names {
        let v = inputs
            .get(*name)
            .ok_or_else(|| Error::Config(format!("missing input volume `{name}`")))?;
        match in_dims {
            None => in_dims = Some(v.dims()),
            Some(d) if d == v.dims() => {}
            Some(d) => {
                return Err(Error::Shape(format!(
                    "input `{name}` has dims {:?}, others have {d:?}",
                    v.dims()
                )))
            }
        }
    }
    let in_dims = in_dims.expect("validated nonempty inputs");
    let fov = field_of_view(spec)?;
    for a in 0..3 {
        if in_dims[a] < fov[a] {
            return Err(Error::Shape(format!(
                "input dims {in_dims:?} smaller than the field of view {fov:?}"
            )));
        }
    }

    // liveness: last topo position that reads each node's maps
    let topo_pos: Vec<usize> = {
        let mut pos = vec![0usize; n];
        for (t, &i) in spec.topo_order().iter().enumerate() {
            pos[i] = t;
        }
        pos
    };
    let mut last_use: Vec<usize> = topo_pos.clone();
    for (i, _) in spec.nodes().iter().enumerate() {
        for &u in spec.upstream_of(i) {
            last_use[u] = last_use[u].max(topo_pos[i]);
        }
    }

    let mut maps: Vec<Option<Vec<Arc<Volume>>>> = vec![None; n];
    let mut argmax: Vec<Option<Vec<ArgmaxMap>>> = vec![None; n];

    for (t, &i) in spec.topo_order().iter().enumerate() {
        let node = &spec.nodes()[i];
        let produced: Vec<Arc<Volume>> = match &node.kind {
            NodeKind::Input => {
                vec![Arc::new(inputs[node.name.as_str()].clone())]
            }
            NodeKind::Conv { shape, out_maps } => {
                let up = spec.upstream_of(i)[0];
                let ins = maps[up].as_deref().expect("topo order");
                let p = params.get(i).ok_or_else(|| {
                    Error::Internal(format!("no parameters for conv node `{}`", node.name))
                })?;
                if p.kshape != *shape || p.in_maps != ins.len() || p.out_maps != *out_maps {
                    return Err(Error::Shape(format!(
                        "parameter shapes for `{}` do not match the spec",
                        node.name
                    )));
                }
                let s = plan.applied[i];
                let out_dims = conv::valid_out_dims(ins[0].dims(), *shape, s)?;
                let method = methods.get(i);
                (0..*out_maps)
                    .into_par_iter()
                    .map(|o| {
                        let mut acc = Volume::filled(out_dims, p.b[o]);
                        for (ci, cin) in ins.iter().enumerate() {
                            let k = Kernel::new(*shape, p.kernel(o, ci).to_vec())?;
                            match method {
                                ConvMethod::Direct => {
                                    conv::conv_accumulate(&mut acc, cin, &k, s)?
                                }
                                ConvMethod::Fft => {
                                    let part = conv::conv_fft(cin, &k, s)?;
                                    add_into(&mut acc, &part);
                                }
                            }
                        }
                        Ok(Arc::new(acc))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            NodeKind::MaxFilter { window } => {
                let up = spec.upstream_of(i)[0];
                let ins = maps[up].as_deref().expect("topo order");
                let s = plan.applied[i];
                let pairs: Vec<(Arc<Volume>, ArgmaxMap)> = ins
                    .par_iter()
                    .map(|cin| max_filter(cin, *window, s).map(|(v, am)| (Arc::new(v), am)))
                    .collect::<Result<Vec<_>>>()?;
                let (vols, ams): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
                argmax[i] = Some(ams);
                vols
            }
            NodeKind::Activation(f) => {
                let up = spec.upstream_of(i)[0];
                let ins = maps[up].as_deref().expect("topo order");
                ins.par_iter()
                    .map(|cin| {
                        let mut v = (**cin).clone();
                        v.values_mut().par_iter_mut().for_each(|x| *x = f.apply(*x));
                        Arc::new(v)
                    })
                    .collect()
            }
            NodeKind::Concat => {
                let mut all = Vec::new();
                let d0 = {
                    let u0 = spec.upstream_of(i)[0];
                    maps[u0].as_deref().expect("topo order")[0].dims()
                };
                for &u in spec.upstream_of(i) {
                    let ins = maps[u].as_deref().expect("topo order");
                    if ins[0].dims() != d0 {
                        return Err(Error::Shape(format!(
                            "concat `{}` joins maps of different dims",
                            node.name
                        )));
                    }
                    all.extend(ins.iter().cloned());
                }
                all
            }
            NodeKind::Output => {
                let up = spec.upstream_of(i)[0];
                let ins = maps[up].as_deref().expect("topo order");
                let dims = ins[0].dims();
                let mut p0 = Volume::zeros(dims);
                let mut p1 = Volume::zeros(dims);
                match ins.len() {
                    1 => {
                        let z = ins[0].values();
                        p1.values_mut()
                            .par_iter_mut()
                            .zip(z.par_iter())
                            .for_each(|(p, z)| *p = sigmoid(*z));
                    }
                    2 => {
                        let (z0, z1) = (ins[0].values(), ins[1].values());
                        p1.values_mut()
                            .par_iter_mut()
                            .zip(z0.par_iter().zip(z1.par_iter()))
                            .for_each(|(p, (a, b))| *p = sigmoid(*b - *a));
                    }
                    c => {
                        return Err(Error::Shape(format!(
                            "output `{}` needs 1 or 2 upstream channels, got {c}",
                            node.name
                        )))
                    }
                }
                p0.values_mut()
                    .par_iter_mut()
                    .zip(p1.values().par_iter())
                    .for_each(|(a, b)| *a = 1.0 - *b);
                vec![Arc::new(p0), Arc::new(p1)]
            }
        };
        maps[i] = Some(produced);

        if !keep_maps {
            for j in 0..n {
                if last_use[j] <= t && j != spec.output_index() {
                    maps[j] = None;
                    argmax[j] = None;
                }
            }
        }
    }

    Ok(Activations { maps, argmax, plan, output_idx: spec.output_index() })
}

/// Per-conv-node parameter gradients, aligned with `spec.nodes()`.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub gw: Vec<f32>,
    pub gb: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub nodes: Vec<Option<ConvGrads>>,
}

impl Gradients {
    pub fn get(&self, idx: usize) -> Option<&ConvGrads> {
        self.nodes[idx].as_ref()
    }
}

/// Gradient of the weighted cross-entropy loss
/// `L = sum_p weight(p) * [-y log p1 - (1-y) log p0]`
/// with respect to every parameter. Needs activations from a `keep_maps`
/// forward pass. Softmax and loss are fused: the output-logit gradient is
/// `weight * (p - y)` per class.
pub fn backward(
    spec: &NetworkSpec,
    params: &ParamState,
    acts: &Activations,
    labels: &Volume,
    weights: &Volume,
) -> Result<Gradients> {
    let n = spec.nodes().len();
    let out_dims = acts.output_probs().dims();
    if labels.dims() != out_dims || weights.dims() != out_dims {
        return Err(Error::Shape(format!(
            "labels {:?} / weights {:?} do not match output dims {out_dims:?}",
            labels.dims(),
            weights.dims()
        )));
    }

    let mut delta: Vec<Option<Vec<Volume>>> = vec![None; n];
    let mut grads: Vec<Option<ConvGrads>> = spec
        .nodes()
        .iter()
        .zip(&params.nodes)
        .map(|(_, p)| {
            p.as_ref().map(|p| ConvGrads { gw: vec![0.0; p.w.len()], gb: vec![0.0; p.b.len()] })
        })
        .collect();

    let add_delta = |store: &mut Vec<Option<Vec<Volume>>>, idx: usize, contrib: Vec<Volume>| {
        match &mut store[idx] {
            None => store[idx] = Some(contrib),
            Some(existing) => {
                for (d, c) in existing.iter_mut().zip(&contrib) {
                    add_into(d, c);
                }
            }
        }
    };

    for &i in spec.topo_order().iter().rev() {
        let node = &spec.nodes()[i];
        match &node.kind {
            NodeKind::Output => {
                let up = spec.upstream_of(i)[0];
                let p1 = acts.output_pair().1;
                let up_ch = spec.channels(up);
                let mut d1 = Volume::zeros(out_dims);
                d1.values_mut()
                    .par_iter_mut()
                    .zip(p1.values().par_iter().zip(labels.values().par_iter().zip(weights.values().par_iter())))
                    .for_each(|(d, (p, (y, w)))| *d = *w * (*p - *y));
                let contrib = if up_ch == 1 {
                    vec![d1]
                } else {
                    let mut d0 = Volume::zeros(out_dims);
                    d0.values_mut()
                        .par_iter_mut()
                        .zip(d1.values().par_iter())
                        .for_each(|(a, b)| *a = -*b);
                    vec![d0, d1]
                };
                add_delta(&mut delta, up, contrib);
            }
            NodeKind::Conv { shape, .. } => {
                let Some(d) = delta[i].take() else { continue };
                let up = spec.upstream_of(i)[0];
                let ins = acts.node_maps(up)?;
                let p = params.get(i).expect("conv has params");
                let s = acts.plan.applied[i];
                let g = grads[i].as_mut().expect("conv has grads");

                // bias gradients: plain f64 sums per out-map
                g.gb
                    .par_iter_mut()
                    .zip(d.par_iter())
                    .for_each(|(gb, dch)| {
                        *gb = dch.values().iter().map(|&x| x as f64).sum::<f64>() as f32;
                    });

                // weight gradients per (out, in) kernel
                let t = p.taps_per_kernel();
                g.gw
                    .par_chunks_mut(t)
                    .enumerate()
                    .map(|(pair, chunk)| {
                        let o = pair / p.in_maps;
                        let ci = pair % p.in_maps;
                        let gk = conv_grad_kernel(&ins[ci], *shape, s, &d[o])?;
                        chunk.copy_from_slice(&gk.taps);
                        Ok(())
                    })
                    .collect::<Result<Vec<()>>>()?;

                // upstream deltas: transpose conv, out-maps accumulated in order
                let contrib: Vec<Volume> = (0..p.in_maps)
                    .into_par_iter()
                    .map(|ci| {
                        let mut gin = Volume::zeros(ins[ci].dims());
                        for o in 0..p.out_maps {
                            let k = Kernel::new(*shape, p.kernel(o, ci).to_vec())?;
                            conv_backward_input_accumulate(&mut gin, &k, s, &d[o])?;
                        }
                        Ok(gin)
                    })
                    .collect::<Result<Vec<_>>>()?;
                add_delta(&mut delta, up, contrib);
            }
            NodeKind::MaxFilter { .. } => {
                let Some(d) = delta[i].take() else { continue };
                let up = spec.upstream_of(i)[0];
                let ams = acts.argmax[i]
                    .as_ref()
                    .ok_or_else(|| Error::Internal("argmax not retained".into()))?;
                let up_dims = acts.node_maps(up)?[0].dims();
                let contrib: Vec<Volume> = ams
                    .par_iter()
                    .zip(d.par_iter())
                    .map(|(am, dch)| max_filter_backward(am, dch, up_dims))
                    .collect::<Result<Vec<_>>>()?;
                add_delta(&mut delta, up, contrib);
            }
            NodeKind::Activation(f) => {
                let Some(d) = delta[i].take() else { continue };
                let up = spec.upstream_of(i)[0];
                let outs = acts.node_maps(i)?;
                let contrib: Vec<Volume> = d
                    .into_par_iter()
                    .zip(outs.par_iter())
                    .map(|(mut dch, ych)| {
                        dch.values_mut()
                            .par_iter_mut()
                            .zip(ych.values().par_iter())
                            .for_each(|(g, y)| *g *= f.derivative_from_output(*y));
                        dch
                    })
                    .collect();
                add_delta(&mut delta, up, contrib);
            }
            NodeKind::Concat => {
                let Some(d) = delta[i].take() else { continue };
                let mut offset = 0usize;
                for &u in spec.upstream_of(i) {
                    let ch = spec.channels(u);
                    let contrib: Vec<Volume> = d[offset..offset + ch].to_vec();
                    add_delta(&mut delta, u, contrib);
                    offset += ch;
                }
            }
            NodeKind::Input => {}
        }
    }

    Ok(Gradients { nodes: grads })
}
