//! Network graphs: the line-oriented `.net` format, structural validation,
//! sparsity and field-of-view inference, and parameter state.
//!
//! A spec file holds one node per line, `name kind args... <- upstream[,upstream]`,
//! with `#` comments. Kinds:
//!
//! ```text
//! image  input                      # one channel, no upstream
//! conv1  conv 3x3x1 24 <- image    # filter shape, out_maps
//! pool1  max_filter 2x2x1 <- act1  # window
//! act1   activation relu <- conv1  # relu | tanh
//! join   concat <- a,b             # channel-wise, >= 2 upstreams
//! out    output <- convN           # per-pixel 2-class softmax
//! ```
//!
//! The output node's upstream carries either two channels (plain softmax) or
//! one (treated as the logit pair `(0, z)`, i.e. a sigmoid).

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::Sparsity;
use crate::tensor::Dims;
use crate::{Error, Result};

/// Pointwise nonlinearity of an `activation` node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed in terms of the activation's own output.
    pub fn derivative_from_output(self, y: f32) -> f32 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

/// One node of the graph.
#[derive(Clone, Debug, PartialEq)]
pub enum NodeKind {
    Input,
    Conv { shape: Dims, out_maps: usize },
    MaxFilter { window: Dims },
    Activation(Activation),
    Concat,
    Output,
}

impl NodeKind {
    pub fn kind_name(&self) -> &'static str {
        match self {
            NodeKind::Input => "input",
            NodeKind::Conv { .. } => "conv",
            NodeKind::MaxFilter { .. } => "max_filter",
            NodeKind::Activation(_) => "activation",
            NodeKind::Concat => "concat",
            NodeKind::Output => "output",
        }
    }
}

#[derive(Clone, Debug)]
pub struct NodeSpec {
    pub name: String,
    pub kind: NodeKind,
    pub inputs: Vec<String>,
    /// 1-based line in the source text, for diagnostics.
    pub line: usize,
}

/// A validated network: parsed nodes plus resolved edges, topological order,
/// and per-node channel counts.
#[derive(Clone, Debug)]
pub struct NetworkSpec {
    nodes: Vec<NodeSpec>,
    source: String,
    name_to_idx: HashMap<String, usize>,
    upstream: Vec<Vec<usize>>,
    topo: Vec<usize>,
    channels: Vec<usize>,
    output_idx: usize,
}

/// Parses and validates a spec text. Alias of [`NetworkSpec::parse`].
pub fn parse_spec(text: &str) -> Result<NetworkSpec> {
    NetworkSpec::parse(text)
}

fn parse_shape(tok: &str, line: usize, what: &str) -> Result<Dims> {
    let parts: Vec<&str> = tok.split('x').collect();
    if parts.len() != 3 {
        return Err(Error::Spec(format!(
            "line {line}: {what} must look like KXxKYxKZ (e.g. 3x3x1), got `{tok}`"
        )));
    }
    let mut dims = [0usize; 3];
    for (a, p) in parts.iter().enumerate() {
        dims[a] = p.parse::<usize>().map_err(|_| {
            Error::Spec(format!("line {line}: bad {what} component `{p}` in `{tok}`"))
        })?;
        if dims[a] == 0 {
            return Err(Error::Spec(format!(
                "line {line}: {what} components must be >= 1, got `{tok}`"
            )));
        }
    }
    Ok(dims)
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name != "<-"
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
}

impl NetworkSpec {
    /// Parses the line-oriented format and validates the graph: known kinds,
    /// unique names, resolvable upstreams with per-kind arity, a single
    /// output, acyclicity, and reachability (every node from some input, the
    /// output from every input).
    pub fn parse(text: &str) -> Result<NetworkSpec> {
        let mut nodes: Vec<NodeSpec> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            let stripped = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let tokens: Vec<&str> = stripped.split_whitespace().collect();
            if tokens.is_empty() {
                continue;
            }
            let (head, upstream_toks) = match tokens.iter().position(|t| *t == "<-") {
                Some(pos) => (&tokens[..pos], &tokens[pos + 1..]),
                None => (&tokens[..], &[][..]),
            };
            if head.len() < 2 {
                return Err(Error::Spec(format!(
                    "line {line}: expected `name kind args... <- upstream`, got `{}`",
                    stripped.trim()
                )));
            }
            let name = head[0];
            if !valid_name(name) {
                return Err(Error::Spec(format!("line {line}: invalid node name `{name}`")));
            }
            let kind_tok = head[1];
            let args = &head[2..];
            let inputs: Vec<String> = upstream_toks
                .join("")
                .split(',')
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect();

            let expect_args = |n: usize| -> Result<()> {
                if args.len() != n {
                    return Err(Error::Spec(format!(
                        "line {line}: `{kind_tok}` takes {n} argument(s), got {}",
                        args.len()
                    )));
                }
                Ok(())
            };

            let kind = match kind_tok {
                "input" => {
                    expect_args(0)?;
                    NodeKind::Input
                }
                "conv" => {
                    expect_args(2)?;
                    let shape = parse_shape(args[0], line, "filter shape")?;
                    let out_maps: usize = args[1].parse().map_err(|_| {
                        Error::Spec(format!("line {line}: bad out_maps `{}`", args[1]))
                    })?;
                    if out_maps == 0 {
                        return Err(Error::Spec(format!("line {line}: out_maps must be >= 1")));
                    }
                    NodeKind::Conv { shape, out_maps }
                }
                "max_filter" => {
                    expect_args(1)?;
                    NodeKind::MaxFilter { window: parse_shape(args[0], line, "window")? }
                }
                "activation" => {
                    expect_args(1)?;
                    let f = match args[0] {
                        "relu" => Activation::Relu,
                        "tanh" => Activation::Tanh,
                        other => {
                            return Err(Error::Spec(format!(
                                "line {line}: unknown activation `{other}` (expected relu or tanh)"
                            )))
                        }
                    };
                    NodeKind::Activation(f)
                }
                "concat" => {
                    expect_args(0)?;
                    NodeKind::Concat
                }
                "output" => {
                    expect_args(0)?;
                    NodeKind::Output
                }
                other => {
                    return Err(Error::Spec(format!("line {line}: unknown node kind `{other}`")))
                }
            };

            let arity_ok = match kind {
                NodeKind::Input => inputs.is_empty(),
                NodeKind::Concat => inputs.len() >= 2,
                _ => inputs.len() == 1,
            };
            if !arity_ok {
                let want = match kind {
                    NodeKind::Input => "no upstream".to_string(),
                    NodeKind::Concat => ">= 2 upstreams".to_string(),
                    _ => "exactly 1 upstream".to_string(),
                };
                return Err(Error::Spec(format!(
                    "line {line}: `{}` node `{name}` needs {want}, got {}",
                    kind.kind_name(),
                    inputs.len()
                )));
            }

            nodes.push(NodeSpec { name: name.to_string(), kind, inputs, line });
        }

        Self::build(nodes, text.to_string())
    }

    fn build(nodes: Vec<NodeSpec>, source: String) -> Result<NetworkSpec> {
        if nodes.is_empty() {
            return Err(Error::Spec("spec has no nodes".into()));
        }
        let mut name_to_idx = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if name_to_idx.insert(n.name.clone(), i).is_some() {
                return Err(Error::Spec(format!(
                    "line {}: duplicate node name `{}`",
                    n.line, n.name
                )));
            }
        }

        let mut upstream = Vec::with_capacity(nodes.len());
        for n in &nodes {
            let mut ups = Vec::with_capacity(n.inputs.len());
            for u in &n.inputs {
                match name_to_idx.get(u) {
                    Some(&i) => ups.push(i),
                    None => {
                        return Err(Error::Spec(format!(
                            "line {}: node `{}` references unknown upstream `{u}`",
                            n.line, n.name
                        )))
                    }
                }
            }
            upstream.push(ups);
        }

        let n_inputs = nodes.iter().filter(|n| n.kind == NodeKind::Input).count();
        if n_inputs == 0 {
            return Err(Error::Spec("spec declares no input node".into()));
        }
        let outputs: Vec<usize> = nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.kind == NodeKind::Output)
            .map(|(i, _)| i)
            .collect();
        if outputs.len() != 1 {
            return Err(Error::Spec(format!(
                "spec must declare exactly 1 output node, found {}",
                outputs.len()
            )));
        }
        let output_idx = outputs[0];

        // Kahn's algorithm; ties broken by node index for a stable order
        let mut indeg: Vec<usize> = upstream.iter().map(Vec::len).collect();
        let mut downstream: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
        for (i, ups) in upstream.iter().enumerate() {
            for &u in ups {
                downstream[u].push(i);
            }
        }
        let mut ready: Vec<usize> =
            indeg.iter().enumerate().filter(|(_, &d)| d == 0).map(|(i, _)| i).collect();
        let mut topo = Vec::with_capacity(nodes.len());
        while let Some(&i) = ready.first() {
            ready.remove(0);
            topo.push(i);
            for &d in &downstream[i] {
                indeg[d] -= 1;
                if indeg[d] == 0 {
                    // keep ready ascending so topo order is deterministic
                    let pos = ready.partition_point(|&r| r < d);
                    ready.insert(pos, d);
                }
            }
        }
        if topo.len() != nodes.len() {
            let stuck: Vec<&str> = indeg
                .iter()
                .enumerate()
                .filter(|(_, &d)| d > 0)
                .map(|(i, _)| nodes[i].name.as_str())
                .collect();
            return Err(Error::Spec(format!("spec has a cycle through: {}", stuck.join(", "))));
        }

        // forward reachability from inputs
        let mut reach = vec![false; nodes.len()];
        for &i in &topo {
            if nodes[i].kind == NodeKind::Input {
                reach[i] = true;
            } else if !upstream[i].is_empty() && upstream[i].iter().any(|&u| reach[u]) {
                reach[i] = true;
            }
        }
        if let Some(i) = (0..nodes.len()).find(|&i| !reach[i]) {
            return Err(Error::Spec(format!(
                "line {}: node `{}` is not reachable from any input",
                nodes[i].line, nodes[i].name
            )));
        }

        // the output must be reachable from every input
        let mut reaches_out = vec![false; nodes.len()];
        reaches_out[output_idx] = true;
        for &i in topo.iter().rev() {
            if downstream[i].iter().any(|&d| reaches_out[d]) {
                reaches_out[i] = true;
            }
        }
        for (i, n) in nodes.iter().enumerate() {
            if n.kind == NodeKind::Input && !reaches_out[i] {
                return Err(Error::Spec(format!(
                    "line {}: input `{}` cannot reach the output",
                    n.line, n.name
                )));
            }
        }

        // channel inference
        let mut channels = vec![0usize; nodes.len()];
        for &i in &topo {
            channels[i] = match &nodes[i].kind {
                NodeKind::Input => 1,
                NodeKind::Conv { out_maps, .. } => *out_maps,
                NodeKind::MaxFilter { .. } | NodeKind::Activation(_) => channels[upstream[i][0]],
                NodeKind::Concat => upstream[i].iter().map(|&u| channels[u]).sum(),
                NodeKind::Output => {
                    let up = channels[upstream[i][0]];
                    if up != 1 && up != 2 {
                        return Err(Error::Spec(format!(
                            "line {}: output `{}` needs 1 or 2 upstream channels for the \
                             2-class softmax, got {up}",
                            nodes[i].line, nodes[i].name
                        )));
                    }
                    2
                }
            };
        }

        Ok(NetworkSpec { nodes, source, name_to_idx, upstream, topo, channels, output_idx })
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    /// The original spec text this network was parsed from.
    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.name_to_idx.get(name).copied()
    }

    pub fn topo_order(&self) -> &[usize] {
        &self.topo
    }

    pub fn upstream_of(&self, idx: usize) -> &[usize] {
        &self.upstream[idx]
    }

    /// Output channel count of a node's feature map.
    pub fn channels(&self, idx: usize) -> usize {
        self.channels[idx]
    }

    pub fn output_index(&self) -> usize {
        self.output_idx
    }

    /// Input node names in declaration order.
    pub fn input_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Input)
            .map(|n| n.name.as_str())
            .collect()
    }
}

/// Cumulative sparsity and field-of-view accounting per node.
#[derive(Clone, Debug)]
pub struct SparsityPlan {
    /// Sparsity a node applies to its own filtering (its upstream map's
    /// cumulative sparsity). `DENSE` for non-filtering nodes.
    pub applied: Vec<Sparsity>,
    /// Cumulative sparsity of the map each node produces.
    pub produced: Vec<Sparsity>,
    /// Per-node accumulated field-of-view minus one (how much the map has
    /// shrunk relative to the input volumes).
    pub shrink: Vec<Dims>,
}

/// Walks the DAG accumulating sparsity: inputs start at `(1,1,1)` and every
/// max_filter multiplies the sparsity of all downstream filterings by its
/// window size, per axis. Concat demands agreeing sparsity and shrink on all
/// of its upstreams.
pub fn infer_plan(spec: &NetworkSpec) -> Result<SparsityPlan> {
    let n = spec.nodes().len();
    let mut applied = vec![Sparsity::DENSE; n];
    let mut produced = vec![Sparsity::DENSE; n];
    let mut shrink = vec![[0usize; 3]; n];

    for &i in spec.topo_order() {
        let node = &spec.nodes()[i];
        match &node.kind {
            NodeKind::Input => {}
            NodeKind::Conv { shape, .. } => {
                let u = spec.upstream_of(i)[0];
                applied[i] = produced[u];
                produced[i] = produced[u];
                for a in 0..3 {
                    shrink[i][a] = shrink[u][a] + (shape[a] - 1) * applied[i].0[a];
                }
            }
            NodeKind::MaxFilter { window } => {
                let u = spec.upstream_of(i)[0];
                applied[i] = produced[u];
                let mut out = produced[u];
                for a in 0..3 {
                    out.0[a] *= window[a];
                    shrink[i][a] = shrink[u][a] + (window[a] - 1) * applied[i].0[a];
                }
                produced[i] = out;
            }
            NodeKind::Activation(_) | NodeKind::Output => {
                let u = spec.upstream_of(i)[0];
                applied[i] = produced[u];
                produced[i] = produced[u];
                shrink[i] = shrink[u];
            }
            NodeKind::Concat => {
                let ups = spec.upstream_of(i);
                let first = ups[0];
                for &u in &ups[1..] {
                    if produced[u] != produced[first] {
                        return Err(Error::Spec(format!(
                            "line {}: concat `{}` joins maps of different sparsity \
                             ({:?} from `{}` vs {:?} from `{}`)",
                            node.line,
                            node.name,
                            produced[first].0,
                            spec.nodes()[first].name,
                            produced[u].0,
                            spec.nodes()[u].name
                        )));
                    }
                    if shrink[u] != shrink[first] {
                        return Err(Error::Spec(format!(
                            "line {}: concat `{}` joins maps of different field-of-view \
                             offsets ({:?} from `{}` vs {:?} from `{}`)",
                            node.line,
                            node.name,
                            shrink[first],
                            spec.nodes()[first].name,
                            shrink[u],
                            spec.nodes()[u].name
                        )));
                    }
                }
                applied[i] = produced[first];
                produced[i] = produced[first];
                shrink[i] = shrink[first];
            }
        }
    }
    Ok(SparsityPlan { applied, produced, shrink })
}

/// Field of view per axis: the input extent influencing one output pixel,
/// `f = 1 + sum over filtering nodes of (extent - 1) * applied sparsity`.
/// Output dims of a forward pass are `input dims - fov + 1`.
pub fn field_of_view(spec: &NetworkSpec) -> Result<Dims> {
    let plan = infer_plan(spec)?;
    let s = plan.shrink[spec.output_index()];
    Ok([s[0] + 1, s[1] + 1, s[2] + 1])
}

/// Total trainable parameters: per conv node,
/// `out_maps * (in_maps * kx*ky*kz + 1)`.
pub fn param_count(spec: &NetworkSpec) -> usize {
    spec.nodes()
        .iter()
        .enumerate()
        .map(|(i, n)| match &n.kind {
            NodeKind::Conv { shape, out_maps } => {
                let in_maps = spec.channels(spec.upstream_of(i)[0]);
                out_maps * (in_maps * shape[0] * shape[1] * shape[2] + 1)
            }
            _ => 0,
        })
        .sum()
}

/// Weights, biases, and momentum buffers of one conv node. Weight taps are
/// laid out `[out_map][in_map][tap]` with the tap index x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub kshape: Dims,
    pub in_maps: usize,
    pub out_maps: usize,
    pub w: Vec<f32>,
    pub b: Vec<f32>,
    pub vw: Vec<f32>,
    pub vb: Vec<f32>,
}

impl ConvParams {
    pub fn zeros(kshape: Dims, in_maps: usize, out_maps: usize) -> Self {
        let taps = kshape[0] * kshape[1] * kshape[2];
        ConvParams {
            kshape,
            in_maps,
            out_maps,
            w: vec![0.0; out_maps * in_maps * taps],
            b: vec![0.0; out_maps],
            vw: vec![0.0; out_maps * in_maps * taps],
            vb: vec![0.0; out_maps],
        }
    }

    pub fn taps_per_kernel(&self) -> usize {
        self.kshape[0] * self.kshape[1] * self.kshape[2]
    }

    /// Taps of the kernel mapping input channel `i` to output channel `o`.
    pub fn kernel(&self, o: usize, i: usize) -> &[f32] {
        let t = self.taps_per_kernel();
        &self.w[t * (i + self.in_maps * o)..][..t]
    }

    pub fn kernel_mut(&mut self, o: usize, i: usize) -> &mut [f32] {
        let t = self.taps_per_kernel();
        &mut self.w[t * (i + self.in_maps * o)..][..t]
    }
}

/// Parameter state for a whole network: one entry per node, `Some` for conv
/// nodes, aligned with `spec.nodes()` order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamState {
    pub nodes: Vec<Option<ConvParams>>,
}

impl ParamState {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let nodes = spec
            .nodes()
            .iter()
            .enumerate()
            .map(|(i, n)| match &n.kind {
                NodeKind::Conv { shape, out_maps } => Some(ConvParams::zeros(
                    *shape,
                    spec.channels(spec.upstream_of(i)[0]),
                    *out_maps,
                )),
                _ => None,
            })
            .collect();
        ParamState { nodes }
    }

    pub fn get(&self, idx: usize) -> Option<&ConvParams> {
        self.nodes[idx].as_ref()
    }

    /// Total scalar parameter count (weights + biases), excluding momentum.
    pub fn total_params(&self) -> usize {
        self.nodes
            .iter()
            .flatten()
            .map(|p| p.w.len() + p.b.len())
            .sum()
    }

    /// Largest absolute difference over all parameters and momenta, for
    /// round-trip checks.
    pub fn max_abs_diff(&self, other: &ParamState) -> Option<f32> {
        if self.nodes.len() != other.nodes.len() {
            return None;
        }
        let mut m = 0.0f32;
        for (a, b) in self.nodes.iter().zip(&other.nodes) {
            match (a, b) {
                (None, None) => {}
                (Some(a), Some(b)) => {
                    if a.w.len() != b.w.len() || a.b.len() != b.b.len() {
                        return None;
                    }
                    for (x, y) in a.w.iter().zip(&b.w).chain(a.b.iter().zip(&b.b)) {
                        m = m.max((x - y).abs());
                    }
                    for (x, y) in a.vw.iter().zip(&b.vw).chain(a.vb.iter().zip(&b.vb)) {
                        m = m.max((x - y).abs());
                    }
                }
                _ => return None,
            }
        }
        Some(m)
    }
}

/// Draws initial weights uniformly from `±sqrt(3 / fan_in)` per conv node
/// (`fan_in = in_maps * kx*ky*kz`, giving weight variance `1/fan_in`), biases
/// and momenta zero. Deterministic in `seed`; nodes fill in spec order.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> ParamState {
    let mut state = ParamState::zeros(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in state.nodes.iter_mut().flatten() {
        let fan_in = p.in_maps * p.taps_per_kernel();
        let bound = (3.0 / fan_in as f64).sqrt() as f32;
        for w in p.w.iter_mut() {
            *w = rng.random_range(-bound..bound);
        }
    }
    state
}
