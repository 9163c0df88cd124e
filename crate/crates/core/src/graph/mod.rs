//! Network graphs instrumented with pruning gates.
//!
//! Building a graph does three things beyond shape inference:
//!
//! * grouped convolutions are rewritten as slice / conv / concat chains,
//! * every channel position of every tensor is traced back to the layer
//!   output channel that produced it, and gates bind those channels to
//!   site channels,
//! * each conv/dense layer is checked to see its bound channels only
//!   through their gate, which is what makes extraction exact.

mod extract;
pub mod spec;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

pub use extract::{extract, extracted_network, PrunedConfiguration};
pub use spec::{GraphSpec, NodeSpec, OpSpec, INPUT};

use crate::error::{Error, Result};
use crate::gate::{GateConfig, GateSample};
use crate::real::Real;
use crate::resource::{Binding, PolynomialBuilder, ResourceKind, ResourcePolynomial};
use crate::rho::PruningSiteState;
use crate::rng::{Domain, StreamKey};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Src {
    Input,
    Node(usize),
}

#[derive(Clone, Debug, PartialEq)]
enum PrimOp {
    Conv { weight: usize, bias: usize, stride: usize, pad: usize },
    Dense { weight: usize, bias: usize },
    Relu,
    MaxPool { kernel: usize, stride: usize },
    Flatten,
    Gate { site: usize },
    Concat,
    Slice { start: usize, end: usize },
}

#[derive(Clone, Debug)]
struct PrimNode {
    name: String,
    op: PrimOp,
    inputs: Vec<Src>,
    /// Per-sample output shape.
    shape: Vec<usize>,
}

/// A channel position: the producing channel and whether it passed a gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Pos {
    id: usize,
    gated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SiteInfo {
    pub name: String,
    pub channels: usize,
}

/// Per-layer MAC count of a graph, ignoring gates.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMacs {
    pub layer: String,
    pub macs: u64,
}

#[derive(Clone, Debug)]
pub struct InstrumentedGraph {
    spec: GraphSpec,
    nodes: Vec<PrimNode>,
    output: usize,
    params: Vec<ParamInfo>,
    sites: Vec<SiteInfo>,
    positions: Vec<Vec<Pos>>,
    input_positions: Vec<Pos>,
    bindings: Vec<Binding>,
}

/// How gates behave during a forward pass.
#[derive(Clone, Copy)]
pub enum Gating<'a> {
    /// Gates are identities.
    Open,
    /// Stochastic factors from counter-keyed noise.
    Train {
        sites: &'a [PruningSiteState],
        cfg: &'a GateConfig,
        key: &'a StreamKey,
        iteration: u64,
    },
    /// Deterministic keep-mask `rho > 0`.
    Eval { sites: &'a [PruningSiteState] },
    /// Caller-provided factors, one sample per site.
    Fixed { samples: &'a [GateSample] },
}

/// Handles into the tape after [`InstrumentedGraph::forward`].
pub struct ForwardPass {
    pub output: Var,
    pub params: Vec<Var>,
    /// `(site index, gate node)` for every gate evaluated.
    pub gates: Vec<(usize, Var)>,
}

fn spec_inputs(spec: &GraphSpec) -> Vec<Vec<String>> {
    spec.nodes
        .iter()
        .enumerate()
        .map(|(i, n)| {
            if !n.inputs.is_empty() {
                n.inputs.clone()
            } else if i == 0 {
                vec![INPUT.to_string()]
            } else {
                vec![spec.nodes[i - 1].name.clone()]
            }
        })
        .collect()
}

/// Stable topological order of the graph description's nodes.
fn topo_order(spec: &GraphSpec, inputs: &[Vec<String>]) -> Result<Vec<usize>> {
    let mut index = HashMap::new();
    for (i, n) in spec.nodes.iter().enumerate() {
        if n.name == INPUT {
            return Err(Error::Graph(format!("node name `{INPUT}` is reserved")));
        }
        if index.insert(n.name.as_str(), i).is_some() {
            return Err(Error::Graph(format!("duplicate node name `{}`", n.name)));
        }
    }
    let mut deps: Vec<Vec<usize>> = Vec::with_capacity(spec.nodes.len());
    for (i, ins) in inputs.iter().enumerate() {
        let mut d = Vec::new();
        for name in ins {
            if name == INPUT {
                continue;
            }
            let j = *index.get(name.as_str()).ok_or_else(|| {
                Error::Graph(format!("node `{}` references unknown input `{name}`", spec.nodes[i].name))
            })?;
            d.push(j);
        }
        deps.push(d);
    }
    let mut done = vec![false; spec.nodes.len()];
    let mut order = Vec::with_capacity(spec.nodes.len());
    while order.len() < spec.nodes.len() {
        let next = (0..spec.nodes.len()).find(|&i| !done[i] && deps[i].iter().all(|&j| done[j]));
        match next {
            Some(i) => {
                done[i] = true;
                order.push(i);
            }
            None => {
                let stuck: Vec<&str> = (0..spec.nodes.len())
                    .filter(|&i| !done[i])
                    .map(|i| spec.nodes[i].name.as_str())
                    .collect();
                return Err(Error::Graph(format!("cycle detected among {stuck:?}")));
            }
        }
    }
    Ok(order)
}

struct Builder {
    nodes: Vec<PrimNode>,
    positions: Vec<Vec<Pos>>,
    params: Vec<ParamInfo>,
    sites: Vec<SiteInfo>,
    bindings: Vec<Binding>,
    by_name: HashMap<String, Src>,
    input_shape: Vec<usize>,
    input_positions: Vec<Pos>,
}

impl Builder {
    fn shape_of(&self, s: Src) -> &[usize] {
        match s {
            Src::Input => &self.input_shape,
            Src::Node(i) => &self.nodes[i].shape,
        }
    }

    fn positions_of(&self, s: Src) -> &[Pos] {
        match s {
            Src::Input => &self.input_positions,
            Src::Node(i) => &self.positions[i],
        }
    }

    fn fresh(&mut self, n: usize) -> Vec<Pos> {
        let start = self.bindings.len();
        self.bindings.extend(std::iter::repeat(None).take(n));
        (start..start + n).map(|id| Pos { id, gated: false }).collect()
    }

    fn param(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> usize {
        self.params.push(ParamInfo { name, shape, fan_in });
        self.params.len() - 1
    }

    fn single(&self, name: &str, inputs: &[Src]) -> Result<Src> {
        match inputs {
            [s] => Ok(*s),
            _ => Err(Error::Graph(format!("node `{name}` takes exactly one input, got {}", inputs.len()))),
        }
    }

    fn push(&mut self, name: String, op: PrimOp, inputs: Vec<Src>, shape: Vec<usize>, pos: Vec<Pos>) -> Src {
        self.nodes.push(PrimNode {
            name: name.clone(),
            op,
            inputs,
            shape,
        });
        self.positions.push(pos);
        let s = Src::Node(self.nodes.len() - 1);
        self.by_name.insert(name, s);
        s
    }

    fn chw(&self, name: &str, src: Src) -> Result<(usize, usize, usize)> {
        match *self.shape_of(src) {
            [c, h, w] => Ok((c, h, w)),
            ref s => Err(Error::BadShape {
                op: "graph",
                shape: s.to_vec(),
                reason: format!("node `{name}` needs a (C, H, W) input"),
            }),
        }
    }

    fn conv(&mut self, name: String, src: Src, out_c: usize, kernel: usize, stride: usize, pad: usize) -> Result<Src> {
        let (c, h, w) = self.chw(&name, src)?;
        if out_c == 0 || kernel == 0 || stride == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel {
            return Err(Error::Graph(format!("conv `{name}`: invalid geometry for input {c}x{h}x{w}")));
        }
        let (oh, ow) = ((h + 2 * pad - kernel) / stride + 1, (w + 2 * pad - kernel) / stride + 1);
        let weight = self.param(format!("{name}.weight"), vec![out_c, c, kernel, kernel], c * kernel * kernel);
        let bias = self.param(format!("{name}.bias"), vec![out_c], c * kernel * kernel);
        let pos = self.fresh(out_c);
        Ok(self.push(
            name,
            PrimOp::Conv {
                weight,
                bias,
                stride,
                pad,
            },
            vec![src],
            vec![out_c, oh, ow],
            pos,
        ))
    }

    fn add(&mut self, node: &NodeSpec, inputs: Vec<Src>) -> Result<()> {
        let name = node.name.clone();
        match &node.op {
            OpSpec::Conv {
                out_channels,
                kernel,
                stride,
                pad,
                groups,
            } => {
                let src = self.single(&name, &inputs)?;
                let (c, _, _) = self.chw(&name, src)?;
                let g = *groups;
                if g <= 1 {
                    self.conv(name, src, *out_channels, *kernel, *stride, *pad)?;
                    return Ok(());
                }
                if c % g != 0 || out_channels % g != 0 {
                    return Err(Error::Graph(format!(
                        "conv `{name}`: {g} groups do not divide {c} input / {out_channels} output channels"
                    )));
                }
                let (ci, co) = (c / g, out_channels / g);
                let mut parts = Vec::with_capacity(g);
                for j in 0..g {
                    let sl = self.slice(format!("{name}.in{j}"), src, j * ci, (j + 1) * ci)?;
                    parts.push(self.conv(format!("{name}.g{j}"), sl, co, *kernel, *stride, *pad)?);
                }
                self.concat(name, parts)?;
            }
            OpSpec::Dense { out_features } => {
                let src = self.single(&name, &inputs)?;
                let i = match *self.shape_of(src) {
                    [f] => f,
                    ref s => {
                        return Err(Error::BadShape {
                            op: "graph",
                            shape: s.to_vec(),
                            reason: format!("dense `{name}` needs a flat input"),
                        })
                    }
                };
                let weight = self.param(format!("{name}.weight"), vec![*out_features, i], i);
                let bias = self.param(format!("{name}.bias"), vec![*out_features], i);
                let pos = self.fresh(*out_features);
                self.push(name, PrimOp::Dense { weight, bias }, vec![src], vec![*out_features], pos);
            }
            OpSpec::Relu => {
                let src = self.single(&name, &inputs)?;
                let (shape, pos) = (self.shape_of(src).to_vec(), self.positions_of(src).to_vec());
                self.push(name, PrimOp::Relu, vec![src], shape, pos);
            }
            OpSpec::MaxPool { kernel, stride } => {
                let src = self.single(&name, &inputs)?;
                let (c, h, w) = self.chw(&name, src)?;
                let s = stride.unwrap_or(*kernel);
                if *kernel == 0 || s == 0 || h < *kernel || w < *kernel {
                    return Err(Error::Graph(format!("max_pool `{name}`: kernel does not fit {h}x{w}")));
                }
                let pos = self.positions_of(src).to_vec();
                self.push(
                    name,
                    PrimOp::MaxPool { kernel: *kernel, stride: s },
                    vec![src],
                    vec![c, (h - kernel) / s + 1, (w - kernel) / s + 1],
                    pos,
                );
            }
            OpSpec::Flatten => {
                let src = self.single(&name, &inputs)?;
                let shape = self.shape_of(src).to_vec();
                let spatial: usize = shape.iter().skip(1).product();
                let pos: Vec<Pos> = self
                    .positions_of(src)
                    .iter()
                    .flat_map(|p| std::iter::repeat(*p).take(spatial))
                    .collect();
                self.push(name, PrimOp::Flatten, vec![src], vec![shape.iter().product()], pos);
            }
            OpSpec::Gate { site } => {
                let src = self.single(&name, &inputs)?;
                let shape = self.shape_of(src).to_vec();
                let mut pos = self.positions_of(src).to_vec();
                let channels = pos.len();
                let mut seen = std::collections::HashSet::new();
                if !pos.iter().all(|p| seen.insert(p.id)) {
                    return Err(Error::Graph(format!(
                        "gate `{name}` must sit on a channel dimension; its input repeats channels (flattened?)"
                    )));
                }
                let site_idx = match self.sites.iter().position(|s| &s.name == site) {
                    Some(i) if self.sites[i].channels != channels => {
                        return Err(Error::Graph(format!(
                            "site `{site}` shared by gates with {} and {channels} channels",
                            self.sites[i].channels
                        )))
                    }
                    Some(i) => i,
                    None => {
                        self.sites.push(SiteInfo {
                            name: site.clone(),
                            channels,
                        });
                        self.sites.len() - 1
                    }
                };
                for (c, p) in pos.iter_mut().enumerate() {
                    match self.bindings[p.id] {
                        Some(b) if b != (site_idx, c) => {
                            return Err(Error::Graph(format!(
                                "gate `{name}`: channel already claimed by site `{}`",
                                self.sites[b.0].name
                            )))
                        }
                        _ => self.bindings[p.id] = Some((site_idx, c)),
                    }
                    p.gated = true;
                }
                self.push(name, PrimOp::Gate { site: site_idx }, vec![src], shape, pos);
            }
            OpSpec::Concat => {
                self.concat(name, inputs)?;
            }
            OpSpec::Slice { start, end } => {
                let src = self.single(&name, &inputs)?;
                self.slice(name, src, *start, *end)?;
            }
        }
        Ok(())
    }

    fn slice(&mut self, name: String, src: Src, start: usize, end: usize) -> Result<Src> {
        let mut shape = self.shape_of(src).to_vec();
        if start >= end || end > shape[0] {
            return Err(Error::Graph(format!("slice `{name}`: range {start}..{end} outside {} channels", shape[0])));
        }
        shape[0] = end - start;
        let pos = self.positions_of(src)[start..end].to_vec();
        Ok(self.push(name, PrimOp::Slice { start, end }, vec![src], shape, pos))
    }

    fn concat(&mut self, name: String, inputs: Vec<Src>) -> Result<Src> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Graph(format!("concat `{name}` has no inputs")))?;
        let mut shape = self.shape_of(first).to_vec();
        let mut pos = Vec::new();
        let mut channels = 0;
        for &s in &inputs {
            let sh = self.shape_of(s);
            if sh.len() != shape.len() || sh[1..] != shape[1..] {
                return Err(Error::Graph(format!("concat `{name}`: {sh:?} incompatible with {shape:?}")));
            }
            channels += sh[0];
            pos.extend_from_slice(self.positions_of(s));
        }
        shape[0] = channels;
        Ok(self.push(name, PrimOp::Concat, inputs, shape, pos))
    }
}

impl InstrumentedGraph {
    pub fn build(spec: &GraphSpec) -> Result<Self> {
        if spec.input.is_empty() || spec.input.iter().any(|&d| d == 0) {
            return Err(Error::Graph(format!("invalid input shape {:?}", spec.input)));
        }
        if spec.nodes.is_empty() {
            return Err(Error::Graph("graph has no nodes".into()));
        }
        let inputs = spec_inputs(spec);
        let order = topo_order(spec, &inputs)?;
        let mut b = Builder {
            nodes: Vec::new(),
            positions: Vec::new(),
            params: Vec::new(),
            sites: Vec::new(),
            bindings: Vec::new(),
            by_name: HashMap::new(),
            input_shape: spec.input.clone(),
            input_positions: Vec::new(),
        };
        b.input_positions = b.fresh(spec.input[0]);
        b.by_name.insert(INPUT.to_string(), Src::Input);
        for &i in &order {
            let srcs = inputs[i].iter().map(|n| b.by_name[n.as_str()]).collect();
            b.add(&spec.nodes[i], srcs)?;
        }
        let out_name = spec.output.clone().unwrap_or_else(|| spec.nodes.last().unwrap().name.clone());
        let output = match b.by_name.get(&out_name) {
            Some(Src::Node(i)) => *i,
            _ => return Err(Error::Graph(format!("unknown output node `{out_name}`"))),
        };
        if b.nodes[output].shape.len() != 1 {
            return Err(Error::Graph(format!(
                "output `{out_name}` must be flat (class scores), has shape {:?}",
                b.nodes[output].shape
            )));
        }
        let g = InstrumentedGraph {
            spec: primitive_spec(spec, &b.nodes, &b.params, &b.sites, out_name),
            nodes: b.nodes,
            output,
            params: b.params,
            sites: b.sites,
            positions: b.positions,
            input_positions: b.input_positions,
            bindings: b.bindings,
        };
        g.check_gated_consumers()?;
        Ok(g)
    }

    /// Every conv/dense input and the graph output must see bound channels
    /// only through their gate.
    fn check_gated_consumers(&self) -> Result<()> {
        let mut consumers: Vec<(&str, &[Pos])> = Vec::new();
        for n in &self.nodes {
            if matches!(n.op, PrimOp::Conv { .. } | PrimOp::Dense { .. }) {
                consumers.push((&n.name, self.src_positions(n.inputs[0])));
            }
        }
        consumers.push(("<output>", &self.positions[self.output]));
        for (name, pos) in consumers {
            for p in pos {
                if let Some((site, _)) = self.bindings[p.id] {
                    if !p.gated {
                        return Err(Error::Graph(format!(
                            "`{name}` reads channels of site `{}` without passing through its gate",
                            self.sites[site].name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn src_positions(&self, s: Src) -> &[Pos] {
        match s {
            Src::Input => &self.input_positions,
            Src::Node(i) => &self.positions[i],
        }
    }

    /// The graph in primitive form (grouped convs expanded).
    pub fn spec(&self) -> &GraphSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.spec.input
    }

    pub fn classes(&self) -> usize {
        self.nodes[self.output].shape[0]
    }

    pub fn params(&self) -> &[ParamInfo] {
        &self.params
    }

    pub fn sites(&self) -> &[SiteInfo] {
        &self.sites
    }

    pub fn site_index(&self, name: &str) -> Option<usize> {
        self.sites.iter().position(|s| s.name == name)
    }

    /// Fresh pruning state for every site, all channels open.
    pub fn open_sites(&self, rho_max: Real) -> Vec<PruningSiteState> {
        self.sites
            .iter()
            .map(|s| PruningSiteState::open(s.name.clone(), s.channels, rho_max))
            .collect()
    }

    /// He-normal weights and zero biases.
    pub fn init_params(&self, seed: u64) -> Vec<Tensor> {
        let key = StreamKey::new(seed);
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if p.name.ends_with(".bias") {
                    return Tensor::zeros(&p.shape);
                }
                let mut rng = key.stream(Domain::WeightInit, i as u64, 0);
                let std = (2.0 / p.fan_in.max(1) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                Tensor::from_fn(&p.shape, |_| normal.sample(&mut rng) as Real)
            })
            .collect()
    }

    /// Deterministic-from-seed parameter set, for tests with arbitrary graphs.
    pub fn random_params(&self, seed: u64) -> Vec<Tensor> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let u = rand_distr::Uniform::new(-0.5, 0.5);
        self.params
            .iter()
            .map(|p| Tensor::from_fn(&p.shape, |_| u.sample(&mut rng) as Real))
            .collect()
    }

    pub fn check_params(&self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(crate::error::mismatch("graph", "parameter count", self.params.len(), params.len()));
        }
        for (info, t) in self.params.iter().zip(params) {
            if info.shape != t.shape() {
                return Err(Error::BadShape {
                    op: "graph",
                    shape: t.shape().to_vec(),
                    reason: format!("parameter `{}` expects {:?}", info.name, info.shape),
                });
            }
        }
        Ok(())
    }

    /// Records the forward pass on `tape` and returns handles to its nodes.
    pub fn forward(&self, tape: &mut Tape, params: &[Tensor], input: Tensor, gating: Gating<'_>) -> Result<ForwardPass> {
        self.check_params(params)?;
        if input.ndim() < 1 || input.shape()[1..] != self.spec.input[..] {
            return Err(Error::BadShape {
                op: "graph",
                shape: input.shape().to_vec(),
                reason: format!("expected (N, {:?})", self.spec.input),
            });
        }
        let batch = input.batch();
        let pvars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let x = tape.leaf(input);
        let mut vals: Vec<Var> = Vec::with_capacity(self.nodes.len());
        let mut gates = Vec::new();
        for node in &self.nodes {
            let src = |k: usize| match node.inputs[k] {
                Src::Input => x,
                Src::Node(j) => vals[j],
            };
            let v = match &node.op {
                PrimOp::Conv {
                    weight,
                    bias,
                    stride,
                    pad,
                } => tape.conv2d(src(0), pvars[*weight], pvars[*bias], *stride, *pad)?,
                PrimOp::Dense { weight, bias } => tape.dense(src(0), pvars[*weight], pvars[*bias])?,
                PrimOp::Relu => tape.relu(src(0)),
                PrimOp::MaxPool { kernel, stride } => tape.maxpool2d(src(0), *kernel, *stride)?,
                PrimOp::Flatten => tape.flatten(src(0))?,
                PrimOp::Concat => {
                    let ins: Vec<Var> = (0..node.inputs.len()).map(src).collect();
                    tape.concat(&ins)?
                }
                PrimOp::Slice { start, end } => tape.slice_channels(src(0), *start, *end)?,
                PrimOp::Gate { site } => {
                    let sample = match gating {
                        Gating::Open => None,
                        Gating::Train {
                            sites,
                            cfg,
                            key,
                            iteration,
                        } => {
                            let rho = &sites[*site].rho;
                            let noise = key.gate_noise(iteration, *site, batch * rho.len());
                            Some(GateSample::from_noise(rho, batch, noise, cfg)?)
                        }
                        Gating::Eval { sites } => Some(GateSample::from_sign(&sites[*site].rho, batch)),
                        Gating::Fixed { samples } => Some(samples[*site].clone()),
                    };
                    match sample {
                        None => src(0),
                        Some(s) => {
                            let g = tape.gate(src(0), s)?;
                            gates.push((*site, g));
                            g
                        }
                    }
                }
            };
            vals.push(v);
        }
        Ok(ForwardPass {
            output: vals[self.output],
            params: pvars,
            gates,
        })
    }

    /// Class scores without recording backward caches.
    pub fn predict(&self, params: &[Tensor], input: Tensor, gating: Gating<'_>) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let fwd = self.forward(&mut tape, params, input, gating)?;
        Ok(tape.value(fwd.output).clone())
    }

    /// Resource polynomial over the sites' retention fractions.
    pub fn polynomial(&self, kind: ResourceKind) -> ResourcePolynomial {
        let names = self.sites.iter().map(|s| s.name.clone()).collect();
        let chans = self.sites.iter().map(|s| s.channels).collect();
        let mut b = PolynomialBuilder::new(kind, names, chans);
        let bind = |p: &[Pos]| p.iter().map(|p| self.bindings[p.id]).collect::<Vec<_>>();
        for (n, out_pos) in self.nodes.iter().zip(&self.positions) {
            let pair_cost = match (&n.op, kind) {
                (PrimOp::Conv { weight, .. }, ResourceKind::Macs) => {
                    let k = self.params[*weight].shape[2];
                    (k * k * n.shape[1] * n.shape[2]) as Real
                }
                (PrimOp::Conv { weight, .. }, ResourceKind::Weights) => {
                    let k = self.params[*weight].shape[2];
                    (k * k) as Real
                }
                (PrimOp::Dense { .. }, _) => 1.0,
                _ => continue,
            };
            let ins = bind(self.src_positions(n.inputs[0]));
            b.add_layer(&n.name, &ins, &bind(out_pos), pair_cost);
        }
        b.finish()
    }

    /// Direct per-layer MAC count with every gate open, from layer shapes.
    pub fn layer_macs(&self) -> Vec<LayerMacs> {
        self.nodes
            .iter()
            .filter_map(|n| {
                let macs = match n.op {
                    PrimOp::Conv { weight, .. } => {
                        let w = &self.params[weight].shape;
                        (w.iter().product::<usize>() * n.shape[1] * n.shape[2]) as u64
                    }
                    PrimOp::Dense { weight, .. } => self.params[weight].shape.iter().product::<usize>() as u64,
                    _ => return None,
                };
                Some(LayerMacs {
                    layer: n.name.clone(),
                    macs,
                })
            })
            .collect()
    }

    pub fn mac_count(&self) -> u64 {
        self.layer_macs().iter().map(|l| l.macs).sum()
    }
}

/// Spec of the expanded primitive graph, with explicit inputs.
fn primitive_spec(orig: &GraphSpec, nodes: &[PrimNode], params: &[ParamInfo], sites: &[SiteInfo], output: String) -> GraphSpec {
    let src_name = |s: &Src| match s {
        Src::Input => INPUT.to_string(),
        Src::Node(i) => nodes[*i].name.clone(),
    };
    let specs = nodes
        .iter()
        .map(|n| NodeSpec {
            name: n.name.clone(),
            inputs: n.inputs.iter().map(src_name).collect(),
            op: match &n.op {
                PrimOp::Conv {
                    weight, stride, pad, ..
                } => OpSpec::Conv {
                    out_channels: n.shape[0],
                    kernel: params[*weight].shape[2],
                    stride: *stride,
                    pad: *pad,
                    groups: 1,
                },
                PrimOp::Dense { .. } => OpSpec::Dense {
                    out_features: n.shape[0],
                },
                PrimOp::Relu => OpSpec::Relu,
                PrimOp::MaxPool { kernel, stride } => OpSpec::MaxPool {
                    kernel: *kernel,
                    stride: Some(*stride),
                },
                PrimOp::Flatten => OpSpec::Flatten,
                PrimOp::Gate { site } => OpSpec::Gate {
                    site: sites[*site].name.clone(),
                },
                PrimOp::Concat => OpSpec::Concat,
                PrimOp::Slice { start, end } => OpSpec::Slice {
                    start: *start,
                    end: *end,
                },
            },
        })
        .collect();
    GraphSpec {
        input: orig.input.clone(),
        nodes: specs,
        output: Some(output),
    }
}
