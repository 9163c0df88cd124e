//! Dense sub-network extraction from a pruning state.

use std::collections::HashMap;

use super::{InstrumentedGraph, PrimOp, Src};
use crate::error::{Error, Result};
use crate::graph::spec::{GraphSpec, NodeSpec, OpSpec, INPUT};
use crate::rho::PruningSiteState;
use crate::tensor::Tensor;

/// Channels kept per site and the smaller network they define.
#[derive(Clone, Debug)]
pub struct PrunedConfiguration {
    pub site_names: Vec<String>,
    pub masks: Vec<Vec<bool>>,
    /// Gate-free spec with reduced layer widths.
    pub spec: GraphSpec,
    /// Sliced parameters by name.
    pub params: Vec<(String, Tensor)>,
}

impl PrunedConfiguration {
    pub fn kept(&self) -> Vec<usize> {
        self.masks.iter().map(|m| m.iter().filter(|&&k| k).count()).collect()
    }

    /// Builds the extracted graph and orders the sliced parameters for it.
    pub fn network(&self) -> Result<(InstrumentedGraph, Vec<Tensor>)> {
        let graph = InstrumentedGraph::build(&self.spec)?;
        let by_name: HashMap<&str, &Tensor> = self.params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let params = graph
            .params()
            .iter()
            .map(|p| {
                by_name
                    .get(p.name.as_str())
                    .map(|t| (*t).clone())
                    .ok_or_else(|| Error::Graph(format!("extracted parameter `{}` missing", p.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        graph.check_params(&params)?;
        Ok((graph, params))
    }
}

/// Rows `rows` and columns `cols` of a tensor viewed as `(d0, d1, rest)`.
fn select2(t: &Tensor, rows: &[usize], cols: Option<&[usize]>) -> Tensor {
    let shape = t.shape();
    let d1 = shape.get(1).copied().unwrap_or(1);
    let rest: usize = shape.iter().skip(2).product();
    let all: Vec<usize> = (0..d1).collect();
    let cols = cols.unwrap_or(&all);
    let mut data = Vec::with_capacity(rows.len() * cols.len() * rest);
    for &r in rows {
        for &c in cols {
            let at = (r * d1 + c) * rest;
            data.extend_from_slice(&t.data()[at..at + rest]);
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[0] = rows.len();
    if shape.len() > 1 {
        new_shape[1] = cols.len();
    }
    Tensor::new(new_shape, data).expect("selection sizes agree")
}

/// Removes every channel whose gate parameter is `rho <= 0`, and all gates.
///
/// The extracted network computes the same function as `graph` under
/// [`super::Gating::Eval`] with the same sites.
pub fn extract(graph: &InstrumentedGraph, params: &[Tensor], sites: &[PruningSiteState]) -> Result<PrunedConfiguration> {
    graph.check_params(params)?;
    if sites.len() != graph.sites.len() {
        return Err(crate::error::mismatch("extract", "site count", graph.sites.len(), sites.len()));
    }
    for (info, s) in graph.sites.iter().zip(sites) {
        if s.channels() != info.channels {
            return Err(crate::error::mismatch(
                "extract",
                format!("channels of site `{}`", info.name),
                info.channels,
                s.channels(),
            ));
        }
        if s.kept() == 0 {
            return Err(Error::Disconnected { site: info.name.clone() });
        }
    }
    let masks: Vec<Vec<bool>> = sites.iter().map(|s| s.keep_mask()).collect();
    let keep = |id: usize| graph.bindings[id].map_or(true, |(s, c)| masks[s][c]);
    let kept_of = |pos: &[super::Pos]| -> Vec<usize> { (0..pos.len()).filter(|&k| keep(pos[k].id)).collect() };

    let input_kept = kept_of(&graph.input_positions);
    if input_kept.len() != graph.input_positions.len() {
        return Err(Error::Graph("gates on the graph input cannot be extracted".into()));
    }
    let kept: Vec<Vec<usize>> = graph.positions.iter().map(|p| kept_of(p)).collect();
    let src_kept = |s: Src| match s {
        Src::Input => &input_kept,
        Src::Node(i) => &kept[i],
    };

    // Gates vanish: their consumers read the gate's input directly.
    let mut alias: Vec<String> = Vec::with_capacity(graph.nodes.len());
    let resolve = |alias: &[String], s: Src| match s {
        Src::Input => INPUT.to_string(),
        Src::Node(i) => alias[i].clone(),
    };

    let mut nodes = Vec::new();
    let mut out_params = Vec::new();
    for (i, n) in graph.nodes.iter().enumerate() {
        if kept[i].is_empty() {
            let site = graph.positions[i]
                .iter()
                .find_map(|p| graph.bindings[p.id])
                .map(|(s, _)| graph.sites[s].name.clone())
                .unwrap_or_else(|| n.name.clone());
            return Err(Error::Disconnected { site });
        }
        if let PrimOp::Gate { .. } = n.op {
            let a = resolve(&alias, n.inputs[0]);
            alias.push(a);
            continue;
        }
        alias.push(n.name.clone());
        let op = match &n.op {
            PrimOp::Conv {
                weight,
                bias,
                stride,
                pad,
            } => {
                let cols = src_kept(n.inputs[0]);
                out_params.push((graph.params[*weight].name.clone(), select2(&params[*weight], &kept[i], Some(cols))));
                out_params.push((graph.params[*bias].name.clone(), select2(&params[*bias], &kept[i], None)));
                OpSpec::Conv {
                    out_channels: kept[i].len(),
                    kernel: graph.params[*weight].shape[2],
                    stride: *stride,
                    pad: *pad,
                    groups: 1,
                }
            }
            PrimOp::Dense { weight, bias } => {
                let cols = src_kept(n.inputs[0]);
                out_params.push((graph.params[*weight].name.clone(), select2(&params[*weight], &kept[i], Some(cols))));
                out_params.push((graph.params[*bias].name.clone(), select2(&params[*bias], &kept[i], None)));
                OpSpec::Dense {
                    out_features: kept[i].len(),
                }
            }
            PrimOp::Slice { start, end } => {
                let before = src_kept(n.inputs[0]);
                let new_start = before.iter().filter(|&&k| k < *start).count();
                let new_end = new_start + before.iter().filter(|&&k| k >= *start && k < *end).count();
                OpSpec::Slice {
                    start: new_start,
                    end: new_end,
                }
            }
            PrimOp::MaxPool { kernel, stride } => OpSpec::MaxPool {
                kernel: *kernel,
                stride: Some(*stride),
            },
            PrimOp::Relu => OpSpec::Relu,
            PrimOp::Flatten => OpSpec::Flatten,
            PrimOp::Concat => OpSpec::Concat,
            PrimOp::Gate { .. } => unreachable!("handled above"),
        };
        nodes.push(NodeSpec {
            name: n.name.clone(),
            inputs: n.inputs.iter().map(|&s| resolve(&alias, s)).collect(),
            op,
        });
    }
    Ok(PrunedConfiguration {
        site_names: graph.sites.iter().map(|s| s.name.clone()).collect(),
        masks,
        spec: GraphSpec {
            input: graph.spec.input.clone(),
            nodes,
            output: Some(alias[graph.output].clone()),
        },
        params: out_params,
    })
}

/// [`extract`] followed by [`PrunedConfiguration::network`].
pub fn extracted_network(
    graph: &InstrumentedGraph,
    params: &[Tensor],
    sites: &[PruningSiteState],
) -> Result<(PrunedConfiguration, InstrumentedGraph, Vec<Tensor>)> {
    let cfg = extract(graph, params, sites)?;
    let (g, p) = cfg.network()?;
    Ok((cfg, g, p))
}
