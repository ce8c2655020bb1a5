//! Edge-level reference implementation used to check the relevance engine.
//!
//! A network is exploded into an explicit weighted DAG, one vertex per neuron
//! and one edge per connection, then relevance is pushed back along the edges
//! one at a time exactly as the propagation rules are written, with no
//! vectorisation or algebraic rearrangement. Slow on purpose; meant for
//! networks with a few thousand neurons at most.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::model::{ForwardTrace, LayerSpec, Network};
use crate::tensor::{Padding, WindowGeometry};

pub const DEFAULT_VERTEX_CAP: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregate {
    /// `b + Σ w x`
    WeightedSum,
    /// `max x` over predecessors; edge weights only carry the argmax mask.
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vertex {
    pub layer: usize,
    pub bias: f64,
    pub activation: Activation,
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct EdgeGraph {
    vertices: Vec<Vertex>,
    edges: Vec<Edge>,
    sources: Vec<usize>,
    sinks: Vec<usize>,
    incoming: Vec<Vec<usize>>,
    outgoing: Vec<Vec<usize>>,
    topo: Vec<usize>,
}

impl EdgeGraph {
    /// Checks that edge endpoints exist, the graph is acyclic, sources have no
    /// incoming edges and every vertex lies on at least one edge.
    pub fn new(vertices: Vec<Vertex>, edges: Vec<Edge>, sources: Vec<usize>, sinks: Vec<usize>) -> Result<Self> {
        let n = vertices.len();
        let mut incoming = vec![Vec::new(); n];
        let mut outgoing = vec![Vec::new(); n];
        for (id, e) in edges.iter().enumerate() {
            if e.from >= n || e.to >= n {
                return Err(Error::InvalidGraph(format!("edge {id} references a missing vertex")));
            }
            outgoing[e.from].push(id);
            incoming[e.to].push(id);
        }
        if let Some(v) = (0..n).find(|&v| incoming[v].is_empty() && outgoing[v].is_empty()) {
            return Err(Error::InvalidGraph(format!("vertex {v} lies on no edge")));
        }
        if let Some(&s) = sources.iter().find(|&&s| s >= n || !incoming[s].is_empty()) {
            return Err(Error::InvalidGraph(format!("source {s} is missing or has incoming edges")));
        }
        if let Some(&s) = sinks.iter().find(|&&s| s >= n) {
            return Err(Error::InvalidGraph(format!("sink {s} is missing")));
        }

        let mut indegree: Vec<usize> = incoming.iter().map(Vec::len).collect();
        let mut queue: VecDeque<usize> = (0..n).filter(|&v| indegree[v] == 0).collect();
        let mut topo = Vec::with_capacity(n);
        while let Some(v) = queue.pop_front() {
            topo.push(v);
            for &e in &outgoing[v] {
                let to = edges[e].to;
                indegree[to] -= 1;
                if indegree[to] == 0 {
                    queue.push_back(to);
                }
            }
        }
        if topo.len() != n {
            return Err(Error::Cyclic);
        }
        Ok(Self {
            vertices,
            edges,
            sources,
            sinks,
            incoming,
            outgoing,
            topo,
        })
    }

    pub fn vertices(&self) -> &[Vertex] {
        &self.vertices
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn sources(&self) -> &[usize] {
        &self.sources
    }

    pub fn sinks(&self) -> &[usize] {
        &self.sinks
    }

    /// Evaluates every vertex output in topological order.
    pub fn evaluate(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.sources.len() {
            return Err(Error::Dimension(format!(
                "{} source values for {} sources",
                input.len(),
                self.sources.len()
            )));
        }
        let mut x = vec![0.0; self.vertices.len()];
        for (&s, &v) in self.sources.iter().zip(input) {
            x[s] = v;
        }
        for &v in &self.topo {
            if self.incoming[v].is_empty() {
                continue;
            }
            let vert = &self.vertices[v];
            let pre = match vert.aggregate {
                Aggregate::WeightedSum => {
                    let mut acc = vert.bias;
                    for &e in &self.incoming[v] {
                        acc += self.edges[e].weight * x[self.edges[e].from];
                    }
                    acc
                }
                Aggregate::Max => self.incoming[v]
                    .iter()
                    .map(|&e| x[self.edges[e].from])
                    .fold(f64::NEG_INFINITY, f64::max),
            };
            x[v] = match vert.activation {
                Activation::Identity => pre,
                Activation::Relu => pre.max(0.0),
            };
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleRule {
    Lrp0,
    Rlrp,
}

/// Relevance of every source vertex for sink `k`, seeded with that sink's output.
///
/// Relative LRP: `z_ij = w_ij x_i z_j / M_j` with `M_j` the in-degree of `j`, then
/// `z_i = Card(J_i) / N_{l+1} Σ_j z_ij` with `J_i` the successors of `i` and
/// `N_{l+1}` the size of their layer. LRP-0: `z_ij = w_ij x_i z_j / Σ_k w_kj x_k`.
pub fn oracle_attribute(g: &EdgeGraph, activations: &[f64], k: usize, rule: OracleRule) -> Result<Vec<f64>> {
    if activations.len() != g.vertices.len() {
        return Err(Error::Dimension("activation count does not match vertex count".into()));
    }
    let &sink = g
        .sinks
        .get(k)
        .ok_or_else(|| Error::Domain(format!("sink {k} out of range")))?;
    let mut layer_size = Vec::new();
    for v in &g.vertices {
        if v.layer >= layer_size.len() {
            layer_size.resize(v.layer + 1, 0usize);
        }
        layer_size[v.layer] += 1;
    }

    let mut z = vec![0.0; g.vertices.len()];
    z[sink] = activations[sink];
    for &i in g.topo.iter().rev() {
        let out = &g.outgoing[i];
        if out.is_empty() {
            continue;
        }
        match rule {
            OracleRule::Rlrp => {
                let next_layer = g.vertices[g.edges[out[0]].to].layer;
                let mut acc = 0.0;
                for &e in out {
                    let edge = g.edges[e];
                    if g.vertices[edge.to].layer != next_layer {
                        return Err(Error::InvalidGraph(format!("vertex {i} feeds more than one layer")));
                    }
                    let m = g.incoming[edge.to].len() as f64;
                    acc += (1.0 / m) * edge.weight * activations[i] * z[edge.to];
                }
                let card = out.len() as f64;
                z[i] = card / layer_size[next_layer] as f64 * acc;
            }
            OracleRule::Lrp0 => {
                let mut acc = 0.0;
                for &e in out {
                    let edge = g.edges[e];
                    let j = edge.to;
                    if z[j] == 0.0 {
                        continue;
                    }
                    let mut denom = 0.0;
                    for &f in &g.incoming[j] {
                        denom += g.edges[f].weight * activations[g.edges[f].from];
                    }
                    if denom == 0.0 {
                        return Err(Error::GuardedDenominator {
                            location: format!("oracle vertex {j}"),
                            rule: "lrp0".into(),
                            neuron: j,
                            value: denom,
                            guard: 0.0,
                        });
                    }
                    acc += edge.weight * activations[i] / denom * z[j];
                }
                z[i] = acc;
            }
        }
    }
    Ok(g.sources.iter().map(|&s| z[s]).collect())
}

/// Explodes `net` with the default vertex cap.
pub fn explode(net: &Network, trace: &ForwardTrace) -> Result<EdgeGraph> {
    explode_with_cap(net, trace, DEFAULT_VERTEX_CAP)
}

/// Turns every connection of `net` into an explicit edge. Max-pool edges take
/// their 0/1 argmax mask from `trace`. Residual blocks are not supported.
pub fn explode_with_cap(net: &Network, trace: &ForwardTrace, cap: usize) -> Result<EdgeGraph> {
    let mut count: usize = net.input_shape().iter().product();
    for (i, layer) in net.layers().iter().enumerate() {
        match layer {
            LayerSpec::Dense(_) | LayerSpec::Conv2D(_) | LayerSpec::MaxPool2D(_) | LayerSpec::AvgPool2D(_) => {
                count += trace.output_of(i).len();
            }
            LayerSpec::Residual(_) => {
                return Err(Error::Unsupported("the edge oracle does not model residual blocks".into()))
            }
            LayerSpec::Flatten | LayerSpec::ReLU => {}
        }
    }
    if count > cap {
        return Err(Error::SizeCap { count, cap });
    }

    let mut vertices = Vec::with_capacity(count);
    let mut edges = Vec::new();
    let n_in: usize = net.input_shape().iter().product();
    let sources: Vec<usize> = (0..n_in).collect();
    for _ in 0..n_in {
        vertices.push(Vertex {
            layer: 0,
            bias: 0.0,
            activation: Activation::Identity,
            aggregate: Aggregate::WeightedSum,
        });
    }
    let mut current: Vec<usize> = sources.clone();
    let mut layer_tag = 0;

    for (li, layer) in net.layers().iter().enumerate() {
        let in_shape = trace.input(li).shape().to_vec();
        let out_len = trace.output_of(li).len();
        let mut new_layer = |aggregate: Aggregate, bias: &dyn Fn(usize) -> f64, vertices: &mut Vec<Vertex>| {
            layer_tag += 1;
            let first = vertices.len();
            for j in 0..out_len {
                vertices.push(Vertex {
                    layer: layer_tag,
                    bias: bias(j),
                    activation: Activation::Identity,
                    aggregate,
                });
            }
            (first..first + out_len).collect::<Vec<_>>()
        };
        match layer {
            LayerSpec::Dense(d) => {
                let n_inputs = d.weights.shape()[1];
                let next = new_layer(Aggregate::WeightedSum, &|j| d.bias.data()[j], &mut vertices);
                for (j, &to) in next.iter().enumerate() {
                    for (i, &from) in current.iter().enumerate() {
                        edges.push(Edge {
                            from,
                            to,
                            weight: d.weights.data()[j * n_inputs + i],
                        });
                    }
                }
                current = next;
            }
            LayerSpec::Conv2D(c) => {
                let &[h, w, cin] = in_shape.as_slice() else { unreachable!() };
                let &[cout, kh, kw, _] = c.kernel.shape() else { unreachable!() };
                let g = WindowGeometry::new((h, w), (kh, kw), c.strides, c.padding)?;
                let next = new_layer(Aggregate::WeightedSum, &|j| c.bias.data()[j % cout], &mut vertices);
                for oh in 0..g.out_h {
                    for ow in 0..g.out_w {
                        for co in 0..cout {
                            let to = next[(oh * g.out_w + ow) * cout + co];
                            for a in 0..kh {
                                for b in 0..kw {
                                    let Some((ih, iw)) = g.source(oh, ow, a, b) else { continue };
                                    for ci in 0..cin {
                                        edges.push(Edge {
                                            from: current[(ih * w + iw) * cin + ci],
                                            to,
                                            weight: c.kernel.data()[((co * kh + a) * kw + b) * cin + ci],
                                        });
                                    }
                                }
                            }
                        }
                    }
                }
                current = next;
            }
            LayerSpec::MaxPool2D(p) | LayerSpec::AvgPool2D(p) => {
                let is_max = matches!(layer, LayerSpec::MaxPool2D(_));
                let &[h, w, ch] = in_shape.as_slice() else { unreachable!() };
                let g = WindowGeometry::new((h, w), p.pool, p.strides, Padding::Valid)?;
                let x = trace.input(li).data();
                let agg = if is_max { Aggregate::Max } else { Aggregate::WeightedSum };
                let next = new_layer(agg, &|_| 0.0, &mut vertices);
                let area = (p.pool.0 * p.pool.1) as f64;
                for oh in 0..g.out_h {
                    for ow in 0..g.out_w {
                        for c in 0..ch {
                            let to = next[(oh * g.out_w + ow) * ch + c];
                            let taps: Vec<usize> = (0..g.k_h)
                                .flat_map(|a| (0..g.k_w).map(move |b| (a, b)))
                                .map(|(a, b)| ((oh * g.s_h + a) * w + ow * g.s_w + b) * ch + c)
                                .collect();
                            let max = taps.iter().map(|&t| x[t]).fold(f64::NEG_INFINITY, f64::max);
                            for &t in &taps {
                                let weight = if !is_max {
                                    1.0 / area
                                } else if x[t] == max {
                                    1.0
                                } else {
                                    0.0
                                };
                                edges.push(Edge {
                                    from: current[t],
                                    to,
                                    weight,
                                });
                            }
                        }
                    }
                }
                current = next;
            }
            LayerSpec::Flatten => {}
            LayerSpec::ReLU => {
                if layer_tag == 0 {
                    return Err(Error::Unsupported("ReLU applied directly to the network input".into()));
                }
                for &v in &current {
                    vertices[v].activation = Activation::Relu;
                }
            }
            LayerSpec::Residual(_) => unreachable!(),
        }
    }
    EdgeGraph::new(vertices, edges, sources, current)
}
