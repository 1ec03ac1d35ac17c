//! Networks as DAGs of continuous piecewise-affine layers.

pub(crate) mod eval;
mod layer;
mod state;

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use eval::{forward, record_states, FrozenMode};
pub use layer::{DropoutMode, LayerSpec};
pub use state::{FrozenState, NodeState};

/// Reserved identifier that refers to the network input in `inputs` lists.
pub const INPUT_ID: &str = "input";

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub layer: LayerSpec,
    pub inputs: Vec<String>,
}

impl Node {
    pub fn new(id: impl Into<String>, layer: LayerSpec, inputs: &[&str]) -> Self {
        Self {
            id: id.into(),
            layer,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Source {
    Input,
    Node(usize),
}

/// A validated network. Construction checks acyclicity, arity and shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    nodes: Vec<Node>,
    output: usize,
    sources: Vec<Vec<Source>>,
    order: Vec<usize>,
    shapes: Vec<Vec<usize>>,
}

impl Network {
    pub fn new(input_shape: Vec<usize>, nodes: Vec<Node>, output: &str) -> Result<Self> {
        crate::numerics::tensor::check_shape(&input_shape)?;
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            if node.id == INPUT_ID {
                return Err(Error::node(&node.id, "identifier is reserved for the network input"));
            }
            if index.insert(node.id.as_str(), i).is_some() {
                return Err(Error::node(&node.id, "duplicate node identifier"));
            }
        }
        let mut sources = Vec::with_capacity(nodes.len());
        for node in &nodes {
            if !node.layer.arity_ok(node.inputs.len()) {
                return Err(Error::node(
                    &node.id,
                    format!("{} layer cannot take {} input(s)", node.layer.type_name(), node.inputs.len()),
                ));
            }
            node.layer.validate_params().map_err(|m| Error::node(&node.id, m))?;
            let src = node
                .inputs
                .iter()
                .map(|name| {
                    if name == INPUT_ID {
                        Ok(Source::Input)
                    } else {
                        index
                            .get(name.as_str())
                            .map(|&j| Source::Node(j))
                            .ok_or_else(|| Error::node(&node.id, format!("unknown input `{name}`")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            sources.push(src);
        }
        let output = *index
            .get(output)
            .ok_or_else(|| Error::InvalidArgument(format!("output node `{output}` does not exist")))?;
        let order = topo_order(&nodes, &sources)?;

        let mut shapes: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
        for &i in &order {
            let ins: Vec<&[usize]> = sources[i]
                .iter()
                .map(|s| match *s {
                    Source::Input => input_shape.as_slice(),
                    Source::Node(j) => shapes[j].as_slice(),
                })
                .collect();
            shapes[i] = nodes[i]
                .layer
                .output_shape(&ins)
                .map_err(|m| Error::node(&nodes[i].id, m))?;
        }
        Ok(Self {
            input_shape,
            nodes,
            output,
            sources,
            order,
            shapes,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.shapes[self.output]
    }

    pub fn output_len(&self) -> usize {
        self.output_shape().iter().product()
    }

    pub fn output_id(&self) -> &str {
        &self.nodes[self.output].id
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub(crate) fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn shape_of(&self, id: &str) -> Option<&[usize]> {
        self.node_index(id).map(|i| self.shapes[i].as_slice())
    }

    /// Node ids in evaluation order.
    pub fn topological_order(&self) -> Vec<&str> {
        self.order.iter().map(|&i| self.nodes[i].id.as_str()).collect()
    }

    pub(crate) fn order(&self) -> &[usize] {
        &self.order
    }

    pub(crate) fn output_index(&self) -> usize {
        self.output
    }

    pub(crate) fn sources(&self, i: usize) -> &[Source] {
        &self.sources[i]
    }

    pub(crate) fn shape_at(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub(crate) fn source_shape(&self, s: Source) -> &[usize] {
        match s {
            Source::Input => &self.input_shape,
            Source::Node(j) => &self.shapes[j],
        }
    }

    /// Returns a copy with the weight parameter of `node_id` replaced.
    pub fn with_weights(&self, node_id: &str, weights: &Tensor) -> Result<Network> {
        let i = self
            .node_index(node_id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown node `{node_id}`")))?;
        let mut net = self.clone();
        net.nodes[i].layer = self.nodes[i].layer.with_weights(weights).map_err(|e| Error::node(node_id, e.to_string()))?;
        Ok(net)
    }

    /// Appends a node after construction, re-running validation.
    pub fn with_node(&self, node: Node, output: &str) -> Result<Network> {
        let mut nodes = self.nodes.clone();
        nodes.push(node);
        Network::new(self.input_shape.clone(), nodes, output)
    }

    pub(crate) fn check_input(&self, op: &'static str, t: &Tensor) -> Result<()> {
        if t.shape() != self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: t.shape().to_vec(),
                rhs: self.input_shape.clone(),
            });
        }
        Ok(())
    }

    pub(crate) fn check_output(&self, op: &'static str, t: &Tensor) -> Result<()> {
        if t.shape() != self.output_shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: t.shape().to_vec(),
                rhs: self.output_shape().to_vec(),
            });
        }
        Ok(())
    }
}

/// Output shape of every node, keyed by node id.
pub fn shape_infer(net: &Network) -> BTreeMap<String, Vec<usize>> {
    net.nodes
        .iter()
        .zip(&net.shapes)
        .map(|(n, s)| (n.id.clone(), s.clone()))
        .collect()
}

/// Kahn's algorithm; ties broken by declaration order so evaluation is reproducible.
fn topo_order(nodes: &[Node], sources: &[Vec<Source>]) -> Result<Vec<usize>> {
    let n = nodes.len();
    let mut indegree = vec![0usize; n];
    let mut users: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, src) in sources.iter().enumerate() {
        for s in src {
            if let Source::Node(j) = *s {
                indegree[i] += 1;
                users[j].push(i);
            }
        }
    }
    let mut ready: std::collections::BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &u in &users[i] {
            indegree[u] -= 1;
            if indegree[u] == 0 {
                ready.insert(u);
            }
        }
    }
    if order.len() < n {
        let stuck = (0..n).find(|&i| indegree[i] > 0).unwrap();
        return Err(Error::Cycle(nodes[stuck].id.clone()));
    }
    Ok(order)
}
