use crate::error::{Error, Result};
use crate::numerics::{IndexTensor, MaskTensor, Tensor};

use super::{LayerSpec, Network};

/// Recorded nonlinearity state of a single node.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeState {
    /// `true` where the pre-activation is `>= 0`.
    Activation { mask: MaskTensor },
    /// Flat offsets into the node input of each pooled maximum.
    MaxPool { argmax: IndexTensor },
    Dropout { keep: MaskTensor },
    /// One mask per timestep.
    Recurrent { masks: Vec<MaskTensor> },
}

/// The region code of an input together with every node's feature map.
#[derive(Debug, Clone)]
pub struct FrozenState {
    pub(crate) node_ids: Vec<String>,
    pub(crate) states: Vec<Option<NodeState>>,
    pub(crate) features: Vec<Tensor>,
    pub(crate) input: Tensor,
}

impl FrozenState {
    /// The input the state was recorded on.
    pub fn input(&self) -> &Tensor {
        &self.input
    }

    pub fn state(&self, node_id: &str) -> Option<&NodeState> {
        let i = self.node_ids.iter().position(|n| n == node_id)?;
        self.states[i].as_ref()
    }

    pub fn feature_map(&self, node_id: &str) -> Option<&Tensor> {
        let i = self.node_ids.iter().position(|n| n == node_id)?;
        Some(&self.features[i])
    }

    pub(crate) fn state_at(&self, i: usize) -> Option<&NodeState> {
        self.states[i].as_ref()
    }

    pub(crate) fn feature_at(&self, i: usize) -> &Tensor {
        &self.features[i]
    }

    /// Whether two states encode the same region: identical masks and argmax indices.
    pub fn same_region(&self, other: &FrozenState) -> bool {
        self.node_ids == other.node_ids && self.states == other.states
    }

    /// Total number of recorded mask entries and argmax indices.
    pub fn code_len(&self) -> usize {
        self.states
            .iter()
            .flatten()
            .map(|s| match s {
                NodeState::Activation { mask } | NodeState::Dropout { keep: mask } => mask.data().len(),
                NodeState::MaxPool { argmax } => argmax.data().len(),
                NodeState::Recurrent { masks } => masks.iter().map(|m| m.data().len()).sum(),
            })
            .sum()
    }

    /// Verifies that the state was recorded on a network with this structure.
    pub fn check_matches(&self, net: &Network) -> Result<()> {
        if self.node_ids.len() != net.nodes().len() {
            return Err(Error::StateMismatch(format!(
                "state has {} nodes, network has {}",
                self.node_ids.len(),
                net.nodes().len()
            )));
        }
        if self.input.shape() != net.input_shape() {
            return Err(Error::StateMismatch(format!(
                "recorded input shape {:?} differs from network input {:?}",
                self.input.shape(),
                net.input_shape()
            )));
        }
        for (i, node) in net.nodes().iter().enumerate() {
            let mismatch = |msg: String| Error::StateMismatch(format!("node `{}`: {msg}", node.id));
            if self.node_ids[i] != node.id {
                return Err(mismatch(format!("recorded id `{}`", self.node_ids[i])));
            }
            if self.features[i].shape() != net.shape_at(i) {
                return Err(mismatch(format!(
                    "feature map shape {:?} differs from {:?}",
                    self.features[i].shape(),
                    net.shape_at(i)
                )));
            }
            let in_shape = net.source_shape(net.sources(i)[0]);
            let out_shape = net.shape_at(i);
            let ok = match (&node.layer, &self.states[i]) {
                (LayerSpec::Activation { .. }, Some(NodeState::Activation { mask })) => mask.shape() == in_shape,
                (LayerSpec::MaxPool { .. }, Some(NodeState::MaxPool { argmax })) => {
                    let n_in: usize = in_shape.iter().product();
                    argmax.shape() == out_shape && argmax.data().iter().all(|&k| k < n_in)
                }
                (LayerSpec::Dropout { .. }, Some(NodeState::Dropout { keep })) => {
                    node.layer.is_stateful() && keep.shape() == in_shape
                }
                (LayerSpec::Recurrent { steps, .. }, Some(NodeState::Recurrent { masks })) => {
                    masks.len() == *steps && masks.iter().all(|m| m.shape() == out_shape)
                }
                (layer, None) => !layer.is_stateful(),
                _ => false,
            };
            if !ok {
                return Err(mismatch("recorded state does not fit the layer".into()));
            }
        }
        Ok(())
    }
}
