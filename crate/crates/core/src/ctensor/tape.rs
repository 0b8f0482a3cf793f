//! Wengert tape: records the forward pass, replays it in reverse.

use ndarray::ArrayD;
use smallvec::SmallVec;
use std::collections::HashMap;

use super::{ComplexTensor, Real};
use crate::error::{Error, Result};
use crate::layers::Param;

pub type NodeId = usize;
pub type ParamId = usize;

/// Per-input gradients returned by a node's backward rule. Slots line up
/// with the node's recorded inputs; `None` means "input was a constant".
pub(crate) type InputGrads<T> = SmallVec<[Option<ComplexTensor<T>>; 3]>;

pub(crate) type BackwardFn<T> = Box<dyn Fn(&ComplexTensor<T>) -> InputGrads<T>>;

pub(crate) struct Node<T: Real> {
    pub kind: &'static str,
    pub inputs: SmallVec<[Option<NodeId>; 3]>,
    pub backward: Option<BackwardFn<T>>,
    /// Set on leaves registered through [`Tape::param`].
    pub pid: Option<ParamId>,
}

/// Define-by-run differentiation record. Built fresh for every forward pass
/// and confined to one thread for its build/backward lifetime.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    recording: bool,
    check_finite: bool,
    max_pid: Option<ParamId>,
}

impl<T: Real> Tape<T> {
    /// Recording tape: every op appends a node with a backward rule.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), recording: true, check_finite: false, max_pid: None }
    }

    /// Forward-only tape for inference; ops compute values, nothing is
    /// recorded and [`Tape::backward`] is unavailable.
    pub fn no_grad() -> Self {
        Self { nodes: Vec::new(), recording: false, check_finite: false, max_pid: None }
    }

    /// Verify finiteness after every op, failing with the op's name.
    /// Used by the gradient-check harness.
    pub fn check_finite(mut self, yes: bool) -> Self {
        self.check_finite = yes;
        self
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input tensor as a differentiable leaf.
    pub fn leaf(&mut self, value: ComplexTensor<T>) -> ComplexTensor<T> {
        if !self.recording {
            return value.with_id(None);
        }
        let id = self.push_node("leaf", SmallVec::new(), None, None);
        value.with_id(Some(id))
    }

    /// Register a model parameter; its gradient is retrievable from
    /// [`Grads::param`] under the parameter's id after backward.
    pub fn param(&mut self, p: &Param<T>) -> ComplexTensor<T> {
        if !self.recording {
            return p.value.detach();
        }
        let pid = p.id();
        self.max_pid = Some(self.max_pid.map_or(pid, |m| m.max(pid)));
        let id = self.push_node("param", SmallVec::new(), None, Some(pid));
        p.value.detach().with_id(Some(id))
    }

    pub(crate) fn push_node(
        &mut self,
        kind: &'static str,
        inputs: SmallVec<[Option<NodeId>; 3]>,
        backward: Option<BackwardFn<T>>,
        pid: Option<ParamId>,
    ) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { kind, inputs, backward, pid });
        id
    }

    /// Record the output of an op. When nothing upstream is tracked (or the
    /// tape is not recording) the value passes through untracked.
    pub(crate) fn record(
        &mut self,
        kind: &'static str,
        inputs: SmallVec<[Option<NodeId>; 3]>,
        value: ComplexTensor<T>,
        backward: BackwardFn<T>,
    ) -> Result<ComplexTensor<T>> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: kind });
        }
        if !self.recording || inputs.iter().all(|i| i.is_none()) {
            return Ok(value.with_id(None));
        }
        let id = self.push_node(kind, inputs, Some(backward), None);
        Ok(value.with_id(Some(id)))
    }

    /// Reverse sweep from a scalar loss. Every node is visited at most once,
    /// in reverse topological order; leaves and parameters collect their
    /// re/im adjoints.
    pub fn backward(&self, loss: &ComplexTensor<T>) -> Result<Grads<T>> {
        let root = loss
            .id()
            .ok_or_else(|| Error::Contract("backward: loss is not on this tape".into()))?;
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss.shape()
            )));
        }
        if root >= self.nodes.len() {
            return Err(Error::Contract("backward: stale node id".into()));
        }

        let mut adjoints: Vec<Option<ComplexTensor<T>>> = Vec::new();
        adjoints.resize_with(root + 1, || None);
        let seed_re = ArrayD::from_elem(loss.re().raw_dim(), T::one());
        let seed_im = ArrayD::zeros(loss.re().raw_dim());
        adjoints[root] = Some(ComplexTensor::from_parts(seed_re, seed_im)?);

        let mut grads = Grads {
            leaf: HashMap::new(),
            param: vec![None; self.max_pid.map_or(0, |m| m + 1)],
        };

        for id in (0..=root).rev() {
            let Some(g) = adjoints[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.backward {
                Some(bw) => {
                    let input_grads = bw(&g);
                    debug_assert_eq!(input_grads.len(), node.inputs.len(), "op {}", node.kind);
                    for (slot, ig) in input_grads.into_iter().enumerate() {
                        let (Some(Some(src)), Some(ig)) = (node.inputs.get(slot), ig) else {
                            continue;
                        };
                        accumulate(&mut adjoints[*src], ig);
                    }
                }
                None => {
                    // Leaf or parameter: keep the adjoint.
                    if let Some(pid) = node.pid {
                        accumulate(&mut grads.param[pid], g.clone());
                    }
                    grads.leaf.insert(id, g);
                }
            }
        }
        Ok(grads)
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<T: Real>(slot: &mut Option<ComplexTensor<T>>, g: ComplexTensor<T>) {
    match slot.take() {
        None => *slot = Some(g),
        Some(prev) => {
            let re = prev.re().to_owned() + g.re();
            let im = prev.im().to_owned() + g.im();
            *slot = Some(ComplexTensor::from_parts(re, im).expect("equal shapes"));
        }
    }
}

/// Gradient map produced by [`Tape::backward`].
pub struct Grads<T: Real> {
    leaf: HashMap<NodeId, ComplexTensor<T>>,
    param: Vec<Option<ComplexTensor<T>>>,
}

impl<T: Real> Grads<T> {
    /// Gradient of the loss w.r.t. a tracked leaf tensor. Detached or
    /// unreached nodes yield `None` (treat as zero).
    pub fn of(&self, t: &ComplexTensor<T>) -> Option<&ComplexTensor<T>> {
        t.id().and_then(|id| self.leaf.get(&id))
    }

    /// Gradient for a parameter id; `None` when the loss does not depend
    /// on that parameter.
    pub fn param(&self, pid: ParamId) -> Option<&ComplexTensor<T>> {
        self.param.get(pid).and_then(|g| g.as_ref())
    }

    /// Global L2 norm over every parameter adjoint (both planes).
    pub fn param_grad_norm(&self) -> T {
        let mut acc = T::zero();
        for g in self.param.iter().flatten() {
            acc = acc + g.re().iter().map(|v| *v * *v).sum();
            acc = acc + g.im().iter().map(|v| *v * *v).sum();
        }
        acc.sqrt()
    }

    pub fn all_params_finite(&self) -> bool {
        self.param.iter().flatten().all(|g| g.is_finite())
    }

    /// Scale every parameter adjoint in place (gradient clipping).
    pub fn scale_params(&mut self, s: T) {
        for g in self.param.iter_mut().flatten() {
            let re = g.re().mapv(|v| v * s);
            let im = g.im().mapv(|v| v * s);
            *g = ComplexTensor::from_parts(re, im).expect("equal shapes");
        }
    }

    /// Combine per-item gradient sets in the given (fixed) order, scaling
    /// each param adjoint by `scale`. Leaf gradients are not merged.
    pub fn scaled_sum(parts: Vec<Grads<T>>, scale: T) -> Grads<T> {
        let width = parts.iter().map(|p| p.param.len()).max().unwrap_or(0);
        let mut param: Vec<Option<ComplexTensor<T>>> = vec![None; width];
        for part in parts {
            for (slot, g) in part.param.into_iter().enumerate() {
                if let Some(g) = g {
                    accumulate(&mut param[slot], g);
                }
            }
        }
        for g in param.iter_mut().flatten() {
            let re = g.re().mapv(|v| v * scale);
            let im = g.im().mapv(|v| v * scale);
            *g = ComplexTensor::from_parts(re, im).expect("equal shapes");
        }
        Grads { leaf: HashMap::new(), param }
    }
}
