//! The joint multi-task network.
//!
//! Every task owns a chain of trunk nodes (one per canonical position) that
//! ends in a classifier head. Nodes may be shared by several tasks. Binding a
//! task makes it adopt another task's whole trunk; expanding a position gives
//! it a private copy of the node it currently uses there.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::data::HeadMode;
use crate::error::{Error, Result};
use crate::nn::{softmax_cross_entropy, Layer, LayerKind};
use crate::rng::rng_for;
use crate::tensor::Tensor;
use crate::TaskId;

pub type NodeId = usize;

/// One canonical trunk position: a parameterised layer followed by
/// parameter-free post-ops (activation, pooling, flatten).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub kind: LayerKind,
    pub post: Vec<LayerKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Per-sample input shape; batches of flat rows are reshaped to it.
    pub input_shape: Vec<usize>,
    pub trunk: Vec<BlockSpec>,
    pub head: LayerKind,
}

/// Freshly initialised or trained parameters for one task-net.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskLayers {
    pub trunk: Vec<Layer>,
    pub head: Layer,
}

impl Architecture {
    /// Fully connected trunk `input -> hidden[0] -> ... ` with ReLU after every
    /// trunk layer, positions named `linear1..`.
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize) -> Self {
        let mut trunk = Vec::new();
        let mut prev = input_dim;
        for (i, &h) in hidden.iter().enumerate() {
            trunk.push(BlockSpec {
                name: format!("linear{}", i + 1),
                kind: LayerKind::Dense {
                    in_dim: prev,
                    out_dim: h,
                },
                post: vec![LayerKind::Relu],
            });
            prev = h;
        }
        Architecture {
            input_shape: vec![input_dim],
            trunk,
            head: LayerKind::SoftmaxCrossEntropyHead {
                in_dim: prev,
                classes,
            },
        }
    }

    /// Three valid 3x3 convolutions (max-pooling after the second) and two
    /// fully connected layers, for single-channel `side x side` images.
    pub fn small_convnet(side: usize, classes: usize) -> Self {
        let c1 = side - 2;
        let c2 = (c1 - 2) / 2;
        let c3 = c2 - 2;
        let flat = 16 * c3 * c3;
        let conv = |in_ch, out_ch| LayerKind::Conv2d {
            in_ch,
            out_ch,
            kernel: 3,
            stride: 1,
        };
        Architecture {
            input_shape: vec![1, side, side],
            trunk: vec![
                BlockSpec {
                    name: "conv1".into(),
                    kind: conv(1, 8),
                    post: vec![LayerKind::Relu],
                },
                BlockSpec {
                    name: "conv2".into(),
                    kind: conv(8, 16),
                    post: vec![LayerKind::Relu, LayerKind::MaxPool2d { kernel: 2 }],
                },
                BlockSpec {
                    name: "conv3".into(),
                    kind: conv(16, 16),
                    post: vec![LayerKind::Relu, LayerKind::Flatten],
                },
                BlockSpec {
                    name: "linear1".into(),
                    kind: LayerKind::Dense {
                        in_dim: flat,
                        out_dim: 64,
                    },
                    post: vec![LayerKind::Relu],
                },
                BlockSpec {
                    name: "linear2".into(),
                    kind: LayerKind::Dense {
                        in_dim: 64,
                        out_dim: 64,
                    },
                    post: vec![LayerKind::Relu],
                },
            ],
            head: LayerKind::SoftmaxCrossEntropyHead {
                in_dim: 64,
                classes,
            },
        }
    }

    pub fn depth(&self) -> usize {
        self.trunk.len()
    }

    pub fn classes(&self) -> usize {
        match self.head {
            LayerKind::SoftmaxCrossEntropyHead { classes, .. } => classes,
            _ => 0,
        }
    }

    pub fn column_names(&self) -> Vec<&str> {
        self.trunk.iter().map(|b| b.name.as_str()).collect()
    }

    /// Propagate the input shape through every block and the head.
    pub fn validate(&self) -> Result<()> {
        if self.trunk.is_empty() {
            return Err(Error::Network("architecture has no trunk layers".into()));
        }
        if !matches!(self.head, LayerKind::SoftmaxCrossEntropyHead { .. }) {
            return Err(Error::Network(
                "head must be a softmax cross-entropy head".into(),
            ));
        }
        let mut shape = vec![1];
        shape.extend_from_slice(&self.input_shape);
        for block in &self.trunk {
            if !block.kind.has_params() || block.post.iter().any(LayerKind::has_params) {
                return Err(Error::Network(format!(
                    "block {} must be one parameterised layer plus parameter-free post-ops",
                    block.name
                )));
            }
            shape = block.kind.output_shape(&shape)?;
            for p in &block.post {
                shape = p.output_shape(&shape)?;
            }
        }
        self.head.output_shape(&shape)?;
        Ok(())
    }

    pub fn trunk_params(&self) -> usize {
        self.trunk.iter().map(|b| b.kind.param_count()).sum()
    }

    pub fn head_params(&self) -> usize {
        self.head.param_count()
    }

    /// Seeded initialisation; each layer draws from its own stream.
    pub fn init_params(&self, seed: u64) -> TaskLayers {
        let trunk = self
            .trunk
            .iter()
            .enumerate()
            .map(|(i, b)| Layer::init(b.kind, &mut rng_for(seed, &[0x1a7e, i as u64])))
            .collect();
        let head = self.init_head(seed);
        TaskLayers { trunk, head }
    }

    pub fn init_head(&self, seed: u64) -> Layer {
        Layer::init(self.head, &mut rng_for(seed, &[0x4ead]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Trunk(usize),
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNode {
    pub id: NodeId,
    pub slot: Slot,
    pub layer: Layer,
    pub post: Vec<LayerKind>,
    pub creator_task: TaskId,
    pub owner_tasks: BTreeSet<TaskId>,
    /// For every owner, the task whose task-net it adopted this node from.
    /// The creator maps to itself.
    pub adopted_from: BTreeMap<TaskId, TaskId>,
}

impl LayerNode {
    pub fn param_count(&self) -> usize {
        self.layer.param_count()
    }

    pub fn is_shared(&self) -> bool {
        self.owner_tasks.len() > 1
    }
}

/// Intermediate values of one task's forward pass, kept for backprop.
pub struct ForwardTrace {
    /// Per trunk position, the input of every sub-layer (layer, then post-ops).
    block_inputs: Vec<Vec<Tensor>>,
    /// Post-activation output of every trunk position.
    pub activations: Vec<Tensor>,
    pub logits: Tensor,
}

/// Gradients for every node on a task-net, keyed by node id.
pub type NodeGrads = Vec<(NodeId, Vec<Tensor>)>;

#[derive(Debug, Clone, PartialEq)]
pub struct JointNet {
    arch: Architecture,
    head_mode: HeadMode,
    nodes: BTreeMap<NodeId, LayerNode>,
    task_nets: BTreeMap<TaskId, Vec<NodeId>>,
    heads: BTreeMap<TaskId, NodeId>,
    arrival: Vec<TaskId>,
    next_id: NodeId,
}

/// A single-task joint network with no sharing.
#[derive(Debug, Clone, PartialEq)]
pub struct IndependentNet {
    pub task: TaskId,
    pub net: JointNet,
}

impl IndependentNet {
    pub fn new(arch: &Architecture, task: TaskId, layers: TaskLayers) -> Result<Self> {
        let mut net = JointNet::new(arch.clone(), HeadMode::PerTask)?;
        net.add_first_task(task, layers)?;
        Ok(IndependentNet { task, net })
    }

    pub fn layers(&self) -> TaskLayers {
        self.net
            .task_layers(self.task)
            .expect("independent net holds its task")
    }
}

impl JointNet {
    pub fn new(arch: Architecture, head_mode: HeadMode) -> Result<Self> {
        arch.validate()?;
        Ok(JointNet {
            arch,
            head_mode,
            nodes: BTreeMap::new(),
            task_nets: BTreeMap::new(),
            heads: BTreeMap::new(),
            arrival: Vec::new(),
            next_id: 0,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn head_mode(&self) -> HeadMode {
        self.head_mode
    }

    pub fn is_empty(&self) -> bool {
        self.task_nets.is_empty()
    }

    /// Tasks in arrival order.
    pub fn tasks(&self) -> &[TaskId] {
        &self.arrival
    }

    pub fn contains(&self, task: TaskId) -> bool {
        self.task_nets.contains_key(&task)
    }

    pub fn node(&self, id: NodeId) -> Option<&LayerNode> {
        self.nodes.get(&id)
    }

    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut LayerNode> {
        self.nodes.get_mut(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &LayerNode> {
        self.nodes.values()
    }

    /// Trunk node ids of a task in position order.
    pub fn task_net(&self, task: TaskId) -> Result<&[NodeId]> {
        self.task_nets
            .get(&task)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownTask(task))
    }

    pub fn head(&self, task: TaskId) -> Result<NodeId> {
        self.heads
            .get(&task)
            .copied()
            .ok_or(Error::UnknownTask(task))
    }

    /// Trunk nodes followed by the head.
    pub fn task_nodes(&self, task: TaskId) -> Result<Vec<NodeId>> {
        let mut ids = self.task_net(task)?.to_vec();
        ids.push(self.head(task)?);
        Ok(ids)
    }

    /// Copy out a task's parameters.
    pub fn task_layers(&self, task: TaskId) -> Result<TaskLayers> {
        let trunk = self
            .task_net(task)?
            .iter()
            .map(|id| self.nodes[id].layer.clone())
            .collect();
        Ok(TaskLayers {
            trunk,
            head: self.nodes[&self.head(task)?].layer.clone(),
        })
    }

    fn fresh_node(
        &mut self,
        slot: Slot,
        layer: Layer,
        post: Vec<LayerKind>,
        task: TaskId,
    ) -> NodeId {
        let id = self.next_id;
        self.next_id += 1;
        self.nodes.insert(
            id,
            LayerNode {
                id,
                slot,
                layer,
                post,
                creator_task: task,
                owner_tasks: BTreeSet::from([task]),
                adopted_from: BTreeMap::from([(task, task)]),
            },
        );
        id
    }

    fn check_head(&self, head: &Layer) -> Result<()> {
        if head.kind != self.arch.head {
            return Err(Error::Network(format!(
                "head {:?} does not match architecture head {:?}",
                head.kind, self.arch.head
            )));
        }
        Ok(())
    }

    /// Create the network from its first task; every node is private to it.
    pub fn add_first_task(&mut self, task: TaskId, layers: TaskLayers) -> Result<()> {
        if !self.is_empty() {
            return Err(Error::Network(
                "add_first_task on a non-empty joint network".into(),
            ));
        }
        if layers.trunk.len() != self.arch.depth()
            || layers
                .trunk
                .iter()
                .zip(&self.arch.trunk)
                .any(|(l, b)| l.kind != b.kind)
        {
            return Err(Error::Network(
                "trunk layers do not match the architecture".into(),
            ));
        }
        self.check_head(&layers.head)?;
        let posts: Vec<Vec<LayerKind>> = self.arch.trunk.iter().map(|b| b.post.clone()).collect();
        let ids = layers
            .trunk
            .into_iter()
            .zip(posts)
            .enumerate()
            .map(|(pos, (layer, post))| self.fresh_node(Slot::Trunk(pos), layer, post, task))
            .collect();
        let head = self.fresh_node(Slot::Head, layers.head, Vec::new(), task);
        self.task_nets.insert(task, ids);
        self.heads.insert(task, head);
        self.arrival.push(task);
        Ok(())
    }

    /// Make `task` share the whole trunk of `target`. In per-task head mode
    /// `new_head` becomes the task's private head; in shared mode the task
    /// joins the existing head and `new_head` must be `None`.
    pub fn bind_task(
        &mut self,
        task: TaskId,
        target: TaskId,
        new_head: Option<Layer>,
    ) -> Result<()> {
        if self.contains(task) {
            return Err(Error::TaskExists(task));
        }
        let trunk = self.task_net(target)?.to_vec();
        let head = match (self.head_mode, new_head) {
            (HeadMode::PerTask, Some(h)) => {
                self.check_head(&h)?;
                self.fresh_node(Slot::Head, h, Vec::new(), task)
            }
            (HeadMode::Shared, None) => {
                let id = self.head(target)?;
                let node = self.nodes.get_mut(&id).expect("head exists");
                node.owner_tasks.insert(task);
                node.adopted_from.insert(task, target);
                id
            }
            (HeadMode::PerTask, None) => {
                return Err(Error::Network(
                    "per-task head mode needs a head for the new task".into(),
                ))
            }
            (HeadMode::Shared, Some(_)) => {
                return Err(Error::Network(
                    "shared head mode does not take a new head".into(),
                ))
            }
        };
        for id in &trunk {
            let node = self.nodes.get_mut(id).expect("task-net node exists");
            node.owner_tasks.insert(task);
            node.adopted_from.insert(task, target);
        }
        self.task_nets.insert(task, trunk);
        self.heads.insert(task, head);
        self.arrival.push(task);
        Ok(())
    }

    /// Give `task` private copies (warm-started from the current weights) of
    /// the nodes it uses at `positions`. Other task-nets are untouched.
    pub fn expand_layers(
        &mut self,
        task: TaskId,
        positions: &BTreeSet<usize>,
    ) -> Result<Vec<NodeId>> {
        let net = self.task_net(task)?.to_vec();
        for &pos in positions {
            let id = *net.get(pos).ok_or_else(|| {
                Error::Network(format!(
                    "position {pos} outside trunk of depth {}",
                    net.len()
                ))
            })?;
            if !self.nodes[&id].is_shared() {
                return Err(Error::Network(format!(
                    "position {pos} of task {task} is already task-specific"
                )));
            }
        }
        let mut created = Vec::with_capacity(positions.len());
        for &pos in positions {
            let old = net[pos];
            let (layer, post) = {
                let node = self.nodes.get_mut(&old).expect("node exists");
                node.owner_tasks.remove(&task);
                node.adopted_from.remove(&task);
                (node.layer.clone(), node.post.clone())
            };
            let id = self.fresh_node(Slot::Trunk(pos), layer, post, task);
            self.task_nets.get_mut(&task).expect("task exists")[pos] = id;
            created.push(id);
        }
        Ok(created)
    }

    /// Parameters of all distinct nodes (shared nodes counted once).
    pub fn total_params(&self) -> usize {
        self.nodes.values().map(LayerNode::param_count).sum()
    }

    pub fn trunk_params(&self) -> usize {
        self.nodes
            .values()
            .filter(|n| matches!(n.slot, Slot::Trunk(_)))
            .map(LayerNode::param_count)
            .sum()
    }

    /// Parameters reachable by one task, head included.
    pub fn task_params(&self, task: TaskId) -> Result<usize> {
        Ok(self
            .task_nodes(task)?
            .iter()
            .map(|id| self.nodes[id].param_count())
            .sum())
    }

    fn reshape_batch(&self, batch: &Tensor) -> Result<Tensor> {
        let mut shape = vec![batch.rows()];
        shape.extend_from_slice(&self.arch.input_shape);
        if batch.row_len() != self.arch.input_shape.iter().product::<usize>() {
            return Err(Error::shape("input", format!("{shape:?}"), batch.shape()));
        }
        batch.clone().reshape(&shape)
    }

    /// Forward a batch of flat rows through a task-net, keeping everything
    /// needed for [`JointNet::backward`].
    pub fn trace(&self, task: TaskId, batch: &Tensor) -> Result<ForwardTrace> {
        let net = self.task_net(task)?;
        let mut x = self.reshape_batch(batch)?;
        let mut block_inputs = Vec::with_capacity(net.len());
        let mut activations = Vec::with_capacity(net.len());
        for id in net {
            let node = &self.nodes[id];
            let mut inputs = Vec::with_capacity(1 + node.post.len());
            inputs.push(x);
            x = node.layer.forward(inputs.last().expect("pushed"))?;
            for &kind in &node.post {
                inputs.push(x);
                x = Layer::new(kind, Vec::new())?.forward(inputs.last().expect("pushed"))?;
            }
            activations.push(x.clone());
            block_inputs.push(inputs);
        }
        let logits = self.nodes[&self.head(task)?].layer.forward(&x)?;
        Ok(ForwardTrace {
            block_inputs,
            activations,
            logits,
        })
    }

    /// Logits of a task for a batch of flat rows.
    pub fn forward_task(&self, task: TaskId, batch: &Tensor) -> Result<Tensor> {
        Ok(self.trace(task, batch)?.logits)
    }

    /// Post-activation output of every trunk position, each flattened to
    /// `[N, features]`.
    pub fn trunk_activations(&self, task: TaskId, batch: &Tensor) -> Result<Vec<Tensor>> {
        self.trace(task, batch)?
            .activations
            .into_iter()
            .map(|a| {
                let (n, w) = (a.rows(), a.row_len());
                a.reshape(&[n, w])
            })
            .collect()
    }

    /// Mean softmax cross-entropy and per-node gradients for one batch.
    pub fn loss_and_grads(
        &self,
        task: TaskId,
        batch: &Tensor,
        labels: &[usize],
    ) -> Result<(f64, NodeGrads)> {
        let trace = self.trace(task, batch)?;
        let (loss, dlogits) = softmax_cross_entropy(&trace.logits, labels)?;
        let grads = self.backward(task, &trace, &dlogits)?;
        Ok((loss, grads))
    }

    /// Backpropagate `dlogits` through a traced task-net.
    pub fn backward(
        &self,
        task: TaskId,
        trace: &ForwardTrace,
        dlogits: &Tensor,
    ) -> Result<NodeGrads> {
        let net = self.task_net(task)?;
        let head_id = self.head(task)?;
        let last = trace.activations.last().expect("non-empty trunk");
        let (mut g, head_grads) = self.nodes[&head_id].layer.backward(last, dlogits)?;
        let mut grads = Vec::with_capacity(net.len() + 1);
        grads.push((head_id, head_grads));
        for (pos, id) in net.iter().enumerate().rev() {
            let node = &self.nodes[id];
            let inputs = &trace.block_inputs[pos];
            for (i, &kind) in node.post.iter().enumerate().rev() {
                g = Layer::new(kind, Vec::new())?
                    .backward(&inputs[i + 1], &g)?
                    .0;
            }
            let (gx, pg) = node.layer.backward(&inputs[0], &g)?;
            grads.push((*id, pg));
            g = gx;
        }
        Ok(grads)
    }

    /// Check the structural invariants; returns a description of the first
    /// violation found.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Network(m));
        let depth = self.arch.depth();
        for (&task, net) in &self.task_nets {
            if net.len() != depth {
                return bad(format!(
                    "task {task} has {} trunk nodes, expected {depth}",
                    net.len()
                ));
            }
            for (pos, id) in net.iter().enumerate() {
                let Some(node) = self.nodes.get(id) else {
                    return bad(format!("task {task} references missing node {id}"));
                };
                if node.slot != Slot::Trunk(pos) {
                    return bad(format!(
                        "node {id} sits at {:?} but is used at position {pos}",
                        node.slot
                    ));
                }
                if node.layer.kind != self.arch.trunk[pos].kind {
                    return bad(format!("node {id} kind differs from position {pos}"));
                }
            }
            if !self.heads.contains_key(&task) {
                return bad(format!("task {task} has no head"));
            }
        }
        for node in self.nodes.values() {
            if !node.owner_tasks.contains(&node.creator_task) {
                return bad(format!(
                    "node {} lost its creator {}",
                    node.id, node.creator_task
                ));
            }
            if node.adopted_from.keys().ne(node.owner_tasks.iter()) {
                return bad(format!("node {} bind origins do not match owners", node.id));
            }
            for &t in &node.owner_tasks {
                let used = match node.slot {
                    Slot::Trunk(pos) => self.task_nets.get(&t).map(|n| n[pos]) == Some(node.id),
                    Slot::Head => self.heads.get(&t) == Some(&node.id),
                };
                if !used {
                    return bad(format!(
                        "node {} lists owner {t} that does not use it",
                        node.id
                    ));
                }
            }
        }
        for (&t, net) in &self.task_nets {
            for id in net.iter().chain(self.heads.get(&t)) {
                if !self.nodes[id].owner_tasks.contains(&t) {
                    return bad(format!("task {t} uses node {id} without owning it"));
                }
            }
        }
        Ok(())
    }

    /// Table of task-nets: `*` marks a node the task created, a number the
    /// task it adopted that node from.
    pub fn tabular_repr(&self) -> String {
        let mut out = format!("columns: [{}]\n", self.arch.column_names().join(" "));
        for &task in &self.arrival {
            let entries: Vec<String> = self.task_nets[&task]
                .iter()
                .map(|id| {
                    let node = &self.nodes[id];
                    if node.creator_task == task {
                        "*".to_string()
                    } else {
                        node.adopted_from[&task].to_string()
                    }
                })
                .collect();
            let _ = writeln!(out, "task_{task}:  {},", entries.join(", "));
        }
        out
    }

    /// Self-describing binary dump: magic, JSON header with the structure and
    /// tensor shapes, then every parameter as little-endian `f64`.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            arch: self.arch.clone(),
            head_mode: self.head_mode,
            nodes: self
                .nodes
                .values()
                .map(|n| CheckpointNode {
                    id: n.id,
                    slot: n.slot,
                    kind: n.layer.kind,
                    post: n.post.clone(),
                    shapes: n.layer.params.iter().map(|p| p.shape().to_vec()).collect(),
                    creator_task: n.creator_task,
                    owner_tasks: n.owner_tasks.clone(),
                    adopted_from: n.adopted_from.clone(),
                })
                .collect(),
            task_nets: self.task_nets.clone(),
            heads: self.heads.clone(),
            arrival: self.arrival.clone(),
            next_id: self.next_id,
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for node in self.nodes.values() {
            for p in &node.layer.params {
                for v in p.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {}",
                header.version
            )));
        }
        let mut nodes = BTreeMap::new();
        for n in header.nodes {
            let mut params = Vec::with_capacity(n.shapes.len());
            for shape in n.shapes {
                let count: usize = shape.iter().product();
                let mut raw = vec![0u8; count * 8];
                r.read_exact(&mut raw)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                params.push(Tensor::new(shape, data)?);
            }
            nodes.insert(
                n.id,
                LayerNode {
                    id: n.id,
                    slot: n.slot,
                    layer: Layer::new(n.kind, params)?,
                    post: n.post,
                    creator_task: n.creator_task,
                    owner_tasks: n.owner_tasks,
                    adopted_from: n.adopted_from,
                },
            );
        }
        let net = JointNet {
            arch: header.arch,
            head_mode: header.head_mode,
            nodes,
            task_nets: header.task_nets,
            heads: header.heads,
            arrival: header.arrival,
            next_id: header.next_id,
        };
        net.validate()?;
        Ok(net)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"GRWNCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointNode {
    id: NodeId,
    slot: Slot,
    kind: LayerKind,
    post: Vec<LayerKind>,
    shapes: Vec<Vec<usize>>,
    creator_task: TaskId,
    owner_tasks: BTreeSet<TaskId>,
    adopted_from: BTreeMap<TaskId, TaskId>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    arch: Architecture,
    head_mode: HeadMode,
    nodes: Vec<CheckpointNode>,
    task_nets: BTreeMap<TaskId, Vec<NodeId>>,
    heads: BTreeMap<TaskId, NodeId>,
    arrival: Vec<TaskId>,
    next_id: NodeId,
}

/// Entry of a parsed tabular row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TabularEntry {
    New,
    BoundTo(TaskId),
}

/// Parsed form of [`JointNet::tabular_repr`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TabularTable {
    pub columns: Vec<String>,
    pub rows: Vec<(TaskId, Vec<TabularEntry>)>,
}

impl TabularTable {
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::InvalidArgument(format!("tabular: {m}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty input"))?.trim();
        let cols = header
            .strip_prefix("columns: [")
            .and_then(|s| s.strip_suffix(']'))
            .ok_or_else(|| bad("missing columns header"))?;
        let columns: Vec<String> = cols.split_whitespace().map(str::to_string).collect();
        let mut rows = Vec::new();
        for line in lines {
            let (name, rest) = line
                .trim()
                .split_once(':')
                .ok_or_else(|| bad("row without ':'"))?;
            let task = name
                .strip_prefix("task_")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("row label must be task_<id>"))?;
            let entries = rest
                .split(',')
                .map(str::trim)
                .filter(|e| !e.is_empty())
                .map(|e| match e {
                    "*" => Ok(TabularEntry::New),
                    other => other
                        .parse()
                        .map(TabularEntry::BoundTo)
                        .map_err(|_| bad("bad entry")),
                })
                .collect::<Result<Vec<_>>>()?;
            if entries.len() != columns.len() {
                return Err(bad("row length differs from column count"));
            }
            rows.push((task, entries));
        }
        Ok(TabularTable { columns, rows })
    }

    /// For every task and position, the `(creator task, position)` that
    /// identifies the physical node, following bind chains.
    pub fn resolve_nodes(&self) -> Result<BTreeMap<TaskId, Vec<(TaskId, usize)>>> {
        let rows: BTreeMap<TaskId, &Vec<TabularEntry>> =
            self.rows.iter().map(|(t, e)| (*t, e)).collect();
        let mut out = BTreeMap::new();
        for &(task, _) in &self.rows {
            let mut resolved = Vec::with_capacity(self.columns.len());
            for pos in 0..self.columns.len() {
                let mut cur = task;
                let mut hops = 0;
                loop {
                    let entries = rows.get(&cur).ok_or(Error::UnknownTask(cur))?;
                    match entries[pos] {
                        TabularEntry::New => break,
                        TabularEntry::BoundTo(next) => cur = next,
                    }
                    hops += 1;
                    if hops > rows.len() {
                        return Err(Error::InvalidArgument("tabular: cyclic bindings".into()));
                    }
                }
                resolved.push((cur, pos));
            }
            out.insert(task, resolved);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp3() -> Architecture {
        Architecture::mlp(6, &[5, 4, 3], 2)
    }

    fn first(arch: &Architecture, task: TaskId, mode: HeadMode) -> JointNet {
        let mut net = JointNet::new(arch.clone(), mode).unwrap();
        net.add_first_task(task, arch.init_params(task as u64))
            .unwrap();
        net
    }

    fn head_for(net: &JointNet, seed: u64) -> Option<Layer> {
        match net.head_mode() {
            HeadMode::PerTask => Some(net.architecture().init_head(seed)),
            HeadMode::Shared => None,
        }
    }

    #[test]
    fn first_task_owns_everything() {
        let arch = mlp3();
        let net = first(&arch, 0, HeadMode::PerTask);
        assert_eq!(net.task_net(0).unwrap().len(), 3);
        assert!(net.nodes().all(|n| n.owner_tasks == BTreeSet::from([0])));
        assert_eq!(net.total_params(), arch.trunk_params() + arch.head_params());
        assert_eq!(
            net.tabular_repr(),
            "columns: [linear1 linear2 linear3]\ntask_0:  *, *, *,\n"
        );
        let mut again = net.clone();
        assert!(again.add_first_task(1, arch.init_params(1)).is_err());
        net.validate().unwrap();
    }

    #[test]
    fn bind_shares_trunk() {
        let arch = mlp3();
        let mut net = first(&arch, 0, HeadMode::PerTask);
        let before = net.total_params();
        net.bind_task(1, 0, head_for(&net, 1)).unwrap();
        assert_eq!(net.task_net(1).unwrap(), net.task_net(0).unwrap());
        assert_eq!(net.total_params(), before + arch.head_params());
        assert!(matches!(
            net.bind_task(1, 0, head_for(&net, 1)),
            Err(Error::TaskExists(1))
        ));
        assert!(matches!(
            net.bind_task(2, 9, head_for(&net, 2)),
            Err(Error::UnknownTask(9))
        ));

        let mut shared = first(&arch, 0, HeadMode::Shared);
        let before = shared.total_params();
        shared.bind_task(1, 0, None).unwrap();
        assert_eq!(shared.total_params(), before);
        assert_eq!(shared.head(0).unwrap(), shared.head(1).unwrap());
        shared.validate().unwrap();
    }

    #[test]
    fn transitive_binding_accumulates_owners() {
        // a=1 creates, b=3 binds a, t=4 binds b
        let arch = Architecture::mlp(6, &[5, 5, 5, 5, 4], 2);
        let mut net = first(&arch, 1, HeadMode::PerTask);
        net.bind_task(3, 1, head_for(&net, 3)).unwrap();
        net.expand_layers(3, &BTreeSet::from([0, 1])).unwrap();
        net.bind_task(4, 3, head_for(&net, 4)).unwrap();
        net.expand_layers(4, &BTreeSet::from([0, 1])).unwrap();
        let last = net.task_net(4).unwrap()[4];
        let node = net.node(last).unwrap();
        assert_eq!(node.owner_tasks, BTreeSet::from([1, 3, 4]));
        assert_eq!(node.creator_task, 1);
        let table = net.tabular_repr();
        assert!(table.ends_with("task_4:  *, *, 3, 3, 3,\n"), "{table}");
        assert!(table.contains("task_3:  *, *, 1, 1, 1,\n"), "{table}");
        net.validate().unwrap();
    }

    #[test]
    fn expand_leaves_other_tasks_alone() {
        let arch = mlp3();
        let mut net = first(&arch, 0, HeadMode::PerTask);
        net.bind_task(1, 0, head_for(&net, 1)).unwrap();
        let snapshot = net.clone();
        assert!(net.expand_layers(1, &BTreeSet::new()).unwrap().is_empty());
        assert_eq!(net, snapshot);

        let net0 = net.task_net(0).unwrap().to_vec();
        let trunk_before = net.trunk_params();
        net.expand_layers(1, &BTreeSet::from([0, 1, 2])).unwrap();
        assert_eq!(net.task_net(0).unwrap(), net0.as_slice());
        let t0: BTreeSet<_> = net.task_net(0).unwrap().iter().collect();
        assert!(net.task_net(1).unwrap().iter().all(|id| !t0.contains(id)));
        assert_eq!(net.trunk_params(), trunk_before + arch.trunk_params());
        // clones start from the replaced weights
        for (a, b) in net
            .task_net(0)
            .unwrap()
            .iter()
            .zip(net.task_net(1).unwrap())
        {
            assert_eq!(net.node(*a).unwrap().layer, net.node(*b).unwrap().layer);
        }
        // expanding a private position again is an error
        assert!(net.expand_layers(1, &BTreeSet::from([0])).is_err());
        assert!(net.expand_layers(0, &BTreeSet::from([7])).is_err());
        net.validate().unwrap();
    }

    #[test]
    fn param_counts_by_hand() {
        // trunk 6*5+5=35, 5*4+4=24, 4*3+3=15 ; head 3*2+2=8
        let arch = mlp3();
        assert_eq!(arch.trunk_params(), 74);
        assert_eq!(arch.head_params(), 8);
        let mut net = first(&arch, 0, HeadMode::PerTask);
        net.bind_task(1, 0, head_for(&net, 1)).unwrap();
        net.expand_layers(1, &BTreeSet::from([1])).unwrap();
        assert_eq!(net.total_params(), 74 + 24 + 8 + 8);
        assert_eq!(net.task_params(1).unwrap(), 74 + 8);
    }

    #[test]
    fn forward_matches_sequential_layers() {
        let arch = mlp3();
        let layers = arch.init_params(5);
        let mut net = JointNet::new(arch.clone(), HeadMode::PerTask).unwrap();
        net.add_first_task(0, layers.clone()).unwrap();
        let x = Tensor::new(
            vec![2, 6],
            (0..12).map(|i| (i as f64 * 0.3).sin()).collect(),
        )
        .unwrap();
        let relu = Layer::new(LayerKind::Relu, vec![]).unwrap();
        let mut chain = Vec::new();
        for l in &layers.trunk {
            chain.push(l.clone());
            chain.push(relu.clone());
        }
        chain.push(layers.head.clone());
        let want = crate::nn::forward_chain(&chain, &x).unwrap();
        assert_eq!(net.forward_task(0, &x).unwrap(), want);
    }

    #[test]
    fn edited_clone_diverges() {
        let arch = mlp3();
        let mut net = first(&arch, 0, HeadMode::Shared);
        net.bind_task(1, 0, None).unwrap();
        let x = Tensor::new(vec![1, 6], vec![0.5, -0.2, 0.9, 0.1, 0.3, -0.7]).unwrap();
        let a0 = net.trunk_activations(0, &x).unwrap();
        assert_eq!(a0, net.trunk_activations(1, &x).unwrap());
        let id = net.expand_layers(1, &BTreeSet::from([0])).unwrap()[0];
        for p in &mut net.node_mut(id).unwrap().layer.params {
            p.data_mut().fill(0.5);
        }
        assert_ne!(
            net.forward_task(0, &x).unwrap(),
            net.forward_task(1, &x).unwrap()
        );
    }

    #[test]
    fn tabular_round_trip_recovers_sharing() {
        let arch = Architecture::mlp(4, &[4, 4, 4], 2);
        let mut net = first(&arch, 0, HeadMode::PerTask);
        net.bind_task(1, 0, head_for(&net, 1)).unwrap();
        net.expand_layers(1, &BTreeSet::from([0])).unwrap();
        net.bind_task(2, 1, head_for(&net, 2)).unwrap();
        net.expand_layers(2, &BTreeSet::from([1])).unwrap();
        let table = TabularTable::parse(&net.tabular_repr()).unwrap();
        let resolved = table.resolve_nodes().unwrap();
        for &a in net.tasks() {
            for &b in net.tasks() {
                for pos in 0..3 {
                    let same = net.task_net(a).unwrap()[pos] == net.task_net(b).unwrap()[pos];
                    assert_eq!(same, resolved[&a][pos] == resolved[&b][pos]);
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let arch = Architecture::small_convnet(14, 3);
        let mut net = first(&arch, 0, HeadMode::PerTask);
        net.bind_task(1, 0, head_for(&net, 1)).unwrap();
        net.expand_layers(1, &BTreeSet::from([2, 4])).unwrap();
        let mut buf = Vec::new();
        net.write_checkpoint(&mut buf).unwrap();
        let back = JointNet::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, net);
        buf[0] = b'X';
        assert!(JointNet::read_checkpoint(buf.as_slice()).is_err());
    }

    #[test]
    fn convnet_activation_shapes() {
        let arch = Architecture::small_convnet(14, 2);
        let net = first(&arch, 0, HeadMode::PerTask);
        let x = Tensor::filled(&[3, 196], 0.5);
        let acts = net.trunk_activations(0, &x).unwrap();
        let widths: Vec<usize> = acts.iter().map(|a| a.shape()[1]).collect();
        assert_eq!(widths, vec![8 * 12 * 12, 16 * 5 * 5, 16 * 3 * 3, 64, 64]);
        assert!(acts.iter().all(|a| a.rows() == 3));
    }
}
