use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DgmError, Result};
use crate::expansion::{
    expand_dgma, expand_dgmw, neurons_to_add, reserved_delta, GrowthRecord, LayerSlot,
};
use crate::masks::{mask_values, occupation, MaskState, MaskVariant};
use crate::tensor::{Graph, NodeId, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Tanh,
    Linear,
}

/// Gradient gating of the generator's masked layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gating {
    /// `1 - m_cum`.
    Cumulated,
    /// `1 - max(m_soft, m_cum)`.
    WithCurrent,
    /// No gates at all. Only for fault injection.
    Bypass,
}

/// Which masks a generator forward pass applies.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskMode {
    /// Binary snapshot of a finished task (1-based).
    Snapshot(usize),
    /// Soft masks of the task being learned at scale `s`.
    Soft(f64),
    /// Union of all finished tasks.
    Cumulated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub latent_dim: usize,
    pub num_classes: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub variant: MaskVariant,
    pub output_activation: OutputActivation,
}

/// Label-conditional generator: `[z, onehot(y)]` through masked hidden
/// layers and an unmasked output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub spec: GeneratorSpec,
    pub hidden: Vec<LayerSlot>,
    pub masks: Vec<MaskState>,
    pub output: LayerSlot,
    /// Classes of every finished task, in task order.
    pub task_classes: Vec<Vec<usize>>,
}

/// Parameter handles of a trainable generator forward pass.
pub struct GenNodes {
    pub out: NodeId,
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
    pub embeddings: Vec<NodeId>,
    pub bias_embeddings: Vec<Option<NodeId>>,
    /// Soft weight masks, one per hidden layer, as fed to the regularizer.
    pub soft_masks: Vec<NodeId>,
    pub out_weight: NodeId,
    pub out_bias: NodeId,
}

impl Generator {
    pub fn new(spec: GeneratorSpec, rng: &mut impl Rng) -> Result<Self> {
        if spec.hidden.is_empty() || spec.hidden.contains(&0) {
            return Err(DgmError::invalid(
                "generator needs at least one non-empty hidden layer",
            ));
        }
        if spec.latent_dim == 0 || spec.num_classes == 0 || spec.output_dim == 0 {
            return Err(DgmError::invalid("generator dimensions must be positive"));
        }
        let mut n = spec.latent_dim + spec.num_classes;
        let mut hidden = Vec::new();
        let mut masks = Vec::new();
        for &p in &spec.hidden {
            hidden.push(LayerSlot::new(n, p, spec.variant, rng));
            masks.push(MaskState::new(spec.variant, n, p));
            n = p;
        }
        let output = LayerSlot::new(n, spec.output_dim, spec.variant, rng);
        Ok(Generator {
            spec,
            hidden,
            masks,
            output,
            task_classes: Vec::new(),
        })
    }

    pub fn tasks_learned(&self) -> usize {
        self.task_classes.len()
    }

    pub fn input_dim(&self) -> usize {
        self.spec.latent_dim + self.spec.num_classes
    }

    /// Builds `[z, onehot(y)]`.
    pub fn conditioning(&self, z: &Tensor, labels: &[usize]) -> Result<Tensor> {
        if z.rows() != labels.len() || z.cols() != self.spec.latent_dim {
            return Err(DgmError::shape(
                "generator input",
                z.shape(),
                &[labels.len(), self.spec.latent_dim],
            ));
        }
        let mut onehot = Tensor::zeros(labels.len(), self.spec.num_classes);
        for (i, &y) in labels.iter().enumerate() {
            if y >= self.spec.num_classes {
                return Err(DgmError::UnknownLabel {
                    label: y,
                    context: "the generator's label space".into(),
                });
            }
            onehot.set(i, y, 1.0);
        }
        Tensor::hstack(&[z, &onehot])
    }

    pub fn draw_latent(&self, count: usize, rng: &mut impl Rng) -> Tensor {
        let data = (0..count * self.spec.latent_dim)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Tensor::matrix(count, self.spec.latent_dim, data).expect("sized buffer")
    }

    fn layer_masks(&self, l: usize, mode: MaskMode) -> Result<(Tensor, Tensor)> {
        let ms = &self.masks[l];
        match mode {
            MaskMode::Snapshot(j) => ms.snapshot_tensors(j),
            MaskMode::Cumulated => Ok(ms.cumulated_tensors()),
            MaskMode::Soft(s) => {
                let w = mask_values(&ms.embedding, s)?;
                let b = match &ms.bias_embedding {
                    Some(e) => mask_values(e, s)?,
                    None => w.clone(),
                };
                Ok((w, b))
            }
        }
    }

    fn masked_layer(
        &self,
        g: &mut Graph,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        mw: NodeId,
        mb: NodeId,
    ) -> Result<NodeId> {
        let rows = g.value(x).rows();
        match self.spec.variant {
            MaskVariant::Dgma => {
                let pre = g.dense(x, w, b)?;
                let h = g.leaky_relu(pre, LEAKY_SLOPE)?;
                let m = g.broadcast_rows(mw, rows)?;
                g.mul(h, m)
            }
            MaskVariant::Dgmw => {
                let wm = g.mul(w, mw)?;
                let bm = g.mul(b, mb)?;
                let pre = g.dense(x, wm, bm)?;
                g.leaky_relu(pre, LEAKY_SLOPE)
            }
        }
    }

    fn finish(&self, g: &mut Graph, h: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let pre = g.dense(h, w, b)?;
        match self.spec.output_activation {
            OutputActivation::Tanh => g.tanh(pre),
            OutputActivation::Linear => Ok(pre),
        }
    }

    /// Inference pass with every tensor recorded as a constant.
    pub fn forward_const(&self, g: &mut Graph, input: &Tensor, mode: MaskMode) -> Result<NodeId> {
        if let MaskMode::Snapshot(j) = mode {
            if j == 0 || j > self.tasks_learned() {
                return Err(DgmError::UnknownTask(j));
            }
        }
        let mut x = g.constant(input.clone())?;
        for (l, layer) in self.hidden.iter().enumerate() {
            let (mw, mb) = self.layer_masks(l, mode)?;
            let w = g.constant(layer.weight.clone())?;
            let b = g.constant(layer.bias.clone())?;
            let mw = g.constant(mw)?;
            let mb = g.constant(mb)?;
            x = self.masked_layer(g, x, w, b, mw, mb)?;
        }
        let w = g.constant(self.output.weight.clone())?;
        let b = g.constant(self.output.bias.clone())?;
        self.finish(g, x, w, b)
    }

    /// Generates samples for fixed latent codes and labels.
    pub fn generate(&self, z: &Tensor, labels: &[usize], mode: MaskMode) -> Result<Tensor> {
        let input = self.conditioning(z, labels)?;
        let mut g = Graph::new();
        let out = self.forward_const(&mut g, &input, mode)?;
        Ok(g.value(out).clone())
    }

    /// Rows of the output layer fed by neurons reserved for some finished task.
    pub fn output_row_gate(&self) -> Tensor {
        let last = self.masks.last().expect("at least one hidden layer");
        let n = self.output.inputs();
        let mut active = vec![false; n];
        let cum = last.weights.cumulated();
        let (rows, cols) = cum.shape();
        for (r, c) in (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))) {
            if cum.get(r * cols + c) {
                active[c] = true;
            }
        }
        if let Some(b) = &last.bias {
            for (c, a) in active.iter_mut().enumerate() {
                *a |= b.cumulated().get(c);
            }
        }
        let p = self.output.outputs();
        let mut gate = Tensor::ones(n, p);
        for (r, &a) in active.iter().enumerate() {
            if a {
                for c in 0..p {
                    gate.set(r, c, 0.0);
                }
            }
        }
        gate
    }

    /// Trainable pass for the current task at mask scale `s`.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        input: &Tensor,
        s: f64,
        gating: Gating,
    ) -> Result<GenNodes> {
        let mut x = g.constant(input.clone())?;
        let mut nodes = GenNodes {
            out: x,
            weights: vec![],
            biases: vec![],
            embeddings: vec![],
            bias_embeddings: vec![],
            soft_masks: vec![],
            out_weight: x,
            out_bias: x,
        };
        for (l, layer) in self.hidden.iter().enumerate() {
            let ms = &self.masks[l];
            let gates = match gating {
                Gating::Cumulated => Some(ms.gates(layer.inputs(), None)?),
                Gating::WithCurrent => Some(ms.gates(layer.inputs(), Some(s))?),
                Gating::Bypass => None,
            };
            let (gw, gb) = gates.unzip();
            let w = g.param(layer.weight.clone(), gw)?;
            let b = g.param(layer.bias.clone(), gb)?;
            let e = g.param(ms.embedding.clone(), None)?;
            let se = g.scale(e, s)?;
            let mw = g.sigmoid(se)?;
            let (be, mb) = match &ms.bias_embedding {
                Some(bias_e) => {
                    let be = g.param(bias_e.clone(), None)?;
                    let sb = g.scale(be, s)?;
                    (Some(be), g.sigmoid(sb)?)
                }
                None => (None, mw),
            };
            x = self.masked_layer(g, x, w, b, mw, mb)?;
            nodes.weights.push(w);
            nodes.biases.push(b);
            nodes.embeddings.push(e);
            nodes.bias_embeddings.push(be);
            nodes.soft_masks.push(mw);
        }
        let bias_gate = if self.tasks_learned() > 0 {
            Tensor::zeros(1, self.output.outputs())
        } else {
            Tensor::ones(1, self.output.outputs())
        };
        let (row_gate, bias_gate) = match gating {
            Gating::Bypass => (None, None),
            _ => (Some(self.output_row_gate()), Some(bias_gate)),
        };
        let w = g.param(self.output.weight.clone(), row_gate)?;
        let b = g.param(self.output.bias.clone(), bias_gate)?;
        nodes.out = self.finish(g, x, w, b)?;
        nodes.out_weight = w;
        nodes.out_bias = b;
        Ok(nodes)
    }

    /// `count` samples of finished task `task` under its binary mask. Labels
    /// are drawn uniformly from the task's classes unless given.
    pub fn sample(
        &self,
        task: usize,
        labels: Option<&[usize]>,
        count: usize,
        rng: &mut impl Rng,
    ) -> Result<(Tensor, Vec<usize>)> {
        let classes = task
            .checked_sub(1)
            .and_then(|i| self.task_classes.get(i))
            .ok_or(DgmError::UnknownTask(task))?;
        let labels: Vec<usize> = match labels {
            Some(l) => {
                if let Some(&bad) = l.iter().find(|y| !classes.contains(y)) {
                    return Err(DgmError::UnknownLabel {
                        label: bad,
                        context: format!("task {task}"),
                    });
                }
                l.to_vec()
            }
            None => (0..count)
                .map(|_| classes[rng.random_range(0..classes.len())])
                .collect(),
        };
        if labels.is_empty() {
            return Ok((Tensor::zeros(0, self.spec.output_dim), labels));
        }
        let z = self.draw_latent(labels.len(), rng);
        Ok((
            self.generate(&z, &labels, MaskMode::Snapshot(task))?,
            labels,
        ))
    }

    /// Binarizes the current embeddings of every hidden layer and records
    /// the task. Returns the number of newly reserved entries per layer.
    pub fn finish_task(&mut self, classes: &[usize]) -> Result<Vec<usize>> {
        let mut deltas = Vec::with_capacity(self.masks.len());
        for ms in &mut self.masks {
            let before = ms.weights.cumulated().clone();
            ms.binarize_and_reserve()?;
            deltas.push(reserved_delta(&before, ms.weights.cumulated())?);
        }
        self.task_classes.push(classes.to_vec());
        Ok(deltas)
    }

    /// Grows every hidden layer by the neurons needed to restore its free
    /// capacity. Neuron counts are fixed before any layer changes.
    pub fn expand(
        &mut self,
        task: usize,
        deltas: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Vec<usize>> {
        if deltas.len() != self.hidden.len() {
            return Err(DgmError::shape(
                "expand",
                &[self.hidden.len()],
                &[deltas.len()],
            ));
        }
        let planned: Vec<usize> = self
            .hidden
            .iter()
            .zip(deltas)
            .map(|(layer, &d)| neurons_to_add(layer.variant, layer.inputs(), d))
            .collect();
        for l in 0..self.hidden.len() {
            let added = match self.spec.variant {
                MaskVariant::Dgma => expand_dgma(
                    &mut self.hidden[l],
                    &mut self.masks[l],
                    task,
                    deltas[l],
                    rng,
                )?,
                MaskVariant::Dgmw => expand_dgmw(
                    &mut self.hidden[l],
                    &mut self.masks[l],
                    task,
                    deltas[l],
                    rng,
                )?,
            };
            debug_assert_eq!(added, planned[l]);
        }
        for (l, &added) in planned.iter().enumerate() {
            if l + 1 < self.hidden.len() {
                self.hidden[l + 1].grow_inputs(added, rng);
                self.masks[l + 1].grow(added, 0);
            } else {
                self.output.grow_inputs(added, rng);
            }
        }
        Ok(planned)
    }

    pub fn reset_embeddings(&mut self) {
        for ms in &mut self.masks {
            ms.reset_embeddings();
        }
    }

    /// `(total, free)` mask entries over all hidden layers.
    pub fn capacity(&self) -> (usize, usize) {
        self.masks.iter().fold((0, 0), |(t, f), ms| {
            let (_, free) = occupation(ms.weights.cumulated());
            (t + ms.weights.cumulated().len(), f + free)
        })
    }

    /// Number of scalar parameters, masks excluded.
    pub fn parameter_count(&self) -> usize {
        self.hidden
            .iter()
            .chain(std::iter::once(&self.output))
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn growth_log(&self) -> Vec<Vec<GrowthRecord>> {
        self.hidden.iter().map(|l| l.growth_log.clone()).collect()
    }
}
