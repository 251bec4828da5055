use rand::Rng;

use super::generator::LEAKY_SLOPE;
use crate::error::{DgmError, Result};
use crate::expansion::init_bound;
use crate::tensor::{Graph, NodeId, Tensor};

/// Fully connected layer `x · W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn new(n: usize, p: usize, rng: &mut impl Rng) -> Self {
        let bound = init_bound(n, p);
        let data = (0..n * p)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Dense {
            weight: Tensor::matrix(n, p, data).expect("n*p entries"),
            bias: Tensor::zeros(1, p),
        }
    }

    pub fn zeros(n: usize, p: usize) -> Self {
        Dense {
            weight: Tensor::zeros(n, p),
            bias: Tensor::zeros(1, p),
        }
    }
}

/// Critic and classifier sharing one trunk. The adversarial head has a
/// single linear output; the auxiliary head has one logit per class seen.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub trunk: Vec<Dense>,
    pub adv: Dense,
    pub aux: Dense,
}

/// Graph handles for one discriminator parameter set.
pub struct DiscNodes {
    pub trunk: Vec<(NodeId, NodeId)>,
    pub adv: (NodeId, NodeId),
    pub aux: (NodeId, NodeId),
}

impl DiscNodes {
    /// `(name, node)` pairs in a stable order.
    pub fn named(&self) -> Vec<(String, NodeId)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.trunk.iter().enumerate() {
            out.push((format!("d.trunk{i}.w"), *w));
            out.push((format!("d.trunk{i}.b"), *b));
        }
        out.push(("d.adv.w".into(), self.adv.0));
        out.push(("d.adv.b".into(), self.adv.1));
        out.push(("d.aux.w".into(), self.aux.0));
        out.push(("d.aux.b".into(), self.aux.1));
        out
    }
}

impl Discriminator {
    pub fn new(input_dim: usize, hidden: &[usize], classes: usize, rng: &mut impl Rng) -> Self {
        let mut n = input_dim;
        let mut trunk = Vec::new();
        for &p in hidden {
            trunk.push(Dense::new(n, p, rng));
            n = p;
        }
        Discriminator {
            trunk,
            adv: Dense::new(n, 1, rng),
            aux: Dense::new(n, classes, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.first().unwrap_or(&self.adv).weight.rows()
    }

    pub fn classes(&self) -> usize {
        self.aux.weight.cols()
    }

    /// Adds `extra` auxiliary outputs. Existing logits are untouched.
    pub fn grow_classes(&mut self, extra: usize, rng: &mut impl Rng) {
        if extra == 0 {
            return;
        }
        let bound = init_bound(self.aux.weight.rows(), self.classes() + extra);
        self.aux.weight = self
            .aux
            .weight
            .append_cols(extra, |_, _| rng.random_range(-bound..bound));
        self.aux.bias = self.aux.bias.append_cols(extra, |_, _| 0.0);
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.trunk.iter().chain([&self.adv, &self.aux])
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.trunk.iter_mut().chain([&mut self.adv, &mut self.aux])
    }

    /// `(name, tensor)` pairs matching [`DiscNodes::named`].
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, d) in self.trunk.iter().enumerate() {
            out.push((format!("d.trunk{i}.w"), &d.weight));
            out.push((format!("d.trunk{i}.b"), &d.bias));
        }
        out.push(("d.adv.w".into(), &self.adv.weight));
        out.push(("d.adv.b".into(), &self.adv.bias));
        out.push(("d.aux.w".into(), &self.aux.weight));
        out.push(("d.aux.b".into(), &self.aux.bias));
        out
    }

    /// Records the parameters, as trainable leaves or as constants.
    pub fn nodes(&self, g: &mut Graph, trainable: bool) -> Result<DiscNodes> {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone(), None)
            } else {
                g.constant(t.clone())
            }
        };
        let mut pairs = Vec::new();
        for d in self.layers() {
            pairs.push((leaf(&d.weight)?, leaf(&d.bias)?));
        }
        let aux = pairs.pop().expect("aux head");
        let adv = pairs.pop().expect("adv head");
        Ok(DiscNodes {
            trunk: pairs,
            adv,
            aux,
        })
    }

    /// `(adversarial [r, 1], auxiliary logits [r, K])`.
    pub fn forward(&self, g: &mut Graph, nodes: &DiscNodes, x: NodeId) -> Result<(NodeId, NodeId)> {
        let mut h = x;
        for &(w, b) in &nodes.trunk {
            let pre = g.dense(h, w, b)?;
            h = g.leaky_relu(pre, LEAKY_SLOPE)?;
        }
        let adv = g.dense(h, nodes.adv.0, nodes.adv.1)?;
        let aux = g.dense(h, nodes.aux.0, nodes.aux.1)?;
        Ok((adv, aux))
    }

    /// Plain evaluation of both heads.
    pub fn evaluate(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let nodes = self.nodes(&mut g, false)?;
        let xi = g.constant(x.clone())?;
        let (adv, aux) = self.forward(&mut g, &nodes, xi)?;
        Ok((g.value(adv).clone(), g.value(aux).clone()))
    }

    /// Arg-max class of each row, evaluated in chunks.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        if x.cols() != self.input_dim() {
            return Err(DgmError::shape(
                "predict",
                x.shape(),
                &[x.rows(), self.input_dim()],
            ));
        }
        let mut out = Vec::with_capacity(x.rows());
        let chunk = 512;
        let mut start = 0;
        while start < x.rows() {
            let idx: Vec<usize> = (start..(start + chunk).min(x.rows())).collect();
            let (_, logits) = self.evaluate(&x.select_rows(&idx))?;
            for r in 0..logits.rows() {
                let row = logits.row(r);
                let best = row
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
                out.push(best);
            }
            start += chunk;
        }
        Ok(out)
    }
}
