use serde::{Deserialize, Serialize};

use super::discriminator::{DiscNodes, Discriminator};
use super::generator::{Gating, GenNodes, Generator};
use crate::error::{DgmError, Result};
use crate::masks::regularizer_node;
use crate::tensor::{Graph, NodeId, Tensor};

/// Where the critic's input gradient is penalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GpPoint {
    /// Random interpolates between real and generated samples.
    #[default]
    Interpolate,
    /// The generated samples themselves.
    Fake,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ru: f64,
    pub lambda_gp: f64,
    /// Capacity ratio scaling the regularizer, refreshed every task.
    pub alpha: f64,
}

impl LossWeights {
    pub fn new(lambda_ru: f64, lambda_gp: f64, alpha: f64) -> Result<Self> {
        for (name, v) in [
            ("lambda_ru", lambda_ru),
            ("lambda_gp", lambda_gp),
            ("alpha", alpha),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(DgmError::invalid(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(LossWeights {
            lambda_ru,
            lambda_gp,
            alpha,
        })
    }

    /// Contribution `α · λ_RU · R` of the regularizer to the generator loss.
    pub fn regularization(&self, r: f64) -> f64 {
        self.alpha * self.lambda_ru * r
    }
}

/// Parts of the discriminator loss. `total = adversarial + classification
/// + lambda_gp * penalty` and `classification = class_real + class_replay`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct DLoss {
    pub total: f64,
    pub adversarial: f64,
    pub classification: f64,
    pub class_real: f64,
    pub class_replay: f64,
    pub penalty: f64,
}

/// Parts of the generator loss: `total = adversarial - log_likelihood +
/// reg_term`, where `log_likelihood` is the mean log-probability the
/// auxiliary head assigns to the conditioning labels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct GLoss {
    pub total: f64,
    pub adversarial: f64,
    pub log_likelihood: f64,
    pub regularizer: f64,
    pub reg_term: f64,
}

/// Generated samples of a finished task, labelled with that task's classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBatch {
    pub task: usize,
    pub x: Tensor,
    pub labels: Vec<usize>,
}

pub(crate) struct DLossNodes {
    pub total: NodeId,
    pub adversarial: NodeId,
    pub class_real: NodeId,
    pub class_replay: Option<NodeId>,
    pub penalty: NodeId,
}

impl DLossNodes {
    pub fn values(&self, g: &Graph) -> DLoss {
        let v = |n: NodeId| g.value(n).item();
        let class_real = v(self.class_real);
        let class_replay = self.class_replay.map_or(0.0, v);
        DLoss {
            total: v(self.total),
            adversarial: v(self.adversarial),
            classification: class_real + class_replay,
            class_real,
            class_replay,
            penalty: v(self.penalty),
        }
    }
}

pub(crate) struct GLossNodes {
    pub total: NodeId,
    pub adversarial: NodeId,
    pub log_likelihood: NodeId,
    pub regularizer: NodeId,
    pub reg_term: NodeId,
}

impl GLossNodes {
    pub fn values(&self, g: &Graph) -> GLoss {
        let v = |n: NodeId| g.value(n).item();
        GLoss {
            total: v(self.total),
            adversarial: v(self.adversarial),
            log_likelihood: v(self.log_likelihood),
            regularizer: v(self.regularizer),
            reg_term: v(self.reg_term),
        }
    }
}

fn penalty_input(real: &Tensor, fake: &Tensor, eps: &[f64], point: GpPoint) -> Result<Tensor> {
    if real.shape() != fake.shape() {
        return Err(DgmError::shape(
            "gradient_penalty",
            real.shape(),
            fake.shape(),
        ));
    }
    match point {
        GpPoint::Fake => Ok(fake.clone()),
        GpPoint::Interpolate => {
            if eps.len() != real.rows() {
                return Err(DgmError::shape(
                    "gradient_penalty eps",
                    &[real.rows()],
                    &[eps.len()],
                ));
            }
            let c = real.cols();
            let data = real
                .data()
                .iter()
                .zip(fake.data())
                .enumerate()
                .map(|(i, (&r, &f))| {
                    let e = eps[i / c];
                    e * r + (1.0 - e) * f
                })
                .collect();
            Tensor::matrix(real.rows(), c, data)
        }
    }
}

/// `mean((‖∇_x D_adv(x̂)‖ - 1)²)` as a node that is differentiable with
/// respect to the critic's parameters.
pub(crate) fn penalty_node(
    g: &mut Graph,
    disc: &Discriminator,
    nodes: &DiscNodes,
    real: &Tensor,
    fake: &Tensor,
    eps: &[f64],
    point: GpPoint,
) -> Result<NodeId> {
    let x_hat = g.input(penalty_input(real, fake, eps, point)?)?;
    let (adv, _) = disc.forward(g, nodes, x_hat)?;
    let total = g.sum(adv)?;
    let norm = g.input_gradient_norm(total, x_hat)?;
    let dev = g.add_scalar(norm, -1.0)?;
    let sq = g.square(dev)?;
    g.mean(sq)
}

/// Gradient penalty value; `eps` holds one interpolation weight per row.
pub fn gradient_penalty(
    disc: &Discriminator,
    real: &Tensor,
    fake: &Tensor,
    eps: &[f64],
    point: GpPoint,
) -> Result<f64> {
    let mut g = Graph::new();
    let nodes = disc.nodes(&mut g, false)?;
    let n = penalty_node(&mut g, disc, &nodes, real, fake, eps, point)?;
    Ok(g.value(n).item())
}

pub(crate) struct DiscInputs<'a> {
    pub real: &'a Tensor,
    pub real_labels: &'a [usize],
    pub fake: &'a Tensor,
    pub replay: &'a [ReplayBatch],
    pub task: usize,
    pub current_classes: &'a [usize],
    pub eps: &'a [f64],
}

pub(crate) fn build_discriminator_loss(
    g: &mut Graph,
    disc: &Discriminator,
    nodes: &DiscNodes,
    inp: &DiscInputs<'_>,
    weights: &LossWeights,
    point: GpPoint,
) -> Result<DLossNodes> {
    for rb in inp.replay {
        if rb.task == 0 || rb.task >= inp.task {
            return Err(DgmError::UnknownTask(rb.task));
        }
        if let Some(&bad) = rb.labels.iter().find(|y| inp.current_classes.contains(y)) {
            return Err(DgmError::UnknownLabel {
                label: bad,
                context: format!("replay of task {}", rb.task),
            });
        }
    }
    let xr = g.constant(inp.real.clone())?;
    let xf = g.constant(inp.fake.clone())?;
    let (adv_r, aux_r) = disc.forward(g, nodes, xr)?;
    let (adv_f, _) = disc.forward(g, nodes, xf)?;
    let mr = g.mean(adv_r)?;
    let mf = g.mean(adv_f)?;
    let adversarial = g.sub(mf, mr)?;

    let class_real = g.cross_entropy(aux_r, inp.real_labels)?;
    let mut class_replay = None;
    for rb in inp.replay.iter().filter(|rb| !rb.labels.is_empty()) {
        let x = g.constant(rb.x.clone())?;
        let (_, aux) = disc.forward(g, nodes, x)?;
        let ce = g.cross_entropy(aux, &rb.labels)?;
        class_replay = Some(match class_replay {
            Some(acc) => g.add(acc, ce)?,
            None => ce,
        });
    }
    let classification = match class_replay {
        Some(r) => g.add(class_real, r)?,
        None => class_real,
    };

    let penalty = penalty_node(g, disc, nodes, inp.real, inp.fake, inp.eps, point)?;
    let weighted = g.scale(penalty, weights.lambda_gp)?;
    let partial = g.add(adversarial, classification)?;
    let total = g.add(partial, weighted)?;
    Ok(DLossNodes {
        total,
        adversarial,
        class_real,
        class_replay,
        penalty,
    })
}

/// Discriminator loss for one batch: critic term on real versus generated
/// samples, cross-entropy on real samples and on every replay batch, and
/// the weighted gradient penalty.
#[allow(clippy::too_many_arguments)]
pub fn discriminator_loss(
    disc: &Discriminator,
    real: &Tensor,
    real_labels: &[usize],
    fake: &Tensor,
    replay: &[ReplayBatch],
    task: usize,
    current_classes: &[usize],
    weights: &LossWeights,
    point: GpPoint,
    eps: &[f64],
) -> Result<DLoss> {
    let mut g = Graph::new();
    let nodes = disc.nodes(&mut g, false)?;
    let inp = DiscInputs {
        real,
        real_labels,
        fake,
        replay,
        task,
        current_classes,
        eps,
    };
    Ok(build_discriminator_loss(&mut g, disc, &nodes, &inp, weights, point)?.values(&g))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn build_generator_loss(
    g: &mut Graph,
    gen: &Generator,
    disc: &Discriminator,
    input: &Tensor,
    labels: &[usize],
    s: f64,
    gating: Gating,
    weights: &LossWeights,
) -> Result<(GenNodes, GLossNodes)> {
    let nodes = gen.forward_train(g, input, s, gating)?;
    let dn = disc.nodes(g, false)?;
    let (adv, aux) = disc.forward(g, &dn, nodes.out)?;
    let m = g.mean(adv)?;
    let adversarial = g.scale(m, -1.0)?;
    // The classification term is the expected log-likelihood of the
    // conditioning labels, subtracted, so the generator is rewarded for
    // samples the auxiliary head recognizes.
    let ce = g.cross_entropy(aux, labels)?;
    let log_likelihood = g.scale(ce, -1.0)?;
    let previous: Vec<Tensor> = gen.masks.iter().map(|m| m.cumulated_tensors().0).collect();
    let regularizer = regularizer_node(g, &nodes.soft_masks, &previous)?;
    let reg_term = g.scale(regularizer, weights.alpha * weights.lambda_ru)?;
    let partial = g.sub(adversarial, log_likelihood)?;
    let total = g.add(partial, reg_term)?;
    Ok((
        nodes,
        GLossNodes {
            total,
            adversarial,
            log_likelihood,
            regularizer,
            reg_term,
        },
    ))
}

/// Generator loss for latent codes `z` and labels of the current task.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss(
    gen: &Generator,
    disc: &Discriminator,
    z: &Tensor,
    labels: &[usize],
    s: f64,
    gating: Gating,
    weights: &LossWeights,
) -> Result<GLoss> {
    let input = gen.conditioning(z, labels)?;
    let mut g = Graph::new();
    let (_, parts) = build_generator_loss(&mut g, gen, disc, &input, labels, s, gating, weights)?;
    Ok(parts.values(&g))
}
