//! Conditional generator with task masks, a critic/classifier, their
//! losses, and the alternating update.

mod discriminator;
mod generator;
pub(crate) mod losses;

pub use discriminator::{Dense, DiscNodes, Discriminator};
pub use generator::{
    Gating, GenNodes, Generator, GeneratorSpec, MaskMode, OutputActivation, LEAKY_SLOPE,
};
pub use losses::{
    discriminator_loss, generator_loss, gradient_penalty, DLoss, GLoss, GpPoint, LossWeights,
    ReplayBatch,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DgmError, Result};
use crate::masks::{clamp_embedding_grad, EMBEDDING_GRAD_CLAMP};
use crate::tensor::{Graph, Optimizer, OptimizerKind, ParamGrad, Tensor};
use losses::{build_discriminator_loss, build_generator_loss, DiscInputs};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    pub n_critic: usize,
    pub lambda_gp: f64,
    pub lambda_ru: f64,
    pub gp_point: GpPoint,
    /// Gate generator gradients by the current soft mask as well as the
    /// cumulated one.
    pub gate_current: bool,
    /// Entrywise bound on embedding gradients; 0 disables clamping.
    pub embed_grad_clamp: f64,
    pub batch_size: usize,
    /// Lower bound on replayed samples per previous task and critic step.
    pub replay_min_per_task: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub lr_embed: f64,
    pub optimizer: OptimizerKind,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            n_critic: 5,
            lambda_gp: 10.0,
            lambda_ru: 2.0,
            gp_point: GpPoint::Interpolate,
            gate_current: true,
            embed_grad_clamp: EMBEDDING_GRAD_CLAMP,
            batch_size: 64,
            replay_min_per_task: 8,
            lr_g: 1e-3,
            lr_d: 1e-3,
            lr_embed: 1e-2,
            optimizer: OptimizerKind::adam(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCounters {
    pub d_updates: u64,
    pub g_updates: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StepMetrics {
    /// Loss parts of the last critic update.
    pub d: DLoss,
    pub g: GLoss,
    pub s: f64,
    pub alpha: f64,
}

/// Per-step context supplied by the trainer.
pub struct StepContext<'a> {
    /// Next real batch of the current task.
    pub real: &'a mut dyn FnMut() -> Result<(Tensor, Vec<usize>)>,
    /// Task being learned (1-based).
    pub task: usize,
    pub classes: &'a [usize],
    pub replay: bool,
    pub s: f64,
    pub alpha: f64,
}

/// Generator, discriminator and their optimizer state.
#[derive(Clone, Debug)]
pub struct Dgm {
    pub gen: Generator,
    pub disc: Discriminator,
    pub config: GanConfig,
    pub opt_g: Optimizer,
    pub opt_e: Optimizer,
    pub opt_d: Optimizer,
    pub counters: StepCounters,
    /// Fault-injection hook for the self-test harness.
    pub fault: Option<Fault>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Generator updates ignore all gradient gates.
    GateBypass,
}

impl Dgm {
    pub fn new(gen: Generator, disc: Discriminator, config: GanConfig) -> Result<Self> {
        if config.n_critic == 0 || config.batch_size == 0 {
            return Err(DgmError::invalid(
                "n_critic and batch_size must be positive",
            ));
        }
        if gen.spec.output_dim != disc.input_dim() {
            return Err(DgmError::shape(
                "Dgm",
                &[gen.spec.output_dim],
                &[disc.input_dim()],
            ));
        }
        LossWeights::new(config.lambda_ru, config.lambda_gp, 0.0)?;
        Ok(Dgm {
            opt_g: Optimizer::new(config.optimizer, config.lr_g),
            opt_e: Optimizer::new(config.optimizer, config.lr_embed),
            opt_d: Optimizer::new(config.optimizer, config.lr_d),
            gen,
            disc,
            config,
            counters: StepCounters::default(),
            fault: None,
        })
    }

    pub fn weights(&self, alpha: f64) -> Result<LossWeights> {
        LossWeights::new(self.config.lambda_ru, self.config.lambda_gp, alpha)
    }

    /// Prepares a new task: grows the classifier to cover `classes`, resets
    /// mask embeddings and the generator's optimizer state.
    pub fn begin_task(&mut self, classes: &[usize], rng: &mut impl Rng) -> Result<()> {
        let needed = classes.iter().map(|&c| c + 1).max().unwrap_or(0);
        if needed > self.gen.spec.num_classes {
            return Err(DgmError::UnknownLabel {
                label: needed - 1,
                context: "the generator's label space".into(),
            });
        }
        if needed > self.disc.classes() {
            self.disc.grow_classes(needed - self.disc.classes(), rng);
        }
        self.gen.reset_embeddings();
        self.opt_g.reset();
        self.opt_e.reset();
        Ok(())
    }

    fn uniform_labels(classes: &[usize], n: usize, rng: &mut impl Rng) -> Vec<usize> {
        (0..n)
            .map(|_| classes[rng.random_range(0..classes.len())])
            .collect()
    }

    /// Replay batches for every finished task, equally sized.
    pub fn replay_batches(&self, per_task: usize, rng: &mut impl Rng) -> Result<Vec<ReplayBatch>> {
        (1..=self.gen.tasks_learned())
            .map(|j| {
                let (x, labels) = self.gen.sample(j, None, per_task, rng)?;
                Ok(ReplayBatch { task: j, x, labels })
            })
            .collect()
    }

    pub fn replay_per_task(&self) -> usize {
        let prev = self.gen.tasks_learned().max(1);
        self.config
            .batch_size
            .div_ceil(prev)
            .max(self.config.replay_min_per_task)
    }

    /// One critic update on a real batch, current-task fakes and replay.
    pub fn discriminator_step(
        &mut self,
        ctx: &mut StepContext<'_>,
        rng: &mut impl Rng,
    ) -> Result<DLoss> {
        let (real, real_labels) = (ctx.real)()?;
        let n = real.rows();
        let fake_labels = Self::uniform_labels(ctx.classes, n, rng);
        let z = self.gen.draw_latent(n, rng);
        let fake = self.gen.generate(&z, &fake_labels, MaskMode::Soft(ctx.s))?;
        let replay = if ctx.replay && self.gen.tasks_learned() > 0 {
            self.replay_batches(self.replay_per_task(), rng)?
        } else {
            Vec::new()
        };
        let eps: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let weights = self.weights(ctx.alpha)?;

        let mut g = Graph::new();
        let nodes = self.disc.nodes(&mut g, true)?;
        let inp = DiscInputs {
            real: &real,
            real_labels: &real_labels,
            fake: &fake,
            replay: &replay,
            task: ctx.task,
            current_classes: ctx.classes,
            eps: &eps,
        };
        let parts = build_discriminator_loss(
            &mut g,
            &self.disc,
            &nodes,
            &inp,
            &weights,
            self.config.gp_point,
        )?;
        let mut grads = g.backward(parts.total)?;
        let named = nodes.named();
        let tensors = self
            .disc
            .layers_mut()
            .flat_map(|d| [&mut d.weight, &mut d.bias]);
        for ((name, id), t) in named.into_iter().zip(tensors) {
            let pg = grads.take(id).expect("registered parameter");
            self.opt_d.step(&name, t, &pg)?;
        }
        self.counters.d_updates += 1;
        Ok(parts.values(&g))
    }

    pub fn gating(&self) -> Gating {
        match (self.fault, self.config.gate_current) {
            (Some(Fault::GateBypass), _) => Gating::Bypass,
            (None, true) => Gating::WithCurrent,
            (None, false) => Gating::Cumulated,
        }
    }

    /// One generator update for the current task at mask scale `ctx.s`.
    pub fn generator_step(&mut self, ctx: &StepContext<'_>, rng: &mut impl Rng) -> Result<GLoss> {
        let n = self.config.batch_size;
        let labels = Self::uniform_labels(ctx.classes, n, rng);
        let z = self.gen.draw_latent(n, rng);
        let input = self.gen.conditioning(&z, &labels)?;
        let weights = self.weights(ctx.alpha)?;
        let mut g = Graph::new();
        let (nodes, parts) = build_generator_loss(
            &mut g,
            &self.gen,
            &self.disc,
            &input,
            &labels,
            ctx.s,
            self.gating(),
            &weights,
        )?;
        let mut grads = g.backward(parts.total)?;
        let mut take = |id| grads.take(id).expect("registered parameter");
        for l in 0..self.gen.hidden.len() {
            let w = take(nodes.weights[l]);
            let b = take(nodes.biases[l]);
            self.opt_g
                .step(&format!("g.h{l}.w"), &mut self.gen.hidden[l].weight, &w)?;
            self.opt_g
                .step(&format!("g.h{l}.b"), &mut self.gen.hidden[l].bias, &b)?;
            let mut e = take(nodes.embeddings[l]);
            clamp_embedding_grad(&mut e.grad, self.config.embed_grad_clamp);
            self.opt_e
                .step(&format!("g.e{l}"), &mut self.gen.masks[l].embedding, &e)?;
            if let (Some(id), Some(be)) = (
                nodes.bias_embeddings[l],
                self.gen.masks[l].bias_embedding.as_mut(),
            ) {
                let mut pg: ParamGrad = take(id);
                clamp_embedding_grad(&mut pg.grad, self.config.embed_grad_clamp);
                self.opt_e.step(&format!("g.eb{l}"), be, &pg)?;
            }
        }
        let w = take(nodes.out_weight);
        let b = take(nodes.out_bias);
        self.opt_g
            .step("g.out.w", &mut self.gen.output.weight, &w)?;
        self.opt_g.step("g.out.b", &mut self.gen.output.bias, &b)?;
        self.counters.g_updates += 1;
        Ok(parts.values(&g))
    }

    /// `n_critic` critic updates followed by one generator update.
    pub fn alternate_step(
        &mut self,
        ctx: &mut StepContext<'_>,
        rng: &mut impl Rng,
    ) -> Result<StepMetrics> {
        if ctx.classes.is_empty() {
            return Err(DgmError::invalid("task has no classes"));
        }
        let mut d = DLoss::default();
        for _ in 0..self.config.n_critic {
            d = self.discriminator_step(ctx, rng)?;
        }
        let g = self.generator_step(ctx, rng)?;
        Ok(StepMetrics {
            d,
            g,
            s: ctx.s,
            alpha: ctx.alpha,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::MaskVariant;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(variant: MaskVariant) -> GeneratorSpec {
        GeneratorSpec {
            latent_dim: 3,
            num_classes: 4,
            hidden: vec![6, 5],
            output_dim: 2,
            variant,
            output_activation: OutputActivation::Tanh,
        }
    }

    fn model(variant: MaskVariant, seed: u64) -> (Dgm, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen = Generator::new(spec(variant), &mut rng).unwrap();
        let disc = Discriminator::new(2, &[8], 0, &mut rng);
        let cfg = GanConfig {
            batch_size: 6,
            ..GanConfig::default()
        };
        (Dgm::new(gen, disc, cfg).unwrap(), rng)
    }

    fn real_source(classes: Vec<usize>, seed: u64) -> impl FnMut() -> Result<(Tensor, Vec<usize>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        move || {
            let labels: Vec<usize> = (0..6).map(|i| classes[i % classes.len()]).collect();
            let data = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            Ok((Tensor::matrix(6, 2, data).unwrap(), labels))
        }
    }

    fn linear_disc(w: &[f64]) -> Discriminator {
        Discriminator {
            trunk: vec![],
            adv: Dense {
                weight: Tensor::matrix(w.len(), 1, w.to_vec()).unwrap(),
                bias: Tensor::zeros(1, 1),
            },
            aux: Dense::zeros(w.len(), 4),
        }
    }

    #[test]
    fn penalty_examples() {
        let real = Tensor::matrix(2, 2, vec![0.1, 0.2, -0.4, 0.9]).unwrap();
        let fake = Tensor::matrix(2, 2, vec![0.5, -0.3, 0.2, 0.0]).unwrap();
        let eps = [0.3, 0.8];
        let unit = gradient_penalty(
            &linear_disc(&[0.6, 0.8]),
            &real,
            &fake,
            &eps,
            GpPoint::Interpolate,
        )
        .unwrap();
        assert!(unit.abs() < 1e-12);
        let two = gradient_penalty(
            &linear_disc(&[1.2, 1.6]),
            &real,
            &fake,
            &eps,
            GpPoint::Interpolate,
        )
        .unwrap();
        assert!((two - 1.0).abs() < 1e-9);
        let flat =
            gradient_penalty(&linear_disc(&[0.0, 0.0]), &real, &fake, &eps, GpPoint::Fake).unwrap();
        assert!((flat - 1.0).abs() < 1e-5);
        let mlp = Discriminator::new(2, &[5, 5], 4, &mut ChaCha8Rng::seed_from_u64(3));
        assert!(gradient_penalty(&mlp, &real, &fake, &eps, GpPoint::Interpolate).unwrap() >= 0.0);
        assert!(
            gradient_penalty(&mlp, &real, &fake.select_rows(&[0]), &eps, GpPoint::Fake).is_err()
        );
    }

    #[test]
    fn discriminator_loss_examples() {
        let disc = Discriminator {
            trunk: vec![],
            adv: Dense::zeros(2, 1),
            aux: Dense::zeros(2, 4),
        };
        let x = Tensor::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let w = LossWeights::new(2.0, 10.0, 1.0).unwrap();
        let first = discriminator_loss(
            &disc,
            &x,
            &[0, 1],
            &x,
            &[],
            1,
            &[0, 1],
            &w,
            GpPoint::Fake,
            &[0.5, 0.5],
        )
        .unwrap();
        assert_eq!(first.adversarial, 0.0);
        assert_eq!(first.class_replay, 0.0);
        assert!((first.class_real - 4f64.ln()).abs() < 1e-12);

        let replay = vec![
            ReplayBatch {
                task: 1,
                x: x.clone(),
                labels: vec![0, 0],
            },
            ReplayBatch {
                task: 2,
                x: x.clone(),
                labels: vec![1, 1],
            },
        ];
        let third = discriminator_loss(
            &disc,
            &x,
            &[2, 3],
            &x,
            &replay,
            3,
            &[2, 3],
            &w,
            GpPoint::Fake,
            &[0.5; 2],
        )
        .unwrap();
        assert!((third.class_replay - 2.0 * 4f64.ln()).abs() < 1e-12);
        let recon =
            third.total - (third.adversarial + third.classification + w.lambda_gp * third.penalty);
        assert!(recon.abs() < 1e-12);

        let bad = vec![ReplayBatch {
            task: 1,
            x: x.clone(),
            labels: vec![2, 0],
        }];
        assert!(discriminator_loss(
            &disc,
            &x,
            &[2, 3],
            &x,
            &bad,
            2,
            &[2, 3],
            &w,
            GpPoint::Fake,
            &[0.5; 2]
        )
        .is_err());
        let future = vec![ReplayBatch {
            task: 2,
            x,
            labels: vec![0, 0],
        }];
        let x = Tensor::zeros(2, 2);
        assert!(discriminator_loss(
            &disc,
            &x,
            &[2, 3],
            &x,
            &future,
            2,
            &[2, 3],
            &w,
            GpPoint::Fake,
            &[0.5; 2]
        )
        .is_err());
    }

    #[test]
    fn generator_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gen = Generator::new(spec(MaskVariant::Dgma), &mut rng).unwrap();
        let flat = Discriminator {
            trunk: vec![],
            adv: Dense::zeros(2, 1),
            aux: Dense::zeros(2, 4),
        };
        let z = gen.draw_latent(5, &mut rng);
        let labels = [0, 1, 0, 1, 1];
        let w0 = LossWeights::new(0.0, 10.0, 1.0).unwrap();
        let l = generator_loss(&gen, &flat, &z, &labels, 2.0, Gating::WithCurrent, &w0).unwrap();
        assert_eq!(l.adversarial, 0.0);
        assert!((l.log_likelihood + 4f64.ln()).abs() < 1e-12);
        assert!((l.total - 4f64.ln()).abs() < 1e-12);

        let w = LossWeights::new(2.0, 10.0, 3.0).unwrap();
        assert!((w.regularization(1.0 / 3.0) - 2.0).abs() < 1e-12);
        let l = generator_loss(&gen, &flat, &z, &labels, 2.0, Gating::WithCurrent, &w).unwrap();
        assert!((l.reg_term - w.regularization(l.regularizer)).abs() < 1e-12);
        assert!((l.total - (l.adversarial - l.log_likelihood + l.reg_term)).abs() < 1e-12);

        // A classifier that is sure of the right class lowers the loss.
        let mut confident = flat.clone();
        confident.aux.bias = Tensor::matrix(1, 4, vec![0.0, 50.0, 0.0, 0.0]).unwrap();
        let ones = [1, 1, 1, 1, 1];
        let sure =
            generator_loss(&gen, &confident, &z, &ones, 2.0, Gating::WithCurrent, &w0).unwrap();
        let unsure = generator_loss(&gen, &flat, &z, &ones, 2.0, Gating::WithCurrent, &w0).unwrap();
        assert!(sure.total < unsure.total - 1.0);
    }

    #[test]
    fn sample_contract() {
        let (mut m, mut rng) = model(MaskVariant::Dgmw, 5);
        assert!(matches!(
            m.gen.sample(1, None, 3, &mut rng),
            Err(DgmError::UnknownTask(1))
        ));
        m.gen.finish_task(&[0, 1]).unwrap();
        let (x, y) = m.gen.sample(1, None, 0, &mut rng).unwrap();
        assert_eq!((x.rows(), y.len()), (0, 0));
        let (x, y) = m.gen.sample(1, None, 7, &mut rng).unwrap();
        assert_eq!(x.shape(), &[7, 2]);
        assert!(y.iter().all(|c| *c < 2));
        assert!(m.gen.sample(1, Some(&[3]), 1, &mut rng).is_err());
        let z = m.gen.draw_latent(4, &mut rng);
        let a = m
            .gen
            .generate(&z, &[0, 1, 1, 0], MaskMode::Snapshot(1))
            .unwrap();
        let b = m
            .gen
            .generate(&z, &[0, 1, 1, 0], MaskMode::Snapshot(1))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn critic_count_per_generator_update() {
        let (mut m, mut rng) = model(MaskVariant::Dgma, 6);
        m.begin_task(&[0, 1], &mut rng).unwrap();
        let mut real = real_source(vec![0, 1], 1);
        let mut ctx = StepContext {
            real: &mut real,
            task: 1,
            classes: &[0, 1],
            replay: true,
            s: 1.5,
            alpha: 1.0,
        };
        for _ in 0..3 {
            let metrics = m.alternate_step(&mut ctx, &mut rng).unwrap();
            assert!(metrics.d.total.is_finite() && metrics.g.total.is_finite());
        }
        assert_eq!(
            m.counters,
            StepCounters {
                d_updates: 15,
                g_updates: 3
            }
        );
    }

    #[test]
    fn fully_gated_generator_keeps_weights_but_moves_embeddings() {
        for variant in [MaskVariant::Dgma, MaskVariant::Dgmw] {
            let (mut m, mut rng) = model(variant, 7);
            m.begin_task(&[0, 1], &mut rng).unwrap();
            for ms in &mut m.gen.masks {
                ms.embedding = ms.embedding.map(|_| 1.0);
                if let Some(b) = &mut ms.bias_embedding {
                    *b = b.map(|_| 1.0);
                }
            }
            m.gen.finish_task(&[0, 1]).unwrap();
            m.gen.reset_embeddings();
            m.begin_task(&[2, 3], &mut rng).unwrap();
            let before = m.gen.clone();
            let mut real = real_source(vec![2, 3], 2);
            let mut ctx = StepContext {
                real: &mut real,
                task: 2,
                classes: &[2, 3],
                replay: true,
                s: 3.0,
                alpha: 1.0,
            };
            m.alternate_step(&mut ctx, &mut rng).unwrap();
            for (a, b) in m.gen.hidden.iter().zip(&before.hidden) {
                assert_eq!(a.weight, b.weight);
                assert_eq!(a.bias, b.bias);
            }
            assert_eq!(m.gen.output.weight, before.output.weight);
            assert_eq!(m.gen.output.bias, before.output.bias);
            assert_ne!(m.gen.masks[0].embedding, before.masks[0].embedding);
        }
    }

    #[test]
    fn classifier_growth_keeps_old_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut disc = Discriminator::new(3, &[4], 2, &mut rng);
        let x = Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 0.9, 0.0, -0.5]).unwrap();
        let (_, before) = disc.evaluate(&x).unwrap();
        disc.grow_classes(3, &mut rng);
        let (_, after) = disc.evaluate(&x).unwrap();
        assert_eq!(after.cols(), 5);
        for r in 0..2 {
            assert_eq!(&after.row(r)[..2], before.row(r));
        }
    }

    #[test]
    fn expansion_preserves_old_samples() {
        for variant in [MaskVariant::Dgma, MaskVariant::Dgmw] {
            let (mut m, mut rng) = model(variant, 9);
            for ms in &mut m.gen.masks {
                for e in ms.embedding.data_mut() {
                    *e = if rng.random::<bool>() { 1.0 } else { -1.0 };
                }
            }
            let deltas = m.gen.finish_task(&[0, 1]).unwrap();
            let z = m.gen.draw_latent(6, &mut rng);
            let labels = [0, 1, 0, 1, 1, 0];
            let before = m.gen.generate(&z, &labels, MaskMode::Snapshot(1)).unwrap();
            let added = m.gen.expand(1, &deltas, &mut rng).unwrap();
            assert!(added.iter().sum::<usize>() > 0);
            let after = m.gen.generate(&z, &labels, MaskMode::Snapshot(1)).unwrap();
            assert_eq!(before, after);
        }
    }
}
