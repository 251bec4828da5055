//! Invariant suites behind `dgm selftest`, also reused by the acceptance tests.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::RunConfig;
use crate::error::Result;
use crate::expansion::{expand_dgma, expand_dgmw, free_capacity, reserved_delta, LayerSlot};
use crate::masks::{regularizer, regularizer_node, BinaryMask, MaskState, MaskVariant};
use crate::memory::losses::{build_discriminator_loss, build_generator_loss, DiscInputs};
use crate::memory::{
    Discriminator, Fault, Gating, Generator, GeneratorSpec, GpPoint, LossWeights, MaskMode,
    OutputActivation, ReplayBatch,
};
use crate::tensor::{Graph, Tensor};
use crate::trainer::{build_stream, Trainer};

pub const GRAD_TOLERANCE: f64 = 1e-5;
const FD_STEP: f64 = 1e-5;
/// Trials whose LeakyReLU inputs come closer than this to zero are redrawn:
/// central differences straddling a kink do not estimate a derivative.
pub const KINK_MARGIN: f64 = 1e-4;
const MAX_REDRAWS: u64 = 1000;

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct SelftestOptions {
    pub seed: u64,
    /// Random trials per gradient-check network (discriminator and generator).
    pub gradient_trials: usize,
    pub expansion_cases: usize,
    pub regularizer_pairs: usize,
    pub fault: Option<Fault>,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        SelftestOptions {
            seed: 0,
            gradient_trials: 100,
            expansion_cases: 500,
            regularizer_pairs: 1000,
            fault: None,
        }
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> SuiteResult {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    SuiteResult {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Runs every suite in order.
pub fn run_selftest(opts: &SelftestOptions) -> Vec<SuiteResult> {
    vec![
        timed("gradient-check", || {
            let worst = gradient_check(opts.seed, opts.gradient_trials)?;
            Ok((
                worst.error <= GRAD_TOLERANCE,
                format!(
                    "{} trials ({} draws near a kink redrawn), worst relative error {:.3e} ({})",
                    worst.trials, worst.redrawn, worst.error, worst.what
                ),
            ))
        }),
        timed("freeze-exactness", || {
            let f = freeze_exactness(opts.seed, opts.fault)?;
            Ok((
                f.changed == 0,
                format!(
                    "{} frozen entries checked, {} changed",
                    f.checked, f.changed
                ),
            ))
        }),
        timed("replay-stability", || {
            let f = replay_stability(opts.seed, opts.fault)?;
            Ok((
                f.changed == 0,
                format!(
                    "{} generated values compared, {} changed",
                    f.checked, f.changed
                ),
            ))
        }),
        timed("expansion-arithmetic", || {
            let bad = expansion_arithmetic(opts.seed, opts.expansion_cases)?;
            Ok((
                bad.is_empty(),
                describe_failures(opts.expansion_cases, &bad),
            ))
        }),
        timed("regularizer-bounds", || {
            let bad = regularizer_bounds(opts.seed, opts.regularizer_pairs)?;
            Ok((
                bad.is_empty(),
                describe_failures(opts.regularizer_pairs + 1, &bad),
            ))
        }),
    ]
}

fn describe_failures(cases: usize, bad: &[String]) -> String {
    match bad.first() {
        None => format!("{cases} cases"),
        Some(first) => format!("{} of {cases} cases failed, first: {first}", bad.len()),
    }
}

fn normal_tensor(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            scale * v
        })
        .collect();
    Tensor::matrix(rows, cols, data).expect("sized buffer")
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `loss` over every entry of the tensors reached
/// through `slot(k)` for `k` in `0..count`.
fn numeric_gradient<M: Clone>(
    model: &M,
    count: usize,
    slot: impl Fn(&mut M, usize) -> &mut Tensor,
    loss: impl Fn(&M) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    let mut work = model.clone();
    for k in 0..count {
        let len = slot(&mut work, k).len();
        for i in 0..len {
            let orig = slot(&mut work, k).data()[i];
            slot(&mut work, k).data_mut()[i] = orig + FD_STEP;
            let up = loss(&work)?;
            slot(&mut work, k).data_mut()[i] = orig - FD_STEP;
            let down = loss(&work)?;
            slot(&mut work, k).data_mut()[i] = orig;
            out.push((up - down) / (2.0 * FD_STEP));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct GradientWorst {
    pub error: f64,
    pub what: String,
    pub trials: usize,
    /// Draws rejected for lying within [`KINK_MARGIN`] of a kink.
    pub redrawn: usize,
}

/// First smooth draw of `trial`, starting at `seed`.
fn smooth_trial(
    seed: u64,
    redrawn: &mut usize,
    trial: impl Fn(u64) -> Result<Option<f64>>,
) -> Result<f64> {
    for k in 0..MAX_REDRAWS {
        if let Some(err) = trial(seed.wrapping_add(k.wrapping_mul(0x9e37_79b9_7f4a_7c15)))? {
            return Ok(err);
        }
        *redrawn += 1;
    }
    Err(crate::DgmError::invalid(
        "no smooth draw found for gradient check",
    ))
}

fn disc_slot(d: &mut Discriminator, k: usize) -> &mut Tensor {
    let layer = d.layers_mut().nth(k / 2).expect("layer index");
    if k.is_multiple_of(2) {
        &mut layer.weight
    } else {
        &mut layer.bias
    }
}

fn random_widths(rng: &mut impl Rng) -> Vec<usize> {
    let layers = rng.random_range(1..=2);
    (0..layers).map(|_| rng.random_range(3..=16)).collect()
}

/// Discriminator loss, gradient penalty included, against finite
/// differences in every critic parameter. Returns the relative error, or
/// `None` when the draw lies too close to a kink.
pub fn discriminator_gradient_trial(seed: u64) -> Result<Option<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.random_range(2..=6);
    let classes = 4;
    let disc = Discriminator::new(dim, &random_widths(&mut rng), classes, &mut rng);
    let rows = rng.random_range(2..=5);
    let real = normal_tensor(rows, dim, 1.0, &mut rng);
    let fake = normal_tensor(rows, dim, 1.0, &mut rng);
    let real_labels: Vec<usize> = (0..rows).map(|_| rng.random_range(2..4)).collect();
    let replay = vec![ReplayBatch {
        task: 1,
        x: normal_tensor(3, dim, 1.0, &mut rng),
        labels: vec![0, 1, 0],
    }];
    let eps: Vec<f64> = (0..rows).map(|_| rng.random::<f64>()).collect();
    let point = if rng.random_bool(0.5) {
        GpPoint::Interpolate
    } else {
        GpPoint::Fake
    };
    let weights = LossWeights::new(2.0, rng.random_range(0.5..10.0), 1.0)?;
    let inputs = DiscInputs {
        real: &real,
        real_labels: &real_labels,
        fake: &fake,
        replay: &replay,
        task: 2,
        current_classes: &[2, 3],
        eps: &eps,
    };

    let mut g = Graph::new();
    let nodes = disc.nodes(&mut g, true)?;
    let loss = build_discriminator_loss(&mut g, &disc, &nodes, &inputs, &weights, point)?;
    if g.kink_margin() < KINK_MARGIN {
        return Ok(None);
    }
    let params: Vec<_> = nodes.named().into_iter().map(|(_, n)| n).collect();
    let grads = g.grad(loss.total, &params)?;
    let mut analytic = Vec::new();
    for (p, gr) in params.iter().zip(grads) {
        match gr {
            Some(n) => analytic.extend_from_slice(g.value(n).data()),
            None => analytic.extend(std::iter::repeat_n(0.0, g.value(*p).len())),
        }
    }

    let numeric = numeric_gradient(&disc, params.len(), disc_slot, |d| {
        let mut g = Graph::new();
        let nodes = d.nodes(&mut g, false)?;
        let l = build_discriminator_loss(&mut g, d, &nodes, &inputs, &weights, point)?;
        Ok(g.value(l.total).item())
    })?;
    Ok(Some(relative_error(&analytic, &numeric)))
}

fn gen_slots(gen: &Generator) -> Vec<(usize, u8)> {
    let mut out = Vec::new();
    for (l, ms) in gen.masks.iter().enumerate() {
        out.extend([(l, 0), (l, 1), (l, 2)]);
        if ms.bias_embedding.is_some() {
            out.push((l, 3));
        }
    }
    out.extend([(usize::MAX, 0), (usize::MAX, 1)]);
    out
}

fn gen_slot(gen: &mut Generator, key: (usize, u8)) -> &mut Tensor {
    match key {
        (usize::MAX, 0) => &mut gen.output.weight,
        (usize::MAX, _) => &mut gen.output.bias,
        (l, 0) => &mut gen.hidden[l].weight,
        (l, 1) => &mut gen.hidden[l].bias,
        (l, 2) => &mut gen.masks[l].embedding,
        (l, _) => gen.masks[l]
            .bias_embedding
            .as_mut()
            .expect("bias embedding"),
    }
}

fn randomize_embeddings(gen: &mut Generator, rng: &mut impl Rng) {
    for ms in &mut gen.masks {
        ms.embedding = normal_tensor(ms.embedding.rows(), ms.embedding.cols(), 1.0, rng);
        if let Some(b) = &mut ms.bias_embedding {
            *b = normal_tensor(b.rows(), b.cols(), 1.0, rng);
        }
    }
}

/// Generator loss against finite differences in hidden weights, biases,
/// mask embeddings and the output layer, for a generator that has already
/// reserved and grown for one task. Returns the relative error, or `None`
/// when the draw lies too close to a kink.
pub fn generator_gradient_trial(seed: u64, variant: MaskVariant) -> Result<Option<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = GeneratorSpec {
        latent_dim: rng.random_range(1..=4),
        num_classes: 4,
        hidden: random_widths(&mut rng),
        output_dim: rng.random_range(2..=5),
        variant,
        output_activation: if rng.random_bool(0.5) {
            OutputActivation::Tanh
        } else {
            OutputActivation::Linear
        },
    };
    let mut gen = Generator::new(spec, &mut rng)?;
    randomize_embeddings(&mut gen, &mut rng);
    let deltas = gen.finish_task(&[0, 1])?;
    gen.expand(1, &deltas, &mut rng)?;
    randomize_embeddings(&mut gen, &mut rng);
    let disc = Discriminator::new(gen.spec.output_dim, &random_widths(&mut rng), 4, &mut rng);

    let rows = rng.random_range(2..=5);
    let z = gen.draw_latent(rows, &mut rng);
    let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(2..4)).collect();
    let input = gen.conditioning(&z, &labels)?;
    let s = rng.random_range(0.5..4.0);
    let weights = LossWeights::new(2.0, 10.0, rng.random_range(1.0..3.0))?;

    let mut g = Graph::new();
    let (nodes, loss) = build_generator_loss(
        &mut g,
        &gen,
        &disc,
        &input,
        &labels,
        s,
        Gating::WithCurrent,
        &weights,
    )?;
    if g.kink_margin() < KINK_MARGIN {
        return Ok(None);
    }
    let mut params = Vec::new();
    for l in 0..nodes.weights.len() {
        params.extend([nodes.weights[l], nodes.biases[l], nodes.embeddings[l]]);
        params.extend(nodes.bias_embeddings[l]);
    }
    params.extend([nodes.out_weight, nodes.out_bias]);
    let grads = g.grad(loss.total, &params)?;
    let mut analytic = Vec::new();
    for (p, gr) in params.iter().zip(grads) {
        match gr {
            Some(n) => analytic.extend_from_slice(g.value(n).data()),
            None => analytic.extend(std::iter::repeat_n(0.0, g.value(*p).len())),
        }
    }

    let keys = gen_slots(&gen);
    let numeric = numeric_gradient(
        &gen,
        keys.len(),
        |m, k| gen_slot(m, keys[k]),
        |m| {
            let mut g = Graph::new();
            let (_, l) = build_generator_loss(
                &mut g,
                m,
                &disc,
                &input,
                &labels,
                s,
                Gating::WithCurrent,
                &weights,
            )?;
            Ok(g.value(l.total).item())
        },
    )?;
    Ok(Some(relative_error(&analytic, &numeric)))
}

/// `trials` discriminator checks and `trials` generator checks alternating
/// between the two mask variants. Reports the worst case.
pub fn gradient_check(seed: u64, trials: usize) -> Result<GradientWorst> {
    let mut worst = GradientWorst::default();
    let mut redrawn = 0;
    for i in 0..trials {
        let s = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let variant = if i % 2 == 0 {
            MaskVariant::Dgma
        } else {
            MaskVariant::Dgmw
        };
        let d = smooth_trial(s, &mut redrawn, discriminator_gradient_trial)?;
        let g = smooth_trial(s, &mut redrawn, |s| generator_gradient_trial(s, variant))?;
        for (what, err) in [
            ("discriminator", d),
            (
                if i % 2 == 0 {
                    "generator dgma"
                } else {
                    "generator dgmw"
                },
                g,
            ),
        ] {
            if err > worst.error || worst.what.is_empty() {
                worst.error = err;
                worst.what = format!("{what}, trial {i}");
            }
        }
    }
    worst.trials = 2 * trials;
    worst.redrawn = redrawn;
    Ok(worst)
}

/// Small three-task run on the Gaussian stream used by the freeze check.
pub fn freeze_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    cfg.model.variant = MaskVariant::Dgmw;
    cfg.model.g_hidden = vec![16, 16];
    cfg.model.d_hidden = vec![16];
    cfg.data.num_tasks = 3;
    cfg.data.samples_per_class = 40;
    cfg.schedule.epochs = 5;
    cfg.schedule.batches_per_epoch = 8;
    cfg.schedule.batch_size = 16;
    cfg.losses.n_critic = 2;
    cfg
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FreezeOutcome {
    pub checked: usize,
    pub changed: usize,
}

/// `(row, col, value)` of every generator entry reserved after task 1:
/// hidden weights and biases under a cumulated mask of 1, and the output
/// rows and bias that are frozen from then on.
fn frozen_entries(gen: &Generator) -> Vec<(usize, usize, usize, f64)> {
    let mut out = Vec::new();
    for (l, (layer, ms)) in gen.hidden.iter().zip(&gen.masks).enumerate() {
        let (cw, cb) = ms.cumulated_tensors();
        let w = &layer.weight;
        for r in 0..w.rows() {
            for c in 0..w.cols() {
                let m = if cw.rows() == 1 {
                    cw.get(0, c)
                } else {
                    cw.get(r, c)
                };
                if m == 1.0 {
                    out.push((2 * l, r, c, w.get(r, c)));
                }
            }
        }
        for c in 0..layer.bias.cols() {
            if cb.get(0, c) == 1.0 {
                out.push((2 * l + 1, 0, c, layer.bias.get(0, c)));
            }
        }
    }
    let base = 2 * gen.hidden.len();
    let gate = gen.output_row_gate();
    let w = &gen.output.weight;
    for r in 0..w.rows() {
        for c in 0..w.cols() {
            if gate.get(r, c) == 0.0 {
                out.push((base, r, c, w.get(r, c)));
            }
        }
    }
    for c in 0..gen.output.bias.cols() {
        out.push((base + 1, 0, c, gen.output.bias.get(0, c)));
    }
    out
}

fn entry(gen: &Generator, tensor: usize, r: usize, c: usize) -> f64 {
    let base = 2 * gen.hidden.len();
    let t = match tensor {
        t if t == base => &gen.output.weight,
        t if t == base + 1 => &gen.output.bias,
        t if t % 2 == 0 => &gen.hidden[t / 2].weight,
        t => &gen.hidden[t / 2].bias,
    };
    t.get(r, c)
}

/// Trains three tasks and compares every entry frozen after task 1 bit for bit.
pub fn freeze_exactness(seed: u64, fault: Option<Fault>) -> Result<FreezeOutcome> {
    let cfg = freeze_config(seed);
    let loaded = build_stream(&cfg)?;
    let mut trainer = Trainer::new(cfg, &loaded.stream)?;
    trainer.model.fault = fault;
    trainer.train_task(&loaded.stream, 1)?;
    let frozen = frozen_entries(&trainer.model.gen);
    for t in 2..=3 {
        trainer.train_task(&loaded.stream, t)?;
    }
    let gen = &trainer.model.gen;
    let changed = frozen
        .iter()
        .filter(|&&(t, r, c, v)| entry(gen, t, r, c).to_bits() != v.to_bits())
        .count();
    Ok(FreezeOutcome {
        checked: frozen.len(),
        changed,
    })
}

/// Generates task-1 samples from fixed `(z, y)` under its binary snapshot
/// after task 1 and again after task 3, comparing every value bit for bit.
pub fn replay_stability(seed: u64, fault: Option<Fault>) -> Result<FreezeOutcome> {
    let cfg = freeze_config(seed);
    let loaded = build_stream(&cfg)?;
    let mut trainer = Trainer::new(cfg, &loaded.stream)?;
    trainer.model.fault = fault;
    trainer.train_task(&loaded.stream, 1)?;
    let classes = loaded.stream.task(1)?.classes.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e9a);
    let z = trainer.model.gen.draw_latent(64, &mut rng);
    let labels: Vec<usize> = (0..64).map(|i| classes[i % classes.len()]).collect();
    let before = trainer
        .model
        .gen
        .generate(&z, &labels, MaskMode::Snapshot(1))?;
    for t in 2..=3 {
        trainer.train_task(&loaded.stream, t)?;
    }
    let after = trainer
        .model
        .gen
        .generate(&z, &labels, MaskMode::Snapshot(1))?;
    let changed = before
        .data()
        .iter()
        .zip(after.data())
        .filter(|(a, b)| a.to_bits() != b.to_bits())
        .count();
    Ok(FreezeOutcome {
        checked: before.len(),
        changed,
    })
}

/// Reserves `k` random free entries of `masks` and returns the cumulated
/// mask from before.
fn reserve_random(masks: &mut MaskState, k: usize, rng: &mut impl Rng) -> Result<BinaryMask> {
    let before = masks.weights.cumulated().clone();
    let mut free: Vec<usize> = (0..before.len()).filter(|&i| !before.get(i)).collect();
    let mut e = masks.embedding.map(|_| -1.0);
    for _ in 0..k.min(free.len()) {
        let j = rng.random_range(0..free.len());
        e.data_mut()[free.swap_remove(j)] = 1.0;
    }
    masks.embedding = e;
    masks.binarize_and_reserve()?;
    masks.reset_embeddings();
    Ok(before)
}

/// Randomized `(n, p, δ)` in `1..=64`: an activation-masked layer returns to
/// `p` free neurons, a weight-masked one to `np + ((n − δ mod n) mod n)`
/// free weights. Returns descriptions of the failing cases.
pub fn expansion_arithmetic(seed: u64, cases: usize) -> Result<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut bad = Vec::new();
    for i in 0..cases {
        let variant = if i % 2 == 0 {
            MaskVariant::Dgma
        } else {
            MaskVariant::Dgmw
        };
        let n = rng.random_range(1..=64);
        let p = rng.random_range(1..=64);
        let cap = match variant {
            MaskVariant::Dgma => p,
            MaskVariant::Dgmw => n * p,
        };
        let delta = rng.random_range(1..=64usize.min(cap));
        let mut layer = LayerSlot::new(n, p, variant, &mut rng);
        let mut masks = MaskState::new(variant, n, p);
        let before = reserve_random(&mut masks, delta, &mut rng)?;
        let measured = reserved_delta(&before, masks.weights.cumulated())?;
        let (free, expected) = match variant {
            MaskVariant::Dgma => {
                expand_dgma(&mut layer, &mut masks, 1, measured, &mut rng)?;
                (free_capacity(&layer, masks.weights.cumulated())?, p)
            }
            MaskVariant::Dgmw => {
                expand_dgmw(&mut layer, &mut masks, 1, measured, &mut rng)?;
                (
                    free_capacity(&layer, masks.weights.cumulated())?,
                    n * p + (n - delta % n) % n,
                )
            }
        };
        if measured != delta || free != expected {
            bad.push(format!(
                "{variant} n={n} p={p} delta={delta}: measured delta {measured}, free {free}, expected {expected}"
            ));
        }
    }
    Ok(bad)
}

/// Hand case `1/3` plus `pairs` random (binary previous, soft current)
/// pairs that must give a value in `[0, 1]` agreeing with the graph version.
pub fn regularizer_bounds(seed: u64, pairs: usize) -> Result<Vec<String>> {
    let mut bad = Vec::new();
    let prev = Tensor::matrix(1, 4, vec![1.0, 0.0, 0.0, 0.0])?;
    let cur = Tensor::matrix(1, 4, vec![1.0, 0.8, 0.2, 0.0])?;
    let r = regularizer(&[cur], &[prev])?;
    if (r - 1.0 / 3.0).abs() > 1e-12 {
        bad.push(format!("hand case gave {r}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4e6);
    for i in 0..pairs {
        let layers = rng.random_range(1..=3);
        let mut current = Vec::new();
        let mut previous = Vec::new();
        for _ in 0..layers {
            let (rows, cols) = (rng.random_range(1..=8), rng.random_range(1..=8));
            let density = rng.random::<f64>();
            current.push(Tensor::matrix(
                rows,
                cols,
                (0..rows * cols).map(|_| rng.random::<f64>()).collect(),
            )?);
            previous.push(Tensor::matrix(
                rows,
                cols,
                (0..rows * cols)
                    .map(|_| f64::from(rng.random_bool(density)))
                    .collect(),
            )?);
        }
        let r = regularizer(&current, &previous)?;
        let mut g = Graph::new();
        let ids = current
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let node = regularizer_node(&mut g, &ids, &previous)?;
        let rn = g.value(node).item();
        if !(0.0..=1.0).contains(&r) || (r - rn).abs() > 1e-12 {
            bad.push(format!("pair {i}: R = {r}, graph {rn}"));
        }
    }
    Ok(bad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_cases() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
        assert!((relative_error(&[3.0, 4.0], &[3.0, 4.0 + 5e-6]) - 1e-6).abs() < 1e-12);
    }

    #[test]
    fn single_gradient_trials_pass() {
        let worst = gradient_check(7, 4).unwrap();
        assert_eq!(worst.trials, 8);
        assert!(worst.error < GRAD_TOLERANCE, "{worst:?}");
    }

    #[test]
    fn numeric_gradient_detects_a_wrong_gradient() {
        let d = Discriminator::new(2, &[3], 2, &mut ChaCha8Rng::seed_from_u64(0));
        let num = numeric_gradient(&d, 1, disc_slot, |d| {
            Ok(d.trunk[0].weight.data().iter().map(|w| w * w).sum())
        })
        .unwrap();
        let exact: Vec<f64> = d.trunk[0].weight.data().iter().map(|w| 2.0 * w).collect();
        assert!(relative_error(&exact, &num) < 1e-9);
        let wrong: Vec<f64> = exact.iter().map(|g| 1.01 * g).collect();
        assert!(relative_error(&wrong, &num) > 1e-3);
    }

    #[test]
    fn expansion_and_regularizer_suites_pass() {
        assert!(expansion_arithmetic(1, 100).unwrap().is_empty());
        assert!(regularizer_bounds(1, 100).unwrap().is_empty());
    }

    #[test]
    fn gate_bypass_breaks_freezing() {
        assert_eq!(freeze_exactness(0, None).unwrap().changed, 0);
        let f = freeze_exactness(0, Some(Fault::GateBypass)).unwrap();
        assert!(f.checked > 0 && f.changed > 0);
    }

    #[test]
    fn replayed_task_one_samples_are_stable_unless_gates_are_bypassed() {
        let f = replay_stability(1, None).unwrap();
        assert!(f.checked > 0 && f.changed == 0);
        assert!(
            replay_stability(1, Some(Fault::GateBypass))
                .unwrap()
                .changed
                > 0
        );
    }
}
