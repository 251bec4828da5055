//! The class-incremental loop: per-task training, mask reservation,
//! expansion, evaluation and run artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{DataKind, RunConfig};
use crate::data::{
    gaussian_tasks, load_mnist, split_incremental, Dataset, TaskSplitSpec, TaskStream,
};
use crate::error::{DgmError, Result};
use crate::masks::{AnnealSchedule, MaskVariant};
use crate::memory::{
    DLoss, Dgm, Discriminator, GLoss, Generator, GeneratorSpec, MaskMode, StepContext,
};
use crate::report;
use crate::tensor::Tensor;

pub const DATA_DIR_ENV: &str = "DGM_DATA_DIR";

/// Task stream plus how it was built.
#[derive(Clone, Debug)]
pub struct LoadedStream {
    pub stream: TaskStream,
    /// Side length of square images, `None` for point data.
    pub image_side: Option<usize>,
    pub source: String,
}

pub fn data_dir(cfg: &RunConfig) -> PathBuf {
    if !cfg.data.path.is_empty() {
        return PathBuf::from(&cfg.data.path);
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(d) => {
            let d = PathBuf::from(d);
            if d.join("mnist").is_dir() {
                d.join("mnist")
            } else {
                d
            }
        }
        None => PathBuf::from("data/mnist"),
    }
}

/// Builds the stream the config describes.
pub fn build_stream(cfg: &RunConfig) -> Result<LoadedStream> {
    let d = &cfg.data;
    let k = d.num_tasks * d.classes_per_task;
    let order = if d.order.is_empty() {
        (0..k).collect()
    } else {
        d.order.clone()
    };
    let spec = TaskSplitSpec {
        classes_per_task: d.classes_per_task,
        order,
        per_class_cap: (d.per_class_cap > 0).then_some(d.per_class_cap),
    };
    match d.kind {
        DataKind::Gaussian => {
            let base = gaussian_tasks(
                d.num_tasks,
                d.classes_per_task,
                d.samples_per_class,
                cfg.seed,
            )?;
            let stream = if d.order.is_empty() && d.per_class_cap == 0 {
                base
            } else {
                let merged = base.merged()?;
                let t = &merged.tasks[0];
                split_incremental(&t.train, &t.test, &spec)?
            };
            Ok(LoadedStream {
                stream,
                image_side: None,
                source: "gaussian".into(),
            })
        }
        DataKind::Mnist => {
            let dir = data_dir(cfg);
            let (train, test, side) = load_mnist(&dir, d.downsample)?;
            Ok(LoadedStream {
                stream: split_incremental(&train, &test, &spec)?,
                image_side: Some(side),
                source: dir.display().to_string(),
            })
        }
    }
}

/// Accuracy and confusion over the union test set of the tasks seen.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub task: usize,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// `confusion[true][pred]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Evaluation {
    pub fn class_accuracy(&self, c: usize) -> Option<f64> {
        let row = self.confusion.get(c)?;
        let n: usize = row.iter().sum();
        (n > 0).then(|| row[c] as f64 / n as f64)
    }

    /// Accuracy on the test samples of `classes`.
    pub fn subset_accuracy(&self, classes: &[usize]) -> Option<f64> {
        let (mut hit, mut n) = (0, 0);
        for &c in classes {
            let row = self.confusion.get(c)?;
            hit += row[c];
            n += row.iter().sum::<usize>();
        }
        (n > 0).then(|| hit as f64 / n as f64)
    }

    /// Share of misclassified samples predicted as one of `columns`.
    pub fn misclassified_share(&self, columns: &[usize]) -> Option<f64> {
        let (mut inside, mut wrong) = (0, 0);
        for (t, row) in self.confusion.iter().enumerate() {
            for (p, &n) in row.iter().enumerate() {
                if p != t {
                    wrong += n;
                    if columns.contains(&p) {
                        inside += n;
                    }
                }
            }
        }
        (wrong > 0).then(|| inside as f64 / wrong as f64)
    }
}

/// Single-head evaluation of the classifier over `num_classes` classes.
pub fn evaluate(
    disc: &Discriminator,
    test: &Dataset,
    num_classes: usize,
    task: usize,
) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(DgmError::invalid("cannot evaluate on an empty test set"));
    }
    let preds = disc.predict(&test.features)?;
    evaluate_predictions(&preds, &test.labels, num_classes, task)
}

pub fn evaluate_predictions(
    preds: &[usize],
    labels: &[usize],
    num_classes: usize,
    task: usize,
) -> Result<Evaluation> {
    if labels.is_empty() {
        return Err(DgmError::invalid("cannot evaluate on an empty test set"));
    }
    let mut confusion = vec![vec![0; num_classes]; num_classes];
    let mut correct = 0;
    for (&p, &y) in preds.iter().zip(labels) {
        for v in [p, y] {
            if v >= num_classes {
                return Err(DgmError::OutOfRange {
                    what: "class",
                    value: v,
                    lo: 0,
                    hi: num_classes.saturating_sub(1),
                });
            }
        }
        confusion[y][p] += 1;
        correct += usize::from(p == y);
    }
    Ok(Evaluation {
        task,
        accuracy: correct as f64 / labels.len() as f64,
        correct,
        total: labels.len(),
        confusion,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossRow {
    pub task: usize,
    pub epoch: usize,
    pub batch: usize,
    pub d: DLoss,
    pub g: GLoss,
    pub alpha: f64,
    pub s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GrowthRow {
    pub task: usize,
    pub layer: usize,
    pub delta: usize,
    pub neurons_added: usize,
    pub width: usize,
    pub generator_params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OccupationRow {
    pub task: usize,
    pub epoch: usize,
    pub layer: usize,
    pub reserved: usize,
    pub total: usize,
    pub fraction: f64,
}

/// Counts real training samples presented per `(learning task, source
/// task)`; anything off the diagonal breaks the incremental contract.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct IsolationAudit {
    pub presented: BTreeMap<(usize, usize), usize>,
}

impl IsolationAudit {
    pub fn violations(&self) -> usize {
        self.presented
            .iter()
            .filter(|((t, src), _)| t != src)
            .map(|(_, n)| n)
            .sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsLedger {
    pub evaluations: Vec<Evaluation>,
    pub task_classes: Vec<Vec<usize>>,
    pub losses: Vec<LossRow>,
    pub growth: Vec<GrowthRow>,
    pub occupation: Vec<OccupationRow>,
    pub isolation: IsolationAudit,
}

impl MetricsLedger {
    /// `A_t`: accuracy over all classes seen after task `t`.
    pub fn accuracy(&self, t: usize) -> Option<f64> {
        self.evaluations
            .iter()
            .find(|e| e.task == t)
            .map(|e| e.accuracy)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.evaluations.last().map(|e| e.accuracy)
    }

    /// Accuracy on task `j`'s classes measured after task `t`.
    pub fn task_accuracy(&self, t: usize, j: usize) -> Option<f64> {
        let e = self.evaluations.iter().find(|e| e.task == t)?;
        e.subset_accuracy(self.task_classes.get(j.checked_sub(1)?)?)
    }

    /// Best earlier accuracy minus final accuracy, per class.
    pub fn forgetting(&self) -> Vec<(usize, f64)> {
        let Some(last) = self.evaluations.last() else {
            return Vec::new();
        };
        (0..last.confusion.len())
            .filter_map(|c| {
                let end = last.class_accuracy(c)?;
                let best = self
                    .evaluations
                    .iter()
                    .filter_map(|e| e.class_accuracy(c))
                    .fold(f64::NEG_INFINITY, f64::max);
                Some((c, best - end))
            })
            .collect()
    }

    /// Reserved entries per task, summed over layers.
    pub fn deltas(&self) -> Vec<usize> {
        let mut out: BTreeMap<usize, usize> = BTreeMap::new();
        for g in &self.growth {
            *out.entry(g.task).or_default() += g.delta;
        }
        out.into_values().collect()
    }

    /// Generator size after every task.
    pub fn sizes(&self) -> Vec<usize> {
        let mut out: BTreeMap<usize, usize> = BTreeMap::new();
        for g in &self.growth {
            out.insert(g.task, g.generator_params);
        }
        out.into_values().collect()
    }

    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
        w.write_record(["task", "scope", "accuracy", "correct", "total"])?;
        for e in &self.evaluations {
            w.write_record([
                e.task.to_string(),
                "all".into(),
                e.accuracy.to_string(),
                e.correct.to_string(),
                e.total.to_string(),
            ])?;
            for (j, classes) in self.task_classes.iter().enumerate().take(e.task) {
                let (mut hit, mut n) = (0, 0);
                for &c in classes {
                    hit += e.confusion[c][c];
                    n += e.confusion[c].iter().sum::<usize>();
                }
                let acc = if n > 0 { hit as f64 / n as f64 } else { 0.0 };
                w.write_record([
                    e.task.to_string(),
                    format!("task{}", j + 1),
                    acc.to_string(),
                    hit.to_string(),
                    n.to_string(),
                ])?;
            }
            for (c, row) in e.confusion.iter().enumerate() {
                let n: usize = row.iter().sum();
                let acc = if n > 0 { row[c] as f64 / n as f64 } else { 0.0 };
                w.write_record([
                    e.task.to_string(),
                    format!("class{c}"),
                    acc.to_string(),
                    row[c].to_string(),
                    n.to_string(),
                ])?;
            }
        }
        w.flush()?;

        for e in &self.evaluations {
            let mut w = csv::Writer::from_path(dir.join(format!("confusion_t{}.csv", e.task)))?;
            let mut header = vec!["true".to_string()];
            header.extend((0..e.confusion.len()).map(|c| format!("pred{c}")));
            w.write_record(&header)?;
            for (c, row) in e.confusion.iter().enumerate() {
                let mut rec = vec![c.to_string()];
                rec.extend(row.iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
            w.flush()?;
        }

        let mut w = csv::Writer::from_path(dir.join("losses.csv"))?;
        w.write_record([
            "task", "epoch", "batch", "L_D", "L_s^D", "L_c^D", "L_gp", "L_G", "L_s^G", "L_c^G",
            "R", "alpha", "s",
        ])?;
        for r in &self.losses {
            w.write_record([
                r.task.to_string(),
                r.epoch.to_string(),
                r.batch.to_string(),
                r.d.total.to_string(),
                r.d.adversarial.to_string(),
                r.d.classification.to_string(),
                r.d.penalty.to_string(),
                r.g.total.to_string(),
                r.g.adversarial.to_string(),
                r.g.log_likelihood.to_string(),
                r.g.regularizer.to_string(),
                r.alpha.to_string(),
                r.s.to_string(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("growth.csv"))?;
        w.write_record([
            "task",
            "layer",
            "delta",
            "neurons_added",
            "width",
            "generator_params",
        ])?;
        for g in &self.growth {
            w.serialize((
                g.task,
                g.layer,
                g.delta,
                g.neurons_added,
                g.width,
                g.generator_params,
            ))?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("occupation.csv"))?;
        w.write_record(["task", "epoch", "layer", "reserved", "total", "fraction"])?;
        for o in &self.occupation {
            w.serialize((o.task, o.epoch, o.layer, o.reserved, o.total, o.fraction))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Shuffled mini-batches over one task's training set.
pub struct BatchSampler<'a> {
    data: &'a Dataset,
    task: usize,
    batch: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl<'a> BatchSampler<'a> {
    pub fn new(data: &'a Dataset, task: usize, batch: usize, rng: ChaCha8Rng) -> Result<Self> {
        if data.is_empty() {
            return Err(DgmError::invalid(format!(
                "task {task} has no training samples"
            )));
        }
        Ok(BatchSampler {
            data,
            task,
            batch,
            order: Vec::new(),
            pos: 0,
            rng,
        })
    }

    pub fn next_batch(&mut self) -> (Tensor, Vec<usize>, usize) {
        let mut idx = Vec::with_capacity(self.batch);
        while idx.len() < self.batch {
            if self.pos >= self.order.len() {
                self.order = (0..self.data.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            idx.push(self.order[self.pos]);
            self.pos += 1;
        }
        let sub = self.data.subset(&idx);
        (sub.features, sub.labels, self.task)
    }
}

/// Model, RNG and ledger of a run in progress.
pub struct Trainer {
    pub config: RunConfig,
    pub model: Dgm,
    pub rng: ChaCha8Rng,
    pub ledger: MetricsLedger,
    pub tasks_done: usize,
}

impl Trainer {
    pub fn new(config: RunConfig, stream: &TaskStream) -> Result<Self> {
        config.validate()?;
        stream.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let spec = GeneratorSpec {
            latent_dim: config.model.latent_dim,
            num_classes: stream.num_classes,
            hidden: config.model.g_hidden.clone(),
            output_dim: stream.dim,
            variant: config.model.variant,
            output_activation: config.output_activation()?,
        };
        let gen = Generator::new(spec, &mut rng)?;
        let disc = Discriminator::new(stream.dim, &config.model.d_hidden, 0, &mut rng);
        let model = Dgm::new(gen, disc, config.gan_config()?)?;
        Ok(Trainer {
            config,
            model,
            rng,
            ledger: MetricsLedger::default(),
            tasks_done: 0,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let config = RunConfig::from_toml_str(&ck.config_toml, &[])?;
        Ok(Trainer {
            config,
            model: ck.model,
            rng: ck.rng,
            ledger: MetricsLedger::default(),
            tasks_done: ck.task,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            task: self.tasks_done,
            config_toml: self.config.to_toml_string(),
            model: self.model.clone(),
            rng: self.rng.clone(),
        }
    }

    fn sampler_rng(&self, t: usize) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.config.seed);
        r.set_stream(t as u64 + 1);
        r
    }

    fn alpha(&self) -> f64 {
        let (total, free) = self.model.gen.capacity();
        if free == 0 {
            1.0
        } else {
            total as f64 / free as f64
        }
    }

    fn record_occupation(&mut self, t: usize, epoch: usize) -> Result<()> {
        for (l, ms) in self.model.gen.masks.iter().enumerate() {
            let m = ms.prospective()?;
            let total = m.len();
            let reserved = m.count_ones();
            self.ledger.occupation.push(OccupationRow {
                task: t,
                epoch,
                layer: l,
                reserved,
                total,
                fraction: if total == 0 {
                    0.0
                } else {
                    reserved as f64 / total as f64
                },
            });
        }
        Ok(())
    }

    /// Trains task `t`, reserves its masks and expands the generator.
    pub fn train_task(&mut self, stream: &TaskStream, t: usize) -> Result<()> {
        if t != self.tasks_done + 1 {
            return Err(DgmError::invalid(format!(
                "expected task {}, got {t}",
                self.tasks_done + 1
            )));
        }
        let task = stream.task(t)?;
        let classes = task.classes.clone();
        let previous: Vec<usize> = stream.seen_classes(t - 1);
        self.model.begin_task(&classes, &mut self.rng)?;
        let alpha = self.alpha();
        let epochs = self.config.epochs_for_task(t);
        let batches = self.config.schedule.batches_per_epoch;
        let schedule = AnnealSchedule::new(
            self.config.masks.s_max,
            epochs,
            batches.max(2),
            self.config.model.variant,
        )?;
        let mut sampler = BatchSampler::new(
            &task.train,
            t,
            self.config.schedule.batch_size,
            self.sampler_rng(t),
        )?;
        let mut audit: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut leaked = 0usize;
        let replay = self.config.replay.enabled;
        log::info!("task {t}: classes {classes:?}, {epochs} epochs, alpha {alpha:.3}");
        for i in 1..=epochs {
            for b in 1..=batches {
                let s = match self.config.model.variant {
                    MaskVariant::Dgma => schedule.epoch_scale(i)?,
                    MaskVariant::Dgmw => schedule.scale_at(i, b.min(schedule.batches))?,
                };
                let mut real = || {
                    let (x, y, src) = sampler.next_batch();
                    *audit.entry((t, src)).or_default() += y.len();
                    leaked += y.iter().filter(|c| previous.contains(c)).count();
                    Ok((x, y))
                };
                let mut ctx = StepContext {
                    real: &mut real,
                    task: t,
                    classes: &classes,
                    replay,
                    s,
                    alpha,
                };
                let m = self.model.alternate_step(&mut ctx, &mut self.rng)?;
                self.ledger.losses.push(LossRow {
                    task: t,
                    epoch: i,
                    batch: b,
                    d: m.d,
                    g: m.g,
                    alpha,
                    s,
                });
            }
            self.record_occupation(t, i)?;
        }
        for (k, n) in audit {
            *self.ledger.isolation.presented.entry(k).or_default() += n;
        }
        if leaked > 0 {
            return Err(DgmError::invalid(format!(
                "{leaked} real samples of earlier tasks were presented during task {t}"
            )));
        }

        let deltas = self.model.gen.finish_task(&classes)?;
        let (total, free) = self.model.gen.capacity();
        if free == 0 || free * 20 < total {
            log::warn!("task {t}: generator nearly full ({free} of {total} mask entries free)");
        }
        let added = if self.config.expansion.enabled {
            self.model.gen.expand(t, &deltas, &mut self.rng)?
        } else {
            vec![0; deltas.len()]
        };
        let params = self.model.gen.parameter_count();
        for (l, (&delta, &n)) in deltas.iter().zip(&added).enumerate() {
            self.ledger.growth.push(GrowthRow {
                task: t,
                layer: l,
                delta,
                neurons_added: n,
                width: self.model.gen.hidden[l].outputs(),
                generator_params: params,
            });
        }
        self.ledger.task_classes.push(classes);
        self.tasks_done = t;
        Ok(())
    }

    /// Evaluates on the union test set of tasks `1..=t`.
    pub fn evaluate(&mut self, stream: &TaskStream, t: usize) -> Result<Evaluation> {
        let test = stream.test_up_to(t)?;
        let k = stream.seen_classes(t).len();
        let e = evaluate(&self.model.disc, &test, k, t)?;
        log::info!(
            "after task {t}: accuracy {:.4} over {k} classes",
            e.accuracy
        );
        self.ledger.evaluations.push(e.clone());
        Ok(e)
    }
}

#[derive(Clone, Debug, Serialize)]
struct Manifest<'a> {
    version: &'a str,
    status: &'a str,
    error: Option<String>,
    tasks_completed: usize,
    elapsed_seconds: f64,
    joint_baseline: bool,
    config: &'a RunConfig,
    data: DataInfo<'a>,
}

#[derive(Clone, Debug, Serialize)]
struct DataInfo<'a> {
    source: &'a str,
    dim: usize,
    num_classes: usize,
    image_side: Option<usize>,
    downsampled: bool,
    source_labels: &'a [usize],
    tasks: Vec<TaskInfo>,
}

#[derive(Clone, Debug, Serialize)]
struct TaskInfo {
    classes: Vec<usize>,
    train: usize,
    test: usize,
}

/// Outcome of a finished run.
pub struct RunOutcome {
    pub ledger: MetricsLedger,
    pub trainer: Trainer,
}

fn write_manifest(
    dir: &Path,
    trainer: &Trainer,
    loaded: &LoadedStream,
    status: &str,
    error: Option<String>,
    started: Instant,
    joint: bool,
) -> Result<()> {
    let s = &loaded.stream;
    let m = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        status,
        error,
        tasks_completed: trainer.tasks_done,
        elapsed_seconds: started.elapsed().as_secs_f64(),
        joint_baseline: joint,
        config: &trainer.config,
        data: DataInfo {
            source: &loaded.source,
            dim: s.dim,
            num_classes: s.num_classes,
            image_side: loaded.image_side,
            downsampled: loaded.image_side.is_some() && trainer.config.data.downsample,
            source_labels: &s.source_labels,
            tasks: s
                .tasks
                .iter()
                .map(|t| TaskInfo {
                    classes: t.classes.clone(),
                    train: t.train.len(),
                    test: t.test.len(),
                })
                .collect(),
        },
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

fn dump_samples(dir: &Path, trainer: &Trainer, loaded: &LoadedStream, t: usize) -> Result<()> {
    let gen = &trainer.model.gen;
    let mut rng = ChaCha8Rng::seed_from_u64(trainer.config.seed ^ 0x5eed);
    match loaded.image_side {
        Some(side) => {
            let per_class = 8;
            let mut rows = Vec::new();
            for j in 1..=gen.tasks_learned() {
                for &c in &gen.task_classes[j - 1] {
                    let labels = vec![c; per_class];
                    let z = gen.draw_latent(per_class, &mut rng);
                    rows.push(gen.generate(&z, &labels, MaskMode::Snapshot(j))?);
                }
            }
            let refs: Vec<&Tensor> = rows.iter().collect();
            let all = Tensor::vstack(&refs)?;
            report::write_image_grid(
                &dir.join(format!("samples_t{t}.png")),
                &all,
                side,
                per_class,
            )?;
        }
        None => {
            let mut w = csv::Writer::from_path(dir.join(format!("samples_t{t}.csv")))?;
            let mut header = vec!["task".to_string(), "label".into()];
            header.extend((0..gen.spec.output_dim).map(|i| format!("x{i}")));
            w.write_record(&header)?;
            for j in 1..=gen.tasks_learned() {
                let (x, y) = gen.sample(j, None, 50, &mut rng)?;
                for (r, label) in y.iter().enumerate() {
                    let mut rec = vec![j.to_string(), label.to_string()];
                    rec.extend(x.row(r).iter().map(|v| v.to_string()));
                    w.write_record(&rec)?;
                }
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn run_inner(
    trainer: &mut Trainer,
    loaded: &LoadedStream,
    out: Option<&Path>,
    started: Instant,
    joint: bool,
) -> Result<()> {
    let stream = &loaded.stream;
    for t in 1..=stream.len() {
        trainer.train_task(stream, t)?;
        trainer.evaluate(stream, t)?;
        if let Some(dir) = out {
            trainer.ledger.write_csvs(dir)?;
            trainer
                .checkpoint()
                .save(dir.join(format!("checkpoint_t{t}.bin")))?;
            dump_samples(dir, trainer, loaded, t)?;
            write_manifest(dir, trainer, loaded, "running", None, started, joint)?;
        }
    }
    if trainer.ledger.isolation.violations() > 0 {
        return Err(DgmError::invalid("real samples crossed task boundaries"));
    }
    Ok(())
}

fn run_loaded(
    config: RunConfig,
    loaded: &LoadedStream,
    out: Option<&Path>,
    joint: bool,
) -> Result<RunOutcome> {
    let started = Instant::now();
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    let mut trainer = Trainer::new(config, &loaded.stream)?;
    if let Some(dir) = out {
        write_manifest(dir, &trainer, loaded, "running", None, started, joint)?;
    }
    let result = run_inner(&mut trainer, loaded, out, started, joint);
    if let Some(dir) = out {
        trainer.ledger.write_csvs(dir)?;
        let (status, err) = match &result {
            Ok(()) => ("complete", None),
            Err(e) => ("failed", Some(e.to_string())),
        };
        write_manifest(dir, &trainer, loaded, status, err, started, joint)?;
    }
    result?;
    Ok(RunOutcome {
        ledger: trainer.ledger.clone(),
        trainer,
    })
}

/// Runs every task of the stream, writing artifacts to `out` when given.
pub fn run_stream(
    config: RunConfig,
    loaded: &LoadedStream,
    out: Option<&Path>,
) -> Result<RunOutcome> {
    run_loaded(config, loaded, out, false)
}

/// Same architecture trained on all classes at once. Unless configured
/// otherwise, it gets as many epochs as the incremental run in total.
pub fn joint_train_baseline(
    config: RunConfig,
    loaded: &LoadedStream,
    out: Option<&Path>,
) -> Result<RunOutcome> {
    let mut cfg = config;
    let total: usize = (1..=loaded.stream.len())
        .map(|t| cfg.epochs_for_task(t))
        .sum();
    cfg.schedule.epochs = if cfg.schedule.joint_epochs > 0 {
        cfg.schedule.joint_epochs
    } else {
        total
    };
    cfg.schedule.epochs_growth = 1.0;
    let merged = LoadedStream {
        stream: loaded.stream.merged()?,
        image_side: loaded.image_side,
        source: loaded.source.clone(),
    };
    run_loaded(cfg, &merged, out, true)
}

/// Fraction of uniformly random guesses that hit, for sanity checks.
pub fn random_guess_accuracy(labels: &[usize], k: usize, rng: &mut impl Rng) -> f64 {
    let hits = labels
        .iter()
        .filter(|&&y| rng.random_range(0..k) == y)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> RunConfig {
        RunConfig::from_toml_str(
            r#"
            seed = 3
            [model]
            g_hidden = [8, 8]
            d_hidden = [16]
            latent_dim = 2
            [data]
            num_tasks = 2
            classes_per_task = 2
            samples_per_class = 20
            [schedule]
            epochs = 2
            batches_per_epoch = 2
            batch_size = 8
            [losses]
            n_critic = 1
            "#,
            &[],
        )
        .unwrap()
    }

    #[test]
    fn perfect_and_random_predictors() {
        let labels: Vec<usize> = (0..10_000).map(|i| i % 10).collect();
        let e = evaluate_predictions(&labels, &labels, 10, 1).unwrap();
        assert_eq!(e.accuracy, 1.0);
        for (i, row) in e.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), row[i]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let preds: Vec<usize> = labels.iter().map(|_| rng.random_range(0..10)).collect();
        let e = evaluate_predictions(&preds, &labels, 10, 1).unwrap();
        assert!((e.accuracy - 0.1).abs() < 0.02);
        assert!(evaluate_predictions(&[], &[], 3, 1).is_err());
        let single = evaluate_predictions(&[0, 0], &[0, 0], 1, 1).unwrap();
        assert_eq!(single.accuracy, 1.0);
    }

    #[test]
    fn run_is_deterministic_and_writes_artifacts() {
        let cfg = tiny_config();
        let loaded = build_stream(&cfg).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = run_stream(cfg.clone(), &loaded, Some(a.path())).unwrap();
        run_stream(cfg, &loaded, Some(b.path())).unwrap();
        for f in [
            "metrics.csv",
            "losses.csv",
            "growth.csv",
            "occupation.csv",
            "confusion_t2.csv",
        ] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
        assert!(a.path().join("checkpoint_t2.bin").exists());
        assert!(a.path().join("samples_t2.csv").exists());
        let manifest = fs::read_to_string(a.path().join("manifest.json")).unwrap();
        assert!(manifest.contains("\"complete\""));
        assert_eq!(ra.ledger.evaluations.len(), 2);
        assert_eq!(ra.ledger.evaluations[1].confusion.len(), 4);
        assert_eq!(ra.ledger.isolation.violations(), 0);
        assert_eq!(ra.ledger.losses.len(), 2 * 2 * 2);
        let sizes = ra.ledger.sizes();
        assert!(sizes.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn expansion_switch_controls_growth() {
        let mut cfg = tiny_config();
        cfg.expansion.enabled = false;
        let loaded = build_stream(&cfg).unwrap();
        let r = run_stream(cfg, &loaded, None).unwrap();
        assert!(r.ledger.growth.iter().all(|g| g.neurons_added == 0));
    }

    #[test]
    fn joint_baseline_has_one_task() {
        let cfg = tiny_config();
        let loaded = build_stream(&cfg).unwrap();
        let r = joint_train_baseline(cfg, &loaded, None).unwrap();
        assert_eq!(r.ledger.evaluations.len(), 1);
        assert_eq!(r.trainer.config.schedule.epochs, 4);
    }

    #[test]
    fn confusion_shares() {
        let e = Evaluation {
            task: 2,
            accuracy: 0.0,
            correct: 0,
            total: 0,
            confusion: vec![vec![5, 1, 3], vec![0, 4, 2], vec![0, 0, 6]],
        };
        assert_eq!(e.misclassified_share(&[2]), Some(5.0 / 6.0));
        assert_eq!(e.subset_accuracy(&[0, 1]), Some(9.0 / 15.0));
    }
}
