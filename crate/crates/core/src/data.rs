//! Datasets and class-incremental task streams.
//!
//! Features are normalized to `[-1, 1]` where the source is bounded (IDX
//! images). The synthetic 2-D stream keeps its raw coordinates.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DgmError, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub const GAUSSIAN_RADIUS: f64 = 4.0;
pub const GAUSSIAN_SIGMA: f64 = 0.35;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, split: Split) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(DgmError::shape(
                "Dataset",
                features.shape(),
                &[labels.len()],
            ));
        }
        if !features.all_finite() {
            return Err(DgmError::invalid("dataset features must be finite"));
        }
        Ok(Dataset {
            features,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
        }
    }

    pub fn concat(parts: &[&Dataset], split: Split) -> Result<Dataset> {
        let feats: Vec<&Tensor> = parts.iter().map(|d| &d.features).collect();
        let labels = parts
            .iter()
            .flat_map(|d| d.labels.iter().copied())
            .collect();
        Dataset::new(Tensor::vstack(&feats)?, labels, split)
    }
}

/// One half of an IDX pair.
#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    /// Normalized pixels, one row per image.
    Images {
        rows: usize,
        cols: usize,
        pixels: Tensor,
    },
    Labels(Vec<usize>),
}

/// Maps a byte to `[-1, 1]`: 0 -> -1, 255 -> 1.
pub fn normalize_pixel(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// Reads a big-endian IDX file (uint8 images or labels), optionally gzipped.
pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxData> {
    let path = path.as_ref();
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        raw = out;
    }
    parse_idx(&raw, path)
}

pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<IdxData> {
    let err = |offset: usize, reason: String| DgmError::Idx {
        path: PathBuf::from(path),
        offset: offset as u64,
        reason,
    };
    let word = |at: usize| -> Result<usize> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize)
            .ok_or_else(|| err(at, "truncated header".into()))
    };
    let magic = word(0)? as u32;
    let count = word(4)?;
    match magic {
        IDX_IMAGES_MAGIC => {
            let rows = word(8)?;
            let cols = word(12)?;
            let need = count * rows * cols;
            let body = &bytes[16..];
            if body.len() < need {
                return Err(err(
                    bytes.len(),
                    format!("expected {need} pixel bytes, found {}", body.len()),
                ));
            }
            let data = body[..need].iter().map(|&v| normalize_pixel(v)).collect();
            Ok(IdxData::Images {
                rows,
                cols,
                pixels: Tensor::matrix(count, rows * cols, data)?,
            })
        }
        IDX_LABELS_MAGIC => {
            let body = &bytes[8..];
            if body.len() < count {
                return Err(err(
                    bytes.len(),
                    format!("expected {count} labels, found {}", body.len()),
                ));
            }
            Ok(IdxData::Labels(
                body[..count].iter().map(|&v| v as usize).collect(),
            ))
        }
        other => Err(err(0, format!("bad magic 0x{other:08x}"))),
    }
}

/// 2x2 average pooling of square images stored as rows.
pub fn downsample_2x2(images: &Tensor, side: usize) -> Result<Tensor> {
    if images.cols() != side * side || !side.is_multiple_of(2) {
        return Err(DgmError::shape(
            "downsample_2x2",
            &[side * side],
            &[images.cols()],
        ));
    }
    let half = side / 2;
    let mut data = Vec::with_capacity(images.rows() * half * half);
    for r in 0..images.rows() {
        let img = images.row(r);
        for y in 0..half {
            for x in 0..half {
                let at = |yy: usize, xx: usize| img[yy * side + xx];
                let s = at(2 * y, 2 * x)
                    + at(2 * y, 2 * x + 1)
                    + at(2 * y + 1, 2 * x)
                    + at(2 * y + 1, 2 * x + 1);
                data.push(s / 4.0);
            }
        }
    }
    Tensor::matrix(images.rows(), half * half, data)
}

fn find_idx(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(name);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(DgmError::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{stem}[.gz] not found in {}", dir.display()),
    )))
}

fn load_pair(dir: &Path, prefix: &str, split: Split, downsample: bool) -> Result<(Dataset, usize)> {
    let images = read_idx(find_idx(dir, &format!("{prefix}-images-idx3-ubyte"))?)?;
    let labels = read_idx(find_idx(dir, &format!("{prefix}-labels-idx1-ubyte"))?)?;
    let (IdxData::Images { rows, cols, pixels }, IdxData::Labels(labels)) = (images, labels) else {
        return Err(DgmError::invalid(format!(
            "{prefix}: image/label files swapped"
        )));
    };
    let (pixels, side) = if downsample && rows == cols {
        (downsample_2x2(&pixels, rows)?, rows / 2)
    } else {
        (pixels, rows)
    };
    let _ = cols;
    Ok((Dataset::new(pixels, labels, split)?, side))
}

/// Loads `train-*` and `t10k-*` IDX pairs from `dir`. Returns the image side.
pub fn load_mnist(dir: impl AsRef<Path>, downsample: bool) -> Result<(Dataset, Dataset, usize)> {
    let dir = dir.as_ref();
    let (train, side) = load_pair(dir, "train", Split::Train, downsample)?;
    let (test, _) = load_pair(dir, "t10k", Split::Test, downsample)?;
    Ok((train, test, side))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    /// 1-based position in the stream.
    pub index: usize,
    /// Global dense class ids of this task.
    pub classes: Vec<usize>,
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub num_classes: usize,
    pub dim: usize,
    /// Original label of every global class id.
    pub source_labels: Vec<usize>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn task(&self, t: usize) -> Result<&Task> {
        t.checked_sub(1)
            .and_then(|i| self.tasks.get(i))
            .ok_or(DgmError::UnknownTask(t))
    }

    /// Classes of tasks `1..=t`.
    pub fn seen_classes(&self, t: usize) -> Vec<usize> {
        self.tasks
            .iter()
            .take(t)
            .flat_map(|k| k.classes.iter().copied())
            .collect()
    }

    /// Union test set of tasks `1..=t`.
    pub fn test_up_to(&self, t: usize) -> Result<Dataset> {
        let parts: Vec<&Dataset> = self.tasks.iter().take(t).map(|k| &k.test).collect();
        Dataset::concat(&parts, Split::Test)
    }

    /// Single task holding every class, for the joint-training baseline.
    pub fn merged(&self) -> Result<TaskStream> {
        let train: Vec<&Dataset> = self.tasks.iter().map(|k| &k.train).collect();
        let test: Vec<&Dataset> = self.tasks.iter().map(|k| &k.test).collect();
        Ok(TaskStream {
            tasks: vec![Task {
                index: 1,
                classes: self.seen_classes(self.len()),
                train: Dataset::concat(&train, Split::Train)?,
                test: Dataset::concat(&test, Split::Test)?,
            }],
            num_classes: self.num_classes,
            dim: self.dim,
            source_labels: self.source_labels.clone(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.num_classes];
        for task in &self.tasks {
            for &c in &task.classes {
                if c >= self.num_classes || seen[c] {
                    return Err(DgmError::invalid(format!(
                        "class {c} appears in more than one task"
                    )));
                }
                seen[c] = true;
            }
            for ds in [&task.train, &task.test] {
                if let Some(&bad) = ds.labels.iter().find(|l| !task.classes.contains(l)) {
                    return Err(DgmError::UnknownLabel {
                        label: bad,
                        context: format!("task {}", task.index),
                    });
                }
            }
        }
        Ok(())
    }

    /// Writes every sample as `task,split,label,x0,x1,...`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["task".to_string(), "split".into(), "label".into()];
        header.extend((0..self.dim).map(|i| format!("x{i}")));
        w.write_record(&header)?;
        for task in &self.tasks {
            for (ds, name) in [(&task.train, "train"), (&task.test, "test")] {
                for i in 0..ds.len() {
                    let mut rec = vec![
                        task.index.to_string(),
                        name.into(),
                        ds.labels[i].to_string(),
                    ];
                    rec.extend(ds.features.row(i).iter().map(|v| v.to_string()));
                    w.write_record(&rec)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Class means on a circle of radius 4 with isotropic noise `σ = 0.35`;
/// each class is split 80/20 into train and test.
pub fn gaussian_tasks(
    num_tasks: usize,
    classes_per_task: usize,
    samples_per_class: usize,
    seed: u64,
) -> Result<TaskStream> {
    if num_tasks == 0 || classes_per_task == 0 || samples_per_class == 0 {
        return Err(DgmError::invalid(
            "gaussian_tasks parameters must be positive",
        ));
    }
    let k = num_tasks * classes_per_task;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, GAUSSIAN_SIGMA).expect("positive sigma");
    let n_train = (samples_per_class * 4).div_ceil(5).min(samples_per_class);
    let mut tasks = Vec::with_capacity(num_tasks);
    for t in 0..num_tasks {
        let classes: Vec<usize> = (t * classes_per_task..(t + 1) * classes_per_task).collect();
        let (mut tr_x, mut tr_y, mut te_x, mut te_y) = (vec![], vec![], vec![], vec![]);
        for &c in &classes {
            let (mx, my) = gaussian_mean(c, k);
            for s in 0..samples_per_class {
                let p = [mx + noise.sample(&mut rng), my + noise.sample(&mut rng)];
                if s < n_train {
                    tr_x.extend(p);
                    tr_y.push(c);
                } else {
                    te_x.extend(p);
                    te_y.push(c);
                }
            }
        }
        tasks.push(Task {
            index: t + 1,
            classes,
            train: Dataset::new(Tensor::matrix(tr_y.len(), 2, tr_x)?, tr_y, Split::Train)?,
            test: Dataset::new(Tensor::matrix(te_y.len(), 2, te_x)?, te_y, Split::Test)?,
        });
    }
    Ok(TaskStream {
        tasks,
        num_classes: k,
        dim: 2,
        source_labels: (0..k).collect(),
    })
}

pub fn gaussian_mean(class: usize, num_classes: usize) -> (f64, f64) {
    let a = 2.0 * std::f64::consts::PI * class as f64 / num_classes as f64;
    (GAUSSIAN_RADIUS * a.cos(), GAUSSIAN_RADIUS * a.sin())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSplitSpec {
    pub classes_per_task: usize,
    /// Source labels in the order they are learned; may cover a subset.
    pub order: Vec<usize>,
    pub per_class_cap: Option<usize>,
}

/// Splits a labelled train/test pair into tasks following `spec`. Source
/// label `spec.order[k]` becomes global class `k`; uncovered labels are
/// dropped.
pub fn split_incremental(
    train: &Dataset,
    test: &Dataset,
    spec: &TaskSplitSpec,
) -> Result<TaskStream> {
    if spec.classes_per_task == 0 {
        return Err(DgmError::invalid("classes_per_task must be positive"));
    }
    let mut remap = std::collections::HashMap::new();
    for (k, &label) in spec.order.iter().enumerate() {
        if remap.insert(label, k).is_some() {
            return Err(DgmError::invalid(format!(
                "class {label} assigned to more than one task"
            )));
        }
    }
    let pick = |ds: &Dataset, classes: &[usize], cap: Option<usize>| -> Result<Dataset> {
        let mut idx = Vec::new();
        for &c in classes {
            let src = spec.order[c];
            let mut taken = 0;
            for (i, &l) in ds.labels.iter().enumerate() {
                if l == src && cap.is_none_or(|m| taken < m) {
                    idx.push(i);
                    taken += 1;
                }
            }
        }
        let mut sub = ds.subset(&idx);
        for l in &mut sub.labels {
            *l = remap[l];
        }
        Ok(sub)
    };
    let mut tasks = Vec::new();
    for (t, chunk) in (0..spec.order.len())
        .collect::<Vec<_>>()
        .chunks(spec.classes_per_task)
        .enumerate()
    {
        tasks.push(Task {
            index: t + 1,
            classes: chunk.to_vec(),
            train: pick(train, chunk, spec.per_class_cap)?,
            test: pick(test, chunk, None)?,
        });
    }
    let stream = TaskStream {
        tasks,
        num_classes: spec.order.len(),
        dim: train.dim(),
        source_labels: spec.order.clone(),
    };
    stream.validate()?;
    Ok(stream)
}

/// Writes an IDX image file (used by tests and fixtures).
pub fn write_idx_images(
    path: impl AsRef<Path>,
    count: usize,
    rows: usize,
    cols: usize,
    pixels: &[u8],
) -> Result<()> {
    let mut f = File::create(path)?;
    for w in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        f.write_all(&w.to_be_bytes())?;
    }
    f.write_all(pixels)?;
    Ok(())
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let mut f = File::create(path)?;
    for w in [IDX_LABELS_MAGIC, labels.len() as u32] {
        f.write_all(&w.to_be_bytes())?;
    }
    f.write_all(labels)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn idx_image_example() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img");
        write_idx_images(&p, 1, 2, 2, &[0, 255, 128, 64]).unwrap();
        let IdxData::Images { rows, cols, pixels } = read_idx(&p).unwrap() else {
            panic!("expected images")
        };
        assert_eq!((rows, cols), (2, 2));
        let d = pixels.data();
        assert_eq!(d[0], -1.0);
        assert_eq!(d[1], 1.0);
        assert!((d[2] - 0.0039).abs() < 1e-4);
        assert!((d[3] + 0.498).abs() < 1e-3);
    }

    #[test]
    fn idx_label_example_and_gzip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lbl");
        write_idx_labels(&p, &[0, 1, 2]).unwrap();
        assert_eq!(read_idx(&p).unwrap(), IdxData::Labels(vec![0, 1, 2]));

        let raw = std::fs::read(&p).unwrap();
        let gz = dir.path().join("lbl.gz");
        let mut enc = flate2::write::GzEncoder::new(
            File::create(&gz).unwrap(),
            flate2::Compression::default(),
        );
        enc.write_all(&raw).unwrap();
        enc.finish().unwrap();
        assert_eq!(read_idx(&gz).unwrap(), IdxData::Labels(vec![0, 1, 2]));
    }

    #[test]
    fn idx_errors_carry_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty");
        File::create(&empty).unwrap();
        assert!(matches!(
            read_idx(&empty),
            Err(DgmError::Idx { offset: 0, .. })
        ));

        let bad = dir.path().join("bad");
        std::fs::write(&bad, [0, 0, 9, 9, 0, 0, 0, 1]).unwrap();
        let msg = read_idx(&bad).unwrap_err().to_string();
        assert!(msg.contains("bad magic"), "{msg}");

        let short = dir.path().join("short");
        write_idx_images(&short, 2, 2, 2, &[1, 2, 3]).unwrap();
        assert!(matches!(
            read_idx(&short),
            Err(DgmError::Idx { offset: 19, .. })
        ));
    }

    #[test]
    fn normalization_endpoints_are_exact() {
        assert_eq!(normalize_pixel(0), -1.0);
        assert_eq!(normalize_pixel(255), 1.0);
    }

    #[test]
    fn gaussian_means_are_separated() {
        let s = gaussian_tasks(5, 2, 10, 0).unwrap();
        assert_eq!(s.num_classes, 10);
        for a in 0..10 {
            for b in a + 1..10 {
                let (ax, ay) = gaussian_mean(a, 10);
                let (bx, by) = gaussian_mean(b, 10);
                assert!(
                    ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt() >= 2.0 * GAUSSIAN_SIGMA * 3.0
                );
            }
        }
        assert_eq!(s.tasks[0].train.len(), 16);
        assert_eq!(s.tasks[0].test.len(), 4);
    }

    #[test]
    fn gaussian_stream_is_deterministic() {
        assert_eq!(
            gaussian_tasks(3, 2, 20, 9).unwrap(),
            gaussian_tasks(3, 2, 20, 9).unwrap()
        );
        assert_ne!(
            gaussian_tasks(3, 2, 20, 9).unwrap(),
            gaussian_tasks(3, 2, 20, 10).unwrap()
        );
        assert!(gaussian_tasks(3, 2, 0, 9).is_err());
    }

    fn toy(labels: &[usize]) -> Dataset {
        let x =
            Tensor::matrix(labels.len(), 1, labels.iter().map(|&l| l as f64).collect()).unwrap();
        Dataset::new(x, labels.to_vec(), Split::Train).unwrap()
    }

    #[test]
    fn split_examples() {
        let labels: Vec<usize> = (0..40).map(|i| i % 10).collect();
        let ds = toy(&labels);
        let spec = TaskSplitSpec {
            classes_per_task: 2,
            order: (0..10).collect(),
            per_class_cap: None,
        };
        let s = split_incremental(&ds, &ds, &spec).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s.tasks[1].classes, vec![2, 3]);

        let single = TaskSplitSpec {
            classes_per_task: 1,
            ..spec.clone()
        };
        let s = split_incremental(&ds, &ds, &single).unwrap();
        assert_eq!(s.len(), 10);
        assert!(s.tasks.iter().all(|t| t.classes.len() == 1));

        let partial = TaskSplitSpec {
            classes_per_task: 2,
            order: vec![3, 1, 7, 5],
            per_class_cap: None,
        };
        let s = split_incremental(&ds, &ds, &partial).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.source_labels, vec![3, 1, 7, 5]);
        let all: Vec<usize> = s
            .tasks
            .iter()
            .flat_map(|t| t.train.labels.clone())
            .collect();
        assert!(all.iter().all(|&l| l < 4));
        assert_eq!(all.len(), 16);

        let dup = TaskSplitSpec {
            classes_per_task: 2,
            order: vec![1, 2, 1],
            per_class_cap: None,
        };
        assert!(split_incremental(&ds, &ds, &dup).is_err());
    }

    proptest! {
        #[test]
        fn split_round_trip_and_disjointness(labels in prop::collection::vec(0usize..6, 1..60), per_task in 1usize..4) {
            let ds = toy(&labels);
            let spec = TaskSplitSpec { classes_per_task: per_task, order: (0..6).collect(), per_class_cap: None };
            let s = split_incremental(&ds, &ds, &spec).unwrap();
            let mut got: Vec<usize> = s.tasks.iter().flat_map(|t| t.train.labels.clone()).collect();
            let mut want = labels.clone();
            got.sort_unstable();
            want.sort_unstable();
            prop_assert_eq!(got, want);
            for (i, a) in s.tasks.iter().enumerate() {
                for b in &s.tasks[i + 1..] {
                    prop_assert!(a.classes.iter().all(|c| !b.classes.contains(c)));
                }
            }
        }
    }
}
