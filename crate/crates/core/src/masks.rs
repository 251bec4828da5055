//! Learnable plasticity masks for generator layers.
//!
//! A mask is the sigmoid of a real-valued embedding scaled by an annealed
//! factor `s`. Activation-level masks (DGMa) hold one entry per output
//! neuron; weight-level masks (DGMw) hold one entry per connection. After a
//! task finishes the embedding is binarized and folded into the cumulated
//! mask, whose complement gates all later gradient updates.
//!
//! Biases follow the mask of their neuron for DGMa and carry their own
//! `[1, p]` mask row for DGMw. A masked-out neuron therefore emits exactly
//! `act(0)` under an old task's binary mask, independent of later training.

use bitvec::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DgmError, Result};
use crate::tensor::{Graph, NodeId, Tensor};

/// Default bound applied to every embedding gradient entry.
pub const EMBEDDING_GRAD_CLAMP: f64 = 50.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskVariant {
    Dgma,
    Dgmw,
}

impl std::fmt::Display for MaskVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskVariant::Dgma => "dgma",
            MaskVariant::Dgmw => "dgmw",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnnealSchedule {
    pub s_max: f64,
    pub epochs: usize,
    pub batches: usize,
    pub variant: MaskVariant,
}

impl AnnealSchedule {
    pub fn new(s_max: f64, epochs: usize, batches: usize, variant: MaskVariant) -> Result<Self> {
        if !(s_max.is_finite() && s_max > 1.0) {
            return Err(DgmError::invalid(format!(
                "s_max must exceed 1, got {s_max}"
            )));
        }
        if epochs == 0 {
            return Err(DgmError::invalid("epochs per task must be at least 1"));
        }
        if batches == 0 || (variant == MaskVariant::Dgmw && batches < 2) {
            return Err(DgmError::invalid(format!(
                "local annealing needs at least 2 batches per epoch, got {batches}"
            )));
        }
        Ok(AnnealSchedule {
            s_max,
            epochs,
            batches,
            variant,
        })
    }

    /// Upper scale for epoch `i` (1-based), globally annealed from
    /// `1/s_max` to `s_max`. A single-epoch schedule uses `s_max` directly.
    pub fn epoch_scale(&self, i: usize) -> Result<f64> {
        if i == 0 || i > self.epochs {
            return Err(DgmError::OutOfRange {
                what: "epoch",
                value: i,
                lo: 1,
                hi: self.epochs,
            });
        }
        if self.epochs == 1 {
            return Ok(self.s_max);
        }
        let lo = 1.0 / self.s_max;
        Ok(lo + (self.s_max - lo) * (i - 1) as f64 / (self.epochs - 1) as f64)
    }

    /// Scale `s` for epoch `i` and batch `b`, both 1-based.
    ///
    /// DGMa only anneals globally. DGMw additionally sweeps within the epoch
    /// from `1/s_i` to `s_i`; when `s_i < 1` that sweep runs downwards, which
    /// is what the linear formula gives and is kept as is.
    pub fn scale_at(&self, i: usize, b: usize) -> Result<f64> {
        let si = self.epoch_scale(i)?;
        if b == 0 || b > self.batches {
            return Err(DgmError::OutOfRange {
                what: "batch",
                value: b,
                lo: 1,
                hi: self.batches,
            });
        }
        match self.variant {
            MaskVariant::Dgma => Ok(si),
            MaskVariant::Dgmw => {
                let lo = 1.0 / si;
                Ok(lo + (si - lo) * (b - 1) as f64 / (self.batches - 1) as f64)
            }
        }
    }
}

/// Soft mask `σ(s·e)`, elementwise.
pub fn mask_values(embedding: &Tensor, s: f64) -> Result<Tensor> {
    if s.is_nan() || s <= 0.0 {
        return Err(DgmError::invalid(format!(
            "mask scale must be positive, got {s}"
        )));
    }
    Ok(embedding.map(|e| crate::tensor::sigmoid(s * e)))
}

/// `(1 - m) ∘ g`. A `[1, p]` gate broadcasts over the rows of `g`.
pub fn gate_gradient(grad: &Tensor, m_cum: &Tensor) -> Result<Tensor> {
    let gate = if m_cum.shape() == grad.shape() {
        m_cum.clone()
    } else if m_cum.rows() == 1 && m_cum.cols() == grad.cols() {
        m_cum.broadcast_rows(grad.rows())?
    } else {
        return Err(DgmError::shape(
            "gate_gradient",
            grad.shape(),
            m_cum.shape(),
        ));
    };
    grad.zip_map(&gate, "gate_gradient", |g, m| (1.0 - m) * g)
}

/// Reuse-aware sparsity penalty: the share of previously free capacity the
/// current masks claim. Returns 0 when nothing is free.
pub fn regularizer(current: &[Tensor], previous: &[Tensor]) -> Result<f64> {
    if current.len() != previous.len() {
        return Err(DgmError::shape(
            "regularizer",
            &[current.len()],
            &[previous.len()],
        ));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (m, p) in current.iter().zip(previous) {
        if m.shape() != p.shape() {
            return Err(DgmError::shape("regularizer", m.shape(), p.shape()));
        }
        for (&mi, &pi) in m.data().iter().zip(p.data()) {
            num += mi * (1.0 - pi);
            den += 1.0 - pi;
        }
    }
    if den <= 0.0 {
        log::debug!("generator capacity exhausted: no free mask entries left");
        return Ok(0.0);
    }
    Ok(num / den)
}

/// Graph version of [`regularizer`]; gradients flow into `current`.
pub fn regularizer_node(
    graph: &mut Graph,
    current: &[NodeId],
    previous: &[Tensor],
) -> Result<NodeId> {
    if current.len() != previous.len() {
        return Err(DgmError::shape(
            "regularizer",
            &[current.len()],
            &[previous.len()],
        ));
    }
    let mut den = 0.0;
    let mut total: Option<NodeId> = None;
    for (&m, p) in current.iter().zip(previous) {
        let free = p.map(|v| 1.0 - v);
        den += free.sum();
        let free = graph.constant(free)?;
        let claimed = graph.mul(m, free)?;
        let s = graph.sum(claimed)?;
        total = Some(match total {
            Some(t) => graph.add(t, s)?,
            None => s,
        });
    }
    match total {
        Some(t) if den > 0.0 => graph.scale(t, 1.0 / den),
        _ => {
            log::debug!("generator capacity exhausted: no free mask entries left");
            graph.constant(Tensor::scalar(0.0))
        }
    }
}

/// A binary matrix stored as a bitset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    rows: usize,
    cols: usize,
    bits: BitVec<u64, Lsb0>,
}

impl BinaryMask {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        BinaryMask {
            rows,
            cols,
            bits: bitvec![u64, Lsb0; 0; rows * cols],
        }
    }

    pub fn from_bools(rows: usize, cols: usize, values: &[bool]) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(DgmError::shape(
                "BinaryMask",
                &[rows, cols],
                &[values.len()],
            ));
        }
        let mut m = Self::zeros(rows, cols);
        for (i, &v) in values.iter().enumerate() {
            m.bits.set(i, v);
        }
        Ok(m)
    }

    /// Threshold an embedding at zero; exact zeros stay free.
    pub fn from_embedding(e: &Tensor) -> Self {
        let mut m = Self::zeros(e.rows(), e.cols());
        for (i, &v) in e.data().iter().enumerate() {
            m.bits.set(i, v > 0.0);
        }
        m
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.count_ones()
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        if self.shape() != other.shape() {
            return Err(DgmError::shape(
                "mask union",
                &[self.rows, self.cols],
                &[other.rows, other.cols],
            ));
        }
        let mut bits = self.bits.clone();
        bits |= &other.bits;
        Ok(BinaryMask {
            rows: self.rows,
            cols: self.cols,
            bits,
        })
    }

    /// True when every set entry of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.shape() == other.shape() && self.bits.iter_ones().all(|i| other.bits[i])
    }

    /// Zero-pads by `extra_rows` at the bottom and `extra_cols` on the right.
    pub fn pad(&self, extra_rows: usize, extra_cols: usize) -> BinaryMask {
        let (r, c) = (self.rows + extra_rows, self.cols + extra_cols);
        let mut out = BinaryMask::zeros(r, c);
        for i in self.bits.iter_ones() {
            let (row, col) = (i / self.cols, i % self.cols);
            out.bits.set(row * c + col, true);
        }
        out
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self
            .bits
            .iter()
            .map(|b| if *b { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(vec![self.rows, self.cols], data).expect("bitset length matches shape")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.len().div_ceil(8)];
        for i in self.bits.iter_ones() {
            out[i / 8] |= 1 << (i % 8);
        }
        out
    }

    pub fn from_bytes(rows: usize, cols: usize, bytes: &[u8]) -> Result<Self> {
        let n = rows * cols;
        if bytes.len() != n.div_ceil(8) {
            return Err(DgmError::Checkpoint(format!(
                "bitset for {rows}x{cols} needs {} bytes, got {}",
                n.div_ceil(8),
                bytes.len()
            )));
        }
        let mut m = Self::zeros(rows, cols);
        for i in 0..n {
            if bytes[i / 8] >> (i % 8) & 1 == 1 {
                m.bits.set(i, true);
            }
        }
        Ok(m)
    }
}

/// Elementwise maximum of all per-task binary masks, plus the snapshots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CumulatedMask {
    cumulated: BinaryMask,
    snapshots: Vec<BinaryMask>,
}

impl CumulatedMask {
    pub fn new(rows: usize, cols: usize) -> Self {
        CumulatedMask {
            cumulated: BinaryMask::zeros(rows, cols),
            snapshots: Vec::new(),
        }
    }

    pub fn from_parts(cumulated: BinaryMask, snapshots: Vec<BinaryMask>) -> Self {
        CumulatedMask {
            cumulated,
            snapshots,
        }
    }

    pub fn cumulated(&self) -> &BinaryMask {
        &self.cumulated
    }

    pub fn snapshots(&self) -> &[BinaryMask] {
        &self.snapshots
    }

    /// Binary mask of task `task` (1-based).
    pub fn snapshot(&self, task: usize) -> Result<&BinaryMask> {
        task.checked_sub(1)
            .and_then(|i| self.snapshots.get(i))
            .ok_or(DgmError::UnknownTask(task))
    }

    /// Stores `mask` as the next task's snapshot and folds it in.
    pub fn reserve(&mut self, mask: BinaryMask) -> Result<()> {
        self.cumulated = self.cumulated.union(&mask)?;
        self.snapshots.push(mask);
        Ok(())
    }

    pub fn pad(&mut self, extra_rows: usize, extra_cols: usize) {
        self.cumulated = self.cumulated.pad(extra_rows, extra_cols);
        for s in &mut self.snapshots {
            *s = s.pad(extra_rows, extra_cols);
        }
    }
}

/// Fraction of reserved entries and the number still free.
pub fn occupation(cum: &BinaryMask) -> (f64, usize) {
    let total = cum.len();
    let used = cum.count_ones();
    let frac = if total == 0 {
        0.0
    } else {
        used as f64 / total as f64
    };
    (frac, total - used)
}

/// Mask embeddings and reservations of one generator layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskState {
    pub variant: MaskVariant,
    /// Embedding of the task being learned: `[1, p]` (DGMa) or `[n, p]` (DGMw).
    pub embedding: Tensor,
    /// DGMw only: `[1, p]` embedding over the bias row.
    pub bias_embedding: Option<Tensor>,
    pub weights: CumulatedMask,
    /// DGMw only: reservations of the bias row.
    pub bias: Option<CumulatedMask>,
}

impl MaskState {
    pub fn new(variant: MaskVariant, n: usize, p: usize) -> Self {
        match variant {
            MaskVariant::Dgma => MaskState {
                variant,
                embedding: Tensor::zeros(1, p),
                bias_embedding: None,
                weights: CumulatedMask::new(1, p),
                bias: None,
            },
            MaskVariant::Dgmw => MaskState {
                variant,
                embedding: Tensor::zeros(n, p),
                bias_embedding: Some(Tensor::zeros(1, p)),
                weights: CumulatedMask::new(n, p),
                bias: Some(CumulatedMask::new(1, p)),
            },
        }
    }

    pub fn tasks(&self) -> usize {
        self.weights.snapshots().len()
    }

    /// Starts a new task: embeddings reset to zero (soft mask 0.5).
    pub fn reset_embeddings(&mut self) {
        self.embedding = self.embedding.map(|_| 0.0);
        if let Some(b) = &mut self.bias_embedding {
            *b = b.map(|_| 0.0);
        }
    }

    /// Cumulated masks of all finished tasks as `(weight, bias)` tensors.
    pub fn cumulated_tensors(&self) -> (Tensor, Tensor) {
        let w = self.weights.cumulated().to_tensor();
        let b = match &self.bias {
            Some(b) => b.cumulated().to_tensor(),
            None => w.clone(),
        };
        (w, b)
    }

    /// Binary masks of task `task` as `(weight, bias)` tensors.
    pub fn snapshot_tensors(&self, task: usize) -> Result<(Tensor, Tensor)> {
        let w = self.weights.snapshot(task)?.to_tensor();
        let b = match &self.bias {
            Some(b) => b.snapshot(task)?.to_tensor(),
            None => w.clone(),
        };
        Ok((w, b))
    }

    /// Binarizes the current embeddings, stores the task snapshot and
    /// updates the cumulated mask. Returns the new weight-mask snapshot.
    pub fn binarize_and_reserve(&mut self) -> Result<BinaryMask> {
        let m = BinaryMask::from_embedding(&self.embedding);
        self.weights.reserve(m.clone())?;
        if let (Some(be), Some(bc)) = (&self.bias_embedding, &mut self.bias) {
            bc.reserve(BinaryMask::from_embedding(be))?;
        }
        Ok(m)
    }

    /// Binary mask the embeddings would produce right now, merged with
    /// earlier reservations.
    pub fn prospective(&self) -> Result<BinaryMask> {
        BinaryMask::from_embedding(&self.embedding).union(self.weights.cumulated())
    }

    /// Gates `(weight [n, p], bias [1, p])` for the current step:
    /// `1 - max(m_soft, m_cum)`, or `1 - m_cum` without the soft term.
    pub fn gates(&self, n: usize, s: Option<f64>) -> Result<(Tensor, Tensor)> {
        let (cw, cb) = self.cumulated_tensors();
        let (sw, sb) = match s {
            Some(s) => {
                let sw = mask_values(&self.embedding, s)?;
                let sb = match &self.bias_embedding {
                    Some(b) => mask_values(b, s)?,
                    None => sw.clone(),
                };
                (Some(sw), Some(sb))
            }
            None => (None, None),
        };
        let merge = |cum: Tensor, soft: Option<Tensor>| -> Result<Tensor> {
            match soft {
                Some(sm) => cum.zip_map(&sm, "gate", |c, m| 1.0 - c.max(m)),
                None => Ok(cum.map(|c| 1.0 - c)),
            }
        };
        let gw = merge(cw, sw)?;
        let gb = merge(cb, sb)?;
        let gw = if gw.rows() == 1 && n != 1 {
            gw.broadcast_rows(n)?
        } else {
            gw
        };
        Ok((gw, gb))
    }

    /// Grows the layer by `extra_rows` inputs and `extra_cols` outputs.
    /// New embedding entries start at zero, new mask entries are free.
    pub fn grow(&mut self, extra_rows: usize, extra_cols: usize) {
        match self.variant {
            MaskVariant::Dgma => {
                self.embedding = self.embedding.append_cols(extra_cols, |_, _| 0.0);
                self.weights.pad(0, extra_cols);
            }
            MaskVariant::Dgmw => {
                self.embedding = self
                    .embedding
                    .append_cols(extra_cols, |_, _| 0.0)
                    .append_rows(extra_rows, |_, _| 0.0);
                self.weights.pad(extra_rows, extra_cols);
                if let Some(b) = &mut self.bias_embedding {
                    *b = b.append_cols(extra_cols, |_, _| 0.0);
                }
                if let Some(b) = &mut self.bias {
                    b.pad(0, extra_cols);
                }
            }
        }
    }
}

/// Clamps embedding gradients entrywise to `[-bound, bound]`; a bound of
/// zero leaves them untouched.
pub fn clamp_embedding_grad(grad: &mut Tensor, bound: f64) {
    if bound <= 0.0 {
        return;
    }
    for g in grad.data_mut() {
        *g = g.clamp(-bound, bound);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::matrix(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn scale_at_examples() {
        let s = AnnealSchedule::new(200.0, 10, 100, MaskVariant::Dgmw).unwrap();
        assert_eq!(s.scale_at(10, 100).unwrap(), 200.0);
        assert!((s.epoch_scale(1).unwrap() - 0.005).abs() < 1e-15);
        assert!((s.scale_at(10, 1).unwrap() - 0.005).abs() < 1e-15);
        let a = AnnealSchedule::new(200.0, 10, 100, MaskVariant::Dgma).unwrap();
        assert_eq!(a.scale_at(10, 1).unwrap(), 200.0);
        assert!((a.scale_at(1, 50).unwrap() - 0.005).abs() < 1e-15);
    }

    #[test]
    fn scale_at_rejects_out_of_range() {
        let s = AnnealSchedule::new(200.0, 10, 100, MaskVariant::Dgmw).unwrap();
        assert!(s.scale_at(0, 1).is_err());
        assert!(s.scale_at(11, 1).is_err());
        assert!(s.scale_at(1, 101).is_err());
        assert!(AnnealSchedule::new(1.0, 10, 100, MaskVariant::Dgmw).is_err());
        assert!(AnnealSchedule::new(200.0, 10, 1, MaskVariant::Dgmw).is_err());
    }

    #[test]
    fn single_epoch_uses_s_max() {
        let s = AnnealSchedule::new(400.0, 1, 10, MaskVariant::Dgmw).unwrap();
        assert_eq!(s.epoch_scale(1).unwrap(), 400.0);
        assert_eq!(s.scale_at(1, 10).unwrap(), 400.0);
    }

    #[test]
    fn mask_values_examples() {
        assert_eq!(mask_values(&row(&[0.0]), 1.0).unwrap().item(), 0.5);
        assert!((1.0 - mask_values(&row(&[10.0]), 100.0).unwrap().item()) < 1e-9);
        let v = mask_values(&row(&[-0.01]), 200.0).unwrap().item();
        assert!((v - 1.0 / (1.0 + 2f64.exp())).abs() < 1e-15);
        assert!((v - 0.1192).abs() < 1e-4);
        assert!(mask_values(&row(&[0.0]), 0.0).is_err());
    }

    #[test]
    fn gate_gradient_examples() {
        let g = row(&[2.0, -3.0]);
        assert!(gate_gradient(&g, &row(&[1.0, 1.0]))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert_eq!(gate_gradient(&g, &row(&[0.0, 0.0])).unwrap(), g);
        assert_eq!(
            gate_gradient(&g, &row(&[1.0, 0.25])).unwrap().data(),
            &[0.0, -2.25]
        );
        // DGMa gate broadcast over input rows
        let g2 = Tensor::matrix(2, 2, vec![1., 1., 1., 1.]).unwrap();
        assert_eq!(
            gate_gradient(&g2, &row(&[1.0, 0.0])).unwrap().data(),
            &[0., 1., 0., 1.]
        );
        assert!(gate_gradient(&g2, &row(&[1.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn regularizer_examples() {
        assert_eq!(
            regularizer(&[row(&[1.; 4])], &[row(&[0.; 4])]).unwrap(),
            1.0
        );
        assert_eq!(
            regularizer(&[row(&[1., 0., 1., 0.])], &[row(&[1., 0., 1., 1.])]).unwrap(),
            0.0
        );
        let r = regularizer(&[row(&[1., 0.8, 0.2, 0.])], &[row(&[1., 0., 0., 0.])]).unwrap();
        assert!((r - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(
            regularizer(&[row(&[1.; 2])], &[row(&[1.; 2])]).unwrap(),
            0.0
        );
    }

    #[test]
    fn regularizer_node_matches_plain_value() {
        let cur = [row(&[1., 0.8, 0.2, 0.]), row(&[0.3, 0.9])];
        let prev = [row(&[1., 0., 0., 0.]), row(&[0., 1.])];
        let mut g = Graph::new();
        let ids: Vec<_> = cur.iter().map(|t| g.input(t.clone()).unwrap()).collect();
        let r = regularizer_node(&mut g, &ids, &prev).unwrap();
        let expect = regularizer(&cur, &prev).unwrap();
        assert!((g.value(r).item() - expect).abs() < 1e-15);
    }

    #[test]
    fn binarize_examples() {
        let mut st = MaskState::new(MaskVariant::Dgma, 4, 3);
        st.embedding = row(&[0.3, -0.2, 0.0]);
        let m = st.binarize_and_reserve().unwrap();
        assert_eq!(m.to_tensor().data(), &[1., 0., 0.]);

        let mut cum = CumulatedMask::new(1, 3);
        cum.reserve(BinaryMask::from_bools(1, 3, &[false, true, false]).unwrap())
            .unwrap();
        cum.reserve(BinaryMask::from_bools(1, 3, &[true, false, false]).unwrap())
            .unwrap();
        assert_eq!(cum.cumulated().to_tensor().data(), &[1., 1., 0.]);

        let mut st = MaskState::new(MaskVariant::Dgmw, 2, 2);
        st.embedding = st.embedding.map(|_| -1.0);
        st.binarize_and_reserve().unwrap();
        assert_eq!(occupation(st.weights.cumulated()), (0.0, 4));
    }

    #[test]
    fn occupation_examples() {
        assert_eq!(occupation(&BinaryMask::zeros(4, 4)), (0.0, 16));
        let full = BinaryMask::from_bools(2, 2, &[true; 4]).unwrap();
        assert_eq!(occupation(&full), (1.0, 0));
        let mut bits = [false; 16];
        bits[..6].fill(true);
        let m = BinaryMask::from_bools(4, 4, &bits).unwrap();
        assert_eq!(occupation(&m), (0.375, 10));
    }

    #[test]
    fn bitset_bytes_round_trip_and_pad() {
        let m = BinaryMask::from_bools(
            3,
            3,
            &[true, false, true, false, false, true, true, true, false],
        )
        .unwrap();
        assert_eq!(BinaryMask::from_bytes(3, 3, &m.to_bytes()).unwrap(), m);
        let p = m.pad(1, 2);
        assert_eq!(p.shape(), (4, 5));
        assert_eq!(p.count_ones(), m.count_ones());
        assert!(p.get(0) && !p.get(1) && p.get(2) && p.get(5 + 2));
    }

    #[test]
    fn gates_freeze_reserved_entries_exactly() {
        let mut st = MaskState::new(MaskVariant::Dgma, 3, 2);
        st.embedding = row(&[1.0, -1.0]);
        st.binarize_and_reserve().unwrap();
        st.reset_embeddings();
        let (gw, gb) = st.gates(3, Some(5.0)).unwrap();
        assert_eq!(gw.shape(), &[3, 2]);
        for r in 0..3 {
            assert_eq!(gw.get(r, 0), 0.0);
            assert_eq!(gw.get(r, 1), 0.5);
        }
        assert_eq!(gb.data(), &[0.0, 0.5]);
    }

    #[test]
    fn embedding_clamp_bounds_entries_unless_disabled() {
        let mut g = row(&[-80.0, 3.0, 120.0]);
        clamp_embedding_grad(&mut g, 50.0);
        assert_eq!(g.data(), &[-50.0, 3.0, 50.0]);
        let mut g = row(&[-80.0, 3.0, 120.0]);
        clamp_embedding_grad(&mut g, 0.0);
        assert_eq!(g.data(), &[-80.0, 3.0, 120.0]);
    }
}
