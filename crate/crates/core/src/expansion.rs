//! Post-task layer growth that restores each masked layer's free capacity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DgmError, Result};
use crate::masks::{BinaryMask, MaskState, MaskVariant};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowthRecord {
    pub task: usize,
    /// Mask entries newly reserved by the task (neurons or weights).
    pub delta: usize,
    pub neurons_added: usize,
}

/// One masked generator layer: `x · W + b` with `W` of shape `[n, p]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSlot {
    pub weight: Tensor,
    pub bias: Tensor,
    pub variant: MaskVariant,
    /// Free capacity right after construction; constant for the layer's life.
    pub base_free: usize,
    pub growth_log: Vec<GrowthRecord>,
}

impl LayerSlot {
    pub fn new(n: usize, p: usize, variant: MaskVariant, rng: &mut impl Rng) -> Self {
        let bound = init_bound(n, p);
        let data = (0..n * p)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        LayerSlot {
            weight: Tensor::matrix(n, p, data).expect("n*p entries"),
            bias: Tensor::zeros(1, p),
            variant,
            base_free: capacity(variant, n, p),
            growth_log: Vec::new(),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }

    /// Mask entries of the layer: neurons for DGMa, weights for DGMw.
    pub fn capacity(&self) -> usize {
        capacity(self.variant, self.inputs(), self.outputs())
    }

    /// Appends `extra` input rows, e.g. when the previous layer grew.
    pub fn grow_inputs(&mut self, extra: usize, rng: &mut impl Rng) {
        if extra == 0 {
            return;
        }
        let bound = init_bound(self.inputs() + extra, self.outputs());
        self.weight = self
            .weight
            .append_rows(extra, |_, _| rng.random_range(-bound..bound));
    }

    /// Appends `extra` output neurons with fresh weights and zero bias.
    pub fn grow_outputs(&mut self, extra: usize, rng: &mut impl Rng) {
        if extra == 0 {
            return;
        }
        let bound = init_bound(self.inputs(), self.outputs() + extra);
        self.weight = self
            .weight
            .append_cols(extra, |_, _| rng.random_range(-bound..bound));
        self.bias = self.bias.append_cols(extra, |_, _| 0.0);
    }
}

fn capacity(variant: MaskVariant, n: usize, p: usize) -> usize {
    match variant {
        MaskVariant::Dgma => p,
        MaskVariant::Dgmw => n * p,
    }
}

/// Glorot-uniform bound `sqrt(6 / (n + p))`.
pub fn init_bound(n: usize, p: usize) -> f64 {
    (6.0 / (n + p).max(1) as f64).sqrt()
}

/// Number of entries that flipped from free to reserved.
pub fn reserved_delta(before: &BinaryMask, after: &BinaryMask) -> Result<usize> {
    if before.shape() != after.shape() {
        let (a, b) = (before.shape(), after.shape());
        return Err(DgmError::shape("reserved_delta", &[a.0, a.1], &[b.0, b.1]));
    }
    let mut delta = 0;
    for i in 0..before.len() {
        match (before.get(i), after.get(i)) {
            (true, false) => return Err(DgmError::NotMonotone(i)),
            (false, true) => delta += 1,
            _ => {}
        }
    }
    Ok(delta)
}

/// Free units of a layer given its cumulated mask.
pub fn free_capacity(layer: &LayerSlot, cum: &BinaryMask) -> Result<usize> {
    let expect = match layer.variant {
        MaskVariant::Dgma => (1, layer.outputs()),
        MaskVariant::Dgmw => (layer.inputs(), layer.outputs()),
    };
    if cum.shape() != expect {
        return Err(DgmError::shape(
            "free_capacity",
            &[expect.0, expect.1],
            &[cum.shape().0, cum.shape().1],
        ));
    }
    Ok(layer.capacity() - cum.count_ones())
}

/// Output neurons to add after a task reserved `delta` entries.
pub fn neurons_to_add(variant: MaskVariant, n: usize, delta: usize) -> usize {
    match variant {
        MaskVariant::Dgma => delta,
        MaskVariant::Dgmw => delta.div_ceil(n.max(1)),
    }
}

fn expand(
    layer: &mut LayerSlot,
    masks: &mut MaskState,
    task: usize,
    delta: usize,
    rng: &mut impl Rng,
) -> usize {
    let added = neurons_to_add(layer.variant, layer.inputs(), delta);
    layer.grow_outputs(added, rng);
    masks.grow(0, added);
    layer.growth_log.push(GrowthRecord {
        task,
        delta,
        neurons_added: added,
    });
    added
}

/// Adds `delta` neurons to an activation-masked layer, so that its number of
/// free neurons returns to what it was before the task. Returns the count of
/// neurons added; the caller grows the next layer's inputs by the same.
pub fn expand_dgma(
    layer: &mut LayerSlot,
    masks: &mut MaskState,
    task: usize,
    delta: usize,
    rng: &mut impl Rng,
) -> Result<usize> {
    if layer.variant != MaskVariant::Dgma || masks.variant != MaskVariant::Dgma {
        return Err(DgmError::invalid("expand_dgma on a weight-masked layer"));
    }
    Ok(expand(layer, masks, task, delta, rng))
}

/// Adds `ceil(delta / n)` neurons to a weight-masked layer. Free weights end
/// up at their pre-task level plus a surplus below `n`.
pub fn expand_dgmw(
    layer: &mut LayerSlot,
    masks: &mut MaskState,
    task: usize,
    delta: usize,
    rng: &mut impl Rng,
) -> Result<usize> {
    if layer.variant != MaskVariant::Dgmw || masks.variant != MaskVariant::Dgmw {
        return Err(DgmError::invalid(
            "expand_dgmw on an activation-masked layer",
        ));
    }
    Ok(expand(layer, masks, task, delta, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bools(rows: usize, cols: usize, ones: &[usize]) -> BinaryMask {
        let mut v = vec![false; rows * cols];
        for &i in ones {
            v[i] = true;
        }
        BinaryMask::from_bools(rows, cols, &v).unwrap()
    }

    #[test]
    fn reserved_delta_examples() {
        let a = bools(1, 3, &[2]);
        assert_eq!(reserved_delta(&a, &a).unwrap(), 0);
        assert_eq!(reserved_delta(&a, &bools(1, 3, &[0, 2])).unwrap(), 1);
        let w = bools(4, 4, &[]);
        assert_eq!(
            reserved_delta(&w, &bools(4, 4, &[0, 3, 5, 9, 12, 15])).unwrap(),
            6
        );
        assert!(matches!(
            reserved_delta(&bools(1, 3, &[1]), &bools(1, 3, &[0])),
            Err(DgmError::NotMonotone(1))
        ));
    }

    fn reserve_first(masks: &mut MaskState, k: usize) -> BinaryMask {
        let before = masks.weights.cumulated().clone();
        let n = before.len();
        let mut e = masks.embedding.map(|_| -1.0);
        let mut left = k;
        for i in 0..n {
            if left > 0 && !before.get(i) {
                e.data_mut()[i] = 1.0;
                left -= 1;
            }
        }
        masks.embedding = e;
        masks.binarize_and_reserve().unwrap();
        masks.reset_embeddings();
        before
    }

    #[test]
    fn dgma_growth_keeps_free_neurons_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = LayerSlot::new(10, 64, MaskVariant::Dgma, &mut rng);
        let mut masks = MaskState::new(MaskVariant::Dgma, 10, 64);
        let mut sizes = vec![];
        for (task, d) in [(1, 5), (2, 7)] {
            let before = reserve_first(&mut masks, d);
            let delta = reserved_delta(&before.pad(0, 0), masks.weights.cumulated()).unwrap();
            assert_eq!(delta, d);
            expand_dgma(&mut layer, &mut masks, task, delta, &mut rng).unwrap();
            sizes.push(layer.outputs());
            assert_eq!(
                free_capacity(&layer, masks.weights.cumulated()).unwrap(),
                64
            );
        }
        assert_eq!(sizes, vec![69, 76]);
        let total: usize = layer.growth_log.iter().map(|g| g.neurons_added).sum();
        assert_eq!(64 + total, layer.outputs());
    }

    #[test]
    fn dgma_delta_twenty() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut layer = LayerSlot::new(8, 64, MaskVariant::Dgma, &mut rng);
        let mut masks = MaskState::new(MaskVariant::Dgma, 8, 64);
        reserve_first(&mut masks, 20);
        expand_dgma(&mut layer, &mut masks, 1, 20, &mut rng).unwrap();
        assert_eq!(layer.outputs(), 84);
        assert_eq!(
            free_capacity(&layer, masks.weights.cumulated()).unwrap(),
            64
        );
    }

    #[test]
    fn zero_delta_leaves_layer_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut layer = LayerSlot::new(4, 3, MaskVariant::Dgmw, &mut rng);
        let mut masks = MaskState::new(MaskVariant::Dgmw, 4, 3);
        let before = layer.weight.clone();
        assert_eq!(
            expand_dgmw(&mut layer, &mut masks, 1, 0, &mut rng).unwrap(),
            0
        );
        assert_eq!(layer.weight, before);
    }

    #[test]
    fn dgmw_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut layer = LayerSlot::new(4, 3, MaskVariant::Dgmw, &mut rng);
        let mut masks = MaskState::new(MaskVariant::Dgmw, 4, 3);
        reserve_first(&mut masks, 6);
        assert_eq!(
            expand_dgmw(&mut layer, &mut masks, 1, 6, &mut rng).unwrap(),
            2
        );
        assert_eq!(
            free_capacity(&layer, masks.weights.cumulated()).unwrap(),
            14
        );

        let mut layer = LayerSlot::new(4, 3, MaskVariant::Dgmw, &mut rng);
        let mut masks = MaskState::new(MaskVariant::Dgmw, 4, 3);
        reserve_first(&mut masks, 8);
        assert_eq!(
            expand_dgmw(&mut layer, &mut masks, 1, 8, &mut rng).unwrap(),
            2
        );
        assert_eq!(
            free_capacity(&layer, masks.weights.cumulated()).unwrap(),
            12
        );
    }

    #[test]
    fn variant_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut layer = LayerSlot::new(4, 3, MaskVariant::Dgmw, &mut rng);
        let mut masks = MaskState::new(MaskVariant::Dgmw, 4, 3);
        assert!(expand_dgma(&mut layer, &mut masks, 1, 1, &mut rng).is_err());
    }

    #[test]
    fn free_capacity_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let layer = LayerSlot::new(5, 84, MaskVariant::Dgma, &mut rng);
        assert_eq!(
            free_capacity(&layer, &BinaryMask::zeros(1, 84)).unwrap(),
            84
        );
        let twenty: Vec<usize> = (0..20).collect();
        assert_eq!(free_capacity(&layer, &bools(1, 84, &twenty)).unwrap(), 64);
        let all: Vec<usize> = (0..84).collect();
        assert_eq!(free_capacity(&layer, &bools(1, 84, &all)).unwrap(), 0);
    }
}
