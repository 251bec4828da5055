//! Versioned binary snapshots of the full training state.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` payload length, then
//! the payload. All integers are little-endian and floats are stored as
//! their IEEE bit patterns, so a round trip is exact.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DgmError, Result};
use crate::expansion::{GrowthRecord, LayerSlot};
use crate::masks::{BinaryMask, CumulatedMask, MaskState};
use crate::memory::{Dense, Dgm, Discriminator, GanConfig, Generator, GeneratorSpec, StepCounters};
use crate::tensor::{AdamState, Optimizer, OptimizerKind, Tensor};

pub const MAGIC: &[u8; 8] = b"DGMCKPT\0";
pub const VERSION: u32 = 1;

/// Training state after a finished task.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub task: usize,
    pub config_toml: String,
    pub model: Dgm,
    pub rng: ChaCha8Rng,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    task: usize,
    config_toml: String,
    gen_spec: GeneratorSpec,
    gan: GanConfig,
    counters: StepCounters,
    task_classes: Vec<Vec<usize>>,
    trunk_layers: usize,
}

#[derive(Default)]
struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.usize(b.len());
        self.buf.extend_from_slice(b);
    }

    fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        for &x in v {
            self.f64(x);
        }
    }

    fn tensor(&mut self, t: &Tensor) {
        self.usize(t.shape().len());
        for &d in t.shape() {
            self.usize(d);
        }
        self.f64s(t.data());
    }

    fn opt_tensor(&mut self, t: Option<&Tensor>) {
        match t {
            Some(t) => {
                self.u64(1);
                self.tensor(t);
            }
            None => self.u64(0),
        }
    }

    fn mask(&mut self, m: &BinaryMask) {
        let (r, c) = m.shape();
        self.usize(r);
        self.usize(c);
        self.bytes(&m.to_bytes());
    }

    fn cumulated(&mut self, c: &CumulatedMask) {
        self.mask(c.cumulated());
        self.usize(c.snapshots().len());
        for s in c.snapshots() {
            self.mask(s);
        }
    }

    fn layer(&mut self, l: &LayerSlot) {
        self.tensor(&l.weight);
        self.tensor(&l.bias);
        self.usize(l.base_free);
        self.usize(l.growth_log.len());
        for g in &l.growth_log {
            self.usize(g.task);
            self.usize(g.delta);
            self.usize(g.neurons_added);
        }
    }

    fn optimizer(&mut self, o: &Optimizer) {
        self.str(&serde_json::to_string(&o.kind).expect("optimizer kind serializes"));
        self.f64(o.lr);
        self.usize(o.state().len());
        for (k, st) in o.state() {
            self.str(k);
            self.u64(st.step);
            self.f64s(&st.m);
            self.f64s(&st.v);
        }
    }
}

struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> DgmError {
    DgmError::Checkpoint(msg.into())
}

impl<'a> Decoder<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("length overflows usize"))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.usize()?;
        self.take(n)
    }

    fn str(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| corrupt("invalid utf-8"))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(corrupt(format!("truncated at byte {}", self.pos)));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.usize()?;
        if rank > 8 {
            return Err(corrupt("tensor rank too large"));
        }
        let shape = (0..rank)
            .map(|_| self.usize())
            .collect::<Result<Vec<_>>>()?;
        let data = self.f64s()?;
        Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))
    }

    fn opt_tensor(&mut self) -> Result<Option<Tensor>> {
        match self.u64()? {
            0 => Ok(None),
            1 => Ok(Some(self.tensor()?)),
            t => Err(corrupt(format!("bad option tag {t}"))),
        }
    }

    fn mask(&mut self) -> Result<BinaryMask> {
        let r = self.usize()?;
        let c = self.usize()?;
        BinaryMask::from_bytes(r, c, self.bytes()?).map_err(|e| corrupt(e.to_string()))
    }

    fn cumulated(&mut self) -> Result<CumulatedMask> {
        let cum = self.mask()?;
        let n = self.usize()?;
        let snaps = (0..n).map(|_| self.mask()).collect::<Result<Vec<_>>>()?;
        Ok(CumulatedMask::from_parts(cum, snaps))
    }

    fn layer(&mut self, variant: crate::masks::MaskVariant) -> Result<LayerSlot> {
        let weight = self.tensor()?;
        let bias = self.tensor()?;
        let base_free = self.usize()?;
        let n = self.usize()?;
        let growth_log = (0..n)
            .map(|_| {
                Ok(GrowthRecord {
                    task: self.usize()?,
                    delta: self.usize()?,
                    neurons_added: self.usize()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LayerSlot {
            weight,
            bias,
            variant,
            base_free,
            growth_log,
        })
    }

    fn optimizer(&mut self) -> Result<Optimizer> {
        let kind: OptimizerKind = serde_json::from_str(&self.str()?)?;
        let lr = self.f64()?;
        let mut opt = Optimizer::new(kind, lr);
        let n = self.usize()?;
        let mut state = BTreeMap::new();
        for _ in 0..n {
            let key = self.str()?;
            let step = self.u64()?;
            let m = self.f64s()?;
            let v = self.f64s()?;
            state.insert(key, AdamState { m, v, step });
        }
        *opt.state_mut() = state;
        Ok(opt)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let meta = Meta {
            task: self.task,
            config_toml: self.config_toml.clone(),
            gen_spec: m.gen.spec.clone(),
            gan: m.config.clone(),
            counters: m.counters,
            task_classes: m.gen.task_classes.clone(),
            trunk_layers: m.disc.trunk.len(),
        };
        let mut e = Encoder::default();
        e.str(&serde_json::to_string(&meta).expect("meta serializes"));
        e.bytes(&self.rng.get_seed());
        e.u64(self.rng.get_stream());
        e.bytes(&self.rng.get_word_pos().to_le_bytes());
        for (layer, ms) in m.gen.hidden.iter().zip(&m.gen.masks) {
            e.layer(layer);
            e.tensor(&ms.embedding);
            e.opt_tensor(ms.bias_embedding.as_ref());
            e.cumulated(&ms.weights);
            match &ms.bias {
                Some(b) => {
                    e.u64(1);
                    e.cumulated(b);
                }
                None => e.u64(0),
            }
        }
        e.layer(&m.gen.output);
        for d in m.disc.trunk.iter().chain([&m.disc.adv, &m.disc.aux]) {
            e.tensor(&d.weight);
            e.tensor(&d.bias);
        }
        e.optimizer(&m.opt_g);
        e.optimizer(&m.opt_e);
        e.optimizer(&m.opt_d);

        let mut out = Vec::with_capacity(e.buf.len() + 20);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(e.buf.len() as u64).to_le_bytes());
        out.extend_from_slice(&e.buf);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing checkpoint magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        if bytes.len() - 20 != len {
            return Err(corrupt(format!(
                "payload length {} does not match header {len}",
                bytes.len() - 20
            )));
        }
        let mut d = Decoder {
            buf: &bytes[20..],
            pos: 0,
        };
        let meta: Meta = serde_json::from_str(&d.str()?)?;
        let seed: [u8; 32] = d
            .bytes()?
            .try_into()
            .map_err(|_| corrupt("rng seed must be 32 bytes"))?;
        let stream = d.u64()?;
        let word_pos = u128::from_le_bytes(
            d.bytes()?
                .try_into()
                .map_err(|_| corrupt("bad rng position"))?,
        );
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);

        let variant = meta.gen_spec.variant;
        let mut hidden = Vec::new();
        let mut masks = Vec::new();
        for _ in 0..meta.gen_spec.hidden.len() {
            hidden.push(d.layer(variant)?);
            let embedding = d.tensor()?;
            let bias_embedding = d.opt_tensor()?;
            let weights = d.cumulated()?;
            let bias = match d.u64()? {
                0 => None,
                _ => Some(d.cumulated()?),
            };
            masks.push(MaskState {
                variant,
                embedding,
                bias_embedding,
                weights,
                bias,
            });
        }
        let output = d.layer(variant)?;
        let mut dense = Vec::new();
        for _ in 0..meta.trunk_layers + 2 {
            dense.push(Dense {
                weight: d.tensor()?,
                bias: d.tensor()?,
            });
        }
        let aux = dense.pop().expect("aux");
        let adv = dense.pop().expect("adv");
        let opt_g = d.optimizer()?;
        let opt_e = d.optimizer()?;
        let opt_d = d.optimizer()?;
        if d.pos != d.buf.len() {
            return Err(corrupt("trailing bytes after payload"));
        }
        let gen = Generator {
            spec: meta.gen_spec,
            hidden,
            masks,
            output,
            task_classes: meta.task_classes,
        };
        let disc = Discriminator {
            trunk: dense,
            adv,
            aux,
        };
        let model = Dgm {
            gen,
            disc,
            config: meta.gan,
            opt_g,
            opt_e,
            opt_d,
            counters: meta.counters,
            fault: None,
        };
        Ok(Checkpoint {
            task: meta.task,
            config_toml: meta.config_toml,
            model,
            rng,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::MaskVariant;
    use crate::memory::OutputActivation;
    use rand::{Rng, SeedableRng};

    fn trained(variant: MaskVariant) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = GeneratorSpec {
            latent_dim: 2,
            num_classes: 4,
            hidden: vec![5, 4],
            output_dim: 2,
            variant,
            output_activation: OutputActivation::Linear,
        };
        let gen = Generator::new(spec, &mut rng).unwrap();
        let disc = Discriminator::new(2, &[6], 0, &mut rng);
        let cfg = GanConfig {
            batch_size: 4,
            n_critic: 2,
            ..GanConfig::default()
        };
        let mut model = Dgm::new(gen, disc, cfg).unwrap();
        model.begin_task(&[0, 1], &mut rng).unwrap();
        let mut data_rng = ChaCha8Rng::seed_from_u64(1);
        let mut real = move || {
            let x = (0..8).map(|_| data_rng.random_range(-1.0..1.0)).collect();
            Ok((Tensor::matrix(4, 2, x).unwrap(), vec![0, 1, 0, 1]))
        };
        let mut ctx = crate::memory::StepContext {
            real: &mut real,
            task: 1,
            classes: &[0, 1],
            replay: true,
            s: 2.0,
            alpha: 1.0,
        };
        model.alternate_step(&mut ctx, &mut rng).unwrap();
        let deltas = model.gen.finish_task(&[0, 1]).unwrap();
        model.gen.expand(1, &deltas, &mut rng).unwrap();
        let _: u32 = rng.random();
        Checkpoint {
            task: 1,
            config_toml: "seed = 11\n".into(),
            model,
            rng,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        for variant in [MaskVariant::Dgma, MaskVariant::Dgmw] {
            let ck = trained(variant);
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back.task, 1);
            assert_eq!(back.config_toml, ck.config_toml);
            assert_eq!(back.model.gen, ck.model.gen);
            assert_eq!(back.model.disc, ck.model.disc);
            assert_eq!(back.model.opt_d.state(), ck.model.opt_d.state());
            assert_eq!(back.model.opt_g.state(), ck.model.opt_g.state());
            assert_eq!(back.model.counters, ck.model.counters);
            let (mut a, mut b) = (ck.rng.clone(), back.rng.clone());
            assert_eq!(a.random::<u64>(), b.random::<u64>());
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = trained(MaskVariant::Dgma).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(b"nope").is_err());
    }
}
