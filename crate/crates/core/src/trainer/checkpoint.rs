//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "RNXTCKPT" | version u32
//! model config: depth, cardinality, base_width, num_classes (u32), form (u8)
//! train config: epochs, batch_size (u32), base_lr (f64 bits),
//!               drop count u32 + drops (u32 each), drop factor, momentum,
//!               weight decay (f64 bits), seed u64, augment u8
//! next epoch u32 | norm mean[3], std[3] (f64 bits)
//! tensor count u32, then per tensor:
//!   name length u32 + utf-8 name | kind u8 | dims 4 x u32 | f32 bit patterns
//! history count u32, then per row: epoch u32 + 6 x f64 bits
//! ```
//!
//! Tensors come in parameter declaration order followed by the momentum
//! buffers of the learnable parameters.

use std::path::Path;

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::{BlockForm, ModelConfig};
use crate::tensor::{Shape, Tensor};
use crate::trainer::metrics::{write_atomic, MetricsRow};
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"RNXTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Learnable = 0,
    Buffer = 1,
    Velocity = 2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub kind: TensorKind,
    pub value: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// First epoch that has not run yet. The data-order and augmentation
    /// streams are derived from `(train.seed, epoch)`, so this together
    /// with the seed is the complete generator state.
    pub next_epoch: usize,
    pub stats: NormStats,
    pub tensors: Vec<NamedTensor>,
    pub history: Vec<MetricsRow>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_bits().to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::CorruptCheckpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(what)?))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());

        let m = &self.model;
        for v in [m.depth, m.cardinality, m.base_width, m.num_classes] {
            put_u32(&mut out, v)?;
        }
        out.push(m.block_form.code());

        let t = &self.train;
        put_u32(&mut out, t.epochs)?;
        put_u32(&mut out, t.batch_size)?;
        put_f64(&mut out, t.base_lr);
        put_u32(&mut out, t.lr_drop_epochs.len())?;
        for &d in &t.lr_drop_epochs {
            put_u32(&mut out, d)?;
        }
        for v in [t.lr_drop_factor, t.momentum, t.weight_decay] {
            put_f64(&mut out, v);
        }
        out.extend_from_slice(&t.seed.to_le_bytes());
        out.push(t.augment as u8);

        put_u32(&mut out, self.next_epoch)?;
        for v in self.stats.mean.iter().chain(&self.stats.std) {
            put_f64(&mut out, *v);
        }

        put_u32(&mut out, self.tensors.len())?;
        for nt in &self.tensors {
            put_u32(&mut out, nt.name.len())?;
            out.extend_from_slice(nt.name.as_bytes());
            out.push(nt.kind as u8);
            for d in nt.value.shape().dims() {
                put_u32(&mut out, d)?;
            }
            for x in nt.value.data() {
                out.extend_from_slice(&x.to_bits().to_le_bytes());
            }
        }

        put_u32(&mut out, self.history.len())?;
        for r in &self.history {
            put_u32(&mut out, r.epoch)?;
            for v in [r.lr, r.train_loss, r.train_acc, r.test_loss, r.test_err, r.wall_sec] {
                put_f64(&mut out, v);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::CorruptCheckpoint("missing magic header".into()));
        }
        let version = r.u32("format version")? as u32;
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }

        let depth = r.u32("depth")?;
        let cardinality = r.u32("cardinality")?;
        let base_width = r.u32("base width")?;
        let num_classes = r.u32("class count")?;
        let code = r.u8("block form")?;
        let form = BlockForm::from_code(code)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("unknown block form code {code}")))?;
        let model = ModelConfig::new(depth, cardinality, base_width, num_classes).with_form(form);

        let epochs = r.u32("epochs")?;
        let batch_size = r.u32("batch size")?;
        let base_lr = r.f64("base lr")?;
        let drops = r.u32("drop count")?;
        if drops > epochs {
            return Err(Error::CorruptCheckpoint(format!(
                "{drops} learning-rate drops for {epochs} epochs"
            )));
        }
        let lr_drop_epochs = (0..drops).map(|_| r.u32("drop epoch")).collect::<Result<_>>()?;
        let train = TrainConfig {
            epochs,
            batch_size,
            base_lr,
            lr_drop_epochs,
            lr_drop_factor: r.f64("drop factor")?,
            momentum: r.f64("momentum")?,
            weight_decay: r.f64("weight decay")?,
            seed: r.u64("seed")?,
            augment: r.u8("augment flag")? != 0,
        };

        let next_epoch = r.u32("epoch counter")?;
        let mut stats = NormStats {
            mean: [0.0; 3],
            std: [0.0; 3],
        };
        for v in stats.mean.iter_mut().chain(stats.std.iter_mut()) {
            *v = r.f64("normalization statistics")?;
        }

        let count = r.u32("tensor count")?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32("name length")?;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| Error::CorruptCheckpoint("tensor name is not utf-8".into()))?
                .to_owned();
            let kind = match r.u8("tensor kind")? {
                0 => TensorKind::Learnable,
                1 => TensorKind::Buffer,
                2 => TensorKind::Velocity,
                k => return Err(Error::CorruptCheckpoint(format!("tensor `{name}` has kind {k}"))),
            };
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = r.u32("tensor dims")?;
            }
            let shape = Shape::from(dims);
            let numel = shape.numel();
            let raw = r.take(numel.saturating_mul(4), "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            tensors.push(NamedTensor {
                name,
                kind,
                value: Tensor::from_vec(shape, data)?,
            });
        }

        let rows = r.u32("history length")?;
        let mut history = Vec::with_capacity(rows.min(1 << 16));
        for _ in 0..rows {
            history.push(MetricsRow {
                epoch: r.u32("history epoch")?,
                lr: r.f64("history")?,
                train_loss: r.f64("history")?,
                train_acc: r.f64("history")?,
                test_loss: r.f64("history")?,
                test_err: r.f64("history")?,
                wall_sec: r.f64("history")?,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} trailing bytes after the history",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            model,
            train,
            next_epoch,
            stats,
            tensors,
            history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}

/// Saves `state` at `path`; see [`Checkpoint`] for the layout.
pub fn save_checkpoint(state: &Checkpoint, path: &Path) -> Result<()> {
    state.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
