//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "IGDX" | version u16 | model kind u8 | front u8 | leaky slope f64 | fc1 width u32
//! | layer count u32 | per layer: name, kind u8, filters/kernel/stride u32 x5,
//!   weight rank u8 + dims u32, has-running u8
//! | scaler flag u8 [+ 28 min f64 + 28 max f64]
//! | parameter blob: per layer weight, bias, running mean, running var as f32
//! | CRC-32 of everything above
//! ```
//!
//! Parameters are stored as 32-bit floats. Models trained at
//! [`Precision::Standard`](crate::diffnet::Precision) hold only
//! f32-representable values, so a round trip is bit-exact; saving anything
//! else is refused rather than silently rounded.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Scaler, FEATURE_COUNT};
use crate::diffnet::{LayerKind, LayerParams, Module};
use crate::error::{Error, Result};
use crate::models::{ArchConfig, FrontKind, PgancModel, PgantModel};

pub const MAGIC: &[u8; 4] = b"IGDX";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum SavedModel {
    Pganc(PgancModel),
    Pgant(PgantModel),
}

impl SavedModel {
    pub fn kind_name(&self) -> &'static str {
        match self {
            SavedModel::Pganc(_) => "pganc",
            SavedModel::Pgant(_) => "pgant",
        }
    }

    fn code(&self) -> u8 {
        match self {
            SavedModel::Pganc(_) => 1,
            SavedModel::Pgant(_) => 2,
        }
    }

    fn arch(&self) -> ArchConfig {
        match self {
            SavedModel::Pganc(m) => m.arch(),
            SavedModel::Pgant(m) => m.arch(),
        }
    }

    fn layers(&self) -> Vec<&LayerParams> {
        match self {
            SavedModel::Pganc(m) => m.layers(),
            SavedModel::Pgant(m) => m.layers(),
        }
    }

    fn layers_mut(&mut self) -> Vec<&mut LayerParams> {
        match self {
            SavedModel::Pganc(m) => m.layers_mut(),
            SavedModel::Pgant(m) => m.layers_mut(),
        }
    }

    /// Eval-mode `[normal, icing]` probabilities.
    pub fn predict(&self, xs: &[crate::data::FeatureVector]) -> Result<Vec<[f64; 2]>> {
        match self {
            SavedModel::Pganc(m) => m.predict(xs),
            SavedModel::Pgant(m) => m.predict(xs),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: SavedModel,
    pub scaler: Option<Scaler>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        w.push(self.model.code());
        let arch = self.model.arch();
        w.push(match arch.front {
            FrontKind::Gan => 1,
            FrontKind::Plain => 2,
        });
        w.extend_from_slice(&arch.leaky_slope.to_le_bytes());
        put_u32(&mut w, arch.fc1_width)?;

        let layers = self.model.layers();
        put_u32(&mut w, layers.len())?;
        for l in &layers {
            let name = l.name.as_bytes();
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Format(format!("layer name too long: {}", l.name)))?;
            w.extend_from_slice(&len.to_le_bytes());
            w.extend_from_slice(name);
            w.push(l.kind.code());
            let h = l.hyper;
            for v in [h.filters, h.kernel.0, h.kernel.1, h.stride.0, h.stride.1] {
                put_u32(&mut w, v)?;
            }
            let shape = l.weight.shape();
            w.push(shape.len() as u8);
            for &d in shape {
                put_u32(&mut w, d)?;
            }
            w.push(u8::from(l.running.is_some()));
        }

        match &self.scaler {
            None => w.push(0),
            Some(s) => {
                w.push(1);
                for v in s.min.iter().chain(&s.max) {
                    w.extend_from_slice(&v.to_le_bytes());
                }
            }
        }

        for l in &layers {
            for (part, values) in blobs(l) {
                for &v in values {
                    let f = v as f32;
                    if f64::from(f).to_bits() != v.to_bits() {
                        return Err(Error::Format(format!(
                            "{}.{part} holds {v}, which is not representable in 32 bits",
                            l.name
                        )));
                    }
                    w.extend_from_slice(&f.to_le_bytes());
                }
            }
        }

        let crc = crc32fast::hash(&w);
        w.extend_from_slice(&crc.to_le_bytes());
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < MAGIC.len() + 2 + 4 {
            return Err(Error::Format(format!(
                "{} bytes is too short for a checkpoint",
                bytes.len()
            )));
        }
        let (payload, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }

        let mut r = Reader {
            buf: payload,
            pos: 0,
        };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version}"
            )));
        }
        let kind = r.u8()?;
        let front = match r.u8()? {
            1 => FrontKind::Gan,
            2 => FrontKind::Plain,
            c => return Err(Error::Format(format!("unknown front code {c}"))),
        };
        let arch = ArchConfig {
            front,
            leaky_slope: r.f64()?,
            fc1_width: r.u32()? as usize,
        };
        // Layers are rebuilt from the architecture and then overwritten; the
        // stored descriptors must match what the architecture produces.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = match kind {
            1 => SavedModel::Pganc(PgancModel::new(&arch, &mut rng)),
            2 => SavedModel::Pgant(PgantModel::new(&arch, &mut rng)),
            c => return Err(Error::Format(format!("unknown model kind {c}"))),
        };

        let count = r.u32()? as usize;
        let expected = model.layers().len();
        if count != expected {
            return Err(Error::Format(format!(
                "{count} layers stored, architecture has {expected}"
            )));
        }
        for l in model.layers() {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("layer name is not UTF-8".into()))?;
            let kind = LayerKind::from_code(r.u8()?);
            let mut hyper = [0usize; 5];
            for h in &mut hyper {
                *h = r.u32()? as usize;
            }
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let has_running = r.u8()? == 1;
            let h = l.hyper;
            if name != l.name
                || kind != Some(l.kind)
                || hyper != [h.filters, h.kernel.0, h.kernel.1, h.stride.0, h.stride.1]
                || shape != l.weight.shape()
                || has_running != l.running.is_some()
            {
                return Err(Error::Format(format!(
                    "layer descriptor for {name} does not match {}",
                    l.name
                )));
            }
        }

        let scaler = match r.u8()? {
            0 => None,
            1 => {
                let mut min = [0.0; FEATURE_COUNT];
                let mut max = [0.0; FEATURE_COUNT];
                for v in min.iter_mut().chain(max.iter_mut()) {
                    *v = r.f64()?;
                }
                Some(Scaler { min, max })
            }
            c => return Err(Error::Format(format!("bad scaler flag {c}"))),
        };

        for l in model.layers_mut() {
            for v in l
                .weight
                .data_mut()
                .iter_mut()
                .chain(l.bias.data_mut().iter_mut())
            {
                *v = r.f32()?;
            }
            if let Some(rs) = l.running.as_mut() {
                for v in rs.mean.iter_mut().chain(rs.var.iter_mut()) {
                    *v = r.f32()?;
                }
            }
        }
        if r.pos != payload.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                payload.len() - r.pos
            )));
        }
        Ok(Checkpoint { model, scaler })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

fn blobs(l: &LayerParams) -> Vec<(&'static str, &[f64])> {
    let mut v = vec![("weight", l.weight.data()), ("bias", l.bias.data())];
    if let Some(rs) = &l.running {
        v.push(("running_mean", &rs.mean));
        v.push(("running_var", &rs.var));
    }
    v
}

fn put_u32(w: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f64::from(f32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        )))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
