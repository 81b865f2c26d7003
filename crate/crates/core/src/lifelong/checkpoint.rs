use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::modset::{LayerModulator, ModulatorSet};
use crate::error::{LfsError, Result};
use crate::left::{param_count, ActivationKind, ConvShape, LayerSpec, LeftConvModulator, LeftFcModulator};

pub const MAGIC: &[u8; 4] = b"LEFT";
pub const FORMAT_VERSION: u32 = 1;

const KIND_CONV: u8 = 0;
const KIND_FC: u8 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| LfsError::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn header_len(set: &ModulatorSet<f32>) -> usize {
    let mut n = 4 + 4 + 4 + set.task_id.len() + 4 + 1 + 1 + 4;
    for (name, m) in &set.layers {
        n += 4 + name.len() + 1;
        n += match m {
            LayerModulator::Conv(_) => 12,
            LayerModulator::Fc(_) => 8,
        };
    }
    n
}

/// Exact encoded size: metadata plus four bytes per factor scalar.
pub fn predicted_size(set: &ModulatorSet<f32>) -> usize {
    header_len(set) + 4 * set.param_count()
}

pub fn encode(set: &ModulatorSet<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(predicted_size(set));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_str(&mut out, &set.task_id)?;
    put_u32(&mut out, set.rank)?;
    out.push(u8::from(set.with_bias));
    out.push(set.act.id());
    put_u32(&mut out, set.layers.len())?;
    for (name, m) in &set.layers {
        put_str(&mut out, name)?;
        match m.spec() {
            LayerSpec::Conv(s) => {
                out.push(KIND_CONV);
                for d in [s.c_out, s.c_in, s.k] {
                    put_u32(&mut out, d)?;
                }
            }
            LayerSpec::Fc { d_out, d_in } => {
                out.push(KIND_FC);
                put_u32(&mut out, d_out)?;
                put_u32(&mut out, d_in)?;
            }
        }
        for buf in m.buffers() {
            for v in buf {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            LfsError::Format(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| LfsError::Format("invalid UTF-8 string".into()))
    }

    fn f32s(&mut self, dst: &mut [f32]) -> Result<()> {
        let b = self.take(4 * dst.len())?;
        for (d, c) in dst.iter_mut().zip(b.chunks_exact(4)) {
            *d = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
        Ok(())
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModulatorSet<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(LfsError::Format("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION as usize {
        return Err(LfsError::Format(format!("unsupported version {version}")));
    }
    let task_id = r.string()?;
    let rank = r.u32()?;
    let with_bias = match r.u8()? {
        0 => false,
        1 => true,
        v => return Err(LfsError::Format(format!("bad with_bias flag {v}"))),
    };
    let act_id = r.u8()?;
    let act = ActivationKind::from_id(act_id).ok_or_else(|| LfsError::Format(format!("unknown activation id {act_id}")))?;
    let count = r.u32()?;
    // Factor values are overwritten below; the seed only shapes the buffers.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = r.string()?;
        let kind = r.u8()?;
        let dims = match kind {
            KIND_CONV => vec![r.u32()?, r.u32()?, r.u32()?],
            KIND_FC => vec![r.u32()?, r.u32()?],
            t => return Err(LfsError::Format(format!("unknown layer kind {t}"))),
        };
        let remaining = bytes.len() - r.pos;
        if rank > remaining || dims.iter().any(|&d| d > remaining) {
            return Err(LfsError::Format(format!("layer `{name}` dims {dims:?} exceed the file size")));
        }
        let spec = match kind {
            KIND_CONV => LayerSpec::Conv(ConvShape {
                c_out: dims[0],
                c_in: dims[1],
                k: dims[2],
            }),
            _ => LayerSpec::Fc {
                d_out: dims[0],
                d_in: dims[1],
            },
        };
        if 4 * param_count(&[spec], rank, with_bias).total > remaining {
            return Err(LfsError::Format(format!("truncated factors for layer `{name}`")));
        }
        let mut m = match spec {
            LayerSpec::Conv(ConvShape { c_out, c_in, k }) => {
                let shape = ConvShape::new(c_out, c_in, k).map_err(|e| LfsError::Format(e.to_string()))?;
                LayerModulator::Conv(
                    LeftConvModulator::identity(shape, rank, with_bias, act, &mut rng)
                        .map_err(|e| LfsError::Format(e.to_string()))?,
                )
            }
            LayerSpec::Fc { d_out, d_in } => {
                LayerModulator::Fc(
                    LeftFcModulator::identity(d_out, d_in, rank, &mut rng).map_err(|e| LfsError::Format(e.to_string()))?,
                )
            }
        };
        for buf in m.buffers_mut() {
            r.f32s(buf)?;
        }
        layers.push((name, m));
    }
    if r.pos != bytes.len() {
        return Err(LfsError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(ModulatorSet {
        task_id,
        rank,
        with_bias,
        act,
        layers,
    })
}

pub fn save_modulators(set: &ModulatorSet<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode(set)?)?;
    Ok(())
}

pub fn load_modulators(path: &Path) -> Result<ModulatorSet<f32>> {
    decode(&fs::read(path)?)
}
