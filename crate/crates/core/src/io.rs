//! On-disk formats, all little-endian.
//!
//! Volumes (`LGV1`): magic, a dtype tag byte (0 = f32, 1 = u8), `C, S, H, W`
//! as u32, then row-major voxels.
//!
//! Checkpoints (`LGCK`): magic, u32 entry count, then a manifest of
//! `(u32 name length, UTF-8 name, u32 rank, rank × u32 extents)`, then every
//! payload as f32 in manifest order.

use std::io::Write;
use std::path::Path;

use crate::autograd::{ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::{LabelVolume, Real, Tensor};

pub const LGV1_MAGIC: &[u8; 4] = b"LGV1";
pub const LGCK_MAGIC: &[u8; 4] = b"LGCK";

#[derive(Clone, Debug, PartialEq)]
pub enum Volume {
    /// `(1, C, S, H, W)` intensities.
    F32(Tensor<f32>),
    /// `(1, S, H, W)` class ids; stored with `C = 1`.
    U8(LabelVolume),
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn magic(&mut self, want: &[u8; 4], what: &str) -> Result<()> {
        if self.bytes.len() < 4 || &self.bytes[..4] != want {
            return Err(Error::Format(format!("bad magic: not an {what} file")));
        }
        self.pos = 4;
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn encode_volume(v: &Volume) -> Result<Vec<u8>> {
    let mut buf = LGV1_MAGIC.to_vec();
    match v {
        Volume::F32(t) => {
            let [b, c, s, h, w] = t.shape();
            if b != 1 {
                return Err(Error::shape(format!("volume files hold one item, got batch {b}")));
            }
            buf.push(0);
            for e in [c, s, h, w] {
                put_u32(&mut buf, e)?;
            }
            for x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        Volume::U8(l) => {
            let [b, s, h, w] = l.shape;
            if b != 1 {
                return Err(Error::shape(format!("volume files hold one item, got batch {b}")));
            }
            buf.push(1);
            for e in [1, s, h, w] {
                put_u32(&mut buf, e)?;
            }
            for &x in &l.data {
                buf.push(u8::try_from(x).map_err(|_| Error::Format(format!("label {x} does not fit in u8")))?);
            }
        }
    }
    Ok(buf)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(LGV1_MAGIC, "LGV1 volume")?;
    let tag = r.take(1)?[0];
    let [c, s, h, w] = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
    let n = c * s * h * w;
    let v = match tag {
        0 => {
            let raw = r.take(n * 4)?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
            Volume::F32(Tensor::from_vec([1, c, s, h, w], data)?)
        }
        1 => {
            if c != 1 {
                return Err(Error::Format(format!("label volume with {c} channels")));
            }
            let data = r.take(n)?.iter().map(|&b| b as u32).collect();
            Volume::U8(LabelVolume::new([1, s, h, w], data)?)
        }
        t => return Err(Error::Format(format!("unknown dtype tag {t}"))),
    };
    r.finish()?;
    Ok(v)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_volume(path: &Path, v: &Volume) -> Result<()> {
    write_file(path, &encode_volume(v)?)
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    decode_volume(&read_file(path)?)
}

pub fn load_intensity(path: &Path) -> Result<Tensor<f32>> {
    match load_volume(path)? {
        Volume::F32(t) => Ok(t),
        Volume::U8(_) => Err(Error::Format(format!("{} holds labels, expected intensities", path.display()))),
    }
}

pub fn load_label_volume(path: &Path) -> Result<LabelVolume> {
    match load_volume(path)? {
        Volume::U8(l) => Ok(l),
        Volume::F32(_) => Err(Error::Format(format!("{} holds intensities, expected labels", path.display()))),
    }
}

/// Named f32 tensors in manifest order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor<f32>)>,
}

const OPT_M: &str = "optim.m/";
const OPT_V: &str = "optim.v/";
const OPT_STEP: &str = "optim.step";

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Every store entry (buffers included), plus optimizer moments when given.
    pub fn from_store(store: &ParamStore<f32>, optimizer: Option<&AdamW<f32>>) -> Self {
        let mut entries: Vec<_> = store.entries().iter().map(|e| (e.name.clone(), e.value.clone())).collect();
        if let Some(opt) = optimizer {
            for (i, e) in store.entries().iter().enumerate() {
                if e.kind == ParamKind::Trainable {
                    entries.push((format!("{OPT_M}{}", e.name), opt.m[i].clone()));
                    entries.push((format!("{OPT_V}{}", e.name), opt.v[i].clone()));
                }
            }
            // u64 step split into two exactly representable 24-bit halves
            let (hi, lo) = ((opt.step >> 24) as f32, (opt.step & 0xff_ffff) as f32);
            entries.push((OPT_STEP.to_string(), Tensor::from_vec([1, 1, 1, 1, 2], vec![hi, lo]).expect("2 values")));
        }
        Checkpoint { entries }
    }

    /// Load model entries into `store`; names missing from the checkpoint that
    /// are not matched by `allow_missing` are an error.
    pub fn restore_store(&self, store: &mut ParamStore<f32>, allow_missing: impl Fn(&str) -> bool) -> Result<Vec<String>> {
        let mut src = ParamStore::new();
        for (n, t) in &self.entries {
            if !n.starts_with("optim.") {
                src.add(n.clone(), t.clone(), ParamKind::Buffer)?;
            }
        }
        let missing = store.load_from(&src);
        let fatal: Vec<String> = missing.iter().filter(|n| !allow_missing(n)).cloned().collect();
        if !fatal.is_empty() {
            return Err(Error::MissingParameters { missing: fatal });
        }
        Ok(missing)
    }

    /// Optimizer state for `store`, if the checkpoint carries one.
    pub fn restore_optimizer(&self, store: &ParamStore<f32>, config: AdamWConfig) -> Result<Option<AdamW<f32>>> {
        let Some(step) = self.get(OPT_STEP) else {
            return Ok(None);
        };
        let mut opt = AdamW::new(store, config);
        opt.step = ((step.data()[0] as u64) << 24) | step.data()[1] as u64;
        let mut missing = Vec::new();
        for (i, e) in store.entries().iter().enumerate() {
            if e.kind != ParamKind::Trainable {
                continue;
            }
            match (self.get(&format!("{OPT_M}{}", e.name)), self.get(&format!("{OPT_V}{}", e.name))) {
                (Some(m), Some(v)) if m.shape() == e.value.shape() && v.shape() == e.value.shape() => {
                    opt.m[i] = m.clone();
                    opt.v[i] = v.clone();
                }
                _ => missing.push(format!("{OPT_M}{}", e.name)),
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingParameters { missing });
        }
        Ok(Some(opt))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut buf = LGCK_MAGIC.to_vec();
        put_u32(&mut buf, self.entries.len())?;
        for (name, t) in &self.entries {
            put_u32(&mut buf, name.len())?;
            buf.extend_from_slice(name.as_bytes());
            put_u32(&mut buf, 5)?;
            for e in t.shape() {
                put_u32(&mut buf, e)?;
            }
        }
        for (_, t) in &self.entries {
            for x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        r.magic(LGCK_MAGIC, "LGCK checkpoint")?;
        let n = r.u32()?;
        let mut manifest = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = r.u32()?;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()?;
            if rank != 5 {
                return Err(Error::Format(format!("`{name}` has rank {rank}, expected 5")));
            }
            let shape = [r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?];
            manifest.push((name, shape));
        }
        let mut entries = Vec::with_capacity(manifest.len());
        for (name, shape) in manifest {
            let count = shape.iter().product::<usize>();
            let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::Format("payload size overflow".into()))?)?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
            entries.push((name, Tensor::from_vec(shape, data)?));
        }
        r.finish()?;
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}

/// Scale `[a_min, a_max]` linearly to `[0, 1]`, clipping outside.
pub fn scale_intensity<T: Real>(x: &Tensor<T>, a_min: f64, a_max: f64) -> Tensor<T> {
    let (lo, span) = (T::lit(a_min), T::lit(a_max - a_min));
    x.map(|v| ((v - lo) / span).max(T::zero()).min(T::one()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_roundtrip_both_dtypes() {
        let t = Tensor::<f32>::from_fn([1, 2, 2, 3, 1], |i| i as f32 * 0.25 - 1.0);
        let bytes = encode_volume(&Volume::F32(t.clone())).unwrap();
        assert_eq!(bytes.len(), 4 + 1 + 16 + 12 * 4);
        assert_eq!(decode_volume(&bytes).unwrap(), Volume::F32(t));
        let l = LabelVolume::new([1, 2, 1, 2], vec![0, 1, 2, 1]).unwrap();
        assert_eq!(decode_volume(&encode_volume(&Volume::U8(l.clone())).unwrap()).unwrap(), Volume::U8(l));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let err = decode_volume(b"NOPE0000000000000000").unwrap_err();
        assert!(err.to_string().contains("bad magic"));
        let l = LabelVolume::new([1, 1, 1, 2], vec![0, 1]).unwrap();
        let bytes = encode_volume(&Volume::U8(l)).unwrap();
        assert!(matches!(decode_volume(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    }

    #[test]
    fn scaling_clips_to_unit_interval() {
        let t = Tensor::<f64>::from_vec([1, 1, 1, 1, 4], vec![-2000.0, -1000.0, 0.0, 1500.0]).unwrap();
        assert_eq!(scale_intensity(&t, -1000.0, 1000.0).data(), &[0.0, 0.0, 0.5, 1.0]);
    }
}
