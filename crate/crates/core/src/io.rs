//! Binary serialization for patches, encoder weights, generator weights,
//! and bags. All formats are magic + version headers followed by
//! little-endian 32-bit floats; every weight tensor is stored at 32-bit
//! precision and round-trips bit-exactly because in-memory weights are
//! kept f32-representable.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::histaug::{GeneratorConfig, GeneratorModel};
use crate::patchlab::{Patch, ALL_KINDS};
use crate::tensorcore::{Param, Tensor};
use crate::toyencoder::{Embedding, EncoderWeights, EMBED_DIM, HIDDEN_DIM, INPUT_DIM};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic at offset {offset}: expected {expected:?}, found {found:?}")]
    BadMagic { offset: usize, expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {found} at offset {offset} (expected {expected})")]
    BadVersion { offset: usize, found: u32, expected: u32 },
    #[error("truncated file: needed {needed} bytes at offset {offset}, have {have}")]
    Truncated { offset: usize, needed: usize, have: usize },
    #[error("malformed field at offset {offset}: {msg}")]
    Malformed { offset: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.pos + n > self.buf.len() {
            return Err(FormatError::Truncated { offset: self.pos, needed: n, have: self.buf.len() - self.pos });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<(), FormatError> {
        let offset = self.pos;
        let got = self.take(4)?;
        let found = [got[0], got[1], got[2], got[3]];
        if found != expected {
            return Err(FormatError::BadMagic { offset, expected, found });
        }
        Ok(())
    }

    fn version(&mut self) -> Result<(), FormatError> {
        let offset = self.pos;
        let found = self.u32()?;
        if found != FORMAT_VERSION {
            return Err(FormatError::BadVersion { offset, found, expected: FORMAT_VERSION });
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        let bytes = self.take(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn string(&mut self) -> Result<String, FormatError> {
        let offset = self.pos;
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| FormatError::Malformed { offset, msg: "name is not valid UTF-8".into() })
    }

    fn done(&self) -> Result<(), FormatError> {
        if self.pos != self.buf.len() {
            return Err(FormatError::Malformed {
                offset: self.pos,
                msg: format!("{} trailing bytes", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: [u8; 4]) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(&magic);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        Writer { buf }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32_vec(&mut self, data: &[f64]) {
        for &v in data {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn finish(self, path: &Path) -> Result<(), FormatError> {
        fs::write(path, self.buf)?;
        Ok(())
    }
}

// ---- LAPX: patches -----------------------------------------------------

pub fn save_patch(path: &Path, p: &Patch) -> Result<(), FormatError> {
    let mut w = Writer::new(*b"LAPX");
    w.u32(p.height as u32);
    w.u32(p.width as u32);
    w.f32_vec(&p.pixels);
    w.finish(path)
}

pub fn load_patch(path: &Path) -> Result<Patch, FormatError> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf);
    r.magic(*b"LAPX")?;
    r.version()?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let pixels = r.f32_vec(h * w * 3)?;
    r.done()?;
    Ok(Patch::new(h, w, pixels))
}

// ---- LENC: encoder weights ---------------------------------------------

pub fn save_encoder(path: &Path, e: &EncoderWeights) -> Result<(), FormatError> {
    let mut w = Writer::new(*b"LENC");
    w.u64(e.seed);
    w.u32(INPUT_DIM as u32);
    w.u32(HIDDEN_DIM as u32);
    w.u32(EMBED_DIM as u32);
    w.f32_vec(&e.w1);
    w.f32_vec(&e.b1);
    w.f32_vec(&e.w2);
    w.f32_vec(&e.b2);
    w.finish(path)
}

pub fn load_encoder(path: &Path) -> Result<EncoderWeights, FormatError> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf);
    r.magic(*b"LENC")?;
    r.version()?;
    let seed = r.u64()?;
    let dims_offset = r.pos;
    let (input, hidden, embed) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    if (input, hidden, embed) != (INPUT_DIM, HIDDEN_DIM, EMBED_DIM) {
        return Err(FormatError::Malformed {
            offset: dims_offset,
            msg: format!("unexpected layer shapes {input}x{hidden}x{embed}"),
        });
    }
    let w1 = r.f32_vec(input * hidden)?;
    let b1 = r.f32_vec(hidden)?;
    let w2 = r.f32_vec(hidden * embed)?;
    let b2 = r.f32_vec(embed)?;
    r.done()?;
    Ok(EncoderWeights { seed, w1, b1, w2, b2 })
}

// ---- HAUG: generator weights -------------------------------------------

pub fn save_generator(path: &Path, m: &GeneratorModel) -> Result<(), FormatError> {
    let mut w = Writer::new(*b"HAUG");
    let cfg = &m.config;
    w.u32(cfg.d as u32);
    w.u32(cfg.chunks as u32);
    w.u32(cfg.blocks as u32);
    w.u32(cfg.heads as u32);
    w.u32(cfg.k_max as u32);
    w.u32(cfg.ffn_mult as u32);
    w.f64(cfg.lambda_id);
    w.u32(ALL_KINDS.len() as u32);
    for kind in ALL_KINDS {
        w.string(kind.name());
        w.u32(kind.param_dim() as u32);
    }
    w.u32(m.params.len() as u32);
    for p in &m.params {
        w.string(&p.name);
        w.u32(p.value.shape.len() as u32);
        for &d in &p.value.shape {
            w.u32(d as u32);
        }
        w.f32_vec(&p.value.data);
    }
    w.finish(path)
}

pub fn load_generator(path: &Path) -> Result<GeneratorModel, FormatError> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf);
    r.magic(*b"HAUG")?;
    r.version()?;
    let cfg = GeneratorConfig {
        d: r.u32()? as usize,
        chunks: r.u32()? as usize,
        blocks: r.u32()? as usize,
        heads: r.u32()? as usize,
        k_max: r.u32()? as usize,
        ffn_mult: r.u32()? as usize,
        lambda_id: r.f64()?,
    };
    let table_offset = r.pos;
    let n_kinds = r.u32()? as usize;
    if n_kinds != ALL_KINDS.len() {
        return Err(FormatError::Malformed {
            offset: table_offset,
            msg: format!("transform table has {n_kinds} entries, expected {}", ALL_KINDS.len()),
        });
    }
    for kind in ALL_KINDS {
        let entry_offset = r.pos;
        let name = r.string()?;
        let pd = r.u32()? as usize;
        if name != kind.name() || pd != kind.param_dim() {
            return Err(FormatError::Malformed {
                offset: entry_offset,
                msg: format!("transform table entry {name}/{pd} does not match {}/{}", kind.name(), kind.param_dim()),
            });
        }
    }
    let n_params = r.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let data = r.f32_vec(shape.iter().product())?;
        params.push(Param::new(name, Tensor::new(shape, data)));
    }
    r.done()?;
    GeneratorModel::from_parts(cfg, params)
        .map_err(|e| FormatError::Malformed { offset: 8, msg: e.to_string() })
}

// ---- LBAG: bags of embeddings ------------------------------------------

/// The serialized face of a bag: its label and instance embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct BagRecord {
    pub label: u8,
    pub embeddings: Vec<Embedding>,
}

pub fn save_bag(path: &Path, bag: &BagRecord) -> Result<(), FormatError> {
    let d = bag.embeddings.first().map(|e| e.dim()).unwrap_or(0);
    let mut w = Writer::new(*b"LBAG");
    w.u32(bag.embeddings.len() as u32);
    w.u32(d as u32);
    w.u8(bag.label);
    for e in &bag.embeddings {
        w.f32_vec(&e.values);
    }
    w.finish(path)
}

pub fn load_bag(path: &Path) -> Result<BagRecord, FormatError> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf);
    r.magic(*b"LBAG")?;
    r.version()?;
    let m = r.u32()? as usize;
    let d = r.u32()? as usize;
    let label = r.u8()?;
    let mut embeddings = Vec::with_capacity(m);
    for _ in 0..m {
        embeddings.push(Embedding::new(r.f32_vec(d)?));
    }
    r.done()?;
    Ok(BagRecord { label, embeddings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::histaug;
    use crate::patchlab::{synth_patch, TransformKind, TransformParam, TransformSequence, TransformStep};
    use tempfile::tempdir;

    #[test]
    fn patch_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.lapx");
        let p = synth_patch(3, 1, 32);
        save_patch(&path, &p).unwrap();
        let q = load_patch(&path).unwrap();
        // Pixels are quantized to f32 on write; writing the loaded patch
        // again must reproduce the file byte for byte.
        let path2 = dir.path().join("p2.lapx");
        save_patch(&path2, &q).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        assert_eq!((q.height, q.width), (p.height, p.width));
        assert!(p.pixels.iter().zip(&q.pixels).all(|(a, b)| (*a as f32) as f64 == *b));
    }

    #[test]
    fn encoder_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("e.lenc");
        let e = EncoderWeights::seeded(42);
        save_encoder(&path, &e).unwrap();
        let f = load_encoder(&path).unwrap();
        assert_eq!(e, f);
    }

    #[test]
    fn generator_round_trip_preserves_weights_and_inference() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("g.haug");
        let cfg = histaug::GeneratorConfig { d: 8, chunks: 2, blocks: 1, heads: 2, k_max: 2, ffn_mult: 2, lambda_id: 0.5 };
        let m = GeneratorModel::init(cfg, 13).unwrap();
        save_generator(&path, &m).unwrap();
        let n = load_generator(&path).unwrap();
        assert_eq!(m, n);
        let z = Embedding::new((0..8).map(|i| (i as f64) * 0.2 - 0.7).collect());
        let seq = TransformSequence::new(vec![TransformStep::new(
            TransformKind::Brightness,
            TransformParam::Scalar(1.2),
        )])
        .unwrap();
        assert_eq!(m.forward(&z, &seq).unwrap().values, n.forward(&z, &seq).unwrap().values);
    }

    #[test]
    fn bag_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("b.lbag");
        let bag = BagRecord {
            label: 1,
            embeddings: (0..5)
                .map(|r| Embedding::new((0..4).map(|i| ((r * 4 + i) as f64 * 0.37) as f32 as f64).collect()))
                .collect(),
        };
        save_bag(&path, &bag).unwrap();
        assert_eq!(load_bag(&path).unwrap(), bag);
    }

    #[test]
    fn bad_magic_and_version_name_their_offset() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.lapx");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        match load_patch(&path) {
            Err(FormatError::BadMagic { offset: 0, .. }) => {}
            other => panic!("expected bad magic at offset 0, got {other:?}"),
        }
        std::fs::write(&path, b"LAPX\x63\x00\x00\x00").unwrap();
        match load_patch(&path) {
            Err(FormatError::BadVersion { offset: 4, found: 99, .. }) => {}
            other => panic!("expected bad version at offset 4, got {other:?}"),
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.lapx");
        let p = synth_patch(1, 0, 32);
        save_patch(&path, &p).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 10]).unwrap();
        match load_patch(&path) {
            Err(FormatError::Truncated { offset: 16, .. }) => {}
            other => panic!("expected truncation error at pixel block, got {other:?}"),
        }
    }

    #[test]
    fn wrong_magic_across_formats_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("e.lenc");
        save_encoder(&path, &EncoderWeights::seeded(1)).unwrap();
        assert!(matches!(load_patch(&path), Err(FormatError::BadMagic { offset: 0, .. })));
    }
}
