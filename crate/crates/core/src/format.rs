//! Little-endian binary containers for dictionaries (`QDFD`), spline
//! coefficient caches (`QDFC`) and voxel signal batches (`QDFS`).
//!
//! Dictionary and cache files share one layout:
//!
//! ```text
//! magic [4]  version u32  P u16  M u32  L u32  (QDFC only: order u8)
//! per axis: name_len u8, name, spacing u8, min f64, max f64, K u32
//! model hash [32]
//! payload
//! CRC32 of everything above
//! ```
//!
//! Dictionary payloads hold atoms as complex32 followed by f32 norms; cache
//! payloads hold the extended coefficient array as complex64 so that node
//! exactness survives a round trip. A compressed container (L > 0) appends
//! `V_L` as complex32 `[M x L]` and the singular values as f32.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;

use crate::dict::{Basis, Dictionary};
use crate::error::{Error, Result};
use crate::pgrid::{ParameterAxis, ParameterGrid, Spacing};
use crate::spline::SplineModel;

pub const DICTIONARY_MAGIC: [u8; 4] = *b"QDFD";
pub const COEFFICIENT_MAGIC: [u8; 4] = *b"QDFC";
pub const SIGNAL_MAGIC: [u8; 4] = *b"QDFS";
pub const FORMAT_VERSION: u32 = 1;

struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    fn new(magic: [u8; 4]) -> Self {
        Self { buf: magic.to_vec() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f64) {
        self.buf.extend_from_slice(&(v as f32).to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn c32(&mut self, v: Complex64) {
        self.f32(v.re);
        self.f32(v.im);
    }

    fn c64(&mut self, v: Complex64) {
        self.f64(v.re);
        self.f64(v.im);
    }

    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    fn count(&mut self, v: usize, what: &str) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Unsupported(format!("{what} {v} exceeds u32")))?;
        self.u32(v);
        Ok(())
    }

    fn axes(&mut self, grid: &ParameterGrid) -> Result<()> {
        for a in grid.axes() {
            let name = a.name().as_bytes();
            let len = u8::try_from(name.len())
                .map_err(|_| Error::Unsupported(format!("axis name '{}' too long", a.name())))?;
            self.u8(len);
            self.bytes(name);
            self.u8(a.spacing().code());
            self.f64(a.min());
            self.f64(a.max());
            self.count(a.count(), "axis length")?;
        }
        Ok(())
    }

    fn basis(&mut self, basis: &Basis) {
        for &v in basis.vectors() {
            self.c32(v);
        }
        for &s in basis.singular_values() {
            self.f32(s);
        }
    }

    fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    fn new(buf: &'a [u8], magic: [u8; 4]) -> Result<Self> {
        let found: [u8; 4] = buf.get(..4).ok_or(Error::TruncatedFile)?.try_into().unwrap();
        if found != magic {
            return Err(Error::BadMagic { expected: magic, found });
        }
        Ok(Self { buf, pos: 4 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::TruncatedFile)?;
        let out = self.buf.get(self.pos..end).ok_or(Error::TruncatedFile)?;
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn c32(&mut self) -> Result<Complex64> {
        Ok(Complex64::new(self.f32()?, self.f32()?))
    }

    fn c64(&mut self) -> Result<Complex64> {
        Ok(Complex64::new(self.f64()?, self.f64()?))
    }

    /// Fails early when fewer than `n` bytes remain, before allocating.
    fn require(&self, n: usize) -> Result<()> {
        if self.buf.len().saturating_sub(self.pos) < n {
            return Err(Error::TruncatedFile);
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::VersionMismatch(v));
        }
        Ok(())
    }

    fn axes(&mut self, p: usize) -> Result<ParameterGrid> {
        let axes = (0..p)
            .map(|_| {
                let len = self.u8()? as usize;
                let name = std::str::from_utf8(self.take(len)?)
                    .map_err(|e| Error::Parse(format!("axis name: {e}")))?
                    .to_string();
                let spacing = Spacing::from_code(self.u8()?)?;
                let min = self.f64()?;
                let max = self.f64()?;
                let k = self.u32()? as usize;
                ParameterAxis::new(name, spacing, min, max, k)
            })
            .collect::<Result<Vec<_>>>()?;
        ParameterGrid::new(axes)
    }

    fn hash(&mut self) -> Result<[u8; 32]> {
        Ok(self.take(32)?.try_into().unwrap())
    }

    fn basis(&mut self, m: usize, l: usize) -> Result<Option<Basis>> {
        if l == 0 {
            return Ok(None);
        }
        self.require(m * l * 8 + l * 4)?;
        let vectors = (0..m * l).map(|_| self.c32()).collect::<Result<Vec<_>>>()?;
        let sigma = (0..l).map(|_| self.f32()).collect::<Result<Vec<_>>>()?;
        Basis::new(m, vectors, sigma, None).map(Some)
    }

    fn finish(mut self) -> Result<()> {
        let body = self.pos;
        let stored = self.u32()?;
        let computed = crc32fast::hash(&self.buf[..body]);
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }
        if self.pos != self.buf.len() {
            return Err(Error::Parse(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn dims_header(enc: &mut Encoder, grid: &ParameterGrid, m: usize, l: usize) -> Result<()> {
    enc.u32(FORMAT_VERSION);
    let p = u16::try_from(grid.dims()).map_err(|_| Error::Unsupported("too many axes".into()))?;
    enc.u16(p);
    enc.count(m, "signal length")?;
    enc.count(l, "rank")?;
    Ok(())
}

pub fn encode_dictionary(dict: &Dictionary) -> Result<Vec<u8>> {
    let mut enc = Encoder::new(DICTIONARY_MAGIC);
    let l = dict.basis().map_or(0, Basis::rank);
    dims_header(&mut enc, dict.grid(), dict.signal_length(), l)?;
    enc.axes(dict.grid())?;
    enc.bytes(dict.model_hash());
    for &a in dict.atoms() {
        enc.c32(a);
    }
    for &n in dict.norms() {
        enc.f32(n);
    }
    if let Some(b) = dict.basis() {
        enc.basis(b);
    }
    Ok(enc.finish())
}

pub fn decode_dictionary(buf: &[u8]) -> Result<Dictionary> {
    let mut dec = Decoder::new(buf, DICTIONARY_MAGIC)?;
    dec.version()?;
    let p = dec.u16()? as usize;
    let m = dec.u32()? as usize;
    let l = dec.u32()? as usize;
    let grid = dec.axes(p)?;
    let hash = dec.hash()?;
    let channels = if l > 0 { l } else { m };
    let n = grid.atom_count();
    dec.require(n * channels * 8 + n * 4)?;
    let atoms = (0..n * channels).map(|_| dec.c32()).collect::<Result<Vec<_>>>()?;
    let norms = (0..n).map(|_| dec.f32()).collect::<Result<Vec<_>>>()?;
    let basis = dec.basis(m, l)?;
    dec.finish()?;
    Dictionary::with_norms(grid, channels, atoms, norms, hash, basis)
}

pub fn write_dictionary<W: Write>(dict: &Dictionary, mut w: W) -> Result<()> {
    w.write_all(&encode_dictionary(dict)?)?;
    Ok(())
}

pub fn read_dictionary<R: Read>(mut r: R) -> Result<Dictionary> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode_dictionary(&buf)
}

pub fn save_dictionary(dict: &Dictionary, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dictionary(dict, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dictionary(path: impl AsRef<Path>) -> Result<Dictionary> {
    read_dictionary(BufReader::new(File::open(path)?))
}

/// A prefiltered spline with the basis its channels live in.
#[derive(Debug, Clone)]
pub struct CoefficientCache {
    pub spline: SplineModel,
    pub basis: Option<Basis>,
    pub model_hash: [u8; 32],
}

pub fn encode_coefficients(cache: &CoefficientCache) -> Result<Vec<u8>> {
    let spline = &cache.spline;
    let mut enc = Encoder::new(COEFFICIENT_MAGIC);
    let l = cache.basis.as_ref().map_or(0, Basis::rank);
    let m = cache.basis.as_ref().map_or(spline.channels(), Basis::signal_length);
    if l > 0 && l != spline.channels() {
        return Err(Error::DimensionMismatch {
            expected: l,
            got: spline.channels(),
        });
    }
    dims_header(&mut enc, spline.grid(), m, l)?;
    enc.u8(spline.order() as u8);
    enc.axes(spline.grid())?;
    enc.bytes(&cache.model_hash);
    for &c in spline.coefficients() {
        enc.c64(c);
    }
    if let Some(b) = &cache.basis {
        enc.basis(b);
    }
    Ok(enc.finish())
}

pub fn decode_coefficients(buf: &[u8]) -> Result<CoefficientCache> {
    let mut dec = Decoder::new(buf, COEFFICIENT_MAGIC)?;
    dec.version()?;
    let p = dec.u16()? as usize;
    let m = dec.u32()? as usize;
    let l = dec.u32()? as usize;
    let order = dec.u8()? as usize;
    let grid = dec.axes(p)?;
    let model_hash = dec.hash()?;
    let channels = if l > 0 { l } else { m };
    let ext = crate::spline::extension_for(order);
    let n: usize = grid.counts().iter().map(|k| k + 2 * ext).product::<usize>() * channels;
    dec.require(n * 16)?;
    let coefficients = (0..n).map(|_| dec.c64()).collect::<Result<Vec<_>>>()?;
    let basis = dec.basis(m, l)?;
    dec.finish()?;
    let spline = SplineModel::from_coefficients(coefficients, channels, &grid, order)?;
    Ok(CoefficientCache {
        spline,
        basis,
        model_hash,
    })
}

pub fn save_coefficients(cache: &CoefficientCache, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_coefficients(cache)?)?;
    Ok(())
}

pub fn load_coefficients(path: impl AsRef<Path>) -> Result<CoefficientCache> {
    decode_coefficients(&std::fs::read(path)?)
}

/// Voxel signals, `count x len` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalBatch {
    pub len: usize,
    pub signals: Vec<Complex64>,
}

impl SignalBatch {
    pub fn new(len: usize, signals: Vec<Complex64>) -> Result<Self> {
        if len == 0 || !signals.len().is_multiple_of(len) {
            return Err(Error::DimensionMismatch {
                expected: len,
                got: signals.len(),
            });
        }
        Ok(Self { len, signals })
    }

    pub fn count(&self) -> usize {
        self.signals.len() / self.len
    }

    pub fn signal(&self, i: usize) -> &[Complex64] {
        &self.signals[i * self.len..(i + 1) * self.len]
    }
}

/// `QDFS`, length u32, count u32, complex32 payload.
pub fn encode_signals(batch: &SignalBatch) -> Result<Vec<u8>> {
    let mut enc = Encoder::new(SIGNAL_MAGIC);
    enc.count(batch.len, "signal length")?;
    enc.count(batch.count(), "voxel count")?;
    for &s in &batch.signals {
        enc.c32(s);
    }
    Ok(enc.buf)
}

pub fn decode_signals(buf: &[u8]) -> Result<SignalBatch> {
    let mut dec = Decoder::new(buf, SIGNAL_MAGIC)?;
    let len = dec.u32()? as usize;
    let count = dec.u32()? as usize;
    dec.require(len * count * 8)?;
    let signals = (0..len * count).map(|_| dec.c32()).collect::<Result<Vec<_>>>()?;
    if dec.pos != buf.len() {
        return Err(Error::Parse(format!("{} trailing bytes", buf.len() - dec.pos)));
    }
    SignalBatch::new(len, signals)
}

pub fn save_signals(batch: &SignalBatch, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_signals(batch)?)?;
    Ok(())
}

pub fn load_signals(path: impl AsRef<Path>) -> Result<SignalBatch> {
    decode_signals(&std::fs::read(path)?)
}
