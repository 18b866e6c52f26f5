//! Binary spectrum cache.
//!
//! Layout (little endian): magic, format version, key (gamma, n_max, b,
//! target), dimension, state count, energies, then the vectors state by
//! state.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::{BasisSpec, Sector, SolveTarget, Spectrum};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DMAGSPEC";
pub const FORMAT_VERSION: u32 = 1;

/// Identity of a cached solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CacheKey {
    pub gamma: f64,
    pub basis: BasisSpec,
    pub target: SolveTarget,
}

impl CacheKey {
    pub fn of(s: &Spectrum) -> Self {
        Self { gamma: s.gamma, basis: s.basis, target: s.target }
    }

    /// File name derived from the exact bit patterns of the key.
    pub fn file_name(&self) -> String {
        let (tag, x, y) = target_parts(self.target);
        format!(
            "spectrum-v{FORMAT_VERSION}-{:016x}-{}-{:016x}-{tag}-{:016x}-{:016x}.bin",
            self.gamma.to_bits(),
            self.basis.n_max,
            self.basis.b.to_bits(),
            x.to_bits(),
            y.to_bits()
        )
    }
}

fn target_parts(t: SolveTarget) -> (u8, f64, f64) {
    match t {
        SolveTarget::Window { lo, hi } => (0, lo, hi),
        SolveTarget::Lowest(n) => (1, n as f64, 0.0),
    }
}

fn cache_err(msg: impl Into<String>) -> Error {
    Error::Cache(msg.into())
}

pub fn write_spectrum(path: &Path, s: &Spectrum) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(FORMAT_VERSION)?;
    write_key(&mut w, &CacheKey::of(s))?;
    let dim = s.basis.dimension();
    w.write_u64::<LE>(dim as u64)?;
    w.write_u64::<LE>(s.len() as u64)?;
    for e in &s.energies {
        w.write_f64::<LE>(*e)?;
    }
    for v in &s.vectors {
        for x in v {
            w.write_f64::<LE>(*x)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_key(w: &mut impl Write, k: &CacheKey) -> Result<()> {
    let (tag, x, y) = target_parts(k.target);
    w.write_f64::<LE>(k.gamma)?;
    w.write_u64::<LE>(k.basis.n_max as u64)?;
    w.write_f64::<LE>(k.basis.b)?;
    w.write_u8(tag)?;
    w.write_f64::<LE>(x)?;
    w.write_f64::<LE>(y)?;
    Ok(())
}

fn read_key(r: &mut impl Read) -> Result<CacheKey> {
    let gamma = r.read_f64::<LE>()?;
    let n_max = r.read_u64::<LE>()? as usize;
    let b = r.read_f64::<LE>()?;
    let tag = r.read_u8()?;
    let x = r.read_f64::<LE>()?;
    let y = r.read_f64::<LE>()?;
    let target = match tag {
        0 => SolveTarget::Window { lo: x, hi: y },
        1 => SolveTarget::Lowest(x as usize),
        t => return Err(cache_err(format!("unknown target tag {t}"))),
    };
    Ok(CacheKey { gamma, basis: BasisSpec { n_max, b, sector: Sector::EvenEven }, target })
}

pub fn read_spectrum(path: &Path) -> Result<Spectrum> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(cache_err(format!("{} is not a spectrum cache", path.display())));
    }
    let version = r.read_u32::<LE>()?;
    if version != FORMAT_VERSION {
        return Err(cache_err(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let key = read_key(&mut r)?;
    key.basis.validate()?;
    let dim = r.read_u64::<LE>()? as usize;
    if dim != key.basis.dimension() {
        return Err(cache_err(format!("dimension {dim} does not match basis ({})", key.basis.dimension())));
    }
    let count = r.read_u64::<LE>()? as usize;
    if count > dim {
        return Err(cache_err(format!("{count} states exceed dimension {dim}")));
    }
    let mut energies = vec![0.0; count];
    r.read_f64_into::<LE>(&mut energies)?;
    let mut vectors = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v = vec![0.0; dim];
        r.read_f64_into::<LE>(&mut v)?;
        vectors.push(v);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(cache_err(format!("{} trailing bytes", rest.len())));
    }
    Ok(Spectrum { gamma: key.gamma, basis: key.basis, target: key.target, energies, vectors })
}

/// Load `path` if it exists and its key matches; `None` on a miss.
pub fn load_matching(path: &Path, key: &CacheKey) -> Result<Option<Spectrum>> {
    if !path.exists() {
        return Ok(None);
    }
    let s = read_spectrum(path)?;
    Ok((CacheKey::of(&s) == *key).then_some(s))
}
