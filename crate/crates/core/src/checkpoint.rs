//! Binary layer checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! | field | type |
//! |---|---|
//! | magic `MOELORA1` | 8 bytes |
//! | version (= 1) | u32 |
//! | m, n, N, k, r | u64 × 5 |
//! | alpha | f64 |
//! | mode (0 standard, 1 sqrt-detach) | u8 |
//! | W | m·n f64, row-major |
//! | router | N·n f64, row-major |
//! | per expert: B then A | m·r + r·n f64, row-major |

use std::path::Path;

use crate::error::{Error, Result};
use crate::layer::{ForwardMode, LayerShape, LoraExpert, MoeLoraLayer};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"MOELORA1";
pub const VERSION: u32 = 1;

pub fn to_bytes(layer: &MoeLoraLayer) -> Vec<u8> {
    let sh = layer.shape();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in [sh.m, sh.n, sh.num_experts, sh.top_k, sh.rank] {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&sh.alpha.to_le_bytes());
    out.push(match layer.mode {
        ForwardMode::Standard => 0,
        ForwardMode::SqrtDetach => 1,
    });
    let mut put = |m: &Matrix| {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    put(layer.base());
    put(&layer.router);
    for e in &layer.experts {
        put(&e.b);
        put(&e.a);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn dim(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&d| d <= 1 << 24)
            .ok_or_else(|| Error::Checkpoint(format!("implausible dimension {v}")))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint("dimension overflow".into()))?;
        let data = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Matrix::from_vec(rows, cols, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<MoeLoraLayer> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let (m, n, num_experts, top_k, rank) = (r.dim()?, r.dim()?, r.dim()?, r.dim()?, r.dim()?);
    let alpha = r.f64()?;
    let shape = LayerShape::new(m, n, num_experts, top_k, rank, alpha)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mode = match r.take(1)?[0] {
        0 => ForwardMode::Standard,
        1 => ForwardMode::SqrtDetach,
        b => return Err(Error::Checkpoint(format!("bad mode byte {b}"))),
    };
    let base = r.matrix(m, n)?;
    let router = r.matrix(num_experts, n)?;
    let experts = (0..num_experts)
        .map(|_| {
            Ok(LoraExpert {
                b: r.matrix(m, rank)?,
                a: r.matrix(rank, n)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    MoeLoraLayer::from_parts(shape, base, experts, router, mode)
}

pub fn save(layer: &MoeLoraLayer, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(layer))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<MoeLoraLayer> {
    from_bytes(&std::fs::read(path)?)
}
