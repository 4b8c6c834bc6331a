//! Versioned little-endian binary checkpoints.
//!
//! Approximator blob:
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `SFAP` |
//! | 4 | `u32` version (1) |
//! | 1 | activation: 0 leaky rectifier, 1 tanh, 2 identity |
//! | 8 | `f64` leaky slope (0 otherwise) |
//! | 4 | `u32` number of layer widths `n` |
//! | 4n | `u32` widths |
//! | 8 | `u64` parameter count `p` |
//! | 8p | `f64` parameters |
//!
//! Bundle file: magic `SFCK`, `u32` version (1), `u64` iteration, `u32`
//! fingerprint length and its UTF-8 bytes, `u32` head count, then per head a
//! `u8` head tag followed by an approximator blob, then a `u8` flag and an
//! `f64` value for `log Z`.

use std::path::Path;

use crate::diff::{Activation, Approximator};
use crate::error::{Error, Result};
use crate::policy::{HeadKind, PolicyBundle};

const APPROX_MAGIC: &[u8; 4] = b"SFAP";
const BUNDLE_MAGIC: &[u8; 4] = b"SFCK";
const VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Checkpoint("unexpected end of data".into()));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != expected {
            return Err(Error::Checkpoint(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expected)
            )));
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        Ok(())
    }
}

pub fn write_approximator(approx: &Approximator, out: &mut Vec<u8>) {
    out.extend_from_slice(APPROX_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let (code, slope) = match approx.activation() {
        Activation::LeakyRelu(s) => (0u8, s),
        Activation::Tanh => (1, 0.0),
        Activation::Identity => (2, 0.0),
    };
    out.push(code);
    out.extend_from_slice(&slope.to_le_bytes());
    out.extend_from_slice(&(approx.widths().len() as u32).to_le_bytes());
    for &w in approx.widths() {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    out.extend_from_slice(&(approx.param_count() as u64).to_le_bytes());
    for p in approx.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
}

fn read_approx(r: &mut Reader) -> Result<Approximator> {
    r.magic(APPROX_MAGIC)?;
    let code = r.u8()?;
    let slope = r.f64()?;
    let activation = match code {
        0 => Activation::LeakyRelu(slope),
        1 => Activation::Tanh,
        2 => Activation::Identity,
        c => return Err(Error::Checkpoint(format!("unknown activation code {c}"))),
    };
    let n = r.u32()? as usize;
    let widths = (0..n)
        .map(|_| r.u32().map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let count = r.u64()? as usize;
    if count != crate::diff::param_count(&widths) {
        return Err(Error::Checkpoint(format!(
            "parameter count {count} does not match widths {widths:?}"
        )));
    }
    let params = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    Approximator::from_params(widths, activation, params)
        .map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn read_approximator(bytes: &[u8]) -> Result<Approximator> {
    let mut r = Reader { bytes };
    let a = read_approx(&mut r)?;
    if !r.bytes.is_empty() {
        return Err(Error::Checkpoint("trailing bytes after approximator".into()));
    }
    Ok(a)
}

/// A bundle snapshot tied to the environment it was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub fingerprint: String,
    pub bundle: PolicyBundle,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BUNDLE_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&(self.fingerprint.len() as u32).to_le_bytes());
        out.extend_from_slice(self.fingerprint.as_bytes());
        let heads: Vec<(HeadKind, &Approximator)> = HeadKind::ALL
            .into_iter()
            .filter_map(|k| self.bundle.head(k).map(|a| (k, a)))
            .collect();
        out.extend_from_slice(&(heads.len() as u32).to_le_bytes());
        for (kind, approx) in heads {
            out.push(kind.tag());
            write_approximator(approx, &mut out);
        }
        out.push(self.bundle.log_z.is_some() as u8);
        out.extend_from_slice(&self.bundle.log_z.unwrap_or(0.0).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes };
        r.magic(BUNDLE_MAGIC)?;
        let iteration = r.u64()?;
        let len = r.u32()? as usize;
        let fingerprint = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("fingerprint is not UTF-8".into()))?;
        let count = r.u32()?;
        let mut forward = None;
        let mut backward = None;
        let mut value = None;
        let mut backward_value = None;
        let mut log_flow = None;
        for _ in 0..count {
            let tag = r.u8()?;
            let kind = HeadKind::from_tag(tag)
                .ok_or_else(|| Error::Checkpoint(format!("unknown head tag {tag}")))?;
            let approx = read_approx(&mut r)?;
            let slot = match kind {
                HeadKind::Forward => &mut forward,
                HeadKind::Backward => &mut backward,
                HeadKind::Value => &mut value,
                HeadKind::BackwardValue => &mut backward_value,
                HeadKind::LogFlow => &mut log_flow,
            };
            if slot.replace(approx).is_some() {
                return Err(Error::Checkpoint(format!("duplicate {} head", kind.name())));
            }
        }
        let has_logz = r.u8()? != 0;
        let log_z = r.f64()?;
        if !r.bytes.is_empty() {
            return Err(Error::Checkpoint("trailing bytes after bundle".into()));
        }
        let forward = forward.ok_or_else(|| Error::Checkpoint("missing forward head".into()))?;
        Ok(Self {
            iteration,
            fingerprint,
            bundle: PolicyBundle {
                forward,
                backward,
                value,
                backward_value,
                log_flow,
                log_z: has_logz.then_some(log_z),
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
