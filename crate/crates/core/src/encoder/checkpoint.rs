//! Checkpoints: the 8-byte magic `GIDPCK01`, a `u32` length-prefixed text
//! manifest (a `version` line then one `name rows cols` line per segment), the
//! `u64` value count and the flat parameters as little-endian `f64`, then an
//! optional optimizer section.

use std::fs;
use std::path::Path;

use super::optim::{OptimizerKind, OptimizerState};
use super::{Architecture, EncoderParams, Layout};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GIDPCK01";
const VERSION_LINE: &str = "version 1";

pub fn save_checkpoint(params: &EncoderParams, optimizer: Option<&OptimizerState>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let manifest = format!("{VERSION_LINE}\n{}", params.layout().manifest());
    let mut out = Vec::with_capacity(32 + manifest.len() + 8 * params.values().len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    put_f64s(&mut out, params.values());
    match optimizer {
        None => out.push(0),
        Some(st) => {
            out.push(1);
            let (tag, a, b, c) = match st.kind {
                OptimizerKind::Adam { beta1, beta2, eps } => (1u8, beta1, beta2, eps),
                OptimizerKind::Sgd { momentum } => (2u8, momentum, 0.0, 0.0),
            };
            out.push(tag);
            for v in [st.learning_rate, a, b, c] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&st.step.to_le_bytes());
            put_f64s(&mut out, &st.first_moment);
            put_f64s(&mut out, &st.second_moment);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn put_f64s(out: &mut Vec<u8>, vals: &[f64]) {
    out.extend_from_slice(&(vals.len() as u64).to_le_bytes());
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "checkpoint ends at byte {} while reading {n} more",
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Truncated("length overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(EncoderParams, Option<OptimizerState>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads a checkpoint and requires it to match `arch`.
pub fn load_checkpoint_expecting(
    path: impl AsRef<Path>,
    arch: &Architecture,
) -> Result<(EncoderParams, Option<OptimizerState>)> {
    let (params, opt) = load_checkpoint(path)?;
    if params.arch() != arch {
        return Err(Error::LayoutMismatch(format!(
            "checkpoint widths {:?}/{} differ from expected {:?}/{}",
            params.arch().widths,
            params.arch().proj_hidden,
            arch.widths,
            arch.proj_hidden
        )));
    }
    Ok((params, opt))
}

fn decode(bytes: &[u8]) -> Result<(EncoderParams, Option<OptimizerState>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::MalformedHeader("checkpoint magic".into()));
    }
    let mlen = r.u32()? as usize;
    let manifest = std::str::from_utf8(r.take(mlen)?)
        .map_err(|_| Error::MalformedHeader("checkpoint manifest is not utf-8".into()))?;
    let (first, rest) = manifest.split_once('\n').unwrap_or((manifest, ""));
    if first != VERSION_LINE {
        return Err(Error::MalformedHeader(format!("unsupported checkpoint `{first}`")));
    }
    let layout = Layout::from_manifest(rest)?;
    let arch = layout.architecture()?;
    let values = r.f64s()?;
    if values.len() != layout.len() {
        return Err(Error::LayoutMismatch(format!(
            "manifest describes {} values, file holds {}",
            layout.len(),
            values.len()
        )));
    }
    let params = EncoderParams::from_values(arch, values)?;

    let opt = match r.u8()? {
        0 => None,
        1 => {
            let tag = r.u8()?;
            let lr = r.f64()?;
            let (a, b, c) = (r.f64()?, r.f64()?, r.f64()?);
            let kind = match tag {
                1 => OptimizerKind::Adam { beta1: a, beta2: b, eps: c },
                2 => OptimizerKind::Sgd { momentum: a },
                t => return Err(Error::MalformedHeader(format!("unknown optimizer tag {t}"))),
            };
            let step = r.u64()?;
            let first_moment = r.f64s()?;
            let second_moment = r.f64s()?;
            if first_moment.len() != layout.len() {
                return Err(Error::LayoutMismatch("optimizer moments do not match parameters".into()));
            }
            Some(OptimizerState {
                kind,
                learning_rate: lr,
                step,
                first_moment,
                second_moment,
            })
        }
        f => return Err(Error::MalformedHeader(format!("bad optimizer flag {f}"))),
    };
    Ok((params, opt))
}
