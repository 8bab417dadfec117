//! Binary containers for trained models (`WRCM`) and Gram matrices (`WRCK`).
//!
//! All integers and floats are little-endian. Model layout:
//!
//! ```text
//! "WRCM" u32 version=1 u32 d_out u32 d_in u8 kind
//! kind 0 (linear): d_out*d_in f64 (W, row-major)
//! kind 1 (kernel): u8 kernel (0 linear, 1 chi2, 2 rbf) f64 bandwidth f64 eps
//!                  u32 N u32 D, N*D f64 basis (row-major), d_out*N f64 A (row-major)
//! u32 metadata length, metadata bytes (UTF-8 JSON)
//! ```

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::dataset::ByteReader;
use crate::error::{Error, Result};
use crate::kernel::{GramMatrix, KernelKind, KernelMetricModel, KernelSpec};
use crate::linear::LinearMetricModel;

const MODEL_MAGIC: &[u8; 4] = b"WRCM";
const GRAM_MAGIC: &[u8; 4] = b"WRCK";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum SavedModel {
    Linear(LinearMetricModel),
    Kernel(KernelMetricModel),
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_row_major(out: &mut Vec<u8>, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
}

fn read_row_major(r: &mut ByteReader<'_>, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let vals = (0..rows * cols).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_row_slice(rows, cols, &vals))
}

pub fn encode_model(model: &SavedModel, metadata: &serde_json::Value) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    match model {
        SavedModel::Linear(m) => {
            put_u32(&mut out, m.d_out())?;
            put_u32(&mut out, m.d_in())?;
            out.push(0);
            put_row_major(&mut out, m.w());
        }
        SavedModel::Kernel(m) => {
            put_u32(&mut out, m.d_out())?;
            put_u32(&mut out, m.d_in())?;
            out.push(1);
            let spec = m.spec();
            out.push(match spec.kind {
                KernelKind::Linear => 0,
                KernelKind::Chi2 => 1,
                KernelKind::Rbf => 2,
            });
            out.extend_from_slice(&spec.bandwidth.to_le_bytes());
            out.extend_from_slice(&spec.eps.to_le_bytes());
            put_u32(&mut out, m.n_basis())?;
            put_u32(&mut out, m.d_in())?;
            for v in m.basis() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            put_row_major(&mut out, m.a());
        }
    }
    let meta = serde_json::to_vec(metadata).map_err(|e| Error::Format(e.to_string()))?;
    put_u32(&mut out, meta.len())?;
    out.extend_from_slice(&meta);
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<(SavedModel, serde_json::Value)> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != MODEL_MAGIC {
        return Err(Error::Format("missing WRCM magic".into()));
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let d_out = r.u32()? as usize;
    let d_in = r.u32()? as usize;
    let model = match r.u8()? {
        0 => SavedModel::Linear(LinearMetricModel::new(read_row_major(&mut r, d_out, d_in)?)?),
        1 => {
            let kind = match r.u8()? {
                0 => KernelKind::Linear,
                1 => KernelKind::Chi2,
                2 => KernelKind::Rbf,
                other => return Err(Error::Format(format!("unknown kernel kind {other}"))),
            };
            let bandwidth = r.f64()?;
            let eps = r.f64()?;
            let n = r.u32()? as usize;
            let d = r.u32()? as usize;
            if d != d_in {
                return Err(Error::Format(format!("basis dimension {d} != header {d_in}")));
            }
            let basis = (0..n * d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let a = read_row_major(&mut r, d_out, n)?;
            let spec = KernelSpec { kind, bandwidth, eps };
            SavedModel::Kernel(KernelMetricModel::new(a, spec, basis, d)?)
        }
        other => return Err(Error::Format(format!("unknown model kind {other}"))),
    };
    let len = r.u32()? as usize;
    let meta = r.take(len)?;
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after metadata".into()));
    }
    let metadata = serde_json::from_slice(meta).map_err(|e| Error::Format(format!("metadata: {e}")))?;
    Ok((model, metadata))
}

pub fn save_model(path: &Path, model: &SavedModel, metadata: &serde_json::Value) -> Result<()> {
    fs::write(path, encode_model(model, metadata)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<(SavedModel, serde_json::Value)> {
    decode_model(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// `"WRCK" u32 N` followed by the upper triangle (row-major, diagonal
/// included) as f64.
pub fn encode_gram(gram: &GramMatrix) -> Result<Vec<u8>> {
    let n = gram.n();
    let mut out = Vec::with_capacity(8 + 4 * n * (n + 1));
    out.extend_from_slice(GRAM_MAGIC);
    put_u32(&mut out, n)?;
    for a in 0..n {
        for b in a..n {
            out.extend_from_slice(&gram.k[(a, b)].to_le_bytes());
        }
    }
    Ok(out)
}

/// Reads the symmetric matrix back; the kernel spec is not stored.
pub fn decode_gram(bytes: &[u8]) -> Result<DMatrix<f64>> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != GRAM_MAGIC {
        return Err(Error::Format("missing WRCK magic".into()));
    }
    let n = r.u32()? as usize;
    let mut k = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in a..n {
            let v = r.f64()?;
            k[(a, b)] = v;
            k[(b, a)] = v;
        }
    }
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after Gram payload".into()));
    }
    Ok(k)
}
