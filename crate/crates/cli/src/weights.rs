//! Tensor files: a little-endian `u64` header length, a JSON header, then
//! every tensor's scalars back to back in little-endian row-major order.

use serde::{Deserialize, Serialize};
use stome_core::tensor::ParamTree;
use stome_core::{Mat, Real};

use crate::error::{CliError, CliResult};

pub const FORMAT: &str = "stome-tensors";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn of<F: Real>() -> Self {
        if F::BYTES == 4 {
            Dtype::F32
        } else {
            Dtype::F64
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset from the start of the data section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub dtype: Dtype,
    pub tensors: Vec<TensorEntry>,
}

/// Serializes named matrices.
pub fn write_tensors<F: Real>(tensors: &[(String, &Mat<F>)]) -> Vec<u8> {
    let mut offset = 0;
    let entries = tensors
        .iter()
        .map(|(name, m)| {
            let e = TensorEntry {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
                offset,
            };
            offset += m.len() * F::BYTES;
            e
        })
        .collect();
    let header = Header {
        format: FORMAT.into(),
        dtype: Dtype::of::<F>(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + offset);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, m) in tensors {
        for &x in m.as_slice() {
            x.push_le(&mut out);
        }
    }
    out
}

pub fn write_tree<F: Real, P: ParamTree<F> + ?Sized>(tree: &P) -> Vec<u8> {
    let mut named: Vec<(String, &Mat<F>)> = Vec::new();
    tree.visit("", &mut |name, m| named.push((name.into(), m)));
    write_tensors(&named)
}

/// Parsed file: header plus the raw data section.
pub struct TensorFile<'a> {
    pub header: Header,
    data: &'a [u8],
}

pub fn read_tensors(bytes: &[u8]) -> CliResult<TensorFile<'_>> {
    let bad = |m: String| CliError::Config(format!("tensor file: {m}"));
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| bad("shorter than the 8-byte header length".into()))?;
    let len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| bad("header length overflows".into()))?;
    let json = bytes
        .get(8..8usize.saturating_add(len))
        .ok_or_else(|| bad(format!("header of {len} bytes is truncated")))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
    if header.format != FORMAT {
        return Err(bad(format!("format {:?} is not {FORMAT:?}", header.format)));
    }
    let data = &bytes[8 + len..];
    let w = header.dtype.bytes();
    for t in &header.tensors {
        let end = t.rows * t.cols * w + t.offset;
        if end > data.len() {
            return Err(bad(format!("tensor {} runs past the end of the data", t.name)));
        }
    }
    Ok(TensorFile { header, data })
}

impl TensorFile<'_> {
    pub fn get<F: Real>(&self, name: &str) -> Option<Mat<F>> {
        let t = self.header.tensors.iter().find(|t| t.name == name)?;
        let w = self.header.dtype.bytes();
        let raw = &self.data[t.offset..t.offset + t.rows * t.cols * w];
        let vals = raw
            .chunks_exact(w)
            .map(|c| match self.header.dtype {
                Dtype::F32 => F::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64),
                Dtype::F64 => F::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))),
            })
            .collect();
        Some(Mat::from_vec(t.rows, t.cols, vals).expect("shape from header"))
    }

    /// Fills every parameter of `tree`, looking each up by name under
    /// `prefix`. Shapes must match; scalars are converted to `F`.
    pub fn load_into<F: Real, P: ParamTree<F> + ?Sized>(&self, tree: &mut P, prefix: &str) -> CliResult<()> {
        let names = tree.param_names();
        let mut loaded = Vec::with_capacity(names.len());
        for n in &names {
            let full = stome_core::tensor::join(prefix, n);
            let m = self
                .get::<F>(&full)
                .ok_or_else(|| CliError::Config(format!("tensor file lacks parameter {full}")))?;
            loaded.push((full, m));
        }
        let mut it = loaded.into_iter();
        let mut err = None;
        tree.visit_mut(&mut |dst| {
            let (name, m) = it.next().expect("one tensor per parameter");
            if m.shape() != dst.shape() {
                err.get_or_insert(CliError::Config(format!(
                    "parameter {name} has shape {:?} in the file but {:?} in the model",
                    m.shape(),
                    dst.shape()
                )));
            } else {
                *dst = m;
            }
        });
        err.map_or(Ok(()), Err)
    }
}
