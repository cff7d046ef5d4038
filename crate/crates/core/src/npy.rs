//! Reading and writing `.npy` files.
//!
//! Only format version 1.0, C order and little-endian `f4`/`f8` payloads are
//! accepted. Anything else is rejected rather than coerced. Arrays are always
//! written as `<f8`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{CraftError, Result};
use crate::tensor::{Matrix, Tensor4};

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

/// A loaded array: rank 1 and 2 become a [`Matrix`], rank 4 a [`Tensor4`].
#[derive(Debug, Clone, PartialEq)]
pub enum NpyArray {
    Matrix(Matrix),
    Tensor4(Tensor4),
}

impl NpyArray {
    pub fn into_matrix(self) -> Result<Matrix> {
        match self {
            NpyArray::Matrix(m) => Ok(m),
            NpyArray::Tensor4(t) => Err(CraftError::Data(format!(
                "expected a 2-D array, found shape {:?}",
                t.dims()
            ))),
        }
    }

    pub fn into_tensor4(self) -> Result<Tensor4> {
        match self {
            NpyArray::Tensor4(t) => Ok(t),
            NpyArray::Matrix(m) => Err(CraftError::Data(format!(
                "expected a 4-D array, found shape {:?}",
                m.shape()
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dtype {
    F4,
    F8,
}

#[derive(Debug)]
struct Header {
    dtype: Dtype,
    shape: Vec<usize>,
}

pub fn load_npy(path: impl AsRef<Path>) -> Result<NpyArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CraftError::io(path, e))?;
    decode(&bytes)
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    load_npy(path)?.into_matrix()
}

pub fn load_tensor4(path: impl AsRef<Path>) -> Result<Tensor4> {
    load_npy(path)?.into_tensor4()
}

pub fn save_matrix(m: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    let (r, c) = m.shape();
    write_file(path.as_ref(), &[r, c], m.as_slice())
}

pub fn save_tensor4(t: &Tensor4, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &t.dims(), t.as_slice())
}

pub fn save_npy(array: &NpyArray, path: impl AsRef<Path>) -> Result<()> {
    match array {
        NpyArray::Matrix(m) => save_matrix(m, path),
        NpyArray::Tensor4(t) => save_tensor4(t, path),
    }
}

fn write_file(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    let bytes = encode(shape, data)?;
    let mut f = fs::File::create(path).map_err(|e| CraftError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| CraftError::io(path, e))
}

/// Serializes an `<f8` C-order array.
pub fn encode(shape: &[usize], data: &[f64]) -> Result<Vec<u8>> {
    if shape.contains(&0) || data.is_empty() {
        return Err(CraftError::arg("empty arrays cannot be written to npy"));
    }
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    let dims = match shape {
        [d] => format!("({d},)"),
        _ => format!(
            "({})",
            shape.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut dict = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': {dims}, }}");
    // magic(6) + version(2) + header length(2) + dict + '\n' must be a multiple of ALIGN
    let unpadded = MAGIC.len() + 2 + 2 + dict.len() + 1;
    let pad = (ALIGN - unpadded % ALIGN) % ALIGN;
    dict.extend(std::iter::repeat_n(' ', pad));
    dict.push('\n');
    let header_len = u16::try_from(dict.len()).map_err(|_| CraftError::arg("npy header too long"))?;

    let mut out = Vec::with_capacity(unpadded + pad + data.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<NpyArray> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(CraftError::Format("missing \\x93NUMPY magic".into()));
    }
    if bytes[6..8] != [1, 0] {
        return Err(CraftError::Unsupported(format!(
            "npy version {}.{} (only 1.0)",
            bytes[6], bytes[7]
        )));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let body = 10 + hlen;
    if bytes.len() < body {
        return Err(CraftError::Format("truncated header".into()));
    }
    let text = std::str::from_utf8(&bytes[10..body])
        .map_err(|_| CraftError::Format("header is not ASCII".into()))?;
    let header = parse_header(text)?;

    let count: usize = header.shape.iter().product();
    if count == 0 {
        return Err(CraftError::Data("empty array".into()));
    }
    let width = match header.dtype {
        Dtype::F4 => 4,
        Dtype::F8 => 8,
    };
    let payload = &bytes[body..];
    if payload.len() != count * width {
        return Err(CraftError::Format(format!(
            "payload holds {} bytes, shape {:?} needs {}",
            payload.len(),
            header.shape,
            count * width
        )));
    }
    let data: Vec<f64> = match header.dtype {
        Dtype::F4 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        Dtype::F8 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
    };
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(CraftError::Data(format!("non-finite value at flat index {pos}")));
    }

    match header.shape.as_slice() {
        [n] => Ok(NpyArray::Matrix(Matrix::new(1, *n, data)?)),
        [r, c] => Ok(NpyArray::Matrix(Matrix::new(*r, *c, data)?)),
        [b, h, w, c] => Ok(NpyArray::Tensor4(Tensor4::new([*b, *h, *w, *c], data)?)),
        other => Err(CraftError::Unsupported(format!(
            "arrays of rank {} (shape {other:?})",
            other.len()
        ))),
    }
}

fn parse_header(text: &str) -> Result<Header> {
    let t = text.trim_end_matches(['\n', ' ', '\0']).trim();
    let inner = t
        .strip_prefix('{')
        .and_then(|s| s.strip_suffix('}'))
        .ok_or_else(|| CraftError::Format(format!("header is not a dict: {t:?}")))?;

    let descr = dict_value(inner, "descr")?;
    let fortran = dict_value(inner, "fortran_order")?;
    let shape = dict_value(inner, "shape")?;

    let descr = descr.trim_matches(|c| c == '\'' || c == '"');
    let dtype = match descr {
        "<f4" => Dtype::F4,
        "<f8" => Dtype::F8,
        other => return Err(CraftError::Unsupported(format!("dtype {other:?}"))),
    };
    match fortran {
        "False" => {}
        "True" => return Err(CraftError::Unsupported("fortran_order=True".into())),
        other => return Err(CraftError::Format(format!("fortran_order value {other:?}"))),
    }
    let shape = shape
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| CraftError::Format(format!("shape {shape:?}")))?;
    let dims = shape
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.trim_end_matches('L')
                .parse::<usize>()
                .map_err(|_| CraftError::Format(format!("shape entry {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Header { dtype, shape: dims })
}

/// Extracts the raw text of `key`'s value from the inside of a Python dict literal.
fn dict_value<'a>(inner: &'a str, key: &str) -> Result<&'a str> {
    let quoted = [format!("'{key}'"), format!("\"{key}\"")];
    let start = quoted
        .iter()
        .find_map(|k| inner.find(k.as_str()).map(|p| p + k.len()))
        .ok_or_else(|| CraftError::Format(format!("header lacks {key:?}")))?;
    let rest = inner[start..].trim_start();
    let rest = rest
        .strip_prefix(':')
        .ok_or_else(|| CraftError::Format(format!("no ':' after {key:?}")))?
        .trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')').map(|p| p + 1)
    } else {
        rest.find(',').or(Some(rest.len()))
    }
    .ok_or_else(|| CraftError::Format(format!("unterminated value for {key:?}")))?;
    Ok(rest[..end].trim())
}
