//! TSR1 tensor files: 8-byte magic, one JSON header line, raw little-endian
//! payload.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TSR1\0\0\0\0";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Header {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_order: String,
}

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let header = Header {
        shape: t.shape().to_vec(),
        dtype: T::DTYPE.to_string(),
        byte_order: "LE".to_string(),
    };
    let mut out = Vec::with_capacity(64 + t.len() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(serde_json::to_string(&header).expect("header serializes").as_bytes());
    out.push(b'\n');
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn write<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

/// Reads the header only.
pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    parse_header(&mut r)
}

fn parse_header(r: &mut impl BufRead) -> Result<Header> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("missing TSR1 magic".into()));
    }
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: Header =
        serde_json::from_str(line.trim_end()).map_err(|e| Error::Format(format!("bad TSR1 header: {e}")))?;
    if header.byte_order != "LE" {
        return Err(Error::Format(format!("unsupported byte order {}", header.byte_order)));
    }
    Ok(header)
}

/// Decodes a TSR1 stream, converting to `T` when the stored dtype differs.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut r = BufReader::new(bytes);
    let header = parse_header(&mut r)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let n: usize = header.shape.iter().product();
    let data: Vec<T> = match header.dtype.as_str() {
        "f32" => read_payload::<f32>(&payload, n)?
            .into_iter()
            .map(|v| T::of(v as f64))
            .collect(),
        "f64" => read_payload::<f64>(&payload, n)?.into_iter().map(T::of).collect(),
        other => return Err(Error::Format(format!("unsupported dtype {other}"))),
    };
    Tensor::new(&header.shape, data).map_err(|e| Error::Format(e.to_string()))
}

fn read_payload<S: Scalar>(payload: &[u8], n: usize) -> Result<Vec<S>> {
    if payload.len() != n * S::BYTES {
        return Err(Error::Format(format!(
            "payload has {} bytes, header implies {}",
            payload.len(),
            n * S::BYTES
        )));
    }
    Ok(payload.chunks_exact(S::BYTES).map(S::read_le).collect())
}

pub fn read<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode(&std::fs::read(path)?)
}
