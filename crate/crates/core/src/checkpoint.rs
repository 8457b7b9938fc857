//! Checkpoint files.
//!
//! Layout: the magic bytes `HFN1` and a newline, a line holding the tensor
//! count, then one manifest line per tensor (`<name> <dtype> <d0> <d1> ...`),
//! followed by the raw little-endian `f32` payloads in manifest order.
//! Loading checks every name and shape against the layer table before
//! returning anything.

use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{self, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HFN1";

pub fn to_bytes(params: &ModelParams<f32>) -> Vec<u8> {
    let names = network::tensor_names();
    let tensors = params.tensors();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(b'\n');
    out.extend(format!("{}\n", tensors.len()).bytes());
    for (name, t) in names.iter().zip(&tensors) {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        out.extend(format!("{name} f32 {}\n", dims.join(" ")).bytes());
    }
    for t in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Entry {
    name: String,
    shape: Vec<usize>,
}

fn read_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("manifest truncated".into()))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| Error::Format("manifest is not UTF-8".into()))
}

fn parse_entry(line: &str) -> Result<Entry> {
    let mut parts = line.split_whitespace();
    let name = parts
        .next()
        .ok_or_else(|| Error::Format("empty manifest line".into()))?;
    match parts.next() {
        Some("f32") => {}
        Some(other) => {
            return Err(Error::Format(format!(
                "{name}: unsupported dtype {other:?} (expected f32)"
            )))
        }
        None => return Err(Error::Format(format!("{name}: missing dtype"))),
    }
    let shape = parts
        .map(|d| {
            d.parse::<usize>()
                .map_err(|_| Error::Format(format!("{name}: bad dimension {d:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if shape.is_empty() {
        return Err(Error::Format(format!("{name}: missing shape")));
    }
    Ok(Entry {
        name: name.to_string(),
        shape,
    })
}

fn describe(shape: &[usize]) -> String {
    match shape {
        [cout, cin, k, _] => format!("{shape:?} ({k}x{k}, {cin}->{cout})"),
        _ => format!("{shape:?}"),
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams<f32>> {
    if bytes.len() < 5 || &bytes[..4] != MAGIC || bytes[4] != b'\n' {
        return Err(Error::Format("missing HFN1 magic".into()));
    }
    let mut pos = 5;
    let count: usize = read_line(bytes, &mut pos)?
        .trim()
        .parse()
        .map_err(|_| Error::Format("bad tensor count".into()))?;
    let mut entries = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        entries.push(parse_entry(read_line(bytes, &mut pos)?)?);
    }

    let names = network::tensor_names();
    let shapes = network::tensor_shapes();
    if entries.len() != names.len() {
        return Err(Error::Schema(format!(
            "expected {} tensors, manifest lists {}",
            names.len(),
            entries.len()
        )));
    }
    for ((e, name), shape) in entries.iter().zip(&names).zip(&shapes) {
        if &e.name != name {
            return Err(Error::Schema(format!(
                "expected tensor {name}, found {}",
                e.name
            )));
        }
        if &e.shape != shape {
            return Err(Error::Schema(format!(
                "{name}: expected shape {}, found {}",
                describe(shape),
                describe(&e.shape)
            )));
        }
    }

    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let payload = &bytes[pos..];
    if payload.len() != total * 4 {
        return Err(Error::Format(format!(
            "payload has {} bytes, manifest needs {}",
            payload.len(),
            total * 4
        )));
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let tensors = shapes
        .into_iter()
        .map(|shape| {
            let n = shape.iter().product();
            Tensor::new(shape, values.by_ref().take(n).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    ModelParams::from_tensors(tensors).map_err(|e| Error::Schema(e.to_string()))
}

pub fn save(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
