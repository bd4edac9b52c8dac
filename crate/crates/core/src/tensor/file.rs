//! Raw tensor files.
//!
//! ```text
//! TRANSVW-TENSORS 1
//! precision f32
//! byte_order little
//! meta <key> <value>
//! tensor <name> <extent>x<extent>...
//! payload_sha256 <hex>
//! end
//! <little-endian element bytes, tensors in header order>
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::{Precision, Scalar, Tensor};
use crate::artifact;
use crate::error::{Error, Result};
use crate::seed::sha256_hex;

const MAGIC: &str = "TRANSVW-TENSORS 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub precision: Precision,
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<(String, Vec<usize>)>,
    pub payload_sha256: String,
}

pub fn encode<S: Scalar>(meta: &BTreeMap<String, String>, tensors: &[(&str, &Tensor<S>)]) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (name, t) in tensors {
        if name.is_empty() || name.contains(char::is_whitespace) || !seen.insert(*name) {
            return Err(Error::usage(format!("invalid or duplicate tensor name `{name}`")));
        }
        for &v in t.data() {
            v.write_le(&mut payload);
        }
    }
    let mut head = String::new();
    head.push_str(MAGIC);
    head.push('\n');
    head.push_str(&format!("precision {}\n", S::PRECISION.name()));
    head.push_str("byte_order little\n");
    for (k, v) in meta {
        if k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(Error::usage(format!("invalid meta entry `{k}`")));
        }
        head.push_str(&format!("meta {k} {v}\n"));
    }
    for (name, t) in tensors {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        head.push_str(&format!("tensor {name} {}\n", dims.join("x")));
    }
    head.push_str(&format!("payload_sha256 {}\n", sha256_hex(&payload)));
    head.push_str("end\n");
    let mut out = head.into_bytes();
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses the header; returns it and the payload offset.
pub fn parse_header(bytes: &[u8]) -> Result<(Header, usize)> {
    let mut offset = 0;
    let mut lines = Vec::new();
    loop {
        let rest = &bytes[offset..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::integrity("tensor file header is truncated"))?;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| Error::integrity("tensor file header is not utf-8"))?
            .to_string();
        offset += nl + 1;
        if line == "end" {
            break;
        }
        lines.push(line);
        if lines.len() > 1_000_000 {
            return Err(Error::integrity("tensor file header never terminates"));
        }
    }
    if lines.first().map(String::as_str) != Some(MAGIC) {
        return Err(Error::integrity("not a tensor file (bad magic)"));
    }
    let mut precision = None;
    let mut meta = BTreeMap::new();
    let mut entries = Vec::new();
    let mut digest = None;
    for line in &lines[1..] {
        let (key, rest) = line.split_once(' ').unwrap_or((line.as_str(), ""));
        match key {
            "precision" => precision = Some(Precision::parse(rest).map_err(|e| Error::integrity(e.to_string()))?),
            "byte_order" => {
                if rest != "little" {
                    return Err(Error::integrity(format!("unsupported byte order `{rest}`")));
                }
            }
            "meta" => {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.insert(k.to_string(), v.to_string());
            }
            "tensor" => {
                let (name, dims) = rest
                    .split_once(' ')
                    .ok_or_else(|| Error::integrity(format!("bad tensor line `{line}`")))?;
                let shape = dims
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::integrity(format!("bad shape in `{line}`")))?;
                entries.push((name.to_string(), shape));
            }
            "payload_sha256" => digest = Some(rest.to_string()),
            other => return Err(Error::integrity(format!("unknown header key `{other}`"))),
        }
    }
    let precision = precision.ok_or_else(|| Error::integrity("missing precision line"))?;
    let payload_sha256 = digest.ok_or_else(|| Error::integrity("missing payload digest"))?;
    Ok((
        Header {
            precision,
            meta,
            entries,
            payload_sha256,
        },
        offset,
    ))
}

pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<(Header, Vec<(String, Tensor<S>)>)> {
    let (header, offset) = parse_header(bytes)?;
    if header.precision != S::PRECISION {
        return Err(Error::config(format!(
            "file holds {} tensors, {} requested",
            header.precision.name(),
            S::PRECISION.name()
        )));
    }
    let payload = &bytes[offset..];
    let width = header.precision.byte_width();
    let expected: usize = header
        .entries
        .iter()
        .map(|(_, s)| s.iter().product::<usize>() * width)
        .sum();
    if payload.len() != expected {
        return Err(Error::integrity(format!(
            "payload holds {} bytes, header describes {expected}",
            payload.len()
        )));
    }
    if sha256_hex(payload) != header.payload_sha256 {
        return Err(Error::integrity("payload digest mismatch"));
    }
    let mut out = Vec::with_capacity(header.entries.len());
    let mut at = 0;
    for (name, shape) in &header.entries {
        let n: usize = shape.iter().product();
        let data: Vec<S> = payload[at..at + n * width].chunks(width).map(S::read_le).collect();
        at += n * width;
        out.push((
            name.clone(),
            Tensor::new(shape.clone(), data).map_err(|e| Error::integrity(e.to_string()))?,
        ));
    }
    Ok((header, out))
}

pub fn save<S: Scalar>(path: &Path, meta: &BTreeMap<String, String>, tensors: &[(&str, &Tensor<S>)]) -> Result<()> {
    artifact::write_atomic(path, &encode(meta, tensors)?)
}

pub fn load<S: Scalar>(path: &Path) -> Result<(Header, Vec<(String, Tensor<S>)>)> {
    decode(&artifact::read(path)?)
}
