//! Binary checkpoint format.
//!
//! ```text
//! SEQDEDUP-CKPT-1
//! meta <key> <value>          (zero or more)
//! param <name> <d0>x<d1> <offset>
//! payload <count>
//! end
//! <count little-endian f64 values>
//! ```
//!
//! Offsets and counts are in `f64` elements. Parameters appear in their
//! `ParamSet` order, so identical parameter sets serialize to identical bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::param::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CKPT_MAGIC: &str = "SEQDEDUP-CKPT-1";

pub fn encode(meta: &[(String, String)], params: &ParamSet) -> Vec<u8> {
    let mut head = format!("{CKPT_MAGIC}\n");
    for (k, v) in meta {
        head.push_str(&format!("meta {k} {v}\n"));
    }
    let mut offset = 0usize;
    for p in params.iter() {
        let shape: Vec<String> = p.value.shape().iter().map(ToString::to_string).collect();
        head.push_str(&format!("param {} {} {}\n", p.name, shape.join("x"), offset));
        offset += p.value.len();
    }
    head.push_str(&format!("payload {offset}\nend\n"));
    let mut out = head.into_bytes();
    out.reserve(offset * 8);
    for p in params.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(Vec<(String, String)>, ParamSet)> {
    let bad = |m: String| Error::Checkpoint(m);
    let mut pos = 0usize;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header".into()))?;
        pos += nl + 1;
        std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not utf-8".into()))
    };

    let magic = next_line()?;
    if magic != CKPT_MAGIC {
        return Err(Error::Version {
            expected: CKPT_MAGIC.into(),
            found: magic.chars().take(40).collect(),
        });
    }
    let mut meta = Vec::new();
    let mut entries: Vec<(String, Vec<usize>, usize)> = Vec::new();
    let mut count = None;
    loop {
        let line = next_line()?;
        if line == "end" {
            break;
        }
        let mut parts = line.splitn(2, ' ');
        let kind = parts.next().unwrap_or_default();
        let rest = parts.next().unwrap_or_default();
        match kind {
            "meta" => {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.push((k.to_string(), v.to_string()));
            }
            "param" => {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 3 {
                    return Err(bad(format!("malformed param line {line:?}")));
                }
                let shape = f[1]
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad(format!("bad shape in {line:?}")))?;
                let offset = f[2]
                    .parse()
                    .map_err(|_| bad(format!("bad offset in {line:?}")))?;
                entries.push((f[0].to_string(), shape, offset));
            }
            "payload" => {
                count = Some(
                    rest.parse::<usize>()
                        .map_err(|_| bad(format!("bad payload count {rest:?}")))?,
                );
            }
            _ => return Err(bad(format!("unknown header line {line:?}"))),
        }
    }
    let count = count.ok_or_else(|| bad("missing payload line".into()))?;
    let body = &bytes[pos..];
    if body.len() != count * 8 {
        return Err(bad(format!(
            "payload has {} bytes, header promises {}",
            body.len(),
            count * 8
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut params = ParamSet::new();
    for (name, shape, offset) in entries {
        let n: usize = shape.iter().product();
        if offset + n > count {
            return Err(bad(format!("parameter {name} runs past the payload")));
        }
        params.add(name, Tensor::new(&shape, values[offset..offset + n].to_vec()));
    }
    Ok((meta, params))
}

pub fn save(path: &Path, meta: &[(String, String)], params: &ParamSet) -> Result<()> {
    let bytes = encode(meta, params);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Vec<(String, String)>, ParamSet)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
