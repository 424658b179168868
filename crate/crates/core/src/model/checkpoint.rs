//! Checkpoint container.
//!
//! ```text
//! dualm-checkpoint v1
//! config {"n_layers":2,...}
//! tensor embed 512x64 0
//! tensor layers.0.attn_norm 64 32768
//! ...
//! end
//! <little-endian f32 payload>
//! ```
//!
//! Offsets count `f32` elements from the start of the payload.

use std::path::Path;

use super::{ModelConfig, Params};
use crate::io::atomic_write;
use crate::{Error, Real, Result};

const MAGIC: &str = "dualm-checkpoint v1";

pub fn to_bytes<T: Real>(params: &Params<T>) -> Vec<u8> {
    let mut header = format!(
        "{MAGIC}\nconfig {}\n",
        serde_json::to_string(&params.config).expect("config serializes")
    );
    let tensors = params.tensors();
    let mut offset = 0usize;
    for t in &tensors {
        let shape: Vec<String> = t.shape.iter().map(|s| s.to_string()).collect();
        header.push_str(&format!(
            "tensor {} {} {}\n",
            t.name,
            shape.join("x"),
            offset
        ));
        offset += t.data.len();
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    out.reserve(offset * 4);
    for t in &tensors {
        for &x in t.data {
            out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Params<f32>> {
    let src = "<checkpoint>";
    let mut pos = 0usize;
    let mut next_line = |lineno: &mut usize| -> Result<String> {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(src, *lineno, "truncated manifest"))?;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| Error::parse(src, *lineno, "manifest is not UTF-8"))?
            .to_string();
        pos += nl + 1;
        *lineno += 1;
        Ok(line)
    };
    let mut lineno = 0;
    if next_line(&mut lineno)? != MAGIC {
        return Err(Error::parse(
            src,
            1,
            "not a dualm checkpoint (bad magic line)",
        ));
    }
    let cfg_line = next_line(&mut lineno)?;
    let cfg_json = cfg_line
        .strip_prefix("config ")
        .ok_or_else(|| Error::parse(src, lineno, "expected config line"))?;
    let config: ModelConfig = serde_json::from_str(cfg_json)?;
    let mut entries = Vec::new();
    loop {
        let line = next_line(&mut lineno)?;
        if line == "end" {
            break;
        }
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() != 4 || parts[0] != "tensor" {
            return Err(Error::parse(
                src,
                lineno,
                format!("bad tensor entry `{line}`"),
            ));
        }
        let shape = parts[2]
            .split('x')
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::parse(src, lineno, "bad shape"))?;
        let offset: usize = parts[3]
            .parse()
            .map_err(|_| Error::parse(src, lineno, "bad offset"))?;
        entries.push((parts[1].to_string(), shape, offset));
    }
    let payload = &bytes[pos..];

    let mut params = Params::<f32>::init(&config, 0)?;
    let expected: Vec<(String, Vec<usize>)> = params
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.shape))
        .collect();
    if expected.len() != entries.len() {
        return Err(Error::Input(format!(
            "checkpoint has {} tensors, config implies {}",
            entries.len(),
            expected.len()
        )));
    }
    for ((want_name, want_shape), (name, shape, _)) in expected.iter().zip(&entries) {
        if want_name != name || want_shape != shape {
            return Err(Error::Input(format!(
                "tensor mismatch: expected {want_name} {want_shape:?}, found {name} {shape:?}"
            )));
        }
    }
    for (dst, (name, _, offset)) in params.slices_mut().into_iter().zip(&entries) {
        let start = offset * 4;
        let end = start + dst.len() * 4;
        let raw = payload
            .get(start..end)
            .ok_or_else(|| Error::Input(format!("payload too short for tensor {name}")))?;
        for (x, chunk) in dst.iter_mut().zip(raw.chunks_exact(4)) {
            *x = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
    }
    Ok(params)
}

pub fn save<T: Real>(params: &Params<T>, path: &Path) -> Result<()> {
    atomic_write(path, &to_bytes(params))
}

pub fn load(path: &Path) -> Result<Params<f32>> {
    from_bytes(&std::fs::read(path)?)
}
