//! Checkpoint directories: a text `manifest.txt` plus one raw payload per
//! tensor.
//!
//! ```text
//! group encoder_lstm frozen=0
//! tensor encoder_lstm/b shape=1x128
//! ```
//!
//! Payloads are named `<group>.<tensor>.f64` and hold little-endian,
//! row-major `f64` values, so a round trip is bit-exact.

use std::fs;
use std::path::Path;

use super::params::{ModelParams, ParamGroup};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.txt";

fn ckpt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn payload_name(group: &str, tensor: &str) -> String {
    format!("{group}.{tensor}.f64")
}

pub fn save_checkpoint(params: &ModelParams, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for g in params.groups() {
        manifest.push_str(&format!("group {} frozen={}\n", g.name, u8::from(g.frozen)));
        for (name, t) in &g.tensors {
            let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("tensor {}/{} shape={}\n", g.name, name, shape.join("x")));
            let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            fs::write(dir.join(payload_name(&g.name, name)), bytes)?;
        }
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<ModelParams> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| ckpt_err(&manifest_path, format!("cannot read manifest: {e}")))?;

    let mut groups: Vec<ParamGroup> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: &str| ckpt_err(&manifest_path, format!("line {}: {msg}", lineno + 1));
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some("group"), Some(name), Some(flag), None) => {
                let frozen = match flag {
                    "frozen=0" => false,
                    "frozen=1" => true,
                    _ => return Err(bad("expected frozen=0 or frozen=1")),
                };
                if groups.iter().any(|g| g.name == name) {
                    return Err(bad(&format!("duplicate group `{name}`")));
                }
                let mut g = ParamGroup::new(name);
                g.frozen = frozen;
                groups.push(g);
            }
            (Some("tensor"), Some(key), Some(shape), None) => {
                let (group, name) = key.split_once('/').ok_or_else(|| bad("tensor key must be group/name"))?;
                let shape = shape
                    .strip_prefix("shape=")
                    .ok_or_else(|| bad("missing shape="))?
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| bad("unparseable shape"))?;
                let g = groups
                    .iter_mut()
                    .find(|g| g.name == group)
                    .ok_or_else(|| bad(&format!("tensor `{key}` before its group")))?;
                let payload = dir.join(payload_name(group, name));
                let bytes = fs::read(&payload).map_err(|e| ckpt_err(&payload, format!("tensor `{key}`: {e}")))?;
                let numel: usize = shape.iter().product();
                if bytes.len() != numel * 8 {
                    return Err(ckpt_err(
                        &payload,
                        format!(
                            "tensor `{key}`: expected {} bytes for shape {shape:?}, found {}",
                            numel * 8,
                            bytes.len()
                        ),
                    ));
                }
                let data = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect();
                let t = Tensor::new(shape, data).map_err(|e| ckpt_err(&payload, format!("tensor `{key}`: {e}")))?;
                g.tensors.insert(name.to_string(), t);
            }
            _ => return Err(bad("unrecognised line")),
        }
    }
    ModelParams::new(groups)
}

/// Loads a checkpoint and checks it against an expected layout, naming the
/// first missing or mis-shaped tensor.
pub fn load_checkpoint_matching(dir: impl AsRef<Path>, template: &ModelParams) -> Result<ModelParams> {
    let dir = dir.as_ref();
    let params = load_checkpoint(dir)?;
    params.check_layout(template).map_err(|e| ckpt_err(dir, e.to_string()))?;
    Ok(params)
}
