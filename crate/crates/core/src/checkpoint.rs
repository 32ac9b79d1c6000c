//! On-disk checkpoints.
//!
//! A checkpoint is a directory holding `manifest.txt` and `tensors.bin`.
//! The manifest lists the model config as `key = value` lines followed by
//! one `tensor.<name> = <offset> <length>` line per weight, addressing a
//! byte range of `tensors.bin` in the tensor binary format.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::config::{parse_kv_text, ModelConfig};
use crate::error::{Error, Result};
use crate::model::{weight_shapes, ModelParams};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";
pub const TENSORS: &str = "tensors.bin";

pub fn save_checkpoint(dir: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    params.check_against(cfg)?;
    fs::create_dir_all(dir)?;
    let mut manifest = String::from("# model\n");
    manifest.push_str(&cfg.to_kv_text());
    manifest.push_str("# tensors: byte offset and length in tensors.bin\n");
    let mut blob = Vec::new();
    for (name, t) in params.entries() {
        let bytes = t.to_bytes();
        manifest.push_str(&format!("tensor.{name} = {} {}\n", blob.len(), bytes.len()));
        blob.extend_from_slice(&bytes);
    }
    fs::write(dir.join(TENSORS), blob)?;
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelConfig, ModelParams)> {
    let manifest = fs::read_to_string(dir.join(MANIFEST))?;
    let blob = fs::read(dir.join(TENSORS))?;
    let mut cfg = ModelConfig::default();
    let mut index = HashMap::new();
    for (k, v) in parse_kv_text(&manifest)? {
        match k.strip_prefix("tensor.") {
            Some(name) => {
                let range = parse_range(&v).ok_or_else(|| Error::Parse(format!("bad tensor range `{v}` for {name}")))?;
                index.insert(name.to_string(), range);
            }
            None => cfg.set(&k, &v)?,
        }
    }
    cfg.validate()?;
    let mut failure = None;
    let params = weight_shapes(&cfg).map(|name, _| {
        let t = match index.get(name) {
            Some(&(off, len)) if off.checked_add(len).is_some_and(|e| e <= blob.len()) => {
                Tensor::read_from(&mut &blob[off..off + len])
            }
            Some(_) => Err(Error::Parse(format!("tensor {name} lies outside {TENSORS}"))),
            None => Err(Error::Parse(format!("manifest has no tensor {name}"))),
        };
        t.unwrap_or_else(|e| {
            failure.get_or_insert(e);
            Tensor::scalar(0.0)
        })
    });
    if let Some(e) = failure {
        return Err(e);
    }
    params.check_against(&cfg)?;
    Ok((cfg, params))
}

fn parse_range(v: &str) -> Option<(usize, usize)> {
    let mut it = v.split_whitespace();
    let off = it.next()?.parse().ok()?;
    let len = it.next()?.parse().ok()?;
    it.next().is_none().then_some((off, len))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Family;
    use crate::model::build_model;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for f in [Family::Uyoco, Family::Transformer] {
            let mut cfg = ModelConfig::desk(f);
            cfg.seed = 9;
            let params = build_model(&cfg).unwrap();
            save_checkpoint(dir.path(), &cfg, &params).unwrap();
            let (c2, p2) = load_checkpoint(dir.path()).unwrap();
            assert_eq!(c2, cfg);
            assert_eq!(p2, params);
        }
    }

    #[test]
    fn truncated_blob_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::desk(Family::Yoco);
        save_checkpoint(dir.path(), &cfg, &build_model(&cfg).unwrap()).unwrap();
        let blob = fs::read(dir.path().join(TENSORS)).unwrap();
        fs::write(dir.path().join(TENSORS), &blob[..blob.len() / 2]).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }

    #[test]
    fn missing_directory_is_io_error() {
        assert!(matches!(load_checkpoint(Path::new("/nonexistent/ckpt")), Err(Error::Io(_))));
    }
}
