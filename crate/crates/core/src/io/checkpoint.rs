//! Checkpoints: a human-readable config header followed by the raw tensors.
//!
//! Layout, line-oriented until the binary payloads begin:
//!
//! ```text
//! BXCKPT1
//! config_len <bytes>
//! <config as TOML, exactly that many bytes>
//! tensors <count>
//! tensor <name> <dim0> [<dim1>]      (repeated per tensor)
//! <numel * 8 bytes of little-endian f64>
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{tensor_plan, ModelConfig, ModelParams, NamedTensor};

const CHECKPOINT_MAGIC: &str = "BXCKPT1";

pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &ModelParams) -> Result<()> {
    let config_toml =
        toml::to_string(config).map_err(|e| Error::Format(format!("config serialization: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(format!("{CHECKPOINT_MAGIC}\n").as_bytes());
    buf.extend_from_slice(format!("config_len {}\n", config_toml.len()).as_bytes());
    buf.extend_from_slice(config_toml.as_bytes());
    buf.extend_from_slice(format!("tensors {}\n", params.tensors.len()).as_bytes());
    for t in &params.tensors {
        let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        buf.extend_from_slice(format!("tensor {} {}\n", t.name, dims.join(" ")).as_bytes());
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct LineReader<'a> {
    bytes: &'a [u8],
    off: usize,
    path: &'a Path,
}

impl<'a> LineReader<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let start = self.off;
        while self.off < self.bytes.len() && self.bytes[self.off] != b'\n' {
            self.off += 1;
        }
        if self.off >= self.bytes.len() {
            return Err(Error::Format(format!(
                "{}: truncated checkpoint",
                self.path.display()
            )));
        }
        let line = std::str::from_utf8(&self.bytes[start..self.off])
            .map_err(|_| Error::Format(format!("{}: invalid utf-8 header", self.path.display())))?;
        self.off += 1;
        Ok(line)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.off + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "{}: truncated checkpoint",
                self.path.display()
            )));
        }
        let s = &self.bytes[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let bytes = fs::read(path)?;
    let mut r = LineReader {
        bytes: &bytes,
        off: 0,
        path,
    };
    if r.line()? != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "{} is not a checkpoint",
            path.display()
        )));
    }
    let config_len: usize = r
        .line()?
        .strip_prefix("config_len ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("{}: bad config_len line", path.display())))?;
    let config_text = std::str::from_utf8(r.take(config_len)?)
        .map_err(|_| Error::Format(format!("{}: invalid utf-8 config", path.display())))?;
    let config: ModelConfig = toml::from_str(config_text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let n_tensors: usize = r
        .line()?
        .strip_prefix("tensors ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("{}: bad tensors line", path.display())))?;

    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let header = r.line()?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("tensor") {
            return Err(Error::Format(format!(
                "{}: expected tensor header, got {header:?}",
                path.display()
            )));
        }
        let name = parts
            .next()
            .ok_or_else(|| {
                Error::Format(format!("{}: tensor header without name", path.display()))
            })?
            .to_string();
        let shape: Vec<usize> = parts
            .map(|p| {
                p.parse::<usize>()
                    .map_err(|_| Error::Format(format!("{}: bad dimension {p:?}", path.display())))
            })
            .collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 8)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(NamedTensor { name, shape, data });
    }
    if r.off != bytes.len() {
        return Err(Error::Format(format!("{}: trailing bytes", path.display())));
    }

    // The stored tensors must match the config's plan exactly.
    let plan = tensor_plan(&config);
    if plan.len() != tensors.len() {
        return Err(Error::Format(format!(
            "{}: {} tensors stored, config implies {}",
            path.display(),
            tensors.len(),
            plan.len()
        )));
    }
    for (t, (name, shape, _)) in tensors.iter().zip(&plan) {
        if &t.name != name || &t.shape != shape {
            return Err(Error::Format(format!(
                "{}: tensor {} {:?} does not match plan entry {name} {shape:?}",
                path.display(),
                t.name,
                t.shape
            )));
        }
    }
    Ok((config, ModelParams { tensors }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ModelConfig {
        ModelConfig {
            layers: 2,
            hidden_dim: 4,
            pe_dim: 3,
            pool_ratio: 0.7,
            gat_heads: 2,
            mhsa_heads: 2,
            dropout: 0.2,
            num_classes: 2,
            knn_k: 3,
            seed: 5,
            input_dim: 6,
            leaky_slope: 0.2,
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = config();
        let params = ModelParams::init(&cfg, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bxc");
        save_checkpoint(&path, &cfg, &params).unwrap();
        let (cfg2, params2) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(params, params2);
    }

    #[test]
    fn checkpoint_bytes_are_deterministic() {
        let cfg = config();
        let params = ModelParams::init(&cfg, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.bxc");
        let b = dir.path().join("b.bxc");
        save_checkpoint(&a, &cfg, &params).unwrap();
        save_checkpoint(&b, &cfg, &params).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn header_is_human_readable() {
        let cfg = config();
        let params = ModelParams::init(&cfg, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bxc");
        save_checkpoint(&path, &cfg, &params).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let head = String::from_utf8_lossy(&bytes[..200]);
        assert!(head.starts_with("BXCKPT1\n"));
        assert!(head.contains("hidden_dim = 4"));
    }

    #[test]
    fn rejects_plan_mismatch() {
        let cfg = config();
        let params = ModelParams::init(&cfg, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bxc");
        // Store with a config whose plan disagrees with the tensors.
        let other = ModelConfig {
            hidden_dim: 8,
            ..cfg
        };
        save_checkpoint(&path, &other, &params).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }
}
