//! Single-file checkpoint archive.
//!
//! Layout:
//!
//! ```text
//! CONFAUG-CHECKPOINT
//! schema_version=<u32>
//! [config]
//! key=value                      (one per line, sorted by key)
//! [tensors]
//! count=<n>
//! tensor <name> <dtype> <d0>x<d1>x... <nbytes>\n<nbytes raw little-endian>
//! ...
//! ```
//!
//! Config keys and values are single-line UTF-8 strings. Tensor names never
//! contain whitespace.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &str = "CONFAUG-CHECKPOINT";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub schema_version: u32,
    pub config: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<T>)>,
}

fn bad(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_store(config: BTreeMap<String, String>, store: &ParamStore<T>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            config,
            tensors: store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn config_value(&self, key: &str) -> Result<&str> {
        self.config.get(key).map(String::as_str).ok_or_else(|| bad(format!("missing config key `{key}`")))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "schema_version={}", self.schema_version)?;
        writeln!(w, "[config]")?;
        for (k, v) in &self.config {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(bad(format!("config entry `{k}` is not a single-line key=value")));
            }
            writeln!(w, "{k}={v}")?;
        }
        writeln!(w, "[tensors]")?;
        writeln!(w, "count={}", self.tensors.len())?;
        let mut buf = Vec::new();
        for (name, t) in &self.tensors {
            if name.chars().any(char::is_whitespace) {
                return Err(bad(format!("tensor name `{name}` contains whitespace")));
            }
            buf.clear();
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let dims = if dims.is_empty() { "scalar".to_string() } else { dims.join("x") };
            writeln!(w, "tensor {name} {} {dims} {}", T::DTYPE, buf.len())?;
            w.write_all(&buf)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let next_line = |r: &mut BufReader<R>, line: &mut String| -> Result<()> {
            line.clear();
            if r.read_line(line)? == 0 {
                return Err(bad("unexpected end of archive"));
            }
            while line.ends_with('\n') || line.ends_with('\r') {
                line.pop();
            }
            Ok(())
        };
        next_line(&mut r, &mut line)?;
        if line != MAGIC {
            return Err(bad("not a checkpoint archive"));
        }
        next_line(&mut r, &mut line)?;
        let schema_version: u32 = line
            .strip_prefix("schema_version=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("bad schema_version line"))?;
        if schema_version != SCHEMA_VERSION {
            return Err(bad(format!("unsupported schema version {schema_version}")));
        }
        next_line(&mut r, &mut line)?;
        if line != "[config]" {
            return Err(bad("missing [config] section"));
        }
        let mut config = BTreeMap::new();
        loop {
            next_line(&mut r, &mut line)?;
            if line == "[tensors]" {
                break;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad config line `{line}`")))?;
            config.insert(k.to_string(), v.to_string());
        }
        next_line(&mut r, &mut line)?;
        let count: usize = line
            .strip_prefix("count=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("bad tensor count"))?;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            next_line(&mut r, &mut line)?;
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 5 || parts[0] != "tensor" {
                return Err(bad(format!("bad tensor header `{line}`")));
            }
            let name = parts[1].to_string();
            let dtype = parts[2];
            let shape: Vec<usize> = if parts[3] == "scalar" {
                vec![]
            } else {
                parts[3]
                    .split('x')
                    .map(|d| d.parse().map_err(|_| bad(format!("bad dims in `{line}`"))))
                    .collect::<Result<_>>()?
            };
            let nbytes: usize = parts[4].parse().map_err(|_| bad(format!("bad size in `{line}`")))?;
            let mut raw = vec![0u8; nbytes];
            r.read_exact(&mut raw)?;
            let mut nl = [0u8; 1];
            r.read_exact(&mut nl)?;
            let data: Vec<T> = match dtype {
                "f32" => raw.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
                "f64" => raw.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
                other => return Err(bad(format!("unsupported dtype `{other}`"))),
            };
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        Ok(Self { schema_version, config, tensors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_round_trip_and_cross_dtype_load() {
        let mut store = ParamStore::<f32>::new();
        store.insert("a.weight", Tensor::new(&[2, 3], vec![1.0, -2.5, 3.0, 0.0, 1e-7, 7.0]).unwrap()).unwrap();
        store.insert("a.bias", Tensor::scalar(0.25)).unwrap();
        let mut cfg = BTreeMap::new();
        cfg.insert("model.kind".to_string(), "test".to_string());
        let ck = Checkpoint::from_store(cfg, &store);
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::<f32>::read_from(&bytes[..]).unwrap();
        assert_eq!(back, ck);
        let wide = Checkpoint::<f64>::read_from(&bytes[..]).unwrap();
        assert_eq!(wide.tensors[0].1.data()[1], -2.5);
        assert_eq!(wide.config_value("model.kind").unwrap(), "test");
    }

    #[test]
    fn rejects_foreign_files() {
        assert!(Checkpoint::<f32>::read_from(&b"hello\n"[..]).is_err());
    }
}
