//! Named-tensor checkpoint files.
//!
//! Layout:
//!
//! ```text
//! CKPT v1 <meta count> <tensor count>
//! meta <key> <value>            (one line each)
//! tensor <name> <d0> <d1> ...   (one line each, in payload order)
//! <TNSR v1 payload>...           (one per tensor line)
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::net::SegNet;
use crate::engine::{OptimizerState, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push((name.into(), t.cast()));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Store every parameter of `net` under `prefix.`.
    pub fn insert_net<T: Scalar, N: SegNet<T>>(&mut self, prefix: &str, net: &N) {
        for p in net.params().iter() {
            self.insert(format!("{prefix}.{}", p.name), &p.value);
        }
    }

    /// Overwrite the parameters of `net` from entries under `prefix.`.
    pub fn load_net<T: Scalar, N: SegNet<T>>(&self, prefix: &str, net: &mut N) -> Result<()> {
        for p in net.params_mut().params_mut() {
            let key = format!("{prefix}.{}", p.name);
            let t = self
                .tensor(&key)
                .ok_or_else(|| bad(format!("missing tensor {key}")))?;
            if t.shape() != p.value.shape() {
                return Err(bad(format!(
                    "{key}: stored {:?}, expected {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.cast();
        }
        Ok(())
    }

    pub fn insert_optimizer<T: Scalar>(&mut self, prefix: &str, st: &OptimizerState<T>) {
        self.set_meta(&format!("{prefix}.step"), st.step);
        for (i, m) in st.first.iter().enumerate() {
            self.insert(format!("{prefix}.first.{i}"), m);
        }
        for (i, v) in st.second.iter().enumerate() {
            self.insert(format!("{prefix}.second.{i}"), v);
        }
    }

    pub fn load_optimizer<T: Scalar>(&self, prefix: &str, st: &mut OptimizerState<T>) -> Result<()> {
        st.step = self
            .meta(&format!("{prefix}.step"))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(format!("missing {prefix}.step")))?;
        let collect = |slot: &str| -> Vec<Tensor<T>> {
            (0..)
                .map_while(|i| self.tensor(&format!("{prefix}.{slot}.{i}")))
                .map(|t| t.cast())
                .collect()
        };
        st.first = collect("first");
        st.second = collect("second");
        Ok(())
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let io = |e: std::io::Error| bad(e.to_string());
        writeln!(out, "CKPT v1 {} {}", self.meta.len(), self.tensors.len()).map_err(io)?;
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(bad(format!("unencodable meta entry {k:?}")));
            }
            writeln!(out, "meta {k} {v}").map_err(io)?;
        }
        for (name, t) in &self.tensors {
            if name.contains(char::is_whitespace) {
                return Err(bad(format!("unencodable tensor name {name:?}")));
            }
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            writeln!(out, "tensor {name} {}", dims.join(" ")).map_err(io)?;
        }
        for (_, t) in &self.tensors {
            t.write_tnsr(&mut out).map_err(io)?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(mut input: R) -> Result<Self> {
        let mut line = String::new();
        let mut next_line = |input: &mut R| -> Result<String> {
            line.clear();
            input.read_line(&mut line).map_err(|e| bad(e.to_string()))?;
            Ok(line.trim_end_matches('\n').to_string())
        };
        let header = next_line(&mut input)?;
        let parts: Vec<&str> = header.split(' ').collect();
        let (n_meta, n_tensors) = match parts[..] {
            ["CKPT", "v1", m, t] => (
                m.parse::<usize>().map_err(|e| bad(e.to_string()))?,
                t.parse::<usize>().map_err(|e| bad(e.to_string()))?,
            ),
            _ => return Err(bad(format!("bad header {header:?}"))),
        };
        let mut ck = Checkpoint::new();
        for _ in 0..n_meta {
            let l = next_line(&mut input)?;
            let rest = l
                .strip_prefix("meta ")
                .ok_or_else(|| bad(format!("expected meta line, got {l:?}")))?;
            let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
            ck.meta.insert(k.to_string(), v.to_string());
        }
        let mut manifest = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let l = next_line(&mut input)?;
            let mut words = l.split(' ');
            if words.next() != Some("tensor") {
                return Err(bad(format!("expected tensor line, got {l:?}")));
            }
            let name = words
                .next()
                .ok_or_else(|| bad("tensor line without name"))?
                .to_string();
            let shape = words
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(e.to_string()))?;
            manifest.push((name, shape));
        }
        for (name, shape) in manifest {
            let t = Tensor::<f32>::read_tnsr(&mut input)?;
            if t.shape() != shape {
                return Err(bad(format!("{name}: manifest {shape:?}, payload {:?}", t.shape())));
            }
            ck.tensors.push((name, t));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(f))
    }
}
