//! Plain-text parameter checkpoints.
//!
//! ```text
//! cifsl-checkpoint 1
//! meta <key> <value to end of line>
//! param <name> <rows> <cols>
//! <cols values>          (repeated rows times)
//! ```
//!
//! Values are written with Rust's shortest round-trip formatting, so a
//! write/read cycle reproduces every `f64` bit for bit.

use std::fmt::Write as _;
use std::io::BufRead;

use ndarray::Array2;

use super::Module;
use crate::error::{Error, Result};

const MAGIC: &str = "cifsl-checkpoint 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub params: Vec<(String, Array2<f64>)>,
}

impl Checkpoint {
    pub fn from_module<M: Module + ?Sized>(module: &M) -> Self {
        Self {
            meta: Vec::new(),
            params: module
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.push((key.to_string(), value.into()));
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn param(&self, name: &str) -> Option<&Array2<f64>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    /// Copies values into `module`, matching parameters by name and shape.
    pub fn load_into<M: Module + ?Sized>(&self, module: &mut M) -> Result<()> {
        for p in module.params_mut() {
            let v = self
                .param(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            if v.dim() != p.value.dim() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    v.dim(),
                    p.value.dim()
                )));
            }
            p.value.assign(v);
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(MAGIC);
        s.push('\n');
        for (k, v) in &self.meta {
            let _ = writeln!(s, "meta {k} {v}");
        }
        for (name, value) in &self.params {
            let _ = writeln!(s, "param {name} {} {}", value.nrows(), value.ncols());
            for row in value.rows() {
                let line: Vec<String> = row.iter().map(f64::to_string).collect();
                s.push_str(&line.join(" "));
                s.push('\n');
            }
        }
        s
    }

    pub fn parse<R: BufRead>(input: R) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Checkpoint(format!("line {line}: {msg}"));
        let mut lines = input.lines().enumerate();
        match lines.next() {
            Some((_, Ok(l))) if l == MAGIC => {}
            _ => return Err(bad(1, "missing checkpoint header")),
        }
        let mut ckpt = Checkpoint::default();
        while let Some((i, line)) = lines.next() {
            let line = line?;
            let lineno = i + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                ckpt.meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("param ") {
                let fields: Vec<&str> = rest.split(' ').collect();
                let [name, rows, cols] = fields.as_slice() else {
                    return Err(bad(lineno, "malformed param line"));
                };
                let rows: usize = rows.parse().map_err(|_| bad(lineno, "bad row count"))?;
                let cols: usize = cols.parse().map_err(|_| bad(lineno, "bad column count"))?;
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    let (j, row) = lines
                        .next()
                        .ok_or_else(|| bad(lineno, "truncated parameter"))?;
                    let row = row?;
                    let before = data.len();
                    for tok in row.split_whitespace() {
                        data.push(tok.parse::<f64>().map_err(|_| bad(j + 1, "bad value"))?);
                    }
                    if data.len() - before != cols {
                        return Err(bad(j + 1, "wrong number of values"));
                    }
                }
                let value = Array2::from_shape_vec((rows, cols), data)
                    .map_err(|e| bad(lineno, &e.to_string()))?;
                ckpt.params.push((name.to_string(), value));
            } else {
                return Err(bad(lineno, "unexpected line"));
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
