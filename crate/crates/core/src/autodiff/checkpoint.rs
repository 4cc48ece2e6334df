//! Named-tensor container: a header line `name dim...` followed by the
//! row-major values, one tensor row per line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub fn encode(tensors: &BTreeMap<String, Tensor>) -> String {
    let mut out = String::new();
    for (name, t) in tensors {
        out.push_str(name);
        for d in t.shape() {
            let _ = write!(out, " {}", d);
        }
        out.push('\n');
        let cols = t.cols().max(1);
        for row in t.data().chunks(cols) {
            let line: Vec<String> = row.iter().map(|v| format!("{:?}", v)).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
    }
    out
}

pub fn decode(body: &str, file: &str) -> Result<BTreeMap<String, Tensor>> {
    let err = |index: usize, message: String| Error::Parse {
        file: file.to_string(),
        index,
        message,
    };
    let mut out = BTreeMap::new();
    let mut lines = body.lines().enumerate();
    while let Some((i, header)) = lines.next() {
        if header.trim().is_empty() {
            continue;
        }
        let mut parts = header.split_whitespace();
        let name = parts.next().ok_or_else(|| err(i, "empty header".into()))?;
        let shape = parts
            .map(|d| d.parse::<usize>().map_err(|_| err(i, format!("bad dimension {:?}", d))))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let mut values = Vec::with_capacity(count);
        while values.len() < count {
            let (j, line) = lines
                .next()
                .ok_or_else(|| err(i, format!("tensor {} truncated", name)))?;
            for tok in line.split_whitespace() {
                let v = tok
                    .parse::<f64>()
                    .map_err(|_| err(j, format!("bad value {:?}", tok)))?;
                values.push(v);
            }
        }
        if values.len() != count {
            return Err(err(i, format!("tensor {} has {} values, expected {}", name, values.len(), count)));
        }
        if out.insert(name.to_string(), Tensor::new(shape, values)?).is_some() {
            return Err(err(i, format!("duplicate tensor {}", name)));
        }
    }
    Ok(out)
}

pub fn save(tensors: &BTreeMap<String, Tensor>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(tensors)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor>> {
    let path = path.as_ref();
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode(&body, &path.display().to_string())
}
