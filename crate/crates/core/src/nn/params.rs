//! Named parameter tensors with paired gradient buffers, plus the
//! checkpoint file format.
//!
//! A checkpoint is a plain-text manifest followed by raw little-endian
//! `f64` values:
//!
//! ```text
//! hybrid-policy-checkpoint 1
//! kind planner
//! config_hash 3f2a...
//! meta n_bins 10
//! param encoder.0.w 14 128
//! param encoder.0.b 1 128
//! end
//! <rows*cols f64 LE for each param, manifest order>
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};

use ndarray::Array2;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    grads: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate param {name}");
        self.grads.push(Array2::zeros(value.raw_dim()));
        self.values.push(value);
        self.names.push(name);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Array2<f64> {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn scale_grads(&mut self, s: f64) {
        for g in &mut self.grads {
            g.mapv_inplace(|v| v * s);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values
            .iter()
            .chain(&self.grads)
            .all(|a| a.iter().all(|v| v.is_finite()))
    }

    pub fn grads_finite(&self) -> bool {
        self.grads.iter().all(|a| a.iter().all(|v| v.is_finite()))
    }

    /// All values flattened in registration order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.values.iter().flat_map(|a| a.iter().copied()).collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.grads.iter().flat_map(|a| a.iter().copied()).collect()
    }

    pub fn set_flat_values(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Shape(format!(
                "expected {} scalars, got {}",
                self.num_scalars(),
                flat.len()
            )));
        }
        let mut off = 0;
        for a in &mut self.values {
            for v in a.iter_mut() {
                *v = flat[off];
                off += 1;
            }
        }
        Ok(())
    }

    pub fn save<W: Write>(&self, mut w: W, header: &CheckpointHeader) -> Result<()> {
        writeln!(w, "{MAGIC} {VERSION}")?;
        writeln!(w, "kind {}", header.kind)?;
        writeln!(w, "config_hash {}", header.config_hash)?;
        for (k, v) in &header.meta {
            writeln!(w, "meta {k} {v}")?;
        }
        for (name, a) in self.names.iter().zip(&self.values) {
            writeln!(w, "param {} {} {}", name, a.nrows(), a.ncols())?;
        }
        writeln!(w, "end")?;
        for a in &self.values {
            for v in a.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Read a checkpoint into this store. Names and shapes must match the
    /// store's registered parameters exactly.
    pub fn load<R: Read>(&mut self, r: R) -> Result<CheckpointHeader> {
        let (header, entries, mut reader) = read_manifest(r)?;
        if entries.len() != self.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} params, model expects {}",
                entries.len(),
                self.len()
            )));
        }
        for (i, (name, rows, cols)) in entries.iter().enumerate() {
            let a = &self.values[i];
            if name != &self.names[i] || *rows != a.nrows() || *cols != a.ncols() {
                return Err(Error::Config(format!(
                    "checkpoint param {name} {rows}x{cols} does not match model param {} {}x{}",
                    self.names[i],
                    a.nrows(),
                    a.ncols()
                )));
            }
        }
        let mut buf = [0u8; 8];
        for a in &mut self.values {
            for v in a.iter_mut() {
                reader
                    .read_exact(&mut buf)
                    .map_err(|e| Error::Parse(format!("truncated checkpoint body: {e}")))?;
                *v = f64::from_le_bytes(buf);
            }
        }
        Ok(header)
    }
}

const MAGIC: &str = "hybrid-policy-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointHeader {
    pub kind: String,
    pub config_hash: String,
    pub meta: BTreeMap<String, String>,
}

/// Parse only the manifest of a checkpoint.
pub fn read_checkpoint_header<R: Read>(r: R) -> Result<CheckpointHeader> {
    read_manifest(r).map(|(h, _, _)| h)
}

type Manifest<R> = (CheckpointHeader, Vec<(String, usize, usize)>, BufReader<R>);

fn read_manifest<R: Read>(r: R) -> Result<Manifest<R>> {
    let mut reader = BufReader::new(r);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let mut first = line.split_whitespace();
    if first.next() != Some(MAGIC) {
        return Err(Error::Parse("not a checkpoint file (bad magic)".into()));
    }
    match first.next().map(str::parse::<u32>) {
        Some(Ok(VERSION)) => {}
        other => return Err(Error::Parse(format!("unsupported checkpoint version {other:?}"))),
    }
    let mut header = CheckpointHeader::default();
    let mut entries = Vec::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::Parse("checkpoint manifest missing `end`".into()));
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["end"] => break,
            ["kind"] => header.kind.clear(),
            ["kind", k] => header.kind = k.to_string(),
            ["config_hash"] => header.config_hash.clear(),
            ["config_hash", h] => header.config_hash = h.to_string(),
            ["meta", k, v] => {
                header.meta.insert(k.to_string(), v.to_string());
            }
            ["param", name, rows, cols] => {
                let parse = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|_| Error::Parse(format!("bad dimension `{s}`")))
                };
                entries.push((name.to_string(), parse(rows)?, parse(cols)?));
            }
            _ => return Err(Error::Parse(format!("bad manifest line `{}`", line.trim()))),
        }
    }
    Ok((header, entries, reader))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn checkpoint_round_trip() {
        let mut ps = ParamStore::new();
        ps.add("a", array![[1.0, 2.0], [3.0, -4.5]]);
        ps.add("b", array![[f64::MIN_POSITIVE, 1e300, -0.0]]);
        let header = CheckpointHeader {
            kind: "test".into(),
            config_hash: "abc".into(),
            meta: [("n_bins".to_string(), "10".to_string())].into(),
        };
        let mut buf = Vec::new();
        ps.save(&mut buf, &header).unwrap();

        let mut other = ps.clone();
        other.set_flat_values(&[0.0; 7]).unwrap();
        let h = other.load(buf.as_slice()).unwrap();
        assert_eq!(h, header);
        assert_eq!(other.flat_values(), ps.flat_values());
    }

    #[test]
    fn checkpoint_shape_mismatch() {
        let mut ps = ParamStore::new();
        ps.add("a", Array2::zeros((2, 2)));
        let mut buf = Vec::new();
        ps.save(&mut buf, &CheckpointHeader::default()).unwrap();
        let mut other = ParamStore::new();
        other.add("a", Array2::zeros((2, 3)));
        assert!(matches!(other.load(buf.as_slice()), Err(Error::Config(_))));
    }

    #[test]
    fn bad_magic() {
        let mut ps = ParamStore::new();
        assert!(matches!(ps.load(&b"garbage\n"[..]), Err(Error::Parse(_))));
    }

    #[test]
    fn grads_match_values() {
        let mut ps = ParamStore::new();
        let id = ps.add("w", Array2::ones((3, 4)));
        assert_eq!(ps.grad(id).dim(), ps.value(id).dim());
        assert!(ps.all_finite());
    }
}
