use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use super::DiffError;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named parameter tensors laid out back to back in one flat vector.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    values: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its slot.
    ///
    /// Panics on a duplicate name.
    pub fn insert(&mut self, name: &str, value: Tensor) -> usize {
        assert!(self.slot(name).is_none(), "duplicate parameter {name}");
        let entry = ParamEntry {
            name: name.to_string(),
            rows: value.rows(),
            cols: value.cols(),
            offset: self.values.len(),
        };
        self.values.extend_from_slice(value.data());
        self.entries.push(entry);
        self.entries.len() - 1
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn tensor(&self, slot: usize) -> Tensor {
        let e = &self.entries[slot];
        Tensor::from_vec(e.rows, e.cols, self.values[e.offset..e.offset + e.len()].to_vec())
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        self.slot(name).map(|s| self.tensor(s))
    }

    /// Overwrites an existing tensor in place; shapes must agree.
    pub fn set(&mut self, name: &str, value: &Tensor) {
        let slot = self.slot(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        let e = &self.entries[slot];
        assert_eq!([e.rows, e.cols], value.shape(), "shape mismatch for {name}");
        self.values[e.offset..e.offset + e.len()].copy_from_slice(value.data());
    }

    pub fn flat(&self) -> &[f64] {
        &self.values
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn num_values(&self) -> usize {
        self.values.len()
    }

    /// Replaces every value; `values` must match [`Self::num_values`].
    pub fn set_flat(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.values.len(), "flat length mismatch");
        self.values.copy_from_slice(values);
    }

    /// Parameter name and in-tensor index for a flat coordinate.
    pub fn locate(&self, flat_index: usize) -> (&str, usize) {
        let e = self
            .entries
            .iter()
            .find(|e| flat_index >= e.offset && flat_index < e.offset + e.len())
            .expect("flat index out of range");
        (&e.name, flat_index - e.offset)
    }

    /// Registers every tensor as a trainable leaf, in slot order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        (0..self.entries.len()).map(|s| g.param(s, self.tensor(s))).collect()
    }

    /// Collects the gradients of `loss` into one flat vector in store layout.
    pub fn flat_gradient(&self, g: &Graph, loss: Var) -> Vec<f64> {
        let grads = g.backward(loss);
        let mut flat = vec![0.0; self.values.len()];
        for &(slot, var) in g.params() {
            if let Some(t) = grads.get(var) {
                let e = &self.entries[slot];
                for (o, v) in flat[e.offset..e.offset + e.len()].iter_mut().zip(t.data()) {
                    *o += v;
                }
            }
        }
        flat
    }

    /// Writes the text header (`name rowsxcols offset` per line, preceded by
    /// a count line and any `#` comment lines) followed by the little-endian
    /// `f64` payload.
    pub fn write_to<W: Write>(&self, mut w: W, comments: &[String]) -> std::io::Result<()> {
        writeln!(w, "params {} {}", self.entries.len(), self.values.len())?;
        for c in comments {
            writeln!(w, "# {c}")?;
        }
        for e in &self.entries {
            writeln!(w, "{} {}x{} {}", e.name, e.rows, e.cols, e.offset)?;
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn save(&self, path: &Path, comments: &[String]) -> Result<(), DiffError> {
        let f = File::create(path).map_err(|e| DiffError::io(path, e))?;
        self.write_to(BufWriter::new(f), comments).map_err(|e| DiffError::io(path, e))
    }

    pub fn read_from<R: Read>(r: R) -> Result<(Self, Vec<String>), DiffError> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let bad = |msg: String| DiffError::Format(msg);
        r.read_line(&mut line).map_err(|e| bad(e.to_string()))?;
        let mut head = line.split_whitespace();
        if head.next() != Some("params") {
            return Err(bad("missing `params` header line".into()));
        }
        let count: usize = head.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad parameter count".into()))?;
        let total: usize = head.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad value count".into()))?;
        let mut comments = Vec::new();
        let mut entries = Vec::with_capacity(count);
        while entries.len() < count {
            line.clear();
            if r.read_line(&mut line).map_err(|e| bad(e.to_string()))? == 0 {
                return Err(bad("header truncated".into()));
            }
            let trimmed = line.trim_end_matches('\n');
            if let Some(c) = trimmed.strip_prefix("# ") {
                comments.push(c.to_string());
                continue;
            }
            let fields: Vec<&str> = trimmed.split(' ').collect();
            let [name, shape, offset] = fields[..] else {
                return Err(bad(format!("bad entry line `{trimmed}`")));
            };
            let (rows, cols) = shape
                .split_once('x')
                .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
                .ok_or_else(|| bad(format!("bad shape `{shape}`")))?;
            let offset = offset.parse().map_err(|_| bad(format!("bad offset `{offset}`")))?;
            entries.push(ParamEntry { name: name.to_string(), rows, cols, offset });
        }
        let mut expected = 0;
        for e in &entries {
            if e.offset != expected {
                return Err(bad(format!("non-contiguous offset for {}", e.name)));
            }
            expected += e.len();
        }
        if expected != total {
            return Err(bad(format!("entries cover {expected} values, header says {total}")));
        }
        let mut bytes = Vec::with_capacity(total * 8);
        r.read_to_end(&mut bytes).map_err(|e| bad(e.to_string()))?;
        if bytes.len() != total * 8 {
            return Err(bad(format!("payload has {} bytes, expected {}", bytes.len(), total * 8)));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok((Self { entries, values }, comments))
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<String>), DiffError> {
        let f = File::open(path).map_err(|e| DiffError::io(path, e))?;
        Self::read_from(f)
    }
}
