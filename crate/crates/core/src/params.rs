//! Named parameter tensors, their binding onto a tape, and the checkpoint
//! file format.
//!
//! A checkpoint is two files: `<path>` holds every tensor as little-endian
//! `f64` values back to back, and `<path>.index` is a text index with one
//! `name<TAB>shape<TAB>byte_offset` line per tensor (shape written as
//! `d0xd1x...`). Tensors are stored in name order, so saving the same store
//! twice is byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

const INDEX_HEADER: &str = "# partleak checkpoint v1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Copies every entry under `prefix.` into a new store.
    pub fn with_prefix(&self, prefix: &str) -> Self {
        let params = self.params.iter().map(|(k, v)| (format!("{prefix}.{k}"), v.clone())).collect();
        Self { params }
    }

    /// Entries under `prefix.`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> Self {
        let p = format!("{prefix}.");
        let params = self
            .params
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .collect();
        Self { params }
    }

    pub fn extend(&mut self, other: Self) {
        self.params.extend(other.params);
    }

    /// Places every tensor on the tape; `trainable(name)` decides which ones
    /// require gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable(k))))
            .collect();
        Bound { vars }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bin = Vec::with_capacity(self.numel() * 8);
        let mut index = String::from(INDEX_HEADER);
        index.push('\n');
        for (name, t) in &self.params {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            index.push_str(&format!("{name}\t{}\t{}\n", shape.join("x"), bin.len()));
            for v in t.data() {
                bin.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::File::create(path)?.write_all(&bin)?;
        fs::write(index_path(path), index)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bin = fs::read(path)?;
        let index = fs::read_to_string(index_path(path))?;
        let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
        let mut lines = index.lines();
        if lines.next() != Some(INDEX_HEADER) {
            return Err(bad("missing index header".into()));
        }
        let mut params = BTreeMap::new();
        let mut expected_offset = 0usize;
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split('\t').collect();
            let [name, shape, offset] = fields[..] else {
                return Err(bad(format!("malformed index line `{line}`")));
            };
            let shape: Vec<usize> = shape
                .split('x')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(format!("bad shape for `{name}`")))?;
            let offset: usize = offset.parse().map_err(|_| bad(format!("bad offset for `{name}`")))?;
            if offset != expected_offset {
                return Err(bad(format!("offset {offset} for `{name}`, expected {expected_offset}")));
            }
            let n: usize = shape.iter().product();
            let end = offset + n * 8;
            if end > bin.len() {
                return Err(bad(format!("`{name}` runs past the end of the data file")));
            }
            let data = bin[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.insert(name.to_string(), Tensor::new(&shape, data).map_err(|e| bad(e.to_string()))?);
            expected_offset = end;
        }
        if expected_offset != bin.len() {
            return Err(bad(format!("{} trailing bytes", bin.len() - expected_offset)));
        }
        Ok(Self { params })
    }
}

pub fn index_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".index");
    PathBuf::from(s)
}

/// Parameters placed on a tape, addressable by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn scope<'a>(&'a self, prefix: &str) -> Scope<'a> {
        Scope { bound: self, prefix: format!("{prefix}.") }
    }

    pub fn root(&self) -> Scope<'_> {
        Scope { bound: self, prefix: String::new() }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients of every bound parameter, zero where none flowed.
    pub fn gradients(&self, tape: &Tape, grads: &Gradients) -> ParamStore {
        let params = self
            .vars
            .iter()
            .map(|(k, &v)| (k.clone(), grads.wrt(v, tape.value(v))))
            .collect();
        ParamStore { params }
    }
}

impl FromIterator<(String, Var)> for Bound {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self { vars: iter.into_iter().collect() }
    }
}

/// A name-prefixed view into a [`Bound`].
#[derive(Clone, Debug)]
pub struct Scope<'a> {
    bound: &'a Bound,
    prefix: String,
}

impl Scope<'_> {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.bound.get(&format!("{}{name}", self.prefix))
    }

    pub fn scope(&self, name: &str) -> Scope<'_> {
        Scope { bound: self.bound, prefix: format!("{}{name}.", self.prefix) }
    }
}
