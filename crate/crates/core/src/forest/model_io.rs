//! Versioned little-endian binary encoding of a fitted forest.
//!
//! Layout: magic `LMRF`, u16 version, config, feature dimension, sample
//! count, class list, legend, then each tree as a node array.

use std::path::Path;

use super::tree::{Node, Tree};
use super::{ForestConfig, MaxFeatures, RandomForest};
use crate::error::{Error, Result};
use crate::fsio::{read_bytes, write_atomic};
use crate::raster::Legend;

pub const MODEL_MAGIC: &[u8; 4] = b"LMRF";
pub const MODEL_VERSION: u16 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::ModelFormat(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::ModelFormat("legend name is not utf-8".into()))
    }
}

pub(crate) fn encode(model: &RandomForest) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MODEL_MAGIC);
    w.u16(MODEL_VERSION);
    let c = &model.config;
    w.u32(c.n_trees as u32);
    match c.max_features {
        MaxFeatures::Sqrt => {
            w.u8(0);
            w.u32(0);
        }
        MaxFeatures::Count(k) => {
            w.u8(1);
            w.u32(k as u32);
        }
    }
    w.u32(c.min_samples_leaf as u32);
    w.u32(c.max_depth.map_or(0, |d| d as u32));
    w.u64(c.seed);
    w.u32(model.n_features as u32);
    w.u64(model.n_samples as u64);
    w.u32(model.classes.len() as u32);
    for &cl in &model.classes {
        w.u32(cl);
    }
    w.u32(model.legend.len() as u32);
    for (id, name) in &model.legend {
        w.u32(*id);
        w.str(name);
    }
    w.u32(model.trees.len() as u32);
    for t in &model.trees {
        w.u32(t.nodes.len() as u32);
        for n in &t.nodes {
            w.u32(n.feature);
            w.f64(n.threshold);
            w.u32(n.left);
            w.u32(n.right);
            w.u32(n.value);
        }
    }
    w.0
}

pub(crate) fn decode(bytes: &[u8]) -> Result<RandomForest> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MODEL_MAGIC {
        return Err(Error::ModelFormat("not a model file (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != MODEL_VERSION {
        return Err(Error::ModelFormat(format!(
            "unsupported model version {version}, expected {MODEL_VERSION}"
        )));
    }
    let n_trees = r.u32()? as usize;
    let max_features = match (r.u8()?, r.u32()?) {
        (0, _) => MaxFeatures::Sqrt,
        (1, k) => MaxFeatures::Count(k as usize),
        (tag, _) => return Err(Error::ModelFormat(format!("bad max_features tag {tag}"))),
    };
    let min_samples_leaf = r.u32()? as usize;
    let max_depth = match r.u32()? {
        0 => None,
        d => Some(d as usize),
    };
    let seed = r.u64()?;
    let n_features = r.u32()? as usize;
    let n_samples = r.u64()? as usize;
    let n_classes = r.u32()? as usize;
    let classes = (0..n_classes).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let n_legend = r.u32()? as usize;
    let mut legend = Legend::new();
    for _ in 0..n_legend {
        let id = r.u32()?;
        legend.insert(id, r.str()?);
    }
    let stored_trees = r.u32()? as usize;
    let mut trees = Vec::with_capacity(stored_trees.min(1 << 16));
    for _ in 0..stored_trees {
        let n_nodes = r.u32()? as usize;
        let mut nodes = Vec::with_capacity(n_nodes.min(1 << 20));
        for _ in 0..n_nodes {
            nodes.push(Node {
                feature: r.u32()?,
                threshold: r.f64()?,
                left: r.u32()?,
                right: r.u32()?,
                value: r.u32()?,
            });
        }
        let bad = nodes.iter().any(|n| {
            if n.feature == super::tree::LEAF {
                n.value as usize >= n_classes
            } else {
                n.feature as usize >= n_features
                    || n.left as usize >= nodes.len()
                    || n.right as usize >= nodes.len()
            }
        });
        if nodes.is_empty() || bad {
            return Err(Error::ModelFormat("corrupt tree node array".into()));
        }
        trees.push(Tree { nodes });
    }
    if r.pos != bytes.len() {
        return Err(Error::ModelFormat("trailing bytes after trees".into()));
    }
    if trees.len() != n_trees || classes.len() < 2 {
        return Err(Error::ModelFormat("inconsistent tree or class count".into()));
    }
    Ok(RandomForest {
        config: ForestConfig {
            n_trees,
            max_features,
            min_samples_leaf,
            max_depth,
            seed,
        },
        classes,
        n_features,
        n_samples,
        trees,
        legend,
    })
}

pub fn write_model(model: &RandomForest, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode(model))
}

pub fn read_model(path: impl AsRef<Path>) -> Result<RandomForest> {
    decode(&read_bytes(path.as_ref())?)
}
