//! Named trainable parameters, the registry that collects them, and the
//! checkpoint archive.
//!
//! A checkpoint is a single file: magic, a little-endian u64 giving the
//! length of a JSON index, the index itself, then the raw little-endian
//! element payload. Round-trips are bit-exact.

use std::cell::RefCell;
use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Scalar, Tensor};

const CKPT_MAGIC: &[u8; 8] = b"DSCKPT01";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("parameter {name}: checkpoint shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("parameter {0} missing from checkpoint")]
    Missing(String),
    #[error("duplicate parameter name {0}")]
    DuplicateName(String),
}

struct ParamInner<T: Scalar> {
    name: String,
    value: Tensor<T>,
    grad: Tensor<T>,
    trainable: bool,
}

/// A value/gradient pair with a unique path-style name.
///
/// Cloning shares the underlying storage: the model, the tape and the
/// optimizer all point at the same state.
pub struct Parameter<T: Scalar> {
    inner: Rc<RefCell<ParamInner<T>>>,
}

impl<T: Scalar> Clone for Parameter<T> {
    fn clone(&self) -> Self {
        Self {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Parameter<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        write!(f, "Parameter({}, {:?})", inner.name, inner.value.shape())
    }
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            inner: Rc::new(RefCell::new(ParamInner {
                name: name.into(),
                value,
                grad,
                trainable: true,
            })),
        }
    }

    /// Non-trainable state (e.g. normalization running statistics); saved in
    /// checkpoints, ignored by the optimizer and the tape.
    pub fn buffer(name: impl Into<String>, value: Tensor<T>) -> Self {
        let p = Self::new(name, value);
        p.inner.borrow_mut().trainable = false;
        p
    }

    pub fn name(&self) -> String {
        self.inner.borrow().name.clone()
    }

    pub fn trainable(&self) -> bool {
        self.inner.borrow().trainable
    }

    pub fn set_trainable(&self, trainable: bool) {
        self.inner.borrow_mut().trainable = trainable;
    }

    pub fn value(&self) -> Tensor<T> {
        self.inner.borrow().value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().value.shape().to_vec()
    }

    pub fn set_value(&self, value: Tensor<T>) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.value.shape(), value.shape(), "set_value shape");
        inner.value = value;
    }

    pub fn grad(&self) -> Tensor<T> {
        self.inner.borrow().grad.clone()
    }

    pub fn accumulate_grad(&self, grad: &Tensor<T>) {
        self.inner.borrow_mut().grad.accumulate(grad);
    }

    pub fn zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.grad = Tensor::zeros(inner.value.shape());
    }

    /// Pointer identity, used to avoid double-registration.
    pub fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }
}

/// Ordered collection of every parameter reachable from a model root.
#[derive(Default)]
pub struct ParamRegistry<T: Scalar> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamRegistry<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn register(&mut self, p: &Parameter<T>) {
        debug_assert!(
            !self.params.iter().any(|q| q.name() == p.name()),
            "duplicate parameter name {}",
            p.name()
        );
        self.params.push(p.clone());
    }

    pub fn all(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter().filter(|p| p.trainable())
    }

    pub fn zero_grads(&self) {
        for p in self.trainable() {
            p.zero_grad();
        }
    }

    /// Total trainable element count.
    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|p| p.value().len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name() == name)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        save_checkpoint(path, &self.params)
    }

    pub fn load(&self, path: &Path) -> Result<(), CheckpointError> {
        load_checkpoint(path, &self.params)
    }
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointIndex {
    entries: Vec<IndexEntry>,
}

fn dtype_name<T: Scalar>() -> &'static str {
    if std::mem::size_of::<T>() == 4 {
        "f32"
    } else {
        "f64"
    }
}

fn save_checkpoint<T: Scalar>(path: &Path, params: &[Parameter<T>]) -> Result<(), CheckpointError> {
    let mut seen = std::collections::HashSet::new();
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    for p in params {
        let name = p.name();
        if !seen.insert(name.clone()) {
            return Err(CheckpointError::DuplicateName(name));
        }
        let value = p.value();
        let offset = blob.len() as u64;
        for v in value.data() {
            let x = v.to_f64s();
            if dtype_name::<T>() == "f32" {
                blob.extend_from_slice(&(x as f32).to_le_bytes());
            } else {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
        entries.push(IndexEntry {
            name,
            shape: value.shape().to_vec(),
            dtype: dtype_name::<T>().to_string(),
            offset,
            len: value.len() as u64,
        });
    }
    let index = serde_json::to_vec(&CheckpointIndex { entries })
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(CKPT_MAGIC)?;
        f.write_all(&(index.len() as u64).to_le_bytes())?;
        f.write_all(&index)?;
        f.write_all(&blob)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn load_checkpoint<T: Scalar>(path: &Path, params: &[Parameter<T>]) -> Result<(), CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != CKPT_MAGIC {
        return Err(CheckpointError::Corrupt("bad magic".into()));
    }
    let mut lenb = [0u8; 8];
    lenb.copy_from_slice(&bytes[8..16]);
    let index_len = u64::from_le_bytes(lenb) as usize;
    if bytes.len() < 16 + index_len {
        return Err(CheckpointError::Corrupt("truncated index".into()));
    }
    let index: CheckpointIndex = serde_json::from_slice(&bytes[16..16 + index_len])
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let blob = &bytes[16 + index_len..];

    let elem = std::mem::size_of::<T>();
    for p in params {
        let name = p.name();
        let entry = index
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
        let expected = p.shape();
        if entry.shape != expected {
            return Err(CheckpointError::ShapeMismatch {
                name,
                found: entry.shape.clone(),
                expected,
            });
        }
        if entry.dtype != dtype_name::<T>() {
            return Err(CheckpointError::Corrupt(format!(
                "parameter {name}: dtype {} vs model {}",
                entry.dtype,
                dtype_name::<T>()
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.len as usize * elem;
        if end > blob.len() {
            return Err(CheckpointError::Corrupt(format!(
                "parameter {name}: payload out of bounds"
            )));
        }
        let data: Vec<T> = blob[start..end]
            .chunks_exact(elem)
            .map(|c| {
                if elem == 4 {
                    T::of_f64(f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                } else {
                    T::of_f64(f64::from_le_bytes([
                        c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7],
                    ]))
                }
            })
            .collect();
        p.set_value(Tensor::new(entry.shape.clone(), data));
    }
    Ok(())
}
