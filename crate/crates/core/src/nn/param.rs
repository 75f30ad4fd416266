use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};

use sha2::{Digest, Sha256};

use super::tensor::{Real, Tensor};

static NEXT_UID: AtomicUsize = AtomicUsize::new(1);

struct Inner<T: Real> {
    uid: usize,
    name: String,
    value: RwLock<Tensor<T>>,
    trainable: AtomicBool,
}

/// A shared, named weight tensor. Clones refer to the same storage.
#[derive(Clone)]
pub struct Param<T: Real = f32> {
    inner: Arc<Inner<T>>,
}

impl<T: Real> std::fmt::Debug for Param<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Param")
            .field("name", &self.inner.name)
            .field("shape", &self.value().shape())
            .finish()
    }
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            inner: Arc::new(Inner {
                uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
                name: name.into(),
                value: RwLock::new(value),
                trainable: AtomicBool::new(true),
            }),
        }
    }

    pub fn uid(&self) -> usize {
        self.inner.uid
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn value(&self) -> Tensor<T> {
        self.inner.value.read().expect("param lock").clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.value.read().expect("param lock").shape().to_vec()
    }

    pub fn set(&self, value: Tensor<T>) {
        let mut guard = self.inner.value.write().expect("param lock");
        assert_eq!(guard.shape(), value.shape(), "param {} reshaped", self.inner.name);
        *guard = value;
    }

    pub fn update(&self, f: impl FnOnce(&mut Tensor<T>)) {
        f(&mut self.inner.value.write().expect("param lock"));
    }

    pub fn is_trainable(&self) -> bool {
        self.inner.trainable.load(Ordering::Relaxed)
    }

    pub fn set_trainable(&self, on: bool) {
        self.inner.trainable.store(on, Ordering::Relaxed);
    }
}

/// Anything that owns parameters.
pub trait Module<T: Real> {
    fn params(&self) -> Vec<Param<T>>;

    fn set_trainable(&self, on: bool) {
        for p in self.params() {
            p.set_trainable(on);
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value().numel()).sum()
    }
}

/// SHA-256 over parameter names, shapes and little-endian values, in order.
pub fn checksum<T: Real>(params: &[Param<T>]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.name().as_bytes());
        let v = p.value();
        for &d in v.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &x in v.data() {
            h.update(x.f64().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
