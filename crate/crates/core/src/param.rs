//! Trainable parameters, the per-model parameter store, and checkpoints.

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{read_aptn, write_aptn, Float, Shape, Tensor};

struct ParamState<T> {
    id: String,
    value: Tensor<T>,
    grad: Tensor<T>,
    velocity: Option<Tensor<T>>,
}

/// Shared handle to one trainable tensor. Clones alias the same storage, which
/// is how the raw and refined stages share weights.
#[derive(Clone)]
pub struct Parameter<T: Float = f32>(Rc<RefCell<ParamState<T>>>);

impl<T: Float> Parameter<T> {
    pub fn new(id: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter(Rc::new(RefCell::new(ParamState {
            id: id.into(),
            value,
            grad,
            velocity: None,
        })))
    }

    pub fn id(&self) -> String {
        self.0.borrow().id.clone()
    }

    pub fn shape(&self) -> Shape {
        self.0.borrow().value.shape()
    }

    pub fn value(&self) -> Ref<'_, Tensor<T>> {
        Ref::map(self.0.borrow(), |s| &s.value)
    }

    pub fn grad(&self) -> Ref<'_, Tensor<T>> {
        Ref::map(self.0.borrow(), |s| &s.grad)
    }

    pub fn set_value(&self, value: Tensor<T>) -> Result<()> {
        let mut s = self.0.borrow_mut();
        if value.shape() != s.value.shape() {
            return Err(Error::Shape {
                op: "set_value",
                lhs: s.value.shape(),
                rhs: value.shape(),
            });
        }
        s.value = value;
        Ok(())
    }

    /// Mutates a single element; used by finite-difference checks.
    pub fn update(&self, f: impl FnOnce(&mut [T])) {
        f(self.0.borrow_mut().value.data_mut());
    }

    pub fn accumulate_grad(&self, g: &[T]) {
        let mut s = self.0.borrow_mut();
        for (acc, v) in s.grad.data_mut().iter_mut().zip(g) {
            *acc += *v;
        }
    }

    pub fn zero_grad(&self) {
        let mut s = self.0.borrow_mut();
        s.grad.data_mut().fill(T::ZERO);
    }

    pub fn ptr_eq(&self, other: &Parameter<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub(crate) fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Momentum SGD: `v <- m*v + g`, `p <- p - lr*v`.
    fn sgd(&self, lr: T, momentum: T) {
        let mut guard = self.0.borrow_mut();
        let s = &mut *guard;
        let velocity = s
            .velocity
            .get_or_insert_with(|| Tensor::zeros(s.value.shape()));
        for ((p, v), g) in s
            .value
            .data_mut()
            .iter_mut()
            .zip(velocity.data_mut())
            .zip(s.grad.data())
        {
            *v = momentum * *v + *g;
            *p -= lr * *v;
        }
    }
}

impl<T: Float> std::fmt::Debug for Parameter<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = self.0.borrow();
        write!(f, "Parameter({}, {})", s.id, s.value.shape())
    }
}

/// Initialisation rule for a new parameter.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    /// Normal with std `sqrt(2 / fan_in)`.
    He { fan_in: usize },
    /// Normal with the given std.
    Normal(f64),
}

/// Owns every parameter of a model, keyed by unique id, in creation order.
pub struct ParamStore<T: Float = f32> {
    params: Vec<Parameter<T>>,
    ids: HashSet<String>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            params: Vec::new(),
            ids: HashSet::new(),
        }
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create(&mut self, id: &str, shape: Shape, init: Init, rng: &mut Rng) -> Result<Parameter<T>> {
        if !self.ids.insert(id.to_string()) {
            return Err(Error::Config(format!("duplicate parameter id `{id}`")));
        }
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::He { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                Tensor::from_fn(shape, |_| T::from_f64(rng.normal() * std))
            }
            Init::Normal(std) => Tensor::from_fn(shape, |_| T::from_f64(rng.normal() * std)),
        };
        let p = Parameter::new(id, value);
        self.params.push(p.clone());
        Ok(p)
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn get(&self, id: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.0.borrow().id == id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.shape().numel()).sum()
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// Copies values from a store with the same manifest (e.g. an `f32`
    /// model into its `f64` twin).
    pub fn copy_from<U: Float>(&self, other: &ParamStore<U>) -> Result<()> {
        for (dst, src) in self.params.iter().zip(other.params()) {
            if dst.id() != src.id() {
                return Err(Error::Checkpoint {
                    id: dst.id(),
                    reason: format!("source has `{}` in this position", src.id()),
                });
            }
            dst.set_value(src.value().cast())?;
        }
        Ok(())
    }
}

/// One momentum-SGD step over every parameter.
pub fn sgd_step<T: Float>(params: &[Parameter<T>], lr: f64, momentum: f64) {
    let (lr, m) = (T::from_f64(lr), T::from_f64(momentum));
    for p in params {
        p.sgd(lr, m);
    }
}

/// Cosine annealing from `lr0` at `t = 0` down to zero at `t = total`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = t.min(total) as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t / total as f64).cos())
}

pub const MANIFEST_FILE: &str = "manifest.txt";

fn shape_text(s: Shape) -> String {
    let [n, c, h, w] = s.0;
    format!("{n},{c},{h},{w}")
}

impl ParamStore<f32> {
    /// Writes one APTN file per parameter plus a `id<TAB>file<TAB>shape` manifest.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        for (i, p) in self.params.iter().enumerate() {
            let file = format!("{i:04}.aptn");
            write_aptn(&dir.join(&file), &p.value())?;
            writeln!(manifest, "{}\t{}\t{}", p.id(), file, shape_text(p.shape())).unwrap();
        }
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, manifest).map_err(|e| Error::io(path, e))
    }

    /// Loads parameters saved by [`save_checkpoint`](Self::save_checkpoint).
    /// The manifest must list exactly this store's ids and shapes, in order.
    pub fn load_checkpoint(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let entries: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        for (i, p) in self.params.iter().enumerate() {
            let id = p.id();
            let Some(line) = entries.get(i) else {
                return Err(Error::Checkpoint {
                    id,
                    reason: "missing from manifest".into(),
                });
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    path: path.clone(),
                    line: i + 1,
                    reason: "expected `id<TAB>file<TAB>shape`".into(),
                });
            }
            if fields[0] != id {
                return Err(Error::Checkpoint {
                    id,
                    reason: format!("manifest has `{}` in this position", fields[0]),
                });
            }
            if fields[2] != shape_text(p.shape()) {
                return Err(Error::Checkpoint {
                    id,
                    reason: format!("expected shape {}, manifest says {}", p.shape(), fields[2]),
                });
            }
            let t = read_aptn(&dir.join(fields[1]))?;
            if t.shape() != p.shape() {
                return Err(Error::Checkpoint {
                    id,
                    reason: format!("expected shape {}, file holds {}", p.shape(), t.shape()),
                });
            }
            p.set_value(t)?;
        }
        if entries.len() > self.params.len() {
            let extra = entries[self.params.len()].split('\t').next().unwrap_or("");
            return Err(Error::Checkpoint {
                id: extra.to_string(),
                reason: "not present in model".into(),
            });
        }
        Ok(())
    }
}
