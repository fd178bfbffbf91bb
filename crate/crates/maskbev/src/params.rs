//! Named parameter storage and the per-step forward context.
//!
//! Parameters live outside any tape as plain buffers. Each training step
//! opens a [`Forward`] context, which lazily registers every touched
//! parameter as a tape leaf (once per step, so gradients accumulate on a
//! single node) and maps leaf gradients back to parameter names after the
//! backward pass.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Gradients, Scalar, Tape, Tensor};

#[derive(Clone)]
pub struct Parameter<T: Scalar> {
    pub data: Arc<Vec<T>>,
    pub shape: Vec<usize>,
}

/// Ordered map of named parameters; iteration order is insertion order and
/// is the canonical order for checkpoints and optimizer updates.
#[derive(Clone, Default)]
pub struct ParamStore<T: Scalar> {
    entries: IndexMap<String, Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, data: Vec<T>, shape: &[usize]) {
        let name = name.into();
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "param {name}: buffer length does not match shape {shape:?}"
        );
        let prev = self.entries.insert(
            name.clone(),
            Parameter {
                data: Arc::new(data),
                shape: shape.to_vec(),
            },
        );
        assert!(prev.is_none(), "param {name} registered twice");
    }

    pub fn get(&self, name: &str) -> &Parameter<T> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn tensor(&self, name: &str) -> Tensor<T> {
        let p = self.get(name);
        Tensor::from_vec(p.data.as_ref().clone(), &p.shape)
    }

    /// Replace a parameter's buffer, keeping its shape.
    pub fn set_data(&mut self, name: &str, data: Vec<T>) {
        let p = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(data.len(), p.data.len(), "param {name}: length change");
        p.data = Arc::new(data);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.data.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter<T>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }
}

enum ParamSource<'a, T: Scalar> {
    /// Store-backed: parameters become tape leaves on first touch.
    Store(&'a ParamStore<T>),
    /// Tensor-backed: parameters come pre-built (the gradient-check harness
    /// passes its own leaves or plain perturbed tensors here).
    Map(IndexMap<String, Tensor<T>>),
}

/// One forward pass: a fresh tape plus the parameter leaves it has seen.
pub struct Forward<'a, T: Scalar> {
    tape: Rc<Tape<T>>,
    source: ParamSource<'a, T>,
    leaves: RefCell<IndexMap<String, Tensor<T>>>,
    train: bool,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(store: &'a ParamStore<T>, train: bool) -> Self {
        Forward {
            tape: Tape::new(),
            source: ParamSource::Store(store),
            leaves: RefCell::new(IndexMap::new()),
            train,
        }
    }

    /// Forward over explicit tensors instead of a store.
    pub fn from_tensors(params: IndexMap<String, Tensor<T>>) -> Self {
        Forward {
            tape: Tape::new(),
            source: ParamSource::Map(params),
            leaves: RefCell::new(IndexMap::new()),
            train: false,
        }
    }

    pub fn tape(&self) -> &Rc<Tape<T>> {
        &self.tape
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Fetch a parameter as a tensor; in train mode it is a tape leaf,
    /// registered once per context.
    pub fn param(&self, name: &str) -> Tensor<T> {
        if let Some(t) = self.leaves.borrow().get(name) {
            return t.clone();
        }
        let tensor = match &self.source {
            ParamSource::Store(store) => {
                let p = store.get(name);
                let plain = Tensor::from_arc(Arc::clone(&p.data), p.shape.clone());
                if self.train {
                    self.tape.leaf(&plain)
                } else {
                    plain
                }
            }
            ParamSource::Map(map) => map
                .get(name)
                .unwrap_or_else(|| panic!("unknown parameter {name}"))
                .clone(),
        };
        self.leaves
            .borrow_mut()
            .insert(name.to_string(), tensor.clone());
        tensor
    }

    /// Raw f64 view of a parameter that stays off the tape (anchors and
    /// other non-learned state).
    pub fn param_f64(&self, name: &str) -> Vec<f64> {
        let tensor = match &self.source {
            ParamSource::Store(store) => store.tensor(name),
            ParamSource::Map(map) => map
                .get(name)
                .unwrap_or_else(|| panic!("unknown parameter {name}"))
                .detach(),
        };
        tensor
            .data()
            .iter()
            .map(|v| v.to_f64().expect("finite parameter"))
            .collect()
    }

    /// Collect per-parameter gradients after `loss.backward()`, in store
    /// order; parameters the loss never touched get zeros.
    pub fn param_grads(&self, grads: &Gradients<T>) -> IndexMap<String, Vec<T>> {
        let ParamSource::Store(store) = &self.source else {
            panic!("param_grads requires a store-backed forward");
        };
        let leaves = self.leaves.borrow();
        let mut out = IndexMap::new();
        for (name, p) in store.iter() {
            let g = match leaves.get(name) {
                Some(leaf) if leaf.requires_grad() => grads.get(leaf),
                _ => vec![T::zero(); p.data.len()],
            };
            out.insert(name.clone(), g);
        }
        out
    }
}

/// Initializer helpers; all sample in f64 and convert, so a given seed
/// produces the same values for f32 and f64 stores.
pub mod init {
    use super::*;
    use rand_distr::StandardNormal;

    pub fn zeros<T: Scalar>(shape: &[usize]) -> Vec<T> {
        vec![T::zero(); shape.iter().product()]
    }

    pub fn ones<T: Scalar>(shape: &[usize]) -> Vec<T> {
        vec![T::one(); shape.iter().product()]
    }

    pub fn normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Vec<T> {
        let n: usize = shape.iter().product();
        (0..n)
            .map(|_| {
                let v: f64 = rng.sample(StandardNormal);
                crate::tensor::t::<T>(v * std)
            })
            .collect()
    }

    /// Uniform Kaiming-style init for a linear layer of the given fan-in.
    pub fn linear<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Vec<T> {
        let bound = (1.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        (0..n)
            .map(|_| crate::tensor::t::<T>(rng.gen_range(-bound..bound)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_leafs_each_param_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        use rand::SeedableRng;
        let _ = &mut rng;
        let mut store = ParamStore::<f64>::new();
        store.insert("w", vec![2.0, 3.0], &[2]);
        let fwd = Forward::new(&store, true);
        let w1 = fwd.param("w");
        let w2 = fwd.param("w");
        // both handles are the same leaf: gradients accumulate
        let loss = w1.mul(&w2).sum();
        let grads = loss.backward();
        let pg = fwd.param_grads(&grads);
        assert_eq!(pg["w"], vec![4.0, 6.0]);
    }

    #[test]
    fn untouched_param_gets_zero_grads() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a", vec![1.0], &[1]);
        store.insert("b", vec![1.0], &[1]);
        let fwd = Forward::new(&store, true);
        let a = fwd.param("a");
        let grads = a.mul(&a).sum().backward();
        let pg = fwd.param_grads(&grads);
        assert_eq!(pg["a"], vec![2.0]);
        assert_eq!(pg["b"], vec![0.0]);
    }

    #[test]
    #[should_panic(expected = "registered twice")]
    fn duplicate_registration_panics() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", vec![0.0], &[1]);
        store.insert("w", vec![0.0], &[1]);
    }

    #[test]
    fn init_is_type_agnostic() {
        use rand::SeedableRng;
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f32> = init::normal(&mut r1, &[8], 0.02);
        let b: Vec<f64> = init::normal(&mut r2, &[8], 0.02);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(*x, *y as f32);
        }
    }
}
