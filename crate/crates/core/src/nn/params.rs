use std::cell::RefCell;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }

    /// Replaces every value from a named list with identical names and shapes.
    pub fn load_named(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.values.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                named.len(),
                self.values.len()
            )));
        }
        for (name, value) in named {
            let id = self
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            if self.values[id.0].shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?} in checkpoint, {:?} in model",
                    value.shape(),
                    self.values[id.0].shape()
                )));
            }
            self.values[id.0] = value;
        }
        Ok(())
    }

    /// Places every parameter on `tape` as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.values.iter().map(|v| tape.param(v.clone())).collect()
    }
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Sub-seed of `seed` for an arbitrary label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    splitmix64(seed ^ splitmix64(h))
}

/// Creates parameters. Each parameter draws from its own generator keyed by
/// name, so adding or removing a module leaves the other initial values
/// untouched.
pub struct ParamInit<'a> {
    store: &'a mut ParamStore,
    seed: u64,
}

impl<'a> ParamInit<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        ParamInit { store, seed }
    }

    /// Uniform(−s, s) with `s = 1/√fan_in`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let s = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, name));
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-s..s)).collect();
        self.store
            .insert(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.insert(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.insert(name, Tensor::full(shape, 1.0))
    }
}

/// Per-forward state: bound parameters, dropout, attention capture.
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    params: Vec<Var<'t>>,
    dropout: f64,
    rng: RefCell<ChaCha8Rng>,
    capture: RefCell<Option<Vec<Tensor>>>,
}

impl<'t> Ctx<'t> {
    /// Evaluation context: no dropout.
    pub fn eval(tape: &'t Tape, store: &ParamStore) -> Self {
        Self::train(tape, store, 0.0, 0)
    }

    pub fn train(tape: &'t Tape, store: &ParamStore, dropout: f64, seed: u64) -> Self {
        Ctx {
            tape,
            params: store.bind(tape),
            dropout,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            capture: RefCell::new(None),
        }
    }

    /// Context over parameters already placed on the tape, in store order.
    pub fn from_vars(tape: &'t Tape, params: Vec<Var<'t>>, dropout: f64, seed: u64) -> Self {
        Ctx {
            tape,
            params,
            dropout,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            capture: RefCell::new(None),
        }
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        self.params[id.0]
    }

    pub fn params(&self) -> &[Var<'t>] {
        &self.params
    }

    pub fn dropout(&self, x: Var<'t>) -> Result<Var<'t>> {
        x.dropout(self.dropout, &mut *self.rng.borrow_mut())
    }

    /// Starts recording post-softmax attention matrices (one per head).
    pub fn start_capture(&self) {
        *self.capture.borrow_mut() = Some(Vec::new());
    }

    pub fn take_capture(&self) -> Vec<Tensor> {
        self.capture.borrow_mut().take().unwrap_or_default()
    }

    pub(crate) fn record_attention(&self, probs: &Var<'t>) {
        if let Some(c) = self.capture.borrow_mut().as_mut() {
            c.push(probs.value());
        }
    }
}
