//! Named parameter storage.
//!
//! Parameters are created lazily the first time a forward pass asks for
//! them, seeded per name from the store seed, so encoder and decoder
//! construction can never drift apart and initialization does not depend
//! on call order.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GvcError, Result};
use crate::tensor::{Scalar, Tape, Tensor};

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub struct ParamValue<S: Scalar> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

/// FNV-1a 64-bit hash; also used as the checkpoint fingerprint.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Clone, Debug)]
pub struct ParamStore<S: Scalar> {
    entries: BTreeMap<String, ParamValue<S>>,
    seed: u64,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            entries: BTreeMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn get(&self, name: &str) -> Option<&ParamValue<S>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamValue<S>> {
        self.entries.get_mut(name)
    }

    pub fn insert(&mut self, name: String, value: ParamValue<S>) {
        self.entries.insert(name, value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamValue<S>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamValue<S>)> {
        self.entries.iter_mut()
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(|v| v.data.len()).sum()
    }

    pub fn get_or_init(&mut self, name: &str, shape: &[usize], init: Init) -> Result<&ParamValue<S>> {
        if !self.entries.contains_key(name) {
            let n: usize = shape.iter().product();
            let data: Vec<S> = match init {
                Init::Zeros => vec![S::ZERO; n],
                Init::Ones => vec![S::ONE; n],
                Init::Normal(std) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a64(name.as_bytes()));
                    (0..n)
                        .map(|_| S::from_f64(sample_normal(&mut rng) * std))
                        .collect()
                }
            };
            self.entries.insert(
                name.to_string(),
                ParamValue {
                    shape: shape.to_vec(),
                    data,
                },
            );
        }
        let v = self.entries.get(name).unwrap();
        if v.shape != shape {
            return Err(GvcError::dim(format!(
                "parameter {name} has shape {:?}, requested {:?}",
                v.shape, shape
            )));
        }
        Ok(v)
    }

    /// Convert element type (e.g. f32 checkpoint -> f64 for grad checks).
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new(self.seed);
        for (k, v) in &self.entries {
            out.entries.insert(
                k.clone(),
                ParamValue {
                    shape: v.shape.clone(),
                    data: v.data.iter().map(|&x| T::from_f64(x.to_f64())).collect(),
                },
            );
        }
        out
    }
}

/// Box-Muller without trig, via rejection (Marsaglia polar).
fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u: f64 = rng.gen_range(-1.0..1.0);
        let v: f64 = rng.gen_range(-1.0..1.0);
        let s = u * u + v * v;
        if s > 0.0 && s < 1.0 {
            return u * (-2.0 * crate::detmath::ln(s) / s).sqrt();
        }
    }
}

/// Binds a parameter store to a tape for one forward/backward episode.
/// Each name materializes as a single leaf tensor, shared by every use.
pub struct ParamCtx<'a, S: Scalar> {
    store: RefCell<&'a mut ParamStore<S>>,
    tape: Tape<S>,
    tensors: RefCell<HashMap<String, Tensor<S>>>,
    trainable: bool,
}

impl<'a, S: Scalar> ParamCtx<'a, S> {
    pub fn new(store: &'a mut ParamStore<S>, tape: Tape<S>, trainable: bool) -> Self {
        ParamCtx {
            store: RefCell::new(store),
            tape,
            tensors: RefCell::new(HashMap::new()),
            trainable,
        }
    }

    pub fn tape(&self) -> &Tape<S> {
        &self.tape
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor<S>> {
        if let Some(t) = self.tensors.borrow().get(name) {
            if t.shape() != shape {
                return Err(GvcError::dim(format!(
                    "parameter {name} has shape {:?}, requested {:?}",
                    t.shape(),
                    shape
                )));
            }
            return Ok(t.clone());
        }
        let mut store = self.store.borrow_mut();
        let v = store.get_or_init(name, shape, init)?;
        let t = self.tape.leaf(v.data.clone(), v.shape.clone(), self.trainable)?;
        self.tensors.borrow_mut().insert(name.to_string(), t.clone());
        Ok(t)
    }

    /// Gradients of every parameter touched this episode, keyed by name.
    pub fn grads(&self) -> Vec<(String, Vec<S>)> {
        let mut out: Vec<(String, Vec<S>)> = self
            .tensors
            .borrow()
            .iter()
            .filter_map(|(k, t)| t.grad().map(|g| (k.clone(), g)))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Names of parameters touched this episode.
    pub fn touched(&self) -> Vec<String> {
        let mut v: Vec<String> = self.tensors.borrow().keys().cloned().collect();
        v.sort();
        v
    }
}
