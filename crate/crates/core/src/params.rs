//! Named parameter storage shared by all networks.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Trainable parameters plus non-trainable buffers (spectral-norm vectors),
/// both keyed by dotted path names such as `coarse.enc1.feat.w`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing buffer {name}")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing buffer {name}")))
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn group<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor)> + 'a {
        self.params().filter(move |(k, _)| k.starts_with(prefix))
    }

    /// He-normal conv weight `[cout, cin, k, k]` scaled by `gain`, zero bias.
    pub(crate) fn init_conv(
        &mut self,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cout: usize,
        cin: usize,
        k: usize,
        gain: f64,
    ) {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, gain * (2.0 / fan_in).sqrt()).expect("positive std");
        let data = (0..cout * cin * k * k).map(|_| normal.sample(rng)).collect();
        self.insert(
            format!("{prefix}.w"),
            Tensor::from_vec(&[cout, cin, k, k], data).expect("consistent shape"),
        );
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[cout]));
    }

    /// Unit-norm random vector used to seed spectral-norm power iteration.
    pub(crate) fn init_power_vector(&mut self, rng: &mut ChaCha8Rng, name: &str, len: usize) {
        let mut data: Vec<f64> = (0..len).map(|_| rng.random::<f64>() - 0.5).collect();
        let norm = data.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        data.iter_mut().for_each(|v| *v /= norm);
        self.insert_buffer(name, Tensor::from_vec(&[len], data).expect("rank-1"));
    }

    /// Set every parameter to zero. Used by degenerate-case tests.
    pub fn zero_all(&mut self) {
        for t in self.params.values_mut() {
            t.data_mut().fill(0.0);
        }
    }
}
