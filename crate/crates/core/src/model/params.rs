use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl Params {
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Total scalar count over parameters whose name satisfies `filter`.
    pub fn count_where(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.iter().filter(|(n, _)| filter(n)).map(|(_, t)| t.len()).sum()
    }

    pub fn count(&self) -> usize {
        self.count_where(|_| true)
    }

    /// Replaces values by name; every name and shape must match.
    pub fn load_values<'a>(&mut self, values: impl IntoIterator<Item = (&'a str, &'a [usize], Vec<f64>)>) -> Result<()> {
        let seen = self.load_some(values)?;
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Input(format!("parameter {:?} missing", self.names[missing])));
        }
        Ok(())
    }

    /// Like [`Params::load_values`] but leaves unnamed parameters alone.
    /// Returns which parameters were replaced.
    pub fn load_some<'a>(&mut self, values: impl IntoIterator<Item = (&'a str, &'a [usize], Vec<f64>)>) -> Result<Vec<bool>> {
        let mut seen = vec![false; self.tensors.len()];
        for (name, shape, data) in values {
            let idx = self
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Input(format!("unknown parameter {name:?}")))?;
            if self.tensors[idx].shape() != shape {
                return Err(Error::shape(
                    "load_values",
                    format!("{name}: {:?} vs {shape:?}", self.tensors[idx].shape()),
                ));
            }
            self.tensors[idx] = Tensor::new(shape.to_vec(), data)?;
            seen[idx] = true;
        }
        Ok(seen)
    }
}

/// Parameter initialisation source.
pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { rng }
    }

    /// Glorot-uniform `[fan_in×fan_out]` matrix.
    pub fn matrix(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let data = (0..fan_in * fan_out).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(vec![fan_in, fan_out], data).expect("positive dims")
    }

    pub fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(vec![rows, cols], data).expect("positive dims")
    }

    pub fn constant(&mut self, n: usize, value: f64) -> Tensor {
        Tensor::new(vec![n], vec![value; n]).expect("positive dims")
    }
}
