//! Deterministic parameter initialisation.
//!
//! Each parameter draws from its own stream keyed by `(seed, name)`, so the
//! values do not depend on registration order.

use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::{ParamId, ParamStore};
use crate::rng::{fnv1a, CounterRng};
use crate::tensor::{Real, Tensor};

pub struct Initializer<'a, R: Real> {
    pub store: &'a mut ParamStore<R>,
    pub seed: u64,
}

impl<'a, R: Real> Initializer<'a, R> {
    pub fn new(store: &'a mut ParamStore<R>, seed: u64) -> Self {
        Initializer { store, seed }
    }

    fn stream(&self, name: &str) -> CounterRng {
        CounterRng::keyed(self.seed, fnv1a(name.as_bytes()))
    }

    /// Uniform in `±sqrt(6 / fan_in)`.
    pub fn fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = libm::sqrt(6.0 / fan_in as f64);
        let mut rng = self.stream(name);
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
        self.store.add(name, Tensor::from_f64(shape, &data)?)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let mut rng = self.stream(name);
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| std * rng.normal()).collect();
        self.store.add(name, Tensor::from_f64(shape, &data)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store.add(name, Tensor::full(shape, R::from_f64(value)))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.constant(name, shape, 0.0)
    }
}

/// Weight and bias of one affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

impl Affine {
    /// `[in x out]` weight and `[out]` bias.
    pub fn linear<R: Real>(init: &mut Initializer<'_, R>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Affine {
            w: init.fan_in(&alloc::format!("{name}.w"), &[d_in, d_out], d_in)?,
            b: init.zeros(&alloc::format!("{name}.b"), &[d_out])?,
        })
    }

    /// Zero-initialised linear map.
    pub fn linear_zero<R: Real>(init: &mut Initializer<'_, R>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Affine {
            w: init.zeros(&alloc::format!("{name}.w"), &[d_in, d_out])?,
            b: init.zeros(&alloc::format!("{name}.b"), &[d_out])?,
        })
    }

    /// `[k x k x in x out]` kernel and `[out]` bias.
    pub fn conv<R: Real>(init: &mut Initializer<'_, R>, name: &str, k: usize, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Affine {
            w: init.fan_in(&alloc::format!("{name}.w"), &[k, k, c_in, c_out], k * k * c_in)?,
            b: init.zeros(&alloc::format!("{name}.b"), &[c_out])?,
        })
    }
}
