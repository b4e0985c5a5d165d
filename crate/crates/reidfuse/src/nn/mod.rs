//! Minimal neural-network substrate: a named parameter store, layers with
//! explicit forward/backward passes, and first-order optimizers.
//!
//! Everything runs single-threaded on f32 ndarrays, so a fixed seed yields
//! bit-identical training runs.

pub mod layers;
pub mod optim;

use ndarray::{ArrayD, ArrayViewD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use layers::*;
pub use optim::{Optimizer, OptimizerKind};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
    /// Non-trainable params (e.g. batch-norm running stats) are skipped by
    /// optimizers but still serialized into checkpoints.
    pub trainable: bool,
}

/// Flat, insertion-ordered storage for all weights of a network.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f32>, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate param name {name}"
        );
        let grad = ArrayD::zeros(value.raw_dim());
        self.params.push(Param {
            name,
            value,
            grad,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> ArrayViewD<'_, f32> {
        self.params[id.0].value.view()
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f32> {
        &mut self.params[id.0].value
    }

    /// Accumulates a gradient contribution for one parameter.
    pub fn add_grad<D: ndarray::Dimension>(&mut self, id: ParamId, delta: &ndarray::Array<f32, D>) {
        let g = &mut self.params[id.0].grad;
        debug_assert_eq!(g.shape(), delta.shape(), "grad shape mismatch");
        g.zip_mut_with(&delta.view().into_dyn(), |a, b| *a += *b);
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total number of scalar weights (trainable only).
    pub fn trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Replaces the value of the parameter named `name`, checking shape.
    pub fn load_named(&mut self, name: &str, value: ArrayD<f32>) -> crate::error::Result<()> {
        let param = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| crate::error::Error::Shape(format!("unknown parameter `{name}`")))?;
        if param.value.shape() != value.shape() {
            return Err(crate::error::Error::Shape(format!(
                "parameter `{name}` has shape {:?}, checkpoint provides {:?}",
                param.value.shape(),
                value.shape()
            )));
        }
        param.value = value;
        Ok(())
    }
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// He normal with fan-in: std = sqrt(2 / fan_in).
    HeNormal {
        fan_in: usize,
    },
    /// Normal(0, std) truncated at two standard deviations.
    TruncNormal {
        std: f32,
    },
    Zeros,
    Ones,
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; keeps us off extra dependencies and fully deterministic.
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

pub fn init_array(init: Init, shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f32> {
    match init {
        Init::Zeros => ArrayD::zeros(IxDyn(shape)),
        Init::Ones => ArrayD::from_elem(IxDyn(shape), 1.0),
        Init::HeNormal { fan_in } => {
            let std = (2.0 / fan_in as f64).sqrt();
            ArrayD::from_shape_simple_fn(IxDyn(shape), || (standard_normal(rng) * std) as f32)
        }
        Init::TruncNormal { std } => ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            let z = loop {
                let z = standard_normal(rng);
                if z.abs() <= 2.0 {
                    break z;
                }
            };
            (z * std as f64) as f32
        }),
    }
}

/// Scoped builder that registers parameters under a dotted name prefix.
pub struct VarBuilder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> VarBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> VarBuilder<'a> {
        VarBuilder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> VarBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        VarBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn add(&mut self, name: &str, init: Init, shape: &[usize]) -> ParamId {
        self.add_with(name, init, shape, true)
    }

    pub fn add_buffer(&mut self, name: &str, init: Init, shape: &[usize]) -> ParamId {
        self.add_with(name, init, shape, false)
    }

    fn add_with(&mut self, name: &str, init: Init, shape: &[usize], trainable: bool) -> ParamId {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let value = init_array(init, shape, self.rng);
        self.store.add(full, value, trainable)
    }
}

/// Derives an independent RNG stream from a master seed and a salt
/// (splitmix64 finalizer).
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
