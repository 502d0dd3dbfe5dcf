use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Initialization rule for one parameter.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    /// Uniform in ±√(6 / (fan_in + fan_out)).
    Glorot {
        fan_in: usize,
        fan_out: usize,
    },
    /// Uniform in ±1/√fan_in, for recurrent state weights.
    Recurrent {
        fan_in: usize,
    },
    Constant(f64),
}

/// Named trainable tensors in registration order.
///
/// Each tensor's initial values come from its own stream keyed by the model
/// seed and the parameter name, so two models that share a parameter name
/// (and shape) start from the same values for it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

impl ParamStore {
    pub(crate) fn register(
        &mut self,
        seed: u64,
        name: String,
        shape: &[usize],
        init: Init,
    ) -> usize {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &name));
        let tensor = match init {
            Init::Glorot { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::from_fn(shape, |_| rng.gen_range(-a..a))
            }
            Init::Recurrent { fan_in } => {
                let a = 1.0 / (fan_in as f64).sqrt();
                Tensor::from_fn(shape, |_| rng.gen_range(-a..a))
            }
            Init::Constant(v) => Tensor::filled(shape, v),
        };
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Records every parameter on `tape`, differentiable or not.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.variable(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect()
    }

    /// Overwrites values from `(name, tensor)` pairs that must match this store exactly.
    pub fn load(&mut self, incoming: Vec<(String, Tensor)>) -> Result<()> {
        if incoming.len() != self.len() {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!(
                    "{} parameters stored, model has {}",
                    incoming.len(),
                    self.len()
                ),
            });
        }
        for (name, t) in incoming {
            let i = self
                .names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::Format {
                    what: "checkpoint",
                    detail: format!("unknown parameter {name}"),
                })?;
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::shape("load", self.tensors[i].shape(), t.shape()));
            }
            self.tensors[i] = t.with_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_on_seed_and_name_only() {
        let mut a = ParamStore::default();
        let mut b = ParamStore::default();
        a.register(
            3,
            "x.w".into(),
            &[4, 5],
            Init::Glorot {
                fan_in: 4,
                fan_out: 5,
            },
        );
        b.register(3, "other".into(), &[2], Init::Constant(0.0));
        b.register(
            3,
            "x.w".into(),
            &[4, 5],
            Init::Glorot {
                fan_in: 4,
                fan_out: 5,
            },
        );
        assert_eq!(a.get("x.w"), b.get("x.w"));
        let bound = (6.0f64 / 9.0).sqrt();
        assert!(a.tensors()[0].data().iter().all(|v| v.abs() < bound));
        let mut c = ParamStore::default();
        c.register(
            4,
            "x.w".into(),
            &[4, 5],
            Init::Glorot {
                fan_in: 4,
                fan_out: 5,
            },
        );
        assert_ne!(a.get("x.w"), c.get("x.w"));
    }
}
