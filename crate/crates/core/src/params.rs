//! Name-keyed parameter declaration, initialization, and graph binding.
//!
//! Layers declare their parameters by name at construction time; a
//! [`ParamStore`] materializes them later from a seed. Each tensor is drawn
//! from an RNG stream keyed by `(seed, name)`, so a parameter's initial value
//! depends only on its own name, never on declaration order or on which other
//! parameters exist. Two model variants that share a parameter name start
//! from bit-identical values.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanInUniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Declaration collector threaded through layer constructors.
#[derive(Default, Debug)]
pub struct ParamSet {
    specs: BTreeMap<String, ParamSpec>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declares a parameter. Duplicate names are construction bugs.
    pub fn declare(&mut self, name: &str, shape: &[usize], init: Init) {
        let prev = self.specs.insert(
            name.to_string(),
            ParamSpec { shape: shape.to_vec(), init },
        );
        assert!(prev.is_none(), "parameter {name:?} declared twice");
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.specs.keys().map(String::as_str)
    }

    pub fn spec(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.get(name)
    }

    /// Materializes every declared parameter from `(seed, name)` streams.
    pub fn init_store<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut params = BTreeMap::new();
        for (name, spec) in &self.specs {
            let t = match spec.init {
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::full(&spec.shape, T::one()),
                Init::FanInUniform { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let mut rng = Rng::for_name(seed, name);
                    Tensor::uniform(&spec.shape, -bound, bound, &mut rng)
                }
            };
            params.insert(name.clone(), t);
        }
        ParamStore { params }
    }
}

/// The concrete parameter values of one model instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn empty() -> Self {
        ParamStore { params: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name:?}")))
    }

    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        match self.params.get_mut(name) {
            Some(slot) => {
                if slot.shape() != value.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "param_set",
                        lhs: slot.shape().to_vec(),
                        rhs: value.shape().to_vec(),
                    });
                }
                *slot = value;
                Ok(())
            }
            None => Err(Error::config(format!("unknown parameter {name:?}"))),
        }
    }

    pub fn insert(&mut self, name: String, value: Tensor<T>) {
        self.params.insert(name, value);
    }

    /// Name-ordered iteration; the order every reduction and update uses.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Loads every parameter of this store into `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> Bound {
        let mut ids = BTreeMap::new();
        for (name, tensor) in &self.params {
            ids.insert(name.clone(), g.leaf(tensor.clone(), requires_grad));
        }
        Bound { ids }
    }
}

/// Graph handles for one bound [`ParamStore`], keyed by parameter name.
pub struct Bound {
    ids: BTreeMap<String, NodeId>,
}

impl Bound {
    pub fn new(ids: BTreeMap<String, NodeId>) -> Self {
        Bound { ids }
    }

    /// Missing names are layer-construction bugs, so this panics rather than
    /// propagating an error through every forward signature.
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} was never declared"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_only_on_seed_and_name() {
        let mut a = ParamSet::new();
        a.declare("enc.w", &[4, 4], Init::FanInUniform { fan_in: 4 });
        a.declare("enc.b", &[4], Init::Zeros);

        let mut b = ParamSet::new();
        b.declare("other.w", &[8], Init::FanInUniform { fan_in: 8 });
        b.declare("enc.w", &[4, 4], Init::FanInUniform { fan_in: 4 });

        let sa: ParamStore<f32> = a.init_store(42);
        let sb: ParamStore<f32> = b.init_store(42);
        assert_eq!(sa.get("enc.w").unwrap(), sb.get("enc.w").unwrap());

        let sc: ParamStore<f32> = a.init_store(43);
        assert_ne!(sa.get("enc.w").unwrap(), sc.get("enc.w").unwrap());
    }

    #[test]
    fn fan_in_bound_is_respected() {
        let mut set = ParamSet::new();
        set.declare("w", &[100, 100], Init::FanInUniform { fan_in: 100 });
        let store: ParamStore<f64> = set.init_store(1);
        let bound = 0.1;
        for &v in store.get("w").unwrap().data() {
            assert!(v.abs() < bound);
        }
    }

    #[test]
    #[should_panic(expected = "declared twice")]
    fn duplicate_declaration_panics() {
        let mut set = ParamSet::new();
        set.declare("w", &[2], Init::Zeros);
        set.declare("w", &[2], Init::Zeros);
    }

    #[test]
    fn set_rejects_shape_change_and_unknown_name() {
        let mut set = ParamSet::new();
        set.declare("w", &[2, 3], Init::Zeros);
        let mut store: ParamStore<f32> = set.init_store(0);
        assert!(store.set("w", Tensor::zeros(&[3, 2])).is_err());
        assert!(store.set("nope", Tensor::zeros(&[1])).is_err());
        assert!(store.set("w", Tensor::full(&[2, 3], 1.0)).is_ok());
    }
}
