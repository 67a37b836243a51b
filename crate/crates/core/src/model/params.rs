//! Named parameter storage and per-forward binding onto a tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors. Order is registration order and is
/// the order used by checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, t: Tensor) -> Result<ParamId> {
        if self.by_name(name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        self.entries.push((name.to_string(), t));
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Registers freshly initialized parameters.
///
/// Weights are uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in))`; biases start at zero.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let t = Tensor::uniform(shape, -bound, bound, &mut self.rng);
        self.store.add(name, t)
    }

    pub fn fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        self.uniform(name, shape, 1.0 / (fan_in as f64).sqrt())
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.store.add(name, Tensor::ones(shape))
    }

    pub fn rng(&mut self) -> &mut impl Rng {
        &mut self.rng
    }
}

/// A tape plus lazily bound parameters for one forward pass.
pub struct Ctx<'a> {
    pub g: Graph,
    params: &'a ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Ctx<'a> {
    /// With `trainable`, parameters are bound as differentiable leaves.
    pub fn new(params: &'a ParamStore, trainable: bool) -> Self {
        Self {
            g: Graph::new(),
            params,
            bound: vec![None; params.len()],
            trainable,
        }
    }

    /// Continues on an existing tape with every parameter already bound, in
    /// store order, to `vars`.
    pub fn with_bindings(g: Graph, params: &'a ParamStore, vars: &[Var]) -> Result<Self> {
        if vars.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} variables for {} parameters",
                vars.len(),
                params.len()
            )));
        }
        Ok(Self {
            g,
            params,
            bound: vars.iter().copied().map(Some).collect(),
            trainable: true,
        })
    }

    pub fn into_graph(self) -> Graph {
        self.g
    }

    /// The tape variable for a parameter, binding it on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.params.get(id).clone();
        let v = if self.trainable {
            self.g.param_named(t, self.params.name(id))
        } else {
            self.g.constant(t)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Per-parameter gradients after `g.backward`; unused parameters get zeros.
    pub fn param_grads(&self) -> Vec<Tensor> {
        self.params
            .ids()
            .map(|id| match self.bound[id.0] {
                Some(v) => self.g.grad_tensor(v),
                None => Tensor::zeros(self.params.get(id).shape()),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(&[1])).unwrap();
        assert!(s.add("a", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn fan_in_bound_respected() {
        let mut s = ParamStore::new();
        let id = Init::new(&mut s, 3).fan_in("w", &[8, 4, 3, 3], 36).unwrap();
        let bound = 1.0 / 6.0;
        assert!(s.get(id).data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn binding_is_memoized() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::ones(&[2])).unwrap();
        let mut ctx = Ctx::new(&s, true);
        let a = ctx.p(id);
        let b = ctx.p(id);
        assert_eq!(a, b);
        assert_eq!(ctx.g.len(), 1);
    }
}
