//! Parameter storage, graph bindings and the convolutional building blocks.

mod blocks;
mod layers;

pub use blocks::{DenseBlock, Downsampler, NonBottleneck1d, Transition};
pub use layers::{BatchNorm2d, Conv2d, ConvTranspose2d, BN_EPS, BN_MOMENTUM};

use std::hash::{Hash, Hasher};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// How a parameter is initialised by [`init_params`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on `±sqrt(6 / fan_in)`, variance `2 / fan_in`.
    KaimingUniform { fan_in: usize },
    Zeros,
    Ones,
    Constant(f64),
}

#[derive(Clone, Debug)]
struct Entry<T> {
    tensor: Tensor<T>,
    init: Init,
}

/// Ordered, uniquely named trainable tensors plus non-trainable buffers
/// (batch-norm running statistics). Order is construction order.
#[derive(Clone, Debug)]
pub struct ParamRegistry<T: Element = f32> {
    params: IndexMap<String, Entry<T>>,
    buffers: IndexMap<String, Entry<T>>,
}

impl<T: Element> Default for ParamRegistry<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamRegistry<T> {
    pub fn new() -> Self {
        ParamRegistry {
            params: IndexMap::new(),
            buffers: IndexMap::new(),
        }
    }

    fn check_new(&self, name: &str) -> Result<()> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::invalid("register", format!("duplicate name {name:?}")));
        }
        Ok(())
    }

    pub fn register(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<ParamId> {
        let name = name.into();
        self.check_new(&name)?;
        let mut tensor = Tensor::zeros(shape.to_vec());
        fill_constant(&mut tensor, init);
        tensor.requires_grad = true;
        let (idx, _) = self.params.insert_full(name, Entry { tensor, init });
        Ok(ParamId(idx))
    }

    pub fn register_buffer(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<BufferId> {
        let name = name.into();
        self.check_new(&name)?;
        let mut tensor = Tensor::zeros(shape.to_vec());
        fill_constant(&mut tensor, init);
        let (idx, _) = self.buffers.insert_full(name, Entry { tensor, init });
        Ok(BufferId(idx))
    }

    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].tensor
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).map(|(k, _)| k.as_str()).expect("valid id")
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|e| &e.tensor)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, e)| (k.as_str(), &e.tensor))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, e)| (k.as_str(), &mut e.tensor))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, e)| (k.as_str(), &e.tensor))
    }

    /// Parameters followed by buffers, the order used by checkpoints.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter().chain(self.buffers())
    }

    /// Overwrites the tensor called `name` (parameter or buffer).
    pub fn set(&mut self, name: &str, value: &[T], shape: &[usize]) -> Result<()> {
        let entry = self
            .params
            .get_mut(name)
            .or_else(|| self.buffers.get_mut(name))
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if entry.tensor.shape() != shape {
            return Err(Error::shape(
                "ParamRegistry::set",
                format!("{name}: stored {:?}, given {:?}", entry.tensor.shape(), shape),
            ));
        }
        entry.tensor.data_mut().copy_from_slice(value);
        Ok(())
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.values().map(|e| e.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for e in self.params.values_mut() {
            e.tensor.grad = None;
        }
    }

    pub fn cast<U: Element>(&self) -> ParamRegistry<U> {
        let conv = |m: &IndexMap<String, Entry<T>>| {
            m.iter()
                .map(|(k, e)| {
                    let mut tensor = e.tensor.cast::<U>();
                    tensor.grad = None;
                    (k.clone(), Entry { tensor, init: e.init })
                })
                .collect()
        };
        ParamRegistry {
            params: conv(&self.params),
            buffers: conv(&self.buffers),
        }
    }

    /// Hash over every parameter and buffer bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, t) in self.named_tensors() {
            name.hash(&mut h);
            for v in t.data() {
                v.as_f64().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

fn fill_constant<T: Element>(t: &mut Tensor<T>, init: Init) {
    let v = match init {
        Init::Ones => 1.0,
        Init::Constant(c) => c,
        _ => 0.0,
    };
    t.data_mut().fill(T::lit(v));
}

fn name_seed(seed: u64, name: &str) -> u64 {
    crate::seed::derive(seed, &[crate::seed::label(name)])
}

/// Re-initialises every parameter and buffer. Each tensor draws from its
/// own stream seeded by `(seed, name)`, so values do not depend on
/// construction order.
pub fn init_params<T: Element>(reg: &mut ParamRegistry<T>, seed: u64) {
    for (name, e) in reg.params.iter_mut().chain(reg.buffers.iter_mut()) {
        match e.init {
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, name));
                for v in e.tensor.data_mut() {
                    *v = T::lit(rng.random_range(-bound..bound));
                }
            }
            init => fill_constant(&mut e.tensor, init),
        }
    }
}

/// Builder that prefixes names with a dotted path.
pub struct Scope<'r, T: Element> {
    reg: &'r mut ParamRegistry<T>,
    prefix: String,
}

impl<'r, T: Element> Scope<'r, T> {
    pub fn new(reg: &'r mut ParamRegistry<T>, prefix: impl Into<String>) -> Self {
        Scope {
            reg,
            prefix: prefix.into(),
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn child(&mut self, name: &str) -> Scope<'_, T> {
        let prefix = self.full(name);
        Scope { reg: self.reg, prefix }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let full = self.full(name);
        self.reg.register(full, shape, init)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<BufferId> {
        let full = self.full(name);
        self.reg.register_buffer(full, shape, init)
    }
}

/// Batch-norm behaviour during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages are updated.
    Train,
    /// Running statistics.
    Eval,
    /// Batch statistics without touching the running averages.
    BatchStats,
}

/// Connects a registry to one [`Graph`]: parameters become leaves on first
/// use, and gradients are copied back by [`Binding::store_grads`].
pub struct Binding<'r, T: Element> {
    reg: &'r mut ParamRegistry<T>,
    vars: Vec<Option<Var>>,
    mode: Mode,
    trainable: bool,
    rng: ChaCha8Rng,
}

impl<'r, T: Element> Binding<'r, T> {
    pub fn new(reg: &'r mut ParamRegistry<T>, mode: Mode) -> Self {
        let n = reg.len();
        Binding {
            reg,
            vars: vec![None; n],
            mode,
            trainable: true,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Parameters enter the graph as constants.
    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    /// Seeds the stream used by dropout.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn registry(&self) -> &ParamRegistry<T> {
        self.reg
    }

    pub fn var(&mut self, g: &mut Graph<T>, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = g.leaf(self.reg.param(id).clone(), self.trainable);
        self.vars[id.0] = Some(v);
        v
    }

    /// Binds every parameter so [`Binding::store_grads`] covers the whole
    /// registry, giving zeros to those the loss never reached.
    pub fn bind_all(&mut self, g: &mut Graph<T>) {
        let ids: Vec<ParamId> = self.reg.ids().collect();
        for id in ids {
            self.var(g, id);
        }
    }

    /// Leaf bound to `id`, if the forward pass used it.
    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        self.reg.buffer(id)
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        self.reg.buffer_mut(id)
    }

    /// Copies leaf gradients into the registry. Bound parameters that did
    /// not reach the loss receive zeros; unbound ones keep no gradient.
    pub fn store_grads(&mut self, g: &Graph<T>) {
        if !self.trainable {
            return;
        }
        for (i, v) in self.vars.iter().enumerate() {
            let Some(v) = *v else { continue };
            let t = &mut self.reg.params[i].tensor;
            let grad = g.grad(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); t.numel()]);
            match &mut t.grad {
                Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a = *a + *b),
                slot @ None => *slot = Some(grad),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_rejects_duplicates() {
        let mut r = ParamRegistry::<f32>::new();
        r.register("a", &[2], Init::Zeros).unwrap();
        assert!(r.register("a", &[2], Init::Zeros).is_err());
        assert!(r.register_buffer("a", &[2], Init::Zeros).is_err());
    }

    #[test]
    fn param_count_of_conv_and_bias() {
        let mut r = ParamRegistry::<f32>::new();
        assert_eq!(r.param_count(), 0);
        let mut s = Scope::new(&mut r, "c");
        Conv2d::new(&mut s, "conv", 3, 16, (3, 3), Default::default(), true).unwrap();
        assert_eq!(r.param_count(), 448);
        assert!(r.get("c.conv.weight").is_some());
    }

    #[test]
    fn init_is_seeded_and_sets_gamma() {
        let mut r = ParamRegistry::<f32>::new();
        let mut s = Scope::new(&mut r, "");
        Conv2d::new(&mut s, "conv", 8, 8, (3, 3), Default::default(), true).unwrap();
        BatchNorm2d::new(&mut s, "bn", 8).unwrap();
        let mut a = r.clone();
        init_params(&mut a, 5);
        init_params(&mut r, 5);
        assert_eq!(a.fingerprint(), r.fingerprint());
        assert!(a.get("bn.gamma").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(a.get("conv.bias").unwrap().data().iter().all(|&v| v == 0.0));
        init_params(&mut a, 6);
        assert_ne!(a.fingerprint(), r.fingerprint());
    }

    #[test]
    fn kaiming_variance() {
        let mut r = ParamRegistry::<f64>::new();
        let mut s = Scope::new(&mut r, "");
        // 16 * 64 * 3 * 3 = 9216 weights, fan_in 576
        Conv2d::new(&mut s, "conv", 64, 16, (3, 3), Default::default(), false).unwrap();
        init_params(&mut r, 1);
        let w = r.get("conv.weight").unwrap().data();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let target = 2.0 / 576.0;
        assert!((var / target - 1.0).abs() < 0.2, "{var} vs {target}");
    }
}
