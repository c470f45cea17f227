//! Named parameter registry and its binding onto a tape.

use indexmap::IndexMap;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ConvAxis, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Ordered `name → tensor` registry. Iteration follows insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Registers every tensor on `tape`; `trainable` makes them params.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.cast::<T>(), trainable)))
            .collect();
        Bound { vars }
    }
}

/// Parameter handles on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    /// Handles for already-registered vars, e.g. when the caller owns the
    /// leaves.
    pub fn from_pairs<S: Into<String>>(pairs: impl IntoIterator<Item = (S, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name:?}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients accumulated on `tape`, in registry order. Parameters the
    /// backward pass never reached get zeros.
    pub fn grads<T: Real>(&self, tape: &Tape<T>) -> Vec<(String, Tensor<T>)> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let g = tape
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
                (k.clone(), g)
            })
            .collect()
    }
}

/// FNV-1a hash of a name, used to key per-name random streams.
pub fn name_seed(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Builds a [`ParamStore`] with seeded initialization. Each tensor draws
/// from its own stream keyed by `(seed, name)`, so a parameter's initial
/// value depends only on its name and shape.
#[derive(Debug)]
pub struct ParamInit {
    pub store: ParamStore,
    seed: u64,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::new(),
            seed,
        }
    }

    fn rng(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ name_seed(name))
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f32) -> Result<()> {
        let mut rng = self.rng(name);
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound));
        self.store.insert(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<()> {
        self.store.insert(name, Tensor::full(shape, value))
    }

    /// `{name}.weight` (cout×cin×k, unit-gain uniform over the fan-in) and
    /// optionally `{name}.bias`.
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) -> Result<()> {
        let bound = (3.0 / (cin * k) as f32).sqrt();
        self.uniform(&format!("{name}.weight"), &[cout, cin, k], bound)?;
        if bias {
            self.constant(&format!("{name}.bias"), &[cout], 0.0)?;
        }
        Ok(())
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}

/// Applies conv `{name}` along `axis` with `pad = (k-1)/2` and adds
/// `{name}.bias` when registered.
pub fn conv<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    name: &str,
    x: Var,
    axis: ConvAxis,
    stride: usize,
) -> Result<Var> {
    let w = p.var(&format!("{name}.weight"))?;
    let k = tape.shape(w)[2];
    conv_padded(tape, p, name, x, axis, stride, (k - 1) / 2)
}

pub fn conv_padded<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    name: &str,
    x: Var,
    axis: ConvAxis,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let w = p.var(&format!("{name}.weight"))?;
    let y = tape.conv_axis(x, w, axis, stride, pad)?;
    let bname = format!("{name}.bias");
    if p.has(&bname) {
        tape.add_bias(y, p.var(&bname)?)
    } else {
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_keyed_by_name() {
        let mut a = ParamInit::new(7);
        a.uniform("x", &[4], 1.0).unwrap();
        a.uniform("y", &[4], 1.0).unwrap();
        let mut b = ParamInit::new(7);
        b.uniform("y", &[4], 1.0).unwrap();
        assert_eq!(a.store.get("y"), b.store.get("y"));
        assert_ne!(a.store.get("x"), a.store.get("y"));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[1])).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[1])).is_err());
    }
}
