//! Named parameter storage, seeded initialization and tape binding.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{io, Gradients, Tape, Tensor, Var};

/// Parameter groups used by the staged training schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Backbone,
    Cls,
    Reg,
    Loc,
    Attention,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Backbone,
        ParamGroup::Cls,
        ParamGroup::Reg,
        ParamGroup::Loc,
        ParamGroup::Attention,
    ];

    /// Group of a parameter, derived from its name prefix.
    pub fn of(name: &str) -> Option<ParamGroup> {
        let head = name.split('.').next()?;
        match head {
            "backbone" => Some(ParamGroup::Backbone),
            "attn" => Some(ParamGroup::Attention),
            "split" => name.split('.').nth(1).and_then(Self::branch),
            other => Self::branch(other),
        }
    }

    fn branch(s: &str) -> Option<ParamGroup> {
        match s {
            "cls" => Some(ParamGroup::Cls),
            "reg" => Some(ParamGroup::Reg),
            "loc" => Some(ParamGroup::Loc),
            _ => None,
        }
    }
}

/// Set of trainable groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GroupSet(u8);

impl GroupSet {
    pub const NONE: GroupSet = GroupSet(0);
    pub const ALL: GroupSet = GroupSet(0b11111);

    pub fn of(groups: &[ParamGroup]) -> Self {
        groups.iter().fold(Self::NONE, |s, g| s.with(*g))
    }

    fn bit(g: ParamGroup) -> u8 {
        1 << (g as u8)
    }

    pub fn with(self, g: ParamGroup) -> Self {
        GroupSet(self.0 | Self::bit(g))
    }

    pub fn without(self, g: ParamGroup) -> Self {
        GroupSet(self.0 & !Self::bit(g))
    }

    pub fn contains(self, g: ParamGroup) -> bool {
        self.0 & Self::bit(g) != 0
    }

    pub fn allows(self, name: &str) -> bool {
        ParamGroup::of(name).is_some_and(|g| self.contains(g))
    }
}

/// Initialization rule for a fresh parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `gain * sqrt(2 / fan_in)`.
    FanIn { fan_in: usize, gain: f64 },
    Zeros,
    Constant(f64),
}

/// Stable 64-bit FNV-1a hash, so each parameter's stream depends only on its name.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn init_tensor(seed: u64, name: &str, shape: &[usize], init: Init) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape.to_vec()),
        Init::Constant(v) => Tensor::full(shape.to_vec(), v),
        Init::FanIn { fan_in, gain } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(name));
            let std = gain * (2.0 / fan_in.max(1) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("valid std");
            Tensor::from_fn(shape.to_vec(), |_| normal.sample(&mut rng))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    /// Inserts a seeded parameter.
    pub fn init(&mut self, seed: u64, name: &str, shape: &[usize], init: Init) {
        self.insert(name, init_tensor(seed, name, shape, init));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        io::write_checkpoint(w, &self.tensors)
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        Ok(Self {
            tensors: io::read_checkpoint(r)?,
        })
    }

    /// Replaces every value with one of the same name and shape from `other`.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in &mut self.tensors {
            let src = other.get(name)?;
            if src.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                    t.shape(),
                    src.shape()
                )));
            }
            *t = src.clone();
        }
        if other.len() != self.len() {
            let extra: Vec<_> = other.names().filter(|n| !self.contains(n)).collect();
            return Err(Error::Format(format!("unexpected parameters {extra:?}")));
        }
        Ok(())
    }
}

/// Lazily records parameters from a store onto a tape.
///
/// Each parameter becomes one leaf the first time it is requested; the leaf
/// requires a gradient exactly when its group is in `trainable`.
pub struct Binder<'s> {
    store: &'s ParamStore,
    trainable: GroupSet,
    vars: BTreeMap<String, Var>,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore, trainable: GroupSet) -> Self {
        Self {
            store,
            trainable,
            vars: BTreeMap::new(),
        }
    }

    pub fn frozen(store: &'s ParamStore) -> Self {
        Self::new(store, GroupSet::NONE)
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn var(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let t = self.store.get(name)?.clone();
        let v = tape.leaf(t, self.trainable.allows(name));
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Uses an existing tape value for `name` instead of a fresh leaf.
    pub fn bind(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients for every trainable parameter of the store; parameters not
    /// reached by the computation get an explicit zero gradient.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.store
            .iter()
            .filter(|(name, _)| self.trainable.allows(name))
            .map(|(name, t)| {
                let g = self
                    .vars
                    .get(name)
                    .and_then(|v| grads.get(*v))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
                (name.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_from_names() {
        assert_eq!(ParamGroup::of("backbone.conv1.weight"), Some(ParamGroup::Backbone));
        assert_eq!(ParamGroup::of("split.loc.l0.weight"), Some(ParamGroup::Loc));
        assert_eq!(ParamGroup::of("cls.l2.conv1.bias"), Some(ParamGroup::Cls));
        assert_eq!(ParamGroup::of("attn.reg.fc.weight"), Some(ParamGroup::Attention));
        assert_eq!(ParamGroup::of("mystery"), None);
    }

    #[test]
    fn group_set_membership() {
        let s = GroupSet::of(&[ParamGroup::Cls, ParamGroup::Reg]);
        assert!(s.allows("cls.l0.conv1.weight"));
        assert!(!s.allows("loc.l0.gc.mask"));
        assert!(GroupSet::ALL.without(ParamGroup::Backbone).allows("attn.cls.fc.bias"));
        assert!(!GroupSet::ALL.without(ParamGroup::Backbone).allows("backbone.tap0.weight"));
    }

    #[test]
    fn init_is_name_seeded() {
        let a = init_tensor(7, "x", &[4], Init::FanIn { fan_in: 4, gain: 1.0 });
        let b = init_tensor(7, "x", &[4], Init::FanIn { fan_in: 4, gain: 1.0 });
        let c = init_tensor(7, "y", &[4], Init::FanIn { fan_in: 4, gain: 1.0 });
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn binder_reuses_leaves_and_masks_gradients() {
        let mut store = ParamStore::new();
        store.insert("cls.w", Tensor::from_vec(vec![2.0]));
        store.insert("backbone.w", Tensor::from_vec(vec![3.0]));
        let mut tape = Tape::new();
        let mut b = Binder::new(&store, GroupSet::of(&[ParamGroup::Cls]));
        let w1 = b.var(&mut tape, "cls.w").unwrap();
        assert_eq!(b.var(&mut tape, "cls.w").unwrap(), w1);
        let w2 = b.var(&mut tape, "backbone.w").unwrap();
        let y = tape.mul(w1, w2).unwrap();
        let grads = tape.backward(y).unwrap();
        let g = b.gradients(&grads);
        assert_eq!(g.len(), 1);
        assert_eq!(g["cls.w"].data(), &[3.0]);
        assert!(b.var(&mut tape, "nope").is_err());
    }
}
