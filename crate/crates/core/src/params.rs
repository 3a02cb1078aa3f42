//! Named parameter storage and per-forward binding onto a [`Graph`].

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which part of the model a parameter belongs to, derived from the first
/// segment of its dotted name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModuleKind {
    Clip,
    Dino,
    RemoteClip,
    Cma,
    Fusion,
    Decoder,
    Head,
    Other,
}

impl ModuleKind {
    pub fn of(name: &str) -> Self {
        match name.split('.').next().unwrap_or("") {
            "clip" => ModuleKind::Clip,
            "dino" => ModuleKind::Dino,
            "rclip" => ModuleKind::RemoteClip,
            "cma" => ModuleKind::Cma,
            "fusion" => ModuleKind::Fusion,
            "decoder" => ModuleKind::Decoder,
            "head" => ModuleKind::Head,
            _ => ModuleKind::Other,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ModuleKind::Clip => "clip",
            ModuleKind::Dino => "dino",
            ModuleKind::RemoteClip => "remoteclip",
            ModuleKind::Cma => "cma",
            ModuleKind::Fusion => "fusion",
            ModuleKind::Decoder => "decoder",
            ModuleKind::Head => "head",
            ModuleKind::Other => "other",
        }
    }

    pub fn is_encoder(self) -> bool {
        matches!(
            self,
            ModuleKind::Clip | ModuleKind::Dino | ModuleKind::RemoteClip
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    /// Query/key/value/output projection of an encoder mixing block.
    pub attention: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

/// Deterministic RNG for one named tensor.
pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, attention: bool) {
        self.params.insert(name.into(), Param { value, attention });
    }

    /// Gaussian tensor seeded by `(seed, seed_name)`.
    pub fn insert_normal(
        &mut self,
        name: &str,
        seed_name: &str,
        shape: &[usize],
        std: f64,
        seed: u64,
        attention: bool,
    ) {
        let mut rng = named_rng(seed, seed_name);
        let t = Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * std
        });
        self.insert(name, t, attention);
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.tensor_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name}: expected {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }
}

/// Which leaves of a forward pass need gradients.
#[derive(Clone, Debug)]
pub enum GradMask {
    None,
    All,
    Only(HashSet<String>),
}

impl GradMask {
    fn wants(&self, name: &str) -> bool {
        match self {
            GradMask::None => false,
            GradMask::All => true,
            GradMask::Only(set) => set.contains(name),
        }
    }
}

/// Binds parameters from a store onto a graph, once per name.
pub struct Session<'a> {
    store: &'a ParamStore,
    mask: GradMask,
    vars: HashMap<String, Var>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, mask: GradMask) -> Self {
        Session {
            store,
            mask,
            vars: HashMap::new(),
        }
    }

    pub fn inference(store: &'a ParamStore) -> Self {
        Self::new(store, GradMask::None)
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.store.tensor(name)?.clone();
        let v = g.leaf(t, self.mask.wants(name));
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters bound so far, by name.
    pub fn bound(&self) -> &HashMap<String, Var> {
        &self.vars
    }

    /// Linear layer `{prefix}.weight` / `{prefix}.bias` (bias optional).
    pub fn linear(&mut self, g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
        let w = self.var(g, &format!("{prefix}.weight"))?;
        let bias_name = format!("{prefix}.bias");
        let b = if self.store.get(&bias_name).is_some() {
            Some(self.var(g, &bias_name)?)
        } else {
            None
        };
        g.linear(x, w, b)
    }

    pub fn layer_norm(&mut self, g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.var(g, &format!("{prefix}.gamma"))?;
        let beta = self.var(g, &format!("{prefix}.beta"))?;
        g.layer_norm(x, gamma, beta)
    }
}

/// Registration helpers used by module initializers.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub seed: u64,
}

impl Init<'_> {
    pub fn linear(&mut self, prefix: &str, din: usize, dout: usize, bias: bool) {
        self.linear_scaled(prefix, din, dout, bias, 1.0);
    }

    pub fn linear_scaled(&mut self, prefix: &str, din: usize, dout: usize, bias: bool, gain: f64) {
        let name = format!("{prefix}.weight");
        self.store.insert_normal(
            &name,
            &name,
            &[din, dout],
            gain / (din as f64).sqrt(),
            self.seed,
            false,
        );
        if bias {
            self.store
                .insert(format!("{prefix}.bias"), Tensor::zeros(&[dout]), false);
        }
    }

    pub fn layer_norm(&mut self, prefix: &str, d: usize) {
        self.store
            .insert(format!("{prefix}.gamma"), Tensor::full(&[d], 1.0), false);
        self.store
            .insert(format!("{prefix}.beta"), Tensor::zeros(&[d]), false);
    }
}
